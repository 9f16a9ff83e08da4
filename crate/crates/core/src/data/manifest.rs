//! Labeled-image manifest rows and their CSV serialization.
//!
//! Columns: `path,age_group,gender,box_x,box_y,box_w,box_h,confidence`.
//! Empty cells mean missing; age groups serialize as `lo-hi`.

use std::fmt;
use std::path::Path;

use crate::data::DataError;

/// The eight age intervals, in order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum AgeGroup {
    A0_2,
    A4_6,
    A8_12,
    A15_20,
    A25_32,
    A38_43,
    A48_53,
    A60_100,
}

impl AgeGroup {
    pub const ALL: [AgeGroup; 8] = [
        AgeGroup::A0_2,
        AgeGroup::A4_6,
        AgeGroup::A8_12,
        AgeGroup::A15_20,
        AgeGroup::A25_32,
        AgeGroup::A38_43,
        AgeGroup::A48_53,
        AgeGroup::A60_100,
    ];

    pub fn bounds(&self) -> (u32, u32) {
        match self {
            AgeGroup::A0_2 => (0, 2),
            AgeGroup::A4_6 => (4, 6),
            AgeGroup::A8_12 => (8, 12),
            AgeGroup::A15_20 => (15, 20),
            AgeGroup::A25_32 => (25, 32),
            AgeGroup::A38_43 => (38, 43),
            AgeGroup::A48_53 => (48, 53),
            AgeGroup::A60_100 => (60, 100),
        }
    }

    /// Position in the canonical class order.
    pub fn index(&self) -> usize {
        Self::ALL.iter().position(|g| g == self).expect("member")
    }

    pub fn parse(s: &str) -> Option<AgeGroup> {
        Self::ALL.iter().copied().find(|g| g.to_string() == s)
    }
}

impl fmt::Display for AgeGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let (lo, hi) = self.bounds();
        write!(f, "{lo}-{hi}")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Gender {
    F,
    M,
    /// Unidentified; discarded during filtering.
    U,
}

impl Gender {
    pub fn parse(s: &str) -> Option<Gender> {
        match s {
            "f" => Some(Gender::F),
            "m" => Some(Gender::M),
            "u" => Some(Gender::U),
            _ => None,
        }
    }

    /// Binary label with the fixed order f = 0, m = 1.
    pub fn label(&self) -> Option<usize> {
        match self {
            Gender::F => Some(0),
            Gender::M => Some(1),
            Gender::U => None,
        }
    }
}

impl fmt::Display for Gender {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Gender::F => "f",
            Gender::M => "m",
            Gender::U => "u",
        })
    }
}

/// A stored detection box in working-resolution pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub x: f32,
    pub y: f32,
    pub w: f32,
    pub h: f32,
    pub confidence: f32,
}

/// One labeled image record.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub path: String,
    pub age_group: Option<AgeGroup>,
    pub gender: Option<Gender>,
    pub detection: Option<Detection>,
}

pub const MANIFEST_HEADER: &str = "path,age_group,gender,box_x,box_y,box_w,box_h,confidence";

pub fn save_manifest(path: &Path, rows: &[ManifestRow]) -> Result<(), DataError> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(MANIFEST_HEADER.split(','))?;
    for row in rows {
        let age = row.age_group.map(|g| g.to_string()).unwrap_or_default();
        let gender = row.gender.map(|g| g.to_string()).unwrap_or_default();
        let det = row.detection;
        let f = |v: Option<f32>| v.map(|v| v.to_string()).unwrap_or_default();
        wtr.write_record([
            row.path.as_str(),
            age.as_str(),
            gender.as_str(),
            f(det.map(|d| d.x)).as_str(),
            f(det.map(|d| d.y)).as_str(),
            f(det.map(|d| d.w)).as_str(),
            f(det.map(|d| d.h)).as_str(),
            f(det.map(|d| d.confidence)).as_str(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn load_manifest(path: &Path) -> Result<Vec<ManifestRow>, DataError> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_path(path)?;
    let mut rows = Vec::new();
    for (line, record) in rdr.records().enumerate() {
        let record = record?;
        if record.len() != 8 {
            return Err(DataError::Manifest(format!(
                "row {}: expected 8 columns, got {}",
                line + 2,
                record.len()
            )));
        }
        let cell = |i: usize| record.get(i).unwrap_or("").trim();
        let age_group = match cell(1) {
            "" => None,
            s => Some(AgeGroup::parse(s).ok_or_else(|| {
                DataError::Manifest(format!("row {}: unknown age group {s:?}", line + 2))
            })?),
        };
        let gender = match cell(2) {
            "" => None,
            s => Some(Gender::parse(s).ok_or_else(|| {
                DataError::Manifest(format!("row {}: unknown gender {s:?}", line + 2))
            })?),
        };
        let nums: Vec<Option<f32>> = (3..8)
            .map(|i| -> Result<Option<f32>, DataError> {
                match cell(i) {
                    "" => Ok(None),
                    s => s.parse::<f32>().map(Some).map_err(|_| {
                        DataError::Manifest(format!("row {}: bad number {s:?}", line + 2))
                    }),
                }
            })
            .collect::<Result<_, _>>()?;
        let detection = match (nums[0], nums[1], nums[2], nums[3], nums[4]) {
            (Some(x), Some(y), Some(w), Some(h), Some(confidence)) => {
                Some(Detection { x, y, w, h, confidence })
            }
            (None, None, None, None, None) => None,
            _ => {
                return Err(DataError::Manifest(format!(
                    "row {}: partial detection box",
                    line + 2
                )))
            }
        };
        rows.push(ManifestRow {
            path: cell(0).to_string(),
            age_group,
            gender,
            detection,
        });
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn age_groups_serialize_as_lo_hi() {
        assert_eq!(AgeGroup::A0_2.to_string(), "0-2");
        assert_eq!(AgeGroup::A60_100.to_string(), "60-100");
        assert_eq!(AgeGroup::parse("25-32"), Some(AgeGroup::A25_32));
        assert_eq!(AgeGroup::A48_53.index(), 6);
        assert_eq!(AgeGroup::parse("1-3"), None);
    }

    #[test]
    fn manifest_round_trips_with_missing_cells() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        let rows = vec![
            ManifestRow {
                path: "a.ppm".into(),
                age_group: Some(AgeGroup::A4_6),
                gender: Some(Gender::M),
                detection: Some(Detection {
                    x: 1.0,
                    y: 2.0,
                    w: 3.0,
                    h: 4.0,
                    confidence: 0.95,
                }),
            },
            ManifestRow {
                path: "b.ppm".into(),
                age_group: None,
                gender: Some(Gender::U),
                detection: None,
            },
        ];
        save_manifest(&path, &rows).unwrap();
        let back = load_manifest(&path).unwrap();
        assert_eq!(back, rows);
    }

    #[test]
    fn save_is_byte_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let rows = vec![ManifestRow {
            path: "x.ppm".into(),
            age_group: Some(AgeGroup::A25_32),
            gender: Some(Gender::F),
            detection: None,
        }];
        let p1 = dir.path().join("a.csv");
        let p2 = dir.path().join("b.csv");
        save_manifest(&p1, &rows).unwrap();
        save_manifest(&p2, &rows).unwrap();
        assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
    }
}
