//! Label-based manifest filtering with per-reason drop accounting.

use crate::data::manifest::{Gender, ManifestRow};

/// Drop counts in filter order. Each row is counted once, under the first
/// applicable reason; the face-detection stage fills `no_face` later.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FilterReport {
    pub input: usize,
    pub no_gender: usize,
    pub gender_u: usize,
    pub no_age: usize,
    pub no_face: usize,
    pub retained: usize,
}

impl FilterReport {
    pub fn discarded(&self) -> usize {
        self.no_gender + self.gender_u + self.no_age + self.no_face
    }

    /// Conservation: every input row is either retained or counted exactly
    /// once among the drop reasons.
    pub fn conserved(&self) -> bool {
        self.input == self.retained + self.discarded()
    }

    /// Plain key:value lines for the report file.
    pub fn render(&self) -> String {
        format!(
            "input: {}\nno_gender: {}\ngender_u: {}\nno_age: {}\nno_face: {}\ndiscarded: {}\nretained: {}\n",
            self.input,
            self.no_gender,
            self.gender_u,
            self.no_age,
            self.no_face,
            self.discarded(),
            self.retained
        )
    }
}

/// Drop rows with missing gender, unidentified gender, or missing age — in
/// that order.
pub fn filter_rows(rows: &[ManifestRow]) -> (Vec<ManifestRow>, FilterReport) {
    let mut report = FilterReport {
        input: rows.len(),
        ..FilterReport::default()
    };
    let mut kept = Vec::with_capacity(rows.len());
    for row in rows {
        match (row.gender, row.age_group) {
            (None, _) => report.no_gender += 1,
            (Some(Gender::U), _) => report.gender_u += 1,
            (Some(_), None) => report.no_age += 1,
            (Some(_), Some(_)) => kept.push(row.clone()),
        }
    }
    report.retained = kept.len();
    (kept, report)
}
