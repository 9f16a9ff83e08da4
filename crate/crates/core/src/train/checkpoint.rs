//! Checkpoint container: magic `HTSC`, version u16, the model spec as a
//! length-prefixed canonical text header, then every named tensor in the
//! binary tensor format, names sorted lexicographically.

use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use crate::io::{self, FormatError};
use crate::model::{ModelSpec, Parameters, SchemaError};
use crate::tensor::Element;

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"HTSC";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("bad checkpoint magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("spec header: {0}")]
    Spec(#[from] crate::model::ConfigError),
    #[error("checkpoint does not match schema: {0}")]
    Schema(#[from] SchemaError),
}

/// Write spec + parameters atomically (temp file, then rename).
pub fn save_checkpoint<E: Element>(
    path: &Path,
    spec: &ModelSpec,
    params: &Parameters<E>,
) -> Result<(), CheckpointError> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(std::fs::File::create(&tmp)?);
        w.write_all(&CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        io::write_string(&mut w, &spec.to_canonical_text())?;
        // BTreeMap iteration is already lexicographic.
        for (name, tensor) in params.iter() {
            io::write_string(&mut w, name)?;
            io::write_tensor(&mut w, tensor)?;
        }
        w.flush()?;
    }
    std::fs::rename(&tmp, path)?;
    Ok(())
}

/// Load and schema-validate a checkpoint. Any truncation or corruption
/// fails before a parameter set is returned.
pub fn load_checkpoint<E: Element>(
    path: &Path,
) -> Result<(ModelSpec, Parameters<E>), CheckpointError> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let mut vb = [0u8; 2];
    r.read_exact(&mut vb)?;
    let version = u16::from_le_bytes(vb);
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let spec = ModelSpec::from_canonical_text(&io::read_string(&mut r)?)?;
    let mut map = std::collections::BTreeMap::new();
    loop {
        // A clean EOF between records ends the stream; schema validation
        // still rejects a file cut at a record boundary.
        let name = match io::read_string(&mut r) {
            Ok(name) => name,
            Err(FormatError::Io(e)) if e.kind() == std::io::ErrorKind::UnexpectedEof => break,
            Err(e) => return Err(e.into()),
        };
        let tensor = io::read_tensor::<E, _>(&mut r)?;
        map.insert(name, tensor);
    }
    let params = Parameters::from_map(map);
    params.validate_schema(&spec)?;
    Ok((spec, params))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Preset, Task};
    use crate::rng::RngState;

    #[test]
    fn round_trip_is_bitwise_identical() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.htsc");
        let spec = ModelSpec::preset(Preset::Toy, Task::Age8);
        let params: Parameters<f32> = Parameters::init(&spec, RngState::new(77));
        save_checkpoint(&path, &spec, &params).unwrap();
        let (spec2, params2) = load_checkpoint::<f32>(&path).unwrap();
        assert_eq!(spec, spec2);
        assert!(params.bitwise_eq(&params2));
    }

    #[test]
    fn truncated_checkpoint_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.htsc");
        let spec = ModelSpec::preset(Preset::Toy, Task::Gender2);
        let params: Parameters<f32> = Parameters::init(&spec, RngState::new(7));
        save_checkpoint(&path, &spec, &params).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        for cut in [2usize, 9, 60, bytes.len() / 2, bytes.len() - 3] {
            let short = dir.path().join("short.htsc");
            std::fs::write(&short, &bytes[..cut]).unwrap();
            assert!(
                load_checkpoint::<f32>(&short).is_err(),
                "cut at {cut} was accepted"
            );
        }
    }

    #[test]
    fn corrupt_magic_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.htsc");
        let spec = ModelSpec::preset(Preset::Toy, Task::Age8);
        let params: Parameters<f32> = Parameters::init(&spec, RngState::new(7));
        save_checkpoint(&path, &spec, &params).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[0] = b'Z';
        std::fs::write(&path, &bytes).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(&path).unwrap_err(),
            CheckpointError::BadMagic(_)
        ));
    }

    #[test]
    fn schema_mismatch_against_other_preset_is_rejected() {
        // A toy checkpoint evaluated against the big preset must fail the
        // schema comparison, not silently load.
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("ckpt.htsc");
        let toy = ModelSpec::preset(Preset::Toy, Task::Age8);
        let params: Parameters<f32> = Parameters::init(&toy, RngState::new(7));
        save_checkpoint(&path, &toy, &params).unwrap();
        let (loaded_spec, loaded) = load_checkpoint::<f32>(&path).unwrap();
        let big = ModelSpec::preset(Preset::VitB32, Task::Age8);
        assert_ne!(loaded_spec, big);
        assert!(loaded.validate_schema(&big).is_err());
    }
}
