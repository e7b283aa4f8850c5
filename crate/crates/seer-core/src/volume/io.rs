//! On-disk case format: a `case.json` sidecar plus raw binary files, one per
//! volume (32-bit little-endian floats) and one per mask (one 0/1 byte per
//! voxel), all row-major (z, y, x).

use super::{Dims, Laterality, Mask, SceneCase, TargetSpec, Volume, VolumeError};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;
use thiserror::Error;

pub const CASE_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CaseIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad case.json at {path}: {source}")]
    Json {
        path: String,
        source: serde_json::Error,
    },
    #[error("case schema version {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("{path}: expected {expected} bytes, found {actual}")]
    PayloadLength {
        path: String,
        expected: usize,
        actual: usize,
    },
    #[error("{path}: mask byte at voxel {index} is {value}, expected 0 or 1")]
    BadMaskByte {
        path: String,
        index: usize,
        value: u8,
    },
    #[error(transparent)]
    Invalid(#[from] VolumeError),
}

#[derive(Debug, Serialize, Deserialize)]
struct CaseSidecar {
    schema: u32,
    case_id: String,
    dims: Dims,
    spacing: [f64; 3],
    volume_file: String,
    targets: Vec<TargetSidecar>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TargetSidecar {
    target_id: String,
    synonyms: Vec<String>,
    laterality: Option<Laterality>,
    subregion_ids: Vec<String>,
    mask_file: String,
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CaseIoError + '_ {
    move |source| CaseIoError::Io {
        path: path.display().to_string(),
        source,
    }
}

fn write_volume_raw(volume: &Volume, path: &Path) -> Result<(), CaseIoError> {
    let mut bytes = Vec::with_capacity(volume.intensities.len() * 4);
    for &v in &volume.intensities {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_volume_raw(path: &Path, dims: Dims) -> Result<Vec<f32>, CaseIoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let expected = dims.voxel_count() * 4;
    if bytes.len() != expected {
        return Err(CaseIoError::PayloadLength {
            path: path.display().to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect())
}

fn write_mask_raw(mask: &Mask, path: &Path) -> Result<(), CaseIoError> {
    let bytes: Vec<u8> = mask.voxels.iter().map(|&v| v as u8).collect();
    fs::write(path, bytes).map_err(io_err(path))
}

fn read_mask_raw(path: &Path, dims: Dims) -> Result<Mask, CaseIoError> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    let expected = dims.voxel_count();
    if bytes.len() != expected {
        return Err(CaseIoError::PayloadLength {
            path: path.display().to_string(),
            expected,
            actual: bytes.len(),
        });
    }
    let mut voxels = Vec::with_capacity(expected);
    for (index, &value) in bytes.iter().enumerate() {
        match value {
            0 => voxels.push(false),
            1 => voxels.push(true),
            _ => {
                return Err(CaseIoError::BadMaskByte {
                    path: path.display().to_string(),
                    index,
                    value,
                })
            }
        }
    }
    Ok(Mask { dims, voxels })
}

/// Writes one case directory: `case.json`, `volume.f32` and one
/// `<target_id>.mask` per target.
pub fn save_case(case: &SceneCase, dir: &Path) -> Result<(), CaseIoError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    write_volume_raw(&case.volume, &dir.join("volume.f32"))?;
    let mut targets = Vec::with_capacity(case.targets.len());
    for target in case.targets.values() {
        let mask_file = format!("{}.mask", target.target_id);
        write_mask_raw(&target.mask, &dir.join(&mask_file))?;
        targets.push(TargetSidecar {
            target_id: target.target_id.clone(),
            synonyms: target.synonyms.clone(),
            laterality: target.laterality,
            subregion_ids: target.subregion_ids.clone(),
            mask_file,
        });
    }
    let sidecar = CaseSidecar {
        schema: CASE_SCHEMA_VERSION,
        case_id: case.case_id.clone(),
        dims: case.volume.dims,
        spacing: case.volume.spacing,
        volume_file: "volume.f32".into(),
        targets,
    };
    let json_path = dir.join("case.json");
    let mut file = fs::File::create(&json_path).map_err(io_err(&json_path))?;
    serde_json::to_writer_pretty(&mut file, &sidecar).map_err(|source| CaseIoError::Json {
        path: json_path.display().to_string(),
        source,
    })?;
    file.write_all(b"\n").map_err(io_err(&json_path))
}

/// Loads and validates a case directory written by [`save_case`].
pub fn load_case(dir: &Path) -> Result<SceneCase, CaseIoError> {
    let json_path = dir.join("case.json");
    let text = fs::read_to_string(&json_path).map_err(io_err(&json_path))?;
    let sidecar: CaseSidecar = serde_json::from_str(&text).map_err(|source| CaseIoError::Json {
        path: json_path.display().to_string(),
        source,
    })?;
    if sidecar.schema != CASE_SCHEMA_VERSION {
        return Err(CaseIoError::SchemaVersion {
            found: sidecar.schema,
            expected: CASE_SCHEMA_VERSION,
        });
    }
    let intensities = read_volume_raw(&dir.join(&sidecar.volume_file), sidecar.dims)?;
    let volume = Volume {
        id: format!("{}-vol", sidecar.case_id),
        dims: sidecar.dims,
        spacing: sidecar.spacing,
        intensities,
    };
    let mut targets = BTreeMap::new();
    for t in sidecar.targets {
        let mask = read_mask_raw(&dir.join(&t.mask_file), sidecar.dims)?;
        targets.insert(
            t.target_id.clone(),
            TargetSpec {
                target_id: t.target_id,
                synonyms: t.synonyms,
                laterality: t.laterality,
                subregion_ids: t.subregion_ids,
                mask,
            },
        );
    }
    let case = SceneCase {
        case_id: sidecar.case_id,
        volume,
        targets,
    };
    case.validate()?;
    Ok(case)
}

/// Saves each case under `root/<case_id>/`.
pub fn save_corpus(cases: &[SceneCase], root: &Path) -> Result<(), CaseIoError> {
    for case in cases {
        save_case(case, &root.join(&case.case_id))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{synth_corpus, CorpusConfig};

    #[test]
    fn case_round_trips_through_disk() {
        let config = CorpusConfig {
            cases: 1,
            ..Default::default()
        };
        let case = synth_corpus(&config, 4).unwrap().pop().unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_case(&case, dir.path()).unwrap();
        let loaded = load_case(dir.path()).unwrap();
        assert_eq!(case, loaded);
    }

    #[test]
    fn saving_twice_is_byte_identical() {
        let config = CorpusConfig {
            cases: 1,
            ..Default::default()
        };
        let case = synth_corpus(&config, 4).unwrap().pop().unwrap();
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        save_case(&case, dir_a.path()).unwrap();
        save_case(&case, dir_b.path()).unwrap();
        for name in ["case.json", "volume.f32", "left_lesion.mask"] {
            let a = fs::read(dir_a.path().join(name)).unwrap();
            let b = fs::read(dir_b.path().join(name)).unwrap();
            assert_eq!(a, b, "{name}");
        }
    }

    #[test]
    fn truncated_volume_payload_is_reported() {
        let config = CorpusConfig {
            cases: 1,
            ..Default::default()
        };
        let case = synth_corpus(&config, 4).unwrap().pop().unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_case(&case, dir.path()).unwrap();
        let vol = dir.path().join("volume.f32");
        let bytes = fs::read(&vol).unwrap();
        fs::write(&vol, &bytes[..bytes.len() - 4]).unwrap();
        assert!(matches!(
            load_case(dir.path()),
            Err(CaseIoError::PayloadLength { .. })
        ));
    }

    #[test]
    fn bad_mask_byte_is_reported_with_index() {
        let config = CorpusConfig {
            cases: 1,
            ..Default::default()
        };
        let case = synth_corpus(&config, 4).unwrap().pop().unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_case(&case, dir.path()).unwrap();
        let mask_path = dir.path().join("left_lesion.mask");
        let mut bytes = fs::read(&mask_path).unwrap();
        bytes[7] = 3;
        fs::write(&mask_path, bytes).unwrap();
        match load_case(dir.path()) {
            Err(CaseIoError::BadMaskByte {
                index: 7, value: 3, ..
            }) => {}
            other => panic!("unexpected: {other:?}"),
        }
    }
}
