//! The frozen segmentation environment: synthetic 3D cases, the multi-view
//! renderer, the answer executor and the Dice metric.
//!
//! Everything in this module is a pure function of its inputs (plus an
//! explicit seed where randomness is involved), so the environment can be
//! shared freely across threads and replayed byte-for-byte.

mod exec;
mod io;
mod render;
mod synth;

pub use exec::{
    execute_segmentation, perturb_boundary, resolve_target, ExecutionOutcome, NoiseConfig,
    ResolveError,
};
pub use io::{load_case, save_case, save_corpus, CaseIoError};
pub use render::{render_views, write_pgm, Plane, View, ViewConfig, ViewKind};
pub use synth::{synth_corpus, CorpusConfig, CorpusError};

use crate::hashing::sha256_hex;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fmt;
use thiserror::Error;

/// Voxel grid dimensions, ordered (depth, height, width) to match the
/// row-major (z, y, x) layout of volumes and masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub depth: usize,
    pub height: usize,
    pub width: usize,
}

impl Dims {
    pub fn new(depth: usize, height: usize, width: usize) -> Self {
        Self {
            depth,
            height,
            width,
        }
    }

    pub fn voxel_count(&self) -> usize {
        self.depth * self.height * self.width
    }

    /// Flat index of voxel (z, y, x) in row-major order.
    pub fn index(&self, z: usize, y: usize, x: usize) -> usize {
        (z * self.height + y) * self.width + x
    }

    pub fn contains(&self, z: i64, y: i64, x: i64) -> bool {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < self.depth
            && (y as usize) < self.height
            && (x as usize) < self.width
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({}, {}, {})", self.depth, self.height, self.width)
    }
}

/// Which side of the mid-sagittal plane a target occupies.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Laterality {
    Left,
    Right,
    Bilateral,
}

impl Laterality {
    pub fn as_str(&self) -> &'static str {
        match self {
            Laterality::Left => "left",
            Laterality::Right => "right",
            Laterality::Bilateral => "bilateral",
        }
    }

    pub fn parse(text: &str) -> Option<Laterality> {
        match text.trim().to_ascii_lowercase().as_str() {
            "left" => Some(Laterality::Left),
            "right" => Some(Laterality::Right),
            "bilateral" => Some(Laterality::Bilateral),
            _ => None,
        }
    }

    pub fn opposite(&self) -> Laterality {
        match self {
            Laterality::Left => Laterality::Right,
            Laterality::Right => Laterality::Left,
            Laterality::Bilateral => Laterality::Bilateral,
        }
    }
}

impl fmt::Display for Laterality {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Error)]
pub enum VolumeError {
    #[error("intensity buffer has {actual} voxels, dims {dims} require {expected}")]
    IntensityLength {
        dims: Dims,
        expected: usize,
        actual: usize,
    },
    #[error("intensity at flat index {index} is {value}, outside [0, 1]")]
    IntensityRange { index: usize, value: f32 },
    #[error("dims {0} contain a zero extent")]
    ZeroDim(Dims),
    #[error("mask buffer has {actual} voxels, dims {dims} require {expected}")]
    MaskLength {
        dims: Dims,
        expected: usize,
        actual: usize,
    },
    #[error("mask dims {pred} do not match {gt}")]
    DimMismatch { pred: Dims, gt: Dims },
    #[error("case {case_id}: {reason}")]
    InvalidCase { case_id: String, reason: String },
}

/// A scalar 3D volume with intensities normalized to [0, 1].
#[derive(Debug, Clone, PartialEq)]
pub struct Volume {
    pub id: String,
    pub dims: Dims,
    /// Voxel spacing (dz, dy, dx) in millimeters. Metadata only at desk
    /// scale; no operation interprets it.
    pub spacing: [f64; 3],
    /// Row-major (z, y, x) intensities, length `dims.voxel_count()`.
    pub intensities: Vec<f32>,
}

impl Volume {
    pub fn validate(&self) -> Result<(), VolumeError> {
        if self.dims.depth == 0 || self.dims.height == 0 || self.dims.width == 0 {
            return Err(VolumeError::ZeroDim(self.dims));
        }
        let expected = self.dims.voxel_count();
        if self.intensities.len() != expected {
            return Err(VolumeError::IntensityLength {
                dims: self.dims,
                expected,
                actual: self.intensities.len(),
            });
        }
        for (index, &value) in self.intensities.iter().enumerate() {
            if !value.is_finite() || !(0.0..=1.0).contains(&value) {
                return Err(VolumeError::IntensityRange { index, value });
            }
        }
        Ok(())
    }
}

/// A binary voxel mask sharing the volume layout.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mask {
    pub dims: Dims,
    pub voxels: Vec<bool>,
}

impl Mask {
    pub fn empty(dims: Dims) -> Self {
        Self {
            dims,
            voxels: vec![false; dims.voxel_count()],
        }
    }

    pub fn validate(&self) -> Result<(), VolumeError> {
        let expected = self.dims.voxel_count();
        if self.voxels.len() != expected {
            return Err(VolumeError::MaskLength {
                dims: self.dims,
                expected,
                actual: self.voxels.len(),
            });
        }
        Ok(())
    }

    pub fn count_true(&self) -> usize {
        self.voxels.iter().filter(|&&v| v).count()
    }

    pub fn is_empty(&self) -> bool {
        !self.voxels.iter().any(|&v| v)
    }

    /// True iff every set voxel of `self` is also set in `other`.
    pub fn is_subset_of(&self, other: &Mask) -> bool {
        self.dims == other.dims
            && self
                .voxels
                .iter()
                .zip(other.voxels.iter())
                .all(|(&a, &b)| !a || b)
    }

    /// Mean voxel coordinate (z, y, x) of set voxels, or None when empty.
    pub fn centroid(&self) -> Option<(f64, f64, f64)> {
        let mut count = 0usize;
        let (mut sz, mut sy, mut sx) = (0f64, 0f64, 0f64);
        for z in 0..self.dims.depth {
            for y in 0..self.dims.height {
                for x in 0..self.dims.width {
                    if self.voxels[self.dims.index(z, y, x)] {
                        count += 1;
                        sz += z as f64;
                        sy += y as f64;
                        sx += x as f64;
                    }
                }
            }
        }
        if count == 0 {
            return None;
        }
        let n = count as f64;
        Some((sz / n, sy / n, sx / n))
    }

    /// Content digest used in episode records (dims plus voxel bytes).
    pub fn digest_hex(&self) -> String {
        let mut bytes = Vec::with_capacity(24 + self.voxels.len());
        bytes.extend_from_slice(&(self.dims.depth as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.dims.height as u64).to_le_bytes());
        bytes.extend_from_slice(&(self.dims.width as u64).to_le_bytes());
        bytes.extend(self.voxels.iter().map(|&v| v as u8));
        sha256_hex(&bytes)
    }
}

/// One named, executable segmentation target inside a case.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetSpec {
    pub target_id: String,
    pub synonyms: Vec<String>,
    pub laterality: Option<Laterality>,
    pub subregion_ids: Vec<String>,
    pub mask: Mask,
}

/// A synthetic scene: one volume plus its ground-truth target table.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneCase {
    pub case_id: String,
    pub volume: Volume,
    pub targets: BTreeMap<String, TargetSpec>,
}

impl SceneCase {
    pub fn validate(&self) -> Result<(), VolumeError> {
        let invalid = |reason: String| VolumeError::InvalidCase {
            case_id: self.case_id.clone(),
            reason,
        };
        self.volume.validate()?;
        if self.targets.is_empty() {
            return Err(invalid("case has no targets".into()));
        }
        for (key, target) in &self.targets {
            if target.target_id.is_empty() {
                return Err(invalid("empty target_id".into()));
            }
            if key != &target.target_id {
                return Err(invalid(format!(
                    "target table key {key} does not match target_id {}",
                    target.target_id
                )));
            }
            target.mask.validate()?;
            if target.mask.dims != self.volume.dims {
                return Err(VolumeError::DimMismatch {
                    pred: target.mask.dims,
                    gt: self.volume.dims,
                });
            }
            for sub_id in &target.subregion_ids {
                let sub = self.targets.get(sub_id).ok_or_else(|| {
                    invalid(format!("subregion {sub_id} of {key} is not a case target"))
                })?;
                if !sub.mask.is_subset_of(&target.mask) {
                    return Err(invalid(format!(
                        "subregion {sub_id} is not a voxel-subset of {key}"
                    )));
                }
            }
        }
        Ok(())
    }
}

/// Dice overlap 2|A∩B| / (|A|+|B|); both-empty pairs score 1.0.
pub fn dice(pred: &Mask, gt: &Mask) -> Result<f64, VolumeError> {
    if pred.dims != gt.dims {
        return Err(VolumeError::DimMismatch {
            pred: pred.dims,
            gt: gt.dims,
        });
    }
    let mut intersection = 0usize;
    let mut pred_count = 0usize;
    let mut gt_count = 0usize;
    for (&p, &g) in pred.voxels.iter().zip(gt.voxels.iter()) {
        intersection += (p && g) as usize;
        pred_count += p as usize;
        gt_count += g as usize;
    }
    if pred_count + gt_count == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * intersection as f64 / (pred_count + gt_count) as f64)
}

/// Lowercases, treats underscores as spaces and collapses whitespace; the
/// shared normalization for target ids, synonyms and answer fields, so
/// `left_lesion` and `Left Lesion` compare equal.
pub fn normalize_term(text: &str) -> String {
    text.replace('_', " ")
        .trim()
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}
