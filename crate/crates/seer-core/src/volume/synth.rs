//! Desk-scale synthetic corpus generation: lateralized geometric structures
//! with intensity contrast, synonym tables and parent/subregion relations.

use super::{Dims, Laterality, Mask, SceneCase, TargetSpec, Volume};
use crate::hashing::derive_seed_labeled;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub cases: usize,
    pub dims: Dims,
    /// Paired left/right lesion spheres.
    pub lateral_pair: bool,
    /// Concentric core subregions inside each lesion.
    pub subregions: bool,
    /// Paired left/right fragment boxes.
    pub fragments: bool,
    /// A non-lateralized midline sphere.
    pub midline: bool,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            cases: 10,
            dims: Dims::new(16, 24, 24),
            lateral_pair: true,
            subregions: true,
            fragments: true,
            midline: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum CorpusError {
    #[error("corpus config requests zero cases")]
    NoCases,
    #[error("dims {dims} too small for the requested structures; need at least {needed}")]
    DimsTooSmall { dims: Dims, needed: Dims },
}

impl CorpusConfig {
    fn required_dims(&self) -> Dims {
        let mut needed = Dims::new(8, 12, 18);
        if self.fragments {
            needed.height = needed.height.max(16);
        }
        if self.midline {
            needed.depth = needed.depth.max(10);
        }
        needed
    }

    fn validate(&self) -> Result<(), CorpusError> {
        if self.cases == 0 {
            return Err(CorpusError::NoCases);
        }
        let needed = self.required_dims();
        if self.dims.depth < needed.depth
            || self.dims.height < needed.height
            || self.dims.width < needed.width
        {
            return Err(CorpusError::DimsTooSmall {
                dims: self.dims,
                needed,
            });
        }
        Ok(())
    }
}

fn sphere_mask(dims: Dims, center: (f64, f64, f64), radius: f64) -> Mask {
    let mut mask = Mask::empty(dims);
    let r2 = radius * radius;
    for z in 0..dims.depth {
        for y in 0..dims.height {
            for x in 0..dims.width {
                let dz = z as f64 - center.0;
                let dy = y as f64 - center.1;
                let dx = x as f64 - center.2;
                if dz * dz + dy * dy + dx * dx <= r2 {
                    mask.voxels[dims.index(z, y, x)] = true;
                }
            }
        }
    }
    mask
}

fn box_mask(dims: Dims, z0: usize, z1: usize, y0: usize, y1: usize, x0: usize, x1: usize) -> Mask {
    let mut mask = Mask::empty(dims);
    for z in z0..=z1.min(dims.depth - 1) {
        for y in y0..=y1.min(dims.height - 1) {
            for x in x0..=x1.min(dims.width - 1) {
                mask.voxels[dims.index(z, y, x)] = true;
            }
        }
    }
    mask
}

fn paint(volume: &mut Volume, mask: &Mask, base: f32, rng: &mut ChaCha8Rng) {
    for (i, &set) in mask.voxels.iter().enumerate() {
        if set {
            let value = base + rng.random_range(0.0..0.08f32);
            volume.intensities[i] = value.min(1.0);
        }
    }
}

struct StructureSpec {
    target_id: &'static str,
    synonyms: &'static [&'static str],
    laterality: Option<Laterality>,
    subregion_ids: Vec<String>,
}

fn lesion_synonyms(side: Laterality) -> &'static [&'static str] {
    match side {
        Laterality::Left => &[
            "left lesion",
            "lesion",
            "left metastasis",
            "left met",
            "left focal lesion",
        ],
        _ => &[
            "right lesion",
            "lesion",
            "right metastasis",
            "right met",
            "right focal lesion",
        ],
    }
}

fn core_synonyms(side: Laterality) -> &'static [&'static str] {
    match side {
        Laterality::Left => &[
            "left necrotic core",
            "necrotic center of the left lesion",
            "left central necrosis",
            "lesion core",
        ],
        _ => &[
            "right necrotic core",
            "necrotic center of the right lesion",
            "right central necrosis",
            "lesion core",
        ],
    }
}

fn fragment_synonyms(side: Laterality) -> &'static [&'static str] {
    match side {
        Laterality::Left => &[
            "left iliac fragment",
            "iliac fragment",
            "left hip fragment",
            "left pelvic fragment",
        ],
        _ => &[
            "right iliac fragment",
            "iliac fragment",
            "right hip fragment",
            "right pelvic fragment",
        ],
    }
}

const MIDLINE_SYNONYMS: &[&str] = &["midline lesion", "central lesion", "midline focus"];

fn synth_case(config: &CorpusConfig, case_index: usize, seed: u64) -> SceneCase {
    let dims = config.dims;
    let case_id = format!("case_{case_index:04}");
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed_labeled(seed, &["corpus-case", &case_id]));

    let mut volume = Volume {
        id: format!("{case_id}-vol"),
        dims,
        spacing: [1.0, 1.0, 1.0],
        intensities: (0..dims.voxel_count())
            .map(|_| rng.random_range(0.02..0.12f32))
            .collect(),
    };

    let (d, h, w) = (dims.depth as f64, dims.height as f64, dims.width as f64);
    let jitter = |rng: &mut ChaCha8Rng| rng.random_range(-1.0..=1.0f64);

    let mut targets: BTreeMap<String, TargetSpec> = BTreeMap::new();
    let push = |targets: &mut BTreeMap<String, TargetSpec>, spec: StructureSpec, mask: Mask| {
        targets.insert(
            spec.target_id.to_string(),
            TargetSpec {
                target_id: spec.target_id.to_string(),
                synonyms: spec.synonyms.iter().map(|s| s.to_string()).collect(),
                laterality: spec.laterality,
                subregion_ids: spec.subregion_ids,
                mask,
            },
        );
    };

    if config.lateral_pair {
        for side in [Laterality::Left, Laterality::Right] {
            let x_frac = if side == Laterality::Left { 0.25 } else { 0.75 };
            let center = (
                d * 0.5 + jitter(&mut rng),
                h * 0.4 + jitter(&mut rng),
                w * x_frac + jitter(&mut rng),
            );
            let radius = rng.random_range(2.2..3.2f64);
            let mask = sphere_mask(dims, center, radius);
            let base = rng.random_range(0.55..0.85f32);
            paint(&mut volume, &mask, base, &mut rng);
            let (lesion_id, core_id) = match side {
                Laterality::Left => ("left_lesion", "left_lesion_core"),
                _ => ("right_lesion", "right_lesion_core"),
            };
            let subregion_ids = if config.subregions {
                vec![core_id.to_string()]
            } else {
                vec![]
            };
            push(
                &mut targets,
                StructureSpec {
                    target_id: lesion_id,
                    synonyms: lesion_synonyms(side),
                    laterality: Some(side),
                    subregion_ids,
                },
                mask,
            );
            if config.subregions {
                let core = sphere_mask(dims, center, (radius / 2.0).max(1.0));
                paint(&mut volume, &core, (base + 0.1).min(0.92), &mut rng);
                push(
                    &mut targets,
                    StructureSpec {
                        target_id: core_id,
                        synonyms: core_synonyms(side),
                        laterality: Some(side),
                        subregion_ids: vec![],
                    },
                    core,
                );
            }
        }
    }

    if config.fragments {
        for side in [Laterality::Left, Laterality::Right] {
            let z0 = 2 + rng.random_range(0..2usize);
            let y0 = (h * 0.7) as usize + rng.random_range(0..2usize);
            let x0 = if side == Laterality::Left {
                2 + rng.random_range(0..2usize)
            } else {
                dims.width - 6 + rng.random_range(0..2usize)
            };
            let mask = box_mask(dims, z0, z0 + 3, y0, y0 + 3, x0, x0 + 2);
            let base = rng.random_range(0.6..0.9f32);
            paint(&mut volume, &mask, base, &mut rng);
            let id = if side == Laterality::Left {
                "left_iliac_fragment"
            } else {
                "right_iliac_fragment"
            };
            push(
                &mut targets,
                StructureSpec {
                    target_id: id,
                    synonyms: fragment_synonyms(side),
                    laterality: Some(side),
                    subregion_ids: vec![],
                },
                mask,
            );
        }
    }

    if config.midline {
        let center = ((d * 0.7).min(d - 3.0), h * 0.15 + 1.0, (w - 1.0) / 2.0);
        let mask = sphere_mask(dims, center, rng.random_range(1.5..2.0f64));
        let base = rng.random_range(0.55..0.85f32);
        paint(&mut volume, &mask, base, &mut rng);
        push(
            &mut targets,
            StructureSpec {
                target_id: "midline_lesion",
                synonyms: MIDLINE_SYNONYMS,
                laterality: None,
                subregion_ids: vec![],
            },
            mask,
        );
    }

    SceneCase {
        case_id,
        volume,
        targets,
    }
}

/// Generates `config.cases` synthetic cases, deterministic per (config, seed).
pub fn synth_corpus(config: &CorpusConfig, seed: u64) -> Result<Vec<SceneCase>, CorpusError> {
    config.validate()?;
    let cases: Vec<SceneCase> = (0..config.cases)
        .map(|i| synth_case(config, i, seed))
        .collect();
    for case in &cases {
        case.validate()
            .expect("generated case violates its own invariants");
    }
    Ok(cases)
}
