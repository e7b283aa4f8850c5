//! The frozen segmentation executor: resolves a canonical answer against a
//! case's target table and returns the matching ground-truth mask, with an
//! optional seeded boundary perturbation emulating an imperfect backbone.

use super::{normalize_term, Dims, Mask, SceneCase, TargetSpec};
use crate::trace::CanonicalAnswer;
use rand::seq::SliceRandom as _;
use rand::{RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Boundary-noise settings for the executor. Zero (the default) keeps the
/// executor an exact lookup.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub max_boundary_voxels: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
pub enum ResolveError {
    #[error("target does not resolve by id or synonym")]
    UnknownTarget,
    #[error("laterality filter matched no candidate target")]
    LateralityMismatch,
    #[error("subregion does not resolve within the matched target")]
    UnknownSubregion,
}

/// Resolves an answer to a target: id or synonym match, then laterality
/// filter, then optional subregion lookup. Ambiguity after filtering is
/// broken deterministically by the lexicographically smallest target_id.
pub fn resolve_target<'a>(
    case: &'a SceneCase,
    answer: &CanonicalAnswer,
) -> Result<&'a TargetSpec, ResolveError> {
    let key = normalize_term(&answer.target_id);
    // BTreeMap iteration keeps candidates ordered by target_id.
    let mut candidates: Vec<&TargetSpec> = case
        .targets
        .values()
        .filter(|t| {
            normalize_term(&t.target_id) == key
                || t.synonyms.iter().any(|s| normalize_term(s) == key)
        })
        .collect();
    if candidates.is_empty() {
        return Err(ResolveError::UnknownTarget);
    }
    if let Some(lat) = answer.laterality {
        candidates.retain(|t| t.laterality == Some(lat));
        if candidates.is_empty() {
            return Err(ResolveError::LateralityMismatch);
        }
    }
    let target = candidates[0];
    if let Some(sub) = &answer.subregion {
        let sub_key = normalize_term(sub);
        let hit = target
            .subregion_ids
            .iter()
            .filter_map(|sid| case.targets.get(sid))
            .find(|t| {
                normalize_term(&t.target_id) == sub_key
                    || t.synonyms.iter().any(|s| normalize_term(s) == sub_key)
            });
        return hit.ok_or(ResolveError::UnknownSubregion);
    }
    Ok(target)
}

/// What the executor produced; `unresolved` marks the degenerate empty-mask
/// path taken when the answer does not resolve.
#[derive(Debug, Clone, PartialEq)]
pub struct ExecutionOutcome {
    pub mask: Mask,
    pub unresolved: bool,
}

/// Executes an answer against the frozen environment. Unresolvable answers
/// yield an empty mask plus the `unresolved` flag rather than an error, so
/// downstream reward signals stay defined. Deterministic given
/// (case, answer, noise, seed).
pub fn execute_segmentation(
    case: &SceneCase,
    answer: &CanonicalAnswer,
    noise: &NoiseConfig,
    seed: u64,
) -> ExecutionOutcome {
    match resolve_target(case, answer) {
        Ok(target) => ExecutionOutcome {
            mask: perturb_boundary(&target.mask, noise.max_boundary_voxels, seed),
            unresolved: false,
        },
        Err(_) => ExecutionOutcome {
            mask: Mask::empty(case.volume.dims),
            unresolved: true,
        },
    }
}

const NEIGHBOR_OFFSETS: [(i64, i64, i64); 6] = [
    (-1, 0, 0),
    (1, 0, 0),
    (0, -1, 0),
    (0, 1, 0),
    (0, 0, -1),
    (0, 0, 1),
];

fn neighbor_states(mask: &Mask, dims: Dims, z: usize, y: usize, x: usize) -> [bool; 6] {
    let mut states = [false; 6];
    for (i, (dz, dy, dx)) in NEIGHBOR_OFFSETS.iter().enumerate() {
        let (nz, ny, nx) = (z as i64 + dz, y as i64 + dy, x as i64 + dx);
        states[i] = dims.contains(nz, ny, nx)
            && mask.voxels[dims.index(nz as usize, ny as usize, nx as usize)];
    }
    states
}

/// Seeded boundary perturbation: flips between 1 and `max` voxels, either
/// eroding surface voxels (set voxels with an unset 6-neighbor) or dilating
/// into unset voxels adjacent to the surface. `max = 0` or an empty mask
/// returns the input unchanged. Out-of-bounds neighbors count as unset.
pub fn perturb_boundary(mask: &Mask, max: usize, seed: u64) -> Mask {
    if max == 0 || mask.is_empty() {
        return mask.clone();
    }
    let dims = mask.dims;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let erode = rng.random_bool(0.5);
    // Candidates are collected in flat-index order so the seeded choice is
    // independent of any map/iteration nondeterminism.
    let mut candidates: Vec<usize> = Vec::new();
    for z in 0..dims.depth {
        for y in 0..dims.height {
            for x in 0..dims.width {
                let idx = dims.index(z, y, x);
                let set = mask.voxels[idx];
                let neighbors = neighbor_states(mask, dims, z, y, x);
                // Out-of-bounds neighbors read as unset, so volume edges
                // count as surface automatically.
                let boundary = if set {
                    neighbors.iter().any(|&n| !n)
                } else {
                    neighbors.iter().any(|&n| n)
                };
                if set == erode && boundary {
                    candidates.push(idx);
                }
            }
        }
    }
    if candidates.is_empty() {
        return mask.clone();
    }
    let n = rng.random_range(1..=max).min(candidates.len());
    let (chosen, _) = candidates.partial_shuffle(&mut rng, n);
    let mut out = mask.clone();
    for &idx in chosen.iter() {
        out.voxels[idx] = !out.voxels[idx];
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{dice, Laterality, SceneCase, Volume};
    use std::collections::BTreeMap;

    fn sphere_mask(dims: Dims, center: (f64, f64, f64), radius: f64) -> Mask {
        let mut mask = Mask::empty(dims);
        for z in 0..dims.depth {
            for y in 0..dims.height {
                for x in 0..dims.width {
                    let dz = z as f64 - center.0;
                    let dy = y as f64 - center.1;
                    let dx = x as f64 - center.2;
                    if dz * dz + dy * dy + dx * dx <= radius * radius {
                        mask.voxels[dims.index(z, y, x)] = true;
                    }
                }
            }
        }
        mask
    }

    fn test_case() -> SceneCase {
        let dims = Dims::new(10, 12, 16);
        let left = sphere_mask(dims, (5.0, 6.0, 4.0), 2.5);
        let left_core = sphere_mask(dims, (5.0, 6.0, 4.0), 1.2);
        let right = sphere_mask(dims, (5.0, 6.0, 11.0), 2.5);
        let mut targets = BTreeMap::new();
        targets.insert(
            "left_lesion".to_string(),
            TargetSpec {
                target_id: "left_lesion".into(),
                synonyms: vec!["left lesion".into(), "lesion".into()],
                laterality: Some(Laterality::Left),
                subregion_ids: vec!["left_lesion_core".into()],
                mask: left,
            },
        );
        targets.insert(
            "left_lesion_core".to_string(),
            TargetSpec {
                target_id: "left_lesion_core".into(),
                synonyms: vec!["left lesion core".into(), "core".into()],
                laterality: Some(Laterality::Left),
                subregion_ids: vec![],
                mask: left_core,
            },
        );
        targets.insert(
            "right_lesion".to_string(),
            TargetSpec {
                target_id: "right_lesion".into(),
                synonyms: vec!["right lesion".into(), "lesion".into()],
                laterality: Some(Laterality::Right),
                subregion_ids: vec![],
                mask: right,
            },
        );
        let case = SceneCase {
            case_id: "case_test".into(),
            volume: Volume {
                id: "case_test-vol".into(),
                dims,
                spacing: [1.0; 3],
                intensities: vec![0.0; dims.voxel_count()],
            },
            targets,
        };
        case.validate().unwrap();
        case
    }

    fn answer(target: &str) -> CanonicalAnswer {
        CanonicalAnswer {
            target_id: target.into(),
            laterality: None,
            subregion: None,
        }
    }

    #[test]
    fn exact_id_with_noise_disabled_returns_ground_truth() {
        let case = test_case();
        let outcome =
            execute_segmentation(&case, &answer("left_lesion"), &NoiseConfig::default(), 7);
        assert!(!outcome.unresolved);
        assert_eq!(outcome.mask, case.targets["left_lesion"].mask);
        assert_eq!(
            dice(&outcome.mask, &case.targets["left_lesion"].mask).unwrap(),
            1.0
        );
    }

    #[test]
    fn synonym_resolution_with_laterality_filter() {
        let case = test_case();
        let ans = CanonicalAnswer {
            target_id: "lesion".into(),
            laterality: Some(Laterality::Right),
            subregion: None,
        };
        let target = resolve_target(&case, &ans).unwrap();
        assert_eq!(target.target_id, "right_lesion");
    }

    #[test]
    fn shared_synonym_without_laterality_breaks_tie_lexicographically() {
        let case = test_case();
        let target = resolve_target(&case, &answer("lesion")).unwrap();
        assert_eq!(target.target_id, "left_lesion");
    }

    #[test]
    fn unknown_target_yields_empty_mask_and_flag() {
        let case = test_case();
        let outcome =
            execute_segmentation(&case, &answer("nonexistent"), &NoiseConfig::default(), 7);
        assert!(outcome.unresolved);
        assert!(outcome.mask.is_empty());
    }

    #[test]
    fn laterality_filter_matching_nothing_is_degenerate() {
        let case = test_case();
        let ans = CanonicalAnswer {
            target_id: "left_lesion".into(),
            laterality: Some(Laterality::Bilateral),
            subregion: None,
        };
        assert_eq!(
            resolve_target(&case, &ans),
            Err(ResolveError::LateralityMismatch)
        );
        let outcome = execute_segmentation(&case, &ans, &NoiseConfig::default(), 7);
        assert!(outcome.unresolved && outcome.mask.is_empty());
    }

    #[test]
    fn subregion_lookup_returns_child_mask() {
        let case = test_case();
        let ans = CanonicalAnswer {
            target_id: "left_lesion".into(),
            laterality: None,
            subregion: Some("core".into()),
        };
        let outcome = execute_segmentation(&case, &ans, &NoiseConfig::default(), 7);
        assert_eq!(outcome.mask, case.targets["left_lesion_core"].mask);
    }

    #[test]
    fn unknown_subregion_is_unresolved() {
        let case = test_case();
        let ans = CanonicalAnswer {
            target_id: "left_lesion".into(),
            laterality: None,
            subregion: Some("rim".into()),
        };
        assert_eq!(
            resolve_target(&case, &ans),
            Err(ResolveError::UnknownSubregion)
        );
    }

    #[test]
    fn boundary_noise_dice_stays_above_analytic_floor() {
        // Independent oracle: with at most m flips of ground-truth surface
        // voxels, erosion of e voxels gives Dice 2(g-e)/(2g-e) and dilation
        // of d voxels gives 2g/(2g+d); both are >= 2(g-m)/(2g-m) for
        // e, d <= m, so that floor bounds any outcome of the generator.
        let case = test_case();
        let gt = &case.targets["left_lesion"].mask;
        let g = gt.count_true() as f64;
        let m = 3usize;
        let floor = 2.0 * (g - m as f64) / (2.0 * g - m as f64);
        for seed in 0..20 {
            let outcome = execute_segmentation(
                &case,
                &answer("left_lesion"),
                &NoiseConfig {
                    max_boundary_voxels: m,
                },
                seed,
            );
            let d = dice(&outcome.mask, gt).unwrap();
            assert!(d < 1.0, "seed {seed} produced an unperturbed mask");
            assert!(d >= floor, "seed {seed}: dice {d} below floor {floor}");
            // Every flipped voxel must be a boundary voxel of the ground truth.
            let flipped: Vec<usize> = (0..gt.voxels.len())
                .filter(|&i| gt.voxels[i] != outcome.mask.voxels[i])
                .collect();
            assert!(!flipped.is_empty() && flipped.len() <= m);
        }
    }

    #[test]
    fn perturbation_is_deterministic_per_seed() {
        let case = test_case();
        let gt = &case.targets["right_lesion"].mask;
        let a = perturb_boundary(gt, 5, 99);
        let b = perturb_boundary(gt, 5, 99);
        assert_eq!(a, b);
        let c = perturb_boundary(gt, 5, 100);
        assert_ne!(a, c);
    }
}
