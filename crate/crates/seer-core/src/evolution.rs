//! The round loop: sample tasks, retrieve skills from a frozen bank
//! snapshot, query the policy, parse, execute, reward, select top episodes,
//! distill, update the bank and emit audit reports.
//!
//! Everything in a round is a pure function of (corpus, bank snapshot,
//! config seeds); episodes may evaluate concurrently, and the bank mutates
//! exactly once, single-threaded, at the round boundary. Scripted-mode runs
//! are byte-identical regardless of thread count.

use crate::bank::{
    cull, default_skill_tags, distill, marginal_gain, retrieve, save_bank, update_bank, BankError,
    CullConfig, DistillMode, SkillBank,
};
use crate::episode::{episode_id, write_episodes, Episode, EpisodeFlags, EpisodeLogError};
use crate::hashing::derive_seed_labeled;
use crate::perturb::{
    generate_variants, synth_request, PerturbError, RephrasingGroup, VariantCategory,
};
use crate::policy::{
    build_prompt, build_scripted_table, prompt_digest, DecodingParams, GrpoGroup, Policy,
    PolicyInput, ScriptedParams, ScriptedPolicy, TableError,
};
use crate::reward::{
    composite_reward, group_metrics, objective, stability_term, GroupEvaluation, RewardBreakdown,
    RewardError, RewardWeights,
};
use crate::trace::{case_vocabulary, parse_structured_output, score_format, Request, RequestStyle};
use crate::volume::{
    dice, execute_segmentation, render_views, Mask, NoiseConfig, SceneCase, View, ViewConfig,
};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundConfig {
    /// Target episodes per round; rounded down to whole rephrasing groups.
    pub episodes_per_round: usize,
    /// Group size |Ω(q)|: one base request plus variants.
    pub variants_per_request: usize,
    /// Fraction ρ of floor-eligible episodes distilled per round.
    pub top_fraction: f64,
    /// Absolute composite-reward floor for distillation eligibility.
    pub reward_floor: f64,
    pub retrieval_k: usize,
    pub retrieval_enabled: bool,
    pub distillation_enabled: bool,
    pub weights: RewardWeights,
    pub lambda: f64,
    pub seed: u64,
    pub noise: NoiseConfig,
    pub decoding: DecodingParams,
    pub typo_budget: usize,
    /// Styles base requests are drawn from.
    pub base_styles: Vec<RequestStyle>,
    pub cull: Option<CullConfig>,
}

impl Default for RoundConfig {
    fn default() -> Self {
        Self {
            episodes_per_round: 60,
            variants_per_request: 5,
            top_fraction: 0.2,
            reward_floor: 0.5,
            retrieval_k: 4,
            retrieval_enabled: true,
            distillation_enabled: true,
            weights: RewardWeights::default(),
            lambda: 1.0,
            seed: 42,
            noise: NoiseConfig::default(),
            decoding: DecodingParams::default(),
            typo_budget: crate::perturb::DEFAULT_TYPO_BUDGET,
            base_styles: vec![
                RequestStyle::RadiologyNote,
                RequestStyle::Referral,
                RequestStyle::ConsultQuestion,
            ],
            cull: None,
        }
    }
}

#[derive(Debug, Error)]
pub enum LoopError {
    #[error("corpus is empty")]
    EmptyCorpus,
    #[error("round config invalid: {0}")]
    BadConfig(String),
    #[error("bank snapshot invalid: {0}")]
    BadBank(String),
    #[error(transparent)]
    Perturb(#[from] PerturbError),
    #[error(transparent)]
    Table(#[from] TableError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error(transparent)]
    Bank(#[from] BankError),
    #[error(transparent)]
    EpisodeLog(#[from] EpisodeLogError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> LoopError + '_ {
    move |source| LoopError::Io {
        path: path.display().to_string(),
        source,
    }
}

/// Which policy drives the loop: the scripted simulator (built per round so
/// its answer table covers the round's requests) or an external client.
pub enum LoopPolicy<'a> {
    Scripted(ScriptedParams),
    External(&'a dyn Policy),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DiceStats {
    pub mean: f64,
    pub std: f64,
    pub worst: f64,
}

/// Per-round audit record. `k_start` is the retrieval snapshot size (K_t);
/// `k_end` is the bank size after update and culling (K_{t+1}).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundReport {
    pub round: u64,
    pub k_start: usize,
    pub k_end: usize,
    pub new_skill_count: usize,
    pub culled_count: usize,
    pub episode_count: usize,
    pub group_count: usize,
    pub per_tag_retrieval_frequency: BTreeMap<String, u64>,
    /// Statistics over all episode Dice scores pooled.
    pub pooled: DiceStats,
    /// Mean of per-group means / population stds / worsts.
    pub per_group: DiceStats,
    pub objective: f64,
    pub marginal_gains: BTreeMap<String, Option<f64>>,
}

/// One planned rephrasing group before evaluation.
#[derive(Debug, Clone)]
pub struct PlannedGroup {
    pub case_id: String,
    pub target_id: String,
    pub group: RephrasingGroup,
    /// None for the base request, the category for each variant.
    pub categories: Vec<Option<VariantCategory>>,
}

impl PlannedGroup {
    pub fn requests(&self) -> Vec<&Request> {
        self.group.all_requests()
    }
}

/// Samples (case, target, style) triples and expands each into a base
/// request plus its rephrasing set. Deterministic per (config, round_seed).
pub fn plan_groups(
    corpus: &[SceneCase],
    config: &RoundConfig,
    round_seed: u64,
    base_styles: &[RequestStyle],
) -> Result<Vec<PlannedGroup>, LoopError> {
    use rand::{RngExt, SeedableRng};
    if corpus.is_empty() {
        return Err(LoopError::EmptyCorpus);
    }
    if config.variants_per_request == 0 {
        return Err(LoopError::BadConfig(
            "variants_per_request must be >= 1".into(),
        ));
    }
    if base_styles.is_empty() {
        return Err(LoopError::BadConfig("base_styles must be non-empty".into()));
    }
    if !(config.top_fraction > 0.0 && config.top_fraction <= 1.0) {
        return Err(LoopError::BadConfig(format!(
            "top_fraction {} outside (0, 1]",
            config.top_fraction
        )));
    }
    if !(0.0..=1.0).contains(&config.reward_floor) {
        return Err(LoopError::BadConfig(format!(
            "reward_floor {} outside [0, 1]",
            config.reward_floor
        )));
    }
    let group_count = (config.episodes_per_round / config.variants_per_request).max(1);
    let mut groups = Vec::with_capacity(group_count);
    for g in 0..group_count {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(derive_seed_labeled(
            round_seed,
            &["sample", &g.to_string()],
        ));
        let case = &corpus[rng.random_range(0..corpus.len())];
        let target_ids: Vec<&String> = case.targets.keys().collect();
        let target_id = target_ids[rng.random_range(0..target_ids.len())].clone();
        let style = base_styles[rng.random_range(0..base_styles.len())];
        let base = synth_request(
            case,
            &target_id,
            style,
            format!("g{g:03}-{}-{target_id}", case.case_id),
            derive_seed_labeled(round_seed, &["base-text", &g.to_string()]),
        )?;
        let variant_count = config.variants_per_request - 1;
        let categories: Vec<VariantCategory> = (0..variant_count)
            .map(|i| VariantCategory::ALL[i % VariantCategory::ALL.len()])
            .collect();
        let group = if variant_count == 0 {
            RephrasingGroup {
                base,
                variants: vec![],
                categories: vec![],
            }
        } else {
            generate_variants(
                case,
                &base,
                &categories,
                1,
                config.typo_budget,
                derive_seed_labeled(round_seed, &["variants", &g.to_string()]),
            )?
        };
        let mut slot_categories = vec![None];
        slot_categories.extend(group.categories.iter().copied().map(Some));
        groups.push(PlannedGroup {
            case_id: case.case_id.clone(),
            target_id,
            group,
            categories: slot_categories,
        });
    }
    Ok(groups)
}

/// Result of evaluating one round's planned groups (no bank mutation).
pub struct EvaluatedRound {
    pub episodes: Vec<Episode>,
    pub group_evals: Vec<GroupEvaluation>,
    pub grpo_groups: Vec<GrpoGroup>,
    pub pooled: DiceStats,
    pub per_group: DiceStats,
    pub objective: f64,
    pub per_tag_retrieval_frequency: BTreeMap<String, u64>,
}

struct EpisodeOutcome {
    episode: Episode,
    dice: f64,
    candidates: Vec<String>,
    candidate_partials: Vec<(f64, f64)>, // (dice, format) per candidate
}

/// Shared, read-only state for evaluating one episode.
struct EpisodeCtx<'a> {
    case: &'a SceneCase,
    views: &'a [View],
    bank: &'a SkillBank,
    policy: &'a dyn Policy,
    config: &'a RoundConfig,
}

fn view_cache(corpus: &[SceneCase]) -> BTreeMap<String, Vec<View>> {
    corpus
        .iter()
        .map(|c| {
            (
                c.case_id.clone(),
                render_views(&c.volume, &ViewConfig::default()),
            )
        })
        .collect()
}

fn evaluate_episode(
    ctx: &EpisodeCtx<'_>,
    request: &Request,
    id: String,
    episode_seed: u64,
) -> EpisodeOutcome {
    let EpisodeCtx {
        case,
        views,
        bank,
        policy,
        config,
    } = *ctx;
    let skills = if config.retrieval_enabled && config.retrieval_k > 0 {
        let captions: Vec<String> = views.iter().map(|v| v.caption.clone()).collect();
        retrieve(bank, &request.text, &captions, config.retrieval_k)
    } else {
        vec![]
    };
    let retrieved_skill_ids: Vec<String> = skills.iter().map(|s| s.skill_id.clone()).collect();
    let input = PolicyInput {
        views: views.to_vec(),
        request_text: request.text.clone(),
        skills,
        decoding: config.decoding,
    };
    let messages = build_prompt(&input, false);
    let digest = prompt_digest(&messages);

    let output = match policy.generate(&input) {
        Ok(output) => output,
        Err(_) => {
            // Exhausted transport: a zero-reward episode, flagged.
            return EpisodeOutcome {
                episode: Episode {
                    episode_id: id,
                    case_id: case.case_id.clone(),
                    request: request.clone(),
                    retrieved_skill_ids,
                    prompt_digest: digest,
                    raw_output: String::new(),
                    parsed: Default::default(),
                    predicted_mask_digest: Mask::empty(case.volume.dims).digest_hex(),
                    reward: RewardBreakdown::zero(),
                    flags: EpisodeFlags {
                        transport_failure: true,
                        unresolved: true,
                        parse_incomplete: true,
                    },
                },
                dice: 0.0,
                candidates: vec![],
                candidate_partials: vec![],
            };
        }
    };

    let tags = default_skill_tags();
    let vocabulary = case_vocabulary(case);
    let gt = &case.targets[&request.intent_target].mask;
    let mut best: Option<(f64, usize)> = None;
    let mut evaluated = Vec::with_capacity(output.raw_texts.len());
    for (idx, raw) in output.raw_texts.iter().enumerate() {
        let (parsed, _) = parse_structured_output(raw);
        let format_term = score_format(raw, &tags, &vocabulary).compliance;
        let (dice_term, unresolved, mask_digest) = match &parsed.answer {
            Some(answer) => {
                let exec_seed = derive_seed_labeled(episode_seed, &["noise", &idx.to_string()]);
                let outcome = execute_segmentation(case, answer, &config.noise, exec_seed);
                let d = dice(&outcome.mask, gt).expect("executor preserves dims");
                (d, outcome.unresolved, outcome.mask.digest_hex())
            }
            None => (0.0, true, Mask::empty(case.volume.dims).digest_hex()),
        };
        // Stability is a group-level term shared by all candidates, so
        // ranking by the dice and format terms alone picks the same best
        // candidate the full composite would.
        let partial_score = config.weights.w_dice * dice_term + config.weights.w_fmt * format_term;
        if best.map(|(score, _)| partial_score > score).unwrap_or(true) {
            best = Some((partial_score, idx));
        }
        evaluated.push((parsed, format_term, dice_term, unresolved, mask_digest));
    }
    let best_idx = best.map(|(_, idx)| idx).unwrap_or(0);
    let (parsed, format_term, dice_term, unresolved, mask_digest) = evaluated[best_idx].clone();
    let candidate_partials: Vec<(f64, f64)> =
        evaluated.iter().map(|(_, f, d, _, _)| (*d, *f)).collect();
    EpisodeOutcome {
        episode: Episode {
            episode_id: id,
            case_id: case.case_id.clone(),
            request: request.clone(),
            retrieved_skill_ids,
            prompt_digest: digest,
            raw_output: output.raw_texts[best_idx].clone(),
            parsed: parsed.clone(),
            predicted_mask_digest: mask_digest,
            reward: RewardBreakdown {
                dice_term,
                stability_term: 0.0, // finalized after the group completes
                format_term,
                composite: 0.0,
            },
            flags: EpisodeFlags {
                unresolved,
                transport_failure: false,
                parse_incomplete: parsed.answer.is_none(),
            },
        },
        dice: dice_term,
        candidates: output.raw_texts,
        candidate_partials,
    }
}

/// Evaluates planned groups against a frozen bank snapshot. Group work runs
/// in parallel; outputs are index-joined so results are schedule-invariant.
pub fn evaluate_planned(
    corpus: &[SceneCase],
    bank: &SkillBank,
    policy: &LoopPolicy<'_>,
    config: &RoundConfig,
    round: u64,
    groups: &[PlannedGroup],
) -> Result<EvaluatedRound, LoopError> {
    for artifact in &bank.artifacts {
        if artifact.embedding.len() != bank.config.embedding_dim {
            return Err(LoopError::BadBank(format!(
                "artifact {} embedding length {} does not match bank dim {}",
                artifact.skill_id,
                artifact.embedding.len(),
                bank.config.embedding_dim
            )));
        }
    }
    let cases: BTreeMap<&str, &SceneCase> =
        corpus.iter().map(|c| (c.case_id.as_str(), c)).collect();
    let views = view_cache(corpus);
    let round_seed = derive_seed_labeled(config.seed, &["round", &round.to_string()]);

    // Scripted mode builds its answer table from this round's requests.
    let scripted: Option<ScriptedPolicy> = match policy {
        LoopPolicy::Scripted(params) => {
            let mut pairs: Vec<(Request, Option<VariantCategory>)> = Vec::new();
            for planned in groups {
                for (request, category) in planned
                    .requests()
                    .into_iter()
                    .zip(planned.categories.iter())
                {
                    pairs.push((request.clone(), *category));
                }
            }
            let table = build_scripted_table(corpus, &pairs, config.seed)?;
            Some(
                ScriptedPolicy::new(
                    table,
                    *params,
                    derive_seed_labeled(config.seed, &["policy"]),
                )
                .map_err(|e| LoopError::BadConfig(e.to_string()))?,
            )
        }
        LoopPolicy::External(_) => None,
    };
    let policy_ref: &dyn Policy = match (&scripted, policy) {
        (Some(s), _) => s,
        (None, LoopPolicy::External(p)) => *p,
        (None, LoopPolicy::Scripted(_)) => unreachable!("scripted policy built above"),
    };

    let per_group: Vec<(Vec<EpisodeOutcome>, GroupEvaluation)> = groups
        .par_iter()
        .enumerate()
        .map(|(g, planned)| {
            let case = cases[planned.case_id.as_str()];
            let case_views = &views[&planned.case_id];
            let mut outcomes = Vec::with_capacity(planned.requests().len());
            for (vi, request) in planned.requests().into_iter().enumerate() {
                let id = episode_id(round, g, vi, &planned.case_id, &planned.target_id);
                let episode_seed = derive_seed_labeled(
                    round_seed,
                    &[
                        "episode",
                        &planned.case_id,
                        &planned.target_id,
                        &g.to_string(),
                        &vi.to_string(),
                    ],
                );
                let ctx = EpisodeCtx {
                    case,
                    views: case_views,
                    bank,
                    policy: policy_ref,
                    config,
                };
                outcomes.push(evaluate_episode(&ctx, request, id, episode_seed));
            }
            let dices: Vec<f64> = outcomes.iter().map(|o| o.dice).collect();
            let stability = stability_term(&dices).expect("groups are non-empty");
            for outcome in &mut outcomes {
                if outcome.episode.flags.transport_failure {
                    continue; // stays a zero-reward episode
                }
                let breakdown = composite_reward(
                    outcome.episode.reward.dice_term,
                    stability,
                    outcome.episode.reward.format_term,
                    &config.weights,
                )
                .expect("terms are in range by construction");
                outcome.episode.reward = breakdown;
            }
            let eval =
                GroupEvaluation::new(planned.group.clone(), dices).expect("groups are non-empty");
            (outcomes, eval)
        })
        .collect();

    let mut episodes = Vec::new();
    let mut group_evals = Vec::new();
    let mut grpo_groups = Vec::new();
    let mut all_dices = Vec::new();
    for (outcomes, eval) in per_group {
        for outcome in outcomes {
            all_dices.push(outcome.dice);
            if config.decoding.samples_per_input > 1 && !outcome.candidates.is_empty() {
                let stability = outcome.episode.reward.stability_term;
                let rewards: Vec<f64> = outcome
                    .candidate_partials
                    .iter()
                    .map(|(d, f)| {
                        config.weights.w_dice * d
                            + config.weights.w_stab * stability
                            + config.weights.w_fmt * f
                    })
                    .collect();
                grpo_groups.push(GrpoGroup {
                    episode_id: outcome.episode.episode_id.clone(),
                    prompt_digest: outcome.episode.prompt_digest.clone(),
                    candidates: outcome.candidates,
                    rewards,
                });
            }
            episodes.push(outcome.episode);
        }
        group_evals.push(eval);
    }

    let pooled_metrics = group_metrics(&all_dices)?;
    let pooled = DiceStats {
        mean: pooled_metrics.mean,
        std: pooled_metrics.population_std,
        worst: pooled_metrics.worst,
    };
    let n_groups = group_evals.len() as f64;
    let per_group_stats = DiceStats {
        mean: group_evals.iter().map(|g| g.mean).sum::<f64>() / n_groups,
        std: group_evals.iter().map(|g| g.population_std).sum::<f64>() / n_groups,
        worst: group_evals.iter().map(|g| g.worst).sum::<f64>() / n_groups,
    };
    let objective_value = objective(&group_evals, config.lambda)?;

    let mut per_tag: BTreeMap<String, u64> = BTreeMap::new();
    for episode in &episodes {
        for skill_id in &episode.retrieved_skill_ids {
            if let Some(artifact) = bank.get(skill_id) {
                *per_tag.entry(artifact.tag.clone()).or_insert(0) += 1;
            }
        }
    }

    Ok(EvaluatedRound {
        episodes,
        group_evals,
        grpo_groups,
        pooled,
        per_group: per_group_stats,
        objective: objective_value,
        per_tag_retrieval_frequency: per_tag,
    })
}

/// One counter delta from one episode for one bank artifact.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CounterDelta {
    pub episode_id: String,
    pub skill_id: String,
    pub retrieved: bool,
    pub reward: f64,
}

/// Partitions the snapshot's artifacts into with/without deltas for one
/// finalized episode: retrieved artifacts gain with-counters, every other
/// artifact alive in the snapshot gains a without-counter.
pub fn attribute_skill_rewards(episode: &Episode, bank_snapshot: &SkillBank) -> Vec<CounterDelta> {
    let retrieved: BTreeSet<&str> = episode
        .retrieved_skill_ids
        .iter()
        .map(|s| s.as_str())
        .collect();
    bank_snapshot
        .artifacts
        .iter()
        .map(|artifact| CounterDelta {
            episode_id: episode.episode_id.clone(),
            skill_id: artifact.skill_id.clone(),
            retrieved: retrieved.contains(artifact.skill_id.as_str()),
            reward: episode.reward.composite,
        })
        .collect()
}

/// Ξ⁺ selection: episodes with composite at or above the floor, top-ρ by
/// composite (ties broken by episode_id), keeping at least one when any
/// episode clears the floor.
pub fn select_top_episodes(
    episodes: &[Episode],
    top_fraction: f64,
    reward_floor: f64,
) -> Vec<Episode> {
    let mut eligible: Vec<&Episode> = episodes
        .iter()
        .filter(|e| e.reward.composite >= reward_floor)
        .collect();
    if eligible.is_empty() {
        return vec![];
    }
    eligible.sort_by(|a, b| {
        b.reward
            .composite
            .total_cmp(&a.reward.composite)
            .then_with(|| a.episode_id.cmp(&b.episode_id))
    });
    let take = ((top_fraction * eligible.len() as f64).ceil() as usize).clamp(1, eligible.len());
    eligible.into_iter().take(take).cloned().collect()
}

/// Deterministic seeded sample of ⌈fraction·N⌉ episodes for human review.
pub fn sample_for_review(episodes: &[Episode], fraction: f64, seed: u64) -> Vec<Episode> {
    use rand::seq::SliceRandom as _;
    use rand::SeedableRng;
    assert!(
        fraction > 0.0 && fraction <= 1.0,
        "fraction must be in (0, 1]"
    );
    if episodes.is_empty() {
        return vec![];
    }
    let k = ((fraction * episodes.len() as f64).ceil() as usize).min(episodes.len());
    let mut indices: Vec<usize> = (0..episodes.len()).collect();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let (chosen, _) = indices.partial_shuffle(&mut rng, k);
    let mut chosen: Vec<usize> = chosen.to_vec();
    chosen.sort_unstable();
    chosen.into_iter().map(|i| episodes[i].clone()).collect()
}

/// Everything a completed round produces.
pub struct RoundResult {
    pub episodes: Vec<Episode>,
    pub new_bank: SkillBank,
    pub report: RoundReport,
    pub attribution: Vec<CounterDelta>,
    pub grpo_groups: Vec<GrpoGroup>,
}

/// Runs one evolution round against a frozen bank snapshot.
pub fn run_round(
    corpus: &[SceneCase],
    bank: &SkillBank,
    policy: &LoopPolicy<'_>,
    config: &RoundConfig,
) -> Result<RoundResult, LoopError> {
    let round = bank.round;
    let round_seed = derive_seed_labeled(config.seed, &["round", &round.to_string()]);
    let groups = plan_groups(corpus, config, round_seed, &config.base_styles)?;
    let evaluated = evaluate_planned(corpus, bank, policy, config, round, &groups)?;

    // Counter attribution over the snapshot, applied to a working copy.
    let mut attribution = Vec::new();
    let mut updated = bank.clone();
    let index_of: BTreeMap<String, usize> = updated
        .artifacts
        .iter()
        .enumerate()
        .map(|(i, a)| (a.skill_id.clone(), i))
        .collect();
    for episode in &evaluated.episodes {
        for delta in attribute_skill_rewards(episode, bank) {
            let artifact = &mut updated.artifacts[index_of[&delta.skill_id]];
            if delta.retrieved {
                artifact.metadata.retrieval_count += 1;
                artifact.metadata.sum_reward_with += delta.reward;
                artifact.metadata.count_with += 1;
            } else {
                artifact.metadata.sum_reward_without += delta.reward;
                artifact.metadata.count_without += 1;
            }
            attribution.push(delta);
        }
    }

    // Distill Ξ⁺ into ΔB; new artifacts belong to the bank serving round
    // t + 1, so existing ids always survive merges.
    let new_artifacts = if config.distillation_enabled {
        let top = select_top_episodes(
            &evaluated.episodes,
            config.top_fraction,
            config.reward_floor,
        );
        distill(&top, round + 1, &bank.config, DistillMode::Heuristic)?
    } else {
        vec![]
    };
    let new_skill_count = new_artifacts.len();
    let mut new_bank = update_bank(&updated, new_artifacts);
    let culled_count = match &config.cull {
        Some(cull_config) => {
            let before = new_bank.len();
            new_bank = cull(&new_bank, cull_config.min_uses, cull_config.min_gain);
            before - new_bank.len()
        }
        None => 0,
    };

    let marginal_gains: BTreeMap<String, Option<f64>> = new_bank
        .artifacts
        .iter()
        .map(|a| (a.skill_id.clone(), marginal_gain(a)))
        .collect();

    let report = RoundReport {
        round,
        k_start: bank.len(),
        k_end: new_bank.len(),
        new_skill_count,
        culled_count,
        episode_count: evaluated.episodes.len(),
        group_count: evaluated.group_evals.len(),
        per_tag_retrieval_frequency: evaluated.per_tag_retrieval_frequency,
        pooled: evaluated.pooled,
        per_group: evaluated.per_group,
        objective: evaluated.objective,
        marginal_gains,
    };

    Ok(RoundResult {
        episodes: evaluated.episodes,
        new_bank,
        report,
        attribution,
        grpo_groups: evaluated.grpo_groups,
    })
}

pub fn round_dir(out_dir: &Path, round: u64) -> PathBuf {
    out_dir.join("rounds").join(format!("round_{round:03}"))
}

fn persist_round(out_dir: &Path, round: u64, result: &RoundResult) -> Result<(), LoopError> {
    let dir = round_dir(out_dir, round);
    fs::create_dir_all(&dir).map_err(io_err(&dir))?;

    let episodes_path = dir.join("episodes.jsonl");
    let mut buf = Vec::new();
    write_episodes(&result.episodes, &mut buf)?;
    fs::write(&episodes_path, buf).map_err(io_err(&episodes_path))?;

    save_bank(&result.new_bank, &dir.join("bank.jsonl"))?;

    let report_path = dir.join("report.json");
    let mut report_json = serde_json::to_vec_pretty(&result.report).expect("report serializes");
    report_json.push(b'\n');
    fs::write(&report_path, report_json).map_err(io_err(&report_path))?;

    let attribution_path = dir.join("attribution.jsonl");
    let mut buf = Vec::new();
    for delta in &result.attribution {
        serde_json::to_writer(&mut buf, delta).expect("delta serializes");
        buf.push(b'\n');
    }
    fs::write(&attribution_path, buf).map_err(io_err(&attribution_path))?;

    if !result.grpo_groups.is_empty() {
        let groups_path = dir.join("groups.jsonl");
        let mut buf = Vec::new();
        for group in &result.grpo_groups {
            serde_json::to_writer(&mut buf, group).expect("group serializes");
            buf.push(b'\n');
        }
        fs::write(&groups_path, buf).map_err(io_err(&groups_path))?;
    }
    Ok(())
}

/// Folds [`run_round`] over `rounds` rounds, threading the bank and
/// persisting per-round episodes, bank snapshots, reports and attribution
/// logs under `out_dir` when given.
pub fn run_evolution(
    corpus: &[SceneCase],
    initial_bank: SkillBank,
    policy: &LoopPolicy<'_>,
    config: &RoundConfig,
    rounds: u64,
    out_dir: Option<&Path>,
) -> Result<(SkillBank, Vec<RoundReport>), LoopError> {
    if rounds == 0 {
        return Err(LoopError::BadConfig("rounds must be >= 1".into()));
    }
    if let Some(dir) = out_dir {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        save_bank(&initial_bank, &dir.join("bank_initial.jsonl"))?;
    }
    let mut bank = initial_bank;
    let mut reports = Vec::with_capacity(rounds as usize);
    for _ in 0..rounds {
        let round = bank.round;
        let result = run_round(corpus, &bank, policy, config)?;
        if let Some(dir) = out_dir {
            persist_round(dir, round, &result)?;
        }
        reports.push(result.report);
        bank = result.new_bank;
    }
    if let Some(dir) = out_dir {
        let path = dir.join("reports.json");
        let mut json = serde_json::to_vec_pretty(&reports).expect("reports serialize");
        json.push(b'\n');
        fs::write(&path, json).map_err(io_err(&path))?;
    }
    Ok((bank, reports))
}

/// Accumulated counters replayed from attribution logs.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct ReplayedCounters {
    pub sum_reward_with: f64,
    pub count_with: u64,
    pub sum_reward_without: f64,
    pub count_without: u64,
}

/// Replays every round's attribution log under `out_dir` in write order,
/// summing per-skill counters exactly as the loop applied them.
pub fn replay_attribution_logs(
    out_dir: &Path,
    rounds: u64,
) -> Result<BTreeMap<String, ReplayedCounters>, LoopError> {
    let mut totals: BTreeMap<String, ReplayedCounters> = BTreeMap::new();
    for round in 0..rounds {
        let path = round_dir(out_dir, round).join("attribution.jsonl");
        let file = fs::File::open(&path).map_err(io_err(&path))?;
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line.map_err(io_err(&path))?;
            if line.trim().is_empty() {
                continue;
            }
            let delta: CounterDelta = serde_json::from_str(&line).map_err(|e| LoopError::Io {
                path: format!("{}:{}", path.display(), idx + 1),
                source: std::io::Error::new(std::io::ErrorKind::InvalidData, e),
            })?;
            let entry = totals.entry(delta.skill_id.clone()).or_default();
            if delta.retrieved {
                entry.sum_reward_with += delta.reward;
                entry.count_with += 1;
            } else {
                entry.sum_reward_without += delta.reward;
                entry.count_without += 1;
            }
        }
    }
    Ok(totals)
}

/// Writes the review sample as JSONL next to the episode logs.
pub fn export_review_sample<W: Write>(
    episodes: &[Episode],
    fraction: f64,
    seed: u64,
    writer: &mut W,
) -> Result<usize, EpisodeLogError> {
    let sample = sample_for_review(episodes, fraction, seed);
    write_episodes(&sample, writer)?;
    Ok(sample.len())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::{synth_corpus, CorpusConfig};

    fn small_corpus() -> Vec<SceneCase> {
        synth_corpus(
            &CorpusConfig {
                cases: 4,
                ..Default::default()
            },
            71,
        )
        .unwrap()
    }

    fn small_config() -> RoundConfig {
        RoundConfig {
            episodes_per_round: 20,
            variants_per_request: 5,
            seed: 9,
            ..Default::default()
        }
    }

    #[test]
    fn noiseless_round_scores_perfect_everything() {
        let corpus = small_corpus();
        let bank = SkillBank::new(Default::default());
        let policy = LoopPolicy::Scripted(ScriptedParams {
            p_err: 0.0,
            f_skill: 0.3,
            p_fmt: 0.0,
        });
        let result = run_round(&corpus, &bank, &policy, &small_config()).unwrap();
        assert_eq!(result.episodes.len(), 20);
        for episode in &result.episodes {
            assert_eq!(episode.reward.dice_term, 1.0, "{}", episode.episode_id);
            assert_eq!(episode.reward.composite, 1.0);
        }
        assert_eq!(result.report.objective, 1.0);
        let top = select_top_episodes(&result.episodes, 1.0, 0.5);
        assert_eq!(top.len(), result.episodes.len());
    }

    #[test]
    fn round_zero_with_empty_bank_retrieves_nothing() {
        let corpus = small_corpus();
        let bank = SkillBank::new(Default::default());
        let policy = LoopPolicy::Scripted(ScriptedParams::default());
        let result = run_round(&corpus, &bank, &policy, &small_config()).unwrap();
        assert!(result.report.per_tag_retrieval_frequency.is_empty());
        for episode in &result.episodes {
            assert!(episode.retrieved_skill_ids.is_empty());
        }
        assert!(result.attribution.is_empty());
    }

    #[test]
    fn top_fraction_counts_eligible_episodes() {
        let corpus = small_corpus();
        let bank = SkillBank::new(Default::default());
        let policy = LoopPolicy::Scripted(ScriptedParams {
            p_err: 0.0,
            f_skill: 0.3,
            p_fmt: 0.0,
        });
        let config = RoundConfig {
            episodes_per_round: 50,
            variants_per_request: 5,
            seed: 3,
            ..Default::default()
        };
        let result = run_round(&corpus, &bank, &policy, &config).unwrap();
        assert_eq!(result.episodes.len(), 50);
        // All 50 are above the floor; rho = 0.2 selects exactly 10.
        let top = select_top_episodes(&result.episodes, 0.2, 0.5);
        assert_eq!(top.len(), 10);
    }

    #[test]
    fn attribution_partitions_bank_artifacts() {
        use crate::bank::make_artifact;
        let mut bank = SkillBank::new(Default::default());
        for i in 0..3 {
            bank.artifacts.push(make_artifact(
                "spatial-relation",
                &format!("strategy {i}"),
                0,
                vec![],
                bank.config.embedding_dim,
            ));
        }
        let episode = Episode {
            episode_id: "e".into(),
            case_id: "c".into(),
            request: Request {
                request_id: "q".into(),
                case_id: "c".into(),
                text: "t".into(),
                style: RequestStyle::ConsultQuestion,
                intent_target: "x".into(),
            },
            retrieved_skill_ids: vec![bank.artifacts[1].skill_id.clone()],
            prompt_digest: String::new(),
            raw_output: String::new(),
            parsed: Default::default(),
            predicted_mask_digest: String::new(),
            reward: RewardBreakdown {
                dice_term: 0.8,
                stability_term: 1.0,
                format_term: 1.0,
                composite: 0.9,
            },
            flags: EpisodeFlags::default(),
        };
        let deltas = attribute_skill_rewards(&episode, &bank);
        assert_eq!(deltas.len(), 3);
        assert_eq!(deltas.iter().filter(|d| d.retrieved).count(), 1);
        assert!(deltas.iter().all(|d| (d.reward - 0.9).abs() < 1e-12));

        let empty = SkillBank::new(Default::default());
        assert!(attribute_skill_rewards(&episode, &empty).is_empty());
    }

    #[test]
    fn evolution_without_distillation_keeps_bank_constant() {
        let corpus = small_corpus();
        let bank = SkillBank::new(Default::default());
        let policy = LoopPolicy::Scripted(ScriptedParams::default());
        let config = RoundConfig {
            distillation_enabled: false,
            ..small_config()
        };
        let (final_bank, reports) =
            run_evolution(&corpus, bank, &policy, &config, 3, None).unwrap();
        assert_eq!(final_bank.len(), 0);
        for report in &reports {
            assert_eq!(report.k_start, 0);
            assert_eq!(report.k_end, 0);
            assert_eq!(report.new_skill_count, 0);
        }
    }

    #[test]
    fn bank_size_is_nondecreasing_without_culling() {
        let corpus = small_corpus();
        let bank = SkillBank::new(Default::default());
        let policy = LoopPolicy::Scripted(ScriptedParams::default());
        let (_, reports) = run_evolution(&corpus, bank, &policy, &small_config(), 4, None).unwrap();
        for pair in reports.windows(2) {
            assert!(pair[1].k_start == pair[0].k_end, "K chains across rounds");
            assert!(pair[1].k_end >= pair[1].k_start);
        }
        assert!(
            reports.last().unwrap().k_end > 0,
            "distillation produced artifacts"
        );
    }

    #[test]
    fn distilled_skills_get_retrieved_in_later_rounds() {
        let corpus = small_corpus();
        let bank = SkillBank::new(Default::default());
        let policy = LoopPolicy::Scripted(ScriptedParams::default());
        let (_, reports) = run_evolution(&corpus, bank, &policy, &small_config(), 3, None).unwrap();
        let later_retrievals: u64 = reports[1..]
            .iter()
            .flat_map(|r| r.per_tag_retrieval_frequency.values())
            .sum();
        assert!(later_retrievals > 0, "bank is live after round 0");
    }

    #[test]
    fn runs_are_identical_across_thread_counts() {
        let corpus = small_corpus();
        let policy = LoopPolicy::Scripted(ScriptedParams::default());
        let config = small_config();
        let run = |threads: usize| {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(threads)
                .build()
                .unwrap();
            pool.install(|| {
                run_evolution(
                    &corpus,
                    SkillBank::new(Default::default()),
                    &policy,
                    &config,
                    2,
                    None,
                )
                .unwrap()
            })
        };
        let (bank_a, reports_a) = run(1);
        let (bank_b, reports_b) = run(4);
        assert_eq!(bank_a, bank_b);
        assert_eq!(reports_a, reports_b);
    }

    #[test]
    fn persisted_run_replays_attribution_exactly() {
        let corpus = small_corpus();
        let policy = LoopPolicy::Scripted(ScriptedParams::default());
        let config = small_config();
        let dir = tempfile::tempdir().unwrap();
        let (final_bank, _) = run_evolution(
            &corpus,
            SkillBank::new(Default::default()),
            &policy,
            &config,
            3,
            Some(dir.path()),
        )
        .unwrap();
        let replayed = replay_attribution_logs(dir.path(), 3).unwrap();
        for artifact in &final_bank.artifacts {
            let counters = replayed
                .get(&artifact.skill_id)
                .copied()
                .unwrap_or_default();
            assert!((artifact.metadata.sum_reward_with - counters.sum_reward_with).abs() < 1e-12);
            assert_eq!(artifact.metadata.count_with, counters.count_with);
            assert!(
                (artifact.metadata.sum_reward_without - counters.sum_reward_without).abs() < 1e-12
            );
            assert_eq!(artifact.metadata.count_without, counters.count_without);
        }
    }

    #[test]
    fn review_sampling_is_seeded_and_sized() {
        let corpus = small_corpus();
        let bank = SkillBank::new(Default::default());
        let policy = LoopPolicy::Scripted(ScriptedParams {
            p_err: 0.0,
            f_skill: 0.3,
            p_fmt: 0.0,
        });
        let config = RoundConfig {
            episodes_per_round: 100,
            variants_per_request: 5,
            seed: 12,
            ..Default::default()
        };
        let result = run_round(&corpus, &bank, &policy, &config).unwrap();
        assert_eq!(result.episodes.len(), 100);
        let sample = sample_for_review(&result.episodes, 0.05, 77);
        assert_eq!(sample.len(), 5);
        let again = sample_for_review(&result.episodes, 0.05, 77);
        assert_eq!(sample, again);
        let all = sample_for_review(&result.episodes, 1.0, 77);
        assert_eq!(all.len(), 100);
    }

    #[test]
    fn grpo_sampling_produces_groups_and_best_of_n_episodes() {
        let corpus = small_corpus();
        let bank = SkillBank::new(Default::default());
        let policy = LoopPolicy::Scripted(ScriptedParams::default());
        let config = RoundConfig {
            decoding: DecodingParams {
                samples_per_input: 3,
                ..Default::default()
            },
            ..small_config()
        };
        let result = run_round(&corpus, &bank, &policy, &config).unwrap();
        assert_eq!(result.grpo_groups.len(), result.episodes.len());
        for group in &result.grpo_groups {
            assert_eq!(group.candidates.len(), 3);
            assert_eq!(group.rewards.len(), 3);
        }
        // The canonical episode output is the best candidate by partial
        // reward, so its dice term is the max of candidate dice terms.
        for (episode, group) in result.episodes.iter().zip(result.grpo_groups.iter()) {
            let best = group.rewards.iter().cloned().fold(f64::MIN, f64::max);
            let episode_reward = config.weights.w_dice * episode.reward.dice_term
                + config.weights.w_stab * episode.reward.stability_term
                + config.weights.w_fmt * episode.reward.format_term;
            assert!(episode_reward >= best - 1e-9);
        }
    }

    struct CannedPolicy {
        text: String,
    }

    impl crate::policy::Policy for CannedPolicy {
        fn generate(
            &self,
            input: &crate::policy::PolicyInput,
        ) -> Result<crate::policy::PolicyOutput, crate::policy::PolicyError> {
            let n = input.decoding.samples_per_input.max(1);
            Ok(crate::policy::PolicyOutput {
                raw_texts: vec![self.text.clone(); n],
                latency_ms: 1,
                provider: "canned".into(),
            })
        }

        fn provider_name(&self) -> &str {
            "canned"
        }
    }

    struct FailingPolicy;

    impl crate::policy::Policy for FailingPolicy {
        fn generate(
            &self,
            _input: &crate::policy::PolicyInput,
        ) -> Result<crate::policy::PolicyOutput, crate::policy::PolicyError> {
            Err(crate::policy::PolicyError::Transport {
                attempts: 3,
                reason: "connection refused".into(),
            })
        }

        fn provider_name(&self) -> &str {
            "failing"
        }
    }

    #[test]
    fn external_policy_drives_the_loop() {
        use crate::trace::{serialize_structured_output, CanonicalAnswer, StructuredOutput};
        let corpus = small_corpus();
        let bank = SkillBank::new(Default::default());
        let canned = CannedPolicy {
            text: serialize_structured_output(&StructuredOutput {
                evidence: vec![crate::trace::EvidenceItem {
                    view_caption: "axial mid-slice".into(),
                    observation: "bright focal signal".into(),
                }],
                rationale: vec![crate::trace::RationaleStep {
                    skill_tag: "anatomical-localization".into(),
                    text: "the description matches the left lesion".into(),
                }],
                answer: CanonicalAnswer {
                    target_id: "left_lesion".into(),
                    laterality: None,
                    subregion: None,
                },
            }),
        };
        let policy = LoopPolicy::External(&canned);
        let result = run_round(&corpus, &bank, &policy, &small_config()).unwrap();
        assert_eq!(result.episodes.len(), 20);
        for episode in &result.episodes {
            assert!(!episode.flags.transport_failure);
            assert!(!episode.flags.parse_incomplete);
            // A fixed answer is right exactly when the intent matches it.
            let expected = if episode.request.intent_target == "left_lesion" {
                1.0
            } else {
                0.0
            };
            assert_eq!(episode.reward.dice_term, expected, "{}", episode.episode_id);
        }
    }

    #[test]
    fn transport_failures_become_zero_reward_episodes() {
        let corpus = small_corpus();
        let bank = SkillBank::new(Default::default());
        let policy = LoopPolicy::External(&FailingPolicy);
        let result = run_round(&corpus, &bank, &policy, &small_config()).unwrap();
        for episode in &result.episodes {
            assert!(episode.flags.transport_failure);
            assert_eq!(episode.reward.composite, 0.0);
            assert!(episode.raw_output.is_empty());
        }
        assert!(select_top_episodes(&result.episodes, 1.0, 0.5).is_empty());
        // Nothing good to distill from a dead endpoint.
        assert_eq!(result.new_bank.len(), 0);
    }

    #[test]
    fn boundary_noise_flows_through_the_loop() {
        let corpus = small_corpus();
        let bank = SkillBank::new(Default::default());
        let policy = LoopPolicy::Scripted(ScriptedParams {
            p_err: 0.0,
            f_skill: 0.3,
            p_fmt: 0.0,
        });
        let config = RoundConfig {
            noise: crate::volume::NoiseConfig {
                max_boundary_voxels: 2,
            },
            ..small_config()
        };
        let a = run_round(&corpus, &bank, &policy, &config).unwrap();
        let b = run_round(&corpus, &bank, &policy, &config).unwrap();
        assert_eq!(a.episodes, b.episodes, "noise is seed-deterministic");
        for episode in &a.episodes {
            assert!(
                episode.reward.dice_term < 1.0 && episode.reward.dice_term > 0.5,
                "{}: dice {}",
                episode.episode_id,
                episode.reward.dice_term
            );
        }
    }

    #[test]
    fn retrieved_skill_ids_come_from_the_snapshot() {
        let corpus = small_corpus();
        let policy = LoopPolicy::Scripted(ScriptedParams::default());
        let config = small_config();
        let (bank_after_one, _) = run_evolution(
            &corpus,
            SkillBank::new(Default::default()),
            &policy,
            &config,
            1,
            None,
        )
        .unwrap();
        let snapshot_ids: BTreeSet<String> = bank_after_one
            .artifacts
            .iter()
            .map(|a| a.skill_id.clone())
            .collect();
        let result = run_round(&corpus, &bank_after_one, &policy, &config).unwrap();
        for episode in &result.episodes {
            for id in &episode.retrieved_skill_ids {
                assert!(snapshot_ids.contains(id), "{id} not in snapshot");
            }
        }
    }
}
