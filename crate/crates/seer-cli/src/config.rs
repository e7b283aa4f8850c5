//! The single run-configuration document shared by every subcommand.
//!
//! One JSON file covers corpus synthesis, rounds, policy, rewards,
//! retrieval and output layout, so ablations and evaluations share seeds by
//! construction. Unknown keys are rejected; the published schema lives at
//! `docs/run_config.schema.json`.

use anyhow::{bail, Context, Result};
use seer_core::bank::{BankConfig, CullConfig, SkillBank};
use seer_core::evolution::RoundConfig;
use seer_core::policy::{DecodingParams, RemoteConfig, ScriptedParams};
use seer_core::reward::RewardWeights;
use seer_core::trace::RequestStyle;
use seer_core::volume::{CorpusConfig, NoiseConfig};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub requests: RequestsSection,
    pub rounds: RoundsSection,
    pub reward: RewardSection,
    pub bank: BankSection,
    pub policy: PolicySection,
    pub noise: NoiseConfig,
    /// Worker threads for episode evaluation; None uses all cores.
    pub threads: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 42,
            out_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            requests: RequestsSection::default(),
            rounds: RoundsSection::default(),
            reward: RewardSection::default(),
            bank: BankSection::default(),
            policy: PolicySection::default(),
            noise: NoiseConfig::default(),
            threads: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RequestsSection {
    /// Styles base requests are drawn from in evolution and free-text eval.
    pub base_styles: Vec<String>,
    pub typo_budget: usize,
}

impl Default for RequestsSection {
    fn default() -> Self {
        Self {
            base_styles: vec![
                "radiology-note".into(),
                "referral".into(),
                "consult-question".into(),
            ],
            typo_budget: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RoundsSection {
    pub count: u64,
    pub episodes_per_round: usize,
    pub variants_per_request: usize,
    pub top_fraction: f64,
    pub reward_floor: f64,
    pub retrieval_enabled: bool,
    pub distillation_enabled: bool,
}

impl Default for RoundsSection {
    fn default() -> Self {
        Self {
            count: 5,
            episodes_per_round: 250,
            variants_per_request: 5,
            top_fraction: 0.2,
            reward_floor: 0.5,
            retrieval_enabled: true,
            distillation_enabled: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RewardSection {
    pub w_dice: f64,
    pub w_stab: f64,
    pub w_fmt: f64,
    pub lambda: f64,
    /// Report tables recomputed with sample (N-1) standard deviations.
    pub sample_std: bool,
}

impl Default for RewardSection {
    fn default() -> Self {
        Self {
            w_dice: 0.7,
            w_stab: 0.2,
            w_fmt: 0.1,
            lambda: 1.0,
            sample_std: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankSection {
    pub embedding_dim: usize,
    pub k: usize,
    pub sim_threshold: f32,
    pub dedup_threshold: f32,
    /// Path to a bank file to start from; None starts empty.
    pub initial_bank: Option<PathBuf>,
    pub cull: Option<CullConfig>,
}

impl Default for BankSection {
    fn default() -> Self {
        let defaults = BankConfig::default();
        Self {
            embedding_dim: defaults.embedding_dim,
            k: defaults.k,
            sim_threshold: defaults.sim_threshold,
            dedup_threshold: defaults.dedup_threshold,
            initial_bank: None,
            cull: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PolicyMode {
    Scripted,
    Remote,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySection {
    pub mode: PolicyMode,
    pub scripted: ScriptedParams,
    pub decoding: DecodingParams,
    pub remote: RemoteConfig,
}

impl Default for PolicySection {
    fn default() -> Self {
        Self {
            mode: PolicyMode::Scripted,
            scripted: ScriptedParams::default(),
            decoding: DecodingParams::default(),
            remote: RemoteConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        let config: RunConfig = serde_json::from_str(&text)
            .with_context(|| format!("parsing config {}", path.display()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<()> {
        self.parsed_styles()?;
        self.weights()?;
        if self.rounds.count == 0 {
            bail!("rounds.count must be >= 1");
        }
        if self.rounds.variants_per_request == 0 {
            bail!("rounds.variants_per_request must be >= 1");
        }
        if !(self.rounds.top_fraction > 0.0 && self.rounds.top_fraction <= 1.0) {
            bail!("rounds.top_fraction must be in (0, 1]");
        }
        if !(0.0..=1.0).contains(&self.rounds.reward_floor) {
            bail!("rounds.reward_floor must be in [0, 1]");
        }
        if self.bank.embedding_dim < 16 {
            bail!("bank.embedding_dim must be >= 16");
        }
        for (name, value) in [
            ("policy.scripted.p_err", self.policy.scripted.p_err),
            ("policy.scripted.f_skill", self.policy.scripted.f_skill),
            ("policy.scripted.p_fmt", self.policy.scripted.p_fmt),
        ] {
            if !(0.0..=1.0).contains(&value) {
                bail!("{name} must be in [0, 1], got {value}");
            }
        }
        if self.policy.decoding.samples_per_input == 0 {
            bail!("policy.decoding.samples_per_input must be >= 1");
        }
        if self.reward.lambda.is_nan() || self.reward.lambda < 0.0 {
            bail!("reward.lambda must be >= 0");
        }
        Ok(())
    }

    pub fn parsed_styles(&self) -> Result<Vec<RequestStyle>> {
        let mut styles = Vec::with_capacity(self.requests.base_styles.len());
        for name in &self.requests.base_styles {
            let style = RequestStyle::parse(name)
                .with_context(|| format!("unknown request style {name:?}"))?;
            styles.push(style);
        }
        if styles.is_empty() {
            bail!("requests.base_styles must be non-empty");
        }
        Ok(styles)
    }

    pub fn weights(&self) -> Result<RewardWeights> {
        RewardWeights::new(self.reward.w_dice, self.reward.w_stab, self.reward.w_fmt)
            .context("reward weights invalid")
    }

    pub fn bank_config(&self) -> BankConfig {
        BankConfig {
            embedding_dim: self.bank.embedding_dim,
            k: self.bank.k,
            sim_threshold: self.bank.sim_threshold,
            dedup_threshold: self.bank.dedup_threshold,
        }
    }

    /// Loads the configured initial bank, or an empty one.
    pub fn initial_bank(&self) -> Result<SkillBank> {
        match &self.bank.initial_bank {
            Some(path) => {
                let bank = seer_core::bank::load_bank(path)
                    .with_context(|| format!("loading initial bank {}", path.display()))?;
                if bank.config.embedding_dim != self.bank.embedding_dim {
                    bail!(
                        "initial bank embedding_dim {} does not match config {}",
                        bank.config.embedding_dim,
                        self.bank.embedding_dim
                    );
                }
                Ok(bank)
            }
            None => Ok(SkillBank::new(self.bank_config())),
        }
    }

    pub fn round_config(&self) -> Result<RoundConfig> {
        Ok(RoundConfig {
            episodes_per_round: self.rounds.episodes_per_round,
            variants_per_request: self.rounds.variants_per_request,
            top_fraction: self.rounds.top_fraction,
            reward_floor: self.rounds.reward_floor,
            retrieval_k: self.bank.k,
            retrieval_enabled: self.rounds.retrieval_enabled,
            distillation_enabled: self.rounds.distillation_enabled,
            weights: self.weights()?,
            lambda: self.reward.lambda,
            seed: self.seed,
            noise: self.noise,
            decoding: self.policy.decoding,
            typo_budget: self.requests.typo_budget,
            base_styles: self.parsed_styles()?,
            cull: self.bank.cull,
        })
    }

    /// The reference configuration the acceptance checks run against.
    pub fn reference() -> Self {
        let mut config = RunConfig::default();
        config.corpus.cases = 50;
        config.bank.k = 8;
        config
    }
}
