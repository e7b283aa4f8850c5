//! Rebuilds the exact prompt an episode was generated from, using the run's
//! persisted bank snapshots plus the deterministic corpus and renderer.

use crate::config::RunConfig;
use anyhow::{anyhow, Context, Result};
use seer_core::bank::{load_bank, SkillArtifact, SkillBank};
use seer_core::episode::{round_of_episode_id, Episode};
use seer_core::evolution::round_dir;
use seer_core::policy::{build_prompt, prompt_digest, ChatMessage, PolicyInput, PromptSource};
use seer_core::volume::{render_views, synth_corpus, SceneCase, View, ViewConfig};
use std::cell::RefCell;
use std::collections::BTreeMap;
use std::path::PathBuf;

pub struct RunPromptSource {
    run_dir: PathBuf,
    config: RunConfig,
    cases: BTreeMap<String, SceneCase>,
    views: BTreeMap<String, Vec<View>>,
    banks: RefCell<BTreeMap<u64, SkillBank>>,
}

impl RunPromptSource {
    pub fn new(run_dir: PathBuf, config: RunConfig) -> Result<Self> {
        let corpus = synth_corpus(&config.corpus, config.seed).context("rebuilding corpus")?;
        let views = corpus
            .iter()
            .map(|c| {
                (
                    c.case_id.clone(),
                    render_views(&c.volume, &ViewConfig::default()),
                )
            })
            .collect();
        let cases = corpus.into_iter().map(|c| (c.case_id.clone(), c)).collect();
        Ok(Self {
            run_dir,
            config,
            cases,
            views,
            banks: RefCell::new(BTreeMap::new()),
        })
    }

    /// The snapshot round `round` retrieved from: the initial bank for
    /// round 0, otherwise the previous round's persisted bank.
    fn snapshot_for(&self, round: u64) -> Result<()> {
        if self.banks.borrow().contains_key(&round) {
            return Ok(());
        }
        let path = if round == 0 {
            self.run_dir.join("bank_initial.jsonl")
        } else {
            round_dir(&self.run_dir, round - 1).join("bank.jsonl")
        };
        let bank =
            load_bank(&path).with_context(|| format!("loading snapshot {}", path.display()))?;
        self.banks.borrow_mut().insert(round, bank);
        Ok(())
    }

    fn build(&self, episode: &Episode) -> Result<Vec<ChatMessage>> {
        let round = round_of_episode_id(&episode.episode_id)
            .ok_or_else(|| anyhow!("episode id {} has no round prefix", episode.episode_id))?;
        self.snapshot_for(round)?;
        let banks = self.banks.borrow();
        let bank = &banks[&round];
        let skills: Vec<SkillArtifact> = episode
            .retrieved_skill_ids
            .iter()
            .map(|id| {
                bank.get(id)
                    .cloned()
                    .ok_or_else(|| anyhow!("skill {id} missing from round-{round} snapshot"))
            })
            .collect::<Result<_>>()?;
        let views = self
            .views
            .get(&episode.case_id)
            .ok_or_else(|| anyhow!("case {} not in corpus", episode.case_id))?;
        let input = PolicyInput {
            views: views.clone(),
            request_text: episode.request.text.clone(),
            skills,
            decoding: self.config.policy.decoding,
        };
        let messages = build_prompt(&input, false);
        let digest = prompt_digest(&messages);
        if digest != episode.prompt_digest {
            return Err(anyhow!(
                "rebuilt prompt digest {digest} does not match episode {} ({})",
                episode.episode_id,
                episode.prompt_digest
            ));
        }
        Ok(messages)
    }

    pub fn case(&self, case_id: &str) -> Option<&SceneCase> {
        self.cases.get(case_id)
    }
}

impl PromptSource for RunPromptSource {
    fn prompt_for(&self, episode: &Episode) -> std::result::Result<Vec<ChatMessage>, String> {
        self.build(episode).map_err(|e| format!("{e:#}"))
    }
}
