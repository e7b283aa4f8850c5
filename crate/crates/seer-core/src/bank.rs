//! The skill bank: content-addressed reasoning strategies with audit
//! counters, hash-based retrieval, episode distillation, deduplication,
//! culling and JSONL persistence.
//!
//! Banks are immutable snapshots. Retrieval reads a frozen snapshot; every
//! mutation (`update_bank`, `cull`, counter application) builds a new value,
//! applied by the loop at round boundaries only.

use crate::episode::Episode;
use crate::hashing::{fnv1a64, sha256_hex};
use crate::trace::CanonicalAnswer;
use serde::{Deserialize, Serialize};
use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::Path;
use thiserror::Error;

pub const BANK_SCHEMA_VERSION: u32 = 1;

/// The closed skill-tag registry; unknown tags parse but cost compliance,
/// and extending the registry is a config decision.
pub fn default_skill_tags() -> Vec<String> {
    [
        "anatomical-localization",
        "spatial-relation",
        "synonym-normalization",
        "modality-cue",
        "negation-handling",
        "subregion-resolution",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect()
}

/// Audit metadata carried by every artifact.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SkillMetadata {
    pub created_round: u64,
    pub source_episode_ids: Vec<String>,
    pub retrieval_count: u64,
    pub sum_reward_with: f64,
    pub count_with: u64,
    pub sum_reward_without: f64,
    pub count_without: u64,
}

/// A reusable reasoning strategy: tag, content, audit metadata and a
/// retrieval embedding. The id is a content address over (tag, content).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillArtifact {
    pub skill_id: String,
    pub tag: String,
    pub content: String,
    pub metadata: SkillMetadata,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BankConfig {
    pub embedding_dim: usize,
    pub k: usize,
    pub sim_threshold: f32,
    pub dedup_threshold: f32,
}

impl Default for BankConfig {
    fn default() -> Self {
        Self {
            embedding_dim: 256,
            k: 4,
            sim_threshold: 0.15,
            dedup_threshold: 0.9,
        }
    }
}

/// An immutable bank snapshot for one evolution round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SkillBank {
    pub round: u64,
    pub config: BankConfig,
    pub artifacts: Vec<SkillArtifact>,
}

impl SkillBank {
    pub fn new(config: BankConfig) -> Self {
        Self {
            round: 0,
            config,
            artifacts: Vec::new(),
        }
    }

    /// K_t, the bank size.
    pub fn len(&self) -> usize {
        self.artifacts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.artifacts.is_empty()
    }

    pub fn get(&self, skill_id: &str) -> Option<&SkillArtifact> {
        self.artifacts.iter().find(|a| a.skill_id == skill_id)
    }
}

/// Deterministic bag-of-tokens feature hashing: lowercase, split on
/// non-alphanumerics, hash each token to an index with a sign bit,
/// accumulate and L2-normalize. The zero vector stays zero.
pub fn embed(text: &str, dim: usize) -> Vec<f32> {
    let mut vector = vec![0f32; dim];
    for token in text.to_lowercase().split(|c: char| !c.is_alphanumeric()) {
        if token.is_empty() {
            continue;
        }
        let hash = fnv1a64(token.as_bytes());
        let index = (hash % dim as u64) as usize;
        let sign = if hash >> 63 == 1 { -1.0 } else { 1.0 };
        vector[index] += sign;
    }
    let norm = vector.iter().map(|v| v * v).sum::<f32>().sqrt();
    if norm > 0.0 {
        for v in &mut vector {
            *v /= norm;
        }
    }
    vector
}

/// Pluggable embedding source; the default is the in-process feature
/// hasher, and a remote service can satisfy the same interface.
pub trait EmbeddingProvider: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Vec<f32>;
}

#[derive(Debug, Clone, Copy)]
pub struct HashEmbedder {
    pub dim: usize,
}

impl EmbeddingProvider for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Vec<f32> {
        embed(text, self.dim)
    }
}

pub fn cosine(a: &[f32], b: &[f32]) -> f32 {
    let dot: f32 = a.iter().zip(b.iter()).map(|(x, y)| x * y).sum();
    let na: f32 = a.iter().map(|x| x * x).sum::<f32>().sqrt();
    let nb: f32 = b.iter().map(|x| x * x).sum::<f32>().sqrt();
    if na == 0.0 || nb == 0.0 {
        0.0
    } else {
        // Clamp away the f32 rounding that would push identical vectors
        // past 1.0.
        (dot / (na * nb)).clamp(-1.0, 1.0)
    }
}

fn normalize_content(content: &str) -> String {
    content
        .to_lowercase()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

/// Content address: first 16 hex chars of SHA-256 over (tag, normalized
/// content).
pub fn skill_id_for(tag: &str, content: &str) -> String {
    let payload = format!("{tag}\u{0}{}", normalize_content(content));
    sha256_hex(payload.as_bytes())[..16].to_string()
}

/// Builds a fresh artifact with zeroed counters.
pub fn make_artifact(
    tag: &str,
    content: &str,
    created_round: u64,
    source_episode_ids: Vec<String>,
    embedding_dim: usize,
) -> SkillArtifact {
    SkillArtifact {
        skill_id: skill_id_for(tag, content),
        tag: tag.to_string(),
        content: content.to_string(),
        metadata: SkillMetadata {
            created_round,
            source_episode_ids,
            ..Default::default()
        },
        embedding: embed(content, embedding_dim),
    }
}

/// Empirical marginal gain: mean reward with the skill retrieved minus mean
/// reward without; undefined until both sides have observations.
pub fn marginal_gain(artifact: &SkillArtifact) -> Option<f64> {
    let m = &artifact.metadata;
    if m.count_with == 0 || m.count_without == 0 {
        return None;
    }
    Some(m.sum_reward_with / m.count_with as f64 - m.sum_reward_without / m.count_without as f64)
}

/// Read-only top-k retrieval: rank by cosine similarity of the query
/// (request text plus view captions) against artifact embeddings, keep
/// scores at or above the similarity threshold, break ties by higher
/// marginal gain then lexicographic skill_id. Usage counters are updated by
/// the loop, never here.
pub fn retrieve(
    bank: &SkillBank,
    query_text: &str,
    view_captions: &[String],
    k: usize,
) -> Vec<SkillArtifact> {
    if k == 0 || bank.artifacts.is_empty() {
        return vec![];
    }
    let mut query = query_text.to_string();
    for caption in view_captions {
        query.push(' ');
        query.push_str(caption);
    }
    let query_vec = embed(&query, bank.config.embedding_dim);
    let mut scored: Vec<(f32, &SkillArtifact)> = bank
        .artifacts
        .iter()
        .map(|a| (cosine(&query_vec, &a.embedding), a))
        .filter(|(score, _)| *score >= bank.config.sim_threshold)
        .collect();
    scored.sort_by(|(sa, a), (sb, b)| {
        sb.total_cmp(sa)
            .then_with(|| {
                // Higher gain first; artifacts without a defined gain rank last.
                let ga = marginal_gain(a);
                let gb = marginal_gain(b);
                match (ga, gb) {
                    (Some(x), Some(y)) => y.total_cmp(&x),
                    (Some(_), None) => std::cmp::Ordering::Less,
                    (None, Some(_)) => std::cmp::Ordering::Greater,
                    (None, None) => std::cmp::Ordering::Equal,
                }
            })
            .then_with(|| a.skill_id.cmp(&b.skill_id))
    });
    scored.into_iter().take(k).map(|(_, a)| a.clone()).collect()
}

/// Model-backed skill summarization hook; the heuristic path never uses it.
pub trait SkillSummarizer {
    fn summarize(
        &self,
        request_text: &str,
        tag: &str,
        step_text: &str,
        answer: &CanonicalAnswer,
    ) -> Result<String, String>;
}

pub enum DistillMode<'a> {
    Heuristic,
    ModelBacked(&'a dyn SkillSummarizer),
}

fn request_pattern(text: &str) -> String {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|t| !t.is_empty())
        .collect::<Vec<_>>()
        .join(" ")
}

fn answer_repr(answer: &CanonicalAnswer) -> String {
    let mut repr = format!("target={}", answer.target_id);
    if let Some(lat) = answer.laterality {
        repr.push_str(&format!(" laterality={lat}"));
    }
    if let Some(sub) = &answer.subregion {
        repr.push_str(&format!(" subregion={sub}"));
    }
    repr
}

#[derive(Debug, Error)]
pub enum BankError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bank file is empty; expected a header line")]
    MissingHeader,
    #[error("bank schema version {found}, expected {expected}")]
    SchemaVersion { found: u32, expected: u32 },
    #[error("bad bank record on line {line}: {reason}")]
    BadRecord { line: usize, reason: String },
    #[error("model-backed distillation failed: {0}")]
    Summarize(String),
}

/// Extracts one artifact per distinct rationale tag of each episode.
/// Episodes without rationale steps or without a parsed answer contribute
/// nothing. Deterministic in heuristic mode.
pub fn distill(
    episodes: &[Episode],
    round: u64,
    config: &BankConfig,
    mode: DistillMode<'_>,
) -> Result<Vec<SkillArtifact>, BankError> {
    let mut artifacts = Vec::new();
    for episode in episodes {
        let Some(answer) = &episode.parsed.answer else {
            continue;
        };
        let mut seen: BTreeSet<&str> = BTreeSet::new();
        for step in &episode.parsed.rationale {
            if step.skill_tag.is_empty() || !seen.insert(step.skill_tag.as_str()) {
                continue;
            }
            let content = match &mode {
                DistillMode::Heuristic => format!(
                    "WHEN request ~ {} THEN {} -> answer {}",
                    request_pattern(&episode.request.text),
                    step.text,
                    answer_repr(answer),
                ),
                DistillMode::ModelBacked(summarizer) => summarizer
                    .summarize(&episode.request.text, &step.skill_tag, &step.text, answer)
                    .map_err(BankError::Summarize)?,
            };
            artifacts.push(make_artifact(
                &step.skill_tag,
                &content,
                round,
                vec![episode.episode_id.clone()],
                config.embedding_dim,
            ));
        }
    }
    Ok(artifacts)
}

fn merge_into(survivor: &mut SkillArtifact, duplicate: SkillArtifact) {
    let m = &mut survivor.metadata;
    let d = duplicate.metadata;
    m.retrieval_count += d.retrieval_count;
    m.sum_reward_with += d.sum_reward_with;
    m.count_with += d.count_with;
    m.sum_reward_without += d.sum_reward_without;
    m.count_without += d.count_without;
    let mut sources: BTreeSet<String> = m.source_episode_ids.drain(..).collect();
    sources.extend(d.source_episode_ids);
    m.source_episode_ids = sources.into_iter().collect();
}

/// Merges same-tag artifacts whose content embeddings are within the dedup
/// threshold; earlier (created_round, skill_id) survives and absorbs all
/// counters. Output is sorted by (created_round, skill_id).
pub fn dedup(artifacts: Vec<SkillArtifact>, dedup_threshold: f32) -> Vec<SkillArtifact> {
    let mut ordered = artifacts;
    ordered.sort_by(|a, b| {
        (a.metadata.created_round, &a.skill_id).cmp(&(b.metadata.created_round, &b.skill_id))
    });
    let mut survivors: Vec<SkillArtifact> = Vec::with_capacity(ordered.len());
    for artifact in ordered {
        let hit = survivors.iter_mut().find(|s| {
            s.tag == artifact.tag && cosine(&s.embedding, &artifact.embedding) >= dedup_threshold
        });
        match hit {
            Some(survivor) => merge_into(survivor, artifact),
            None => survivors.push(artifact),
        }
    }
    survivors
}

/// B^(t+1) = Dedup(B^(t) ∪ ΔB^(t)), with the round advanced.
pub fn update_bank(bank: &SkillBank, new_artifacts: Vec<SkillArtifact>) -> SkillBank {
    let mut combined = bank.artifacts.clone();
    combined.extend(new_artifacts);
    SkillBank {
        round: bank.round + 1,
        config: bank.config,
        artifacts: dedup(combined, bank.config.dedup_threshold),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CullConfig {
    pub min_uses: u64,
    pub min_gain: f64,
}

impl Default for CullConfig {
    fn default() -> Self {
        Self {
            min_uses: 10,
            min_gain: 0.0,
        }
    }
}

/// Drops artifacts that have been observed at least `min_uses` times and
/// whose defined marginal gain is below `min_gain`. Under-observed
/// artifacts are never removed.
pub fn cull(bank: &SkillBank, min_uses: u64, min_gain: f64) -> SkillBank {
    let artifacts = bank
        .artifacts
        .iter()
        .filter(|a| {
            let uses = a.metadata.count_with + a.metadata.count_without;
            match marginal_gain(a) {
                Some(gain) => !(uses >= min_uses.max(1) && gain < min_gain),
                None => true,
            }
        })
        .cloned()
        .collect();
    SkillBank {
        round: bank.round,
        config: bank.config,
        artifacts,
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct BankHeader {
    schema: u32,
    embedding_dim: usize,
    round: u64,
    k: usize,
    sim_threshold: f32,
    dedup_threshold: f32,
}

/// Writes a bank as JSONL: one header record, then one artifact per line in
/// canonical field order. Byte-stable for equal banks.
pub fn write_bank<W: Write>(bank: &SkillBank, writer: &mut W) -> std::io::Result<()> {
    let header = BankHeader {
        schema: BANK_SCHEMA_VERSION,
        embedding_dim: bank.config.embedding_dim,
        round: bank.round,
        k: bank.config.k,
        sim_threshold: bank.config.sim_threshold,
        dedup_threshold: bank.config.dedup_threshold,
    };
    writeln!(
        writer,
        "{}",
        serde_json::to_string(&header).expect("header serializes")
    )?;
    for artifact in &bank.artifacts {
        writeln!(
            writer,
            "{}",
            serde_json::to_string(artifact).expect("artifact serializes")
        )?;
    }
    Ok(())
}

pub fn read_bank<R: BufRead>(reader: R) -> Result<SkillBank, BankError> {
    let mut lines = reader.lines().enumerate();
    let header: BankHeader = match lines.next() {
        None => return Err(BankError::MissingHeader),
        Some((_, line)) => {
            let line = line.map_err(|e| BankError::BadRecord {
                line: 1,
                reason: e.to_string(),
            })?;
            serde_json::from_str(&line).map_err(|e| BankError::BadRecord {
                line: 1,
                reason: e.to_string(),
            })?
        }
    };
    if header.schema != BANK_SCHEMA_VERSION {
        return Err(BankError::SchemaVersion {
            found: header.schema,
            expected: BANK_SCHEMA_VERSION,
        });
    }
    let config = BankConfig {
        embedding_dim: header.embedding_dim,
        k: header.k,
        sim_threshold: header.sim_threshold,
        dedup_threshold: header.dedup_threshold,
    };
    let mut artifacts = Vec::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| BankError::BadRecord {
            line: line_no,
            reason: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        let artifact: SkillArtifact =
            serde_json::from_str(&line).map_err(|e| BankError::BadRecord {
                line: line_no,
                reason: e.to_string(),
            })?;
        if artifact.embedding.len() != config.embedding_dim {
            return Err(BankError::BadRecord {
                line: line_no,
                reason: format!(
                    "embedding length {} does not match bank dim {}",
                    artifact.embedding.len(),
                    config.embedding_dim
                ),
            });
        }
        artifacts.push(artifact);
    }
    Ok(SkillBank {
        round: header.round,
        config,
        artifacts,
    })
}

pub fn save_bank(bank: &SkillBank, path: &Path) -> Result<(), BankError> {
    let mut buf = Vec::new();
    write_bank(bank, &mut buf).map_err(|source| BankError::Io {
        path: path.display().to_string(),
        source,
    })?;
    fs::write(path, buf).map_err(|source| BankError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load_bank(path: &Path) -> Result<SkillBank, BankError> {
    let file = fs::File::open(path).map_err(|source| BankError::Io {
        path: path.display().to_string(),
        source,
    })?;
    read_bank(BufReader::new(file))
}
