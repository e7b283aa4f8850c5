//! Episode records: one loop interaction per line in the persisted JSONL log.

use crate::reward::RewardBreakdown;
use crate::trace::{PartialOutput, Request};
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use thiserror::Error;

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct EpisodeFlags {
    pub unresolved: bool,
    pub transport_failure: bool,
    pub parse_incomplete: bool,
}

/// One interaction: request in, structured output out, executed mask scored.
/// Masks are stored as digests; raw voxels stay in the case files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub episode_id: String,
    pub case_id: String,
    pub request: Request,
    pub retrieved_skill_ids: Vec<String>,
    pub prompt_digest: String,
    pub raw_output: String,
    pub parsed: PartialOutput,
    pub predicted_mask_digest: String,
    pub reward: RewardBreakdown,
    pub flags: EpisodeFlags,
}

/// Builds the canonical episode id. The zero-padded round and group make
/// lexicographic order match evaluation order, which the loop relies on for
/// deterministic tie-breaking.
pub fn episode_id(
    round: u64,
    group: usize,
    variant: usize,
    case_id: &str,
    target_id: &str,
) -> String {
    format!("r{round:03}-g{group:03}-v{variant}-{case_id}-{target_id}")
}

/// Recovers the round index from an id produced by [`episode_id`].
pub fn round_of_episode_id(id: &str) -> Option<u64> {
    id.strip_prefix('r')?.split('-').next()?.parse().ok()
}

#[derive(Debug, Error)]
pub enum EpisodeLogError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad episode record on line {line}: {source}")]
    Json {
        line: usize,
        source: serde_json::Error,
    },
}

pub fn write_episodes<W: Write>(
    episodes: &[Episode],
    writer: &mut W,
) -> Result<(), EpisodeLogError> {
    for episode in episodes {
        serde_json::to_writer(&mut *writer, episode)
            .map_err(|source| EpisodeLogError::Json { line: 0, source })?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_episodes<R: BufRead>(reader: R) -> Result<Vec<Episode>, EpisodeLogError> {
    let mut episodes = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let episode = serde_json::from_str(&line).map_err(|source| EpisodeLogError::Json {
            line: idx + 1,
            source,
        })?;
        episodes.push(episode);
    }
    Ok(episodes)
}
