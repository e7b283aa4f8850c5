//! Subcommand implementations: corpus synthesis, evolution runs, robustness
//! evaluation, bank auditing, ablations and training-data export.

use crate::config::{PolicyMode, RunConfig};
use crate::prompts::RunPromptSource;
use crate::CliError;
use anyhow::{anyhow, bail, Context, Result};
use seer_core::bank::{dedup, load_bank, marginal_gain, save_bank, SkillBank};
use seer_core::episode::{read_episodes, Episode};
use seer_core::evolution::{round_dir, run_evolution, LoopPolicy, RoundConfig, RoundReport};
use seer_core::hashing::sha256_hex;
use seer_core::perturb::synth_requests;
use seer_core::policy::{
    export_grpo_groups, export_sft, GrpoExportGroup, GrpoGroup, PromptSource, RemotePolicy,
};
use seer_core::reward::grpo_advantages;
use seer_core::trace::RequestStyle;
use seer_core::volume::{save_corpus, synth_corpus};
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

fn runtime(err: anyhow::Error) -> CliError {
    CliError::Runtime(err)
}

fn create_dir(path: &Path) -> Result<(), CliError> {
    fs::create_dir_all(path)
        .with_context(|| format!("creating {}", path.display()))
        .map_err(runtime)
}

/// Runs `body` inside a rayon pool of the configured size, or inline on the
/// global pool when no thread count is set.
fn with_threads<T: Send>(
    threads: Option<usize>,
    body: impl FnOnce() -> T + Send,
) -> Result<T, CliError> {
    match threads {
        None => Ok(body()),
        Some(n) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(n.max(1))
                .build()
                .context("building thread pool")
                .map_err(runtime)?;
            Ok(pool.install(body))
        }
    }
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn cmd_synth(config: &RunConfig, export_views: bool) -> Result<(), CliError> {
    let styles = config.parsed_styles().map_err(CliError::Validation)?;
    let corpus = synth_corpus(&config.corpus, config.seed)
        .context("synthesizing corpus")
        .map_err(CliError::Validation)?;
    let corpus_dir = config.out_dir.join("corpus");
    create_dir(&corpus_dir)?;
    save_corpus(&corpus, &corpus_dir)
        .context("writing cases")
        .map_err(runtime)?;
    if export_views {
        use seer_core::volume::{render_views, write_pgm, ViewConfig};
        for case in &corpus {
            let views_dir = corpus_dir.join(&case.case_id).join("views");
            create_dir(&views_dir)?;
            for view in render_views(&case.volume, &ViewConfig::default()) {
                let name = format!("{}.pgm", view.caption.replace(' ', "_"));
                let mut file = fs::File::create(views_dir.join(&name))
                    .with_context(|| format!("creating view {name}"))
                    .map_err(runtime)?;
                write_pgm(&view, &mut file)
                    .context("writing pgm")
                    .map_err(runtime)?;
            }
        }
    }

    let requests_path = corpus_dir.join("requests.jsonl");
    let mut buf = Vec::new();
    let mut request_count = 0usize;
    for case in &corpus {
        let requests = synth_requests(case, &styles, config.seed)
            .context("synthesizing requests")
            .map_err(runtime)?;
        for request in &requests {
            serde_json::to_writer(&mut buf, request)
                .context("encoding request")
                .map_err(runtime)?;
            buf.push(b'\n');
            request_count += 1;
        }
    }
    fs::write(&requests_path, buf)
        .with_context(|| format!("writing {}", requests_path.display()))
        .map_err(runtime)?;

    println!(
        "wrote {} cases ({} targets total) and {} requests under {}",
        corpus.len(),
        corpus.iter().map(|c| c.targets.len()).sum::<usize>(),
        request_count,
        corpus_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// evolve
// ---------------------------------------------------------------------------

fn loop_policy<'a>(
    config: &RunConfig,
    remote: &'a mut Option<RemotePolicy>,
) -> Result<LoopPolicy<'a>> {
    match config.policy.mode {
        PolicyMode::Scripted => Ok(LoopPolicy::Scripted(config.policy.scripted)),
        PolicyMode::Remote => {
            *remote = Some(
                RemotePolicy::new(config.policy.remote.clone())
                    .map_err(|e| anyhow!("building remote policy: {e}"))?,
            );
            Ok(LoopPolicy::External(remote.as_ref().expect("just set")))
        }
    }
}

pub fn summary_csv(reports: &[RoundReport], writer: &mut dyn Write) -> Result<()> {
    let mut csv = csv::Writer::from_writer(writer);
    csv.write_record([
        "round",
        "k_start",
        "k_end",
        "new_skills",
        "culled",
        "episodes",
        "groups",
        "dice_mean_pooled",
        "dice_std_pooled",
        "dice_worst_pooled",
        "dice_mean_groups",
        "dice_std_groups",
        "dice_worst_groups",
        "objective",
    ])?;
    for r in reports {
        csv.write_record([
            r.round.to_string(),
            r.k_start.to_string(),
            r.k_end.to_string(),
            r.new_skill_count.to_string(),
            r.culled_count.to_string(),
            r.episode_count.to_string(),
            r.group_count.to_string(),
            format!("{:.6}", r.pooled.mean),
            format!("{:.6}", r.pooled.std),
            format!("{:.6}", r.pooled.worst),
            format!("{:.6}", r.per_group.mean),
            format!("{:.6}", r.per_group.std),
            format!("{:.6}", r.per_group.worst),
            format!("{:.6}", r.objective),
        ])?;
    }
    csv.flush()?;
    Ok(())
}

pub fn cmd_evolve(config: &RunConfig, rounds: Option<u64>, dry_run: bool) -> Result<(), CliError> {
    let round_config = config.round_config().map_err(CliError::Validation)?;
    let rounds = rounds.unwrap_or(config.rounds.count);
    if rounds == 0 {
        return Err(CliError::Validation(anyhow!("rounds must be >= 1")));
    }
    let initial_bank = config.initial_bank().map_err(CliError::Validation)?;
    if dry_run {
        println!(
            "config ok: {} rounds, {} cases, policy mode {:?}",
            rounds, config.corpus.cases, config.policy.mode
        );
        return Ok(());
    }
    let corpus = synth_corpus(&config.corpus, config.seed)
        .context("synthesizing corpus")
        .map_err(CliError::Validation)?;
    create_dir(&config.out_dir)?;

    let mut remote = None;
    let policy = loop_policy(config, &mut remote).map_err(CliError::Validation)?;
    let (final_bank, reports) = with_threads(config.threads, || {
        run_evolution(
            &corpus,
            initial_bank,
            &policy,
            &round_config,
            rounds,
            Some(&config.out_dir),
        )
    })?
    .context("evolution run failed")
    .map_err(runtime)?;

    for r in &reports {
        println!(
            "round {:>3}  K {:>3} -> {:>3}  dice mean {:.4}  worst(group) {:.4}  std(group) {:.4}  J {:.4}",
            r.round, r.k_start, r.k_end, r.pooled.mean, r.per_group.worst, r.per_group.std, r.objective
        );
    }
    let csv_path = config.out_dir.join("summary.csv");
    let mut buf = Vec::new();
    summary_csv(&reports, &mut buf)
        .context("writing summary csv")
        .map_err(runtime)?;
    fs::write(&csv_path, buf)
        .with_context(|| format!("writing {}", csv_path.display()))
        .map_err(runtime)?;
    println!(
        "final bank: {} artifacts; outputs under {}",
        final_bank.len(),
        config.out_dir.display()
    );
    Ok(())
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct EvalRow {
    pub mode: String,
    /// Mean Dice over all episodes, percentage points.
    pub dice: f64,
    /// Mean over groups of the per-group worst Dice, percentage points.
    pub worst_dice: f64,
    /// Mean over groups of the per-group Dice std, percentage points.
    pub std: f64,
    /// Pooled variants for reference.
    pub dice_worst_pooled: f64,
    pub dice_std_pooled: f64,
}

pub const EVAL_CSV_HEADER: &str = "mode,dice,worst_dice,std";

fn sample_std_of(dices: &[f64]) -> f64 {
    let n = dices.len();
    if n < 2 {
        return 0.0;
    }
    let mean = dices.iter().sum::<f64>() / n as f64;
    (dices.iter().map(|d| (d - mean) * (d - mean)).sum::<f64>() / (n as f64 - 1.0)).sqrt()
}

pub fn eval_rows(config: &RunConfig, bank: &SkillBank, sample_std: bool) -> Result<Vec<EvalRow>> {
    use seer_core::evolution::{evaluate_planned, plan_groups};
    let corpus = synth_corpus(&config.corpus, config.seed).context("synthesizing corpus")?;
    let round_config = config.round_config()?;
    let free_styles = config.parsed_styles()?;
    let modes: [(&str, Vec<RequestStyle>); 2] = [
        ("label-prompting", vec![RequestStyle::LabelLike]),
        ("free-text", free_styles),
    ];
    let mut remote = None;
    let policy = loop_policy(config, &mut remote)?;
    let mut rows = Vec::new();
    for (mode, styles) in modes {
        let round_seed = seer_core::hashing::derive_seed_labeled(config.seed, &["eval", mode]);
        let groups = plan_groups(&corpus, &round_config, round_seed, &styles)
            .map_err(|e| anyhow!("planning {mode} groups: {e}"))?;
        let evaluated =
            evaluate_planned(&corpus, bank, &policy, &round_config, bank.round, &groups)
                .map_err(|e| anyhow!("evaluating {mode}: {e}"))?;
        let std_groups = if sample_std {
            evaluated
                .group_evals
                .iter()
                .map(|g| sample_std_of(&g.dices))
                .sum::<f64>()
                / evaluated.group_evals.len() as f64
        } else {
            evaluated.per_group.std
        };
        rows.push(EvalRow {
            mode: mode.to_string(),
            dice: evaluated.pooled.mean * 100.0,
            worst_dice: evaluated.per_group.worst * 100.0,
            std: std_groups * 100.0,
            dice_worst_pooled: evaluated.pooled.worst * 100.0,
            dice_std_pooled: evaluated.pooled.std * 100.0,
        });
    }
    Ok(rows)
}

pub fn eval_csv(rows: &[EvalRow], writer: &mut dyn Write) -> Result<()> {
    writeln!(writer, "{EVAL_CSV_HEADER}")?;
    for row in rows {
        writeln!(
            writer,
            "{},{:.2},{:.2},{:.2}",
            row.mode, row.dice, row.worst_dice, row.std
        )?;
    }
    Ok(())
}

pub fn cmd_eval(
    config: &RunConfig,
    bank_path: Option<&Path>,
    sample_std: bool,
) -> Result<(), CliError> {
    let bank = match bank_path {
        Some(path) => load_bank(path)
            .with_context(|| format!("loading bank {}", path.display()))
            .map_err(runtime)?,
        None => config.initial_bank().map_err(CliError::Validation)?,
    };
    let rows = with_threads(config.threads, || eval_rows(config, &bank, sample_std))??;

    println!(
        "{:<16} {:>8} {:>12} {:>8}",
        "mode", "dice", "worst dice", "std"
    );
    for row in &rows {
        println!(
            "{:<16} {:>8.2} {:>12.2} {:>8.2}",
            row.mode, row.dice, row.worst_dice, row.std
        );
    }

    let eval_dir = config.out_dir.join("eval");
    create_dir(&eval_dir)?;
    let mut csv_buf = Vec::new();
    eval_csv(&rows, &mut csv_buf).map_err(runtime)?;
    fs::write(eval_dir.join("robustness.csv"), csv_buf)
        .context("writing robustness.csv")
        .map_err(runtime)?;
    let mut json = serde_json::to_vec_pretty(&rows)
        .context("encoding rows")
        .map_err(runtime)?;
    json.push(b'\n');
    fs::write(eval_dir.join("robustness.json"), json)
        .context("writing robustness.json")
        .map_err(runtime)?;
    println!("tables written under {}", eval_dir.display());
    Ok(())
}

impl From<anyhow::Error> for CliError {
    fn from(err: anyhow::Error) -> Self {
        CliError::Runtime(err)
    }
}

// ---------------------------------------------------------------------------
// bank
// ---------------------------------------------------------------------------

pub enum BankAction {
    Inspect,
    Dedup,
    Cull { min_uses: u64, min_gain: f64 },
    Gains,
}

pub fn cmd_bank(action: BankAction, bank_path: &Path) -> Result<(), CliError> {
    let bank = load_bank(bank_path)
        .with_context(|| format!("loading bank {}", bank_path.display()))
        .map_err(CliError::Validation)?;
    match action {
        BankAction::Inspect => {
            println!("bank round {}  K = {}", bank.round, bank.len());
            let mut by_tag: std::collections::BTreeMap<&str, (usize, u64)> = Default::default();
            for artifact in &bank.artifacts {
                let entry = by_tag.entry(artifact.tag.as_str()).or_default();
                entry.0 += 1;
                entry.1 += artifact.metadata.retrieval_count;
            }
            println!("{:<26} {:>9} {:>11}", "tag", "artifacts", "retrievals");
            for (tag, (count, retrievals)) in &by_tag {
                println!("{tag:<26} {count:>9} {retrievals:>11}");
            }
            let mut gains: Vec<(&str, f64)> = bank
                .artifacts
                .iter()
                .filter_map(|a| marginal_gain(a).map(|g| (a.skill_id.as_str(), g)))
                .collect();
            gains.sort_by(|a, b| b.1.total_cmp(&a.1));
            if !gains.is_empty() {
                println!("top gains:");
                for (id, gain) in gains.iter().take(5) {
                    println!("  {id}  {gain:+.4}");
                }
                println!("bottom gains:");
                for (id, gain) in gains.iter().rev().take(5) {
                    println!("  {id}  {gain:+.4}");
                }
            }
        }
        BankAction::Dedup => {
            let before = bank.len();
            let merged = SkillBank {
                round: bank.round,
                config: bank.config,
                artifacts: dedup(bank.artifacts.clone(), bank.config.dedup_threshold),
            };
            save_bank(&merged, bank_path)
                .context("rewriting bank")
                .map_err(runtime)?;
            println!(
                "dedup merged {} artifacts ({} -> {})",
                before - merged.len(),
                before,
                merged.len()
            );
        }
        BankAction::Cull { min_uses, min_gain } => {
            let culled = seer_core::bank::cull(&bank, min_uses, min_gain);
            let removed = bank.len() - culled.len();
            save_bank(&culled, bank_path)
                .context("rewriting bank")
                .map_err(runtime)?;
            println!(
                "culled {removed} artifacts ({} -> {})",
                bank.len(),
                culled.len()
            );
        }
        BankAction::Gains => {
            println!(
                "{:<18} {:<26} {:>7} {:>12}",
                "skill_id", "tag", "uses", "gain"
            );
            for artifact in &bank.artifacts {
                let uses = artifact.metadata.count_with + artifact.metadata.count_without;
                match marginal_gain(artifact) {
                    Some(gain) => println!(
                        "{:<18} {:<26} {:>7} {:>12.4}",
                        artifact.skill_id, artifact.tag, uses, gain
                    ),
                    None => println!(
                        "{:<18} {:<26} {:>7} {:>12}",
                        artifact.skill_id, artifact.tag, uses, "undefined"
                    ),
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, serde::Serialize)]
pub struct AblateRow {
    pub configuration: String,
    pub dice: f64,
    pub worst_dice: f64,
    pub std: f64,
    pub final_k: usize,
    /// Digest over round-0 prompt digests; equal digests certify identical
    /// per-episode seeds across rows.
    pub round0_prompt_chain: String,
}

pub const ABLATE_CSV_HEADER: &str = "configuration,dice,worst_dice,std";

fn round0_chain(run_dir: &Path) -> Result<String> {
    let path = round_dir(run_dir, 0).join("episodes.jsonl");
    let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
    let episodes = read_episodes(BufReader::new(file))?;
    let mut chain = String::new();
    for episode in &episodes {
        chain.push_str(&episode.prompt_digest);
        chain.push('\n');
    }
    Ok(sha256_hex(chain.as_bytes()))
}

fn ablate_variant(
    label: &str,
    config: &RunConfig,
    round_config: &RoundConfig,
    bank: SkillBank,
    out_dir: &Path,
) -> Result<AblateRow> {
    let corpus = synth_corpus(&config.corpus, config.seed).context("synthesizing corpus")?;
    let mut remote = None;
    let policy = loop_policy(config, &mut remote)?;
    let (final_bank, reports) = run_evolution(
        &corpus,
        bank,
        &policy,
        round_config,
        config.rounds.count,
        Some(out_dir),
    )
    .map_err(|e| anyhow!("{label} run failed: {e}"))?;
    let last = reports.last().expect("at least one round");
    Ok(AblateRow {
        configuration: label.to_string(),
        dice: last.pooled.mean * 100.0,
        worst_dice: last.per_group.worst * 100.0,
        std: last.per_group.std * 100.0,
        final_k: final_bank.len(),
        round0_prompt_chain: round0_chain(out_dir)?,
    })
}

pub fn ablate_rows(config: &RunConfig) -> Result<Vec<AblateRow>> {
    let ablate_dir = config.out_dir.join("ablate");
    let base = config.round_config()?;

    let no_skill = RoundConfig {
        retrieval_enabled: false,
        distillation_enabled: false,
        ..base.clone()
    };
    let grounded = RoundConfig {
        distillation_enabled: false,
        ..base.clone()
    };
    let full = base;

    let rows = vec![
        ablate_variant(
            "no-skill baseline",
            config,
            &no_skill,
            SkillBank::new(config.bank_config()),
            &ablate_dir.join("no_skill"),
        )?,
        ablate_variant(
            "grounded, no evolution",
            config,
            &grounded,
            config.initial_bank()?,
            &ablate_dir.join("grounded_static"),
        )?,
        ablate_variant(
            "full loop",
            config,
            &full,
            config.initial_bank()?,
            &ablate_dir.join("full_loop"),
        )?,
    ];
    Ok(rows)
}

pub fn ablate_csv(rows: &[AblateRow], writer: &mut dyn Write) -> Result<()> {
    writeln!(writer, "{ABLATE_CSV_HEADER}")?;
    for row in rows {
        writeln!(
            writer,
            "{},{:.2},{:.2},{:.2}",
            row.configuration, row.dice, row.worst_dice, row.std
        )?;
    }
    Ok(())
}

pub fn cmd_ablate(config: &RunConfig) -> Result<(), CliError> {
    let rows = with_threads(config.threads, || ablate_rows(config))??;
    println!(
        "{:<26} {:>8} {:>12} {:>8} {:>8}",
        "configuration", "dice", "worst dice", "std", "K"
    );
    for row in &rows {
        println!(
            "{:<26} {:>8.2} {:>12.2} {:>8.2} {:>8}",
            row.configuration, row.dice, row.worst_dice, row.std, row.final_k
        );
    }
    let std_ordered = rows[2].std <= rows[1].std && rows[1].std <= rows[0].std;
    let worst_ordered =
        rows[2].worst_dice >= rows[1].worst_dice && rows[1].worst_dice >= rows[0].worst_dice;
    let seeds_shared = rows
        .iter()
        .all(|r| r.round0_prompt_chain == rows[0].round0_prompt_chain);
    println!(
        "std ordering (full <= grounded <= baseline): {}",
        if std_ordered { "satisfied" } else { "violated" }
    );
    println!(
        "worst ordering (full >= grounded >= baseline): {}",
        if worst_ordered {
            "satisfied"
        } else {
            "violated"
        }
    );
    println!(
        "round-0 prompt chains identical across rows: {}",
        if seeds_shared { "yes" } else { "NO" }
    );

    let ablate_dir = config.out_dir.join("ablate");
    create_dir(&ablate_dir)?;
    let mut csv_buf = Vec::new();
    ablate_csv(&rows, &mut csv_buf).map_err(runtime)?;
    fs::write(ablate_dir.join("ablation.csv"), csv_buf)
        .context("writing ablation.csv")
        .map_err(runtime)?;
    let mut json = serde_json::to_vec_pretty(&rows)
        .context("encoding rows")
        .map_err(runtime)?;
    json.push(b'\n');
    fs::write(ablate_dir.join("ablation.json"), json)
        .context("writing ablation.json")
        .map_err(runtime)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// export
// ---------------------------------------------------------------------------

fn run_episodes(run_dir: &Path, rounds: u64) -> Result<Vec<Episode>> {
    let mut episodes = Vec::new();
    for round in 0..rounds {
        let path = round_dir(run_dir, round).join("episodes.jsonl");
        if !path.exists() {
            break;
        }
        let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        episodes.extend(read_episodes(BufReader::new(file))?);
    }
    if episodes.is_empty() {
        bail!("no episode logs found under {}", run_dir.display());
    }
    Ok(episodes)
}

fn run_groups(run_dir: &Path, rounds: u64) -> Result<Vec<GrpoGroup>> {
    let mut groups = Vec::new();
    for round in 0..rounds {
        let path = round_dir(run_dir, round).join("groups.jsonl");
        if !path.exists() {
            continue;
        }
        let file = fs::File::open(&path).with_context(|| format!("opening {}", path.display()))?;
        for (idx, line) in BufReader::new(file).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let group: GrpoGroup = serde_json::from_str(&line)
                .with_context(|| format!("bad group record {}:{}", path.display(), idx + 1))?;
            groups.push(group);
        }
    }
    Ok(groups)
}

pub enum ExportKind {
    Sft { threshold: f64 },
    Grpo,
}

pub fn cmd_export(
    config: &RunConfig,
    kind: ExportKind,
    run_dir: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    let run_dir = run_dir.unwrap_or(&config.out_dir).to_path_buf();
    if !run_dir.join("bank_initial.jsonl").exists() {
        return Err(CliError::Validation(anyhow!(
            "{} does not look like a run directory (missing bank_initial.jsonl)",
            run_dir.display()
        )));
    }
    let source = RunPromptSource::new(run_dir.clone(), config.clone()).map_err(runtime)?;
    let episodes = run_episodes(&run_dir, config.rounds.count).map_err(runtime)?;

    match kind {
        ExportKind::Sft { threshold } => {
            let out_path = out
                .map(Path::to_path_buf)
                .unwrap_or_else(|| run_dir.join("export_sft.jsonl"));
            let mut buf = Vec::new();
            let written = export_sft(&episodes, &source, threshold, &mut buf)
                .context("exporting sft records")
                .map_err(runtime)?;
            fs::write(&out_path, buf)
                .with_context(|| format!("writing {}", out_path.display()))
                .map_err(runtime)?;
            println!(
                "exported {written} sft records (threshold {threshold}) of {} episodes to {}",
                episodes.len(),
                out_path.display()
            );
        }
        ExportKind::Grpo => {
            let out_path = out
                .map(Path::to_path_buf)
                .unwrap_or_else(|| run_dir.join("export_grpo.jsonl"));
            let groups = run_groups(&run_dir, config.rounds.count).map_err(runtime)?;
            let by_id: std::collections::BTreeMap<&str, &Episode> = episodes
                .iter()
                .map(|e| (e.episode_id.as_str(), e))
                .collect();
            let mut export_groups = Vec::with_capacity(groups.len());
            for group in &groups {
                let episode = by_id.get(group.episode_id.as_str()).ok_or_else(|| {
                    runtime(anyhow!(
                        "group references unknown episode {}",
                        group.episode_id
                    ))
                })?;
                let messages = source
                    .prompt_for(episode)
                    .map_err(|e| runtime(anyhow!("rebuilding prompt: {e}")))?;
                export_groups.push(GrpoExportGroup {
                    episode_id: group.episode_id.clone(),
                    messages,
                    candidates: group.candidates.clone(),
                    rewards: group.rewards.clone(),
                    advantages: grpo_advantages(&group.rewards),
                });
            }
            let mut buf = Vec::new();
            let stats = export_grpo_groups(&export_groups, &mut buf)
                .context("exporting grpo groups")
                .map_err(runtime)?;
            fs::write(&out_path, buf)
                .with_context(|| format!("writing {}", out_path.display()))
                .map_err(runtime)?;
            if stats.written == 0 {
                println!(
                    "warning: no multi-sample groups in this run (set policy.decoding.samples_per_input > 1); wrote {} warning records to {}",
                    stats.skipped,
                    out_path.display()
                );
            } else {
                println!(
                    "exported {} grpo groups ({} skipped) to {}",
                    stats.written,
                    stats.skipped,
                    out_path.display()
                );
            }
        }
    }
    Ok(())
}

/// Writes a seeded review sample of episodes for human audit.
pub fn cmd_review(
    config: &RunConfig,
    fraction: f64,
    run_dir: Option<&Path>,
    out: Option<&Path>,
) -> Result<(), CliError> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(CliError::Validation(anyhow!("fraction must be in (0, 1]")));
    }
    let run_dir = run_dir.unwrap_or(&config.out_dir).to_path_buf();
    let episodes = run_episodes(&run_dir, config.rounds.count).map_err(runtime)?;
    let out_path = out
        .map(Path::to_path_buf)
        .unwrap_or_else(|| run_dir.join("review_sample.jsonl"));
    let mut buf = Vec::new();
    let written =
        seer_core::evolution::export_review_sample(&episodes, fraction, config.seed, &mut buf)
            .context("writing review sample")
            .map_err(runtime)?;
    fs::write(&out_path, buf)
        .with_context(|| format!("writing {}", out_path.display()))
        .map_err(runtime)?;
    println!(
        "sampled {written} of {} episodes to {}",
        episodes.len(),
        out_path.display()
    );
    Ok(())
}

pub fn resolve_config(path: Option<&PathBuf>) -> Result<RunConfig, CliError> {
    match path {
        Some(path) => RunConfig::load(path).map_err(CliError::Validation),
        None => {
            let config = RunConfig::default();
            config.validate().map_err(CliError::Validation)?;
            Ok(config)
        }
    }
}
