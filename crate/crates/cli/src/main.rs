//! `sophia` command-line driver.
//!
//! Each stage reads and writes line-delimited files so a pool sampled once
//! can be re-scored or re-selected with different settings. File-producing
//! commands also write `<output>.manifest.json`.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::info;

use sophia_core::config::BackendKind;
use sophia_core::optimizer::{check_bias_bound, engineered_pair, hashed_reward, train, Curriculum};
use sophia_core::pipeline::{
    backends_for, export_records, files, run_e2e_stub, synthetic_dataset, RunCounts, RunManifest,
};
use sophia_core::records::{self, read_jsonl, read_pool, write_jsonl, write_pool};
use sophia_core::rewards::{score_pool, select};
use sophia_core::sampler::collect;
use sophia_core::verifier::run_corpus_file;
use sophia_core::{load_config, OffPolicyRecord, PipelineConfig, TaskItem, Verifier};

#[derive(Parser)]
#[command(name = "sophia", version, about = "Semi-off-policy reasoning data loop")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Config file plus per-key overrides. Flags win over the file.
#[derive(Args, Clone, Default)]
struct ConfigArgs {
    /// Config file (TOML `key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Override any config key, e.g. `--set alpha=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_key_value)]
    overrides: Vec<(String, String)>,
}

impl ConfigArgs {
    fn resolve(&self, extra: &[(&str, Option<String>)]) -> Result<PipelineConfig> {
        let base = match &self.config {
            Some(path) => load_config(path).context("config")?,
            None => PipelineConfig::default(),
        };
        let mut overrides = self.overrides.clone();
        if let Some(seed) = self.seed {
            overrides.push(("seed".into(), seed.to_string()));
        }
        for (key, value) in extra {
            if let Some(v) = value {
                overrides.push((key.to_string(), v.clone()));
            }
        }
        base.with_overrides(&overrides).context("config")
    }
}

fn parse_key_value(s: &str) -> Result<(String, String), String> {
    let (k, v) = s.split_once('=').ok_or_else(|| format!("expected KEY=VALUE, got `{s}`"))?;
    Ok((k.trim().to_string(), v.trim().to_string()))
}

#[derive(Subcommand)]
enum Command {
    /// Sample captions and reasoning rollouts into a raw pool.
    Sample {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Task list (JSONL). Stub runs synthesize one when omitted.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Verify every trajectory and propagate rewards to captions.
    Score {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        pool: PathBuf,
        /// Task list whose gold answers override those stored in the pool.
        #[arg(long)]
        dataset: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Keep the shortest correct trajectories with well-rewarded captions.
    Select {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        scored: PathBuf,
        #[arg(long)]
        alpha: Option<f64>,
        #[arg(long)]
        keep_n: Option<u32>,
        #[arg(long)]
        out: PathBuf,
        /// Where to write the selection report (JSON).
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train the toy policy on the synthetic curriculum.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        rounds: Option<u32>,
        /// Output directory for history, policy and manifest.
        #[arg(long)]
        out: PathBuf,
    },
    /// Sample, score, select and train against the stub backends.
    E2eStub {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out_dir: PathBuf,
    },
    /// Measure the ratio-free objective against the importance-weighted one
    /// on an exhaustively enumerable policy pair.
    CheckBias {
        #[arg(long, default_value_t = 3)]
        vtok: usize,
        #[arg(long, default_value_t = 3)]
        maxlen: usize,
        #[arg(long, default_value_t = 0.05)]
        delta: f64,
        #[arg(long, default_value_t = 2)]
        window: usize,
        #[arg(long, default_value_t = 7)]
        seed: u64,
    },
    /// Print 1 if the prediction matches the gold answer, 0 otherwise.
    VerifyAnswer {
        #[arg(long)]
        pred: String,
        #[arg(long)]
        gold: String,
        #[arg(long)]
        rel_tol: Option<f64>,
    },
    /// Run a tab-separated equivalence corpus and report pass counts.
    VerifyCorpus {
        file: PathBuf,
        #[arg(long)]
        rel_tol: Option<f64>,
    },
    /// Turn selected records into training examples.
    Export {
        #[arg(long)]
        records: PathBuf,
        #[arg(long, default_value = "jsonl")]
        format: String,
        #[arg(long)]
        out: PathBuf,
    },
}

fn manifest_path(out: &Path) -> PathBuf {
    let mut name = out.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".manifest.json");
    out.with_file_name(name)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("cannot create {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<()> {
    write_text(&manifest_path(out), &manifest.to_json())
}

fn load_tasks(dataset: Option<&Path>, config: &PipelineConfig) -> Result<Vec<TaskItem>> {
    match dataset {
        Some(path) => read_jsonl(path).context("dataset"),
        None if config.backend == BackendKind::Stub => Ok(synthetic_dataset(config).1),
        None => bail!("dataset: --dataset is required with a remote backend"),
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::Sample { cfg, dataset, out } => {
            let config = cfg.resolve(&[])?;
            let tasks = load_tasks(dataset.as_deref(), &config)?;
            let backends = backends_for(&config, &tasks);
            let mut manifest = RunManifest::new("sample", &config);
            manifest.backend_ids = backends.ids();
            let pool = manifest
                .time("sample", || collect(&tasks, &config, backends.vision.as_ref(), backends.reasoner.as_ref()))
                .context("sample")?;
            manifest.counts = RunCounts::from_pool(&pool);
            write_pool(&out, &pool).context("sample")?;
            write_manifest(&out, &manifest)?;
            info!("sampled {} trajectories into {}", pool.trajectory_count(), out.display());
        }
        Command::Score { cfg, pool, dataset, out } => {
            let config = cfg.resolve(&[])?;
            let raw = read_pool(&pool).context("score")?;
            let gold: BTreeMap<String, String> = match dataset {
                Some(path) => read_jsonl::<TaskItem>(&path)
                    .context("score")?
                    .into_iter()
                    .map(|t| (t.id, t.gold_answer))
                    .collect(),
                None => BTreeMap::new(),
            };
            let verifier = Verifier::with_tolerance(config.verifier_rel_tol);
            let mut manifest = RunManifest::new("score", &config);
            let scored = manifest.time("score", || score_pool(&raw, &gold, &verifier)).context("score")?;
            manifest.counts = RunCounts::from_pool(&scored);
            write_pool(&out, &scored).context("score")?;
            write_manifest(&out, &manifest)?;
        }
        Command::Select {
            cfg,
            scored,
            alpha,
            keep_n,
            out,
            report,
        } => {
            let config = cfg.resolve(&[
                ("alpha", alpha.map(|a| a.to_string())),
                ("keep_n", keep_n.map(|n| n.to_string())),
            ])?;
            let pool = read_pool(&scored).context("select")?;
            let mut manifest = RunManifest::new("select", &config);
            let (selected, summary) = manifest
                .time("select", || select(&pool, config.alpha, config.keep_n))
                .context("select")?;
            manifest.counts = RunCounts::from_pool(&pool).with_selection(&summary);
            write_jsonl(&out, &selected).context("select")?;
            if let Some(path) = report {
                write_text(&path, &(serde_json::to_string_pretty(&summary)? + "\n"))?;
            }
            write_manifest(&out, &manifest)?;
            println!("selected {} of {} eligible", summary.selected_count(), summary.eligible_count());
        }
        Command::Train { cfg, rounds, out } => {
            let config = cfg.resolve(&[("rounds", rounds.map(|r| r.to_string()))])?;
            let tasks = load_tasks(None, &config)?;
            let backends = backends_for(&config, &tasks);
            let curriculum = Curriculum::one_hot(tasks, config.context_scale);
            let mut manifest = RunManifest::new("train", &config);
            manifest.backend_ids = backends.ids();
            let outcome = manifest
                .time("train", || train(&config, &curriculum, backends.vision.as_ref(), backends.reasoner.as_ref()))
                .context("train")?;
            write_text(&out.join(files::HISTORY), &records::to_jsonl(&outcome.history))?;
            write_text(&out.join(files::POLICY), &(outcome.state.policy.to_json() + "\n"))?;
            write_text(&out.join(files::MANIFEST), &manifest.to_json())?;
            if let Some(last) = outcome.history.last() {
                println!("round {} eval reward {:.4}", last.round, last.eval_reward);
            }
        }
        Command::E2eStub { cfg, out_dir } => {
            let config = cfg.resolve(&[])?;
            let summary = run_e2e_stub(&config, &out_dir)?;
            let c = &summary.manifest.counts;
            println!(
                "tasks {} captions {} trajectories {} selected {}",
                c.tasks, c.captions, c.trajectories, c.selected
            );
            if let Some(last) = summary.history.last() {
                println!("round {} eval reward {:.4}", last.round, last.eval_reward);
            }
        }
        Command::CheckBias {
            vtok,
            maxlen,
            delta,
            window,
            seed,
        } => {
            let reward = hashed_reward(seed);
            let (mu, pi) = engineered_pair(vtok, maxlen, window, delta, seed, &reward).context("check-bias")?;
            let report = check_bias_bound(&pi, &mu, &reward, &[]).context("check-bias")?;
            println!("{}", serde_json::to_string(&report)?);
            if !report.bound_satisfied {
                bail!("check-bias: |G_IS - G_1| = {} exceeds delta = {}", report.gap(), report.delta);
            }
        }
        Command::VerifyAnswer { pred, gold, rel_tol } => {
            let verifier = verifier_with(rel_tol);
            let equal = verifier.check_equivalence(&pred, &gold);
            println!("{}", u8::from(equal));
        }
        Command::VerifyCorpus { file, rel_tol } => {
            let report = run_corpus_file(&verifier_with(rel_tol), &file).context("verify-corpus")?;
            for case in &report.failures {
                println!(
                    "FAIL line {}: `{}` vs `{}` expected {}",
                    case.line,
                    case.pred,
                    case.gold,
                    u8::from(case.expected)
                );
            }
            println!("passed {}/{}", report.passed, report.total);
            if report.passed != report.total {
                bail!("verify-corpus: {} case(s) failed", report.total - report.passed);
            }
        }
        Command::Export { records, format, out } => {
            let selected: Vec<OffPolicyRecord> = read_jsonl(&records).context("export")?;
            let text = export_records(&selected, &format).context("export")?;
            write_text(&out, &text)?;
            let mut manifest = RunManifest::new("export", &PipelineConfig::default());
            manifest.counts.selected = selected.len();
            write_manifest(&out, &manifest)?;
        }
    }
    Ok(())
}

fn verifier_with(rel_tol: Option<f64>) -> Verifier {
    rel_tol.map_or_else(Verifier::default, Verifier::with_tolerance)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
