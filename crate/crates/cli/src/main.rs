//! `cycle`: one binary driving synthesis, dataset building, training,
//! evaluation and the gradient suite.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{ArgAction, Parser, Subcommand};
use cycle_core::config::{resolve, RunConfig};
use cycle_core::dataset::{diff_pools, save_pools};
use cycle_core::eval::{CellRanks, EvalReport};
use cycle_core::gradsuite::run_suite;
use cycle_core::pipeline::{
    build_artifacts, checkpoint_path, evaluate_checkpoint, gap_report, merge_reports, target_year, train_data, Artifacts,
    Dataset,
};
use cycle_core::trainer::{train, write_log, Checkpoint};
use cycle_core::Error;

#[derive(Parser)]
#[command(name = "cycle", version, about = "Temporal entity linking with graph contrastive learning")]
struct Cli {
    /// Flat key=value config file.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
    /// Shorthand for --set seed=N.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Cap on worker threads (0: one per core).
    #[arg(long, global = true)]
    workers: Option<usize>,
    /// More log output; repeat for more.
    #[arg(short, long, action = ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic drifting dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
    },
    /// Build vocabulary, feature matrix, feature graph and all sample pools.
    BuildDataset {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Positive/negative pools between two snapshots.
    Diff {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        t1: i32,
        #[arg(long)]
        t2: i32,
        /// Write the pools here instead of printing a summary only.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train one model per requested year.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        artifacts: PathBuf,
        /// Training year; omit to train every year.
        #[arg(long)]
        train_year: Option<i32>,
        /// Defaults to the year farthest from the training year.
        #[arg(long, requires = "train_year")]
        target_year: Option<i32>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Continue from this checkpoint.
        #[arg(long, requires = "train_year")]
        resume: Option<PathBuf>,
    },
    /// Rank every test mention with one checkpoint.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "model")]
        name: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Full train-year by test-year matrix from a checkpoint directory.
    GapMatrix {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        artifacts: PathBuf,
        #[arg(long)]
        checkpoints: PathBuf,
        #[arg(long, default_value = "full")]
        name: String,
        /// Checkpoint directory of a baseline for boosts and degree buckets.
        #[arg(long)]
        baseline: Option<PathBuf>,
        #[arg(long, default_value = "ablation")]
        baseline_name: String,
        #[arg(long)]
        out: PathBuf,
        /// Also write the flat table.
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
    /// Check every trainable op and the joint objective against finite differences.
    GradCheck {
        #[arg(long, default_value_t = cycle_core::gradsuite::DEFAULT_PROBES)]
        probes: usize,
        #[arg(long, default_value_t = cycle_core::gradsuite::DEFAULT_TOLERANCE)]
        tolerance: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge reports built from the same dataset.
    Report {
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
        #[arg(long)]
        baseline: Option<String>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        tsv: Option<PathBuf>,
    },
}

enum Failure {
    Usage(String),
    Data(String),
    Numeric(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(_) => Failure::Usage(e.to_string()),
            e if e.is_numeric() => Failure::Numeric(e.to_string()),
            e => Failure::Data(e.to_string()),
        }
    }
}

type Outcome = Result<(), Failure>;

fn write(path: &Path, body: impl AsRef<[u8]>) -> Outcome {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Failure::Data(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, body).map_err(|e| Failure::Data(format!("{}: {e}", path.display())))
}

fn write_report(report: &EvalReport, out: &Path, tsv: Option<&Path>, cfg: &RunConfig) -> Outcome {
    write(out, serde_json::to_vec_pretty(report).expect("serializable"))?;
    if let Some(t) = tsv {
        write(t, report.to_tsv(cfg.eval.direction))?;
    }
    Ok(())
}

fn load(data: &Path, artifacts: &Path) -> Result<(Dataset, Artifacts), Failure> {
    let ds = Dataset::load(data)?;
    let art = Artifacts::load(artifacts, &ds)?;
    Ok((ds, art))
}

/// Cells of every `checkpoint_<year>.bin` in `dir`, in year order.
fn evaluate_dir(ds: &Dataset, art: &Artifacts, dir: &Path, cfg: &RunConfig) -> Result<Vec<CellRanks>, Failure> {
    let mut cells = Vec::new();
    let mut found = 0;
    for &year in ds.years() {
        let p = checkpoint_path(dir, year);
        if !p.exists() {
            continue;
        }
        found += 1;
        let ck = Checkpoint::load(&p)?;
        cells.extend(evaluate_checkpoint(ds, art, &ck.params, ck.config.model.dim, ck.config.train_year, cfg.budget)?);
    }
    if found == 0 {
        return Err(Failure::Data(format!("no checkpoint_<year>.bin files in {}", dir.display())));
    }
    Ok(cells)
}

fn run(cli: Cli) -> Outcome {
    let mut overrides = Vec::new();
    for kv in &cli.set {
        let (k, v) = kv.split_once('=').ok_or_else(|| Failure::Usage(format!("--set expects KEY=VALUE, got {kv:?}")))?;
        overrides.push((k.trim().to_string(), v.to_string()));
    }
    if let Some(s) = cli.seed {
        overrides.push(("seed".into(), s.to_string()));
    }
    if let Some(w) = cli.workers {
        overrides.push(("workers".into(), w.to_string()));
    }
    let cfg = resolve(cli.config.as_deref(), &overrides)?;
    if cfg.workers > 0 {
        rayon::ThreadPoolBuilder::new()
            .num_threads(cfg.workers)
            .build_global()
            .map_err(|e| Failure::Usage(e.to_string()))?;
    }
    log::info!("config hash {}", cfg.hash());
    for (k, v) in cfg.entries() {
        log::info!("config {k}={v}");
    }

    match cli.cmd {
        Cmd::Synth { out } => {
            let world = cycle_core::synth::generate(&cfg.synth, &out)?;
            let edges: Vec<String> = world.edges.iter().map(|e| e.len().to_string()).collect();
            println!("wrote {} entities, edges per year [{}] to {}", cfg.synth.n, edges.join(", "), out.display());
        }
        Cmd::BuildDataset { data, out } => {
            let ds = Dataset::load(&data)?;
            let art = build_artifacts(&ds, &cfg.build)?;
            art.save(&out)?;
            let m = &art.manifest;
            println!(
                "vocab {} | feature columns {} | feature edges {} | {} pool files | dataset {}",
                m.vocab_size,
                m.feature_columns,
                m.feature_edges,
                art.relation_pools.len() + 1,
                m.dataset_hash
            );
        }
        Cmd::Diff { data, t1, t2, out } => {
            let ds = Dataset::load(&data)?;
            let pools = diff_pools(ds.snapshot(t1)?, ds.snapshot(t2)?)?;
            let pos: usize = pools.positives.iter().map(Vec::len).sum();
            let neg: usize = pools.negatives.iter().map(Vec::len).sum();
            let touched = pools.positives.iter().zip(&pools.negatives).filter(|(p, n)| !p.is_empty() || !n.is_empty()).count();
            println!("{t1} -> {t2}: {pos} gained, {neg} lost, {touched} entities changed");
            if let Some(p) = out {
                save_pools(&pools, &p, Some(&cfg.build.hash()))?;
            }
        }
        Cmd::Train { data, artifacts, train_year, target_year: target, out_dir, resume } => {
            let (ds, art) = load(&data, &artifacts)?;
            let years: Vec<i32> = match train_year {
                Some(y) => vec![y],
                None => ds.years().to_vec(),
            };
            for year in years {
                let target = match target {
                    Some(t) => t,
                    None => target_year(ds.years(), year).ok_or_else(|| Failure::Data("need at least two snapshots".into()))?,
                };
                let mut tc = cfg.train;
                tc.train_year = year;
                tc.target_year = target;
                let td = train_data(&ds, &art, year, target, &tc.model, cfg.budget)?;
                let resume = resume.as_deref().map(Checkpoint::load).transpose()?;
                let first = resume.as_ref().map_or(0, |c| c.epoch);
                let outcome = train(&td, &tc, resume)?;
                let ck = checkpoint_path(&out_dir, year);
                fs::create_dir_all(&out_dir).map_err(|e| Failure::Data(format!("{}: {e}", out_dir.display())))?;
                outcome.checkpoint.save(&ck)?;
                write_log(out_dir.join(format!("train_log_{year}.jsonl")), &outcome.reports, first)?;
                let last = outcome.reports.last();
                println!(
                    "{year} -> {target}: {} epochs, final L = {}, checkpoint {}",
                    outcome.reports.len(),
                    last.map_or("-".into(), |r| format!("{:.6}", r.l)),
                    ck.display()
                );
            }
        }
        Cmd::Evaluate { data, artifacts, checkpoint, name, out } => {
            let (ds, art) = load(&data, &artifacts)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let cells = evaluate_checkpoint(&ds, &art, &ck.params, ck.config.model.dim, ck.config.train_year, cfg.budget)?;
            let report = gap_report(&ds, &cfg, (&name, &cells), None)?;
            write_report(&report, &out, None, &cfg)?;
            println!("{} cells written to {}", report.per_cell.len(), out.display());
        }
        Cmd::GapMatrix { data, artifacts, checkpoints, name, baseline, baseline_name, out, tsv } => {
            let (ds, art) = load(&data, &artifacts)?;
            let cells = evaluate_dir(&ds, &art, &checkpoints, &cfg)?;
            let base = baseline.map(|b| evaluate_dir(&ds, &art, &b, &cfg)).transpose()?;
            let report = gap_report(&ds, &cfg, (&name, &cells), base.as_deref().map(|b| (baseline_name.as_str(), b)))?;
            write_report(&report, &out, tsv.as_deref(), &cfg)?;
            println!("{} cells, {} gap entries written to {}", report.per_cell.len(), report.per_gap.len(), out.display());
        }
        Cmd::GradCheck { probes, tolerance, out } => {
            let report = run_suite(probes, tolerance, cfg.train.seed)?;
            for e in &report.entries {
                println!(
                    "{:<26} {} max rel err {:.3e} ({} probes, {} rejected)",
                    e.report.op,
                    if e.report.pass { "ok  " } else { "FAIL" },
                    e.report.max_rel_error,
                    e.probes,
                    e.rejected
                );
            }
            println!("{:.1}s", report.seconds);
            if let Some(p) = out {
                write(&p, serde_json::to_vec_pretty(&report).expect("serializable"))?;
            }
            if !report.pass() {
                return Err(Failure::Numeric("gradient check failed".into()));
            }
        }
        Cmd::Report { inputs, baseline, out, tsv } => {
            let mut reports = Vec::new();
            for p in &inputs {
                let body = fs::read(p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?;
                let r: EvalReport =
                    serde_json::from_slice(&body).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?;
                reports.push(r);
            }
            let merged = merge_reports(&reports, baseline.as_deref())?;
            write_report(&merged, &out, tsv.as_deref(), &cfg)?;
            println!("merged {} reports into {}", reports.len(), out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    let level = match cli.verbose {
        0 => "info",
        1 => "debug",
        _ => "trace",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            let (code, msg) = match f {
                Failure::Usage(m) => (1, m),
                Failure::Data(m) => (2, m),
                Failure::Numeric(m) => (3, m),
            };
            eprintln!("error: {msg}");
            ExitCode::from(code)
        }
    }
}
