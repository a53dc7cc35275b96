//! Command-line surface: `train`, `eval`, `gen-data`, `inspect-margins` and
//! `sweep`.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use crate::config::{parse_config, RunConfig};
use crate::data::{generate, load_dataset, write_dataset, Dataset};
use crate::error::{Error, Result};
use crate::eval::{metrics_csv, BidirectionalReport};
use crate::experts::ExpertKind;
use crate::formats::{self, fmt_f64};
use crate::trainer::{evaluate_model, run_training, Checkpoint, Trainer, CHECKPOINT_FILE};

pub const METRICS_FILE: &str = "metrics.csv";
pub const MARGINS_FILE: &str = "margins.csv";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const RUNS_FILE: &str = "runs.csv";
pub const THREADS_ENV: &str = "MARGINFORGE_THREADS";

#[derive(Debug, Parser)]
#[command(name = "marginforge", version, about = "Adaptive-margin triplet training for two-tower retrieval")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// `key = value` config file; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides `seed` from the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides `paths.out_dir`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    Train,
    Val,
    All,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ExpertChoice {
    All,
    DseText,
    DseVideo,
    SseText,
    SseVideo,
}

impl ExpertChoice {
    fn kinds(self) -> Vec<ExpertKind> {
        match self {
            ExpertChoice::All => ExpertKind::ALL.to_vec(),
            ExpertChoice::DseText => vec![ExpertKind::DseText],
            ExpertChoice::DseVideo => vec![ExpertKind::DseVideo],
            ExpertChoice::SseText => vec![ExpertKind::SseText],
            ExpertChoice::SseVideo => vec![ExpertKind::SseVideo],
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes report.jsonl, checkpoint.ckpt, metrics.csv and the resolved config.
    Train(Common),
    /// Evaluate a checkpoint; prints metrics CSV and writes it under --out if given.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value = "val")]
        split: Split,
    },
    /// Generate a synthetic dataset into --out.
    GenData(Common),
    /// Dump distances and margins of one batch as CSV.
    InspectMargins {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Index into the training split cut into fixed-order batches.
        #[arg(long, default_value_t = 0)]
        batch: usize,
        #[arg(long, value_enum, default_value = "all")]
        expert: ExpertChoice,
    },
    /// Full factorial over up to three parameters, repeated per seed.
    Sweep {
        #[command(flatten)]
        common: Common,
        /// Comma-separated seeds; defaults to the config seed.
        #[arg(long)]
        seeds: Option<String>,
        /// `key=v1,v2,...`; repeat for up to three keys.
        #[arg(long = "param")]
        params: Vec<String>,
    },
}

pub fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => parse_config(p)?,
        None => RunConfig::default().resolve()?,
    };
    if let Some(seed) = common.seed {
        cfg = cfg.with_seed(seed);
    }
    if let Some(out) = &common.out {
        cfg.out_dir = Some(out.clone());
    }
    Ok(cfg)
}

/// Loads `paths.data_dir` if set, otherwise generates from `data.*`.
pub fn dataset_for(cfg: &RunConfig) -> Result<Dataset> {
    match &cfg.data_dir {
        Some(dir) => load_dataset(dir),
        None => generate(&cfg.data),
    }
}

fn out_dir(cfg: &RunConfig) -> Result<PathBuf> {
    let out = cfg
        .out_dir
        .clone()
        .ok_or_else(|| Error::MissingRequired("paths.out_dir (or --out)".into()))?;
    if let Some(data) = &cfg.data_dir {
        let same = match (fs::canonicalize(data), fs::canonicalize(&out)) {
            (Ok(a), Ok(b)) => a == b,
            _ => data == &out,
        };
        if same {
            return Err(Error::InvalidArgument("output directory must differ from the dataset directory".into()));
        }
    }
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    Ok(out)
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(common) => cmd_train(&common),
        Command::Eval { common, checkpoint, split } => cmd_eval(&common, &checkpoint, split),
        Command::GenData(common) => cmd_gen_data(&common),
        Command::InspectMargins {
            common,
            checkpoint,
            batch,
            expert,
        } => cmd_inspect_margins(&common, &checkpoint, batch, expert),
        Command::Sweep { common, seeds, params } => cmd_sweep(&common, seeds.as_deref(), &params),
    }
}

pub fn cmd_train(common: &Common) -> Result<()> {
    let cfg = load_config(common)?;
    let ds = dataset_for(&cfg)?;
    let out = out_dir(&cfg)?;
    cfg.write_echo(&out)?;
    let outcome = run_training(&cfg.train, &ds, &cfg.ks, Some(&out))?;
    let report = evaluate_model(&outcome.checkpoint.model, &ds, &ds.val, &cfg.ks)?;
    formats::write_text(&out.join(METRICS_FILE), &metrics_csv(&report))?;
    println!(
        "trained {} epochs, val rsum {:.4}, outputs in {}",
        outcome.checkpoint.epoch,
        report.rsum,
        out.display()
    );
    Ok(())
}

pub fn cmd_eval(common: &Common, checkpoint: &Path, split: Split) -> Result<()> {
    let cfg = load_config(common)?;
    let ds = dataset_for(&cfg)?;
    let ck = Checkpoint::load(checkpoint)?;
    let indices: Vec<usize> = match split {
        Split::Train => ds.train.clone(),
        Split::Val => ds.val.clone(),
        Split::All => (0..ds.items.len()).collect(),
    };
    let report = evaluate_model(&ck.model, &ds, &indices, &cfg.ks)?;
    let csv = metrics_csv(&report);
    if cfg.out_dir.is_some() {
        let out = out_dir(&cfg)?;
        cfg.write_echo(&out)?;
        formats::write_text(&out.join(METRICS_FILE), &csv)?;
    }
    print!("{csv}");
    Ok(())
}

pub fn cmd_gen_data(common: &Common) -> Result<()> {
    let mut cfg = load_config(common)?;
    cfg.data_dir = None;
    cfg.data.validate()?;
    let out = out_dir(&cfg)?;
    let ds = generate(&cfg.data)?;
    write_dataset(&ds, &out)?;
    println!("wrote {} items to {}", ds.items.len(), out.display());
    Ok(())
}

/// CSV rows `i,j,expert,distance,margin,same_concept` for every ordered
/// off-diagonal pair of the batch.
pub fn margins_csv(trainer: &Trainer<'_>, ds: &Dataset, batch: &[usize], kinds: &[ExpertKind]) -> Result<String> {
    let mut out = String::from("i,j,expert,distance,margin,same_concept\n");
    for (kind, eb) in trainer.expert_batches(batch)? {
        if !kinds.contains(&kind) {
            continue;
        }
        for (i, &a) in batch.iter().enumerate() {
            for (j, &b) in batch.iter().enumerate() {
                if i == j {
                    continue;
                }
                let same = u8::from(ds.items[a].concept == ds.items[b].concept);
                let _ = writeln!(
                    out,
                    "{i},{j},{kind},{},{},{same}",
                    fmt_f64(eb.distances.get(i, j)),
                    fmt_f64(eb.margins.get(i, j))
                );
            }
        }
    }
    Ok(out)
}

pub fn cmd_inspect_margins(common: &Common, checkpoint: &Path, batch: usize, expert: ExpertChoice) -> Result<()> {
    let cfg = load_config(common)?;
    let ds = dataset_for(&cfg)?;
    let ck = Checkpoint::load(checkpoint)?;
    let trainer = Trainer::with_model(cfg.train.clone(), &ds, ck.model)?;
    let batches = trainer.fixed_batches();
    let chosen = batches.get(batch).ok_or(Error::IndexOutOfRange {
        index: batch,
        len: batches.len(),
    })?;
    let csv = margins_csv(&trainer, &ds, chosen, &expert.kinds())?;
    let out = out_dir(&cfg)?;
    cfg.write_echo(&out)?;
    formats::write_text(&out.join(MARGINS_FILE), &csv)?;
    println!("wrote {} rows to {}", csv.lines().count() - 1, out.join(MARGINS_FILE).display());
    Ok(())
}

/// One sweep axis: a config key and its values as written.
#[derive(Clone, Debug, PartialEq)]
pub struct SweepParam {
    pub key: String,
    pub values: Vec<String>,
}

pub fn parse_sweep_param(spec: &str) -> Result<SweepParam> {
    let (key, values) = spec
        .split_once('=')
        .ok_or_else(|| Error::InvalidArgument(format!("--param expects key=v1,v2, got `{spec}`")))?;
    let values: Vec<String> = values.split(',').map(|v| v.trim().to_string()).collect();
    if key.trim().is_empty() || values.iter().any(String::is_empty) {
        return Err(Error::InvalidArgument(format!("malformed --param `{spec}`")));
    }
    Ok(SweepParam {
        key: key.trim().to_string(),
        values,
    })
}

/// Every combination of parameter values, first parameter varying slowest.
pub fn grid_cells(params: &[SweepParam]) -> Vec<Vec<String>> {
    params.iter().fold(vec![Vec::new()], |cells, p| {
        cells
            .iter()
            .flat_map(|c| {
                p.values.iter().map(move |v| {
                    let mut c = c.clone();
                    c.push(v.clone());
                    c
                })
            })
            .collect()
    })
}

/// Final-epoch numbers of one sweep run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunRecord {
    pub cell: usize,
    pub seed: u64,
    pub rsum: f64,
    pub t2v_r1: f64,
    pub v2t_r1: f64,
}

/// Mean, population std and sample std (`None` below two values), via
/// Welford's recurrence.
pub fn summarize(values: &[f64]) -> (f64, f64, Option<f64>) {
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for (k, &x) in values.iter().enumerate() {
        let d = x - mean;
        mean += d / (k + 1) as f64;
        m2 += d * (x - mean);
    }
    let n = values.len() as f64;
    let pop = (m2 / n).sqrt();
    let sample = (values.len() > 1).then(|| (m2 / (n - 1.0)).sqrt());
    (mean, pop, sample)
}

fn threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        Err(_) => Ok(1),
    }
}

fn run_cell(base: &RunConfig, params: &[SweepParam], values: &[String], seed: u64, dir: &Path) -> Result<RunRecord> {
    let mut cfg = base.clone();
    for (p, v) in params.iter().zip(values) {
        cfg.set(&p.key, v, 0)?;
    }
    let cfg = cfg.with_seed(seed).resolve()?;
    let ds = dataset_for(&cfg)?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    cfg.write_echo(dir)?;
    let outcome = run_training(&cfg.train, &ds, &cfg.ks, Some(dir))?;
    let report: BidirectionalReport = evaluate_model(&outcome.checkpoint.model, &ds, &ds.val, &cfg.ks)?;
    let r1 = |ranks: &[usize]| crate::eval::recall_at_k(ranks, 1);
    Ok(RunRecord {
        cell: 0,
        seed,
        rsum: report.rsum,
        t2v_r1: r1(&report.t2v.ranks)?,
        v2t_r1: r1(&report.v2t.ranks)?,
    })
}

pub fn cmd_sweep(common: &Common, seeds: Option<&str>, params: &[String]) -> Result<()> {
    let base = load_config(common)?;
    let params = params.iter().map(|p| parse_sweep_param(p)).collect::<Result<Vec<_>>>()?;
    if params.len() > 3 {
        return Err(Error::InvalidArgument(format!("at most 3 sweep parameters, got {}", params.len())));
    }
    let seeds: Vec<u64> = match seeds {
        Some(s) => s
            .split(',')
            .map(|t| {
                t.trim()
                    .parse()
                    .map_err(|_| Error::InvalidArgument(format!("bad seed `{t}`")))
            })
            .collect::<Result<_>>()?,
        None => vec![base.seed],
    };
    let out = out_dir(&base)?;
    base.write_echo(&out)?;
    let cells = grid_cells(&params);
    // Validate every cell before any training starts.
    for values in &cells {
        let mut cfg = base.clone();
        for (p, v) in params.iter().zip(values) {
            cfg.set(&p.key, v, 0)?;
        }
        cfg.resolve()?;
    }
    let jobs: Vec<(usize, u64)> = (0..cells.len())
        .flat_map(|c| seeds.iter().map(move |&s| (c, s)))
        .collect();
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(threads()?)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))?;
    let records: Vec<RunRecord> = pool.install(|| {
        jobs.par_iter()
            .map(|&(c, seed)| {
                let dir = out.join("runs").join(format!("cell{c:03}_seed{seed}"));
                run_cell(&base, &params, &cells[c], seed, &dir).map(|r| RunRecord { cell: c, ..r })
            })
            .collect::<Result<Vec<_>>>()
    })?;

    let header: Vec<&str> = params.iter().map(|p| p.key.as_str()).collect();
    let prefix = |cell: usize| -> String { cells[cell].iter().map(|v| format!("{v},")).collect() };
    let mut runs = String::new();
    for h in &header {
        let _ = write!(runs, "{h},");
    }
    runs.push_str("seed,rsum,t2v_R1,v2t_R1\n");
    for r in &records {
        let _ = writeln!(
            runs,
            "{}{},{},{},{}",
            prefix(r.cell),
            r.seed,
            fmt_f64(r.rsum),
            fmt_f64(r.t2v_r1),
            fmt_f64(r.v2t_r1)
        );
    }
    let mut summary = String::new();
    for h in &header {
        let _ = write!(summary, "{h},");
    }
    summary.push_str("runs");
    for m in ["rsum", "t2v_R1", "v2t_R1"] {
        let _ = write!(summary, ",{m}_mean,{m}_std,{m}_std_sample");
    }
    summary.push('\n');
    for c in 0..cells.len() {
        let mine: Vec<&RunRecord> = records.iter().filter(|r| r.cell == c).collect();
        let _ = write!(summary, "{}{}", prefix(c), mine.len());
        for get in [|r: &RunRecord| r.rsum, |r: &RunRecord| r.t2v_r1, |r: &RunRecord| r.v2t_r1] {
            let vals: Vec<f64> = mine.iter().map(|r| get(r)).collect();
            let (mean, pop, sample) = summarize(&vals);
            let sample = sample.map_or_else(|| "NA".to_string(), fmt_f64);
            let _ = write!(summary, ",{},{},{sample}", fmt_f64(mean), fmt_f64(pop));
        }
        summary.push('\n');
    }
    formats::write_text(&out.join(RUNS_FILE), &runs)?;
    formats::write_text(&out.join(SUMMARY_FILE), &summary)?;
    println!("{} cells x {} seeds, summary in {}", cells.len(), seeds.len(), out.join(SUMMARY_FILE).display());
    Ok(())
}

/// Default checkpoint location inside an output directory.
pub fn checkpoint_path(dir: &Path) -> PathBuf {
    dir.join(CHECKPOINT_FILE)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_is_full_factorial() {
        let params = vec![
            parse_sweep_param("train.beta=0,0.04").unwrap(),
            parse_sweep_param("train.alpha=0.05,0.1,0.2").unwrap(),
        ];
        let cells = grid_cells(&params);
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[0], vec!["0", "0.05"]);
        assert_eq!(cells[5], vec!["0.04", "0.2"]);
        assert_eq!(grid_cells(&[]), vec![Vec::<String>::new()]);
        assert!(parse_sweep_param("train.beta").is_err());
        assert!(parse_sweep_param("train.beta=1,,2").is_err());
    }

    #[test]
    fn summarize_matches_two_pass() {
        let xs = [3.0, 7.5, -1.25, 4.0, 10.0];
        let (mean, pop, sample) = summarize(&xs);
        let m = xs.iter().sum::<f64>() / 5.0;
        let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
        assert!((mean - m).abs() < 1e-12);
        assert!((pop - (ss / 5.0).sqrt()).abs() < 1e-12);
        assert!((sample.unwrap() - (ss / 4.0).sqrt()).abs() < 1e-12);
        assert_eq!(summarize(&[2.5]), (2.5, 0.0, None));
    }

    #[test]
    fn cli_parses_commands() {
        let cli = Cli::try_parse_from(["marginforge", "train", "--seed", "3", "--out", "x"]).unwrap();
        assert!(matches!(cli.command, Command::Train(Common { seed: Some(3), .. })));
        let cli = Cli::try_parse_from([
            "marginforge",
            "sweep",
            "--param",
            "train.beta=0,0.04",
            "--param",
            "train.alpha=0.05",
            "--seeds",
            "0,1",
        ])
        .unwrap();
        assert!(matches!(cli.command, Command::Sweep { ref params, .. } if params.len() == 2));
        let cli = Cli::try_parse_from(["marginforge", "inspect-margins", "--checkpoint", "c", "--expert", "sse-text"]).unwrap();
        assert!(matches!(cli.command, Command::InspectMargins { expert: ExpertChoice::SseText, .. }));
        assert!(Cli::try_parse_from(["marginforge", "fly"]).is_err());
    }
}
