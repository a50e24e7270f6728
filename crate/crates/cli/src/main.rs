use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;
use std::thread;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use copl_core::harness::{
    self, adapt_stage, artifact, evaluate, gcf_stage, generate_stage, ratio_label, reward_stage, sweep_config,
    write_exports, AdaptedEmbeddings, SweepPoint,
};
use copl_core::{json, EmbeddingTable, ExperimentConfig, GcfModel, MetricsReport, MoleRewardModel};
use copl_core::{PreferenceDataset, UnseenCohort};
use serde::de::DeserializeOwned;

mod manifest;

use manifest::RunRecord;

const CONFIG_FILE: &str = "config.json";
const SWEEP_FILE: &str = "sweep.json";

#[derive(Debug, Parser)]
#[command(name = "copl", version, about = "Collaborative preference learning experiments")]
struct Cli {
    /// Experiment config (JSON). Defaults to <out>/config.json when present,
    /// otherwise built-in defaults.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Directory for all artifacts.
    #[arg(long, global = true, value_name = "DIR", default_value = "out")]
    out: PathBuf,

    /// Overrides the config's master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset and unseen-user cohort.
    Generate,
    /// Train the signed graph embeddings.
    TrainGcf,
    /// Train the user-routed reward model.
    TrainReward,
    /// Embed unseen users.
    Adapt,
    /// Score everything and write the metrics report.
    Eval,
    /// Rerun the full pipeline for several group-size ratios.
    Sweep {
        /// Comma-separated A:B ratios, e.g. 1:9,5:5,9:1.
        #[arg(long, value_delimiter = ',', required = true)]
        ratios: Vec<Ratio>,
        /// Pipelines run concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Write embedding and expert-allocation CSVs.
    Export,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Generate => "generate",
            Command::TrainGcf => "train-gcf",
            Command::TrainReward => "train-reward",
            Command::Adapt => "adapt",
            Command::Eval => "eval",
            Command::Sweep { .. } => "sweep",
            Command::Export => "export",
        }
    }
}

#[derive(Debug, Clone)]
struct Ratio(Vec<f64>);

impl FromStr for Ratio {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parts = s
            .split(':')
            .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad ratio `{s}`: {e}")))
            .collect::<Result<Vec<_>, _>>()?;
        if parts.len() != 2 || parts.iter().any(|x| !(*x > 0.0 && x.is_finite())) {
            return Err(format!("ratio `{s}` must look like A:B with positive parts"));
        }
        Ok(Ratio(parts))
    }
}

fn load_config(cli: &Cli) -> Result<ExperimentConfig> {
    let fallback = cli.out.join(CONFIG_FILE);
    let path = cli.config.clone().or_else(|| fallback.exists().then_some(fallback));
    let mut cfg = match &path {
        Some(p) => json::read_file(p).with_context(|| format!("reading config {}", p.display()))?,
        None => ExperimentConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.master_seed = seed;
    }
    cfg.output_dir = Some(cli.out.clone());
    cfg.validate().context("invalid config")?;
    Ok(cfg)
}

/// Reads an artifact, naming the subcommand that produces it if absent.
fn load<T: DeserializeOwned>(out: &Path, name: &str, producer: &str) -> Result<T> {
    let path = out.join(name);
    if !path.exists() {
        bail!("missing artifact {} (produced by `copl {producer}`)", path.display());
    }
    json::read_file(&path).with_context(|| format!("reading {}", path.display()))
}

fn save<T: serde::Serialize>(out: &Path, name: &str, value: &T, written: &mut Vec<String>) -> Result<()> {
    let path = out.join(name);
    json::write_file(&path, value).with_context(|| format!("writing {}", path.display()))?;
    log::info!("wrote {}", path.display());
    written.push(name.to_string());
    Ok(())
}

fn summarize(report: &MetricsReport) {
    let pct = |x: Option<f64>| x.map_or("-".to_string(), |v| format!("{:.2}", 100.0 * v));
    println!("seen accuracy          {}", pct(Some(report.seen_accuracy)));
    println!("unseen accuracy        {}", pct(report.unseen_accuracy));
    println!("common accuracy        {}", pct(report.common_accuracy));
    println!("controversial accuracy {}", pct(report.controversial_accuracy));
    println!("gnn test accuracy      {}", pct(Some(report.gnn_test_accuracy)));
    if let Some(u) = &report.uniform {
        println!("uniform baseline       {}", pct(Some(u.seen_accuracy)));
    }
    if let Some(g) = &report.group_oracle {
        println!("group oracle           {}", pct(Some(g.seen_accuracy)));
    }
}

fn run_sweep(cfg: &ExperimentConfig, ratios: &[Ratio], jobs: usize) -> Result<Vec<SweepPoint>> {
    let configs = ratios
        .iter()
        .map(|r| sweep_config(cfg, &r.0))
        .collect::<copl_core::Result<Vec<_>>>()?;
    let slots: Mutex<Vec<Option<copl_core::Result<MetricsReport>>>> =
        Mutex::new(std::iter::repeat_with(|| None).take(configs.len()).collect());
    let next = AtomicUsize::new(0);
    let workers = jobs.clamp(1, configs.len().max(1));
    thread::scope(|s| {
        for _ in 0..workers {
            s.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::Relaxed);
                let Some(c) = configs.get(i) else { break };
                log::info!("sweep {}", ratio_label(&ratios[i].0));
                let report = harness::run_experiment(c);
                slots.lock().unwrap()[i] = Some(report);
            });
        }
    });
    slots
        .into_inner()
        .unwrap()
        .into_iter()
        .zip(ratios)
        .map(|(r, ratio)| {
            let report = r.expect("every sweep slot is filled")?;
            Ok(SweepPoint {
                ratios: ratio.0.clone(),
                report,
            })
        })
        .collect()
}

fn execute(cli: &Cli) -> Result<()> {
    let start = Instant::now();
    let cfg = load_config(cli)?;
    let out = cli.out.as_path();
    std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let mut written = Vec::new();

    match &cli.command {
        Command::Generate => {
            let (dataset, unseen) = generate_stage(&cfg)?;
            let mut stored = cfg.clone();
            stored.output_dir = None;
            save(out, CONFIG_FILE, &stored, &mut written)?;
            save(out, artifact::DATASET, &dataset, &mut written)?;
            save(out, artifact::UNSEEN, &unseen, &mut written)?;
        }
        Command::TrainGcf => {
            let dataset: PreferenceDataset = load(out, artifact::DATASET, "generate")?;
            let (model, embeddings) = gcf_stage(&cfg, &dataset)?;
            save(out, artifact::GCF_MODEL, &model, &mut written)?;
            save(out, artifact::EMBEDDINGS, &embeddings, &mut written)?;
        }
        Command::TrainReward => {
            let dataset: PreferenceDataset = load(out, artifact::DATASET, "generate")?;
            let embeddings: EmbeddingTable = load(out, artifact::EMBEDDINGS, "train-gcf")?;
            let model = reward_stage(&cfg, &dataset, &embeddings)?;
            save(out, artifact::REWARD_MODEL, &model, &mut written)?;
        }
        Command::Adapt => {
            let dataset: PreferenceDataset = load(out, artifact::DATASET, "generate")?;
            let unseen: UnseenCohort = load(out, artifact::UNSEEN, "generate")?;
            let embeddings: EmbeddingTable = load(out, artifact::EMBEDDINGS, "train-gcf")?;
            let adapted = adapt_stage(&cfg, &dataset, &unseen, &embeddings)?;
            save(out, artifact::ADAPTED, &adapted, &mut written)?;
        }
        Command::Eval => {
            let dataset: PreferenceDataset = load(out, artifact::DATASET, "generate")?;
            let unseen: UnseenCohort = load(out, artifact::UNSEEN, "generate")?;
            let _: GcfModel = load(out, artifact::GCF_MODEL, "train-gcf")?;
            let embeddings: EmbeddingTable = load(out, artifact::EMBEDDINGS, "train-gcf")?;
            let reward: MoleRewardModel = load(out, artifact::REWARD_MODEL, "train-reward")?;
            let adapted: AdaptedEmbeddings = load(out, artifact::ADAPTED, "adapt")?;
            let report = evaluate(&cfg, &dataset, &unseen, &embeddings, &reward, &adapted)?;
            save(out, artifact::REPORT, &report, &mut written)?;
            summarize(&report);
        }
        Command::Export => {
            let dataset: PreferenceDataset = load(out, artifact::DATASET, "generate")?;
            let unseen: UnseenCohort = load(out, artifact::UNSEEN, "generate")?;
            let embeddings: EmbeddingTable = load(out, artifact::EMBEDDINGS, "train-gcf")?;
            let reward: MoleRewardModel = load(out, artifact::REWARD_MODEL, "train-reward")?;
            let adapted: Option<AdaptedEmbeddings> = if out.join(artifact::ADAPTED).exists() {
                Some(load(out, artifact::ADAPTED, "adapt")?)
            } else {
                None
            };
            write_exports(out, &dataset, &unseen, &embeddings, &reward, adapted.as_ref())?;
            written.extend([
                artifact::EMBEDDINGS_CSV.to_string(),
                artifact::ALLOCATION_CSV.to_string(),
            ]);
        }
        Command::Sweep { ratios, jobs } => {
            let points = run_sweep(&cfg, ratios, *jobs)?;
            for p in &points {
                let label = ratio_label(&p.ratios);
                written.push(format!("{label}/{}", artifact::REPORT));
                let groups: Vec<String> = p
                    .report
                    .groupwise_accuracy
                    .iter()
                    .map(|(g, a)| format!("group {g} {:.2}", 100.0 * a))
                    .collect();
                println!("{label}: {}", groups.join(", "));
            }
            save(out, SWEEP_FILE, &points, &mut written)?;
        }
    }

    let record = RunRecord::new(&cfg, written, start.elapsed().as_secs_f64())?;
    manifest::record(out, cli.command.name(), record)?;
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("COPL_LOG", "info")).init();
    match execute(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
