//! `lpal`: generate data, run and compare active-learning experiments,
//! serve the annotation API, summarize run directories.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use lpal_core::acquisition::StrategyKind;
use lpal_core::datapool::{export_pgm, stratum_histogram, synth_generate, SynthConfig};
use lpal_core::experiment::{
    run_active_learning, run_joint_vs_single, run_strategy_comparison, run_warmstart_vs_random, DataSource,
    ExperimentConfig, LabelMode, RunWriter, Session,
};
use lpal_core::metrics::{parse_curves_csv, CurvePoint};
use lpal_service::AppState;
use serde_json::json;

#[derive(Parser)]
#[command(name = "lpal", version, about = "Loss-prediction active learning for weather and light classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic pool and export it as PGM images plus labels.csv.
    GenData(GenDataArgs),
    /// Run the active-learning loop for every configured seed.
    Run(Common),
    /// Compare strategies, joint vs single-head, or warm start vs random init.
    Compare(CompareArgs),
    /// Serve the annotation API over a queue-mode session.
    Serve(ServeArgs),
    /// Summarize the curves of a run directory as JSON.
    Report(ReportArgs),
}

#[derive(Args)]
struct Common {
    /// Experiment config (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Run only this seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory; defaults to the config's output_dir.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Acquisition strategy, overriding the config.
    #[arg(long)]
    strategy: Option<StrategyKind>,
}

#[derive(Args)]
struct GenDataArgs {
    /// Synth config, or an experiment config with synthetic data (JSON).
    #[arg(long)]
    config: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum Experiment {
    Strategies,
    JointVsSingle,
    Warmstart,
}

#[derive(Args)]
struct CompareArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, value_enum, default_value = "strategies")]
    experiment: Experiment,
    /// Strategies to compare (strategies experiment only).
    #[arg(long = "strategies", value_delimiter = ',', default_value = "predicted_loss,random")]
    strategies: Vec<StrategyKind>,
}

#[derive(Args)]
struct ServeArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long, default_value_t = lpal_service::DEFAULT_PORT)]
    port: u16,
}

#[derive(Args)]
struct ReportArgs {
    /// Run directory containing curves.csv.
    #[arg(long)]
    out: PathBuf,
}

struct Loaded {
    raw: Vec<u8>,
    config: ExperimentConfig,
    out: Option<PathBuf>,
}

fn load(args: &Common) -> Result<Loaded> {
    let raw = fs::read(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut config = ExperimentConfig::from_json(&raw)?;
    if let Some(seed) = args.seed {
        config.seeds = vec![seed];
    }
    if let Some(kind) = args.strategy {
        config.strategy.kind = kind;
    }
    let out = args.out.clone().or_else(|| config.output_dir.clone());
    Ok(Loaded { raw, config, out })
}

impl Loaded {
    fn require_out(&self) -> Result<&Path> {
        match &self.out {
            Some(p) => Ok(p),
            None => bail!("no output directory: pass --out or set output_dir in the config"),
        }
    }

    /// Creates the run directory, recording command-line overrides beside
    /// the verbatim config.
    fn writer(&self, args: &Common) -> Result<RunWriter> {
        let writer = RunWriter::create(self.require_out()?, &self.raw, self.config.save_checkpoints)?;
        if args.seed.is_some() || args.strategy.is_some() {
            writer.write_json("overrides.json", &json!({ "seed": args.seed, "strategy": args.strategy }))?;
        }
        Ok(writer)
    }
}

fn gen_data(args: &GenDataArgs) -> Result<()> {
    let raw = fs::read(&args.config).with_context(|| format!("reading {}", args.config.display()))?;
    let mut synth = match serde_json::from_slice::<SynthConfig>(&raw) {
        Ok(s) => s,
        Err(_) => match ExperimentConfig::from_json(&raw)?.data {
            DataSource::Synth(s) => s,
            DataSource::Pgm { .. } => bail!("gen-data needs a synthetic data source"),
        },
    };
    if let Some(seed) = args.seed {
        synth.seed = seed;
    }
    let pool = synth_generate(&synth)?;
    export_pgm(&pool, &args.out)?;
    fs::write(args.out.join("synth.json"), serde_json::to_vec_pretty(&synth)?)?;
    println!("{}", json!({ "out": args.out, "n": pool.len(), "strata": stratum_histogram(&pool) }));
    Ok(())
}

fn run(args: &Common) -> Result<()> {
    let loaded = load(args)?;
    let writer = loaded.writer(args)?;
    let result = run_active_learning(&loaded.config, Some(&writer))?;
    println!(
        "{}",
        json!({ "out": writer.root(), "strategy": result.strategy, "mean_curve": result.mean_curve() })
    );
    Ok(())
}

fn compare(args: &CompareArgs) -> Result<()> {
    let loaded = load(&args.common)?;
    let writer = loaded.writer(&args.common)?;
    let summary = match args.experiment {
        Experiment::Strategies => {
            let comparison = run_strategy_comparison(&loaded.config, &args.strategies, Some(&writer))?;
            serde_json::to_value(&comparison.summaries)?
        }
        Experiment::JointVsSingle => {
            let report = run_joint_vs_single(&loaded.config, Some(&writer))?;
            json!({ "mean_joint": report.mean_joint, "mean_single": report.mean_single, "joint_wins": report.joint_wins() })
        }
        Experiment::Warmstart => {
            let report = run_warmstart_vs_random(&loaded.config, writer.root())?;
            let (warm, random) = report.mean_final();
            json!({ "faster_count": report.faster_count(), "seeds": report.seeds.len(), "mean_final_warmstart": warm, "mean_final_random": random })
        }
    };
    println!("{summary}");
    Ok(())
}

fn serve(args: &ServeArgs) -> Result<()> {
    let loaded = load(&args.common)?;
    let seed = loaded.config.seeds[0];
    let writer = loaded.out.is_some().then(|| loaded.writer(&args.common)).transpose()?;
    let session = Session::new(loaded.config, seed, LabelMode::Queue)?;
    log::info!("training the bootstrap model");
    let state = AppState::bootstrap(session, writer)?;
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(lpal_service::serve(state, args.port))?;
    Ok(())
}

fn report(args: &ReportArgs) -> Result<()> {
    let path = args.out.join("curves.csv");
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let points = parse_curves_csv(&text)?;
    println!("{}", serde_json::to_string_pretty(&summarize_curves(&points))?);
    Ok(())
}

/// Mean curve and final mean macro F1 per strategy.
fn summarize_curves(points: &[CurvePoint]) -> serde_json::Value {
    use std::collections::BTreeMap;
    let mut by: BTreeMap<&str, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for p in points {
        by.entry(&p.strategy).or_default().entry(p.budget).or_default().push(p.macro_f1);
    }
    let strategies: serde_json::Map<String, serde_json::Value> = by
        .into_iter()
        .map(|(name, curve)| {
            let mean: Vec<(usize, f64)> = curve.iter().map(|(&b, v)| (b, v.iter().sum::<f64>() / v.len() as f64)).collect();
            let seeds = curve.values().map(Vec::len).max().unwrap_or(0);
            let last = mean.last().map(|&(_, f)| f);
            (name.to_string(), json!({ "seeds": seeds, "mean_curve": mean, "final_macro_f1": last }))
        })
        .collect();
    json!({ "strategies": strategies })
}

fn error_kind(e: &anyhow::Error) -> &'static str {
    e.chain()
        .find_map(|c| c.downcast_ref::<lpal_core::Error>())
        .map_or("cli", lpal_core::Error::kind)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let message = e.render().to_string();
            eprintln!("{}", json!({ "error": "usage", "message": message.trim() }));
            return ExitCode::from(2);
        }
    };
    let result = match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Run(a) => run(a),
        Command::Compare(a) => compare(a),
        Command::Serve(a) => serve(a),
        Command::Report(a) => report(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let body = json!({ "error": error_kind(&e), "message": format!("{e:#}") });
            eprintln!("{body}");
            ExitCode::FAILURE
        }
    }
}
