use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use magtrack::config::RunConfig;
use magtrack::ingest::{load_sequence, Split};
use magtrack::pipeline::{self, Method};
use magtrack::{Error, Result};

#[derive(Parser)]
#[command(name = "magtrack", version, about = "Inertial tracking toolkit")]
struct Cli {
    /// Run configuration (`section.key = value` lines).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides `train.seed` and seeds dataset synthesis.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    out: PathBuf,
    /// Worker threads for per-sequence work.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Config override, `section.key=value`; repeatable. `--section.key value`
    /// is accepted as a shorthand.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset and its split manifest.
    Synth {
        /// Number of sequences (overrides `synth.count`).
        #[arg(long)]
        n: Option<usize>,
    },
    /// Write per-sample feature tables.
    Preprocess {
        /// Sequence files; defaults to every sequence in the manifest.
        inputs: Vec<PathBuf>,
    },
    /// Train TF-BRT on the manifest's train split.
    Train {
        #[arg(long)]
        resume: bool,
    },
    /// Score a method on one split and print the metrics JSON.
    Eval {
        #[arg(long, default_value = "tfbrt")]
        method: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value = "test_seen")]
        split: String,
    },
    /// Write a `t,x,y,vx,vy[,gx,gy]` trace for one sequence.
    Track {
        sequence: PathBuf,
        #[arg(long, default_value = "tfbrt")]
        method: String,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Write time-averaged hidden features with heading bins.
    ExportFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test_seen")]
        split: String,
    },
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let base = match &cli.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let mut pairs = Vec::new();
    for o in &cli.overrides {
        let (k, v) = o
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {o:?} is not KEY=VALUE")))?;
        pairs.push((k, v));
    }
    let seed = cli.seed.map(|s| s.to_string());
    if let Some(s) = &seed {
        pairs.push(("train.seed", s));
    }
    let cfg = base.with_overrides(pairs)?;
    cfg.validate()?;
    Ok(cfg)
}

fn checkpoint_for(method: Method, path: &Option<PathBuf>, out: &Path) -> Result<Option<magtrack::tfbrt::ModelParams>> {
    match method {
        Method::Tfbrt => {
            let p = path.clone().unwrap_or_else(|| out.join(pipeline::BEST_CHECKPOINT));
            Ok(Some(pipeline::load_model(p)?))
        }
        _ => Ok(None),
    }
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> Result<String> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, &text).map_err(|e| Error::io(path, e))?;
    Ok(text)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = load_config(cli)?;
    if let Some(n) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::invalid(e.to_string()))?;
    }
    let out = &cli.out;
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    match &cli.command {
        Command::Synth { n } => {
            let mut set = cfg.synth.clone();
            if let Some(n) = n {
                set.count = *n;
            }
            let m = pipeline::synth_dataset(&set, cli.seed.unwrap_or(0), out)?;
            let [a, b, c, d] = m.sizes();
            println!("wrote {} sequences to {} (splits {a}/{b}/{c}/{d})", set.count, out.display());
        }
        Command::Preprocess { inputs } => {
            let paths = if inputs.is_empty() {
                let m = pipeline::manifest_from_config(&cfg)?;
                Split::ALL.iter().flat_map(|s| m.get(*s).to_vec()).collect()
            } else {
                inputs.clone()
            };
            for p in &paths {
                let rec = load_sequence(p)?;
                let f = pipeline::features(&rec, &cfg)?;
                let dest = out.join(format!("{}_features.csv", rec.id));
                pipeline::write_features(&f, &dest)?;
                println!("{}", dest.display());
            }
        }
        Command::Train { resume } => {
            let r = pipeline::train_run(&cfg, out, *resume)?;
            if let Some(last) = r.epochs.last() {
                println!("epoch {} train {:.5} val {:?}", last.epoch, last.total, last.val_total);
            }
            println!("best {}\nlast {}", r.best.display(), r.last.display());
        }
        Command::Eval { method, checkpoint, split } => {
            let method: Method = method.parse()?;
            let split: Split = split.parse()?;
            let model = checkpoint_for(method, checkpoint, out)?;
            let records = pipeline::load_split(&pipeline::manifest_from_config(&cfg)?, split)?;
            let report = pipeline::evaluate_records(method, model.as_ref(), &records, &cfg)?;
            let text = write_json(&out.join(format!("eval_{method}_{split}.json")), &report)?;
            println!("{text}");
        }
        Command::Track { sequence, method, checkpoint } => {
            let method: Method = method.parse()?;
            let model = checkpoint_for(method, checkpoint, out)?;
            let rec = load_sequence(sequence)?;
            let tr = pipeline::track(method, model.as_ref(), &rec, &cfg)?;
            let dest = out.join(format!("{}_{method}.csv", rec.id));
            tr.write_csv(&dest)?;
            println!("{} rows -> {}", tr.pos.len(), dest.display());
        }
        Command::ExportFeatures { checkpoint, split } => {
            let split: Split = split.parse()?;
            let model = pipeline::load_model(checkpoint)?;
            let records = pipeline::load_split(&pipeline::manifest_from_config(&cfg)?, split)?;
            let dest = out.join(format!("hidden_{split}.csv"));
            let rows = pipeline::export_features(&model, &records, &cfg, &dest)?;
            println!("{rows} rows -> {}", dest.display());
        }
    }
    Ok(())
}

/// Rewrites `--section.key value` into `--set section.key=value`.
fn expand_dotted(args: impl Iterator<Item = String>) -> Vec<String> {
    let mut out = Vec::new();
    let mut args = args.peekable();
    while let Some(a) = args.next() {
        match a.strip_prefix("--").filter(|k| k.contains('.') && !k.contains('=')) {
            Some(key) if args.peek().is_some() => {
                let v = args.next().unwrap_or_default();
                out.push("--set".into());
                out.push(format!("{key}={v}"));
            }
            _ => out.push(a),
        }
    }
    out
}

fn main() -> ExitCode {
    let cli = Cli::parse_from(expand_dotted(std::env::args()));
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
