use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use cdgc_core::cdgc::Fusion;
use cdgc_core::data::{load_dataset, save_dataset, SegSample};
use cdgc_core::experiment::{
    dump_class_features, load_checkpoint, run_experiment, run_sweep, ExperimentConfig, ResultRow,
};
use cdgc_core::gradsuite;
use cdgc_core::metrics::miou;
use cdgc_core::model::{evaluate, Variant};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "cdgc", version, about = "Class-wise dynamic graph convolution toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic train and eval splits as CDT1 files.
    Gen {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one configuration, evaluate it, and append to `<out>/results.csv`.
    Train {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint on a dataset directory (default: the checkpoint's own eval split).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Run the 64-bit gradient suite; exits nonzero if any case fails.
    Gradcheck {
        #[arg(long, default_value_t = 3)]
        seeds: u64,
    },
    /// Write class-wise features before and after graph reasoning for one sample.
    DumpFeatures {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long = "class")]
        class_id: usize,
        #[arg(long, default_value_t = 0)]
        index: usize,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train every variant for every seed and report per-variant medians.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
        seeds: Vec<u64>,
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "none,plain-gcn,class-sim,class-ds:0.2,class-ds:0.4,class-ds:0.6,class-ds:0.8,class-ds:1.0"
        )]
        variants: Vec<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Flat key=value configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// none, plain-gcn, class-sim, class-ds or class-ds:<ratio>.
    #[arg(long)]
    variant: Option<String>,
    /// Easy-positive ratio for class-ds.
    #[arg(long)]
    ratio: Option<f64>,
    #[arg(long)]
    fusion: Option<String>,
    #[arg(long)]
    steps: Option<usize>,
}

impl RunArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => ExperimentConfig::load(path)
                .with_context(|| format!("reading config {}", path.display()))?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        if let Some(v) = &self.variant {
            cfg.variant = v.parse()?;
        }
        if let Some(ratio) = self.ratio {
            if !(0.0..=1.0).contains(&ratio) {
                bail!("--ratio {ratio} outside [0, 1]");
            }
            cfg.variant = match (&self.variant, cfg.variant) {
                (Some(_), Variant::ClassDs(_)) | (None, _) => Variant::ClassDs(ratio),
                (Some(v), _) => bail!("--ratio only applies to class-ds, not `{v}`"),
            };
        }
        if let Some(f) = &self.fusion {
            cfg.fusion = f.parse::<Fusion>()?;
        }
        if let Some(steps) = self.steps {
            cfg.steps = steps;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn eval_split(cfg: &ExperimentConfig, data: Option<&Path>) -> Result<Vec<SegSample>> {
    Ok(match data {
        Some(dir) => load_dataset(dir).with_context(|| format!("loading {}", dir.display()))?,
        None => cfg.datasets()?.1,
    })
}

fn format_ious(ious: &[Option<f64>]) -> String {
    ious.iter()
        .map(|v| v.map_or("-".to_string(), |v| format!("{v:.4}")))
        .collect::<Vec<_>>()
        .join(" ")
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Gen { run, out } => {
            let cfg = run.resolve()?;
            let (train, eval) = cfg.datasets()?;
            save_dataset(out.join("train"), &train)?;
            save_dataset(out.join("eval"), &eval)?;
            println!(
                "wrote {} train and {} eval samples to {}",
                train.len(),
                eval.len(),
                out.display()
            );
        }
        Command::Train { run, out } => {
            let cfg = run.resolve()?;
            let artifacts = run_experiment(&cfg, &out)?;
            println!("{}", cdgc_core::experiment::RESULTS_HEADER);
            println!("{}", artifacts.row.csv_row());
            println!("run directory: {}", artifacts.run_dir.display());
        }
        Command::Eval { checkpoint, data } => {
            let (model, cfg) = load_checkpoint(&checkpoint)?;
            let samples = eval_split(&cfg, data.as_deref())?;
            let eval = evaluate(&model, &samples)?;
            let (coarse, coarse_ious) = miou(&eval.coarse)?;
            println!("variant {}", cfg.variant);
            println!("coarse_miou {coarse:.6}");
            println!("coarse_iou {}", format_ious(&coarse_ious));
            if let Some(cm) = &eval.refined {
                let (refined, ious) = miou(cm)?;
                println!("refined_miou {refined:.6}");
                println!("refined_iou {}", format_ious(&ious));
            }
        }
        Command::Gradcheck { seeds } => {
            let results = gradsuite::run_suite(seeds)?;
            let mut ok = true;
            for r in &results {
                let status = if r.passed() { "ok" } else { "FAIL" };
                println!("{status:4} {:28} seed {} max_rel_error {:.3e}", r.name, r.seed, r.max_rel_error);
                ok &= r.passed();
            }
            let failed = results.iter().filter(|r| !r.passed()).count();
            println!(
                "{} checks, {} failed, tolerance {:e}",
                results.len(),
                failed,
                gradsuite::TOLERANCE
            );
            return Ok(ok);
        }
        Command::DumpFeatures {
            checkpoint,
            class_id,
            index,
            data,
            out,
        } => {
            let (model, cfg) = load_checkpoint(&checkpoint)?;
            let samples = eval_split(&cfg, data.as_deref())?;
            let sample = samples
                .get(index)
                .with_context(|| format!("sample {index} outside {} samples", samples.len()))?;
            dump_class_features(&model, sample, class_id, &out)?;
            println!("wrote class{class_id}_before.cdt and class{class_id}_after.cdt to {}", out.display());
        }
        Command::Sweep {
            run,
            seeds,
            variants,
            out,
        } => {
            let base = run.resolve()?;
            let variants = variants
                .iter()
                .map(|v| v.parse::<Variant>())
                .collect::<cdgc_core::Result<Vec<_>>>()?;
            let rows = run_sweep(&base, &variants, &seeds, &out)?;
            println!("variant,median_coarse_miou,median_refined_miou");
            for v in &variants {
                let of = |f: fn(&ResultRow) -> f64| {
                    let mut vals: Vec<f64> = rows.iter().filter(|r| r.variant == *v).map(f).collect();
                    median(&mut vals)
                };
                println!("{v},{:.6},{:.6}", of(|r| r.coarse_miou), of(|r| r.refined_miou));
            }
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
