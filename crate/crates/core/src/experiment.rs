//! Experiment configuration, training runs, result tables, and feature dumps.
//!
//! Config files are flat `key=value` text; `#` starts a comment. Unknown keys are
//! rejected. See [`ExperimentConfig::KEYS`].

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use crate::cdgc::Fusion;
use crate::cdt;
use crate::data::{generate_dataset, DatasetSpec, SegSample, IMAGE_CHANNELS};
use crate::error::{Error, Result};
use crate::graph::{inference_sample, ClassMasks};
use crate::loss::{LossWeights, OhemConfig};
use crate::metrics::miou;
use crate::model::{
    evaluate, train_step, LossConfig, Model, ModelConfig, StepMetrics, Variant,
};
use crate::net::BasicNetConfig;
use crate::optim::OptimState;
use crate::rng::Rng;
use crate::tape::Tape;
use crate::tensor::Tensor;

pub const RESULTS_HEADER: &str = "variant,seed,coarse_miou,refined_miou";
pub const CONFIG_FILE: &str = "config.txt";

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub variant: Variant,
    pub fusion: Fusion,
    pub height: usize,
    pub width: usize,
    pub classes: usize,
    pub channels: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub steps: usize,
    pub lr: f64,
    pub power: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub ohem_threshold: f64,
    /// `0` selects `ceil(valid / 16)`.
    pub ohem_min_kept: usize,
    pub noise: f64,
    pub color_jitter: f64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let w = LossWeights::default();
        Self {
            seed: 0,
            variant: Variant::ClassDs(1.0),
            fusion: Fusion::Concat,
            height: 32,
            width: 32,
            classes: 3,
            channels: 16,
            train_samples: 500,
            eval_samples: 100,
            steps: 2000,
            lr: 0.01,
            power: 0.9,
            momentum: 0.9,
            weight_decay: 0.0005,
            alpha: w.alpha,
            beta: w.beta,
            gamma: w.gamma,
            ohem_threshold: 0.7,
            ohem_min_kept: 0,
            noise: 0.3,
            color_jitter: 0.1,
        }
    }
}

impl ExperimentConfig {
    pub const KEYS: &'static [&'static str] = &[
        "seed",
        "variant",
        "fusion",
        "height",
        "width",
        "classes",
        "channels",
        "train_samples",
        "eval_samples",
        "steps",
        "lr",
        "power",
        "momentum",
        "weight_decay",
        "alpha",
        "beta",
        "gamma",
        "ohem_threshold",
        "ohem_min_kept",
        "noise",
        "color_jitter",
    ];

    /// Parses `key=value` lines on top of the defaults.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or_default().trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {}: expected key=value, got `{line}`", lineno + 1))
            })?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        fn num<V: std::str::FromStr>(key: &str, value: &str) -> Result<V> {
            value
                .parse()
                .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "variant" => self.variant = value.parse()?,
            "fusion" => self.fusion = value.parse()?,
            "height" => self.height = num(key, value)?,
            "width" => self.width = num(key, value)?,
            "classes" => self.classes = num(key, value)?,
            "channels" => self.channels = num(key, value)?,
            "train_samples" => self.train_samples = num(key, value)?,
            "eval_samples" => self.eval_samples = num(key, value)?,
            "steps" => self.steps = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "power" => self.power = num(key, value)?,
            "momentum" => self.momentum = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "alpha" => self.alpha = num(key, value)?,
            "beta" => self.beta = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "ohem_threshold" => self.ohem_threshold = num(key, value)?,
            "ohem_min_kept" => self.ohem_min_kept = num(key, value)?,
            "noise" => self.noise = num(key, value)?,
            "color_jitter" => self.color_jitter = num(key, value)?,
            other => return Err(Error::Config(format!("unknown config key `{other}`"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        self.loss_config().weights.validate()?;
        if self.steps == 0 || self.train_samples == 0 || self.eval_samples == 0 {
            return Err(Error::Config("steps and sample counts must be positive".into()));
        }
        if !(self.ohem_threshold > 0.0 && self.ohem_threshold <= 1.0) {
            return Err(Error::Config("ohem_threshold outside (0, 1]".into()));
        }
        self.model_config().net.validate()
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let v = |s: &mut String, k: &str, val: &dyn std::fmt::Display| {
            writeln!(s, "{k}={val}").expect("string write")
        };
        v(&mut s, "seed", &self.seed);
        v(&mut s, "variant", &self.variant);
        v(&mut s, "fusion", &self.fusion);
        v(&mut s, "height", &self.height);
        v(&mut s, "width", &self.width);
        v(&mut s, "classes", &self.classes);
        v(&mut s, "channels", &self.channels);
        v(&mut s, "train_samples", &self.train_samples);
        v(&mut s, "eval_samples", &self.eval_samples);
        v(&mut s, "steps", &self.steps);
        v(&mut s, "lr", &self.lr);
        v(&mut s, "power", &self.power);
        v(&mut s, "momentum", &self.momentum);
        v(&mut s, "weight_decay", &self.weight_decay);
        v(&mut s, "alpha", &self.alpha);
        v(&mut s, "beta", &self.beta);
        v(&mut s, "gamma", &self.gamma);
        v(&mut s, "ohem_threshold", &self.ohem_threshold);
        v(&mut s, "ohem_min_kept", &self.ohem_min_kept);
        v(&mut s, "noise", &self.noise);
        v(&mut s, "color_jitter", &self.color_jitter);
        s
    }

    pub fn dataset_spec(&self) -> DatasetSpec {
        DatasetSpec {
            height: self.height,
            width: self.width,
            num_classes: self.classes,
            noise: self.noise,
            color_jitter: self.color_jitter,
        }
    }

    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            net: BasicNetConfig::toy(IMAGE_CHANNELS, self.channels, self.classes),
            fusion: self.fusion,
            variant: self.variant,
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            weights: LossWeights {
                alpha: self.alpha,
                beta: self.beta,
                gamma: self.gamma,
            },
            ohem: OhemConfig {
                threshold: self.ohem_threshold,
                min_kept: (self.ohem_min_kept > 0).then_some(self.ohem_min_kept),
            },
        }
    }

    /// Independent streams derived from the run seed.
    fn streams(&self) -> Streams {
        let root = Rng::seed(self.seed);
        Streams {
            train_data: root.fork(0).next_u64(),
            eval_data: root.fork(1).next_u64(),
            init: root.fork(2),
            training: root.fork(3),
        }
    }

    /// `(train, eval)` splits; identical for every variant sharing a seed.
    pub fn datasets(&self) -> Result<(Vec<SegSample>, Vec<SegSample>)> {
        let s = self.streams();
        let spec = self.dataset_spec();
        Ok((
            generate_dataset(self.train_samples, &spec, s.train_data)?,
            generate_dataset(self.eval_samples, &spec, s.eval_data)?,
        ))
    }

    pub fn init_model(&self) -> Result<Model<f32>> {
        Model::new(self.model_config(), &mut self.streams().init)
    }
}

struct Streams {
    train_data: u64,
    eval_data: u64,
    init: Rng,
    training: Rng,
}

/// Trains `model` for `cfg.steps` steps, visiting samples in reshuffled epochs.
pub fn train(
    model: &mut Model<f32>,
    cfg: &ExperimentConfig,
    train_set: &[SegSample],
    mut on_step: impl FnMut(&StepMetrics),
) -> Result<Vec<StepMetrics>> {
    if train_set.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut rng = cfg.streams().training;
    let mut order_rng = rng.split();
    let mut optim = OptimState::new(cfg.lr, cfg.steps)
        .with_power(cfg.power)
        .with_momentum(cfg.momentum)
        .with_weight_decay(cfg.weight_decay);
    let loss_cfg = cfg.loss_config();
    let mut order: Vec<usize> = Vec::new();
    let mut history = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let pos = step % train_set.len();
        if pos == 0 {
            order = order_rng.sample_indices(train_set.len(), train_set.len());
        }
        let metrics = train_step(model, &mut optim, &train_set[order[pos]], &loss_cfg, &mut rng)?;
        on_step(&metrics);
        history.push(metrics);
    }
    Ok(history)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ResultRow {
    pub variant: Variant,
    pub seed: u64,
    pub coarse_miou: f64,
    /// Equal to `coarse_miou` for the `none` variant.
    pub refined_miou: f64,
}

impl ResultRow {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{}",
            self.variant, self.seed, self.coarse_miou, self.refined_miou
        )
    }

    pub fn parse(line: &str) -> Result<Self> {
        let fields: Vec<&str> = line.trim().split(',').collect();
        let bad = || Error::Data(format!("malformed results row `{line}`"));
        if fields.len() != 4 {
            return Err(bad());
        }
        Ok(Self {
            variant: fields[0].parse()?,
            seed: fields[1].parse().map_err(|_| bad())?,
            coarse_miou: fields[2].parse().map_err(|_| bad())?,
            refined_miou: fields[3].parse().map_err(|_| bad())?,
        })
    }
}

pub fn read_results(path: impl AsRef<Path>) -> Result<Vec<ResultRow>> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    if lines.next() != Some(RESULTS_HEADER) {
        return Err(Error::Data("results table has no header".into()));
    }
    lines.filter(|l| !l.trim().is_empty()).map(ResultRow::parse).collect()
}

fn append_result(path: &Path, row: &ResultRow) -> Result<()> {
    let fresh = !path.exists();
    let mut f = fs::OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{RESULTS_HEADER}")?;
    }
    writeln!(f, "{}", row.csv_row())?;
    Ok(())
}

/// Files written by one run.
#[derive(Clone, Debug)]
pub struct RunArtifacts {
    pub run_dir: PathBuf,
    pub metrics_csv: PathBuf,
    pub checkpoint: PathBuf,
    pub row: ResultRow,
}

pub fn run_dir(out: &Path, cfg: &ExperimentConfig) -> PathBuf {
    out.join(format!("{}_seed{}", cfg.variant.slug(), cfg.seed))
}

/// Trains one configuration, evaluates on the held-out split with inference node
/// selection, and writes `metrics.csv`, `checkpoint/`, and a row of
/// `<out>/results.csv`.
pub fn run_experiment(cfg: &ExperimentConfig, out: impl AsRef<Path>) -> Result<RunArtifacts> {
    cfg.validate()?;
    let out = out.as_ref();
    let dir = run_dir(out, cfg);
    fs::create_dir_all(&dir)?;
    let (train_set, eval_set) = cfg.datasets()?;
    let mut model = cfg.init_model()?;

    let metrics_csv = dir.join("metrics.csv");
    let mut metrics = String::from(StepMetrics::CSV_HEADER);
    metrics.push('\n');
    train(&mut model, cfg, &train_set, |m| {
        metrics.push_str(&m.csv_row());
        metrics.push('\n');
    })?;
    fs::write(&metrics_csv, metrics)?;

    let checkpoint = dir.join("checkpoint");
    save_checkpoint(&model, cfg, &checkpoint)?;

    let eval = evaluate(&model, &eval_set)?;
    let coarse_miou = miou(&eval.coarse)?.0;
    let refined_miou = match &eval.refined {
        Some(cm) => miou(cm)?.0,
        None => coarse_miou,
    };
    let row = ResultRow {
        variant: cfg.variant,
        seed: cfg.seed,
        coarse_miou,
        refined_miou,
    };
    append_result(&out.join("results.csv"), &row)?;
    Ok(RunArtifacts {
        run_dir: dir,
        metrics_csv,
        checkpoint,
        row,
    })
}

/// Runs every `(variant, seed)` pair in order.
pub fn run_sweep(
    base: &ExperimentConfig,
    variants: &[Variant],
    seeds: &[u64],
    out: impl AsRef<Path>,
) -> Result<Vec<ResultRow>> {
    let mut rows = Vec::new();
    for &seed in seeds {
        for &variant in variants {
            let cfg = ExperimentConfig {
                seed,
                variant,
                ..base.clone()
            };
            rows.push(run_experiment(&cfg, out.as_ref())?.row);
        }
    }
    Ok(rows)
}

pub fn save_checkpoint(model: &Model<f32>, cfg: &ExperimentConfig, dir: &Path) -> Result<()> {
    model.params.save(dir)?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_text())?;
    Ok(())
}

/// Rebuilds a model from a checkpoint directory written by [`save_checkpoint`].
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(Model<f32>, ExperimentConfig)> {
    let dir = dir.as_ref();
    let cfg = ExperimentConfig::load(dir.join(CONFIG_FILE))?;
    let mut model = cfg.init_model()?;
    model.params.load_into(dir)?;
    Ok((model, cfg))
}

/// Class-`m` node features before graph reasoning (the input feature restricted to
/// `S_m`) and after it (slice `m` of the per-class stack), each `[C, H, W]`, using
/// inference node selection. Written as `class{m}_before.cdt` / `class{m}_after.cdt`.
pub fn dump_class_features(
    model: &Model<f32>,
    sample: &SegSample,
    class_id: usize,
    out: impl AsRef<Path>,
) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let refine = match (&model.refine, model.config().variant) {
        (Some(r), Variant::ClassSim | Variant::ClassDs(_)) => r,
        _ => {
            return Err(Error::Config(
                "feature dumps need a class-wise variant (class-sim or class-ds)".into(),
            ))
        }
    };
    if class_id >= refine.groups() {
        return Err(Error::Config(format!(
            "class {class_id} outside {} classes",
            refine.groups()
        )));
    }
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let image = tape.constant(sample.image.clone());
    let (feature, _) = model.net.forward_trunk(&mut tape, &bound, image)?;
    let coarse = model.net.coarse_head(&mut tape, &bound, feature)?;
    let sets = inference_sample(&ClassMasks::from_logits(tape.value(coarse))?);
    let reasoning = refine.class_wise_reason(&mut tape, &bound, feature, &sets)?;

    let x = tape.value(feature);
    let [c, h, w] = x.dims3("dump")?;
    let n = h * w;
    let mut before = Tensor::zeros([c, h, w]);
    for &node in sets.class(class_id) {
        for ch in 0..c {
            before.data_mut()[ch * n + node] = x.data()[ch * n + node];
        }
    }
    let stack = tape.value(reasoning.per_class).data();
    let after = Tensor::new([c, h, w], stack[class_id * c * n..(class_id + 1) * c * n].to_vec())?;

    let out = out.as_ref();
    fs::create_dir_all(out)?;
    cdt::write(out.join(format!("class{class_id}_before.cdt")), &before)?;
    cdt::write(out.join(format!("class{class_id}_after.cdt")), &after)?;
    Ok((before, after))
}
