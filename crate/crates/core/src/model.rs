//! The coarse-to-fine pipeline: basic network, node selection, graph refinement,
//! losses, and the training step.

use std::fmt;
use std::str::FromStr;

use crate::cdgc::{Cdgc, CdgcConfig, Fusion, RefinedFeature};
use crate::data::{LabelMap, SegSample, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::graph::{dynamic_sample, inference_sample, ClassMasks, SampledSet};
use crate::loss::{cross_entropy, ohem_select, total_loss, LossWeights, OhemConfig};
use crate::metrics::ConfusionMatrix;
use crate::net::{BasicNet, BasicNetConfig};
use crate::optim::{sgd_step, OptimState};
use crate::params::{Bound, Params};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, Var};

/// Which refinement, if any, follows the coarse prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Variant {
    /// Coarse prediction only.
    None,
    /// One similarity graph over all nodes, no class masks.
    PlainGcn,
    /// Class-wise similarity graphs over the coarse-predicted nodes of each class.
    ClassSim,
    /// Class-wise graphs over dynamically sampled nodes during training, with the
    /// given easy-positive ratio; coarse-predicted nodes at inference.
    ClassDs(f64),
}

impl Variant {
    pub fn has_refinement(&self) -> bool {
        !matches!(self, Variant::None)
    }

    /// Name safe for use in file paths.
    pub fn slug(&self) -> String {
        self.to_string().replace(':', "-")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::None => f.write_str("none"),
            Variant::PlainGcn => f.write_str("plain-gcn"),
            Variant::ClassSim => f.write_str("class-sim"),
            Variant::ClassDs(r) => write!(f, "class-ds:{r:?}"),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Variant::None),
            "plain-gcn" => Ok(Variant::PlainGcn),
            "class-sim" => Ok(Variant::ClassSim),
            "class-ds" => Ok(Variant::ClassDs(1.0)),
            other => {
                let ratio = other
                    .strip_prefix("class-ds:")
                    .ok_or_else(|| Error::Config(format!("unknown variant `{other}`")))?;
                let ratio: f64 = ratio
                    .parse()
                    .map_err(|_| Error::Config(format!("bad sampling ratio in `{other}`")))?;
                if !(0.0..=1.0).contains(&ratio) {
                    return Err(Error::Config(format!("sampling ratio {ratio} outside [0, 1]")));
                }
                Ok(Variant::ClassDs(ratio))
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub net: BasicNetConfig,
    pub fusion: Fusion,
    pub variant: Variant,
}

/// How the refinement's node sets are chosen for one forward pass.
pub enum NodeSelection<'a> {
    /// Coarse-predicted nodes per class; no ground truth.
    Inference,
    /// Training: dynamic sampling against `labels` where the variant uses it.
    Train { labels: &'a LabelMap, rng: &'a mut Rng },
    /// Use exactly these sets.
    Fixed(&'a SampledSet),
}

#[derive(Clone, Debug)]
pub struct Outputs {
    pub feature: Var,
    pub aux_feature: Var,
    pub coarse: Var,
    pub aux: Var,
    pub refined: Option<Var>,
    pub refinement: Option<RefinedFeature>,
    pub sampled: Option<SampledSet>,
}

#[derive(Clone, Debug, Default)]
pub struct LossConfig {
    pub weights: LossWeights,
    pub ohem: OhemConfig,
}

#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub coarse: Var,
    pub refined: Option<Var>,
    pub aux: Var,
    pub total: Var,
}

/// One line of the training metrics stream.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepMetrics {
    pub iter: usize,
    pub lr: f64,
    pub l_c: f64,
    pub l_f: f64,
    pub l_a: f64,
    pub l_total: f64,
}

impl StepMetrics {
    pub const CSV_HEADER: &'static str = "iter,lr,l_c,l_f,l_a,l_total";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{}",
            self.iter, self.lr, self.l_c, self.l_f, self.l_a, self.l_total
        )
    }
}

#[derive(Clone, Debug)]
pub struct Model<T: Real = f32> {
    cfg: ModelConfig,
    pub params: Params<T>,
    pub net: BasicNet,
    pub refine: Option<Cdgc>,
}

impl<T: Real> Model<T> {
    pub fn new(cfg: ModelConfig, rng: &mut Rng) -> Result<Self> {
        let mut params = Params::new();
        let net = BasicNet::new(cfg.net.clone(), &mut params, rng)?;
        let c = cfg.net.feature_channels;
        let refine = match cfg.variant {
            Variant::None => None,
            Variant::PlainGcn => Some(Cdgc::plain(c, cfg.fusion, &mut params, rng, "cdgc")?),
            Variant::ClassSim | Variant::ClassDs(_) => {
                let gcfg = CdgcConfig {
                    num_classes: cfg.net.num_classes,
                    channels: c,
                    fusion: cfg.fusion,
                };
                Some(Cdgc::class_wise(&gcfg, &mut params, rng, "cdgc")?)
            }
        };
        Ok(Self {
            cfg,
            params,
            net,
            refine,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    /// Same structure with parameters converted to another precision.
    pub fn cast<U: Real>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            net: self.net.clone(),
            refine: self.refine.clone(),
        }
    }

    /// Node sets for the refinement given the coarse logits; `None` without refinement.
    pub fn select_nodes(
        &self,
        coarse_logits: &crate::tensor::Tensor<T>,
        selection: NodeSelection<'_>,
    ) -> Result<Option<SampledSet>> {
        let [_, h, w] = coarse_logits.dims3("select_nodes")?;
        let sets = match (self.cfg.variant, selection) {
            (Variant::None, _) => return Ok(None),
            (_, NodeSelection::Fixed(s)) => s.clone(),
            (Variant::PlainGcn, _) => SampledSet::all_nodes(h * w),
            (Variant::ClassSim, _) | (Variant::ClassDs(_), NodeSelection::Inference) => {
                inference_sample(&ClassMasks::from_logits(coarse_logits)?)
            }
            (Variant::ClassDs(ratio), NodeSelection::Train { labels, rng }) => {
                let coarse = ClassMasks::from_logits(coarse_logits)?;
                let gt = ClassMasks::from_labels(labels, self.cfg.net.num_classes)?;
                dynamic_sample(&coarse, &gt, ratio, rng)?
            }
        };
        Ok(Some(sets))
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        image: Var,
        selection: NodeSelection<'_>,
    ) -> Result<Outputs> {
        let (feature, aux_feature) = self.net.forward_trunk(tape, bound, image)?;
        let coarse = self.net.coarse_head(tape, bound, feature)?;
        let aux = self.net.aux_head(tape, bound, aux_feature)?;
        let sampled = self.select_nodes(tape.value(coarse), selection)?;
        let (refined, refinement) = match (&self.refine, &sampled) {
            (Some(module), Some(sets)) => {
                let r = module.forward(tape, bound, feature, sets)?;
                let logits = self.net.refined_head(tape, bound, r.fused)?;
                (Some(logits), Some(r))
            }
            _ => (None, None),
        };
        Ok(Outputs {
            feature,
            aux_feature,
            coarse,
            aux,
            refined,
            refinement,
            sampled,
        })
    }

    /// Coarse cross entropy, refined OHEM (unless `ohem_kept` pins the kept pixels),
    /// auxiliary cross entropy, and their weighted total.
    pub fn losses(
        &self,
        tape: &mut Tape<T>,
        out: &Outputs,
        labels: &LabelMap,
        cfg: &LossConfig,
        ohem_kept: Option<&[(usize, usize)]>,
    ) -> Result<LossParts> {
        let coarse = cross_entropy(tape, out.coarse, labels, IGNORE_LABEL)?;
        let aux = cross_entropy(tape, out.aux, labels, IGNORE_LABEL)?;
        let refined = match out.refined {
            Some(logits) => {
                let kept = match ohem_kept {
                    Some(k) => k.to_vec(),
                    None => ohem_select(tape.value(logits), labels, &cfg.ohem)?,
                };
                Some(tape.pixel_cross_entropy(logits, &kept)?)
            }
            None => None,
        };
        let total = total_loss(tape, coarse, refined, aux, &cfg.weights)?;
        Ok(LossParts {
            coarse,
            refined,
            aux,
            total,
        })
    }

    /// Per-pixel class predictions `(coarse, refined)` using inference node selection.
    pub fn predict(&self, image: &crate::tensor::Tensor<T>) -> Result<(Vec<usize>, Option<Vec<usize>>)> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let x = tape.constant(image.clone());
        let out = self.forward(&mut tape, &bound, x, NodeSelection::Inference)?;
        let coarse = ClassMasks::from_logits(tape.value(out.coarse))?.to_class_map();
        let refined = match out.refined {
            Some(r) => Some(ClassMasks::from_logits(tape.value(r))?.to_class_map()),
            None => None,
        };
        Ok((coarse, refined))
    }
}

/// Forward, backward, and one SGD update on a single sample.
pub fn train_step<T: Real>(
    model: &mut Model<T>,
    optim: &mut OptimState<T>,
    sample: &SegSample,
    cfg: &LossConfig,
    rng: &mut Rng,
) -> Result<StepMetrics> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let image = tape.constant(sample.image.cast::<T>());
    let out = model.forward(
        &mut tape,
        &bound,
        image,
        NodeSelection::Train {
            labels: &sample.labels,
            rng,
        },
    )?;
    let parts = model.losses(&mut tape, &out, &sample.labels, cfg, None)?;
    let grads = tape.backward(parts.total)?;
    model.params.store_grads(&bound, &grads);
    let iter = optim.iter;
    let lr = sgd_step(&mut model.params, optim)?;
    let value = |v: Var| tape.value(v).item().as_f64();
    Ok(StepMetrics {
        iter,
        lr,
        l_c: value(parts.coarse),
        l_f: parts.refined.map_or(0.0, value),
        l_a: value(parts.aux),
        l_total: value(parts.total),
    })
}

/// Accumulated confusion matrices over an evaluation set.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub coarse: ConfusionMatrix,
    pub refined: Option<ConfusionMatrix>,
}

pub fn evaluate<T: Real>(model: &Model<T>, samples: &[SegSample]) -> Result<Evaluation> {
    let m = model.config().net.num_classes;
    let mut coarse = ConfusionMatrix::new(m);
    let mut refined = model.refine.as_ref().map(|_| ConfusionMatrix::new(m));
    for s in samples {
        let image = s.image.cast::<T>();
        let (c, r) = model.predict(&image)?;
        coarse.accumulate(&c, &s.labels)?;
        if let (Some(cm), Some(r)) = (refined.as_mut(), r) {
            cm.accumulate(&r, &s.labels)?;
        }
    }
    Ok(Evaluation { coarse, refined })
}
