//! Segmentation losses and their weighted combination.

use crate::data::{LabelMap, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::tape::{softmax_in_place, Tape, Var};
use crate::tensor::Tensor;

/// Weights of the coarse, refined, and auxiliary losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 0.6,
            beta: 0.7,
            gamma: 0.4,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        if [self.alpha, self.beta, self.gamma].iter().all(|w| *w >= 0.0) {
            Ok(())
        } else {
            Err(Error::Config(format!("loss weights must be non-negative: {self:?}")))
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OhemConfig {
    /// Pixels whose true-class probability is below this are kept.
    pub threshold: f64,
    /// Lower bound on kept pixels; `None` means `ceil(valid / 16)`.
    pub min_kept: Option<usize>,
}

impl Default for OhemConfig {
    fn default() -> Self {
        Self {
            threshold: 0.7,
            min_kept: None,
        }
    }
}

fn check_logits<T: Real>(logits: &Tensor<T>, labels: &LabelMap) -> Result<usize> {
    let [m, h, w] = logits.dims3("segmentation loss")?;
    if h != labels.height() || w != labels.width() {
        return Err(Error::Shape {
            op: "segmentation loss",
            lhs: vec![m, h, w],
            rhs: vec![labels.height(), labels.width()],
        });
    }
    labels.validate(m)?;
    Ok(m)
}

fn targets(labels: &LabelMap, ignore_index: u8) -> Vec<(usize, usize)> {
    labels
        .data()
        .iter()
        .enumerate()
        .filter(|(_, &l)| l != ignore_index && l != IGNORE_LABEL)
        .map(|(p, &l)| (p, l as usize))
        .collect()
}

/// Mean per-pixel cross entropy over pixels not labelled `ignore_index`.
pub fn cross_entropy<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &LabelMap,
    ignore_index: u8,
) -> Result<Var> {
    check_logits(tape.value(logits), labels)?;
    let targets = targets(labels, ignore_index);
    if targets.is_empty() {
        return Err(Error::Data("every pixel is ignored; cross entropy is undefined".into()));
    }
    tape.pixel_cross_entropy(logits, &targets)
}

/// Probability of the labelled class at each target pixel.
fn true_class_probs<T: Real>(logits: &Tensor<T>, targets: &[(usize, usize)]) -> Vec<f64> {
    let m = logits.shape()[0];
    let n = logits.len() / m;
    let mut column = vec![T::zero(); m];
    targets
        .iter()
        .map(|&(p, c)| {
            for (k, slot) in column.iter_mut().enumerate() {
                *slot = logits.data()[k * n + p];
            }
            softmax_in_place(&mut column);
            column[c].as_f64()
        })
        .collect()
}

/// Pixels kept by online hard example mining, in pixel order.
///
/// Keeps pixels whose true-class probability is below `threshold`; if fewer than
/// `min_kept` qualify, keeps the `min_kept` lowest-probability pixels instead.
pub fn ohem_select<T: Real>(
    logits: &Tensor<T>,
    labels: &LabelMap,
    cfg: &OhemConfig,
) -> Result<Vec<(usize, usize)>> {
    check_logits(logits, labels)?;
    if !(cfg.threshold > 0.0 && cfg.threshold <= 1.0) {
        return Err(Error::Config(format!("OHEM threshold {} outside (0, 1]", cfg.threshold)));
    }
    let valid = targets(labels, IGNORE_LABEL);
    if valid.is_empty() {
        return Err(Error::Data("no valid pixels for OHEM".into()));
    }
    let min_kept = cfg.min_kept.unwrap_or_else(|| valid.len().div_ceil(16));
    if min_kept == 0 || min_kept > valid.len() {
        return Err(Error::Config(format!(
            "OHEM min_kept {min_kept} outside [1, {}]",
            valid.len()
        )));
    }
    let probs = true_class_probs(logits, &valid);
    let mut kept: Vec<usize> = (0..valid.len())
        .filter(|&i| probs[i] < cfg.threshold)
        .collect();
    if kept.len() < min_kept {
        let mut order: Vec<usize> = (0..valid.len()).collect();
        order.sort_by(|&a, &b| probs[a].total_cmp(&probs[b]).then(a.cmp(&b)));
        kept = order[..min_kept].to_vec();
        kept.sort_unstable();
    }
    Ok(kept.into_iter().map(|i| valid[i]).collect())
}

/// Cross entropy averaged over the pixels chosen by [`ohem_select`].
pub fn ohem_loss<T: Real>(
    tape: &mut Tape<T>,
    logits: Var,
    labels: &LabelMap,
    cfg: &OhemConfig,
) -> Result<Var> {
    let kept = ohem_select(tape.value(logits), labels, cfg)?;
    tape.pixel_cross_entropy(logits, &kept)
}

/// `alpha·l_c + beta·l_f + gamma·l_a`; a missing refined loss contributes nothing.
pub fn total_loss<T: Real>(
    tape: &mut Tape<T>,
    coarse: Var,
    refined: Option<Var>,
    aux: Var,
    w: &LossWeights,
) -> Result<Var> {
    let mut total = tape.scale(coarse, T::of(w.alpha));
    if let Some(refined) = refined {
        let r = tape.scale(refined, T::of(w.beta));
        total = tape.add(total, r)?;
    }
    let a = tape.scale(aux, T::of(w.gamma));
    tape.add(total, a)
}
