//! The 64-bit gradient verification suite: every differentiable operation plus the
//! refinement module and the full pipeline loss, each over several seeds.

use crate::cdgc::{graph_convolve, Cdgc, CdgcConfig, Fusion};
use crate::data::LabelMap;
use crate::error::Result;
use crate::gradcheck::grad_check;
use crate::graph::{row_softmax, similarity_scores, SampledSet};
use crate::loss::{cross_entropy, ohem_select, OhemConfig};
use crate::model::{LossConfig, Model, ModelConfig, NodeSelection, Variant};
use crate::net::{BasicNetConfig, ConvSpec};
use crate::params::{Bound, Params};
use crate::rng::Rng;
use crate::tape::{ConvGeometry, Tape, Var};
use crate::tensor::Tensor;

/// Largest accepted relative error.
pub const TOLERANCE: f64 = 1e-4;
/// Central-difference step.
pub const EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct GradCheckOutcome {
    pub name: &'static str,
    pub seed: u64,
    pub max_rel_error: f64,
}

impl GradCheckOutcome {
    pub fn passed(&self) -> bool {
        self.max_rel_error <= TOLERANCE
    }
}

type Case = fn(u64) -> Result<f64>;

pub const CASES: &[(&str, Case)] = &[
    ("add_sub_mul", elementwise),
    ("scale_add_scalar", scalar_ops),
    ("matmul", matmul),
    ("relu", relu),
    ("exp_log", exp_log),
    ("reshape_transpose", reshape_transpose),
    ("concat", concat),
    ("sum_mean", reductions),
    ("conv2d", conv2d),
    ("channel_bias", channel_bias),
    ("gather_scatter_rows", gather_scatter),
    ("softmax_rows", softmax_rows),
    ("cross_entropy", cross_entropy_case),
    ("ohem", ohem_case),
    ("similarity_graph_convolve", similarity_graph),
    ("cdgc_concat", |s| cdgc_case(s, Fusion::Concat)),
    ("cdgc_sum", |s| cdgc_case(s, Fusion::Sum)),
    ("pipeline_class_ds", |s| pipeline_case(s, Variant::ClassDs(0.5))),
    ("pipeline_class_sim", |s| pipeline_case(s, Variant::ClassSim)),
    ("pipeline_plain_gcn", |s| pipeline_case(s, Variant::PlainGcn)),
    ("pipeline_none", |s| pipeline_case(s, Variant::None)),
];

/// Runs every case for seeds `0..seeds_per_case`.
pub fn run_suite(seeds_per_case: u64) -> Result<Vec<GradCheckOutcome>> {
    let mut out = Vec::new();
    for &(name, case) in CASES {
        for seed in 0..seeds_per_case {
            out.push(GradCheckOutcome {
                name,
                seed,
                max_rel_error: case(seed)?,
            });
        }
    }
    Ok(out)
}

fn normal(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| rng.normal())
}

/// Values bounded away from zero, for kinked or singular operations.
fn away_from_zero(rng: &mut Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape.to_vec(), |_| {
        let v = rng.normal();
        v.signum() * (0.1 + v.abs())
    })
}

fn dims(rng: &mut Rng, rank: usize) -> Vec<usize> {
    (0..rank).map(|_| 1 + rng.below(4)).collect()
}

/// Random linear functional of `y`, so every output coordinate carries weight.
fn project(tape: &mut Tape<f64>, y: Var, seed: u64) -> Result<Var> {
    let mut rng = Rng::seed(seed ^ 0x9e37_79b9);
    let w = normal(&mut rng, tape.shape(y));
    let w = tape.constant(w);
    let p = tape.mul(y, w)?;
    Ok(tape.sum(p))
}

fn elementwise(seed: u64) -> Result<f64> {
    let mut rng = Rng::seed(seed);
    let shape = dims(&mut rng, 3);
    let inputs = [normal(&mut rng, &shape), normal(&mut rng, &shape), normal(&mut rng, &shape)];
    grad_check(
        |t, v| {
            let s = t.add(v[0], v[1])?;
            let d = t.sub(s, v[2])?;
            let m = t.mul(d, v[1])?;
            project(t, m, seed)
        },
        &inputs,
        EPS,
    )
}

fn scalar_ops(seed: u64) -> Result<f64> {
    let mut rng = Rng::seed(seed);
    let shape = dims(&mut rng, 2);
    let s = rng.uniform_range(-2.0, 2.0);
    grad_check(
        |t, v| {
            let a = t.scale(v[0], s);
            let b = t.add_scalar(a, 0.5);
            project(t, b, seed)
        },
        &[normal(&mut rng, &shape)],
        EPS,
    )
}

fn matmul(seed: u64) -> Result<f64> {
    let mut rng = Rng::seed(seed);
    let d = dims(&mut rng, 3);
    let inputs = [normal(&mut rng, &[d[0], d[1]]), normal(&mut rng, &[d[1], d[2]])];
    grad_check(
        |t, v| {
            let c = t.matmul(v[0], v[1])?;
            project(t, c, seed)
        },
        &inputs,
        EPS,
    )
}

fn relu(seed: u64) -> Result<f64> {
    let mut rng = Rng::seed(seed);
    let shape = dims(&mut rng, 2);
    grad_check(
        |t, v| {
            let r = t.relu(v[0]);
            project(t, r, seed)
        },
        &[away_from_zero(&mut rng, &shape)],
        EPS,
    )
}

fn exp_log(seed: u64) -> Result<f64> {
    let mut rng = Rng::seed(seed);
    let shape = dims(&mut rng, 2);
    let positive = Tensor::from_fn(shape.clone(), |_| rng.uniform_range(0.2, 3.0));
    grad_check(
        |t, v| {
            let e = t.exp(v[0])?;
            let l = t.log(v[1])?;
            let s = t.add(e, l)?;
            project(t, s, seed)
        },
        &[normal(&mut rng, &shape), positive],
        EPS,
    )
}

fn reshape_transpose(seed: u64) -> Result<f64> {
    let mut rng = Rng::seed(seed);
    let d = dims(&mut rng, 2);
    grad_check(
        |t, v| {
            let r = t.reshape(v[0], [d[1], d[0]])?;
            let tr = t.transpose(r)?;
            let sq = t.mul(tr, tr)?;
            project(t, sq, seed)
        },
        &[normal(&mut rng, &[d[0], d[1]])],
        EPS,
    )
}

fn concat(seed: u64) -> Result<f64> {
    let mut rng = Rng::seed(seed);
    let axis = rng.below(3);
    let mut a = dims(&mut rng, 3);
    let mut b = a.clone();
    a[axis] = 1 + rng.below(3);
    b[axis] = 1 + rng.below(3);
    grad_check(
        |t, v| {
            let c = t.concat(&[v[0], v[1]], axis)?;
            let sq = t.mul(c, c)?;
            project(t, sq, seed)
        },
        &[normal(&mut rng, &a), normal(&mut rng, &b)],
        EPS,
    )
}

fn reductions(seed: u64) -> Result<f64> {
    let mut rng = Rng::seed(seed);
    let shape = dims(&mut rng, 3);
    grad_check(
        |t, v| {
            let sq = t.mul(v[0], v[0])?;
            let s = t.sum(sq);
            let m = t.mean(v[0]);
            let m2 = t.mul(m, m)?;
            t.add(s, m2)
        },
        &[normal(&mut rng, &shape)],
        EPS,
    )
}

fn conv2d(seed: u64) -> Result<f64> {
    let mut rng = Rng::seed(seed);
    let (cin, cout) = (1 + rng.below(3), 1 + rng.below(3));
    let (k, dilation, stride, padding, size) = match seed % 4 {
        0 => (3, 1, 1, 1, 5),
        1 => (3, 2, 1, 2, 6),
        2 => (3, 1, 2, 1, 7),
        _ => (1, 1, 1, 0, 4),
    };
    let geom = ConvGeometry {
        stride,
        dilation,
        padding,
    };
    grad_check(
        |t, v| {
            let y = t.conv2d(v[0], v[1], geom)?;
            project(t, y, seed)
        },
        &[normal(&mut rng, &[cin, size, size]), normal(&mut rng, &[cout, cin, k, k])],
        EPS,
    )
}

fn channel_bias(seed: u64) -> Result<f64> {
    let mut rng = Rng::seed(seed);
    let shape = dims(&mut rng, 3);
    let c = shape[0];
    grad_check(
        |t, v| {
            let y = t.channel_bias(v[0], v[1])?;
            let sq = t.mul(y, y)?;
            project(t, sq, seed)
        },
        &[normal(&mut rng, &shape), normal(&mut rng, &[c])],
        EPS,
    )
}

fn gather_scatter(seed: u64) -> Result<f64> {
    let mut rng = Rng::seed(seed);
    let (n, d) = (3 + rng.below(5), 1 + rng.below(3));
    let k = 1 + rng.below(n);
    let mut rows = rng.sample_indices(n, k);
    rows.sort_unstable();
    grad_check(
        |t, v| {
            let g = t.gather_rows(v[0], &rows)?;
            let sq = t.mul(g, g)?;
            let s = t.scatter_rows(sq, &rows, n)?;
            project(t, s, seed)
        },
        &[normal(&mut rng, &[n, d])],
        EPS,
    )
}

fn softmax_rows(seed: u64) -> Result<f64> {
    let mut rng = Rng::seed(seed);
    let d = dims(&mut rng, 2);
    grad_check(
        |t, v| {
            let s = t.softmax_rows(v[0])?;
            project(t, s, seed)
        },
        &[normal(&mut rng, &[d[0], d[1] + 1])],
        EPS,
    )
}

fn random_labels(rng: &mut Rng, h: usize, w: usize, m: usize) -> LabelMap {
    let mut data: Vec<u8> = (0..h * w).map(|_| rng.below(m) as u8).collect();
    // every class present so class-wise sets are non-trivial
    for (c, slot) in data.iter_mut().take(m).enumerate() {
        *slot = c as u8;
    }
    LabelMap::new(h, w, data).expect("valid labels")
}

fn cross_entropy_case(seed: u64) -> Result<f64> {
    let mut rng = Rng::seed(seed);
    let (m, h, w) = (2 + rng.below(3), 1 + rng.below(3), 2 + rng.below(3));
    let labels = random_labels(&mut rng, h, w, m);
    grad_check(
        |t, v| cross_entropy(t, v[0], &labels, crate::data::IGNORE_LABEL),
        &[normal(&mut rng, &[m, h, w])],
        EPS,
    )
}

fn ohem_case(seed: u64) -> Result<f64> {
    let mut rng = Rng::seed(seed);
    let (m, h, w) = (3, 3, 3);
    let labels = random_labels(&mut rng, h, w, m);
    let logits = Tensor::from_fn([m, h, w], |_| 2.0 * rng.normal());
    let cfg = OhemConfig {
        threshold: 0.7,
        min_kept: Some(3),
    };
    let kept = ohem_select(&logits, &labels, &cfg)?;
    grad_check(|t, v| t.pixel_cross_entropy(v[0], &kept), &[logits], EPS)
}

fn similarity_graph(seed: u64) -> Result<f64> {
    let mut rng = Rng::seed(seed);
    let (n, c) = (3 + rng.below(4), 1 + rng.below(3));
    let k = 1 + rng.below(n);
    let mut support = rng.sample_indices(n, k);
    support.sort_unstable();
    let scale = 0.5;
    let inputs = [
        normal(&mut rng, &[n, c]),
        Tensor::from_fn([c, c], |_| scale * rng.normal()),
        Tensor::from_fn([c, c], |_| scale * rng.normal()),
        normal(&mut rng, &[c, c]),
    ];
    grad_check(
        |t, v| {
            let s = similarity_scores(t, v[0], v[1], v[2], &support)?;
            let a = row_softmax(t, &s)?;
            let z = graph_convolve(t, a.weights, a.nodes, v[3])?;
            project(t, z, seed)
        },
        &inputs,
        EPS,
    )
}

fn randomize(params: &mut Params<f64>, rng: &mut Rng, scale: f64) {
    for (_, t) in params.tensors_mut() {
        for v in t.data_mut() {
            *v = scale * rng.normal();
        }
    }
}

fn cdgc_case(seed: u64, fusion: Fusion) -> Result<f64> {
    let mut rng = Rng::seed(seed);
    let (m, c, h, w) = (2 + rng.below(2), 2, 3, 3);
    let cfg = CdgcConfig {
        num_classes: m,
        channels: c,
        fusion,
    };
    let mut params = Params::<f64>::new();
    let module = Cdgc::class_wise(&cfg, &mut params, &mut rng, "cdgc")?;
    randomize(&mut params, &mut rng, 0.7);
    // random sets, one class left empty
    let sets: Vec<Vec<usize>> = (0..m)
        .map(|k| {
            if k == m - 1 {
                return vec![];
            }
            let count = 2 + rng.below(5);
            rng.sample_indices(h * w, count)
        })
        .collect();
    let sampled = SampledSet::new(h * w, 1.0, sets)?;
    let mut inputs = vec![normal(&mut rng, &[c, h, w])];
    inputs.extend(params.iter().map(|(_, t)| t.clone()));
    grad_check(
        |t, v| {
            let bound = Bound::from_vars(v[1..].to_vec());
            let r = module.forward(t, &bound, v[0], &sampled)?;
            Ok(t.sum(r.fused))
        },
        &inputs,
        EPS,
    )
}

fn pipeline_case(seed: u64, variant: Variant) -> Result<f64> {
    let mut rng = Rng::seed(seed);
    let (m, h, w) = (2, 4, 4);
    let net = BasicNetConfig {
        in_channels: 3,
        feature_channels: 4,
        num_classes: m,
        trunk: vec![
            ConvSpec { out_channels: 4, kernel: 3, dilation: 1 },
            ConvSpec { out_channels: 4, kernel: 3, dilation: 2 },
            ConvSpec { out_channels: 4, kernel: 1, dilation: 1 },
        ],
        aux_tap: 0,
    };
    let cfg = ModelConfig {
        net,
        fusion: Fusion::Concat,
        variant,
    };
    let mut model = Model::<f64>::new(cfg, &mut rng)?;
    randomize(&mut model.params, &mut rng, 0.5);
    let image = Tensor::from_fn([3, h, w], |_| rng.uniform());
    let labels = random_labels(&mut rng, h, w, m);
    let loss_cfg = LossConfig::default();

    // discrete decisions (node sets, OHEM kept pixels) are pinned at the base point
    let (sampled, kept) = {
        let mut tape = Tape::new();
        let bound = model.params.bind(&mut tape);
        let x = tape.constant(image.clone());
        let mut sample_rng = rng.split();
        let out = model.forward(
            &mut tape,
            &bound,
            x,
            NodeSelection::Train {
                labels: &labels,
                rng: &mut sample_rng,
            },
        )?;
        let kept = match out.refined {
            Some(r) => Some(ohem_select(tape.value(r), &labels, &loss_cfg.ohem)?),
            None => None,
        };
        (out.sampled, kept)
    };

    let inputs: Vec<Tensor<f64>> = model.params.iter().map(|(_, t)| t.clone()).collect();
    grad_check(
        |t, v| {
            let bound = Bound::from_vars(v.to_vec());
            let x = t.constant(image.clone());
            let selection = match &sampled {
                Some(s) => NodeSelection::Fixed(s),
                None => NodeSelection::Inference,
            };
            let out = model.forward(t, &bound, x, selection)?;
            let parts = model.losses(t, &out, &labels, &loss_cfg, kept.as_deref())?;
            Ok(parts.total)
        },
        &inputs,
        EPS,
    )
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_case_passes_for_three_seeds() {
        let results = run_suite(3).unwrap();
        assert!(results.len() >= 20);
        let failed: Vec<_> = results.iter().filter(|r| !r.passed()).collect();
        assert!(failed.is_empty(), "{failed:?}");
    }
}
