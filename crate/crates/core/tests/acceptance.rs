//! Acceptance criteria, one printed line each. Runs without the libtest harness so
//! the report is always visible; exits nonzero if any criterion fails.

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::time::Instant;

use cdgc_core::cdgc::{Cdgc, CdgcConfig, Fusion};
use cdgc_core::data::{LabelMap, IGNORE_LABEL};
use cdgc_core::experiment::{run_experiment, run_sweep, ExperimentConfig, ResultRow};
use cdgc_core::graph::{dynamic_sample, row_softmax, similarity_scores, ClassMasks, SampledSet};
use cdgc_core::loss::{cross_entropy, ohem_loss, total_loss, LossWeights, OhemConfig};
use cdgc_core::metrics::{confusion, miou};
use cdgc_core::model::Variant;
use cdgc_core::optim::{poly_lr, OptimState};
use cdgc_core::params::Params;
use cdgc_core::{gradsuite, Rng, Tape, Tensor};

struct Outcome {
    passed: bool,
    detail: String,
}

fn outcome(passed: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        passed,
        detail: detail.into(),
    }
}

fn gradient_suite() -> Outcome {
    let start = Instant::now();
    let results = match gradsuite::run_suite(3) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("suite error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let worst = results.iter().max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error)).unwrap();
    let failed = results.iter().filter(|r| !r.passed()).count();
    outcome(
        failed == 0 && results.len() >= 20 && secs < 120.0,
        format!(
            "{} checks, {failed} failed, worst {:.2e} ({} seed {}), {secs:.1}s",
            results.len(),
            worst.max_rel_error,
            worst.name,
            worst.seed
        ),
    )
}

fn random_subset(rng: &mut Rng, n: usize, p: f64) -> Vec<usize> {
    (0..n).filter(|_| rng.uniform() < p).collect()
}

fn sampling_oracle() -> Outcome {
    let mut rng = Rng::seed(2024);
    let ratios = [0.0, 0.25, 0.5, 0.75, 1.0];
    let mut violations = 0;
    let mut exact_union = 0;
    for trial in 0..1000 {
        let n = 1 + rng.below(64);
        let m = 2 + rng.below(4);
        let ratio = if trial % 2 == 0 { ratios[trial / 2 % 5] } else { rng.uniform() };
        let (pc, pg) = (rng.uniform(), rng.uniform());
        let c_sets: Vec<Vec<usize>> = (0..m).map(|_| random_subset(&mut rng, n, pc)).collect();
        let g_sets: Vec<Vec<usize>> = (0..m).map(|_| random_subset(&mut rng, n, pg)).collect();
        let coarse = ClassMasks::from_sets(n, &c_sets).unwrap();
        let gt = ClassMasks::from_sets(n, &g_sets).unwrap();
        let mut sample_rng = rng.split();
        let s = dynamic_sample(&coarse, &gt, ratio, &mut sample_rng).unwrap();
        for k in 0..m {
            let c: BTreeSet<usize> = c_sets[k].iter().copied().collect();
            let g: BTreeSet<usize> = g_sets[k].iter().copied().collect();
            let got: BTreeSet<usize> = s.class(k).iter().copied().collect();
            let union: BTreeSet<usize> = c.union(&g).copied().collect();
            let inter: BTreeSet<usize> = c.intersection(&g).copied().collect();
            let hard: BTreeSet<usize> = c.symmetric_difference(&g).copied().collect();
            let want_easy = (ratio * inter.len() as f64 + 1e-9).floor() as usize;
            let sorted = s.class(k).windows(2).all(|w| w[0] < w[1]);
            let ok = sorted
                && got.is_subset(&union)
                && hard.is_subset(&got)
                && got.intersection(&inter).count() == want_easy;
            if !ok {
                violations += 1;
            }
            if ratio == 1.0 {
                if got == union {
                    exact_union += 1;
                } else {
                    violations += 1;
                }
            }
        }
    }
    outcome(
        violations == 0,
        format!("1000 instances, {violations} violations, {exact_union} ratio-1 classes equal C∪G"),
    )
}

fn dense_adjacency(x: &Tensor<f64>, w: &Tensor<f64>, wp: &Tensor<f64>, support: &[usize]) -> Tensor<f64> {
    let mut tape = Tape::new();
    let (xv, wv, wpv) = (
        tape.constant(x.clone()),
        tape.constant(w.clone()),
        tape.constant(wp.clone()),
    );
    let scores = similarity_scores(&mut tape, xv, wv, wpv, support).unwrap();
    row_softmax(&mut tape, &scores).unwrap().to_dense(&tape)
}

fn adjacency_properties() -> Outcome {
    let mut rng = Rng::seed(77);
    let (mut worst_row, mut leaks, mut worst_perm) = (0.0f64, 0usize, 0.0f64);
    for _ in 0..100 {
        let n = 2 + rng.below(30);
        let c = 1 + rng.below(6);
        let x = Tensor::from_fn([n, c], |_| rng.normal());
        let w = Tensor::from_fn([c, c], |_| 0.5 * rng.normal());
        let wp = Tensor::from_fn([c, c], |_| 0.5 * rng.normal());
        let mut support = random_subset(&mut rng, n, 0.6);
        if support.is_empty() {
            support.push(rng.below(n));
        }
        let a = dense_adjacency(&x, &w, &wp, &support);
        let member: Vec<bool> = (0..n).map(|i| support.contains(&i)).collect();
        for i in 0..n {
            let row = &a.data()[i * n..(i + 1) * n];
            if member[i] {
                worst_row = worst_row.max((row.iter().sum::<f64>() - 1.0).abs());
            }
            leaks += (0..n).filter(|&j| (!member[i] || !member[j]) && row[j] != 0.0).count();
        }
        // node i of the permuted graph is node perm[i] of the original
        let perm = rng.sample_indices(n, n);
        let px = Tensor::from_fn([n, c], |idx| x.data()[perm[idx / c] * c + idx % c]);
        let psupport: Vec<usize> = (0..n).filter(|&i| member[perm[i]]).collect();
        let pa = dense_adjacency(&px, &w, &wp, &psupport);
        for i in 0..n {
            for j in 0..n {
                let d = (pa.data()[i * n + j] - a.data()[perm[i] * n + perm[j]]).abs();
                worst_perm = worst_perm.max(d);
            }
        }
    }
    outcome(
        worst_row <= 1e-5 && leaks == 0 && worst_perm <= 1e-6,
        format!(
            "100 graphs, max |row sum - 1| {worst_row:.1e}, {leaks} non-support nonzeros, permutation error {worst_perm:.1e}"
        ),
    )
}

fn class_isolation() -> Outcome {
    let mut rng = Rng::seed(4242);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let (m, c, h, w) = (2 + rng.below(3), 1 + rng.below(5), 2 + rng.below(4), 2 + rng.below(4));
        let n = h * w;
        let mut params = Params::<f64>::new();
        let cfg = CdgcConfig {
            num_classes: m,
            channels: c,
            fusion: Fusion::Concat,
        };
        let module = Cdgc::class_wise(&cfg, &mut params, &mut rng, "g").unwrap();
        let sets = SampledSet::new(n, 1.0, (0..m).map(|_| random_subset(&mut rng, n, 0.5)).collect()).unwrap();
        let x = Tensor::from_fn([c, h, w], |_| rng.normal());
        let slices = |x: &Tensor<f64>| {
            let mut tape = Tape::new();
            let bound = params.bind(&mut tape);
            let xv = tape.constant(x.clone());
            let r = module.class_wise_reason(&mut tape, &bound, xv, &sets).unwrap();
            tape.value(r.per_class).data().to_vec()
        };
        let base = slices(&x);
        let class = rng.below(m);
        let outside: Vec<usize> = (0..n).filter(|j| !sets.class(class).contains(j)).collect();
        if outside.is_empty() {
            continue;
        }
        let j = outside[rng.below(outside.len())];
        let mut moved = x.clone();
        for ch in 0..c {
            moved.data_mut()[ch * n + j] += 5.0 * rng.normal();
        }
        let after = slices(&moved);
        let range = class * c * n..(class + 1) * c * n;
        for (a, b) in after[range.clone()].iter().zip(&base[range]) {
            worst = worst.max((a - b).abs());
        }
    }
    outcome(worst < 1e-12, format!("50 instances, max slice change {worst:.1e}"))
}

fn loss_contracts() -> Outcome {
    let mut rng = Rng::seed(5);
    let (m, h, w) = (4, 5, 6);
    let logits = Tensor::<f64>::from_fn([m, h, w], |_| 2.0 * rng.normal());
    let mut data: Vec<u8> = (0..h * w).map(|_| rng.below(m) as u8).collect();
    data[3] = IGNORE_LABEL;
    let labels = LabelMap::new(h, w, data).unwrap();

    let mut tape = Tape::new();
    let x = tape.constant(logits);
    let ce = cross_entropy(&mut tape, x, &labels, IGNORE_LABEL).unwrap();
    let all = OhemConfig {
        threshold: 1.0,
        min_kept: Some(labels.valid_pixels()),
    };
    let oh = ohem_loss(&mut tape, x, &labels, &all).unwrap();
    let ohem_gap = (tape.value(ce).item() - tape.value(oh).item()).abs();

    let uniform = tape.constant(Tensor::zeros([m, h, w]));
    let ce_u = cross_entropy(&mut tape, uniform, &labels, IGNORE_LABEL).unwrap();
    let uniform_gap = (tape.value(ce_u).item() - (m as f64).ln()).abs();

    let mut state = OptimState::<f64>::new(0.01, 100);
    let lr0 = poly_lr(&state);
    state.iter = 100;
    let lr_end = poly_lr(&state);

    let one = tape.constant(Tensor::scalar(1.0));
    let weights = LossWeights::default();
    let total = total_loss(&mut tape, one, Some(one), one, &weights).unwrap();
    let total_gap = (tape.value(total).item() - 1.7).abs();

    let passed = ohem_gap <= 1e-7 && uniform_gap <= 1e-6 && lr0 == 0.01 && lr_end == 0.0 && total_gap <= 1e-12;
    outcome(
        passed,
        format!(
            "ohem-vs-ce {ohem_gap:.1e}, uniform-ce-vs-ln{m} {uniform_gap:.1e}, poly_lr(0)={lr0}, poly_lr(max)={lr_end}, weighted unit losses {:.6}",
            1.7 + total_gap
        ),
    )
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn desk_scale_trend(out: &Path) -> Outcome {
    let variants: Vec<Variant> = [
        "none",
        "plain-gcn",
        "class-sim",
        "class-ds:0.2",
        "class-ds:0.4",
        "class-ds:0.6",
        "class-ds:0.8",
        "class-ds:1.0",
    ]
    .iter()
    .map(|v| v.parse().unwrap())
    .collect();
    let start = Instant::now();
    let rows = match run_sweep(&ExperimentConfig::default(), &variants, &[0, 1, 2], out) {
        Ok(r) => r,
        Err(e) => return outcome(false, format!("sweep error: {e}")),
    };
    let secs = start.elapsed().as_secs_f64();
    let med = |v: Variant| {
        median(rows.iter().filter(|r: &&ResultRow| r.variant == v).map(|r| r.refined_miou).collect())
    };
    let table: Vec<String> = variants.iter().map(|&v| format!("{v}={:.4}", med(v))).collect();
    println!("  sweep medians (refined mIoU, 3 seeds): {}", table.join(" "));
    for r in &rows {
        println!("  {}", r.csv_row());
    }
    let (none, plain, sim) = (med(Variant::None), med(Variant::PlainGcn), med(Variant::ClassSim));
    let (ds1, ds02) = (med(Variant::ClassDs(1.0)), med(Variant::ClassDs(0.2)));
    let ordering = ds1 > sim && sim > plain && plain >= none;
    let margin = ds1 - none;
    let passed = ordering && margin >= 0.01 && ds1 >= ds02 && secs < 1800.0;
    outcome(
        passed,
        format!(
            "class-ds:1.0 {ds1:.4} > class-sim {sim:.4} > plain-gcn {plain:.4} >= none {none:.4}: {ordering}; \
             class-ds minus coarse {:+.2} points (need >= +1.00); ratio 1.0 >= 0.2: {}; {secs:.0}s",
            100.0 * margin,
            ds1 >= ds02
        ),
    )
}

fn read_tree(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut files: Vec<(String, Vec<u8>)> = fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.is_file())
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), fs::read(&p).unwrap()))
        .collect();
    files.sort();
    files
}

fn determinism(out: &Path) -> Outcome {
    let cfg = ExperimentConfig {
        variant: Variant::ClassDs(0.6),
        steps: 300,
        seed: 11,
        ..ExperimentConfig::default()
    };
    let a = run_experiment(&cfg, out.join("a")).unwrap();
    let b = run_experiment(&cfg, out.join("b")).unwrap();
    let metrics_same = fs::read(&a.metrics_csv).unwrap() == fs::read(&b.metrics_csv).unwrap();
    let (ca, cb) = (read_tree(&a.checkpoint), read_tree(&b.checkpoint));
    let ckpt_same = ca == cb;
    outcome(
        metrics_same && ckpt_same && ca.len() > 2,
        format!(
            "metrics.csv identical: {metrics_same}; checkpoint ({} files) identical: {ckpt_same}",
            ca.len()
        ),
    )
}

fn metric_correctness() -> Outcome {
    let labels = LabelMap::new(2, 2, vec![0, 0, 1, 1]).unwrap();
    let (example, _) = miou(&confusion(&[0, 1, 1, 1], &labels, 2).unwrap()).unwrap();
    let (perfect, _) = miou(&confusion(&[0, 0, 1, 1], &labels, 2).unwrap()).unwrap();
    let (disjoint, _) = miou(&confusion(&[1, 1, 0, 0], &labels, 2).unwrap()).unwrap();
    outcome(
        (example - 7.0 / 12.0).abs() <= 1e-9 && perfect == 1.0 && disjoint == 0.0,
        format!("2x2 example {example:.12}, perfect {perfect}, disjoint {disjoint}"),
    )
}

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

fn main() {
    let tmp = tempfile::tempdir().expect("temporary directory");
    let criteria: Vec<Criterion> = vec![
        ("1 gradient suite", Box::new(gradient_suite)),
        ("2 dynamic sampling oracle", Box::new(sampling_oracle)),
        ("3 adjacency properties", Box::new(adjacency_properties)),
        ("4 class isolation", Box::new(class_isolation)),
        ("5 loss and optimizer contracts", Box::new(loss_contracts)),
        ("6 desk-scale trend", Box::new(|| desk_scale_trend(&tmp.path().join("sweep")))),
        ("7 determinism", Box::new(|| determinism(&tmp.path().join("det")))),
        ("8 metric correctness", Box::new(metric_correctness)),
    ];
    let mut failed = 0;
    for (name, check) in &criteria {
        let o = check();
        println!("criterion {name}: {} ({})", if o.passed { "PASS" } else { "FAIL" }, o.detail);
        failed += usize::from(!o.passed);
    }
    println!("acceptance: {} of {} criteria passed", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
