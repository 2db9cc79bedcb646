//! Per-class node sets and adjacency construction.
//!
//! Nodes are spatial positions of an `H×W` feature map in row-major order, so
//! `N = H·W`. Node features are passed node-major, as an `N×C` matrix.

use crate::data::{LabelMap, IGNORE_LABEL};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// One binary membership vector over the `N` nodes per class.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClassMasks {
    num_nodes: usize,
    masks: Vec<Vec<bool>>,
}

impl ClassMasks {
    /// Per-pixel argmax of `[M, H, W]` logits. Ties go to the lowest class index.
    pub fn from_logits<T: Real>(logits: &Tensor<T>) -> Result<Self> {
        let [m, h, w] = logits.dims3("class_masks_from_logits")?;
        if m < 2 {
            return Err(Error::Config(format!("need at least 2 classes, got {m}")));
        }
        let n = h * w;
        let data = logits.data();
        let mut masks = vec![vec![false; n]; m];
        for node in 0..n {
            let mut best = 0;
            for class in 1..m {
                if data[class * n + node] > data[best * n + node] {
                    best = class;
                }
            }
            masks[best][node] = true;
        }
        Ok(Self { num_nodes: n, masks })
    }

    /// Ground-truth masks. Ignored pixels belong to no class.
    pub fn from_labels(labels: &LabelMap, num_classes: usize) -> Result<Self> {
        let n = labels.len();
        let mut masks = vec![vec![false; n]; num_classes];
        for (node, &l) in labels.data().iter().enumerate() {
            if l == IGNORE_LABEL {
                continue;
            }
            let class = l as usize;
            if class >= num_classes {
                return Err(Error::Data(format!(
                    "label {l} at node {node} outside {num_classes} classes"
                )));
            }
            masks[class][node] = true;
        }
        Ok(Self { num_nodes: n, masks })
    }

    pub fn from_sets(num_nodes: usize, sets: &[Vec<usize>]) -> Result<Self> {
        let mut masks = vec![vec![false; num_nodes]; sets.len()];
        for (mask, set) in masks.iter_mut().zip(sets) {
            for &i in set {
                *mask
                    .get_mut(i)
                    .ok_or_else(|| Error::Data(format!("node {i} outside {num_nodes} nodes")))? =
                    true;
            }
        }
        Ok(Self { num_nodes, masks })
    }

    pub fn num_classes(&self) -> usize {
        self.masks.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn mask(&self, class: usize) -> &[bool] {
        &self.masks[class]
    }

    pub fn members(&self, class: usize) -> Vec<usize> {
        self.masks[class]
            .iter()
            .enumerate()
            .filter_map(|(i, &b)| b.then_some(i))
            .collect()
    }

    /// True when every node belongs to exactly one class.
    pub fn is_partition(&self) -> bool {
        (0..self.num_nodes).all(|i| self.masks.iter().filter(|m| m[i]).count() == 1)
    }

    /// Per-node class index for partition masks.
    pub fn to_class_map(&self) -> Vec<usize> {
        (0..self.num_nodes)
            .map(|i| self.masks.iter().position(|m| m[i]).unwrap_or(0))
            .collect()
    }

    /// 0/1 tensor of shape `[M, N]`.
    pub fn to_tensor(&self) -> Tensor<f32> {
        let n = self.num_nodes;
        Tensor::from_fn([self.masks.len(), n], |i| {
            if self.masks[i / n][i % n] {
                1.0
            } else {
                0.0
            }
        })
    }
}

/// Sorted per-class node index sets used as graph supports.
#[derive(Clone, Debug, PartialEq)]
pub struct SampledSet {
    num_nodes: usize,
    ratio: f64,
    sets: Vec<Vec<usize>>,
}

impl SampledSet {
    pub fn new(num_nodes: usize, ratio: f64, mut sets: Vec<Vec<usize>>) -> Result<Self> {
        for set in &mut sets {
            set.sort_unstable();
            set.dedup();
            if set.last().is_some_and(|&i| i >= num_nodes) {
                return Err(Error::Data(format!("node index outside {num_nodes} nodes")));
            }
        }
        Ok(Self {
            num_nodes,
            ratio,
            sets,
        })
    }

    /// One set containing every node; the support of a single unmasked graph.
    pub fn all_nodes(num_nodes: usize) -> Self {
        Self {
            num_nodes,
            ratio: 1.0,
            sets: vec![(0..num_nodes).collect()],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.sets.len()
    }

    pub fn num_nodes(&self) -> usize {
        self.num_nodes
    }

    pub fn ratio(&self) -> f64 {
        self.ratio
    }

    pub fn class(&self, m: usize) -> &[usize] {
        &self.sets[m]
    }

    pub fn sets(&self) -> &[Vec<usize>] {
        &self.sets
    }
}

/// Number of easy positives kept out of `intersection` nodes.
pub fn easy_positive_quota(ratio: f64, intersection: usize) -> usize {
    // the nudge keeps products such as 0.6·5 from flooring one short
    ((ratio * intersection as f64) + 1e-9).floor() as usize
}

/// Training-time node sets: per class, every hard negative (`C \ G`), every hard
/// positive (`G \ C`), and `floor(ratio·|C ∩ G|)` easy positives drawn uniformly
/// without replacement from `C ∩ G`.
pub fn dynamic_sample(
    coarse: &ClassMasks,
    gt: &ClassMasks,
    ratio: f64,
    rng: &mut Rng,
) -> Result<SampledSet> {
    if !(0.0..=1.0).contains(&ratio) {
        return Err(Error::Config(format!("sampling ratio {ratio} outside [0, 1]")));
    }
    if coarse.num_classes() != gt.num_classes() || coarse.num_nodes() != gt.num_nodes() {
        return Err(Error::Shape {
            op: "dynamic_sample",
            lhs: vec![coarse.num_classes(), coarse.num_nodes()],
            rhs: vec![gt.num_classes(), gt.num_nodes()],
        });
    }
    let mut sets = Vec::with_capacity(coarse.num_classes());
    for m in 0..coarse.num_classes() {
        let (c, g) = (coarse.mask(m), gt.mask(m));
        let mut set = Vec::new();
        let mut easy = Vec::new();
        for i in 0..coarse.num_nodes() {
            match (c[i], g[i]) {
                (true, true) => easy.push(i),
                (true, false) | (false, true) => set.push(i),
                (false, false) => {}
            }
        }
        let keep = easy_positive_quota(ratio, easy.len());
        if keep == easy.len() {
            set.extend_from_slice(&easy);
        } else {
            set.extend(rng.sample_indices(easy.len(), keep).into_iter().map(|k| easy[k]));
        }
        set.sort_unstable();
        sets.push(set);
    }
    Ok(SampledSet {
        num_nodes: coarse.num_nodes(),
        ratio,
        sets,
    })
}

/// Inference-time node sets: each class keeps exactly its coarse-predicted nodes.
pub fn inference_sample(coarse: &ClassMasks) -> SampledSet {
    SampledSet {
        num_nodes: coarse.num_nodes(),
        ratio: 1.0,
        sets: (0..coarse.num_classes()).map(|m| coarse.members(m)).collect(),
    }
}

/// Pairwise scores `F[i][j] = (w·x_i)ᵀ(w′·x_j)` over one support set.
///
/// Stored compactly: row/column `k` of `scores` is node `support[k]`. Pairs outside the
/// support are excluded and have no score.
#[derive(Clone, Debug)]
pub struct SimilarityScores {
    pub support: Vec<usize>,
    pub num_nodes: usize,
    /// Gathered node features, `|S|×C`.
    pub nodes: Var,
    /// `|S|×|S|`.
    pub scores: Var,
}

impl SimilarityScores {
    /// Score between global nodes `i` and `j`, or `None` when either is unsupported.
    pub fn score<T: Real>(&self, tape: &Tape<T>, i: usize, j: usize) -> Option<T> {
        let a = self.support.binary_search(&i).ok()?;
        let b = self.support.binary_search(&j).ok()?;
        Some(tape.value(self.scores).data()[a * self.support.len() + b])
    }
}

pub fn similarity_scores<T: Real>(
    tape: &mut Tape<T>,
    x_nodes: Var,
    w: Var,
    w_prime: Var,
    support: &[usize],
) -> Result<SimilarityScores> {
    let [n, c] = tape.value(x_nodes).dims2("similarity_scores")?;
    for p in [w, w_prime] {
        if tape.shape(p) != [c, c] {
            return Err(Error::Shape {
                op: "similarity_scores",
                lhs: vec![n, c],
                rhs: tape.shape(p).to_vec(),
            });
        }
    }
    if support.is_empty() {
        return Err(Error::EmptyClass(0));
    }
    let nodes = tape.gather_rows(x_nodes, support)?;
    let wt = tape.transpose(w)?;
    let wpt = tape.transpose(w_prime)?;
    let phi = tape.matmul(nodes, wt)?;
    let psi = tape.matmul(nodes, wpt)?;
    let psi_t = tape.transpose(psi)?;
    let scores = tape.matmul(phi, psi_t)?;
    Ok(SimilarityScores {
        support: support.to_vec(),
        num_nodes: n,
        nodes,
        scores,
    })
}

/// Row-normalized adjacency over one support set; compact like [`SimilarityScores`].
#[derive(Clone, Debug)]
pub struct ClassAdjacency {
    pub support: Vec<usize>,
    pub num_nodes: usize,
    pub nodes: Var,
    /// `|S|×|S|`, every row sums to one.
    pub weights: Var,
}

impl ClassAdjacency {
    /// The full `N×N` matrix, zero outside the support.
    pub fn to_dense<T: Real>(&self, tape: &Tape<T>) -> Tensor<T> {
        let n = self.num_nodes;
        let s = self.support.len();
        let compact = tape.value(self.weights).data();
        let mut dense = Tensor::zeros([n, n]);
        let data = dense.data_mut();
        for (a, &i) in self.support.iter().enumerate() {
            for (b, &j) in self.support.iter().enumerate() {
                data[i * n + j] = compact[a * s + b];
            }
        }
        dense
    }
}

/// Softmax of each supported row over supported columns only, with max subtraction.
pub fn row_softmax<T: Real>(tape: &mut Tape<T>, scores: &SimilarityScores) -> Result<ClassAdjacency> {
    let weights = tape.softmax_rows(scores.scores)?;
    Ok(ClassAdjacency {
        support: scores.support.clone(),
        num_nodes: scores.num_nodes,
        nodes: scores.nodes,
        weights,
    })
}

/// Dense per-class adjacency, `M` matrices of `N×N`.
#[derive(Clone, Debug)]
pub struct AdjacencyTensor<T: Real = f32> {
    pub num_nodes: usize,
    pub slices: Vec<Tensor<T>>,
}

impl<T: Real> AdjacencyTensor<T> {
    /// Builds from per-class adjacencies; `None` (empty class) yields an all-zero slice.
    pub fn from_classes(tape: &Tape<T>, num_nodes: usize, classes: &[Option<ClassAdjacency>]) -> Self {
        let slices = classes
            .iter()
            .map(|c| match c {
                Some(adj) => adj.to_dense(tape),
                None => Tensor::zeros([num_nodes, num_nodes]),
            })
            .collect();
        Self { num_nodes, slices }
    }

    /// `[M, N, N]` view.
    pub fn to_tensor(&self) -> Tensor<T> {
        let mut data = Vec::with_capacity(self.slices.len() * self.num_nodes * self.num_nodes);
        for s in &self.slices {
            data.extend_from_slice(s.data());
        }
        Tensor::new([self.slices.len(), self.num_nodes, self.num_nodes], data)
            .expect("consistent slices")
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn masks(n: usize, sets: &[&[usize]]) -> ClassMasks {
        ClassMasks::from_sets(n, &sets.iter().map(|s| s.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn dominant_class_takes_every_pixel() {
        let logits = Tensor::<f32>::from_fn([3, 2, 2], |i| if i < 4 { 5.0 } else { 0.0 });
        let m = ClassMasks::from_logits(&logits).unwrap();
        assert!(m.mask(0).iter().all(|&b| b));
        assert!(m.mask(1).iter().chain(m.mask(2)).all(|&b| !b));
    }

    #[test]
    fn argmax_tie_goes_to_lowest_class() {
        // 4 classes, 1 pixel; classes 1 and 3 tie at the maximum
        let logits = Tensor::<f32>::new([4, 1, 1], vec![0.0, 2.0, -1.0, 2.0]).unwrap();
        let m = ClassMasks::from_logits(&logits).unwrap();
        assert_eq!(m.members(1), vec![0]);
        assert!(m.members(3).is_empty());
        assert!(ClassMasks::from_logits(&Tensor::<f32>::zeros([1, 2, 2])).is_err());
    }

    #[test]
    fn argmax_matches_per_pixel_loop() {
        let mut rng = Rng::seed(5);
        let logits = Tensor::<f64>::from_fn([3, 4, 4], |_| rng.normal());
        let m = ClassMasks::from_logits(&logits).unwrap();
        assert!(m.is_partition());
        for p in 0..16 {
            let vals: Vec<f64> = (0..3).map(|c| logits.data()[c * 16 + p]).collect();
            let mut best = 0;
            for c in 0..3 {
                if vals[c] > vals[best] {
                    best = c;
                }
            }
            assert!(m.mask(best)[p]);
        }
    }

    #[test]
    fn labels_with_ignore_do_not_partition() {
        let labels = LabelMap::new(1, 3, vec![0, IGNORE_LABEL, 1]).unwrap();
        let g = ClassMasks::from_labels(&labels, 2).unwrap();
        assert_eq!(g.members(0), vec![0]);
        assert_eq!(g.members(1), vec![2]);
        assert!(!g.is_partition());
        let bad = LabelMap::new(1, 1, vec![4]).unwrap();
        assert!(ClassMasks::from_labels(&bad, 2).is_err());
    }

    #[test]
    fn half_ratio_keeps_hard_nodes_and_one_easy() {
        let c = masks(6, &[&[1, 2, 3]]);
        let g = masks(6, &[&[2, 3, 4]]);
        let s = dynamic_sample(&c, &g, 0.5, &mut Rng::seed(0)).unwrap();
        let set = s.class(0);
        assert_eq!(set.len(), 3);
        assert!(set.contains(&1) && set.contains(&4));
        assert!(set.contains(&2) ^ set.contains(&3));
    }

    #[test]
    fn full_ratio_is_union() {
        let c = masks(8, &[&[0, 1, 5], &[2, 3]]);
        let g = masks(8, &[&[1, 6], &[3, 4, 7]]);
        let s = dynamic_sample(&c, &g, 1.0, &mut Rng::seed(9)).unwrap();
        assert_eq!(s.class(0), &[0, 1, 5, 6]);
        assert_eq!(s.class(1), &[2, 3, 4, 7]);
    }

    #[test]
    fn equal_masks_quarter_ratio_keeps_two() {
        let set: Vec<usize> = (0..8).collect();
        let c = masks(10, &[&set]);
        let s = dynamic_sample(&c, &c, 0.25, &mut Rng::seed(2)).unwrap();
        assert_eq!(s.class(0).len(), 2);
        assert!(s.class(0).iter().all(|i| set.contains(i)));
    }

    #[test]
    fn empty_union_gives_empty_set_and_bad_ratio_errors() {
        let c = masks(4, &[&[], &[0, 1, 2, 3]]);
        let s = dynamic_sample(&c, &c, 0.5, &mut Rng::seed(1)).unwrap();
        assert!(s.class(0).is_empty());
        assert!(dynamic_sample(&c, &c, 1.5, &mut Rng::seed(1)).is_err());
        let other = masks(5, &[&[], &[0]]);
        assert!(dynamic_sample(&c, &other, 0.5, &mut Rng::seed(1)).is_err());
    }

    #[test]
    fn quota_floors_exactly() {
        assert_eq!(easy_positive_quota(0.25, 8), 2);
        assert_eq!(easy_positive_quota(0.6, 5), 3);
        assert_eq!(easy_positive_quota(0.5, 3), 1);
        assert_eq!(easy_positive_quota(0.0, 7), 0);
    }

    #[test]
    fn inference_sets_are_coarse_masks() {
        let c = masks(5, &[&[0, 4], &[1, 2, 3], &[]]);
        let s = inference_sample(&c);
        assert_eq!(s.ratio(), 1.0);
        for m in 0..3 {
            assert_eq!(s.class(m), c.members(m).as_slice());
        }
        assert!(s.class(2).is_empty());
        let covered: usize = s.sets().iter().map(Vec::len).sum();
        assert_eq!(covered, 5);
    }

    fn leaf(tape: &mut Tape<f64>, t: Tensor<f64>) -> Var {
        tape.constant(t)
    }

    #[test]
    fn identity_transforms_on_orthonormal_nodes_give_identity_scores() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, Tensor::eye(3));
        let w = leaf(&mut tape, Tensor::eye(3));
        let scores = similarity_scores(&mut tape, x, w, w, &[0, 1, 2]).unwrap();
        assert_eq!(tape.value(scores.scores), &Tensor::eye(3));
    }

    #[test]
    fn zero_key_transform_gives_zero_scores() {
        let mut tape = Tape::<f64>::new();
        let x = leaf(&mut tape, Tensor::from_fn([4, 2], |i| i as f64));
        let w = leaf(&mut tape, Tensor::eye(2));
        let z = leaf(&mut tape, Tensor::zeros([2, 2]));
        let s = similarity_scores(&mut tape, x, w, z, &[0, 2, 3]).unwrap();
        assert!(tape.value(s.scores).data().iter().all(|&v| v == 0.0));
        assert_eq!(s.score(&tape, 1, 2), None);
        assert!(matches!(
            similarity_scores(&mut tape, x, w, z, &[]),
            Err(Error::EmptyClass(_))
        ));
    }

    #[test]
    fn scores_match_double_loop() {
        let mut rng = Rng::seed(17);
        let (n, c) = (4, 3);
        let xt = Tensor::<f64>::from_fn([n, c], |_| rng.normal());
        let wt = Tensor::<f64>::from_fn([c, c], |_| rng.normal());
        let wpt = Tensor::<f64>::from_fn([c, c], |_| rng.normal());
        let mut tape = Tape::new();
        let (x, w, wp) = (
            leaf(&mut tape, xt.clone()),
            leaf(&mut tape, wt.clone()),
            leaf(&mut tape, wpt.clone()),
        );
        let s = similarity_scores(&mut tape, x, w, wp, &[0, 1, 2, 3]).unwrap();
        let transform = |m: &Tensor<f64>, i: usize| -> Vec<f64> {
            (0..c)
                .map(|r| (0..c).map(|k| m.data()[r * c + k] * xt.data()[i * c + k]).sum())
                .collect()
        };
        for i in 0..n {
            for j in 0..n {
                let a = transform(&wt, i);
                let b = transform(&wpt, j);
                let want: f64 = a.iter().zip(&b).map(|(p, q)| p * q).sum();
                assert!((s.score(&tape, i, j).unwrap() - want).abs() < 1e-6);
            }
        }
    }

    fn softmax_of(row: &[f64], support: &[usize], n: usize) -> Tensor<f64> {
        let mut tape = Tape::<f64>::new();
        let s = support.len();
        let scores = tape.constant(Tensor::from_fn([s, s], |i| row[i % s]));
        let x = tape.constant(Tensor::zeros([n, 1]));
        let sim = SimilarityScores {
            support: support.to_vec(),
            num_nodes: n,
            nodes: x,
            scores,
        };
        row_softmax(&mut tape, &sim).unwrap().to_dense(&tape)
    }

    #[test]
    fn softmax_rows_known_values() {
        let a = softmax_of(&[0.3; 4], &[0, 1, 2, 3], 4);
        assert!(a.data().iter().all(|&v| (v - 0.25).abs() < 1e-12));

        // exp(k)/Σexp for k = 1,2,3 evaluated at high precision
        let a = softmax_of(&[1.0, 2.0, 3.0], &[1, 2, 4], 5);
        let row = &a.data()[5..10];
        let want = [0.0, 0.090_030_573_2, 0.244_728_471_1, 0.0, 0.665_240_955_8];
        for (x, y) in row.iter().zip(want) {
            assert!((x - y).abs() < 1e-4);
        }
        assert!(a.data()[..5].iter().all(|&v| v == 0.0));

        let a = softmax_of(&[-40.0], &[2], 3);
        assert_eq!(a.data()[2 * 3 + 2], 1.0);
        assert_eq!(a.sum(), 1.0);
    }
}
