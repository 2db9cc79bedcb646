//! Class-wise dynamic graph convolution.
//!
//! For every class `m`, the nodes in that class's support set form a graph whose
//! adjacency is the masked row-softmax of learned pairwise similarities. One graph
//! convolution per class with a class-specific weight produces an `M×C×N` stack, a
//! 1×1 convolution aggregates it back to `C` channels, and a second 1×1 convolution
//! fuses the result with the input feature.

use std::str::FromStr;

use crate::error::{Error, Result};
use crate::graph::{row_softmax, similarity_scores, ClassAdjacency, SampledSet};
use crate::params::{Bound, ParamId, Params};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{ConvGeometry, Tape, Var};
use crate::tensor::Tensor;

/// How the refined feature is combined with the input feature.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Fusion {
    /// Channel concatenation to `2C`, then a 1×1 convolution to `C`.
    #[default]
    Concat,
    /// Elementwise sum, then a 1×1 convolution `C → C`.
    Sum,
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "concat" => Ok(Fusion::Concat),
            "sum" => Ok(Fusion::Sum),
            other => Err(Error::Config(format!("unknown fusion mode `{other}`"))),
        }
    }
}

impl std::fmt::Display for Fusion {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Fusion::Concat => "concat",
            Fusion::Sum => "sum",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CdgcConfig {
    pub num_classes: usize,
    pub channels: usize,
    pub fusion: Fusion,
}

impl CdgcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 || self.channels < 1 {
            return Err(Error::Config(format!(
                "class-wise graph needs M >= 2 and C >= 1, got M={} C={}",
                self.num_classes, self.channels
            )));
        }
        Ok(())
    }
}

/// Parameter handles of one refinement module.
#[derive(Clone, Debug)]
pub struct Cdgc {
    groups: usize,
    channels: usize,
    fusion: Fusion,
    pub sim_w: ParamId,
    pub sim_w_prime: ParamId,
    pub group_weights: Vec<ParamId>,
    pub aggregation: ParamId,
    pub fusion_kernel: ParamId,
}

/// Output of class-wise reasoning before aggregation.
#[derive(Clone, Debug)]
pub struct ClassReasoning {
    /// `[M, C, N]`; slice `m` is zero outside `S_m` and entirely zero when `S_m` is empty.
    pub per_class: Var,
    /// Adjacency per class, `None` for empty classes.
    pub adjacency: Vec<Option<ClassAdjacency>>,
}

#[derive(Clone, Debug)]
pub struct RefinedFeature {
    /// `[M, C, N]`.
    pub per_class: Var,
    /// `[C, H, W]`.
    pub aggregated: Var,
    /// `[C, H, W]`.
    pub fused: Var,
    pub adjacency: Vec<Option<ClassAdjacency>>,
}

/// `relu(A · X · W)` for adjacency `A: [n, n]`, node features `X: [n, C]`, `W: [C, C']`.
pub fn graph_convolve<T: Real>(tape: &mut Tape<T>, a: Var, x_nodes: Var, w: Var) -> Result<Var> {
    let ax = tape.matmul(a, x_nodes)?;
    let axw = tape.matmul(ax, w)?;
    Ok(tape.relu(axw))
}

impl Cdgc {
    /// Class-wise module: one graph and one group weight per class.
    pub fn class_wise<T: Real>(
        cfg: &CdgcConfig,
        params: &mut Params<T>,
        rng: &mut Rng,
        prefix: &str,
    ) -> Result<Self> {
        cfg.validate()?;
        Ok(Self::build(cfg.num_classes, cfg.channels, cfg.fusion, params, rng, prefix))
    }

    /// A single graph over all nodes with one weight, the unmasked comparator.
    pub fn plain<T: Real>(
        channels: usize,
        fusion: Fusion,
        params: &mut Params<T>,
        rng: &mut Rng,
        prefix: &str,
    ) -> Result<Self> {
        if channels == 0 {
            return Err(Error::Config("graph module needs C >= 1".into()));
        }
        Ok(Self::build(1, channels, fusion, params, rng, prefix))
    }

    fn build<T: Real>(
        groups: usize,
        c: usize,
        fusion: Fusion,
        params: &mut Params<T>,
        rng: &mut Rng,
        prefix: &str,
    ) -> Self {
        let sim_w = params.add_uniform(format!("{prefix}.sim_w"), &[c, c], c, c, rng);
        let sim_w_prime = params.add_uniform(format!("{prefix}.sim_w_prime"), &[c, c], c, c, rng);
        let group_weights = (0..groups)
            .map(|m| params.add_uniform(format!("{prefix}.group{m}"), &[c, c], c, c, rng))
            .collect();
        let aggregation = params.add_uniform(
            format!("{prefix}.aggregate"),
            &[c, groups * c, 1, 1],
            groups * c,
            c,
            rng,
        );
        let fused_in = match fusion {
            Fusion::Concat => 2 * c,
            Fusion::Sum => c,
        };
        let fusion_kernel =
            params.add_uniform(format!("{prefix}.fuse"), &[c, fused_in, 1, 1], fused_in, c, rng);
        Self {
            groups,
            channels: c,
            fusion,
            sim_w,
            sim_w_prime,
            group_weights,
            aggregation,
            fusion_kernel,
        }
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn fusion(&self) -> Fusion {
        self.fusion
    }

    pub fn forward<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        sampled: &SampledSet,
    ) -> Result<RefinedFeature> {
        let [_, h, w] = tape.value(x).dims3("cdgc input")?;
        let reasoning = self.class_wise_reason(tape, bound, x, sampled)?;
        let aggregated = self.aggregate_classes(tape, bound, reasoning.per_class, h, w)?;
        let fused = self.fuse(tape, bound, x, aggregated)?;
        Ok(RefinedFeature {
            per_class: reasoning.per_class,
            aggregated,
            fused,
            adjacency: reasoning.adjacency,
        })
    }

    /// Graph reasoning on each class's support, stacked to `[M, C, N]`.
    ///
    /// The input feature is shared across classes; each class only reads the rows of
    /// its own support, so no `M`-fold copy is made.
    pub fn class_wise_reason<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        x: Var,
        sampled: &SampledSet,
    ) -> Result<ClassReasoning> {
        let [c, h, w] = tape.value(x).dims3("class_wise_reason")?;
        let n = h * w;
        if c != self.channels {
            return Err(Error::Shape {
                op: "class_wise_reason channels",
                lhs: vec![c, h, w],
                rhs: vec![self.channels],
            });
        }
        if sampled.num_nodes() != n || sampled.num_classes() != self.groups {
            return Err(Error::Shape {
                op: "class_wise_reason node sets",
                lhs: vec![self.groups, n],
                rhs: vec![sampled.num_classes(), sampled.num_nodes()],
            });
        }
        let flat = tape.reshape(x, [c, n])?;
        let x_nodes = tape.transpose(flat)?;
        let mut slices = Vec::with_capacity(self.groups);
        let mut adjacency = Vec::with_capacity(self.groups);
        for m in 0..self.groups {
            let support = sampled.class(m);
            let scores = match similarity_scores(
                tape,
                x_nodes,
                bound.var(self.sim_w),
                bound.var(self.sim_w_prime),
                support,
            ) {
                Ok(s) => s,
                Err(Error::EmptyClass(_)) => {
                    slices.push(tape.constant(Tensor::zeros([c, n])));
                    adjacency.push(None);
                    continue;
                }
                Err(e) => return Err(e),
            };
            let adj = row_softmax(tape, &scores)?;
            let z = graph_convolve(tape, adj.weights, adj.nodes, bound.var(self.group_weights[m]))?;
            let placed = tape.scatter_rows(z, support, n)?;
            slices.push(tape.transpose(placed)?);
            adjacency.push(Some(adj));
        }
        let stacked = tape.concat(&slices, 0)?;
        let per_class = tape.reshape(stacked, [self.groups, c, n])?;
        Ok(ClassReasoning {
            per_class,
            adjacency,
        })
    }

    /// 1×1 convolution of the `(M·C)×H×W` view of `per_class` down to `C` channels.
    pub fn aggregate_classes<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        per_class: Var,
        h: usize,
        w: usize,
    ) -> Result<Var> {
        let grid = tape.reshape(per_class, [self.groups * self.channels, h, w])?;
        tape.conv2d(grid, bound.var(self.aggregation), ConvGeometry::same(1, 1))
    }

    pub fn fuse<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        original: Var,
        refined: Var,
    ) -> Result<Var> {
        let combined = match self.fusion {
            Fusion::Concat => tape.concat(&[original, refined], 0)?,
            Fusion::Sum => tape.add(original, refined)?,
        };
        tape.conv2d(combined, bound.var(self.fusion_kernel), ConvGeometry::same(1, 1))
    }
}
