//! Toy dilated segmentation network: a size-preserving convolution trunk, a coarse
//! classifier, an auxiliary classifier on an intermediate layer, and the refined
//! classifier applied after graph refinement.

use crate::error::{Error, Result};
use crate::params::{Bound, ParamId, Params};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{ConvGeometry, Tape, Var};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub out_channels: usize,
    pub kernel: usize,
    pub dilation: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct BasicNetConfig {
    pub in_channels: usize,
    /// `C`; equals the last trunk layer's output channels.
    pub feature_channels: usize,
    pub num_classes: usize,
    pub trunk: Vec<ConvSpec>,
    /// Trunk layer whose activation feeds the auxiliary head.
    pub aux_tap: usize,
}

impl BasicNetConfig {
    /// Four 3×3 layers with dilations 1, 1, 2, 4 followed by a 1×1 reduction layer.
    pub fn toy(in_channels: usize, feature_channels: usize, num_classes: usize) -> Self {
        let conv = |kernel, dilation| ConvSpec {
            out_channels: feature_channels,
            kernel,
            dilation,
        };
        Self {
            in_channels,
            feature_channels,
            num_classes,
            trunk: vec![conv(3, 1), conv(3, 1), conv(3, 2), conv(3, 4), conv(1, 1)],
            aux_tap: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.trunk.is_empty() {
            return Err(Error::Config("trunk needs at least one layer".into()));
        }
        if self.aux_tap >= self.trunk.len() {
            return Err(Error::Config(format!(
                "aux_tap {} outside trunk of {} layers",
                self.aux_tap,
                self.trunk.len()
            )));
        }
        if let Some(bad) = self.trunk.iter().find(|l| l.kernel % 2 == 0 || l.dilation == 0) {
            return Err(Error::Config(format!(
                "trunk layer {bad:?} cannot preserve spatial size (needs an odd kernel)"
            )));
        }
        if self.trunk.last().map(|l| l.out_channels) != Some(self.feature_channels) {
            return Err(Error::Config(
                "last trunk layer must output feature_channels".into(),
            ));
        }
        if self.num_classes < 2 || self.in_channels == 0 {
            return Err(Error::Config("need M >= 2 and at least one input channel".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub geometry: ConvGeometry,
}

impl ConvLayer {
    fn new<T: Real>(
        params: &mut Params<T>,
        rng: &mut Rng,
        name: &str,
        cin: usize,
        spec: ConvSpec,
    ) -> Self {
        let k = spec.kernel;
        let kernel = params.add_uniform(
            format!("{name}.kernel"),
            &[spec.out_channels, cin, k, k],
            cin * k * k,
            spec.out_channels * k * k,
            rng,
        );
        let bias = params.add(format!("{name}.bias"), Tensor::zeros([spec.out_channels]));
        Self {
            kernel,
            bias,
            geometry: ConvGeometry::same(k, spec.dilation),
        }
    }

    pub fn forward<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, x: Var) -> Result<Var> {
        let y = tape.conv2d(x, bound.var(self.kernel), self.geometry)?;
        tape.channel_bias(y, bound.var(self.bias))
    }
}

#[derive(Clone, Debug)]
pub struct BasicNet {
    cfg: BasicNetConfig,
    pub trunk: Vec<ConvLayer>,
    pub coarse: ConvLayer,
    pub aux: ConvLayer,
    pub refined: ConvLayer,
}

impl BasicNet {
    pub fn new<T: Real>(cfg: BasicNetConfig, params: &mut Params<T>, rng: &mut Rng) -> Result<Self> {
        cfg.validate()?;
        let mut cin = cfg.in_channels;
        let mut trunk = Vec::with_capacity(cfg.trunk.len());
        for (i, spec) in cfg.trunk.iter().enumerate() {
            trunk.push(ConvLayer::new(params, rng, &format!("trunk{i}"), cin, *spec));
            cin = spec.out_channels;
        }
        let head = |out_channels| ConvSpec {
            out_channels,
            kernel: 1,
            dilation: 1,
        };
        let c = cfg.feature_channels;
        let m = cfg.num_classes;
        let aux_in = cfg.trunk[cfg.aux_tap].out_channels;
        let coarse = ConvLayer::new(params, rng, "coarse_head", c, head(m));
        let aux = ConvLayer::new(params, rng, "aux_head", aux_in, head(m));
        let refined = ConvLayer::new(params, rng, "refined_head", c, head(m));
        Ok(Self {
            cfg,
            trunk,
            coarse,
            aux,
            refined,
        })
    }

    pub fn config(&self) -> &BasicNetConfig {
        &self.cfg
    }

    /// Runs the trunk with ReLU between layers. Returns `(feature, aux_feature)`.
    pub fn forward_trunk<T: Real>(
        &self,
        tape: &mut Tape<T>,
        bound: &Bound,
        image: Var,
    ) -> Result<(Var, Var)> {
        let [cin, h, w] = tape.value(image).dims3("forward_trunk")?;
        if cin != self.cfg.in_channels {
            return Err(Error::Shape {
                op: "forward_trunk",
                lhs: vec![cin, h, w],
                rhs: vec![self.cfg.in_channels],
            });
        }
        let mut x = image;
        let mut aux = None;
        let last = self.trunk.len() - 1;
        for (i, layer) in self.trunk.iter().enumerate() {
            x = layer.forward(tape, bound, x)?;
            if i != last {
                x = tape.relu(x);
            }
            if i == self.cfg.aux_tap {
                aux = Some(x);
            }
        }
        Ok((x, aux.expect("aux_tap validated")))
    }

    pub fn coarse_head<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, feature: Var) -> Result<Var> {
        self.coarse.forward(tape, bound, feature)
    }

    pub fn aux_head<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, aux: Var) -> Result<Var> {
        self.aux.forward(tape, bound, aux)
    }

    pub fn refined_head<T: Real>(&self, tape: &mut Tape<T>, bound: &Bound, fused: Var) -> Result<Var> {
        self.refined.forward(tape, bound, fused)
    }
}
