//! Class-wise dynamic graph convolution for coarse-to-fine semantic segmentation.
//!
//! A small differentiable tensor library ([`tape`]) carries a toy dilated
//! segmentation network ([`net`]) whose coarse prediction selects per-class node
//! sets ([`graph`]) for graph reasoning ([`cdgc`]); the refined feature is fused
//! back and classified again. [`model`] wires the pipeline and training step,
//! [`experiment`] runs configured trainings and reports mIoU ([`metrics`]) on
//! synthetic data ([`data`]).

pub mod cdgc;
pub mod cdt;
pub mod data;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod gradsuite;
pub mod graph;
pub mod loss;
pub mod metrics;
pub mod model;
pub mod net;
pub mod optim;
pub mod params;
pub mod real;
pub mod rng;
pub mod tape;
pub mod tensor;

pub use error::{Error, Result};
pub use real::Real;
pub use rng::Rng;
pub use tape::{Tape, Var};
pub use tensor::Tensor;
