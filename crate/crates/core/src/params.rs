//! Named parameter storage, initialization, and checkpoint directories.
//!
//! A checkpoint directory holds `manifest.txt` (one `name dim dim ...` line per
//! parameter, in registration order) and one `<name>.cdt` file per parameter.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::cdt;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::rng::Rng;
use crate::tape::{Gradients, Tape, Var};
use crate::tensor::Tensor;

pub const MANIFEST: &str = "manifest.txt";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, Default)]
pub struct Params<T: Real = f32> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
}

/// Tape handles for every parameter of one forward pass.
#[derive(Clone, Debug)]
pub struct Bound(Vec<Var>);

impl Bound {
    /// Wraps vars recorded in parameter registration order.
    pub fn from_vars(vars: Vec<Var>) -> Self {
        Self(vars)
    }

    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

impl<T: Real> Params<T> {
    pub fn new() -> Self {
        Self {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn add(&mut self, name: impl Into<String>, mut tensor: Tensor<T>) -> ParamId {
        let name = name.into();
        debug_assert!(!self.names.contains(&name), "duplicate parameter {name}");
        tensor.set_requires_grad(true);
        self.names.push(name);
        self.tensors.push(tensor);
        ParamId(self.tensors.len() - 1)
    }

    /// Adds a tensor drawn uniformly from `[-s, s]`, `s = sqrt(6 / (fan_in + fan_out))`.
    pub fn add_uniform(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        fan_in: usize,
        fan_out: usize,
        rng: &mut Rng,
    ) -> ParamId {
        let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
        let t = Tensor::from_fn(shape.to_vec(), |_| T::of(rng.uniform_range(-bound, bound)));
        self.add(name, t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor<T>)> {
        self.names.iter().map(String::as_str).zip(self.tensors.iter_mut())
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }

    /// Records every parameter as a gradient-tracked leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound(self.tensors.iter().map(|t| tape.leaf(t.clone())).collect())
    }

    /// Stores the gradient of each bound parameter in its grad slot (zeros if unreached).
    pub fn store_grads(&mut self, bound: &Bound, grads: &Gradients<T>) {
        for (t, &v) in self.tensors.iter_mut().zip(&bound.0) {
            let g = grads.get_or_zeros(v, t.len());
            t.set_grad(g).expect("gradient length matches parameter");
        }
    }

    pub fn cast<U: Real>(&self) -> Params<U> {
        Params {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(Tensor::cast).collect(),
        }
    }

    pub fn zero_all(&mut self) {
        for t in &mut self.tensors {
            t.data_mut().iter_mut().for_each(|v| *v = T::zero());
        }
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir)?;
        let mut manifest = String::new();
        for (name, t) in self.iter() {
            manifest.push_str(name);
            for d in t.shape() {
                write!(manifest, " {d}").expect("string write");
            }
            manifest.push('\n');
            cdt::write(dir.join(format!("{name}.cdt")), t)?;
        }
        fs::write(dir.join(MANIFEST), manifest)?;
        Ok(())
    }

    /// Overwrites every parameter from a checkpoint directory. Names and shapes must match.
    pub fn load_into(&mut self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let manifest_path = dir.join(MANIFEST);
        let manifest = fs::read_to_string(&manifest_path)?;
        let format_err = |reason: String| Error::Format {
            path: manifest_path.clone(),
            reason,
        };
        let entries: Vec<&str> = manifest.lines().filter(|l| !l.trim().is_empty()).collect();
        if entries.len() != self.len() {
            return Err(format_err(format!(
                "{} entries, model has {} parameters",
                entries.len(),
                self.len()
            )));
        }
        for (line, id) in entries.into_iter().zip(0..self.len()) {
            let mut fields = line.split_whitespace();
            let name = fields.next().unwrap_or_default();
            let dims = fields
                .map(str::parse::<usize>)
                .collect::<std::result::Result<Vec<_>, _>>()
                .map_err(|e| format_err(format!("bad dims for {name}: {e}")))?;
            if name != self.names[id] || dims != self.tensors[id].shape() {
                return Err(format_err(format!(
                    "entry `{line}` does not match parameter {} {:?}",
                    self.names[id],
                    self.tensors[id].shape()
                )));
            }
            let stored = cdt::read(dir.join(format!("{name}.cdt")))?;
            if stored.shape() != dims {
                return Err(format_err(format!("tensor file for {name} has wrong shape")));
            }
            let t = &mut self.tensors[id];
            for (dst, &src) in t.data_mut().iter_mut().zip(stored.data()) {
                *dst = T::of(src as f64);
            }
            t.clear_grad();
        }
        Ok(())
    }
}
