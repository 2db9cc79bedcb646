//! Reverse-mode differentiation over a recorded operation tape.
//!
//! Every operation appends a node holding its output value and the inputs it read.
//! [`Tape::backward`] walks the nodes in reverse and accumulates gradients by addition.

use crate::error::{shape_err, Error, Result};
use crate::real::Real;
use crate::tensor::{transpose_data, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Geometry of a 2-D cross-correlation.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub dilation: usize,
    pub padding: usize,
}

impl ConvGeometry {
    /// Stride 1 with the padding that preserves spatial size for an odd kernel.
    pub fn same(kernel: usize, dilation: usize) -> Self {
        Self {
            stride: 1,
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> Result<usize> {
        if self.stride == 0 || self.dilation == 0 {
            return Err(Error::Config("stride and dilation must be positive".into()));
        }
        let span = self.dilation * (kernel - 1) + 1;
        let padded = input + 2 * self.padding;
        if padded < span || !(padded - span).is_multiple_of(self.stride) {
            return Err(Error::Config(format!(
                "conv2d output size is not integral: input {input}, kernel {kernel}, {self:?}"
            )));
        }
        Ok((padded - span) / self.stride + 1)
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    MatMul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Reshape(Var),
    Transpose(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, k: Var, geom: ConvGeometry },
    ChannelBias(Var, Var),
    GatherRows { x: Var, rows: Vec<usize> },
    ScatterRows { x: Var, rows: Vec<usize> },
    SoftmaxRows(Var),
    PixelCrossEntropy { logits: Var, targets: Vec<(usize, usize)> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, or zeros of length `len` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<T> {
        self.get(v).map_or_else(|| vec![T::zero(); len], <[T]>::to_vec)
    }
}

/// Recorded computation. One tape per forward/backward pass.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let tracked = tensor.requires_grad();
        self.nodes.push(Node {
            value: tensor,
            op: Op::Leaf,
            tracked,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, mut tensor: Tensor<T>) -> Var {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var> {
        let name = match op {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            _ => "mul",
        };
        self.same_shape(name, a, b)?;
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    fn map(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let value = Tensor::new(self.shape(a).to_vec(), data).expect("same shape");
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        self.map(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        self.map(a, Op::AddScalar(a), |x| x + s)
    }

    /// ReLU with the subgradient at zero taken as zero.
    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, Op::Relu(a), |x| if x > T::zero() { x } else { T::zero() })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.map(a, Op::Exp(a), T::exp);
        if !self.value(v).is_finite() {
            return Err(Error::NonFinite("exp"));
        }
        Ok(v)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.data(a).iter().any(|&x| x <= T::zero()) {
            return Err(Error::Usage("log of a non-positive value".into()));
        }
        Ok(self.map(a, Op::Log(a), T::ln))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        let (p, q, r) = match (sa, sb) {
            ([p, q], [q2, r]) if q == q2 => (*p, *q, *r),
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        let mut out = vec![T::zero(); p * r];
        T::gemm(p, q, r, self.data(a), false, self.data(b), false, &mut out, false);
        let value = Tensor::new([p, r], out)?;
        Ok(self.push(value, Op::MatMul(a, b), &[a, b]))
    }

    pub fn reshape(&mut self, a: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose()?;
        Ok(self.push(value, Op::Transpose(a), &[a]))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Usage("concat of zero tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                data.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = T::of(self.value(a).len() as f64);
        let s = self.value(a).sum() / n;
        self.push(Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Cross-correlation of `x: [C_in, H, W]` with `k: [C_out, C_in, s, s]`, zero padded.
    pub fn conv2d(&mut self, x: Var, k: Var, geom: ConvGeometry) -> Result<Var> {
        let [cin, h, w] = self.value(x).dims3("conv2d input")?;
        let ks = self.shape(k).to_vec();
        let (cout, ksize) = match ks[..] {
            [co, ci, a, b] if ci == cin && a == b && a % 2 == 1 => (co, a),
            _ => return Err(shape_err("conv2d kernel", &ks, &[0, cin, 0, 0])),
        };
        let oh = geom.output_size(h, ksize)?;
        let ow = geom.output_size(w, ksize)?;
        let layout = ConvLayout {
            cin,
            h,
            w,
            ksize,
            oh,
            ow,
            geom,
        };
        let rows = cin * ksize * ksize;
        let mut out = vec![T::zero(); cout * oh * ow];
        if layout.is_pointwise() {
            T::gemm(cout, rows, oh * ow, self.data(k), false, self.data(x), false, &mut out, false);
        } else {
            let cols = layout.im2col(self.data(x));
            T::gemm(cout, rows, oh * ow, self.data(k), false, &cols, false, &mut out, false);
        }
        let value = Tensor::new([cout, oh, ow], out)?;
        Ok(self.push(value, Op::Conv2d { x, k, geom }, &[x, k]))
    }

    /// Adds `b[c]` to every pixel of channel `c` of `x: [C, H, W]`.
    pub fn channel_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let [c, h, w] = self.value(x).dims3("channel_bias")?;
        if self.shape(b) != [c] {
            return Err(shape_err("channel_bias", self.shape(x), self.shape(b)));
        }
        let hw = h * w;
        let bias = self.data(b);
        let data = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| v + bias[i / hw])
            .collect();
        let value = Tensor::new([c, h, w], data)?;
        Ok(self.push(value, Op::ChannelBias(x, b), &[x, b]))
    }

    /// Selects rows of a matrix `x: [N, D]` into `[rows.len(), D]`.
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let [n, d] = self.value(x).dims2("gather_rows")?;
        if rows.is_empty() || rows.iter().any(|&r| r >= n) {
            return Err(Error::Usage(format!("gather_rows: bad row set for {n} rows")));
        }
        let src = self.data(x);
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            data.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let value = Tensor::new([rows.len(), d], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Places the rows of `x: [rows.len(), D]` at `rows` in a zero `[n, D]` matrix.
    pub fn scatter_rows(&mut self, x: Var, rows: &[usize], n: usize) -> Result<Var> {
        let [m, d] = self.value(x).dims2("scatter_rows")?;
        if m != rows.len() || rows.iter().any(|&r| r >= n) {
            return Err(shape_err("scatter_rows", self.shape(x), &[rows.len(), n]));
        }
        let mut data = vec![T::zero(); n * d];
        let src = self.data(x);
        for (i, &r) in rows.iter().enumerate() {
            for j in 0..d {
                data[r * d + j] = data[r * d + j] + src[i * d + j];
            }
        }
        let value = Tensor::new([n, d], data)?;
        Ok(self.push(
            value,
            Op::ScatterRows {
                x,
                rows: rows.to_vec(),
            },
            &[x],
        ))
    }

    /// Numerically stable softmax over each row of a matrix.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let [r, c] = self.value(x).dims2("softmax_rows")?;
        let mut data = self.data(x).to_vec();
        for row in data.chunks_mut(c) {
            softmax_in_place(row);
        }
        let value = Tensor::new([r, c], data)?;
        if !value.is_finite() {
            return Err(Error::NonFinite("softmax_rows"));
        }
        Ok(self.push(value, Op::SoftmaxRows(x), &[x]))
    }

    /// Mean over `targets` of `-log softmax(logits[:, pixel])[class]`.
    ///
    /// `logits` is `[M, H, W]`; each target is a `(pixel, class)` pair with `pixel < H·W`.
    pub fn pixel_cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let [m, h, w] = self.value(logits).dims3("pixel_cross_entropy")?;
        let hw = h * w;
        if targets.is_empty() {
            return Err(Error::Usage("cross entropy over zero pixels".into()));
        }
        if let Some(&(p, c)) = targets.iter().find(|&&(p, c)| p >= hw || c >= m) {
            return Err(Error::Data(format!(
                "cross entropy target (pixel {p}, class {c}) outside {m}×{hw}"
            )));
        }
        let data = self.data(logits);
        let mut total = 0.0f64;
        let mut column = vec![T::zero(); m];
        for &(p, c) in targets {
            for (k, slot) in column.iter_mut().enumerate() {
                *slot = data[k * hw + p];
            }
            total += (log_sum_exp(&column) - column[c]).as_f64();
        }
        let loss = T::of(total / targets.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::PixelCrossEntropy {
                logits,
                targets: targets.to_vec(),
            },
            &[logits],
        ))
    }

    /// Reverse pass from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape(output)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[output.0] = Some(vec![T::one()]);
        for idx in (0..=output.0).rev() {
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !matches!(node.op, Op::Leaf) || !node.tracked {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(grads, *a, |acc| add_into(acc, g));
                self.accum(grads, *b, |acc| add_into(acc, g));
            }
            Op::Sub(a, b) => {
                self.accum(grads, *a, |acc| add_into(acc, g));
                self.accum(grads, *b, |acc| {
                    acc.iter_mut().zip(g).for_each(|(x, &y)| *x = *x - y)
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (self.data(*a), self.data(*b));
                self.accum(grads, *a, |acc| {
                    for ((x, &gy), &bv) in acc.iter_mut().zip(g).zip(db) {
                        *x = *x + gy * bv;
                    }
                });
                self.accum(grads, *b, |acc| {
                    for ((x, &gy), &av) in acc.iter_mut().zip(g).zip(da) {
                        *x = *x + gy * av;
                    }
                });
            }
            Op::Scale(a, s) => self.accum(grads, *a, |acc| {
                acc.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y * *s)
            }),
            Op::AddScalar(a) | Op::Reshape(a) => self.accum(grads, *a, |acc| add_into(acc, g)),
            Op::Relu(a) => {
                let input = self.data(*a);
                self.accum(grads, *a, |acc| {
                    for ((x, &gy), &v) in acc.iter_mut().zip(g).zip(input) {
                        if v > T::zero() {
                            *x = *x + gy;
                        }
                    }
                });
            }
            Op::Exp(a) => self.accum(grads, *a, |acc| {
                for ((x, &gy), &y) in acc.iter_mut().zip(g).zip(out) {
                    *x = *x + gy * y;
                }
            }),
            Op::Log(a) => {
                let input = self.data(*a);
                self.accum(grads, *a, |acc| {
                    for ((x, &gy), &v) in acc.iter_mut().zip(g).zip(input) {
                        *x = *x + gy / v;
                    }
                });
            }
            Op::MatMul(a, b) => {
                let [p, q] = self.value(*a).dims2("matmul").expect("recorded");
                let r = self.shape(*b)[1];
                self.accum(grads, *a, |acc| {
                    T::gemm(p, r, q, g, false, self.data(*b), true, acc, true)
                });
                self.accum(grads, *b, |acc| {
                    T::gemm(q, p, r, self.data(*a), true, g, false, acc, true)
                });
            }
            Op::Transpose(a) => {
                let [rows, cols] = self.value(*a).dims2("transpose").expect("recorded");
                // g is cols×rows
                let gt = transpose_data(cols, rows, g);
                self.accum(grads, *a, |acc| add_into(acc, &gt));
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let chunk = self.shape(p)[*axis] * inner;
                    self.accum(grads, p, |acc| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            add_into(&mut acc[o * chunk..(o + 1) * chunk], src);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Sum(a) => self.accum(grads, *a, |acc| {
                acc.iter_mut().for_each(|x| *x = *x + g[0])
            }),
            Op::Mean(a) => {
                let share = g[0] / T::of(self.value(*a).len() as f64);
                self.accum(grads, *a, |acc| acc.iter_mut().for_each(|x| *x = *x + share))
            }
            Op::Conv2d { x, k, geom } => self.conv2d_backward(*x, *k, *geom, g, grads),
            Op::ChannelBias(x, b) => {
                let [_, h, w] = self.value(*x).dims3("channel_bias").expect("recorded");
                self.accum(grads, *x, |acc| add_into(acc, g));
                self.accum(grads, *b, |acc| {
                    for (c, chunk) in g.chunks(h * w).enumerate() {
                        acc[c] = acc[c] + chunk.iter().copied().sum::<T>();
                    }
                });
            }
            Op::GatherRows { x, rows } => {
                let d = node.value.shape()[1];
                self.accum(grads, *x, |acc| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut acc[r * d..(r + 1) * d], &g[i * d..(i + 1) * d]);
                    }
                });
            }
            Op::ScatterRows { x, rows } => {
                let d = node.value.shape()[1];
                self.accum(grads, *x, |acc| {
                    for (i, &r) in rows.iter().enumerate() {
                        add_into(&mut acc[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let c = node.value.shape()[1];
                self.accum(grads, *x, |acc| {
                    for ((a, gy), y) in acc.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let dot: T = gy.iter().zip(y).map(|(&u, &v)| u * v).sum();
                        for ((x, &u), &v) in a.iter_mut().zip(gy).zip(y) {
                            *x = *x + v * (u - dot);
                        }
                    }
                });
            }
            Op::PixelCrossEntropy { logits, targets } => {
                let [m, h, w] = self.value(*logits).dims3("ce").expect("recorded");
                let hw = h * w;
                let data = self.data(*logits);
                let share = g[0] / T::of(targets.len() as f64);
                self.accum(grads, *logits, |acc| {
                    let mut column = vec![T::zero(); m];
                    for &(p, c) in targets {
                        for (k, slot) in column.iter_mut().enumerate() {
                            *slot = data[k * hw + p];
                        }
                        softmax_in_place(&mut column);
                        column[c] = column[c] - T::one();
                        for (k, &d) in column.iter().enumerate() {
                            acc[k * hw + p] = acc[k * hw + p] + share * d;
                        }
                    }
                });
            }
        }
    }

    fn conv2d_backward(
        &self,
        x: Var,
        k: Var,
        geom: ConvGeometry,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let [cin, h, w] = self.value(x).dims3("conv2d").expect("recorded");
        let ks = self.shape(k);
        let (cout, ksize) = (ks[0], ks[2]);
        let oh = geom.output_size(h, ksize).expect("recorded");
        let ow = geom.output_size(w, ksize).expect("recorded");
        let layout = ConvLayout {
            cin,
            h,
            w,
            ksize,
            oh,
            ow,
            geom,
        };
        let rows = cin * ksize * ksize;
        let pix = oh * ow;
        let pointwise = layout.is_pointwise();
        if self.nodes[k.0].tracked {
            let owned;
            let cols: &[T] = if pointwise {
                self.data(x)
            } else {
                owned = layout.im2col(self.data(x));
                &owned
            };
            self.accum(grads, k, |acc| {
                T::gemm(cout, pix, rows, g, false, cols, true, acc, true)
            });
        }
        if self.nodes[x.0].tracked {
            let kernel = self.data(k);
            self.accum(grads, x, |acc| {
                if pointwise {
                    T::gemm(rows, cout, pix, kernel, true, g, false, acc, true);
                } else {
                    let mut dcols = vec![T::zero(); rows * pix];
                    T::gemm(rows, cout, pix, kernel, true, g, false, &mut dcols, false);
                    layout.col2im_add(&dcols, acc);
                }
            });
        }
    }

    fn accum(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].tracked {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); len]);
        f(slot);
    }
}

fn add_into<T: Real>(acc: &mut [T], g: &[T]) {
    acc.iter_mut().zip(g).for_each(|(x, &y)| *x = *x + y);
}

pub(crate) fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<T>().ln()
}

pub(crate) fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut total = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total = total + *v;
    }
    for v in row.iter_mut() {
        *v = *v / total;
    }
}

struct ConvLayout {
    cin: usize,
    h: usize,
    w: usize,
    ksize: usize,
    oh: usize,
    ow: usize,
    geom: ConvGeometry,
}

impl ConvLayout {
    fn is_pointwise(&self) -> bool {
        self.ksize == 1 && self.geom.stride == 1 && self.geom.padding == 0
    }

    /// Calls `f(col_row, out_pixel, in_index)` for every in-bounds tap.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize, usize)) {
        let ConvGeometry {
            stride,
            dilation,
            padding,
        } = self.geom;
        for ci in 0..self.cin {
            for ky in 0..self.ksize {
                for kx in 0..self.ksize {
                    let row = (ci * self.ksize + ky) * self.ksize + kx;
                    for oy in 0..self.oh {
                        let iy = (oy * stride + ky * dilation) as isize - padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        for ox in 0..self.ow {
                            let ix = (ox * stride + kx * dilation) as isize - padding as isize;
                            if ix < 0 || ix >= self.w as isize {
                                continue;
                            }
                            let input = (ci * self.h + iy as usize) * self.w + ix as usize;
                            f(row, oy * self.ow + ox, input);
                        }
                    }
                }
            }
        }
    }

    fn im2col<T: Real>(&self, x: &[T]) -> Vec<T> {
        let pix = self.oh * self.ow;
        let mut cols = vec![T::zero(); self.cin * self.ksize * self.ksize * pix];
        self.for_each_tap(|row, p, i| cols[row * pix + p] = x[i]);
        cols
    }

    fn col2im_add<T: Real>(&self, cols: &[T], acc: &mut [T]) {
        let pix = self.oh * self.ow;
        self.for_each_tap(|row, p, i| acc[i] = acc[i] + cols[row * pix + p]);
    }
}
