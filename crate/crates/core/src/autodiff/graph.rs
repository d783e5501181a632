//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node holding its output value. Nodes are only
//! ever appended, so a node's inputs always precede it and walking the tape
//! backwards visits operations in exact reverse execution order.

use super::kernels::{col2im, gemm, im2col, ConvGeom, MatRef};
use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv2d { input: Var, weight: Var, bias: Var, pad: usize },
    ConvTranspose2d { input: Var, weight: Var, bias: Var },
    MaxPool2 { input: Var, argmax: Vec<u32> },
    Relu { input: Var },
    Concat { inputs: Vec<Var> },
    SliceChannels { input: Var, start: usize },
    Mul { a: Var, b: Var },
    Softmax { input: Var },
    WeightedCe { logits: Var, target: Vec<u8>, weights: Vec<T>, valid: Vec<bool>, count: usize },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    grad: Option<Vec<T>>,
    requires_grad: bool,
    op: Op<T>,
}

#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

fn shape_err<T>(msg: String) -> Result<T> {
    Err(Error::Shape(msg))
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Mutable access to a node's value. Only meaningful for forward-only
    /// use (e.g. simulated quantization of activations); editing a value
    /// that a backward rule later reads invalidates its gradient.
    pub fn value_mut(&mut self, v: Var) -> &mut Tensor<T> {
        &mut self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    // ---------------------------------------------------------------------
    // Operations
    // ---------------------------------------------------------------------

    /// Stride-1 cross-correlation with zero padding.
    /// `input [N,Cin,H,W]`, `weight [Cout,Cin,k,k]`, `bias [Cout]`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, pad: usize) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let [n, cin, h, wd] = x.dims4()?;
        let [cout, wcin, kh, kw] = w.dims4()?;
        if wcin != cin {
            return shape_err(format!("conv2d: input has {cin} channels, weight expects {wcin}"));
        }
        if kh != kw || kh % 2 == 0 {
            return shape_err(format!("conv2d: kernel must be square and odd, got {kh}x{kw}"));
        }
        if self.value(bias).numel() != cout {
            return shape_err(format!("conv2d: bias has {} values for {cout} outputs", self.value(bias).numel()));
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw {
            return shape_err("conv2d: kernel larger than padded input".into());
        }
        let g = ConvGeom { channels: cin, h, w: wd, k: kh, pad, oh: h + 2 * pad - kh + 1, ow: wd + 2 * pad - kw + 1 };
        let plane = g.oh * g.ow;
        let kdim = g.col_rows();
        let mut out = vec![T::zero(); n * cout * plane];
        let direct = kh == 1 && pad == 0;
        let mut cols = if direct { Vec::new() } else { vec![T::zero(); kdim * plane] };
        let bias_v = self.value(bias).data();
        for s in 0..n {
            let xs = &x.data()[s * cin * h * wd..(s + 1) * cin * h * wd];
            let patches: &[T] = if direct {
                xs
            } else {
                im2col(xs, &g, &mut cols);
                &cols
            };
            let os = &mut out[s * cout * plane..(s + 1) * cout * plane];
            gemm(MatRef::row_major(w.data(), cout, kdim), MatRef::row_major(patches, kdim, plane), T::zero(), os);
            for (co, row) in os.chunks_exact_mut(plane).enumerate() {
                let b = bias_v[co];
                row.iter_mut().for_each(|v| *v += b);
            }
        }
        let value = Tensor::from_vec(&[n, cout, g.oh, g.ow], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(value, rg, Op::Conv2d { input, weight, bias, pad }))
    }

    /// Stride-2, 2×2 transposed convolution (exact ×2 upsampling).
    /// `input [N,Cin,H,W]`, `weight [Cin,Cout,2,2]`, `bias [Cout]`.
    pub fn conv_transpose2d(&mut self, input: Var, weight: Var, bias: Var) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let [n, cin, h, wd] = x.dims4()?;
        let [wcin, cout, kh, kw] = w.dims4()?;
        if wcin != cin || kh != 2 || kw != 2 {
            return shape_err(format!(
                "conv_transpose2d: weight {:?} incompatible with {cin} input channels (need [Cin,Cout,2,2])",
                w.shape()
            ));
        }
        if self.value(bias).numel() != cout {
            return shape_err(format!("conv_transpose2d: bias has {} values for {cout} outputs", self.value(bias).numel()));
        }
        let plane = h * wd;
        let (oh, ow) = (2 * h, 2 * wd);
        let mut out = vec![T::zero(); n * cout * oh * ow];
        let mut tmp = vec![T::zero(); cout * 4 * plane];
        let bias_v = self.value(bias).data();
        for s in 0..n {
            let xs = &x.data()[s * cin * plane..(s + 1) * cin * plane];
            gemm(
                MatRef::row_major(w.data(), cin, cout * 4).t(),
                MatRef::row_major(xs, cin, plane),
                T::zero(),
                &mut tmp,
            );
            let os = &mut out[s * cout * oh * ow..(s + 1) * cout * oh * ow];
            for co in 0..cout {
                for a in 0..2 {
                    for b in 0..2 {
                        let src = &tmp[(co * 4 + a * 2 + b) * plane..][..plane];
                        for i in 0..h {
                            let orow = &mut os[co * oh * ow + (2 * i + a) * ow..][..ow];
                            for j in 0..wd {
                                orow[2 * j + b] = src[i * wd + j] + bias_v[co];
                            }
                        }
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[n, cout, oh, ow], out)?;
        let rg = self.rg(&[input, weight, bias]);
        Ok(self.push(value, rg, Op::ConvTranspose2d { input, weight, bias }))
    }

    /// 2×2 max pooling with stride 2. Ties go to the first cell in row-major
    /// window order.
    pub fn maxpool2(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return shape_err(format!("maxpool2: spatial dims {h}x{w} must be even"));
        }
        let (oh, ow) = (h / 2, w / 2);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        let xd = x.data();
        for p in 0..n * c {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let idx = [
                        base + 2 * i * w + 2 * j,
                        base + 2 * i * w + 2 * j + 1,
                        base + (2 * i + 1) * w + 2 * j,
                        base + (2 * i + 1) * w + 2 * j + 1,
                    ];
                    let mut best = idx[0];
                    for &k in &idx[1..] {
                        if xd[k] > xd[best] {
                            best = k;
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best as u32);
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, oh, ow], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, rg, Op::MaxPool2 { input, argmax }))
    }

    pub fn relu(&mut self, input: Var) -> Result<Var> {
        let value = self.value(input).map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.rg(&[input]);
        Ok(self.push(value, rg, Op::Relu { input }))
    }

    /// Concatenation along the channel axis of 4-D tensors.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        let first = match inputs.first() {
            Some(&v) => self.value(v).dims4()?,
            None => return shape_err("concat_channels: no inputs".into()),
        };
        let [n, _, h, w] = first;
        let mut channels = Vec::with_capacity(inputs.len());
        for &v in inputs {
            let [vn, vc, vh, vw] = self.value(v).dims4()?;
            if (vn, vh, vw) != (n, h, w) {
                return shape_err(format!(
                    "concat_channels: shape {:?} does not match {:?} outside the channel axis",
                    self.value(v).shape(),
                    first
                ));
            }
            channels.push(vc);
        }
        let total: usize = channels.iter().sum();
        let plane = h * w;
        let mut out = Vec::with_capacity(n * total * plane);
        for s in 0..n {
            for (&v, &c) in inputs.iter().zip(&channels) {
                out.extend_from_slice(&self.value(v).data()[s * c * plane..(s + 1) * c * plane]);
            }
        }
        let value = Tensor::from_vec(&[n, total, h, w], out)?;
        let rg = self.rg(inputs);
        Ok(self.push(value, rg, Op::Concat { inputs: inputs.to_vec() }))
    }

    /// Channels `start..start + len` of a 4-D tensor.
    pub fn slice_channels(&mut self, input: Var, start: usize, len: usize) -> Result<Var> {
        let [n, c, h, w] = self.value(input).dims4()?;
        if start + len > c || len == 0 {
            return shape_err(format!("slice_channels: {start}..{} out of {c} channels", start + len));
        }
        let plane = h * w;
        let mut out = Vec::with_capacity(n * len * plane);
        let data = self.value(input).data();
        for s in 0..n {
            out.extend_from_slice(&data[(s * c + start) * plane..(s * c + start + len) * plane]);
        }
        let value = Tensor::from_vec(&[n, len, h, w], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, rg, Op::SliceChannels { input, start }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return shape_err(format!("mul: shapes {:?} and {:?} differ", av.shape(), bv.shape()));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
        let value = Tensor::from_vec(av.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, rg, Op::Mul { a, b }))
    }

    /// Softmax over the channel axis at every pixel.
    pub fn softmax_channels(&mut self, input: Var) -> Result<Var> {
        let x = self.value(input);
        let [n, c, h, w] = x.dims4()?;
        let plane = h * w;
        let mut out = vec![T::zero(); x.numel()];
        let xd = x.data();
        for s in 0..n {
            for p in 0..plane {
                let at = |k: usize| (s * c + k) * plane + p;
                let m = (0..c).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
                let mut sum = T::zero();
                for k in 0..c {
                    let e = (xd[at(k)] - m).exp();
                    out[at(k)] = e;
                    sum += e;
                }
                for k in 0..c {
                    out[at(k)] = out[at(k)] / sum;
                }
            }
        }
        let value = Tensor::from_vec(&[n, c, h, w], out)?;
        let rg = self.rg(&[input]);
        Ok(self.push(value, rg, Op::Softmax { input }))
    }

    /// Class-weighted cross-entropy averaged over valid pixels:
    /// `−Σ_valid w[y]·log softmax(logits)[y] / #valid`.
    pub fn weighted_ce(&mut self, logits: Var, target: &[u8], weights: &[T], valid: &[bool]) -> Result<Var> {
        let x = self.value(logits);
        let [n, c, h, w] = x.dims4()?;
        let plane = h * w;
        if target.len() != n * plane || valid.len() != n * plane {
            return shape_err(format!(
                "weighted_ce: target/valid need {} entries, got {}/{}",
                n * plane,
                target.len(),
                valid.len()
            ));
        }
        if weights.len() != c {
            return shape_err(format!("weighted_ce: {} weights for {c} classes", weights.len()));
        }
        let count = valid.iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(Error::UndefinedLoss);
        }
        let xd = x.data();
        let mut total = T::zero();
        for s in 0..n {
            for p in 0..plane {
                let i = s * plane + p;
                if !valid[i] {
                    continue;
                }
                let y = target[i] as usize;
                if y >= c {
                    return Err(Error::Range(format!("weighted_ce: class {y} >= {c}")));
                }
                let at = |k: usize| (s * c + k) * plane + p;
                let m = (0..c).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
                let lse = (0..c).map(|k| (xd[at(k)] - m).exp()).sum::<T>().ln() + m;
                total += weights[y] * (lse - xd[at(y)]);
            }
        }
        let value = Tensor::scalar(total / T::from_f64(count as f64));
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            rg,
            Op::WeightedCe {
                logits,
                target: target.to_vec(),
                weights: weights.to_vec(),
                valid: valid.to_vec(),
                count,
            },
        ))
    }

    // ---------------------------------------------------------------------
    // Backward
    // ---------------------------------------------------------------------

    /// Backpropagates from a single-element output.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return shape_err(format!("backward: loss must be scalar, got {:?}", self.value(loss).shape()));
        }
        self.backward_with(loss, vec![T::one()])
    }

    /// Backpropagates an arbitrary output gradient `seed` from `out`.
    /// Gradients accumulate across calls until [`Graph::zero_grads`].
    pub fn backward_with(&mut self, out: Var, seed: Vec<T>) -> Result<()> {
        if seed.len() != self.value(out).numel() {
            return shape_err("backward: seed does not match output size".into());
        }
        self.accumulate(out, seed);
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(grad) = self.nodes[i].grad.take() else {
                continue;
            };
            let contributions = self.backward_node(i, &grad)?;
            self.nodes[i].grad = Some(grad);
            for (v, g) in contributions {
                self.accumulate(v, g);
            }
        }
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn accumulate(&mut self, v: Var, g: Vec<T>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(existing) => existing.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => node.grad = Some(g),
        }
    }

    fn backward_node(&self, i: usize, grad: &[T]) -> Result<Vec<(Var, Vec<T>)>> {
        let node = &self.nodes[i];
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { input, weight, bias, pad } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let [n, cin, h, wd] = x.dims4()?;
                let [cout, _, k, _] = w.dims4()?;
                let [_, _, oh, ow] = node.value.dims4()?;
                let g = ConvGeom { channels: cin, h, w: wd, k, pad: *pad, oh, ow };
                let plane = oh * ow;
                let kdim = g.col_rows();
                let need_x = self.requires_grad(*input);
                let need_w = self.requires_grad(*weight);
                let direct = k == 1 && *pad == 0;
                let mut cols = vec![T::zero(); if direct { 0 } else { kdim * plane }];
                let mut dcols = vec![T::zero(); if need_x { kdim * plane } else { 0 }];
                let mut dx = vec![T::zero(); if need_x { x.numel() } else { 0 }];
                let mut dw = vec![T::zero(); if need_w { w.numel() } else { 0 }];
                for s in 0..n {
                    let gs = &grad[s * cout * plane..(s + 1) * cout * plane];
                    if need_w {
                        let xs = &x.data()[s * cin * h * wd..(s + 1) * cin * h * wd];
                        let patches: &[T] = if direct {
                            xs
                        } else {
                            im2col(xs, &g, &mut cols);
                            &cols
                        };
                        gemm(
                            MatRef::row_major(gs, cout, plane),
                            MatRef::row_major(patches, kdim, plane).t(),
                            T::one(),
                            &mut dw,
                        );
                    }
                    if need_x {
                        let dxs = &mut dx[s * cin * h * wd..(s + 1) * cin * h * wd];
                        if direct {
                            gemm(MatRef::row_major(w.data(), cout, kdim).t(), MatRef::row_major(gs, cout, plane), T::zero(), dxs);
                        } else {
                            gemm(
                                MatRef::row_major(w.data(), cout, kdim).t(),
                                MatRef::row_major(gs, cout, plane),
                                T::zero(),
                                &mut dcols,
                            );
                            col2im(&dcols, &g, dxs);
                        }
                    }
                }
                if need_x {
                    out.push((*input, dx));
                }
                if need_w {
                    out.push((*weight, dw));
                }
                if self.requires_grad(*bias) {
                    let mut db = vec![T::zero(); cout];
                    for s in 0..n {
                        for (co, d) in db.iter_mut().enumerate() {
                            *d += grad[(s * cout + co) * plane..(s * cout + co + 1) * plane].iter().copied().sum::<T>();
                        }
                    }
                    out.push((*bias, db));
                }
            }
            Op::ConvTranspose2d { input, weight, bias } => {
                let x = self.value(*input);
                let w = self.value(*weight);
                let [n, cin, h, wd] = x.dims4()?;
                let cout = w.shape()[1];
                let plane = h * wd;
                let (oh, ow) = (2 * h, 2 * wd);
                let need_x = self.requires_grad(*input);
                let need_w = self.requires_grad(*weight);
                let mut gathered = vec![T::zero(); cout * 4 * plane];
                let mut dx = vec![T::zero(); if need_x { x.numel() } else { 0 }];
                let mut dw = vec![T::zero(); if need_w { w.numel() } else { 0 }];
                let mut db = vec![T::zero(); cout];
                for s in 0..n {
                    let gs = &grad[s * cout * oh * ow..(s + 1) * cout * oh * ow];
                    for co in 0..cout {
                        for a in 0..2 {
                            for b in 0..2 {
                                let dst = &mut gathered[(co * 4 + a * 2 + b) * plane..][..plane];
                                for i in 0..h {
                                    let grow = &gs[co * oh * ow + (2 * i + a) * ow..][..ow];
                                    for j in 0..wd {
                                        dst[i * wd + j] = grow[2 * j + b];
                                    }
                                }
                            }
                        }
                        db[co] += gs[co * oh * ow..(co + 1) * oh * ow].iter().copied().sum::<T>();
                    }
                    if need_x {
                        gemm(
                            MatRef::row_major(w.data(), cin, cout * 4),
                            MatRef::row_major(&gathered, cout * 4, plane),
                            T::zero(),
                            &mut dx[s * cin * plane..(s + 1) * cin * plane],
                        );
                    }
                    if need_w {
                        let xs = &x.data()[s * cin * plane..(s + 1) * cin * plane];
                        gemm(
                            MatRef::row_major(xs, cin, plane),
                            MatRef::row_major(&gathered, cout * 4, plane).t(),
                            T::one(),
                            &mut dw,
                        );
                    }
                }
                if need_x {
                    out.push((*input, dx));
                }
                if need_w {
                    out.push((*weight, dw));
                }
                if self.requires_grad(*bias) {
                    out.push((*bias, db));
                }
            }
            Op::MaxPool2 { input, argmax } => {
                let mut dx = vec![T::zero(); self.value(*input).numel()];
                for (&idx, &g) in argmax.iter().zip(grad) {
                    dx[idx as usize] += g;
                }
                out.push((*input, dx));
            }
            Op::Relu { input } => {
                let dx = self
                    .value(*input)
                    .data()
                    .iter()
                    .zip(grad)
                    .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
                    .collect();
                out.push((*input, dx));
            }
            Op::Concat { inputs } => {
                let [n, total, h, w] = node.value.dims4()?;
                let plane = h * w;
                let mut offset = 0;
                for &v in inputs {
                    let c = self.value(v).shape()[1];
                    if self.requires_grad(v) {
                        let mut d = Vec::with_capacity(n * c * plane);
                        for s in 0..n {
                            d.extend_from_slice(&grad[(s * total + offset) * plane..(s * total + offset + c) * plane]);
                        }
                        out.push((v, d));
                    }
                    offset += c;
                }
            }
            Op::SliceChannels { input, start } => {
                let [n, c, h, w] = self.value(*input).dims4()?;
                let len = node.value.shape()[1];
                let plane = h * w;
                let mut d = vec![T::zero(); n * c * plane];
                for s in 0..n {
                    d[(s * c + start) * plane..(s * c + start + len) * plane]
                        .copy_from_slice(&grad[s * len * plane..(s + 1) * len * plane]);
                }
                out.push((*input, d));
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.requires_grad(*a) {
                    out.push((*a, grad.iter().zip(bv).map(|(&g, &y)| g * y).collect()));
                }
                if self.requires_grad(*b) {
                    out.push((*b, grad.iter().zip(av).map(|(&g, &x)| g * x).collect()));
                }
            }
            Op::Softmax { input } => {
                let [n, c, h, w] = node.value.dims4()?;
                let plane = h * w;
                let y = node.value.data();
                let mut dx = vec![T::zero(); y.len()];
                for s in 0..n {
                    for p in 0..plane {
                        let at = |k: usize| (s * c + k) * plane + p;
                        let dot: T = (0..c).map(|k| grad[at(k)] * y[at(k)]).sum();
                        for k in 0..c {
                            dx[at(k)] = y[at(k)] * (grad[at(k)] - dot);
                        }
                    }
                }
                out.push((*input, dx));
            }
            Op::WeightedCe { logits, target, weights, valid, count } => {
                let x = self.value(*logits);
                let [n, c, h, w] = x.dims4()?;
                let plane = h * w;
                let xd = x.data();
                let scale = grad[0] / T::from_f64(*count as f64);
                let mut dx = vec![T::zero(); xd.len()];
                for s in 0..n {
                    for p in 0..plane {
                        let i = s * plane + p;
                        if !valid[i] {
                            continue;
                        }
                        let y = target[i] as usize;
                        let at = |k: usize| (s * c + k) * plane + p;
                        let m = (0..c).map(|k| xd[at(k)]).fold(T::neg_infinity(), T::max);
                        let sum: T = (0..c).map(|k| (xd[at(k)] - m).exp()).sum();
                        let wy = weights[y] * scale;
                        for k in 0..c {
                            let prob = (xd[at(k)] - m).exp() / sum;
                            let onehot = if k == y { T::one() } else { T::zero() };
                            dx[at(k)] = wy * (prob - onehot);
                        }
                    }
                }
                out.push((*logits, dx));
            }
        }
        Ok(out)
    }
}
