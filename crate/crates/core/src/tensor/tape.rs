//! Wengert-list tape: operators append nodes in execution order, `backward`
//! walks the list once in reverse.

use super::kernels::{self, ConvGeometry};
use super::{Real, Tensor};
use crate::error::{Error, Result};
use std::cell::RefCell;
use std::rc::Rc;

/// Variance guard added before the batchnorm square root.
pub const BN_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Per-channel batch statistics produced by train-mode batchnorm.
#[derive(Clone, Debug)]
pub struct BatchStats<T: Real = f32> {
    pub mean: Vec<T>,
    /// Biased variance, the one used for normalization.
    pub var: Vec<T>,
    /// Number of values averaged per channel.
    pub count: usize,
}

enum Op<T: Real> {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Conv2d { x: Var, k: Var, geom: ConvGeometry },
    Relu { x: Var },
    AvgPool { x: Var, kh: usize, kw: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, train: bool },
    Concat { a: Var, b: Var },
    SoftmaxCe { logits: Var, probs: Vec<T>, targets: Vec<T> },
    Add { a: Var, b: Var },
    Scale { x: Var, factor: T },
    Sum { x: Var },
    SumSquares { x: Var },
    WeightedSum { x: Var, weights: Vec<T> },
    SliceRows { x: Var, start: usize, end: usize },
    Reshape { x: Var },
}

struct Node<T: Real> {
    value: Rc<Tensor<T>>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records differentiable operations for a single forward/backward pass.
pub struct Tape<T: Real = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    recording: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`], keyed by leaf.
pub struct Gradients<T: Real = f32> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf that was created with `requires_grad`.
    ///
    /// Leaves the loss does not depend on get an all-zero gradient.
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: true,
        }
    }

    /// A tape that only evaluates: operators keep their outputs but record no
    /// backward information, and `backward` is refused.
    pub fn no_grad() -> Self {
        Tape {
            nodes: RefCell::new(Vec::new()),
            recording: false,
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Records an input. Only leaves marked `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push_node(value, requires_grad && self.recording, Op::Leaf)
    }

    pub fn constant(&self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> Rc<Tensor<T>> {
        Rc::clone(&self.nodes.borrow()[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn push_node(&self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn push_op(&self, value: Tensor<T>, inputs: &[Var], op: Op<T>) -> Var {
        debug_assert!(
            value.all_finite() || inputs.iter().any(|&v| !self.value(v).all_finite()),
            "operator produced a non-finite value from finite inputs"
        );
        if !self.recording {
            return self.push_node(value, false, Op::Leaf);
        }
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        self.push_node(value, rg, op)
    }

    /// `x[N x D] * w[D x M] + b[M]`.
    pub fn linear(&self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        let (xs, ws, bs) = (xv.shape(), wv.shape(), bv.shape());
        if xs.len() != 2 || ws.len() != 2 || bs.len() != 1 || xs[1] != ws[0] || bs[0] != ws[1] {
            return Err(Error::dim(format!(
                "linear: input {xs:?} incompatible with weight {ws:?} and bias {bs:?}"
            )));
        }
        let (n, d, m) = (xs[0], xs[1], ws[1]);
        let out = kernels::linear_forward(xv.data(), wv.data(), bv.data(), n, d, m);
        Ok(self.push_op(Tensor::new(vec![n, m], out)?, &[x, w, b], Op::Linear { x, w, b }))
    }

    /// Cross-correlation of `x[N x C x H x W]` with `k[F x C x Kh x Kw]`.
    pub fn conv2d(&self, x: Var, k: Var, stride: usize, padding: usize) -> Result<Var> {
        let (xv, kv) = (self.value(x), self.value(k));
        let (xs, ks) = (xv.shape(), kv.shape());
        if xs.len() != 4 || ks.len() != 4 || xs[1] != ks[1] {
            return Err(Error::dim(format!("conv2d: input {xs:?} incompatible with kernel {ks:?}")));
        }
        if stride == 0 {
            return Err(Error::dim("conv2d: stride must be at least 1"));
        }
        let (ph, pw) = (xs[2] + 2 * padding, xs[3] + 2 * padding);
        if ks[2] > ph || ks[3] > pw {
            return Err(Error::dim(format!(
                "conv2d: kernel {ks:?} larger than padded input {ph}x{pw} (input {xs:?})"
            )));
        }
        let geom = ConvGeometry {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            f: ks[0],
            kh: ks[2],
            kw: ks[3],
            stride,
            pad: padding,
            ho: (ph - ks[2]) / stride + 1,
            wo: (pw - ks[3]) / stride + 1,
        };
        let out = kernels::conv2d_forward(xv.data(), kv.data(), &geom);
        let value = Tensor::new(vec![geom.n, geom.f, geom.ho, geom.wo], out)?;
        Ok(self.push_op(value, &[x, k], Op::Conv2d { x, k, geom }))
    }

    pub fn relu(&self, x: Var) -> Var {
        let value = self.value(x).map(|v| if v > T::ZERO { v } else { T::ZERO });
        self.push_op(value, &[x], Op::Relu { x })
    }

    /// Averages non-overlapping `k x k` windows.
    pub fn avg_pool2d(&self, x: Var, k: usize) -> Result<Var> {
        self.avg_pool2d_window(x, k, k)
    }

    pub fn avg_pool2d_window(&self, x: Var, kh: usize, kw: usize) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape();
        if s.len() != 4 || kh == 0 || kw == 0 || s[2] % kh != 0 || s[3] % kw != 0 {
            return Err(Error::dim(format!(
                "avg_pool2d: window {kh}x{kw} does not tile input {s:?}"
            )));
        }
        let out = kernels::avg_pool_forward(xv.data(), s[0] * s[1], s[2], s[3], kh, kw);
        let value = Tensor::new(vec![s[0], s[1], s[2] / kh, s[3] / kw], out)?;
        Ok(self.push_op(value, &[x], Op::AvgPool { x, kh, kw }))
    }

    /// Batchnorm with batch statistics. Returns the statistics so the caller
    /// can fold them into its running estimates.
    pub fn batchnorm2d_train(&self, x: Var, gamma: Var, beta: Var) -> Result<(Var, BatchStats<T>)> {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        self.check_bn(&s, gamma, beta)?;
        let plane = s[2] * s[3];
        if s[0] * plane < 2 {
            return Err(Error::Validation(format!(
                "batchnorm2d in train mode needs at least 2 values per channel, input {s:?}"
            )));
        }
        let (mean, var) = kernels::channel_moments(xv.data(), s[0], s[1], plane);
        let eps = T::from_f64(BN_EPS);
        let inv_std: Vec<T> = var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let (value, xhat) = self.bn_apply(&xv, gamma, beta, &mean, &inv_std);
        let out = self.push_op(
            value,
            &[x, gamma, beta],
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: true },
        );
        Ok((out, BatchStats { mean, var, count: s[0] * plane }))
    }

    /// Batchnorm with fixed (running) statistics.
    pub fn batchnorm2d_eval(
        &self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
    ) -> Result<Var> {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        self.check_bn(&s, gamma, beta)?;
        if running_mean.len() != s[1] || running_var.len() != s[1] {
            return Err(Error::dim(format!(
                "batchnorm2d: running statistics of length {} for {} channels",
                running_mean.len(),
                s[1]
            )));
        }
        let eps = T::from_f64(BN_EPS);
        let inv_std: Vec<T> = running_var.iter().map(|&v| T::ONE / (v + eps).sqrt()).collect();
        let (value, xhat) = self.bn_apply(&xv, gamma, beta, running_mean, &inv_std);
        Ok(self.push_op(
            value,
            &[x, gamma, beta],
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train: false },
        ))
    }

    fn check_bn(&self, s: &[usize], gamma: Var, beta: Var) -> Result<()> {
        let (gs, bs) = (self.shape(gamma), self.shape(beta));
        if s.len() != 4 || gs != [s[1]] || bs != [s[1]] {
            return Err(Error::dim(format!(
                "batchnorm2d: input {s:?} with gamma {gs:?} and beta {bs:?}"
            )));
        }
        Ok(())
    }

    fn bn_apply(
        &self,
        xv: &Tensor<T>,
        gamma: Var,
        beta: Var,
        mean: &[T],
        inv_std: &[T],
    ) -> (Tensor<T>, Vec<T>) {
        let s = xv.shape();
        let (c, plane) = (s[1], s[2] * s[3]);
        let (gv, bv) = (self.value(gamma), self.value(beta));
        let mut xhat = Vec::with_capacity(xv.len());
        let mut out = Vec::with_capacity(xv.len());
        for (i, chunk) in xv.data().chunks(plane).enumerate() {
            let ch = i % c;
            let (mu, is, g, b) = (mean[ch], inv_std[ch], gv.data()[ch], bv.data()[ch]);
            for &v in chunk {
                let h = (v - mu) * is;
                xhat.push(h);
                out.push(g * h + b);
            }
        }
        (Tensor::new(s.to_vec(), out).expect("same shape"), xhat)
    }

    /// Column-wise concatenation `[a | b]`; `a` occupies the leading columns.
    pub fn concat(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let (as_, bs) = (av.shape(), bv.shape());
        if as_.len() != 2 || bs.len() != 2 || as_[0] != bs[0] {
            return Err(Error::dim(format!("concat: leading extents differ, {as_:?} vs {bs:?}")));
        }
        let (n, da, db) = (as_[0], as_[1], bs[1]);
        let mut out = Vec::with_capacity(n * (da + db));
        for r in 0..n {
            out.extend_from_slice(&av.data()[r * da..(r + 1) * da]);
            out.extend_from_slice(&bv.data()[r * db..(r + 1) * db]);
        }
        let value = Tensor::new(vec![n, da + db], out)?;
        Ok(self.push_op(value, &[a, b], Op::Concat { a, b }))
    }

    /// Mean over rows of `-log softmax(logits)[target]`.
    pub fn softmax_cross_entropy(&self, logits: Var, targets: &Tensor<T>) -> Result<Var> {
        let lv = self.value(logits);
        let ls = lv.shape();
        if ls.len() != 2 || targets.shape() != ls {
            return Err(Error::dim(format!(
                "softmax_cross_entropy: logits {ls:?} vs targets {:?}",
                targets.shape()
            )));
        }
        let (n, c) = (ls[0], ls[1]);
        for (r, row) in targets.data().chunks(c).enumerate() {
            let ones = row.iter().filter(|&&v| v == T::ONE).count();
            let zeros = row.iter().filter(|&&v| v == T::ZERO).count();
            if ones != 1 || zeros != c - 1 {
                return Err(Error::Validation(format!("target row {r} is not one-hot")));
            }
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut total = T::ZERO;
        for (row, trow) in lv.data().chunks(c).zip(targets.data().chunks(c)) {
            let mx = row.iter().copied().fold(row[0], T::max);
            let mut z = T::ZERO;
            for &v in row {
                z += (v - mx).exp();
            }
            let lse = mx + z.ln();
            for (&v, &t) in row.iter().zip(trow) {
                probs.push((v - mx).exp() / z);
                if t == T::ONE {
                    total += lse - v;
                }
            }
        }
        let loss = total / T::from_usize(n);
        Ok(self.push_op(
            Tensor::scalar(loss),
            &[logits],
            Op::SoftmaxCe { logits, probs, targets: targets.data().to_vec() },
        ))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!("add: {:?} vs {:?}", av.shape(), bv.shape())));
        }
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        Ok(self.push_op(value, &[a, b], Op::Add { a, b }))
    }

    pub fn scale(&self, x: Var, factor: T) -> Var {
        let value = self.value(x).map(|v| v * factor);
        self.push_op(value, &[x], Op::Scale { x, factor })
    }

    pub fn sum(&self, x: Var) -> Var {
        let mut s = T::ZERO;
        for &v in self.value(x).data() {
            s += v;
        }
        self.push_op(Tensor::scalar(s), &[x], Op::Sum { x })
    }

    /// Sum of squared entries.
    pub fn sum_squares(&self, x: Var) -> Var {
        let mut s = T::ZERO;
        for &v in self.value(x).data() {
            s += v * v;
        }
        self.push_op(Tensor::scalar(s), &[x], Op::SumSquares { x })
    }

    /// `sum_i x[i] * weights[i]` against a constant weight tensor.
    pub fn weighted_sum(&self, x: Var, weights: &Tensor<T>) -> Result<Var> {
        let xv = self.value(x);
        if xv.shape() != weights.shape() {
            return Err(Error::dim(format!(
                "weighted_sum: {:?} vs {:?}",
                xv.shape(),
                weights.shape()
            )));
        }
        let mut s = T::ZERO;
        for (&a, &w) in xv.data().iter().zip(weights.data()) {
            s += a * w;
        }
        Ok(self.push_op(
            Tensor::scalar(s),
            &[x],
            Op::WeightedSum { x, weights: weights.data().to_vec() },
        ))
    }

    /// Rows `[start, end)` of the leading axis.
    pub fn slice_rows(&self, x: Var, start: usize, end: usize) -> Result<Var> {
        let value = self.value(x).slice_leading(start, end)?;
        Ok(self.push_op(value, &[x], Op::SliceRows { x, start, end }))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = (*self.value(x)).clone().reshape(shape)?;
        Ok(self.push_op(value, &[x], Op::Reshape { x }))
    }

    /// Reverse sweep from a scalar loss.
    ///
    /// Every leaf created with `requires_grad` gets an entry in the result;
    /// fan-out contributions are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if !self.recording {
            return Err(Error::Contract("backward called on a no-grad tape".into()));
        }
        let nodes = self.nodes.borrow();
        let root = nodes
            .get(loss.0)
            .ok_or_else(|| Error::Contract(format!("loss {loss:?} is not on this tape")))?;
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::ONE]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let needs = |v: Var| nodes[v.0].requires_grad;
            let mut acc = |v: Var, contrib: Vec<T>| accumulate(&mut grads[v.0], contrib);
            match &node.op {
                Op::Leaf => unreachable!(),
                Op::Linear { x, w, b } => {
                    let (xv, wv) = (&nodes[x.0].value, &nodes[w.0].value);
                    let (n, d) = (xv.shape()[0], xv.shape()[1]);
                    let m = wv.shape()[1];
                    let (gx, gw, gb) = kernels::linear_backward(xv.data(), wv.data(), &g, n, d, m);
                    if needs(*x) {
                        acc(*x, gx);
                    }
                    if needs(*w) {
                        acc(*w, gw);
                    }
                    if needs(*b) {
                        acc(*b, gb);
                    }
                }
                Op::Conv2d { x, k, geom } => {
                    let (nx, nk) = (needs(*x), needs(*k));
                    let (gx, gk) = kernels::conv2d_backward(
                        nodes[x.0].value.data(),
                        nodes[k.0].value.data(),
                        &g,
                        geom,
                        nx,
                        nk,
                    );
                    if nx {
                        acc(*x, gx);
                    }
                    if nk {
                        acc(*k, gk);
                    }
                }
                Op::Relu { x } => {
                    let xv = &nodes[x.0].value;
                    let gx = g
                        .iter()
                        .zip(xv.data())
                        .map(|(&gv, &v)| if v > T::ZERO { gv } else { T::ZERO })
                        .collect();
                    acc(*x, gx);
                }
                Op::AvgPool { x, kh, kw } => {
                    let s = nodes[x.0].value.shape();
                    acc(*x, kernels::avg_pool_backward(&g, s[0] * s[1], s[2], s[3], *kh, *kw));
                }
                Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                    let s = nodes[x.0].value.shape();
                    let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                    let (sum_g, sum_gx) = kernels::channel_grad_sums(&g, xhat, n, c, plane);
                    if needs(*x) {
                        let gam = nodes[gamma.0].value.data();
                        let m = T::from_usize(n * plane);
                        let mut gx = Vec::with_capacity(g.len());
                        for (idx, (gv_chunk, xh_chunk)) in
                            g.chunks(plane).zip(xhat.chunks(plane)).enumerate()
                        {
                            let ch = idx % c;
                            let coeff = gam[ch] * inv_std[ch];
                            if *train {
                                let (sg, sgx) = (sum_g[ch] / m, sum_gx[ch] / m);
                                for (&gv, &xh) in gv_chunk.iter().zip(xh_chunk) {
                                    gx.push(coeff * (gv - sg - xh * sgx));
                                }
                            } else {
                                for &gv in gv_chunk {
                                    gx.push(coeff * gv);
                                }
                            }
                        }
                        acc(*x, gx);
                    }
                    if needs(*gamma) {
                        acc(*gamma, sum_gx);
                    }
                    if needs(*beta) {
                        acc(*beta, sum_g);
                    }
                }
                Op::Concat { a, b } => {
                    let da = nodes[a.0].value.shape()[1];
                    let db = nodes[b.0].value.shape()[1];
                    let mut ga = Vec::with_capacity(g.len() / (da + db) * da);
                    let mut gb = Vec::with_capacity(g.len() / (da + db) * db);
                    for row in g.chunks(da + db) {
                        ga.extend_from_slice(&row[..da]);
                        gb.extend_from_slice(&row[da..]);
                    }
                    if needs(*a) {
                        acc(*a, ga);
                    }
                    if needs(*b) {
                        acc(*b, gb);
                    }
                }
                Op::SoftmaxCe { logits, probs, targets } => {
                    let n = nodes[logits.0].value.shape()[0];
                    let scale = g[0] / T::from_usize(n);
                    let gl = probs.iter().zip(targets).map(|(&p, &t)| (p - t) * scale).collect();
                    acc(*logits, gl);
                }
                Op::Add { a, b } => {
                    if needs(*a) {
                        acc(*a, g.clone());
                    }
                    if needs(*b) {
                        acc(*b, g);
                    }
                }
                Op::Scale { x, factor } => acc(*x, g.iter().map(|&v| v * *factor).collect()),
                Op::Sum { x } => acc(*x, vec![g[0]; nodes[x.0].value.len()]),
                Op::SumSquares { x } => {
                    let two = T::from_f64(2.0);
                    acc(*x, nodes[x.0].value.data().iter().map(|&v| two * v * g[0]).collect())
                }
                Op::WeightedSum { x, weights } => acc(*x, weights.iter().map(|&w| w * g[0]).collect()),
                Op::SliceRows { x, start, end } => {
                    let xv = &nodes[x.0].value;
                    let stride = xv.len() / xv.shape()[0];
                    let mut gx = vec![T::ZERO; xv.len()];
                    gx[start * stride..end * stride].copy_from_slice(&g);
                    acc(*x, gx);
                }
                Op::Reshape { x } => acc(*x, g),
            }
        }

        let out = nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, node.requires_grad) {
                (Op::Leaf, true) => Some(match g {
                    Some(g) => Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"),
                    None => Tensor::zeros(node.value.shape()),
                }),
                _ => None,
            })
            .collect();
        Ok(Gradients { grads: out })
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        Some(existing) => {
            for (a, c) in existing.iter_mut().zip(contrib) {
                *a += c;
            }
        }
        None => *slot = Some(contrib),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_identity_and_zero_weights() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 2], &[1.0, 2.0]));
        let w = tape.constant(Tensor::eye(2));
        let b = tape.constant(Tensor::zeros(&[2]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 2.0]);

        let x = tape.constant(t(&[3, 2], &[5.0, -1.0, 0.3, 9.0, 2.0, 2.0]));
        let w = tape.constant(Tensor::zeros(&[2, 2]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let y = tape.linear(x, w, b).unwrap();
        assert_eq!(tape.value(y).data(), &[3.0, 4.0, 3.0, 4.0, 3.0, 4.0]);
    }

    #[test]
    fn linear_shape_error_names_both_shapes() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[2, 3]));
        let w = tape.constant(Tensor::zeros(&[4, 2]));
        let b = tape.constant(Tensor::zeros(&[2]));
        let err = tape.linear(x, w, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[4, 2]"), "{err}");
    }

    #[test]
    fn conv_full_window_sum_and_delta_kernel() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let k = tape.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = tape.conv2d(x, k, 1, 0).unwrap();
        assert_eq!(tape.value(y).shape(), &[1, 1, 1, 1]);
        assert_eq!(tape.value(y).data(), &[10.0]);

        let img = Tensor::<f64>::from_fn(&[1, 1, 4, 5], |i| i as f64 * 0.5 - 3.0);
        let x = tape.constant(img.clone());
        let mut delta = Tensor::zeros(&[1, 1, 3, 3]);
        delta.data_mut()[4] = 1.0;
        let k = tape.constant(delta.clone());
        let same = tape.conv2d(x, k, 1, 1).unwrap();
        assert_eq!(*tape.value(same), img);
        let valid = tape.conv2d(x, k, 1, 0).unwrap();
        let v = tape.value(valid);
        assert_eq!(v.shape(), &[1, 1, 2, 3]);
        for r in 0..2 {
            for c in 0..3 {
                assert_eq!(v.at(&[0, 0, r, c]), img.at(&[0, 0, r + 1, c + 1]));
            }
        }
    }

    #[test]
    fn conv_kernel_larger_than_input() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let k = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(tape.conv2d(x, k, 1, 0), Err(Error::Dimension(_))));
        assert!(tape.conv2d(x, k, 1, 1).is_ok());
    }

    #[test]
    fn relu_and_pool() {
        let tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0]));
        assert_eq!(tape.value(tape.relu(x)).data(), &[0.0, 0.0, 2.0]);
        let x = tape.constant(t(&[1, 1, 2, 2], &[1.0, 2.0, 3.0, 4.0]));
        assert_eq!(tape.value(tape.avg_pool2d(x, 2).unwrap()).data(), &[2.5]);
        let x = tape.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(matches!(tape.avg_pool2d(x, 2), Err(Error::Dimension(_))));
    }

    #[test]
    fn batchnorm_train_normalizes() {
        let tape = Tape::<f32>::new();
        let x = Tensor::<f32>::from_fn(&[4, 2, 3, 3], |i| ((i * 37) % 11) as f32 * 0.7 + (i % 2) as f32);
        let x = tape.constant(x);
        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let (y, stats) = tape.batchnorm2d_train(x, g, b).unwrap();
        assert_eq!(stats.count, 36);
        let yv = tape.value(y);
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| (0..9).map(move |p| (n, p)))
                .map(|(n, p)| yv.data()[(n * 2 + ch) * 9 + p] as f64)
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() <= 1e-5, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "var {var}");
        }
    }

    #[test]
    fn batchnorm_train_rejects_single_value() {
        let tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros(&[1, 1, 1, 1]));
        let g = tape.constant(Tensor::full(&[1], 1.0));
        let b = tape.constant(Tensor::zeros(&[1]));
        assert!(tape.batchnorm2d_train(x, g, b).is_err());
    }

    #[test]
    fn concat_order_and_backward() {
        let tape = Tape::<f64>::new();
        let a = tape.param(t(&[1, 1], &[1.0]));
        let b = tape.param(t(&[1, 2], &[2.0, 3.0]));
        let c = tape.concat(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[1.0, 2.0, 3.0]);
        let loss = tape.sum(c);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(a).unwrap().data(), &[1.0]);
        assert_eq!(grads.get(b).unwrap().data(), &[1.0, 1.0]);

        let bad = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(tape.concat(a, bad).is_err());
    }

    #[test]
    fn concat_paper_width() {
        let tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 512]));
        let b = tape.constant(Tensor::zeros(&[2, 512]));
        assert_eq!(tape.shape(tape.concat(a, b).unwrap()), vec![2, 1024]);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 10]));
        let mut target = Tensor::zeros(&[1, 10]);
        target.data_mut()[3] = 1.0;
        let l = tape.softmax_cross_entropy(logits, &target).unwrap();
        assert!((tape.value(l).data()[0] - 10f64.ln()).abs() < 1e-12);

        let mut big = Tensor::zeros(&[1, 10]);
        big.data_mut()[3] = 1000.0;
        let logits = tape.constant(big);
        let l = tape.softmax_cross_entropy(logits, &target).unwrap();
        assert!(tape.value(l).data()[0] <= 1e-6);

        // log(e^1 + e^2 + e^3) - 3
        let expected = (1f64.exp() + 2f64.exp() + 3f64.exp()).ln() - 3.0;
        let logits = tape.constant(t(&[1, 3], &[1.0, 2.0, 3.0]));
        let l = tape.softmax_cross_entropy(logits, &t(&[1, 3], &[0.0, 0.0, 1.0])).unwrap();
        let got = tape.value(l).data()[0];
        assert!((got - expected).abs() < 1e-12);
        assert!((got - 0.4076).abs() < 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_non_one_hot() {
        let tape = Tape::<f64>::new();
        let logits = tape.constant(Tensor::zeros(&[1, 3]));
        let r = tape.softmax_cross_entropy(logits, &t(&[1, 3], &[0.5, 0.5, 0.0]));
        assert!(matches!(r, Err(Error::Validation(_))));
    }

    #[test]
    fn backward_linear_and_disconnected() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2, 2], &[1.0, -2.0, 3.0, 0.5]));
        let other = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let loss = tape.sum(x);
        let grads = tape.backward(loss).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[1.0; 4]);
        assert_eq!(grads.get(other).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn backward_accumulates_fan_out() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.add(x, x).unwrap();
        let grads = tape.backward(tape.sum(y)).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }
}
