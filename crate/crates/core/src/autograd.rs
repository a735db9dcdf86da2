//! A reverse-mode tape over coarse tensor operations.
//!
//! Every op computes its value eagerly when it is recorded. `backward` walks
//! the tape in reverse and only propagates into nodes that require gradients,
//! so frozen weights and input frames cost nothing on the way back.

use crate::tensor::{self, ConvGeom, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Concat(Vec<Var>),
    NarrowChannels {
        x: Var,
        start: usize,
    },
    NarrowBatch {
        x: Var,
        start: usize,
    },
    Upsample(Var),
    MaxPool {
        x: Var,
        arg: Vec<usize>,
    },
    ChannelAffine {
        x: Var,
        scale: Vec<T>,
    },
    RepeatChannels {
        x: Var,
        times: usize,
    },
    Attention {
        theta: Var,
        phi: Var,
        g: Var,
        stats: Vec<T>,
    },
    IntensityLoss {
        a: Var,
        b: Var,
        scale: T,
    },
    GradDiffLoss {
        a: Var,
        b: Var,
        scale: T,
    },
    L1Loss {
        a: Var,
        b: Var,
        scale: T,
    },
    WeightedSum(Vec<(Var, T)>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Gradient tape. Build one per forward pass.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    params: Vec<(Var, usize)>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grad_enabled: true,
            params: Vec::new(),
        }
    }

    /// A tape that never records gradient state; used for inference.
    pub fn inference() -> Self {
        Graph {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A leaf that does not receive gradients.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::get`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf bound to parameter slot `id`. Untrainable parameters become
    /// constants.
    pub fn param(&mut self, value: Tensor<T>, id: usize, trainable: bool) -> Var {
        let v = self.push(value, Op::Leaf, trainable);
        if self.rg(v) {
            self.params.push((v, id));
        }
        v
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Var {
        let value = tensor::conv2d(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        self.push(value, Op::Conv { x, w, b, geom }, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul(a, b), rg)
    }

    /// `1 - x`
    pub fn one_minus(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| T::one() - v);
        let rg = self.rg(x);
        self.push(value, Op::OneMinus(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::sigmoid);
        let rg = self.rg(x);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.value(x).map(T::tanh_fast);
        let rg = self.rg(x);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(T::zero()));
        let rg = self.rg(x);
        self.push(value, Op::Relu(x), rg)
    }

    /// Concatenation along the channel axis of `[N, C_i, H, W]` tensors.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Var {
        let (n, _, h, w) = self.value(parts[0]).dims4();
        let total: usize = parts.iter().map(|&p| self.value(p).dims4().1).sum();
        let mut out = Tensor::zeros(&[n, total, h, w]);
        let mut c0 = 0;
        for &p in parts {
            let src = self.value(p);
            let (pn, pc, ph, pw) = src.dims4();
            assert_eq!((pn, ph, pw), (n, h, w), "concat shape mismatch");
            for b in 0..n {
                let dst_off = (b * total + c0) * h * w;
                out.data_mut()[dst_off..dst_off + pc * h * w]
                    .copy_from_slice(&src.data()[b * pc * h * w..(b + 1) * pc * h * w]);
            }
            c0 += pc;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(out, Op::Concat(parts.to_vec()), rg)
    }

    pub fn narrow_channels(&mut self, x: Var, start: usize, len: usize) -> Var {
        let src = self.value(x);
        let (n, c, h, w) = src.dims4();
        assert!(start + len <= c);
        let mut out = Tensor::zeros(&[n, len, h, w]);
        for b in 0..n {
            let s = (b * c + start) * h * w;
            out.data_mut()[b * len * h * w..(b + 1) * len * h * w]
                .copy_from_slice(&src.data()[s..s + len * h * w]);
        }
        let rg = self.rg(x);
        self.push(out, Op::NarrowChannels { x, start }, rg)
    }

    pub fn narrow_batch(&mut self, x: Var, start: usize, len: usize) -> Var {
        let value = self.value(x).narrow_batch(start, len);
        let rg = self.rg(x);
        self.push(value, Op::NarrowBatch { x, start }, rg)
    }

    pub fn upsample2x(&mut self, x: Var) -> Var {
        let value = tensor::upsample2x(self.value(x));
        let rg = self.rg(x);
        self.push(value, Op::Upsample(x), rg)
    }

    pub fn maxpool2(&mut self, x: Var) -> Var {
        let (value, arg) = tensor::maxpool2(self.value(x));
        let rg = self.rg(x);
        let arg = if rg && self.grad_enabled { arg } else { Vec::new() };
        self.push(value, Op::MaxPool { x, arg }, rg)
    }

    /// Per-channel `x * scale[c] + shift[c]` with constant coefficients.
    pub fn channel_affine(&mut self, x: Var, scale: &[T], shift: &[T]) -> Var {
        let src = self.value(x);
        let (n, c, h, w) = src.dims4();
        assert_eq!(scale.len(), c);
        assert_eq!(shift.len(), c);
        let mut out = src.clone();
        for b in 0..n {
            for ch in 0..c {
                let off = (b * c + ch) * h * w;
                for v in &mut out.data_mut()[off..off + h * w] {
                    *v = *v * scale[ch] + shift[ch];
                }
            }
        }
        let rg = self.rg(x);
        self.push(
            out,
            Op::ChannelAffine {
                x,
                scale: scale.to_vec(),
            },
            rg,
        )
    }

    /// Tiles the channels `times` times: `[N, C, H, W] -> [N, times * C, H, W]`.
    pub fn repeat_channels(&mut self, x: Var, times: usize) -> Var {
        let src = self.value(x);
        let (n, c, h, w) = src.dims4();
        let mut out = Tensor::zeros(&[n, c * times, h, w]);
        for b in 0..n {
            let plane = &src.data()[b * c * h * w..(b + 1) * c * h * w];
            for r in 0..times {
                let off = (b * times + r) * c * h * w;
                out.data_mut()[off..off + c * h * w].copy_from_slice(plane);
            }
        }
        let rg = self.rg(x);
        self.push(out, Op::RepeatChannels { x, times }, rg)
    }

    /// Softmax attention over all spatial positions, see [`tensor::attention`].
    pub fn attention(&mut self, theta: Var, phi: Var, g: Var) -> Var {
        let rg = self.rg(theta) || self.rg(phi) || self.rg(g);
        let (value, stats) = tensor::attention(self.value(theta), self.value(phi), self.value(g));
        let stats = if rg { stats } else { Vec::new() };
        self.push(value, Op::Attention { theta, phi, g, stats }, rg)
    }

    /// `scale * sum_{n,i,j} || a[n,:,i,j] - b[n,:,i,j] ||_2`
    pub fn intensity_loss(&mut self, a: Var, b: Var, scale: T) -> Var {
        let total = intensity_sum(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(total * scale), Op::IntensityLoss { a, b, scale }, rg)
    }

    /// `scale *` the summed l1 mismatch of absolute forward differences along
    /// both spatial axes.
    pub fn grad_diff_loss(&mut self, a: Var, b: Var, scale: T) -> Var {
        let total = grad_diff_sum(self.value(a), self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(total * scale), Op::GradDiffLoss { a, b, scale }, rg)
    }

    /// `scale * sum |a - b|`
    pub fn l1_loss(&mut self, a: Var, b: Var, scale: T) -> Var {
        let total: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y).abs())
            .sum();
        let rg = self.rg(a) || self.rg(b);
        self.push(Tensor::scalar(total * scale), Op::L1Loss { a, b, scale }, rg)
    }

    /// `sum_k w_k x_k` over same-shaped operands.
    pub fn weighted_sum(&mut self, terms: &[(Var, T)]) -> Var {
        let mut out = Tensor::zeros(self.value(terms[0].0).shape());
        for &(v, wgt) in terms {
            let src = self.value(v);
            assert_eq!(src.shape(), out.shape());
            for (o, &s) in out.data_mut().iter_mut().zip(src.data()) {
                *o += wgt * s;
            }
        }
        let rg = terms.iter().any(|&(v, _)| self.rg(v));
        self.push(out, Op::WeightedSum(terms.to_vec()), rg)
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Gradients {
                grads,
                params: Vec::new(),
            };
        }
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.propagate(node, &dy, &mut grads);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn propagate(&self, node: &Node<T>, dy: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let mut acc = |v: Var, g: Tensor<T>| {
            if !self.rg(v) {
                return;
            }
            match grads[v.0].as_mut() {
                Some(existing) => existing.add_assign(&g),
                None => grads[v.0] = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (dx, dw, db) = tensor::conv2d_backward(
                    self.value(*x),
                    self.value(*w),
                    dy,
                    *geom,
                    self.rg(*x),
                    self.rg(*w),
                    b.is_some_and(|b| self.rg(b)),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    acc(*b, db);
                }
            }
            Op::Add(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.clone());
                acc(*b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    acc(*a, dy.zip_map(self.value(*b), |d, y| d * y));
                }
                if self.rg(*b) {
                    acc(*b, dy.zip_map(self.value(*a), |d, x| d * x));
                }
            }
            Op::OneMinus(x) => acc(*x, dy.map(|v| -v)),
            Op::Sigmoid(x) => acc(*x, dy.zip_map(&node.value, |d, s| d * s * (T::one() - s))),
            Op::Tanh(x) => acc(*x, dy.zip_map(&node.value, |d, t| d * (T::one() - t * t))),
            Op::Relu(x) => acc(
                *x,
                dy.zip_map(&node.value, |d, y| if y > T::zero() { d } else { T::zero() }),
            ),
            Op::Concat(parts) => {
                let (n, total, h, w) = dy.dims4();
                let mut c0 = 0;
                for &p in parts {
                    let pc = self.value(p).dims4().1;
                    if self.rg(p) {
                        let mut g = Tensor::zeros(&[n, pc, h, w]);
                        for b in 0..n {
                            let src = (b * total + c0) * h * w;
                            g.data_mut()[b * pc * h * w..(b + 1) * pc * h * w]
                                .copy_from_slice(&dy.data()[src..src + pc * h * w]);
                        }
                        acc(p, g);
                    }
                    c0 += pc;
                }
            }
            Op::NarrowChannels { x, start } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let len = dy.dims4().1;
                let mut g = Tensor::zeros(&[n, c, h, w]);
                for b in 0..n {
                    let dst = (b * c + start) * h * w;
                    g.data_mut()[dst..dst + len * h * w]
                        .copy_from_slice(&dy.data()[b * len * h * w..(b + 1) * len * h * w]);
                }
                acc(*x, g);
            }
            Op::NarrowBatch { x, start } => {
                let shape = self.value(*x).shape().to_vec();
                let per: usize = shape[1..].iter().product();
                let mut g = Tensor::zeros(&shape);
                g.data_mut()[start * per..start * per + dy.numel()].copy_from_slice(dy.data());
                acc(*x, g);
            }
            Op::Upsample(x) => acc(*x, tensor::upsample2x_backward(dy)),
            Op::MaxPool { x, arg } => {
                let mut g = Tensor::zeros(self.value(*x).shape());
                for (&idx, &d) in arg.iter().zip(dy.data()) {
                    g.data_mut()[idx] += d;
                }
                acc(*x, g);
            }
            Op::ChannelAffine { x, scale } => {
                let (n, c, h, w) = dy.dims4();
                let mut g = dy.clone();
                for b in 0..n {
                    for ch in 0..c {
                        let off = (b * c + ch) * h * w;
                        for v in &mut g.data_mut()[off..off + h * w] {
                            *v *= scale[ch];
                        }
                    }
                }
                acc(*x, g);
            }
            Op::RepeatChannels { x, times } => {
                let (n, c, h, w) = self.value(*x).dims4();
                let mut g = Tensor::zeros(&[n, c, h, w]);
                for b in 0..n {
                    for r in 0..*times {
                        let off = (b * times + r) * c * h * w;
                        for (d, &s) in g.data_mut()[b * c * h * w..(b + 1) * c * h * w]
                            .iter_mut()
                            .zip(&dy.data()[off..off + c * h * w])
                        {
                            *d += s;
                        }
                    }
                }
                acc(*x, g);
            }
            Op::Attention { theta, phi, g, stats } => {
                let (dt, dp, dg) = tensor::attention_backward(
                    self.value(*theta),
                    self.value(*phi),
                    self.value(*g),
                    stats,
                    dy,
                );
                acc(*theta, dt);
                acc(*phi, dp);
                acc(*g, dg);
            }
            Op::IntensityLoss { a, b, scale } => {
                let s = dy.item() * *scale;
                let ga = intensity_grad(self.value(*a), self.value(*b), s);
                if self.rg(*b) {
                    acc(*b, ga.map(|v| -v));
                }
                acc(*a, ga);
            }
            Op::GradDiffLoss { a, b, scale } => {
                let s = dy.item() * *scale;
                let (ga, gb) = grad_diff_grad(self.value(*a), self.value(*b), s);
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::L1Loss { a, b, scale } => {
                let s = dy.item() * *scale;
                let ga = self.value(*a).zip_map(self.value(*b), |x, y| sign(x - y) * s);
                if self.rg(*b) {
                    acc(*b, ga.map(|v| -v));
                }
                acc(*a, ga);
            }
            Op::WeightedSum(terms) => {
                for &(v, wgt) in terms {
                    acc(v, dy.map(|d| d * wgt));
                }
            }
        }
    }
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

pub(crate) fn intensity_sum<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> T {
    assert_eq!(a.shape(), b.shape(), "intensity loss shape mismatch");
    let (n, c, h, w) = a.dims4();
    let mut total = T::zero();
    let mut sq = vec![T::zero(); h * w];
    for img in 0..n {
        sq.fill(T::zero());
        for ch in 0..c {
            let off = (img * c + ch) * h * w;
            for ((s, &x), &y) in sq
                .iter_mut()
                .zip(&a.data()[off..off + h * w])
                .zip(&b.data()[off..off + h * w])
            {
                *s += (x - y) * (x - y);
            }
        }
        total += sq.iter().map(|&s| s.sqrt()).sum::<T>();
    }
    total
}

fn intensity_grad<T: Real>(a: &Tensor<T>, b: &Tensor<T>, scale: T) -> Tensor<T> {
    let (n, c, h, w) = a.dims4();
    let mut g = Tensor::zeros(a.shape());
    let mut norm = vec![T::zero(); h * w];
    for img in 0..n {
        norm.fill(T::zero());
        for ch in 0..c {
            let off = (img * c + ch) * h * w;
            for p in 0..h * w {
                let d = a.data()[off + p] - b.data()[off + p];
                norm[p] += d * d;
            }
        }
        for v in norm.iter_mut() {
            *v = v.sqrt();
        }
        for ch in 0..c {
            let off = (img * c + ch) * h * w;
            for p in 0..h * w {
                if norm[p] > T::zero() {
                    g.data_mut()[off + p] = scale * (a.data()[off + p] - b.data()[off + p]) / norm[p];
                }
            }
        }
    }
    g
}

pub(crate) fn grad_diff_sum<T: Real>(a: &Tensor<T>, b: &Tensor<T>) -> T {
    assert_eq!(a.shape(), b.shape(), "gradient loss shape mismatch");
    let (n, c, h, w) = a.dims4();
    let (ad, bd) = (a.data(), b.data());
    let mut total = T::zero();
    for p in 0..n * c {
        let base = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let idx = base + i * w + j;
                if i > 0 {
                    let ga = (ad[idx] - ad[idx - w]).abs();
                    let gb = (bd[idx] - bd[idx - w]).abs();
                    total += (ga - gb).abs();
                }
                if j > 0 {
                    let ga = (ad[idx] - ad[idx - 1]).abs();
                    let gb = (bd[idx] - bd[idx - 1]).abs();
                    total += (ga - gb).abs();
                }
            }
        }
    }
    total
}

fn grad_diff_grad<T: Real>(a: &Tensor<T>, b: &Tensor<T>, scale: T) -> (Tensor<T>, Tensor<T>) {
    let (n, c, h, w) = a.dims4();
    let (ad, bd) = (a.data(), b.data());
    let mut ga = Tensor::zeros(a.shape());
    let mut gb = Tensor::zeros(a.shape());
    for p in 0..n * c {
        let base = p * h * w;
        for i in 0..h {
            for j in 0..w {
                let idx = base + i * w + j;
                let mut visit = |prev: usize| {
                    let da = ad[idx] - ad[prev];
                    let db = bd[idx] - bd[prev];
                    let outer = sign(da.abs() - db.abs()) * scale;
                    let sa = outer * sign(da);
                    let sb = -outer * sign(db);
                    ga.data_mut()[idx] += sa;
                    ga.data_mut()[prev] -= sa;
                    gb.data_mut()[idx] += sb;
                    gb.data_mut()[prev] -= sb;
                };
                if i > 0 {
                    visit(idx - w);
                }
                if j > 0 {
                    visit(idx - 1);
                }
            }
        }
    }
    (ga, gb)
}

/// Result of [`Graph::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(Var, usize)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of a leaf created with [`Graph::input`] or [`Graph::param`].
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// `(parameter slot, gradient)` pairs, summed over every use of the slot.
    pub fn param_grads(&self) -> Vec<(usize, Tensor<T>)> {
        let mut out: Vec<(usize, Tensor<T>)> = Vec::new();
        for &(v, id) in &self.params {
            let Some(g) = self.get(v) else { continue };
            match out.iter_mut().find(|(slot, _)| *slot == id) {
                Some((_, existing)) => existing.add_assign(g),
                None => out.push((id, g.clone())),
            }
        }
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central-difference check of d(build)/d(inputs) at every coordinate.
    fn check(inputs: Vec<Tensor<f64>>, build: impl Fn(&mut Graph<f64>, &[Var]) -> Var) {
        let eval = |xs: &[Tensor<f64>]| {
            let mut g = Graph::new();
            let vars: Vec<Var> = xs.iter().map(|x| g.input(x.clone())).collect();
            let out = build(&mut g, &vars);
            (g.value(out).item(), g, vars, out)
        };
        let (_, g, vars, out) = eval(&inputs);
        let grads = g.backward(out);
        let h = 1e-6;
        for (k, x) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Tensor::zeros(x.shape()));
            for i in 0..x.numel() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[i] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[i] -= h;
                let fd = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
                let a = analytic.data()[i];
                assert!(
                    (a - fd).abs() <= 1e-5 * a.abs().max(fd.abs()).max(1e-3),
                    "input {k} coord {i}: analytic {a} vs fd {fd}"
                );
            }
        }
    }

    #[test]
    fn gradients_of_pointwise_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = random(&[2, 3, 4, 4], &mut rng);
        let b = random(&[2, 3, 4, 4], &mut rng);
        let t = random(&[2, 3, 4, 4], &mut rng);
        check(vec![a, b, t], |g, v| {
            let s = g.sigmoid(v[0]);
            let th = g.tanh(v[1]);
            let m = g.mul(s, th);
            let om = g.one_minus(m);
            let r = g.relu(v[0]);
            let d = g.sub(om, r);
            let e = g.add(d, v[1]);
            g.l1_loss(e, v[2], 0.5)
        });
    }

    #[test]
    fn gradients_of_structural_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let a = random(&[2, 2, 4, 4], &mut rng);
        let b = random(&[2, 1, 4, 4], &mut rng);
        let t = random(&[1, 6, 8, 8], &mut rng);
        check(vec![a, b, t], |g, v| {
            let cat = g.concat_channels(&[v[0], v[1]]);
            let rep = g.repeat_channels(cat, 2);
            let nb = g.narrow_batch(rep, 1, 1);
            let aff = g.channel_affine(nb, &[0.5, 2.0, -1.0, 1.5, 0.25, 3.0], &[0.1; 6]);
            let up = g.upsample2x(aff);
            let nc = g.narrow_channels(up, 0, 6);
            g.intensity_loss(nc, v[2], 1.0)
        });
    }

    #[test]
    fn gradients_of_conv_pool_attention_and_losses() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = random(&[2, 3, 6, 6], &mut rng);
        let w = random(&[4, 3, 3, 3], &mut rng);
        let bias = random(&[4], &mut rng);
        let target = random(&[2, 4, 3, 3], &mut rng);
        check(vec![x, w, bias, target], |g, v| {
            let y = g.conv2d(v[0], v[1], Some(v[2]), ConvGeom { kernel: 3, stride: 2, pad: 1 });
            let th = g.narrow_channels(y, 0, 2);
            let ph = g.narrow_channels(y, 1, 2);
            let gg = g.narrow_channels(y, 2, 2);
            let att = g.attention(th, ph, gg);
            let both = g.concat_channels(&[att, att]);
            let l1 = g.grad_diff_loss(both, v[3], 0.3);
            let y2 = g.conv2d(v[0], v[1], None, ConvGeom { kernel: 3, stride: 1, pad: 1 });
            let p = g.maxpool2(y2);
            let l2 = g.intensity_loss(p, v[3], 0.7);
            g.weighted_sum(&[(l1, 1.0), (l2, 2.0)])
        });
    }

    #[test]
    fn frozen_params_get_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(Tensor::full(&[1, 1, 2, 2], 1.0));
        let w_train = g.param(Tensor::full(&[1, 1, 1, 1], 2.0), 0, true);
        let w_frozen = g.param(Tensor::full(&[1, 1, 1, 1], 3.0), 1, false);
        let geom = ConvGeom { kernel: 1, stride: 1, pad: 0 };
        let y = g.conv2d(x, w_train, None, geom);
        let z = g.conv2d(y, w_frozen, None, geom);
        let zero = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let loss = g.l1_loss(z, zero, 1.0);
        let grads = g.backward(loss);
        let pg = grads.param_grads();
        assert_eq!(pg.len(), 1);
        assert_eq!(pg[0].0, 0);
        assert_eq!(pg[0].1.data(), &[12.0]);
    }

    #[test]
    fn inference_tape_records_no_gradients() {
        let mut g = Graph::<f32>::inference();
        let x = g.input(Tensor::full(&[1, 1, 2, 2], 1.0));
        let y = g.tanh(x);
        let zero = g.constant(Tensor::zeros(&[1, 1, 2, 2]));
        let l = g.l1_loss(y, zero, 1.0);
        assert!(g.backward(l).get(x).is_none());
    }
}
