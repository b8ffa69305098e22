//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] is built fresh for every forward pass. Leaves are either
//! trainable (`param`) or constant (`constant`); gradients are only
//! propagated into sub-graphs that reach a trainable leaf.

use crate::error::{Error, Result};
use crate::tensor::{self, col2im, gemm, im2col, ConvGeom, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    MatMul(Var, Var),
    Transpose(Var),
    SoftmaxRows(Var),
    Reshape(Var),
    PixelShuffle(Var, usize),
    Gram(Var),
    MaxPool2 { x: Var, argmax: Vec<usize> },
    GlobalAvgPool(Var),
    Crop { x: Var, y0: usize, x0: usize },
    ConcatRows(Var, Var),
    Sum(Var),
    Mean(Var),
    SquaredDistance { a: Var, b: Var, mean: bool },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` did not reach the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(t) => t.add_assign(&g),
        None => *slot = Some(g),
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let v = self.value(a).map(|x| x * k);
        let ng = self.ng(&[a]);
        self.push(v, Op::Scale(a, k), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        let ng = self.ng(&[a]);
        self.push(v, Op::Relu(a), ng)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let ng = self.ng(&[a]);
        self.push(v, Op::LeakyRelu(a, slope), ng)
    }

    /// `ln(1 + e^x)`, computed without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self
            .value(a)
            .map(|x| x.max(0.0) + (-x.abs()).exp().ln_1p());
        let ng = self.ng(&[a]);
        self.push(v, Op::Softplus(a), ng)
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let v = tensor::conv2d(self.value(x), self.value(w), self.value(b), stride)?;
        let (c, h, wd) = self.value(x).dims3()?;
        let k = self.value(w).shape()[2];
        let geom = ConvGeom::new(c, h, wd, k, stride);
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, ng))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::MatMul(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose2()?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Transpose(a), ng))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let v = tensor::softmax_rows(self.value(a))?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::SoftmaxRows(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).clone().reshape(shape)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Reshape(a), ng))
    }

    pub fn pixel_shuffle(&mut self, a: Var, r: usize) -> Result<Var> {
        let v = tensor::pixel_shuffle(self.value(a), r)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::PixelShuffle(a, r), ng))
    }

    /// `[C,H,W] → [H·W, C]`.
    pub fn chw_to_tokens(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        let flat = self.reshape(a, &[c, h * w])?;
        self.transpose(flat)
    }

    /// `[H·W, C] → [C,H,W]`.
    pub fn tokens_to_chw(&mut self, a: Var, h: usize, w: usize) -> Result<Var> {
        let (t, c) = self.value(a).dims2()?;
        if t != h * w {
            return Err(Error::invalid(format!("{t} tokens cannot form {h}×{w}")));
        }
        let tr = self.transpose(a)?;
        self.reshape(tr, &[c, h, w])
    }

    /// Normalized Gram matrix `G = F·Fᵀ / (C·H·W)` of a `[C,H,W]` map.
    pub fn gram(&mut self, a: Var) -> Result<Var> {
        let v = gram_matrix(self.value(a))?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Gram(a), ng))
    }

    /// 2×2 max pooling, stride 2, with partial windows kept at odd edges.
    pub fn max_pool2(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let src = self.value(a).data();
        let mut out = vec![0.0; c * oh * ow];
        let mut argmax = vec![0usize; c * oh * ow];
        for ch in 0..c {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut idx = 0;
                    for y in 2 * oy..(2 * oy + 2).min(h) {
                        for x in 2 * ox..(2 * ox + 2).min(w) {
                            let i = (ch * h + y) * w + x;
                            if src[i] > best {
                                best = src[i];
                                idx = i;
                            }
                        }
                    }
                    let o = (ch * oh + oy) * ow + ox;
                    out[o] = best;
                    argmax[o] = idx;
                }
            }
        }
        let v = Tensor::from_vec(&[c, oh, ow], out)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::MaxPool2 { x: a, argmax }, ng))
    }

    /// `[C,H,W] → [C]` spatial mean.
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let (c, h, w) = self.value(a).dims3()?;
        let n = (h * w) as f64;
        let data = self
            .value(a)
            .data()
            .chunks(h * w)
            .map(|p| p.iter().sum::<f64>() / n)
            .collect();
        let v = Tensor::from_vec(&[c], data)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::GlobalAvgPool(a), ng))
    }

    /// Spatial window `[y0, y0+h) × [x0, x0+w)` of a `[C,H,W]` map.
    pub fn crop(&mut self, a: Var, y0: usize, x0: usize, h: usize, w: usize) -> Result<Var> {
        let v = crop_chw(self.value(a), y0, x0, h, w)?;
        let ng = self.ng(&[a]);
        Ok(self.push(v, Op::Crop { x: a, y0, x0 }, ng))
    }

    /// Stack two 2-d tensors of equal width vertically.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2()?;
        let (rb, cb) = self.value(b).dims2()?;
        if ca != cb {
            return Err(Error::invalid(format!("concat width mismatch: {ca} vs {cb}")));
        }
        let mut data = self.value(a).data().to_vec();
        data.extend_from_slice(self.value(b).data());
        let v = Tensor::from_vec(&[ra + rb, ca], data)?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(v, Op::ConcatRows(a, b), ng))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(v, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        let ng = self.ng(&[a]);
        self.push(v, Op::Mean(a), ng)
    }

    /// `Σ(a−b)²`, or its mean when `mean` is set.
    pub fn squared_distance(&mut self, a: Var, b: Var, mean: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        ta.check_same_shape(tb)?;
        let mut s: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| (x - y) * (x - y))
            .sum();
        if mean {
            s /= ta.len() as f64;
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::scalar(s), Op::SquaredDistance { a, b, mean }, ng))
    }

    /// Weighted sum of scalar vars.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var> {
        let mut acc: Option<Var> = None;
        for &(v, w) in terms {
            let t = self.scale(v, w);
            acc = Some(match acc {
                None => t,
                Some(a) => self.add(a, t)?,
            });
        }
        acc.ok_or_else(|| Error::invalid("weighted_sum of no terms"))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid("backward needs a scalar loss"));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            let needs = |v: Var| self.nodes[v.0].needs_grad;
            match &node.op {
                Op::Leaf => {
                    grads[i] = Some(gy);
                    continue;
                }
                Op::Add(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads[a.0], gy.clone());
                    }
                    if needs(*b) {
                        accumulate(&mut grads[b.0], gy.clone());
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads[a.0], gy.clone());
                    }
                    if needs(*b) {
                        accumulate(&mut grads[b.0], gy.map(|v| -v));
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        accumulate(&mut grads[a.0], gy.zip_map(self.value(*b), |g, y| g * y)?);
                    }
                    if needs(*b) {
                        accumulate(&mut grads[b.0], gy.zip_map(self.value(*a), |g, x| g * x)?);
                    }
                }
                Op::Scale(a, k) => {
                    let k = *k;
                    accumulate(&mut grads[a.0], gy.map(|g| g * k));
                }
                Op::Relu(a) => {
                    let g = gy.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { 0.0 })?;
                    accumulate(&mut grads[a.0], g);
                }
                Op::LeakyRelu(a, s) => {
                    let s = *s;
                    let g = gy.zip_map(self.value(*a), |g, x| if x > 0.0 { g } else { s * g })?;
                    accumulate(&mut grads[a.0], g);
                }
                Op::Softplus(a) => {
                    let g = gy.zip_map(self.value(*a), |g, x| g / (1.0 + (-x).exp()))?;
                    accumulate(&mut grads[a.0], g);
                }
                Op::Conv2d { x, w, b, geom } => {
                    let out_c = self.value(*w).shape()[0];
                    let n = geom.col_cols();
                    let kk = geom.col_rows();
                    if needs(*b) {
                        let db: Vec<f64> = gy.data().chunks(n).map(|c| c.iter().sum()).collect();
                        accumulate(&mut grads[b.0], Tensor::from_vec(&[out_c], db)?);
                    }
                    if needs(*w) {
                        let col = im2col(self.value(*x).data(), geom);
                        let mut dw = vec![0.0; out_c * kk];
                        gemm(out_c, n, kk, gy.data(), false, &col, true, &mut dw, 0.0);
                        let shape = self.value(*w).shape().to_vec();
                        accumulate(&mut grads[w.0], Tensor::from_vec(&shape, dw)?);
                    }
                    if needs(*x) {
                        let mut dcol = vec![0.0; kk * n];
                        gemm(kk, out_c, n, self.value(*w).data(), true, gy.data(), false, &mut dcol, 0.0);
                        let dx = col2im(&dcol, geom);
                        let shape = self.value(*x).shape().to_vec();
                        accumulate(&mut grads[x.0], Tensor::from_vec(&shape, dx)?);
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = self.value(*a).dims2()?;
                    let (_, n) = self.value(*b).dims2()?;
                    if needs(*a) {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, gy.data(), false, self.value(*b).data(), true, &mut da, 0.0);
                        accumulate(&mut grads[a.0], Tensor::from_vec(&[m, k], da)?);
                    }
                    if needs(*b) {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, self.value(*a).data(), true, gy.data(), false, &mut db, 0.0);
                        accumulate(&mut grads[b.0], Tensor::from_vec(&[k, n], db)?);
                    }
                }
                Op::Transpose(a) => {
                    accumulate(&mut grads[a.0], gy.transpose2()?);
                }
                Op::SoftmaxRows(a) => {
                    let s = &node.value;
                    let (_, c) = s.dims2()?;
                    let mut g = gy.data().to_vec();
                    for (grow, srow) in g.chunks_mut(c).zip(s.data().chunks(c)) {
                        let dot: f64 = grow.iter().zip(srow).map(|(g, s)| g * s).sum();
                        for (gv, sv) in grow.iter_mut().zip(srow) {
                            *gv = sv * (*gv - dot);
                        }
                    }
                    accumulate(&mut grads[a.0], Tensor::from_vec(s.shape(), g)?);
                }
                Op::Reshape(a) => {
                    let shape = self.value(*a).shape().to_vec();
                    accumulate(&mut grads[a.0], gy.reshape(&shape)?);
                }
                Op::PixelShuffle(a, r) => {
                    accumulate(&mut grads[a.0], tensor::pixel_unshuffle(&gy, *r)?);
                }
                Op::Gram(a) => {
                    // dL/dF = (Gy + Gyᵀ)·F / (C·H·W)
                    let f = self.value(*a);
                    let (c, h, w) = f.dims3()?;
                    let n = h * w;
                    let norm = 1.0 / (c * n) as f64;
                    let sym = gy.zip_map(&gy.transpose2()?, |p, q| (p + q) * norm)?;
                    let mut df = vec![0.0; c * n];
                    gemm(c, c, n, sym.data(), false, f.data(), false, &mut df, 0.0);
                    accumulate(&mut grads[a.0], Tensor::from_vec(f.shape(), df)?);
                }
                Op::MaxPool2 { x, argmax } => {
                    let mut dx = Tensor::zeros(self.value(*x).shape());
                    let d = dx.data_mut();
                    for (o, &src) in argmax.iter().enumerate() {
                        d[src] += gy.data()[o];
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::GlobalAvgPool(a) => {
                    let (c, h, w) = self.value(*a).dims3()?;
                    let n = h * w;
                    let mut dx = Vec::with_capacity(c * n);
                    for &g in gy.data() {
                        dx.extend(std::iter::repeat_n(g / n as f64, n));
                    }
                    accumulate(&mut grads[a.0], Tensor::from_vec(&[c, h, w], dx)?);
                }
                Op::Crop { x, y0, x0 } => {
                    let (c, h, w) = self.value(*x).dims3()?;
                    let (_, ch, cw) = gy.dims3()?;
                    let mut dx = Tensor::zeros(&[c, h, w]);
                    let d = dx.data_mut();
                    for k in 0..c {
                        for y in 0..ch {
                            for xx in 0..cw {
                                d[(k * h + y0 + y) * w + x0 + xx] += gy.data()[(k * ch + y) * cw + xx];
                            }
                        }
                    }
                    accumulate(&mut grads[x.0], dx);
                }
                Op::ConcatRows(a, b) => {
                    let na = self.value(*a).len();
                    if needs(*a) {
                        let t = Tensor::from_vec(self.value(*a).shape(), gy.data()[..na].to_vec())?;
                        accumulate(&mut grads[a.0], t);
                    }
                    if needs(*b) {
                        let t = Tensor::from_vec(self.value(*b).shape(), gy.data()[na..].to_vec())?;
                        accumulate(&mut grads[b.0], t);
                    }
                }
                Op::Sum(a) => {
                    let g = gy.item();
                    accumulate(&mut grads[a.0], Tensor::full(self.value(*a).shape(), g));
                }
                Op::Mean(a) => {
                    let t = self.value(*a);
                    let g = gy.item() / t.len() as f64;
                    accumulate(&mut grads[a.0], Tensor::full(t.shape(), g));
                }
                Op::SquaredDistance { a, b, mean } => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let mut k = 2.0 * gy.item();
                    if *mean {
                        k /= ta.len() as f64;
                    }
                    let diff = ta.zip_map(tb, |x, y| k * (x - y))?;
                    if needs(*b) {
                        accumulate(&mut grads[b.0], diff.map(|v| -v));
                    }
                    if needs(*a) {
                        accumulate(&mut grads[a.0], diff);
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Normalized Gram matrix of a `[C,H,W]` map.
pub fn gram_matrix(f: &Tensor) -> Result<Tensor> {
    let (c, h, w) = f.dims3()?;
    let n = h * w;
    if c == 0 || n == 0 {
        return Err(Error::invalid("gram of an empty feature map"));
    }
    if !f.is_finite() {
        return Err(Error::invalid("gram input has non-finite entries"));
    }
    let mut g = vec![0.0; c * c];
    gemm(c, n, c, f.data(), false, f.data(), true, &mut g, 0.0);
    let norm = 1.0 / (c * n) as f64;
    g.iter_mut().for_each(|v| *v *= norm);
    // exact symmetry regardless of accumulation order
    for i in 0..c {
        for j in (i + 1)..c {
            g[j * c + i] = g[i * c + j];
        }
    }
    Tensor::from_vec(&[c, c], g)
}

pub fn crop_chw(t: &Tensor, y0: usize, x0: usize, h: usize, w: usize) -> Result<Tensor> {
    let (c, th, tw) = t.dims3()?;
    if y0 + h > th || x0 + w > tw || h == 0 || w == 0 {
        return Err(Error::invalid(format!(
            "crop {h}×{w} at ({y0},{x0}) exceeds {th}×{tw}"
        )));
    }
    let mut out = Vec::with_capacity(c * h * w);
    for k in 0..c {
        for y in 0..h {
            let row = (k * th + y0 + y) * tw + x0;
            out.extend_from_slice(&t.data()[row..row + w]);
        }
    }
    Tensor::from_vec(&[c, h, w], out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Checks d(loss)/d(input) of `build` against central differences.
    fn check(shape: &[usize], build: impl Fn(&mut Graph, Var) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x0 = rand_tensor(&mut rng, shape);
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss).unwrap();
        let analytic = grads.get(x).unwrap().clone();
        let eps = 1e-5;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.param(xp);
                let l = build(&mut g, x);
                g.value(l).item()
            };
            let numeric = (eval(eps) - eval(-eps)) / (2.0 * eps);
            let a = analytic.data()[i];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            assert!(
                (a - numeric).abs() / denom < 1e-5,
                "element {i}: analytic {a} vs numeric {numeric}"
            );
        }
    }

    fn probe(g: &mut Graph, v: Var) -> Var {
        // fixed random weighting so every output element matters
        let shape = g.value(v).shape().to_vec();
        let n: usize = shape.iter().product();
        let w = Tensor::from_vec(&shape, (0..n).map(|i| ((i * 37 % 11) as f64 - 5.0) / 7.0).collect())
            .unwrap();
        let wv = g.constant(w);
        let m = g.mul(v, wv).unwrap();
        g.sum(m)
    }

    #[test]
    fn conv_grad() {
        for stride in [1, 2] {
            check(&[2, 6, 5], |g, x| {
                let mut rng = ChaCha8Rng::seed_from_u64(3);
                let w = g.constant(rand_tensor(&mut rng, &[3, 2, 3, 3]));
                let b = g.constant(rand_tensor(&mut rng, &[3]));
                let y = g.conv2d(x, w, b, stride).unwrap();
                probe(g, y)
            });
        }
        // weight gradient
        check(&[3, 2, 3, 3], |g, w| {
            let mut rng = ChaCha8Rng::seed_from_u64(4);
            let x = g.constant(rand_tensor(&mut rng, &[2, 5, 5]));
            let b = g.constant(Tensor::zeros(&[3]));
            let y = g.conv2d(x, w, b, 2).unwrap();
            probe(g, y)
        });
    }

    #[test]
    fn attention_chain_grad() {
        check(&[4, 3], |g, x| {
            let mut rng = ChaCha8Rng::seed_from_u64(5);
            let kv = g.constant(rand_tensor(&mut rng, &[5, 3]));
            let kt = g.transpose(kv).unwrap();
            let s = g.matmul(x, kt).unwrap();
            let s = g.scale(s, 0.5);
            let a = g.softmax_rows(s).unwrap();
            let o = g.matmul(a, kv).unwrap();
            probe(g, o)
        });
    }

    #[test]
    fn gram_pool_shuffle_grad() {
        check(&[4, 3, 5], |g, x| {
            let gm = g.gram(x).unwrap();
            probe(g, gm)
        });
        check(&[2, 5, 3], |g, x| {
            let p = g.max_pool2(x).unwrap();
            let a = g.global_avg_pool(x).unwrap();
            let l1 = probe(g, p);
            let l2 = probe(g, a);
            g.add(l1, l2).unwrap()
        });
        check(&[8, 2, 3], |g, x| {
            let p = g.pixel_shuffle(x, 2).unwrap();
            let c = g.crop(p, 1, 2, 2, 3).unwrap();
            probe(g, c)
        });
    }

    #[test]
    fn elementwise_and_reductions_grad() {
        check(&[3, 4], |g, x| {
            let l = g.leaky_relu(x, 0.2);
            let r = g.relu(x);
            let s = g.softplus(x);
            let m = g.mul(l, s).unwrap();
            let d = g.sub(m, r).unwrap();
            let t = g.chw_to_tokens_like(d);
            let c = g.concat_rows(t, x).unwrap();
            let z = g.constant(Tensor::zeros(&[6, 4]));
            let sq = g.squared_distance(c, z, true).unwrap();
            let mean = g.mean(x);
            g.weighted_sum(&[(sq, 1.5), (mean, -0.5)]).unwrap()
        });
    }

    impl Graph {
        fn chw_to_tokens_like(&mut self, v: Var) -> Var {
            let r = self.reshape(v, &[1, 3, 4]).unwrap();
            let t = self.chw_to_tokens(r).unwrap();
            let back = self.tokens_to_chw(t, 3, 4).unwrap();
            self.reshape(back, &[3, 4]).unwrap()
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::full(&[2], 1.0));
        let p = g.param(Tensor::full(&[2], 2.0));
        let m = g.mul(c, p).unwrap();
        let s = g.sum(m);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(c).is_none());
        assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0]);
    }
}
