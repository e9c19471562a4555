//! Conditioned dense residual networks with hand-written reverse mode, and Adam.
//!
//! Layout of one network:
//!
//! ```text
//! stem:  [mask, y] -> W_in -> (residual block) x stem_blocks
//! trunk: [silu(stem), c_in * x, embed(log sigma)] -> W_in -> (residual block) x trunk_blocks
//! head:  silu(trunk) -> W_head        (d outputs for the actor, 1 for the critic)
//! ```
//!
//! With `scale_output` the head is multiplied by `c_out = sigma_data * c_in`,
//! the contraction a single-Gaussian probability flow applies to a control
//! held at noise level `sigma`.
//!
//! A residual block is `h + W2 silu(W1 silu(h) + b1) + b2`.

use crate::error::{shape_check, Error, Result};
use crate::tasks::Observable;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadKind {
    Vector,
    Scalar,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NetSpec {
    pub dim: usize,
    pub embed_width: usize,
    pub stem_width: usize,
    pub stem_blocks: usize,
    pub trunk_width: usize,
    pub trunk_blocks: usize,
    pub head: HeadKind,
    /// Data scale used for the state input scaling `1 / sqrt(sigma^2 + sigma_data^2)`.
    pub sigma_data: f64,
    /// Multiply the head by `sigma_data / sqrt(sigma^2 + sigma_data^2)`.
    pub scale_output: bool,
}

impl NetSpec {
    pub fn actor(dim: usize, sigma_data: f64) -> Self {
        Self {
            dim,
            embed_width: 16,
            stem_width: 32,
            stem_blocks: 2,
            trunk_width: 64,
            trunk_blocks: 4,
            head: HeadKind::Vector,
            sigma_data,
            scale_output: true,
        }
    }

    pub fn critic(dim: usize, sigma_data: f64) -> Self {
        Self { head: HeadKind::Scalar, scale_output: false, ..Self::actor(dim, sigma_data) }
    }

    pub fn validate(&self) -> Result<()> {
        let widths = [
            ("dim", self.dim),
            ("embed_width", self.embed_width),
            ("stem_width", self.stem_width),
            ("stem_blocks", self.stem_blocks),
            ("trunk_width", self.trunk_width),
            ("trunk_blocks", self.trunk_blocks),
        ];
        for (name, w) in widths {
            if w == 0 {
                return Err(Error::config(name, "must be at least 1"));
            }
        }
        if self.embed_width % 2 != 0 {
            return Err(Error::config("embed_width", "must be even"));
        }
        if !(self.sigma_data.is_finite() && self.sigma_data > 0.0) {
            return Err(Error::config("sigma_data", "must be positive"));
        }
        Ok(())
    }

    pub fn out_dim(&self) -> usize {
        match self.head {
            HeadKind::Vector => self.dim,
            HeadKind::Scalar => 1,
        }
    }

    pub fn param_count(&self) -> usize {
        let dense = |rows: usize, cols: usize| rows * cols + rows;
        let (s, t) = (self.stem_width, self.trunk_width);
        dense(s, 2 * self.dim)
            + self.stem_blocks * 2 * dense(s, s)
            + dense(t, s + self.dim + self.embed_width)
            + self.trunk_blocks * 2 * dense(t, t)
            + dense(self.out_dim(), t)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayoutEntry {
    pub name: String,
    pub offset: usize,
    pub shape: (usize, usize),
}

impl LayoutEntry {
    pub fn len(&self) -> usize {
        self.shape.0 * self.shape.1
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named slices of the flat parameter vector, in storage order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    entries: Vec<LayoutEntry>,
    len: usize,
}

impl Layout {
    fn push(&mut self, name: String, rows: usize, cols: usize) -> usize {
        let offset = self.len;
        self.entries.push(LayoutEntry { name, offset, shape: (rows, cols) });
        self.len += rows * cols;
        offset
    }

    pub fn entries(&self) -> &[LayoutEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, name: &str) -> Option<&LayoutEntry> {
        self.entries.iter().find(|e| e.name == name)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    values: Vec<f64>,
    layout: Layout,
}

impl ParamVector {
    pub fn from_values(layout: Layout, values: Vec<f64>) -> Result<Self> {
        shape_check("parameter vector", layout.len(), values.len())?;
        Ok(Self { values, layout })
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn slice(&self, name: &str) -> Option<&[f64]> {
        self.layout.get(name).map(|e| &self.values[e.offset..e.offset + e.len()])
    }
}

#[derive(Debug, Clone, Copy)]
struct Dense {
    w: usize,
    b: usize,
    rows: usize,
    cols: usize,
}

impl Dense {
    fn new(layout: &mut Layout, name: &str, rows: usize, cols: usize) -> Self {
        let w = layout.push(format!("{name}.w"), rows, cols);
        let b = layout.push(format!("{name}.b"), rows, 1);
        Self { w, b, rows, cols }
    }

    fn forward(&self, p: &[f64], x: &[f64], out: &mut Vec<f64>) {
        out.clear();
        let w = &p[self.w..self.w + self.rows * self.cols];
        let b = &p[self.b..self.b + self.rows];
        out.extend(w.chunks_exact(self.cols).zip(b).map(|(row, bi)| bi + dot(row, x)));
    }

    /// Accumulates `dW += g x^T`, `db += g` and, when requested, `dx += W^T g`.
    fn backward(&self, p: &[f64], x: &[f64], g: &[f64], grad: &mut [f64], dx: Option<&mut [f64]>) {
        let n = self.rows * self.cols;
        for (dw, gi) in grad[self.w..self.w + n].chunks_exact_mut(self.cols).zip(g) {
            axpy(*gi, x, dw);
        }
        for (db, gi) in grad[self.b..self.b + self.rows].iter_mut().zip(g) {
            *db += gi;
        }
        if let Some(dx) = dx {
            for (row, gi) in p[self.w..self.w + n].chunks_exact(self.cols).zip(g) {
                axpy(*gi, row, dx);
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Block {
    l1: Dense,
    l2: Dense,
}

#[derive(Debug, Clone, Default)]
struct BlockCache {
    h: Vec<f64>,
    a: Vec<f64>,
    r: Vec<f64>,
    q: Vec<f64>,
}

/// Intermediate activations of one forward pass.
#[derive(Debug, Clone, Default)]
pub struct Cache {
    cond: Vec<f64>,
    stem: Vec<BlockCache>,
    stem_out: Vec<f64>,
    z: Vec<f64>,
    trunk: Vec<BlockCache>,
    trunk_out: Vec<f64>,
    head_in: Vec<f64>,
    c_in: f64,
    c_out: f64,
    out: Vec<f64>,
}

impl Cache {
    pub fn output(&self) -> &[f64] {
        &self.out
    }
}

/// Inputs of one network evaluation.
#[derive(Debug, Clone, Copy)]
pub struct NetInput<'a> {
    pub sigma: f64,
    pub x: &'a [f64],
    pub xi: &'a Observable,
}

#[derive(Debug, Clone)]
pub struct Network {
    spec: NetSpec,
    layout: Layout,
    stem_in: Dense,
    stem: Vec<Block>,
    trunk_in: Dense,
    trunk: Vec<Block>,
    head: Dense,
    freqs: Vec<f64>,
}

impl Network {
    pub fn new(spec: NetSpec) -> Result<Self> {
        spec.validate()?;
        let mut layout = Layout { entries: Vec::new(), len: 0 };
        let (s, t, d) = (spec.stem_width, spec.trunk_width, spec.dim);
        let stem_in = Dense::new(&mut layout, "stem.in", s, 2 * d);
        let stem = (0..spec.stem_blocks)
            .map(|i| Block {
                l1: Dense::new(&mut layout, &format!("stem.{i}.l1"), s, s),
                l2: Dense::new(&mut layout, &format!("stem.{i}.l2"), s, s),
            })
            .collect();
        let trunk_in = Dense::new(&mut layout, "trunk.in", t, s + d + spec.embed_width);
        let trunk = (0..spec.trunk_blocks)
            .map(|i| Block {
                l1: Dense::new(&mut layout, &format!("trunk.{i}.l1"), t, t),
                l2: Dense::new(&mut layout, &format!("trunk.{i}.l2"), t, t),
            })
            .collect();
        let head = Dense::new(&mut layout, "head", spec.out_dim(), t);
        debug_assert_eq!(layout.len(), spec.param_count());
        Ok(Self { spec, layout, stem_in, stem, trunk_in, trunk, head, freqs: frequencies(spec.embed_width / 2) })
    }

    pub fn spec(&self) -> &NetSpec {
        &self.spec
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param_count(&self) -> usize {
        self.layout.len()
    }

    pub fn zeros(&self) -> ParamVector {
        ParamVector { values: vec![0.0; self.layout.len()], layout: self.layout.clone() }
    }

    /// Uniform `U(-1/sqrt(fan_in), 1/sqrt(fan_in))` weights, zero biases,
    /// and a zero head so the initial output is identically zero.
    pub fn init<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> ParamVector {
        let mut p = self.zeros();
        let dense: Vec<Dense> = std::iter::once(self.stem_in)
            .chain(self.stem.iter().flat_map(|b| [b.l1, b.l2]))
            .chain(std::iter::once(self.trunk_in))
            .chain(self.trunk.iter().flat_map(|b| [b.l1, b.l2]))
            .collect();
        for l in dense {
            let bound = 1.0 / (l.cols as f64).sqrt();
            for w in &mut p.values[l.w..l.w + l.rows * l.cols] {
                *w = rng.gen_range(-bound..bound);
            }
        }
        p
    }

    fn check(&self, params: &ParamVector, input: &NetInput) -> Result<()> {
        shape_check("parameters", self.layout.len(), params.len())?;
        shape_check("network state input", self.spec.dim, input.x.len())?;
        shape_check("network conditioning", self.spec.dim, input.xi.dim())?;
        Ok(())
    }

    pub fn forward(&self, params: &ParamVector, input: &NetInput) -> Result<Vec<f64>> {
        let mut cache = Cache::default();
        self.forward_cached(params, input, &mut cache)?;
        Ok(cache.out)
    }

    pub fn forward_cached(&self, params: &ParamVector, input: &NetInput, cache: &mut Cache) -> Result<()> {
        self.check(params, input)?;
        let p = params.values();
        let embed = time_embed_with(input.sigma, &self.freqs)?;

        cache.cond.clear();
        cache.cond.extend_from_slice(input.xi.mask.bits());
        cache.cond.extend_from_slice(&input.xi.observation);
        let mut h = Vec::new();
        self.stem_in.forward(p, &cache.cond, &mut h);
        h = run_blocks(&self.stem, p, h, &mut cache.stem);
        cache.stem_out = h;

        cache.c_in = 1.0 / (input.sigma * input.sigma + self.spec.sigma_data * self.spec.sigma_data).sqrt();
        cache.z.clear();
        cache.z.extend(cache.stem_out.iter().map(|v| silu(*v)));
        cache.z.extend(input.x.iter().map(|v| v * cache.c_in));
        cache.z.extend_from_slice(&embed);
        let mut h = Vec::new();
        self.trunk_in.forward(p, &cache.z, &mut h);
        h = run_blocks(&self.trunk, p, h, &mut cache.trunk);
        cache.head_in = h.iter().map(|v| silu(*v)).collect();
        cache.trunk_out = h;
        let mut out = std::mem::take(&mut cache.out);
        self.head.forward(p, &cache.head_in, &mut out);
        cache.c_out = if self.spec.scale_output { self.spec.sigma_data * cache.c_in } else { 1.0 };
        if self.spec.scale_output {
            out.iter_mut().for_each(|o| *o *= cache.c_out);
        }
        cache.out = out;
        Ok(())
    }

    /// Accumulates the gradient of `<upstream, output>` into `grad` and returns
    /// its gradient with respect to the state input `x`.
    pub fn backward_cached(
        &self,
        params: &ParamVector,
        cache: &Cache,
        upstream: &[f64],
        grad: &mut [f64],
    ) -> Result<Vec<f64>> {
        shape_check("upstream cotangent", self.spec.out_dim(), upstream.len())?;
        shape_check("gradient buffer", self.layout.len(), grad.len())?;
        shape_check("parameters", self.layout.len(), params.len())?;
        if cache.out.len() != self.spec.out_dim() {
            return Err(Error::State("backward called without a matching forward pass".into()));
        }
        let p = params.values();
        let t = self.spec.trunk_width;

        let mut g_in = vec![0.0; t];
        let scaled: Vec<f64>;
        let upstream = if self.spec.scale_output {
            scaled = upstream.iter().map(|u| u * cache.c_out).collect();
            &scaled[..]
        } else {
            upstream
        };
        self.head.backward(p, &cache.head_in, upstream, grad, Some(&mut g_in));
        let mut g: Vec<f64> = g_in.iter().zip(&cache.trunk_out).map(|(gi, h)| gi * silu_prime(*h)).collect();
        g = back_blocks(&self.trunk, p, &cache.trunk, g, grad);

        let mut gz = vec![0.0; cache.z.len()];
        self.trunk_in.backward(p, &cache.z, &g, grad, Some(&mut gz));
        let s = self.spec.stem_width;
        let d = self.spec.dim;
        let gx: Vec<f64> = gz[s..s + d].iter().map(|v| v * cache.c_in).collect();
        let mut g: Vec<f64> = gz[..s].iter().zip(&cache.stem_out).map(|(gi, h)| gi * silu_prime(*h)).collect();
        g = back_blocks(&self.stem, p, &cache.stem, g, grad);
        self.stem_in.backward(p, &cache.cond, &g, grad, None);
        Ok(gx)
    }

    /// Gradient of `<upstream, output>` with respect to the parameters.
    pub fn backward(&self, params: &ParamVector, input: &NetInput, upstream: &[f64]) -> Result<Vec<f64>> {
        let mut cache = Cache::default();
        self.forward_cached(params, input, &mut cache)?;
        let mut grad = vec![0.0; self.layout.len()];
        self.backward_cached(params, &cache, upstream, &mut grad)?;
        Ok(grad)
    }
}

fn run_blocks(blocks: &[Block], p: &[f64], mut h: Vec<f64>, caches: &mut Vec<BlockCache>) -> Vec<f64> {
    caches.resize_with(blocks.len(), BlockCache::default);
    for (blk, c) in blocks.iter().zip(caches.iter_mut()) {
        c.a.clear();
        c.a.extend(h.iter().map(|v| silu(*v)));
        blk.l1.forward(p, &c.a, &mut c.r);
        c.q.clear();
        c.q.extend(c.r.iter().map(|v| silu(*v)));
        let mut upd = Vec::with_capacity(h.len());
        blk.l2.forward(p, &c.q, &mut upd);
        for (u, hi) in upd.iter_mut().zip(&h) {
            *u += hi;
        }
        c.h = std::mem::replace(&mut h, upd);
    }
    h
}

fn back_blocks(blocks: &[Block], p: &[f64], caches: &[BlockCache], mut g: Vec<f64>, grad: &mut [f64]) -> Vec<f64> {
    for (blk, c) in blocks.iter().zip(caches).rev() {
        let mut gq = vec![0.0; c.q.len()];
        blk.l2.backward(p, &c.q, &g, grad, Some(&mut gq));
        let gr: Vec<f64> = gq.iter().zip(&c.r).map(|(gi, r)| gi * silu_prime(*r)).collect();
        let mut ga = vec![0.0; c.a.len()];
        blk.l1.backward(p, &c.a, &gr, grad, Some(&mut ga));
        for ((gi, gai), h) in g.iter_mut().zip(&ga).zip(&c.h) {
            *gi += gai * silu_prime(*h);
        }
    }
    g
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

fn silu_prime(x: f64) -> f64 {
    let s = sigmoid(x);
    s * (1.0 + x * (1.0 - s))
}

const FREQ_MIN: f64 = 0.25;
const FREQ_MAX: f64 = 4.0;

fn frequencies(n: usize) -> Vec<f64> {
    if n == 1 {
        return vec![FREQ_MIN];
    }
    let ratio = FREQ_MAX / FREQ_MIN;
    (0..n).map(|j| FREQ_MIN * ratio.powf(j as f64 / (n - 1) as f64)).collect()
}

fn time_embed_with(sigma: f64, freqs: &[f64]) -> Result<Vec<f64>> {
    if !(sigma > 0.0 && sigma.is_finite()) {
        return Err(Error::Domain(format!("time embedding needs sigma > 0, got {sigma}")));
    }
    let l = sigma.ln();
    let mut out: Vec<f64> = freqs.iter().map(|w| (w * l).sin()).collect();
    out.extend(freqs.iter().map(|w| (w * l).cos()));
    Ok(out)
}

/// `[sin(w_j log sigma), cos(w_j log sigma)]` over geometric frequencies in [0.25, 4].
pub fn time_embed(sigma: f64, width: usize) -> Result<Vec<f64>> {
    if width == 0 || width % 2 != 0 {
        return Err(Error::Domain(format!("embedding width must be even and positive, got {width}")));
    }
    time_embed_with(sigma, &frequencies(width / 2))
}

/// Critic value `NN(t, x; xi) - lambda t`.
pub fn forward_critic(net: &Network, theta: &ParamVector, t: f64, input: &NetInput, lambda: f64) -> Result<f64> {
    Ok(net.forward(theta, input)?[0] - lambda * t)
}

/// Actor mean `NN(t, x; xi)`.
pub fn forward_actor(net: &Network, phi: &ParamVector, input: &NetInput) -> Result<Vec<f64>> {
    net.forward(phi, input)
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Vec<f64>,
    v: Vec<f64>,
    step: u64,
}

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamReport {
    pub grad_norm: f64,
    pub clipped: bool,
}

impl AdamState {
    pub fn new(len: usize) -> Self {
        Self { m: vec![0.0; len], v: vec![0.0; len], step: 0 }
    }

    pub fn from_parts(m: Vec<f64>, v: Vec<f64>, step: u64) -> Result<Self> {
        shape_check("adam second moment", m.len(), v.len())?;
        Ok(Self { m, v, step })
    }

    pub fn first_moment(&self) -> &[f64] {
        &self.m
    }

    pub fn second_moment(&self) -> &[f64] {
        &self.v
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Descent step on `grads`: clip to `clip_norm`, then bias-corrected Adam.
    pub fn step(&mut self, params: &mut [f64], grads: &[f64], lr: f64, clip_norm: f64) -> Result<AdamReport> {
        shape_check("parameters", self.m.len(), params.len())?;
        shape_check("gradient", self.m.len(), grads.len())?;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Domain(format!("learning rate must be positive, got {lr}")));
        }
        if !(clip_norm > 0.0) {
            return Err(Error::Domain(format!("clip norm must be positive, got {clip_norm}")));
        }
        if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
            return Err(Error::Numeric(format!("non-finite gradient entry {} at index {i}", grads[i])));
        }
        let norm = grads.iter().map(|g| g * g).sum::<f64>().sqrt();
        let clipped = norm > clip_norm;
        let scale = if clipped { clip_norm / norm } else { 1.0 };
        self.step += 1;
        let bc1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let bc2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        for ((p, g), (m, v)) in params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut())) {
            let g = g * scale;
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let mh = *m / bc1;
            let vh = *v / bc2;
            *p -= lr * mh / (vh.sqrt() + ADAM_EPS);
        }
        Ok(AdamReport { grad_norm: norm, clipped })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::streams::Streams;
    use crate::tasks::Mask;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn small(head: HeadKind) -> NetSpec {
        NetSpec {
            dim: 3,
            embed_width: 4,
            stem_width: 5,
            stem_blocks: 2,
            trunk_width: 6,
            trunk_blocks: 2,
            head,
            sigma_data: 0.5,
            scale_output: head == HeadKind::Vector,
        }
    }

    fn xi3() -> Observable {
        Observable { mask: Mask::new(vec![1.0, 0.0, 1.0], None).unwrap(), observation: vec![0.4, 0.0, -0.7] }
    }

    fn random_params(net: &Network, seed: u64) -> ParamVector {
        let mut rng = Streams::new(seed).stream("params", &[]);
        let mut p = net.zeros();
        for v in p.values_mut() {
            *v = 0.5 * rng.sample::<f64, _>(StandardNormal);
        }
        p
    }

    #[test]
    fn time_embed_examples() {
        let e = time_embed(1.0, 8).unwrap();
        assert!(e[..4].iter().all(|v| *v == 0.0));
        assert!(e[4..].iter().all(|v| *v == 1.0));
        let e2 = time_embed(3.7, 2).unwrap();
        assert!((e2[0] * e2[0] + e2[1] * e2[1] - 1.0).abs() < 1e-15);
        let a = time_embed(80.0, 16).unwrap();
        let b = time_embed(0.002, 16).unwrap();
        let diff = a.iter().zip(&b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
        assert!(diff > 0.1);
        assert!(matches!(time_embed(0.0, 4), Err(Error::Domain(_))));
        assert!(matches!(time_embed(-1.0, 4), Err(Error::Domain(_))));
        assert!(time_embed(1.0, 3).is_err());
    }

    #[test]
    fn layout_is_disjoint_and_exhaustive() {
        for head in [HeadKind::Vector, HeadKind::Scalar] {
            let spec = NetSpec { head, ..NetSpec::actor(64, 1.0) };
            let net = Network::new(spec).unwrap();
            let mut next = 0;
            for e in net.layout().entries() {
                assert_eq!(e.offset, next);
                next += e.len();
            }
            assert_eq!(next, spec.param_count());
            assert_eq!(net.param_count(), spec.param_count());
        }
    }

    #[test]
    fn default_param_counts() {
        // stem 32*128+32 + 4*(32*32+32), trunk 64*112+64 + 8*(64*64+64), head 64*64+64
        assert_eq!(NetSpec::actor(64, 1.0).param_count(), 4128 + 4224 + 7232 + 33280 + 4160);
        assert_eq!(NetSpec::critic(64, 1.0).param_count(), 4128 + 4224 + 7232 + 33280 + 65);
    }

    #[test]
    fn zero_params_give_zero_output() {
        let net = Network::new(small(HeadKind::Vector)).unwrap();
        let xi = xi3();
        let out = net.forward(&net.zeros(), &NetInput { sigma: 2.0, x: &[1.0, 2.0, 3.0], xi: &xi }).unwrap();
        assert_eq!(out, vec![0.0; 3]);
        let critic = Network::new(small(HeadKind::Scalar)).unwrap();
        let input = NetInput { sigma: 2.0, x: &[1.0, 2.0, 3.0], xi: &xi };
        let v = forward_critic(&critic, &critic.zeros(), 1.0, &input, 1e-3).unwrap();
        assert_eq!(v, -1e-3);
    }

    #[test]
    fn initialized_head_is_zero() {
        let net = Network::new(NetSpec::actor(3, 1.0)).unwrap();
        let mut rng = Streams::new(1).stream("init", &[]);
        let p = net.init(&mut rng);
        assert!(p.slice("head.w").unwrap().iter().all(|v| *v == 0.0));
        assert!(p.slice("trunk.0.l1.w").unwrap().iter().any(|v| *v != 0.0));
        let xi = xi3();
        let out = net.forward(&p, &NetInput { sigma: 0.3, x: &[1.0, 2.0, 3.0], xi: &xi }).unwrap();
        assert_eq!(out, vec![0.0; 3]);
    }

    #[test]
    fn critic_shift_and_raw_output() {
        let net = Network::new(small(HeadKind::Scalar)).unwrap();
        let p = random_params(&net, 2);
        let xi = xi3();
        let input = NetInput { sigma: 0.8, x: &[0.1, -0.3, 0.5], xi: &xi };
        let raw = net.forward(&p, &input).unwrap()[0];
        assert_eq!(forward_critic(&net, &p, 0.4, &input, 0.0).unwrap(), raw);
        // With sigma frozen the time dependence is exactly the shift.
        let v1 = forward_critic(&net, &p, 0.2, &input, 1e-3).unwrap();
        let v2 = forward_critic(&net, &p, 0.7, &input, 1e-3).unwrap();
        assert!(((v2 - v1) + 1e-3 * 0.5).abs() < 1e-15);
    }

    #[test]
    fn forward_is_deterministic_and_lipschitz() {
        let net = Network::new(small(HeadKind::Vector)).unwrap();
        let p = random_params(&net, 3);
        let xi = xi3();
        let x = [0.2, -0.1, 0.9];
        let a = net.forward(&p, &NetInput { sigma: 1.5, x: &x, xi: &xi }).unwrap();
        let b = net.forward(&p, &NetInput { sigma: 1.5, x: &x, xi: &xi }).unwrap();
        assert_eq!(a, b);
        // Local Lipschitz constant from the input Jacobian bounds finite perturbations.
        let mut lip: f64 = 0.0;
        for j in 0..3 {
            let mut up = vec![0.0; 3];
            up[j] = 1.0;
            let mut cache = Cache::default();
            net.forward_cached(&p, &NetInput { sigma: 1.5, x: &x, xi: &xi }, &mut cache).unwrap();
            let mut g = vec![0.0; net.param_count()];
            let gx = net.backward_cached(&p, &cache, &up, &mut g).unwrap();
            lip = lip.max(gx.iter().map(|v| v.abs()).sum::<f64>());
        }
        let eps = 1e-3;
        for j in 0..3 {
            let mut xp = x;
            xp[j] += eps;
            let c = net.forward(&p, &NetInput { sigma: 1.5, x: &xp, xi: &xi }).unwrap();
            let gap = a.iter().zip(&c).map(|(u, v)| (u - v).abs()).fold(0.0, f64::max);
            assert!(gap <= 1.1 * lip * eps, "gap {gap} vs L eps {}", lip * eps);
        }
    }

    #[test]
    fn shape_errors() {
        let net = Network::new(small(HeadKind::Vector)).unwrap();
        let xi = xi3();
        let p = net.zeros();
        assert!(matches!(net.forward(&p, &NetInput { sigma: 1.0, x: &[0.0; 2], xi: &xi }), Err(Error::Shape(_))));
        let input = NetInput { sigma: 1.0, x: &[0.0; 3], xi: &xi };
        assert!(matches!(net.backward(&p, &input, &[1.0]), Err(Error::Shape(_))));
    }

    fn fd_check(head: HeadKind, seed: u64) -> f64 {
        let net = Network::new(small(head)).unwrap();
        let p = random_params(&net, seed);
        let xi = xi3();
        let x = [0.7, -1.2, 0.3];
        let input = NetInput { sigma: 0.9, x: &x, xi: &xi };
        let mut rng = Streams::new(seed).stream("probe", &[]);
        let up: Vec<f64> = (0..net.spec().out_dim()).map(|_| rng.sample(StandardNormal)).collect();
        let grad = net.backward(&p, &input, &up).unwrap();
        let objective = |q: &ParamVector| -> f64 {
            net.forward(q, &input).unwrap().iter().zip(&up).map(|(o, u)| o * u).sum()
        };
        let h = 1e-5;
        let mut worst: f64 = 0.0;
        for _ in 0..64 {
            let i = rng.gen_range(0..net.param_count());
            let mut qp = p.clone();
            let mut qm = p.clone();
            qp.values_mut()[i] += h;
            qm.values_mut()[i] -= h;
            let fd = (objective(&qp) - objective(&qm)) / (2.0 * h);
            let rel = (fd - grad[i]).abs() / fd.abs().max(grad[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
        worst
    }

    #[test]
    fn backward_matches_finite_differences() {
        for seed in 0..5 {
            for head in [HeadKind::Vector, HeadKind::Scalar] {
                let err = fd_check(head, seed);
                assert!(err <= 1e-4, "seed {seed} {head:?}: {err}");
            }
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let net = Network::new(small(HeadKind::Scalar)).unwrap();
        let p = random_params(&net, 9);
        let xi = xi3();
        let x = [0.7, -1.2, 0.3];
        let mut cache = Cache::default();
        net.forward_cached(&p, &NetInput { sigma: 0.9, x: &x, xi: &xi }, &mut cache).unwrap();
        let mut g = vec![0.0; net.param_count()];
        let gx = net.backward_cached(&p, &cache, &[1.0], &mut g).unwrap();
        for j in 0..3 {
            let h = 1e-6;
            let (mut xp, mut xm) = (x, x);
            xp[j] += h;
            xm[j] -= h;
            let fp = net.forward(&p, &NetInput { sigma: 0.9, x: &xp, xi: &xi }).unwrap()[0];
            let fm = net.forward(&p, &NetInput { sigma: 0.9, x: &xm, xi: &xi }).unwrap()[0];
            assert!(((fp - fm) / (2.0 * h) - gx[j]).abs() < 1e-7);
        }
    }

    #[test]
    fn backward_is_linear_in_cotangent() {
        let net = Network::new(small(HeadKind::Vector)).unwrap();
        let p = random_params(&net, 4);
        let xi = xi3();
        let input = NetInput { sigma: 0.05, x: &[0.1, 0.2, 0.3], xi: &xi };
        let v1 = [1.0, -0.5, 0.25];
        let v2 = [0.3, 0.7, -1.1];
        let v12: Vec<f64> = v1.iter().zip(&v2).map(|(a, b)| a + b).collect();
        let g1 = net.backward(&p, &input, &v1).unwrap();
        let g2 = net.backward(&p, &input, &v2).unwrap();
        let g12 = net.backward(&p, &input, &v12).unwrap();
        for i in 0..g1.len() {
            assert!((g1[i] + g2[i] - g12[i]).abs() <= 1e-12);
        }
        let g0 = net.backward(&p, &input, &[0.0; 3]).unwrap();
        assert!(g0.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn adam_first_step_closed_form() {
        let mut st = AdamState::new(1);
        let mut p = [1.0];
        let g = 0.37;
        st.step(&mut p, &[g], 1e-4, 1.0).unwrap();
        let delta = p[0] - 1.0;
        assert!((delta + 1e-4 * g / (g.abs() + ADAM_EPS)).abs() < 1e-15);
        assert!(delta.abs() <= 1e-4);
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut st = AdamState::new(3);
        let mut p = [1.0, -2.0, 3.0];
        st.step(&mut p, &[0.0; 3], 1e-4, 1.0).unwrap();
        assert_eq!(p, [1.0, -2.0, 3.0]);
    }

    #[test]
    fn adam_clips_to_norm() {
        let mut st = AdamState::new(2);
        let mut p = [0.0, 0.0];
        let rep = st.step(&mut p, &[6.0, 8.0], 1e-3, 1.0).unwrap();
        assert!(rep.clipped);
        assert_eq!(rep.grad_norm, 10.0);
        let m = st.first_moment();
        let clipped_norm = (m[0] * m[0] + m[1] * m[1]).sqrt() / (1.0 - ADAM_BETA1);
        assert!((clipped_norm - 1.0).abs() < 1e-12);
    }

    #[test]
    fn adam_rejects_non_finite() {
        let mut st = AdamState::new(2);
        let mut p = [0.0, 0.0];
        assert!(matches!(st.step(&mut p, &[1.0, f64::NAN], 1e-3, 1.0), Err(Error::Numeric(_))));
        assert!(matches!(st.step(&mut p, &[1.0, 1.0], 0.0, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn adam_is_deterministic() {
        let run = || {
            let mut st = AdamState::new(3);
            let mut p = [0.1, 0.2, 0.3];
            for i in 0..10 {
                let g = [(i as f64).sin(), 0.5, -(i as f64) * 0.1];
                st.step(&mut p, &g, 1e-2, 1.0).unwrap();
            }
            (p, st)
        };
        assert_eq!(run(), run());
    }
}
