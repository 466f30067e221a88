//! Token-mixing layers `g`. Blocks are always formed as `Id + g` by the
//! caller; nothing here adds the residual.
//!
//! Parameter layouts (flat vectors, column-major matrices):
//!
//! | kind               | segments                                   |
//! |--------------------|--------------------------------------------|
//! | kernel attention   | per head: `W_Q`, `W_K`, `W_V` (`d x d`)    |
//! | linformer          | `W_Q`, `W_K`, `W_V` (`d x d`), `E`, `F` (`n x k`) |
//! | skyformer          | `W_Q`, `W_K`, `W_V` (`d x d`)              |
//! | bias attention     | `a` (scalar), `W` (`d x d`), `b` (`d`)     |
//! | circular conv      | `psi` (`l + 1`)                            |
//!
//! The circular convolution reads `[ψ * X]_i = Σ_j ψ_j [X]_{(i + j) mod n}`;
//! the source formula indexes the sum with `ℓ`, taken here to mean `i`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::feedforward::Activation;
use crate::groups::PermutationGroup;
use crate::kernels::{KernelConfig, KernelSpec};
use crate::rng::{normals, LabRng};
use crate::sparsity::{automorphisms, make_pattern, parse_pattern_spec, PatternKind, PatternSpec, SparsityPattern};
use crate::tokens::TokenMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MixerKind {
    KernelAttention { kernel: KernelSpec, pattern: SparsityPattern, heads: usize },
    Linformer { rank: usize },
    Skyformer,
    BiasAttention { pattern: SparsityPattern, activation: Activation },
    CircularConv { len: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerSpec {
    kind: MixerKind,
    d: usize,
    n: usize,
}

/// One named block of a parameter layout.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl Segment {
    fn new(name: impl Into<String>, rows: usize, cols: usize) -> Self {
        Self { name: name.into(), rows, cols }
    }

    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl MixerSpec {
    pub fn new(kind: MixerKind, d: usize, n: usize) -> Result<Self> {
        if d == 0 || n == 0 {
            return Err(invalid(format!("mixer needs d, n >= 1, got d={d} n={n}")));
        }
        match &kind {
            MixerKind::KernelAttention { kernel, pattern, heads } => {
                if *heads == 0 {
                    return Err(invalid("attention needs at least one head"));
                }
                if pattern.n() != n {
                    return Err(shape(format!("pattern on {} tokens for a mixer on {n}", pattern.n())));
                }
                if let Some(kd) = kernel.dim() {
                    if kd != d {
                        return Err(shape(format!("{} kernel on R^{kd} in a mixer on R^{d}", kernel.name())));
                    }
                }
            }
            MixerKind::Linformer { rank } => {
                if *rank == 0 {
                    return Err(invalid("linformer projection rank must be >= 1"));
                }
            }
            MixerKind::Skyformer => {}
            MixerKind::BiasAttention { pattern, .. } => {
                if pattern.n() != n {
                    return Err(shape(format!("pattern on {} tokens for a mixer on {n}", pattern.n())));
                }
            }
            MixerKind::CircularConv { len } => {
                if *len == 0 {
                    return Err(invalid("circular convolution needs kernel length l >= 1"));
                }
            }
        }
        Ok(Self { kind, d, n })
    }

    /// Single-head kernel attention.
    pub fn attention(kernel: KernelSpec, pattern: SparsityPattern, d: usize) -> Result<Self> {
        let n = pattern.n();
        Self::new(MixerKind::KernelAttention { kernel, pattern, heads: 1 }, d, n)
    }

    /// Dense softmax attention (`exp(q·k)` over every token).
    pub fn dense_softmax(d: usize, n: usize) -> Result<Self> {
        Self::attention(KernelSpec::ExpDot, make_pattern(&PatternSpec::new(PatternKind::Full), n)?, d)
    }

    pub fn kind(&self) -> &MixerKind {
        &self.kind
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            MixerKind::KernelAttention { .. } => "kernel_attention",
            MixerKind::Linformer { .. } => "linformer",
            MixerKind::Skyformer => "skyformer",
            MixerKind::BiasAttention { .. } => "bias_attention",
            MixerKind::CircularConv { .. } => "circular_conv",
        }
    }

    /// False when the map is not real-analytic in its parameters (ReLU bias attention).
    pub fn is_analytic(&self) -> bool {
        match &self.kind {
            MixerKind::BiasAttention { activation, .. } => activation.is_analytic(),
            _ => true,
        }
    }

    pub fn segments(&self) -> Vec<Segment> {
        let d = self.d;
        match &self.kind {
            MixerKind::KernelAttention { heads, .. } => (0..*heads)
                .flat_map(|h| {
                    let suffix = if *heads == 1 { String::new() } else { format!("[{h}]") };
                    ["W_Q", "W_K", "W_V"].map(|m| Segment::new(format!("{m}{suffix}"), d, d))
                })
                .collect(),
            MixerKind::Linformer { rank } => vec![
                Segment::new("W_Q", d, d),
                Segment::new("W_K", d, d),
                Segment::new("W_V", d, d),
                Segment::new("E", self.n, *rank),
                Segment::new("F", self.n, *rank),
            ],
            MixerKind::Skyformer => vec![Segment::new("W_Q", d, d), Segment::new("W_K", d, d), Segment::new("W_V", d, d)],
            MixerKind::BiasAttention { .. } => vec![Segment::new("a", 1, 1), Segment::new("W", d, d), Segment::new("b", d, 1)],
            MixerKind::CircularConv { len } => vec![Segment::new("psi", len + 1, 1)],
        }
    }

    pub fn param_count(&self) -> usize {
        self.segments().iter().map(Segment::len).sum()
    }

    fn segment_ranges(&self, pred: impl Fn(&str) -> bool) -> Vec<std::ops::Range<usize>> {
        let mut off = 0;
        let mut out = Vec::new();
        for s in self.segments() {
            if pred(&s.name) {
                out.push(off..off + s.len());
            }
            off += s.len();
        }
        out
    }

    /// Ranges of the value path (`W_V`, `a`, `psi`); zero there means `g ≡ 0`.
    pub fn value_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.segment_ranges(|n| n.starts_with("W_V") || n == "a" || n == "psi")
    }

    /// Ranges of the key matrices `W_K`.
    pub fn key_ranges(&self) -> Vec<std::ops::Range<usize>> {
        self.segment_ranges(|n| n.starts_with("W_K"))
    }
}

/// Flat parameter vector for one mixer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixerParams(pub Vec<f64>);

impl MixerParams {
    pub fn new(spec: &MixerSpec, values: Vec<f64>) -> Result<Self> {
        if values.len() != spec.param_count() {
            return Err(shape(format!("{} expects {} parameters, got {}", spec.name(), spec.param_count(), values.len())));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} parameters contain a non-finite entry", spec.name())));
        }
        Ok(Self(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }
}

/// i.i.d. `N(0, scale²)` entries in layout order.
pub fn sample_params(spec: &MixerSpec, scale: f64, rng: &mut LabRng) -> Result<MixerParams> {
    sample_params_scaled(spec, scale, 1.0, rng)
}

/// As [`sample_params`], with the `W_K` blocks further multiplied by `key_scale`.
pub fn sample_params_scaled(spec: &MixerSpec, scale: f64, key_scale: f64, rng: &mut LabRng) -> Result<MixerParams> {
    if !(scale > 0.0 && scale.is_finite()) {
        return Err(invalid(format!("parameter scale must be positive, got {scale}")));
    }
    let mut v = normals(rng, spec.param_count(), scale);
    for r in spec.key_ranges() {
        v[r].iter_mut().for_each(|x| *x *= key_scale);
    }
    MixerParams::new(spec, v)
}

/// Group under which the mixer is equivariant for every parameter value.
pub fn declared_symmetry(spec: &MixerSpec) -> Result<PermutationGroup> {
    match &spec.kind {
        MixerKind::KernelAttention { pattern, .. } | MixerKind::BiasAttention { pattern, .. } => automorphisms(pattern),
        MixerKind::Linformer { .. } => Ok(PermutationGroup::trivial(spec.n)),
        MixerKind::Skyformer => PermutationGroup::symmetric(spec.n),
        MixerKind::CircularConv { .. } => PermutationGroup::cyclic(spec.n),
    }
}

/// `g(X)` without the residual.
pub fn apply(spec: &MixerSpec, params: &MixerParams, x: &TokenMatrix) -> Result<TokenMatrix> {
    let (out, _) = spec.forward(params.as_slice(), x.as_matrix())?;
    TokenMatrix::new(out).map_err(|e| e.context(spec.name()))
}

#[inline]
fn col(m: &DMatrix<f64>, i: usize) -> &[f64] {
    let r = m.nrows();
    &m.as_slice()[i * r..(i + 1) * r]
}

#[inline]
fn col_mut(m: &mut DMatrix<f64>, i: usize) -> &mut [f64] {
    let r = m.nrows();
    &mut m.as_mut_slice()[i * r..(i + 1) * r]
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn square(params: &[f64], d: usize, k: usize) -> DMatrix<f64> {
    DMatrix::from_column_slice(d, d, &params[k * d * d..(k + 1) * d * d])
}

fn add_into(dst: &mut [f64], src: &DMatrix<f64>) {
    for (t, v) in dst.iter_mut().zip(src.as_slice()) {
        *t += v;
    }
}

/// Column-wise softmax.
fn softmax_columns(s: &DMatrix<f64>) -> DMatrix<f64> {
    let mut p = s.clone();
    for mut c in p.column_iter_mut() {
        let m = c.max();
        c.apply(|v| *v = (*v - m).exp());
        let z = c.sum();
        c /= z;
    }
    p
}

/// Intermediates kept by `forward` for `backward`.
#[derive(Debug, Clone)]
pub(crate) enum MixerTape {
    Attention { x: DMatrix<f64>, heads: Vec<HeadTape> },
    Linformer { x: DMatrix<f64>, xe: DMatrix<f64>, xf: DMatrix<f64>, q: DMatrix<f64>, kp: DMatrix<f64>, vp: DMatrix<f64>, p: DMatrix<f64> },
    Skyformer { x: DMatrix<f64>, q: DMatrix<f64>, k: DMatrix<f64>, v: DMatrix<f64>, e: DMatrix<f64> },
    Bias { x: DMatrix<f64>, z: DMatrix<f64>, u: DMatrix<f64> },
    Conv { x: DMatrix<f64> },
}

#[derive(Debug, Clone)]
pub(crate) struct HeadTape {
    q: DMatrix<f64>,
    k: DMatrix<f64>,
    v: DMatrix<f64>,
    /// Normalised weights, `weights[i][r]` for the `r`-th member of `N(i)`.
    weights: Vec<Vec<f64>>,
}

impl MixerSpec {
    pub(crate) fn forward(&self, params: &[f64], x: &DMatrix<f64>) -> Result<(DMatrix<f64>, MixerTape)> {
        if params.len() != self.param_count() {
            return Err(shape(format!("{} expects {} parameters, got {}", self.name(), self.param_count(), params.len())));
        }
        if x.shape() != (self.d, self.n) {
            return Err(shape(format!(
                "{} on {}x{} applied to {}x{}",
                self.name(),
                self.d,
                self.n,
                x.nrows(),
                x.ncols()
            )));
        }
        let (d, n) = (self.d, self.n);
        let (out, tape) = match &self.kind {
            MixerKind::KernelAttention { kernel, pattern, heads } => {
                let mut out = DMatrix::zeros(d, n);
                let mut tapes = Vec::with_capacity(*heads);
                for h in 0..*heads {
                    let q = square(params, d, 3 * h) * x;
                    let k = square(params, d, 3 * h + 1) * x;
                    let v = square(params, d, 3 * h + 2) * x;
                    let mut weights = Vec::with_capacity(n);
                    for i in 0..n {
                        let nb = pattern.neighborhood(i);
                        let logits: Vec<f64> = nb.iter().map(|&j| kernel.log_eval_raw(col(&q, i), col(&k, j))).collect();
                        let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let mut w: Vec<f64> = logits.iter().map(|s| (s - m).exp()).collect();
                        let z: f64 = w.iter().sum();
                        w.iter_mut().for_each(|a| *a /= z);
                        let oi = col_mut(&mut out, i);
                        for (&j, &a) in nb.iter().zip(&w) {
                            for (o, vj) in oi.iter_mut().zip(col(&v, j)) {
                                *o += a * vj;
                            }
                        }
                        weights.push(w);
                    }
                    tapes.push(HeadTape { q, k, v, weights });
                }
                (out, MixerTape::Attention { x: x.clone(), heads: tapes })
            }
            MixerKind::Linformer { rank } => {
                let off = 3 * d * d;
                let e = DMatrix::from_column_slice(n, *rank, &params[off..off + n * rank]);
                let f = DMatrix::from_column_slice(n, *rank, &params[off + n * rank..off + 2 * n * rank]);
                let xe = x * &e;
                let xf = x * &f;
                let q = square(params, d, 0) * x;
                let kp = square(params, d, 1) * &xe;
                let vp = square(params, d, 2) * &xf;
                let p = softmax_columns(&(kp.transpose() * &q));
                let out = &vp * &p;
                (out, MixerTape::Linformer { x: x.clone(), xe, xf, q, kp, vp, p })
            }
            MixerKind::Skyformer => {
                let q = square(params, d, 0) * x;
                let k = square(params, d, 1) * x;
                let v = square(params, d, 2) * x;
                let mut e = DMatrix::zeros(n, n);
                for i in 0..n {
                    for j in 0..n {
                        let dist2: f64 = col(&q, i).iter().zip(col(&k, j)).map(|(a, b)| (a - b) * (a - b)).sum();
                        e[(i, j)] = (-0.5 * dist2).exp();
                    }
                }
                let out = &v * e.transpose();
                (out, MixerTape::Skyformer { x: x.clone(), q, k, v, e })
            }
            MixerKind::BiasAttention { pattern, activation } => {
                let a = params[0];
                let w = DMatrix::from_column_slice(d, d, &params[1..1 + d * d]);
                let b = &params[1 + d * d..];
                let mut z = &w * x;
                for j in 0..n {
                    for (zv, bv) in col_mut(&mut z, j).iter_mut().zip(b) {
                        *zv -= bv;
                    }
                }
                let u = z.map(|v| activation.apply(v));
                let mut out = DMatrix::zeros(d, n);
                for i in 0..n {
                    let oi = col_mut(&mut out, i);
                    for &j in pattern.neighborhood(i) {
                        for (o, uj) in oi.iter_mut().zip(col(&u, j)) {
                            *o += a * uj;
                        }
                    }
                }
                (out, MixerTape::Bias { x: x.clone(), z, u })
            }
            MixerKind::CircularConv { len } => {
                let mut out = DMatrix::zeros(d, n);
                for i in 0..n {
                    let oi = col_mut(&mut out, i);
                    for (j, psi) in params.iter().enumerate().take(len + 1) {
                        for (o, xv) in oi.iter_mut().zip(col(x, (i + j) % n)) {
                            *o += psi * xv;
                        }
                    }
                }
                (out, MixerTape::Conv { x: x.clone() })
            }
        };
        if let Some(pos) = out.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} produced a non-finite entry at {pos}", self.name())));
        }
        Ok((out, tape))
    }

    /// Gradient of the loss with respect to the mixer input; parameter
    /// gradients are accumulated into `grad_params`.
    pub(crate) fn backward(&self, params: &[f64], tape: &MixerTape, g: &DMatrix<f64>, grad_params: &mut [f64]) -> DMatrix<f64> {
        let (d, n) = (self.d, self.n);
        match (&self.kind, tape) {
            (MixerKind::KernelAttention { kernel, pattern, .. }, MixerTape::Attention { x, heads }) => {
                let mut dx = DMatrix::zeros(d, n);
                for (h, ht) in heads.iter().enumerate() {
                    let mut dq = DMatrix::zeros(d, n);
                    let mut dk = DMatrix::zeros(d, n);
                    let mut dv = DMatrix::zeros(d, n);
                    for i in 0..n {
                        let nb: Vec<usize> = pattern.neighborhood(i).iter().copied().collect();
                        let a = &ht.weights[i];
                        let gi = col(g, i);
                        let da: Vec<f64> = nb.iter().map(|&j| dot(gi, col(&ht.v, j))).collect();
                        let mean: f64 = a.iter().zip(&da).map(|(p, q)| p * q).sum();
                        for (r, &j) in nb.iter().enumerate() {
                            for (t, gv) in col_mut(&mut dv, j).iter_mut().zip(gi) {
                                *t += a[r] * gv;
                            }
                            let ds = a[r] * (da[r] - mean);
                            if ds != 0.0 {
                                let mut gk = vec![0.0; d];
                                kernel.log_eval_grad(col(&ht.q, i), col(&ht.k, j), ds, col_mut(&mut dq, i), &mut gk);
                                for (t, v) in col_mut(&mut dk, j).iter_mut().zip(&gk) {
                                    *t += v;
                                }
                            }
                        }
                    }
                    let base = 3 * h * d * d;
                    add_into(&mut grad_params[base..base + d * d], &(&dq * x.transpose()));
                    add_into(&mut grad_params[base + d * d..base + 2 * d * d], &(&dk * x.transpose()));
                    add_into(&mut grad_params[base + 2 * d * d..base + 3 * d * d], &(&dv * x.transpose()));
                    dx += square(params, d, 3 * h).transpose() * dq;
                    dx += square(params, d, 3 * h + 1).transpose() * dk;
                    dx += square(params, d, 3 * h + 2).transpose() * dv;
                }
                dx
            }
            (MixerKind::Linformer { rank }, MixerTape::Linformer { x, xe, xf, q, kp, vp, p }) => {
                let k = *rank;
                let dvp = g * p.transpose();
                let dp = vp.transpose() * g;
                let mut ds = dp.clone();
                for c in 0..n {
                    let inner: f64 = (0..k).map(|r| p[(r, c)] * dp[(r, c)]).sum();
                    for r in 0..k {
                        ds[(r, c)] = p[(r, c)] * (dp[(r, c)] - inner);
                    }
                }
                let dkp = q * ds.transpose();
                let dq = kp * &ds;
                let (wq, wk, wv) = (square(params, d, 0), square(params, d, 1), square(params, d, 2));
                let off = 3 * d * d;
                let e = DMatrix::from_column_slice(n, k, &params[off..off + n * k]);
                let f = DMatrix::from_column_slice(n, k, &params[off + n * k..off + 2 * n * k]);
                add_into(&mut grad_params[..d * d], &(&dq * x.transpose()));
                add_into(&mut grad_params[d * d..2 * d * d], &(&dkp * xe.transpose()));
                add_into(&mut grad_params[2 * d * d..3 * d * d], &(&dvp * xf.transpose()));
                let dxe = wk.transpose() * dkp;
                let dxf = wv.transpose() * dvp;
                add_into(&mut grad_params[off..off + n * k], &(x.transpose() * &dxe));
                add_into(&mut grad_params[off + n * k..off + 2 * n * k], &(x.transpose() * &dxf));
                wq.transpose() * dq + dxe * e.transpose() + dxf * f.transpose()
            }
            (MixerKind::Skyformer, MixerTape::Skyformer { x, q, k, v, e }) => {
                let mut dq = DMatrix::zeros(d, n);
                let mut dk = DMatrix::zeros(d, n);
                let dv = g * e;
                for i in 0..n {
                    for j in 0..n {
                        let de = dot(col(g, i), col(v, j)) * e[(i, j)];
                        if de == 0.0 {
                            continue;
                        }
                        for r in 0..d {
                            let diff = q[(r, i)] - k[(r, j)];
                            dq[(r, i)] -= de * diff;
                            dk[(r, j)] += de * diff;
                        }
                    }
                }
                add_into(&mut grad_params[..d * d], &(&dq * x.transpose()));
                add_into(&mut grad_params[d * d..2 * d * d], &(&dk * x.transpose()));
                add_into(&mut grad_params[2 * d * d..3 * d * d], &(&dv * x.transpose()));
                square(params, d, 0).transpose() * dq + square(params, d, 1).transpose() * dk + square(params, d, 2).transpose() * dv
            }
            (MixerKind::BiasAttention { pattern, activation }, MixerTape::Bias { x, z, u }) => {
                let a = params[0];
                let w = DMatrix::from_column_slice(d, d, &params[1..1 + d * d]);
                let mut received = DMatrix::zeros(d, n);
                let mut da = 0.0;
                for i in 0..n {
                    let gi = col(g, i);
                    for &j in pattern.neighborhood(i) {
                        da += dot(gi, col(u, j));
                        for (t, gv) in col_mut(&mut received, j).iter_mut().zip(gi) {
                            *t += gv;
                        }
                    }
                }
                let mut dz = received * a;
                dz.zip_apply(z, |dv, zv| *dv *= activation.derivative(zv));
                grad_params[0] += da;
                add_into(&mut grad_params[1..1 + d * d], &(&dz * x.transpose()));
                for (r, row) in dz.row_iter().enumerate() {
                    grad_params[1 + d * d + r] -= row.sum();
                }
                w.transpose() * dz
            }
            (MixerKind::CircularConv { len }, MixerTape::Conv { x }) => {
                let mut dx = DMatrix::zeros(d, n);
                for i in 0..n {
                    let gi = col(g, i);
                    for j in 0..=*len {
                        let src = (i + j) % n;
                        grad_params[j] += dot(gi, col(x, src));
                        for (t, gv) in col_mut(&mut dx, src).iter_mut().zip(gi) {
                            *t += params[j] * gv;
                        }
                    }
                }
                dx
            }
            _ => unreachable!("tape recorded by a different mixer kind"),
        }
    }

    /// Pre-activations of non-smooth units (ReLU bias attention only).
    pub(crate) fn kink_values(&self, tape: &MixerTape) -> Vec<f64> {
        match (&self.kind, tape) {
            (MixerKind::BiasAttention { activation, .. }, MixerTape::Bias { z, .. }) if !activation.is_analytic() => {
                z.iter().copied().collect()
            }
            _ => Vec::new(),
        }
    }
}

pub const MIXER_SPEC_FORMS: &str = "attn:<kernel>[:<pattern>][#heads], linformer:k, skyformer, bias:<pattern>[:tanh|relu], conv:l";

/// Parsed mixer string, resolved against `(d, n)` by [`MixerConfig::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum MixerConfig {
    Attention { kernel: KernelConfig, pattern: PatternSpec, heads: usize },
    Linformer { rank: usize },
    Skyformer,
    Bias { pattern: PatternSpec, activation: Activation },
    Conv { len: usize },
}

fn parse_count(s: &str, what: &str) -> Result<usize> {
    s.trim().parse().map_err(|_| Error::Parse(format!("expected an integer {what}, got '{s}'")))
}

impl MixerConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        let (head, rest) = match text.split_once(':') {
            Some((h, r)) => (h, Some(r)),
            None => (text, None),
        };
        match head {
            "attn" => {
                let rest = rest.ok_or_else(|| Error::Parse("attn needs a kernel, e.g. attn:exp:full".into()))?;
                let (rest, heads) = match rest.rsplit_once('#') {
                    Some((r, h)) => (r, parse_count(h, "head count")?),
                    None => (rest, 1),
                };
                let mut parts = rest.splitn(2, ':');
                let kname = parts.next().unwrap_or_default();
                let mut tail = parts.next();
                let mut kernel_text = kname.to_string();
                // A segment starting with a digit holds the kernel's arguments.
                if let Some(t) = tail {
                    if t.starts_with(|c: char| c.is_ascii_digit() || c == '.') {
                        let (args, after) = match t.split_once(':') {
                            Some((a, r)) => (a, Some(r)),
                            None => (t, None),
                        };
                        kernel_text = format!("{kname}:{args}");
                        tail = after;
                    }
                }
                let kernel = KernelConfig::parse(&kernel_text)?;
                let pattern = match tail {
                    Some(p) => parse_pattern_spec(p)?,
                    None => PatternSpec::new(PatternKind::Full),
                };
                Ok(Self::Attention { kernel, pattern, heads })
            }
            "linformer" => {
                let k = rest.ok_or_else(|| Error::Parse("linformer needs a projection rank, e.g. linformer:2".into()))?;
                Ok(Self::Linformer { rank: parse_count(k, "linformer rank")? })
            }
            "skyformer" if rest.is_none() => Ok(Self::Skyformer),
            "bias" => {
                let rest = rest.unwrap_or("full");
                let (pat, activation) = match rest.rsplit_once(':') {
                    Some((p, "tanh")) => (p, Activation::Tanh),
                    Some((p, "relu")) => (p, Activation::Relu),
                    _ if rest == "tanh" => ("full", Activation::Tanh),
                    _ if rest == "relu" => ("full", Activation::Relu),
                    _ => (rest, Activation::Tanh),
                };
                Ok(Self::Bias { pattern: parse_pattern_spec(pat)?, activation })
            }
            "conv" => {
                let l = rest.ok_or_else(|| Error::Parse("conv needs a kernel length, e.g. conv:1".into()))?;
                Ok(Self::Conv { len: parse_count(l, "conv length")? })
            }
            _ => Err(Error::Parse(format!("unknown mixer '{text}'; accepted forms: {MIXER_SPEC_FORMS}"))),
        }
    }

    pub fn build(&self, d: usize, n: usize) -> Result<MixerSpec> {
        let kind = match self {
            Self::Attention { kernel, pattern, heads } => MixerKind::KernelAttention {
                kernel: kernel.build(d)?,
                pattern: make_pattern(pattern, n)?,
                heads: *heads,
            },
            Self::Linformer { rank } => MixerKind::Linformer { rank: *rank },
            Self::Skyformer => MixerKind::Skyformer,
            Self::Bias { pattern, activation } => MixerKind::BiasAttention { pattern: make_pattern(pattern, n)?, activation: *activation },
            Self::Conv { len } => MixerKind::CircularConv { len: *len },
        };
        MixerSpec::new(kind, d, n)
    }
}

/// Parses a `;`-separated mixer list with optional `*k` repetition suffixes.
pub fn parse_mixer_list(text: &str) -> Result<Vec<MixerConfig>> {
    let mut out = Vec::new();
    for item in text.split(';').map(str::trim).filter(|s| !s.is_empty()) {
        let (body, reps) = match item.rsplit_once('*') {
            Some((b, r)) => (b, parse_count(r, "repetition count")?),
            None => (item, 1),
        };
        let cfg = MixerConfig::parse(body)?;
        out.extend(std::iter::repeat_n(cfg, reps));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::groups::{act, check_equivariance};
    use crate::rng::stream;

    fn full(n: usize) -> SparsityPattern {
        make_pattern(&PatternSpec::new(PatternKind::Full), n).unwrap()
    }

    fn window(n: usize, w: usize) -> SparsityPattern {
        make_pattern(&PatternSpec::new(PatternKind::Window(w)), n).unwrap()
    }

    fn all_specs(d: usize, n: usize) -> Vec<MixerSpec> {
        let mut v = vec![
            MixerSpec::attention(KernelSpec::ExpDot, full(n), d).unwrap(),
            MixerSpec::attention(KernelSpec::rbf(1.0).unwrap(), window(n, 1), d).unwrap(),
            MixerSpec::attention(KernelSpec::performer(d, 2 * d, 1).unwrap(), full(n), d).unwrap(),
            MixerSpec::attention(KernelSpec::sum_exp(d, 2).unwrap(), full(n), d).unwrap(),
            MixerSpec::new(MixerKind::Linformer { rank: 2 }, d, n).unwrap(),
            MixerSpec::new(MixerKind::Skyformer, d, n).unwrap(),
            MixerSpec::new(MixerKind::BiasAttention { pattern: window(n, 1), activation: Activation::Tanh }, d, n).unwrap(),
            MixerSpec::new(MixerKind::CircularConv { len: 2 }, d, n).unwrap(),
        ];
        v.push(MixerSpec::new(MixerKind::KernelAttention { kernel: KernelSpec::ExpDot, pattern: full(n), heads: 2 }, d, n).unwrap());
        v
    }

    /// Softmax attention coded straight from `W_V X softmax((W_K X)ᵀ W_Q X)`.
    fn softmax_reference(params: &[f64], d: usize, x: &DMatrix<f64>) -> DMatrix<f64> {
        let wq = DMatrix::from_column_slice(d, d, &params[..d * d]);
        let wk = DMatrix::from_column_slice(d, d, &params[d * d..2 * d * d]);
        let wv = DMatrix::from_column_slice(d, d, &params[2 * d * d..]);
        let scores = (&wk * x).transpose() * (&wq * x);
        &wv * x * softmax_columns(&scores)
    }

    #[test]
    fn zero_value_path_gives_zero() {
        let mut rng = stream(1, "mix", 0);
        for spec in all_specs(2, 4) {
            let mut p = sample_params(&spec, 1.0, &mut rng).unwrap();
            for r in spec.value_ranges() {
                p.0[r].iter_mut().for_each(|v| *v = 0.0);
            }
            let x = TokenMatrix::random_normal(2, 4, &mut rng);
            let out = apply(&spec, &p, &x).unwrap();
            assert_eq!(out.max_abs(), 0.0, "{}", spec.name());
        }
    }

    #[test]
    fn attention_single_token_is_value_projection() {
        let mut rng = stream(2, "mix", 0);
        let spec = MixerSpec::attention(KernelSpec::rbf(0.5).unwrap(), full(1), 3).unwrap();
        let p = sample_params(&spec, 1.0, &mut rng).unwrap();
        let x = TokenMatrix::random_normal(3, 1, &mut rng);
        let out = apply(&spec, &p, &x).unwrap();
        let wv = DMatrix::from_column_slice(3, 3, &p.0[18..27]);
        assert!((out.as_matrix() - wv * x.as_matrix()).norm() < 1e-14);
    }

    #[test]
    fn attention_on_identical_tokens_returns_value() {
        let mut rng = stream(3, "mix", 0);
        let spec = MixerSpec::attention(KernelSpec::ExpDot, full(4), 2).unwrap();
        let p = sample_params(&spec, 1.0, &mut rng).unwrap();
        let x0 = [0.7, -1.3];
        let x = TokenMatrix::from_columns(&vec![x0.to_vec(); 4]).unwrap();
        let out = apply(&spec, &p, &x).unwrap();
        let wv = DMatrix::from_column_slice(2, 2, &p.0[8..12]);
        let expect = wv * nalgebra::DVector::from_column_slice(&x0);
        for i in 0..4 {
            assert!((out.column(i) - &expect).norm() < 1e-14);
        }
    }

    #[test]
    fn conv_identity_and_shift() {
        let mut rng = stream(4, "mix", 0);
        let x = TokenMatrix::random_normal(2, 3, &mut rng);
        let spec = MixerSpec::new(MixerKind::CircularConv { len: 1 }, 2, 3).unwrap();
        let out = apply(&spec, &MixerParams(vec![1.0, 0.0]), &x).unwrap();
        assert_eq!(out, x);
        let out = apply(&spec, &MixerParams(vec![0.0, 1.0]), &x).unwrap();
        for i in 0..3 {
            assert_eq!(out.column(i), x.column((i + 1) % 3));
        }
    }

    #[test]
    fn linformer_with_identity_projections_is_softmax_attention() {
        let mut rng = stream(5, "mix", 0);
        let (d, n) = (3, 4);
        let spec = MixerSpec::new(MixerKind::Linformer { rank: n }, d, n).unwrap();
        let dense = MixerSpec::dense_softmax(d, n).unwrap();
        for _ in 0..20 {
            let mut p = sample_params(&spec, 0.7, &mut rng).unwrap();
            let eye = DMatrix::<f64>::identity(n, n);
            p.0[3 * d * d..3 * d * d + n * n].copy_from_slice(eye.as_slice());
            p.0[3 * d * d + n * n..].copy_from_slice(eye.as_slice());
            let x = TokenMatrix::random_normal(d, n, &mut rng);
            let lin = apply(&spec, &p, &x).unwrap();
            let att = apply(&dense, &MixerParams(p.0[..3 * d * d].to_vec()), &x).unwrap();
            let reference = softmax_reference(&p.0[..3 * d * d], d, x.as_matrix());
            assert!(lin.frobenius_distance(&att) < 1e-12);
            assert!((lin.as_matrix() - reference).norm() < 1e-12);
        }
    }

    #[test]
    fn exp_dot_full_attention_matches_softmax_reference() {
        let mut rng = stream(6, "mix", 0);
        for (d, n) in [(2, 3), (3, 5)] {
            let spec = MixerSpec::dense_softmax(d, n).unwrap();
            for _ in 0..20 {
                let p = sample_params(&spec, 1.0, &mut rng).unwrap();
                let x = TokenMatrix::random_normal(d, n, &mut rng);
                let out = apply(&spec, &p, &x).unwrap();
                assert!((out.as_matrix() - softmax_reference(&p.0, d, x.as_matrix())).norm() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_weights_sum_to_one() {
        let mut rng = stream(7, "mix", 0);
        let spec = MixerSpec::attention(KernelSpec::performer(2, 4, 3).unwrap(), window(5, 1), 2).unwrap();
        let p = sample_params(&spec, 1.5, &mut rng).unwrap();
        let x = TokenMatrix::random_normal(2, 5, &mut rng);
        let (_, tape) = spec.forward(&p.0, x.as_matrix()).unwrap();
        let MixerTape::Attention { heads, .. } = tape else { panic!() };
        for w in &heads[0].weights {
            assert!((w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn bias_attention_is_local() {
        let mut rng = stream(8, "mix", 0);
        let n = 6;
        let pattern = window(n, 1);
        let spec = MixerSpec::new(MixerKind::BiasAttention { pattern: pattern.clone(), activation: Activation::Tanh }, 2, n).unwrap();
        let p = sample_params(&spec, 1.0, &mut rng).unwrap();
        let x = TokenMatrix::random_normal(2, n, &mut rng);
        let base = apply(&spec, &p, &x).unwrap();
        for i in 0..n {
            for j in (0..n).filter(|j| !pattern.attends(i, *j)) {
                let mut y = x.clone();
                y.set_column(j, &nalgebra::DVector::zeros(2));
                let out = apply(&spec, &p, &y).unwrap();
                assert_eq!(out.column(i), base.column(i));
            }
        }
        let zero_a = {
            let mut q = p.clone();
            q.0[0] = 0.0;
            q
        };
        assert_eq!(apply(&spec, &zero_a, &x).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn declared_symmetries() {
        let n = 5;
        assert_eq!(declared_symmetry(&MixerSpec::dense_softmax(2, n).unwrap()).unwrap().order(), 120);
        let conv = MixerSpec::new(MixerKind::CircularConv { len: 1 }, 2, n).unwrap();
        assert_eq!(declared_symmetry(&conv).unwrap(), PermutationGroup::cyclic(n).unwrap());
        let lin = MixerSpec::new(MixerKind::Linformer { rank: 2 }, 2, n).unwrap();
        assert_eq!(declared_symmetry(&lin).unwrap().order(), 1);
        let sky = MixerSpec::new(MixerKind::Skyformer, 2, n).unwrap();
        assert_eq!(declared_symmetry(&sky).unwrap().order(), 120);
    }

    #[test]
    fn every_kind_is_equivariant_under_its_symmetry() {
        let mut rng = stream(9, "mix-eq", 0);
        for (d, n) in [(2, 3), (3, 4), (2, 6)] {
            for spec in all_specs(d, n) {
                let g = declared_symmetry(&spec).unwrap();
                let p = sample_params(&spec, 1.0, &mut rng).unwrap();
                let rep = check_equivariance(&g, d, |x| apply(&spec, &p, x), 30, 1e-9, &mut rng).unwrap();
                assert!(rep.max_relative_violation <= 1e-9, "{} {rep:?}", spec.name());
            }
        }
    }

    #[test]
    fn linformer_is_not_permutation_equivariant() {
        let mut rng = stream(10, "mix", 0);
        let spec = MixerSpec::new(MixerKind::Linformer { rank: 2 }, 2, 4).unwrap();
        let p = sample_params(&spec, 1.0, &mut rng).unwrap();
        let g = PermutationGroup::symmetric(4).unwrap();
        let rep = check_equivariance(&g, 2, |x| apply(&spec, &p, x), 20, 1e-9, &mut rng).unwrap();
        assert!(!rep.pass);
    }

    #[test]
    fn skyformer_permutes_with_input() {
        let mut rng = stream(11, "mix", 0);
        let spec = MixerSpec::new(MixerKind::Skyformer, 3, 4).unwrap();
        let p = sample_params(&spec, 1.0, &mut rng).unwrap();
        let x = TokenMatrix::random_normal(3, 4, &mut rng);
        let sigma = crate::groups::Permutation::new(vec![2, 3, 1, 0]).unwrap();
        let lhs = apply(&spec, &p, &act(&sigma, &x).unwrap()).unwrap();
        let rhs = act(&sigma, &apply(&spec, &p, &x).unwrap()).unwrap();
        assert!(lhs.frobenius_distance(&rhs) < 1e-12);
    }

    #[test]
    fn sampling_is_deterministic() {
        let spec = MixerSpec::dense_softmax(2, 3).unwrap();
        let a = sample_params(&spec, 1.0, &mut stream(3, "p", 0)).unwrap();
        let b = sample_params(&spec, 1.0, &mut stream(3, "p", 0)).unwrap();
        let c = sample_params(&spec, 1.0, &mut stream(3, "p", 1)).unwrap();
        assert_eq!(a, b);
        assert!(a.0.iter().zip(&c.0).any(|(u, v)| u != v));
        assert!(sample_params(&spec, 0.0, &mut stream(3, "p", 0)).is_err());
        let tiny = sample_params(&spec, 1e-9, &mut stream(4, "p", 0)).unwrap();
        let x = TokenMatrix::random_normal(2, 3, &mut stream(4, "x", 0));
        assert!(apply(&spec, &tiny, &x).unwrap().max_abs() < 1e-7);
    }

    #[test]
    fn key_scale_multiplies_only_keys() {
        let spec = MixerSpec::dense_softmax(2, 3).unwrap();
        let a = sample_params_scaled(&spec, 1.0, 1.0, &mut stream(5, "p", 0)).unwrap();
        let b = sample_params_scaled(&spec, 1.0, 10.0, &mut stream(5, "p", 0)).unwrap();
        for i in 0..12 {
            let expect = if (4..8).contains(&i) { 10.0 * a.0[i] } else { a.0[i] };
            assert_eq!(b.0[i], expect);
        }
    }

    #[test]
    fn shape_and_param_errors() {
        let spec = MixerSpec::dense_softmax(2, 3).unwrap();
        assert!(apply(&spec, &MixerParams(vec![0.0; 12]), &TokenMatrix::zeros(2, 4)).is_err());
        assert!(apply(&spec, &MixerParams(vec![0.0; 11]), &TokenMatrix::zeros(2, 3)).is_err());
        assert!(MixerParams::new(&spec, vec![f64::NAN; 12]).is_err());
        assert!(MixerSpec::new(MixerKind::CircularConv { len: 0 }, 2, 3).is_err());
        assert!(MixerSpec::attention(KernelSpec::performer(3, 2, 0).unwrap(), full(3), 2).is_err());
    }

    #[test]
    fn large_logits_stay_finite() {
        let spec = MixerSpec::dense_softmax(2, 3).unwrap();
        let mut p = vec![0.0; 12];
        p[0] = 40.0;
        p[3] = 40.0;
        p[4] = 40.0;
        p[7] = 40.0;
        p[8] = 1.0;
        p[11] = 1.0;
        let x = TokenMatrix::from_columns(&[vec![1.0, 1.0], vec![2.0, 0.5], vec![-1.0, 3.0]]).unwrap();
        assert!(apply(&spec, &MixerParams(p), &x).is_ok());
    }

    #[test]
    fn config_strings() {
        assert_eq!(
            MixerConfig::parse("attn:rbf:0.5:window:1").unwrap(),
            MixerConfig::Attention {
                kernel: KernelConfig::Rbf { gamma: 0.5 },
                pattern: PatternSpec::new(PatternKind::Window(1)),
                heads: 1
            }
        );
        assert_eq!(
            MixerConfig::parse("attn:exp#3").unwrap(),
            MixerConfig::Attention { kernel: KernelConfig::Exp, pattern: PatternSpec::new(PatternKind::Full), heads: 3 }
        );
        assert!(matches!(MixerConfig::parse("attn:performer:full").unwrap(), MixerConfig::Attention { kernel: KernelConfig::Performer { m: None, .. }, .. }));
        assert!(matches!(MixerConfig::parse("attn:performer:4,2:circulant:1").unwrap(), MixerConfig::Attention { kernel: KernelConfig::Performer { m: Some(4), seed: 2 }, .. }));
        assert_eq!(
            MixerConfig::parse("bias:window:1:relu").unwrap(),
            MixerConfig::Bias { pattern: PatternSpec::new(PatternKind::Window(1)), activation: Activation::Relu }
        );
        assert_eq!(
            MixerConfig::parse("bias:circulant:1").unwrap(),
            MixerConfig::Bias { pattern: PatternSpec::new(PatternKind::Circulant(1)), activation: Activation::Tanh }
        );
        assert_eq!(MixerConfig::parse("conv:2").unwrap(), MixerConfig::Conv { len: 2 });
        assert_eq!(MixerConfig::parse("linformer:3").unwrap(), MixerConfig::Linformer { rank: 3 });
        assert_eq!(MixerConfig::parse("skyformer").unwrap(), MixerConfig::Skyformer);
        assert!(MixerConfig::parse("mamba").unwrap_err().to_string().contains("accepted forms"));
        assert_eq!(parse_mixer_list("attn:exp:window:1*3; conv:1").unwrap().len(), 4);
        let built = MixerConfig::parse("bias:window:1:relu").unwrap().build(2, 4).unwrap();
        assert!(!built.is_analytic());
    }
}
