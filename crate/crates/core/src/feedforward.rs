//! Token-wise feedforward maps `h̄(x) = W σ(Ax − b)` and their residual stacks.
//!
//! Per-layer parameter layout (column-major matrices): `W` (`d x width`),
//! then `A` (`width x d`), then `b` (`width`).

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::rng::{normals, LabRng};
use crate::tokens::TokenMatrix;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Activation {
    Tanh,
    Relu,
    LeakyRelu(f64),
}

impl Activation {
    pub fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => z.tanh(),
            Activation::Relu => z.max(0.0),
            Activation::LeakyRelu(s) => {
                if z > 0.0 {
                    z
                } else {
                    s * z
                }
            }
        }
    }

    /// Derivative; the kink at 0 gets the left derivative (0 for ReLU).
    pub fn derivative(self, z: f64) -> f64 {
        match self {
            Activation::Tanh => {
                let t = z.tanh();
                1.0 - t * t
            }
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu(s) => {
                if z > 0.0 {
                    1.0
                } else {
                    s
                }
            }
        }
    }

    pub fn is_analytic(self) -> bool {
        matches!(self, Activation::Tanh)
    }

    pub fn lipschitz(self) -> f64 {
        match self {
            Activation::Tanh | Activation::Relu => 1.0,
            Activation::LeakyRelu(s) => s.abs().max(1.0),
        }
    }

    pub fn parse(text: &str) -> Result<Self> {
        match text.trim() {
            "tanh" => Ok(Activation::Tanh),
            "relu" => Ok(Activation::Relu),
            other => match other.strip_prefix("leaky") {
                Some(rest) => {
                    let slope = match rest.strip_prefix(':') {
                        Some(s) => s.parse().map_err(|_| Error::Parse(format!("bad leaky slope '{s}'")))?,
                        None if rest.is_empty() => 0.01,
                        None => return Err(Error::Parse(format!("unknown activation '{other}'"))),
                    };
                    Ok(Activation::LeakyRelu(slope))
                }
                None => Err(Error::Parse(format!("unknown activation '{other}'; expected tanh, relu or leaky[:slope]"))),
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeedforwardSpec {
    d: usize,
    width: usize,
    activation: Activation,
}

impl FeedforwardSpec {
    pub fn new(d: usize, width: usize, activation: Activation) -> Result<Self> {
        if d == 0 || width == 0 {
            return Err(invalid(format!("feedforward needs d >= 1 and width >= 1, got d={d} width={width}")));
        }
        if let Activation::LeakyRelu(s) = activation {
            // Slope 1 makes the layer affine.
            if !s.is_finite() || s == 1.0 {
                return Err(invalid(format!("leaky slope {s} does not give a non-affine activation")));
            }
        }
        Ok(Self { d, width, activation })
    }

    /// Width `4d`, tanh.
    pub fn default_for(d: usize) -> Result<Self> {
        Self::new(d, 4 * d, Activation::Tanh)
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn activation(&self) -> Activation {
        self.activation
    }

    /// `d = 1` is evaluable but outside the regime the approximation results cover.
    pub fn is_uap_facing(&self) -> bool {
        self.d >= 2
    }

    pub fn param_count(&self) -> usize {
        2 * self.d * self.width + self.width
    }

    pub fn segments(&self) -> [(&'static str, usize, usize); 3] {
        [("W", self.d, self.width), ("A", self.width, self.d), ("b", self.width, 1)]
    }

    fn split<'a>(&self, params: &'a [f64]) -> (&'a [f64], &'a [f64], &'a [f64]) {
        let dw = self.d * self.width;
        (&params[..dw], &params[dw..2 * dw], &params[2 * dw..])
    }

    fn matrices(&self, params: &[f64]) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
        let (w, a, b) = self.split(params);
        (
            DMatrix::from_column_slice(self.d, self.width, w),
            DMatrix::from_column_slice(self.width, self.d, a),
            DVector::from_column_slice(b),
        )
    }

    /// `W σ(A x − b)` for one token.
    pub fn h_bar(&self, params: &[f64], x: &[f64]) -> Vec<f64> {
        let (w, a, b) = self.matrices(params);
        let z = a * DVector::from_column_slice(x) - b;
        (w * z.map(|v| self.activation.apply(v))).as_slice().to_vec()
    }
}

/// `(Id + h_m) ∘ .. ∘ (Id + h_1)`, applied token by token.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResidualStack {
    d: usize,
    layers: Vec<FeedforwardSpec>,
}

impl ResidualStack {
    pub fn new(d: usize, layers: Vec<FeedforwardSpec>) -> Result<Self> {
        if let Some(l) = layers.iter().find(|l| l.d != d) {
            return Err(shape(format!("feedforward layer on R^{} in a stack on R^{d}", l.d)));
        }
        Ok(Self { d, layers })
    }

    pub fn repeated(spec: FeedforwardSpec, depth: usize) -> Self {
        Self { d: spec.d, layers: vec![spec; depth] }
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn layers(&self) -> &[FeedforwardSpec] {
        &self.layers
    }

    pub fn param_count(&self) -> usize {
        self.layers.iter().map(FeedforwardSpec::param_count).sum()
    }

    fn layer_params<'a>(&self, params: &'a [f64]) -> Vec<&'a [f64]> {
        let mut out = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            out.push(&params[off..off + l.param_count()]);
            off += l.param_count();
        }
        out
    }

    /// Draws every entry normal with standard deviation `scale`; with
    /// `zero_output` the `W` blocks are zeroed so the stack starts as the identity.
    pub fn sample_params(&self, scale: f64, zero_output: bool, rng: &mut LabRng) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for l in &self.layers {
            let mut p = normals(rng, l.param_count(), scale);
            if zero_output {
                p[..l.d * l.width].iter_mut().for_each(|v| *v = 0.0);
            }
            out.extend(p);
        }
        out
    }

    pub(crate) fn forward(&self, params: &[f64], x: &DMatrix<f64>) -> Result<(DMatrix<f64>, StackTape)> {
        if params.len() != self.param_count() {
            return Err(shape(format!("stack expects {} parameters, got {}", self.param_count(), params.len())));
        }
        if x.nrows() != self.d {
            return Err(shape(format!("stack on R^{} applied to tokens in R^{}", self.d, x.nrows())));
        }
        let mut cur = x.clone();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (spec, p) in self.layers.iter().zip(self.layer_params(params)) {
            let (w, a, b) = spec.matrices(p);
            let mut z = &a * &cur;
            for mut col in z.column_iter_mut() {
                col -= &b;
            }
            let h = z.map(|v| spec.activation.apply(v));
            let next = &cur + &w * &h;
            layers.push(LayerTape { input: cur, pre: z, hidden: h });
            cur = next;
        }
        Ok((cur, StackTape { layers }))
    }

    /// Returns the gradient with respect to the stack input and accumulates
    /// parameter gradients into `grad_params`.
    pub(crate) fn backward(&self, params: &[f64], tape: &StackTape, grad_out: &DMatrix<f64>, grad_params: &mut [f64]) -> DMatrix<f64> {
        let mut g = grad_out.clone();
        let mut offsets = Vec::with_capacity(self.layers.len());
        let mut off = 0;
        for l in &self.layers {
            offsets.push(off);
            off += l.param_count();
        }
        for (idx, spec) in self.layers.iter().enumerate().rev() {
            let p = &params[offsets[idx]..offsets[idx] + spec.param_count()];
            let lt = &tape.layers[idx];
            let (w, a, _) = spec.matrices(p);
            let dw = &g * lt.hidden.transpose();
            let dh = w.transpose() * &g;
            let mut dz = dh;
            dz.zip_apply(&lt.pre, |dv, z| *dv *= spec.activation.derivative(z));
            let da = &dz * lt.input.transpose();
            let db: Vec<f64> = dz.row_iter().map(|r| -r.sum()).collect();
            let gp = &mut grad_params[offsets[idx]..offsets[idx] + spec.param_count()];
            let dwn = spec.d * spec.width;
            for (t, v) in gp[..dwn].iter_mut().zip(dw.as_slice()) {
                *t += v;
            }
            for (t, v) in gp[dwn..2 * dwn].iter_mut().zip(da.as_slice()) {
                *t += v;
            }
            for (t, v) in gp[2 * dwn..].iter_mut().zip(&db) {
                *t += v;
            }
            g += a.transpose() * dz;
        }
        g
    }

    /// Pre-activation values of every non-smooth unit recorded in `tape`.
    pub(crate) fn kink_values(&self, tape: &StackTape) -> Vec<f64> {
        self.layers
            .iter()
            .zip(&tape.layers)
            .filter(|(s, _)| !s.activation.is_analytic())
            .flat_map(|(_, t)| t.pre.iter().copied())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub(crate) struct LayerTape {
    input: DMatrix<f64>,
    pre: DMatrix<f64>,
    hidden: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct StackTape {
    layers: Vec<LayerTape>,
}

/// Applies `x ↦ x + W σ(Ax − b)` layer by layer to every column of `x`.
pub fn apply_tokenwise(stack: &ResidualStack, params: &[f64], x: &TokenMatrix) -> Result<TokenMatrix> {
    let (out, _) = stack.forward(params, x.as_matrix())?;
    TokenMatrix::new(out).map_err(|e| e.context("feedforward output"))
}

/// Parameters of `x ↦ Wm h̄(Am x − bm)` in the same family:
/// `W' = Wm W`, `A' = A Am`, `b' = A bm + b`.
pub fn affine_conjugate(
    spec: &FeedforwardSpec,
    params: &[f64],
    wm: &DMatrix<f64>,
    am: &DMatrix<f64>,
    bm: &DVector<f64>,
) -> Result<Vec<f64>> {
    let d = spec.d;
    if params.len() != spec.param_count() {
        return Err(shape(format!("expected {} parameters, got {}", spec.param_count(), params.len())));
    }
    if wm.shape() != (d, d) || am.shape() != (d, d) || bm.len() != d {
        return Err(shape(format!("affine conjugation needs {d}x{d} matrices and a {d}-vector")));
    }
    let (w, a, b) = spec.matrices(params);
    let w2 = wm * w;
    let a2 = &a * am;
    let b2 = &a * bm + b;
    let mut out = Vec::with_capacity(params.len());
    out.extend_from_slice(w2.as_slice());
    out.extend_from_slice(a2.as_slice());
    out.extend_from_slice(b2.as_slice());
    Ok(out)
}

/// Parses `ffn[:width[,act]][*depth]`; width defaults to `4d`, activation to tanh.
pub fn parse_ffn_spec(text: &str, d: usize) -> Result<(FeedforwardSpec, usize)> {
    let text = text.trim();
    let (body, depth) = match text.rsplit_once('*') {
        Some((b, k)) => (b, k.trim().parse::<usize>().map_err(|_| Error::Parse(format!("bad ffn depth '{k}'")))?),
        None => (text, 1),
    };
    let rest = body
        .strip_prefix("ffn")
        .ok_or_else(|| Error::Parse(format!("feedforward spec '{text}' must start with 'ffn'")))?;
    let args = rest.strip_prefix(':').unwrap_or(rest);
    if !rest.is_empty() && !rest.starts_with(':') {
        return Err(Error::Parse(format!("malformed feedforward spec '{text}'")));
    }
    let mut parts = args.splitn(2, ',');
    let width = match parts.next().map(str::trim).filter(|s| !s.is_empty()) {
        Some(w) => w.parse().map_err(|_| Error::Parse(format!("bad ffn width '{w}'")))?,
        None => 4 * d,
    };
    let act = match parts.next() {
        Some(a) => Activation::parse(a)?,
        None => Activation::Tanh,
    };
    Ok((FeedforwardSpec::new(d, width, act)?, depth))
}
