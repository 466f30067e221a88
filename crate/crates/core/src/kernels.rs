//! Positive kernels for kernel attention and the large-key-scale limit check.
//!
//! Downstream attention never forms `k(x, y)` directly: it works with
//! [`KernelSpec::log_eval`] and subtracts the per-neighbourhood maximum before
//! exponentiating.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::rng::{normal, normals, stream, LabRng};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KernelSpec {
    /// `exp(x·y)`.
    ExpDot,
    /// `exp(-γ‖x−y‖²)`.
    Rbf { gamma: f64 },
    /// `φ(x)·φ(y)` with `φ(x) = exp(-‖x‖²/2) (exp(ω_1·x), .., exp(ω_m·x))`.
    Performer { omegas: Vec<Vec<f64>>, seed: u64 },
    /// `exp(w·(x+y))`.
    SumExp { w: Vec<f64>, seed: u64 },
    /// `p(x−y) k̃(x, y)` with `p(z) = c0 + Σ_k c_k z_k²`.
    PolyWeighted { c0: f64, coeffs: Vec<f64>, base: Box<KernelSpec> },
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Numerically stable `log Σ exp(v_i)`.
pub fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl KernelSpec {
    pub fn rbf(gamma: f64) -> Result<Self> {
        if !(gamma > 0.0 && gamma.is_finite()) {
            return Err(invalid(format!("rbf gamma must be positive, got {gamma}")));
        }
        Ok(Self::Rbf { gamma })
    }

    /// Draws `m` i.i.d. standard-normal feature directions in `R^d` from `seed`.
    pub fn performer(d: usize, m: usize, seed: u64) -> Result<Self> {
        if m == 0 || d == 0 {
            return Err(invalid("performer needs m >= 1 features and d >= 1"));
        }
        let mut rng = stream(seed, "performer-omega", d as u64);
        let omegas = (0..m).map(|_| normals(&mut rng, d, 1.0)).collect();
        Ok(Self::Performer { omegas, seed })
    }

    /// `w` drawn standard normal in `R^d` from `seed`.
    pub fn sum_exp(d: usize, seed: u64) -> Result<Self> {
        if d == 0 {
            return Err(invalid("sum_exp needs d >= 1"));
        }
        let mut rng = stream(seed, "sumexp-w", d as u64);
        Ok(Self::SumExp { w: normals(&mut rng, d, 1.0), seed })
    }

    pub fn poly_weighted(c0: f64, coeffs: Vec<f64>, base: KernelSpec) -> Result<Self> {
        if !(c0 > 0.0 && c0.is_finite()) {
            return Err(invalid(format!("polynomial constant term must be positive, got {c0}")));
        }
        if coeffs.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(invalid(format!("polynomial coefficients must be nonnegative, got {coeffs:?}")));
        }
        if let Some(d) = base.dim() {
            if d != coeffs.len() {
                return Err(shape(format!("{} polynomial coefficients for base kernel on R^{d}", coeffs.len())));
            }
        }
        Ok(Self::PolyWeighted { c0, coeffs, base: Box::new(base) })
    }

    /// Input dimension fixed at construction, if any.
    pub fn dim(&self) -> Option<usize> {
        match self {
            Self::ExpDot | Self::Rbf { .. } => None,
            Self::Performer { omegas, .. } => omegas.first().map(Vec::len),
            Self::SumExp { w, .. } => Some(w.len()),
            Self::PolyWeighted { coeffs, base, .. } => base.dim().or(Some(coeffs.len())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::ExpDot => "exp_dot",
            Self::Rbf { .. } => "rbf",
            Self::Performer { .. } => "performer",
            Self::SumExp { .. } => "sum_exp",
            Self::PolyWeighted { .. } => "poly_weighted",
        }
    }

    fn check(&self, x: &[f64], y: &[f64]) -> Result<()> {
        if x.len() != y.len() {
            return Err(shape(format!("kernel arguments of length {} and {}", x.len(), y.len())));
        }
        if let Some(d) = self.dim() {
            if d != x.len() {
                return Err(shape(format!("{} kernel on R^{d} applied to R^{}", self.name(), x.len())));
            }
        }
        if x.iter().chain(y).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("{} kernel argument is not finite", self.name())));
        }
        Ok(())
    }

    /// Direct kernel value. Overflows to `inf` where the closed form does.
    pub fn eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check(x, y)?;
        Ok(self.eval_raw(x, y))
    }

    fn eval_raw(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Self::ExpDot => dot(x, y).exp(),
            Self::Rbf { gamma } => (-gamma * sq_dist(x, y)).exp(),
            Self::Performer { omegas, .. } => {
                let sx = (-0.5 * dot(x, x)).exp();
                let sy = (-0.5 * dot(y, y)).exp();
                omegas.iter().map(|w| sx * dot(w, x).exp() * sy * dot(w, y).exp()).sum()
            }
            Self::SumExp { w, .. } => (dot(w, x) + dot(w, y)).exp(),
            Self::PolyWeighted { c0, coeffs, base } => poly(*c0, coeffs, x, y) * base.eval_raw(x, y),
        }
    }

    /// `log k(x, y)` evaluated without forming `k`.
    pub fn log_eval(&self, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check(x, y)?;
        Ok(self.log_eval_raw(x, y))
    }

    pub(crate) fn log_eval_raw(&self, x: &[f64], y: &[f64]) -> f64 {
        match self {
            Self::ExpDot => dot(x, y),
            Self::Rbf { gamma } => -gamma * sq_dist(x, y),
            Self::Performer { omegas, .. } => {
                let proj: Vec<f64> = omegas.iter().map(|w| dot(w, x) + dot(w, y)).collect();
                -0.5 * (dot(x, x) + dot(y, y)) + log_sum_exp(&proj)
            }
            Self::SumExp { w, .. } => dot(w, x) + dot(w, y),
            Self::PolyWeighted { c0, coeffs, base } => poly(*c0, coeffs, x, y).ln() + base.log_eval_raw(x, y),
        }
    }

    /// `log k(x, y)` together with its gradients in `x` (query) and `y` (key),
    /// accumulated into `gx` and `gy` scaled by `weight`.
    pub(crate) fn log_eval_grad(&self, x: &[f64], y: &[f64], weight: f64, gx: &mut [f64], gy: &mut [f64]) -> f64 {
        match self {
            Self::ExpDot => {
                for k in 0..x.len() {
                    gx[k] += weight * y[k];
                    gy[k] += weight * x[k];
                }
                dot(x, y)
            }
            Self::Rbf { gamma } => {
                for k in 0..x.len() {
                    let g = -2.0 * gamma * (x[k] - y[k]) * weight;
                    gx[k] += g;
                    gy[k] -= g;
                }
                -gamma * sq_dist(x, y)
            }
            Self::Performer { omegas, .. } => {
                let proj: Vec<f64> = omegas.iter().map(|w| dot(w, x) + dot(w, y)).collect();
                let lse = log_sum_exp(&proj);
                for k in 0..x.len() {
                    gx[k] -= weight * x[k];
                    gy[k] -= weight * y[k];
                }
                for (w, p) in omegas.iter().zip(&proj) {
                    let soft = (p - lse).exp() * weight;
                    for k in 0..x.len() {
                        gx[k] += soft * w[k];
                        gy[k] += soft * w[k];
                    }
                }
                -0.5 * (dot(x, x) + dot(y, y)) + lse
            }
            Self::SumExp { w, .. } => {
                for k in 0..x.len() {
                    gx[k] += weight * w[k];
                    gy[k] += weight * w[k];
                }
                dot(w, x) + dot(w, y)
            }
            Self::PolyWeighted { c0, coeffs, base } => {
                let p = poly(*c0, coeffs, x, y);
                for k in 0..x.len() {
                    let g = 2.0 * coeffs[k] * (x[k] - y[k]) / p * weight;
                    gx[k] += g;
                    gy[k] -= g;
                }
                p.ln() + base.log_eval_grad(x, y, weight, gx, gy)
            }
        }
    }
}

fn poly(c0: f64, coeffs: &[f64], x: &[f64], y: &[f64]) -> f64 {
    c0 + coeffs.iter().zip(x.iter().zip(y)).map(|(c, (a, b))| c * (a - b) * (a - b)).sum::<f64>()
}

pub const KERNEL_SPEC_FORMS: &str = "exp, rbf:gamma, performer:m,seed (or performer), sumexp:seed, polyrbf:gamma,c0,c1[,..,cd]";

/// A parsed kernel string, resolved against the token dimension by [`KernelConfig::build`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum KernelConfig {
    Exp,
    Rbf { gamma: f64 },
    /// `m = None` means the default `2d` features.
    Performer { m: Option<usize>, seed: u64 },
    SumExp { seed: u64 },
    /// `coeffs` holds `c1..` either once (shared by every coordinate) or `d` times.
    PolyRbf { gamma: f64, c0: f64, coeffs: Vec<f64> },
}

fn parse_f64(s: &str, what: &str) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Parse(format!("expected a number for {what}, got '{s}'")))
}

fn parse_u64(s: &str, what: &str) -> Result<u64> {
    s.trim().parse().map_err(|_| Error::Parse(format!("expected an integer for {what}, got '{s}'")))
}

impl KernelConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let text = text.trim();
        let (name, args) = match text.split_once(':') {
            Some((n, a)) => (n, a.split(',').map(str::trim).collect::<Vec<_>>()),
            None => (text, Vec::new()),
        };
        let arity = |lo: usize, hi: usize| {
            if args.len() < lo || args.len() > hi {
                Err(Error::Parse(format!("kernel '{text}' has {} arguments; accepted forms: {KERNEL_SPEC_FORMS}", args.len())))
            } else {
                Ok(())
            }
        };
        match name {
            "exp" => {
                arity(0, 0)?;
                Ok(Self::Exp)
            }
            "rbf" => {
                arity(1, 1)?;
                Ok(Self::Rbf { gamma: parse_f64(args[0], "rbf gamma")? })
            }
            "performer" => {
                arity(0, 2)?;
                let m = args.first().map(|a| parse_u64(a, "performer m")).transpose()?.map(|m| m as usize);
                let seed = args.get(1).map(|a| parse_u64(a, "performer seed")).transpose()?.unwrap_or(0);
                Ok(Self::Performer { m, seed })
            }
            "sumexp" => {
                arity(1, 1)?;
                Ok(Self::SumExp { seed: parse_u64(args[0], "sumexp seed")? })
            }
            "polyrbf" => {
                if args.len() < 3 {
                    return Err(Error::Parse(format!("polyrbf needs gamma,c0,c1[,..]; accepted forms: {KERNEL_SPEC_FORMS}")));
                }
                Ok(Self::PolyRbf {
                    gamma: parse_f64(args[0], "polyrbf gamma")?,
                    c0: parse_f64(args[1], "polyrbf c0")?,
                    coeffs: args[2..].iter().map(|a| parse_f64(a, "polyrbf coefficient")).collect::<Result<_>>()?,
                })
            }
            other => Err(Error::Parse(format!("unknown kernel '{other}'; accepted forms: {KERNEL_SPEC_FORMS}"))),
        }
    }

    pub fn build(&self, d: usize) -> Result<KernelSpec> {
        match self {
            Self::Exp => Ok(KernelSpec::ExpDot),
            Self::Rbf { gamma } => KernelSpec::rbf(*gamma),
            Self::Performer { m, seed } => KernelSpec::performer(d, m.unwrap_or(2 * d), *seed),
            Self::SumExp { seed } => KernelSpec::sum_exp(d, *seed),
            Self::PolyRbf { gamma, c0, coeffs } => {
                let coeffs = match coeffs.len() {
                    1 => vec![coeffs[0]; d],
                    l if l == d => coeffs.clone(),
                    l => return Err(shape(format!("polyrbf takes 1 or d = {d} quadratic coefficients, got {l}"))),
                };
                KernelSpec::poly_weighted(*c0, coeffs, KernelSpec::rbf(*gamma)?)
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorstCase {
    pub sample: usize,
    /// Separation at the largest grid point.
    pub final_gap: f64,
    pub diverged: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LimitCheckReport {
    pub kernel: String,
    pub d: usize,
    pub samples: usize,
    pub diverged_fraction: f64,
    pub threshold: f64,
    pub t_grid: Vec<f64>,
    pub worst_case: WorstCase,
}

/// `t = 10^{k/4}` for `k = 0..=12`, i.e. 1 to 1000.
pub fn default_t_grid() -> Vec<f64> {
    (0..=12).map(|k| 10f64.powf(k as f64 / 4.0)).collect()
}

fn mat_vec(w: &[f64], d: usize, y: &[f64], t: f64) -> Vec<f64> {
    (0..d).map(|r| t * (0..d).map(|c| w[r * d + c] * y[c]).sum::<f64>()).collect()
}

/// `Δ(t) = |log k(x, tWy₁) − log k(x, tWy₂)|` on every grid point; `w_k` is row-major `d x d`.
pub fn separation_profile(k: &KernelSpec, x: &[f64], w_k: &[f64], y1: &[f64], y2: &[f64], t_grid: &[f64]) -> Result<Vec<f64>> {
    let d = x.len();
    if w_k.len() != d * d || y1.len() != d || y2.len() != d {
        return Err(shape("separation profile arguments disagree on d"));
    }
    t_grid
        .iter()
        .map(|&t| Ok((k.log_eval(x, &mat_vec(w_k, d, y1, t))? - k.log_eval(x, &mat_vec(w_k, d, y2, t))?).abs()))
        .collect()
}

/// Diverged iff the profile is strictly increasing over its last three grid
/// points (all of them, on shorter grids) and ends above `threshold`.
pub fn is_diverged(profile: &[f64], threshold: f64) -> bool {
    let tail = &profile[profile.len().saturating_sub(3)..];
    let increasing = tail.windows(2).all(|w| w[1] > w[0]);
    increasing && profile.last().is_some_and(|&last| last > threshold)
}

fn validate_grid(t_grid: &[f64]) -> Result<()> {
    if t_grid.is_empty() {
        return Err(invalid("t grid is empty"));
    }
    if t_grid.iter().any(|t| !(*t > 0.0 && t.is_finite())) {
        return Err(invalid("t grid must contain positive finite values"));
    }
    if t_grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(invalid("t grid must be strictly increasing"));
    }
    Ok(())
}

fn nonzero_normal(d: usize, rng: &mut LabRng) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| normal(rng)).collect();
        if v.iter().any(|x| *x != 0.0) {
            return v;
        }
    }
}

/// Monte-Carlo estimate of how often the ratio `k(x, tWy₁)/k(x, tWy₂)`
/// separates (in log scale) as `t` grows, over standard-normal draws of
/// `x`, `y₁ ≠ y₂` and `W_K`.
pub fn limit_condition_check(
    k: &KernelSpec,
    d: usize,
    samples: usize,
    t_grid: &[f64],
    threshold: f64,
    rng: &mut LabRng,
) -> Result<LimitCheckReport> {
    if samples == 0 {
        return Err(invalid("limit check needs samples >= 1"));
    }
    if d < 2 {
        return Err(invalid(format!("limit check needs d >= 2, got {d}")));
    }
    validate_grid(t_grid)?;
    let mut diverged = 0usize;
    let mut worst = WorstCase { sample: 0, final_gap: f64::INFINITY, diverged: true };
    for s in 0..samples {
        let x = nonzero_normal(d, rng);
        let y1 = nonzero_normal(d, rng);
        let y2 = loop {
            let y = nonzero_normal(d, rng);
            if y != y1 {
                break y;
            }
        };
        let w_k = normals(rng, d * d, 1.0);
        let profile = separation_profile(k, &x, &w_k, &y1, &y2, t_grid)?;
        let ok = is_diverged(&profile, threshold);
        diverged += usize::from(ok);
        let last = *profile.last().expect("nonempty grid");
        if last < worst.final_gap {
            worst = WorstCase { sample: s, final_gap: last, diverged: ok };
        }
    }
    Ok(LimitCheckReport {
        kernel: k.name().to_string(),
        d,
        samples,
        diverged_fraction: diverged as f64 / samples as f64,
        threshold,
        t_grid: t_grid.to_vec(),
        worst_case: worst,
    })
}

/// A key matrix on the exceptional hyperplane `xᵀ W (y₁ − y₂) = 0`, obtained
/// by projecting `w0` (row-major) onto it.
pub fn hyperplane_key_matrix(x: &[f64], y1: &[f64], y2: &[f64], w0: &[f64]) -> Vec<f64> {
    let d = x.len();
    let v: Vec<f64> = y1.iter().zip(y2).map(|(a, b)| a - b).collect();
    let form: f64 = (0..d).map(|r| x[r] * (0..d).map(|c| w0[r * d + c] * v[c]).sum::<f64>()).sum();
    let scale = form / (dot(x, x) * dot(&v, &v));
    let mut w = w0.to_vec();
    for r in 0..d {
        for c in 0..d {
            w[r * d + c] -= scale * x[r] * v[c];
        }
    }
    w
}
