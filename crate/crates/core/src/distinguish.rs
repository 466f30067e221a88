//! Token distinguishability: orbit-distinct pairs, the Π-product and a
//! Monte-Carlo verifier over random mixer parameters.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, shape, Error, Result};
use crate::groups::{same_orbit, PermutationGroup};
use crate::mixers::{sample_params_scaled, MixerSpec};
use crate::rng::{stream, LabRng};
use crate::tokens::{default_general_position_tol, is_general_position, TokenMatrix};
use rand::RngCore;

/// Samples sharing one shape, optionally paired with labels of the same shape.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    samples: Vec<TokenMatrix>,
    labels: Option<Vec<TokenMatrix>>,
}

fn uniform_shape(ms: &[TokenMatrix], d: usize, n: usize, what: &str) -> Result<()> {
    match ms.iter().position(|m| m.d() != d || m.n() != n) {
        Some(i) => Err(shape(format!("{what} {i} is {}x{}, expected {d}x{n}", ms[i].d(), ms[i].n()))),
        None => Ok(()),
    }
}

impl Dataset {
    pub fn new(samples: Vec<TokenMatrix>) -> Result<Self> {
        if let Some(first) = samples.first() {
            uniform_shape(&samples, first.d(), first.n(), "sample")?;
        }
        Ok(Self { samples, labels: None })
    }

    pub fn labelled(samples: Vec<TokenMatrix>, labels: Vec<TokenMatrix>) -> Result<Self> {
        if samples.len() != labels.len() {
            return Err(shape(format!("{} samples but {} labels", samples.len(), labels.len())));
        }
        let mut ds = Self::new(samples)?;
        if let Some(first) = ds.samples.first() {
            uniform_shape(&labels, first.d(), first.n(), "label")?;
        }
        ds.labels = Some(labels);
        Ok(ds)
    }

    pub fn samples(&self) -> &[TokenMatrix] {
        &self.samples
    }

    pub fn labels(&self) -> Option<&[TokenMatrix]> {
        self.labels.as_deref()
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// `(d, n)` of the samples, `None` when empty.
    pub fn shape(&self) -> Option<(usize, usize)> {
        self.samples.first().map(|s| (s.d(), s.n()))
    }

    /// Index of the first sample with two coincident tokens.
    pub fn first_degenerate(&self) -> Option<usize> {
        self.samples.iter().position(|x| !is_general_position(x, default_general_position_tol(x)))
    }

    /// `count` samples with i.i.d. standard normal entries (general position almost surely).
    pub fn random(d: usize, n: usize, count: usize, rng: &mut LabRng) -> Self {
        Self { samples: (0..count).map(|_| TokenMatrix::random_normal(d, n, rng)).collect(), labels: None }
    }
}

/// Products of squared token distances.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PiProduct {
    /// `∏_{l₁, l₂} ‖U_{l₁} − V_{l₂}‖²`.
    pub cross: f64,
    /// `∏_{l₁ < l₂} ‖U_{l₁} − U_{l₂}‖²`.
    pub within_u: f64,
    pub within_v: f64,
    /// `cross · within_u · within_v`, positive iff all `2n` tokens are distinct.
    pub joint: f64,
}

fn sq_dist(a: nalgebra::DVectorView<'_, f64>, b: nalgebra::DVectorView<'_, f64>) -> f64 {
    (a - b).norm_squared()
}

fn within(u: &TokenMatrix) -> f64 {
    let mut p = 1.0;
    for a in 0..u.n() {
        for b in a + 1..u.n() {
            p *= sq_dist(u.column(a), u.column(b));
        }
    }
    p
}

pub fn pi_product(u: &TokenMatrix, v: &TokenMatrix) -> Result<PiProduct> {
    if u.d() != v.d() || u.n() != v.n() {
        return Err(shape(format!("pi product of {}x{} and {}x{}", u.d(), u.n(), v.d(), v.n())));
    }
    let mut cross = 1.0;
    for a in 0..u.n() {
        for b in 0..v.n() {
            cross *= sq_dist(u.column(a), v.column(b));
        }
    }
    let (within_u, within_v) = (within(u), within(v));
    Ok(PiProduct { cross, within_u, within_v, joint: cross * within_u * within_v })
}

/// Orbit-matching tolerance for a pair of samples.
fn orbit_tol(x: &TokenMatrix, y: &TokenMatrix) -> f64 {
    1e-9 * (1.0 + x.max_abs().max(y.max_abs()))
}

/// Unordered pairs `(i, j)`, `i < j`, with `X_i ≠ σ(X_j)` for every `σ ∈ G`.
/// `tol = None` uses a scale-relative default.
pub fn orbit_distinct_pairs(data: &Dataset, g: &PermutationGroup, tol: Option<f64>) -> Result<Vec<(usize, usize)>> {
    let mut out = Vec::new();
    let s = data.samples();
    for i in 0..s.len() {
        for j in i + 1..s.len() {
            let t = tol.unwrap_or_else(|| orbit_tol(&s[i], &s[j]));
            if !same_orbit(g, &s[i], &s[j], t)? {
                out.push((i, j));
            }
        }
    }
    Ok(out)
}

/// First pair of coincident tokens found for a sample pair.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Witness {
    pub trial: usize,
    pub pair: (usize, usize),
    /// `(sample, token)` of each coincident token.
    pub tokens: [(usize, usize); 2],
    pub distance: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFailures {
    pub pair: (usize, usize),
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistinguishReport {
    pub trials: usize,
    pub successes: usize,
    pub success_fraction: f64,
    /// Smallest token gap over successful trials (`None` without any).
    pub min_separation: Option<f64>,
    /// Smallest `log Π` over all trials and checked pairs.
    pub min_log_pi: Option<f64>,
    pub per_pair: Vec<PairFailures>,
    pub excluded_pairs: Vec<(usize, usize)>,
    pub witness: Option<Witness>,
    pub layers_used: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub trials: usize,
    /// Standard deviation of every parameter draw.
    pub scale: f64,
    /// Extra factor on `W_K` draws.
    pub key_scale: f64,
    /// Token-gap threshold; `None` means `1e-7 · (1 + max |g(X)|)` per trial.
    pub tol: Option<f64>,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        Self { trials: 200, scale: 1.0, key_scale: 1.0, tol: None }
    }
}

/// `(Id + g_m) ∘ .. ∘ (Id + g_1)` applied to `x`.
pub fn apply_residual_stack(stack: &[MixerSpec], params: &[Vec<f64>], x: &TokenMatrix) -> Result<TokenMatrix> {
    let mut cur = x.as_matrix().clone();
    for (l, (spec, p)) in stack.iter().zip(params).enumerate() {
        let (g, _) = spec.forward(p, &cur).map_err(|e| e.context(format!("mixer layer {l}")))?;
        cur += g;
    }
    TokenMatrix::new(cur)
}

fn log_pi(u: &TokenMatrix, v: &TokenMatrix) -> f64 {
    let mut acc = 0.0;
    let cols: Vec<_> = (0..u.n()).map(|i| u.column(i)).chain((0..v.n()).map(|i| v.column(i))).collect();
    for a in 0..cols.len() {
        for b in a + 1..cols.len() {
            acc += sq_dist(cols[a], cols[b]).ln();
        }
    }
    acc
}

/// Closest pair among the `2n` tokens of `u` (sample `iu`) and `v` (sample `iv`).
fn closest(u: &TokenMatrix, iu: usize, v: &TokenMatrix, iv: usize) -> ([(usize, usize); 2], f64) {
    let cols: Vec<_> = (0..u.n()).map(|i| ((iu, i), u.column(i))).chain((0..v.n()).map(|i| ((iv, i), v.column(i)))).collect();
    let mut best = ([cols[0].0, cols[0].0], f64::INFINITY);
    for a in 0..cols.len() {
        for b in a + 1..cols.len() {
            let dist = sq_dist(cols[a].1, cols[b].1).sqrt();
            if dist < best.1 {
                best = ([cols[a].0, cols[b].0], dist);
            }
        }
    }
    best
}

/// Monte-Carlo check that random parameters make every orbit-distinct pair
/// of samples token-distinct after the residual mixer stack.
pub fn verify(data: &Dataset, g: &PermutationGroup, stack: &[MixerSpec], opts: &VerifyOptions, rng: &mut LabRng) -> Result<DistinguishReport> {
    if stack.is_empty() {
        return Err(invalid("distinguishability needs at least one mixer layer"));
    }
    if opts.trials == 0 {
        return Err(invalid("distinguishability needs at least one trial"));
    }
    if let Some(i) = data.first_degenerate() {
        return Err(Error::GeneralPosition(format!(
            "sample {i} has coincident tokens; distinguishability is only defined for samples in general position"
        )));
    }
    if let Some((d, n)) = data.shape() {
        if let Some(l) = stack.iter().position(|s| s.d() != d || s.n() != n) {
            return Err(shape(format!("mixer layer {l} is {}x{}, samples are {d}x{n}", stack[l].d(), stack[l].n())));
        }
    }
    let pairs = orbit_distinct_pairs(data, g, None)?;
    let mut excluded = Vec::new();
    for i in 0..data.len() {
        for j in i + 1..data.len() {
            if !pairs.contains(&(i, j)) {
                excluded.push((i, j));
            }
        }
    }
    let base_seed = rng.next_u64();
    let mut per_pair: Vec<PairFailures> = pairs.iter().map(|&pair| PairFailures { pair, failures: 0 }).collect();
    let mut successes = 0;
    let mut min_sep: Option<f64> = None;
    let mut min_log_pi: Option<f64> = None;
    let mut witness = None;
    for trial in 0..opts.trials {
        let mut trng = stream(base_seed, "distinguish-trial", trial as u64);
        let params = stack
            .iter()
            .map(|s| sample_params_scaled(s, opts.scale, opts.key_scale, &mut trng).map(|p| p.0))
            .collect::<Result<Vec<_>>>()?;
        let outs = data
            .samples()
            .iter()
            .map(|x| apply_residual_stack(stack, &params, x))
            .collect::<Result<Vec<_>>>()
            .map_err(|e| e.context(format!("trial {trial}")))?;
        let tol = opts.tol.unwrap_or_else(|| 1e-7 * (1.0 + outs.iter().map(TokenMatrix::max_abs).fold(0.0, f64::max)));
        let mut ok = true;
        let mut trial_sep = f64::INFINITY;
        for (slot, &(i, j)) in per_pair.iter_mut().zip(&pairs) {
            let (tokens, dist) = closest(&outs[i], i, &outs[j], j);
            let lp = log_pi(&outs[i], &outs[j]);
            min_log_pi = Some(min_log_pi.map_or(lp, |m| m.min(lp)));
            trial_sep = trial_sep.min(dist);
            if dist <= tol {
                ok = false;
                slot.failures += 1;
                if witness.is_none() {
                    witness = Some(Witness { trial, pair: (i, j), tokens, distance: dist });
                }
            }
        }
        if ok {
            successes += 1;
            if trial_sep.is_finite() {
                min_sep = Some(min_sep.map_or(trial_sep, |m| m.min(trial_sep)));
            }
        }
    }
    Ok(DistinguishReport {
        trials: opts.trials,
        successes,
        success_fraction: successes as f64 / opts.trials as f64,
        min_separation: min_sep,
        min_log_pi,
        per_pair,
        excluded_pairs: excluded,
        witness,
        layers_used: stack.len(),
    })
}
