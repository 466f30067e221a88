//! Residual Transformer models `(Id + h) ∘ (Id + g)` and a momentum
//! gradient-descent trainer for finite interpolation.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::diffeval::{evaluate, Differentiable, LossSpec, ParamLayout, ParamVector};
use crate::distinguish::Dataset;
use crate::error::{invalid, shape, Error, Result};
use crate::feedforward::{FeedforwardSpec, ResidualStack, StackTape};
use crate::groups::{act, PermutationGroup};
use crate::mixers::{sample_params, MixerSpec, MixerTape};
use crate::rng::LabRng;
use crate::tokens::TokenMatrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Block {
    /// `Id + g`.
    Mixer(MixerSpec),
    /// The whole residual stack, itself a composition of `Id + h` layers.
    Feedforward(ResidualStack),
}

impl Block {
    pub fn param_count(&self) -> usize {
        match self {
            Block::Mixer(m) => m.param_count(),
            Block::Feedforward(s) => s.param_count(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Block::Mixer(m) => m.name(),
            Block::Feedforward(_) => "feedforward",
        }
    }
}

/// Block list without parameter values.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Architecture {
    d: usize,
    n: usize,
    blocks: Vec<Block>,
}

#[derive(Debug, Clone)]
enum BlockTape {
    Mixer(MixerTape),
    Feedforward(StackTape),
}

/// Forward record of one evaluation.
#[derive(Debug, Clone)]
pub struct ModelTape {
    blocks: Vec<BlockTape>,
}

impl Architecture {
    pub fn new(d: usize, n: usize, blocks: Vec<Block>) -> Result<Self> {
        for (i, b) in blocks.iter().enumerate() {
            let ok = match b {
                Block::Mixer(m) => m.d() == d && m.n() == n,
                Block::Feedforward(s) => s.d() == d,
            };
            if !ok {
                return Err(shape(format!("block {i} ({}) does not act on {d}x{n} inputs", b.name())));
            }
        }
        Ok(Self { d, n, blocks })
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    fn offsets(&self) -> Vec<usize> {
        let mut off = 0;
        self.blocks
            .iter()
            .map(|b| {
                let o = off;
                off += b.param_count();
                o
            })
            .collect()
    }

    pub fn is_analytic(&self) -> bool {
        self.blocks.iter().all(|b| match b {
            Block::Mixer(m) => m.is_analytic(),
            Block::Feedforward(s) => s.layers().iter().all(|l| l.activation().is_analytic()),
        })
    }
}

impl Differentiable for Architecture {
    type Tape = ModelTape;

    fn layout(&self) -> ParamLayout {
        let mut layout = ParamLayout::new();
        for (i, b) in self.blocks.iter().enumerate() {
            match b {
                Block::Mixer(m) => {
                    for s in m.segments() {
                        layout.push(i, s.name, s.rows, s.cols);
                    }
                }
                Block::Feedforward(stack) => {
                    for (l, spec) in stack.layers().iter().enumerate() {
                        for (name, r, c) in spec.segments() {
                            layout.push(i, format!("{name}[{l}]"), r, c);
                        }
                    }
                }
            }
        }
        layout
    }

    fn param_count(&self) -> usize {
        self.blocks.iter().map(Block::param_count).sum()
    }

    fn forward(&self, params: &[f64], x: &DMatrix<f64>) -> Result<(DMatrix<f64>, ModelTape)> {
        if params.len() != self.param_count() {
            return Err(shape(format!("model expects {} parameters, got {}", self.param_count(), params.len())));
        }
        let mut cur = x.clone();
        let mut tapes = Vec::with_capacity(self.blocks.len());
        for ((i, b), off) in self.blocks.iter().enumerate().zip(self.offsets()) {
            let p = &params[off..off + b.param_count()];
            let ctx = |e: Error| e.context(format!("block {i} ({})", b.name()));
            match b {
                Block::Mixer(m) => {
                    let (g, t) = m.forward(p, &cur).map_err(ctx)?;
                    cur += g;
                    tapes.push(BlockTape::Mixer(t));
                }
                Block::Feedforward(s) => {
                    let (out, t) = s.forward(p, &cur).map_err(ctx)?;
                    cur = out;
                    tapes.push(BlockTape::Feedforward(t));
                }
            }
            if cur.iter().any(|v| !v.is_finite()) {
                return Err(Error::NonFinite(format!("block {i} ({}) produced a non-finite output", b.name())));
            }
        }
        Ok((cur, ModelTape { blocks: tapes }))
    }

    fn backward(&self, params: &[f64], tape: &ModelTape, grad_out: &DMatrix<f64>, grad_params: &mut [f64]) -> DMatrix<f64> {
        let mut g = grad_out.clone();
        let offsets = self.offsets();
        for (i, b) in self.blocks.iter().enumerate().rev() {
            let range = offsets[i]..offsets[i] + b.param_count();
            match (b, &tape.blocks[i]) {
                (Block::Mixer(m), BlockTape::Mixer(t)) => {
                    let dx = m.backward(&params[range.clone()], t, &g, &mut grad_params[range]);
                    g += dx;
                }
                (Block::Feedforward(s), BlockTape::Feedforward(t)) => {
                    g = s.backward(&params[range.clone()], t, &g, &mut grad_params[range]);
                }
                _ => unreachable!("tape recorded by a different architecture"),
            }
        }
        g
    }

    fn kink_values(&self, tape: &ModelTape) -> Vec<f64> {
        self.blocks
            .iter()
            .zip(&tape.blocks)
            .flat_map(|(b, t)| match (b, t) {
                (Block::Mixer(m), BlockTape::Mixer(t)) => m.kink_values(t),
                (Block::Feedforward(s), BlockTape::Feedforward(t)) => s.kink_values(t),
                _ => Vec::new(),
            })
            .collect()
    }
}

/// An architecture with concrete parameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub arch: Architecture,
    pub params: ParamVector,
}

impl Model {
    pub fn new(arch: Architecture, values: Vec<f64>) -> Result<Self> {
        let params = ParamVector::new(arch.layout(), values)?;
        Ok(Self { arch, params })
    }

    pub fn apply(&self, x: &TokenMatrix) -> Result<TokenMatrix> {
        let (out, _) = self.arch.forward(&self.params.values, x.as_matrix())?;
        TokenMatrix::new(out)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }
}

/// `[mixer, ffn × depth]` for every mixer, or a lone feedforward stack when
/// `mixers` is empty. Value paths and feedforward output weights start at 0,
/// so the fresh model is the identity; other weights are `N(0, init_scale²)`.
pub fn build(mixers: &[MixerSpec], ffn: &FeedforwardSpec, ffn_depth: usize, d: usize, n: usize, init_scale: f64, rng: &mut LabRng) -> Result<Model> {
    if ffn_depth == 0 {
        return Err(invalid("feedforward depth must be >= 1"));
    }
    if ffn.d() != d {
        return Err(shape(format!("feedforward on R^{} in a model on R^{d}", ffn.d())));
    }
    let stack = ResidualStack::repeated(ffn.clone(), ffn_depth);
    let mut blocks = Vec::new();
    for m in mixers {
        blocks.push(Block::Mixer(m.clone()));
        blocks.push(Block::Feedforward(stack.clone()));
    }
    if mixers.is_empty() {
        blocks.push(Block::Feedforward(stack));
    }
    let arch = Architecture::new(d, n, blocks)?;
    let mut values = Vec::with_capacity(arch.param_count());
    for b in arch.blocks() {
        match b {
            Block::Mixer(m) => {
                let mut p = sample_params(m, init_scale, rng)?.0;
                for r in m.value_ranges() {
                    p[r].iter_mut().for_each(|v| *v = 0.0);
                }
                values.extend(p);
            }
            Block::Feedforward(s) => values.extend(s.sample_params(init_scale, true, rng)),
        }
    }
    Model::new(arch, values)
}

fn orbit_tol(x: &TokenMatrix) -> f64 {
    1e-9 * (1.0 + x.max_abs())
}

/// Labels consistent with a `G`-equivariant target: the first sample of each
/// orbit gets `base(X)`, every later `σ(X)` gets `σ(base(X))`.
pub fn make_equivariant_target<F>(g: &PermutationGroup, mut base: F, samples: &[TokenMatrix]) -> Result<Dataset>
where
    F: FnMut(&TokenMatrix) -> Result<TokenMatrix>,
{
    let mut reps: Vec<(usize, TokenMatrix)> = Vec::new();
    let mut labels: Vec<TokenMatrix> = Vec::with_capacity(samples.len());
    for (i, x) in samples.iter().enumerate() {
        if x.n() != g.n() {
            return Err(shape(format!("sample {i} has {} tokens, group acts on {}", x.n(), g.n())));
        }
        let tol = orbit_tol(x);
        let mut label: Option<TokenMatrix> = None;
        for (r, y) in &reps {
            for sigma in g.elements() {
                if act(sigma, &samples[*r])?.frobenius_distance(x) > tol {
                    continue;
                }
                let candidate = act(sigma, y)?;
                match &label {
                    Some(l) if l.frobenius_distance(&candidate) > orbit_tol(l) => {
                        return Err(Error::InconsistentLabels(format!(
                            "sample {i} is fixed by a permutation ({sigma}) that does not fix the label of sample {r}"
                        )));
                    }
                    Some(_) => {}
                    None => label = Some(candidate),
                }
            }
            if label.is_some() {
                break;
            }
        }
        let y = match label {
            Some(l) => l,
            None => {
                let y = base(x).map_err(|e| e.context(format!("target at sample {i}")))?;
                if y.d() != x.d() || y.n() != x.n() {
                    return Err(shape(format!("target maps sample {i} to {}x{}", y.d(), y.n())));
                }
                for sigma in g.elements() {
                    if act(sigma, x)?.frobenius_distance(x) <= tol && act(sigma, &y)?.frobenius_distance(&y) > orbit_tol(&y) {
                        return Err(Error::InconsistentLabels(format!("sample {i} is fixed by {sigma} but its label is not")));
                    }
                }
                reps.push((i, y.clone()));
                y
            }
        };
        labels.push(y);
    }
    Dataset::labelled(samples.to_vec(), labels)
}

/// Every `σ(X)` over `σ ∈ G`, deduplicated, for each sample.
pub fn orbit_closure(g: &PermutationGroup, samples: &[TokenMatrix]) -> Result<Vec<TokenMatrix>> {
    let mut out: Vec<TokenMatrix> = Vec::new();
    for x in samples {
        for sigma in g.elements() {
            let y = act(sigma, x)?;
            if !out.iter().any(|z| z.frobenius_distance(&y) <= orbit_tol(&y)) {
                out.push(y);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub max_iters: usize,
    pub step_size: f64,
    pub momentum: f64,
    /// Stop once `max_i ‖F(X_i) − Y_i‖_F ≤ target_max_err`.
    pub target_max_err: f64,
    pub seed: u64,
    pub init_scale: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { max_iters: 20_000, step_size: 0.01, momentum: 0.9, target_max_err: 1e-2, seed: 0, init_scale: 1.0 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0 && self.step_size.is_finite()) {
            return Err(invalid(format!("step_size must be positive, got {}", self.step_size)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(invalid(format!("momentum must lie in [0, 1), got {}", self.momentum)));
        }
        if !(self.target_max_err > 0.0) {
            return Err(invalid(format!("target_max_err must be positive, got {}", self.target_max_err)));
        }
        if !(self.init_scale > 0.0 && self.init_scale.is_finite()) {
            return Err(invalid(format!("init_scale must be positive, got {}", self.init_scale)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub iter: usize,
    pub loss: f64,
    pub max_err: f64,
    pub best_max_err: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub final_max_err: f64,
    pub final_loss: f64,
    pub iters: usize,
    pub converged: bool,
    pub step_halvings: usize,
    pub history: Vec<HistoryRow>,
}

impl TrainReport {
    pub fn history_csv(&self) -> String {
        let mut s = String::from("iter,loss,max_err\n");
        for r in &self.history {
            s.push_str(&format!("{},{:e},{:e}\n", r.iter, r.loss, r.max_err));
        }
        s
    }
}

/// Rows are kept at every iteration up to this count, then every `stride`-th.
const HISTORY_DENSE: usize = 1000;
const HISTORY_STRIDE: usize = 10;
const MAX_HALVINGS: usize = 40;

/// Gradient descent with heavy-ball momentum. On a non-finite or exploding
/// loss the best parameters are restored, the velocity reset and the step
/// halved. The model is left holding the best parameters seen.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.labels().is_none() {
        return Err(invalid("training needs a labelled dataset"));
    }
    if let Some(i) = data.first_degenerate() {
        return Err(Error::GeneralPosition(format!("training sample {i} has coincident tokens")));
    }
    let arch = &model.arch;
    let loss = LossSpec::default();
    let first = evaluate(arch, &model.params.values, data, loss).map_err(|e| e.context("iteration 0"))?;
    let blowup = 1e3 * first.loss.max(1.0);
    let mut params = model.params.values.clone();
    let mut best = params.clone();
    let (mut best_err, mut best_loss) = (first.max_err, first.loss);
    let mut velocity = vec![0.0; params.len()];
    let mut step = cfg.step_size;
    let mut halvings = 0;
    let mut history = Vec::new();
    let mut ev = first;
    let mut iter = 0;
    let mut converged = false;
    loop {
        if ev.max_err < best_err {
            best_err = ev.max_err;
            best_loss = ev.loss;
            best.copy_from_slice(&params);
        }
        if iter < HISTORY_DENSE || iter % HISTORY_STRIDE == 0 || ev.max_err <= cfg.target_max_err {
            history.push(HistoryRow { iter, loss: ev.loss, max_err: ev.max_err, best_max_err: best_err });
        }
        if ev.max_err <= cfg.target_max_err {
            converged = true;
            break;
        }
        if iter >= cfg.max_iters {
            break;
        }
        for ((p, v), g) in params.iter_mut().zip(velocity.iter_mut()).zip(&ev.grad) {
            *v = cfg.momentum * *v - step * g;
            *p += *v;
        }
        iter += 1;
        let next = match evaluate(arch, &params, data, loss) {
            Ok(e) if e.loss <= blowup => Some(e),
            Ok(_) | Err(Error::NonFinite(_)) => None,
            Err(e) => return Err(e.context(format!("iteration {iter}"))),
        };
        ev = match next {
            Some(e) => e,
            None => {
                halvings += 1;
                if halvings > MAX_HALVINGS {
                    return Err(Error::NonFinite(format!("loss diverged at iteration {iter} after {MAX_HALVINGS} step halvings")));
                }
                step *= 0.5;
                params.copy_from_slice(&best);
                velocity.iter_mut().for_each(|v| *v = 0.0);
                evaluate(arch, &params, data, loss)?
            }
        };
    }
    model.params.values = best;
    Ok(TrainReport { final_max_err: best_err, final_loss: best_loss, iters: iter, converged, step_halvings: halvings, history })
}
