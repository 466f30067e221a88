//! Reverse-mode evaluation of the mean squared interpolation loss and a
//! finite-difference checker.

use nalgebra::DMatrix;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::distinguish::Dataset;
use crate::error::{invalid, shape, Error, Result};
use crate::rng::stream;

/// A named block of the flat parameter array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSegment {
    pub block: usize,
    pub component: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

impl ParamSegment {
    pub fn len(&self) -> usize {
        self.rows * self.cols
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn range(&self) -> std::ops::Range<usize> {
        self.offset..self.offset + self.len()
    }
}

/// Disjoint covering segments in offset order.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ParamLayout {
    segments: Vec<ParamSegment>,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, block: usize, component: impl Into<String>, rows: usize, cols: usize) {
        let offset = self.len();
        self.segments.push(ParamSegment { block, component: component.into(), rows, cols, offset });
    }

    pub fn segments(&self) -> &[ParamSegment] {
        &self.segments
    }

    pub fn len(&self) -> usize {
        self.segments.last().map_or(0, |s| s.offset + s.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Segment holding flat index `k`.
    pub fn locate(&self, k: usize) -> Option<&ParamSegment> {
        self.segments.iter().find(|s| s.range().contains(&k))
    }

    pub fn block_of(&self, k: usize) -> Option<usize> {
        self.locate(k).map(|s| s.block)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamVector {
    pub layout: ParamLayout,
    pub values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: ParamLayout, values: Vec<f64>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(shape(format!("layout covers {} parameters, got {}", layout.len(), values.len())));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: ParamLayout) -> Self {
        let values = vec![0.0; layout.len()];
        Self { layout, values }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn segment(&self, seg: &ParamSegment) -> &[f64] {
        &self.values[seg.range()]
    }
}

/// A map `ℝ^{d×n} → ℝ^{d×n}` with a recorded forward pass and exact
/// reverse-mode derivatives.
pub trait Differentiable {
    type Tape;

    fn layout(&self) -> ParamLayout;

    fn param_count(&self) -> usize {
        self.layout().len()
    }

    fn forward(&self, params: &[f64], x: &DMatrix<f64>) -> Result<(DMatrix<f64>, Self::Tape)>;

    /// Returns `∂L/∂X` and adds `∂L/∂θ` into `grad_params`, given `∂L/∂F(X)`.
    fn backward(&self, params: &[f64], tape: &Self::Tape, grad_out: &DMatrix<f64>, grad_params: &mut [f64]) -> DMatrix<f64>;

    /// Pre-activations of non-differentiable units seen in `tape`.
    fn kink_values(&self, _tape: &Self::Tape) -> Vec<f64> {
        Vec::new()
    }
}

/// `scale · mean_i ‖F(X_i) − Y_i‖_F²`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub scale: f64,
}

impl Default for LossSpec {
    fn default() -> Self {
        Self { scale: 1.0 }
    }
}

/// Loss, gradient and the largest per-sample error `‖F(X_i) − Y_i‖_F`.
#[derive(Debug, Clone, PartialEq)]
pub struct Evaluation {
    pub loss: f64,
    pub grad: Vec<f64>,
    pub max_err: f64,
}

fn labelled(dataset: &Dataset) -> Result<&[crate::tokens::TokenMatrix]> {
    if dataset.is_empty() {
        return Err(invalid("loss needs a nonempty dataset"));
    }
    dataset.labels().ok_or_else(|| invalid("loss needs a labelled dataset"))
}

/// Loss and per-sample errors, forward pass only.
pub fn evaluate_loss<M: Differentiable>(model: &M, params: &[f64], dataset: &Dataset, loss: LossSpec) -> Result<(f64, f64)> {
    let labels = labelled(dataset)?;
    check_len(model, params)?;
    let mut total = 0.0;
    let mut max_err: f64 = 0.0;
    for (x, y) in dataset.samples().iter().zip(labels) {
        let (out, _) = model.forward(params, x.as_matrix())?;
        let e2 = (out - y.as_matrix()).norm_squared();
        total += e2;
        max_err = max_err.max(e2.sqrt());
    }
    let value = loss.scale * total / dataset.len() as f64;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {value}")));
    }
    Ok((value, max_err))
}

fn check_len<M: Differentiable>(model: &M, params: &[f64]) -> Result<()> {
    let expect = model.param_count();
    if params.len() != expect {
        return Err(shape(format!("model expects {expect} parameters, got {}", params.len())));
    }
    Ok(())
}

/// Reverse-mode loss and gradient over raw parameter slices.
pub fn evaluate<M: Differentiable>(model: &M, params: &[f64], dataset: &Dataset, loss: LossSpec) -> Result<Evaluation> {
    let labels = labelled(dataset)?;
    check_len(model, params)?;
    let count = dataset.len() as f64;
    let mut grad = vec![0.0; params.len()];
    let mut total = 0.0;
    let mut max_err: f64 = 0.0;
    for (x, y) in dataset.samples().iter().zip(labels) {
        let (out, tape) = model.forward(params, x.as_matrix())?;
        let resid = out - y.as_matrix();
        let e2 = resid.norm_squared();
        total += e2;
        max_err = max_err.max(e2.sqrt());
        let g = resid * (2.0 * loss.scale / count);
        model.backward(params, &tape, &g, &mut grad);
    }
    let value = loss.scale * total / count;
    if !value.is_finite() {
        return Err(Error::NonFinite(format!("loss evaluated to {value}")));
    }
    Ok(Evaluation { loss: value, grad, max_err })
}

pub fn loss_and_grad<M: Differentiable>(model: &M, params: &ParamVector, dataset: &Dataset, loss: LossSpec) -> Result<(f64, ParamVector)> {
    if params.layout != model.layout() {
        return Err(shape("parameter layout does not match the model"));
    }
    let ev = evaluate(model, &params.values, dataset, loss)?;
    Ok((ev.loss, ParamVector { layout: params.layout.clone(), values: ev.grad }))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradReport {
    pub analytic_grad: Vec<f64>,
    /// `None` for coordinates outside the checked subset or next to a kink.
    pub fd_grad: Vec<Option<f64>>,
    pub max_rel_err: f64,
    /// Flat index attaining `max_rel_err`.
    pub worst_index: Option<usize>,
    pub checked: usize,
    pub skipped_near_kink: usize,
}

impl GradReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

pub fn rel_err(a: f64, f: f64) -> f64 {
    (a - f).abs() / (1e-8 + a.abs() + f.abs())
}

/// Models with more parameters than this get a random subset of this size.
pub const GRAD_CHECK_FULL_LIMIT: usize = 400;

/// Compares the reverse-mode gradient with the fourth-order central
/// difference `(8[L(θ+ε) − L(θ−ε)] − [L(θ+2ε) − L(θ−2ε)]) / 12ε` per coordinate.
/// Coordinates whose perturbation moves a ReLU pre-activation `z` with
/// `|z| ≤ 10·|Δz|` are skipped.
pub fn grad_check<M: Differentiable>(model: &M, params: &[f64], dataset: &Dataset, loss: LossSpec, epsilon: f64) -> Result<GradReport> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(invalid(format!("epsilon must lie in [1e-7, 1e-3], got {epsilon}")));
    }
    let ev = evaluate(model, params, dataset, loss)?;
    let p = params.len();
    let coords: Vec<usize> = if p <= GRAD_CHECK_FULL_LIMIT {
        (0..p).collect()
    } else {
        let mut rng = stream(0, "grad-check-subset", p as u64);
        let mut v = sample(&mut rng, p, GRAD_CHECK_FULL_LIMIT).into_vec();
        v.sort_unstable();
        v
    };
    let kinks_at = |theta: &[f64]| -> Result<Vec<f64>> {
        let mut out = Vec::new();
        for x in dataset.samples() {
            let (_, tape) = model.forward(theta, x.as_matrix())?;
            out.extend(model.kink_values(&tape));
        }
        Ok(out)
    };
    let base_kinks = kinks_at(params)?;
    let mut fd_grad = vec![None; p];
    let mut theta = params.to_vec();
    let mut max_rel: f64 = 0.0;
    let mut worst = None;
    let (mut checked, mut skipped) = (0, 0);
    for &k in &coords {
        if !base_kinks.is_empty() {
            let mut near = false;
            for s in [-2.0, 2.0] {
                theta[k] = params[k] + s * epsilon;
                let moved = kinks_at(&theta)?;
                near |= base_kinks.iter().zip(&moved).any(|(z, m)| {
                    let dz = (m - z).abs();
                    dz > 0.0 && z.abs() <= 10.0 * dz
                });
            }
            theta[k] = params[k];
            if near {
                skipped += 1;
                continue;
            }
        }
        let mut at = |s: f64| -> Result<f64> {
            theta[k] = params[k] + s * epsilon;
            let v = evaluate_loss(model, &theta, dataset, loss)?.0;
            theta[k] = params[k];
            Ok(v)
        };
        let near_diff = at(1.0)? - at(-1.0)?;
        let far_diff = at(2.0)? - at(-2.0)?;
        let f = (8.0 * near_diff - far_diff) / (12.0 * epsilon);
        let e = rel_err(ev.grad[k], f);
        if e > max_rel || worst.is_none() {
            max_rel = max_rel.max(e);
            worst = Some(k);
        }
        fd_grad[k] = Some(f);
        checked += 1;
    }
    Ok(GradReport { analytic_grad: ev.grad, fd_grad, max_rel_err: max_rel, worst_index: worst, checked, skipped_near_kink: skipped })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::feedforward::{Activation, FeedforwardSpec, ResidualStack};
    use crate::kernels::KernelSpec;
    use crate::mixers::{MixerKind, MixerSpec};
    use crate::interpolate::{Architecture, Block};
    use crate::rng::{normals, stream};
    use crate::tokens::TokenMatrix;

    fn random_dataset(d: usize, n: usize, count: usize, seed: u64) -> Dataset {
        let mut rng = stream(seed, "diffeval-data", 0);
        let xs = (0..count).map(|_| TokenMatrix::random_normal(d, n, &mut rng)).collect();
        let ys = (0..count).map(|_| TokenMatrix::random_normal(d, n, &mut rng)).collect();
        Dataset::labelled(xs, ys).unwrap()
    }

    fn smooth_model(d: usize, n: usize) -> Architecture {
        Architecture::new(
            d,
            n,
            vec![
                Block::Mixer(MixerSpec::dense_softmax(d, n).unwrap()),
                Block::Feedforward(ResidualStack::repeated(FeedforwardSpec::new(d, 3, Activation::Tanh).unwrap(), 1)),
            ],
        )
        .unwrap()
    }

    #[test]
    fn layout_bookkeeping() {
        let mut l = ParamLayout::new();
        l.push(0, "W_Q", 2, 2);
        l.push(1, "psi", 2, 1);
        assert_eq!(l.len(), 6);
        assert_eq!(l.segments()[1].range(), 4..6);
        assert_eq!(l.block_of(5), Some(1));
        assert_eq!(l.block_of(6), None);
        assert!(ParamVector::new(l.clone(), vec![0.0; 5]).is_err());
    }

    #[test]
    fn conv_scale_matches_closed_form() {
        // F(X) = (1 + ψ_0) X + ψ_1 shift(X); the loss is quadratic in ψ.
        let (d, n) = (2, 2);
        let arch = Architecture::new(d, n, vec![Block::Mixer(MixerSpec::new(MixerKind::CircularConv { len: 1 }, d, n).unwrap())]).unwrap();
        let data = random_dataset(d, n, 3, 1);
        let psi = [0.3, -0.7];
        let ev = evaluate(&arch, &psi, &data, LossSpec::default()).unwrap();
        let mut expect = [0.0; 2];
        for (x, y) in data.samples().iter().zip(data.labels().unwrap()) {
            let x = x.as_matrix();
            let shifted = DMatrix::from_fn(d, n, |r, c| x[(r, (c + 1) % n)]);
            let resid = x * (1.0 + psi[0]) + &shifted * psi[1] - y.as_matrix();
            expect[0] += 2.0 * resid.dot(x) / 3.0;
            expect[1] += 2.0 * resid.dot(&shifted) / 3.0;
        }
        for k in 0..2 {
            assert!((ev.grad[k] - expect[k]).abs() < 1e-10, "{k}: {} vs {}", ev.grad[k], expect[k]);
        }
    }

    #[test]
    fn identity_model_on_identity_target() {
        let (d, n) = (2, 3);
        let arch = smooth_model(d, n);
        let mut rng = stream(2, "id", 0);
        let mut params = normals(&mut rng, arch.param_count(), 1.0);
        params[8..12].iter_mut().for_each(|v| *v = 0.0);
        params[12..18].iter_mut().for_each(|v| *v = 0.0);
        let x = TokenMatrix::random_normal(d, n, &mut rng);
        let data = Dataset::labelled(vec![x.clone()], vec![x]).unwrap();
        let ev = evaluate(&arch, &params, &data, LossSpec::default()).unwrap();
        assert_eq!(ev.loss, 0.0);
        assert!(ev.grad[8..12].iter().all(|g| *g == 0.0));
    }

    #[test]
    fn gradient_is_linear_in_loss_scale() {
        let arch = smooth_model(2, 3);
        let data = random_dataset(2, 3, 2, 3);
        let params = normals(&mut stream(3, "p", 0), arch.param_count(), 0.8);
        let g1 = evaluate(&arch, &params, &data, LossSpec { scale: 1.0 }).unwrap();
        let g3 = evaluate(&arch, &params, &data, LossSpec { scale: 3.5 }).unwrap();
        for (a, b) in g1.grad.iter().zip(&g3.grad) {
            assert!((3.5 * a - b).abs() <= 1e-12 * (1.0 + b.abs()));
        }
        let zero = grad_check(&arch, &params, &data, LossSpec { scale: 0.0 }, 1e-4).unwrap();
        assert!(zero.analytic_grad.iter().all(|g| *g == 0.0));
        assert!(zero.fd_grad.iter().flatten().all(|g| *g == 0.0));
    }

    #[test]
    fn gradient_is_additive_over_datasets() {
        let arch = smooth_model(2, 3);
        let a = random_dataset(2, 3, 2, 4);
        let b = random_dataset(2, 3, 2, 5);
        let params = normals(&mut stream(4, "p", 0), arch.param_count(), 0.8);
        let ga = evaluate(&arch, &params, &a, LossSpec::default()).unwrap().grad;
        let gb = evaluate(&arch, &params, &b, LossSpec::default()).unwrap().grad;
        let joint = Dataset::labelled(
            a.samples().iter().chain(b.samples()).cloned().collect(),
            a.labels().unwrap().iter().chain(b.labels().unwrap()).cloned().collect(),
        )
        .unwrap();
        let gj = evaluate(&arch, &params, &joint, LossSpec::default()).unwrap().grad;
        for k in 0..gj.len() {
            assert!((0.5 * ga[k] + 0.5 * gb[k] - gj[k]).abs() < 1e-12 * (1.0 + gj[k].abs()));
        }
    }

    #[test]
    fn smooth_models_pass_grad_check() {
        let mut rng = stream(6, "gc", 0);
        let (d, n) = (2, 3);
        let data = random_dataset(d, n, 2, 6);
        for kernel in [KernelSpec::ExpDot, KernelSpec::rbf(1.0).unwrap()] {
            let pattern = crate::sparsity::make_pattern(&crate::sparsity::PatternSpec::new(crate::sparsity::PatternKind::Full), n).unwrap();
            let arch = Architecture::new(
                d,
                n,
                vec![
                    Block::Mixer(MixerSpec::attention(kernel, pattern, d).unwrap()),
                    Block::Feedforward(ResidualStack::repeated(FeedforwardSpec::new(d, 4, Activation::Tanh).unwrap(), 2)),
                ],
            )
            .unwrap();
            let params = normals(&mut rng, arch.param_count(), 0.7);
            let rep = grad_check(&arch, &params, &data, LossSpec::default(), 1e-4).unwrap();
            assert!(rep.passes(1e-5), "{rep:?}");
            assert_eq!(rep.checked, arch.param_count());
        }
    }

    #[test]
    fn relu_coordinates_near_kinks_are_skipped() {
        let (d, n) = (2, 2);
        let arch = Architecture::new(d, n, vec![Block::Feedforward(ResidualStack::repeated(FeedforwardSpec::new(d, 3, Activation::Relu).unwrap(), 1))]).unwrap();
        let data = random_dataset(d, n, 1, 7);
        let mut params = normals(&mut stream(7, "p", 0), arch.param_count(), 1.0);
        // Put unit 0 exactly on its kink for the first token: b_0 = A_0 · x.
        let x = data.samples()[0].column(0).clone_owned();
        params[12] = params[6] * x[0] + params[9] * x[1];
        let rep = grad_check(&arch, &params, &data, LossSpec::default(), 1e-5).unwrap();
        assert!(rep.skipped_near_kink > 0);
        assert!(rep.passes(1e-5), "{rep:?}");
    }

    #[test]
    fn evaluation_is_deterministic() {
        let arch = smooth_model(3, 4);
        let data = random_dataset(3, 4, 3, 8);
        let params = normals(&mut stream(8, "p", 0), arch.param_count(), 1.0);
        let a = evaluate(&arch, &params, &data, LossSpec::default()).unwrap();
        let b = evaluate(&arch, &params, &data, LossSpec::default()).unwrap();
        assert_eq!(a.loss.to_bits(), b.loss.to_bits());
        assert!(a.grad.iter().zip(&b.grad).all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn precondition_errors() {
        let arch = smooth_model(2, 3);
        let data = random_dataset(2, 3, 1, 9);
        let params = vec![0.0; arch.param_count()];
        assert!(grad_check(&arch, &params, &data, LossSpec::default(), 1e-2).is_err());
        assert!(evaluate(&arch, &params[1..], &data, LossSpec::default()).is_err());
        let unlabelled = Dataset::new(data.samples().to_vec()).unwrap();
        assert!(evaluate(&arch, &params, &unlabelled, LossSpec::default()).is_err());
        let wrong = ParamVector::zeros(ParamLayout::new());
        assert!(loss_and_grad(&arch, &wrong, &data, LossSpec::default()).is_err());
    }
}
