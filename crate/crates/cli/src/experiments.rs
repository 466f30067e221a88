//! Static validation and execution of each experiment kind.

use std::time::Instant;

use serde::Serialize;
use serde_json::{json, Value};

use uaplab::diffeval::Differentiable;
use uaplab::distinguish::{verify, Dataset, VerifyOptions};
use uaplab::feedforward::{parse_ffn_spec, FeedforwardSpec};
use uaplab::groups::{check_equivariance, PermutationGroup, MAX_ENUM_N};
use uaplab::interpolate::{build, make_equivariant_target, orbit_closure, train, TrainConfig};
use uaplab::kernels::{hyperplane_key_matrix, is_diverged, limit_condition_check, separation_profile, KernelConfig, KernelSpec};
use uaplab::mixers::{declared_symmetry, parse_mixer_list, sample_params, MixerSpec};
use uaplab::rng::{normals, stream};
use uaplab::sparsity::{automorphisms, connected_within, make_sequence, reachability, symmetry_group, PatternSequence};
use uaplab::TokenMatrix;

use crate::config::{ExperimentConfig, Kind};
use crate::report::{Check, ReportRecord};

/// One problem found by [`validate`], tied to a config key.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Diagnostic {
    pub field: String,
    pub message: String,
}

impl std::fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

struct Diags(Vec<Diagnostic>);

impl Diags {
    fn push(&mut self, field: &str, message: impl std::fmt::Display) {
        self.0.push(Diagnostic { field: field.to_string(), message: message.to_string() });
    }

    fn require<T: Clone>(&mut self, field: &str, v: &Option<T>) -> Option<T> {
        if v.is_none() {
            self.push(field, "required for this experiment kind");
        }
        v.clone()
    }

    fn positive_usize(&mut self, field: &str, v: &Option<usize>) -> Option<usize> {
        match self.require(field, v) {
            Some(0) => {
                self.push(field, "must be >= 1");
                None
            }
            other => other,
        }
    }

    fn positive(&mut self, field: &str, v: Option<f64>) {
        if let Some(x) = v {
            if !(x > 0.0 && x.is_finite()) {
                self.push(field, format!("must be positive and finite, got {x}"));
            }
        }
    }

    fn fraction(&mut self, field: &str, v: Option<f64>) {
        if let Some(x) = v {
            if !(0.0..=1.0).contains(&x) {
                self.push(field, format!("must lie in [0, 1], got {x}"));
            }
        }
    }

    fn capture<T>(&mut self, field: &str, r: uaplab::Result<T>) -> Option<T> {
        r.map_err(|e| self.push(field, e)).ok()
    }
}

enum Plan {
    Connectivity {
        phi: PatternSequence,
    },
    Automorphisms {
        phi: PatternSequence,
    },
    KernelLimit {
        kernel: KernelSpec,
        d: usize,
        samples: usize,
        grid: Vec<f64>,
        threshold: f64,
        hyperplane: bool,
    },
    Distinguish {
        d: usize,
        n: usize,
        stack: Vec<MixerSpec>,
        group: PermutationGroup,
        size: usize,
        opts: VerifyOptions,
    },
    Interpolate {
        d: usize,
        n: usize,
        mixers: Vec<MixerSpec>,
        ffn: FeedforwardSpec,
        depth: usize,
        group: PermutationGroup,
        size: usize,
        train: TrainConfig,
    },
    Equivariance {
        d: usize,
        n: usize,
        mixers: Vec<MixerSpec>,
        group: Option<PermutationGroup>,
    },
}

/// Grid `10^{k/4}` for `k = 0, 1, ..` up to `t_max`.
fn quarter_decade_grid(t_max: f64) -> Vec<f64> {
    (0..).map(|k| 10f64.powf(k as f64 / 4.0)).take_while(|t| *t <= t_max * (1.0 + 1e-12)).collect()
}

fn mixers_of(diags: &mut Diags, text: &str, d: usize, n: usize) -> Option<Vec<MixerSpec>> {
    if text.trim().is_empty() || text.trim() == "none" {
        return Some(Vec::new());
    }
    let cfgs = diags.capture("mixers", parse_mixer_list(text))?;
    let mut out = Vec::with_capacity(cfgs.len());
    let mut ok = true;
    for (i, c) in cfgs.iter().enumerate() {
        match c.build(d, n) {
            Ok(m) => out.push(m),
            Err(e) => {
                diags.push("mixers", format!("entry {i}: {e}"));
                ok = false;
            }
        }
    }
    ok.then_some(out)
}

fn group_of(diags: &mut Diags, name: &str, n: usize) -> Option<PermutationGroup> {
    if n > MAX_ENUM_N && name.trim() != "trivial" {
        diags.push("group", format!("groups are enumerated explicitly and need n <= {MAX_ENUM_N}, got n = {n}"));
        return None;
    }
    diags.capture("group", PermutationGroup::from_name(name, n))
}

fn plan(cfg: &ExperimentConfig) -> Result<Plan, Vec<Diagnostic>> {
    let c = cfg.resolved();
    let mut dg = Diags(Vec::new());
    if c.seed.is_none() {
        dg.push("seed", "required; every run derives its randomness from the config seed");
    }
    let Some(kind) = c.kind else {
        dg.push("kind", format!("required; one of {}", Kind::ALL.map(Kind::as_str).join(", ")));
        return Err(dg.0);
    };
    if let Some(p) = c.p {
        if !(p >= 1.0) {
            dg.push("p", format!("report norm exponent must be >= 1, got {p}"));
        }
    }
    dg.positive("scale", c.scale);
    dg.positive("key_scale", c.key_scale);
    dg.positive("tol", c.tol);
    dg.fraction("min_success_fraction", c.min_success_fraction);
    dg.fraction("min_diverged_fraction", c.min_diverged_fraction);
    let plan = match kind {
        Kind::Connectivity | Kind::Automorphisms => {
            let n = dg.positive_usize("n", &c.n);
            let pat = dg.require("pattern", &c.pattern);
            let phi = match (n, pat) {
                (Some(n), Some(p)) => dg.capture("pattern", make_sequence(&p, n)),
                _ => None,
            };
            if kind == Kind::Automorphisms {
                if let Some(n) = n.filter(|n| *n > MAX_ENUM_N) {
                    dg.push("n", format!("automorphisms are found by enumeration and need n <= {MAX_ENUM_N}, got {n}"));
                }
            }
            phi.map(|phi| if kind == Kind::Connectivity { Plan::Connectivity { phi } } else { Plan::Automorphisms { phi } })
        }
        Kind::KernelLimit => {
            let d = dg.positive_usize("d", &c.d);
            if d == Some(1) {
                dg.push("d", "the limit check needs d >= 2");
            }
            let samples = dg.positive_usize("samples", &c.samples);
            dg.positive("threshold", c.threshold);
            dg.positive("t_max", c.t_max);
            let grid = c.t_grid.clone().unwrap_or_else(|| quarter_decade_grid(c.t_max.unwrap_or(1000.0)));
            if grid.is_empty() || grid.iter().any(|t| !(*t > 0.0 && t.is_finite())) || grid.windows(2).any(|w| w[1] <= w[0]) {
                dg.push("t_grid", "must be a nonempty, strictly increasing list of positive values");
            }
            let kernel = match (dg.capture("kernel", KernelConfig::parse(c.kernel.as_deref().unwrap_or_default())), d) {
                (Some(k), Some(d)) => dg.capture("kernel", k.build(d)),
                _ => None,
            };
            match (kernel, d, samples) {
                (Some(kernel), Some(d), Some(samples)) if d >= 2 => Some(Plan::KernelLimit {
                    kernel,
                    d,
                    samples,
                    grid,
                    threshold: c.threshold.unwrap_or(50.0),
                    hyperplane: c.hyperplane.unwrap_or(true),
                }),
                _ => None,
            }
        }
        Kind::Distinguish => {
            let d = dg.positive_usize("d", &c.d);
            let n = dg.positive_usize("n", &c.n);
            let size = dg.positive_usize("dataset_size", &c.dataset_size);
            let trials = dg.positive_usize("trials", &c.trials);
            match (d, n, size, trials) {
                (Some(d), Some(n), Some(size), Some(trials)) => {
                    let stack = mixers_of(&mut dg, c.mixers.as_deref().unwrap_or_default(), d, n);
                    if stack.as_ref().is_some_and(Vec::is_empty) {
                        dg.push("mixers", "distinguishability needs at least one mixer layer");
                    }
                    let group = group_of(&mut dg, c.group.as_deref().unwrap_or_default(), n);
                    match (stack, group) {
                        (Some(stack), Some(group)) if !stack.is_empty() => Some(Plan::Distinguish {
                            d,
                            n,
                            stack,
                            group,
                            size,
                            opts: VerifyOptions {
                                trials,
                                scale: c.scale.unwrap_or(1.0),
                                key_scale: c.key_scale.unwrap_or(1.0),
                                tol: c.tol,
                            },
                        }),
                        _ => None,
                    }
                }
                _ => None,
            }
        }
        Kind::Interpolate => {
            let d = dg.positive_usize("d", &c.d);
            let n = dg.positive_usize("n", &c.n);
            let size = dg.positive_usize("dataset_size", &c.dataset_size);
            dg.positive_usize("trials", &c.trials);
            let train = TrainConfig {
                max_iters: c.max_iters.unwrap_or_default(),
                step_size: c.step_size.unwrap_or_default(),
                momentum: c.momentum.unwrap_or_default(),
                target_max_err: c.target_max_err.unwrap_or_default(),
                seed: c.seed.unwrap_or_default(),
                init_scale: c.init_scale.unwrap_or_default(),
            };
            dg.capture("train", train.validate());
            dg.positive("equivariance_tol", c.equivariance_tol);
            let target = c.target.as_deref().unwrap_or_default();
            if !matches!(target, "random" | "identity" | "tanh") {
                dg.push("target", format!("unknown target '{target}'; expected random, identity or tanh"));
            }
            match (d, n, size) {
                (Some(d), Some(n), Some(size)) => {
                    let mixers = mixers_of(&mut dg, c.mixers.as_deref().unwrap_or_default(), d, n);
                    let ffn = dg.capture("ffn", parse_ffn_spec(c.ffn.as_deref().unwrap_or_default(), d));
                    if let Some((_, 0)) = ffn {
                        dg.push("ffn", "feedforward depth must be >= 1");
                    }
                    if d < 2 {
                        dg.push("d", "interpolation experiments need d >= 2");
                    }
                    let group = group_of(&mut dg, c.group.as_deref().unwrap_or_default(), n);
                    match (mixers, ffn, group) {
                        (Some(mixers), Some((ffn, depth)), Some(group)) if depth > 0 && d >= 2 => {
                            Some(Plan::Interpolate { d, n, mixers, ffn, depth, group, size, train })
                        }
                        _ => None,
                    }
                }
                _ => None,
            }
        }
        Kind::Equivariance => {
            let d = dg.positive_usize("d", &c.d);
            let n = dg.positive_usize("n", &c.n);
            dg.positive_usize("trials", &c.trials);
            match (d, n) {
                (Some(d), Some(n)) => {
                    let mixers = match dg.require("mixers", &c.mixers) {
                        Some(text) => mixers_of(&mut dg, &text, d, n),
                        None => None,
                    };
                    if n > MAX_ENUM_N {
                        dg.push("n", format!("symmetry groups are enumerated explicitly and need n <= {MAX_ENUM_N}"));
                    }
                    let group = match &c.group {
                        Some(g) => group_of(&mut dg, g, n).map(Some),
                        None => Some(None),
                    };
                    match (mixers, group) {
                        (Some(mixers), Some(group)) if n <= MAX_ENUM_N => Some(Plan::Equivariance { d, n, mixers, group }),
                        _ => None,
                    }
                }
                _ => None,
            }
        }
    };
    match plan {
        Some(p) if dg.0.is_empty() => Ok(p),
        _ => {
            if dg.0.is_empty() {
                dg.push("config", "incomplete configuration");
            }
            Err(dg.0)
        }
    }
}

/// All static problems with `cfg`; empty means [`run`] will not reject its input.
pub fn validate(cfg: &ExperimentConfig) -> Vec<Diagnostic> {
    plan(cfg).err().unwrap_or_default()
}

#[derive(Debug)]
pub enum RunError {
    Invalid(Vec<Diagnostic>),
    Failed(anyhow::Error),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Invalid(d) => {
                writeln!(f, "invalid configuration:")?;
                for x in d {
                    writeln!(f, "  {x}")?;
                }
                Ok(())
            }
            RunError::Failed(e) => write!(f, "{e:#}"),
        }
    }
}

impl std::error::Error for RunError {}

/// Optional sidecar outputs produced by a run.
#[derive(Debug, Default)]
pub struct Sidecars {
    pub history_csv: Option<String>,
}

fn to_value(v: impl Serialize) -> Value {
    serde_json::to_value(v).expect("outputs serialize")
}

/// `(mean_i e_i^p)^{1/p}`, or the maximum for `p = ∞`.
pub fn p_summary(errs: &[f64], p: f64) -> f64 {
    if errs.is_empty() {
        return 0.0;
    }
    if p.is_infinite() {
        return errs.iter().copied().fold(0.0, f64::max);
    }
    (errs.iter().map(|e| e.powf(p)).sum::<f64>() / errs.len() as f64).powf(1.0 / p)
}

pub fn run(cfg: &ExperimentConfig) -> Result<(ReportRecord, Sidecars), RunError> {
    let plan = plan(cfg).map_err(RunError::Invalid)?;
    let resolved = cfg.resolved();
    let kind = resolved.kind.expect("validated");
    let seed = resolved.seed.expect("validated");
    let start = Instant::now();
    let mut sidecars = Sidecars::default();
    let wrap = |e: uaplab::Error| RunError::Failed(anyhow::Error::new(e).context(format!("{kind} experiment (seed {seed})")));
    let (outputs, checks) = match plan {
        Plan::Connectivity { phi } => {
            let m = phi.len();
            let within: Vec<bool> = (1..=m).map(|k| connected_within(&phi, k)).collect::<uaplab::Result<_>>().map_err(wrap)?;
            let connected_at = uaplab::sparsity::connected_at(&phi);
            let reach = reachability(&phi, m).map_err(wrap)?;
            let mut checks = Vec::new();
            if let Some(expect) = resolved.expect_connected_at {
                checks.push(Check::new("connected_at", connected_at, format!("== {expect}"), connected_at == Some(expect)));
            }
            (json!({ "n": phi.n(), "layers": m, "connected_at": connected_at, "connected_within": within, "reachability": reach.to_rows() }), checks)
        }
        Plan::Automorphisms { phi } => {
            let g = if phi.len() == 1 { automorphisms(&phi.patterns()[0]) } else { symmetry_group(&phi) }.map_err(wrap)?;
            let mut out = json!({
                "n": phi.n(),
                "layers": phi.len(),
                "order": g.order(),
                "generators": g.generators().iter().map(|s| s.to_string()).collect::<Vec<_>>(),
            });
            if g.order() <= 120 {
                out["elements"] = to_value(g.elements().iter().map(|s| s.to_string()).collect::<Vec<_>>());
            }
            let mut checks = Vec::new();
            if let Some(expect) = resolved.expect_order {
                checks.push(Check::new("order", g.order(), format!("== {expect}"), g.order() == expect));
            }
            (out, checks)
        }
        Plan::KernelLimit { kernel, d, samples, grid, threshold, hyperplane } => {
            let mut rng = stream(seed, "kernel-limit", 0);
            let rep = limit_condition_check(&kernel, d, samples, &grid, threshold, &mut rng).map_err(wrap)?;
            let min_frac = resolved.min_diverged_fraction.unwrap_or(0.99);
            let mut checks = vec![Check::new("diverged_fraction", rep.diverged_fraction, format!(">= {min_frac}"), rep.diverged_fraction >= min_frac)];
            let mut out = json!({ "limit": to_value(&rep) });
            if hyperplane {
                let mut hr = stream(seed, "kernel-limit-hyperplane", 0);
                let x = normals(&mut hr, d, 1.0);
                let y1 = normals(&mut hr, d, 1.0);
                let y2 = normals(&mut hr, d, 1.0);
                let w0 = normals(&mut hr, d * d, 1.0);
                let w = hyperplane_key_matrix(&x, &y1, &y2, &w0);
                let profile = separation_profile(&kernel, &x, &w, &y1, &y2, &grid).map_err(wrap)?;
                let diverged = is_diverged(&profile, threshold);
                if matches!(kernel, KernelSpec::ExpDot) {
                    checks.push(Check::new("hyperplane_counterexample_diverged", diverged, "== false", !diverged));
                }
                out["hyperplane"] = json!({ "profile": profile, "diverged": diverged });
            }
            (out, checks)
        }
        Plan::Distinguish { d, n, stack, group, size, opts } => {
            let data = Dataset::random(d, n, size, &mut stream(seed, "distinguish-data", 0));
            let rep = verify(&data, &group, &stack, &opts, &mut stream(seed, "distinguish", 0)).map_err(wrap)?;
            let min = resolved.min_success_fraction.unwrap_or(0.99);
            let checks = vec![Check::new("success_fraction", rep.success_fraction, format!(">= {min}"), rep.success_fraction >= min)];
            (json!({ "group_order": group.order(), "report": to_value(&rep) }), checks)
        }
        Plan::Interpolate { d, n, mixers, ffn, depth, group, size, train: tcfg } => {
            let mut data_rng = stream(seed, "train-data", 0);
            let mut xs: Vec<TokenMatrix> = (0..size).map(|_| TokenMatrix::random_normal(d, n, &mut data_rng)).collect();
            if resolved.orbit_expand == Some(true) {
                xs = orbit_closure(&group, &xs).map_err(wrap)?;
            }
            let mut target_rng = stream(seed, "train-target", 0);
            let target = resolved.target.clone().unwrap_or_default();
            let base = |x: &TokenMatrix| -> uaplab::Result<TokenMatrix> {
                Ok(match target.as_str() {
                    "identity" => x.clone(),
                    "tanh" => x.map(f64::tanh),
                    _ => TokenMatrix::random_normal(d, n, &mut target_rng),
                })
            };
            let data = make_equivariant_target(&group, base, &xs).map_err(wrap)?;
            let mut model = build(&mixers, &ffn, depth, d, n, tcfg.init_scale, &mut stream(seed, "train-init", 0)).map_err(wrap)?;
            let rep = train(&mut model, &data, &tcfg).map_err(wrap)?;
            let errs = data
                .samples()
                .iter()
                .zip(data.labels().expect("labelled"))
                .map(|(x, y)| model.apply(x).map(|f| f.frobenius_distance(y)))
                .collect::<uaplab::Result<Vec<_>>>()
                .map_err(wrap)?;
            let p = resolved.p.unwrap_or(2.0);
            let mut checks = vec![Check::new("converged", rep.converged, format!("max error <= {} within {} iterations", tcfg.target_max_err, tcfg.max_iters), rep.converged)];
            let mut out = json!({
                "samples": data.len(),
                "param_count": model.arch.param_count(),
                "final_max_err": rep.final_max_err,
                "final_loss": rep.final_loss,
                "iters": rep.iters,
                "converged": rep.converged,
                "step_halvings": rep.step_halvings,
                "errors": errs,
                "p": p,
                "error_p_norm": p_summary(&errs, p),
                "params": model.params.values,
            });
            if group.order() > 1 {
                let tol = resolved.equivariance_tol.unwrap_or(1e-8);
                let mut erng = stream(seed, "train-equivariance", 0);
                let eq = check_equivariance(&group, d, |x| model.apply(x), resolved.trials.unwrap_or(200), tol, &mut erng).map_err(wrap)?;
                checks.push(Check::new("equivariance", eq.max_relative_violation, format!("relative violation <= {tol}"), eq.max_relative_violation <= tol));
                out["equivariance"] = to_value(&eq);
            }
            sidecars.history_csv = Some(rep.history_csv());
            (out, checks)
        }
        Plan::Equivariance { d, n, mixers, group } => {
            let tol = resolved.tol.unwrap_or(1e-9);
            let trials = resolved.trials.unwrap_or(200);
            let scale = resolved.scale.unwrap_or(1.0);
            let mut results = Vec::new();
            let mut checks = Vec::new();
            for (i, m) in mixers.iter().enumerate() {
                let g = match &group {
                    Some(g) => g.clone(),
                    None => declared_symmetry(m).map_err(wrap)?,
                };
                let mut rng = stream(seed, "equivariance", i as u64);
                let params = sample_params(m, scale, &mut rng).map_err(wrap)?;
                let rep = check_equivariance(&g, d, |x| uaplab::mixers::apply(m, &params, x), trials, tol, &mut rng).map_err(wrap)?;
                checks.push(Check::new(
                    &format!("mixer[{i}] {}", m.name()),
                    rep.max_relative_violation,
                    format!("relative violation <= {tol}"),
                    rep.max_relative_violation <= tol,
                ));
                results.push(json!({ "mixer": m.name(), "group_order": g.order(), "report": to_value(&rep) }));
            }
            (json!({ "d": d, "n": n, "mixers": results }), checks)
        }
    };
    let record = ReportRecord::new(kind, resolved, outputs, checks, start.elapsed().as_secs_f64());
    Ok((record, sidecars))
}

/// Re-runs a report from its echoed config and compares the results.
pub fn replay(report: &ReportRecord) -> Result<(ReportRecord, bool), RunError> {
    let (again, _) = run(&report.config)?;
    let same = again.same_results(report);
    Ok((again, same))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg(text: &str) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(text).unwrap()
    }

    #[test]
    fn connectivity_example() {
        let (r, _) = run(&cfg("kind = \"connectivity\"\nseed = 0\nn = 5\npattern = \"window:1*4\"\nexpect_connected_at = 4\n")).unwrap();
        assert_eq!(r.outputs["connected_at"], json!(4));
        assert!(r.pass);
    }

    #[test]
    fn automorphism_example() {
        let (r, _) = run(&cfg("kind = \"automorphisms\"\nseed = 0\nn = 6\npattern = \"circulant:1\"\n")).unwrap();
        assert_eq!(r.outputs["order"], json!(12));
    }

    #[test]
    fn validate_reports_problems() {
        assert!(validate(&cfg("kind = \"connectivity\"\nseed = 0\nn = 5\npattern = \"window:1\"\n")).is_empty());
        let d = validate(&cfg("kind = \"automorphisms\"\nseed = 0\nn = 6\npattern = \"circulant:2\"\n"));
        assert_eq!(d.len(), 1);
        assert!(d[0].message.contains("floor((n-1)/2) - 1"), "{:?}", d);
        let d = validate(&cfg("kind = \"kernel-limit\"\nseed = 0\nd = 2\nkernel = \"laplace\"\n"));
        assert!(d.iter().any(|x| x.field == "kernel" && x.message.contains("accepted forms")), "{d:?}");
        let d = validate(&cfg("kind = \"distinguish\"\nd = 2\nn = 3\n"));
        assert!(d.iter().any(|x| x.field == "seed"));
        let d = validate(&cfg("seed = 1\n"));
        assert!(d.iter().any(|x| x.field == "kind"));
        let d = validate(&cfg("kind = \"interpolate\"\nseed = 1\nd = 2\nn = 3\nstep_size = -1.0\nffn = \"ffn*0\"\n"));
        assert!(d.iter().any(|x| x.field == "train"));
        assert!(d.iter().any(|x| x.field == "ffn"));
    }

    #[test]
    fn equivariance_kind_passes() {
        let (r, _) = run(&cfg("kind = \"equivariance\"\nseed = 2\nd = 2\nn = 4\ntrials = 20\nmixers = \"attn:exp:full; conv:1; skyformer; bias:window:1\"\n")).unwrap();
        assert!(r.pass, "{}", r.to_json());
        assert_eq!(r.checks.len(), 4);
    }

    #[test]
    fn replay_is_bit_identical() {
        let (r, _) = run(&cfg("kind = \"distinguish\"\nseed = 5\nd = 2\nn = 3\ntrials = 20\ngroup = \"symmetric\"\n")).unwrap();
        let parsed = ReportRecord::from_json(&r.to_json()).unwrap();
        let (_, same) = replay(&parsed).unwrap();
        assert!(same);
    }

    #[test]
    fn p_summaries() {
        assert_eq!(p_summary(&[3.0, 4.0], f64::INFINITY), 4.0);
        assert!((p_summary(&[3.0, 4.0], 2.0) - 12.5f64.sqrt()).abs() < 1e-15);
        assert_eq!(p_summary(&[2.0, 2.0], 1.0), 2.0);
    }
}
