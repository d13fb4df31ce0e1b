//! Maximum-likelihood estimation over the closed parameter box by
//! deterministic multi-start projected gradient ascent.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::likelihood::LikelihoodContext;
use crate::model::ParameterBox;

/// A smooth objective to be maximised.
pub trait Objective: Sync {
    fn dim(&self) -> usize;
    fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)>;
}

impl Objective for LikelihoodContext {
    fn dim(&self) -> usize {
        self.model().dim()
    }

    fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        LikelihoodContext::value_and_gradient(self, theta)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerOptions {
    /// Stop when the projected gradient norm is below `grad_tol·(1 + |f|)`.
    pub grad_tol: f64,
    pub max_iter: usize,
    /// Additional Halton-sequence starts on top of the `2d + 1` fixed ones.
    pub extra_starts: usize,
    /// Objective values closer than this are considered tied.
    pub tie_tol: f64,
    /// Relative distance to a face (in box widths) that counts as a boundary hit.
    pub boundary_tol: f64,
    pub record_trace: bool,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        Self {
            grad_tol: 1e-8,
            max_iter: 500,
            extra_starts: 0,
            tie_tol: 1e-12,
            boundary_tol: 1e-9,
            record_trace: false,
        }
    }
}

impl OptimizerOptions {
    pub fn validate(&self) -> Result<()> {
        if !(self.grad_tol > 0.0 && self.grad_tol.is_finite()) {
            return Err(Error::Config(format!("optimizer.grad_tol must be positive, got {}", self.grad_tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::Config("optimizer.max_iter must be at least 1".into()));
        }
        if !(self.tie_tol >= 0.0 && self.boundary_tol >= 0.0) {
            return Err(Error::Config("optimizer tolerances must be non-negative".into()));
        }
        Ok(())
    }
}

/// Outcome of one local ascent.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StartOutcome {
    pub index: usize,
    pub start: Vec<f64>,
    pub theta: Vec<f64>,
    pub value: f64,
    pub iterations: usize,
    pub converged: bool,
    /// Accepted objective values, when tracing is on.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub trace: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EstimationResult {
    pub theta_hat: Vec<f64>,
    pub loglik_at_hat: f64,
    /// `ε^{-1}(θ̂ - θ0)`, filled in when the true parameter is known.
    pub normalized_error: Option<Vec<f64>>,
    pub converged: bool,
    pub n_evals: usize,
    pub hit_boundary: bool,
    pub best_start: usize,
    pub starts: Vec<StartOutcome>,
}

impl EstimationResult {
    pub fn with_truth(mut self, theta0: &[f64], epsilon: f64) -> Self {
        self.normalized_error = Some(
            self.theta_hat
                .iter()
                .zip(theta0)
                .map(|(a, b)| (a - b) / epsilon)
                .collect(),
        );
        self
    }
}

/// The fixed starts (center, then center ∓ 0.4·halfwidth per axis) followed
/// by `extra` Halton points.
pub fn start_points(bounds: &ParameterBox, extra: usize) -> Vec<Vec<f64>> {
    let c = bounds.center();
    let hw = bounds.halfwidth();
    let mut out = vec![c.clone()];
    for k in 0..bounds.dim() {
        for sign in [-1.0, 1.0] {
            let mut p = c.clone();
            p[k] += sign * 0.4 * hw[k];
            out.push(p);
        }
    }
    const PRIMES: [u64; 8] = [2, 3, 5, 7, 11, 13, 17, 19];
    for j in 1..=extra as u64 {
        let p = (0..bounds.dim())
            .map(|k| {
                let u = radical_inverse(j, PRIMES[k % PRIMES.len()]);
                bounds.lower()[k] + u * (bounds.upper()[k] - bounds.lower()[k])
            })
            .collect();
        out.push(p);
    }
    out
}

fn radical_inverse(mut j: u64, base: u64) -> f64 {
    let mut inv = 1.0 / base as f64;
    let mut out = 0.0;
    while j > 0 {
        out += (j % base) as f64 * inv;
        j /= base;
        inv /= base as f64;
    }
    out
}

fn projected_gradient(bounds: &ParameterBox, theta: &[f64], grad: &[f64]) -> Vec<f64> {
    theta
        .iter()
        .zip(grad)
        .enumerate()
        .map(|(k, (&t, &g))| {
            if (t <= bounds.lower()[k] && g < 0.0) || (t >= bounds.upper()[k] && g > 0.0) {
                0.0
            } else {
                g
            }
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

struct Ascent {
    outcome: StartOutcome,
    evals: usize,
}

fn ascend<O: Objective + ?Sized>(
    obj: &O,
    bounds: &ParameterBox,
    opts: &OptimizerOptions,
    index: usize,
    start: Vec<f64>,
) -> Result<Ascent> {
    const ARMIJO: f64 = 1e-4;
    const MAX_HALVINGS: usize = 80;

    let mut x = start.clone();
    bounds.project(&mut x);
    let (mut f, mut g) = obj.value_and_gradient(&x)?;
    let mut evals = 1;
    let mut trace = Vec::new();
    if opts.record_trace {
        trace.push(f);
    }
    let width = norm(&bounds.halfwidth());
    let gnorm = norm(&g);
    let mut step = if gnorm > 0.0 { 0.1 * width / gnorm } else { 1.0 };
    let mut converged = false;
    let mut iterations = 0;

    while iterations < opts.max_iter {
        let pg = projected_gradient(bounds, &x, &g);
        if norm(&pg) <= opts.grad_tol * (1.0 + f.abs()) {
            converged = true;
            break;
        }
        iterations += 1;

        let mut accepted = None;
        let mut s = step;
        for _ in 0..MAX_HALVINGS {
            let mut y: Vec<f64> = x.iter().zip(&g).map(|(xi, gi)| xi + s * gi).collect();
            bounds.project(&mut y);
            let dx: Vec<f64> = y.iter().zip(&x).map(|(a, b)| a - b).collect();
            if norm(&dx) == 0.0 {
                break;
            }
            evals += 1;
            if let Ok((fy, gy)) = obj.value_and_gradient(&y) {
                if fy.is_finite() && fy >= f + ARMIJO * dot(&g, &dx) {
                    accepted = Some((y, fy, gy, dx, s));
                    break;
                }
            }
            s *= 0.5;
        }

        let Some((y, fy, gy, dx, s_used)) = accepted else {
            // No ascent possible above rounding level: stationary to machine
            // precision if the last trial step was already negligible.
            converged = s * norm(&g) <= 1e-12 * (1.0 + norm(&x));
            break;
        };
        let dg: Vec<f64> = gy.iter().zip(&g).map(|(a, b)| a - b).collect();
        let curvature = -dot(&dx, &dg);
        step = if curvature > 0.0 {
            dot(&dx, &dx) / curvature
        } else {
            2.0 * s_used
        };
        x = y;
        f = fy;
        g = gy;
        if opts.record_trace {
            trace.push(f);
        }
    }
    if !converged && iterations == opts.max_iter {
        let pg = projected_gradient(bounds, &x, &g);
        converged = norm(&pg) <= opts.grad_tol * (1.0 + f.abs());
    }

    Ok(Ascent {
        outcome: StartOutcome {
            index,
            start,
            theta: x,
            value: f,
            iterations,
            converged,
            trace,
        },
        evals,
    })
}

/// Maximiser of `obj` over the closed box.
pub fn maximize<O: Objective + ?Sized>(obj: &O, bounds: &ParameterBox, opts: &OptimizerOptions) -> Result<EstimationResult> {
    opts.validate()?;
    if obj.dim() != bounds.dim() {
        return Err(Error::invalid(format!(
            "objective has {} parameters but the box has {}",
            obj.dim(),
            bounds.dim()
        )));
    }
    let starts = start_points(bounds, opts.extra_starts);
    let runs: Vec<Result<Ascent>> = starts
        .into_par_iter()
        .enumerate()
        .map(|(i, s)| ascend(obj, bounds, opts, i, s))
        .collect();

    let mut n_evals = 0;
    let mut outcomes = Vec::with_capacity(runs.len());
    let mut first_err = None;
    for r in runs {
        match r {
            Ok(a) => {
                n_evals += a.evals;
                outcomes.push(a.outcome);
            }
            Err(e) => {
                n_evals += 1;
                first_err.get_or_insert(e);
            }
        }
    }
    if outcomes.is_empty() {
        return Err(first_err.unwrap_or_else(|| Error::invalid("no optimizer starts")));
    }

    let best_value = outcomes.iter().map(|o| o.value).fold(f64::NEG_INFINITY, f64::max);
    let center = bounds.center();
    let dist = |o: &StartOutcome| {
        o.theta
            .iter()
            .zip(&center)
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
    };
    let best = outcomes
        .iter()
        .filter(|o| best_value - o.value < opts.tie_tol)
        .min_by(|a, b| dist(a).total_cmp(&dist(b)).then(a.index.cmp(&b.index)))
        .expect("the maximum is always a candidate");

    Ok(EstimationResult {
        theta_hat: best.theta.clone(),
        loglik_at_hat: best.value,
        normalized_error: None,
        converged: best.converged,
        n_evals,
        hit_boundary: bounds.on_boundary(&best.theta, opts.boundary_tol),
        best_start: best.index,
        starts: outcomes,
    })
}

/// `θ̂_ε = argmax 𝕃_{H,ε}` over the closed box.
pub fn maximize_likelihood(
    ctx: &LikelihoodContext,
    bounds: &ParameterBox,
    opts: &OptimizerOptions,
) -> Result<EstimationResult> {
    maximize(ctx, bounds, opts)
}
