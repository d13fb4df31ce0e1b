//! Built-in drift families, the Euler scheme for the small-noise SDE and the
//! fourth-order solver for its noise-free limit.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fbm::{HurstIndex, RngSeed};
use crate::grid::{SampledPath, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DriftFamily {
    /// `b(x, θ) = θ1`
    Constant,
    /// `b(x, θ) = -θ1 x`
    Linear,
    /// `b(x, θ) = θ1 + θ2 sin x`
    Sine,
}

impl FromStr for DriftFamily {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Self::Constant),
            "linear" => Ok(Self::Linear),
            "sine" => Ok(Self::Sine),
            other => Err(Error::invalid(format!(
                "unknown model '{other}' (expected constant, linear or sine)"
            ))),
        }
    }
}

impl fmt::Display for DriftFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Constant => "constant",
            Self::Linear => "linear",
            Self::Sine => "sine",
        })
    }
}

/// Constants `(c, N)` of the growth conditions on `b` and its derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct GrowthConstants {
    pub c: f64,
    pub n: u32,
}

/// A parametric scalar drift `b(x, θ)` with exact first derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DriftModel {
    family: DriftFamily,
}

pub fn builtin_model(name: &str) -> Result<DriftModel> {
    Ok(DriftModel::new(name.parse()?))
}

impl DriftModel {
    pub fn new(family: DriftFamily) -> Self {
        Self { family }
    }

    pub fn family(&self) -> DriftFamily {
        self.family
    }

    pub fn dim(&self) -> usize {
        match self.family {
            DriftFamily::Constant | DriftFamily::Linear => 1,
            DriftFamily::Sine => 2,
        }
    }

    #[inline]
    pub fn b(&self, x: f64, theta: &[f64]) -> f64 {
        match self.family {
            DriftFamily::Constant => theta[0],
            DriftFamily::Linear => -theta[0] * x,
            DriftFamily::Sine => theta[0] + theta[1] * x.sin(),
        }
    }

    #[inline]
    pub fn db_dx(&self, x: f64, theta: &[f64]) -> f64 {
        match self.family {
            DriftFamily::Constant => 0.0,
            DriftFamily::Linear => -theta[0],
            DriftFamily::Sine => theta[1] * x.cos(),
        }
    }

    /// Writes `∇_θ b(x, θ)` into `out` (length `dim`).
    #[inline]
    pub fn grad_theta_b_into(&self, x: f64, _theta: &[f64], out: &mut [f64]) {
        match self.family {
            DriftFamily::Constant => out[0] = 1.0,
            DriftFamily::Linear => out[0] = -x,
            DriftFamily::Sine => {
                out[0] = 1.0;
                out[1] = x.sin();
            }
        }
    }

    pub fn grad_theta_b(&self, x: f64, theta: &[f64]) -> Vec<f64> {
        let mut out = vec![0.0; self.dim()];
        self.grad_theta_b_into(x, theta, &mut out);
        out
    }

    /// True when `b(x, θ) = Σ_k θ_k ∂_k b(x)`, so that `Q` is linear in `θ`.
    pub fn is_linear_in_theta(&self) -> bool {
        true
    }

    /// Lipschitz constant in `x`, uniform over the closed box.
    pub fn lipschitz_l(&self, bounds: &ParameterBox) -> f64 {
        match self.family {
            DriftFamily::Constant => 0.0,
            DriftFamily::Linear => bounds.sup_abs(0),
            DriftFamily::Sine => bounds.sup_abs(1),
        }
    }

    /// Growth constants valid over the closed box.
    pub fn growth_constants(&self, bounds: &ParameterBox) -> GrowthConstants {
        let c = match self.family {
            DriftFamily::Constant | DriftFamily::Linear => bounds.sup_abs(0),
            DriftFamily::Sine => bounds.sup_abs(0) + bounds.sup_abs(1),
        };
        GrowthConstants { c: c.max(1.0), n: 1 }
    }

    pub fn check_theta(&self, theta: &[f64]) -> Result<()> {
        if theta.len() != self.dim() {
            return Err(Error::invalid(format!(
                "model '{}' has {} parameters, got {}",
                self.family,
                self.dim(),
                theta.len()
            )));
        }
        if theta.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("parameter vector has non-finite entries"));
        }
        Ok(())
    }
}

/// Axis-aligned open box `Θ = Π (lower_k, upper_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParameterBox {
    lower: Vec<f64>,
    upper: Vec<f64>,
}

impl ParameterBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>) -> Result<Self> {
        if lower.is_empty() || lower.len() != upper.len() {
            return Err(Error::invalid(format!(
                "box bounds must be non-empty and of equal length ({} vs {})",
                lower.len(),
                upper.len()
            )));
        }
        for (k, (l, u)) in lower.iter().zip(&upper).enumerate() {
            if !(l.is_finite() && u.is_finite() && l < u) {
                return Err(Error::invalid(format!("box axis {k} needs finite lower < upper, got ({l}, {u})")));
            }
        }
        Ok(Self { lower, upper })
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn lower(&self) -> &[f64] {
        &self.lower
    }

    pub fn upper(&self) -> &[f64] {
        &self.upper
    }

    pub fn center(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (l + u)).collect()
    }

    pub fn halfwidth(&self) -> Vec<f64> {
        self.lower.iter().zip(&self.upper).map(|(l, u)| 0.5 * (u - l)).collect()
    }

    pub fn sup_abs(&self, k: usize) -> f64 {
        self.lower[k].abs().max(self.upper[k].abs())
    }

    pub fn contains_closed(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta.iter().zip(self.lower.iter().zip(&self.upper)).all(|(t, (l, u))| *l <= *t && *t <= *u)
    }

    pub fn is_interior(&self, theta: &[f64]) -> bool {
        theta.len() == self.dim()
            && theta.iter().zip(self.lower.iter().zip(&self.upper)).all(|(t, (l, u))| *l < *t && *t < *u)
    }

    pub fn project(&self, theta: &mut [f64]) {
        for (k, t) in theta.iter_mut().enumerate() {
            *t = t.clamp(self.lower[k], self.upper[k]);
        }
    }

    /// Axes on which `theta` sits on a face, within `tol` times the width.
    pub fn on_boundary(&self, theta: &[f64], tol: f64) -> bool {
        theta.iter().enumerate().any(|(k, t)| {
            let w = self.upper[k] - self.lower[k];
            (t - self.lower[k]).abs() <= tol * w || (self.upper[k] - t).abs() <= tol * w
        })
    }

    pub fn require_interior(&self, theta: &[f64]) -> Result<()> {
        if !self.is_interior(theta) {
            return Err(Error::invalid(format!(
                "θ0 = {theta:?} must lie strictly inside the box {:?}..{:?}",
                self.lower, self.upper
            )));
        }
        Ok(())
    }
}

/// Initial value, noise level, Hurst index and grid of one SDE.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct SdeConfig {
    pub x0: f64,
    pub epsilon: f64,
    pub hurst: HurstIndex,
    pub grid: TimeGrid,
}

impl SdeConfig {
    pub fn new(x0: f64, epsilon: f64, hurst: HurstIndex, grid: TimeGrid) -> Result<Self> {
        if !x0.is_finite() {
            return Err(Error::invalid("initial value must be finite"));
        }
        if !(epsilon > 0.0 && epsilon <= 1.0) {
            return Err(Error::invalid(format!("epsilon must lie in (0, 1], got {epsilon}")));
        }
        Ok(Self {
            x0,
            epsilon,
            hurst,
            grid,
        })
    }

    pub fn with_epsilon(&self, epsilon: f64) -> Result<Self> {
        Self::new(self.x0, epsilon, self.hurst, self.grid)
    }

    /// Same configuration with the noise switched off; only meaningful for
    /// [`simulate_sde`].
    pub fn noise_free(&self) -> Self {
        Self { epsilon: 0.0, ..*self }
    }
}

/// `dx/dt = b(x, θ)`, `x(0) = x0`, by classical RK4 on the grid.
pub fn solve_ode_limit(model: &DriftModel, theta: &[f64], cfg: &SdeConfig) -> Result<SampledPath> {
    model.check_theta(theta)?;
    let grid = cfg.grid;
    let h = grid.dt();
    let mut values = Vec::with_capacity(grid.len());
    let mut x = cfg.x0;
    values.push(x);
    for i in 0..grid.steps() {
        let k1 = model.b(x, theta);
        let k2 = model.b(x + 0.5 * h * k1, theta);
        let k3 = model.b(x + 0.5 * h * k2, theta);
        let k4 = model.b(x + h * k3, theta);
        x += h / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4);
        if !x.is_finite() {
            return Err(Error::NonFinite {
                what: "limit ODE state",
                index: i + 1,
            });
        }
        values.push(x);
    }
    SampledPath::new(grid, values)
}

/// Euler scheme `X_{i+1} = X_i + b(X_i, θ) Δt + ε (B_{i+1} - B_i)`.
pub fn simulate_sde(model: &DriftModel, theta: &[f64], cfg: &SdeConfig, noise: &SampledPath) -> Result<SampledPath> {
    model.check_theta(theta)?;
    if *noise.grid() != cfg.grid {
        return Err(Error::GridMismatch("noise path is not sampled on the SDE grid".into()));
    }
    let h = cfg.grid.dt();
    let b = noise.values();
    let mut values = Vec::with_capacity(b.len());
    let mut x = cfg.x0;
    values.push(x);
    for i in 0..cfg.grid.steps() {
        x += model.b(x, theta) * h + cfg.epsilon * (b[i + 1] - b[i]);
        if !x.is_finite() {
            return Err(Error::NonFinite {
                what: "SDE state",
                index: i + 1,
            });
        }
        values.push(x);
    }
    SampledPath::new(cfg.grid, values)
}

/// Worst violations found by [`check_assumptions`]; all should be `≤ 0`
/// except the gradient error, which should be tiny.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct AssumptionProbe {
    pub growth_excess: f64,
    pub lipschitz_excess: f64,
    pub gradient_rel_err: f64,
}

/// Randomised spot checks of the growth, Lipschitz and gradient contracts.
pub fn check_assumptions(model: &DriftModel, bounds: &ParameterBox, seed: RngSeed, probes: usize) -> AssumptionProbe {
    let mut rng = seed.rng();
    let growth = model.growth_constants(bounds);
    let l = model.lipschitz_l(bounds);
    let d = model.dim();
    let mut out = AssumptionProbe {
        growth_excess: f64::NEG_INFINITY,
        lipschitz_excess: f64::NEG_INFINITY,
        gradient_rel_err: 0.0,
    };
    let mut theta = vec![0.0; d];
    for _ in 0..probes {
        for k in 0..d {
            theta[k] = rng.random_range(bounds.lower()[k]..=bounds.upper()[k]);
        }
        let x: f64 = rng.random_range(-20.0..20.0);
        let y: f64 = rng.random_range(-20.0..20.0);
        let bx = model.b(x, &theta);
        out.growth_excess = out.growth_excess.max(bx.abs() - growth.c * (1.0 + x.abs()));
        out.lipschitz_excess = out
            .lipschitz_excess
            .max((bx - model.b(y, &theta)).abs() - l * (x - y).abs() * (1.0 + 1e-12));
        let grad = model.grad_theta_b(x, &theta);
        for k in 0..d {
            let step = 1e-5 * (1.0 + theta[k].abs());
            let mut tp = theta.clone();
            let mut tm = theta.clone();
            tp[k] += step;
            tm[k] -= step;
            let fd = (model.b(x, &tp) - model.b(x, &tm)) / (2.0 * step);
            let err = (fd - grad[k]).abs() / grad[k].abs().max(1e-3);
            out.gradient_rel_err = out.gradient_rel_err.max(err);
        }
    }
    out
}

/// Right-hand side `ε e^{LT} max|B| + C_disc/n` of the pathwise deviation bound.
pub fn gronwall_deviation_bound(lipschitz: f64, cfg: &SdeConfig, noise_max: f64, c_disc: f64) -> f64 {
    cfg.epsilon * (lipschitz * cfg.grid.horizon()).exp() * noise_max + c_disc / cfg.grid.steps() as f64
}
