//! Limit objects of the small-noise theory: the constants `c1..c3`, the
//! Fisher matrix `Γ_H(θ0)` and the contrast `𝕐_H(θ)`.

use nalgebra::{DMatrix, SymmetricEigen};
use serde::Serialize;
use statrs::function::beta::beta;
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::fbm::HurstIndex;
use crate::fraccalc::{power_weighted_integral, SingularKernelWeights, SingularMode};
use crate::likelihood::{dh_const, LikelihoodContext};
use crate::model::{solve_ode_limit, DriftModel, ParameterBox, SdeConfig};
use crate::quad::tanh_sinh_with_gaps;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AsymptoticConstants {
    hurst: HurstIndex,
    c1: Option<f64>,
    c2: Option<f64>,
    c3: Option<f64>,
}

impl AsymptoticConstants {
    pub fn new(hurst: HurstIndex) -> Result<Self> {
        if hurst.is_brownian() {
            return Err(Error::invalid("constants are undefined at H = 1/2"));
        }
        let h = hurst.value();
        let dh = dh_const(hurst);
        if hurst.is_rough() {
            let c1 = (dh * gamma(0.5 - h)).powi(-2);
            return Ok(Self {
                hurst,
                c1: Some(c1),
                c2: None,
                c3: None,
            });
        }
        let b = h - 0.5;
        // ∫_0^1 (s^{-b} - 1)(1-s)^{-1-b} ds with 1 - s = u^2
        let bracket = 2.0
            * tanh_sinh_with_gaps(
                |u, _, gap| {
                    if u < 1e-4 {
                        // (1-u^2)^{-b} - 1 = b u^2 (1 + (b+1) u^2 / 2 + ...)
                        return b * u.powf(1.0 - 2.0 * b) * (1.0 + 0.5 * (b + 1.0) * u * u);
                    }
                    let lifted = if u < 0.5 {
                        (-b * (-u * u).ln_1p()).exp_m1()
                    } else {
                        (gap * (2.0 - gap)).powf(-b) - 1.0
                    };
                    lifted * u.powf(-1.0 - 2.0 * b)
                },
                0.0,
                1.0,
                1e-15,
            );
        let g = gamma(1.5 - h);
        Ok(Self {
            hurst,
            c1: None,
            c2: Some((1.0 - b * bracket) / (dh * g)),
            c3: Some(b / (dh * g)),
        })
    }

    pub fn hurst(&self) -> HurstIndex {
        self.hurst
    }

    fn side(v: Option<f64>, name: &str, side: &str) -> Result<f64> {
        v.ok_or_else(|| Error::invalid(format!("{name} is only defined for H {side} 1/2")))
    }

    pub fn c1(&self) -> Result<f64> {
        Self::side(self.c1, "c1", "<")
    }

    pub fn c2(&self) -> Result<f64> {
        Self::side(self.c2, "c2", ">")
    }

    pub fn c3(&self) -> Result<f64> {
        Self::side(self.c3, "c3", ">")
    }
}

pub fn constants(hurst: HurstIndex) -> Result<AsymptoticConstants> {
    AsymptoticConstants::new(hurst)
}

/// `Γ_H(θ0)` with its Cholesky factor, inverse and spectrum.
#[derive(Debug, Clone)]
pub struct FisherMatrix {
    gamma: DMatrix<f64>,
    chol: DMatrix<f64>,
    inv: DMatrix<f64>,
    eigenvalues: Vec<f64>,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

impl FisherMatrix {
    const PD_RTOL: f64 = 1e-10;

    pub fn new(gamma: DMatrix<f64>) -> Result<Self> {
        let d = gamma.nrows();
        if d == 0 || gamma.ncols() != d {
            return Err(Error::invalid("Fisher matrix must be square and non-empty"));
        }
        if gamma.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { what: "Fisher matrix", index: 0 });
        }
        let scale = gamma.amax();
        for i in 0..d {
            for j in 0..i {
                if (gamma[(i, j)] - gamma[(j, i)]).abs() > 1e-12 * scale {
                    return Err(Error::invalid("Fisher matrix is not symmetric"));
                }
            }
        }
        let mut eigenvalues: Vec<f64> = SymmetricEigen::new(gamma.clone()).eigenvalues.iter().copied().collect();
        eigenvalues.sort_by(f64::total_cmp);
        let not_pd = || {
            Error::NotPositiveDefinite(format!(
                "Γ_H(θ0) has eigenvalues {eigenvalues:?}; the parameters are not identifiable from the limit path"
            ))
        };
        if !(eigenvalues[0] > Self::PD_RTOL * scale) {
            return Err(not_pd());
        }
        let chol = gamma.clone().cholesky().ok_or_else(not_pd)?;
        let inv = chol.inverse();
        Ok(Self {
            gamma,
            chol: chol.unpack(),
            inv,
            eigenvalues,
        })
    }

    pub fn dim(&self) -> usize {
        self.gamma.nrows()
    }

    pub fn gamma(&self) -> &DMatrix<f64> {
        &self.gamma
    }

    pub fn cholesky(&self) -> &DMatrix<f64> {
        &self.chol
    }

    pub fn inverse(&self) -> &DMatrix<f64> {
        &self.inv
    }

    /// Eigenvalues in increasing order.
    pub fn eigenvalues(&self) -> &[f64] {
        &self.eigenvalues
    }

    pub fn to_report(&self) -> FisherReport {
        FisherReport {
            gamma: rows_of(&self.gamma),
            cholesky: rows_of(&self.chol),
            inverse: rows_of(&self.inv),
            eigenvalues: self.eigenvalues.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FisherReport {
    pub gamma: Vec<Vec<f64>>,
    pub cholesky: Vec<Vec<f64>>,
    pub inverse: Vec<Vec<f64>>,
    pub eigenvalues: Vec<f64>,
}

/// The values `ε Q[g](t_i)` written as `t^{γ/2} u_i` with `u` smooth up to
/// `t = 0`; returns `(γ, u)`.
fn scaled_q(cfg: &SdeConfig, g: &[f64]) -> Result<(f64, Vec<f64>)> {
    let hurst = cfg.hurst;
    let hv = hurst.value();
    let grid = cfg.grid;
    let n = grid.steps();
    let consts = AsymptoticConstants::new(hurst)?;
    let mut u = vec![0.0; n + 1];
    if hurst.is_rough() {
        let a = 0.5 - hv;
        let norm = consts.c1()?.sqrt();
        let w = SingularKernelWeights::new(n, a, a - 1.0, SingularMode::Integrable)?;
        let f = w.apply(g, grid.dt());
        u[0] = norm * beta(a + 1.0, a) * g[0];
        for i in 1..=n {
            u[i] = norm * grid.t(i).powf(-2.0 * a) * f[i];
        }
        Ok((2.0 * a, u))
    } else {
        let b = hv - 0.5;
        let (c2, c3) = (consts.c2()?, consts.c3()?);
        let w = SingularKernelWeights::new(n, -b, -b - 1.0, SingularMode::Difference)?;
        let diff = w.apply(g, grid.dt());
        u[0] = c2 * g[0];
        for i in 1..=n {
            u[i] = c2 * g[i] + c3 * grid.t(i).powf(2.0 * b) * diff[i];
        }
        Ok((-2.0 * b, u))
    }
}

/// `∫_0^T ε² Q[g_k] Q[g_l] dt` for every pair of nodal drift data.
fn q_gram(cfg: &SdeConfig, data: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    let d = data.len();
    let mut us = Vec::with_capacity(d);
    let mut gamma_exp = 0.0;
    for g in data {
        let (ge, u) = scaled_q(cfg, g)?;
        gamma_exp = ge;
        us.push(u);
    }
    let mut m = DMatrix::zeros(d, d);
    for k in 0..d {
        for l in 0..=k {
            let prod: Vec<f64> = us[k].iter().zip(&us[l]).map(|(a, b)| a * b).collect();
            let v = power_weighted_integral(&cfg.grid, gamma_exp, &prod)?;
            m[(k, l)] = v;
            m[(l, k)] = v;
        }
    }
    Ok(m)
}

/// The raw (unfactorised) matrix `Γ_H(θ0)`.
pub fn gamma_matrix_raw(model: &DriftModel, theta0: &[f64], cfg: &SdeConfig) -> Result<DMatrix<f64>> {
    model.check_theta(theta0)?;
    let x = solve_ode_limit(model, theta0, cfg)?;
    let d = model.dim();
    let mut data = vec![Vec::with_capacity(x.values().len()); d];
    let mut g = vec![0.0; d];
    for &xi in x.values() {
        model.grad_theta_b_into(xi, theta0, &mut g);
        for k in 0..d {
            data[k].push(g[k]);
        }
    }
    q_gram(cfg, &data)
}

pub fn gamma_matrix(model: &DriftModel, theta0: &[f64], cfg: &SdeConfig) -> Result<FisherMatrix> {
    FisherMatrix::new(gamma_matrix_raw(model, theta0, cfg)?)
}

/// `Γ_H` of the constant drift in closed form.
pub fn constant_drift_fisher(hurst: HurstIndex, horizon: f64) -> Result<f64> {
    let h = hurst.value();
    let c = AsymptoticConstants::new(hurst)?;
    let time = horizon.powf(2.0 - 2.0 * h) / (2.0 - 2.0 * h);
    if hurst.is_rough() {
        Ok(c.c1()? * beta(1.5 - h, 0.5 - h).powi(2) * time)
    } else {
        Ok(c.c2()?.powi(2) * time)
    }
}

/// `𝕐_H(θ) = ½ ∫_0^T ε² (Q_θ - Q_θ0)² dt` along the limit path.
pub fn y_limit(model: &DriftModel, theta: &[f64], theta0: &[f64], cfg: &SdeConfig) -> Result<f64> {
    model.check_theta(theta)?;
    let x = solve_ode_limit(model, theta0, cfg)?;
    let g: Vec<f64> = x.values().iter().map(|&xi| model.b(xi, theta) - model.b(xi, theta0)).collect();
    Ok(0.5 * q_gram(cfg, &[g])?[(0, 0)])
}

/// `ε² (𝕃(θ) - 𝕃(θ0))`.
pub fn y_empirical(ctx: &LikelihoodContext, theta: &[f64], theta0: &[f64]) -> Result<f64> {
    let eps = ctx.config().epsilon;
    Ok(eps * eps * (ctx.log_likelihood(theta)? - ctx.log_likelihood(theta0)?))
}

/// Fitted lower envelope `𝕐_H(θ) ≥ ξ |θ - θ0|^ρ` over a probe set.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct SeparationDiagnostic {
    pub xi: f64,
    pub rho: f64,
    pub holds: bool,
}

/// Probes `𝕐_H` along every axis and the main diagonal of the box.
pub fn separation_diagnostic(
    model: &DriftModel,
    theta0: &[f64],
    bounds: &ParameterBox,
    cfg: &SdeConfig,
    per_direction: usize,
) -> Result<SeparationDiagnostic> {
    let d = model.dim();
    let mut directions: Vec<Vec<f64>> = (0..d)
        .map(|k| (0..d).map(|j| if j == k { 1.0 } else { 0.0 }).collect())
        .collect();
    if d > 1 {
        directions.push(vec![1.0 / (d as f64).sqrt(); d]);
    }
    let mut pts = Vec::new();
    for dir in &directions {
        for sign in [-1.0, 1.0] {
            for m in 1..=per_direction {
                let frac = m as f64 / per_direction as f64;
                let mut theta: Vec<f64> = theta0.to_vec();
                let mut ok = true;
                for k in 0..d {
                    let reach = if sign * dir[k] > 0.0 {
                        bounds.upper()[k] - theta0[k]
                    } else {
                        theta0[k] - bounds.lower()[k]
                    };
                    let step = sign * dir[k] * frac * reach;
                    theta[k] += 0.999 * step;
                    ok &= dir[k] == 0.0 || step != 0.0;
                }
                let dist = theta.iter().zip(theta0).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
                if ok && dist > 0.0 {
                    pts.push((dist, y_limit(model, &theta, theta0, cfg)?));
                }
            }
        }
    }
    // least squares of log 𝕐 on log |θ - θ0|, then the tightest ξ
    let logs: Vec<(f64, f64)> = pts
        .iter()
        .filter(|(_, y)| *y > 0.0)
        .map(|(r, y)| (r.ln(), y.ln()))
        .collect();
    let holds_all = logs.len() == pts.len();
    let m = logs.len() as f64;
    let (sx, sy) = logs.iter().fold((0.0, 0.0), |(a, b), (x, y)| (a + x, b + y));
    let (mx, my) = (sx / m, sy / m);
    let (sxy, sxx) = logs
        .iter()
        .fold((0.0, 0.0), |(a, b), (x, y)| (a + (x - mx) * (y - my), b + (x - mx).powi(2)));
    let rho = if sxx > 0.0 { (sxy / sxx).clamp(1.0 + 1e-9, 2.0) } else { 2.0 };
    let xi = pts.iter().map(|(r, y)| y / r.powf(rho)).fold(f64::INFINITY, f64::min);
    Ok(SeparationDiagnostic {
        xi,
        rho,
        holds: holds_all && xi > 0.0 && !logs.is_empty(),
    })
}
