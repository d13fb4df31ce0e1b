//! The Volterra transform `Z` of an observed path, the drift functional `Q`
//! and the log-likelihood `𝕃(θ) = ∫ Q dZ - ½ ∫ Q² dt` with its gradient.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use statrs::function::beta::beta;
use statrs::function::gamma::gamma;

use crate::asymptotics::AsymptoticConstants;
use crate::error::{Error, Result};
use crate::fbm::HurstIndex;
use crate::fraccalc::{rl_integral_left, weyl_left, FracOrder, SingularKernelWeights, SingularMode};
use crate::grid::{SampledPath, TimeGrid};
use crate::model::{DriftModel, SdeConfig};

/// `d_H = sqrt(2H Γ(3/2-H) Γ(H+1/2) / Γ(2-2H))`.
pub fn dh_const(hurst: HurstIndex) -> f64 {
    let h = hurst.value();
    (2.0 * h * gamma(1.5 - h) * gamma(h + 0.5) / gamma(2.0 - 2.0 * h)).sqrt()
}

fn require_not_brownian(hurst: HurstIndex) -> Result<()> {
    if hurst.is_brownian() {
        return Err(Error::invalid("H = 1/2 is excluded from the likelihood"));
    }
    Ok(())
}

/// The kernel `k_H^{-1}(t, s)` of the Volterra correspondence, in closed
/// form through series in `z = s/t`.
#[derive(Debug, Clone, Copy)]
pub struct VolterraKernel {
    hurst: HurstIndex,
    /// `|H - 1/2|`
    a: f64,
    norm: f64,
    /// series value at `z = 1/2`
    half: f64,
}

const SERIES_TOL: f64 = 1e-17;

impl VolterraKernel {
    pub fn new(hurst: HurstIndex) -> Result<Self> {
        require_not_brownian(hurst)?;
        let dh = dh_const(hurst);
        let a = (hurst.value() - 0.5).abs();
        let (norm, half) = if hurst.is_rough() {
            (1.0 / (dh * gamma(a)), Self::rough_upper(a, 0.5))
        } else {
            (1.0 / (dh * gamma(1.0 - a)), Self::smooth_upper(a, 0.5))
        };
        Ok(Self {
            hurst,
            a,
            norm,
            half,
        })
    }

    /// `J(z) = ∫_z^1 (1-u)^{a-1} u^{-1} du` for `z ≥ 1/2`, given `w = 1 - z`.
    fn rough_upper(a: f64, w: f64) -> f64 {
        let mut pw = 1.0;
        let mut sum = 0.0;
        for k in 0..400 {
            let term = pw / (a + k as f64);
            sum += term;
            if term < SERIES_TOL * sum {
                break;
            }
            pw *= w;
        }
        w.powf(a) * sum
    }

    fn rough_j(&self, z: f64, w: f64) -> f64 {
        if z >= 0.5 {
            return Self::rough_upper(self.a, w);
        }
        // (1-u)^{a-1} = Σ c_k u^k with c_k = (1-a)_k / k!
        let mut c = 1.0 - self.a;
        let (mut hk, mut zk) = (0.5, z);
        let mut sum = 0.0;
        for k in 1..400 {
            let term = c * (hk - zk) / k as f64;
            sum += term;
            if term.abs() < SERIES_TOL * sum.abs() {
                break;
            }
            c *= (1.0 - self.a + k as f64) / (k as f64 + 1.0);
            hk *= 0.5;
            zk *= z;
        }
        self.half + (0.5 / z).ln() + sum
    }

    /// `F(z) = ∫_z^1 (1-u)^{-b} u^{-2} du` for `z ≥ 1/2`, given `w = 1 - z`.
    fn smooth_upper(b: f64, w: f64) -> f64 {
        let mut pw = 1.0;
        let mut sum = 0.0;
        for k in 0..400 {
            let kf = k as f64;
            let term = (kf + 1.0) * pw / (kf + 1.0 - b);
            sum += term;
            if term < SERIES_TOL * sum {
                break;
            }
            pw *= w;
        }
        w.powf(1.0 - b) * sum
    }

    /// `G(z) = (1-z)^{-b}/z - F(z)`, free of cancellation for small `z`.
    fn smooth_g(&self, z: f64, w: f64) -> f64 {
        let b = self.a;
        if z >= 0.5 {
            return w.powf(-b) / z - Self::smooth_upper(b, w);
        }
        // c_k = (b)_k / k!, starting at k = 2
        let mut c = b * (b + 1.0) / 2.0;
        let (mut hk, mut zk) = (0.5, z);
        let mut sum = 0.0;
        for k in 2..400 {
            let km1 = (k - 1) as f64;
            let term = c * (zk - (hk - zk) / km1);
            sum += term;
            if term.abs() < SERIES_TOL * sum.abs().max(1e-300) && k > 3 {
                break;
            }
            c *= (b + k as f64) / (k as f64 + 1.0);
            hk *= 0.5;
            zk *= z;
        }
        b + 2.0 - self.half - b * (0.5 / z).ln() + sum
    }

    /// `k_H^{-1}(t, s)` for `0 < s < t`.
    pub fn eval(&self, t: f64, s: f64) -> f64 {
        self.eval_with_gap(t, s, t - s)
    }

    /// Same as [`Self::eval`] with `t - s` supplied exactly by the caller.
    pub fn eval_with_gap(&self, t: f64, s: f64, gap: f64) -> f64 {
        let (z, w) = (s / t, gap / t);
        if self.hurst.is_rough() {
            self.norm * s.powf(self.a) * self.rough_j(z, w)
        } else {
            self.norm * s.powf(-self.a) * self.smooth_g(z, w)
        }
    }
}

/// Cell averages `w_ij` of `k_H^{-1}(t_i, ·)` over `[t_j, t_{j+1}]` for unit
/// spacing, packed by rows `i = 1..=n`, `j < i`.
#[derive(Debug)]
pub struct VolterraWeights {
    steps: usize,
    degree: f64,
    rows: Vec<f64>,
}

type VolterraKey = (usize, u64);

impl VolterraWeights {
    const EDGE_SUBCELLS: usize = 4;

    pub fn new(steps: usize, hurst: HurstIndex) -> Result<Arc<Self>> {
        static CACHE: OnceLock<Mutex<HashMap<VolterraKey, Arc<VolterraWeights>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        let key = (steps, hurst.value().to_bits());
        if let Some(w) = cache.lock().expect("weight cache poisoned").get(&key) {
            return Ok(Arc::clone(w));
        }
        let w = Arc::new(Self::build(steps, hurst)?);
        Ok(cache.lock().expect("weight cache poisoned").entry(key).or_insert(w).clone())
    }

    pub fn build(steps: usize, hurst: HurstIndex) -> Result<Self> {
        let kernel = VolterraKernel::new(hurst)?;
        let mut rows = Vec::with_capacity(steps * (steps + 1) / 2);
        let sub = Self::EDGE_SUBCELLS as f64;
        for i in 1..=steps {
            let t = i as f64;
            for j in 0..i {
                let w = if j == 0 || j == i - 1 {
                    (0..Self::EDGE_SUBCELLS)
                        .map(|m| kernel.eval(t, j as f64 + (m as f64 + 0.5) / sub))
                        .sum::<f64>()
                        / sub
                } else {
                    kernel.eval(t, j as f64 + 0.5)
                };
                rows.push(w);
            }
        }
        Ok(Self {
            steps,
            degree: 0.5 - hurst.value(),
            rows,
        })
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Unit-spacing weights `w_{i,0..i}`.
    pub fn row(&self, i: usize) -> &[f64] {
        let off = (i - 1) * i / 2;
        &self.rows[off..off + i]
    }

    /// `Σ_{j<i} w_ij dx_j` for every `i`, on a grid with spacing `h`.
    pub fn transform(&self, increments: &[f64], h: f64) -> Vec<f64> {
        assert_eq!(increments.len(), self.steps);
        let scale = h.powf(self.degree);
        let mut out = vec![0.0; self.steps + 1];
        for i in 1..=self.steps {
            out[i] = scale * self.row(i).iter().zip(increments).map(|(w, d)| w * d).sum::<f64>();
        }
        out
    }
}

/// `Z_{t_i} = ε^{-1} Σ_{j<i} w_ij (X_{t_{j+1}} - X_{t_j})`.
pub fn compute_z(observed: &SampledPath, cfg: &SdeConfig) -> Result<SampledPath> {
    require_not_brownian(cfg.hurst)?;
    if *observed.grid() != cfg.grid {
        return Err(Error::GridMismatch("observed path is not sampled on the configured grid".into()));
    }
    let weights = VolterraWeights::new(cfg.grid.steps(), cfg.hurst)?;
    let dx: Vec<f64> = observed.values().windows(2).map(|w| w[1] - w[0]).collect();
    let mut z = weights.transform(&dx, cfg.grid.dt());
    for v in &mut z {
        *v /= cfg.epsilon;
    }
    SampledPath::new(cfg.grid, z)
}

/// The linear map `b ↦ Q` on a fixed grid, for one `(H, ε)`.
#[derive(Debug, Clone)]
pub struct QOperator {
    hurst: HurstIndex,
    grid: TimeGrid,
    weights: Arc<SingularKernelWeights>,
    /// multiplies `b(t_i)` (zero for `H < 1/2`)
    local: Vec<f64>,
    /// multiplies the singular integral at `t_i`
    nonlocal: Vec<f64>,
}

impl QOperator {
    pub fn new(grid: TimeGrid, hurst: HurstIndex, epsilon: f64) -> Result<Self> {
        require_not_brownian(hurst)?;
        let h = hurst.value();
        let n = grid.steps();
        let mut local = vec![0.0; n + 1];
        let mut nonlocal = vec![0.0; n + 1];
        let weights = if hurst.is_rough() {
            let a = 0.5 - h;
            let pre = 1.0 / (epsilon * dh_const(hurst) * gamma(a));
            for i in 1..=n {
                nonlocal[i] = pre * grid.t(i).powf(-a);
            }
            SingularKernelWeights::new(n, a, a - 1.0, SingularMode::Integrable)?
        } else {
            let b = h - 0.5;
            let c = AsymptoticConstants::new(hurst)?;
            let (c2, c3) = (c.c2()?, c.c3()?);
            for i in 1..=n {
                let t = grid.t(i);
                local[i] = c2 * t.powf(-b) / epsilon;
                nonlocal[i] = c3 * t.powf(b) / epsilon;
            }
            SingularKernelWeights::new(n, -b, -b - 1.0, SingularMode::Difference)?
        };
        Ok(Self {
            hurst,
            grid,
            weights,
            local,
            nonlocal,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn hurst(&self) -> HurstIndex {
        self.hurst
    }

    /// `Q` for drift values `b(X_{t_i}, θ)`; entry 0 is set to 0.
    pub fn apply(&self, drift: &[f64]) -> Vec<f64> {
        let mut out = self.weights.apply(drift, self.grid.dt());
        out[0] = 0.0;
        for i in 1..out.len() {
            out[i] = self.local[i] * drift[i] + self.nonlocal[i] * out[i];
        }
        out
    }
}

/// Observed data plus everything needed to evaluate `𝕃` repeatedly.
#[derive(Debug, Clone)]
pub struct LikelihoodContext {
    observed: SampledPath,
    cfg: SdeConfig,
    model: DriftModel,
    z: SampledPath,
    dz: Vec<f64>,
    q_op: QOperator,
    /// `Q[∂_k b]` for each parameter, when `b` is linear in `θ`
    basis: Option<Vec<Vec<f64>>>,
}

impl LikelihoodContext {
    pub fn new(observed: SampledPath, cfg: SdeConfig, model: DriftModel) -> Result<Self> {
        let mut ctx = Self::without_basis(observed, cfg, model)?;
        if model.is_linear_in_theta() {
            let theta = vec![0.0; model.dim()];
            let grads = ctx.drift_gradients(&theta);
            ctx.basis = Some(grads.iter().map(|g| ctx.q_op.apply(g)).collect());
        }
        Ok(ctx)
    }

    /// Context that always evaluates `Q` from the drift values directly.
    pub fn without_basis(observed: SampledPath, cfg: SdeConfig, model: DriftModel) -> Result<Self> {
        let z = compute_z(&observed, &cfg)?;
        let dz = z.values().windows(2).map(|w| w[1] - w[0]).collect();
        let q_op = QOperator::new(cfg.grid, cfg.hurst, cfg.epsilon)?;
        Ok(Self {
            observed,
            cfg,
            model,
            z,
            dz,
            q_op,
            basis: None,
        })
    }

    pub fn observed(&self) -> &SampledPath {
        &self.observed
    }

    pub fn config(&self) -> &SdeConfig {
        &self.cfg
    }

    pub fn model(&self) -> &DriftModel {
        &self.model
    }

    pub fn z_path(&self) -> &SampledPath {
        &self.z
    }

    pub fn q_operator(&self) -> &QOperator {
        &self.q_op
    }

    fn drift_values(&self, theta: &[f64]) -> Vec<f64> {
        self.observed.values().iter().map(|&x| self.model.b(x, theta)).collect()
    }

    fn drift_gradients(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        let d = self.model.dim();
        let mut out = vec![Vec::with_capacity(self.observed.values().len()); d];
        let mut g = vec![0.0; d];
        for &x in self.observed.values() {
            self.model.grad_theta_b_into(x, theta, &mut g);
            for k in 0..d {
                out[k].push(g[k]);
            }
        }
        out
    }

    fn q_values(&self, theta: &[f64]) -> Vec<f64> {
        match &self.basis {
            Some(basis) => {
                let mut q = vec![0.0; self.dz.len() + 1];
                for (coef, col) in theta.iter().zip(basis) {
                    for (qi, ci) in q.iter_mut().zip(col) {
                        *qi += coef * ci;
                    }
                }
                q
            }
            None => self.q_op.apply(&self.drift_values(theta)),
        }
    }

    fn q_gradients(&self, theta: &[f64]) -> Vec<Vec<f64>> {
        match &self.basis {
            Some(basis) => basis.clone(),
            None => self.drift_gradients(theta).iter().map(|g| self.q_op.apply(g)).collect(),
        }
    }

    fn check(&self, theta: &[f64]) -> Result<()> {
        self.model.check_theta(theta)
    }

    fn finite(q: &[f64]) -> Result<()> {
        match q.iter().position(|v| !v.is_finite()) {
            Some(index) => Err(Error::NonFinite { what: "Q", index }),
            None => Ok(()),
        }
    }

    /// Discrete `𝕃`: Itô sum for `∫ Q dZ`, trapezoid-paired sum for `∫ Q² dt`,
    /// both over nodes `1..n-1`.
    fn loglik_from_q(&self, q: &[f64]) -> f64 {
        let dt = self.cfg.grid.dt();
        let n = self.dz.len();
        let mut stoch = 0.0;
        let mut quad = 0.0;
        for i in 1..n {
            stoch += q[i] * self.dz[i];
            quad += q[i] * (q[i] + q[i + 1]);
        }
        stoch - 0.25 * quad * dt
    }

    pub fn compute_q(&self, theta: &[f64]) -> Result<SampledPath> {
        self.check(theta)?;
        let q = self.q_values(theta);
        Self::finite(&q)?;
        SampledPath::new(self.cfg.grid, q)
    }

    pub fn log_likelihood(&self, theta: &[f64]) -> Result<f64> {
        self.check(theta)?;
        let q = self.q_values(theta);
        Self::finite(&q)?;
        Ok(self.loglik_from_q(&q))
    }

    pub fn value_and_gradient(&self, theta: &[f64]) -> Result<(f64, Vec<f64>)> {
        self.check(theta)?;
        let q = self.q_values(theta);
        Self::finite(&q)?;
        let dt = self.cfg.grid.dt();
        let n = self.dz.len();
        let grad = self
            .q_gradients(theta)
            .iter()
            .map(|dq| {
                let mut stoch = 0.0;
                let mut quad = 0.0;
                for i in 1..n {
                    stoch += dq[i] * self.dz[i];
                    quad += dq[i] * (q[i] + q[i + 1]) + q[i] * (dq[i] + dq[i + 1]);
                }
                stoch - 0.25 * quad * dt
            })
            .collect();
        Ok((self.loglik_from_q(&q), grad))
    }

    pub fn grad_log_likelihood(&self, theta: &[f64]) -> Result<Vec<f64>> {
        Ok(self.value_and_gradient(theta)?.1)
    }

    /// `Q` through the fractional operators themselves rather than the
    /// expanded kernel sums; used to cross-check [`Self::compute_q`].
    pub fn definitional_q(&self, theta: &[f64]) -> Result<SampledPath> {
        self.check(theta)?;
        let grid = self.cfg.grid;
        let hv = self.cfg.hurst.value();
        let eps = self.cfg.epsilon;
        let dh = dh_const(self.cfg.hurst);
        let b = self.drift_values(theta);
        let mut out = vec![0.0; grid.len()];
        if self.cfg.hurst.is_rough() {
            let a = 0.5 - hv;
            let f = SampledPath::new(grid, (0..grid.len()).map(|i| grid.t(i).powf(a) * b[i]).collect())?;
            let g = rl_integral_left(&f, FracOrder::new(a)?)?;
            for i in 1..grid.len() {
                out[i] = grid.t(i).powf(-a) * g.values()[i] / (eps * dh);
            }
        } else {
            // D^β[s^{-β} b] = D^β[s^{-β}(b - b_0)] + b_0 Γ(1-β)/Γ(1-2β) t^{-2β}
            let beta_ = hv - 0.5;
            let b0 = b[0];
            let f = SampledPath::new(
                grid,
                (0..grid.len())
                    .map(|i| if i == 0 { 0.0 } else { grid.t(i).powf(-beta_) * (b[i] - b0) })
                    .collect(),
            )?;
            let g = weyl_left(&f, FracOrder::new(beta_)?)?;
            let power = gamma(1.0 - beta_) / gamma(1.0 - 2.0 * beta_);
            for i in 1..grid.len() {
                let t = grid.t(i);
                out[i] = t.powf(beta_) * (g.values()[i] + b0 * power * t.powf(-2.0 * beta_)) / (eps * dh);
            }
        }
        SampledPath::new(grid, out)
    }
}

/// `Q(t)/(θ1 t^{1/2-H})` for the constant drift, times `ε`: the constant
/// `B(3/2-H, 1/2-H)/(d_H Γ(1/2-H))` for `H < 1/2`, `c2` for `H > 1/2`.
pub fn constant_drift_q_factor(hurst: HurstIndex) -> Result<f64> {
    require_not_brownian(hurst)?;
    let h = hurst.value();
    if hurst.is_rough() {
        Ok(beta(1.5 - h, 0.5 - h) / (dh_const(hurst) * gamma(0.5 - h)))
    } else {
        AsymptoticConstants::new(hurst)?.c2()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fbm::{simulate_fbm_circulant, CirculantFbm, RngSeed};
    use crate::model::{builtin_model, simulate_sde};
    use crate::quad::tanh_sinh;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn hurst(h: f64) -> HurstIndex {
        HurstIndex::new(h).unwrap()
    }

    fn cfg(h: f64, eps: f64, n: usize) -> SdeConfig {
        SdeConfig::new(0.5, eps, hurst(h), TimeGrid::new(1.0, n).unwrap()).unwrap()
    }

    #[test]
    fn dh_values() {
        assert_relative_eq!(dh_const(hurst(0.5)), 1.0, epsilon = 1e-14);
        assert_relative_eq!(dh_const(hurst(0.7)), 1.002465016644257654, max_relative = 1e-13);
        assert_relative_eq!(dh_const(hurst(0.3)), 0.850217091282343309, max_relative = 1e-13);
        assert_relative_eq!(dh_const(hurst(0.2)), 0.722163822703012412, max_relative = 1e-13);
        assert_relative_eq!(dh_const(hurst(0.8)), 0.916685459693356123, max_relative = 1e-13);
    }

    /// `k_H^{-1}` straight from its fractional-operator definition.
    fn kernel_by_quadrature(h: f64, t: f64, s: f64) -> f64 {
        let dh = dh_const(hurst(h));
        if h < 0.5 {
            let a = 0.5 - h;
            let inner = tanh_sinh(|u| u.powf(a - 1.0) * (s + u).powf(-a), 0.0, t - s, 1e-15);
            s.powf(a) * inner / (gamma(a) * dh)
        } else {
            let b = h - 0.5;
            // (s+u)^b - s^b without cancellation
            let diff = |u: f64| s.powf(b) * (b * (u / s).ln_1p()).exp_m1();
            let inner = tanh_sinh(|u| -(diff(u) / u) * u.powf(-b), 0.0, t - s, 1e-15);
            s.powf(-b) * (s.powf(b) * (t - s).powf(-b) + b * inner) / (gamma(1.0 - b) * dh)
        }
    }

    #[test]
    fn kernel_series_match_quadrature() {
        for h in [0.2, 0.3, 0.45, 0.55, 0.7, 0.8] {
            let k = VolterraKernel::new(hurst(h)).unwrap();
            for (t, s) in [(1.0, 1e-4), (1.0, 0.01), (1.0, 0.3), (1.0, 0.5), (1.0, 0.7), (1.0, 0.999), (2.5, 0.4)] {
                let reference = kernel_by_quadrature(h, t, s);
                assert_relative_eq!(k.eval(t, s), reference, max_relative = 1e-9);
            }
        }
        assert!(VolterraKernel::new(hurst(0.5)).is_err());
    }

    #[test]
    fn kernel_is_homogeneous() {
        for h in [0.3, 0.7] {
            let k = VolterraKernel::new(hurst(h)).unwrap();
            let lam: f64 = 3.7;
            assert_relative_eq!(k.eval(lam, lam * 0.2), lam.powf(0.5 - h) * k.eval(1.0, 0.2), max_relative = 1e-13);
        }
    }

    /// Exact `Var(Z_{t_i})` of the discrete transform applied to fBm.
    fn discrete_variance(h: f64, n: usize, i: usize) -> f64 {
        let g = TimeGrid::new(1.0, n).unwrap();
        let w = VolterraWeights::new(n, hurst(h)).unwrap();
        let row: Vec<f64> = w.row(i).iter().map(|v| v * g.dt().powf(0.5 - h)).collect();
        let acov = |k: usize| {
            let k = k as f64;
            0.5 * g.dt().powf(2.0 * h) * ((k + 1.0).powf(2.0 * h) - 2.0 * k.powf(2.0 * h) + (k - 1.0).abs().powf(2.0 * h))
        };
        let mut v = 0.0;
        for a in 0..i {
            for b in 0..i {
                v += row[a] * row[b] * acov(a.abs_diff(b));
            }
        }
        v
    }

    #[test]
    fn transform_of_fbm_has_wiener_variance() {
        for h in [0.3, 0.7] {
            for i in [64, 128, 256] {
                let t = i as f64 / 256.0;
                let v = discrete_variance(h, 256, i);
                assert!((v / t - 1.0).abs() < 0.01, "H={h} t={t} var={v}");
            }
        }
    }

    #[test]
    fn z_of_identity_path_matches_kernel_integral() {
        for h in [0.3, 0.7] {
            let c = SdeConfig::new(0.0, 1.0, hurst(h), TimeGrid::new(1.0, 1024).unwrap()).unwrap();
            let k = VolterraKernel::new(hurst(h)).unwrap();
            let exact = tanh_sinh(|s| k.eval(1.0, s), 0.0, 0.5, 1e-13)
                + tanh_sinh(|w| k.eval_with_gap(1.0, 1.0 - w, w), 0.0, 0.5, 1e-13);
            let fine = compute_z(&SampledPath::from_fn(c.grid, |t| t).unwrap(), &c).unwrap().last();
            assert_relative_eq!(fine, exact, max_relative = 5e-3);
        }
    }

    #[test]
    fn z_scales_with_inverse_epsilon() {
        let c = cfg(0.3, 0.2, 64);
        let x = simulate_fbm_circulant(c.grid, c.hurst, RngSeed(9)).unwrap();
        let z1 = compute_z(&x, &c).unwrap();
        let z2 = compute_z(&x, &c.with_epsilon(0.4).unwrap()).unwrap();
        for (a, b) in z1.values().iter().zip(z2.values()) {
            assert_relative_eq!(*a, 2.0 * b, max_relative = 1e-14);
        }
        assert!(compute_z(&x, &cfg(0.3, 0.2, 32)).is_err());
    }

    fn context(family: &str, h: f64, eps: f64, n: usize, theta: &[f64], seed: u64) -> LikelihoodContext {
        let c = cfg(h, eps, n);
        let m = builtin_model(family).unwrap();
        let noise = simulate_fbm_circulant(c.grid, c.hurst, RngSeed(seed)).unwrap();
        let x = simulate_sde(&m, theta, &c, &noise).unwrap();
        LikelihoodContext::new(x, c, m).unwrap()
    }

    #[test]
    fn q_vanishes_for_zero_drift() {
        for h in [0.3, 0.7] {
            let ctx = context("sine", h, 0.1, 64, &[0.0, 0.0], 1);
            assert!(ctx.compute_q(&[0.0, 0.0]).unwrap().values().iter().all(|&v| v == 0.0));
            assert_eq!(ctx.log_likelihood(&[0.0, 0.0]).unwrap(), 0.0);
        }
    }

    #[test]
    fn q_constant_drift_closed_forms() {
        // B(1.2, 0.2)/(d_H Γ(0.2)) at H = 0.3 and c2 at H = 0.7
        assert_relative_eq!(constant_drift_q_factor(hurst(0.3)).unwrap(), 1.217138223466538276, max_relative = 1e-12);
        assert_relative_eq!(constant_drift_q_factor(hurst(0.7)).unwrap(), 0.779863664917080420, max_relative = 1e-12);
        for h in [0.3, 0.7] {
            let ctx = context("constant", h, 0.05, 256, &[1.0], 4);
            let q = ctx.compute_q(&[2.0]).unwrap();
            let kappa = constant_drift_q_factor(hurst(h)).unwrap();
            for i in 1..=256 {
                let t = ctx.config().grid.t(i);
                assert_relative_eq!(q.values()[i], 2.0 * kappa * t.powf(0.5 - h) / 0.05, max_relative = 1e-10);
            }
            assert_eq!(q.values()[0], 0.0);
        }
    }

    #[test]
    fn expanded_q_agrees_with_operator_route() {
        for h in [0.3, 0.7] {
            let ctx = context("sine", h, 0.1, 2048, &[1.0, 1.0], 11);
            let theta = [0.7, -1.3];
            let fast = ctx.compute_q(&theta).unwrap();
            let slow = ctx.definitional_q(&theta).unwrap();
            let g = ctx.config().grid;
            let scale = fast.max_abs();
            for i in (g.steps() / 8)..=g.steps() {
                let err = (fast.values()[i] - slow.values()[i]).abs() / scale;
                assert!(err < 1e-2, "H={h} i={i} err={err}");
            }
        }
    }

    #[test]
    fn loglik_is_the_discrete_quadratic_for_constant_drift() {
        for h in [0.3, 0.7] {
            let eps = 0.05;
            let ctx = context("constant", h, eps, 512, &[1.0], 21);
            let g = ctx.config().grid;
            let kappa = constant_drift_q_factor(hurst(h)).unwrap();
            let q1: Vec<f64> = (0..=g.steps())
                .map(|i| if i == 0 { 0.0 } else { kappa * g.t(i).powf(0.5 - h) / eps })
                .collect();
            let z = ctx.z_path().values();
            let (mut a, mut b) = (0.0, 0.0);
            for i in 1..g.steps() {
                a += q1[i] * (z[i + 1] - z[i]);
                b += q1[i] * (q1[i] + q1[i + 1]) / 2.0 * g.dt();
            }
            for th in [-1.0, 0.0, 1.0, 2.0] {
                let got = ctx.log_likelihood(&[th]).unwrap();
                let want = th * a - th * th * b / 2.0;
                assert!((got - want).abs() <= 1e-8 * want.abs().max(1e-300) + 1e-12, "H={h} θ={th}: {got} vs {want}");
                let grad = ctx.grad_log_likelihood(&[th]).unwrap()[0];
                assert_relative_eq!(grad, a - th * b, max_relative = 1e-8, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn gradient_matches_central_differences() {
        for h in [0.3, 0.7] {
            let ctx = context("sine", h, 0.05, 256, &[1.0, 1.0], 5);
            for theta in [[0.3, 0.9], [1.5, -0.4], [-0.7, 2.0]] {
                let grad = ctx.grad_log_likelihood(&theta).unwrap();
                for k in 0..2 {
                    let mut tp = theta;
                    let mut tm = theta;
                    tp[k] += 1e-5;
                    tm[k] -= 1e-5;
                    let fd = (ctx.log_likelihood(&tp).unwrap() - ctx.log_likelihood(&tm).unwrap()) / 2e-5;
                    assert_relative_eq!(grad[k], fd, max_relative = 1e-6);
                }
            }
        }
    }

    #[test]
    fn basis_and_direct_evaluation_agree() {
        for h in [0.3, 0.7] {
            let ctx = context("sine", h, 0.05, 128, &[1.0, 1.0], 8);
            let direct = LikelihoodContext::without_basis(ctx.observed().clone(), *ctx.config(), *ctx.model()).unwrap();
            for theta in [[0.2, 0.3], [1.0, -2.0]] {
                let a = ctx.log_likelihood(&theta).unwrap();
                let b = direct.log_likelihood(&theta).unwrap();
                assert_relative_eq!(a, b, max_relative = 1e-11);
                let ga = ctx.grad_log_likelihood(&theta).unwrap();
                let gb = direct.grad_log_likelihood(&theta).unwrap();
                for k in 0..2 {
                    assert_relative_eq!(ga[k], gb[k], max_relative = 1e-11);
                }
            }
        }
    }

    #[test]
    fn likelihood_survives_weight_rebuild() {
        let ctx = context("linear", 0.7, 0.05, 96, &[1.0], 2);
        let before = ctx.log_likelihood(&[0.8]).unwrap();
        let rebuilt = VolterraWeights::build(96, hurst(0.7)).unwrap();
        let cached = VolterraWeights::new(96, hurst(0.7)).unwrap();
        assert_eq!(rebuilt.rows, cached.rows);
        let again = LikelihoodContext::new(ctx.observed().clone(), *ctx.config(), *ctx.model()).unwrap();
        assert_eq!(before, again.log_likelihood(&[0.8]).unwrap());
    }

    /// Quadratic variation of `Z - ∫ Q dt` sampled every `stride` nodes.
    fn residual_qv(h: f64, stride: usize) -> f64 {
        let c = cfg(h, 0.1, 256);
        let m = builtin_model("sine").unwrap();
        let theta = [1.0, 1.0];
        let sampler = CirculantFbm::new(c.grid, c.hurst).unwrap();
        let dt = c.grid.dt();
        let mut qv = 0.0;
        let reps = 800;
        for r in 0..reps {
            let noise = sampler.sample(RngSeed(100 + r));
            let x = simulate_sde(&m, &theta, &c, &noise).unwrap();
            let ctx = LikelihoodContext::new(x, c, m).unwrap();
            let q = ctx.compute_q(&theta).unwrap();
            let z = ctx.z_path().values();
            let mut resid = vec![0.0; z.len()];
            for i in 1..c.grid.steps() {
                resid[i + 1] = resid[i] + z[i + 1] - z[i] - q.values()[i] * dt;
            }
            let mut i = stride;
            while i + stride <= c.grid.steps() {
                qv += (resid[i + stride] - resid[i]).powi(2);
                i += stride;
            }
        }
        let span = c.grid.t(c.grid.steps() / stride * stride) - c.grid.t(stride);
        qv / reps as f64 / span
    }

    #[test]
    fn residual_has_wiener_quadratic_variation() {
        // grid data only determine Z up to its conditional mean inside a
        // cell, so the check is done on blocks of eight steps
        for h in [0.3, 0.7] {
            let ratio = residual_qv(h, 8);
            assert!((ratio - 1.0).abs() < 0.05, "H={h}: quadratic variation ratio {ratio}");
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(16))]
        #[test]
        fn q_is_linear_in_drift(a in -3.0f64..3.0, c in -3.0f64..3.0, rough in any::<bool>()) {
            let h = if rough { 0.3 } else { 0.7 };
            let op = QOperator::new(TimeGrid::new(1.0, 64).unwrap(), hurst(h), 0.1).unwrap();
            let g = TimeGrid::new(1.0, 64).unwrap();
            let b1: Vec<f64> = g.nodes().iter().map(|t| (3.0 * t).sin()).collect();
            let b2: Vec<f64> = g.nodes().iter().map(|t| 1.0 + t * t).collect();
            let mix: Vec<f64> = b1.iter().zip(&b2).map(|(x, y)| a * x + c * y).collect();
            let (q1, q2, qm) = (op.apply(&b1), op.apply(&b2), op.apply(&mix));
            for i in 0..=64 {
                let want = a * q1[i] + c * q2[i];
                prop_assert!((qm[i] - want).abs() <= 1e-11 * (1.0 + q1[i].abs() + q2[i].abs()));
            }
        }
    }
}
