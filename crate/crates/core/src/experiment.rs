//! Monte Carlo harness for the small-noise limit theorem of the MLE, plus the
//! supporting convergence studies (Volterra transform, contrast, Hessian).

use std::f64::consts::PI;

use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::function::erf::erfc;

use crate::asymptotics::{gamma_matrix, y_empirical, y_limit, FisherMatrix, FisherReport};
use crate::error::{Error, Result};
use crate::estimator::{maximize_likelihood, EstimationResult, OptimizerOptions};
use crate::fbm::{CholeskyFbm, CirculantFbm, HurstIndex, RngSeed};
use crate::grid::{SampledPath, TimeGrid};
use crate::likelihood::{compute_z, LikelihoodContext};
use crate::model::{simulate_sde, DriftFamily, DriftModel, ParameterBox, SdeConfig};

pub const THREADS_ENV: &str = "FRACMLE_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    Cholesky,
    #[default]
    Circulant,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Diagnostics {
    pub ks: bool,
    pub moments: bool,
    pub tails: bool,
    /// Histogram bins over ±4 standard deviations; 0 disables the histogram.
    pub histogram_bins: usize,
    /// Also re-run the first `ε` on a grid with twice the steps.
    pub grid_doubling: bool,
}

impl Default for Diagnostics {
    fn default() -> Self {
        Self {
            ks: true,
            moments: true,
            tails: true,
            histogram_bins: 40,
            grid_doubling: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyConfig {
    pub model: DriftFamily,
    pub theta0: Vec<f64>,
    pub bounds: ParameterBox,
    pub x0: f64,
    pub hurst: f64,
    /// One study is run per value, all on the same noise paths.
    pub epsilons: Vec<f64>,
    pub horizon: f64,
    pub steps: usize,
    pub replicates: usize,
    pub seed: u64,
    pub sampler: SamplerKind,
    pub optimizer: OptimizerOptions,
    pub diagnostics: Diagnostics,
}

impl StudyConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates < 2 {
            return Err(Error::Config(format!("study needs at least 2 replicates, got {}", self.replicates)));
        }
        if self.epsilons.is_empty() {
            return Err(Error::Config("study needs at least one epsilon".into()));
        }
        for &e in &self.epsilons {
            if !(e > 0.0 && e <= 1.0) {
                return Err(Error::Config(format!("epsilon must lie in (0, 1], got {e}")));
            }
        }
        HurstIndex::for_estimation(self.hurst)?;
        TimeGrid::new(self.horizon, self.steps)?;
        let model = DriftModel::new(self.model);
        model.check_theta(&self.theta0)?;
        if self.bounds.dim() != model.dim() {
            return Err(Error::Config(format!(
                "model '{}' has {} parameters but the box has {}",
                self.model,
                model.dim(),
                self.bounds.dim()
            )));
        }
        self.bounds.require_interior(&self.theta0)?;
        self.optimizer.validate()
    }

    pub fn drift_model(&self) -> DriftModel {
        DriftModel::new(self.model)
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.steps)
    }

    pub fn sde_config(&self, epsilon: f64) -> Result<SdeConfig> {
        SdeConfig::new(self.x0, epsilon, HurstIndex::for_estimation(self.hurst)?, self.grid()?)
    }

    pub fn replicate_seed(&self, r: usize) -> RngSeed {
        RngSeed::for_replicate(self.seed, r as u64)
    }
}

enum Sampler {
    Cholesky(CholeskyFbm),
    Circulant(CirculantFbm),
}

impl Sampler {
    fn new(kind: SamplerKind, grid: TimeGrid, hurst: HurstIndex) -> Result<Self> {
        Ok(match kind {
            SamplerKind::Cholesky => Self::Cholesky(CholeskyFbm::new(grid, hurst)?),
            SamplerKind::Circulant => Self::Circulant(CirculantFbm::new(grid, hurst)?),
        })
    }

    fn sample(&self, seed: RngSeed) -> SampledPath {
        match self {
            Self::Cholesky(s) => s.sample(seed),
            Self::Circulant(s) => s.sample(seed),
        }
    }
}

/// Runs `f` on a pool sized by `FRACMLE_THREADS` when that variable is set.
pub fn with_thread_pool<T: Send>(f: impl FnOnce() -> T + Send) -> Result<T> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let k: usize = v
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("{THREADS_ENV} must be a positive integer, got '{v}'")))?;
            if k == 0 {
                return Err(Error::Config(format!("{THREADS_ENV} must be at least 1")));
            }
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(k)
                .build()
                .map_err(|e| Error::Config(format!("cannot build thread pool: {e}")))?;
            Ok(pool.install(f))
        }
        Err(_) => Ok(f()),
    }
}

/// A configured study with its sampler built once.
pub struct Study {
    cfg: StudyConfig,
    model: DriftModel,
    sampler: Sampler,
}

impl Study {
    pub fn new(cfg: StudyConfig) -> Result<Self> {
        cfg.validate()?;
        let sampler = Sampler::new(cfg.sampler, cfg.grid()?, HurstIndex::for_estimation(cfg.hurst)?)?;
        Ok(Self {
            model: cfg.drift_model(),
            cfg,
            sampler,
        })
    }

    pub fn config(&self) -> &StudyConfig {
        &self.cfg
    }

    fn noise(&self, r: usize) -> Result<SampledPath> {
        if r >= self.cfg.replicates {
            return Err(Error::invalid(format!(
                "replicate index {r} outside [0, {})",
                self.cfg.replicates
            )));
        }
        Ok(self.sampler.sample(self.cfg.replicate_seed(r)))
    }

    fn context(&self, noise: &SampledPath, epsilon: f64) -> Result<LikelihoodContext> {
        let sde = self.cfg.sde_config(epsilon)?;
        let x = simulate_sde(&self.model, &self.cfg.theta0, &sde, noise)?;
        LikelihoodContext::new(x, sde, self.model)
    }

    fn tagged<T>(r: usize, res: Result<T>) -> Result<T> {
        res.map_err(|e| Error::Replicate {
            index: r,
            source: Box::new(e),
        })
    }

    /// Estimates for replicate `r` at every configured `ε`, all driven by the
    /// same fBm path.
    pub fn run_replicate(&self, r: usize) -> Result<Vec<EstimationResult>> {
        let noise = self.noise(r)?;
        self.cfg
            .epsilons
            .iter()
            .map(|&eps| {
                let est = self.context(&noise, eps).and_then(|ctx| {
                    maximize_likelihood(&ctx, &self.cfg.bounds, &self.cfg.optimizer)
                });
                Self::tagged(r, est.map(|e| e.with_truth(&self.cfg.theta0, eps)))
            })
            .collect()
    }

    pub fn run(&self) -> Result<StudyReport> {
        let m = self.cfg.replicates;
        let n_eps = self.cfg.epsilons.len();
        let outcomes: Vec<std::result::Result<Vec<EstimationResult>, String>> = (0..m)
            .into_par_iter()
            .map(|r| self.run_replicate(r).map_err(|e| e.to_string()))
            .collect();

        let fisher = gamma_matrix(&self.model, &self.cfg.theta0, &self.cfg.sde_config(self.cfg.epsilons[0])?)?;
        let mut per_eps = Vec::with_capacity(n_eps);
        for (k, &eps) in self.cfg.epsilons.iter().enumerate() {
            let records: Vec<ReplicateRecord> = outcomes
                .iter()
                .enumerate()
                .map(|(r, out)| ReplicateRecord::new(r, self.cfg.replicate_seed(r).0, eps, out.as_ref().map(|v| &v[k])))
                .collect();
            let summary = summarize(eps, &records, &fisher, &self.cfg.diagnostics)?;
            per_eps.push(EpsilonReport {
                epsilon: eps,
                summary,
                replicates: records,
            });
        }
        let schedule_monotone = (n_eps > 1).then(|| schedule_monotone(&per_eps));
        let grid_doubling = if self.cfg.diagnostics.grid_doubling {
            Some(grid_doubling_check(&self.cfg)?)
        } else {
            None
        };
        Ok(StudyReport {
            config: self.cfg.clone(),
            fisher: fisher.to_report(),
            schedule_monotone,
            grid_doubling,
            epsilons: per_eps,
        })
    }
}

pub fn run_replicate(cfg: &StudyConfig, r: usize) -> Result<Vec<EstimationResult>> {
    Study::new(cfg.clone())?.run_replicate(r)
}

pub fn run_study(cfg: &StudyConfig) -> Result<StudyReport> {
    let study = Study::new(cfg.clone())?;
    with_thread_pool(|| study.run())?
}

/// One row of the per-replicate table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplicateRecord {
    pub index: usize,
    pub seed: u64,
    pub epsilon: f64,
    pub theta_hat: Vec<f64>,
    pub normalized_error: Vec<f64>,
    pub loglik: f64,
    pub converged: bool,
    pub hit_boundary: bool,
    pub n_evals: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl ReplicateRecord {
    fn new(index: usize, seed: u64, epsilon: f64, out: std::result::Result<&EstimationResult, &String>) -> Self {
        match out {
            Ok(e) => Self {
                index,
                seed,
                epsilon,
                theta_hat: e.theta_hat.clone(),
                normalized_error: e.normalized_error.clone().unwrap_or_default(),
                loglik: e.loglik_at_hat,
                converged: e.converged,
                hit_boundary: e.hit_boundary,
                n_evals: e.n_evals,
                error: None,
            },
            Err(msg) => Self {
                index,
                seed,
                epsilon,
                theta_hat: Vec::new(),
                normalized_error: Vec::new(),
                loglik: f64::NAN,
                converged: false,
                hit_boundary: false,
                n_evals: 0,
                error: Some(msg.clone()),
            },
        }
    }

    pub fn failed(&self) -> bool {
        self.error.is_some()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct KsResult {
    pub statistic: f64,
    pub p_value: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct MomentComparison {
    pub function: String,
    pub empirical: f64,
    pub theoretical: f64,
    pub standard_error: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct TailFrequency {
    /// Threshold in standard deviations of the limit law.
    pub r: f64,
    pub empirical: f64,
    pub theoretical: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Histogram {
    pub centers: Vec<f64>,
    pub counts: Vec<usize>,
    pub density: Vec<f64>,
    pub normal_density: Vec<f64>,
    pub below: usize,
    pub above: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CoordinateSummary {
    pub index: usize,
    pub mean: f64,
    pub mean_se: f64,
    pub variance: f64,
    pub theory_variance: f64,
    pub variance_relative_error: f64,
    pub ks: Option<KsResult>,
    pub moments: Vec<MomentComparison>,
    pub tails: Vec<TailFrequency>,
    pub histogram: Option<Histogram>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsilonSummary {
    pub epsilon: f64,
    pub n_used: usize,
    pub n_failed: usize,
    pub n_boundary: usize,
    pub n_not_converged: usize,
    /// More than 5% of replicates failed or ended on the boundary.
    pub unreliable: bool,
    pub mean: Vec<f64>,
    pub covariance: Vec<Vec<f64>>,
    pub theory_covariance: Vec<Vec<f64>>,
    /// `‖S - Γ^{-1}‖_F / ‖Γ^{-1}‖_F` and its jackknife standard error.
    pub frobenius_distance: f64,
    pub frobenius_se: f64,
    pub coordinates: Vec<CoordinateSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpsilonReport {
    pub epsilon: f64,
    pub summary: EpsilonSummary,
    pub replicates: Vec<ReplicateRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StudyReport {
    pub config: StudyConfig,
    pub fisher: FisherReport,
    /// Frobenius distances non-increasing as `ε` decreases, up to overlapping
    /// 95% intervals; present when several `ε` are studied.
    pub schedule_monotone: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub grid_doubling: Option<GridDoubling>,
    pub epsilons: Vec<EpsilonReport>,
}

fn mean_cov(rows: &[&[f64]]) -> (Vec<f64>, DMatrix<f64>) {
    let d = rows[0].len();
    let m = rows.len() as f64;
    let mut mean = vec![0.0; d];
    for r in rows {
        for k in 0..d {
            mean[k] += r[k];
        }
    }
    for v in &mut mean {
        *v /= m;
    }
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        for k in 0..d {
            for l in 0..d {
                cov[(k, l)] += (r[k] - mean[k]) * (r[l] - mean[l]);
            }
        }
    }
    (mean, cov / (m - 1.0))
}

fn frobenius_rel(cov: &DMatrix<f64>, target: &DMatrix<f64>) -> f64 {
    (cov - target).norm() / target.norm()
}

fn to_rows(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

fn summarize(eps: f64, records: &[ReplicateRecord], fisher: &FisherMatrix, diag: &Diagnostics) -> Result<EpsilonSummary> {
    let m = records.len();
    let d = fisher.dim();
    let theory = fisher.inverse().clone();
    let n_failed = records.iter().filter(|r| r.failed()).count();
    let n_boundary = records.iter().filter(|r| r.hit_boundary).count();
    let n_not_converged = records.iter().filter(|r| !r.failed() && !r.converged).count();
    let unreliable = (n_failed + n_boundary) as f64 > 0.05 * m as f64;
    let rows: Vec<&[f64]> = records
        .iter()
        .filter(|r| !r.failed())
        .map(|r| r.normalized_error.as_slice())
        .collect();
    let n = rows.len();
    if n < 2 {
        return Err(Error::DegenerateSample(format!(
            "only {n} of {m} replicates succeeded at epsilon = {eps}"
        )));
    }
    let (mean, cov) = mean_cov(&rows);
    let frob = frobenius_rel(&cov, &theory);
    let frob_se = if n > 2 {
        let loo: Vec<f64> = (0..n)
            .map(|i| {
                let sub: Vec<&[f64]> = rows.iter().enumerate().filter(|(j, _)| *j != i).map(|(_, r)| *r).collect();
                frobenius_rel(&mean_cov(&sub).1, &theory)
            })
            .collect();
        let lm = loo.iter().sum::<f64>() / n as f64;
        ((n - 1) as f64 / n as f64 * loo.iter().map(|v| (v - lm).powi(2)).sum::<f64>()).sqrt()
    } else {
        f64::INFINITY
    };

    let mut coordinates = Vec::with_capacity(d);
    for k in 0..d {
        let xs: Vec<f64> = rows.iter().map(|r| r[k]).collect();
        let s2 = theory[(k, k)];
        let sd = s2.sqrt();
        let var = cov[(k, k)];
        let ks = if diag.ks && n >= 8 {
            match ks_normality(&xs, s2) {
                Ok(r) => Some(r),
                Err(Error::DegenerateSample(_)) => None,
                Err(e) => return Err(e),
            }
        } else {
            None
        };
        let moments = if diag.moments { moment_comparisons(&xs, sd) } else { Vec::new() };
        let tails = if diag.tails {
            [1.0, 2.0, 3.0]
                .iter()
                .map(|&r| TailFrequency {
                    r,
                    empirical: xs.iter().filter(|x| x.abs() > r * sd).count() as f64 / n as f64,
                    theoretical: erfc(r / 2f64.sqrt()),
                })
                .collect()
        } else {
            Vec::new()
        };
        let histogram = (diag.histogram_bins > 0).then(|| histogram(&xs, sd, diag.histogram_bins));
        coordinates.push(CoordinateSummary {
            index: k,
            mean: mean[k],
            mean_se: (var / n as f64).sqrt(),
            variance: var,
            theory_variance: s2,
            variance_relative_error: (var - s2) / s2,
            ks,
            moments,
            tails,
            histogram,
        });
    }

    Ok(EpsilonSummary {
        epsilon: eps,
        n_used: n,
        n_failed,
        n_boundary,
        n_not_converged,
        unreliable,
        mean,
        covariance: to_rows(&cov),
        theory_covariance: to_rows(&theory),
        frobenius_distance: frob,
        frobenius_se: frob_se,
        coordinates,
    })
}

/// `E f(u)` against `E f(ξ)`, `ξ ~ N(0, sd²)`, for `f ∈ {x, x², x⁴, |x|³}`.
fn moment_comparisons(xs: &[f64], sd: f64) -> Vec<MomentComparison> {
    let n = xs.len() as f64;
    let fns: [(&str, fn(f64) -> f64, f64); 4] = [
        ("x", |x| x, 0.0),
        ("x^2", |x| x * x, sd.powi(2)),
        ("x^4", |x| x.powi(4), 3.0 * sd.powi(4)),
        ("|x|^3", |x| x.abs().powi(3), 2.0 * (2.0 / PI).sqrt() * sd.powi(3)),
    ];
    fns.iter()
        .map(|(name, f, theory)| {
            let vals: Vec<f64> = xs.iter().map(|&x| f(x)).collect();
            let mean = vals.iter().sum::<f64>() / n;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
            let scale = if *theory == 0.0 { sd } else { *theory };
            MomentComparison {
                function: name.to_string(),
                empirical: mean,
                theoretical: *theory,
                standard_error: (var / n).sqrt(),
                relative_error: (mean - theory) / scale,
            }
        })
        .collect()
}

fn normal_pdf(x: f64, sd: f64) -> f64 {
    (-(x * x) / (2.0 * sd * sd)).exp() / (sd * (2.0 * PI).sqrt())
}

fn histogram(xs: &[f64], sd: f64, bins: usize) -> Histogram {
    let lo = -4.0 * sd;
    let width = 8.0 * sd / bins as f64;
    let mut counts = vec![0usize; bins];
    let (mut below, mut above) = (0, 0);
    for &x in xs {
        if x < lo {
            below += 1;
        } else {
            let b = ((x - lo) / width) as usize;
            if b >= bins {
                above += 1;
            } else {
                counts[b] += 1;
            }
        }
    }
    let centers: Vec<f64> = (0..bins).map(|b| lo + (b as f64 + 0.5) * width).collect();
    let n = xs.len() as f64;
    Histogram {
        density: counts.iter().map(|&c| c as f64 / (n * width)).collect(),
        normal_density: centers.iter().map(|&c| normal_pdf(c, sd)).collect(),
        centers,
        counts,
        below,
        above,
    }
}

fn schedule_monotone(reports: &[EpsilonReport]) -> bool {
    let mut by_eps: Vec<&EpsilonSummary> = reports.iter().map(|r| &r.summary).collect();
    by_eps.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
    by_eps.windows(2).all(|w| {
        let (coarse, fine) = (w[0], w[1]);
        fine.frobenius_distance - 1.96 * fine.frobenius_se <= coarse.frobenius_distance + 1.96 * coarse.frobenius_se
    })
}

/// Survival function of the Kolmogorov distribution.
fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda <= 0.0 {
        return 1.0;
    }
    let p = if lambda < 1.18 {
        let y = (-PI * PI / (8.0 * lambda * lambda)).exp();
        let cdf = (2.0 * PI).sqrt() / lambda * (y + y.powi(9) + y.powi(25) + y.powi(49));
        1.0 - cdf
    } else {
        let x = (-2.0 * lambda * lambda).exp();
        2.0 * (x - x.powi(4) + x.powi(9) - x.powi(16))
    };
    p.clamp(0.0, 1.0)
}

fn ks_p(d: f64, n_eff: f64) -> f64 {
    let s = n_eff.sqrt();
    kolmogorov_sf((s + 0.12 + 0.11 / s) * d)
}

fn sorted_finite(sample: &[f64], what: &str) -> Result<Vec<f64>> {
    if let Some(i) = sample.iter().position(|v| !v.is_finite()) {
        return Err(Error::invalid(format!("{what} has a non-finite value at index {i}")));
    }
    let mut xs = sample.to_vec();
    xs.sort_by(f64::total_cmp);
    Ok(xs)
}

/// One-sample KS test against `N(0, sigma2)` with the asymptotic p-value.
pub fn ks_normality(sample: &[f64], sigma2: f64) -> Result<KsResult> {
    if sample.len() < 8 {
        return Err(Error::invalid(format!("KS test needs at least 8 values, got {}", sample.len())));
    }
    if !(sigma2 > 0.0 && sigma2.is_finite()) {
        return Err(Error::invalid(format!("KS reference variance must be positive, got {sigma2}")));
    }
    let xs = sorted_finite(sample, "KS sample")?;
    if xs[0] == xs[xs.len() - 1] {
        return Err(Error::DegenerateSample("KS sample has zero variance".into()));
    }
    let n = xs.len() as f64;
    let sd = sigma2.sqrt();
    let mut d = 0.0_f64;
    for (i, &x) in xs.iter().enumerate() {
        let f = 0.5 * erfc(-x / (sd * 2f64.sqrt()));
        d = d.max((i + 1) as f64 / n - f).max(f - i as f64 / n);
    }
    Ok(KsResult {
        statistic: d,
        p_value: ks_p(d, n),
        n: xs.len(),
    })
}

/// Two-sample KS test with the asymptotic p-value.
pub fn ks_two_sample(a: &[f64], b: &[f64]) -> Result<KsResult> {
    if a.len() < 8 || b.len() < 8 {
        return Err(Error::invalid("two-sample KS test needs at least 8 values per sample"));
    }
    let xa = sorted_finite(a, "first KS sample")?;
    let xb = sorted_finite(b, "second KS sample")?;
    let (na, nb) = (xa.len() as f64, xb.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d = 0.0_f64;
    while i < xa.len() && j < xb.len() {
        let v = xa[i].min(xb[j]);
        while i < xa.len() && xa[i] <= v {
            i += 1;
        }
        while j < xb.len() && xb[j] <= v {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(KsResult {
        statistic: d,
        p_value: ks_p(d, na * nb / (na + nb)),
        n: xa.len() + xb.len(),
    })
}

/// Mean and standard error.
fn mean_se(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct VolterraRow {
    pub t: f64,
    /// Plain mean of `Z_t²`.
    pub variance: f64,
    pub standard_error: f64,
    pub relative_error: f64,
    /// Mean of `Z_t²` with `(B^H_t)²` as control variate (its mean `t^{2H}` is exact).
    pub variance_cv: f64,
    pub standard_error_cv: f64,
    pub relative_error_cv: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct VolterraReport {
    pub hurst: f64,
    pub steps: usize,
    pub replicates: usize,
    pub seed: u64,
    pub rows: Vec<VolterraRow>,
}

/// `Var(Z_t)` at the requested times for zero drift, which should equal `t`.
pub fn run_volterra_study(cfg: &StudyConfig, times: &[f64]) -> Result<VolterraReport> {
    let grid = cfg.grid()?;
    let hurst = HurstIndex::for_estimation(cfg.hurst)?;
    let sde = cfg.sde_config(cfg.epsilons[0])?;
    let idx: Vec<usize> = times
        .iter()
        .map(|&t| {
            let i = (t / grid.dt()).round() as usize;
            if i == 0 || i > grid.steps() {
                Err(Error::invalid(format!("time {t} is not an interior grid node")))
            } else {
                Ok(i)
            }
        })
        .collect::<Result<_>>()?;
    let sampler = Sampler::new(cfg.sampler, grid, hurst)?;
    let zero = DriftModel::new(DriftFamily::Constant);
    let values: Vec<Vec<(f64, f64)>> = with_thread_pool(|| {
        (0..cfg.replicates)
            .into_par_iter()
            .map(|r| {
                let noise = sampler.sample(cfg.replicate_seed(r));
                let x = simulate_sde(&zero, &[0.0], &sde, &noise)?;
                let z = compute_z(&x, &sde)?;
                Ok(idx.iter().map(|&i| (z.values()[i], noise.values()[i])).collect())
            })
            .collect::<Result<Vec<Vec<(f64, f64)>>>>()
    })??;
    let two_h = 2.0 * hurst.value();
    let rows = idx
        .iter()
        .enumerate()
        .map(|(k, &i)| {
            let t = grid.t(i);
            let y: Vec<f64> = values.iter().map(|v| v[k].0 * v[k].0).collect();
            let c: Vec<f64> = values.iter().map(|v| v[k].1 * v[k].1).collect();
            let (var, se) = mean_se(&y);
            let (cm, _) = mean_se(&c);
            let cov_yc: f64 = y.iter().zip(&c).map(|(a, b)| (a - var) * (b - cm)).sum();
            let var_c: f64 = c.iter().map(|b| (b - cm).powi(2)).sum();
            let coef = cov_yc / var_c;
            let adjusted: Vec<f64> = y.iter().zip(&c).map(|(a, b)| a - coef * (b - t.powf(two_h))).collect();
            let (var_cv, se_cv) = mean_se(&adjusted);
            VolterraRow {
                t,
                variance: var,
                standard_error: se,
                relative_error: (var - t) / t,
                variance_cv: var_cv,
                standard_error_cv: se_cv,
                relative_error_cv: (var_cv - t) / t,
            }
        })
        .collect();
    Ok(VolterraReport {
        hurst: cfg.hurst,
        steps: cfg.steps,
        replicates: cfg.replicates,
        seed: cfg.seed,
        rows,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ContrastRow {
    pub epsilon: f64,
    /// Mean of `-𝕐_{H,ε}(θ)` over replicates.
    pub mean: f64,
    pub standard_error: f64,
    pub relative_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ContrastReport {
    pub theta: Vec<f64>,
    pub theta0: Vec<f64>,
    pub limit: f64,
    pub rows: Vec<ContrastRow>,
    /// `|mean - limit|` non-increasing as `ε` decreases, up to overlapping
    /// 95% intervals.
    pub improving: bool,
}

/// `-𝕐_{H,ε}(θ)` averaged over replicates at every `ε`, against `𝕐_H(θ)`.
pub fn run_contrast_study(cfg: &StudyConfig, theta: &[f64]) -> Result<ContrastReport> {
    let study = Study::new(cfg.clone())?;
    study.model.check_theta(theta)?;
    let limit = y_limit(&study.model, theta, &cfg.theta0, &cfg.sde_config(cfg.epsilons[0])?)?;
    let per_rep: Vec<Vec<f64>> = with_thread_pool(|| {
        (0..cfg.replicates)
            .into_par_iter()
            .map(|r| {
                let noise = study.noise(r)?;
                let vals = cfg
                    .epsilons
                    .iter()
                    .map(|&eps| {
                        let ctx = study.context(&noise, eps)?;
                        Ok(-y_empirical(&ctx, theta, &cfg.theta0)?)
                    })
                    .collect::<Result<Vec<f64>>>();
                Study::tagged(r, vals)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let mut rows: Vec<ContrastRow> = cfg
        .epsilons
        .iter()
        .enumerate()
        .map(|(k, &eps)| {
            let v: Vec<f64> = per_rep.iter().map(|r| r[k]).collect();
            let (mean, se) = mean_se(&v);
            ContrastRow {
                epsilon: eps,
                mean,
                standard_error: se,
                relative_error: (mean - limit) / limit,
            }
        })
        .collect();
    rows.sort_by(|a, b| b.epsilon.total_cmp(&a.epsilon));
    let improving = rows.windows(2).all(|w| {
        let gap = |r: &ContrastRow| (r.mean - limit).abs();
        gap(&w[1]) - 1.96 * w[1].standard_error <= gap(&w[0]) + 1.96 * w[0].standard_error
    });
    Ok(ContrastReport {
        theta: theta.to_vec(),
        theta0: cfg.theta0.clone(),
        limit,
        rows,
        improving,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HessianReport {
    pub epsilon: f64,
    pub replicates: usize,
    /// Replicate mean of `-ε² ∇²𝕃(θ0)` by central differences.
    pub mean: Vec<Vec<f64>>,
    pub gamma: Vec<Vec<f64>>,
    pub relative_error: Vec<Vec<f64>>,
    pub max_relative_error: f64,
}

/// Central second differences of `𝕃` at `θ`, with steps `δ_k`.
pub fn fd_hessian(ctx: &LikelihoodContext, theta: &[f64], delta: &[f64]) -> Result<DMatrix<f64>> {
    let d = theta.len();
    let f = |shift: &[(usize, f64)]| {
        let mut t = theta.to_vec();
        for &(k, s) in shift {
            t[k] += s;
        }
        ctx.log_likelihood(&t)
    };
    let f0 = f(&[])?;
    let mut h = DMatrix::zeros(d, d);
    for k in 0..d {
        let dk = delta[k];
        h[(k, k)] = (f(&[(k, dk)])? - 2.0 * f0 + f(&[(k, -dk)])?) / (dk * dk);
        for l in 0..k {
            let dl = delta[l];
            let v = (f(&[(k, dk), (l, dl)])? - f(&[(k, dk), (l, -dl)])? - f(&[(k, -dk), (l, dl)])?
                + f(&[(k, -dk), (l, -dl)])?)
                / (4.0 * dk * dl);
            h[(k, l)] = v;
            h[(l, k)] = v;
        }
    }
    Ok(h)
}

/// `-ε² ∇²𝕃(θ0)` averaged over replicates at the first configured `ε`,
/// entrywise against `Γ_H(θ0)`.
pub fn run_hessian_study(cfg: &StudyConfig) -> Result<HessianReport> {
    let study = Study::new(cfg.clone())?;
    let eps = cfg.epsilons[0];
    let fisher = gamma_matrix(&study.model, &cfg.theta0, &cfg.sde_config(eps)?)?;
    let delta: Vec<f64> = cfg.theta0.iter().map(|t| 1e-3 * (1.0 + t.abs())).collect();
    let hs: Vec<DMatrix<f64>> = with_thread_pool(|| {
        (0..cfg.replicates)
            .into_par_iter()
            .map(|r| {
                let h = study
                    .noise(r)
                    .and_then(|noise| study.context(&noise, eps))
                    .and_then(|ctx| fd_hessian(&ctx, &cfg.theta0, &delta));
                Study::tagged(r, h)
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let d = cfg.theta0.len();
    let mut mean = DMatrix::zeros(d, d);
    for h in &hs {
        mean -= h * (eps * eps);
    }
    mean /= hs.len() as f64;
    let gamma = fisher.gamma();
    let rel = DMatrix::from_fn(d, d, |k, l| (mean[(k, l)] - gamma[(k, l)]) / gamma[(k, l)].abs());
    Ok(HessianReport {
        epsilon: eps,
        replicates: hs.len(),
        mean: to_rows(&mean),
        gamma: to_rows(gamma),
        max_relative_error: rel.iter().fold(0.0_f64, |a, v| a.max(v.abs())),
        relative_error: to_rows(&rel),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GridDoubling {
    pub steps: usize,
    pub covariance: Vec<Vec<f64>>,
    pub covariance_doubled: Vec<Vec<f64>>,
    /// `‖S_{2n} - S_n‖_F / ‖S_n‖_F`.
    pub relative_change: f64,
}

/// Re-runs the first-`ε` study on a grid of `2n` steps with the same noise,
/// the `n`-step path being the even-indexed subsample of the fine one.
pub fn grid_doubling_check(cfg: &StudyConfig) -> Result<GridDoubling> {
    cfg.validate()?;
    let eps = cfg.epsilons[0];
    let hurst = HurstIndex::for_estimation(cfg.hurst)?;
    let coarse = cfg.grid()?;
    let fine = TimeGrid::new(cfg.horizon, 2 * cfg.steps)?;
    let sampler = Sampler::new(cfg.sampler, fine, hurst)?;
    let model = cfg.drift_model();
    let sde_c = SdeConfig::new(cfg.x0, eps, hurst, coarse)?;
    let sde_f = SdeConfig::new(cfg.x0, eps, hurst, fine)?;
    let estimate = |noise: &SampledPath, sde: &SdeConfig| -> Result<Vec<f64>> {
        let x = simulate_sde(&model, &cfg.theta0, sde, noise)?;
        let ctx = LikelihoodContext::new(x, *sde, model)?;
        let r = maximize_likelihood(&ctx, &cfg.bounds, &cfg.optimizer)?.with_truth(&cfg.theta0, eps);
        Ok(r.normalized_error.unwrap_or_default())
    };
    let pairs: Vec<(Vec<f64>, Vec<f64>)> = with_thread_pool(|| {
        (0..cfg.replicates)
            .into_par_iter()
            .map(|r| {
                let fine_noise = sampler.sample(cfg.replicate_seed(r));
                let coarse_noise = SampledPath::new(coarse, fine_noise.values().iter().step_by(2).copied().collect())?;
                Study::tagged(r, Ok((estimate(&coarse_noise, &sde_c)?, estimate(&fine_noise, &sde_f)?)))
            })
            .collect::<Result<Vec<_>>>()
    })??;
    let a: Vec<&[f64]> = pairs.iter().map(|p| p.0.as_slice()).collect();
    let b: Vec<&[f64]> = pairs.iter().map(|p| p.1.as_slice()).collect();
    let (_, ca) = mean_cov(&a);
    let (_, cb) = mean_cov(&b);
    Ok(GridDoubling {
        steps: cfg.steps,
        relative_change: (&cb - &ca).norm() / ca.norm(),
        covariance: to_rows(&ca),
        covariance_doubled: to_rows(&cb),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;
    use rand_distr::StandardNormal;

    fn normal_sample(seed: u64, n: usize, mean: f64, sd: f64) -> Vec<f64> {
        let mut rng = RngSeed(seed).rng();
        (0..n).map(|_| mean + sd * rng.sample::<f64, _>(StandardNormal)).collect()
    }

    fn small_config(model: DriftFamily, hurst: f64, replicates: usize) -> StudyConfig {
        let (theta0, bounds) = match model {
            DriftFamily::Sine => (vec![0.5, 1.0], ParameterBox::new(vec![-2.0, -1.0], vec![3.0, 3.0]).unwrap()),
            _ => (vec![1.0], ParameterBox::new(vec![0.1], vec![3.0]).unwrap()),
        };
        StudyConfig {
            model,
            theta0,
            bounds,
            x0: 1.0,
            hurst,
            epsilons: vec![0.05],
            horizon: 1.0,
            steps: 128,
            replicates,
            seed: 7,
            sampler: SamplerKind::Circulant,
            optimizer: OptimizerOptions::default(),
            diagnostics: Diagnostics::default(),
        }
    }

    #[test]
    fn kolmogorov_tail_reference_values() {
        // scipy.special.kolmogorov
        assert!((kolmogorov_sf(0.5) - 0.963945243664875).abs() < 1e-9);
        assert!((kolmogorov_sf(1.0) - 0.269999671677356).abs() < 1e-9);
        assert!((kolmogorov_sf(1.36) - 0.049485876755378).abs() < 1e-9);
        assert!((kolmogorov_sf(2.0) - 0.000670925255780).abs() < 1e-12);
        assert_eq!(kolmogorov_sf(0.0), 1.0);
    }

    #[test]
    fn ks_is_calibrated_under_the_null() {
        let sigma2: f64 = 2.5;
        let passes = (0..100)
            .filter(|&s| ks_normality(&normal_sample(1000 + s, 1000, 0.0, sigma2.sqrt()), sigma2).unwrap().p_value > 0.01)
            .count();
        assert!(passes >= 98, "{passes}/100");
    }

    #[test]
    fn ks_detects_a_shifted_mean() {
        let r = ks_normality(&normal_sample(3, 1000, 3.0, 1.0), 1.0).unwrap();
        assert!(r.p_value < 1e-6);
    }

    #[test]
    fn ks_rejects_bad_input() {
        assert!(matches!(ks_normality(&[0.0; 20], 1.0), Err(Error::DegenerateSample(_))));
        assert!(ks_normality(&[0.1; 5], 1.0).is_err());
        assert!(ks_normality(&normal_sample(1, 20, 0.0, 1.0), 0.0).is_err());
    }

    #[test]
    fn two_sample_ks() {
        let a = normal_sample(1, 800, 0.0, 1.0);
        let b = normal_sample(2, 600, 0.0, 1.0);
        assert!(ks_two_sample(&a, &b).unwrap().p_value > 0.01);
        let c = normal_sample(3, 600, 0.5, 1.0);
        assert!(ks_two_sample(&a, &c).unwrap().p_value < 1e-6);
        // a sample against itself has statistic zero
        assert_eq!(ks_two_sample(&a, &a).unwrap().statistic, 0.0);
    }

    #[test]
    fn config_validation() {
        let mut c = small_config(DriftFamily::Constant, 0.7, 1);
        assert!(c.validate().is_err());
        c.replicates = 2;
        assert!(c.validate().is_ok());
        c.hurst = 0.5;
        assert!(c.validate().is_err());
        c.hurst = 0.7;
        c.epsilons = vec![1.5];
        assert!(c.validate().is_err());
        c.epsilons = vec![0.1];
        c.theta0 = vec![3.0];
        assert!(c.validate().is_err());
    }

    #[test]
    fn replicate_is_deterministic_and_indexed() {
        let c = small_config(DriftFamily::Linear, 0.3, 4);
        let study = Study::new(c).unwrap();
        let a = study.run_replicate(2).unwrap();
        let b = study.run_replicate(2).unwrap();
        assert_eq!(a, b);
        assert_ne!(study.run_replicate(1).unwrap()[0].theta_hat, a[0].theta_hat);
        assert!(study.run_replicate(4).is_err());
    }

    #[test]
    fn near_deterministic_replicate() {
        let mut c = small_config(DriftFamily::Linear, 0.7, 2);
        c.steps = 1024;
        c.epsilons = vec![1e-6];
        let r = run_replicate(&c, 0).unwrap();
        assert!((r[0].theta_hat[0] - 1.0).abs() < 1e-3);
        assert!(r[0].normalized_error.as_ref().unwrap()[0].is_finite());
    }

    #[test]
    fn two_replicate_study_does_not_crash() {
        let c = small_config(DriftFamily::Sine, 0.7, 2);
        let r = run_study(&c).unwrap();
        let s = &r.epsilons[0].summary;
        assert_eq!(s.n_used, 2);
        assert!(s.coordinates.iter().all(|c| c.ks.is_none()));
        assert!(s.frobenius_se.is_infinite());
    }

    #[test]
    fn study_is_reproducible_and_self_consistent() {
        let mut c = small_config(DriftFamily::Constant, 0.3, 60);
        c.epsilons = vec![0.1, 0.05];
        let a = run_study(&c).unwrap();
        let b = run_study(&c).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert!(a.schedule_monotone.is_some());
        for e in &a.epsilons {
            let s = &e.summary;
            assert_eq!(s.n_used, 60);
            assert!(s.covariance[0][0] > 0.0);
            let h = s.coordinates[0].histogram.as_ref().unwrap();
            assert_eq!(h.counts.iter().sum::<usize>() + h.below + h.above, 60);
            assert_eq!(e.replicates.len(), 60);
        }
        let u1: Vec<f64> = a.epsilons[0].replicates.iter().map(|r| r.normalized_error[0]).collect();
        let u2: Vec<f64> = a.epsilons[1].replicates.iter().map(|r| r.normalized_error[0]).collect();
        // for the constant drift θ̂ - θ0 = bias + ε·(noise term), with the same
        // noise term at every ε, so u(ε1) - u(ε2) is one constant
        let diffs: Vec<f64> = u1.iter().zip(&u2).map(|(x, y)| x - y).collect();
        for d in &diffs {
            assert!((d - diffs[0]).abs() < 1e-8, "{d} vs {}", diffs[0]);
        }
    }

    #[test]
    fn volterra_study_control_variate_is_tighter() {
        let mut c = small_config(DriftFamily::Constant, 0.7, 400);
        c.epsilons = vec![1.0];
        let r = run_volterra_study(&c, &[0.25, 1.0]).unwrap();
        for row in &r.rows {
            assert!(row.standard_error_cv < 0.8 * row.standard_error, "{row:?}");
            assert!(row.relative_error_cv.abs() < 4.0 * row.standard_error_cv / row.t);
        }
        assert!(run_volterra_study(&c, &[0.0]).is_err());
    }

    #[test]
    fn grid_doubling_moves_covariance_little() {
        // the default pairing ε = 0.02, n = 1024
        let mut c = small_config(DriftFamily::Constant, 0.7, 40);
        c.steps = 1024;
        c.epsilons = vec![0.02];
        let g = grid_doubling_check(&c).unwrap();
        assert!(g.relative_change < 0.03, "{g:?}");
    }

    #[test]
    fn moment_table_is_exact_for_symmetric_points() {
        let m = moment_comparisons(&[-1.0, 1.0], 1.0);
        assert_eq!(m[0].empirical, 0.0);
        assert_eq!(m[1].empirical, 1.0);
        assert_eq!(m[2].theoretical, 3.0);
        assert!((m[3].theoretical - 1.595769121605731).abs() < 1e-12);
    }

    #[test]
    fn fd_hessian_of_linear_model_is_constant() {
        let c = small_config(DriftFamily::Sine, 0.7, 2);
        let study = Study::new(c.clone()).unwrap();
        let noise = study.noise(0).unwrap();
        let ctx = study.context(&noise, 0.05).unwrap();
        let h1 = fd_hessian(&ctx, &c.theta0, &[1e-3, 1e-3]).unwrap();
        let h2 = fd_hessian(&ctx, &[0.0, 0.0], &[1e-2, 1e-2]).unwrap();
        assert!((&h1 - &h2).norm() <= 1e-6 * h1.norm());
        assert!(h1[(0, 0)] < 0.0 && h1.determinant() > 0.0);
    }
}
