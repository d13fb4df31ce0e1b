//! Exact samplers for fractional Brownian motion on a uniform grid.
//!
//! Two samplers share the same law: a Cholesky factorisation of the full
//! covariance of `(B_{t_1}, ..., B_{t_n})` (reference, `O(n^3)` setup) and
//! the Davies–Harte circulant embedding of fractional Gaussian noise
//! (`O(n log n)` per path). Both are deterministic given an [`RngSeed`].

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{SampledPath, TimeGrid};

/// Hurst index `H` in `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct HurstIndex(f64);

impl HurstIndex {
    /// Accepts any `H` in `(0, 1)`, including `1/2`.
    pub fn new(h: f64) -> Result<Self> {
        if !(h > 0.0 && h < 1.0) {
            return Err(Error::invalid(format!("Hurst index must lie in (0, 1), got {h}")));
        }
        Ok(Self(h))
    }

    /// Like [`HurstIndex::new`] but also rejects `H = 1/2`, which the
    /// estimation machinery does not cover.
    pub fn for_estimation(h: f64) -> Result<Self> {
        let hurst = Self::new(h)?;
        if hurst.is_brownian() {
            return Err(Error::invalid(
                "Hurst index 1/2 is excluded from estimation (use H in (0,1) \\ {1/2})",
            ));
        }
        Ok(hurst)
    }

    pub fn value(self) -> f64 {
        self.0
    }

    pub fn is_brownian(self) -> bool {
        self.0 == 0.5
    }

    pub fn is_rough(self) -> bool {
        self.0 < 0.5
    }
}

/// Seed of one deterministic Gaussian stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RngSeed(pub u64);

impl RngSeed {
    /// Seed of replicate `r` under a study-wide master seed.
    pub fn for_replicate(master: u64, r: u64) -> Self {
        let mixed = splitmix64(splitmix64(master) ^ r.wrapping_mul(0xD1B5_4A32_D192_ED03));
        RngSeed(mixed)
    }

    pub fn rng(self) -> ChaCha12Rng {
        ChaCha12Rng::seed_from_u64(self.0)
    }
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `E[B_s B_t] = (t^{2H} + s^{2H} - |t - s|^{2H}) / 2`.
pub fn fbm_covariance(s: f64, t: f64, hurst: HurstIndex) -> Result<f64> {
    if !(s >= 0.0 && t >= 0.0) {
        return Err(Error::invalid(format!("times must be non-negative, got s={s}, t={t}")));
    }
    let two_h = 2.0 * hurst.value();
    Ok(0.5 * (t.powf(two_h) + s.powf(two_h) - (t - s).abs().powf(two_h)))
}

fn fgn_autocovariance(k: usize, hurst: HurstIndex, dt: f64) -> f64 {
    let two_h = 2.0 * hurst.value();
    let k = k as f64;
    0.5 * dt.powf(two_h)
        * ((k + 1.0).powf(two_h) - 2.0 * k.powf(two_h) + (k - 1.0).abs().powf(two_h))
}

fn cumulative_path(grid: TimeGrid, increments: impl Iterator<Item = f64>) -> SampledPath {
    let mut values = Vec::with_capacity(grid.len());
    let mut acc = 0.0;
    values.push(0.0);
    for dx in increments {
        acc += dx;
        values.push(acc);
    }
    SampledPath::new(grid, values).expect("fBm path has grid length and finite values")
}

/// Cholesky sampler; the factor is computed once and reused for every path.
#[derive(Debug, Clone)]
pub struct CholeskyFbm {
    grid: TimeGrid,
    hurst: HurstIndex,
    factor: DMatrix<f64>,
}

impl CholeskyFbm {
    pub fn new(grid: TimeGrid, hurst: HurstIndex) -> Result<Self> {
        let n = grid.steps();
        let mut cov = DMatrix::<f64>::zeros(n, n);
        for i in 0..n {
            for j in 0..=i {
                let c = fbm_covariance(grid.t(i + 1), grid.t(j + 1), hurst)?;
                cov[(i, j)] = c;
                cov[(j, i)] = c;
            }
        }
        let chol = cov.cholesky().ok_or_else(|| {
            Error::NotPositiveDefinite(format!(
                "fBm covariance for H={} on {} steps lost positive definiteness",
                hurst.value(),
                n
            ))
        })?;
        Ok(Self {
            grid,
            hurst,
            factor: chol.unpack(),
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn hurst(&self) -> HurstIndex {
        self.hurst
    }

    pub fn sample(&self, seed: RngSeed) -> SampledPath {
        let n = self.grid.steps();
        let mut rng = seed.rng();
        let z = DVector::<f64>::from_iterator(n, (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let b = &self.factor * z;
        let mut values = Vec::with_capacity(n + 1);
        values.push(0.0);
        values.extend(b.iter().copied());
        SampledPath::new(self.grid, values).expect("Cholesky sample is finite")
    }
}

/// Davies–Harte sampler for fractional Gaussian noise, cumulated to fBm.
#[derive(Clone)]
pub struct CirculantFbm {
    grid: TimeGrid,
    hurst: HurstIndex,
    /// `sqrt(lambda_k / m)` for the size-`m = 2n` embedding
    scale: Vec<f64>,
    fft: Arc<dyn Fft<f64>>,
}

impl std::fmt::Debug for CirculantFbm {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CirculantFbm")
            .field("grid", &self.grid)
            .field("hurst", &self.hurst)
            .finish()
    }
}

impl CirculantFbm {
    const NEGATIVE_EIGEN_TOL: f64 = 1e-10;

    pub fn new(grid: TimeGrid, hurst: HurstIndex) -> Result<Self> {
        let n = grid.steps();
        let m = 2 * n;
        let dt = grid.dt();
        let mut row: Vec<Complex<f64>> = Vec::with_capacity(m);
        for k in 0..=n {
            row.push(Complex::new(fgn_autocovariance(k, hurst, dt), 0.0));
        }
        for k in (1..n).rev() {
            row.push(Complex::new(fgn_autocovariance(k, hurst, dt), 0.0));
        }
        let fft = FftPlanner::new().plan_fft_forward(m);
        fft.process(&mut row);
        let max = row.iter().fold(0.0_f64, |a, c| a.max(c.re));
        let min = row.iter().fold(f64::INFINITY, |a, c| a.min(c.re));
        if min < -Self::NEGATIVE_EIGEN_TOL * max {
            return Err(Error::CirculantEmbedding { min_eigenvalue: min });
        }
        let scale = row.iter().map(|c| (c.re.max(0.0) / m as f64).sqrt()).collect();
        Ok(Self {
            grid,
            hurst,
            scale,
            fft,
        })
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn hurst(&self) -> HurstIndex {
        self.hurst
    }

    pub fn sample(&self, seed: RngSeed) -> SampledPath {
        let n = self.grid.steps();
        let mut rng = seed.rng();
        let mut buf: Vec<Complex<f64>> = self
            .scale
            .iter()
            .map(|&s| {
                let re: f64 = rng.sample(StandardNormal);
                let im: f64 = rng.sample(StandardNormal);
                Complex::new(s * re, s * im)
            })
            .collect();
        self.fft.process(&mut buf);
        cumulative_path(self.grid, buf[..n].iter().map(|c| c.re))
    }
}

/// One exact fBm path via the Cholesky factor of the full covariance.
pub fn simulate_fbm_cholesky(grid: TimeGrid, hurst: HurstIndex, seed: RngSeed) -> Result<SampledPath> {
    Ok(CholeskyFbm::new(grid, hurst)?.sample(seed))
}

/// One exact fBm path via circulant embedding.
pub fn simulate_fbm_circulant(grid: TimeGrid, hurst: HurstIndex, seed: RngSeed) -> Result<SampledPath> {
    Ok(CirculantFbm::new(grid, hurst)?.sample(seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn h(v: f64) -> HurstIndex {
        HurstIndex::new(v).unwrap()
    }

    #[test]
    fn covariance_examples() {
        assert_relative_eq!(fbm_covariance(1.0, 2.0, h(0.5)).unwrap(), 1.0, epsilon = 1e-15);
        assert_relative_eq!(fbm_covariance(2.0, 2.0, h(0.75)).unwrap(), 2.0_f64.powf(1.5), epsilon = 1e-14);
        assert_eq!(fbm_covariance(0.0, 5.0, h(0.3)).unwrap(), 0.0);
        assert!(fbm_covariance(-1.0, 1.0, h(0.3)).is_err());
    }

    #[test]
    fn hurst_domain() {
        assert!(HurstIndex::new(0.0).is_err());
        assert!(HurstIndex::new(1.0).is_err());
        assert!(HurstIndex::new(0.5).is_ok());
        assert!(HurstIndex::for_estimation(0.5).is_err());
        assert!(HurstIndex::for_estimation(0.3).is_ok());
    }

    #[test]
    fn single_step_paths() {
        let g = TimeGrid::new(1.0, 1).unwrap();
        for sampler in [
            simulate_fbm_cholesky(g, h(0.3), RngSeed(1)).unwrap(),
            simulate_fbm_circulant(g, h(0.3), RngSeed(1)).unwrap(),
        ] {
            assert_eq!(sampler.values().len(), 2);
            assert_eq!(sampler.values()[0], 0.0);
        }
    }

    #[test]
    fn fixed_seed_is_bit_identical() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        for hv in [0.3, 0.5, 0.7] {
            let a = simulate_fbm_circulant(g, h(hv), RngSeed(42)).unwrap();
            let b = simulate_fbm_circulant(g, h(hv), RngSeed(42)).unwrap();
            assert_eq!(a, b);
            let a = simulate_fbm_cholesky(g, h(hv), RngSeed(42)).unwrap();
            let b = simulate_fbm_cholesky(g, h(hv), RngSeed(42)).unwrap();
            assert_eq!(a, b);
            let c = simulate_fbm_cholesky(g, h(hv), RngSeed(43)).unwrap();
            assert_ne!(a, c);
        }
    }

    #[test]
    fn replicate_seeds_are_distinct() {
        let seeds: std::collections::HashSet<_> = (0..1000).map(|r| RngSeed::for_replicate(7, r)).collect();
        assert_eq!(seeds.len(), 1000);
        assert_eq!(RngSeed::for_replicate(7, 3), RngSeed::for_replicate(7, 3));
    }

    fn brownian_increment_variance(paths: impl Iterator<Item = SampledPath>, dt: f64) -> (f64, f64) {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0.0;
        for p in paths {
            for w in p.values().windows(2) {
                let d = w[1] - w[0];
                sum += d * d;
                sum_sq += d.powi(4);
                count += 1.0;
            }
        }
        let mean = sum / count;
        let var = sum_sq / count - mean * mean;
        // increments within a path are independent for H = 1/2
        (mean / dt, (var / count).sqrt() / dt)
    }

    #[test]
    fn brownian_increments_have_variance_dt() {
        let g = TimeGrid::new(2.0, 8).unwrap();
        let hurst = h(0.5);
        let chol = CholeskyFbm::new(g, hurst).unwrap();
        let circ = CirculantFbm::new(g, hurst).unwrap();
        let (m1, se1) = brownian_increment_variance((0..10_000).map(|r| chol.sample(RngSeed(r))), g.dt());
        let (m2, se2) = brownian_increment_variance((0..10_000).map(|r| circ.sample(RngSeed(r))), g.dt());
        assert!((m1 - 1.0).abs() < 4.0 * se1, "cholesky ratio {m1} se {se1}");
        assert!((m2 - 1.0).abs() < 4.0 * se2, "circulant ratio {m2} se {se2}");
    }

    #[test]
    fn terminal_variance_is_self_similar() {
        let g = TimeGrid::new(3.0, 32).unwrap();
        for hv in [0.3, 0.7] {
            let circ = CirculantFbm::new(g, h(hv)).unwrap();
            let m = 10_000;
            let xs: Vec<f64> = (0..m).map(|r| circ.sample(RngSeed(r as u64)).last()).collect();
            let second: f64 = xs.iter().map(|x| x * x).sum::<f64>() / m as f64;
            let fourth: f64 = xs.iter().map(|x| x.powi(4)).sum::<f64>() / m as f64;
            let se = ((fourth - second * second) / m as f64).sqrt();
            let target = 3.0_f64.powf(2.0 * hv);
            assert!((second - target).abs() < 3.0 * se, "H={hv}: {second} vs {target} (se {se})");
        }
    }
}
