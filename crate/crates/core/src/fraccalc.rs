//! Fractional Riemann–Liouville integrals and Weyl derivatives on a uniform
//! grid, by product integration against piecewise-linear data.
//!
//! Also hosts [`SingularKernelWeights`], the product-integration rule for
//! `∫_0^t s^p (t - s)^q g(s) ds` used by the likelihood and Fisher code.

use std::collections::HashMap;
use std::sync::{Arc, Mutex, OnceLock};

use statrs::function::beta::beta;
use statrs::function::gamma::gamma;

use crate::error::{Error, Result};
use crate::grid::{SampledPath, TimeGrid};
use crate::quad::gauss_legendre_unit;

/// Fractional order `alpha` in `(0, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub struct FracOrder(f64);

impl FracOrder {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::invalid(format!("fractional order must lie in (0, 1), got {alpha}")));
        }
        Ok(Self(alpha))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

/// `E_m(k) = ∫_0^1 (k - 1 + v)^e v^m dv` for `m ∈ {0, 1}` and `k ≥ 1`.
fn kernel_moment(e: f64, m: u8, k: usize) -> f64 {
    let kf = k as f64;
    if k == 1 {
        return 1.0 / (e + m as f64 + 1.0);
    }
    if k < 8 {
        let x0 = kf - 1.0;
        let e0 = (kf.powf(e + 1.0) - x0.powf(e + 1.0)) / (e + 1.0);
        if m == 0 {
            return e0;
        }
        return (kf.powf(e + 2.0) - x0.powf(e + 2.0)) / (e + 2.0) - x0 * e0;
    }
    // (k - 1 + v)^e = k^e (1 - (1 - v)/k)^e, expanded in 1/k
    let mut coef = 1.0;
    let mut sum = 0.0;
    for j in 0..80 {
        let jf = j as f64;
        let denom = if m == 0 { jf + 1.0 } else { (jf + 1.0) * (jf + 2.0) };
        let term = coef / denom;
        sum += term;
        if term.abs() < 1e-18 * sum.abs() {
            break;
        }
        coef *= -(e - jf) / ((jf + 1.0) * kf);
    }
    kf.powf(e) * sum
}

/// Toeplitz product-integration weights for the kernel `(k - 1 + v)^e`.
#[derive(Debug)]
struct ToeplitzWeights {
    /// weight of an interior node at lag `k = i - j`
    interior: Vec<f64>,
    /// weight of node 0 seen from node `k`
    origin: Vec<f64>,
    /// weight of node `i` on itself, finite only when `e > -1`
    diagonal: f64,
}

impl ToeplitzWeights {
    fn build(n: usize, e: f64) -> Self {
        let e0: Vec<f64> = (0..=n + 1)
            .map(|k| if k == 0 || (k == 1 && e <= -1.0) { 0.0 } else { kernel_moment(e, 0, k) })
            .collect();
        let e1: Vec<f64> = (0..=n + 1).map(|k| if k == 0 { 0.0 } else { kernel_moment(e, 1, k) }).collect();
        let mut interior = vec![0.0; n + 1];
        let mut origin = vec![0.0; n + 1];
        for k in 1..=n {
            interior[k] = e1[k] + e0[k + 1] - e1[k + 1];
            origin[k] = e1[k];
        }
        let diagonal = if e > -1.0 { e0[1] - e1[1] } else { f64::NAN };
        Self {
            interior,
            origin,
            diagonal,
        }
    }
}

type ToeplitzKey = (usize, u64);

fn toeplitz_weights(n: usize, e: f64) -> Arc<ToeplitzWeights> {
    static CACHE: OnceLock<Mutex<HashMap<ToeplitzKey, Arc<ToeplitzWeights>>>> = OnceLock::new();
    let cache = CACHE.get_or_init(Default::default);
    let key = (n, e.to_bits());
    if let Some(w) = cache.lock().expect("weight cache poisoned").get(&key) {
        return Arc::clone(w);
    }
    let w = Arc::new(ToeplitzWeights::build(n, e));
    cache
        .lock()
        .expect("weight cache poisoned")
        .entry(key)
        .or_insert(w)
        .clone()
}

fn check_right_endpoint(f: &SampledPath, b: f64) -> Result<()> {
    let t = f.grid().horizon();
    if (b - t).abs() > 1e-12 * t.max(1.0) {
        return Err(Error::GridMismatch(format!(
            "right endpoint b={b} must coincide with the grid horizon {t}"
        )));
    }
    Ok(())
}

/// `(I_{0+}^α f)(t_i)`, with `g(t_0) = 0`.
pub fn rl_integral_left(f: &SampledPath, alpha: FracOrder) -> Result<SampledPath> {
    let a = alpha.value();
    let grid = *f.grid();
    let n = grid.steps();
    let w = toeplitz_weights(n, a - 1.0);
    let fv = f.values();
    let scale = grid.dt().powf(a) / gamma(a);
    let mut out = vec![0.0; n + 1];
    for i in 1..=n {
        let mut acc = fv[0] * w.origin[i] + fv[i] * w.diagonal;
        for j in 1..i {
            acc += fv[j] * w.interior[i - j];
        }
        out[i] = scale * acc;
    }
    SampledPath::new(grid, out)
}

/// `(I_{b-}^α f)(t_i)` with `b = T`, so `g(t_n) = 0`.
pub fn rl_integral_right(f: &SampledPath, alpha: FracOrder, b: f64) -> Result<SampledPath> {
    check_right_endpoint(f, b)?;
    Ok(rl_integral_left(&f.reversed(), alpha)?.reversed())
}

/// Marchaud form of `(D_{0+}^α f)(t_i)`, with `g(t_0) = 0`.
pub fn weyl_left(f: &SampledPath, alpha: FracOrder) -> Result<SampledPath> {
    let a = alpha.value();
    let grid = *f.grid();
    let n = grid.steps();
    if n < 2 {
        return Err(Error::invalid("Weyl derivative needs at least two grid steps"));
    }
    let w = toeplitz_weights(n, -a - 1.0);
    let fv = f.values();
    let h = grid.dt();
    let g1a = gamma(1.0 - a);
    let mut out = vec![0.0; n + 1];
    for i in 1..=n {
        let fi = fv[i];
        let mut acc = (fi - fv[0]) * w.origin[i];
        for j in 1..i {
            acc += (fi - fv[j]) * w.interior[i - j];
        }
        out[i] = (fi * grid.t(i).powf(-a) + a * h.powf(-a) * acc) / g1a;
    }
    SampledPath::new(grid, out)
}

/// Marchaud form of `(D_{b-}^α f)(t_i)` with `b = T`, so `g(t_n) = 0`.
pub fn weyl_right(f: &SampledPath, alpha: FracOrder, b: f64) -> Result<SampledPath> {
    check_right_endpoint(f, b)?;
    Ok(weyl_left(&f.reversed(), alpha)?.reversed())
}

/// How a [`SingularKernelWeights`] rule treats the data near `s = t`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SingularMode {
    /// `∫_0^t s^p (t-s)^q g(s) ds` with `q > -1`
    Integrable,
    /// `∫_0^t s^p (t-s)^q (g(t) - g(s)) ds` with `-2 < q ≤ -1`
    Difference,
}

/// Product-integration weights for `s^p (t_i - s)^q` against piecewise-linear
/// data on a uniform grid, stored for unit spacing as a packed lower triangle.
#[derive(Debug)]
pub struct SingularKernelWeights {
    steps: usize,
    p: f64,
    q: f64,
    mode: SingularMode,
    rows: Vec<f64>,
}

/// `∫_0^1 u^{a} (1 - u/i)^c du` as a power series in `1/i`, for `i ≥ 2`.
fn edge_moment(a: f64, c: f64, i: usize) -> f64 {
    let x = 1.0 / i as f64;
    let mut coef = 1.0;
    let mut sum = 0.0;
    for k in 0..2000 {
        let kf = k as f64;
        let term = coef / (a + kf + 1.0);
        sum += term;
        if term.abs() < 1e-18 * sum.abs() {
            break;
        }
        coef *= -(c - kf) / (kf + 1.0) * x;
    }
    sum
}

#[inline]
fn row_offset(i: usize) -> usize {
    i * (i + 1) / 2
}

type SingularKey = (usize, u64, u64, SingularMode);

impl SingularKernelWeights {
    const GL_POINTS: usize = 10;

    pub fn new(steps: usize, p: f64, q: f64, mode: SingularMode) -> Result<Arc<Self>> {
        if steps == 0 {
            return Err(Error::invalid("singular weights need at least one step"));
        }
        if p <= -1.0 {
            return Err(Error::invalid(format!("s^p must be integrable at 0, got p={p}")));
        }
        match mode {
            SingularMode::Integrable if q <= -1.0 => {
                return Err(Error::invalid(format!("(t-s)^q must be integrable, got q={q}")))
            }
            SingularMode::Difference if !(q > -2.0 && q <= -1.0) => {
                return Err(Error::invalid(format!("difference mode needs q in (-2, -1], got q={q}")))
            }
            _ => {}
        }
        static CACHE: OnceLock<Mutex<HashMap<SingularKey, Arc<SingularKernelWeights>>>> = OnceLock::new();
        let cache = CACHE.get_or_init(Default::default);
        let key = (steps, p.to_bits(), q.to_bits(), mode);
        if let Some(w) = cache.lock().expect("weight cache poisoned").get(&key) {
            return Ok(Arc::clone(w));
        }
        let w = Arc::new(Self::build(steps, p, q, mode));
        Ok(cache
            .lock()
            .expect("weight cache poisoned")
            .entry(key)
            .or_insert(w)
            .clone())
    }

    /// Builds the weights without consulting the shared cache.
    pub fn build_uncached(steps: usize, p: f64, q: f64, mode: SingularMode) -> Self {
        Self::build(steps, p, q, mode)
    }

    fn build(n: usize, p: f64, q: f64, mode: SingularMode) -> Self {
        let (x, wgl) = gauss_legendre_unit(Self::GL_POINTS);
        let ng = x.len();
        // s^p at the Gauss nodes of cell j, and (k - v)^q at lag k
        let mut sp = vec![0.0; (n + 1) * ng];
        let mut tq = vec![0.0; (n + 1) * ng];
        for j in 1..n {
            for g in 0..ng {
                sp[j * ng + g] = (j as f64 + x[g]).powf(p) * wgl[g];
            }
        }
        for k in 2..=n {
            for g in 0..ng {
                tq[k * ng + g] = (k as f64 - x[g]).powf(q);
            }
        }
        let mut rows = vec![0.0; row_offset(n + 1)];
        let mut m0 = vec![0.0; n];
        let mut m1 = vec![0.0; n];
        for i in 1..=n {
            let row = &mut rows[row_offset(i)..row_offset(i) + i + 1];
            if i == 1 {
                match mode {
                    SingularMode::Integrable => {
                        let b0 = beta(p + 1.0, q + 1.0);
                        let b1 = beta(p + 2.0, q + 1.0);
                        row[0] = b0 - b1;
                        row[1] = b1;
                    }
                    SingularMode::Difference => row[0] = beta(p + 1.0, q + 2.0),
                }
                continue;
            }
            let fi = i as f64;
            // first cell: s = u, t - s = i (1 - u/i)
            let iq = fi.powf(q);
            m0[0] = iq * edge_moment(p, q, i);
            m1[0] = iq * edge_moment(p + 1.0, q, i);
            for j in 1..i - 1 {
                let (mut a0, mut a1) = (0.0, 0.0);
                let spj = &sp[j * ng..(j + 1) * ng];
                let tqk = &tq[(i - j) * ng..(i - j + 1) * ng];
                for g in 0..ng {
                    let v = spj[g] * tqk[g];
                    a0 += v;
                    a1 += v * x[g];
                }
                m0[j] = a0;
                m1[j] = a1;
            }
            // last cell in w = 1 - v: s = i (1 - w/i), t - s = w
            let ip = fi.powf(p);
            let last_w1 = ip * edge_moment(q + 1.0, p, i);
            match mode {
                SingularMode::Integrable => {
                    let last_w0 = ip * edge_moment(q, p, i);
                    m0[i - 1] = last_w0;
                    m1[i - 1] = last_w0 - last_w1;
                    for j in 0..i {
                        row[j] += m0[j] - m1[j];
                        row[j + 1] += m1[j];
                    }
                }
                SingularMode::Difference => {
                    for j in 0..i - 1 {
                        row[j] += m0[j] - m1[j];
                        row[j + 1] += m1[j];
                    }
                    row[i - 1] += last_w1;
                }
            }
        }
        Self {
            steps: n,
            p,
            q,
            mode,
            rows,
        }
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn mode(&self) -> SingularMode {
        self.mode
    }

    /// Unit-spacing weights of node `i` (entries `j = 0..=i`).
    pub fn row(&self, i: usize) -> &[f64] {
        &self.rows[row_offset(i)..row_offset(i) + i + 1]
    }

    /// Applies the rule to nodal data `g` on a grid with spacing `h`; entry 0 is 0.
    pub fn apply(&self, g: &[f64], h: f64) -> Vec<f64> {
        let mut out = vec![0.0; self.steps + 1];
        self.apply_into(g, h, &mut out);
        out
    }

    pub fn apply_into(&self, g: &[f64], h: f64, out: &mut [f64]) {
        assert_eq!(g.len(), self.steps + 1, "data length must match the weight table");
        assert_eq!(out.len(), self.steps + 1);
        let scale = h.powf(self.p + self.q + 1.0);
        out[0] = 0.0;
        for i in 1..=self.steps {
            let row = self.row(i);
            let acc = match self.mode {
                SingularMode::Integrable => row.iter().zip(&g[..=i]).map(|(w, v)| w * v).sum::<f64>(),
                SingularMode::Difference => {
                    let gi = g[i];
                    row[..i].iter().zip(&g[..i]).map(|(w, v)| w * (gi - v)).sum::<f64>()
                }
            };
            out[i] = scale * acc;
        }
    }
}

/// `∫_0^T t^γ u(t) dt` for `γ > -1`, with `u` piecewise linear through the
/// nodal values (entry 0 is the limit of `u` at `t → 0`).
pub fn power_weighted_integral(grid: &TimeGrid, gamma_exp: f64, values: &[f64]) -> Result<f64> {
    if gamma_exp <= -1.0 {
        return Err(Error::invalid(format!("t^γ must be integrable at 0, got γ={gamma_exp}")));
    }
    let n = grid.steps();
    if values.len() != n + 1 {
        return Err(Error::GridMismatch(format!("expected {} values, got {}", n + 1, values.len())));
    }
    let (x, w) = gauss_legendre_unit(SingularKernelWeights::GL_POINTS);
    let mut acc = 0.0;
    for j in 0..n {
        let (c0, c1) = if j == 0 {
            let c1 = 1.0 / (gamma_exp + 2.0);
            (1.0 / (gamma_exp + 1.0) - c1, c1)
        } else {
            let (mut a0, mut a1) = (0.0, 0.0);
            for g in 0..x.len() {
                let v = w[g] * (j as f64 + x[g]).powf(gamma_exp);
                a0 += v;
                a1 += v * x[g];
            }
            (a0 - a1, a1)
        };
        acc += c0 * values[j] + c1 * values[j + 1];
    }
    Ok(acc * grid.dt().powf(gamma_exp + 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quad::tanh_sinh;
    use std::f64::consts::FRAC_2_SQRT_PI;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn path(n: usize, f: impl Fn(f64) -> f64) -> SampledPath {
        SampledPath::from_fn(TimeGrid::new(1.0, n).unwrap(), f).unwrap()
    }

    fn ord(a: f64) -> FracOrder {
        FracOrder::new(a).unwrap()
    }

    fn max_rel_err_tail(got: &SampledPath, exact: impl Fn(f64) -> f64, from: f64, to: f64) -> f64 {
        let g = got.grid();
        (0..=g.steps())
            .filter(|&i| g.t(i) >= from - 1e-12 && g.t(i) <= to + 1e-12)
            .map(|i| {
                let e = exact(g.t(i));
                (got.values()[i] - e).abs() / e.abs()
            })
            .fold(0.0, f64::max)
    }

    #[test]
    fn moments_match_closed_forms() {
        for &e in &[-0.8, -1.3, -0.55, 0.4] {
            for k in [2usize, 7, 8, 9, 50, 1000] {
                let kf = k as f64;
                let ex0 = tanh_sinh(|v| (kf - 1.0 + v).powf(e), 0.0, 1.0, 1e-15);
                let ex1 = tanh_sinh(|v| (kf - 1.0 + v).powf(e) * v, 0.0, 1.0, 1e-15);
                assert_relative_eq!(kernel_moment(e, 0, k), ex0, max_relative = 1e-12);
                assert_relative_eq!(kernel_moment(e, 1, k), ex1, max_relative = 1e-12);
            }
        }
    }

    #[test]
    fn rl_of_constant() {
        // 1/Γ(3/2) = 2/√π
        let g = rl_integral_left(&path(256, |_| 1.0), ord(0.5)).unwrap();
        assert_relative_eq!(g.last(), FRAC_2_SQRT_PI, max_relative = 1e-12);
        assert_eq!(g.values()[0], 0.0);
        let g = rl_integral_right(&path(256, |_| 1.0), ord(0.5), 1.0).unwrap();
        assert_relative_eq!(g.values()[0], FRAC_2_SQRT_PI, max_relative = 1e-12);
        assert_eq!(g.last(), 0.0);
    }

    #[test]
    fn rl_of_power() {
        // Γ(1.3)/Γ(1.5)
        let g = rl_integral_left(&path(4096, |t| t.powf(0.3)), ord(0.2)).unwrap();
        assert_relative_eq!(g.last(), 1.012687236790706759, max_relative = 1e-5);
    }

    #[test]
    fn zero_maps_to_zero() {
        let z = path(64, |_| 0.0);
        for g in [
            rl_integral_left(&z, ord(0.3)).unwrap(),
            rl_integral_right(&z, ord(0.3), 1.0).unwrap(),
            weyl_left(&z, ord(0.3)).unwrap(),
            weyl_right(&z, ord(0.3), 1.0).unwrap(),
        ] {
            assert!(g.values().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn weyl_of_power_and_constant() {
        // Γ(1.8)/Γ(1.5)
        let g = weyl_left(&path(4096, |t| t.powf(0.8)), ord(0.3)).unwrap();
        assert_relative_eq!(g.last(), 1.050954043744963905, max_relative = 1e-4);
        // 1/Γ(0.5)
        let g = weyl_left(&path(16, |_| 1.0), ord(0.5)).unwrap();
        assert_relative_eq!(g.last(), 0.564189583547756287, max_relative = 1e-12);
        let g = weyl_right(&path(16, |_| 1.0), ord(0.5), 1.0).unwrap();
        assert_relative_eq!(g.values()[0], 0.564189583547756287, max_relative = 1e-12);
        assert_relative_eq!(g.values()[12], (0.25f64).powf(-0.5) * 0.564189583547756287, max_relative = 1e-12);
    }

    #[test]
    fn right_endpoint_must_be_horizon() {
        let f = path(8, |t| t);
        assert!(rl_integral_right(&f, ord(0.3), 0.5).is_err());
        assert!(weyl_right(&f, ord(0.3), 2.0).is_err());
        assert!(weyl_left(&path(1, |t| t), ord(0.3)).is_err());
    }

    #[test]
    fn reflection() {
        let f = path(200, |t| (3.0 * t).sin() + t * t);
        let fr = path(200, |t| (3.0 * (1.0 - t)).sin() + (1.0 - t) * (1.0 - t));
        let a = rl_integral_right(&f, ord(0.35), 1.0).unwrap();
        let b = rl_integral_left(&fr, ord(0.35)).unwrap().reversed();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_relative_eq!(x, y, epsilon = 1e-14);
        }
        let a = weyl_right(&f, ord(0.35), 1.0).unwrap();
        let b = weyl_left(&fr, ord(0.35)).unwrap().reversed();
        for (x, y) in a.values().iter().zip(b.values()) {
            assert_relative_eq!(x, y, epsilon = 1e-12);
        }
    }

    #[test]
    fn weyl_inverts_rl_away_from_origin() {
        let f = |t: f64| 1.0 + t + (2.0 * t).sin();
        for a in [0.2, 0.45] {
            let fp = path(2048, f);
            let left = weyl_left(&rl_integral_left(&fp, ord(a)).unwrap(), ord(a)).unwrap();
            let right = weyl_right(&rl_integral_right(&fp, ord(a), 1.0).unwrap(), ord(a), 1.0).unwrap();
            let g = *fp.grid();
            for i in (256..=1792).step_by(64) {
                assert!((left.values()[i] - f(g.t(i))).abs() < 2e-3, "left a={a} i={i}");
                assert!((right.values()[i] - f(g.t(i))).abs() < 2e-3, "right a={a} i={i}");
            }
        }
    }

    #[test]
    fn first_order_convergence() {
        // rl and weyl of t^{0.8}: error must at least halve when n doubles
        let exact_rl = |t: f64| gamma(1.8) / gamma(2.1) * t.powf(1.1);
        let exact_d = |t: f64| gamma(1.8) / gamma(1.5) * t.powf(0.5);
        let mut prev = (f64::NAN, f64::NAN);
        for n in [128, 256, 512] {
            let f = path(n, |t| t.powf(0.8));
            let e1 = max_rel_err_tail(&rl_integral_left(&f, ord(0.3)).unwrap(), exact_rl, 0.125, 1.0);
            let e2 = max_rel_err_tail(&weyl_left(&f, ord(0.3)).unwrap(), exact_d, 0.125, 1.0);
            if prev.0.is_finite() {
                assert!(e1 <= prev.0 / 1.9, "rl {e1} vs {}", prev.0);
                assert!(e2 <= prev.1 / 1.9, "weyl {e2} vs {}", prev.1);
            }
            prev = (e1, e2);
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn operators_are_linear(a in 0.05f64..0.95, ca in -3.0f64..3.0, cb in -3.0f64..3.0, w in 0.5f64..6.0) {
            let n = 64;
            let f = path(n, |t| (w * t).cos());
            let g = path(n, |t| t * t - t);
            let combo = path(n, |t| ca * (w * t).cos() + cb * (t * t - t));
            type Op = fn(&SampledPath, FracOrder) -> Result<SampledPath>;
            let ops: [Op; 4] = [
                rl_integral_left,
                weyl_left,
                |f, a| rl_integral_right(f, a, 1.0),
                |f, a| weyl_right(f, a, 1.0),
            ];
            for op in ops {
                let lhs = op(&combo, ord(a)).unwrap();
                let rf = op(&f, ord(a)).unwrap();
                let rg = op(&g, ord(a)).unwrap();
                for i in 0..=n {
                    let rhs = ca * rf.values()[i] + cb * rg.values()[i];
                    prop_assert!((lhs.values()[i] - rhs).abs() <= 1e-11 * (1.0 + rhs.abs() + rf.values()[i].abs() + rg.values()[i].abs()));
                }
            }
        }
    }

    /// `∫_0^t F(s, t - s) ds` with both endpoint distances passed exactly.
    fn split_at_midpoint(f: impl Fn(f64, f64) -> f64, t: f64) -> f64 {
        let half = 0.5 * t;
        tanh_sinh(|s| f(s, t - s), 0.0, half, 1e-14) + tanh_sinh(|w| f(t - w, w), 0.0, half, 1e-14)
    }

    #[test]
    fn singular_integrable_weights_on_constants_and_smooth_data() {
        let (p, q) = (0.2, -0.8);
        let n = 256;
        let w = SingularKernelWeights::new(n, p, q, SingularMode::Integrable).unwrap();
        let g = TimeGrid::new(2.0, n).unwrap();
        let ones = vec![1.0; n + 1];
        let out = w.apply(&ones, g.dt());
        for i in [1, 2, 3, 17, 256] {
            let exact = g.t(i).powf(p + q + 1.0) * beta(p + 1.0, q + 1.0);
            assert_relative_eq!(out[i], exact, max_relative = 1e-11);
        }
        let data: Vec<f64> = g.nodes().iter().map(|t| (1.3 * t).sin()).collect();
        let out = w.apply(&data, g.dt());
        for i in [64, 200, 256] {
            let t = g.t(i);
            let exact = split_at_midpoint(|s, w| s.powf(p) * w.powf(q) * (1.3 * s).sin(), t);
            assert_relative_eq!(out[i], exact, max_relative = 1e-5);
        }
    }

    #[test]
    fn singular_difference_weights_on_linear_and_smooth_data() {
        let (p, q) = (-0.2, -1.2);
        let n = 256;
        let w = SingularKernelWeights::new(n, p, q, SingularMode::Difference).unwrap();
        let g = TimeGrid::new(1.5, n).unwrap();
        // linear data is reproduced exactly: ∫ s^p (t-s)^{q+1} ds
        let out = w.apply(&g.nodes(), g.dt());
        for i in [1, 2, 3, 100, 256] {
            let exact = g.t(i).powf(p + q + 2.0) * beta(p + 1.0, q + 2.0);
            assert_relative_eq!(out[i], exact, max_relative = 1e-11);
        }
        let f = |s: f64| (2.0 * s).cos();
        let data: Vec<f64> = g.nodes().iter().map(|&t| f(t)).collect();
        let out = w.apply(&data, g.dt());
        for i in [128, 256] {
            let t = g.t(i);
            // cos 2t - cos 2s = -2 sin(t + s) sin(t - s)
            let exact = split_at_midpoint(
                |s, w| -2.0 * s.powf(p) * w.powf(q + 1.0) * (t + s).sin() * (w.sin() / w),
                t,
            );
            assert_relative_eq!(out[i], exact, max_relative = 1e-4);
        }
    }

    #[test]
    fn singular_weights_cache_is_transparent() {
        let a = SingularKernelWeights::new(40, 0.3, -0.7, SingularMode::Integrable).unwrap();
        let b = SingularKernelWeights::build_uncached(40, 0.3, -0.7, SingularMode::Integrable);
        assert_eq!(a.rows, b.rows);
        assert!(SingularKernelWeights::new(40, 0.3, -1.2, SingularMode::Integrable).is_err());
        assert!(SingularKernelWeights::new(40, -0.3, -0.7, SingularMode::Difference).is_err());
    }

    #[test]
    fn power_weighted_integral_is_exact_for_linear_data() {
        let g = TimeGrid::new(2.0, 50).unwrap();
        let vals: Vec<f64> = g.nodes().iter().map(|t| 1.0 + 3.0 * t).collect();
        let gam = -0.4;
        let exact = 2.0f64.powf(gam + 1.0) / (gam + 1.0) + 3.0 * 2.0f64.powf(gam + 2.0) / (gam + 2.0);
        assert_relative_eq!(power_weighted_integral(&g, gam, &vals).unwrap(), exact, max_relative = 1e-12);
        assert!(power_weighted_integral(&g, -1.0, &vals).is_err());
    }
}
