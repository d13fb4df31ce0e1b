//! Small quadrature toolbox: Gauss–Legendre rules and tanh–sinh integration.

use std::f64::consts::{FRAC_PI_2, PI};

/// Gauss–Legendre rule with `n` points mapped to `[0, 1]`.
pub fn gauss_legendre_unit(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    let m = n.div_ceil(2);
    for i in 0..m {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        // map [-1, 1] -> [0, 1]
        nodes[i] = 0.5 * (1.0 - x);
        nodes[n - 1 - i] = 0.5 * (1.0 + x);
        weights[i] = 0.5 * w;
        weights[n - 1 - i] = 0.5 * w;
    }
    (nodes, weights)
}

/// Tanh–sinh quadrature of `f` over `[a, b]`.
///
/// Tolerates integrable algebraic or logarithmic singularities at either
/// endpoint; `f` is never evaluated at `a` or `b` themselves.
pub fn tanh_sinh(f: impl Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    tanh_sinh_with_gaps(|x, _, _| if x <= a || x >= b { 0.0 } else { f(x) }, a, b, tol)
}

/// Like [`tanh_sinh`], but `f(x, x - a, b - x)` also receives both endpoint
/// distances, computed without the cancellation of forming them from `x`.
pub fn tanh_sinh_with_gaps(f: impl Fn(f64, f64, f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    let half = 0.5 * (b - a);
    let eval = |t: f64| -> f64 {
        let u = FRAC_PI_2 * t.sinh();
        let cu = u.cosh();
        // distance from the nearer endpoint in the reference interval
        let d = 1.0 / (u.abs().exp() * cu);
        let w = FRAC_PI_2 * t.cosh() / (cu * cu);
        if w == 0.0 || d == 0.0 {
            return 0.0;
        }
        let gap = half * d;
        let (x, ga, gb) = if t >= 0.0 {
            (b - gap, 2.0 * half - gap, gap)
        } else {
            (a + gap, gap, 2.0 * half - gap)
        };
        if ga <= 0.0 || gb <= 0.0 {
            return 0.0;
        }
        w * f(x, ga, gb)
    };
    let tmax = 6.5;
    let mut h = 1.0;
    let mut sum = eval(0.0);
    let mut k = 1;
    while (k as f64) * h <= tmax {
        let t = k as f64 * h;
        sum += eval(t) + eval(-t);
        k += 1;
    }
    let mut estimate = half * h * sum;
    for _level in 0..12 {
        h *= 0.5;
        let mut add = 0.0;
        let mut k = 1;
        while (k as f64) * h <= tmax {
            let t = k as f64 * h;
            add += eval(t) + eval(-t);
            k += 2;
        }
        sum += add;
        let next = half * h * sum;
        let converged = (next - estimate).abs() <= tol * next.abs().max(1e-300);
        estimate = next;
        if converged {
            break;
        }
    }
    estimate
}
