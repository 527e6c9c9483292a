//! Oracles shared by the integration tests. Nothing here calls into the
//! library's numerical kernels.

#![allow(dead_code)]

use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};

/// Adaptive Simpson quadrature.
pub fn integrate(f: &dyn Fn(f64) -> f64, a: f64, b: f64, tol: f64) -> f64 {
    fn step(f: &dyn Fn(f64) -> f64, a: f64, b: f64, fa: f64, fm: f64, fb: f64, whole: f64, tol: f64, depth: u32) -> f64 {
        let m = 0.5 * (a + b);
        let (lm, rm) = (0.5 * (a + m), 0.5 * (m + b));
        let (flm, frm) = (f(lm), f(rm));
        let left = (m - a) / 6.0 * (fa + 4.0 * flm + fm);
        let right = (b - m) / 6.0 * (fm + 4.0 * frm + fb);
        let delta = left + right - whole;
        if depth == 0 || delta.abs() <= 15.0 * tol {
            left + right + delta / 15.0
        } else {
            step(f, a, m, fa, flm, fm, left, 0.5 * tol, depth - 1) + step(f, m, b, fm, frm, fb, right, 0.5 * tol, depth - 1)
        }
    }
    // Fixed panels first so narrow features are not skipped.
    let panels = 64;
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| {
            let (x0, x1) = (a + i as f64 * h, a + (i + 1) as f64 * h);
            let (f0, fm, f1) = (f(x0), f(0.5 * (x0 + x1)), f(x1));
            step(f, x0, x1, f0, fm, f1, h / 6.0 * (f0 + 4.0 * fm + f1), tol / panels as f64, 40)
        })
        .sum()
}

pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// `−∫ (F(x) − 1{x ≥ y})² dx` over `[lo, hi]` widened to contain `y`; `F`
/// must be negligible below `lo` and near one above `hi`.
pub fn crps_by_quadrature(cdf: &dyn Fn(f64) -> f64, y: f64, lo: f64, hi: f64) -> f64 {
    let (lo, hi) = (lo.min(y), hi.max(y));
    let lower = integrate(&|x| cdf(x).powi(2), lo, y, 1e-12);
    let upper = integrate(&|x| (1.0 - cdf(x)).powi(2), y, hi, 1e-12);
    -(lower + upper)
}

pub fn mixture_cdf(means: &[f64], vars: &[f64], x: f64) -> f64 {
    means.iter().zip(vars).map(|(m, v)| normal_cdf((x - m) / v.sqrt())).sum::<f64>() / means.len() as f64
}

fn stable_cutoff(alpha: f64) -> f64 {
    42f64.powf(1.0 / alpha)
}

/// CDF of S(α, β, 1, 0) (1-parametrization, α > 1) by Gil-Pelaez inversion of
/// the characteristic function.
pub fn stable_cdf(alpha: f64, beta: f64, x: f64) -> f64 {
    let k = beta * (FRAC_PI_2 * alpha).tan();
    let g = |t: f64| {
        if t == 0.0 {
            -x
        } else {
            let m = t.powf(alpha);
            (-m).exp() * (k * m - t * x).sin() / t
        }
    };
    0.5 - integrate(&g, 0.0, stable_cutoff(alpha), 1e-11) / PI
}

pub fn stable_pdf(alpha: f64, beta: f64, x: f64) -> f64 {
    let k = beta * (FRAC_PI_2 * alpha).tan();
    let g = |t: f64| {
        let m = t.powf(alpha);
        (-m).exp() * (k * m - t * x).cos()
    };
    integrate(&g, 0.0, stable_cutoff(alpha), 1e-11) / PI
}

pub fn stable_quantile(alpha: f64, beta: f64, p: f64) -> f64 {
    let (mut lo, mut hi) = (-60.0, 60.0);
    for _ in 0..80 {
        let mid = 0.5 * (lo + hi);
        if stable_cdf(alpha, beta, mid) < p {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

/// Type-7 sample quantile of sorted data.
pub fn sample_quantile(sorted: &[f64], p: f64) -> f64 {
    let h = (sorted.len() - 1) as f64 * p;
    let i = h.floor() as usize;
    let j = (i + 1).min(sorted.len() - 1);
    sorted[i] + (h - i as f64) * (sorted[j] - sorted[i])
}

/// Median of per-seed ranks.
pub fn median(mut v: Vec<usize>) -> usize {
    v.sort_unstable();
    v[v.len() / 2]
}
