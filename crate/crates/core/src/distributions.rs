//! Elementary stochastic kernels: standard normal functions, the standardized
//! skew-normal quantile, and α-stable sampling by Chambers–Mallows–Stuck.

use std::f64::consts::{FRAC_PI_2, PI, SQRT_2};
use std::sync::OnceLock;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};

/// ln √(2π)
pub const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
/// 1/√(2π)
pub const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

#[inline]
pub fn normal_logpdf(x: f64) -> f64 {
    -LN_SQRT_2PI - 0.5 * x * x
}

/// Φ(x), accurate in both tails.
#[inline]
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * libm::erfc(-x / SQRT_2)
}

/// 1 − Φ(x) without cancellation.
#[inline]
pub fn normal_sf(x: f64) -> f64 {
    0.5 * libm::erfc(x / SQRT_2)
}

/// Φ⁻¹(p) for p ∈ (0,1).
pub fn normal_quantile(p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!("normal quantile needs p in (0,1), got {p}")));
    }
    Ok(normal_quantile_unchecked(p))
}

pub(crate) fn normal_quantile_unchecked(p: f64) -> f64 {
    // Work in the lower tail and mirror; start from the Hastings rational
    // approximation and polish with Halley steps on erfc.
    let (q, sign) = if p < 0.5 { (p, -1.0) } else { (1.0 - p, 1.0) };
    if q == 0.5 {
        return 0.0;
    }
    let t = (-2.0 * q.ln()).sqrt();
    let mut x = -(t
        - (2.515_517 + 0.802_853 * t + 0.010_328 * t * t)
            / (1.0 + 1.432_788 * t + 0.189_269 * t * t + 0.001_308 * t * t * t));
    for _ in 0..3 {
        let e = normal_cdf(x) - q;
        let u = e * (2.0 * PI).sqrt() * (0.5 * x * x).exp();
        x -= u / (1.0 + 0.5 * x * u);
    }
    sign * -x
}

/// Gauss–Legendre nodes and weights on [-1, 1].
fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        let mut x = (PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let p2 = ((2 * k - 1) as f64 * x * p1 - (k - 1) as f64 * p0) / k as f64;
                p0 = p1;
                p1 = p2;
            }
            dp = n as f64 * (x * p1 - p0) / (x * x - 1.0);
            let dx = p1 / dp;
            x -= dx;
            if dx.abs() < 1e-16 {
                break;
            }
        }
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        let w = 2.0 / ((1.0 - x * x) * dp * dp);
        weights[i] = w;
        weights[n - 1 - i] = w;
    }
    (nodes, weights)
}

fn gl20() -> &'static (Vec<f64>, Vec<f64>) {
    static GL: OnceLock<(Vec<f64>, Vec<f64>)> = OnceLock::new();
    GL.get_or_init(|| gauss_legendre(20))
}

/// Owen's T function T(h, a) = (1/2π) ∫₀ᵃ exp(−h²(1+x²)/2) / (1+x²) dx.
pub fn owens_t(h: f64, a: f64) -> f64 {
    if a < 0.0 {
        return -owens_t(h, -a);
    }
    let h = h.abs();
    if a == 0.0 {
        return 0.0;
    }
    if a > 1.0 {
        // T(h,a) + T(ah,1/a) = ½Q(h) + ½Q(ah) − Q(h)Q(ah) for h ≥ 0, Q = 1 − Φ.
        let ah = a * h;
        let (qh, qa) = (normal_sf(h), normal_sf(ah));
        return 0.5 * qh + 0.5 * qa - qh * qa - owens_t(ah, 1.0 / a);
    }
    let (nodes, weights) = gl20();
    let panels = ((a * h.max(1.0) * 2.0).ceil() as usize).clamp(1, 64);
    let width = a / panels as f64;
    let h2 = 0.5 * h * h;
    let mut acc = 0.0;
    for k in 0..panels {
        let mid = (k as f64 + 0.5) * width;
        for (x, w) in nodes.iter().zip(weights) {
            let t = mid + 0.5 * width * x;
            let s = 1.0 + t * t;
            acc += w * (-h2 * s).exp() / s;
        }
    }
    acc * 0.5 * width / (2.0 * PI)
}

/// Skew-normal law with shape γ, shifted and scaled to mean 0 and variance 1.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StandardizedSkewNormal {
    shape: f64,
    delta: f64,
    /// Mean of the unstandardized SN(0,1,γ) variate.
    raw_mean: f64,
    /// Standard deviation of the unstandardized variate.
    raw_sd: f64,
}

impl StandardizedSkewNormal {
    pub fn new(shape: f64) -> Result<Self> {
        if !shape.is_finite() {
            return Err(Error::domain("skew-normal shape must be finite"));
        }
        let delta = shape / (1.0 + shape * shape).sqrt();
        let raw_mean = delta * (2.0 / PI).sqrt();
        let raw_sd = (1.0 - 2.0 * delta * delta / PI).sqrt();
        Ok(Self {
            shape,
            delta,
            raw_mean,
            raw_sd,
        })
    }

    pub fn shape(&self) -> f64 {
        self.shape
    }

    fn raw(&self, x: f64) -> f64 {
        self.raw_mean + self.raw_sd * x
    }

    pub fn pdf(&self, x: f64) -> f64 {
        let z = self.raw(x);
        self.raw_sd * 2.0 * normal_pdf(z) * normal_cdf(self.shape * z)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let z = self.raw(x);
        (normal_cdf(z) - 2.0 * owens_t(z, self.shape)).clamp(0.0, 1.0)
    }

    /// Closed-form skewness of the law.
    pub fn skewness(&self) -> f64 {
        (4.0 - PI) / 2.0 * self.raw_mean.powi(3) / self.raw_sd.powi(3)
    }

    /// D⁻¹(p) by safeguarded Newton iteration inside a bisection bracket.
    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain(format!("skew-normal quantile needs p in (0,1), got {p}")));
        }
        if self.shape == 0.0 {
            return Ok(normal_quantile_unchecked(p));
        }
        let mut x = normal_quantile_unchecked(p);
        let (mut lo, mut hi) = (x - 1.0, x + 1.0);
        while self.cdf(lo) > p {
            lo -= 2.0 * (x - lo);
        }
        while self.cdf(hi) < p {
            hi += 2.0 * (hi - x);
        }
        for _ in 0..200 {
            let f = self.cdf(x) - p;
            if f.abs() < 1e-13 {
                break;
            }
            if f > 0.0 {
                hi = x;
            } else {
                lo = x;
            }
            if hi - lo < 1e-12 {
                break;
            }
            let d = self.pdf(x);
            let step = x - f / d;
            x = if d > 0.0 && step > lo && step < hi {
                step
            } else {
                0.5 * (lo + hi)
            };
        }
        Ok(x)
    }

    /// Direct draw via the |U₀|-mixture representation (used as an oracle).
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let u0: f64 = rng.sample(StandardNormal);
        let u1: f64 = rng.sample(StandardNormal);
        let z = self.delta * u0.abs() + (1.0 - self.delta * self.delta).sqrt() * u1;
        (z - self.raw_mean) / self.raw_sd
    }
}

/// D⁻¹(p) for the standardized skew-normal with shape `gamma`.
pub fn skew_normal_quantile(p: f64, gamma: f64) -> Result<f64> {
    StandardizedSkewNormal::new(gamma)?.quantile(p)
}

/// α-stable law S(α, β, 1, 0) in the 1-parametrization, restricted to α ∈ (1, 2].
///
/// In this parametrization the location equals the mean for α > 1, and α = 2
/// gives N(0, 2).
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Stable {
    alpha: f64,
    beta: f64,
    shift: f64,
    scale: f64,
}

impl Stable {
    pub fn new(alpha: f64, beta: f64) -> Result<Self> {
        if !(alpha > 1.0 && alpha <= 2.0) {
            return Err(Error::domain(format!("stable tail index must lie in (1, 2], got {alpha}")));
        }
        if !(-1.0..=1.0).contains(&beta) {
            return Err(Error::domain(format!("stable skewness must lie in [-1, 1], got {beta}")));
        }
        let zeta = beta * (FRAC_PI_2 * alpha).tan();
        Ok(Self {
            alpha,
            beta,
            shift: zeta.atan() / alpha,
            scale: (1.0 + zeta * zeta).powf(0.5 / alpha),
        })
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    /// Characteristic function exponent: ln E[e^{itX}] = −|t|^α (1 − iβ sign(t) tan(πα/2)).
    pub fn log_char_fn(&self, t: f64) -> (f64, f64) {
        let m = t.abs().powf(self.alpha);
        (-m, m * self.beta * t.signum() * (FRAC_PI_2 * self.alpha).tan())
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        let v = loop {
            let u: f64 = rng.random();
            if u > 0.0 {
                break PI * (u - 0.5);
            }
        };
        let w = -(1.0 - rng.random::<f64>()).ln();
        let a = self.alpha;
        let arg = a * (v + self.shift);
        self.scale * arg.sin() / v.cos().powf(1.0 / a)
            * ((v - arg).cos() / w).powf((1.0 - a) / a)
    }
}

impl Distribution<f64> for Stable {
    fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        Stable::sample(self, rng)
    }
}

/// One draw from S(α, β, 1, 0).
pub fn stable_sample<R: Rng + ?Sized>(alpha: f64, beta_skew: f64, rng: &mut R) -> Result<f64> {
    Ok(Stable::new(alpha, beta_skew)?.sample(rng))
}
