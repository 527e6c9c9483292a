//! State space models for log-volatility.
//!
//! Three models are provided:
//!
//! * Gaussian SV: `y_t = μ + exp(α_t/2) e_t`, `α_t = h̄ + φ(α_{t−1} − h̄) + σ_α w_t`,
//!   started from its stationary law. This is the assumed model of the simulation
//!   designs and the first data generating process.
//! * Skew-copula SV: a Gaussian SV latent `z_t` whose marginal is mapped onto a
//!   standardized skew-normal through its (simulated) marginal CDF. Used only as a
//!   data generating process.
//! * Stable SV: `y_t = exp(h_t/2) e_t`, `h_t = ω + φ h_{t−1} + σ_h η_t` with
//!   `η_t ~ S(α, −1, 1, 0)`.
//!
//! Every simulator draws its randomness in a fixed order (state, then measurement
//! noise, per step) so that a path can be rebuilt step by step from
//! [`sv_transition_sample`].

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::distributions::{Stable, StandardizedSkewNormal, LN_SQRT_2PI};
use crate::error::{Error, Result};

/// Steps discarded before recording when a model has no closed-form initial law.
pub const BURN_IN: usize = 200;

/// Skewness of the stable state innovations.
pub const STABLE_SKEW: f64 = -1.0;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SvGaussianParams {
    pub phi: f64,
    pub sigma_alpha: f64,
    pub mu: f64,
    pub h_bar: f64,
}

impl SvGaussianParams {
    pub fn new(phi: f64, sigma_alpha: f64, mu: f64, h_bar: f64) -> Result<Self> {
        let p = Self {
            phi,
            sigma_alpha,
            mu,
            h_bar,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.phi.abs() < 1.0) {
            return Err(Error::domain(format!("SV persistence must satisfy |phi| < 1, got {}", self.phi)));
        }
        if !(self.sigma_alpha > 0.0 && self.sigma_alpha.is_finite()) {
            return Err(Error::domain(format!("SV state sd must be positive, got {}", self.sigma_alpha)));
        }
        if !(self.mu.is_finite() && self.h_bar.is_finite()) {
            return Err(Error::domain("SV mean and level must be finite"));
        }
        Ok(())
    }

    pub fn stationary_variance(&self) -> f64 {
        self.sigma_alpha * self.sigma_alpha / (1.0 - self.phi * self.phi)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SkewSvParams {
    pub a: f64,
    pub h_bar: f64,
    pub sigma_h: f64,
    pub gamma: f64,
}

impl SkewSvParams {
    pub fn new(a: f64, h_bar: f64, sigma_h: f64, gamma: f64) -> Result<Self> {
        if !(a.abs() < 1.0) {
            return Err(Error::domain(format!("skew-SV persistence must satisfy |a| < 1, got {a}")));
        }
        if !(sigma_h > 0.0 && sigma_h.is_finite()) {
            return Err(Error::domain(format!("skew-SV state sd must be positive, got {sigma_h}")));
        }
        if !(h_bar.is_finite() && gamma.is_finite()) {
            return Err(Error::domain("skew-SV level and shape must be finite"));
        }
        Ok(Self {
            a,
            h_bar,
            sigma_h,
            gamma,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StableSvParams {
    pub omega: f64,
    pub phi: f64,
    pub sigma_h: f64,
    pub alpha: f64,
}

impl StableSvParams {
    pub fn new(omega: f64, phi: f64, sigma_h: f64, alpha: f64) -> Result<Self> {
        let p = Self {
            omega,
            phi,
            sigma_h,
            alpha,
        };
        p.validate()?;
        Ok(p)
    }

    /// α = 2 is admitted so the Gaussian reduction can be exercised.
    pub fn validate(&self) -> Result<()> {
        if !(self.phi.abs() < 1.0) {
            return Err(Error::domain(format!("stable-SV persistence must satisfy |phi| < 1, got {}", self.phi)));
        }
        if !(self.sigma_h > 0.0 && self.sigma_h.is_finite()) {
            return Err(Error::domain(format!("stable-SV scale must be positive, got {}", self.sigma_h)));
        }
        if !(self.alpha > 1.0 && self.alpha <= 2.0) {
            return Err(Error::domain(format!("stable-SV tail index must lie in (1, 2], got {}", self.alpha)));
        }
        if !self.omega.is_finite() {
            return Err(Error::domain("stable-SV intercept must be finite"));
        }
        Ok(())
    }

    pub fn fixed_point(&self) -> f64 {
        self.omega / (1.0 - self.phi)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct SimulatedPath {
    pub states: Vec<f64>,
    pub observations: Vec<f64>,
}

impl SimulatedPath {
    pub fn len(&self) -> usize {
        self.observations.len()
    }

    pub fn is_empty(&self) -> bool {
        self.observations.is_empty()
    }
}

/// Model tag for the state space models that can be fitted by ABC and filtered.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "sv-gaussian")]
    SvGaussian,
    #[serde(rename = "sv-stable")]
    SvStable,
}

impl ModelKind {
    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            ModelKind::SvGaussian => &["phi", "sigma_alpha", "mu", "h_bar"],
            ModelKind::SvStable => &["omega", "phi", "sigma_h", "alpha"],
        }
    }
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ModelKind::SvGaussian => "sv-gaussian",
            ModelKind::SvStable => "sv-stable",
        })
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sv-gaussian" => Ok(ModelKind::SvGaussian),
            "sv-stable" => Ok(ModelKind::SvStable),
            other => Err(Error::Config(format!(
                "unknown model tag `{other}` (expected sv-gaussian or sv-stable)"
            ))),
        }
    }
}

/// A parameter record tagged with its model.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SsmParams {
    SvGaussian(SvGaussianParams),
    SvStable(StableSvParams),
}

impl SsmParams {
    pub fn kind(&self) -> ModelKind {
        match self {
            SsmParams::SvGaussian(_) => ModelKind::SvGaussian,
            SsmParams::SvStable(_) => ModelKind::SvStable,
        }
    }

    /// Builds a record from coordinates ordered as [`ModelKind::param_names`].
    pub fn from_slice(kind: ModelKind, v: &[f64]) -> Result<Self> {
        if v.len() != 4 {
            return Err(Error::DimensionMismatch {
                expected: 4,
                got: v.len(),
            });
        }
        Ok(match kind {
            ModelKind::SvGaussian => SsmParams::SvGaussian(SvGaussianParams::new(v[0], v[1], v[2], v[3])?),
            ModelKind::SvStable => SsmParams::SvStable(StableSvParams::new(v[0], v[1], v[2], v[3])?),
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match self {
            SsmParams::SvGaussian(p) => vec![p.phi, p.sigma_alpha, p.mu, p.h_bar],
            SsmParams::SvStable(p) => vec![p.omega, p.phi, p.sigma_h, p.alpha],
        }
    }

    /// Mean of the measurement density.
    pub fn measurement_mean(&self) -> f64 {
        match self {
            SsmParams::SvGaussian(p) => p.mu,
            SsmParams::SvStable(_) => 0.0,
        }
    }

    pub fn transition(&self) -> Transition {
        match *self {
            SsmParams::SvGaussian(p) => Transition::Gaussian {
                h_bar: p.h_bar,
                phi: p.phi,
                sd: p.sigma_alpha,
            },
            SsmParams::SvStable(p) => Transition::Stable {
                omega: p.omega,
                phi: p.phi,
                scale: p.sigma_h,
                law: Stable::new(p.alpha, STABLE_SKEW).expect("validated tail index"),
            },
        }
    }

    /// One draw from the initial state law (stationary draw for the Gaussian
    /// model; fixed point plus burn-in for the stable model).
    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match self {
            SsmParams::SvGaussian(p) => {
                let z: f64 = rng.sample(StandardNormal);
                p.h_bar + p.stationary_variance().sqrt() * z
            }
            SsmParams::SvStable(p) => {
                let tr = self.transition();
                let mut h = p.fixed_point();
                for _ in 0..BURN_IN {
                    h = tr.sample(h, rng);
                }
                h
            }
        }
    }

    /// Simulates `len` observations. Each step draws the state first and then
    /// the measurement noise.
    pub fn simulate<R: Rng + ?Sized>(&self, len: usize, rng: &mut R) -> Result<SimulatedPath> {
        if len == 0 {
            return Err(Error::domain("path length must be at least 1"));
        }
        let tr = self.transition();
        let mu = self.measurement_mean();
        let mut states = Vec::with_capacity(len);
        let mut observations = Vec::with_capacity(len);
        let mut h = match self {
            SsmParams::SvGaussian(_) => self.initial_state(rng),
            SsmParams::SvStable(_) => tr.sample(self.initial_state(rng), rng),
        };
        for t in 0..len {
            if t > 0 {
                h = tr.sample(h, rng);
            }
            let e: f64 = rng.sample(StandardNormal);
            states.push(h);
            observations.push(mu + (0.5 * h).exp() * e);
        }
        Ok(SimulatedPath {
            states,
            observations,
        })
    }
}

/// A transition kernel with its constants precomputed.
#[derive(Clone, Copy, Debug)]
pub enum Transition {
    Gaussian { h_bar: f64, phi: f64, sd: f64 },
    Stable { omega: f64, phi: f64, scale: f64, law: Stable },
}

impl Transition {
    #[inline]
    pub fn sample<R: Rng + ?Sized>(&self, h_prev: f64, rng: &mut R) -> f64 {
        match *self {
            Transition::Gaussian { h_bar, phi, sd } => {
                let z: f64 = rng.sample(StandardNormal);
                h_bar + phi * (h_prev - h_bar) + sd * z
            }
            Transition::Stable {
                omega,
                phi,
                scale,
                law,
            } => omega + phi * h_prev + scale * law.sample(rng),
        }
    }
}

/// One draw of h_t given h_{t−1}.
pub fn sv_transition_sample<R: Rng + ?Sized>(h_prev: f64, params: &SsmParams, rng: &mut R) -> f64 {
    params.transition().sample(h_prev, rng)
}

/// log N(y; mu, e^h).
#[inline]
pub fn sv_measurement_logpdf(y: f64, h: f64, mu: f64) -> f64 {
    let d = y - mu;
    -LN_SQRT_2PI - 0.5 * h - 0.5 * d * d * (-h).exp()
}

pub fn simulate_sv_gaussian<R: Rng + ?Sized>(
    params: &SvGaussianParams,
    len: usize,
    rng: &mut R,
) -> Result<SimulatedPath> {
    params.validate()?;
    SsmParams::SvGaussian(*params).simulate(len, rng)
}

pub fn simulate_stable_sv<R: Rng + ?Sized>(
    params: &StableSvParams,
    len: usize,
    rng: &mut R,
) -> Result<SimulatedPath> {
    params.validate()?;
    SsmParams::SvStable(*params).simulate(len, rng)
}

/// Empirical CDF with linear interpolation between order statistics, clamped
/// to [1/(n+1), n/(n+1)].
#[derive(Clone, Debug)]
pub struct InterpolatedEcdf {
    sorted: Vec<f64>,
}

impl InterpolatedEcdf {
    pub fn new(mut sample: Vec<f64>) -> Self {
        sample.sort_by(f64::total_cmp);
        Self { sorted: sample }
    }

    pub fn eval(&self, x: f64) -> f64 {
        let s = &self.sorted;
        let n = s.len();
        let denom = (n + 1) as f64;
        let k = s.partition_point(|&v| v <= x);
        if k == 0 {
            return 1.0 / denom;
        }
        if k == n {
            return n as f64 / denom;
        }
        let (lo, hi) = (s[k - 1], s[k]);
        let frac = if hi > lo { (x - lo) / (hi - lo) } else { 0.0 };
        (k as f64 + frac) / denom
    }
}

fn skew_latent_path<R: Rng + ?Sized>(p: &SkewSvParams, len: usize, rng: &mut R) -> (Vec<f64>, Vec<f64>) {
    let tr = Transition::Gaussian {
        h_bar: p.h_bar,
        phi: p.a,
        sd: p.sigma_h,
    };
    let mut h = p.h_bar;
    for _ in 0..BURN_IN {
        h = tr.sample(h, rng);
    }
    let mut states = Vec::with_capacity(len);
    let mut latent = Vec::with_capacity(len);
    for _ in 0..len {
        h = tr.sample(h, rng);
        let e: f64 = rng.sample(StandardNormal);
        states.push(h);
        latent.push((0.5 * h).exp() * e);
    }
    (states, latent)
}

/// Simulates the skew-copula SV process. The marginal CDF of the latent
/// `z_t` is estimated from an independent simulation of `fz_draws` steps.
pub fn simulate_skew_sv<R: Rng + ?Sized>(
    params: &SkewSvParams,
    len: usize,
    rng: &mut R,
    fz_draws: usize,
) -> Result<SimulatedPath> {
    let params = SkewSvParams::new(params.a, params.h_bar, params.sigma_h, params.gamma)?;
    if len == 0 {
        return Err(Error::domain("path length must be at least 1"));
    }
    if fz_draws < 100_000 {
        return Err(Error::domain(format!("fz_draws must be at least 1e5, got {fz_draws}")));
    }
    let target = StandardizedSkewNormal::new(params.gamma)?;
    let (states, latent) = skew_latent_path(&params, len, rng);
    let (_, reference) = skew_latent_path(&params, fz_draws, rng);
    let ecdf = InterpolatedEcdf::new(reference);
    let observations = latent
        .iter()
        .map(|&z| target.quantile(ecdf.eval(z)))
        .collect::<Result<Vec<_>>>()?;
    Ok(SimulatedPath {
        states,
        observations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::distributions::normal_cdf;
    use crate::rng::RngStream;
    use crate::stats;

    #[test]
    fn measurement_logpdf_values() {
        assert!((sv_measurement_logpdf(0.0, 0.0, 0.0) + 0.918_938_5).abs() < 1e-7);
        assert!((sv_measurement_logpdf(1.0, 0.0, 0.0) + 1.418_938_5).abs() < 1e-7);
        let h = -1.3;
        assert!((sv_measurement_logpdf(0.2, h, 0.2) - (-LN_SQRT_2PI - h / 2.0)).abs() < 1e-15);
    }

    #[test]
    fn parameter_validation() {
        assert!(SvGaussianParams::new(1.0, 0.3, 0.0, -1.0).is_err());
        assert!(SvGaussianParams::new(0.9, 0.0, 0.0, -1.0).is_err());
        assert!(StableSvParams::new(0.0, 0.9, 0.1, 1.0).is_err());
        assert!(SkewSvParams::new(0.9, -0.4, -0.1, -5.0).is_err());
        assert!("garch".parse::<ModelKind>().is_err());
        assert_eq!("sv-stable".parse::<ModelKind>().unwrap(), ModelKind::SvStable);
    }

    #[test]
    fn degenerate_state_equation() {
        let p = SvGaussianParams::new(0.0, 1e-300, 0.5, -1.0).unwrap();
        let mut rng = RngStream::new(1, 0).rng();
        let path = simulate_sv_gaussian(&p, 5000, &mut rng).unwrap();
        assert!(path.states.iter().all(|&h| h == -1.0));
        let sd = (-1.0f64).exp().sqrt();
        let d = stats::ks_statistic(&path.observations, |y| normal_cdf((y - 0.5) / sd));
        assert!(d < stats::ks_critical_1pct(5000));
    }

    #[test]
    fn gaussian_transition_without_noise() {
        let p = SsmParams::SvGaussian(SvGaussianParams::new(0.7, 1e-300, 0.0, -1.0).unwrap());
        let mut rng = RngStream::new(1, 0).rng();
        let h = sv_transition_sample(0.5, &p, &mut rng);
        assert!((h - (-1.0 + 0.7 * 1.5)).abs() < 1e-15);
    }

    #[test]
    fn path_equals_step_by_step_reconstruction() {
        for params in [
            SsmParams::SvGaussian(SvGaussianParams::new(0.95, 0.3, 0.0009, -1.3).unwrap()),
            SsmParams::SvStable(StableSvParams::new(-0.05, 0.95, 0.2, 1.6).unwrap()),
        ] {
            let stream = RngStream::new(3, 9);
            let path = params.simulate(300, &mut stream.rng()).unwrap();
            let mut rng = stream.rng();
            let mu = params.measurement_mean();
            let mut h = match params {
                SsmParams::SvGaussian(_) => params.initial_state(&mut rng),
                SsmParams::SvStable(_) => {
                    let h0 = params.initial_state(&mut rng);
                    sv_transition_sample(h0, &params, &mut rng)
                }
            };
            for t in 0..300 {
                if t > 0 {
                    h = sv_transition_sample(h, &params, &mut rng);
                }
                let e: f64 = rng.sample(StandardNormal);
                assert_eq!(path.states[t], h);
                assert_eq!(path.observations[t], mu + (0.5 * h).exp() * e);
            }
        }
    }

    #[test]
    fn fixed_seed_reproduces_paths() {
        let p = StableSvParams::new(-0.05, 0.95, 0.2, 1.5).unwrap();
        let s = RngStream::new(8, 8);
        let a = simulate_stable_sv(&p, 500, &mut s.rng()).unwrap();
        let b = simulate_stable_sv(&p, 500, &mut s.rng()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn ecdf_interpolates_and_clamps() {
        let e = InterpolatedEcdf::new(vec![3.0, 1.0, 2.0]);
        assert_eq!(e.eval(0.0), 0.25);
        assert_eq!(e.eval(1.0), 0.25);
        assert_eq!(e.eval(1.5), 0.375);
        assert_eq!(e.eval(5.0), 0.75);
    }

    #[test]
    fn skew_sv_rejects_small_reference_sample() {
        let p = SkewSvParams::new(0.9, -0.4581, 0.4173, -5.0).unwrap();
        let mut rng = RngStream::new(1, 1).rng();
        assert!(simulate_skew_sv(&p, 10, &mut rng, 1000).is_err());
    }

    #[test]
    fn simulators_stay_finite() {
        let mut rng = RngStream::new(21, 0).rng();
        let g = SvGaussianParams::new(0.99, 0.4, 0.0, -3.0).unwrap();
        let s = StableSvParams::new(-0.5, 0.98, 0.3, 1.05).unwrap();
        let a = simulate_sv_gaussian(&g, 20_000, &mut rng).unwrap();
        let b = simulate_stable_sv(&s, 20_000, &mut rng).unwrap();
        for path in [a, b] {
            assert_eq!(path.states.len(), path.observations.len());
            assert!(path.states.iter().chain(&path.observations).all(|v| v.is_finite()));
        }
    }
}
