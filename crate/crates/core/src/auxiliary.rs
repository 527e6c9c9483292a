//! Gaussian ARCH(1) and GARCH(1,1) auxiliary models.
//!
//! Each model yields one-step-ahead predictives `N(β0, σ²_t)` for `t = 2..T`.
//! The score criterion of a rule is the sum of its scores over those in-sample
//! pairs; its gradient and maximizer supply the ABC summaries and the FBP
//! starting point.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::NelderMead;
use crate::rng::RngStream;
use crate::scoring::{GaussianPredictive, PreparedRule, ScoringRule};
use crate::stats;

/// Relative step of the central finite differences.
pub const FD_STEP: f64 = 1e-6;
/// Box on the transformed coordinates; keeps the optimizer away from numerical infinity.
const UNCONSTRAINED_BOUND: f64 = 40.0;
const SEED_LABEL: u64 = 0x6175_7866_6974;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AuxKind {
    Arch,
    Garch,
}

impl AuxKind {
    pub fn dim(&self) -> usize {
        match self {
            AuxKind::Arch => 3,
            AuxKind::Garch => 4,
        }
    }

    pub fn param_names(&self) -> &'static [&'static str] {
        match self {
            AuxKind::Arch => &["beta0", "beta1", "beta2"],
            AuxKind::Garch => &["beta0", "beta1", "beta2", "beta3"],
        }
    }
}

impl fmt::Display for AuxKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AuxKind::Arch => "arch",
            AuxKind::Garch => "garch",
        })
    }
}

impl FromStr for AuxKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "arch" => Ok(AuxKind::Arch),
            "garch" => Ok(AuxKind::Garch),
            other => Err(Error::Config(format!(
                "unknown auxiliary model `{other}` (expected arch or garch)"
            ))),
        }
    }
}

/// ARCH(1): `y_t ~ N(β0, β1 + β2 (y_{t−1} − β0)²)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ArchParams {
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
}

impl ArchParams {
    pub fn new(beta0: f64, beta1: f64, beta2: f64) -> Result<Self> {
        let p = Self { beta0, beta1, beta2 };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta0.is_finite() {
            return Err(Error::domain("ARCH beta0 must be finite"));
        }
        if !(self.beta1 > 0.0 && self.beta1.is_finite()) {
            return Err(Error::domain(format!("ARCH beta1 must be > 0, got {}", self.beta1)));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::domain(format!("ARCH beta2 must lie in [0,1), got {}", self.beta2)));
        }
        Ok(())
    }
}

/// GARCH(1,1): `σ²_t = β1 + β2 σ²_{t−1} + β3 (y_{t−1} − β0)²`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GarchParams {
    pub beta0: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
}

impl GarchParams {
    pub fn new(beta0: f64, beta1: f64, beta2: f64, beta3: f64) -> Result<Self> {
        let p = Self {
            beta0,
            beta1,
            beta2,
            beta3,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.beta0.is_finite() {
            return Err(Error::domain("GARCH beta0 must be finite"));
        }
        if !(self.beta1 > 0.0 && self.beta1.is_finite()) {
            return Err(Error::domain(format!("GARCH beta1 must be > 0, got {}", self.beta1)));
        }
        if !(0.0..1.0).contains(&self.beta2) || !(0.0..1.0).contains(&self.beta3) {
            return Err(Error::domain(format!(
                "GARCH beta2, beta3 must lie in [0,1), got {}, {}",
                self.beta2, self.beta3
            )));
        }
        if self.beta2 + self.beta3 >= 1.0 {
            return Err(Error::domain(format!(
                "GARCH requires beta2 + beta3 < 1, got {}",
                self.beta2 + self.beta3
            )));
        }
        Ok(())
    }

    pub fn unconditional_variance(&self) -> f64 {
        self.beta1 / (1.0 - self.beta2 - self.beta3)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "lowercase")]
pub enum AuxParams {
    Arch(ArchParams),
    Garch(GarchParams),
}

impl AuxParams {
    pub fn kind(&self) -> AuxKind {
        match self {
            AuxParams::Arch(_) => AuxKind::Arch,
            AuxParams::Garch(_) => AuxKind::Garch,
        }
    }

    pub fn from_slice(kind: AuxKind, v: &[f64]) -> Result<Self> {
        if v.len() != kind.dim() {
            return Err(Error::DimensionMismatch {
                expected: kind.dim(),
                got: v.len(),
            });
        }
        Ok(match kind {
            AuxKind::Arch => AuxParams::Arch(ArchParams::new(v[0], v[1], v[2])?),
            AuxKind::Garch => AuxParams::Garch(GarchParams::new(v[0], v[1], v[2], v[3])?),
        })
    }

    pub fn to_vec(&self) -> Vec<f64> {
        match *self {
            AuxParams::Arch(p) => vec![p.beta0, p.beta1, p.beta2],
            AuxParams::Garch(p) => vec![p.beta0, p.beta1, p.beta2, p.beta3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            AuxParams::Arch(p) => p.validate(),
            AuxParams::Garch(p) => p.validate(),
        }
    }

    /// True when every inequality constraint holds strictly.
    pub fn is_interior(&self) -> bool {
        match *self {
            AuxParams::Arch(p) => p.beta1 > 0.0 && p.beta2 > 0.0 && p.beta2 < 1.0,
            AuxParams::Garch(p) => {
                p.beta1 > 0.0 && p.beta2 > 0.0 && p.beta3 > 0.0 && p.beta2 + p.beta3 < 1.0
            }
        }
    }

    /// Unconstrained coordinates: β0, log β1, then logit β2 (ARCH) or the
    /// stick-breaking pair `logit β2`, `logit(β3 / (1 − β2))` (GARCH).
    pub fn to_unconstrained(&self) -> Vec<f64> {
        match *self {
            AuxParams::Arch(p) => vec![p.beta0, p.beta1.ln(), logit(p.beta2)],
            AuxParams::Garch(p) => vec![
                p.beta0,
                p.beta1.ln(),
                logit(p.beta2),
                logit(p.beta3 / (1.0 - p.beta2)),
            ],
        }
    }

    pub fn from_unconstrained(kind: AuxKind, u: &[f64]) -> Result<Self> {
        Self::from_slice(kind, &to_beta(kind, u))
    }
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Maps unconstrained coordinates to β without validation.
fn to_beta(kind: AuxKind, u: &[f64]) -> Vec<f64> {
    match kind {
        AuxKind::Arch => vec![u[0], u[1].exp(), logistic(u[2])],
        AuxKind::Garch => {
            let b2 = logistic(u[2]);
            vec![u[0], u[1].exp(), b2, (1.0 - b2) * logistic(u[3])]
        }
    }
}

/// Maps a gradient in unconstrained coordinates to a gradient in β (`g_β = J⁻ᵀ g_u`).
fn gradient_to_beta(kind: AuxKind, beta: &[f64], gu: &[f64]) -> Vec<f64> {
    let mut g = vec![gu[0], gu[1] / beta[1]];
    match kind {
        AuxKind::Arch => g.push(gu[2] / (beta[2] * (1.0 - beta[2]))),
        AuxKind::Garch => {
            let s2 = beta[2];
            let s3 = beta[3] / (1.0 - s2);
            let a = s2 * (1.0 - s2);
            let c = -a * s3;
            let d = (1.0 - s2) * s3 * (1.0 - s3);
            let g3 = gu[3] / d;
            g.push((gu[2] - c * g3) / a);
            g.push(g3);
        }
    }
    g
}

/// Sum of `rule` scores over the in-sample predictives, for β given as a slice.
/// Returns NaN when the variance recursion leaves the positive reals.
fn criterion_raw(rule: &PreparedRule, kind: AuxKind, beta: &[f64], y: &[f64]) -> f64 {
    let (b0, b1, b2) = (beta[0], beta[1], beta[2]);
    let mut sum = 0.0;
    match kind {
        AuxKind::Arch => {
            for w in y.windows(2) {
                let e = w[0] - b0;
                let var = b1 + b2 * e * e;
                sum += rule.score(b0, var.sqrt(), w[1]);
            }
        }
        AuxKind::Garch => {
            let b3 = beta[3];
            let mut var = b1 / (1.0 - b2 - b3);
            for w in y.windows(2) {
                let e = w[0] - b0;
                var = b1 + b2 * var + b3 * e * e;
                sum += rule.score(b0, var.sqrt(), w[1]);
            }
        }
    }
    if sum.is_nan() {
        f64::NAN
    } else {
        sum
    }
}

/// Predictives for `y_t | y_{1:t−1}`, `t = 2..T`.
pub fn arch_filter(params: &ArchParams, y: &[f64]) -> Result<Vec<GaussianPredictive>> {
    params.validate()?;
    if y.len() < 2 {
        return Err(Error::domain("filtering needs at least two observations"));
    }
    y.windows(2)
        .map(|w| {
            let e = w[0] - params.beta0;
            GaussianPredictive::new(params.beta0, params.beta1 + params.beta2 * e * e)
        })
        .collect()
}

/// Predictives for `y_t | y_{1:t−1}`, `t = 2..T`, with the variance recursion
/// started at the unconditional variance.
pub fn garch_filter(params: &GarchParams, y: &[f64]) -> Result<Vec<GaussianPredictive>> {
    params.validate()?;
    if y.len() < 2 {
        return Err(Error::domain("filtering needs at least two observations"));
    }
    let mut var = params.unconditional_variance();
    y.windows(2)
        .map(|w| {
            let e = w[0] - params.beta0;
            var = params.beta1 + params.beta2 * var + params.beta3 * e * e;
            GaussianPredictive::new(params.beta0, var)
        })
        .collect()
}

pub fn filter(params: &AuxParams, y: &[f64]) -> Result<Vec<GaussianPredictive>> {
    match params {
        AuxParams::Arch(p) => arch_filter(p, y),
        AuxParams::Garch(p) => garch_filter(p, y),
    }
}

/// Predictive for the observation following `y`.
pub fn next_predictive(params: &AuxParams, y: &[f64]) -> Result<GaussianPredictive> {
    let mut ext = Vec::with_capacity(y.len() + 1);
    ext.extend_from_slice(y);
    ext.push(0.0);
    Ok(*filter(params, &ext)?.last().expect("non-empty filter output"))
}

/// Incremental filter: feeds observations one at a time and exposes the
/// predictive for the next one.
#[derive(Clone, Debug)]
pub struct AuxFilterState {
    params: AuxParams,
    variance: f64,
}

impl AuxFilterState {
    /// State after conditioning on the first observation.
    pub fn new(params: AuxParams, first: f64) -> Result<Self> {
        params.validate()?;
        let mut s = Self {
            params,
            variance: match params {
                AuxParams::Arch(p) => p.beta1,
                AuxParams::Garch(p) => p.unconditional_variance(),
            },
        };
        s.update(first);
        Ok(s)
    }

    pub fn update(&mut self, y: f64) {
        match self.params {
            AuxParams::Arch(p) => {
                let e = y - p.beta0;
                self.variance = p.beta1 + p.beta2 * e * e;
            }
            AuxParams::Garch(p) => {
                let e = y - p.beta0;
                self.variance = p.beta1 + p.beta2 * self.variance + p.beta3 * e * e;
            }
        }
    }

    pub fn predictive(&self) -> GaussianPredictive {
        let mean = match self.params {
            AuxParams::Arch(p) => p.beta0,
            AuxParams::Garch(p) => p.beta0,
        };
        GaussianPredictive::new_unchecked(mean, self.variance)
    }
}

/// Sum of in-sample one-step scores `Σ_{t=2}^{T} s(P_β^{(t−1)}, y_t)`.
pub fn criterion(rule: &ScoringRule, params: &AuxParams, y: &[f64]) -> Result<f64> {
    params.validate()?;
    if y.len() < 2 {
        return Err(Error::domain("criterion needs at least two observations"));
    }
    Ok(criterion_raw(&rule.prepare(), params.kind(), &params.to_vec(), y))
}

/// Gradient of the criterion with respect to β, by central differences in the
/// unconstrained coordinates followed by the chain rule.
pub fn criterion_gradient(rule: &ScoringRule, params: &AuxParams, y: &[f64]) -> Result<Vec<f64>> {
    params.validate()?;
    if !params.is_interior() {
        return Err(Error::domain(format!(
            "gradient requested on the constraint boundary at {:?}",
            params.to_vec()
        )));
    }
    if y.len() < 2 {
        return Err(Error::domain("criterion needs at least two observations"));
    }
    let gradient = GradientEvaluator::new(rule, params).eval(y);
    if gradient.iter().all(|g| g.is_finite()) {
        Ok(gradient)
    } else {
        Err(Error::domain("criterion gradient is not finite"))
    }
}

/// Precomputed finite-difference stencil for repeated gradient evaluation at a
/// fixed β on many series.
#[derive(Clone, Debug)]
pub(crate) struct GradientEvaluator {
    rule: PreparedRule,
    kind: AuxKind,
    beta: Vec<f64>,
    /// (β at u + h e_i, β at u − h e_i, 2h) per coordinate.
    stencil: Vec<(Vec<f64>, Vec<f64>, f64)>,
}

impl GradientEvaluator {
    pub(crate) fn new(rule: &ScoringRule, params: &AuxParams) -> Self {
        let kind = params.kind();
        let u = params.to_unconstrained();
        let stencil = (0..u.len())
            .map(|i| {
                let h = FD_STEP * u[i].abs().max(1.0);
                let mut up = u.clone();
                let mut dn = u.clone();
                up[i] += h;
                dn[i] -= h;
                (to_beta(kind, &up), to_beta(kind, &dn), up[i] - dn[i])
            })
            .collect();
        Self {
            rule: rule.prepare(),
            kind,
            beta: params.to_vec(),
            stencil,
        }
    }

    pub(crate) fn eval(&self, y: &[f64]) -> Vec<f64> {
        let gu: Vec<f64> = self
            .stencil
            .iter()
            .map(|(up, dn, width)| {
                (criterion_raw(&self.rule, self.kind, up, y) - criterion_raw(&self.rule, self.kind, dn, y))
                    / width
            })
            .collect();
        gradient_to_beta(self.kind, &self.beta, &gu)
    }
}

/// Maximizer of the score criterion for one rule.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AuxFit {
    pub params: AuxParams,
    pub rule: ScoringRule,
    pub criterion_value: f64,
    pub gradient_norm: f64,
}

impl AuxFit {
    pub fn csv_header() -> Vec<&'static str> {
        vec![
            "rule",
            "model",
            "beta0",
            "beta1",
            "beta2",
            "beta3",
            "criterion",
            "gradient_norm",
        ]
    }

    pub fn csv_record(&self) -> Vec<String> {
        let v = self.params.to_vec();
        let beta3 = v.get(3).map(|b| format!("{b:e}")).unwrap_or_default();
        vec![
            self.rule.label(),
            self.params.kind().to_string(),
            format!("{:e}", v[0]),
            format!("{:e}", v[1]),
            format!("{:e}", v[2]),
            beta3,
            format!("{:e}", self.criterion_value),
            format!("{:e}", self.gradient_norm),
        ]
    }
}

/// Maximizes the criterion by Nelder–Mead in unconstrained coordinates, keeping
/// the best of `restarts` runs from jittered moment-based starts.
pub fn fit_auxiliary(rule: &ScoringRule, kind: AuxKind, y: &[f64], restarts: usize) -> Result<AuxFit> {
    if y.len() < 50 {
        return Err(Error::domain(format!(
            "auxiliary fit needs at least 50 observations, got {}",
            y.len()
        )));
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("series contains non-finite values"));
    }
    let restarts = restarts.max(1);
    let prepared = rule.prepare();
    let objective = |u: &[f64]| -> f64 {
        if u[1..].iter().any(|x| x.abs() > UNCONSTRAINED_BOUND) {
            return f64::NAN;
        }
        -criterion_raw(&prepared, kind, &to_beta(kind, u), y)
    };

    let mean = stats::mean(y);
    let sd = stats::variance(y).sqrt().max(1e-12);
    let base = moment_start(kind, mean, sd * sd);
    let mut rng = RngStream::new(SEED_LABEL, kind.dim() as u64).rng();
    let nm = NelderMead::default();

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut any_converged = false;
    for r in 0..restarts {
        let mut start = base.clone();
        if r > 0 {
            let z: f64 = rng.sample(StandardNormal);
            start[0] += 0.2 * sd * z;
            for s in start[1..].iter_mut() {
                let z: f64 = rng.sample(StandardNormal);
                *s += 0.5 * z;
            }
        }
        let mut step = vec![0.5; start.len()];
        step[0] = 0.25 * sd;
        let mut m = nm.minimize(objective, &start, &step);
        // Restart from the reported optimum until it stops moving; guards against
        // a prematurely collapsed simplex.
        for _ in 0..5 {
            if !m.value.is_finite() {
                break;
            }
            let polish_step: Vec<f64> = step.iter().map(|s| s * 0.1).collect();
            let again = nm.minimize(objective, &m.point, &polish_step);
            let improved = again.value < m.value - 1e-10 * m.value.abs().max(1.0);
            let converged = again.converged;
            if again.value <= m.value {
                m = again;
            }
            m.converged = converged;
            if !improved {
                break;
            }
        }
        any_converged |= m.converged;
        if m.value.is_finite() && best.as_ref().is_none_or(|(_, v)| m.value < *v) {
            best = Some((m.point, m.value));
        }
    }

    let (u, value) = best.ok_or_else(|| Error::Optimization {
        message: format!("{} criterion was never finite", rule.label()),
        best_point: base.clone(),
        best_value: f64::NAN,
    })?;
    let params = AuxParams::from_unconstrained(kind, &u)?;
    if !any_converged {
        return Err(Error::Optimization {
            message: format!("no {}-{} restart converged", rule.label(), kind),
            best_point: params.to_vec(),
            best_value: -value,
        });
    }
    let gradient = criterion_gradient(rule, &params, y)?;
    let gradient_norm = gradient.iter().map(|g| g * g).sum::<f64>().sqrt();
    Ok(AuxFit {
        params,
        rule: *rule,
        criterion_value: -value,
        gradient_norm,
    })
}

fn moment_start(kind: AuxKind, mean: f64, var: f64) -> Vec<f64> {
    let beta = match kind {
        AuxKind::Arch => vec![mean, 0.7 * var, 0.3],
        AuxKind::Garch => vec![mean, 0.05 * var, 0.85, 0.1],
    };
    AuxParams::from_slice(kind, &beta)
        .expect("moment start is interior")
        .to_unconstrained()
}
