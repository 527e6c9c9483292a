//! Proper scoring rules, positively oriented (larger is better).
//!
//! Four rules are supported on Gaussian predictives and on equally weighted
//! Gaussian mixtures:
//!
//! * LS, the log predictive density;
//! * CRPS, `−∫ (F(x) − 1{x ≥ y})² dx`, in closed form;
//! * CLS, the censored log score for a lower or upper tail region `A`: log density
//!   when `y ∈ A`, log predictive mass of `Aᶜ` otherwise;
//! * IS, the negated interval score of the central `100(1 − α)%` predictive
//!   interval, with endpoints at the `α/2` and `1 − α/2` predictive quantiles.

use std::f64::consts::FRAC_1_SQRT_2;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::distributions::{normal_cdf, normal_pdf, normal_quantile_unchecked, normal_sf, LN_SQRT_2PI};
use crate::error::{Error, Result};

const INV_SQRT_PI: f64 = 0.564_189_583_547_756_3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum TailKind {
    Lower,
    Upper,
}

/// Tail region `A` of the censored log score. Lower tails are `(−∞, threshold]`,
/// upper tails `[threshold, ∞)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegionSpec {
    pub kind: TailKind,
    /// Probability level the threshold was resolved from (e.g. 0.1 for CLS10).
    pub level: f64,
    pub threshold: f64,
}

impl RegionSpec {
    pub fn new(kind: TailKind, level: f64, threshold: f64) -> Result<Self> {
        if !threshold.is_finite() {
            return Err(Error::domain("CLS threshold must be finite"));
        }
        Ok(Self {
            kind,
            level,
            threshold,
        })
    }

    #[inline]
    pub fn contains(&self, y: f64) -> bool {
        match self.kind {
            TailKind::Lower => y <= self.threshold,
            TailKind::Upper => y >= self.threshold,
        }
    }
}

/// A scoring rule with any data-dependent pieces already resolved.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum ScoringRule {
    Ls,
    Crps,
    Cls(RegionSpec),
    Is { level: f64 },
}

impl ScoringRule {
    pub fn interval(level: f64) -> Result<Self> {
        if !(level > 0.0 && level < 1.0) {
            return Err(Error::domain(format!("interval-score level must lie in (0,1), got {level}")));
        }
        Ok(ScoringRule::Is { level })
    }

    pub fn spec(&self) -> RuleSpec {
        match *self {
            ScoringRule::Ls => RuleSpec::Ls,
            ScoringRule::Crps => RuleSpec::Crps,
            ScoringRule::Cls(r) => RuleSpec::Cls {
                percent: (r.level * 100.0).round() as u32,
            },
            ScoringRule::Is { level } => RuleSpec::Is {
                percent: (level * 100.0).round() as u32,
            },
        }
    }

    pub fn label(&self) -> String {
        self.spec().to_string()
    }

    pub(crate) fn prepare(&self) -> PreparedRule {
        match *self {
            ScoringRule::Ls => PreparedRule::Ls,
            ScoringRule::Crps => PreparedRule::Crps,
            ScoringRule::Cls(r) => PreparedRule::Cls(r),
            ScoringRule::Is { level } => PreparedRule::Is {
                z: normal_quantile_unchecked(1.0 - level / 2.0),
                penalty: 2.0 / level,
            },
        }
    }
}

/// Unresolved rule name as used in configs and table headers: `LS`, `CRPS`,
/// `CLS10`, `CLS90`, `IS` (5% level) or `IS10`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum RuleSpec {
    Ls,
    Crps,
    Cls { percent: u32 },
    Is { percent: u32 },
}

impl RuleSpec {
    /// The seven rules of the simulation designs, in table order.
    pub fn simulation_set() -> Vec<RuleSpec> {
        vec![
            RuleSpec::Ls,
            RuleSpec::Cls { percent: 10 },
            RuleSpec::Cls { percent: 20 },
            RuleSpec::Cls { percent: 80 },
            RuleSpec::Cls { percent: 90 },
            RuleSpec::Crps,
            RuleSpec::Is { percent: 5 },
        ]
    }

    /// The five rules of the empirical design.
    pub fn empirical_set() -> Vec<RuleSpec> {
        vec![
            RuleSpec::Ls,
            RuleSpec::Cls { percent: 10 },
            RuleSpec::Cls { percent: 20 },
            RuleSpec::Cls { percent: 80 },
            RuleSpec::Cls { percent: 90 },
        ]
    }

    /// Resolves a rule; CLS rules need the region threshold.
    pub fn resolve(&self, threshold: Option<f64>) -> Result<ScoringRule> {
        match *self {
            RuleSpec::Ls => Ok(ScoringRule::Ls),
            RuleSpec::Crps => Ok(ScoringRule::Crps),
            RuleSpec::Is { percent } => ScoringRule::interval(percent as f64 / 100.0),
            RuleSpec::Cls { percent } => {
                let level = percent as f64 / 100.0;
                let threshold = threshold.ok_or_else(|| Error::Config(format!("{self} needs a resolved threshold")))?;
                let kind = if level <= 0.5 { TailKind::Lower } else { TailKind::Upper };
                Ok(ScoringRule::Cls(RegionSpec::new(kind, level, threshold)?))
            }
        }
    }
}

impl fmt::Display for RuleSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            RuleSpec::Ls => f.write_str("LS"),
            RuleSpec::Crps => f.write_str("CRPS"),
            RuleSpec::Cls { percent } => write!(f, "CLS{percent}"),
            RuleSpec::Is { percent: 5 } => f.write_str("IS"),
            RuleSpec::Is { percent } => write!(f, "IS{percent}"),
        }
    }
}

impl FromStr for RuleSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let up = s.trim().to_ascii_uppercase();
        let bad = || Error::Config(format!("unknown scoring rule `{s}`"));
        match up.as_str() {
            "LS" => Ok(RuleSpec::Ls),
            "CRPS" => Ok(RuleSpec::Crps),
            "IS" => Ok(RuleSpec::Is { percent: 5 }),
            _ => {
                let (head, num) = if let Some(n) = up.strip_prefix("CLS") {
                    ("CLS", n)
                } else if let Some(n) = up.strip_prefix("IS") {
                    ("IS", n)
                } else {
                    return Err(bad());
                };
                let percent: u32 = num.parse().map_err(|_| bad())?;
                if percent == 0 || percent >= 100 {
                    return Err(bad());
                }
                Ok(if head == "CLS" {
                    RuleSpec::Cls { percent }
                } else {
                    RuleSpec::Is { percent }
                })
            }
        }
    }
}

/// Rule with constants precomputed for inner loops.
#[derive(Clone, Copy, Debug)]
pub(crate) enum PreparedRule {
    Ls,
    Crps,
    Cls(RegionSpec),
    Is { z: f64, penalty: f64 },
}

impl PreparedRule {
    /// Score of N(mean, sd²) at y.
    #[inline]
    pub(crate) fn score(&self, mean: f64, sd: f64, y: f64) -> f64 {
        match *self {
            PreparedRule::Ls => {
                let z = (y - mean) / sd;
                -LN_SQRT_2PI - sd.ln() - 0.5 * z * z
            }
            PreparedRule::Crps => {
                let z = (y - mean) / sd;
                -sd * (z * libm::erf(z * FRAC_1_SQRT_2) + 2.0 * normal_pdf(z) - INV_SQRT_PI)
            }
            PreparedRule::Cls(region) => {
                if region.contains(y) {
                    let z = (y - mean) / sd;
                    -LN_SQRT_2PI - sd.ln() - 0.5 * z * z
                } else {
                    let zt = (region.threshold - mean) / sd;
                    match region.kind {
                        TailKind::Lower => normal_sf(zt).ln(),
                        TailKind::Upper => normal_cdf(zt).ln(),
                    }
                }
            }
            PreparedRule::Is { z, penalty } => {
                let (l, u) = (mean - z * sd, mean + z * sd);
                interval_score(l, u, penalty, y)
            }
        }
    }
}

#[inline]
fn interval_score(l: f64, u: f64, penalty: f64, y: f64) -> f64 {
    let mut loss = u - l;
    if y < l {
        loss += penalty * (l - y);
    }
    if y > u {
        loss += penalty * (y - u);
    }
    -loss
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianPredictive {
    mean: f64,
    variance: f64,
}

impl GaussianPredictive {
    pub fn new(mean: f64, variance: f64) -> Result<Self> {
        if !(variance > 0.0 && variance.is_finite()) || !mean.is_finite() {
            return Err(Error::domain(format!(
                "Gaussian predictive needs finite mean and positive variance, got N({mean}, {variance})"
            )));
        }
        Ok(Self { mean, variance })
    }

    pub(crate) fn new_unchecked(mean: f64, variance: f64) -> Self {
        Self { mean, variance }
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn variance(&self) -> f64 {
        self.variance
    }

    pub fn sd(&self) -> f64 {
        self.variance.sqrt()
    }

    pub fn cdf(&self, y: f64) -> f64 {
        normal_cdf((y - self.mean) / self.sd())
    }

    pub fn logpdf(&self, y: f64) -> f64 {
        PreparedRule::Ls.score(self.mean, self.sd(), y)
    }

    pub fn quantile(&self, p: f64) -> Result<f64> {
        if !(p > 0.0 && p < 1.0) {
            return Err(Error::domain(format!("quantile needs p in (0,1), got {p}")));
        }
        Ok(self.mean + self.sd() * normal_quantile_unchecked(p))
    }
}

pub fn score_gaussian(rule: &ScoringRule, pred: &GaussianPredictive, y: f64) -> f64 {
    rule.prepare().score(pred.mean, pred.sd(), y)
}

/// Equally weighted mixture of Gaussian predictives.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictiveMixture {
    means: Vec<f64>,
    variances: Vec<f64>,
    sds: Vec<f64>,
}

impl PredictiveMixture {
    pub fn new(components: Vec<GaussianPredictive>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::domain("predictive mixture needs at least one component"));
        }
        let means = components.iter().map(|c| c.mean).collect();
        let variances: Vec<f64> = components.iter().map(|c| c.variance).collect();
        Self::from_parts(means, variances)
    }

    /// Builds a mixture from parallel mean and variance vectors.
    pub fn from_parts(means: Vec<f64>, variances: Vec<f64>) -> Result<Self> {
        if means.is_empty() || means.len() != variances.len() {
            return Err(Error::domain("predictive mixture needs matching, non-empty means and variances"));
        }
        if variances.iter().any(|v| !(*v > 0.0 && v.is_finite())) || means.iter().any(|m| !m.is_finite()) {
            return Err(Error::domain("mixture components need finite means and positive variances"));
        }
        let sds = variances.iter().map(|v| v.sqrt()).collect();
        Ok(Self {
            means,
            variances,
            sds,
        })
    }

    pub fn len(&self) -> usize {
        self.means.len()
    }

    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn components(&self) -> impl Iterator<Item = GaussianPredictive> + '_ {
        self.means
            .iter()
            .zip(&self.variances)
            .map(|(&m, &v)| GaussianPredictive::new_unchecked(m, v))
    }

    pub fn mean(&self) -> f64 {
        self.means.iter().sum::<f64>() / self.len() as f64
    }

    fn n(&self) -> f64 {
        self.means.len() as f64
    }

    pub fn pdf(&self, y: f64) -> f64 {
        self.means
            .iter()
            .zip(&self.sds)
            .map(|(m, s)| normal_pdf((y - m) / s) / s)
            .sum::<f64>()
            / self.n()
    }

    pub fn cdf(&self, y: f64) -> f64 {
        if y == f64::INFINITY {
            return 1.0;
        }
        if y == f64::NEG_INFINITY {
            return 0.0;
        }
        self.means
            .iter()
            .zip(&self.sds)
            .map(|(m, s)| normal_cdf((y - m) / s))
            .sum::<f64>()
            / self.n()
    }

    /// 1 − F(y), summed from component survival functions.
    pub fn sf(&self, y: f64) -> f64 {
        self.means
            .iter()
            .zip(&self.sds)
            .map(|(m, s)| normal_sf((y - m) / s))
            .sum::<f64>()
            / self.n()
    }
}

/// Log density of the mixture by log-sum-exp.
pub fn mixture_logpdf(mix: &PredictiveMixture, y: f64) -> f64 {
    let mut max = f64::NEG_INFINITY;
    let logs: Vec<f64> = mix
        .means
        .iter()
        .zip(&mix.sds)
        .map(|(m, s)| {
            let z = (y - m) / s;
            let l = -LN_SQRT_2PI - s.ln() - 0.5 * z * z;
            max = max.max(l);
            l
        })
        .collect();
    let sum: f64 = logs.iter().map(|l| (l - max).exp()).sum();
    max + sum.ln() - mix.n().ln()
}

pub fn mixture_cdf(mix: &PredictiveMixture, y: f64) -> f64 {
    mix.cdf(y)
}

/// Root of `F(x) = p` by Newton steps kept inside a bisection bracket.
pub fn mixture_quantile(mix: &PredictiveMixture, p: f64) -> Result<f64> {
    if !(p > 0.0 && p < 1.0) {
        return Err(Error::domain(format!("mixture quantile needs p in (0,1), got {p}")));
    }
    let zp = normal_quantile_unchecked(p);
    if mix.len() == 1 {
        return Ok(mix.means[0] + mix.sds[0] * zp);
    }
    // The mixture quantile lies between the smallest and largest component quantiles.
    let (mut lo, mut hi) = mix
        .means
        .iter()
        .zip(&mix.sds)
        .map(|(m, s)| m + s * zp)
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), q| (a.min(q), b.max(q)));
    if hi - lo <= 0.0 {
        return Ok(lo);
    }
    let mut x = mix.means.iter().sum::<f64>() / mix.n();
    if !(x > lo && x < hi) {
        x = 0.5 * (lo + hi);
    }
    for _ in 0..300 {
        let f = mix.cdf(x) - p;
        if f.abs() < 1e-12 {
            return Ok(x);
        }
        if f > 0.0 {
            hi = x;
        } else {
            lo = x;
        }
        if hi - lo <= 4.0 * f64::EPSILON * x.abs().max(1e-300) {
            return Ok(x);
        }
        let d = mix.pdf(x);
        let step = x - f / d;
        x = if d > 0.0 && step > lo && step < hi {
            step
        } else {
            0.5 * (lo + hi)
        };
    }
    Ok(x)
}

/// E|N(m, v)| = m·erf(m/√(2v)) + 2√v·φ(m/√v).
#[inline]
fn mean_abs_normal_exact(m: f64, v: f64) -> f64 {
    let s = v.sqrt();
    let z = m / s;
    m * libm::erf(z * FRAC_1_SQRT_2) + 2.0 * s * normal_pdf(z)
}

/// E|N(m, v)| = √v·G(m/√v) with G(z) = E|N(z, 1)| read from a piecewise
/// Chebyshev table.
#[inline]
fn mean_abs_normal(m: f64, v: f64) -> f64 {
    let s = v.sqrt();
    s * abs_normal_table().eval((m / s).abs())
}

const G_SEGMENTS_PER_UNIT: f64 = 32.0;
const G_ZMAX: f64 = 9.0;
const G_DEGREE: usize = 7;

/// Degree-7 interpolants of `G` on `[k/32, (k+1)/32]`, stored as monomial
/// coefficients in the local coordinate `x ∈ [−1, 1]`. Beyond `G_ZMAX` the
/// correction `G(z) − z` is below 1e-17, so `G(z) = z` there.
struct AbsNormalTable {
    segments: Vec<[f64; G_DEGREE + 1]>,
}

impl AbsNormalTable {
    fn build() -> Self {
        use std::f64::consts::PI;
        let g = |z: f64| mean_abs_normal_exact(z, 1.0);
        let n = G_DEGREE + 1;
        // Monomial coefficients of the Chebyshev polynomials T_0..T_7.
        let mut cheb = vec![[0.0; G_DEGREE + 1]; n];
        cheb[0][0] = 1.0;
        cheb[1][1] = 1.0;
        for j in 2..n {
            for k in 0..n {
                let shifted = if k > 0 { 2.0 * cheb[j - 1][k - 1] } else { 0.0 };
                cheb[j][k] = shifted - cheb[j - 2][k];
            }
        }
        let count = (G_ZMAX * G_SEGMENTS_PER_UNIT) as usize;
        let segments = (0..count)
            .map(|k| {
                let a = k as f64 / G_SEGMENTS_PER_UNIT;
                let b = (k + 1) as f64 / G_SEGMENTS_PER_UNIT;
                let nodes: Vec<f64> = (0..n).map(|i| (PI * (i as f64 + 0.5) / n as f64).cos()).collect();
                let values: Vec<f64> = nodes.iter().map(|x| g(0.5 * (a + b) + 0.5 * (b - a) * x)).collect();
                let mut mono = [0.0; G_DEGREE + 1];
                for j in 0..n {
                    let sum: f64 = (0..n)
                        .map(|i| values[i] * (PI * j as f64 * (i as f64 + 0.5) / n as f64).cos())
                        .sum();
                    let cj = if j == 0 { sum / n as f64 } else { 2.0 * sum / n as f64 };
                    for (m, t) in mono.iter_mut().zip(&cheb[j]) {
                        *m += cj * t;
                    }
                }
                mono
            })
            .collect();
        Self { segments }
    }

    #[inline(always)]
    fn eval(&self, z: f64) -> f64 {
        let pos = z * G_SEGMENTS_PER_UNIT;
        let k = pos as usize;
        match self.segments.get(k) {
            None => z,
            Some(c) => {
                let x = 2.0 * (pos - k as f64) - 1.0;
                let x2 = x * x;
                let x4 = x2 * x2;
                let lo = (c[0] + c[1] * x) + x2 * (c[2] + c[3] * x);
                let hi = (c[4] + c[5] * x) + x2 * (c[6] + c[7] * x);
                lo + x4 * hi
            }
        }
    }
}

fn abs_normal_table() -> &'static AbsNormalTable {
    static TABLE: std::sync::OnceLock<AbsNormalTable> = std::sync::OnceLock::new();
    TABLE.get_or_init(AbsNormalTable::build)
}

/// Exact mixture CRPS (negatively oriented), `E|X − y| − ½ E|X − X′|`.
pub(crate) fn mixture_crps_loss(mix: &PredictiveMixture, y: f64) -> f64 {
    let n = mix.len();
    let to_y: f64 = mix
        .means
        .iter()
        .zip(&mix.variances)
        .map(|(&m, &v)| mean_abs_normal(m - y, v))
        .sum::<f64>()
        / n as f64;
    // Diagonal terms are E|N(0, 2v)| = 2 sd / √π.
    let diag: f64 = mix.sds.iter().sum::<f64>() * 2.0 * INV_SQRT_PI;
    let table = abs_normal_table();
    let mut off = 0.0;
    for i in 0..n {
        let (mi, vi) = (mix.means[i], mix.variances[i]);
        let mut row = 0.0;
        for (mj, vj) in mix.means[i + 1..].iter().zip(&mix.variances[i + 1..]) {
            let s = (vi + vj).sqrt();
            row += s * table.eval((mi - mj).abs() / s);
        }
        off += row;
    }
    let pair = (diag + 2.0 * off) / (n as f64 * n as f64);
    to_y - 0.5 * pair
}

pub fn score_mixture(rule: &ScoringRule, mix: &PredictiveMixture, y: f64) -> Result<f64> {
    Ok(match *rule {
        ScoringRule::Ls => mixture_logpdf(mix, y),
        ScoringRule::Crps => -mixture_crps_loss(mix, y),
        ScoringRule::Cls(region) => {
            if region.contains(y) {
                mixture_logpdf(mix, y)
            } else {
                match region.kind {
                    TailKind::Lower => mix.sf(region.threshold).ln(),
                    TailKind::Upper => mix.cdf(region.threshold).ln(),
                }
            }
        }
        ScoringRule::Is { level } => {
            let l = mixture_quantile(mix, level / 2.0)?;
            let u = mixture_quantile(mix, 1.0 - level / 2.0)?;
            interval_score(l, u, 2.0 / level, y)
        }
    })
}
