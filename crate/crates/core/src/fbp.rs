//! Focused Bayesian prediction over the auxiliary model class.
//!
//! The generalized posterior is `exp(w·S_T(β))·π(β)` with `π(β) ∝ 1/β1` on the
//! constraint region. It is sampled by random-walk Metropolis–Hastings in the
//! unconstrained coordinates of [`AuxParams::to_unconstrained`], so the target
//! carries the Jacobian of that map.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::auxiliary::{criterion, fit_auxiliary, AuxFilterState, AuxKind, AuxParams};
use crate::error::{Error, Result};
use crate::particle::HoldoutComponents;
use crate::rng::RngStream;
use crate::scoring::{PredictiveMixture, ScoringRule};

/// Acceptance band targeted while adapting the proposal during burn-in.
pub const TARGET_ACCEPTANCE: (f64, f64) = (0.2, 0.4);
/// Post-burn-in acceptance outside this band attaches a tuning warning.
pub const ACCEPTABLE_ACCEPTANCE: (f64, f64) = (0.05, 0.7);
const ADAPT_BATCH: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FbpConfig {
    pub w: f64,
    /// Draws kept after burn-in and thinning.
    pub n_draws: usize,
    pub burn_in: usize,
    pub thin: usize,
    /// Initial proposal sd per unconstrained coordinate; derived from the
    /// curvature at the starting point when absent.
    pub proposal_scale: Option<Vec<f64>>,
    pub restarts: usize,
}

impl Default for FbpConfig {
    fn default() -> Self {
        Self {
            w: 1.0,
            n_draws: 4000,
            burn_in: 10_000,
            thin: 5,
            proposal_scale: None,
            restarts: 3,
        }
    }
}

impl FbpConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.w.is_finite()) {
            return Err(Error::Config(format!("FBP scale w must be > 0, got {}", self.w)));
        }
        if self.n_draws < 100 {
            return Err(Error::Config(format!("FBP needs at least 100 draws, got {}", self.n_draws)));
        }
        if self.thin == 0 {
            return Err(Error::Config("thin must be ≥ 1".into()));
        }
        if let Some(s) = &self.proposal_scale {
            if s.iter().any(|v| !(*v > 0.0 && v.is_finite())) {
                return Err(Error::Config("proposal scales must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FbpPosterior {
    pub draws: Vec<AuxParams>,
    pub acceptance_rate: f64,
    pub rule: ScoringRule,
    pub w_used: f64,
    pub tuning_warning: Option<String>,
}

impl FbpPosterior {
    pub fn kind(&self) -> AuxKind {
        self.draws[0].kind()
    }

    pub fn mean(&self) -> Vec<f64> {
        let m = self.draws.len() as f64;
        let mut out = vec![0.0; self.kind().dim()];
        for d in &self.draws {
            for (o, v) in out.iter_mut().zip(d.to_vec()) {
                *o += v / m;
            }
        }
        out
    }

    pub fn sd(&self) -> Vec<f64> {
        let mean = self.mean();
        let m = self.draws.len() as f64;
        let mut out = vec![0.0; mean.len()];
        for d in &self.draws {
            for ((o, v), mu) in out.iter_mut().zip(d.to_vec()).zip(&mean) {
                *o += (v - mu).powi(2) / (m - 1.0);
            }
        }
        out.iter().map(|v| v.sqrt()).collect()
    }
}

/// `w·S_T(β) − log β1` on the support, −∞ outside it.
pub fn log_generalized_posterior(beta: &[f64], rule: &ScoringRule, w: f64, y: &[f64], kind: AuxKind) -> f64 {
    match AuxParams::from_slice(kind, beta) {
        Ok(p) => match criterion(rule, &p, y) {
            Ok(c) if c.is_finite() => w * c - beta[1].ln(),
            _ => f64::NEG_INFINITY,
        },
        Err(_) => f64::NEG_INFINITY,
    }
}

/// Log target in unconstrained coordinates: generalized posterior plus the
/// log-Jacobian of `u ↦ β`.
fn log_target_u(u: &[f64], rule: &ScoringRule, w: f64, y: &[f64], kind: AuxKind) -> f64 {
    if u.iter().any(|v| !v.is_finite()) {
        return f64::NEG_INFINITY;
    }
    let Ok(p) = AuxParams::from_unconstrained(kind, u) else {
        return f64::NEG_INFINITY;
    };
    let beta = p.to_vec();
    let log_jac = match kind {
        AuxKind::Arch => beta[1].ln() + (beta[2] * (1.0 - beta[2])).ln(),
        AuxKind::Garch => {
            let s2 = beta[2];
            let s3 = beta[3] / (1.0 - s2);
            beta[1].ln() + (s2 * (1.0 - s2)).ln() + ((1.0 - s2) * s3 * (1.0 - s3)).ln()
        }
    };
    let lp = log_generalized_posterior(&beta, rule, w, y, kind) + log_jac;
    if lp.is_nan() {
        f64::NEG_INFINITY
    } else {
        lp
    }
}

/// Lower Cholesky factor of the proposal covariance: `2.38²/d · (−H)⁻¹` from a
/// finite-difference Hessian when it is negative definite, else a diagonal
/// fallback.
fn initial_proposal(f: &dyn Fn(&[f64]) -> f64, u0: &[f64], fixed: Option<&[f64]>) -> DMatrix<f64> {
    let d = u0.len();
    if let Some(s) = fixed {
        return DMatrix::from_diagonal(&DVector::from_column_slice(s));
    }
    let h: Vec<f64> = u0.iter().map(|v| 1e-3 * v.abs().max(1.0)).collect();
    let f0 = f(u0);
    let mut hess = DMatrix::<f64>::zeros(d, d);
    let shifted = |pairs: &[(usize, f64)]| {
        let mut u = u0.to_vec();
        for &(i, s) in pairs {
            u[i] += s;
        }
        f(&u)
    };
    for i in 0..d {
        hess[(i, i)] = (shifted(&[(i, h[i])]) - 2.0 * f0 + shifted(&[(i, -h[i])])) / (h[i] * h[i]);
        for j in 0..i {
            let v = (shifted(&[(i, h[i]), (j, h[j])]) - shifted(&[(i, h[i]), (j, -h[j])])
                - shifted(&[(i, -h[i]), (j, h[j])])
                + shifted(&[(i, -h[i]), (j, -h[j])]))
                / (4.0 * h[i] * h[j]);
            hess[(i, j)] = v;
            hess[(j, i)] = v;
        }
    }
    let scale = 2.38 * 2.38 / d as f64;
    if hess.iter().all(|v| v.is_finite()) {
        if let Some(chol) = (-&hess).cholesky() {
            let cov = chol.inverse() * scale;
            if let Some(c) = cov.cholesky() {
                return c.l();
            }
        }
    }
    let diag: Vec<f64> = (0..d)
        .map(|i| {
            let c = -hess[(i, i)];
            if c > 0.0 && c.is_finite() {
                (scale / c).sqrt()
            } else {
                0.1
            }
        })
        .collect();
    DMatrix::from_diagonal(&DVector::from_vec(diag))
}

/// Random-walk Metropolis–Hastings on the generalized posterior, started at
/// the criterion maximizer.
pub fn run_rwmh(
    rule: &ScoringRule,
    w: f64,
    y: &[f64],
    kind: AuxKind,
    cfg: &FbpConfig,
    rng: &RngStream,
) -> Result<FbpPosterior> {
    let cfg = FbpConfig { w, ..cfg.clone() };
    cfg.validate()?;
    let start = fit_auxiliary(rule, kind, y, cfg.restarts)?;
    run_rwmh_from(rule, y, &start.params, &cfg, rng)
}

/// As [`run_rwmh`] with an explicit starting point.
pub fn run_rwmh_from(
    rule: &ScoringRule,
    y: &[f64],
    start: &AuxParams,
    cfg: &FbpConfig,
    rng: &RngStream,
) -> Result<FbpPosterior> {
    cfg.validate()?;
    let kind = start.kind();
    let d = kind.dim();
    if let Some(s) = &cfg.proposal_scale {
        if s.len() != d {
            return Err(Error::DimensionMismatch { expected: d, got: s.len() });
        }
    }
    let target = |u: &[f64]| log_target_u(u, rule, cfg.w, y, kind);
    let mut u = start.to_unconstrained();
    let mut lp = target(&u);
    if !lp.is_finite() {
        return Err(Error::domain("generalized posterior is not finite at the starting point"));
    }
    let chol = initial_proposal(&target, &u, cfg.proposal_scale.as_deref());
    let mut scale = 1.0;
    let mut r = rng.rng();
    let total = cfg.burn_in + cfg.n_draws * cfg.thin;
    let mut draws = Vec::with_capacity(cfg.n_draws);
    let (mut batch_acc, mut kept_acc) = (0usize, 0usize);
    let mut proposal = vec![0.0; d];
    let mut z = DVector::<f64>::zeros(d);

    for it in 0..total {
        for zi in z.iter_mut() {
            *zi = r.sample(StandardNormal);
        }
        let step = &chol * &z;
        for i in 0..d {
            proposal[i] = u[i] + scale * step[i];
        }
        let lp_new = target(&proposal);
        let log_u: f64 = r.random::<f64>().ln();
        let accept = lp_new.is_finite() && log_u < lp_new - lp;
        if accept {
            u.copy_from_slice(&proposal);
            lp = lp_new;
        }
        if it < cfg.burn_in {
            batch_acc += accept as usize;
            if (it + 1) % ADAPT_BATCH == 0 {
                let rate = batch_acc as f64 / ADAPT_BATCH as f64;
                if rate < TARGET_ACCEPTANCE.0 {
                    scale *= 0.8;
                } else if rate > TARGET_ACCEPTANCE.1 {
                    scale *= 1.25;
                }
                batch_acc = 0;
            }
        } else {
            kept_acc += accept as usize;
            if (it - cfg.burn_in + 1) % cfg.thin == 0 {
                draws.push(AuxParams::from_unconstrained(kind, &u)?);
            }
        }
    }
    let acceptance_rate = kept_acc as f64 / (cfg.n_draws * cfg.thin) as f64;
    let tuning_warning = if acceptance_rate < ACCEPTABLE_ACCEPTANCE.0 || acceptance_rate > ACCEPTABLE_ACCEPTANCE.1 {
        let msg = format!(
            "{} chain acceptance rate {acceptance_rate:.3} outside [{}, {}]",
            rule.label(),
            ACCEPTABLE_ACCEPTANCE.0,
            ACCEPTABLE_ACCEPTANCE.1
        );
        log::warn!("{msg}");
        Some(msg)
    } else {
        None
    };
    Ok(FbpPosterior {
        draws,
        acceptance_rate,
        rule: *rule,
        w_used: cfg.w,
        tuning_warning,
    })
}

/// `Σ_j LS_j / Σ_j s_j` for per-draw summed scores.
pub fn w_ratio(ls_sums: &[f64], rule_sums: &[f64]) -> Result<f64> {
    let num: f64 = ls_sums.iter().sum();
    let den: f64 = rule_sums.iter().sum();
    if den == 0.0 || !den.is_finite() || !num.is_finite() {
        return Err(Error::Estimation(format!("scale ratio {num}/{den} is undefined")));
    }
    let w = num / den;
    if w <= 0.0 {
        return Err(Error::Estimation(format!(
            "scale ratio {w} is not positive; LS and rule score sums have opposite signs"
        )));
    }
    Ok(w)
}

/// Scale `w` for a rule: 1 for LS and CLS; otherwise the ratio of summed LS to
/// summed rule scores over the draws of the LS, `w = 1` posterior.
pub fn estimate_w(rule: &ScoringRule, y: &[f64], base: &FbpPosterior) -> Result<f64> {
    if matches!(rule, ScoringRule::Ls | ScoringRule::Cls(_)) {
        return Ok(1.0);
    }
    if base.rule != ScoringRule::Ls || base.w_used != 1.0 {
        return Err(Error::Config("the scale ratio needs draws from the LS posterior with w = 1".into()));
    }
    let ls = base
        .draws
        .iter()
        .map(|p| criterion(&ScoringRule::Ls, p, y))
        .collect::<Result<Vec<_>>>()?;
    let other = base
        .draws
        .iter()
        .map(|p| criterion(rule, p, y))
        .collect::<Result<Vec<_>>>()?;
    w_ratio(&ls, &other)
}

/// Equally weighted mixture of the draws' next-step filter predictives.
pub fn fbp_predictive(posterior: &FbpPosterior, y: &[f64]) -> Result<PredictiveMixture> {
    if posterior.draws.is_empty() {
        return Err(Error::domain("FBP predictive needs at least one draw"));
    }
    let comps = posterior
        .draws
        .iter()
        .map(|p| crate::auxiliary::next_predictive(p, y))
        .collect::<Result<Vec<_>>>()?;
    PredictiveMixture::new(comps)
}

/// Hold-out predictive components of every draw for the targets `y[split..]`,
/// one filter pass per draw.
pub fn fbp_holdout_components(posterior: &FbpPosterior, y_full: &[f64], split: usize) -> Result<Vec<HoldoutComponents>> {
    if split == 0 || split >= y_full.len() {
        return Err(Error::domain(format!(
            "split must lie in [1, {}), got {split}",
            y_full.len()
        )));
    }
    posterior
        .draws
        .iter()
        .map(|p| {
            let mut state = AuxFilterState::new(*p, y_full[0])?;
            let mut log_variances = Vec::with_capacity(y_full.len() - split);
            for t in 1..y_full.len() {
                if t >= split {
                    log_variances.push(state.predictive().variance().ln());
                }
                state.update(y_full[t]);
            }
            Ok(HoldoutComponents {
                mean: state.predictive().mean(),
                state_draws: 1,
                log_variances,
            })
        })
        .collect()
}

/// One draw per row, tagged with the config hash of the producing run.
pub fn write_fbp_csv(path: &Path, post: &FbpPosterior, config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = post.kind().param_names().to_vec();
    header.push("config_hash");
    w.write_record(&header)?;
    for d in &post.draws {
        let mut row: Vec<String> = d.to_vec().iter().map(|v| v.to_string()).collect();
        row.push(config_hash.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Draws and config hash read back from [`write_fbp_csv`].
pub fn read_fbp_draws(path: &Path, kind: AuxKind) -> Result<(Vec<AuxParams>, String)> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    let mut hash = String::new();
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |message: String| Error::Data { row: row + 2, message };
        if rec.len() != kind.dim() + 1 {
            return Err(bad(format!("expected {} fields, got {}", kind.dim() + 1, rec.len())));
        }
        let v = rec
            .iter()
            .take(kind.dim())
            .map(|f| f.parse::<f64>().map_err(|_| bad(format!("bad number `{f}`"))))
            .collect::<Result<Vec<_>>>()?;
        out.push(AuxParams::from_slice(kind, &v).map_err(|e| bad(e.to_string()))?);
        hash = rec[kind.dim()].to_string();
    }
    Ok((out, hash))
}
