//! Loss-based ABC with score-gradient summaries.
//!
//! Draw `i` takes θ from the prior and simulates a path of the observed length,
//! both from its own substream `rng.substream(i)`. Its summary for a rule is
//! the averaged criterion gradient of the simulated path at the observed-data
//! fit. Distances are Mahalanobis norms weighted by the inverse covariance of
//! all `N` summaries, and the `keep` nearest draws form the posterior.

use std::fmt;
use std::path::Path;

use nalgebra::DMatrix;
use rand::distr::Open01;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::auxiliary::{fit_auxiliary, AuxFit, AuxKind, GradientEvaluator};
use crate::error::{Error, Result};
use crate::models::{ModelKind, SsmParams};
use crate::rng::RngStream;
use crate::scoring::ScoringRule;

/// Prior marginal of one parameter.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum Marginal {
    /// Uniform on the open interval `(low, high)`.
    Uniform { low: f64, high: f64 },
    Normal { mean: f64, variance: f64 },
    /// Point mass.
    Fixed { value: f64 },
}

impl Marginal {
    pub fn validate(&self) -> Result<()> {
        match *self {
            Marginal::Uniform { low, high } if !(low < high && low.is_finite() && high.is_finite()) => {
                Err(Error::Config(format!("uniform prior needs low < high, got ({low}, {high})")))
            }
            Marginal::Normal { mean, variance } if !(variance > 0.0 && variance.is_finite() && mean.is_finite()) => {
                Err(Error::Config(format!("normal prior needs variance > 0, got {variance}")))
            }
            Marginal::Fixed { value } if !value.is_finite() => Err(Error::Config("fixed prior value must be finite".into())),
            _ => Ok(()),
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        match *self {
            Marginal::Uniform { low, high } => {
                let u: f64 = rng.sample(Open01);
                low + (high - low) * u
            }
            Marginal::Normal { mean, variance } => {
                let z: f64 = rng.sample(StandardNormal);
                mean + variance.sqrt() * z
            }
            Marginal::Fixed { value } => value,
        }
    }
}

impl fmt::Display for Marginal {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Marginal::Uniform { low, high } => write!(f, "U({low},{high})"),
            Marginal::Normal { mean, variance } => write!(f, "N({mean},{variance})"),
            Marginal::Fixed { value } => write!(f, "Fixed({value})"),
        }
    }
}

/// Independent marginals for the parameters of one state space model, in the
/// order of [`ModelKind::param_names`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PriorSpec {
    pub model: ModelKind,
    pub marginals: Vec<(String, Marginal)>,
}

impl PriorSpec {
    pub fn new(model: ModelKind, marginals: Vec<(String, Marginal)>) -> Result<Self> {
        let names = model.param_names();
        if marginals.len() != names.len() || marginals.iter().zip(names).any(|((n, _), e)| n != e) {
            return Err(Error::Config(format!(
                "prior for {model} must list {names:?} in order, got {:?}",
                marginals.iter().map(|(n, _)| n.as_str()).collect::<Vec<_>>()
            )));
        }
        for (_, m) in &marginals {
            m.validate()?;
        }
        Ok(Self { model, marginals })
    }

    fn build(model: ModelKind, marginals: [Marginal; 4]) -> Self {
        let named = model
            .param_names()
            .iter()
            .zip(marginals)
            .map(|(n, m)| (n.to_string(), m))
            .collect();
        Self::new(model, named).expect("built-in prior is valid")
    }

    /// Gaussian SV prior of the correct-specification design.
    pub fn correct_spec() -> Self {
        Self::build(
            ModelKind::SvGaussian,
            [
                Marginal::Uniform { low: 0.5, high: 0.99 },
                Marginal::Uniform { low: 0.05, high: 0.4 },
                Marginal::Normal { mean: 0.0, variance: 0.5 },
                Marginal::Normal { mean: -1.0, variance: 1.0 },
            ],
        )
    }

    /// Gaussian SV prior of the misspecification design.
    pub fn misspec() -> Self {
        Self::build(
            ModelKind::SvGaussian,
            [
                Marginal::Uniform { low: 0.5, high: 0.99 },
                Marginal::Uniform { low: 0.05, high: 0.4 },
                Marginal::Normal { mean: 0.0, variance: 1.0 },
                Marginal::Normal { mean: -3.0, variance: 2.0 },
            ],
        )
    }

    /// α-stable SV prior of the empirical design.
    pub fn stable_empirical() -> Self {
        Self::build(
            ModelKind::SvStable,
            [
                Marginal::Uniform { low: -1.0, high: 1.0 },
                Marginal::Uniform { low: 0.5, high: 0.99 },
                Marginal::Uniform { low: 0.0, high: 0.3 },
                Marginal::Uniform { low: 1.0, high: 2.0 },
            ],
        )
    }

    pub fn sample_with<R: Rng + ?Sized>(&self, rng: &mut R) -> Result<SsmParams> {
        let v: Vec<f64> = self.marginals.iter().map(|(_, m)| m.sample(rng)).collect();
        SsmParams::from_slice(self.model, &v)
    }
}

/// One independent prior draw.
pub fn sample_prior(spec: &PriorSpec, rng: &RngStream) -> Result<SsmParams> {
    spec.sample_with(&mut rng.rng())
}

/// How many of the `N` nearest draws to keep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum KeepPolicy {
    Count(usize),
    /// `keep = round(q·N)`.
    Quantile(f64),
    /// `q_T = 50·T^{−3/2}` with `T` the observed length.
    Asymptotic,
}

impl KeepPolicy {
    pub fn resolve(&self, n_draws: usize, t: usize) -> Result<usize> {
        let keep = match *self {
            KeepPolicy::Count(k) => k,
            KeepPolicy::Quantile(q) => {
                if !(q > 0.0 && q <= 1.0) {
                    return Err(Error::Config(format!("keep quantile must lie in (0,1], got {q}")));
                }
                ((q * n_draws as f64).round() as usize).max(1)
            }
            KeepPolicy::Asymptotic => {
                let q = 50.0 * (t as f64).powf(-1.5);
                ((q.min(1.0) * n_draws as f64).round() as usize).max(1)
            }
        };
        if keep == 0 || keep > n_draws {
            return Err(Error::Config(format!("keep must lie in [1, {n_draws}], got {keep}")));
        }
        Ok(keep)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AbcConfig {
    pub n_draws: usize,
    pub keep: KeepPolicy,
    pub aux: AuxKind,
    /// Nelder–Mead restarts for the observed-data fit.
    pub restarts: usize,
}

impl Default for AbcConfig {
    fn default() -> Self {
        Self {
            n_draws: 200_000,
            keep: KeepPolicy::Asymptotic,
            aux: AuxKind::Garch,
            restarts: 3,
        }
    }
}

#[derive(Clone, Debug)]
pub struct AbcPosterior {
    pub model: ModelKind,
    pub fit: AuxFit,
    /// Prior-draw indices of the kept θ, nearest first.
    pub kept_indices: Vec<usize>,
    pub kept_thetas: Vec<SsmParams>,
    pub kept_distances: Vec<f64>,
    /// One row per prior draw.
    pub summaries: DMatrix<f64>,
    pub weight_matrix: DMatrix<f64>,
}

impl AbcPosterior {
    pub fn rule(&self) -> &ScoringRule {
        &self.fit.rule
    }

    pub fn kept_mean(&self) -> Vec<f64> {
        let k = self.kept_thetas.len() as f64;
        let mut m = vec![0.0; 4];
        for t in &self.kept_thetas {
            for (a, b) in m.iter_mut().zip(t.to_vec()) {
                *a += b / k;
            }
        }
        m
    }
}

/// `T⁻¹ ∇_β S_T(β̂)` on a simulated series, with `T` the number of score terms.
pub fn summary_statistic(y_sim: &[f64], fit: &AuxFit) -> Result<Vec<f64>> {
    let g = crate::auxiliary::criterion_gradient(&fit.rule, &fit.params, y_sim)?;
    let t = (y_sim.len() - 1) as f64;
    Ok(g.into_iter().map(|v| v / t).collect())
}

/// Inverse sample covariance of the finite rows of `summaries`, with a ridge of
/// `1e-10·trace/dim` added before inversion.
pub fn estimate_weight_matrix(summaries: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let dim = summaries.ncols();
    let rows: Vec<usize> = (0..summaries.nrows())
        .filter(|&i| summaries.row(i).iter().all(|v| v.is_finite()))
        .collect();
    if rows.len() < dim + 1 {
        return Err(Error::LinearAlgebra(format!(
            "need at least {} finite summary rows, got {}",
            dim + 1,
            rows.len()
        )));
    }
    let n = rows.len() as f64;
    let mut mean = vec![0.0; dim];
    for &i in &rows {
        for (j, m) in mean.iter_mut().enumerate() {
            *m += summaries[(i, j)];
        }
    }
    mean.iter_mut().for_each(|m| *m /= n);
    let mut cov = DMatrix::<f64>::zeros(dim, dim);
    for &i in &rows {
        for a in 0..dim {
            let da = summaries[(i, a)] - mean[a];
            for b in a..dim {
                cov[(a, b)] += da * (summaries[(i, b)] - mean[b]);
            }
        }
    }
    for a in 0..dim {
        for b in a..dim {
            let v = cov[(a, b)] / (n - 1.0);
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let trace = cov.trace();
    if !(trace > 0.0 && trace.is_finite()) {
        return Err(Error::LinearAlgebra(format!("summary covariance has trace {trace}")));
    }
    let ridge = 1e-10 * trace / dim as f64;
    for a in 0..dim {
        cov[(a, a)] += ridge;
    }
    let chol = cov
        .cholesky()
        .ok_or_else(|| Error::LinearAlgebra("summary covariance is not positive definite".into()))?;
    let inv = chol.inverse();
    Ok((&inv + inv.transpose()) * 0.5)
}

/// `√(sᵀ W s)`.
pub fn mahalanobis(s: &[f64], w: &DMatrix<f64>) -> Result<f64> {
    if w.nrows() != s.len() || w.ncols() != s.len() {
        return Err(Error::DimensionMismatch {
            expected: w.nrows(),
            got: s.len(),
        });
    }
    let mut q = 0.0;
    for a in 0..s.len() {
        for b in 0..s.len() {
            q += s[a] * w[(a, b)] * s[b];
        }
    }
    Ok(q.max(0.0).sqrt())
}

/// Indices of the `keep` smallest distances, ordered by (distance, index).
pub fn nearest(distances: &[f64], keep: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..distances.len()).collect();
    order.sort_by(|&a, &b| distances[a].total_cmp(&distances[b]).then(a.cmp(&b)));
    order.truncate(keep);
    order
}

/// Fits the auxiliary model on `y_obs` and runs ABC for one rule.
pub fn run_abc(
    prior: &PriorSpec,
    model: ModelKind,
    rule: &ScoringRule,
    y_obs: &[f64],
    config: &AbcConfig,
    rng: &RngStream,
) -> Result<AbcPosterior> {
    let mut out = run_abc_rules(prior, model, std::slice::from_ref(rule), y_obs, config, rng)?;
    Ok(out.remove(0))
}

/// Runs ABC for several rules on one shared set of prior draws and simulated
/// paths.
pub fn run_abc_rules(
    prior: &PriorSpec,
    model: ModelKind,
    rules: &[ScoringRule],
    y_obs: &[f64],
    config: &AbcConfig,
    rng: &RngStream,
) -> Result<Vec<AbcPosterior>> {
    if y_obs.len() < 100 {
        return Err(Error::domain(format!(
            "ABC needs at least 100 observations, got {}",
            y_obs.len()
        )));
    }
    if prior.model != model {
        return Err(Error::Config(format!(
            "prior is for {} but the model is {model}",
            prior.model
        )));
    }
    let fits = rules
        .par_iter()
        .map(|r| fit_auxiliary(r, config.aux, y_obs, config.restarts))
        .collect::<Result<Vec<_>>>()?;
    run_abc_with_fits(prior, &fits, y_obs.len(), config, rng)
}

/// ABC for pre-computed observed-data fits; simulated paths have length `t_obs`.
pub fn run_abc_with_fits(
    prior: &PriorSpec,
    fits: &[AuxFit],
    t_obs: usize,
    config: &AbcConfig,
    rng: &RngStream,
) -> Result<Vec<AbcPosterior>> {
    let n = config.n_draws;
    let keep = config.keep.resolve(n, t_obs)?;
    if t_obs < 2 {
        return Err(Error::domain("simulated paths need at least two observations"));
    }
    let evaluators: Vec<GradientEvaluator> = fits.iter().map(|f| GradientEvaluator::new(&f.rule, &f.params)).collect();
    let terms = (t_obs - 1) as f64;
    log::info!("ABC phase 1: {n} draws, {} rules, T = {t_obs}", fits.len());

    let draws: Vec<(SsmParams, Vec<Vec<f64>>)> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut r = rng.substream(i as u64).rng();
            let theta = prior.sample_with(&mut r)?;
            let path = theta.simulate(t_obs, &mut r)?;
            let summaries = evaluators
                .iter()
                .map(|e| e.eval(&path.observations).into_iter().map(|g| g / terms).collect())
                .collect();
            Ok((theta, summaries))
        })
        .collect::<Result<Vec<_>>>()?;

    log::info!("ABC phase 2: selecting {keep} of {n}");
    fits.iter()
        .enumerate()
        .map(|(j, fit)| {
            let dim = fit.params.kind().dim();
            let summaries = DMatrix::from_fn(n, dim, |i, c| draws[i].1[j][c]);
            let weight_matrix = estimate_weight_matrix(&summaries)?;
            let distances: Vec<f64> = draws
                .iter()
                .map(|(_, s)| {
                    let s = &s[j];
                    if s.iter().all(|v| v.is_finite()) {
                        mahalanobis(s, &weight_matrix)
                    } else {
                        Ok(f64::INFINITY)
                    }
                })
                .collect::<Result<_>>()?;
            let kept_indices = nearest(&distances, keep);
            Ok(AbcPosterior {
                model: prior.model,
                fit: fit.clone(),
                kept_thetas: kept_indices.iter().map(|&i| draws[i].0).collect(),
                kept_distances: kept_indices.iter().map(|&i| distances[i]).collect(),
                kept_indices,
                summaries,
                weight_matrix,
            })
        })
        .collect()
}

/// Writes one row per kept draw: prior-draw index, θ coordinates, distance and
/// the config hash of the producing run.
pub fn write_posterior_csv(path: &Path, post: &AbcPosterior, config_hash: &str) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["draw"];
    header.extend_from_slice(post.model.param_names());
    header.extend(["distance", "config_hash"]);
    w.write_record(&header)?;
    for ((i, theta), d) in post.kept_indices.iter().zip(&post.kept_thetas).zip(&post.kept_distances) {
        let mut row = vec![i.to_string()];
        row.extend(theta.to_vec().iter().map(|v| v.to_string()));
        row.push(d.to_string());
        row.push(config_hash.to_string());
        w.write_record(&row)?;
    }
    w.flush()?;
    Ok(())
}

/// Kept draws read back from [`write_posterior_csv`].
#[derive(Clone, Debug, PartialEq)]
pub struct KeptDraws {
    pub indices: Vec<usize>,
    pub thetas: Vec<SsmParams>,
    pub distances: Vec<f64>,
    /// Empty when the file has no rows.
    pub config_hash: String,
}

pub fn read_posterior_csv(path: &Path, model: ModelKind) -> Result<KeptDraws> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = KeptDraws {
        indices: Vec::new(),
        thetas: Vec::new(),
        distances: Vec::new(),
        config_hash: String::new(),
    };
    for (row, rec) in r.records().enumerate() {
        let rec = rec?;
        let bad = |message: String| Error::Data { row: row + 2, message };
        let fields: Vec<&str> = rec.iter().collect();
        if fields.len() != 7 {
            return Err(bad(format!("expected 7 fields, got {}", fields.len())));
        }
        let idx: usize = fields[0].parse().map_err(|_| bad(format!("bad draw index `{}`", fields[0])))?;
        let nums = fields[1..6]
            .iter()
            .map(|f| f.parse::<f64>().map_err(|_| bad(format!("bad number `{f}`"))))
            .collect::<Result<Vec<_>>>()?;
        out.indices.push(idx);
        out.thetas.push(SsmParams::from_slice(model, &nums[..4]).map_err(|e| bad(e.to_string()))?);
        out.distances.push(nums[4]);
        out.config_hash = fields[6].to_string();
    }
    Ok(out)
}

pub fn write_matrix_csv(path: &Path, m: &DMatrix<f64>, names: &[&str]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(names)?;
    for i in 0..m.nrows() {
        w.write_record(m.row(i).iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}
