//! Bootstrap particle filtering and predictive mixtures over posterior draws.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{sv_measurement_logpdf, SsmParams, Transition};
use crate::rng::RngStream;
use crate::scoring::{score_mixture, PredictiveMixture, ScoringRule};

/// Largest share of posterior draws whose filters may degenerate before a
/// hold-out evaluation is abandoned.
pub const MAX_DROPPED_SHARE: f64 = 0.1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub n_particles: usize,
    /// State draws per θ in each predictive mixture.
    pub state_draws: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            n_particles: 1000,
            state_draws: 20,
        }
    }
}

impl FilterConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_particles < 100 {
            return Err(Error::Config(format!("n_particles must be ≥ 100, got {}", self.n_particles)));
        }
        if self.state_draws == 0 {
            return Err(Error::Config("state_draws must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Weighted particle approximation of `p(x_t | θ, y_{1:t})`.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleCloud {
    pub particles: Vec<f64>,
    /// Log-weights normalized so that their exponentials sum to one.
    pub log_weights: Vec<f64>,
}

impl ParticleCloud {
    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.iter().map(|w| w.exp()).collect()
    }

    pub fn mean(&self) -> f64 {
        self.particles.iter().zip(&self.log_weights).map(|(x, w)| x * w.exp()).sum()
    }

    /// `count` states drawn by systematic resampling.
    pub fn resample<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Vec<f64> {
        systematic_indices(&self.weights(), count, rng)
            .into_iter()
            .map(|i| self.particles[i])
            .collect()
    }
}

/// Systematic resampling: one uniform offset, `count` evenly spaced pointers
/// into the cumulative weights (which must sum to one).
pub fn systematic_indices<R: Rng + ?Sized>(weights: &[f64], count: usize, rng: &mut R) -> Vec<usize> {
    let u0: f64 = rng.random::<f64>() / count as f64;
    let step = 1.0 / count as f64;
    let mut out = Vec::with_capacity(count);
    let mut cum = weights[0];
    let mut j = 0;
    for i in 0..count {
        let u = u0 + i as f64 * step;
        while u > cum && j + 1 < weights.len() {
            j += 1;
            cum += weights[j];
        }
        out.push(j);
    }
    out
}

/// Sequential bootstrap filter; call [`BootstrapFilter::step`] once per observation.
pub struct BootstrapFilter {
    transition: Transition,
    theta: SsmParams,
    mu: f64,
    particles: Vec<f64>,
    scratch: Vec<f64>,
    log_weights: Vec<f64>,
    weights: Vec<f64>,
    rng: ChaCha8Rng,
    t: usize,
    log_likelihood: f64,
}

impl BootstrapFilter {
    pub fn new(theta: &SsmParams, cfg: &FilterConfig, rng: &RngStream) -> Result<Self> {
        cfg.validate()?;
        let n = cfg.n_particles;
        Ok(Self {
            transition: theta.transition(),
            theta: *theta,
            mu: theta.measurement_mean(),
            particles: Vec::with_capacity(n),
            scratch: Vec::with_capacity(n),
            log_weights: vec![0.0; n],
            weights: vec![1.0 / n as f64; n],
            rng: rng.rng(),
            t: 0,
            log_likelihood: 0.0,
        })
    }

    /// Propagates (or initializes) the particles and weights them by `y`.
    pub fn step(&mut self, y: f64) -> Result<()> {
        let n = self.log_weights.len();
        if self.t == 0 {
            for _ in 0..n {
                let h0 = self.theta.initial_state(&mut self.rng);
                let h = match self.theta {
                    SsmParams::SvGaussian(_) => h0,
                    SsmParams::SvStable(_) => self.transition.sample(h0, &mut self.rng),
                };
                self.particles.push(h);
            }
        } else {
            let idx = systematic_indices(&self.weights, n, &mut self.rng);
            self.scratch.clear();
            for i in idx {
                let h = self.transition.sample(self.particles[i], &mut self.rng);
                self.scratch.push(h);
            }
            std::mem::swap(&mut self.particles, &mut self.scratch);
        }
        let mut max = f64::NEG_INFINITY;
        for (lw, &h) in self.log_weights.iter_mut().zip(&self.particles) {
            *lw = sv_measurement_logpdf(y, h, self.mu);
            if lw.is_nan() {
                *lw = f64::NEG_INFINITY;
            }
            max = max.max(*lw);
        }
        if !max.is_finite() {
            return Err(Error::FilterDegeneracy { t: self.t + 1 });
        }
        let mut total = 0.0;
        for (w, lw) in self.weights.iter_mut().zip(&self.log_weights) {
            *w = (lw - max).exp();
            total += *w;
        }
        let log_total = total.ln();
        for (w, lw) in self.weights.iter_mut().zip(self.log_weights.iter_mut()) {
            *w /= total;
            *lw -= max + log_total;
        }
        self.log_likelihood += max + log_total - (n as f64).ln();
        self.t += 1;
        Ok(())
    }

    pub fn cloud(&self) -> ParticleCloud {
        ParticleCloud {
            particles: self.particles.clone(),
            log_weights: self.log_weights.clone(),
        }
    }

    /// Running estimate of `log p(y_{1:t} | θ)`.
    pub fn log_likelihood(&self) -> f64 {
        self.log_likelihood
    }

    /// Appends `count` draws of `x_{t+1}`: resampled current states pushed
    /// through the transition.
    pub fn predictive_states(&mut self, count: usize, out: &mut Vec<f64>) {
        let idx = systematic_indices(&self.weights, count, &mut self.rng);
        for i in idx {
            out.push(self.transition.sample(self.particles[i], &mut self.rng));
        }
    }
}

/// Filtered clouds for every `t`.
pub fn bootstrap_filter(theta: &SsmParams, y: &[f64], cfg: &FilterConfig, rng: &RngStream) -> Result<Vec<ParticleCloud>> {
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::domain("series contains non-finite values"));
    }
    let mut f = BootstrapFilter::new(theta, cfg, rng)?;
    let mut clouds = Vec::with_capacity(y.len());
    for &v in y {
        f.step(v)?;
        clouds.push(f.cloud());
    }
    Ok(clouds)
}

/// Largest |log-variance| used for a predictive component. Heavy-tailed
/// transitions can push states far enough that `exp` leaves the f64 range.
pub const LOG_VARIANCE_BOUND: f64 = 600.0;

/// `e^x` with `x` clamped to `±LOG_VARIANCE_BOUND`.
#[inline]
pub fn component_variance(x: f64) -> f64 {
    x.clamp(-LOG_VARIANCE_BOUND, LOG_VARIANCE_BOUND).exp()
}

/// Mixture over θ of `N(μ_θ, e^{x_{t+1}})`, with `k` state draws per θ from its
/// cloud at `t`.
pub fn one_step_predictive(
    thetas: &[SsmParams],
    clouds_at_t: &[ParticleCloud],
    k: usize,
    rng: &RngStream,
) -> Result<PredictiveMixture> {
    if thetas.is_empty() {
        return Err(Error::domain("predictive needs at least one parameter draw"));
    }
    if thetas.len() != clouds_at_t.len() {
        return Err(Error::DimensionMismatch {
            expected: thetas.len(),
            got: clouds_at_t.len(),
        });
    }
    let mut means = Vec::with_capacity(thetas.len() * k);
    let mut vars = Vec::with_capacity(thetas.len() * k);
    for (j, (theta, cloud)) in thetas.iter().zip(clouds_at_t).enumerate() {
        let mut r = rng.substream(j as u64).rng();
        let tr = theta.transition();
        for x in cloud.resample(k, &mut r) {
            means.push(theta.measurement_mean());
            vars.push(component_variance(tr.sample(x, &mut r)));
        }
    }
    PredictiveMixture::from_parts(means, vars)
}

/// Predictive components of one θ over a hold-out period: for each target
/// `y_s`, `s = split..T`, `k` draws of the log-variance `x_s` given `y_{1:s−1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct HoldoutComponents {
    pub mean: f64,
    pub state_draws: usize,
    /// Row-major `(T − split) × k`.
    pub log_variances: Vec<f64>,
}

impl HoldoutComponents {
    pub fn at(&self, h: usize) -> &[f64] {
        &self.log_variances[h * self.state_draws..(h + 1) * self.state_draws]
    }
}

/// Runs one filter pass over `y_full` and records the hold-out predictive
/// components for `y[split..]`.
pub fn holdout_components(
    theta: &SsmParams,
    y_full: &[f64],
    split: usize,
    cfg: &FilterConfig,
    rng: &RngStream,
) -> Result<HoldoutComponents> {
    if split == 0 || split >= y_full.len() {
        return Err(Error::domain(format!(
            "split must lie in [1, {}), got {split}",
            y_full.len()
        )));
    }
    let mut f = BootstrapFilter::new(theta, cfg, rng)?;
    let k = cfg.state_draws;
    let mut log_variances = Vec::with_capacity((y_full.len() - split) * k);
    for (t, &y) in y_full[..y_full.len() - 1].iter().enumerate() {
        f.step(y)?;
        if t + 1 >= split {
            f.predictive_states(k, &mut log_variances);
        }
    }
    Ok(HoldoutComponents {
        mean: theta.measurement_mean(),
        state_draws: k,
        log_variances,
    })
}

/// Filters every θ (θ `j` on `rng.substream(keys[j])`), dropping those whose
/// filter degenerates. Fails when more than [`MAX_DROPPED_SHARE`] drop.
pub fn holdout_components_many(
    thetas: &[SsmParams],
    keys: &[u64],
    y_full: &[f64],
    split: usize,
    cfg: &FilterConfig,
    rng: &RngStream,
) -> Result<Vec<Option<HoldoutComponents>>> {
    cfg.validate()?;
    let out: Vec<Option<HoldoutComponents>> = thetas
        .par_iter()
        .zip(keys.par_iter())
        .map(|(theta, key)| match holdout_components(theta, y_full, split, cfg, &rng.substream(*key)) {
            Ok(c) => Ok(Some(c)),
            Err(Error::FilterDegeneracy { t }) => {
                log::warn!("filter degenerated at t = {t} for θ = {:?}; dropping its components", theta.to_vec());
                Ok(None)
            }
            Err(e) => Err(e),
        })
        .collect::<Result<_>>()?;
    let dropped = out.iter().filter(|c| c.is_none()).count();
    if dropped as f64 > MAX_DROPPED_SHARE * thetas.len() as f64 {
        return Err(Error::Estimation(format!(
            "{dropped} of {} particle filters degenerated",
            thetas.len()
        )));
    }
    Ok(out)
}

/// Scores of every hold-out target under every rule; `[rule][step]`.
pub fn score_holdout(components: &[&HoldoutComponents], targets: &[f64], rules: &[ScoringRule]) -> Result<Vec<Vec<f64>>> {
    if components.is_empty() {
        return Err(Error::Estimation("no predictive components to score".into()));
    }
    let per_step: Vec<Vec<f64>> = targets
        .par_iter()
        .enumerate()
        .map(|(h, &y)| {
            let size: usize = components.iter().map(|c| c.state_draws).sum();
            let mut means = Vec::with_capacity(size);
            let mut vars = Vec::with_capacity(size);
            for c in components {
                for lv in c.at(h) {
                    means.push(c.mean);
                    vars.push(component_variance(*lv));
                }
            }
            let mix = PredictiveMixture::from_parts(means, vars)?;
            rules.iter().map(|r| score_mixture(r, &mix, y)).collect()
        })
        .collect::<Result<_>>()?;
    Ok((0..rules.len())
        .map(|r| per_step.iter().map(|s| s[r]).collect())
        .collect())
}

/// Average hold-out score of each rule for the predictive built from `thetas`.
pub fn rolling_predictive_eval(
    thetas: &[SsmParams],
    y_full: &[f64],
    split: usize,
    cfg: &FilterConfig,
    rules: &[ScoringRule],
    rng: &RngStream,
) -> Result<Vec<f64>> {
    if thetas.is_empty() {
        return Err(Error::domain("predictive needs at least one parameter draw"));
    }
    let keys: Vec<u64> = (0..thetas.len() as u64).collect();
    let comps = holdout_components_many(thetas, &keys, y_full, split, cfg, rng)?;
    let live: Vec<&HoldoutComponents> = comps.iter().flatten().collect();
    let scores = score_holdout(&live, &y_full[split..], rules)?;
    Ok(scores.iter().map(|s| s.iter().sum::<f64>() / s.len() as f64).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::SvGaussianParams;
    use crate::scoring::score_gaussian;
    use crate::scoring::GaussianPredictive;
    use crate::stats;

    fn gaussian(phi: f64, sigma: f64, mu: f64, h_bar: f64) -> SsmParams {
        SsmParams::SvGaussian(SvGaussianParams::new(phi, sigma, mu, h_bar).unwrap())
    }

    fn cfg(n: usize, k: usize) -> FilterConfig {
        FilterConfig {
            n_particles: n,
            state_draws: k,
        }
    }

    #[test]
    fn config_validation() {
        assert!(cfg(99, 1).validate().is_err());
        assert!(cfg(100, 0).validate().is_err());
        assert!(cfg(100, 1).validate().is_ok());
    }

    #[test]
    fn deterministic_state_pins_every_particle() {
        let theta = gaussian(0.0, 1e-12, 0.1, -0.7);
        let y = theta.simulate(50, &mut RngStream::new(1, 0).rng()).unwrap().observations;
        for cloud in bootstrap_filter(&theta, &y, &cfg(200, 1), &RngStream::new(2, 0)).unwrap() {
            assert!(cloud.particles.iter().all(|x| (x + 0.7).abs() < 1e-9));
        }
    }

    #[test]
    fn weights_are_normalized() {
        let theta = gaussian(0.95, 0.3, 0.0, -1.3);
        let y = theta.simulate(100, &mut RngStream::new(3, 0).rng()).unwrap().observations;
        for c in bootstrap_filter(&theta, &y, &cfg(300, 1), &RngStream::new(4, 0)).unwrap() {
            assert!((c.weights().iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(c.particles.len(), c.log_weights.len());
        }
    }

    #[test]
    fn loglik_variance_shrinks_with_particles() {
        let theta = gaussian(0.95, 0.3, 0.0, -1.3);
        let y = theta.simulate(200, &mut RngStream::new(5, 0).rng()).unwrap().observations;
        let spread = |n: usize| {
            let ll: Vec<f64> = (0..50)
                .map(|s| {
                    let mut f = BootstrapFilter::new(&theta, &cfg(n, 1), &RngStream::new(6, s)).unwrap();
                    for &v in &y {
                        f.step(v).unwrap();
                    }
                    f.log_likelihood()
                })
                .collect();
            stats::variance(&ll)
        };
        assert!(spread(2000) < spread(200));
    }

    #[test]
    fn systematic_resampling_is_unbiased() {
        let particles: Vec<f64> = (0..50).map(|i| (i as f64 * 0.3).sin() * 3.0).collect();
        let raw: Vec<f64> = (0..50).map(|i| 1.0 + (i as f64 * 0.7).cos()).collect();
        let total: f64 = raw.iter().sum();
        let w: Vec<f64> = raw.iter().map(|v| v / total).collect();
        let target: f64 = particles.iter().zip(&w).map(|(x, w)| x * w).sum();
        let diffs: Vec<f64> = (0..200)
            .map(|s| {
                let mut r = RngStream::new(7, s).rng();
                let idx = systematic_indices(&w, 50, &mut r);
                idx.iter().map(|&i| particles[i]).sum::<f64>() / 50.0 - target
            })
            .collect();
        let se = (stats::variance(&diffs) / 200.0).sqrt();
        assert!(stats::mean(&diffs).abs() < 3.0 * se + 1e-12);
    }

    /// Kalman filter on `log (y − μ)² = x_t + log ε²`, with the log-χ²₁ noise
    /// replaced by its mean −1.2704 and variance π²/2.
    fn kalman_log_square(theta: &SvGaussianParams, y: &[f64]) -> Vec<f64> {
        let (mut m, mut p) = (theta.h_bar, theta.stationary_variance());
        let r = std::f64::consts::PI.powi(2) / 2.0;
        let mut out = Vec::new();
        for (t, v) in y.iter().enumerate() {
            if t > 0 {
                m = theta.h_bar + theta.phi * (m - theta.h_bar);
                p = theta.phi * theta.phi * p + theta.sigma_alpha.powi(2);
            }
            let obs = ((v - theta.mu).powi(2)).max(1e-300).ln() + 1.2704;
            let gain = p / (p + r);
            m += gain * (obs - m);
            p *= 1.0 - gain;
            out.push(m);
        }
        out
    }

    #[test]
    fn filtered_mean_tracks_linearized_kalman() {
        let p = SvGaussianParams::new(0.98, 0.3, 0.0, -1.0).unwrap();
        let theta = SsmParams::SvGaussian(p);
        let path = theta.simulate(500, &mut RngStream::new(8, 0).rng()).unwrap();
        let pf: Vec<f64> = bootstrap_filter(&theta, &path.observations, &cfg(2000, 1), &RngStream::new(9, 0))
            .unwrap()
            .iter()
            .map(|c| c.mean())
            .collect();
        let kf = kalman_log_square(&p, &path.observations);
        let rmse = |a: &[f64]| {
            (a.iter().zip(&path.states).map(|(x, h)| (x - h).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
        };
        let (a, b) = (rmse(&pf), rmse(&kf));
        assert!((a - b).abs() < 0.2, "{a} vs {b}");
    }

    #[test]
    fn degenerate_single_theta_predictive() {
        let theta = gaussian(0.0, 1e-12, 0.3, -0.5);
        let y = [0.1, -0.2, 0.4];
        let clouds = bootstrap_filter(&theta, &y, &cfg(100, 1), &RngStream::new(1, 0)).unwrap();
        let mix = one_step_predictive(&[theta], &clouds[2..], 1, &RngStream::new(2, 0)).unwrap();
        let c: Vec<GaussianPredictive> = mix.components().collect();
        assert_eq!(c.len(), 1);
        assert_eq!(c[0].mean(), 0.3);
        assert!((c[0].variance() - (-0.5f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn predictive_component_count_and_mean() {
        let thetas = [gaussian(0.9, 0.2, 0.05, -1.0), gaussian(0.8, 0.3, 0.05, -0.5)];
        let y = thetas[0].simulate(40, &mut RngStream::new(3, 0).rng()).unwrap().observations;
        let clouds: Vec<ParticleCloud> = thetas
            .iter()
            .map(|t| bootstrap_filter(t, &y, &cfg(200, 1), &RngStream::new(4, 0)).unwrap().pop().unwrap())
            .collect();
        let mix = one_step_predictive(&thetas, &clouds, 7, &RngStream::new(5, 0)).unwrap();
        assert_eq!(mix.len(), 14);
        assert!((mix.mean() - 0.05).abs() < 1e-12);
        assert!(mix.components().all(|c| c.variance() > 0.0));
        assert!(one_step_predictive(&[], &[], 3, &RngStream::new(5, 0)).is_err());
    }

    #[test]
    fn degenerate_holdout_matches_closed_form() {
        let theta = gaussian(0.0, 1e-12, 0.2, -0.4);
        let y = theta.simulate(30, &mut RngStream::new(6, 0).rng()).unwrap().observations;
        let rules = [ScoringRule::Ls, ScoringRule::Crps];
        let avg = rolling_predictive_eval(&[theta, theta], &y, 20, &cfg(100, 3), &rules, &RngStream::new(7, 0)).unwrap();
        let pred = GaussianPredictive::new(0.2, (-0.4f64).exp()).unwrap();
        for (r, a) in rules.iter().zip(&avg) {
            let exact = y[20..].iter().map(|v| score_gaussian(r, &pred, *v)).sum::<f64>() / 10.0;
            assert!((a - exact).abs() < 1e-9, "{a} vs {exact}");
        }
    }

    #[test]
    fn single_step_holdout_equals_point_score() {
        let theta = gaussian(0.9, 0.2, 0.0, -1.0);
        let y = theta.simulate(25, &mut RngStream::new(8, 0).rng()).unwrap().observations;
        let rng = RngStream::new(9, 0);
        let c = holdout_components(&theta, &y, 24, &cfg(100, 5), &rng.substream(0)).unwrap();
        let scores = score_holdout(&[&c], &y[24..], &[ScoringRule::Ls]).unwrap();
        let avg = rolling_predictive_eval(&[theta], &y, 24, &cfg(100, 5), &[ScoringRule::Ls], &rng).unwrap();
        assert_eq!(scores[0].len(), 1);
        assert_eq!(avg[0], scores[0][0]);
    }

    #[test]
    fn extreme_log_variances_score_finitely() {
        assert_eq!(component_variance(-1.0e4), (-LOG_VARIANCE_BOUND).exp());
        assert_eq!(component_variance(1.0e4), LOG_VARIANCE_BOUND.exp());
        assert_eq!(component_variance(0.5), 0.5f64.exp());
        let c = HoldoutComponents {
            mean: 0.0,
            state_draws: 3,
            log_variances: vec![-5.0e3, 0.0, 5.0e3, -1.0e5, -1.0e5, -1.0e5],
        };
        let rules = [
            ScoringRule::Ls,
            ScoringRule::Crps,
            ScoringRule::Cls(crate::scoring::RegionSpec::new(crate::scoring::TailKind::Lower, 0.1, -1.0).unwrap()),
            ScoringRule::interval(0.8).unwrap(),
        ];
        let s = score_holdout(&[&c], &[0.3, 0.0], &rules).unwrap();
        assert!(s.iter().all(|r| r.iter().all(|v| v.is_finite())), "{s:?}");
    }

    #[test]
    fn single_pass_matches_refiltering_in_distribution() {
        let theta = gaussian(0.9, 0.3, 0.0, -1.0);
        let y = theta.simulate(30, &mut RngStream::new(10, 0).rng()).unwrap().observations;
        let split = 20;
        let c = cfg(200, 10);
        let mut single = Vec::new();
        let mut fresh = Vec::new();
        for s in 0..100 {
            let rng = RngStream::new(11, s);
            single.push(rolling_predictive_eval(&[theta], &y, split, &c, &[ScoringRule::Ls], &rng).unwrap()[0]);
            // Refilter y_{1:t} from scratch for every target.
            let mut total = 0.0;
            for t in split..y.len() {
                let comps = holdout_components(&theta, &y[..=t], t, &c, &rng.substream(1000 + t as u64)).unwrap();
                total += score_holdout(&[&comps], &y[t..=t], &[ScoringRule::Ls]).unwrap()[0][0];
            }
            fresh.push(total / (y.len() - split) as f64);
        }
        let se = ((stats::variance(&single) + stats::variance(&fresh)) / 100.0).sqrt();
        assert!((stats::mean(&single) - stats::mean(&fresh)).abs() < 3.0 * se + 1e-3);
    }

    #[test]
    fn holdout_rejects_bad_split() {
        let theta = gaussian(0.9, 0.2, 0.0, -1.0);
        assert!(holdout_components(&theta, &[0.1, 0.2], 2, &cfg(100, 1), &RngStream::new(0, 0)).is_err());
        assert!(holdout_components(&theta, &[0.1, 0.2], 0, &cfg(100, 1), &RngStream::new(0, 0)).is_err());
    }
}
