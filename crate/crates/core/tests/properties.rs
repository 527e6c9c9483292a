mod common;

use proptest::prelude::*;
use rand::Rng;
use rand_distr::StandardNormal;

use lossabf::abc::nearest;
use lossabf::auxiliary::{arch_filter, filter, garch_filter, AuxParams, ArchParams, GarchParams};
use lossabf::distributions::{normal_cdf, normal_quantile, skew_normal_quantile};
use lossabf::evaluation::{average_score_row, coherence_check, MatrixMeta, ScoreMatrix};
use lossabf::models::{simulate_skew_sv, sv_transition_sample, SkewSvParams, SsmParams, StableSvParams, SvGaussianParams};
use lossabf::particle::{holdout_components, FilterConfig};
use lossabf::scoring::{mixture_logpdf, score_gaussian, score_mixture, GaussianPredictive, PredictiveMixture, RegionSpec, ScoringRule, TailKind};
use lossabf::RngStream;

fn rules(threshold: f64) -> Vec<ScoringRule> {
    vec![
        ScoringRule::Ls,
        ScoringRule::Crps,
        ScoringRule::Cls(RegionSpec::new(TailKind::Lower, 0.1, threshold).unwrap()),
        ScoringRule::Cls(RegionSpec::new(TailKind::Upper, 0.9, threshold).unwrap()),
        ScoringRule::interval(0.05).unwrap(),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn normal_quantile_round_trip(p in 0.001f64..0.999) {
        prop_assert!((normal_cdf(normal_quantile(p).unwrap()) - p).abs() < 1e-10);
    }

    #[test]
    fn skew_quantile_increases(gamma in -10.0f64..10.0, p in 0.01f64..0.98, dp in 1e-4f64..0.01) {
        prop_assert!(skew_normal_quantile(p + dp, gamma).unwrap() > skew_normal_quantile(p, gamma).unwrap());
    }

    #[test]
    fn gaussian_crps_matches_quadrature(mean in -3.0f64..3.0, sd in 0.2f64..3.0, y in -6.0f64..6.0) {
        let pred = GaussianPredictive::new(mean, sd * sd).unwrap();
        let closed = score_gaussian(&ScoringRule::Crps, &pred, y);
        let quad = common::crps_by_quadrature(&|x| common::normal_cdf((x - mean) / sd), y, mean - 12.0 * sd, mean + 12.0 * sd);
        prop_assert!((closed - quad).abs() < 1e-6, "{} vs {}", closed, quad);
    }

    #[test]
    fn scores_are_finite(mean in -50.0f64..50.0, var in 1e-4f64..100.0, y in -100.0f64..100.0, thr in -5.0f64..5.0) {
        let pred = GaussianPredictive::new(mean, var).unwrap();
        let mix = PredictiveMixture::from_parts(vec![mean, -mean], vec![var, 2.0 * var]).unwrap();
        for r in rules(thr) {
            prop_assert!(score_gaussian(&r, &pred, y).is_finite());
            prop_assert!(score_mixture(&r, &mix, y).unwrap().is_finite());
        }
    }

    #[test]
    fn cls_is_ls_inside_and_flat_outside(mean in -2.0f64..2.0, sd in 0.3f64..3.0, thr in -2.0f64..2.0, a in 0.0f64..5.0, b in 0.0f64..5.0) {
        let pred = GaussianPredictive::new(mean, sd * sd).unwrap();
        let lower = ScoringRule::Cls(RegionSpec::new(TailKind::Lower, 0.1, thr).unwrap());
        let inside = thr - a;
        prop_assert_eq!(score_gaussian(&lower, &pred, inside), score_gaussian(&ScoringRule::Ls, &pred, inside));
        let (o1, o2) = (thr + a + 1e-9, thr + b + 1e-9);
        prop_assert_eq!(score_gaussian(&lower, &pred, o1), score_gaussian(&lower, &pred, o2));
    }

    #[test]
    fn nearest_matches_full_sort(d in prop::collection::vec(0.0f64..10.0, 1..200), k1 in 1usize..50, k2 in 1usize..50) {
        let (small, large) = (k1.min(k2).min(d.len()), k1.max(k2).min(d.len()));
        let mut order: Vec<usize> = (0..d.len()).collect();
        order.sort_by(|&i, &j| d[i].total_cmp(&d[j]).then(i.cmp(&j)));
        let kept = nearest(&d, large);
        prop_assert_eq!(&kept, &order[..large].to_vec());
        prop_assert_eq!(&nearest(&d, small)[..], &kept[..small]);
    }

    #[test]
    fn coherence_ignores_column_shifts(e in prop::collection::vec(-5.0f64..0.0, 9), shift in prop::collection::vec(-100.0f64..100.0, 3)) {
        let l: Vec<String> = ["LS", "CRPS", "IS"].iter().map(|s| s.to_string()).collect();
        let rows = |e: &[f64]| e.chunks(3).map(|c| c.to_vec()).collect::<Vec<_>>();
        let shifted: Vec<f64> = e.iter().enumerate().map(|(i, v)| v + shift[i % 3]).collect();
        // Shifting changes rounding, so compare on entries spaced beyond it.
        let a = ScoreMatrix::new("ABC", l.clone(), l.clone(), rows(&e), MatrixMeta::default()).unwrap();
        let b = ScoreMatrix::new("ABC", l.clone(), l, rows(&shifted), MatrixMeta::default()).unwrap();
        let min_gap = (0..3).flat_map(|c| (0..3).flat_map(move |i| (0..3).map(move |j| (c, i, j))))
            .filter(|(_, i, j)| i != j)
            .map(|(c, i, j)| (e[3 * i + c] - e[3 * j + c]).abs())
            .fold(f64::INFINITY, f64::min);
        prop_assume!(min_gap > 1e-9);
        prop_assert_eq!(coherence_check(&a).unwrap(), coherence_check(&b).unwrap());
    }

    #[test]
    fn ls_column_is_mean_log_density(seed in 0u64..1000, n in 1usize..30) {
        let mut r = RngStream::new(seed, 0).rng();
        let preds: Vec<PredictiveMixture> = (0..n)
            .map(|_| {
                let k = r.random_range(1..5);
                let means = (0..k).map(|_| r.sample::<f64, _>(StandardNormal)).collect();
                let vars = (0..k).map(|_| r.random_range(0.2..3.0)).collect();
                PredictiveMixture::from_parts(means, vars).unwrap()
            })
            .collect();
        let y: Vec<f64> = (0..n).map(|_| 2.0 * r.sample::<f64, _>(StandardNormal)).collect();
        let row = average_score_row(&preds, &y, &[ScoringRule::Ls]).unwrap();
        let direct: f64 = preds.iter().zip(&y).map(|(p, v)| mixture_logpdf(p, *v)).sum::<f64>() / n as f64;
        prop_assert!((row[0] - direct).abs() < 1e-12);
    }

    #[test]
    fn garch_filter_is_causal(b0 in -1.0f64..1.0, b1 in 0.01f64..1.0, b2 in 0.0f64..0.6, b3 in 0.0f64..0.39, seed in 0u64..1000, cut in 3usize..60) {
        let mut r = RngStream::new(seed, 1).rng();
        let y: Vec<f64> = (0..60).map(|_| r.sample(StandardNormal)).collect();
        let p = AuxParams::Garch(GarchParams::new(b0, b1, b2, b3).unwrap());
        let full = filter(&p, &y).unwrap();
        let head = filter(&p, &y[..cut]).unwrap();
        prop_assert_eq!(&full[..cut - 1], &head[..]);
    }

    #[test]
    fn garch_without_persistence_is_arch(b0 in -1.0f64..1.0, b1 in 0.01f64..1.0, a in 0.0f64..0.99, seed in 0u64..1000) {
        let mut r = RngStream::new(seed, 2).rng();
        let y: Vec<f64> = (0..50).map(|_| r.sample(StandardNormal)).collect();
        let arch = arch_filter(&ArchParams::new(b0, b1, a).unwrap(), &y).unwrap();
        let garch = garch_filter(&GarchParams::new(b0, b1, 0.0, a).unwrap(), &y).unwrap();
        prop_assert_eq!(arch, garch);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn mixture_crps_matches_quadrature(seed in 0u64..10_000) {
        let mut r = RngStream::new(seed, 3).rng();
        let k = r.random_range(1..8);
        let means: Vec<f64> = (0..k).map(|_| 2.0 * r.sample::<f64, _>(StandardNormal)).collect();
        let vars: Vec<f64> = (0..k).map(|_| r.random_range(0.05..4.0)).collect();
        let y = 3.0 * r.sample::<f64, _>(StandardNormal);
        let mix = PredictiveMixture::from_parts(means.clone(), vars.clone()).unwrap();
        let closed = score_mixture(&ScoringRule::Crps, &mix, y).unwrap();
        let quad = common::crps_by_quadrature(&|x| common::mixture_cdf(&means, &vars, x), y, -40.0, 40.0);
        prop_assert!((closed - quad).abs() < 1e-6, "{} vs {}", closed, quad);
    }

    #[test]
    fn simulators_stay_finite(phi in 0.0f64..0.99, s in 0.01f64..1.0, mu in -1.0f64..1.0, hbar in -3.0f64..1.0, alpha in 1.2f64..2.0, seed in 0u64..1000) {
        let mut r = RngStream::new(seed, 4).rng();
        let g = SsmParams::SvGaussian(SvGaussianParams::new(phi, s, mu, hbar).unwrap()).simulate(500, &mut r).unwrap();
        prop_assert!(g.observations.iter().chain(&g.states).all(|v| v.is_finite()));
        let st = SsmParams::SvStable(StableSvParams::new(hbar * (1.0 - phi), phi, 0.3 * s, alpha).unwrap()).simulate(500, &mut r).unwrap();
        prop_assert!(st.observations.iter().chain(&st.states).all(|v| v.is_finite()));
        let sk = simulate_skew_sv(&SkewSvParams::new(phi, hbar, s, -5.0).unwrap(), 200, &mut r, 100_000).unwrap();
        prop_assert!(sk.observations.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn path_is_rebuilt_step_by_step(phi in 0.0f64..0.99, s in 0.01f64..1.0, seed in 0u64..1000) {
        let p = SsmParams::SvGaussian(SvGaussianParams::new(phi, s, 0.1, -1.0).unwrap());
        let stream = RngStream::new(seed, 5);
        let path = p.simulate(100, &mut stream.rng()).unwrap();
        let mut r = stream.rng();
        let mut h = p.initial_state(&mut r);
        for t in 0..100 {
            if t > 0 {
                h = sv_transition_sample(h, &p, &mut r);
            }
            let e: f64 = r.sample(StandardNormal);
            prop_assert_eq!(h, path.states[t]);
            prop_assert_eq!(0.1 + (0.5 * h).exp() * e, path.observations[t]);
        }
    }

    #[test]
    fn holdout_variances_are_positive(phi in 0.5f64..0.99, s in 0.05f64..0.5, seed in 0u64..1000) {
        let p = SsmParams::SvGaussian(SvGaussianParams::new(phi, s, 0.0, -1.0).unwrap());
        let y = p.simulate(80, &mut RngStream::new(seed, 6).rng()).unwrap().observations;
        let cfg = FilterConfig { n_particles: 100, state_draws: 3 };
        let c = holdout_components(&p, &y, 60, &cfg, &RngStream::new(seed, 7)).unwrap();
        prop_assert_eq!(c.log_variances.len(), 20 * 3);
        prop_assert!(c.log_variances.iter().all(|v| v.is_finite() && v.exp() > 0.0));
    }
}
