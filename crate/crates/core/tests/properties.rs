use ded_autograd::Mat;
use ded_core::decode::calibrate;
use ded_core::diffusion::{
    forward_diffuse, make_schedule, posterior_mean, reparam_mean, Density, EndpointSampleSet, NoisePredictor,
};
use ded_core::endpoint::EndpointCandidates;
use ded_core::evaluation::{kalman_forecast, min_rmse_at_horizons, rmse_at_horizons, KalmanParams};
use ded_core::Result;
use proptest::prelude::*;

struct Oracle([f64; 2]);

impl NoisePredictor for Oracle {
    fn predict(&self, yk: &Mat, _k: usize, _f: &[f64]) -> Result<Mat> {
        let (rows, _) = yk.shape();
        Ok(Mat::from_rows(&vec![self.0; rows]))
    }
}

fn point() -> impl Strategy<Value = [f64; 2]> {
    [-50.0..50.0f64, -50.0..50.0f64]
}

fn track(len: usize) -> impl Strategy<Value = Vec<[f64; 2]>> {
    prop::collection::vec(point(), len)
}

fn shift(t: &[[f64; 2]], c: [f64; 2]) -> Vec<[f64; 2]> {
    t.iter().map(|p| [p[0] + c[0], p[1] + c[1]]).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn rmse_ignores_common_translation(
        pairs in prop::collection::vec((track(25), track(25)), 1..6),
        c in point(),
    ) {
        let (preds, gts): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
        let a = rmse_at_horizons(&preds, &gts).unwrap();
        let sp: Vec<_> = preds.iter().map(|t| shift(t, c)).collect();
        let sg: Vec<_> = gts.iter().map(|t| shift(t, c)).collect();
        let b = rmse_at_horizons(&sp, &sg).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x.rmse - y.rmse).abs() <= 1e-9 * (1.0 + x.rmse));
        }
    }

    #[test]
    fn min_over_sets_never_exceeds_any_member(
        rows in prop::collection::vec((track(25), track(25), track(25)), 1..5),
    ) {
        let gts: Vec<_> = rows.iter().map(|r| r.0.clone()).collect();
        let first: Vec<_> = rows.iter().map(|r| r.1.clone()).collect();
        let second: Vec<_> = rows.iter().map(|r| r.2.clone()).collect();
        let sets: Vec<Vec<Vec<[f64; 2]>>> = rows.iter().map(|r| vec![r.1.clone(), r.2.clone()]).collect();
        let m = min_rmse_at_horizons(&sets, &gts).unwrap();
        let a = rmse_at_horizons(&first, &gts).unwrap();
        let b = rmse_at_horizons(&second, &gts).unwrap();
        for i in 0..m.len() {
            prop_assert!(m[i].rmse <= a[i].rmse + 1e-12);
            prop_assert!(m[i].rmse <= b[i].rmse + 1e-12);
        }
    }

    #[test]
    fn calibrate_picks_the_exhaustive_minimum(
        samples in prop::collection::vec(point(), 3..30),
        cands in prop::collection::vec(point(), 1..12),
        kde in any::<bool>(),
    ) {
        let density = if kde { Density::Kde } else { Density::Gaussian };
        let dist = EndpointSampleSet::fit(samples, density).unwrap();
        let c = EndpointCandidates { logits: vec![0.0; cands.len()], points: cands.clone() };
        let (p, idx) = calibrate(&c, &dist);
        let mut best = 0;
        for (i, q) in cands.iter().enumerate() {
            if dist.nll(*q) < dist.nll(cands[best]) {
                best = i;
            }
        }
        prop_assert_eq!(idx, best);
        prop_assert_eq!(p, cands[best]);
    }

    #[test]
    fn oracle_noise_recovers_posterior_mean(
        y0 in point(),
        eps in [-3.0..3.0f64, -3.0..3.0f64],
        k in 1usize..=100,
    ) {
        let s = make_schedule(100, 1e-4, 0.05).unwrap();
        let yk = forward_diffuse(y0, k, eps, &s).unwrap();
        let a = reparam_mean(yk, k, &[], &Oracle(eps), &s).unwrap();
        let b = posterior_mean(yk, y0, k, &s).unwrap();
        for d in 0..2 {
            prop_assert!((a[d] - b[d]).abs() <= 1e-9 * (1.0 + b[d].abs()));
        }
    }

    #[test]
    fn kalman_commutes_with_translation(t in track(15), c in point()) {
        let p = KalmanParams::default();
        let a = kalman_forecast(&t, 25, &p);
        let b = kalman_forecast(&shift(&t, c), 25, &p);
        for (x, y) in shift(&a, c).iter().zip(&b) {
            for d in 0..2 {
                prop_assert!((x[d] - y[d]).abs() <= 1e-9 * (1.0 + x[d].abs()));
            }
        }
    }

    #[test]
    fn density_fit_commutes_with_translation(
        samples in prop::collection::vec(point(), 3..30),
        q in point(),
        c in point(),
        kde in any::<bool>(),
    ) {
        let density = if kde { Density::Kde } else { Density::Gaussian };
        let a = EndpointSampleSet::fit(samples.clone(), density).unwrap();
        let b = a.map(|p| [p[0] + c[0], p[1] + c[1]]).unwrap();
        prop_assert!((b.mean[0] - a.mean[0] - c[0]).abs() <= 1e-9);
        prop_assert!((b.mean[1] - a.mean[1] - c[1]).abs() <= 1e-9);
        let (na, nb) = (a.nll(q), b.nll([q[0] + c[0], q[1] + c[1]]));
        prop_assert!((na - nb).abs() <= 1e-6 * (1.0 + na.abs()));
    }
}

#[test]
fn kalman_beats_two_point_extrapolation_on_noisy_lines() {
    use rand::{Rng, SeedableRng};
    use rand_distr::StandardNormal;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(17);
    let p = KalmanParams::default();
    let (mut kf, mut naive) = (0.0, 0.0);
    for _ in 0..1000 {
        let v = [rng.random_range(-30.0..30.0), rng.random_range(-3.0..3.0)];
        let truth = |i: usize| [v[0] * p.dt * i as f64, v[1] * p.dt * i as f64];
        let obs: Vec<[f64; 2]> = (0..15)
            .map(|i| {
                let t = truth(i);
                let n: [f64; 2] = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                [t[0] + 0.1 * n[0], t[1] + 0.1 * n[1]]
            })
            .collect();
        let end = truth(14 + 25);
        let f = kalman_forecast(&obs, 25, &p)[24];
        let step = [obs[14][0] - obs[13][0], obs[14][1] - obs[13][1]];
        let g = [obs[14][0] + 25.0 * step[0], obs[14][1] + 25.0 * step[1]];
        kf += (f[0] - end[0]).powi(2) + (f[1] - end[1]).powi(2);
        naive += (g[0] - end[0]).powi(2) + (g[1] - end[1]).powi(2);
    }
    assert!(kf < naive, "kalman {kf} vs two-point {naive}");
}
