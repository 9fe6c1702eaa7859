use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use tvae_core::distributions::{
    gumbel_max, gumbel_noise, kl_categorical, kl_gaussian_gaussian, sample_concrete, sample_gaussian, standard_normal,
    CategoricalLogits, GaussianParams,
};

fn softmax(l: &[f64]) -> Vec<f64> {
    let m = l.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = l.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.iter().map(|v| v / s).collect()
}

fn log_density(x: &[f64], mean: &[f64], log_std: &[f64]) -> f64 {
    x.iter()
        .zip(mean)
        .zip(log_std)
        .map(|((x, m), s)| {
            let u = (x - m) / s.exp();
            -0.5 * u * u - s - 0.5 * (2.0 * std::f64::consts::PI).ln()
        })
        .sum()
}

#[test]
fn gaussian_sample_mean_converges() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let p = GaussianParams::new(vec![0.7, -1.2, 3.0], vec![0.2, -0.5, 0.9]).unwrap();
    let n = 1_000_000;
    let mut sum = [0.0; 3];
    for _ in 0..n {
        let eps = standard_normal::<f64, _>(&mut rng, 3);
        for (s, z) in sum.iter_mut().zip(sample_gaussian(&p, &eps).unwrap()) {
            *s += z;
        }
    }
    for ((s, m), ls) in sum.iter().zip(p.mean()).zip(p.log_std()) {
        let tol = 4.0 * ls.exp() / (n as f64).sqrt();
        assert!((s / n as f64 - m).abs() < tol);
    }
}

#[test]
fn gaussian_kl_matches_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let n = 1_000_000;
    for pair in 0..10 {
        let d = 3;
        let draw =
            |rng: &mut ChaCha8Rng, scale: f64| (0..d).map(|_| rng.random_range(-scale..scale)).collect::<Vec<f64>>();
        let q = GaussianParams::new(draw(&mut rng, 1.5), draw(&mut rng, 0.6)).unwrap();
        let p = GaussianParams::new(draw(&mut rng, 1.5), draw(&mut rng, 0.6)).unwrap();
        let exact = kl_gaussian_gaussian(&q, &p).unwrap();
        let mut acc = 0.0;
        for _ in 0..n {
            let eps = standard_normal::<f64, _>(&mut rng, d);
            let x = sample_gaussian(&q, &eps).unwrap();
            acc += log_density(&x, q.mean(), q.log_std()) - log_density(&x, p.mean(), p.log_std());
        }
        let mc = acc / n as f64;
        assert!((mc - exact).abs() <= 0.01 * exact, "pair {pair}: closed form {exact}, MC {mc}");
    }
}

#[test]
fn categorical_kl_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let k = rng.random_range(2..8);
        let q = softmax(&standard_normal::<f64, _>(&mut rng, k));
        let p = softmax(&standard_normal::<f64, _>(&mut rng, k));
        let mut direct = 0.0;
        for i in 0..k {
            direct += q[i] * (q[i] / p[i]).ln();
        }
        assert_eq!(kl_categorical(&q, &p).unwrap(), direct.max(0.0));
    }
}

#[test]
fn concrete_argmax_frequencies_follow_softmax() {
    let logits = [1.0, 0.0, -1.0];
    let l = CategoricalLogits::new(logits.to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let n = 50_000;
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let g = gumbel_noise::<f64, _>(&mut rng, 3);
        let y = sample_concrete(&l, 0.5, &g).unwrap();
        let best = (0..3).fold(0, |b, i| if y[i] > y[b] { i } else { b });
        counts[best] += 1;
    }
    for (c, p) in counts.iter().zip(softmax(&logits)) {
        assert!((*c as f64 / n as f64 - p).abs() < 0.01, "{counts:?}");
    }
}

#[test]
fn gumbel_max_frequencies_follow_softmax() {
    let logits = [0.3, -0.8, 1.1, 0.0];
    let l = CategoricalLogits::new(logits.to_vec()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let n = 100_000;
    let mut counts = [0usize; 4];
    for _ in 0..n {
        counts[gumbel_max(&l, &gumbel_noise::<f64, _>(&mut rng, 4))] += 1;
    }
    for (c, p) in counts.iter().zip(softmax(&logits)) {
        assert!((*c as f64 / n as f64 - p).abs() < 0.01, "{counts:?}");
    }
}

proptest! {
    #[test]
    fn concrete_sample_lies_on_simplex(
        logits in prop::collection::vec(-8f64..8.0, 2..7),
        seed in any::<u64>(),
        lambda in 0.05f64..3.0,
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = gumbel_noise::<f64, _>(&mut rng, logits.len());
        let y = sample_concrete(&CategoricalLogits::new(logits).unwrap(), lambda, &g).unwrap();
        prop_assert!((y.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        prop_assert!(y.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn lower_temperature_sharpens_the_sample(
        logits in prop::collection::vec(-4f64..4.0, 2..7),
        seed in any::<u64>(),
    ) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = gumbel_noise::<f64, _>(&mut rng, logits.len());
        let l = CategoricalLogits::new(logits).unwrap();
        let maxes: Vec<f64> = [1.0, 0.5, 0.1, 0.01]
            .iter()
            .map(|&lam| sample_concrete(&l, lam, &g).unwrap().into_iter().fold(0.0, f64::max))
            .collect();
        prop_assert!(maxes.windows(2).all(|w| w[1] >= w[0] - 1e-12), "{:?}", maxes);
    }

    #[test]
    fn kls_are_nonnegative_and_vanish_on_equal_arguments(
        mq in prop::collection::vec(-3f64..3.0, 4),
        sq in prop::collection::vec(-2f64..2.0, 4),
        mp in prop::collection::vec(-3f64..3.0, 4),
        sp in prop::collection::vec(-2f64..2.0, 4),
    ) {
        let q = GaussianParams::new(mq.clone(), sq.clone()).unwrap();
        let p = GaussianParams::new(mp.clone(), sp.clone()).unwrap();
        prop_assert!(kl_gaussian_gaussian(&q, &p).unwrap() >= 0.0);
        prop_assert!(kl_gaussian_gaussian(&q, &q).unwrap().abs() < 1e-9);
        let (a, b) = (softmax(&mq), softmax(&mp));
        prop_assert!(kl_categorical(&a, &b).unwrap() >= 0.0);
        prop_assert!(kl_categorical(&a, &a).unwrap().abs() < 1e-9);
    }
}
