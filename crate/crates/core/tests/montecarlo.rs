use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use stationary_compat::hyperball::{
    cap_probability, expected_nn_angle, mc_expected_distance, sample_in_ball, HyperballSpec,
};

fn ball(center: Vec<f64>, r: f64) -> HyperballSpec {
    HyperballSpec::new(center, r).unwrap()
}

/// Rejection sampling from the enclosing cube: slow, but shares nothing with
/// the library sampler.
fn rejection_mean_distance(d: usize, n: usize, seed: u64) -> (f64, f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let draw = |rng: &mut ChaCha8Rng| loop {
        let p: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
        if p.iter().map(|x| x * x).sum::<f64>() <= 1.0 {
            return p;
        }
    };
    let (mut s, mut s2) = (0.0, 0.0);
    for _ in 0..n {
        let a = draw(&mut rng);
        let b = draw(&mut rng);
        let dist = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        s += dist;
        s2 += dist * dist;
    }
    let mean = s / n as f64;
    let var = (s2 - n as f64 * mean * mean) / (n as f64 - 1.0);
    (mean, (var / n as f64).sqrt())
}

#[test]
fn ball_line_picking_against_rejection_sampler() {
    for (d, exact) in [(2usize, 128.0 / (45.0 * std::f64::consts::PI)), (3, 36.0 / 35.0)] {
        let (bf, bf_se) = rejection_mean_distance(d, 400_000, 17);
        let unit = ball(vec![0.0; d], 1.0);
        let lib = mc_expected_distance(&unit, &unit, 400_000, 18).unwrap();
        let se = (bf_se.powi(2) + lib.std_error.powi(2)).sqrt();
        assert!((bf - lib.mean).abs() < 4.0 * se, "d={d}: {bf} vs {}", lib.mean);
        assert!((bf - exact).abs() < 4.0 * bf_se, "rejection sampler off at d={d}");
    }
}

#[test]
fn point_masses_give_exact_centre_distance() {
    let a = ball(vec![0.0, 3.0], 0.0);
    let b = ball(vec![4.0, 0.0], 0.0);
    let est = mc_expected_distance(&a, &b, 1000, 1).unwrap();
    assert_eq!(est.mean, 5.0);
    assert_eq!(est.std_error, 0.0);
}

#[test]
fn samples_stay_inside_the_ball() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for d in [1usize, 2, 5, 50] {
        let b = ball((0..d).map(|i| i as f64).collect(), 0.7);
        let mut radial = 0.0;
        let n = 20_000;
        for _ in 0..n {
            let x = sample_in_ball(&b, &mut rng);
            let r = x.iter().zip(&b.center).map(|(a, c)| (a - c).powi(2)).sum::<f64>().sqrt();
            assert!(r <= 0.7 + 1e-12);
            radial += r;
        }
        // E[r] = d/(d+1) · R for the uniform ball
        let want = d as f64 / (d as f64 + 1.0) * 0.7;
        assert!((radial / n as f64 - want).abs() < 0.01, "d={d}");
    }
}

#[test]
fn larger_shift_never_brings_balls_closer() {
    let mut prev = 0.0;
    for shift in [0.0, 0.5, 1.0, 2.0, 4.0] {
        let a = ball(vec![0.0; 8], 1.0);
        let b = ball([vec![shift], vec![0.0; 7]].concat(), 0.5);
        let est = mc_expected_distance(&a, &b, 50_000, 5).unwrap();
        assert!(est.mean >= prev - 3.0 * est.std_error);
        prev = est.mean;
    }
}

#[test]
fn nn_angle_shrinks_with_population_and_grows_with_dimension() {
    for d in [3usize, 8, 64] {
        assert!(expected_nn_angle(100, d).unwrap() < expected_nn_angle(10, d).unwrap());
    }
    assert!(expected_nn_angle(10, 64).unwrap() > expected_nn_angle(10, 8).unwrap());
    assert!(expected_nn_angle(10, 2).is_err());
    assert!(cap_probability(0, 5).is_err());
}

fn centre(d: usize) -> impl Strategy<Value = Vec<f64>> {
    // halves in [-8, 8]: sums and differences stay exact
    prop::collection::vec((-16i32..=16).prop_map(|v| v as f64 / 2.0), d)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn common_translation_is_bit_exact(
        (a, b, t) in (1usize..6).prop_flat_map(|d| (centre(d), centre(d), centre(d))),
        ra in 0.0f64..2.0, rb in 0.0f64..2.0, seed in any::<u64>()
    ) {
        let shift = |c: &[f64]| c.iter().zip(&t).map(|(x, y)| x + y).collect::<Vec<_>>();
        let base = mc_expected_distance(&ball(a.clone(), ra), &ball(b.clone(), rb), 3000, seed).unwrap();
        let moved = mc_expected_distance(&ball(shift(&a), ra), &ball(shift(&b), rb), 3000, seed).unwrap();
        prop_assert_eq!(base, moved);
    }

    #[test]
    fn symmetric_in_distribution(
        (a, b) in (1usize..6).prop_flat_map(|d| (centre(d), centre(d))),
        ra in 0.1f64..2.0, rb in 0.1f64..2.0, seed in any::<u64>()
    ) {
        let ab = mc_expected_distance(&ball(a.clone(), ra), &ball(b.clone(), rb), 20_000, seed).unwrap();
        let ba = mc_expected_distance(&ball(b, rb), &ball(a, ra), 20_000, seed ^ 1).unwrap();
        let se = (ab.std_error.powi(2) + ba.std_error.powi(2)).sqrt();
        prop_assert!((ab.mean - ba.mean).abs() <= 5.0 * se + 1e-12);
    }

    #[test]
    fn mean_within_geometric_bounds(
        (a, b) in (1usize..6).prop_flat_map(|d| (centre(d), centre(d))),
        ra in 0.0f64..2.0, rb in 0.0f64..2.0, seed in any::<u64>()
    ) {
        let gap = a.iter().zip(&b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
        let est = mc_expected_distance(&ball(a, ra), &ball(b, rb), 5000, seed).unwrap();
        prop_assert!(est.mean >= 0.0);
        prop_assert!(est.mean <= gap + ra + rb + 1e-12);
        // Jensen: E‖δ + X‖ ≥ ‖δ‖ for zero-mean offsets
        prop_assert!(est.mean >= gap - 4.0 * est.std_error - 1e-12);
    }
}
