mod common;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rough_chaos::coeff::{builtin, empirical_projection_grad, EmpiricalMeasureView};
use rough_chaos::driver::{DriverKind, DriverSampler, GridPath, GridSpec};
use rough_chaos::lift::{chen_eval, lift_cross};
use rough_chaos::measure::{wasserstein_1d, wasserstein_assignment, EmpiricalMeasure};
use rough_chaos::variation::{local_accumulation, p_variation_pow, TwoIndexFn};

use common::*;

#[test]
fn p_variation_matches_partition_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..200 {
        let points = rng.random_range(2..=12);
        let table: Vec<f64> = (0..points * points).map(|_| rng.random_range(-2.0..2.0)).collect();
        let g = |a: usize, b: usize| table[a * points + b];
        let p = rng.random_range(1.0..4.0);
        let a = rng.random_range(0..points);
        let b = rng.random_range(a..points);
        assert_eq!(p_variation_pow(g, p, (a, b)).unwrap(), exhaustive_p_variation_pow(g, p, (a, b)));
    }
}

#[test]
fn wasserstein_matches_factorial_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..150 {
        let n = rng.random_range(1..=7);
        let d = if case % 3 == 0 { 1 } else { rng.random_range(1..=3) };
        let r = [1.0, 1.5, 2.0][case % 3];
        let (a, b) = (random_cloud(&mut rng, n, d), random_cloud(&mut rng, n, d));
        let oracle = factorial_wasserstein(&a, &b, d, r);
        let (ma, mb) = (EmpiricalMeasure::new(a, d).unwrap(), EmpiricalMeasure::new(b, d).unwrap());
        assert!((wasserstein_assignment(&ma, &mb, r).unwrap() - oracle).abs() < 1e-10);
        if d == 1 {
            assert!((wasserstein_1d(&ma, &mb, r).unwrap() - oracle).abs() < 1e-10);
        }
    }
}

#[test]
fn unequal_one_dimensional_sizes_match_replicated_assignment() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for _ in 0..100 {
        let (n, m) = (rng.random_range(1..=6), rng.random_range(1..=6));
        let (a, b) = (random_cloud(&mut rng, n, 1), random_cloud(&mut rng, m, 1));
        // each atom of a repeated m times and of b repeated n times: equal masses 1/(n m)
        let rep_a: Vec<f64> = a.iter().flat_map(|&v| std::iter::repeat_n(v, m)).collect();
        let rep_b: Vec<f64> = b.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
        let oracle = wasserstein_assignment(
            &EmpiricalMeasure::new(rep_a, 1).unwrap(),
            &EmpiricalMeasure::new(rep_b, 1).unwrap(),
            1.0,
        )
        .unwrap();
        let got = wasserstein_1d(&EmpiricalMeasure::from_scalars(&a).unwrap(), &EmpiricalMeasure::from_scalars(&b).unwrap(), 1.0)
            .unwrap();
        assert!((got - oracle).abs() < 1e-10, "{got} vs {oracle}");
    }
}

/// `(x^1..x^n) ↦ F(x^i, μ^n)` differentiated by central differences.
fn projection_fd_error(name: &str, d: usize, m: usize, seed: u64) -> f64 {
    let coeff = builtin(name, 0.8, 0.6, d, m).unwrap();
    let n = 8;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let states: Vec<f64> = (0..n * d).map(|_| rng.random_range(-1.5..1.5)).collect();
    let mut worst = 0.0f64;
    for i in 0..n {
        let f_i = |x: &[f64]| {
            let mu = EmpiricalMeasureView::new(x, d).unwrap();
            let mut out = vec![0.0; d * m];
            coeff.eval_f(mu.atom(i), &mu, &mut out);
            out
        };
        for j in 0..n {
            let grad = empirical_projection_grad(coeff.as_ref(), i, j, &EmpiricalMeasureView::new(&states, d).unwrap()).unwrap();
            let scale = grad.iter().fold(0.0f64, |s, v| s.max(v.abs())).max(1e-3);
            for l in 0..d {
                let fd = central_difference(f_i, &states, j * d + l, 1e-5);
                for ab in 0..d * m {
                    worst = worst.max((fd[ab] - grad[ab * d + l]).abs() / scale);
                }
            }
        }
    }
    worst
}

#[test]
fn projected_derivatives_match_finite_differences() {
    for name in ["conv_tanh", "moment_tanh"] {
        for (d, m) in [(1, 1), (2, 3)] {
            let err = projection_fd_error(name, d, m, 5);
            assert!(err < 1e-6, "{name} d={d} m={m}: {err}");
        }
    }
}

/// Left-point Riemann sum of `∫ (X_r - X_s) ⊗ dY_r` after linear refinement of every step.
fn riemann_iterated(x: &GridPath, y: &GridPath, from: usize, to: usize, refine: usize) -> Vec<f64> {
    let m = x.dim();
    let mut acc = vec![0.0; m * m];
    for k in from..to {
        let (dx, dy) = (x.increment(k, k + 1), y.increment(k, k + 1));
        let base = x.increment(from, k);
        for s in 0..refine {
            let frac = s as f64 / refine as f64;
            for r in 0..m {
                for c in 0..m {
                    acc[r * m + c] += (base[r] + frac * dx[r]) * dy[c] / refine as f64;
                }
            }
        }
    }
    acc
}

#[test]
fn chen_composition_matches_fine_riemann_sums() {
    let spec = GridSpec::new(1.0, 16, 2).unwrap();
    let paths = DriverSampler::new(DriverKind::Fbm { hurst: 0.45 }, spec).unwrap().ensemble(3, 2);
    let blocks = lift_cross(&paths[0], &paths[1]).unwrap();
    for (from, to) in [(0, 16), (3, 11), (7, 8)] {
        let exact = chen_eval(&blocks, &paths[0], &paths[1], from, to).unwrap();
        let coarse = riemann_iterated(&paths[0], &paths[1], from, to, 64);
        let fine = riemann_iterated(&paths[0], &paths[1], from, to, 128);
        for e in 0..4 {
            // left sums miss ½ Σ dx dy / refine: the error halves with the refinement
            let (ec, ef) = ((coarse[e] - exact[e]).abs(), (fine[e] - exact[e]).abs());
            assert!(ef <= 0.5 * ec + 1e-12, "entry {e} over [{from},{to}]: {ec} -> {ef}");
        }
        let finest = riemann_iterated(&paths[0], &paths[1], from, to, 1 << 14);
        for e in 0..4 {
            assert!((finest[e] - exact[e]).abs() < 1e-3);
        }
    }
}

#[test]
fn fbm_paths_have_the_target_covariance() {
    let hurst = 0.4;
    let spec = GridSpec::new(1.0, 8, 1).unwrap();
    let sampler = DriverSampler::new(DriverKind::Fbm { hurst }, spec).unwrap();
    let reps = 20_000u64;
    let mut sums = vec![0.0; 81];
    let mut squares = vec![0.0; 81];
    for index in 0..reps {
        let p = sampler.sample(99, index);
        for a in 0..9 {
            for b in 0..9 {
                let v = p.point(a)[0] * p.point(b)[0];
                sums[a * 9 + b] += v;
                squares[a * 9 + b] += v * v;
            }
        }
    }
    let cov = |s: f64, t: f64| 0.5 * (s.powf(2.0 * hurst) + t.powf(2.0 * hurst) - (t - s).abs().powf(2.0 * hurst));
    for a in 1..9 {
        for b in 1..9 {
            let mean = sums[a * 9 + b] / reps as f64;
            let var = squares[a * 9 + b] / reps as f64 - mean * mean;
            let se = (var / reps as f64).sqrt();
            let target = cov(spec.time(a), spec.time(b));
            assert!((mean - target).abs() < 5.0 * se, "({a},{b}): {mean} vs {target} (se {se})");
        }
    }
}

#[test]
fn accumulation_of_elapsed_time_is_a_floor() {
    // dyadic meshes keep every span exact
    for steps in [2usize, 8, 64, 128] {
        let spec = GridSpec::new(2.0, steps, 1).unwrap();
        let varpi = TwoIndexFn::time_span(&spec);
        for alpha in [0.25, 0.3, 0.5, 0.7, 1.0, 3.0] {
            let h = spec.mesh();
            // first grid point at least α past the previous one, in whole steps
            let per = (alpha / h).ceil() as usize;
            let expected = spec.steps / per;
            assert_eq!(local_accumulation(&varpi, alpha, (0, spec.steps)).unwrap(), expected, "K={} α={alpha}", spec.steps);
        }
    }
}

#[test]
fn halved_maximum_can_undercount_the_sum() {
    // quadratic mass on each half: one window of the sum per half, but each part
    // reaches half the threshold only once
    let steps = 200;
    let half = steps / 2;
    let first = TwoIndexFn::from_fn(steps + 1, "v1", |s, t| {
        let len = (t.min(half) as f64 - s.min(half) as f64) / half as f64;
        len * len
    });
    let second = TwoIndexFn::from_fn(steps + 1, "v2", |s, t| {
        let len = (t.max(half) as f64 - s.max(half) as f64) / half as f64;
        len * len
    });
    let n = local_accumulation(&first.sum(&second).unwrap(), 1.0, (0, steps)).unwrap();
    let n1 = local_accumulation(&first, 0.5, (0, steps)).unwrap();
    let n2 = local_accumulation(&second, 0.5, (0, steps)).unwrap();
    assert_eq!((n, n1, n2), (2, 1, 1));
    assert!(n <= n1 + n2);
}
