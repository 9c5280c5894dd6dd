//! Acceptance suite: one PASS/FAIL line per criterion, run in order on a single
//! test thread so the report is readable and timings are not polluted.

mod common;

use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use rough_chaos::coeff::{builtin, empirical_projection_grad, EmpiricalMeasureView};
use rough_chaos::driver::{DriverKind, DriverSampler, GridSpec};
use rough_chaos::experiments::refine::{refinement_slope, self_refinement, CoarseLift, RefinementConfig};
use rough_chaos::experiments::{emit_report, run, ExperimentConfig, ExperimentKind, ExperimentReport, SampleLaw};
use rough_chaos::lift::{build_empirical_setup, lift_residuals};
use rough_chaos::measure::{wasserstein_1d, wasserstein_assignment, EmpiricalMeasure};
use rough_chaos::solver::SchemeKind;
use rough_chaos::variation::{local_accumulation, p_variation_pow, TwoIndexFn};

use common::*;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome { pass, detail: detail.into() }
}

fn algebraic_exactness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (mut chen, mut ibp) = (0.0f64, 0.0f64);
    for case in 0..100 {
        let n = rng.random_range(1..=8);
        let steps = rng.random_range(2..=64);
        let m = rng.random_range(1..=3);
        let kind = if case % 2 == 0 {
            DriverKind::Brownian
        } else {
            DriverKind::Fbm { hurst: rng.random_range(0.34..0.9) }
        };
        let spec = GridSpec::new(rng.random_range(0.5..2.0), steps, m).unwrap();
        let paths = DriverSampler::new(kind, spec).unwrap().ensemble(rng.random(), n);
        let setup = build_empirical_setup(paths, case % 3 == 0).unwrap();
        for i in 0..n {
            for j in 0..n {
                let r = lift_residuals(&setup, i, j, 1).unwrap();
                chen = chen.max(r.chen);
                ibp = ibp.max(r.integration_by_parts);
            }
        }
    }
    outcome(chen < 1e-10 && ibp < 1e-10, format!("max relative Chen residual {chen:.2e}, integration by parts {ibp:.2e}"))
}

fn oracle_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut pvar_mismatch = 0;
    let mut windows = 0;
    for case in 0..1000 {
        let points = rng.random_range(2..=12);
        let p = rng.random_range(1.0..4.0);
        let table: Vec<f64> = if case % 2 == 0 {
            (0..points * points).map(|_| rng.random_range(-2.0..2.0)).collect()
        } else {
            // increments of a random walk
            let mut x = vec![0.0];
            for _ in 1..points {
                x.push(x.last().unwrap() + rng.random_range(-1.0..1.0));
            }
            (0..points * points).map(|e| x[e % points] - x[e / points]).collect()
        };
        let g = |a: usize, b: usize| table[a * points + b];
        for a in 0..points {
            for b in a..points {
                windows += 1;
                if p_variation_pow(g, p, (a, b)).unwrap() != exhaustive_p_variation_pow(g, p, (a, b)) {
                    pvar_mismatch += 1;
                }
            }
        }
    }
    let mut w_err = 0.0f64;
    for case in 0..500 {
        let n = rng.random_range(1..=7);
        let d = if case % 2 == 0 { 1 } else { rng.random_range(2..=3) };
        let r = rng.random_range(1.0..3.0);
        let (a, b) = (random_cloud(&mut rng, n, d), random_cloud(&mut rng, n, d));
        let oracle = factorial_wasserstein(&a, &b, d, r);
        let (ma, mb) = (EmpiricalMeasure::new(a, d).unwrap(), EmpiricalMeasure::new(b, d).unwrap());
        w_err = w_err.max((wasserstein_assignment(&ma, &mb, r).unwrap() - oracle).abs());
        if d == 1 {
            w_err = w_err.max((wasserstein_1d(&ma, &mb, r).unwrap() - oracle).abs());
        }
    }
    outcome(
        pvar_mismatch == 0 && w_err < 1e-10,
        format!("p-variation mismatches {pvar_mismatch}/{windows} windows, max W error {w_err:.2e}"),
    )
}

fn derivative_correctness() -> Outcome {
    let mut worst = 0.0f64;
    let n = 8;
    for name in ["conv_tanh", "moment_tanh"] {
        for (d, m) in [(1, 1), (2, 2), (3, 1)] {
            let coeff = builtin(name, 0.9, 0.7, d, m).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(3 + d as u64);
            let states: Vec<f64> = (0..n * d).map(|_| rng.random_range(-2.0..2.0)).collect();
            for i in 0..n {
                let f_i = |x: &[f64]| {
                    let mu = EmpiricalMeasureView::new(x, d).unwrap();
                    let mut out = vec![0.0; d * m];
                    coeff.eval_f(mu.atom(i), &mu, &mut out);
                    out
                };
                for j in 0..n {
                    let view = EmpiricalMeasureView::new(&states, d).unwrap();
                    let grad = empirical_projection_grad(coeff.as_ref(), i, j, &view).unwrap();
                    let norm = grad.iter().map(|v| v * v).sum::<f64>().sqrt();
                    let mut diff = 0.0;
                    for l in 0..d {
                        let fd = central_difference(f_i, &states, j * d + l, 1e-5);
                        diff += (0..d * m).map(|ab| (fd[ab] - grad[ab * d + l]).powi(2)).sum::<f64>();
                    }
                    worst = worst.max(diff.sqrt() / norm.max(1e-12));
                }
            }
        }
    }
    outcome(worst < 1e-6, format!("max relative error {worst:.2e} at n = {n}"))
}

fn iid_config(ns: Vec<usize>, replications: usize, law: SampleLaw, dim: usize, n_ref: usize) -> ExperimentConfig {
    let mut cfg = ExperimentConfig::new(ExperimentKind::IidRate);
    cfg.ns = ns;
    cfg.replications = replications;
    cfg.iid.law = law;
    cfg.iid.dim = dim;
    cfg.n_ref = n_ref;
    cfg
}

fn iid_rate() -> Outcome {
    let one = run(&iid_config((4..=12).map(|e| 1 << e).collect(), 200, SampleLaw::Normal, 1, 4096), 1).unwrap();
    let fit1 = one.fit("w1").unwrap().clone();
    let three = run(&iid_config((4..=10).map(|e| 1 << e).collect(), 64, SampleLaw::Uniform, 3, 1 << 14), 1).unwrap();
    let fit3 = three.fit("w1").unwrap().clone();
    let pass = (-0.57..=-0.43).contains(&fit1.slope)
        && fit1.r_squared > 0.98
        && (-0.45..=-0.23).contains(&fit3.slope);
    outcome(
        pass,
        format!(
            "d=1 slope {:.4} (r^2 {:.4}); d=3 slope {:.4} (r^2 {:.4})",
            fit1.slope, fit1.r_squared, fit3.slope, fit3.r_squared
        ),
    )
}

fn chaos_default() -> ExperimentConfig {
    // every field at its default: T=1, K=256, d=m=1, moment_tanh a=b=0.5, ns 16..512,
    // 64 replications, n_ref 4096, Brownian driver, compensated scheme
    ExperimentConfig::new(ExperimentKind::ChaosRate)
}

fn chaos_rate(report: &ExperimentReport) -> Outcome {
    let fit = report.fit("sup_t_w1").unwrap();
    outcome(
        (-0.65..=-0.35).contains(&fit.slope) && fit.r_squared > 0.9 && !report.too_many_aborts(),
        format!("slope {:.4}, r^2 {:.4}, aborted {}/{}", fit.slope, fit.r_squared, report.aborted_units, report.units),
    )
}

fn coupling_gap() -> (Outcome, Duration) {
    let start = Instant::now();
    let mut cfg = chaos_default();
    cfg.experiment = Some(ExperimentKind::Coupling);
    let report = run(&cfg, 1).unwrap();
    let fit = report.fit("sup_i_mean_sup_t_gap").unwrap();
    let means: Vec<f64> = report.summary_for("sup_i_mean_sup_t_gap").iter().map(|s| s.mean).collect();
    let w1 = report.fit("sup_t_w1_gap").unwrap();
    (
        outcome(
            fit.slope < -0.3 && !report.too_many_aborts(),
            format!(
                "sup_i gap slope {:.4} (r^2 {:.4}), means {:?}; sup_t W1 gap slope {:.4}",
                fit.slope,
                fit.r_squared,
                means.iter().map(|m| format!("{m:.3e}")).collect::<Vec<_>>(),
                w1.slope
            ),
        ),
        start.elapsed(),
    )
}

fn scheme_order() -> Outcome {
    let cfg = RefinementConfig {
        n: 16,
        fine_steps: 1024,
        levels: vec![64, 128, 256, 512],
        replications: 32,
        seed: 7,
        coefficient: "moment_tanh".into(),
        a: 0.5,
        b: 0.5,
        init: SampleLaw::Normal,
        lift: CoarseLift::FromFine,
    };
    let comp = refinement_slope(&self_refinement(&cfg, SchemeKind::Compensated).unwrap()).unwrap();
    let euler = refinement_slope(&self_refinement(&cfg, SchemeKind::Euler).unwrap()).unwrap();
    outcome(
        comp.slope <= -0.8 && euler.slope <= -0.4,
        format!("compensated log2-slope {:.4}, Euler {:.4}", comp.slope, euler.slope),
    )
}

fn determinism(first: &ExperimentReport) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = chaos_default();
    cfg.output.dir = dir.path().join("one");
    let one = emit_report(first, &cfg).unwrap();
    let eight = run(&cfg, 8).unwrap();
    cfg.output.dir = dir.path().join("eight");
    let other = emit_report(&eight, &cfg).unwrap();
    let (a, b) = (std::fs::read(one.detail).unwrap(), std::fs::read(other.detail).unwrap());
    outcome(a == b && !a.is_empty(), format!("detail files of {} and {} bytes, identical: {}", a.len(), b.len(), a == b))
}

fn accumulation_counter() -> Outcome {
    // elapsed time on dyadic meshes: the count is K / ceil(α / h)
    let mut analytic_ok = true;
    for steps in [2usize, 16, 64, 256] {
        let spec = GridSpec::new(4.0, steps, 1).unwrap();
        let varpi = TwoIndexFn::time_span(&spec);
        for alpha in [0.01, 0.25, 0.3, 1.0, 1.7, 5.0] {
            let per = (alpha / spec.mesh()).ceil() as usize;
            analytic_ok &= local_accumulation(&varpi, alpha, (0, steps)).unwrap() == steps / per;
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let (mut max_form_violations, mut sum_form_violations, mut monotone_violations) = (0, 0, 0);
    for _ in 0..1000 {
        let steps = rng.random_range(1..=48);
        let v1 = powered_additive(&sparse_weights(&mut rng, steps), rng.random_range(0.5..3.0));
        let v2 = powered_additive(&sparse_weights(&mut rng, steps), rng.random_range(0.5..3.0));
        let alpha = rng.random_range(0.05..2.0);
        let n = local_accumulation(&v1.sum(&v2).unwrap(), alpha, (0, steps)).unwrap();
        let n1 = local_accumulation(&v1, alpha / 2.0, (0, steps)).unwrap();
        let n2 = local_accumulation(&v2, alpha / 2.0, (0, steps)).unwrap();
        max_form_violations += usize::from(n > n1.max(n2));
        sum_form_violations += usize::from(n > n1 + n2);
        let mut prev = usize::MAX;
        for k in 1..=8 {
            let count = local_accumulation(&v1, alpha * k as f64 / 4.0, (0, steps)).unwrap();
            monotone_violations += usize::from(count > prev);
            prev = count;
        }
    }
    outcome(
        analytic_ok && max_form_violations == 0 && monotone_violations == 0,
        format!(
            "analytic cases exact: {analytic_ok}; N(α) > max(N1(α/2), N2(α/2)) on {max_form_violations}/1000 pairs \
             (N(α) > N1(α/2) + N2(α/2) on {sum_form_violations}/1000); threshold monotonicity violations {monotone_violations}"
        ),
    )
}

#[test]
fn acceptance() {
    let mut failed = Vec::new();
    let mut report = |id: usize, name: &str, budget: Duration, run: &mut dyn FnMut() -> (Outcome, Duration)| {
        let (out, elapsed) = run();
        let pass = out.pass && elapsed <= budget;
        println!(
            "[{}] criterion {id} {name}: {} ({:.1} s, budget {} s)",
            if pass { "PASS" } else { "FAIL" },
            out.detail,
            elapsed.as_secs_f64(),
            budget.as_secs()
        );
        if !pass {
            failed.push(id);
        }
    };
    let timed = |f: &dyn Fn() -> Outcome| {
        let start = Instant::now();
        let out = f();
        (out, start.elapsed())
    };
    let secs = Duration::from_secs;

    report(1, "algebraic exactness", secs(10), &mut || timed(&algebraic_exactness));
    report(2, "oracle equivalence", secs(30), &mut || timed(&oracle_equivalence));
    report(3, "derivative correctness", secs(5), &mut || timed(&derivative_correctness));
    report(4, "i.i.d. empirical rate", secs(120), &mut || timed(&iid_rate));

    let start = Instant::now();
    let chaos = run(&chaos_default(), 1).unwrap();
    let chaos_time = start.elapsed();
    let (coupling, coupling_time) = coupling_gap();
    // criteria 5 and 6 share one 10 minute budget
    let shared = chaos_time + coupling_time;
    report(5, "propagation-of-chaos rate", secs(600), &mut || (chaos_rate(&chaos), shared));
    let mut coupling = Some(coupling);
    report(6, "coupling gap", secs(600), &mut || (coupling.take().unwrap(), shared));
    report(7, "scheme order", secs(120), &mut || timed(&scheme_order));
    report(8, "determinism", secs(600), &mut || timed(&|| determinism(&chaos)));
    report(9, "accumulation counter", secs(5), &mut || timed(&accumulation_counter));

    assert!(failed.is_empty(), "failing criteria: {failed:?}");
}
