//! Batch experiments: lift diagnostics, i.i.d. Wasserstein rates, propagation of
//! chaos rates and the companion coupling.
//!
//! Every `(n, replication)` unit draws its randomness from
//! `derive_seed(seed, experiment, n, replication)`, so results do not depend on
//! the worker count or on how many replications are requested. Reference systems
//! only depend on `(seed, experiment, replication)` and are shared across `n`.

pub mod config;
pub mod emit;
pub mod refine;

use std::collections::BTreeMap;
use std::time::Instant;

use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;

use crate::coeff::{builtin, MeanFieldCoefficient};
use crate::driver::DriverSampler;
use crate::error::{Error, Result};
use crate::lift::{build_empirical_setup, lift_residuals};
use crate::measure::{
    fit_rate, mean_and_stderr, wasserstein1_to_law, wasserstein_assignment, wasserstein_sorted, EmpiricalMeasure,
    StandardNormal as NormalLaw, UnitUniform,
};
use crate::seed::{derive_seed, stream_rng, tag};
use crate::solver::{coupling_errors, solve_frozen_measure, solve_particle_system, MeasureFlow};
use crate::variation::{empirical_controls, local_accumulation};

pub use config::{ExperimentConfig, ExperimentKind, OutputFormat, SampleLaw};
pub use emit::{emit, EmittedFiles, FitRow, ResultRow, SummaryRow};

/// Largest tolerated fraction of aborted `(n, replication)` units.
pub const MAX_ABORTED_FRACTION: f64 = 0.05;

/// Checkpoint count per axis for the Chen triple check.
const CHEN_CHECKPOINTS: usize = 32;
/// Cross pairs are checked among this many leading particles.
const CROSS_CHECK_PARTICLES: usize = 4;

pub const PARTICLE_GAP_PREFIX: &str = "particle_gap.";
pub const SUP_I_GAP: &str = "sup_i_mean_sup_t_gap";

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentReport {
    pub kind: ExperimentKind,
    pub rows: Vec<ResultRow>,
    pub summary: Vec<SummaryRow>,
    pub fits: Vec<FitRow>,
    pub units: usize,
    pub aborted_units: usize,
}

impl ExperimentReport {
    pub fn aborted_fraction(&self) -> f64 {
        if self.units == 0 {
            0.0
        } else {
            self.aborted_units as f64 / self.units as f64
        }
    }

    pub fn too_many_aborts(&self) -> bool {
        self.aborted_fraction() > MAX_ABORTED_FRACTION
    }

    pub fn fit(&self, metric: &str) -> Option<&FitRow> {
        self.fits.iter().find(|f| f.metric == metric)
    }

    pub fn summary_for(&self, metric: &str) -> Vec<&SummaryRow> {
        self.summary.iter().filter(|s| s.metric == metric).collect()
    }
}

pub fn unit_seed(cfg: &ExperimentConfig, kind: ExperimentKind, n: usize, replication: usize) -> u64 {
    derive_seed(&[cfg.seed, tag(kind.id()), n as u64, replication as u64])
}

pub fn reference_seed(cfg: &ExperimentConfig, kind: ExperimentKind, replication: usize) -> u64 {
    derive_seed(&[cfg.seed, tag(kind.id()), tag("ref"), replication as u64])
}

/// `n x d` draws from `law`, stream 0 of `seed`.
pub fn sample_law(law: SampleLaw, n: usize, d: usize, seed: u64) -> Vec<f64> {
    let mut rng = stream_rng(seed, 0);
    (0..n * d)
        .map(|_| match law {
            SampleLaw::Normal => rng.sample(StandardNormal),
            SampleLaw::Uniform => rng.random::<f64>(),
            SampleLaw::Zero => 0.0,
        })
        .collect()
}

pub fn initial_states(cfg: &ExperimentConfig, n: usize, seed: u64) -> Vec<f64> {
    sample_law(cfg.state.init, n, cfg.state.dim, derive_seed(&[seed, tag("init")]))
}

/// Rows of one unit, plus whether it was aborted.
struct UnitOutput {
    rows: Vec<ResultRow>,
    aborted: bool,
}

struct RowSink {
    kind: ExperimentKind,
    n: usize,
    replication: usize,
    seed: u64,
    started: Instant,
    timing: bool,
    metrics: Vec<(String, f64)>,
}

impl RowSink {
    fn new(cfg: &ExperimentConfig, kind: ExperimentKind, n: usize, replication: usize, seed: u64) -> Self {
        Self { kind, n, replication, seed, started: Instant::now(), timing: cfg.output.timing, metrics: Vec::new() }
    }

    fn push(&mut self, metric: impl Into<String>, value: f64) {
        self.metrics.push((metric.into(), value));
    }

    fn runtime(&self) -> u64 {
        if self.timing {
            self.started.elapsed().as_millis() as u64
        } else {
            0
        }
    }

    fn finish(self) -> UnitOutput {
        let runtime_ms = self.runtime();
        let rows = self
            .metrics
            .into_iter()
            .map(|(metric, value)| ResultRow {
                experiment_id: self.kind.id().into(),
                n: self.n,
                replication: self.replication,
                seed: self.seed,
                metric,
                value,
                runtime_ms,
                aborted: false,
            })
            .collect();
        UnitOutput { rows, aborted: false }
    }

    fn abort(self, primary: &[&str]) -> UnitOutput {
        let runtime_ms = self.runtime();
        let rows = primary
            .iter()
            .map(|metric| ResultRow {
                experiment_id: self.kind.id().into(),
                n: self.n,
                replication: self.replication,
                seed: self.seed,
                metric: (*metric).into(),
                value: f64::NAN,
                runtime_ms,
                aborted: true,
            })
            .collect();
        UnitOutput { rows, aborted: true }
    }
}

fn thread_pool(workers: usize) -> Result<rayon::ThreadPool> {
    rayon::ThreadPoolBuilder::new()
        .num_threads(workers.max(1))
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))
}

/// Validates `cfg` and runs its experiment on `workers` threads.
pub fn run(cfg: &ExperimentConfig, workers: usize) -> Result<ExperimentReport> {
    cfg.validate()?;
    let pool = thread_pool(workers)?;
    pool.install(|| match cfg.kind()? {
        ExperimentKind::Diagnose => run_diagnose(cfg),
        ExperimentKind::IidRate => run_iid_rate(cfg),
        ExperimentKind::ChaosRate => run_chaos_rate(cfg),
        ExperimentKind::Coupling => run_coupling(cfg),
    })
}

fn collect_units(kind: ExperimentKind, cfg: &ExperimentConfig, outputs: Vec<UnitOutput>) -> ExperimentReport {
    let units = outputs.len();
    let aborted_units = outputs.iter().filter(|o| o.aborted).count();
    let mut rows: Vec<ResultRow> = outputs.into_iter().flat_map(|o| o.rows).collect();
    rows.sort_by_key(|r| (r.n, r.replication));
    let summary = summarize(kind, &cfg.ns, &rows);
    ExperimentReport { kind, rows, summary, fits: Vec::new(), units, aborted_units }
}

/// Per-`(metric, n)` means over non-aborted rows, sorted by metric then `n`.
/// Per-particle gaps are folded into the `sup_i` of their means.
pub fn summarize(kind: ExperimentKind, ns: &[usize], rows: &[ResultRow]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(&str, usize), (Vec<f64>, usize)> = BTreeMap::new();
    let mut particle: BTreeMap<usize, BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        if let Some(idx) = r.metric.strip_prefix(PARTICLE_GAP_PREFIX) {
            if !r.aborted {
                let i: usize = idx.parse().unwrap_or(usize::MAX);
                particle.entry(r.n).or_default().entry(i).or_default().push(r.value);
            }
            continue;
        }
        let entry = groups.entry((r.metric.as_str(), r.n)).or_default();
        if r.aborted {
            entry.1 += 1;
        } else {
            entry.0.push(r.value);
        }
    }
    let make = |metric: &str, n: usize, count: usize, aborted: usize, mean: f64, stderr: f64| SummaryRow {
        experiment_id: kind.id().into(),
        metric: metric.into(),
        n,
        count,
        aborted,
        mean,
        stderr,
        log_n: (n as f64).ln(),
        log_mean: if mean > 0.0 { mean.ln() } else { f64::NAN },
    };
    let mut out: Vec<SummaryRow> = groups
        .iter()
        .map(|(&(metric, n), (values, aborted))| {
            let (mean, se) = mean_and_stderr(values);
            make(metric, n, values.len(), *aborted, mean, se)
        })
        .collect();
    for &n in ns {
        if let Some(per_i) = particle.get(&n) {
            let best = per_i
                .values()
                .map(|v| mean_and_stderr(v))
                .fold((f64::NEG_INFINITY, f64::NAN), |acc, cur| if cur.0 > acc.0 { cur } else { acc });
            let count = per_i.values().next().map_or(0, Vec::len);
            let aborted = groups.get(&("sup_t_w1_gap", n)).map_or(0, |g| g.1);
            out.push(make(SUP_I_GAP, n, count, aborted, best.0, best.1));
        }
    }
    out.sort_by(|a, b| a.metric.cmp(&b.metric).then(a.n.cmp(&b.n)));
    out
}

/// Fits `metric` means against `n`. A failed fit becomes a row carrying the error.
pub fn fit_metric(kind: ExperimentKind, summary: &[SummaryRow], metric: &str, log_correction: bool) -> FitRow {
    let points: Vec<&SummaryRow> = summary.iter().filter(|s| s.metric == metric).collect();
    let ns: Vec<usize> = points.iter().map(|s| s.n).collect();
    let means: Vec<f64> = points.iter().map(|s| s.mean).collect();
    let mut row = FitRow {
        experiment_id: kind.id().into(),
        metric: metric.into(),
        log_correction,
        points: points.len(),
        slope: f64::NAN,
        intercept: f64::NAN,
        r_squared: f64::NAN,
        error: String::new(),
    };
    match fit_rate(&ns, &means, log_correction) {
        Ok(fit) => {
            row.slope = fit.slope;
            row.intercept = fit.intercept;
            row.r_squared = fit.r_squared;
        }
        Err(e) => row.error = e.to_string(),
    }
    row
}

fn units(cfg: &ExperimentConfig) -> Vec<(usize, usize)> {
    cfg.ns.iter().flat_map(|&n| (0..cfg.replications).map(move |r| (n, r))).collect()
}

pub fn run_diagnose(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let kind = ExperimentKind::Diagnose;
    let spec = cfg.grid_spec()?;
    let sampler = DriverSampler::new(cfg.driver, spec)?;
    let stride = (spec.steps / CHEN_CHECKPOINTS).max(1);
    let outputs = units(cfg)
        .into_par_iter()
        .map(|(n, rep)| -> Result<UnitOutput> {
            let seed = unit_seed(cfg, kind, n, rep);
            let mut sink = RowSink::new(cfg, kind, n, rep, seed);
            let setup = build_empirical_setup(sampler.ensemble(derive_seed(&[seed, tag("driver")]), n), false)?;
            let (mut chen, mut ibp) = (0.0f64, 0.0f64);
            for i in 0..n {
                let r = lift_residuals(&setup, i, i, stride)?;
                chen = chen.max(r.chen);
                ibp = ibp.max(r.integration_by_parts);
            }
            sink.push("chen_residual_self", chen);
            sink.push("ibp_residual_self", ibp);
            if n >= 2 {
                let (mut chen, mut ibp) = (0.0f64, 0.0f64);
                let lead = n.min(CROSS_CHECK_PARTICLES);
                for i in 0..lead {
                    for j in (0..lead).filter(|&j| j != i) {
                        let r = lift_residuals(&setup, i, j, stride)?;
                        chen = chen.max(r.chen);
                        ibp = ibp.max(r.integration_by_parts);
                    }
                }
                sink.push("chen_residual_cross", chen);
                sink.push("ibp_residual_cross", ibp);
            }
            let controls = empirical_controls(&setup, cfg.analytics.p, cfg.analytics.q)?;
            let violations: usize = controls.iter().map(|c| c.base.superadditivity_violations(1e-9)).sum();
            sink.push("superadditivity_violations", violations as f64);
            let mut histogram: BTreeMap<usize, usize> = BTreeMap::new();
            for c in &controls {
                let count = local_accumulation(&c.root(), cfg.analytics.alpha, (0, spec.steps))?;
                *histogram.entry(count).or_default() += 1;
            }
            let max = histogram.keys().next_back().copied().unwrap_or(0);
            for c in 0..=max {
                sink.push(format!("accumulation_count.{c}"), histogram.get(&c).copied().unwrap_or(0) as f64);
            }
            sink.push("accumulation_max", max as f64);
            Ok(sink.finish())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(collect_units(kind, cfg, outputs))
}

pub fn run_iid_rate(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let kind = ExperimentKind::IidRate;
    let d = cfg.iid.dim;
    let outputs = units(cfg)
        .into_par_iter()
        .map(|(n, rep)| -> Result<UnitOutput> {
            let seed = unit_seed(cfg, kind, n, rep);
            let mut sink = RowSink::new(cfg, kind, n, rep, seed);
            let sample = EmpiricalMeasure::new(sample_law(cfg.iid.law, n, d, seed), d)?;
            let w1 = if d == 1 {
                match cfg.iid.law {
                    SampleLaw::Uniform => wasserstein1_to_law(&sample, &UnitUniform)?,
                    _ => wasserstein1_to_law(&sample, &NormalLaw)?,
                }
            } else {
                // first n atoms of the replication's reference cloud: equal sizes, exact assignment
                let reference = sample_law(cfg.iid.law, cfg.n_ref, d, reference_seed(cfg, kind, rep));
                let reference = EmpiricalMeasure::new(reference[..n * d].to_vec(), d)?;
                wasserstein_assignment(&sample, &reference, 1.0)?
            };
            sink.push("w1", w1);
            Ok(sink.finish())
        })
        .collect::<Result<Vec<_>>>()?;
    let mut report = collect_units(kind, cfg, outputs);
    report.fits.push(fit_metric(kind, &report.summary, "w1", cfg.iid.log_correction));
    Ok(report)
}

fn coefficient(cfg: &ExperimentConfig) -> Result<Box<dyn MeanFieldCoefficient>> {
    builtin(&cfg.coefficient.name, cfg.coefficient.a, cfg.coefficient.b, cfg.state.dim, cfg.grid.dim)
}

/// Reference flow of the independent `n_ref` system of one replication.
struct Reference {
    flow: MeasureFlow,
    /// Sorted snapshots, kept only in `d = 1`.
    sorted: Vec<Vec<f64>>,
}

fn reference_flow(
    cfg: &ExperimentConfig,
    kind: ExperimentKind,
    rep: usize,
    sampler: &DriverSampler,
    coeff: &dyn MeanFieldCoefficient,
) -> Result<Reference> {
    let seed = reference_seed(cfg, kind, rep);
    let setup = build_empirical_setup(sampler.ensemble(derive_seed(&[seed, tag("driver")]), cfg.n_ref), false)?;
    let traj = solve_particle_system(&setup, coeff, &initial_states(cfg, cfg.n_ref, seed), cfg.scheme)?;
    let flow = MeasureFlow::from_trajectories(traj);
    let sorted = if flow.d() == 1 {
        (0..flow.points())
            .map(|k| {
                let mut v = flow.snapshot(k).to_vec();
                v.sort_by(f64::total_cmp);
                v
            })
            .collect()
    } else {
        Vec::new()
    };
    Ok(Reference { flow, sorted })
}

fn sup_t_w1_to_reference(snapshots: impl Iterator<Item = Vec<f64>>, reference: &Reference) -> f64 {
    snapshots
        .zip(&reference.sorted)
        .map(|(mut x, y)| {
            x.sort_by(f64::total_cmp);
            wasserstein_sorted(&x, y, 1.0)
        })
        .fold(0.0, f64::max)
}

/// Runs the per-replication closure for every replication in parallel; each
/// returns the units of all `n` for that replication.
fn per_replication(
    cfg: &ExperimentConfig,
    kind: ExperimentKind,
    primary: &[&str],
    body: impl Fn(usize, usize, &Reference, &mut RowSink) -> Result<()> + Sync,
    coeff: &dyn MeanFieldCoefficient,
    sampler: &DriverSampler,
) -> Result<Vec<UnitOutput>> {
    let nested = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| -> Result<Vec<UnitOutput>> {
            let reference = match reference_flow(cfg, kind, rep, sampler, coeff) {
                Ok(r) => Some(r),
                Err(Error::BlowUp { .. }) => None,
                Err(e) => return Err(e),
            };
            let mut outs = Vec::with_capacity(cfg.ns.len());
            for &n in &cfg.ns {
                let seed = unit_seed(cfg, kind, n, rep);
                let mut sink = RowSink::new(cfg, kind, n, rep, seed);
                let Some(reference) = &reference else {
                    outs.push(sink.abort(primary));
                    continue;
                };
                match body(n, rep, reference, &mut sink) {
                    Ok(()) => outs.push(sink.finish()),
                    Err(Error::BlowUp { .. }) => outs.push(sink.abort(primary)),
                    Err(e) => return Err(e),
                }
            }
            Ok(outs)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(nested.into_iter().flatten().collect())
}

pub fn run_chaos_rate(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let kind = ExperimentKind::ChaosRate;
    let spec = cfg.grid_spec()?;
    let sampler = DriverSampler::new(cfg.driver, spec)?;
    let coeff = coefficient(cfg)?;
    let outputs = per_replication(
        cfg,
        kind,
        &["sup_t_w1"],
        |n, _rep, reference, sink| {
            let seed = sink.seed;
            let setup = build_empirical_setup(sampler.ensemble(derive_seed(&[seed, tag("driver")]), n), false)?;
            let traj = solve_particle_system(&setup, coeff.as_ref(), &initial_states(cfg, n, seed), cfg.scheme)?;
            let w1 = sup_t_w1_to_reference((0..spec.points()).map(|k| traj.snapshot(k).to_vec()), reference);
            sink.push("sup_t_w1", w1);
            Ok(())
        },
        coeff.as_ref(),
        &sampler,
    )?;
    let mut report = collect_units(kind, cfg, outputs);
    report.fits.push(fit_metric(kind, &report.summary, "sup_t_w1", false));
    Ok(report)
}

pub fn run_coupling(cfg: &ExperimentConfig) -> Result<ExperimentReport> {
    let kind = ExperimentKind::Coupling;
    let spec = cfg.grid_spec()?;
    let sampler = DriverSampler::new(cfg.driver, spec)?;
    let coeff = coefficient(cfg)?;
    let d = cfg.state.dim;
    let outputs = per_replication(
        cfg,
        kind,
        &["sup_t_w1_gap"],
        |n, _rep, reference, sink| {
            let seed = sink.seed;
            let setup = build_empirical_setup(sampler.ensemble(derive_seed(&[seed, tag("driver")]), n), false)?;
            let x0 = initial_states(cfg, n, seed);
            let traj = solve_particle_system(&setup, coeff.as_ref(), &x0, cfg.scheme)?;
            let companions = (0..n)
                .map(|i| {
                    solve_frozen_measure(setup.path(i), setup.self_blocks(i), coeff.as_ref(), &reference.flow, &x0[i * d..(i + 1) * d])
                })
                .collect::<Result<Vec<_>>>()?;
            let errors = coupling_errors(&traj, &companions)?;
            for (i, g) in errors.per_particle.iter().enumerate() {
                sink.push(format!("{PARTICLE_GAP_PREFIX}{i}"), *g);
            }
            sink.push("sup_t_w1_gap", errors.sup_t_w1_gap);
            if d == 1 {
                let snapshots = (0..spec.points()).map(|k| companions.iter().map(|c| c[k]).collect::<Vec<f64>>());
                sink.push("companion_sup_t_w1_ref", sup_t_w1_to_reference(snapshots, reference));
            }
            Ok(())
        },
        coeff.as_ref(),
        &sampler,
    )?;
    let mut report = collect_units(kind, cfg, outputs);
    report.fits.push(fit_metric(kind, &report.summary, SUP_I_GAP, false));
    report.fits.push(fit_metric(kind, &report.summary, "sup_t_w1_gap", false));
    Ok(report)
}

/// Writes the report's tables into `cfg.output.dir`.
pub fn emit_report(report: &ExperimentReport, cfg: &ExperimentConfig) -> Result<EmittedFiles> {
    emit(report.kind.id(), &report.rows, &report.summary, &report.fits, &cfg.output.dir, cfg.output.format)
}

/// Spearman rank correlation (average ranks for ties).
pub fn spearman(x: &[f64], y: &[f64]) -> f64 {
    fn ranks(v: &[f64]) -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
        let mut out = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                out[k] = avg;
            }
            i = j + 1;
        }
        out
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let k = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / k, ry.iter().sum::<f64>() / k);
    let cov: f64 = rx.iter().zip(&ry).map(|(a, b)| (a - mx) * (b - my)).sum();
    let vx: f64 = rx.iter().map(|a| (a - mx).powi(2)).sum();
    let vy: f64 = ry.iter().map(|b| (b - my).powi(2)).sum();
    cov / (vx * vy).sqrt()
}
