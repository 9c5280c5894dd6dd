//! Gaussian drivers sampled on a uniform time grid.
//!
//! Brownian paths are built from independent `N(0, h)` increments. Fractional
//! Brownian motion is sampled exactly at the grid points by applying the
//! lower-triangular factor of its covariance matrix
//! `R(s, t) = (s^{2H} + t^{2H} - |t - s|^{2H}) / 2` to standard normals. The
//! factor is computed once per [`DriverSampler`] and shared by every path of an
//! ensemble.

use std::sync::Arc;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed::stream_rng;

/// Uniform grid `t_k = k T / K`, `k = 0..=K`, carrying an `m`-dimensional driver.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub horizon: f64,
    pub steps: usize,
    pub dim: usize,
}

impl GridSpec {
    pub fn new(horizon: f64, steps: usize, dim: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::InvalidGrid(format!("horizon must be positive, got {horizon}")));
        }
        if steps < 2 {
            return Err(Error::InvalidGrid(format!("need at least 2 steps, got {steps}")));
        }
        if dim == 0 {
            return Err(Error::InvalidGrid("driver dimension must be positive".into()));
        }
        Ok(Self { horizon, steps, dim })
    }

    pub fn mesh(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.horizon / self.steps as f64
    }

    /// Length of `[t_a, t_b]`, computed from the index gap so that equal gaps give equal lengths.
    pub fn span(&self, a: usize, b: usize) -> f64 {
        (b - a) as f64 * self.horizon / self.steps as f64
    }

    pub fn points(&self) -> usize {
        self.steps + 1
    }

    /// The same horizon with `steps / factor` steps.
    pub fn coarsened(&self, factor: usize) -> Result<Self> {
        if factor == 0 || self.steps % factor != 0 {
            return Err(Error::InvalidGrid(format!(
                "cannot coarsen {} steps by factor {factor}",
                self.steps
            )));
        }
        Self::new(self.horizon, self.steps / factor, self.dim)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum DriverKind {
    Brownian,
    Fbm { hurst: f64 },
}

impl DriverKind {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DriverKind::Brownian => Ok(()),
            DriverKind::Fbm { hurst } => {
                if hurst > 1.0 / 3.0 && hurst <= 1.0 {
                    Ok(())
                } else {
                    Err(Error::HurstOutOfRange(hurst))
                }
            }
        }
    }

    pub fn hurst(&self) -> f64 {
        match *self {
            DriverKind::Brownian => 0.5,
            DriverKind::Fbm { hurst } => hurst,
        }
    }

    /// `E[W_s W_t]` for one scalar component.
    pub fn covariance(&self, s: f64, t: f64) -> f64 {
        match *self {
            DriverKind::Brownian => s.min(t),
            DriverKind::Fbm { hurst } => {
                let two_h = 2.0 * hurst;
                0.5 * (s.powf(two_h) + t.powf(two_h) - (t - s).abs().powf(two_h))
            }
        }
    }
}

/// Where a path came from. `index` is the stream index inside the ensemble.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedTag {
    pub seed: u64,
    pub index: u64,
}

/// One driver trajectory: `(K+1) x m` values, row-major, starting at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct GridPath {
    spec: GridSpec,
    values: Vec<f64>,
    seed_tag: Option<SeedTag>,
}

impl GridPath {
    /// Wraps externally produced values (e.g. non-Gaussian drivers).
    pub fn from_values(spec: GridSpec, values: Vec<f64>, seed_tag: Option<SeedTag>) -> Result<Self> {
        let expected = spec.points() * spec.dim;
        if values.len() != expected {
            return Err(Error::DimensionMismatch {
                expected: format!("{expected} values"),
                got: format!("{}", values.len()),
            });
        }
        if values[..spec.dim].iter().any(|&v| v != 0.0) {
            return Err(Error::InvalidParameter("path must start at the origin".into()));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("path has non-finite entries".into()));
        }
        Ok(Self { spec, values, seed_tag })
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn seed_tag(&self) -> Option<SeedTag> {
        self.seed_tag
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn point(&self, k: usize) -> &[f64] {
        let m = self.spec.dim;
        &self.values[k * m..(k + 1) * m]
    }

    /// Writes `W_{t_a, t_b}` into `out`.
    pub fn increment_into(&self, a: usize, b: usize, out: &mut [f64]) {
        let (pa, pb) = (self.point(a), self.point(b));
        for c in 0..self.spec.dim {
            out[c] = pb[c] - pa[c];
        }
    }

    pub fn increment(&self, a: usize, b: usize) -> Vec<f64> {
        let mut out = vec![0.0; self.spec.dim];
        self.increment_into(a, b, &mut out);
        out
    }

    /// Restriction to every `factor`-th grid point.
    pub fn coarsen(&self, factor: usize) -> Result<GridPath> {
        let spec = self.spec.coarsened(factor)?;
        let m = spec.dim;
        let mut values = Vec::with_capacity(spec.points() * m);
        for k in 0..spec.points() {
            values.extend_from_slice(self.point(k * factor));
        }
        Ok(GridPath { spec, values, seed_tag: self.seed_tag })
    }
}

/// Sampler for one `(kind, spec)` pair. Cheap to clone; the fBm factor is shared.
#[derive(Debug, Clone)]
pub struct DriverSampler {
    kind: DriverKind,
    spec: GridSpec,
    factor: Option<Arc<Vec<f64>>>,
}

impl DriverSampler {
    pub fn new(kind: DriverKind, spec: GridSpec) -> Result<Self> {
        kind.validate()?;
        let factor = match kind {
            DriverKind::Brownian => None,
            DriverKind::Fbm { .. } => Some(Arc::new(covariance_factor(&kind, &spec)?)),
        };
        Ok(Self { kind, spec, factor })
    }

    pub fn kind(&self) -> DriverKind {
        self.kind
    }

    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn sample(&self, seed: u64, index: u64) -> GridPath {
        let GridSpec { steps, dim, .. } = self.spec;
        let mut rng = stream_rng(seed, index);
        let mut values = vec![0.0; (steps + 1) * dim];
        match &self.factor {
            None => {
                let sd = self.spec.mesh().sqrt();
                for k in 0..steps {
                    for c in 0..dim {
                        let z: f64 = rng.sample(StandardNormal);
                        values[(k + 1) * dim + c] = values[k * dim + c] + sd * z;
                    }
                }
            }
            Some(lower) => {
                let mut z = vec![0.0; steps];
                for c in 0..dim {
                    z.iter_mut().for_each(|zi| *zi = rng.sample(StandardNormal));
                    for k in 0..steps {
                        let row = &lower[k * steps..k * steps + k + 1];
                        let v: f64 = row.iter().zip(&z).map(|(l, zi)| l * zi).sum();
                        values[(k + 1) * dim + c] = v;
                    }
                }
            }
        }
        GridPath { spec: self.spec, values, seed_tag: Some(SeedTag { seed, index }) }
    }

    /// Paths `0..n`; path `i` is exactly `sample(seed, i)` whatever the thread schedule.
    pub fn ensemble(&self, seed: u64, n: usize) -> Vec<GridPath> {
        (0..n as u64).into_par_iter().map(|i| self.sample(seed, i)).collect()
    }
}

/// Lower Cholesky factor (dense row-major `K x K`) of the covariance at `t_1..t_K`.
fn covariance_factor(kind: &DriverKind, spec: &GridSpec) -> Result<Vec<f64>> {
    let k = spec.steps;
    let mut cov = DMatrix::from_fn(k, k, |r, c| kind.covariance(spec.time(r + 1), spec.time(c + 1)));
    let chol = match cov.clone().cholesky() {
        Some(ch) => ch,
        None => {
            let max_diag = (0..k).map(|i| cov[(i, i)]).fold(0.0f64, f64::max);
            for i in 0..k {
                cov[(i, i)] += 1e-12 * max_diag;
            }
            cov.cholesky().ok_or(Error::NotPositiveDefinite { steps: k })?
        }
    };
    let l = chol.l();
    let mut out = vec![0.0; k * k];
    for r in 0..k {
        for c in 0..=r {
            out[r * k + c] = l[(r, c)];
        }
    }
    Ok(out)
}

pub fn sample_path(kind: DriverKind, spec: GridSpec, seed: u64, index: u64) -> Result<GridPath> {
    Ok(DriverSampler::new(kind, spec)?.sample(seed, index))
}

pub fn sample_ensemble(kind: DriverKind, spec: GridSpec, seed: u64, n: usize) -> Result<Vec<GridPath>> {
    if n == 0 {
        return Err(Error::InvalidParameter("ensemble size must be positive".into()));
    }
    Ok(DriverSampler::new(kind, spec)?.ensemble(seed, n))
}

/// Two-dimensional `rho`-variation of the covariance over `[t_a, t_b]^2`,
/// restricted to grid partitions, returned as `sup sum |R(rect)|^rho`.
///
/// Windows of at most [`EXHAUSTIVE_STEPS`] steps are enumerated exhaustively.
/// Longer windows use alternating maximization: with the column partition fixed,
/// the optimal row partition is an exact one-dimensional dynamic program, and
/// vice versa. Started from the finest and the coarsest partition pairs; the
/// larger local optimum is returned.
pub fn covariance_two_d_variation(
    kind: DriverKind,
    spec: &GridSpec,
    window: (usize, usize),
    rho: f64,
) -> Result<f64> {
    kind.validate()?;
    if rho < 1.0 {
        return Err(Error::InvalidParameter(format!("rho must be >= 1, got {rho}")));
    }
    let (a, b) = window;
    if a > b || b > spec.steps {
        return Err(Error::IndexOutOfRange { index: b, limit: spec.steps });
    }
    let table = RectTable::new(kind, spec, a, b);
    let len = b - a;
    if len == 0 {
        return Ok(0.0);
    }
    if len <= EXHAUSTIVE_STEPS {
        Ok(table.exhaustive(rho))
    } else {
        Ok(table.alternating(rho))
    }
}

/// Window length (in steps) up to which the 2-D variation is enumerated exactly.
pub const EXHAUSTIVE_STEPS: usize = 8;

struct RectTable {
    len: usize,
    cov: Vec<f64>,
}

impl RectTable {
    fn new(kind: DriverKind, spec: &GridSpec, a: usize, b: usize) -> Self {
        let len = b - a;
        let pts = len + 1;
        let mut cov = vec![0.0; pts * pts];
        for r in 0..pts {
            for c in 0..pts {
                cov[r * pts + c] = kind.covariance(spec.time(a + r), spec.time(a + c));
            }
        }
        Self { len, cov }
    }

    /// `E[W_{u,v} W_{x,y}]` for local indices.
    fn rect(&self, u: usize, v: usize, x: usize, y: usize) -> f64 {
        let p = self.len + 1;
        self.cov[v * p + y] - self.cov[v * p + x] - self.cov[u * p + y] + self.cov[u * p + x]
    }

    fn score(&self, rows: &[usize], cols: &[usize], rho: f64) -> f64 {
        let mut s = 0.0;
        for r in rows.windows(2) {
            for c in cols.windows(2) {
                s += self.rect(r[0], r[1], c[0], c[1]).abs().powf(rho);
            }
        }
        s
    }

    fn exhaustive(&self, rho: f64) -> f64 {
        let interior = self.len - 1;
        let partitions: Vec<Vec<usize>> = (0u32..1 << interior)
            .map(|mask| {
                let mut p = vec![0];
                p.extend((1..self.len).filter(|&k| mask & (1 << (k - 1)) != 0));
                p.push(self.len);
                p
            })
            .collect();
        let mut best = 0.0f64;
        for rows in &partitions {
            for cols in &partitions {
                best = best.max(self.score(rows, cols, rho));
            }
        }
        best
    }

    /// Best partition of `0..=len` against a fixed transversal partition.
    fn best_response(&self, fixed: &[usize], rho: f64) -> (Vec<usize>, f64) {
        let l = self.len;
        let mut best = vec![f64::NEG_INFINITY; l + 1];
        let mut prev = vec![0usize; l + 1];
        best[0] = 0.0;
        for v in 1..=l {
            for u in 0..v {
                let gain: f64 = fixed
                    .windows(2)
                    .map(|c| self.rect(u, v, c[0], c[1]).abs().powf(rho))
                    .sum();
                let cand = best[u] + gain;
                if cand > best[v] {
                    best[v] = cand;
                    prev[v] = u;
                }
            }
        }
        let mut part = vec![l];
        let mut v = l;
        while v > 0 {
            v = prev[v];
            part.push(v);
        }
        part.reverse();
        (part, best[l])
    }

    fn alternating(&self, rho: f64) -> f64 {
        let finest: Vec<usize> = (0..=self.len).collect();
        let coarsest = vec![0, self.len];
        let mut overall = 0.0f64;
        for start in [finest, coarsest] {
            let mut cols = start;
            let mut value = f64::NEG_INFINITY;
            for _ in 0..64 {
                let (rows, _) = self.best_response(&cols, rho);
                let (next_cols, v) = self.best_response(&rows, rho);
                cols = next_cols;
                if v <= value * (1.0 + 1e-14) {
                    value = value.max(v);
                    break;
                }
                value = v;
            }
            overall = overall.max(value);
        }
        overall
    }
}
