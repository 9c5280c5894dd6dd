//! Empirical measures, Wasserstein distances and log-log rate fits.

use serde::{Deserialize, Serialize};
use statrs::function::erf::{erfc, erfc_inv};

use crate::error::{Error, Result};
use crate::variation::norm;

/// Uniform empirical measure over the rows of an `n x d` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalMeasure {
    atoms: Vec<f64>,
    d: usize,
}

impl EmpiricalMeasure {
    pub fn new(atoms: Vec<f64>, d: usize) -> Result<Self> {
        if d == 0 || atoms.is_empty() || atoms.len() % d != 0 {
            return Err(Error::EmptyMeasure);
        }
        if atoms.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("measure has non-finite atoms".into()));
        }
        Ok(Self { atoms, d })
    }

    pub fn from_scalars(atoms: &[f64]) -> Result<Self> {
        Self::new(atoms.to_vec(), 1)
    }

    pub fn n(&self) -> usize {
        self.atoms.len() / self.d
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn atoms(&self) -> &[f64] {
        &self.atoms
    }

    pub fn atom(&self, i: usize) -> &[f64] {
        &self.atoms[i * self.d..(i + 1) * self.d]
    }

    fn sorted_scalars(&self) -> Vec<f64> {
        let mut v = self.atoms.clone();
        v.sort_by(f64::total_cmp);
        v
    }
}

fn check_order(r: f64) -> Result<()> {
    if r >= 1.0 && r.is_finite() {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("Wasserstein order must be >= 1, got {r}")))
    }
}

/// `d_r` between two one-dimensional empirical measures via the monotone coupling.
pub fn wasserstein_1d(a: &EmpiricalMeasure, b: &EmpiricalMeasure, r: f64) -> Result<f64> {
    check_order(r)?;
    if a.d != 1 || b.d != 1 {
        return Err(Error::DimensionMismatch { expected: "d = 1".into(), got: format!("{} / {}", a.d, b.d) });
    }
    Ok(wasserstein_sorted(&a.sorted_scalars(), &b.sorted_scalars(), r))
}

/// `d_r` between sorted samples. Unequal sizes integrate the quantile coupling
/// exactly on the merged grid `{i/n} ∪ {j/m}`.
pub fn wasserstein_sorted(x: &[f64], y: &[f64], r: f64) -> f64 {
    let (n, m) = (x.len(), y.len());
    let cost = |u: f64, v: f64| -> f64 {
        let gap = (u - v).abs();
        if r == 1.0 {
            gap
        } else {
            gap.powf(r)
        }
    };
    let total = if n == m {
        x.iter().zip(y).map(|(&u, &v)| cost(u, v)).sum::<f64>() / n as f64
    } else {
        // positions measured in units of 1/(n m)
        let (nu, mu) = (n as u128, m as u128);
        let (mut i, mut j) = (0usize, 0usize);
        let mut pos: u128 = 0;
        let mut acc = 0.0;
        while i < n && j < m {
            let next_x = (i as u128 + 1) * mu;
            let next_y = (j as u128 + 1) * nu;
            let next = next_x.min(next_y);
            acc += (next - pos) as f64 * cost(x[i], y[j]);
            pos = next;
            if next_x == next {
                i += 1;
            }
            if next_y == next {
                j += 1;
            }
        }
        acc / (nu * mu) as f64
    };
    if r == 1.0 {
        total
    } else {
        total.powf(1.0 / r)
    }
}

/// Exact `d_r` between equal-size clouds in any dimension via optimal assignment.
pub fn wasserstein_assignment(a: &EmpiricalMeasure, b: &EmpiricalMeasure, r: f64) -> Result<f64> {
    check_order(r)?;
    if a.d != b.d {
        return Err(Error::DimensionMismatch { expected: format!("d = {}", a.d), got: format!("{}", b.d) });
    }
    if a.n() != b.n() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} atoms", a.n()),
            got: format!("{} atoms", b.n()),
        });
    }
    let n = a.n();
    let mut diff = vec![0.0; a.d];
    let mut cost = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            for (k, dk) in diff.iter_mut().enumerate() {
                *dk = a.atom(i)[k] - b.atom(j)[k];
            }
            cost[i * n + j] = norm(&diff).powf(r);
        }
    }
    let (total, _) = min_cost_assignment(&cost, n);
    Ok((total / n as f64).max(0.0).powf(1.0 / r))
}

/// Minimum-cost perfect matching on a dense `n x n` cost matrix (row-major) by
/// shortest augmenting paths with potentials, `O(n³)`. Returns the optimal cost
/// and, for every row, its assigned column.
pub fn min_cost_assignment(cost: &[f64], n: usize) -> (f64, Vec<usize>) {
    // 1-based arrays: index 0 is the virtual column used as the augmentation root.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    let mut minv = vec![0.0; n + 1];
    let mut used = vec![false; n + 1];
    for row in 1..=n {
        owner[0] = row;
        let mut col0 = 0usize;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[col0] = true;
            let r0 = owner[col0];
            let mut delta = f64::INFINITY;
            let mut col1 = 0usize;
            let crow = &cost[(r0 - 1) * n..r0 * n];
            for col in 1..=n {
                if !used[col] {
                    let cur = crow[col - 1] - u[r0] - v[col];
                    if cur < minv[col] {
                        minv[col] = cur;
                        way[col] = col0;
                    }
                    if minv[col] < delta {
                        delta = minv[col];
                        col1 = col;
                    }
                }
            }
            for col in 0..=n {
                if used[col] {
                    u[owner[col]] += delta;
                    v[col] -= delta;
                } else {
                    minv[col] -= delta;
                }
            }
            col0 = col1;
            if owner[col0] == 0 {
                break;
            }
        }
        loop {
            let col1 = way[col0];
            owner[col0] = owner[col1];
            col0 = col1;
            if col0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0usize; n];
    for col in 1..=n {
        if owner[col] > 0 {
            assignment[owner[col] - 1] = col - 1;
        }
    }
    let total = assignment.iter().enumerate().map(|(i, &j)| cost[i * n + j]).sum();
    (total, assignment)
}

/// Continuous one-dimensional reference law used for exact `W_1` computations.
pub trait ReferenceLaw1d: Send + Sync {
    fn cdf(&self, x: f64) -> f64;
    fn quantile(&self, u: f64) -> f64;
    /// `∫_a^b y dF(y)`, with `a`, `b` possibly infinite.
    fn partial_mean(&self, a: f64, b: f64) -> f64;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct StandardNormal;

impl ReferenceLaw1d for StandardNormal {
    fn cdf(&self, x: f64) -> f64 {
        0.5 * erfc(-x / std::f64::consts::SQRT_2)
    }

    fn quantile(&self, u: f64) -> f64 {
        if u <= 0.0 {
            f64::NEG_INFINITY
        } else if u >= 1.0 {
            f64::INFINITY
        } else {
            -std::f64::consts::SQRT_2 * erfc_inv(2.0 * u)
        }
    }

    fn partial_mean(&self, a: f64, b: f64) -> f64 {
        let phi = |x: f64| {
            if x.is_infinite() {
                0.0
            } else {
                (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
            }
        };
        phi(a) - phi(b)
    }
}

/// Uniform law on `[0, 1]`.
#[derive(Debug, Clone, Copy, Default)]
pub struct UnitUniform;

impl ReferenceLaw1d for UnitUniform {
    fn cdf(&self, x: f64) -> f64 {
        x.clamp(0.0, 1.0)
    }

    fn quantile(&self, u: f64) -> f64 {
        u.clamp(0.0, 1.0)
    }

    fn partial_mean(&self, a: f64, b: f64) -> f64 {
        let (a, b) = (a.clamp(0.0, 1.0), b.clamp(0.0, 1.0));
        0.5 * (b * b - a * a)
    }
}

/// `W_1(μ_n, law) = ∫_0^1 |F_n^{-1}(u) - F^{-1}(u)| du`, integrated exactly piece by piece.
pub fn wasserstein1_to_law(sample: &EmpiricalMeasure, law: &dyn ReferenceLaw1d) -> Result<f64> {
    if sample.d != 1 {
        return Err(Error::DimensionMismatch { expected: "d = 1".into(), got: format!("{}", sample.d) });
    }
    let x = sample.sorted_scalars();
    let n = x.len() as f64;
    let mut total = 0.0;
    for (i, &c) in x.iter().enumerate() {
        let (ua, ub) = (i as f64 / n, (i + 1) as f64 / n);
        let (qa, qb) = (law.quantile(ua), law.quantile(ub));
        let piece = if c <= qa {
            law.partial_mean(qa, qb) - c * (ub - ua)
        } else if c >= qb {
            c * (ub - ua) - law.partial_mean(qa, qb)
        } else {
            let uc = law.cdf(c).clamp(ua, ub);
            c * (uc - ua) - law.partial_mean(qa, c) + law.partial_mean(c, qb) - c * (ub - uc)
        };
        total += piece.max(0.0);
    }
    Ok(total)
}

/// Ordinary least squares of `ln(error)` on `ln(n)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RateFit {
    pub slope: f64,
    pub intercept: f64,
    pub r_squared: f64,
    pub points: Vec<(f64, f64)>,
}

pub fn fit_rate(ns: &[usize], errors: &[f64], log_correction: bool) -> Result<RateFit> {
    if ns.len() != errors.len() {
        return Err(Error::DimensionMismatch {
            expected: format!("{} errors", ns.len()),
            got: format!("{}", errors.len()),
        });
    }
    if ns.len() < 3 {
        return Err(Error::TooFewPoints(ns.len()));
    }
    let mut points = Vec::with_capacity(ns.len());
    for (&n, &e) in ns.iter().zip(errors) {
        if !(e > 0.0) || !e.is_finite() {
            return Err(Error::NonPositiveError { n, value: e });
        }
        let e = if log_correction { e / (1.0 + n as f64).ln() } else { e };
        points.push(((n as f64).ln(), e.ln()));
    }
    let k = points.len() as f64;
    let mx = points.iter().map(|p| p.0).sum::<f64>() / k;
    let my = points.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = points.iter().map(|p| (p.0 - mx).powi(2)).sum();
    let sxy: f64 = points.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let syy: f64 = points.iter().map(|p| (p.1 - my).powi(2)).sum();
    if sxx == 0.0 {
        return Err(Error::InvalidParameter("all sample sizes are equal".into()));
    }
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let ss_res: f64 = points.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum();
    let r_squared = if syy <= f64::EPSILON * k { 1.0 } else { (1.0 - ss_res / syy).clamp(0.0, 1.0) };
    Ok(RateFit { slope, intercept, r_squared, points })
}

/// Sample mean and standard error of the mean.
pub fn mean_and_stderr(values: &[f64]) -> (f64, f64) {
    let k = values.len();
    if k == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / k as f64;
    if k < 2 {
        return (mean, f64::NAN);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1) as f64;
    (mean, (var / k as f64).sqrt())
}
