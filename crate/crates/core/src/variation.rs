//! Variation semi-norms, controls and local accumulation on the simulation grid.
//!
//! Every supremum over partitions or sub-intervals ranges over grid points only.
//! `p`-variations are computed exactly by dynamic programming over the grid:
//! with `best[v] = max_{u < v} best[u] + |G_{u,v}|^p`, the value on `[a, b]` is
//! `best[b]` for the run started at `a`.

use crate::driver::{GridPath, GridSpec};
use crate::error::{Error, Result};
use crate::lift::{chen_table, EmpiricalRoughSetup, Level2Blocks};

/// Non-negative function on grid index pairs `a <= b`, stored densely.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoIndexFn {
    points: usize,
    table: Vec<f64>,
    label: String,
}

impl TwoIndexFn {
    /// Tabulates `f` on `0..points`; the diagonal is forced to zero.
    pub fn from_fn(points: usize, label: impl Into<String>, f: impl Fn(usize, usize) -> f64) -> Self {
        let mut table = vec![0.0; points * points];
        for a in 0..points {
            for b in a + 1..points {
                table[a * points + b] = f(a, b);
            }
        }
        Self { points, table, label: label.into() }
    }

    /// `ϖ(s, t) = t - s` on the grid of `spec`.
    pub fn time_span(spec: &GridSpec) -> Self {
        Self::from_fn(spec.points(), "t-s", |a, b| spec.span(a, b))
    }

    fn from_table(points: usize, table: Vec<f64>, label: impl Into<String>) -> Self {
        Self { points, table, label: label.into() }
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    #[inline]
    pub fn eval(&self, a: usize, b: usize) -> f64 {
        if a >= b {
            0.0
        } else {
            self.table[a * self.points + b]
        }
    }

    pub fn map(&self, label: impl Into<String>, f: impl Fn(f64) -> f64) -> Self {
        Self::from_fn(self.points, label, |a, b| f(self.eval(a, b)))
    }

    pub fn sum(&self, other: &Self) -> Result<Self> {
        if self.points != other.points {
            return Err(Error::DimensionMismatch {
                expected: format!("{} points", self.points),
                got: format!("{}", other.points),
            });
        }
        let label = format!("{}+{}", self.label, other.label);
        Ok(Self::from_fn(self.points, label, |a, b| self.eval(a, b) + other.eval(a, b)))
    }

    /// Triples `r <= s <= t` where `f(r,t) < f(r,s) + f(s,t)` beyond relative `tol`.
    pub fn superadditivity_violations(&self, tol: f64) -> usize {
        let mut count = 0;
        for r in 0..self.points {
            for s in r..self.points {
                for t in s..self.points {
                    let (whole, left, right) = (self.eval(r, t), self.eval(r, s), self.eval(s, t));
                    if whole < left + right - tol * (left + right) {
                        count += 1;
                    }
                }
            }
        }
        count
    }
}

/// A control `w` with the exponents it was built for.
#[derive(Debug, Clone, PartialEq)]
pub struct Control {
    pub base: TwoIndexFn,
    pub p: f64,
    pub q: f64,
}

impl Control {
    pub fn eval(&self, a: usize, b: usize) -> f64 {
        self.base.eval(a, b)
    }

    /// `ϖ = w^{1/p}`, the function whose local accumulation is tracked.
    pub fn root(&self) -> TwoIndexFn {
        let inv = 1.0 / self.p;
        self.base.map(format!("({})^(1/p)", self.base.label), |v| v.powf(inv))
    }
}

/// `sup` over grid sub-partitions of `[a, b]` of `Σ g(t_{k-1}, t_k)^p`, for every
/// window at once. `powered[a * points + b]` must already hold `g(a,b)^p`.
fn partition_sup_all(points: usize, powered: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; points * points];
    let mut best = vec![0.0; points];
    for a in 0..points {
        best[a] = 0.0;
        for v in a + 1..points {
            let mut m = f64::NEG_INFINITY;
            for u in a..v {
                let cand = best[u] + powered[u * points + v];
                if cand > m {
                    m = cand;
                }
            }
            best[v] = m;
            out[a * points + v] = m;
        }
    }
    out
}

fn check_window(window: (usize, usize), points: usize) -> Result<()> {
    let (a, b) = window;
    if b >= points {
        return Err(Error::IndexOutOfRange { index: b, limit: points - 1 });
    }
    if a > b {
        return Err(Error::IndexOutOfRange { index: a, limit: b });
    }
    Ok(())
}

/// `(sup_partitions Σ |g(t_{k-1}, t_k)|^p)^{1/p}` over grid sub-partitions of `window`.
pub fn p_variation(g: impl Fn(usize, usize) -> f64, p: f64, window: (usize, usize)) -> Result<f64> {
    Ok(p_variation_pow(g, p, window)?.powf(1.0 / p))
}

/// Same as [`p_variation`] without the final `1/p` root.
pub fn p_variation_pow(g: impl Fn(usize, usize) -> f64, p: f64, window: (usize, usize)) -> Result<f64> {
    if !(p >= 1.0) {
        return Err(Error::InvalidParameter(format!("p must be >= 1, got {p}")));
    }
    let (a, b) = window;
    if a > b {
        return Err(Error::IndexOutOfRange { index: a, limit: b });
    }
    if a == b {
        return Ok(0.0);
    }
    let len = b - a;
    let mut best = vec![0.0; len + 1];
    for v in 1..=len {
        best[v] = (0..v)
            .map(|u| best[u] + g(a + u, a + v).abs().powf(p))
            .fold(f64::NEG_INFINITY, f64::max);
    }
    Ok(best[len])
}

/// `p`-variation of a path's increments (Euclidean norm) over `window`.
pub fn path_p_variation(path: &GridPath, p: f64, window: (usize, usize)) -> Result<f64> {
    check_window(window, path.spec().points())?;
    p_variation(
        |u, v| {
            let (x, y) = (path.point(u), path.point(v));
            x.iter().zip(y).map(|(a, b)| (b - a) * (b - a)).sum::<f64>().sqrt()
        },
        p,
        window,
    )
}

/// `max |W_{s,t}| / (t-s)^α` over grid pairs in `window`.
pub fn holder_norm_path(path: &GridPath, alpha: f64, window: (usize, usize)) -> Result<f64> {
    check_alpha(alpha)?;
    let spec = path.spec();
    check_window(window, spec.points())?;
    let mut buf = vec![0.0; path.dim()];
    let mut best = 0.0f64;
    for s in window.0..=window.1 {
        for t in s + 1..=window.1 {
            path.increment_into(s, t, &mut buf);
            best = best.max(norm(&buf) / spec.span(s, t).powf(alpha));
        }
    }
    Ok(best)
}

/// `max |𝕎_{s,t}| / (t-s)^{2α}` over grid pairs in `window`, level 2 via Chen.
pub fn holder_norm_level2(
    blocks: &Level2Blocks,
    path_i: &GridPath,
    path_j: &GridPath,
    alpha: f64,
    window: (usize, usize),
) -> Result<f64> {
    check_alpha(alpha)?;
    let spec = blocks.spec();
    if path_i.spec() != spec || path_j.spec() != spec {
        return Err(Error::SpecMismatch);
    }
    let pts = spec.points();
    check_window(window, pts)?;
    let mm = spec.dim * spec.dim;
    let table = chen_table(blocks, path_i, path_j);
    let mut best = 0.0f64;
    for s in window.0..=window.1 {
        for t in s + 1..=window.1 {
            let idx = (s * pts + t) * mm;
            best = best.max(norm(&table[idx..idx + mm]) / spec.span(s, t).powf(2.0 * alpha));
        }
    }
    Ok(best)
}

fn check_alpha(alpha: f64) -> Result<()> {
    if alpha > 0.0 && alpha <= 1.0 {
        Ok(())
    } else {
        Err(Error::InvalidParameter(format!("Hölder exponent must lie in (0, 1], got {alpha}")))
    }
}

#[inline]
pub(crate) fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn lq_mean<'a>(values: impl Iterator<Item = &'a f64>, q: f64, count: usize) -> f64 {
    (values.map(|v| v.powf(q)).sum::<f64>() / count as f64).powf(1.0 / q)
}

/// Empirical controls `w^{i,n}` for every particle of the set-up.
///
/// `w^{i,n}(s,t) = v^{i,n}_p(s,t) + ⟨v^{•,n}_p⟩_{q;[s,t],1-var} + (t - s)` where
/// `v^{i,n}_p` adds the `p`-variations of `W^i` and of the `ℓ^q` particle mean
/// of `W^•`, and the `p/2`-variations of `𝕎^{i,i}`, `𝕎^{i,•}`, `𝕎^{•,i}` and
/// `𝕎^{•,•}`, each raised to its variation exponent.
pub fn empirical_controls(setup: &EmpiricalRoughSetup, p: f64, q: f64) -> Result<Vec<Control>> {
    if !(2.0..3.0).contains(&p) {
        return Err(Error::InvalidParameter(format!("p must lie in [2, 3), got {p}")));
    }
    if !(q >= 1.0) {
        return Err(Error::InvalidParameter(format!("q must be >= 1, got {q}")));
    }
    let n = setup.n();
    let spec = *setup.spec();
    let pts = spec.points();
    let m = spec.dim;
    let mm = m * m;
    let half = p / 2.0;

    // |W^j_{s,t}|
    let mut level1 = vec![vec![0.0; pts * pts]; n];
    let mut buf = vec![0.0; m];
    for (j, tab) in level1.iter_mut().enumerate() {
        let path = setup.path(j);
        for a in 0..pts {
            for b in a + 1..pts {
                path.increment_into(a, b, &mut buf);
                tab[a * pts + b] = norm(&buf);
            }
        }
    }
    // |𝕎^{j,k}_{s,t}|, indexed [j * n + k]
    let mut level2 = vec![vec![0.0; pts * pts]; n * n];
    for j in 0..n {
        for k in 0..n {
            let blocks = setup.cross(j, k)?;
            let table = chen_table(&blocks, setup.path(j), setup.path(k));
            let out = &mut level2[j * n + k];
            for a in 0..pts {
                for b in a + 1..pts {
                    let idx = (a * pts + b) * mm;
                    out[a * pts + b] = norm(&table[idx..idx + mm]);
                }
            }
        }
    }

    let powered = |f: &dyn Fn(usize) -> f64, e: f64| -> Vec<f64> {
        let mut t = vec![0.0; pts * pts];
        for a in 0..pts {
            for b in a + 1..pts {
                t[a * pts + b] = f(a * pts + b).powf(e);
            }
        }
        t
    };

    let mean_w = partition_sup_all(
        pts,
        &powered(&|idx| lq_mean(level1.iter().map(|t| &t[idx]), q, n), p),
    );
    let mean_ww = partition_sup_all(
        pts,
        &powered(&|idx| lq_mean(level2.iter().map(|t| &t[idx]), q, n * n), half),
    );

    let mut v_tables = Vec::with_capacity(n);
    for i in 0..n {
        let own_w = partition_sup_all(pts, &powered(&|idx| level1[i][idx], p));
        let own_ww = partition_sup_all(pts, &powered(&|idx| level2[i * n + i][idx], half));
        let row = partition_sup_all(
            pts,
            &powered(&|idx| lq_mean((0..n).map(|j| &level2[i * n + j][idx]), q, n), half),
        );
        let col = partition_sup_all(
            pts,
            &powered(&|idx| lq_mean((0..n).map(|j| &level2[j * n + i][idx]), q, n), half),
        );
        let v: Vec<f64> = (0..pts * pts)
            .map(|idx| own_w[idx] + mean_w[idx] + own_ww[idx] + row[idx] + col[idx] + mean_ww[idx])
            .collect();
        v_tables.push(v);
    }

    let envelope = partition_sup_all(pts, &powered(&|idx| lq_mean(v_tables.iter().map(|t| &t[idx]), q, n), 1.0));

    Ok(v_tables
        .into_iter()
        .enumerate()
        .map(|(i, v)| {
            let mut table = vec![0.0; pts * pts];
            for a in 0..pts {
                for b in a + 1..pts {
                    let idx = a * pts + b;
                    table[idx] = v[idx] + envelope[idx] + spec.span(a, b);
                }
            }
            Control { base: TwoIndexFn::from_table(pts, table, format!("w^{i}")), p, q }
        })
        .collect())
}

pub fn empirical_control(setup: &EmpiricalRoughSetup, i: usize, p: f64, q: f64) -> Result<Control> {
    if i >= setup.n() {
        return Err(Error::IndexOutOfRange { index: i, limit: setup.n() });
    }
    Ok(empirical_controls(setup, p, q)?.swap_remove(i))
}

/// Greedy times `τ_0 = start`, `τ_{k+1}` = first grid point `u` with `ϖ(τ_k, u) >= α`,
/// stopping at `end`.
pub fn greedy_times(varpi: &TwoIndexFn, alpha: f64, start: usize, end: usize) -> Result<Vec<usize>> {
    if !(alpha > 0.0) {
        return Err(Error::InvalidParameter(format!("threshold must be positive, got {alpha}")));
    }
    check_window((start, end), varpi.points())?;
    let mut times = vec![start];
    let mut tau = start;
    'outer: while tau < end {
        let mut prev = 0.0f64;
        let mut prev_u = tau;
        for u in tau + 1..=end {
            let val = varpi.eval(tau, u);
            if val < prev - 1e-12 * prev.abs() {
                return Err(Error::NotMonotone { from: tau, to_prev: prev_u, to: u });
            }
            if val >= alpha {
                times.push(u);
                tau = u;
                continue 'outer;
            }
            prev = val;
            prev_u = u;
        }
        break;
    }
    Ok(times)
}

/// Number of greedy times beyond the start that fall inside `window`.
pub fn local_accumulation(varpi: &TwoIndexFn, alpha: f64, window: (usize, usize)) -> Result<usize> {
    Ok(greedy_times(varpi, alpha, window.0, window.1)?.len() - 1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlledNorms {
    pub path: f64,
    pub derivative: f64,
    pub remainder: f64,
    /// Some ratio had a zero control with a non-zero numerator.
    pub infinite: bool,
}

/// Norms of an ω-controlled path with respect to the control `w`.
///
/// `x` is `(K+1) x d`, `deriv` is `(K+1) x d x m` (the Gubinelli derivative
/// `δ_x X`), and the remainder is `R_{s,t} = X_{s,t} - δ_x X_s W_{s,t}`.
pub fn controlled_norm_report(
    x: &[f64],
    deriv: &[f64],
    driver: &GridPath,
    control: &Control,
    p: f64,
) -> Result<ControlledNorms> {
    let spec = driver.spec();
    let (pts, m) = (spec.points(), spec.dim);
    if x.len() % pts != 0 || control.base.points() != pts {
        return Err(Error::DimensionMismatch {
            expected: format!("multiple of {pts} states"),
            got: format!("{}", x.len()),
        });
    }
    let d = x.len() / pts;
    if deriv.len() != pts * d * m {
        return Err(Error::DimensionMismatch {
            expected: format!("{} derivative entries", pts * d * m),
            got: format!("{}", deriv.len()),
        });
    }
    let mut out = ControlledNorms { path: 0.0, derivative: 0.0, remainder: 0.0, infinite: false };
    let mut inc = vec![0.0; m];
    let mut dx = vec![0.0; d];
    let mut dd = vec![0.0; d * m];
    let mut rem = vec![0.0; d];
    let ratio = |num: f64, w: f64, e: f64, slot: &mut f64, infinite: &mut bool| {
        if w > 0.0 {
            *slot = slot.max(num / w.powf(e));
        } else if num > 0.0 {
            *slot = f64::INFINITY;
            *infinite = true;
        }
    };
    for s in 0..pts {
        for t in s + 1..pts {
            driver.increment_into(s, t, &mut inc);
            for a in 0..d {
                dx[a] = x[t * d + a] - x[s * d + a];
                let row = &deriv[(s * d + a) * m..(s * d + a + 1) * m];
                rem[a] = dx[a] - row.iter().zip(&inc).map(|(g, w)| g * w).sum::<f64>();
            }
            for idx in 0..d * m {
                dd[idx] = deriv[t * d * m + idx] - deriv[s * d * m + idx];
            }
            let w = control.eval(s, t);
            ratio(norm(&dx), w, 1.0 / p, &mut out.path, &mut out.infinite);
            ratio(norm(&dd), w, 1.0 / p, &mut out.derivative, &mut out.infinite);
            ratio(norm(&rem), w, 2.0 / p, &mut out.remainder, &mut out.infinite);
        }
    }
    Ok(out)
}
