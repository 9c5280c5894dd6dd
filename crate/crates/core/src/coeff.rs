//! Mean-field diffusivities `F(x, μ)` with their space derivative and Lions derivative.
//!
//! Layouts (all row-major):
//! * `F(x, μ)`: `d x m`, entry `[a][b]`;
//! * `∂_x F(x, μ)`: `d x m x d`, entry `[a][b][l] = ∂F_{ab} / ∂x_l`;
//! * `D_μ F(x, μ)(z)`: `d x m x d`, entry `[a][b][l]`, derivative in the direction `z_l`.
//!
//! Measures are always uniform empirical measures over `n` atoms in `ℝ^d`.
//! Implementations must be free of side effects; they are called concurrently.

use std::borrow::Cow;

use crate::error::{Error, Result};

/// Uniform empirical measure over the rows of an `n x d` state matrix, with its mean cached.
#[derive(Debug, Clone)]
pub struct EmpiricalMeasureView<'a> {
    atoms: &'a [f64],
    d: usize,
    mean: Cow<'a, [f64]>,
}

impl<'a> EmpiricalMeasureView<'a> {
    pub fn new(atoms: &'a [f64], d: usize) -> Result<Self> {
        if d == 0 || atoms.is_empty() || atoms.len() % d != 0 {
            return Err(Error::EmptyMeasure);
        }
        let n = atoms.len() / d;
        let mut mean = vec![0.0; d];
        for row in atoms.chunks_exact(d) {
            for (m, x) in mean.iter_mut().zip(row) {
                *m += x;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        Ok(Self { atoms, d, mean: Cow::Owned(mean) })
    }

    /// View with a precomputed mean (must be the mean of `atoms`).
    pub fn with_mean(atoms: &'a [f64], d: usize, mean: &'a [f64]) -> Self {
        Self { atoms, d, mean: Cow::Borrowed(mean) }
    }

    pub fn n(&self) -> usize {
        self.atoms.len() / self.d
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn atom(&self, j: usize) -> &[f64] {
        &self.atoms[j * self.d..(j + 1) * self.d]
    }

    pub fn atoms(&self) -> &[f64] {
        self.atoms
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }
}

pub trait MeanFieldCoefficient: Send + Sync {
    /// `(d, m)`: state and driver dimensions.
    fn dims(&self) -> (usize, usize);

    /// Reported common bound on `|F|`, `|∂_x F|` and `|D_μ F|` (Frobenius norms).
    fn lipschitz_bound(&self) -> f64;

    fn eval_f(&self, x: &[f64], mu: &EmpiricalMeasureView<'_>, out: &mut [f64]);

    fn eval_dx_f(&self, x: &[f64], mu: &EmpiricalMeasureView<'_>, out: &mut [f64]);

    fn eval_dmu_f(&self, x: &[f64], mu: &EmpiricalMeasureView<'_>, z: &[f64], out: &mut [f64]);

    /// For every atom `x^i` of `mu`, writes `(1/n) Σ_j D_μF(x^i, μ)(x^j) · u_j` into
    /// `out[i]` (`d x m`), contracting the last index with the `d`-vectors `u_j`.
    ///
    /// The default is the direct `O(n²)` double sum in a fixed order.
    fn contract_dmu(&self, mu: &EmpiricalMeasureView<'_>, u: &[f64], out: &mut [f64]) {
        let (d, m) = self.dims();
        let n = mu.n();
        let mut tensor = vec![0.0; d * m * d];
        let inv_n = 1.0 / n as f64;
        for i in 0..n {
            let acc = &mut out[i * d * m..(i + 1) * d * m];
            acc.iter_mut().for_each(|v| *v = 0.0);
            for j in 0..n {
                self.eval_dmu_f(mu.atom(i), mu, mu.atom(j), &mut tensor);
                let uj = &u[j * d..(j + 1) * d];
                for ab in 0..d * m {
                    let row = &tensor[ab * d..(ab + 1) * d];
                    acc[ab] += row.iter().zip(uj).map(|(t, v)| t * v).sum::<f64>();
                }
            }
            acc.iter_mut().for_each(|v| *v *= inv_n);
        }
    }

    /// General cross contraction for arbitrary level-2 blocks: with
    /// `v[i][j] = F(x^j, μ) 𝕎^{j,i}` (`d x m`, rows indexed by `l`), writes
    /// `out[i][a] = (1/n) Σ_j Σ_{b,l} D_μF(x^i, μ)(x^j)_{ab,l} v[i][j]_{lb}`.
    fn contract_dmu_pairs(&self, mu: &EmpiricalMeasureView<'_>, v: &[f64], out: &mut [f64]) {
        let (d, m) = self.dims();
        let n = mu.n();
        let mut tensor = vec![0.0; d * m * d];
        for i in 0..n {
            let acc = &mut out[i * d..(i + 1) * d];
            acc.iter_mut().for_each(|x| *x = 0.0);
            for j in 0..n {
                self.eval_dmu_f(mu.atom(i), mu, mu.atom(j), &mut tensor);
                let vij = &v[(i * n + j) * d * m..(i * n + j + 1) * d * m];
                add_pair_term(&tensor, vij, d, m, acc);
            }
            acc.iter_mut().for_each(|x| *x /= n as f64);
        }
    }
}

/// `acc[a] += Σ_{b,l} tensor[a][b][l] v[l][b]`.
#[inline]
fn add_pair_term(tensor: &[f64], v: &[f64], d: usize, m: usize, acc: &mut [f64]) {
    for (a, o) in acc.iter_mut().enumerate() {
        let mut sum = 0.0;
        for b in 0..m {
            let row = &tensor[(a * m + b) * d..(a * m + b + 1) * d];
            for l in 0..d {
                sum += row[l] * v[l * m + b];
            }
        }
        *o += sum;
    }
}

impl<C: MeanFieldCoefficient + ?Sized> MeanFieldCoefficient for Box<C> {
    fn dims(&self) -> (usize, usize) {
        (**self).dims()
    }
    fn lipschitz_bound(&self) -> f64 {
        (**self).lipschitz_bound()
    }
    fn eval_f(&self, x: &[f64], mu: &EmpiricalMeasureView<'_>, out: &mut [f64]) {
        (**self).eval_f(x, mu, out)
    }
    fn eval_dx_f(&self, x: &[f64], mu: &EmpiricalMeasureView<'_>, out: &mut [f64]) {
        (**self).eval_dx_f(x, mu, out)
    }
    fn eval_dmu_f(&self, x: &[f64], mu: &EmpiricalMeasureView<'_>, z: &[f64], out: &mut [f64]) {
        (**self).eval_dmu_f(x, mu, z, out)
    }
    fn contract_dmu(&self, mu: &EmpiricalMeasureView<'_>, u: &[f64], out: &mut [f64]) {
        (**self).contract_dmu(mu, u, out)
    }
    fn contract_dmu_pairs(&self, mu: &EmpiricalMeasureView<'_>, v: &[f64], out: &mut [f64]) {
        (**self).contract_dmu_pairs(mu, v, out)
    }
}

/// Interaction kernel `f(x, y)` for `F(x, μ) = ∫ f(x, y) μ(dy)`.
pub trait PairKernel: Send + Sync {
    fn dims(&self) -> (usize, usize);
    fn bound(&self) -> f64;
    /// `d x m`
    fn f(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    /// `d x m x d`, derivative in `x`
    fn dx(&self, x: &[f64], y: &[f64], out: &mut [f64]);
    /// `d x m x d`, derivative in `y`
    fn dy(&self, x: &[f64], y: &[f64], out: &mut [f64]);
}

/// Map `g(x, m)` for `F(x, μ) = g(x, ∫ y μ(dy))`.
pub trait MomentMap: Send + Sync {
    fn dims(&self) -> (usize, usize);
    fn bound(&self) -> f64;
    fn g(&self, x: &[f64], mean: &[f64], out: &mut [f64]);
    fn dx(&self, x: &[f64], mean: &[f64], out: &mut [f64]);
    fn dm(&self, x: &[f64], mean: &[f64], out: &mut [f64]);
}

#[derive(Debug, Clone)]
pub struct Convolution<K> {
    kernel: K,
}

pub fn make_convolution<K: PairKernel>(kernel: K, d: usize, m: usize) -> Result<Convolution<K>> {
    check_dims(kernel.dims(), (d, m))?;
    Ok(Convolution { kernel })
}

fn check_dims(got: (usize, usize), expected: (usize, usize)) -> Result<()> {
    if got != expected || got.0 == 0 || got.1 == 0 {
        return Err(Error::DimensionMismatch {
            expected: format!("{expected:?}"),
            got: format!("{got:?}"),
        });
    }
    Ok(())
}

impl<K: PairKernel> MeanFieldCoefficient for Convolution<K> {
    fn dims(&self) -> (usize, usize) {
        self.kernel.dims()
    }

    fn lipschitz_bound(&self) -> f64 {
        self.kernel.bound()
    }

    fn eval_f(&self, x: &[f64], mu: &EmpiricalMeasureView<'_>, out: &mut [f64]) {
        average_over_atoms(mu, out, |y, buf| self.kernel.f(x, y, buf));
    }

    fn eval_dx_f(&self, x: &[f64], mu: &EmpiricalMeasureView<'_>, out: &mut [f64]) {
        average_over_atoms(mu, out, |y, buf| self.kernel.dx(x, y, buf));
    }

    fn eval_dmu_f(&self, x: &[f64], _mu: &EmpiricalMeasureView<'_>, z: &[f64], out: &mut [f64]) {
        self.kernel.dy(x, z, out);
    }
}

fn average_over_atoms(mu: &EmpiricalMeasureView<'_>, out: &mut [f64], mut term: impl FnMut(&[f64], &mut [f64])) {
    let mut buf = vec![0.0; out.len()];
    out.iter_mut().for_each(|v| *v = 0.0);
    for j in 0..mu.n() {
        term(mu.atom(j), &mut buf);
        for (o, b) in out.iter_mut().zip(&buf) {
            *o += b;
        }
    }
    let inv = 1.0 / mu.n() as f64;
    out.iter_mut().for_each(|v| *v *= inv);
}

#[derive(Debug, Clone)]
pub struct MomentCoupling<G> {
    map: G,
}

pub fn make_moment<G: MomentMap>(map: G, d: usize, m: usize) -> Result<MomentCoupling<G>> {
    check_dims(map.dims(), (d, m))?;
    Ok(MomentCoupling { map })
}

impl<G: MomentMap> MeanFieldCoefficient for MomentCoupling<G> {
    fn dims(&self) -> (usize, usize) {
        self.map.dims()
    }

    fn lipschitz_bound(&self) -> f64 {
        self.map.bound()
    }

    fn eval_f(&self, x: &[f64], mu: &EmpiricalMeasureView<'_>, out: &mut [f64]) {
        self.map.g(x, mu.mean(), out);
    }

    fn eval_dx_f(&self, x: &[f64], mu: &EmpiricalMeasureView<'_>, out: &mut [f64]) {
        self.map.dx(x, mu.mean(), out);
    }

    fn eval_dmu_f(&self, x: &[f64], mu: &EmpiricalMeasureView<'_>, _z: &[f64], out: &mut [f64]) {
        self.map.dm(x, mu.mean(), out);
    }

    /// `D_μF` does not depend on `z`, so the particle sum collapses to the mean of `u`.
    fn contract_dmu(&self, mu: &EmpiricalMeasureView<'_>, u: &[f64], out: &mut [f64]) {
        let (d, m) = self.dims();
        let n = mu.n();
        let mut u_bar = vec![0.0; d];
        for uj in u.chunks_exact(d) {
            for (acc, v) in u_bar.iter_mut().zip(uj) {
                *acc += v;
            }
        }
        u_bar.iter_mut().for_each(|v| *v /= n as f64);
        let mut tensor = vec![0.0; d * m * d];
        for i in 0..n {
            self.map.dm(mu.atom(i), mu.mean(), &mut tensor);
            let acc = &mut out[i * d * m..(i + 1) * d * m];
            for ab in 0..d * m {
                acc[ab] = tensor[ab * d..(ab + 1) * d].iter().zip(&u_bar).map(|(t, v)| t * v).sum();
            }
        }
    }

    fn contract_dmu_pairs(&self, mu: &EmpiricalMeasureView<'_>, v: &[f64], out: &mut [f64]) {
        let (d, m) = self.dims();
        let n = mu.n();
        let mut tensor = vec![0.0; d * m * d];
        let mut v_bar = vec![0.0; d * m];
        for i in 0..n {
            v_bar.iter_mut().for_each(|x| *x = 0.0);
            for vij in v[i * n * d * m..(i + 1) * n * d * m].chunks_exact(d * m) {
                for (acc, x) in v_bar.iter_mut().zip(vij) {
                    *acc += x;
                }
            }
            v_bar.iter_mut().for_each(|x| *x /= n as f64);
            self.map.dm(mu.atom(i), mu.mean(), &mut tensor);
            let acc = &mut out[i * d..(i + 1) * d];
            acc.iter_mut().for_each(|x| *x = 0.0);
            add_pair_term(&tensor, &v_bar, d, m, acc);
        }
    }
}

#[inline]
fn sech2(v: f64) -> f64 {
    let c = v.cosh();
    1.0 / (c * c)
}

/// `f_{ab}(x, y) = a · tanh(x_a - y_a)`, the same for every column `b`.
#[derive(Debug, Clone, Copy)]
pub struct TanhDifference {
    pub scale: f64,
    pub d: usize,
    pub m: usize,
}

impl PairKernel for TanhDifference {
    fn dims(&self) -> (usize, usize) {
        (self.d, self.m)
    }

    fn bound(&self) -> f64 {
        self.scale.abs() * ((self.d * self.m) as f64).sqrt()
    }

    fn f(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        for a in 0..self.d {
            let v = self.scale * (x[a] - y[a]).tanh();
            out[a * self.m..(a + 1) * self.m].iter_mut().for_each(|o| *o = v);
        }
    }

    fn dx(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        out.iter_mut().for_each(|o| *o = 0.0);
        for a in 0..self.d {
            let v = self.scale * sech2(x[a] - y[a]);
            for b in 0..self.m {
                out[(a * self.m + b) * self.d + a] = v;
            }
        }
    }

    fn dy(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        self.dx(x, y, out);
        out.iter_mut().for_each(|o| *o = -*o);
    }
}

/// `g_{ab}(x, m) = a · tanh(x_a) + b · tanh(m_a)`, the same for every column.
#[derive(Debug, Clone, Copy)]
pub struct TanhSum {
    pub a: f64,
    pub b: f64,
    pub d: usize,
    pub m: usize,
}

impl MomentMap for TanhSum {
    fn dims(&self) -> (usize, usize) {
        (self.d, self.m)
    }

    fn bound(&self) -> f64 {
        (self.a.abs() + self.b.abs()) * ((self.d * self.m) as f64).sqrt()
    }

    fn g(&self, x: &[f64], mean: &[f64], out: &mut [f64]) {
        for r in 0..self.d {
            let v = self.a * x[r].tanh() + self.b * mean[r].tanh();
            out[r * self.m..(r + 1) * self.m].iter_mut().for_each(|o| *o = v);
        }
    }

    fn dx(&self, x: &[f64], _mean: &[f64], out: &mut [f64]) {
        diagonal_tensor(self.d, self.m, out, |r| self.a * sech2(x[r]));
    }

    fn dm(&self, _x: &[f64], mean: &[f64], out: &mut [f64]) {
        diagonal_tensor(self.d, self.m, out, |r| self.b * sech2(mean[r]));
    }
}

fn diagonal_tensor(d: usize, m: usize, out: &mut [f64], value: impl Fn(usize) -> f64) {
    out.iter_mut().for_each(|o| *o = 0.0);
    for r in 0..d {
        let v = value(r);
        for c in 0..m {
            out[(r * m + c) * d + r] = v;
        }
    }
}

/// Closure-backed [`PairKernel`] for user-supplied interactions.
pub struct KernelFns<F, Dx, Dy> {
    pub d: usize,
    pub m: usize,
    pub bound: f64,
    pub f: F,
    pub dx: Dx,
    pub dy: Dy,
}

impl<F, Dx, Dy> PairKernel for KernelFns<F, Dx, Dy>
where
    F: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync,
    Dx: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync,
    Dy: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync,
{
    fn dims(&self) -> (usize, usize) {
        (self.d, self.m)
    }
    fn bound(&self) -> f64 {
        self.bound
    }
    fn f(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.f)(x, y, out)
    }
    fn dx(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.dx)(x, y, out)
    }
    fn dy(&self, x: &[f64], y: &[f64], out: &mut [f64]) {
        (self.dy)(x, y, out)
    }
}

/// Closure-backed [`MomentMap`].
pub struct MomentFns<G, Dx, Dm> {
    pub d: usize,
    pub m: usize,
    pub bound: f64,
    pub g: G,
    pub dx: Dx,
    pub dm: Dm,
}

impl<G, Dx, Dm> MomentMap for MomentFns<G, Dx, Dm>
where
    G: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync,
    Dx: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync,
    Dm: Fn(&[f64], &[f64], &mut [f64]) + Send + Sync,
{
    fn dims(&self) -> (usize, usize) {
        (self.d, self.m)
    }
    fn bound(&self) -> f64 {
        self.bound
    }
    fn g(&self, x: &[f64], mean: &[f64], out: &mut [f64]) {
        (self.g)(x, mean, out)
    }
    fn dx(&self, x: &[f64], mean: &[f64], out: &mut [f64]) {
        (self.dx)(x, mean, out)
    }
    fn dm(&self, x: &[f64], mean: &[f64], out: &mut [f64]) {
        (self.dm)(x, mean, out)
    }
}

/// Built-in coefficient families selectable by name.
pub fn builtin(name: &str, a: f64, b: f64, d: usize, m: usize) -> Result<Box<dyn MeanFieldCoefficient>> {
    match name {
        "conv_tanh" => Ok(Box::new(make_convolution(TanhDifference { scale: a, d, m }, d, m)?)),
        "moment_tanh" => Ok(Box::new(make_moment(TanhSum { a, b, d, m }, d, m)?)),
        other => Err(Error::Config(format!("unknown coefficient '{other}' (expected conv_tanh or moment_tanh)"))),
    }
}

/// `δ_{ij} ∂_x F(x^i, μ^n) + (1/n) D_μF(x^i, μ^n)(x^j)`: the derivative of
/// `(x^1, ..., x^n) ↦ F(x^i, μ^n)` with respect to `x^j`.
pub fn empirical_projection_grad<C: MeanFieldCoefficient + ?Sized>(
    coeff: &C,
    i: usize,
    j: usize,
    states: &EmpiricalMeasureView<'_>,
) -> Result<Vec<f64>> {
    let n = states.n();
    for idx in [i, j] {
        if idx >= n {
            return Err(Error::IndexOutOfRange { index: idx, limit: n });
        }
    }
    let (d, m) = coeff.dims();
    if states.d() != d {
        return Err(Error::DimensionMismatch { expected: format!("d = {d}"), got: format!("{}", states.d()) });
    }
    let mut out = vec![0.0; d * m * d];
    coeff.eval_dmu_f(states.atom(i), states, states.atom(j), &mut out);
    out.iter_mut().for_each(|v| *v /= n as f64);
    if i == j {
        let mut dx = vec![0.0; d * m * d];
        coeff.eval_dx_f(states.atom(i), states, &mut dx);
        for (o, v) in out.iter_mut().zip(&dx) {
            *o += v;
        }
    }
    Ok(out)
}
