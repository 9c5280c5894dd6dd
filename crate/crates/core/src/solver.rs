//! Explicit one-step schemes for the interacting particle system and the
//! frozen-measure companions used in the coupling.
//!
//! Per step and particle the compensated scheme advances by
//!
//! ```text
//! F(X^i, μ) W^i + ∂_x F(X^i, μ) F(X^i, μ) 𝕎^{i} + (1/n) Σ_j D_μF(X^i, μ)(X^j) F(X^j, μ) 𝕎^{j,i}
//! ```
//!
//! with the contractions `Σ_{b,k,l} ∂_{x_l}F_{ab} F_{lk} 𝕎_{kb}` for the self term and
//! `Σ_{b,k,l} D_μF_{ab,l} F_{lk} 𝕎^{j,i}_{kb}` for the cross term. On a grid step the
//! cross block is `½ a_j ⊗ a_i`, so the `j`-sum only needs `u_j = F(X^j) a_j`. Set-ups
//! with stored cross blocks (for instance coarse partitions of a finer lift, which
//! keep the areas between distinct drivers) go through the general pair contraction.

use serde::{Deserialize, Serialize};

use crate::coeff::{EmpiricalMeasureView, MeanFieldCoefficient};
use crate::driver::{GridPath, GridSpec, SeedTag};
use crate::error::{Error, Result};
use crate::lift::{EmpiricalRoughSetup, Level2Blocks};
use crate::measure::{wasserstein_assignment, wasserstein_sorted, EmpiricalMeasure};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum SchemeKind {
    Euler,
    #[default]
    Compensated,
}

/// `(K+1) x n x d` states of a particle system, row-major in `(k, i, a)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySet {
    spec: GridSpec,
    n: usize,
    d: usize,
    states: Vec<f64>,
    scheme: SchemeKind,
    seed_tag: Option<SeedTag>,
}

impl TrajectorySet {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn scheme(&self) -> SchemeKind {
        self.scheme
    }

    pub fn seed_tag(&self) -> Option<SeedTag> {
        self.seed_tag
    }

    pub fn states(&self) -> &[f64] {
        &self.states
    }

    /// All particles at grid point `k` (`n x d`).
    pub fn snapshot(&self, k: usize) -> &[f64] {
        let w = self.n * self.d;
        &self.states[k * w..(k + 1) * w]
    }

    pub fn state(&self, k: usize, i: usize) -> &[f64] {
        &self.snapshot(k)[i * self.d..(i + 1) * self.d]
    }

    pub fn terminal(&self) -> &[f64] {
        self.snapshot(self.spec.steps)
    }

    /// Trajectory of particle `i`, `(K+1) x d`.
    pub fn particle(&self, i: usize) -> Vec<f64> {
        (0..self.spec.points()).flat_map(|k| self.state(k, i).iter().copied()).collect()
    }

    /// Empirical measure `μ^n_{t_k}`.
    pub fn view(&self, k: usize) -> EmpiricalMeasureView<'_> {
        EmpiricalMeasureView::new(self.snapshot(k), self.d).expect("non-empty snapshot")
    }
}

/// Gubinelli derivative `δ_x X^i_{t_k} = F(X^i_{t_k}, μ^n_{t_k})` for all particles (`n x d x m`).
pub fn gubinelli_derivative<C: MeanFieldCoefficient + ?Sized>(coeff: &C, traj: &TrajectorySet, k: usize) -> Vec<f64> {
    let (d, m) = coeff.dims();
    let view = traj.view(k);
    let mut out = vec![0.0; traj.n * d * m];
    for (i, chunk) in out.chunks_exact_mut(d * m).enumerate() {
        coeff.eval_f(view.atom(i), &view, chunk);
    }
    out
}

/// Grid-aligned sequence of frozen empirical measures `μ̂_{t_k}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasureFlow {
    d: usize,
    n: usize,
    points: usize,
    states: Vec<f64>,
    means: Vec<f64>,
}

impl MeasureFlow {
    pub fn new(states: Vec<f64>, n: usize, d: usize, points: usize) -> Result<Self> {
        if n == 0 || d == 0 || points == 0 {
            return Err(Error::EmptyMeasure);
        }
        if states.len() != points * n * d {
            return Err(Error::DimensionMismatch {
                expected: format!("{} values", points * n * d),
                got: format!("{}", states.len()),
            });
        }
        let mut means = vec![0.0; points * d];
        for k in 0..points {
            let mean = &mut means[k * d..(k + 1) * d];
            for row in states[k * n * d..(k + 1) * n * d].chunks_exact(d) {
                for (acc, x) in mean.iter_mut().zip(row) {
                    *acc += x;
                }
            }
            mean.iter_mut().for_each(|v| *v /= n as f64);
        }
        Ok(Self { d, n, points, states, means })
    }

    /// The same cloud at every grid point.
    pub fn constant(atoms: &[f64], d: usize, points: usize) -> Result<Self> {
        if d == 0 || atoms.is_empty() || atoms.len() % d != 0 {
            return Err(Error::EmptyMeasure);
        }
        let n = atoms.len() / d;
        let states = (0..points).flat_map(|_| atoms.iter().copied()).collect();
        Self::new(states, n, d, points)
    }

    pub fn from_trajectories(traj: TrajectorySet) -> Self {
        let points = traj.spec.points();
        Self::new(traj.states, traj.n, traj.d, points).expect("trajectory set has consistent shape")
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn points(&self) -> usize {
        self.points
    }

    pub fn snapshot(&self, k: usize) -> &[f64] {
        let w = self.n * self.d;
        &self.states[k * w..(k + 1) * w]
    }

    pub fn view(&self, k: usize) -> EmpiricalMeasureView<'_> {
        EmpiricalMeasureView::with_mean(self.snapshot(k), self.d, &self.means[k * self.d..(k + 1) * self.d])
    }
}

fn check_dims<C: MeanFieldCoefficient + ?Sized>(coeff: &C, d: usize, m: usize) -> Result<()> {
    if coeff.dims() != (d, m) {
        return Err(Error::DimensionMismatch {
            expected: format!("coefficient dims ({d}, {m})"),
            got: format!("{:?}", coeff.dims()),
        });
    }
    Ok(())
}

/// `out = F 𝕎` for `F` of shape `d x m` and `𝕎` of shape `m x m`.
fn mat_mul(f: &[f64], block: &[f64], d: usize, m: usize, out: &mut [f64]) {
    for l in 0..d {
        for b in 0..m {
            out[l * m + b] = (0..m).map(|k| f[l * m + k] * block[k * m + b]).sum();
        }
    }
}

/// `Σ_{b,l} ∂_{x_l}F_{ab} (F 𝕎)_{lb}` accumulated into `out` (length `d`).
fn add_self_term(dx: &[f64], f: &[f64], block: &[f64], d: usize, m: usize, fw: &mut [f64], out: &mut [f64]) {
    mat_mul(f, block, d, m, fw);
    for (a, o) in out.iter_mut().enumerate() {
        let mut acc = 0.0;
        for b in 0..m {
            let row = &dx[(a * m + b) * d..(a * m + b + 1) * d];
            for l in 0..d {
                acc += row[l] * fw[l * m + b];
            }
        }
        *o += acc;
    }
}

/// Per-step scratch buffers, reused across steps.
struct Workspace {
    f: Vec<f64>,
    u: Vec<f64>,
    dmu: Vec<f64>,
    dx: Vec<f64>,
    fw: Vec<f64>,
    inc: Vec<f64>,
    cross: Vec<f64>,
    block: Vec<f64>,
    /// `F(X^j) 𝕎^{j,i}` for all pairs; only allocated for materialized set-ups.
    pairs: Vec<f64>,
}

impl Workspace {
    fn new(n: usize, d: usize, m: usize, pairs: bool) -> Self {
        Self {
            f: vec![0.0; n * d * m],
            u: vec![0.0; n * d],
            dmu: vec![0.0; n * d * m],
            dx: vec![0.0; d * m * d],
            fw: vec![0.0; d * m],
            inc: vec![0.0; n * m],
            cross: vec![0.0; n * d],
            block: vec![0.0; m * m],
            pairs: if pairs { vec![0.0; n * n * d * m] } else { Vec::new() },
        }
    }
}

fn step_into<C: MeanFieldCoefficient + ?Sized>(
    scheme: SchemeKind,
    current: &[f64],
    setup: &EmpiricalRoughSetup,
    coeff: &C,
    k: usize,
    ws: &mut Workspace,
    next: &mut [f64],
) -> Result<()> {
    let (d, m) = coeff.dims();
    let n = setup.n();
    let view = EmpiricalMeasureView::new(current, d)?;
    for i in 0..n {
        setup.path(i).increment_into(k, k + 1, &mut ws.inc[i * m..(i + 1) * m]);
        let f = &mut ws.f[i * d * m..(i + 1) * d * m];
        coeff.eval_f(view.atom(i), &view, f);
        let a_i = &ws.inc[i * m..(i + 1) * m];
        for (r, u) in ws.u[i * d..(i + 1) * d].iter_mut().enumerate() {
            *u = (0..m).map(|b| f[r * m + b] * a_i[b]).sum();
        }
    }
    next.copy_from_slice(current);
    for (x, u) in next.iter_mut().zip(&ws.u) {
        *x += u;
    }
    if scheme == SchemeKind::Compensated {
        if setup.is_materialized() {
            // stored blocks may carry areas the single-step formula cannot see
            let mut fw = vec![0.0; d * m];
            for i in 0..n {
                for j in 0..n {
                    setup.cross_step_into(j, i, k, &mut ws.block);
                    mat_mul(&ws.f[j * d * m..(j + 1) * d * m], &ws.block, d, m, &mut fw);
                    ws.pairs[(i * n + j) * d * m..(i * n + j + 1) * d * m].copy_from_slice(&fw);
                }
            }
            coeff.contract_dmu_pairs(&view, &ws.pairs, &mut ws.cross);
        } else {
            coeff.contract_dmu(&view, &ws.u, &mut ws.dmu);
            // 𝕎^{j,i}_{kb} = ½ a_{j,k} a_{i,b}
            for i in 0..n {
                let a_i = &ws.inc[i * m..(i + 1) * m];
                let mi = &ws.dmu[i * d * m..(i + 1) * d * m];
                for a in 0..d {
                    ws.cross[i * d + a] = 0.5 * (0..m).map(|b| mi[a * m + b] * a_i[b]).sum::<f64>();
                }
            }
        }
        for i in 0..n {
            let out = &mut next[i * d..(i + 1) * d];
            coeff.eval_dx_f(view.atom(i), &view, &mut ws.dx);
            let block = setup.self_blocks(i).block(k);
            add_self_term(&ws.dx, &ws.f[i * d * m..(i + 1) * d * m], block, d, m, &mut ws.fw, out);
            for (o, c) in out.iter_mut().zip(&ws.cross[i * d..(i + 1) * d]) {
                *o += c;
            }
        }
    }
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::BlowUp { step: k });
    }
    Ok(())
}

/// One step of `scheme` from the time-`t_k` states (`n x d`).
pub fn step_scheme<C: MeanFieldCoefficient + ?Sized>(
    scheme: SchemeKind,
    states_k: &[f64],
    setup: &EmpiricalRoughSetup,
    coeff: &C,
    k: usize,
) -> Result<Vec<f64>> {
    let (d, m) = coeff.dims();
    check_dims(coeff, d, setup.spec().dim)?;
    if k >= setup.spec().steps {
        return Err(Error::IndexOutOfRange { index: k, limit: setup.spec().steps });
    }
    if states_k.len() != setup.n() * d {
        return Err(Error::DimensionMismatch {
            expected: format!("{} states", setup.n() * d),
            got: format!("{}", states_k.len()),
        });
    }
    let mut ws = Workspace::new(setup.n(), d, m, setup.is_materialized());
    let mut next = vec![0.0; states_k.len()];
    step_into(scheme, states_k, setup, coeff, k, &mut ws, &mut next)?;
    Ok(next)
}

pub fn step_compensated<C: MeanFieldCoefficient + ?Sized>(
    states_k: &[f64],
    setup: &EmpiricalRoughSetup,
    coeff: &C,
    k: usize,
) -> Result<Vec<f64>> {
    step_scheme(SchemeKind::Compensated, states_k, setup, coeff, k)
}

/// Runs `scheme` over the whole grid from `x0` (`n x d`).
pub fn solve_particle_system<C: MeanFieldCoefficient + ?Sized>(
    setup: &EmpiricalRoughSetup,
    coeff: &C,
    x0: &[f64],
    scheme: SchemeKind,
) -> Result<TrajectorySet> {
    let spec = *setup.spec();
    let (d, m) = coeff.dims();
    check_dims(coeff, d, spec.dim)?;
    let n = setup.n();
    if x0.len() != n * d {
        return Err(Error::DimensionMismatch { expected: format!("{} initial values", n * d), got: format!("{}", x0.len()) });
    }
    if x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("initial condition is not finite".into()));
    }
    let w = n * d;
    let mut states = vec![0.0; spec.points() * w];
    states[..w].copy_from_slice(x0);
    let mut ws = Workspace::new(n, d, m, setup.is_materialized());
    for k in 0..spec.steps {
        let (done, rest) = states.split_at_mut((k + 1) * w);
        step_into(scheme, &done[k * w..], setup, coeff, k, &mut ws, &mut rest[..w])?;
    }
    let seed_tag = setup.path(0).seed_tag();
    Ok(TrajectorySet { spec, n, d, states, scheme, seed_tag })
}

/// Companion trajectory driven by `path` with the measure argument frozen to `flow`:
/// `x ← x + F(x, μ̂_k) a + ∂_xF F 𝕎_self`. Returns `(K+1) x d` values.
pub fn solve_frozen_measure<C: MeanFieldCoefficient + ?Sized>(
    path: &GridPath,
    self_blocks: &Level2Blocks,
    coeff: &C,
    flow: &MeasureFlow,
    x0: &[f64],
) -> Result<Vec<f64>> {
    let spec = *path.spec();
    let (d, m) = coeff.dims();
    check_dims(coeff, d, spec.dim)?;
    if self_blocks.spec() != &spec {
        return Err(Error::SpecMismatch);
    }
    if flow.points() != spec.points() || flow.d() != d {
        return Err(Error::DimensionMismatch {
            expected: format!("flow with {} points in d = {d}", spec.points()),
            got: format!("{} points in d = {}", flow.points(), flow.d()),
        });
    }
    if x0.len() != d || x0.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidParameter("companion needs a finite initial state of length d".into()));
    }
    let mut out = vec![0.0; spec.points() * d];
    out[..d].copy_from_slice(x0);
    let mut f = vec![0.0; d * m];
    let mut dx = vec![0.0; d * m * d];
    let mut fw = vec![0.0; d * m];
    let mut inc = vec![0.0; m];
    for k in 0..spec.steps {
        let (done, rest) = out.split_at_mut((k + 1) * d);
        let x = &done[k * d..];
        let next = &mut rest[..d];
        let view = flow.view(k);
        path.increment_into(k, k + 1, &mut inc);
        coeff.eval_f(x, &view, &mut f);
        coeff.eval_dx_f(x, &view, &mut dx);
        for a in 0..d {
            next[a] = x[a] + (0..m).map(|b| f[a * m + b] * inc[b]).sum::<f64>();
        }
        add_self_term(&dx, &f, self_blocks.block(k), d, m, &mut fw, next);
        if next.iter().any(|v| !v.is_finite()) {
            return Err(Error::BlowUp { step: k });
        }
    }
    Ok(out)
}

/// Gaps between coupled particles and their companions on one realization.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CouplingErrors {
    /// `sup_t |X̄^i_t - X^{i,(n)}_t|` for each particle.
    pub per_particle: Vec<f64>,
    /// `sup_t d_1(μ^n_t, μ̄^n_t)`.
    pub sup_t_w1_gap: f64,
}

pub fn coupling_errors(coupled: &TrajectorySet, companions: &[Vec<f64>]) -> Result<CouplingErrors> {
    let (n, d, points) = (coupled.n, coupled.d, coupled.spec.points());
    if companions.len() != n {
        return Err(Error::DimensionMismatch { expected: format!("{n} companions"), got: format!("{}", companions.len()) });
    }
    if let Some(bad) = companions.iter().find(|c| c.len() != points * d) {
        return Err(Error::DimensionMismatch { expected: format!("{} values", points * d), got: format!("{}", bad.len()) });
    }
    let mut per_particle = vec![0.0f64; n];
    let mut diff = vec![0.0; d];
    let mut sup_w1 = 0.0f64;
    let mut companion_cloud = vec![0.0; n * d];
    for k in 0..points {
        for (i, comp) in companions.iter().enumerate() {
            let c = &comp[k * d..(k + 1) * d];
            companion_cloud[i * d..(i + 1) * d].copy_from_slice(c);
            for (a, v) in diff.iter_mut().enumerate() {
                *v = c[a] - coupled.state(k, i)[a];
            }
            per_particle[i] = per_particle[i].max(crate::variation::norm(&diff));
        }
        let w1 = if d == 1 {
            let mut x = coupled.snapshot(k).to_vec();
            let mut y = companion_cloud.clone();
            x.sort_by(f64::total_cmp);
            y.sort_by(f64::total_cmp);
            wasserstein_sorted(&x, &y, 1.0)
        } else {
            let a = EmpiricalMeasure::new(coupled.snapshot(k).to_vec(), d)?;
            let b = EmpiricalMeasure::new(companion_cloud.clone(), d)?;
            wasserstein_assignment(&a, &b, 1.0)?
        };
        sup_w1 = sup_w1.max(w1);
    }
    Ok(CouplingErrors { per_particle, sup_t_w1_gap: sup_w1 })
}

/// `sup_i` of the replication mean of `sup_t |X̄^i - X^{i,(n)}|`.
pub fn sup_i_mean_sup_t_gap(records: &[CouplingErrors]) -> Result<f64> {
    let first = records.first().ok_or(Error::EmptyMeasure)?;
    let n = first.per_particle.len();
    if records.iter().any(|r| r.per_particle.len() != n) {
        return Err(Error::DimensionMismatch { expected: format!("{n} particles"), got: "ragged records".into() });
    }
    let reps = records.len() as f64;
    Ok((0..n)
        .map(|i| records.iter().map(|r| r.per_particle[i]).sum::<f64>() / reps)
        .fold(0.0, f64::max))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::coeff::{builtin, make_convolution, make_moment, KernelFns, MomentFns};
    use crate::driver::{sample_ensemble, DriverKind};
    use crate::lift::build_empirical_setup;

    fn setup_from(values: &[Vec<f64>], steps: usize, m: usize) -> EmpiricalRoughSetup {
        let spec = GridSpec::new(1.0, steps, m).unwrap();
        let paths = values.iter().map(|v| GridPath::from_values(spec, v.clone(), None).unwrap()).collect();
        build_empirical_setup(paths, false).unwrap()
    }

    fn brownian_setup(n: usize, steps: usize, m: usize, seed: u64) -> EmpiricalRoughSetup {
        let spec = GridSpec::new(1.0, steps, m).unwrap();
        build_empirical_setup(sample_ensemble(DriverKind::Brownian, spec, seed, n).unwrap(), false).unwrap()
    }

    fn zero_coeff(d: usize, m: usize) -> impl MeanFieldCoefficient {
        make_moment(
            MomentFns { d, m, bound: 0.0, g: |_: &[f64], _: &[f64], o: &mut [f64]| o.fill(0.0), dx: |_: &[f64], _: &[f64], o: &mut [f64]| o.fill(0.0), dm: |_: &[f64], _: &[f64], o: &mut [f64]| o.fill(0.0) },
            d,
            m,
        )
        .unwrap()
    }

    fn constant_coeff(c: Vec<f64>, d: usize, m: usize) -> impl MeanFieldCoefficient {
        make_moment(
            MomentFns {
                d,
                m,
                bound: 1.0,
                g: move |_: &[f64], _: &[f64], o: &mut [f64]| o.copy_from_slice(&c),
                dx: |_: &[f64], _: &[f64], o: &mut [f64]| o.fill(0.0),
                dm: |_: &[f64], _: &[f64], o: &mut [f64]| o.fill(0.0),
            },
            d,
            m,
        )
        .unwrap()
    }

    #[test]
    fn zero_coefficient_freezes_states() {
        let setup = brownian_setup(3, 16, 2, 4);
        let coeff = zero_coeff(2, 2);
        let x0 = [0.1, 0.2, -0.3, 0.4, 0.5, -0.6];
        let traj = solve_particle_system(&setup, &coeff, &x0, SchemeKind::Compensated).unwrap();
        for k in 0..=16 {
            assert_eq!(traj.snapshot(k), &x0);
        }
    }

    #[test]
    fn additive_noise_is_exact() {
        let (d, m) = (2, 3);
        let c = vec![0.5, -1.0, 2.0, 0.25, 0.0, 1.5];
        let coeff = constant_coeff(c.clone(), d, m);
        let setup = brownian_setup(4, 32, m, 9);
        let x0: Vec<f64> = (0..8).map(|v| v as f64 * 0.1).collect();
        for scheme in [SchemeKind::Euler, SchemeKind::Compensated] {
            let traj = solve_particle_system(&setup, &coeff, &x0, scheme).unwrap();
            for k in 0..=32 {
                for i in 0..4 {
                    let w = setup.path(i).point(k);
                    for a in 0..d {
                        let expect = x0[i * d + a] + (0..m).map(|b| c[a * m + b] * w[b]).sum::<f64>();
                        assert!((traj.state(k, i)[a] - expect).abs() < 1e-13);
                    }
                }
            }
        }
    }

    #[test]
    fn two_particle_hand_expansion() {
        // F(x, μ) = (s/2) Σ_j tanh(x - x_j), d = m = 1
        let s = 0.8;
        let coeff = builtin("conv_tanh", s, 0.0, 1, 1).unwrap();
        let (a1, a2) = (0.1, -0.2);
        let setup = setup_from(&[vec![0.0, a1, a1], vec![0.0, a2, a2]], 2, 1);
        let (x1, x2) = (0.3, -0.45);
        let next = step_compensated(&[x1, x2], &setup, &coeff, 0).unwrap();

        let t = (x1 - x2).tanh();
        let sech2 = 1.0 - t * t;
        let f1 = 0.5 * s * t;
        let f2 = -0.5 * s * t;
        // ∂_x F(x^1) = (s/2)(sech²(0) + sech²(x1 - x2)), D_μF(x^1)(z) = -s sech²(x1 - z)
        let dx1 = 0.5 * s * (1.0 + sech2);
        let dx2 = dx1;
        let dmu = |zdiff_sech2: f64| -s * zdiff_sech2;
        let term1_1 = f1 * a1;
        let term2_1 = dx1 * f1 * 0.5 * a1 * a1;
        let term3_1 = 0.5 * (dmu(1.0) * f1 * 0.5 * a1 * a1 + dmu(sech2) * f2 * 0.5 * a2 * a1);
        let term1_2 = f2 * a2;
        let term2_2 = dx2 * f2 * 0.5 * a2 * a2;
        let term3_2 = 0.5 * (dmu(sech2) * f1 * 0.5 * a1 * a2 + dmu(1.0) * f2 * 0.5 * a2 * a2);
        assert!((next[0] - (x1 + term1_1 + term2_1 + term3_1)).abs() < 1e-12);
        assert!((next[1] - (x2 + term1_2 + term2_2 + term3_2)).abs() < 1e-12);
    }

    #[test]
    fn stored_grid_blocks_match_single_step_formula() {
        let spec = GridSpec::new(1.0, 12, 2).unwrap();
        let paths = sample_ensemble(DriverKind::Brownian, spec, 31, 4).unwrap();
        let lazy = build_empirical_setup(paths.clone(), false).unwrap();
        let eager = build_empirical_setup(paths, true).unwrap();
        let x0: Vec<f64> = (0..8).map(|v| 0.2 * v as f64 - 0.7).collect();
        for name in ["conv_tanh", "moment_tanh"] {
            let coeff = builtin(name, 0.6, -0.4, 2, 2).unwrap();
            let a = solve_particle_system(&lazy, &coeff, &x0, SchemeKind::Compensated).unwrap();
            let b = solve_particle_system(&eager, &coeff, &x0, SchemeKind::Compensated).unwrap();
            for (x, y) in a.states().iter().zip(b.states()) {
                assert!((x - y).abs() < 1e-13);
            }
        }
    }

    #[test]
    fn blow_up_reports_step() {
        let coeff = make_moment(
            MomentFns {
                d: 1,
                m: 1,
                bound: 1.0,
                g: |x: &[f64], _: &[f64], o: &mut [f64]| o[0] = if x[0] > 1.5 { f64::INFINITY } else { 1.0 },
                dx: |_: &[f64], _: &[f64], o: &mut [f64]| o.fill(0.0),
                dm: |_: &[f64], _: &[f64], o: &mut [f64]| o.fill(0.0),
            },
            1,
            1,
        )
        .unwrap();
        let values: Vec<f64> = (0..=4).map(|k| k as f64).collect();
        let setup = setup_from(&[values], 4, 1);
        let err = solve_particle_system(&setup, &coeff, &[0.0], SchemeKind::Euler).unwrap_err();
        assert!(matches!(err, Error::BlowUp { step: 2 }));
    }

    #[test]
    fn exchangeability_and_determinism() {
        let n = 5;
        let spec = GridSpec::new(1.0, 24, 2).unwrap();
        let paths = sample_ensemble(DriverKind::Brownian, spec, 77, n).unwrap();
        let x0: Vec<f64> = (0..n * 2).map(|v| (v as f64 * 0.37).sin()).collect();
        let coeff = builtin("conv_tanh", 0.7, 0.0, 2, 2).unwrap();
        let setup = build_empirical_setup(paths.clone(), false).unwrap();
        let base = solve_particle_system(&setup, &coeff, &x0, SchemeKind::Compensated).unwrap();
        let again = solve_particle_system(&setup, &coeff, &x0, SchemeKind::Compensated).unwrap();
        assert_eq!(base, again);

        let perm = [3, 0, 4, 1, 2];
        let pp: Vec<GridPath> = perm.iter().map(|&p| paths[p].clone()).collect();
        let px0: Vec<f64> = perm.iter().flat_map(|&p| x0[p * 2..p * 2 + 2].to_vec()).collect();
        let permuted = solve_particle_system(&build_empirical_setup(pp, false).unwrap(), &coeff, &px0, SchemeKind::Compensated).unwrap();
        for k in 0..=24 {
            for (slot, &p) in perm.iter().enumerate() {
                for a in 0..2 {
                    assert!((permuted.state(k, slot)[a] - base.state(k, p)[a]).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn no_interaction_ignores_other_noises() {
        // f(x, y) = sin(x): D_μF = 0
        let kernel = KernelFns {
            d: 1,
            m: 1,
            bound: 1.0,
            f: |x: &[f64], _: &[f64], o: &mut [f64]| o[0] = x[0].sin(),
            dx: |x: &[f64], _: &[f64], o: &mut [f64]| o[0] = x[0].cos(),
            dy: |_: &[f64], _: &[f64], o: &mut [f64]| o[0] = 0.0,
        };
        let coeff = make_convolution(kernel, 1, 1).unwrap();
        let spec = GridSpec::new(1.0, 20, 1).unwrap();
        let mut paths = sample_ensemble(DriverKind::Brownian, spec, 5, 3).unwrap();
        let x0 = [0.2, 0.5, -0.1];
        let base = solve_particle_system(&build_empirical_setup(paths.clone(), false).unwrap(), &coeff, &x0, SchemeKind::Compensated).unwrap();
        paths[1] = sample_ensemble(DriverKind::Brownian, spec, 99, 1).unwrap().remove(0);
        paths[2] = GridPath::from_values(spec, vec![0.0; 21], None).unwrap();
        let ablated = solve_particle_system(&build_empirical_setup(paths, false).unwrap(), &coeff, &[0.2, 3.0, 1.0], SchemeKind::Compensated).unwrap();
        assert_eq!(base.particle(0), ablated.particle(0));
    }

    #[test]
    fn frozen_delta_flow_with_tanh_of_mean() {
        let coeff = make_moment(
            MomentFns {
                d: 1,
                m: 1,
                bound: 1.0,
                g: |_: &[f64], mean: &[f64], o: &mut [f64]| o[0] = mean[0].tanh(),
                dx: |_: &[f64], _: &[f64], o: &mut [f64]| o[0] = 0.0,
                dm: |_: &[f64], mean: &[f64], o: &mut [f64]| o[0] = 1.0 - mean[0].tanh().powi(2),
            },
            1,
            1,
        )
        .unwrap();
        let setup = brownian_setup(1, 16, 1, 3);
        let flow = MeasureFlow::constant(&[0.0], 1, 17).unwrap();
        let traj = solve_frozen_measure(setup.path(0), setup.self_blocks(0), &coeff, &flow, &[0.7]).unwrap();
        assert!(traj.iter().all(|&v| v == 0.7));
    }

    #[test]
    fn companion_on_own_flow_differs_by_measure_term_only() {
        let coeff = builtin("moment_tanh", 0.5, 0.5, 1, 1).unwrap();
        let setup = brownian_setup(1, 8, 1, 21);
        let x0 = [0.3];
        let traj = solve_particle_system(&setup, &coeff, &x0, SchemeKind::Compensated).unwrap();
        let one_step = step_compensated(&x0, &setup, &coeff, 0).unwrap();
        let flow = MeasureFlow::from_trajectories(traj);
        let comp = solve_frozen_measure(setup.path(0), setup.self_blocks(0), &coeff, &flow, &x0).unwrap();
        let lambda = coeff.lipschitz_bound();
        let a = setup.path(0).increment(0, 1)[0];
        let gap = (comp[1] - one_step[0]).abs();
        assert!(gap > 0.0);
        assert!(gap <= lambda * lambda * (0.5 * a * a) + 1e-15);
    }

    #[test]
    fn coupling_gap_cases() {
        let setup = brownian_setup(4, 8, 1, 1);
        let coeff = builtin("moment_tanh", 0.5, 0.5, 1, 1).unwrap();
        let x0 = [0.0, 0.5, -0.5, 1.0];
        let traj = solve_particle_system(&setup, &coeff, &x0, SchemeKind::Compensated).unwrap();
        let same: Vec<Vec<f64>> = (0..4).map(|i| traj.particle(i)).collect();
        let e = coupling_errors(&traj, &same).unwrap();
        assert!(e.per_particle.iter().all(|&g| g == 0.0) && e.sup_t_w1_gap == 0.0);
        let shifted: Vec<Vec<f64>> = same.iter().map(|p| p.iter().map(|v| v - 0.75).collect()).collect();
        let e = coupling_errors(&traj, &shifted).unwrap();
        assert!((e.sup_t_w1_gap - 0.75).abs() < 1e-12);
        assert!(e.per_particle.iter().all(|&g| (g - 0.75).abs() < 1e-12));
        assert!(coupling_errors(&traj, &same[..3]).is_err());
        assert!((sup_i_mean_sup_t_gap(&[e.clone(), e]).unwrap() - 0.75).abs() < 1e-12);
    }

    #[test]
    fn gubinelli_derivative_is_f() {
        let setup = brownian_setup(3, 4, 1, 2);
        let coeff = builtin("conv_tanh", 1.0, 0.0, 1, 1).unwrap();
        let traj = solve_particle_system(&setup, &coeff, &[0.0, 1.0, 2.0], SchemeKind::Euler).unwrap();
        let der = gubinelli_derivative(&coeff, &traj, 0);
        let expect = ((0.0f64 - 1.0).tanh() + (0.0f64 - 2.0).tanh()) / 3.0;
        assert!((der[0] - expect).abs() < 1e-15);
    }
}
