//! Level-2 lifts of grid paths.
//!
//! The iterated integral of driver `j` against driver `i` is taken along the
//! piecewise-linear interpolants of both paths. On a single step this is
//! `½ a_k ⊗ b_k` with `a_k`, `b_k` the step increments, and any coarser grid
//! interval is recovered exactly through Chen's relation
//! `𝕎_{r,t} = 𝕎_{r,s} + 𝕎_{s,t} + W^i_{r,s} ⊗ W^j_{s,t}`.

use std::borrow::Cow;
use std::io::{Read, Write};

use crate::driver::{DriverKind, GridPath, GridSpec, SeedTag};
use crate::error::{Error, Result};

/// Per-step blocks `𝕎^{i,j}_{t_k,t_{k+1}}`, `K` row-major `m x m` matrices.
#[derive(Debug, Clone, PartialEq)]
pub struct Level2Blocks {
    spec: GridSpec,
    pair: (usize, usize),
    blocks: Vec<f64>,
}

impl Level2Blocks {
    pub fn spec(&self) -> &GridSpec {
        &self.spec
    }

    pub fn pair(&self) -> (usize, usize) {
        self.pair
    }

    pub fn block(&self, k: usize) -> &[f64] {
        let mm = self.spec.dim * self.spec.dim;
        &self.blocks[k * mm..(k + 1) * mm]
    }

    pub fn with_pair(mut self, pair: (usize, usize)) -> Self {
        self.pair = pair;
        self
    }
}

/// Writes `½ a ⊗ b` into `out` (row-major `m x m`).
#[inline]
pub fn step_block_into(a: &[f64], b: &[f64], out: &mut [f64]) {
    let m = a.len();
    for r in 0..m {
        for c in 0..m {
            out[r * m + c] = 0.5 * a[r] * b[c];
        }
    }
}

/// Grid lift of the pair `(path_i, path_j)`.
pub fn lift_cross(path_i: &GridPath, path_j: &GridPath) -> Result<Level2Blocks> {
    if path_i.spec() != path_j.spec() {
        return Err(Error::SpecMismatch);
    }
    let spec = *path_i.spec();
    let m = spec.dim;
    let mut blocks = vec![0.0; spec.steps * m * m];
    let mut a = vec![0.0; m];
    let mut b = vec![0.0; m];
    for k in 0..spec.steps {
        path_i.increment_into(k, k + 1, &mut a);
        path_j.increment_into(k, k + 1, &mut b);
        step_block_into(&a, &b, &mut blocks[k * m * m..(k + 1) * m * m]);
    }
    Ok(Level2Blocks { spec, pair: (0, 0), blocks })
}

/// `𝕎^{i,j}_{t_from, t_to}` assembled from unit steps left to right.
pub fn chen_eval(
    blocks: &Level2Blocks,
    path_i: &GridPath,
    path_j: &GridPath,
    k_from: usize,
    k_to: usize,
) -> Result<Vec<f64>> {
    let spec = blocks.spec();
    if path_i.spec() != spec || path_j.spec() != spec {
        return Err(Error::SpecMismatch);
    }
    if k_to > spec.steps {
        return Err(Error::IndexOutOfRange { index: k_to, limit: spec.steps });
    }
    if k_from > k_to {
        return Err(Error::IndexOutOfRange { index: k_from, limit: k_to });
    }
    let m = spec.dim;
    let mut acc = vec![0.0; m * m];
    let mut left = vec![0.0; m];
    let mut right = vec![0.0; m];
    for k in k_from..k_to {
        path_i.increment_into(k_from, k, &mut left);
        path_j.increment_into(k, k + 1, &mut right);
        let blk = blocks.block(k);
        for r in 0..m {
            for c in 0..m {
                acc[r * m + c] += blk[r * m + c] + left[r] * right[c];
            }
        }
    }
    Ok(acc)
}

/// All intervals at once: `table[a][b]` (row-major over `(K+1)^2`, each entry an
/// `m x m` block) holds `𝕎_{t_a,t_b}` for `a <= b`; entries with `a > b` are zero.
pub fn chen_table(blocks: &Level2Blocks, path_i: &GridPath, path_j: &GridPath) -> Vec<f64> {
    let spec = blocks.spec();
    let (pts, m) = (spec.points(), spec.dim);
    let mm = m * m;
    let mut table = vec![0.0; pts * pts * mm];
    let mut left = vec![0.0; m];
    let mut right = vec![0.0; m];
    for a in 0..pts {
        for b in a..spec.steps {
            path_i.increment_into(a, b, &mut left);
            path_j.increment_into(b, b + 1, &mut right);
            let blk = blocks.block(b);
            let src = (a * pts + b) * mm;
            let dst = (a * pts + b + 1) * mm;
            for r in 0..m {
                for c in 0..m {
                    table[dst + r * m + c] = table[src + r * m + c] + blk[r * m + c] + left[r] * right[c];
                }
            }
        }
    }
    table
}

/// Largest relative residuals of Chen's relation and of integration by parts
/// `𝕎^{i,j}_{s,t} + (𝕎^{j,i}_{s,t})ᵀ = W^i_{s,t} ⊗ W^j_{s,t}` for one pair.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LiftResiduals {
    pub chen: f64,
    pub integration_by_parts: f64,
}

/// Checks every interval for integration by parts and every triple `r < s < t` of
/// the checkpoints `0, stride, 2 stride, ..., K` (the end point always included) for Chen.
///
/// Residuals are relative to `V^i_{r,t} V^j_{r,t}`, the product of the 1-variations
/// over the interval, which bounds every partial sum the lift is built from.
pub fn lift_residuals(setup: &EmpiricalRoughSetup, i: usize, j: usize, stride: usize) -> Result<LiftResiduals> {
    let spec = *setup.spec();
    let (pts, m) = (spec.points(), spec.dim);
    let mm = m * m;
    let (pi, pj) = (setup.path(i), setup.path(j));
    let ij = chen_table(&*setup.cross(i, j)?, pi, pj);
    let ji = chen_table(&*setup.cross(j, i)?, pj, pi);
    let rel = |res: f64, scale: f64| if scale > 0.0 { res / scale } else { res };
    let cumulative = |p: &GridPath| {
        let mut acc = vec![0.0; pts];
        let mut inc = vec![0.0; m];
        for k in 0..spec.steps {
            p.increment_into(k, k + 1, &mut inc);
            acc[k + 1] = acc[k] + inc.iter().map(|v| v * v).sum::<f64>().sqrt();
        }
        acc
    };
    let (vi, vj) = (cumulative(pi), cumulative(pj));
    let scale_of = |a: usize, b: usize| (vi[b] - vi[a]) * (vj[b] - vj[a]);
    let mut out = LiftResiduals::default();
    let (mut wi, mut wj) = (vec![0.0; m], vec![0.0; m]);
    for s in 0..pts {
        for t in s + 1..pts {
            pi.increment_into(s, t, &mut wi);
            pj.increment_into(s, t, &mut wj);
            let idx = (s * pts + t) * mm;
            let mut res = 0.0f64;
            for r in 0..m {
                for c in 0..m {
                    let outer = wi[r] * wj[c];
                    let lhs = ij[idx + r * m + c] + ji[idx + c * m + r];
                    res = res.max((lhs - outer).abs());
                }
            }
            out.integration_by_parts = out.integration_by_parts.max(rel(res, scale_of(s, t)));
        }
    }
    let stride = stride.max(1);
    let mut checkpoints: Vec<usize> = (0..pts).step_by(stride).collect();
    if *checkpoints.last().unwrap() != spec.steps {
        checkpoints.push(spec.steps);
    }
    for (x, &r) in checkpoints.iter().enumerate() {
        for (y, &s) in checkpoints.iter().enumerate().skip(x + 1) {
            pi.increment_into(r, s, &mut wi);
            for &t in &checkpoints[y + 1..] {
                pj.increment_into(s, t, &mut wj);
                let (rt, rs, st) = ((r * pts + t) * mm, (r * pts + s) * mm, (s * pts + t) * mm);
                let mut res = 0.0f64;
                for a in 0..m {
                    for b in 0..m {
                        let e = a * m + b;
                        res = res.max((ij[rt + e] - ij[rs + e] - ij[st + e] - wi[a] * wj[b]).abs());
                    }
                }
                out.chen = out.chen.max(rel(res, scale_of(r, t)));
            }
        }
    }
    Ok(out)
}

/// Paths, self lifts and (lazily or eagerly) every cross lift of an ensemble.
#[derive(Debug, Clone, PartialEq)]
pub struct EmpiricalRoughSetup {
    paths: Vec<GridPath>,
    self_blocks: Vec<Level2Blocks>,
    cross: Option<Vec<Level2Blocks>>,
    /// `false` once the level-2 blocks carry areas from a finer grid.
    grid_lift: bool,
}

impl EmpiricalRoughSetup {
    pub fn n(&self) -> usize {
        self.paths.len()
    }

    pub fn spec(&self) -> &GridSpec {
        self.paths[0].spec()
    }

    pub fn paths(&self) -> &[GridPath] {
        &self.paths
    }

    pub fn path(&self, i: usize) -> &GridPath {
        &self.paths[i]
    }

    pub fn self_blocks(&self, i: usize) -> &Level2Blocks {
        &self.self_blocks[i]
    }

    pub fn is_materialized(&self) -> bool {
        self.cross.is_some()
    }

    /// Whether every level-2 block is the single-step lift `½ a ⊗ b` of the stored paths.
    pub fn is_grid_lift(&self) -> bool {
        self.grid_lift
    }

    /// The same rough set-up on the partition made of every `factor`-th grid point.
    ///
    /// Paths are restricted to the coarse points and every level-2 block, cross
    /// blocks included, is assembled from the fine blocks by Chen's relation, so the
    /// areas between distinct drivers accumulated inside a coarse step are kept.
    /// Cross blocks are stored eagerly (`n² K/factor` blocks).
    pub fn coarsen(&self, factor: usize) -> Result<Self> {
        let fine = *self.spec();
        let spec = fine.coarsened(factor)?;
        let n = self.n();
        let m = spec.dim;
        let paths = self.paths.iter().map(|p| p.coarsen(factor)).collect::<Result<Vec<_>>>()?;
        let compose = |i: usize, j: usize| -> Result<Level2Blocks> {
            let blocks = self.cross(i, j)?;
            let mut out = Vec::with_capacity(spec.steps * m * m);
            for k in 0..spec.steps {
                out.extend(chen_eval(&blocks, &self.paths[i], &self.paths[j], k * factor, (k + 1) * factor)?);
            }
            Ok(Level2Blocks { spec, pair: (i, j), blocks: out })
        };
        let self_blocks = (0..n).map(|i| compose(i, i)).collect::<Result<Vec<_>>>()?;
        let mut cross = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                cross.push(if i == j { self_blocks[i].clone() } else { compose(i, j)? });
            }
        }
        Ok(Self { paths, self_blocks, cross: Some(cross), grid_lift: self.grid_lift && factor == 1 })
    }

    /// Blocks of `𝕎^{i,j}`; `i == j` gives the self lift.
    pub fn cross(&self, i: usize, j: usize) -> Result<Cow<'_, Level2Blocks>> {
        let n = self.n();
        for idx in [i, j] {
            if idx >= n {
                return Err(Error::IndexOutOfRange { index: idx, limit: n });
            }
        }
        if i == j {
            return Ok(Cow::Borrowed(&self.self_blocks[i]));
        }
        match &self.cross {
            Some(all) => Ok(Cow::Borrowed(&all[i * n + j])),
            None => Ok(Cow::Owned(lift_cross(&self.paths[i], &self.paths[j])?.with_pair((i, j)))),
        }
    }

    /// Single-step cross block `𝕎^{i,j}_{t_k,t_{k+1}}`, read from storage when the
    /// cross blocks are materialized and computed as `½ a ⊗ b` otherwise.
    pub fn cross_step_into(&self, i: usize, j: usize, k: usize, out: &mut [f64]) {
        if let Some(all) = &self.cross {
            out.copy_from_slice(all[i * self.n() + j].block(k));
            return;
        }
        if i == j {
            out.copy_from_slice(self.self_blocks[i].block(k));
            return;
        }
        let m = self.spec().dim;
        let (pi, pj) = (self.paths[i].point(k), self.paths[j].point(k));
        let (qi, qj) = (self.paths[i].point(k + 1), self.paths[j].point(k + 1));
        for r in 0..m {
            for c in 0..m {
                out[r * m + c] = 0.5 * (qi[r] - pi[r]) * (qj[c] - pj[c]);
            }
        }
    }
}

pub fn build_empirical_setup(paths: Vec<GridPath>, materialize_cross: bool) -> Result<EmpiricalRoughSetup> {
    let first = paths
        .first()
        .ok_or_else(|| Error::InvalidParameter("empirical set-up needs at least one path".into()))?;
    let spec = *first.spec();
    if paths.iter().any(|p| *p.spec() != spec) {
        return Err(Error::SpecMismatch);
    }
    let self_blocks = paths
        .iter()
        .enumerate()
        .map(|(i, p)| lift_cross(p, p).map(|b| b.with_pair((i, i))))
        .collect::<Result<Vec<_>>>()?;
    let cross = if materialize_cross {
        let n = paths.len();
        let mut all = Vec::with_capacity(n * n);
        for i in 0..n {
            for j in 0..n {
                all.push(lift_cross(&paths[i], &paths[j])?.with_pair((i, j)));
            }
        }
        Some(all)
    } else {
        None
    };
    Ok(EmpiricalRoughSetup { paths, self_blocks, cross, grid_lift: true })
}

// Binary dump -----------------------------------------------------------------
//
// Little-endian layout:
//   magic      b"RCSU"
//   version    u32 = 1
//   n, K, m    u64 each
//   T          f64
//   H          f64 (driver Hurst index, NaN when unknown / injected paths)
//   seed       u64, index base u64 (seed tag of path 0; u64::MAX when absent)
//   flags      u32 (bit 0: cross blocks materialized)
//   values     n * (K+1) * m f64, path-major then time then component
//
// Level-2 blocks are a pure function of the paths and are rebuilt on load.

const MAGIC: &[u8; 4] = b"RCSU";
const VERSION: u32 = 1;

pub fn write_setup<W: Write>(setup: &EmpiricalRoughSetup, driver: Option<DriverKind>, mut out: W) -> Result<()> {
    if !setup.is_grid_lift() {
        return Err(Error::Format("only grid lifts can be dumped; level 2 is rebuilt from the paths on load".into()));
    }
    let spec = setup.spec();
    out.write_all(MAGIC)?;
    out.write_all(&VERSION.to_le_bytes())?;
    for v in [setup.n() as u64, spec.steps as u64, spec.dim as u64] {
        out.write_all(&v.to_le_bytes())?;
    }
    out.write_all(&spec.horizon.to_le_bytes())?;
    out.write_all(&driver.map_or(f64::NAN, |d| d.hurst()).to_le_bytes())?;
    let tag = setup.paths[0].seed_tag();
    out.write_all(&tag.map_or(u64::MAX, |t| t.seed).to_le_bytes())?;
    out.write_all(&tag.map_or(u64::MAX, |t| t.index).to_le_bytes())?;
    out.write_all(&(setup.is_materialized() as u32).to_le_bytes())?;
    for p in &setup.paths {
        for v in p.values() {
            out.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

/// Reads a dump written by [`write_setup`]; returns the set-up and the stored Hurst index.
pub fn read_setup<R: Read>(mut input: R) -> Result<(EmpiricalRoughSetup, f64)> {
    let mut magic = [0u8; 4];
    input.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(Error::Format("bad magic".into()));
    }
    let version = read_u32(&mut input)?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported version {version}")));
    }
    let n = read_u64(&mut input)? as usize;
    let steps = read_u64(&mut input)? as usize;
    let dim = read_u64(&mut input)? as usize;
    let horizon = read_f64(&mut input)?;
    let hurst = read_f64(&mut input)?;
    let seed = read_u64(&mut input)?;
    let base = read_u64(&mut input)?;
    let flags = read_u32(&mut input)?;
    if n == 0 {
        return Err(Error::Format("zero paths".into()));
    }
    let spec = GridSpec::new(horizon, steps, dim)?;
    let mut paths = Vec::with_capacity(n);
    for i in 0..n {
        let mut values = vec![0.0; spec.points() * dim];
        for v in values.iter_mut() {
            *v = read_f64(&mut input)?;
        }
        let tag = (seed != u64::MAX || base != u64::MAX).then_some(SeedTag { seed, index: base + i as u64 });
        paths.push(GridPath::from_values(spec, values, tag)?);
    }
    Ok((build_empirical_setup(paths, flags & 1 == 1)?, hurst))
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64<R: Read>(r: &mut R) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}
