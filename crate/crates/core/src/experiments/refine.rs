//! Mesh self-refinement of the particle schemes on a common fine Brownian path.

use rayon::prelude::*;

use crate::coeff::builtin;
use crate::driver::{DriverKind, DriverSampler, GridSpec};
use crate::error::{Error, Result};
use crate::lift::build_empirical_setup;
use crate::measure::{fit_rate, RateFit};
use crate::seed::{derive_seed, tag};
use crate::solver::{solve_particle_system, SchemeKind};

use super::config::SampleLaw;
use super::sample_law;

/// How the level-2 blocks of a coarse level are obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CoarseLift {
    /// Chen-composed from the fine lift: every level is a partition of one rough set-up.
    FromFine,
    /// Fresh single-step lift of the coarsened paths (no areas between distinct drivers).
    GridLift,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefinementConfig {
    pub n: usize,
    /// Steps of the shared fine path; every level and its double must divide it.
    pub fine_steps: usize,
    pub levels: Vec<usize>,
    pub replications: usize,
    pub seed: u64,
    pub coefficient: String,
    pub a: f64,
    pub b: f64,
    pub init: SampleLaw,
    pub lift: CoarseLift,
}

/// `(K, E|X_T(K) - X_T(2K)|)` per level, averaged over particles and replications.
pub fn self_refinement(cfg: &RefinementConfig, scheme: SchemeKind) -> Result<Vec<(usize, f64)>> {
    for &k in &cfg.levels {
        if k < 2 || cfg.fine_steps % (2 * k) != 0 {
            return Err(Error::InvalidParameter(format!("level {k} and its double must divide {}", cfg.fine_steps)));
        }
    }
    if cfg.replications == 0 || cfg.n == 0 {
        return Err(Error::InvalidParameter("need at least one particle and one replication".into()));
    }
    let coeff = builtin(&cfg.coefficient, cfg.a, cfg.b, 1, 1)?;
    let spec = GridSpec::new(1.0, cfg.fine_steps, 1)?;
    let sampler = DriverSampler::new(DriverKind::Brownian, spec)?;
    let per_rep = (0..cfg.replications)
        .into_par_iter()
        .map(|rep| -> Result<Vec<f64>> {
            let seed = derive_seed(&[cfg.seed, tag("refine"), rep as u64]);
            let fine = build_empirical_setup(sampler.ensemble(seed, cfg.n), false)?;
            let x0 = sample_law(cfg.init, cfg.n, 1, derive_seed(&[seed, tag("init")]));
            let terminal = |k: usize| -> Result<Vec<f64>> {
                let setup = match cfg.lift {
                    CoarseLift::FromFine => fine.coarsen(cfg.fine_steps / k)?,
                    CoarseLift::GridLift => build_empirical_setup(
                        fine.paths().iter().map(|p| p.coarsen(cfg.fine_steps / k)).collect::<Result<Vec<_>>>()?,
                        false,
                    )?,
                };
                Ok(solve_particle_system(&setup, coeff.as_ref(), &x0, scheme)?.terminal().to_vec())
            };
            cfg.levels
                .iter()
                .map(|&k| {
                    let (coarse, finer) = (terminal(k)?, terminal(2 * k)?);
                    Ok(coarse.iter().zip(&finer).map(|(a, b)| (a - b).abs()).sum::<f64>() / cfg.n as f64)
                })
                .collect()
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(cfg
        .levels
        .iter()
        .enumerate()
        .map(|(l, &k)| (k, per_rep.iter().map(|r| r[l]).sum::<f64>() / cfg.replications as f64))
        .collect())
}

/// Slope of `log error` against `log K` (identical in any log base).
pub fn refinement_slope(errors: &[(usize, f64)]) -> Result<RateFit> {
    let ks: Vec<usize> = errors.iter().map(|e| e.0).collect();
    let vals: Vec<f64> = errors.iter().map(|e| e.1).collect();
    fit_rate(&ks, &vals, false)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_levels_that_do_not_divide() {
        let cfg = RefinementConfig {
            n: 2,
            fine_steps: 96,
            levels: vec![64],
            replications: 1,
            seed: 1,
            coefficient: "moment_tanh".into(),
            a: 0.5,
            b: 0.5,
            init: SampleLaw::Normal,
            lift: CoarseLift::FromFine,
        };
        assert!(self_refinement(&cfg, SchemeKind::Compensated).is_err());
    }
}
