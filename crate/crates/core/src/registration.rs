//! Coarse-to-fine diffeomorphic registration.
//!
//! At every pyramid level the source is warped by the running deformation, a
//! small velocity is solved against the target, and the deformation is
//! replaced by `phi ∘ (Id + v)`. Levels hand the deformation (not the list of
//! velocities) to the next finer grid.

use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::admm::{SolverConfig, VelocitySolver};
use crate::error::{RegError, Result};
use crate::scalar::Real;
use crate::volume::{
    binomial_smooth, compose_deformation, image_gradient, sample_vector, warp_image,
    DeformationField, Dims, ScalarVolume, Spacing, VectorField,
};

/// Which of the two stopping regimes to run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    /// Fixed iteration budgets per level; the ADMM tolerance defaults to 0.
    Capped,
    /// Run until the ADMM tolerance and the warp-improvement threshold are met.
    Converged,
}

/// Iteration ceiling used by the `converged` profile, where budgets are
/// nominally unbounded.
pub const CONVERGED_ADMM_LIMIT: usize = 500;
pub const CONVERGED_WARP_LIMIT: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RegistrationConfig {
    pub solver: SolverConfig,
    pub levels: usize,
    /// Coarsest level first.
    pub max_warps_per_level: Vec<usize>,
    /// Coarsest level first.
    pub max_admm_iters_per_level: Vec<usize>,
    /// Minimum relative decrease of the mean absolute difference between two
    /// consecutive warps (`converged` profile only).
    pub warp_improvement_threshold: f64,
    pub profile: Profile,
    /// Smooth the warped source with a 3-tap binomial filter before taking
    /// its gradient.
    pub smooth_gradient: bool,
}

impl RegistrationConfig {
    /// Three-level setup for `profile`. For `Capped`, ADMM runs (10, 5, 5)
    /// iterations and at most (10, 10, 5) warps, coarse to fine.
    pub fn new(solver: SolverConfig, profile: Profile) -> Self {
        Self::with_levels(solver, profile, 3)
    }

    pub fn with_levels(mut solver: SolverConfig, profile: Profile, levels: usize) -> Self {
        let levels = levels.max(1);
        let (warps, iters) = match profile {
            Profile::Capped => {
                solver.tol = 0.0;
                let iters = (0..levels).map(|l| if l == 0 { 10 } else { 5 }).collect();
                let warps = (0..levels)
                    .map(|l| if l + 1 == levels && levels > 1 { 5 } else { 10 })
                    .collect();
                (warps, iters)
            }
            Profile::Converged => {
                if solver.tol == 0.0 {
                    solver.tol = 0.01;
                }
                (
                    vec![CONVERGED_WARP_LIMIT; levels],
                    vec![CONVERGED_ADMM_LIMIT; levels],
                )
            }
        };
        RegistrationConfig {
            solver,
            levels,
            max_warps_per_level: warps,
            max_admm_iters_per_level: iters,
            warp_improvement_threshold: 0.02,
            profile,
            smooth_gradient: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.solver.validate()?;
        if self.levels == 0 {
            return Err(RegError::invalid("levels", "must be at least 1"));
        }
        if self.max_warps_per_level.len() != self.levels
            || self.max_admm_iters_per_level.len() != self.levels
        {
            return Err(RegError::invalid(
                "levels",
                format!(
                    "{} levels but {} warp caps and {} ADMM caps",
                    self.levels,
                    self.max_warps_per_level.len(),
                    self.max_admm_iters_per_level.len()
                ),
            ));
        }
        if self.max_admm_iters_per_level.contains(&0) {
            return Err(RegError::invalid("max_admm_iters_per_level", "caps must be positive"));
        }
        let t = self.warp_improvement_threshold;
        if !(t > 0.0 && t < 1.0) {
            return Err(RegError::invalid(
                "warp_improvement_threshold",
                format!("{t} outside (0, 1)"),
            ));
        }
        Ok(())
    }

    pub fn max_velocity_count(&self) -> usize {
        self.max_warps_per_level.iter().sum()
    }

    /// Smallest axis length the pyramid accepts.
    pub fn min_axis(&self) -> usize {
        4usize << (self.levels - 1)
    }
}

/// What happened at one pyramid level.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LevelLog {
    pub level: usize,
    pub dims: Dims,
    /// Accepted warps.
    pub warps: usize,
    /// ADMM iterations per solve, including a final rejected solve if any.
    pub admm_iterations: Vec<usize>,
    /// Mean absolute difference before the first warp and after each accepted one.
    pub sad: Vec<f64>,
    pub stop: StopReason,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    WarpCap,
    Threshold,
    /// The latest warp did not lower the data term and was discarded.
    NoImprovement,
}

#[derive(Clone, Debug)]
pub struct RegistrationResult<T> {
    pub phi: DeformationField<T>,
    /// `warp_image(source, phi)`.
    pub warped: ScalarVolume<T>,
    pub velocity_count: usize,
    /// Coarsest level first.
    pub per_level_log: Vec<LevelLog>,
    pub elapsed_seconds: f64,
}

/// Halve every axis by 2×2×2 block averaging; odd axes are first padded by
/// repeating their last slice. Spacing doubles.
pub fn downsample<T: Real>(img: &ScalarVolume<T>) -> ScalarVolume<T> {
    let (dims, data) = block_mean(img.dims(), img.data(), |v: &T| v.wide(), |x| T::of(x));
    let s = img.spacing();
    ScalarVolume::from_parts_unchecked(dims, [s[0] * 2.0, s[1] * 2.0, s[2] * 2.0], data)
}

/// Block mean of a vector field, with the same padding rule as [`downsample`].
/// Components are left in the units of the input grid.
pub fn downsample_field<T: Real>(v: &VectorField<T>) -> VectorField<T> {
    let mut parts = Vec::with_capacity(3);
    let mut dims = v.dims();
    for c in 0..3 {
        let (d, data) = block_mean(v.dims(), v.data(), |x: &[T; 3]| x[c].wide(), |x| T::of(x));
        dims = d;
        parts.push(data);
    }
    let data = (0..dims.len())
        .map(|i| [parts[0][i], parts[1][i], parts[2][i]])
        .collect();
    let s = v.spacing();
    VectorField::from_parts_unchecked(dims, [s[0] * 2.0, s[1] * 2.0, s[2] * 2.0], data)
}

fn block_mean<S: Sync, T: Send>(
    dims: Dims,
    data: &[S],
    get: impl Fn(&S) -> f64 + Sync,
    put: impl Fn(f64) -> T + Sync,
) -> (Dims, Vec<T>) {
    let out = Dims::new(dims.nx.div_ceil(2), dims.ny.div_ceil(2), dims.nz.div_ceil(2));
    let values = (0..out.len())
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = out.coords(idx);
            let mut acc = 0.0;
            for dz in 0..2 {
                for dy in 0..2 {
                    for dx in 0..2 {
                        let x = (2 * i + dx).min(dims.nx - 1);
                        let y = (2 * j + dy).min(dims.ny - 1);
                        let z = (2 * k + dz).min(dims.nz - 1);
                        acc += get(&data[dims.index(x, y, z)]);
                    }
                }
            }
            put(acc / 8.0)
        })
        .collect();
    (out, values)
}

/// Trilinear upsampling to `target` followed by doubling every component, so
/// displacements are expressed in voxels of the finer grid. Fine voxel `x`
/// sits at coarse coordinate `(x − ½) / 2`.
pub fn upsample_velocity<T: Real>(v: &VectorField<T>, target: Dims) -> Result<VectorField<T>> {
    let src = v.dims();
    if target.nx < src.nx || target.ny < src.ny || target.nz < src.nz {
        return Err(RegError::invalid(
            "target_dims",
            format!("{target} is smaller than the source grid {src}"),
        ));
    }
    let two = T::of(2.0);
    let to_coarse = |x: usize| T::of((x as f64 - 0.5) / 2.0);
    let s = v.spacing();
    let spacing: Spacing = [s[0] / 2.0, s[1] / 2.0, s[2] / 2.0];
    Ok(VectorField::from_fn(target, spacing, |i, j, k| {
        let u = sample_vector(v, [to_coarse(i), to_coarse(j), to_coarse(k)]);
        [u[0] * two, u[1] * two, u[2] * two]
    }))
}

/// Joint affine rescale of two volumes into `[0, 1]`.
pub fn normalise_pair<T: Real>(a: &ScalarVolume<T>, b: &ScalarVolume<T>) -> (ScalarVolume<T>, ScalarVolume<T>) {
    let (lo_a, hi_a) = a.range();
    let (lo_b, hi_b) = b.range();
    let lo = lo_a.min(lo_b);
    let span = hi_a.max(hi_b) - lo;
    let inv = if span > T::zero() { T::one() / span } else { T::one() };
    (a.map(|x| (x - lo) * inv), b.map(|x| (x - lo) * inv))
}

fn with_spacing<T: Real>(v: VectorField<T>, spacing: Spacing) -> VectorField<T> {
    let dims = v.dims();
    VectorField::from_parts_unchecked(dims, spacing, v.into_data())
}

/// Register `source` onto `target`: the returned `phi` maps target voxel
/// coordinates into the source, so `warp_image(source, phi) ≈ target`.
pub fn register_pair<T: Real>(
    target: &ScalarVolume<T>,
    source: &ScalarVolume<T>,
    cfg: &RegistrationConfig,
) -> Result<RegistrationResult<T>> {
    let start = Instant::now();
    cfg.validate()?;
    target.dims().require_same(source.dims())?;
    target.dims().require_min(cfg.min_axis())?;

    let (tgt, src) = normalise_pair(target, source);
    // finest first
    let mut targets = vec![tgt];
    let mut sources = vec![src];
    for _ in 1..cfg.levels {
        let t = downsample(targets.last().unwrap());
        let s = downsample(sources.last().unwrap());
        targets.push(t);
        sources.push(s);
    }

    let mut phi: Option<DeformationField<T>> = None;
    let mut logs = Vec::with_capacity(cfg.levels);
    let mut velocity_count = 0;

    for level in 0..cfg.levels {
        let pyr = cfg.levels - 1 - level;
        let (tgt, src) = (&targets[pyr], &sources[pyr]);
        let dims = tgt.dims();
        let mut current = match phi.take() {
            None => DeformationField::identity(dims, tgt.spacing()),
            Some(coarse) => DeformationField::from_displacement(with_spacing(
                upsample_velocity(coarse.displacement(), dims)?,
                tgt.spacing(),
            )),
        };

        let solver_cfg = SolverConfig {
            max_iters: cfg.max_admm_iters_per_level[level],
            ..cfg.solver.clone()
        };
        let solver = VelocitySolver::<T>::new(dims, solver_cfg)?;

        let mut warped = warp_image(src, &current)?;
        let mut sad = warped.mean_abs_diff(tgt)?;
        let mut log = LevelLog {
            level,
            dims,
            warps: 0,
            admm_iterations: Vec::new(),
            sad: vec![sad],
            stop: StopReason::WarpCap,
        };

        for _ in 0..cfg.max_warps_per_level[level] {
            let grad = if cfg.smooth_gradient {
                image_gradient(&binomial_smooth(&warped))?
            } else {
                image_gradient(&warped)?
            };
            let (v, diag) = solver.solve_with_gradient(tgt, &warped, &grad)?;
            log.admm_iterations.push(diag.iterations);

            let candidate = compose_deformation(&current, &v)?;
            let candidate_warped = warp_image(src, &candidate)?;
            let candidate_sad = candidate_warped.mean_abs_diff(tgt)?;
            if !candidate_sad.is_finite() {
                return Err(RegError::NonFinite("warped source"));
            }
            if candidate_sad >= sad {
                log.stop = StopReason::NoImprovement;
                break;
            }
            let improvement = (sad - candidate_sad) / sad;
            current = candidate;
            warped = candidate_warped;
            sad = candidate_sad;
            log.warps += 1;
            log.sad.push(sad);
            velocity_count += 1;
            if cfg.profile == Profile::Converged && improvement < cfg.warp_improvement_threshold {
                log.stop = StopReason::Threshold;
                break;
            }
        }
        logs.push(log);
        phi = Some(current);
    }

    let phi = phi.expect("at least one level");
    let phi = DeformationField::from_displacement(with_spacing(
        phi.into_displacement(),
        source.spacing(),
    ));
    if !phi.displacement().is_finite() {
        return Err(RegError::NonFinite("deformation"));
    }
    let warped = warp_image(source, &phi)?;
    Ok(RegistrationResult {
        phi,
        warped,
        velocity_count,
        per_level_log: logs,
        elapsed_seconds: start.elapsed().as_secs_f64(),
    })
}
