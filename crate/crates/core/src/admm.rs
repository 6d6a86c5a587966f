//! Nesterov-accelerated ADMM for one velocity field.
//!
//! Minimises `(1/s)‖ρ(v)‖^s + (λ/2)‖∇ⁿv‖²` with `ρ(v) = ⟨J, v⟩ + I₁ʷ − I₀` by
//! splitting `v = w`. Every iteration is
//!
//! ```text
//! v  = argmin (1/s)‖ρ(v)‖^s + (θ/2)‖ŵ − v − b̂‖²      point-wise, closed form
//! w  = F⁻¹(θ F(v + b̂) / (λ F(Δⁿ) + θ))               one DFT solve per component
//! b  = b̂ + v − w
//! α' = (1 + sqrt(1 + 4α²)) / 2
//! ŵ  = w + (α − 1)/α' (w − w_prev),   b̂ likewise
//! ```

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};
use crate::fft::Fft3;
use crate::regularizer::{check_order, energy_with, laplacian_symbol, SpectralKernel};
use crate::scalar::Real;
use crate::volume::{image_gradient, Dims, ScalarVolume, Spacing, VectorField};

/// Exponent `s` of the data term.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DataTerm {
    /// `s = 1`, sum of absolute linearised residuals.
    L1,
    /// `s = 2`, the Horn–Schunck quadratic data term.
    L2,
}

impl DataTerm {
    pub fn exponent(self) -> u32 {
        match self {
            DataTerm::L1 => 1,
            DataTerm::L2 => 2,
        }
    }

    pub fn from_exponent(s: u32) -> Result<Self> {
        match s {
            1 => Ok(DataTerm::L1),
            2 => Ok(DataTerm::L2),
            _ => Err(RegError::invalid("s", format!("{s} is not 1 or 2"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SolverConfig {
    pub data_term: DataTerm,
    /// Regulariser order `n`.
    pub order: u32,
    pub lambda: f64,
    /// Penalty `θ` of the augmented Lagrangian.
    pub theta: f64,
    /// Division guard in the L1 update.
    pub epsilon: f64,
    pub max_iters: usize,
    /// Stop once the mean per-component change of `v` drops to this value.
    pub tol: f64,
    /// Nesterov extrapolation on `w` and `b`; when false the coefficient is 0.
    pub accelerated: bool,
    /// Record the objective after every iteration.
    pub track_objective: bool,
}

impl SolverConfig {
    pub fn new(data_term: DataTerm, order: u32, lambda: f64, theta: f64) -> Self {
        SolverConfig {
            data_term,
            order,
            lambda,
            theta,
            epsilon: 1e-6,
            max_iters: 10,
            tol: 0.0,
            accelerated: true,
            track_objective: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_order(self.order)?;
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(RegError::invalid("lambda", format!("{} must be >= 0", self.lambda)));
        }
        if !(self.theta.is_finite() && self.theta > 0.0) {
            return Err(RegError::invalid("theta", format!("{} must be > 0", self.theta)));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(RegError::invalid("epsilon", format!("{} must be > 0", self.epsilon)));
        }
        if self.max_iters == 0 {
            return Err(RegError::invalid("max_iters", "must be positive"));
        }
        if !(self.tol.is_finite() && self.tol >= 0.0) {
            return Err(RegError::invalid("tol", format!("{} must be >= 0", self.tol)));
        }
        Ok(())
    }
}

/// Per-solve summary.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    /// Mean per-component `|v^k − v^{k−1}|` at the last iteration.
    pub final_change: f64,
    pub converged: bool,
    /// Objective at `v^k` after each iteration, empty unless tracked.
    pub objective: Vec<f64>,
    /// `‖v^k − w^k‖₂` after each iteration.
    pub constraint_residual: Vec<f64>,
    /// Mean change of `v` after each iteration.
    pub change: Vec<f64>,
}

/// Iterates of the accelerated scheme.
#[derive(Clone, Debug)]
pub struct SolverState<T> {
    pub v: VectorField<T>,
    pub w: VectorField<T>,
    pub b: VectorField<T>,
    pub w_prev: VectorField<T>,
    pub b_prev: VectorField<T>,
    pub w_hat: VectorField<T>,
    pub b_hat: VectorField<T>,
    pub alpha: f64,
    pub k: usize,
    pub objective_log: Vec<f64>,
}

impl<T: Real> SolverState<T> {
    /// All fields zero and `α = 1`.
    pub fn new(dims: Dims, spacing: Spacing) -> Self {
        let z = VectorField::zeros(dims, spacing);
        SolverState {
            v: z.clone(),
            w: z.clone(),
            b: z.clone(),
            w_prev: z.clone(),
            b_prev: z.clone(),
            w_hat: z.clone(),
            b_hat: z,
            alpha: 1.0,
            k: 0,
            objective_log: Vec::new(),
        }
    }
}

/// Next momentum weight `α' = (1 + sqrt(1 + 4α²)) / 2`.
pub fn next_alpha(alpha: f64) -> f64 {
    (1.0 + (1.0 + 4.0 * alpha * alpha).sqrt()) / 2.0
}

fn check_fields<T: Real>(
    i0: &ScalarVolume<T>,
    i1w: &ScalarVolume<T>,
    grad: &VectorField<T>,
    w_hat: &VectorField<T>,
    b_hat: &VectorField<T>,
) -> Result<()> {
    let d = i0.dims();
    d.require_same(i1w.dims())?;
    d.require_same(grad.dims())?;
    d.require_same(w_hat.dims())?;
    d.require_same(b_hat.dims())
}

#[inline]
fn dot3<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

/// L1 v-step at one voxel. `u = ŵ − b̂`, `resid = I₁ʷ − I₀`.
#[inline]
pub(crate) fn l1_voxel<T: Real>(u: [T; 3], g: [T; 3], resid: T, theta: T, eps: T) -> [T; 3] {
    let rho = dot3(g, u) + resid;
    let z = theta * rho / (dot3(g, g) + eps);
    let clip = z / z.abs().max(T::one());
    let s = clip / theta;
    [u[0] - s * g[0], u[1] - s * g[1], u[2] - s * g[2]]
}

/// L2 v-step at one voxel: `(JJᵀ + θ𝟙)v = θu − J·resid` by Sherman–Morrison.
#[inline]
pub(crate) fn l2_voxel<T: Real>(u: [T; 3], g: [T; 3], resid: T, theta: T) -> [T; 3] {
    let r = [
        theta * u[0] - g[0] * resid,
        theta * u[1] - g[1] * resid,
        theta * u[2] - g[2] * resid,
    ];
    let s = dot3(g, r) / (theta * (theta + dot3(g, g)));
    [
        r[0] / theta - g[0] * s,
        r[1] / theta - g[1] * s,
        r[2] / theta - g[2] * s,
    ]
}

fn v_step_into<T: Real>(
    out: &mut [[T; 3]],
    resid: &[T],
    grad: &[[T; 3]],
    w_hat: &[[T; 3]],
    b_hat: &[[T; 3]],
    cfg: &SolverConfig,
) {
    let theta = T::of(cfg.theta);
    let eps = T::of(cfg.epsilon);
    let term = cfg.data_term;
    out.par_iter_mut().enumerate().for_each(|(idx, o)| {
        let wh = w_hat[idx];
        let bh = b_hat[idx];
        let u = [wh[0] - bh[0], wh[1] - bh[1], wh[2] - bh[2]];
        *o = match term {
            DataTerm::L1 => l1_voxel(u, grad[idx], resid[idx], theta, eps),
            DataTerm::L2 => l2_voxel(u, grad[idx], resid[idx], theta),
        };
    });
}

fn residual<T: Real>(i0: &ScalarVolume<T>, i1w: &ScalarVolume<T>) -> Vec<T> {
    i1w.data()
        .par_iter()
        .zip(i0.data().par_iter())
        .map(|(a, b)| *a - *b)
        .collect()
}

fn v_update<T: Real>(
    i0: &ScalarVolume<T>,
    i1w: &ScalarVolume<T>,
    grad: &VectorField<T>,
    w_hat: &VectorField<T>,
    b_hat: &VectorField<T>,
    cfg: &SolverConfig,
) -> Result<VectorField<T>> {
    check_fields(i0, i1w, grad, w_hat, b_hat)?;
    let resid = residual(i0, i1w);
    let mut out = vec![[T::zero(); 3]; i0.dims().len()];
    v_step_into(&mut out, &resid, grad.data(), w_hat.data(), b_hat.data(), cfg);
    Ok(VectorField::from_parts_unchecked(i0.dims(), w_hat.spacing(), out))
}

/// Point-wise v-step for `s = 1` (shrinkage along `J`).
pub fn v_update_l1<T: Real>(
    i0: &ScalarVolume<T>,
    i1w: &ScalarVolume<T>,
    grad: &VectorField<T>,
    w_hat: &VectorField<T>,
    b_hat: &VectorField<T>,
    cfg: &SolverConfig,
) -> Result<VectorField<T>> {
    if !(cfg.epsilon.is_finite() && cfg.epsilon > 0.0) {
        return Err(RegError::invalid("epsilon", format!("{} must be > 0", cfg.epsilon)));
    }
    let cfg = SolverConfig {
        data_term: DataTerm::L1,
        ..cfg.clone()
    };
    v_update(i0, i1w, grad, w_hat, b_hat, &cfg)
}

/// Point-wise v-step for `s = 2`.
pub fn v_update_l2<T: Real>(
    i0: &ScalarVolume<T>,
    i1w: &ScalarVolume<T>,
    grad: &VectorField<T>,
    w_hat: &VectorField<T>,
    b_hat: &VectorField<T>,
    cfg: &SolverConfig,
) -> Result<VectorField<T>> {
    let cfg = SolverConfig {
        data_term: DataTerm::L2,
        ..cfg.clone()
    };
    v_update(i0, i1w, grad, w_hat, b_hat, &cfg)
}

/// Spectral w-step: solves `(λKⁿ + θ𝟙) w = θ(v + b̂)` per component, `K` the
/// periodic negative Laplacian.
pub fn w_update<T: Real>(
    v: &VectorField<T>,
    b_hat: &VectorField<T>,
    kernel: &SpectralKernel<T>,
    cfg: &SolverConfig,
) -> Result<VectorField<T>> {
    v.dims().require_same(b_hat.dims())?;
    v.dims().require_same(kernel.dims())?;
    let solver = SpectralSolve::new(kernel, cfg);
    let mut out = vec![[T::zero(); 3]; v.dims().len()];
    solver.apply(&mut out, v.data(), b_hat.data());
    Ok(VectorField::from_parts_unchecked(v.dims(), v.spacing(), out))
}

struct SpectralSolve<T: Real> {
    fft: Fft3<T>,
    /// `θ / (λ F(Δⁿ) + θ) / (MNH)`, inverse-transform normalisation folded in.
    gain: Vec<T>,
}

impl<T: Real> SpectralSolve<T> {
    fn new(kernel: &SpectralKernel<T>, cfg: &SolverConfig) -> Self {
        let len = kernel.dims().len() as f64;
        let gain = kernel
            .values()
            .iter()
            .map(|k| T::of(cfg.theta / (cfg.lambda * k.wide() + cfg.theta) / len))
            .collect();
        SpectralSolve {
            fft: Fft3::new(kernel.dims()),
            gain,
        }
    }

    fn apply(&self, out: &mut [[T; 3]], v: &[[T; 3]], b_hat: &[[T; 3]]) {
        for c in 0..3 {
            let mut buf = Fft3::to_complex(v.iter().zip(b_hat).map(|(a, b)| a[c] + b[c]));
            self.fft.forward(&mut buf);
            buf.par_iter_mut()
                .zip(self.gain.par_iter())
                .for_each(|(z, g)| *z = *z * *g);
            self.fft.inverse(&mut buf);
            out.par_iter_mut()
                .zip(buf.par_iter())
                .for_each(|(o, z)| o[c] = z.re);
        }
    }
}

/// Linearised residual `ρ(v)` summed into the data term `(1/s)‖ρ‖^s`.
fn data_energy<T: Real>(resid: &[T], grad: &[[T; 3]], v: &[[T; 3]], term: DataTerm) -> f64 {
    let per_voxel = resid.iter().zip(grad).zip(v).map(|((r, g), v)| {
        (0..3).map(|c| g[c].wide() * v[c].wide()).sum::<f64>() + r.wide()
    });
    match term {
        DataTerm::L1 => per_voxel.map(f64::abs).sum(),
        DataTerm::L2 => 0.5 * per_voxel.map(|r| r * r).sum::<f64>(),
    }
}

/// Value of `(1/s)‖ρ(v)‖^s + λ · ½ vᵀKⁿv` for a candidate velocity.
pub fn objective<T: Real>(
    i0: &ScalarVolume<T>,
    i1w: &ScalarVolume<T>,
    grad: &VectorField<T>,
    v: &VectorField<T>,
    cfg: &SolverConfig,
) -> Result<f64> {
    check_fields(i0, i1w, grad, v, v)?;
    let kernel = laplacian_symbol::<T>(cfg.order, v.dims())?;
    let fft = Fft3::new(v.dims());
    let resid = residual(i0, i1w);
    Ok(data_energy(&resid, grad.data(), v.data(), cfg.data_term)
        + cfg.lambda * energy_with(v, &kernel, &fft))
}

/// Reusable solver for a fixed grid and configuration: kernel, gains and FFT
/// plans are built once.
pub struct VelocitySolver<T: Real> {
    cfg: SolverConfig,
    dims: Dims,
    kernel: SpectralKernel<T>,
    spectral: SpectralSolve<T>,
}

impl<T: Real> VelocitySolver<T> {
    pub fn new(dims: Dims, cfg: SolverConfig) -> Result<Self> {
        cfg.validate()?;
        let kernel = laplacian_symbol(cfg.order, dims)?;
        let spectral = SpectralSolve::new(&kernel, &cfg);
        Ok(VelocitySolver {
            cfg,
            dims,
            kernel,
            spectral,
        })
    }

    pub fn config(&self) -> &SolverConfig {
        &self.cfg
    }

    /// Solve with `J = ∇I₁ʷ`.
    pub fn solve(
        &self,
        i0: &ScalarVolume<T>,
        i1w: &ScalarVolume<T>,
    ) -> Result<(VectorField<T>, SolverDiagnostics)> {
        let grad = image_gradient(i1w)?;
        self.solve_with_gradient(i0, i1w, &grad)
    }

    /// Solve with a caller-supplied image gradient.
    pub fn solve_with_gradient(
        &self,
        i0: &ScalarVolume<T>,
        i1w: &ScalarVolume<T>,
        grad: &VectorField<T>,
    ) -> Result<(VectorField<T>, SolverDiagnostics)> {
        self.dims.require_same(i0.dims())?;
        let mut state = SolverState::new(self.dims, i0.spacing());
        check_fields(i0, i1w, grad, &state.w_hat, &state.b_hat)?;
        let resid = residual(i0, i1w);
        let fft = &self.spectral.fft;
        let scale = 3.0 * self.dims.len() as f64;
        let mut diag = SolverDiagnostics::default();

        while state.k < self.cfg.max_iters {
            let v_old = std::mem::replace(&mut state.v, VectorField::zeros(self.dims, i0.spacing()));
            v_step_into(
                state.v.data_mut(),
                &resid,
                grad.data(),
                state.w_hat.data(),
                state.b_hat.data(),
                &self.cfg,
            );

            std::mem::swap(&mut state.w_prev, &mut state.w);
            self.spectral
                .apply(state.w.data_mut(), state.v.data(), state.b_hat.data());

            std::mem::swap(&mut state.b_prev, &mut state.b);
            state
                .b
                .data_mut()
                .par_iter_mut()
                .zip(state.b_hat.data().par_iter())
                .zip(state.v.data().par_iter().zip(state.w.data().par_iter()))
                .for_each(|((b, bh), (v, w))| {
                    for c in 0..3 {
                        b[c] = bh[c] + v[c] - w[c];
                    }
                });

            let alpha_next = next_alpha(state.alpha);
            let momentum = if self.cfg.accelerated {
                T::of((state.alpha - 1.0) / alpha_next)
            } else {
                T::zero()
            };
            extrapolate(state.w_hat.data_mut(), state.w.data(), state.w_prev.data(), momentum);
            extrapolate(state.b_hat.data_mut(), state.b.data(), state.b_prev.data(), momentum);
            state.alpha = alpha_next;
            state.k += 1;

            let change = state.v.l1_distance(&v_old)? / scale;
            diag.change.push(change);
            diag.final_change = change;
            diag.constraint_residual.push(
                state
                    .v
                    .data()
                    .iter()
                    .zip(state.w.data())
                    .flat_map(|(a, b)| (0..3).map(move |c| (a[c].wide() - b[c].wide()).powi(2)))
                    .sum::<f64>()
                    .sqrt(),
            );
            if self.cfg.track_objective {
                let obj = data_energy(&resid, grad.data(), state.v.data(), self.cfg.data_term)
                    + self.cfg.lambda * energy_with(&state.v, &self.kernel, fft);
                state.objective_log.push(obj);
            }
            if !state.v.is_finite() {
                return Err(RegError::NonFinite("velocity iterate"));
            }
            if change <= self.cfg.tol {
                diag.converged = true;
                break;
            }
        }
        diag.iterations = state.k;
        diag.objective = state.objective_log;
        Ok((state.v, diag))
    }
}

fn extrapolate<T: Real>(hat: &mut [[T; 3]], cur: &[[T; 3]], prev: &[[T; 3]], momentum: T) {
    hat.par_iter_mut()
        .zip(cur.par_iter().zip(prev.par_iter()))
        .for_each(|(h, (c, p))| {
            for i in 0..3 {
                h[i] = c[i] + momentum * (c[i] - p[i]);
            }
        });
}

/// One-shot solve of the velocity between target `i0` and warped source `i1w`.
pub fn solve_velocity<T: Real>(
    i0: &ScalarVolume<T>,
    i1w: &ScalarVolume<T>,
    cfg: &SolverConfig,
) -> Result<(VectorField<T>, SolverDiagnostics)> {
    i0.dims().require_same(i1w.dims())?;
    VelocitySolver::new(i0.dims(), cfg.clone())?.solve(i0, i1w)
}
