//! n-th order smoothness regulariser: multinomial expansion of the n-th order
//! gradient and the Fourier symbol of the n-th power of the periodic discrete
//! Laplacian, `2^n (3 - cos(2πp/M) - cos(2πq/N) - cos(2πr/H))^n`.

use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};
use crate::fft::Fft3;
use crate::scalar::Real;
use crate::volume::{Dims, VectorField};

/// Highest supported regulariser order.
pub const MAX_ORDER: u32 = 6;

pub(crate) fn check_order(n: u32) -> Result<()> {
    if (1..=MAX_ORDER).contains(&n) {
        Ok(())
    } else {
        Err(RegError::invalid(
            "order",
            format!("{n} outside 1..={MAX_ORDER}"),
        ))
    }
}

/// One mixed partial `∂^n / ∂x^k1 ∂y^k2 ∂z^k3` with its multinomial weight.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MultinomialTerm {
    pub k: [u32; 3],
    pub coef: u64,
}

fn factorial(n: u32) -> u64 {
    (1..=n as u64).product()
}

/// All `(k1, k2, k3)` with `k1 + k2 + k3 = n`, in descending lexicographic
/// order of `k` (so `(n, 0, 0)` first), each with `n! / (k1! k2! k3!)`.
pub fn multinomial_terms(n: u32) -> Result<Vec<MultinomialTerm>> {
    check_order(n)?;
    let mut terms = Vec::with_capacity(((n + 1) * (n + 2) / 2) as usize);
    for k1 in (0..=n).rev() {
        for k2 in (0..=n - k1).rev() {
            let k3 = n - k1 - k2;
            let coef = factorial(n) / (factorial(k1) * factorial(k2) * factorial(k3));
            terms.push(MultinomialTerm {
                k: [k1, k2, k3],
                coef,
            });
        }
    }
    Ok(terms)
}

/// `F(Δ^n)` sampled on the DFT frequency grid of `dims`.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralKernel<T> {
    order: u32,
    dims: Dims,
    values: Vec<T>,
}

impl<T: Real> SpectralKernel<T> {
    pub fn order(&self) -> u32 {
        self.order
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn values(&self) -> &[T] {
        &self.values
    }

    #[inline]
    pub fn get(&self, p: usize, q: usize, r: usize) -> T {
        self.values[self.dims.index(p, q, r)]
    }
}

pub fn laplacian_symbol<T: Real>(n: u32, dims: Dims) -> Result<SpectralKernel<T>> {
    check_order(n)?;
    dims.require_min(2)?;
    let tau = std::f64::consts::TAU;
    let cos_axis = |len: usize| -> Vec<f64> {
        (0..len)
            .map(|p| (tau * p as f64 / len as f64).cos())
            .collect()
    };
    let (cx, cy, cz) = (cos_axis(dims.nx), cos_axis(dims.ny), cos_axis(dims.nz));
    let scale = 2f64.powi(n as i32);
    let values = (0..dims.len())
        .map(|idx| {
            let (p, q, r) = dims.coords(idx);
            let base = (3.0 - cx[p] - cy[q] - cz[r]).max(0.0);
            T::of(scale * base.powi(n as i32))
        })
        .collect();
    Ok(SpectralKernel {
        order: n,
        dims,
        values,
    })
}

/// Periodic discrete energy `½ Σ_c Σ_f F(Δ^n)(f) |ŵ_c(f)|² / (MNH)`, equal to
/// `½ Σ_c w_cᵀ Kⁿ w_c` with `K` the periodic 7-point negative Laplacian.
pub fn regulariser_energy<T: Real>(w: &VectorField<T>, n: u32) -> Result<f64> {
    let kernel = laplacian_symbol::<T>(n, w.dims())?;
    let fft = Fft3::new(w.dims());
    Ok(energy_with(w, &kernel, &fft))
}

pub(crate) fn energy_with<T: Real>(w: &VectorField<T>, kernel: &SpectralKernel<T>, fft: &Fft3<T>) -> f64 {
    let mut total = 0.0;
    for c in 0..3 {
        let mut buf = Fft3::to_complex(w.data().iter().map(|v| v[c]));
        fft.forward(&mut buf);
        total += buf
            .iter()
            .zip(kernel.values())
            .map(|(z, k)| k.wide() * z.norm_sqr().wide())
            .sum::<f64>();
    }
    0.5 * total / w.dims().len() as f64
}
