//! Separable 3D DFT over x-fastest arrays, built from rustfft line transforms.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};

use crate::scalar::Real;
use crate::volume::Dims;

/// Cached forward/inverse plans for one grid size. Unnormalised in both
/// directions; callers divide by `dims.len()` after the inverse.
pub struct Fft3<T: Real> {
    dims: Dims,
    forward: [Arc<dyn Fft<T>>; 3],
    inverse: [Arc<dyn Fft<T>>; 3],
}

impl<T: Real> Fft3<T> {
    pub fn new(dims: Dims) -> Self {
        let mut planner = FftPlanner::new();
        let n = dims.as_array();
        let forward = n.map(|len| planner.plan_fft_forward(len));
        let inverse = n.map(|len| planner.plan_fft_inverse(len));
        Fft3 {
            dims,
            forward,
            inverse,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn forward(&self, buf: &mut [Complex<T>]) {
        self.run(buf, &self.forward);
    }

    pub fn inverse(&self, buf: &mut [Complex<T>]) {
        self.run(buf, &self.inverse);
    }

    fn run(&self, buf: &mut [Complex<T>], plans: &[Arc<dyn Fft<T>>; 3]) {
        let Dims { nx, ny, nz } = self.dims;
        assert_eq!(buf.len(), self.dims.len());
        let slab = nx * ny;

        // x lines are contiguous
        buf.par_chunks_mut(nx.max(1) * ny.max(1)).for_each(|s| {
            for line in s.chunks_mut(nx) {
                plans[0].process(line);
            }
        });

        // y lines stay inside one z slab
        if ny > 1 {
            buf.par_chunks_mut(slab).for_each(|s| {
                let mut line = vec![Complex::default(); ny];
                for i in 0..nx {
                    for j in 0..ny {
                        line[j] = s[i + nx * j];
                    }
                    plans[1].process(&mut line);
                    for j in 0..ny {
                        s[i + nx * j] = line[j];
                    }
                }
            });
        }

        // z lines: transpose so z is contiguous, transform, transpose back
        if nz > 1 {
            let mut t = vec![Complex::default(); buf.len()];
            t.par_chunks_mut(nz).enumerate().for_each(|(col, line)| {
                for (k, out) in line.iter_mut().enumerate() {
                    *out = buf[col + slab * k];
                }
                plans[2].process(line);
            });
            buf.par_chunks_mut(slab).enumerate().for_each(|(k, s)| {
                for (col, out) in s.iter_mut().enumerate() {
                    *out = t[k + nz * col];
                }
            });
        }
    }

    pub fn to_complex(data: impl Iterator<Item = T>) -> Vec<Complex<T>> {
        data.map(|re| Complex::new(re, T::zero())).collect()
    }
}
