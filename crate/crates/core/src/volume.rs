//! Volume containers and the voxel-level operations the registration is built on:
//! trilinear sampling, warping, gradients, composition and Jacobian determinants.
//!
//! All coordinates are in voxel units. Layout is x-fastest: voxel `(i, j, k)`
//! lives at `i + nx * (j + ny * k)`.

use std::fmt;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};
use crate::scalar::Real;

/// Grid extent `(nx, ny, nz)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Dims {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
}

impl Dims {
    pub const fn new(nx: usize, ny: usize, nz: usize) -> Self {
        Dims { nx, ny, nz }
    }

    pub const fn cube(n: usize) -> Self {
        Dims::new(n, n, n)
    }

    pub const fn len(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub const fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub const fn as_array(&self) -> [usize; 3] {
        [self.nx, self.ny, self.nz]
    }

    pub fn from_array(a: [usize; 3]) -> Self {
        Dims::new(a[0], a[1], a[2])
    }

    pub fn min_axis(&self) -> usize {
        self.nx.min(self.ny).min(self.nz)
    }

    #[inline]
    pub const fn index(&self, i: usize, j: usize, k: usize) -> usize {
        i + self.nx * (j + self.ny * k)
    }

    #[inline]
    pub const fn coords(&self, idx: usize) -> (usize, usize, usize) {
        let i = idx % self.nx;
        let rest = idx / self.nx;
        (i, rest % self.ny, rest / self.ny)
    }

    /// Voxels per z-slab, the unit of parallel work.
    #[inline]
    pub const fn slab(&self) -> usize {
        self.nx * self.ny
    }

    pub(crate) fn require_min(&self, min: usize) -> Result<()> {
        if self.min_axis() < min {
            Err(RegError::TooSmall { dims: *self, min })
        } else {
            Ok(())
        }
    }

    pub(crate) fn require_same(&self, other: Dims) -> Result<()> {
        if *self != other {
            Err(RegError::DimensionMismatch {
                left: *self,
                right: other,
            })
        } else {
            Ok(())
        }
    }
}

impl fmt::Display for Dims {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.nx, self.ny, self.nz)
    }
}

/// Physical voxel size in mm along x, y, z.
pub type Spacing = [f64; 3];

fn check_spacing(spacing: Spacing) -> Result<()> {
    if spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
        Ok(())
    } else {
        Err(RegError::invalid(
            "spacing",
            format!("{spacing:?} must be positive and finite"),
        ))
    }
}

/// 3D scalar field, e.g. an intensity image.
#[derive(Clone, Debug, PartialEq)]
pub struct ScalarVolume<T> {
    dims: Dims,
    spacing: Spacing,
    data: Vec<T>,
}

impl<T: Real> ScalarVolume<T> {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<T>) -> Result<Self> {
        if data.len() != dims.len() || dims.is_empty() {
            return Err(RegError::BadLength {
                dims,
                expected: dims.len(),
                found: data.len(),
            });
        }
        check_spacing(spacing)?;
        if data.iter().any(|v| !v.is_finite()) {
            return Err(RegError::NonFinite("scalar volume data"));
        }
        Ok(ScalarVolume {
            dims,
            spacing,
            data,
        })
    }

    pub fn filled(dims: Dims, spacing: Spacing, value: T) -> Self {
        ScalarVolume {
            dims,
            spacing,
            data: vec![value; dims.len()],
        }
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        Self::filled(dims, spacing, T::zero())
    }

    /// Builds a volume by evaluating `f(i, j, k)` at every voxel.
    pub fn from_fn(dims: Dims, spacing: Spacing, f: impl Fn(usize, usize, usize) -> T + Sync) -> Self {
        let data = (0..dims.len())
            .into_par_iter()
            .map(|idx| {
                let (i, j, k) = dims.coords(idx);
                f(i, j, k)
            })
            .collect();
        ScalarVolume {
            dims,
            spacing,
            data,
        }
    }

    pub(crate) fn from_parts_unchecked(dims: Dims, spacing: Spacing, data: Vec<T>) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        ScalarVolume {
            dims,
            spacing,
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> T {
        self.data[self.dims.index(i, j, k)]
    }

    pub fn with_spacing(mut self, spacing: Spacing) -> Result<Self> {
        check_spacing(spacing)?;
        self.spacing = spacing;
        Ok(self)
    }

    pub fn map(&self, f: impl Fn(T) -> T + Sync + Send) -> Self {
        ScalarVolume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.par_iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn cast<U: Real>(&self) -> ScalarVolume<U> {
        ScalarVolume {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.iter().map(|v| U::of(v.wide())).collect(),
        }
    }

    /// `(min, max)` of the data.
    pub fn range(&self) -> (T, T) {
        self.data
            .iter()
            .fold((T::infinity(), T::neg_infinity()), |(lo, hi), &v| {
                (lo.min(v), hi.max(v))
            })
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Mean absolute difference to `other`, accumulated in `f64`.
    pub fn mean_abs_diff(&self, other: &Self) -> Result<f64> {
        self.dims.require_same(other.dims)?;
        let sum: f64 = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.wide() - b.wide()).abs())
            .sum();
        Ok(sum / self.data.len() as f64)
    }
}

/// 3D field of 3-vectors (velocities, dual variables, image gradients).
#[derive(Clone, Debug, PartialEq)]
pub struct VectorField<T> {
    dims: Dims,
    spacing: Spacing,
    data: Vec<[T; 3]>,
}

impl<T: Real> VectorField<T> {
    pub fn new(dims: Dims, spacing: Spacing, data: Vec<[T; 3]>) -> Result<Self> {
        if data.len() != dims.len() || dims.is_empty() {
            return Err(RegError::BadLength {
                dims,
                expected: dims.len(),
                found: data.len(),
            });
        }
        check_spacing(spacing)?;
        if data.iter().flatten().any(|v| !v.is_finite()) {
            return Err(RegError::NonFinite("vector field data"));
        }
        Ok(VectorField {
            dims,
            spacing,
            data,
        })
    }

    pub fn zeros(dims: Dims, spacing: Spacing) -> Self {
        Self::uniform(dims, spacing, [T::zero(); 3])
    }

    pub fn uniform(dims: Dims, spacing: Spacing, value: [T; 3]) -> Self {
        VectorField {
            dims,
            spacing,
            data: vec![value; dims.len()],
        }
    }

    pub fn from_fn(
        dims: Dims,
        spacing: Spacing,
        f: impl Fn(usize, usize, usize) -> [T; 3] + Sync,
    ) -> Self {
        let data = (0..dims.len())
            .into_par_iter()
            .map(|idx| {
                let (i, j, k) = dims.coords(idx);
                f(i, j, k)
            })
            .collect();
        VectorField {
            dims,
            spacing,
            data,
        }
    }

    pub(crate) fn from_parts_unchecked(dims: Dims, spacing: Spacing, data: Vec<[T; 3]>) -> Self {
        debug_assert_eq!(data.len(), dims.len());
        VectorField {
            dims,
            spacing,
            data,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn data(&self) -> &[[T; 3]] {
        &self.data
    }

    pub(crate) fn data_mut(&mut self) -> &mut [[T; 3]] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<[T; 3]> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> [T; 3] {
        self.data[self.dims.index(i, j, k)]
    }

    /// One Cartesian component as a scalar array.
    pub fn component(&self, c: usize) -> Vec<T> {
        self.data.iter().map(|v| v[c]).collect()
    }

    pub fn scale(&self, s: T) -> Self {
        self.map(|v| [v[0] * s, v[1] * s, v[2] * s])
    }

    pub fn map(&self, f: impl Fn([T; 3]) -> [T; 3] + Sync + Send) -> Self {
        VectorField {
            dims: self.dims,
            spacing: self.spacing,
            data: self.data.par_iter().map(|&v| f(v)).collect(),
        }
    }

    /// Element-wise `f(self, other)`.
    pub fn zip_map(
        &self,
        other: &Self,
        f: impl Fn([T; 3], [T; 3]) -> [T; 3] + Sync + Send,
    ) -> Result<Self> {
        self.dims.require_same(other.dims)?;
        Ok(VectorField {
            dims: self.dims,
            spacing: self.spacing,
            data: self
                .data
                .par_iter()
                .zip(other.data.par_iter())
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn cast<U: Real>(&self) -> VectorField<U> {
        VectorField {
            dims: self.dims,
            spacing: self.spacing,
            data: self
                .data
                .iter()
                .map(|v| [U::of(v[0].wide()), U::of(v[1].wide()), U::of(v[2].wide())])
                .collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().flatten().all(|v| v.is_finite())
    }

    /// Sum of absolute component differences, accumulated in `f64`.
    pub fn l1_distance(&self, other: &Self) -> Result<f64> {
        self.dims.require_same(other.dims)?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| {
                (0..3)
                    .map(|c| (a[c].wide() - b[c].wide()).abs())
                    .sum::<f64>()
            })
            .sum())
    }

    /// Euclidean norm over all components.
    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .flatten()
            .map(|v| v.wide() * v.wide())
            .sum::<f64>()
            .sqrt()
    }

    /// Mean Euclidean length of the per-voxel vectors.
    pub fn mean_magnitude(&self) -> f64 {
        self.data
            .iter()
            .map(|v| norm3(v.map(|c| c.wide())))
            .sum::<f64>()
            / self.data.len() as f64
    }
}

#[inline]
pub(crate) fn norm3(v: [f64; 3]) -> f64 {
    (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt()
}

/// Deformation `phi(x) = x + u(x)` stored as the displacement `u`, mapping
/// target voxel coordinates to source voxel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformationField<T> {
    disp: VectorField<T>,
}

impl<T: Real> DeformationField<T> {
    pub fn identity(dims: Dims, spacing: Spacing) -> Self {
        DeformationField {
            disp: VectorField::zeros(dims, spacing),
        }
    }

    /// A single step `Id + v`.
    pub fn from_displacement(disp: VectorField<T>) -> Self {
        DeformationField { disp }
    }

    pub fn dims(&self) -> Dims {
        self.disp.dims()
    }

    pub fn spacing(&self) -> Spacing {
        self.disp.spacing()
    }

    pub fn displacement(&self) -> &VectorField<T> {
        &self.disp
    }

    pub fn into_displacement(self) -> VectorField<T> {
        self.disp
    }

    pub fn is_identity(&self) -> bool {
        self.disp.data().iter().flatten().all(|v| *v == T::zero())
    }

    pub fn cast<U: Real>(&self) -> DeformationField<U> {
        DeformationField {
            disp: self.disp.cast(),
        }
    }
}

/// Lower corner index and fractional weight along one axis, with the sample
/// point clamped into `[0, n - 1]`.
#[inline]
fn axis_cell<T: Real>(p: T, n: usize) -> (usize, usize, T) {
    if n == 1 {
        return (0, 0, T::zero());
    }
    let max = T::of((n - 1) as f64);
    let p = if p.is_nan() { T::zero() } else { p.max(T::zero()).min(max) };
    let lo = p.floor().to_usize().unwrap_or(0).min(n - 2);
    let frac = p - T::of(lo as f64);
    (lo, lo + 1, frac)
}

#[inline]
fn lerp<T: Real>(a: T, b: T, f: T) -> T {
    a * (T::one() - f) + b * f
}

/// Trilinear interpolation at voxel coordinate `p`, clamped to the volume edge.
pub fn trilinear_sample<T: Real>(vol: &ScalarVolume<T>, p: [T; 3]) -> T {
    sample_scalar(vol.dims, &vol.data, p)
}

#[inline]
pub(crate) fn sample_scalar<T: Real>(dims: Dims, data: &[T], p: [T; 3]) -> T {
    let (x0, x1, fx) = axis_cell(p[0], dims.nx);
    let (y0, y1, fy) = axis_cell(p[1], dims.ny);
    let (z0, z1, fz) = axis_cell(p[2], dims.nz);
    let at = |i, j, k| data[dims.index(i, j, k)];
    let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
    let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
    let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
    let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
    lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz)
}

/// Trilinear interpolation of all three components at once.
pub fn sample_vector<T: Real>(field: &VectorField<T>, p: [T; 3]) -> [T; 3] {
    let dims = field.dims;
    let data = &field.data;
    let (x0, x1, fx) = axis_cell(p[0], dims.nx);
    let (y0, y1, fy) = axis_cell(p[1], dims.ny);
    let (z0, z1, fz) = axis_cell(p[2], dims.nz);
    let mut out = [T::zero(); 3];
    for (c, o) in out.iter_mut().enumerate() {
        let at = |i, j, k| data[dims.index(i, j, k)][c];
        let c00 = lerp(at(x0, y0, z0), at(x1, y0, z0), fx);
        let c10 = lerp(at(x0, y1, z0), at(x1, y1, z0), fx);
        let c01 = lerp(at(x0, y0, z1), at(x1, y0, z1), fx);
        let c11 = lerp(at(x0, y1, z1), at(x1, y1, z1), fx);
        *o = lerp(lerp(c00, c10, fy), lerp(c01, c11, fy), fz);
    }
    out
}

#[inline]
fn voxel_coord<T: Real>(i: usize, j: usize, k: usize) -> [T; 3] {
    [T::of(i as f64), T::of(j as f64), T::of(k as f64)]
}

#[inline]
fn add3<T: Real>(a: [T; 3], b: [T; 3]) -> [T; 3] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

/// `out(x) = img(x + u(x))`.
pub fn warp_image<T: Real>(img: &ScalarVolume<T>, phi: &DeformationField<T>) -> Result<ScalarVolume<T>> {
    let dims = img.dims;
    dims.require_same(phi.dims())?;
    let disp = phi.disp.data();
    let mut out = vec![T::zero(); dims.len()];
    out.par_chunks_mut(dims.slab())
        .enumerate()
        .for_each(|(k, slab)| {
            for j in 0..dims.ny {
                for i in 0..dims.nx {
                    let local = i + dims.nx * j;
                    let u = disp[local + k * dims.slab()];
                    slab[local] = sample_scalar(dims, &img.data, add3(voxel_coord(i, j, k), u));
                }
            }
        });
    Ok(ScalarVolume::from_parts_unchecked(dims, img.spacing, out))
}

/// Finite-difference derivative of `f` along `axis` at `(i, j, k)`:
/// central inside, one-sided on the two faces.
#[inline]
fn axis_diff<T: Real>(dims: Dims, f: impl Fn(usize) -> T, pos: usize, axis: usize) -> T {
    let n = dims.as_array()[axis];
    if pos == 0 {
        f(1) - f(0)
    } else if pos == n - 1 {
        f(n - 1) - f(n - 2)
    } else {
        (f(pos + 1) - f(pos - 1)) * T::of(0.5)
    }
}

/// Spatial gradient in intensity per voxel.
pub fn image_gradient<T: Real>(img: &ScalarVolume<T>) -> Result<VectorField<T>> {
    let dims = img.dims;
    dims.require_min(2)?;
    let d = &img.data;
    let mut out = vec![[T::zero(); 3]; dims.len()];
    out.par_chunks_mut(dims.slab())
        .enumerate()
        .for_each(|(k, slab)| {
            for j in 0..dims.ny {
                for i in 0..dims.nx {
                    let gx = axis_diff(dims, |p| d[dims.index(p, j, k)], i, 0);
                    let gy = axis_diff(dims, |p| d[dims.index(i, p, k)], j, 1);
                    let gz = axis_diff(dims, |p| d[dims.index(i, j, p)], k, 2);
                    slab[i + dims.nx * j] = [gx, gy, gz];
                }
            }
        });
    Ok(VectorField::from_parts_unchecked(dims, img.spacing, out))
}

/// `phi' = phi ∘ (Id + v)`, i.e. `u'(x) = v(x) + u(x + v(x))`.
pub fn compose_deformation<T: Real>(
    phi: &DeformationField<T>,
    v: &VectorField<T>,
) -> Result<DeformationField<T>> {
    let dims = phi.dims();
    dims.require_same(v.dims)?;
    let vel = v.data();
    let mut out = vec![[T::zero(); 3]; dims.len()];
    out.par_chunks_mut(dims.slab())
        .enumerate()
        .for_each(|(k, slab)| {
            for j in 0..dims.ny {
                for i in 0..dims.nx {
                    let local = i + dims.nx * j;
                    let step = vel[local + k * dims.slab()];
                    let u = sample_vector(&phi.disp, add3(voxel_coord(i, j, k), step));
                    slab[local] = add3(step, u);
                }
            }
        });
    Ok(DeformationField::from_displacement(
        VectorField::from_parts_unchecked(dims, phi.spacing(), out),
    ))
}

/// Per-voxel `det(∂phi/∂x)`, central differences inside, one-sided on faces.
pub fn jacobian_determinant<T: Real>(phi: &DeformationField<T>) -> Result<ScalarVolume<T>> {
    let dims = phi.dims();
    dims.require_min(3)?;
    let u = phi.disp.data();
    let mut out = vec![T::zero(); dims.len()];
    out.par_chunks_mut(dims.slab())
        .enumerate()
        .for_each(|(k, slab)| {
            for j in 0..dims.ny {
                for i in 0..dims.nx {
                    // m[c][a] = ∂phi_c / ∂x_a
                    let mut m = [[0.0f64; 3]; 3];
                    for (c, row) in m.iter_mut().enumerate() {
                        row[0] = axis_diff(dims, |p| u[dims.index(p, j, k)][c].wide(), i, 0);
                        row[1] = axis_diff(dims, |p| u[dims.index(i, p, k)][c].wide(), j, 1);
                        row[2] = axis_diff(dims, |p| u[dims.index(i, j, p)][c].wide(), k, 2);
                        row[c] += 1.0;
                    }
                    slab[i + dims.nx * j] = T::of(det3(&m));
                }
            }
        });
    Ok(ScalarVolume::from_parts_unchecked(dims, phi.spacing(), out))
}

#[inline]
pub(crate) fn det3(m: &[[f64; 3]; 3]) -> f64 {
    m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
}

/// Separable `[1, 2, 1] / 4` smoothing with edge replication.
pub fn binomial_smooth<T: Real>(img: &ScalarVolume<T>) -> ScalarVolume<T> {
    let dims = img.dims;
    let mut cur = img.data.clone();
    let quarter = T::of(0.25);
    let half = T::of(0.5);
    for axis in 0..3 {
        let n = dims.as_array()[axis];
        if n < 2 {
            continue;
        }
        let src = cur.clone();
        cur.par_chunks_mut(dims.slab())
            .enumerate()
            .for_each(|(k, slab)| {
                for j in 0..dims.ny {
                    for i in 0..dims.nx {
                        let pos = [i, j, k][axis];
                        let at = |p: usize| {
                            let mut c = [i, j, k];
                            c[axis] = p;
                            src[dims.index(c[0], c[1], c[2])]
                        };
                        let lo = at(pos.saturating_sub(1));
                        let hi = at((pos + 1).min(n - 1));
                        slab[i + dims.nx * j] = quarter * lo + half * at(pos) + quarter * hi;
                    }
                }
            });
    }
    ScalarVolume::from_parts_unchecked(dims, img.spacing, cur)
}
