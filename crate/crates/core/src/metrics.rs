//! Overlap, surface distance and topology measures for evaluating a registration.

use std::collections::BTreeSet;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};
use crate::scalar::Real;
use crate::volume::{jacobian_determinant, DeformationField, Dims, Spacing};

/// Integer label map, 0 is background.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelVolume {
    dims: Dims,
    spacing: Spacing,
    labels: Vec<u16>,
}

impl LabelVolume {
    pub fn new(dims: Dims, spacing: Spacing, labels: Vec<u16>) -> Result<Self> {
        if labels.len() != dims.len() || dims.is_empty() {
            return Err(RegError::BadLength {
                dims,
                expected: dims.len(),
                found: labels.len(),
            });
        }
        if !spacing.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(RegError::invalid("spacing", format!("{spacing:?} must be positive")));
        }
        Ok(LabelVolume {
            dims,
            spacing,
            labels,
        })
    }

    pub fn from_fn(dims: Dims, spacing: Spacing, f: impl Fn(usize, usize, usize) -> u16) -> Self {
        let labels = (0..dims.len())
            .map(|idx| {
                let (i, j, k) = dims.coords(idx);
                f(i, j, k)
            })
            .collect();
        LabelVolume {
            dims,
            spacing,
            labels,
        }
    }

    pub fn dims(&self) -> Dims {
        self.dims
    }

    pub fn spacing(&self) -> Spacing {
        self.spacing
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize, k: usize) -> u16 {
        self.labels[self.dims.index(i, j, k)]
    }

    /// Distinct labels present, background included.
    pub fn label_set(&self) -> BTreeSet<u16> {
        self.labels.iter().copied().collect()
    }

    pub fn count(&self, label: u16) -> usize {
        self.labels.iter().filter(|l| **l == label).count()
    }
}

/// `2|A ∩ B| / (|A| + |B|)` for the voxels carrying `label`; 1 when both are empty.
pub fn dice(a: &LabelVolume, b: &LabelVolume, label: u16) -> Result<f64> {
    a.dims.require_same(b.dims)?;
    let (mut na, mut nb, mut both) = (0usize, 0usize, 0usize);
    for (x, y) in a.labels.iter().zip(&b.labels) {
        let (ia, ib) = (*x == label, *y == label);
        na += ia as usize;
        nb += ib as usize;
        both += (ia && ib) as usize;
    }
    if na + nb == 0 {
        return Ok(1.0);
    }
    Ok(2.0 * both as f64 / (na + nb) as f64)
}

/// In-plane pixel coordinates of `label` in slice `k`.
fn slice_points(v: &LabelVolume, label: u16, k: usize) -> Vec<(usize, usize)> {
    let mut pts = Vec::new();
    for j in 0..v.dims.ny {
        for i in 0..v.dims.nx {
            if v.get(i, j, k) == label {
                pts.push((i, j));
            }
        }
    }
    pts
}

/// Pixels of the mask with a 4-neighbour outside it (or on the image edge).
/// The nearest mask pixel to any point outside the mask is always one of these.
fn slice_boundary(v: &LabelVolume, label: u16, k: usize, pts: &[(usize, usize)]) -> Vec<(usize, usize)> {
    let Dims { nx, ny, .. } = v.dims;
    pts.iter()
        .copied()
        .filter(|&(i, j)| {
            i == 0
                || j == 0
                || i + 1 == nx
                || j + 1 == ny
                || v.get(i - 1, j, k) != label
                || v.get(i + 1, j, k) != label
                || v.get(i, j - 1, k) != label
                || v.get(i, j + 1, k) != label
        })
        .collect()
}

/// `max_{a ∈ A} min_{b ∈ B} ‖a − b‖` in mm.
fn directed(
    from: &[(usize, usize)],
    into: &LabelVolume,
    label: u16,
    k: usize,
    into_boundary: &[(usize, usize)],
    sx: f64,
    sy: f64,
) -> f64 {
    from.par_iter()
        .map(|&(i, j)| {
            if into.get(i, j, k) == label {
                return 0.0;
            }
            into_boundary
                .iter()
                .map(|&(bi, bj)| {
                    let dx = (i as f64 - bi as f64) * sx;
                    let dy = (j as f64 - bj as f64) * sy;
                    dx * dx + dy * dy
                })
                .fold(f64::INFINITY, f64::min)
        })
        .reduce(|| 0.0, f64::max)
        .sqrt()
}

/// Symmetric Hausdorff distance per z-slice, averaged over slices where
/// both masks are non-empty.
pub fn hausdorff_slice_avg(a: &LabelVolume, b: &LabelVolume, label: u16) -> Result<f64> {
    a.dims.require_same(b.dims)?;
    let [sx, sy, _] = a.spacing;
    let mut total = 0.0;
    let mut slices = 0usize;
    for k in 0..a.dims.nz {
        let pa = slice_points(a, label, k);
        let pb = slice_points(b, label, k);
        if pa.is_empty() || pb.is_empty() {
            continue;
        }
        let ba = slice_boundary(a, label, k, &pa);
        let bb = slice_boundary(b, label, k, &pb);
        let hab = directed(&pa, b, label, k, &bb, sx, sy);
        let hba = directed(&pb, a, label, k, &ba, sx, sy);
        total += hab.max(hba);
        slices += 1;
    }
    if slices == 0 {
        return Err(RegError::NoCommonSlice(label));
    }
    Ok(total / slices as f64)
}

/// Nearest-neighbour label lookup at `x + u(x)`, clamped to the volume.
pub fn warp_labels<T: Real>(lbl: &LabelVolume, phi: &DeformationField<T>) -> Result<LabelVolume> {
    let dims = lbl.dims;
    dims.require_same(phi.dims())?;
    let near = |x: f64, n: usize| -> usize {
        if x.is_nan() {
            return 0;
        }
        x.round().clamp(0.0, (n - 1) as f64) as usize
    };
    let disp = phi.displacement().data();
    let labels = (0..dims.len())
        .into_par_iter()
        .map(|idx| {
            let (i, j, k) = dims.coords(idx);
            let u = disp[idx];
            let x = near(i as f64 + u[0].wide(), dims.nx);
            let y = near(j as f64 + u[1].wide(), dims.ny);
            let z = near(k as f64 + u[2].wide(), dims.nz);
            lbl.labels[dims.index(x, y, z)]
        })
        .collect();
    Ok(LabelVolume {
        dims,
        spacing: lbl.spacing,
        labels,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct JacobianStats {
    /// Percentage of interior voxels with `det ≤ 0`.
    pub pct_nonpositive: f64,
    /// Smallest interior determinant.
    pub min_det: f64,
}

/// Folding statistics over voxels where the central stencil applies.
pub fn jacobian_stats<T: Real>(phi: &DeformationField<T>) -> Result<JacobianStats> {
    let det = jacobian_determinant(phi)?;
    let dims = det.dims();
    let mut nonpos = 0usize;
    let mut total = 0usize;
    let mut min_det = f64::INFINITY;
    for k in 1..dims.nz - 1 {
        for j in 1..dims.ny - 1 {
            for i in 1..dims.nx - 1 {
                let d = det.get(i, j, k).wide();
                total += 1;
                if d <= 0.0 {
                    nonpos += 1;
                }
                min_det = min_det.min(d);
            }
        }
    }
    Ok(JacobianStats {
        pct_nonpositive: 100.0 * nonpos as f64 / total as f64,
        min_det,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::volume::VectorField;

    const SP: Spacing = [1.0; 3];

    fn mask(dims: Dims, pts: &[(usize, usize, usize)]) -> LabelVolume {
        LabelVolume::from_fn(dims, SP, |i, j, k| pts.contains(&(i, j, k)) as u16)
    }

    #[test]
    fn dice_cases() {
        let d = Dims::cube(4);
        let a = mask(d, &[(0, 0, 0), (1, 0, 0)]);
        let b = mask(d, &[(1, 0, 0), (2, 0, 0)]);
        let c = mask(d, &[(3, 3, 3)]);
        assert_eq!(dice(&a, &a, 1).unwrap(), 1.0);
        assert_eq!(dice(&a, &c, 1).unwrap(), 0.0);
        assert_eq!(dice(&a, &b, 1).unwrap(), 0.5);
        assert_eq!(dice(&a, &b, 7).unwrap(), 1.0);
        assert!(dice(&a, &mask(Dims::cube(3), &[]), 1).is_err());
    }

    #[test]
    fn hausdorff_cases() {
        let d = Dims::new(8, 8, 2);
        let a = LabelVolume::from_fn(d, [1.2, 1.2, 2.0], |i, _, k| (i == 1 && k == 0) as u16 * 2);
        let b = LabelVolume::from_fn(d, [1.2, 1.2, 2.0], |i, j, k| (i == 4 && j == 0 && k == 0) as u16 * 2);
        assert_eq!(hausdorff_slice_avg(&a, &a, 2).unwrap(), 0.0);
        let single = LabelVolume::from_fn(d, [1.2, 1.2, 2.0], |i, j, k| (i == 1 && j == 0 && k == 0) as u16 * 2);
        assert!((hausdorff_slice_avg(&single, &b, 2).unwrap() - 3.6).abs() < 1e-12);
        assert!(matches!(
            hausdorff_slice_avg(&a, &b, 5),
            Err(RegError::NoCommonSlice(5))
        ));
    }

    #[test]
    fn label_warp_identity_and_shift() {
        let d = Dims::new(6, 5, 4);
        let l = LabelVolume::from_fn(d, SP, |i, j, k| ((i + 2 * j + k) % 4) as u16);
        let id = warp_labels(&l, &DeformationField::<f32>::identity(d, SP)).unwrap();
        assert_eq!(id, l);
        let shift = DeformationField::from_displacement(VectorField::<f32>::uniform(d, SP, [2.0, 0.0, -1.0]));
        let w = warp_labels(&l, &shift).unwrap();
        for k in 0..4usize {
            for j in 0..5 {
                for i in 0..6 {
                    let si = (i + 2).min(5);
                    let sk = k.saturating_sub(1);
                    assert_eq!(w.get(i, j, k), l.get(si, j, sk));
                }
            }
        }
    }

    #[test]
    fn jacobian_stat_cases() {
        let d = Dims::cube(6);
        let s = jacobian_stats(&DeformationField::<f64>::identity(d, SP)).unwrap();
        assert_eq!((s.pct_nonpositive, s.min_det), (0.0, 1.0));
        let t = DeformationField::from_displacement(VectorField::<f64>::uniform(d, SP, [0.3, 1.0, -2.0]));
        let s = jacobian_stats(&t).unwrap();
        assert_eq!((s.pct_nonpositive, s.min_det), (0.0, 1.0));
        let fold = DeformationField::from_displacement(VectorField::<f64>::from_fn(d, SP, |i, _, _| {
            [-2.0 * i as f64, 0.0, 0.0]
        }));
        let s = jacobian_stats(&fold).unwrap();
        assert_eq!(s.pct_nonpositive, 100.0);
        assert_eq!(s.min_det, -1.0);
    }
}
