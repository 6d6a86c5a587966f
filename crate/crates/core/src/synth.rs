//! Deterministic synthetic registration pairs with known answers.
//!
//! Every case produces a target, a source, label maps for both and the true
//! deformation `phi` (target coordinates to source coordinates) such that
//! `warp_image(source, phi) ≈ target`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{RegError, Result};
use crate::metrics::{warp_labels, LabelVolume};
use crate::scalar::Real;
use crate::volume::{sample_scalar, DeformationField, Dims, ScalarVolume, Spacing, VectorField};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum SynthCase {
    /// Gaussian blob whose copy in the source is moved by `shift` voxels.
    Translate { shift: [f64; 3] },
    /// Several Gaussian blobs, source deformed by a seeded smooth random field.
    Blob { seed: u64 },
    /// Sphere in the target, axis-aligned ellipsoid in the source.
    SphereEllipsoid,
}

#[derive(Clone, Debug)]
pub struct SynthPair<T> {
    pub target: ScalarVolume<T>,
    pub source: ScalarVolume<T>,
    pub target_labels: LabelVolume,
    pub source_labels: LabelVolume,
    pub truth: DeformationField<T>,
}

fn centre(dims: Dims) -> [f64; 3] {
    dims.as_array().map(|n| (n as f64 - 1.0) / 2.0)
}

fn dist2(p: [f64; 3], c: [f64; 3]) -> f64 {
    (0..3).map(|a| (p[a] - c[a]).powi(2)).sum()
}

fn at(i: usize, j: usize, k: usize) -> [f64; 3] {
    [i as f64, j as f64, k as f64]
}

/// Blob width used by the translate case: 6 voxels on a 64-voxel axis.
pub fn blob_sigma(dims: Dims) -> f64 {
    (6.0 * dims.min_axis() as f64 / 64.0).max(1.5)
}

/// Label radius of a blob, in multiples of its sigma.
pub const BLOB_LABEL_RADIUS: f64 = 1.5;

pub fn synthesize<T: Real>(case: &SynthCase, dims: Dims, spacing: Spacing) -> Result<SynthPair<T>> {
    if dims.min_axis() < 4 {
        return Err(RegError::TooSmall { dims, min: 4 });
    }
    match case {
        SynthCase::Translate { shift } => Ok(translate(dims, spacing, *shift)),
        SynthCase::Blob { seed } => Ok(blob(dims, spacing, *seed)),
        SynthCase::SphereEllipsoid => Ok(sphere_ellipsoid(dims, spacing)),
    }
}

fn translate<T: Real>(dims: Dims, spacing: Spacing, shift: [f64; 3]) -> SynthPair<T> {
    let c = centre(dims);
    let moved = [c[0] + shift[0], c[1] + shift[1], c[2] + shift[2]];
    let sigma = blob_sigma(dims);
    let r2 = (BLOB_LABEL_RADIUS * sigma).powi(2);
    let gauss = |p: [f64; 3], c: [f64; 3]| (-dist2(p, c) / (2.0 * sigma * sigma)).exp();
    SynthPair {
        target: ScalarVolume::from_fn(dims, spacing, |i, j, k| T::of(gauss(at(i, j, k), c))),
        source: ScalarVolume::from_fn(dims, spacing, |i, j, k| T::of(gauss(at(i, j, k), moved))),
        target_labels: LabelVolume::from_fn(dims, spacing, |i, j, k| (dist2(at(i, j, k), c) <= r2) as u16),
        source_labels: LabelVolume::from_fn(dims, spacing, |i, j, k| {
            (dist2(at(i, j, k), moved) <= r2) as u16
        }),
        truth: DeformationField::from_displacement(VectorField::uniform(
            dims,
            spacing,
            shift.map(T::of),
        )),
    }
}

struct Wave {
    amp: [f64; 3],
    freq: [f64; 3],
    phase: f64,
}

/// Smooth periodic displacement; each plane wave has gradient norm at most
/// `|amp| · |freq|`, kept well below 1 so `Id + d` stays invertible.
fn random_waves(rng: &mut ChaCha8Rng, dims: Dims, max_disp: f64) -> Vec<Wave> {
    let n = dims.as_array().map(|n| n as f64);
    (0..4)
        .map(|_| {
            let cycles = [rng.gen_range(0..=1), rng.gen_range(0..=1), rng.gen_range(1..=2)];
            let mut amp = [0.0; 3];
            for a in amp.iter_mut() {
                *a = rng.gen_range(-1.0..1.0) * max_disp / 4.0;
            }
            Wave {
                amp,
                freq: [
                    std::f64::consts::TAU * cycles[0] as f64 / n[0],
                    std::f64::consts::TAU * cycles[1] as f64 / n[1],
                    std::f64::consts::TAU * cycles[2] as f64 / n[2],
                ],
                phase: rng.gen_range(0.0..std::f64::consts::TAU),
            }
        })
        .collect()
}

fn eval_waves(waves: &[Wave], p: [f64; 3]) -> [f64; 3] {
    let mut d = [0.0; 3];
    for w in waves {
        let s = (w.freq[0] * p[0] + w.freq[1] * p[1] + w.freq[2] * p[2] + w.phase).sin();
        for (da, amp) in d.iter_mut().zip(w.amp) {
            *da += amp * s;
        }
    }
    d
}

fn blob<T: Real>(dims: Dims, spacing: Spacing, seed: u64) -> SynthPair<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = dims.as_array().map(|n| n as f64);
    let scale = dims.min_axis() as f64 / 64.0;
    let blobs: Vec<([f64; 3], f64, f64)> = (0..4)
        .map(|_| {
            let c = [
                rng.gen_range(0.3..0.7) * n[0],
                rng.gen_range(0.3..0.7) * n[1],
                rng.gen_range(0.3..0.7) * n[2],
            ];
            let sigma = rng.gen_range(4.0..7.0) * scale;
            let amp = rng.gen_range(0.5..1.0);
            (c, sigma.max(1.5), amp)
        })
        .collect();
    let intensity = |p: [f64; 3]| -> f64 {
        blobs
            .iter()
            .map(|(c, s, a)| a * (-dist2(p, *c) / (2.0 * s * s)).exp())
            .sum()
    };
    let waves = random_waves(&mut rng, dims, 2.0 * scale.max(0.5));

    let target = ScalarVolume::from_fn(dims, spacing, |i, j, k| T::of(intensity(at(i, j, k))));
    let target_labels = LabelVolume::from_fn(dims, spacing, |i, j, k| (intensity(at(i, j, k)) > 0.4) as u16);

    // source(y) = target(y + d(y)); the true phi inverts y ↦ y + d(y)
    let source = ScalarVolume::from_fn(dims, spacing, |i, j, k| {
        let p = at(i, j, k);
        let d = eval_waves(&waves, p);
        T::of(intensity([p[0] + d[0], p[1] + d[1], p[2] + d[2]]))
    });
    let forward = DeformationField::from_displacement(VectorField::from_fn(dims, spacing, |i, j, k| {
        eval_waves(&waves, at(i, j, k)).map(T::of)
    }));
    let source_labels = warp_labels(&target_labels, &forward).expect("same dims");
    let truth = DeformationField::from_displacement(VectorField::from_fn(dims, spacing, |i, j, k| {
        let p = at(i, j, k);
        let mut u = [0.0; 3];
        for _ in 0..50 {
            let d = eval_waves(&waves, [p[0] + u[0], p[1] + u[1], p[2] + u[2]]);
            u = [-d[0], -d[1], -d[2]];
        }
        u.map(T::of)
    }));
    SynthPair {
        target,
        source,
        target_labels,
        source_labels,
        truth,
    }
}

/// Semi-axes of the source ellipsoid relative to the target sphere radius.
pub const ELLIPSOID_AXES: [f64; 3] = [1.2, 0.85, 1.0];

fn sphere_ellipsoid<T: Real>(dims: Dims, spacing: Spacing) -> SynthPair<T> {
    let c = centre(dims);
    let radius = 0.25 * dims.min_axis() as f64;
    let edge = 1.5;
    // approximate signed distance to an axis-aligned ellipsoid, in voxels
    let sdf = |p: [f64; 3], axes: [f64; 3]| -> f64 {
        let q: f64 = (0..3)
            .map(|a| ((p[a] - c[a]) / (axes[a] * radius)).powi(2))
            .sum();
        (q.sqrt() - 1.0) * radius
    };
    let image = |p: [f64; 3], axes: [f64; 3]| 0.5 * (1.0 - (sdf(p, axes) / edge).tanh());
    let sphere = [1.0; 3];
    SynthPair {
        target: ScalarVolume::from_fn(dims, spacing, |i, j, k| T::of(image(at(i, j, k), sphere))),
        source: ScalarVolume::from_fn(dims, spacing, |i, j, k| T::of(image(at(i, j, k), ELLIPSOID_AXES))),
        target_labels: LabelVolume::from_fn(dims, spacing, |i, j, k| (sdf(at(i, j, k), sphere) <= 0.0) as u16),
        source_labels: LabelVolume::from_fn(dims, spacing, |i, j, k| {
            (sdf(at(i, j, k), ELLIPSOID_AXES) <= 0.0) as u16
        }),
        truth: DeformationField::from_displacement(VectorField::from_fn(dims, spacing, |i, j, k| {
            let p = at(i, j, k);
            [0, 1, 2].map(|a| T::of((ELLIPSOID_AXES[a] - 1.0) * (p[a] - c[a])))
        })),
    }
}

/// Replace a seeded `fraction` of voxels by the volume's minimum or maximum.
pub fn salt_and_pepper<T: Real>(vol: &ScalarVolume<T>, fraction: f64, seed: u64) -> Result<ScalarVolume<T>> {
    if !(0.0..=1.0).contains(&fraction) {
        return Err(RegError::invalid("fraction", format!("{fraction} outside [0, 1]")));
    }
    let (lo, hi) = vol.range();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = vol
        .data()
        .iter()
        .map(|&v| {
            if rng.gen_bool(fraction) {
                if rng.gen_bool(0.5) {
                    hi
                } else {
                    lo
                }
            } else {
                v
            }
        })
        .collect();
    ScalarVolume::new(vol.dims(), vol.spacing(), data)
}

/// Largest `|source(phi(x)) − target(x)|` under the stored true deformation.
pub fn truth_residual<T: Real>(pair: &SynthPair<T>) -> f64 {
    let dims = pair.target.dims();
    let disp = pair.truth.displacement();
    let mut worst = 0.0f64;
    for k in 0..dims.nz {
        for j in 0..dims.ny {
            for i in 0..dims.nx {
                let u = disp.get(i, j, k);
                let p = [
                    T::of(i as f64) + u[0],
                    T::of(j as f64) + u[1],
                    T::of(k as f64) + u[2],
                ];
                let s = sample_scalar(dims, pair.source.data(), p);
                worst = worst.max((s - pair.target.get(i, j, k)).abs().wide());
            }
        }
    }
    worst
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::jacobian_stats;

    #[test]
    fn cases_are_deterministic() {
        let d = Dims::cube(16);
        for case in [
            SynthCase::Translate { shift: [2.0, 0.0, 0.0] },
            SynthCase::Blob { seed: 7 },
            SynthCase::SphereEllipsoid,
        ] {
            let a = synthesize::<f32>(&case, d, [1.0; 3]).unwrap();
            let b = synthesize::<f32>(&case, d, [1.0; 3]).unwrap();
            assert_eq!(a.target, b.target);
            assert_eq!(a.source, b.source);
            assert_eq!(a.source_labels, b.source_labels);
        }
    }

    #[test]
    fn truth_maps_source_onto_target() {
        let d = Dims::cube(32);
        let t = synthesize::<f64>(&SynthCase::Translate { shift: [3.0, 0.0, 0.0] }, d, [1.0; 3]).unwrap();
        assert!(truth_residual(&t) < 0.02);
        let b = synthesize::<f64>(&SynthCase::Blob { seed: 3 }, d, [1.0; 3]).unwrap();
        assert!(truth_residual(&b) < 0.05);
        assert_eq!(jacobian_stats(&b.truth).unwrap().pct_nonpositive, 0.0);
        let s = synthesize::<f64>(&SynthCase::SphereEllipsoid, d, [1.0; 3]).unwrap();
        assert!(s.target_labels.count(1) > 0 && s.source_labels.count(1) > 0);
    }

    #[test]
    fn salt_and_pepper_fraction() {
        let v = ScalarVolume::<f32>::from_fn(Dims::cube(20), [1.0; 3], |i, _, _| 0.3 + 0.01 * i as f32);
        let n = salt_and_pepper(&v, 0.05, 1).unwrap();
        let changed = v.data().iter().zip(n.data()).filter(|(a, b)| a != b).count();
        let frac = changed as f64 / v.data().len() as f64;
        assert!((frac - 0.05).abs() < 0.01, "{frac}");
        assert!(salt_and_pepper(&v, 1.5, 1).is_err());
    }
}
