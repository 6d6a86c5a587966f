use diffreg::admm::{objective, v_update_l1, v_update_l2, w_update};
use diffreg::synth::{synthesize, SynthCase};
use diffreg::{
    image_gradient, laplacian_symbol, regulariser_energy, solve_velocity, DataTerm, Dims, ScalarVolume,
    SolverConfig, VectorField,
};
use nalgebra::{DMatrix, DVector, Matrix3, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const SP: [f64; 3] = [1.0; 3];

/// Periodic 7-point negative Laplacian as an explicit matrix.
fn laplacian_matrix(d: Dims) -> DMatrix<f64> {
    let n = d.len();
    let mut k = DMatrix::zeros(n, n);
    for idx in 0..n {
        let (i, j, l) = d.coords(idx);
        k[(idx, idx)] += 6.0;
        let nb = [
            d.index((i + 1) % d.nx, j, l),
            d.index((i + d.nx - 1) % d.nx, j, l),
            d.index(i, (j + 1) % d.ny, l),
            d.index(i, (j + d.ny - 1) % d.ny, l),
            d.index(i, j, (l + 1) % d.nz),
            d.index(i, j, (l + d.nz - 1) % d.nz),
        ];
        for m in nb {
            k[(idx, m)] -= 1.0;
        }
    }
    k
}

fn random_field(d: Dims, rng: &mut ChaCha8Rng) -> VectorField<f64> {
    let data = (0..d.len())
        .map(|_| [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)])
        .collect();
    VectorField::new(d, SP, data).unwrap()
}

#[test]
fn w_update_matches_dense_periodic_solve() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for d in [Dims::cube(4), Dims::cube(6), Dims::new(4, 6, 8)] {
        let k = laplacian_matrix(d);
        for n in 1..=3u32 {
            let kn = k.pow(n);
            let kernel = laplacian_symbol::<f64>(n, d).unwrap();
            for _ in 0..5 {
                let lambda = rng.gen_range(0.0..60.0);
                let theta = rng.gen_range(0.01..2.0);
                let cfg = SolverConfig::new(DataTerm::L1, n, lambda, theta);
                let v = random_field(d, &mut rng);
                let b = random_field(d, &mut rng);
                let w = w_update(&v, &b, &kernel, &cfg).unwrap();
                let lu = (&kn * lambda + DMatrix::identity(d.len(), d.len()) * theta).lu();
                for c in 0..3 {
                    let rhs = DVector::from_iterator(
                        d.len(),
                        v.data().iter().zip(b.data()).map(|(a, b)| theta * (a[c] + b[c])),
                    );
                    let x = lu.solve(&rhs).unwrap();
                    let scale = x.amax();
                    let err = (0..d.len())
                        .map(|i| (w.data()[i][c] - x[i]).abs())
                        .fold(0.0, f64::max);
                    assert!(err <= 1e-5 * scale, "{d} n={n} err {err} scale {scale}");
                }
            }
        }
    }
}

fn one_voxel(u: [f64; 3], g: [f64; 3], resid: f64) -> (ScalarVolume<f64>, ScalarVolume<f64>, VectorField<f64>, VectorField<f64>, VectorField<f64>) {
    let d = Dims::new(1, 1, 1);
    let i0 = ScalarVolume::new(d, SP, vec![0.0]).unwrap();
    let i1 = ScalarVolume::new(d, SP, vec![resid]).unwrap();
    let grad = VectorField::new(d, SP, vec![g]).unwrap();
    let w_hat = VectorField::new(d, SP, vec![u]).unwrap();
    let b_hat = VectorField::zeros(d, SP);
    (i0, i1, grad, w_hat, b_hat)
}

fn rand3(rng: &mut ChaCha8Rng, r: f64) -> [f64; 3] {
    [rng.gen_range(-r..r), rng.gen_range(-r..r), rng.gen_range(-r..r)]
}

#[test]
fn l2_voxel_solves_its_normal_equation() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for _ in 0..1000 {
        let (u, g, r, theta) = (rand3(&mut rng, 2.0), rand3(&mut rng, 1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.01..1.0));
        let (i0, i1, grad, w_hat, b_hat) = one_voxel(u, g, r);
        let cfg = SolverConfig::new(DataTerm::L2, 1, 1.0, theta);
        let v = v_update_l2(&i0, &i1, &grad, &w_hat, &b_hat, &cfg).unwrap().data()[0];
        let j = Vector3::from(g);
        let a = j * j.transpose() + Matrix3::identity() * theta;
        let rhs = Vector3::from(u) * theta - j * r;
        let v = Vector3::from(v);
        assert!((a * v - rhs).norm() <= 1e-5 * (1.0 + rhs.norm()));
        let direct = a.lu().solve(&rhs).unwrap();
        assert!((v - direct).norm() <= 1e-6 * (1.0 + direct.norm()));
    }
}

/// `|⟨J, v⟩ + r| + θ/2 ‖v − u‖²`
fn l1_cost(v: [f64; 3], u: [f64; 3], g: [f64; 3], r: f64, theta: f64) -> f64 {
    let rho: f64 = (0..3).map(|c| g[c] * v[c]).sum::<f64>() + r;
    rho.abs() + 0.5 * theta * (0..3).map(|c| (v[c] - u[c]).powi(2)).sum::<f64>()
}

/// Minimise along `v = u − tJ`, the only direction that changes the residual.
fn line_search(u: [f64; 3], g: [f64; 3], r: f64, theta: f64) -> [f64; 3] {
    let at = |t: f64| [u[0] - t * g[0], u[1] - t * g[1], u[2] - t * g[2]];
    let f = |t: f64| l1_cost(at(t), u, g, r, theta);
    let span = 2.0 / theta;
    let steps = 4000;
    let mut best = 0.0;
    for s in 0..=steps {
        let t = -span + 2.0 * span * s as f64 / steps as f64;
        if f(t) < f(best) {
            best = t;
        }
    }
    let h = 2.0 * span / steps as f64;
    let (mut lo, mut hi) = (best - h, best + h);
    for _ in 0..200 {
        let m1 = lo + (hi - lo) / 3.0;
        let m2 = hi - (hi - lo) / 3.0;
        if f(m1) < f(m2) {
            hi = m2;
        } else {
            lo = m1;
        }
    }
    at(0.5 * (lo + hi))
}

#[test]
fn l1_voxel_matches_line_search() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..1000 {
        let (u, g, r, theta) = (rand3(&mut rng, 2.0), rand3(&mut rng, 1.0), rng.gen_range(-1.0..1.0), rng.gen_range(0.05..1.0));
        let (i0, i1, grad, w_hat, b_hat) = one_voxel(u, g, r);
        let cfg = SolverConfig::new(DataTerm::L1, 1, 1.0, theta);
        let v = v_update_l1(&i0, &i1, &grad, &w_hat, &b_hat, &cfg).unwrap().data()[0];
        let best = line_search(u, g, r, theta);
        for c in 0..3 {
            assert!((v[c] - best[c]).abs() <= 1e-3, "{v:?} vs {best:?}");
        }
        let here = l1_cost(v, u, g, r, theta);
        for _ in 0..10 {
            let p = rand3(&mut rng, 1e-2);
            let moved = [v[0] + p[0], v[1] + p[1], v[2] + p[2]];
            assert!(here <= l1_cost(moved, u, g, r, theta) + 1e-5);
        }
    }
}

#[test]
fn regulariser_energy_is_the_dense_quadratic_form() {
    let d = Dims::cube(8);
    let k = laplacian_matrix(d);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let w = random_field(d, &mut rng);
    for n in 1..=3u32 {
        let kn = k.pow(n);
        let mut expected = 0.0;
        for c in 0..3 {
            let x = DVector::from_iterator(d.len(), w.data().iter().map(|a| a[c]));
            expected += 0.5 * x.dot(&(&kn * &x));
        }
        let got = regulariser_energy(&w, n).unwrap();
        assert!((got - expected).abs() <= 1e-9 * expected, "n={n}: {got} vs {expected}");
    }
}

/// `K` applied by stencil with periodic wrap.
fn apply_k(d: Dims, x: &[f64]) -> Vec<f64> {
    (0..d.len())
        .map(|idx| {
            let (i, j, l) = d.coords(idx);
            6.0 * x[idx]
                - x[d.index((i + 1) % d.nx, j, l)]
                - x[d.index((i + d.nx - 1) % d.nx, j, l)]
                - x[d.index(i, (j + 1) % d.ny, l)]
                - x[d.index(i, (j + d.ny - 1) % d.ny, l)]
                - x[d.index(i, j, (l + 1) % d.nz)]
                - x[d.index(i, j, (l + d.nz - 1) % d.nz)]
        })
        .collect()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[test]
fn l2_solve_reaches_the_normal_equation_minimum() {
    let d = Dims::cube(16);
    let pair = synthesize::<f64>(&SynthCase::Translate { shift: [1.0, 0.0, 0.0] }, d, SP).unwrap();
    let (i0, i1) = (&pair.target, &pair.source);
    let grad = image_gradient(i1).unwrap();
    let g = grad.data();
    let r: Vec<f64> = i1.data().iter().zip(i0.data()).map(|(a, b)| a - b).collect();
    let lambda = 0.5;
    let nv = d.len();

    // unknowns laid out component-major: x[c * nv + idx]
    let apply = |x: &[f64]| -> Vec<f64> {
        let mut out = vec![0.0; 3 * nv];
        for c in 0..3 {
            let kx = apply_k(d, &x[c * nv..(c + 1) * nv]);
            out[c * nv..(c + 1) * nv].copy_from_slice(&kx);
        }
        for idx in 0..nv {
            let jv: f64 = (0..3).map(|c| g[idx][c] * x[c * nv + idx]).sum();
            for c in 0..3 {
                out[c * nv + idx] = lambda * out[c * nv + idx] + g[idx][c] * jv;
            }
        }
        out
    };
    let b: Vec<f64> = (0..3).flat_map(|c| (0..nv).map(move |idx| (c, idx))).map(|(c, idx)| -g[idx][c] * r[idx]).collect();
    let mut x = vec![0.0; 3 * nv];
    let mut res = b.clone();
    let mut p = res.clone();
    let mut rr = dot(&res, &res);
    for _ in 0..5000 {
        let ap = apply(&p);
        let a = rr / dot(&p, &ap);
        for i in 0..x.len() {
            x[i] += a * p[i];
            res[i] -= a * ap[i];
        }
        let next = dot(&res, &res);
        if next.sqrt() <= 1e-12 * dot(&b, &b).sqrt() {
            break;
        }
        for i in 0..p.len() {
            p[i] = res[i] + next / rr * p[i];
        }
        rr = next;
    }
    let kx: Vec<f64> = (0..3).flat_map(|c| apply_k(d, &x[c * nv..(c + 1) * nv])).collect();
    let data: f64 = (0..nv)
        .map(|idx| {
            let rho: f64 = (0..3).map(|c| g[idx][c] * x[c * nv + idx]).sum::<f64>() + r[idx];
            0.5 * rho * rho
        })
        .sum();
    let best = data + lambda * 0.5 * dot(&x, &kx);

    let mut cfg = SolverConfig::new(DataTerm::L2, 1, lambda, 0.1);
    cfg.max_iters = 3000;
    let (v, diag) = solve_velocity(i0, i1, &cfg).unwrap();
    let got = objective(i0, i1, &grad, &v, &cfg).unwrap();
    assert!((got - best).abs() <= 0.01 * best, "{got} vs {best}");
    assert!((diag.objective.last().unwrap() - got).abs() <= 1e-9 * got);
    assert!(diag.constraint_residual.last().unwrap() < &diag.constraint_residual[0]);
}
