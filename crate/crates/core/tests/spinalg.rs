use nalgebra::DMatrix;
use nvnmr::spinalg::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn c(re: f64, im: f64) -> C64 {
    C64::new(re, im)
}

fn random_hermitian(dim: usize, scale: f64, rng: &mut ChaCha8Rng) -> Operator {
    let a = DMatrix::from_fn(dim, dim, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let h = (&a + a.adjoint()).map(|z| z * (0.5 * scale));
    Operator::from_matrix(h).unwrap()
}

fn random_density(dim: usize, rng: &mut ChaCha8Rng) -> DensityState {
    let a = DMatrix::from_fn(dim, dim, |_, _| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)));
    let p = &a * a.adjoint();
    let tr = p.trace();
    DensityState::from_matrix(p.map(|z| z / tr)).unwrap()
}

fn rk4_von_neumann(rho: &DMatrix<C64>, h: &DMatrix<C64>, t: f64, n: usize) -> DMatrix<C64> {
    let f = |r: &DMatrix<C64>| (h * r - r * h).map(|z| z * c(0.0, -1.0));
    let dt = t / n as f64;
    let mut r = rho.clone();
    for _ in 0..n {
        let k1 = f(&r);
        let k2 = f(&(&r + k1.map(|z| z * (dt / 2.0))));
        let k3 = f(&(&r + k2.map(|z| z * (dt / 2.0))));
        let k4 = f(&(&r + k3.map(|z| z * dt)));
        r += (k1 + k2.map(|z| z * 2.0) + k3.map(|z| z * 2.0) + k4).map(|z| z * (dt / 6.0));
    }
    r
}

#[test]
fn kronecker_embedding_of_ix() {
    let ix = embed_single_site(Axis::X, 0, 2).unwrap();
    assert!(ix.trace().norm() < 1e-15);
    let (vals, _) = ix.eigh().unwrap();
    let expect = [-0.5, -0.5, 0.5, 0.5];
    for (v, e) in vals.iter().zip(expect) {
        assert!((v - e).abs() < 1e-12);
    }
    // (1/2) sigma_x on the first factor couples |0x> with |1x>
    assert_eq!(ix.get(0, 2), c(0.5, 0.0));
    assert_eq!(ix.get(1, 3), c(0.5, 0.0));
    assert_eq!(ix.get(0, 1), c(0.0, 0.0));
}

#[test]
fn diagonal_axis_has_doubly_degenerate_half_eigenvalues() {
    let s = 1.0 / 3f64.sqrt();
    let op = embed_single_site(Axis::Dir([s, s, s]), 1, 2).unwrap();
    assert!(op.is_hermitian());
    let (vals, _) = op.eigh().unwrap();
    assert!((vals[0] + 0.5).abs() < 1e-12 && (vals[1] + 0.5).abs() < 1e-12);
    assert!((vals[2] - 0.5).abs() < 1e-12 && (vals[3] - 0.5).abs() < 1e-12);
}

#[test]
fn eigenstate_is_stationary() {
    let f = 1.3e3;
    let h = embed_single_site(Axis::Z, 0, 1).unwrap().scale(2.0 * std::f64::consts::PI * f);
    let rho = DensityState::bloch(0.0, 0.0);
    let out = evolve_step(&rho, &h, 3.0e-5).unwrap();
    assert!(out.trace_distance(&rho).unwrap() < 1e-14);
}

#[test]
fn half_larmor_turn_flips_ix() {
    let f = 1.0e3;
    let h = embed_single_site(Axis::Z, 0, 1).unwrap().scale(2.0 * std::f64::consts::PI * f);
    let ix = embed_single_site(Axis::X, 0, 1).unwrap();
    let mut rho = DensityState::bloch(std::f64::consts::FRAC_PI_2, 0.0);
    // split the half turn to respect the step guard
    let n = 40;
    for _ in 0..n {
        rho = evolve_step(&rho, &h, 1.0 / (2.0 * f) / n as f64).unwrap();
    }
    let minus = DensityState::bloch(std::f64::consts::FRAC_PI_2, std::f64::consts::PI);
    assert!(rho.trace_distance(&minus).unwrap() < 1e-12);
    assert!((expectation(&rho, &ix).unwrap() + 0.5).abs() < 1e-12);
}

#[test]
fn matches_rk4_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for dim in [2usize, 4, 8, 16] {
        let h = random_hermitian(dim, 3.0e4, &mut rng);
        let rho = random_density(dim, &mut rng);
        let norm = h.spectral_norm().unwrap();
        let dt = 0.45 / norm;
        let exact = evolve_step(&rho, &h, dt).unwrap();
        let rk = rk4_von_neumann(rho.matrix(), h.matrix(), dt, 100);
        let rk = DensityState::from_matrix({
            let herm = (&rk + rk.adjoint()).map(|z| z * 0.5);
            herm
        });
        let rk = rk.unwrap();
        let d = exact.trace_distance(&rk).unwrap();
        assert!(d < 1e-8, "dim {dim}: trace distance {d:e}");
    }
}

#[test]
fn step_guard_and_hermiticity_errors() {
    let h = embed_single_site(Axis::Z, 0, 1).unwrap().scale(1.0e6);
    let rho = DensityState::bloch(0.3, 0.1);
    assert!(matches!(evolve_step(&rho, &h, 2.0e-6), Err(SpinError::StepGuard(_))));
    let mut m = h.matrix().clone();
    m[(0, 1)] = c(1.0, 0.0);
    let bad = Operator::from_matrix(m).unwrap();
    assert!(matches!(evolve_step(&rho, &bad, 1e-9), Err(SpinError::NonHermitian(_))));
    assert!(evolve_step(&rho, &h, 0.0).is_err());
}

#[test]
fn unitarity_trace_and_composition() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for dim in [2usize, 4, 16] {
        let h = random_hermitian(dim, 1.0e4, &mut rng);
        let norm = h.spectral_norm().unwrap();
        let a = 0.2 / norm;
        let b = 0.25 / norm;
        let mixed = random_density(dim, &mut rng);
        let psi: Vec<C64> = (0..dim).map(|_| c(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0))).collect();
        let pure = DensityState::pure(&psi).unwrap();
        for rho in [&mixed, &pure] {
            let one = evolve_step(rho, &h, a).unwrap();
            assert!((one.trace().re - 1.0).abs() < 1e-10);
            assert!(one.trace().im.abs() < 1e-10);
            assert!(Operator::from_matrix(one.matrix().clone()).unwrap().hermiticity_defect() < 1e-12);
            let two = evolve_step(&one, &h, b).unwrap();
            let joint = evolve_step(rho, &h, a + b).unwrap();
            assert!(two.trace_distance(&joint).unwrap() < 1e-9);
        }
        let out = evolve_step(&pure, &h, a).unwrap();
        assert!((out.purity() - 1.0).abs() < 1e-10);
        assert!((out.purity() - pure.purity()).abs() < 1e-10);
    }
}

#[test]
fn embedding_algebra() {
    for n in 1..=4usize {
        for k in 0..n {
            let x = embed_single_site(Axis::X, k, n).unwrap();
            let y = embed_single_site(Axis::Y, k, n).unwrap();
            let z = embed_single_site(Axis::Z, k, n).unwrap();
            let comm = x.commutator(&y).unwrap();
            let target = Operator::from_matrix(z.matrix().map(|v| v * c(0.0, 1.0))).unwrap();
            assert!(comm.sub(&target).unwrap().frobenius_norm() < 1e-14);
            for l in 0..n {
                if l == k {
                    continue;
                }
                for ax in [Axis::X, Axis::Y, Axis::Z] {
                    let other = embed_single_site(ax, l, n).unwrap();
                    for mine in [&x, &y, &z] {
                        assert_eq!(mine.commutator(&other).unwrap().frobenius_norm(), 0.0);
                    }
                }
            }
        }
    }
}

#[test]
fn expectation_values() {
    let iz = embed_single_site(Axis::Z, 0, 1).unwrap();
    let up = DensityState::bloch(0.0, 0.0);
    assert!((expectation(&up, &iz).unwrap() - 0.5).abs() < 1e-15);
    let mixed = DensityState::maximally_mixed(8).unwrap();
    let s = 1.0 / 3f64.sqrt();
    let op = embed_single_site(Axis::Dir([s, -s, s]), 2, 3).unwrap();
    assert!(expectation(&mixed, &op).unwrap().abs() < 1e-15);
    let ix = embed_single_site(Axis::X, 0, 1).unwrap();
    let iy = embed_single_site(Axis::Y, 0, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..50 {
        let th = rng.random_range(0.0..std::f64::consts::PI);
        let ph = rng.random_range(0.0..std::f64::consts::TAU);
        let rho = DensityState::bloch(th, ph);
        let ex = expectation_complex(&rho, &ix).unwrap();
        assert!((ex.re - 0.5 * th.sin() * ph.cos()).abs() < 1e-14);
        assert!(ex.im.abs() < 1e-10);
        assert!((expectation(&rho, &iy).unwrap() - 0.5 * th.sin() * ph.sin()).abs() < 1e-14);
        assert!((expectation(&rho, &iz).unwrap() - 0.5 * th.cos()).abs() < 1e-14);
    }
    let two = DensityState::maximally_mixed(4).unwrap();
    assert!(matches!(expectation(&two, &iz), Err(SpinError::DimensionMismatch(4, 2))));
}

#[test]
fn density_validation() {
    let bad = DMatrix::from_row_slice(2, 2, &[c(0.7, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(0.7, 0.0)]);
    assert!(DensityState::from_matrix(bad).is_err());
    let neg = DMatrix::from_row_slice(2, 2, &[c(1.2, 0.0), c(0.0, 0.0), c(0.0, 0.0), c(-0.2, 0.0)]);
    assert!(DensityState::from_matrix(neg).is_err());
    let prod = DensityState::product(&[DensityState::bloch(0.4, 0.2), DensityState::bloch(1.0, 2.0)]).unwrap();
    assert_eq!(prod.dim(), 4);
    assert!((prod.purity() - 1.0).abs() < 1e-12);
}
