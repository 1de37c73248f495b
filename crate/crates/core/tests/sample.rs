use nvnmr::consts::GAMMA_1H;
use nvnmr::geom::{self, Vec3};
use nvnmr::rng::{substream, tag};
use nvnmr::sample::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tensor1() -> ShiftTensor {
    ShiftTensor::new([352.0, 22.0, 456.0], [0.4, 1.2, -0.7])
}

#[test]
fn iso_and_lab_tensor_eigenvalues() {
    let t = tensor1();
    assert_eq!(t.iso(), (352.0 + 22.0 + 456.0) / 3.0);
    let lab = t.lab_tensor();
    assert!((lab - lab.transpose()).norm() < 1e-12);
    let mut ev: Vec<f64> = lab.symmetric_eigenvalues().iter().copied().collect();
    ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
    for (a, b) in ev.iter().zip([22.0, 352.0, 456.0]) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn secular_shift_along_principal_axis() {
    let t = tensor1();
    let z = t.rotation().column(2).into_owned();
    assert!((secular_shift(&t, &z).unwrap() - 456.0).abs() < 1e-9);
}

#[test]
fn secular_shift_on_the_body_diagonal_is_isotropic() {
    let t = tensor1();
    let r = t.rotation();
    let b = (r.column(0) + r.column(1) + r.column(2)) / 3f64.sqrt();
    let s = secular_shift(&t, &b).unwrap();
    assert!((s - 276.666_666_666_666_7).abs() < 1e-9);
}

#[test]
fn secular_shift_matches_quadratic_form_and_bounds() {
    let t = tensor1();
    let lab = t.lab_tensor();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..200 {
        let b = geom::random_unit(&mut rng);
        let s = secular_shift(&t, &b).unwrap();
        assert!((s - b.dot(&(lab * b))).abs() < 1e-9);
        assert!(s >= 22.0 - 1e-9 && s <= 456.0 + 1e-9);
    }
    assert!(matches!(secular_shift(&t, &Vec3::new(1.0, 1.0, 0.0)), Err(SampleError::NonUnit(_))));
}

#[test]
fn monte_carlo_isotropy() {
    let t = ShiftTensor::new([221.0, 27.0, 74.0], [1.0, 0.3, 2.0]);
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let n = 10_000;
    let mean: f64 = (0..n).map(|_| secular_shift(&t, &geom::random_unit(&mut rng)).unwrap()).sum::<f64>() / n as f64;
    assert!((mean - 107.33).abs() < 1.0, "{mean}");
}

fn pair_with_axis(axis: Vec3) -> PairCluster {
    PairCluster::new(Vec3::new(0.0, 0.0, 7e-9), axis, 0.25e-9, [tensor1(), tensor1()], SpinSpecies::default())
}

#[test]
fn dipolar_anchor_and_legendre_zeros() {
    let p = pair_with_axis(Vec3::z());
    assert!((p.distance() - 0.25e-9).abs() < 1e-12);
    let d0 = dipolar_secular(&p, &Vec3::z()).unwrap();
    assert!((2.0 * d0 - 14.9e3).abs() < 1e-6);
    // textbook coupling constant mu0 hbar gamma^2 / (4 pi r^3), gamma in rad/s/T, in Hz
    let g = std::f64::consts::TAU * GAMMA_1H;
    let hbar = nvnmr::consts::PLANCK / std::f64::consts::TAU;
    let textbook = nvnmr::consts::MU0 * hbar * g * g / (4.0 * std::f64::consts::PI * 0.25e-9f64.powi(3)) / std::f64::consts::TAU;
    assert!((d0 / textbook - 1.0).abs() < 0.05, "{d0} vs {textbook}");
    let magic = nvnmr::consts::magic_angle();
    let b = Vec3::new(magic.sin(), 0.0, magic.cos());
    assert!(dipolar_secular(&p, &b).unwrap().abs() < 1e-9);
    let perp = dipolar_secular(&p, &Vec3::x()).unwrap();
    assert!((perp / d0 + 0.5).abs() < 1e-12);
}

#[test]
fn dipolar_prefactor_scales_as_inverse_cube_and_gamma_squared() {
    let a = dipolar_prefactor(GAMMA_1H, 0.25e-9);
    let b = dipolar_prefactor(GAMMA_1H, 0.5e-9);
    assert!((a / b - 8.0).abs() < 1e-12);
    let c = dipolar_prefactor(2.0 * GAMMA_1H, 0.25e-9);
    assert!((c / a - 4.0).abs() < 1e-12);
}

#[test]
fn dipolar_sphere_average_vanishes() {
    let p = pair_with_axis(Vec3::new(0.3, -0.2, 0.9).normalize());
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let n = 40_000;
    let vals: Vec<f64> = (0..n).map(|_| dipolar_secular(&p, &geom::random_unit(&mut rng)).unwrap()).collect();
    let mean = vals.iter().sum::<f64>() / n as f64;
    let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
    assert!(mean.abs() < 4.0 * (var / n as f64).sqrt());
}

#[test]
fn bloch_inverse_cdf_endpoints() {
    for x in [0.0, 0.1, 1.0, 30.0] {
        assert!((cos_theta_from_uniform(0.0, x) - 1.0).abs() < 1e-12);
        assert!((cos_theta_from_uniform(1.0, x) + 1.0).abs() < 1e-9);
    }
    assert!((cos_theta_from_uniform(0.25, 0.0) - 0.5).abs() < 1e-15);
    assert!((cos_theta_from_uniform(0.25, 1e-12) - 0.5).abs() < 1e-9);
}

// P(cos theta) proportional to exp(-x cos theta); the oracle integrates the
// density with Simpson's rule instead of using the closed form.
fn cdf_by_quadrature(c: f64, x: f64) -> f64 {
    let dens = |s: f64| (-x * s).exp();
    let simpson = |a: f64, b: f64| {
        let n = 2000;
        let h = (b - a) / n as f64;
        let mut acc = dens(a) + dens(b);
        for i in 1..n {
            acc += dens(a + i as f64 * h) * if i % 2 == 1 { 4.0 } else { 2.0 };
        }
        acc * h / 3.0
    };
    simpson(c, 1.0) / simpson(-1.0, 1.0)
}

#[test]
fn bloch_ks_statistic() {
    for (k, x) in [0.0, 0.1, 1.0].into_iter().enumerate() {
        let mut rng = substream(99, tag::BLOCH, k as u64);
        let n = 100_000;
        let s = sample_bloch(n, x, &mut rng);
        let mut cs: Vec<f64> = s.angles.iter().map(|(t, _)| t.cos()).collect();
        for (t, p) in &s.angles {
            assert!((0.0..=std::f64::consts::PI).contains(t));
            assert!((0.0..std::f64::consts::TAU).contains(p));
        }
        // P_c counts from cos theta = 1 downward, so sort descending
        cs.sort_by(|a, b| b.partial_cmp(a).unwrap());
        let mut ks: f64 = 0.0;
        for (i, c) in cs.iter().enumerate() {
            let f = cdf_by_quadrature(*c, x);
            ks = ks.max((f - i as f64 / n as f64).abs()).max((f - (i + 1) as f64 / n as f64).abs());
            if i % 997 != 0 {
                continue;
            }
            assert!((bloch_cdf(*c, x) - f).abs() < 1e-9);
        }
        assert!(ks < 0.005, "x={x}: KS {ks}");
    }
}

#[test]
fn bloch_mean_cos_theta() {
    // quadrature of cos theta against the Boltzmann weight
    let x: f64 = 0.5;
    let n = 4000;
    let h = 2.0 / n as f64;
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..=n {
        let c = -1.0 + i as f64 * h;
        let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
        num += w * c * (-x * c).exp();
        den += w * (-x * c).exp();
    }
    let oracle = num / den;
    assert!((oracle + 0.1640).abs() < 5e-5);
    assert!((mean_cos_theta(x) - oracle).abs() < 1e-9);

    let mut rng = substream(3, tag::BLOCH, 0);
    let s = sample_bloch(1_000_000, x, &mut rng);
    let mean = s.angles.iter().map(|(t, _)| t.cos()).sum::<f64>() / s.angles.len() as f64;
    assert!((mean - oracle).abs() < 0.002, "{mean}");
}

#[test]
fn mean_sin2_matches_quadrature() {
    for x in [0.2, 1.0, 3.0] {
        let n = 4000;
        let h = 2.0 / n as f64;
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..=n {
            let c: f64 = -1.0 + i as f64 * h;
            let w = if i == 0 || i == n { 1.0 } else if i % 2 == 1 { 4.0 } else { 2.0 };
            num += w * (1.0 - c * c) * (-x * c).exp();
            den += w * (-x * c).exp();
        }
        assert!((mean_sin2_theta(x) - num / den).abs() < 1e-9);
    }
}

#[test]
fn placement_is_deterministic_and_respects_constraints() {
    let cfg = GeometryConfig { pair_count: 12, ..Default::default() };
    let a = place_pairs(&cfg, &mut substream(1, tag::GEOMETRY, 0)).unwrap();
    let b = place_pairs(&cfg, &mut substream(1, tag::GEOMETRY, 0)).unwrap();
    assert_eq!(a, b);
    let (geo, pairs) = a;
    assert_eq!(geo.coupling_weights.len(), 24);
    for (i, p) in pairs.iter().enumerate() {
        assert!((p.distance() - cfg.internuclear_distance).abs() < 1e-12);
        for (j, x) in p.positions.iter().enumerate() {
            let x = Vec3::from(*x);
            assert!(in_detection_region(&x, cfg.nv_depth));
            let direct = coupling_weight(&x, GAMMA_1H);
            assert!((geo.coupling_weights[2 * i + j] - direct).abs() <= 1e-9 * direct.abs());
        }
        for q in &pairs[i + 1..] {
            let ci = (Vec3::from(p.positions[0]) + Vec3::from(p.positions[1])) / 2.0;
            let cq = (Vec3::from(q.positions[0]) + Vec3::from(q.positions[1])) / 2.0;
            assert!((ci - cq).norm() >= cfg.exclusion_radius);
        }
    }
}

#[test]
fn placement_fails_when_exclusion_is_too_large() {
    let cfg = GeometryConfig { pair_count: 4, exclusion_radius: 50e-9, max_attempts_per_pair: 50, ..Default::default() };
    let err = place_pairs(&cfg, &mut substream(2, tag::GEOMETRY, 0)).unwrap_err();
    assert!(matches!(err, SampleError::Placement { .. }));
    let empty = GeometryConfig { pair_count: 0, ..Default::default() };
    assert!(place_pairs(&empty, &mut substream(2, tag::GEOMETRY, 0)).is_err());
}

#[test]
fn on_axis_weight() {
    let d = 5e-9;
    let c = coupling_weight(&Vec3::new(0.0, 0.0, d), GAMMA_1H);
    assert!((c + coupling_scale(GAMMA_1H) * 2.0 / d.powi(3)).abs() < 1e-12 * c.abs());
}

// Direct 3-D midpoint quadrature in cylindrical coordinates over the region.
fn f2_by_quadrature(d: f64) -> f64 {
    let n = 400;
    let mut acc = 0.0;
    let hz = d / n as f64;
    for iz in 0..n {
        let z = d + (iz as f64 + 0.5) * hz;
        let rmax = (d * d - (z - d).powi(2)).max(0.0).sqrt();
        let hr = rmax / n as f64;
        for ir in 0..n {
            let rho = (ir as f64 + 0.5) * hr;
            let r2 = rho * rho + z * z;
            let g = (3.0 * z * z / r2 - 1.0) / r2.powf(1.5);
            acc += g * g * 2.0 * std::f64::consts::PI * rho * hr * hz;
        }
    }
    acc
}

#[test]
fn f2_closed_form_against_quadrature_and_monte_carlo() {
    let d = 5e-9;
    let q = f2_by_quadrature(d);
    let f = f2_integral(d);
    assert!((f - q).abs() < 1e-3 * q, "{f} vs {q}");

    let mut rng = substream(4, tag::GEOMETRY, 0);
    let n = 10_000;
    let pts = sample_region_points(n, d, &mut rng);
    let scale = coupling_scale(GAMMA_1H);
    let sum: f64 = pts.iter().map(|p| (coupling_weight(p, GAMMA_1H) / scale).powi(2)).sum();
    let mc = sum / n as f64 * detection_volume(d);
    assert!((mc - q).abs() < 0.05 * q, "{mc} vs {q}");
}

#[test]
fn uniform_density_in_region() {
    // fraction of points in the lower half (z < 1.5 d) of the half-ball is 11/16
    let d = 5e-9;
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let pts = sample_region_points(40_000, d, &mut rng);
    let frac = pts.iter().filter(|p| p.z < 1.5 * d).count() as f64 / pts.len() as f64;
    assert!((frac - 11.0 / 16.0).abs() < 0.01);
    let _ = rng.random::<f64>();
}

#[test]
fn rigid_rotation_preserves_couplings_relative_to_rotated_field() {
    let cfg = GeometryConfig { pair_count: 1, ..Default::default() };
    let (_, pairs) = place_pairs(&cfg, &mut substream(9, tag::GEOMETRY, 0)).unwrap();
    let p = &pairs[0];
    let q = geom::axis_angle(&Vec3::new(0.2, 0.5, 1.0), 0.77);
    let pr = p.rotated(&q);
    let b = Vec3::new(0.1, -0.3, 0.9).normalize();
    let bq = q * b;
    for k in 0..2 {
        let s0 = secular_shift(&p.tensors[k], &b).unwrap();
        let s1 = secular_shift(&pr.tensors[k], &bq).unwrap();
        assert!((s0 - s1).abs() < 1e-9);
    }
    assert!((dipolar_secular(p, &b).unwrap() - dipolar_secular(&pr, &bq).unwrap()).abs() < 1e-9);
}
