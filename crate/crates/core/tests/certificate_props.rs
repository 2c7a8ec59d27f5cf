use std::sync::OnceLock;

use nalgebra::{DVector, Vector2};
use proptest::prelude::*;
use shylab_core::certificates::*;
use shylab_core::geometry::ConvexDomain;

fn square_cert() -> &'static PlanarCertificate {
    static CERT: OnceLock<PlanarCertificate> = OnceLock::new();
    CERT.get_or_init(|| {
        let d = ConvexDomain::square(-1.0, 1.0).unwrap();
        match build_planar_certificate(&d, 0.5, 100.0, 1.5, None, 0.01).unwrap() {
            Certificate::Planar(c) => c,
            Certificate::Simple(_) => panic!("square should get a planar certificate"),
        }
    })
}

fn pt() -> impl Strategy<Value = DVector<f64>> {
    (-1.0f64..1.0, -1.0f64..1.0).prop_map(|(a, b)| DVector::from_vec(vec![a, b]))
}

fn pole() -> impl Strategy<Value = DVector<f64>> {
    (-5.0f64..5.0, 1.5f64..5.0).prop_map(|(a, b)| DVector::from_vec(vec![a, b]))
}

fn fd_grad(f: impl Fn(&DVector<f64>) -> f64, z: &DVector<f64>) -> DVector<f64> {
    let step = 1e-6;
    DVector::from_fn(z.len(), |i, _| {
        let mut hi = z.clone();
        let mut lo = z.clone();
        hi[i] += step;
        lo[i] -= step;
        (f(&hi) - f(&lo)) / (2.0 * step)
    })
}

proptest! {
    #[test]
    fn algebraic_forms_agree(p in pole(), x in pt(), y in pt(), delta in 0.0f64..1.0, s in 1.0f64..50.0) {
        prop_assert!((eval_v(&p, delta, &x, &y) - eval_v_inner(&p, delta, &x, &y)).abs() < 1e-12);
        prop_assert!((eval_vtilde(&p, delta, s, &x, &y) - eval_vtilde_norms(&p, delta, s, &x, &y)).abs() < 1e-12);
    }

    #[test]
    fn gradients_match_finite_differences(p in pole(), x in pt(), y in pt(), delta in 0.0f64..1.0, s in 1.0f64..50.0) {
        let (gx, gy) = grad_v(&p, delta, &x, &y);
        prop_assert!((gx - fd_grad(|z| eval_v(&p, delta, z, &y), &x)).amax() < 1e-6);
        prop_assert!((gy - fd_grad(|z| eval_v(&p, delta, &x, z), &y)).amax() < 1e-6);
        let (gx, gy) = grad_vtilde(&p, delta, s, &x, &y);
        prop_assert!((gx - fd_grad(|z| eval_vtilde(&p, delta, s, z, &y), &x)).amax() < 1e-6);
        prop_assert!((gy - fd_grad(|z| eval_vtilde(&p, delta, s, &x, z), &y)).amax() < 1e-6);
    }

    /// `u exp(-sqrt(u^2 + v^2)/S)` is nondecreasing in `u` while the radius
    /// stays below `S`.
    #[test]
    fn damping_is_monotone(s in 1.0f64..100.0, u1 in -0.7f64..0.7, u2 in -0.7f64..0.7, v in -0.7f64..0.7) {
        let f = |u: f64| u * (-(u * u + v * v).sqrt() / s).exp();
        let (lo, hi) = if u1 <= u2 { (u1, u2) } else { (u2, u1) };
        prop_assert!(f(lo * s) <= f(hi * s) + 1e-12);
    }

    #[test]
    fn psi_is_increasing_and_vanishes_at_zero(lambda in 0.1f64..10.0, log_c in 0.0f64..20.0, a in 0.0f64..2.0, b in 0.0f64..2.0) {
        prop_assert_eq!(eval_psi(log_c, lambda, 0.0).value, 0.0);
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        prop_assert!(eval_psi(log_c, lambda, lo).value <= eval_psi(log_c, lambda, hi).value);
    }

    /// With both points near one face, one on it and the other at most
    /// `eta` inside, the active term uses a pole of that face.
    #[test]
    fn active_pole_localizes(face in 0usize..4, t in 0.0f64..1.0, u in 0.0f64..1.0, off in 0.0f64..=1.0) {
        let c = square_cert();
        let seg = &c.segments[face];
        let inward = Vector2::new(-seg.direction.y, seg.direction.x);
        let inward = if c.domain.contains(&DVector::from_vec(vec![(seg.start + seg.end).x / 2.0 + 1e-3 * inward.x, (seg.start + seg.end).y / 2.0 + 1e-3 * inward.y])) { inward } else { -inward };
        let y = seg.start + seg.direction * (t * seg.length);
        let x = seg.start + seg.direction * (u * seg.length) + inward * (off * c.eta);
        prop_assume!((x - y).norm() >= c.epsilon);
        for (a, b) in [(x, y), (y, x)] {
            let (_, term) = c.phi_active(&a, &b);
            prop_assert_eq!(c.poles[term.pole].segment, face);
        }
    }
}

#[test]
fn square_certificate_verifies() {
    let c = square_cert();
    let report = c.report.as_ref().expect("built certificates carry a report");
    assert!(report.pass, "{report:?}");
    assert!(c.delta < c.delta_bounds.min());
    assert!(c.constants.log_c > c.constants.log_c_threshold());
    assert!(c.ratio_scan.as_ref().is_some_and(|r| r.min_ratio > 1.0));
}

/// A tenfold `delta` breaks the `xi` bound and is rejected on construction.
/// The grid sweep only sees a violation once `delta` also exceeds the other
/// bounds, which happens near a factor of 280.
#[test]
fn inflated_delta_fails_verification() {
    let c = square_cert();
    let d = &c.domain;
    assert!(matches!(
        PlanarCertificate::from_parts(d, c.epsilon, c.radius, c.sigma, c.center, c.eta, c.xi, 10.0 * c.delta, c.grid_spacing),
        Err(CertificateError::DeltaTooLarge { .. })
    ));
    let mut inflated = c.clone();
    inflated.delta *= 1000.0;
    let report = inflated.verify(c.grid_spacing).unwrap();
    assert!(!report.pass, "{report:?}");
}

#[test]
fn disc_certificate_survives_finer_grid() {
    let d = ConvexDomain::unit_disc();
    let p = DVector::from_vec(vec![2.0, 0.0]);
    let c = select_simple_certificate(&d, 0.5, &p, 0.01).unwrap();
    assert!(c.delta < c.delta_cap());
    let fine = c.verify(0.002).unwrap();
    assert!(fine.pass, "{fine:?}");
    let rebuilt = SimpleCertificate::from_parts(&d, p, c.delta, c.epsilon, c.grid_spacing).unwrap();
    assert_eq!(rebuilt.constants, c.constants);
}

/// The square's straight faces defeat the single-pole certificate.
#[test]
fn square_has_no_simple_certificate() {
    let d = ConvexDomain::square(-1.0, 1.0).unwrap();
    let p = DVector::from_vec(vec![3.0, 0.5]);
    assert!(matches!(select_simple_certificate(&d, 0.5, &p, 0.01), Err(CertificateError::NoFeasibleDelta { .. })));
}
