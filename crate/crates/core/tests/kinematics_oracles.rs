//! Kinematics checked against independent numerical oracles: bisection root finding on the
//! rod length, central finite differences, and golden values frozen from those oracles.

use lips_core::geometry::{
    angular_velocity_projection, basic_rotation, hinge_point, AnkleGeometry, AnklePose, AnkleRates,
    Axis, Side,
};
use lips_core::kinematics::{
    arm_tip, fk_position, hinge_rate_matrix, hinge_rate_matrix_expanded, ik_acceleration,
    ik_position, ik_velocity, jacobian, jacobian_dot, jacobian_pair, point_rate_matrices,
    solve_trig, TrigEquation,
};
use nalgebra::{Matrix2, Matrix3, Matrix3x2, Vector2, Vector3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn fixture() -> AnkleGeometry {
    AnkleGeometry::fixture()
}

/// Motor angle closing one loop, found by scanning and bisecting the rod-length error.
/// Uses only the point positions, never the trig closed form.
fn bisect_motor_angle(geom: &AnkleGeometry, side: Side, pose: &AnklePose) -> f64 {
    let p = hinge_point(geom, side, pose);
    let f = |q: f64| (arm_tip(geom, side, q) - p).norm() - geom.l2;
    let n = 2400;
    let (lo, hi) = (geom.q_limit(side).lower, geom.q_limit(side).upper);
    let mut best: Option<f64> = None;
    for k in 0..n {
        let mut a = lo + (hi - lo) * k as f64 / n as f64;
        let mut b = lo + (hi - lo) * (k + 1) as f64 / n as f64;
        let (fa, fb) = (f(a), f(b));
        if fa == 0.0 || fa * fb < 0.0 {
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if f(a) * f(m) <= 0.0 {
                    b = m;
                } else {
                    a = m;
                }
            }
            let root = 0.5 * (a + b);
            if best.map_or(true, |r: f64| root.abs() < r.abs()) {
                best = Some(root);
            }
        }
    }
    best.expect("loop closes inside the limits")
}

fn bisect_ik(geom: &AnkleGeometry, pose: &AnklePose) -> Vector2<f64> {
    Vector2::new(
        bisect_motor_angle(geom, Side::One, pose),
        bisect_motor_angle(geom, Side::Two, pose),
    )
}

fn ik_q(geom: &AnkleGeometry, pose: &AnklePose) -> Vector2<f64> {
    ik_position(geom, pose, None).unwrap().q
}

/// Central-difference Jacobian of the position inverse solution, step `h` in radians.
fn fd_jacobian(geom: &AnkleGeometry, pose: &AnklePose, h: f64) -> Matrix2<f64> {
    let d_phi = (ik_q(geom, &AnklePose::new(pose.phi + h, pose.theta))
        - ik_q(geom, &AnklePose::new(pose.phi - h, pose.theta)))
        / (2.0 * h);
    let d_theta = (ik_q(geom, &AnklePose::new(pose.phi, pose.theta + h))
        - ik_q(geom, &AnklePose::new(pose.phi, pose.theta - h)))
        / (2.0 * h);
    Matrix2::from_columns(&[d_phi, d_theta])
}

fn random_pose(geom: &AnkleGeometry, rng: &mut impl Rng, margin: f64) -> AnklePose {
    let [roll, pitch] = geom.chi_limits;
    AnklePose::new(
        rng.random_range(roll.lower + margin..roll.upper - margin),
        rng.random_range(pitch.lower + margin..pitch.upper - margin),
    )
}

fn skew_vector(m: &Matrix3<f64>) -> Vector3<f64> {
    Vector3::new(m[(2, 1)] - m[(1, 2)], m[(0, 2)] - m[(2, 0)], m[(1, 0)] - m[(0, 1)]) * 0.5
}

#[test]
fn hinge_point_matches_frozen_value() {
    // numpy: R_Y(-0.1) @ R_X(0.2) @ [0.055, 0.045, 0.04]
    let expected = Vector3::new(0.04991897057657174, 0.036156222771053424, 0.05339310752808196);
    let p = hinge_point(&fixture(), Side::One, &AnklePose::new(0.2, -0.1));
    assert!((p - expected).amax() < 1e-15, "{p}");
}

#[test]
fn trig_roots_match_scan_oracle() {
    let eq = TrigEquation::new(0.3, -0.4, 0.2);
    let roots = solve_trig(&eq).unwrap().angles();
    // sign changes on a 1e-6 grid over (-pi, pi]
    let n = (2.0 * std::f64::consts::PI / 1e-6) as usize;
    let mut found = Vec::new();
    let mut prev_q = -std::f64::consts::PI;
    let mut prev_f = eq.residual(prev_q);
    for k in 1..=n {
        let q = -std::f64::consts::PI + k as f64 * 1e-6;
        let f = eq.residual(q);
        if prev_f * f <= 0.0 {
            found.push(0.5 * (prev_q + q));
        }
        prev_q = q;
        prev_f = f;
    }
    assert_eq!(found.len(), 2);
    for r in &roots {
        assert!(found.iter().any(|s| (s - r).abs() < 1e-6), "root {r} not in {found:?}");
    }
}

#[test]
fn ik_matches_bisection_oracle() {
    let g = fixture();
    let pose = AnklePose::new(0.2, -0.3);
    // frozen from an independent numpy bisection of the rod-length error
    let frozen = Vector2::new(-0.45696166730693877, -0.10105972402294797);
    let sol = ik_position(&g, &pose, None).unwrap();
    assert!((sol.q - frozen).amax() < 1e-12, "{}", sol.q);
    assert!((sol.q - bisect_ik(&g, &pose)).amax() < 1e-12);
    assert!(sol.residual < 1e-12);
}

#[test]
fn ik_matches_bisection_on_random_poses() {
    let g = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let pose = random_pose(&g, &mut rng, 0.0);
        let q = ik_q(&g, &pose);
        assert!((q - bisect_ik(&g, &pose)).amax() < 1e-11, "{pose:?}");
    }
}

#[test]
fn jacobian_at_zero_matches_golden() {
    // central differences (h = 1e-6) of the numpy bisection oracle
    let golden = Matrix2::new(
        -0.9000000000815127,
        1.115384615779878,
        0.9000000000815127,
        1.115384615779878,
    );
    let j = jacobian(&fixture(), &AnklePose::ZERO, &Vector2::zeros()).unwrap();
    assert!((j - golden).amax() < 1e-8, "{j}");
    // closed form at the neutral pose: roll -0.0117/0.013, pitch 0.0145/0.013
    assert!((j[(0, 0)] + 0.9).abs() < 1e-12);
    assert!((j[(0, 1)] - 0.0145 / 0.013).abs() < 1e-12);
}

#[test]
fn jacobian_matches_finite_differences() {
    let g = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let pose = random_pose(&g, &mut rng, 1e-6);
        let j = jacobian(&g, &pose, &ik_q(&g, &pose)).unwrap();
        worst = worst.max((j - fd_jacobian(&g, &pose, 1e-6)).amax());
    }
    assert!(worst < 1e-5, "max |J - J_fd| = {worst:e}");
}

#[test]
fn velocity_matches_directional_difference() {
    let g = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let h = 1e-5;
    for _ in 0..200 {
        let pose = random_pose(&g, &mut rng, 0.01);
        let chi_dot = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let j = jacobian(&g, &pose, &ik_q(&g, &pose)).unwrap();
        let fwd = AnklePose::from_vector(&(pose.to_vector() + h * chi_dot));
        let back = AnklePose::from_vector(&(pose.to_vector() - h * chi_dot));
        let fd = (ik_q(&g, &fwd) - ik_q(&g, &back)) / (2.0 * h);
        assert!((ik_velocity(&j, &chi_dot) - fd).amax() < 1e-7);
    }
}

#[test]
fn jacobian_dot_at_zero_matches_golden() {
    // numpy: (J_fd(h chi_dot) - J_fd(-h chi_dot)) / 2h, h = 1e-4, bisection IK
    let golden = Matrix2::new(
        0.4699268776980903,
        -0.2787631260681156,
        0.468725058961339,
        -0.27677027317984937,
    );
    let jd = jacobian_dot(&fixture(), &AnklePose::ZERO, &Vector2::new(0.5, -0.3), &Vector2::zeros())
        .unwrap();
    assert!((jd - golden).amax() < 1e-5, "{jd}");
}

#[test]
fn jacobian_dot_matches_trajectory_differences() {
    let g = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let h = 1e-5;
    for _ in 0..100 {
        let pose = random_pose(&g, &mut rng, 0.05);
        let chi_dot = Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let q = ik_q(&g, &pose);
        let jd = jacobian_dot(&g, &pose, &chi_dot, &q).unwrap();
        let at = |t: f64| {
            let p = AnklePose::from_vector(&(pose.to_vector() + t * chi_dot));
            jacobian(&g, &p, &ik_q(&g, &p)).unwrap()
        };
        let fd = (at(h) - at(-h)) / (2.0 * h);
        assert!((jd - fd).amax() < 1e-4, "{pose:?} {chi_dot}");
    }
}

#[test]
fn angular_velocity_projection_matches_rotation_derivative() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let h = 1e-6;
    for _ in 0..1000 {
        let pose = AnklePose::new(rng.random_range(-1.0..1.0), rng.random_range(-1.5..1.5));
        let chi_dot = Vector2::new(rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let at = |t: f64| AnklePose::from_vector(&(pose.to_vector() + t * chi_dot)).rotation();
        let r_dot = (at(h) - at(-h)) / (2.0 * h);
        let omega_fd = skew_vector(&(r_dot * pose.rotation().transpose()));
        let omega = angular_velocity_projection(&pose) * chi_dot;
        let rel = (omega - omega_fd).norm() / omega.norm().max(1e-3);
        assert!(rel < 1e-6, "{pose:?}: {rel:e}");
    }
}

#[test]
fn hinge_velocity_matches_finite_differences() {
    let g = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let h = 1e-6;
    for _ in 0..200 {
        let pose = random_pose(&g, &mut rng, 0.0);
        let chi_dot = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let q = ik_q(&g, &pose);
        for side in Side::BOTH {
            let rates = point_rate_matrices(&g, side, &pose, &chi_dot, q[side.index()]).unwrap();
            let at = |t: f64| hinge_point(&g, side, &AnklePose::from_vector(&(pose.to_vector() + t * chi_dot)));
            let fd = (at(h) - at(-h)) / (2.0 * h);
            assert!((rates.r_p * chi_dot - fd).amax() < 1e-9);
        }
    }
}

#[test]
fn point_acceleration_matrices_match_finite_differences() {
    let g = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = 1e-5;
    for _ in 0..100 {
        let pose = random_pose(&g, &mut rng, 0.05);
        let chi_dot = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let q = ik_q(&g, &pose);
        for side in Side::BOTH {
            let i = side.index();
            let rates = point_rate_matrices(&g, side, &pose, &chi_dot, q[i]).unwrap();
            let at = |t: f64| {
                let p = AnklePose::from_vector(&(pose.to_vector() + t * chi_dot));
                point_rate_matrices(&g, side, &p, &chi_dot, ik_q(&g, &p)[i]).unwrap()
            };
            let (fwd, back) = (at(h), at(-h));
            let rp_dot = (fwd.r_p - back.r_p) / (2.0 * h);
            let rc_dot = (fwd.r_c - back.r_c) / (2.0 * h);
            assert!((rates.r_p_dot - rp_dot).amax() < 1e-7);
            assert!((rates.r_c_dot - rc_dot).amax() < 1e-6);
            // crank-tip velocity from R_C equals the tip motion under q_dot
            let q_dot = (rates.j_row * chi_dot)[0];
            let tip_fd = (arm_tip(&g, side, q[i] + h * q_dot) - arm_tip(&g, side, q[i] - h * q_dot)) / (2.0 * h);
            assert!((rates.r_c * chi_dot - tip_fd).amax() < 1e-8);
        }
    }
}

#[test]
fn expanded_hinge_matrix_is_roll_then_pitch_form() {
    let g = fixture();
    // identical to the cross-product form at the neutral pose
    let p = hinge_point(&g, Side::One, &AnklePose::ZERO);
    let r = AnklePose::ZERO.rotation();
    assert!((hinge_rate_matrix_expanded(&p, &r) - hinge_rate_matrix(&p, &AnklePose::ZERO)).amax() < 1e-15);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let h = 1e-6;
    for _ in 0..200 {
        let (phi, theta) = (rng.random_range(-0.4..0.4), rng.random_range(-0.7..0.35));
        let chi_dot = Vector2::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
        let compose = |a: f64, b: f64| basic_rotation(Axis::X, a) * basic_rotation(Axis::Y, b);
        let r_xy = compose(phi, theta);
        let p = r_xy * g.p1_neutral;
        let m = hinge_rate_matrix_expanded(&p, &r_xy);
        // algebraic identity with [-p]_x [e_x | R_XY e_y]
        let cols = Matrix3x2::from_columns(&[Vector3::x(), r_xy.column(1).into_owned()]);
        let cross = Matrix3::new(0.0, p.z, -p.y, -p.z, 0.0, p.x, p.y, -p.x, 0.0) * cols;
        assert!((m - cross).amax() < 1e-12);
        // and it is the velocity of the hinge under that composition
        let fd = (compose(phi + h * chi_dot[0], theta + h * chi_dot[1]) * g.p1_neutral
            - compose(phi - h * chi_dot[0], theta - h * chi_dot[1]) * g.p1_neutral)
            / (2.0 * h);
        assert!((m * chi_dot - fd).amax() < 1e-10);
    }
}

/// Quintic rest-to-rest blend between two poses over `[0, 1]`.
fn quintic(start: Vector2<f64>, end: Vector2<f64>, t: f64) -> (Vector2<f64>, Vector2<f64>, Vector2<f64>) {
    let s = 10.0 * t.powi(3) - 15.0 * t.powi(4) + 6.0 * t.powi(5);
    let ds = 30.0 * t.powi(2) - 60.0 * t.powi(3) + 30.0 * t.powi(4);
    let dds = 60.0 * t - 180.0 * t.powi(2) + 120.0 * t.powi(3);
    let d = end - start;
    (start + s * d, ds * d, dds * d)
}

#[test]
fn acceleration_matches_second_differences_on_quintics() {
    let g = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let a = random_pose(&g, &mut rng, 0.01).to_vector();
        let b = random_pose(&g, &mut rng, 0.01).to_vector();
        let mut prev: Option<Vector2<f64>> = None;
        for k in 1..50 {
            let t = k as f64 / 50.0;
            let (chi, chi_dot, chi_ddot) = quintic(a, b, t);
            let pose = AnklePose::from_vector(&chi);
            let sol = ik_position(&g, &pose, prev.as_ref()).unwrap();
            prev = Some(sol.q);
            let pair = jacobian_pair(&g, &pose, &chi_dot, &sol.q).unwrap();
            let q_ddot = ik_acceleration(&pair.j, &pair.j_dot, &AnkleRates::new(chi_dot, chi_ddot));
            let q_at = |dt: f64| ik_q(&g, &AnklePose::from_vector(&quintic(a, b, t + dt).0));
            let fd = (q_at(h) - 2.0 * sol.q + q_at(-h)) / (h * h);
            worst = worst.max((q_ddot - fd).amax());
        }
    }
    assert!(worst < 1e-3, "max |q_ddot - fd| = {worst:e}");
}

#[test]
fn forward_kinematics_round_trip_on_grid() {
    let g = fixture();
    let mut worst: f64 = 0.0;
    let mut max_iter = 0;
    for phi in g.chi_limits[0].grid(41) {
        for theta in g.chi_limits[1].grid(41) {
            let pose = AnklePose::new(phi, theta);
            let q = ik_q(&g, &pose);
            let fk = fk_position(&g, &q, None).unwrap();
            worst = worst.max((fk.pose.to_vector() - pose.to_vector()).amax());
            max_iter = max_iter.max(fk.iterations);
        }
    }
    assert!(worst < 1e-8, "round trip error {worst:e}");
    assert!(max_iter <= 8, "Newton needed {max_iter} iterations");
}

#[test]
fn continuity_with_prev_chaining() {
    let g = fixture();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..20 {
        let a = random_pose(&g, &mut rng, 0.0).to_vector();
        let b = random_pose(&g, &mut rng, 0.0).to_vector();
        let steps = ((b - a).amax() / 0.01).ceil() as usize + 1;
        let mut prev: Option<Vector2<f64>> = None;
        for k in 0..=steps {
            let chi = a + (b - a) * (k as f64 / steps as f64);
            let q = ik_position(&g, &AnklePose::from_vector(&chi), prev.as_ref()).unwrap().q;
            if let Some(p) = prev {
                assert!((q - p).amax() <= 0.1);
            }
            prev = Some(q);
        }
    }
}

proptest! {
    #[test]
    fn rotations_are_proper(angle in -10.0f64..10.0) {
        for axis in [Axis::X, Axis::Y] {
            let r = basic_rotation(axis, angle);
            prop_assert!((r.transpose() * r - Matrix3::identity()).amax() < 1e-13);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-13);
        }
    }

    #[test]
    fn hinge_point_preserves_norm(phi in -3.0f64..3.0, theta in -3.0f64..3.0) {
        let g = fixture();
        for side in Side::BOTH {
            let p = hinge_point(&g, side, &AnklePose::new(phi, theta));
            prop_assert!((p.norm() - g.neutral_hinge(side).norm()).abs() < 1e-12);
        }
    }

    #[test]
    fn ik_closes_both_rods(phi in -0.4f64..=0.4, theta in -0.7f64..=0.35) {
        let g = fixture();
        let pose = AnklePose::new(phi, theta);
        let sol = ik_position(&g, &pose, None).unwrap();
        prop_assert!(sol.residual < 1e-9);
        for side in Side::BOTH {
            let rod = (hinge_point(&g, side, &pose) - arm_tip(&g, side, sol.q[side.index()])).norm();
            prop_assert!((rod - g.l2).abs() < 1e-9);
        }
    }

    #[test]
    fn ik_branch_is_deterministic(phi in -0.4f64..=0.4, theta in -0.7f64..=0.35, p0 in -1.0f64..1.0, p1 in -1.0f64..1.0) {
        let g = fixture();
        let pose = AnklePose::new(phi, theta);
        let prev = Vector2::new(p0, p1);
        let a = ik_position(&g, &pose, Some(&prev)).unwrap();
        let b = ik_position(&g, &pose, Some(&prev)).unwrap();
        prop_assert_eq!(a, b);
    }
}
