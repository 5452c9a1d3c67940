//! Inverse position, velocity and acceleration solutions of the two-crank ankle, the inverse
//! Jacobian `J` (with `q_dot = J chi_dot`), its time derivative, and Newton forward kinematics.

use std::f64::consts::{PI, TAU};

use nalgebra::{Matrix2, Matrix3, Matrix3x2, RowVector2, Vector2, Vector3};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::geometry::{
    angular_velocity_projection, angular_velocity_projection_rate, drive_base_point, hinge_point,
    AnkleGeometry, AnklePose, AnkleRates, Side,
};

/// `|(B_iC_i x C_iP_i)_y|` at or below this is treated as a singular transmission.
pub const TRANSMISSION_EPS: f64 = 1e-10;
/// `|det J|` below this marks a near-singular Jacobian.
pub const DET_EPS: f64 = 1e-8;

pub const FK_TOLERANCE: f64 = 1e-10;
pub const FK_MAX_ITERATIONS: usize = 50;
const FK_MAX_STEP: f64 = 0.5;

/// `a cos q + b sin q = c`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrigEquation {
    pub a: f64,
    pub b: f64,
    pub c: f64,
}

impl TrigEquation {
    pub fn new(a: f64, b: f64, c: f64) -> Self {
        Self { a, b, c }
    }

    pub fn discriminant(&self) -> f64 {
        self.a * self.a + self.b * self.b - self.c * self.c
    }

    pub fn is_feasible(&self) -> bool {
        self.discriminant() >= 0.0 && self.a.hypot(self.b) > 0.0
    }

    pub fn residual(&self, q: f64) -> f64 {
        let (s, c) = q.sin_cos();
        self.a * c + self.b * s - self.c
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize)]
pub enum Branch {
    Plus,
    Minus,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrigRoot {
    pub angle: f64,
    pub branch: Branch,
}

/// One or two roots; a tangent solution is reported once.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrigRoots {
    roots: [TrigRoot; 2],
    count: usize,
}

impl TrigRoots {
    pub fn as_slice(&self) -> &[TrigRoot] {
        &self.roots[..self.count]
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    pub fn angles(&self) -> Vec<f64> {
        self.as_slice().iter().map(|r| r.angle).collect()
    }
}

/// Wraps an angle into `(-pi, pi]`.
pub fn wrap_angle(x: f64) -> f64 {
    let y = (x + PI).rem_euclid(TAU) - PI;
    if y <= -PI {
        y + TAU
    } else {
        y
    }
}

/// Closed-form roots of `a cos q + b sin q = c` in `(-pi, pi]`.
///
/// With `R = hypot(a, b)` and `alpha = atan2(b, a)` the equation is `R cos(q - alpha) = c`,
/// so `q = alpha ± atan2(sqrt(a^2 + b^2 - c^2), c)`.
pub fn solve_trig(eq: &TrigEquation) -> Result<TrigRoots> {
    let disc = eq.discriminant();
    if !(disc >= 0.0) || eq.a.hypot(eq.b) == 0.0 {
        return Err(Error::Infeasible { discriminant: disc });
    }
    let alpha = eq.b.atan2(eq.a);
    let half = disc.sqrt().atan2(eq.c);
    let plus = TrigRoot {
        angle: wrap_angle(alpha + half),
        branch: Branch::Plus,
    };
    let minus = TrigRoot {
        angle: wrap_angle(alpha - half),
        branch: Branch::Minus,
    };
    let count = if half == 0.0 { 1 } else { 2 };
    Ok(TrigRoots {
        roots: [plus, minus],
        count,
    })
}

/// Loop-closure equation of one side at `pose`, coefficients read off the rod-length constraint.
pub fn loop_equation(geom: &AnkleGeometry, side: Side, pose: &AnklePose) -> TrigEquation {
    let p = hinge_point(geom, side, pose);
    let dz = p.z - geom.drive_height(side);
    let dy = p.y - side.sign() * geom.r1;
    TrigEquation {
        a: 2.0 * p.x * geom.l1,
        b: -2.0 * dz * geom.l1,
        c: p.x * p.x + dy * dy + dz * dz + geom.l1 * geom.l1 - geom.l2 * geom.l2,
    }
}

/// Crank tip `o'C_i` for motor angle `q`.
pub fn arm_tip(geom: &AnkleGeometry, side: Side, q: f64) -> Vector3<f64> {
    let (s, c) = q.sin_cos();
    Vector3::new(
        geom.l1 * c,
        side.sign() * geom.r1,
        geom.drive_height(side) - geom.l1 * s,
    )
}

/// Motor-space state of one ankle.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MotorState {
    pub q: Vector2<f64>,
    pub q_dot: Vector2<f64>,
    pub q_ddot: Vector2<f64>,
}

impl MotorState {
    pub fn at_rest(q: Vector2<f64>) -> Self {
        Self {
            q,
            ..Default::default()
        }
    }

    /// Angular velocity of crank `i` about the drive shaft, `(0, q_dot_i, 0)`.
    pub fn arm_angular_velocity(&self, side: Side) -> Vector3<f64> {
        Vector3::new(0.0, self.q_dot[side.index()], 0.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IkSolution {
    pub q: Vector2<f64>,
    pub branch: [Branch; 2],
    /// Largest `| |C_i - P_i| - L2 |` over both sides (m).
    pub residual: f64,
}

/// Position inverse solution.
///
/// Per side: feasibility, then roots inside the motor limits, then the root nearest to
/// `prev` (or to zero when there is no previous solution).
pub fn ik_position(
    geom: &AnkleGeometry,
    pose: &AnklePose,
    prev: Option<&Vector2<f64>>,
) -> Result<IkSolution> {
    if !pose.is_finite() || !geom.contains_pose(pose) {
        return Err(Error::OutOfBounds { pose: *pose });
    }
    let mut q = Vector2::zeros();
    let mut branch = [Branch::Plus; 2];
    let mut residual: f64 = 0.0;
    for side in Side::BOTH {
        let eq = loop_equation(geom, side, pose);
        let roots = solve_trig(&eq).map_err(|_| Error::Workspace { pose: *pose, side })?;
        let limits = geom.q_limit(side);
        let target = prev.map_or(0.0, |p| p[side.index()]);
        let chosen = roots
            .as_slice()
            .iter()
            .filter(|r| limits.contains(r.angle))
            .min_by(|x, y| {
                (x.angle - target)
                    .abs()
                    .total_cmp(&(y.angle - target).abs())
            })
            .ok_or_else(|| Error::Limit {
                side,
                roots: roots.angles(),
            })?;
        q[side.index()] = chosen.angle;
        branch[side.index()] = chosen.branch;
        let rod = (hinge_point(geom, side, pose) - arm_tip(geom, side, chosen.angle)).norm();
        residual = residual.max((rod - geom.l2).abs());
    }
    Ok(IkSolution {
        q,
        branch,
        residual,
    })
}

/// Points and vectors of one closed loop at a given pose and motor angle.
#[derive(Debug, Clone, Copy)]
pub struct LoopVectors {
    pub p: Vector3<f64>,
    pub b: Vector3<f64>,
    pub c: Vector3<f64>,
    pub bc: Vector3<f64>,
    pub cp: Vector3<f64>,
    /// `(B_iC_i x C_iP_i)_y`.
    pub transmission: f64,
}

impl LoopVectors {
    pub fn new(geom: &AnkleGeometry, side: Side, pose: &AnklePose, q: f64) -> Self {
        let p = hinge_point(geom, side, pose);
        let b = drive_base_point(geom, side);
        let c = arm_tip(geom, side, q);
        let bc = c - b;
        let cp = p - c;
        let transmission = bc.z * cp.x - bc.x * cp.z;
        Self {
            p,
            b,
            c,
            bc,
            cp,
            transmission,
        }
    }

    /// Direction of the crank-tip velocity per unit `q_dot`: `(BC_z, 0, -BC_x)`.
    pub fn tip_direction(&self) -> Vector3<f64> {
        Vector3::new(self.bc.z, 0.0, -self.bc.x)
    }

    fn check(&self, side: Side) -> Result<()> {
        if self.transmission.abs() <= TRANSMISSION_EPS || !self.transmission.is_finite() {
            return Err(Error::SingularConfiguration(format!(
                "{side} rod is aligned with its crank ((BC x CP)_y = {:.3e})",
                self.transmission
            )));
        }
        Ok(())
    }
}

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(
        0.0, -v.z, v.y, //
        v.z, 0.0, -v.x, //
        -v.y, v.x, 0.0,
    )
}

/// `R_P = [-o'P]_x R_w`, so that the hinge velocity is `R_P chi_dot`.
pub fn hinge_rate_matrix(p: &Vector3<f64>, pose: &AnklePose) -> Matrix3x2<f64> {
    skew(&-p) * angular_velocity_projection(pose)
}

/// Entry-wise expansion of the hinge-velocity matrix for a rotation `r_xy` whose second
/// column carries the pitch axis and whose roll axis is the fixed `e_x`.
///
/// This equals `[-p]_x [e_x | r_xy e_y]`, the hinge-velocity matrix of the roll-then-pitch
/// composition `R_X(phi) R_Y(theta)`. For the pitch-then-roll orientation used everywhere
/// else in this crate it only coincides with [`hinge_rate_matrix`] at the neutral pose.
pub fn hinge_rate_matrix_expanded(p: &Vector3<f64>, r_xy: &Matrix3<f64>) -> Matrix3x2<f64> {
    let r = |i: usize, j: usize| r_xy[(i - 1, j - 1)];
    Matrix3x2::new(
        0.0,
        r(2, 2) * p.z - r(3, 2) * p.y,
        -p.z,
        -r(1, 2) * p.z + r(3, 2) * p.x,
        p.y,
        r(1, 2) * p.y - r(2, 2) * p.x,
    )
}

/// Velocity/acceleration matrices of one loop.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointRates {
    pub r_p: Matrix3x2<f64>,
    pub r_p_dot: Matrix3x2<f64>,
    pub r_c: Matrix3x2<f64>,
    pub r_c_dot: Matrix3x2<f64>,
    pub j_row: RowVector2<f64>,
    pub j_dot_row: RowVector2<f64>,
}

/// Hinge and crank-tip rate matrices of `side`, together with the matching rows of `J`
/// and `J_dot`.
///
/// `q` must be the motor angle solving the loop at `pose`; `q_dot` is formed internally
/// as `J_i chi_dot`.
pub fn point_rate_matrices(
    geom: &AnkleGeometry,
    side: Side,
    pose: &AnklePose,
    chi_dot: &Vector2<f64>,
    q: f64,
) -> Result<PointRates> {
    let lv = LoopVectors::new(geom, side, pose, q);
    lv.check(side)?;
    let r_w = angular_velocity_projection(pose);
    let r_w_dot = angular_velocity_projection_rate(pose, chi_dot);
    let r_p = skew(&-lv.p) * r_w;
    let v_p = r_p * chi_dot;
    let r_p_dot = -skew(&lv.p) * r_w_dot - skew(&v_p) * r_w;

    let inv_t = 1.0 / lv.transmission;
    let j_row = lv.cp.transpose() * r_p * inv_t;
    let q_dot = (j_row * chi_dot)[0];
    let u = lv.tip_direction();
    let r_c = u * j_row;

    let rel = r_p - r_c;
    let rel_v = rel * chi_dot;
    let j_dot_row = (lv.cp.transpose() * r_p_dot
        + lv.cp.dot(&lv.bc) * q_dot * j_row
        + rel_v.transpose() * rel)
        * inv_t;
    let r_c_dot = u * j_dot_row - lv.bc * (q_dot * j_row);

    Ok(PointRates {
        r_p,
        r_p_dot,
        r_c,
        r_c_dot,
        j_row,
        j_dot_row,
    })
}

/// Inverse Jacobian `J` with `q_dot = J chi_dot`.
///
/// Row `i` is `C_iP_i^T R_P / (B_iC_i x C_iP_i)_y`: the rod is rigid, so both of its end
/// velocities project equally onto it.
pub fn jacobian(geom: &AnkleGeometry, pose: &AnklePose, q: &Vector2<f64>) -> Result<Matrix2<f64>> {
    let mut j = Matrix2::zeros();
    for side in Side::BOTH {
        let lv = LoopVectors::new(geom, side, pose, q[side.index()]);
        lv.check(side)?;
        let row = lv.cp.transpose() * hinge_rate_matrix(&lv.p, pose) / lv.transmission;
        j.set_row(side.index(), &row);
    }
    Ok(j)
}

/// `J` and `J_dot` at one state.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JacobianPair {
    pub j: Matrix2<f64>,
    pub j_dot: Matrix2<f64>,
}

impl JacobianPair {
    pub fn det(&self) -> f64 {
        self.j.determinant()
    }

    pub fn near_singular(&self) -> bool {
        self.det().abs() < DET_EPS
    }
}

pub fn jacobian_pair(
    geom: &AnkleGeometry,
    pose: &AnklePose,
    chi_dot: &Vector2<f64>,
    q: &Vector2<f64>,
) -> Result<JacobianPair> {
    let mut j = Matrix2::zeros();
    let mut j_dot = Matrix2::zeros();
    for side in Side::BOTH {
        let rates = point_rate_matrices(geom, side, pose, chi_dot, q[side.index()])?;
        j.set_row(side.index(), &rates.j_row);
        j_dot.set_row(side.index(), &rates.j_dot_row);
    }
    Ok(JacobianPair { j, j_dot })
}

/// Time derivative of `J` along `chi_dot`.
pub fn jacobian_dot(
    geom: &AnkleGeometry,
    pose: &AnklePose,
    chi_dot: &Vector2<f64>,
    q: &Vector2<f64>,
) -> Result<Matrix2<f64>> {
    jacobian_pair(geom, pose, chi_dot, q).map(|p| p.j_dot)
}

pub fn ik_velocity(j: &Matrix2<f64>, chi_dot: &Vector2<f64>) -> Vector2<f64> {
    j * chi_dot
}

/// `q_ddot = J chi_ddot + J_dot chi_dot`.
pub fn ik_acceleration(j: &Matrix2<f64>, j_dot: &Matrix2<f64>, rates: &AnkleRates) -> Vector2<f64> {
    j * rates.chi_ddot + j_dot * rates.chi_dot
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FkSolution {
    pub pose: AnklePose,
    pub iterations: usize,
    /// Largest loop residual expressed as a motor-angle error (rad).
    pub residual: f64,
}

/// Half squared-length loop residuals and their motor-angle equivalents.
fn fk_residual(geom: &AnkleGeometry, q: &Vector2<f64>, pose: &AnklePose) -> (Vector2<f64>, Matrix2<f64>, f64) {
    let mut r = Vector2::zeros();
    let mut m = Matrix2::zeros();
    let mut q_err: f64 = 0.0;
    for side in Side::BOTH {
        let i = side.index();
        let lv = LoopVectors::new(geom, side, pose, q[i]);
        r[i] = 0.5 * (lv.cp.norm_squared() - geom.l2 * geom.l2);
        m.set_row(i, &(lv.cp.transpose() * hinge_rate_matrix(&lv.p, pose)));
        // d r_i / d q_i = -(BC x CP)_y
        let equiv = if lv.transmission.abs() > TRANSMISSION_EPS {
            (r[i] / lv.transmission).abs()
        } else {
            f64::INFINITY
        };
        q_err = q_err.max(equiv);
    }
    (r, m, q_err)
}

/// Forward kinematics by Newton iteration on the two loop-closure residuals in `chi`.
///
/// Converges when the residual, expressed as a motor-angle error, drops below
/// [`FK_TOLERANCE`]. `guess` defaults to the neutral pose.
pub fn fk_position(
    geom: &AnkleGeometry,
    q: &Vector2<f64>,
    guess: Option<&AnklePose>,
) -> Result<FkSolution> {
    let mut pose = guess.copied().unwrap_or(AnklePose::ZERO);
    let mut best = FkSolution {
        pose,
        iterations: 0,
        residual: f64::INFINITY,
    };
    for iteration in 0..=FK_MAX_ITERATIONS {
        let (r, m, q_err) = fk_residual(geom, q, &pose);
        if q_err < best.residual {
            best = FkSolution {
                pose,
                iterations: iteration,
                residual: q_err,
            };
        }
        if q_err < FK_TOLERANCE {
            return Ok(FkSolution {
                pose,
                iterations: iteration,
                residual: q_err,
            });
        }
        if iteration == FK_MAX_ITERATIONS {
            break;
        }
        let det = m.determinant();
        let scale = m.amax().max(f64::MIN_POSITIVE);
        if !(det.abs() > 1e-12 * scale * scale) {
            if iteration == 0 {
                return Err(Error::SingularConfiguration(format!(
                    "loop-closure Jacobian is singular at phi={:.6}, theta={:.6}",
                    pose.phi, pose.theta
                )));
            }
            break;
        }
        let inv = Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det;
        let mut step = -(inv * r);
        let len = step.amax();
        if len > FK_MAX_STEP {
            step *= FK_MAX_STEP / len;
        }
        let next = pose.to_vector() + step;
        if !next.iter().all(|v| v.is_finite()) {
            break;
        }
        pose = AnklePose::from_vector(&next);
    }
    Err(Error::NoConvergence {
        best: best.pose,
        residual: best.residual,
        iterations: FK_MAX_ITERATIONS,
    })
}

/// Element-wise [`ik_position`] over a batch of poses (cold start for each).
pub fn ik_position_batch(geom: &AnkleGeometry, poses: &[AnklePose]) -> Vec<Result<IkSolution>> {
    poses.par_iter().map(|p| ik_position(geom, p, None)).collect()
}

/// Element-wise [`ik_position`] followed by [`jacobian`].
pub fn jacobian_batch(geom: &AnkleGeometry, poses: &[AnklePose]) -> Vec<Result<Matrix2<f64>>> {
    poses
        .par_iter()
        .map(|p| ik_position(geom, p, None).and_then(|s| jacobian(geom, p, &s.q)))
        .collect()
}
