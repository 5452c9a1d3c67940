//! Torque and state conversions between the serial ankle `(roll, pitch)` and the two motors.
//!
//! Positive motor torque drives `q_i` positive. Ankle torques are ordered like `chi`.

use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::geometry::{AnkleGeometry, AnklePose, AnkleRates};
use crate::kinematics::{fk_position, ik_position, jacobian, jacobian_pair, MotorState, DET_EPS};

/// Serial-side command: ankle torques, plus targets for position-mode baselines.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SerialAnkleCmd {
    pub tau_s: Vector2<f64>,
    pub chi_des: Option<AnklePose>,
    pub chi_dot_des: Option<Vector2<f64>>,
}

/// Parallel-side command: motor torques, plus targets when produced by a position loop.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct ParallelAnkleCmd {
    pub tau_p: Vector2<f64>,
    pub q_des: Option<Vector2<f64>>,
    pub q_dot_des: Option<Vector2<f64>>,
}

/// Closed-form inverse of a 2x2 matrix, refusing `|det| < DET_EPS`.
pub fn invert2(m: &Matrix2<f64>) -> Result<Matrix2<f64>> {
    let det = m[(0, 0)] * m[(1, 1)] - m[(0, 1)] * m[(1, 0)];
    if !(det.abs() >= DET_EPS) {
        return Err(Error::SingularConfiguration(format!("|det J| = {:.3e}", det.abs())));
    }
    Ok(Matrix2::new(m[(1, 1)], -m[(0, 1)], -m[(1, 0)], m[(0, 0)]) / det)
}

/// `tau_s = J^T tau_p`, the virtual-work image of motor torques at the ankle.
pub fn serial_torque_from_parallel(j: &Matrix2<f64>, tau_p: &Vector2<f64>) -> Vector2<f64> {
    j.tr_mul(tau_p)
}

/// `tau_p = J^-T tau_s`; fails near singular `J`, where no motor torque realises `tau_s`.
pub fn parallel_torque_from_serial(j: &Matrix2<f64>, tau_s: &Vector2<f64>) -> Result<Vector2<f64>> {
    Ok(invert2(j)?.tr_mul(tau_s))
}

/// Motor positions, rates and accelerations for a serial ankle state.
pub fn state_serial_to_parallel(
    geom: &AnkleGeometry,
    pose: &AnklePose,
    rates: &AnkleRates,
    prev: Option<&Vector2<f64>>,
) -> Result<MotorState> {
    let ik = ik_position(geom, pose, prev)?;
    let pair = jacobian_pair(geom, pose, &rates.chi_dot, &ik.q)?;
    Ok(MotorState {
        q: ik.q,
        q_dot: pair.j * rates.chi_dot,
        q_ddot: pair.j * rates.chi_ddot + pair.j_dot * rates.chi_dot,
    })
}

/// Serial pose and rate seen from the motors: forward kinematics, then `chi_dot = J^-1 q_dot`.
pub fn state_parallel_to_serial(
    geom: &AnkleGeometry,
    q: &Vector2<f64>,
    q_dot: &Vector2<f64>,
    guess: Option<&AnklePose>,
) -> Result<(AnklePose, Vector2<f64>)> {
    let pose = fk_position(geom, q, guess)?.pose;
    let j = jacobian(geom, &pose, q)?;
    Ok((pose, invert2(&j)? * q_dot))
}
