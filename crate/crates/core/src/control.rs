//! PD control, the parallel-in-the-loop training and deployment steps, and the
//! series-to-parallel and passive deployment baselines.
//!
//! Policies run at the control rate and hold their output; the step functions here are the
//! motor-side loops that turn a held command into motor torques.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use nalgebra::{Matrix2, Vector2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{AnkleGeometry, AnklePose, AnkleRates};
use crate::kinematics::{fk_position, ik_position, jacobian};
use crate::mapping::{
    invert2, parallel_torque_from_serial, serial_torque_from_parallel, state_serial_to_parallel,
};

/// Per-joint PD gains with a symmetric torque clamp.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PdGains {
    pub kp: [f64; 2],
    pub kd: [f64; 2],
    pub tau_limit: f64,
}

impl Default for PdGains {
    fn default() -> Self {
        Self {
            kp: [30.0, 30.0],
            kd: [1.5, 1.5],
            tau_limit: 60.0,
        }
    }
}

impl PdGains {
    /// Damping-only motor gains of the passive-ankle baseline.
    pub fn passive() -> Self {
        Self {
            kp: [0.0, 0.0],
            kd: [10.0, 10.0],
            tau_limit: 60.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.kp.iter().chain(&self.kd).all(|g| g.is_finite() && *g >= 0.0)
            && self.tau_limit.is_finite()
            && self.tau_limit > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Schema(format!("invalid PD gains {self:?}")))
        }
    }

    fn kp(&self) -> Vector2<f64> {
        Vector2::from(self.kp)
    }

    fn kd(&self) -> Vector2<f64> {
        Vector2::from(self.kd)
    }
}

/// `kp (q_des - q) + kd (q_dot_des - q_dot)`, clamped element-wise to `±tau_limit`.
pub fn pd_torque(
    gains: &PdGains,
    q_des: &Vector2<f64>,
    q_dot_des: &Vector2<f64>,
    q_meas: &Vector2<f64>,
    q_dot_meas: &Vector2<f64>,
) -> Vector2<f64> {
    let raw = gains.kp().component_mul(&(q_des - q_meas)) + gains.kd().component_mul(&(q_dot_des - q_dot_meas));
    raw.map(|t| t.clamp(-gains.tau_limit, gains.tau_limit))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Method {
    #[serde(rename = "lips")]
    Lips,
    #[serde(rename = "s2p-torque")]
    S2pTorque,
    #[serde(rename = "s2p-position")]
    S2pPosition,
    #[serde(rename = "passive")]
    Passive,
}

impl Method {
    pub const ALL: [Method; 4] = [Method::Lips, Method::S2pTorque, Method::S2pPosition, Method::Passive];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Lips => "lips",
            Method::S2pTorque => "s2p-torque",
            Method::S2pPosition => "s2p-position",
            Method::Passive => "passive",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| Error::Schema(format!("unknown method '{s}' (expected lips, s2p-torque, s2p-position or passive)")))
    }
}

/// Number of analytic kinematic solves (IK, FK or Jacobian) a controller performed.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SolveCounter(pub u64);

impl SolveCounter {
    pub fn add(&mut self, n: u64) {
        self.0 += n;
    }

    pub fn take(&mut self) -> u64 {
        std::mem::take(&mut self.0)
    }
}

/// Reference trajectory in ankle space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum ReferenceSpec {
    /// `offset + amplitude * sin(2 pi f t + phase)` per axis.
    Sinusoid {
        amplitude: [f64; 2],
        frequency: f64,
        #[serde(default)]
        phase: [f64; 2],
        #[serde(default)]
        offset: [f64; 2],
    },
    /// Linear chirp sweeping `f0 -> f1` Hz over `sweep` seconds, then holding `f1`.
    Chirp {
        amplitude: [f64; 2],
        f0: f64,
        f1: f64,
        sweep: f64,
        #[serde(default)]
        offset: [f64; 2],
    },
}

impl Default for ReferenceSpec {
    fn default() -> Self {
        ReferenceSpec::Sinusoid {
            amplitude: [0.0, 0.2],
            frequency: 0.5,
            phase: [0.0, 0.0],
            offset: [0.0, 0.0],
        }
    }
}

impl ReferenceSpec {
    pub fn zero() -> Self {
        ReferenceSpec::Sinusoid {
            amplitude: [0.0, 0.0],
            frequency: 0.0,
            phase: [0.0, 0.0],
            offset: [0.0, 0.0],
        }
    }

    /// Reference pose, rate and acceleration at time `t`.
    pub fn sample(&self, t: f64) -> (AnklePose, AnkleRates) {
        let mut chi = [0.0; 2];
        let mut chi_dot = [0.0; 2];
        let mut chi_ddot = [0.0; 2];
        match *self {
            ReferenceSpec::Sinusoid {
                amplitude,
                frequency,
                phase,
                offset,
            } => {
                let w = TAU * frequency;
                for k in 0..2 {
                    let (s, c) = (w * t + phase[k]).sin_cos();
                    chi[k] = offset[k] + amplitude[k] * s;
                    chi_dot[k] = amplitude[k] * w * c;
                    chi_ddot[k] = -amplitude[k] * w * w * s;
                }
            }
            ReferenceSpec::Chirp {
                amplitude,
                f0,
                f1,
                sweep,
                offset,
            } => {
                // phase(t) = 2 pi (f0 t + k t^2 / 2) during the sweep
                let k_rate = if sweep > 0.0 { (f1 - f0) / sweep } else { 0.0 };
                let (arg, w, w_dot) = if t <= sweep {
                    (TAU * (f0 * t + 0.5 * k_rate * t * t), TAU * (f0 + k_rate * t), TAU * k_rate)
                } else {
                    let end = TAU * (f0 * sweep + 0.5 * k_rate * sweep * sweep);
                    (end + TAU * f1 * (t - sweep), TAU * f1, 0.0)
                };
                let (s, c) = arg.sin_cos();
                for k in 0..2 {
                    chi[k] = offset[k] + amplitude[k] * s;
                    chi_dot[k] = amplitude[k] * w * c;
                    chi_ddot[k] = amplitude[k] * (w_dot * c - w * w * s);
                }
            }
        }
        (
            AnklePose::new(chi[0], chi[1]),
            AnkleRates::new(Vector2::from(chi_dot), Vector2::from(chi_ddot)),
        )
    }

    /// True when the roll channel of the reference is identically zero.
    pub fn is_pure_pitch(&self) -> bool {
        match *self {
            ReferenceSpec::Sinusoid { amplitude, offset, .. } | ReferenceSpec::Chirp { amplitude, offset, .. } => {
                amplitude[0] == 0.0 && offset[0] == 0.0
            }
        }
    }
}

/// What a parallel policy sees at a control tick.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Observation {
    pub t: f64,
    pub q: Vector2<f64>,
    pub q_dot: Vector2<f64>,
    pub last_action: Vector2<f64>,
}

/// A policy whose actions are desired motor positions.
pub trait Policy {
    fn act(&mut self, obs: &Observation) -> Vector2<f64>;
}

/// Motor targets for the reference at `t`, clamped to the motor limits.
pub fn scripted_policy(
    geom: &AnkleGeometry,
    reference: &ReferenceSpec,
    t: f64,
    prev: Option<&Vector2<f64>>,
) -> Result<Vector2<f64>> {
    let (chi, _) = reference.sample(t);
    let q = ik_position(geom, &chi, prev)?.q;
    Ok(Vector2::new(
        q[0].clamp(geom.q_limits[0].lower, geom.q_limits[0].upper),
        q[1].clamp(geom.q_limits[1].lower, geom.q_limits[1].upper),
    ))
}

/// Deterministic stand-in for a trained parallel policy: tracks a reference in ankle space,
/// expressed as motor targets.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    pub geom: AnkleGeometry,
    pub reference: ReferenceSpec,
    last: Option<Vector2<f64>>,
}

impl ScriptedPolicy {
    pub fn new(geom: AnkleGeometry, reference: ReferenceSpec) -> Self {
        Self {
            geom,
            reference,
            last: None,
        }
    }
}

impl Policy for ScriptedPolicy {
    fn act(&mut self, obs: &Observation) -> Vector2<f64> {
        let a = scripted_policy(&self.geom, &self.reference, obs.t, self.last.as_ref())
            .unwrap_or_else(|_| self.last.unwrap_or(obs.last_action));
        self.last = Some(a);
        a
    }
}

/// One logged transition `(s_t, a_t, r_t, s_{t+1})`; serial state on both ends.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyIO {
    pub t: f64,
    pub pose: AnklePose,
    pub chi_dot: Vector2<f64>,
    pub reference: AnklePose,
    pub last_action: Vector2<f64>,
    pub action: Vector2<f64>,
    pub reward: f64,
    pub next_pose: AnklePose,
    pub next_chi_dot: Vector2<f64>,
}

/// `-(|chi_ref - chi|^2 + 0.01 |tau|^2)`.
pub fn reward(reference: &AnklePose, pose: &AnklePose, tau: &Vector2<f64>) -> f64 {
    -((reference.to_vector() - pose.to_vector()).norm_squared() + 0.01 * tau.norm_squared())
}

/// Result of one training-side step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LipsSimStep {
    pub tau_s: Vector2<f64>,
    pub tau_p: Vector2<f64>,
    pub action: Vector2<f64>,
    pub q: Vector2<f64>,
    pub q_dot: Vector2<f64>,
    pub j: Matrix2<f64>,
    pub observation: Observation,
}

/// One training iteration against a serial-space simulator: observe, act in motor space, run
/// the motor PD against the mapped motor state, and carry the torque back through `J^T`.
pub fn lips_sim_step(
    policy: &mut dyn Policy,
    geom: &AnkleGeometry,
    t: f64,
    pose: &AnklePose,
    chi_dot: &Vector2<f64>,
    last_action: &Vector2<f64>,
    prev_q: Option<&Vector2<f64>>,
    gains: &PdGains,
) -> Result<LipsSimStep> {
    let motor = state_serial_to_parallel(geom, pose, &AnkleRates::velocity(*chi_dot), prev_q)?;
    let j = jacobian(geom, pose, &motor.q)?;
    let observation = Observation {
        t,
        q: motor.q,
        q_dot: motor.q_dot,
        last_action: *last_action,
    };
    let action = policy.act(&observation);
    let tau_p = pd_torque(gains, &action, &Vector2::zeros(), &motor.q, &motor.q_dot);
    let tau_s = serial_torque_from_parallel(&j, &tau_p);
    Ok(LipsSimStep {
        tau_s,
        tau_p,
        action,
        q: motor.q,
        q_dot: motor.q_dot,
        j,
        observation,
    })
}

/// Deployment-side motor loop: the held action goes straight to the motor PD. No kinematics.
pub fn lips_deploy_step(
    action: &Vector2<f64>,
    q_meas: &Vector2<f64>,
    q_dot_meas: &Vector2<f64>,
    gains: &PdGains,
) -> Vector2<f64> {
    pd_torque(gains, action, &Vector2::zeros(), q_meas, q_dot_meas)
}

/// Targets a serial-model policy emits at a control tick.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SerialTargets {
    pub chi_des: AnklePose,
    pub chi_dot_des: Vector2<f64>,
    /// Motor targets consistent with `chi_des`, when the controller works in motor space.
    pub q_des: Option<Vector2<f64>>,
}

/// Ankle-space controller of a serial-model policy, run at the motor-loop rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SerialController {
    /// Roll/pitch PD on the serial targets.
    Pd(PdGains),
    /// The motor PD re-expressed in ankle space through `J^T`; needs `q_des` in the targets.
    MotorEquivalent(PdGains),
}

impl SerialController {
    /// Serial torque for the reconstructed serial state. `q` and `j` are the motor angles and
    /// Jacobian at that state.
    pub fn torque(
        &self,
        targets: &SerialTargets,
        pose: &AnklePose,
        chi_dot: &Vector2<f64>,
        q: &Vector2<f64>,
        j: &Matrix2<f64>,
    ) -> Vector2<f64> {
        match self {
            SerialController::Pd(g) => pd_torque(
                g,
                &targets.chi_des.to_vector(),
                &targets.chi_dot_des,
                &pose.to_vector(),
                chi_dot,
            ),
            SerialController::MotorEquivalent(g) => {
                let q_des = targets.q_des.unwrap_or(*q);
                let tau_p = pd_torque(g, &q_des, &Vector2::zeros(), q, &(j * chi_dot));
                serial_torque_from_parallel(j, &tau_p)
            }
        }
    }
}

/// Outcome of a baseline motor-loop step: the torque, and the fault that forced a fallback.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub tau_p: Vector2<f64>,
    pub fault: Option<Error>,
}

impl StepOutcome {
    fn ok(tau_p: Vector2<f64>) -> Self {
        Self { tau_p, fault: None }
    }

    fn fallback(fault: Error) -> Self {
        Self {
            tau_p: Vector2::zeros(),
            fault: Some(fault),
        }
    }
}

/// Torque-equivalence deployment: rebuild the serial state from the motors (forward
/// kinematics and `J`), evaluate the serial controller, and map with `J^-T`.
///
/// `guess` carries the last forward-kinematics solution and is updated in place. Any
/// kinematic failure yields zero torque and the fault.
pub fn s2p_torque_step(
    controller: &SerialController,
    targets: &SerialTargets,
    geom: &AnkleGeometry,
    q_meas: &Vector2<f64>,
    q_dot_meas: &Vector2<f64>,
    guess: &mut AnklePose,
    counter: &mut SolveCounter,
) -> StepOutcome {
    let mut run = || -> Result<Vector2<f64>> {
        counter.add(1);
        let pose = fk_position(geom, q_meas, Some(guess))?.pose;
        *guess = pose;
        counter.add(1);
        let j = jacobian(geom, &pose, q_meas)?;
        let chi_dot = invert2(&j)? * q_dot_meas;
        let tau_s = controller.torque(targets, &pose, &chi_dot, q_meas, &j);
        parallel_torque_from_serial(&j, &tau_s)
    };
    match run() {
        Ok(tau) => StepOutcome::ok(tau),
        Err(e) => StepOutcome::fallback(e),
    }
}

/// Motor target for the position-equivalence baseline; workspace failures keep `previous`.
pub fn s2p_position_target(
    geom: &AnkleGeometry,
    chi_des: &AnklePose,
    previous: &Vector2<f64>,
    counter: &mut SolveCounter,
) -> (Vector2<f64>, Option<Error>) {
    counter.add(1);
    match ik_position(geom, chi_des, Some(previous)) {
        Ok(sol) => (sol.q, None),
        Err(e) => (*previous, Some(e)),
    }
}

/// Position-equivalence motor loop: per-joint PD towards `q_des`. With `average` set (a
/// pure-pitch command) both motors receive the mean of the two PD torques.
pub fn s2p_position_step(
    q_des: &Vector2<f64>,
    q_dot_des: &Vector2<f64>,
    q_meas: &Vector2<f64>,
    q_dot_meas: &Vector2<f64>,
    gains: &PdGains,
    average: bool,
) -> Vector2<f64> {
    let tau = pd_torque(gains, q_des, q_dot_des, q_meas, q_dot_meas);
    if average {
        let mean = 0.5 * (tau[0] + tau[1]);
        Vector2::new(mean, mean)
    } else {
        tau
    }
}

/// Passive ankle: damping only.
pub fn passive_step(q_dot_meas: &Vector2<f64>, gains: &PdGains) -> Vector2<f64> {
    (-gains.kd().component_mul(q_dot_meas)).map(|t| t.clamp(-gains.tau_limit, gains.tau_limit))
}
