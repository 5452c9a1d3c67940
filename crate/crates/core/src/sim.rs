//! Rigid-footplate plant, encoder noise, and the episode and batch runners used to compare the
//! deployment methods.
//!
//! The plant integrates in ankle space. Policies update at `dt_control` and hold their output;
//! the motor-side loop (PD and, for the torque-equivalence baseline, the serial/parallel
//! conversion) runs every physics step.

use std::collections::BTreeMap;
use std::io::Write;
use std::time::Instant;

use nalgebra::{Matrix2, Vector2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::control::{
    lips_deploy_step, lips_sim_step, passive_step, reward, s2p_position_step, s2p_position_target,
    s2p_torque_step, Method, Observation, PdGains, Policy, PolicyIO, ReferenceSpec, ScriptedPolicy,
    SerialController, SerialTargets, SolveCounter,
};
use crate::error::{Error, Result};
use crate::geometry::{AnkleGeometry, AnklePose};
use crate::kinematics::{fk_position, ik_position, jacobian};
use crate::mapping::serial_torque_from_parallel;

/// `g(chi) = stiffness * chi + bias`, the small-angle gravity torque the plant resists.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GravityModel {
    pub stiffness: [f64; 2],
    pub bias: [f64; 2],
}

impl GravityModel {
    pub const OFF: GravityModel = GravityModel {
        stiffness: [0.0, 0.0],
        bias: [0.0, 0.0],
    };

    pub fn torque(&self, pose: &AnklePose) -> Vector2<f64> {
        Vector2::new(
            self.stiffness[0] * pose.phi + self.bias[0],
            self.stiffness[1] * pose.theta + self.bias[1],
        )
    }
}

impl Default for GravityModel {
    fn default() -> Self {
        // foot centre of mass slightly forward of and beside the ankle axes
        Self {
            stiffness: [2.0, 2.5],
            bias: [0.1, 0.5],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlantParams {
    pub inertia: [f64; 2],
    pub damping: [f64; 2],
    pub gravity: GravityModel,
    pub dt_physics: f64,
    pub dt_control: f64,
}

impl Default for PlantParams {
    fn default() -> Self {
        Self {
            inertia: [0.02, 0.03],
            damping: [0.05, 0.05],
            gravity: GravityModel::default(),
            dt_physics: 1e-3,
            dt_control: 0.01,
        }
    }
}

/// Speed beyond which the plant is declared diverged.
pub const MAX_SPEED: f64 = 50.0;

impl PlantParams {
    pub fn validate(&self) -> Result<()> {
        let finite = self
            .inertia
            .iter()
            .chain(&self.damping)
            .chain(&self.gravity.stiffness)
            .chain(&self.gravity.bias)
            .all(|v| v.is_finite());
        if !finite || self.inertia.iter().any(|&i| i <= 0.0) {
            return Err(Error::Schema("plant inertia must be positive and all parameters finite".into()));
        }
        if !(self.dt_physics > 0.0 && self.dt_physics <= self.dt_control && self.dt_control.is_finite()) {
            return Err(Error::Schema(format!(
                "need 0 < dt_physics <= dt_control, got {} and {}",
                self.dt_physics, self.dt_control
            )));
        }
        Ok(())
    }

    /// Physics steps per control tick.
    pub fn substeps(&self) -> usize {
        ((self.dt_control / self.dt_physics).round() as usize).max(1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct PlantState {
    pub pose: AnklePose,
    pub chi_dot: Vector2<f64>,
    pub t: f64,
}

impl PlantState {
    pub fn at_rest(pose: AnklePose) -> Self {
        Self {
            pose,
            chi_dot: Vector2::zeros(),
            t: 0.0,
        }
    }

    /// Kinetic energy plus the elastic part of the gravity model.
    pub fn energy(&self, params: &PlantParams) -> f64 {
        let i = Vector2::from(params.inertia);
        let k = Vector2::from(params.gravity.stiffness);
        let b = Vector2::from(params.gravity.bias);
        let chi = self.pose.to_vector();
        0.5 * i.dot(&self.chi_dot.component_mul(&self.chi_dot)) + 0.5 * k.dot(&chi.component_mul(&chi)) + b.dot(&chi)
    }
}

/// One semi-implicit Euler step of the footplate under ankle torque `tau_ankle`.
pub fn plant_step(state: &PlantState, params: &PlantParams, tau_ankle: &Vector2<f64>) -> Result<PlantState> {
    let dt = params.dt_physics;
    let net = tau_ankle - Vector2::from(params.damping).component_mul(&state.chi_dot) - params.gravity.torque(&state.pose);
    let chi_ddot = net.component_div(&Vector2::from(params.inertia));
    let chi_dot = state.chi_dot + chi_ddot * dt;
    let speed = chi_dot.norm();
    if !(speed <= MAX_SPEED) {
        return Err(Error::Diverged { speed });
    }
    Ok(PlantState {
        pose: AnklePose::from_vector(&(state.pose.to_vector() + chi_dot * dt)),
        chi_dot,
        t: state.t + dt,
    })
}

/// Adds i.i.d. `N(0, sigma^2)` to each encoder reading. `sigma = 0` returns `q` untouched.
pub fn inject_encoder_noise(q: &Vector2<f64>, sigma: f64, rng: &mut ChaCha8Rng) -> Vector2<f64> {
    if sigma == 0.0 {
        return *q;
    }
    let normal = Normal::new(0.0, sigma).expect("sigma must be finite and non-negative");
    Vector2::new(q[0] + normal.sample(rng), q[1] + normal.sample(rng))
}

/// How the serial-model policy behind the series-to-parallel baselines behaves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SerialSetup {
    /// Controller used by the torque-equivalence baseline.
    pub controller: SerialMode,
    /// Ankle-space PD gains of [`SerialMode::Pd`]; `None` picks gains matched to the motor PD
    /// at the neutral pose.
    pub gains: Option<PdGains>,
    /// Proportional correction of the serial policy's target towards the reference, acting on
    /// the pose it reconstructs from the motors.
    pub feedback: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SerialMode {
    Pd,
    MotorEquivalent,
}

impl Default for SerialSetup {
    fn default() -> Self {
        Self {
            controller: SerialMode::Pd,
            gains: None,
            feedback: 1.0,
        }
    }
}

/// Ankle-space PD gains whose diagonal matches `J^T K J` of the motor gains at the neutral pose.
pub fn matched_serial_gains(geom: &AnkleGeometry, motor: &PdGains) -> Result<PdGains> {
    let q0 = ik_position(geom, &AnklePose::ZERO, None)?.q;
    let j = jacobian(geom, &AnklePose::ZERO, &q0)?;
    let diag = |g: [f64; 2]| {
        let m = j.transpose() * Matrix2::from_diagonal(&Vector2::from(g)) * j;
        [m[(0, 0)], m[(1, 1)]]
    };
    Ok(PdGains {
        kp: diag(motor.kp),
        kd: diag(motor.kd),
        tau_limit: motor.tau_limit,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeConfig {
    pub method: Method,
    pub geometry: AnkleGeometry,
    pub plant: PlantParams,
    pub gains: PdGains,
    pub passive_gains: PdGains,
    pub serial: SerialSetup,
    pub reference: ReferenceSpec,
    pub noise_sigma: f64,
    pub seed: u64,
    pub duration: f64,
}

impl EpisodeConfig {
    pub fn new(method: Method, geometry: AnkleGeometry) -> Self {
        Self {
            method,
            geometry,
            plant: PlantParams::default(),
            gains: PdGains::default(),
            passive_gains: PdGains::passive(),
            serial: SerialSetup::default(),
            reference: ReferenceSpec::default(),
            noise_sigma: 0.0,
            seed: 0,
            duration: 10.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.plant.validate()?;
        self.gains.validate()?;
        self.passive_gains.validate()?;
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Schema(format!("noise sigma must be >= 0, got {}", self.noise_sigma)));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(Error::Schema(format!("duration must be positive, got {}", self.duration)));
        }
        if !self.serial.feedback.is_finite() {
            return Err(Error::Schema("serial feedback must be finite".into()));
        }
        Ok(())
    }

    pub fn ticks(&self) -> usize {
        (self.duration / self.plant.dt_control).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub rms_tracking_error: f64,
    pub max_error: f64,
    pub torque_jitter: f64,
    pub solve_count: u64,
    pub terminated_early: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub throughput: Option<f64>,
}

/// One control tick of the waveform log.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WaveformRow {
    pub t: f64,
    pub pose: AnklePose,
    pub reference: AnklePose,
    pub q: Vector2<f64>,
    pub q_dot: Vector2<f64>,
    pub tau: Vector2<f64>,
    pub solve_count: u64,
}

pub const WAVEFORM_HEADER: &str = "t,phi,theta,phi_ref,theta_ref,q1,q2,q1_dot,q2_dot,tau1,tau2,solve_count";

pub fn write_waveform_csv<W: Write>(mut out: W, rows: &[WaveformRow]) -> std::io::Result<()> {
    writeln!(out, "{WAVEFORM_HEADER}")?;
    // adding zero turns -0.0 into 0.0
    let z = |v: f64| v + 0.0;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{},{},{}",
            z(r.t),
            z(r.pose.phi),
            z(r.pose.theta),
            z(r.reference.phi),
            z(r.reference.theta),
            z(r.q[0]),
            z(r.q[1]),
            z(r.q_dot[0]),
            z(r.q_dot[1]),
            z(r.tau[0]),
            z(r.tau[1]),
            r.solve_count
        )?;
    }
    Ok(())
}

/// Metrics report keyed by method name.
pub fn metrics_json(report: &BTreeMap<Method, Metrics>) -> serde_json::Value {
    serde_json::to_value(report).expect("metrics serialize")
}

/// Episode outcome: metrics, the per-tick log, and the number of plant states whose motor
/// kinematics were evaluated.
#[derive(Debug, Clone, PartialEq)]
pub struct Episode {
    pub metrics: Metrics,
    pub log: Vec<WaveformRow>,
    pub state_evaluations: u64,
}

/// Ground truth the runner tracks alongside the plant: motor angles, rates and `J`.
struct Drive {
    q: Vector2<f64>,
    q_dot: Vector2<f64>,
    j: Matrix2<f64>,
}

impl Drive {
    fn at(geom: &AnkleGeometry, state: &PlantState, prev: Option<&Vector2<f64>>) -> Result<Self> {
        let q = ik_position(geom, &state.pose, prev)?.q;
        let j = jacobian(geom, &state.pose, &q)?;
        Ok(Self {
            q,
            q_dot: j * state.chi_dot,
            j,
        })
    }
}

/// Per-method controller state held between physics steps.
struct Controller {
    method: Method,
    policy: ScriptedPolicy,
    action: Vector2<f64>,
    serial_controller: SerialController,
    serial_targets: SerialTargets,
    fk_guess: AnklePose,
    q_des: Vector2<f64>,
    average: bool,
    faults: u64,
}

impl Controller {
    fn new(cfg: &EpisodeConfig, q0: Vector2<f64>) -> Result<Self> {
        let serial_controller = match cfg.serial.controller {
            SerialMode::Pd => SerialController::Pd(match cfg.serial.gains {
                Some(g) => g,
                None => matched_serial_gains(&cfg.geometry, &cfg.gains)?,
            }),
            SerialMode::MotorEquivalent => SerialController::MotorEquivalent(cfg.gains),
        };
        Ok(Self {
            method: cfg.method,
            policy: ScriptedPolicy::new(cfg.geometry.clone(), cfg.reference),
            action: q0,
            serial_controller,
            serial_targets: SerialTargets::default(),
            fk_guess: AnklePose::ZERO,
            q_des: q0,
            average: cfg.reference.is_pure_pitch(),
            faults: 0,
        })
    }

    /// Control-rate update of the held command.
    fn tick(&mut self, cfg: &EpisodeConfig, t: f64, q_meas: &Vector2<f64>, q_dot_meas: &Vector2<f64>, counter: &mut SolveCounter) {
        let (chi_ref, _) = cfg.reference.sample(t);
        match self.method {
            Method::Lips => {
                let obs = Observation {
                    t,
                    q: *q_meas,
                    q_dot: *q_dot_meas,
                    last_action: self.action,
                };
                self.action = self.policy.act(&obs);
            }
            Method::S2pTorque => {
                let q_des = match self.serial_controller {
                    SerialController::MotorEquivalent(_) => {
                        let obs = Observation {
                            t,
                            q: *q_meas,
                            q_dot: *q_dot_meas,
                            last_action: self.action,
                        };
                        self.action = self.policy.act(&obs);
                        Some(self.action)
                    }
                    SerialController::Pd(_) => None,
                };
                self.serial_targets = SerialTargets {
                    chi_des: chi_ref,
                    chi_dot_des: Vector2::zeros(),
                    q_des,
                };
            }
            Method::S2pPosition => {
                counter.add(1);
                let chi_obs = match fk_position(&cfg.geometry, q_meas, Some(&self.fk_guess)) {
                    Ok(fk) => {
                        self.fk_guess = fk.pose;
                        fk.pose
                    }
                    Err(_) => {
                        self.faults += 1;
                        self.fk_guess
                    }
                };
                let k = cfg.serial.feedback;
                let chi_des = AnklePose::from_vector(&(chi_ref.to_vector() + k * (chi_ref.to_vector() - chi_obs.to_vector())));
                let (q_des, fault) = s2p_position_target(&cfg.geometry, &chi_des, &self.q_des, counter);
                self.faults += fault.is_some() as u64;
                self.q_des = q_des;
            }
            Method::Passive => {}
        }
    }

    /// Motor torques at physics rate.
    fn torque(&mut self, cfg: &EpisodeConfig, q_meas: &Vector2<f64>, q_dot_meas: &Vector2<f64>, counter: &mut SolveCounter) -> Vector2<f64> {
        match self.method {
            Method::Lips => lips_deploy_step(&self.action, q_meas, q_dot_meas, &cfg.gains),
            Method::S2pTorque => {
                let out = s2p_torque_step(
                    &self.serial_controller,
                    &self.serial_targets,
                    &cfg.geometry,
                    q_meas,
                    q_dot_meas,
                    &mut self.fk_guess,
                    counter,
                );
                self.faults += out.fault.is_some() as u64;
                out.tau_p
            }
            Method::S2pPosition => s2p_position_step(&self.q_des, &Vector2::zeros(), q_meas, q_dot_meas, &cfg.gains, self.average),
            Method::Passive => passive_step(q_dot_meas, &cfg.passive_gains),
        }
    }
}

/// Runs one episode. Workspace exits and divergence end the episode early and are reported in
/// the metrics; only invalid configurations are errors.
pub fn run_episode(cfg: &EpisodeConfig) -> Result<Episode> {
    cfg.validate()?;
    let geom = &cfg.geometry;
    let substeps = cfg.plant.substeps();
    let ticks = cfg.ticks();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let (chi0, _) = cfg.reference.sample(0.0);
    let mut state = PlantState::at_rest(chi0);
    let mut drive = Drive::at(geom, &state, None)?;
    let mut ctl = Controller::new(cfg, drive.q)?;
    ctl.fk_guess = chi0;

    let mut log = Vec::with_capacity(ticks);
    let mut counter = SolveCounter::default();
    let mut total_solves = 0;
    let mut evaluations = 1u64;
    let mut terminated = false;

    'ticks: for k in 0..ticks {
        let t = k as f64 * cfg.plant.dt_control;
        let (chi_ref, _) = cfg.reference.sample(t);
        let mut q_meas = inject_encoder_noise(&drive.q, cfg.noise_sigma, &mut rng);
        ctl.tick(cfg, t, &q_meas, &drive.q_dot, &mut counter);

        let mut tick_tau = Vector2::zeros();
        let mut row_state = (state, drive.q, drive.q_dot);
        for s in 0..substeps {
            if s > 0 {
                q_meas = inject_encoder_noise(&drive.q, cfg.noise_sigma, &mut rng);
            }
            let tau_p = ctl.torque(cfg, &q_meas, &drive.q_dot, &mut counter);
            if s == 0 {
                tick_tau = tau_p;
                row_state = (state, drive.q, drive.q_dot);
            }
            let tau_ankle = serial_torque_from_parallel(&drive.j, &tau_p);
            let next = plant_step(&state, &cfg.plant, &tau_ankle)
                .and_then(|next| geom.contains_pose(&next.pose).then_some(next).ok_or(Error::OutOfBounds { pose: next.pose }))
                .and_then(|next| Ok((next, Drive::at(geom, &next, Some(&drive.q))?)));
            match next {
                Ok((next, d)) => {
                    state = next;
                    drive = d;
                    evaluations += 1;
                }
                Err(_) => {
                    terminated = true;
                    let solves = counter.take();
                    total_solves += solves;
                    log.push(row(t, &row_state, chi_ref, tick_tau, solves));
                    break 'ticks;
                }
            }
        }
        let solves = counter.take();
        total_solves += solves;
        log.push(row(t, &row_state, chi_ref, tick_tau, solves));
    }

    let metrics = summarize(&log, total_solves, terminated);
    Ok(Episode {
        metrics,
        log,
        state_evaluations: evaluations,
    })
}

fn row(t: f64, s: &(PlantState, Vector2<f64>, Vector2<f64>), reference: AnklePose, tau: Vector2<f64>, solves: u64) -> WaveformRow {
    WaveformRow {
        t,
        pose: s.0.pose,
        reference,
        q: s.1,
        q_dot: s.2,
        tau,
        solve_count: solves,
    }
}

fn summarize(log: &[WaveformRow], solve_count: u64, terminated_early: bool) -> Metrics {
    let errors: Vec<f64> = log
        .iter()
        .map(|r| (r.pose.to_vector() - r.reference.to_vector()).norm())
        .collect();
    let n = errors.len().max(1) as f64;
    let rms = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let max_error = errors.iter().copied().fold(0.0, f64::max);
    let jitter = if log.len() > 1 {
        log.windows(2).map(|w| (w[1].tau - w[0].tau).norm()).sum::<f64>() / (log.len() - 1) as f64
    } else {
        0.0
    };
    Metrics {
        rms_tracking_error: rms,
        max_error,
        torque_jitter: jitter,
        solve_count,
        terminated_early,
        throughput: None,
    }
}

/// Aggregate of a batch of seeded episodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    pub method: Method,
    pub n_envs: usize,
    /// Means of the per-episode metrics; `solve_count` is the total, `terminated_early` is set
    /// if any episode ended early, and `throughput` is kinematic state evaluations per second.
    pub metrics: Metrics,
    pub median_rms_tracking_error: f64,
    pub median_torque_jitter: f64,
    pub terminated_episodes: usize,
    pub state_evaluations: u64,
    pub wall_seconds: f64,
}

/// Runs `n_envs` episodes with seeds `cfg.seed, cfg.seed + 1, ...`.
pub fn batch_run(cfg: &EpisodeConfig, n_envs: usize) -> Result<BatchReport> {
    if n_envs == 0 {
        return Err(Error::Schema("n_envs must be at least 1".into()));
    }
    cfg.validate()?;
    let start = Instant::now();
    let episodes: Vec<Episode> = (0..n_envs as u64)
        .into_par_iter()
        .map(|k| {
            let mut c = cfg.clone();
            c.seed = cfg.seed.wrapping_add(k);
            run_episode(&c)
        })
        .collect::<Result<_>>()?;
    let wall = start.elapsed().as_secs_f64();
    let metrics: Vec<Metrics> = episodes.iter().map(|e| e.metrics).collect();
    let evaluations = episodes.iter().map(|e| e.state_evaluations).sum();
    Ok(aggregate(cfg.method, &metrics, evaluations, wall))
}

/// Order-independent reduction of per-episode metrics.
pub fn aggregate(method: Method, metrics: &[Metrics], state_evaluations: u64, wall_seconds: f64) -> BatchReport {
    let rms: Vec<f64> = metrics.iter().map(|m| m.rms_tracking_error).collect();
    let max: Vec<f64> = metrics.iter().map(|m| m.max_error).collect();
    let jit: Vec<f64> = metrics.iter().map(|m| m.torque_jitter).collect();
    let throughput = if wall_seconds > 0.0 {
        Some(state_evaluations as f64 / wall_seconds)
    } else {
        None
    };
    BatchReport {
        method,
        n_envs: metrics.len(),
        metrics: Metrics {
            rms_tracking_error: sorted_mean(&rms),
            max_error: max.iter().copied().fold(0.0, f64::max),
            torque_jitter: sorted_mean(&jit),
            solve_count: metrics.iter().map(|m| m.solve_count).sum(),
            terminated_early: metrics.iter().any(|m| m.terminated_early),
            throughput,
        },
        median_rms_tracking_error: median(&rms),
        median_torque_jitter: median(&jit),
        terminated_episodes: metrics.iter().filter(|m| m.terminated_early).count(),
        state_evaluations,
        wall_seconds,
    }
}

fn sorted(values: &[f64]) -> Vec<f64> {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    v
}

/// Mean summed in sorted order, so the result does not depend on input order.
fn sorted_mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    sorted(values).iter().sum::<f64>() / values.len() as f64
}

pub fn median(values: &[f64]) -> f64 {
    let v = sorted(values);
    match v.len() {
        0 => 0.0,
        n if n % 2 == 1 => v[n / 2],
        n => 0.5 * (v[n / 2 - 1] + v[n / 2]),
    }
}

/// Kinematic throughput of the batch path: for each of `n` poses, IK, `J`, and one torque map.
/// Returns `(evaluations, seconds)`.
pub fn kinematics_throughput(geom: &AnkleGeometry, n: usize, seed: u64) -> Result<(usize, f64)> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let [lr, lp] = geom.chi_limits;
    let poses: Vec<AnklePose> = (0..n)
        .map(|_| AnklePose::new(rng.random_range(lr.lower..=lr.upper), rng.random_range(lp.lower..=lp.upper)))
        .collect();
    let tau = Vector2::new(1.0, -0.5);
    let start = Instant::now();
    let checksum: f64 = poses
        .par_iter()
        .map(|pose| -> Result<f64> {
            let q = ik_position(geom, pose, None)?.q;
            let j = jacobian(geom, pose, &q)?;
            Ok(serial_torque_from_parallel(&j, &tau).sum())
        })
        .try_reduce(|| 0.0, |a, b| Ok(a + b))?;
    let secs = start.elapsed().as_secs_f64();
    std::hint::black_box(checksum);
    Ok((n, secs))
}

/// The training-side loop: the policy acts on a serial-space simulator, torques pass through
/// `J^T`, and every control tick is logged as a transition.
pub fn run_lips_training(
    geom: &AnkleGeometry,
    plant: &PlantParams,
    gains: &PdGains,
    reference: &ReferenceSpec,
    ticks: usize,
) -> Result<Vec<PolicyIO>> {
    struct Held(Vector2<f64>);
    impl Policy for Held {
        fn act(&mut self, _: &Observation) -> Vector2<f64> {
            self.0
        }
    }

    plant.validate()?;
    let mut policy = ScriptedPolicy::new(geom.clone(), *reference);
    let (chi0, _) = reference.sample(0.0);
    let mut state = PlantState::at_rest(chi0);
    let mut prev_q = ik_position(geom, &chi0, None)?.q;
    let mut last_action = prev_q;
    let mut out = Vec::with_capacity(ticks);
    for k in 0..ticks {
        let t = k as f64 * plant.dt_control;
        let (chi_ref, _) = reference.sample(t);
        let start = state;
        let first = lips_sim_step(&mut policy, geom, t, &state.pose, &state.chi_dot, &last_action, Some(&prev_q), gains)?;
        let mut held = Held(first.action);
        let mut step = first;
        for s in 0..plant.substeps() {
            if s > 0 {
                step = lips_sim_step(&mut held, geom, state.t, &state.pose, &state.chi_dot, &last_action, Some(&prev_q), gains)?;
            }
            prev_q = step.q;
            state = plant_step(&state, plant, &step.tau_s)?;
            if !geom.contains_pose(&state.pose) {
                return Err(Error::OutOfBounds { pose: state.pose });
            }
        }
        out.push(PolicyIO {
            t,
            pose: start.pose,
            chi_dot: start.chi_dot,
            reference: chi_ref,
            last_action,
            action: first.action,
            reward: reward(&chi_ref, &state.pose, &first.tau_p),
            next_pose: state.pose,
            next_chi_dot: state.chi_dot,
        });
        last_action = first.action;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_state_is_equilibrium_without_gravity() {
        let p = PlantParams {
            gravity: GravityModel::OFF,
            ..Default::default()
        };
        let s = PlantState::default();
        let next = plant_step(&s, &p, &Vector2::zeros()).unwrap();
        assert_eq!(next.pose, s.pose);
        assert_eq!(next.chi_dot, s.chi_dot);
    }

    #[test]
    fn constant_torque_accelerates_linearly() {
        let p = PlantParams {
            gravity: GravityModel::OFF,
            damping: [0.0, 0.0],
            ..Default::default()
        };
        let tau = Vector2::new(0.01, -0.02);
        let mut s = PlantState::default();
        for _ in 0..100 {
            s = plant_step(&s, &p, &tau).unwrap();
        }
        let expect = Vector2::new(0.01 / 0.02, -0.02 / 0.03) * 0.1;
        assert!((s.chi_dot - expect).amax() < 1e-12);
    }

    #[test]
    fn divergence_detected() {
        let p = PlantParams::default();
        let s = PlantState {
            chi_dot: Vector2::new(49.9, 0.0),
            ..Default::default()
        };
        assert!(matches!(plant_step(&s, &p, &Vector2::new(100.0, 0.0)), Err(Error::Diverged { .. })));
    }

    #[test]
    fn noise_free_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let q = Vector2::new(0.1, -0.3);
        assert_eq!(inject_encoder_noise(&q, 0.0, &mut rng), q);
    }

    #[test]
    fn median_and_mean_are_order_free() {
        let a = [0.3, 0.1, 0.2, 0.7];
        let b = [0.7, 0.2, 0.3, 0.1];
        assert_eq!(median(&a), median(&b));
        assert_eq!(sorted_mean(&a), sorted_mean(&b));
        assert_eq!(median(&a), 0.25);
    }
}
