//! `lips`: ankle kinematics, torque maps, simulation and file checks from the command line.
//!
//! Exit status is 0 on success, 1 when the mechanism itself refuses (workspace, singularity,
//! binding, loops), and 2 for usage, syntax and schema problems.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use lips_core::control::{Method, ReferenceSpec};
use lips_core::geometry::{validate_geometry, AnkleGeometry, AnklePose};
use lips_core::ingest::{bind_ankle, load_linkage_config, parse_urdf_subset};
use lips_core::kinematics::{fk_position, ik_position, jacobian, jacobian_pair};
use lips_core::mapping::{parallel_torque_from_serial, serial_torque_from_parallel};
use lips_core::sim::{batch_run, kinematics_throughput, metrics_json, run_episode, write_waveform_csv, EpisodeConfig};
use lips_core::Error;
use nalgebra::{Matrix2, Vector2};
use serde_json::{json, Value};

#[derive(Parser)]
#[command(name = "lips", version, about = "Parallel ankle kinematics and control harness")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(clap::Args)]
struct GeometryArg {
    /// Linkage geometry JSON; the built-in reference linkage when omitted.
    #[arg(long)]
    geometry: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Motor angles for an ankle pose.
    Ik {
        #[command(flatten)]
        geometry: GeometryArg,
        /// roll,pitch in radians
        #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
        chi: Vector2<f64>,
        /// Previous motor angles used for branch continuity.
        #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
        prev: Option<Vector2<f64>>,
    },
    /// Ankle pose for a pair of motor angles.
    Fk {
        #[command(flatten)]
        geometry: GeometryArg,
        /// q1,q2 in radians
        #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
        q: Vector2<f64>,
        /// Initial roll,pitch for the Newton iteration.
        #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
        guess: Option<Vector2<f64>>,
    },
    /// Jacobian (and its rate, given --chi-dot) at an ankle pose.
    Jac {
        #[command(flatten)]
        geometry: GeometryArg,
        #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
        chi: Vector2<f64>,
        #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
        chi_dot: Option<Vector2<f64>>,
    },
    /// Map torques between motors and ankle at a pose.
    MapTorque {
        #[command(flatten)]
        geometry: GeometryArg,
        #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
        chi: Vector2<f64>,
        /// Torque pair to map (motor torques for p2s, roll,pitch torques for s2p).
        #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
        tau: Vector2<f64>,
        #[arg(long, value_enum)]
        direction: Direction,
    },
    /// Run one episode and write the per-tick waveform CSV.
    Simulate {
        #[command(flatten)]
        geometry: GeometryArg,
        #[arg(long, value_parser = parse_method)]
        method: Method,
        /// Encoder noise standard deviation (rad).
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        /// Overridden by LIPS_SEED when set.
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Control frequency.
        #[arg(long, default_value_t = 100.0)]
        hz: f64,
        /// Episode length (s).
        #[arg(long, default_value_t = 10.0)]
        duration: f64,
        /// Reference amplitude roll,pitch (rad).
        #[arg(long, value_parser = parse_pair, allow_hyphen_values = true)]
        amplitude: Option<Vector2<f64>>,
        /// Reference frequency (Hz).
        #[arg(long)]
        frequency: Option<f64>,
        /// Waveform CSV destination.
        #[arg(long)]
        out: PathBuf,
    },
    /// Batch throughput of the episode runner and of the bare kinematics.
    Bench {
        #[command(flatten)]
        geometry: GeometryArg,
        #[arg(long, default_value_t = 4096)]
        envs: usize,
        #[arg(long, default_value_t = 0.1)]
        duration: f64,
        #[arg(long, value_parser = parse_method, default_value = "lips")]
        method: Method,
        #[arg(long, default_value_t = 0.0)]
        noise: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 100.0)]
        hz: f64,
    },
    /// Parse a URDF file and print the model, optionally bound to a linkage geometry.
    ParseUrdf {
        #[arg(long)]
        urdf: PathBuf,
        #[arg(long)]
        geometry: Option<PathBuf>,
        #[arg(long, default_value = "ankle_pitch")]
        pitch_joint: String,
        #[arg(long, default_value = "ankle_roll")]
        roll_joint: String,
    },
    /// Check that a linkage geometry closes over its whole workspace.
    Validate {
        #[command(flatten)]
        geometry: GeometryArg,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Direction {
    /// Motor torques to ankle torques, `J^T tau`.
    P2s,
    /// Ankle torques to motor torques, `J^-T tau`.
    S2p,
}

enum Failure {
    Usage(String),
    Domain(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        if e.is_input_error() {
            Failure::Usage(e.to_string())
        } else {
            Failure::Domain(e)
        }
    }
}

type CliResult<T> = Result<T, Failure>;

fn parse_pair(s: &str) -> Result<Vector2<f64>, String> {
    let parts: Vec<&str> = s.split(',').collect();
    if parts.len() != 2 {
        return Err(format!("expected two comma-separated numbers, got '{s}'"));
    }
    let mut v = [0.0; 2];
    for (slot, p) in v.iter_mut().zip(parts) {
        *slot = p
            .trim()
            .parse::<f64>()
            .ok()
            .filter(|x| x.is_finite())
            .ok_or_else(|| format!("'{p}' is not a finite number"))?;
    }
    Ok(Vector2::from(v))
}

fn parse_method(s: &str) -> Result<Method, String> {
    s.parse::<Method>().map_err(|e| e.to_string())
}

fn read(path: &Path) -> CliResult<String> {
    fs::read_to_string(path).map_err(|e| Failure::Usage(format!("cannot read {}: {e}", path.display())))
}

fn load_geometry(arg: &GeometryArg) -> CliResult<AnkleGeometry> {
    match &arg.geometry {
        Some(path) => Ok(load_linkage_config(&read(path)?)?),
        None => Ok(AnkleGeometry::fixture()),
    }
}

fn pair(v: &Vector2<f64>) -> Value {
    json!([v[0], v[1]])
}

fn matrix(m: &Matrix2<f64>) -> Value {
    json!([[m[(0, 0)], m[(0, 1)]], [m[(1, 0)], m[(1, 1)]]])
}

fn pose_of(v: &Vector2<f64>) -> AnklePose {
    AnklePose::from_vector(v)
}

fn seed_from_env(flag: u64) -> CliResult<u64> {
    match std::env::var("LIPS_SEED") {
        Ok(s) => s
            .trim()
            .parse()
            .map_err(|_| Failure::Usage(format!("LIPS_SEED must be a non-negative integer, got '{s}'"))),
        Err(_) => Ok(flag),
    }
}

fn check_positive(name: &str, v: f64) -> CliResult<()> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(Failure::Usage(format!("--{name} must be positive, got {v}")))
    }
}

fn episode_config(geom: AnkleGeometry, method: Method, noise: f64, seed: u64, hz: f64, duration: f64) -> CliResult<EpisodeConfig> {
    check_positive("hz", hz)?;
    check_positive("duration", duration)?;
    if !(noise >= 0.0 && noise.is_finite()) {
        return Err(Failure::Usage(format!("--noise must be >= 0, got {noise}")));
    }
    let mut cfg = EpisodeConfig::new(method, geom);
    cfg.plant.dt_control = 1.0 / hz;
    cfg.plant.dt_physics = cfg.plant.dt_physics.min(cfg.plant.dt_control);
    cfg.noise_sigma = noise;
    cfg.seed = seed_from_env(seed)?;
    cfg.duration = duration;
    cfg.validate()?;
    Ok(cfg)
}

/// Writes through a temporary file in the destination directory, so a failure leaves nothing.
fn write_atomically(path: &Path, fill: impl FnOnce(&mut dyn Write) -> std::io::Result<()>) -> CliResult<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let io = |e: std::io::Error| Failure::Usage(format!("cannot write {}: {e}", path.display()));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(io)?;
    {
        let mut buf = std::io::BufWriter::new(tmp.as_file_mut());
        fill(&mut buf).map_err(io)?;
        buf.flush().map_err(io)?;
    }
    tmp.persist(path).map_err(|e| io(e.error))?;
    Ok(())
}

fn run(cli: Cli) -> CliResult<Value> {
    match cli.command {
        Command::Ik { geometry, chi, prev } => {
            let g = load_geometry(&geometry)?;
            let sol = ik_position(&g, &pose_of(&chi), prev.as_ref())?;
            Ok(json!({ "q": pair(&sol.q), "branch": sol.branch, "residual": sol.residual }))
        }
        Command::Fk { geometry, q, guess } => {
            let g = load_geometry(&geometry)?;
            let sol = fk_position(&g, &q, guess.map(|v| pose_of(&v)).as_ref())?;
            Ok(json!({
                "chi": pair(&sol.pose.to_vector()),
                "iterations": sol.iterations,
                "residual": sol.residual,
            }))
        }
        Command::Jac { geometry, chi, chi_dot } => {
            let g = load_geometry(&geometry)?;
            let pose = pose_of(&chi);
            let q = ik_position(&g, &pose, None)?.q;
            let mut out = json!({ "q": pair(&q) });
            match chi_dot {
                Some(rate) => {
                    let p = jacobian_pair(&g, &pose, &rate, &q)?;
                    out["J"] = matrix(&p.j);
                    out["J_dot"] = matrix(&p.j_dot);
                    out["det"] = json!(p.det());
                }
                None => {
                    let j = jacobian(&g, &pose, &q)?;
                    out["J"] = matrix(&j);
                    out["det"] = json!(j.determinant());
                }
            }
            Ok(out)
        }
        Command::MapTorque { geometry, chi, tau, direction } => {
            let g = load_geometry(&geometry)?;
            let pose = pose_of(&chi);
            let q = ik_position(&g, &pose, None)?.q;
            let j = jacobian(&g, &pose, &q)?;
            Ok(match direction {
                Direction::P2s => json!({ "tau_s": pair(&serial_torque_from_parallel(&j, &tau)) }),
                Direction::S2p => json!({ "tau_p": pair(&parallel_torque_from_serial(&j, &tau)?) }),
            })
        }
        Command::Simulate {
            geometry,
            method,
            noise,
            seed,
            hz,
            duration,
            amplitude,
            frequency,
            out,
        } => {
            let g = load_geometry(&geometry)?;
            let mut cfg = episode_config(g, method, noise, seed, hz, duration)?;
            if amplitude.is_some() || frequency.is_some() {
                let ReferenceSpec::Sinusoid {
                    amplitude: default_amp,
                    frequency: default_freq,
                    ..
                } = ReferenceSpec::default()
                else {
                    unreachable!()
                };
                cfg.reference = ReferenceSpec::Sinusoid {
                    amplitude: amplitude.map(|a| [a[0], a[1]]).unwrap_or(default_amp),
                    frequency: frequency.unwrap_or(default_freq),
                    phase: [0.0, 0.0],
                    offset: [0.0, 0.0],
                };
            }
            let episode = run_episode(&cfg)?;
            write_atomically(&out, |w| write_waveform_csv(w, &episode.log))?;
            Ok(metrics_json(&BTreeMap::from([(method, episode.metrics)])))
        }
        Command::Bench {
            geometry,
            envs,
            duration,
            method,
            noise,
            seed,
            hz,
        } => {
            if envs == 0 {
                return Err(Failure::Usage("--envs must be at least 1".into()));
            }
            let g = load_geometry(&geometry)?;
            let cfg = episode_config(g.clone(), method, noise, seed, hz, duration)?;
            let report = batch_run(&cfg, envs)?;
            let ticks = report.n_envs as f64 * cfg.ticks() as f64;
            let (n, secs) = kinematics_throughput(&g, envs * 100, cfg.seed)?;
            Ok(json!({
                "method": method,
                "n_envs": report.n_envs,
                "duration": duration,
                "control_hz": hz,
                "threads": rayon_threads(),
                "throughput": report.metrics.throughput,
                "state_evaluations": report.state_evaluations,
                "control_ticks_per_second": ticks / report.wall_seconds,
                "wall_seconds": report.wall_seconds,
                "kinematics_evaluations_per_second": n as f64 / secs,
                "target": 409_600,
                "metrics": report.metrics,
                "terminated_episodes": report.terminated_episodes,
            }))
        }
        Command::ParseUrdf {
            urdf,
            geometry,
            pitch_joint,
            roll_joint,
        } => {
            let mut model = parse_urdf_subset(&read(&urdf)?)?;
            if let Some(path) = geometry {
                let g = load_linkage_config(&read(&path)?)?;
                model = bind_ankle(&model, &pitch_joint, &roll_joint, &g)?;
            }
            Ok(serde_json::to_value(&model).expect("model serializes"))
        }
        Command::Validate { geometry } => {
            let g = load_geometry(&geometry)?;
            validate_geometry(&g)?;
            Ok(json!({ "valid": true, "L2": g.l2 }))
        }
    }
}

fn rayon_threads() -> usize {
    std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1)
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(value) => {
            println!("{value}");
            ExitCode::SUCCESS
        }
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {}", msg.replace('\n', " "));
            ExitCode::from(2)
        }
        Err(Failure::Domain(e)) => {
            eprintln!("error: {}", e.to_string().replace('\n', " "));
            ExitCode::from(1)
        }
    }
}
