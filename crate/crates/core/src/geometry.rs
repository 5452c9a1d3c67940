//! Shank-fixed frames, footplate rotations and the linkage constants of one parallel ankle.
//!
//! The shank frame is right-handed with x forward, y left and z up, and its origin is the
//! footplate centre. All lengths are metres and all angles radians.

use std::fmt;

use nalgebra::{Matrix3, Matrix3x2, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::kinematics::loop_equation;

/// Grid resolution used by [`validate_geometry`] along each workspace axis.
pub const VALIDATION_GRID: usize = 21;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    X,
    Y,
}

/// Which drive chain of the ankle. Side one sits at `+r1`, side two at `-r1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Side {
    One,
    Two,
}

impl Side {
    pub const BOTH: [Side; 2] = [Side::One, Side::Two];

    pub fn index(self) -> usize {
        match self {
            Side::One => 0,
            Side::Two => 1,
        }
    }

    /// +1 for side one, -1 for side two.
    pub fn sign(self) -> f64 {
        match self {
            Side::One => 1.0,
            Side::Two => -1.0,
        }
    }
}

impl fmt::Display for Side {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Side::One => f.write_str("first"),
            Side::Two => f.write_str("second"),
        }
    }
}

/// Closed interval `[lower, upper]`, serialized as a two-element array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Limits {
    pub lower: f64,
    pub upper: f64,
}

impl Limits {
    pub const fn new(lower: f64, upper: f64) -> Self {
        Self { lower, upper }
    }

    pub fn contains(&self, value: f64) -> bool {
        value >= self.lower && value <= self.upper
    }

    pub fn width(&self) -> f64 {
        self.upper - self.lower
    }

    pub fn is_valid(&self) -> bool {
        self.lower.is_finite() && self.upper.is_finite() && self.upper > self.lower
    }

    /// `n` evenly spaced samples from `lower` to `upper` inclusive.
    pub fn grid(&self, n: usize) -> impl Iterator<Item = f64> + '_ {
        let step = if n > 1 { self.width() / (n - 1) as f64 } else { 0.0 };
        (0..n).map(move |k| {
            if k + 1 == n && n > 1 {
                self.upper
            } else {
                self.lower + step * k as f64
            }
        })
    }
}

impl From<[f64; 2]> for Limits {
    fn from(v: [f64; 2]) -> Self {
        Limits::new(v[0], v[1])
    }
}

impl From<Limits> for [f64; 2] {
    fn from(l: Limits) -> Self {
        [l.lower, l.upper]
    }
}

/// Footplate posture relative to the shank: roll `phi` about x, pitch `theta` about y.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct AnklePose {
    pub phi: f64,
    pub theta: f64,
}

impl AnklePose {
    pub const ZERO: AnklePose = AnklePose { phi: 0.0, theta: 0.0 };

    pub const fn new(phi: f64, theta: f64) -> Self {
        Self { phi, theta }
    }

    pub fn from_vector(v: &Vector2<f64>) -> Self {
        Self::new(v[0], v[1])
    }

    pub fn to_vector(self) -> Vector2<f64> {
        Vector2::new(self.phi, self.theta)
    }

    pub fn is_finite(&self) -> bool {
        self.phi.is_finite() && self.theta.is_finite()
    }

    /// Footplate orientation `R_Y(theta) * R_X(phi)`.
    pub fn rotation(&self) -> Matrix3<f64> {
        basic_rotation(Axis::Y, self.theta) * basic_rotation(Axis::X, self.phi)
    }
}

/// Footplate rates: `chi_dot = [phi_dot, theta_dot]` and `chi_ddot`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct AnkleRates {
    pub chi_dot: Vector2<f64>,
    pub chi_ddot: Vector2<f64>,
}

impl AnkleRates {
    pub const ZERO: AnkleRates = AnkleRates {
        chi_dot: Vector2::new(0.0, 0.0),
        chi_ddot: Vector2::new(0.0, 0.0),
    };

    pub fn new(chi_dot: Vector2<f64>, chi_ddot: Vector2<f64>) -> Self {
        Self { chi_dot, chi_ddot }
    }

    pub fn velocity(chi_dot: Vector2<f64>) -> Self {
        Self {
            chi_dot,
            chi_ddot: Vector2::zeros(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.chi_dot.iter().chain(self.chi_ddot.iter()).all(|v| v.is_finite())
    }
}

/// Linkage constants of one parallel ankle.
///
/// Each side is a crank of length `l1` pivoting about a y-parallel drive shaft at
/// `B_i = (0, ±r1, a_i)`, joined to the footplate hinge `P_i` by a rod of length `l2`.
#[derive(Debug, Clone, PartialEq)]
pub struct AnkleGeometry {
    pub l1: f64,
    pub l2: f64,
    pub r1: f64,
    pub a1: f64,
    pub a2: f64,
    pub p1_neutral: Vector3<f64>,
    pub p2_neutral: Vector3<f64>,
    pub q_limits: [Limits; 2],
    /// Roll limits first, pitch limits second.
    pub chi_limits: [Limits; 2],
}

impl AnkleGeometry {
    /// The reference ankle shipped with the crate.
    ///
    /// `l2` is set by loop closure so that `chi = 0` and `q = 0` coincide.
    pub fn fixture() -> Self {
        let mut geom = AnkleGeometry {
            l1: 0.05,
            l2: 0.0,
            r1: 0.045,
            a1: 0.30,
            a2: 0.30,
            p1_neutral: Vector3::new(0.055, 0.045, 0.04),
            p2_neutral: Vector3::new(0.055, -0.045, 0.04),
            q_limits: [Limits::new(-1.2, 1.2), Limits::new(-1.2, 1.2)],
            chi_limits: [Limits::new(-0.4, 0.4), Limits::new(-0.7, 0.35)],
        };
        geom.l2 = geom.closure_rod_length();
        geom
    }

    /// Rod length that closes the first loop at `chi = 0`, `q = 0`.
    pub fn closure_rod_length(&self) -> f64 {
        let tip = Vector3::new(self.l1, self.r1, self.a1);
        (tip - self.p1_neutral).norm()
    }

    pub fn drive_height(&self, side: Side) -> f64 {
        match side {
            Side::One => self.a1,
            Side::Two => self.a2,
        }
    }

    pub fn neutral_hinge(&self, side: Side) -> &Vector3<f64> {
        match side {
            Side::One => &self.p1_neutral,
            Side::Two => &self.p2_neutral,
        }
    }

    pub fn q_limit(&self, side: Side) -> &Limits {
        &self.q_limits[side.index()]
    }

    pub fn contains_pose(&self, pose: &AnklePose) -> bool {
        self.chi_limits[0].contains(pose.phi) && self.chi_limits[1].contains(pose.theta)
    }

    /// Scalar and interval checks, without the workspace sweep.
    pub fn check_fields(&self) -> Result<()> {
        let scalars = [
            ("L1", self.l1),
            ("L2", self.l2),
            ("r1", self.r1),
            ("a1", self.a1),
            ("a2", self.a2),
        ];
        if let Some((name, _)) = scalars.iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::InvalidGeometry(format!("{name} is not finite")));
        }
        if self.l1 <= 0.0 {
            return Err(Error::InvalidGeometry(format!("L1 must be positive, got {}", self.l1)));
        }
        if self.l2 <= 0.0 {
            return Err(Error::InvalidGeometry(format!("L2 must be positive, got {}", self.l2)));
        }
        if self.r1 < 0.0 {
            return Err(Error::InvalidGeometry(format!("r1 must be non-negative, got {}", self.r1)));
        }
        for (name, p) in [("p1_neutral", &self.p1_neutral), ("p2_neutral", &self.p2_neutral)] {
            if !p.iter().all(|v| v.is_finite()) {
                return Err(Error::InvalidGeometry(format!("{name} is not finite")));
            }
        }
        for (k, lim) in self.q_limits.iter().enumerate() {
            if !lim.is_valid() {
                return Err(Error::InvalidGeometry(format!(
                    "q_limits[{k}] = [{}, {}] is not a proper interval",
                    lim.lower, lim.upper
                )));
            }
        }
        for (name, lim) in [("phi", &self.chi_limits[0]), ("theta", &self.chi_limits[1])] {
            if !lim.is_valid() {
                return Err(Error::InvalidGeometry(format!(
                    "chi_limits for {name} = [{}, {}] is not a proper interval",
                    lim.lower, lim.upper
                )));
            }
        }
        Ok(())
    }
}

/// Elementary rotation about x (roll) or y (pitch).
pub fn basic_rotation(axis: Axis, angle: f64) -> Matrix3<f64> {
    let (s, c) = angle.sin_cos();
    match axis {
        Axis::X => Matrix3::new(
            1.0, 0.0, 0.0, //
            0.0, c, -s, //
            0.0, s, c,
        ),
        Axis::Y => Matrix3::new(
            c, 0.0, s, //
            0.0, 1.0, 0.0, //
            -s, 0.0, c,
        ),
    }
}

/// Footplate hinge point `o'P_i` in the shank frame at `pose`.
pub fn hinge_point(geom: &AnkleGeometry, side: Side, pose: &AnklePose) -> Vector3<f64> {
    pose.rotation() * geom.neutral_hinge(side)
}

/// Maps `chi_dot` to the footplate angular velocity: `omega = R_w * chi_dot`.
///
/// Columns are `R_Y(theta) e_x` and `e_y`, matching the `R_Y(theta) R_X(phi)` orientation.
pub fn angular_velocity_projection(pose: &AnklePose) -> Matrix3x2<f64> {
    let (s, c) = pose.theta.sin_cos();
    Matrix3x2::new(
        c, 0.0, //
        0.0, 1.0, //
        -s, 0.0,
    )
}

/// Time derivative of [`angular_velocity_projection`] along `chi_dot`.
pub fn angular_velocity_projection_rate(pose: &AnklePose, chi_dot: &Vector2<f64>) -> Matrix3x2<f64> {
    let (s, c) = pose.theta.sin_cos();
    let w = chi_dot[1];
    Matrix3x2::new(
        -s * w, 0.0, //
        0.0, 0.0, //
        -c * w, 0.0,
    )
}

/// Drive-shaft point `B_i = (0, ±r1, a_i)`.
pub fn drive_base_point(geom: &AnkleGeometry, side: Side) -> Vector3<f64> {
    Vector3::new(0.0, side.sign() * geom.r1, geom.drive_height(side))
}

/// Field checks plus a [`VALIDATION_GRID`]² sweep of loop feasibility over `chi_limits`.
///
/// Returns the first offending pose, scanning roll-major from the lower corner.
pub fn validate_geometry(geom: &AnkleGeometry) -> Result<()> {
    geom.check_fields()?;
    for phi in geom.chi_limits[0].grid(VALIDATION_GRID) {
        for theta in geom.chi_limits[1].grid(VALIDATION_GRID) {
            let pose = AnklePose::new(phi, theta);
            for side in Side::BOTH {
                if !loop_equation(geom, side, &pose).is_feasible() {
                    return Err(Error::InfeasibleWorkspace { pose, side });
                }
            }
        }
    }
    Ok(())
}

/// On-disk linkage description.
///
/// `L2` may be the string `"auto"`, resolved by closure at `chi = 0`, `q = 0`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeometryConfig {
    #[serde(rename = "L1")]
    pub l1: f64,
    #[serde(rename = "L2")]
    pub l2: RodLength,
    pub r1: f64,
    pub a1: f64,
    pub a2: f64,
    pub p1_neutral: [f64; 3],
    pub p2_neutral: [f64; 3],
    pub q_limits: [Limits; 2],
    pub chi_limits: [Limits; 2],
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RodLength {
    Auto(AutoTag),
    Value(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AutoTag {
    Auto,
}

impl GeometryConfig {
    pub fn into_geometry(self) -> AnkleGeometry {
        let mut geom = AnkleGeometry {
            l1: self.l1,
            l2: 0.0,
            r1: self.r1,
            a1: self.a1,
            a2: self.a2,
            p1_neutral: Vector3::from(self.p1_neutral),
            p2_neutral: Vector3::from(self.p2_neutral),
            q_limits: self.q_limits,
            chi_limits: self.chi_limits,
        };
        geom.l2 = match self.l2 {
            RodLength::Auto(_) => geom.closure_rod_length(),
            RodLength::Value(v) => v,
        };
        geom
    }
}

impl From<&AnkleGeometry> for GeometryConfig {
    fn from(g: &AnkleGeometry) -> Self {
        GeometryConfig {
            l1: g.l1,
            l2: RodLength::Value(g.l2),
            r1: g.r1,
            a1: g.a1,
            a2: g.a2,
            p1_neutral: g.p1_neutral.into(),
            p2_neutral: g.p2_neutral.into(),
            q_limits: g.q_limits,
            chi_limits: g.chi_limits,
        }
    }
}
