use crate::geometry::{AnklePose, Side};

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum Error {
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),

    #[error("workspace infeasible at phi={:.6}, theta={:.6} ({side} side)", pose.phi, pose.theta)]
    InfeasibleWorkspace { pose: AnklePose, side: Side },

    #[error("pose phi={:.6}, theta={:.6} is outside the declared chi_limits", pose.phi, pose.theta)]
    OutOfBounds { pose: AnklePose },

    #[error("trig equation has no real root (a^2 + b^2 - c^2 = {discriminant:.3e})")]
    Infeasible { discriminant: f64 },

    #[error("pose phi={:.6}, theta={:.6} leaves the workspace ({side} side loop cannot close)", pose.phi, pose.theta)]
    Workspace { pose: AnklePose, side: Side },

    #[error("no root of the {side} loop lies inside the motor limits (roots: {roots:?})")]
    Limit { side: Side, roots: Vec<f64> },

    #[error("singular configuration: {0}")]
    SingularConfiguration(String),

    #[error("forward kinematics did not converge after {iterations} iterations (best phi={:.6}, theta={:.6}, residual {residual:.3e} rad)", best.phi, best.theta)]
    NoConvergence {
        best: AnklePose,
        residual: f64,
        iterations: usize,
    },

    #[error("plant diverged: |chi_dot| = {speed:.3} rad/s")]
    Diverged { speed: f64 },

    #[error("syntax error: {0}")]
    Syntax(String),

    #[error("schema error: {0}")]
    Schema(String),

    #[error("kinematic loop: joint '{joint}' reuses child link '{child}'")]
    Loop { joint: String, child: String },

    #[error("cannot bind ankle: {0}")]
    Bind(String),
}

impl Error {
    /// Parse and schema problems are input errors; everything else comes from the mechanism itself.
    pub fn is_input_error(&self) -> bool {
        matches!(self, Error::Syntax(_) | Error::Schema(_))
    }
}
