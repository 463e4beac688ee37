//! Model-predictive expert built on constrained DDP.

pub mod ddp;
mod expert;
pub mod gait;
pub mod qp;
pub mod reference;
pub mod srb;
pub mod swing;

pub use ddp::{ControlProblem, DdpOptions, DdpSolution};
pub use expert::{torques_to_targets, ExpertConfig, MpcExpert, SolveDiagnostics, DIAGNOSTICS_HEADER};
pub use gait::GaitSchedule;
pub use reference::{build_reference, raibert_foothold, Command, CubicBezier, ReferenceParams, ReferenceTrajectory};
pub use srb::{GrfControl, MpcState, MpcWeights, SrbProblem};
pub use swing::{swing_torque, SwingGains};

#[cfg(test)]
mod tests;
