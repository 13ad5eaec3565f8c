//! Learning model predictive control for periodic repetitive tasks.
//!
//! The controller needs no reference trajectory. Each period's closed-loop
//! data is stored, and states sharing an intracycle time with the end of the
//! horizon form a convex terminal set whose cost-to-go interpolates the
//! realized costs. Everything numeric is generic over [`Scalar`]; the `*64`
//! aliases fix it to `f64`.

pub mod controller;
pub mod error;
pub mod model;
pub mod qp;
pub mod safe_set;
pub mod scalar;
pub mod scenarios;
pub mod sim;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type ProblemSpec64 = model::ProblemSpec<f64>;
pub type TrajectoryStore64 = safe_set::TrajectoryStore<f64>;
pub type TerminalData64 = safe_set::TerminalData<f64>;
pub type QpProblem64 = qp::QpProblem<f64>;
pub type FtocpSolution64 = controller::FtocpSolution<f64>;
pub type ScenarioConfig64 = scenarios::ScenarioConfig<f64>;
pub type SeedTrajectory64 = sim::SeedTrajectory<f64>;
pub type SimLog64 = sim::SimLog<f64>;
