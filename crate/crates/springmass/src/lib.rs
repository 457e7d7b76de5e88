//! 3D spring-mass running: hybrid dynamics, periodic trajectory libraries,
//! deadbeat control gains, and step-adaptation policies, plus a scenario
//! harness for closed-loop template-model runs.
//!
//! The guide under `book/` walks through every concept; start with
//! [`params::TemplateParams`] and [`dynamics::integrate_apex_to_apex`].

pub mod active;
pub mod cone;
pub mod deadbeat;
pub mod dynamics;
pub mod library;
pub mod error;
pub mod params;
pub mod policy;
pub mod state;

pub use error::{FileError, GainError, PolicyError, SimError, SolveError};
pub use params::{PdGains, TemplateParams};
pub use state::{ApexState, ComState, HybridTrace, LegCommand, Side};
