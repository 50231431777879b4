//! Verification suites shared by the command line and the test targets.

pub mod gradient;
pub mod oracle;

pub use gradient::{gradient_suite, layer_cases, primitive_cases, Case, CaseOutcome};
pub use oracle::{global_limit, oracle_sweep, SweepReport};
