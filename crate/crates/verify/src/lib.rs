//! Independent oracles and property suites for `hyperseg-core`.

pub mod configs;
pub mod oracle;
pub mod straight;
pub mod suites;

pub use suites::{run_named, SuiteReport, SUITES};
