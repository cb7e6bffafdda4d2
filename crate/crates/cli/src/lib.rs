//! Scenario files, run orchestration and CSV output for `ltdyn`.

pub mod input;
pub mod output;

pub use input::{dump_scenario, parse_scenario, parse_scenario_str, InputError};
pub use output::{emit_outputs, phase_file_name};
