use std::fmt;
use std::path::Path;

use ltdyn_core::scenario::Scenario;

/// Anything wrong with a scenario file before the run starts.
#[derive(Debug)]
pub enum InputError {
    Read { path: String, source: std::io::Error },
    /// TOML syntax or schema violation. `location` is `line:column` when known.
    Schema { location: Option<String>, message: String },
    Invalid(String),
}

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            InputError::Read { path, source } => write!(f, "cannot read {path}: {source}"),
            InputError::Schema { location: Some(loc), message } => write!(f, "schema error at {loc}: {message}"),
            InputError::Schema { location: None, message } => write!(f, "schema error: {message}"),
            InputError::Invalid(m) => write!(f, "invalid scenario: {m}"),
        }
    }
}

impl std::error::Error for InputError {}

fn line_col(text: &str, offset: usize) -> String {
    let before = &text[..offset.min(text.len())];
    let line = before.matches('\n').count() + 1;
    let col = before.len() - before.rfind('\n').map_or(0, |k| k + 1) + 1;
    format!("{line}:{col}")
}

pub fn parse_scenario_str(text: &str) -> Result<Scenario, InputError> {
    let scenario: Scenario = toml::from_str(text).map_err(|e| InputError::Schema {
        location: e.span().map(|s| line_col(text, s.start)),
        message: e.message().trim().to_string(),
    })?;
    scenario.validate().map_err(|e| InputError::Invalid(e.to_string()))?;
    Ok(scenario)
}

pub fn parse_scenario(path: &Path) -> Result<Scenario, InputError> {
    let text = std::fs::read_to_string(path).map_err(|source| InputError::Read { path: path.display().to_string(), source })?;
    parse_scenario_str(&text)
}

/// Scenario with every default written out.
pub fn dump_scenario(scenario: &Scenario) -> String {
    toml::to_string(scenario).expect("scenario types serialize to TOML")
}
