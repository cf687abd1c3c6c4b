//! Library side of the `dkvb` command-line tool.

pub mod commands;
pub mod config;
pub mod report;

use serde_json::json;

/// Machine-readable error record: the toolkit error kind when there is one,
/// and the full context chain.
pub fn error_record(err: &anyhow::Error) -> serde_json::Value {
    let kind = err
        .chain()
        .find_map(|e| e.downcast_ref::<dkvb::Error>())
        .map(|e| match e {
            dkvb::Error::InvalidInput(_) => "invalid_input",
            dkvb::Error::InvalidConfig(_) => "invalid_config",
            dkvb::Error::Index { .. } => "index",
            dkvb::Error::Format { .. } => "format",
            dkvb::Error::InvalidState(_) => "invalid_state",
            dkvb::Error::InvalidScenario(_) => "invalid_scenario",
            dkvb::Error::Routing(_) => "routing",
            dkvb::Error::UndefinedMetric(_) => "undefined_metric",
            dkvb::Error::Io(_) => "io",
        })
        .or_else(|| err.chain().any(|e| e.is::<toml::de::Error>()).then_some("invalid_config"))
        .or_else(|| err.chain().any(|e| e.is::<std::io::Error>()).then_some("io"))
        .unwrap_or("error");
    json!({
        "error": kind,
        "message": format!("{err:#}"),
    })
}
