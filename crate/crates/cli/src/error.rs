//! Errors surfaced to the operator as one JSON line on stderr.

use std::fmt;

use entgate_core::budget::BudgetError;
use entgate_core::client::ClientError;
use entgate_core::entropy::EntropyError;
use entgate_core::replay::ReplayError;
use entgate_core::stats::StatsError;
use entgate_core::synth::SynthError;
use entgate_core::threshold::CalibrationError;
use entgate_core::trace::TraceError;

#[derive(Debug)]
pub struct CliError {
    /// Stable machine-readable name, usually the core error variant.
    pub kind: String,
    pub message: String,
}

impl CliError {
    pub fn new(kind: impl Into<String>, message: impl Into<String>) -> Self {
        Self { kind: kind.into(), message: message.into() }
    }

    pub fn usage(message: impl Into<String>) -> Self {
        Self::new("Usage", message)
    }

    /// `{"error":"<kind>","message":"<text>"}`
    pub fn json_line(&self) -> String {
        serde_json::json!({ "error": self.kind, "message": self.message }).to_string()
    }

    pub fn exit_code(&self) -> i32 {
        if self.kind == "Usage" {
            2
        } else {
            1
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.kind, self.message)
    }
}

impl std::error::Error for CliError {}

/// Variant name taken from the derived `Debug` output.
fn variant(e: &impl fmt::Debug) -> String {
    format!("{e:?}")
        .chars()
        .take_while(|c| c.is_alphanumeric() || *c == '_')
        .collect()
}

macro_rules! by_variant {
    ($($t:ty),*) => {$(
        impl From<$t> for CliError {
            fn from(e: $t) -> Self {
                CliError::new(variant(&e), e.to_string())
            }
        }
    )*};
}

by_variant!(CalibrationError, BudgetError, TraceError, SynthError, StatsError, EntropyError);

impl From<ReplayError> for CliError {
    fn from(e: ReplayError) -> Self {
        match e {
            ReplayError::Calibration(inner) => inner.into(),
            ReplayError::Stats(inner) => inner.into(),
            other => CliError::new(variant(&other), other.to_string()),
        }
    }
}

impl From<ClientError> for CliError {
    fn from(e: ClientError) -> Self {
        match e {
            ClientError::Entropy(inner) => inner.into(),
            other => CliError::new(variant(&other), other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::new("Io", e.to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use entgate_core::ThresholdMethod;

    #[test]
    fn kinds_name_the_innermost_error() {
        let e: CliError = ReplayError::Calibration(CalibrationError::BelowSampleFloor {
            method: ThresholdMethod::Mean,
            have: 4,
            need: 5,
        })
        .into();
        assert_eq!(e.kind, "BelowSampleFloor");
        let v: serde_json::Value = serde_json::from_str(&e.json_line()).unwrap();
        assert_eq!(v["error"], "BelowSampleFloor");
        assert_eq!(e.exit_code(), 1);
        assert_eq!(CliError::usage("x").exit_code(), 2);
    }
}
