//! Versioned JSON persistence of estimation results.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{RdError, Result};
use crate::estimator::RdResult;

pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultsFile {
    pub version: u32,
    #[serde(flatten)]
    pub result: RdResult,
}

impl ResultsFile {
    pub fn new(result: RdResult) -> Self {
        ResultsFile {
            version: SCHEMA_VERSION,
            result,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parse a results document, rejecting other schema versions before
    /// looking at the rest of the document.
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value = serde_json::from_str(text)?;
        let found = value
            .get("version")
            .and_then(|v| v.as_u64())
            .ok_or_else(|| RdError::InvalidConfig("results file has no `version` field".into()))?;
        if found != SCHEMA_VERSION as u64 {
            return Err(RdError::SchemaVersion {
                found: found as u32,
                expected: SCHEMA_VERSION,
            });
        }
        Ok(serde_json::from_value(value)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}
