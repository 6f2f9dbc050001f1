//! Versioned JSON envelopes for every analysis output.
//!
//! ```json
//! { "schema": "convlens/profiles", "version": 1,
//!   "inputs": [{"role": "model", "sha256": "..."}],
//!   "payload": ... }
//! ```

use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const SCHEMA_VERSION: u32 = 1;

/// Schema names, one per artifact kind.
pub mod schema {
    pub const PROFILES: &str = "convlens/profiles";
    pub const SLOTS: &str = "convlens/slots";
    pub const CLUSTERS: &str = "convlens/clusters";
    pub const NEGATIVES: &str = "convlens/negatives";
    pub const SUMMARY: &str = "convlens/summary";
    pub const EXPLANATIONS: &str = "convlens/explanations";
    pub const EVALUATION: &str = "convlens/evaluation";
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InputHash {
    pub role: String,
    pub sha256: String,
}

impl InputHash {
    pub fn of_bytes(role: &str, bytes: &[u8]) -> Self {
        Self {
            role: role.to_string(),
            sha256: hex::encode(Sha256::digest(bytes)),
        }
    }

    pub fn of_file(role: &str, path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(Self::of_bytes(role, &bytes))
    }
}

/// Payload invariants checked after parsing.
pub trait Validate {
    fn validate(&self) -> Result<()>;
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Artifact<T> {
    pub schema: String,
    pub version: u32,
    pub inputs: Vec<InputHash>,
    pub payload: T,
}

impl<T: Serialize + DeserializeOwned + Validate> Artifact<T> {
    pub fn new(schema: &str, inputs: Vec<InputHash>, payload: T) -> Self {
        Self {
            schema: schema.to_string(),
            version: SCHEMA_VERSION,
            inputs,
            payload,
        }
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(self)?;
        s.push('\n');
        Ok(s)
    }

    /// Parse and validate against the expected schema name.
    pub fn from_json(text: &str, expected_schema: &str) -> Result<Self> {
        let artifact: Self = serde_json::from_str(text).map_err(|e| Error::Schema(e.to_string()))?;
        if artifact.schema != expected_schema {
            return Err(Error::Schema(format!(
                "expected schema {expected_schema:?}, found {:?}",
                artifact.schema
            )));
        }
        if artifact.version != SCHEMA_VERSION {
            return Err(Error::Schema(format!(
                "unsupported schema version {} (expected {SCHEMA_VERSION})",
                artifact.version
            )));
        }
        for input in &artifact.inputs {
            if input.sha256.len() != 64 || !input.sha256.bytes().all(|b| b.is_ascii_hexdigit()) {
                return Err(Error::Schema(format!("bad sha256 for input {:?}", input.role)));
            }
        }
        artifact.payload.validate()?;
        Ok(artifact)
    }

    pub fn read(path: &Path, expected_schema: &str) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text, expected_schema).map_err(|e| e.in_file(path))
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?).map_err(|e| Error::io(path, e))
    }
}

impl<T: Validate> Validate for Vec<T> {
    fn validate(&self) -> Result<()> {
        self.iter().try_for_each(Validate::validate)
    }
}

/// JSON has no infinities: finite values are numbers, infinities are the
/// strings `"+inf"` / `"-inf"`.
pub mod extended_f64 {
    use serde::de::{self, Deserializer, Visitor};
    use serde::Serializer;

    pub fn serialize<S: Serializer>(v: &f64, s: S) -> Result<S::Ok, S::Error> {
        if v.is_finite() {
            s.serialize_f64(*v)
        } else if v.is_nan() {
            Err(serde::ser::Error::custom("NaN is not representable"))
        } else if *v > 0.0 {
            s.serialize_str("+inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<f64, D::Error> {
        struct V;
        impl Visitor<'_> for V {
            type Value = f64;
            fn expecting(&self, f: &mut std::fmt::Formatter) -> std::fmt::Result {
                f.write_str("a number or \"+inf\"/\"-inf\"")
            }
            fn visit_f64<E: de::Error>(self, v: f64) -> Result<f64, E> {
                Ok(v)
            }
            fn visit_i64<E: de::Error>(self, v: i64) -> Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_u64<E: de::Error>(self, v: u64) -> Result<f64, E> {
                Ok(v as f64)
            }
            fn visit_str<E: de::Error>(self, v: &str) -> Result<f64, E> {
                match v {
                    "+inf" => Ok(f64::INFINITY),
                    "-inf" => Ok(f64::NEG_INFINITY),
                    _ => Err(E::invalid_value(de::Unexpected::Str(v), &self)),
                }
            }
        }
        d.deserialize_any(V)
    }
}
