use std::collections::HashSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{check_schema_version, parse_document, read_file, ConfigError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SizeClass {
    Large,
    Medium,
    Small,
    Tiny,
    Medical,
}

impl SizeClass {
    pub fn as_str(self) -> &'static str {
        match self {
            SizeClass::Large => "large",
            SizeClass::Medium => "medium",
            SizeClass::Small => "small",
            SizeClass::Tiny => "tiny",
            SizeClass::Medical => "medical",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplingParams {
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: u32,
}

impl SamplingParams {
    pub fn validate(&self, path: &str) -> Result<(), ConfigError> {
        if !(self.temperature >= 0.0 && self.temperature.is_finite()) {
            return Err(ConfigError::schema(format!("{path}.temperature"), "temperature must be >= 0"));
        }
        if !(self.top_p > 0.0 && self.top_p <= 1.0) {
            return Err(ConfigError::schema(format!("{path}.top_p"), "top_p must lie in (0, 1]"));
        }
        if self.top_k < 1 {
            return Err(ConfigError::schema(format!("{path}.top_k"), "top_k must be >= 1"));
        }
        Ok(())
    }

    pub fn with_temperature(mut self, t: f64) -> Self {
        self.temperature = t;
        self
    }
}

fn default_timeout() -> f64 {
    120.0
}
fn default_retries() -> u32 {
    3
}
fn default_inflight() -> usize {
    4
}
fn default_backoff() -> u64 {
    500
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RequestLimits {
    #[serde(default = "default_timeout")]
    pub timeout_secs: f64,
    #[serde(default = "default_retries")]
    pub max_retries: u32,
    #[serde(default = "default_inflight")]
    pub max_inflight: usize,
    /// First retry delay; doubles on each further attempt.
    #[serde(default = "default_backoff")]
    pub backoff_ms: u64,
}

impl Default for RequestLimits {
    fn default() -> Self {
        RequestLimits {
            timeout_secs: default_timeout(),
            max_retries: default_retries(),
            max_inflight: default_inflight(),
            backoff_ms: default_backoff(),
        }
    }
}

fn default_gpus() -> u32 {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSpec {
    pub id: String,
    /// Base URL of an OpenAI-compatible server, e.g. `http://host:8000/v1`.
    pub endpoint: String,
    /// Model name sent in the request body; defaults to `id`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub served_name: Option<String>,
    pub sampling: SamplingParams,
    pub size_class: SizeClass,
    #[serde(default = "default_gpus")]
    pub gpu_count: u32,
    /// Parameter count in billions (bubble size on the throughput plot).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub params_b: Option<f64>,
    #[serde(default)]
    pub limits: RequestLimits,
}

impl ModelSpec {
    pub fn served_name(&self) -> &str {
        self.served_name.as_deref().unwrap_or(&self.id)
    }

    pub fn validate(&self, path: &str) -> Result<(), ConfigError> {
        if self.id.trim().is_empty() {
            return Err(ConfigError::schema(format!("{path}.id"), "model id is empty"));
        }
        if self.endpoint.trim().is_empty() {
            return Err(ConfigError::schema(format!("{path}.endpoint"), "endpoint is empty"));
        }
        self.sampling.validate(&format!("{path}.sampling"))?;
        if self.gpu_count < 1 {
            return Err(ConfigError::schema(format!("{path}.gpu_count"), "gpu_count must be >= 1"));
        }
        if self.limits.timeout_secs.is_nan() || self.limits.timeout_secs <= 0.0 {
            return Err(ConfigError::schema(format!("{path}.limits.timeout_secs"), "timeout must be positive"));
        }
        if self.limits.max_inflight < 1 {
            return Err(ConfigError::schema(format!("{path}.limits.max_inflight"), "max_inflight must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelRegistry {
    pub schema_version: u32,
    pub models: Vec<ModelSpec>,
}

impl ModelRegistry {
    pub fn parse(text: &str, origin: &str) -> Result<Self, ConfigError> {
        let reg: ModelRegistry = parse_document(text, origin)?;
        reg.validate()?;
        Ok(reg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ConfigError> {
        let path = path.as_ref();
        Self::parse(&read_file(path)?, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        check_schema_version(self.schema_version)?;
        let mut ids = HashSet::new();
        for (i, m) in self.models.iter().enumerate() {
            let path = format!("models[{i}]");
            m.validate(&path)?;
            if !ids.insert(m.id.as_str()) {
                return Err(ConfigError::schema(format!("{path}.id"), format!("duplicate model id `{}`", m.id)));
            }
        }
        Ok(())
    }

    pub fn get(&self, id: &str) -> Option<&ModelSpec> {
        self.models.iter().find(|m| m.id == id)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const REG: &str = r#"
schema_version: 1
models:
  - id: mistral-small
    endpoint: http://localhost:8000/v1
    sampling: {temperature: 0.15, top_p: 0.95, top_k: 50}
    size_class: small
    gpu_count: 1
"#;

    #[test]
    fn registry_loads_with_default_limits() {
        let reg = ModelRegistry::parse(REG, "r").unwrap();
        let m = reg.get("mistral-small").unwrap();
        assert_eq!(m.sampling.temperature, 0.15);
        assert_eq!(m.limits, RequestLimits::default());
        assert_eq!(m.served_name(), "mistral-small");
    }

    #[test]
    fn invalid_sampling_rejected() {
        for (from, to, key) in [
            ("temperature: 0.15", "temperature: -0.1", "models[0].sampling.temperature"),
            ("top_p: 0.95", "top_p: 0.0", "models[0].sampling.top_p"),
            ("top_k: 50", "top_k: 0", "models[0].sampling.top_k"),
            ("gpu_count: 1", "gpu_count: 0", "models[0].gpu_count"),
        ] {
            let err = ModelRegistry::parse(&REG.replace(from, to), "r").unwrap_err();
            assert!(matches!(&err, ConfigError::Schema { path, .. } if path == key), "{err}");
        }
    }

    #[test]
    fn unknown_size_class() {
        let err = ModelRegistry::parse(&REG.replace("size_class: small", "size_class: huge"), "r").unwrap_err();
        assert!(matches!(&err, ConfigError::Schema { path, .. } if path == "models[0].size_class"), "{err}");
    }
}
