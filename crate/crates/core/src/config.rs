//! Declarative job configuration.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::udf::{Catalog, CatalogError, FunctionRef};

pub const DEFAULT_BUFFER_BYTES: u64 = 50 * 1024 * 1024;
pub const DEFAULT_MULTIPART_PART_BYTES: u64 = 5 * 1024 * 1024;
pub const DEFAULT_THRESHOLD_PERCENT: u8 = 75;
pub const DEFAULT_MERGE_FAN_IN: usize = 100;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ConfigError {
    #[error("malformed job config: {0}")]
    MalformedConfig(String),
    #[error("invalid job config field `{field}`: {reason}")]
    InvalidConfig { field: &'static str, reason: String },
    #[error(transparent)]
    UnknownFunction(#[from] CatalogError),
}

fn invalid(field: &'static str, reason: impl Into<String>) -> ConfigError {
    ConfigError::InvalidConfig {
        field,
        reason: reason.into(),
    }
}

/// Everything needed to run one MapReduce job.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job_id: Option<String>,
    pub input_prefixes: Vec<String>,
    pub output_prefix: String,
    pub num_mappers: u32,
    pub num_reducers: u32,
    #[serde(default)]
    pub run_finalizer: bool,
    /// Split on raw byte offsets instead of LF-delimited records.
    #[serde(default)]
    pub binary_mode: bool,
    /// Inputs are streams in the binary record layout (outputs of an
    /// earlier map-only stage); splits align to record boundaries and the
    /// map function is called once per decoded record.
    #[serde(default)]
    pub record_input: bool,
    #[serde(default = "default_buffer")]
    pub input_buffer_bytes: u64,
    #[serde(default = "default_buffer")]
    pub output_buffer_bytes: u64,
    #[serde(default = "default_threshold")]
    pub buffer_threshold_percent: u8,
    #[serde(default = "default_part")]
    pub multipart_part_bytes: u64,
    #[serde(default = "default_fan_in")]
    pub merge_fan_in: usize,
    #[serde(default = "default_true")]
    pub combiner_enabled: bool,
    /// Emit the final object in the binary record layout instead of text.
    #[serde(default)]
    pub final_binary: bool,
    pub map_fn: FunctionRef,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduce_fn: Option<FunctionRef>,
}

fn default_buffer() -> u64 {
    DEFAULT_BUFFER_BYTES
}
fn default_threshold() -> u8 {
    DEFAULT_THRESHOLD_PERCENT
}
fn default_part() -> u64 {
    DEFAULT_MULTIPART_PART_BYTES
}
fn default_fan_in() -> usize {
    DEFAULT_MERGE_FAN_IN
}
fn default_true() -> bool {
    true
}

/// Parses a JSON job document, applies defaults and validates it.
pub fn parse_job_config(raw: &str, catalog: &Catalog) -> Result<JobConfig, ConfigError> {
    let cfg: JobConfig =
        serde_json::from_str(raw).map_err(|e| ConfigError::MalformedConfig(e.to_string()))?;
    cfg.validate(catalog)?;
    Ok(cfg)
}

impl JobConfig {
    /// A config with every optional field at its default.
    pub fn new(
        input_prefixes: Vec<String>,
        output_prefix: impl Into<String>,
        num_mappers: u32,
        num_reducers: u32,
        map_fn: FunctionRef,
        reduce_fn: Option<FunctionRef>,
    ) -> Self {
        JobConfig {
            job_id: None,
            input_prefixes,
            output_prefix: output_prefix.into(),
            num_mappers,
            num_reducers,
            run_finalizer: false,
            binary_mode: false,
            record_input: false,
            input_buffer_bytes: DEFAULT_BUFFER_BYTES,
            output_buffer_bytes: DEFAULT_BUFFER_BYTES,
            buffer_threshold_percent: DEFAULT_THRESHOLD_PERCENT,
            multipart_part_bytes: DEFAULT_MULTIPART_PART_BYTES,
            merge_fan_in: DEFAULT_MERGE_FAN_IN,
            combiner_enabled: true,
            final_binary: false,
            map_fn,
            reduce_fn,
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("config serializes")
    }

    /// Checks every structural invariant and resolves the named functions.
    pub fn validate(&self, catalog: &Catalog) -> Result<(), ConfigError> {
        if let Some(id) = &self.job_id {
            validate_job_id(id)?;
        }
        if self.input_prefixes.is_empty() {
            return Err(invalid("input_prefixes", "at least one prefix is required"));
        }
        for p in &self.input_prefixes {
            if p.starts_with('/') {
                return Err(invalid("input_prefixes", format!("`{p}` must not start with '/'")));
            }
        }
        let out = self.output_prefix.trim_end_matches('/');
        if out.is_empty() || out.starts_with('/') {
            return Err(invalid(
                "output_prefix",
                "must be a non-empty key prefix not starting with '/'",
            ));
        }
        if self.num_mappers == 0 {
            return Err(invalid("num_mappers", "at least one mapper is required"));
        }
        if self.run_finalizer && self.num_reducers == 0 {
            return Err(invalid("run_finalizer", "the finalizer requires num_reducers >= 1"));
        }
        if self.num_reducers == 0 && self.reduce_fn.is_some() {
            return Err(invalid("reduce_fn", "map-only jobs (num_reducers = 0) take no reduce_fn"));
        }
        if self.num_reducers > 0 && self.reduce_fn.is_none() {
            return Err(invalid("reduce_fn", "required when num_reducers > 0"));
        }
        if !(1..=100).contains(&self.buffer_threshold_percent) {
            return Err(invalid("buffer_threshold_percent", "must be within 1..=100"));
        }
        if self.merge_fan_in < 2 {
            return Err(invalid("merge_fan_in", "must be at least 2"));
        }
        if self.input_buffer_bytes == 0 {
            return Err(invalid("input_buffer_bytes", "must be positive"));
        }
        if self.output_buffer_bytes == 0 {
            return Err(invalid("output_buffer_bytes", "must be positive"));
        }
        if self.multipart_part_bytes == 0 {
            return Err(invalid("multipart_part_bytes", "must be positive"));
        }
        if self.multipart_part_bytes > self.output_buffer_bytes {
            return Err(invalid(
                "multipart_part_bytes",
                "must not exceed output_buffer_bytes",
            ));
        }
        if self.record_input && !self.binary_mode {
            return Err(invalid("record_input", "requires binary_mode"));
        }
        catalog.map(&self.map_fn)?;
        if let Some(r) = &self.reduce_fn {
            catalog.reduce(r)?;
        }
        Ok(())
    }

    /// Bytes of encoded records a mapper buffers before spilling.
    pub fn spill_threshold_bytes(&self) -> u64 {
        let t = self.output_buffer_bytes as u128 * self.buffer_threshold_percent as u128 / 100;
        (t as u64).max(1)
    }

    /// The job id; panics if the coordinator has not assigned one yet.
    pub fn id(&self) -> &str {
        self.job_id.as_deref().expect("job id assigned at submission")
    }
}

pub fn validate_job_id(id: &str) -> Result<(), ConfigError> {
    let ok = !id.is_empty()
        && id.len() <= 128
        && id
            .bytes()
            .all(|b| b.is_ascii_alphanumeric() || matches!(b, b'-' | b'_' | b'.'))
        && !id.starts_with('.');
    if ok {
        Ok(())
    } else {
        Err(invalid("job_id", format!("`{id}` must match [A-Za-z0-9_.-]{{1,128}}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const BASE: &str = r#"{"input_prefixes":["in/"],"output_prefix":"out/","num_mappers":4,
        "num_reducers":2,"map_fn":"wordcount_map","reduce_fn":"sum_reduce"}"#;

    fn parse(raw: &str) -> Result<JobConfig, ConfigError> {
        parse_job_config(raw, &Catalog::builtin())
    }

    fn with(field: &str) -> String {
        BASE.replacen('{', &format!("{{{field},"), 1)
    }

    #[test]
    fn defaults_are_applied() {
        let cfg = parse(BASE).unwrap();
        assert_eq!(cfg.input_buffer_bytes, 52_428_800);
        assert_eq!(cfg.output_buffer_bytes, 52_428_800);
        assert_eq!(cfg.multipart_part_bytes, 5_242_880);
        assert_eq!(cfg.merge_fan_in, 100);
        assert_eq!(cfg.buffer_threshold_percent, 75);
        assert!(cfg.combiner_enabled);
        assert!(!cfg.run_finalizer && !cfg.binary_mode && !cfg.final_binary);
        assert_eq!(cfg.job_id, None);
    }

    #[test]
    fn finalizer_without_reducers_is_invalid() {
        let raw = r#"{"input_prefixes":["in/"],"output_prefix":"out/","num_mappers":1,
            "num_reducers":0,"run_finalizer":true,"map_fn":"identity_map"}"#;
        assert!(matches!(
            parse(raw),
            Err(ConfigError::InvalidConfig { field: "run_finalizer", .. })
        ));
    }

    #[test]
    fn zero_mappers_is_invalid() {
        let raw = BASE.replace("\"num_mappers\":4", "\"num_mappers\":0");
        assert!(matches!(
            parse(&raw),
            Err(ConfigError::InvalidConfig { field: "num_mappers", .. })
        ));
    }

    #[test]
    fn invariant_violations_name_their_field() {
        let cases = [
            (with("\"buffer_threshold_percent\":0"), "buffer_threshold_percent"),
            (with("\"buffer_threshold_percent\":101"), "buffer_threshold_percent"),
            (with("\"merge_fan_in\":1"), "merge_fan_in"),
            (with("\"multipart_part_bytes\":60000000"), "multipart_part_bytes"),
            (with("\"record_input\":true"), "record_input"),
            (with("\"job_id\":\"a/b\""), "job_id"),
            (BASE.replace(",\"reduce_fn\":\"sum_reduce\"", ""), "reduce_fn"),
            (BASE.replace("[\"in/\"]", "[]"), "input_prefixes"),
        ];
        for (raw, field) in cases {
            match parse(&raw) {
                Err(ConfigError::InvalidConfig { field: f, .. }) => assert_eq!(f, field, "{raw}"),
                other => panic!("{raw}: expected InvalidConfig({field}), got {other:?}"),
            }
        }
        let map_only_with_reduce = BASE.replace("\"num_reducers\":2", "\"num_reducers\":0");
        assert!(matches!(
            parse(&map_only_with_reduce),
            Err(ConfigError::InvalidConfig { field: "reduce_fn", .. })
        ));
    }

    #[test]
    fn syntax_errors_and_unknown_fields_are_malformed() {
        assert!(matches!(parse("{"), Err(ConfigError::MalformedConfig(_))));
        assert!(matches!(
            parse(&with("\"num_mapers\":3")),
            Err(ConfigError::MalformedConfig(_))
        ));
    }

    #[test]
    fn unknown_functions_are_reported() {
        let raw = BASE.replace("wordcount_map", "no_such_fn");
        assert!(matches!(parse(&raw), Err(ConfigError::UnknownFunction(_))));
    }

    #[test]
    fn parse_is_idempotent_through_serialization() {
        for raw in [BASE.to_string(), with("\"job_id\":\"j-1\""), with("\"final_binary\":true")] {
            let once = parse(&raw).unwrap();
            let twice = parse(&once.to_json()).unwrap();
            assert_eq!(once, twice);
        }
    }

    #[test]
    fn spill_threshold_is_percentage_of_output_buffer() {
        let mut cfg = parse(BASE).unwrap();
        cfg.output_buffer_bytes = 1000;
        assert_eq!(cfg.spill_threshold_bytes(), 750);
        cfg.buffer_threshold_percent = 100;
        assert_eq!(cfg.spill_threshold_bytes(), 1000);
    }
}
