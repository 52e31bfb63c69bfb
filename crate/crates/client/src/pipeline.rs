//! Multi-stage pipelines and their expansion into chained jobs.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use spillway_core::config::{
    JobConfig, DEFAULT_BUFFER_BYTES, DEFAULT_MERGE_FAN_IN, DEFAULT_MULTIPART_PART_BYTES, DEFAULT_THRESHOLD_PERCENT,
};
use spillway_core::storage::join_key;
use spillway_core::udf::FunctionRef;

use crate::ClientError;

/// Settings shared by every stage of a pipeline.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BaseConfig {
    pub input_prefixes: Vec<String>,
    pub output_prefix: String,
    pub num_mappers: u32,
    #[serde(default)]
    pub num_reducers: u32,
    #[serde(default)]
    pub run_finalizer: bool,
    /// Applies to the first stage only; later stages read codec streams.
    #[serde(default)]
    pub binary_mode: bool,
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
    #[serde(default)]
    pub final_binary: bool,
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

impl BaseConfig {
    pub fn new(input_prefixes: Vec<String>, output_prefix: impl Into<String>, num_mappers: u32, num_reducers: u32) -> Self {
        BaseConfig {
            input_prefixes,
            output_prefix: output_prefix.into(),
            num_mappers,
            num_reducers,
            run_finalizer: false,
            binary_mode: false,
            input_buffer_bytes: DEFAULT_BUFFER_BYTES,
            output_buffer_bytes: DEFAULT_BUFFER_BYTES,
            buffer_threshold_percent: DEFAULT_THRESHOLD_PERCENT,
            multipart_part_bytes: DEFAULT_MULTIPART_PART_BYTES,
            merge_fan_in: DEFAULT_MERGE_FAN_IN,
            combiner_enabled: true,
            final_binary: false,
        }
    }
}

/// Per-stage replacements for base settings.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageOverride {
    pub num_mappers: Option<u32>,
    pub input_buffer_bytes: Option<u64>,
    pub output_buffer_bytes: Option<u64>,
    pub buffer_threshold_percent: Option<u8>,
    pub multipart_part_bytes: Option<u64>,
    pub merge_fan_in: Option<usize>,
    pub combiner_enabled: Option<bool>,
}

/// An ordered list of map functions with an optional final reduce.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    pub stages: Vec<FunctionRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reduce: Option<FunctionRef>,
    pub base: BaseConfig,
    /// Keyed by stage index.
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub overrides: BTreeMap<usize, StageOverride>,
}

impl PipelineSpec {
    pub fn new(stages: Vec<FunctionRef>, reduce: Option<FunctionRef>, base: BaseConfig) -> Self {
        PipelineSpec {
            name: None,
            stages,
            reduce,
            base,
            overrides: BTreeMap::new(),
        }
    }

    /// Reads one spec or a list of specs from JSON.
    pub fn parse_many(raw: &str) -> Result<Vec<PipelineSpec>, ClientError> {
        let value: serde_json::Value =
            serde_json::from_str(raw).map_err(|e| ClientError::InvalidPipeline(e.to_string()))?;
        let parsed = if value.is_array() {
            serde_json::from_value(value)
        } else {
            serde_json::from_value(value).map(|one| vec![one])
        };
        parsed.map_err(|e| ClientError::InvalidPipeline(e.to_string()))
    }
}

/// Output prefix of intermediate stage `i`.
pub fn stage_prefix(base_output: &str, i: usize) -> String {
    format!("{}/", join_key(base_output.trim_end_matches('/'), &format!("stage-{i}")))
}

fn invalid(msg: impl Into<String>) -> ClientError {
    ClientError::InvalidPipeline(msg.into())
}

/// One job per stage. Every stage but the last is map-only and writes under
/// its own intermediate prefix, which the next stage reads. Stages after the
/// first consume codec records, so they run in binary record mode.
pub fn expand_pipeline(spec: &PipelineSpec) -> Result<Vec<JobConfig>, ClientError> {
    let n = spec.stages.len();
    if n == 0 {
        return Err(invalid("a pipeline needs at least one stage"));
    }
    let base = &spec.base;
    match (&spec.reduce, base.num_reducers) {
        (None, r) if r > 0 => return Err(invalid("num_reducers > 0 needs a reduce function")),
        (Some(_), 0) => return Err(invalid("a reduce function needs num_reducers >= 1")),
        _ => {}
    }
    if base.run_finalizer && spec.reduce.is_none() {
        return Err(invalid("the finalizer needs a reduce stage"));
    }
    if let Some(i) = spec.overrides.keys().find(|&&i| i >= n) {
        return Err(invalid(format!("override for stage {i}, but there are {n} stages")));
    }
    let out = base.output_prefix.trim_end_matches('/');
    if out.is_empty() {
        return Err(invalid("output_prefix must not be empty"));
    }
    let mut jobs = Vec::with_capacity(n);
    for (i, map_fn) in spec.stages.iter().enumerate() {
        let last = i + 1 == n;
        let input_prefixes = if i == 0 {
            base.input_prefixes.clone()
        } else {
            vec![stage_prefix(out, i - 1)]
        };
        let output_prefix = if last { out.to_string() } else { stage_prefix(out, i) };
        let (reducers, reduce_fn) = if last {
            (base.num_reducers, spec.reduce.clone())
        } else {
            (0, None)
        };
        let mut cfg = JobConfig::new(input_prefixes, output_prefix, base.num_mappers, reducers, map_fn.clone(), reduce_fn);
        cfg.run_finalizer = last && base.run_finalizer;
        cfg.final_binary = last && base.final_binary;
        cfg.binary_mode = if i == 0 { base.binary_mode } else { true };
        cfg.record_input = i > 0;
        cfg.input_buffer_bytes = base.input_buffer_bytes;
        cfg.output_buffer_bytes = base.output_buffer_bytes;
        cfg.buffer_threshold_percent = base.buffer_threshold_percent;
        cfg.multipart_part_bytes = base.multipart_part_bytes;
        cfg.merge_fan_in = base.merge_fan_in;
        cfg.combiner_enabled = base.combiner_enabled;
        if let Some(o) = spec.overrides.get(&i) {
            cfg.num_mappers = o.num_mappers.unwrap_or(cfg.num_mappers);
            cfg.input_buffer_bytes = o.input_buffer_bytes.unwrap_or(cfg.input_buffer_bytes);
            cfg.output_buffer_bytes = o.output_buffer_bytes.unwrap_or(cfg.output_buffer_bytes);
            cfg.buffer_threshold_percent = o.buffer_threshold_percent.unwrap_or(cfg.buffer_threshold_percent);
            cfg.multipart_part_bytes = o.multipart_part_bytes.unwrap_or(cfg.multipart_part_bytes);
            cfg.merge_fan_in = o.merge_fan_in.unwrap_or(cfg.merge_fan_in);
            cfg.combiner_enabled = o.combiner_enabled.unwrap_or(cfg.combiner_enabled);
        }
        jobs.push(cfg);
    }
    Ok(jobs)
}
