//! End-to-end runner over in-process backends.

use std::sync::Arc;
use std::time::Duration;

use spillway_core::config::JobConfig;
use spillway_core::finalizer::final_output_key;
use spillway_core::mapper::intermediate_prefix;
use spillway_core::metastore::{JobState, MetaStore};
use spillway_core::runtime::{Deployment, DeploymentBuilder};
use spillway_core::storage::{read_object, LocalStore, MemoryStore, ObjectPath, ObjectStore};
use spillway_core::udf::FunctionRef;

pub const BUCKET: &str = "data";
pub const JOB_TIMEOUT: Duration = Duration::from_secs(120);

/// A deployment builder over a fresh in-memory store and metastore.
pub fn memory_builder() -> DeploymentBuilder {
    Deployment::builder(Arc::new(MemoryStore::new()), MetaStore::in_memory(), BUCKET)
}

/// A deployment builder over a directory-backed store.
pub fn local_builder(root: &std::path::Path) -> DeploymentBuilder {
    Deployment::builder(Arc::new(LocalStore::new(root)), MetaStore::in_memory(), BUCKET)
}

/// Word count with buffers scaled down to desk size: 1MB input and output
/// buffers, 128KB parts, 75% threshold, fan-in 100, combiner and finalizer on.
pub fn wordcount_config(input_prefix: &str, output_prefix: &str, m: u32, r: u32) -> JobConfig {
    let mut cfg = JobConfig::new(
        vec![input_prefix.to_string()],
        output_prefix,
        m,
        r,
        FunctionRef::new("wordcount_map"),
        Some(FunctionRef::new("sum_reduce")),
    );
    cfg.run_finalizer = r > 0;
    cfg.input_buffer_bytes = 1 << 20;
    cfg.output_buffer_bytes = 1 << 20;
    cfg.multipart_part_bytes = 128 << 10;
    cfg.buffer_threshold_percent = 75;
    cfg.merge_fan_in = 100;
    cfg.combiner_enabled = true;
    cfg
}

pub fn put(store: &dyn ObjectStore, key: &str, bytes: &[u8]) {
    store
        .put_object(&ObjectPath::new(BUCKET, key).unwrap(), bytes)
        .expect("upload input");
}

pub fn get(store: &dyn ObjectStore, key: &str) -> Vec<u8> {
    read_object(store, &ObjectPath::new(BUCKET, key).unwrap()).unwrap_or_else(|e| panic!("reading {key}: {e}"))
}

/// Submits and waits for a terminal phase.
pub fn run_job(d: &Deployment, cfg: JobConfig) -> JobState {
    let id = d.submit(cfg).expect("job accepted");
    let state = d.wait_for_terminal(&id, JOB_TIMEOUT).expect("job state readable");
    assert!(state.phase.is_terminal(), "job {id} stuck in {}", state.phase);
    state
}

/// The `final` object of a finished job.
pub fn final_output(d: &Deployment, state: &JobState) -> Vec<u8> {
    get(d.store().as_ref(), &final_output_key(&state.config))
}

/// Total bytes of spill objects a job uploaded.
pub fn intermediate_bytes(store: &dyn ObjectStore, job_id: &str) -> u64 {
    store
        .list_objects(BUCKET, &intermediate_prefix(job_id))
        .unwrap()
        .iter()
        .map(|o| o.size)
        .sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{count_diff, parse_counts};
    use crate::{generate_corpus, oracle_wordcount};
    use spillway_core::metastore::Phase;

    #[test]
    fn small_wordcount_matches_oracle() {
        let d = memory_builder().start().unwrap();
        let corpus = generate_corpus(300_000, 2_000, true, 4);
        let cut = corpus[..100_000].iter().rposition(|&b| b == b'\n').unwrap() + 1;
        put(d.store().as_ref(), "in/a", &corpus[..cut]);
        put(d.store().as_ref(), "in/b", &corpus[cut..]);
        let mut cfg = wordcount_config("in/", "out", 3, 2);
        cfg.output_buffer_bytes = 64 << 10;
        cfg.multipart_part_bytes = 16 << 10;
        let st = run_job(&d, cfg);
        assert_eq!(st.phase, Phase::Completed, "{:?}", st.failure_reason);
        let got = parse_counts(&final_output(&d, &st));
        assert_eq!(count_diff(&got, &oracle_wordcount(&corpus)), None);
        assert!(intermediate_bytes(d.store().as_ref(), &st.job_id) > 0);
    }
}
