//! Reduce task: find this reducer's spills, merge them, and apply the
//! reduce function once per key.

use crate::config::JobConfig;
use crate::mapper::{intermediate_prefix, SpillName};
use crate::merge::{merge_into, MergeSettings, MergeStats, RunInput, SpillDir};
use crate::record::Record;
use crate::storage::{join_key, ObjectPath, ObjectStore, PartWriter, StoreError};
use crate::udf::ReduceUdf;
use crate::worker::{TaskError, WorkerContext};

/// Spill objects addressed to `reducer_id`, in listing order. Objects under
/// the prefix whose names do not parse are skipped.
pub fn discover_spills(
    store: &dyn ObjectStore,
    bucket: &str,
    job_id: &str,
    reducer_id: u32,
) -> Result<Vec<ObjectPath>, StoreError> {
    let prefix = intermediate_prefix(job_id);
    let mut out = Vec::new();
    for obj in store.list_objects(bucket, &prefix)? {
        let rest = &obj.path.key()[prefix.len()..];
        match SpillName::parse(rest) {
            Some(n) if n.reducer_id == reducer_id => out.push(obj.path),
            Some(_) => {}
            None => log::warn!("ignoring unexpected object {} in spill area", obj.path),
        }
    }
    Ok(out)
}

pub fn reduce_output_key(cfg: &JobConfig, reducer_id: u32) -> String {
    join_key(&cfg.output_prefix, &format!("reduce-{reducer_id}"))
}

/// Calls `udf` once per maximal run of equal keys in a sorted stream.
pub struct GroupReducer<'u> {
    udf: &'u ReduceUdf,
    key: Option<Vec<u8>>,
    values: Vec<Vec<u8>>,
    pub groups: u64,
}

impl<'u> GroupReducer<'u> {
    pub fn new(udf: &'u ReduceUdf) -> Self {
        GroupReducer {
            udf,
            key: None,
            values: Vec::new(),
            groups: 0,
        }
    }

    /// Adds a record; returns the reduced previous group when `rec` opens a
    /// new one.
    pub fn push(&mut self, rec: Record) -> Result<Option<Record>, TaskError> {
        let done = match &self.key {
            Some(k) if *k == rec.key => None,
            Some(_) => self.close()?,
            None => None,
        };
        if self.key.is_none() {
            self.key = Some(rec.key);
        }
        self.values.push(rec.value);
        Ok(done)
    }

    /// Reduces the open group, if any.
    pub fn close(&mut self) -> Result<Option<Record>, TaskError> {
        let Some(key) = self.key.take() else {
            return Ok(None);
        };
        let values = std::mem::take(&mut self.values);
        self.groups += 1;
        self.udf
            .call(&key, &values)
            .map(Some)
            .map_err(|source| TaskError::Udf {
                name: self.udf.name().to_string(),
                source,
            })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct ReduceStats {
    pub spills: usize,
    pub groups: u64,
    pub output_bytes: u64,
    pub merge: MergeStats,
}

/// Reduce task for reducer `reducer_id` of the job.
pub fn run_reduce_task(ctx: &WorkerContext, cfg: &JobConfig, reducer_id: u32) -> Result<ReduceStats, TaskError> {
    let reduce_ref = cfg
        .reduce_fn
        .as_ref()
        .ok_or_else(|| TaskError::Invalid("job has no reduce function".into()))?;
    let udf = ctx.catalog.reduce(reduce_ref)?;
    let spills = discover_spills(ctx.store(), &ctx.bucket, cfg.id(), reducer_id)?;
    let n_spills = spills.len();
    let out_path = ctx.path(reduce_output_key(cfg, reducer_id))?;
    let mut writer = PartWriter::new(ctx.store(), out_path, cfg.multipart_part_bytes);
    let settings = MergeSettings {
        fan_in: cfg.merge_fan_in,
        store: Some(ctx.store()),
        read_window: (cfg.input_buffer_bytes / cfg.merge_fan_in.max(1) as u64).max(1 << 12),
        spill: Some(SpillDir {
            bucket: ctx.bucket.clone(),
            prefix: format!("{}/merge/{reducer_id}", cfg.id()),
            memory_limit: cfg.output_buffer_bytes,
            part_bytes: cfg.multipart_part_bytes,
        }),
    };
    let mut groups = GroupReducer::new(&udf);
    let runs = spills.into_iter().map(RunInput::Object).collect();
    let merge = merge_into(&settings, runs, &mut |rec| {
        if let Some(out) = groups.push(rec)? {
            writer.write(&out.encode())?;
        }
        Ok(())
    });
    let merge = match merge {
        Ok(m) => m,
        Err(e) => {
            let _ = writer.abort();
            return Err(e);
        }
    };
    if let Some(out) = groups.close()? {
        writer.write(&out.encode())?;
    }
    let output_bytes = writer.finish()?;
    Ok(ReduceStats {
        spills: n_spills,
        groups: groups.groups,
        output_bytes,
        merge,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::MemoryStore;
    use crate::udf::{Catalog, FunctionRef};

    #[test]
    fn discovery_filters_by_reducer_and_skips_strays() {
        let s = MemoryStore::new();
        for k in ["spill-0-0-0", "spill-1-0-0", "spill-0-0-1", "notes.txt", "spill-0-x-1"] {
            s.put_object(&ObjectPath::new("b", format!("j/intermediate/{k}")).unwrap(), b"").unwrap();
        }
        s.put_object(&ObjectPath::new("b", "j2/intermediate/spill-0-0-0").unwrap(), b"").unwrap();
        let keys = |r| -> Vec<String> {
            discover_spills(&s, "b", "j", r)
                .unwrap()
                .into_iter()
                .map(|p| p.file_name().to_string())
                .collect()
        };
        assert_eq!(keys(0), ["spill-0-0-0", "spill-0-0-1"]);
        assert_eq!(keys(1), ["spill-1-0-0"]);
        assert!(keys(2).is_empty());
    }

    #[test]
    fn one_call_per_key_group() {
        let cat = Catalog::builtin();
        let sum = cat.reduce(&FunctionRef::new("sum_reduce")).unwrap();
        let mut g = GroupReducer::new(&sum);
        let mut out = Vec::new();
        for (k, v) in [("a", "1"), ("a", "1"), ("b", "1")] {
            out.extend(g.push(Record::new(k, v)).unwrap());
        }
        out.extend(g.close().unwrap());
        assert_eq!(out, [Record::new("a", "2"), Record::new("b", "1")]);
        assert_eq!(g.groups, 2);
        assert!(g.close().unwrap().is_none());
    }
}
