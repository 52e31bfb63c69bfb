//! Map task: stream the assigned chunk, apply the map function, and spill
//! sorted, partitioned runs for the reducers.

use std::fmt;

use crate::config::JobConfig;
use crate::merge::{merge_into, MergeSettings, RunInput, SpillDir};
use crate::metastore::ChunkAssignment;
use crate::record::{encode_all, Record, RecordDecoder};
use crate::splitter::RECORD_DELIMITER;
use crate::storage::{join_key, ObjectPath, PartWriter, WindowReader};
use crate::udf::{MapUdf, ReduceUdf};
use crate::worker::{TaskError, WorkerContext};

const FNV_OFFSET_BASIS: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

pub fn fnv1a_64(bytes: &[u8]) -> u64 {
    let mut h = FNV_OFFSET_BASIS;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(FNV_PRIME);
    }
    h
}

/// Target reducer of `key` among `r` reducers.
pub fn partition_of(key: &[u8], r: u32) -> u32 {
    assert!(r >= 1, "partition_of needs at least one reducer");
    (fnv1a_64(key) % r as u64) as u32
}

/// Key prefix holding a job's spill objects.
pub fn intermediate_prefix(job_id: &str) -> String {
    format!("{job_id}/intermediate/")
}

/// Identity of one spill object.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct SpillName {
    pub reducer_id: u32,
    pub file_index: u32,
    pub mapper_id: u32,
}

impl fmt::Display for SpillName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "spill-{}-{}-{}", self.reducer_id, self.file_index, self.mapper_id)
    }
}

impl SpillName {
    /// Parses a file name of the form `spill-{r}-{i}-{m}`.
    pub fn parse(name: &str) -> Option<SpillName> {
        let mut it = name.strip_prefix("spill-")?.split('-');
        let mut num = || -> Option<u32> {
            let s = it.next()?;
            if s.is_empty() || !s.bytes().all(|b| b.is_ascii_digit()) || (s.len() > 1 && s.starts_with('0')) {
                return None;
            }
            s.parse().ok()
        };
        let n = SpillName {
            reducer_id: num()?,
            file_index: num()?,
            mapper_id: num()?,
        };
        match it.next() {
            None => Some(n),
            Some(_) => None,
        }
    }

    pub fn key(&self, job_id: &str) -> String {
        format!("{}{self}", intermediate_prefix(job_id))
    }
}

/// A spill object that was uploaded.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpillObject {
    pub name: SpillName,
    pub path: ObjectPath,
    pub bytes: u64,
    pub records: usize,
}

/// Records emitted by the map function awaiting a spill.
#[derive(Debug, Default)]
pub struct MapBuffer {
    records: Vec<Record>,
    resident_bytes: u64,
}

impl MapBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, rec: Record) {
        self.resident_bytes += rec.encoded_len() as u64;
        self.records.push(rec);
    }

    /// Sum of the encoded sizes of the buffered records.
    pub fn resident_bytes(&self) -> u64 {
        self.resident_bytes
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[Record] {
        &self.records
    }

    /// Empties the buffer, returning its records.
    pub fn take(&mut self) -> Vec<Record> {
        self.resident_bytes = 0;
        std::mem::take(&mut self.records)
    }
}

/// Stable sort by key, then optionally collapse each run of equal keys with
/// `combiner`, feeding values in encounter order.
pub fn sort_and_combine(mut records: Vec<Record>, combiner: Option<&ReduceUdf>) -> Result<Vec<Record>, TaskError> {
    records.sort_by(|a, b| a.key.cmp(&b.key));
    let Some(udf) = combiner else {
        return Ok(records);
    };
    let mut out = Vec::new();
    let mut it = records.into_iter().peekable();
    while let Some(first) = it.next() {
        let key = first.key;
        let mut values = vec![first.value];
        while let Some(next) = it.next_if(|r| r.key == key) {
            values.push(next.value);
        }
        let rec = udf.call(&key, &values).map_err(|source| TaskError::Udf {
            name: udf.name().to_string(),
            source,
        })?;
        out.push(rec);
    }
    Ok(out)
}

/// Sorts, combines and partitions the buffer, uploading one spill object
/// per non-empty partition. The buffer is left empty.
pub fn spill_buffer(
    ctx: &WorkerContext,
    cfg: &JobConfig,
    buffer: &mut MapBuffer,
    mapper_id: u32,
    spill_index: u32,
    combiner: Option<&ReduceUdf>,
) -> Result<Vec<SpillObject>, TaskError> {
    let r = cfg.num_reducers;
    if r == 0 {
        return Err(TaskError::Invalid("spill_buffer needs at least one reducer".into()));
    }
    let records = sort_and_combine(buffer.take(), combiner)?;
    let mut parts: Vec<Vec<Record>> = vec![Vec::new(); r as usize];
    for rec in records {
        parts[partition_of(&rec.key, r) as usize].push(rec);
    }
    let mut out = Vec::new();
    for (reducer_id, recs) in parts.into_iter().enumerate() {
        if recs.is_empty() {
            continue;
        }
        let name = SpillName {
            reducer_id: reducer_id as u32,
            file_index: spill_index,
            mapper_id,
        };
        let path = ctx.path(name.key(cfg.id()))?;
        let bytes = encode_all(&recs);
        let mut w = PartWriter::new(ctx.store(), path.clone(), cfg.multipart_part_bytes);
        w.write(&bytes)?;
        w.finish()?;
        out.push(SpillObject {
            name,
            path,
            bytes: bytes.len() as u64,
            records: recs.len(),
        });
    }
    Ok(out)
}

/// Map-only output object of a mapper.
pub fn map_only_output_key(cfg: &JobConfig, mapper_id: u32) -> String {
    join_key(&cfg.output_prefix, &format!("mapper-{mapper_id}"))
}

/// Per-task counters.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MapStats {
    pub map_calls: u64,
    pub records_emitted: u64,
    pub spills: Vec<SpillObject>,
    /// Bytes written as intermediate data (spills or map-only runs).
    pub intermediate_bytes: u64,
}

/// Where buffered records go when the threshold is crossed.
enum Sink<'c> {
    Partitioned { combiner: Option<ReduceUdf> },
    MapOnly { runs: Vec<RunInput>, ctx: &'c WorkerContext },
}

struct MapTask<'c> {
    ctx: &'c WorkerContext,
    cfg: &'c JobConfig,
    mapper_id: u32,
    udf: MapUdf,
    buffer: MapBuffer,
    threshold: u64,
    spill_index: u32,
    sink: Sink<'c>,
    stats: MapStats,
}

impl MapTask<'_> {
    fn call(&mut self, key: &[u8], payload: &[u8]) -> Result<(), TaskError> {
        self.stats.map_calls += 1;
        let recs = self.udf.call(key, payload).map_err(|source| TaskError::Udf {
            name: self.udf.name().to_string(),
            source,
        })?;
        for rec in recs {
            self.stats.records_emitted += 1;
            self.buffer.push(rec);
            if self.buffer.resident_bytes() >= self.threshold {
                self.flush()?;
            }
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<(), TaskError> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        match &mut self.sink {
            Sink::Partitioned { combiner } => {
                let spills = spill_buffer(
                    self.ctx,
                    self.cfg,
                    &mut self.buffer,
                    self.mapper_id,
                    self.spill_index,
                    combiner.as_ref(),
                )?;
                self.stats.intermediate_bytes += spills.iter().map(|s| s.bytes).sum::<u64>();
                self.stats.spills.extend(spills);
            }
            Sink::MapOnly { runs, ctx } => {
                let recs = sort_and_combine(self.buffer.take(), None)?;
                let key = format!("{}/maponly/{}/run-{}", self.cfg.id(), self.mapper_id, self.spill_index);
                let path = ctx.path(key)?;
                let bytes = encode_all(&recs);
                let mut w = PartWriter::new(ctx.store(), path.clone(), self.cfg.multipart_part_bytes);
                w.write(&bytes)?;
                w.finish()?;
                self.stats.intermediate_bytes += bytes.len() as u64;
                runs.push(RunInput::Object(path));
            }
        }
        self.spill_index += 1;
        Ok(())
    }

    /// Text input: windows are cut after the last LF they contain; a line
    /// longer than the window is carried until its LF arrives.
    fn feed_text(&mut self, path: &ObjectPath, start: u64, end: u64) -> Result<(), TaskError> {
        let store = self.ctx.store();
        let mut carry: Vec<u8> = Vec::new();
        let mut carry_start = start;
        for window in WindowReader::new(store, path.clone(), start, end, self.cfg.input_buffer_bytes) {
            let window = window?;
            carry.extend_from_slice(&window);
            if let Some(i) = carry.iter().rposition(|&b| b == RECORD_DELIMITER) {
                let rest = carry.split_off(i + 1);
                let chunk = std::mem::replace(&mut carry, rest);
                self.call(chunk_key(path, carry_start).as_bytes(), &chunk)?;
                carry_start += chunk.len() as u64;
            }
        }
        if !carry.is_empty() {
            self.call(chunk_key(path, carry_start).as_bytes(), &carry)?;
        }
        Ok(())
    }

    fn feed_binary(&mut self, path: &ObjectPath, start: u64, end: u64) -> Result<(), TaskError> {
        let mut pos = start;
        for window in WindowReader::new(self.ctx.store(), path.clone(), start, end, self.cfg.input_buffer_bytes) {
            let window = window?;
            self.call(chunk_key(path, pos).as_bytes(), &window)?;
            pos += window.len() as u64;
        }
        Ok(())
    }

    /// Record input: one map call per decoded record, with the record's key
    /// and value as the map function's key and payload.
    fn feed_records(&mut self, path: &ObjectPath, start: u64, end: u64) -> Result<(), TaskError> {
        let mut dec = RecordDecoder::new();
        for window in WindowReader::new(self.ctx.store(), path.clone(), start, end, self.cfg.input_buffer_bytes) {
            dec.feed(&window?);
            while let Some(rec) = dec.next_record() {
                self.call(&rec.key, &rec.value)?;
            }
        }
        dec.finish()?;
        Ok(())
    }
}

/// The `k1` handed to the map function for a window.
pub fn chunk_key(path: &ObjectPath, start: u64) -> String {
    format!("{}:{start}", path.key())
}

/// Map task for mapper `mapper_id` of the job.
pub fn run_map_task(ctx: &WorkerContext, cfg: &JobConfig, mapper_id: u32) -> Result<MapStats, TaskError> {
    let assignment = ctx.meta.fetch_chunk_assignment(cfg.id(), mapper_id)?;
    run_assignment(ctx, cfg, &assignment)
}

pub fn run_assignment(ctx: &WorkerContext, cfg: &JobConfig, assignment: &ChunkAssignment) -> Result<MapStats, TaskError> {
    let udf = ctx.catalog.map(&cfg.map_fn)?;
    let sink = if cfg.num_reducers == 0 {
        Sink::MapOnly { runs: Vec::new(), ctx }
    } else {
        let combiner = match (&cfg.reduce_fn, cfg.combiner_enabled) {
            (Some(r), true) => Some(ctx.catalog.reduce(r)?),
            _ => None,
        };
        Sink::Partitioned { combiner }
    };
    let mut task = MapTask {
        ctx,
        cfg,
        mapper_id: assignment.mapper_id,
        udf,
        buffer: MapBuffer::new(),
        threshold: cfg.spill_threshold_bytes(),
        spill_index: 0,
        sink,
        stats: MapStats::default(),
    };
    for piece in &assignment.pieces {
        let (s, e) = (piece.range.start(), piece.range.end());
        if cfg.record_input {
            task.feed_records(&piece.path, s, e)?;
        } else if cfg.binary_mode {
            task.feed_binary(&piece.path, s, e)?;
        } else {
            task.feed_text(&piece.path, s, e)?;
        }
    }
    match task.sink {
        Sink::Partitioned { .. } => {
            task.flush()?;
        }
        Sink::MapOnly { ref mut runs, .. } => {
            // The last buffer is merged straight from memory.
            let tail = sort_and_combine(task.buffer.take(), None)?;
            let mut runs = std::mem::take(runs);
            runs.push(RunInput::Records(tail));
            let out = ctx.path(map_only_output_key(cfg, assignment.mapper_id))?;
            let mut w = PartWriter::new(ctx.store(), out, cfg.multipart_part_bytes);
            let settings = MergeSettings {
                fan_in: cfg.merge_fan_in,
                store: Some(ctx.store()),
                read_window: (cfg.input_buffer_bytes / cfg.merge_fan_in.max(1) as u64).max(1 << 12),
                spill: Some(SpillDir {
                    bucket: ctx.bucket.clone(),
                    prefix: format!("{}/maponly/{}/merge", cfg.id(), assignment.mapper_id),
                    memory_limit: cfg.output_buffer_bytes,
                    part_bytes: cfg.multipart_part_bytes,
                }),
            };
            merge_into(&settings, runs, &mut |rec| Ok(w.write(&rec.encode())?))?;
            w.finish()?;
        }
    }
    Ok(task.stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::udf::{Catalog, FunctionRef};

    #[test]
    fn fnv_reference_values() {
        assert_eq!(fnv1a_64(b""), 14695981039346656037);
        assert_eq!(fnv1a_64(b"a"), 0xaf63dc4c8601ec8c);
        assert_eq!(fnv1a_64(b"foobar"), 0x85944171f73967e8);
        assert_eq!(partition_of(b"", 5), 2);
        assert_eq!(partition_of(b"anything", 1), 0);
    }

    #[test]
    fn spill_names_round_trip() {
        let n = SpillName {
            reducer_id: 12,
            file_index: 0,
            mapper_id: 3,
        };
        assert_eq!(n.to_string(), "spill-12-0-3");
        assert_eq!(SpillName::parse("spill-12-0-3"), Some(n));
        for bad in ["spill-1-2", "spill-1-2-3-4", "spill-a-0-0", "spill--0-0", "spill-01-0-0", "run-0", "spill-1-2-3x"] {
            assert_eq!(SpillName::parse(bad), None, "{bad}");
        }
    }

    #[test]
    fn buffer_tracks_encoded_bytes() {
        let mut b = MapBuffer::new();
        b.push(Record::new("ab", "1"));
        b.push(Record::new("", ""));
        assert_eq!(b.resident_bytes(), 11 + 8);
        assert_eq!(b.take().len(), 2);
        assert_eq!(b.resident_bytes(), 0);
    }

    #[test]
    fn combine_groups_equal_keys_after_stable_sort() {
        let cat = Catalog::builtin();
        let sum = cat.reduce(&FunctionRef::new("sum_reduce")).unwrap();
        let buf = vec![Record::new("b", "1"), Record::new("a", "1"), Record::new("a", "1")];
        assert_eq!(
            sort_and_combine(buf.clone(), Some(&sum)).unwrap(),
            [Record::new("a", "2"), Record::new("b", "1")]
        );
        assert_eq!(
            sort_and_combine(buf, None).unwrap(),
            [Record::new("a", "1"), Record::new("a", "1"), Record::new("b", "1")]
        );
    }
}
