//! Hierarchical k-way merge of sorted record runs.
//!
//! At most `fan_in` runs are open at once. While more runs remain, the first
//! `fan_in` are merged into one intermediate run that is appended to the end
//! of the list. Every record remembers the index of the input run it came
//! from and ties on equal keys are broken by that index, so the result is
//! the same as a stable sort of the inputs concatenated in order, however
//! many passes it takes.

use std::cmp::Ordering;
use std::collections::{BinaryHeap, VecDeque};

use crate::record::{Record, RecordDecoder};
use crate::storage::{join_key, ObjectPath, ObjectStore, PartWriter, WindowReader};
use crate::worker::TaskError;

/// One sorted input.
#[derive(Debug, Clone)]
pub enum RunInput {
    Records(Vec<Record>),
    Object(ObjectPath),
}

/// Where large intermediate runs are written.
#[derive(Debug, Clone)]
pub struct SpillDir {
    pub bucket: String,
    /// Key prefix; runs are named `{prefix}/run-{n}`.
    pub prefix: String,
    /// Intermediates larger than this many encoded bytes go to storage.
    pub memory_limit: u64,
    pub part_bytes: u64,
}

#[derive(Debug, Clone)]
pub struct MergeSettings<'a> {
    pub fan_in: usize,
    /// Needed when any input or intermediate lives in storage.
    pub store: Option<&'a dyn ObjectStore>,
    /// Bytes per ranged read of a stored run.
    pub read_window: u64,
    pub spill: Option<SpillDir>,
}

impl<'a> MergeSettings<'a> {
    /// Pure in-memory merging.
    pub fn in_memory(fan_in: usize) -> Self {
        MergeSettings {
            fan_in,
            store: None,
            read_window: 1 << 16,
            spill: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct MergeStats {
    /// Merges performed, the final one included.
    pub passes: usize,
    /// Intermediate runs written to storage.
    pub stored_intermediates: usize,
    /// Encoded size of the largest intermediate kept in memory.
    pub peak_memory_intermediate: u64,
    pub records_out: u64,
}

enum Run {
    Original { origin: u32, input: RunInput },
    Memory(Vec<(Record, u32)>),
    Stored(ObjectPath),
}

enum Source<'a> {
    Records(std::vec::IntoIter<Record>),
    Tagged(std::vec::IntoIter<(Record, u32)>),
    Object {
        reader: WindowReader<'a>,
        decoder: RecordDecoder,
        done: bool,
    },
}

struct Stream<'a> {
    source: Source<'a>,
    /// Set for original inputs; intermediate runs carry per-record origins.
    origin: Option<u32>,
    /// Last key seen, for sortedness checks on original inputs.
    last_key: Option<Vec<u8>>,
    name: String,
}

fn untag(rec: Record, name: &str) -> Result<(Record, u32), TaskError> {
    if rec.value.len() < 4 {
        return Err(TaskError::Invalid(format!("intermediate run {name} has an untagged record")));
    }
    let origin = u32::from_le_bytes(rec.value[..4].try_into().unwrap());
    Ok((Record::new(rec.key, rec.value[4..].to_vec()), origin))
}

fn tag(rec: &Record, origin: u32) -> Record {
    let mut v = Vec::with_capacity(rec.value.len() + 4);
    v.extend_from_slice(&origin.to_le_bytes());
    v.extend_from_slice(&rec.value);
    Record::new(rec.key.clone(), v)
}

impl Stream<'_> {
    fn raw_next(&mut self) -> Result<Option<Record>, TaskError> {
        match &mut self.source {
            Source::Records(it) => Ok(it.next()),
            Source::Tagged(_) => unreachable!("tagged sources are read through next()"),
            Source::Object { reader, decoder, done } => loop {
                if let Some(r) = decoder.next_record() {
                    return Ok(Some(r));
                }
                if *done {
                    decoder.finish()?;
                    return Ok(None);
                }
                match reader.next() {
                    Some(bytes) => decoder.feed(&bytes?),
                    None => *done = true,
                }
            },
        }
    }

    fn next(&mut self) -> Result<Option<(Record, u32)>, TaskError> {
        if let Source::Tagged(it) = &mut self.source {
            return Ok(it.next());
        }
        let Some(rec) = self.raw_next()? else {
            return Ok(None);
        };
        match self.origin {
            Some(origin) => {
                if let Some(prev) = &self.last_key {
                    if rec.key < *prev {
                        return Err(TaskError::UnsortedInput {
                            run: self.name.clone(),
                            key: String::from_utf8_lossy(&rec.key).into_owned(),
                        });
                    }
                }
                self.last_key = Some(rec.key.clone());
                Ok(Some((rec, origin)))
            }
            None => untag(rec, &self.name).map(Some),
        }
    }
}

struct Head {
    rec: Record,
    origin: u32,
    stream: usize,
}

impl PartialEq for Head {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for Head {}
impl PartialOrd for Head {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Head {
    // Reversed: BinaryHeap is a max-heap.
    fn cmp(&self, other: &Self) -> Ordering {
        (&other.rec.key, other.origin).cmp(&(&self.rec.key, self.origin))
    }
}

fn open<'a>(run: Run, settings: &MergeSettings<'a>) -> Result<Stream<'a>, TaskError> {
    let object = |path: ObjectPath| -> Result<Source<'a>, TaskError> {
        let store = settings
            .store
            .ok_or_else(|| TaskError::Invalid("merge of stored runs needs a store".into()))?;
        Ok(Source::Object {
            reader: WindowReader::whole(store, path, settings.read_window)?,
            decoder: RecordDecoder::new(),
            done: false,
        })
    };
    Ok(match run {
        Run::Original { origin, input } => {
            let (source, name) = match input {
                RunInput::Records(v) => (Source::Records(v.into_iter()), format!("#{origin}")),
                RunInput::Object(p) => {
                    let name = p.to_string();
                    (object(p)?, name)
                }
            };
            Stream {
                source,
                origin: Some(origin),
                last_key: None,
                name,
            }
        }
        Run::Memory(v) => Stream {
            source: Source::Tagged(v.into_iter()),
            origin: None,
            last_key: None,
            name: "intermediate".into(),
        },
        Run::Stored(p) => {
            let name = p.to_string();
            Stream {
                source: object(p)?,
                origin: None,
                last_key: None,
                name,
            }
        }
    })
}

fn merge_streams(
    mut streams: Vec<Stream<'_>>,
    emit: &mut dyn FnMut(Record, u32) -> Result<(), TaskError>,
) -> Result<u64, TaskError> {
    let mut heap = BinaryHeap::with_capacity(streams.len());
    for (i, s) in streams.iter_mut().enumerate() {
        if let Some((rec, origin)) = s.next()? {
            heap.push(Head { rec, origin, stream: i });
        }
    }
    let mut n = 0;
    while let Some(Head { rec, origin, stream }) = heap.pop() {
        if let Some((next, o)) = streams[stream].next()? {
            heap.push(Head {
                rec: next,
                origin: o,
                stream,
            });
        }
        emit(rec, origin)?;
        n += 1;
    }
    Ok(n)
}

/// Builds one intermediate run, moving it to storage once it outgrows the
/// memory limit.
struct IntermediateSink<'a, 's> {
    settings: &'s MergeSettings<'a>,
    mem: Vec<(Record, u32)>,
    mem_bytes: u64,
    writer: Option<PartWriter<'a>>,
    path: Option<ObjectPath>,
}

impl<'a> IntermediateSink<'a, '_> {
    fn push(&mut self, rec: Record, origin: u32, index: usize) -> Result<(), TaskError> {
        if let Some(w) = &mut self.writer {
            w.write(&tag(&rec, origin).encode())?;
            return Ok(());
        }
        self.mem_bytes += rec.encoded_len() as u64 + 4;
        self.mem.push((rec, origin));
        if let (Some(dir), Some(store)) = (&self.settings.spill, self.settings.store) {
            if self.mem_bytes > dir.memory_limit {
                let path = ObjectPath::new(dir.bucket.clone(), join_key(&dir.prefix, &format!("run-{index}")))?;
                let mut w = PartWriter::new(store, path.clone(), dir.part_bytes);
                for (r, o) in self.mem.drain(..) {
                    w.write(&tag(&r, o).encode())?;
                }
                self.mem_bytes = 0;
                self.writer = Some(w);
                self.path = Some(path);
            }
        }
        Ok(())
    }

    fn finish(self, stats: &mut MergeStats) -> Result<Run, TaskError> {
        match (self.writer, self.path) {
            (Some(w), Some(path)) => {
                w.finish()?;
                stats.stored_intermediates += 1;
                Ok(Run::Stored(path))
            }
            _ => {
                stats.peak_memory_intermediate = stats.peak_memory_intermediate.max(self.mem_bytes);
                Ok(Run::Memory(self.mem))
            }
        }
    }
}

/// Merges sorted `runs` and hands every record to `sink` in order.
pub fn merge_into(
    settings: &MergeSettings<'_>,
    runs: Vec<RunInput>,
    sink: &mut dyn FnMut(Record) -> Result<(), TaskError>,
) -> Result<MergeStats, TaskError> {
    let k = settings.fan_in.max(2);
    let mut stats = MergeStats::default();
    let mut queue: VecDeque<Run> = runs
        .into_iter()
        .enumerate()
        .map(|(i, input)| Run::Original {
            origin: i as u32,
            input,
        })
        .collect();
    let mut next_index = 0usize;
    while queue.len() > k {
        let batch: Vec<Run> = queue.drain(..k).collect();
        let streams = batch
            .into_iter()
            .map(|r| open(r, settings))
            .collect::<Result<Vec<_>, _>>()?;
        let mut out = IntermediateSink {
            settings,
            mem: Vec::new(),
            mem_bytes: 0,
            writer: None,
            path: None,
        };
        let index = next_index;
        next_index += 1;
        merge_streams(streams, &mut |rec, origin| out.push(rec, origin, index))?;
        stats.passes += 1;
        queue.push_back(out.finish(&mut stats)?);
    }
    if queue.len() > 1 {
        stats.passes += 1;
    }
    let streams = queue
        .into_iter()
        .map(|r| open(r, settings))
        .collect::<Result<Vec<_>, _>>()?;
    stats.records_out = merge_streams(streams, &mut |rec, _| sink(rec))?;
    Ok(stats)
}

/// In-memory k-way merge of sorted runs.
pub fn k_way_merge(runs: Vec<Vec<Record>>, fan_in: usize) -> Result<(Vec<Record>, MergeStats), TaskError> {
    let mut out = Vec::with_capacity(runs.iter().map(Vec::len).sum());
    let stats = merge_into(
        &MergeSettings::in_memory(fan_in),
        runs.into_iter().map(RunInput::Records).collect(),
        &mut |r| {
            out.push(r);
            Ok(())
        },
    )?;
    Ok((out, stats))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::encode_all;
    use crate::storage::MemoryStore;
    use proptest::prelude::*;

    fn r(k: &str, v: &str) -> Record {
        Record::new(k, v)
    }

    fn oracle(runs: &[Vec<Record>]) -> Vec<Record> {
        let mut all: Vec<Record> = runs.concat();
        all.sort_by(|a, b| a.key.cmp(&b.key));
        all
    }

    #[test]
    fn two_runs() {
        let runs = vec![vec![r("a", "1"), r("c", "1")], vec![r("b", "2")]];
        let (out, _) = k_way_merge(runs, 2).unwrap();
        assert_eq!(out, [r("a", "1"), r("b", "2"), r("c", "1")]);
    }

    #[test]
    fn five_runs_fan_in_two_takes_four_passes() {
        let runs: Vec<Vec<Record>> = (0..5).map(|i| vec![r("k", &i.to_string()), r(&format!("z{i}"), "")]).collect();
        let (out, stats) = k_way_merge(runs.clone(), 2).unwrap();
        assert_eq!(stats.passes, 4);
        assert_eq!(out, oracle(&runs));
        let vals: Vec<_> = out.iter().take(5).map(|x| x.value.clone()).collect();
        assert_eq!(vals, [b"0", b"1", b"2", b"3", b"4"].map(|b| b.to_vec()));
    }

    #[test]
    fn single_run_is_identity() {
        let run = vec![r("a", "1"), r("a", "0"), r("b", "")];
        let (out, stats) = k_way_merge(vec![run.clone()], 3).unwrap();
        assert_eq!(out, run);
        assert_eq!(stats.passes, 0);
        assert!(k_way_merge(vec![], 3).unwrap().0.is_empty());
    }

    #[test]
    fn unsorted_input_is_detected() {
        let err = k_way_merge(vec![vec![r("b", ""), r("a", "")], vec![r("c", "")]], 2).unwrap_err();
        assert!(matches!(err, TaskError::UnsortedInput { .. }), "{err}");
    }

    #[test]
    fn large_intermediates_spill_to_storage() {
        let store = MemoryStore::new();
        let mut runs = Vec::new();
        let mut plain = Vec::new();
        for i in 0..7 {
            let run: Vec<Record> = (0..200).map(|j| r(&format!("{:04}", j * 7 + i), "xxxxxxxx")).collect();
            let path = ObjectPath::new("b", format!("spills/s{i}")).unwrap();
            store.put_object(&path, &encode_all(&run)).unwrap();
            runs.push(RunInput::Object(path));
            plain.push(run);
        }
        let settings = MergeSettings {
            fan_in: 3,
            store: Some(&store),
            read_window: 100,
            spill: Some(SpillDir {
                bucket: "b".into(),
                prefix: "j/merge/0".into(),
                memory_limit: 1000,
                part_bytes: 512,
            }),
        };
        let mut out = Vec::new();
        let stats = merge_into(&settings, runs, &mut |rec| {
            out.push(rec);
            Ok(())
        })
        .unwrap();
        assert_eq!(out, oracle(&plain));
        assert_eq!(stats.passes, 3);
        assert_eq!(stats.stored_intermediates, 2);
        assert_eq!(store.list_objects("b", "j/merge/0/").unwrap().len(), 2);
        assert!(stats.peak_memory_intermediate <= 1000);
    }

    fn sorted_runs() -> impl Strategy<Value = Vec<Vec<Record>>> {
        let rec = (prop::collection::vec(0u8..4, 0..3), prop::collection::vec(any::<u8>(), 0..3))
            .prop_map(|(k, v)| Record::new(k, v));
        prop::collection::vec(prop::collection::vec(rec, 0..8), 0..12).prop_map(|mut runs| {
            for run in &mut runs {
                run.sort_by(|a, b| a.key.cmp(&b.key));
            }
            runs
        })
    }

    proptest! {
        #[test]
        fn equals_stable_sort_of_concatenation(runs in sorted_runs(), k in prop::sample::select(vec![2usize, 3, 100])) {
            let (out, _) = k_way_merge(runs.clone(), k).unwrap();
            prop_assert_eq!(out, oracle(&runs));
        }
    }
}
