//! Divides a job's input into one chunk assignment per mapper.
//!
//! All input objects are laid end to end in listing order to form one
//! logical byte space `[0, T)`, which is cut at `⌊mT/M⌋`. In text mode each
//! cut that falls inside an object is pushed forward to just past the next
//! LF in that object; with record input it is pushed to the next record
//! boundary. Cuts never move backward, so chunks stay disjoint and cover
//! every byte.

use crate::config::JobConfig;
use crate::metastore::{ChunkAssignment, Piece};
use crate::record::LEN_PREFIX;
use crate::storage::{ByteRange, ObjectInfo, ObjectPath, ObjectStore, StoreError};
use crate::worker::{TaskError, WorkerContext};

pub const RECORD_DELIMITER: u8 = b'\n';

/// Start of span `m` when `total` bytes are split `parts` ways.
pub fn nominal_offset(m: u64, total: u64, parts: u64) -> u64 {
    (m as u128 * total as u128 / parts as u128) as u64
}

/// Maps global offsets `[start, end)` back onto per-object pieces.
fn pieces_between(objects: &[(ObjectPath, u64)], start: u64, end: u64) -> Vec<Piece> {
    let mut out = Vec::new();
    let mut base = 0u64;
    for (path, size) in objects {
        let (lo, hi) = (base, base + size);
        base = hi;
        let s = start.max(lo);
        let e = end.min(hi);
        if s < e {
            out.push(Piece {
                path: path.clone(),
                range: ByteRange::new(s - lo, e - lo).expect("non-empty"),
            });
        }
    }
    out
}

/// Splits the concatenation of `objects` into `m` contiguous spans.
pub fn compute_nominal_ranges(objects: &[(ObjectPath, u64)], m: u32) -> Vec<Vec<Piece>> {
    let m = m.max(1) as u64;
    let total: u64 = objects.iter().map(|(_, s)| s).sum();
    (0..m)
        .map(|i| pieces_between(objects, nominal_offset(i, total, m), nominal_offset(i + 1, total, m)))
        .collect()
}

/// Pushes `nominal_end` forward to just past the next LF in the object.
///
/// Returns `nominal_end` itself if the byte before it is already LF, and the
/// object size if no LF remains. Reads at most `window` bytes per request.
pub fn align_to_record_boundary(
    store: &dyn ObjectStore,
    path: &ObjectPath,
    nominal_end: u64,
    size: u64,
    window: u64,
) -> Result<u64, StoreError> {
    if nominal_end == 0 || nominal_end >= size {
        return Ok(nominal_end.min(size));
    }
    let window = window.max(1);
    let mut pos = nominal_end - 1;
    while pos < size {
        let range = ByteRange::new(pos, size.min(pos + window)).expect("pos < size");
        let bytes = store.get_object_range(path, range)?;
        if let Some(i) = bytes.iter().position(|&b| b == RECORD_DELIMITER) {
            return Ok(pos + i as u64 + 1);
        }
        pos += bytes.len() as u64;
    }
    Ok(size)
}

/// Reads record boundaries of a binary-codec object, in windows.
struct RecordWalker<'a> {
    store: &'a dyn ObjectStore,
    path: &'a ObjectPath,
    size: u64,
    window: u64,
    buf: Vec<u8>,
    buf_start: u64,
    /// Start of the next unread record.
    pos: u64,
}

impl RecordWalker<'_> {
    fn read_len(&mut self, at: u64) -> Result<u64, TaskError> {
        let need = LEN_PREFIX as u64;
        if at + need > self.size {
            return Err(crate::record::CodecError::TruncatedRecord { offset: self.pos as usize }.into());
        }
        let buf_end = self.buf_start + self.buf.len() as u64;
        if at < self.buf_start || at + need > buf_end {
            let end = self.size.min(at + self.window.max(need));
            self.buf = self
                .store
                .get_object_range(self.path, ByteRange::new(at, end).expect("at < size"))?;
            self.buf_start = at;
        }
        let i = (at - self.buf_start) as usize;
        let b: [u8; 4] = self.buf[i..i + 4].try_into().unwrap();
        Ok(u32::from_le_bytes(b) as u64)
    }

    /// Advances past one record and returns its end offset.
    fn next_end(&mut self) -> Result<u64, TaskError> {
        let klen = self.read_len(self.pos)?;
        let vat = self.pos + 4 + klen;
        let vlen = self.read_len(vat)?;
        let end = vat + 4 + vlen;
        if end > self.size {
            return Err(crate::record::CodecError::TruncatedRecord { offset: self.pos as usize }.into());
        }
        self.pos = end;
        Ok(end)
    }
}

/// For each sorted offset in `nominal`, the first record boundary at or
/// after it in a binary-codec object.
pub fn align_to_codec_boundaries(
    store: &dyn ObjectStore,
    path: &ObjectPath,
    size: u64,
    nominal: &[u64],
    window: u64,
) -> Result<Vec<u64>, TaskError> {
    let mut w = RecordWalker {
        store,
        path,
        size,
        window: window.max(64),
        buf: Vec::new(),
        buf_start: 0,
        pos: 0,
    };
    let mut out = Vec::with_capacity(nominal.len());
    for &n in nominal {
        while w.pos < n.min(size) {
            w.next_end()?;
        }
        out.push(w.pos.max(n.min(size)));
    }
    Ok(out)
}

/// Lists every object under `prefixes` once, sorted bytewise by key.
pub fn list_inputs(
    store: &dyn ObjectStore,
    bucket: &str,
    prefixes: &[String],
) -> Result<Vec<ObjectInfo>, StoreError> {
    let mut all = Vec::new();
    for p in prefixes {
        all.extend(store.list_objects(bucket, p)?);
    }
    all.sort_by(|a, b| a.path.key().as_bytes().cmp(b.path.key().as_bytes()));
    all.dedup_by(|a, b| a.path == b.path);
    Ok(all)
}

/// Computes the `M` chunk assignments for a job over `objects`.
pub fn plan_chunks(
    store: &dyn ObjectStore,
    cfg: &JobConfig,
    objects: &[(ObjectPath, u64)],
) -> Result<Vec<ChunkAssignment>, TaskError> {
    let m = cfg.num_mappers.max(1) as u64;
    let total: u64 = objects.iter().map(|(_, s)| s).sum();
    let mut cuts: Vec<u64> = (0..=m).map(|i| nominal_offset(i, total, m)).collect();
    if !cfg.binary_mode || cfg.record_input {
        let mut base = 0u64;
        for (path, size) in objects {
            let (lo, hi) = (base, base + size);
            base = hi;
            // Cuts strictly inside this object, as local offsets.
            let inside: Vec<usize> = (1..m as usize).filter(|&i| cuts[i] > lo && cuts[i] < hi).collect();
            if inside.is_empty() {
                continue;
            }
            let local: Vec<u64> = inside.iter().map(|&i| cuts[i] - lo).collect();
            let aligned = if cfg.record_input {
                align_to_codec_boundaries(store, path, *size, &local, cfg.input_buffer_bytes)?
            } else {
                local
                    .iter()
                    .map(|&n| align_to_record_boundary(store, path, n, *size, cfg.input_buffer_bytes))
                    .collect::<Result<_, _>>()?
            };
            for (&i, a) in inside.iter().zip(aligned) {
                cuts[i] = lo + a;
            }
        }
        for i in 1..cuts.len() {
            cuts[i] = cuts[i].max(cuts[i - 1]);
        }
    }
    Ok((0..m as usize)
        .map(|i| ChunkAssignment {
            job_id: cfg.id().to_string(),
            mapper_id: i as u32,
            pieces: pieces_between(objects, cuts[i], cuts[i + 1]),
        })
        .collect())
}

/// Splitter task: plans and stores one assignment per mapper.
pub fn run_split(ctx: &WorkerContext, cfg: &JobConfig) -> Result<Vec<ChunkAssignment>, TaskError> {
    let inputs = list_inputs(ctx.store(), &ctx.bucket, &cfg.input_prefixes)?;
    let objects: Vec<(ObjectPath, u64)> = inputs.into_iter().map(|o| (o.path, o.size)).collect();
    let plan = plan_chunks(ctx.store(), cfg, &objects)?;
    for a in &plan {
        ctx.meta.store_chunk_assignment(a)?;
    }
    Ok(plan)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::record::{encode_all, Record};
    use crate::storage::MemoryStore;
    use crate::udf::FunctionRef;

    fn p(k: &str) -> ObjectPath {
        ObjectPath::new("b", k).unwrap()
    }

    fn spans(pieces: &[Vec<Piece>]) -> Vec<Vec<(String, u64, u64)>> {
        pieces
            .iter()
            .map(|v| {
                v.iter()
                    .map(|pc| (pc.path.key().to_string(), pc.range.start(), pc.range.end()))
                    .collect()
            })
            .collect()
    }

    #[test]
    fn exact_division_of_one_object() {
        let r = compute_nominal_ranges(&[(p("x"), 100)], 4);
        let want: Vec<Vec<_>> = [(0, 25), (25, 50), (50, 75), (75, 100)]
            .iter()
            .map(|&(s, e)| vec![("x".to_string(), s, e)])
            .collect();
        assert_eq!(spans(&r), want);
    }

    #[test]
    fn spans_cross_object_boundaries() {
        let r = compute_nominal_ranges(&[(p("o1"), 60), (p("o2"), 40)], 2);
        assert_eq!(
            spans(&r),
            vec![
                vec![("o1".to_string(), 0, 50)],
                vec![("o1".to_string(), 50, 60), ("o2".to_string(), 0, 40)]
            ]
        );
    }

    #[test]
    fn floor_formula_for_uneven_totals() {
        let r = compute_nominal_ranges(&[(p("x"), 10)], 4);
        let bounds: Vec<_> = spans(&r).into_iter().map(|v| (v[0].1, v[0].2)).collect();
        assert_eq!(bounds, [(0, 2), (2, 5), (5, 7), (7, 10)]);
        assert!(compute_nominal_ranges(&[], 3).iter().all(Vec::is_empty));
        let tiny = compute_nominal_ranges(&[(p("x"), 2)], 4);
        assert_eq!(tiny.iter().filter(|v| v.is_empty()).count(), 2);
    }

    fn ten_lines() -> (MemoryStore, ObjectPath) {
        let s = MemoryStore::new();
        let body: Vec<u8> = (0..10).flat_map(|i| format!("line {i:03}!\n").into_bytes()).collect();
        assert_eq!(body.len(), 100);
        s.put_object(&p("t"), &body).unwrap();
        (s, p("t"))
    }

    #[test]
    fn alignment_scans_forward_to_lf() {
        let (s, path) = ten_lines();
        for window in [1, 3, 64] {
            assert_eq!(align_to_record_boundary(&s, &path, 25, 100, window).unwrap(), 30);
            assert_eq!(align_to_record_boundary(&s, &path, 50, 100, window).unwrap(), 50);
            assert_eq!(align_to_record_boundary(&s, &path, 91, 100, window).unwrap(), 100);
        }
        s.put_object(&p("u"), b"ab\ncd").unwrap();
        assert_eq!(align_to_record_boundary(&s, &p("u"), 4, 5, 2).unwrap(), 5);
    }

    #[test]
    fn codec_alignment_lands_on_record_starts() {
        let s = MemoryStore::new();
        let recs = vec![Record::new("aa", "1"), Record::new("b", "22"), Record::new("", "")];
        let body = encode_all(&recs);
        // boundaries at 11, 22, 30
        s.put_object(&p("r"), &body).unwrap();
        let got = align_to_codec_boundaries(&s, &p("r"), 30, &[0, 1, 11, 12, 29], 64).unwrap();
        assert_eq!(got, [0, 11, 11, 22, 30]);
    }

    #[test]
    fn text_mode_plan_is_aligned_and_exhaustive() {
        let (s, path) = ten_lines();
        let mut cfg = crate::config::JobConfig::new(vec!["t".into()], "o", 4, 1, FunctionRef::new("wordcount_map"), None);
        cfg.job_id = Some("j".into());
        let plan = plan_chunks(&s, &cfg, &[(path, 100)]).unwrap();
        let b: Vec<_> = plan.iter().map(|a| (a.pieces[0].range.start(), a.pieces[0].range.end())).collect();
        assert_eq!(b, [(0, 30), (30, 50), (50, 80), (80, 100)]);
        cfg.binary_mode = true;
        let plan = plan_chunks(&s, &cfg, &[(p("t"), 100)]).unwrap();
        assert_eq!(plan[0].pieces[0].range.end(), 25);
    }
}
