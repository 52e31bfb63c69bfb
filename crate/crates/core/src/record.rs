//! Intermediate key-value records and their binary layout.
//!
//! Every record is written as
//!
//! ```text
//! [key_len: u32 LE][key bytes][val_len: u32 LE][value bytes]
//! ```
//!
//! and streams of records are plain concatenations of that layout. Spills,
//! reducer outputs, map-only outputs and merge runs all share it.

use std::fmt;

use thiserror::Error;

/// Size of each length prefix in the encoded layout.
pub const LEN_PREFIX: usize = 4;

/// One intermediate key-value pair.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Record {
    pub key: Vec<u8>,
    pub value: Vec<u8>,
}

impl Record {
    pub fn new(key: impl Into<Vec<u8>>, value: impl Into<Vec<u8>>) -> Self {
        Record {
            key: key.into(),
            value: value.into(),
        }
    }

    /// Number of bytes this record occupies once encoded.
    pub fn encoded_len(&self) -> usize {
        2 * LEN_PREFIX + self.key.len() + self.value.len()
    }

    /// Appends the encoded form of this record to `out`.
    ///
    /// Panics if the key or value is 4 GiB or longer; such records cannot be
    /// represented in the layout.
    pub fn encode_into(&self, out: &mut Vec<u8>) {
        out.reserve(self.encoded_len());
        put_field(out, &self.key);
        put_field(out, &self.value);
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.encode_into(&mut out);
        out
    }
}

impl fmt::Debug for Record {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "({:?}, {:?})",
            String::from_utf8_lossy(&self.key),
            String::from_utf8_lossy(&self.value)
        )
    }
}

fn put_field(out: &mut Vec<u8>, field: &[u8]) {
    let len = u32::try_from(field.len()).expect("record field must be shorter than 4 GiB");
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(field);
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CodecError {
    #[error("truncated record at byte {offset}")]
    TruncatedRecord { offset: usize },
    #[error("record at byte {offset} declares {declared} bytes but only {remaining} remain")]
    OversizeLength {
        offset: usize,
        declared: usize,
        remaining: usize,
    },
}

/// Encodes a sequence of records into one contiguous buffer.
pub fn encode_all<'a>(records: impl IntoIterator<Item = &'a Record>) -> Vec<u8> {
    let mut out = Vec::new();
    for r in records {
        r.encode_into(&mut out);
    }
    out
}

/// Outcome of trying to read one record from the front of a buffer.
enum Parse {
    Complete(Record, usize),
    /// The buffer ends before the record does; carries the offending error
    /// for callers that know no more bytes are coming.
    Incomplete(CodecError),
}

fn parse_one(buf: &[u8], base: usize) -> Parse {
    let read_len = |at: usize| -> Option<usize> {
        let bytes = buf.get(at..at + LEN_PREFIX)?;
        Some(u32::from_le_bytes(bytes.try_into().unwrap()) as usize)
    };
    let Some(klen) = read_len(0) else {
        return Parse::Incomplete(CodecError::TruncatedRecord { offset: base });
    };
    let key_end = LEN_PREFIX + klen;
    if key_end > buf.len() {
        return Parse::Incomplete(CodecError::OversizeLength {
            offset: base,
            declared: klen,
            remaining: buf.len() - LEN_PREFIX,
        });
    }
    let Some(vlen) = read_len(key_end) else {
        return Parse::Incomplete(CodecError::TruncatedRecord { offset: base });
    };
    let val_start = key_end + LEN_PREFIX;
    if val_start + vlen > buf.len() {
        return Parse::Incomplete(CodecError::OversizeLength {
            offset: base + key_end,
            declared: vlen,
            remaining: buf.len() - val_start,
        });
    }
    let rec = Record {
        key: buf[LEN_PREFIX..key_end].to_vec(),
        value: buf[val_start..val_start + vlen].to_vec(),
    };
    Parse::Complete(rec, val_start + vlen)
}

/// Decodes a complete byte stream into records, greedily and in order.
pub fn decode_all(buf: &[u8]) -> Result<Vec<Record>, CodecError> {
    let mut out = Vec::new();
    let mut pos = 0;
    while pos < buf.len() {
        match parse_one(&buf[pos..], pos) {
            Parse::Complete(rec, used) => {
                out.push(rec);
                pos += used;
            }
            Parse::Incomplete(err) => return Err(err),
        }
    }
    Ok(out)
}

/// Incremental decoder for records arriving in arbitrary byte windows.
///
/// Bytes are pushed with [`RecordDecoder::feed`]; complete records are pulled
/// with [`RecordDecoder::next_record`]. Partial trailing bytes are carried
/// until more input arrives or [`RecordDecoder::finish`] reports them.
#[derive(Debug, Default)]
pub struct RecordDecoder {
    buf: Vec<u8>,
    pos: usize,
    consumed: usize,
}

impl RecordDecoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn feed(&mut self, bytes: &[u8]) {
        if self.pos > 0 && self.pos >= self.buf.len() / 2 {
            self.buf.drain(..self.pos);
            self.pos = 0;
        }
        self.buf.extend_from_slice(bytes);
    }

    /// Returns the next complete record, or `None` if more bytes are needed.
    pub fn next_record(&mut self) -> Option<Record> {
        match parse_one(&self.buf[self.pos..], self.consumed) {
            Parse::Complete(rec, used) => {
                self.pos += used;
                self.consumed += used;
                Some(rec)
            }
            Parse::Incomplete(_) => None,
        }
    }

    /// Bytes held that do not yet form a complete record.
    pub fn pending(&self) -> usize {
        self.buf.len() - self.pos
    }

    /// Bytes currently resident in the decoder, consumed or not.
    pub fn resident(&self) -> usize {
        self.buf.len()
    }

    /// Total bytes of complete records handed out so far.
    pub fn consumed(&self) -> usize {
        self.consumed
    }

    /// Declares end of input; errors if a partial record is left over.
    pub fn finish(&self) -> Result<(), CodecError> {
        let rest = &self.buf[self.pos..];
        if rest.is_empty() {
            return Ok(());
        }
        match parse_one(rest, self.consumed) {
            Parse::Incomplete(err) => Err(err),
            Parse::Complete(..) => unreachable!("finish called with a decodable record pending"),
        }
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
#[error("record is not valid UTF-8 text ({field} at byte {valid_up_to})")]
pub struct NonTextRecord {
    pub field: &'static str,
    pub valid_up_to: usize,
}

/// Renders a record as one `key<TAB>value<LF>` text line.
pub fn format_final_record(rec: &Record) -> Result<String, NonTextRecord> {
    let key = std::str::from_utf8(&rec.key).map_err(|e| NonTextRecord {
        field: "key",
        valid_up_to: e.valid_up_to(),
    })?;
    let value = std::str::from_utf8(&rec.value).map_err(|e| NonTextRecord {
        field: "value",
        valid_up_to: e.valid_up_to(),
    })?;
    let mut line = String::with_capacity(key.len() + value.len() + 2);
    line.push_str(key);
    line.push('\t');
    line.push_str(value);
    line.push('\n');
    Ok(line)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn encodes_hand_computed_layout() {
        let bytes = Record::new("a", "1").encode();
        assert_eq!(
            bytes,
            [0x01, 0x00, 0x00, 0x00, 0x61, 0x01, 0x00, 0x00, 0x00, 0x31]
        );
        assert_eq!(decode_all(&bytes).unwrap(), vec![Record::new("a", "1")]);
    }

    #[test]
    fn empty_record_is_two_zero_lengths() {
        assert_eq!(Record::new("", "").encode(), [0u8; 8]);
    }

    #[test]
    fn concatenated_stream_decodes_in_order() {
        let r1 = Record::new("x", "first");
        let r2 = Record::new("", "second");
        let mut bytes = r1.encode();
        bytes.extend(r2.encode());
        assert_eq!(decode_all(&bytes).unwrap(), vec![r1, r2]);
    }

    #[test]
    fn truncated_header_is_reported() {
        let bytes = Record::new("ab", "c").encode();
        assert_eq!(
            decode_all(&bytes[..2]),
            Err(CodecError::TruncatedRecord { offset: 0 })
        );
        // key complete, value length prefix cut
        assert!(matches!(
            decode_all(&bytes[..8]),
            Err(CodecError::TruncatedRecord { .. })
        ));
    }

    #[test]
    fn oversize_length_is_reported() {
        let mut bytes = vec![0xFF, 0, 0, 0];
        bytes.extend_from_slice(b"abc");
        assert_eq!(
            decode_all(&bytes),
            Err(CodecError::OversizeLength {
                offset: 0,
                declared: 255,
                remaining: 3
            })
        );
    }

    #[test]
    fn final_line_format() {
        assert_eq!(format_final_record(&Record::new("the", "2")).unwrap(), "the\t2\n");
        assert_eq!(format_final_record(&Record::new("", "0")).unwrap(), "\t0\n");
        let err = format_final_record(&Record::new(vec![0xFF, 0xFE], "1")).unwrap_err();
        assert_eq!(err.field, "key");
    }

    #[test]
    fn decoder_handles_split_windows() {
        let recs = vec![Record::new("alpha", "1"), Record::new("b", "22"), Record::new("", "")];
        let bytes = encode_all(&recs);
        for cut in 0..bytes.len() {
            let mut dec = RecordDecoder::new();
            let mut got = Vec::new();
            dec.feed(&bytes[..cut]);
            while let Some(r) = dec.next_record() {
                got.push(r);
            }
            dec.feed(&bytes[cut..]);
            while let Some(r) = dec.next_record() {
                got.push(r);
            }
            dec.finish().unwrap();
            assert_eq!(got, recs, "cut at {cut}");
        }
    }

    #[test]
    fn decoder_finish_reports_leftover() {
        let mut dec = RecordDecoder::new();
        dec.feed(&Record::new("k", "v").encode()[..5]);
        assert!(dec.next_record().is_none());
        assert!(dec.finish().is_err());
    }

    proptest! {
        #[test]
        fn codec_round_trips(recs in proptest::collection::vec(
            (proptest::collection::vec(any::<u8>(), 0..40), proptest::collection::vec(any::<u8>(), 0..40)),
            0..20,
        )) {
            let recs: Vec<Record> = recs.into_iter().map(|(k, v)| Record::new(k, v)).collect();
            let bytes = encode_all(&recs);
            prop_assert_eq!(bytes.len(), recs.iter().map(Record::encoded_len).sum::<usize>());
            prop_assert_eq!(decode_all(&bytes).unwrap(), recs);
        }
    }
}
