//! Finalize task: concatenate the reducer outputs into one object.

use crate::config::JobConfig;
use crate::record::{format_final_record, RecordDecoder};
use crate::reducer::reduce_output_key;
use crate::storage::{join_key, PartWriter, StoreError, WindowReader};
use crate::worker::{TaskError, WorkerContext};

pub fn final_output_key(cfg: &JobConfig) -> String {
    join_key(&cfg.output_prefix, "final")
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct FinalizeStats {
    pub records: u64,
    pub bytes_written: u64,
    /// Largest number of bytes held at once by the reader and the writer.
    pub peak_resident: usize,
}

/// Streams `reduce-0 .. reduce-{R-1}` in order into `final`.
///
/// Text output unless `final_binary` is set; a record that is not UTF-8
/// fails the task and nothing is committed.
pub fn run_finalize(ctx: &WorkerContext, cfg: &JobConfig) -> Result<FinalizeStats, TaskError> {
    let part = cfg.multipart_part_bytes.max(2);
    let window = part / 2;
    let mut writer = PartWriter::new(ctx.store(), ctx.path(final_output_key(cfg))?, part);
    let mut stats = FinalizeStats::default();
    let result = (|| -> Result<(), TaskError> {
        for r in 0..cfg.num_reducers {
            let path = ctx.path(reduce_output_key(cfg, r))?;
            let reader = match WindowReader::whole(ctx.store(), path.clone(), window) {
                Ok(rd) => rd,
                Err(StoreError::NoSuchObject(_)) => return Err(TaskError::MissingReducerOutput(path.to_string())),
                Err(e) => return Err(e.into()),
            };
            let mut dec = RecordDecoder::new();
            for bytes in reader {
                dec.feed(&bytes?);
                while let Some(rec) = dec.next_record() {
                    if cfg.final_binary {
                        writer.write(&rec.encode())?;
                    } else {
                        writer.write(format_final_record(&rec)?.as_bytes())?;
                    }
                    stats.records += 1;
                    stats.peak_resident = stats.peak_resident.max(dec.resident() + writer.peak_buffered());
                }
            }
            dec.finish()?;
        }
        Ok(())
    })();
    match result {
        Ok(()) => {
            stats.bytes_written = writer.finish()?;
            Ok(stats)
        }
        Err(e) => {
            let _ = writer.abort();
            Err(e)
        }
    }
}
