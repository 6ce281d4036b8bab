//! Append-only binary result log with a sidecar completion index.
//!
//! The log holds fixed-width records for one location's sweep, written in
//! chunks of one recipient example each. The sidecar records the byte offset
//! after each committed chunk, so an interrupted sweep resumes by truncating
//! the log to the last committed offset and continuing — the final bytes are
//! identical to an uninterrupted run, and identical between serial and
//! parallel execution because chunks are always written in recipient order.

use std::fs::OpenOptions;
use std::hash::{Hash, Hasher};
use std::io::{Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;

use crate::data::{Label, NLIExample};
use crate::model::{Location, Role};

use super::{role_code, role_from_code, InterchangeResult, InterchangeSubject, InterveneError};

const LOG_MAGIC: &[u8; 4] = b"LXIL";
const IDX_MAGIC: &[u8; 4] = b"LXIX";
const VERSION: u32 = 1;
const HEADER_LEN: u64 = 24;
const RECORD_LEN: usize = 16;
const IDX_HEADER_LEN: u64 = 8;
const IDX_ENTRY_LEN: u64 = 12;

/// How many recipient chunks are computed per write batch.
const BATCH_CHUNKS: usize = 16;

fn label_code(label: Label) -> u8 {
    label.index() as u8
}

fn label_from_code(code: u8) -> Result<Label, InterveneError> {
    match code {
        0 => Ok(Label::Entailment),
        1 => Ok(Label::Neutral),
        other => Err(InterveneError::LogFormat(format!(
            "bad label code {other}"
        ))),
    }
}

/// Stable fingerprint of the example list a sweep was started over, to
/// refuse resuming against different data.
pub fn dataset_fingerprint(examples: &[NLIExample]) -> u64 {
    let mut hasher = std::collections::hash_map::DefaultHasher::new();
    examples.len().hash(&mut hasher);
    for ex in examples {
        ex.pair_id.hash(&mut hasher);
        ex.w_p.hash(&mut hasher);
        ex.w_h.hash(&mut hasher);
        ex.negated.hash(&mut hasher);
        ex.label.index().hash(&mut hasher);
    }
    hasher.finish()
}

fn encode_header(n: u32, loc: Location, fingerprint: u64) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN as usize);
    out.extend_from_slice(LOG_MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&n.to_le_bytes());
    out.push(loc.row as u8);
    out.push(role_code(loc.role));
    out.extend_from_slice(&[0u8; 2]);
    out.extend_from_slice(&fingerprint.to_le_bytes());
    out
}

fn decode_header(bytes: &[u8]) -> Result<(u32, Location, u64), InterveneError> {
    if bytes.len() < HEADER_LEN as usize {
        return Err(InterveneError::LogFormat("truncated header".into()));
    }
    if &bytes[0..4] != LOG_MAGIC {
        return Err(InterveneError::LogFormat("bad magic".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != VERSION {
        return Err(InterveneError::LogFormat(format!(
            "unsupported version {version}"
        )));
    }
    let n = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let row = bytes[12] as usize;
    let role: Role = role_from_code(bytes[13])
        .ok_or_else(|| InterveneError::LogFormat(format!("bad role code {}", bytes[13])))?;
    let fingerprint = u64::from_le_bytes(bytes[16..24].try_into().unwrap());
    Ok((n, Location::new(row, role), fingerprint))
}

fn encode_record(r: &InterchangeResult, out: &mut Vec<u8>) {
    out.extend_from_slice(&r.i.to_le_bytes());
    out.extend_from_slice(&r.j.to_le_bytes());
    out.push(label_code(r.patched_label));
    out.push(label_code(r.unpatched_label));
    out.push(label_code(r.oracle_label));
    out.push(u8::from(r.matches_oracle) | (u8::from(r.causal) << 1));
    out.extend_from_slice(&[0u8; 4]);
}

fn decode_record(bytes: &[u8], loc: Location) -> Result<InterchangeResult, InterveneError> {
    let i = u32::from_le_bytes(bytes[0..4].try_into().unwrap());
    let j = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    let patched_label = label_from_code(bytes[8])?;
    let unpatched_label = label_from_code(bytes[9])?;
    let oracle_label = label_from_code(bytes[10])?;
    let flags = bytes[11];
    Ok(InterchangeResult {
        i,
        j,
        location: loc,
        patched_label,
        unpatched_label,
        oracle_label,
        matches_oracle: flags & 1 != 0,
        causal: flags & 2 != 0,
    })
}

fn idx_path_for(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".idx");
    PathBuf::from(os)
}

/// Committed sidecar entries: (chunk index, log byte offset after it).
fn read_index(path: &Path) -> Result<Vec<(u32, u64)>, InterveneError> {
    let bytes = std::fs::read(path)?;
    if bytes.len() < IDX_HEADER_LEN as usize || &bytes[0..4] != IDX_MAGIC {
        return Err(InterveneError::LogFormat("bad index header".into()));
    }
    let mut entries = Vec::new();
    let mut pos = IDX_HEADER_LEN as usize;
    // Ignore a trailing partial entry: it was never committed.
    while pos + IDX_ENTRY_LEN as usize <= bytes.len() {
        let chunk = u32::from_le_bytes(bytes[pos..pos + 4].try_into().unwrap());
        let offset = u64::from_le_bytes(bytes[pos + 4..pos + 12].try_into().unwrap());
        entries.push((chunk, offset));
        pos += IDX_ENTRY_LEN as usize;
    }
    Ok(entries)
}

/// A complete or partial sweep read back from disk.
#[derive(Debug)]
pub struct SweepLogData {
    pub location: Location,
    pub example_count: u32,
    pub results: Vec<InterchangeResult>,
    pub committed_chunks: u32,
    pub complete: bool,
}

impl SweepLogData {
    /// Reads the committed portion of a log; bytes past the last committed
    /// sidecar entry are ignored.
    pub fn read(path: impl AsRef<Path>) -> Result<SweepLogData, InterveneError> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        let (n, location, _) = decode_header(&bytes)?;
        let entries = read_index(&idx_path_for(path))?;
        let committed_chunks = entries.len() as u32;
        let end = entries.last().map(|&(_, off)| off).unwrap_or(HEADER_LEN) as usize;
        if end > bytes.len() {
            return Err(InterveneError::LogFormat(
                "index references bytes beyond the log".into(),
            ));
        }
        let mut results = Vec::new();
        let mut pos = HEADER_LEN as usize;
        while pos + RECORD_LEN <= end {
            results.push(decode_record(&bytes[pos..pos + RECORD_LEN], location)?);
            pos += RECORD_LEN;
        }
        if pos != end {
            return Err(InterveneError::LogFormat(
                "committed region is not record-aligned".into(),
            ));
        }
        Ok(SweepLogData {
            location,
            example_count: n,
            results,
            committed_chunks,
            complete: committed_chunks == n,
        })
    }
}

/// Drives a sweep over every ordered pair admitted by the filter, one
/// recipient chunk at a time, writing results to the log as it goes.
pub struct SweepRunner<'a, S: InterchangeSubject + ?Sized> {
    subject: &'a S,
    examples: &'a [NLIExample],
    location: Location,
    filter: Option<&'a (dyn Fn(u32, u32) -> bool + Sync)>,
    path: PathBuf,
    idx_path: PathBuf,
    next_chunk: u32,
    bytes_written: u64,
    n: u32,
}

impl<'a, S: InterchangeSubject + ?Sized> SweepRunner<'a, S> {
    /// Opens a sweep log, creating it or resuming a partial one. Resuming
    /// validates the location and the dataset fingerprint, then truncates
    /// any uncommitted tail.
    pub fn open(
        path: impl Into<PathBuf>,
        subject: &'a S,
        examples: &'a [NLIExample],
        location: Location,
        filter: Option<&'a (dyn Fn(u32, u32) -> bool + Sync)>,
    ) -> Result<Self, InterveneError> {
        let path = path.into();
        let idx_path = idx_path_for(&path);
        let n = subject.example_count() as u32;
        let fingerprint = dataset_fingerprint(examples);

        let (next_chunk, bytes_written) = if path.exists() && idx_path.exists() {
            let mut header = vec![0u8; HEADER_LEN as usize];
            let mut file = std::fs::File::open(&path)?;
            file.read_exact(&mut header)
                .map_err(|_| InterveneError::LogFormat("truncated header".into()))?;
            let (file_n, file_loc, file_fp) = decode_header(&header)?;
            if file_n != n || file_loc != location || file_fp != fingerprint {
                return Err(InterveneError::LogMismatch(format!(
                    "log was written for n={file_n} at {file_loc}, requested n={n} at {location}"
                )));
            }
            let entries = read_index(&idx_path)?;
            let committed = entries.len() as u32;
            let offset = entries.last().map(|&(_, off)| off).unwrap_or(HEADER_LEN);
            // Drop any partial tail past the last committed chunk.
            let log = OpenOptions::new().write(true).open(&path)?;
            log.set_len(offset)?;
            let idx = OpenOptions::new().write(true).open(&idx_path)?;
            idx.set_len(IDX_HEADER_LEN + committed as u64 * IDX_ENTRY_LEN)?;
            (committed, offset)
        } else {
            let mut log = std::fs::File::create(&path)?;
            log.write_all(&encode_header(n, location, fingerprint))?;
            log.flush()?;
            let mut idx = std::fs::File::create(&idx_path)?;
            idx.write_all(IDX_MAGIC)?;
            idx.write_all(&VERSION.to_le_bytes())?;
            idx.flush()?;
            (0, HEADER_LEN)
        };

        Ok(SweepRunner {
            subject,
            examples,
            location,
            filter,
            path,
            idx_path,
            next_chunk,
            bytes_written,
            n,
        })
    }

    pub fn is_complete(&self) -> bool {
        self.next_chunk >= self.n
    }

    pub fn completed_chunks(&self) -> u32 {
        self.next_chunk
    }

    fn chunk_records(&self, i: u32) -> Result<Vec<u8>, InterveneError> {
        let mut out = Vec::new();
        for j in 0..self.n {
            if self.filter.map_or(true, |f| f(i, j)) {
                let r = super::run_interchange(
                    self.subject,
                    self.examples,
                    i as usize,
                    j as usize,
                    self.location,
                )?;
                encode_record(&r, &mut out);
            }
        }
        Ok(out)
    }

    /// Processes up to `max_chunks` recipient chunks (in parallel batches),
    /// committing each to the log and sidecar in order.
    pub fn step(&mut self, max_chunks: usize) -> Result<usize, InterveneError> {
        if self.is_complete() || max_chunks == 0 {
            return Ok(0);
        }
        let start = self.next_chunk;
        let end = (start as usize).saturating_add(max_chunks).min(self.n as usize) as u32;

        let mut log = OpenOptions::new().append(true).open(&self.path)?;
        log.seek(SeekFrom::End(0))?;
        let mut idx = OpenOptions::new().append(true).open(&self.idx_path)?;

        let mut chunk = start;
        while chunk < end {
            let batch_end = (chunk as usize + BATCH_CHUNKS).min(end as usize) as u32;
            let payloads: Vec<Vec<u8>> = (chunk..batch_end)
                .into_par_iter()
                .map(|i| self.chunk_records(i))
                .collect::<Result<_, _>>()?;
            for (offset_chunk, payload) in (chunk..batch_end).zip(&payloads) {
                log.write_all(payload)?;
                log.flush()?;
                self.bytes_written += payload.len() as u64;
                idx.write_all(&offset_chunk.to_le_bytes())?;
                idx.write_all(&self.bytes_written.to_le_bytes())?;
                idx.flush()?;
            }
            chunk = batch_end;
        }
        self.next_chunk = end;
        Ok((end - start) as usize)
    }

    /// Runs the sweep to completion and returns all results.
    pub fn run_to_end(&mut self) -> Result<SweepLogData, InterveneError> {
        while !self.is_complete() {
            self.step(usize::MAX)?;
        }
        SweepLogData::read(&self.path)
    }
}

/// Convenience entry point: sweep every ordered pair (including self-pairs)
/// at one location, streaming results to `path`, resuming if a partial log
/// exists.
pub fn sweep<S: InterchangeSubject + ?Sized>(
    path: impl Into<PathBuf>,
    subject: &S,
    examples: &[NLIExample],
    location: Location,
) -> Result<SweepLogData, InterveneError> {
    let mut runner = SweepRunner::open(path, subject, examples, location, None)?;
    runner.run_to_end()
}
