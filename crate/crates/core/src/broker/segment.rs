//! Segment files: concatenated record frames, named by the base offset of
//! their first record. Closed segments are immutable; only the tail segment
//! of a topic is ever appended to.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use crate::record::{deserialize_record, frame_len, FrameError};

pub fn segment_file_name(base_offset: u64) -> String {
    format!("{base_offset:020}.seg")
}

pub fn parse_segment_file_name(name: &str) -> Option<u64> {
    let stem = name.strip_suffix(".seg")?;
    if stem.len() != 20 || !stem.bytes().all(|b| b.is_ascii_digit()) {
        return None;
    }
    stem.parse().ok()
}

/// How a segment scan ended.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScanOutcome {
    /// Every byte belongs to a complete, valid frame.
    Clean,
    /// The file ends inside a frame; `valid_bytes` is the clean prefix.
    Torn { valid_bytes: u64 },
    /// A frame is structurally invalid at byte `at`. Truncating here would
    /// discard data that was once acknowledged, so the caller must not.
    Corrupt { at: u64, detail: String },
}

#[derive(Debug)]
pub struct SegmentScan {
    /// Byte position of each complete frame, in order.
    pub positions: Vec<u64>,
    pub outcome: ScanOutcome,
}

/// Walks a segment validating every frame. Used by recovery; the scan fully
/// decodes each record so a length prefix that disagrees with its body is
/// caught here and not at read time.
pub fn scan_segment(path: &Path) -> std::io::Result<SegmentScan> {
    let mut buf = Vec::new();
    File::open(path)?.read_to_end(&mut buf)?;

    let mut positions = Vec::new();
    let mut pos = 0usize;
    let outcome = loop {
        if pos == buf.len() {
            break ScanOutcome::Clean;
        }
        match frame_len(&buf[pos..]) {
            Err(FrameError::IncompleteFrame { .. }) => {
                break ScanOutcome::Torn {
                    valid_bytes: pos as u64,
                }
            }
            Err(e) => {
                break ScanOutcome::Corrupt {
                    at: pos as u64,
                    detail: e.to_string(),
                }
            }
            Ok(total) => {
                if pos + total > buf.len() {
                    break ScanOutcome::Torn {
                        valid_bytes: pos as u64,
                    };
                }
                match deserialize_record(&buf[pos..pos + total]) {
                    Ok(_) => {
                        positions.push(pos as u64);
                        pos += total;
                    }
                    Err(e) => {
                        break ScanOutcome::Corrupt {
                            at: pos as u64,
                            detail: e.to_string(),
                        }
                    }
                }
            }
        }
    };
    Ok(SegmentScan { positions, outcome })
}

/// Truncates a torn segment back to its last complete frame.
pub fn truncate_segment(path: &Path, valid_bytes: u64) -> std::io::Result<()> {
    let file = OpenOptions::new().write(true).open(path)?;
    file.set_len(valid_bytes)?;
    file.sync_data()?;
    Ok(())
}

/// Reads the frames stored at `positions[from..to]`. Positions must be the
/// contiguous frame index of this segment; `clean_len` bounds the final frame.
pub fn read_frames(
    path: &Path,
    positions: &[u64],
    clean_len: u64,
    from: usize,
    to: usize,
) -> std::io::Result<Vec<Vec<u8>>> {
    debug_assert!(from <= to && to <= positions.len());
    if from == to {
        return Ok(Vec::new());
    }
    let span_start = positions[from];
    let span_end = if to < positions.len() {
        positions[to]
    } else {
        clean_len
    };
    let mut file = File::open(path)?;
    file.seek(SeekFrom::Start(span_start))?;
    let mut span = vec![0u8; (span_end - span_start) as usize];
    file.read_exact(&mut span)?;

    let mut frames = Vec::with_capacity(to - from);
    for i in from..to {
        let start = (positions[i] - span_start) as usize;
        let end = if i + 1 < to {
            (positions[i + 1] - span_start) as usize
        } else {
            span.len()
        };
        frames.push(span[start..end].to_vec());
    }
    Ok(frames)
}

/// The open tail segment of a topic.
pub struct SegmentWriter {
    path: PathBuf,
    writer: BufWriter<File>,
    pub base_offset: u64,
    pub positions: Vec<u64>,
    pub bytes: u64,
    dirty: bool,
}

impl SegmentWriter {
    pub fn create(dir: &Path, base_offset: u64) -> std::io::Result<Self> {
        let path = dir.join(segment_file_name(base_offset));
        let file = OpenOptions::new().create(true).write(true).open(&path)?;
        Ok(Self {
            path,
            writer: BufWriter::new(file),
            base_offset,
            positions: Vec::new(),
            bytes: 0,
            dirty: false,
        })
    }

    /// Reopens an existing tail segment for appending, given its recovery
    /// scan (positions over the clean prefix).
    pub fn reopen(path: PathBuf, base_offset: u64, positions: Vec<u64>, clean_len: u64) -> std::io::Result<Self> {
        let mut file = OpenOptions::new().write(true).open(&path)?;
        file.seek(SeekFrom::Start(clean_len))?;
        Ok(Self {
            path,
            writer: BufWriter::new(file),
            base_offset,
            positions,
            bytes: clean_len,
            dirty: false,
        })
    }

    pub fn append(&mut self, frame: &[u8]) -> std::io::Result<()> {
        self.writer.write_all(frame)?;
        self.positions.push(self.bytes);
        self.bytes += frame.len() as u64;
        self.dirty = true;
        Ok(())
    }

    pub fn flush(&mut self, sync: bool) -> std::io::Result<()> {
        if !self.dirty {
            return Ok(());
        }
        self.writer.flush()?;
        if sync {
            self.writer.get_ref().sync_data()?;
        }
        self.dirty = false;
        Ok(())
    }

    pub fn record_count(&self) -> u64 {
        self.positions.len() as u64
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

impl Drop for SegmentWriter {
    fn drop(&mut self) {
        let _ = self.flush(false);
    }
}
