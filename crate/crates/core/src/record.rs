//! Record envelope and the binary frame format shared by the broker, the
//! runtime, and every plugin.
//!
//! A frame is self-delimiting and fixed-layout so the broker can store and
//! replay it verbatim:
//!
//! ```text
//! [0..4)   u32 BE  total frame length, including these four bytes
//! [4..6)   u16 BE  format version (1)
//! [6..14)  i64 BE  event time, milliseconds since the Unix epoch (UTC)
//! [14]     u8      source_id length, then that many UTF-8 bytes
//! ...      u8      schema_tag length, then that many ASCII bytes
//! ...      u8      key presence flag; if 1: u16 BE key length, then key bytes
//! ...              payload, running to the end of the frame
//! ```
//!
//! Length-prefix conventions (reused by the wire protocol): short strings
//! carry a 1-byte length, byte sequences a 2- or 4-byte big-endian length.

use thiserror::Error;

/// Hard cap on a serialized frame. Reads never buffer more than this.
pub const MAX_FRAME_LEN: usize = 16 * 1024 * 1024;

/// Wire format version emitted by [`serialize_record`].
pub const FRAME_VERSION: u16 = 1;

/// Structural floor: length + version + time + the three one-byte prefixes.
const MIN_FRAME_LEN: usize = 4 + 2 + 8 + 1 + 1 + 1;

/// Maximum schema_tag length in bytes.
pub const MAX_SCHEMA_TAG_LEN: usize = 64;

#[derive(Debug, Error)]
pub enum FrameError {
    #[error("frame too large: {0} bytes exceeds the {MAX_FRAME_LEN}-byte cap")]
    FrameTooLarge(usize),
    #[error("incomplete frame: need {needed} bytes, have {have}")]
    IncompleteFrame { needed: usize, have: usize },
    #[error("unsupported frame version {0}")]
    UnsupportedVersion(u16),
    #[error("corrupt frame: {0}")]
    CorruptFrame(String),
    #[error("invalid record: {0}")]
    InvalidRecord(String),
}

/// The unit that flows through every job: opaque payload bytes plus the
/// envelope metadata the toolkit itself needs (time for windowing, key for
/// partition/dedup, source and schema tags for routing).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct StreamRecord {
    pub payload: Vec<u8>,
    /// Event time in UTC milliseconds. Producer-assigned; the broker never
    /// rewrites it, so replayed streams window identically.
    pub event_time_ms: i64,
    pub key: Option<Vec<u8>>,
    pub source_id: String,
    pub schema_tag: String,
}

impl StreamRecord {
    pub fn new(
        payload: impl Into<Vec<u8>>,
        event_time_ms: i64,
        source_id: impl Into<String>,
        schema_tag: impl Into<String>,
    ) -> Self {
        Self {
            payload: payload.into(),
            event_time_ms,
            key: None,
            source_id: source_id.into(),
            schema_tag: schema_tag.into(),
        }
    }

    pub fn with_key(mut self, key: impl Into<Vec<u8>>) -> Self {
        self.key = Some(key.into());
        self
    }

    /// Checks the envelope invariants that the frame format can express.
    pub fn validate(&self) -> Result<(), FrameError> {
        if self.schema_tag.is_empty() {
            return Err(FrameError::InvalidRecord("schema_tag is empty".into()));
        }
        if self.schema_tag.len() > MAX_SCHEMA_TAG_LEN {
            return Err(FrameError::InvalidRecord(format!(
                "schema_tag is {} bytes, max {MAX_SCHEMA_TAG_LEN}",
                self.schema_tag.len()
            )));
        }
        if !self.schema_tag.is_ascii() {
            return Err(FrameError::InvalidRecord("schema_tag is not ASCII".into()));
        }
        if self.source_id.len() > u8::MAX as usize {
            return Err(FrameError::InvalidRecord(format!(
                "source_id is {} bytes, max {}",
                self.source_id.len(),
                u8::MAX
            )));
        }
        if let Some(key) = &self.key {
            if key.len() > u16::MAX as usize {
                return Err(FrameError::InvalidRecord(format!(
                    "key is {} bytes, max {}",
                    key.len(),
                    u16::MAX
                )));
            }
        }
        Ok(())
    }
}

/// Encodes a record into its frame. Deterministic: equal records produce
/// byte-identical frames.
pub fn serialize_record(record: &StreamRecord) -> Result<Vec<u8>, FrameError> {
    record.validate()?;
    let key_len = record.key.as_ref().map(|k| 2 + k.len()).unwrap_or(0);
    let total = 4
        + 2
        + 8
        + 1
        + record.source_id.len()
        + 1
        + record.schema_tag.len()
        + 1
        + key_len
        + record.payload.len();
    if total > MAX_FRAME_LEN {
        return Err(FrameError::FrameTooLarge(total));
    }

    let mut buf = Vec::with_capacity(total);
    buf.extend_from_slice(&(total as u32).to_be_bytes());
    buf.extend_from_slice(&FRAME_VERSION.to_be_bytes());
    buf.extend_from_slice(&record.event_time_ms.to_be_bytes());
    buf.push(record.source_id.len() as u8);
    buf.extend_from_slice(record.source_id.as_bytes());
    buf.push(record.schema_tag.len() as u8);
    buf.extend_from_slice(record.schema_tag.as_bytes());
    match &record.key {
        None => buf.push(0),
        Some(key) => {
            buf.push(1);
            buf.extend_from_slice(&(key.len() as u16).to_be_bytes());
            buf.extend_from_slice(key);
        }
    }
    buf.extend_from_slice(&record.payload);
    debug_assert_eq!(buf.len(), total);
    Ok(buf)
}

/// Decodes a complete frame. The input must be exactly one frame; a length
/// prefix that disagrees with the slice is a corrupt frame, a slice shorter
/// than the prefix promises is an incomplete one.
pub fn deserialize_record(frame: &[u8]) -> Result<StreamRecord, FrameError> {
    let total = frame_len(frame)?;
    if frame.len() < total {
        return Err(FrameError::IncompleteFrame {
            needed: total,
            have: frame.len(),
        });
    }
    if frame.len() > total {
        return Err(FrameError::CorruptFrame(format!(
            "length prefix says {total} bytes but slice has {}",
            frame.len()
        )));
    }

    let mut cur = Cursor {
        buf: frame,
        pos: 4,
    };
    let version = u16::from_be_bytes(cur.take_array::<2>()?);
    if version != FRAME_VERSION {
        return Err(FrameError::UnsupportedVersion(version));
    }
    let event_time_ms = i64::from_be_bytes(cur.take_array::<8>()?);
    let source_len = cur.take_array::<1>()?[0] as usize;
    let source_id = std::str::from_utf8(cur.take(source_len)?)
        .map_err(|_| FrameError::CorruptFrame("source_id is not UTF-8".into()))?
        .to_owned();
    let tag_len = cur.take_array::<1>()?[0] as usize;
    let schema_tag = std::str::from_utf8(cur.take(tag_len)?)
        .map_err(|_| FrameError::CorruptFrame("schema_tag is not UTF-8".into()))?
        .to_owned();
    let key = match cur.take_array::<1>()?[0] {
        0 => None,
        1 => {
            let key_len = u16::from_be_bytes(cur.take_array::<2>()?) as usize;
            Some(cur.take(key_len)?.to_vec())
        }
        flag => {
            return Err(FrameError::CorruptFrame(format!(
                "key presence flag is {flag}, expected 0 or 1"
            )))
        }
    };
    let payload = cur.rest().to_vec();

    let record = StreamRecord {
        payload,
        event_time_ms,
        key,
        source_id,
        schema_tag,
    };
    record
        .validate()
        .map_err(|e| FrameError::CorruptFrame(e.to_string()))?;
    Ok(record)
}

/// Reads the total length a frame header promises, without decoding the body.
/// Used by segment scans and the wire protocol to delimit reads.
pub fn frame_len(header: &[u8]) -> Result<usize, FrameError> {
    if header.len() < 4 {
        return Err(FrameError::IncompleteFrame {
            needed: 4,
            have: header.len(),
        });
    }
    let total = u32::from_be_bytes([header[0], header[1], header[2], header[3]]) as usize;
    if total > MAX_FRAME_LEN {
        return Err(FrameError::CorruptFrame(format!(
            "length prefix {total} exceeds the {MAX_FRAME_LEN}-byte cap"
        )));
    }
    if total < MIN_FRAME_LEN {
        return Err(FrameError::CorruptFrame(format!(
            "length prefix {total} is below the {MIN_FRAME_LEN}-byte minimum"
        )));
    }
    Ok(total)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], FrameError> {
        if self.pos + n > self.buf.len() {
            return Err(FrameError::CorruptFrame(format!(
                "field of {n} bytes at offset {} overruns the {}-byte frame",
                self.pos,
                self.buf.len()
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn take_array<const N: usize>(&mut self) -> Result<[u8; N], FrameError> {
        Ok(self.take(N)?.try_into().unwrap())
    }

    fn rest(&self) -> &'a [u8] {
        &self.buf[self.pos..]
    }
}

/// Validated topic identifier: `[a-z0-9._-]{1,128}`.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct TopicName(String);

impl TopicName {
    pub fn new(name: impl Into<String>) -> Result<Self, FrameError> {
        let name = name.into();
        if name.is_empty() || name.len() > 128 {
            return Err(FrameError::InvalidRecord(format!(
                "topic name must be 1..=128 chars, got {} (\"{name}\")",
                name.len()
            )));
        }
        if let Some(c) = name
            .chars()
            .find(|c| !matches!(c, 'a'..='z' | '0'..='9' | '.' | '_' | '-'))
        {
            return Err(FrameError::InvalidRecord(format!(
                "topic name \"{name}\" contains invalid character {c:?}"
            )));
        }
        Ok(Self(name))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl std::fmt::Display for TopicName {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::str::FromStr for TopicName {
    type Err = FrameError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

/// Dense per-topic sequence number: first record is 0, each append adds 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Default)]
pub struct Offset(pub u64);

impl Offset {
    pub fn next(self) -> Offset {
        Offset(self.0 + 1)
    }
}

impl From<u64> for Offset {
    fn from(v: u64) -> Self {
        Offset(v)
    }
}

impl std::fmt::Display for Offset {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        self.0.fmt(f)
    }
}
