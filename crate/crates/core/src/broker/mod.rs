//! Durable, append-only, offset-addressed topic logs with consumer-group
//! offset commits and replay-from-offset.
//!
//! On disk: `<root>/<topic>/<base_offset>.seg` files of concatenated record
//! frames, plus `<root>/_groups/<group>.offsets` text files with one
//! `topic<TAB>offset` line per committed position. Offsets are dense per
//! topic; acknowledged appends survive recovery byte-identically.

mod segment;
pub mod wire;

use std::collections::HashMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{Duration, Instant};

use parking_lot::{Mutex, RwLock};
use thiserror::Error;

use crate::record::{deserialize_record, serialize_record, FrameError, Offset, StreamRecord, TopicName};
use segment::{ScanOutcome, SegmentWriter};

const GROUPS_DIR: &str = "_groups";

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("invalid name: {0}")]
    InvalidName(String),
    #[error("topic not found: {0}")]
    TopicNotFound(String),
    #[error("offset {requested} out of range for topic {topic} (next offset {next})")]
    OffsetOutOfRange {
        topic: String,
        requested: u64,
        next: u64,
    },
    #[error("stale commit for group {group} on {topic}: attempted {attempted}, already at {committed}")]
    StaleCommit {
        group: String,
        topic: String,
        attempted: u64,
        committed: u64,
    },
    #[error("topic {topic} quarantined, log corrupt: {detail}")]
    CorruptLog { topic: String, detail: String },
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("protocol error: {0}")]
    Protocol(String),
}

/// When appends become readable in the segment file. Acknowledgement follows
/// the flush under `PerAppend`; under `Interval` the ack can precede it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FlushPolicy {
    PerAppend,
    Interval(Duration),
}

#[derive(Debug, Clone)]
pub struct BrokerConfig {
    pub root: PathBuf,
    /// Roll to a new segment once the tail exceeds this many bytes.
    pub segment_bytes: u64,
    pub flush: FlushPolicy,
    /// fsync on every flush. Off by default: crash safety at process level,
    /// not power-loss level.
    pub fsync: bool,
}

impl BrokerConfig {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self {
            root: root.into(),
            segment_bytes: 64 * 1024 * 1024,
            flush: FlushPolicy::PerAppend,
            fsync: false,
        }
    }
}

/// The operation surface shared by the embedded broker and the wire client,
/// so jobs run unchanged in either deployment mode.
pub trait BrokerApi: Send + Sync {
    fn create_topic(&self, name: &TopicName) -> Result<(), BrokerError>;
    fn append(&self, topic: &TopicName, record: &StreamRecord) -> Result<Offset, BrokerError>;
    fn fetch(
        &self,
        topic: &TopicName,
        from: Offset,
        max_records: usize,
    ) -> Result<Vec<(Offset, StreamRecord)>, BrokerError>;
    fn commit_offset(&self, group: &str, topic: &TopicName, next: Offset) -> Result<(), BrokerError>;
    fn read_committed(&self, group: &str, topic: &TopicName) -> Result<Option<Offset>, BrokerError>;
}

struct ClosedSegment {
    base_offset: u64,
    path: PathBuf,
    positions: Vec<u64>,
    len: u64,
}

struct TopicState {
    dir: PathBuf,
    closed: Vec<ClosedSegment>,
    active: Option<SegmentWriter>,
    last_flush: Instant,
    quarantine: Option<String>,
}

impl TopicState {
    fn next_offset(&self) -> u64 {
        if let Some(active) = &self.active {
            active.base_offset + active.record_count()
        } else if let Some(last) = self.closed.last() {
            last.base_offset + last.positions.len() as u64
        } else {
            0
        }
    }

    fn check_healthy(&self, topic: &TopicName) -> Result<(), BrokerError> {
        match &self.quarantine {
            Some(detail) => Err(BrokerError::CorruptLog {
                topic: topic.to_string(),
                detail: detail.clone(),
            }),
            None => Ok(()),
        }
    }

    /// Moves the recovered tail segment (if any) into the writer seat.
    fn ensure_active(&mut self) -> std::io::Result<&mut SegmentWriter> {
        if self.active.is_none() {
            let next = self.next_offset();
            match self.closed.pop() {
                Some(tail) if tail.base_offset + tail.positions.len() as u64 == next => {
                    self.active = Some(SegmentWriter::reopen(
                        tail.path,
                        tail.base_offset,
                        tail.positions,
                        tail.len,
                    )?);
                }
                Some(tail) => {
                    // Unreachable chain state; keep the segment closed.
                    self.closed.push(tail);
                    self.active = Some(SegmentWriter::create(&self.dir, next)?);
                }
                None => {
                    self.active = Some(SegmentWriter::create(&self.dir, next)?);
                }
            }
        }
        Ok(self.active.as_mut().unwrap())
    }

    fn roll(&mut self, fsync: bool) -> std::io::Result<()> {
        if let Some(mut active) = self.active.take() {
            active.flush(fsync)?;
            let next = active.base_offset + active.record_count();
            self.closed.push(ClosedSegment {
                base_offset: active.base_offset,
                path: active.path().to_path_buf(),
                len: active.bytes,
                positions: std::mem::take(&mut active.positions),
            });
            drop(active);
            self.active = Some(SegmentWriter::create(&self.dir, next)?);
        }
        Ok(())
    }
}

/// One span of frames to read from one segment file, planned under the topic
/// lock and executed outside it so fetches do not block appends.
struct ReadPlan {
    path: PathBuf,
    positions: Vec<u64>,
    end_byte: u64,
    first_offset: u64,
}

/// The embedded broker. `Broker::open` performs recovery: it rebuilds every
/// topic index from the segment files, truncates a torn trailing frame, and
/// quarantines topics with mid-log corruption.
pub struct Broker {
    config: BrokerConfig,
    topics: RwLock<HashMap<TopicName, Arc<Mutex<TopicState>>>>,
    groups: Mutex<GroupStore>,
}

impl Broker {
    pub fn open(config: BrokerConfig) -> Result<Self, BrokerError> {
        fs::create_dir_all(&config.root)?;
        fs::create_dir_all(config.root.join(GROUPS_DIR))?;

        let mut topics = HashMap::new();
        for entry in fs::read_dir(&config.root)? {
            let entry = entry?;
            if !entry.file_type()?.is_dir() {
                continue;
            }
            let name = entry.file_name().to_string_lossy().into_owned();
            if name == GROUPS_DIR {
                continue;
            }
            let topic = match TopicName::new(name.clone()) {
                Ok(t) => t,
                Err(_) => {
                    log::warn!("broker recovery: skipping non-topic directory {name:?}");
                    continue;
                }
            };
            let state = recover_topic(&topic, entry.path())?;
            topics.insert(topic, Arc::new(Mutex::new(state)));
        }

        let mut groups = GroupStore::load(config.root.join(GROUPS_DIR))?;
        // A commit can only be ahead of its topic if the log lost a torn
        // tail; clamp so consumers can make progress again.
        for (group, per_topic) in groups.committed.iter_mut() {
            for (topic, offset) in per_topic.iter_mut() {
                if let Some(state) = topics.get(topic) {
                    let next = state.lock().next_offset();
                    if *offset > next {
                        log::warn!(
                            "broker recovery: clamping committed offset for group {group} on {topic} from {offset} to {next}"
                        );
                        *offset = next;
                    }
                }
            }
        }

        Ok(Self {
            config,
            topics: RwLock::new(topics),
            groups: Mutex::new(groups),
        })
    }

    fn topic_state(&self, topic: &TopicName) -> Result<Arc<Mutex<TopicState>>, BrokerError> {
        self.topics
            .read()
            .get(topic)
            .cloned()
            .ok_or_else(|| BrokerError::TopicNotFound(topic.to_string()))
    }

    /// Flushes every topic's tail segment. Called on graceful shutdown; with
    /// `FlushPolicy::PerAppend` this is a no-op.
    pub fn flush_all(&self) -> Result<(), BrokerError> {
        for state in self.topics.read().values() {
            let mut state = state.lock();
            if let Some(active) = state.active.as_mut() {
                active.flush(self.config.fsync)?;
            }
        }
        Ok(())
    }

    pub fn root(&self) -> &Path {
        &self.config.root
    }

    /// Point-in-time view of every topic, for inspection tooling.
    pub fn topic_summaries(&self) -> Vec<TopicSummary> {
        let mut out: Vec<TopicSummary> = self
            .topics
            .read()
            .iter()
            .map(|(name, state)| {
                let state = state.lock();
                TopicSummary {
                    name: name.clone(),
                    next_offset: state.next_offset(),
                    segments: state.closed.len() + usize::from(state.active.is_some()),
                    quarantined: state.quarantine.clone(),
                }
            })
            .collect();
        out.sort_by(|a, b| a.name.cmp(&b.name));
        out
    }

    pub fn next_offset(&self, topic: &TopicName) -> Result<Offset, BrokerError> {
        let state = self.topic_state(topic)?;
        let state = state.lock();
        state.check_healthy(topic)?;
        Ok(Offset(state.next_offset()))
    }
}

#[derive(Debug, Clone)]
pub struct TopicSummary {
    pub name: TopicName,
    pub next_offset: u64,
    pub segments: usize,
    pub quarantined: Option<String>,
}

impl BrokerApi for Broker {
    fn create_topic(&self, name: &TopicName) -> Result<(), BrokerError> {
        {
            if self.topics.read().contains_key(name) {
                return Ok(());
            }
        }
        let mut topics = self.topics.write();
        if topics.contains_key(name) {
            return Ok(());
        }
        let dir = self.config.root.join(name.as_str());
        fs::create_dir_all(&dir)?;
        topics.insert(
            name.clone(),
            Arc::new(Mutex::new(TopicState {
                dir,
                closed: Vec::new(),
                active: None,
                last_flush: Instant::now(),
                quarantine: None,
            })),
        );
        Ok(())
    }

    fn append(&self, topic: &TopicName, record: &StreamRecord) -> Result<Offset, BrokerError> {
        let frame = serialize_record(record)?;
        let state = self.topic_state(topic)?;
        let mut state = state.lock();
        state.check_healthy(topic)?;

        let fsync = self.config.fsync;
        state.ensure_active()?;
        let full = {
            let active = state.active.as_ref().unwrap();
            active.bytes > 0 && active.bytes + frame.len() as u64 > self.config.segment_bytes
        };
        if full {
            state.roll(fsync)?;
        }
        let offset = state.next_offset();
        let flush_now = match self.config.flush {
            FlushPolicy::PerAppend => true,
            FlushPolicy::Interval(every) => state.last_flush.elapsed() >= every,
        };
        let active = state.active.as_mut().unwrap();
        active.append(&frame)?;
        if flush_now {
            active.flush(fsync)?;
            state.last_flush = Instant::now();
        }
        Ok(Offset(offset))
    }

    fn fetch(
        &self,
        topic: &TopicName,
        from: Offset,
        max_records: usize,
    ) -> Result<Vec<(Offset, StreamRecord)>, BrokerError> {
        let state = self.topic_state(topic)?;
        let plans = {
            let mut state = state.lock();
            state.check_healthy(topic)?;
            let next = state.next_offset();
            if from.0 > next {
                return Err(BrokerError::OffsetOutOfRange {
                    topic: topic.to_string(),
                    requested: from.0,
                    next,
                });
            }
            if from.0 == next || max_records == 0 {
                return Ok(Vec::new());
            }
            // Make buffered appends visible to the file reads below.
            if let Some(active) = state.active.as_mut() {
                active.flush(false)?;
            }
            let last_wanted = from.0.saturating_add(max_records as u64 - 1).min(next - 1);
            plan_reads(&state, from.0, last_wanted)
        };

        let mut out = Vec::new();
        for plan in plans {
            let frames = segment::read_frames(
                &plan.path,
                &plan.positions,
                plan.end_byte,
                0,
                plan.positions.len(),
            )?;
            for (i, frame) in frames.iter().enumerate() {
                out.push((Offset(plan.first_offset + i as u64), deserialize_record(frame)?));
            }
        }
        Ok(out)
    }

    fn commit_offset(&self, group: &str, topic: &TopicName, next: Offset) -> Result<(), BrokerError> {
        validate_group_id(group)?;
        let state = self.topic_state(topic)?;
        let topic_next = {
            let state = state.lock();
            state.check_healthy(topic)?;
            state.next_offset()
        };
        if next.0 > topic_next {
            return Err(BrokerError::OffsetOutOfRange {
                topic: topic.to_string(),
                requested: next.0,
                next: topic_next,
            });
        }
        let mut groups = self.groups.lock();
        groups.commit(group, topic, next.0)
    }

    fn read_committed(&self, group: &str, topic: &TopicName) -> Result<Option<Offset>, BrokerError> {
        validate_group_id(group)?;
        Ok(self.groups.lock().get(group, topic).map(Offset))
    }
}

fn validate_group_id(group: &str) -> Result<(), BrokerError> {
    if group.is_empty() || group.len() > 128 {
        return Err(BrokerError::InvalidName(format!(
            "group id must be 1..=128 chars, got {:?}",
            group
        )));
    }
    if let Some(c) = group
        .chars()
        .find(|c| !matches!(c, 'a'..='z' | '0'..='9' | '.' | '_' | '-'))
    {
        return Err(BrokerError::InvalidName(format!(
            "group id {group:?} contains invalid character {c:?}"
        )));
    }
    Ok(())
}

fn plan_reads(state: &TopicState, from: u64, last: u64) -> Vec<ReadPlan> {
    let mut plans = Vec::new();
    let mut segments: Vec<(&u64, &PathBuf, &Vec<u64>, u64)> = state
        .closed
        .iter()
        .map(|s| (&s.base_offset, &s.path, &s.positions, s.len))
        .collect();
    let active_path;
    if let Some(active) = &state.active {
        active_path = active.path().to_path_buf();
        segments.push((&active.base_offset, &active_path, &active.positions, active.bytes));
    }
    for (base, path, positions, len) in segments {
        let seg_first = *base;
        let seg_last = seg_first + positions.len() as u64;
        if seg_last == seg_first || last < seg_first || from >= seg_last {
            continue;
        }
        let lo = from.max(seg_first) - seg_first;
        let hi = last.min(seg_last - 1) - seg_first;
        let slice = positions[lo as usize..=hi as usize].to_vec();
        let end_byte = if (hi as usize) + 1 < positions.len() {
            positions[hi as usize + 1]
        } else {
            len
        };
        plans.push(ReadPlan {
            path: path.clone(),
            positions: slice,
            end_byte,
            first_offset: seg_first + lo,
        });
    }
    plans.sort_by_key(|p| p.first_offset);
    plans
}

fn recover_topic(topic: &TopicName, dir: PathBuf) -> Result<TopicState, BrokerError> {
    let mut files: Vec<(u64, PathBuf)> = Vec::new();
    for entry in fs::read_dir(&dir)? {
        let entry = entry?;
        let name = entry.file_name().to_string_lossy().into_owned();
        if let Some(base) = segment::parse_segment_file_name(&name) {
            files.push((base, entry.path()));
        }
    }
    files.sort_by_key(|(base, _)| *base);

    let mut state = TopicState {
        dir,
        closed: Vec::new(),
        active: None,
        last_flush: Instant::now(),
        quarantine: None,
    };

    let mut expected_base = 0u64;
    for (i, (base, path)) in files.iter().enumerate() {
        let is_last = i + 1 == files.len();
        if *base != expected_base {
            state.quarantine = Some(format!(
                "segment {} starts at offset {base}, expected {expected_base}",
                path.display()
            ));
            break;
        }
        let scan = segment::scan_segment(path)?;
        let (positions, len) = match scan.outcome {
            ScanOutcome::Clean => {
                // every byte belongs to a complete frame
                let len = fs::metadata(path)?.len();
                (scan.positions, len)
            }
            ScanOutcome::Torn { valid_bytes } if is_last => {
                log::warn!(
                    "broker recovery: truncating torn trailing frame in {} at byte {valid_bytes}",
                    path.display()
                );
                segment::truncate_segment(path, valid_bytes)?;
                (scan.positions, valid_bytes)
            }
            ScanOutcome::Torn { valid_bytes } => {
                state.quarantine = Some(format!(
                    "segment {} torn at byte {valid_bytes} but later segments exist",
                    path.display()
                ));
                break;
            }
            ScanOutcome::Corrupt { at, detail } => {
                state.quarantine = Some(format!(
                    "segment {} corrupt at byte {at}: {detail}",
                    path.display()
                ));
                break;
            }
        };
        expected_base = base + positions.len() as u64;
        state.closed.push(ClosedSegment {
            base_offset: *base,
            path: path.clone(),
            positions,
            len,
        });
    }

    if let Some(detail) = &state.quarantine {
        log::error!("broker recovery: topic {topic} quarantined: {detail}");
    }
    Ok(state)
}

struct GroupStore {
    dir: PathBuf,
    committed: HashMap<String, HashMap<TopicName, u64>>,
}

impl GroupStore {
    fn load(dir: PathBuf) -> Result<Self, BrokerError> {
        let mut committed: HashMap<String, HashMap<TopicName, u64>> = HashMap::new();
        for entry in fs::read_dir(&dir)? {
            let entry = entry?;
            let file_name = entry.file_name().to_string_lossy().into_owned();
            let Some(group) = file_name.strip_suffix(".offsets") else {
                continue;
            };
            let text = fs::read_to_string(entry.path())?;
            let mut per_topic = HashMap::new();
            for line in text.lines() {
                if line.trim().is_empty() {
                    continue;
                }
                let Some((topic, offset)) = line.split_once('\t') else {
                    log::warn!("group file {file_name}: skipping malformed line {line:?}");
                    continue;
                };
                match (TopicName::new(topic), offset.trim().parse::<u64>()) {
                    (Ok(topic), Ok(offset)) => {
                        per_topic.insert(topic, offset);
                    }
                    _ => log::warn!("group file {file_name}: skipping malformed line {line:?}"),
                }
            }
            committed.insert(group.to_string(), per_topic);
        }
        Ok(Self { dir, committed })
    }

    fn get(&self, group: &str, topic: &TopicName) -> Option<u64> {
        self.committed.get(group).and_then(|m| m.get(topic)).copied()
    }

    fn commit(&mut self, group: &str, topic: &TopicName, next: u64) -> Result<(), BrokerError> {
        let per_topic = self.committed.entry(group.to_string()).or_default();
        if let Some(&committed) = per_topic.get(topic) {
            if next < committed {
                return Err(BrokerError::StaleCommit {
                    group: group.to_string(),
                    topic: topic.to_string(),
                    attempted: next,
                    committed,
                });
            }
            if next == committed {
                return Ok(());
            }
        }
        per_topic.insert(topic.clone(), next);
        self.persist(group)
    }

    /// Atomic rewrite so a crash mid-commit leaves the previous positions.
    fn persist(&self, group: &str) -> Result<(), BrokerError> {
        let per_topic = &self.committed[group];
        let mut lines: Vec<String> = per_topic
            .iter()
            .map(|(topic, offset)| format!("{topic}\t{offset}"))
            .collect();
        lines.sort();
        let tmp = self.dir.join(format!("{group}.offsets.tmp"));
        let final_path = self.dir.join(format!("{group}.offsets"));
        {
            let mut file = fs::File::create(&tmp)?;
            file.write_all(lines.join("\n").as_bytes())?;
            file.write_all(b"\n")?;
            file.sync_data()?;
        }
        fs::rename(&tmp, &final_path)?;
        Ok(())
    }
}
