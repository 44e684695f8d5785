//! Broker behavior: dense offsets, replay, durability across reopen,
//! torn-write truncation, quarantine, and consumer-group commits.

use edna_core::broker::{Broker, BrokerApi, BrokerConfig, BrokerError};
use edna_core::record::{serialize_record, Offset, StreamRecord, TopicName};
use rand::prelude::*;
use rand_chacha::ChaCha8Rng;
use std::io::Write;
use std::sync::Arc;

fn topic(name: &str) -> TopicName {
    TopicName::new(name).unwrap()
}

fn record(n: u64) -> StreamRecord {
    StreamRecord::new(format!("payload-{n}").into_bytes(), n as i64, "t", "raw")
        .with_key(n.to_be_bytes().to_vec())
}

fn open(root: &std::path::Path) -> Broker {
    Broker::open(BrokerConfig::new(root)).unwrap()
}

#[test]
fn appends_get_dense_offsets() {
    let dir = tempfile::tempdir().unwrap();
    let broker = open(dir.path());
    let t = topic("fresh");
    broker.create_topic(&t).unwrap();
    for n in 0..3 {
        assert_eq!(broker.append(&t, &record(n)).unwrap(), Offset(n));
    }
}

#[test]
fn create_topic_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let broker = open(dir.path());
    let t = topic("raw-tweets");
    broker.create_topic(&t).unwrap();
    broker.append(&t, &record(0)).unwrap();
    broker.create_topic(&t).unwrap();
    assert_eq!(broker.next_offset(&t).unwrap(), Offset(1));
}

#[test]
fn empty_topic_fetch_returns_empty() {
    let dir = tempfile::tempdir().unwrap();
    let broker = open(dir.path());
    let t = topic("empty");
    broker.create_topic(&t).unwrap();
    assert!(broker.fetch(&t, Offset(0), 100).unwrap().is_empty());
}

#[test]
fn append_to_unknown_topic_is_not_found() {
    let dir = tempfile::tempdir().unwrap();
    let broker = open(dir.path());
    assert!(matches!(
        broker.append(&topic("nope"), &record(0)),
        Err(BrokerError::TopicNotFound(_))
    ));
}

#[test]
fn fetch_window_in_the_middle() {
    let dir = tempfile::tempdir().unwrap();
    let broker = open(dir.path());
    let t = topic("ten");
    broker.create_topic(&t).unwrap();
    for n in 0..10 {
        broker.append(&t, &record(n)).unwrap();
    }
    let got = broker.fetch(&t, Offset(3), 4).unwrap();
    assert_eq!(
        got.iter().map(|(o, _)| o.0).collect::<Vec<_>>(),
        vec![3, 4, 5, 6]
    );
    assert_eq!(got[0].1, record(3));
}

#[test]
fn fetch_at_next_offset_is_empty_not_error() {
    let dir = tempfile::tempdir().unwrap();
    let broker = open(dir.path());
    let t = topic("tail");
    broker.create_topic(&t).unwrap();
    broker.append(&t, &record(0)).unwrap();
    assert!(broker.fetch(&t, Offset(1), 10).unwrap().is_empty());
    assert!(matches!(
        broker.fetch(&t, Offset(2), 10),
        Err(BrokerError::OffsetOutOfRange { .. })
    ));
}

#[test]
fn replay_equals_append_sequence() {
    let dir = tempfile::tempdir().unwrap();
    let broker = open(dir.path());
    let t = topic("mirror");
    broker.create_topic(&t).unwrap();
    let mut mirror = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for n in 0..500 {
        let mut r = record(n);
        r.payload = (0..rng.random_range(0..200))
            .map(|_| rng.random())
            .collect();
        broker.append(&t, &r).unwrap();
        mirror.push(r);
    }
    let got = broker.fetch(&t, Offset(0), usize::MAX).unwrap();
    assert_eq!(got.len(), mirror.len());
    for (i, (offset, r)) in got.iter().enumerate() {
        assert_eq!(offset.0, i as u64);
        assert_eq!(r, &mirror[i]);
    }
}

#[test]
fn appends_survive_reopen_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let expected: Vec<StreamRecord> = (0..50).map(record).collect();
    {
        let broker = open(dir.path());
        let t = topic("durable");
        broker.create_topic(&t).unwrap();
        for r in &expected {
            broker.append(&t, r).unwrap();
        }
        // dropped without any graceful shutdown
    }
    let broker = open(dir.path());
    let got = broker.fetch(&topic("durable"), Offset(0), usize::MAX).unwrap();
    for (i, (_, r)) in got.iter().enumerate() {
        assert_eq!(
            serialize_record(r).unwrap(),
            serialize_record(&expected[i]).unwrap()
        );
    }
    assert_eq!(got.len(), expected.len());
}

#[test]
fn segment_roll_preserves_order_across_files() {
    let dir = tempfile::tempdir().unwrap();
    let mut config = BrokerConfig::new(dir.path());
    config.segment_bytes = 256; // force frequent rolls
    let broker = Broker::open(config).unwrap();
    let t = topic("rolled");
    broker.create_topic(&t).unwrap();
    for n in 0..100 {
        broker.append(&t, &record(n)).unwrap();
    }
    let summaries = broker.topic_summaries();
    assert!(summaries[0].segments > 1, "expected multiple segments");
    let got = broker.fetch(&t, Offset(0), usize::MAX).unwrap();
    assert_eq!(got.len(), 100);
    for (i, (offset, r)) in got.iter().enumerate() {
        assert_eq!(offset.0, i as u64);
        assert_eq!(r, &record(i as u64));
    }
    // a fetch spanning the segment boundary
    let span = broker.fetch(&t, Offset(5), 60).unwrap();
    assert_eq!(span.len(), 60);
    assert_eq!(span[0].0, Offset(5));
}

#[test]
fn commit_read_monotonicity_and_persistence() {
    let dir = tempfile::tempdir().unwrap();
    let t = topic("commits");
    {
        let broker = open(dir.path());
        broker.create_topic(&t).unwrap();
        for n in 0..10 {
            broker.append(&t, &record(n)).unwrap();
        }
        broker.commit_offset("g1", &t, Offset(5)).unwrap();
        assert_eq!(broker.read_committed("g1", &t).unwrap(), Some(Offset(5)));

        match broker.commit_offset("g1", &t, Offset(3)) {
            Err(BrokerError::StaleCommit {
                attempted: 3,
                committed: 5,
                ..
            }) => {}
            other => panic!("expected StaleCommit, got {other:?}"),
        }
        assert_eq!(broker.read_committed("g1", &t).unwrap(), Some(Offset(5)));
        // committing the same offset again is fine
        broker.commit_offset("g1", &t, Offset(5)).unwrap();
        // beyond next_offset is rejected
        assert!(matches!(
            broker.commit_offset("g1", &t, Offset(11)),
            Err(BrokerError::OffsetOutOfRange { .. })
        ));
    }
    let broker = open(dir.path());
    assert_eq!(broker.read_committed("g1", &t).unwrap(), Some(Offset(5)));
    assert_eq!(broker.read_committed("g2", &t).unwrap(), None);
}

#[test]
fn recover_empty_dir_yields_no_topics() {
    let dir = tempfile::tempdir().unwrap();
    let broker = open(dir.path());
    assert!(broker.topic_summaries().is_empty());
}

#[test]
fn torn_trailing_frame_is_truncated() {
    let dir = tempfile::tempdir().unwrap();
    let t = topic("torn");
    {
        let broker = open(dir.path());
        broker.create_topic(&t).unwrap();
        for n in 0..100 {
            broker.append(&t, &record(n)).unwrap();
        }
    }
    // cut into the middle of the final frame
    let seg = dir.path().join("torn").join(format!("{:020}.seg", 0));
    let len = std::fs::metadata(&seg).unwrap().len();
    let file = std::fs::OpenOptions::new().write(true).open(&seg).unwrap();
    file.set_len(len - 7).unwrap();
    drop(file);

    let broker = open(dir.path());
    let got = broker.fetch(&t, Offset(0), usize::MAX).unwrap();
    assert_eq!(got.len(), 99);
    assert_eq!(broker.next_offset(&t).unwrap(), Offset(99));
    // appends continue from the truncated position
    broker.append(&t, &record(999)).unwrap();
    let got = broker.fetch(&t, Offset(99), 10).unwrap();
    assert_eq!(got[0].1, record(999));
}

#[test]
fn recovery_is_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let t = topic("twice");
    {
        let broker = open(dir.path());
        broker.create_topic(&t).unwrap();
        for n in 0..20 {
            broker.append(&t, &record(n)).unwrap();
        }
    }
    let seg = dir.path().join("twice").join(format!("{:020}.seg", 0));
    let len = std::fs::metadata(&seg).unwrap().len();
    std::fs::OpenOptions::new()
        .write(true)
        .open(&seg)
        .unwrap()
        .set_len(len - 3)
        .unwrap();

    let first = {
        let broker = open(dir.path());
        broker.fetch(&t, Offset(0), usize::MAX).unwrap()
    };
    let second = {
        let broker = open(dir.path());
        broker.fetch(&t, Offset(0), usize::MAX).unwrap()
    };
    assert_eq!(first, second);
    assert_eq!(first.len(), 19);
}

#[test]
fn corrupt_mid_log_quarantines_topic() {
    let dir = tempfile::tempdir().unwrap();
    let t = topic("corrupt");
    {
        let broker = open(dir.path());
        broker.create_topic(&t).unwrap();
        for n in 0..50 {
            broker.append(&t, &record(n)).unwrap();
        }
    }
    // scribble over a frame in the middle of the segment
    let seg = dir.path().join("corrupt").join(format!("{:020}.seg", 0));
    let mut bytes = std::fs::read(&seg).unwrap();
    let mid = bytes.len() / 2;
    for b in &mut bytes[mid..mid + 8] {
        *b = 0xFF;
    }
    std::fs::File::create(&seg)
        .unwrap()
        .write_all(&bytes)
        .unwrap();

    let broker = open(dir.path());
    let summary = &broker.topic_summaries()[0];
    assert!(summary.quarantined.is_some(), "topic should be quarantined");
    assert!(matches!(
        broker.fetch(&t, Offset(0), 10),
        Err(BrokerError::CorruptLog { .. })
    ));
    assert!(matches!(
        broker.append(&t, &record(0)),
        Err(BrokerError::CorruptLog { .. })
    ));
}

#[test]
fn concurrent_appends_stay_dense_and_fetches_agree() {
    let dir = tempfile::tempdir().unwrap();
    let broker = Arc::new(open(dir.path()));
    let t = topic("contended");
    broker.create_topic(&t).unwrap();

    let threads: Vec<_> = (0..4)
        .map(|w| {
            let broker = Arc::clone(&broker);
            let t = t.clone();
            std::thread::spawn(move || {
                let mut offsets = Vec::new();
                for n in 0..100 {
                    let r = record(w * 1000 + n);
                    offsets.push(broker.append(&t, &r).unwrap().0);
                }
                offsets
            })
        })
        .collect();
    let mut all: Vec<u64> = threads
        .into_iter()
        .flat_map(|h| h.join().unwrap())
        .collect();
    all.sort_unstable();
    assert_eq!(all, (0..400).collect::<Vec<u64>>());

    let a = broker.fetch(&t, Offset(100), 200).unwrap();
    let b = broker.fetch(&t, Offset(100), 200).unwrap();
    assert_eq!(a, b);
}
