//! The standalone wire protocol exposes the same contract as the embedded
//! objects: these tests drive broker and cache through TCP clients.

use edna_core::broker::wire::{WireBrokerClient, WireCacheClient, WireServer};
use edna_core::broker::{Broker, BrokerApi, BrokerConfig, BrokerError};
use edna_core::cache::{CacheApi, StateCache};
use edna_core::record::{Offset, StreamRecord, TopicName};
use std::sync::Arc;

struct Fixture {
    _dir: tempfile::TempDir,
    server: WireServer,
}

impl Fixture {
    fn start() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let broker = Arc::new(Broker::open(BrokerConfig::new(dir.path())).unwrap());
        let cache = Arc::new(StateCache::new());
        let server = WireServer::start("127.0.0.1:0", broker, cache).unwrap();
        Self { _dir: dir, server }
    }

    fn broker(&self) -> WireBrokerClient {
        WireBrokerClient::connect(self.server.addr().to_string())
    }

    fn cache(&self) -> WireCacheClient {
        WireCacheClient::connect(self.server.addr().to_string())
    }
}

fn record(n: u64) -> StreamRecord {
    StreamRecord::new(format!("wire-{n}").into_bytes(), n as i64, "w", "raw")
}

#[test]
fn broker_round_trip_over_the_wire() {
    let fx = Fixture::start();
    let client = fx.broker();
    let t = TopicName::new("wired").unwrap();

    client.create_topic(&t).unwrap();
    client.create_topic(&t).unwrap(); // idempotent
    for n in 0..20 {
        assert_eq!(client.append(&t, &record(n)).unwrap(), Offset(n));
    }
    let got = client.fetch(&t, Offset(5), 3).unwrap();
    assert_eq!(
        got.iter().map(|(o, _)| o.0).collect::<Vec<_>>(),
        vec![5, 6, 7]
    );
    assert_eq!(got[1].1, record(6));
    assert!(client.fetch(&t, Offset(20), 10).unwrap().is_empty());

    client.commit_offset("g", &t, Offset(9)).unwrap();
    assert_eq!(client.read_committed("g", &t).unwrap(), Some(Offset(9)));
    assert_eq!(client.read_committed("other", &t).unwrap(), None);
}

#[test]
fn wire_errors_carry_their_kind() {
    let fx = Fixture::start();
    let client = fx.broker();
    let t = TopicName::new("missing").unwrap();

    assert!(matches!(
        client.append(&t, &record(0)),
        Err(BrokerError::TopicNotFound(_))
    ));
    client.create_topic(&t).unwrap();
    assert!(matches!(
        client.fetch(&t, Offset(5), 1),
        Err(BrokerError::Protocol(_)) | Err(BrokerError::OffsetOutOfRange { .. })
    ));
    client.commit_offset("g", &t, Offset(0)).unwrap();
}

#[test]
fn cache_over_the_wire() {
    let fx = Fixture::start();
    let client = fx.cache();

    assert_eq!(client.put("kw", b"one".to_vec()).unwrap(), 1);
    assert_eq!(client.put("kw", b"two".to_vec()).unwrap(), 2);
    let entry = client.get("kw").unwrap().unwrap();
    assert_eq!(entry.value, b"two");
    assert_eq!(entry.version, 2);

    assert!(client.get("absent").unwrap().is_none());
    assert!(client.get_if_newer("kw", 2).unwrap().is_none());
    assert_eq!(client.get_if_newer("kw", 1).unwrap().unwrap().version, 2);
    assert!(client.get_if_newer("absent", 0).unwrap().is_none());

    let err = client.put("", b"x".to_vec()).unwrap_err();
    assert!(err.to_string().contains("non-empty"), "got: {err}");
}

#[test]
fn clients_share_one_server_concurrently() {
    let fx = Fixture::start();
    let t = TopicName::new("shared").unwrap();
    fx.broker().create_topic(&t).unwrap();

    let addr = fx.server.addr().to_string();
    let threads: Vec<_> = (0..4)
        .map(|w| {
            let addr = addr.clone();
            let t = t.clone();
            std::thread::spawn(move || {
                let client = WireBrokerClient::connect(addr);
                for n in 0..50 {
                    client.append(&t, &record(w * 100 + n)).unwrap();
                }
            })
        })
        .collect();
    for th in threads {
        th.join().unwrap();
    }
    let got = fx.broker().fetch(&t, Offset(0), usize::MAX).unwrap();
    assert_eq!(got.len(), 200);
    let offsets: Vec<u64> = got.iter().map(|(o, _)| o.0).collect();
    assert_eq!(offsets, (0..200).collect::<Vec<u64>>());
}
