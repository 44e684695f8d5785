//! EDNA: a stream-processing toolkit built around the ingest-process-emit
//! loop, with a durable replayable topic log, a shared versioned cache, a
//! supervised DAG application layer, and a reference social-stream pipeline.

pub mod broker;
pub mod cache;
pub mod record;

pub use broker::{Broker, BrokerApi, BrokerConfig, BrokerError, FlushPolicy};
pub use cache::{CacheApi, CacheEntry, CacheError, StateCache};
pub use record::{deserialize_record, serialize_record, Offset, StreamRecord, TopicName};
