//! Wire protocol for standalone mode: the broker and cache served over a
//! stream socket with the same operation contract as the embedded objects.
//!
//! Framing: every message is `u32 BE total length (including these 4 bytes)`
//! followed by the body. A request body is a 1-byte opcode then its fields;
//! a response body is a 1-byte status (0x00 = OK, else an error code) then
//! the result. Fields use the record-format length-prefix conventions: short
//! strings carry a 1-byte length, byte sequences a 4-byte big-endian length.

use std::io::{Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use parking_lot::Mutex;

use super::{Broker, BrokerApi, BrokerError};
use crate::cache::{CacheApi, CacheEntry, CacheError, StateCache};
use crate::record::{deserialize_record, serialize_record, Offset, StreamRecord, TopicName};

pub const OP_CREATE: u8 = 0x01;
pub const OP_APPEND: u8 = 0x02;
pub const OP_FETCH: u8 = 0x03;
pub const OP_COMMIT: u8 = 0x04;
pub const OP_READ_COMMITTED: u8 = 0x05;
pub const OP_CACHE_PUT: u8 = 0x10;
pub const OP_CACHE_GET: u8 = 0x11;
pub const OP_CACHE_GET_IF_NEWER: u8 = 0x12;

pub const STATUS_OK: u8 = 0x00;
pub const ERR_INVALID_NAME: u8 = 0x01;
pub const ERR_NOT_FOUND: u8 = 0x02;
pub const ERR_OUT_OF_RANGE: u8 = 0x03;
pub const ERR_STALE_COMMIT: u8 = 0x04;
pub const ERR_CORRUPT_LOG: u8 = 0x05;
pub const ERR_FRAME: u8 = 0x06;
pub const ERR_IO: u8 = 0x07;
pub const ERR_PROTOCOL: u8 = 0x08;
pub const ERR_CACHE_VALIDATION: u8 = 0x09;

/// Upper bound on one wire message; fetch responses are trimmed to fit.
const MAX_MESSAGE_LEN: usize = 64 * 1024 * 1024;
/// Byte budget for the records inside one fetch response.
const FETCH_BYTE_BUDGET: usize = 48 * 1024 * 1024;

fn broker_error_code(err: &BrokerError) -> u8 {
    match err {
        BrokerError::InvalidName(_) => ERR_INVALID_NAME,
        BrokerError::TopicNotFound(_) => ERR_NOT_FOUND,
        BrokerError::OffsetOutOfRange { .. } => ERR_OUT_OF_RANGE,
        BrokerError::StaleCommit { .. } => ERR_STALE_COMMIT,
        BrokerError::CorruptLog { .. } => ERR_CORRUPT_LOG,
        BrokerError::Frame(_) => ERR_FRAME,
        BrokerError::Io(_) => ERR_IO,
        BrokerError::Protocol(_) => ERR_PROTOCOL,
    }
}

fn cache_error_code(err: &CacheError) -> u8 {
    match err {
        CacheError::EmptyKey => ERR_CACHE_VALIDATION,
        CacheError::Remote { code, .. } => *code,
        CacheError::Io(_) => ERR_IO,
        CacheError::Protocol(_) => ERR_PROTOCOL,
    }
}

// ---------------------------------------------------------------------------
// message codec

struct MsgWriter {
    buf: Vec<u8>,
}

impl MsgWriter {
    fn new() -> Self {
        // length placeholder
        Self { buf: vec![0; 4] }
    }

    fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    fn i64(&mut self, v: i64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_be_bytes());
        self
    }

    fn str1(&mut self, s: &str) -> &mut Self {
        debug_assert!(s.len() <= u8::MAX as usize);
        self.buf.push(s.len() as u8);
        self.buf.extend_from_slice(s.as_bytes());
        self
    }

    fn bytes4(&mut self, b: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(&(b.len() as u32).to_be_bytes());
        self.buf.extend_from_slice(b);
        self
    }

    fn finish(mut self) -> Vec<u8> {
        let total = self.buf.len() as u32;
        self.buf[0..4].copy_from_slice(&total.to_be_bytes());
        self.buf
    }
}

struct MsgReader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> MsgReader<'a> {
    fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8], BrokerError> {
        if self.pos + n > self.buf.len() {
            return Err(BrokerError::Protocol(format!(
                "message truncated: wanted {n} bytes at {}",
                self.pos
            )));
        }
        let out = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8, BrokerError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, BrokerError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, BrokerError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn i64(&mut self) -> Result<i64, BrokerError> {
        Ok(i64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn str1(&mut self) -> Result<String, BrokerError> {
        let len = self.u8()? as usize;
        let bytes = self.take(len)?;
        String::from_utf8(bytes.to_vec())
            .map_err(|_| BrokerError::Protocol("string field is not UTF-8".into()))
    }

    fn bytes4(&mut self) -> Result<Vec<u8>, BrokerError> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }
}

fn write_message(stream: &mut TcpStream, message: &[u8]) -> std::io::Result<()> {
    stream.write_all(message)?;
    stream.flush()
}

fn read_message(stream: &mut TcpStream) -> std::io::Result<Option<Vec<u8>>> {
    let mut header = [0u8; 4];
    match stream.read_exact(&mut header) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let total = u32::from_be_bytes(header) as usize;
    if !(4..=MAX_MESSAGE_LEN).contains(&total) {
        return Err(std::io::Error::new(
            std::io::ErrorKind::InvalidData,
            format!("wire message length {total} out of bounds"),
        ));
    }
    let mut body = vec![0u8; total - 4];
    stream.read_exact(&mut body)?;
    Ok(Some(body))
}

// ---------------------------------------------------------------------------
// server

/// Serves broker and cache operations until stopped. Each connection gets a
/// handler thread; requests on one connection are processed in order.
pub struct WireServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept_thread: Option<std::thread::JoinHandle<()>>,
}

impl WireServer {
    pub fn start(
        bind: &str,
        broker: Arc<Broker>,
        cache: Arc<StateCache>,
    ) -> std::io::Result<Self> {
        let listener = TcpListener::bind(bind)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let accept_stop = Arc::clone(&stop);
        let accept_thread = std::thread::Builder::new()
            .name("edna-wire-accept".into())
            .spawn(move || {
                for conn in listener.incoming() {
                    if accept_stop.load(Ordering::SeqCst) {
                        break;
                    }
                    match conn {
                        Ok(stream) => {
                            let broker = Arc::clone(&broker);
                            let cache = Arc::clone(&cache);
                            let _ = std::thread::Builder::new()
                                .name("edna-wire-conn".into())
                                .spawn(move || {
                                    if let Err(e) = serve_connection(stream, &broker, &cache) {
                                        log::debug!("wire connection ended: {e}");
                                    }
                                });
                        }
                        Err(e) => log::warn!("wire accept failed: {e}"),
                    }
                }
            })?;
        Ok(Self {
            addr,
            stop,
            accept_thread: Some(accept_thread),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stop(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        // unblock the accept loop
        let _ = TcpStream::connect(self.addr);
        if let Some(t) = self.accept_thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for WireServer {
    fn drop(&mut self) {
        self.stop();
    }
}

fn serve_connection(
    mut stream: TcpStream,
    broker: &Broker,
    cache: &StateCache,
) -> std::io::Result<()> {
    stream.set_nodelay(true)?;
    while let Some(body) = read_message(&mut stream)? {
        let response = dispatch(&body, broker, cache);
        write_message(&mut stream, &response)?;
    }
    Ok(())
}

fn dispatch(body: &[u8], broker: &Broker, cache: &StateCache) -> Vec<u8> {
    match dispatch_inner(body, broker, cache) {
        Ok(response) => response,
        Err(Dispatch::Broker(e)) => error_response(broker_error_code(&e), &e.to_string()),
        Err(Dispatch::Cache(e)) => error_response(cache_error_code(&e), &e.to_string()),
    }
}

enum Dispatch {
    Broker(BrokerError),
    Cache(CacheError),
}

impl From<BrokerError> for Dispatch {
    fn from(e: BrokerError) -> Self {
        Dispatch::Broker(e)
    }
}

impl From<CacheError> for Dispatch {
    fn from(e: CacheError) -> Self {
        Dispatch::Cache(e)
    }
}

fn error_response(code: u8, message: &str) -> Vec<u8> {
    let mut w = MsgWriter::new();
    w.u8(code);
    let msg = message.as_bytes();
    let len = msg.len().min(u16::MAX as usize);
    w.buf.extend_from_slice(&(len as u16).to_be_bytes());
    w.buf.extend_from_slice(&msg[..len]);
    w.finish()
}

fn ok_response() -> MsgWriter {
    let mut w = MsgWriter::new();
    w.u8(STATUS_OK);
    w
}

fn dispatch_inner(body: &[u8], broker: &Broker, cache: &StateCache) -> Result<Vec<u8>, Dispatch> {
    let mut r = MsgReader::new(body);
    let opcode = r.u8()?;
    match opcode {
        OP_CREATE => {
            let topic = parse_topic(&mut r)?;
            broker.create_topic(&topic)?;
            Ok(ok_response().finish())
        }
        OP_APPEND => {
            let topic = parse_topic(&mut r)?;
            let frame = r.bytes4()?;
            let record = deserialize_record(&frame).map_err(BrokerError::Frame)?;
            let offset = broker.append(&topic, &record)?;
            let mut w = ok_response();
            w.u64(offset.0);
            Ok(w.finish())
        }
        OP_FETCH => {
            let topic = parse_topic(&mut r)?;
            let from = r.u64()?;
            let max = r.u32()? as usize;
            let records = broker.fetch(&topic, Offset(from), max)?;
            let mut w = ok_response();
            let count_pos = w.buf.len();
            w.u32(0);
            let mut count = 0u32;
            let mut budget = FETCH_BYTE_BUDGET;
            for (offset, record) in records {
                let frame = serialize_record(&record).map_err(BrokerError::Frame)?;
                if frame.len() > budget && count > 0 {
                    break;
                }
                budget = budget.saturating_sub(frame.len());
                w.u64(offset.0);
                w.bytes4(&frame);
                count += 1;
            }
            w.buf[count_pos..count_pos + 4].copy_from_slice(&count.to_be_bytes());
            Ok(w.finish())
        }
        OP_COMMIT => {
            let group = r.str1()?;
            let topic = parse_topic(&mut r)?;
            let next = r.u64()?;
            broker.commit_offset(&group, &topic, Offset(next))?;
            Ok(ok_response().finish())
        }
        OP_READ_COMMITTED => {
            let group = r.str1()?;
            let topic = parse_topic(&mut r)?;
            let committed = broker.read_committed(&group, &topic)?;
            let mut w = ok_response();
            match committed {
                Some(offset) => {
                    w.u8(1);
                    w.u64(offset.0);
                }
                None => {
                    w.u8(0);
                }
            }
            Ok(w.finish())
        }
        OP_CACHE_PUT => {
            let key = r.str1()?;
            let value = r.bytes4()?;
            let version = cache.put(&key, value)?;
            let mut w = ok_response();
            w.u64(version);
            Ok(w.finish())
        }
        OP_CACHE_GET => {
            let key = r.str1()?;
            let entry = cache.get(&key)?;
            Ok(encode_cache_entry(entry))
        }
        OP_CACHE_GET_IF_NEWER => {
            let key = r.str1()?;
            let than = r.u64()?;
            let entry = cache.get_if_newer(&key, than)?;
            Ok(encode_cache_entry(entry))
        }
        other => Err(BrokerError::Protocol(format!("unknown opcode {other:#04x}")).into()),
    }
}

fn parse_topic(r: &mut MsgReader<'_>) -> Result<TopicName, BrokerError> {
    let name = r.str1()?;
    TopicName::new(name).map_err(|e| BrokerError::InvalidName(e.to_string()))
}

fn encode_cache_entry(entry: Option<CacheEntry>) -> Vec<u8> {
    let mut w = ok_response();
    match entry {
        Some(e) => {
            w.u8(1);
            w.u64(e.version);
            w.i64(e.updated_at_ms);
            w.bytes4(&e.value);
        }
        None => {
            w.u8(0);
        }
    }
    w.finish()
}

// ---------------------------------------------------------------------------
// clients

struct Connection {
    addr: String,
    stream: Option<TcpStream>,
}

impl Connection {
    fn new(addr: String) -> Self {
        Self { addr, stream: None }
    }

    fn call(&mut self, request: Vec<u8>) -> std::io::Result<Vec<u8>> {
        if self.stream.is_none() {
            let stream = TcpStream::connect(&self.addr)?;
            stream.set_nodelay(true)?;
            self.stream = Some(stream);
        }
        let stream = self.stream.as_mut().unwrap();
        let result = (|| {
            write_message(stream, &request)?;
            read_message(stream)?.ok_or_else(|| {
                std::io::Error::new(std::io::ErrorKind::UnexpectedEof, "server closed connection")
            })
        })();
        if result.is_err() {
            // force a reconnect on the next call
            self.stream = None;
        }
        result
    }
}

fn check_status(body: &[u8]) -> Result<MsgReader<'_>, (u8, String)> {
    let mut r = MsgReader::new(body);
    let status = r.u8().map_err(|e| (ERR_PROTOCOL, e.to_string()))?;
    if status == STATUS_OK {
        return Ok(r);
    }
    let msg = (|| -> Result<String, BrokerError> {
        let len = u16::from_be_bytes(r.take(2)?.try_into().unwrap()) as usize;
        Ok(String::from_utf8_lossy(r.take(len)?).into_owned())
    })()
    .unwrap_or_else(|_| "malformed error response".to_string());
    Err((status, msg))
}

fn remote_broker_error(code: u8, message: String) -> BrokerError {
    match code {
        ERR_NOT_FOUND => BrokerError::TopicNotFound(message),
        ERR_INVALID_NAME => BrokerError::InvalidName(message),
        _ => BrokerError::Protocol(format!("remote error (code {code:#04x}): {message}")),
    }
}

/// Broker client speaking the wire protocol; implements the same trait as
/// the embedded broker so jobs cannot tell the difference.
pub struct WireBrokerClient {
    conn: Mutex<Connection>,
}

impl WireBrokerClient {
    pub fn connect(addr: impl Into<String>) -> Self {
        Self {
            conn: Mutex::new(Connection::new(addr.into())),
        }
    }

    fn call(&self, request: Vec<u8>) -> Result<Vec<u8>, BrokerError> {
        Ok(self.conn.lock().call(request)?)
    }
}

impl BrokerApi for WireBrokerClient {
    fn create_topic(&self, name: &TopicName) -> Result<(), BrokerError> {
        let mut w = MsgWriter::new();
        w.u8(OP_CREATE).str1(name.as_str());
        let body = self.call(w.finish())?;
        check_status(&body).map_err(|(c, m)| remote_broker_error(c, m))?;
        Ok(())
    }

    fn append(&self, topic: &TopicName, record: &StreamRecord) -> Result<Offset, BrokerError> {
        let frame = serialize_record(record)?;
        let mut w = MsgWriter::new();
        w.u8(OP_APPEND).str1(topic.as_str()).bytes4(&frame);
        let body = self.call(w.finish())?;
        let mut r = check_status(&body).map_err(|(c, m)| remote_broker_error(c, m))?;
        Ok(Offset(r.u64()?))
    }

    fn fetch(
        &self,
        topic: &TopicName,
        from: Offset,
        max_records: usize,
    ) -> Result<Vec<(Offset, StreamRecord)>, BrokerError> {
        let mut w = MsgWriter::new();
        w.u8(OP_FETCH)
            .str1(topic.as_str())
            .u64(from.0)
            .u32(max_records.min(u32::MAX as usize) as u32);
        let body = self.call(w.finish())?;
        let mut r = check_status(&body).map_err(|(c, m)| remote_broker_error(c, m))?;
        let count = r.u32()?;
        let mut out = Vec::with_capacity(count as usize);
        for _ in 0..count {
            let offset = r.u64()?;
            let frame = r.bytes4()?;
            out.push((Offset(offset), deserialize_record(&frame)?));
        }
        Ok(out)
    }

    fn commit_offset(&self, group: &str, topic: &TopicName, next: Offset) -> Result<(), BrokerError> {
        let mut w = MsgWriter::new();
        w.u8(OP_COMMIT).str1(group).str1(topic.as_str()).u64(next.0);
        let body = self.call(w.finish())?;
        check_status(&body).map_err(|(c, m)| remote_broker_error(c, m))?;
        Ok(())
    }

    fn read_committed(&self, group: &str, topic: &TopicName) -> Result<Option<Offset>, BrokerError> {
        let mut w = MsgWriter::new();
        w.u8(OP_READ_COMMITTED).str1(group).str1(topic.as_str());
        let body = self.call(w.finish())?;
        let mut r = check_status(&body).map_err(|(c, m)| remote_broker_error(c, m))?;
        Ok(match r.u8()? {
            0 => None,
            _ => Some(Offset(r.u64()?)),
        })
    }
}

/// Cache client speaking the wire protocol.
pub struct WireCacheClient {
    conn: Mutex<Connection>,
}

impl WireCacheClient {
    pub fn connect(addr: impl Into<String>) -> Self {
        Self {
            conn: Mutex::new(Connection::new(addr.into())),
        }
    }

    fn call(&self, request: Vec<u8>) -> Result<Vec<u8>, CacheError> {
        Ok(self.conn.lock().call(request)?)
    }

    fn decode_entry(key: &str, body: &[u8]) -> Result<Option<CacheEntry>, CacheError> {
        let mut r = check_status(body).map_err(|(code, message)| CacheError::Remote { code, message })?;
        let map_err = |e: BrokerError| CacheError::Protocol(e.to_string());
        match r.u8().map_err(map_err)? {
            0 => Ok(None),
            _ => {
                let version = r.u64().map_err(map_err)?;
                let updated_at_ms = r.i64().map_err(map_err)?;
                let value = r.bytes4().map_err(map_err)?;
                Ok(Some(CacheEntry {
                    key: key.to_string(),
                    value,
                    version,
                    updated_at_ms,
                }))
            }
        }
    }
}

impl CacheApi for WireCacheClient {
    fn put(&self, key: &str, value: Vec<u8>) -> Result<u64, CacheError> {
        let mut w = MsgWriter::new();
        w.u8(OP_CACHE_PUT).str1(key).bytes4(&value);
        let body = self.call(w.finish())?;
        let mut r =
            check_status(&body).map_err(|(code, message)| CacheError::Remote { code, message })?;
        r.u64().map_err(|e| CacheError::Protocol(e.to_string()))
    }

    fn get(&self, key: &str) -> Result<Option<CacheEntry>, CacheError> {
        let mut w = MsgWriter::new();
        w.u8(OP_CACHE_GET).str1(key);
        let body = self.call(w.finish())?;
        Self::decode_entry(key, &body)
    }

    fn get_if_newer(&self, key: &str, than: u64) -> Result<Option<CacheEntry>, CacheError> {
        let mut w = MsgWriter::new();
        w.u8(OP_CACHE_GET_IF_NEWER).str1(key).u64(than);
        let body = self.call(w.finish())?;
        Self::decode_entry(key, &body)
    }
}
