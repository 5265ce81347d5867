//! Framing: `u32` frame count, then each frame as `u32` length + bytes, all
//! little-endian. Frame 0 is the MessagePack header, the remaining frames are
//! the raw blobs referenced from the header by placeholders.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Read, Write};
use std::str::FromStr;

use rmpv::Value as Mp;
use thiserror::Error;

use super::value::{BlobPlaceholder, Value, BLOB_KEY};

/// Upper bound on frames per message accepted from the wire.
pub const MAX_FRAMES: u32 = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OpKind {
    RegisterWorker,
    RegisterClient,
    SubmitGraph,
    AssignTask,
    TaskFinished,
    TaskErred,
    StealRequest,
    StealResponse,
    FetchData,
    DataReply,
    DataPlaced,
    ReleaseData,
    FetchResult,
    ResultReply,
    Heartbeat,
    Shutdown,
}

impl OpKind {
    pub const ALL: [OpKind; 16] = [
        OpKind::RegisterWorker,
        OpKind::RegisterClient,
        OpKind::SubmitGraph,
        OpKind::AssignTask,
        OpKind::TaskFinished,
        OpKind::TaskErred,
        OpKind::StealRequest,
        OpKind::StealResponse,
        OpKind::FetchData,
        OpKind::DataReply,
        OpKind::DataPlaced,
        OpKind::ReleaseData,
        OpKind::FetchResult,
        OpKind::ResultReply,
        OpKind::Heartbeat,
        OpKind::Shutdown,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            OpKind::RegisterWorker => "REGISTER_WORKER",
            OpKind::RegisterClient => "REGISTER_CLIENT",
            OpKind::SubmitGraph => "SUBMIT_GRAPH",
            OpKind::AssignTask => "ASSIGN_TASK",
            OpKind::TaskFinished => "TASK_FINISHED",
            OpKind::TaskErred => "TASK_ERRED",
            OpKind::StealRequest => "STEAL_REQUEST",
            OpKind::StealResponse => "STEAL_RESPONSE",
            OpKind::FetchData => "FETCH_DATA",
            OpKind::DataReply => "DATA_REPLY",
            OpKind::DataPlaced => "DATA_PLACED",
            OpKind::ReleaseData => "RELEASE_DATA",
            OpKind::FetchResult => "FETCH_RESULT",
            OpKind::ResultReply => "RESULT_REPLY",
            OpKind::Heartbeat => "HEARTBEAT",
            OpKind::Shutdown => "SHUTDOWN",
        }
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OpKind {
    type Err = ProtocolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        OpKind::ALL
            .into_iter()
            .find(|op| op.as_str() == s)
            .ok_or_else(|| ProtocolError::UnknownOp(s.to_owned()))
    }
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("placeholder {index} out of range for {blobs} blobs")]
    PlaceholderOutOfRange { index: u32, blobs: usize },
    #[error("blob {0} is not referenced exactly once")]
    BlobReferenceCount(u32),
    #[error("header has no `op` string")]
    MissingOp,
    #[error("header map uses the reserved key `{BLOB_KEY}`")]
    ReservedKey,
    #[error("message ends inside a frame")]
    TruncatedFrame,
    #[error("malformed header: {0}")]
    MalformedHeader(String),
    #[error("unknown op `{0}`")]
    UnknownOp(String),
    #[error("unexpected {op} message: {reason}")]
    UnexpectedMessage { op: String, reason: String },
    #[error("connection lost")]
    ConnectionLost,
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl ProtocolError {
    pub fn malformed(message: impl Into<String>) -> Self {
        ProtocolError::MalformedHeader(message.into())
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Message {
    pub header: BTreeMap<String, Value>,
    pub blobs: Vec<Vec<u8>>,
}

impl Message {
    pub fn new(op: OpKind) -> Self {
        let mut header = BTreeMap::new();
        header.insert("op".to_owned(), Value::from(op.as_str()));
        Message { header, blobs: Vec::new() }
    }

    pub fn with(mut self, key: &str, value: impl Into<Value>) -> Self {
        self.header.insert(key.to_owned(), value.into());
        self
    }

    /// Appends `data` as a blob and stores its placeholder under `key`.
    pub fn with_blob(mut self, key: &str, data: Vec<u8>) -> Self {
        let index = self.blobs.len() as u32;
        self.blobs.push(data);
        self.header.insert(key.to_owned(), Value::Blob(BlobPlaceholder { index }));
        self
    }

    pub fn op(&self) -> Result<OpKind, ProtocolError> {
        self.header
            .get("op")
            .and_then(Value::as_str)
            .ok_or(ProtocolError::MissingOp)?
            .parse()
    }

    pub fn get(&self, key: &str) -> Option<&Value> {
        self.header.get(key)
    }

    /// Resolves the placeholder stored under `key` to its blob.
    pub fn blob(&self, key: &str) -> Option<&[u8]> {
        let placeholder = self.get(key)?.as_blob()?;
        self.blobs.get(placeholder.index as usize).map(Vec::as_slice)
    }

    pub fn take_blob(&mut self, key: &str) -> Option<Vec<u8>> {
        let placeholder = self.get(key)?.as_blob()?;
        self.blobs.get_mut(placeholder.index as usize).map(std::mem::take)
    }

    fn check_invariants(&self) -> Result<(), ProtocolError> {
        match self.header.get("op") {
            Some(Value::Str(_)) => {}
            _ => return Err(ProtocolError::MissingOp),
        }
        let mut refs = vec![0u32; self.blobs.len()];
        let mut out_of_range = None;
        for value in self.header.values() {
            value.visit_blobs(&mut |b| match refs.get_mut(b.index as usize) {
                Some(count) => *count += 1,
                None => out_of_range = Some(b.index),
            });
        }
        if let Some(index) = out_of_range {
            return Err(ProtocolError::PlaceholderOutOfRange { index, blobs: self.blobs.len() });
        }
        if let Some(i) = refs.iter().position(|&c| c != 1) {
            return Err(ProtocolError::BlobReferenceCount(i as u32));
        }
        Ok(())
    }
}

fn to_mp(value: &Value) -> Result<Mp, ProtocolError> {
    Ok(match value {
        Value::Nil => Mp::Nil,
        Value::Bool(b) => Mp::Boolean(*b),
        Value::Int(i) => Mp::from(*i),
        Value::UInt(u) => Mp::from(*u),
        Value::Float(f) => Mp::F64(*f),
        Value::Str(s) => Mp::from(s.as_str()),
        Value::Bin(b) => Mp::Binary(b.clone()),
        Value::Array(items) => Mp::Array(items.iter().map(to_mp).collect::<Result<_, _>>()?),
        Value::Map(m) => map_to_mp(m)?,
        Value::Blob(b) => Mp::Map(vec![(Mp::from(BLOB_KEY), Mp::from(b.index))]),
    })
}

/// Keys come out of the `BTreeMap` sorted, which makes the encoding canonical.
fn map_to_mp(map: &BTreeMap<String, Value>) -> Result<Mp, ProtocolError> {
    let mut entries = Vec::with_capacity(map.len());
    for (k, v) in map {
        if k == BLOB_KEY {
            return Err(ProtocolError::ReservedKey);
        }
        entries.push((Mp::from(k.as_str()), to_mp(v)?));
    }
    Ok(Mp::Map(entries))
}

fn from_mp(value: Mp) -> Result<Value, ProtocolError> {
    Ok(match value {
        Mp::Nil => Value::Nil,
        Mp::Boolean(b) => Value::Bool(b),
        Mp::Integer(i) => match i.as_u64() {
            Some(u) => Value::UInt(u),
            None => Value::Int(i.as_i64().ok_or_else(|| ProtocolError::malformed("integer"))?),
        },
        Mp::F32(f) => Value::Float(f as f64),
        Mp::F64(f) => Value::Float(f),
        Mp::String(s) => Value::Str(
            s.into_str().ok_or_else(|| ProtocolError::malformed("invalid utf-8 string"))?,
        ),
        Mp::Binary(b) => Value::Bin(b),
        Mp::Array(items) => Value::Array(items.into_iter().map(from_mp).collect::<Result<_, _>>()?),
        Mp::Map(entries) => {
            if let [(Mp::String(k), Mp::Integer(i))] = entries.as_slice() {
                if k.as_str() == Some(BLOB_KEY) {
                    let index = i
                        .as_u64()
                        .and_then(|v| u32::try_from(v).ok())
                        .ok_or_else(|| ProtocolError::malformed("bad placeholder index"))?;
                    return Ok(Value::Blob(BlobPlaceholder { index }));
                }
            }
            Value::Map(map_from_mp(entries)?)
        }
        Mp::Ext(..) => return Err(ProtocolError::malformed("extension types are not supported")),
    })
}

fn map_from_mp(entries: Vec<(Mp, Mp)>) -> Result<BTreeMap<String, Value>, ProtocolError> {
    let mut map = BTreeMap::new();
    for (k, v) in entries {
        let key = match k {
            Mp::String(s) => s.into_str().ok_or_else(|| ProtocolError::malformed("key utf-8"))?,
            _ => return Err(ProtocolError::malformed("non-string map key")),
        };
        if key == BLOB_KEY {
            return Err(ProtocolError::malformed("malformed placeholder"));
        }
        map.insert(key, from_mp(v)?);
    }
    Ok(map)
}

pub fn encode_header(header: &BTreeMap<String, Value>) -> Result<Vec<u8>, ProtocolError> {
    let mut out = Vec::new();
    rmpv::encode::write_value(&mut out, &map_to_mp(header)?)
        .map_err(|e| ProtocolError::malformed(e.to_string()))?;
    Ok(out)
}

pub fn decode_header(bytes: &[u8]) -> Result<BTreeMap<String, Value>, ProtocolError> {
    let mut cursor = bytes;
    let value = rmpv::decode::read_value(&mut cursor)
        .map_err(|e| ProtocolError::malformed(e.to_string()))?;
    if !cursor.is_empty() {
        return Err(ProtocolError::malformed("trailing bytes after header"));
    }
    match value {
        Mp::Map(entries) => map_from_mp(entries),
        _ => Err(ProtocolError::malformed("header is not a map")),
    }
}

/// Number of bytes `encode` produces for a message with these frame sizes.
pub fn framed_len(frame_lens: impl IntoIterator<Item = usize>) -> usize {
    4 + frame_lens.into_iter().map(|l| 4 + l).sum::<usize>()
}

pub fn encode(message: &Message) -> Result<Vec<u8>, ProtocolError> {
    message.check_invariants()?;
    let header = encode_header(&message.header)?;
    let mut out = Vec::with_capacity(framed_len(
        std::iter::once(header.len()).chain(message.blobs.iter().map(Vec::len)),
    ));
    out.extend_from_slice(&(1 + message.blobs.len() as u32).to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for blob in &message.blobs {
        out.extend_from_slice(&(blob.len() as u32).to_le_bytes());
        out.extend_from_slice(blob);
    }
    Ok(out)
}

fn frames_to_message(mut frames: Vec<Vec<u8>>) -> Result<Message, ProtocolError> {
    if frames.is_empty() {
        return Err(ProtocolError::malformed("message without header frame"));
    }
    let blobs = frames.split_off(1);
    let header = decode_header(&frames[0])?;
    let message = Message { header, blobs };
    match message.check_invariants() {
        Err(ProtocolError::MissingOp) => return Err(ProtocolError::MissingOp),
        Err(e) => return Err(ProtocolError::malformed(e.to_string())),
        Ok(()) => {}
    }
    message.op()?;
    Ok(message)
}

pub fn decode(bytes: &[u8]) -> Result<Message, ProtocolError> {
    fn take<'a>(input: &mut &'a [u8], n: usize) -> Result<&'a [u8], ProtocolError> {
        if input.len() < n {
            return Err(ProtocolError::TruncatedFrame);
        }
        let (head, rest) = input.split_at(n);
        *input = rest;
        Ok(head)
    }
    let mut input = bytes;
    let count = u32::from_le_bytes(take(&mut input, 4)?.try_into().unwrap());
    if count == 0 || count > MAX_FRAMES {
        return Err(ProtocolError::malformed(format!("bad frame count {count}")));
    }
    let mut frames = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u32::from_le_bytes(take(&mut input, 4)?.try_into().unwrap()) as usize;
        frames.push(take(&mut input, len)?.to_vec());
    }
    if !input.is_empty() {
        return Err(ProtocolError::malformed("trailing bytes after last frame"));
    }
    frames_to_message(frames)
}

/// Fills `buf` completely. Returns `false` on a clean end of stream before
/// the first byte.
fn read_full(stream: &mut impl Read, buf: &mut [u8]) -> Result<bool, ProtocolError> {
    let mut filled = 0;
    while filled < buf.len() {
        match stream.read(&mut buf[filled..]) {
            Ok(0) if filled == 0 => return Ok(false),
            Ok(0) => return Err(ProtocolError::TruncatedFrame),
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) if is_disconnect(&e) => return Err(ProtocolError::ConnectionLost),
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

fn is_disconnect(e: &io::Error) -> bool {
    matches!(
        e.kind(),
        io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::BrokenPipe
            | io::ErrorKind::UnexpectedEof
    )
}

/// Reads exactly one framed message. A clean end of stream at a message
/// boundary is reported as `ConnectionLost`.
pub fn read_message(stream: &mut impl Read) -> Result<Message, ProtocolError> {
    let mut word = [0u8; 4];
    if !read_full(stream, &mut word)? {
        return Err(ProtocolError::ConnectionLost);
    }
    let count = u32::from_le_bytes(word);
    if count == 0 || count > MAX_FRAMES {
        return Err(ProtocolError::malformed(format!("bad frame count {count}")));
    }
    let mut frames = Vec::with_capacity(count.min(64) as usize);
    for _ in 0..count {
        if !read_full(stream, &mut word)? {
            return Err(ProtocolError::TruncatedFrame);
        }
        let len = u32::from_le_bytes(word) as u64;
        let mut frame = Vec::new();
        let got = stream.by_ref().take(len).read_to_end(&mut frame)?;
        if (got as u64) < len {
            return Err(ProtocolError::TruncatedFrame);
        }
        frames.push(frame);
    }
    frames_to_message(frames)
}

/// Writes one message with a single `write_all`, so a reader never observes
/// interleaved frames as long as each stream has one writer.
pub fn write_message(stream: &mut impl Write, message: &Message) -> Result<(), ProtocolError> {
    let bytes = encode(message)?;
    stream.write_all(&bytes).map_err(|e| {
        if is_disconnect(&e) {
            ProtocolError::ConnectionLost
        } else {
            ProtocolError::Io(e)
        }
    })
}
