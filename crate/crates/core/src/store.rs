//! Append-only event log and the in-memory state folded from it.
//!
//! File layout: the 8-byte magic `MAMALOG\0`, a little-endian `u16` format
//! version, then records. Each record is a little-endian `u32` payload
//! length, the CRC-32 of the payload, and the payload itself: a JSON object
//! `{"seq": n, "event": {...}}` with `seq` counting up from 1.

use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::escalation::EscalationAction;
use crate::scheduler::TimingConfig;
use crate::world::{Applied, Event, World, WorldError};

pub const MAGIC: &[u8; 8] = b"MAMALOG\0";
pub const FORMAT_VERSION: u16 = 1;
pub const HEADER_LEN: usize = MAGIC.len() + 2;

#[derive(Debug, thiserror::Error)]
pub enum LogError {
    #[error("not an event log (bad magic)")]
    BadMagic,
    #[error("unsupported log format version {0}")]
    UnsupportedVersion(u16),
    #[error("log corrupt after offset {offset}: {reason}")]
    Corrupt { offset: u64, reason: String },
}

#[derive(Debug, thiserror::Error)]
pub enum StoreError {
    #[error("io: {0}")]
    Io(#[from] io::Error),
    #[error(transparent)]
    Log(#[from] LogError),
    #[error("replaying record {seq}: {source}")]
    Replay { seq: u64, source: WorldError },
    #[error(transparent)]
    World(#[from] WorldError),
    #[error("an earlier log write failed; reopen the store")]
    Poisoned,
}

#[derive(Serialize)]
struct RecordOut<'a> {
    seq: u64,
    event: &'a Event,
}

#[derive(Deserialize)]
struct RecordIn {
    seq: u64,
    event: Event,
}

pub fn header() -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out
}

/// Encodes one framed record.
pub fn encode_record(seq: u64, event: &Event) -> Vec<u8> {
    let payload = serde_json::to_vec(&RecordOut { seq, event }).expect("events serialize");
    let mut out = Vec::with_capacity(payload.len() + 8);
    out.extend_from_slice(&(payload.len() as u32).to_le_bytes());
    out.extend_from_slice(&crc32fast::hash(&payload).to_le_bytes());
    out.extend_from_slice(&payload);
    out
}

/// Decodes a whole log. On a damaged or truncated record the error carries
/// the offset just past the last intact record.
pub fn read_log(bytes: &[u8]) -> Result<Vec<(u64, Event)>, LogError> {
    if bytes.len() < HEADER_LEN || &bytes[..MAGIC.len()] != MAGIC {
        return Err(LogError::BadMagic);
    }
    let version = u16::from_le_bytes([bytes[8], bytes[9]]);
    if version != FORMAT_VERSION {
        return Err(LogError::UnsupportedVersion(version));
    }
    let mut out = Vec::new();
    let mut pos = HEADER_LEN;
    while pos < bytes.len() {
        let corrupt = |reason: &str| LogError::Corrupt { offset: pos as u64, reason: reason.to_owned() };
        let Some(frame) = bytes.get(pos..pos + 8) else {
            return Err(corrupt("truncated record header"));
        };
        let len = u32::from_le_bytes(frame[..4].try_into().unwrap()) as usize;
        let crc = u32::from_le_bytes(frame[4..].try_into().unwrap());
        let Some(payload) = bytes.get(pos + 8..pos + 8 + len) else {
            return Err(corrupt("truncated record payload"));
        };
        if crc32fast::hash(payload) != crc {
            return Err(corrupt("checksum mismatch"));
        }
        let record: RecordIn = serde_json::from_slice(payload).map_err(|e| corrupt(&e.to_string()))?;
        let expected = out.len() as u64 + 1;
        if record.seq != expected {
            return Err(corrupt(&format!("sequence {} where {expected} was expected", record.seq)));
        }
        out.push((record.seq, record.event));
        pos += 8 + len;
    }
    Ok(out)
}

/// A consistent read view: the state after the first `seq` events.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub seq: u64,
    pub world: Arc<World>,
}

#[derive(Debug)]
enum Sink {
    File { file: File, path: PathBuf },
    Memory(Vec<u8>),
}

/// Single-writer event store. Readers take [`Snapshot`]s, which stay valid
/// while later events are appended.
#[derive(Debug)]
pub struct Store {
    sink: Sink,
    seq: u64,
    world: Arc<World>,
    /// Send actions produced by the log tail whose dispatch was never
    /// recorded (a crash between the two appends).
    undispatched: Vec<EscalationAction>,
    poisoned: bool,
}

impl Store {
    /// A store that lives only in memory, starting with `timing`.
    pub fn in_memory(timing: TimingConfig) -> Self {
        let mut store = Self {
            sink: Sink::Memory(header()),
            seq: 0,
            world: Arc::new(World::new(timing)),
            undispatched: Vec::new(),
            poisoned: false,
        };
        store.append(Event::Configured { timing }).expect("configuring a fresh store");
        store
    }

    /// Rebuilds a memory store from log bytes.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self, StoreError> {
        let mut store = Self {
            sink: Sink::Memory(bytes.to_vec()),
            seq: 0,
            world: Arc::new(World::default()),
            undispatched: Vec::new(),
            poisoned: false,
        };
        store.replay(read_log(bytes)?)?;
        Ok(store)
    }

    /// Opens the log at `path`, creating it when missing. A new log starts
    /// with `timing`; an existing one keeps its recorded timing unless it
    /// differs, in which case the change is appended.
    pub fn open(path: impl AsRef<Path>, timing: TimingConfig) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let fresh = bytes.is_empty();
        if fresh {
            file.write_all(&header())?;
            file.sync_data()?;
        }
        let mut store = Self {
            sink: Sink::File { file, path },
            seq: 0,
            world: Arc::new(World::default()),
            undispatched: Vec::new(),
            poisoned: false,
        };
        if !fresh {
            store.replay(read_log(&bytes)?)?;
        }
        if fresh || *store.world.timing() != timing {
            store.append(Event::Configured { timing })?;
        }
        Ok(store)
    }

    fn replay(&mut self, records: Vec<(u64, Event)>) -> Result<(), StoreError> {
        let world = Arc::make_mut(&mut self.world);
        for (seq, event) in records {
            let applied = world.apply(&event).map_err(|source| StoreError::Replay { seq, source })?;
            track_undispatched(&mut self.undispatched, &event, applied.actions);
            self.seq = seq;
        }
        Ok(())
    }

    pub fn seq(&self) -> u64 {
        self.seq
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot { seq: self.seq, world: Arc::clone(&self.world) }
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.sink {
            Sink::File { path, .. } => Some(path),
            Sink::Memory(_) => None,
        }
    }

    /// The full log as bytes.
    pub fn log_bytes(&self) -> io::Result<Vec<u8>> {
        match &self.sink {
            Sink::File { path, .. } => std::fs::read(path),
            Sink::Memory(bytes) => Ok(bytes.clone()),
        }
    }

    /// Send actions left undispatched by the log tail; taking them clears
    /// the list.
    pub fn take_undispatched(&mut self) -> Vec<EscalationAction> {
        std::mem::take(&mut self.undispatched)
    }

    /// Applies `event` and writes it to the log. A rejected event leaves
    /// both the state and the log untouched. Outstanding snapshots keep the
    /// state they were taken from.
    ///
    /// If the write itself fails the in-memory state is ahead of the log;
    /// the store refuses further appends and must be reopened.
    pub fn append(&mut self, event: Event) -> Result<Applied, StoreError> {
        if self.poisoned {
            return Err(StoreError::Poisoned);
        }
        let applied = Arc::make_mut(&mut self.world).apply(&event)?;
        let record = encode_record(self.seq + 1, &event);
        let written = match &mut self.sink {
            Sink::File { file, .. } => file.write_all(&record).and_then(|()| file.sync_data()),
            Sink::Memory(bytes) => {
                bytes.extend_from_slice(&record);
                Ok(())
            }
        };
        if let Err(e) = written {
            self.poisoned = true;
            return Err(e.into());
        }
        self.seq += 1;
        Ok(applied)
    }
}

/// Cuts an incomplete last record (a write interrupted by a crash) off the
/// log at `path`. Returns the number of bytes dropped. Damage anywhere else,
/// such as a checksum mismatch in a complete record, is left for the
/// operator and reported as an error.
pub fn repair_torn_tail(path: impl AsRef<Path>) -> Result<u64, StoreError> {
    let bytes = std::fs::read(&path)?;
    let offset = match read_log(&bytes) {
        Ok(_) => return Ok(0),
        Err(LogError::Corrupt { offset, reason }) => {
            let rest = &bytes[offset as usize..];
            let torn = rest.len() < 8 || {
                let len = u32::from_le_bytes(rest[..4].try_into().unwrap()) as usize;
                8 + len > rest.len()
            };
            if !torn {
                return Err(LogError::Corrupt { offset, reason }.into());
            }
            offset
        }
        Err(e) => return Err(e.into()),
    };
    let file = OpenOptions::new().write(true).open(&path)?;
    file.set_len(offset)?;
    file.sync_all()?;
    tracing::warn!(offset, dropped = bytes.len() as u64 - offset, "cut torn record off the event log");
    Ok(bytes.len() as u64 - offset)
}

fn track_undispatched(pending: &mut Vec<EscalationAction>, event: &Event, actions: Vec<EscalationAction>) {
    if let Event::NotificationsDispatched { records } = event {
        pending.retain(|a| !records.iter().any(|r| Some(&r.notification_id) == a.notification_id.as_ref()));
    }
    pending.extend(actions.into_iter().filter(|a| a.kind.channel().is_some()));
}
