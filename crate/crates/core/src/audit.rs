//! Hash-chained audit log.
//!
//! Each entry commits to its predecessor, so the hash of entry `k` commits to
//! the whole prefix `0..=k`. Payloads are stored as canonical JSON (sorted
//! keys, no whitespace).

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const GENESIS_HASH: [u8; 32] = [0; 32];

pub type Hash = [u8; 32];

/// Lowercase hex, the form hashes take in files and API responses.
pub fn to_hex(h: &Hash) -> String {
    hex::encode(h)
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("payload cannot be canonicalized: {0}")]
    Canonical(#[from] serde_json::Error),
    #[error("checkpoint index {upto} out of range for chain of length {len}")]
    OutOfRange { upto: u64, len: u64 },
}

/// Sorted-key, whitespace-free JSON.
pub fn canonicalize<T: Serialize + ?Sized>(payload: &T) -> Result<String, AuditError> {
    // serde_json::Value keeps object keys in a BTreeMap, so re-serializing
    // through it sorts them.
    let v = serde_json::to_value(payload)?;
    Ok(serde_json::to_string(&v)?)
}

pub fn entry_hash(prev: &Hash, payload: &str, index: u64, timestamp_ms: i64) -> Hash {
    let mut h = Sha256::new();
    h.update(prev);
    h.update(payload.as_bytes());
    h.update(index.to_be_bytes());
    h.update(timestamp_ms.to_be_bytes());
    h.finalize().into()
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AuditEntry {
    pub index: u64,
    pub timestamp_ms: i64,
    pub payload: String,
    pub prev_hash: Hash,
    pub entry_hash: Hash,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EntryLine {
    index: u64,
    timestamp_ms: i64,
    payload: String,
    prev_hash: String,
    entry_hash: String,
}

impl AuditEntry {
    /// File form, without the trailing newline.
    pub fn to_line(&self) -> String {
        serde_json::to_string(&EntryLine {
            index: self.index,
            timestamp_ms: self.timestamp_ms,
            payload: self.payload.clone(),
            prev_hash: hex::encode(self.prev_hash),
            entry_hash: hex::encode(self.entry_hash),
        })
        .expect("entry lines always serialize")
    }

    /// Parses a line, accepting only the exact bytes [`AuditEntry::to_line`]
    /// would produce.
    pub fn from_line(line: &str) -> Result<AuditEntry, String> {
        let raw: EntryLine = serde_json::from_str(line).map_err(|e| e.to_string())?;
        let entry = AuditEntry {
            index: raw.index,
            timestamp_ms: raw.timestamp_ms,
            payload: raw.payload,
            prev_hash: parse_hash(&raw.prev_hash)?,
            entry_hash: parse_hash(&raw.entry_hash)?,
        };
        if entry.to_line() != line {
            return Err("line is not in canonical form".to_string());
        }
        Ok(entry)
    }
}

fn parse_hash(s: &str) -> Result<Hash, String> {
    let mut out = [0u8; 32];
    hex::decode_to_slice(s, &mut out).map_err(|e| format!("bad hash {s:?}: {e}"))?;
    Ok(out)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fault {
    Unparseable(String),
    IndexMismatch,
    Linkage,
    HashMismatch,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BadEntry {
    pub index: u64,
    pub fault: Fault,
}

/// Checks every entry in order and reports the first one that fails.
pub fn verify(entries: &[AuditEntry]) -> Result<(), BadEntry> {
    let mut prev = GENESIS_HASH;
    for (i, e) in entries.iter().enumerate() {
        check(i as u64, e, &prev)?;
        prev = e.entry_hash;
    }
    Ok(())
}

fn check(position: u64, e: &AuditEntry, prev: &Hash) -> Result<(), BadEntry> {
    let bad = |fault| Err(BadEntry { index: position, fault });
    if e.index != position {
        return bad(Fault::IndexMismatch);
    }
    if &e.prev_hash != prev {
        return bad(Fault::Linkage);
    }
    if entry_hash(&e.prev_hash, &e.payload, e.index, e.timestamp_ms) != e.entry_hash {
        return bad(Fault::HashMismatch);
    }
    Ok(())
}

/// Verifies a chain file's contents. A trailing newline is expected after
/// every entry; an empty text is an empty, valid chain.
pub fn verify_text(text: &str) -> Result<u64, BadEntry> {
    verify_bytes(text.as_bytes())
}

/// Like [`verify_text`], for raw file bytes; a line that is not UTF-8 is
/// reported as unparseable at its position.
pub fn verify_bytes(bytes: &[u8]) -> Result<u64, BadEntry> {
    let mut prev = GENESIS_HASH;
    let mut count = 0u64;
    if bytes.is_empty() {
        return Ok(0);
    }
    let body = bytes.strip_suffix(b"\n").unwrap_or(bytes);
    for (i, raw) in body.split(|&b| b == b'\n').enumerate() {
        let position = i as u64;
        let unparseable = |m: String| BadEntry {
            index: position,
            fault: Fault::Unparseable(m),
        };
        let line = std::str::from_utf8(raw).map_err(|e| unparseable(e.to_string()))?;
        let e = AuditEntry::from_line(line).map_err(unparseable)?;
        check(position, &e, &prev)?;
        prev = e.entry_hash;
        count += 1;
    }
    if !bytes.ends_with(b"\n") {
        return Err(BadEntry {
            index: count - 1,
            fault: Fault::Unparseable("missing final newline".to_string()),
        });
    }
    Ok(count)
}

#[derive(Clone, Debug, Default)]
pub struct AuditChain {
    entries: Vec<AuditEntry>,
}

impl AuditChain {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adopts already-verified entries.
    pub fn from_entries(entries: Vec<AuditEntry>) -> Result<Self, BadEntry> {
        verify(&entries)?;
        Ok(AuditChain { entries })
    }

    pub fn len(&self) -> u64 {
        self.entries.len() as u64
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[AuditEntry] {
        &self.entries
    }

    pub fn head(&self) -> Hash {
        self.entries.last().map(|e| e.entry_hash).unwrap_or(GENESIS_HASH)
    }

    pub fn append<T: Serialize + ?Sized>(&mut self, payload: &T, timestamp_ms: i64) -> Result<&AuditEntry, AuditError> {
        let payload = canonicalize(payload)?;
        Ok(self.append_canonical(payload, timestamp_ms))
    }

    /// Appends a payload the caller has already canonicalized.
    pub fn append_canonical(&mut self, payload: String, timestamp_ms: i64) -> &AuditEntry {
        let index = self.len();
        let prev_hash = self.head();
        let entry_hash = entry_hash(&prev_hash, &payload, index, timestamp_ms);
        self.entries.push(AuditEntry {
            index,
            timestamp_ms,
            payload,
            prev_hash,
            entry_hash,
        });
        self.entries.last().expect("just pushed")
    }

    pub fn verify(&self) -> Result<(), BadEntry> {
        verify(&self.entries)
    }

    pub fn checkpoint_root(&self, upto: u64) -> Result<Hash, AuditError> {
        self.entries
            .get(upto as usize)
            .map(|e| e.entry_hash)
            .ok_or(AuditError::OutOfRange { upto, len: self.len() })
    }
}
