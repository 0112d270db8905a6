//! Encrypted append-only event store and consent-gated export.
//!
//! # File layout
//!
//! ```text
//! header (96 bytes, plaintext)
//!   0..8    magic "MGEVLOG1"
//!   8..10   format version, u16 LE (1)
//!   10      KDF id (1 = Argon2id v0x13)
//!   11      reserved (0)
//!   12..24  m_cost KiB, t_cost, p_cost, u32 LE each
//!   24..40  salt
//!   40..64  verifier nonce
//!   64..96  verifier ciphertext (16-byte constant + 16-byte tag)
//! frame, repeated
//!   u32 LE  length of the rest of the frame
//!   u64 LE  sequence number
//!   24      nonce
//!   ..      XChaCha20-Poly1305 ciphertext of the envelope JSON
//! ```
//!
//! Each frame authenticates its sequence number and the previous envelope's
//! integrity tag as associated data, and each envelope carries
//! `tag = SHA-256(prev_tag || seq || session_id || 0 || event_json)`, so
//! reordering, dropping or splicing frames is detected. A frame cut short by
//! a crash is dropped on open; any other damage is an integrity failure.

use crate::events::{EventKind, SessionEvent, SessionRecord};
use crate::progress::MonthlySummary;
use argon2::{Algorithm, Argon2, Params, Version};
use chacha20poly1305::aead::rand_core::RngCore;
use chacha20poly1305::aead::{Aead, KeyInit, OsRng, Payload};
use chacha20poly1305::{Key, XChaCha20Poly1305, XNonce};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"MGEVLOG1";
pub const FORMAT_VERSION: u16 = 1;
pub const KDF_ARGON2ID: u8 = 1;
pub const HEADER_LEN: usize = 96;
const NONCE_LEN: usize = 24;
const TAG_LEN: usize = 32;
const VERIFIER: &[u8; 16] = b"mindgap-store-ok";
/// Bytes of the frame prefix before the ciphertext: length, sequence, nonce.
const FRAME_PREFIX: usize = 4 + 8 + NONCE_LEN;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("store is locked")]
    StoreLocked,
    #[error("wrong passphrase")]
    WrongPassphrase,
    #[error("integrity failure at sequence {seq}: {reason}")]
    IntegrityFailure { seq: u64, reason: String },
    #[error("unknown session `{0}`; its first event must be a check-in")]
    UnknownSession(String),
    #[error("not a store file: {0}")]
    BadHeader(String),
    #[error("key derivation failed: {0}")]
    Kdf(String),
    #[error("serialization failed: {0}")]
    Serialization(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct KdfParams {
    pub m_cost_kib: u32,
    pub t_cost: u32,
    pub p_cost: u32,
}

impl Default for KdfParams {
    fn default() -> Self {
        Self {
            m_cost_kib: Params::DEFAULT_M_COST,
            t_cost: Params::DEFAULT_T_COST,
            p_cost: Params::DEFAULT_P_COST,
        }
    }
}

impl KdfParams {
    /// Cheap parameters for tests and simulations. Not for real stores.
    pub fn insecure_fast() -> Self {
        Self {
            m_cost_kib: 64,
            t_cost: 1,
            p_cost: 1,
        }
    }

    fn derive(&self, passphrase: &[u8], salt: &[u8]) -> Result<Key, StoreError> {
        let params = Params::new(self.m_cost_kib, self.t_cost, self.p_cost, Some(32)).map_err(|e| StoreError::Kdf(e.to_string()))?;
        let mut key = Key::default();
        Argon2::new(Algorithm::Argon2id, Version::V0x13, params)
            .hash_password_into(passphrase, salt, &mut key)
            .map_err(|e| StoreError::Kdf(e.to_string()))?;
        Ok(key)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
struct Header {
    kdf: KdfParams,
    salt: [u8; 16],
    verifier_nonce: [u8; NONCE_LEN],
    verifier: [u8; 32],
}

impl Header {
    fn prefix(&self) -> [u8; 40] {
        let mut b = [0u8; 40];
        b[..8].copy_from_slice(MAGIC);
        b[8..10].copy_from_slice(&FORMAT_VERSION.to_le_bytes());
        b[10] = KDF_ARGON2ID;
        b[12..16].copy_from_slice(&self.kdf.m_cost_kib.to_le_bytes());
        b[16..20].copy_from_slice(&self.kdf.t_cost.to_le_bytes());
        b[20..24].copy_from_slice(&self.kdf.p_cost.to_le_bytes());
        b[24..40].copy_from_slice(&self.salt);
        b
    }

    fn to_bytes(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[..40].copy_from_slice(&self.prefix());
        b[40..64].copy_from_slice(&self.verifier_nonce);
        b[64..96].copy_from_slice(&self.verifier);
        b
    }

    fn parse(b: &[u8]) -> Result<Self, StoreError> {
        if b.len() < HEADER_LEN {
            return Err(StoreError::BadHeader(format!("{} bytes, header needs {HEADER_LEN}", b.len())));
        }
        if &b[..8] != MAGIC {
            return Err(StoreError::BadHeader("magic mismatch".into()));
        }
        let version = u16::from_le_bytes([b[8], b[9]]);
        if version != FORMAT_VERSION {
            return Err(StoreError::BadHeader(format!("unsupported version {version}")));
        }
        if b[10] != KDF_ARGON2ID {
            return Err(StoreError::BadHeader(format!("unknown KDF id {}", b[10])));
        }
        let u32_at = |i: usize| u32::from_le_bytes(b[i..i + 4].try_into().expect("4 bytes"));
        Ok(Self {
            kdf: KdfParams {
                m_cost_kib: u32_at(12),
                t_cost: u32_at(16),
                p_cost: u32_at(20),
            },
            salt: b[24..40].try_into().expect("16 bytes"),
            verifier_nonce: b[40..64].try_into().expect("24 bytes"),
            verifier: b[64..96].try_into().expect("32 bytes"),
        })
    }

    fn create(kdf: KdfParams, passphrase: &[u8]) -> Result<(Self, Key), StoreError> {
        let mut salt = [0u8; 16];
        OsRng.fill_bytes(&mut salt);
        let mut verifier_nonce = [0u8; NONCE_LEN];
        OsRng.fill_bytes(&mut verifier_nonce);
        let key = kdf.derive(passphrase, &salt)?;
        let mut header = Self {
            kdf,
            salt,
            verifier_nonce,
            verifier: [0; 32],
        };
        let ct = XChaCha20Poly1305::new(&key)
            .encrypt(
                XNonce::from_slice(&verifier_nonce),
                Payload {
                    msg: VERIFIER,
                    aad: &header.prefix(),
                },
            )
            .map_err(|_| StoreError::Kdf("verifier encryption failed".into()))?;
        header.verifier.copy_from_slice(&ct);
        Ok((header, key))
    }

    fn unlock(&self, passphrase: &[u8]) -> Result<Key, StoreError> {
        let key = self.kdf.derive(passphrase, &self.salt)?;
        let plain = XChaCha20Poly1305::new(&key)
            .decrypt(
                XNonce::from_slice(&self.verifier_nonce),
                Payload {
                    msg: &self.verifier,
                    aad: &self.prefix(),
                },
            )
            .map_err(|_| StoreError::WrongPassphrase)?;
        if plain != VERIFIER {
            return Err(StoreError::WrongPassphrase);
        }
        Ok(key)
    }
}

/// One stored event with its chain position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StoredEventEnvelope {
    pub seq: u64,
    pub session_id: String,
    pub event: SessionEvent,
    /// Hex SHA-256 of the previous envelope; all zeros for the first.
    pub prev_tag: String,
    pub tag: String,
}

pub fn integrity_tag(prev: &[u8; TAG_LEN], seq: u64, session_id: &str, event: &SessionEvent) -> Result<[u8; TAG_LEN], StoreError> {
    let mut h = Sha256::new();
    h.update(prev);
    h.update(seq.to_le_bytes());
    h.update(session_id.as_bytes());
    h.update([0u8]);
    h.update(serde_json::to_vec(event)?);
    Ok(h.finalize().into())
}

fn aad(seq: u64, prev: &[u8; TAG_LEN]) -> [u8; 8 + TAG_LEN] {
    let mut a = [0u8; 8 + TAG_LEN];
    a[..8].copy_from_slice(&seq.to_le_bytes());
    a[8..].copy_from_slice(prev);
    a
}

/// What opening the store had to repair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct RecoveryReport {
    pub intact_frames: u64,
    pub truncated_bytes: u64,
}

enum Backend {
    File { path: PathBuf, file: File },
    Memory(Vec<u8>),
}

/// Time range over session open timestamps, inclusive start, exclusive end.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordRange {
    pub from_ms: u64,
    pub to_ms: u64,
}

impl RecordRange {
    pub const ALL: RecordRange = RecordRange {
        from_ms: 0,
        to_ms: u64::MAX,
    };

    pub fn contains(&self, ts: u64) -> bool {
        (self.from_ms..self.to_ms).contains(&ts)
    }
}

/// Immutable view of a consistent prefix of the store.
#[derive(Debug, Clone)]
pub struct StoreSnapshot {
    pub envelopes: Vec<StoredEventEnvelope>,
}

impl StoreSnapshot {
    /// Groups events by session in first-seen order.
    pub fn sessions(&self) -> Vec<(String, Vec<SessionEvent>)> {
        let mut order = Vec::new();
        let mut by_id: HashMap<&str, Vec<SessionEvent>> = HashMap::new();
        for env in &self.envelopes {
            by_id
                .entry(env.session_id.as_str())
                .or_insert_with(|| {
                    order.push(env.session_id.clone());
                    Vec::new()
                })
                .push(env.event.clone());
        }
        order
            .into_iter()
            .map(|id| {
                let events = by_id.remove(id.as_str()).unwrap_or_default();
                (id, events)
            })
            .collect()
    }

    /// Closed sessions folded into records, ordered by open time.
    pub fn records(&self, range: RecordRange) -> Vec<SessionRecord> {
        let mut out: Vec<SessionRecord> = self
            .sessions()
            .iter()
            .filter_map(|(id, events)| SessionRecord::from_events(id, events))
            .filter(|r| range.contains(r.opened_at))
            .collect();
        out.sort_by_key(|r| r.opened_at);
        out
    }
}

pub struct EventStore {
    backend: Backend,
    header: Header,
    key: Option<Key>,
    envelopes: Vec<StoredEventEnvelope>,
    sessions: HashSet<String>,
    last_tag: [u8; TAG_LEN],
    recovery: RecoveryReport,
    /// fsync after every append.
    pub durable: bool,
}

impl std::fmt::Debug for EventStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EventStore")
            .field("envelopes", &self.envelopes.len())
            .field("locked", &self.key.is_none())
            .finish_non_exhaustive()
    }
}

impl EventStore {
    /// Creates a new store file. Fails if the file exists.
    pub fn create(path: impl AsRef<Path>, passphrase: &str, kdf: KdfParams) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let (header, key) = Header::create(kdf, passphrase.as_bytes())?;
        let mut file = OpenOptions::new().read(true).append(true).create_new(true).open(&path)?;
        file.write_all(&header.to_bytes())?;
        file.sync_all()?;
        Ok(Self::assemble(Backend::File { path, file }, header, key))
    }

    /// Opens an existing store file, dropping a crash-truncated final frame.
    pub fn open(path: impl AsRef<Path>, passphrase: &str) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        let mut file = OpenOptions::new().read(true).append(true).open(&path)?;
        let mut bytes = Vec::new();
        file.read_to_end(&mut bytes)?;
        let (mut store, intact_len) = Self::load(&bytes, passphrase, |header, key| Self::assemble(Backend::Memory(Vec::new()), header, key))?;
        if intact_len < bytes.len() {
            file.set_len(intact_len as u64)?;
            file.sync_all()?;
        }
        store.backend = Backend::File { path, file };
        Ok(store)
    }

    pub fn open_or_create(path: impl AsRef<Path>, passphrase: &str, kdf: KdfParams) -> Result<Self, StoreError> {
        if path.as_ref().exists() {
            Self::open(path, passphrase)
        } else {
            Self::create(path, passphrase, kdf)
        }
    }

    pub fn in_memory(passphrase: &str, kdf: KdfParams) -> Result<Self, StoreError> {
        let (header, key) = Header::create(kdf, passphrase.as_bytes())?;
        Ok(Self::assemble(Backend::Memory(header.to_bytes().to_vec()), header, key))
    }

    /// Opens an in-memory store from raw store bytes.
    pub fn from_bytes(bytes: &[u8], passphrase: &str) -> Result<Self, StoreError> {
        let (mut store, intact_len) = Self::load(bytes, passphrase, |header, key| Self::assemble(Backend::Memory(Vec::new()), header, key))?;
        store.backend = Backend::Memory(bytes[..intact_len].to_vec());
        Ok(store)
    }

    /// The raw encrypted bytes of an in-memory store.
    pub fn raw_bytes(&self) -> Option<&[u8]> {
        match &self.backend {
            Backend::Memory(b) => Some(b),
            Backend::File { .. } => None,
        }
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.backend {
            Backend::File { path, .. } => Some(path),
            Backend::Memory(_) => None,
        }
    }

    fn assemble(backend: Backend, header: Header, key: Key) -> Self {
        Self {
            backend,
            header,
            key: Some(key),
            envelopes: Vec::new(),
            sessions: HashSet::new(),
            last_tag: [0; TAG_LEN],
            recovery: RecoveryReport::default(),
            durable: true,
        }
    }

    fn load(bytes: &[u8], passphrase: &str, make: impl FnOnce(Header, Key) -> Self) -> Result<(Self, usize), StoreError> {
        let header = Header::parse(bytes)?;
        let key = header.unlock(passphrase.as_bytes())?;
        let cipher = XChaCha20Poly1305::new(&key);
        let mut store = make(header, key);
        let mut pos = HEADER_LEN;
        while pos < bytes.len() {
            let rest = &bytes[pos..];
            if rest.len() < 4 {
                break;
            }
            let len = u32::from_le_bytes(rest[..4].try_into().expect("4 bytes")) as usize;
            if rest.len() < 4 + len {
                break;
            }
            let expected = store.envelopes.len() as u64 + 1;
            let fail = |reason: &str| StoreError::IntegrityFailure {
                seq: expected,
                reason: reason.into(),
            };
            if len < 8 + NONCE_LEN + 16 {
                return Err(fail("frame too short"));
            }
            let frame = &rest[4..4 + len];
            let seq = u64::from_le_bytes(frame[..8].try_into().expect("8 bytes"));
            if seq != expected {
                return Err(fail(&format!("sequence {seq} where {expected} was expected")));
            }
            let plain = cipher
                .decrypt(
                    XNonce::from_slice(&frame[8..8 + NONCE_LEN]),
                    Payload {
                        msg: &frame[8 + NONCE_LEN..],
                        aad: &aad(seq, &store.last_tag),
                    },
                )
                .map_err(|_| fail("authentication failed"))?;
            let env: StoredEventEnvelope = serde_json::from_slice(&plain)?;
            let tag = integrity_tag(&store.last_tag, seq, &env.session_id, &env.event)?;
            if env.seq != seq || env.prev_tag != hex::encode(store.last_tag) || env.tag != hex::encode(tag) {
                return Err(fail("integrity tag chain broken"));
            }
            store.last_tag = tag;
            store.sessions.insert(env.session_id.clone());
            store.envelopes.push(env);
            pos += 4 + len;
        }
        store.recovery = RecoveryReport {
            intact_frames: store.envelopes.len() as u64,
            truncated_bytes: (bytes.len() - pos) as u64,
        };
        Ok((store, pos))
    }

    pub fn recovery(&self) -> RecoveryReport {
        self.recovery
    }

    pub fn is_locked(&self) -> bool {
        self.key.is_none()
    }

    pub fn lock(&mut self) {
        self.key = None;
    }

    pub fn unlock(&mut self, passphrase: &str) -> Result<(), StoreError> {
        self.key = Some(self.header.unlock(passphrase.as_bytes())?);
        Ok(())
    }

    fn key(&self) -> Result<&Key, StoreError> {
        self.key.as_ref().ok_or(StoreError::StoreLocked)
    }

    pub fn last_sequence(&self) -> u64 {
        self.envelopes.len() as u64
    }

    pub fn has_session(&self, session_id: &str) -> bool {
        self.sessions.contains(session_id)
    }

    /// Appends one event and returns its sequence number (1-based).
    ///
    /// A session's first event must be its check-in. The frame is written
    /// with a single write call; on files it is synced before returning.
    pub fn append_event(&mut self, session_id: &str, event: SessionEvent) -> Result<u64, StoreError> {
        let key = self.key()?;
        if !self.sessions.contains(session_id) && event.kind() != EventKind::Checkin {
            return Err(StoreError::UnknownSession(session_id.to_string()));
        }
        let seq = self.last_sequence() + 1;
        let tag = integrity_tag(&self.last_tag, seq, session_id, &event)?;
        let env = StoredEventEnvelope {
            seq,
            session_id: session_id.to_string(),
            event,
            prev_tag: hex::encode(self.last_tag),
            tag: hex::encode(tag),
        };
        let plain = serde_json::to_vec(&env)?;
        let mut nonce = [0u8; NONCE_LEN];
        OsRng.fill_bytes(&mut nonce);
        let ct = XChaCha20Poly1305::new(key)
            .encrypt(
                XNonce::from_slice(&nonce),
                Payload {
                    msg: &plain,
                    aad: &aad(seq, &self.last_tag),
                },
            )
            .map_err(|_| StoreError::IntegrityFailure {
                seq,
                reason: "encryption failed".into(),
            })?;
        let mut frame = Vec::with_capacity(FRAME_PREFIX + ct.len());
        frame.extend_from_slice(&((8 + NONCE_LEN + ct.len()) as u32).to_le_bytes());
        frame.extend_from_slice(&seq.to_le_bytes());
        frame.extend_from_slice(&nonce);
        frame.extend_from_slice(&ct);
        match &mut self.backend {
            Backend::File { file, .. } => {
                file.write_all(&frame)?;
                if self.durable {
                    file.sync_data()?;
                }
            }
            Backend::Memory(bytes) => bytes.extend_from_slice(&frame),
        }
        self.last_tag = tag;
        self.sessions.insert(env.session_id.clone());
        self.envelopes.push(env);
        Ok(seq)
    }

    pub fn envelopes(&self) -> Result<&[StoredEventEnvelope], StoreError> {
        self.key()?;
        Ok(&self.envelopes)
    }

    pub fn snapshot(&self) -> Result<StoreSnapshot, StoreError> {
        Ok(StoreSnapshot {
            envelopes: self.envelopes()?.to_vec(),
        })
    }

    pub fn session_events(&self, session_id: &str) -> Result<Vec<SessionEvent>, StoreError> {
        Ok(self
            .envelopes()?
            .iter()
            .filter(|e| e.session_id == session_id)
            .map(|e| e.event.clone())
            .collect())
    }

    /// Rebuilds the records of closed sessions opened within `range`.
    pub fn load_records(&self, range: RecordRange) -> Result<Vec<SessionRecord>, StoreError> {
        Ok(self.snapshot()?.records(range))
    }

    /// Deletes the whole store. This is the only deletion the store offers.
    pub fn wipe(self) -> Result<(), StoreError> {
        match self.backend {
            Backend::File { path, file } => {
                file.set_len(0)?;
                file.sync_all()?;
                drop(file);
                std::fs::remove_file(&path)?;
                Ok(())
            }
            Backend::Memory(_) => Ok(()),
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum ExportError {
    #[error("export requires an explicit consent confirmation")]
    NoConsent,
    #[error("nothing to export")]
    EmptySummaries,
    #[error("export could not be written: {0}")]
    Io(String),
}

/// Phrase the patient types to confirm an export.
pub const CONSENT_PHRASE: &str = "SHARE MY SUMMARY";
pub const EXPORT_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentChallenge {
    pub challenge_id: String,
    pub phrase: String,
}

/// Single-use proof that the patient confirmed an export in this run.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsentToken(String);

impl ConsentToken {
    pub fn as_str(&self) -> &str {
        &self.0
    }
}

/// Mints consent tokens. Lives only in memory, so tokens never survive a
/// restart.
#[derive(Debug, Default)]
pub struct ConsentGate {
    pending: BTreeMap<String, ()>,
    issued: HashSet<String>,
}

fn random_id() -> String {
    let mut b = [0u8; 16];
    OsRng.fill_bytes(&mut b);
    hex::encode(b)
}

impl ConsentGate {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn request(&mut self) -> ConsentChallenge {
        let id = random_id();
        self.pending.insert(id.clone(), ());
        ConsentChallenge {
            challenge_id: id,
            phrase: CONSENT_PHRASE.into(),
        }
    }

    /// Exchanges a challenge and the typed phrase for a token.
    pub fn confirm(&mut self, challenge_id: &str, typed: &str) -> Result<ConsentToken, ExportError> {
        if typed.trim() != CONSENT_PHRASE || self.pending.remove(challenge_id).is_none() {
            return Err(ExportError::NoConsent);
        }
        let token = random_id();
        self.issued.insert(token.clone());
        Ok(ConsentToken(token))
    }

    fn redeem(&mut self, token: &ConsentToken) -> bool {
        self.issued.remove(&token.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConsentMarker {
    pub confirmed: bool,
    pub phrase: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExportDocument {
    pub schema_version: u32,
    pub recipient_label: String,
    pub created_at_ms: u64,
    pub consent: ConsentMarker,
    pub summaries: Vec<MonthlySummary>,
}

/// Serializes an export. Consumes the token.
pub fn export_summary(
    gate: &mut ConsentGate,
    token: Option<&ConsentToken>,
    recipient_label: &str,
    summaries: &[MonthlySummary],
    created_at_ms: u64,
) -> Result<Vec<u8>, ExportError> {
    let token = token.ok_or(ExportError::NoConsent)?;
    if summaries.is_empty() {
        return Err(ExportError::EmptySummaries);
    }
    if !gate.redeem(token) {
        return Err(ExportError::NoConsent);
    }
    let doc = ExportDocument {
        schema_version: EXPORT_SCHEMA_VERSION,
        recipient_label: recipient_label.to_string(),
        created_at_ms,
        consent: ConsentMarker {
            confirmed: true,
            phrase: CONSENT_PHRASE.into(),
        },
        summaries: summaries.to_vec(),
    };
    serde_json::to_vec_pretty(&doc).map_err(|e| ExportError::Io(e.to_string()))
}

/// Writes export bytes to the path the patient chose. Refuses to overwrite.
pub fn write_export(path: &Path, bytes: &[u8]) -> Result<(), ExportError> {
    let mut f = OpenOptions::new()
        .write(true)
        .create_new(true)
        .open(path)
        .map_err(|e| ExportError::Io(e.to_string()))?;
    f.write_all(bytes).map_err(|e| ExportError::Io(e.to_string()))?;
    f.sync_all().map_err(|e| ExportError::Io(e.to_string()))
}
