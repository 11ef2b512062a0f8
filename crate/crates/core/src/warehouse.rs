//! ID-keyed storage for weights, raw blobs and live model handles, plus the
//! pointer type that names a model held by another participant.

use std::any::Any;
use std::collections::HashMap;
use std::fmt;
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::{Arc, RwLock};

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{Error, Result};
use crate::model::ModelWeights;

/// 128-bit random identifier, rendered as 32 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DataId([u8; 16]);

impl DataId {
    pub fn random() -> Self {
        Self(rand::random())
    }

    pub fn from_bytes(bytes: [u8; 16]) -> Self {
        Self(bytes)
    }

    pub fn as_bytes(&self) -> &[u8; 16] {
        &self.0
    }

    pub fn to_hex(&self) -> String {
        hex::encode(self.0)
    }
}

impl fmt::Display for DataId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

impl fmt::Debug for DataId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "DataId({})", self.to_hex())
    }
}

impl FromStr for DataId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s.len() != 32 || s.chars().any(|c| c.is_ascii_uppercase()) {
            return Err(Error::Parse(format!(
                "data id must be 32 lowercase hex chars: {s:?}"
            )));
        }
        let mut out = [0u8; 16];
        hex::decode_to_slice(s, &mut out).map_err(|e| Error::Parse(format!("data id {s:?}: {e}")))?;
        Ok(Self(out))
    }
}

impl Serialize for DataId {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_str(&self.to_hex())
    }
}

impl<'de> Deserialize<'de> for DataId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Host and port of a participant's listener.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Address {
    pub host: String,
    pub port: u16,
}

impl Address {
    pub fn new(host: impl Into<String>, port: u16) -> Result<Self> {
        let host = host.into();
        if host.is_empty() || host.chars().any(char::is_whitespace) {
            return Err(Error::InvalidArgument(format!("malformed host {host:?}")));
        }
        if port == 0 {
            return Err(Error::InvalidArgument("port must be in 1..=65535".into()));
        }
        Ok(Self { host, port })
    }

    pub fn socket_string(&self) -> String {
        format!("{}:{}", self.host, self.port)
    }
}

impl fmt::Display for Address {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.host, self.port)
    }
}

impl FromStr for Address {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (host, port) = s
            .rsplit_once(':')
            .ok_or_else(|| Error::InvalidArgument(format!("address {s:?} lacks a port")))?;
        let port = port
            .parse::<u16>()
            .map_err(|_| Error::InvalidArgument(format!("address {s:?} has a bad port")))?;
        Address::new(host, port)
    }
}

/// Names a model held in some participant's warehouse.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ModelPointer {
    pub address: Address,
    pub id: DataId,
}

impl ModelPointer {
    pub fn new(address: Address, id: DataId) -> Self {
        Self { address, id }
    }
}

impl fmt::Display for ModelPointer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}/{}", self.address, self.id)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub enum BackendKind {
    Memory,
    File(PathBuf),
}

/// Live object stored by reference, never serialized.
pub type ModelHandle = Arc<dyn Any + Send + Sync>;

enum Stored {
    Bytes(Arc<Vec<u8>>),
    Handle(ModelHandle),
    File(PathBuf),
}

/// Where an entry lives; the warehouse's record of how to reach it.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Location {
    pub backend: BackendKind,
}

struct Entry {
    stored: Stored,
    location: Location,
}

pub struct Warehouse {
    entries: RwLock<HashMap<DataId, Entry>>,
    default_file_dir: Option<PathBuf>,
}

impl Default for Warehouse {
    fn default() -> Self {
        Self::in_memory()
    }
}

impl Warehouse {
    /// Warehouse whose weights default to RAM.
    pub fn in_memory() -> Self {
        Self {
            entries: RwLock::new(HashMap::new()),
            default_file_dir: None,
        }
    }

    /// Warehouse that keeps weights on disk under `dir` by default. Files left
    /// by an earlier process in `dir` are indexed and readable again.
    pub fn with_file_dir(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir).map_err(|e| Error::Storage(format!("{}: {e}", dir.display())))?;
        let mut entries = HashMap::new();
        for entry in fs::read_dir(&dir).map_err(|e| Error::Storage(e.to_string()))? {
            let entry = entry.map_err(|e| Error::Storage(e.to_string()))?;
            let name = entry.file_name();
            if let Some(id) = name.to_str().and_then(|n| n.parse::<DataId>().ok()) {
                entries.insert(
                    id,
                    Entry {
                        stored: Stored::File(entry.path()),
                        location: Location {
                            backend: BackendKind::File(dir.clone()),
                        },
                    },
                );
            }
        }
        Ok(Self {
            entries: RwLock::new(entries),
            default_file_dir: Some(dir),
        })
    }

    /// Backend that `put_weights` uses.
    pub fn weights_backend(&self) -> BackendKind {
        match &self.default_file_dir {
            Some(dir) => BackendKind::File(dir.clone()),
            None => BackendKind::Memory,
        }
    }

    fn fresh_id(&self, entries: &HashMap<DataId, Entry>) -> DataId {
        loop {
            let id = DataId::random();
            if !entries.contains_key(&id) {
                return id;
            }
        }
    }

    pub fn put_bytes(&self, payload: &[u8], backend: &BackendKind) -> Result<DataId> {
        // The file is written outside the lock; the id is checked again on
        // insert in case another put picked it meanwhile.
        let id = {
            let entries = self.entries.read().unwrap();
            self.fresh_id(&entries)
        };
        let stored = match backend {
            BackendKind::Memory => Stored::Bytes(Arc::new(payload.to_vec())),
            BackendKind::File(dir) => Stored::File(write_atomic(dir, &id, payload)?),
        };
        let mut entries = self.entries.write().unwrap();
        if entries.contains_key(&id) {
            // Lost a race on a 128-bit collision; retry.
            drop(entries);
            if let Stored::File(p) = &stored {
                let _ = fs::remove_file(p);
            }
            return self.put_bytes(payload, backend);
        }
        entries.insert(
            id,
            Entry {
                stored,
                location: Location {
                    backend: backend.clone(),
                },
            },
        );
        Ok(id)
    }

    /// Stores weights in their canonical encoding on the default weights backend.
    pub fn put_weights(&self, weights: &ModelWeights) -> Result<DataId> {
        self.put_bytes(&weights.to_bytes(), &self.weights_backend())
    }

    /// Stores a live object in RAM.
    pub fn put_handle(&self, handle: ModelHandle) -> DataId {
        let mut entries = self.entries.write().unwrap();
        let id = self.fresh_id(&entries);
        entries.insert(
            id,
            Entry {
                stored: Stored::Handle(handle),
                location: Location {
                    backend: BackendKind::Memory,
                },
            },
        );
        id
    }

    /// Replaces the payload behind an existing id, keeping its backend.
    pub fn replace_bytes(&self, id: &DataId, payload: &[u8]) -> Result<()> {
        let backend = self.location(id)?.backend;
        let stored = match &backend {
            BackendKind::Memory => Stored::Bytes(Arc::new(payload.to_vec())),
            BackendKind::File(dir) => Stored::File(write_atomic(dir, id, payload)?),
        };
        let mut entries = self.entries.write().unwrap();
        match entries.get_mut(id) {
            Some(e) => {
                e.stored = stored;
                Ok(())
            }
            None => Err(Error::NotFound(id.to_hex())),
        }
    }

    pub fn get(&self, id: &DataId) -> Result<Vec<u8>> {
        let path = {
            let entries = self.entries.read().unwrap();
            match entries.get(id).map(|e| &e.stored) {
                None => return Err(Error::NotFound(id.to_hex())),
                Some(Stored::Bytes(b)) => return Ok(b.as_ref().clone()),
                Some(Stored::Handle(_)) => {
                    return Err(Error::Storage(format!("{id} holds a live handle, not bytes")))
                }
                Some(Stored::File(p)) => p.clone(),
            }
        };
        match fs::read(&path) {
            Ok(b) => Ok(b),
            Err(e) if e.kind() == io::ErrorKind::NotFound => Err(Error::NotFound(id.to_hex())),
            Err(e) => Err(Error::Storage(format!("{}: {e}", path.display()))),
        }
    }

    pub fn get_weights(&self, id: &DataId) -> Result<ModelWeights> {
        ModelWeights::from_bytes(&self.get(id)?)
    }

    pub fn get_handle(&self, id: &DataId) -> Result<ModelHandle> {
        let entries = self.entries.read().unwrap();
        match entries.get(id).map(|e| &e.stored) {
            Some(Stored::Handle(h)) => Ok(h.clone()),
            Some(_) => Err(Error::Storage(format!("{id} does not hold a live handle"))),
            None => Err(Error::NotFound(id.to_hex())),
        }
    }

    pub fn location(&self, id: &DataId) -> Result<Location> {
        self.entries
            .read()
            .unwrap()
            .get(id)
            .map(|e| e.location.clone())
            .ok_or_else(|| Error::NotFound(id.to_hex()))
    }

    pub fn contains(&self, id: &DataId) -> bool {
        self.entries.read().unwrap().contains_key(id)
    }

    /// Removes an entry. Deleting an unknown id is not an error.
    pub fn delete(&self, id: &DataId) {
        let removed = self.entries.write().unwrap().remove(id);
        if let Some(Entry {
            stored: Stored::File(p),
            ..
        }) = removed
        {
            let _ = fs::remove_file(p);
        }
    }

    pub fn len(&self) -> usize {
        self.entries.read().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn write_atomic(dir: &Path, id: &DataId, payload: &[u8]) -> Result<PathBuf> {
    let target = dir.join(id.to_hex());
    let tmp = dir.join(format!(".{}.{}.tmp", id.to_hex(), DataId::random()));
    fs::write(&tmp, payload).map_err(|e| Error::Storage(format!("{}: {e}", tmp.display())))?;
    fs::rename(&tmp, &target).map_err(|e| Error::Storage(format!("{}: {e}", target.display())))?;
    Ok(target)
}

#[cfg(test)]
mod tests {
    use std::collections::HashSet;

    use super::*;

    #[test]
    fn roundtrip_on_both_backends() {
        let dir = tempfile::tempdir().unwrap();
        let wh = Warehouse::in_memory();
        let file = BackendKind::File(dir.path().to_path_buf());
        for backend in [BackendKind::Memory, file] {
            let id = wh.put_bytes(b"payload", &backend).unwrap();
            assert_eq!(wh.get(&id).unwrap(), b"payload");
            assert_eq!(wh.location(&id).unwrap().backend, backend);
        }
    }

    #[test]
    fn identical_payloads_get_distinct_ids() {
        let wh = Warehouse::in_memory();
        let a = wh.put_bytes(b"x", &BackendKind::Memory).unwrap();
        let b = wh.put_bytes(b"x", &BackendKind::Memory).unwrap();
        assert_ne!(a, b);
    }

    #[test]
    fn ten_thousand_puts_never_collide() {
        let wh = Warehouse::in_memory();
        let mut seen = HashSet::new();
        for _ in 0..10_000 {
            assert!(seen.insert(wh.put_bytes(&[], &BackendKind::Memory).unwrap()));
        }
        assert_eq!(wh.len(), 10_000);
    }

    #[test]
    fn delete_is_idempotent() {
        let wh = Warehouse::in_memory();
        wh.delete(&DataId::random());
        let id = wh.put_bytes(b"abc", &BackendKind::Memory).unwrap();
        wh.delete(&id);
        wh.delete(&id);
        assert!(matches!(wh.get(&id), Err(Error::NotFound(_))));
    }

    #[test]
    fn unknown_id_is_not_found() {
        let wh = Warehouse::in_memory();
        assert!(matches!(wh.get(&DataId::random()), Err(Error::NotFound(_))));
    }

    #[test]
    fn handles_are_kept_by_reference() {
        let wh = Warehouse::in_memory();
        let handle: ModelHandle = Arc::new(42u32);
        let id = wh.put_handle(handle.clone());
        let back = wh.get_handle(&id).unwrap();
        assert!(Arc::ptr_eq(&handle, &back));
        assert_eq!(back.downcast_ref::<u32>(), Some(&42));
        assert!(wh.get(&id).is_err());
    }

    #[test]
    fn data_id_text_form() {
        let id = DataId::from_bytes([0xab; 16]);
        assert_eq!(id.to_hex(), "ab".repeat(16));
        assert_eq!(id.to_hex().parse::<DataId>().unwrap(), id);
        assert!("AB".repeat(16).parse::<DataId>().is_err());
        assert!("abc".parse::<DataId>().is_err());
    }

    #[test]
    fn address_validation() {
        assert!(Address::new("localhost", 0).is_err());
        assert!(Address::new("", 80).is_err());
        let a: Address = "127.0.0.1:9000".parse().unwrap();
        assert_eq!(a.port, 9000);
        assert!("nohost".parse::<Address>().is_err());
    }
}
