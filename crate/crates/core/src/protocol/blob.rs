//! One-time-token blob transfer.
//!
//! A host offers a warehouse entry and gets back a credential carrying a
//! random token. The fetcher connects to the blob port and sends the 32 ASCII
//! hex characters of the token. The reply is either `0x01`, an 8-byte
//! big-endian length and the payload, or `0x00` followed by a one-byte
//! reason code. A token is consumed by the first successful lookup.

use std::collections::HashMap;
use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use crate::clock::Clock;
use crate::error::{Error, Result};
use crate::protocol::net::{self, ListenerHandle};
use crate::warehouse::{Address, DataId, Warehouse};

pub const TOKEN_LEN: usize = 32;
pub const DEFAULT_TTL_SECS: f64 = 60.0;

const STATUS_OK: u8 = 0x01;
const STATUS_FAIL: u8 = 0x00;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum RejectReason {
    UnknownToken = 1,
    Expired = 2,
    ResourceGone = 3,
    Malformed = 4,
}

impl RejectReason {
    pub fn from_code(code: u8) -> Option<Self> {
        match code {
            1 => Some(Self::UnknownToken),
            2 => Some(Self::Expired),
            3 => Some(Self::ResourceGone),
            4 => Some(Self::Malformed),
            _ => None,
        }
    }

    fn describe(self) -> &'static str {
        match self {
            Self::UnknownToken => "unknown or already used token",
            Self::Expired => "token expired",
            Self::ResourceGone => "resource no longer stored",
            Self::Malformed => "malformed request",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransferCredential {
    pub address: Address,
    pub resource: DataId,
    pub token: String,
    pub single_use: bool,
}

struct Grant {
    resource: DataId,
    expires_at: f64,
}

/// Token registry in front of a warehouse.
pub struct BlobService {
    warehouse: Arc<Warehouse>,
    address: Address,
    clock: Arc<dyn Clock>,
    ttl: f64,
    grants: Mutex<HashMap<String, Grant>>,
}

impl BlobService {
    pub fn new(warehouse: Arc<Warehouse>, address: Address, clock: Arc<dyn Clock>, ttl: f64) -> Self {
        Self {
            warehouse,
            address,
            clock,
            ttl,
            grants: Mutex::new(HashMap::new()),
        }
    }

    pub fn address(&self) -> &Address {
        &self.address
    }

    pub fn warehouse(&self) -> &Arc<Warehouse> {
        &self.warehouse
    }

    /// Issues a fresh single-use credential for a stored entry.
    pub fn offer(&self, id: &DataId) -> Result<TransferCredential> {
        if !self.warehouse.contains(id) {
            return Err(Error::NotFound(id.to_hex()));
        }
        let token = hex::encode(rand::random::<[u8; 16]>());
        self.grants.lock().unwrap().insert(
            token.clone(),
            Grant {
                resource: *id,
                expires_at: self.clock.now() + self.ttl,
            },
        );
        Ok(TransferCredential {
            address: self.address.clone(),
            resource: *id,
            token,
            single_use: true,
        })
    }

    /// Consumes `token` and returns the bytes it grants. The token is gone
    /// after this call whether or not it had expired.
    pub fn redeem(&self, token: &str) -> std::result::Result<Vec<u8>, RejectReason> {
        let grant = self
            .grants
            .lock()
            .unwrap()
            .remove(token)
            .ok_or(RejectReason::UnknownToken)?;
        if self.clock.now() > grant.expires_at {
            return Err(RejectReason::Expired);
        }
        self.warehouse
            .get(&grant.resource)
            .map_err(|_| RejectReason::ResourceGone)
    }

    pub fn outstanding(&self) -> usize {
        self.grants.lock().unwrap().len()
    }

    fn serve_connection(&self, mut stream: TcpStream) {
        let _ = stream.set_read_timeout(Some(Duration::from_secs(10)));
        let mut token = [0u8; TOKEN_LEN];
        let reply = match stream.read_exact(&mut token) {
            Ok(()) => match std::str::from_utf8(&token) {
                Ok(t) => self.redeem(t),
                Err(_) => Err(RejectReason::Malformed),
            },
            Err(_) => Err(RejectReason::Malformed),
        };
        let result = match reply {
            Ok(bytes) => {
                let mut head = [0u8; 9];
                head[0] = STATUS_OK;
                head[1..].copy_from_slice(&(bytes.len() as u64).to_be_bytes());
                stream.write_all(&head).and_then(|_| stream.write_all(&bytes))
            }
            Err(reason) => {
                log::debug!("blob request rejected: {}", reason.describe());
                stream.write_all(&[STATUS_FAIL, reason as u8])
            }
        };
        if let Err(e) = result.and_then(|_| stream.flush()) {
            log::warn!("blob reply failed: {e}");
        }
    }
}

/// Serves blob requests on `listener` until the handle is stopped.
pub fn serve_blobs(service: Arc<BlobService>, listener: TcpListener) -> Result<ListenerHandle> {
    Ok(net::spawn_listener(listener, "blob-listener", move |stream| {
        service.serve_connection(stream)
    })?)
}

/// Downloads the blob a credential grants.
pub fn blob_fetch(cred: &TransferCredential) -> Result<Vec<u8>> {
    if cred.token.len() != TOKEN_LEN {
        return Err(Error::CredentialRejected("token must be 32 hex chars".into()));
    }
    let mut stream = net::connect(&cred.address.socket_string())?;
    stream.set_read_timeout(Some(Duration::from_secs(30)))?;
    stream.write_all(cred.token.as_bytes())?;
    stream.flush()?;
    let mut status = [0u8; 1];
    stream.read_exact(&mut status)?;
    match status[0] {
        STATUS_OK => {
            let mut len = [0u8; 8];
            stream.read_exact(&mut len)?;
            let len = u64::from_be_bytes(len) as usize;
            let mut body = vec![0u8; len];
            stream.read_exact(&mut body)?;
            Ok(body)
        }
        STATUS_FAIL => {
            let mut code = [0u8; 1];
            stream.read_exact(&mut code)?;
            let why = RejectReason::from_code(code[0])
                .map(RejectReason::describe)
                .unwrap_or("unknown reason");
            Err(Error::CredentialRejected(why.to_string()))
        }
        other => Err(Error::Parse(format!("unexpected blob status byte {other:#04x}"))),
    }
}
