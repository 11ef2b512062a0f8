//! Listening and sending plumbing shared by the server and worker hosts.
//!
//! Every message travels on its own short TCP connection to the recipient's
//! message port. Weights never ride in frames; they move over the blob port
//! under a one-time credential.

use std::fmt;
use std::io::{BufReader, Write};
use std::net::{Shutdown, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use crate::clock::{Clock, SystemClock};
use crate::error::Result;
use crate::protocol::blob::{serve_blobs, BlobService, DEFAULT_TTL_SECS};
use crate::protocol::dispatch::Dispatcher;
use crate::protocol::frame::{encode_frame, encode_raw, parse_frame, read_raw, Message};
use crate::protocol::net::{self, ListenerHandle};
use crate::warehouse::{Address, Warehouse};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TapDirection {
    Sent,
    Received,
}

/// Observer called with the full bytes of every frame an endpoint sends or
/// receives.
pub type FrameTap = Arc<dyn Fn(TapDirection, &[u8]) + Send + Sync>;

/// Addresses and storage options for one participant.
#[derive(Clone)]
pub struct EndpointConfig {
    pub host: String,
    /// Message port; 0 picks a free one.
    pub port: u16,
    /// Blob port; 0 picks a free one.
    pub blob_port: u16,
    pub credential_ttl: f64,
    /// Directory for stored weights; in memory when unset.
    pub storage_dir: Option<PathBuf>,
    pub clock: Arc<dyn Clock>,
    pub tap: Option<FrameTap>,
}

impl Default for EndpointConfig {
    fn default() -> Self {
        Self {
            host: "127.0.0.1".into(),
            port: 0,
            blob_port: 0,
            credential_ttl: DEFAULT_TTL_SECS,
            storage_dir: None,
            clock: Arc::new(SystemClock::new()),
            tap: None,
        }
    }
}

impl fmt::Debug for EndpointConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EndpointConfig")
            .field("host", &self.host)
            .field("port", &self.port)
            .field("blob_port", &self.blob_port)
            .field("credential_ttl", &self.credential_ttl)
            .field("storage_dir", &self.storage_dir)
            .finish_non_exhaustive()
    }
}

/// Sends single frames, reporting each to the tap.
#[derive(Clone, Default)]
pub struct Messenger {
    tap: Option<FrameTap>,
}

impl Messenger {
    pub fn new(tap: Option<FrameTap>) -> Self {
        Self { tap }
    }

    pub fn send(&self, to: &Address, msg: &Message) -> Result<()> {
        let bytes = encode_frame(msg)?;
        if let Some(tap) = &self.tap {
            tap(TapDirection::Sent, &bytes);
        }
        let mut stream = net::connect(&to.socket_string())?;
        stream.write_all(&bytes)?;
        stream.flush()?;
        let _ = stream.shutdown(Shutdown::Write);
        Ok(())
    }
}

/// Listeners bound but not yet serving.
pub struct BoundEndpoint {
    pub address: Address,
    pub warehouse: Arc<Warehouse>,
    pub blobs: Arc<BlobService>,
    pub messenger: Messenger,
    tap: Option<FrameTap>,
    messages: TcpListener,
    blob_listener: TcpListener,
}

/// A participant's running listeners.
pub struct Endpoint {
    pub address: Address,
    pub warehouse: Arc<Warehouse>,
    pub blobs: Arc<BlobService>,
    pub messenger: Messenger,
    message_handle: ListenerHandle,
    blob_handle: ListenerHandle,
}

impl BoundEndpoint {
    pub fn bind(cfg: &EndpointConfig) -> Result<Self> {
        let messages = TcpListener::bind((cfg.host.as_str(), cfg.port))?;
        let blob_listener = TcpListener::bind((cfg.host.as_str(), cfg.blob_port))?;
        let address = Address::new(cfg.host.clone(), messages.local_addr()?.port())?;
        let blob_address = Address::new(cfg.host.clone(), blob_listener.local_addr()?.port())?;
        let warehouse = Arc::new(match &cfg.storage_dir {
            Some(dir) => Warehouse::with_file_dir(dir)?,
            None => Warehouse::in_memory(),
        });
        let blobs = Arc::new(BlobService::new(
            warehouse.clone(),
            blob_address,
            cfg.clock.clone(),
            cfg.credential_ttl,
        ));
        Ok(Self {
            address,
            warehouse,
            blobs,
            messenger: Messenger::new(cfg.tap.clone()),
            tap: cfg.tap.clone(),
            messages,
            blob_listener,
        })
    }

    /// Starts serving frames through `dispatcher` and blobs through the
    /// endpoint's blob service.
    pub fn serve(self, dispatcher: Dispatcher) -> Result<Endpoint> {
        let dispatcher = Arc::new(dispatcher);
        let tap = self.tap.clone();
        let message_handle = net::spawn_listener(self.messages, "message-listener", move |stream| {
            serve_frames(stream, &dispatcher, tap.as_ref())
        })?;
        let blob_handle = serve_blobs(self.blobs.clone(), self.blob_listener)?;
        Ok(Endpoint {
            address: self.address,
            warehouse: self.warehouse,
            blobs: self.blobs,
            messenger: self.messenger,
            message_handle,
            blob_handle,
        })
    }
}

fn serve_frames(stream: TcpStream, dispatcher: &Dispatcher, tap: Option<&FrameTap>) {
    let _ = stream.set_read_timeout(Some(Duration::from_secs(30)));
    let peer = stream.peer_addr().ok();
    let mut reader = BufReader::new(stream);
    loop {
        let frame = match read_raw(&mut reader) {
            Ok(Some(f)) => f,
            Ok(None) => return,
            Err(e) => {
                log::debug!("dropping connection from {peer:?}: {e}");
                return;
            }
        };
        if let Some(tap) = tap {
            if let Ok(bytes) = encode_raw(&frame.topic, &frame.body) {
                tap(TapDirection::Received, &bytes);
            }
        }
        match parse_frame(&frame) {
            Ok(msg) => {
                if let Err(e) = dispatcher.dispatch(msg) {
                    log::warn!("handler failed: {e}");
                }
            }
            Err(e) => log::warn!("ignoring frame from {peer:?}: {e}"),
        }
    }
}

impl Endpoint {
    pub fn blob_address(&self) -> &Address {
        self.blobs.address()
    }

    pub fn stop(&mut self) {
        self.message_handle.stop();
        self.blob_handle.stop();
    }
}
