//! Participant messaging and model transfer.

pub mod blob;
pub mod dispatch;
pub mod frame;
pub mod net;

pub use blob::{blob_fetch, serve_blobs, BlobService, RejectReason, TransferCredential};
pub use dispatch::{Dispatcher, MessageHandler};
pub use frame::{decode_frame, encode_frame, encode_raw, Message, RawFrame, Topic};
