//! Length-prefixed, topic-tagged frames.
//!
//! Layout: a 4-byte big-endian payload length, then the payload, which is
//! five ASCII topic bytes followed by a UTF-8 JSON body. The body's `action`
//! field picks the message variant within its topic.

use std::fmt;
use std::io::{self, Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::protocol::blob::TransferCredential;
use crate::warehouse::ModelPointer;

pub const TOPIC_LEN: usize = 5;
pub const MAX_BODY: usize = 1 << 24;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Topic {
    Relat,
    Train,
    Model,
}

impl Topic {
    pub const ALL: [Topic; 3] = [Topic::Relat, Topic::Train, Topic::Model];

    pub fn as_bytes(self) -> &'static [u8; TOPIC_LEN] {
        match self {
            Topic::Relat => b"RELAT",
            Topic::Train => b"TRAIN",
            Topic::Model => b"MODEL",
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Topic> {
        match bytes {
            b"RELAT" => Ok(Topic::Relat),
            b"TRAIN" => Ok(Topic::Train),
            b"MODEL" => Ok(Topic::Model),
            other => Err(Error::UnknownTopic(String::from_utf8_lossy(other).into_owned())),
        }
    }
}

impl fmt::Display for Topic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(std::str::from_utf8(self.as_bytes()).unwrap())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "action", rename_all = "snake_case")]
pub enum Message {
    // RELAT
    AddWorkerRequest {
        server_pointer: ModelPointer,
    },
    WorkerReady {
        worker_pointer: ModelPointer,
        server_pointer: ModelPointer,
        data_count: u64,
        #[serde(default = "unit")]
        cpu_freq: f64,
        #[serde(default = "unit")]
        cpu_prop: f64,
    },
    // TRAIN
    TrainRequest {
        worker_pointer: ModelPointer,
        server_pointer: ModelPointer,
        epochs: u32,
        server_version: u64,
    },
    TrainDone {
        worker_pointer: ModelPointer,
        server_pointer: ModelPointer,
        server_version: u64,
        epochs_trained: u32,
        train_seconds: f64,
    },
    TrainRefused {
        worker_pointer: ModelPointer,
        server_pointer: ModelPointer,
        reason: String,
    },
    // MODEL
    FetchRequest {
        target_pointer: ModelPointer,
        requester_pointer: ModelPointer,
    },
    FetchCredential {
        credential: TransferCredential,
        target_pointer: ModelPointer,
        requester_pointer: ModelPointer,
        server_version: u64,
    },
}

fn unit() -> f64 {
    1.0
}

impl Message {
    pub fn topic(&self) -> Topic {
        match self {
            Message::AddWorkerRequest { .. } | Message::WorkerReady { .. } => Topic::Relat,
            Message::TrainRequest { .. } | Message::TrainDone { .. } | Message::TrainRefused { .. } => {
                Topic::Train
            }
            Message::FetchRequest { .. } | Message::FetchCredential { .. } => Topic::Model,
        }
    }
}

/// Frame payload before the body is interpreted.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct RawFrame {
    pub topic: [u8; TOPIC_LEN],
    pub body: Vec<u8>,
}

/// Result of trying to cut one frame off the front of a buffer.
#[derive(Debug, PartialEq, Eq)]
pub enum Decoded {
    /// At least this many more bytes are needed.
    NeedMore(usize),
    Frame {
        frame: RawFrame,
        consumed: usize,
    },
}

pub fn encode_raw(topic: &[u8; TOPIC_LEN], body: &[u8]) -> Result<Vec<u8>> {
    if body.len() > MAX_BODY {
        return Err(Error::MessageTooLarge(body.len()));
    }
    let len = (TOPIC_LEN + body.len()) as u32;
    let mut out = Vec::with_capacity(4 + len as usize);
    out.extend_from_slice(&len.to_be_bytes());
    out.extend_from_slice(topic);
    out.extend_from_slice(body);
    Ok(out)
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>> {
    let body = serde_json::to_vec(msg).map_err(|e| Error::Parse(e.to_string()))?;
    encode_raw(msg.topic().as_bytes(), &body)
}

pub fn decode_raw(buf: &[u8]) -> Result<Decoded> {
    if buf.len() < 4 {
        return Ok(Decoded::NeedMore(4 - buf.len()));
    }
    let len = u32::from_be_bytes(buf[..4].try_into().unwrap()) as usize;
    if len < TOPIC_LEN {
        return Err(Error::Parse(format!(
            "frame length {len} is shorter than a topic"
        )));
    }
    if len - TOPIC_LEN > MAX_BODY {
        return Err(Error::MessageTooLarge(len - TOPIC_LEN));
    }
    if buf.len() < 4 + len {
        return Ok(Decoded::NeedMore(4 + len - buf.len()));
    }
    let mut topic = [0u8; TOPIC_LEN];
    topic.copy_from_slice(&buf[4..4 + TOPIC_LEN]);
    Ok(Decoded::Frame {
        frame: RawFrame {
            topic,
            body: buf[4 + TOPIC_LEN..4 + len].to_vec(),
        },
        consumed: 4 + len,
    })
}

/// Interprets a complete raw frame. The action must belong to the topic it
/// arrived under.
pub fn parse_frame(frame: &RawFrame) -> Result<Message> {
    let topic = Topic::from_bytes(&frame.topic)?;
    let body = std::str::from_utf8(&frame.body).map_err(|e| Error::Parse(e.to_string()))?;
    let msg: Message = serde_json::from_str(body).map_err(|e| Error::Parse(e.to_string()))?;
    if msg.topic() != topic {
        return Err(Error::Parse(format!(
            "action belongs to {} but arrived under {topic}",
            msg.topic()
        )));
    }
    Ok(msg)
}

/// Decodes one message from the front of `buf`. `Ok(None)` means the frame
/// is incomplete and the caller should retry with more bytes.
pub fn decode_frame(buf: &[u8]) -> Result<Option<(Message, usize)>> {
    match decode_raw(buf)? {
        Decoded::NeedMore(_) => Ok(None),
        Decoded::Frame { frame, consumed } => Ok(Some((parse_frame(&frame)?, consumed))),
    }
}

/// Reads one raw frame from a stream. Returns `Ok(None)` on a clean EOF
/// between frames.
pub fn read_raw<R: Read>(reader: &mut R) -> io::Result<Option<RawFrame>> {
    let mut len_buf = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match reader.read(&mut len_buf[got..])? {
            0 if got == 0 => return Ok(None),
            0 => return Err(io::ErrorKind::UnexpectedEof.into()),
            n => got += n,
        }
    }
    let len = u32::from_be_bytes(len_buf) as usize;
    if len < TOPIC_LEN || len - TOPIC_LEN > MAX_BODY {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            format!("bad frame length {len}"),
        ));
    }
    let mut payload = vec![0u8; len];
    reader.read_exact(&mut payload)?;
    let mut topic = [0u8; TOPIC_LEN];
    topic.copy_from_slice(&payload[..TOPIC_LEN]);
    payload.drain(..TOPIC_LEN);
    Ok(Some(RawFrame { topic, body: payload }))
}

pub fn write_message<W: Write>(writer: &mut W, msg: &Message) -> Result<()> {
    let bytes = encode_frame(msg)?;
    writer.write_all(&bytes)?;
    writer.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::warehouse::{Address, DataId};

    fn ptr(port: u16) -> ModelPointer {
        ModelPointer::new(
            Address::new("127.0.0.1", port).unwrap(),
            DataId::from_bytes([port as u8; 16]),
        )
    }

    #[test]
    fn relat_fixture_bytes() {
        let bytes = encode_raw(b"RELAT", b"{}").unwrap();
        assert_eq!(
            bytes,
            [0x00, 0x00, 0x00, 0x07, 0x52, 0x45, 0x4C, 0x41, 0x54, 0x7B, 0x7D]
        );
    }

    #[test]
    fn body_size_boundary() {
        let body = vec![b' '; MAX_BODY + 1];
        assert!(matches!(
            encode_raw(b"TRAIN", &body),
            Err(Error::MessageTooLarge(_))
        ));
        assert!(encode_raw(b"TRAIN", &body[..MAX_BODY]).is_ok());
    }

    #[test]
    fn unknown_topic_is_reported() {
        let bytes = encode_raw(b"XXXXX", b"{}").unwrap();
        assert!(matches!(decode_frame(&bytes), Err(Error::UnknownTopic(t)) if t == "XXXXX"));
    }

    #[test]
    fn truncated_prefix_asks_for_more() {
        let msg = Message::AddWorkerRequest {
            server_pointer: ptr(1),
        };
        let bytes = encode_frame(&msg).unwrap();
        assert_eq!(decode_raw(&bytes[..2]).unwrap(), Decoded::NeedMore(2));
        assert!(decode_frame(&bytes[..2]).unwrap().is_none());
        assert!(decode_frame(&bytes[..bytes.len() - 1]).unwrap().is_none());
        let (back, used) = decode_frame(&bytes).unwrap().unwrap();
        assert_eq!(back, msg);
        assert_eq!(used, bytes.len());
    }

    #[test]
    fn train_request_fixture() {
        let msg = Message::TrainRequest {
            worker_pointer: ptr(2),
            server_pointer: ptr(3),
            epochs: 10,
            server_version: 4,
        };
        let bytes = encode_frame(&msg).unwrap();
        assert_eq!(&bytes[4..9], b"TRAIN");
        assert_eq!(decode_frame(&bytes).unwrap().unwrap().0, msg);
    }

    #[test]
    fn malformed_body_and_topic_mismatch() {
        let bytes = encode_raw(b"RELAT", b"not json").unwrap();
        assert!(matches!(decode_frame(&bytes), Err(Error::Parse(_))));
        let body = serde_json::to_vec(&Message::AddWorkerRequest {
            server_pointer: ptr(1),
        })
        .unwrap();
        let bytes = encode_raw(b"MODEL", &body).unwrap();
        assert!(matches!(decode_frame(&bytes), Err(Error::Parse(_))));
    }

    #[test]
    fn stream_reader_survives_consecutive_frames() {
        let a = Message::AddWorkerRequest {
            server_pointer: ptr(1),
        };
        let mut bytes = encode_frame(&a).unwrap();
        bytes.extend(encode_raw(b"XXXXX", b"{}").unwrap());
        bytes.extend(encode_frame(&a).unwrap());
        let mut cursor = std::io::Cursor::new(bytes);
        let f1 = read_raw(&mut cursor).unwrap().unwrap();
        assert_eq!(parse_frame(&f1).unwrap(), a);
        let f2 = read_raw(&mut cursor).unwrap().unwrap();
        assert!(parse_frame(&f2).is_err());
        let f3 = read_raw(&mut cursor).unwrap().unwrap();
        assert_eq!(parse_frame(&f3).unwrap(), a);
        assert!(read_raw(&mut cursor).unwrap().is_none());
    }
}
