//! Framed wire protocol between the inference and training processes.
//!
//! ```text
//! frame := "CGO1" | type: u8 | length: u32 | body[length]
//! 0x01 HELLO      proto_version: u16 | model_hash: [u8; 32] | d_base: u32
//!                 | n_depths: u8 | depths: u8 × n_depths | bits: u8
//! 0x02 HELLO_ACK  accepted: u8
//! 0x03 BATCH      batch_id: u64 | n: u32 | token_ids: u32 × n | block*
//!      block      depth: u8 | b: u8 | b == 0: f64 × (n·d)
//!                                   | b >  0: scales: f64 × n | packed codes
//! 0x04 BATCH_ACK  batch_id: u64
//! 0x05 END
//! ```
//! Little-endian throughout. Blocks run to the end of the body; a BATCH with
//! no blocks is a request for taps. Decoding blocks needs `d_base` from the
//! handshake.

use std::io::{ErrorKind, Read, Write};

use super::quant::{check_bits, QuantizedBlock};
use crate::error::{Error, Result};
use crate::numcore::Float;

pub const MAGIC: &[u8; 4] = b"CGO1";
pub const PROTO_VERSION: u16 = 1;
pub const HEADER_LEN: usize = 9;
/// Frames longer than this are treated as a malformed length.
pub const MAX_FRAME_LEN: u32 = 64 << 20;

pub const T_HELLO: u8 = 0x01;
pub const T_HELLO_ACK: u8 = 0x02;
pub const T_BATCH: u8 = 0x03;
pub const T_BATCH_ACK: u8 = 0x04;
pub const T_END: u8 = 0x05;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum ProtocolError {
    #[error("bad frame magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("unknown message type 0x{0:02x}")]
    UnknownType(u8),
    #[error("frame length {0} exceeds the {MAX_FRAME_LEN}-byte limit")]
    FrameTooLarge(u32),
    #[error("truncated frame: needed {needed} bytes, had {available}")]
    Truncated { needed: usize, available: usize },
    #[error("malformed {msg} body: {reason}")]
    Malformed { msg: &'static str, reason: String },
    #[error("handshake failed: {0}")]
    Handshake(String),
    #[error("unexpected {got} while expecting {expected}")]
    Unexpected {
        expected: &'static str,
        got: &'static str,
    },
    #[error("connection closed by peer")]
    Closed,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Hello {
    pub proto_version: u16,
    pub model_hash: [u8; 32],
    pub d_base: u32,
    pub depths: Vec<u8>,
    pub bits: u8,
}

/// One depth's payload inside a BATCH.
#[derive(Clone, Debug, PartialEq)]
pub struct TapBlock {
    pub depth: u8,
    pub block: QuantizedBlock,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub batch_id: u64,
    pub token_ids: Vec<u32>,
    pub blocks: Vec<TapBlock>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Message {
    Hello(Hello),
    HelloAck { accepted: bool },
    Batch(Batch),
    BatchAck { batch_id: u64 },
    End,
}

impl Message {
    pub fn type_byte(&self) -> u8 {
        match self {
            Message::Hello(_) => T_HELLO,
            Message::HelloAck { .. } => T_HELLO_ACK,
            Message::Batch(_) => T_BATCH,
            Message::BatchAck { .. } => T_BATCH_ACK,
            Message::End => T_END,
        }
    }

    pub fn kind(&self) -> &'static str {
        kind_name(self.type_byte())
    }
}

fn kind_name(t: u8) -> &'static str {
    match t {
        T_HELLO => "HELLO",
        T_HELLO_ACK => "HELLO_ACK",
        T_BATCH => "BATCH",
        T_BATCH_ACK => "BATCH_ACK",
        T_END => "END",
        _ => "unknown",
    }
}

fn put_f64s(out: &mut Vec<u8>, xs: &[Float]) {
    for &x in xs {
        out.extend_from_slice(&(x as f64).to_le_bytes());
    }
}

pub fn encode_frame(msg: &Message) -> Result<Vec<u8>> {
    let mut body = Vec::new();
    match msg {
        Message::Hello(h) => {
            if h.depths.len() > u8::MAX as usize {
                return Err(Error::config("too many depths for one session"));
            }
            body.extend_from_slice(&h.proto_version.to_le_bytes());
            body.extend_from_slice(&h.model_hash);
            body.extend_from_slice(&h.d_base.to_le_bytes());
            body.push(h.depths.len() as u8);
            body.extend_from_slice(&h.depths);
            body.push(h.bits);
        }
        Message::HelloAck { accepted } => body.push(u8::from(*accepted)),
        Message::Batch(b) => {
            let n = b.token_ids.len();
            if n == 0 {
                return Err(Error::data("BATCH must carry at least one token"));
            }
            body.extend_from_slice(&b.batch_id.to_le_bytes());
            body.extend_from_slice(&(n as u32).to_le_bytes());
            for &t in &b.token_ids {
                body.extend_from_slice(&t.to_le_bytes());
            }
            for tb in &b.blocks {
                let q = &tb.block;
                if q.rows() != n {
                    return Err(Error::dim("BATCH block", &[q.rows()], &[n]));
                }
                body.push(tb.depth);
                body.push(q.bits());
                if q.bits() == 0 {
                    put_f64s(&mut body, q.raw());
                } else {
                    put_f64s(&mut body, q.scales());
                    body.extend_from_slice(&q.packed_codes());
                }
            }
        }
        Message::BatchAck { batch_id } => body.extend_from_slice(&batch_id.to_le_bytes()),
        Message::End => {}
    }
    if body.len() > MAX_FRAME_LEN as usize {
        return Err(Error::data(format!("frame of {} bytes is too large", body.len())));
    }
    let mut out = Vec::with_capacity(HEADER_LEN + body.len());
    out.extend_from_slice(MAGIC);
    out.push(msg.type_byte());
    out.extend_from_slice(&(body.len() as u32).to_le_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

/// Validates a header and returns `(type, body length)`.
pub fn parse_header(h: &[u8; HEADER_LEN]) -> std::result::Result<(u8, u32), ProtocolError> {
    let magic: [u8; 4] = h[..4].try_into().expect("4 bytes");
    if &magic != MAGIC {
        return Err(ProtocolError::BadMagic(magic));
    }
    let t = h[4];
    if !(T_HELLO..=T_END).contains(&t) {
        return Err(ProtocolError::UnknownType(t));
    }
    let len = u32::from_le_bytes(h[5..9].try_into().expect("4 bytes"));
    if len > MAX_FRAME_LEN {
        return Err(ProtocolError::FrameTooLarge(len));
    }
    Ok((t, len))
}

struct Body<'a> {
    msg: &'static str,
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Body<'a> {
    fn malformed(&self, reason: impl Into<String>) -> ProtocolError {
        ProtocolError::Malformed {
            msg: self.msg,
            reason: reason.into(),
        }
    }

    fn take(&mut self, n: usize) -> std::result::Result<&'a [u8], ProtocolError> {
        if self.buf.len() - self.pos < n {
            return Err(self.malformed(format!(
                "needs {n} more bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> std::result::Result<u8, ProtocolError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> std::result::Result<u32, ProtocolError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4")))
    }

    fn u64(&mut self) -> std::result::Result<u64, ProtocolError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8")))
    }

    fn f64s(&mut self, n: usize) -> std::result::Result<Vec<Float>, ProtocolError> {
        let bytes = n
            .checked_mul(8)
            .ok_or_else(|| self.malformed("length overflow"))?;
        let raw = self.take(bytes)?;
        Ok(raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8")) as Float)
            .collect())
    }

    fn done(&self) -> bool {
        self.pos == self.buf.len()
    }

    fn finish(&self) -> std::result::Result<(), ProtocolError> {
        if self.done() {
            Ok(())
        } else {
            Err(self.malformed(format!("{} trailing bytes", self.buf.len() - self.pos)))
        }
    }
}

/// Decode one body. `d_base` is required when a BATCH carries blocks.
pub fn decode_body(t: u8, body: &[u8], d_base: Option<usize>) -> std::result::Result<Message, ProtocolError> {
    let mut b = Body {
        msg: kind_name(t),
        buf: body,
        pos: 0,
    };
    let msg = match t {
        T_HELLO => {
            let proto_version = u16::from_le_bytes(b.take(2)?.try_into().expect("2"));
            let model_hash: [u8; 32] = b.take(32)?.try_into().expect("32");
            let d_base = b.u32()?;
            let nd = b.u8()? as usize;
            let depths = b.take(nd)?.to_vec();
            let bits = b.u8()?;
            Message::Hello(Hello {
                proto_version,
                model_hash,
                d_base,
                depths,
                bits,
            })
        }
        T_HELLO_ACK => match b.u8()? {
            0 => Message::HelloAck { accepted: false },
            1 => Message::HelloAck { accepted: true },
            v => return Err(b.malformed(format!("accepted flag {v}"))),
        },
        T_BATCH => {
            let batch_id = b.u64()?;
            let n = b.u32()? as usize;
            if n == 0 {
                return Err(b.malformed("empty token sequence"));
            }
            let ids = b.take(n.checked_mul(4).ok_or_else(|| b.malformed("length overflow"))?)?;
            let token_ids = ids
                .chunks_exact(4)
                .map(|c| u32::from_le_bytes(c.try_into().expect("4")))
                .collect();
            let mut blocks = Vec::new();
            while !b.done() {
                let d = d_base.ok_or_else(|| b.malformed("blocks received before handshake"))?;
                let depth = b.u8()?;
                let bits = b.u8()?;
                check_bits(bits).map_err(|_| b.malformed(format!("bits {bits}")))?;
                let block = if bits == 0 {
                    let raw = b.f64s(n * d)?;
                    QuantizedBlock::from_raw(n, d, raw)
                } else {
                    let scales = b.f64s(n)?;
                    let len = n * QuantizedBlock::packed_row_bytes(bits, d);
                    let packed = b.take(len)?;
                    QuantizedBlock::from_packed(bits, n, d, scales, packed)
                }
                .map_err(|e| b.malformed(e.to_string()))?;
                blocks.push(TapBlock { depth, block });
            }
            Message::Batch(Batch {
                batch_id,
                token_ids,
                blocks,
            })
        }
        T_BATCH_ACK => Message::BatchAck { batch_id: b.u64()? },
        T_END => Message::End,
        other => return Err(ProtocolError::UnknownType(other)),
    };
    b.finish()?;
    Ok(msg)
}

/// Decode one complete frame from the front of `bytes`; returns the message
/// and the number of bytes consumed.
pub fn decode_frame(bytes: &[u8], d_base: Option<usize>) -> std::result::Result<(Message, usize), ProtocolError> {
    if bytes.len() < HEADER_LEN {
        return Err(ProtocolError::Truncated {
            needed: HEADER_LEN,
            available: bytes.len(),
        });
    }
    let (t, len) = parse_header(bytes[..HEADER_LEN].try_into().expect("header"))?;
    let total = HEADER_LEN + len as usize;
    if bytes.len() < total {
        return Err(ProtocolError::Truncated {
            needed: total,
            available: bytes.len(),
        });
    }
    Ok((decode_body(t, &bytes[HEADER_LEN..total], d_base)?, total))
}

/// Fill `buf` completely; `Ok(false)` on a clean EOF before the first byte.
fn read_full<R: Read>(r: &mut R, buf: &mut [u8]) -> Result<bool> {
    let mut got = 0;
    while got < buf.len() {
        match r.read(&mut buf[got..]) {
            Ok(0) if got == 0 => return Ok(false),
            Ok(0) => {
                return Err(ProtocolError::Truncated {
                    needed: buf.len(),
                    available: got,
                }
                .into())
            }
            Ok(k) => got += k,
            Err(e) if e.kind() == ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(true)
}

/// Read one frame; returns the message and its size on the wire. A peer
/// closing between frames yields [`ProtocolError::Closed`].
pub fn read_message<R: Read>(r: &mut R, d_base: Option<usize>) -> Result<(Message, usize)> {
    let mut h = [0u8; HEADER_LEN];
    if !read_full(r, &mut h)? {
        return Err(ProtocolError::Closed.into());
    }
    let (t, len) = parse_header(&h)?;
    let mut body = vec![0u8; len as usize];
    if !body.is_empty() && !read_full(r, &mut body)? {
        return Err(ProtocolError::Truncated {
            needed: len as usize,
            available: 0,
        }
        .into());
    }
    Ok((decode_body(t, &body, d_base)?, HEADER_LEN + body.len()))
}

/// Write one frame; returns its size on the wire.
pub fn write_message<W: Write>(w: &mut W, msg: &Message) -> Result<usize> {
    let bytes = encode_frame(msg)?;
    w.write_all(&bytes)?;
    w.flush()?;
    Ok(bytes.len())
}

/// Server-side HELLO validation.
pub fn check_hello(
    h: &Hello,
    model_hash: &[u8; 32],
    d_base: usize,
    layers: usize,
) -> std::result::Result<(), ProtocolError> {
    if h.proto_version != PROTO_VERSION {
        return Err(ProtocolError::Handshake(format!(
            "protocol version {} (server speaks {PROTO_VERSION})",
            h.proto_version
        )));
    }
    if &h.model_hash != model_hash {
        return Err(ProtocolError::Handshake("base model hash mismatch".into()));
    }
    if h.d_base as usize != d_base {
        return Err(ProtocolError::Handshake(format!(
            "d_base {} (server model has {d_base})",
            h.d_base
        )));
    }
    if h.depths.is_empty() {
        return Err(ProtocolError::Handshake("no depths requested".into()));
    }
    if let Some(&d) = h.depths.iter().find(|&&d| d as usize > layers) {
        return Err(ProtocolError::Handshake(format!("depth {d} outside [0, {layers}]")));
    }
    check_bits(h.bits).map_err(|e| ProtocolError::Handshake(e.to_string()))?;
    Ok(())
}
