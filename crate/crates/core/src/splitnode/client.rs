//! The training client: taps arrive over the wire, everything else stays local.

use std::collections::HashMap;
use std::net::{TcpStream, ToSocketAddrs};
use std::thread;
use std::time::Duration;

use crate::basemodel::TokenSequence;
use crate::bridge::quant::check_bits;
use crate::bridge::wire::{read_message, write_message, Batch, Hello, Message, ProtocolError, PROTO_VERSION};
use crate::bridge::QuantizedBlock;
use crate::carryon::{save_bundle, CarryOn, TapSet};
use crate::error::{Error, Result};
use crate::trainer::source::{base_taps_from_blocks, TapSource};
use crate::trainer::train::{train_carryon, Corpora, TrainConfig, TrainReport};

use super::server::IO_TIMEOUT;

pub const DEFAULT_RETRIES: usize = 3;
pub const DEFAULT_BACKOFF: Duration = Duration::from_millis(100);

#[derive(Clone, Debug, PartialEq)]
pub struct SessionConfig {
    pub addr: String,
    pub proto_version: u16,
    /// Shallow depths first, then the deep tap.
    pub depths: Vec<usize>,
    pub bits: u8,
    pub model_hash: [u8; 32],
    pub d_base: usize,
    pub layers: usize,
    /// Longest input the served model accepts.
    pub max_seq: usize,
    pub retries: usize,
    pub backoff: Duration,
}

impl SessionConfig {
    /// Session for the carry-on's single base.
    pub fn for_carryon(addr: impl Into<String>, carry: &CarryOn, bits: u8, max_seq: usize) -> Result<Self> {
        check_bits(bits)?;
        if carry.bases().len() != 1 {
            return Err(Error::config("remote mode reads exactly one base"));
        }
        let b = &carry.bases()[0];
        Ok(Self {
            addr: addr.into(),
            proto_version: PROTO_VERSION,
            depths: carry.required_depths(0),
            bits,
            model_hash: b.hash,
            d_base: b.dim,
            layers: b.layers,
            max_seq,
            retries: DEFAULT_RETRIES,
            backoff: DEFAULT_BACKOFF,
        })
    }

    fn hello(&self) -> Hello {
        Hello {
            proto_version: self.proto_version,
            model_hash: self.model_hash,
            d_base: self.d_base as u32,
            depths: self.depths.iter().map(|&d| d as u8).collect(),
            bits: self.bits,
        }
    }

    fn shallow(&self) -> &[usize] {
        &self.depths[..self.depths.len() - 1]
    }
}

/// Faults worth a reconnect: the link went away, not the peer disagreeing.
fn retryable(e: &Error) -> bool {
    matches!(
        e,
        Error::Io(_) | Error::Protocol(ProtocolError::Closed) | Error::Protocol(ProtocolError::Truncated { .. })
    )
}

fn connect(cfg: &SessionConfig) -> Result<(TcpStream, u64)> {
    let addr = cfg
        .addr
        .to_socket_addrs()?
        .next()
        .ok_or_else(|| Error::config(format!("cannot resolve `{}`", cfg.addr)))?;
    let mut s = TcpStream::connect_timeout(&addr, IO_TIMEOUT)?;
    s.set_nodelay(true)?;
    s.set_read_timeout(Some(IO_TIMEOUT))?;
    s.set_write_timeout(Some(IO_TIMEOUT))?;
    write_message(&mut s, &Message::Hello(cfg.hello()))?;
    let (ack, n) = read_message(&mut s, Some(cfg.d_base))?;
    match ack {
        Message::HelloAck { accepted: true } => Ok((s, n as u64)),
        Message::HelloAck { accepted: false } => {
            Err(ProtocolError::Handshake("server rejected HELLO (model hash, bits or depths)".into()).into())
        }
        other => Err(ProtocolError::Unexpected {
            expected: "HELLO_ACK",
            got: other.kind(),
        }
        .into()),
    }
}

fn batch_taps(cfg: &SessionConfig, b: &Batch, rows: usize) -> Result<TapSet> {
    let blocks: Vec<(usize, &QuantizedBlock)> = b.blocks.iter().map(|t| (t.depth as usize, &t.block)).collect();
    let mut taps = base_taps_from_blocks(&blocks, cfg.shallow(), cfg.layers)?;
    if rows < b.token_ids.len() {
        taps.deep = taps.deep.slice_rows(0, rows);
        for s in &mut taps.shallow {
            *s = s.slice_rows(0, rows);
        }
    }
    Ok(TapSet { bases: vec![taps] })
}

/// Pull-mode tap source: sends each input as a BATCH request.
pub struct RemoteTapSource {
    cfg: SessionConfig,
    conn: Option<TcpStream>,
    next_id: u64,
    last_applied: Option<u64>,
    bytes: u64,
    reconnects: usize,
    dropped_duplicates: usize,
}

impl RemoteTapSource {
    pub fn connect(cfg: SessionConfig) -> Result<Self> {
        let mut s = Self {
            cfg,
            conn: None,
            next_id: 0,
            last_applied: None,
            bytes: 0,
            reconnects: 0,
            dropped_duplicates: 0,
        };
        s.with_retries(|s| s.ensure_connected())?;
        Ok(s)
    }

    pub fn reconnects(&self) -> usize {
        self.reconnects
    }

    pub fn dropped_duplicates(&self) -> usize {
        self.dropped_duplicates
    }

    pub fn next_batch_id(&self) -> u64 {
        self.next_id
    }

    fn ensure_connected(&mut self) -> Result<()> {
        if self.conn.is_none() {
            let (s, n) = connect(&self.cfg)?;
            self.bytes += n;
            self.conn = Some(s);
        }
        Ok(())
    }

    fn with_retries<T>(&mut self, mut f: impl FnMut(&mut Self) -> Result<T>) -> Result<T> {
        let mut attempt = 0;
        loop {
            match f(self) {
                Ok(v) => return Ok(v),
                Err(e) if retryable(&e) && attempt < self.cfg.retries => {
                    self.conn = None;
                    let wait = self.cfg.backoff * (1u32 << attempt);
                    attempt += 1;
                    self.reconnects += 1;
                    log::warn!("lost the inference service ({e}); retry {attempt} in {wait:?}");
                    thread::sleep(wait);
                }
                Err(e) if retryable(&e) => {
                    self.conn = None;
                    log::error!("giving up after {} attempts: {e}", attempt + 1);
                    return Err(Error::ConnectionLost {
                        attempts: attempt + 1,
                        checkpoint: None,
                    });
                }
                Err(e) => return Err(e),
            }
        }
    }

    fn exchange(&mut self, id: u64, ids: &[u32]) -> Result<Batch> {
        self.ensure_connected()?;
        let d_base = self.cfg.d_base;
        let s = self.conn.as_mut().expect("connected");
        let req = Message::Batch(Batch {
            batch_id: id,
            token_ids: ids.to_vec(),
            blocks: Vec::new(),
        });
        write_message(s, &req)?;
        loop {
            let (m, n) = read_message(s, Some(d_base))?;
            self.bytes += n as u64;
            match m {
                Message::Batch(b) if self.last_applied.is_some_and(|last| b.batch_id <= last) => {
                    log::debug!("dropping duplicate batch {}", b.batch_id);
                    self.dropped_duplicates += 1;
                }
                Message::Batch(b) => {
                    if b.batch_id != id || b.token_ids != ids {
                        return Err(ProtocolError::Malformed {
                            msg: "BATCH",
                            reason: format!("reply {} does not answer request {id}", b.batch_id),
                        }
                        .into());
                    }
                    write_message(s, &Message::BatchAck { batch_id: id })?;
                    return Ok(b);
                }
                Message::End => return Err(ProtocolError::Closed.into()),
                other => {
                    return Err(ProtocolError::Unexpected {
                        expected: "BATCH",
                        got: other.kind(),
                    }
                    .into())
                }
            }
        }
    }

    /// Sends END and closes the connection.
    pub fn finish(&mut self) -> Result<()> {
        if let Some(mut s) = self.conn.take() {
            write_message(&mut s, &Message::End)?;
        }
        Ok(())
    }
}

impl TapSource for RemoteTapSource {
    fn taps(&mut self, ids: &[u32]) -> Result<TapSet> {
        let id = self.next_id;
        let b = self.with_retries(|s| s.exchange(id, ids))?;
        self.last_applied = Some(id);
        self.next_id += 1;
        batch_taps(&self.cfg, &b, ids.len())
    }

    fn max_len(&self) -> usize {
        self.cfg.max_seq
    }

    fn bytes_received(&self) -> u64 {
        self.bytes
    }
}

impl Drop for RemoteTapSource {
    fn drop(&mut self) {
        let _ = self.finish();
    }
}

/// Push mode: what the server streamed, ready to train on.
pub struct PushedCorpus {
    pub sequences: Vec<TokenSequence>,
    taps: HashMap<Vec<u32>, TapSet>,
    max_seq: usize,
    bytes: u64,
}

impl TapSource for PushedCorpus {
    fn taps(&mut self, ids: &[u32]) -> Result<TapSet> {
        if let Some(t) = self.taps.get(ids) {
            return Ok(t.clone());
        }
        // Prefix of a pushed document (truncated for training).
        for (k, t) in &self.taps {
            if k.len() >= ids.len() && &k[..ids.len()] == ids {
                let b = &t.bases[0];
                return Ok(TapSet {
                    bases: vec![crate::carryon::BaseTaps {
                        deep: b.deep.slice_rows(0, ids.len()),
                        shallow: b.shallow.iter().map(|s| s.slice_rows(0, ids.len())).collect(),
                    }],
                });
            }
        }
        Err(Error::data("sequence was not pushed by the server"))
    }

    fn max_len(&self) -> usize {
        self.max_seq
    }

    fn bytes_received(&self) -> u64 {
        self.bytes
    }
}

/// Receives a push-mode server's whole corpus. Each document arrives with
/// taps for every token; the last row is dropped so the taps line up with
/// the training inputs.
pub fn receive_pushed(cfg: &SessionConfig) -> Result<PushedCorpus> {
    let (mut s, mut bytes) = connect(cfg)?;
    let mut taps = HashMap::new();
    let mut sequences = Vec::new();
    let mut last: Option<u64> = None;
    loop {
        let (m, n) = read_message(&mut s, Some(cfg.d_base))?;
        bytes += n as u64;
        match m {
            Message::Batch(b) => {
                write_message(&mut s, &Message::BatchAck { batch_id: b.batch_id })?;
                if last.is_some_and(|l| b.batch_id <= l) {
                    continue;
                }
                last = Some(b.batch_id);
                let seq = TokenSequence::new(b.token_ids.clone(), usize::MAX, usize::MAX)?;
                let inputs = seq.inputs().to_vec();
                let t = batch_taps(cfg, &b, inputs.len())?;
                taps.insert(inputs, t);
                sequences.push(seq);
            }
            Message::End => break,
            other => {
                return Err(ProtocolError::Unexpected {
                    expected: "BATCH or END",
                    got: other.kind(),
                }
                .into())
            }
        }
    }
    Ok(PushedCorpus {
        sequences,
        taps,
        max_seq: cfg.max_seq,
        bytes,
    })
}

/// [`train_carryon`] with taps from the inference service. If the service
/// stays unreachable past the retry budget, the current carry-on is written
/// to `cfg.checkpoint` before returning.
pub fn train_remote(
    session: SessionConfig,
    carry: &mut CarryOn,
    data: Corpora<'_>,
    cfg: &TrainConfig,
) -> Result<(TrainReport, usize)> {
    let mut src = RemoteTapSource::connect(session)?;
    match train_carryon(carry, &mut src, data, cfg) {
        Ok(r) => {
            src.finish()?;
            Ok((r, src.reconnects()))
        }
        Err(Error::ConnectionLost { attempts, .. }) => {
            let checkpoint = cfg.checkpoint.as_ref().and_then(|p| match save_bundle(carry, p) {
                Ok(()) => Some(p.clone()),
                Err(e) => {
                    log::error!("could not write checkpoint {}: {e}", p.display());
                    None
                }
            });
            Err(Error::ConnectionLost { attempts, checkpoint })
        }
        Err(e) => Err(e),
    }
}
