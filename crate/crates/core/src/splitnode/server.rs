//! The inference service: owns the frozen base and streams quantized taps.

use std::io::{self, ErrorKind, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::thread;
use std::time::Duration;

use crate::basemodel::{BaseModel, TokenSequence};
use crate::bridge::quant::{check_bits, quantize};
use crate::bridge::wire::{check_hello, read_message, write_message, Batch, Hello, Message, ProtocolError, TapBlock};
use crate::error::{Error, Result};

/// How often idle loops look at the shutdown flag.
pub const POLL: Duration = Duration::from_millis(50);
/// Read/write timeout once a frame has started.
pub const IO_TIMEOUT: Duration = Duration::from_secs(30);

#[derive(Clone, Debug, Default)]
pub struct ServeOptions {
    /// If set, a HELLO asking for other bits is rejected.
    pub bits: Option<u8>,
    /// If set, a HELLO must request a subset of these depths.
    pub depths: Option<Vec<usize>>,
    /// Push mode: stream these documents to every accepted client.
    pub push_corpus: Option<Vec<TokenSequence>>,
    /// Return after the first session that ends with END.
    pub once: bool,
    /// Fault injection: on the first connection, drop the link instead of
    /// answering the request that follows this many served batches.
    pub drop_after_batches: Option<u64>,
}

impl ServeOptions {
    pub fn validate(&self, model: &BaseModel) -> Result<()> {
        if let Some(b) = self.bits {
            check_bits(b)?;
        }
        let layers = model.config().layers;
        if let Some(ds) = &self.depths {
            if ds.is_empty() {
                return Err(Error::config("empty depth list"));
            }
            if let Some(d) = ds.iter().find(|&&d| d > layers) {
                return Err(Error::config(format!("tap depth {d} outside [0, {layers}]")));
            }
        }
        if let Some(corpus) = &self.push_corpus {
            if let Some(s) = corpus.iter().find(|s| s.len() > model.config().max_seq || s.len() < 2) {
                return Err(Error::data(format!(
                    "push document of {} tokens; must be 2..={}",
                    s.len(),
                    model.config().max_seq
                )));
            }
        }
        Ok(())
    }
}

/// How one connection ended.
#[derive(Clone, Debug, PartialEq)]
pub enum SessionEnd {
    /// The client sent END (pull) or acknowledged the whole corpus (push).
    Ended { batches: u64 },
    /// HELLO was refused.
    Rejected(String),
    /// A framing or protocol error; `offset` is where the bad frame began.
    Aborted { offset: u64, error: String },
    /// The shutdown flag was raised between batches; END was sent.
    Shutdown { batches: u64 },
    /// Dropped by fault injection.
    Dropped { batches: u64 },
}

/// A byte stream the server can wait on without blocking shutdown.
pub trait Transport: Read + Write {
    /// Waits until input is available (or the peer hung up). Returns false
    /// if `shutdown` was raised first.
    fn wait_readable(&mut self, shutdown: &AtomicBool) -> io::Result<bool> {
        Ok(!shutdown.load(Ordering::SeqCst))
    }
}

impl Transport for TcpStream {
    fn wait_readable(&mut self, shutdown: &AtomicBool) -> io::Result<bool> {
        self.set_read_timeout(Some(POLL))?;
        let mut b = [0u8; 1];
        let ready = loop {
            if shutdown.load(Ordering::SeqCst) {
                break false;
            }
            match self.peek(&mut b) {
                Ok(_) => break true,
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted) => {}
                Err(e) => return Err(e),
            }
        };
        self.set_read_timeout(Some(IO_TIMEOUT))?;
        Ok(ready)
    }
}

struct Session<'a, S> {
    stream: S,
    model: &'a BaseModel,
    hash: [u8; 32],
    opts: &'a ServeOptions,
    offset: u64,
    batches: u64,
}

enum Step {
    Continue,
    Done(SessionEnd),
}

impl<S: Transport> Session<'_, S> {
    fn abort(&self, at: u64, e: &Error) -> SessionEnd {
        log::warn!("aborting connection at byte offset {at}: {e}");
        SessionEnd::Aborted {
            offset: at,
            error: e.to_string(),
        }
    }

    fn recv(&mut self) -> std::result::Result<Message, SessionEnd> {
        let at = self.offset;
        match read_message(&mut self.stream, Some(self.model.config().dim)) {
            Ok((m, n)) => {
                self.offset += n as u64;
                Ok(m)
            }
            Err(e) => Err(self.abort(at, &e)),
        }
    }

    fn send(&mut self, m: &Message) -> std::result::Result<(), SessionEnd> {
        write_message(&mut self.stream, m).map(|_| ()).map_err(|e| self.abort(self.offset, &e))
    }

    fn restrictions(&self, h: &Hello) -> std::result::Result<(), String> {
        if let Some(b) = self.opts.bits {
            if h.bits != b {
                return Err(format!("server streams {b}-bit taps, client asked for {}", h.bits));
            }
        }
        if let Some(ds) = &self.opts.depths {
            if let Some(d) = h.depths.iter().find(|&&d| !ds.contains(&(d as usize))) {
                return Err(format!("depth {d} is not served"));
            }
        }
        Ok(())
    }

    fn handshake(&mut self) -> std::result::Result<Hello, SessionEnd> {
        let at = self.offset;
        let h = match self.recv()? {
            Message::Hello(h) => h,
            other => {
                let e = ProtocolError::Unexpected {
                    expected: "HELLO",
                    got: other.kind(),
                };
                return Err(self.abort(at, &e.into()));
            }
        };
        let cfg = self.model.config();
        let verdict = check_hello(&h, &self.hash, cfg.dim, cfg.layers)
            .map_err(|e| e.to_string())
            .and_then(|()| self.restrictions(&h));
        match verdict {
            Ok(()) => {
                self.send(&Message::HelloAck { accepted: true })?;
                Ok(h)
            }
            Err(why) => {
                log::warn!("rejecting client: {why}");
                let _ = self.send(&Message::HelloAck { accepted: false });
                Err(SessionEnd::Rejected(why))
            }
        }
    }

    fn tap_batch(&self, h: &Hello, batch_id: u64, ids: Vec<u32>) -> Result<Batch> {
        self.model.validate_ids(&ids)?;
        let depths: Vec<usize> = h.depths.iter().map(|&d| d as usize).collect();
        let taps = self.model.forward_taps(&ids, &depths)?;
        let blocks = taps
            .iter()
            .map(|t| {
                Ok(TapBlock {
                    depth: t.depth as u8,
                    block: quantize(&t.values, h.bits)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Batch {
            batch_id,
            token_ids: ids,
            blocks,
        })
    }

    fn pull_step(&mut self, h: &Hello, shutdown: &AtomicBool, drop_after: Option<u64>) -> Step {
        match self.stream.wait_readable(shutdown) {
            Ok(true) => {}
            Ok(false) => {
                let _ = self.send(&Message::End);
                return Step::Done(SessionEnd::Shutdown { batches: self.batches });
            }
            Err(e) => return Step::Done(self.abort(self.offset, &e.into())),
        }
        let at = self.offset;
        let msg = match self.recv() {
            Ok(m) => m,
            Err(end) => return Step::Done(end),
        };
        match msg {
            Message::Batch(b) if b.blocks.is_empty() => {
                if drop_after == Some(self.batches) {
                    log::warn!("fault injection: dropping connection after {} batches", self.batches);
                    return Step::Done(SessionEnd::Dropped { batches: self.batches });
                }
                let reply = match self.tap_batch(h, b.batch_id, b.token_ids) {
                    Ok(r) => r,
                    Err(e) => return Step::Done(self.abort(at, &e)),
                };
                if let Err(end) = self.send(&Message::Batch(reply)) {
                    return Step::Done(end);
                }
                self.batches += 1;
                Step::Continue
            }
            Message::BatchAck { batch_id } => {
                log::debug!("client applied batch {batch_id}");
                Step::Continue
            }
            Message::End => Step::Done(SessionEnd::Ended { batches: self.batches }),
            other => {
                let e = ProtocolError::Unexpected {
                    expected: "BATCH request, BATCH_ACK or END",
                    got: other.kind(),
                };
                Step::Done(self.abort(at, &e.into()))
            }
        }
    }

    fn push(&mut self, h: &Hello, corpus: &[TokenSequence], shutdown: &AtomicBool) -> SessionEnd {
        for (i, doc) in corpus.iter().enumerate() {
            if shutdown.load(Ordering::SeqCst) {
                let _ = self.send(&Message::End);
                return SessionEnd::Shutdown { batches: self.batches };
            }
            let id = i as u64;
            let reply = match self.tap_batch(h, id, doc.ids().to_vec()) {
                Ok(r) => r,
                Err(e) => return self.abort(self.offset, &e),
            };
            if let Err(end) = self.send(&Message::Batch(reply)) {
                return end;
            }
            let at = self.offset;
            match self.recv() {
                Ok(Message::BatchAck { batch_id }) if batch_id == id => self.batches += 1,
                Ok(Message::End) => return SessionEnd::Ended { batches: self.batches },
                Ok(other) => {
                    let e = ProtocolError::Unexpected {
                        expected: "BATCH_ACK",
                        got: other.kind(),
                    };
                    return self.abort(at, &e.into());
                }
                Err(end) => return end,
            }
        }
        let _ = self.send(&Message::End);
        SessionEnd::Ended { batches: self.batches }
    }
}

/// Serves one client to completion. Never panics on hostile input; every
/// malformed frame ends the session with [`SessionEnd::Aborted`].
pub fn handle_connection<S: Transport>(
    stream: S,
    model: &BaseModel,
    hash: [u8; 32],
    opts: &ServeOptions,
    shutdown: &AtomicBool,
    drop_after: Option<u64>,
) -> SessionEnd {
    let mut s = Session {
        stream,
        model,
        hash,
        opts,
        offset: 0,
        batches: 0,
    };
    match s.stream.wait_readable(shutdown) {
        Ok(true) => {}
        Ok(false) => return SessionEnd::Shutdown { batches: 0 },
        Err(e) => return s.abort(0, &e.into()),
    }
    let hello = match s.handshake() {
        Ok(h) => h,
        Err(end) => return end,
    };
    if let Some(corpus) = &opts.push_corpus {
        return s.push(&hello, corpus, shutdown);
    }
    loop {
        if let Step::Done(end) = s.pull_step(&hello, shutdown, drop_after) {
            return end;
        }
    }
}

pub struct Server {
    model: BaseModel,
    hash: [u8; 32],
    listener: TcpListener,
    opts: ServeOptions,
}

impl Server {
    pub fn bind(model: BaseModel, addr: impl ToSocketAddrs, opts: ServeOptions) -> Result<Self> {
        opts.validate(&model)?;
        let hash = model.hash()?;
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        Ok(Self {
            model,
            hash,
            listener,
            opts,
        })
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.listener.local_addr()?)
    }

    pub fn model_hash(&self) -> [u8; 32] {
        self.hash
    }

    /// Accept loop. Clients are served one at a time. Returns every session's
    /// outcome once shutdown is raised, or after the first END when `once`.
    pub fn run(&self, shutdown: &AtomicBool) -> Result<Vec<SessionEnd>> {
        let mut ends = Vec::new();
        let mut first = true;
        while !shutdown.load(Ordering::SeqCst) {
            let (stream, peer) = match self.listener.accept() {
                Ok(c) => c,
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    thread::sleep(POLL);
                    continue;
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(e.into()),
            };
            log::info!("client connected from {peer}");
            stream.set_nonblocking(false)?;
            stream.set_nodelay(true)?;
            stream.set_write_timeout(Some(IO_TIMEOUT))?;
            let drop_after = if first { self.opts.drop_after_batches } else { None };
            first = false;
            let end = handle_connection(stream, &self.model, self.hash, &self.opts, shutdown, drop_after);
            log::info!("session with {peer} finished: {end:?}");
            let done = self.opts.once && matches!(end, SessionEnd::Ended { .. });
            let stopped = matches!(end, SessionEnd::Shutdown { .. });
            ends.push(end);
            if done || stopped {
                break;
            }
        }
        Ok(ends)
    }
}

impl<T: Transport + ?Sized> Transport for &mut T {
    fn wait_readable(&mut self, shutdown: &AtomicBool) -> io::Result<bool> {
        (**self).wait_readable(shutdown)
    }
}
