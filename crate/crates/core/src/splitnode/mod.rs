//! Two-process training: an inference service streams quantized taps of a
//! frozen base, a training client owns the carry-on and the optimizer.
//!
//! Only forward activations cross the wire. There is no message type that
//! could carry a gradient back.

pub mod client;
pub mod server;

pub use client::{receive_pushed, train_remote, PushedCorpus, RemoteTapSource, SessionConfig};
pub use server::{handle_connection, Server, ServeOptions, SessionEnd, Transport};

#[cfg(test)]
mod tests {
    use std::io::{Cursor, Read, Write};
    use std::sync::atomic::AtomicBool;

    use super::*;
    use crate::basemodel::{BaseConfig, BaseModel};
    use crate::bridge::wire::{encode_frame, read_message, Hello, Message, PROTO_VERSION};

    /// Scripted client bytes in, server bytes out.
    struct Duplex {
        input: Cursor<Vec<u8>>,
        output: Vec<u8>,
    }

    impl Read for Duplex {
        fn read(&mut self, buf: &mut [u8]) -> std::io::Result<usize> {
            self.input.read(buf)
        }
    }

    impl Write for Duplex {
        fn write(&mut self, buf: &[u8]) -> std::io::Result<usize> {
            self.output.write(buf)
        }
        fn flush(&mut self) -> std::io::Result<()> {
            Ok(())
        }
    }

    impl Transport for Duplex {}

    fn model() -> BaseModel {
        let mut m = BaseModel::new(BaseConfig {
            dim: 8,
            layers: 2,
            heads: 2,
            max_seq: 16,
            seed: 1,
            ..BaseConfig::default()
        })
        .unwrap();
        m.freeze();
        m
    }

    fn hello(m: &BaseModel, bits: u8) -> Message {
        Message::Hello(Hello {
            proto_version: PROTO_VERSION,
            model_hash: m.hash().unwrap(),
            d_base: 8,
            depths: vec![0, 2],
            bits,
        })
    }

    fn run(m: &BaseModel, script: &[Message], opts: &ServeOptions) -> (SessionEnd, Vec<Message>) {
        let mut bytes = Vec::new();
        for msg in script {
            bytes.extend(encode_frame(msg).unwrap());
        }
        run_bytes(m, bytes, opts)
    }

    fn run_bytes(m: &BaseModel, bytes: Vec<u8>, opts: &ServeOptions) -> (SessionEnd, Vec<Message>) {
        let mut d = Duplex {
            input: Cursor::new(bytes),
            output: Vec::new(),
        };
        let stop = AtomicBool::new(false);
        let end = handle_connection(&mut d, m, m.hash().unwrap(), opts, &stop, None);
        let mut out = Cursor::new(d.output);
        let mut replies = Vec::new();
        while let Ok((msg, _)) = read_message(&mut out, Some(8)) {
            replies.push(msg);
        }
        (end, replies)
    }

    fn request(id: u64, ids: &[u32]) -> Message {
        Message::Batch(crate::bridge::wire::Batch {
            batch_id: id,
            token_ids: ids.to_vec(),
            blocks: Vec::new(),
        })
    }

    #[test]
    fn pull_session_replies_per_depth() {
        let m = model();
        let (end, replies) = run(
            &m,
            &[hello(&m, 4), request(0, &[256, 1, 2]), Message::BatchAck { batch_id: 0 }, Message::End],
            &ServeOptions::default(),
        );
        assert_eq!(end, SessionEnd::Ended { batches: 1 });
        assert_eq!(replies[0], Message::HelloAck { accepted: true });
        let Message::Batch(b) = &replies[1] else { panic!("expected BATCH") };
        assert_eq!(b.blocks.len(), 2);
        assert!(b.blocks.iter().all(|t| t.block.bits() == 4 && t.block.rows() == 3));
    }

    #[test]
    fn wrong_hash_is_rejected() {
        let m = model();
        let mut h = hello(&m, 4);
        if let Message::Hello(h) = &mut h {
            h.model_hash[0] ^= 1;
        }
        let (end, replies) = run(&m, &[h], &ServeOptions::default());
        assert!(matches!(end, SessionEnd::Rejected(_)));
        assert_eq!(replies, vec![Message::HelloAck { accepted: false }]);
        let strict = ServeOptions {
            bits: Some(8),
            ..ServeOptions::default()
        };
        assert!(matches!(run(&m, &[hello(&m, 4)], &strict).0, SessionEnd::Rejected(_)));
    }

    #[test]
    fn garbage_aborts_with_offset() {
        let m = model();
        let mut bytes = encode_frame(&hello(&m, 0)).unwrap();
        let good = bytes.len() as u64;
        bytes.extend(b"XXXX\x03\0\0\0\0");
        let (end, _) = run_bytes(&m, bytes, &ServeOptions::default());
        match end {
            SessionEnd::Aborted { offset, error } => {
                assert_eq!(offset, good);
                assert!(error.contains("magic"), "{error}");
            }
            other => panic!("{other:?}"),
        }
        let (end, _) = run(&m, &[request(0, &[1])], &ServeOptions::default());
        assert!(matches!(end, SessionEnd::Aborted { offset: 0, .. }));
    }

    #[test]
    fn out_of_vocab_request_aborts() {
        let m = model();
        let (end, _) = run(&m, &[hello(&m, 0), request(0, &[999])], &ServeOptions::default());
        assert!(matches!(end, SessionEnd::Aborted { .. }));
    }

    #[test]
    fn push_streams_corpus() {
        let m = model();
        let corpus = vec![crate::basemodel::TokenSequence::new(vec![256, 5, 6, 257], 258, 16).unwrap()];
        let opts = ServeOptions {
            push_corpus: Some(corpus),
            ..ServeOptions::default()
        };
        let (end, replies) = run(&m, &[hello(&m, 8), Message::BatchAck { batch_id: 0 }], &opts);
        assert_eq!(end, SessionEnd::Ended { batches: 1 });
        assert_eq!(replies.len(), 3);
        assert_eq!(replies[2], Message::End);
    }

    #[test]
    fn invalid_serve_options() {
        let m = model();
        let bad = ServeOptions {
            depths: Some(vec![3]),
            ..ServeOptions::default()
        };
        assert!(bad.validate(&m).is_err());
        assert!(ServeOptions {
            bits: Some(5),
            ..ServeOptions::default()
        }
        .validate(&m)
        .is_err());
    }
}
