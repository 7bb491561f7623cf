//! The training client against a real TCP inference service.

use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use carryon_core::basemodel::{BaseConfig, BaseModel, TokenSequence};
use carryon_core::bridge::wire::ProtocolError;
use carryon_core::carryon::{load_bundle, BaseInfo, CarryOn, CarryOnConfig, FfnConfig};
use carryon_core::data::{arithmetic_corpus, text_sequences};
use carryon_core::splitnode::{handle_connection, receive_pushed, train_remote, RemoteTapSource, Server, ServeOptions, SessionConfig, SessionEnd};
use carryon_core::trainer::{train_carryon, AlphaMode, Corpora, LocalTapSource, TapSource, TrainConfig};
use carryon_core::Error;

fn base() -> BaseModel {
    let mut m = BaseModel::new(BaseConfig {
        dim: 16,
        layers: 2,
        heads: 2,
        max_seq: 48,
        seed: 3,
        ..BaseConfig::default()
    })
    .unwrap();
    m.freeze();
    m
}

fn copy(m: &BaseModel) -> BaseModel {
    BaseModel::from_bytes(&m.to_bytes().unwrap()).unwrap()
}

fn carry(base: &BaseModel) -> CarryOn {
    let cfg = CarryOnConfig {
        d_carry: 16,
        layers: 1,
        heads: 2,
        ffn: FfnConfig::Dense { hidden: 32 },
        alpha_init: 1.0,
        ..CarryOnConfig::default()
    };
    CarryOn::new(cfg, vec![BaseInfo::from_model("base", base).unwrap()]).unwrap()
}

fn corpus() -> Vec<TokenSequence> {
    text_sequences(&arithmetic_corpus(800, 8), 48).unwrap()
}

fn train_cfg() -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 2,
        lr: 3e-3,
        min_lr: 3e-4,
        warmup_steps: 2,
        mask_before: 2,
        alpha_mode: AlphaMode::Neighborhood,
        seed: 5,
        ..TrainConfig::default()
    }
}

struct Running {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    handle: JoinHandle<Vec<SessionEnd>>,
}

fn spawn(model: BaseModel, addr: &str, opts: ServeOptions) -> Running {
    let server = Server::bind(model, addr, opts).unwrap();
    let addr = server.local_addr().unwrap();
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let handle = thread::spawn(move || server.run(&flag).unwrap());
    Running { addr, stop, handle }
}

fn once() -> ServeOptions {
    ServeOptions {
        once: true,
        ..ServeOptions::default()
    }
}

fn local_run(base: &BaseModel, train: &[TokenSequence], val: &[TokenSequence], bits: u8) -> CarryOn {
    let mut c = carry(base);
    let mut src = LocalTapSource::new(vec![base], &c, bits).unwrap();
    let data = Corpora {
        train,
        val,
        general: None,
    };
    train_carryon(&mut c, &mut src, data, &train_cfg()).unwrap();
    c
}

fn same_params(a: &CarryOn, b: &CarryOn) -> bool {
    let (x, y) = (a.store().flatten(), b.store().flatten());
    x.len() == y.len() && x.iter().zip(&y).all(|(p, q)| p.to_bits() == q.to_bits()) && a.alpha.to_bits() == b.alpha.to_bits()
}

#[test]
fn dropped_link_resumes_without_duplicates() {
    let b = base();
    let seqs = corpus();
    let (train, val) = (&seqs[..20], &seqs[20..24]);
    let want = local_run(&b, train, val, 4);

    let srv = spawn(
        copy(&b),
        "127.0.0.1:0",
        ServeOptions {
            once: true,
            drop_after_batches: Some(7),
            ..ServeOptions::default()
        },
    );
    let mut got = carry(&b);
    let session = SessionConfig::for_carryon(srv.addr.to_string(), &got, 4, b.config().max_seq).unwrap();
    let data = Corpora {
        train,
        val,
        general: None,
    };
    let (report, reconnects) = train_remote(session, &mut got, data, &train_cfg()).unwrap();
    let ends = srv.handle.join().unwrap();
    assert_eq!(reconnects, 1);
    assert!(matches!(ends[0], SessionEnd::Dropped { batches: 7 }), "{ends:?}");
    assert!(matches!(ends.last(), Some(SessionEnd::Ended { .. })), "{ends:?}");
    assert!(report.steps > 7);
    assert!(same_params(&want, &got));
}

#[test]
fn restarted_server_is_picked_up_at_the_next_batch() {
    let b = base();
    let seqs = corpus();
    let c = carry(&b);
    let first = spawn(copy(&b), "127.0.0.1:0", ServeOptions::default());
    let addr = first.addr;
    let cfg = SessionConfig::for_carryon(addr.to_string(), &c, 8, b.config().max_seq).unwrap();
    let mut src = RemoteTapSource::connect(cfg).unwrap();
    let mut local = LocalTapSource::new(vec![&b], &c, 8).unwrap();
    for s in &seqs[..3] {
        assert!(src.taps(s.inputs()).unwrap().bases[0].deep.bit_eq(&local.taps(s.inputs()).unwrap().bases[0].deep));
    }
    first.stop.store(true, Ordering::SeqCst);
    let ends = first.handle.join().unwrap();
    assert!(matches!(ends[..], [SessionEnd::Shutdown { batches: 3 }]), "{ends:?}");

    let second = spawn(copy(&b), &addr.to_string(), once());
    for s in &seqs[3..6] {
        let t = src.taps(s.inputs()).unwrap();
        assert!(t.bases[0].deep.bit_eq(&local.taps(s.inputs()).unwrap().bases[0].deep));
    }
    assert_eq!(src.next_batch_id(), 6);
    assert_eq!(src.reconnects(), 1);
    assert_eq!(src.dropped_duplicates(), 0);
    src.finish().unwrap();
    let ends = second.handle.join().unwrap();
    assert!(matches!(ends[..], [SessionEnd::Ended { batches: 3 }]), "{ends:?}");
}

#[test]
fn unreachable_service_saves_a_checkpoint() {
    let b = base();
    let seqs = corpus();
    let dir = tempfile::tempdir().unwrap();
    let ckpt = dir.path().join("ckpt.bin");
    // A one-shot service: serves three batches, drops the link and goes away,
    // so every reconnect is refused.
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let served = copy(&b);
    let server = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let hash = served.hash().unwrap();
        let end = handle_connection(stream, &served, hash, &ServeOptions::default(), &AtomicBool::new(false), Some(3));
        drop(listener);
        end
    });
    let mut c = carry(&b);
    let mut session = SessionConfig::for_carryon(addr.to_string(), &c, 0, b.config().max_seq).unwrap();
    session.backoff = Duration::from_millis(10);
    let cfg = TrainConfig {
        checkpoint: Some(ckpt.clone()),
        ..train_cfg()
    };
    let data = Corpora {
        train: &seqs[..10],
        val: &seqs[10..12],
        general: None,
    };
    let err = train_remote(session, &mut c, data, &cfg).unwrap_err();
    assert!(matches!(server.join().unwrap(), SessionEnd::Dropped { batches: 3 }));
    match err {
        Error::ConnectionLost { attempts, checkpoint } => {
            assert_eq!(attempts, 4);
            assert_eq!(checkpoint.as_deref(), Some(ckpt.as_path()));
            let saved = load_bundle(&ckpt).unwrap();
            assert!(same_params(&saved, &c));
        }
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn pushed_corpus_trains_like_local() {
    let b = base();
    let seqs = corpus();
    let pushed_docs = seqs[..24].to_vec();
    let srv = spawn(
        copy(&b),
        "127.0.0.1:0",
        ServeOptions {
            once: true,
            push_corpus: Some(pushed_docs.clone()),
            ..ServeOptions::default()
        },
    );
    let c = carry(&b);
    let cfg = SessionConfig::for_carryon(srv.addr.to_string(), &c, 4, b.config().max_seq).unwrap();
    let mut pushed = receive_pushed(&cfg).unwrap();
    srv.handle.join().unwrap();
    assert_eq!(pushed.sequences, pushed_docs);

    let all = pushed.sequences.clone();
    let (train, val) = (&all[..20], &all[20..]);
    let want = local_run(&b, train, val, 4);
    let mut got = carry(&b);
    let data = Corpora {
        train,
        val,
        general: None,
    };
    train_carryon(&mut got, &mut pushed, data, &train_cfg()).unwrap();
    assert!(same_params(&want, &got));
}

#[test]
fn fewer_bits_fewer_bytes() {
    let b = base();
    let seqs = corpus();
    let c = carry(&b);
    let mut bytes = Vec::new();
    for bits in [4u8, 8, 0] {
        let srv = spawn(copy(&b), "127.0.0.1:0", once());
        let cfg = SessionConfig::for_carryon(srv.addr.to_string(), &c, bits, b.config().max_seq).unwrap();
        let mut src = RemoteTapSource::connect(cfg).unwrap();
        for s in &seqs[..8] {
            src.taps(s.inputs()).unwrap();
        }
        bytes.push(src.bytes_received());
        src.finish().unwrap();
        srv.handle.join().unwrap();
    }
    assert!(bytes[0] < bytes[1] && bytes[1] < bytes[2], "b4/b8/b0 bytes {bytes:?}");
}

#[test]
fn handshake_rejections() {
    let b = base();
    let c = carry(&b);
    let srv = spawn(
        copy(&b),
        "127.0.0.1:0",
        ServeOptions {
            bits: Some(8),
            ..ServeOptions::default()
        },
    );
    let good = SessionConfig::for_carryon(srv.addr.to_string(), &c, 8, b.config().max_seq).unwrap();

    let mut wrong_hash = good.clone();
    wrong_hash.model_hash[0] ^= 1;
    let mut wrong_bits = good.clone();
    wrong_bits.bits = 4;
    let mut too_deep = good.clone();
    too_deep.depths = vec![5];
    for cfg in [wrong_hash, wrong_bits, too_deep] {
        match RemoteTapSource::connect(cfg) {
            Err(Error::Protocol(ProtocolError::Handshake(_))) => {}
            Err(e) => panic!("unexpected error {e}"),
            Ok(_) => panic!("handshake accepted"),
        }
    }
    let ok = RemoteTapSource::connect(good).unwrap();
    drop(ok);
    srv.stop.store(true, Ordering::SeqCst);
    let ends = srv.handle.join().unwrap();
    let rejected = ends.iter().filter(|e| matches!(e, SessionEnd::Rejected(_))).count();
    assert_eq!(rejected, 3, "{ends:?}");
}
