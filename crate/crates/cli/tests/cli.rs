//! End-to-end runs of the `carryon` binary on tiny models.

use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use carryon_core::basemodel::{BaseModel, BOS};
use carryon_core::carryon::CarryOn;
use carryon_core::splitnode::{RemoteTapSource, SessionConfig};
use carryon_core::trainer::TapSource;

const BIN: &str = env!("CARGO_BIN_EXE_carryon");

fn cmd() -> Command {
    let mut c = Command::new(BIN);
    // Keep host settings out of the runs.
    for (k, _) in std::env::vars() {
        if k.starts_with("CARRYON_") {
            c.env_remove(k);
        }
    }
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    cmd().args(args).output().expect("spawn carryon")
}

fn text(b: &[u8]) -> String {
    String::from_utf8_lossy(b).into_owned()
}

fn ok(o: Output) -> String {
    assert!(o.status.success(), "status {:?}\nstdout:\n{}\nstderr:\n{}", o.status, text(&o.stdout), text(&o.stderr));
    text(&o.stdout)
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY_BASE: &[&str] = &["--dim", "16", "--layers", "2", "--heads", "2", "--max-seq", "64", "--steps", "6", "--batch-size", "2", "--seq-len", "32", "--warmup-steps", "2"];

struct Fixture {
    dir: tempfile::TempDir,
}

impl Fixture {
    /// Data plus a pretrained tiny base.
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let f = Self { dir };
        ok(run(&[
            "gen-data",
            "--out",
            p(f.dir.path()),
            "--corpus-chars",
            "3000",
            "--qa-train",
            "16",
            "--qa-val",
            "4",
            "--qa-eval",
            "3",
            "--memorize-docs",
            "10",
        ]));
        std::fs::write(f.path("template.txt"), "Q: {question}\n").unwrap();
        std::fs::write(
            f.path("carry.json"),
            r#"{"d_carry": 16, "layers": 1, "heads": 2, "ffn": {"kind": "dense", "hidden": 32},
                "fusion": "none", "bases": [{"name": "base", "weight": 1.0}],
                "head": {"kind": "reuse_base"}, "alpha_init": 1.0}"#,
        )
        .unwrap();
        let mut args = vec!["pretrain-base", "--corpus", f.s("corpus.txt"), "--out", f.s("base.bin")];
        args.extend_from_slice(TINY_BASE);
        ok(run(&args));
        f
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn s(&self, name: &str) -> &'static str {
        Box::leak(self.path(name).to_str().unwrap().to_string().into_boxed_str())
    }

    fn train_args(&self, out: &str) -> Vec<&'static str> {
        vec![
            "train",
            "--base",
            self.s("base.bin"),
            "--carryon-config",
            self.s("carry.json"),
            "--train",
            self.s("qa_train.jsonl"),
            "--val",
            self.s("qa_val.jsonl"),
            "--template",
            self.s("template.txt"),
            "--epochs",
            "2",
            "--batch-size",
            "4",
            "--lr",
            "3e-3",
            "--mask-before",
            "2",
            "--alpha-mode",
            "grid",
            "--out",
            self.s(out),
        ]
    }
}

fn manifest(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("m.bin");

    let o = run(&["pretrain-base", "--corpus", "/no/such/corpus.txt", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("/no/such/corpus.txt"), "{}", text(&o.stderr));
    assert!(!out.exists());

    let o = run(&["pretrain-base", "--out", p(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("--corpus"));

    let o = run(&["eval", "--bundle", "/no/such/bundle.bin", "--base", "/no/base.bin", "--qa", "/no/qa.jsonl"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("bundle.bin"));

    let o = run(&["pretrain-base", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"dimm": 4}"#).unwrap();
    let o = run(&["pretrain-base", "--config", p(&cfg)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("dimm"));
}

#[test]
fn pretraining_is_reproducible_and_manifested() {
    let f = Fixture::new();
    let mut args = vec!["pretrain-base", "--corpus", f.s("corpus.txt"), "--out", f.s("again.bin")];
    args.extend_from_slice(TINY_BASE);
    ok(run(&args));
    let a = std::fs::read(f.path("base.bin")).unwrap();
    let b = std::fs::read(f.path("again.bin")).unwrap();
    assert_eq!(a, b);

    let m = manifest(&f.path("again.bin.manifest.json"));
    assert_eq!(m["command"], "pretrain-base");
    assert_eq!(m["seed"], 0);
    assert_eq!(m["config"]["dim"], 16);
    assert_eq!(m["outputs"][0], f.s("again.bin"));
    let corpus_hash = m["inputs"][f.s("corpus.txt")].as_str().unwrap();
    let gen = manifest(&f.path("manifest.json"));
    assert_eq!(gen["command"], "gen-data");
    assert_eq!(corpus_hash.len(), 64);

    // A different seed gives a different model.
    let mut args = vec!["pretrain-base", "--corpus", f.s("corpus.txt"), "--out", f.s("other.bin"), "--seed", "1"];
    args.extend_from_slice(TINY_BASE);
    ok(run(&args));
    assert_ne!(a, std::fs::read(f.path("other.bin")).unwrap());
}

#[test]
fn flag_beats_env_beats_file() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("c.txt");
    std::fs::write(&corpus, "1 plus 1 is 2.\n2 plus 2 is 4.\n").unwrap();
    let cfg = dir.path().join("cfg.json");
    std::fs::write(
        &cfg,
        r#"{"steps": 3, "dim": 8, "layers": 2, "heads": 1, "max_seq": 16, "seq_len": 8, "batch_size": 1, "warmup_steps": 1, "seed": 5}"#,
    )
    .unwrap();
    let out = dir.path().join("m.bin");
    let steps = |env: Option<&str>, flag: Option<&str>| {
        let mut c = cmd();
        c.args(["pretrain-base", "--corpus", p(&corpus), "--out", p(&out), "--config", p(&cfg)]);
        if let Some(e) = env {
            c.env("CARRYON_STEPS", e);
        }
        if let Some(v) = flag {
            c.args(["--steps", v]);
        }
        ok(c.output().unwrap());
        let m = manifest(&dir.path().join("m.bin.manifest.json"));
        assert_eq!(m["config"]["dim"], 8);
        assert_eq!(m["seed"], 5);
        m["config"]["steps"].as_u64().unwrap()
    };
    assert_eq!(steps(None, None), 3);
    assert_eq!(steps(Some("4"), None), 4);
    assert_eq!(steps(Some("4"), Some("2")), 2);
}

fn spawn_serve(base: &Path, extra: &[&str]) -> (Child, String, BufReader<std::process::ChildStdout>) {
    let mut child = cmd()
        .args(["serve", "--model", p(base), "--bind", "127.0.0.1:0"])
        .args(extra)
        .stdout(Stdio::piped())
        .stderr(Stdio::null())
        .spawn()
        .unwrap();
    let mut out = BufReader::new(child.stdout.take().unwrap());
    let mut line = String::new();
    out.read_line(&mut line).unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap_or_else(|| panic!("unexpected `{line}`")).to_string();
    (child, addr, out)
}

fn wait(child: &mut Child, limit: Duration) -> std::process::ExitStatus {
    let t = Instant::now();
    loop {
        if let Some(s) = child.try_wait().unwrap() {
            return s;
        }
        if t.elapsed() > limit {
            child.kill().ok();
            panic!("process did not exit in {limit:?}");
        }
        std::thread::sleep(Duration::from_millis(20));
    }
}

fn rest(mut r: impl BufRead) -> String {
    let mut s = String::new();
    while r.read_line(&mut s).unwrap() > 0 {}
    s
}

#[test]
fn local_and_remote_training_agree() {
    let f = Fixture::new();
    let local = ok(cmd().args(f.train_args("local.bin")).output().unwrap());
    assert!(local.contains("epoch 0 alpha candidates:"), "{local}");
    assert!(local.contains("<- chosen"));

    let (mut serve, addr, serve_out) = spawn_serve(&f.path("base.bin"), &[]);
    let mut args = f.train_args("remote.bin");
    args.extend(["--mode", "remote", "--addr", Box::leak(addr.into_boxed_str())]);
    let remote = ok(cmd().args(&args).output().unwrap());
    assert!(remote.contains("bytes"), "{remote}");
    assert!(wait(&mut serve, Duration::from_secs(30)).success());
    assert!(rest(serve_out).contains("session ended after"));

    assert_eq!(std::fs::read(f.path("local.bin")).unwrap(), std::fs::read(f.path("remote.bin")).unwrap());
    let curves = std::fs::read_to_string(f.path("local.bin.curves.csv")).unwrap();
    let mut lines = curves.lines();
    assert_eq!(lines.next(), Some("step,split,alpha,loss,lr,wallclock_ms"));
    assert!(lines.any(|l| l.split(',').nth(1) == Some("val")));
    let m = manifest(&f.path("local.bin.manifest.json"));
    assert_eq!(m["command"], "train");
    assert_eq!(m["config"]["alpha_mode"], "grid");

    // Evaluation and the α report on the trained bundle.
    let eval = |alpha: &str, report: &str| {
        ok(run(&[
            "eval",
            "--bundle",
            f.s("local.bin"),
            "--base",
            f.s("base.bin"),
            "--qa",
            f.s("qa_eval.jsonl"),
            "--template",
            f.s("template.txt"),
            "--max-new-tokens",
            "6",
            "--alpha",
            alpha,
            "--report",
            f.s(report),
        ]))
    };
    let base_only = eval("0", "eval0.json");
    assert!(base_only.contains("base pathway only"), "{base_only}");
    let r: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(f.path("eval0.json")).unwrap()).unwrap();
    assert_eq!(r["accuracy_base"], r["accuracy_carryon"]);
    assert_eq!(r["items"].as_array().unwrap().len(), 3);
    eval("1", "eval1.json");
    assert!(f.path("eval1.json.manifest.json").is_file());

    let report = ok(run(&[
        "alpha-report",
        "--bundle",
        f.s("local.bin"),
        "--base",
        f.s("base.bin"),
        "--val",
        f.s("qa_val.jsonl"),
        "--template",
        f.s("template.txt"),
        "--mask-before",
        "2",
    ]));
    let rows: Vec<&str> = report.lines().skip(1).take_while(|l| !l.starts_with("quasi")).collect();
    assert_eq!(rows.len(), 5, "{report}");
    for (row, a) in rows.iter().zip(["0.3", "0.5", "1.0", "2.0", "3.0"]) {
        let v: f64 = row.split_whitespace().next().unwrap().parse().unwrap();
        assert_eq!(v, a.parse::<f64>().unwrap());
    }
    assert!(report.contains("quasi-convex: "), "{report}");

    // Wrong base for the bundle is a configuration error.
    let o = run(&["eval", "--bundle", f.s("local.bin"), "--base", f.s("local.bin"), "--qa", f.s("qa_eval.jsonl")]);
    assert_eq!(o.status.code(), Some(2), "{}", text(&o.stderr));
}

#[test]
fn serve_rejects_bad_depths() {
    let f = Fixture::new();
    let o = run(&["serve", "--model", f.s("base.bin"), "--bind", "127.0.0.1:0", "--depths", "0,9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("depth 9"), "{}", text(&o.stderr));
}

#[cfg(unix)]
#[test]
fn sigint_shuts_the_server_down_cleanly() {
    let f = Fixture::new();
    let (mut serve, addr, serve_out) = spawn_serve(&f.path("base.bin"), &["--keep-serving"]);

    let base = BaseModel::load(&f.path("base.bin")).unwrap();
    let carry = CarryOn::new(
        serde_json::from_str(&std::fs::read_to_string(f.path("carry.json")).unwrap()).unwrap(),
        vec![carryon_core::carryon::BaseInfo::from_model("base", &base).unwrap()],
    )
    .unwrap();
    let cfg = SessionConfig::for_carryon(addr, &carry, 4, base.config().max_seq).unwrap();
    let mut src = RemoteTapSource::connect(cfg).unwrap();
    for ids in [[BOS, 49, 50].as_slice(), &[BOS, 51]] {
        src.taps(ids).unwrap();
    }
    let status = Command::new("kill").args(["-INT", &serve.id().to_string()]).status().unwrap();
    assert!(status.success());
    assert!(wait(&mut serve, Duration::from_secs(30)).success());
    let out = rest(serve_out);
    assert!(out.contains("shut down after 2 batches"), "{out}");
}
