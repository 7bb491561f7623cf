//! One function per subcommand. Each resolves its settings, writes the run
//! manifest, then does the work.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use anyhow::Context;
use clap::Args;
use serde::{Deserialize, Serialize};

use carryon_core::basemodel::{pretrain_base, BaseConfig, BaseModel, PretrainConfig, TokenSequence, BYTE_VOCAB};
use carryon_core::carryon::{load_bundle, save_bundle, BaseInfo, CarryOn, CarryOnConfig};
use carryon_core::data::{arithmetic_corpus, arithmetic_qa, memorization_corpus, qa_sequences, text_sequences};
use carryon_core::evalkit::{
    exact_match_accuracy, load_qa_jsonl, prepare_examples, val_cross_entropy, DecodeOptions, QaItem,
    DEFAULT_PROMPT_TEMPLATE,
};
use carryon_core::splitnode::{train_remote, Server, ServeOptions, SessionConfig, SessionEnd};
use carryon_core::trainer::alpha::{check_quasiconvex, GRID};
use carryon_core::trainer::train::{truncate_all, write_curves_csv, Split};
use carryon_core::trainer::{train_carryon, train_joint, AlphaMode, Corpora, LocalTapSource, TrainConfig, TrainReport};

use crate::manifest::{manifest_path, with_suffix, RunManifest};
use crate::settings::{resolve, usage};

fn required<'a>(p: &'a Option<PathBuf>, flag: &str) -> anyhow::Result<&'a Path> {
    p.as_deref().ok_or_else(|| usage(format!("--{flag} is required")))
}

fn require_exists(p: &Path) -> anyhow::Result<()> {
    if p.is_file() {
        Ok(())
    } else {
        Err(usage(format!("no such file: {}", p.display())))
    }
}

fn load_template(p: Option<&Path>) -> anyhow::Result<String> {
    let Some(p) = p else {
        return Ok(DEFAULT_PROMPT_TEMPLATE.to_string());
    };
    let t = std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read template {}: {e}", p.display())))?;
    let t = t.trim_end_matches(['\n', '\r']).to_string();
    if !t.contains("{question}") {
        return Err(usage(format!("template {} has no {{question}} placeholder", p.display())));
    }
    Ok(t)
}

fn is_jsonl(p: &Path) -> bool {
    p.extension().is_some_and(|e| e == "jsonl")
}

/// `.jsonl` files are QA items rendered through the template; anything
/// else is one document per non-empty line.
fn load_corpus(p: &Path, template: &str) -> anyhow::Result<Vec<TokenSequence>> {
    require_exists(p)?;
    let seqs = if is_jsonl(p) {
        qa_sequences(&load_qa_jsonl(p)?, template, usize::MAX)?
    } else {
        text_sequences(&std::fs::read_to_string(p)?, usize::MAX)?
    };
    if seqs.is_empty() {
        return Err(usage(format!("{} holds no documents", p.display())));
    }
    Ok(seqs)
}

fn load_base(p: &Path) -> anyhow::Result<BaseModel> {
    require_exists(p)?;
    let mut m = BaseModel::load(p).map_err(|e| usage(format!("cannot load base model {}: {e}", p.display())))?;
    m.freeze();
    Ok(m)
}

/// One base file per configured base, checked against the bundle's hashes.
fn load_bases_for(paths: &[PathBuf], carry: &CarryOn) -> anyhow::Result<Vec<BaseModel>> {
    if paths.len() != carry.bases().len() {
        return Err(usage(format!(
            "the carry-on reads {} base(s) but {} --base given",
            carry.bases().len(),
            paths.len()
        )));
    }
    paths
        .iter()
        .zip(carry.bases())
        .map(|(p, info)| {
            let m = load_base(p)?;
            if m.hash()? != info.hash {
                return Err(usage(format!("{} is not the base `{}` this bundle was trained on", p.display(), info.name)));
            }
            Ok(m)
        })
        .collect()
}

fn load_carry(p: &Path) -> anyhow::Result<CarryOn> {
    require_exists(p)?;
    load_bundle(p).map_err(|e| usage(format!("cannot load bundle {}: {e}", p.display())))
}

fn write_manifest(m: &RunManifest, path: &Path) -> anyhow::Result<()> {
    m.write(path).with_context(|| format!("writing manifest {}", path.display()))?;
    log::info!("manifest written to {}", path.display());
    Ok(())
}

fn inputs<'a>(paths: impl IntoIterator<Item = &'a Option<PathBuf>>) -> Vec<&'a Path> {
    paths.into_iter().filter_map(|p| p.as_deref()).collect()
}

// gen-data

#[derive(Args, Serialize)]
pub struct GenDataArgs {
    /// JSON settings file.
    #[arg(long, env = "CARRYON_CONFIG")]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "CARRYON_OUT")]
    out: Option<PathBuf>,
    #[arg(long, env = "CARRYON_SEED")]
    seed: Option<u64>,
    /// Minimum size of the pretraining text.
    #[arg(long, env = "CARRYON_CORPUS_CHARS")]
    corpus_chars: Option<usize>,
    #[arg(long, env = "CARRYON_QA_TRAIN")]
    qa_train: Option<usize>,
    #[arg(long, env = "CARRYON_QA_VAL")]
    qa_val: Option<usize>,
    #[arg(long, env = "CARRYON_QA_EVAL")]
    qa_eval: Option<usize>,
    /// Number of random strings in the memorization corpus.
    #[arg(long, env = "CARRYON_MEMORIZE_DOCS")]
    memorize_docs: Option<usize>,
    #[arg(long, env = "CARRYON_MEMORIZE_LEN")]
    memorize_len: Option<usize>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct GenDataSettings {
    out: Option<PathBuf>,
    seed: u64,
    corpus_chars: usize,
    qa_train: usize,
    qa_val: usize,
    qa_eval: usize,
    memorize_docs: usize,
    memorize_len: usize,
}

impl Default for GenDataSettings {
    fn default() -> Self {
        Self {
            out: None,
            seed: 0,
            corpus_chars: 200_000,
            qa_train: 2000,
            qa_val: 100,
            qa_eval: 100,
            memorize_docs: 3000,
            memorize_len: 16,
        }
    }
}

fn write_jsonl(path: &Path, items: &[QaItem]) -> anyhow::Result<()> {
    let mut s = String::new();
    for it in items {
        s.push_str(&serde_json::to_string(it)?);
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

pub fn gen_data(a: GenDataArgs) -> anyhow::Result<()> {
    let s: GenDataSettings = resolve(&a, a.config.as_deref())?;
    let dir = required(&s.out, "out")?;
    std::fs::create_dir_all(dir)?;
    let names = ["corpus.txt", "qa_train.jsonl", "qa_val.jsonl", "qa_eval.jsonl", "memorize.txt"];
    let outs: Vec<PathBuf> = names.iter().map(|n| dir.join(n)).collect();
    let out_refs: Vec<&Path> = outs.iter().map(|p| p.as_path()).collect();
    let ins: Vec<&Path> = a.config.iter().map(|p| p.as_path()).collect();
    write_manifest(&RunManifest::new("gen-data", &s, s.seed, &ins, &out_refs)?, &dir.join("manifest.json"))?;

    std::fs::write(&outs[0], arithmetic_corpus(s.corpus_chars, s.seed))?;
    let qa = arithmetic_qa(s.qa_train + s.qa_val + s.qa_eval, s.seed);
    let (train, rest) = qa.split_at(s.qa_train);
    let (val, eval) = rest.split_at(s.qa_val);
    write_jsonl(&outs[1], train)?;
    write_jsonl(&outs[2], val)?;
    write_jsonl(&outs[3], eval)?;
    let mut mem = memorization_corpus(s.memorize_docs, s.memorize_len, s.seed).join("\n");
    mem.push('\n');
    std::fs::write(&outs[4], mem)?;
    for p in &outs {
        println!("wrote {}", p.display());
    }
    Ok(())
}

// pretrain-base

#[derive(Args, Serialize)]
pub struct PretrainArgs {
    /// JSON settings file.
    #[arg(long, env = "CARRYON_CONFIG")]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Text corpus, one document per line.
    #[arg(long, env = "CARRYON_CORPUS")]
    corpus: Option<PathBuf>,
    /// Model file to write.
    #[arg(long, env = "CARRYON_OUT")]
    out: Option<PathBuf>,
    #[arg(long, env = "CARRYON_DIM")]
    dim: Option<usize>,
    #[arg(long, env = "CARRYON_LAYERS")]
    layers: Option<usize>,
    #[arg(long, env = "CARRYON_HEADS")]
    heads: Option<usize>,
    #[arg(long, env = "CARRYON_MAX_SEQ")]
    max_seq: Option<usize>,
    #[arg(long, env = "CARRYON_SEED")]
    seed: Option<u64>,
    #[arg(long, env = "CARRYON_STEPS")]
    steps: Option<usize>,
    #[arg(long, env = "CARRYON_LR")]
    lr: Option<f64>,
    #[arg(long, env = "CARRYON_MIN_LR")]
    min_lr: Option<f64>,
    #[arg(long, env = "CARRYON_WARMUP_STEPS")]
    warmup_steps: Option<usize>,
    #[arg(long, env = "CARRYON_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long, env = "CARRYON_SEQ_LEN")]
    seq_len: Option<usize>,
    #[arg(long, env = "CARRYON_WEIGHT_DECAY")]
    weight_decay: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct PretrainSettings {
    corpus: Option<PathBuf>,
    out: Option<PathBuf>,
    dim: usize,
    layers: usize,
    heads: usize,
    max_seq: usize,
    seed: u64,
    steps: usize,
    lr: f64,
    min_lr: f64,
    warmup_steps: usize,
    batch_size: usize,
    seq_len: usize,
    weight_decay: f64,
}

impl Default for PretrainSettings {
    fn default() -> Self {
        let b = BaseConfig::default();
        let p = PretrainConfig::default();
        Self {
            corpus: None,
            out: None,
            dim: b.dim,
            layers: b.layers,
            heads: b.heads,
            max_seq: b.max_seq,
            seed: b.seed,
            steps: p.steps,
            lr: p.lr,
            min_lr: p.min_lr,
            warmup_steps: p.warmup_steps,
            batch_size: p.batch_size,
            seq_len: p.seq_len,
            weight_decay: p.weight_decay,
        }
    }
}

pub fn pretrain(a: PretrainArgs) -> anyhow::Result<()> {
    let s: PretrainSettings = resolve(&a, a.config.as_deref())?;
    let corpus = required(&s.corpus, "corpus")?;
    let out = required(&s.out, "out")?;
    require_exists(corpus)?;
    let mut ins = vec![corpus];
    ins.extend(a.config.as_deref());
    write_manifest(&RunManifest::new("pretrain-base", &s, s.seed, &ins, &[out])?, &manifest_path(out))?;

    let text = std::fs::read_to_string(corpus).with_context(|| format!("reading {}", corpus.display()))?;
    let cfg = BaseConfig {
        vocab_size: BYTE_VOCAB,
        dim: s.dim,
        layers: s.layers,
        heads: s.heads,
        max_seq: s.max_seq,
        seed: s.seed,
    };
    let pc = PretrainConfig {
        steps: s.steps,
        lr: s.lr,
        min_lr: s.min_lr,
        warmup_steps: s.warmup_steps,
        batch_size: s.batch_size,
        seq_len: s.seq_len,
        weight_decay: s.weight_decay,
    };
    let (model, report) = pretrain_base(&text, cfg, &pc)?;
    model.save(out)?;
    println!(
        "pretrained {} steps, first loss {:.4}, final loss {:.4}",
        report.losses.len(),
        report.losses.first().copied().unwrap_or(f64::NAN),
        report.final_loss().unwrap_or(f64::NAN)
    );
    println!("wrote {} (sha256 {})", out.display(), hex::encode(model.hash()?));
    Ok(())
}

// serve

#[derive(Args, Serialize)]
pub struct ServeArgs {
    /// JSON settings file.
    #[arg(long, env = "CARRYON_CONFIG")]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Frozen base model file.
    #[arg(long, env = "CARRYON_MODEL")]
    model: Option<PathBuf>,
    /// Listen address; port 0 picks a free port.
    #[arg(long, env = "CARRYON_BIND")]
    bind: Option<String>,
    /// Only accept clients asking for this quantization.
    #[arg(long, env = "CARRYON_BITS")]
    bits: Option<u8>,
    /// Only serve these tap depths (comma separated).
    #[arg(long, env = "CARRYON_DEPTHS", value_delimiter = ',')]
    depths: Option<Vec<usize>>,
    /// Keep accepting clients after a session ends; stop with SIGINT.
    #[arg(long, env = "CARRYON_KEEP_SERVING", num_args = 0..=1, default_missing_value = "true")]
    keep_serving: Option<bool>,
    /// Write a run manifest here.
    #[arg(long, env = "CARRYON_MANIFEST")]
    #[serde(skip)]
    manifest: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct ServeSettings {
    model: Option<PathBuf>,
    bind: String,
    bits: Option<u8>,
    depths: Option<Vec<usize>>,
    keep_serving: bool,
}

impl Default for ServeSettings {
    fn default() -> Self {
        Self {
            model: None,
            bind: "127.0.0.1:7070".into(),
            bits: None,
            depths: None,
            keep_serving: false,
        }
    }
}

pub fn serve(a: ServeArgs) -> anyhow::Result<()> {
    let s: ServeSettings = resolve(&a, a.config.as_deref())?;
    let model_path = required(&s.model, "model")?;
    require_exists(model_path)?;
    if let Some(m) = &a.manifest {
        let mut ins = vec![model_path];
        ins.extend(a.config.as_deref());
        write_manifest(&RunManifest::new("serve", &s, 0, &ins, &[])?, m)?;
    }
    let model = load_base(model_path)?;
    let opts = ServeOptions {
        bits: s.bits,
        depths: s.depths.clone(),
        push_corpus: None,
        once: !s.keep_serving,
        drop_after_batches: None,
    };
    let server = Server::bind(model, s.bind.as_str(), opts)?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let flag = shutdown.clone();
    ctrlc::set_handler(move || flag.store(true, Ordering::SeqCst)).context("installing the SIGINT handler")?;

    println!("listening on {}", server.local_addr()?);
    println!("model sha256 {}", hex::encode(server.model_hash()));
    std::io::stdout().flush()?;
    let ends = server.run(&shutdown)?;
    for e in &ends {
        match e {
            SessionEnd::Ended { batches } => println!("session ended after {batches} batches"),
            SessionEnd::Shutdown { batches } => println!("shut down after {batches} batches"),
            SessionEnd::Rejected(why) => println!("rejected a client: {why}"),
            SessionEnd::Aborted { offset, error } => println!("aborted a session at byte {offset}: {error}"),
            SessionEnd::Dropped { batches } => println!("dropped a session after {batches} batches"),
        }
    }
    Ok(())
}

// train

#[derive(Args, Serialize)]
pub struct TrainArgs {
    /// JSON settings file.
    #[arg(long, env = "CARRYON_CONFIG")]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// `local` runs the base in-process, `remote` reads taps from `serve`.
    #[arg(long, env = "CARRYON_MODE", value_parser = ["local", "remote"])]
    mode: Option<String>,
    /// Base model file(s), in the carry-on config's base order.
    #[arg(long, env = "CARRYON_BASE", value_delimiter = ',')]
    base: Option<Vec<PathBuf>>,
    /// Carry-on architecture (JSON); defaults to a small dense carry-on.
    #[arg(long, env = "CARRYON_CARRYON_CONFIG")]
    carryon_config: Option<PathBuf>,
    #[arg(long, env = "CARRYON_ALPHA_MODE", value_parser = ["fixed", "grid", "neighborhood", "balance"])]
    alpha_mode: Option<String>,
    /// Overrides the carry-on config's starting α.
    #[arg(long, env = "CARRYON_ALPHA_INIT")]
    alpha_init: Option<f64>,
    #[arg(long, env = "CARRYON_EPOCHS")]
    epochs: Option<usize>,
    /// Training corpus (`.jsonl` QA items or text lines).
    #[arg(long, env = "CARRYON_TRAIN")]
    train: Option<PathBuf>,
    /// Validation corpus, used for α selection.
    #[arg(long, env = "CARRYON_VAL")]
    val: Option<PathBuf>,
    /// General-domain corpus for balance mode.
    #[arg(long, env = "CARRYON_GENERAL")]
    general: Option<PathBuf>,
    /// Bundle file to write.
    #[arg(long, env = "CARRYON_OUT")]
    out: Option<PathBuf>,
    /// Loss curve CSV; defaults to `<out>.curves.csv`.
    #[arg(long, env = "CARRYON_CURVES")]
    curves: Option<PathBuf>,
    /// Prompt template file for `.jsonl` corpora.
    #[arg(long, env = "CARRYON_TEMPLATE")]
    template: Option<PathBuf>,
    /// Tap quantization: 0 (none), 2, 3, 4 or 8.
    #[arg(long, env = "CARRYON_BITS")]
    bits: Option<u8>,
    /// Inference service address for remote mode.
    #[arg(long, env = "CARRYON_ADDR")]
    addr: Option<String>,
    #[arg(long, env = "CARRYON_BATCH_SIZE")]
    batch_size: Option<usize>,
    #[arg(long, env = "CARRYON_LR")]
    lr: Option<f64>,
    #[arg(long, env = "CARRYON_MIN_LR")]
    min_lr: Option<f64>,
    #[arg(long, env = "CARRYON_WARMUP_STEPS")]
    warmup_steps: Option<usize>,
    #[arg(long, env = "CARRYON_WEIGHT_DECAY")]
    weight_decay: Option<f64>,
    /// Loss ignores positions before this one.
    #[arg(long, env = "CARRYON_MASK_BEFORE")]
    mask_before: Option<usize>,
    #[arg(long, env = "CARRYON_MAX_SEQ_LEN")]
    max_seq_len: Option<usize>,
    #[arg(long, env = "CARRYON_BALANCE_FLOOR")]
    balance_floor: Option<f64>,
    #[arg(long, env = "CARRYON_MAX_STEPS")]
    max_steps: Option<usize>,
    #[arg(long, env = "CARRYON_SEED")]
    seed: Option<u64>,
    /// Where to save the carry-on if training diverges or the service is lost.
    #[arg(long, env = "CARRYON_CHECKPOINT")]
    checkpoint: Option<PathBuf>,
    /// Also update the base (local, one base, no quantization).
    #[arg(long, env = "CARRYON_JOINT", num_args = 0..=1, default_missing_value = "true")]
    joint: Option<bool>,
    /// Base learning rate in joint mode.
    #[arg(long, env = "CARRYON_BASE_LR")]
    base_lr: Option<f64>,
    /// Updated base file in joint mode.
    #[arg(long, env = "CARRYON_BASE_OUT")]
    base_out: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
enum Mode {
    Local,
    Remote,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainSettings {
    mode: Mode,
    base: Vec<PathBuf>,
    carryon_config: Option<PathBuf>,
    alpha_mode: AlphaMode,
    alpha_init: Option<f64>,
    epochs: usize,
    train: Option<PathBuf>,
    val: Option<PathBuf>,
    general: Option<PathBuf>,
    out: Option<PathBuf>,
    curves: Option<PathBuf>,
    template: Option<PathBuf>,
    bits: u8,
    addr: String,
    batch_size: usize,
    lr: f64,
    min_lr: f64,
    warmup_steps: usize,
    weight_decay: f64,
    mask_before: usize,
    max_seq_len: usize,
    balance_floor: f64,
    max_steps: Option<usize>,
    seed: u64,
    checkpoint: Option<PathBuf>,
    joint: bool,
    base_lr: f64,
    base_out: Option<PathBuf>,
}

impl Default for TrainSettings {
    fn default() -> Self {
        let t = TrainConfig::default();
        Self {
            mode: Mode::Local,
            base: Vec::new(),
            carryon_config: None,
            alpha_mode: t.alpha_mode,
            alpha_init: None,
            epochs: t.epochs,
            train: None,
            val: None,
            general: None,
            out: None,
            curves: None,
            template: None,
            bits: 0,
            addr: "127.0.0.1:7070".into(),
            batch_size: t.batch_size,
            lr: t.lr,
            min_lr: t.min_lr,
            warmup_steps: t.warmup_steps,
            weight_decay: t.weight_decay,
            mask_before: t.mask_before,
            max_seq_len: t.max_seq_len,
            balance_floor: t.balance_floor,
            max_steps: t.max_steps,
            seed: t.seed,
            checkpoint: None,
            joint: false,
            base_lr: t.base_lr,
            base_out: None,
        }
    }
}

impl TrainSettings {
    fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            lr: self.lr,
            min_lr: self.min_lr,
            warmup_steps: self.warmup_steps,
            weight_decay: self.weight_decay,
            mask_before: self.mask_before,
            max_seq_len: self.max_seq_len,
            alpha_mode: self.alpha_mode,
            balance_floor: self.balance_floor,
            max_steps: self.max_steps,
            seed: self.seed,
            checkpoint: self.checkpoint.clone(),
            base_lr: self.base_lr,
        }
    }
}

fn load_carryon_config(p: Option<&Path>) -> anyhow::Result<CarryOnConfig> {
    let Some(p) = p else {
        return Ok(CarryOnConfig::default());
    };
    require_exists(p)?;
    let text = std::fs::read_to_string(p)?;
    serde_json::from_str(&text).map_err(|e| usage(format!("carry-on config {}: {e}", p.display())))
}

fn print_alpha_table(report: &TrainReport) {
    for rec in &report.alpha.history {
        println!("epoch {} alpha candidates:", rec.epoch);
        println!("  {:>10}  {:>12}", "alpha", "val_loss");
        let mut rows = rec.evaluated.clone();
        rows.sort_by(|a, b| a.0.total_cmp(&b.0));
        for (alpha, j) in rows {
            let mark = if alpha == rec.chosen { "  <- chosen" } else { "" };
            println!("  {alpha:>10.6}  {j:>12.6}{mark}");
        }
    }
}

pub fn train(a: TrainArgs) -> anyhow::Result<()> {
    let s: TrainSettings = resolve(&a, a.config.as_deref())?;
    let out = required(&s.out, "out")?;
    let train_path = required(&s.train, "train")?;
    let val_path = required(&s.val, "val")?;
    if s.base.is_empty() {
        return Err(usage("--base is required"));
    }
    if s.joint && (s.mode != Mode::Local || s.bits != 0) {
        return Err(usage("--joint needs --mode local and --bits 0"));
    }
    if s.joint && s.base_out.is_none() {
        return Err(usage("--joint needs --base-out"));
    }
    if s.mode == Mode::Remote && s.base.len() != 1 {
        return Err(usage("remote mode reads exactly one base"));
    }
    let curves = s.curves.clone().unwrap_or_else(|| with_suffix(out, ".curves.csv"));
    let report_path = with_suffix(out, ".report.json");

    let mut ins: Vec<&Path> = s.base.iter().map(|p| p.as_path()).collect();
    ins.extend(inputs([&s.train, &s.val, &s.general, &s.carryon_config, &s.template, &a.config]));
    let mut outs = vec![out, curves.as_path(), report_path.as_path()];
    outs.extend(inputs([&s.base_out]));
    let manifest = RunManifest::new("train", &s, s.seed, &ins, &outs)?;
    write_manifest(&manifest, &manifest_path(out))?;

    let mut cc = load_carryon_config(s.carryon_config.as_deref())?;
    if let Some(a0) = s.alpha_init {
        cc.alpha_init = a0;
    }
    if cc.bases.len() != s.base.len() {
        return Err(usage(format!(
            "the carry-on config names {} base(s) but {} --base given",
            cc.bases.len(),
            s.base.len()
        )));
    }
    let mut bases = s.base.iter().map(|p| load_base(p)).collect::<anyhow::Result<Vec<_>>>()?;
    let infos = cc
        .bases
        .iter()
        .zip(&bases)
        .map(|(mix, m)| BaseInfo::from_model(&mix.name, m))
        .collect::<carryon_core::Result<Vec<_>>>()?;
    let mut carry = CarryOn::new(cc, infos)?;

    let template = load_template(s.template.as_deref())?;
    let train_seqs = load_corpus(train_path, &template)?;
    let val_seqs = load_corpus(val_path, &template)?;
    let general = s.general.as_deref().map(|p| load_corpus(p, &template)).transpose()?;
    let data = Corpora {
        train: &train_seqs,
        val: &val_seqs,
        general: general.as_deref(),
    };
    let cfg = s.train_config();

    let report = match s.mode {
        Mode::Local if s.joint => {
            let r = train_joint(&mut carry, &mut bases[0], data, &cfg)?;
            let p = s.base_out.as_deref().expect("checked");
            bases[0].save(p)?;
            println!("wrote updated base {}", p.display());
            r
        }
        Mode::Local => {
            let refs: Vec<&BaseModel> = bases.iter().collect();
            let mut src = LocalTapSource::new(refs, &carry, s.bits)?.with_cache();
            train_carryon(&mut carry, &mut src, data, &cfg)?
        }
        Mode::Remote => {
            let session = SessionConfig::for_carryon(s.addr.clone(), &carry, s.bits, bases[0].config().max_seq)?;
            let (r, reconnects) = train_remote(session, &mut carry, data, &cfg)?;
            if reconnects > 0 {
                println!("reconnected {reconnects} time(s)");
            }
            r
        }
    };

    save_bundle(&carry, out)?;
    write_curves_csv(&curves, &report.curves)?;
    std::fs::write(&report_path, serde_json::to_string_pretty(&report)?)?;
    print_alpha_table(&report);
    let last_train = report.curves.iter().rev().find(|p| p.split == Split::Train).map(|p| p.loss);
    println!(
        "trained {} steps; val loss {:.6} -> {:.6}; last train loss {:.6}; alpha {}",
        report.steps,
        report.initial_val_loss,
        report.final_val_loss,
        last_train.unwrap_or(f64::NAN),
        carry.alpha
    );
    if s.mode == Mode::Remote {
        println!("received {} bytes ({:.1} per step)", report.bytes_received, report.bytes_per_step());
    }
    println!("wrote {}, {}, {}", out.display(), curves.display(), report_path.display());
    Ok(())
}

// eval

#[derive(Args, Serialize)]
pub struct EvalArgs {
    /// JSON settings file.
    #[arg(long, env = "CARRYON_CONFIG")]
    #[serde(skip)]
    config: Option<PathBuf>,
    /// Trained carry-on bundle.
    #[arg(long, env = "CARRYON_BUNDLE")]
    bundle: Option<PathBuf>,
    /// Base model file(s) the bundle was trained on.
    #[arg(long, env = "CARRYON_BASE", value_delimiter = ',')]
    base: Option<Vec<PathBuf>>,
    /// QA items, one JSON object per line.
    #[arg(long, env = "CARRYON_QA")]
    qa: Option<PathBuf>,
    /// Defaults to the bundle's α; 0 runs the base pathway only.
    #[arg(long, env = "CARRYON_ALPHA")]
    alpha: Option<f64>,
    /// Also report validation cross-entropy on this corpus.
    #[arg(long, env = "CARRYON_VAL")]
    val: Option<PathBuf>,
    #[arg(long, env = "CARRYON_TEMPLATE")]
    template: Option<PathBuf>,
    #[arg(long, env = "CARRYON_MAX_NEW_TOKENS")]
    max_new_tokens: Option<usize>,
    #[arg(long, env = "CARRYON_BITS")]
    bits: Option<u8>,
    #[arg(long, env = "CARRYON_MASK_BEFORE")]
    mask_before: Option<usize>,
    /// JSON report path.
    #[arg(long, env = "CARRYON_REPORT")]
    report: Option<PathBuf>,
    /// CSV report path.
    #[arg(long, env = "CARRYON_CSV")]
    csv: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct EvalSettings {
    bundle: Option<PathBuf>,
    base: Vec<PathBuf>,
    qa: Option<PathBuf>,
    alpha: Option<f64>,
    val: Option<PathBuf>,
    template: Option<PathBuf>,
    max_new_tokens: usize,
    bits: u8,
    mask_before: usize,
    report: Option<PathBuf>,
    csv: Option<PathBuf>,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            bundle: None,
            base: Vec::new(),
            qa: None,
            alpha: None,
            val: None,
            template: None,
            max_new_tokens: DecodeOptions::default().max_new_tokens,
            bits: 0,
            mask_before: TrainConfig::default().mask_before,
            report: None,
            csv: None,
        }
    }
}

fn examples_cross_entropy(
    carry: &CarryOn,
    src: &mut LocalTapSource<'_>,
    seqs: &[TokenSequence],
    alpha: f64,
    mask_before: usize,
) -> anyhow::Result<f64> {
    use carryon_core::trainer::TapSource;
    let seqs = truncate_all(seqs, src.max_len() + 1);
    let ex = prepare_examples(src, &seqs)?;
    Ok(val_cross_entropy(carry, &ex, alpha, mask_before)?)
}

pub fn eval(a: EvalArgs) -> anyhow::Result<()> {
    let s: EvalSettings = resolve(&a, a.config.as_deref())?;
    let bundle = required(&s.bundle, "bundle")?;
    let qa_path = required(&s.qa, "qa")?;
    require_exists(bundle)?;
    require_exists(qa_path)?;
    if s.base.is_empty() {
        return Err(usage("--base is required"));
    }
    if let Some(r) = &s.report {
        let mut ins: Vec<&Path> = vec![bundle, qa_path];
        ins.extend(s.base.iter().map(|p| p.as_path()));
        ins.extend(inputs([&s.val, &s.template, &a.config]));
        let outs: Vec<&Path> = inputs([&s.report, &s.csv]);
        write_manifest(&RunManifest::new("eval", &s, 0, &ins, &outs)?, &manifest_path(r))?;
    }

    let carry = load_carry(bundle)?;
    let bases = load_bases_for(&s.base, &carry)?;
    if carry.bases().len() != 1 {
        return Err(usage("eval decodes against exactly one base"));
    }
    let alpha = s.alpha.unwrap_or(carry.alpha);
    let opts = DecodeOptions {
        max_new_tokens: s.max_new_tokens,
        template: load_template(s.template.as_deref())?,
    };
    let items = load_qa_jsonl(qa_path)?;
    let refs: Vec<&BaseModel> = bases.iter().collect();
    let mut src = LocalTapSource::new(refs, &carry, s.bits)?;
    let mut report = exact_match_accuracy(&bases[0], &carry, &mut src, &items, alpha, &opts)?;
    if let Some(v) = &s.val {
        let seqs = load_corpus(v, &opts.template)?;
        report.val_loss = Some(examples_cross_entropy(&carry, &mut src, &seqs, alpha, s.mask_before)?);
    }

    println!("alpha {alpha}");
    if alpha == 0.0 {
        println!("base pathway only");
    }
    println!("accuracy base    {:.4}", report.accuracy_base);
    println!("accuracy carryon {:.4}", report.accuracy_carryon);
    if let Some(v) = report.val_loss {
        println!("val loss {v:.6}");
    }
    if let Some(p) = &s.report {
        std::fs::write(p, report.to_json()?)?;
        println!("wrote {}", p.display());
    }
    if let Some(p) = &s.csv {
        std::fs::write(p, report.to_csv())?;
        println!("wrote {}", p.display());
    }
    Ok(())
}

// alpha-report

#[derive(Args, Serialize)]
pub struct AlphaReportArgs {
    /// JSON settings file.
    #[arg(long, env = "CARRYON_CONFIG")]
    #[serde(skip)]
    config: Option<PathBuf>,
    #[arg(long, env = "CARRYON_BUNDLE")]
    bundle: Option<PathBuf>,
    #[arg(long, env = "CARRYON_BASE", value_delimiter = ',')]
    base: Option<Vec<PathBuf>>,
    /// Validation corpus.
    #[arg(long, env = "CARRYON_VAL")]
    val: Option<PathBuf>,
    /// General-domain corpus, reported beside the validation loss.
    #[arg(long, env = "CARRYON_GENERAL")]
    general: Option<PathBuf>,
    /// α values (comma separated).
    #[arg(long, env = "CARRYON_ALPHAS", value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    #[arg(long, env = "CARRYON_TEMPLATE")]
    template: Option<PathBuf>,
    #[arg(long, env = "CARRYON_BITS")]
    bits: Option<u8>,
    #[arg(long, env = "CARRYON_MASK_BEFORE")]
    mask_before: Option<usize>,
    /// Slack allowed in the quasi-convexity check.
    #[arg(long, env = "CARRYON_TOL")]
    tol: Option<f64>,
    /// JSON output path.
    #[arg(long, env = "CARRYON_OUT")]
    out: Option<PathBuf>,
}

#[derive(Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct AlphaReportSettings {
    bundle: Option<PathBuf>,
    base: Vec<PathBuf>,
    val: Option<PathBuf>,
    general: Option<PathBuf>,
    alphas: Vec<f64>,
    template: Option<PathBuf>,
    bits: u8,
    mask_before: usize,
    tol: f64,
    out: Option<PathBuf>,
}

impl Default for AlphaReportSettings {
    fn default() -> Self {
        Self {
            bundle: None,
            base: Vec::new(),
            val: None,
            general: None,
            alphas: GRID.to_vec(),
            template: None,
            bits: 0,
            mask_before: TrainConfig::default().mask_before,
            tol: 0.0,
            out: None,
        }
    }
}

#[derive(Serialize)]
struct AlphaRow {
    alpha: f64,
    val_loss: f64,
    general_loss: Option<f64>,
}

#[derive(Serialize)]
struct AlphaReportOut {
    rows: Vec<AlphaRow>,
    quasiconvex: bool,
    violation: Option<(f64, f64, f64)>,
}

pub fn alpha_report(a: AlphaReportArgs) -> anyhow::Result<()> {
    let s: AlphaReportSettings = resolve(&a, a.config.as_deref())?;
    let bundle = required(&s.bundle, "bundle")?;
    let val = required(&s.val, "val")?;
    require_exists(bundle)?;
    require_exists(val)?;
    if s.base.is_empty() {
        return Err(usage("--base is required"));
    }
    if s.alphas.is_empty() || s.alphas.iter().any(|a| !a.is_finite() || *a < 0.0) {
        return Err(usage("--alphas must be non-negative finite numbers"));
    }
    if let Some(o) = &s.out {
        let mut ins: Vec<&Path> = vec![bundle, val];
        ins.extend(s.base.iter().map(|p| p.as_path()));
        ins.extend(inputs([&s.general, &s.template, &a.config]));
        write_manifest(&RunManifest::new("alpha-report", &s, 0, &ins, &[o])?, &manifest_path(o))?;
    }

    let carry = load_carry(bundle)?;
    let bases = load_bases_for(&s.base, &carry)?;
    let template = load_template(s.template.as_deref())?;
    let val_seqs = load_corpus(val, &template)?;
    let general = s.general.as_deref().map(|p| load_corpus(p, &template)).transpose()?;
    let refs: Vec<&BaseModel> = bases.iter().collect();
    let mut src = LocalTapSource::new(refs, &carry, s.bits)?.with_cache();

    let mut rows = Vec::with_capacity(s.alphas.len());
    for &alpha in &s.alphas {
        let val_loss = examples_cross_entropy(&carry, &mut src, &val_seqs, alpha, s.mask_before)?;
        let general_loss = general
            .as_deref()
            .map(|g| examples_cross_entropy(&carry, &mut src, g, alpha, s.mask_before))
            .transpose()?;
        rows.push(AlphaRow {
            alpha,
            val_loss,
            general_loss,
        });
    }
    let samples: Vec<(f64, f64)> = rows.iter().map(|r| (r.alpha, r.val_loss)).collect();
    let qc = check_quasiconvex(&samples, s.tol);

    if general.is_some() {
        println!("{:>10}  {:>12}  {:>12}", "alpha", "val_loss", "general_loss");
    } else {
        println!("{:>10}  {:>12}", "alpha", "val_loss");
    }
    for r in &rows {
        match r.general_loss {
            Some(g) => println!("{:>10.6}  {:>12.6}  {g:>12.6}", r.alpha, r.val_loss),
            None => println!("{:>10.6}  {:>12.6}", r.alpha, r.val_loss),
        }
    }
    match qc.violation {
        None => println!("quasi-convex: yes"),
        Some((i, k, j)) => println!("quasi-convex: no (J({k}) exceeds both J({i}) and J({j}))"),
    }
    if let Some(o) = &s.out {
        let out = AlphaReportOut {
            rows,
            quasiconvex: qc.holds,
            violation: qc.violation,
        };
        std::fs::write(o, serde_json::to_string_pretty(&out)?)?;
        println!("wrote {}", o.display());
    }
    Ok(())
}
