//! Small decoder-only transformer used as the frozen base.
//!
//! Layout: token + learned position embeddings (depth 0), `L` pre-norm blocks
//! (RMS norm, causal attention, RMS norm, SiLU FFN, each with a residual),
//! a final RMS norm (depth `L`), and an untied vocabulary projection.

pub mod container;
pub mod tokenizer;

use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numcore::nn::{register, DenseFfn, Init, MultiHeadAttention};
use crate::numcore::{masked_mean_weights, named_rng, Float, Graph, ParamId, ParamStore, Tensor, Var};
use crate::trainer::optim::{AdamWConfig, OptimState};
use crate::trainer::schedule::CosineWarmup;
use tokenizer::ByteTokenizer;
pub use tokenizer::{TokenSequence, BOS, BYTE_VOCAB, EOS};

pub const NORM_EPS: Float = 1e-6;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BaseConfig {
    pub vocab_size: usize,
    pub dim: usize,
    pub layers: usize,
    pub heads: usize,
    pub max_seq: usize,
    pub seed: u64,
}

impl Default for BaseConfig {
    fn default() -> Self {
        Self {
            vocab_size: BYTE_VOCAB,
            dim: 64,
            layers: 4,
            heads: 4,
            max_seq: 320,
            seed: 0,
        }
    }
}

impl BaseConfig {
    pub fn validate(&self) -> Result<()> {
        if self.vocab_size < 2 {
            return Err(Error::config("vocab_size must be at least 2"));
        }
        if self.layers < 2 {
            return Err(Error::config("base needs at least 2 layers"));
        }
        if self.heads == 0 || self.dim % self.heads != 0 {
            return Err(Error::config(format!(
                "dim {} is not divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.max_seq == 0 {
            return Err(Error::config("max_seq must be positive"));
        }
        Ok(())
    }
}

/// Residual-stream embedding of one sequence at one depth.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerTap {
    pub depth: usize,
    pub values: Tensor,
}

#[derive(Clone, Debug)]
struct Block {
    attn_norm: ParamId,
    attn: MultiHeadAttention,
    ffn_norm: ParamId,
    ffn: DenseFfn,
}

/// Graph handles produced by [`BaseModel::forward`].
pub struct BaseTrace {
    /// `taps[i]` is the stream at depth `i`, for `i` in `0..=L`.
    pub taps: Vec<Var>,
    pub logits: Option<Var>,
}

#[derive(Clone, Debug)]
pub struct BaseModel {
    cfg: BaseConfig,
    store: ParamStore,
    tok_emb: ParamId,
    pos_emb: ParamId,
    blocks: Vec<Block>,
    final_norm: ParamId,
    head: ParamId,
}

impl BaseModel {
    /// Randomly initialised, trainable model.
    pub fn new(cfg: BaseConfig) -> Result<Self> {
        cfg.validate()?;
        let (d, seed) = (cfg.dim, cfg.seed);
        let out_std = 0.02 / ((2 * cfg.layers) as Float).sqrt();
        let mut store = ParamStore::new();
        let tok_emb = register(&mut store, "tok_emb", &[cfg.vocab_size, d], Init::Normal(0.02), seed, true);
        let pos_emb = register(&mut store, "pos_emb", &[cfg.max_seq, d], Init::Normal(0.01), seed, true);
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("blocks.{i}");
                Block {
                    attn_norm: register(&mut store, &format!("{p}.attn_norm"), &[d], Init::Ones, seed, true),
                    attn: MultiHeadAttention::init(&mut store, &format!("{p}.attn"), d, cfg.heads, seed, out_std),
                    ffn_norm: register(&mut store, &format!("{p}.ffn_norm"), &[d], Init::Ones, seed, true),
                    ffn: DenseFfn::init(&mut store, &format!("{p}.ffn"), d, 4 * d, seed, out_std),
                }
            })
            .collect();
        let final_norm = register(&mut store, "final_norm", &[d], Init::Ones, seed, true);
        let head = register(&mut store, "head", &[d, cfg.vocab_size], Init::Normal(0.02), seed, true);
        Ok(Self {
            cfg,
            store,
            tok_emb,
            pos_emb,
            blocks,
            final_norm,
            head,
        })
    }

    pub fn config(&self) -> &BaseConfig {
        &self.cfg
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn freeze(&mut self) {
        self.store.freeze_all();
    }

    pub fn is_frozen(&self) -> bool {
        self.store.iter().all(|p| !p.trainable)
    }

    pub fn head_param(&self) -> ParamId {
        self.head
    }

    /// The vocabulary projection `W_out`, `d × V`.
    pub fn output_head(&self) -> &Tensor {
        self.store.value(self.head)
    }

    pub fn validate_ids(&self, ids: &[u32]) -> Result<()> {
        TokenSequence::new(ids.to_vec(), self.cfg.vocab_size, self.cfg.max_seq).map(|_| ())
    }

    /// Forward over sequences stacked row-wise (`seqs` never attend to each
    /// other). All depths are returned; logits only when asked.
    pub fn forward(&self, g: &mut Graph, seqs: &[&[u32]], with_logits: bool) -> Result<BaseTrace> {
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut segs = Vec::with_capacity(seqs.len());
        for s in seqs {
            self.validate_ids(s)?;
            ids.extend(s.iter().map(|&t| t as usize));
            pos.extend(0..s.len());
            segs.push(s.len());
        }
        let s = &self.store;
        let tok = g.param(s, self.tok_emb);
        let pe = g.param(s, self.pos_emb);
        let te = g.gather(tok, &ids)?;
        let pe = g.gather(pe, &pos)?;
        let mut x = g.add(te, pe)?;
        let mut taps = Vec::with_capacity(self.cfg.layers + 1);
        taps.push(x);
        for (i, b) in self.blocks.iter().enumerate() {
            let gain = g.param(s, b.attn_norm);
            let h = g.rms_norm(x, gain, NORM_EPS)?;
            let h = b.attn.forward(g, s, h, &segs)?;
            x = g.add(x, h)?;
            let gain = g.param(s, b.ffn_norm);
            let h = g.rms_norm(x, gain, NORM_EPS)?;
            let h = b.ffn.forward(g, s, h)?;
            x = g.add(x, h)?;
            if i + 1 < self.cfg.layers {
                taps.push(x);
            }
        }
        let gain = g.param(s, self.final_norm);
        let top = g.rms_norm(x, gain, NORM_EPS)?;
        taps.push(top);
        let logits = if with_logits {
            let w = g.param(s, self.head);
            Some(g.matmul(top, w)?)
        } else {
            None
        };
        Ok(BaseTrace { taps, logits })
    }

    /// Taps of one sequence at the requested depths, with nothing recorded
    /// for backward.
    pub fn forward_taps(&self, ids: &[u32], depths: &[usize]) -> Result<Vec<LayerTap>> {
        if let Some(&bad) = depths.iter().find(|&&d| d > self.cfg.layers) {
            return Err(Error::config(format!(
                "tap depth {bad} outside [0, {}]",
                self.cfg.layers
            )));
        }
        let mut g = Graph::inference();
        let trace = self.forward(&mut g, &[ids], false)?;
        Ok(depths
            .iter()
            .map(|&d| LayerTap {
                depth: d,
                values: g.value(trace.taps[d]).clone(),
            })
            .collect())
    }

    /// `x · W_out` for any `n × d` embedding.
    pub fn head_logits(&self, x: &Tensor) -> Result<Tensor> {
        x.matmul(self.output_head())
    }

    pub fn base_logits(&self, ids: &[u32]) -> Result<Tensor> {
        let top = self.forward_taps(ids, &[self.cfg.layers])?.remove(0);
        self.head_logits(&top.values)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let json = container::canonical_json(&self.cfg)?;
        Ok(container::encode(&json, &self.store.named_values()))
    }

    /// Loaded models are frozen.
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (json, params) = container::decode(bytes)?;
        let cfg: BaseConfig = serde_json::from_str(&json)?;
        let mut m = Self::new(cfg)?;
        if params.len() != m.store.len() {
            return Err(Error::Format(format!(
                "model file has {} parameters, expected {}",
                params.len(),
                m.store.len()
            )));
        }
        m.store.load_values(&params)?;
        m.freeze();
        Ok(m)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// SHA-256 of the serialised model, the identity checked at handshake.
    pub fn hash(&self) -> Result<[u8; 32]> {
        Ok(sha256(&self.to_bytes()?))
    }
}

pub fn sha256(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub steps: usize,
    pub lr: Float,
    pub min_lr: Float,
    pub warmup_steps: usize,
    pub batch_size: usize,
    pub seq_len: usize,
    pub weight_decay: Float,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            lr: 3e-3,
            min_lr: 3e-4,
            warmup_steps: 100,
            batch_size: 8,
            seq_len: 64,
            weight_decay: 0.01,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub losses: Vec<Float>,
}

impl PretrainReport {
    pub fn final_loss(&self) -> Option<Float> {
        self.losses.last().copied()
    }
}

/// Documents are the non-empty lines of `corpus`, each wrapped in BOS/EOS and
/// concatenated into one stream; batches are random windows of that stream.
pub fn pretrain_base(
    corpus: &str,
    cfg: BaseConfig,
    pc: &PretrainConfig,
) -> Result<(BaseModel, PretrainReport)> {
    let mut model = BaseModel::new(cfg)?;
    let seq_len = pc.seq_len.min(model.cfg.max_seq);
    if seq_len < 2 || pc.batch_size == 0 {
        return Err(Error::config("pretraining needs seq_len >= 2 and batch_size >= 1"));
    }
    let tok = ByteTokenizer;
    let stream: Vec<u32> = corpus
        .lines()
        .filter(|l| !l.trim().is_empty())
        .flat_map(|l| tok.encode_document(l))
        .collect();
    if stream.len() < seq_len + 1 {
        return Err(Error::data(format!(
            "corpus yields {} tokens, fewer than one window of {}",
            stream.len(),
            seq_len + 1
        )));
    }
    let mut rng = named_rng(model.cfg.seed, "pretrain.windows");
    let sched = CosineWarmup::new(pc.warmup_steps, pc.steps, pc.lr, pc.min_lr);
    let mut opt = OptimState::new(
        &model.store,
        AdamWConfig {
            weight_decay: pc.weight_decay,
            ..AdamWConfig::default()
        },
    );
    let mut report = PretrainReport::default();
    for step in 0..pc.steps {
        let windows: Vec<&[u32]> = (0..pc.batch_size)
            .map(|_| {
                let start = rng.random_range(0..=stream.len() - seq_len - 1);
                &stream[start..start + seq_len + 1]
            })
            .collect();
        let inputs: Vec<&[u32]> = windows.iter().map(|w| &w[..seq_len]).collect();
        let targets: Vec<usize> = windows
            .iter()
            .flat_map(|w| w[1..].iter().map(|&t| t as usize))
            .collect();
        let mut g = Graph::new();
        let trace = model.forward(&mut g, &inputs, true)?;
        let logits = trace.logits.expect("requested");
        let weights = masked_mean_weights(&vec![seq_len; pc.batch_size], 0)?;
        let loss = g.cross_entropy(logits, &targets, &weights)?;
        let l = g.value(loss).data()[0];
        if !l.is_finite() {
            return Err(Error::Divergence {
                step,
                checkpoint: None,
            });
        }
        report.losses.push(l);
        model.store.zero_grad();
        g.backward(loss)?.accumulate(&g, &mut model.store);
        opt.step(&mut model.store, sched.at(step))?;
        if step % 100 == 0 {
            log::debug!("pretrain step {step} loss {l:.4}");
        }
    }
    model.freeze();
    Ok((model, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> BaseConfig {
        BaseConfig {
            dim: 16,
            layers: 2,
            heads: 2,
            max_seq: 32,
            seed: 3,
            ..BaseConfig::default()
        }
    }

    #[test]
    fn config_validation() {
        assert!(BaseConfig { heads: 3, ..tiny() }.validate().is_err());
        assert!(BaseConfig { layers: 1, ..tiny() }.validate().is_err());
        assert!(BaseConfig { vocab_size: 1, ..tiny() }.validate().is_err());
        assert!(tiny().validate().is_ok());
    }

    #[test]
    fn tap_shapes_and_depth_bounds() {
        let m = BaseModel::new(tiny()).unwrap();
        let taps = m.forward_taps(&[BOS], &[0, 2]).unwrap();
        assert_eq!(taps.len(), 2);
        assert!(taps.iter().all(|t| t.values.shape() == [1, 16]));
        assert!(matches!(m.forward_taps(&[BOS], &[3]), Err(Error::Config(_))));
    }

    #[test]
    fn top_tap_through_head_is_base_logits() {
        let m = BaseModel::new(tiny()).unwrap();
        let ids = ByteTokenizer.encode("12 plus 7 is 19.");
        let top = m.forward_taps(&ids, &[2]).unwrap().remove(0);
        let a = m.head_logits(&top.values).unwrap();
        let mut g = Graph::inference();
        let tr = m.forward(&mut g, &[&ids], true).unwrap();
        assert!(a.bit_eq(g.value(tr.logits.unwrap())));
        assert!(a.bit_eq(&m.base_logits(&ids).unwrap()));
        assert_eq!(a.shape(), [ids.len(), BYTE_VOCAB]);
    }

    #[test]
    fn distinct_depths_differ() {
        let m = BaseModel::new(tiny()).unwrap();
        let taps = m.forward_taps(&[BOS, 50, 51, 52], &[0, 1, 2]).unwrap();
        for i in 0..taps.len() {
            for j in i + 1..taps.len() {
                assert!(taps[i].values.max_abs_diff(&taps[j].values) > 0.0);
            }
        }
    }

    #[test]
    fn untrained_loss_is_near_log_vocab() {
        let corpus = "1 plus 2 is 3.\n".repeat(20);
        let pc = PretrainConfig {
            steps: 1,
            batch_size: 2,
            seq_len: 16,
            ..PretrainConfig::default()
        };
        let (_, r) = pretrain_base(&corpus, tiny(), &pc).unwrap();
        let ln_v = (BYTE_VOCAB as Float).ln();
        assert!((r.losses[0] - ln_v).abs() < 0.05, "{} vs {ln_v}", r.losses[0]);
    }

    #[test]
    fn short_corpus_is_a_data_error() {
        let pc = PretrainConfig {
            steps: 1,
            ..PretrainConfig::default()
        };
        assert!(matches!(pretrain_base("1", tiny(), &pc), Err(Error::Data(_))));
    }

    #[test]
    fn save_load_roundtrip_is_bit_exact() {
        let corpus = "3 plus 4 is 7.\n".repeat(40);
        let pc = PretrainConfig {
            steps: 3,
            batch_size: 2,
            seq_len: 16,
            ..PretrainConfig::default()
        };
        let (m, _) = pretrain_base(&corpus, tiny(), &pc).unwrap();
        assert!(m.is_frozen());
        let bytes = m.to_bytes().unwrap();
        let back = BaseModel::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        let ids = ByteTokenizer.encode_document("3 plus");
        assert!(m.base_logits(&ids).unwrap().bit_eq(&back.base_logits(&ids).unwrap()));
    }
}
