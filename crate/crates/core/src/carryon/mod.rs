//! The trainable carry-on network.
//!
//! ```text
//! fused  = fuse_inputs(taps)                 (aligned deep taps, plus shallow taps)
//! t      = trunk(fused)                      (causal pre-norm blocks)
//! Δx     = sigmoid(t·W_g + b_g) ⊙ (t·W_p + b_p)
//! logits = head(α·Δx + x_deep)
//! ```
//! With `reuse_base`, `x_deep` is the dequantized top tap of the single base
//! and `head` is that base's frozen output projection. With a new head,
//! `x_deep` is the mixed, projected deep embedding.

pub mod bundle;
pub mod config;

use rand_chacha::ChaCha8Rng;

pub use bundle::{load_bundle, save_bundle, BaseInfo};
pub use config::{BaseMix, CarryOnConfig, FfnConfig, Fusion, HeadConfig};

use crate::basemodel::NORM_EPS;
use crate::bridge::{align, AlignProj};
use crate::error::{Error, Result};
use crate::numcore::nn::{dropout_mask, register, DenseFfn, Init, Linear, MultiHeadAttention};
use crate::numcore::{Float, Graph, ParamId, ParamStore, Tensor, Var};

/// Dequantized taps of one sequence from one base.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseTaps {
    /// Top-depth tap `x^L`.
    pub deep: Tensor,
    /// One tap per configured shallow depth, in config order.
    pub shallow: Vec<Tensor>,
}

/// Graph handles of one base's taps.
#[derive(Clone, Debug)]
pub struct TapNodes {
    pub deep: Var,
    pub shallow: Vec<Var>,
}

/// Everything the carry-on consumes for one sequence, one entry per base in
/// config order.
#[derive(Clone, Debug, PartialEq)]
pub struct TapSet {
    pub bases: Vec<BaseTaps>,
}

impl TapSet {
    pub fn len(&self) -> usize {
        self.bases.first().map_or(0, |b| b.deep.rows())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub enum Mode<'a> {
    Eval,
    Train {
        router_dropout: Float,
        rng: &'a mut ChaCha8Rng,
    },
}

impl Mode<'_> {
    fn reborrow(&mut self) -> Mode<'_> {
        match self {
            Mode::Eval => Mode::Eval,
            Mode::Train { router_dropout, rng } => Mode::Train {
                router_dropout: *router_dropout,
                rng,
            },
        }
    }
}

#[derive(Clone, Debug)]
pub struct MoeFfn {
    pub router: ParamId,
    pub experts: Vec<DenseFfn>,
    pub top_k: usize,
}

impl MoeFfn {
    /// Router scores, dropout (train mode only), top-k softmax, then each
    /// expert runs on the rows routed to it and the weighted outputs are
    /// scattered back.
    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, mode: Mode<'_>) -> Result<Var> {
        let n = g.value(x).rows();
        let w = g.param(store, self.router);
        let mut scores = g.matmul(x, w)?;
        if let Mode::Train { router_dropout, rng } = mode {
            if router_dropout > 0.0 {
                let shape = g.value(scores).shape().to_vec();
                let mask = g.constant(dropout_mask(&shape, router_dropout, rng));
                scores = g.mul(scores, mask)?;
            }
        }
        let gates = g.top_k_softmax(scores, self.top_k)?;
        let mut out: Option<Var> = None;
        for (e, expert) in self.experts.iter().enumerate() {
            let gv = g.value(gates);
            let e_count = gv.cols();
            let idx: Vec<usize> = (0..n).filter(|&r| gv.data()[r * e_count + e] > 0.0).collect();
            if idx.is_empty() {
                continue;
            }
            let sub = g.gather(x, &idx)?;
            let h = expert.forward(g, store, sub)?;
            let wts = g.select_entries(gates, &idx, e)?;
            let h = g.mul_col(h, wts)?;
            let h = g.scatter_rows(h, &idx, n)?;
            out = Some(match out {
                Some(o) => g.add(o, h)?,
                None => h,
            });
        }
        Ok(out.expect("every row selects at least one expert"))
    }
}

#[derive(Clone, Debug)]
pub enum Ffn {
    Dense(DenseFfn),
    Moe(MoeFfn),
}

#[derive(Clone, Debug)]
struct Block {
    attn_norm: ParamId,
    attn: MultiHeadAttention,
    ffn_norm: ParamId,
    ffn: Ffn,
}

#[derive(Clone, Debug)]
enum Head {
    New {
        bottleneck: Option<Linear>,
        out: Linear,
    },
    Reuse,
}

/// Node handles from one forward pass.
pub struct CarryOnOutput {
    pub logits: Var,
    pub fused: Var,
    pub x_deep: Var,
    pub trunk: Var,
    pub gate: Var,
    pub main: Var,
    pub delta: Var,
}

#[derive(Clone, Debug)]
pub struct CarryOn {
    cfg: CarryOnConfig,
    bases: Vec<BaseInfo>,
    store: ParamStore,
    deep_align: Vec<AlignProj>,
    /// Base-major: `shallow_align[b * m + j]` for base `b`, shallow depth `j`.
    shallow_align: Vec<AlignProj>,
    blocks: Vec<Block>,
    gate: Linear,
    main: Linear,
    head: Head,
    pub alpha: Float,
}

impl CarryOn {
    pub fn new(cfg: CarryOnConfig, bases: Vec<BaseInfo>) -> Result<Self> {
        let dims: Vec<usize> = bases.iter().map(|b| b.dim).collect();
        let layers: Vec<usize> = bases.iter().map(|b| b.layers).collect();
        cfg.validate(&dims, &layers)?;
        for (mix, info) in cfg.bases.iter().zip(&bases) {
            if mix.name != info.name {
                return Err(Error::config(format!(
                    "base `{}` supplied where config expects `{}`",
                    info.name, mix.name
                )));
            }
        }
        let vocab = bases[0].vocab_size;
        if bases.iter().any(|b| b.vocab_size != vocab) {
            return Err(Error::config("all bases must share one vocabulary"));
        }
        let (d, seed) = (cfg.d_carry, cfg.seed);
        let mut store = ParamStore::new();
        let deep_align = bases
            .iter()
            .map(|b| {
                let init = if b.dim == d {
                    Init::Identity
                } else {
                    Init::Normal(1.0 / (b.dim as Float).sqrt())
                };
                AlignProj::init(&mut store, &b.name, b.layers, b.dim, d, init, seed)
            })
            .collect();
        let mut shallow_align = Vec::new();
        for b in &bases {
            for &depth in &cfg.shallow_depths {
                shallow_align.push(AlignProj::init(&mut store, &b.name, depth, b.dim, d, Init::Zeros, seed));
            }
        }
        let out_std = 0.02 / ((2 * cfg.layers.max(1)) as Float).sqrt();
        let blocks = (0..cfg.layers)
            .map(|i| {
                let p = format!("trunk.{i}");
                let ffn = match cfg.ffn {
                    FfnConfig::Dense { hidden } => {
                        Ffn::Dense(DenseFfn::init(&mut store, &format!("{p}.ffn"), d, hidden, seed, out_std))
                    }
                    FfnConfig::Moe {
                        experts,
                        top_k,
                        expert_hidden,
                        ..
                    } => Ffn::Moe(MoeFfn {
                        router: register(&mut store, &format!("{p}.moe.router"), &[d, experts], Init::Normal(0.02), seed, true),
                        experts: (0..experts)
                            .map(|e| DenseFfn::init(&mut store, &format!("{p}.moe.expert{e}"), d, expert_hidden, seed, out_std))
                            .collect(),
                        top_k,
                    }),
                };
                Block {
                    attn_norm: register(&mut store, &format!("{p}.attn_norm"), &[d], Init::Ones, seed, true),
                    attn: MultiHeadAttention::init(&mut store, &format!("{p}.attn"), d, cfg.heads, seed, out_std),
                    ffn_norm: register(&mut store, &format!("{p}.ffn_norm"), &[d], Init::Ones, seed, true),
                    ffn,
                }
            })
            .collect();
        let gate = Linear::init(&mut store, "gate", d, d, Init::Normal(0.02), true, seed, true);
        let main = Linear::init(&mut store, "main", d, d, Init::Normal(0.02), true, seed, true);
        let head = match cfg.head {
            HeadConfig::ReuseBase => Head::Reuse,
            HeadConfig::New { bottleneck } => {
                let bn = bottleneck
                    .map(|k| Linear::init(&mut store, "head.bottleneck", d, k, Init::Normal(0.02), false, seed, true));
                let d_in = bottleneck.unwrap_or(d);
                let out = Linear::init(&mut store, "head.out", d_in, vocab, Init::Normal(0.02), false, seed, true);
                Head::New { bottleneck: bn, out }
            }
        };
        Ok(Self {
            alpha: cfg.alpha_init,
            cfg,
            bases,
            store,
            deep_align,
            shallow_align,
            blocks,
            gate,
            main,
            head,
        })
    }

    pub fn config(&self) -> &CarryOnConfig {
        &self.cfg
    }

    /// Replaces the cached output head of base `b` (after joint training).
    pub fn set_base_head(&mut self, b: usize, head: Tensor) {
        self.bases[b].head = head;
    }

    pub fn bases(&self) -> &[BaseInfo] {
        &self.bases
    }

    pub fn store(&self) -> &ParamStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.store
    }

    pub fn deep_align(&self) -> &[AlignProj] {
        &self.deep_align
    }

    pub fn shallow_align(&self) -> &[AlignProj] {
        &self.shallow_align
    }

    pub fn gate_linear(&self) -> &Linear {
        &self.gate
    }

    pub fn main_linear(&self) -> &Linear {
        &self.main
    }

    /// Depths to request from base `b`: the shallow depths, then the top.
    pub fn required_depths(&self, b: usize) -> Vec<usize> {
        let mut d = self.cfg.shallow_depths.clone();
        d.push(self.bases[b].layers);
        d
    }

    /// Router dropout at training progress `t ∈ [0, 1]`, linear from start to end.
    pub fn router_dropout_at(&self, t: Float) -> Float {
        match self.cfg.ffn {
            FfnConfig::Moe {
                router_dropout_start: s,
                router_dropout_end: e,
                ..
            } => s + (e - s) * t.clamp(0.0, 1.0),
            FfnConfig::Dense { .. } => 0.0,
        }
    }

    fn check_taps(&self, taps: &TapSet) -> Result<usize> {
        if taps.bases.len() != self.bases.len() {
            return Err(Error::data(format!(
                "taps for {} bases, expected {}",
                taps.bases.len(),
                self.bases.len()
            )));
        }
        let n = taps.len();
        for t in &taps.bases {
            if t.shallow.len() != self.cfg.shallow_depths.len() {
                return Err(Error::data("wrong number of shallow taps"));
            }
            if t.deep.rows() != n || t.shallow.iter().any(|s| s.rows() != n) {
                return Err(Error::data("taps disagree on sequence length"));
            }
        }
        if n == 0 {
            return Err(Error::data("empty tap set"));
        }
        Ok(n)
    }

    /// Returns `(fused trunk input, deep-only mixture)`.
    pub fn fuse_inputs(&self, g: &mut Graph, taps: &TapSet) -> Result<(Var, Var)> {
        let nodes = self.tap_constants(g, taps)?;
        self.fuse_nodes(g, &nodes)
    }

    /// Taps as constant nodes: no gradient flows back past them.
    pub fn tap_constants(&self, g: &mut Graph, taps: &TapSet) -> Result<Vec<TapNodes>> {
        self.check_taps(taps)?;
        Ok(taps
            .bases
            .iter()
            .map(|t| TapNodes {
                deep: g.constant(t.deep.clone()),
                shallow: t.shallow.iter().map(|x| g.constant(x.clone())).collect(),
            })
            .collect())
    }

    /// [`CarryOn::fuse_inputs`] over taps already in the graph.
    pub fn fuse_nodes(&self, g: &mut Graph, taps: &[TapNodes]) -> Result<(Var, Var)> {
        if taps.len() != self.bases.len() {
            return Err(Error::data("one tap set per base required"));
        }
        let s = &self.store;
        let mut deep: Option<Var> = None;
        for ((t, proj), mix) in taps.iter().zip(&self.deep_align).zip(&self.cfg.bases) {
            let mut y = align(g, s, t.deep, proj)?;
            if self.bases.len() > 1 {
                y = g.scale(y, mix.weight);
            }
            deep = Some(match deep {
                Some(acc) => g.add(acc, y)?,
                None => y,
            });
        }
        let deep = deep.expect("at least one base");
        if self.cfg.fusion == Fusion::None {
            return Ok((deep, deep));
        }
        let m = self.cfg.shallow_depths.len();
        let mut acc = deep;
        for (b, t) in taps.iter().enumerate() {
            for (j, &x) in t.shallow.iter().enumerate() {
                let y = align(g, s, x, &self.shallow_align[b * m + j])?;
                acc = g.add(acc, y)?;
            }
        }
        if self.cfg.fusion == Fusion::Average {
            let parts = 1 + self.bases.len() * m;
            acc = g.scale(acc, 1.0 / parts as Float);
        }
        Ok((acc, deep))
    }

    pub fn trunk_forward(&self, g: &mut Graph, x: Var, mut mode: Mode<'_>) -> Result<Var> {
        let s = &self.store;
        let n = g.value(x).rows();
        let mut x = x;
        for b in &self.blocks {
            let gain = g.param(s, b.attn_norm);
            let h = g.rms_norm(x, gain, NORM_EPS)?;
            let h = b.attn.forward(g, s, h, &[n])?;
            x = g.add(x, h)?;
            let gain = g.param(s, b.ffn_norm);
            let h = g.rms_norm(x, gain, NORM_EPS)?;
            let h = match &b.ffn {
                Ffn::Dense(f) => f.forward(g, s, h)?,
                Ffn::Moe(m) => m.forward(g, s, h, mode.reborrow())?,
            };
            x = g.add(x, h)?;
        }
        Ok(x)
    }

    /// `head(α·Δx + x_deep)` with `Δx = sigmoid(gate(t)) ⊙ main(t)`.
    /// Returns `(logits, gate, main, Δx)`.
    pub fn compose_logits(
        &self,
        g: &mut Graph,
        x_deep: Var,
        trunk_out: Var,
        alpha: Var,
    ) -> Result<(Var, Var, Var, Var)> {
        self.compose_with_head(g, x_deep, trunk_out, alpha, None)
    }

    /// `reuse_head` replaces the stored base projection as a graph node,
    /// which joint base training needs.
    pub fn compose_with_head(
        &self,
        g: &mut Graph,
        x_deep: Var,
        trunk_out: Var,
        alpha: Var,
        reuse_head: Option<Var>,
    ) -> Result<(Var, Var, Var, Var)> {
        let a = g.value(alpha);
        if a.len() != 1 || !(a.data()[0] >= 0.0) {
            return Err(Error::config(format!("alpha must be a nonnegative scalar, got {:?}", a.data())));
        }
        let s = &self.store;
        let pre = self.gate.forward(g, s, trunk_out)?;
        let gate = g.sigmoid(pre);
        let main = self.main.forward(g, s, trunk_out)?;
        let delta = g.mul(gate, main)?;
        let scaled = g.scale_by(delta, alpha)?;
        let z = g.add(scaled, x_deep)?;
        let logits = match &self.head {
            Head::Reuse => {
                let w = match reuse_head {
                    Some(w) => w,
                    None => g.constant(self.bases[0].head.clone()),
                };
                g.matmul(z, w)?
            }
            Head::New { bottleneck, out } => {
                let z = match bottleneck {
                    Some(bn) => bn.forward(g, s, z)?,
                    None => z,
                };
                out.forward(g, s, z)?
            }
        };
        Ok((logits, gate, main, delta))
    }

    /// Full forward with `alpha` supplied as a graph node.
    pub fn forward_with(&self, g: &mut Graph, taps: &TapSet, alpha: Var, mode: Mode<'_>) -> Result<CarryOnOutput> {
        let nodes = self.tap_constants(g, taps)?;
        self.forward_nodes(g, &nodes, alpha, None, mode)
    }

    pub fn forward_nodes(
        &self,
        g: &mut Graph,
        taps: &[TapNodes],
        alpha: Var,
        reuse_head: Option<Var>,
        mode: Mode<'_>,
    ) -> Result<CarryOnOutput> {
        let (fused, deep_mix) = self.fuse_nodes(g, taps)?;
        let trunk = self.trunk_forward(g, fused, mode)?;
        let x_deep = match self.head {
            Head::Reuse => taps[0].deep,
            Head::New { .. } => deep_mix,
        };
        let (logits, gate, main, delta) = self.compose_with_head(g, x_deep, trunk, alpha, reuse_head)?;
        Ok(CarryOnOutput {
            logits,
            fused,
            x_deep,
            trunk,
            gate,
            main,
            delta,
        })
    }

    pub fn forward(&self, g: &mut Graph, taps: &TapSet, alpha: Float, mode: Mode<'_>) -> Result<CarryOnOutput> {
        let a = g.constant(Tensor::scalar(alpha));
        self.forward_with(g, taps, a, mode)
    }

    /// Evaluation-mode logits at `alpha`.
    pub fn logits(&self, taps: &TapSet, alpha: Float) -> Result<Tensor> {
        let mut g = Graph::inference();
        let out = self.forward(&mut g, taps, alpha, Mode::Eval)?;
        Ok(g.take_value(out.logits))
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::numcore::named_rng;

    pub(crate) fn info(name: &str, dim: usize, layers: usize, vocab: usize) -> BaseInfo {
        let mut rng = named_rng(9, name);
        BaseInfo {
            name: name.into(),
            hash: [0; 32],
            dim,
            layers,
            vocab_size: vocab,
            head: Tensor::randn(&[dim, vocab], 0.3, &mut rng),
        }
    }

    fn taps(n: usize, dim: usize, shallow: usize, seed: u64) -> BaseTaps {
        let mut rng = named_rng(seed, "taps");
        BaseTaps {
            deep: Tensor::randn(&[n, dim], 1.0, &mut rng),
            shallow: (0..shallow).map(|_| Tensor::randn(&[n, dim], 1.0, &mut rng)).collect(),
        }
    }

    fn small(head: HeadConfig) -> CarryOnConfig {
        CarryOnConfig {
            d_carry: 8,
            layers: 1,
            heads: 2,
            ffn: FfnConfig::Dense { hidden: 16 },
            head,
            bases: vec![BaseMix { name: "b".into(), weight: 1.0 }],
            ..CarryOnConfig::default()
        }
    }

    #[test]
    fn alpha_zero_reuse_head_is_base_projection() {
        let inf = info("b", 8, 2, 11);
        let c = CarryOn::new(small(HeadConfig::ReuseBase), vec![inf.clone()]).unwrap();
        let t = TapSet { bases: vec![taps(5, 8, 0, 1)] };
        let y = c.logits(&t, 0.0).unwrap();
        assert!(y.bit_eq(&t.bases[0].deep.matmul(&inf.head).unwrap()));
    }

    #[test]
    fn logits_are_affine_in_alpha() {
        let c = CarryOn::new(small(HeadConfig::New { bottleneck: Some(4) }), vec![info("b", 8, 2, 11)]).unwrap();
        let t = TapSet { bases: vec![taps(4, 8, 0, 2)] };
        let y0 = c.logits(&t, 0.0).unwrap();
        let y1 = c.logits(&t, 1.0).unwrap();
        let y2 = c.logits(&t, 2.0).unwrap();
        for ((a, b), c) in y0.data().iter().zip(y1.data()).zip(y2.data()) {
            assert!(((b - a) - (c - a) / 2.0).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_gate_weights_give_half() {
        let mut c = CarryOn::new(small(HeadConfig::ReuseBase), vec![info("b", 8, 2, 11)]).unwrap();
        let w = c.gate.weight;
        c.store_mut().get_mut(w).value = Tensor::zeros(&[8, 8]);
        let t = TapSet { bases: vec![taps(3, 8, 0, 3)] };
        let mut g = Graph::inference();
        let out = c.forward(&mut g, &t, 1.0, Mode::Eval).unwrap();
        assert!(g.value(out.gate).data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn negative_alpha_is_rejected() {
        let c = CarryOn::new(small(HeadConfig::ReuseBase), vec![info("b", 8, 2, 11)]).unwrap();
        let t = TapSet { bases: vec![taps(3, 8, 0, 3)] };
        assert!(matches!(c.logits(&t, -0.5), Err(Error::Config(_))));
    }

    #[test]
    fn zero_layer_trunk_is_identity() {
        let cfg = CarryOnConfig { layers: 0, ..small(HeadConfig::ReuseBase) };
        let c = CarryOn::new(cfg, vec![info("b", 8, 2, 11)]).unwrap();
        let t = TapSet { bases: vec![taps(3, 8, 0, 4)] };
        let mut g = Graph::inference();
        let out = c.forward(&mut g, &t, 1.0, Mode::Eval).unwrap();
        assert!(g.value(out.trunk).bit_eq(g.value(out.fused)));
    }

    #[test]
    fn fusion_modes() {
        let base = small(HeadConfig::ReuseBase);
        let add = CarryOnConfig { fusion: Fusion::AddProjected, shallow_depths: vec![0], ..base.clone() };
        let c_none = CarryOn::new(base, vec![info("b", 8, 2, 11)]).unwrap();
        let c_add = CarryOn::new(add, vec![info("b", 8, 2, 11)]).unwrap();
        let t1 = TapSet { bases: vec![taps(4, 8, 1, 5)] };
        let t0 = TapSet { bases: vec![BaseTaps { deep: t1.bases[0].deep.clone(), shallow: vec![] }] };
        let mut g = Graph::inference();
        let (a, _) = c_none.fuse_inputs(&mut g, &t0).unwrap();
        let (b, _) = c_add.fuse_inputs(&mut g, &t1).unwrap();
        assert!(g.value(a).bit_eq(g.value(b)));
        assert!(g.value(a).bit_eq(&t0.bases[0].deep));
    }

    #[test]
    fn identical_bases_half_weights_match_single() {
        let one = CarryOnConfig { head: HeadConfig::New { bottleneck: None }, ..small(HeadConfig::ReuseBase) };
        let two = CarryOnConfig {
            bases: vec![
                BaseMix { name: "b".into(), weight: 0.5 },
                BaseMix { name: "c".into(), weight: 0.5 },
            ],
            ..one.clone()
        };
        let c1 = CarryOn::new(one, vec![info("b", 8, 2, 11)]).unwrap();
        let c2 = CarryOn::new(two, vec![info("b", 8, 2, 11), info("c", 8, 2, 11)]).unwrap();
        let tb = taps(4, 8, 0, 6);
        let mut g = Graph::inference();
        let (a, _) = c1.fuse_inputs(&mut g, &TapSet { bases: vec![tb.clone()] }).unwrap();
        let (b, _) = c2.fuse_inputs(&mut g, &TapSet { bases: vec![tb.clone(), tb] }).unwrap();
        assert!(g.value(a).max_abs_diff(g.value(b)) < 1e-15);
    }

    #[test]
    fn mismatched_lengths_are_data_errors() {
        let cfg = CarryOnConfig { fusion: Fusion::Average, shallow_depths: vec![1], ..small(HeadConfig::ReuseBase) };
        let c = CarryOn::new(cfg, vec![info("b", 8, 2, 11)]).unwrap();
        let mut t = taps(4, 8, 1, 7);
        t.shallow[0] = Tensor::zeros(&[3, 8]);
        let mut g = Graph::inference();
        assert!(matches!(c.fuse_inputs(&mut g, &TapSet { bases: vec![t] }), Err(Error::Data(_))));
    }

    fn moe_cfg(experts: usize, top_k: usize) -> CarryOnConfig {
        CarryOnConfig {
            ffn: FfnConfig::Moe {
                experts,
                top_k,
                expert_hidden: 16,
                router_dropout_start: 0.5,
                router_dropout_end: 0.1,
            },
            ..small(HeadConfig::ReuseBase)
        }
    }

    #[test]
    fn single_expert_moe_is_dense() {
        let c = CarryOn::new(moe_cfg(1, 1), vec![info("b", 8, 2, 11)]).unwrap();
        let Ffn::Moe(m) = &c.blocks[0].ffn else { panic!() };
        let mut rng = named_rng(1, "x");
        let x = Tensor::randn(&[5, 8], 1.0, &mut rng);
        let mut g = Graph::inference();
        let xv = g.constant(x);
        let a = m.forward(&mut g, &c.store, xv, Mode::Eval).unwrap();
        let b = m.experts[0].forward(&mut g, &c.store, xv).unwrap();
        assert!(g.value(a).bit_eq(g.value(b)));
    }

    #[test]
    fn routing_is_seed_deterministic() {
        let c = CarryOn::new(moe_cfg(4, 2), vec![info("b", 8, 2, 11)]).unwrap();
        let t = TapSet { bases: vec![taps(6, 8, 0, 8)] };
        let run = || {
            let mut rng = named_rng(5, "router");
            let mut g = Graph::new();
            let out = c
                .forward(&mut g, &t, 1.0, Mode::Train { router_dropout: 0.5, rng: &mut rng })
                .unwrap();
            g.take_value(out.logits)
        };
        assert!(run().bit_eq(&run()));
        assert!((c.router_dropout_at(0.5) - 0.3).abs() < 1e-15);
    }
}
