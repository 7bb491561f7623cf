//! Parameterised layers shared by the base model and the carry-on network.

use rand::Rng;

use super::{named_rng, AttentionWeights, Float, Graph, ParamId, ParamStore, Tensor, Var};
use crate::error::Result;

#[derive(Clone, Copy, Debug)]
pub enum Init {
    Normal(Float),
    Zeros,
    Ones,
    /// Identity on the leading square block, zeros elsewhere.
    Identity,
}

impl Init {
    pub fn tensor(self, shape: &[usize], seed: u64, name: &str) -> Tensor {
        match self {
            Init::Normal(std) => Tensor::randn(shape, std, &mut named_rng(seed, name)),
            Init::Zeros => Tensor::zeros(shape),
            Init::Ones => Tensor::full(shape, 1.0),
            Init::Identity => {
                let mut t = Tensor::zeros(shape);
                let (r, c) = (t.rows(), t.cols());
                for i in 0..r.min(c) {
                    t.data_mut()[i * c + i] = 1.0;
                }
                t
            }
        }
    }
}

/// Registers `name` in `store` with a deterministic initial value.
pub fn register(
    store: &mut ParamStore,
    name: &str,
    shape: &[usize],
    init: Init,
    seed: u64,
    trainable: bool,
) -> ParamId {
    store.add(name, init.tensor(shape, seed, name), trainable)
}

/// `x · W (+ b)`, with `W: d_in × d_out`.
#[derive(Clone, Debug)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
}

impl Linear {
    #[allow(clippy::too_many_arguments)]
    pub fn init(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        init: Init,
        bias: bool,
        seed: u64,
        trainable: bool,
    ) -> Self {
        let weight = register(store, &format!("{name}.w"), &[d_in, d_out], init, seed, trainable);
        let bias = bias.then(|| {
            register(store, &format!("{name}.b"), &[d_out], Init::Zeros, seed, trainable)
        });
        Self { weight, bias }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w = g.param(store, self.weight);
        let y = g.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = g.param(store, b);
                g.add_row(y, b)
            }
            None => Ok(y),
        }
    }
}

#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl MultiHeadAttention {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        heads: usize,
        seed: u64,
        out_std: Float,
    ) -> Self {
        let std = 0.02;
        let mut reg = |n: &str, s: Float| {
            register(store, &format!("{prefix}.{n}"), &[d, d], Init::Normal(s), seed, true)
        };
        Self {
            wq: reg("wq", std),
            wk: reg("wk", std),
            wv: reg("wv", std),
            wo: reg("wo", out_std),
            heads,
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var, segs: &[usize]) -> Result<Var> {
        let w = AttentionWeights {
            wq: g.param(store, self.wq),
            wk: g.param(store, self.wk),
            wv: g.param(store, self.wv),
            wo: g.param(store, self.wo),
        };
        super::attention(g, x, w, self.heads, segs, true)
    }
}

/// Two-layer SiLU MLP without biases.
#[derive(Clone, Debug)]
pub struct DenseFfn {
    pub w1: ParamId,
    pub w2: ParamId,
}

impl DenseFfn {
    pub fn init(
        store: &mut ParamStore,
        prefix: &str,
        d: usize,
        hidden: usize,
        seed: u64,
        out_std: Float,
    ) -> Self {
        Self {
            w1: register(store, &format!("{prefix}.w1"), &[d, hidden], Init::Normal(0.02), seed, true),
            w2: register(store, &format!("{prefix}.w2"), &[hidden, d], Init::Normal(out_std), seed, true),
        }
    }

    pub fn forward(&self, g: &mut Graph, store: &ParamStore, x: Var) -> Result<Var> {
        let w1 = g.param(store, self.w1);
        let w2 = g.param(store, self.w2);
        let h = g.matmul(x, w1)?;
        let h = g.silu(h);
        g.matmul(h, w2)
    }
}

/// Dropout keep-mask scaled by `1/(1-p)`; all ones when `p == 0`.
pub fn dropout_mask<R: Rng + ?Sized>(shape: &[usize], p: Float, rng: &mut R) -> Tensor {
    if p <= 0.0 {
        return Tensor::full(shape, 1.0);
    }
    let keep = 1.0 / (1.0 - p);
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let u: Float = rng.random();
            if u < p {
                0.0
            } else {
                keep
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}
