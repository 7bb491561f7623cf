//! Dense tensors and reverse-mode differentiation for the trainable subgraph.
//!
//! The frozen base runs the same kernels on an inference [`Graph`] that keeps
//! no backward state.

mod graph;
pub mod kernels;
pub mod nn;
mod params;
mod tensor;

pub use graph::{Gradients, Graph, Var};
pub use params::{named_rng, Param, ParamId, ParamStore};
pub use tensor::Tensor;

use crate::error::{Error, Result};

#[cfg(not(feature = "f32"))]
pub type Float = f64;
#[cfg(feature = "f32")]
pub type Float = f32;

/// Matrix product `a · b`.
pub fn matmul(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    g.matmul(a, b)
}

/// Row-wise softmax.
pub fn softmax_rows(g: &mut Graph, x: Var) -> Var {
    g.softmax_rows(x)
}

/// RMS normalisation of each row followed by an element-wise gain.
pub fn layer_norm_rms(g: &mut Graph, x: Var, gain: Var, eps: Float) -> Result<Var> {
    g.rms_norm(x, gain, eps)
}

/// Projection weights of one multi-head attention layer.
#[derive(Clone, Copy, Debug)]
pub struct AttentionWeights {
    pub wq: Var,
    pub wk: Var,
    pub wv: Var,
    pub wo: Var,
}

/// Multi-head scaled dot-product attention of `x` over itself, followed by
/// the output projection. `segs` lists the lengths of the independent
/// sequences stacked in `x`.
pub fn attention(
    g: &mut Graph,
    x: Var,
    w: AttentionWeights,
    heads: usize,
    segs: &[usize],
    causal: bool,
) -> Result<Var> {
    let d = g.value(x).cols();
    if heads == 0 || d % heads != 0 {
        return Err(Error::config(format!(
            "model dim {d} is not divisible by {heads} heads"
        )));
    }
    let q = g.matmul(x, w.wq)?;
    let k = g.matmul(x, w.wk)?;
    let v = g.matmul(x, w.wv)?;
    let o = g.attention(q, k, v, segs, heads, causal)?;
    g.matmul(o, w.wo)
}

/// Per-row weights for a masked mean next-token loss: every row whose
/// in-sequence position is at least `mask_before` gets `1/count`, others 0.
pub fn masked_mean_weights(segs: &[usize], mask_before: usize) -> Result<Vec<Float>> {
    let count: usize = segs.iter().map(|&n| n.saturating_sub(mask_before)).sum();
    if count == 0 {
        return Err(Error::Evaluation(format!(
            "no positions left to score after masking the first {mask_before}"
        )));
    }
    let w = 1.0 / count as Float;
    Ok(segs
        .iter()
        .flat_map(|&n| (0..n).map(move |i| if i >= mask_before { w } else { 0.0 }))
        .collect())
}

/// Mean negative log-likelihood of `targets` (the input shifted by one)
/// over positions `>= mask_before`.
pub fn cross_entropy_next_token(
    g: &mut Graph,
    logits: Var,
    targets: &[u32],
    mask_before: usize,
) -> Result<Var> {
    let n = g.value(logits).rows();
    if targets.len() != n {
        return Err(Error::dim("cross_entropy_next_token", &[n], &[targets.len()]));
    }
    let weights = masked_mean_weights(&[n], mask_before)?;
    let t: Vec<usize> = targets.iter().map(|&x| x as usize).collect();
    g.cross_entropy(logits, &t, &weights)
}

/// Per-sequence masked mean NLL computed directly from a logits tensor.
pub fn sequence_nll(logits: &Tensor, targets: &[u32], mask_before: usize) -> Result<Float> {
    let n = logits.rows();
    if targets.len() != n {
        return Err(Error::dim("sequence_nll", &[n], &[targets.len()]));
    }
    if mask_before >= n {
        return Err(Error::Evaluation(format!(
            "no positions left to score after masking the first {mask_before} of {n}"
        )));
    }
    let mut total = 0.0;
    for (r, &t) in targets.iter().enumerate().skip(mask_before) {
        let row = logits.row(r);
        total += kernels::log_sum_exp(row) - row[t as usize];
    }
    Ok(total / (n - mask_before) as Float)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uniform_logits_give_log_vocab() {
        let mut g = Graph::inference();
        let v = 7;
        let logits = g.constant(Tensor::zeros(&[4, v]));
        let l = cross_entropy_next_token(&mut g, logits, &[1, 2, 3, 4], 0).unwrap();
        assert!((g.value(l).data()[0] - (v as Float).ln()).abs() < 1e-12);
    }

    #[test]
    fn large_margin_drives_loss_to_zero() {
        let mut prev = Float::INFINITY;
        for margin in [1.0, 5.0, 20.0, 60.0] {
            let mut g = Graph::inference();
            let mut t = Tensor::zeros(&[1, 3]);
            t.data_mut()[2] = margin;
            let logits = g.constant(t);
            let l = cross_entropy_next_token(&mut g, logits, &[2], 0).unwrap();
            let v = g.value(l).data()[0];
            assert!(v < prev);
            prev = v;
        }
        assert!(prev < 1e-20);
    }

    #[test]
    fn mask_all_but_last_equals_single_position() {
        let logits = Tensor::new(
            vec![3, 3],
            vec![0.1, 0.5, -0.3, 1.0, 0.0, 2.0, -1.0, 0.7, 0.2],
        )
        .unwrap();
        let targets = [2u32, 0, 1];
        let mut g = Graph::inference();
        let lv = g.constant(logits.clone());
        let l = cross_entropy_next_token(&mut g, lv, &targets, 2).unwrap();
        // Direct recomputation on the last row only.
        let row = logits.row(2);
        let lse = row.iter().map(|x| x.exp()).sum::<Float>().ln();
        assert!((g.value(l).data()[0] - (lse - row[1])).abs() < 1e-14);
    }

    #[test]
    fn fully_masked_sequence_is_an_error() {
        let mut g = Graph::inference();
        let logits = g.constant(Tensor::zeros(&[2, 3]));
        let err = cross_entropy_next_token(&mut g, logits, &[0, 1], 2).unwrap_err();
        assert!(matches!(err, Error::Evaluation(_)));
    }

    #[test]
    fn rms_norm_is_scale_invariant() {
        let mut g = Graph::inference();
        let x = Tensor::new(vec![1, 4], vec![0.5, -1.5, 2.0, 0.25]).unwrap();
        let gain = g.constant(Tensor::full(&[4], 1.0));
        let a = g.constant(x.clone());
        let b = g.constant(x.map(|v| 7.0 * v));
        let ya = layer_norm_rms(&mut g, a, gain, 1e-12).unwrap();
        let yb = layer_norm_rms(&mut g, b, gain, 1e-12).unwrap();
        assert!(g.value(ya).max_abs_diff(g.value(yb)) < 1e-12);
    }

    #[test]
    fn rms_norm_of_ones_is_ones() {
        let mut g = Graph::inference();
        let gain = g.constant(Tensor::full(&[5], 1.0));
        let x = g.constant(Tensor::full(&[2, 5], 1.0));
        let y = layer_norm_rms(&mut g, x, gain, 1e-15).unwrap();
        assert!(g.value(y).data().iter().all(|v| (v - 1.0).abs() < 1e-12));
    }
}
