use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::nn::{register, Init};
use crate::numcore::{Graph, ParamId, ParamStore, Var};

/// `W_align` for one (base, depth) pair. Lives on the training side.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AlignProj {
    pub weight: usize,
    pub source_base: String,
    pub source_depth: usize,
    pub d_base: usize,
    pub d_carry: usize,
}

impl AlignProj {
    pub fn param_name(base: &str, depth: usize) -> String {
        format!("align.{base}.{depth}.w")
    }

    pub fn init(
        store: &mut ParamStore,
        base: &str,
        depth: usize,
        d_base: usize,
        d_carry: usize,
        init: Init,
        seed: u64,
    ) -> Self {
        let name = Self::param_name(base, depth);
        let id = register(store, &name, &[d_base, d_carry], init, seed, true);
        Self {
            weight: id.0,
            source_base: base.to_owned(),
            source_depth: depth,
            d_base,
            d_carry,
        }
    }

    pub fn weight_id(&self) -> ParamId {
        ParamId(self.weight)
    }
}

/// `x̂ · W_align`. `x_hat` should be a constant node so no gradient crosses
/// back toward the base.
pub fn align(g: &mut Graph, store: &ParamStore, x_hat: Var, proj: &AlignProj) -> Result<Var> {
    let d = g.value(x_hat).cols();
    if d != proj.d_base {
        return Err(Error::config(format!(
            "tap width {d} does not match projection input {} for {}@{}",
            proj.d_base, proj.source_base, proj.source_depth
        )));
    }
    let w = g.param(store, proj.weight_id());
    g.matmul(x_hat, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numcore::{Float, Tensor};

    #[test]
    fn identity_and_zero_cases() {
        let mut store = ParamStore::new();
        let p = AlignProj::init(&mut store, "b0", 2, 4, 4, Init::Identity, 0);
        let x = Tensor::new(vec![2, 4], (0..8).map(|v| v as Float - 3.5).collect()).unwrap();
        let mut g = Graph::new();
        let xv = g.constant(x.clone());
        let y = align(&mut g, &store, xv, &p).unwrap();
        assert!(g.value(y).bit_eq(&x));
        let z = g.constant(Tensor::zeros(&[3, 4]));
        let y = align(&mut g, &store, z, &p).unwrap();
        assert_eq!(g.value(y).max_abs(), 0.0);
    }

    #[test]
    fn width_mismatch_is_config_error() {
        let mut store = ParamStore::new();
        let p = AlignProj::init(&mut store, "b0", 0, 4, 2, Init::Zeros, 0);
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 3]));
        assert!(matches!(align(&mut g, &store, x, &p), Err(Error::Config(_))));
    }
}
