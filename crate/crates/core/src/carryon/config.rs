use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::Float;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FfnConfig {
    Dense {
        hidden: usize,
    },
    Moe {
        experts: usize,
        top_k: usize,
        expert_hidden: usize,
        router_dropout_start: Float,
        router_dropout_end: Float,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    None,
    AddProjected,
    Average,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadConfig {
    New { bottleneck: Option<usize> },
    ReuseBase,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaseMix {
    pub name: String,
    pub weight: Float,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CarryOnConfig {
    pub d_carry: usize,
    pub layers: usize,
    pub heads: usize,
    pub ffn: FfnConfig,
    pub fusion: Fusion,
    #[serde(default)]
    pub shallow_depths: Vec<usize>,
    pub bases: Vec<BaseMix>,
    pub head: HeadConfig,
    pub alpha_init: Float,
    #[serde(default)]
    pub seed: u64,
}

impl Default for CarryOnConfig {
    fn default() -> Self {
        Self {
            d_carry: 64,
            layers: 2,
            heads: 4,
            ffn: FfnConfig::Dense { hidden: 256 },
            fusion: Fusion::None,
            shallow_depths: Vec::new(),
            bases: vec![BaseMix {
                name: "base".into(),
                weight: 1.0,
            }],
            head: HeadConfig::ReuseBase,
            alpha_init: 0.1,
            seed: 0,
        }
    }
}

impl CarryOnConfig {
    /// `base_dims[i]` and `base_layers[i]` describe `bases[i]`.
    pub fn validate(&self, base_dims: &[usize], base_layers: &[usize]) -> Result<()> {
        if self.bases.is_empty() {
            return Err(Error::config("carry-on needs at least one base"));
        }
        if base_dims.len() != self.bases.len() || base_layers.len() != self.bases.len() {
            return Err(Error::config(format!(
                "config lists {} bases but {} were supplied",
                self.bases.len(),
                base_dims.len()
            )));
        }
        let total: Float = self.bases.iter().map(|b| b.weight).sum();
        if self.bases.iter().any(|b| !(b.weight >= 0.0)) || (total - 1.0).abs() > 1e-9 {
            return Err(Error::config(format!(
                "base mixing weights must be nonnegative and sum to 1 (got {total})"
            )));
        }
        let mut names: Vec<&str> = self.bases.iter().map(|b| b.name.as_str()).collect();
        names.sort_unstable();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("duplicate base name"));
        }
        if self.d_carry == 0 {
            return Err(Error::config("d_carry must be positive"));
        }
        if self.layers > 0 && (self.heads == 0 || self.d_carry % self.heads != 0) {
            return Err(Error::config(format!(
                "d_carry {} is not divisible by {} heads",
                self.d_carry, self.heads
            )));
        }
        match self.ffn {
            FfnConfig::Dense { hidden: 0 } => {
                return Err(Error::config("dense hidden size must be positive"))
            }
            FfnConfig::Moe {
                experts,
                top_k,
                expert_hidden,
                router_dropout_start,
                router_dropout_end,
            } => {
                if experts == 0 || top_k == 0 || top_k > experts {
                    return Err(Error::config(format!(
                        "top_k {top_k} must be in 1..={experts}"
                    )));
                }
                if expert_hidden == 0 {
                    return Err(Error::config("expert hidden size must be positive"));
                }
                for p in [router_dropout_start, router_dropout_end] {
                    if !(0.0..1.0).contains(&p) {
                        return Err(Error::config(format!("router dropout {p} not in [0, 1)")));
                    }
                }
            }
            _ => {}
        }
        for &d in &self.shallow_depths {
            if let Some(&l) = base_layers.iter().find(|&&l| d >= l) {
                return Err(Error::config(format!(
                    "shallow depth {d} must be below the top depth {l}"
                )));
            }
        }
        if self.fusion == Fusion::None && !self.shallow_depths.is_empty() {
            return Err(Error::config("shallow depths given but fusion is none"));
        }
        if self.fusion != Fusion::None && self.shallow_depths.is_empty() {
            return Err(Error::config("fusion needs at least one shallow depth"));
        }
        if self.head == HeadConfig::ReuseBase && (self.bases.len() != 1 || base_dims[0] != self.d_carry) {
            return Err(Error::config(
                "reuse_base needs a single base with d_carry equal to its dim",
            ));
        }
        if let HeadConfig::New { bottleneck: Some(0) } = self.head {
            return Err(Error::config("bottleneck must be positive"));
        }
        if !(self.alpha_init >= 0.0) {
            return Err(Error::config("alpha_init must be nonnegative"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_is_valid_for_matching_base() {
        assert!(CarryOnConfig::default().validate(&[64], &[4]).is_ok());
        assert!(CarryOnConfig::default().validate(&[32], &[4]).is_err());
    }

    #[test]
    fn rejects_bad_moe_and_weights() {
        let moe = CarryOnConfig {
            ffn: FfnConfig::Moe {
                experts: 2,
                top_k: 3,
                expert_hidden: 8,
                router_dropout_start: 0.5,
                router_dropout_end: 0.1,
            },
            ..CarryOnConfig::default()
        };
        assert!(moe.validate(&[64], &[4]).is_err());
        let mix = CarryOnConfig {
            head: HeadConfig::New { bottleneck: None },
            bases: vec![
                BaseMix { name: "a".into(), weight: 0.5 },
                BaseMix { name: "b".into(), weight: 0.4 },
            ],
            ..CarryOnConfig::default()
        };
        assert!(mix.validate(&[64, 32], &[4, 4]).is_err());
    }

    #[test]
    fn json_shape() {
        let c = CarryOnConfig::default();
        let s = serde_json::to_string(&c).unwrap();
        assert!(s.contains(r#""ffn":{"kind":"dense","hidden":256}"#), "{s}");
        assert!(s.contains(r#""head":{"kind":"reuse_base"}"#), "{s}");
        let back: CarryOnConfig = serde_json::from_str(&s).unwrap();
        assert_eq!(back, c);
    }
}
