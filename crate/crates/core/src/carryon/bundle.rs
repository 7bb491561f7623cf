//! Carry-on checkpoints in the shared model container.
//!
//! The JSON header holds the config and the identity of every base; the
//! parameter records hold the trainable store plus two frozen extras per
//! bundle: `frozen.alpha` and `frozen.<base>.head`.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CarryOn, CarryOnConfig};
use crate::basemodel::{container, BaseModel};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// What the training side knows about a base: its identity, shape, and
/// frozen output projection.
#[derive(Clone, Debug, PartialEq)]
pub struct BaseInfo {
    pub name: String,
    pub hash: [u8; 32],
    pub dim: usize,
    pub layers: usize,
    pub vocab_size: usize,
    pub head: Tensor,
}

impl BaseInfo {
    pub fn from_model(name: &str, model: &BaseModel) -> Result<Self> {
        let c = model.config();
        Ok(Self {
            name: name.to_owned(),
            hash: model.hash()?,
            dim: c.dim,
            layers: c.layers,
            vocab_size: c.vocab_size,
            head: model.output_head().clone(),
        })
    }
}

#[derive(Serialize, Deserialize)]
struct BaseHeader {
    name: String,
    hash: String,
    dim: usize,
    layers: usize,
    vocab_size: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: CarryOnConfig,
    bases: Vec<BaseHeader>,
}

pub fn bundle_bytes(c: &CarryOn) -> Result<Vec<u8>> {
    let header = Header {
        config: c.config().clone(),
        bases: c
            .bases()
            .iter()
            .map(|b| BaseHeader {
                name: b.name.clone(),
                hash: hex::encode(b.hash),
                dim: b.dim,
                layers: b.layers,
                vocab_size: b.vocab_size,
            })
            .collect(),
    };
    let mut params = c.store().named_values();
    params.push(("frozen.alpha".into(), Tensor::scalar(c.alpha)));
    for b in c.bases() {
        params.push((format!("frozen.{}.head", b.name), b.head.clone()));
    }
    Ok(container::encode(&container::canonical_json(&header)?, &params))
}

pub fn bundle_from_bytes(bytes: &[u8]) -> Result<CarryOn> {
    let (json, params) = container::decode(bytes)?;
    let header: Header = serde_json::from_str(&json)?;
    let find = |name: &str| {
        params
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t.clone())
            .ok_or_else(|| Error::Format(format!("bundle lacks `{name}`")))
    };
    let mut infos = Vec::with_capacity(header.bases.len());
    for b in &header.bases {
        let raw = hex::decode(&b.hash).map_err(|e| Error::Format(format!("base hash: {e}")))?;
        let hash: [u8; 32] = raw
            .try_into()
            .map_err(|_| Error::Format("base hash must be 32 bytes".into()))?;
        infos.push(BaseInfo {
            name: b.name.clone(),
            hash,
            dim: b.dim,
            layers: b.layers,
            vocab_size: b.vocab_size,
            head: find(&format!("frozen.{}.head", b.name))?,
        });
    }
    let mut c = CarryOn::new(header.config, infos)?;
    c.store_mut().load_values(&params)?;
    c.alpha = find("frozen.alpha")?.data()[0];
    Ok(c)
}

pub fn save_bundle(c: &CarryOn, path: &Path) -> Result<()> {
    std::fs::write(path, bundle_bytes(c)?)?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<CarryOn> {
    bundle_from_bytes(&std::fs::read(path)?)
}
