//! Where training gets its taps from.

use std::collections::HashMap;

use crate::basemodel::BaseModel;
use crate::bridge::{dequantize, quantize, QuantizedBlock};
use crate::carryon::{BaseTaps, CarryOn, TapSet};
use crate::error::{Error, Result};
use crate::numcore::Tensor;

/// Produces the dequantized taps of one input sequence for every base the
/// carry-on reads.
pub trait TapSource {
    fn taps(&mut self, ids: &[u32]) -> Result<TapSet>;

    /// Longest input sequence the source accepts.
    fn max_len(&self) -> usize;

    /// Payload bytes received so far (zero for in-process sources).
    fn bytes_received(&self) -> u64 {
        0
    }
}

/// Assemble one base's taps from `(depth, block)` pairs, in any order.
pub fn base_taps_from_blocks(
    blocks: &[(usize, &QuantizedBlock)],
    shallow_depths: &[usize],
    top: usize,
) -> Result<BaseTaps> {
    let find = |d: usize| -> Result<Tensor> {
        blocks
            .iter()
            .find(|(depth, _)| *depth == d)
            .map(|(_, b)| dequantize(b))
            .ok_or_else(|| Error::data(format!("no tap at depth {d}")))
    };
    Ok(BaseTaps {
        deep: find(top)?,
        shallow: shallow_depths.iter().map(|&d| find(d)).collect::<Result<_>>()?,
    })
}

/// Runs the frozen bases in-process and applies the same quantizer the
/// inference service would.
pub struct LocalTapSource<'a> {
    bases: Vec<&'a BaseModel>,
    shallow: Vec<usize>,
    bits: u8,
    cache: Option<HashMap<Vec<u32>, TapSet>>,
}

impl<'a> LocalTapSource<'a> {
    pub fn new(bases: Vec<&'a BaseModel>, carry: &CarryOn, bits: u8) -> Result<Self> {
        crate::bridge::quant::check_bits(bits)?;
        if bases.len() != carry.bases().len() {
            return Err(Error::config("one base model per configured base required"));
        }
        for (m, info) in bases.iter().zip(carry.bases()) {
            if m.config().dim != info.dim || m.config().layers != info.layers {
                return Err(Error::config(format!("base `{}` does not match the carry-on", info.name)));
            }
        }
        Ok(Self {
            bases,
            shallow: carry.config().shallow_depths.clone(),
            bits,
            cache: None,
        })
    }

    /// Memoise taps per input; valid because the bases are frozen.
    pub fn with_cache(mut self) -> Self {
        self.cache = Some(HashMap::new());
        self
    }

    pub fn bits(&self) -> u8 {
        self.bits
    }

    fn compute(&self, ids: &[u32]) -> Result<TapSet> {
        let mut out = Vec::with_capacity(self.bases.len());
        for m in &self.bases {
            let top = m.config().layers;
            let mut depths = self.shallow.clone();
            depths.push(top);
            let taps = m.forward_taps(ids, &depths)?;
            let blocks = taps
                .iter()
                .map(|t| Ok((t.depth, quantize(&t.values, self.bits)?)))
                .collect::<Result<Vec<_>>>()?;
            let refs: Vec<(usize, &QuantizedBlock)> = blocks.iter().map(|(d, b)| (*d, b)).collect();
            out.push(base_taps_from_blocks(&refs, &self.shallow, top)?);
        }
        Ok(TapSet { bases: out })
    }
}

impl TapSource for LocalTapSource<'_> {
    fn taps(&mut self, ids: &[u32]) -> Result<TapSet> {
        if let Some(hit) = self.cache.as_ref().and_then(|c| c.get(ids)) {
            return Ok(hit.clone());
        }
        let t = self.compute(ids)?;
        if let Some(c) = self.cache.as_mut() {
            c.insert(ids.to_vec(), t.clone());
        }
        Ok(t)
    }

    fn max_len(&self) -> usize {
        self.bases.iter().map(|m| m.config().max_seq).min().unwrap_or(0)
    }
}
