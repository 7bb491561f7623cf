//! Symmetric per-row k-bit quantization of tap embeddings.
//!
//! `scale_i = max_j |x_ij| / qmax` with `qmax = 2^(b-1) - 1`, and
//! `code_ij = round_half_even(x_ij / scale_i)`. `b = 0` is passthrough.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::{Float, Tensor};

pub const ALLOWED_BITS: [u8; 5] = [0, 2, 3, 4, 8];

pub fn check_bits(bits: u8) -> Result<()> {
    if ALLOWED_BITS.contains(&bits) {
        Ok(())
    } else {
        Err(Error::config(format!(
            "quantization bits {bits} not in {ALLOWED_BITS:?}"
        )))
    }
}

pub fn qmax(bits: u8) -> i32 {
    (1i32 << (bits - 1)) - 1
}

/// One quantized `n × d` tap. For `bits == 0` only `raw` is populated; for
/// other widths `codes` (one per element, row-major) and `scales` (one per
/// row) are.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuantizedBlock {
    bits: u8,
    rows: usize,
    cols: usize,
    scales: Vec<Float>,
    codes: Vec<i8>,
    raw: Vec<Float>,
}

impl QuantizedBlock {
    pub fn bits(&self) -> u8 {
        self.bits
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn scales(&self) -> &[Float] {
        &self.scales
    }

    pub fn codes(&self) -> &[i8] {
        &self.codes
    }

    pub fn raw(&self) -> &[Float] {
        &self.raw
    }

    pub fn packed_row_bytes(bits: u8, cols: usize) -> usize {
        (cols * bits as usize).div_ceil(8)
    }

    /// Codes in wire layout: `bits`-wide two's-complement fields, LSB first,
    /// each row starting on a fresh byte.
    pub fn packed_codes(&self) -> Vec<u8> {
        if self.bits == 0 {
            return Vec::new();
        }
        let b = self.bits as usize;
        let per_row = Self::packed_row_bytes(self.bits, self.cols);
        let mask = (1u16 << b) - 1;
        let mut out = vec![0u8; per_row * self.rows];
        for r in 0..self.rows {
            let dst = &mut out[r * per_row..(r + 1) * per_row];
            for (j, &c) in self.codes[r * self.cols..(r + 1) * self.cols].iter().enumerate() {
                let field = (c as i16 as u16) & mask;
                let bit = j * b;
                let (byte, off) = (bit / 8, bit % 8);
                let wide = field << off;
                dst[byte] |= wide as u8;
                if off + b > 8 {
                    dst[byte + 1] |= (wide >> 8) as u8;
                }
            }
        }
        out
    }

    /// Inverse of [`QuantizedBlock::packed_codes`]. Codes outside the
    /// symmetric range and non-zero padding bits are rejected.
    pub fn from_packed(
        bits: u8,
        rows: usize,
        cols: usize,
        scales: Vec<Float>,
        packed: &[u8],
    ) -> Result<Self> {
        check_bits(bits)?;
        if bits == 0 {
            return Err(Error::Format("passthrough blocks carry raw values".into()));
        }
        let per_row = Self::packed_row_bytes(bits, cols);
        if packed.len() != per_row * rows || scales.len() != rows {
            return Err(Error::Format("packed block size mismatch".into()));
        }
        if scales.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
            return Err(Error::Format("scale must be finite and nonnegative".into()));
        }
        let b = bits as usize;
        let q = qmax(bits);
        let mask = (1u16 << b) - 1;
        let mut codes = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let src = &packed[r * per_row..(r + 1) * per_row];
            for j in 0..cols {
                let bit = j * b;
                let (byte, off) = (bit / 8, bit % 8);
                let mut wide = src[byte] as u16;
                if off + b > 8 {
                    wide |= (src[byte + 1] as u16) << 8;
                }
                let field = (wide >> off) & mask;
                // Sign-extend from `b` bits.
                let v = ((field << (16 - b)) as i16) >> (16 - b);
                if (v as i32).abs() > q {
                    return Err(Error::Format(format!("code {v} outside ±{q}")));
                }
                codes.push(v as i8);
            }
            let used = cols * b;
            if used % 8 != 0 && src[per_row - 1] >> (used % 8) != 0 {
                return Err(Error::Format("non-zero padding bits".into()));
            }
        }
        Ok(Self {
            bits,
            rows,
            cols,
            scales,
            codes,
            raw: Vec::new(),
        })
    }

    pub fn from_raw(rows: usize, cols: usize, raw: Vec<Float>) -> Result<Self> {
        if raw.len() != rows * cols {
            return Err(Error::Format("raw block size mismatch".into()));
        }
        Ok(Self {
            bits: 0,
            rows,
            cols,
            scales: Vec::new(),
            codes: Vec::new(),
            raw,
        })
    }
}

/// Round the scale to the fixed point of `s ↦ fl(fl(qmax·s)/qmax)`.
/// Dequantizing yields a row maximum of exactly `fl(qmax·s)`, so a canonical
/// scale is recovered unchanged when the result is quantized again.
fn canonical_scale(mut s: Float, q: Float) -> Float {
    for _ in 0..64 {
        let next = (q * s) / q;
        if next == s {
            return s;
        }
        s = next;
    }
    s
}

pub fn quantize(x: &Tensor, bits: u8) -> Result<QuantizedBlock> {
    check_bits(bits)?;
    let (rows, cols) = (x.rows(), x.cols());
    if bits == 0 {
        return QuantizedBlock::from_raw(rows, cols, x.data().to_vec());
    }
    let q = qmax(bits);
    let qf = q as Float;
    let mut scales = Vec::with_capacity(rows);
    let mut codes = Vec::with_capacity(rows * cols);
    for r in 0..rows {
        let row = x.row(r);
        let m = row.iter().fold(0.0 as Float, |a, v| a.max(v.abs()));
        let s = if m > 0.0 { canonical_scale(m / qf, qf) } else { 0.0 };
        scales.push(s);
        for &v in row {
            let c = if s > 0.0 {
                (v / s).round_ties_even().clamp(-qf, qf) as i8
            } else {
                0
            };
            codes.push(c);
        }
    }
    Ok(QuantizedBlock {
        bits,
        rows,
        cols,
        scales,
        codes,
        raw: Vec::new(),
    })
}

pub fn dequantize(q: &QuantizedBlock) -> Tensor {
    let shape = vec![q.rows, q.cols];
    if q.bits == 0 {
        return Tensor::new(shape, q.raw.clone()).expect("validated at construction");
    }
    let mut data = Vec::with_capacity(q.rows * q.cols);
    for r in 0..q.rows {
        let s = q.scales[r];
        data.extend(
            q.codes[r * q.cols..(r + 1) * q.cols]
                .iter()
                .map(|&c| c as Float * s),
        );
    }
    Tensor::new(shape, data).expect("validated at construction")
}
