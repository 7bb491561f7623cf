//! Bridge between the inference and training sides: k-bit tap quantization,
//! the alignment projection, and the wire codec.

pub mod align;
pub mod quant;
pub mod wire;

pub use align::{align, AlignProj};
pub use quant::{dequantize, quantize, QuantizedBlock};
