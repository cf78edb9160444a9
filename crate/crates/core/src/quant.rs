//! Uniform affine quantization of real vectors at {2, 4, 8} bits.
//!
//! A tensor is mapped to integer codes via
//! `q = clamp(floor(x / scale) + zero_point, 0, 2^b - 1)` and reconstructed
//! as `x_hat = scale * (q - zero_point)`. Floor (not round-to-nearest) is the
//! default on purpose; [`Rounding::Nearest`] exists as an experiment knob.
//! Parameters come from an asymmetric per-tensor min-max fit.

use serde::{de, Deserialize, Deserializer, Serialize, Serializer};
use thiserror::Error;

use crate::kinematics::Action;

/// Floor applied to `max(x) - min(x)` so constant inputs keep a positive scale.
pub const EPS_RANGE: f64 = 1e-8;

/// Activation bit-width. `Full` (16) is the full-precision fallback; it is a
/// dispatch outcome, never a quantization target.
///
/// The derived order `B2 < B4 < B8 < Full` is the order used by every
/// dispatcher comparison.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum BitWidth {
    B2,
    B4,
    B8,
    Full,
}

impl BitWidth {
    /// The three quantized widths, ascending.
    pub const QUANTIZED: [BitWidth; 3] = [BitWidth::B2, BitWidth::B4, BitWidth::B8];

    pub fn bits(self) -> u8 {
        match self {
            BitWidth::B2 => 2,
            BitWidth::B4 => 4,
            BitWidth::B8 => 8,
            BitWidth::Full => 16,
        }
    }

    pub fn from_bits(bits: u8) -> Option<Self> {
        match bits {
            2 => Some(BitWidth::B2),
            4 => Some(BitWidth::B4),
            8 => Some(BitWidth::B8),
            16 => Some(BitWidth::Full),
            _ => None,
        }
    }

    /// Number of integer levels, `2^b`. Meaningless for `Full`.
    pub fn levels(self) -> u32 {
        1u32 << self.bits().min(15)
    }

    /// Largest representable code, `2^b - 1`.
    pub fn max_code(self) -> u32 {
        self.levels() - 1
    }
}

impl std::fmt::Display for BitWidth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.bits())
    }
}

impl Serialize for BitWidth {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.serialize_u8(self.bits())
    }
}

impl<'de> Deserialize<'de> for BitWidth {
    fn deserialize<D: Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let raw = u8::deserialize(deserializer)?;
        BitWidth::from_bits(raw)
            .ok_or_else(|| de::Error::custom(format!("invalid bit-width {raw}, expected 2|4|8|16")))
    }
}

/// Rounding rule applied inside [`quantize_with`]. `Floor` is the contract;
/// `Nearest` is available for experiments only.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Rounding {
    #[default]
    Floor,
    Nearest,
}

/// Per-tensor affine quantization parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QuantParams {
    /// Real-value size of one integer step; always positive.
    pub scale: f64,
    /// Integer code that reconstructs to 0.0, in `[0, 2^b - 1]`.
    pub zero_point: u32,
    pub bits: BitWidth,
}

#[derive(Debug, Error, PartialEq)]
pub enum QuantError {
    #[error("input vector is empty")]
    EmptyInput,
    #[error("element {index} is not finite ({value})")]
    NonFinite { index: usize, value: f64 },
    #[error("full precision carries no quantization parameters")]
    FullPrecision,
    #[error("code {code} at index {index} exceeds max {max} for {bits}-bit")]
    CodeOutOfRange { index: usize, code: u32, max: u32, bits: u8 },
}

/// Fit scale and zero-point to a vector with an asymmetric min-max rule:
/// `scale = max(range, EPS_RANGE) / (2^b - 1)`,
/// `zero_point = clamp(round(-min / scale), 0, 2^b - 1)` with half-up rounding.
pub fn affine_params(x: &[f64], bits: BitWidth) -> Result<QuantParams, QuantError> {
    if bits == BitWidth::Full {
        return Err(QuantError::FullPrecision);
    }
    if x.is_empty() {
        return Err(QuantError::EmptyInput);
    }
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for (index, &value) in x.iter().enumerate() {
        if !value.is_finite() {
            return Err(QuantError::NonFinite { index, value });
        }
        lo = lo.min(value);
        hi = hi.max(value);
    }
    let max_code = bits.max_code() as f64;
    let scale = (hi - lo).max(EPS_RANGE) / max_code;
    // Half-up: round(t) = floor(t + 0.5), so golden values are stable.
    let zero_point = ((-lo / scale) + 0.5).floor().clamp(0.0, max_code) as u32;
    Ok(QuantParams { scale, zero_point, bits })
}

/// Quantize with floor semantics: `clamp(floor(x / s) + z, 0, 2^b - 1)`.
pub fn quantize(x: &[f64], params: &QuantParams) -> Vec<u32> {
    quantize_with(x, params, Rounding::Floor)
}

/// Quantize with an explicit rounding rule.
pub fn quantize_with(x: &[f64], params: &QuantParams, rounding: Rounding) -> Vec<u32> {
    let max_code = params.bits.max_code() as f64;
    let zero = params.zero_point as f64;
    x.iter()
        .map(|&v| {
            let ratio = v / params.scale;
            let stepped = match rounding {
                Rounding::Floor => ratio.floor(),
                Rounding::Nearest => (ratio + 0.5).floor(),
            };
            (stepped + zero).clamp(0.0, max_code) as u32
        })
        .collect()
}

/// Reconstruct real values: `x_hat = scale * (q - zero_point)`.
pub fn dequantize(q: &[u32], params: &QuantParams) -> Result<Vec<f64>, QuantError> {
    let max = params.bits.max_code();
    for (index, &code) in q.iter().enumerate() {
        if code > max {
            return Err(QuantError::CodeOutOfRange {
                index,
                code,
                max,
                bits: params.bits.bits(),
            });
        }
    }
    Ok(q.iter()
        .map(|&code| params.scale * (code as i64 - params.zero_point as i64) as f64)
        .collect())
}

/// Quantize-then-reconstruct with parameters fitted to `x` itself. This is
/// the noise source the rest of the system injects. `Full` is an identity.
pub fn fake_quant(x: &[f64], bits: BitWidth) -> Result<Vec<f64>, QuantError> {
    if bits == BitWidth::Full {
        return Ok(x.to_vec());
    }
    let params = affine_params(x, bits)?;
    let codes = quantize(x, &params);
    dequantize(&codes, &params)
}

/// Euclidean norm of the difference between two 7-dim control commands
/// (translation, rotation, gripper).
pub fn action_error(a_hat: &Action, a_star: &Action) -> f64 {
    let mut sum = 0.0;
    for i in 0..3 {
        sum += (a_hat.xyz[i] - a_star.xyz[i]).powi(2);
        sum += (a_hat.rot[i] - a_star.rot[i]).powi(2);
    }
    sum += (a_hat.gripper - a_star.gripper).powi(2);
    sum.sqrt()
}
