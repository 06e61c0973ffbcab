//! Fixed-point tensors and the quantize / dequantize / requantize arithmetic
//! shared by the compiler, the array simulator and the golden reference.
//!
//! Quantization is symmetric with zero-point 0 and a power-of-two per-tensor
//! scale, so `real ≈ data × 2^scale_exp` and requantization is a pure shift.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Two's-complement operand width supported by the multiplier.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BitWidth {
    B1,
    B2,
    B4,
    B8,
}

impl BitWidth {
    pub const ALL: [BitWidth; 4] = [BitWidth::B1, BitWidth::B2, BitWidth::B4, BitWidth::B8];

    pub const fn bits(self) -> u32 {
        match self {
            BitWidth::B1 => 1,
            BitWidth::B2 => 2,
            BitWidth::B4 => 4,
            BitWidth::B8 => 8,
        }
    }

    pub const fn min_value(self) -> i32 {
        -(1 << (self.bits() - 1))
    }

    pub const fn max_value(self) -> i32 {
        (1 << (self.bits() - 1)) - 1
    }

    pub const fn contains(self, v: i64) -> bool {
        v >= self.min_value() as i64 && v <= self.max_value() as i64
    }

    pub fn clamp(self, v: i64) -> i32 {
        v.clamp(self.min_value() as i64, self.max_value() as i64) as i32
    }
}

impl TryFrom<u32> for BitWidth {
    type Error = Error;

    fn try_from(v: u32) -> Result<Self> {
        match v {
            1 => Ok(BitWidth::B1),
            2 => Ok(BitWidth::B2),
            4 => Ok(BitWidth::B4),
            8 => Ok(BitWidth::B8),
            other => Err(Error::InvalidBitWidth(other)),
        }
    }
}

impl From<BitWidth> for u32 {
    fn from(b: BitWidth) -> u32 {
        b.bits()
    }
}

impl std::fmt::Display for BitWidth {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}", self.bits())
    }
}

impl Serialize for BitWidth {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.serialize_u32(self.bits())
    }
}

impl<'de> Deserialize<'de> for BitWidth {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let v = u32::deserialize(d)?;
        BitWidth::try_from(v).map_err(serde::de::Error::custom)
    }
}

/// 32-bit signed partial sum held in an SPad slot. Overflow is an error,
/// never a wrap.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Accumulator(pub i32);

impl Accumulator {
    pub const ZERO: Accumulator = Accumulator(0);

    pub fn checked_add(self, v: i32) -> Result<Accumulator> {
        self.0.checked_add(v).map(Accumulator).ok_or(Error::AccOverflow)
    }
}

/// Fixed-point tensor. Every element lies in the signed range of `bits`;
/// the payload is stored as `i8` since no supported width exceeds 8 bits.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "RawQTensor")]
pub struct QTensor {
    data: Vec<i8>,
    shape: Vec<usize>,
    bits: BitWidth,
    scale_exp: i32,
}

#[derive(Deserialize)]
struct RawQTensor {
    data: Vec<i64>,
    shape: Vec<usize>,
    bits: BitWidth,
    scale_exp: i32,
}

impl TryFrom<RawQTensor> for QTensor {
    type Error = Error;

    fn try_from(raw: RawQTensor) -> Result<Self> {
        QTensor::from_i64(&raw.data, raw.shape, raw.bits, raw.scale_exp)
    }
}

impl QTensor {
    pub fn new(data: Vec<i8>, shape: Vec<usize>, bits: BitWidth, scale_exp: i32) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.is_empty() || numel != data.len() {
            return Err(Error::shape(format!(
                "shape {shape:?} does not match data length {}",
                data.len()
            )));
        }
        if let Some((index, &v)) = data
            .iter()
            .enumerate()
            .find(|(_, &v)| !bits.contains(v as i64))
        {
            return Err(Error::ValueRange {
                index,
                value: v as i64,
                bits: bits.bits(),
            });
        }
        Ok(QTensor {
            data,
            shape,
            bits,
            scale_exp,
        })
    }

    pub fn from_i64(data: &[i64], shape: Vec<usize>, bits: BitWidth, scale_exp: i32) -> Result<Self> {
        let mut out = Vec::with_capacity(data.len());
        for (index, &v) in data.iter().enumerate() {
            if !bits.contains(v) {
                return Err(Error::ValueRange {
                    index,
                    value: v,
                    bits: bits.bits(),
                });
            }
            out.push(v as i8);
        }
        QTensor::new(out, shape, bits, scale_exp)
    }

    pub fn zeros(shape: Vec<usize>, bits: BitWidth, scale_exp: i32) -> Self {
        let n = shape.iter().product();
        QTensor {
            data: vec![0; n],
            shape,
            bits,
            scale_exp,
        }
    }

    pub fn data(&self) -> &[i8] {
        &self.data
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn bits(&self) -> BitWidth {
        self.bits
    }

    pub fn scale_exp(&self) -> i32 {
        self.scale_exp
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn into_data(self) -> Vec<i8> {
        self.data
    }
}

fn check_scale(scale_exp: i32) -> Result<()> {
    if (-31..=31).contains(&scale_exp) {
        Ok(())
    } else {
        Err(Error::ScaleRange(scale_exp))
    }
}

/// Quantizes `x` to a flat tensor: `clamp(round_half_away(x / 2^scale_exp))`.
pub fn quantize(x: &[f64], bits: BitWidth, scale_exp: i32) -> Result<QTensor> {
    quantize_shaped(x, vec![x.len()], bits, scale_exp)
}

pub fn quantize_shaped(x: &[f64], shape: Vec<usize>, bits: BitWidth, scale_exp: i32) -> Result<QTensor> {
    if x.is_empty() {
        return Err(Error::EmptyTensor);
    }
    check_scale(scale_exp)?;
    let inv = 2f64.powi(-scale_exp);
    let mut data = Vec::with_capacity(x.len());
    for (i, &v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite(i));
        }
        // f64::round is half-away-from-zero
        let q = (v * inv).round();
        let q = q.clamp(bits.min_value() as f64, bits.max_value() as f64) as i8;
        data.push(q);
    }
    QTensor::new(data, shape, bits, scale_exp)
}

pub fn dequantize(t: &QTensor) -> Vec<f64> {
    let scale = 2f64.powi(t.scale_exp);
    t.data.iter().map(|&v| v as f64 * scale).collect()
}

/// Rounded arithmetic right shift of a partial sum back to `out_bits`,
/// with optional fused ReLU. Rounding is half-up (bias then shift).
pub fn requantize(acc: Accumulator, shift: u32, relu: bool, out_bits: BitWidth) -> i32 {
    debug_assert!(shift <= 31);
    let shift = shift.min(31);
    let bias = if shift > 0 { 1i64 << (shift - 1) } else { 0 };
    let mut r = (acc.0 as i64 + bias) >> shift;
    if relu {
        r = r.max(0);
    }
    out_bits.clamp(r)
}

/// Smallest exponent `e` in [-31, 31] with `2^(e + bits - 1) >= max_abs`,
/// i.e. the tightest power-of-two scale whose signed range covers the
/// magnitude (the positive rail saturates by one code). Zero maps to 0.
pub fn covering_scale_exp(max_abs: f64, bits: BitWidth) -> i32 {
    if max_abs.is_nan() || max_abs <= 0.0 || !max_abs.is_finite() {
        return 0;
    }
    let top = bits.bits() as i32 - 1;
    let mut e = (max_abs.log2().ceil() as i32) - top;
    // guard against log2 rounding at exact powers of two
    while e > -31 && 2f64.powi(e - 1 + top) >= max_abs {
        e -= 1;
    }
    while e < 31 && 2f64.powi(e + top) < max_abs {
        e += 1;
    }
    e.clamp(-31, 31)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn bitwidth_only_four_values() {
        for v in 0..=16u32 {
            let ok = BitWidth::try_from(v).is_ok();
            assert_eq!(ok, matches!(v, 1 | 2 | 4 | 8), "bits={v}");
        }
        assert_eq!(BitWidth::B1.min_value(), -1);
        assert_eq!(BitWidth::B1.max_value(), 0);
        assert_eq!(BitWidth::B4.min_value(), -8);
        assert_eq!(BitWidth::B8.max_value(), 127);
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(&[0.0, 0.0], BitWidth::B8, 0).unwrap().data(), &[0, 0]);
        assert_eq!(quantize(&[1.0], BitWidth::B8, -7).unwrap().data(), &[127]);
        // 0.30 * 128 = 38.4
        assert_eq!(quantize(&[0.30], BitWidth::B8, -7).unwrap().data(), &[38]);
        assert_eq!(quantize(&[-0.30], BitWidth::B8, -7).unwrap().data(), &[-38]);
        assert_eq!(quantize(&[-5.0], BitWidth::B8, -7).unwrap().data(), &[-128]);
        // half away from zero
        assert_eq!(quantize(&[2.5, -2.5], BitWidth::B8, 0).unwrap().data(), &[3, -3]);
    }

    #[test]
    fn quantize_errors() {
        assert_eq!(quantize(&[], BitWidth::B8, 0), Err(Error::EmptyTensor));
        assert_eq!(quantize(&[1.0], BitWidth::B8, 32), Err(Error::ScaleRange(32)));
        assert!(matches!(quantize(&[f64::NAN], BitWidth::B8, 0), Err(Error::NonFinite(0))));
    }

    #[test]
    fn dequantize_examples() {
        let t = QTensor::new(vec![0], vec![1], BitWidth::B8, 3).unwrap();
        assert_eq!(dequantize(&t), vec![0.0]);
        let t = QTensor::new(vec![38], vec![1], BitWidth::B8, -7).unwrap();
        assert_eq!(dequantize(&t), vec![0.296875]);
        let t = QTensor::new(vec![-128], vec![1], BitWidth::B8, 0).unwrap();
        assert_eq!(dequantize(&t), vec![-128.0]);
    }

    #[test]
    fn requantize_examples() {
        assert_eq!(requantize(Accumulator(0), 4, false, BitWidth::B8), 0);
        assert_eq!(requantize(Accumulator(100), 0, false, BitWidth::B8), 100);
        assert_eq!(requantize(Accumulator(-300), 1, true, BitWidth::B8), 0);
        // (1000 + 2) >> 2 = 250, saturates
        assert_eq!(requantize(Accumulator(1000), 2, false, BitWidth::B8), 127);
        // half-up: -3/2 = -1.5 -> -1, 3/2 -> 2
        assert_eq!(requantize(Accumulator(-3), 1, false, BitWidth::B8), -1);
        assert_eq!(requantize(Accumulator(3), 1, false, BitWidth::B8), 2);
        assert_eq!(requantize(Accumulator(i32::MAX), 31, false, BitWidth::B8), 1);
    }

    #[test]
    fn qtensor_rejects_out_of_range() {
        assert!(QTensor::new(vec![2], vec![1], BitWidth::B2, 0).is_err());
        assert!(QTensor::new(vec![1, 2], vec![3], BitWidth::B8, 0).is_err());
        assert!(QTensor::new(vec![-2, 1], vec![2], BitWidth::B2, 0).is_ok());
    }

    #[test]
    fn qtensor_json_validates() {
        let ok: QTensor =
            serde_json::from_str(r#"{"data":[1,-2],"shape":[2],"bits":2,"scale_exp":0}"#).unwrap();
        assert_eq!(ok.data(), &[1, -2]);
        assert!(serde_json::from_str::<QTensor>(r#"{"data":[2],"shape":[1],"bits":2,"scale_exp":0}"#).is_err());
        assert!(serde_json::from_str::<QTensor>(r#"{"data":[1],"shape":[1],"bits":3,"scale_exp":0}"#).is_err());
    }

    #[test]
    fn covering_scale_matches_brute_force() {
        fn brute(max_abs: f64, bits: BitWidth) -> i32 {
            (-31..=31)
                .find(|&e| 2f64.powi(e + bits.bits() as i32 - 1) >= max_abs)
                .unwrap_or(31)
        }
        assert_eq!(covering_scale_exp(1.0, BitWidth::B8), -7);
        assert_eq!(covering_scale_exp(0.3, BitWidth::B8), -8);
        assert_eq!(covering_scale_exp(0.0, BitWidth::B8), 0);
        for &m in &[1e-12, 0.001, 0.25, 0.26, 0.5, 0.999, 3.0, 127.0, 128.0, 129.0, 4096.0, 1e12] {
            for b in BitWidth::ALL {
                assert_eq!(covering_scale_exp(m, b), brute(m, b), "max={m} bits={b}");
            }
        }
    }

    proptest! {
        #[test]
        fn round_trip_error_bounded(frac in -1.0f64..1.0, e in -20i32..20) {
            let x = frac * 127.0 * 2f64.powi(e);
            let t = quantize(&[x], BitWidth::B8, e).unwrap();
            let back = dequantize(&t)[0];
            prop_assert!((back - x).abs() <= 2f64.powi(e - 1) + 1e-15);
        }

        #[test]
        fn requantize_in_range(acc in any::<i32>(), shift in 0u32..=31, relu in any::<bool>(), b in 0usize..4) {
            let bits = BitWidth::ALL[b];
            let r = requantize(Accumulator(acc), shift, relu, bits);
            prop_assert!(r >= bits.min_value() && r <= bits.max_value());
            if relu { prop_assert!(r >= 0); }
        }

        #[test]
        fn requantize_monotone(a in any::<i32>(), b in any::<i32>(), shift in 0u32..=31, relu in any::<bool>()) {
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            prop_assert!(
                requantize(Accumulator(lo), shift, relu, BitWidth::B8)
                    <= requantize(Accumulator(hi), shift, relu, BitWidth::B8)
            );
        }
    }
}
