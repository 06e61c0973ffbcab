//! Software model of the reconfigurable signed multiplier.
//!
//! The weight is split into 1-bit segments of its two's-complement encoding.
//! Each segment gates the (shifted) activation taken from the register MUX,
//! and the gated partial products are accumulated. The most significant
//! segment carries negative weight, which gives signed multiplication for
//! every supported width with the same datapath. A 1-bit weight therefore
//! encodes {0, -1}.

use crate::error::{Error, Result};
use crate::quant::{Accumulator, BitWidth};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CmulOperands {
    pub activation: i8,
    pub weight: i32,
    pub bits: BitWidth,
}

impl CmulOperands {
    pub fn new(activation: i8, weight: i32, bits: BitWidth) -> Result<Self> {
        if !bits.contains(weight as i64) {
            return Err(Error::OperandRange(format!(
                "weight {weight} does not fit in {bits}-bit two's complement"
            )));
        }
        Ok(CmulOperands {
            activation,
            weight,
            bits,
        })
    }
}

/// Segment-gated product. Never calls native multiply on the operands.
pub fn cmul_mul(ops: CmulOperands) -> Result<i32> {
    let CmulOperands {
        activation,
        weight,
        bits,
    } = ops;
    if !bits.contains(weight as i64) {
        return Err(Error::OperandRange(format!(
            "weight {weight} does not fit in {bits}-bit two's complement"
        )));
    }
    Ok(segment_product(activation, weight, bits))
}

#[inline]
pub(crate) fn segment_product(activation: i8, weight: i32, bits: BitWidth) -> i32 {
    let b = bits.bits();
    let encoding = (weight as u32) & ((1u32 << b) - 1);
    let a = activation as i32;
    let mut sum = 0i32;
    for i in 0..b - 1 {
        if (encoding >> i) & 1 == 1 {
            sum += a << i;
        }
    }
    if (encoding >> (b - 1)) & 1 == 1 {
        sum -= a << (b - 1);
    }
    sum
}

pub fn cmul_mac(acc: Accumulator, ops: CmulOperands) -> Result<Accumulator> {
    acc.checked_add(cmul_mul(ops)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn ops(a: i8, w: i32, bits: u32) -> CmulOperands {
        CmulOperands::new(a, w, BitWidth::try_from(bits).unwrap()).unwrap()
    }

    #[test]
    fn mul_examples() {
        assert_eq!(cmul_mul(ops(3, 0, 8)).unwrap(), 0);
        // 1-bit: encoding 1 is the sign bit, weight value -1
        assert_eq!(cmul_mul(CmulOperands { activation: 5, weight: -1, bits: BitWidth::B1 }).unwrap(), -5);
        assert_eq!(segment_product(5, 1, BitWidth::B1), -5);
        assert_eq!(cmul_mul(ops(-37, -5, 8)).unwrap(), 185);
        assert_eq!(cmul_mul(ops(7, -8, 4)).unwrap(), -56);
        assert_eq!(cmul_mul(ops(-128, -128, 8)).unwrap(), 16384);
    }

    #[test]
    fn weight_out_of_range_is_rejected() {
        assert!(matches!(CmulOperands::new(1, 8, BitWidth::B4), Err(Error::OperandRange(_))));
        assert!(matches!(CmulOperands::new(1, 1, BitWidth::B1), Err(Error::OperandRange(_))));
        let raw = CmulOperands { activation: 1, weight: 2, bits: BitWidth::B2 };
        assert!(matches!(cmul_mul(raw), Err(Error::OperandRange(_))));
    }

    #[test]
    fn mac_examples() {
        assert_eq!(cmul_mac(Accumulator(0), ops(0, 127, 8)).unwrap(), Accumulator(0));
        assert_eq!(cmul_mac(Accumulator(10), ops(2, 3, 8)).unwrap(), Accumulator(16));
        assert_eq!(cmul_mac(Accumulator(185), ops(-37, -5, 8)).unwrap(), Accumulator(370));
    }

    #[test]
    fn mac_overflow_is_an_error() {
        assert_eq!(cmul_mac(Accumulator(i32::MAX), ops(1, 1, 8)), Err(Error::AccOverflow));
        assert_eq!(cmul_mac(Accumulator(i32::MIN), ops(1, -1, 8)), Err(Error::AccOverflow));
    }

    #[test]
    fn exhaustive_all_widths() {
        for bits in BitWidth::ALL {
            for a in i8::MIN..=i8::MAX {
                for w in bits.min_value()..=bits.max_value() {
                    let got = cmul_mul(CmulOperands::new(a, w, bits).unwrap()).unwrap();
                    assert_eq!(got, a as i32 * w, "a={a} w={w} bits={bits}");
                }
            }
        }
    }

    proptest! {
        #[test]
        fn narrow_width_is_range_restriction(a in any::<i8>(), w in -8i32..=7, b in 0usize..3) {
            let bits = BitWidth::ALL[b];
            prop_assume!(bits.contains(w as i64));
            prop_assert_eq!(
                cmul_mul(ops(a, w, bits.bits())).unwrap(),
                cmul_mul(ops(a, w, 8)).unwrap()
            );
        }

        #[test]
        fn mac_distributes(a1 in any::<i8>(), w1 in -128i32..=127, a2 in any::<i8>(), w2 in -128i32..=127) {
            let x = ops(a1, w1, 8);
            let y = ops(a2, w2, 8);
            let acc = cmul_mac(cmul_mac(Accumulator::ZERO, x).unwrap(), y).unwrap();
            prop_assert_eq!(acc.0, cmul_mul(x).unwrap() + cmul_mul(y).unwrap());
        }
    }
}
