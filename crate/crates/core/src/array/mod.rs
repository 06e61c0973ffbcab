//! Functional model of the PE array.
//!
//! The array is organized as `N core elements × W computing cores × H SPEs ×
//! M units`. Each SPE holds one 16-entry activation register file and one
//! shared SPad with a slot per unit (12 PEs followed by 4 MPEs in the
//! default configuration). All units of an SPE read the register file and
//! update their own SPad slot in the same logical cycle.

mod program;
mod sim;

pub use program::{
    ChannelBlock, GroupStreams, LayerGeom, LayerKind, LayerProgram, LoadStep, Program, Tile,
    PROGRAM_MAGIC, PROGRAM_VERSION,
};
pub use sim::{run_program, Tracepoint};

use serde::{Deserialize, Serialize};

use crate::cmul::segment_product;
use crate::error::{Error, Result};
use crate::quant::{Accumulator, BitWidth};

pub const REGS_PER_SPE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HwConfig {
    pub n_core_elems: u32,
    pub w_cores: u32,
    pub h_spes: u32,
    pub m_pes: u32,
    pub pe_per_spe: u32,
    pub mpe_per_spe: u32,
    pub regs_per_spe: u32,
    pub freq_hz: u64,
}

impl Default for HwConfig {
    /// Fabricated configuration: 2×4×4×16 = 512 units at 400 MHz.
    fn default() -> Self {
        HwConfig {
            n_core_elems: 2,
            w_cores: 4,
            h_spes: 4,
            m_pes: 16,
            pe_per_spe: 12,
            mpe_per_spe: 4,
            regs_per_spe: REGS_PER_SPE as u32,
            freq_hz: 400_000_000,
        }
    }
}

impl HwConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::HwConfig(m.to_string()));
        if self.n_core_elems == 0 || self.w_cores == 0 || self.h_spes == 0 || self.m_pes == 0 {
            return bad("array dimensions must be positive");
        }
        if self.pe_per_spe + self.mpe_per_spe != self.m_pes {
            return bad("pe_per_spe + mpe_per_spe must equal m_pes");
        }
        if self.mpe_per_spe == 0 {
            return bad("at least one MPE per SPE is required");
        }
        if self.regs_per_spe as usize != REGS_PER_SPE {
            return bad("select signals are 4 bits wide; regs_per_spe must be 16");
        }
        if self.m_pes > 64 || self.n_core_elems > 64 || self.w_cores > 256 || self.h_spes > 256 {
            return bad("array dimension too large");
        }
        if self.freq_hz == 0 {
            return bad("freq_hz must be positive");
        }
        Ok(())
    }

    pub fn total_units(&self) -> u64 {
        self.n_core_elems as u64 * self.w_cores as u64 * self.h_spes as u64 * self.m_pes as u64
    }

    pub fn spe_count(&self) -> usize {
        (self.n_core_elems * self.w_cores * self.h_spes) as usize
    }
}

/// Packed weight plus 4-bit register select. Padding entries keep
/// lock-step stream lengths equal and are skipped without costing a cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct WeightEntry {
    pub weight: i8,
    pub sel: u8,
    pub padding: bool,
}

impl WeightEntry {
    pub const PADDING: WeightEntry = WeightEntry {
        weight: 0,
        sel: 0,
        padding: true,
    };

    pub fn new(weight: i8, sel: u8) -> Self {
        debug_assert!((sel as usize) < REGS_PER_SPE);
        WeightEntry {
            weight,
            sel,
            padding: false,
        }
    }

    /// On-chip select byte: low 4 bits are the register index, bit 7 flags padding.
    pub fn select_byte(&self) -> u8 {
        (self.sel & 0x0f) | if self.padding { 0x80 } else { 0 }
    }

    pub fn from_bytes(weight: u8, select: u8) -> Result<Self> {
        if select & 0x70 != 0 {
            return Err(Error::invalid(format!("reserved select bits set in {select:#04x}")));
        }
        let padding = select & 0x80 != 0;
        if padding && (weight != 0 || select & 0x0f != 0) {
            return Err(Error::invalid("padding entry must be (weight=0, sel=0)"));
        }
        Ok(WeightEntry {
            weight: weight as i8,
            sel: select & 0x0f,
            padding,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SpeState {
    pub act_regs: [i8; REGS_PER_SPE],
    pub spad: Vec<Accumulator>,
}

impl SpeState {
    pub fn new(units: usize) -> Self {
        SpeState {
            act_regs: [0; REGS_PER_SPE],
            spad: vec![Accumulator::ZERO; units],
        }
    }

    pub fn reset_spad(&mut self) {
        self.spad.iter_mut().for_each(|s| *s = Accumulator::ZERO);
    }
}

/// Replaces the register file wholesale; the SPad is untouched.
pub fn load_activation_regs(spe: &mut SpeState, window: &[i8]) -> Result<()> {
    if window.len() != REGS_PER_SPE {
        return Err(Error::shape(format!(
            "register window has {} values, expected {REGS_PER_SPE}",
            window.len()
        )));
    }
    spe.act_regs.copy_from_slice(window);
    Ok(())
}

/// One sparse MAC on unit `unit`. Returns whether a cycle was consumed.
pub fn pe_step(spe: &mut SpeState, unit: usize, entry: WeightEntry, bits: BitWidth) -> Result<bool> {
    if unit >= spe.spad.len() {
        return Err(Error::invalid(format!("unit {unit} out of range")));
    }
    if entry.sel as usize >= REGS_PER_SPE {
        return Err(Error::invalid(format!("select {} out of range", entry.sel)));
    }
    if entry.padding {
        return Ok(false);
    }
    if !bits.contains(entry.weight as i64) {
        return Err(Error::OperandRange(format!(
            "weight {} does not fit in {bits} bits",
            entry.weight
        )));
    }
    let a = spe.act_regs[entry.sel as usize];
    let slot = &mut spe.spad[unit];
    *slot = slot.checked_add(segment_product(a, entry.weight as i32, bits))?;
    Ok(true)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PoolMode {
    Max,
    Avg,
}

pub fn mpe_pool(values: &[i8], mode: PoolMode) -> Result<i8> {
    if values.is_empty() {
        return Err(Error::EmptyPool);
    }
    match mode {
        PoolMode::Max => Ok(*values.iter().max().unwrap()),
        PoolMode::Avg => {
            let sum: i32 = values.iter().map(|&v| v as i32).sum();
            avg_finish(sum, values.len())
        }
    }
}

/// `(sum + len/2) >> log2(len)`, clamped to 8 bits.
pub(crate) fn avg_finish(sum: i32, len: usize) -> Result<i8> {
    if len == 0 {
        return Err(Error::EmptyPool);
    }
    if !len.is_power_of_two() {
        return Err(Error::UnsupportedPoolSize(len));
    }
    let shift = len.trailing_zeros();
    let r = (sum as i64 + (len as i64 >> 1)) >> shift;
    Ok(BitWidth::B8.clamp(r) as i8)
}

/// Pooling step on an MPE slot: running max or running sum.
pub(crate) fn mpe_step(spe: &mut SpeState, unit: usize, sel: usize, mode: PoolMode) -> Result<()> {
    let a = spe.act_regs[sel] as i32;
    let slot = &mut spe.spad[unit];
    match mode {
        PoolMode::Max => slot.0 = slot.0.max(a),
        PoolMode::Avg => *slot = slot.checked_add(a)?,
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn default_config_is_fabricated_array() {
        let hw = HwConfig::default();
        hw.validate().unwrap();
        assert_eq!(hw.total_units(), 512);
        assert_eq!(hw.pe_per_spe + hw.mpe_per_spe, 16);
    }

    #[test]
    fn config_validation() {
        for hw in [
            HwConfig { pe_per_spe: 11, ..HwConfig::default() },
            HwConfig { regs_per_spe: 8, ..HwConfig::default() },
            HwConfig { h_spes: 0, ..HwConfig::default() },
        ] {
            assert!(hw.validate().is_err());
        }
    }

    #[test]
    fn load_examples() {
        let mut spe = SpeState::new(16);
        load_activation_regs(&mut spe, &[0; 16]).unwrap();
        assert_eq!(spe.act_regs, [0; 16]);
        let ramp: Vec<i8> = (0..16).collect();
        load_activation_regs(&mut spe, &ramp).unwrap();
        for i in 0..16 {
            assert_eq!(spe.act_regs[i], i as i8);
        }
        load_activation_regs(&mut spe, &[-1; 16]).unwrap();
        assert_eq!(spe.act_regs, [-1; 16]);
        assert!(matches!(load_activation_regs(&mut spe, &[0; 15]), Err(Error::Shape(_))));
    }

    #[test]
    fn load_leaves_spad_alone() {
        let mut spe = SpeState::new(16);
        spe.spad[5] = Accumulator(42);
        load_activation_regs(&mut spe, &[3; 16]).unwrap();
        assert_eq!(spe.spad[5], Accumulator(42));
    }

    #[test]
    fn pe_step_examples() {
        let mut spe = SpeState::new(16);
        spe.act_regs[7] = -4;
        assert!(pe_step(&mut spe, 3, WeightEntry::new(5, 7), BitWidth::B8).unwrap());
        assert_eq!(spe.spad[3], Accumulator(-20));

        let before = spe.clone();
        assert!(!pe_step(&mut spe, 3, WeightEntry::PADDING, BitWidth::B8).unwrap());
        assert_eq!(spe, before);

        spe.act_regs[2] = 0;
        pe_step(&mut spe, 3, WeightEntry::new(127, 2), BitWidth::B8).unwrap();
        assert_eq!(spe.spad[3], Accumulator(-20));
    }

    #[test]
    fn pe_step_overflow_propagates() {
        let mut spe = SpeState::new(16);
        spe.act_regs[0] = 127;
        spe.spad[0] = Accumulator(i32::MAX - 10);
        assert_eq!(
            pe_step(&mut spe, 0, WeightEntry::new(127, 0), BitWidth::B8),
            Err(Error::AccOverflow)
        );
    }

    #[test]
    fn pool_examples() {
        assert_eq!(mpe_pool(&[-5], PoolMode::Max).unwrap(), -5);
        assert_eq!(mpe_pool(&[1, 3, -2, 2], PoolMode::Avg).unwrap(), 1);
        assert_eq!(mpe_pool(&[-1, -3, -2, -4], PoolMode::Max).unwrap(), -1);
        assert_eq!(mpe_pool(&[], PoolMode::Max), Err(Error::EmptyPool));
        assert_eq!(mpe_pool(&[1, 2, 3], PoolMode::Avg), Err(Error::UnsupportedPoolSize(3)));
        assert_eq!(mpe_pool(&[1, 2, 3], PoolMode::Max).unwrap(), 3);
        assert_eq!(mpe_pool(&[127, 127], PoolMode::Avg).unwrap(), 127);
        assert_eq!(mpe_pool(&[-128, -127], PoolMode::Avg).unwrap(), -127);
    }

    #[test]
    fn select_byte_encoding() {
        assert_eq!(WeightEntry::new(-3, 9).select_byte(), 0x09);
        assert_eq!(WeightEntry::PADDING.select_byte(), 0x80);
        assert_eq!(WeightEntry::from_bytes(0xfd, 0x09).unwrap(), WeightEntry::new(-3, 9));
        assert!(WeightEntry::from_bytes(0, 0x10).is_err());
        assert!(WeightEntry::from_bytes(1, 0x80).is_err());
    }

    proptest! {
        #[test]
        fn spad_isolation(regs in proptest::array::uniform16(any::<i8>()),
                          unit in 0usize..16, w in any::<i8>(), sel in 0u8..16) {
            let mut spe = SpeState::new(16);
            spe.act_regs = regs;
            for (i, s) in spe.spad.iter_mut().enumerate() {
                *s = Accumulator(i as i32 * 1000);
            }
            let before = spe.spad.clone();
            pe_step(&mut spe, unit, WeightEntry::new(w, sel), BitWidth::B8).unwrap();
            for (j, (now, was)) in spe.spad.iter().zip(&before).enumerate() {
                if j != unit {
                    prop_assert_eq!(now, was);
                }
            }
            prop_assert_eq!(spe.spad[unit].0, before[unit].0 + regs[sel as usize] as i32 * w as i32);
        }

        #[test]
        fn incremental_pool_matches_mpe_pool(vals in proptest::collection::vec(any::<i8>(), 1..16), avg in any::<bool>()) {
            let mode = if avg { PoolMode::Avg } else { PoolMode::Max };
            let n = if avg { 1usize << (usize::BITS - 1 - vals.len().leading_zeros()) } else { vals.len() };
            let vals = &vals[..n];
            let mut spe = SpeState::new(16);
            let mut regs = [0i8; 16];
            regs[..n].copy_from_slice(vals);
            load_activation_regs(&mut spe, &regs).unwrap();
            if mode == PoolMode::Max { spe.spad[12] = Accumulator(i8::MIN as i32); }
            for sel in 0..n { mpe_step(&mut spe, 12, sel, mode).unwrap(); }
            let got = match mode {
                PoolMode::Max => spe.spad[12].0 as i8,
                PoolMode::Avg => avg_finish(spe.spad[12].0, n).unwrap(),
            };
            prop_assert_eq!(got, mpe_pool(vals, mode).unwrap());
        }
    }
}
