use crate::array::{ChannelBlock, GroupStreams, HwConfig, WeightEntry, REGS_PER_SPE};
use crate::compiler::prune::PruneMask;
use crate::error::{Error, Result};
use crate::quant::QTensor;

/// Packs kept nonzero weights into select-indexed per-PE streams.
///
/// `qweights` is `[out_channels, ...]`; each row is one PE's receptive
/// field. Output channels are blocked by `hw.m_pes`, rows are cut into
/// 16-wide register windows, and within a window each PE gets its kept
/// entries in ascending select order. Streams of one window are padded to
/// equal length with padding entries. Kept entries whose quantized value is
/// zero are skipped like pruned ones.
pub fn pack_weights(qweights: &QTensor, mask: &PruneMask, hw: &HwConfig) -> Result<Vec<ChannelBlock>> {
    let shape = qweights.shape();
    if shape.len() < 2 {
        return Err(Error::shape("weight tensor needs an output-channel axis"));
    }
    let out_c = shape[0];
    let row_len: usize = shape[1..].iter().product();
    if mask.keep.len() != qweights.len() {
        return Err(Error::shape(format!(
            "mask has {} entries for {} weights",
            mask.keep.len(),
            qweights.len()
        )));
    }
    if mask.row_len != row_len || mask.group != REGS_PER_SPE {
        return Err(Error::shape("mask groups are not aligned to 16-wide register windows"));
    }
    let m = hw.m_pes as usize;
    let groups = row_len.div_ceil(REGS_PER_SPE);
    let data = qweights.data();
    let mut blocks = Vec::with_capacity(out_c.div_ceil(m));
    for b in 0..out_c.div_ceil(m) {
        let mut block = ChannelBlock {
            groups: Vec::with_capacity(groups),
        };
        for g in 0..groups {
            let lo = g * REGS_PER_SPE;
            let hi = (lo + REGS_PER_SPE).min(row_len);
            let mut streams: Vec<Vec<WeightEntry>> = (0..m)
                .map(|u| {
                    let c = b * m + u;
                    if c >= out_c {
                        return Vec::new();
                    }
                    (lo..hi)
                        .filter_map(|i| {
                            let idx = c * row_len + i;
                            let w = data[idx];
                            (mask.keep[idx] && w != 0).then(|| WeightEntry::new(w, (i - lo) as u8))
                        })
                        .collect()
                })
                .collect();
            let len = streams.iter().map(Vec::len).max().unwrap_or(0);
            for s in &mut streams {
                s.resize(len, WeightEntry::PADDING);
            }
            block.groups.push(GroupStreams { streams });
        }
        blocks.push(block);
    }
    Ok(blocks)
}
