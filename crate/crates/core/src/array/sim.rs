//! Lock-step execution of a compiled program.

use serde::{Deserialize, Serialize};

use crate::array::program::{LayerKind, LayerProgram, Program};
use crate::array::{
    avg_finish, load_activation_regs, mpe_step, pe_step, PoolMode, SpeState, REGS_PER_SPE,
};
use crate::error::{Error, Result};
use crate::quant::{requantize, Accumulator, BitWidth, QTensor};

/// Per-tile execution counters.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Tracepoint {
    pub layer: u32,
    pub kind: LayerKind,
    pub tile: u32,
    pub reg_loads: u64,
    pub mac_cycles: u64,
    pub active_units: u64,
    pub idle_units: u64,
    pub dense_macs: u64,
    pub actual_macs: u64,
}

/// Runs `prog` on `input` and returns the output tensor plus one
/// tracepoint per executed tile.
pub fn run_program(prog: &Program, input: &QTensor) -> Result<(QTensor, Vec<Tracepoint>)> {
    prog.validate()?;
    if input.shape() != prog.input_shape.as_slice() {
        return Err(Error::invalid(format!(
            "input shape {:?} does not match program input {:?}",
            input.shape(),
            prog.input_shape
        )));
    }
    let mut act = input.data().to_vec();
    let mut scale = input.scale_exp() as i64;
    let mut trace = Vec::new();
    for (li, layer) in prog.layers.iter().enumerate() {
        let (out, s) = if layer.kind.is_conv() {
            run_conv(prog, li, layer, &act, scale, &mut trace)?
        } else {
            run_pool(prog, li, layer, &act, scale, &mut trace)?
        };
        act = out;
        scale = s;
    }
    let scale = i32::try_from(scale).map_err(|_| Error::invalid("output scale exponent overflow"))?;
    let out = QTensor::new(act, prog.output_shape(), BitWidth::B8, scale)?;
    Ok((out, trace))
}

fn run_conv(
    prog: &Program,
    li: usize,
    layer: &LayerProgram,
    input: &[i8],
    in_scale: i64,
    trace: &mut Vec<Tracepoint>,
) -> Result<(Vec<i8>, i64)> {
    let hw = &prog.hw;
    let g = &layer.geom;
    let m = hw.m_pes as usize;
    let n = hw.n_core_elems as usize;
    let lanes = layer.cores_engaged as usize * hw.h_spes as usize;
    let positions = g.out_positions();
    let field = g.field_len();
    let mut out = vec![0i8; g.out_c * positions];
    // spes[core][lane]
    let mut spes: Vec<Vec<SpeState>> = (0..n)
        .map(|_| (0..lanes).map(|_| SpeState::new(m)).collect())
        .collect();
    let mut window = [0i8; REGS_PER_SPE];

    for (ti, tile) in layer.tiles.iter().enumerate() {
        let block = &layer.blocks[tile.block as usize];
        spes.iter_mut().flatten().for_each(SpeState::reset_spad);
        let mut loads = vec![0u64; n];
        let mut cycles = vec![0u64; n];

        for step in &tile.steps {
            for (core, grp_idx) in step.groups.iter().enumerate() {
                let Some(gi) = *grp_idx else { continue };
                let gi = gi as usize;
                let grp = &block.groups[gi];
                loads[core] += 1;
                for (lane, spe) in spes[core].iter_mut().enumerate() {
                    match tile.lanes[lane] {
                        Some(pos) => {
                            for (r, slot) in window.iter_mut().enumerate() {
                                *slot = g
                                    .field_source(pos as usize, gi * REGS_PER_SPE + r)
                                    .map_or(0, |src| input[src]);
                            }
                        }
                        None => window = [0; REGS_PER_SPE],
                    }
                    load_activation_regs(spe, &window)?;
                }
                for j in 0..grp.len() {
                    for spe in spes[core].iter_mut() {
                        for (unit, stream) in grp.streams.iter().enumerate() {
                            pe_step(spe, unit, stream[j], layer.bits)?;
                        }
                    }
                }
                cycles[core] += grp.mac_cycles() as u64;
            }
        }

        let c0 = tile.block as usize * m;
        let real_units = m.min(g.out_c - c0);
        let mut valid_lanes = 0u64;
        for (lane, pos) in tile.lanes.iter().enumerate() {
            let Some(pos) = *pos else { continue };
            valid_lanes += 1;
            for unit in 0..real_units {
                let mut acc = Accumulator::ZERO;
                for core in spes.iter() {
                    acc = acc.checked_add(core[lane].spad[unit].0)?;
                }
                let q = requantize(acc, layer.shift, layer.relu, BitWidth::B8);
                out[(c0 + unit) * positions + pos as usize] = q as i8;
            }
        }

        let kept: u64 = block
            .groups
            .iter()
            .flat_map(|grp| grp.streams[..real_units].iter())
            .map(|s| s.iter().filter(|e| !e.padding).count() as u64)
            .sum();
        let active = (n * lanes * m) as u64;
        trace.push(Tracepoint {
            layer: li as u32,
            kind: layer.kind,
            tile: ti as u32,
            reg_loads: loads.iter().copied().max().unwrap_or(0),
            mac_cycles: cycles.iter().copied().max().unwrap_or(0),
            active_units: active,
            idle_units: hw.total_units() - active,
            dense_macs: valid_lanes * real_units as u64 * field as u64,
            actual_macs: valid_lanes * kept,
        });
    }
    Ok((out, in_scale + layer.weight_scale_exp as i64 + layer.shift as i64))
}

fn pool_window(layer: &LayerProgram, input: &[i8], out_idx: usize, buf: &mut Vec<i8>) {
    let g = &layer.geom;
    let positions = g.out_positions();
    let c = out_idx / positions;
    let pos = out_idx % positions;
    let (orow, ocol) = (pos / g.out_cols, pos % g.out_cols);
    for ky in 0..g.kernel.0 {
        for kx in 0..g.kernel.1 {
            let r = orow * g.stride.0 + ky;
            let q = ocol * g.stride.1 + kx;
            buf.push(input[(c * g.in_rows + r) * g.in_cols + q]);
        }
    }
}

fn run_pool(
    prog: &Program,
    li: usize,
    layer: &LayerProgram,
    input: &[i8],
    in_scale: i64,
    trace: &mut Vec<Tracepoint>,
) -> Result<(Vec<i8>, i64)> {
    let hw = &prog.hw;
    let g = &layer.geom;
    let mode = layer.kind.pool_mode().expect("pool layer");
    let mpe = hw.mpe_per_spe as usize;
    let first_mpe = hw.pe_per_spe as usize;
    let win = g.window_len();
    let spe_count = tile_spes(prog, layer);
    let mut out = vec![0i8; g.out_c * g.out_positions()];
    let mut spes: Vec<SpeState> = (0..spe_count).map(|_| SpeState::new(hw.m_pes as usize)).collect();
    let mut buf = Vec::with_capacity(mpe * win);
    let mut window = [0i8; REGS_PER_SPE];

    for (ti, tile) in layer.tiles.iter().enumerate() {
        let mut buffers: Vec<Vec<i8>> = Vec::with_capacity(spe_count);
        for s in 0..spe_count {
            buf.clear();
            for k in 0..mpe {
                match tile.lanes[s * mpe + k] {
                    Some(idx) => pool_window(layer, input, idx as usize, &mut buf),
                    None => buf.extend(std::iter::repeat_n(0, win)),
                }
            }
            buffers.push(buf.clone());
        }
        for spe in spes.iter_mut() {
            spe.reset_spad();
            if mode == PoolMode::Max {
                for k in 0..mpe {
                    spe.spad[first_mpe + k] = Accumulator(i8::MIN as i32);
                }
            }
        }
        let mut mac_cycles = 0u64;
        for (chunk, _) in tile.steps.iter().enumerate() {
            let lo = chunk * REGS_PER_SPE;
            let hi = lo + REGS_PER_SPE;
            for (spe, values) in spes.iter_mut().zip(&buffers) {
                window.fill(0);
                let end = hi.min(values.len());
                window[..end - lo].copy_from_slice(&values[lo..end]);
                load_activation_regs(spe, &window)?;
                for k in 0..mpe {
                    let a = lo.max(k * win);
                    let b = hi.min((k + 1) * win);
                    for flat in a..b {
                        mpe_step(spe, first_mpe + k, flat - lo, mode)?;
                    }
                }
            }
            let busiest = (0..mpe)
                .map(|k| hi.min((k + 1) * win).saturating_sub(lo.max(k * win)))
                .max()
                .unwrap_or(0);
            mac_cycles += busiest as u64;
        }
        for (s, spe) in spes.iter().enumerate() {
            for k in 0..mpe {
                let Some(idx) = tile.lanes[s * mpe + k] else { continue };
                let slot = spe.spad[first_mpe + k].0;
                out[idx as usize] = match mode {
                    PoolMode::Max => slot as i8,
                    PoolMode::Avg => avg_finish(slot, win)?,
                };
            }
        }
        let active = (spe_count * mpe) as u64;
        trace.push(Tracepoint {
            layer: li as u32,
            kind: layer.kind,
            tile: ti as u32,
            reg_loads: tile.steps.len() as u64,
            mac_cycles,
            active_units: active,
            idle_units: hw.total_units() - active,
            dense_macs: 0,
            actual_macs: 0,
        });
    }
    Ok((out, in_scale))
}

fn tile_spes(prog: &Program, layer: &LayerProgram) -> usize {
    prog.hw.n_core_elems as usize * layer.cores_engaged as usize * prog.hw.h_spes as usize
}
