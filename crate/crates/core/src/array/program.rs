//! Compiled program: per-layer tile schedules and packed PE streams, plus
//! the versioned `SASM` binary container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! header   "SASM" | version u16 | HwConfig (7 × u32, freq u64)
//!          input_scale_exp i32 | rank u8 | dims u32 × rank | layer_count u16
//! layer    section_len u32 | kind u8 | bits u8 | relu u8 | shift u8
//!          weight_scale_exp i32 | cores_engaged u16 | rank u8
//!          in (c, rows, cols) u32 × 3 | out (c, rows, cols) u32 × 3
//!          kernel (h, w) u16 × 2 | stride u16 × 2 | pad u16 × 2
//!          block_count u16 | group_count u16
//!          per block, per group: len u16, then per unit: len weight bytes
//!              followed by len select bytes
//!          tile_count u32
//!          per tile: block u16 | lane_count u16 | lanes i32 × lane_count
//!              step_count u16 | per step: group i32 × N   (-1 = none)
//! ```
//!
//! Select bytes carry the register index in the low 4 bits and the padding
//! flag in bit 7. Weights are one byte two's complement at any logical width.

use serde::{Deserialize, Serialize};

use crate::array::{HwConfig, PoolMode, WeightEntry, REGS_PER_SPE};
use crate::error::{Error, Result};
use crate::quant::BitWidth;

pub const PROGRAM_MAGIC: &[u8; 4] = b"SASM";
pub const PROGRAM_VERSION: u16 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv1d,
    Conv2d,
    MaxPool,
    AvgPool,
    GlobalAvg,
}

impl LayerKind {
    pub fn is_conv(self) -> bool {
        matches!(self, LayerKind::Conv1d | LayerKind::Conv2d)
    }

    pub fn pool_mode(self) -> Option<PoolMode> {
        match self {
            LayerKind::MaxPool => Some(PoolMode::Max),
            LayerKind::AvgPool | LayerKind::GlobalAvg => Some(PoolMode::Avg),
            _ => None,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            LayerKind::Conv1d => "conv1d",
            LayerKind::Conv2d => "conv2d",
            LayerKind::MaxPool => "maxpool",
            LayerKind::AvgPool => "avgpool",
            LayerKind::GlobalAvg => "global_avg",
        }
    }

    fn code(self) -> u8 {
        match self {
            LayerKind::Conv1d => 0,
            LayerKind::Conv2d => 1,
            LayerKind::MaxPool => 2,
            LayerKind::AvgPool => 3,
            LayerKind::GlobalAvg => 4,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => LayerKind::Conv1d,
            1 => LayerKind::Conv2d,
            2 => LayerKind::MaxPool,
            3 => LayerKind::AvgPool,
            4 => LayerKind::GlobalAvg,
            _ => return None,
        })
    }
}

/// Spatial geometry. One-dimensional layers use `rows` as the length and
/// `cols == 1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct LayerGeom {
    pub rank: u8,
    pub in_c: usize,
    pub in_rows: usize,
    pub in_cols: usize,
    pub out_c: usize,
    pub out_rows: usize,
    pub out_cols: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl LayerGeom {
    pub fn in_shape(&self) -> Vec<usize> {
        shape_of(self.rank, self.in_c, self.in_rows, self.in_cols)
    }

    pub fn out_shape(&self) -> Vec<usize> {
        shape_of(self.rank, self.out_c, self.out_rows, self.out_cols)
    }

    /// Flattened receptive field length in (channel, ky, kx) order.
    pub fn field_len(&self) -> usize {
        self.in_c * self.kernel.0 * self.kernel.1
    }

    pub fn group_count(&self) -> usize {
        self.field_len().div_ceil(REGS_PER_SPE)
    }

    pub fn out_positions(&self) -> usize {
        self.out_rows * self.out_cols
    }

    pub fn window_len(&self) -> usize {
        self.kernel.0 * self.kernel.1
    }

    /// Index into a `[c][rows][cols]` input for receptive-field entry `f`
    /// of output position `pos`, or `None` when it falls in zero padding.
    pub fn field_source(&self, pos: usize, f: usize) -> Option<usize> {
        let (kh, kw) = self.kernel;
        if f >= self.field_len() {
            return None;
        }
        let c = f / (kh * kw);
        let ky = (f / kw) % kh;
        let kx = f % kw;
        let orow = pos / self.out_cols;
        let ocol = pos % self.out_cols;
        let r = (orow * self.stride.0 + ky).checked_sub(self.pad.0)?;
        let q = (ocol * self.stride.1 + kx).checked_sub(self.pad.1)?;
        if r >= self.in_rows || q >= self.in_cols {
            return None;
        }
        Some((c * self.in_rows + r) * self.in_cols + q)
    }

    pub(crate) fn expected_out(&self) -> Option<(usize, usize)> {
        let dim = |n: usize, k: usize, s: usize, p: usize| -> Option<usize> {
            let padded = n + 2 * p;
            if k == 0 || s == 0 || padded < k {
                None
            } else {
                Some((padded - k) / s + 1)
            }
        };
        Some((
            dim(self.in_rows, self.kernel.0, self.stride.0, self.pad.0)?,
            dim(self.in_cols, self.kernel.1, self.stride.1, self.pad.1)?,
        ))
    }
}

fn shape_of(rank: u8, c: usize, rows: usize, cols: usize) -> Vec<usize> {
    if rank == 1 {
        vec![c, rows]
    } else {
        vec![c, rows, cols]
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GroupStreams {
    /// One stream per unit (output channel within the block).
    pub streams: Vec<Vec<WeightEntry>>,
}

impl GroupStreams {
    pub fn len(&self) -> usize {
        self.streams.first().map_or(0, Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Lock-step cycles for this group: padding entries are free.
    pub fn mac_cycles(&self) -> usize {
        self.streams
            .iter()
            .map(|s| s.iter().filter(|e| !e.padding).count())
            .max()
            .unwrap_or(0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct ChannelBlock {
    pub groups: Vec<GroupStreams>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LoadStep {
    /// Register-file window index loaded by each core element, if any.
    pub groups: Vec<Option<u32>>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Tile {
    pub block: u32,
    /// Conv: output position per (core, SPE) lane. Pool: flat output index
    /// per MPE unit. `None` marks a zero-padded lane.
    pub lanes: Vec<Option<u32>>,
    pub steps: Vec<LoadStep>,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct LayerProgram {
    pub kind: LayerKind,
    pub bits: BitWidth,
    pub relu: bool,
    pub shift: u32,
    pub weight_scale_exp: i32,
    pub cores_engaged: u32,
    pub geom: LayerGeom,
    pub blocks: Vec<ChannelBlock>,
    pub tiles: Vec<Tile>,
}

impl LayerProgram {
    /// Register-file chunks needed by one SPE's MPE windows in a pool tile.
    pub fn pool_chunks(&self, mpe_per_spe: usize) -> usize {
        (mpe_per_spe * self.geom.window_len()).div_ceil(REGS_PER_SPE)
    }

    pub fn nonpadding_entries(&self) -> usize {
        self.blocks
            .iter()
            .flat_map(|b| b.groups.iter())
            .flat_map(|g| g.streams.iter())
            .map(|s| s.iter().filter(|e| !e.padding).count())
            .sum()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Program {
    pub hw: HwConfig,
    pub input_shape: Vec<usize>,
    pub input_scale_exp: i32,
    pub layers: Vec<LayerProgram>,
}

impl Program {
    pub fn output_shape(&self) -> Vec<usize> {
        self.layers
            .last()
            .map(|l| l.geom.out_shape())
            .unwrap_or_else(|| self.input_shape.clone())
    }

    pub fn validate(&self) -> Result<()> {
        self.hw.validate().map_err(|e| Error::invalid(e.to_string()))?;
        if self.layers.is_empty() {
            return Err(Error::invalid("program has no layers"));
        }
        let mut shape = self.input_shape.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            if layer.geom.in_shape() != shape {
                return Err(Error::invalid(format!(
                    "layer {i}: input shape {:?} does not match {:?}",
                    layer.geom.in_shape(),
                    shape
                )));
            }
            validate_layer(&self.hw, layer).map_err(|e| match e {
                Error::ProgramInvalid(m) => Error::invalid(format!("layer {i}: {m}")),
                other => other,
            })?;
            shape = layer.geom.out_shape();
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Vec::new();
        w.extend_from_slice(PROGRAM_MAGIC);
        put_u16(&mut w, PROGRAM_VERSION);
        let hw = &self.hw;
        for v in [
            hw.n_core_elems,
            hw.w_cores,
            hw.h_spes,
            hw.m_pes,
            hw.pe_per_spe,
            hw.mpe_per_spe,
            hw.regs_per_spe,
        ] {
            put_u32(&mut w, v);
        }
        w.extend_from_slice(&hw.freq_hz.to_le_bytes());
        put_i32(&mut w, self.input_scale_exp);
        w.push(self.input_shape.len() as u8);
        for &d in &self.input_shape {
            put_u32(&mut w, d as u32);
        }
        put_u16(&mut w, self.layers.len() as u16);
        for layer in &self.layers {
            let section = encode_layer(layer);
            put_u32(&mut w, section.len() as u32);
            w.extend_from_slice(&section);
        }
        w
    }

    /// Parses and validates a program container.
    pub fn from_bytes(bytes: &[u8]) -> Result<Program> {
        let mut r = Reader::new(bytes);
        if r.take(4)? != PROGRAM_MAGIC {
            return Err(r.err_at(0, "bad magic (expected \"SASM\")"));
        }
        let version = r.u16()?;
        if version != PROGRAM_VERSION {
            return Err(r.err_at(4, format!("unsupported version {version}")));
        }
        let hw = HwConfig {
            n_core_elems: r.u32()?,
            w_cores: r.u32()?,
            h_spes: r.u32()?,
            m_pes: r.u32()?,
            pe_per_spe: r.u32()?,
            mpe_per_spe: r.u32()?,
            regs_per_spe: r.u32()?,
            freq_hz: r.u64()?,
        };
        hw.validate()
            .map_err(|e| r.err(format!("header: {e}")))?;
        let input_scale_exp = r.i32()?;
        let rank = r.u8()? as usize;
        if !(1..=4).contains(&rank) {
            return Err(r.err(format!("bad input rank {rank}")));
        }
        let mut input_shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            input_shape.push(r.u32()? as usize);
        }
        let n_layers = r.u16()? as usize;
        let mut layers = Vec::with_capacity(n_layers);
        for i in 0..n_layers {
            let len = r.u32()? as usize;
            let start = r.pos;
            let section = r.take(len)?;
            let mut lr = Reader {
                bytes: section,
                pos: 0,
                base: start,
            };
            let layer = decode_layer(&mut lr, &hw).map_err(|e| match e {
                Error::Format { location, msg } => Error::Format {
                    location,
                    msg: format!("layer {i}: {msg}"),
                },
                other => other,
            })?;
            if lr.pos != section.len() {
                return Err(lr.err(format!("layer {i}: trailing bytes in section")));
            }
            layers.push(layer);
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after last layer"));
        }
        let prog = Program {
            hw,
            input_shape,
            input_scale_exp,
            layers,
        };
        prog.validate()?;
        Ok(prog)
    }
}

fn validate_layer(hw: &HwConfig, layer: &LayerProgram) -> Result<()> {
    let g = &layer.geom;
    let m = hw.m_pes as usize;
    let n = hw.n_core_elems as usize;
    let h = hw.h_spes as usize;
    if layer.shift > 31 {
        return Err(Error::invalid(format!("shift {} exceeds 31", layer.shift)));
    }
    if !(1..=2).contains(&g.rank) || (g.rank == 1 && (g.in_cols != 1 || g.out_cols != 1)) {
        return Err(Error::invalid("bad geometry rank"));
    }
    if layer.cores_engaged == 0 || layer.cores_engaged > hw.w_cores {
        return Err(Error::invalid("cores_engaged out of range"));
    }
    let w_eng = layer.cores_engaged as usize;
    if g.expected_out() != Some((g.out_rows, g.out_cols)) {
        return Err(Error::invalid("output geometry inconsistent with kernel/stride/pad"));
    }
    let outputs = g.out_c * g.out_positions();
    let mut covered = vec![false; outputs];

    if layer.kind.is_conv() {
        let groups = g.group_count();
        if layer.blocks.len() != g.out_c.div_ceil(m) {
            return Err(Error::invalid("channel block count mismatch"));
        }
        for (bi, block) in layer.blocks.iter().enumerate() {
            if block.groups.len() != groups {
                return Err(Error::invalid(format!("block {bi}: group count mismatch")));
            }
            for (gi, grp) in block.groups.iter().enumerate() {
                if grp.streams.len() != m {
                    return Err(Error::invalid(format!("block {bi} group {gi}: stream count")));
                }
                let len = grp.len();
                let group_width = (g.field_len() - gi * REGS_PER_SPE).min(REGS_PER_SPE);
                for (u, s) in grp.streams.iter().enumerate() {
                    if s.len() != len {
                        return Err(Error::invalid(format!(
                            "block {bi} group {gi}: unequal stream lengths"
                        )));
                    }
                    let real_channel = bi * m + u < g.out_c;
                    for e in s {
                        if e.padding {
                            continue;
                        }
                        if !real_channel {
                            return Err(Error::invalid("padded channel carries weights"));
                        }
                        if e.sel as usize >= group_width {
                            return Err(Error::invalid("select index beyond receptive field"));
                        }
                        if !layer.bits.contains(e.weight as i64) {
                            return Err(Error::invalid("weight exceeds layer bit width"));
                        }
                    }
                }
            }
        }
        for (ti, tile) in layer.tiles.iter().enumerate() {
            if tile.block as usize >= layer.blocks.len() {
                return Err(Error::invalid(format!("tile {ti}: block out of range")));
            }
            if tile.lanes.len() != w_eng * h {
                return Err(Error::invalid(format!("tile {ti}: lane count")));
            }
            let mut seen = vec![false; groups];
            for step in &tile.steps {
                if step.groups.len() != n {
                    return Err(Error::invalid(format!("tile {ti}: step width")));
                }
                for grp in step.groups.iter().flatten() {
                    let gi = *grp as usize;
                    if gi >= groups || seen[gi] {
                        return Err(Error::invalid(format!("tile {ti}: bad group {gi}")));
                    }
                    seen[gi] = true;
                }
            }
            if seen.iter().any(|s| !s) {
                return Err(Error::invalid(format!("tile {ti}: receptive field not covered")));
            }
            let c0 = tile.block as usize * m;
            for pos in tile.lanes.iter().flatten() {
                let pos = *pos as usize;
                if pos >= g.out_positions() {
                    return Err(Error::invalid(format!("tile {ti}: position out of bounds")));
                }
                for c in c0..(c0 + m).min(g.out_c) {
                    let idx = c * g.out_positions() + pos;
                    if covered[idx] {
                        return Err(Error::invalid(format!("tile {ti}: output written twice")));
                    }
                    covered[idx] = true;
                }
            }
        }
    } else {
        let mode = layer
            .kind
            .pool_mode()
            .ok_or_else(|| Error::invalid("unknown layer kind"))?;
        if g.in_c != g.out_c || g.pad != (0, 0) {
            return Err(Error::invalid("pooling must preserve channels and use no padding"));
        }
        if mode == PoolMode::Avg && !g.window_len().is_power_of_two() {
            return Err(Error::UnsupportedPoolSize(g.window_len()));
        }
        if !layer.blocks.is_empty() {
            return Err(Error::invalid("pooling layer carries weight streams"));
        }
        let mpe = hw.mpe_per_spe as usize;
        let chunks = layer.pool_chunks(mpe);
        for (ti, tile) in layer.tiles.iter().enumerate() {
            if tile.lanes.len() != n * w_eng * h * mpe {
                return Err(Error::invalid(format!("tile {ti}: lane count")));
            }
            if tile.steps.len() != chunks
                || tile.steps.iter().enumerate().any(|(s, st)| {
                    st.groups.len() != n || st.groups.iter().any(|x| *x != Some(s as u32))
                })
            {
                return Err(Error::invalid(format!("tile {ti}: bad pooling load steps")));
            }
            for out in tile.lanes.iter().flatten() {
                let idx = *out as usize;
                if idx >= outputs || covered[idx] {
                    return Err(Error::invalid(format!("tile {ti}: bad pooling output {idx}")));
                }
                covered[idx] = true;
            }
        }
    }
    if covered.iter().any(|c| !c) {
        return Err(Error::invalid("tile schedule leaves outputs unwritten"));
    }
    Ok(())
}

fn put_u16(w: &mut Vec<u8>, v: u16) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_u32(w: &mut Vec<u8>, v: u32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn put_i32(w: &mut Vec<u8>, v: i32) {
    w.extend_from_slice(&v.to_le_bytes());
}

fn encode_layer(l: &LayerProgram) -> Vec<u8> {
    let mut w = vec![l.kind.code(), l.bits.bits() as u8, l.relu as u8, l.shift as u8];
    put_i32(&mut w, l.weight_scale_exp);
    put_u16(&mut w, l.cores_engaged as u16);
    let g = &l.geom;
    w.push(g.rank);
    for v in [g.in_c, g.in_rows, g.in_cols, g.out_c, g.out_rows, g.out_cols] {
        put_u32(&mut w, v as u32);
    }
    for v in [g.kernel.0, g.kernel.1, g.stride.0, g.stride.1, g.pad.0, g.pad.1] {
        put_u16(&mut w, v as u16);
    }
    put_u16(&mut w, l.blocks.len() as u16);
    put_u16(&mut w, l.blocks.first().map_or(0, |b| b.groups.len()) as u16);
    for block in &l.blocks {
        for grp in &block.groups {
            put_u16(&mut w, grp.len() as u16);
            for s in &grp.streams {
                w.extend(s.iter().map(|e| e.weight as u8));
                w.extend(s.iter().map(WeightEntry::select_byte));
            }
        }
    }
    put_u32(&mut w, l.tiles.len() as u32);
    for t in &l.tiles {
        put_u16(&mut w, t.block as u16);
        put_u16(&mut w, t.lanes.len() as u16);
        for lane in &t.lanes {
            put_i32(&mut w, lane.map_or(-1, |v| v as i32));
        }
        put_u16(&mut w, t.steps.len() as u16);
        for s in &t.steps {
            for g in &s.groups {
                put_i32(&mut w, g.map_or(-1, |v| v as i32));
            }
        }
    }
    w
}

fn decode_layer(r: &mut Reader<'_>, hw: &HwConfig) -> Result<LayerProgram> {
    let code = r.u8()?;
    let kind = LayerKind::from_code(code).ok_or_else(|| r.err(format!("unknown layer kind {code}")))?;
    let bits = BitWidth::try_from(r.u8()? as u32).map_err(|e| r.err(e.to_string()))?;
    let relu = match r.u8()? {
        0 => false,
        1 => true,
        v => return Err(r.err(format!("bad relu flag {v}"))),
    };
    let shift = r.u8()? as u32;
    let weight_scale_exp = r.i32()?;
    let cores_engaged = r.u16()? as u32;
    let rank = r.u8()?;
    let mut dims = [0usize; 6];
    for d in &mut dims {
        *d = r.u32()? as usize;
    }
    let mut k = [0usize; 6];
    for d in &mut k {
        *d = r.u16()? as usize;
    }
    let geom = LayerGeom {
        rank,
        in_c: dims[0],
        in_rows: dims[1],
        in_cols: dims[2],
        out_c: dims[3],
        out_rows: dims[4],
        out_cols: dims[5],
        kernel: (k[0], k[1]),
        stride: (k[2], k[3]),
        pad: (k[4], k[5]),
    };
    let m = hw.m_pes as usize;
    let n_blocks = r.u16()? as usize;
    let n_groups = r.u16()? as usize;
    let mut blocks = Vec::with_capacity(n_blocks);
    for _ in 0..n_blocks {
        let mut groups = Vec::with_capacity(n_groups);
        for _ in 0..n_groups {
            let len = r.u16()? as usize;
            let mut streams = Vec::with_capacity(m);
            for _ in 0..m {
                let weights = r.take(len)?;
                let sel_start = r.pos;
                let sels = r.take(len)?;
                let mut s = Vec::with_capacity(len);
                for (j, (&wb, &sb)) in weights.iter().zip(sels).enumerate() {
                    s.push(
                        WeightEntry::from_bytes(wb, sb)
                            .map_err(|e| r.err_at(sel_start + j, e.to_string()))?,
                    );
                }
                streams.push(s);
            }
            groups.push(GroupStreams { streams });
        }
        blocks.push(ChannelBlock { groups });
    }
    let n_tiles = r.u32()? as usize;
    let n = hw.n_core_elems as usize;
    let mut tiles = Vec::with_capacity(n_tiles.min(1 << 16));
    for _ in 0..n_tiles {
        let block = r.u16()? as u32;
        let n_lanes = r.u16()? as usize;
        let mut lanes = Vec::with_capacity(n_lanes);
        for _ in 0..n_lanes {
            lanes.push(opt_index(r)?);
        }
        let n_steps = r.u16()? as usize;
        let mut steps = Vec::with_capacity(n_steps);
        for _ in 0..n_steps {
            let mut groups = Vec::with_capacity(n);
            for _ in 0..n {
                groups.push(opt_index(r)?);
            }
            steps.push(LoadStep { groups });
        }
        tiles.push(Tile { block, lanes, steps });
    }
    Ok(LayerProgram {
        kind,
        bits,
        relu,
        shift,
        weight_scale_exp,
        cores_engaged,
        geom,
        blocks,
        tiles,
    })
}

fn opt_index(r: &mut Reader<'_>) -> Result<Option<u32>> {
    match r.i32()? {
        -1 => Ok(None),
        v if v >= 0 => Ok(Some(v as u32)),
        v => Err(r.err(format!("bad index {v}"))),
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    base: usize,
}

impl<'a> Reader<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Reader { bytes, pos: 0, base: 0 }
    }

    fn err(&self, msg: impl Into<String>) -> Error {
        self.err_at(self.pos, msg)
    }

    fn err_at(&self, pos: usize, msg: impl Into<String>) -> Error {
        Error::format(format!("byte offset {}", self.base + pos), msg)
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(self.err(format!("unexpected end of data (need {n} bytes)")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
