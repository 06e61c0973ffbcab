//! Co-design compiler: balanced pruning, calibration, quantization, weight
//! packing and tiling onto the array.

pub mod calibrate;
pub mod model;
pub mod pack;
pub mod prune;

pub use calibrate::{calibrate, Calibration, LayerCalib};
pub use model::{ConvKind, ConvLayer, LayerDesc, ModelDesc, PoolKind, PoolLayer};
pub use pack::pack_weights;
pub use prune::{keep_count, prune_balanced, prune_rows, PruneMask};

use crate::array::{
    HwConfig, LayerGeom, LayerKind, LayerProgram, LoadStep, Program, Tile, REGS_PER_SPE,
};
use crate::error::{Error, Result};
use crate::quant::{quantize_shaped, BitWidth, QTensor};

/// A layer after pruning and quantization, before packing. This is what
/// the golden reference consumes.
#[derive(Debug, Clone, PartialEq)]
pub struct LoweredLayer {
    pub kind: LayerKind,
    pub geom: LayerGeom,
    pub bits: BitWidth,
    pub relu: bool,
    pub shift: u32,
    pub weight_scale_exp: i32,
    /// Pruned quantized weights, `[out, in, k]` or `[out, in, kh, kw]`.
    pub weights: Option<QTensor>,
    /// Balanced mask as produced by pruning.
    pub prune_mask: Option<PruneMask>,
    /// Prune mask with quantized zeros removed; drives packing.
    pub mask: Option<PruneMask>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lowered {
    pub input_shape: Vec<usize>,
    pub input_scale_exp: i32,
    pub layers: Vec<LoweredLayer>,
}

pub fn lower(model: &ModelDesc, hw: &HwConfig, sparsity: f64, calib: &[Vec<f64>]) -> Result<Lowered> {
    hw.validate()?;
    if !(0.0..1.0).contains(&sparsity) {
        return Err(Error::Calib(format!("sparsity {sparsity} outside [0, 1)")));
    }
    let geoms = model.geometry()?;

    let mut pruned = model.clone();
    let mut masks = Vec::with_capacity(model.layers.len());
    for layer in pruned.layers.iter_mut() {
        match layer {
            LayerDesc::Conv(conv) => {
                let field = conv.in_channels * conv.kernel_volume();
                let mask = prune_rows(&conv.weights, field, sparsity, REGS_PER_SPE)?;
                for (w, &k) in conv.weights.iter_mut().zip(&mask.keep) {
                    if !k {
                        *w = 0.0;
                    }
                }
                masks.push(Some(mask));
            }
            LayerDesc::Pool(_) => masks.push(None),
        }
    }
    let cal = calibrate(&pruned, calib)?;

    let mut layers = Vec::with_capacity(pruned.layers.len());
    for (i, ((layer, geom), (lc, prune_mask))) in pruned
        .layers
        .iter()
        .zip(&geoms)
        .zip(cal.layers.iter().zip(masks))
        .enumerate()
    {
        check_encodable(i, geom)?;
        match layer {
            LayerDesc::Conv(conv) => {
                let w_scale = lc.weight_scale_exp.expect("conv calibration");
                let worst = geom.field_len() as u64 * 128 * (1u64 << (conv.bits.bits() - 1));
                if worst > i32::MAX as u64 {
                    return Err(Error::Sizing {
                        layer: i,
                        msg: format!(
                            "receptive field of {} at {} bits can overflow the 32-bit accumulator",
                            geom.field_len(),
                            conv.bits
                        ),
                    });
                }
                let mut shape = vec![conv.out_channels, conv.in_channels, geom.kernel.0];
                if conv.kind == ConvKind::Conv2d {
                    shape.push(geom.kernel.1);
                }
                let q = quantize_shaped(&conv.weights, shape, conv.bits, w_scale).map_err(|e| {
                    Error::Model {
                        layer: i,
                        msg: e.to_string(),
                    }
                })?;
                let prune_mask = prune_mask.expect("conv mask");
                let mut mask = prune_mask.clone();
                for (k, &v) in mask.keep.iter_mut().zip(q.data()) {
                    *k &= v != 0;
                }
                layers.push(LoweredLayer {
                    kind: match conv.kind {
                        ConvKind::Conv1d => LayerKind::Conv1d,
                        ConvKind::Conv2d => LayerKind::Conv2d,
                    },
                    geom: *geom,
                    bits: conv.bits,
                    relu: conv.relu,
                    shift: lc.shift,
                    weight_scale_exp: w_scale,
                    weights: Some(q),
                    prune_mask: Some(prune_mask),
                    mask: Some(mask),
                });
            }
            LayerDesc::Pool(pool) => layers.push(LoweredLayer {
                kind: match pool.kind {
                    PoolKind::Max => LayerKind::MaxPool,
                    PoolKind::Avg => LayerKind::AvgPool,
                    PoolKind::GlobalAvg => LayerKind::GlobalAvg,
                },
                geom: *geom,
                bits: BitWidth::B8,
                relu: false,
                shift: 0,
                weight_scale_exp: 0,
                weights: None,
                prune_mask: None,
                mask: None,
            }),
        }
    }
    Ok(Lowered {
        input_shape: model.input_shape.clone(),
        input_scale_exp: cal.input_scale_exp,
        layers,
    })
}

fn check_encodable(layer: usize, g: &LayerGeom) -> Result<()> {
    let big = |what: &str| Error::Sizing {
        layer,
        msg: format!("{what} exceeds the program container limits"),
    };
    let dims = [g.in_c, g.in_rows, g.in_cols, g.out_c, g.out_rows, g.out_cols];
    if dims.iter().any(|&d| d > i32::MAX as usize) || g.out_c * g.out_positions() > i32::MAX as usize {
        return Err(big("feature map size"));
    }
    let k = [g.kernel.0, g.kernel.1, g.stride.0, g.stride.1, g.pad.0, g.pad.1];
    if k.iter().any(|&d| d > u16::MAX as usize) {
        return Err(big("kernel, stride or padding"));
    }
    if g.group_count() > u16::MAX as usize {
        return Err(big("receptive field"));
    }
    Ok(())
}

/// Packs and tiles a lowered network for `hw`.
pub fn compile_lowered(lowered: &Lowered, hw: &HwConfig) -> Result<Program> {
    hw.validate()?;
    let mut layers = Vec::with_capacity(lowered.layers.len());
    for (i, l) in lowered.layers.iter().enumerate() {
        let cores_engaged = match (l.kind, l.geom.rank) {
            (LayerKind::Conv1d, _) | (_, 1) => 1,
            _ => hw.w_cores,
        };
        let blocks = match (&l.weights, &l.mask) {
            (Some(q), Some(mask)) => {
                let flat = QTensor::new(
                    q.data().to_vec(),
                    vec![l.geom.out_c, l.geom.field_len()],
                    q.bits(),
                    q.scale_exp(),
                )?;
                pack_weights(&flat, mask, hw)?
            }
            _ => Vec::new(),
        };
        if blocks.len() > u16::MAX as usize {
            return Err(Error::Sizing {
                layer: i,
                msg: "too many output channel blocks".into(),
            });
        }
        let tiles = if l.kind.is_conv() {
            conv_tiles(&l.geom, hw, cores_engaged)
        } else {
            let chunks = (hw.mpe_per_spe as usize * l.geom.window_len()).div_ceil(REGS_PER_SPE);
            if chunks > u16::MAX as usize {
                return Err(Error::Sizing {
                    layer: i,
                    msg: "pooling window too large".into(),
                });
            }
            pool_tiles(&l.geom, hw, cores_engaged, chunks)
        };
        layers.push(LayerProgram {
            kind: l.kind,
            bits: l.bits,
            relu: l.relu,
            shift: l.shift,
            weight_scale_exp: l.weight_scale_exp,
            cores_engaged,
            geom: l.geom,
            blocks,
            tiles,
        });
    }
    let prog = Program {
        hw: *hw,
        input_shape: lowered.input_shape.clone(),
        input_scale_exp: lowered.input_scale_exp,
        layers,
    };
    prog.validate()?;
    Ok(prog)
}

pub fn compile(model: &ModelDesc, hw: &HwConfig, sparsity: f64, calib: &[Vec<f64>]) -> Result<Program> {
    compile_lowered(&lower(model, hw, sparsity, calib)?, hw)
}

/// Conv tiles cover `m_pes` output channels × `H` rows × `cores` columns.
/// Receptive-field windows are dealt round-robin to the core elements.
fn conv_tiles(g: &LayerGeom, hw: &HwConfig, cores: u32) -> Vec<Tile> {
    let m = hw.m_pes as usize;
    let h = hw.h_spes as usize;
    let w = cores as usize;
    let n = hw.n_core_elems as usize;
    let groups = g.group_count();
    let steps: Vec<LoadStep> = (0..groups.div_ceil(n))
        .map(|s| LoadStep {
            groups: (0..n)
                .map(|core| {
                    let gi = s * n + core;
                    (gi < groups).then_some(gi as u32)
                })
                .collect(),
        })
        .collect();
    let mut tiles = Vec::new();
    for block in 0..g.out_c.div_ceil(m) {
        for tr in 0..g.out_rows.div_ceil(h) {
            for tc in 0..g.out_cols.div_ceil(w) {
                let mut lanes = Vec::with_capacity(w * h);
                for wi in 0..w {
                    for hi in 0..h {
                        let (r, c) = (tr * h + hi, tc * w + wi);
                        lanes.push((r < g.out_rows && c < g.out_cols).then(|| (r * g.out_cols + c) as u32));
                    }
                }
                tiles.push(Tile {
                    block: block as u32,
                    lanes,
                    steps: steps.clone(),
                });
            }
        }
    }
    tiles
}

/// Pool tiles hand one output element to each engaged MPE.
fn pool_tiles(g: &LayerGeom, hw: &HwConfig, cores: u32, chunks: usize) -> Vec<Tile> {
    let n = hw.n_core_elems as usize;
    let units = n * cores as usize * hw.h_spes as usize * hw.mpe_per_spe as usize;
    let outputs = g.out_c * g.out_positions();
    let steps: Vec<LoadStep> = (0..chunks)
        .map(|s| LoadStep {
            groups: vec![Some(s as u32); n],
        })
        .collect();
    (0..outputs.div_ceil(units))
        .map(|t| Tile {
            block: 0,
            lanes: (0..units)
                .map(|u| {
                    let idx = t * units + u;
                    (idx < outputs).then_some(idx as u32)
                })
                .collect(),
            steps: steps.clone(),
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::array::run_program;

    fn identity_model(c: usize, len: usize) -> ModelDesc {
        let mut weights = vec![0.0; c * c];
        for i in 0..c {
            weights[i * c + i] = 1.0;
        }
        ModelDesc {
            name: "identity".into(),
            input_shape: vec![c, len],
            layers: vec![LayerDesc::Conv(ConvLayer {
                kind: ConvKind::Conv1d,
                in_channels: c,
                out_channels: c,
                kernel: vec![1],
                stride: 1,
                padding: 0,
                bits: BitWidth::B8,
                relu: false,
                weights,
                weight_scale_exp: Some(0),
            })],
        }
    }

    #[test]
    fn identity_program_reproduces_input() {
        let model = identity_model(3, 4);
        let calib = vec![vec![100.0, -100.0, 5.0, 7.0, 1.0, 2.0, 3.0, 4.0, -5.0, -6.0, -7.0, -8.0]];
        let prog = compile(&model, &HwConfig::default(), 0.5, &calib).unwrap();
        assert_eq!(prog.layers[0].tiles.len(), 1);
        assert_eq!(prog.layers[0].shift, 0);
        let input = QTensor::new(
            vec![1, -2, 3, -4, 5, 6, 7, 8, -128, 127, 0, 9],
            vec![3, 4],
            BitWidth::B8,
            -3,
        )
        .unwrap();
        let (out, trace) = run_program(&prog, &input).unwrap();
        assert_eq!(out, input);
        assert_eq!(trace.len(), 1);
        assert_eq!(trace[0].mac_cycles, 1);
    }

    #[test]
    fn dense_program_has_full_groups() {
        let model = identity_model(2, 8);
        let prog = compile(&model, &HwConfig::default(), 0.0, &[vec![1.0; 16]]).unwrap();
        assert_eq!(prog.layers[0].tiles.len(), 2);
        assert_eq!(prog.layers[0].tiles[1].lanes, vec![Some(4), Some(5), Some(6), Some(7)]);
    }

    #[test]
    fn sizing_error_on_huge_field() {
        let c = 1;
        let k = 1 << 17;
        let model = ModelDesc {
            name: "big".into(),
            input_shape: vec![c, k],
            layers: vec![LayerDesc::Conv(ConvLayer {
                kind: ConvKind::Conv1d,
                in_channels: c,
                out_channels: 1,
                kernel: vec![k],
                stride: 1,
                padding: 0,
                bits: BitWidth::B8,
                relu: false,
                weights: vec![0.5; k],
                weight_scale_exp: None,
            })],
        };
        let err = compile(&model, &HwConfig::default(), 0.5, &[vec![0.0; k]]).unwrap_err();
        assert!(matches!(err, Error::Sizing { layer: 0, .. }), "{err}");
    }

    #[test]
    fn program_bytes_round_trip() {
        let model = identity_model(3, 9);
        let prog = compile(&model, &HwConfig::default(), 0.5, &[vec![1.0; 27]]).unwrap();
        let bytes = prog.to_bytes();
        assert_eq!(&bytes[..4], b"SASM");
        assert_eq!(Program::from_bytes(&bytes).unwrap(), prog);
        // truncation is a format error, not a panic
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(Program::from_bytes(&bytes[..cut]).is_err());
        }
    }
}
