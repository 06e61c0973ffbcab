//! Power-of-two scale selection from weights and observed activations.

use crate::array::{LayerGeom, PoolMode};
use crate::compiler::model::{ConvLayer, LayerDesc, ModelDesc};
use crate::error::{Error, Result};
use crate::quant::{covering_scale_exp, BitWidth};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerCalib {
    /// Conv layers only.
    pub weight_scale_exp: Option<i32>,
    /// Scale the layer's output activations are written at.
    pub out_scale_exp: i32,
    pub shift: u32,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Calibration {
    pub input_scale_exp: i32,
    pub layers: Vec<LayerCalib>,
}

/// Activation width at every layer boundary.
pub const ACT_BITS: BitWidth = BitWidth::B8;

/// Weight scale: the declared one when every weight is an exact in-range
/// multiple of it, otherwise the tightest covering power of two.
pub fn weight_scale(conv: &ConvLayer) -> i32 {
    if let Some(e) = conv.weight_scale_exp {
        let inv = 2f64.powi(-e);
        let exact = conv.weights.iter().all(|w| {
            let q = w * inv;
            q.fract() == 0.0 && conv.bits.contains(q as i64)
        });
        if exact && (-31..=31).contains(&e) {
            return e;
        }
    }
    let max = conv.weights.iter().fold(0.0f64, |m, w| m.max(w.abs()));
    covering_scale_exp(max, conv.bits)
}

pub fn calibrate(model: &ModelDesc, calib: &[Vec<f64>]) -> Result<Calibration> {
    if calib.is_empty() {
        return Err(Error::Calib("empty calibration set".into()));
    }
    let geoms = model.geometry()?;
    let numel: usize = model.input_shape.iter().product();
    if let Some(bad) = calib.iter().position(|x| x.len() != numel) {
        return Err(Error::Calib(format!(
            "calibration input {bad} has {} values, expected {numel}",
            calib[bad].len()
        )));
    }
    let mut maxima = vec![0.0f64; model.layers.len()];
    let mut in_max = 0.0f64;
    for x in calib {
        if x.iter().any(|v| !v.is_finite()) {
            return Err(Error::Calib("non-finite calibration value".into()));
        }
        in_max = x.iter().fold(in_max, |m, v| m.max(v.abs()));
        let mut act = x.clone();
        for (i, (layer, geom)) in model.layers.iter().zip(&geoms).enumerate() {
            act = forward_float(layer, geom, &act);
            maxima[i] = act.iter().fold(maxima[i], |m, v| m.max(v.abs()));
        }
    }

    let input_scale_exp = covering_scale_exp(in_max, ACT_BITS);
    let mut scale = input_scale_exp;
    let mut layers = Vec::with_capacity(model.layers.len());
    for (i, layer) in model.layers.iter().enumerate() {
        match layer {
            LayerDesc::Conv(conv) => {
                let w = weight_scale(conv);
                let acc_scale = scale + w;
                let want = covering_scale_exp(maxima[i], ACT_BITS);
                let shift = (want - acc_scale).clamp(0, 31);
                let out = acc_scale + shift;
                layers.push(LayerCalib {
                    weight_scale_exp: Some(w),
                    out_scale_exp: out,
                    shift: shift as u32,
                });
                scale = out;
            }
            LayerDesc::Pool(_) => layers.push(LayerCalib {
                weight_scale_exp: None,
                out_scale_exp: scale,
                shift: 0,
            }),
        }
    }
    Ok(Calibration {
        input_scale_exp,
        layers,
    })
}

/// Real-valued forward pass of one layer on a `[c][rows][cols]` buffer.
pub fn forward_float(layer: &LayerDesc, g: &LayerGeom, input: &[f64]) -> Vec<f64> {
    let positions = g.out_positions();
    let mut out = vec![0.0; g.out_c * positions];
    match layer {
        LayerDesc::Conv(conv) => {
            let field = g.field_len();
            for c in 0..g.out_c {
                let row = &conv.weights[c * field..(c + 1) * field];
                for pos in 0..positions {
                    let mut acc = 0.0;
                    for (f, w) in row.iter().enumerate() {
                        if let Some(src) = g.field_source(pos, f) {
                            acc += w * input[src];
                        }
                    }
                    if conv.relu {
                        acc = acc.max(0.0);
                    }
                    out[c * positions + pos] = acc;
                }
            }
        }
        LayerDesc::Pool(pool) => {
            let n = g.window_len() as f64;
            for c in 0..g.out_c {
                for pos in 0..positions {
                    let (orow, ocol) = (pos / g.out_cols, pos % g.out_cols);
                    let vals = (0..g.kernel.0).flat_map(|ky| {
                        (0..g.kernel.1).map(move |kx| {
                            let r = orow * g.stride.0 + ky;
                            let q = ocol * g.stride.1 + kx;
                            input[(c * g.in_rows + r) * g.in_cols + q]
                        })
                    });
                    out[c * positions + pos] = match pool.mode() {
                        PoolMode::Max => vals.fold(f64::NEG_INFINITY, f64::max),
                        PoolMode::Avg => vals.sum::<f64>() / n,
                    };
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::compiler::model::ConvKind;

    fn conv(weights: Vec<f64>, bits: BitWidth, declared: Option<i32>) -> ConvLayer {
        ConvLayer {
            kind: ConvKind::Conv1d,
            in_channels: 1,
            out_channels: weights.len(),
            kernel: vec![1],
            stride: 1,
            padding: 0,
            bits,
            relu: false,
            weights,
            weight_scale_exp: declared,
        }
    }

    fn model(c: ConvLayer) -> ModelDesc {
        ModelDesc {
            name: "t".into(),
            input_shape: vec![1, 4],
            layers: vec![LayerDesc::Conv(c)],
        }
    }

    #[test]
    fn weight_scale_examples() {
        assert_eq!(weight_scale(&conv(vec![1.0, -0.5], BitWidth::B8, None)), -7);
        assert_eq!(weight_scale(&conv(vec![0.3, -0.1], BitWidth::B8, None)), -8);
        // declared scale is honoured when exact
        assert_eq!(weight_scale(&conv(vec![1.0, -2.0], BitWidth::B8, Some(0))), 0);
        // ... and recalibrated when it no longer fits the width
        assert_eq!(weight_scale(&conv(vec![3.0, -2.0], BitWidth::B2, Some(0))), 1);
    }

    #[test]
    fn brute_force_weight_scale() {
        for max in [0.3, 0.7, 1.5, 0.01] {
            let e = weight_scale(&conv(vec![max], BitWidth::B8, None));
            let brute = (-31..=31).find(|&e| 2f64.powi(e + 7) >= max).unwrap();
            assert_eq!(e, brute);
        }
    }

    #[test]
    fn zero_activations_default_scale() {
        let cal = calibrate(&model(conv(vec![1.0], BitWidth::B8, Some(0))), &[vec![0.0; 4]]).unwrap();
        assert_eq!(cal.input_scale_exp, 0);
        assert_eq!(cal.layers[0].shift, 0);
    }

    #[test]
    fn shift_reenters_activation_scale() {
        // input max 1.0 -> -7; weight 0.5 -> -8; output max 0.5 -> -8
        let m = model(conv(vec![0.5], BitWidth::B8, None));
        let cal = calibrate(&m, &[vec![1.0, 0.5, -0.25, 0.0]]).unwrap();
        assert_eq!(cal.input_scale_exp, -7);
        assert_eq!(cal.layers[0].weight_scale_exp, Some(-8));
        assert_eq!(cal.layers[0].out_scale_exp, -8);
        assert_eq!(cal.layers[0].shift, 7);
    }

    #[test]
    fn empty_calibration_set() {
        let m = model(conv(vec![1.0], BitWidth::B8, None));
        assert!(matches!(calibrate(&m, &[]), Err(Error::Calib(_))));
        assert!(matches!(calibrate(&m, &[vec![0.0; 3]]), Err(Error::Calib(_))));
    }
}
