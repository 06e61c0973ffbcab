//! Network description and its on-disk form: a JSON document plus a raw
//! blob of little-endian signed weight bytes referenced per layer.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::array::{LayerGeom, PoolMode};
use crate::error::{Error, Result};
use crate::quant::BitWidth;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ConvKind {
    Conv1d,
    Conv2d,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    pub kind: ConvKind,
    pub in_channels: usize,
    pub out_channels: usize,
    /// `[k]` for 1-D, `[kh, kw]` for 2-D.
    pub kernel: Vec<usize>,
    pub stride: usize,
    pub padding: usize,
    pub bits: BitWidth,
    pub relu: bool,
    /// Real weights in `[out][in][ky][kx]` order.
    pub weights: Vec<f64>,
    /// When set, the weights are exact multiples of `2^weight_scale_exp`
    /// and are used at that scale if they fit `bits`.
    pub weight_scale_exp: Option<i32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PoolKind {
    Max,
    Avg,
    GlobalAvg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PoolLayer {
    pub kind: PoolKind,
    pub window: usize,
    pub stride: usize,
}

impl PoolLayer {
    pub fn mode(&self) -> PoolMode {
        match self.kind {
            PoolKind::Max => PoolMode::Max,
            PoolKind::Avg | PoolKind::GlobalAvg => PoolMode::Avg,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerDesc {
    Conv(ConvLayer),
    Pool(PoolLayer),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelDesc {
    pub name: String,
    /// `[C, L]` or `[C, H, W]`.
    pub input_shape: Vec<usize>,
    pub layers: Vec<LayerDesc>,
}

impl ConvLayer {
    fn kernel_hw(&self) -> (usize, usize) {
        match (self.kind, self.kernel.as_slice()) {
            (ConvKind::Conv1d, [k]) => (*k, 1),
            (ConvKind::Conv2d, [kh, kw]) => (*kh, *kw),
            (ConvKind::Conv2d, [k]) => (*k, *k),
            _ => (0, 0),
        }
    }

    pub fn kernel_volume(&self) -> usize {
        let (kh, kw) = self.kernel_hw();
        kh * kw
    }

    pub fn expected_weights(&self) -> usize {
        self.out_channels * self.in_channels * self.kernel_volume()
    }
}

impl ModelDesc {
    pub fn rank(&self) -> Result<u8> {
        match self.input_shape.len() {
            2 => Ok(1),
            3 => Ok(2),
            _ => Err(Error::shape(format!("unsupported input shape {:?}", self.input_shape))),
        }
    }

    /// Per-layer geometry; fails when consecutive shapes do not compose.
    pub fn geometry(&self) -> Result<Vec<LayerGeom>> {
        let rank = self.rank()?;
        if self.input_shape.contains(&0) {
            return Err(Error::shape("input dimensions must be positive"));
        }
        let (mut c, mut rows, mut cols) = if rank == 1 {
            (self.input_shape[0], self.input_shape[1], 1)
        } else {
            (self.input_shape[0], self.input_shape[1], self.input_shape[2])
        };
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            let bad = |msg: String| Error::Model { layer: i, msg };
            let mut geom = LayerGeom {
                rank,
                in_c: c,
                in_rows: rows,
                in_cols: cols,
                out_c: c,
                out_rows: 0,
                out_cols: 0,
                kernel: (1, 1),
                stride: (1, 1),
                pad: (0, 0),
            };
            match layer {
                LayerDesc::Conv(conv) => {
                    let want_rank = match conv.kind {
                        ConvKind::Conv1d => 1,
                        ConvKind::Conv2d => 2,
                    };
                    if want_rank != rank {
                        return Err(bad(format!("{:?} layer on a rank-{rank} input", conv.kind)));
                    }
                    if conv.in_channels != c {
                        return Err(bad(format!(
                            "in_channels {} does not match incoming {c}",
                            conv.in_channels
                        )));
                    }
                    if conv.out_channels == 0 || conv.stride == 0 {
                        return Err(bad("out_channels and stride must be positive".into()));
                    }
                    let (kh, kw) = conv.kernel_hw();
                    if kh == 0 || kw == 0 {
                        return Err(bad(format!("bad kernel {:?}", conv.kernel)));
                    }
                    if conv.weights.len() != conv.expected_weights() {
                        return Err(bad(format!(
                            "weight tensor has {} values, expected {}",
                            conv.weights.len(),
                            conv.expected_weights()
                        )));
                    }
                    if let Some(j) = conv.weights.iter().position(|w| !w.is_finite()) {
                        return Err(bad(format!("non-finite weight at index {j}")));
                    }
                    geom.out_c = conv.out_channels;
                    geom.kernel = (kh, kw);
                    geom.stride = (conv.stride, if rank == 1 { 1 } else { conv.stride });
                    geom.pad = (conv.padding, if rank == 1 { 0 } else { conv.padding });
                }
                LayerDesc::Pool(pool) => match pool.kind {
                    PoolKind::GlobalAvg => {
                        geom.kernel = (rows, cols);
                    }
                    _ => {
                        if pool.window == 0 || pool.stride == 0 {
                            return Err(bad("pool window and stride must be positive".into()));
                        }
                        geom.kernel = (pool.window, if rank == 1 { 1 } else { pool.window });
                        geom.stride = (pool.stride, if rank == 1 { 1 } else { pool.stride });
                    }
                },
            }
            let (r, q) = geom.expected_out().ok_or_else(|| {
                Error::Shape(format!(
                    "layer {i}: window {:?} larger than padded input {rows}x{cols}",
                    geom.kernel
                ))
            })?;
            geom.out_rows = r;
            geom.out_cols = q;
            if let LayerDesc::Pool(pool) = layer {
                if pool.mode() == PoolMode::Avg && !geom.window_len().is_power_of_two() {
                    return Err(Error::UnsupportedLayer {
                        layer: i,
                        kind: format!(
                            "average pooling over {} elements (must be a power of two)",
                            geom.window_len()
                        ),
                    });
                }
            }
            c = geom.out_c;
            rows = r;
            cols = q;
            out.push(geom);
        }
        Ok(out)
    }

    /// Applies a per-layer weight width override (layer index → bits).
    pub fn override_bits(&mut self, bits: &BTreeMap<usize, BitWidth>) -> Result<()> {
        for (&idx, &b) in bits {
            match self.layers.get_mut(idx) {
                Some(LayerDesc::Conv(conv)) => conv.bits = b,
                Some(LayerDesc::Pool(_)) => {
                    return Err(Error::Model {
                        layer: idx,
                        msg: "bit width override targets a pooling layer".into(),
                    })
                }
                None => {
                    return Err(Error::Model {
                        layer: idx,
                        msg: "bit width override targets a missing layer".into(),
                    })
                }
            }
        }
        Ok(())
    }

    pub fn override_all_bits(&mut self, b: BitWidth) {
        for layer in &mut self.layers {
            if let LayerDesc::Conv(conv) = layer {
                conv.bits = b;
            }
        }
    }

    pub fn from_json_and_blob(json: &str, blob: &[u8]) -> Result<ModelDesc> {
        let file: ModelFile = serde_json::from_str(json).map_err(|e| {
            Error::format(format!("line {} column {}", e.line(), e.column()), e.to_string())
        })?;
        let mut layers = Vec::with_capacity(file.layers.len());
        for (i, l) in file.layers.into_iter().enumerate() {
            let need = |v: Option<usize>, what: &str| {
                v.ok_or_else(|| Error::Model {
                    layer: i,
                    msg: format!("missing field `{what}`"),
                })
            };
            let layer = match l.kind.as_str() {
                "conv1d" | "conv2d" => {
                    let kind = if l.kind == "conv1d" {
                        ConvKind::Conv1d
                    } else {
                        ConvKind::Conv2d
                    };
                    let offset = need(l.offset, "offset")?;
                    let length = need(l.length, "length")?;
                    let scale = l.weight_scale_exp.ok_or_else(|| Error::Model {
                        layer: i,
                        msg: "missing field `weight_scale_exp`".into(),
                    })?;
                    let bytes = offset
                        .checked_add(length)
                        .and_then(|end| blob.get(offset..end))
                        .ok_or_else(|| Error::Model {
                            layer: i,
                            msg: format!(
                                "weights [{offset}, +{length}) outside blob of {} bytes",
                                blob.len()
                            ),
                        })?;
                    let s = 2f64.powi(scale);
                    LayerDesc::Conv(ConvLayer {
                        kind,
                        in_channels: need(l.in_channels, "in_channels")?,
                        out_channels: need(l.out_channels, "out_channels")?,
                        kernel: l.kernel.ok_or_else(|| Error::Model {
                            layer: i,
                            msg: "missing field `kernel`".into(),
                        })?,
                        stride: l.stride.unwrap_or(1),
                        padding: l.padding.unwrap_or(0),
                        bits: match l.bits {
                            Some(b) => BitWidth::try_from(b).map_err(|e| Error::Model {
                                layer: i,
                                msg: e.to_string(),
                            })?,
                            None => BitWidth::B8,
                        },
                        relu: l.relu.unwrap_or(true),
                        weights: bytes.iter().map(|&b| b as i8 as f64 * s).collect(),
                        weight_scale_exp: Some(scale),
                    })
                }
                "maxpool" | "avgpool" => LayerDesc::Pool(PoolLayer {
                    kind: if l.kind == "maxpool" { PoolKind::Max } else { PoolKind::Avg },
                    window: need(l.window, "window")?,
                    stride: l.stride.or(l.window).unwrap_or(1),
                }),
                "global_avg" => LayerDesc::Pool(PoolLayer {
                    kind: PoolKind::GlobalAvg,
                    window: 0,
                    stride: 1,
                }),
                other => {
                    return Err(Error::UnsupportedLayer {
                        layer: i,
                        kind: other.to_string(),
                    })
                }
            };
            layers.push(layer);
        }
        let model = ModelDesc {
            name: file.name,
            input_shape: file.input_shape,
            layers,
        };
        model.geometry()?;
        Ok(model)
    }

    /// Serializes to the JSON + blob pair. Conv weights must be exact
    /// multiples of their declared scale and fit a signed byte.
    pub fn to_json_and_blob(&self) -> Result<(String, Vec<u8>)> {
        let mut blob = Vec::new();
        let mut layers = Vec::with_capacity(self.layers.len());
        for (i, layer) in self.layers.iter().enumerate() {
            layers.push(match layer {
                LayerDesc::Conv(conv) => {
                    let scale = conv.weight_scale_exp.ok_or_else(|| Error::Model {
                        layer: i,
                        msg: "weights need a declared scale to be stored as bytes".into(),
                    })?;
                    let offset = blob.len();
                    let inv = 2f64.powi(-scale);
                    for (j, w) in conv.weights.iter().enumerate() {
                        let q = w * inv;
                        if q.fract() != 0.0 || !(-128.0..=127.0).contains(&q) {
                            return Err(Error::Model {
                                layer: i,
                                msg: format!("weight {j} ({w}) is not a byte at scale 2^{scale}"),
                            });
                        }
                        blob.push(q as i8 as u8);
                    }
                    LayerFile {
                        kind: match conv.kind {
                            ConvKind::Conv1d => "conv1d",
                            ConvKind::Conv2d => "conv2d",
                        }
                        .into(),
                        in_channels: Some(conv.in_channels),
                        out_channels: Some(conv.out_channels),
                        kernel: Some(conv.kernel.clone()),
                        stride: Some(conv.stride),
                        padding: Some(conv.padding),
                        bits: Some(conv.bits.bits()),
                        relu: Some(conv.relu),
                        weight_scale_exp: Some(scale),
                        offset: Some(offset),
                        length: Some(conv.weights.len()),
                        window: None,
                    }
                }
                LayerDesc::Pool(pool) => LayerFile {
                    kind: match pool.kind {
                        PoolKind::Max => "maxpool",
                        PoolKind::Avg => "avgpool",
                        PoolKind::GlobalAvg => "global_avg",
                    }
                    .into(),
                    window: (pool.kind != PoolKind::GlobalAvg).then_some(pool.window),
                    stride: (pool.kind != PoolKind::GlobalAvg).then_some(pool.stride),
                    ..LayerFile::default()
                },
            });
        }
        let file = ModelFile {
            name: self.name.clone(),
            input_shape: self.input_shape.clone(),
            layers,
        };
        let json = serde_json::to_string_pretty(&file).expect("model serializes");
        Ok((json, blob))
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModelFile {
    #[serde(default)]
    name: String,
    input_shape: Vec<usize>,
    layers: Vec<LayerFile>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LayerFile {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    in_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    out_channels: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    kernel: Option<Vec<usize>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    bits: Option<u32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    relu: Option<bool>,
    #[serde(skip_serializing_if = "Option::is_none")]
    weight_scale_exp: Option<i32>,
    #[serde(skip_serializing_if = "Option::is_none")]
    offset: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    length: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    window: Option<usize>,
}
