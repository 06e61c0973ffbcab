#![allow(dead_code)]

use std::path::{Path, PathBuf};

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use sasim::array::HwConfig;
use sasim::compiler::{compile_lowered, lower, ConvKind, ConvLayer, LayerDesc, Lowered, ModelDesc, PoolKind, PoolLayer};
use sasim::golden::run_reference;
use sasim::quant::{dequantize, quantize_shaped, BitWidth, QTensor};
use sasim::signal::{classify, Bandpass, Class, FilterConfig, Recording, RecordingResult, SAMPLE_RATE_HZ};

pub const DEFAULT_SPARSITY: f64 = 0.5;

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn model_paths() -> (PathBuf, PathBuf) {
    let d = crate_dir().join("models");
    (d.join("va_default.json"), d.join("va_default.bin"))
}

pub fn fixture(name: &str) -> PathBuf {
    crate_dir().join("fixtures").join(name)
}

pub fn default_model() -> ModelDesc {
    let (json, bin) = model_paths();
    ModelDesc::from_json_and_blob(&std::fs::read_to_string(json).unwrap(), &std::fs::read(bin).unwrap()).unwrap()
}

/// Same calibration set the CLI uses for a recording model at `seed`.
pub fn default_calibration(seed: u64) -> Vec<Vec<f64>> {
    let bp = Bandpass::design(SAMPLE_RATE_HZ, &FilterConfig::default()).unwrap();
    sasim::signal::synth::labelled_set(seed, 16).iter().map(|(_, r)| bp.apply(&r.to_f64())).collect()
}

pub fn default_lowered(sparsity: f64) -> Lowered {
    lower(&default_model(), &HwConfig::default(), sparsity, &default_calibration(0)).unwrap()
}

/// Frozen per-recording expectations, produced by the reference operators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureExpectation {
    pub sparsity: f64,
    pub results: Vec<RecordingResult>,
    pub verdict: Class,
}

/// Pipeline inference through the reference operators instead of the array.
pub fn golden_infer(rec: &Recording, net: &Lowered) -> RecordingResult {
    let bp = Bandpass::design(SAMPLE_RATE_HZ, &FilterConfig::default()).unwrap();
    let x = bp.apply(&rec.to_f64());
    let q = quantize_shaped(&x, vec![1, 512], BitWidth::B8, net.input_scale_exp).unwrap();
    let out = run_reference(net, &q).unwrap();
    let logits: Vec<i32> = out.data().iter().map(|&v| v as i32).collect();
    RecordingResult {
        class: classify(&logits),
        logits,
    }
}

pub fn sasim_bin() -> &'static Path {
    Path::new(env!("CARGO_BIN_EXE_sasim"))
}

pub fn identity_model(c: usize, len: usize) -> ModelDesc {
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

/// One randomized differential case.
#[derive(Debug, Clone)]
pub struct Case {
    pub label: String,
    pub model: ModelDesc,
    pub sparsity: f64,
    pub input: QTensor,
    pub calib: Vec<Vec<f64>>,
}

fn int_weights<R: Rng>(rng: &mut R, n: usize, bits: BitWidth, e: i32) -> Vec<f64> {
    let s = 2f64.powi(e);
    (0..n)
        .map(|_| {
            if rng.random_range(0..10) == 0 {
                0.0
            } else {
                rng.random_range(bits.min_value()..=bits.max_value()) as f64 * s
            }
        })
        .collect()
}

fn conv<R: Rng>(rng: &mut R, kind: ConvKind, cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> ConvLayer {
    let bits = BitWidth::ALL[rng.random_range(0..4)];
    let e = rng.random_range(-6..=0);
    let kv = if kind == ConvKind::Conv1d { k } else { k * k };
    ConvLayer {
        kind,
        in_channels: cin,
        out_channels: cout,
        kernel: if kind == ConvKind::Conv1d { vec![k] } else { vec![k, k] },
        stride,
        padding: pad,
        bits,
        relu: rng.random(),
        weights: int_weights(rng, cout * cin * kv, bits, e),
        weight_scale_exp: Some(e),
    }
}

fn pool<R: Rng>(rng: &mut R, rank2: bool, rows: usize, cols: usize) -> PoolLayer {
    let limit = if rank2 { rows.min(cols) } else { rows };
    match rng.random_range(0..3) {
        0 => {
            let w = rng.random_range(1..=limit.min(4));
            PoolLayer {
                kind: PoolKind::Max,
                window: w,
                stride: rng.random_range(1..=w),
            }
        }
        1 => {
            let w = if rank2 { 2 } else { [1, 2, 4][rng.random_range(0..3)] }.min(limit);
            let w = if w == 3 { 2 } else { w };
            PoolLayer {
                kind: PoolKind::Avg,
                window: w,
                stride: rng.random_range(1..=w),
            }
        }
        _ => PoolLayer {
            kind: PoolKind::GlobalAvg,
            window: 0,
            stride: 1,
        },
    }
}

/// A single conv or pool layer, or a conv followed by a pool, of a random
/// rank with random widths, sparsity and data. Global average pooling is
/// only drawn when the pooled extent is a power of two.
pub fn random_case(seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rank2 = rng.random_range(0..3) == 0;
    let sparsity = if rng.random() { 0.0 } else { 0.5 };
    let (c, rows, cols) = if rank2 {
        (rng.random_range(1..=3), rng.random_range(3..=9), rng.random_range(3..=9))
    } else {
        (rng.random_range(1..=5), rng.random_range(5..=40), 1)
    };
    let kind = if rank2 { ConvKind::Conv2d } else { ConvKind::Conv1d };
    let mut layers = Vec::new();
    let mut label;
    let shape = rng.random_range(0..4);
    let (mut lr, mut lc) = (rows, cols);
    if shape != 1 {
        let k = rng.random_range(1..=if rank2 { 3 } else { 5 });
        let stride = rng.random_range(1..=2);
        let pad = rng.random_range(0..=k / 2);
        let cout = rng.random_range(1..=20);
        let l = conv(&mut rng, kind, c, cout, k, stride, pad);
        label = format!("{kind:?} {c}->{cout} k{k} s{stride} p{pad} {}b", l.bits.bits());
        lr = (rows + 2 * pad - k) / stride + 1;
        lc = if rank2 { (cols + 2 * pad - k) / stride + 1 } else { 1 };
        layers.push(LayerDesc::Conv(l));
    } else {
        label = String::new();
    }
    if shape == 1 || shape == 3 {
        let mut p = pool(&mut rng, rank2, lr, lc);
        if p.kind == PoolKind::GlobalAvg && !(lr * lc).is_power_of_two() {
            let w = 2.min(if rank2 { lr.min(lc) } else { lr });
            p = PoolLayer {
                kind: PoolKind::Max,
                window: w,
                stride: w,
            };
        }
        label.push_str(&format!(" {:?}{}", p.kind, p.window));
        layers.push(LayerDesc::Pool(p));
    }
    let model = ModelDesc {
        name: "case".into(),
        input_shape: if rank2 { vec![c, rows, cols] } else { vec![c, rows] },
        layers,
    };
    let numel = c * rows * cols;
    let scale = rng.random_range(-4..=0);
    let data: Vec<i8> = (0..numel).map(|_| rng.random()).collect();
    let input = QTensor::new(data, model.input_shape.clone(), BitWidth::B8, scale).unwrap();
    let other: Vec<f64> = (0..numel).map(|_| rng.random_range(-1.0..1.0) * 2f64.powi(scale + 7)).collect();
    let calib = vec![dequantize(&input), other];
    Case {
        label: format!("{label} sparsity {sparsity}"),
        model,
        sparsity,
        input,
        calib,
    }
}

/// Simulator output and reference output for a case.
pub fn run_case(case: &Case) -> (QTensor, QTensor) {
    let hw = HwConfig::default();
    let lowered = lower(&case.model, &hw, case.sparsity, &case.calib)
        .unwrap_or_else(|e| panic!("{}: lower failed: {e}", case.label));
    let prog = compile_lowered(&lowered, &hw).unwrap();
    let (sim, _) = sasim::array::run_program(&prog, &case.input).unwrap();
    let gold = run_reference(&lowered, &case.input).unwrap();
    (sim, gold)
}

/// The mandated small case: 2 input channels, 16 filters, kernel 5, length 32.
pub fn fixed_case(sparsity: f64, bits: BitWidth, seed: u64) -> Case {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = conv(&mut rng, ConvKind::Conv1d, 2, 16, 5, 1, 2);
    l.bits = bits;
    l.weights = int_weights(&mut rng, 16 * 2 * 5, bits, -3);
    l.weight_scale_exp = Some(-3);
    let model = ModelDesc {
        name: "fixed".into(),
        input_shape: vec![2, 32],
        layers: vec![LayerDesc::Conv(l)],
    };
    let data: Vec<i8> = (0..64).map(|_| rng.random()).collect();
    let input = QTensor::new(data, vec![2, 32], BitWidth::B8, -2).unwrap();
    Case {
        label: format!("conv1d 2->16 k5 L32 {}b sparsity {sparsity}", bits.bits()),
        calib: vec![dequantize(&input)],
        model,
        sparsity,
        input,
    }
}
