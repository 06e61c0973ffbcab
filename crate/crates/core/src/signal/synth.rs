//! Seeded synthetic recordings and the default classifier's weights.

use rand::{Rng, RngExt, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::compiler::calibrate::forward_float;
use crate::compiler::{prune_rows, ConvKind, ConvLayer, LayerDesc, ModelDesc, PoolKind, PoolLayer};
use crate::error::Result;
use crate::quant::{covering_scale_exp, BitWidth};
use crate::signal::filter::{Bandpass, FilterConfig};
use crate::signal::pipeline::{Class, Recording, RECORDING_LEN, SAMPLE_RATE_HZ};

use std::f64::consts::PI;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn to_recording(x: &[f64]) -> Recording {
    let samples = x.iter().map(|v| v.round().clamp(i16::MIN as f64, i16::MAX as f64) as i16).collect();
    Recording::new(samples).expect("synthetic recordings have the fixed length")
}

/// Sinus-rhythm-like trace: narrow biphasic complexes at 55-95 bpm over
/// baseline wander.
pub fn normal_like<R: Rng>(rng: &mut R) -> Recording {
    let period = SAMPLE_RATE_HZ * 60.0 / rng.random_range(55.0..95.0);
    let amp = rng.random_range(600.0..1400.0);
    let width = rng.random_range(2.0..4.0);
    let phase = rng.random_range(0.0..period);
    let wander_hz = rng.random_range(0.1..0.5);
    let wander = rng.random_range(50.0..250.0);
    let mut x = vec![0.0; RECORDING_LEN];
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64;
        let beat = (t - phase).rem_euclid(period) - period / 2.0;
        let u = beat / width;
        *v = -amp * u * (-0.5 * u * u).exp()
            + wander * (2.0 * PI * wander_hz * t / SAMPLE_RATE_HZ).sin()
            + rng.random_range(-30.0..30.0);
    }
    to_recording(&x)
}

/// Ventricular-arrhythmia-like trace: broad, fast, amplitude-modulated
/// oscillation at 180-320 bpm with fragmented high-frequency content.
pub fn va_like<R: Rng>(rng: &mut R) -> Recording {
    let f0 = rng.random_range(3.0..5.3);
    let amp = rng.random_range(500.0..1200.0);
    let mod_hz = rng.random_range(0.3..1.0);
    let frag = rng.random_range(0.1..0.3);
    let frag_hz = rng.random_range(20.0..40.0);
    let p0 = rng.random_range(0.0..2.0 * PI);
    let mut x = vec![0.0; RECORDING_LEN];
    for (i, v) in x.iter_mut().enumerate() {
        let t = i as f64 / SAMPLE_RATE_HZ;
        let env = 1.0 + 0.4 * (2.0 * PI * mod_hz * t).sin();
        let base = (2.0 * PI * f0 * t + p0).sin();
        let hf = frag * (2.0 * PI * frag_hz * t).sin() * base.abs();
        *v = amp * env * (base + hf) + rng.random_range(-30.0..30.0);
    }
    to_recording(&x)
}

pub fn recording<R: Rng>(rng: &mut R, class: Class) -> Recording {
    match class {
        Class::Va => va_like(rng),
        Class::NonVa => normal_like(rng),
    }
}

/// Alternating VA-like and normal-like recordings.
pub fn labelled_set(seed: u64, n: usize) -> Vec<(Class, Recording)> {
    let mut r = rng(seed);
    (0..n)
        .map(|i| {
            let c = if i % 2 == 0 { Class::Va } else { Class::NonVa };
            (c, recording(&mut r, c))
        })
        .collect()
}

/// Filtered recordings for calibrating a `1x512` model.
pub fn calibration_set(seed: u64, n: usize) -> Vec<Vec<f64>> {
    let bp = Bandpass::design(SAMPLE_RATE_HZ, &FilterConfig::default()).expect("default band is valid");
    labelled_set(seed, n).iter().map(|(_, r)| bp.apply(&r.to_f64())).collect()
}

/// Calibration inputs for `model`: filtered synthetic recordings when it
/// takes recordings, uniform values otherwise.
pub fn default_calibration(model: &ModelDesc, filter: &Bandpass, seed: u64) -> Vec<Vec<f64>> {
    if model.input_shape == [1, RECORDING_LEN] {
        labelled_set(seed, 16).iter().map(|(_, r)| filter.apply(&r.to_f64())).collect()
    } else {
        uniform_inputs(seed, model.input_shape.iter().product(), 8)
    }
}

/// Uniform inputs in `[-1, 1]` for models that do not take recordings.
pub fn uniform_inputs(seed: u64, numel: usize, n: usize) -> Vec<Vec<f64>> {
    let mut r = rng(seed);
    (0..n).map(|_| (0..numel).map(|_| r.random_range(-1.0..=1.0)).collect()).collect()
}

/// Nonzero signed integers of `bits` width.
pub fn nonzero_weights<R: Rng>(rng: &mut R, n: usize, bits: BitWidth) -> Vec<i8> {
    let (lo, hi) = (bits.min_value(), bits.max_value());
    (0..n)
        .map(|_| loop {
            let v = rng.random_range(lo..=hi);
            if v != 0 {
                break v as i8;
            }
        })
        .collect()
}

/// He-uniform weights rounded to bytes at the covering scale of the bound.
fn he_layer<R: Rng>(rng: &mut R, cin: usize, cout: usize, k: usize) -> ConvLayer {
    let fan_in = cin * k;
    let bound = (6.0 / fan_in as f64).sqrt();
    let e = covering_scale_exp(bound, BitWidth::B8);
    let s = 2f64.powi(e);
    let weights = (0..cout * fan_in)
        .map(|_| {
            let q = (rng.random_range(-bound..bound) / s).round().clamp(-128.0, 127.0);
            let q = if q == 0.0 { if rng.random::<bool>() { 1.0 } else { -1.0 } } else { q };
            q * s
        })
        .collect();
    ConvLayer {
        kind: ConvKind::Conv1d,
        in_channels: cin,
        out_channels: cout,
        kernel: vec![k],
        stride: 2,
        padding: 2,
        bits: BitWidth::B8,
        relu: true,
        weights,
        weight_scale_exp: Some(e),
    }
}

pub const DEFAULT_CHANNELS: [usize; 7] = [1, 8, 16, 16, 32, 32, 32];

/// Six stride-2 feature convolutions, global average pooling and a 1x1
/// two-logit classifier fitted on synthetic data through the feature layers
/// pruned at `fit_sparsity`.
pub fn default_model(seed: u64, fit_sparsity: f64) -> Result<ModelDesc> {
    let mut r = rng(seed);
    let mut layers: Vec<LayerDesc> = DEFAULT_CHANNELS
        .windows(2)
        .map(|w| LayerDesc::Conv(he_layer(&mut r, w[0], w[1], 5)))
        .collect();
    layers.push(LayerDesc::Pool(PoolLayer {
        kind: PoolKind::GlobalAvg,
        window: 0,
        stride: 1,
    }));
    let feat = *DEFAULT_CHANNELS.last().unwrap();
    let mut model = ModelDesc {
        name: "va_default".into(),
        input_shape: vec![1, RECORDING_LEN],
        layers,
    };

    let geoms = model.geometry()?;
    let bp = Bandpass::design(SAMPLE_RATE_HZ, &FilterConfig::default())?;
    let mut pruned = model.clone();
    for layer in &mut pruned.layers {
        if let LayerDesc::Conv(c) = layer {
            let mask = prune_rows(&c.weights, c.in_channels * c.kernel_volume(), fit_sparsity, 16)?;
            for (w, keep) in c.weights.iter_mut().zip(&mask.keep) {
                if !keep {
                    *w = 0.0;
                }
            }
        }
    }
    let data: Vec<(Class, Vec<f64>)> = labelled_set(seed ^ 0x5eed, 96)
        .into_iter()
        .map(|(class, rec)| {
            let mut act = bp.apply(&rec.to_f64());
            for (l, g) in pruned.layers.iter().zip(&geoms) {
                act = forward_float(l, g, &act);
            }
            (class, act)
        })
        .collect();
    let head = fit_head(&data, feat);
    let e = covering_scale_exp(head.iter().fold(0.0f64, |m, w| m.max(w.abs())), BitWidth::B8);
    let s = 2f64.powi(e);
    model.layers.push(LayerDesc::Conv(ConvLayer {
        kind: ConvKind::Conv1d,
        in_channels: feat,
        out_channels: 2,
        kernel: vec![1],
        stride: 1,
        padding: 0,
        bits: BitWidth::B8,
        relu: false,
        weights: head.iter().map(|w| (w / s).round().clamp(-128.0, 127.0) * s).collect(),
        weight_scale_exp: Some(e),
    }));
    model.geometry()?;
    Ok(model)
}

/// Bias-free softmax regression, `[2][feat]` row-major.
fn fit_head(data: &[(Class, Vec<f64>)], feat: usize) -> Vec<f64> {
    let scale = data
        .iter()
        .flat_map(|(_, f)| f.iter())
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(f64::MIN_POSITIVE);
    let mut w = vec![0.0; 2 * feat];
    let lr = 0.5;
    for _ in 0..2000 {
        let mut grad = vec![0.0; 2 * feat];
        for (class, f) in data {
            let z: Vec<f64> = (0..2)
                .map(|k| (0..feat).map(|j| w[k * feat + j] * f[j] / scale).sum())
                .collect();
            let m = z[0].max(z[1]);
            let e = [(z[0] - m).exp(), (z[1] - m).exp()];
            for k in 0..2 {
                let p = e[k] / (e[0] + e[1]);
                let t = if class.index() == k { 1.0 } else { 0.0 };
                for j in 0..feat {
                    grad[k * feat + j] += (p - t) * f[j] / scale;
                }
            }
        }
        for (wi, g) in w.iter_mut().zip(&grad) {
            *wi -= lr * g / data.len() as f64;
        }
    }
    w
}
