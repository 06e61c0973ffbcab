//! Naive fixed-point reference operators.
//!
//! These share nothing with the array datapath (no multiplier model, no
//! stream packing, no tiling): plain nested loops over dense pruned weights
//! with native multiplication and 32-bit checked accumulation in ascending
//! (channel, ky, kx) order.

use crate::array::{LayerKind, PoolMode};
use crate::compiler::Lowered;
use crate::error::{Error, Result};
use crate::quant::{requantize, Accumulator, BitWidth, QTensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    /// `(k, 1)` for 1-D.
    pub kernel: (usize, usize),
    pub stride: usize,
    pub padding: usize,
    pub bits: BitWidth,
    pub shift: u32,
    pub relu: bool,
}

fn out_dim(n: usize, k: usize, s: usize, p: usize) -> Result<usize> {
    if s == 0 {
        return Err(Error::shape("stride must be at least 1"));
    }
    let padded = n + 2 * p;
    if k == 0 || padded < k {
        return Err(Error::shape(format!("kernel {k} larger than padded input {padded}")));
    }
    Ok((padded - k) / s + 1)
}

/// Pre-requantization accumulators of a 1-D convolution, `[out][pos]`.
pub fn conv1d_acc(input: &QTensor, weights: &QTensor, spec: &ConvSpec) -> Result<Vec<i32>> {
    let [cin, len] = *input.shape() else {
        return Err(Error::shape(format!("conv1d input must be [C, L], got {:?}", input.shape())));
    };
    let k = spec.kernel.0;
    if cin != spec.in_channels || weights.shape() != [spec.out_channels, cin, k] || spec.kernel.1 != 1 {
        return Err(Error::shape("conv1d weights/spec do not match input"));
    }
    let out_len = out_dim(len, k, spec.stride, spec.padding)?;
    let x = input.data();
    let w = weights.data();
    let mut acc = vec![0i32; spec.out_channels * out_len];
    for o in 0..spec.out_channels {
        for p in 0..out_len {
            let mut sum: i32 = 0;
            for c in 0..cin {
                for t in 0..k {
                    let i = (p * spec.stride + t) as isize - spec.padding as isize;
                    if i < 0 || i as usize >= len {
                        continue;
                    }
                    let prod = x[c * len + i as usize] as i32 * w[(o * cin + c) * k + t] as i32;
                    sum = sum.checked_add(prod).ok_or(Error::AccOverflow)?;
                }
            }
            acc[o * out_len + p] = sum;
        }
    }
    Ok(acc)
}

pub fn conv1d_ref(input: &QTensor, weights: &QTensor, spec: &ConvSpec) -> Result<QTensor> {
    let acc = conv1d_acc(input, weights, spec)?;
    let out_len = acc.len() / spec.out_channels;
    finish(acc, vec![spec.out_channels, out_len], input, weights, spec)
}

/// Pre-requantization accumulators of a 2-D convolution, `[out][row][col]`.
pub fn conv2d_acc(input: &QTensor, weights: &QTensor, spec: &ConvSpec) -> Result<Vec<i32>> {
    let [cin, h, w_in] = *input.shape() else {
        return Err(Error::shape(format!("conv2d input must be [C, H, W], got {:?}", input.shape())));
    };
    let (kh, kw) = spec.kernel;
    if cin != spec.in_channels || weights.shape() != [spec.out_channels, cin, kh, kw] {
        return Err(Error::shape("conv2d weights/spec do not match input"));
    }
    let oh = out_dim(h, kh, spec.stride, spec.padding)?;
    let ow = out_dim(w_in, kw, spec.stride, spec.padding)?;
    let x = input.data();
    let w = weights.data();
    let mut acc = vec![0i32; spec.out_channels * oh * ow];
    for o in 0..spec.out_channels {
        for r in 0..oh {
            for q in 0..ow {
                let mut sum: i32 = 0;
                for c in 0..cin {
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let y = (r * spec.stride + ky) as isize - spec.padding as isize;
                            let z = (q * spec.stride + kx) as isize - spec.padding as isize;
                            if y < 0 || z < 0 || y as usize >= h || z as usize >= w_in {
                                continue;
                            }
                            let a = x[(c * h + y as usize) * w_in + z as usize] as i32;
                            let b = w[((o * cin + c) * kh + ky) * kw + kx] as i32;
                            sum = sum.checked_add(a * b).ok_or(Error::AccOverflow)?;
                        }
                    }
                }
                acc[(o * oh + r) * ow + q] = sum;
            }
        }
    }
    Ok(acc)
}

pub fn conv2d_ref(input: &QTensor, weights: &QTensor, spec: &ConvSpec) -> Result<QTensor> {
    let acc = conv2d_acc(input, weights, spec)?;
    let [_, h, w] = *input.shape() else { unreachable!() };
    let oh = out_dim(h, spec.kernel.0, spec.stride, spec.padding)?;
    let ow = out_dim(w, spec.kernel.1, spec.stride, spec.padding)?;
    finish(acc, vec![spec.out_channels, oh, ow], input, weights, spec)
}

fn finish(acc: Vec<i32>, shape: Vec<usize>, input: &QTensor, weights: &QTensor, spec: &ConvSpec) -> Result<QTensor> {
    let data = acc
        .into_iter()
        .map(|a| requantize(Accumulator(a), spec.shift, spec.relu, BitWidth::B8) as i8)
        .collect();
    QTensor::new(
        data,
        shape,
        BitWidth::B8,
        input.scale_exp() + weights.scale_exp() + spec.shift as i32,
    )
}

fn reduce(vals: &[i8], mode: PoolMode) -> Result<i8> {
    match mode {
        PoolMode::Max => vals.iter().copied().max().ok_or(Error::EmptyPool),
        PoolMode::Avg => {
            let n = vals.len();
            if n == 0 {
                return Err(Error::EmptyPool);
            }
            if !n.is_power_of_two() {
                return Err(Error::UnsupportedPoolSize(n));
            }
            let sum: i64 = vals.iter().map(|&v| v as i64).sum();
            let r = (sum + n as i64 / 2) >> n.trailing_zeros();
            Ok(r.clamp(-128, 127) as i8)
        }
    }
}

/// Windowed pooling, no padding. 1-D on `[C, L]`, square windows on `[C, H, W]`.
pub fn pool_ref(input: &QTensor, mode: PoolMode, window: usize, stride: usize) -> Result<QTensor> {
    let (c, h, w, rank2) = match *input.shape() {
        [c, l] => (c, l, 1, false),
        [c, h, w] => (c, h, w, true),
        _ => return Err(Error::shape("pool input must be [C, L] or [C, H, W]")),
    };
    let (kh, kw) = if rank2 { (window, window) } else { (window, 1) };
    if window == 0 || kh > h || kw > w {
        return Err(Error::shape(format!("pool window {window} larger than input")));
    }
    let oh = out_dim(h, kh, stride, 0)?;
    let ow = if rank2 { out_dim(w, kw, stride, 0)? } else { 1 };
    pool_generic(input, mode, (kh, kw), stride, (c, h, w), (oh, ow), rank2)
}

/// Average over the whole spatial extent of each channel.
pub fn global_avg_ref(input: &QTensor) -> Result<QTensor> {
    let (c, h, w, rank2) = match *input.shape() {
        [c, l] => (c, l, 1, false),
        [c, h, w] => (c, h, w, true),
        _ => return Err(Error::shape("pool input must be [C, L] or [C, H, W]")),
    };
    pool_generic(input, PoolMode::Avg, (h, w), 1, (c, h, w), (1, 1), rank2)
}

fn pool_generic(
    input: &QTensor,
    mode: PoolMode,
    (kh, kw): (usize, usize),
    stride: usize,
    (c, h, w): (usize, usize, usize),
    (oh, ow): (usize, usize),
    rank2: bool,
) -> Result<QTensor> {
    let x = input.data();
    let mut out = Vec::with_capacity(c * oh * ow);
    let mut vals = Vec::with_capacity(kh * kw);
    for ch in 0..c {
        for r in 0..oh {
            for q in 0..ow {
                vals.clear();
                for ky in 0..kh {
                    for kx in 0..kw {
                        vals.push(x[(ch * h + r * stride + ky) * w + q * stride + kx]);
                    }
                }
                out.push(reduce(&vals, mode)?);
            }
        }
    }
    let shape = if rank2 { vec![c, oh, ow] } else { vec![c, oh] };
    QTensor::new(out, shape, BitWidth::B8, input.scale_exp())
}

/// Evaluates a lowered network layer by layer with the reference operators.
pub fn run_reference(net: &Lowered, input: &QTensor) -> Result<QTensor> {
    if input.shape() != net.input_shape.as_slice() {
        return Err(Error::shape(format!(
            "input shape {:?} does not match network input {:?}",
            input.shape(),
            net.input_shape
        )));
    }
    let mut x = input.clone();
    for layer in &net.layers {
        let g = &layer.geom;
        x = match layer.kind {
            LayerKind::Conv1d | LayerKind::Conv2d => {
                let w = layer.weights.as_ref().ok_or_else(|| Error::shape("conv layer without weights"))?;
                let spec = ConvSpec {
                    in_channels: g.in_c,
                    out_channels: g.out_c,
                    kernel: g.kernel,
                    stride: g.stride.0,
                    padding: g.pad.0,
                    bits: layer.bits,
                    shift: layer.shift,
                    relu: layer.relu,
                };
                if layer.kind == LayerKind::Conv1d {
                    conv1d_ref(&x, w, &spec)?
                } else {
                    conv2d_ref(&x, w, &spec)?
                }
            }
            LayerKind::MaxPool => pool_ref(&x, PoolMode::Max, g.kernel.0, g.stride.0)?,
            LayerKind::AvgPool => pool_ref(&x, PoolMode::Avg, g.kernel.0, g.stride.0)?,
            LayerKind::GlobalAvg => global_avg_ref(&x)?,
        };
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn t(data: Vec<i8>, shape: Vec<usize>) -> QTensor {
        QTensor::new(data, shape, BitWidth::B8, 0).unwrap()
    }

    fn spec1d(cin: usize, cout: usize, k: usize, stride: usize, pad: usize) -> ConvSpec {
        ConvSpec {
            in_channels: cin,
            out_channels: cout,
            kernel: (k, 1),
            stride,
            padding: pad,
            bits: BitWidth::B8,
            shift: 0,
            relu: false,
        }
    }

    #[test]
    fn conv1d_identity() {
        let x = t(vec![5, -3, 7, 0, 1, 2], vec![2, 3]);
        let w = t(vec![1, 0, 0, 1], vec![2, 2, 1]);
        assert_eq!(conv1d_ref(&x, &w, &spec1d(2, 2, 1, 1, 0)).unwrap(), x);
    }

    #[test]
    fn conv1d_hand_example() {
        let x = t(vec![1, 2, 3, 4], vec![1, 4]);
        let w = t(vec![1, 0, -1], vec![1, 1, 3]);
        // 1-3 = -2, 2-4 = -2
        assert_eq!(conv1d_ref(&x, &w, &spec1d(1, 1, 3, 1, 0)).unwrap().data(), &[-2, -2]);
        // with padding 1: [0-2, 1-3, 2-4, 3-0]
        assert_eq!(conv1d_ref(&x, &w, &spec1d(1, 1, 3, 1, 1)).unwrap().data(), &[-2, -2, -2, 3]);
    }

    #[test]
    fn conv1d_zero_input() {
        let x = t(vec![0; 10], vec![2, 5]);
        let w = t(vec![3; 2 * 2 * 3], vec![2, 2, 3]);
        let y = conv1d_ref(&x, &w, &spec1d(2, 2, 3, 2, 1)).unwrap();
        assert!(y.data().iter().all(|&v| v == 0));
        assert_eq!(y.shape(), &[2, 3]);
    }

    #[test]
    fn conv1d_shape_mismatch() {
        let x = t(vec![0; 10], vec![2, 5]);
        let w = t(vec![0; 6], vec![2, 1, 3]);
        assert!(matches!(conv1d_ref(&x, &w, &spec1d(2, 2, 3, 1, 0)), Err(Error::Shape(_))));
    }

    #[test]
    fn conv2d_identity_and_delta() {
        let x = t((0..18).map(|v| v as i8).collect(), vec![2, 3, 3]);
        let w = t(vec![1, 0, 0, 1], vec![2, 2, 1, 1]);
        let mut s = spec1d(2, 2, 1, 1, 0);
        s.kernel = (1, 1);
        assert_eq!(conv2d_ref(&x, &w, &s).unwrap(), x);

        let mut d = vec![0i8; 25];
        d[2 * 5 + 2] = 1;
        let x = t(d, vec![1, 5, 5]);
        let w = t(vec![1; 9], vec![1, 1, 3, 3]);
        let mut s = spec1d(1, 1, 3, 1, 0);
        s.kernel = (3, 3);
        let y = conv2d_ref(&x, &w, &s).unwrap();
        assert_eq!(y.shape(), &[1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 1));
        // with padding the indicator sits in the middle of a 5x5 map
        s.padding = 1;
        let y = conv2d_ref(&x, &w, &s).unwrap();
        for r in 0..5 {
            for q in 0..5 {
                let inside = (1..=3).contains(&r) && (1..=3).contains(&q);
                assert_eq!(y.data()[r * 5 + q], inside as i8);
            }
        }
    }

    #[test]
    fn pool_examples() {
        let x = t(vec![9; 8], vec![1, 8]);
        assert_eq!(pool_ref(&x, PoolMode::Avg, 4, 4).unwrap().data(), &[9, 9]);
        let x = t(vec![1, 3, 2, 4], vec![1, 4]);
        assert_eq!(pool_ref(&x, PoolMode::Max, 2, 2).unwrap().data(), &[3, 4]);
        assert!(matches!(pool_ref(&x, PoolMode::Max, 5, 1), Err(Error::Shape(_))));
        assert_eq!(global_avg_ref(&x).unwrap().data(), &[3]);
        let x = t(vec![1, 2, 3, 4, 5, 6, 7, 8, 9], vec![1, 3, 3]);
        assert_eq!(pool_ref(&x, PoolMode::Max, 2, 1).unwrap().data(), &[5, 6, 8, 9]);
    }

    proptest! {
        #[test]
        fn linear_at_shift_zero(
            a in proptest::collection::vec(-60i8..60, 24),
            b in proptest::collection::vec(-60i8..60, 24),
            w in proptest::collection::vec(any::<i8>(), 2 * 3 * 3),
        ) {
            let sum: Vec<i8> = a.iter().zip(&b).map(|(x, y)| x + y).collect();
            let spec = spec1d(3, 2, 3, 1, 1);
            let w = t(w, vec![2, 3, 3]);
            let fa = conv1d_acc(&t(a, vec![3, 8]), &w, &spec).unwrap();
            let fb = conv1d_acc(&t(b, vec![3, 8]), &w, &spec).unwrap();
            let fs = conv1d_acc(&t(sum, vec![3, 8]), &w, &spec).unwrap();
            for i in 0..fs.len() {
                prop_assert_eq!(fs[i], fa[i] + fb[i]);
            }
        }
    }
}
