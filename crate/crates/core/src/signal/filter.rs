//! Butterworth band-pass design by bilinear transform, applied as a causal
//! cascade of biquads in double precision.

use num_complex::Complex64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ORDER: usize = 8;

/// One second-order section, `a[0] == 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    /// `H(e^{jw})` at normalized angular frequency `w` (rad/sample).
    pub fn response(&self, w: f64) -> Complex64 {
        let z1 = Complex64::from_polar(1.0, -w);
        let z2 = z1 * z1;
        let num = self.b[0] + z1 * self.b[1] + z2 * self.b[2];
        let den = self.a[0] + z1 * self.a[1] + z2 * self.a[2];
        num / den
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FilterConfig {
    pub lo_hz: f64,
    pub hi_hz: f64,
    /// Low-pass prototype order; the band-pass has twice this order.
    pub order: usize,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            lo_hz: 15.0,
            hi_hz: 55.0,
            order: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Bandpass {
    pub fs: f64,
    pub sections: Vec<Biquad>,
}

impl Bandpass {
    pub fn design(fs: f64, cfg: &FilterConfig) -> Result<Bandpass> {
        let (lo, hi, order) = (cfg.lo_hz, cfg.hi_hz, cfg.order);
        if !(fs.is_finite() && fs > 0.0) {
            return Err(Error::FilterSpec(format!("sample rate {fs} must be positive")));
        }
        if !(lo.is_finite() && hi.is_finite() && 0.0 < lo && lo < hi && hi < fs / 2.0) {
            return Err(Error::FilterSpec(format!(
                "band [{lo}, {hi}] Hz must satisfy 0 < lo < hi < {}",
                fs / 2.0
            )));
        }
        if order == 0 || order > MAX_ORDER {
            return Err(Error::FilterSpec(format!("order {order} outside 1..={MAX_ORDER}")));
        }

        let k = 2.0 * fs;
        let w_lo = k * (std::f64::consts::PI * lo / fs).tan();
        let w_hi = k * (std::f64::consts::PI * hi / fs).tan();
        let bw = w_hi - w_lo;
        let w0 = (w_lo * w_hi).sqrt();

        let mut poles = Vec::with_capacity(2 * order);
        for i in 0..order {
            let theta = std::f64::consts::PI * (2 * i + order + 1) as f64 / (2 * order) as f64;
            let p = Complex64::from_polar(1.0, theta);
            // s^2 - p*bw*s + w0^2 = 0
            let half = p * bw / 2.0;
            let disc = (half * half - w0 * w0).sqrt();
            for s in [half + disc, half - disc] {
                poles.push((k + s) / (k - s));
            }
        }

        let eps = 1e-12;
        let mut upper: Vec<Complex64> = poles.iter().copied().filter(|z| z.im > eps).collect();
        let mut real: Vec<f64> = poles.iter().filter(|z| z.im.abs() <= eps).map(|z| z.re).collect();
        upper.sort_by(|a, b| a.arg().total_cmp(&b.arg()));
        real.sort_by(f64::total_cmp);
        let mut sections: Vec<Biquad> = upper
            .iter()
            .map(|z| Biquad {
                b: [1.0, 0.0, -1.0],
                a: [1.0, -2.0 * z.re, z.norm_sqr()],
            })
            .collect();
        for pair in real.chunks(2) {
            let (r1, r2) = (pair[0], pair.get(1).copied().unwrap_or(0.0));
            sections.push(Biquad {
                b: [1.0, 0.0, -1.0],
                a: [1.0, -(r1 + r2), r1 * r2],
            });
        }

        let mut bp = Bandpass { fs, sections };
        let center = 2.0 * (w0 / k).atan();
        let g = (1.0 / bp.response(center).norm()).powf(1.0 / bp.sections.len() as f64);
        for s in &mut bp.sections {
            for b in &mut s.b {
                *b *= g;
            }
        }
        Ok(bp)
    }

    pub fn response(&self, w: f64) -> Complex64 {
        self.sections.iter().map(|s| s.response(w)).product()
    }

    /// `|H|` at a frequency in Hz.
    pub fn magnitude_at(&self, hz: f64) -> f64 {
        self.response(2.0 * std::f64::consts::PI * hz / self.fs).norm()
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        let mut y = x.to_vec();
        for s in &self.sections {
            let (mut z1, mut z2) = (0.0, 0.0);
            for v in &mut y {
                let xin = *v;
                let out = s.b[0] * xin + z1;
                z1 = s.b[1] * xin - s.a[1] * out + z2;
                z2 = s.b[2] * xin - s.a[2] * out;
                *v = out;
            }
        }
        y
    }
}

/// Second-order Butterworth band-pass over `samples`.
pub fn bandpass(samples: &[f64], fs: f64, lo: f64, hi: f64) -> Result<Vec<f64>> {
    let cfg = FilterConfig {
        lo_hz: lo,
        hi_hz: hi,
        order: 1,
    };
    Ok(Bandpass::design(fs, &cfg)?.apply(samples))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sine(hz: f64, fs: f64, n: usize) -> Vec<f64> {
        (0..n).map(|i| (2.0 * std::f64::consts::PI * hz * i as f64 / fs).sin()).collect()
    }

    #[test]
    fn dc_is_rejected() {
        let y = bandpass(&vec![1000.0; 512], 250.0, 15.0, 55.0).unwrap();
        assert!(y[201..].iter().all(|v| v.abs() < 1e-3 * 1000.0));
    }

    #[test]
    fn zero_in_zero_out() {
        assert!(bandpass(&[0.0; 64], 250.0, 15.0, 55.0).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_section_by_default() {
        let bp = Bandpass::design(250.0, &FilterConfig::default()).unwrap();
        assert_eq!(bp.sections.len(), 1);
        assert_eq!(Bandpass::design(250.0, &FilterConfig { order: 3, ..Default::default() }).unwrap().sections.len(), 3);
    }

    #[test]
    fn butterworth_edges() {
        for order in 1..=4 {
            let bp = Bandpass::design(250.0, &FilterConfig { order, ..Default::default() }).unwrap();
            for edge in [15.0, 55.0] {
                let db = 20.0 * bp.magnitude_at(edge).log10();
                assert!((db + 3.0103).abs() < 1e-6, "order {order} edge {edge}: {db} dB");
            }
            assert!(bp.magnitude_at(0.0) < 1e-9);
            assert!(bp.magnitude_at(125.0) < 1e-9);
        }
    }

    #[test]
    fn sine_steady_state_matches_response() {
        let bp = Bandpass::design(250.0, &FilterConfig::default()).unwrap();
        let y = bp.apply(&sine(35.0, 250.0, 4000));
        let amp = y[2000..].iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let db = 20.0 * (amp / bp.magnitude_at(35.0)).log10();
        assert!(db.abs() < 0.5, "{db} dB");
    }

    #[test]
    fn invalid_band() {
        for (lo, hi) in [(0.0, 55.0), (55.0, 15.0), (15.0, 125.0), (f64::NAN, 55.0), (-1.0, 10.0)] {
            assert!(matches!(bandpass(&[1.0], 250.0, lo, hi), Err(Error::FilterSpec(_))));
        }
        let bad = FilterConfig { order: 0, ..Default::default() };
        assert!(Bandpass::design(250.0, &bad).is_err());
    }
}
