//! Small filtering toolkit: linear detrending and zero-phase Butterworth
//! band-pass built from second-order sections.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use crate::scalar::Scalar;

/// Removes the least-squares line from `x`.
pub fn detrend<T: Scalar>(x: &[T]) -> Vec<T> {
    let n = x.len();
    if n < 2 {
        return vec![T::zero(); n];
    }
    let nf = n as f64;
    let t_mean = (nf - 1.0) / 2.0;
    let y_mean = x.iter().map(|v| v.as_f64()).sum::<f64>() / nf;
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    for (i, v) in x.iter().enumerate() {
        let dt = i as f64 - t_mean;
        sxy += dt * (v.as_f64() - y_mean);
        sxx += dt * dt;
    }
    let slope = sxy / sxx;
    x.iter()
        .enumerate()
        .map(|(i, v)| T::lit(v.as_f64() - y_mean - slope * (i as f64 - t_mean)))
        .collect()
}

/// Second-order IIR section in transposed direct form II, normalized so
/// `a0 = 1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Biquad {
    pub b: [f64; 3],
    pub a: [f64; 3],
}

impl Biquad {
    /// Butterworth low-pass (Q = 1/sqrt 2), bilinear transform with prewarping.
    pub fn lowpass(cutoff_hz: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / fs;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * FRAC_1_SQRT_2);
        let a0 = 1.0 + alpha;
        Self {
            b: [
                (1.0 - cos) / 2.0 / a0,
                (1.0 - cos) / a0,
                (1.0 - cos) / 2.0 / a0,
            ],
            a: [1.0, -2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    pub fn highpass(cutoff_hz: f64, fs: f64) -> Self {
        let w0 = 2.0 * PI * cutoff_hz / fs;
        let (sin, cos) = w0.sin_cos();
        let alpha = sin / (2.0 * FRAC_1_SQRT_2);
        let a0 = 1.0 + alpha;
        Self {
            b: [
                (1.0 + cos) / 2.0 / a0,
                -(1.0 + cos) / a0,
                (1.0 + cos) / 2.0 / a0,
            ],
            a: [1.0, -2.0 * cos / a0, (1.0 - alpha) / a0],
        }
    }

    fn dc_gain(&self) -> f64 {
        self.b.iter().sum::<f64>() / self.a.iter().sum::<f64>()
    }

    /// Filters `x` in place, starting from the steady state for a constant
    /// input equal to `x[0]`.
    fn run(&self, x: &mut [f64]) {
        let Some(&first) = x.first() else { return };
        let y_ss = self.dc_gain() * first;
        let mut z1 = y_ss - self.b[0] * first;
        let mut z2 = self.b[2] * first - self.a[2] * y_ss;
        for v in x.iter_mut() {
            let input = *v;
            let y = self.b[0] * input + z1;
            z1 = self.b[1] * input - self.a[1] * y + z2;
            z2 = self.b[2] * input - self.a[2] * y;
            *v = y;
        }
    }
}

/// Forward-backward filtering through a cascade of sections, with odd
/// reflection padding at both ends.
pub fn filtfilt(sections: &[Biquad], x: &[f64]) -> Vec<f64> {
    let n = x.len();
    if n < 2 || sections.is_empty() {
        return x.to_vec();
    }
    let pad = (3 * (2 * sections.len() + 1)).min(n - 1);
    let mut ext = Vec::with_capacity(n + 2 * pad);
    ext.extend((1..=pad).rev().map(|i| 2.0 * x[0] - x[i]));
    ext.extend_from_slice(x);
    ext.extend((1..=pad).map(|i| 2.0 * x[n - 1] - x[n - 1 - i]));
    for s in sections {
        s.run(&mut ext);
    }
    ext.reverse();
    for s in sections {
        s.run(&mut ext);
    }
    ext.reverse();
    ext[pad..pad + n].to_vec()
}

/// Zero-phase band-pass: second-order Butterworth high-pass at `lo` cascaded
/// with second-order Butterworth low-pass at `hi` (fourth order overall),
/// applied forward and backward.
pub fn bandpass<T: Scalar>(x: &[T], fs: f64, lo: f64, hi: f64) -> Vec<T> {
    let mut sections = vec![Biquad::highpass(lo, fs)];
    if hi < 0.5 * fs * 0.99 {
        sections.push(Biquad::lowpass(hi, fs));
    }
    let xs: Vec<f64> = x.iter().map(|v| v.as_f64()).collect();
    filtfilt(&sections, &xs).into_iter().map(T::lit).collect()
}
