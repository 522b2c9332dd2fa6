use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::{BvpSignal, HeartRateEstimate, HrMethod};

/// Default heart-rate analysis band in Hz (42 to 240 bpm).
pub const HR_BAND: [f64; 2] = [0.7, 4.0];

/// Half-width of the harmonic windows used for pulse SNR.
pub const SNR_HALF_WIDTH_HZ: f64 = 0.1;

/// One-sided power spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct Periodogram {
    pub freqs: Vec<f64>,
    pub power: Vec<f64>,
}

impl Periodogram {
    /// Sum of power over bins whose frequency satisfies `keep`.
    pub fn power_where(&self, keep: impl Fn(f64) -> bool) -> f64 {
        self.freqs
            .iter()
            .zip(&self.power)
            .filter(|(f, _)| keep(**f))
            .map(|(_, p)| p)
            .sum()
    }
}

/// Hann-windowed periodogram, zero-padded to at least four times the signal
/// length (rounded up to a power of two).
pub fn periodogram<T: Scalar>(bvp: &BvpSignal<T>) -> Result<Periodogram> {
    let n = bvp.len();
    if n < 2 {
        return Err(Error::validation(
            "spectral analysis needs at least 2 samples",
        ));
    }
    let mean = bvp.samples.iter().map(|s| s.as_f64()).sum::<f64>() / n as f64;
    let nfft = (4 * n).next_power_of_two();
    let mut buf: Vec<Complex<f64>> = vec![Complex::new(0.0, 0.0); nfft];
    for (i, s) in bvp.samples.iter().enumerate() {
        let w = 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / (n - 1) as f64).cos();
        buf[i] = Complex::new((s.as_f64() - mean) * w, 0.0);
    }
    FftPlanner::new().plan_fft_forward(nfft).process(&mut buf);
    let bins = nfft / 2 + 1;
    let freqs = (0..bins)
        .map(|k| k as f64 * bvp.rate / nfft as f64)
        .collect();
    let power = buf[..bins].iter().map(|c| c.norm_sqr()).collect();
    Ok(Periodogram { freqs, power })
}

/// Heart rate as 60 times the periodogram peak frequency inside `band`.
pub fn estimate_hr<T: Scalar>(bvp: &BvpSignal<T>, band: [f64; 2]) -> Result<HeartRateEstimate> {
    let pg = periodogram(bvp)?;
    let peak = pg
        .freqs
        .iter()
        .zip(&pg.power)
        .filter(|(f, _)| (band[0]..=band[1]).contains(*f))
        .max_by(|a, b| a.1.total_cmp(b.1))
        .map(|(f, _)| *f)
        .ok_or_else(|| Error::InsufficientData("no spectral bins inside the band".into()))?;
    Ok(HeartRateEstimate {
        bpm: 60.0 * peak,
        confidence_band_hz: band,
        method: HrMethod::FftPeak,
    })
}

/// Pulse signal-to-noise ratio in dB: power within +-0.1 Hz of the
/// fundamental and second harmonic against the remaining power in `band`.
pub fn snr_db<T: Scalar>(bvp: &BvpSignal<T>, fundamental_hz: f64, band: [f64; 2]) -> Result<f64> {
    let pg = periodogram(bvp)?;
    let in_band = |f: f64| (band[0]..=band[1]).contains(&f);
    let near_harmonic = |f: f64| {
        (f - fundamental_hz).abs() <= SNR_HALF_WIDTH_HZ
            || (f - 2.0 * fundamental_hz).abs() <= SNR_HALF_WIDTH_HZ
    };
    let signal = pg.power_where(|f| in_band(f) && near_harmonic(f));
    let noise = pg.power_where(|f| in_band(f) && !near_harmonic(f));
    let tiny = 1e-300;
    Ok(10.0 * ((signal + tiny) / (noise + tiny)).log10())
}
