use crate::dsp::detrend;
use crate::error::Result;
use crate::scalar::{mean, std_dev, Scalar};
use crate::signal::BvpSignal;

/// Length of the detrending segments in seconds.
pub const SEGMENT_S: f64 = 10.0;

/// Turns a stream of per-transition derivative predictions back into a
/// waveform. The derivative is cut into half-overlapping segments of
/// [`SEGMENT_S`]; each segment gets its mean removed, is cumulatively summed
/// and linearly detrended, and the segments are blended with Hann weights.
/// The result is scaled to unit variance.
pub fn integrate<T: Scalar, W: AsRef<[T]>>(windows: &[W], rate: f64) -> Result<BvpSignal<T>> {
    let derivative: Vec<f64> = windows
        .iter()
        .flat_map(|w| w.as_ref().iter().map(|v| v.as_f64()))
        .collect();
    let n = derivative.len();
    let seg = ((SEGMENT_S * rate).round() as usize).clamp(2, n.max(2));
    let hop = (seg / 2).max(1);
    let mut starts: Vec<usize> = (0..n.saturating_sub(seg) + 1).step_by(hop).collect();
    if let Some(&last) = starts.last() {
        if last + seg < n {
            starts.push(n - seg);
        }
    }

    let mut acc = vec![0.0; n];
    let mut weight = vec![0.0; n];
    let taper: Vec<f64> = (0..seg)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * (i as f64 + 0.5) / seg as f64).cos())
        .collect();
    for s in starts {
        let e = (s + seg).min(n);
        let d = &derivative[s..e];
        let mu = mean(d);
        let mut run = 0.0;
        let integrated: Vec<f64> = d
            .iter()
            .map(|&v| {
                run += v - mu;
                run
            })
            .collect();
        for (i, v) in detrend(&integrated).into_iter().enumerate() {
            acc[s + i] += taper[i] * v;
            weight[s + i] += taper[i];
        }
    }
    let mut out: Vec<T> = acc
        .iter()
        .zip(&weight)
        .map(|(a, w)| T::lit(if *w > 0.0 { a / w } else { 0.0 }))
        .collect();
    let sd = std_dev(&out);
    if sd > T::lit(1e-12) {
        out.iter_mut().for_each(|v| *v /= sd);
    }
    BvpSignal::new(out, rate)
}
