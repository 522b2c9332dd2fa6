use serde::{Deserialize, Serialize};

use crate::analysis::spectrum::{estimate_hr, HR_BAND};
use crate::error::{Error, Result};
use crate::scalar::{std_dev, Scalar};
use crate::signal::BvpSignal;

/// Physiologically admissible inter-beat interval range (ms), exclusive.
pub const IBI_RANGE_MS: (f64, f64) = (200.0, 2000.0);

/// Successive inter-beat intervals in milliseconds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IbiSeries {
    pub intervals_ms: Vec<f64>,
}

impl IbiSeries {
    pub fn new(intervals_ms: Vec<f64>) -> Self {
        Self { intervals_ms }
    }

    pub fn len(&self) -> usize {
        self.intervals_ms.len()
    }

    pub fn is_empty(&self) -> bool {
        self.intervals_ms.is_empty()
    }

    pub fn mean_bpm(&self) -> Option<f64> {
        if self.intervals_ms.is_empty() {
            return None;
        }
        let mean = self.intervals_ms.iter().sum::<f64>() / self.len() as f64;
        Some(60_000.0 / mean)
    }
}

/// Percentage of successive interval differences strictly greater than 50 ms.
pub fn pnn50(ibis: &IbiSeries) -> Result<f64> {
    let n = ibis.len();
    if n < 2 {
        return Err(Error::InsufficientData(format!(
            "pNN50 needs at least 2 intervals, got {n}"
        )));
    }
    let over = ibis
        .intervals_ms
        .windows(2)
        .filter(|w| (w[1] - w[0]).abs() > 50.0)
        .count();
    Ok(100.0 * over as f64 / (n - 1) as f64)
}

/// Detected systolic peaks and the intervals between them.
#[derive(Debug, Clone, PartialEq)]
pub struct PeakDetection {
    /// Sample indices of accepted peaks, ascending.
    pub peaks: Vec<usize>,
    pub ibis: IbiSeries,
}

/// Peak picking with spacing adapted to the spectral heart rate: minimum
/// spacing of half a beat period and prominence of at least 0.3 signal
/// standard deviations. Intervals outside the physiological range are
/// dropped.
pub fn detect_peaks<T: Scalar>(bvp: &BvpSignal<T>) -> Result<PeakDetection> {
    let hr = estimate_hr(bvp, HR_BAND)?;
    let x: Vec<f64> = bvp.samples.iter().map(|s| s.as_f64()).collect();
    let min_spacing = 0.5 * 60.0 / hr.bpm * bvp.rate;
    let min_prominence = 0.3 * std_dev(&x);

    let candidates: Vec<usize> = local_maxima(&x)
        .into_iter()
        .filter(|&i| prominence(&x, i) >= min_prominence)
        .collect();

    // keep taller peaks first, suppressing neighbours closer than the spacing
    let mut order = candidates.clone();
    order.sort_by(|&a, &b| x[b].total_cmp(&x[a]).then(a.cmp(&b)));
    let mut kept: Vec<usize> = Vec::new();
    for i in order {
        if kept
            .iter()
            .all(|&k| (k as f64 - i as f64).abs() >= min_spacing)
        {
            kept.push(i);
        }
    }
    kept.sort_unstable();

    if kept.len() < 2 {
        return Err(Error::InsufficientData(format!(
            "found {} peaks, need at least 2",
            kept.len()
        )));
    }
    let intervals_ms = kept
        .windows(2)
        .map(|w| (w[1] - w[0]) as f64 / bvp.rate * 1000.0)
        .filter(|&ibi| ibi > IBI_RANGE_MS.0 && ibi < IBI_RANGE_MS.1)
        .collect();
    Ok(PeakDetection {
        peaks: kept,
        ibis: IbiSeries::new(intervals_ms),
    })
}

/// Strict local maxima; a flat top counts once, at its middle sample.
fn local_maxima(x: &[f64]) -> Vec<usize> {
    let mut out = Vec::new();
    let mut i = 1;
    while i + 1 < x.len() {
        if x[i] > x[i - 1] {
            let mut j = i;
            while j + 1 < x.len() && x[j + 1] == x[i] {
                j += 1;
            }
            if j + 1 < x.len() && x[j + 1] < x[i] {
                out.push((i + j) / 2);
            }
            i = j + 1;
        } else {
            i += 1;
        }
    }
    out
}

/// Height of a peak above the higher of the two minima separating it from
/// taller samples (or the signal edges).
fn prominence(x: &[f64], peak: usize) -> f64 {
    let h = x[peak];
    let mut left_min = h;
    for &v in x[..peak].iter().rev() {
        if v > h {
            break;
        }
        left_min = left_min.min(v);
    }
    let mut right_min = h;
    for &v in &x[peak + 1..] {
        if v > h {
            break;
        }
        right_min = right_min.min(v);
    }
    h - left_min.max(right_min)
}
