//! Post-processing and evaluation: waveform reconstruction, spectral heart
//! rate, peak/IBI extraction, pNN50, and the error/quality metrics.

pub mod hrv;
pub mod metrics;
pub mod reconstruct;
pub mod spectrum;

pub use hrv::{detect_peaks, pnn50, IbiSeries, PeakDetection};
pub use metrics::{metrics, pearson, MetricReport, PearsonStatus};
pub use reconstruct::integrate;
pub use spectrum::{estimate_hr, periodogram, snr_db, Periodogram, HR_BAND};
