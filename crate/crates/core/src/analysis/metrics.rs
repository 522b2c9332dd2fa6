use serde::{Deserialize, Serialize};

use crate::analysis::spectrum::{estimate_hr, snr_db, HR_BAND};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::BvpSignal;

/// How a Pearson coefficient was obtained.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PearsonStatus {
    Defined,
    /// At least one series is constant; reported as 0.
    ConstantSeries,
    /// Both series constant and equal; reported as 1.
    IdenticalConstant,
    /// Fewer than two pairs; reported as 0.
    TooShort,
}

pub fn pearson(a: &[f64], b: &[f64]) -> (f64, PearsonStatus) {
    let n = a.len().min(b.len());
    if n < 2 {
        return (0.0, PearsonStatus::TooShort);
    }
    let (a, b) = (&a[..n], &b[..n]);
    let ma = a.iter().sum::<f64>() / n as f64;
    let mb = b.iter().sum::<f64>() / n as f64;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va == 0.0 || vb == 0.0 {
        if a == b {
            return (1.0, PearsonStatus::IdenticalConstant);
        }
        return (0.0, PearsonStatus::ConstantSeries);
    }
    (
        (cov / (va * vb).sqrt()).clamp(-1.0, 1.0),
        PearsonStatus::Defined,
    )
}

/// Error, correlation and signal-quality summary over a set of windows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub mae_bpm: f64,
    pub mape_pct: f64,
    pub rmse_bpm: f64,
    pub pearson_r: f64,
    pub pearson_status: PearsonStatus,
    /// Pulse SNR of the predicted waveform, when one was supplied.
    pub snr_db: Option<f64>,
    pub n_windows: usize,
    pub config_hash: String,
}

impl MetricReport {
    pub const CSV_HEADER: &'static str =
        "mae_bpm,mape_pct,rmse_bpm,pearson_r,snr_db,n_windows,config_hash";

    pub fn csv_row(&self) -> String {
        format!(
            "{:.4},{:.4},{:.4},{:.4},{},{},{}",
            self.mae_bpm,
            self.mape_pct,
            self.rmse_bpm,
            self.pearson_r,
            self.snr_db.map(|s| format!("{s:.4}")).unwrap_or_default(),
            self.n_windows,
            self.config_hash
        )
    }
}

/// Computes MAE, MAPE, RMSE and Pearson over paired per-window heart rates,
/// plus the pulse SNR of `pred_bvp` around the true fundamental (taken from
/// `true_bvp` when given, otherwise the mean true heart rate).
pub fn metrics<T: Scalar>(
    pred_bpm: &[f64],
    true_bpm: &[f64],
    pred_bvp: Option<&BvpSignal<T>>,
    true_bvp: Option<&BvpSignal<T>>,
    config_hash: &str,
) -> Result<MetricReport> {
    if pred_bpm.len() != true_bpm.len() {
        return Err(Error::validation(format!(
            "length mismatch: {} predictions vs {} references",
            pred_bpm.len(),
            true_bpm.len()
        )));
    }
    if pred_bpm.is_empty() {
        return Err(Error::validation("metrics need at least one window"));
    }
    if true_bpm.iter().any(|&t| t == 0.0) {
        return Err(Error::validation(
            "MAPE undefined for zero reference heart rate",
        ));
    }
    let n = pred_bpm.len() as f64;
    let errors: Vec<f64> = pred_bpm.iter().zip(true_bpm).map(|(p, t)| p - t).collect();
    let mae = errors.iter().map(|e| e.abs()).sum::<f64>() / n;
    let mape = 100.0
        * errors
            .iter()
            .zip(true_bpm)
            .map(|(e, t)| (e / t).abs())
            .sum::<f64>()
        / n;
    let rmse = (errors.iter().map(|e| e * e).sum::<f64>() / n).sqrt();
    let (r, status) = pearson(pred_bpm, true_bpm);

    let snr = match pred_bvp {
        Some(pred) => {
            let f0 = match true_bvp {
                Some(t) => estimate_hr(t, HR_BAND)?.bpm / 60.0,
                None => true_bpm.iter().sum::<f64>() / n / 60.0,
            };
            Some(snr_db(pred, f0, HR_BAND)?)
        }
        None => None,
    };

    Ok(MetricReport {
        mae_bpm: mae,
        mape_pct: mape,
        rmse_bpm: rmse,
        pearson_r: r,
        pearson_status: status,
        snr_db: snr,
        n_windows: pred_bpm.len(),
        config_hash: config_hash.to_string(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::PI;

    #[test]
    fn perfect_prediction() {
        let t = [70.0, 80.0, 90.0];
        let r = metrics::<f64>(&t, &t, None, None, "x").unwrap();
        assert_eq!((r.mae_bpm, r.mape_pct, r.rmse_bpm), (0.0, 0.0, 0.0));
        assert_eq!(r.pearson_r, 1.0);
        assert_eq!(r.pearson_status, PearsonStatus::Defined);
    }

    #[test]
    fn constant_offset() {
        let t = [80.0; 5];
        let p = [82.0; 5];
        let r = metrics::<f64>(&p, &t, None, None, "x").unwrap();
        assert!((r.mae_bpm - 2.0).abs() < 1e-12);
        assert!((r.rmse_bpm - 2.0).abs() < 1e-12);
        assert!((r.mape_pct - 2.5).abs() < 1e-12);
        assert_eq!(r.pearson_status, PearsonStatus::ConstantSeries);
        let same = metrics::<f64>(&t, &t, None, None, "x").unwrap();
        assert_eq!(same.pearson_r, 1.0);
        assert_eq!(same.pearson_status, PearsonStatus::IdenticalConstant);
    }

    #[test]
    fn validation_errors() {
        assert!(metrics::<f64>(&[1.0], &[1.0, 2.0], None, None, "").is_err());
        assert!(metrics::<f64>(&[1.0], &[0.0], None, None, "").is_err());
        assert!(metrics::<f64>(&[], &[], None, None, "").is_err());
    }

    #[test]
    fn snr_of_clean_tone_and_white_noise() {
        let fs = 30.0;
        let tone: Vec<f64> = (0..1800)
            .map(|i| (2.0 * PI * 1.2 * i as f64 / fs).sin())
            .collect();
        let bvp = BvpSignal::new(tone, fs).unwrap();
        let r = metrics(&[72.0], &[72.0], Some(&bvp), None, "").unwrap();
        assert!(r.snr_db.unwrap() > 20.0);

        // flat spectrum: 0.4 Hz of signal band against 2.9 Hz of noise band
        let baseline = 10.0 * (0.4f64 / 2.9).log10();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let normal = Normal::new(0.0, 1.0).unwrap();
        let mut acc = 0.0;
        let trials = 20;
        for _ in 0..trials {
            let noise: Vec<f64> = (0..1800).map(|_| normal.sample(&mut rng)).collect();
            let bvp = BvpSignal::new(noise, fs).unwrap();
            acc += metrics(&[72.0], &[72.0], Some(&bvp), None, "")
                .unwrap()
                .snr_db
                .unwrap();
        }
        let mean = acc / trials as f64;
        assert!((mean - baseline).abs() < 0.5, "{mean} vs {baseline}");
    }

    proptest! {
        #[test]
        fn mae_never_exceeds_rmse(pairs in prop::collection::vec((40.0f64..200.0, 40.0f64..200.0), 1..40)) {
            let (p, t): (Vec<f64>, Vec<f64>) = pairs.into_iter().unzip();
            let r = metrics::<f64>(&p, &t, None, None, "").unwrap();
            prop_assert!(r.mae_bpm <= r.rmse_bpm + 1e-9);
            prop_assert!(r.mape_pct >= 0.0);
            prop_assert!((-1.0..=1.0).contains(&r.pearson_r));
        }
    }
}
