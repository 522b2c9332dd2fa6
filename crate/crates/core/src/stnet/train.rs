use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::analysis::HR_BAND;
use crate::stnet::model::{
    backprop, backward_with_integral, forward, record, ModelOptions, NetInput,
};
use crate::stnet::weights::NetworkWeights;

/// A window together with the per-frame values the network should emit.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample<T> {
    pub input: NetInput<T>,
    pub target: Vec<T>,
    /// Neighbouring samples with the same stretch continue one another in
    /// time.
    pub stretch: usize,
    /// Leading frames that repeat the end of the previous sample.
    pub overlap: usize,
}

impl<T> Sample<T> {
    /// A sample that stands alone.
    pub fn single(input: NetInput<T>, target: Vec<T>) -> Self {
        Self {
            input,
            target,
            stretch: 0,
            overlap: 0,
        }
    }
}

/// Index ranges of runs of neighbouring samples sharing a stretch.
pub fn stretches<T>(dataset: &[Sample<T>]) -> Vec<std::ops::Range<usize>> {
    let mut out = Vec::new();
    let mut start = 0;
    for i in 1..=dataset.len() {
        if i == dataset.len() || dataset[i].stretch != dataset[start].stretch {
            out.push(start..i);
            start = i;
        }
    }
    out
}

/// Squared error weighted per frequency, and its gradient. `weight` maps a
/// frequency in cycles per sample to its weight; a weight of one everywhere
/// gives the mean squared error.
pub fn spectral_loss(residual: &[f64], weight: impl Fn(f64) -> f64) -> (f64, Vec<f64>) {
    let n = residual.len();
    if n == 0 {
        return (0.0, Vec::new());
    }
    let mut planner = FftPlanner::new();
    let mut buf: Vec<Complex<f64>> = residual.iter().map(|&r| Complex::new(r, 0.0)).collect();
    planner.plan_fft_forward(n).process(&mut buf);
    let mut loss = 0.0;
    for (k, c) in buf.iter_mut().enumerate() {
        let wk = weight(k.min(n - k) as f64 / n as f64);
        loss += wk * c.norm_sqr();
        *c *= wk;
    }
    planner.plan_fft_inverse(n).process(&mut buf);
    let nn = (n * n) as f64;
    (loss / nn, buf.iter().map(|c| 2.0 * c.re / nn).collect())
}

/// Frequency weight that adds `emphasis` times the gain of a running sum
/// inside `band_hz`, so errors count as much as they will after the
/// derivative is integrated back to a pulse.
pub fn band_weight(emphasis: f64, rate: f64, band_hz: [f64; 2]) -> impl Fn(f64) -> f64 {
    move |f| {
        let hz = f * rate;
        if (band_hz[0]..=band_hz[1]).contains(&hz) {
            let gain = 2.0 * (std::f64::consts::PI * f).sin();
            1.0 + emphasis / (gain * gain)
        } else {
            1.0
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub rho: f64,
    pub eps: f64,
    pub seed: u64,
    /// Weight of the running-sum term of the loss; `0` is plain MSE.
    pub integral_weight: f64,
    /// Extra weight on heart-rate-band errors of whole stretches, see
    /// [`band_weight`]. `0` trains every window on its own.
    pub band_emphasis: f64,
    /// Frame rate of the training videos, for `band_emphasis`.
    pub frame_rate: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 32,
            lr: 1.0,
            rho: 0.95,
            eps: 1e-6,
            seed: 0,
            integral_weight: 0.0,
            band_emphasis: 0.0,
            frame_rate: 30.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be positive"));
        }
        if !(self.lr > 0.0) || !(0.0..1.0).contains(&self.rho) || !(self.eps > 0.0) {
            return Err(Error::validation("need lr > 0, 0 <= rho < 1, eps > 0"));
        }
        if !(self.integral_weight >= 0.0) || !(self.band_emphasis >= 0.0) {
            return Err(Error::validation(
                "integral_weight and band_emphasis must be >= 0",
            ));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::validation("frame_rate must be positive"));
        }
        Ok(())
    }
}

/// Adadelta with running averages of squared gradients and squared updates.
#[derive(Debug, Clone)]
pub struct Adadelta<T> {
    rho: T,
    eps: T,
    lr: T,
    avg_sq_grad: NetworkWeights<T>,
    avg_sq_delta: NetworkWeights<T>,
}

impl<T: Scalar> Adadelta<T> {
    pub fn new(like: &NetworkWeights<T>, cfg: &TrainConfig) -> Self {
        Self {
            rho: T::lit(cfg.rho),
            eps: T::lit(cfg.eps),
            lr: T::lit(cfg.lr),
            avg_sq_grad: like.zeros_like(),
            avg_sq_delta: like.zeros_like(),
        }
    }

    pub fn step(&mut self, w: &mut NetworkWeights<T>, grads: &NetworkWeights<T>) {
        let (rho, eps, lr) = (self.rho, self.eps, self.lr);
        let keep = T::one() - rho;
        let params = w.params_mut().iter_mut();
        let rest = grads
            .params()
            .iter()
            .zip(self.avg_sq_grad.params_mut())
            .zip(self.avg_sq_delta.params_mut());
        for (p, ((g, eg), ed)) in params.zip(rest) {
            for i in 0..p.data.len() {
                let gi = g.data[i];
                eg.data[i] = rho * eg.data[i] + keep * gi * gi;
                let delta = -((ed.data[i] + eps).sqrt() / (eg.data[i] + eps).sqrt()) * gi;
                ed.data[i] = rho * ed.data[i] + keep * delta * delta;
                p.data[i] += lr * delta;
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean training-mode loss over the epoch's samples.
    pub train_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochLog>,
    /// Inference-mode mean loss over the dataset before and after training.
    pub initial_loss: f64,
    pub final_loss: f64,
}

impl TrainReport {
    pub const CSV_HEADER: &'static str = "epoch,train_loss";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for e in &self.epochs {
            out.push_str(&format!("{},{:.8}\n", e.epoch, e.train_loss));
        }
        out
    }
}

/// Inference-mode mean squared error over `dataset`.
pub fn dataset_loss<T: Scalar>(
    dataset: &[Sample<T>],
    w: &NetworkWeights<T>,
    opts: &ModelOptions,
) -> Result<f64> {
    if dataset.is_empty() {
        return Err(Error::validation("dataset is empty"));
    }
    let mut total = 0.0;
    for s in dataset {
        let out = forward(&s.input, w, opts, None)?;
        total += out
            .iter()
            .zip(&s.target)
            .map(|(p, t)| (p.as_f64() - t.as_f64()).powi(2))
            .sum::<f64>()
            / out.len() as f64;
    }
    Ok(total / dataset.len() as f64)
}

/// Minibatch Adadelta on the mean squared error. The optimizer state carries
/// over between epochs, and each epoch may see a different dataset.
#[derive(Debug, Clone)]
pub struct Trainer<T> {
    w: NetworkWeights<T>,
    opt: Adadelta<T>,
    opts: ModelOptions,
    cfg: TrainConfig,
    epochs_done: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(init: NetworkWeights<T>, opts: &ModelOptions, cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let opt = Adadelta::new(&init, cfg);
        Ok(Self {
            w: init,
            opt,
            opts: *opts,
            cfg: *cfg,
            epochs_done: 0,
        })
    }

    pub fn weights(&self) -> &NetworkWeights<T> {
        &self.w
    }

    pub fn into_weights(self) -> NetworkWeights<T> {
        self.w
    }

    /// One pass over `dataset` in an order drawn from the seed and the
    /// epoch number.
    pub fn epoch(&mut self, dataset: &[Sample<T>]) -> Result<EpochLog> {
        if dataset.is_empty() {
            return Err(Error::validation("dataset is empty"));
        }
        if self.cfg.band_emphasis > 0.0 {
            return self.stretch_epoch(dataset);
        }
        let epoch = self.epochs_done;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..dataset.len()).collect();
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (step, batch) in order.chunks(self.cfg.batch_size).enumerate() {
            let mut grads = self.w.zeros_like();
            for &i in batch {
                let s = &dataset[i];
                let seed = Some(rng.gen());
                let (loss, g) = backward_with_integral(
                    &s.input,
                    &self.w,
                    &self.opts,
                    &s.target,
                    seed,
                    self.cfg.integral_weight,
                )
                .map_err(|e| {
                    Error::numeric(
                        "training",
                        format!("epoch {epoch}, step {step}, sample {i}: {e}"),
                    )
                })?;
                epoch_loss += loss.as_f64();
                grads.add_scaled(&g, T::one());
            }
            grads.scale(T::one() / T::from_usize_(batch.len()));
            self.opt.step(&mut self.w, &grads);
            if !self.w.is_finite() {
                return Err(Error::numeric(
                    "training",
                    format!("weights diverged at epoch {epoch}, step {step}"),
                ));
            }
        }
        self.epochs_done += 1;
        let log = EpochLog {
            epoch: self.epochs_done,
            train_loss: epoch_loss / dataset.len() as f64,
        };
        log::info!("epoch {} loss {:.6}", log.epoch, log.train_loss);
        Ok(log)
    }
}

impl<T: Scalar> Trainer<T> {
    /// One Adadelta step per stretch, on the band-weighted error of the
    /// stretch's outputs laid end to end.
    fn stretch_epoch(&mut self, dataset: &[Sample<T>]) -> Result<EpochLog> {
        let epoch = self.epochs_done;
        let mut rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        rng.set_stream(epoch as u64);
        let mut order = stretches(dataset);
        order.shuffle(&mut rng);
        let weight = band_weight(self.cfg.band_emphasis, self.cfg.frame_rate, HR_BAND);
        let mut epoch_loss = 0.0;
        for (step, range) in order.iter().enumerate() {
            let fail = |e: Error| {
                Error::numeric("training", format!("epoch {epoch}, stretch {step}: {e}"))
            };
            let part = &dataset[range.clone()];
            let tapes = part
                .iter()
                .map(|s| record(&s.input, &self.w, &self.opts, Some(rng.gen())))
                .collect::<Result<Vec<_>>>()
                .map_err(fail)?;
            let mut residual = Vec::new();
            for (s, tape) in part.iter().zip(&tapes) {
                let keep = s.overlap.min(s.target.len());
                residual.extend(
                    tape.output()[keep..]
                        .iter()
                        .zip(&s.target[keep..])
                        .map(|(p, t)| p.as_f64() - t.as_f64()),
                );
            }
            let (loss, g) = spectral_loss(&residual, &weight);
            if !loss.is_finite() {
                return Err(fail(Error::numeric("loss", "not finite")));
            }
            epoch_loss += loss;
            let mut grads = self.w.zeros_like();
            let mut at = 0;
            for (s, tape) in part.iter().zip(&tapes) {
                let keep = s.overlap.min(s.target.len());
                let mut g_out = vec![T::zero(); s.target.len()];
                for v in &mut g_out[keep..] {
                    *v = T::lit(g[at]);
                    at += 1;
                }
                grads.add_scaled(
                    &backprop(tape, &s.input, &self.w, &self.opts, &g_out).map_err(fail)?,
                    T::one(),
                );
            }
            self.opt.step(&mut self.w, &grads);
            if !self.w.is_finite() {
                return Err(Error::numeric(
                    "training",
                    format!("weights diverged at epoch {epoch}, stretch {step}"),
                ));
            }
        }
        self.epochs_done += 1;
        let log = EpochLog {
            epoch: self.epochs_done,
            train_loss: epoch_loss / order.len() as f64,
        };
        log::info!("epoch {} loss {:.6}", log.epoch, log.train_loss);
        Ok(log)
    }
}

/// Minibatch Adadelta on the mean squared error, starting from `init`.
/// `on_epoch` sees each epoch's log as it completes.
pub fn train<T: Scalar>(
    dataset: &[Sample<T>],
    init: NetworkWeights<T>,
    opts: &ModelOptions,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(NetworkWeights<T>, TrainReport)> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::validation("dataset is empty"));
    }
    let initial_loss = dataset_loss(dataset, &init, opts)?;
    let mut trainer = Trainer::new(init, opts, cfg)?;
    let mut epochs = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        let log = trainer.epoch(dataset)?;
        on_epoch(&log);
        epochs.push(log);
    }
    let w = trainer.into_weights();
    let final_loss = dataset_loss(dataset, &w, opts)?;
    Ok((
        w,
        TrainReport {
            epochs,
            initial_loss,
            final_loss,
        },
    ))
}
