//! End-to-end estimation: face patches, difference windows, network
//! inference, waveform reconstruction and windowed heart rate. Also builds
//! training samples and synthetic corpora.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::analysis::{estimate_hr, integrate, HR_BAND};
use crate::dsp::bandpass;
use crate::error::{Error, Result};
use crate::preprocess::{
    appearance, crop_resize, temporal_difference, ChannelStats, Patch, PATCH_SIZE,
};
use crate::scalar::Scalar;
use crate::signal::{BvpSignal, FaceBox, FrameSequence};
use crate::stnet::{
    dataset_loss, forward, train, EpochLog, ModelOptions, NetInput, NetworkWeights, Sample,
    Tensor4, TrainConfig, TrainReport, Trainer, GROUPS,
};
use crate::synth::{
    generate_pulse, render_video, resample, Geometry, NoiseParams, OpticalParams, PulseSpec,
    Waveform,
};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// Frames per network window; a window of `k` frames holds `k - 1`
    /// transitions.
    pub window: usize,
    pub enlarge_ratio: f64,
    /// Number of windows sharing one set of normalization statistics.
    /// `1` normalizes each window on its own.
    pub span_windows: usize,
    pub hr_window_s: f64,
    pub hr_hop_s: f64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            window: 10,
            enlarge_ratio: 0.0,
            span_windows: 32,
            hr_window_s: 20.0,
            hr_hop_s: 5.0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        check_window(self.window)?;
        if !(self.enlarge_ratio >= 0.0) {
            return Err(Error::validation("enlarge_ratio must be >= 0"));
        }
        if self.span_windows == 0 {
            return Err(Error::validation("span_windows must be positive"));
        }
        if !(self.hr_window_s > 0.0) || !(self.hr_hop_s > 0.0) {
            return Err(Error::validation(
                "hr_window_s and hr_hop_s must be positive",
            ));
        }
        Ok(())
    }
}

fn check_window(window: usize) -> Result<()> {
    if window < GROUPS + 1 {
        return Err(Error::validation(format!(
            "window must be at least {} frames",
            GROUPS + 1
        )));
    }
    Ok(())
}

/// Per-frame face boxes with gaps filled from the nearest detected frame.
/// Sequences without boxes, or where no frame has a face, use the whole
/// frame. The flags mark filled frames.
pub fn fill_boxes<T: Scalar>(seq: &FrameSequence<T>) -> (Vec<FaceBox>, Vec<bool>) {
    let n = seq.len();
    let full = |i: usize| {
        let f = &seq.frames()[i];
        FaceBox::new(0.0, 0.0, f.width() as f64, f.height() as f64)
    };
    let Some(boxes) = seq.face_boxes() else {
        return ((0..n).map(full).collect(), vec![false; n]);
    };
    let known: Vec<usize> = (0..n).filter(|&i| boxes[i].present).collect();
    if known.is_empty() {
        log::warn!("no face box in any frame; using whole frames");
        return ((0..n).map(full).collect(), vec![true; n]);
    }
    let mut filled = vec![false; n];
    let out = (0..n)
        .map(|i| {
            if boxes[i].present {
                return boxes[i];
            }
            filled[i] = true;
            let next = known.partition_point(|&k| k < i);
            let nearest = match (next.checked_sub(1).map(|p| known[p]), known.get(next)) {
                (Some(a), Some(&b)) if b - i < i - a => b,
                (Some(a), _) => a,
                (None, Some(&b)) => b,
                (None, None) => unreachable!("at least one known frame"),
            };
            boxes[nearest]
        })
        .collect();
    (out, filled)
}

/// Face patches and their temporal differences for a whole sequence, with
/// normalization statistics shared across spans of windows.
#[derive(Debug, Clone)]
pub struct Prepared<T> {
    pub patches: Vec<Patch<T>>,
    pub diffs: Vec<Patch<T>>,
    /// Frames whose face box was borrowed from a neighbour.
    pub filled: Vec<bool>,
    pub fps: f64,
    span_len: usize,
    span_stats: Vec<ChannelStats>,
}

impl<T: Scalar> Prepared<T> {
    pub fn transitions(&self) -> usize {
        self.diffs.len()
    }

    /// Normalization statistics for the span holding `transition`.
    pub fn stats_at(&self, transition: usize) -> &ChannelStats {
        let i = (transition / self.span_len).min(self.span_stats.len() - 1);
        &self.span_stats[i]
    }
}

/// Transition ranges `[start, start + len)` a span covers. A tail shorter
/// than half a span joins the previous one.
fn spans(n: usize, span_len: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let mut end = (start + span_len).min(n);
        if n - end < span_len / 2 {
            end = n;
        }
        out.push((start, end));
        start = end;
    }
    out
}

pub fn prepare<T: Scalar>(seq: &FrameSequence<T>, cfg: &PipelineConfig) -> Result<Prepared<T>> {
    cfg.validate()?;
    if seq.len() < GROUPS + 1 {
        return Err(Error::InsufficientData(format!(
            "{} frames; need at least {}",
            seq.len(),
            GROUPS + 1
        )));
    }
    let (boxes, filled) = fill_boxes(seq);
    let patches = seq
        .frames()
        .iter()
        .zip(&boxes)
        .enumerate()
        .map(|(i, (frame, face))| {
            crop_resize(frame, face, cfg.enlarge_ratio, i)
                .map(|p| p.expect("filled boxes are present"))
        })
        .collect::<Result<Vec<_>>>()?;
    let diffs = temporal_difference(&patches)?;
    let span_len = cfg.span_windows * (cfg.window - 1);
    let span_stats = spans(diffs.len(), span_len)
        .into_iter()
        .map(|(a, b)| {
            if b - a >= 2 {
                ChannelStats::of(&diffs[a..b])
            } else {
                ChannelStats::of(&diffs[a.saturating_sub(1).min(diffs.len() - 2)..b.max(2)])
            }
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Prepared {
        patches,
        diffs,
        filled,
        fps: seq.fps(),
        span_len,
        span_stats,
    })
}

/// Placement of one window in the transition stream. Outputs before
/// `keep_from` overlap the previous window and are discarded.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct WindowSpan {
    pub start: usize,
    pub len: usize,
    pub keep_from: usize,
}

/// Non-overlapping windows of `window - 1` transitions; a remainder is
/// covered by one extra window aligned to the end. Streams shorter than a
/// window get a single shorter window.
pub fn plan_windows(transitions: usize, window: usize) -> Result<Vec<WindowSpan>> {
    check_window(window)?;
    if transitions < GROUPS {
        return Err(Error::InsufficientData(format!(
            "{transitions} transitions; a window needs {GROUPS}"
        )));
    }
    let len = (window - 1).min(transitions);
    let mut out: Vec<WindowSpan> = (0..transitions / len)
        .map(|k| WindowSpan {
            start: k * len,
            len,
            keep_from: 0,
        })
        .collect();
    let covered = out.len() * len;
    if covered < transitions {
        let start = transitions - len;
        out.push(WindowSpan {
            start,
            len,
            keep_from: covered - start,
        });
    }
    Ok(out)
}

fn to_tensor<T: Scalar>(patches: &[Patch<T>]) -> Tensor4<T> {
    let frames: Vec<&[T]> = patches.iter().map(|p| p.data()).collect();
    Tensor4::stack(&frames, [3, PATCH_SIZE, PATCH_SIZE])
}

/// Network input for the transitions of `span`: raw differences, the span
/// statistics and the appearance of the frames involved.
pub fn window_input<T: Scalar>(prep: &Prepared<T>, span: &WindowSpan) -> Result<NetInput<T>> {
    let diffs = &prep.diffs[span.start..span.start + span.len];
    let frames = &prep.patches[span.start..=span.start + span.len];
    NetInput::new(
        to_tensor(diffs),
        *prep.stats_at(span.start),
        to_tensor(std::slice::from_ref(&appearance(frames)?)),
    )
}

/// Predicted pulse derivative for every transition of the sequence.
pub fn infer<T: Scalar>(
    prep: &Prepared<T>,
    w: &NetworkWeights<T>,
    opts: &ModelOptions,
    window: usize,
) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(prep.transitions());
    for span in plan_windows(prep.transitions(), window)? {
        let values = forward(&window_input(prep, &span)?, w, opts, None)?;
        out.extend(values[span.keep_from..].iter().map(|v| v.as_f64()));
    }
    debug_assert_eq!(out.len(), prep.transitions());
    Ok(out)
}

/// Integrates a derivative stream back to a unit-variance pulse and
/// band-limits it to the heart-rate band.
pub fn reconstruct(derivative: &[f64], fps: f64) -> Result<BvpSignal<f64>> {
    let raw = integrate(&[derivative], fps)?;
    BvpSignal::new(bandpass(&raw.samples, fps, HR_BAND[0], HR_BAND[1]), fps)
}

/// Ground-truth pulse value at every frame, resampled to the frame rate if
/// needed.
pub fn frame_truth<T: Scalar>(seq: &FrameSequence<T>) -> Result<Vec<f64>> {
    let Some(gt) = seq.ground_truth() else {
        return Err(Error::validation("sequence has no ground-truth pulse"));
    };
    let gt = if (gt.rate - seq.fps()).abs() > 1e-9 {
        resample(gt, seq.fps())?
    } else {
        gt.clone()
    };
    if gt.len() < seq.len() {
        return Err(Error::InsufficientData(format!(
            "ground truth covers {} of {} frames",
            gt.len(),
            seq.len()
        )));
    }
    Ok(gt.samples[..seq.len()].iter().map(|v| v.as_f64()).collect())
}

/// Training windows for `seq`, with the pulse's first differences as
/// targets, standardized over the same spans as the inputs.
pub fn training_samples<T: Scalar>(
    seq: &FrameSequence<T>,
    cfg: &PipelineConfig,
) -> Result<Vec<Sample<T>>> {
    let prep = prepare(seq, cfg)?;
    let truth = frame_truth(seq)?;
    let dp: Vec<f64> = truth.windows(2).map(|w| w[1] - w[0]).collect();
    let span_len = cfg.span_windows * (cfg.window - 1);
    let mut target = vec![0.0; dp.len()];
    for (a, b) in spans(dp.len(), span_len) {
        let part = &dp[a..b];
        let m = part.iter().sum::<f64>() / part.len() as f64;
        let sd = (part.iter().map(|v| (v - m).powi(2)).sum::<f64>() / part.len() as f64).sqrt();
        let sd = if sd > 1e-12 { sd } else { 1.0 };
        for (t, v) in target[a..b].iter_mut().zip(part) {
            *t = (v - m) / sd;
        }
    }
    let bounds = spans(dp.len(), span_len);
    plan_windows(prep.transitions(), cfg.window)?
        .iter()
        .map(|span| {
            Ok(Sample {
                input: window_input(&prep, span)?,
                target: target[span.start..span.start + span.len]
                    .iter()
                    .map(|v| T::lit(*v))
                    .collect(),
                stretch: bounds
                    .iter()
                    .position(|&(a, b)| (a..b).contains(&span.start))
                    .unwrap_or(0),
                overlap: span.keep_from,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HrWindow {
    pub start_s: f64,
    pub end_s: f64,
    pub pred_bpm: f64,
    pub true_bpm: Option<f64>,
}

fn segment<T: Scalar>(sig: &BvpSignal<T>, start_s: f64, end_s: f64) -> Result<BvpSignal<T>> {
    let a = ((start_s * sig.rate).round() as usize).min(sig.len());
    let b = ((end_s * sig.rate).round() as usize).min(sig.len());
    BvpSignal::new(sig.samples[a..b].to_vec(), sig.rate)
}

/// Heart rate over sliding windows of `window_s` seconds every `hop_s`
/// seconds. A signal shorter than one window is measured whole.
pub fn hr_windows<T: Scalar>(
    pred: &BvpSignal<f64>,
    truth: Option<&BvpSignal<T>>,
    window_s: f64,
    hop_s: f64,
) -> Result<Vec<HrWindow>> {
    let total = pred.duration_s();
    let mut bounds = Vec::new();
    if total <= window_s {
        bounds.push((0.0, total));
    } else {
        let mut start = 0.0;
        while start + window_s <= total + 1e-9 {
            bounds.push((start, start + window_s));
            start += hop_s;
        }
    }
    bounds
        .into_iter()
        .map(|(a, b)| {
            let pred_bpm = estimate_hr(&segment(pred, a, b)?, HR_BAND)?.bpm;
            let true_bpm = match truth {
                Some(t) => Some(estimate_hr(&segment(t, a, b)?, HR_BAND)?.bpm),
                None => None,
            };
            Ok(HrWindow {
                start_s: a,
                end_s: b,
                pred_bpm,
                true_bpm,
            })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunOutput {
    pub derivative: Vec<f64>,
    pub bvp: BvpSignal<f64>,
    pub hr: Vec<HrWindow>,
    /// Heart rate of the whole reconstructed signal.
    pub bpm: f64,
    pub filled_frames: usize,
}

/// Full estimation on one sequence. `infer_window` overrides the window
/// length used for inference only.
pub fn run<T: Scalar>(
    seq: &FrameSequence<T>,
    w: &NetworkWeights<T>,
    opts: &ModelOptions,
    cfg: &PipelineConfig,
    infer_window: Option<usize>,
) -> Result<RunOutput> {
    let prep = prepare(seq, cfg)?;
    let derivative = infer(&prep, w, opts, infer_window.unwrap_or(cfg.window))?;
    let bvp = reconstruct(&derivative, seq.fps())?;
    let hr = hr_windows(&bvp, seq.ground_truth(), cfg.hr_window_s, cfg.hr_hop_s)?;
    let bpm = estimate_hr(&bvp, HR_BAND)?.bpm;
    Ok(RunOutput {
        derivative,
        bvp,
        hr,
        bpm,
        filled_frames: prep.filled.iter().filter(|f| **f).count(),
    })
}

/// Recording setup for one synthetic video.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub hr_bpm: f64,
    pub hrv_jitter_ms: f64,
    pub duration_s: f64,
    pub waveform: Waveform,
    pub optics: OpticalParams,
    pub noise: NoiseParams,
    pub geometry: Geometry,
}

impl Default for SynthSpec {
    fn default() -> Self {
        Self {
            hr_bpm: 72.0,
            hrv_jitter_ms: 20.0,
            duration_s: 20.0,
            waveform: Waveform::DoubleGaussianPulse,
            optics: OpticalParams::default(),
            noise: NoiseParams::default(),
            geometry: Geometry::default(),
        }
    }
}

/// Renders one video. `seed` drives both the beat schedule and the sensor
/// noise.
pub fn synth_video<T: Scalar>(spec: &SynthSpec, seed: u64) -> Result<FrameSequence<T>> {
    let pulse = PulseSpec {
        hr_bpm: spec.hr_bpm,
        hrv_jitter_ms: spec.hrv_jitter_ms,
        duration_s: spec.duration_s,
        rate: spec.geometry.fps,
        waveform: spec.waveform,
    };
    let bvp = generate_pulse::<f64>(&pulse, seed)?;
    let noise = NoiseParams {
        seed: spec.noise.seed ^ seed.wrapping_mul(0x9E37_79B9_7F4A_7C15),
        ..spec.noise
    };
    render_video(&bvp, &spec.optics, &noise, &spec.geometry)
}

/// Size and variability of a synthetic training or test set. Each video
/// draws its heart rate, motion amplitude, lighting drift amplitude and
/// sensor noise uniformly from the given ranges, and random starting phases
/// for the two oscillations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CorpusSpec {
    pub videos: usize,
    pub duration_s: f64,
    pub hr_range: [f64; 2],
    pub motion_range: [f64; 2],
    pub drift_range: [f64; 2],
    pub sigma_range: [f64; 2],
    /// Render a new corpus for every training epoch.
    pub redraw_each_epoch: bool,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            videos: 12,
            duration_s: 20.0,
            hr_range: [40.0, 150.0],
            motion_range: [0.0, 0.0],
            drift_range: [0.1, 0.1],
            sigma_range: [0.01, 0.01],
            redraw_each_epoch: false,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, r) in [
            ("hr_range", self.hr_range),
            ("motion_range", self.motion_range),
            ("drift_range", self.drift_range),
            ("sigma_range", self.sigma_range),
        ] {
            if !(r[0] <= r[1]) || r[0] < 0.0 {
                return Err(Error::validation(format!(
                    "{name} must be ordered and non-negative"
                )));
            }
        }
        if self.videos == 0 || !(self.duration_s > 0.0) {
            return Err(Error::validation(
                "corpus needs videos > 0 and duration_s > 0",
            ));
        }
        Ok(())
    }

    /// The spec that reproduces `scenario` conditions exactly.
    pub fn fixed(videos: usize, duration_s: f64, hr_range: [f64; 2], spec: &SynthSpec) -> Self {
        Self {
            videos,
            duration_s,
            hr_range,
            motion_range: [spec.optics.motion.amp; 2],
            drift_range: [spec.optics.illum_drift.amp; 2],
            sigma_range: [spec.noise.sensor_sigma; 2],
            redraw_each_epoch: false,
        }
    }
}

fn draw(rng: &mut ChaCha8Rng, r: [f64; 2]) -> f64 {
    if r[0] == r[1] {
        r[0]
    } else {
        rng.gen_range(r[0]..r[1])
    }
}

/// Videos rendered from `base` with per-video parameters drawn as described
/// by `corpus`.
pub fn synthetic_corpus<T: Scalar>(
    base: &SynthSpec,
    corpus: &CorpusSpec,
    seed: u64,
) -> Result<Vec<FrameSequence<T>>> {
    corpus.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..corpus.videos)
        .map(|_| {
            let mut spec = SynthSpec {
                duration_s: corpus.duration_s,
                ..*base
            };
            spec.hr_bpm = draw(&mut rng, corpus.hr_range);
            spec.optics.motion.amp = draw(&mut rng, corpus.motion_range);
            spec.optics.illum_drift.amp = draw(&mut rng, corpus.drift_range);
            spec.noise.sensor_sigma = draw(&mut rng, corpus.sigma_range);
            spec.optics.illum_drift.phase = rng.gen();
            spec.optics.motion.phase = rng.gen();
            synth_video(&spec, rng.gen())
        })
        .collect()
}

/// Training samples pooled over a corpus.
pub fn corpus_samples<T: Scalar>(
    corpus: &[FrameSequence<T>],
    cfg: &PipelineConfig,
) -> Result<Vec<Sample<T>>> {
    let mut out: Vec<Sample<T>> = Vec::new();
    for seq in corpus {
        let first = out.last().map_or(0, |s| s.stretch + 1);
        out.extend(training_samples(seq, cfg)?.into_iter().map(|mut s| {
            s.stretch += first;
            s
        }));
    }
    Ok(out)
}

/// Training on rendered videos.
#[derive(Debug, Clone, Copy)]
pub struct SyntheticTraining<'a> {
    pub base: &'a SynthSpec,
    pub corpus: &'a CorpusSpec,
    pub pipeline: &'a PipelineConfig,
    pub model: &'a ModelOptions,
    pub train: &'a TrainConfig,
    /// Seed of the corpus draws.
    pub seed: u64,
}

impl SyntheticTraining<'_> {
    fn samples<T: Scalar>(&self, draw: u64) -> Result<Vec<Sample<T>>> {
        let seed = self
            .seed
            .wrapping_add(draw.wrapping_mul(0x9E37_79B9_7F4A_7C15));
        corpus_samples(
            &synthetic_corpus::<T>(self.base, self.corpus, seed)?,
            self.pipeline,
        )
    }

    /// Trains `init` and returns the weights, the report and the number of
    /// windows per epoch. With `redraw_each_epoch` every epoch sees a newly
    /// rendered corpus and the reported losses are measured on the first
    /// draw, which is never trained on.
    pub fn run<T: Scalar>(
        &self,
        init: NetworkWeights<T>,
        mut on_epoch: impl FnMut(&EpochLog),
    ) -> Result<(NetworkWeights<T>, TrainReport, usize)> {
        let first = self.samples::<T>(0)?;
        let count = first.len();
        if !self.corpus.redraw_each_epoch {
            let (w, report) = train(&first, init, self.model, self.train, on_epoch)?;
            return Ok((w, report, count));
        }
        let initial_loss = dataset_loss(&first, &init, self.model)?;
        let mut trainer = Trainer::new(init, self.model, self.train)?;
        let mut epochs = Vec::with_capacity(self.train.epochs);
        for e in 0..self.train.epochs {
            let log = trainer.epoch(&self.samples::<T>(e as u64 + 1)?)?;
            on_epoch(&log);
            epochs.push(log);
        }
        let w = trainer.into_weights();
        let final_loss = dataset_loss(&first, &w, self.model)?;
        let report = TrainReport {
            epochs,
            initial_loss,
            final_loss,
        };
        Ok((w, report, count))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::pearson;
    use crate::signal::Frame;
    use crate::stnet::ArchConfig;

    #[test]
    fn windows_tile_the_stream() {
        let w = plan_windows(29, 10).unwrap();
        assert_eq!(w.len(), 4);
        assert_eq!(
            w[3],
            WindowSpan {
                start: 20,
                len: 9,
                keep_from: 7
            }
        );
        let kept: usize = w.iter().map(|s| s.len - s.keep_from).sum();
        assert_eq!(kept, 29);

        let exact = plan_windows(27, 10).unwrap();
        assert!(exact.iter().all(|s| s.keep_from == 0));
        assert_eq!(
            plan_windows(5, 10).unwrap(),
            vec![WindowSpan {
                start: 0,
                len: 5,
                keep_from: 0
            }]
        );
        assert!(plan_windows(2, 10).is_err());
        assert!(plan_windows(20, 3).is_err());
    }

    #[test]
    fn spans_absorb_short_tails() {
        assert_eq!(spans(100, 40), vec![(0, 40), (40, 80), (80, 100)]);
        assert_eq!(spans(90, 40), vec![(0, 40), (40, 90)]);
        assert_eq!(spans(100, 30), vec![(0, 30), (30, 60), (60, 100)]);
        assert_eq!(spans(10, 40), vec![(0, 10)]);
    }

    #[test]
    fn missing_boxes_borrow_the_nearest_detection() {
        let frames = (0..6)
            .map(|i| Frame::uniform(8, 8, [0.5f32; 3], i as f64 / 30.0).unwrap())
            .collect();
        let a = FaceBox::new(0.0, 0.0, 4.0, 4.0);
        let b = FaceBox::new(2.0, 2.0, 4.0, 4.0);
        let boxes = vec![
            FaceBox::absent(),
            a,
            FaceBox::absent(),
            FaceBox::absent(),
            FaceBox::absent(),
            b,
        ];
        let seq = FrameSequence::new(frames, 30.0, Some(boxes)).unwrap();
        let (filled, flags) = fill_boxes(&seq);
        assert_eq!(filled, vec![a, a, a, a, b, b]);
        assert_eq!(flags, vec![true, false, true, true, true, false]);
    }

    fn clean_spec(hr: f64, seconds: f64) -> SynthSpec {
        let mut spec = SynthSpec {
            hr_bpm: hr,
            duration_s: seconds,
            ..Default::default()
        };
        spec.optics.illum_drift.amp = 0.0;
        spec.noise.sensor_sigma = 0.0;
        spec.noise.quantize = false;
        spec
    }

    #[test]
    fn window_inputs_cover_every_transition() {
        let seq = synth_video::<f32>(&clean_spec(72.0, 2.0), 1).unwrap();
        let cfg = PipelineConfig::default();
        let prep = prepare(&seq, &cfg).unwrap();
        assert_eq!(prep.transitions(), 59);
        let w = NetworkWeights::<f32>::init(ArchConfig::compact(), 3).unwrap();
        let out = infer(&prep, &w, &ModelOptions::default(), cfg.window).unwrap();
        assert_eq!(out.len(), 59);
        assert!(out.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn targets_are_standardized_pulse_differences() {
        let seq = synth_video::<f64>(&clean_spec(90.0, 6.0), 4).unwrap();
        let cfg = PipelineConfig::default();
        let samples = training_samples(&seq, &cfg).unwrap();
        assert_eq!(samples.len(), 20);
        // the last window repeats one transition of its predecessor
        let mut target: Vec<f64> = samples[..19]
            .iter()
            .flat_map(|s| s.target.clone())
            .collect();
        target.extend(&samples[19].target[1..]);
        let m = target.iter().sum::<f64>() / target.len() as f64;
        let var = target.iter().map(|v| (v - m).powi(2)).sum::<f64>() / target.len() as f64;
        assert!(m.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);

        // the green mean of the raw differences follows the targets
        let green: Vec<f64> = samples
            .iter()
            .flat_map(|s| {
                (0..s.input.len())
                    .map(|t| s.input.diffs.frame(t)[1296..2592].iter().sum::<f64>())
                    .collect::<Vec<_>>()
            })
            .collect();
        let target: Vec<f64> = samples.iter().flat_map(|s| s.target.clone()).collect();
        let (r, _) = pearson(&green, &target);
        assert!(r > 0.95, "{r}");
    }

    #[test]
    fn reconstructing_the_true_derivative_recovers_heart_rate() {
        let seq = synth_video::<f32>(&clean_spec(66.0, 30.0), 9).unwrap();
        let truth = frame_truth(&seq).unwrap();
        let dp: Vec<f64> = truth.windows(2).map(|w| w[1] - w[0]).collect();
        let bvp = reconstruct(&dp, 30.0).unwrap();
        let hr = hr_windows(&bvp, seq.ground_truth(), 20.0, 5.0).unwrap();
        assert_eq!(hr.len(), 2);
        for h in hr {
            assert!((h.pred_bpm - h.true_bpm.unwrap()).abs() < 1.0);
        }
    }

    #[test]
    fn corpus_is_reproducible() {
        let spec = clean_spec(72.0, 1.0);
        let corpus = CorpusSpec {
            videos: 3,
            duration_s: 1.0,
            ..Default::default()
        };
        let a = synthetic_corpus::<f32>(&spec, &corpus, 5).unwrap();
        let b = synthetic_corpus::<f32>(&spec, &corpus, 5).unwrap();
        assert_eq!(a, b);
        assert_ne!(a[0].ground_truth(), a[1].ground_truth());
    }

    #[test]
    fn redrawn_corpora_train_reproducibly() {
        let spec = clean_spec(72.0, 1.0);
        let arch = ArchConfig {
            input_size: 36,
            conv_channels: 2,
            out_channels: 2,
            merge_channels: 2,
            hidden: 4,
            pool_head: false,
        };
        let fit = |redraw: bool| {
            let corpus = CorpusSpec {
                videos: 1,
                duration_s: 1.0,
                redraw_each_epoch: redraw,
                ..Default::default()
            };
            let tc = TrainConfig {
                epochs: 2,
                batch_size: 2,
                ..Default::default()
            };
            let plan = SyntheticTraining {
                base: &spec,
                corpus: &corpus,
                pipeline: &PipelineConfig::default(),
                model: &ModelOptions::default(),
                train: &tc,
                seed: 3,
            };
            let init = NetworkWeights::<f32>::init(arch, 1).unwrap();
            plan.run(init, |_| {}).unwrap()
        };
        let (w1, r1, n) = fit(true);
        let (w2, r2, _) = fit(true);
        assert_eq!((w1.clone(), r1.clone()), (w2, r2));
        assert_eq!(n, 4);
        assert_eq!(r1.epochs.len(), 2);
        // the same first draw, but later epochs see other videos
        let (w3, r3, _) = fit(false);
        assert_eq!(r3.initial_loss, r1.initial_loss);
        assert_ne!(w3, w1);
    }
}
