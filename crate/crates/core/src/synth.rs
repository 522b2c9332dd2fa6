//! Synthetic ground truth: pulse waveforms with a known beat schedule, and
//! facial video rendered through a dichromatic reflection model
//! `C(t) = I(t) * (v_s(t) + v_d(t)) + v_n(t)` with
//! `v_d = u_d * d0 + u_p * p(t)` and `v_s = u_s * (s0 + phi(t))`.

use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::{BvpSignal, FaceBox, Frame, FrameSequence};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Waveform {
    Sinusoid,
    DoubleGaussianPulse,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PulseSpec {
    pub hr_bpm: f64,
    pub hrv_jitter_ms: f64,
    pub duration_s: f64,
    pub rate: f64,
    pub waveform: Waveform,
}

impl Default for PulseSpec {
    fn default() -> Self {
        Self {
            hr_bpm: 72.0,
            hrv_jitter_ms: 0.0,
            duration_s: 10.0,
            rate: 30.0,
            waveform: Waveform::Sinusoid,
        }
    }
}

impl PulseSpec {
    pub fn validate(&self) -> Result<()> {
        if !(30.0..=240.0).contains(&self.hr_bpm) {
            return Err(Error::validation(format!(
                "hr_bpm {} outside [30, 240]",
                self.hr_bpm
            )));
        }
        if !(self.hrv_jitter_ms >= 0.0) {
            return Err(Error::validation("hrv_jitter_ms must be >= 0"));
        }
        if !(self.duration_s > 0.0) || !(self.rate > 0.0) {
            return Err(Error::validation("duration_s and rate must be positive"));
        }
        Ok(())
    }
}

/// A generated pulse together with the beat schedule that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct PulseTrain<T> {
    pub signal: BvpSignal<T>,
    /// Beat (systolic peak) times in seconds, including one beat before
    /// `t = 0` and one after the end so every sample lies between two beats.
    pub beat_times: Vec<f64>,
}

impl<T> PulseTrain<T> {
    /// Beat times that fall inside the signal, `[0, duration)`.
    pub fn beats_in_signal(&self, duration_s: f64) -> Vec<f64> {
        self.beat_times
            .iter()
            .copied()
            .filter(|&t| (0.0..duration_s).contains(&t))
            .collect()
    }

    /// Inter-beat intervals (ms) between consecutive in-signal beats.
    pub fn intervals_ms(&self, duration_s: f64) -> Vec<f64> {
        self.beats_in_signal(duration_s)
            .windows(2)
            .map(|w| (w[1] - w[0]) * 1000.0)
            .collect()
    }
}

pub fn generate_pulse<T: Scalar>(spec: &PulseSpec, seed: u64) -> Result<BvpSignal<T>> {
    generate_pulse_train(spec, seed).map(|t| t.signal)
}

pub fn generate_pulse_train<T: Scalar>(spec: &PulseSpec, seed: u64) -> Result<PulseTrain<T>> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean_ibi = 60.0 / spec.hr_bpm;
    let jitter = Normal::new(0.0, spec.hrv_jitter_ms / 1000.0)
        .map_err(|e| Error::validation(e.to_string()))?;
    let next_ibi = |rng: &mut ChaCha8Rng| {
        let ibi = mean_ibi + jitter.sample(rng);
        ibi.clamp(0.5 * mean_ibi, 1.5 * mean_ibi)
    };

    let phase = rng.gen::<f64>() * mean_ibi;
    let mut beats = vec![phase - next_ibi(&mut rng), phase];
    while *beats.last().unwrap() <= spec.duration_s {
        let last = *beats.last().unwrap();
        beats.push(last + next_ibi(&mut rng));
    }

    let n = (spec.duration_s * spec.rate).round() as usize;
    let mut k = 0usize;
    let mut samples: Vec<f64> = (0..n)
        .map(|i| {
            let t = i as f64 / spec.rate;
            while beats[k + 1] <= t {
                k += 1;
            }
            let u = (t - beats[k]) / (beats[k + 1] - beats[k]);
            waveform_at(spec.waveform, u)
        })
        .collect();
    if spec.waveform == Waveform::DoubleGaussianPulse && !samples.is_empty() {
        let mu = samples.iter().sum::<f64>() / samples.len() as f64;
        samples.iter_mut().for_each(|s| *s -= mu);
    }
    let signal = BvpSignal::new(samples.into_iter().map(T::lit).collect(), spec.rate)?;
    Ok(PulseTrain {
        signal,
        beat_times: beats,
    })
}

/// One cardiac cycle evaluated at phase `u` in `[0, 1)`, peak at `u = 0`.
fn waveform_at(shape: Waveform, u: f64) -> f64 {
    match shape {
        Waveform::Sinusoid => (2.0 * PI * u).cos(),
        Waveform::DoubleGaussianPulse => {
            let centered = if u < 0.5 { u } else { u - 1.0 };
            let systolic = (-centered * centered / (2.0 * 0.12 * 0.12)).exp();
            let dicrotic = 0.4 * (-(u - 0.35).powi(2) / (2.0 * 0.12 * 0.12)).exp();
            systolic + dicrotic
        }
    }
}

/// Linear-interpolation resampling to a new rate.
pub fn resample<T: Scalar>(bvp: &BvpSignal<T>, rate: f64) -> Result<BvpSignal<T>> {
    if bvp.len() < 2 {
        return Err(Error::InsufficientData("resampling needs 2 samples".into()));
    }
    let n = (bvp.duration_s() * rate).floor() as usize;
    let last = bvp.len() - 1;
    let samples = (0..n)
        .map(|i| {
            let pos = (i as f64 / rate * bvp.rate).min(last as f64);
            let i0 = (pos.floor() as usize).min(last);
            let i1 = (i0 + 1).min(last);
            let frac = T::lit(pos - i0 as f64);
            bvp.samples[i0] + (bvp.samples[i1] - bvp.samples[i0]) * frac
        })
        .collect();
    BvpSignal::new(samples, rate)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Oscillation {
    pub amp: f64,
    pub freq_hz: f64,
    /// Starting phase in cycles.
    #[serde(default)]
    pub phase: f64,
}

impl Oscillation {
    pub fn new(amp: f64, freq_hz: f64) -> Self {
        Self {
            amp,
            freq_hz,
            phase: 0.0,
        }
    }

    pub fn at(&self, t: f64) -> f64 {
        self.amp * (2.0 * PI * (self.freq_hz * t + self.phase)).sin()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OpticalParams {
    /// Unit color vector of skin tissue.
    pub u_d: [f64; 3],
    /// Stationary diffuse strength.
    pub d0: f64,
    /// Pulsatile strength per channel.
    pub u_p: [f64; 3],
    /// Unit color vector of the light source.
    pub u_s: [f64; 3],
    /// Stationary specular strength.
    pub s0: f64,
    /// Luminance modulation, `I(t) = 1 + amp * sin(2 pi f t)`.
    pub illum_drift: Oscillation,
    /// Non-physiological specular term `phi(t) = amp * sin(2 pi f t)`.
    pub motion: Oscillation,
    /// Per-channel multiplicative gains (colored light scenarios).
    pub channel_gain: [f64; 3],
}

pub const DEFAULT_PULSE_RATIO: f64 = 0.01;

impl Default for OpticalParams {
    fn default() -> Self {
        let d0 = 0.55;
        Self {
            u_d: normalized([0.80, 0.57, 0.45]),
            d0,
            u_p: scaled(normalized([0.33, 0.77, 0.53]), DEFAULT_PULSE_RATIO * d0),
            u_s: normalized([1.0, 1.0, 1.0]),
            s0: 0.08,
            illum_drift: Oscillation::new(0.1, 0.05),
            motion: Oscillation::new(0.0, 0.35),
            channel_gain: [1.0; 3],
        }
    }
}

impl OpticalParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("u_d", self.u_d), ("u_s", self.u_s)] {
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            if (norm - 1.0).abs() > 1e-6 {
                return Err(Error::validation(format!(
                    "{name} must have unit norm, got {norm}"
                )));
            }
        }
        if self.d0 < 0.0 || self.s0 < 0.0 {
            return Err(Error::validation("d0 and s0 must be non-negative"));
        }
        Ok(())
    }

    /// Luminance intensity `I(t)`.
    pub fn intensity(&self, t: f64) -> f64 {
        1.0 + self.illum_drift.at(t)
    }

    /// Noise-free, unclamped face color at time `t` for pulse value `p`.
    pub fn face_color(&self, t: f64, p: f64) -> [f64; 3] {
        let i = self.intensity(t);
        let phi = self.motion.at(t);
        std::array::from_fn(|c| {
            let specular = self.u_s[c] * (self.s0 + phi);
            let diffuse = self.u_d[c] * self.d0 + self.u_p[c] * p;
            self.channel_gain[c] * i * (specular + diffuse)
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NoiseParams {
    pub sensor_sigma: f64,
    pub quantize: bool,
    pub seed: u64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        Self {
            sensor_sigma: 0.01,
            quantize: true,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Geometry {
    pub width: usize,
    pub height: usize,
    pub face_box: FaceBox,
    pub fps: f64,
    pub background: [f64; 3],
}

impl Default for Geometry {
    fn default() -> Self {
        Self {
            width: 64,
            height: 64,
            face_box: FaceBox::new(12.0, 12.0, 40.0, 40.0),
            fps: 30.0,
            background: [0.22, 0.27, 0.33],
        }
    }
}

/// Renders `bvp` into a frame sequence with the face box recorded on every
/// frame and the pulse attached as ground truth.
pub fn render_video<T: Scalar>(
    bvp: &BvpSignal<f64>,
    optics: &OpticalParams,
    noise: &NoiseParams,
    geometry: &Geometry,
) -> Result<FrameSequence<T>> {
    optics.validate()?;
    if noise.sensor_sigma < 0.0 {
        return Err(Error::validation("sensor_sigma must be >= 0"));
    }
    if (bvp.rate - geometry.fps).abs() > 1e-9 {
        return Err(Error::validation(format!(
            "pulse rate {} differs from fps {}; resample first",
            bvp.rate, geometry.fps
        )));
    }
    if !geometry.face_box.present {
        return Err(Error::validation("render needs a present face box"));
    }
    geometry
        .face_box
        .validate(geometry.width, geometry.height)?;

    let (w, h) = (geometry.width, geometry.height);
    let (x0, y0, x1, y1) = geometry.face_box.pixel_span(w, h);
    let mut rng = ChaCha8Rng::seed_from_u64(noise.seed);
    let normal = Normal::new(0.0, noise.sensor_sigma.max(0.0))
        .map_err(|e| Error::validation(e.to_string()))?;
    let background: [f64; 3] =
        std::array::from_fn(|c| geometry.channel_background(optics.channel_gain, c));

    let frames = bvp
        .samples
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let t = i as f64 / geometry.fps;
            let face = optics.face_color(t, p);
            let mut pixels = Vec::with_capacity(w * h * 3);
            for y in 0..h {
                for x in 0..w {
                    let inside = (x0..x1).contains(&x) && (y0..y1).contains(&y);
                    let base = if inside { &face } else { &background };
                    for &v in base {
                        let n = if noise.sensor_sigma > 0.0 {
                            normal.sample(&mut rng)
                        } else {
                            0.0
                        };
                        let mut value = (v + n).clamp(0.0, 1.0);
                        if noise.quantize {
                            value = (value * 255.0).round() / 255.0;
                        }
                        pixels.push(T::lit(value));
                    }
                }
            }
            Frame::new(w, h, pixels, t)
        })
        .collect::<Result<Vec<_>>>()?;

    let boxes = vec![geometry.face_box; frames.len()];
    Ok(FrameSequence::new(frames, geometry.fps, Some(boxes))?.with_ground_truth(bvp.cast()))
}

impl Geometry {
    fn channel_background(&self, gain: [f64; 3], c: usize) -> f64 {
        gain[c] * self.background[c]
    }
}

/// Recording conditions used by the benchmark tables.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Scenario {
    Clean,
    Red,
    Green,
    BlueGreen,
    Motion,
}

impl Scenario {
    pub const ALL: [Scenario; 5] = [
        Scenario::Clean,
        Scenario::Red,
        Scenario::Green,
        Scenario::BlueGreen,
        Scenario::Motion,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            Scenario::Clean => "clean",
            Scenario::Red => "red",
            Scenario::Green => "green",
            Scenario::BlueGreen => "blue-green",
            Scenario::Motion => "motion",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|sc| sc.name() == s)
    }

    /// Applies the scenario on top of the given optics and noise.
    pub fn apply(&self, optics: &mut OpticalParams, noise: &mut NoiseParams) {
        match self {
            Scenario::Clean => {}
            Scenario::Red => optics.channel_gain = [1.0, 0.35, 0.3],
            Scenario::Green => optics.channel_gain = [0.35, 1.0, 0.35],
            Scenario::BlueGreen => optics.channel_gain = [0.3, 0.8, 0.9],
            Scenario::Motion => {
                optics.motion.amp = 0.3;
                optics.illum_drift.amp = 0.2;
                noise.sensor_sigma = noise.sensor_sigma.max(0.05);
            }
        }
    }
}

fn normalized(v: [f64; 3]) -> [f64; 3] {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.map(|x| x / n)
}

fn scaled(v: [f64; 3], k: f64) -> [f64; 3] {
    v.map(|x| x * k)
}
