//! Hand-crafted pulse extractors working on the mean face color: GREEN,
//! CHROM and POS.

use crate::analysis::HR_BAND;
use crate::dsp::{bandpass, detrend};
use crate::error::{Error, Result};
use crate::scalar::{mean, std_dev, Scalar};
use crate::signal::{BvpSignal, FaceBox, FrameSequence, GREEN};

/// Mean RGB inside the face box, one triplet per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct RoiTrace {
    pub rgb: Vec<[f64; 3]>,
    pub fps: f64,
    /// Frames whose value was interpolated because the face was missing.
    pub interpolated: Vec<bool>,
}

impl RoiTrace {
    pub fn new(rgb: Vec<[f64; 3]>, fps: f64) -> Result<Self> {
        if rgb.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::validation("trace contains non-finite values"));
        }
        if !(fps > 0.0) {
            return Err(Error::validation("fps must be positive"));
        }
        let interpolated = vec![false; rgb.len()];
        Ok(Self {
            rgb,
            fps,
            interpolated,
        })
    }

    pub fn len(&self) -> usize {
        self.rgb.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rgb.is_empty()
    }

    pub fn any_interpolated(&self) -> bool {
        self.interpolated.contains(&true)
    }

    pub fn channel(&self, c: usize) -> Vec<f64> {
        self.rgb.iter().map(|p| p[c]).collect()
    }
}

fn box_mean<T: Scalar>(seq: &FrameSequence<T>, index: usize, face: &FaceBox) -> [f64; 3] {
    let frame = &seq.frames()[index];
    let (x0, y0, x1, y1) = face.pixel_span(frame.width(), frame.height());
    let mut acc = [0.0; 3];
    for y in y0..y1 {
        for x in x0..x1 {
            for (c, a) in acc.iter_mut().enumerate() {
                *a += frame.get(x, y, c).as_f64();
            }
        }
    }
    let n = ((x1 - x0) * (y1 - y0)).max(1) as f64;
    acc.map(|a| a / n)
}

/// Spatial mean of each frame's face box. Frames without a face are filled
/// by linear interpolation between the nearest detected neighbours (held
/// constant at the ends) and flagged. A sequence without recorded boxes is
/// treated as all face.
pub fn roi_trace<T: Scalar>(seq: &FrameSequence<T>) -> Result<RoiTrace> {
    let n = seq.len();
    let boxes: Vec<FaceBox> = match seq.face_boxes() {
        Some(b) => b.to_vec(),
        None => seq
            .frames()
            .iter()
            .map(|f| FaceBox::new(0.0, 0.0, f.width() as f64, f.height() as f64))
            .collect(),
    };
    let known: Vec<usize> = (0..n).filter(|&i| boxes[i].present).collect();
    if known.is_empty() {
        return Err(Error::validation("no face in any frame"));
    }
    let mut rgb = vec![[0.0; 3]; n];
    for &i in &known {
        rgb[i] = box_mean(seq, i, &boxes[i]);
    }
    let mut interpolated = vec![false; n];
    for i in 0..n {
        if boxes[i].present {
            continue;
        }
        interpolated[i] = true;
        let next = known.partition_point(|&k| k < i);
        rgb[i] = match (next.checked_sub(1).map(|p| known[p]), known.get(next)) {
            (Some(a), Some(&b)) => {
                let f = (i - a) as f64 / (b - a) as f64;
                std::array::from_fn(|c| rgb[a][c] + (rgb[b][c] - rgb[a][c]) * f)
            }
            (Some(a), None) => rgb[a],
            (None, Some(&b)) => rgb[b],
            (None, None) => unreachable!("at least one known frame"),
        };
    }
    if interpolated.contains(&true) {
        log::warn!(
            "{} of {n} frames had no face; trace interpolated",
            interpolated.iter().filter(|f| **f).count()
        );
    }
    Ok(RoiTrace {
        rgb,
        fps: seq.fps(),
        interpolated,
    })
}

fn check_len(trace: &RoiTrace, min: usize) -> Result<()> {
    if trace.len() < min {
        return Err(Error::validation(format!(
            "trace of {} frames, need at least {min}",
            trace.len()
        )));
    }
    Ok(())
}

fn band(x: &[f64], fps: f64) -> Vec<f64> {
    bandpass(x, fps, HR_BAND[0], HR_BAND[1])
}

/// Detrended, band-passed green channel.
pub fn green(trace: &RoiTrace) -> Result<BvpSignal<f64>> {
    check_len(trace, 2)?;
    let g = detrend(&trace.channel(GREEN));
    BvpSignal::new(band(&g, trace.fps), trace.fps)
}

/// Channels divided by their temporal mean (zero-mean channels stay zero).
fn mean_normalized(rgb: &[[f64; 3]]) -> [Vec<f64>; 3] {
    std::array::from_fn(|c| {
        let ch: Vec<f64> = rgb.iter().map(|p| p[c]).collect();
        let m = mean(&ch);
        if m.abs() < 1e-12 {
            vec![0.0; ch.len()]
        } else {
            ch.iter().map(|v| v / m).collect()
        }
    })
}

fn ratio(num: &[f64], den: &[f64]) -> f64 {
    let sd = std_dev(den);
    if sd < 1e-12 {
        0.0
    } else {
        std_dev(num) / sd
    }
}

/// Chrominance method: `X = 3R - 2G`, `Y = 1.5R + G - 1.5B` on
/// mean-normalized channels, both band-passed, then `X - (sd X / sd Y) Y`.
pub fn chrom(trace: &RoiTrace) -> Result<BvpSignal<f64>> {
    check_len(trace, 2)?;
    let [r, g, b] = mean_normalized(&trace.rgb);
    let xs: Vec<f64> = (0..r.len()).map(|i| 3.0 * r[i] - 2.0 * g[i]).collect();
    let ys: Vec<f64> = (0..r.len())
        .map(|i| 1.5 * r[i] + g[i] - 1.5 * b[i])
        .collect();
    let (xf, yf) = (band(&xs, trace.fps), band(&ys, trace.fps));
    let alpha = ratio(&xf, &yf);
    BvpSignal::new(
        xf.iter().zip(&yf).map(|(x, y)| x - alpha * y).collect(),
        trace.fps,
    )
}

pub const POS_WINDOW_S: f64 = 1.6;

/// Plane-orthogonal-to-skin method over sliding windows of `window_s`
/// seconds, overlap-added.
pub fn pos(trace: &RoiTrace, window_s: f64) -> Result<BvpSignal<f64>> {
    if !(window_s > 0.0) {
        return Err(Error::validation("window_s must be positive"));
    }
    let l = ((window_s * trace.fps).round() as usize).max(2);
    if l > trace.len() {
        return Err(Error::validation(format!(
            "POS window of {l} frames exceeds the {}-frame trace",
            trace.len()
        )));
    }
    let mut h = vec![0.0; trace.len()];
    for start in 0..=trace.len() - l {
        let [r, g, b] = mean_normalized(&trace.rgb[start..start + l]);
        let s1: Vec<f64> = (0..l).map(|i| g[i] - b[i]).collect();
        let s2: Vec<f64> = (0..l).map(|i| g[i] + b[i] - 2.0 * r[i]).collect();
        let alpha = ratio(&s1, &s2);
        let p: Vec<f64> = s1.iter().zip(&s2).map(|(a, b)| a + alpha * b).collect();
        let m = mean(&p);
        for (i, v) in p.iter().enumerate() {
            h[start + i] += v - m;
        }
    }
    BvpSignal::new(h, trace.fps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::analysis::{estimate_hr, metrics, pearson};
    use crate::signal::Frame;
    use crate::synth::{
        generate_pulse, render_video, Geometry, NoiseParams, OpticalParams, Oscillation, PulseSpec,
    };
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, Normal};
    use std::f64::consts::PI;

    fn fixture<T: Scalar>(
        hr: f64,
        optics: OpticalParams,
        noise: NoiseParams,
        seconds: f64,
    ) -> (FrameSequence<T>, BvpSignal<f64>) {
        let spec = PulseSpec {
            hr_bpm: hr,
            duration_s: seconds,
            ..Default::default()
        };
        let bvp = generate_pulse::<f64>(&spec, 17).unwrap();
        let seq = render_video(&bvp, &optics, &noise, &Geometry::default()).unwrap();
        (seq, bvp)
    }

    fn silent() -> NoiseParams {
        NoiseParams {
            sensor_sigma: 0.0,
            quantize: false,
            seed: 0,
        }
    }

    fn sinusoid_trace(n: usize, fps: f64, amp: f64) -> RoiTrace {
        let rgb = (0..n)
            .map(|i| {
                let s = amp * (2.0 * PI * 1.2 * i as f64 / fps).sin();
                [0.5, 0.4 + s, 0.3]
            })
            .collect();
        RoiTrace::new(rgb, fps).unwrap()
    }

    #[test]
    fn uniform_video_gives_constant_trace_and_zero_outputs() {
        let frames = (0..90)
            .map(|i| Frame::uniform(8, 8, [0.3f32, 0.5, 0.2], i as f64 / 30.0).unwrap())
            .collect();
        let seq = FrameSequence::new(
            frames,
            30.0,
            Some(vec![FaceBox::new(1.0, 1.0, 5.0, 5.0); 90]),
        )
        .unwrap();
        let t = roi_trace(&seq).unwrap();
        assert!(t
            .rgb
            .iter()
            .all(|p| (p[0] - 0.3).abs() < 1e-6 && (p[1] - 0.5).abs() < 1e-6));
        assert!(!t.any_interpolated());
        for out in [
            green(&t).unwrap(),
            chrom(&t).unwrap(),
            pos(&t, POS_WINDOW_S).unwrap(),
        ] {
            assert!(out.samples.iter().all(|v| v.abs() < 1e-9));
        }
    }

    #[test]
    fn missing_boxes_are_interpolated() {
        let frames: Vec<Frame<f32>> = (0..10)
            .map(|i| Frame::uniform(4, 4, [i as f32 * 0.1, 0.5, 0.5], i as f64 / 30.0).unwrap())
            .collect();
        let boxes = (0..10)
            .map(|i| {
                if i % 2 == 0 {
                    FaceBox::new(0.0, 0.0, 4.0, 4.0)
                } else {
                    FaceBox::absent()
                }
            })
            .collect();
        let seq = FrameSequence::new(frames, 30.0, Some(boxes)).unwrap();
        let t = roi_trace(&seq).unwrap();
        assert!(t.any_interpolated());
        assert_eq!(t.interpolated.iter().filter(|f| **f).count(), 5);
        assert!((t.rgb[3][0] - 0.3).abs() < 1e-6);
        // past the last detection the value is held
        assert!((t.rgb[9][0] - 0.8).abs() < 1e-6);

        let frames = (0..3)
            .map(|i| Frame::uniform(4, 4, [0.1f32; 3], i as f64 / 30.0).unwrap())
            .collect();
        let none = FrameSequence::new(frames, 30.0, Some(vec![FaceBox::absent(); 3])).unwrap();
        assert!(roi_trace(&none).is_err());
    }

    #[test]
    fn zero_noise_green_trace_follows_the_pulse() {
        let mut optics = OpticalParams::default();
        optics.illum_drift.amp = 0.0;
        let (seq, bvp) = fixture::<f32>(72.0, optics, silent(), 20.0);
        let t = roi_trace(&seq).unwrap();
        let (r, _) = pearson(&t.channel(GREEN), &bvp.samples);
        assert!(r > 0.99, "{r}");
    }

    #[test]
    fn green_recovers_a_green_sinusoid() {
        let t = sinusoid_trace(900, 30.0, 0.01);
        let out = green(&t).unwrap();
        let truth = t.channel(GREEN);
        // edges carry filter transients; compare the interior
        let (r, _) = pearson(&out.samples[60..840], &truth[60..840]);
        assert!(r > 0.999, "{r}");
    }

    #[test]
    fn green_on_default_optics() {
        let (seq, bvp) =
            fixture::<f32>(84.0, OpticalParams::default(), NoiseParams::default(), 30.0);
        let est = estimate_hr(&green(&roi_trace(&seq).unwrap()).unwrap(), HR_BAND).unwrap();
        let truth = estimate_hr(&bvp, HR_BAND).unwrap();
        assert!(
            (est.bpm - 84.0).abs() <= 2.0 && (truth.bpm - 84.0).abs() <= 2.0,
            "{}",
            est.bpm
        );
    }

    #[test]
    fn chrom_on_zero_noise_fixture() {
        let (seq, _) = fixture::<f32>(96.0, OpticalParams::default(), silent(), 30.0);
        let est = estimate_hr(&chrom(&roi_trace(&seq).unwrap()).unwrap(), HR_BAND).unwrap();
        assert!((est.bpm - 96.0).abs() <= 2.0, "{}", est.bpm);
    }

    #[test]
    fn chrom_on_white_noise_is_near_the_band_ratio() {
        let baseline = 10.0 * (0.4f64 / 2.9).log10();
        let normal = Normal::new(0.0, 0.01).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let trials = 20;
        let mut acc = 0.0;
        for _ in 0..trials {
            let rgb = (0..1800)
                .map(|_| std::array::from_fn(|c| 0.4 + 0.1 * c as f64 + normal.sample(&mut rng)))
                .collect();
            let out = chrom(&RoiTrace::new(rgb, 30.0).unwrap()).unwrap();
            acc += metrics(&[72.0], &[72.0], Some(&out), None, "")
                .unwrap()
                .snr_db
                .unwrap();
        }
        let mean = acc / trials as f64;
        assert!((mean - baseline).abs() < 1.5, "{mean} vs {baseline}");
    }

    #[test]
    fn pos_cancels_pure_illumination_changes() {
        let mut optics = OpticalParams::default();
        optics.u_p = [0.0; 3];
        optics.illum_drift = Oscillation::new(0.2, 1.3);
        let (seq, _) = fixture::<f64>(72.0, optics, silent(), 20.0);
        let out = pos(&roi_trace(&seq).unwrap(), POS_WINDOW_S).unwrap();
        let peak = out.samples.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(peak < 1e-9, "{peak}");
    }

    #[test]
    fn pos_beats_green_under_in_band_lighting_flicker() {
        let mut optics = OpticalParams::default();
        optics.illum_drift = Oscillation::new(0.2, 1.7);
        let (seq, bvp) = fixture::<f32>(72.0, optics, NoiseParams::default(), 30.0);
        let t = roi_trace(&seq).unwrap();
        let truth = estimate_hr(&bvp, HR_BAND).unwrap().bpm;
        let err = |b: BvpSignal<f64>| (estimate_hr(&b, HR_BAND).unwrap().bpm - truth).abs();
        let (e_pos, e_green) = (err(pos(&t, POS_WINDOW_S).unwrap()), err(green(&t).unwrap()));
        assert!(e_pos < e_green, "pos {e_pos} green {e_green}");
        assert!(e_pos <= 2.0);
    }

    #[test]
    fn pos_window_must_fit() {
        let t = sinusoid_trace(40, 30.0, 0.01);
        assert!(pos(&t, POS_WINDOW_S).is_err());
        assert!(pos(&t, 1.0).is_ok());
    }

    #[test]
    fn heart_rate_ignores_trace_scaling() {
        let (seq, _) = fixture::<f32>(66.0, OpticalParams::default(), NoiseParams::default(), 20.0);
        let t = roi_trace(&seq).unwrap();
        let scaled =
            RoiTrace::new(t.rgb.iter().map(|p| p.map(|v| v * 3.7)).collect(), t.fps).unwrap();
        type Extractor = fn(&RoiTrace) -> Result<BvpSignal<f64>>;
        let extractors: [Extractor; 3] = [green, chrom, |t| pos(t, POS_WINDOW_S)];
        for f in extractors {
            let a = estimate_hr(&f(&t).unwrap(), HR_BAND).unwrap().bpm;
            let b = estimate_hr(&f(&scaled).unwrap(), HR_BAND).unwrap().bpm;
            assert!((a - b).abs() < 1e-9);
        }
    }
}
