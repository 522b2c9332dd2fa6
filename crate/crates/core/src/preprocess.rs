//! Face crop/resize, frame differencing and the learnable normalization that
//! together produce the `3 x 36 x 36` network inputs.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::{FaceBox, Frame};

pub const PATCH_SIZE: usize = 36;
pub const PATCH_CHANNELS: usize = 3;
pub const PATCH_AREA: usize = PATCH_SIZE * PATCH_SIZE;
pub const PATCH_LEN: usize = PATCH_CHANNELS * PATCH_AREA;

/// Added to a vanishing standard deviation.
pub const STD_EPSILON: f64 = 1e-5;
/// Standard deviations at or below this count as vanishing.
const STD_FLOOR: f64 = 1e-9;

/// A channel-major `3 x 36 x 36` image tile. Frame differences use the same
/// type, indexed by the later of the two frames.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch<T> {
    data: Vec<T>,
    pub source_frame_index: usize,
}

impl<T: Scalar> Patch<T> {
    pub fn new(data: Vec<T>, source_frame_index: usize) -> Result<Self> {
        if data.len() != PATCH_LEN {
            return Err(Error::validation(format!(
                "patch needs {PATCH_LEN} values, got {}",
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::validation("patch contains non-finite values"));
        }
        Ok(Self {
            data,
            source_frame_index,
        })
    }

    pub fn zeros(source_frame_index: usize) -> Self {
        Self {
            data: vec![T::zero(); PATCH_LEN],
            source_frame_index,
        }
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn channel(&self, c: usize) -> &[T] {
        &self.data[c * PATCH_AREA..(c + 1) * PATCH_AREA]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> T {
        self.data[c * PATCH_AREA + y * PATCH_SIZE + x]
    }

    pub fn mean(&self) -> T {
        self.data.iter().copied().sum::<T>() / T::from_usize_(PATCH_LEN)
    }
}

/// Pixel rectangle `[x0, x1) x [y0, y1)` in continuous coordinates covered by
/// `face` after growing each side by `enlarge_ratio / 2` of its length and
/// clamping to the frame.
pub fn crop_region(
    face: &FaceBox,
    width: usize,
    height: usize,
    enlarge_ratio: f64,
) -> Result<[f64; 4]> {
    if !(enlarge_ratio >= 0.0) {
        return Err(Error::validation("enlarge_ratio must be >= 0"));
    }
    let (cx, cy) = (face.x + face.w / 2.0, face.y + face.h / 2.0);
    let (hw, hh) = (
        face.w * (1.0 + enlarge_ratio) / 2.0,
        face.h * (1.0 + enlarge_ratio) / 2.0,
    );
    let x0 = (cx - hw).max(0.0);
    let x1 = (cx + hw).min(width as f64);
    let y0 = (cy - hh).max(0.0);
    let y1 = (cy + hh).min(height as f64);
    if !(x1 - x0 >= 1.0 && y1 - y0 >= 1.0) {
        return Err(Error::validation(format!(
            "face box degenerates to [{x0}, {x1}) x [{y0}, {y1}) after clamping"
        )));
    }
    Ok([x0, y0, x1, y1])
}

/// Crops the (enlarged) face box and resamples it bilinearly to `36 x 36`,
/// with pixel centers aligned. Returns `None` for an absent box.
pub fn crop_resize<T: Scalar>(
    frame: &Frame<T>,
    face: &FaceBox,
    enlarge_ratio: f64,
    source_frame_index: usize,
) -> Result<Option<Patch<T>>> {
    if !face.present {
        return Ok(None);
    }
    let (w, h) = (frame.width(), frame.height());
    let [x0, y0, x1, y1] = crop_region(face, w, h, enlarge_ratio)?;
    let sx = (x1 - x0) / PATCH_SIZE as f64;
    let sy = (y1 - y0) / PATCH_SIZE as f64;
    let taps = |start: f64, scale: f64, limit: usize| -> Vec<(usize, usize, f64)> {
        (0..PATCH_SIZE)
            .map(|j| {
                let pos = (start + (j as f64 + 0.5) * scale - 0.5).clamp(0.0, (limit - 1) as f64);
                let i0 = pos.floor() as usize;
                let i1 = (i0 + 1).min(limit - 1);
                (i0, i1, pos - i0 as f64)
            })
            .collect()
    };
    let xs = taps(x0, sx, w);
    let ys = taps(y0, sy, h);

    let mut data = vec![T::zero(); PATCH_LEN];
    for (py, &(y0i, y1i, fy)) in ys.iter().enumerate() {
        let fy = T::lit(fy);
        for (px, &(x0i, x1i, fx)) in xs.iter().enumerate() {
            let fx = T::lit(fx);
            for c in 0..PATCH_CHANNELS {
                let top =
                    frame.get(x0i, y0i, c) + (frame.get(x1i, y0i, c) - frame.get(x0i, y0i, c)) * fx;
                let bot =
                    frame.get(x0i, y1i, c) + (frame.get(x1i, y1i, c) - frame.get(x0i, y1i, c)) * fx;
                data[c * PATCH_AREA + py * PATCH_SIZE + px] = top + (bot - top) * fy;
            }
        }
    }
    Patch::new(data, source_frame_index).map(Some)
}

/// `D(t) = patch(t) - patch(t - 1)` for every consecutive pair.
pub fn temporal_difference<T: Scalar>(patches: &[Patch<T>]) -> Result<Vec<Patch<T>>> {
    if patches.len() < 2 {
        return Err(Error::validation(
            "temporal difference needs at least 2 patches",
        ));
    }
    Ok(patches
        .windows(2)
        .map(|p| Patch {
            data: p[1]
                .data
                .iter()
                .zip(&p[0].data)
                .map(|(a, b)| *a - *b)
                .collect(),
            source_frame_index: p[1].source_frame_index,
        })
        .collect())
}

/// Order of the affine transform and the standardization.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NormOrder {
    /// `((beta * D + gamma) - mu) / sigma`, with the statistics taken over the
    /// transformed values.
    #[default]
    AffineFirst,
    /// Conventional batch norm: `beta * (D - mu) / sigma + gamma`.
    StandardizeFirst,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NormParams {
    pub beta: [f64; 3],
    pub gamma: [f64; 3],
    pub learnable: bool,
}

impl Default for NormParams {
    fn default() -> Self {
        Self::identity()
    }
}

impl NormParams {
    pub fn identity() -> Self {
        Self {
            beta: [1.0; 3],
            gamma: [0.0; 3],
            learnable: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.beta.iter().chain(&self.gamma).any(|v| !v.is_finite()) {
            return Err(Error::validation("norm parameters must be finite"));
        }
        if !self.learnable && self.beta.contains(&0.0) {
            return Err(Error::validation("fixed norm parameters need beta != 0"));
        }
        Ok(())
    }
}

/// Per-channel mean and population standard deviation of a batch of patches.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelStats {
    pub mean: [f64; 3],
    pub std: [f64; 3],
}

impl ChannelStats {
    pub fn of<T: Scalar>(patches: &[Patch<T>]) -> Result<Self> {
        if patches.is_empty() {
            return Err(Error::validation("statistics need at least one patch"));
        }
        let n = (patches.len() * PATCH_AREA) as f64;
        let mut mean = [0.0; 3];
        let mut std = [0.0; 3];
        for c in 0..3 {
            let m = patches
                .iter()
                .flat_map(|p| p.channel(c))
                .map(|v| v.as_f64())
                .sum::<f64>()
                / n;
            let var = patches
                .iter()
                .flat_map(|p| p.channel(c))
                .map(|v| (v.as_f64() - m).powi(2))
                .sum::<f64>()
                / n;
            mean[c] = m;
            std[c] = var.sqrt();
        }
        Ok(Self { mean, std })
    }
}

/// The scale a channel is divided by, guarded against zero. The flag is set
/// when the guard fired.
pub fn guarded_std(sigma: f64) -> (f64, bool) {
    if sigma <= STD_FLOOR {
        (sigma + STD_EPSILON, true)
    } else {
        (sigma, false)
    }
}

/// Per-channel affine map `y = scale * x + offset` equivalent to normalizing
/// with `params` under `stats`.
pub fn channel_affine(
    params: &NormParams,
    stats: &ChannelStats,
    order: NormOrder,
) -> ([f64; 3], [f64; 3], bool) {
    let mut scale = [0.0; 3];
    let mut offset = [0.0; 3];
    let mut guarded = false;
    for c in 0..3 {
        let (b, g) = (params.beta[c], params.gamma[c]);
        match order {
            NormOrder::AffineFirst => {
                let mu = b * stats.mean[c] + g;
                let (s, hit) = guarded_std(b.abs() * stats.std[c]);
                guarded |= hit;
                scale[c] = b / s;
                offset[c] = (g - mu) / s;
            }
            NormOrder::StandardizeFirst => {
                let (s, hit) = guarded_std(stats.std[c]);
                guarded |= hit;
                scale[c] = b / s;
                offset[c] = g - b * stats.mean[c] / s;
            }
        }
    }
    (scale, offset, guarded)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Normalized<T> {
    pub patches: Vec<Patch<T>>,
    pub stats: ChannelStats,
    /// Set when a channel was constant and its deviation was epsilon-guarded.
    pub guarded: bool,
}

/// Normalizes `diffs` with statistics taken over the batch itself.
pub fn normalize<T: Scalar>(
    diffs: &[Patch<T>],
    params: &NormParams,
    order: NormOrder,
) -> Result<Normalized<T>> {
    if diffs.len() < 2 {
        return Err(Error::validation(
            "normalization needs a batch of at least 2",
        ));
    }
    let stats = ChannelStats::of(diffs)?;
    normalize_with(diffs, params, &stats, order)
}

/// Normalizes `diffs` with externally supplied statistics.
pub fn normalize_with<T: Scalar>(
    diffs: &[Patch<T>],
    params: &NormParams,
    stats: &ChannelStats,
    order: NormOrder,
) -> Result<Normalized<T>> {
    params.validate()?;
    let (scale, offset, guarded) = channel_affine(params, stats, order);
    if guarded {
        log::warn!("constant channel in normalization batch; deviation epsilon-guarded");
    }
    let patches = diffs
        .iter()
        .map(|p| {
            let mut data = p.data.clone();
            for (c, chunk) in data.chunks_mut(PATCH_AREA).enumerate() {
                let (s, o) = (T::lit(scale[c]), T::lit(offset[c]));
                chunk.iter_mut().for_each(|v| *v = *v * s + o);
            }
            Patch {
                data,
                source_frame_index: p.source_frame_index,
            }
        })
        .collect();
    Ok(Normalized {
        patches,
        stats: *stats,
        guarded,
    })
}

/// Appearance input for the attention masks: the mean of the raw patches,
/// z-scored per channel over its pixels.
pub fn appearance<T: Scalar>(patches: &[Patch<T>]) -> Result<Patch<T>> {
    let Some(first) = patches.first() else {
        return Err(Error::validation("appearance needs at least one patch"));
    };
    let inv = 1.0 / patches.len() as f64;
    let mut acc = vec![0.0f64; PATCH_LEN];
    for p in patches {
        acc.iter_mut()
            .zip(&p.data)
            .for_each(|(a, v)| *a += v.as_f64() * inv);
    }
    for chunk in acc.chunks_mut(PATCH_AREA) {
        let m = chunk.iter().sum::<f64>() / PATCH_AREA as f64;
        let sd = (chunk.iter().map(|v| (v - m).powi(2)).sum::<f64>() / PATCH_AREA as f64).sqrt();
        let (sd, _) = guarded_std(sd);
        chunk.iter_mut().for_each(|v| *v = (*v - m) / sd);
    }
    Ok(Patch {
        data: acc.into_iter().map(T::lit).collect(),
        source_frame_index: first.source_frame_index,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DumpHeader {
    pub shape: Vec<usize>,
    pub dtype: String,
    pub source_frames: Vec<usize>,
}

/// Writes patches as a flat little-endian `f32` blob at `path` plus a JSON
/// header next to it (`path` with a `.json` extension).
pub fn dump_patches<T: Scalar>(patches: &[Patch<T>], path: &Path) -> Result<()> {
    let mut blob = Vec::with_capacity(patches.len() * PATCH_LEN * 4);
    for p in patches {
        for v in &p.data {
            blob.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    let header = DumpHeader {
        shape: vec![patches.len(), PATCH_CHANNELS, PATCH_SIZE, PATCH_SIZE],
        dtype: "f32le".into(),
        source_frames: patches.iter().map(|p| p.source_frame_index).collect(),
    };
    fs::write(path, blob)?;
    fs::write(
        path.with_extension("json"),
        serde_json::to_vec_pretty(&header)?,
    )?;
    Ok(())
}

pub fn load_patch_dump<T: Scalar>(path: &Path) -> Result<Vec<Patch<T>>> {
    let header: DumpHeader = serde_json::from_slice(&fs::read(path.with_extension("json"))?)?;
    let blob = fs::read(path)?;
    let count = header.shape.first().copied().unwrap_or(0);
    if header.shape[1..] != [PATCH_CHANNELS, PATCH_SIZE, PATCH_SIZE]
        || header.source_frames.len() != count
    {
        return Err(Error::parse(
            0,
            format!("unexpected dump shape {:?}", header.shape),
        ));
    }
    if blob.len() != count * PATCH_LEN * 4 {
        return Err(Error::parse(
            blob.len().min(count * PATCH_LEN * 4),
            format!(
                "blob holds {} bytes, header implies {}",
                blob.len(),
                count * PATCH_LEN * 4
            ),
        ));
    }
    blob.chunks_exact(PATCH_LEN * 4)
        .zip(&header.source_frames)
        .map(|(chunk, &idx)| {
            let data = chunk
                .chunks_exact(4)
                .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
                .collect();
            Patch::new(data, idx)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{
        generate_pulse, render_video, Geometry, NoiseParams, OpticalParams, PulseSpec,
    };
    use proptest::prelude::*;

    fn patch_from(f: impl Fn(usize) -> f64) -> Patch<f64> {
        Patch::new((0..PATCH_LEN).map(f).collect(), 0).unwrap()
    }

    #[test]
    fn uniform_frame_gives_uniform_patch() {
        let frame = Frame::uniform(64, 48, [0.4f64, 0.4, 0.4], 0.0).unwrap();
        for ratio in [0.0, 0.3, 2.0] {
            let p = crop_resize(&frame, &FaceBox::new(10.0, 5.0, 20.0, 30.0), ratio, 0)
                .unwrap()
                .unwrap();
            assert!(p.data().iter().all(|v| (v - 0.4).abs() < 1e-12));
        }
    }

    #[test]
    fn enlarged_region_is_centered_and_clamped() {
        let b = FaceBox::new(20.0, 20.0, 20.0, 10.0);
        assert_eq!(
            crop_region(&b, 64, 64, 0.5).unwrap(),
            [15.0, 17.5, 45.0, 32.5]
        );
        let edge = FaceBox::new(0.0, 0.0, 20.0, 20.0);
        assert_eq!(
            crop_region(&edge, 64, 64, 1.0).unwrap(),
            [0.0, 0.0, 30.0, 30.0]
        );
        assert!(crop_region(&b, 64, 64, -0.1).is_err());
    }

    #[test]
    fn degenerate_and_absent_boxes() {
        let frame = Frame::uniform(8, 8, [0.1f64; 3], 0.0).unwrap();
        assert!(crop_resize(&frame, &FaceBox::absent(), 0.0, 0)
            .unwrap()
            .is_none());
        let outside = FaceBox::new(7.8, 7.8, 0.4, 0.4);
        assert!(crop_resize(&frame, &outside, 0.0, 0).is_err());
    }

    #[test]
    fn checkerboard_mean_is_preserved() {
        let px: Vec<f64> = (0..64 * 64)
            .flat_map(|i| {
                let v = if (i % 64 + i / 64) % 2 == 0 { 0.9 } else { 0.1 };
                [v; 3]
            })
            .collect();
        let frame = Frame::new(64, 64, px, 0.0).unwrap();
        let p = crop_resize(&frame, &FaceBox::new(0.0, 0.0, 36.0, 36.0), 0.0, 0)
            .unwrap()
            .unwrap();
        let mut source = 0.0;
        for y in 0..36 {
            for x in 0..36 {
                source += frame.get(x, y, 1);
            }
        }
        source /= 1296.0;
        assert!((p.mean() - source).abs() < 1e-3);
    }

    #[test]
    fn differences() {
        let a = patch_from(|i| i as f64 * 0.01);
        assert!(temporal_difference(&[a.clone(), a.clone()]).unwrap()[0]
            .data()
            .iter()
            .all(|v| *v == 0.0));
        let b = patch_from(|i| i as f64 * 0.01 + 0.25);
        let d = temporal_difference(&[a.clone(), b]).unwrap();
        assert!(d[0].data().iter().all(|v| (v - 0.25).abs() < 1e-12));
        assert!(temporal_difference(&[a]).is_err());
    }

    #[test]
    fn frame_differences_track_the_pulse_derivative() {
        let spec = PulseSpec {
            duration_s: 20.0,
            ..Default::default()
        };
        let bvp = generate_pulse::<f64>(&spec, 4).unwrap();
        let noise = NoiseParams {
            sensor_sigma: 0.0,
            quantize: false,
            seed: 0,
        };
        // luminance drift is a second, non-pulsatile source of frame differences
        let mut optics = OpticalParams::default();
        optics.illum_drift.amp = 0.0;
        let seq = render_video::<f64>(&bvp, &optics, &noise, &Geometry::default()).unwrap();
        let boxes = seq.face_boxes().unwrap();
        let patches: Vec<Patch<f64>> = seq
            .frames()
            .iter()
            .zip(boxes)
            .enumerate()
            .map(|(i, (f, b))| crop_resize(f, b, 0.0, i).unwrap().unwrap())
            .collect();
        let diffs = temporal_difference(&patches).unwrap();
        let means: Vec<f64> = diffs.iter().map(|d| d.mean()).collect();
        let dp: Vec<f64> = bvp.samples.windows(2).map(|w| w[1] - w[0]).collect();
        let (r, _) = crate::analysis::pearson(&means, &dp);
        assert!(r.abs() > 0.95, "{r}");
    }

    #[test]
    fn three_element_standardization() {
        // one scalar per channel: broadcast {-1, 0, 1} over every pixel
        let batch: Vec<Patch<f64>> = [-1.0, 0.0, 1.0]
            .iter()
            .map(|&v| patch_from(|_| v))
            .collect();
        let params = NormParams {
            beta: [2.0; 3],
            gamma: [3.0; 3],
            learnable: true,
        };
        let out = normalize(&batch, &params, NormOrder::AffineFirst).unwrap();
        let expect = [-1.224744871391589, 0.0, 1.224744871391589];
        for (p, e) in out.patches.iter().zip(expect) {
            assert!(p.data().iter().all(|v| (v - e).abs() < 1e-4));
        }
        assert!(!out.guarded);
    }

    #[test]
    fn standardized_input_passes_through() {
        let batch: Vec<Patch<f64>> = [-1.0, 1.0].iter().map(|&v| patch_from(|_| v)).collect();
        for order in [NormOrder::AffineFirst, NormOrder::StandardizeFirst] {
            let out = normalize(&batch, &NormParams::identity(), order).unwrap();
            for (a, b) in out.patches.iter().zip(&batch) {
                for (x, y) in a.data().iter().zip(b.data()) {
                    assert!((x - y).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn constant_batch_is_guarded() {
        let batch = vec![patch_from(|_| 0.3); 4];
        let out = normalize(&batch, &NormParams::identity(), NormOrder::AffineFirst).unwrap();
        assert!(out.guarded);
        let worst = out
            .patches
            .iter()
            .flat_map(|p| p.data())
            .fold(0.0f64, |m, v| m.max(v.abs()));
        assert!(worst < 1e-6, "{worst}");
        assert!(normalize(&batch[..1], &NormParams::identity(), NormOrder::AffineFirst).is_err());
    }

    #[test]
    fn fixed_params_reject_zero_beta() {
        let p = NormParams {
            beta: [1.0, 0.0, 1.0],
            gamma: [0.0; 3],
            learnable: false,
        };
        assert!(p.validate().is_err());
    }

    #[test]
    fn appearance_is_standardized() {
        let a = appearance(&[
            patch_from(|i| (i % 37) as f64),
            patch_from(|i| (i % 11) as f64),
        ])
        .unwrap();
        for c in 0..3 {
            let ch = a.channel(c);
            let m = ch.iter().sum::<f64>() / PATCH_AREA as f64;
            let v = ch.iter().map(|x| (x - m).powi(2)).sum::<f64>() / PATCH_AREA as f64;
            assert!(m.abs() < 1e-9 && (v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn dump_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("diffs.bin");
        let batch = vec![patch_from(|i| i as f64 * 0.5), patch_from(|i| -(i as f64))];
        dump_patches(&batch, &path).unwrap();
        assert_eq!(load_patch_dump::<f64>(&path).unwrap(), batch);
        let blob = fs::read(&path).unwrap();
        fs::write(&path, &blob[..blob.len() - 3]).unwrap();
        assert!(matches!(
            load_patch_dump::<f64>(&path),
            Err(Error::Parse { .. })
        ));
    }

    #[test]
    fn crop_is_deterministic() {
        let px: Vec<f32> = (0..40 * 30 * 3)
            .map(|i| ((i * 7919) % 255) as f32 / 255.0)
            .collect();
        let frame = Frame::new(40, 30, px, 0.0).unwrap();
        let b = FaceBox::new(3.3, 2.1, 25.7, 20.2);
        assert_eq!(
            crop_resize(&frame, &b, 0.2, 0).unwrap(),
            crop_resize(&frame, &b, 0.2, 0).unwrap()
        );
    }

    proptest! {
        #[test]
        fn difference_is_linear(a in -3.0f64..3.0, b in -3.0f64..3.0, seed in 0usize..1000) {
            let x: Vec<Patch<f64>> = (0..3).map(|k| patch_from(|i| ((i * 31 + k * 17 + seed) % 97) as f64 / 97.0)).collect();
            let y: Vec<Patch<f64>> = (0..3).map(|k| patch_from(|i| ((i * 13 + k * 7 + seed) % 89) as f64 / 89.0)).collect();
            let combo: Vec<Patch<f64>> = x.iter().zip(&y)
                .map(|(p, q)| Patch::new(p.data().iter().zip(q.data()).map(|(u, v)| a * u + b * v).collect(), 0).unwrap())
                .collect();
            let dc = temporal_difference(&combo).unwrap();
            let dx = temporal_difference(&x).unwrap();
            let dy = temporal_difference(&y).unwrap();
            for k in 0..2 {
                for i in 0..PATCH_LEN {
                    let e = a * dx[k].data()[i] + b * dy[k].data()[i];
                    prop_assert!((dc[k].data()[i] - e).abs() < 1e-9);
                }
            }
        }

        #[test]
        fn normalization_ignores_constant_shift(shift in -5.0f64..5.0, beta in 0.2f64..3.0, gamma in -2.0f64..2.0, seed in 0usize..500) {
            let batch: Vec<Patch<f64>> = (0..3).map(|k| patch_from(|i| ((i * 29 + k * 11 + seed) % 53) as f64 / 53.0)).collect();
            let shifted: Vec<Patch<f64>> = batch.iter()
                .map(|p| Patch::new(p.data().iter().map(|v| v + shift).collect(), 0).unwrap())
                .collect();
            let params = NormParams { beta: [beta; 3], gamma: [gamma; 3], learnable: true };
            let a = normalize(&batch, &params, NormOrder::AffineFirst).unwrap();
            let b = normalize(&shifted, &params, NormOrder::AffineFirst).unwrap();
            for (p, q) in a.patches.iter().zip(&b.patches) {
                for (u, v) in p.data().iter().zip(q.data()) {
                    prop_assert!((u - v).abs() < 1e-8);
                }
            }
            // standardization postcondition with identity parameters
            let id = normalize(&batch, &NormParams::identity(), NormOrder::AffineFirst).unwrap();
            let stats = ChannelStats::of(&id.patches).unwrap();
            for c in 0..3 {
                prop_assert!(stats.mean[c].abs() < 1e-6);
                prop_assert!((stats.std[c] - 1.0).abs() < 1e-5);
            }
        }
    }
}
