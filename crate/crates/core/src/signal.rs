//! Frame and waveform containers shared by every stage of the pipeline.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Channel index in the fixed R, G, B order.
pub const RED: usize = 0;
pub const GREEN: usize = 1;
pub const BLUE: usize = 2;

/// One RGB frame. Pixels are interleaved `[r, g, b]` per pixel, row-major,
/// with values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame<T> {
    width: usize,
    height: usize,
    pixels: Vec<T>,
    timestamp: f64,
}

impl<T: Scalar> Frame<T> {
    pub fn new(width: usize, height: usize, pixels: Vec<T>, timestamp: f64) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::validation("frame dimensions must be positive"));
        }
        if pixels.len() != width * height * 3 {
            return Err(Error::validation(format!(
                "frame has {} values, expected {}",
                pixels.len(),
                width * height * 3
            )));
        }
        if pixels.iter().any(|p| !p.is_finite()) {
            return Err(Error::validation("frame contains non-finite pixels"));
        }
        if !timestamp.is_finite() {
            return Err(Error::validation("frame timestamp is not finite"));
        }
        Ok(Self {
            width,
            height,
            pixels,
            timestamp,
        })
    }

    /// A frame filled with a single RGB color.
    pub fn uniform(width: usize, height: usize, rgb: [T; 3], timestamp: f64) -> Result<Self> {
        let pixels = (0..width * height).flat_map(|_| rgb).collect();
        Self::new(width, height, pixels, timestamp)
    }

    /// Builds a frame from 8-bit samples, dividing by 255.
    pub fn from_u8(width: usize, height: usize, bytes: &[u8], timestamp: f64) -> Result<Self> {
        let scale = T::lit(255.0);
        let pixels = bytes
            .iter()
            .map(|&b| T::from_u8(b).unwrap() / scale)
            .collect();
        Self::new(width, height, pixels, timestamp)
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn timestamp(&self) -> f64 {
        self.timestamp
    }

    pub fn pixels(&self) -> &[T] {
        &self.pixels
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize, channel: usize) -> T {
        self.pixels[(y * self.width + x) * 3 + channel]
    }

    /// Pixels rounded to the 8-bit grid.
    pub fn to_u8(&self) -> Vec<u8> {
        self.pixels
            .iter()
            .map(|&p| (p.as_f64().clamp(0.0, 1.0) * 255.0).round() as u8)
            .collect()
    }

    pub fn cast<U: Scalar>(&self) -> Frame<U> {
        Frame {
            width: self.width,
            height: self.height,
            pixels: self.pixels.iter().map(|&p| U::lit(p.as_f64())).collect(),
            timestamp: self.timestamp,
        }
    }
}

/// Axis-aligned face region in pixel coordinates (top-left origin).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FaceBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
    pub present: bool,
}

impl FaceBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self {
            x,
            y,
            w,
            h,
            present: true,
        }
    }

    pub fn absent() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            w: 0.0,
            h: 0.0,
            present: false,
        }
    }

    pub fn validate(&self, width: usize, height: usize) -> Result<()> {
        if !self.present {
            return Ok(());
        }
        let ok = self.w > 0.0
            && self.h > 0.0
            && self.x >= 0.0
            && self.y >= 0.0
            && self.x + self.w <= width as f64 + 1e-9
            && self.y + self.h <= height as f64 + 1e-9;
        if ok {
            Ok(())
        } else {
            Err(Error::validation(format!(
                "face box {self:?} outside {width}x{height} frame"
            )))
        }
    }

    /// Integer pixel rows/columns covered by the box: `(x0, y0, x1, y1)`,
    /// half-open.
    pub fn pixel_span(&self, width: usize, height: usize) -> (usize, usize, usize, usize) {
        let x0 = self.x.floor().max(0.0) as usize;
        let y0 = self.y.floor().max(0.0) as usize;
        let x1 = ((self.x + self.w).ceil() as usize).min(width);
        let y1 = ((self.y + self.h).ceil() as usize).min(height);
        (x0, y0, x1.max(x0), y1.max(y0))
    }
}

/// Timestamped frame stream with optional per-frame face boxes.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameSequence<T> {
    frames: Vec<Frame<T>>,
    fps: f64,
    face_boxes: Option<Vec<FaceBox>>,
    ground_truth: Option<BvpSignal<T>>,
}

impl<T: Scalar> FrameSequence<T> {
    pub fn new(frames: Vec<Frame<T>>, fps: f64, face_boxes: Option<Vec<FaceBox>>) -> Result<Self> {
        if !(fps > 0.0 && fps.is_finite()) {
            return Err(Error::validation("fps must be positive"));
        }
        let period = 1.0 / fps;
        for pair in frames.windows(2) {
            let dt = pair[1].timestamp - pair[0].timestamp;
            if dt <= 0.0 {
                return Err(Error::validation("timestamps must be strictly increasing"));
            }
            if (dt - period).abs() > 1e-6 {
                return Err(Error::validation(format!(
                    "timestamp step {dt} differs from 1/fps = {period}"
                )));
            }
        }
        if let Some(first) = frames.first() {
            if frames
                .iter()
                .any(|f| f.width != first.width || f.height != first.height)
            {
                return Err(Error::validation("frames differ in size"));
            }
        }
        if let Some(boxes) = &face_boxes {
            if boxes.len() != frames.len() {
                return Err(Error::validation(format!(
                    "{} face boxes for {} frames",
                    boxes.len(),
                    frames.len()
                )));
            }
            for (b, f) in boxes.iter().zip(&frames) {
                b.validate(f.width, f.height)?;
            }
        }
        Ok(Self {
            frames,
            fps,
            face_boxes,
            ground_truth: None,
        })
    }

    pub fn with_ground_truth(mut self, bvp: BvpSignal<T>) -> Self {
        self.ground_truth = Some(bvp);
        self
    }

    pub fn frames(&self) -> &[Frame<T>] {
        &self.frames
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn fps(&self) -> f64 {
        self.fps
    }

    pub fn face_boxes(&self) -> Option<&[FaceBox]> {
        self.face_boxes.as_deref()
    }

    pub fn ground_truth(&self) -> Option<&BvpSignal<T>> {
        self.ground_truth.as_ref()
    }

    /// Copies `len` frames starting at `start`, keeping fps, face boxes and
    /// the matching slice of ground truth.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames.len() {
            return Err(Error::Range {
                what: "frame window",
                start,
                len,
                available: self.frames.len(),
            });
        }
        let range = start..start + len;
        let ground_truth = self.ground_truth.as_ref().and_then(|gt| {
            (gt.samples.len() >= start + len).then(|| BvpSignal {
                samples: gt.samples[range.clone()].to_vec(),
                rate: gt.rate,
            })
        });
        Ok(Self {
            frames: self.frames[range.clone()].to_vec(),
            fps: self.fps,
            face_boxes: self.face_boxes.as_ref().map(|b| b[range].to_vec()),
            ground_truth,
        })
    }
}

/// Sampled blood-volume-pulse waveform.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BvpSignal<T> {
    pub samples: Vec<T>,
    pub rate: f64,
}

impl<T: Scalar> BvpSignal<T> {
    pub fn new(samples: Vec<T>, rate: f64) -> Result<Self> {
        if !(rate > 0.0 && rate.is_finite()) {
            return Err(Error::validation("sample rate must be positive"));
        }
        if samples.iter().any(|s| !s.is_finite()) {
            return Err(Error::validation("signal contains non-finite samples"));
        }
        Ok(Self { samples, rate })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.rate
    }

    pub fn cast<U: Scalar>(&self) -> BvpSignal<U> {
        BvpSignal {
            samples: self.samples.iter().map(|&s| U::lit(s.as_f64())).collect(),
            rate: self.rate,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum HrMethod {
    FftPeak,
    IbiMean,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HeartRateEstimate {
    pub bpm: f64,
    pub confidence_band_hz: [f64; 2],
    pub method: HrMethod,
}

/// Source of per-frame face boxes. Keypoint detection is outside this crate;
/// implementations plug in whatever produces boxes.
pub trait FaceDetector<T> {
    fn detect(&self, frame: &Frame<T>, index: usize) -> FaceBox;
}

/// Replays boxes recorded in a container manifest.
#[derive(Debug, Clone)]
pub struct ManifestDetector {
    boxes: Vec<FaceBox>,
}

impl ManifestDetector {
    pub fn new(boxes: Vec<FaceBox>) -> Self {
        Self { boxes }
    }

    pub fn from_sequence<T: Scalar>(seq: &FrameSequence<T>) -> Option<Self> {
        seq.face_boxes().map(|b| Self::new(b.to_vec()))
    }
}

impl<T> FaceDetector<T> for ManifestDetector {
    fn detect(&self, _frame: &Frame<T>, index: usize) -> FaceBox {
        self.boxes
            .get(index)
            .copied()
            .unwrap_or_else(FaceBox::absent)
    }
}

/// Treats the whole frame as the face region.
#[derive(Debug, Clone, Copy, Default)]
pub struct FullFrameDetector;

impl<T: Scalar> FaceDetector<T> for FullFrameDetector {
    fn detect(&self, frame: &Frame<T>, _index: usize) -> FaceBox {
        FaceBox::new(0.0, 0.0, frame.width() as f64, frame.height() as f64)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn seq(n: usize) -> FrameSequence<f32> {
        let frames = (0..n)
            .map(|i| Frame::uniform(4, 3, [i as f32 / 100.0, 0.5, 0.25], i as f64 / 30.0).unwrap())
            .collect();
        let boxes = (0..n)
            .map(|i| {
                if i % 3 == 0 {
                    FaceBox::absent()
                } else {
                    FaceBox::new(1.0, 1.0, 2.0, 2.0)
                }
            })
            .collect();
        FrameSequence::new(frames, 30.0, Some(boxes)).unwrap()
    }

    #[test]
    fn window_prefix_and_suffix() {
        let s = seq(30);
        let w = s.window(0, 10).unwrap();
        assert_eq!(w.len(), 10);
        assert_eq!(w.fps(), 30.0);
        assert_eq!(w.frames(), &s.frames()[..10]);
        let tail = s.window(20, 10).unwrap();
        assert_eq!(tail.frames(), &s.frames()[20..30]);
        assert_eq!(tail.face_boxes().unwrap(), &s.face_boxes().unwrap()[20..30]);
    }

    #[test]
    fn window_out_of_range() {
        let s = seq(30);
        assert!(matches!(s.window(25, 10), Err(Error::Range { .. })));
    }

    #[test]
    fn sequence_rejects_bad_timing() {
        let a = Frame::<f32>::uniform(2, 2, [0.0; 3], 0.0).unwrap();
        let b = Frame::<f32>::uniform(2, 2, [0.0; 3], 0.05).unwrap();
        assert!(FrameSequence::new(vec![a.clone(), b], 30.0, None).is_err());
        assert!(FrameSequence::new(vec![a.clone(), a], 30.0, None).is_err());
    }

    #[test]
    fn frame_validation() {
        assert!(Frame::<f32>::new(0, 2, vec![], 0.0).is_err());
        assert!(Frame::<f32>::new(1, 1, vec![0.0, f32::NAN, 0.0], 0.0).is_err());
        let f = Frame::<f64>::from_u8(1, 1, &[255, 0, 51], 0.0).unwrap();
        assert_eq!(f.get(0, 0, RED), 1.0);
        assert!((f.get(0, 0, BLUE) - 0.2).abs() < 1e-12);
        assert_eq!(f.to_u8(), vec![255, 0, 51]);
    }

    #[test]
    fn face_box_bounds() {
        assert!(FaceBox::new(0.0, 0.0, 4.0, 3.0).validate(4, 3).is_ok());
        assert!(FaceBox::new(1.0, 0.0, 4.0, 3.0).validate(4, 3).is_err());
        assert!(FaceBox::absent().validate(4, 3).is_ok());
    }

    proptest! {
        #[test]
        fn full_window_is_identity(n in 1usize..20) {
            let s = seq(n);
            prop_assert_eq!(s.window(0, n).unwrap(), s);
        }

        #[test]
        fn window_composition(a in 0usize..10, n in 1usize..10, b in 0usize..10, m in 1usize..10) {
            let s = seq(30);
            prop_assume!(b + m <= n && a + n <= 30);
            let nested = s.window(a, n).unwrap().window(b, m).unwrap();
            prop_assert_eq!(nested, s.window(a + b, m).unwrap());
        }
    }
}
