//! On-disk frame container: `frame_%06d.ppm` (binary P6, maxval 255) plus a
//! `manifest.json` carrying fps, frame count, optional face boxes and
//! optional ground-truth pulse.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::signal::{BvpSignal, FaceBox, Frame, FrameSequence};

pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ManifestBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestBvp {
    pub rate: f64,
    pub samples: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub fps: f64,
    pub frame_count: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub face_boxes: Option<Vec<Option<ManifestBox>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth_bvp: Option<ManifestBvp>,
}

pub fn frame_file_name(index: usize) -> String {
    format!("frame_{index:06}.ppm")
}

/// Encodes 8-bit RGB as binary PPM.
pub fn encode_ppm(width: usize, height: usize, rgb: &[u8]) -> Vec<u8> {
    let mut out = format!("P6\n{width} {height}\n255\n").into_bytes();
    out.extend_from_slice(rgb);
    out
}

/// Decodes a binary PPM with maxval 255. Returns `(width, height, rgb)`.
pub fn decode_ppm(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    let mut pos = 0usize;
    let magic = next_token(bytes, &mut pos)?;
    if magic != b"P6" {
        return Err(Error::parse(0, "not a binary PPM (P6)"));
    }
    let width = parse_uint(bytes, &mut pos)?;
    let height = parse_uint(bytes, &mut pos)?;
    let maxval_at = pos;
    let maxval = parse_uint(bytes, &mut pos)?;
    if maxval != 255 {
        return Err(Error::parse(
            maxval_at,
            format!("unsupported maxval {maxval}"),
        ));
    }
    // exactly one whitespace byte separates the header from the raster
    if pos >= bytes.len() || !bytes[pos].is_ascii_whitespace() {
        return Err(Error::parse(pos, "missing whitespace after header"));
    }
    pos += 1;
    let need = width * height * 3;
    if bytes.len() < pos + need {
        return Err(Error::parse(
            bytes.len(),
            format!("raster truncated: need {need} bytes after offset {pos}"),
        ));
    }
    if width == 0 || height == 0 {
        return Err(Error::parse(0, "zero image dimension"));
    }
    Ok((width, height, bytes[pos..pos + need].to_vec()))
}

fn next_token<'a>(bytes: &'a [u8], pos: &mut usize) -> Result<&'a [u8]> {
    loop {
        while *pos < bytes.len() && bytes[*pos].is_ascii_whitespace() {
            *pos += 1;
        }
        if *pos < bytes.len() && bytes[*pos] == b'#' {
            while *pos < bytes.len() && bytes[*pos] != b'\n' {
                *pos += 1;
            }
            continue;
        }
        break;
    }
    let start = *pos;
    while *pos < bytes.len() && !bytes[*pos].is_ascii_whitespace() {
        *pos += 1;
    }
    if start == *pos {
        return Err(Error::parse(start, "unexpected end of header"));
    }
    Ok(&bytes[start..*pos])
}

fn parse_uint(bytes: &[u8], pos: &mut usize) -> Result<usize> {
    let at = *pos;
    let tok = next_token(bytes, pos)?;
    std::str::from_utf8(tok)
        .ok()
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| Error::parse(at, "expected unsigned integer"))
}

/// Writes a sequence as a frame container directory.
pub fn write_container<T: Scalar>(seq: &FrameSequence<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    for (i, frame) in seq.frames().iter().enumerate() {
        let bytes = encode_ppm(frame.width(), frame.height(), &frame.to_u8());
        fs::write(dir.join(frame_file_name(i)), bytes)?;
    }
    let manifest = Manifest {
        fps: seq.fps(),
        frame_count: seq.len(),
        face_boxes: seq.face_boxes().map(|boxes| {
            boxes
                .iter()
                .map(|b| {
                    b.present.then_some(ManifestBox {
                        x: b.x,
                        y: b.y,
                        w: b.w,
                        h: b.h,
                    })
                })
                .collect()
        }),
        ground_truth_bvp: seq.ground_truth().map(|gt| ManifestBvp {
            rate: gt.rate,
            samples: gt.samples.iter().map(|s| s.as_f64()).collect(),
        }),
    };
    let json = serde_json::to_string_pretty(&manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let text = fs::read_to_string(dir.join(MANIFEST_FILE))?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if !(manifest.fps > 0.0) {
        return Err(Error::validation("manifest fps must be positive"));
    }
    if let Some(boxes) = &manifest.face_boxes {
        if boxes.len() != manifest.frame_count {
            return Err(Error::validation(
                "face_boxes length differs from frame_count",
            ));
        }
    }
    Ok(manifest)
}

/// Reads a frame container directory. Timestamps are `index / fps`.
pub fn read_container<T: Scalar>(dir: &Path) -> Result<FrameSequence<T>> {
    let manifest = read_manifest(dir)?;
    let mut frames = Vec::with_capacity(manifest.frame_count);
    for i in 0..manifest.frame_count {
        let path = dir.join(frame_file_name(i));
        let bytes = fs::read(&path)?;
        let (w, h, rgb) = decode_ppm(&bytes)?;
        frames.push(Frame::from_u8(w, h, &rgb, i as f64 / manifest.fps)?);
    }
    let boxes = manifest.face_boxes.as_ref().map(|boxes| {
        boxes
            .iter()
            .map(|b| match b {
                Some(b) => FaceBox::new(b.x, b.y, b.w, b.h),
                None => FaceBox::absent(),
            })
            .collect()
    });
    let mut seq = FrameSequence::new(frames, manifest.fps, boxes)?;
    if let Some(gt) = manifest.ground_truth_bvp {
        let samples = gt.samples.iter().map(|&s| T::lit(s)).collect();
        seq = seq.with_ground_truth(BvpSignal::new(samples, gt.rate)?);
    }
    Ok(seq)
}
