use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub const MANIFEST_FILE: &str = "weights.json";
pub const BLOB_FILE: &str = "weights.bin";

/// Layer widths of the estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Side of the square input patches.
    pub input_size: usize,
    /// Width of conv1..conv3.
    pub conv_channels: usize,
    /// Width of conv4, the branch output.
    pub out_channels: usize,
    pub merge_channels: usize,
    pub hidden: usize,
    /// Average each merged map over space before the dense head instead of
    /// flattening it.
    #[serde(default)]
    pub pool_head: bool,
}

impl Default for ArchConfig {
    fn default() -> Self {
        Self::standard()
    }
}

impl ArchConfig {
    /// `3 x 36 x 36` input, 32 then 64 channels, 128 hidden units.
    pub const fn standard() -> Self {
        Self {
            input_size: 36,
            conv_channels: 32,
            out_channels: 64,
            merge_channels: 64,
            hidden: 128,
            pool_head: false,
        }
    }

    /// Same topology at a quarter of the width, cheap enough to train on a
    /// single core in minutes.
    pub const fn compact() -> Self {
        Self {
            input_size: 36,
            conv_channels: 8,
            out_channels: 16,
            merge_channels: 16,
            hidden: 32,
            pool_head: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size < 4 {
            return Err(Error::validation(
                "input_size must be >= 4 to survive two poolings",
            ));
        }
        if [
            self.conv_channels,
            self.out_channels,
            self.merge_channels,
            self.hidden,
        ]
        .contains(&0)
        {
            return Err(Error::validation("layer widths must be positive"));
        }
        Ok(())
    }

    /// Spatial side after the first and the second pooling.
    pub fn pooled_sizes(&self) -> (usize, usize) {
        (self.input_size / 2, self.input_size / 4)
    }

    /// Length of one frame's input to the dense head.
    pub fn head_inputs(&self) -> usize {
        if self.pool_head {
            return self.merge_channels;
        }
        let (_, s) = self.pooled_sizes();
        self.merge_channels * s * s
    }

    /// Names and shapes of every learnable tensor, in storage order.
    pub fn param_specs(&self) -> Vec<(String, Vec<usize>)> {
        let (c, o) = (self.conv_channels, self.out_channels);
        let mut specs = Vec::new();
        for branch in ["adjacent", "segment"] {
            let convs = [
                ("conv1", 3, c),
                ("conv2", c, c),
                ("conv3", c, c),
                ("conv4", c, o),
            ];
            for (name, cin, cout) in convs {
                specs.push((format!("{branch}.{name}.weight"), vec![cout, cin, 3, 3]));
                specs.push((format!("{branch}.{name}.bias"), vec![cout]));
            }
            for mask in ["mask1", "mask2"] {
                specs.push((format!("{branch}.{mask}.weight"), vec![3]));
                specs.push((format!("{branch}.{mask}.bias"), vec![1]));
            }
        }
        specs.push((
            "merge.weight".into(),
            vec![self.merge_channels, 2 * o, 3, 3],
        ));
        specs.push(("merge.bias".into(), vec![self.merge_channels]));
        specs.push((
            "head.fc1.weight".into(),
            vec![self.hidden, self.head_inputs()],
        ));
        specs.push(("head.fc1.bias".into(), vec![self.hidden]));
        specs.push(("head.fc2.weight".into(), vec![1, self.hidden]));
        specs.push(("head.fc2.bias".into(), vec![1]));
        specs.push(("norm.beta".into(), vec![3]));
        specs.push(("norm.gamma".into(), vec![3]));
        specs
    }

    pub fn param_count(&self) -> usize {
        self.param_specs()
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum()
    }
}

/// Positions of the tensors in [`ArchConfig::param_specs`] order.
pub(crate) mod slot {
    pub const BRANCH_LEN: usize = 12;
    pub const CONV_W: [usize; 4] = [0, 2, 4, 6];
    pub const CONV_B: [usize; 4] = [1, 3, 5, 7];
    pub const MASK_W: [usize; 2] = [8, 10];
    pub const MASK_B: [usize; 2] = [9, 11];
    pub const MERGE_W: usize = 24;
    pub const MERGE_B: usize = 25;
    pub const FC1_W: usize = 26;
    pub const FC1_B: usize = 27;
    pub const FC2_W: usize = 28;
    pub const FC2_B: usize = 29;
    pub const BETA: usize = 30;
    pub const GAMMA: usize = 31;
    pub const COUNT: usize = 32;
}

#[derive(Debug, Clone, PartialEq)]
pub struct Param<T> {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// All learnable tensors of the estimator plus the dropout rates it was
/// built with.
#[derive(Debug, Clone, PartialEq)]
pub struct NetworkWeights<T> {
    pub arch: ArchConfig,
    pub drop1: f64,
    pub drop2: f64,
    params: Vec<Param<T>>,
}

pub const DEFAULT_DROP1: f64 = 0.25;
pub const DEFAULT_DROP2: f64 = 0.5;

impl<T: Scalar> NetworkWeights<T> {
    /// Xavier-uniform weights, zero biases, identity normalization.
    pub fn init(arch: ArchConfig, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = arch
            .param_specs()
            .into_iter()
            .map(|(name, shape)| {
                let len = shape.iter().product();
                let data = if name == "norm.beta" {
                    vec![T::one(); len]
                } else if name.ends_with(".weight") {
                    let (fan_in, fan_out) = fans(&shape);
                    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
                    (0..len)
                        .map(|_| T::lit(rng.gen_range(-limit..limit)))
                        .collect()
                } else {
                    vec![T::zero(); len]
                };
                Param { name, shape, data }
            })
            .collect::<Vec<_>>();
        debug_assert_eq!(params.len(), slot::COUNT);
        Ok(Self {
            arch,
            drop1: DEFAULT_DROP1,
            drop2: DEFAULT_DROP2,
            params,
        })
    }

    pub fn with_dropout(mut self, drop1: f64, drop2: f64) -> Result<Self> {
        for p in [drop1, drop2] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::validation(format!(
                    "dropout rate {p} outside [0, 1)"
                )));
            }
        }
        self.drop1 = drop1;
        self.drop2 = drop2;
        Ok(self)
    }

    /// Same layout, all zeros.
    pub fn zeros_like(&self) -> Self {
        Self {
            arch: self.arch,
            drop1: self.drop1,
            drop2: self.drop2,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: vec![T::zero(); p.data.len()],
                })
                .collect(),
        }
    }

    pub fn params(&self) -> &[Param<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Param<T>] {
        &mut self.params
    }

    pub fn param(&self, name: &str) -> Option<&Param<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub(crate) fn at(&self, slot: usize) -> &[T] {
        &self.params[slot].data
    }

    pub(crate) fn at_mut(&mut self, slot: usize) -> &mut [T] {
        &mut self.params[slot].data
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.data.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.params
            .iter()
            .all(|p| p.data.iter().all(|v| v.is_finite()))
    }

    /// `self += alpha * other`, tensor by tensor.
    pub fn add_scaled(&mut self, other: &Self, alpha: T) {
        for (a, b) in self.params.iter_mut().zip(&other.params) {
            a.data
                .iter_mut()
                .zip(&b.data)
                .for_each(|(x, y)| *x += alpha * *y);
        }
    }

    pub fn scale(&mut self, alpha: T) {
        for p in &mut self.params {
            p.data.iter_mut().for_each(|v| *v *= alpha);
        }
    }

    pub fn cast<U: Scalar>(&self) -> NetworkWeights<U> {
        NetworkWeights {
            arch: self.arch,
            drop1: self.drop1,
            drop2: self.drop2,
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    shape: p.shape.clone(),
                    data: p.data.iter().map(|v| U::lit(v.as_f64())).collect(),
                })
                .collect(),
        }
    }
}

fn fans(shape: &[usize]) -> (usize, usize) {
    match shape {
        [cout, cin, kh, kw] => (cin * kh * kw, cout * kh * kw),
        [rows, cols] => (*cols, *rows),
        [n] => (*n, 1),
        _ => (1, 1),
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: usize,
    /// Byte length in the blob.
    pub length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightsManifest {
    pub arch: ArchConfig,
    pub drop1: f64,
    pub drop2: f64,
    pub blob: String,
    pub blob_sha256: String,
    pub tensors: Vec<TensorEntry>,
}

/// Writes `weights.json` and `weights.bin` into `dir`, storing every value
/// as little-endian `f32`.
pub fn save_weights<T: Scalar>(w: &NetworkWeights<T>, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    let mut blob = Vec::with_capacity(w.param_count() * 4);
    let mut tensors = Vec::with_capacity(w.params.len());
    for p in &w.params {
        let offset = blob.len();
        for v in &p.data {
            blob.extend_from_slice(&v.as_f32().to_le_bytes());
        }
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            dtype: "f32le".into(),
            offset,
            length: blob.len() - offset,
        });
    }
    let manifest = WeightsManifest {
        arch: w.arch,
        drop1: w.drop1,
        drop2: w.drop2,
        blob: BLOB_FILE.into(),
        blob_sha256: hex::encode(Sha256::digest(&blob)),
        tensors,
    };
    fs::write(dir.join(BLOB_FILE), &blob)?;
    let mut json = serde_json::to_vec_pretty(&manifest)?;
    json.push(b'\n');
    fs::write(dir.join(MANIFEST_FILE), json)?;
    Ok(())
}

/// Reads weights written by [`save_weights`]. `path` is the directory or the
/// manifest file itself.
pub fn load_weights<T: Scalar>(path: &Path) -> Result<NetworkWeights<T>> {
    let manifest_path = if path.is_dir() {
        path.join(MANIFEST_FILE)
    } else {
        path.to_path_buf()
    };
    let text = fs::read(&manifest_path)?;
    let manifest: WeightsManifest = serde_json::from_slice(&text).map_err(|e| {
        let offset = line_col_offset(&text, e.line(), e.column());
        Error::parse(offset, format!("weights manifest: {e}"))
    })?;
    let dir = manifest_path.parent().unwrap_or(Path::new("."));
    let blob = fs::read(dir.join(&manifest.blob))?;
    manifest.arch.validate()?;

    let expected = manifest.arch.param_specs();
    if expected.len() != manifest.tensors.len() {
        return Err(Error::parse(
            0,
            format!(
                "manifest lists {} tensors, architecture needs {}",
                manifest.tensors.len(),
                expected.len()
            ),
        ));
    }
    let mut params = Vec::with_capacity(expected.len());
    for ((name, shape), entry) in expected.into_iter().zip(&manifest.tensors) {
        if entry.name != name {
            return Err(Error::parse(
                entry.offset,
                format!("expected tensor {name}, found {}", entry.name),
            ));
        }
        if entry.shape != shape {
            return Err(Error::parse(
                entry.offset,
                format!(
                    "tensor {name}: manifest shape {:?}, architecture needs {shape:?}",
                    entry.shape
                ),
            ));
        }
        if entry.dtype != "f32le" {
            return Err(Error::parse(
                entry.offset,
                format!("tensor {name}: unsupported dtype {}", entry.dtype),
            ));
        }
        let count: usize = shape.iter().product();
        if entry.length != count * 4 {
            return Err(Error::parse(
                entry.offset,
                format!("tensor {name}: {} bytes for {count} values", entry.length),
            ));
        }
        let end = entry.offset + entry.length;
        if end > blob.len() {
            return Err(Error::parse(
                blob.len(),
                format!(
                    "tensor {name}: blob truncated, needs {end} bytes, has {}",
                    blob.len()
                ),
            ));
        }
        let data = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|b| T::lit(f32::from_le_bytes([b[0], b[1], b[2], b[3]]) as f64))
            .collect::<Vec<T>>();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::parse(
                entry.offset,
                format!("tensor {name}: non-finite values"),
            ));
        }
        params.push(Param { name, shape, data });
    }
    let digest = hex::encode(Sha256::digest(&blob));
    if digest != manifest.blob_sha256 {
        return Err(Error::parse(
            0,
            format!("blob hash {digest} does not match manifest"),
        ));
    }
    NetworkWeights {
        arch: manifest.arch,
        drop1: DEFAULT_DROP1,
        drop2: DEFAULT_DROP2,
        params,
    }
    .with_dropout(manifest.drop1, manifest.drop2)
}

fn line_col_offset(text: &[u8], line: usize, column: usize) -> usize {
    let mut offset = 0;
    for (i, l) in text.split(|b| *b == b'\n').enumerate() {
        if i + 1 == line {
            return offset + column.saturating_sub(1);
        }
        offset += l.len() + 1;
    }
    text.len()
}
