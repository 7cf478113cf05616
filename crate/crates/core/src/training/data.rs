//! Datasets: the procedural quadrant task, a binary container, and raw
//! 8-bit ingestion.
//!
//! Pixels are stored normalized as `(v - PIXEL_MEAN) / PIXEL_STD` where `v`
//! is the raw intensity in `[0, 1]`.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::numerics::rng::{stream, streams};
use crate::numerics::Tensor;

pub const PIXEL_MEAN: f64 = 0.25;
pub const PIXEL_STD: f64 = 0.3;

pub const DATASET_MAGIC: [u8; 4] = *b"TSDS";
pub const DATASET_VERSION: u32 = 1;

/// Largest sample count the decoder accepts.
const MAX_SAMPLES: usize = 1 << 24;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    #[default]
    Train,
    Test,
}

impl Split {
    fn code(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Test => 1,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        match c {
            0 => Some(Split::Train),
            1 => Some(Split::Test),
            _ => None,
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            other => Err(Error::config(format!("unknown split '{other}' (expected train or test)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    /// `N × C × H × W`
    pub images: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    /// Per-patch regression targets, `N × patches`.
    pub targets: Option<Tensor>,
    pub split: Split,
}

impl Dataset {
    pub fn new(images: Tensor, labels: Vec<usize>, num_classes: usize, targets: Option<Tensor>, split: Split) -> Result<Self> {
        if images.rank() != 4 {
            return Err(Error::Dataset(format!("images must be N×C×H×W, got {:?}", images.shape())));
        }
        let n = images.shape()[0];
        if labels.len() != n {
            return Err(Error::Dataset(format!("{} labels for {n} images", labels.len())));
        }
        if num_classes == 0 {
            return Err(Error::Dataset("num_classes must be positive".into()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::Dataset(format!("label {bad} out of range for {num_classes} classes")));
        }
        if let Some(t) = &targets {
            if t.rank() != 2 || t.shape()[0] != n {
                return Err(Error::Dataset(format!("targets shape {:?} does not fit {n} images", t.shape())));
            }
        }
        if !images.is_finite() || targets.as_ref().is_some_and(|t| !t.is_finite()) {
            return Err(Error::Dataset("non-finite values".into()));
        }
        Ok(Dataset {
            images,
            labels,
            num_classes,
            targets,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// Image `i` as `C × H × W`.
    pub fn image(&self, i: usize) -> Tensor {
        self.images.outer(i)
    }

    /// Regression targets of image `i`.
    pub fn target(&self, i: usize) -> Option<Tensor> {
        self.targets.as_ref().map(|t| t.outer(i))
    }

    /// Patches whose centre is nearest the target point of image `i`, ties
    /// included. On quadrant data these are the patches under the pattern
    /// centre.
    pub fn pattern_patches(&self, i: usize) -> Option<Vec<usize>> {
        let t = self.target(i)?;
        let min = t.data().iter().copied().fold(f64::INFINITY, f64::min);
        Some((0..t.data().len()).filter(|&p| t.data()[p] <= min + 1e-12).collect())
    }

    /// Errors unless images fit `config`'s input and label range.
    pub fn check_fits(&self, config: &ModelConfig) -> Result<()> {
        let s = &self.images.shape()[1..];
        if s != [config.channels, config.image_size, config.image_size] {
            return Err(Error::Dataset(format!(
                "images are {s:?}, model expects [{}, {}, {}]",
                config.channels, config.image_size, config.image_size
            )));
        }
        if self.num_classes > config.num_classes {
            return Err(Error::Dataset(format!(
                "dataset has {} classes, model only {}",
                self.num_classes, config.num_classes
            )));
        }
        if let Some(t) = &self.targets {
            if t.shape()[1] != config.patches() {
                return Err(Error::Dataset(format!(
                    "{} targets per image, model has {} patches",
                    t.shape()[1],
                    config.patches()
                )));
            }
        }
        Ok(())
    }

    /// The first `n` samples.
    pub fn head(&self, n: usize) -> Result<Self> {
        let n = n.min(self.len());
        if n == 0 {
            return Err(Error::Dataset("empty subset".into()));
        }
        let per = self.images.numel() / self.len();
        let mut shape = self.images.shape().to_vec();
        shape[0] = n;
        let images = Tensor::new(shape, self.images.data()[..n * per].to_vec())?;
        let targets = match &self.targets {
            Some(t) => {
                let w = t.shape()[1];
                Some(Tensor::new([n, w], t.data()[..n * w].to_vec())?)
            }
            None => None,
        };
        Dataset::new(images, self.labels[..n].to_vec(), self.num_classes, targets, self.split)
    }
}

/// Parameters of the procedural quadrant task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QuadrantSpec {
    pub image_size: usize,
    pub patch_size: usize,
    pub channels: usize,
    /// Side of the textured square, in pixels.
    pub pattern_size: usize,
    /// Amplitude of the uniform background noise.
    pub noise: f64,
}

impl QuadrantSpec {
    pub fn for_model(config: &ModelConfig) -> Self {
        QuadrantSpec {
            image_size: config.image_size,
            patch_size: config.patch_size,
            channels: config.channels,
            pattern_size: (config.image_size / 4).max(2),
            noise: 0.3,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let half = self.image_size / 2;
        if self.image_size < 4 || self.patch_size == 0 || !self.image_size.is_multiple_of(self.patch_size) {
            return Err(Error::config(format!(
                "quadrant images need size ≥ 4 divisible by patch size, got {} / {}",
                self.image_size, self.patch_size
            )));
        }
        if self.pattern_size < 2 || self.pattern_size > half {
            return Err(Error::config(format!(
                "pattern size {} must lie in [2, {half}]",
                self.pattern_size
            )));
        }
        if self.channels == 0 || !(0.0..=1.0).contains(&self.noise) {
            return Err(Error::config("quadrant channels must be positive and noise in [0, 1]"));
        }
        Ok(())
    }
}

/// Four-class task: the class is the quadrant holding a checkerboard square
/// on a noisy background. The per-patch target is the distance from the
/// patch centre to the square's centre, in units of the image side.
///
/// Labels cycle through the classes, so every split is balanced. Train and
/// test splits draw from separate streams of `seed`.
pub fn quadrant_dataset(spec: &QuadrantSpec, n: usize, seed: u64, split: Split) -> Result<Dataset> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::config("dataset size must be positive"));
    }
    let s = spec.image_size;
    let c = spec.channels;
    let g = s / spec.patch_size;
    let half = s / 2;
    let ps = spec.pattern_size;
    let mut rng = stream(
        seed,
        match split {
            Split::Train => streams::DATA,
            Split::Test => streams::DATA_TEST,
        },
    );
    let mut images = Vec::with_capacity(n * c * s * s);
    let mut targets = Vec::with_capacity(n * g * g);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let class = i % 4;
        let (qy, qx) = (class / 2, class % 2);
        let oy = qy * half + rng.random_range(0..=half - ps);
        let ox = qx * half + rng.random_range(0..=half - ps);
        let cell = rng.random_range(1..=(ps / 2).max(1));
        let tint: Vec<f64> = (0..c).map(|_| rng.random_range(0.6..1.0)).collect();
        for &t in &tint {
            for y in 0..s {
                for x in 0..s {
                    let inside = (oy..oy + ps).contains(&y) && (ox..ox + ps).contains(&x);
                    let v = if inside {
                        let on = ((y - oy) / cell + (x - ox) / cell).is_multiple_of(2);
                        if on {
                            t
                        } else {
                            0.5 * t
                        }
                    } else {
                        spec.noise * rng.random::<f64>()
                    };
                    images.push((v - PIXEL_MEAN) / PIXEL_STD);
                }
            }
        }
        let cy = oy as f64 + ps as f64 / 2.0;
        let cx = ox as f64 + ps as f64 / 2.0;
        let p = spec.patch_size as f64;
        for gy in 0..g {
            for gx in 0..g {
                let py = (gy as f64 + 0.5) * p;
                let px = (gx as f64 + 0.5) * p;
                targets.push(((py - cy).powi(2) + (px - cx).powi(2)).sqrt() / s as f64);
            }
        }
        labels.push(class);
    }
    Dataset::new(
        Tensor::new([n, c, s, s], images)?,
        labels,
        4,
        Some(Tensor::new([n, g * g], targets)?),
        split,
    )
}

/// Builds a dataset from 8-bit pixels (`N·C·H·W` bytes, channel-major per
/// image) and one label byte per image.
pub fn from_raw_u8(
    pixels: &[u8],
    labels: &[u8],
    channels: usize,
    size: usize,
    num_classes: usize,
    split: Split,
) -> Result<Dataset> {
    let per = channels
        .checked_mul(size)
        .and_then(|v| v.checked_mul(size))
        .filter(|&v| v > 0)
        .ok_or_else(|| Error::Dataset("image dimensions must be positive".into()))?;
    if !pixels.len().is_multiple_of(per) || pixels.len() / per != labels.len() {
        return Err(Error::Dataset(format!(
            "{} pixel bytes do not hold {} images of {per} bytes",
            pixels.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::Dataset("no images".into()));
    }
    let data = pixels
        .iter()
        .map(|&b| (b as f64 / 255.0 - PIXEL_MEAN) / PIXEL_STD)
        .collect();
    let images = Tensor::new([labels.len(), channels, size, size], data)?;
    Dataset::new(images, labels.iter().map(|&l| l as usize).collect(), num_classes, None, split)
}

/// Little-endian container:
///
/// ```text
/// "TSDS"  u32 version  u8 split
/// u32 N  u32 C  u32 H  u32 W  u32 classes  u32 targets per image (0 = none)
/// N × u32 label, N·C·H·W × f64 pixel, N·T × f64 target
/// ```
pub fn encode_dataset(d: &Dataset) -> Vec<u8> {
    let s = d.images.shape();
    let t = d.targets.as_ref().map_or(0, |t| t.shape()[1]);
    let mut out = Vec::with_capacity(32 + 4 * d.len() + 8 * (d.images.numel() + d.len() * t));
    out.extend_from_slice(&DATASET_MAGIC);
    out.extend_from_slice(&DATASET_VERSION.to_le_bytes());
    out.push(d.split.code());
    for v in [s[0], s[1], s[2], s[3], d.num_classes, t] {
        out.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for &l in &d.labels {
        out.extend_from_slice(&(l as u32).to_le_bytes());
    }
    for v in d.images.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    if let Some(tg) = &d.targets {
        for v in tg.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<Dataset> {
    let err = |m: String| Error::Dataset(m);
    if bytes.len() < 33 {
        return Err(err(format!("{} bytes is shorter than the header", bytes.len())));
    }
    if bytes[..4] != DATASET_MAGIC {
        return Err(err("bad magic, expected \"TSDS\"".into()));
    }
    let u32_at = |p: usize| u32::from_le_bytes([bytes[p], bytes[p + 1], bytes[p + 2], bytes[p + 3]]) as usize;
    let version = u32_at(4);
    if version != DATASET_VERSION as usize {
        return Err(err(format!("unsupported version {version}")));
    }
    let split = Split::from_code(bytes[8]).ok_or_else(|| err(format!("unknown split code {}", bytes[8])))?;
    let [n, c, h, w, classes, t] = [9, 13, 17, 21, 25, 29].map(u32_at);
    if n == 0 || n > MAX_SAMPLES || c == 0 || h == 0 || w == 0 {
        return Err(err(format!("header dims {n}×{c}×{h}×{w} out of range")));
    }
    let body = bytes.len() - 33;
    // u128 keeps the size arithmetic exact for any u32 header.
    let need = 4 * n as u128 + 8 * (n as u128) * (c as u128 * h as u128 * w as u128 + t as u128);
    if need != body as u128 {
        return Err(err(format!("header promises {need} body bytes, file has {body}")));
    }
    let mut pos = 33;
    let mut labels = Vec::with_capacity(n);
    for _ in 0..n {
        labels.push(u32_at(pos));
        pos += 4;
    }
    let mut floats = |count: usize| -> Vec<f64> {
        let v = bytes[pos..pos + 8 * count]
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8-byte chunk")))
            .collect();
        pos += 8 * count;
        v
    };
    let images = Tensor::new([n, c, h, w], floats(n * c * h * w))?;
    let targets = if t > 0 { Some(Tensor::new([n, t], floats(n * t))?) } else { None };
    Dataset::new(images, labels, classes, targets, split)
}

pub fn save_dataset(d: &Dataset, path: &std::path::Path) -> Result<()> {
    std::fs::write(path, encode_dataset(d)).map_err(|e| Error::io(path, e))
}

pub fn load_dataset(path: &std::path::Path) -> Result<Dataset> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dataset(&bytes)
}
