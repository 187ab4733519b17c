//! Datasets: IDX and CIFAR binary readers plus a synthetic generator.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const IDX_IMAGES_MAGIC: u32 = 0x0000_0803;
const IDX_LABELS_MAGIC: u32 = 0x0000_0801;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    #[default]
    Train,
    Val,
    Test,
}

/// Images in `[0, 1]`, stored sample-major as `[count, C, H, W]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    shape: [usize; 3],
    pixels: Vec<f32>,
    labels: Vec<usize>,
    num_classes: usize,
    pub split: Split,
}

impl Dataset {
    pub fn new(shape: [usize; 3], pixels: Vec<f32>, labels: Vec<usize>, num_classes: usize) -> Result<Self> {
        let per = shape.iter().product::<usize>();
        if per == 0 {
            return Err(Error::DimensionMismatch {
                what: "dataset",
                detail: format!("zero-sized image shape {shape:?}"),
            });
        }
        if pixels.len() != per * labels.len() {
            return Err(Error::DimensionMismatch {
                what: "dataset",
                detail: format!("{} pixels for {} images of {shape:?}", pixels.len(), labels.len()),
            });
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::OutOfRange {
                index: l,
                valid: format!("0..{num_classes}"),
            });
        }
        Ok(Dataset {
            shape,
            pixels,
            labels,
            num_classes,
            split: Split::Train,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn image_shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn pixels(&self, i: usize) -> &[f32] {
        let per = self.per_image();
        &self.pixels[i * per..(i + 1) * per]
    }

    pub fn image(&self, i: usize) -> Tensor {
        Tensor::new(self.shape.to_vec(), self.pixels(i).to_vec()).expect("dataset image shape")
    }

    fn per_image(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn with_split(mut self, split: Split) -> Self {
        self.split = split;
        self
    }

    /// Samples at `indices`, in that order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        let per = self.per_image();
        let mut pixels = Vec::with_capacity(indices.len() * per);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            pixels.extend_from_slice(self.pixels(i));
            labels.push(self.labels[i]);
        }
        Dataset {
            shape: self.shape,
            pixels,
            labels,
            num_classes: self.num_classes,
            split: self.split,
        }
    }

    pub fn take(&self, n: usize) -> Dataset {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }

    /// Shuffled split into (train, val) with `fraction` of samples in val.
    pub fn split_validation(&self, fraction: f64, seed: u64) -> Result<(Dataset, Dataset)> {
        if !(0.0..1.0).contains(&fraction) {
            return Err(Error::Config(format!("validation fraction {fraction} outside [0, 1)")));
        }
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_val = (self.len() as f64 * fraction).round() as usize;
        let (val, train) = idx.split_at(n_val);
        Ok((
            self.subset(train).with_split(Split::Train),
            self.subset(val).with_split(Split::Val),
        ))
    }

    /// Overrides the class count, e.g. when a label file lacks some classes.
    pub fn with_num_classes(mut self, m: usize) -> Result<Self> {
        if let Some(&l) = self.labels.iter().find(|&&l| l >= m) {
            return Err(Error::OutOfRange {
                index: l,
                valid: format!("0..{m}"),
            });
        }
        self.num_classes = m;
        Ok(self)
    }
}

fn read(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|e| Error::io(path, e))
}

fn be_u32(bytes: &[u8], at: usize, what: &'static str) -> Result<u32> {
    let b = bytes.get(at..at + 4).ok_or(Error::Truncated {
        what,
        expected: (at + 4) as u64,
        found: bytes.len() as u64,
    })?;
    Ok(u32::from_be_bytes(b.try_into().unwrap()))
}

/// Parses an IDX image file (unsigned bytes, rank 3) into `(count, h, w, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, usize, Vec<f32>)> {
    let magic = be_u32(bytes, 0, "idx images header")?;
    if magic != IDX_IMAGES_MAGIC {
        return Err(Error::BadMagic {
            what: "idx images",
            expected: format!("{IDX_IMAGES_MAGIC:#010x}"),
            found: format!("{magic:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, "idx images header")? as usize;
    let h = be_u32(bytes, 8, "idx images header")? as usize;
    let w = be_u32(bytes, 12, "idx images header")? as usize;
    let need = 16 + n * h * w;
    if bytes.len() < need {
        return Err(Error::Truncated {
            what: "idx images",
            expected: need as u64,
            found: bytes.len() as u64,
        });
    }
    let pixels = bytes[16..need].iter().map(|&b| b as f32 / 255.0).collect();
    Ok((n, h, w, pixels))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<usize>> {
    let magic = be_u32(bytes, 0, "idx labels header")?;
    if magic != IDX_LABELS_MAGIC {
        return Err(Error::BadMagic {
            what: "idx labels",
            expected: format!("{IDX_LABELS_MAGIC:#010x}"),
            found: format!("{magic:#010x}"),
        });
    }
    let n = be_u32(bytes, 4, "idx labels header")? as usize;
    if bytes.len() < 8 + n {
        return Err(Error::Truncated {
            what: "idx labels",
            expected: (8 + n) as u64,
            found: bytes.len() as u64,
        });
    }
    Ok(bytes[8..8 + n].iter().map(|&b| b as usize).collect())
}

/// Loads an IDX image/label file pair. The class count is the largest label
/// plus one (at least 2); override with [`Dataset::with_num_classes`].
pub fn load_idx(images: impl AsRef<Path>, labels: impl AsRef<Path>) -> Result<Dataset> {
    let (n, h, w, pixels) = parse_idx_images(&read(images.as_ref())?)?;
    let labels = parse_idx_labels(&read(labels.as_ref())?)?;
    if labels.len() != n {
        return Err(Error::DimensionMismatch {
            what: "idx pair",
            detail: format!("{n} images but {} labels", labels.len()),
        });
    }
    let m = labels.iter().max().map_or(2, |&l| (l + 1).max(2));
    Dataset::new([1, h, w], pixels, labels, m)
}

/// Parses CIFAR-10 binary records: one label byte then 3072 channel-major
/// pixel bytes.
pub fn parse_cifar_binary(bytes: &[u8]) -> Result<Dataset> {
    if bytes.is_empty() {
        return Err(Error::Empty("cifar binary file"));
    }
    if !bytes.len().is_multiple_of(CIFAR_RECORD) {
        return Err(Error::DimensionMismatch {
            what: "cifar binary",
            detail: format!("{} bytes is not a multiple of {CIFAR_RECORD}", bytes.len()),
        });
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut pixels = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    let mut labels = Vec::with_capacity(n);
    for rec in bytes.chunks_exact(CIFAR_RECORD) {
        labels.push(rec[0] as usize);
        pixels.extend(rec[1..].iter().map(|&b| b as f32 / 255.0));
    }
    Dataset::new([3, 32, 32], pixels, labels, 10)
}

pub fn load_cifar_binary(path: impl AsRef<Path>) -> Result<Dataset> {
    parse_cifar_binary(&read(path.as_ref())?)
}

/// Shape of generated images.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SynthShape {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl Default for SynthShape {
    fn default() -> Self {
        SynthShape {
            channels: 1,
            height: 16,
            width: 16,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct Blob {
    channel: usize,
    y: f32,
    x: f32,
    sigma: f32,
}

/// Class prototypes. Classes come in pairs sharing two blobs and differing in
/// a third, so pairs are easy to tell apart from other pairs but harder to
/// tell apart from each other. Depends only on `m` and the shape, never on
/// the sample seed, so sets drawn with different seeds share their classes.
fn prototypes(m: usize, shape: SynthShape) -> Vec<Vec<Blob>> {
    let mut rng = ChaCha8Rng::seed_from_u64(0x5eed_0000 ^ m as u64);
    let (h, w) = (shape.height as f32, shape.width as f32);
    let blob = |rng: &mut ChaCha8Rng| Blob {
        channel: rng.random_range(0..shape.channels),
        y: rng.random_range(0.15..0.85) * h,
        x: rng.random_range(0.15..0.85) * w,
        sigma: rng.random_range(0.06..0.12) * h.min(w),
    };
    let mut out = Vec::with_capacity(m);
    let mut shared = Vec::new();
    for c in 0..m {
        if c % 2 == 0 {
            shared = vec![blob(&mut rng), blob(&mut rng)];
        }
        let mut blobs = shared.clone();
        blobs.push(blob(&mut rng));
        out.push(blobs);
    }
    out
}

/// Gaussian-blob images with class-dependent blob layouts; label of sample
/// `i` is `i % m`. `difficulty` (typically 0..=1) scales positional jitter,
/// amplitude variation, pixel noise and a distractor blob; at 0 every sample
/// equals its class prototype.
pub fn synth_dataset(seed: u64, m: usize, count: usize, difficulty: f32) -> Result<Dataset> {
    synth_dataset_with(SynthShape::default(), seed, m, count, difficulty)
}

pub fn synth_dataset_with(
    shape: SynthShape,
    seed: u64,
    m: usize,
    count: usize,
    difficulty: f32,
) -> Result<Dataset> {
    if m < 2 {
        return Err(Error::Config(format!("synthetic data needs at least 2 classes, got {m}")));
    }
    if !difficulty.is_finite() || difficulty < 0.0 {
        return Err(Error::Config(format!("difficulty {difficulty} must be finite and >= 0")));
    }
    let protos = prototypes(m, shape);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (c, h, w) = (shape.channels, shape.height, shape.width);
    let jitter = 0.08 * difficulty * h.min(w) as f32;
    let mut pixels = vec![0.0f32; count * c * h * w];
    let mut labels = Vec::with_capacity(count);
    for (i, img) in pixels.chunks_exact_mut(c * h * w).enumerate() {
        let label = i % m;
        labels.push(label);
        let mut blobs: Vec<(Blob, f32)> = protos[label]
            .iter()
            .map(|b| {
                let amp = 1.0 - 0.4 * difficulty * rng.random::<f32>();
                let moved = Blob {
                    y: b.y + jitter * (2.0 * rng.random::<f32>() - 1.0),
                    x: b.x + jitter * (2.0 * rng.random::<f32>() - 1.0),
                    ..*b
                };
                (moved, amp)
            })
            .collect();
        if difficulty > 0.0 {
            let other = &protos[rng.random_range(0..m)];
            let d = other[rng.random_range(0..other.len())];
            blobs.push((d, 0.5 * difficulty.min(1.0) * rng.random::<f32>()));
        }
        for (b, amp) in &blobs {
            let plane = &mut img[b.channel * h * w..(b.channel + 1) * h * w];
            let inv = 1.0 / (2.0 * b.sigma * b.sigma);
            for y in 0..h {
                let dy = y as f32 - b.y;
                for x in 0..w {
                    let dx = x as f32 - b.x;
                    plane[y * w + x] += amp * (-(dy * dy + dx * dx) * inv).exp();
                }
            }
        }
        let noise = 0.15 * difficulty;
        for v in img.iter_mut() {
            if noise > 0.0 {
                *v += noise * (2.0 * rng.random::<f32>() - 1.0);
            }
            *v = v.clamp(0.0, 1.0);
        }
    }
    Dataset::new([c, h, w], pixels, labels, m)
}
