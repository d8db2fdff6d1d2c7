//! Image datasets: the on-disk container, CIFAR-10 binary ingestion, the
//! synthetic MiniShapes generator and the seeded validation split.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;
use crate::tensor::Tensor;

pub const CONTAINER_VERSION: u32 = 1;
const CIFAR_RECORD: usize = 1 + 3 * 32 * 32;

/// Per-channel normalisation constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    pub mean: Vec<f32>,
    pub std: Vec<f32>,
}

/// One corruption applied to a dataset, in application order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorruptionTag {
    pub name: String,
    pub severity: u8,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetMeta {
    pub format_version: u32,
    pub split: String,
    pub num_samples: usize,
    pub num_classes: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub normalization: Option<Normalization>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub corruptions: Vec<CorruptionTag>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
}

/// `N × C × H × W` images with values in `[0, 1]` plus labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub images: Vec<f32>,
    pub labels: Vec<u16>,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
    pub split: String,
    pub normalization: Option<Normalization>,
    pub corruptions: Vec<CorruptionTag>,
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn new(
        images: Vec<f32>,
        labels: Vec<u16>,
        shape: [usize; 3],
        num_classes: usize,
        split: impl Into<String>,
    ) -> Result<Self> {
        let ds = Self {
            images,
            labels,
            channels: shape[0],
            height: shape[1],
            width: shape[2],
            num_classes,
            split: split.into(),
            normalization: None,
            corruptions: Vec::new(),
            seed: None,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        if self.images.len() != self.labels.len() * self.image_len() {
            return Err(Error::shape(
                "dataset images",
                self.labels.len() * self.image_len(),
                self.images.len(),
            ));
        }
        if let Some((i, l)) = self
            .labels
            .iter()
            .enumerate()
            .find(|(_, l)| **l as usize >= self.num_classes)
        {
            return Err(Error::invalid(format!(
                "label {l} of sample {i} outside [0, {})",
                self.num_classes
            )));
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn image(&self, i: usize) -> &[f32] {
        let n = self.image_len();
        &self.images[i * n..(i + 1) * n]
    }

    pub fn image_mut(&mut self, i: usize) -> &mut [f32] {
        let n = self.image_len();
        &mut self.images[i * n..(i + 1) * n]
    }

    /// Stack the given samples into an `[n, C, H, W]` tensor.
    pub fn batch(&self, indices: &[usize]) -> Tensor<f32> {
        let mut data = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            data.extend_from_slice(self.image(i));
        }
        let [c, h, w] = self.shape();
        Tensor::new(vec![indices.len(), c, h, w], data).expect("sized from dataset")
    }

    pub fn subset(&self, indices: &[usize], split: impl Into<String>) -> Dataset {
        let mut images = Vec::with_capacity(indices.len() * self.image_len());
        for &i in indices {
            images.extend_from_slice(self.image(i));
        }
        Dataset {
            images,
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            split: split.into(),
            ..self.clone_meta()
        }
    }

    fn clone_meta(&self) -> Dataset {
        Dataset {
            images: Vec::new(),
            labels: Vec::new(),
            channels: self.channels,
            height: self.height,
            width: self.width,
            num_classes: self.num_classes,
            split: self.split.clone(),
            normalization: self.normalization.clone(),
            corruptions: self.corruptions.clone(),
            seed: self.seed,
        }
    }

    /// Per-channel mean and (population) standard deviation.
    pub fn channel_stats(&self) -> Normalization {
        let plane = self.height * self.width;
        let mut mean = vec![0f64; self.channels];
        let mut sq = vec![0f64; self.channels];
        for i in 0..self.len() {
            for (c, chunk) in self.image(i).chunks(plane).enumerate() {
                for v in chunk {
                    mean[c] += *v as f64;
                    sq[c] += (*v as f64) * (*v as f64);
                }
            }
        }
        let count = (self.len() * plane).max(1) as f64;
        let mut std = vec![0f32; self.channels];
        let mut m32 = vec![0f32; self.channels];
        for c in 0..self.channels {
            let m = mean[c] / count;
            let var = (sq[c] / count - m * m).max(1e-12);
            m32[c] = m as f32;
            std[c] = var.sqrt() as f32;
        }
        Normalization { mean: m32, std }
    }

    /// `clean`, or the applied corruptions as `name:severity` joined by `+`.
    pub fn source_tag(&self) -> String {
        if self.corruptions.is_empty() {
            return "clean".into();
        }
        self.corruptions
            .iter()
            .map(|c| format!("{}:{}", c.name, c.severity))
            .collect::<Vec<_>>()
            .join("+")
    }

    pub fn meta(&self) -> DatasetMeta {
        DatasetMeta {
            format_version: CONTAINER_VERSION,
            split: self.split.clone(),
            num_samples: self.len(),
            num_classes: self.num_classes,
            channels: self.channels,
            height: self.height,
            width: self.width,
            normalization: self.normalization.clone(),
            corruptions: self.corruptions.clone(),
            seed: self.seed,
        }
    }

    /// Write the container directory: `images.bin` (f32 LE), `labels.bin`
    /// (u16 LE) and `meta.json`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut img = Vec::with_capacity(self.images.len() * 4);
        for v in &self.images {
            img.extend_from_slice(&v.to_le_bytes());
        }
        let mut lab = Vec::with_capacity(self.labels.len() * 2);
        for l in &self.labels {
            lab.extend_from_slice(&l.to_le_bytes());
        }
        let write = |name: &str, bytes: &[u8]| {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(p, e))
        };
        write("images.bin", &img)?;
        write("labels.bin", &lab)?;
        write("meta.json", serde_json::to_string_pretty(&self.meta())?.as_bytes())
    }

    pub fn load(dir: &Path) -> Result<Dataset> {
        let read = |name: &str| {
            let p = dir.join(name);
            fs::read(&p).map_err(|e| Error::io(p, e))
        };
        let meta_path = dir.join("meta.json");
        let meta: DatasetMeta = serde_json::from_slice(&read("meta.json")?).map_err(|e| {
            Error::format(meta_path.display(), format!("line {}", e.line()), e.to_string())
        })?;
        if meta.format_version != CONTAINER_VERSION {
            return Err(Error::format(
                meta_path.display(),
                "format_version",
                format!(
                    "unsupported version {} (expected {CONTAINER_VERSION})",
                    meta.format_version
                ),
            ));
        }
        let img = read("images.bin")?;
        let lab = read("labels.bin")?;
        let per = meta.channels * meta.height * meta.width;
        if img.len() != meta.num_samples * per * 4 {
            return Err(Error::format(
                dir.join("images.bin").display(),
                "file size",
                format!("expected {} bytes, found {}", meta.num_samples * per * 4, img.len()),
            ));
        }
        if lab.len() != meta.num_samples * 2 {
            return Err(Error::format(
                dir.join("labels.bin").display(),
                "file size",
                format!("expected {} bytes, found {}", meta.num_samples * 2, lab.len()),
            ));
        }
        let images = img
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let labels = lab
            .chunks_exact(2)
            .map(|b| u16::from_le_bytes([b[0], b[1]]))
            .collect();
        let ds = Dataset {
            images,
            labels,
            channels: meta.channels,
            height: meta.height,
            width: meta.width,
            num_classes: meta.num_classes,
            split: meta.split,
            normalization: meta.normalization,
            corruptions: meta.corruptions,
            seed: meta.seed,
        };
        ds.validate()?;
        Ok(ds)
    }
}

/// Parse CIFAR-10 binary records (1 label byte + 3072 channel-major pixel
/// bytes each).
pub fn parse_cifar10_bin(bytes: &[u8], origin: &str) -> Result<Dataset> {
    if bytes.len() % CIFAR_RECORD != 0 {
        return Err(Error::format(
            origin,
            format!("byte {}", bytes.len() - bytes.len() % CIFAR_RECORD),
            format!(
                "file size {} is not a multiple of the {CIFAR_RECORD}-byte record",
                bytes.len()
            ),
        ));
    }
    let n = bytes.len() / CIFAR_RECORD;
    let mut labels = Vec::with_capacity(n);
    let mut images = Vec::with_capacity(n * (CIFAR_RECORD - 1));
    for (i, rec) in bytes.chunks_exact(CIFAR_RECORD).enumerate() {
        if rec[0] >= 10 {
            return Err(Error::format(
                origin,
                format!("byte {} (record {i})", i * CIFAR_RECORD),
                format!("label byte {} is not a CIFAR-10 class", rec[0]),
            ));
        }
        labels.push(rec[0] as u16);
        images.extend(rec[1..].iter().map(|b| *b as f32 / 255.0));
    }
    Dataset::new(images, labels, [3, 32, 32], 10, "cifar10")
}

pub fn load_cifar10_bin(path: &Path) -> Result<Dataset> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    parse_cifar10_bin(&bytes, &path.display().to_string())
}

/// Encode a 3×32×32 dataset in the CIFAR-10 binary layout. Pixel values are
/// rounded to the nearest multiple of 1/255.
pub fn encode_cifar10_bin(ds: &Dataset) -> Result<Vec<u8>> {
    if ds.shape() != [3, 32, 32] || ds.num_classes > 10 {
        return Err(Error::invalid(
            "CIFAR-10 layout needs 3×32×32 images and at most 10 classes",
        ));
    }
    let mut out = Vec::with_capacity(ds.len() * CIFAR_RECORD);
    for i in 0..ds.len() {
        out.push(ds.labels[i] as u8);
        out.extend(
            ds.image(i)
                .iter()
                .map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8),
        );
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
enum Glyph {
    Disk,
    Square,
    Triangle,
    Cross,
    Ring,
}

const GLYPHS: [Glyph; 5] = [
    Glyph::Disk,
    Glyph::Square,
    Glyph::Triangle,
    Glyph::Cross,
    Glyph::Ring,
];
/// Hue centres (degrees) of the colour families.
const FAMILY_HUES: [f64; 4] = [15.0, 215.0, 120.0, 300.0];

impl Glyph {
    fn contains(self, u: f64, v: f64) -> bool {
        let s3 = 3f64.sqrt();
        match self {
            Glyph::Disk => u * u + v * v <= 1.0,
            Glyph::Square => u.abs() <= 0.8 && v.abs() <= 0.8,
            Glyph::Triangle => v >= -0.5 && s3 * u + v <= 1.0 && -s3 * u + v <= 1.0,
            Glyph::Cross => {
                (u.abs() <= 0.3 && v.abs() <= 1.0) || (v.abs() <= 0.3 && u.abs() <= 1.0)
            }
            Glyph::Ring => {
                let r2 = u * u + v * v;
                (0.3025..=1.0).contains(&r2)
            }
        }
    }
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> [f64; 3] {
    let h = h.rem_euclid(360.0) / 60.0;
    let c = v * s;
    let x = c * (1.0 - (h % 2.0 - 1.0).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r + m, g + m, b + m]
}

/// Number of classes MiniShapes can express (5 glyphs × 4 colour families).
pub const MINISHAPES_MAX_CLASSES: usize = 20;

/// Render one MiniShapes image of class `label`.
fn render_minishape(label: usize, rng: &mut impl Rng) -> Vec<f32> {
    const S: usize = 32;
    let glyph = GLYPHS[label % GLYPHS.len()];
    let family = label / GLYPHS.len();

    let base = rng.random_range(0.3..0.7);
    let tint: [f64; 3] = std::array::from_fn(|_| rng.random_range(-0.06..0.06));
    let grad: [f64; 2] = [rng.random_range(-0.1..0.1), rng.random_range(-0.1..0.1)];
    let noise = Normal::new(0.0, 0.03).unwrap();

    let hue = FAMILY_HUES[family] + rng.random_range(-20.0..20.0);
    let color = hsv_to_rgb(hue, rng.random_range(0.6..1.0), rng.random_range(0.7..1.0));
    let radius = rng.random_range(7.0..11.0);
    let cx = 16.0 + rng.random_range(-5.0..5.0);
    let cy = 16.0 + rng.random_range(-5.0..5.0);
    let theta = rng.random_range(0.0..2.0 * PI);
    let (sin, cos) = theta.sin_cos();

    let mut img = vec![0f32; 3 * S * S];
    for y in 0..S {
        for x in 0..S {
            // 2×2 supersampled coverage
            let mut cover = 0.0;
            for sy in 0..2 {
                for sx in 0..2 {
                    let px = x as f64 + 0.25 + 0.5 * sx as f64 - cx;
                    let py = y as f64 + 0.25 + 0.5 * sy as f64 - cy;
                    let u = (cos * px + sin * py) / radius;
                    let v = (-sin * px + cos * py) / radius;
                    if glyph.contains(u, v) {
                        cover += 0.25;
                    }
                }
            }
            let shade = base + grad[0] * (x as f64 / 16.0 - 1.0) + grad[1] * (y as f64 / 16.0 - 1.0);
            for c in 0..3 {
                let bg = shade + tint[c] + noise.sample(rng);
                let v = (1.0 - cover) * bg + cover * color[c];
                img[(c * S + y) * S + x] = v.clamp(0.0, 1.0) as f32;
            }
        }
    }
    img
}

/// Synthetic 32×32 RGB glyph dataset: class = glyph shape × colour family.
/// Labels cycle through the classes, so class counts differ by at most one.
pub fn gen_minishapes(seed: u64, n: usize, num_classes: usize) -> Result<Dataset> {
    if num_classes == 0 || num_classes > MINISHAPES_MAX_CLASSES {
        return Err(Error::invalid(format!(
            "MiniShapes supports 1..={MINISHAPES_MAX_CLASSES} classes, got {num_classes}"
        )));
    }
    let mut images = Vec::with_capacity(n * 3 * 32 * 32);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = i % num_classes;
        let mut rng = seed::rng(seed, &["minishapes".into(), i.into()]);
        images.extend(render_minishape(label, &mut rng));
        labels.push(label as u16);
    }
    let mut ds = Dataset::new(images, labels, [3, 32, 32], num_classes, "minishapes")?;
    ds.seed = Some(seed);
    Ok(ds)
}

/// Seeded disjoint split of `n_val` validation samples out of `train`.
/// Both parts keep the original relative sample order.
pub fn split_validation(train: &Dataset, n_val: usize, seed: u64) -> Result<(Dataset, Dataset)> {
    if n_val >= train.len() {
        return Err(Error::invalid(format!(
            "validation size {n_val} must be smaller than the training set ({})",
            train.len()
        )));
    }
    let mut order: Vec<usize> = (0..train.len()).collect();
    order.shuffle(&mut seed::rng(seed, &["validation_split".into()]));
    let mut val_idx = order[..n_val].to_vec();
    let mut train_idx = order[n_val..].to_vec();
    val_idx.sort_unstable();
    train_idx.sort_unstable();
    Ok((train.subset(&train_idx, "train"), train.subset(&val_idx, "val")))
}
