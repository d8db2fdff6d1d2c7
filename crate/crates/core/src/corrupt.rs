//! Parameterised image corruptions at five severity levels.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{CorruptionTag, Dataset};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorruptionKind {
    GaussianNoise,
    ShotNoise,
    ImpulseNoise,
    DefocusBlur,
    MotionBlur,
    Brightness,
    Contrast,
    Pixelate,
}

impl CorruptionKind {
    pub const ALL: [CorruptionKind; 8] = [
        CorruptionKind::GaussianNoise,
        CorruptionKind::ShotNoise,
        CorruptionKind::ImpulseNoise,
        CorruptionKind::DefocusBlur,
        CorruptionKind::MotionBlur,
        CorruptionKind::Brightness,
        CorruptionKind::Contrast,
        CorruptionKind::Pixelate,
    ];

    pub fn name(self) -> &'static str {
        match self {
            CorruptionKind::GaussianNoise => "gaussian_noise",
            CorruptionKind::ShotNoise => "shot_noise",
            CorruptionKind::ImpulseNoise => "impulse_noise",
            CorruptionKind::DefocusBlur => "defocus_blur",
            CorruptionKind::MotionBlur => "motion_blur",
            CorruptionKind::Brightness => "brightness",
            CorruptionKind::Contrast => "contrast",
            CorruptionKind::Pixelate => "pixelate",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::invalid(format!("unknown corruption '{name}'")))
    }

    fn table(self) -> [f64; 5] {
        match self {
            CorruptionKind::GaussianNoise => [0.04, 0.08, 0.12, 0.18, 0.26],
            CorruptionKind::ShotNoise => [500.0, 250.0, 100.0, 75.0, 50.0],
            CorruptionKind::ImpulseNoise => [0.01, 0.02, 0.03, 0.05, 0.07],
            CorruptionKind::DefocusBlur => [1.0, 2.0, 3.0, 4.0, 6.0],
            CorruptionKind::MotionBlur => [3.0, 5.0, 7.0, 9.0, 11.0],
            CorruptionKind::Brightness => [0.05, 0.10, 0.15, 0.20, 0.30],
            CorruptionKind::Contrast => [0.75, 0.6, 0.45, 0.3, 0.2],
            CorruptionKind::Pixelate => [1.33, 1.6, 2.0, 2.67, 4.0],
        }
    }

    /// The severity's parameter: noise σ, photon count λ, impulse fraction,
    /// disk radius, line length, brightness shift, contrast factor or
    /// pixelation factor.
    pub fn parameter(self, severity: u8) -> Result<f64> {
        if !(1..=5).contains(&severity) {
            return Err(Error::invalid(format!(
                "severity {severity} of {} outside 1..=5",
                self.name()
            )));
        }
        Ok(self.table()[severity as usize - 1])
    }

    pub fn is_noise(self) -> bool {
        matches!(
            self,
            CorruptionKind::GaussianNoise | CorruptionKind::ShotNoise | CorruptionKind::ImpulseNoise
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorruptionSpec {
    #[serde(rename = "name")]
    pub kind: CorruptionKind,
    pub severity: u8,
}

impl CorruptionSpec {
    pub fn new(kind: CorruptionKind, severity: u8) -> Result<Self> {
        kind.parameter(severity)?;
        Ok(Self { kind, severity })
    }
}

fn blur(image: &[f32], [c, h, w]: [usize; 3], offsets: &[(isize, isize)]) -> Vec<f32> {
    let mut out = vec![0f32; image.len()];
    let clamp = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    for ch in 0..c {
        let plane = &image[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let sum: f64 = offsets
                    .iter()
                    .map(|(dy, dx)| {
                        plane[clamp(y as isize + dy, h) * w + clamp(x as isize + dx, w)] as f64
                    })
                    .sum();
                out[(ch * h + y) * w + x] = (sum / offsets.len() as f64) as f32;
            }
        }
    }
    out
}

fn disk(radius: f64) -> Vec<(isize, isize)> {
    let r = radius.ceil() as isize;
    let mut k = Vec::new();
    for dy in -r..=r {
        for dx in -r..=r {
            if ((dy * dy + dx * dx) as f64) <= radius * radius {
                k.push((dy, dx));
            }
        }
    }
    k
}

fn diagonal_line(length: f64) -> Vec<(isize, isize)> {
    let half = (length as isize) / 2;
    (-half..=half).map(|d| (-d, d)).collect()
}

/// Area-weighted overlap of each of `out` cells with each of `n` pixels.
fn box_weights(n: usize, out: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = n as f64 / out as f64;
    (0..out)
        .map(|i| {
            let (lo, hi) = (i as f64 * scale, (i + 1) as f64 * scale);
            (lo.floor() as usize..(hi.ceil() as usize).min(n))
                .filter_map(|p| {
                    let overlap = (hi.min(p as f64 + 1.0) - lo.max(p as f64)).max(0.0);
                    (overlap > 0.0).then_some((p, overlap / scale))
                })
                .collect()
        })
        .collect()
}

fn pixelate(image: &[f32], [c, h, w]: [usize; 3], factor: f64) -> Vec<f32> {
    let lh = ((h as f64 / factor).round() as usize).max(1);
    let lw = ((w as f64 / factor).round() as usize).max(1);
    let (wy, wx) = (box_weights(h, lh), box_weights(w, lw));
    let mut out = vec![0f32; image.len()];
    for ch in 0..c {
        let plane = &image[ch * h * w..(ch + 1) * h * w];
        let mut low = vec![0f64; lh * lw];
        for (i, ry) in wy.iter().enumerate() {
            for (j, rx) in wx.iter().enumerate() {
                let mut v = 0.0;
                for &(y, a) in ry {
                    for &(x, b) in rx {
                        v += a * b * plane[y * w + x] as f64;
                    }
                }
                low[i * lw + j] = v;
            }
        }
        for y in 0..h {
            let sy = (((y as f64 + 0.5) * lh as f64 / h as f64) as usize).min(lh - 1);
            for x in 0..w {
                let sx = (((x as f64 + 0.5) * lw as f64 / w as f64) as usize).min(lw - 1);
                out[(ch * h + y) * w + x] = low[sy * lw + sx] as f32;
            }
        }
    }
    out
}

/// Apply `kind` with an explicit parameter value. Output is clamped to
/// `[0, 1]`.
pub fn apply(kind: CorruptionKind, param: f64, image: &[f32], shape: [usize; 3], rng: &mut impl Rng) -> Result<Vec<f32>> {
    let [c, h, w] = shape;
    if image.len() != c * h * w {
        return Err(Error::shape("corrupt image", c * h * w, image.len()));
    }
    let mut out: Vec<f32> = match kind {
        CorruptionKind::GaussianNoise => {
            if param == 0.0 {
                image.to_vec()
            } else {
                let n = Normal::new(0.0, param)
                    .map_err(|e| Error::invalid(format!("noise level {param}: {e}")))?;
                image
                    .iter()
                    .map(|x| (*x as f64 + n.sample(rng)) as f32)
                    .collect()
            }
        }
        CorruptionKind::ShotNoise => image
            .iter()
            .map(|x| {
                let rate = (*x as f64).max(0.0) * param;
                if rate > 0.0 {
                    let p = Poisson::new(rate).expect("positive rate");
                    (p.sample(rng) / param) as f32
                } else {
                    0.0
                }
            })
            .collect(),
        CorruptionKind::ImpulseNoise => image
            .iter()
            .map(|x| {
                if rng.random_bool(param) {
                    if rng.random_bool(0.5) {
                        1.0
                    } else {
                        0.0
                    }
                } else {
                    *x
                }
            })
            .collect(),
        CorruptionKind::DefocusBlur => blur(image, shape, &disk(param)),
        CorruptionKind::MotionBlur => blur(image, shape, &diagonal_line(param)),
        CorruptionKind::Brightness => image.iter().map(|x| (*x as f64 + param) as f32).collect(),
        CorruptionKind::Contrast => {
            let mut out = image.to_vec();
            for plane in out.chunks_mut(h * w) {
                let mean = plane.iter().map(|v| *v as f64).sum::<f64>() / (h * w) as f64;
                for v in plane.iter_mut() {
                    *v = ((*v as f64 - mean) * param + mean) as f32;
                }
            }
            out
        }
        CorruptionKind::Pixelate => pixelate(image, shape, param),
    };
    out.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    Ok(out)
}

/// Corrupt one image; the seed drives the stochastic kinds.
pub fn corrupt(image: &[f32], shape: [usize; 3], spec: CorruptionSpec, seed: u64) -> Result<Vec<f32>> {
    let param = spec.kind.parameter(spec.severity)?;
    let mut rng: ChaCha8Rng = rand::SeedableRng::seed_from_u64(seed);
    apply(spec.kind, param, image, shape, &mut rng)
}

/// Per-sample seed for a corruption of sample `index`.
pub fn sample_seed(global: u64, spec: CorruptionSpec, index: usize) -> u64 {
    seed::derive(
        global,
        &[
            spec.kind.name().into(),
            (spec.severity as u64).into(),
            index.into(),
        ],
    )
}

/// Apply `specs` in order to every image. Sample order and labels are kept
/// and each applied corruption is recorded in the dataset metadata.
pub fn corrupt_dataset(ds: &Dataset, specs: &[CorruptionSpec], seed: u64) -> Result<Dataset> {
    let mut out = ds.clone();
    let shape = ds.shape();
    for spec in specs {
        spec.kind.parameter(spec.severity)?;
        let per = ds.image_len();
        out.images
            .par_chunks_mut(per)
            .enumerate()
            .try_for_each(|(i, img)| -> Result<()> {
                let c = corrupt(img, shape, *spec, sample_seed(seed, *spec, i))?;
                img.copy_from_slice(&c);
                Ok(())
            })?;
        out.corruptions.push(CorruptionTag {
            name: spec.kind.name().into(),
            severity: spec.severity,
            seed,
        });
    }
    Ok(out)
}
