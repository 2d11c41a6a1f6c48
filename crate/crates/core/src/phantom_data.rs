//! Synthetic multi-anatomy phantom datasets.
//!
//! Each image is a random composition of sharp-edged ellipses plus an
//! optional plane-wave texture, re-centered so its pixel mean equals the
//! profile's `intensity_mean` and clamped to `[0, 1]`. Profiles with different
//! means, contrasts and textures give datasets with a measurable
//! statistical shift. Sample `i` of a run draws from its own ChaCha stream
//! `(seed, i)`, so generation order does not matter.

use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io_store::{self, Tensor};
use crate::kspace::ImageTensor;

pub const DATASET_MANIFEST: &str = "dataset.toml";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AnatomyProfile {
    pub anatomy_id: usize,
    pub name: String,
    pub intensity_mean: f64,
    pub contrast_scale: f64,
    pub ellipse_count_range: (usize, usize),
    pub texture_frequency: f64,
    pub dataset_size: usize,
}

impl AnatomyProfile {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(format!("profile `{}`: {msg}", self.name)));
        if !valid_name(&self.name) {
            return bad("name must be non-empty [A-Za-z0-9_-]".into());
        }
        if !(self.intensity_mean > 0.0 && self.intensity_mean < 1.0) {
            return bad(format!("intensity_mean {} outside (0, 1)", self.intensity_mean));
        }
        if !(self.contrast_scale.is_finite() && self.contrast_scale > 0.0) {
            return bad(format!("contrast_scale {} must be > 0", self.contrast_scale));
        }
        let (lo, hi) = self.ellipse_count_range;
        if lo > hi {
            return bad(format!("ellipse_count_range ({lo}, {hi}) is inverted"));
        }
        if !(self.texture_frequency.is_finite() && self.texture_frequency >= 0.0) {
            return bad(format!("texture_frequency {} must be >= 0", self.texture_frequency));
        }
        if self.dataset_size < 10 {
            return bad(format!("dataset_size {} is below 10", self.dataset_size));
        }
        Ok(())
    }

    /// Large, smooth, low-intensity anatomy.
    pub fn brain_like() -> Self {
        AnatomyProfile {
            anatomy_id: 0,
            name: "brainish".into(),
            intensity_mean: 0.3,
            contrast_scale: 0.25,
            ellipse_count_range: (6, 10),
            texture_frequency: 0.0,
            dataset_size: 200,
        }
    }

    /// Large, bright, high-contrast anatomy with fine texture.
    pub fn knee_like() -> Self {
        AnatomyProfile {
            anatomy_id: 1,
            name: "kneeish".into(),
            intensity_mean: 0.6,
            contrast_scale: 0.5,
            ellipse_count_range: (2, 5),
            texture_frequency: 6.0,
            dataset_size: 200,
        }
    }

    /// Small dataset used for adaptation.
    pub fn cardiac_like() -> Self {
        AnatomyProfile {
            anatomy_id: 2,
            name: "cardiacish".into(),
            intensity_mean: 0.45,
            contrast_scale: 0.4,
            ellipse_count_range: (3, 7),
            texture_frequency: 3.0,
            dataset_size: 20,
        }
    }
}

pub(crate) fn valid_name(name: &str) -> bool {
    !name.is_empty()
        && name
            .chars()
            .all(|c| c.is_ascii_alphanumeric() || c == '_' || c == '-')
}

fn sample_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

/// Draws sample `index` of the dataset defined by `(profile, seed)`.
pub fn generate_image(profile: &AnatomyProfile, image_size: usize, seed: u64, index: usize) -> Result<ImageTensor> {
    profile.validate()?;
    check_size(image_size)?;
    let n = image_size;
    let mut rng = sample_rng(seed, index);
    let mut field = vec![0.0f64; n * n];
    let coord = |i: usize| (2.0 * i as f64 + 1.0) / n as f64 - 1.0;

    let (lo, hi) = profile.ellipse_count_range;
    let count = rng.gen_range(lo..=hi);
    for _ in 0..count {
        let cx: f64 = rng.gen_range(-0.55..0.55);
        let cy: f64 = rng.gen_range(-0.55..0.55);
        let a: f64 = rng.gen_range(0.08..0.5);
        let b: f64 = rng.gen_range(0.08..0.5);
        let theta: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let amp: f64 = profile.contrast_scale * rng.gen_range(0.3..1.0) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        let (s, c) = theta.sin_cos();
        for i in 0..n {
            let y = coord(i) - cy;
            for j in 0..n {
                let x = coord(j) - cx;
                let u = x * c + y * s;
                let v = -x * s + y * c;
                if (u / a).powi(2) + (v / b).powi(2) <= 1.0 {
                    field[i * n + j] += amp;
                }
            }
        }
    }

    if profile.texture_frequency > 0.0 {
        let phi: f64 = rng.gen_range(0.0..std::f64::consts::PI);
        let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
        let amp = 0.25 * profile.contrast_scale;
        let (s, c) = phi.sin_cos();
        let k = std::f64::consts::PI * profile.texture_frequency;
        for i in 0..n {
            for j in 0..n {
                let t = coord(j) * c + coord(i) * s;
                field[i * n + j] += amp * (k * t + phase).sin();
            }
        }
    }

    let mean = field.iter().sum::<f64>() / field.len() as f64;
    let values: Vec<f32> = field
        .iter()
        .map(|v| (profile.intensity_mean + v - mean).clamp(0.0, 1.0) as f32)
        .collect();
    ImageTensor::from_real(n, n, &values)
}

fn check_size(image_size: usize) -> Result<()> {
    if image_size < 32 || image_size % 2 != 0 {
        return Err(Error::InvalidArgument(format!(
            "image_size must be even and >= 32, got {image_size}"
        )));
    }
    Ok(())
}

/// `profile.dataset_size` magnitude images of `image_size²` pixels.
pub fn generate_dataset(profile: &AnatomyProfile, image_size: usize, seed: u64) -> Result<Vec<ImageTensor>> {
    profile.validate()?;
    check_size(image_size)?;
    (0..profile.dataset_size)
        .map(|i| generate_image(profile, image_size, seed, i))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl DatasetSplit {
    pub fn len(&self) -> usize {
        self.train.len() + self.val.len() + self.test.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            _ => Err(Error::InvalidArgument(format!("unknown split `{s}`"))),
        }
    }
}

/// Random 80/10/10 split; sizes `round(0.8n)`, `round(0.1n)`, remainder.
pub fn split_dataset(n: usize, seed: u64) -> Result<DatasetSplit> {
    if n < 10 {
        return Err(Error::InvalidArgument(format!("need at least 10 samples to split, got {n}")));
    }
    let n_train = (0.8 * n as f64).round() as usize;
    let n_val = (0.1 * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let test = order.split_off(n_train + n_val);
    let val = order.split_off(n_train);
    Ok(DatasetSplit { train: order, val, test })
}

/// Center crop when the source covers the target, bilinear resize otherwise.
pub fn resize_or_crop(image: &ImageTensor, target: usize) -> Result<ImageTensor> {
    if target == 0 {
        return Err(Error::InvalidArgument("target size must be positive".into()));
    }
    let (h, w) = (image.height(), image.width());
    let mut out = Vec::with_capacity(2 * target * target);
    if h >= target && w >= target {
        let (r0, c0) = ((h - target) / 2, (w - target) / 2);
        for ch in 0..2 {
            let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
            for i in 0..target {
                out.extend_from_slice(&plane[(r0 + i) * w + c0..(r0 + i) * w + c0 + target]);
            }
        }
    } else {
        let src_coord = |dst: usize, src_len: usize| {
            let s = (dst as f64 + 0.5) * src_len as f64 / target as f64 - 0.5;
            let s = s.clamp(0.0, (src_len - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(src_len - 1);
            (i0, i1, s - i0 as f64)
        };
        for ch in 0..2 {
            let plane = &image.data()[ch * h * w..(ch + 1) * h * w];
            for i in 0..target {
                let (y0, y1, fy) = src_coord(i, h);
                for j in 0..target {
                    let (x0, x1, fx) = src_coord(j, w);
                    let p = |y: usize, x: usize| plane[y * w + x] as f64;
                    let top = p(y0, x0) * (1.0 - fx) + p(y0, x1) * fx;
                    let bot = p(y1, x0) * (1.0 - fx) + p(y1, x1) * fx;
                    out.push((top * (1.0 - fy) + bot * fy) as f32);
                }
            }
        }
    }
    ImageTensor::new(target, target, out)
}

/// On-disk description of a generated dataset directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub profile: AnatomyProfile,
    pub image_size: usize,
    pub seed: u64,
    pub split_seed: u64,
    pub split: DatasetSplit,
    pub images: Vec<String>,
}

/// A loaded single-anatomy dataset with its split.
#[derive(Clone, Debug)]
pub struct AnatomyData {
    pub name: String,
    pub images: Vec<ImageTensor>,
    pub split: DatasetSplit,
}

impl AnatomyData {
    pub fn generate(profile: &AnatomyProfile, image_size: usize, seed: u64) -> Result<Self> {
        let images = generate_dataset(profile, image_size, seed)?;
        let split = split_dataset(images.len(), seed)?;
        Ok(AnatomyData {
            name: profile.name.clone(),
            images,
            split,
        })
    }

    pub fn subset(&self, split: Split) -> impl Iterator<Item = (usize, &ImageTensor)> {
        self.split.get(split).iter().map(move |&i| (i, &self.images[i]))
    }

    pub fn image_size(&self) -> (usize, usize) {
        self.images
            .first()
            .map(|im| (im.height(), im.width()))
            .unwrap_or((0, 0))
    }
}

/// Writes images under `<dir>/images/` plus `<dir>/dataset.toml`.
pub fn save_dataset(
    dir: &Path,
    profile: &AnatomyProfile,
    image_size: usize,
    seed: u64,
    images: &[ImageTensor],
) -> Result<PathBuf> {
    let split = split_dataset(images.len(), seed)?;
    let img_dir = dir.join("images");
    let mut names = Vec::with_capacity(images.len());
    for (i, img) in images.iter().enumerate() {
        let stem = format!("img_{i:05}");
        io_store::write_tensor(&img_dir, &stem, &img.to_tensor())?;
        names.push(format!("images/{stem}.{}", io_store::TENSOR_EXT));
    }
    let manifest = DatasetManifest {
        profile: profile.clone(),
        image_size,
        seed,
        split_seed: seed,
        split,
        images: names,
    };
    let path = dir.join(DATASET_MANIFEST);
    io_store::write_toml(&path, &manifest)?;
    Ok(path)
}

pub fn load_dataset(dir: &Path) -> Result<(DatasetManifest, AnatomyData)> {
    let manifest: DatasetManifest = io_store::read_toml(&dir.join(DATASET_MANIFEST))?;
    let images = manifest
        .images
        .iter()
        .map(|f| ImageTensor::from_tensor(&io_store::read_tensor(&dir.join(f))?))
        .collect::<Result<Vec<_>>>()?;
    if manifest.split.len() != images.len() {
        return Err(Error::Manifest(format!(
            "split covers {} samples, dataset has {}",
            manifest.split.len(),
            images.len()
        )));
    }
    let data = AnatomyData {
        name: manifest.profile.name.clone(),
        images,
        split: manifest.split.clone(),
    };
    Ok((manifest, data))
}

/// Loads a stand-alone image tensor and fits it to `target`.
pub fn load_image(path: &Path, target: usize) -> Result<ImageTensor> {
    let t: Tensor = io_store::read_tensor(path)?;
    resize_or_crop(&ImageTensor::from_tensor(&t)?, target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn flat(mean: f64) -> AnatomyProfile {
        AnatomyProfile {
            anatomy_id: 9,
            name: "flat".into(),
            intensity_mean: mean,
            contrast_scale: 0.3,
            ellipse_count_range: (0, 0),
            texture_frequency: 0.0,
            dataset_size: 10,
        }
    }

    fn dataset_mean(images: &[ImageTensor]) -> f64 {
        let total: f64 = images.iter().flat_map(|im| im.real()).map(|&v| v as f64).sum();
        total / (images.len() * images[0].real().len()) as f64
    }

    #[test]
    fn degenerate_profile_is_flat_baseline() {
        let ds = generate_dataset(&flat(0.5), 32, 1).unwrap();
        for im in &ds {
            assert!(im.real().iter().all(|&v| v == 0.5));
            assert!(im.imag().iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn generation_is_deterministic_and_index_addressable() {
        let p = AnatomyProfile {
            dataset_size: 12,
            ..AnatomyProfile::knee_like()
        };
        let a = generate_dataset(&p, 32, 7).unwrap();
        let b = generate_dataset(&p, 32, 7).unwrap();
        assert_eq!(a, b);
        assert_eq!(generate_image(&p, 32, 7, 5).unwrap(), a[5]);
        let c = generate_dataset(&p, 32, 8).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn images_are_in_unit_range_with_zero_imaginary() {
        for p in [AnatomyProfile::brain_like(), AnatomyProfile::knee_like(), AnatomyProfile::cardiac_like()] {
            let p = AnatomyProfile { dataset_size: 10, ..p };
            for im in generate_dataset(&p, 64, 3).unwrap() {
                assert!(im.real().iter().all(|&v| (0.0..=1.0).contains(&v)));
                assert!(im.imag().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn invalid_profiles_and_sizes_are_rejected() {
        let ok = AnatomyProfile::brain_like();
        for bad in [
            AnatomyProfile { intensity_mean: 1.0, ..ok.clone() },
            AnatomyProfile { intensity_mean: 0.0, ..ok.clone() },
            AnatomyProfile { contrast_scale: 0.0, ..ok.clone() },
            AnatomyProfile { ellipse_count_range: (5, 2), ..ok.clone() },
            AnatomyProfile { texture_frequency: -1.0, ..ok.clone() },
            AnatomyProfile { dataset_size: 9, ..ok.clone() },
            AnatomyProfile { name: "a b".into(), ..ok.clone() },
        ] {
            assert!(generate_dataset(&bad, 32, 0).is_err(), "{bad:?}");
        }
        assert!(generate_dataset(&ok, 30, 0).is_err());
        assert!(generate_dataset(&ok, 33, 0).is_err());
    }

    #[test]
    fn dataset_mean_tracks_profile_mean() {
        for p in [AnatomyProfile::brain_like(), AnatomyProfile::knee_like(), AnatomyProfile::cardiac_like()] {
            let p = AnatomyProfile { dataset_size: 20, ..p };
            let m = dataset_mean(&generate_dataset(&p, 64, 11).unwrap());
            assert!((m - p.intensity_mean).abs() <= 0.05, "{}: {m}", p.name);
        }
    }

    #[test]
    fn split_sizes() {
        let s = split_dataset(100, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (80, 10, 10));
        let s = split_dataset(10, 0).unwrap();
        assert_eq!((s.train.len(), s.val.len(), s.test.len()), (8, 1, 1));
        assert_eq!(split_dataset(10, 0).unwrap(), s);
        assert!(split_dataset(9, 0).is_err());
    }

    #[test]
    fn split_is_a_partition() {
        for n in [10, 17, 20, 99, 200] {
            let s = split_dataset(n, n as u64).unwrap();
            let mut all: Vec<usize> = s.train.iter().chain(&s.val).chain(&s.test).copied().collect();
            all.sort_unstable();
            assert_eq!(all, (0..n).collect::<Vec<_>>());
            assert!((s.train.len() as f64 - 0.8 * n as f64).abs() <= 1.0);
        }
    }

    #[test]
    fn resize_or_crop_cases() {
        let img = generate_image(&AnatomyProfile { dataset_size: 10, ..AnatomyProfile::knee_like() }, 64, 1, 0).unwrap();
        assert_eq!(resize_or_crop(&img, 64).unwrap(), img);

        let big = ImageTensor::from_real(40, 40, &(0..1600).map(|i| i as f32).collect::<Vec<_>>()).unwrap();
        let crop = resize_or_crop(&big, 32).unwrap();
        assert_eq!(crop.real()[0], (4 * 40 + 4) as f32);
        assert_eq!(crop.real()[32 * 32 - 1], (35 * 40 + 35) as f32);

        let small = ImageTensor::from_real(16, 16, &[0.37; 256]).unwrap();
        let up = resize_or_crop(&small, 32).unwrap();
        assert!(up.real().iter().all(|&v| (v - 0.37).abs() < 1e-6));
        assert!(up.imag().iter().all(|&v| v == 0.0));

        assert!(resize_or_crop(&small, 0).is_err());
    }

    #[test]
    fn dataset_directory_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = AnatomyProfile { dataset_size: 10, ..AnatomyProfile::cardiac_like() };
        let images = generate_dataset(&p, 32, 4).unwrap();
        save_dataset(dir.path(), &p, 32, 4, &images).unwrap();
        let (manifest, data) = load_dataset(dir.path()).unwrap();
        assert_eq!(manifest.profile, p);
        assert_eq!(data.images, images);
        assert_eq!(data.split, split_dataset(10, 4).unwrap());
    }
}
