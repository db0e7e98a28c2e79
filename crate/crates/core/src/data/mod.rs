//! Datasets and minibatching.
//!
//! Pixel values are exposed in `[-1, 1]`. Images keep their source channel
//! count so that colour augmentations can run before grey conversion; the
//! tensors handed to the encoder are produced by [`ImageSet::batch_tensor`].
//!
//! Ground-truth labels live beside the images in [`Dataset`] but the training
//! path only ever receives the [`ImageSet`].

mod batch;
mod cifar;
mod folder;
mod idx;
mod synthetic;

pub use batch::{BatchSampler, ImageBatch};
pub use cifar::load_cifar10;
pub use folder::{load_image_folder, FolderReport};
pub use idx::{load_idx_dataset, read_idx_images, read_idx_labels, IDX_IMAGES_MAGIC, IDX_LABELS_MAGIC};
pub use synthetic::{make_synthetic_blocks, synthetic_prototypes};

use std::sync::Arc;

use rand::seq::index::sample;

use crate::augment::{augment, AugmentSpec};
use crate::config::{DatasetName, ExperimentConfig};
use crate::error::{Error, Result};
use crate::rng::{stream, Rng, Stream};
use crate::tensor::Tensor;

/// ITU-R 601 luma weights.
pub const LUMA: [f64; 3] = [0.299, 0.587, 0.114];

pub fn luminance(r: f64, g: f64, b: f64) -> f64 {
    LUMA[0] * r + LUMA[1] * g + LUMA[2] * b
}

/// One image, channel-major, values in `[-1, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub data: Vec<f32>,
}

impl Image {
    /// Luminance-weighted single channel version (identity for grey images).
    pub fn to_gray(&self) -> Image {
        if self.channels == 1 {
            return self.clone();
        }
        let plane = self.height * self.width;
        let data = (0..plane)
            .map(|i| {
                luminance(
                    self.data[i] as f64,
                    self.data[plane + i] as f64,
                    self.data[2 * plane + i] as f64,
                ) as f32
            })
            .collect();
        Image {
            channels: 1,
            height: self.height,
            width: self.width,
            data,
        }
    }
}

/// Maps a byte to `[-1, 1]` (0 -> -1, 255 -> 1).
pub fn byte_to_unit(b: u8) -> f32 {
    b as f32 / 127.5 - 1.0
}

#[derive(Clone, Debug, PartialEq)]
enum Pixels {
    Bytes(Arc<Vec<u8>>),
    Floats(Arc<Vec<f32>>),
}

/// `N` images of identical shape.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSet {
    channels: usize,
    height: usize,
    width: usize,
    pixels: Pixels,
}

impl ImageSet {
    pub fn from_bytes(channels: usize, height: usize, width: usize, bytes: Vec<u8>) -> Self {
        assert_eq!(bytes.len() % (channels * height * width), 0);
        Self {
            channels,
            height,
            width,
            pixels: Pixels::Bytes(Arc::new(bytes)),
        }
    }

    /// Values are clipped to `[-1, 1]`.
    pub fn from_floats(channels: usize, height: usize, width: usize, mut values: Vec<f32>) -> Self {
        assert_eq!(values.len() % (channels * height * width), 0);
        for v in values.iter_mut() {
            *v = v.clamp(-1.0, 1.0);
        }
        Self {
            channels,
            height,
            width,
            pixels: Pixels::Floats(Arc::new(values)),
        }
    }

    pub fn len(&self) -> usize {
        let per = self.channels * self.height * self.width;
        match &self.pixels {
            Pixels::Bytes(b) => b.len() / per,
            Pixels::Floats(f) => f.len() / per,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn size(&self) -> (usize, usize) {
        (self.height, self.width)
    }

    pub fn image(&self, i: usize) -> Image {
        let per = self.channels * self.height * self.width;
        let data = match &self.pixels {
            Pixels::Bytes(b) => b[i * per..(i + 1) * per]
                .iter()
                .map(|&v| byte_to_unit(v))
                .collect(),
            Pixels::Floats(f) => f[i * per..(i + 1) * per].to_vec(),
        };
        Image {
            channels: self.channels,
            height: self.height,
            width: self.width,
            data,
        }
    }

    fn with_pixels(&self, pixels: Pixels) -> ImageSet {
        ImageSet {
            channels: self.channels,
            height: self.height,
            width: self.width,
            pixels,
        }
    }

    /// Raw bytes when the set is byte-backed.
    pub fn bytes(&self) -> Option<&[u8]> {
        match &self.pixels {
            Pixels::Bytes(b) => Some(b),
            Pixels::Floats(_) => None,
        }
    }

    pub fn select(&self, idx: &[usize]) -> ImageSet {
        let per = self.channels * self.height * self.width;
        let pixels = match &self.pixels {
            Pixels::Bytes(b) => {
                let mut out = Vec::with_capacity(idx.len() * per);
                for &i in idx {
                    out.extend_from_slice(&b[i * per..(i + 1) * per]);
                }
                Pixels::Bytes(Arc::new(out))
            }
            Pixels::Floats(f) => {
                let mut out = Vec::with_capacity(idx.len() * per);
                for &i in idx {
                    out.extend_from_slice(&f[i * per..(i + 1) * per]);
                }
                Pixels::Floats(Arc::new(out))
            }
        };
        self.with_pixels(pixels)
    }

    pub fn concat(&self, other: &ImageSet) -> Result<ImageSet> {
        if (self.channels, self.height, self.width) != (other.channels, other.height, other.width) {
            return Err(Error::Shape(format!(
                "cannot concatenate {}x{}x{} with {}x{}x{} images",
                self.channels, self.height, self.width, other.channels, other.height, other.width
            )));
        }
        let pixels = match (&self.pixels, &other.pixels) {
            (Pixels::Bytes(a), Pixels::Bytes(b)) => {
                Pixels::Bytes(Arc::new(a.iter().chain(b.iter()).copied().collect()))
            }
            _ => {
                let mut v: Vec<f32> = Vec::new();
                for set in [self, other] {
                    for i in 0..set.len() {
                        v.extend(set.image(i).data);
                    }
                }
                Pixels::Floats(Arc::new(v))
            }
        };
        Ok(self.with_pixels(pixels))
    }

    /// Number of channels the encoder sees.
    pub fn input_channels(&self, grayscale: bool) -> usize {
        if grayscale {
            1
        } else {
            self.channels
        }
    }

    /// Stacks images `idx` into `[m, c, h, w]`, optionally augmenting each one
    /// (before grey conversion) with draws from `rng`.
    pub fn batch_tensor(
        &self,
        idx: &[usize],
        grayscale: bool,
        augmentation: Option<(&AugmentSpec, &mut Rng)>,
    ) -> Tensor<f32> {
        let c = self.input_channels(grayscale);
        let mut data = Vec::with_capacity(idx.len() * c * self.height * self.width);
        let mut aug = augmentation;
        for &i in idx {
            let mut img = self.image(i);
            if let Some((spec, rng)) = aug.as_mut() {
                img = augment(&img, spec, rng);
            }
            if grayscale {
                img = img.to_gray();
            }
            data.extend(img.data);
        }
        Tensor::from_vec(vec![idx.len(), c, self.height, self.width], data)
    }
}

/// Images plus optional ground-truth labels (evaluation only).
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub images: ImageSet,
    pub labels: Option<Vec<usize>>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn num_classes(&self) -> Option<usize> {
        self.labels
            .as_ref()
            .map(|l| l.iter().copied().max().map_or(0, |m| m + 1))
    }

    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            images: self.images.select(idx),
            labels: self.labels.as_ref().map(|l| idx.iter().map(|&i| l[i]).collect()),
        }
    }

    /// Seeded uniform subset of `n` images (order preserved).
    pub fn subset(&self, n: usize, seed: u64) -> Dataset {
        if n == 0 || n >= self.len() {
            return self.clone();
        }
        let mut rng = stream(seed, Stream::Subset);
        let mut idx = sample(&mut rng, self.len(), n).into_vec();
        idx.sort_unstable();
        self.select(&idx)
    }
}

/// Loads the dataset named by `cfg` and applies `subset_size`.
pub fn load_dataset(cfg: &ExperimentConfig) -> Result<Dataset> {
    let ds = match cfg.dataset_name {
        DatasetName::Mnist | DatasetName::FashionMnist => {
            load_idx_dataset(&cfg.data_path, cfg.merge_train_test)?
        }
        DatasetName::Cifar10 => load_cifar10(&cfg.data_path, cfg.merge_train_test)?,
        DatasetName::ImageFolder => {
            let (ds, report) = load_image_folder(&cfg.data_path, cfg.image_size)?;
            if report.skipped > 0 {
                log::warn!(
                    "skipped {} unreadable files under {}",
                    report.skipped,
                    cfg.data_path.display()
                );
            }
            ds
        }
        DatasetName::SyntheticBlocks => make_synthetic_blocks(
            cfg.synthetic.n_per_class,
            cfg.image_size,
            cfg.synthetic.noise_std,
            cfg.seed,
        ),
    };
    if ds.images.size() != cfg.image_size {
        return Err(Error::Shape(format!(
            "dataset images are {:?}, config expects {:?}",
            ds.images.size(),
            cfg.image_size
        )));
    }
    Ok(ds.subset(cfg.subset_size, cfg.seed))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn byte_endpoints_map_to_unit_interval() {
        assert_eq!(byte_to_unit(0), -1.0);
        assert_eq!(byte_to_unit(255), 1.0);
    }

    #[test]
    fn luminance_of_primaries() {
        assert!((luminance(1.0, 0.0, 0.0) - 0.299).abs() < 1e-12);
        assert!((luminance(0.0, 1.0, 0.0) - 0.587).abs() < 1e-12);
        assert!((luminance(0.0, 0.0, 1.0) - 0.114).abs() < 1e-12);
    }

    #[test]
    fn gray_images_pass_through_gray_conversion() {
        let img = Image {
            channels: 3,
            height: 1,
            width: 2,
            data: vec![0.25, -0.5, 0.25, -0.5, 0.25, -0.5],
        };
        let g = img.to_gray();
        assert_eq!(g.channels, 1);
        assert!((g.data[0] - 0.25).abs() < 1e-6 && (g.data[1] + 0.5).abs() < 1e-6);
    }

    #[test]
    fn subset_is_seeded_and_sized() {
        let ds = make_synthetic_blocks(20, (8, 8), 0.0, 1);
        let a = ds.subset(10, 3);
        assert_eq!(a.len(), 10);
        assert_eq!(a, ds.subset(10, 3));
        assert_eq!(ds.subset(0, 3), ds);
    }
}
