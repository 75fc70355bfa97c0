//! Per-class train/test image sets: the synthetic generator plus the CIFAR
//! binary loader, both normalized to channel-major `[0, 1]` reals.

pub mod cifar;

use std::collections::BTreeMap;

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Immutable per-class train/test splits with consistent image dimensions.
/// `image_bytes` is the native storage cost of one image under the memory
/// budget convention (one byte per pixel), independent of the in-memory
/// f64 representation.
#[derive(Debug, Clone)]
pub struct Dataset {
    train: BTreeMap<u32, Vec<Array3<f64>>>,
    test: BTreeMap<u32, Vec<Array3<f64>>>,
    dims: (usize, usize, usize),
    image_bytes: usize,
}

impl Dataset {
    pub fn new(
        train: BTreeMap<u32, Vec<Array3<f64>>>,
        test: BTreeMap<u32, Vec<Array3<f64>>>,
        image_bytes: usize,
    ) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Data("dataset has no classes".into()));
        }
        if image_bytes == 0 {
            return Err(Error::Data("image_bytes must be positive".into()));
        }
        let train_keys: Vec<u32> = train.keys().copied().collect();
        let test_keys: Vec<u32> = test.keys().copied().collect();
        if train_keys != test_keys {
            return Err(Error::Data(format!(
                "train classes {train_keys:?} do not match test classes {test_keys:?}"
            )));
        }
        let first = train
            .values()
            .flatten()
            .next()
            .ok_or_else(|| Error::Data("dataset has no images".into()))?;
        let dims = (first.shape()[0], first.shape()[1], first.shape()[2]);
        for (split, map) in [("train", &train), ("test", &test)] {
            for (&label, images) in map {
                if images.is_empty() {
                    return Err(Error::Data(format!(
                        "class {label} has no {split} images"
                    )));
                }
                for im in images {
                    if im.shape() != [dims.0, dims.1, dims.2] {
                        return Err(Error::Data(format!(
                            "class {label} {split} image has shape {:?}, dataset uses {dims:?}",
                            im.shape()
                        )));
                    }
                }
            }
        }
        Ok(Self {
            train,
            test,
            dims,
            image_bytes,
        })
    }

    pub fn class_ids(&self) -> Vec<u32> {
        self.train.keys().copied().collect()
    }

    pub fn num_classes(&self) -> usize {
        self.train.len()
    }

    pub fn dims(&self) -> (usize, usize, usize) {
        self.dims
    }

    pub fn image_bytes(&self) -> usize {
        self.image_bytes
    }

    pub fn train_of(&self, class: u32) -> Result<&[Array3<f64>]> {
        self.train
            .get(&class)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("class {class} not in the dataset")))
    }

    pub fn test_of(&self, class: u32) -> Result<&[Array3<f64>]> {
        self.test
            .get(&class)
            .map(Vec::as_slice)
            .ok_or_else(|| Error::Data(format!("class {class} not in the dataset")))
    }

    pub fn train_count(&self) -> usize {
        self.train.values().map(Vec::len).sum()
    }

    pub fn test_count(&self) -> usize {
        self.test.values().map(Vec::len).sum()
    }
}

/// Gaussian-template image generator: each class is a random template and
/// samples are the template plus pixel noise, everything clamped to [0, 1].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub num_classes: usize,
    pub samples_per_class: usize,
    pub test_per_class: usize,
    pub image_size: usize,
    pub channels: usize,
    /// Scale of the template offsets from mid-gray; larger separates
    /// classes further.
    pub separation: f64,
    /// Per-pixel sample noise scale; zero makes every sample the template.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            num_classes: 10,
            samples_per_class: 20,
            test_per_class: 10,
            image_size: 8,
            channels: 3,
            separation: 0.5,
            noise: 0.05,
            seed: 7,
        }
    }
}

impl SyntheticSpec {
    // Negated comparisons so a NaN fails validation.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.samples_per_class == 0 || self.test_per_class == 0 {
            return Err(Error::Config(
                "synthetic spec needs at least one class and one sample per split".into(),
            ));
        }
        if self.image_size == 0 || self.channels == 0 {
            return Err(Error::Config("synthetic images need positive dims".into()));
        }
        if !(self.separation > 0.0) {
            return Err(Error::Config(format!(
                "separation {} must be positive",
                self.separation
            )));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::Config(format!(
                "noise {} must be non-negative",
                self.noise
            )));
        }
        Ok(())
    }
}

/// Deterministic synthetic dataset: one ChaCha stream drives templates,
/// train draws, then test draws, so identical specs give identical bits.
pub fn gen_synthetic(spec: &SyntheticSpec) -> Result<Dataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let dims = (spec.channels, spec.image_size, spec.image_size);
    let draw = |template: Option<&Array3<f64>>, scale: f64, rng: &mut ChaCha8Rng| {
        Array3::from_shape_fn(dims, |idx| {
            let base = template.map_or(0.5, |t| t[idx]);
            let z: f64 = rng.sample(StandardNormal);
            (base + scale * z).clamp(0.0, 1.0)
        })
    };

    let mut train = BTreeMap::new();
    let mut test = BTreeMap::new();
    for class in 0..spec.num_classes as u32 {
        let template = draw(None, spec.separation, &mut rng);
        let train_images: Vec<Array3<f64>> = (0..spec.samples_per_class)
            .map(|_| draw(Some(&template), spec.noise, &mut rng))
            .collect();
        let test_images: Vec<Array3<f64>> = (0..spec.test_per_class)
            .map(|_| draw(Some(&template), spec.noise, &mut rng))
            .collect();
        train.insert(class, train_images);
        test.insert(class, test_images);
    }
    Dataset::new(train, test, spec.channels * spec.image_size * spec.image_size)
}
