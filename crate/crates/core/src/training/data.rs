use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::degrade::{label_path_for, list_images};
use crate::detector::{parse_labels, Label};
use crate::error::{Error, Result};
use crate::imageio::{hflip, load_rgb};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// One annotated image. `image` is what the model sees at inference
/// (normally the degraded version); `clean` is its restoration target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample<T> {
    pub name: String,
    pub image: Tensor<T>,
    pub clean: Option<Tensor<T>>,
    pub labels: Vec<Label<T>>,
}

impl<T: Scalar> Sample<T> {
    pub fn flipped(&self) -> Self {
        Sample {
            name: self.name.clone(),
            image: hflip(&self.image),
            clean: self.clean.as_ref().map(hflip),
            labels: self.labels.iter().map(|l| Label { class_id: l.class_id, bbox: l.bbox.hflip() }).collect(),
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Dataset<T> {
    pub samples: Vec<Sample<T>>,
}

fn read_labels<T: Scalar>(dir: &Path, image_rel: &str) -> Result<Vec<Label<T>>> {
    let path = dir.join(label_path_for(image_rel));
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    parse_labels(&text).map_err(|e| Error::input(format!("{}: {e}", path.display())))
}

impl<T: Scalar> Dataset<T> {
    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Images and labels of one directory.
    pub fn load_dir(dir: &Path) -> Result<Self> {
        let mut samples = Vec::new();
        for rel in list_images(dir)? {
            samples.push(Sample {
                image: load_rgb(&dir.join(&rel))?,
                clean: None,
                labels: read_labels(dir, &rel)?,
                name: rel,
            });
        }
        Ok(Dataset { samples })
    }

    /// Degraded images paired with their clean sources by relative path.
    /// Labels come from the degraded directory.
    pub fn load_paired(degraded_dir: &Path, clean_dir: &Path) -> Result<Self> {
        let mut ds = Self::load_dir(degraded_dir)?;
        for s in &mut ds.samples {
            let path = clean_dir.join(&s.name);
            if !path.is_file() {
                return Err(Error::config(format!("no clean counterpart for {} in {}", s.name, clean_dir.display())));
            }
            let clean: Tensor<T> = load_rgb(&path)?;
            if clean.shape() != s.image.shape() {
                return Err(Error::input(format!("{}: clean and degraded sizes differ", s.name)));
            }
            s.clean = Some(clean);
        }
        Ok(ds)
    }

    pub fn is_paired(&self) -> bool {
        self.samples.iter().all(|s| s.clean.is_some())
    }

    /// Copy whose `image` is the clean version of every sample.
    pub fn clean_view(&self) -> Result<Self> {
        let samples = self
            .samples
            .iter()
            .map(|s| {
                let clean = s.clean.clone().ok_or_else(|| Error::config(format!("{} has no clean image", s.name)))?;
                Ok(Sample { name: s.name.clone(), image: clean.clone(), clean: Some(clean), labels: s.labels.clone() })
            })
            .collect::<Result<_>>()?;
        Ok(Dataset { samples })
    }

    /// Shared `(H, W)` of all images.
    pub fn image_size(&self) -> Result<(usize, usize)> {
        let first = self.samples.first().ok_or_else(|| Error::input("dataset is empty"))?;
        let dims = |t: &Tensor<T>| (t.shape()[1], t.shape()[2]);
        let size = dims(&first.image);
        if let Some(s) = self.samples.iter().find(|s| dims(&s.image) != size) {
            return Err(Error::input(format!("{} is {:?}, expected {:?}", s.name, dims(&s.image), size)));
        }
        Ok(size)
    }

    pub fn cast<U: Scalar>(&self) -> Dataset<U> {
        Dataset {
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    name: s.name.clone(),
                    image: s.image.cast(),
                    clean: s.clean.as_ref().map(Tensor::cast),
                    labels: s.labels.iter().map(|l| Label { class_id: l.class_id, bbox: l.bbox.cast() }).collect(),
                })
                .collect(),
        }
    }
}

/// A stacked minibatch.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub clean: Option<Tensor<T>>,
    pub labels: Vec<Vec<Label<T>>>,
}

impl<T: Scalar> Batch<T> {
    pub fn from_samples(samples: &[Sample<T>]) -> Result<Self> {
        let images: Vec<Tensor<T>> = samples.iter().map(|s| s.image.unsqueeze0()).collect();
        let clean = if samples.iter().all(|s| s.clean.is_some()) {
            let parts: Vec<Tensor<T>> = samples.iter().map(|s| s.clean.as_ref().expect("checked").unsqueeze0()).collect();
            Some(Tensor::stack_batch(&parts)?)
        } else {
            None
        };
        Ok(Batch {
            images: Tensor::stack_batch(&images)?,
            clean,
            labels: samples.iter().map(|s| s.labels.clone()).collect(),
        })
    }
}

/// One epoch of minibatches: a seeded shuffle, then (optionally) a fair
/// coin per sample deciding a horizontal flip.
pub fn epoch_batches<T: Scalar, R: Rng>(data: &Dataset<T>, batch_size: usize, flip: bool, rng: &mut R) -> Result<Vec<Batch<T>>> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let samples: Vec<Sample<T>> = order
        .into_iter()
        .map(|i| {
            let s = &data.samples[i];
            if flip && rng.gen_bool(0.5) {
                s.flipped()
            } else {
                s.clone()
            }
        })
        .collect();
    samples.chunks(batch_size.max(1)).map(Batch::from_samples).collect()
}
