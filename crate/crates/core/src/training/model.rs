use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

use super::config::{ExperimentConfig, Strategy};
use crate::denoiser::Denoiser;
use crate::detector::{extract_detections, nms, Detection, Detector, HeadOutput};
use crate::error::{Error, Result};
use crate::params::{count_parameters, ParamStore, DENOISER_STORE, DETECTOR_STORE};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Independent random streams derived from one seed.
pub(crate) const DETECTOR_INIT_STREAM: u64 = 1;
pub(crate) const DENOISER_INIT_STREAM: u64 = 2;
pub(crate) const DATA_STREAM: u64 = 3;

pub(crate) fn stream_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Detector plus, for strategies that restore first, a denoiser.
#[derive(Clone, Debug)]
pub struct Model<T> {
    pub strategy: Strategy,
    pub detector: Detector,
    pub detector_params: ParamStore<T>,
    pub denoiser: Option<Denoiser>,
    pub denoiser_params: ParamStore<T>,
}

impl<T: Scalar> Model<T> {
    pub fn build(config: &ExperimentConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut detector_params = ParamStore::new(DETECTOR_STORE);
        let detector =
            Detector::new(&mut detector_params, config.detector.clone(), &mut stream_rng(seed, DETECTOR_INIT_STREAM))?;
        let mut denoiser_params = ParamStore::new(DENOISER_STORE);
        let denoiser = if config.strategy.uses_denoiser() {
            Some(Denoiser::new(
                &mut denoiser_params,
                config.denoiser.clone(),
                &mut stream_rng(seed, DENOISER_INIT_STREAM),
            )?)
        } else {
            None
        };
        Ok(Model { strategy: config.strategy, detector, detector_params, denoiser, denoiser_params })
    }

    /// Restores `images` when a denoiser is present.
    pub fn restore(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        match &self.denoiser {
            Some(d) => d.denoise(&self.denoiser_params, images),
            None => Ok(images.clone()),
        }
    }

    /// Full inference path: restoration (if any), then detection.
    pub fn predict(&self, images: &Tensor<T>) -> Result<HeadOutput<T>> {
        self.detect_raw(&self.restore(images)?)
    }

    /// Detection without restoration.
    pub fn detect_raw(&self, images: &Tensor<T>) -> Result<HeadOutput<T>> {
        self.detector.predict(&self.detector_params, images)
    }

    /// Post-NMS detections for one `(C, H, W)` image.
    pub fn detect_image(&self, image: &Tensor<T>, min_confidence: f64, nms_iou: f64) -> Result<Vec<Detection<T>>> {
        if image.rank() != 3 {
            return Err(Error::input(format!("expected a (C, H, W) image, got {:?}", image.shape())));
        }
        let out = self.predict(&image.unsqueeze0())?;
        let dets = extract_detections(&out, T::lit(min_confidence)).pop().unwrap_or_default();
        Ok(nms(&dets, T::lit(nms_iou), T::lit(min_confidence)))
    }

    pub fn stores(&self) -> Vec<&ParamStore<T>> {
        if self.denoiser.is_some() {
            vec![&self.detector_params, &self.denoiser_params]
        } else {
            vec![&self.detector_params]
        }
    }

    pub fn parameter_count(&self) -> usize {
        count_parameters(&self.stores())
    }

    /// Hash over every parameter value of the model.
    pub fn param_hash(&self) -> String {
        let mut h = Sha256::new();
        for s in self.stores() {
            h.update(s.content_hash().as_bytes());
        }
        format!("{:x}", h.finalize())
    }
}
