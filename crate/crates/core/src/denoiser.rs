//! Small U-shaped restoration network that predicts a residual correction.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::denoise_loss_grad;
use crate::nn::{Conv, ConvNormAct};
use crate::optim::Optimizer;
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DenoiserConfig {
    pub channels: usize,
    pub base_width: usize,
}

impl Default for DenoiserConfig {
    fn default() -> Self {
        DenoiserConfig { channels: 3, base_width: 8 }
    }
}

/// Three-level encoder/decoder with skip connections. The last layer is
/// zero-initialized and added to the input, then clipped to `[0, 1]`.
#[derive(Clone, Debug)]
pub struct Denoiser {
    pub config: DenoiserConfig,
    enc1: ConvNormAct,
    enc2: ConvNormAct,
    enc3: ConvNormAct,
    bottleneck: ConvNormAct,
    dec2: ConvNormAct,
    dec1: ConvNormAct,
    pub residual: Conv,
}

impl Denoiser {
    pub fn new<T: Scalar, R: Rng + ?Sized>(store: &mut ParamStore<T>, config: DenoiserConfig, rng: &mut R) -> Result<Self> {
        let (c, w) = (config.channels, config.base_width);
        if c == 0 || w == 0 {
            return Err(Error::config("denoiser widths must be positive"));
        }
        let residual = Conv::new(store, "denoiser.residual", w, c, 3, 1, 1, true, rng);
        store.get_mut(residual.weight).fill(T::zero());
        Ok(Denoiser {
            enc1: ConvNormAct::new(store, "denoiser.enc1", c, w, 3, 1, 1, rng),
            enc2: ConvNormAct::new(store, "denoiser.enc2", w, 2 * w, 3, 2, 1, rng),
            enc3: ConvNormAct::new(store, "denoiser.enc3", 2 * w, 4 * w, 3, 2, 1, rng),
            bottleneck: ConvNormAct::new(store, "denoiser.bottleneck", 4 * w, 4 * w, 3, 1, 1, rng),
            dec2: ConvNormAct::new(store, "denoiser.dec2", 6 * w, 2 * w, 3, 1, 1, rng),
            dec1: ConvNormAct::new(store, "denoiser.dec1", 3 * w, w, 3, 1, 1, rng),
            residual,
            config,
        })
    }

    pub fn forward<T: Scalar>(&self, g: &mut Graph<T>, store: &ParamStore<T>, degraded: Var) -> Result<Var> {
        let (_, c, h, w) = g.value(degraded).dims4()?;
        if h % 4 != 0 || w % 4 != 0 || h == 0 || w == 0 {
            return Err(Error::input(format!("image size {h}×{w} must be a positive multiple of 4")));
        }
        if c != self.config.channels {
            return Err(Error::config(format!("denoiser expects {} channels, got {c}", self.config.channels)));
        }
        let e1 = self.enc1.forward(g, store, degraded)?;
        let e2 = self.enc2.forward(g, store, e1)?;
        let e3 = self.enc3.forward(g, store, e2)?;
        let b = self.bottleneck.forward(g, store, e3)?;
        let up2 = g.upsample2x(b)?;
        let cat2 = g.concat(&[up2, e2])?;
        let d2 = self.dec2.forward(g, store, cat2)?;
        let up1 = g.upsample2x(d2)?;
        let cat1 = g.concat(&[up1, e1])?;
        let d1 = self.dec1.forward(g, store, cat1)?;
        let r = self.residual.forward(g, store, d1)?;
        let y = g.add(degraded, r)?;
        Ok(g.clamp01(y))
    }

    pub fn denoise<T: Scalar>(&self, store: &ParamStore<T>, degraded: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(degraded.clone());
        let y = self.forward(&mut g, store, x)?;
        Ok(g.value(y).clone())
    }

    /// One gradient step on the restoration loss alone; returns the loss
    /// measured before the update.
    pub fn pretrain_step<T: Scalar>(
        &self,
        store: &mut ParamStore<T>,
        optimizer: &mut Optimizer<T>,
        degraded: &Tensor<T>,
        clean: &Tensor<T>,
    ) -> Result<T> {
        if degraded.shape() != clean.shape() {
            return Err(Error::input(format!(
                "degraded {:?} and clean {:?} batches differ",
                degraded.shape(),
                clean.shape()
            )));
        }
        let mut g = Graph::new();
        let x = g.input(degraded.clone());
        let y = self.forward(&mut g, store, x)?;
        let (loss, grad) = denoise_loss_grad(g.value(y), clean)?;
        let root = g.linearized(loss, vec![(y, grad)])?;
        let grads = g.backward(root)?;
        optimizer.step(store, &grads.into_params())?;
        Ok(loss)
    }

    pub fn param_ids(&self) -> Vec<ParamId> {
        [&self.enc1, &self.enc2, &self.enc3, &self.bottleneck, &self.dec2, &self.dec1]
            .iter()
            .flat_map(|l| l.param_ids())
            .chain(self.residual.param_ids())
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::optim::OptimizerConfig;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn build(width: usize) -> (Denoiser, ParamStore<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut store = ParamStore::new(crate::params::DENOISER_STORE);
        let d = Denoiser::new(&mut store, DenoiserConfig { channels: 3, base_width: width }, &mut rng).unwrap();
        (d, store)
    }

    #[test]
    fn zero_residual_is_identity() {
        let (d, store) = build(4);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::<f64>::from_fn(&[2, 3, 8, 8], |_| rng.gen_range(0.0..=1.0));
        assert_eq!(d.denoise(&store, &x).unwrap(), x);
    }

    #[test]
    fn output_range_and_shape() {
        let (d, mut store) = build(4);
        // push the residual far out of range
        let b = d.residual.bias.unwrap();
        store.get_mut(b).fill(5.0);
        let x = Tensor::<f64>::full(&[1, 3, 16, 12], 0.3);
        let y = d.denoise(&store, &x).unwrap();
        assert_eq!(y.shape(), x.shape());
        assert!(y.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn rejects_bad_sizes() {
        let (d, store) = build(4);
        assert!(matches!(d.denoise(&store, &Tensor::zeros(&[1, 3, 6, 8])), Err(Error::Input(_))));
        let mut opt = Optimizer::new(OptimizerConfig::default());
        let (mut s2, a, b) = (store.clone(), Tensor::zeros(&[1, 3, 8, 8]), Tensor::zeros(&[1, 3, 8, 4]));
        assert!(matches!(d.pretrain_step(&mut s2, &mut opt, &a, &b), Err(Error::Input(_))));
    }

    #[test]
    fn zero_learning_rate_leaves_params_and_reports_prestep_loss() {
        let (d, mut store) = build(4);
        let before = store.clone();
        let mut opt = Optimizer::new(OptimizerConfig::Sgd { lr: 0.0, momentum: 0.9 });
        let x = Tensor::<f64>::full(&[1, 3, 8, 8], 0.2);
        let y = Tensor::<f64>::full(&[1, 3, 8, 8], 0.6);
        let loss = d.pretrain_step(&mut store, &mut opt, &x, &y).unwrap();
        assert_eq!(store, before);
        let expected = crate::losses::denoise_loss(&d.denoise(&before, &x).unwrap(), &y).unwrap();
        assert_eq!(loss, expected);
    }
}
