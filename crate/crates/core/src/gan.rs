//! Adversarial training of the degradation model.
//!
//! A patch discriminator judges local realism of generated degraded images;
//! the generator minimizes negative PSNR plus perceptual and non-saturating
//! adversarial terms. Generator and discriminator keep separate parameter
//! stores and Adam states, and each step touches only its own side.

use ndarray::ArrayD;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::dmnet::{DMNet, DMNetConfig};
use crate::error::{Error, Result};
use crate::losses::{
    adversarial_d_loss, adversarial_g_loss, perceptual_loss, psnr_loss, FeaturePyramid,
};
use crate::nn::{Conv2d, WInit, LEAKY_SLOPE};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::rng::{rng_for, Stream};
use crate::scalar::{sc, Scalar};

/// Smallest input side the discriminator accepts.
pub const PATCHGAN_MIN_SIDE: usize = 16;

/// Patch discriminator: three stride-2 convs (32, 64, 128 channels) and a
/// final padded 3x3 conv to one logit per patch. A 64x64 input yields an
/// 8x8 logit map; a 16x16 input still yields 2x2.
pub struct PatchGan {
    convs: Vec<Conv2d>,
    head: Conv2d,
}

impl PatchGan {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, seed: u64) -> Self {
        let mut rng = rng_for(seed, Stream::ParamInit);
        let widths = [3usize, 32, 64, 128];
        let convs = (0..3)
            .map(|i| {
                Conv2d::new(
                    store,
                    &mut rng,
                    &format!("d/c{i}"),
                    widths[i],
                    widths[i + 1],
                    4,
                    2,
                    1,
                    WInit::Kaiming,
                )
            })
            .collect();
        let head = Conv2d::new(store, &mut rng, "d/head", 128, 1, 3, 1, 1, WInit::Kaiming);
        Self { convs, head }
    }

    /// Logit map for a batch of (n, 3, h, w) images.
    pub fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<Tensor<T>> {
        let shape = x.shape();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "discriminator expects (n, 3, h, w), got {shape:?}"
            )));
        }
        if shape[2] < PATCHGAN_MIN_SIDE || shape[3] < PATCHGAN_MIN_SIDE {
            return Err(Error::Size(format!(
                "discriminator input {}x{} is below the {}px minimum",
                shape[2], shape[3], PATCHGAN_MIN_SIDE
            )));
        }
        let mut f = x.clone();
        for conv in &self.convs {
            f = conv.forward(tape, store, &f).leaky_relu(sc(LEAKY_SLOPE));
        }
        Ok(self.head.forward(tape, store, &f))
    }
}

/// Scales of the generator's auxiliary loss terms; the PSNR term always has
/// weight 1.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub perceptual: f64,
    pub adversarial: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            perceptual: 1.0,
            adversarial: 1.0,
        }
    }
}

/// Optimization settings for a degradation-model run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr_init: f64,
    pub lr_final: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub iterations: u64,
    pub batch_size: usize,
    pub crop_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_init: 1e-4,
            lr_final: 1e-7,
            beta1: 0.9,
            beta2: 0.99,
            iterations: 80_000,
            batch_size: 8,
            crop_size: 512,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_init > 0.0 && self.lr_final > 0.0 && self.lr_final <= self.lr_init) {
            return Err(Error::Config(
                "learning rates must be positive with lr_final <= lr_init".into(),
            ));
        }
        if self.batch_size == 0 || self.iterations == 0 {
            return Err(Error::Config("batch_size and iterations must be >= 1".into()));
        }
        Ok(())
    }
}

/// Loss values from one adversarial step, already plain numbers.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct StepLosses {
    pub l_psnr: f64,
    pub l_per: f64,
    pub l_adv: f64,
    pub d_loss: f64,
}

/// Everything needed to run adversarial degradation training.
pub struct GanTrainer<T: Scalar> {
    pub model: DMNet,
    pub gen_store: ParamStore<T>,
    pub gen_adam: AdamState,
    pub disc: PatchGan,
    pub disc_store: ParamStore<T>,
    pub disc_adam: AdamState,
    pub pyramid: FeaturePyramid<T>,
    pub weights: LossWeights,
    pub adam_cfg: AdamConfig,
}

impl<T: Scalar> GanTrainer<T> {
    pub fn new(
        cfg: &DMNetConfig,
        train: &TrainConfig,
        weights: LossWeights,
    ) -> Result<Self> {
        train.validate()?;
        let mut gen_store = ParamStore::new();
        let mut rng = rng_for(train.seed, Stream::ParamInit);
        let model = DMNet::new(&mut gen_store, &mut rng, cfg)?;
        let gen_adam = AdamState::new(&gen_store);
        let mut disc_store = ParamStore::new();
        // Offset the seed so the discriminator never mirrors generator draws.
        let disc = PatchGan::new(&mut disc_store, train.seed ^ 0x5a5a_5a5a);
        let disc_adam = AdamState::new(&disc_store);
        Ok(Self {
            model,
            gen_store,
            gen_adam,
            disc,
            disc_store,
            disc_adam,
            pyramid: FeaturePyramid::new(),
            weights,
            adam_cfg: AdamConfig::adam(train.beta1, train.beta2),
        })
    }

    /// One adversarial round: a discriminator step on detached generator
    /// output, then a generator step against the updated discriminator.
    pub fn step(
        &mut self,
        clean: &ArrayD<T>,
        degraded: &ArrayD<T>,
        lr: f64,
    ) -> Result<StepLosses> {
        if clean.shape() != degraded.shape() {
            return Err(Error::ShapeMismatch(format!(
                "clean {:?} vs degraded {:?}",
                clean.shape(),
                degraded.shape()
            )));
        }

        // Discriminator step. The generator output is detached, so no
        // generator gradient exists on this tape.
        let d_loss = {
            let tape = Tape::new();
            let x = tape.constant(clean.clone());
            let y = tape.constant(degraded.clone());
            let fake = self
                .model
                .forward(&tape, &self.gen_store, &x)?
                .degraded
                .detach();
            let real_logits = self.disc.forward(&tape, &self.disc_store, &y)?;
            let fake_logits = self.disc.forward(&tape, &self.disc_store, &fake)?;
            let loss = adversarial_d_loss(&real_logits, &fake_logits);
            tape.backward(&loss);
            let grads = tape.param_grads(&self.disc_store);
            adam_step(
                &mut self.disc_store,
                &mut self.disc_adam,
                &grads,
                lr,
                &self.adam_cfg,
            );
            loss.scalar().to_f64().unwrap()
        };

        // Generator step against the just-updated discriminator. The
        // discriminator parameters are staged on this tape too, but only the
        // generator store's gradients are read back.
        let tape = Tape::new();
        let x = tape.constant(clean.clone());
        let y = tape.constant(degraded.clone());
        let fake = self.model.forward(&tape, &self.gen_store, &x)?.degraded;
        let l_psnr = psnr_loss(&fake, &y);
        let l_per = perceptual_loss(&self.pyramid, &tape, &fake, &y);
        let fake_logits = self.disc.forward(&tape, &self.disc_store, &fake)?;
        let l_adv = adversarial_g_loss(&fake_logits);
        let total = l_psnr
            .add(&l_per.mul_scalar(sc(self.weights.perceptual)))
            .add(&l_adv.mul_scalar(sc(self.weights.adversarial)));
        tape.backward(&total);
        let grads = tape.param_grads(&self.gen_store);
        adam_step(
            &mut self.gen_store,
            &mut self.gen_adam,
            &grads,
            lr,
            &self.adam_cfg,
        );

        Ok(StepLosses {
            l_psnr: l_psnr.scalar().to_f64().unwrap(),
            l_per: l_per.scalar().to_f64().unwrap(),
            l_adv: l_adv.scalar().to_f64().unwrap(),
            d_loss,
        })
    }
}
