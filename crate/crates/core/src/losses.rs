//! Differentiable training losses shared by both models.

use ndarray::ArrayD;

use crate::autodiff::conv::conv2d;
use crate::autodiff::{Tape, Tensor};
use crate::nn::LEAKY_SLOPE;
use crate::params;
use crate::rng::{rng_for, Stream};
use crate::scalar::{sc, Scalar};

/// Keeps the PSNR objective finite when the prediction is exact.
pub const PSNR_GUARD: f64 = 1e-12;

/// Seed of the fixed feature pyramid behind the perceptual loss.
pub const PERCEPTUAL_SEED: u64 = 1234;

/// Mean absolute difference.
pub fn l1_loss<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    a.sub(b).abs().mean_all()
}

/// Negative PSNR in dB: `10 * log10(mse + guard)`. Lower is better; a
/// perfect prediction bottoms out near -120 dB instead of diverging.
pub fn psnr_loss<T: Scalar>(pred: &Tensor<T>, target: &Tensor<T>) -> Tensor<T> {
    let mse = pred.sub(target).square().mean_all();
    mse.add_scalar(sc(PSNR_GUARD))
        .ln()
        .mul_scalar(sc(10.0 / std::f64::consts::LN_10))
}

/// Discriminator objective: `-mean[log s(real) + log(1 - s(fake))]` in the
/// numerically safe softplus form. All-zero logits give `2 ln 2`.
pub fn adversarial_d_loss<T: Scalar>(real: &Tensor<T>, fake: &Tensor<T>) -> Tensor<T> {
    let on_real = real.mul_scalar(sc(-1.0)).softplus().mean_all();
    let on_fake = fake.softplus().mean_all();
    on_real.add(&on_fake)
}

/// Non-saturating generator objective: `-mean log s(fake)`. All-zero logits
/// give `ln 2`.
pub fn adversarial_g_loss<T: Scalar>(fake: &Tensor<T>) -> Tensor<T> {
    fake.mul_scalar(sc(-1.0)).softplus().mean_all()
}

/// A five-stage random conv pyramid with frozen weights. Comparing deep
/// activations of two images gives a cheap stand-in for a pretrained
/// perceptual metric while staying fully self-contained and deterministic.
pub struct FeaturePyramid<T: Scalar> {
    weights: Vec<ArrayD<T>>,
}

const PYRAMID_CHANNELS: [usize; 6] = [3, 8, 16, 32, 64, 64];

impl<T: Scalar> Default for FeaturePyramid<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> FeaturePyramid<T> {
    pub fn new() -> Self {
        let mut rng = rng_for(PERCEPTUAL_SEED, Stream::ParamInit);
        let weights = (0..PYRAMID_CHANNELS.len() - 1)
            .map(|i| {
                params::kaiming::<T, _>(
                    &mut rng,
                    &[PYRAMID_CHANNELS[i + 1], PYRAMID_CHANNELS[i], 3, 3],
                )
            })
            .collect();
        Self { weights }
    }

    /// Deepest stage activations; each stage halves the resolution.
    pub fn deepest(&self, tape: &Tape<T>, x: &Tensor<T>) -> Tensor<T> {
        let mut f = x.clone();
        for w in &self.weights {
            let w = tape.constant(w.clone());
            f = conv2d(&f, &w, 2, 1).leaky_relu(sc(LEAKY_SLOPE));
        }
        f
    }
}

/// L1 between deepest pyramid activations of prediction and target.
pub fn perceptual_loss<T: Scalar>(
    pyramid: &FeaturePyramid<T>,
    tape: &Tape<T>,
    pred: &Tensor<T>,
    target: &Tensor<T>,
) -> Tensor<T> {
    l1_loss(
        &pyramid.deepest(tape, pred),
        &pyramid.deepest(tape, target),
    )
}
