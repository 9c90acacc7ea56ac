//! Under-display-camera degradation synthesis and dictionary-guided face
//! restoration, sized for a desk machine.
//!
//! The crate is generic over the working scalar (`f32` for speed, `f64` for
//! gradient checks); the [`Image32`]/[`Image64`] aliases cover the common
//! cases.

pub mod autodiff;
pub mod checkpoint;
pub mod dgformer;
pub mod dmnet;
pub mod gan;
pub mod error;
pub mod image;
pub mod imaging;
pub mod landmarks;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod oracles;
pub mod pipeline;
pub mod params;
pub mod pngio;
pub mod rng;
pub mod scalar;
pub mod selftest;

pub use error::{Error, Result};
pub use image::ImageTensor;
pub use scalar::Scalar;

pub type Image32 = ImageTensor<f32>;
pub type Image64 = ImageTensor<f64>;
