//! 8-bit PNG load/save.
//!
//! Files are converted to real values in `[0,1]` on load (v/255) and written
//! back with round-half-up, so an untouched load/save cycle is lossless.

use std::path::Path;

use image::{ImageBuffer, Rgb};

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::scalar::{sc, Scalar};

/// Loads an 8-bit PNG as a 3-channel image in `[0,1]`.
pub fn load_png<T: Scalar>(path: &Path) -> Result<ImageTensor<T>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = img.dimensions();
    let scale = sc::<T>(1.0 / 255.0);
    ImageTensor::from_fn(h as usize, w as usize, 3, |y, x, c| {
        T::from_u8(img.get_pixel(x as u32, y as u32).0[c]).unwrap() * scale
    })
}

/// Saves a 3-channel image in `[0,1]` as an 8-bit PNG (round-half-up).
pub fn save_png<T: Scalar>(img: &ImageTensor<T>, path: &Path) -> Result<()> {
    if img.channels() != 3 {
        return Err(Error::Domain(format!(
            "png save expects 3 channels, got {}",
            img.channels()
        )));
    }
    let (h, w, _) = img.shape();
    let buf = ImageBuffer::from_fn(w as u32, h as u32, |x, y| {
        let px = |c: usize| -> u8 {
            let v = img.get(y as usize, x as usize, c).to_f64().unwrap();
            let q = (v * 255.0 + 0.5).floor();
            q.clamp(0.0, 255.0) as u8
        };
        Rgb([px(0), px(1), px(2)])
    });
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    buf.save_with_format(path, image::ImageFormat::Png)?;
    Ok(())
}
