//! Classical under-display-camera degradation model.
//!
//! A degraded frame is `clamp((alpha * x) convolved with k + n, 0, 1)`:
//! `alpha` models panel light transmission loss, `k` is the display's point
//! spread function, `n` is additive noise. The same two-stage view
//! (attenuation, then diffraction) is exposed via [`compose_two_stage`] so
//! the classical model and the learned generator share one interface.

use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::rng::{rng_for, Stream};
use crate::scalar::{sc, Scalar};

/// 2-D point spread function: odd side length, nonnegative weights,
/// normalized to unit sum on construction.
#[derive(Debug, Clone, PartialEq)]
pub struct PsfKernel<T: Scalar> {
    size: usize,
    weights: Array2<T>,
}

impl<T: Scalar> PsfKernel<T> {
    /// Builds a kernel from raw weights, normalizing them to unit sum.
    pub fn from_weights(weights: Array2<T>) -> Result<Self> {
        let (h, w) = weights.dim();
        if h != w || h % 2 == 0 {
            return Err(Error::Domain(format!(
                "kernel must be square with odd side, got {h}x{w}"
            )));
        }
        if weights.iter().any(|v| !v.is_finite() || *v < T::zero()) {
            return Err(Error::Data("kernel weights must be finite and >= 0".into()));
        }
        let sum = weights.iter().fold(T::zero(), |a, &b| a + b);
        if sum <= T::zero() {
            return Err(Error::Data("kernel weights sum to zero".into()));
        }
        Ok(Self {
            size: h,
            weights: weights.mapv(|v| v / sum),
        })
    }

    /// 1x1 identity kernel.
    pub fn delta() -> Self {
        Self::from_weights(Array2::from_elem((1, 1), T::one())).unwrap()
    }

    /// Uniform box kernel of odd side `size`.
    pub fn box_filter(size: usize) -> Result<Self> {
        Self::from_weights(Array2::from_elem((size, size), T::one()))
    }

    /// Gaussian kernel of odd side `size` with standard deviation `sigma`.
    pub fn gaussian(size: usize, sigma: f64) -> Result<Self> {
        if sigma <= 0.0 {
            return Err(Error::Domain("gaussian sigma must be > 0".into()));
        }
        let r = (size / 2) as f64;
        let w = Array2::from_shape_fn((size, size), |(i, j)| {
            let dy = i as f64 - r;
            let dx = j as f64 - r;
            sc::<T>((-(dx * dx + dy * dy) / (2.0 * sigma * sigma)).exp())
        });
        Self::from_weights(w)
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn weights(&self) -> &Array2<T> {
        &self.weights
    }
}

/// Additive noise description. `kind = None` produces exactly zero noise.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum NoiseKind {
    None,
    Gaussian,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    /// Standard deviation in `[0,1]` pixel units.
    pub sigma: f64,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn none() -> Self {
        Self {
            kind: NoiseKind::None,
            sigma: 0.0,
            seed: 0,
        }
    }

    pub fn gaussian(sigma: f64, seed: u64) -> Result<Self> {
        if !(0.0..=1.0).contains(&sigma) {
            return Err(Error::Domain(format!(
                "noise sigma must be in [0,1], got {sigma}"
            )));
        }
        Ok(Self {
            kind: NoiseKind::Gaussian,
            sigma,
            seed,
        })
    }
}

/// Mirror index without repeating the edge sample (…, 2, 1, 0 | 1, 2, …).
fn reflect_index(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * (n - 1) - i;
        } else {
            return i as usize;
        }
    }
}

/// Reflect-pads one channel plane by `r` on every side.
fn reflect_pad_plane<T: Scalar>(img: &ImageTensor<T>, channel: usize, r: usize) -> Array2<T> {
    let (h, w, _) = img.shape();
    Array2::from_shape_fn((h + 2 * r, w + 2 * r), |(i, j)| {
        let y = reflect_index(i as isize - r as isize, h);
        let x = reflect_index(j as isize - r as isize, w);
        img.get(y, x, channel)
    })
}

/// Convolves every channel with the PSF.
///
/// The boundary is reflect-padded, the kernel is flipped (true convolution),
/// and the padded plane is convolved circularly via FFT; only the valid
/// center region is kept, which equals direct spatial summation.
pub fn convolve_psf<T: Scalar>(
    image: &ImageTensor<T>,
    kernel: &PsfKernel<T>,
) -> Result<ImageTensor<T>> {
    let (h, w, channels) = image.shape();
    if kernel.size() > h.min(w) {
        return Err(Error::Size(format!(
            "kernel side {} exceeds image min side {}",
            kernel.size(),
            h.min(w)
        )));
    }
    if kernel.size() == 1 {
        let k = kernel.weights()[(0, 0)];
        return image.map(|v| v * k);
    }

    let s = kernel.size();
    let r = s / 2;
    let ph = h + 2 * r;
    let pw = w + 2 * r;

    let mut planner = FftPlanner::<T>::new();
    let fft_row = planner.plan_fft_forward(pw);
    let ifft_row = planner.plan_fft_inverse(pw);
    let fft_col = planner.plan_fft_forward(ph);
    let ifft_col = planner.plan_fft_inverse(ph);

    let fft2 = |grid: &mut Vec<Complex<T>>, inverse: bool| {
        // rows
        for row in grid.chunks_exact_mut(pw) {
            if inverse {
                ifft_row.process(row);
            } else {
                fft_row.process(row);
            }
        }
        // columns
        let mut col = vec![Complex::new(T::zero(), T::zero()); ph];
        for x in 0..pw {
            for y in 0..ph {
                col[y] = grid[y * pw + x];
            }
            if inverse {
                ifft_col.process(&mut col);
            } else {
                fft_col.process(&mut col);
            }
            for y in 0..ph {
                grid[y * pw + x] = col[y];
            }
        }
    };

    // Kernel spectrum, shared by all channels.
    let mut kgrid = vec![Complex::new(T::zero(), T::zero()); ph * pw];
    for u in 0..s {
        for v in 0..s {
            kgrid[u * pw + v] = Complex::new(kernel.weights()[(u, v)], T::zero());
        }
    }
    fft2(&mut kgrid, false);

    let norm = T::one() / T::from_usize(ph * pw).unwrap();
    let mut out = vec![T::zero(); h * w * channels];
    for c in 0..channels {
        let padded = reflect_pad_plane(image, c, r);
        let mut grid: Vec<Complex<T>> = padded.iter().map(|&v| Complex::new(v, T::zero())).collect();
        fft2(&mut grid, false);
        for (g, k) in grid.iter_mut().zip(&kgrid) {
            *g = *g * *k;
        }
        fft2(&mut grid, true);
        // Valid region of the linear convolution starts at (s-1, s-1).
        for y in 0..h {
            for x in 0..w {
                let v = grid[(y + s - 1) * pw + (x + s - 1)].re * norm;
                out[(y * w + x) * channels + c] = v;
            }
        }
    }
    ImageTensor::from_vec(h, w, channels, out)
}

/// Samples the additive noise field for an image shape. Deterministic in
/// `spec.seed`; exactly zero when `kind = None`.
pub fn noise_field<T: Scalar>(h: usize, w: usize, c: usize, spec: &NoiseSpec) -> Vec<T> {
    match spec.kind {
        NoiseKind::None => vec![T::zero(); h * w * c],
        NoiseKind::Gaussian => {
            let mut rng = rng_for(spec.seed, Stream::Noise);
            if spec.sigma == 0.0 {
                return vec![T::zero(); h * w * c];
            }
            let normal = Normal::new(0.0f64, spec.sigma).expect("sigma validated");
            (0..h * w * c)
                .map(|_| sc::<T>(normal.sample(&mut rng)))
                .collect()
        }
    }
}

/// Full classical degradation: `clamp((alpha * x) * k + n, 0, 1)`.
pub fn apply_classical_udc<T: Scalar>(
    image: &ImageTensor<T>,
    alpha: T,
    kernel: &PsfKernel<T>,
    noise: &NoiseSpec,
) -> Result<ImageTensor<T>> {
    if image.channels() != 3 {
        return Err(Error::Domain(format!(
            "classical model expects 3 channels, got {}",
            image.channels()
        )));
    }
    if alpha <= T::zero() || alpha > T::one() {
        return Err(Error::Domain(format!(
            "alpha must be in (0,1], got {alpha}"
        )));
    }
    let scaled = image.map(|v| v * alpha)?;
    let blurred = convolve_psf(&scaled, kernel)?;
    let (h, w, c) = blurred.shape();
    let n = noise_field::<T>(h, w, c, noise);
    let noisy: Vec<T> = blurred
        .data()
        .iter()
        .zip(&n)
        .map(|(&v, &e)| v + e)
        .collect();
    Ok(ImageTensor::from_vec(h, w, c, noisy)?.clamp01())
}

/// Runs `stage2(stage1(image))`, enforcing that both stages preserve shape.
///
/// Both the classical model (scale, then blur) and the learned two-stage
/// generator fit this interface.
pub fn compose_two_stage<T: Scalar>(
    image: &ImageTensor<T>,
    stage1: impl Fn(&ImageTensor<T>) -> Result<ImageTensor<T>>,
    stage2: impl Fn(&ImageTensor<T>) -> Result<ImageTensor<T>>,
) -> Result<ImageTensor<T>> {
    let mid = stage1(image)?;
    if mid.shape() != image.shape() {
        return Err(Error::Contract(format!(
            "stage 1 changed shape {:?} -> {:?}",
            image.shape(),
            mid.shape()
        )));
    }
    let out = stage2(&mid)?;
    if out.shape() != image.shape() {
        return Err(Error::Contract(format!(
            "stage 2 changed shape {:?} -> {:?}",
            image.shape(),
            out.shape()
        )));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracles::spatial_convolve;
    use rand::Rng;

    fn random_image(h: usize, w: usize, c: usize, seed: u64) -> ImageTensor<f64> {
        let mut rng = rng_for(seed, Stream::Fixture);
        ImageTensor::from_fn(h, w, c, |_, _, _| rng.gen_range(0.0..1.0)).unwrap()
    }

    fn random_kernel(size: usize, seed: u64) -> PsfKernel<f64> {
        let mut rng = rng_for(seed, Stream::Fixture);
        let w = Array2::from_shape_fn((size, size), |_| rng.gen_range(0.0..1.0));
        PsfKernel::from_weights(w).unwrap()
    }

    #[test]
    fn delta_kernel_is_identity() {
        let img = random_image(8, 8, 3, 1);
        let out = convolve_psf(&img, &PsfKernel::delta()).unwrap();
        assert_eq!(img, out);
    }

    #[test]
    fn unit_sum_kernel_preserves_constants() {
        let img = ImageTensor::<f64>::constant(10, 12, 3, 0.37);
        let out = convolve_psf(&img, &random_kernel(5, 2)).unwrap();
        assert!(out.max_abs_diff(&img).unwrap() < 1e-12);
    }

    #[test]
    fn fft_matches_spatial_oracle() {
        let img = random_image(8, 8, 1, 3);
        let k = random_kernel(5, 4);
        let fft = convolve_psf(&img, &k).unwrap();
        let direct = spatial_convolve(&img, &k);
        assert!(fft.max_abs_diff(&direct).unwrap() < 1e-5);
    }

    #[test]
    fn kernel_larger_than_image_errors() {
        let img = random_image(4, 4, 3, 5);
        let k = random_kernel(5, 6);
        assert!(matches!(convolve_psf(&img, &k), Err(Error::Size(_))));
    }

    #[test]
    fn convolution_is_linear() {
        let a = random_image(10, 9, 2, 7);
        let b = random_image(10, 9, 2, 8);
        let k = random_kernel(3, 9);
        let (alpha, beta) = (0.7, -0.3);
        let combo = ImageTensor::from_fn(10, 9, 2, |y, x, c| {
            alpha * a.get(y, x, c) + beta * b.get(y, x, c)
        })
        .unwrap();
        let lhs = convolve_psf(&combo, &k).unwrap();
        let ca = convolve_psf(&a, &k).unwrap();
        let cb = convolve_psf(&b, &k).unwrap();
        let rhs = ImageTensor::from_fn(10, 9, 2, |y, x, c| {
            alpha * ca.get(y, x, c) + beta * cb.get(y, x, c)
        })
        .unwrap();
        assert!(lhs.max_abs_diff(&rhs).unwrap() < 1e-5);
    }

    #[test]
    fn classical_identity_configuration() {
        let img = random_image(9, 9, 3, 10);
        let out = apply_classical_udc(&img, 1.0, &PsfKernel::delta(), &NoiseSpec::none()).unwrap();
        assert!(out.max_abs_diff(&img).unwrap() < 1e-7);
    }

    #[test]
    fn pure_scaling() {
        let img = random_image(6, 6, 3, 11);
        let out = apply_classical_udc(&img, 0.5, &PsfKernel::delta(), &NoiseSpec::none()).unwrap();
        let expect = img.map(|v| v * 0.5).unwrap();
        assert_eq!(out, expect);
    }

    #[test]
    fn classical_matches_bruteforce_composition() {
        let img = random_image(16, 16, 3, 12);
        let kernel = PsfKernel::<f64>::box_filter(3).unwrap();
        let noise = NoiseSpec::gaussian(0.02, 7).unwrap();
        let got = apply_classical_udc(&img, 0.7, &kernel, &noise).unwrap();

        // Independent composition: scale, direct spatial convolution, seeded noise.
        let scaled = img.map(|v| v * 0.7).unwrap();
        let blurred = spatial_convolve(&scaled, &kernel);
        let n = noise_field::<f64>(16, 16, 3, &noise);
        let expect = ImageTensor::from_vec(
            16,
            16,
            3,
            blurred.data().iter().zip(&n).map(|(&v, &e)| v + e).collect(),
        )
        .unwrap()
        .clamp01();
        assert!(got.max_abs_diff(&expect).unwrap() < 1e-6);
    }

    #[test]
    fn noise_is_deterministic_per_seed() {
        let a = noise_field::<f64>(4, 4, 3, &NoiseSpec::gaussian(0.1, 42).unwrap());
        let b = noise_field::<f64>(4, 4, 3, &NoiseSpec::gaussian(0.1, 42).unwrap());
        let c = noise_field::<f64>(4, 4, 3, &NoiseSpec::gaussian(0.1, 43).unwrap());
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn invalid_alpha_rejected() {
        let img = random_image(4, 4, 3, 1);
        for alpha in [0.0, -0.2, 1.1] {
            assert!(matches!(
                apply_classical_udc(&img, alpha, &PsfKernel::delta(), &NoiseSpec::none()),
                Err(Error::Domain(_))
            ));
        }
    }

    #[test]
    fn two_stage_identity_and_scale() {
        let img = random_image(8, 8, 3, 13);
        let id = |x: &ImageTensor<f64>| Ok(x.clone());
        let out = compose_two_stage(&img, id, id).unwrap();
        assert_eq!(out, img);

        let half = |x: &ImageTensor<f64>| x.map(|v| v * 0.5);
        let delta = |x: &ImageTensor<f64>| convolve_psf(x, &PsfKernel::delta());
        let out = compose_two_stage(&img, half, delta).unwrap();
        assert_eq!(out, img.map(|v| v * 0.5).unwrap());
    }

    #[test]
    fn two_stage_matches_classical_model() {
        let img = random_image(12, 12, 3, 14);
        let kernel = PsfKernel::<f64>::box_filter(3).unwrap();
        let k2 = kernel.clone();
        let composed = compose_two_stage(
            &img,
            |x| x.map(|v| v * 0.7),
            move |x| convolve_psf(x, &k2),
        )
        .unwrap()
        .clamp01();
        let classical = apply_classical_udc(&img, 0.7, &kernel, &NoiseSpec::none()).unwrap();
        assert!(composed.max_abs_diff(&classical).unwrap() < 1e-6);
    }

    #[test]
    fn shape_changing_stage_is_a_contract_error() {
        let img = random_image(8, 8, 3, 15);
        let shrink = |_: &ImageTensor<f64>| Ok(ImageTensor::constant(4, 4, 3, 0.0));
        let id = |x: &ImageTensor<f64>| Ok(x.clone());
        assert!(matches!(
            compose_two_stage(&img, shrink, id),
            Err(Error::Contract(_))
        ));
    }
}
