//! Runtime verification suites behind the `selftest` subcommand.
//!
//! Each suite re-derives a handful of results through independent slow paths
//! (explicit loops, interpolation matrices, closed forms) and compares them
//! against the production kernels, so a freshly built binary can prove its
//! numerics on the machine it is about to run on.

use ndarray::{Array2, ArrayD, IxDyn};
use rand::Rng;

use crate::autodiff::roi::{roi_extract, roi_paste};
use crate::autodiff::Tape;
use crate::dgformer::{DGFormer, DGFormerConfig, InitMode};
use crate::dmnet::{DMNet, DMNetConfig};
use crate::image::ImageTensor;
use crate::imaging::{apply_classical_udc, compose_two_stage, convolve_psf, noise_field, NoiseSpec, PsfKernel};
use crate::landmarks::LandmarkSet;
use crate::metrics::{landmark_distance, psnr, ssim, ssim_window_2d, SSIM_WINDOW};
use crate::oracles::{
    naive_channel_attention, naive_ssim, roi_extract_by_matrix, roi_extract_matrix,
    roi_paste_by_matrix, spatial_convolve,
};
use crate::params::ParamStore;
use crate::rng::{rng_for, Stream};

/// Outcome of one named suite.
#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: &'static str,
    pub passed: usize,
    /// "check label: what differed" for every failing check.
    pub failures: Vec<String>,
}

impl SuiteReport {
    pub fn total(&self) -> usize {
        self.passed + self.failures.len()
    }

    pub fn all_passed(&self) -> bool {
        self.failures.is_empty()
    }
}

struct Suite {
    report: SuiteReport,
}

impl Suite {
    fn new(name: &'static str) -> Self {
        Self {
            report: SuiteReport {
                name,
                passed: 0,
                failures: Vec::new(),
            },
        }
    }

    fn check(&mut self, label: &str, f: impl FnOnce() -> Result<(), String>) {
        match f() {
            Ok(()) => self.report.passed += 1,
            Err(detail) => self.report.failures.push(format!("{label}: {detail}")),
        }
    }
}

fn expect(cond: bool, detail: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(detail())
    }
}

fn rand_image(h: usize, w: usize, seed: u64) -> ImageTensor<f32> {
    let mut rng = rng_for(seed, Stream::Fixture);
    ImageTensor::from_fn(h, w, 3, |_, _, _| rng.gen_range(0.0..1.0)).expect("valid dims")
}

fn rand_dyn(shape: &[usize], seed: u64, lo: f64, hi: f64) -> ArrayD<f64> {
    let mut rng = rng_for(seed, Stream::Fixture);
    ArrayD::from_shape_simple_fn(IxDyn(shape), || rng.gen_range(lo..hi))
}

fn max_abs<'a>(it: impl Iterator<Item = (&'a f64, &'a f64)>) -> f64 {
    it.map(|(a, b)| (a - b).abs()).fold(0.0, f64::max)
}

fn oracle_equivalence() -> SuiteReport {
    let mut s = Suite::new("oracle-equivalence");

    for (i, (h, w, kernel)) in [
        (11usize, 9usize, PsfKernel::<f32>::gaussian(5, 1.2).unwrap()),
        (8, 8, PsfKernel::box_filter(3).unwrap()),
        (16, 13, PsfKernel::gaussian(7, 2.0).unwrap()),
    ]
    .into_iter()
    .enumerate()
    {
        s.check("transform-domain convolution matches direct loops", || {
            let img = rand_image(h, w, 60 + i as u64);
            let fast = convolve_psf(&img, &kernel).map_err(|e| e.to_string())?;
            let slow = spatial_convolve(&img, &kernel);
            let diff = fast.max_abs_diff(&slow).map_err(|e| e.to_string())?;
            expect(diff < 1e-5, || format!("case {i}: max diff {diff}"))
        });
    }

    s.check("attention core matches explicit loops", || {
        let (c, n) = (8usize, 36usize);
        let beta = 0.7f64;
        let q = rand_dyn(&[1, 1, c, n], 63, -1.0, 1.0);
        let k = rand_dyn(&[1, 1, c, n], 64, -1.0, 1.0);
        let v = rand_dyn(&[1, 1, c, n], 65, -1.0, 1.0);
        let tape = Tape::new();
        let l2rows = |x: &crate::autodiff::Tensor<f64>| {
            x.mul(&x.square().sum_lastdim().rsqrt_eps(1e-12))
        };
        let qt = l2rows(&tape.constant(q.clone()));
        let kt = l2rows(&tape.constant(k.clone()));
        let vt = tape.constant(v.clone());
        let att = qt.bmm(&kt, false, true).mul_scalar(beta).softmax_lastdim();
        let got = att.bmm(&vt, false, false);

        let mat = |a: &ArrayD<f64>| Array2::from_shape_fn((c, n), |(i, p)| a[[0, 0, i, p]]);
        let want = naive_channel_attention(&mat(&q), &mat(&k), &mat(&v), beta);
        let gv = got.value();
        let diff = (0..c)
            .flat_map(|i| (0..n).map(move |p| (i, p)))
            .map(|(i, p)| (gv[[0, 0, i, p]] - want[(i, p)]).abs())
            .fold(0.0, f64::max);
        expect(diff < 1e-8, || format!("max diff {diff}"))
    });

    s.check("window extraction matches its interpolation matrix", || {
        let x = rand_dyn(&[2, 3, 9, 7], 66, -1.0, 1.0);
        let origin = (1.25f64, 0.75f64);
        let tape = Tape::new();
        let got = roi_extract(&tape.constant(x.clone()), &[origin, origin], 4);
        let e = roi_extract_matrix(9, 7, origin.0, origin.1, 4);
        let want = roi_extract_by_matrix(
            &x.clone().into_dimensionality().unwrap(),
            &e,
            4,
        );
        let diff = max_abs(got.value().iter().zip(want.iter()));
        expect(diff < 1e-12, || format!("max diff {diff}"))
    });

    s.check("window paste transposes the extraction matrix", || {
        let base = rand_dyn(&[1, 2, 8, 8], 67, -1.0, 1.0);
        let patch = rand_dyn(&[1, 2, 3, 3], 68, -1.0, 1.0);
        let origin = (2.5f64, 3.25f64);
        let tape = Tape::new();
        let got = roi_paste(
            &tape.constant(base.clone()),
            &tape.constant(patch.clone()),
            &[origin],
        );
        let e = roi_extract_matrix(8, 8, origin.0, origin.1, 3);
        let want = roi_paste_by_matrix(
            &base.clone().into_dimensionality().unwrap(),
            &patch.clone().into_dimensionality().unwrap(),
            &e,
        );
        let diff = max_abs(got.value().iter().zip(want.iter()));
        expect(diff < 1e-12, || format!("max diff {diff}"))
    });

    s.check("structural similarity matches windowed loops", || {
        let a = rand_image(24, 20, 69);
        let b = rand_image(24, 20, 70);
        let fast = ssim(&a, &b).map_err(|e| e.to_string())?;
        let slow = naive_ssim(&a, &b, &ssim_window_2d(), SSIM_WINDOW, 0.01, 0.03);
        expect((fast - slow).abs() < 1e-9, || format!("{fast} vs {slow}"))
    });

    s.check("psnr of a constructed 20 dB pair", || {
        // A constant offset of 0.1 gives mse 0.01, hence exactly 20 dB.
        let a = ImageTensor::<f64>::constant(16, 16, 3, 0.3);
        let b = ImageTensor::<f64>::constant(16, 16, 3, 0.4);
        let got = psnr(&a, &b).map_err(|e| e.to_string())?;
        expect((got - 20.0).abs() < 1e-6, || format!("got {got}"))
    });

    s.check("landmark distance of a 3-4-5 offset", || {
        let truth = vec![[10.0, 20.0], [30.0, 40.0]];
        let pred: Vec<[f64; 2]> = truth.iter().map(|p| [p[0] + 3.0, p[1] + 4.0]).collect();
        let got = landmark_distance(&pred, &truth).map_err(|e| e.to_string())?;
        expect(got == 5.0, || format!("got {got}"))
    });

    s.report
}

fn identity_invariants() -> SuiteReport {
    let mut s = Suite::new("identity-invariants");

    s.check("unit-gain classical degradation is the identity", || {
        let img = rand_image(12, 15, 71);
        let out = apply_classical_udc(&img, 1.0f32, &PsfKernel::delta(), &NoiseSpec::none())
            .map_err(|e| e.to_string())?;
        let diff = out.max_abs_diff(&img).map_err(|e| e.to_string())?;
        expect(diff < 1e-7, || format!("max diff {diff}"))
    });

    s.check("two pass-through stages compose to the identity", || {
        let img = rand_image(10, 10, 72);
        let stage = |x: &ImageTensor<f32>| {
            apply_classical_udc(x, 1.0f32, &PsfKernel::delta(), &NoiseSpec::none())
        };
        let out = compose_two_stage(&img, stage, stage).map_err(|e| e.to_string())?;
        let diff = out.max_abs_diff(&img).map_err(|e| e.to_string())?;
        expect(diff < 1e-6, || format!("max diff {diff}"))
    });

    s.check("fresh degradation model returns its input unchanged", || {
        let cfg = DMNetConfig {
            base_channels: 8,
            scales: 2,
            blocks_per_scale: 1,
            ..DMNetConfig::default()
        };
        let mut store = ParamStore::<f32>::new();
        let mut rng = rng_for(73, Stream::ParamInit);
        let model = DMNet::new(&mut store, &mut rng, &cfg).map_err(|e| e.to_string())?;
        let img = rand_image(12, 12, 74);
        let tape = Tape::new();
        let x = tape.constant(img.to_nchw().into_dyn());
        let out = model
            .forward(&tape, &store, &x)
            .map_err(|e| e.to_string())?;
        expect(
            out.degraded.value().as_slice() == x.value().as_slice(),
            || "output differs from input".into(),
        )
    });

    s.check("zero-residual restorer returns its input unchanged", || {
        let cfg = DGFormerConfig::tiny();
        let mut store = ParamStore::<f32>::new();
        let mut rng = rng_for(75, Stream::ParamInit);
        let model = DGFormer::new(&mut store, &mut rng, &cfg, InitMode::ZeroResidual)
            .map_err(|e| e.to_string())?;
        // A size off the pyramid multiple also exercises the pad-and-crop path.
        let img = rand_image(14, 10, 76);
        let lm = LandmarkSet::canonical(14, 10).map_err(|e| e.to_string())?;
        let lm = crate::pipeline::fit_landmarks_to_sizes(&lm, &cfg.component_sizes, 14, 10)
            .map_err(|e| e.to_string())?;
        let tape = Tape::new();
        let x = tape.constant(img.to_nchw().into_dyn());
        let out = model
            .forward(&tape, &store, &x, &[lm])
            .map_err(|e| e.to_string())?;
        expect(
            out.value().as_slice() == x.value().as_slice(),
            || "output differs from input".into(),
        )
    });

    s.report
}

fn softmax_rows() -> SuiteReport {
    let mut s = Suite::new("softmax-rows");

    s.check("random logits normalize to unit rows", || {
        let logits = rand_dyn(&[2, 2, 12, 12], 77, -4.0, 4.0);
        let tape = Tape::new();
        let sm = tape.constant(logits).softmax_lastdim();
        let v = sm.value();
        let mut worst = 0.0f64;
        for b in 0..2 {
            for h in 0..2 {
                for i in 0..12 {
                    let sum: f64 = (0..12).map(|j| v[[b, h, i, j]]).sum();
                    worst = worst.max((sum - 1.0).abs());
                }
            }
        }
        expect(worst < 1e-5, || format!("worst row drift {worst}"))
    });

    s.check("extreme logits stay normalized and finite", || {
        let logits = ArrayD::from_shape_fn(IxDyn(&[1, 1, 4, 6]), |ix| {
            if (ix[2] + ix[3]) % 2 == 0 {
                30.0f64
            } else {
                -30.0
            }
        });
        let tape = Tape::new();
        let sm = tape.constant(logits).softmax_lastdim();
        let v = sm.value();
        let mut ok = true;
        let mut worst = 0.0f64;
        for i in 0..4 {
            let sum: f64 = (0..6).map(|j| v[[0, 0, i, j]]).sum();
            worst = worst.max((sum - 1.0).abs());
            ok &= (0..6).all(|j| v[[0, 0, i, j]].is_finite() && v[[0, 0, i, j]] >= 0.0);
        }
        expect(ok && worst < 1e-5, || format!("worst row drift {worst}"))
    });

    s.report
}

fn determinism() -> SuiteReport {
    let mut s = Suite::new("determinism");

    s.check("seeded noise fields reproduce exactly", || {
        let spec = NoiseSpec::gaussian(0.05, 99).map_err(|e| e.to_string())?;
        let a = noise_field::<f32>(9, 7, 3, &spec);
        let b = noise_field::<f32>(9, 7, 3, &spec);
        let other = NoiseSpec::gaussian(0.05, 100).map_err(|e| e.to_string())?;
        let c = noise_field::<f32>(9, 7, 3, &other);
        expect(a == b && a != c, || "noise field not a pure function of its seed".into())
    });

    s.check("rebuilt degradation model reproduces its output", || {
        let cfg = DMNetConfig {
            base_channels: 8,
            scales: 1,
            blocks_per_scale: 1,
            ..DMNetConfig::default()
        };
        let img = rand_image(12, 12, 78);
        let run = || -> Result<Vec<f32>, String> {
            let mut store = ParamStore::<f32>::new();
            let mut rng = rng_for(80, Stream::ParamInit);
            let model = DMNet::new(&mut store, &mut rng, &cfg).map_err(|e| e.to_string())?;
            let tape = Tape::new();
            let x = tape.constant(img.to_nchw().into_dyn());
            let out = model.forward(&tape, &store, &x).map_err(|e| e.to_string())?;
            Ok(out.degraded.value().iter().copied().collect())
        };
        expect(run()? == run()?, || "two builds from one seed disagree".into())
    });

    s.check("rebuilt restorer reproduces its output", || {
        let cfg = DGFormerConfig::tiny();
        let img = rand_image(16, 16, 79);
        let lm = LandmarkSet::canonical(16, 16).map_err(|e| e.to_string())?;
        let lm = crate::pipeline::fit_landmarks_to_sizes(&lm, &cfg.component_sizes, 16, 16)
            .map_err(|e| e.to_string())?;
        let run = || -> Result<Vec<f32>, String> {
            let mut store = ParamStore::<f32>::new();
            let mut rng = rng_for(81, Stream::ParamInit);
            let model = DGFormer::new(&mut store, &mut rng, &cfg, InitMode::Standard)
                .map_err(|e| e.to_string())?;
            let tape = Tape::new();
            let x = tape.constant(img.to_nchw().into_dyn());
            let out = model
                .forward(&tape, &store, &x, &[lm.clone()])
                .map_err(|e| e.to_string())?;
            Ok(out.value().iter().copied().collect())
        };
        expect(run()? == run()?, || "two builds from one seed disagree".into())
    });

    s.report
}

/// Runs every suite and returns the reports in print order.
pub fn run_all() -> Vec<SuiteReport> {
    vec![
        oracle_equivalence(),
        identity_invariants(),
        softmax_rows(),
        determinism(),
    ]
}
