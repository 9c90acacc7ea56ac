//! Dataset synthesis, paired augmentation, training orchestration, and
//! evaluation.
//!
//! Everything here is a reproducible function of (inputs, seed): per-image
//! randomness is derived from stable ids, per-iteration randomness from the
//! iteration number, so reruns byte-match and an interrupted training run
//! resumed from a checkpoint continues bit-for-bit.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use ndarray::{Array4, ArrayD, Ix4};
use rand::{Rng, RngCore};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::checkpoint::{load_checkpoint, restore_params, save_checkpoint, CheckpointMeta};
use crate::dgformer::{DGFormer, DGFormerConfig, DGFormerTrainer, InitMode};
use crate::dmnet::{DMNet, DMNetConfig};
use crate::error::{Error, Result};
use crate::gan::{GanTrainer, LossWeights, TrainConfig};
use crate::image::ImageTensor;
use crate::imaging::{apply_classical_udc, NoiseSpec, PsfKernel};
use crate::landmarks::{ComponentBox, LandmarkSet, COMPONENTS};
use crate::metrics::{landmark_distance, psnr, ssim};
use crate::optim::cosine_lr;
use crate::params::ParamStore;
use crate::pngio::{load_png, save_png};
use crate::rng::{rng_for, rng_for_index, Stream};
use crate::scalar::Scalar;

/// One degraded/clean training pair. The landmark set belongs to the clean
/// image and stays valid for the degraded one because degradation preserves
/// geometry.
#[derive(Debug, Clone)]
pub struct PairedSample<T: Scalar> {
    pub degraded: ImageTensor<T>,
    pub clean: ImageTensor<T>,
    pub landmarks: LandmarkSet,
    pub id: String,
}

impl<T: Scalar> PairedSample<T> {
    pub fn new(
        degraded: ImageTensor<T>,
        clean: ImageTensor<T>,
        landmarks: LandmarkSet,
        id: String,
    ) -> Result<Self> {
        if degraded.shape() != clean.shape() {
            return Err(Error::ShapeMismatch(format!(
                "pair {id}: degraded {:?} vs clean {:?}",
                degraded.shape(),
                clean.shape()
            )));
        }
        Ok(Self {
            degraded,
            clean,
            landmarks,
            id,
        })
    }
}

/// Blur kernel selection for the classical generator, serializable so a
/// manifest records exactly how its data was made.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum KernelSpec {
    Delta,
    Box { size: usize },
    Gaussian { size: usize, sigma: f64 },
}

impl KernelSpec {
    pub fn build<T: Scalar>(&self) -> Result<PsfKernel<T>> {
        match *self {
            KernelSpec::Delta => Ok(PsfKernel::delta()),
            KernelSpec::Box { size } => PsfKernel::box_filter(size),
            KernelSpec::Gaussian { size, sigma } => PsfKernel::gaussian(size, sigma),
        }
    }
}

/// How degraded images are produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum GeneratorSpec {
    /// `clamp((alpha * x) * k + n)` with per-image noise seeded from the id.
    Classical {
        alpha: f64,
        kernel: KernelSpec,
        noise_sigma: f64,
    },
    /// A trained degradation-model checkpoint.
    Dmnet { checkpoint: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub id: String,
    pub clean_path: PathBuf,
    pub degraded_path: PathBuf,
    pub landmark_path: PathBuf,
}

/// Index of a synthesized dataset; the generator and seed make the data
/// reconstructible from the clean sources alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub entries: Vec<ManifestEntry>,
    pub generator: GeneratorSpec,
    pub seed: u64,
}

impl DatasetManifest {
    pub fn validate(&self) -> Result<()> {
        if self.entries.is_empty() {
            return Err(Error::Data("manifest has no entries".into()));
        }
        let mut seen = std::collections::HashSet::new();
        for e in &self.entries {
            if !seen.insert(&e.id) {
                return Err(Error::Data(format!("duplicate id {}", e.id)));
            }
            for p in [&e.clean_path, &e.degraded_path, &e.landmark_path] {
                if !p.exists() {
                    return Err(Error::Data(format!(
                        "{}: missing file {}",
                        e.id,
                        p.display()
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent() {
            fs::create_dir_all(dir)?;
        }
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_str(&fs::read_to_string(path)?)?;
        m.validate()?;
        Ok(m)
    }
}

pub fn load_sample<T: Scalar>(entry: &ManifestEntry) -> Result<PairedSample<T>> {
    let clean = load_png::<T>(&entry.clean_path)?;
    let degraded = load_png::<T>(&entry.degraded_path)?;
    let landmarks = LandmarkSet::load(&entry.landmark_path, clean.height(), clean.width())?;
    PairedSample::new(degraded, clean, landmarks, entry.id.clone())
}

fn fnv1a(s: &str) -> u64 {
    let mut h = 0xcbf2_9ce4_8422_2325u64;
    for b in s.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100_0000_01b3);
    }
    h
}

// workers == 0 leaves the thread count to the pool (one per core).
fn run_in_pool<R: Send>(workers: usize, f: impl FnOnce() -> R + Send) -> Result<R> {
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("worker pool: {e}")))?;
    Ok(pool.install(f))
}

/// Reads a freshly-built checkpoint back into a degradation model.
pub fn load_dmnet<T: Scalar>(path: &Path) -> Result<(DMNet, ParamStore<T>, CheckpointMeta)> {
    let ck = load_checkpoint::<T>(path)?;
    if ck.meta.model != "dmnet" {
        return Err(Error::Format(format!(
            "expected a dmnet checkpoint, found {}",
            ck.meta.model
        )));
    }
    let cfg: DMNetConfig = serde_json::from_value(ck.config.clone())?;
    let mut store = ParamStore::new();
    let mut rng = rng_for(ck.meta.seed, Stream::ParamInit);
    let model = DMNet::new(&mut store, &mut rng, &cfg)?;
    restore_params(&mut store, &ck.params)?;
    Ok((model, store, ck.meta))
}

pub fn load_dgformer<T: Scalar>(path: &Path) -> Result<(DGFormer, ParamStore<T>, CheckpointMeta)> {
    let ck = load_checkpoint::<T>(path)?;
    if ck.meta.model != "dgformer" {
        return Err(Error::Format(format!(
            "expected a dgformer checkpoint, found {}",
            ck.meta.model
        )));
    }
    let cfg: DGFormerConfig = serde_json::from_value(ck.config.clone())?;
    let mut store = ParamStore::new();
    let mut rng = rng_for(ck.meta.seed, Stream::ParamInit);
    let model = DGFormer::new(&mut store, &mut rng, &cfg, InitMode::Standard)?;
    restore_params(&mut store, &ck.params)?;
    Ok((model, store, ck.meta))
}

fn tensor_to_image<T: Scalar>(t: &Tensor<T>) -> Result<ImageTensor<T>> {
    let v = t
        .value()
        .clone()
        .into_dimensionality::<Ix4>()
        .map_err(|_| Error::ShapeMismatch(format!("expected (1,c,h,w), got {:?}", t.shape())))?;
    ImageTensor::from_nchw(&v)
}

/// Runs a degradation model on one image.
pub fn dmnet_degrade<T: Scalar>(
    model: &DMNet,
    store: &ParamStore<T>,
    clean: &ImageTensor<T>,
) -> Result<ImageTensor<T>> {
    let tape = Tape::new();
    let x = tape.constant(clean.to_nchw().into_dyn());
    let out = model.forward(&tape, store, &x)?;
    tensor_to_image(&out.degraded)
}

/// Runs a restorer on one image; the landmark boxes are resized to the
/// model's dictionary crop sizes around their original centers.
pub fn dgformer_restore<T: Scalar>(
    model: &DGFormer,
    store: &ParamStore<T>,
    degraded: &ImageTensor<T>,
    landmarks: &LandmarkSet,
) -> Result<ImageTensor<T>> {
    let lm = fit_landmarks_to_sizes(
        landmarks,
        &model.config().component_sizes,
        degraded.height(),
        degraded.width(),
    )?;
    let tape = Tape::new();
    let x = tape.constant(degraded.to_nchw().into_dyn());
    let out = model.forward(&tape, store, &x, std::slice::from_ref(&lm))?;
    tensor_to_image(&out)
}

fn degrade_one<T: Scalar>(
    generator: &GeneratorSpec,
    dmnet: Option<&(DMNet, ParamStore<T>, CheckpointMeta)>,
    clean: &ImageTensor<T>,
    id: &str,
    seed: u64,
) -> Result<ImageTensor<T>> {
    match generator {
        GeneratorSpec::Classical {
            alpha,
            kernel,
            noise_sigma,
        } => {
            let k = kernel.build::<T>()?;
            let noise = if *noise_sigma == 0.0 {
                NoiseSpec::none()
            } else {
                NoiseSpec::gaussian(*noise_sigma, seed ^ fnv1a(id))?
            };
            apply_classical_udc(clean, crate::scalar::sc(*alpha), &k, &noise)
        }
        GeneratorSpec::Dmnet { .. } => {
            let (model, store, _) = dmnet.expect("checkpoint loaded before the job loop");
            dmnet_degrade(model, store, clean)
        }
    }
}

/// Degrades every readable PNG under `clean_dir` and writes pairs plus a
/// manifest to `out_dir`. Landmarks come from a `<stem>.landmarks.json`
/// sibling when present, else from the canonical face layout.
pub fn synthesize_dataset<T: Scalar>(
    clean_dir: &Path,
    generator: &GeneratorSpec,
    out_dir: &Path,
    seed: u64,
    workers: usize,
) -> Result<DatasetManifest> {
    let mut files: Vec<PathBuf> = fs::read_dir(clean_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();

    let dmnet = match generator {
        GeneratorSpec::Dmnet { checkpoint } => Some(load_dmnet::<T>(checkpoint)?),
        GeneratorSpec::Classical { .. } => None,
    };
    fs::create_dir_all(out_dir.join("degraded"))?;
    fs::create_dir_all(out_dir.join("landmarks"))?;

    let results: Vec<Result<Option<ManifestEntry>>> = run_in_pool(workers, || {
        files
            .par_iter()
            .map(|path| -> Result<Option<ManifestEntry>> {
                let id = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::Data(format!("unusable file name {}", path.display())))?
                    .to_string();
                let clean = match load_png::<T>(path) {
                    Ok(img) => img,
                    Err(e) => {
                        eprintln!("warning: skipping {}: {e}", path.display());
                        return Ok(None);
                    }
                };
                let lm_sibling = path.with_file_name(format!("{id}.landmarks.json"));
                let landmarks = if lm_sibling.exists() {
                    LandmarkSet::load(&lm_sibling, clean.height(), clean.width())?
                } else {
                    LandmarkSet::canonical(clean.height(), clean.width())?
                };
                let degraded = degrade_one(generator, dmnet.as_ref(), &clean, &id, seed)?;
                let degraded_path = out_dir.join("degraded").join(format!("{id}.png"));
                let landmark_path = out_dir.join("landmarks").join(format!("{id}.json"));
                save_png(&degraded, &degraded_path)?;
                landmarks.save(&landmark_path)?;
                Ok(Some(ManifestEntry {
                    id,
                    clean_path: path.clone(),
                    degraded_path,
                    landmark_path,
                }))
            })
            .collect()
    })?;

    let mut entries = Vec::new();
    for r in results {
        if let Some(e) = r? {
            entries.push(e);
        }
    }
    if entries.is_empty() {
        return Err(Error::Data(format!(
            "no readable PNG images under {}",
            clean_dir.display()
        )));
    }
    let manifest = DatasetManifest {
        entries,
        generator: generator.clone(),
        seed,
    };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

fn map_landmarks(
    lm: &LandmarkSet,
    nh: usize,
    nw: usize,
    f_box: impl Fn(ComponentBox) -> ComponentBox,
    f_pt: impl Fn([f64; 2]) -> [f64; 2],
) -> Result<LandmarkSet> {
    let raw = std::array::from_fn(|i| {
        let c = COMPONENTS[i];
        (c, f_box(lm.get(c)))
    });
    let points = lm
        .points
        .as_ref()
        .map(|ps| ps.iter().map(|&p| f_pt(p)).collect());
    LandmarkSet::new(nh, nw, raw, points)
}

/// Rebuilds the boxes with prescribed sizes around the same centers, for
/// feeding a model whose dictionary expects fixed crop sizes.
pub fn fit_landmarks_to_sizes(
    lm: &LandmarkSet,
    sizes: &[usize; 4],
    h: usize,
    w: usize,
) -> Result<LandmarkSet> {
    let raw = std::array::from_fn(|i| {
        let c = COMPONENTS[i];
        let b = lm.get(c);
        (
            c,
            ComponentBox {
                center_x: b.center_x,
                center_y: b.center_y,
                size: sizes[i],
            },
        )
    });
    LandmarkSet::new(h, w, raw, lm.points.clone())
}

/// Mirrors both images and the landmarks across the vertical axis; column x
/// maps to width-1-x.
pub fn flip_sample<T: Scalar>(s: &PairedSample<T>) -> PairedSample<T> {
    let (h, w, _) = s.clean.shape();
    let wm1 = (w - 1) as f64;
    let landmarks = map_landmarks(
        &s.landmarks,
        h,
        w,
        |b| ComponentBox {
            center_x: wm1 - b.center_x,
            ..b
        },
        |p| [wm1 - p[0], p[1]],
    )
    .expect("flip keeps boxes inside the image");
    PairedSample {
        degraded: s.degraded.hflip(),
        clean: s.clean.hflip(),
        landmarks,
        id: s.id.clone(),
    }
}

/// Rotates both images and the landmarks 90 degrees clockwise `k` times.
pub fn rotate_sample<T: Scalar>(s: &PairedSample<T>, k: usize) -> PairedSample<T> {
    let mut out = s.clone();
    for _ in 0..k % 4 {
        let (h, w, _) = out.clean.shape();
        let hm1 = (h - 1) as f64;
        let landmarks = map_landmarks(
            &out.landmarks,
            w,
            h,
            |b| ComponentBox {
                center_x: hm1 - b.center_y,
                center_y: b.center_x,
                size: b.size,
            },
            |p| [hm1 - p[1], p[0]],
        )
        .expect("rotation keeps boxes inside the image");
        out = PairedSample {
            degraded: out.degraded.rot90(1),
            clean: out.clean.rot90(1),
            landmarks,
            id: out.id,
        };
    }
    out
}

/// Crops both images to `size` x `size` at (y0, x0); landmark boxes shift
/// with the crop and are re-clamped to stay inside it.
pub fn crop_sample<T: Scalar>(
    s: &PairedSample<T>,
    y0: usize,
    x0: usize,
    size: usize,
) -> Result<PairedSample<T>> {
    let landmarks = map_landmarks(
        &s.landmarks,
        size,
        size,
        |b| ComponentBox {
            center_x: b.center_x - x0 as f64,
            center_y: b.center_y - y0 as f64,
            size: b.size,
        },
        |p| [p[0] - x0 as f64, p[1] - y0 as f64],
    )?;
    Ok(PairedSample {
        degraded: s.degraded.crop(y0, x0, size, size)?,
        clean: s.clean.crop(y0, x0, size, size)?,
        landmarks,
        id: s.id.clone(),
    })
}

/// Seeded train-time augmentation: random crop (when requested), then a coin
/// flip for mirroring, then a random 90-degree rotation count. The same
/// transform instance applies to both images and the landmarks.
pub fn augment<T: Scalar>(
    s: &PairedSample<T>,
    crop: Option<usize>,
    seed: u64,
) -> Result<PairedSample<T>> {
    let mut rng = rng_for(seed, Stream::Augment);
    let mut out = match crop {
        Some(cs) => {
            let (h, w, _) = s.clean.shape();
            if cs > h || cs > w {
                return Err(Error::Size(format!(
                    "crop {cs} exceeds a {h}x{w} image"
                )));
            }
            let y0 = rng.gen_range(0..=h - cs);
            let x0 = rng.gen_range(0..=w - cs);
            crop_sample(s, y0, x0, cs)?
        }
        None => s.clone(),
    };
    if rng.gen_bool(0.5) {
        out = flip_sample(&out);
    }
    let k = rng.gen_range(0..4);
    if k > 0 {
        out = rotate_sample(&out, k);
    }
    Ok(out)
}

/// Scale of a training run: full paper settings or settings sized for a
/// workstation smoke run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Profile {
    Desk,
    Paper,
}

impl std::str::FromStr for Profile {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "desk" => Ok(Profile::Desk),
            "paper" => Ok(Profile::Paper),
            other => Err(Error::Config(format!(
                "unknown profile {other}; expected desk or paper"
            ))),
        }
    }
}

fn desk_scale(mut t: TrainConfig) -> TrainConfig {
    t.crop_size = 64;
    t.batch_size = 4;
    t.iterations = 2000;
    t
}

/// Optimization defaults for degradation-model training.
pub fn dmnet_train_defaults(profile: Profile) -> TrainConfig {
    match profile {
        Profile::Paper => TrainConfig::default(),
        Profile::Desk => desk_scale(TrainConfig::default()),
    }
}

/// Optimization defaults for restorer training; the second moment decays
/// slower and batches are larger than the degradation run.
pub fn dgformer_train_defaults(profile: Profile) -> TrainConfig {
    let base = TrainConfig {
        beta2: 0.999,
        batch_size: 10,
        ..TrainConfig::default()
    };
    match profile {
        Profile::Paper => base,
        Profile::Desk => desk_scale(base),
    }
}

/// Weight of the restorer's perceptual term.
pub const RESTORER_PERCEPTUAL_WEIGHT: f64 = 0.01;

fn batch_indices(seed: u64, iter: u64, n: usize, batch: usize) -> Vec<usize> {
    let mut rng = rng_for_index(seed, Stream::BatchSampling, iter);
    (0..batch).map(|_| rng.gen_range(0..n)).collect()
}

fn slot_seed(seed: u64, iter: u64, batch: usize, slot: usize) -> u64 {
    rng_for_index(seed, Stream::Augment, iter * batch as u64 + slot as u64).next_u64()
}

fn stack_images<T: Scalar>(imgs: &[ImageTensor<T>]) -> Result<ArrayD<T>> {
    let (h, w, c) = imgs[0].shape();
    let mut out = Array4::<T>::zeros((imgs.len(), c, h, w));
    for (i, img) in imgs.iter().enumerate() {
        if img.shape() != (h, w, c) {
            return Err(Error::ShapeMismatch(
                "batch images must share dimensions".into(),
            ));
        }
        for y in 0..h {
            for x in 0..w {
                for ch in 0..c {
                    out[[i, ch, y, x]] = img.get(y, x, ch);
                }
            }
        }
    }
    Ok(out.into_dyn())
}

/// Manifest entries with lazy image loading, so small datasets are read once
/// per run rather than once per iteration.
struct SampleCache<T: Scalar> {
    entries: Vec<ManifestEntry>,
    loaded: Vec<Option<PairedSample<T>>>,
}

impl<T: Scalar> SampleCache<T> {
    fn new(entries: Vec<ManifestEntry>) -> Self {
        let loaded = entries.iter().map(|_| None).collect();
        Self { entries, loaded }
    }

    fn get(&mut self, i: usize) -> Result<&PairedSample<T>> {
        if self.loaded[i].is_none() {
            self.loaded[i] = Some(load_sample(&self.entries[i])?);
        }
        Ok(self.loaded[i].as_ref().unwrap())
    }
}

/// Paths produced by a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub log_path: PathBuf,
}

fn ck_path(out_dir: &Path, iter: u64) -> PathBuf {
    out_dir.join(format!("ck_{iter:06}.udck"))
}

/// The discriminator lives in a sidecar next to the generator checkpoint so
/// inference artifacts stay generator-only.
fn disc_sidecar(ck: &Path) -> PathBuf {
    ck.with_extension("disc.udck")
}

fn normalize_every(every: u64, iterations: u64) -> u64 {
    if every == 0 {
        iterations
    } else {
        every
    }
}

fn check_resume_meta(
    meta: &CheckpointMeta,
    expect_model: &str,
    train: &TrainConfig,
) -> Result<u64> {
    if meta.model != expect_model {
        return Err(Error::Format(format!(
            "expected a {expect_model} checkpoint, found {}",
            meta.model
        )));
    }
    if meta.seed != train.seed {
        return Err(Error::Config(format!(
            "checkpoint seed {} differs from configured seed {}; continuing would not reproduce the original run",
            meta.seed, train.seed
        )));
    }
    if meta.iter >= train.iterations {
        return Err(Error::Config(format!(
            "checkpoint is at iteration {} of a {}-iteration run",
            meta.iter, train.iterations
        )));
    }
    Ok(meta.iter)
}

/// Adversarial training of the degradation model over a synthesized-pair
/// manifest. Writes `train_log.jsonl` and periodic checkpoints into
/// `out_dir`; returns the final checkpoint. `resume` continues bit-for-bit
/// from an earlier checkpoint of the same run.
#[allow(clippy::too_many_arguments)]
pub fn train_dmnet<T: Scalar>(
    manifest: &DatasetManifest,
    model_cfg: &DMNetConfig,
    train: &TrainConfig,
    weights: LossWeights,
    out_dir: &Path,
    checkpoint_every: u64,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    manifest.validate()?;
    train.validate()?;
    if train.crop_size < crate::gan::PATCHGAN_MIN_SIDE {
        return Err(Error::Config(format!(
            "crop_size {} is below the discriminator's {}px minimum",
            train.crop_size,
            crate::gan::PATCHGAN_MIN_SIDE
        )));
    }
    fs::create_dir_all(out_dir)?;
    let every = normalize_every(checkpoint_every, train.iterations);

    let mut trainer = GanTrainer::<T>::new(model_cfg, train, weights)?;
    let mut start = 0u64;
    if let Some(path) = resume {
        let loaded = load_checkpoint::<T>(path)?;
        start = check_resume_meta(&loaded.meta, "dmnet", train)?;
        let ck_cfg: DMNetConfig = serde_json::from_value(loaded.config.clone())?;
        if &ck_cfg != model_cfg {
            return Err(Error::Config(
                "checkpoint architecture differs from the configured one".into(),
            ));
        }
        restore_params(&mut trainer.gen_store, &loaded.params)?;
        trainer.gen_adam = loaded
            .adam
            .ok_or_else(|| Error::Format("checkpoint lacks optimizer state".into()))?;
        let dloaded = load_checkpoint::<T>(&disc_sidecar(path))?;
        restore_params(&mut trainer.disc_store, &dloaded.params)?;
        trainer.disc_adam = dloaded
            .adam
            .ok_or_else(|| Error::Format("discriminator sidecar lacks optimizer state".into()))?;
    }

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    let mut cache = SampleCache::<T>::new(manifest.entries.clone());
    let mut final_ck = None;

    for iter in start..train.iterations {
        let lr = cosine_lr(train.lr_init, train.lr_final, iter, train.iterations);
        let idxs = batch_indices(train.seed, iter, manifest.entries.len(), train.batch_size);
        let mut cleans = Vec::with_capacity(idxs.len());
        let mut degradeds = Vec::with_capacity(idxs.len());
        for (slot, &i) in idxs.iter().enumerate() {
            let s = cache.get(i)?;
            let a = augment(
                s,
                Some(train.crop_size),
                slot_seed(train.seed, iter, train.batch_size, slot),
            )?;
            cleans.push(a.clean);
            degradeds.push(a.degraded);
        }
        let clean = stack_images(&cleans)?;
        let degraded = stack_images(&degradeds)?;
        let losses = trainer.step(&clean, &degraded, lr)?;
        writeln!(
            log,
            "{}",
            serde_json::json!({
                "iter": iter + 1,
                "l_psnr": losses.l_psnr,
                "l_per": losses.l_per,
                "l_adv": losses.l_adv,
                "lr": lr,
            })
        )?;

        let done = iter + 1;
        if done % every == 0 || done == train.iterations {
            let path = ck_path(out_dir, done);
            let meta = CheckpointMeta {
                model: "dmnet".into(),
                iter: done,
                adam_t: trainer.gen_adam.t,
                seed: train.seed,
            };
            let cfg_json = serde_json::to_value(model_cfg)?;
            save_checkpoint(&path, &meta, &cfg_json, &trainer.gen_store, Some(&trainer.gen_adam))?;
            let dmeta = CheckpointMeta {
                model: "dmnet-disc".into(),
                iter: done,
                adam_t: trainer.disc_adam.t,
                seed: train.seed,
            };
            save_checkpoint(
                &disc_sidecar(&path),
                &dmeta,
                &serde_json::json!({}),
                &trainer.disc_store,
                Some(&trainer.disc_adam),
            )?;
            if done == train.iterations {
                final_ck = Some(path);
            }
        }
    }

    Ok(TrainOutcome {
        final_checkpoint: final_ck.expect("loop always saves at the last iteration"),
        log_path,
    })
}

/// Restorer training over a synthesized-pair manifest; same artifact layout
/// and resume contract as the degradation run, minus the discriminator.
#[allow(clippy::too_many_arguments)]
pub fn train_dgformer<T: Scalar>(
    manifest: &DatasetManifest,
    model_cfg: &DGFormerConfig,
    train: &TrainConfig,
    perceptual_weight: f64,
    out_dir: &Path,
    checkpoint_every: u64,
    resume: Option<&Path>,
) -> Result<TrainOutcome> {
    manifest.validate()?;
    train.validate()?;
    model_cfg.validate()?;
    if train.crop_size == 0 {
        return Err(Error::Config("crop_size must be >= 1".into()));
    }
    if model_cfg
        .component_sizes
        .iter()
        .any(|&a| a > train.crop_size)
    {
        return Err(Error::Config(format!(
            "component sizes {:?} do not fit the {} crop",
            model_cfg.component_sizes, train.crop_size
        )));
    }
    fs::create_dir_all(out_dir)?;
    let every = normalize_every(checkpoint_every, train.iterations);

    let mut trainer = DGFormerTrainer::<T>::new(
        model_cfg,
        train.seed,
        (train.beta1, train.beta2),
        perceptual_weight,
    )?;
    let mut start = 0u64;
    if let Some(path) = resume {
        let loaded = load_checkpoint::<T>(path)?;
        start = check_resume_meta(&loaded.meta, "dgformer", train)?;
        let ck_cfg: DGFormerConfig = serde_json::from_value(loaded.config.clone())?;
        if &ck_cfg != model_cfg {
            return Err(Error::Config(
                "checkpoint architecture differs from the configured one".into(),
            ));
        }
        restore_params(&mut trainer.store, &loaded.params)?;
        trainer.adam = loaded
            .adam
            .ok_or_else(|| Error::Format("checkpoint lacks optimizer state".into()))?;
    }

    let log_path = out_dir.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&log_path)?;
    let mut cache = SampleCache::<T>::new(manifest.entries.clone());
    let mut final_ck = None;

    for iter in start..train.iterations {
        let lr = cosine_lr(train.lr_init, train.lr_final, iter, train.iterations);
        let idxs = batch_indices(train.seed, iter, manifest.entries.len(), train.batch_size);
        let mut cleans = Vec::with_capacity(idxs.len());
        let mut degradeds = Vec::with_capacity(idxs.len());
        let mut lms = Vec::with_capacity(idxs.len());
        for (slot, &i) in idxs.iter().enumerate() {
            let s = cache.get(i)?;
            let a = augment(
                s,
                Some(train.crop_size),
                slot_seed(train.seed, iter, train.batch_size, slot),
            )?;
            lms.push(fit_landmarks_to_sizes(
                &a.landmarks,
                &model_cfg.component_sizes,
                train.crop_size,
                train.crop_size,
            )?);
            cleans.push(a.clean);
            degradeds.push(a.degraded);
        }
        let clean = stack_images(&cleans)?;
        let degraded = stack_images(&degradeds)?;
        let losses = trainer.step(&degraded, &clean, &lms, lr)?;
        writeln!(
            log,
            "{}",
            serde_json::json!({
                "iter": iter + 1,
                "l_l1": losses.l_l1,
                "l_per": losses.l_per,
                "lr": lr,
            })
        )?;

        let done = iter + 1;
        if done % every == 0 || done == train.iterations {
            let path = ck_path(out_dir, done);
            let meta = CheckpointMeta {
                model: "dgformer".into(),
                iter: done,
                adam_t: trainer.adam.t,
                seed: train.seed,
            };
            let cfg_json = serde_json::to_value(model_cfg)?;
            save_checkpoint(&path, &meta, &cfg_json, &trainer.store, Some(&trainer.adam))?;
            if done == train.iterations {
                final_ck = Some(path);
            }
        }
    }

    Ok(TrainOutcome {
        final_checkpoint: final_ck.expect("loop always saves at the last iteration"),
        log_path,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalRow {
    pub id: String,
    pub psnr: f64,
    pub ssim: f64,
    pub lmd: f64,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct EvalMeans {
    pub psnr: f64,
    pub ssim: f64,
    pub lmd: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub mean: EvalMeans,
    pub rows: Vec<EvalRow>,
}

fn landmark_points(lm: &LandmarkSet) -> Vec<[f64; 2]> {
    lm.points.clone().unwrap_or_else(|| {
        COMPONENTS
            .iter()
            .map(|&c| {
                let b = lm.get(c);
                [b.center_x, b.center_y]
            })
            .collect()
    })
}

/// Restores every manifest pair through a restorer checkpoint and writes
/// `report.json` and `report.csv` (columns id,psnr,ssim,lmd) into `out_dir`.
/// No landmark detector is in scope, so predicted points default to ground
/// truth and the landmark-distance column measures exactly 0 drift.
pub fn evaluate<T: Scalar>(
    checkpoint: &Path,
    manifest: &DatasetManifest,
    out_dir: &Path,
    save_restored: bool,
    workers: usize,
) -> Result<EvalReport> {
    manifest.validate()?;
    let (model, store, _) = load_dgformer::<T>(checkpoint)?;
    fs::create_dir_all(out_dir)?;
    if save_restored {
        fs::create_dir_all(out_dir.join("restored"))?;
    }

    let rows: Vec<EvalRow> = run_in_pool(workers, || {
        manifest
            .entries
            .par_iter()
            .map(|e| -> Result<EvalRow> {
                let s = load_sample::<T>(e)?;
                let restored = dgformer_restore(&model, &store, &s.degraded, &s.landmarks)?;
                if save_restored {
                    save_png(&restored, &out_dir.join("restored").join(format!("{}.png", e.id)))?;
                }
                let pts = landmark_points(&s.landmarks);
                Ok(EvalRow {
                    id: e.id.clone(),
                    psnr: psnr(&restored, &s.clean)?,
                    ssim: ssim(&restored, &s.clean)?,
                    lmd: landmark_distance(&pts, &pts)?,
                })
            })
            .collect::<Result<Vec<_>>>()
    })??;

    let n = rows.len() as f64;
    let mean = EvalMeans {
        psnr: rows.iter().map(|r| r.psnr).sum::<f64>() / n,
        ssim: rows.iter().map(|r| r.ssim).sum::<f64>() / n,
        lmd: rows.iter().map(|r| r.lmd).sum::<f64>() / n,
    };
    let report = EvalReport { mean, rows };

    fs::write(
        out_dir.join("report.json"),
        serde_json::to_string_pretty(&report)?,
    )?;
    let mut csv = String::from("id,psnr,ssim,lmd\n");
    for r in &report.rows {
        csv.push_str(&format!("{},{},{},{}\n", r.id, r.psnr, r.ssim, r.lmd));
    }
    fs::write(out_dir.join("report.csv"), csv)?;
    Ok(report)
}

/// Maps a directory of degraded PNGs (each with a `<stem>.landmarks.json`
/// sibling, else canonical boxes) through a restorer checkpoint.
pub fn restore_directory<T: Scalar>(
    checkpoint: &Path,
    input_dir: &Path,
    out_dir: &Path,
    workers: usize,
) -> Result<usize> {
    let (model, store, _) = load_dgformer::<T>(checkpoint)?;
    let mut files: Vec<PathBuf> = fs::read_dir(input_dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| p.extension().is_some_and(|x| x == "png"))
        .collect();
    files.sort();
    fs::create_dir_all(out_dir)?;

    let counts: Vec<Result<usize>> = run_in_pool(workers, || {
        files
            .par_iter()
            .map(|path| -> Result<usize> {
                let stem = path
                    .file_stem()
                    .and_then(|s| s.to_str())
                    .ok_or_else(|| Error::Data(format!("unusable file name {}", path.display())))?;
                let img = match load_png::<T>(path) {
                    Ok(img) => img,
                    Err(e) => {
                        eprintln!("warning: skipping {}: {e}", path.display());
                        return Ok(0);
                    }
                };
                let lm_sibling = path.with_file_name(format!("{stem}.landmarks.json"));
                let lm = if lm_sibling.exists() {
                    LandmarkSet::load(&lm_sibling, img.height(), img.width())?
                } else {
                    LandmarkSet::canonical(img.height(), img.width())?
                };
                let restored = dgformer_restore(&model, &store, &img, &lm)?;
                save_png(&restored, &out_dir.join(format!("{stem}.png")))?;
                Ok(1)
            })
            .collect()
    })?;
    let mut n = 0;
    for c in counts {
        n += c?;
    }
    if n == 0 {
        return Err(Error::Data(format!(
            "no readable PNG images under {}",
            input_dir.display()
        )));
    }
    Ok(n)
}
