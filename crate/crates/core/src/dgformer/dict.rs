//! Learnable component dictionaries and the dictionary transfer block.
//!
//! Each facial component owns, per pyramid level, a bank of key/value
//! feature grids. A crop around the component queries the bank with a
//! softmax over key similarities, and the weighted value blend is fused back
//! into the crop before pasting it into the feature map.

use rand_chacha::ChaCha8Rng;

use crate::autodiff::roi::{roi_extract, roi_paste};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::landmarks::{Component, LandmarkSet, COMPONENTS};
use crate::nn::{Conv2d, WInit, LEAKY_SLOPE};
use crate::params::{self, ParamId, ParamStore};
use crate::scalar::{sc, Scalar};

/// One component's bank at one level.
#[derive(Clone, Copy)]
pub struct DictEntry {
    pub keys: ParamId,
    pub values: ParamId,
    /// Crop side at this level: the component size divided by the scale.
    pub side: usize,
    pub channels: usize,
}

/// Per-component, per-level key/value banks. Parameter paths follow
/// `dict/<component>/<level>/{keys,values}`.
pub struct ComponentDictionary {
    /// Indexed `[component][level]`.
    entries: Vec<Vec<DictEntry>>,
    pub dict_entries: usize,
}

impl ComponentDictionary {
    /// `level_channels[l]` and `level_scales[l]` describe the pyramid;
    /// `component_sizes[c]` is the full-resolution crop side per component,
    /// each a multiple of every scale.
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        level_channels: &[usize],
        level_scales: &[usize],
        component_sizes: &[usize; 4],
        dict_entries: usize,
    ) -> Result<Self> {
        if dict_entries == 0 {
            return Err(Error::Config("dictionary needs at least one entry".into()));
        }
        let mut entries = Vec::with_capacity(4);
        for (ci, comp) in COMPONENTS.iter().enumerate() {
            let mut per_level = Vec::with_capacity(level_channels.len());
            for (l, (&c, &s)) in level_channels.iter().zip(level_scales).enumerate() {
                let a = component_sizes[ci];
                if a % s != 0 || a / s == 0 {
                    return Err(Error::Config(format!(
                        "component size {a} not divisible by scale {s}"
                    )));
                }
                let side = a / s;
                let shape = [dict_entries, c, side, side];
                let keys = store.register(
                    format!("dict/{}/{l}/keys", comp.name()),
                    params::kaiming::<T, _>(rng, &shape),
                );
                let values = store.register(
                    format!("dict/{}/{l}/values", comp.name()),
                    params::kaiming::<T, _>(rng, &shape),
                );
                per_level.push(DictEntry {
                    keys,
                    values,
                    side,
                    channels: c,
                });
            }
            entries.push(per_level);
        }
        Ok(Self {
            entries,
            dict_entries,
        })
    }

    pub fn entry(&self, c: Component, level: usize) -> DictEntry {
        let ci = COMPONENTS.iter().position(|&x| x == c).unwrap();
        self.entries[ci][level]
    }
}

/// Queries the dictionary once for every component and pastes the fused
/// crops back in the fixed component order.
pub struct Dtb {
    q1: Conv2d,
    q2: Conv2d,
    fuse: Conv2d,
    level: usize,
    scale: usize,
}

impl Dtb {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        level: usize,
        scale: usize,
    ) -> Self {
        let q1 = Conv2d::new(
            store,
            rng,
            &format!("{name}/q1"),
            channels,
            channels,
            3,
            1,
            1,
            WInit::Kaiming,
        );
        let q2 = Conv2d::new(
            store,
            rng,
            &format!("{name}/q2"),
            channels,
            channels,
            3,
            1,
            1,
            WInit::Kaiming,
        );
        let fuse = Conv2d::pointwise(
            store,
            rng,
            &format!("{name}/fuse"),
            channels * 2,
            channels,
            WInit::Kaiming,
        );
        Self {
            q1,
            q2,
            fuse,
            level,
            scale,
        }
    }

    /// The fusion conv's weight, exposed so tests can wire it to an exact
    /// pass-through of the crop half.
    pub fn fuse_weight(&self) -> ParamId {
        self.fuse.weight_id()
    }

    /// Window origins `(y, x)` of one component across the batch, in this
    /// level's pixel units.
    fn origins(&self, landmarks: &[LandmarkSet], c: Component) -> Vec<(f64, f64)> {
        landmarks
            .iter()
            .map(|lm| {
                let (ox, oy) = lm.get(c).origin();
                (oy / self.scale as f64, ox / self.scale as f64)
            })
            .collect()
    }

    /// Validates one component's boxes and returns its crop origins.
    fn checked_origins(
        &self,
        landmarks: &[LandmarkSet],
        comp: Component,
        entry: DictEntry,
    ) -> Result<Vec<(f64, f64)>> {
        for lm in landmarks {
            let b = lm.get(comp);
            if b.size != entry.side * self.scale {
                return Err(Error::Data(format!(
                    "{} box size {} does not match the dictionary's {}",
                    comp.name(),
                    b.size,
                    entry.side * self.scale
                )));
            }
        }
        Ok(self.origins(landmarks, comp))
    }

    /// One component's crop and its softmax weights over the bank rows,
    /// shapes (n, c, side, side) and (n, entries).
    fn query<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        f: &Tensor<T>,
        origins: &[(f64, f64)],
        entry: DictEntry,
        y: usize,
    ) -> (Tensor<T>, Tensor<T>) {
        let n = f.shape()[0];
        let (side, c) = (entry.side, entry.channels);
        let d = c * side * side;
        let patch = roi_extract(f, origins, side);
        let q = self
            .q2
            .forward(
                tape,
                store,
                &self.q1.forward(tape, store, &patch).leaky_relu(sc(LEAKY_SLOPE)),
            )
            .reshape(&[n, d]);
        let keys = tape.param(store, entry.keys).reshape(&[y, d]);
        let logits = q
            .matmul2(&keys, false, true)
            .mul_scalar(sc(1.0 / (d as f64).sqrt()));
        (patch, logits.softmax_lastdim())
    }

    /// The normalized bank weights for one component, shape (n, entries).
    /// Exposed so validation can assert each row sums to one.
    pub fn attention_rows<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        f: &Tensor<T>,
        landmarks: &[LandmarkSet],
        dict: &ComponentDictionary,
        comp: Component,
    ) -> Result<Tensor<T>> {
        let entry = dict.entry(comp, self.level);
        let origins = self.checked_origins(landmarks, comp, entry)?;
        Ok(self
            .query(tape, store, f, &origins, entry, dict.dict_entries)
            .1)
    }

    pub fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        f: &Tensor<T>,
        landmarks: &[LandmarkSet],
        dict: &ComponentDictionary,
    ) -> Result<Tensor<T>> {
        let n = f.shape()[0];
        if landmarks.len() != n {
            return Err(Error::ShapeMismatch(format!(
                "{} landmark sets for a batch of {n}",
                landmarks.len()
            )));
        }
        let y = dict.dict_entries;
        let mut out = f.clone();
        for &comp in &COMPONENTS {
            let entry = dict.entry(comp, self.level);
            let origins = self.checked_origins(landmarks, comp, entry)?;
            let (side, c) = (entry.side, entry.channels);

            // Crops come from the incoming feature map; pastes accumulate in
            // component order so overlaps resolve deterministically.
            let (patch, weights) = self.query(tape, store, f, &origins, entry, y);
            let values = tape.param(store, entry.values).reshape(&[y, c * side * side]);
            let queried = weights
                .matmul2(&values, false, false)
                .reshape(&[n, c, side, side]);
            let fused = self
                .fuse
                .forward(tape, store, &Tensor::concat(&[&patch, &queried], 1));
            out = roi_paste(&out, &fused, &origins);
        }
        Ok(out)
    }
}
