//! Flat parameter storage.
//!
//! Every learnable array lives in one [`ParamStore`] under a slash-separated
//! path. Registration order is the canonical order for checkpoints and
//! optimizer state, so module constructors must register deterministically.

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::scalar::{sc, Scalar};

/// Index of one parameter inside its store.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(&self) -> usize {
        self.0
    }
}

pub struct ParamStore<T: Scalar> {
    uid: u64,
    names: Vec<String>,
    values: Vec<ArrayD<T>>,
}

impl<T: Scalar> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        use std::sync::atomic::{AtomicU64, Ordering};
        static NEXT_UID: AtomicU64 = AtomicU64::new(0);
        Self {
            uid: NEXT_UID.fetch_add(1, Ordering::Relaxed),
            names: Vec::new(),
            values: Vec::new(),
        }
    }

    /// Process-unique identity. Lets a tape that staged parameters from
    /// several stores (generator and discriminator share one graph during
    /// adversarial steps) hand each store only its own gradients.
    pub fn uid(&self) -> u64 {
        self.uid
    }

    /// Registers a parameter under a unique path.
    pub fn register(&mut self, name: impl Into<String>, value: ArrayD<T>) -> ParamId {
        let name = name.into();
        assert!(
            !self.names.iter().any(|n| n == &name),
            "duplicate parameter path {name}"
        );
        self.names.push(name);
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &ArrayD<T> {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: ArrayD<T>) {
        assert_eq!(
            self.values[id.0].shape(),
            value.shape(),
            "parameter {} shape change",
            self.names[id.0]
        );
        self.values[id.0] = value;
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.values.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, ParamId, &ArrayD<T>)> {
        self.names
            .iter()
            .zip(&self.values)
            .enumerate()
            .map(|(i, (n, v))| (n.as_str(), ParamId(i), v))
    }

    pub fn total_elements(&self) -> usize {
        self.values.iter().map(|v| v.len()).sum()
    }

    /// Copies values from another store with identical layout. Used by
    /// checkpoint restore; any mismatch in order, names, or shapes is an
    /// error rather than a silent partial load.
    pub fn load_values_from(&mut self, other: &ParamStore<T>) -> Result<()> {
        if self.names != other.names {
            return Err(Error::Format(
                "parameter layout mismatch while loading values".into(),
            ));
        }
        for (dst, src) in self.values.iter_mut().zip(&other.values) {
            if dst.shape() != src.shape() {
                return Err(Error::Format(
                    "parameter shape mismatch while loading values".into(),
                ));
            }
            *dst = src.clone();
        }
        Ok(())
    }
}

/// Zero-filled array of the given shape.
pub fn zeros<T: Scalar>(shape: &[usize]) -> ArrayD<T> {
    ArrayD::zeros(IxDyn(shape))
}

/// Constant-filled array.
pub fn full<T: Scalar>(shape: &[usize], v: T) -> ArrayD<T> {
    ArrayD::from_elem(IxDyn(shape), v)
}

/// I.i.d. normal draws with the given standard deviation.
pub fn normal<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize], std: f64) -> ArrayD<T> {
    if std == 0.0 {
        return zeros(shape);
    }
    let dist = Normal::new(0.0f64, std).expect("std must be finite and >= 0");
    ArrayD::from_shape_simple_fn(IxDyn(shape), || sc::<T>(dist.sample(rng)))
}

/// Normal draws scaled by sqrt(2 / fan_in); fan_in is the product of all
/// dimensions past the first (input channels times kernel area for convs).
pub fn kaiming<T: Scalar, R: Rng>(rng: &mut R, shape: &[usize]) -> ArrayD<T> {
    let fan_in: usize = shape[1..].iter().product::<usize>().max(1);
    normal(rng, shape, (2.0 / fan_in as f64).sqrt())
}
