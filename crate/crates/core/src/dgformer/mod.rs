//! Dictionary-guided restoration transformer.
//!
//! The restorer runs four stages on a degraded face: a shallow conv (SFE), a
//! stack of channel-attention transformer blocks (UDCRM), a five-level
//! encoder-decoder whose levels each query learnable facial-component
//! dictionaries once (DGRM), and a reconstruction stack (IRM) that emits a
//! residual added back onto the input.

pub mod dict;

use ndarray::ArrayD;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::landmarks::LandmarkSet;
use crate::losses::{l1_loss, perceptual_loss, FeaturePyramid};
use crate::nn::{
    ChannelNorm, Conv2d, ConvResBlock, ConvTranspose2d, Gffn, MhcAttention, TransformerBlock,
    WInit,
};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::params::ParamStore;
use crate::rng::{rng_for, Stream};
use crate::scalar::{sc, Scalar};

pub use dict::{ComponentDictionary, Dtb};

/// Spatial scale of each encoder-decoder level.
pub const DGRM_SCALES: [usize; 5] = [1, 2, 4, 2, 1];

/// Weight decay of the restorer's optimizer.
pub const RESTORER_WEIGHT_DECAY: f64 = 0.01;

/// Architecture of the restorer. Block counts are totals: each
/// encoder-decoder level spends one block on the dictionary-guided pair and
/// the rest on plain transformer blocks.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DGFormerConfig {
    /// Channels at full resolution; level channels scale with
    /// [`DGRM_SCALES`].
    pub base_channels: usize,
    pub udcrm_blocks: usize,
    pub irm_blocks: usize,
    pub dgrm_blocks: [usize; 5],
    pub heads: [usize; 5],
    /// Key/value pairs per component per level.
    pub dict_entries: usize,
    /// Full-resolution crop side per component (left eye, right eye, nose,
    /// mouth); each a multiple of the deepest scale.
    pub component_sizes: [usize; 4],
    /// Off swaps every transformer block for a plain conv residual block.
    pub use_transformer: bool,
    /// Off skips the pre-encoder restoration stack.
    pub use_udcrm: bool,
    /// Off skips the reconstruction stack (the output conv remains).
    pub use_irm: bool,
    /// Off drops the dictionary query; guided attention sees the feature
    /// itself on the key/value side.
    pub use_dtb: bool,
    /// On replaces the guided attention pair with a standard self-attention
    /// block (no dictionary at all).
    pub dgma_self_attention: bool,
}

impl Default for DGFormerConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            udcrm_blocks: 4,
            irm_blocks: 4,
            dgrm_blocks: [6, 6, 8, 6, 6],
            heads: [2, 4, 8, 4, 2],
            dict_entries: 8,
            component_sizes: [16, 16, 16, 16],
            use_transformer: true,
            use_udcrm: true,
            use_irm: true,
            use_dtb: true,
            dgma_self_attention: false,
        }
    }
}

impl DGFormerConfig {
    /// The smallest useful model; handy for tests and smoke training.
    pub fn tiny() -> Self {
        Self {
            base_channels: 8,
            udcrm_blocks: 1,
            irm_blocks: 1,
            dgrm_blocks: [1, 1, 1, 1, 1],
            dict_entries: 2,
            component_sizes: [8, 8, 8, 8],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 {
            return Err(Error::Config("base_channels must be >= 1".into()));
        }
        if self.dgrm_blocks.iter().any(|&b| b == 0) {
            return Err(Error::Config("every level needs at least one block".into()));
        }
        if self.dict_entries == 0 {
            return Err(Error::Config("dict_entries must be >= 1".into()));
        }
        for (l, (&h, &s)) in self.heads.iter().zip(&DGRM_SCALES).enumerate() {
            let c = self.base_channels * s;
            if h == 0 || c % h != 0 {
                return Err(Error::Config(format!(
                    "level {l}: {c} channels not divisible by {h} heads"
                )));
            }
        }
        if self.base_channels % self.heads[0] != 0 {
            return Err(Error::Config(format!(
                "{} channels not divisible by {} heads",
                self.base_channels, self.heads[0]
            )));
        }
        let deepest = *DGRM_SCALES.iter().max().unwrap();
        for &a in &self.component_sizes {
            if a == 0 || a % deepest != 0 {
                return Err(Error::Config(format!(
                    "component size {a} must be a positive multiple of {deepest}"
                )));
            }
        }
        Ok(())
    }

    fn level_channels(&self) -> [usize; 5] {
        let mut out = [0; 5];
        for (o, &s) in out.iter_mut().zip(&DGRM_SCALES) {
            *o = self.base_channels * s;
        }
        out
    }

    /// Inputs are padded so height and width divide this.
    pub fn size_multiple(&self) -> usize {
        *DGRM_SCALES.iter().max().unwrap()
    }
}

/// How parameters start out.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum InitMode {
    /// Small random tail, random projections: ready for training.
    Standard,
    /// Every residual output projection at zero: the model is exactly the
    /// identity, which pins down the wiring in tests.
    ZeroResidual,
}

enum Trunk {
    Tb(TransformerBlock),
    Res(ConvResBlock),
}

impl Trunk {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        heads: usize,
        cfg: &DGFormerConfig,
        zero_residual: bool,
    ) -> Self {
        if cfg.use_transformer {
            Trunk::Tb(TransformerBlock::new(
                store,
                rng,
                name,
                channels,
                heads,
                zero_residual,
            ))
        } else {
            Trunk::Res(ConvResBlock::new(store, rng, name, channels))
        }
    }

    fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        f: &Tensor<T>,
    ) -> Tensor<T> {
        match self {
            Trunk::Tb(b) => b.forward(tape, store, f),
            Trunk::Res(b) => b.forward(tape, store, f),
        }
    }
}

fn trunk_stack<T: Scalar>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    prefix: &str,
    n: usize,
    start: usize,
    channels: usize,
    heads: usize,
    cfg: &DGFormerConfig,
    zero_residual: bool,
) -> Vec<Trunk> {
    (start..start + n)
        .map(|i| {
            Trunk::new(
                store,
                rng,
                &format!("{prefix}/b{i}"),
                channels,
                heads,
                cfg,
                zero_residual,
            )
        })
        .collect()
}

/// One encoder-decoder level: the dictionary-guided pair plus refinement
/// blocks, or a plain stack under the self-attention ablation.
enum DgtbLevel {
    Guided {
        dgma: MhcAttention,
        dtb: Option<Dtb>,
        norm: ChannelNorm,
        ffn: Gffn,
        rest: Vec<Trunk>,
    },
    Plain {
        blocks: Vec<Trunk>,
    },
}

impl DgtbLevel {
    #[allow(clippy::too_many_arguments)]
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        level: usize,
        channels: usize,
        heads: usize,
        blocks: usize,
        cfg: &DGFormerConfig,
        zero_residual: bool,
    ) -> Self {
        let name = format!("dgrm/l{level}");
        if cfg.dgma_self_attention {
            return DgtbLevel::Plain {
                blocks: trunk_stack(
                    store,
                    rng,
                    &name,
                    blocks,
                    0,
                    channels,
                    heads,
                    cfg,
                    zero_residual,
                ),
            };
        }
        let dgma = MhcAttention::new(
            store,
            rng,
            &format!("{name}/dgma"),
            channels,
            heads,
            zero_residual,
        );
        let dtb = cfg.use_dtb.then(|| {
            Dtb::new(
                store,
                rng,
                &format!("{name}/dtb"),
                channels,
                level,
                DGRM_SCALES[level],
            )
        });
        let norm = ChannelNorm::new(store, &format!("{name}/norm"), channels);
        let ffn = Gffn::new(store, rng, &format!("{name}/ffn"), channels, zero_residual);
        let rest = trunk_stack(
            store,
            rng,
            &name,
            blocks - 1,
            1,
            channels,
            heads,
            cfg,
            zero_residual,
        );
        DgtbLevel::Guided {
            dgma,
            dtb,
            norm,
            ffn,
            rest,
        }
    }

    fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        f: &Tensor<T>,
        landmarks: &[LandmarkSet],
        dict: Option<&ComponentDictionary>,
    ) -> Result<Tensor<T>> {
        match self {
            DgtbLevel::Plain { blocks } => {
                let mut f = f.clone();
                for b in blocks {
                    f = b.forward(tape, store, &f);
                }
                Ok(f)
            }
            DgtbLevel::Guided {
                dgma,
                dtb,
                norm,
                ffn,
                rest,
            } => {
                let f_dic = match (dtb, dict) {
                    (Some(dtb), Some(dict)) => dtb.forward(tape, store, f, landmarks, dict)?,
                    _ => f.clone(),
                };
                // The guided attention carries the residual itself.
                let f = dgma.forward(tape, store, f, &f_dic);
                let mut f = f.add(&ffn.forward(tape, store, &norm.forward(tape, store, &f)));
                for b in rest {
                    f = b.forward(tape, store, &f);
                }
                Ok(f)
            }
        }
    }
}

/// The full restorer. Construction is deterministic in the seed; see
/// [`InitMode`] for the two starting points.
pub struct DGFormer {
    cfg: DGFormerConfig,
    sfe: Conv2d,
    udcrm: Vec<Trunk>,
    levels: Vec<DgtbLevel>,
    downs: Vec<Conv2d>,
    ups: Vec<ConvTranspose2d>,
    fuses: Vec<Conv2d>,
    irm: Vec<Trunk>,
    tail: Conv2d,
    dict: Option<ComponentDictionary>,
}

impl DGFormer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &DGFormerConfig,
        init: InitMode,
    ) -> Result<Self> {
        cfg.validate()?;
        let zero = init == InitMode::ZeroResidual;
        let c = cfg.base_channels;
        let ch = cfg.level_channels();

        let sfe = Conv2d::new(store, rng, "sfe", 3, c, 3, 1, 1, WInit::Kaiming);
        let udcrm = trunk_stack(
            store,
            rng,
            "udcrm",
            cfg.udcrm_blocks,
            0,
            c,
            cfg.heads[0],
            cfg,
            zero,
        );

        let mut levels = Vec::with_capacity(5);
        let mut downs = Vec::new();
        let mut ups = Vec::new();
        let mut fuses = Vec::new();
        for l in 0..5 {
            levels.push(DgtbLevel::new(
                store,
                rng,
                l,
                ch[l],
                cfg.heads[l],
                cfg.dgrm_blocks[l],
                cfg,
                zero,
            ));
            match l {
                0 | 1 => downs.push(Conv2d::new(
                    store,
                    rng,
                    &format!("dgrm/down{l}"),
                    ch[l],
                    ch[l + 1],
                    3,
                    2,
                    1,
                    WInit::Kaiming,
                )),
                2 | 3 => {
                    ups.push(ConvTranspose2d::new(
                        store,
                        rng,
                        &format!("dgrm/up{l}"),
                        ch[l],
                        ch[l + 1],
                        2,
                        WInit::Kaiming,
                    ));
                    fuses.push(Conv2d::pointwise(
                        store,
                        rng,
                        &format!("dgrm/fuse{l}"),
                        ch[l + 1] * 2,
                        ch[l + 1],
                        WInit::Kaiming,
                    ));
                }
                _ => {}
            }
        }

        let irm = trunk_stack(
            store,
            rng,
            "irm",
            cfg.irm_blocks,
            0,
            c,
            cfg.heads[0],
            cfg,
            zero,
        );
        // A small-random tail keeps early outputs near the input while still
        // letting gradients reach every upstream parameter from step one.
        let tail_init = if zero { WInit::Zero } else { WInit::Normal(0.01) };
        let tail = Conv2d::new(store, rng, "irm/tail", c, 3, 3, 1, 1, tail_init);

        let wants_dict = cfg.use_dtb && !cfg.dgma_self_attention;
        let dict = if wants_dict {
            Some(ComponentDictionary::new(
                store,
                rng,
                &ch,
                &DGRM_SCALES,
                &cfg.component_sizes,
                cfg.dict_entries,
            )?)
        } else {
            None
        };

        Ok(Self {
            cfg: cfg.clone(),
            sfe,
            udcrm,
            levels,
            downs,
            ups,
            fuses,
            irm,
            tail,
            dict,
        })
    }

    pub fn config(&self) -> &DGFormerConfig {
        &self.cfg
    }

    /// Restores a batch of (n, 3, h, w) images in [0, 1] guided by one
    /// landmark set per sample. Sizes that do not divide the pyramid factor
    /// are replicate-padded and cropped back.
    pub fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
        landmarks: &[LandmarkSet],
    ) -> Result<Tensor<T>> {
        let shape = x.shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected (n, 3, h, w) input, got {shape:?}"
            )));
        }
        if landmarks.len() != shape[0] {
            return Err(Error::Data(format!(
                "{} landmark sets for a batch of {}",
                landmarks.len(),
                shape[0]
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        let m = self.cfg.size_multiple();
        let (ph, pw) = ((m - h % m) % m, (m - w % m) % m);
        let xp = if ph > 0 || pw > 0 {
            x.pad_edge_bottom_right(ph, pw)
        } else {
            x.clone()
        };

        let mut f = self.sfe.forward(tape, store, &xp);
        if self.cfg.use_udcrm {
            for b in &self.udcrm {
                f = b.forward(tape, store, &f);
            }
        }

        let dict = self.dict.as_ref();
        let l0 = self.levels[0].forward(tape, store, &f, landmarks, dict)?;
        let d0 = self.downs[0].forward(tape, store, &l0);
        let l1 = self.levels[1].forward(tape, store, &d0, landmarks, dict)?;
        let d1 = self.downs[1].forward(tape, store, &l1);
        let l2 = self.levels[2].forward(tape, store, &d1, landmarks, dict)?;
        let u1 = self.ups[0].forward(tape, store, &l2);
        let f3 = self
            .fuses[0]
            .forward(tape, store, &Tensor::concat(&[&u1, &l1], 1));
        let l3 = self.levels[3].forward(tape, store, &f3, landmarks, dict)?;
        let u0 = self.ups[1].forward(tape, store, &l3);
        let f4 = self
            .fuses[1]
            .forward(tape, store, &Tensor::concat(&[&u0, &l0], 1));
        let l4 = self.levels[4].forward(tape, store, &f4, landmarks, dict)?;

        let mut g = l4;
        if self.cfg.use_irm {
            for b in &self.irm {
                g = b.forward(tape, store, &g);
            }
        }
        let out = xp.add(&self.tail.forward(tape, store, &g)).clamp01();
        Ok(if ph > 0 || pw > 0 {
            out.crop_hw(0, h, 0, w)
        } else {
            out
        })
    }
}

/// Loss values from one restorer step, already plain numbers.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct RestoreStepLosses {
    pub l_l1: f64,
    pub l_per: f64,
    pub total: f64,
}

/// L1-plus-perceptual training with decoupled weight decay.
pub struct DGFormerTrainer<T: Scalar> {
    pub model: DGFormer,
    pub store: ParamStore<T>,
    pub adam: AdamState,
    pub adam_cfg: AdamConfig,
    pub pyramid: FeaturePyramid<T>,
    /// Weight of the perceptual term.
    pub perceptual_weight: f64,
}

impl<T: Scalar> DGFormerTrainer<T> {
    pub fn new(
        cfg: &DGFormerConfig,
        seed: u64,
        betas: (f64, f64),
        perceptual_weight: f64,
    ) -> Result<Self> {
        let mut store = ParamStore::new();
        let mut rng = rng_for(seed, Stream::ParamInit);
        let model = DGFormer::new(&mut store, &mut rng, cfg, InitMode::Standard)?;
        let adam = AdamState::new(&store);
        Ok(Self {
            model,
            store,
            adam,
            adam_cfg: AdamConfig::adamw(betas.0, betas.1, RESTORER_WEIGHT_DECAY),
            pyramid: FeaturePyramid::new(),
            perceptual_weight,
        })
    }

    /// One optimization step on a batch.
    pub fn step(
        &mut self,
        degraded: &ArrayD<T>,
        clean: &ArrayD<T>,
        landmarks: &[LandmarkSet],
        lr: f64,
    ) -> Result<RestoreStepLosses> {
        if degraded.shape().first() == Some(&0) || degraded.ndim() == 0 {
            return Err(Error::Data("empty batch".into()));
        }
        if degraded.shape() != clean.shape() {
            return Err(Error::ShapeMismatch(format!(
                "degraded {:?} vs clean {:?}",
                degraded.shape(),
                clean.shape()
            )));
        }
        let tape = Tape::new();
        let x = tape.constant(degraded.clone());
        let y = tape.constant(clean.clone());
        let restored = self.model.forward(&tape, &self.store, &x, landmarks)?;
        let l1 = l1_loss(&restored, &y);
        let mut loss = l1.clone();
        let mut l_per = 0.0;
        if self.perceptual_weight != 0.0 {
            let per = perceptual_loss(&self.pyramid, &tape, &restored, &y);
            l_per = per.scalar().to_f64().unwrap();
            loss = loss.add(&per.mul_scalar(sc(self.perceptual_weight)));
        }
        tape.backward(&loss);
        let grads = tape.param_grads(&self.store);
        adam_step(&mut self.store, &mut self.adam, &grads, lr, &self.adam_cfg);
        Ok(RestoreStepLosses {
            l_l1: l1.scalar().to_f64().unwrap(),
            l_per,
            total: loss.scalar().to_f64().unwrap(),
        })
    }
}
