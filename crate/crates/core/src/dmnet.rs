//! Degradation modeling network: learns to turn clean faces into realistic
//! under-display-camera captures.
//!
//! Two U-Net stages run in sequence. Stage one predicts a coarse degraded
//! image as a residual on the input; stage two refines it, helped by feature
//! transfer from stage one. Each stage's trunk is built from residual blocks
//! whose last convolution starts at zero, so a freshly constructed network
//! is exactly the identity and training moves away from a safe start.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{Conv2d, ConvTranspose2d, WInit, LEAKY_SLOPE};
use crate::params::ParamStore;
use crate::scalar::{sc, Scalar};

/// Shape of the degradation model. The booleans exist for ablations; the
/// defaults are the full model.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DMNetConfig {
    /// Channels at full resolution; doubled per downsampling, capped at 8x.
    pub base_channels: usize,
    /// Number of downsamplings in each stage.
    pub scales: usize,
    /// Residual blocks per encoder/decoder level.
    pub blocks_per_scale: usize,
    /// Channel attention in stage-one blocks (off = plain residual blocks).
    pub use_rcab: bool,
    /// Spatial attention in stage-two blocks (off = plain residual blocks).
    pub use_rsab: bool,
    /// Feature transfer from stage one into the stage-two decoder.
    pub use_cssft: bool,
    /// Fusion block between the stages (off = a single conv head).
    pub use_dfb: bool,
    /// Run both stages (off = one U-Net straight from the input).
    pub two_stage: bool,
}

impl Default for DMNetConfig {
    fn default() -> Self {
        Self {
            base_channels: 16,
            scales: 4,
            blocks_per_scale: 1,
            use_rcab: true,
            use_rsab: true,
            use_cssft: true,
            use_dfb: true,
            two_stage: true,
        }
    }
}

impl DMNetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.base_channels == 0 || self.scales == 0 || self.blocks_per_scale == 0 {
            return Err(Error::Config(
                "base_channels, scales, blocks_per_scale must all be >= 1".into(),
            ));
        }
        if self.scales > 6 {
            return Err(Error::Config(format!(
                "scales {} is unreasonably deep (max 6)",
                self.scales
            )));
        }
        Ok(())
    }

    /// Channels at pyramid level `l`.
    fn width(&self, l: usize) -> usize {
        (self.base_channels << l).min(self.base_channels * 8)
    }

    /// Inputs are padded so height and width divide this.
    pub fn size_multiple(&self) -> usize {
        1 << self.scales
    }
}

enum BlockAttn {
    None,
    /// Squeeze-excite: global pool -> bottleneck -> per-channel sigmoid gate.
    Channel {
        squeeze: Conv2d,
        excite: Conv2d,
    },
    /// Mean+max channel pool -> 7x7 conv -> per-pixel sigmoid gate.
    Spatial {
        conv: Conv2d,
    },
}

/// conv-act-conv-act-conv trunk, optional attention on the branch, then a
/// skip connection. The last conv starts at zero so the block begins as the
/// identity.
struct ResBlock {
    c1: Conv2d,
    c2: Conv2d,
    c3: Conv2d,
    attn: BlockAttn,
}

impl ResBlock {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
        attn: AttnKind,
    ) -> Self {
        let c1 = Conv2d::new(
            store,
            rng,
            &format!("{name}/c1"),
            channels,
            channels,
            3,
            1,
            1,
            WInit::Kaiming,
        );
        let c2 = Conv2d::new(
            store,
            rng,
            &format!("{name}/c2"),
            channels,
            channels,
            3,
            1,
            1,
            WInit::Kaiming,
        );
        let c3 = Conv2d::new(
            store,
            rng,
            &format!("{name}/c3"),
            channels,
            channels,
            3,
            1,
            1,
            WInit::Zero,
        );
        let attn = match attn {
            AttnKind::None => BlockAttn::None,
            AttnKind::Channel => {
                let hidden = (channels / 4).max(4);
                BlockAttn::Channel {
                    squeeze: Conv2d::pointwise(
                        store,
                        rng,
                        &format!("{name}/ca/squeeze"),
                        channels,
                        hidden,
                        WInit::Kaiming,
                    ),
                    excite: Conv2d::pointwise(
                        store,
                        rng,
                        &format!("{name}/ca/excite"),
                        hidden,
                        channels,
                        WInit::Kaiming,
                    ),
                }
            }
            AttnKind::Spatial => BlockAttn::Spatial {
                conv: Conv2d::new(
                    store,
                    rng,
                    &format!("{name}/sa/conv"),
                    2,
                    1,
                    7,
                    1,
                    3,
                    WInit::Kaiming,
                ),
            },
        };
        Self { c1, c2, c3, attn }
    }

    fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        f: &Tensor<T>,
    ) -> Tensor<T> {
        let slope = sc::<T>(LEAKY_SLOPE);
        let t = self.c1.forward(tape, store, f).leaky_relu(slope);
        let t = self.c2.forward(tape, store, &t).leaky_relu(slope);
        let t = self.c3.forward(tape, store, &t);
        let t = match &self.attn {
            BlockAttn::None => t,
            BlockAttn::Channel { squeeze, excite } => {
                let pooled = t.spatial_mean();
                let gate = excite
                    .forward(
                        tape,
                        store,
                        &squeeze.forward(tape, store, &pooled).leaky_relu(slope),
                    )
                    .sigmoid();
                t.mul(&gate)
            }
            BlockAttn::Spatial { conv } => {
                let gate = conv.forward(tape, store, &t.channel_mean_max()).sigmoid();
                t.mul(&gate)
            }
        };
        f.add(&t)
    }
}

#[derive(Clone, Copy)]
enum AttnKind {
    None,
    Channel,
    Spatial,
}

/// Cross-stage feature transfer: add projected encoder and decoder features
/// from the other stage. Projections start at zero, so transfer begins
/// neutral and is learned.
struct Cssft {
    from_enc: Conv2d,
    from_dec: Conv2d,
}

impl Cssft {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        channels: usize,
    ) -> Self {
        Self {
            from_enc: Conv2d::pointwise(
                store,
                rng,
                &format!("{name}/enc"),
                channels,
                channels,
                WInit::Zero,
            ),
            from_dec: Conv2d::pointwise(
                store,
                rng,
                &format!("{name}/dec"),
                channels,
                channels,
                WInit::Zero,
            ),
        }
    }

    fn apply<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        f: &Tensor<T>,
        f_enc: &Tensor<T>,
        f_dec: &Tensor<T>,
    ) -> Tensor<T> {
        f.add(&self.from_enc.forward(tape, store, f_enc))
            .add(&self.from_dec.forward(tape, store, f_dec))
    }
}

/// Per-scale features captured from a stage, for transfer into the other.
struct StageTaps<T: Scalar> {
    enc: Vec<Tensor<T>>,
    dec: Vec<Tensor<T>>,
}

struct UNet {
    enc: Vec<Vec<ResBlock>>,
    down: Vec<Conv2d>,
    mid: Vec<ResBlock>,
    up: Vec<ConvTranspose2d>,
    fuse: Vec<Conv2d>,
    dec: Vec<Vec<ResBlock>>,
    cssft: Option<Vec<Cssft>>,
}

impl UNet {
    fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        name: &str,
        cfg: &DMNetConfig,
        attn: AttnKind,
        with_cssft: bool,
    ) -> Self {
        let blocks = |store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, prefix: &str, c: usize| {
            (0..cfg.blocks_per_scale)
                .map(|b| ResBlock::new(store, rng, &format!("{prefix}/b{b}"), c, attn))
                .collect::<Vec<_>>()
        };
        let mut enc = Vec::new();
        let mut down = Vec::new();
        for l in 0..cfg.scales {
            enc.push(blocks(store, rng, &format!("{name}/enc/l{l}"), cfg.width(l)));
            down.push(Conv2d::new(
                store,
                rng,
                &format!("{name}/down/l{l}"),
                cfg.width(l),
                cfg.width(l + 1),
                3,
                2,
                1,
                WInit::Kaiming,
            ));
        }
        let mid = blocks(store, rng, &format!("{name}/mid"), cfg.width(cfg.scales));
        let mut up = Vec::new();
        let mut fuse = Vec::new();
        let mut dec = Vec::new();
        let mut cssft = Vec::new();
        for l in 0..cfg.scales {
            up.push(ConvTranspose2d::new(
                store,
                rng,
                &format!("{name}/up/l{l}"),
                cfg.width(l + 1),
                cfg.width(l),
                2,
                WInit::Kaiming,
            ));
            fuse.push(Conv2d::pointwise(
                store,
                rng,
                &format!("{name}/fuse/l{l}"),
                cfg.width(l) * 2,
                cfg.width(l),
                WInit::Kaiming,
            ));
            if with_cssft {
                cssft.push(Cssft::new(
                    store,
                    rng,
                    &format!("{name}/cssft/l{l}"),
                    cfg.width(l),
                ));
            }
            dec.push(blocks(store, rng, &format!("{name}/dec/l{l}"), cfg.width(l)));
        }
        Self {
            enc,
            down,
            mid,
            up,
            fuse,
            dec,
            cssft: if with_cssft { Some(cssft) } else { None },
        }
    }

    fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        feat: &Tensor<T>,
        taps_in: Option<&StageTaps<T>>,
    ) -> (Tensor<T>, StageTaps<T>) {
        let scales = self.enc.len();
        let mut f = feat.clone();
        let mut skips = Vec::with_capacity(scales);
        let mut enc_taps = Vec::with_capacity(scales);
        for l in 0..scales {
            for b in &self.enc[l] {
                f = b.forward(tape, store, &f);
            }
            enc_taps.push(f.clone());
            skips.push(f.clone());
            f = self.down[l].forward(tape, store, &f);
        }
        for b in &self.mid {
            f = b.forward(tape, store, &f);
        }
        let mut dec_taps: Vec<Option<Tensor<T>>> = (0..scales).map(|_| None).collect();
        for l in (0..scales).rev() {
            f = self.up[l].forward(tape, store, &f);
            f = self
                .fuse[l]
                .forward(tape, store, &Tensor::concat(&[&f, &skips[l]], 1));
            if let (Some(cs), Some(taps)) = (&self.cssft, taps_in) {
                f = cs[l].apply(tape, store, &f, &taps.enc[l], &taps.dec[l]);
            }
            for b in &self.dec[l] {
                f = b.forward(tape, store, &f);
            }
            dec_taps[l] = Some(f.clone());
        }
        let dec_taps = dec_taps.into_iter().map(Option::unwrap).collect();
        (
            f,
            StageTaps {
                enc: enc_taps,
                dec: dec_taps,
            },
        )
    }
}

struct Stage1 {
    head: Conv2d,
    net: UNet,
    tail: Conv2d,
}

enum Stage2Head {
    /// Fusion block: concat(coarse, input) -> two 3x3 convs.
    Fusion { c1: Conv2d, c2: Conv2d },
    /// Plain conv head on the coarse image (or the input when single-stage).
    Direct(Conv2d),
}

/// The full degradation model. See [`DMNetConfig`] for the knobs.
pub struct DMNet {
    cfg: DMNetConfig,
    stage1: Option<Stage1>,
    head2: Stage2Head,
    net2: UNet,
    tail2: Conv2d,
}

/// Forward results: the degraded prediction and, when two stages run, the
/// coarse intermediate.
pub struct DMNetOutput<T: Scalar> {
    pub degraded: Tensor<T>,
    pub coarse: Option<Tensor<T>>,
}

impl DMNet {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        rng: &mut ChaCha8Rng,
        cfg: &DMNetConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let c = cfg.base_channels;
        let stage1_attn = if cfg.use_rcab {
            AttnKind::Channel
        } else {
            AttnKind::None
        };
        let stage2_attn = if cfg.use_rsab {
            AttnKind::Spatial
        } else {
            AttnKind::None
        };
        let stage1 = cfg.two_stage.then(|| Stage1 {
            head: Conv2d::new(store, rng, "s1/head", 3, c, 3, 1, 1, WInit::Kaiming),
            net: UNet::new(store, rng, "s1", cfg, stage1_attn, false),
            tail: Conv2d::new(store, rng, "s1/tail", c, 3, 3, 1, 1, WInit::Zero),
        });
        let head2 = if cfg.two_stage && cfg.use_dfb {
            Stage2Head::Fusion {
                c1: Conv2d::new(store, rng, "dfb/c1", 6, c, 3, 1, 1, WInit::Kaiming),
                c2: Conv2d::new(store, rng, "dfb/c2", c, c, 3, 1, 1, WInit::Kaiming),
            }
        } else {
            Stage2Head::Direct(Conv2d::new(
                store,
                rng,
                "s2/head",
                3,
                c,
                3,
                1,
                1,
                WInit::Kaiming,
            ))
        };
        let with_cssft = cfg.two_stage && cfg.use_cssft;
        let net2 = UNet::new(store, rng, "s2", cfg, stage2_attn, with_cssft);
        let tail2 = Conv2d::new(store, rng, "s2/tail", c, 3, 3, 1, 1, WInit::Zero);
        Ok(Self {
            cfg: cfg.clone(),
            stage1,
            head2,
            net2,
            tail2,
        })
    }

    pub fn config(&self) -> &DMNetConfig {
        &self.cfg
    }

    /// Runs the model on a batch of (n, 3, h, w) images in [0, 1]. Arbitrary
    /// sizes are handled by replicate-padding up to the stride multiple and
    /// cropping the result back.
    pub fn forward<T: Scalar>(
        &self,
        tape: &Tape<T>,
        store: &ParamStore<T>,
        x: &Tensor<T>,
    ) -> Result<DMNetOutput<T>> {
        let shape = x.shape().to_vec();
        if shape.len() != 4 || shape[1] != 3 {
            return Err(Error::ShapeMismatch(format!(
                "expected (n, 3, h, w) input, got {shape:?}"
            )));
        }
        let (h, w) = (shape[2], shape[3]);
        let m = self.cfg.size_multiple();
        let ph = (m - h % m) % m;
        let pw = (m - w % m) % m;
        let xp = if ph > 0 || pw > 0 {
            x.pad_edge_bottom_right(ph, pw)
        } else {
            x.clone()
        };
        let slope = sc::<T>(LEAKY_SLOPE);

        let (coarse, feat_in, taps) = match &self.stage1 {
            Some(s1) => {
                let f = s1.head.forward(tape, store, &xp).leaky_relu(slope);
                let (f, taps) = s1.net.forward(tape, store, &f, None);
                let coarse = xp.add(&s1.tail.forward(tape, store, &f));
                let feat_in = match &self.head2 {
                    Stage2Head::Fusion { c1, c2 } => {
                        let cat = Tensor::concat(&[&coarse, &xp], 1);
                        let f = c1.forward(tape, store, &cat).leaky_relu(slope);
                        c2.forward(tape, store, &f).leaky_relu(slope)
                    }
                    Stage2Head::Direct(conv) => {
                        conv.forward(tape, store, &coarse).leaky_relu(slope)
                    }
                };
                (Some(coarse), feat_in, Some(taps))
            }
            None => {
                let conv = match &self.head2 {
                    Stage2Head::Direct(conv) => conv,
                    Stage2Head::Fusion { .. } => unreachable!("fusion head requires two stages"),
                };
                (None, conv.forward(tape, store, &xp).leaky_relu(slope), None)
            }
        };

        let (f2, _) = self.net2.forward(tape, store, &feat_in, taps.as_ref());
        let base = coarse.as_ref().unwrap_or(&xp);
        let degraded = base.add(&self.tail2.forward(tape, store, &f2)).clamp01();

        let crop = |t: &Tensor<T>| {
            if ph > 0 || pw > 0 {
                t.crop_hw(0, h, 0, w)
            } else {
                t.clone()
            }
        };
        Ok(DMNetOutput {
            degraded: crop(&degraded),
            coarse: coarse.as_ref().map(&crop),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::rand_array;
    use crate::params;
    use crate::rng::{rng_for, Stream};
    use ndarray::ArrayD;

    fn small_cfg() -> DMNetConfig {
        DMNetConfig {
            base_channels: 8,
            scales: 2,
            blocks_per_scale: 1,
            ..DMNetConfig::default()
        }
    }

    #[test]
    fn fresh_model_is_the_identity() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = rng_for(3, Stream::ParamInit);
        let net = DMNet::new(&mut store, &mut rng, &small_cfg()).unwrap();
        let tape = Tape::new();
        // 10x13 is not a multiple of the stride factor, so this also runs
        // the pad/crop path.
        let xv = rand_array(&[2, 3, 10, 13], 50, 0.0, 1.0).mapv(|v| v as f32);
        let x = tape.constant(xv.clone());
        let out = net.forward(&tape, &store, &x).unwrap();
        assert_eq!(out.degraded.value().as_slice().unwrap(), xv.as_slice().unwrap());
        assert_eq!(
            out.coarse.unwrap().value().as_slice().unwrap(),
            xv.as_slice().unwrap()
        );
    }

    /// With attention logits forced to zero the gate is sigmoid(0) = 0.5, so
    /// the block must equal f + 0.5 * trunk(f). Composed by hand on a
    /// 1x2x4x4 feature.
    #[test]
    fn channel_attention_at_zero_logits_scales_branch_by_half() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(4, Stream::ParamInit);
        let block = ResBlock::new(&mut store, &mut rng, "blk", 2, AttnKind::Channel);
        // Give the trunk a nonzero output and silence the attention layers.
        store.set(
            block.c3.weight_id(),
            rand_array(&[2, 2, 3, 3], 51, -0.5, 0.5),
        );
        if let BlockAttn::Channel { squeeze, excite } = &block.attn {
            store.set(squeeze.weight_id(), params::zeros(&[4, 2, 1, 1]));
            store.set(excite.weight_id(), params::zeros(&[2, 4, 1, 1]));
        } else {
            panic!("expected channel attention");
        }

        let tape = Tape::new();
        let f = tape.constant(rand_array(&[1, 2, 4, 4], 52, -1.0, 1.0));
        let got = block.forward(&tape, &store, &f);

        let slope = sc::<f64>(LEAKY_SLOPE);
        let trunk = {
            let t = block.c1.forward(&tape, &store, &f).leaky_relu(slope);
            let t = block.c2.forward(&tape, &store, &t).leaky_relu(slope);
            block.c3.forward(&tape, &store, &t)
        };
        let want = f.add(&trunk.mul_scalar(0.5));
        for (a, b) in got.value().iter().zip(want.value().iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn spatial_attention_at_zero_logits_scales_branch_by_half() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(5, Stream::ParamInit);
        let block = ResBlock::new(&mut store, &mut rng, "blk", 2, AttnKind::Spatial);
        store.set(
            block.c3.weight_id(),
            rand_array(&[2, 2, 3, 3], 53, -0.5, 0.5),
        );
        if let BlockAttn::Spatial { conv } = &block.attn {
            store.set(conv.weight_id(), params::zeros(&[1, 2, 7, 7]));
        } else {
            panic!("expected spatial attention");
        }

        let tape = Tape::new();
        let f = tape.constant(rand_array(&[1, 2, 4, 4], 54, -1.0, 1.0));
        let got = block.forward(&tape, &store, &f);
        let slope = sc::<f64>(LEAKY_SLOPE);
        let trunk = {
            let t = block.c1.forward(&tape, &store, &f).leaky_relu(slope);
            let t = block.c2.forward(&tape, &store, &t).leaky_relu(slope);
            block.c3.forward(&tape, &store, &t)
        };
        let want = f.add(&trunk.mul_scalar(0.5));
        for (a, b) in got.value().iter().zip(want.value().iter()) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn feature_transfer_with_zero_weights_passes_through() {
        let mut store = ParamStore::<f64>::new();
        let mut rng = rng_for(6, Stream::ParamInit);
        let cs = Cssft::new(&mut store, &mut rng, "t", 4);
        let tape = Tape::new();
        let f = tape.constant(rand_array(&[1, 4, 5, 5], 55, -1.0, 1.0));
        let fe = tape.constant(rand_array(&[1, 4, 5, 5], 56, -1.0, 1.0));
        let fd = tape.constant(rand_array(&[1, 4, 5, 5], 57, -1.0, 1.0));
        let out = cs.apply(&tape, &store, &f, &fe, &fd);
        assert_eq!(out.value().as_slice().unwrap(), f.value().as_slice().unwrap());

        // Nonzero projections must change the output.
        store.set(
            cs.from_enc.weight_id(),
            rand_array(&[4, 4, 1, 1], 58, -0.5, 0.5),
        );
        let out2 = cs.apply(&tape, &store, &f, &fe, &fd);
        assert_ne!(
            out2.value().as_slice().unwrap(),
            f.value().as_slice().unwrap()
        );
    }

    /// After perturbing the stage tails the output must leave the identity,
    /// stay inside [0, 1], and keep the input shape.
    #[test]
    fn perturbed_model_output_stays_in_range() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = rng_for(7, Stream::ParamInit);
        let net = DMNet::new(&mut store, &mut rng, &small_cfg()).unwrap();
        let tail_w = store.id_of("s2/tail/w").unwrap();
        store.set(
            tail_w,
            rand_array(&[3, 8, 3, 3], 59, -0.5, 0.5).mapv(|v| v as f32),
        );
        let tape = Tape::new();
        let xv = rand_array(&[1, 3, 12, 12], 60, 0.0, 1.0).mapv(|v| v as f32);
        let x = tape.constant(xv.clone());
        let out = net.forward(&tape, &store, &x).unwrap().degraded;
        assert_eq!(out.shape(), &[1, 3, 12, 12]);
        assert_ne!(out.value().as_slice().unwrap(), xv.as_slice().unwrap());
        assert!(out.value().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    /// Every ablation combination must build, run, and produce finite
    /// gradients for every parameter.
    #[test]
    fn ablations_run_and_all_gradients_are_finite() {
        let variants: Vec<DMNetConfig> = vec![
            DMNetConfig {
                use_rcab: false,
                ..small_cfg()
            },
            DMNetConfig {
                use_rsab: false,
                ..small_cfg()
            },
            DMNetConfig {
                use_cssft: false,
                ..small_cfg()
            },
            DMNetConfig {
                use_dfb: false,
                ..small_cfg()
            },
            DMNetConfig {
                two_stage: false,
                ..small_cfg()
            },
        ];
        for (i, cfg) in variants.iter().enumerate() {
            let mut store = ParamStore::<f32>::new();
            let mut rng = rng_for(8, Stream::ParamInit);
            let net = DMNet::new(&mut store, &mut rng, cfg).unwrap();
            let tape = Tape::new();
            let x = tape.constant(
                rand_array(&[1, 3, 8, 8], 61 + i as u64, 0.0, 1.0).mapv(|v| v as f32),
            );
            let target =
                tape.constant(rand_array(&[1, 3, 8, 8], 70 + i as u64, 0.0, 1.0).mapv(|v| v as f32));
            let out = net.forward(&tape, &store, &x).unwrap().degraded;
            let loss = out.sub(&target).abs().mean_all();
            tape.backward(&loss);
            for (name, grad) in store
                .iter()
                .map(|(n, _, _)| n)
                .zip(tape.param_grads(&store))
            {
                let g = grad.unwrap_or_else(|| panic!("variant {i}: no grad for {name}"));
                assert!(
                    g.iter().all(|v| v.is_finite()),
                    "variant {i}: non-finite grad for {name}"
                );
            }
        }
    }

    #[test]
    fn rejects_wrong_channel_count() {
        let mut store = ParamStore::<f32>::new();
        let mut rng = rng_for(9, Stream::ParamInit);
        let net = DMNet::new(&mut store, &mut rng, &small_cfg()).unwrap();
        let tape = Tape::new();
        let x = tape.constant(ArrayD::zeros(ndarray::IxDyn(&[1, 1, 8, 8])));
        assert!(net.forward(&tape, &store, &x).is_err());
    }
}
