//! Layered run configuration: built-in defaults, then an optional TOML file,
//! then command-line flags. Every key the file accepts is listed here;
//! anything else is rejected so typos fail loudly instead of silently
//! falling back to a default.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::Deserialize;

use udclab_core::dgformer::DGFormerConfig;
use udclab_core::dmnet::DMNetConfig;
use udclab_core::gan::TrainConfig;
use udclab_core::{Error, Result};

fn set<T: Copy>(target: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *target = v;
    }
}

/// Degradation source for `synthesize`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GeneratorKind {
    Classical,
    Dmnet,
}

/// Blur kernel shape for the classical generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelKind {
    Delta,
    Box,
    Gaussian,
}

/// Whole config file. Sections and keys mirror the flag names of the
/// subcommands that consume them.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FileConfig {
    pub dmnet: DmnetKeys,
    pub dgformer: DgformerKeys,
    pub train: TrainKeys,
    pub data: DataKeys,
}

/// Reads a TOML config file; absent path means all defaults.
pub fn load(path: Option<&Path>) -> Result<FileConfig> {
    match path {
        None => Ok(FileConfig::default()),
        Some(p) => {
            let text = std::fs::read_to_string(p)?;
            toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))
        }
    }
}

/// Degradation-model architecture and loss-weight overrides.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DmnetKeys {
    pub base_channels: Option<usize>,
    pub scales: Option<usize>,
    pub blocks_per_scale: Option<usize>,
    pub use_rcab: Option<bool>,
    pub use_rsab: Option<bool>,
    pub use_cssft: Option<bool>,
    pub use_dfb: Option<bool>,
    pub two_stage: Option<bool>,
    pub perceptual_weight: Option<f64>,
    pub adversarial_weight: Option<f64>,
}

impl DmnetKeys {
    pub fn apply(&self, cfg: &mut DMNetConfig) {
        set(&mut cfg.base_channels, self.base_channels);
        set(&mut cfg.scales, self.scales);
        set(&mut cfg.blocks_per_scale, self.blocks_per_scale);
        set(&mut cfg.use_rcab, self.use_rcab);
        set(&mut cfg.use_rsab, self.use_rsab);
        set(&mut cfg.use_cssft, self.use_cssft);
        set(&mut cfg.use_dfb, self.use_dfb);
        set(&mut cfg.two_stage, self.two_stage);
    }
}

/// Restorer architecture and loss-weight overrides.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DgformerKeys {
    pub base_channels: Option<usize>,
    pub udcrm_blocks: Option<usize>,
    pub irm_blocks: Option<usize>,
    pub dgrm_blocks: Option<[usize; 5]>,
    pub heads: Option<[usize; 5]>,
    pub dict_entries: Option<usize>,
    pub component_sizes: Option<[usize; 4]>,
    pub use_transformer: Option<bool>,
    pub use_udcrm: Option<bool>,
    pub use_irm: Option<bool>,
    pub use_dtb: Option<bool>,
    pub dgma_self_attention: Option<bool>,
    pub perceptual_weight: Option<f64>,
}

impl DgformerKeys {
    pub fn apply(&self, cfg: &mut DGFormerConfig) {
        set(&mut cfg.base_channels, self.base_channels);
        set(&mut cfg.udcrm_blocks, self.udcrm_blocks);
        set(&mut cfg.irm_blocks, self.irm_blocks);
        set(&mut cfg.dgrm_blocks, self.dgrm_blocks);
        set(&mut cfg.heads, self.heads);
        set(&mut cfg.dict_entries, self.dict_entries);
        set(&mut cfg.component_sizes, self.component_sizes);
        set(&mut cfg.use_transformer, self.use_transformer);
        set(&mut cfg.use_udcrm, self.use_udcrm);
        set(&mut cfg.use_irm, self.use_irm);
        set(&mut cfg.use_dtb, self.use_dtb);
        set(&mut cfg.dgma_self_attention, self.dgma_self_attention);
    }
}

/// Optimization overrides shared by both training commands.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainKeys {
    pub lr_init: Option<f64>,
    pub lr_final: Option<f64>,
    pub beta1: Option<f64>,
    pub beta2: Option<f64>,
    pub iterations: Option<u64>,
    pub batch_size: Option<usize>,
    pub crop_size: Option<usize>,
    pub seed: Option<u64>,
    pub checkpoint_every: Option<u64>,
}

impl TrainKeys {
    pub fn apply(&self, cfg: &mut TrainConfig) {
        set(&mut cfg.lr_init, self.lr_init);
        set(&mut cfg.lr_final, self.lr_final);
        set(&mut cfg.beta1, self.beta1);
        set(&mut cfg.beta2, self.beta2);
        set(&mut cfg.iterations, self.iterations);
        set(&mut cfg.batch_size, self.batch_size);
        set(&mut cfg.crop_size, self.crop_size);
        set(&mut cfg.seed, self.seed);
    }
}

/// Synthesis and per-image parallelism overrides.
#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataKeys {
    pub generator: Option<GeneratorKind>,
    pub checkpoint: Option<PathBuf>,
    pub alpha: Option<f64>,
    pub kernel: Option<KernelKind>,
    pub kernel_size: Option<usize>,
    pub kernel_sigma: Option<f64>,
    pub noise_sigma: Option<f64>,
    pub seed: Option<u64>,
    pub workers: Option<usize>,
}

/// Fully resolved synthesis settings.
#[derive(Debug, Clone)]
pub struct DataSettings {
    pub generator: GeneratorKind,
    pub checkpoint: Option<PathBuf>,
    pub alpha: f64,
    pub kernel: KernelKind,
    pub kernel_size: usize,
    pub kernel_sigma: f64,
    pub noise_sigma: f64,
    pub seed: u64,
    pub workers: usize,
}

impl Default for DataSettings {
    fn default() -> Self {
        Self {
            generator: GeneratorKind::Classical,
            checkpoint: None,
            alpha: 0.8,
            kernel: KernelKind::Gaussian,
            kernel_size: 9,
            kernel_sigma: 2.0,
            noise_sigma: 0.02,
            seed: 0,
            workers: 0,
        }
    }
}

impl DataSettings {
    pub fn apply_file(&mut self, k: &DataKeys) {
        set(&mut self.generator, k.generator);
        if let Some(p) = &k.checkpoint {
            self.checkpoint = Some(p.clone());
        }
        set(&mut self.alpha, k.alpha);
        set(&mut self.kernel, k.kernel);
        set(&mut self.kernel_size, k.kernel_size);
        set(&mut self.kernel_sigma, k.kernel_sigma);
        set(&mut self.noise_sigma, k.noise_sigma);
        set(&mut self.seed, k.seed);
        set(&mut self.workers, k.workers);
    }
}
