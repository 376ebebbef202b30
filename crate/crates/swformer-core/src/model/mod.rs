//! The spiking wavelet transformer: patch splitting, encoder blocks with
//! the frequency-aware token mixer, and the classification head.

mod forward;
mod params;

pub use forward::{batch_from_samples, ForwardOpts, ForwardOutput, LayerActivationTrace, Model, SynapseKind, SynapseTrace};
pub use params::{ParamEntry, ParamSet};

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neuron::NeuronConfig;

/// FATM ablation switches.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Ablation {
    /// Remove the frequency-learner branch entirely.
    NoHaar,
    /// Skip the inverse transform at the end of the FL pipeline.
    NoInverse,
    /// Force binary polarity inside the spiking transform.
    NoNeg,
    /// Drop the token max-pool of the DVS variant.
    NoPool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    Standard,
    /// Event-camera variant: FL filters first, SL/CM consume its
    /// re-spiked output, and a token max-pool sits at module entry.
    Dvs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenMixer {
    Fatm,
    /// Token-mean broadcasting control used by the spectrum analysis.
    GlobalAvg,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FlTransform {
    /// Spike-driven transform stages (the spike-compatible path).
    Spiking,
    /// Dense transform without spiking stages (comparison baseline).
    Exact,
}

fn default_mlp_ratio() -> usize {
    4
}

fn default_bn_momentum() -> f64 {
    0.1
}

fn default_bn_eps() -> f64 {
    1e-5
}

fn default_wavelet_v_th() -> f64 {
    1.0
}

fn default_in_channels() -> usize {
    1
}

/// Full architecture description.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Encoder block count M.
    pub depth: usize,
    /// Channel width D; must be divisible by 8 (stem schedule) and by
    /// `blocks_k`.
    pub embed_dim: usize,
    /// Weight-splitting block count k.
    pub blocks_k: usize,
    pub timesteps: usize,
    /// Input spatial extent (H, W).
    pub input_size: (usize, usize),
    #[serde(default = "default_in_channels")]
    pub in_channels: usize,
    pub num_classes: usize,
    /// Main-path neuron defaults (binary LIF).
    #[serde(default = "ModelConfig::default_neuron")]
    pub neuron: NeuronConfig,
    /// Firing threshold of the wavelet-path IF stages.
    #[serde(default = "default_wavelet_v_th")]
    pub wavelet_v_th: f64,
    #[serde(default = "ModelConfig::default_variant")]
    pub variant: Variant,
    #[serde(default)]
    pub mask_dc: bool,
    #[serde(default)]
    pub ablations: BTreeSet<Ablation>,
    #[serde(default = "ModelConfig::default_mixer")]
    pub token_mixer: TokenMixer,
    #[serde(default = "ModelConfig::default_fl_transform")]
    pub fl_transform: FlTransform,
    #[serde(default = "default_mlp_ratio")]
    pub mlp_ratio: usize,
    #[serde(default = "default_bn_momentum")]
    pub bn_momentum: f64,
    #[serde(default = "default_bn_eps")]
    pub bn_eps: f64,
}

impl ModelConfig {
    fn default_neuron() -> NeuronConfig {
        NeuronConfig::lif(1.0, 0.5)
    }

    fn default_variant() -> Variant {
        Variant::Standard
    }

    fn default_mixer() -> TokenMixer {
        TokenMixer::Fatm
    }

    fn default_fl_transform() -> FlTransform {
        FlTransform::Spiking
    }

    /// Spatial side of the token grid after the stem (input / 4).
    pub fn token_side(&self) -> (usize, usize) {
        (self.input_size.0 / 4, self.input_size.1 / 4)
    }

    /// Stem channel schedule: D/8 -> D/4 -> D/2 -> D.
    pub fn stem_channels(&self) -> [usize; 4] {
        let d = self.embed_dim;
        [d / 8, d / 4, d / 2, d]
    }

    pub fn has_ablation(&self, a: Ablation) -> bool {
        self.ablations.contains(&a)
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth == 0 {
            return Err(Error::Config("depth must be >= 1".into()));
        }
        if self.embed_dim == 0 || self.embed_dim % 8 != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} must be a positive multiple of 8",
                self.embed_dim
            )));
        }
        if self.blocks_k == 0 || self.embed_dim % self.blocks_k != 0 {
            return Err(Error::Config(format!(
                "embed_dim {} not divisible by blocks_k {}",
                self.embed_dim, self.blocks_k
            )));
        }
        if self.timesteps == 0 {
            return Err(Error::Config("timesteps must be >= 1".into()));
        }
        if self.num_classes < 2 {
            return Err(Error::Config("num_classes must be >= 2".into()));
        }
        if self.mlp_ratio == 0 {
            return Err(Error::Config("mlp_ratio must be >= 1".into()));
        }
        let (h, w) = self.input_size;
        if h % 4 != 0 || w % 4 != 0 {
            return Err(Error::Config(format!(
                "input size {h}x{w} must be divisible by the patching factor 4"
            )));
        }
        let (th, tw) = self.token_side();
        if th != tw || !th.is_power_of_two() {
            return Err(Error::Config(format!(
                "token grid {th}x{tw} must be square with a power-of-two side for the Haar transform"
            )));
        }
        if !(self.wavelet_v_th > 0.0) {
            return Err(Error::Config("wavelet_v_th must be > 0".into()));
        }
        if !(self.bn_momentum > 0.0 && self.bn_momentum <= 1.0) {
            return Err(Error::Config("bn_momentum must lie in (0, 1]".into()));
        }
        self.neuron.validate()?;
        Ok(())
    }

    /// A small configuration used across tests and examples.
    pub fn toy(num_classes: usize) -> ModelConfig {
        ModelConfig {
            depth: 2,
            embed_dim: 32,
            blocks_k: 2,
            timesteps: 4,
            input_size: (16, 16),
            in_channels: 1,
            num_classes,
            neuron: Self::default_neuron(),
            wavelet_v_th: 1.0,
            variant: Variant::Standard,
            mask_dc: false,
            ablations: BTreeSet::new(),
            token_mixer: TokenMixer::Fatm,
            fl_transform: FlTransform::Spiking,
            mlp_ratio: 4,
            bn_momentum: 0.1,
            bn_eps: 1e-5,
        }
    }
}
