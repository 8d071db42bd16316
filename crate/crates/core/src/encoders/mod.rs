//! The location encoder and the view encoders it is aligned with.
//!
//! * location: spherical harmonics, weighted per basis function, through a
//!   sinusoidal network to a `d`-dimensional embedding;
//! * OSM: hex-grid amenity counts, h2-mapped, two masked convolutions and a
//!   dense head;
//! * GS: a two-layer projection of precomputed satellite features;
//! * fusion: concatenated view encodings through a dense layer to `d`.

mod harmonics;
mod model;

pub use harmonics::{positional_encode, sh_basis, sh_basis_len, sh_index};
pub use model::{
    Embedding, NormStats, PreparedBatch, SpatialEmbeddingModel, OSM_CELLS, OSM_CHANNELS,
    OSM_RINGS,
};

pub(crate) use harmonics::sh_basis_into;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AdamConfig, TensorError};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EncoderError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("{view} view is disabled in this model")]
    ViewDisabled { view: &'static str },
    #[error("{what}: expected length {expected}, got {actual}")]
    Dimension {
        what: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("unknown preset {0:?}")]
    UnknownPreset(String),
    #[error("parameter {name}: {reason}")]
    Parameter { name: String, reason: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
}

/// Architecture and training hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    /// Preset name, if built from one.
    #[serde(default)]
    pub preset: Option<String>,
    /// Maximum spherical-harmonic degree `L`; the basis has `(L+1)^2` terms.
    pub sh_degree: usize,
    /// Joint embedding dimension `d`.
    pub embed_dim: usize,
    /// Satellite view output dimension; 0 disables the view.
    pub gs_dim: usize,
    /// OSM view output dimension; 0 disables the view.
    pub osm_dim: usize,
    /// Length of the precomputed satellite feature vectors.
    pub gs_input_dim: usize,
    pub gs_hidden: usize,
    /// ReLU between the two satellite projection layers. Off only in tests
    /// that need the projection to be affine.
    #[serde(default = "default_true")]
    pub gs_activation: bool,
    pub siren_widths: Vec<usize>,
    pub siren_omega0: f64,
    pub osm_filters: Vec<usize>,
    /// Ring count `k` of the hexagonal filters (square side `2k+1`).
    pub osm_filter_rings: usize,
    pub fusion_width: usize,
    pub temperature: f64,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    #[serde(default = "default_true")]
    pub trap_non_finite: bool,
}

fn default_true() -> bool {
    true
}

/// Names of the built-in presets.
pub const PRESETS: [&str; 5] = [
    "EU8_GS32_OSM32",
    "EU16_GS32_OSM16",
    "EU16_OSM16",
    "EU32_GS96_OSM32",
    "EU64_GS64",
];

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            preset: None,
            sh_degree: 7,
            embed_dim: 8,
            gs_dim: 32,
            osm_dim: 32,
            gs_input_dim: 512,
            gs_hidden: 128,
            gs_activation: true,
            siren_widths: vec![128, 128],
            siren_omega0: 30.0,
            osm_filters: vec![8, 16],
            osm_filter_rings: 1,
            fusion_width: 128,
            temperature: 0.07,
            learning_rate: 1e-5,
            weight_decay: 0.01,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            epochs: 500,
            batch_size: 128,
            patience: 20,
            seed: 0,
            trap_non_finite: true,
        }
    }
}

impl ModelConfig {
    /// One of the [`PRESETS`]: embedding dimension and view widths from the
    /// preset name, everything else at the defaults.
    pub fn preset(name: &str) -> Result<Self, EncoderError> {
        let (embed_dim, gs_dim, osm_dim) = match name {
            "EU8_GS32_OSM32" => (8, 32, 32),
            "EU16_GS32_OSM16" => (16, 32, 16),
            "EU16_OSM16" => (16, 0, 16),
            "EU32_GS96_OSM32" => (32, 96, 32),
            "EU64_GS64" => (64, 64, 0),
            other => return Err(EncoderError::UnknownPreset(other.to_string())),
        };
        Ok(Self {
            preset: Some(name.to_string()),
            embed_dim,
            gs_dim,
            osm_dim,
            ..Self::default()
        })
    }

    pub fn gs_enabled(&self) -> bool {
        self.gs_dim > 0
    }

    pub fn osm_enabled(&self) -> bool {
        self.osm_dim > 0
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn validate(&self) -> Result<(), EncoderError> {
        let fail = |msg: &str| Err(EncoderError::Config(msg.to_string()));
        if self.embed_dim == 0 {
            return fail("embed_dim must be positive");
        }
        if self.gs_dim + self.osm_dim == 0 {
            return fail("at least one view (gs_dim or osm_dim) must be enabled");
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return fail("temperature must be positive");
        }
        if self.gs_enabled() && (self.gs_input_dim == 0 || self.gs_hidden == 0) {
            return fail("gs_input_dim and gs_hidden must be positive when the GS view is enabled");
        }
        if self.siren_widths.contains(&0) || self.osm_filters.contains(&0) || self.fusion_width == 0 {
            return fail("all layer widths must be positive");
        }
        if self.osm_enabled() && self.osm_filters.is_empty() {
            return fail("the OSM encoder needs at least one convolution");
        }
        if !(self.siren_omega0 > 0.0 && self.siren_omega0.is_finite()) {
            return fail("siren_omega0 must be positive");
        }
        if !(self.learning_rate >= 0.0 && self.weight_decay >= 0.0) {
            return fail("learning_rate and weight_decay must be non-negative");
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) {
            return fail("Adam betas must lie in [0, 1)");
        }
        if self.batch_size < 2 {
            return fail("batch_size must be at least 2");
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_follow_names() {
        for name in PRESETS {
            let c = ModelConfig::preset(name).unwrap();
            c.validate().unwrap();
            let expected = format!(
                "EU{}{}{}",
                c.embed_dim,
                if c.gs_dim > 0 { format!("_GS{}", c.gs_dim) } else { String::new() },
                if c.osm_dim > 0 { format!("_OSM{}", c.osm_dim) } else { String::new() }
            );
            assert_eq!(expected, name);
        }
        assert!(ModelConfig::preset("EU7").is_err());
    }

    #[test]
    fn paper_hyperparameters_are_defaults() {
        let c = ModelConfig::default();
        assert_eq!(c.temperature, 0.07);
        assert_eq!(c.learning_rate, 1e-5);
        assert_eq!(c.weight_decay, 0.01);
        assert_eq!(c.epochs, 500);
        assert_eq!(c.batch_size, 128);
        assert_eq!(c.osm_filters, vec![8, 16]);
        assert_eq!(c.osm_filter_rings, 1);
        assert_eq!(c.fusion_width, 128);
        assert_eq!(c.siren_widths, vec![128, 128]);
    }

    #[test]
    fn invalid_configs_rejected() {
        let base = ModelConfig::default();
        let cases = [
            ModelConfig { embed_dim: 0, ..base.clone() },
            ModelConfig { gs_dim: 0, osm_dim: 0, ..base.clone() },
            ModelConfig { temperature: 0.0, ..base.clone() },
            ModelConfig { fusion_width: 0, ..base.clone() },
            ModelConfig { siren_widths: vec![16, 0], ..base.clone() },
        ];
        for c in cases {
            assert!(matches!(c.validate(), Err(EncoderError::Config(_))));
        }
    }

    #[test]
    fn config_json_round_trip() {
        let c = ModelConfig::preset("EU32_GS96_OSM32").unwrap();
        let text = serde_json::to_string(&c).unwrap();
        assert_eq!(serde_json::from_str::<ModelConfig>(&text).unwrap(), c);
    }
}
