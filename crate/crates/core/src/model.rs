//! Model configuration and parameter initialisation.

use serde::{Deserialize, Serialize};

use crate::dynamic::FilterLayout;
use crate::error::{Error, Result};
use crate::scene::FEATURE_DIM;
use crate::tensor::{LinearInit, MhsaConfig, MhsaParams, ParamInit, TensorMap};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub num_classes: usize,
    /// Per-point input channels; the first three duplicate the coordinates.
    pub input_features: usize,
    /// Backbone width `D`.
    pub feature_dim: usize,
    /// Mask feature width `D′`.
    pub mask_dim: usize,
    pub token_cell: f64,
    pub heads: usize,
    pub transformer_layers: usize,
    pub ffn_hidden: usize,
    /// Hidden width of the generated decoder.
    pub decoder_hidden: usize,
    /// Layer count of the generated decoder.
    pub decoder_layers: usize,
    /// Cells per axis of a cluster's voxel grid.
    pub grid: usize,
    pub generator_channels: usize,
    pub generator_hidden: usize,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            num_classes: 5,
            input_features: FEATURE_DIM,
            feature_dim: 32,
            mask_dim: 16,
            token_cell: 0.75,
            heads: 2,
            transformer_layers: 2,
            ffn_hidden: 64,
            decoder_hidden: 16,
            decoder_layers: 3,
            grid: 14,
            generator_channels: 32,
            generator_hidden: 64,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.input_features < 3 {
            return Err(Error::Invalid("input features must start with xyz".into()));
        }
        if self.grid == 0 || self.num_classes == 0 || self.feature_dim == 0 || self.mask_dim == 0 {
            return Err(Error::Invalid("zero-sized model dimension".into()));
        }
        if !(self.token_cell > 0.0) {
            return Err(Error::Invalid("token cell must be positive".into()));
        }
        self.attention().validate()?;
        self.layout()?;
        Ok(())
    }

    pub fn attention(&self) -> MhsaConfig {
        MhsaConfig {
            dim: self.feature_dim,
            heads: self.heads,
            ffn_hidden: self.ffn_hidden,
            rel_dim: 3,
        }
    }

    pub fn layout(&self) -> Result<FilterLayout> {
        FilterLayout::decoder(self.mask_dim, self.decoder_hidden, self.decoder_layers)
    }

    /// Width of the encoder's per-point input: centred xyz plus the
    /// non-coordinate feature channels.
    pub fn encoder_input(&self) -> usize {
        self.input_features
    }
}

/// Parameters plus the configuration that shapes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: TensorMap,
}

impl Model {
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut init = ParamInit::new(seed);
        let mut p = TensorMap::new();
        let (d, c) = (config.feature_dim, config.num_classes);
        init.mlp(
            &mut p,
            "enc.point",
            &[config.encoder_input(), d, d],
            LinearInit::Default,
        );
        init.linear(&mut p, "enc.fuse", 2 * d, d, LinearInit::Default);
        let att = config.attention();
        for l in 0..config.transformer_layers {
            MhsaParams::init(&mut init, &mut p, &format!("tf.{l}"), &att);
        }
        init.mlp(&mut p, "head.sem", &[d, d, c], LinearInit::Default);
        init.mlp(&mut p, "head.off", &[d, d, 3], LinearInit::Scaled(0.1));
        init.mlp(
            &mut p,
            "head.mask",
            &[d, d, config.mask_dim],
            LinearInit::Default,
        );
        let cg = config.generator_channels;
        init.linear(&mut p, "gw.conv1", 27 * d, cg, LinearInit::Default);
        init.linear(&mut p, "gw.conv2", 27 * cg, cg, LinearInit::Default);
        let count = config.layout()?.param_count();
        init.mlp(
            &mut p,
            "gw.mlp",
            &[cg, config.generator_hidden, count],
            LinearInit::Default,
        );
        Ok(Self { config, params: p })
    }

    /// Number of scalar parameters.
    pub fn size(&self) -> usize {
        self.params.values().map(|t| t.numel()).sum()
    }

    /// Checks that every parameter the config implies is present with the
    /// right shape.
    pub fn check_params(&self) -> Result<()> {
        let reference = Model::init(self.config.clone(), 0)?;
        for (name, t) in &reference.params {
            match self.params.get(name) {
                None => return Err(Error::MissingParam(name.clone())),
                Some(have) if have.shape() != t.shape() => {
                    return Err(Error::Invalid(format!(
                        "parameter `{name}` has shape {:?}, expected {:?}",
                        have.shape(),
                        t.shape()
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }
}
