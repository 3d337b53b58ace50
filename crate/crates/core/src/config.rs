//! Architecture hyperparameters.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::conv_param_count;

/// Feature extractor used inside the recurrent cell.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Backbone {
    /// Chain of residual dense blocks (the reconstruction network proper).
    Rrnet,
    /// Plain residual-block recurrence, used to check that the prebuilder
    /// transfers to a simpler unidirectional cell.
    Simple,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    /// Upscaling factor.
    pub scale: usize,
    /// Colour channels per frame.
    pub channels: usize,
    /// Trunk width of the recurrent cell.
    pub width: usize,
    /// Hidden-state channels propagated through time.
    pub hidden_temporal: usize,
    /// Hidden-state channels turned into the SR residual; must equal
    /// `scale^2 * channels`.
    pub hidden_spatial: usize,
    pub backbone: Backbone,
    pub n_rdb: usize,
    /// Output width of each dense stage inside a residual dense block.
    pub rdb_growth: usize,
    /// Residual blocks in the `simple` backbone.
    pub simple_blocks: usize,
    /// Whether the initial hidden state is prebuilt; `m = 0` also disables it.
    pub ipnet: bool,
    /// Leading frames consumed by the prebuilder.
    pub m: usize,
    /// Shallow-feature channels produced per input frame by the group conv.
    pub ipnet_group_width: usize,
    /// Width after the 1x1 reduction, shared by the deep residual blocks.
    pub ipnet_width: usize,
    pub ipnet_res_blocks: usize,
    pub se: bool,
    /// SE reduction ratio; falls back to the channel count below 16 channels.
    pub se_reduction: usize,
    /// Seed for weight initialisation.
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            scale: 4,
            channels: 3,
            width: 128,
            hidden_temporal: 128,
            hidden_spatial: 48,
            backbone: Backbone::Rrnet,
            n_rdb: 10,
            rdb_growth: 64,
            simple_blocks: 5,
            ipnet: true,
            m: 7,
            ipnet_group_width: 16,
            ipnet_width: 128,
            ipnet_res_blocks: 5,
            se: true,
            se_reduction: 16,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// A small configuration for tests and desk-scale experiments.
    pub fn tiny() -> Self {
        Self {
            width: 8,
            hidden_temporal: 8,
            n_rdb: 1,
            rdb_growth: 8,
            simple_blocks: 1,
            m: 3,
            ipnet_group_width: 8,
            ipnet_width: 8,
            ipnet_res_blocks: 1,
            se_reduction: 4,
            ..Self::default()
        }
    }

    pub fn ipnet_active(&self) -> bool {
        self.ipnet && self.m > 0
    }

    pub fn hidden_channels(&self) -> usize {
        self.hidden_temporal + self.hidden_spatial
    }

    /// Channels entering the recurrent cell: current frame, previous frame
    /// and the hidden state.
    pub fn step_input_channels(&self) -> usize {
        2 * self.channels + self.hidden_channels()
    }

    pub fn shallow_width(&self) -> usize {
        self.m * self.ipnet_group_width
    }

    /// Reduction ratio actually applied to the shallow features.
    pub fn effective_se_reduction(&self) -> usize {
        let c = self.shallow_width();
        if c < 16 {
            c
        } else {
            self.se_reduction
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("scale", self.scale),
            ("channels", self.channels),
            ("width", self.width),
            ("hidden_temporal", self.hidden_temporal),
            ("hidden_spatial", self.hidden_spatial),
        ];
        for (name, v) in positive {
            if v == 0 {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        if self.hidden_spatial != self.scale * self.scale * self.channels {
            return Err(Error::Config(format!(
                "hidden_spatial = {} but pixel shuffle by {} of {} channels needs {}",
                self.hidden_spatial,
                self.scale,
                self.channels,
                self.scale * self.scale * self.channels
            )));
        }
        if self.backbone == Backbone::Rrnet && self.n_rdb > 0 && self.rdb_growth == 0 {
            return Err(Error::Config("rdb_growth must be positive".into()));
        }
        if self.ipnet_active() {
            if self.ipnet_group_width == 0 || self.ipnet_width == 0 {
                return Err(Error::Config(
                    "ipnet_group_width and ipnet_width must be positive".into(),
                ));
            }
            if self.se {
                let c = self.shallow_width();
                let r = self.effective_se_reduction();
                if r == 0 || c % r != 0 {
                    return Err(Error::Config(format!(
                        "se_reduction {r} does not divide the {c} shallow channels"
                    )));
                }
            }
        }
        Ok(())
    }

    /// Exact trainable-scalar count, computed from the shapes alone.
    pub fn count_params(&self) -> usize {
        let c3 = |i, o| conv_param_count(i, o, 3, 1);
        let head = |w| c3(w, self.hidden_temporal) + c3(w, self.hidden_spatial);
        let mut n = c3(self.step_input_channels(), self.width) + head(self.width);
        n += match self.backbone {
            Backbone::Rrnet => {
                let g = self.rdb_growth;
                let stages: usize = (0..crate::blocks::RDB_STAGES)
                    .map(|i| c3(self.width + i * g, g))
                    .sum();
                let fuse = conv_param_count(self.width + crate::blocks::RDB_STAGES * g, self.width, 1, 1);
                self.n_rdb * (stages + fuse)
            }
            Backbone::Simple => self.simple_blocks * 2 * c3(self.width, self.width),
        };
        if self.ipnet_active() {
            let s = self.shallow_width();
            let iw = self.ipnet_width;
            n += conv_param_count(self.m * self.channels, s, 3, self.m);
            if self.se {
                n += 2 * s * (s / self.effective_se_reduction());
            }
            n += conv_param_count(s, iw, 1, 1);
            n += self.ipnet_res_blocks * 2 * c3(iw, iw);
            n += head(iw);
        }
        n
    }
}
