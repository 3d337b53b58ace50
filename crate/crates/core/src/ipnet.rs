//! Prebuilder for the initial hidden state.
//!
//! The first `m` LR frames are stacked on the channel axis and pass through a
//! grouped 3x3 conv (one filter bank per frame), SE channel attention, a 1x1
//! reduction, a stack of residual blocks and a propagation head with the same
//! structure as the recurrent cell's (but its own weights). It runs once per
//! sequence and never reconstructs frames itself.

use rand::Rng;

use crate::blocks::{ResidualBlock, SeBlock, SeCache};
use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, Parameters};
use crate::rrnet::{HiddenState, PropagationHead, RESIDUAL_INIT_SCALE};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct IpNet {
    m: usize,
    channels: usize,
    pub shallow: Conv2d,
    pub se: Option<SeBlock>,
    pub reduce: Conv2d,
    pub deep: Vec<ResidualBlock>,
    pub head: PropagationHead,
}

/// Activations saved by [`IpNet::prebuild_cached`].
#[derive(Clone, Debug)]
pub struct IpNetCache {
    stacked: Tensor,
    shallow: Tensor,
    se: Option<SeCache>,
    filtered_input: Tensor,
    deep: Vec<(Tensor, Tensor)>,
    deep_out: Tensor,
    hidden: HiddenState,
}

impl IpNet {
    fn check_config(cfg: &ModelConfig) -> Result<()> {
        cfg.validate()?;
        if !cfg.ipnet_active() {
            return Err(Error::Config("prebuilder requested with m = 0 or ipnet disabled".into()));
        }
        Ok(())
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        Self::check_config(cfg)?;
        let s = cfg.shallow_width();
        Ok(Self {
            m: cfg.m,
            channels: cfg.channels,
            shallow: Conv2d::zeros(cfg.m * cfg.channels, s, 3, cfg.m)?,
            se: if cfg.se {
                Some(SeBlock::zeros(s, cfg.effective_se_reduction())?)
            } else {
                None
            },
            reduce: Conv2d::zeros(s, cfg.ipnet_width, 1, 1)?,
            deep: (0..cfg.ipnet_res_blocks)
                .map(|_| ResidualBlock::zeros(cfg.ipnet_width))
                .collect::<Result<_>>()?,
            head: PropagationHead::zeros(cfg.ipnet_width, cfg.hidden_temporal, cfg.hidden_spatial)?,
        })
    }

    pub fn kaiming<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Self::check_config(cfg)?;
        let s = cfg.shallow_width();
        let shallow = Conv2d::kaiming(cfg.m * cfg.channels, s, 3, cfg.m, rng)?;
        let se = if cfg.se {
            Some(SeBlock::kaiming(s, cfg.effective_se_reduction(), rng)?)
        } else {
            None
        };
        let reduce = Conv2d::kaiming(s, cfg.ipnet_width, 1, 1, rng)?;
        let deep = (0..cfg.ipnet_res_blocks)
            .map(|_| ResidualBlock::kaiming(cfg.ipnet_width, rng))
            .collect::<Result<_>>()?;
        let mut head = PropagationHead::kaiming(cfg.ipnet_width, cfg.hidden_temporal, cfg.hidden_spatial, rng)?;
        // Start h_0 at the magnitude of the recurrent states rather than far
        // above it, so the shared cell is not thrown off on the first frame.
        for w in head.temporal.weight.iter_mut().chain(head.spatial.weight.iter_mut()) {
            *w *= RESIDUAL_INIT_SCALE;
        }
        Ok(Self {
            m: cfg.m,
            channels: cfg.channels,
            shallow,
            se,
            reduce,
            deep,
            head,
        })
    }

    pub fn m(&self) -> usize {
        self.m
    }

    /// Group conv over exactly `m` stacked frames.
    pub fn shallow_extract(&self, frames: &[Tensor]) -> Result<Tensor> {
        Ok(self.shallow.forward(&self.stack(frames)?))
    }

    fn stack(&self, frames: &[Tensor]) -> Result<Tensor> {
        if frames.len() != self.m {
            return Err(Error::Input(format!(
                "prebuilder needs exactly {} frames, got {}",
                self.m,
                frames.len()
            )));
        }
        let first = &frames[0];
        if first.channels() != self.channels || frames.iter().any(|f| !f.same_shape(first)) {
            return Err(Error::Input(format!(
                "prebuilder frames must share one {}-channel shape",
                self.channels
            )));
        }
        let refs: Vec<&Tensor> = frames.iter().collect();
        Tensor::concat_channels(&refs)
    }

    /// Channel attention (when enabled) followed by the 1x1 reduction.
    pub fn filter_features(&self, shallow: &Tensor) -> Result<Tensor> {
        let weighted = match &self.se {
            Some(se) => se.forward(shallow)?,
            None => shallow.clone(),
        };
        Ok(self.reduce.forward(&weighted))
    }

    pub fn deep_extract(&self, filtered: &Tensor) -> Tensor {
        self.deep.iter().fold(filtered.clone(), |h, b| b.forward(&h))
    }

    /// Builds `h_0` from the first `m` frames of `frames`.
    pub fn prebuild_hidden(&self, frames: &[Tensor]) -> Result<HiddenState> {
        Ok(self.prebuild_cached(frames)?.0)
    }

    pub fn prebuild_cached(&self, frames: &[Tensor]) -> Result<(HiddenState, IpNetCache)> {
        if frames.len() < self.m {
            return Err(Error::Input(format!(
                "prebuilder consumes {} frames but the sequence has {}",
                self.m,
                frames.len()
            )));
        }
        let stacked = self.stack(&frames[..self.m])?;
        let shallow = self.shallow.forward(&stacked);
        let (filtered_input, se) = match &self.se {
            Some(se) => {
                let (out, cache) = se.forward_cached(&shallow)?;
                (out, Some(cache))
            }
            None => (shallow.clone(), None),
        };
        let mut h = self.reduce.forward(&filtered_input);
        let mut deep = Vec::with_capacity(self.deep.len());
        for block in &self.deep {
            let (out, inner) = block.forward_cached(&h);
            deep.push((std::mem::replace(&mut h, out), inner));
        }
        let hidden = self.head.forward(&h);
        let cache = IpNetCache {
            stacked,
            shallow,
            se,
            filtered_input,
            deep,
            deep_out: h,
            hidden: hidden.clone(),
        };
        Ok((hidden, cache))
    }

    /// Accumulates parameter gradients given the gradient reaching `h_0`.
    pub fn backward(&self, cache: &IpNetCache, grad_hidden: &HiddenState, grads: &mut IpNet) {
        let mut g = self
            .head
            .backward(&cache.deep_out, &cache.hidden, grad_hidden, &mut grads.head);
        for i in (0..self.deep.len()).rev() {
            let (input, inner) = &cache.deep[i];
            g = self.deep[i].backward(input, inner, &g, &mut grads.deep[i]);
        }
        let d_weighted = self
            .reduce
            .backward(&cache.filtered_input, &g, &mut grads.reduce, true)
            .expect("input gradient requested");
        let d_shallow = match (&self.se, &cache.se, grads.se.as_mut()) {
            (Some(se), Some(c), Some(gse)) => se.backward(&cache.shallow, c, &d_weighted, gse),
            _ => d_weighted,
        };
        self.shallow
            .backward(&cache.stacked, &d_shallow, &mut grads.shallow, false);
    }
}

impl Parameters for IpNet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a [f64])) {
        self.shallow.visit(&join(prefix, "shallow"), f);
        if let Some(se) = &self.se {
            se.visit(&join(prefix, "se"), f);
        }
        self.reduce.visit(&join(prefix, "reduce"), f);
        for (i, b) in self.deep.iter().enumerate() {
            b.visit(&join(prefix, &format!("deep{i}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.shallow.visit_mut(&join(prefix, "shallow"), f);
        if let Some(se) = &mut self.se {
            se.visit_mut(&join(prefix, "se"), f);
        }
        self.reduce.visit_mut(&join(prefix, "reduce"), f);
        for (i, b) in self.deep.iter_mut().enumerate() {
            b.visit_mut(&join(prefix, &format!("deep{i}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn group_arithmetic_at_defaults() {
        let cfg = ModelConfig::default();
        let net = IpNet::zeros(&cfg).unwrap();
        assert_eq!(net.shallow.in_channels(), 21);
        assert_eq!(net.shallow.out_channels(), 112);
        assert_eq!(net.shallow.groups(), 7);
        assert_eq!(net.shallow.out_channels() / net.shallow.groups(), 16);
    }

    #[test]
    fn zero_frames_zero_hidden() {
        let cfg = ModelConfig::tiny();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut net = IpNet::kaiming(&cfg, &mut rng).unwrap();
        // Biases are zero after init, so the whole map stays at zero.
        let frames = vec![Tensor::zeros(3, 4, 4); cfg.m];
        assert_eq!(net.shallow_extract(&frames).unwrap(), Tensor::zeros(24, 4, 4));
        assert!(net.prebuild_hidden(&frames).unwrap().is_zero());
        net.head.temporal.bias[0] = -1.0;
        assert!(net.prebuild_hidden(&frames).unwrap().is_zero());
    }

    #[test]
    fn hidden_shape_matches_split() {
        let cfg = ModelConfig {
            width: 8,
            n_rdb: 0,
            ipnet_width: 8,
            ipnet_res_blocks: 1,
            ..ModelConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net = IpNet::kaiming(&cfg, &mut rng).unwrap();
        let frames = vec![Tensor::filled(3, 2, 3, 0.5); 7];
        let h = net.prebuild_hidden(&frames).unwrap();
        assert_eq!(h.to_tensor().shape(), (176, 2, 3));
    }

    #[test]
    fn too_few_frames_is_an_input_error() {
        let cfg = ModelConfig::tiny();
        let net = IpNet::zeros(&cfg).unwrap();
        let frames = vec![Tensor::zeros(3, 4, 4); cfg.m - 1];
        assert!(matches!(net.prebuild_hidden(&frames), Err(Error::Input(_))));
        assert!(matches!(net.shallow_extract(&frames), Err(Error::Input(_))));
    }

    #[test]
    fn disabled_config_cannot_build_prebuilder() {
        let cfg = ModelConfig {
            m: 0,
            ..ModelConfig::tiny()
        };
        assert!(IpNet::zeros(&cfg).is_err());
    }

    #[test]
    fn empty_deep_stack_passes_through() {
        let cfg = ModelConfig {
            ipnet_res_blocks: 0,
            ..ModelConfig::tiny()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let net = IpNet::kaiming(&cfg, &mut rng).unwrap();
        let x = Tensor::from_fn(8, 3, 3, |_, _, _| rng.gen_range(-1.0..1.0));
        assert_eq!(net.deep_extract(&x), x);
    }
}
