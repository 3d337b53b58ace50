//! Unidirectional recurrent reconstruction cell.
//!
//! Each step concatenates `[I_t, I_{t-1}, h_{t-1}]`, extracts features with a
//! 3x3 conv + ReLU, refines them with the trunk, and splits the result into a
//! temporal hidden part (conv + ReLU) and a spatial part (plain conv). The
//! spatial part doubles as the pixel-shuffled residual added to the bicubic
//! upscale of `I_t`.

use rand::Rng;

use crate::blocks::{bicubic_resize, pixel_shuffle, pixel_unshuffle, ResidualBlock, ResidualDenseBlock};
use crate::config::{Backbone, ModelConfig};
use crate::error::{Error, Result};
use crate::nn::{join, Conv2d, Parameters};
use crate::tensor::Tensor;

/// Recurrent state at LR resolution. In concatenated form the temporal
/// channels come first.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState {
    pub temporal: Tensor,
    pub spatial: Tensor,
}

impl HiddenState {
    pub fn zeros(temporal: usize, spatial: usize, height: usize, width: usize) -> Self {
        Self {
            temporal: Tensor::zeros(temporal, height, width),
            spatial: Tensor::zeros(spatial, height, width),
        }
    }

    pub fn for_config(cfg: &ModelConfig, height: usize, width: usize) -> Self {
        Self::zeros(cfg.hidden_temporal, cfg.hidden_spatial, height, width)
    }

    pub fn zeros_like(&self) -> Self {
        Self {
            temporal: self.temporal.zeros_like(),
            spatial: self.spatial.zeros_like(),
        }
    }

    pub fn split(&self) -> (usize, usize) {
        (self.temporal.channels(), self.spatial.channels())
    }

    pub fn height(&self) -> usize {
        self.temporal.height()
    }

    pub fn width(&self) -> usize {
        self.temporal.width()
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::concat_channels(&[&self.temporal, &self.spatial]).expect("hidden parts share size")
    }

    pub fn is_zero(&self) -> bool {
        self.temporal.data().iter().chain(self.spatial.data()).all(|&v| v == 0.0)
    }
}

/// Maps features into hidden-state space: ReLU'd temporal channels and
/// linear spatial channels.
#[derive(Clone, Debug, PartialEq)]
pub struct PropagationHead {
    pub temporal: Conv2d,
    pub spatial: Conv2d,
}

impl PropagationHead {
    pub fn zeros(width: usize, temporal: usize, spatial: usize) -> Result<Self> {
        Ok(Self {
            temporal: Conv2d::zeros(width, temporal, 3, 1)?,
            spatial: Conv2d::zeros(width, spatial, 3, 1)?,
        })
    }

    pub fn kaiming<R: Rng + ?Sized>(width: usize, temporal: usize, spatial: usize, rng: &mut R) -> Result<Self> {
        Ok(Self {
            temporal: Conv2d::kaiming(width, temporal, 3, 1, rng)?,
            spatial: Conv2d::kaiming(width, spatial, 3, 1, rng)?,
        })
    }

    pub fn forward(&self, features: &Tensor) -> HiddenState {
        HiddenState {
            temporal: self.temporal.forward(features).relu(),
            spatial: self.spatial.forward(features),
        }
    }

    pub fn backward(
        &self,
        features: &Tensor,
        output: &HiddenState,
        grad: &HiddenState,
        grads: &mut PropagationHead,
    ) -> Tensor {
        let d_t = Tensor::relu_backward(&output.temporal, &grad.temporal);
        let mut d = self
            .temporal
            .backward(features, &d_t, &mut grads.temporal, true)
            .expect("input gradient requested");
        d.add_assign(
            &self
                .spatial
                .backward(features, &grad.spatial, &mut grads.spatial, true)
                .expect("input gradient requested"),
        );
        d
    }
}

impl Parameters for PropagationHead {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a [f64])) {
        self.temporal.visit(&join(prefix, "temporal"), f);
        self.spatial.visit(&join(prefix, "spatial"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.temporal.visit_mut(&join(prefix, "temporal"), f);
        self.spatial.visit_mut(&join(prefix, "spatial"), f);
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Trunk {
    Dense(Vec<ResidualDenseBlock>),
    Residual(Vec<ResidualBlock>),
}

/// Per-block activations saved by [`Trunk::forward_cached`].
#[derive(Clone, Debug)]
pub enum TrunkCache {
    Dense(Vec<(Tensor, Vec<Tensor>)>),
    Residual(Vec<(Tensor, Tensor)>),
}

impl Trunk {
    pub fn len(&self) -> usize {
        match self {
            Trunk::Dense(b) => b.len(),
            Trunk::Residual(b) => b.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn forward(&self, x: &Tensor) -> Tensor {
        match self {
            Trunk::Dense(blocks) => blocks.iter().fold(x.clone(), |h, b| b.forward(&h)),
            Trunk::Residual(blocks) => blocks.iter().fold(x.clone(), |h, b| b.forward(&h)),
        }
    }

    pub fn forward_cached(&self, x: &Tensor) -> (Tensor, TrunkCache) {
        let mut h = x.clone();
        match self {
            Trunk::Dense(blocks) => {
                let mut cache = Vec::with_capacity(blocks.len());
                for b in blocks {
                    let (out, feats) = b.forward_cached(&h);
                    cache.push((std::mem::replace(&mut h, out), feats));
                }
                (h, TrunkCache::Dense(cache))
            }
            Trunk::Residual(blocks) => {
                let mut cache = Vec::with_capacity(blocks.len());
                for b in blocks {
                    let (out, inner) = b.forward_cached(&h);
                    cache.push((std::mem::replace(&mut h, out), inner));
                }
                (h, TrunkCache::Residual(cache))
            }
        }
    }

    pub fn backward(&self, cache: &TrunkCache, grad_out: Tensor, grads: &mut Trunk) -> Tensor {
        let mut g = grad_out;
        match (self, cache, grads) {
            (Trunk::Dense(blocks), TrunkCache::Dense(c), Trunk::Dense(gb)) => {
                for i in (0..blocks.len()).rev() {
                    g = blocks[i].backward(&c[i].0, &c[i].1, &g, &mut gb[i]);
                }
            }
            (Trunk::Residual(blocks), TrunkCache::Residual(c), Trunk::Residual(gb)) => {
                for i in (0..blocks.len()).rev() {
                    g = blocks[i].backward(&c[i].0, &c[i].1, &g, &mut gb[i]);
                }
            }
            _ => panic!("trunk, cache and gradient kinds disagree"),
        }
        g
    }
}

impl Parameters for Trunk {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a [f64])) {
        match self {
            Trunk::Dense(b) => b
                .iter()
                .enumerate()
                .for_each(|(i, b)| b.visit(&join(prefix, &format!("rdb{i}")), f)),
            Trunk::Residual(b) => b
                .iter()
                .enumerate()
                .for_each(|(i, b)| b.visit(&join(prefix, &format!("res{i}")), f)),
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        match self {
            Trunk::Dense(b) => b
                .iter_mut()
                .enumerate()
                .for_each(|(i, b)| b.visit_mut(&join(prefix, &format!("rdb{i}")), f)),
            Trunk::Residual(b) => b
                .iter_mut()
                .enumerate()
                .for_each(|(i, b)| b.visit_mut(&join(prefix, &format!("res{i}")), f)),
        }
    }
}

/// Output of one recurrent step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepOutput {
    pub hidden: HiddenState,
    pub sr_frame: Tensor,
}

/// Activations of one step needed to backpropagate through it.
#[derive(Clone, Debug)]
pub struct StepCache {
    input: Tensor,
    features: Tensor,
    trunk: TrunkCache,
    deep: Tensor,
    hidden: HiddenState,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RrNet {
    scale: usize,
    channels: usize,
    hidden_split: (usize, usize),
    pub entry: Conv2d,
    pub trunk: Trunk,
    pub head: PropagationHead,
}

/// Factor applied to the Kaiming init of the conv producing the SR residual.
pub const RESIDUAL_INIT_SCALE: f64 = 0.1;

impl RrNet {
    fn build<R: Rng + ?Sized>(cfg: &ModelConfig, rng: Option<&mut R>) -> Result<Self> {
        cfg.validate()?;
        let (ht, hs) = (cfg.hidden_temporal, cfg.hidden_spatial);
        match rng {
            Some(rng) => {
                let entry = Conv2d::kaiming(cfg.step_input_channels(), cfg.width, 3, 1, rng)?;
                let trunk = match cfg.backbone {
                    Backbone::Rrnet => Trunk::Dense(
                        (0..cfg.n_rdb)
                            .map(|_| ResidualDenseBlock::kaiming(cfg.width, cfg.rdb_growth, rng))
                            .collect::<Result<_>>()?,
                    ),
                    Backbone::Simple => Trunk::Residual(
                        (0..cfg.simple_blocks)
                            .map(|_| ResidualBlock::kaiming(cfg.width, rng))
                            .collect::<Result<_>>()?,
                    ),
                };
                let mut head = PropagationHead::kaiming(cfg.width, ht, hs, rng)?;
                // A small SR residual at init keeps early outputs close to the
                // bicubic base while leaving every gradient path open.
                head.spatial.weight.iter_mut().for_each(|w| *w *= RESIDUAL_INIT_SCALE);
                Ok(Self::assemble(cfg, entry, trunk, head))
            }
            None => {
                let entry = Conv2d::zeros(cfg.step_input_channels(), cfg.width, 3, 1)?;
                let trunk = match cfg.backbone {
                    Backbone::Rrnet => Trunk::Dense(
                        (0..cfg.n_rdb)
                            .map(|_| ResidualDenseBlock::zeros(cfg.width, cfg.rdb_growth))
                            .collect::<Result<_>>()?,
                    ),
                    Backbone::Simple => Trunk::Residual(
                        (0..cfg.simple_blocks)
                            .map(|_| ResidualBlock::zeros(cfg.width))
                            .collect::<Result<_>>()?,
                    ),
                };
                let head = PropagationHead::zeros(cfg.width, ht, hs)?;
                Ok(Self::assemble(cfg, entry, trunk, head))
            }
        }
    }

    fn assemble(cfg: &ModelConfig, entry: Conv2d, trunk: Trunk, head: PropagationHead) -> Self {
        Self {
            scale: cfg.scale,
            channels: cfg.channels,
            hidden_split: (cfg.hidden_temporal, cfg.hidden_spatial),
            entry,
            trunk,
            head,
        }
    }

    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        Self::build::<rand_chacha::ChaCha8Rng>(cfg, None)
    }

    pub fn kaiming<R: Rng + ?Sized>(cfg: &ModelConfig, rng: &mut R) -> Result<Self> {
        Self::build(cfg, Some(rng))
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn hidden_split(&self) -> (usize, usize) {
        self.hidden_split
    }

    fn check_step(&self, h_prev: &HiddenState, frame_prev: &Tensor, frame_cur: &Tensor) -> Result<()> {
        if frame_cur.channels() != self.channels || !frame_prev.same_shape(frame_cur) {
            return Err(Error::Config(format!(
                "step frames {:?} and {:?} must both have {} channels and equal size",
                frame_prev.shape(),
                frame_cur.shape(),
                self.channels
            )));
        }
        if h_prev.split() != self.hidden_split
            || h_prev.height() != frame_cur.height()
            || h_prev.width() != frame_cur.width()
            || h_prev.spatial.height() != frame_cur.height()
            || h_prev.spatial.width() != frame_cur.width()
        {
            return Err(Error::Config(format!(
                "hidden state {:?}/{:?} does not match split {:?} at {}x{}",
                h_prev.temporal.shape(),
                h_prev.spatial.shape(),
                self.hidden_split,
                frame_cur.height(),
                frame_cur.width()
            )));
        }
        Ok(())
    }

    pub fn step(&self, h_prev: &HiddenState, frame_prev: &Tensor, frame_cur: &Tensor) -> Result<StepOutput> {
        Ok(self.step_cached(h_prev, frame_prev, frame_cur)?.0)
    }

    pub fn step_cached(
        &self,
        h_prev: &HiddenState,
        frame_prev: &Tensor,
        frame_cur: &Tensor,
    ) -> Result<(StepOutput, StepCache)> {
        self.check_step(h_prev, frame_prev, frame_cur)?;
        let input = Tensor::concat_channels(&[frame_cur, frame_prev, &h_prev.temporal, &h_prev.spatial])?;
        let features = self.entry.forward(&input).relu();
        let (deep, trunk) = self.trunk.forward_cached(&features);
        let hidden = self.head.forward(&deep);
        let residual = pixel_shuffle(&hidden.spatial, self.scale)?;
        let sr_frame = bicubic_resize(frame_cur, self.scale as f64)?.add(&residual);
        let cache = StepCache {
            input,
            features,
            trunk,
            deep,
            hidden: hidden.clone(),
        };
        Ok((StepOutput { hidden, sr_frame }, cache))
    }

    /// Backpropagates through one step given the gradients reaching its SR
    /// frame and its output hidden state; returns the gradient for `h_prev`.
    pub fn step_backward(
        &self,
        cache: &StepCache,
        grad_sr: &Tensor,
        grad_hidden: &HiddenState,
        grads: &mut RrNet,
    ) -> Result<HiddenState> {
        let mut grad_head = grad_hidden.clone();
        grad_head.spatial.add_assign(&pixel_unshuffle(grad_sr, self.scale)?);
        let d_deep = self
            .head
            .backward(&cache.deep, &cache.hidden, &grad_head, &mut grads.head);
        let d_features = self.trunk.backward(&cache.trunk, d_deep, &mut grads.trunk);
        let d_entry = Tensor::relu_backward(&cache.features, &d_features);
        let d_input = self
            .entry
            .backward(&cache.input, &d_entry, &mut grads.entry, true)
            .expect("input gradient requested");
        let (ht, hs) = self.hidden_split;
        let mut parts = d_input.split_channels(&[2 * self.channels, ht, hs]);
        let spatial = parts.pop().expect("three parts");
        let temporal = parts.pop().expect("three parts");
        Ok(HiddenState { temporal, spatial })
    }

    /// Reconstructs a whole sequence starting from `h0`. The first step uses
    /// frame 1 as its own predecessor. Only the latest hidden state is kept.
    pub fn run_sequence(&self, frames: &[Tensor], h0: &HiddenState) -> Result<Vec<Tensor>> {
        if frames.is_empty() {
            return Err(Error::Input("cannot reconstruct an empty sequence".into()));
        }
        let mut out = Vec::with_capacity(frames.len());
        let mut h = h0.clone();
        for t in 0..frames.len() {
            let prev = &frames[t.saturating_sub(1)];
            let step = self.step(&h, prev, &frames[t])?;
            h = step.hidden;
            out.push(step.sr_frame);
        }
        Ok(out)
    }
}

impl Parameters for RrNet {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a [f64])) {
        self.entry.visit(&join(prefix, "entry"), f);
        self.trunk.visit(&join(prefix, "trunk"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        self.entry.visit_mut(&join(prefix, "entry"), f);
        self.trunk.visit_mut(&join(prefix, "trunk"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}
