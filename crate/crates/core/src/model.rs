//! The full reconstructor: optional hidden-state prebuilder plus the
//! recurrent cell, with sequence-level loss and backpropagation through the
//! whole unroll.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::error::{Error, Result};
use crate::ipnet::{IpNet, IpNetCache};
use crate::nn::Parameters;
use crate::rrnet::{HiddenState, RrNet, StepCache};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct Iprrn {
    config: ModelConfig,
    pub ipnet: Option<IpNet>,
    pub rrnet: RrNet,
}

/// Repeats the first frame in front of `frames` until there are at least `m`.
pub fn pad_front(frames: &[Tensor], m: usize) -> Vec<Tensor> {
    let missing = m.saturating_sub(frames.len());
    let mut out = Vec::with_capacity(frames.len() + missing);
    if let Some(first) = frames.first() {
        out.extend(std::iter::repeat(first.clone()).take(missing));
    }
    out.extend_from_slice(frames);
    out
}

/// Mean absolute error over every frame, pixel and channel.
pub fn l1_loss(sr: &[Tensor], hr: &[Tensor]) -> Result<f64> {
    check_pairs(sr, hr)?;
    let count: usize = hr.iter().map(|t| t.data().len()).sum();
    let total: f64 = sr
        .iter()
        .zip(hr)
        .map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).sum::<f64>())
        .sum();
    Ok(total / count as f64)
}

fn check_pairs(sr: &[Tensor], hr: &[Tensor]) -> Result<()> {
    if sr.len() != hr.len() {
        return Err(Error::Input(format!(
            "{} reconstructed frames against {} targets",
            sr.len(),
            hr.len()
        )));
    }
    if sr.is_empty() {
        return Err(Error::Input("loss over an empty sequence".into()));
    }
    for (i, (a, b)) in sr.iter().zip(hr).enumerate() {
        if !a.same_shape(b) {
            return Err(Error::Input(format!(
                "frame {i}: output {:?} vs target {:?}",
                a.shape(),
                b.shape()
            )));
        }
    }
    Ok(())
}

impl Iprrn {
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.init_seed);
        let rrnet = RrNet::kaiming(config, &mut rng)?;
        let ipnet = if config.ipnet_active() {
            Some(IpNet::kaiming(config, &mut rng)?)
        } else {
            None
        };
        Ok(Self {
            config: config.clone(),
            ipnet,
            rrnet,
        })
    }

    pub fn zeros(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config: config.clone(),
            ipnet: if config.ipnet_active() {
                Some(IpNet::zeros(config)?)
            } else {
                None
            },
            rrnet: RrNet::zeros(config)?,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    /// Replaces the prebuilder, e.g. to graft a fresh one onto a trained
    /// recurrent cell. `config.m`/`config.ipnet` are updated accordingly.
    pub fn attach_ipnet(&mut self, config: &ModelConfig) -> Result<()> {
        let mut merged = self.config.clone();
        merged.ipnet = true;
        merged.m = config.m;
        merged.ipnet_group_width = config.ipnet_group_width;
        merged.ipnet_width = config.ipnet_width;
        merged.ipnet_res_blocks = config.ipnet_res_blocks;
        merged.se = config.se;
        merged.se_reduction = config.se_reduction;
        merged.init_seed = config.init_seed;
        merged.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(merged.init_seed ^ 0x1b_0e7);
        self.ipnet = Some(IpNet::kaiming(&merged, &mut rng)?);
        self.config = merged;
        Ok(())
    }

    fn check_frames(&self, frames: &[Tensor]) -> Result<()> {
        let first = frames
            .first()
            .ok_or_else(|| Error::Input("cannot reconstruct an empty sequence".into()))?;
        if first.channels() != self.config.channels || frames.iter().any(|f| !f.same_shape(first)) {
            return Err(Error::Input(format!(
                "frames must all be {}-channel and equally sized",
                self.config.channels
            )));
        }
        Ok(())
    }

    /// `h_0`: prebuilt from the leading frames (left-padded by repetition when
    /// the sequence is shorter than `m`), or all zeros without a prebuilder.
    pub fn initial_hidden(&self, frames: &[Tensor]) -> Result<HiddenState> {
        self.check_frames(frames)?;
        match &self.ipnet {
            Some(ip) => ip.prebuild_hidden(&pad_front(frames, ip.m())),
            None => Ok(HiddenState::for_config(
                &self.config,
                frames[0].height(),
                frames[0].width(),
            )),
        }
    }

    pub fn forward(&self, frames: &[Tensor]) -> Result<Vec<Tensor>> {
        let h0 = self.initial_hidden(frames)?;
        self.rrnet.run_sequence(frames, &h0)
    }

    /// Sequence L1 loss and its gradient with respect to every parameter,
    /// backpropagated through the full unroll and into the prebuilder.
    pub fn loss_and_grad(&self, lr: &[Tensor], hr: &[Tensor]) -> Result<(f64, Iprrn)> {
        self.check_frames(lr)?;
        let (h0, ip_cache): (HiddenState, Option<IpNetCache>) = match &self.ipnet {
            Some(ip) => {
                let (h, c) = ip.prebuild_cached(&pad_front(lr, ip.m()))?;
                (h, Some(c))
            }
            None => (
                HiddenState::for_config(&self.config, lr[0].height(), lr[0].width()),
                None,
            ),
        };
        let mut caches: Vec<StepCache> = Vec::with_capacity(lr.len());
        let mut sr = Vec::with_capacity(lr.len());
        let mut h = h0;
        for t in 0..lr.len() {
            let (out, cache) = self.rrnet.step_cached(&h, &lr[t.saturating_sub(1)], &lr[t])?;
            h = out.hidden;
            sr.push(out.sr_frame);
            caches.push(cache);
        }
        let loss = l1_loss(&sr, hr)?;
        let count: usize = hr.iter().map(|t| t.data().len()).sum();
        let inv = 1.0 / count as f64;

        let mut grads = self.zeros_like();
        let mut grad_h = h.zeros_like();
        for t in (0..lr.len()).rev() {
            let grad_sr = Tensor::from_fn(
                hr[t].channels(),
                hr[t].height(),
                hr[t].width(),
                |c, y, x| {
                    let d = sr[t].get(c, y, x) - hr[t].get(c, y, x);
                    if d > 0.0 {
                        inv
                    } else if d < 0.0 {
                        -inv
                    } else {
                        0.0
                    }
                },
            );
            grad_h = self
                .rrnet
                .step_backward(&caches[t], &grad_sr, &grad_h, &mut grads.rrnet)?;
        }
        if let (Some(ip), Some(cache), Some(gip)) = (&self.ipnet, &ip_cache, grads.ipnet.as_mut()) {
            ip.backward(cache, &grad_h, gip);
        }
        Ok((loss, grads))
    }

    pub fn streamer(&self) -> Streamer<'_> {
        Streamer {
            model: self,
            pending: Vec::new(),
            hidden: None,
            prev: None,
        }
    }
}

impl Parameters for Iprrn {
    fn visit<'a>(&'a self, prefix: &str, f: &mut dyn FnMut(&str, &'a [f64])) {
        if let Some(ip) = &self.ipnet {
            ip.visit(&crate::nn::join(prefix, "ipnet"), f);
        }
        self.rrnet.visit(&crate::nn::join(prefix, "rrnet"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut [f64])) {
        if let Some(ip) = &mut self.ipnet {
            ip.visit_mut(&crate::nn::join(prefix, "ipnet"), f);
        }
        self.rrnet.visit_mut(&crate::nn::join(prefix, "rrnet"), f);
    }
}

/// Frame-at-a-time reconstruction. Holds one hidden state and one previous
/// frame; with a prebuilder it additionally buffers the first `m` inputs
/// before the first output can be produced.
pub struct Streamer<'a> {
    model: &'a Iprrn,
    pending: Vec<Tensor>,
    hidden: Option<HiddenState>,
    prev: Option<Tensor>,
}

impl Streamer<'_> {
    /// Feeds the next LR frame; returns the SR frames that became available.
    pub fn push(&mut self, frame: Tensor) -> Result<Vec<Tensor>> {
        self.pending.push(frame);
        if self.hidden.is_none() {
            let need = self.model.ipnet.as_ref().map_or(1, |ip| ip.m());
            if self.pending.len() < need {
                return Ok(Vec::new());
            }
            self.hidden = Some(self.model.initial_hidden(&self.pending)?);
        }
        self.drain()
    }

    /// Ends the stream, flushing frames still waiting for the prebuilder.
    pub fn finish(mut self) -> Result<Vec<Tensor>> {
        if self.hidden.is_none() && !self.pending.is_empty() {
            self.hidden = Some(self.model.initial_hidden(&self.pending)?);
        }
        self.drain()
    }

    fn drain(&mut self) -> Result<Vec<Tensor>> {
        let mut out = Vec::with_capacity(self.pending.len());
        for frame in std::mem::take(&mut self.pending) {
            let hidden = self.hidden.take().expect("initialised before draining");
            let prev = self.prev.take().unwrap_or_else(|| frame.clone());
            let step = self.model.rrnet.step(&hidden, &prev, &frame)?;
            self.hidden = Some(step.hidden);
            self.prev = Some(frame);
            out.push(step.sr_frame);
        }
        Ok(out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn clip(n: usize, seed: u64) -> Vec<Tensor> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Tensor::from_fn(3, 4, 4, |_, _, _| rng.gen_range(0.0..1.0)))
            .collect()
    }

    #[test]
    fn loss_examples() {
        let hr = clip(2, 1);
        assert_eq!(l1_loss(&hr, &hr).unwrap(), 0.0);
        let shifted: Vec<Tensor> = hr.iter().map(|t| t.map(|v| v + 0.1)).collect();
        assert!((l1_loss(&shifted, &hr).unwrap() - 0.1).abs() < 1e-12);
        assert!(matches!(l1_loss(&hr[..1], &hr), Err(Error::Input(_))));
    }

    #[test]
    fn pad_front_repeats_first_frame() {
        let f = clip(2, 2);
        let p = pad_front(&f, 5);
        assert_eq!(p.len(), 5);
        assert!(p[..4].iter().all(|t| *t == f[0]));
        assert_eq!(p[4], f[1]);
        assert_eq!(pad_front(&f, 1).len(), 2);
    }

    #[test]
    fn short_sequences_are_padded_for_the_prebuilder() {
        let cfg = ModelConfig::tiny();
        let model = Iprrn::new(&cfg).unwrap();
        let f = clip(1, 3);
        let direct = model.initial_hidden(&f).unwrap();
        let padded = model
            .ipnet
            .as_ref()
            .unwrap()
            .prebuild_hidden(&vec![f[0].clone(); cfg.m])
            .unwrap();
        assert_eq!(direct, padded);
    }

    #[test]
    fn streaming_matches_batch_reconstruction() {
        let cfg = ModelConfig::tiny();
        let model = Iprrn::new(&cfg).unwrap();
        let frames = clip(5, 4);
        let batch = model.forward(&frames).unwrap();
        let mut s = model.streamer();
        let mut streamed = Vec::new();
        for (t, f) in frames.iter().enumerate() {
            let out = s.push(f.clone()).unwrap();
            // Nothing is emitted before m inputs have been read.
            if t + 1 < cfg.m {
                assert!(out.is_empty());
            }
            streamed.extend(out);
            assert_eq!(streamed.len(), if t + 1 < cfg.m { 0 } else { t + 1 });
        }
        streamed.extend(s.finish().unwrap());
        assert_eq!(streamed, batch);
    }

    #[test]
    fn streaming_without_prebuilder_has_no_delay() {
        let cfg = ModelConfig {
            ipnet: false,
            ..ModelConfig::tiny()
        };
        let model = Iprrn::new(&cfg).unwrap();
        let frames = clip(3, 5);
        let mut s = model.streamer();
        for f in &frames {
            assert_eq!(s.push(f.clone()).unwrap().len(), 1);
        }
    }

    #[test]
    fn gradients_reach_every_group() {
        let cfg = ModelConfig::tiny();
        let model = Iprrn::new(&cfg).unwrap();
        let lr = clip(3, 6);
        let hr: Vec<Tensor> = clip(3, 7)
            .iter()
            .map(|t| crate::blocks::bicubic_resize(t, 4.0).unwrap())
            .collect();
        let (_, grads) = model.loss_and_grad(&lr, &hr).unwrap();
        let mut norms = std::collections::BTreeMap::<String, f64>::new();
        grads.visit("", &mut |name, g| {
            let group = name.split('.').take(2).collect::<Vec<_>>().join(".");
            *norms.entry(group).or_default() += g.iter().map(|v| v * v).sum::<f64>();
        });
        assert!(norms.len() >= 7, "{norms:?}");
        for (group, n) in &norms {
            assert!(*n > 0.0, "no gradient reached {group}");
        }
    }
}
