//! Frame ingestion, HR to LR degradation, synthetic clips and patch sampling.
//!
//! On disk a dataset root holds `hr/<clip_id>/00000001.png, ...`, an optional
//! `lr/` tree with the same layout, and an optional `manifest.txt` listing
//! `clip_id split` per line. Missing LR frames are synthesised with the
//! configured [`DegradationSpec`] and, when `IPRRN_CACHE` is set, cached there.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::blocks::resize_bicubic;
use crate::error::{Error, Result};
use crate::metrics::gaussian_taps;
use crate::tensor::Tensor;

/// Environment variable naming the directory for cached LR frames.
pub const CACHE_ENV: &str = "IPRRN_CACHE";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DegradeMode {
    /// Normalised Gaussian blur then stride-`scale` subsampling.
    GaussianDownsample,
    /// Antialiased bicubic downscale.
    Bicubic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DegradationSpec {
    /// Gaussian standard deviation in HR pixels.
    pub blur_sigma: f64,
    pub kernel_size: usize,
    pub scale: usize,
    pub mode: DegradeMode,
}

impl Default for DegradationSpec {
    fn default() -> Self {
        Self {
            blur_sigma: 1.6,
            kernel_size: 13,
            scale: 4,
            mode: DegradeMode::GaussianDownsample,
        }
    }
}

impl DegradationSpec {
    pub fn validate(&self) -> Result<()> {
        if self.scale == 0 {
            return Err(Error::Config("degradation scale must be at least 1".into()));
        }
        if self.mode == DegradeMode::GaussianDownsample {
            if !(self.blur_sigma > 0.0) || !self.blur_sigma.is_finite() {
                return Err(Error::Config(format!(
                    "blur_sigma must be positive, got {}",
                    self.blur_sigma
                )));
            }
            let min = 2 * (3.0 * self.blur_sigma).ceil() as usize + 1;
            if self.kernel_size % 2 == 0 || self.kernel_size < min {
                return Err(Error::Config(format!(
                    "kernel_size must be odd and at least {min} for sigma {}, got {}",
                    self.blur_sigma, self.kernel_size
                )));
            }
        }
        Ok(())
    }

    /// Normalised 1-D taps; the 2-D kernel is their outer product.
    pub fn taps(&self) -> Vec<f64> {
        gaussian_taps(self.kernel_size, self.blur_sigma)
    }
}

/// Mirror index without repeating the edge sample (`dcb|abcd|cba`).
fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    if n == 1 {
        return 0;
    }
    let period = 2 * (n - 1);
    let m = i.rem_euclid(period);
    (if m < n { m } else { period - m }) as usize
}

/// Degrades one HR frame; output values are clamped to `[0, 1]`.
pub fn degrade_frame(hr: &Tensor, spec: &DegradationSpec) -> Result<Tensor> {
    spec.validate()?;
    let (c, h, w) = hr.shape();
    let s = spec.scale;
    if h % s != 0 || w % s != 0 {
        return Err(Error::Input(format!(
            "{h}x{w} frame is not divisible by scale {s}"
        )));
    }
    let (lh, lw) = (h / s, w / s);
    let out = match spec.mode {
        DegradeMode::Bicubic => resize_bicubic(hr, lh, lw)?,
        DegradeMode::GaussianDownsample => {
            let taps = spec.taps();
            let half = (taps.len() / 2) as isize;
            let mut out = Tensor::zeros(c, lh, lw);
            for ch in 0..c {
                let src = hr.plane(ch);
                // Horizontal pass at the sampled columns, then vertical pass
                // at the sampled rows.
                let mut rows = vec![0.0; h * lw];
                for y in 0..h {
                    for j in 0..lw {
                        let cx = (j * s) as isize;
                        rows[y * lw + j] = taps
                            .iter()
                            .enumerate()
                            .map(|(k, t)| t * src[y * w + reflect(cx + k as isize - half, w)])
                            .sum();
                    }
                }
                let dst = out.plane_mut(ch);
                for i in 0..lh {
                    let cy = (i * s) as isize;
                    for j in 0..lw {
                        dst[i * lw + j] = taps
                            .iter()
                            .enumerate()
                            .map(|(k, t)| t * rows[reflect(cy + k as isize - half, h) * lw + j])
                            .sum();
                    }
                }
            }
            out
        }
    };
    Ok(out.clamp01())
}

pub fn degrade(hr: &[Tensor], spec: &DegradationSpec) -> Result<Vec<Tensor>> {
    hr.iter().map(|f| degrade_frame(f, spec)).collect()
}

/// Rounds to the nearest 8-bit level, as a PNG round trip would.
pub fn quantize8(frame: &Tensor) -> Tensor {
    frame.map(|v| (v.clamp(0.0, 1.0) * 255.0).round() / 255.0)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SynthKind {
    /// A periodic band-limited texture translating at a constant velocity.
    TranslatingTexture,
    /// An angular pattern rotating about the frame centre.
    RotatingPattern,
    /// Smooth Gaussian blobs drifting along straight lines.
    RandomSmooth,
}

impl FromStr for SynthKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "translating_texture" => Ok(Self::TranslatingTexture),
            "rotating_pattern" => Ok(Self::RotatingPattern),
            "random_smooth" => Ok(Self::RandomSmooth),
            other => Err(Error::Config(format!(
                "unknown sequence kind `{other}` (expected translating_texture, rotating_pattern or random_smooth)"
            ))),
        }
    }
}

impl fmt::Display for SynthKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::TranslatingTexture => "translating_texture",
            Self::RotatingPattern => "rotating_pattern",
            Self::RandomSmooth => "random_smooth",
        })
    }
}

/// One sinusoid of a periodic texture: whole cycles per frame along each axis.
#[derive(Clone, Debug)]
struct Wave {
    cycles_y: i32,
    cycles_x: i32,
    phase: f64,
    amplitude: [f64; 3],
}

/// Periodic colour texture, band-limited to `max_cycles` per frame side.
#[derive(Clone, Debug)]
pub struct Texture {
    height: usize,
    width: usize,
    waves: Vec<Wave>,
}

impl Texture {
    pub fn random<R: Rng + ?Sized>(height: usize, width: usize, max_cycles: i32, rng: &mut R) -> Self {
        let n = 6;
        let waves = (0..n)
            .map(|_| {
                let (cycles_y, cycles_x) = loop {
                    let fy = rng.gen_range(-max_cycles..=max_cycles);
                    let fx = rng.gen_range(-max_cycles..=max_cycles);
                    if fy != 0 || fx != 0 {
                        break (fy, fx);
                    }
                };
                // Amplitudes sum to at most 0.4 per channel, so values stay in [0.1, 0.9].
                let a = rng.gen_range(0.3..1.0) * 0.4 / n as f64;
                Wave {
                    cycles_y,
                    cycles_x,
                    phase: rng.gen_range(0.0..2.0 * PI),
                    amplitude: [a * rng.gen_range(0.5..1.0), a * rng.gen_range(0.5..1.0), a * rng.gen_range(0.5..1.0)],
                }
            })
            .collect();
        Self { height, width, waves }
    }

    /// Value at continuous coordinates, which are wrapped onto the period.
    pub fn sample(&self, channel: usize, y: f64, x: f64) -> f64 {
        let u = y.rem_euclid(self.height as f64) / self.height as f64;
        let v = x.rem_euclid(self.width as f64) / self.width as f64;
        0.5 + self
            .waves
            .iter()
            .map(|w| w.amplitude[channel] * (2.0 * PI * (w.cycles_y as f64 * u + w.cycles_x as f64 * v) + w.phase).sin())
            .sum::<f64>()
    }

    /// Frame `t` of the texture moving by `velocity = (dy, dx)` pixels per frame.
    pub fn frame(&self, t: usize, velocity: (f64, f64)) -> Tensor {
        let (dy, dx) = (velocity.0 * t as f64, velocity.1 * t as f64);
        Tensor::from_fn(3, self.height, self.width, |c, y, x| {
            self.sample(c, y as f64 - dy, x as f64 - dx)
        })
    }
}

/// `n` frames of a periodic texture translating with `velocity` (pixels per
/// frame, `(dy, dx)`); integer velocities give exact wrap-around shifts.
pub fn translating_texture(n: usize, height: usize, width: usize, velocity: (f64, f64), seed: u64) -> Result<Vec<Tensor>> {
    check_synth(n, height, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // At most one cycle per 8 pixels keeps the texture resolvable after 4x downscaling.
    let max_cycles = (height.min(width) / 8).max(1) as i32;
    let tex = Texture::random(height, width, max_cycles, &mut rng);
    Ok((0..n).map(|t| tex.frame(t, velocity)).collect())
}

fn check_synth(n: usize, height: usize, width: usize) -> Result<()> {
    if n == 0 || height == 0 || width == 0 {
        return Err(Error::Input(format!(
            "synthetic sequence needs positive sizes, got {n} frames of {height}x{width}"
        )));
    }
    Ok(())
}

/// Deterministic synthetic HR sequence; motion parameters are drawn from `seed`.
pub fn synth_sequence(kind: SynthKind, n: usize, height: usize, width: usize, seed: u64) -> Result<Vec<Tensor>> {
    check_synth(n, height, width)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_0f_5e0);
    match kind {
        SynthKind::TranslatingTexture => {
            let speed = rng.gen_range(0.5..2.5);
            let angle = rng.gen_range(0.0..2.0 * PI);
            translating_texture(n, height, width, (speed * angle.sin(), speed * angle.cos()), seed)
        }
        SynthKind::RotatingPattern => {
            let omega = rng.gen_range(0.02..0.08) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            let spokes = rng.gen_range(3..8) as f64;
            let rings = rng.gen_range(0.15..0.4);
            let phases: Vec<f64> = (0..3).map(|_| rng.gen_range(0.0..2.0 * PI)).collect();
            let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
            Ok((0..n)
                .map(|t| {
                    Tensor::from_fn(3, height, width, |c, y, x| {
                        let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                        let r = dy.hypot(dx);
                        let theta = dy.atan2(dx) - omega * t as f64;
                        0.5 + 0.2 * (spokes * theta + phases[c]).sin() + 0.2 * (rings * r + phases[c]).cos()
                    })
                })
                .collect())
        }
        SynthKind::RandomSmooth => {
            let blobs: Vec<([f64; 2], [f64; 2], f64, [f64; 3])> = (0..8)
                .map(|_| {
                    let pos = [rng.gen_range(0.0..height as f64), rng.gen_range(0.0..width as f64)];
                    let vel = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
                    let radius = rng.gen_range(0.1..0.3) * height.min(width) as f64;
                    let colour = [rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2), rng.gen_range(-0.2..0.2)];
                    (pos, vel, radius, colour)
                })
                .collect();
            Ok((0..n)
                .map(|t| {
                    Tensor::from_fn(3, height, width, |c, y, x| {
                        let v = 0.5
                            + blobs
                                .iter()
                                .map(|(p, v, r, col)| {
                                    let dy = y as f64 - (p[0] + v[0] * t as f64);
                                    let dx = x as f64 - (p[1] + v[1] * t as f64);
                                    col[c] * (-(dy * dy + dx * dx) / (2.0 * r * r)).exp()
                                })
                                .sum::<f64>();
                        v.clamp(0.0, 1.0)
                    })
                })
                .collect())
        }
    }
}

/// Where a clip came from and which crop of the source it holds.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClipMeta {
    pub source: Option<PathBuf>,
    /// Top-left corner of the HR crop in source pixels, `(y, x)`.
    pub hr_offset: (usize, usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ClipRecord {
    pub id: String,
    pub hr: Vec<Tensor>,
    pub lr: Vec<Tensor>,
    pub meta: ClipMeta,
}

impl ClipRecord {
    /// Pairs HR and LR frames, checking `lr dims * scale == hr dims` exactly.
    pub fn new(id: impl Into<String>, hr: Vec<Tensor>, lr: Vec<Tensor>, scale: usize) -> Result<Self> {
        let id = id.into();
        if hr.is_empty() || hr.len() != lr.len() {
            return Err(Error::Input(format!(
                "clip {id}: {} HR frames against {} LR frames",
                hr.len(),
                lr.len()
            )));
        }
        for (t, (h, l)) in hr.iter().zip(&lr).enumerate() {
            let (hc, hh, hw) = h.shape();
            if l.shape() != (hc, hh / scale, hw / scale) || hh % scale != 0 || hw % scale != 0 || !h.same_shape(&hr[0]) {
                return Err(Error::Input(format!(
                    "clip {id}, frame {}: LR {:?} does not match HR {:?} at scale {scale}",
                    t + 1,
                    l.shape(),
                    h.shape()
                )));
            }
        }
        Ok(Self {
            id,
            hr,
            lr,
            meta: ClipMeta::default(),
        })
    }

    /// Builds the LR side by degrading `hr` and quantising it to 8 bits.
    pub fn from_hr(id: impl Into<String>, hr: Vec<Tensor>, spec: &DegradationSpec) -> Result<Self> {
        let lr = degrade(&hr, spec)?.iter().map(quantize8).collect();
        Self::new(id, hr, lr, spec.scale)
    }

    pub fn len(&self) -> usize {
        self.hr.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hr.is_empty()
    }

    pub fn scale(&self) -> usize {
        self.hr[0].height() / self.lr[0].height()
    }

    /// HR frame size `(height, width)`.
    pub fn hr_size(&self) -> (usize, usize) {
        (self.hr[0].height(), self.hr[0].width())
    }

    /// Aligned crop with HR top-left `(y, x)`, which must be multiples of the scale.
    pub fn crop(&self, y: usize, x: usize, hr_patch: usize) -> Result<Self> {
        let s = self.scale();
        let (h, w) = self.hr_size();
        if hr_patch == 0 || hr_patch % s != 0 {
            return Err(Error::Input(format!("patch size {hr_patch} is not a positive multiple of {s}")));
        }
        if y % s != 0 || x % s != 0 || y + hr_patch > h || x + hr_patch > w {
            return Err(Error::Input(format!(
                "crop at ({y}, {x}) of size {hr_patch} does not fit a {h}x{w} clip at scale {s}"
            )));
        }
        let cut = |f: &Tensor, oy: usize, ox: usize, n: usize| {
            Tensor::from_fn(f.channels(), n, n, |c, i, j| f.get(c, oy + i, ox + j))
        };
        let lp = hr_patch / s;
        Ok(Self {
            id: self.id.clone(),
            hr: self.hr.iter().map(|f| cut(f, y, x, hr_patch)).collect(),
            lr: self.lr.iter().map(|f| cut(f, y / s, x / s, lp)).collect(),
            meta: ClipMeta {
                source: self.meta.source.clone(),
                hr_offset: (self.meta.hr_offset.0 + y, self.meta.hr_offset.1 + x),
            },
        })
    }

    /// Consecutive window of `len` frames starting at `start`.
    pub fn window(&self, start: usize, len: usize) -> Result<Self> {
        if len == 0 || start + len > self.len() {
            return Err(Error::Input(format!(
                "frames {}..{} are outside clip {} of {} frames",
                start + 1,
                start + len,
                self.id,
                self.len()
            )));
        }
        Ok(Self {
            id: self.id.clone(),
            hr: self.hr[start..start + len].to_vec(),
            lr: self.lr[start..start + len].to_vec(),
            meta: self.meta.clone(),
        })
    }
}

/// Random aligned crop of `hr_patch` HR pixels; offsets are multiples of the scale.
pub fn sample_patch<R: Rng + ?Sized>(clip: &ClipRecord, hr_patch: usize, rng: &mut R) -> Result<ClipRecord> {
    let s = clip.scale();
    let (h, w) = clip.hr_size();
    if hr_patch > h || hr_patch > w {
        return Err(Error::Input(format!(
            "clip {} is {h}x{w}, smaller than the {hr_patch} patch",
            clip.id
        )));
    }
    let y = s * rng.gen_range(0..=(h - hr_patch) / s);
    let x = s * rng.gen_range(0..=(w - hr_patch) / s);
    clip.crop(y, x, hr_patch)
}

/// File name of frame `index` (0-based) in a clip directory.
pub fn frame_name(index: usize) -> String {
    format!("{:08}.png", index + 1)
}

pub fn read_frame(path: &Path) -> Result<Tensor> {
    let img = image::open(path)
        .map_err(|source| Error::Image {
            path: path.to_path_buf(),
            source,
        })?
        .into_rgb8();
    let (w, h) = img.dimensions();
    let (w, h) = (w as usize, h as usize);
    let raw = img.as_raw();
    Ok(Tensor::from_fn(3, h, w, |c, y, x| raw[(y * w + x) * 3 + c] as f64 / 255.0))
}

/// Writes a 3-channel frame as 8-bit RGB PNG, clamping to `[0, 1]`.
pub fn write_frame(path: &Path, frame: &Tensor) -> Result<()> {
    if frame.channels() != 3 {
        return Err(Error::Input(format!(
            "only 3-channel frames can be saved, got {}",
            frame.channels()
        )));
    }
    let (_, h, w) = frame.shape();
    let mut raw = vec![0u8; h * w * 3];
    for y in 0..h {
        for x in 0..w {
            for c in 0..3 {
                raw[(y * w + x) * 3 + c] = (frame.get(c, y, x).clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    image::save_buffer(path, &raw, w as u32, h as u32, image::ExtendedColorType::Rgb8).map_err(|source| Error::Image {
        path: path.to_path_buf(),
        source,
    })
}

/// Frame files of a clip directory in name order.
pub fn list_frames(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::Input(format!("{} contains no PNG frames", dir.display())));
    }
    Ok(paths)
}

pub fn read_clip_dir(dir: &Path) -> Result<Vec<Tensor>> {
    list_frames(dir)?.iter().map(|p| read_frame(p)).collect()
}

pub fn write_clip_dir(dir: &Path, frames: &[Tensor]) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for (i, f) in frames.iter().enumerate() {
        write_frame(&dir.join(frame_name(i)), f)?;
    }
    Ok(())
}

/// Clip sub-directories of `root`, sorted by name.
pub fn list_clips(root: &Path) -> Result<Vec<String>> {
    let mut ids: Vec<String> = fs::read_dir(root)
        .map_err(|e| Error::io(root, e))?
        .filter_map(|e| e.ok())
        .filter(|e| e.path().is_dir())
        .filter_map(|e| e.file_name().into_string().ok())
        .collect();
    ids.sort();
    Ok(ids)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Self::Train),
            "val" => Ok(Self::Val),
            "test" => Ok(Self::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Train => "train",
            Self::Val => "val",
            Self::Test => "test",
        })
    }
}

/// Parses `clip_id split` lines; blank lines and `#` comments are skipped.
pub fn parse_manifest(text: &str) -> Result<BTreeMap<String, Split>> {
    let mut out = BTreeMap::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        let [id, split] = fields[..] else {
            return Err(Error::Config(format!(
                "manifest line {}: expected `clip_id split`, got `{line}`",
                n + 1
            )));
        };
        let split = split
            .parse()
            .map_err(|e| Error::Config(format!("manifest line {}: {e}", n + 1)))?;
        if out.insert(id.to_string(), split).is_some() {
            return Err(Error::Config(format!("manifest line {}: clip `{id}` listed twice", n + 1)));
        }
    }
    Ok(out)
}

pub fn render_manifest(entries: &BTreeMap<String, Split>) -> String {
    entries.iter().map(|(id, s)| format!("{id} {s}\n")).collect()
}

/// Directory for cached LR frames of `spec`, if `IPRRN_CACHE` is set.
pub fn cache_dir(spec: &DegradationSpec) -> Option<PathBuf> {
    let root = std::env::var_os(CACHE_ENV)?;
    let key = serde_json::to_string(spec).expect("spec serialises");
    let digest = hex::encode(Sha256::digest(key.as_bytes()));
    Some(PathBuf::from(root).join(format!("lr-{}", &digest[..16])))
}

/// A dataset root on disk.
#[derive(Clone, Debug)]
pub struct DatasetRoot {
    pub root: PathBuf,
    pub manifest: Option<BTreeMap<String, Split>>,
}

impl DatasetRoot {
    pub fn open(root: &Path) -> Result<Self> {
        if !root.is_dir() {
            return Err(Error::Input(format!("data root {} does not exist", root.display())));
        }
        if !root.join("hr").is_dir() {
            return Err(Error::Input(format!("data root {} has no hr/ directory", root.display())));
        }
        let manifest_path = root.join("manifest.txt");
        let manifest = if manifest_path.is_file() {
            let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
            Some(parse_manifest(&text)?)
        } else {
            None
        };
        Ok(Self {
            root: root.to_path_buf(),
            manifest,
        })
    }

    /// Clip ids in the given splits; without a manifest every clip qualifies.
    pub fn clip_ids(&self, splits: &[Split]) -> Result<Vec<String>> {
        let on_disk = list_clips(&self.root.join("hr"))?;
        Ok(match &self.manifest {
            None => on_disk,
            Some(m) => {
                for id in m.keys() {
                    if !on_disk.contains(id) {
                        return Err(Error::Input(format!("manifest lists missing clip `{id}`")));
                    }
                }
                on_disk
                    .into_iter()
                    .filter(|id| m.get(id).is_some_and(|s| splits.contains(s)))
                    .collect()
            }
        })
    }

    /// Loads HR frames and the matching LR frames: from `lr/` when present,
    /// else from the cache, else by degrading (and filling the cache).
    pub fn load_clip(&self, id: &str, spec: &DegradationSpec) -> Result<ClipRecord> {
        let hr_dir = self.root.join("hr").join(id);
        let hr = read_clip_dir(&hr_dir)?;
        let lr_dir = self.root.join("lr").join(id);
        let lr = if lr_dir.is_dir() {
            read_clip_dir(&lr_dir)?
        } else if let Some(cache) = cache_dir(spec).map(|d| d.join(id)) {
            if cache.is_dir() && list_frames(&cache).map(|f| f.len()).unwrap_or(0) == hr.len() {
                read_clip_dir(&cache)?
            } else {
                let lr: Vec<Tensor> = degrade(&hr, spec)?.iter().map(quantize8).collect();
                write_clip_dir(&cache, &lr)?;
                lr
            }
        } else {
            degrade(&hr, spec)?.iter().map(quantize8).collect()
        };
        let mut clip = ClipRecord::new(id, hr, lr, spec.scale)?;
        clip.meta.source = Some(hr_dir);
        Ok(clip)
    }

    pub fn load(&self, splits: &[Split], spec: &DegradationSpec) -> Result<Vec<ClipRecord>> {
        self.clip_ids(splits)?.iter().map(|id| self.load_clip(id, spec)).collect()
    }
}
