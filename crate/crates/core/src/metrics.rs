//! PSNR, SSIM and per-sequence consistency metrics.
//!
//! Frames are `(C, H, W)` tensors with values in `[0, 1]`. Luma uses the
//! BT.601 studio-swing conversion; the choice is carried in every report as
//! [`ChannelMode`] so results stay auditable.

use std::fmt::Write as _;
use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Human-readable statement of the luma convention used in `Y` mode.
pub const Y_CONVENTION: &str = "BT.601 studio swing: Y = 16/255 + (65.481 R + 128.553 G + 24.966 B) / 255";

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChannelMode {
    /// Luma of the BT.601 studio-swing YCbCr transform.
    #[default]
    Y,
    /// All colour channels as stored.
    Rgb,
}

/// Evaluation settings shared by every metric.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricSettings {
    pub channel_mode: ChannelMode,
    /// Pixels dropped from each side before measuring.
    pub border_crop: usize,
}

/// Studio-swing luma of an RGB frame, values in `[16/255, 235/255]`.
pub fn luma(frame: &Tensor) -> Result<Tensor> {
    if frame.channels() != 3 {
        return Err(Error::Input(format!(
            "luma needs 3 channels, got {}",
            frame.channels()
        )));
    }
    let (r, g, b) = (frame.plane(0), frame.plane(1), frame.plane(2));
    let y = (0..frame.plane_len())
        .map(|i| (16.0 + 65.481 * r[i] + 128.553 * g[i] + 24.966 * b[i]) / 255.0)
        .collect();
    Tensor::from_vec(1, frame.height(), frame.width(), y)
}

pub fn crop_border(frame: &Tensor, px: usize) -> Result<Tensor> {
    if px == 0 {
        return Ok(frame.clone());
    }
    let (c, h, w) = frame.shape();
    if 2 * px >= h || 2 * px >= w {
        return Err(Error::Input(format!(
            "border crop {px} leaves nothing of a {h}x{w} frame"
        )));
    }
    Ok(Tensor::from_fn(c, h - 2 * px, w - 2 * px, |ch, y, x| {
        frame.get(ch, y + px, x + px)
    }))
}

fn prepare(reference: &Tensor, test: &Tensor, settings: MetricSettings) -> Result<(Tensor, Tensor)> {
    if !reference.same_shape(test) {
        return Err(Error::Input(format!(
            "metric inputs differ in shape: {:?} vs {:?}",
            reference.shape(),
            test.shape()
        )));
    }
    let convert = |t: &Tensor| -> Result<Tensor> {
        let t = crop_border(&t.clamp01(), settings.border_crop)?;
        match settings.channel_mode {
            ChannelMode::Y => luma(&t),
            ChannelMode::Rgb => Ok(t),
        }
    };
    Ok((convert(reference)?, convert(test)?))
}

/// Peak signal-to-noise ratio in dB for peak value 1.
///
/// Identical inputs give `f64::INFINITY`, the sentinel that summaries exclude.
pub fn psnr(reference: &Tensor, test: &Tensor, settings: MetricSettings) -> Result<f64> {
    let (a, b) = prepare(reference, test, settings)?;
    let mse = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        / a.data().len() as f64;
    Ok(if mse == 0.0 {
        f64::INFINITY
    } else {
        -10.0 * mse.log10()
    })
}

/// Normalised 1-D Gaussian taps of odd length `size`.
pub fn gaussian_taps(size: usize, sigma: f64) -> Vec<f64> {
    let half = (size / 2) as f64;
    let raw: Vec<f64> = (0..size)
        .map(|i| {
            let d = i as f64 - half;
            (-d * d / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|v| v / total).collect()
}

/// Gaussian-weighted local means over every valid `win x win` window.
fn local_mean(plane: &[f64], h: usize, w: usize, taps: &[f64]) -> Vec<f64> {
    let win = taps.len();
    let (oh, ow) = (h - win + 1, w - win + 1);
    let mut rows = vec![0.0; oh * w];
    for y in 0..oh {
        for x in 0..w {
            rows[y * w + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * plane[(y + k) * w + x])
                .sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = taps
                .iter()
                .enumerate()
                .map(|(k, t)| t * rows[y * w + x + k])
                .sum();
        }
    }
    out
}

fn ssim_plane(a: &[f64], b: &[f64], h: usize, w: usize) -> f64 {
    let taps = gaussian_taps(SSIM_WINDOW, SSIM_SIGMA);
    let product = |p: &[f64], q: &[f64]| -> Vec<f64> { p.iter().zip(q).map(|(x, y)| x * y).collect() };
    let mu_a = local_mean(a, h, w, &taps);
    let mu_b = local_mean(b, h, w, &taps);
    let e_aa = local_mean(&product(a, a), h, w, &taps);
    let e_bb = local_mean(&product(b, b), h, w, &taps);
    let e_ab = local_mean(&product(a, b), h, w, &taps);
    let c1 = (SSIM_K1 * 1.0) * (SSIM_K1 * 1.0);
    let c2 = (SSIM_K2 * 1.0) * (SSIM_K2 * 1.0);
    let n = mu_a.len();
    (0..n)
        .map(|i| {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let var_a = e_aa[i] - ma * ma;
            let var_b = e_bb[i] - mb * mb;
            let cov = e_ab[i] - ma * mb;
            // Written so that equal inputs give numerator == denominator bit for bit.
            let num = (ma * mb + ma * mb + c1) * (cov + cov + c2);
            let den = (ma * ma + mb * mb + c1) * (var_a + var_b + c2);
            num / den
        })
        .sum::<f64>()
        / n as f64
}

/// Single-scale SSIM with an 11x11 Gaussian window (sigma 1.5), dynamic range
/// 1, averaged over valid window positions (and over channels in RGB mode).
pub fn ssim(reference: &Tensor, test: &Tensor, settings: MetricSettings) -> Result<f64> {
    let (a, b) = prepare(reference, test, settings)?;
    let (c, h, w) = a.shape();
    if h < SSIM_WINDOW || w < SSIM_WINDOW {
        return Err(Error::Input(format!(
            "SSIM needs at least {SSIM_WINDOW}x{SSIM_WINDOW} pixels, got {h}x{w}"
        )));
    }
    Ok((0..c).map(|ch| ssim_plane(a.plane(ch), b.plane(ch), h, w)).sum::<f64>() / c as f64)
}

/// Extremes of a per-frame PSNR curve.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gap {
    pub min: f64,
    pub max: f64,
    /// `max - min`.
    pub gap: f64,
    pub mean: f64,
    /// Frames carrying the infinite sentinel, left out of the numbers above.
    pub infinite: usize,
}

/// Min, max, mean and gap of a per-frame PSNR list, ignoring `+inf` entries.
pub fn gap_report(per_frame_psnr: &[f64]) -> Result<Gap> {
    if per_frame_psnr.iter().any(|v| v.is_nan() || *v == f64::NEG_INFINITY) {
        return Err(Error::Input("PSNR list contains NaN or -inf".into()));
    }
    let finite: Vec<f64> = per_frame_psnr.iter().copied().filter(|v| v.is_finite()).collect();
    if finite.is_empty() {
        return Err(Error::Input("PSNR list has no finite entries".into()));
    }
    let min = finite.iter().copied().fold(f64::INFINITY, f64::min);
    let max = finite.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Gap {
        min,
        max,
        gap: max - min,
        mean: finite.iter().sum::<f64>() / finite.len() as f64,
        infinite: per_frame_psnr.len() - finite.len(),
    })
}

/// Metrics for one reconstructed sequence.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub per_frame_psnr: Vec<f64>,
    pub per_frame_ssim: Vec<f64>,
    /// Mean, min, max and gap over finite PSNR values; all frames infinite
    /// gives `inf` for the first three and a gap of 0.
    pub mean_psnr: f64,
    pub min_psnr: f64,
    pub max_psnr: f64,
    pub gap_psnr: f64,
    pub mean_ssim: f64,
    pub infinite_frames: usize,
    pub channel_mode: ChannelMode,
    pub border_crop: usize,
}

impl MetricsReport {
    pub fn evaluate(sr: &[Tensor], hr: &[Tensor], settings: MetricSettings) -> Result<Self> {
        if sr.len() != hr.len() || sr.is_empty() {
            return Err(Error::Input(format!(
                "cannot score {} frames against {} references",
                sr.len(),
                hr.len()
            )));
        }
        let per_frame_psnr = sr
            .iter()
            .zip(hr)
            .map(|(s, h)| psnr(h, s, settings))
            .collect::<Result<Vec<_>>>()?;
        let per_frame_ssim = sr
            .iter()
            .zip(hr)
            .map(|(s, h)| ssim(h, s, settings))
            .collect::<Result<Vec<_>>>()?;
        Self::from_curves(per_frame_psnr, per_frame_ssim, settings)
    }

    pub fn from_curves(per_frame_psnr: Vec<f64>, per_frame_ssim: Vec<f64>, settings: MetricSettings) -> Result<Self> {
        if per_frame_psnr.len() != per_frame_ssim.len() {
            return Err(Error::Input("PSNR and SSIM curves differ in length".into()));
        }
        let n = per_frame_psnr.len();
        let (mean_psnr, min_psnr, max_psnr, gap_psnr, infinite_frames) =
            if n > 0 && per_frame_psnr.iter().all(|v| *v == f64::INFINITY) {
                (f64::INFINITY, f64::INFINITY, f64::INFINITY, 0.0, n)
            } else {
                let g = gap_report(&per_frame_psnr)?;
                (g.mean, g.min, g.max, g.gap, g.infinite)
            };
        let mean_ssim = per_frame_ssim.iter().sum::<f64>() / n as f64;
        Ok(Self {
            per_frame_psnr,
            per_frame_ssim,
            mean_psnr,
            min_psnr,
            max_psnr,
            gap_psnr,
            mean_ssim,
            infinite_frames,
            channel_mode: settings.channel_mode,
            border_crop: settings.border_crop,
        })
    }
}

fn fmt_db(v: f64) -> String {
    if v == f64::INFINITY {
        "inf".to_string()
    } else {
        format!("{v:.6}")
    }
}

/// Writes one row per frame and a summary row (`frame_idx = all`) per clip.
///
/// Columns: `clip,frame_idx,psnr,ssim,min_psnr,max_psnr,gap_psnr`; the last
/// three are only filled on summary rows. Frame indices start at 1.
pub fn write_metrics_csv<W: Write>(out: W, clips: &[(String, MetricsReport)]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Input(format!("writing metrics CSV: {e}"));
    w.write_record(["clip", "frame_idx", "psnr", "ssim", "min_psnr", "max_psnr", "gap_psnr"])
        .map_err(csv_err)?;
    for (clip, r) in clips {
        for (i, (p, s)) in r.per_frame_psnr.iter().zip(&r.per_frame_ssim).enumerate() {
            let idx = (i + 1).to_string();
            w.write_record([clip.as_str(), &idx, &fmt_db(*p), &format!("{s:.6}"), "", "", ""])
                .map_err(csv_err)?;
        }
        w.write_record([
            clip.as_str(),
            "all",
            &fmt_db(r.mean_psnr),
            &format!("{:.6}", r.mean_ssim),
            &fmt_db(r.min_psnr),
            &fmt_db(r.max_psnr),
            &format!("{:.6}", r.gap_psnr),
        ])
        .map_err(csv_err)?;
    }
    w.flush().map_err(|e| Error::Input(format!("writing metrics CSV: {e}")))
}

/// Line plot of per-frame PSNR curves as a standalone SVG document.
///
/// Infinite entries are skipped, which breaks the line at that frame.
pub fn psnr_plot_svg(title: &str, series: &[(String, Vec<f64>)]) -> String {
    const W: f64 = 640.0;
    const H: f64 = 400.0;
    const PAD: f64 = 56.0;
    const COLORS: [&str; 6] = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"];

    let frames = series.iter().map(|(_, v)| v.len()).max().unwrap_or(0).max(2);
    let finite: Vec<f64> = series
        .iter()
        .flat_map(|(_, v)| v.iter().copied())
        .filter(|v| v.is_finite())
        .collect();
    let (mut lo, mut hi) = finite
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    if !lo.is_finite() {
        (lo, hi) = (0.0, 1.0);
    }
    if hi - lo < 1e-6 {
        (lo, hi) = (lo - 0.5, hi + 0.5);
    }
    let px = |i: usize| PAD + (W - 2.0 * PAD) * i as f64 / (frames - 1) as f64;
    let py = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);

    let mut svg = String::new();
    let _ = writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="12">"#
    );
    let _ = writeln!(svg, r#"<rect width="{W}" height="{H}" fill="white"/>"#);
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="24" text-anchor="middle" font-size="14">{}</text>"#,
        W / 2.0,
        escape(title)
    );
    let _ = writeln!(
        svg,
        r#"<path d="M{PAD} {PAD} V{} H{}" fill="none" stroke="black"/>"#,
        H - PAD,
        W - PAD
    );
    for k in 0..=4 {
        let v = lo + (hi - lo) * k as f64 / 4.0;
        let _ = writeln!(
            svg,
            r#"<text x="{}" y="{:.1}" text-anchor="end">{v:.2}</text>"#,
            PAD - 6.0,
            py(v) + 4.0
        );
    }
    let step = (frames / 10).max(1);
    for i in (0..frames).step_by(step) {
        let _ = writeln!(
            svg,
            r#"<text x="{:.1}" y="{}" text-anchor="middle">{}</text>"#,
            px(i),
            H - PAD + 16.0,
            i + 1
        );
    }
    let _ = writeln!(
        svg,
        r#"<text x="{}" y="{}" text-anchor="middle">frame</text>"#,
        W / 2.0,
        H - 12.0
    );
    let _ = writeln!(
        svg,
        r#"<text x="16" y="{}" text-anchor="middle" transform="rotate(-90 16 {})">PSNR (dB)</text>"#,
        H / 2.0,
        H / 2.0
    );
    for (s, (name, values)) in series.iter().enumerate() {
        let color = COLORS[s % COLORS.len()];
        let mut d = String::new();
        let mut pen_down = false;
        for (i, &v) in values.iter().enumerate() {
            if v.is_finite() {
                let _ = write!(d, "{}{:.1} {:.1} ", if pen_down { "L" } else { "M" }, px(i), py(v));
                pen_down = true;
            } else {
                pen_down = false;
            }
        }
        let _ = writeln!(
            svg,
            r#"<path class="series" data-name="{}" d="{}" fill="none" stroke="{color}" stroke-width="2"/>"#,
            escape(name),
            d.trim_end()
        );
        let ly = PAD + 16.0 * s as f64;
        let _ = writeln!(
            svg,
            r#"<line x1="{}" y1="{ly}" x2="{}" y2="{ly}" stroke="{color}" stroke-width="2"/><text x="{}" y="{}">{}</text>"#,
            W - PAD - 120.0,
            W - PAD - 100.0,
            W - PAD - 94.0,
            ly + 4.0,
            escape(name)
        );
    }
    svg.push_str("</svg>\n");
    svg
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;").replace('"', "&quot;")
}
