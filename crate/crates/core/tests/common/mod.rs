//! Independent reference implementations used by the integration tests.
//!
//! Everything here is written with plain nested loops straight from the
//! defining formulas and shares no code with the library's fast paths.

#![allow(dead_code)]

use iprrn::blocks::{ResidualBlock, ResidualDenseBlock, SeBlock};
use iprrn::nn::Conv2d;
use iprrn::{Iprrn, Parameters, Tensor};
use rand::Rng;

pub type Map = Vec<Vec<Vec<f64>>>;

pub fn to_map(t: &Tensor) -> Map {
    (0..t.channels())
        .map(|c| (0..t.height()).map(|y| (0..t.width()).map(|x| t.get(c, y, x)).collect()).collect())
        .collect()
}

pub fn from_map(m: &Map) -> Tensor {
    let (c, h, w) = (m.len(), m[0].len(), m[0][0].len());
    Tensor::from_fn(c, h, w, |c, y, x| m[c][y][x])
}

pub fn random_tensor<R: Rng>(c: usize, h: usize, w: usize, rng: &mut R) -> Tensor {
    Tensor::from_fn(c, h, w, |_, _, _| rng.gen_range(-1.0..1.0))
}

pub fn randomize<P: Parameters, R: Rng>(p: &mut P, scale: f64, rng: &mut R) {
    p.visit_mut("", &mut |_, buf| buf.iter_mut().for_each(|v| *v = rng.gen_range(-scale..scale)));
}

/// Direct zero-padded "same" convolution.
pub fn conv_oracle(conv: &Conv2d, x: &Map) -> Map {
    let cin = x.len();
    let (h, w) = (x[0].len(), x[0][0].len());
    let k = conv.kernel();
    let pad = (k / 2) as i64;
    let groups = conv.groups();
    let gi = cin / groups;
    let cout = conv.out_channels();
    let go = cout / groups;
    let mut out = vec![vec![vec![0.0; w]; h]; cout];
    for o in 0..cout {
        let g = o / go;
        for y in 0..h {
            for xx in 0..w {
                let mut acc = conv.bias[o];
                for i in 0..gi {
                    for ky in 0..k {
                        for kx in 0..k {
                            let sy = y as i64 + ky as i64 - pad;
                            let sx = xx as i64 + kx as i64 - pad;
                            if sy < 0 || sx < 0 || sy >= h as i64 || sx >= w as i64 {
                                continue;
                            }
                            let widx = ((o * gi + i) * k + ky) * k + kx;
                            acc += conv.weight[widx] * x[g * gi + i][sy as usize][sx as usize];
                        }
                    }
                }
                out[o][y][xx] = acc;
            }
        }
    }
    out
}

pub fn relu_map(x: &Map) -> Map {
    x.iter()
        .map(|p| p.iter().map(|r| r.iter().map(|v| v.max(0.0)).collect()).collect())
        .collect()
}

pub fn add_map(a: &Map, b: &Map) -> Map {
    a.iter()
        .zip(b)
        .map(|(p, q)| p.iter().zip(q).map(|(r, s)| r.iter().zip(s).map(|(u, v)| u + v).collect()).collect())
        .collect()
}

pub fn cat_map(parts: &[&Map]) -> Map {
    parts.iter().flat_map(|p| p.iter().cloned()).collect()
}

pub fn se_oracle(se: &SeBlock, x: &Map) -> Map {
    let c = x.len();
    let r = se.reduced();
    let (h, w) = (x[0].len(), x[0][0].len());
    let mut s = vec![0.0; c];
    for ch in 0..c {
        let mut acc = 0.0;
        for y in 0..h {
            for xx in 0..w {
                acc += x[ch][y][xx];
            }
        }
        s[ch] = acc / (h * w) as f64;
    }
    let mut z = vec![0.0; r];
    for i in 0..r {
        for ch in 0..c {
            z[i] += se.w1[i * c + ch] * s[ch];
        }
        z[i] = z[i].max(0.0);
    }
    let mut out = x.clone();
    for ch in 0..c {
        let mut a = 0.0;
        for i in 0..r {
            a += se.w2[ch * r + i] * z[i];
        }
        let e = 1.0 / (1.0 + (-a).exp());
        for y in 0..h {
            for xx in 0..w {
                out[ch][y][xx] *= e;
            }
        }
    }
    out
}

pub fn residual_oracle(b: &ResidualBlock, x: &Map) -> Map {
    let inner = relu_map(&conv_oracle(&b.conv1, x));
    add_map(x, &conv_oracle(&b.conv2, &inner))
}

pub fn dense_oracle(b: &ResidualDenseBlock, x: &Map) -> Map {
    let mut feats: Vec<Map> = vec![x.clone()];
    for stage in &b.stages {
        let refs: Vec<&Map> = feats.iter().collect();
        let o = relu_map(&conv_oracle(stage, &cat_map(&refs)));
        feats.push(o);
    }
    let refs: Vec<&Map> = feats.iter().collect();
    add_map(&conv_oracle(&b.fuse, &cat_map(&refs)), x)
}

/// Output `(c, y*s+dy, x*s+dx)` reads input channel `c*s*s + dy*s + dx`.
pub fn shuffle_oracle(x: &Map, s: usize) -> Map {
    let c = x.len() / (s * s);
    let (h, w) = (x[0].len(), x[0][0].len());
    let mut out = vec![vec![vec![0.0; w * s]; h * s]; c];
    for ch in 0..c {
        for oy in 0..h * s {
            for ox in 0..w * s {
                out[ch][oy][ox] = x[ch * s * s + (oy % s) * s + ox % s][oy / s][ox / s];
            }
        }
    }
    out
}

pub fn max_diff(a: &Map, b: &Map) -> f64 {
    let mut m: f64 = 0.0;
    for (p, q) in a.iter().zip(b) {
        for (r, s) in p.iter().zip(q) {
            for (u, v) in r.iter().zip(s) {
                m = m.max((u - v).abs());
            }
        }
    }
    m
}

/// Neumaier-compensated sum of `sum_j w_j * terms_j[k]` over every `k`.
fn combine(parts: &[(f64, &[f64])]) -> f64 {
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for k in 0..parts[0].1.len() {
        let x: f64 = parts.iter().map(|(w, t)| w * t[k]).sum();
        let t = sum + x;
        comp += if sum.abs() >= x.abs() { (sum - t) + x } else { (x - t) + sum };
        sum = t;
    }
    sum + comp
}

/// Finite-difference check of an analytic gradient vector.
///
/// `terms` returns the loss as a list of additive terms; differences are
/// formed term by term before a compensated sum, which keeps summation
/// roundoff out of the quotient for very small gradients.
///
/// Each parameter is probed with a central difference at `1e-4`; parameters
/// that disagree are re-probed at smaller steps and with second-order
/// one-sided stencils. A ReLU or L1 kink next to the current value spoils the
/// central stencil, but there the analytic value still equals one of the
/// one-sided derivatives, while a wrong analytic value disagrees with all of
/// them. Magnitudes below `floor` count as zero. Returns the best relative
/// error reached per parameter.
pub fn check_gradient<P: Parameters + Clone>(
    model: &P,
    analytic: &[f64],
    tol: f64,
    floor: f64,
    terms: impl Fn(&P) -> Vec<f64>,
) -> Vec<f64> {
    let base = model.flatten();
    assert_eq!(base.len(), analytic.len());
    let f0 = terms(model);
    let mut probe = model.clone();
    let mut buf = base.clone();
    let mut at = |i: usize, d: f64| {
        buf[i] = base[i] + d;
        probe.load_flat(&buf).unwrap();
        let v = terms(&probe);
        buf[i] = base[i];
        v
    };
    (0..base.len())
        .map(|i| {
            let mut best = f64::INFINITY;
            for h in [1e-4, 1e-5, 1e-6] {
                let (p1, m1) = (at(i, h), at(i, -h));
                let central = combine(&[(1.0, &p1), (-1.0, &m1)]) / (2.0 * h);
                best = best.min(relative_error(analytic[i], central, floor));
                if best < tol {
                    break;
                }
                let (p2, m2) = (at(i, 2.0 * h), at(i, -2.0 * h));
                let forward = combine(&[(-3.0, &f0), (4.0, &p1), (-1.0, &p2)]) / (2.0 * h);
                let backward = combine(&[(3.0, &f0), (-4.0, &m1), (1.0, &m2)]) / (2.0 * h);
                best = best
                    .min(relative_error(analytic[i], forward, floor))
                    .min(relative_error(analytic[i], backward, floor));
                if best < tol {
                    break;
                }
            }
            best
        })
        .collect()
}

/// Per-element terms of the mean L1 loss; they sum to `l1_loss`.
pub fn l1_terms(sr: &[Tensor], hr: &[Tensor]) -> Vec<f64> {
    let count: usize = hr.iter().map(|t| t.data().len()).sum();
    sr.iter()
        .zip(hr)
        .flat_map(|(a, b)| a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()))
        .map(|d| d / count as f64)
        .collect()
}

/// `|a - n| / max(|a|, |n|)`, with both-tiny pairs treated as agreeing.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    let scale = analytic.abs().max(numeric.abs());
    if scale < floor {
        0.0
    } else {
        (analytic - numeric).abs() / scale
    }
}

pub fn model_param_names(model: &Iprrn) -> Vec<String> {
    param_names(model)
}

pub fn param_names<P: Parameters>(model: &P) -> Vec<String> {
    let mut names = Vec::new();
    model.visit("", &mut |name, buf| {
        for i in 0..buf.len() {
            names.push(format!("{name}[{i}]"));
        }
    });
    names
}

/// PSNR on luma computed as `Y = 0.257 R + 0.504 G + 0.098 B + 16/255`.
pub fn psnr_y_oracle(a: &Tensor, b: &Tensor) -> f64 {
    let y = |t: &Tensor, r: usize, c: usize| {
        0.257 * t.get(0, r, c) + 0.504 * t.get(1, r, c) + 0.098 * t.get(2, r, c) + 16.0 / 255.0
    };
    let mut se = 0.0;
    for r in 0..a.height() {
        for c in 0..a.width() {
            let d = y(a, r, c) - y(b, r, c);
            se += d * d;
        }
    }
    10.0 * (1.0 / (se / (a.height() * a.width()) as f64)).log10()
}

/// SSIM straight from the definition: for every valid 11x11 window, weighted
/// means, variances and covariance with a Gaussian (sigma 1.5) weight.
pub fn ssim_oracle(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    let (h, w) = (a.len(), a[0].len());
    let mut weight = [[0.0f64; 11]; 11];
    let mut total = 0.0;
    for (i, row) in weight.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (dy, dx) = (i as f64 - 5.0, j as f64 - 5.0);
            *v = (-(dy * dy + dx * dx) / (2.0 * 1.5 * 1.5)).exp();
            total += *v;
        }
    }
    let (c1, c2) = (0.01f64.powi(2), 0.03f64.powi(2));
    let mut sum = 0.0;
    let mut count = 0;
    for y in 0..=h - 11 {
        for x in 0..=w - 11 {
            let (mut ma, mut mb) = (0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    ma += weight[i][j] / total * a[y + i][x + j];
                    mb += weight[i][j] / total * b[y + i][x + j];
                }
            }
            let (mut va, mut vb, mut cov) = (0.0, 0.0, 0.0);
            for i in 0..11 {
                for j in 0..11 {
                    let (da, db) = (a[y + i][x + j] - ma, b[y + i][x + j] - mb);
                    va += weight[i][j] / total * da * da;
                    vb += weight[i][j] / total * db * db;
                    cov += weight[i][j] / total * da * db;
                }
            }
            sum += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
            count += 1;
        }
    }
    sum / count as f64
}

/// Closed-form normalised Gaussian tap `k` of an odd kernel of `size` taps.
pub fn gaussian_tap(k: isize, size: usize, sigma: f64) -> f64 {
    let half = (size / 2) as isize;
    let g = |d: isize| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp();
    g(k) / (-half..=half).map(g).sum::<f64>()
}
