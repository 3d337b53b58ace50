//! Acceptance suite: one PASS/FAIL line per criterion, non-zero exit if any fails.
//!
//! Runs as a plain binary (`harness = false`) so the report lines are always
//! printed, not only on failure.

mod common;

use std::process::ExitCode;
use std::time::Instant;

use common::*;
use iprrn::blocks::{bicubic_resize, pixel_shuffle, pixel_unshuffle, ResidualBlock, ResidualDenseBlock, SeBlock};
use iprrn::data::{synth_sequence, ClipRecord, DegradationSpec, SynthKind};
use iprrn::metrics::{gap_report, psnr, ssim, ChannelMode, MetricSettings};
use iprrn::rrnet::RrNet;
use iprrn::trainer::{evaluate, Checkpoint, TrainConfig, Trainer};
use iprrn::{HiddenState, Iprrn, ModelConfig, Parameters, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

/// Criterion 1: blocks against loop oracles on 20+ random inputs each, tolerance 1e-6.
fn block_oracles() -> Outcome {
    const TOL: f64 = 1e-6;
    const CASES: usize = 25;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = [0.0f64; 4];
    for case in 0..CASES {
        let c = [16, 32, 48][case % 3];
        let (h, w) = (rng.gen_range(1..=4), rng.gen_range(1..=4));
        let x = random_tensor(c, h, w, &mut rng);
        let xm = to_map(&x);

        let mut se = SeBlock::zeros(c, 16).unwrap();
        randomize(&mut se, 0.5, &mut rng);
        worst[0] = worst[0].max(max_diff(&to_map(&se.forward(&x).unwrap()), &se_oracle(&se, &xm)));

        let w8 = rng.gen_range(2..=6);
        let xr = random_tensor(w8, h, w, &mut rng);
        let mut rb = ResidualBlock::zeros(w8).unwrap();
        randomize(&mut rb, 0.3, &mut rng);
        worst[1] = worst[1].max(max_diff(&to_map(&rb.forward(&xr)), &residual_oracle(&rb, &to_map(&xr))));

        let g = rng.gen_range(1..=4);
        let mut rdb = ResidualDenseBlock::zeros(w8, g).unwrap();
        randomize(&mut rdb, 0.3, &mut rng);
        worst[2] = worst[2].max(max_diff(&to_map(&rdb.forward(&xr)), &dense_oracle(&rdb, &to_map(&xr))));

        let s = rng.gen_range(1..=4);
        let cs = rng.gen_range(1..=3);
        let xs = random_tensor(cs * s * s, h, w, &mut rng);
        worst[3] = worst[3].max(max_diff(&to_map(&pixel_shuffle(&xs, s).unwrap()), &shuffle_oracle(&to_map(&xs), s)));
    }
    let pass = worst.iter().all(|&e| e <= TOL);
    outcome(
        pass,
        format!(
            "{CASES} cases each; max |diff| se {:.1e}, residual {:.1e}, rdb {:.1e}, shuffle {:.1e} (tol {TOL:.0e})",
            worst[0], worst[1], worst[2], worst[3]
        ),
    )
}

/// Criterion 2: finite differences for one tiny step (width 8, 1 RDB, 4x4 frames).
fn gradient_check() -> Outcome {
    const TOL: f64 = 1e-4;
    let cfg = ModelConfig {
        init_seed: 5,
        ..ModelConfig::tiny()
    };
    assert_eq!((cfg.width, cfg.n_rdb), (8, 1));
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let net = RrNet::kaiming(&cfg, &mut rng).unwrap();
    let frame = |rng: &mut ChaCha8Rng| Tensor::from_fn(3, 4, 4, |_, _, _| rng.gen_range(0.0..1.0));
    let (prev, cur) = (frame(&mut rng), frame(&mut rng));
    let h_prev = HiddenState {
        temporal: random_tensor(cfg.hidden_temporal, 4, 4, &mut rng).scale(0.5),
        spatial: random_tensor(cfg.hidden_spatial, 4, 4, &mut rng).scale(0.5),
    };
    let target = bicubic_resize(&cur, 4.0).unwrap().add(&random_tensor(3, 16, 16, &mut rng).scale(0.2));
    let h_target = HiddenState {
        temporal: random_tensor(cfg.hidden_temporal, 4, 4, &mut rng),
        spatial: random_tensor(cfg.hidden_spatial, 4, 4, &mut rng),
    };
    // L1 on the SR frame plus L1 on the outgoing hidden state, so the
    // temporal head (which does not touch the SR frame) is checked as well.
    let terms = |n: &RrNet| -> Vec<f64> {
        let out = n.step(&h_prev, &prev, &cur).unwrap();
        let mut t = l1_terms(&[out.sr_frame], &[target.clone()]);
        t.extend(l1_terms(&[out.hidden.to_tensor()], &[h_target.to_tensor()]));
        t
    };
    let (out, cache) = net.step_cached(&h_prev, &prev, &cur).unwrap();
    let sign = |a: &Tensor, b: &Tensor, n: usize| {
        let n = n as f64;
        Tensor::from_fn(a.channels(), a.height(), a.width(), |c, y, x| {
            let d = a.get(c, y, x) - b.get(c, y, x);
            if d > 0.0 {
                1.0 / n
            } else if d < 0.0 {
                -1.0 / n
            } else {
                0.0
            }
        })
    };
    let n_hidden = h_target.temporal.data().len() + h_target.spatial.data().len();
    let grad_hidden = HiddenState {
        temporal: sign(&out.hidden.temporal, &h_target.temporal, n_hidden),
        spatial: sign(&out.hidden.spatial, &h_target.spatial, n_hidden),
    };
    let mut grads = net.zeros_like();
    net.step_backward(&cache, &sign(&out.sr_frame, &target, target.data().len()), &grad_hidden, &mut grads)
        .unwrap();
    let analytic = grads.flatten();
    let started = Instant::now();
    let errors = check_gradient(&net, &analytic, TOL, 1e-12, terms);
    let names = param_names(&net);
    let (idx, worst) = errors
        .iter()
        .enumerate()
        .fold((0, 0.0), |acc, (i, &e)| if e > acc.1 { (i, e) } else { acc });
    let nonzero = analytic.iter().filter(|g| **g != 0.0).count();
    outcome(
        worst < TOL,
        format!(
            "{} parameters ({nonzero} non-zero grads), worst relative error {worst:.2e} at {} (tol {TOL:.0e}), {:.0}s",
            errors.len(),
            names[idx],
            started.elapsed().as_secs_f64()
        ),
    )
}

/// Criterion 3: all-zero weights reproduce bicubic upscaling; shuffle round trip.
fn zero_identity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut ok = true;
    for cfg in [ModelConfig::tiny(), ModelConfig { ipnet: false, ..ModelConfig::tiny() }] {
        let model = Iprrn::zeros(&cfg).unwrap();
        let frames: Vec<Tensor> = (0..5).map(|_| Tensor::from_fn(3, 6, 5, |_, _, _| rng.gen_range(0.0..1.0))).collect();
        let sr = model.forward(&frames).unwrap();
        ok &= sr.iter().zip(&frames).all(|(s, f)| *s == bicubic_resize(f, 4.0).unwrap());
    }
    let mut round_trips = 0;
    for s in 1..=4 {
        let x = random_tensor(3 * s * s, 5, 7, &mut rng);
        let back = pixel_unshuffle(&pixel_shuffle(&x, s).unwrap(), s).unwrap();
        ok &= back == x;
        round_trips += 1;
    }
    outcome(ok, format!("zero model == bicubic bit-exact with and without prebuilder; unshuffle(shuffle(x)) == x for {round_trips} scales"))
}

/// Criterion 4: outputs never depend on later frames without the prebuilder;
/// with it (m = 3) frame 2 reaches output 1.
fn causality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let frames: Vec<Tensor> = (0..6).map(|_| Tensor::from_fn(3, 5, 5, |_, _, _| rng.gen_range(0.0..1.0))).collect();
    let base = Iprrn::new(&ModelConfig {
        ipnet: false,
        ..ModelConfig::tiny()
    })
    .unwrap();
    let out = base.forward(&frames).unwrap();
    let mut violations = 0;
    let mut checks = 0;
    for p in 0..frames.len() {
        let mut perturbed = frames.clone();
        perturbed[p] = perturbed[p].map(|v| 1.0 - v);
        let o = base.forward(&perturbed).unwrap();
        for t in 0..p {
            checks += 1;
            if o[t] != out[t] {
                violations += 1;
            }
        }
        if o[p] == out[p] {
            violations += 1;
        }
    }
    let with = Iprrn::new(&ModelConfig::tiny()).unwrap();
    assert_eq!(with.config().m, 3);
    let a = with.forward(&frames).unwrap();
    let mut perturbed = frames.clone();
    perturbed[1] = perturbed[1].map(|v| 1.0 - v);
    let b = with.forward(&perturbed).unwrap();
    let reach = a[0].max_abs_diff(&b[0]);
    outcome(
        violations == 0 && reach > 0.0,
        format!("without prebuilder: {checks} earlier outputs unchanged, {violations} violations; with m=3, perturbing frame 2 moves output 1 by {reach:.2e}"),
    )
}

/// Criterion 5: a disabled prebuilder means exactly the zero-state baseline.
fn baseline_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let frames: Vec<Tensor> = (0..4).map(|_| Tensor::from_fn(3, 4, 6, |_, _, _| rng.gen_range(0.0..1.0))).collect();
    let mut ok = true;
    for cfg in [
        ModelConfig { ipnet: false, ..ModelConfig::tiny() },
        ModelConfig { m: 0, ..ModelConfig::tiny() },
    ] {
        let model = Iprrn::new(&cfg).unwrap();
        let h0 = model.initial_hidden(&frames).unwrap();
        ok &= h0.is_zero() && h0 == HiddenState::for_config(&cfg, 4, 6);
        // Hand-written zero-initialised unidirectional recurrence.
        let mut h = HiddenState::zeros(cfg.hidden_temporal, cfg.hidden_spatial, 4, 6);
        let mut expected = Vec::new();
        for t in 0..frames.len() {
            let step = model.rrnet.step(&h, &frames[t.saturating_sub(1)], &frames[t]).unwrap();
            h = step.hidden;
            expected.push(step.sr_frame);
        }
        ok &= model.forward(&frames).unwrap() == expected;
    }
    outcome(ok, "ipnet=false and m=0: h0 is all zeros and outputs are bit-identical to a zero-initialised loop")
}

/// Criterion 6: overfit one 10-frame synthetic clip within 2000 steps.
fn overfit() -> Outcome {
    const STEPS: usize = 2000;
    const REPEAT: usize = 20;
    let started = Instant::now();
    let hr = synth_sequence(SynthKind::TranslatingTexture, 10, 32, 32, 1).unwrap();
    let clip = ClipRecord::from_hr("overfit", hr, &DegradationSpec::default()).unwrap();
    let epochs = STEPS / REPEAT;
    let cfg = TrainConfig {
        batch_size: 1,
        lr0: 1e-3,
        decay_factor: 0.5,
        decay_every: 25,
        max_epochs: Some(epochs),
        seq_len: 10,
        clip_repeat: REPEAT,
        hr_patch: None,
        seed: 6,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(Iprrn::new(&ModelConfig::tiny()).unwrap(), cfg).unwrap();
    let clips = [clip];
    let mut reached = None;
    let mut psnr_now = 0.0;
    for e in 0..epochs {
        trainer.run_epoch(&clips).unwrap();
        psnr_now = evaluate(trainer.model(), &clips, MetricSettings::default()).unwrap()[0].1.mean_psnr;
        if reached.is_none() && psnr_now > 40.0 {
            reached = Some((e + 1) * REPEAT);
        }
    }
    let losses: Vec<f64> = trainer.log().iter().map(|l| l.loss).collect();
    let rises = losses.windows(2).filter(|w| w[1] > w[0]).count();
    let frac = rises as f64 / (losses.len() - 1) as f64;
    let secs = started.elapsed().as_secs_f64();
    outcome(
        reached.is_some() && frac <= 0.05 && secs < 900.0,
        format!(
            "sequence PSNR {psnr_now:.2} dB after {STEPS} steps, >40 dB first at step {}; {rises}/{} epoch averages rose ({:.1}%, tol 5%); {secs:.0}s",
            reached.map_or("never".to_string(), |s| s.to_string()),
            losses.len() - 1,
            100.0 * frac
        ),
    )
}

/// Criterion 7: metric closed forms and oracles.
fn metric_oracles() -> Outcome {
    let rgb = MetricSettings {
        channel_mode: ChannelMode::Rgb,
        border_crop: 0,
    };
    let y = MetricSettings::default();
    let a = Tensor::filled(3, 16, 16, 0.4);
    let b = a.map(|v| v + 16.0 / 255.0);
    let p_rgb = psnr(&a, &b, rgb).unwrap();
    // Grey offset whose luma difference is exactly 16/255.
    let by = a.map(|v| v + 16.0 / 219.0);
    let p_y = psnr(&a, &by, y).unwrap();
    let closed = 20.0 * (255.0f64 / 16.0).log10();
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let c1 = Tensor::from_fn(3, 32, 32, |c, _, _| (0.2 * c as f64 + rng.gen_range(0.0..0.6)).min(1.0));
    let c2 = Tensor::from_fn(3, 32, 32, |c, y, x| (c1.get(c, y, x) + rng.gen_range(-0.1..0.1)).clamp(0.0, 1.0));
    let y_err = (psnr(&c1, &c2, y).unwrap() - psnr_y_oracle(&c1, &c2)).abs();
    let self_ssim = ssim(&c1, &c1, y).unwrap();
    let mut ssim_err = 0.0f64;
    for _ in 0..5 {
        let p = Tensor::from_fn(1, 32, 32, |_, _, _| rng.gen_range(0.0..1.0));
        let q = Tensor::from_fn(1, 32, 32, |c, y, x| (p.get(c, y, x) + rng.gen_range(-0.3..0.3)).clamp(0.0, 1.0));
        let rows = |t: &Tensor| (0..32).map(|r| (0..32).map(|c| t.get(0, r, c)).collect()).collect::<Vec<Vec<f64>>>();
        let lib = ssim(&p, &q, rgb).unwrap();
        ssim_err = ssim_err.max((lib - ssim_oracle(&rows(&p), &rows(&q))).abs());
    }
    let city = gap_report(&[25.37, 29.0, 32.14]).unwrap().gap;
    let calendar = gap_report(&[24.18, 25.0, 25.26]).unwrap().gap;
    let pass = (p_rgb - 24.05).abs() <= 0.01
        && (p_y - 24.05).abs() <= 0.01
        && (p_rgb - closed).abs() < 1e-9
        && y_err <= 0.01
        && self_ssim == 1.0
        && ssim_err <= 1e-6
        && (city * 100.0).round() / 100.0 == 6.77
        && (city - 6.77).abs() < 1e-12
        && (calendar - 1.08).abs() < 1e-12;
    outcome(
        pass,
        format!(
            "PSNR 16/255 offset {p_rgb:.4} dB (RGB) / {p_y:.4} dB (Y); Y oracle diff {y_err:.1e} dB; SSIM(a,a) = {self_ssim}; SSIM oracle diff {ssim_err:.1e}; City gap {city:.2}, Calendar gap {calendar:.2}"
        ),
    )
}

/// Criterion 8: matched training with and without the prebuilder on 50 clips.
fn prebuilder_benefit() -> Outcome {
    const SOFT: f64 = 0.05;
    let started = Instant::now();
    let spec = DegradationSpec::default();
    let clip = |seed: u64, n: usize| {
        let hr = synth_sequence(SynthKind::TranslatingTexture, n, 32, 32, seed).unwrap();
        ClipRecord::from_hr(format!("tex{seed:04}"), hr, &spec).unwrap()
    };
    let train_set: Vec<ClipRecord> = (0..50).map(|s| clip(s, 7)).collect();
    let eval_set: Vec<ClipRecord> = (1000..1020).map(|s| clip(s, 10)).collect();
    let train_cfg = TrainConfig {
        batch_size: 4,
        lr0: 1e-3,
        decay_factor: 0.5,
        decay_every: 26,
        max_epochs: Some(80),
        seq_len: 7,
        hr_patch: None,
        seed: 7,
        ..TrainConfig::default()
    };
    let mut rows = Vec::new();
    for ipnet in [false, true] {
        let cfg = ModelConfig {
            ipnet,
            ..ModelConfig::tiny()
        };
        let mut trainer = Trainer::new(Iprrn::new(&cfg).unwrap(), train_cfg.clone()).unwrap();
        trainer.fit(&train_set, None).unwrap();
        let results = evaluate(trainer.model(), &eval_set, MetricSettings::default()).unwrap();
        let n = results.len() as f64;
        let first = results.iter().map(|r| r.1.per_frame_psnr[0]).sum::<f64>() / n;
        let gap = results.iter().map(|r| r.1.gap_psnr).sum::<f64>() / n;
        let mean = results.iter().map(|r| r.1.mean_psnr).sum::<f64>() / n;
        rows.push((first, gap, mean));
    }
    let (base, with) = (rows[0], rows[1]);
    outcome(
        with.0 >= base.0 - SOFT,
        format!(
            "first-frame PSNR {:.3} dB w/ vs {:.3} dB w/o (gate: >= w/o - {SOFT}); mean gap {:.3} vs {:.3} dB ({}); mean PSNR {:.3} vs {:.3} dB; {:.0}s",
            with.0,
            base.0,
            with.1,
            base.1,
            if with.1 < base.1 { "lower with prebuilder" } else { "not lower with prebuilder" },
            with.2,
            base.2,
            started.elapsed().as_secs_f64()
        ),
    )
}

/// Criterion 9: parameter counts at the default widths.
fn parameter_accounting() -> Outcome {
    let with = ModelConfig::default();
    let without = ModelConfig {
        ipnet: false,
        ..ModelConfig::default()
    };
    let (n_with, n_without) = (with.count_params(), without.count_params());
    let exact = Iprrn::zeros(&with).unwrap().param_count() == n_with
        && Iprrn::zeros(&without).unwrap().param_count() == n_without;
    let within = |n: usize, target: f64| (n as f64 / 1e6 - target).abs() <= 0.25 * target;
    outcome(
        exact && within(n_with, 6.10) && within(n_without, 4.14),
        format!(
            "with prebuilder {:.3}M (target 6.10M +/-25%), without {:.3}M (target 4.14M +/-25%); analytic count matches instantiated model: {exact}",
            n_with as f64 / 1e6,
            n_without as f64 / 1e6
        ),
    )
}

/// Criterion 10: identical logs for identical seeds; bit-exact checkpoints.
fn determinism() -> Outcome {
    let spec = DegradationSpec::default();
    let clips: Vec<ClipRecord> = (0..3)
        .map(|s| {
            let hr = synth_sequence(SynthKind::RotatingPattern, 5, 24, 24, s).unwrap();
            ClipRecord::from_hr(format!("c{s}"), hr, &spec).unwrap()
        })
        .collect();
    let cfg = TrainConfig {
        batch_size: 2,
        lr0: 1e-3,
        max_epochs: Some(4),
        seq_len: 4,
        hr_patch: Some(16),
        seed: 11,
        ..TrainConfig::default()
    };
    let run = || {
        let mut t = Trainer::new(Iprrn::new(&ModelConfig::tiny()).unwrap(), cfg.clone()).unwrap();
        t.fit(&clips, None).unwrap()
    };
    let (a, b) = (run(), run());
    let bits = |ck: &Checkpoint| ck.log.iter().map(|l| l.loss.to_bits()).collect::<Vec<_>>();
    let logs_equal = bits(&a) == bits(&b) && a.params == b.params;

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("model.ckpt");
    a.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    let before = a.model().unwrap().forward(&clips[0].lr).unwrap();
    let after = loaded.model().unwrap().forward(&clips[0].lr).unwrap();
    let round_trip = loaded == a && before == after;

    // Resuming from a mid-run checkpoint continues the same trajectory.
    let mut half = Trainer::new(
        Iprrn::new(&ModelConfig::tiny()).unwrap(),
        TrainConfig {
            max_epochs: Some(2),
            ..cfg.clone()
        },
    )
    .unwrap();
    let mid = half.fit(&clips, None).unwrap();
    let mut mid = Checkpoint::from_bytes(&mid.to_bytes().unwrap()).unwrap();
    mid.train_config.max_epochs = Some(4);
    let resumed = Trainer::from_checkpoint(&mid).unwrap().fit(&clips, None).unwrap();
    let resume_equal = bits(&resumed) == bits(&a) && resumed.params == a.params;
    outcome(
        logs_equal && round_trip && resume_equal,
        format!("two seeded runs identical: {logs_equal}; save/load/forward bit-exact: {round_trip}; resume matches uninterrupted run: {resume_equal}"),
    )
}

fn main() -> ExitCode {
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("block oracle equivalence", block_oracles),
        ("gradient check, tiny full step", gradient_check),
        ("zero-parameter identity", zero_identity),
        ("causality", causality),
        ("baseline equivalence", baseline_equivalence),
        ("overfit smoke test", overfit),
        ("metric oracles", metric_oracles),
        ("directional prebuilder benefit", prebuilder_benefit),
        ("parameter accounting", parameter_accounting),
        ("determinism and checkpointing", determinism),
    ];
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| *f == id || name.contains(f.as_str())) {
            continue;
        }
        let r = check();
        if !r.pass {
            failed += 1;
        }
        println!("[{}] {:>2}. {name}: {}", if r.pass { "PASS" } else { "FAIL" }, i + 1, r.detail);
    }
    if failed > 0 {
        println!("{failed} criteria failed");
        ExitCode::FAILURE
    } else {
        ExitCode::SUCCESS
    }
}
