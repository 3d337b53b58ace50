mod common;

use std::collections::BTreeMap;

use common::*;
use iprrn::blocks::bicubic_resize;
use iprrn::data::{
    degrade_frame, parse_manifest, quantize8, read_clip_dir, render_manifest, sample_patch, synth_sequence,
    write_clip_dir, ClipRecord, DatasetRoot, DegradationSpec, DegradeMode, Split, SynthKind, CACHE_ENV,
};
use iprrn::Tensor;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn gaussian_impulse_response_matches_taps() {
    let spec = DegradationSpec::default();
    let (py, px) = (20usize, 25usize);
    let mut hr = Tensor::zeros(3, 48, 48);
    for c in 0..3 {
        hr.set(c, py, px, 1.0);
    }
    let lr = degrade_frame(&hr, &spec).unwrap();
    assert_eq!(lr.shape(), (3, 12, 12));
    let mut worst = 0.0f64;
    for i in 0..12 {
        for j in 0..12 {
            let dy = py as isize - 4 * i as isize;
            let dx = px as isize - 4 * j as isize;
            let tap = |d: isize| if d.abs() <= 6 { gaussian_tap(d, 13, 1.6) } else { 0.0 };
            let expected = tap(dy) * tap(dx);
            for c in 0..3 {
                worst = worst.max((lr.get(c, i, j) - expected).abs());
            }
        }
    }
    assert!(worst < 1e-6, "worst {worst}");
}

#[test]
fn degradation_preserves_constants_and_bicubic_recovers_them() {
    for mode in [DegradeMode::GaussianDownsample, DegradeMode::Bicubic] {
        let spec = DegradationSpec {
            mode,
            ..DegradationSpec::default()
        };
        let hr = Tensor::filled(3, 32, 24, 0.37);
        let lr = degrade_frame(&hr, &spec).unwrap();
        assert!(lr.data().iter().all(|v| (v - 0.37).abs() < 1e-12), "{mode:?}");
        let up = bicubic_resize(&lr, 4.0).unwrap();
        assert!(up.max_abs_diff(&hr) < 1e-12);
    }
}

#[test]
fn degradation_rejects_indivisible_frames() {
    assert!(degrade_frame(&Tensor::zeros(3, 30, 32), &DegradationSpec::default()).is_err());
}

#[test]
fn patches_are_aligned_to_the_scale() {
    let hr = synth_sequence(SynthKind::RandomSmooth, 3, 64, 48, 2).unwrap();
    let clip = ClipRecord::from_hr("c", hr, &DegradationSpec::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    for _ in 0..100 {
        let p = sample_patch(&clip, 16, &mut rng).unwrap();
        let (y, x) = p.meta.hr_offset;
        assert_eq!((y % 4, x % 4), (0, 0));
        assert_eq!(p.hr_size(), (16, 16));
        assert_eq!(p.lr[0].shape(), (3, 4, 4));
        assert_eq!(p.lr[1].get(1, 2, 3), clip.lr[1].get(1, y / 4 + 2, x / 4 + 3));
        assert_eq!(p.hr[2].get(0, 5, 7), clip.hr[2].get(0, y + 5, x + 7));
    }
    assert!(sample_patch(&clip, 80, &mut rng).is_err());
}

#[test]
fn png_round_trip_is_exact_for_8bit_frames() {
    let dir = tempfile::tempdir().unwrap();
    let frames: Vec<Tensor> = synth_sequence(SynthKind::TranslatingTexture, 3, 16, 20, 4)
        .unwrap()
        .iter()
        .map(quantize8)
        .collect();
    write_clip_dir(dir.path(), &frames).unwrap();
    assert!(dir.path().join("00000001.png").is_file());
    assert_eq!(read_clip_dir(dir.path()).unwrap(), frames);
}

#[test]
fn dataset_root_uses_cache_and_manifest() {
    let root = tempfile::tempdir().unwrap();
    let cache = tempfile::tempdir().unwrap();
    for (i, id) in ["a", "b", "c"].iter().enumerate() {
        let hr: Vec<Tensor> = synth_sequence(SynthKind::RotatingPattern, 2, 16, 16, i as u64)
            .unwrap()
            .iter()
            .map(quantize8)
            .collect();
        write_clip_dir(&root.path().join("hr").join(id), &hr).unwrap();
    }
    let mut manifest = BTreeMap::new();
    manifest.insert("a".to_string(), Split::Train);
    manifest.insert("b".to_string(), Split::Test);
    manifest.insert("c".to_string(), Split::Train);
    std::fs::write(root.path().join("manifest.txt"), render_manifest(&manifest)).unwrap();

    let spec = DegradationSpec::default();
    let ds = DatasetRoot::open(root.path()).unwrap();
    assert_eq!(ds.clip_ids(&[Split::Train]).unwrap(), vec!["a", "c"]);
    let uncached = ds.load(&[Split::Train], &spec).unwrap();

    std::env::set_var(CACHE_ENV, cache.path());
    let first = ds.load(&[Split::Train], &spec).unwrap();
    let cached_dirs = std::fs::read_dir(cache.path()).unwrap().count();
    let second = ds.load(&[Split::Train], &spec).unwrap();
    std::env::remove_var(CACHE_ENV);

    assert_eq!(cached_dirs, 1);
    for ((u, f), s) in uncached.iter().zip(&first).zip(&second) {
        assert_eq!(u.lr, f.lr);
        assert_eq!(f.lr, s.lr);
        assert_eq!(u.hr, s.hr);
    }
    assert!(DatasetRoot::open(&root.path().join("missing")).is_err());
}

#[test]
fn manifest_errors_name_the_line() {
    let err = parse_manifest("a train\n\nb bogus\n").unwrap_err().to_string();
    assert!(err.contains("line 3"), "{err}");
    let err = parse_manifest("a train\na val\n").unwrap_err().to_string();
    assert!(err.contains("line 2") && err.contains("twice"), "{err}");
    let ok = parse_manifest("# header\na train # comment\nb val\n").unwrap();
    assert_eq!(ok.len(), 2);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn synthetic_sequences_are_deterministic_and_in_range(seed in any::<u64>(), kind in prop::sample::select(vec![
        SynthKind::TranslatingTexture,
        SynthKind::RotatingPattern,
        SynthKind::RandomSmooth,
    ])) {
        let a = synth_sequence(kind, 3, 12, 16, seed).unwrap();
        prop_assert_eq!(&a, &synth_sequence(kind, 3, 12, 16, seed).unwrap());
        prop_assert!(a.iter().all(|f| f.data().iter().all(|v| (0.0..=1.0).contains(v))));
        prop_assert_eq!(kind.to_string().parse::<SynthKind>().unwrap(), kind);
    }

    #[test]
    fn degraded_values_stay_in_unit_range(seed in any::<u64>(), sigma in 0.5f64..3.0) {
        let kernel_size = 2 * (3.0 * sigma).ceil() as usize + 1;
        let spec = DegradationSpec { blur_sigma: sigma, kernel_size, ..DegradationSpec::default() };
        let hr = synth_sequence(SynthKind::RandomSmooth, 1, 16, 16, seed).unwrap();
        let lr = degrade_frame(&hr[0], &spec).unwrap();
        prop_assert!(lr.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }
}
