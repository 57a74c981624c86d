//! Property tests over the public API.

use a2k_core::audio::{log_mel_spectrogram, AudioClip, SpectrogramConfig};
use a2k_core::dataset::ingest;
use a2k_core::keypoints::{
    bounding_box, destandardize, normalize_base_point, standardize, KeypointFrame, KeypointSequence, NormStats, Space,
    BASE_POINT, FLAT_DIM, NUM_POINTS,
};
use a2k_core::losses::{
    adversarial_gen_loss, discriminator_loss, piv_gen_loss, regression_loss, triplet_from_distances,
};
use a2k_core::metrics::average_l1;
use a2k_core::nn::{Conditioning, ModelConfig, ModelParams, Tensor};
use a2k_core::synthetic::{synthetic_pair, write_corpus, CorpusSpec};
use proptest::prelude::*;

/// Flat raw-pixel sequence of `t` frames on the f32 grid.
fn grid_sequence(t: usize) -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec((0i32..224 * 16).prop_map(|v| v as f64 / 16.0), t * FLAT_DIM)
}

fn seq(flat: &[f64]) -> KeypointSequence {
    KeypointSequence::from_flat(flat, 25.0, Space::RawPixel).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn base_point_normalization_ignores_translation(
        flat in grid_sequence(3),
        dx in -4000i32..4000,
        dy in -4000i32..4000,
    ) {
        let s = seq(&flat);
        let c = [dx as f64 / 8.0, dy as f64 / 8.0];
        let a = normalize_base_point(&s).unwrap();
        prop_assert_eq!(&normalize_base_point(&s.translated(c)).unwrap(), &a);
        for f in a.frames() {
            prop_assert_eq!(f.point(BASE_POINT), [0.0, 0.0]);
        }
    }

    #[test]
    fn standardize_round_trips(flat in grid_sequence(2), scale in 0.1f64..50.0, shift in -20.0f64..20.0) {
        let s = normalize_base_point(&seq(&flat)).unwrap();
        let stats = NormStats {
            mean: (0..FLAT_DIM).map(|i| shift + i as f64 * 0.1).collect(),
            std: (0..FLAT_DIM).map(|i| scale * (1.0 + (i % 7) as f64)).collect(),
            n_sequences_used: 1,
        };
        let back = destandardize(&standardize(&s, &stats).unwrap(), &stats).unwrap();
        for (a, b) in back.to_flat().iter().zip(s.to_flat()) {
            prop_assert!((a - b).abs() <= 1e-5);
        }
    }

    #[test]
    fn flatten_unflatten_is_exact(flat in grid_sequence(1)) {
        let f = KeypointFrame::unflatten(&flat).unwrap();
        prop_assert_eq!(f.flatten().to_vec(), flat);
    }

    #[test]
    fn bounding_box_ignores_order(flat in grid_sequence(3), seed in any::<u64>()) {
        let s = seq(&flat);
        let mut points: Vec<[f64; 2]> = s.frames().iter().flat_map(|f| f.points().to_vec()).collect();
        // deterministic shuffle
        let mut state = seed | 1;
        for i in (1..points.len()).rev() {
            state ^= state << 13;
            state ^= state >> 7;
            state ^= state << 17;
            points.swap(i, (state % (i as u64 + 1)) as usize);
        }
        let frames = points.chunks(NUM_POINTS).map(|c| KeypointFrame::new(c).unwrap()).collect();
        let shuffled = KeypointSequence::new(frames, 25.0, Space::RawPixel).unwrap();
        prop_assert_eq!(bounding_box(&shuffled), bounding_box(&s));
    }

    #[test]
    fn losses_are_nonnegative_and_regression_symmetric(
        a in prop::collection::vec(-5.0f64..5.0, 12),
        b in prop::collection::vec(-5.0f64..5.0, 12),
        d in -1.0f64..2.0,
        r in -1.0f64..2.0,
    ) {
        prop_assert!(adversarial_gen_loss(d) >= 0.0);
        prop_assert!(discriminator_loss(r, d) >= 0.0);
        prop_assert!(piv_gen_loss(&a[..4], &b).unwrap() >= 0.0);
        let l = regression_loss(&a, &b).unwrap();
        prop_assert!(l >= 0.0);
        prop_assert_eq!(l, regression_loss(&b, &a).unwrap());
    }

    #[test]
    fn triplet_is_monotone(d_pos in 0.0f64..1.0, d_neg in 0.0f64..1.0, step in 0.0f64..0.5, margin in 0.01f64..0.5) {
        let base = triplet_from_distances(d_pos, d_neg, margin);
        prop_assert!(base >= 0.0);
        prop_assert!(triplet_from_distances(d_pos, d_neg + step, margin) <= base);
        prop_assert!(triplet_from_distances(d_pos + step, d_neg, margin) >= base);
    }

    #[test]
    fn average_l1_is_a_metric(a in grid_sequence(2), b in grid_sequence(2), c in grid_sequence(2)) {
        let (a, b, c) = (seq(&a), seq(&b), seq(&c));
        let ab = average_l1(&a, &b).unwrap();
        prop_assert_eq!(ab, average_l1(&b, &a).unwrap());
        prop_assert!(average_l1(&a, &c).unwrap() <= ab + average_l1(&b, &c).unwrap() + 1e-12);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(8))]

    #[test]
    fn log_mel_shifts_by_twice_log_gain(seed in 0u64..1000, gain in 0.05f64..4.0) {
        let (clip, _) = synthetic_pair(seed, 8).unwrap();
        let cfg = SpectrogramConfig::default();
        let scaled = AudioClip::new(clip.samples.iter().map(|v| (*v as f64 * gain) as f32).collect(), clip.sample_rate).unwrap();
        let a = log_mel_spectrogram(&clip, &cfg).unwrap();
        let b = log_mel_spectrogram(&scaled, &cfg).unwrap();
        let want = 2.0 * gain.ln();
        let mut checked = 0;
        for (x, y) in a.values.iter().zip(&b.values) {
            // energy far above the floor
            if *x > -10.0 {
                // f32 storage and rounding of the scaled samples
                prop_assert!(((*y - *x) as f64 - want).abs() < 1e-2, "{} vs {}", y - x, want);
                checked += 1;
            }
        }
        prop_assert!(checked > 0);
        prop_assert_eq!(log_mel_spectrogram(&clip, &cfg).unwrap(), a);
    }

    #[test]
    fn forwards_are_finite_and_piv_latents_unit_norm(seed in any::<u64>(), levels in 1usize..=4) {
        let cfg = ModelConfig::toy();
        let params = ModelParams::init(&cfg, seed).unwrap();
        let t = 16 * levels;
        let n = 2;
        let spec = Tensor::from_vec(
            &[n, 1, cfg.n_mels, 4 * t],
            (0..n * cfg.n_mels * 4 * t).map(|i| -8.0 + ((i * 37 % 101) as f64) / 20.0).collect(),
        );
        let reference = Tensor::from_vec(&[n, FLAT_DIM], (0..n * FLAT_DIM).map(|i| ((i * 13 % 29) as f64 - 14.0) / 7.0).collect());
        let y = params.generate(&spec, &reference, Conditioning::Full).unwrap();
        prop_assert_eq!(y.shape(), &[n, t, FLAT_DIM][..]);
        prop_assert!(y.is_finite());
        prop_assert!(params.discriminate(&y).unwrap().iter().all(|v| v.is_finite()));
        let latent = params.piv_latent(&reference).unwrap();
        for row in latent.data().chunks(cfg.latent_piv_dim) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((norm - 1.0).abs() <= 1e-6);
        }
    }
}

#[test]
fn ingest_is_byte_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let raw = write_corpus(
        &dir.path().join("raw"),
        &CorpusSpec {
            n_records: 3,
            n_frames: 40,
            seed: 5,
        },
    )
    .unwrap();
    let cfg = SpectrogramConfig::default();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ingest(&raw, &a, &cfg).unwrap();
    ingest(&raw, &b, &cfg).unwrap();
    ingest(&raw, &a, &cfg).unwrap();
    let files = |root: &std::path::Path| {
        let mut out = Vec::new();
        let mut stack = vec![root.to_path_buf()];
        while let Some(dir) = stack.pop() {
            for entry in std::fs::read_dir(dir).unwrap() {
                let path = entry.unwrap().path();
                if path.is_dir() {
                    stack.push(path);
                } else {
                    out.push(path.strip_prefix(root).unwrap().to_path_buf());
                }
            }
        }
        out.sort();
        out
    };
    let names = files(&a);
    assert_eq!(names, files(&b));
    // 3 keypoint shards, 3 spectrogram shards, stats and manifest
    assert_eq!(names.len(), 8, "{names:?}");
    for name in names {
        assert_eq!(
            std::fs::read(a.join(&name)).unwrap(),
            std::fs::read(b.join(&name)).unwrap(),
            "{name:?}"
        );
    }
}
