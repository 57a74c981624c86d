use a2k_bench::synthetic_batch;
use a2k_core::audio::{log_mel_spectrogram, SpectrogramConfig};
use a2k_core::keypoints::NormStats;
use a2k_core::metrics::{pck, DEFAULT_PCK_ALPHA};
use a2k_core::nn::{Conditioning, ModelConfig, ModelParams};
use a2k_core::synthetic::synthetic_pair;
use a2k_core::train::{train_step, TrainConfig, TrainState};
use criterion::{black_box, criterion_group, criterion_main, Criterion};

fn features(c: &mut Criterion) {
    // 5.12 s at 16 kHz
    let (clip, _) = synthetic_pair(1, 128).unwrap();
    let cfg = SpectrogramConfig::default();
    c.bench_function("log_mel_128_frames", |b| {
        b.iter(|| log_mel_spectrogram(black_box(&clip), &cfg).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let (_, y) = synthetic_pair(2, 128).unwrap();
    let (_, y_hat) = synthetic_pair(3, 128).unwrap();
    c.bench_function("pck_128_frames", |b| {
        b.iter(|| pck(black_box(&y), black_box(&y_hat), DEFAULT_PCK_ALPHA))
    });
}

fn networks(c: &mut Criterion) {
    let mut group = c.benchmark_group("networks");
    group.sample_size(10);
    for (label, model) in [("toy", ModelConfig::toy()), ("default", ModelConfig::default())] {
        let batch = synthetic_batch(&model, 4, 64);
        let params = ModelParams::init(&model, 0).unwrap();
        group.bench_function(format!("generate_{label}_4x64"), |b| {
            b.iter(|| {
                params
                    .generate(&batch.spectrogram, &batch.reference, Conditioning::Full)
                    .unwrap()
            })
        });
        group.bench_function(format!("discriminate_{label}_4x64"), |b| {
            b.iter(|| params.discriminate(&batch.target).unwrap())
        });
    }
    let model = ModelConfig::toy();
    let batch = synthetic_batch(&model, 8, 64);
    let spec = SpectrogramConfig {
        n_mels: model.n_mels,
        ..SpectrogramConfig::default()
    };
    let cfg = TrainConfig {
        model,
        ..TrainConfig::default()
    };
    let mut state = TrainState::new(cfg, NormStats::identity(), spec).unwrap();
    group.bench_function("train_step_toy_8x64", |b| {
        b.iter(|| train_step(&mut state, &batch).unwrap())
    });
    group.finish();
}

criterion_group!(benches, features, metrics, networks);
criterion_main!(benches);
