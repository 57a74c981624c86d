//! Fixtures shared by the benchmarks.

use a2k_core::audio::{log_mel_spectrogram, SpectrogramConfig};
use a2k_core::dataset::Batch;
use a2k_core::keypoints::{normalize_base_point, KeypointSequence, FLAT_DIM};
use a2k_core::nn::{spectrogram_batch, ModelConfig, Tensor};
use a2k_core::synthetic::synthetic_pair;

/// A batch of `n` synthetic windows of `frames` frames for `model`.
pub fn synthetic_batch(model: &ModelConfig, n: usize, frames: usize) -> Batch {
    let spec_cfg = SpectrogramConfig {
        n_mels: model.n_mels,
        ..SpectrogramConfig::default()
    };
    let mut specs = Vec::with_capacity(n);
    let mut reference = Vec::with_capacity(n * FLAT_DIM);
    let mut target = Vec::with_capacity(n * frames * FLAT_DIM);
    for i in 0..n {
        let (clip, seq) = synthetic_pair(i as u64, frames).expect("synthetic pair");
        let spec = log_mel_spectrogram(&clip, &spec_cfg).expect("spectrogram");
        specs.push(spec.segment_for_frames(0, frames).expect("segment"));
        let norm = normalize_base_point(&seq).expect("normalize");
        let flat = scaled(&norm);
        reference.extend_from_slice(&flat[..FLAT_DIM]);
        target.extend(flat);
    }
    let refs: Vec<_> = specs.iter().collect();
    Batch {
        ids: (0..n).map(|i| format!("bench{i}")).collect(),
        spectrogram: spectrogram_batch(&refs).expect("spectrogram batch"),
        reference: Tensor::from_vec(&[n, FLAT_DIM], reference),
        target: Tensor::from_vec(&[n, frames, FLAT_DIM], target),
    }
}

// rough unit scale without computing dataset statistics
fn scaled(seq: &KeypointSequence) -> Vec<f64> {
    seq.to_flat().iter().map(|v| v / 50.0).collect()
}
