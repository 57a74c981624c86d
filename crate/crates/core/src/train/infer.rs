use std::path::Path;

use super::TrainState;
use crate::audio::{log_mel_spectrogram, resample, AudioClip, SpectrogramConfig};
use crate::error::{Error, Result};
use crate::keypoints::{KeypointFrame, KeypointSequence, NormStats, Space, BASE_POINT, FLAT_DIM};
use crate::nn::{spectrogram_batch, Conditioning, ModelParams, Tensor};

/// What generation needs from a checkpoint.
#[derive(Clone, Debug, PartialEq)]
pub struct InferenceModel {
    pub params: ModelParams,
    pub stats: NormStats,
    pub spectrogram: SpectrogramConfig,
    pub conditioning: Conditioning,
}

impl InferenceModel {
    pub fn from_state(state: &TrainState) -> Self {
        Self {
            params: state.params.clone(),
            stats: state.stats.clone(),
            spectrogram: state.spectrogram.clone(),
            conditioning: state.config.ablation.conditioning(),
        }
    }
}

pub fn load_model(path: &Path) -> Result<InferenceModel> {
    Ok(InferenceModel::from_state(&TrainState::load(path)?))
}

/// Keypoints for every whole video frame of `audio`, starting from
/// `reference` (raw pixels). The time axis is mirrored up to the model's
/// frame multiple, generated in one pass and trimmed; the result is
/// destandardized and moved back to the reference's base point.
pub fn generate_sequence(
    model: &InferenceModel,
    audio: &AudioClip,
    reference: &KeypointFrame,
) -> Result<KeypointSequence> {
    let cfg = &model.spectrogram;
    let clip = if audio.sample_rate == cfg.sample_rate {
        audio.clone()
    } else {
        resample(audio, cfg.sample_rate)
    };
    let frames = cfg.frames_for_samples(clip.samples.len());
    if frames == 0 {
        return Err(Error::Invalid(format!(
            "audio too short: {} samples at {} Hz is less than one video frame",
            audio.samples.len(),
            audio.sample_rate
        )));
    }
    let base = reference.point(BASE_POINT);
    let mut k = reference.translated([-base[0], -base[1]]).flatten();
    model.stats.standardize_flat(&mut k);

    let multiple = model.params.config.frame_multiple();
    let padded = frames.div_ceil(multiple) * multiple;
    let spf = cfg.steps_per_frame;
    let spec = log_mel_spectrogram(&clip, cfg)?
        .slice_steps(0, frames * spf)?
        .reflect_to(padded * spf)?;
    let out = model.params.generate(
        &spectrogram_batch(&[&spec])?,
        &Tensor::from_vec(&[1, FLAT_DIM], k.to_vec()),
        model.conditioning,
    )?;
    let mut flat = out.into_data();
    flat.truncate(frames * FLAT_DIM);
    for frame in flat.chunks_exact_mut(FLAT_DIM) {
        model.stats.destandardize_flat(frame);
        for xy in frame.chunks_exact_mut(2) {
            xy[0] += base[0];
            xy[1] += base[1];
        }
    }
    if flat.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("generated keypoints".into()));
    }
    KeypointSequence::from_flat(&flat, cfg.fps, Space::RawPixel)
}
