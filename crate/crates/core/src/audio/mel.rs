use std::f64::consts::PI;
use std::sync::Arc;

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::AudioClip;
use crate::error::{Error, Result};

/// Front-end parameters. The defaults give exactly four spectrogram steps
/// per 25 fps video frame (160 * 4 * 25 = 16000).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrogramConfig {
    pub sample_rate: u32,
    pub fft_size: usize,
    pub hop: usize,
    pub n_mels: usize,
    pub fmin: f64,
    pub fmax: f64,
    pub log_floor: f64,
    pub fps: f64,
    pub steps_per_frame: usize,
}

impl Default for SpectrogramConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16_000,
            fft_size: 512,
            hop: 160,
            n_mels: 64,
            fmin: 0.0,
            fmax: 8_000.0,
            log_floor: 1e-10,
            fps: 25.0,
            steps_per_frame: 4,
        }
    }
}

impl SpectrogramConfig {
    pub fn validate(&self) -> Result<()> {
        if self.sample_rate == 0 || self.fft_size < 2 || self.hop == 0 || self.n_mels == 0 {
            return Err(Error::Invalid(format!("degenerate spectrogram config {self:?}")));
        }
        let aligned = (self.hop * self.steps_per_frame) as f64 * self.fps;
        if aligned != self.sample_rate as f64 {
            return Err(Error::Invalid(format!(
                "hop {} x steps_per_frame {} x fps {} must equal sample_rate {}",
                self.hop, self.steps_per_frame, self.fps, self.sample_rate
            )));
        }
        if !(self.fmin >= 0.0 && self.fmax > self.fmin && self.fmax <= self.sample_rate as f64 / 2.0) {
            return Err(Error::Invalid(format!(
                "mel range [{}, {}] invalid for sample rate {}",
                self.fmin, self.fmax, self.sample_rate
            )));
        }
        if !(self.log_floor > 0.0) {
            return Err(Error::Invalid("log_floor must be positive".into()));
        }
        Ok(())
    }

    pub fn samples_per_frame(&self) -> usize {
        self.hop * self.steps_per_frame
    }

    /// Whole video frames covered by `n_samples` of audio.
    pub fn frames_for_samples(&self, n_samples: usize) -> usize {
        n_samples / self.samples_per_frame()
    }
}

/// HTK mel scale.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Triangular, peak-normalized filters over the one-sided power spectrum.
#[derive(Clone, Debug)]
pub struct MelFilterbank {
    n_bins: usize,
    /// `[n_mels x n_bins]`
    weights: Vec<f64>,
    centers_hz: Vec<f64>,
}

impl MelFilterbank {
    pub fn new(cfg: &SpectrogramConfig) -> Self {
        let n_bins = cfg.fft_size / 2 + 1;
        let (lo, hi) = (hz_to_mel(cfg.fmin), hz_to_mel(cfg.fmax));
        let edges: Vec<f64> = (0..cfg.n_mels + 2)
            .map(|i| mel_to_hz(lo + (hi - lo) * i as f64 / (cfg.n_mels + 1) as f64))
            .collect();
        let mut weights = vec![0.0; cfg.n_mels * n_bins];
        for m in 0..cfg.n_mels {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_bins {
                let f = k as f64 * cfg.sample_rate as f64 / cfg.fft_size as f64;
                let up = (f - left) / (center - left);
                let down = (right - f) / (right - center);
                weights[m * n_bins + k] = up.min(down).max(0.0);
            }
        }
        Self {
            n_bins,
            weights,
            centers_hz: edges[1..=cfg.n_mels].to_vec(),
        }
    }

    pub fn centers_hz(&self) -> &[f64] {
        &self.centers_hz
    }

    pub fn weights(&self, mel: usize) -> &[f64] {
        &self.weights[mel * self.n_bins..(mel + 1) * self.n_bins]
    }
}

/// Log-mel energies, row-major `[n_mels x n_steps]`.
#[derive(Clone, Debug, PartialEq)]
pub struct MelSpectrogram {
    pub n_mels: usize,
    pub n_steps: usize,
    pub values: Vec<f32>,
    pub config: SpectrogramConfig,
}

impl MelSpectrogram {
    pub fn new(n_mels: usize, n_steps: usize, values: Vec<f32>, config: SpectrogramConfig) -> Result<Self> {
        if values.len() != n_mels * n_steps {
            return Err(Error::Shape {
                axis: "spectrogram values",
                expected: n_mels * n_steps,
                actual: values.len(),
            });
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("spectrogram".into()));
        }
        Ok(Self {
            n_mels,
            n_steps,
            values,
            config,
        })
    }

    pub fn get(&self, mel: usize, step: usize) -> f32 {
        self.values[mel * self.n_steps + step]
    }

    /// Whole video frames covered.
    pub fn n_frames(&self) -> usize {
        self.n_steps / self.config.steps_per_frame
    }

    /// Copies steps `[from, to)`.
    pub fn slice_steps(&self, from: usize, to: usize) -> Result<Self> {
        if from >= to || to > self.n_steps {
            return Err(Error::Invalid(format!(
                "spectrogram steps [{from}, {to}) outside [0, {})",
                self.n_steps
            )));
        }
        let width = to - from;
        let mut values = Vec::with_capacity(self.n_mels * width);
        for m in 0..self.n_mels {
            values.extend_from_slice(&self.values[m * self.n_steps + from..m * self.n_steps + to]);
        }
        Ok(Self {
            n_mels: self.n_mels,
            n_steps: width,
            values,
            config: self.config.clone(),
        })
    }

    /// Extends (or cuts) the time axis to `n_steps`, mirroring past the end.
    pub fn reflect_to(&self, n_steps: usize) -> Result<Self> {
        if n_steps == 0 || self.n_steps == 0 {
            return Err(Error::Empty("spectrogram has no steps"));
        }
        let mut values = Vec::with_capacity(self.n_mels * n_steps);
        for m in 0..self.n_mels {
            let row = &self.values[m * self.n_steps..(m + 1) * self.n_steps];
            values.extend((0..n_steps).map(|j| row[reflect_index(j as isize, self.n_steps)]));
        }
        Ok(Self {
            n_mels: self.n_mels,
            n_steps,
            values,
            config: self.config.clone(),
        })
    }

    /// The steps aligned with video frames `[start_frame, start_frame + n_frames)`.
    pub fn segment_for_frames(&self, start_frame: usize, n_frames: usize) -> Result<Self> {
        let spf = self.config.steps_per_frame;
        let (from, to) = (start_frame * spf, (start_frame + n_frames) * spf);
        if n_frames == 0 || to > self.n_steps {
            return Err(Error::Invalid(format!(
                "frames [{start_frame}, {}) need spectrogram steps [{from}, {to}) but only {} exist",
                start_frame + n_frames,
                self.n_steps
            )));
        }
        self.slice_steps(from, to)
    }
}

/// Free function form of [`MelSpectrogram::segment_for_frames`].
pub fn segment_for_frames(spec: &MelSpectrogram, start_frame: usize, n_frames: usize) -> Result<MelSpectrogram> {
    spec.segment_for_frames(start_frame, n_frames)
}

fn reflect_index(i: isize, len: usize) -> usize {
    if len == 1 {
        return 0;
    }
    let period = 2 * (len as isize - 1);
    let mut j = i.rem_euclid(period);
    if j >= len as isize {
        j = period - j;
    }
    j as usize
}

/// Centered STFT (reflect padding, periodic Hann), power spectrum, mel
/// projection, then `ln(energy + log_floor)`. Produces
/// `floor(len / hop) + 1` steps.
pub fn log_mel_spectrogram(clip: &AudioClip, cfg: &SpectrogramConfig) -> Result<MelSpectrogram> {
    cfg.validate()?;
    if clip.sample_rate != cfg.sample_rate {
        return Err(Error::Invalid(format!(
            "clip sample rate {} does not match spectrogram rate {}",
            clip.sample_rate, cfg.sample_rate
        )));
    }
    if clip.samples.is_empty() {
        return Err(Error::Empty("audio clip is empty"));
    }
    let n = cfg.fft_size;
    let half = (n / 2) as isize;
    let n_steps = clip.samples.len() / cfg.hop + 1;
    let window: Vec<f64> = (0..n)
        .map(|i| 0.5 - 0.5 * (2.0 * PI * i as f64 / n as f64).cos())
        .collect();
    let bank = MelFilterbank::new(cfg);
    let fft: Arc<dyn Fft<f64>> = FftPlanner::new().plan_fft_forward(n);
    let mut buf = vec![Complex::new(0.0, 0.0); n];
    let mut power = vec![0.0; bank.n_bins];
    let mut values = vec![0f32; cfg.n_mels * n_steps];
    for step in 0..n_steps {
        let start = (step * cfg.hop) as isize - half;
        for (i, slot) in buf.iter_mut().enumerate() {
            let s = clip.samples[reflect_index(start + i as isize, clip.samples.len())];
            *slot = Complex::new(s as f64 * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for m in 0..cfg.n_mels {
            let energy: f64 = bank.weights(m).iter().zip(&power).map(|(w, p)| w * p).sum();
            values[m * n_steps + step] = (energy + cfg.log_floor).ln() as f32;
        }
    }
    MelSpectrogram::new(cfg.n_mels, n_steps, values, cfg.clone())
}
