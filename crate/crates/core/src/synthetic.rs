//! Synthetic talking faces for tests, benchmarks and smoke runs: a chirp
//! whose loudness envelope opens and closes the mouth of a jittered 68-point
//! face template.

use std::f64::consts::PI;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::audio::{write_wav, AudioClip, SpectrogramConfig};
use crate::dataset::{DatasetManifest, SampleRecord};
use crate::error::{Error, Result};
use crate::keypoints::{write_keypoints, KeypointFrame, KeypointSequence, Space, DEFAULT_FPS, NUM_POINTS};

fn ellipse(n: usize, center: [f64; 2], radii: [f64; 2], from: f64, to: f64, closed: bool) -> Vec<[f64; 2]> {
    let steps = if closed { n } else { n - 1 } as f64;
    (0..n)
        .map(|i| {
            let a = from + (to - from) * i as f64 / steps;
            [center[0] + radii[0] * a.cos(), center[1] + radii[1] * a.sin()]
        })
        .collect()
}

/// A frontal face on the 224 x 224 canvas, in the standard 68-point order.
pub fn face_template() -> KeypointFrame {
    let mut pts = Vec::with_capacity(NUM_POINTS);
    // chin: left ear to right ear through the jaw
    pts.extend(ellipse(17, [112.0, 96.0], [52.0, 62.0], PI, 0.0, false));
    pts.extend(ellipse(5, [88.0, 76.0], [16.0, 6.0], PI, 2.0 * PI, false));
    pts.extend(ellipse(5, [136.0, 76.0], [16.0, 6.0], PI, 2.0 * PI, false));
    for i in 0..4 {
        pts.push([112.0, 86.0 + 7.0 * i as f64]);
    }
    for i in 0..5 {
        pts.push([100.0 + 6.0 * i as f64, 112.0 + if i == 2 { 2.0 } else { 0.0 }]);
    }
    pts.extend(ellipse(6, [90.0, 88.0], [9.0, 4.0], PI, 3.0 * PI, true));
    pts.extend(ellipse(6, [134.0, 88.0], [9.0, 4.0], PI, 3.0 * PI, true));
    pts.extend(ellipse(12, [112.0, 132.0], [20.0, 7.0], PI, 3.0 * PI, true));
    pts.extend(ellipse(8, [112.0, 132.0], [13.0, 3.0], PI, 3.0 * PI, true));
    KeypointFrame::new(&pts).expect("template has 68 points")
}

/// Loudness in `[0, 1]` at time `t` seconds.
fn envelope(t: f64, rate: f64, phase: f64) -> f64 {
    0.5 + 0.5 * (2.0 * PI * rate * t + phase).sin()
}

/// Pairs a chirp clip (`n_frames * 640` samples at 16 kHz) with raw-pixel
/// keypoints whose mouth opening follows the clip's envelope.
pub fn synthetic_pair(seed: u64, n_frames: usize) -> Result<(AudioClip, KeypointSequence)> {
    if n_frames == 0 {
        return Err(Error::Invalid("synthetic sequence needs at least one frame".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = SpectrogramConfig::default();
    let sr = cfg.sample_rate as f64;
    let rate = rng.random_range(0.8..3.0);
    let phase = rng.random_range(0.0..2.0 * PI);
    let (f0, f1) = (rng.random_range(150.0..400.0), rng.random_range(800.0..2500.0));
    let n_samples = n_frames * cfg.samples_per_frame();
    let duration = n_samples as f64 / sr;
    let samples = (0..n_samples)
        .map(|i| {
            let t = i as f64 / sr;
            // linear chirp: instantaneous frequency f0 + (f1 - f0) t / duration
            let arg = 2.0 * PI * (f0 * t + 0.5 * (f1 - f0) * t * t / duration);
            (0.6 * envelope(t, rate, phase) * arg.sin()) as f32
        })
        .collect();
    let clip = AudioClip::new(samples, cfg.sample_rate)?;

    let scale = rng.random_range(0.85..1.15);
    let aspect = rng.random_range(0.9..1.1);
    let shift = [rng.random_range(-15.0..15.0), rng.random_range(-15.0..15.0)];
    let identity: Vec<[f64; 2]> = face_template()
        .points()
        .iter()
        .map(|&[x, y]| {
            [
                112.0 + (x - 112.0) * scale + shift[0] + rng.random_range(-1.0..1.0),
                112.0 + (y - 112.0) * scale * aspect + shift[1] + rng.random_range(-1.0..1.0),
            ]
        })
        .collect();
    let mouth_y = identity[48..68].iter().map(|p| p[1]).sum::<f64>() / 20.0;
    let frames = (0..n_frames)
        .map(|f| {
            let t = (f as f64 + 0.5) / DEFAULT_FPS;
            let open = envelope(t, rate, phase);
            let nod = 3.0 * (open - 0.5);
            let pts: Vec<[f64; 2]> = identity
                .iter()
                .enumerate()
                .map(|(i, &[x, y])| {
                    let mut y = y + nod;
                    if (48..68).contains(&i) {
                        // lower lip drops, upper lip lifts slightly
                        y += if y > mouth_y { 9.0 * open } else { -2.0 * open };
                    } else if (5..12).contains(&i) {
                        y += 4.0 * open;
                    }
                    [x, y]
                })
                .collect();
            KeypointFrame::new(&pts)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((clip, KeypointSequence::new(frames, DEFAULT_FPS, Space::RawPixel)?))
}

#[derive(Clone, Debug, PartialEq)]
pub struct CorpusSpec {
    pub n_records: usize,
    pub n_frames: usize,
    pub seed: u64,
}

/// Writes `rec000.kp`, `rec000.wav`, ... and an input `manifest.json` into
/// `dir`; returns the manifest path.
pub fn write_corpus(dir: &Path, spec: &CorpusSpec) -> Result<PathBuf> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut records = Vec::with_capacity(spec.n_records);
    for i in 0..spec.n_records {
        let id = format!("rec{i:03}");
        let (clip, seq) = synthetic_pair(spec.seed.wrapping_mul(1_000_003).wrapping_add(i as u64), spec.n_frames)?;
        let kp = PathBuf::from(format!("{id}.kp"));
        let wav = PathBuf::from(format!("{id}.wav"));
        write_keypoints(&dir.join(&kp), &seq)?;
        write_wav(&dir.join(&wav), &clip)?;
        records.push(SampleRecord {
            id,
            keypoint_path: kp,
            audio_path: wav,
            fps: DEFAULT_FPS,
            n_frames: Some(spec.n_frames),
            split: None,
            spectrogram_path: None,
        });
    }
    let path = dir.join("manifest.json");
    DatasetManifest {
        records,
        stats_path: None,
        spectrogram: None,
    }
    .save(&path)?;
    Ok(path)
}
