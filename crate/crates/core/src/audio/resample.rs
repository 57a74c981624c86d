use std::f64::consts::PI;

use super::AudioClip;

const ZERO_CROSSINGS: f64 = 16.0;

/// Band-limited resampling with a Hann-windowed sinc kernel. The cutoff
/// drops to the target Nyquist when downsampling.
pub fn resample(clip: &AudioClip, target_rate: u32) -> AudioClip {
    if clip.sample_rate == target_rate || clip.samples.is_empty() {
        return AudioClip {
            samples: clip.samples.clone(),
            sample_rate: target_rate,
        };
    }
    let ratio = target_rate as f64 / clip.sample_rate as f64;
    let cutoff = ratio.min(1.0);
    let half_width = ZERO_CROSSINGS / cutoff;
    let n_out = (clip.samples.len() as f64 * ratio).round() as usize;
    let src = &clip.samples;
    let samples = (0..n_out)
        .map(|i| {
            let t = i as f64 / ratio;
            let lo = (t - half_width).ceil().max(0.0) as usize;
            let hi = ((t + half_width).floor() as usize).min(src.len() - 1);
            let mut acc = 0.0;
            for (j, &s) in src.iter().enumerate().take(hi + 1).skip(lo) {
                let x = j as f64 - t;
                let window = 0.5 + 0.5 * (PI * x / half_width).cos();
                acc += s as f64 * cutoff * sinc(cutoff * x) * window;
            }
            acc as f32
        })
        .collect();
    AudioClip {
        samples,
        sample_rate: target_rate,
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        (PI * x).sin() / (PI * x)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dft_magnitude(x: &[f32], rate: f64, freq: f64) -> f64 {
        let (mut re, mut im) = (0.0, 0.0);
        for (n, &s) in x.iter().enumerate() {
            let ph = 2.0 * PI * freq * n as f64 / rate;
            re += s as f64 * ph.cos();
            im -= s as f64 * ph.sin();
        }
        (re * re + im * im).sqrt()
    }

    #[test]
    fn upsampled_sine_keeps_its_frequency() {
        let clip = AudioClip::new(
            (0..8000)
                .map(|n| (2.0 * PI * 440.0 * n as f64 / 8000.0).sin() as f32)
                .collect(),
            8000,
        )
        .unwrap();
        let out = resample(&clip, 16000);
        assert_eq!(out.samples.len(), 16000);
        // scan 5 Hz bins from 100 Hz to 2 kHz
        let peak = (20..400)
            .map(|k| k as f64 * 5.0)
            .max_by(|a, b| {
                dft_magnitude(&out.samples, 16000.0, *a).total_cmp(&dft_magnitude(&out.samples, 16000.0, *b))
            })
            .unwrap();
        assert!((peak - 440.0).abs() <= 5.0, "peak at {peak}");
    }

    #[test]
    fn downsampling_suppresses_content_above_new_nyquist() {
        let clip = AudioClip::new(
            (0..16000)
                .map(|n| (2.0 * PI * 7000.0 * n as f64 / 16000.0).sin() as f32)
                .collect(),
            16000,
        )
        .unwrap();
        let out = resample(&clip, 8000);
        let interior = &out.samples[200..out.samples.len() - 200];
        let rms = (interior.iter().map(|&s| (s * s) as f64).sum::<f64>() / interior.len() as f64).sqrt();
        assert!(rms < 0.05, "rms {rms}");
    }
}
