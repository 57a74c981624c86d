use super::params::{Bound, ModelConfig, ModelParams};
use super::tape::{Conv1dGeom, Conv2dGeom, Tape, Var};
use super::tensor::Tensor;
use super::LEAKY_SLOPE;
use crate::audio::MelSpectrogram;
use crate::error::{Error, Result};
use crate::keypoints::FLAT_DIM;

const DOWN: Conv1dGeom = Conv1dGeom { stride: 2, pad: 1 };
const SAME: Conv1dGeom = Conv1dGeom { stride: 1, pad: 1 };
const POINTWISE: Conv1dGeom = Conv1dGeom { stride: 1, pad: 0 };
const MEL_DOWN: Conv2dGeom = Conv2dGeom {
    stride: (2, 1),
    pad: (1, 1),
};

/// Which reference-frame encodings reach the decoder. Disabled encodings
/// are replaced by zeros so the parameter layout never changes.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Conditioning {
    Full,
    NoPiv,
    AudioOnly,
}

/// Audio feature pyramid. `skips[l]` has `T / 2^l` steps; `skips[0]` holds
/// one feature vector per video frame.
pub struct AudioEncoding {
    pub skips: Vec<Var>,
    pub bottleneck: Var,
}

impl AudioEncoding {
    pub fn top(&self) -> Var {
        self.skips[0]
    }
}

/// Stacks spectrogram windows into `[N, 1, n_mels, n_steps]`.
pub fn spectrogram_batch(windows: &[&MelSpectrogram]) -> Result<Tensor> {
    let first = windows.first().ok_or(Error::Empty("no spectrogram windows"))?;
    let (m, s) = (first.n_mels, first.n_steps);
    let mut data = Vec::with_capacity(windows.len() * m * s);
    for w in windows {
        if w.n_mels != m {
            return Err(Error::Shape {
                axis: "mel",
                expected: m,
                actual: w.n_mels,
            });
        }
        if w.n_steps != s {
            return Err(Error::Shape {
                axis: "time",
                expected: s,
                actual: w.n_steps,
            });
        }
        data.extend(w.values.iter().map(|&v| v as f64));
    }
    Ok(Tensor::from_vec(&[windows.len(), 1, m, s], data))
}

fn block1d(tape: &mut Tape, p: &Bound, name: &str, x: Var, geom: Conv1dGeom, norm: bool) -> Var {
    let mut h = tape.conv1d(x, p.get(&format!("{name}.w")), p.get(&format!("{name}.b")), geom);
    if norm {
        h = tape.channel_norm(h, p.get(&format!("{name}.n.g")), p.get(&format!("{name}.n.beta")));
    }
    tape.leaky_relu(h, LEAKY_SLOPE)
}

/// 2D convolutions halve the mel axis down to one bin, two stride-2
/// temporal convolutions bring `4T` steps to `T`, then stride-2 levels
/// build the skip pyramid and the bottleneck.
pub fn audio_encoder(tape: &mut Tape, g: &Bound, cfg: &ModelConfig, spec: Var) -> Result<AudioEncoding> {
    let shape = tape.shape(spec).to_vec();
    if shape.len() != 4 || shape[1] != 1 {
        return Err(Error::Invalid(format!(
            "spectrogram input must be [N, 1, mel, time], got {shape:?}"
        )));
    }
    if shape[2] != cfg.n_mels {
        return Err(Error::Shape {
            axis: "mel",
            expected: cfg.n_mels,
            actual: shape[2],
        });
    }
    let step_multiple = 4 * cfg.frame_multiple();
    if shape[3] == 0 || !shape[3].is_multiple_of(step_multiple) {
        return Err(Error::Invalid(format!(
            "time axis: {} spectrogram steps is not a positive multiple of {step_multiple}",
            shape[3]
        )));
    }
    let (n, steps) = (shape[0], shape[3]);

    let mut h = spec;
    for i in 0..cfg.mel_blocks() {
        let name = format!("audio.mel{i}");
        h = tape.conv2d(h, g.get(&format!("{name}.w")), g.get(&format!("{name}.b")), MEL_DOWN);
        if i > 0 {
            h = tape.channel_norm(h, g.get(&format!("{name}.n.g")), g.get(&format!("{name}.n.beta")));
        }
        h = tape.leaky_relu(h, LEAKY_SLOPE);
    }
    let channels = tape.shape(h)[1];
    h = tape.reshape(h, &[n, channels, steps]);
    for j in 0..2 {
        h = block1d(tape, g, &format!("audio.time{j}"), h, DOWN, true);
    }
    let mut skips = vec![block1d(tape, g, "audio.level0", h, SAME, true)];
    for lev in 1..cfg.n_temporal_levels {
        let prev = *skips.last().unwrap();
        skips.push(block1d(tape, g, &format!("audio.level{lev}"), prev, DOWN, true));
    }
    let bottleneck = block1d(
        tape,
        g,
        &format!("audio.level{}", cfg.n_temporal_levels),
        *skips.last().unwrap(),
        DOWN,
        true,
    );
    Ok(AudioEncoding { skips, bottleneck })
}

fn check_reference(tape: &Tape, k: Var) -> Result<()> {
    let shape = tape.shape(k);
    if shape.len() != 2 || shape[1] != FLAT_DIM {
        return Err(Error::Shape {
            axis: "reference keypoints",
            expected: FLAT_DIM,
            actual: shape.last().copied().unwrap_or(0),
        });
    }
    if !tape.value(k).is_finite() {
        return Err(Error::NonFinite("reference keypoints".into()));
    }
    Ok(())
}

fn mlp(tape: &mut Tape, p: &Bound, prefix: &str, x: Var) -> Var {
    let mut h = x;
    for i in 0..3 {
        h = tape.linear(
            h,
            p.get(&format!("{prefix}.fc{i}.w")),
            p.get(&format!("{prefix}.fc{i}.b")),
        );
        if i < 2 {
            h = tape.leaky_relu(h, LEAKY_SLOPE);
        }
    }
    h
}

/// `[N, 136] -> [N, latent_pv_dim]`.
pub fn pv_encoder(tape: &mut Tape, g: &Bound, k: Var) -> Result<Var> {
    check_reference(tape, k)?;
    Ok(mlp(tape, g, "pv", k))
}

/// `[N, 136] -> [N, latent_piv_dim]`, unit L2 norm per row.
pub fn piv_encoder(tape: &mut Tape, e: &Bound, k: Var) -> Result<Var> {
    check_reference(tape, k)?;
    let h = mlp(tape, e, "piv", k);
    Ok(tape.l2_normalize(h))
}

fn norm_block(tape: &mut Tape, g: &Bound, name: &str, h: Var) -> Var {
    let h = tape.channel_norm(h, g.get(&format!("{name}.n.g")), g.get(&format!("{name}.n.beta")));
    tape.leaky_relu(h, LEAKY_SLOPE)
}

/// Conditions the bottleneck on both latents, upsamples level by level
/// with skip concatenation, and projects to 136 channels. Output is
/// `[N, T, 136]` in standardized keypoint space.
pub fn decoder(tape: &mut Tape, g: &Bound, cfg: &ModelConfig, audio: &AudioEncoding, pv: Var, piv: Var) -> Result<Var> {
    let bshape = tape.shape(audio.bottleneck).to_vec();
    let (n, len) = (bshape[0], bshape[2]);
    for (var, dim, axis) in [
        (pv, cfg.latent_pv_dim, "pv latent"),
        (piv, cfg.latent_piv_dim, "piv latent"),
    ] {
        let s = tape.shape(var);
        if s.len() != 2 || s[0] != n || s[1] != dim {
            return Err(Error::Shape {
                axis,
                expected: dim,
                actual: s.last().copied().unwrap_or(0),
            });
        }
    }
    if audio.skips.len() != cfg.n_temporal_levels {
        return Err(Error::Shape {
            axis: "skip levels",
            expected: cfg.n_temporal_levels,
            actual: audio.skips.len(),
        });
    }
    let pv_t = tape.broadcast(pv, 2, len);
    let piv_t = tape.broadcast(piv, 2, len);
    let z = tape.concat1(&[audio.bottleneck, pv_t, piv_t]);
    let mut h = block1d(tape, g, "dec.in", z, SAME, true);
    for lev in (0..cfg.n_temporal_levels).rev() {
        let up = format!("dec.up{lev}");
        h = tape.conv_transpose1d(h, g.get(&format!("{up}.w")), g.get(&format!("{up}.b")), DOWN);
        h = norm_block(tape, g, &up, h);
        let skip = audio.skips[lev];
        if tape.shape(h)[2] != tape.shape(skip)[2] {
            return Err(Error::Shape {
                axis: "time",
                expected: tape.shape(skip)[2],
                actual: tape.shape(h)[2],
            });
        }
        h = tape.concat1(&[h, skip]);
        h = block1d(tape, g, &format!("dec.fuse{lev}"), h, SAME, true);
    }
    let out = tape.conv1d(h, g.get("dec.out.w"), g.get("dec.out.b"), POINTWISE);
    Ok(tape.transpose12(out))
}

/// Everything the generator consumes for one batch.
pub struct GeneratorInputs {
    /// `[N, 1, n_mels, 4T]`
    pub spectrogram: Var,
    /// `[N, 136]` standardized reference frames
    pub reference: Var,
}

/// `G(s, k)`: returns `[N, T, 136]`. `piv` may be `None` unless
/// `cond == Conditioning::Full`.
pub fn generator(
    tape: &mut Tape,
    g: &Bound,
    piv: Option<&Bound>,
    cfg: &ModelConfig,
    inputs: &GeneratorInputs,
    cond: Conditioning,
) -> Result<Var> {
    let audio = audio_encoder(tape, g, cfg, inputs.spectrogram)?;
    check_reference(tape, inputs.reference)?;
    let n = tape.shape(inputs.reference)[0];
    let pv = match cond {
        Conditioning::AudioOnly => tape.constant(Tensor::zeros(&[n, cfg.latent_pv_dim])),
        _ => pv_encoder(tape, g, inputs.reference)?,
    };
    let piv_latent = match (cond, piv) {
        (Conditioning::Full, Some(e)) => piv_encoder(tape, e, inputs.reference)?,
        (Conditioning::Full, None) => return Err(Error::Invalid("full conditioning needs the PIV encoder".into())),
        _ => tape.constant(Tensor::zeros(&[n, cfg.latent_piv_dim])),
    };
    decoder(tape, g, cfg, &audio, pv, piv_latent)
}

/// Scores `[N, T, 136]` sequences from their frame-to-frame displacements;
/// returns `[N]`, the mean of the per-patch scores.
pub fn discriminator(tape: &mut Tape, d: &Bound, seq: Var) -> Result<Var> {
    let shape = tape.shape(seq).to_vec();
    if shape.len() != 3 || shape[2] != FLAT_DIM {
        return Err(Error::Shape {
            axis: "keypoint channels",
            expected: FLAT_DIM,
            actual: shape.last().copied().unwrap_or(0),
        });
    }
    if shape[1] < 2 {
        return Err(Error::Invalid(format!(
            "discriminator needs at least 2 frames, got {}",
            shape[1]
        )));
    }
    let x = tape.transpose12(seq);
    let mut h = tape.time_diff(x);
    for i in 0..3 {
        h = block1d(tape, d, &format!("disc.down{i}"), h, DOWN, i > 0);
    }
    let patches = tape.conv1d(h, d.get("disc.patch.w"), d.get("disc.patch.b"), SAME);
    let score = tape.mean_axis(patches, 2);
    Ok(tape.reshape(score, &[shape[0]]))
}

/// Gradient-free conveniences over plain tensors.
impl ModelParams {
    /// Returns the skip pyramid (level 0 first) and the bottleneck.
    pub fn audio_features(&self, spectrogram: &Tensor) -> Result<(Vec<Tensor>, Tensor)> {
        let mut tape = Tape::new();
        let g = self.generator.bind(&mut tape, false);
        let s = tape.constant(spectrogram.clone());
        let enc = audio_encoder(&mut tape, &g, &self.config, s)?;
        let skips = enc.skips.iter().map(|&v| tape.value(v).clone()).collect();
        Ok((skips, tape.value(enc.bottleneck).clone()))
    }

    pub fn pv_latent(&self, reference: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let g = self.generator.bind(&mut tape, false);
        let k = tape.constant(reference.clone());
        let out = pv_encoder(&mut tape, &g, k)?;
        Ok(tape.value(out).clone())
    }

    pub fn piv_latent(&self, reference: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let e = self.piv.bind(&mut tape, false);
        let k = tape.constant(reference.clone());
        let out = piv_encoder(&mut tape, &e, k)?;
        Ok(tape.value(out).clone())
    }

    pub fn generate(&self, spectrogram: &Tensor, reference: &Tensor, cond: Conditioning) -> Result<Tensor> {
        let mut tape = Tape::new();
        let g = self.generator.bind(&mut tape, false);
        let e = self.piv.bind(&mut tape, false);
        let inputs = GeneratorInputs {
            spectrogram: tape.constant(spectrogram.clone()),
            reference: tape.constant(reference.clone()),
        };
        let out = generator(&mut tape, &g, Some(&e), &self.config, &inputs, cond)?;
        Ok(tape.value(out).clone())
    }

    pub fn discriminate(&self, seq: &Tensor) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let d = self.discriminator.bind(&mut tape, false);
        let x = tape.constant(seq.clone());
        let out = discriminator(&mut tape, &d, x)?;
        Ok(tape.value(out).data().to_vec())
    }
}
