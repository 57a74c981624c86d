//! Loss terms for the generator, the PIV encoder and the discriminator.
//!
//! Each term exists twice: a plain function over values (one sample) and a
//! tape form over batches used in training. Batched forms average the
//! per-sample values.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Tape, Var};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub w_adv: f64,
    pub w_reg: f64,
    pub w_piv_gen: f64,
    pub w_piv_piv: f64,
    /// Triplet margin on unit-norm encodings.
    pub margin: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            w_adv: 1.0,
            w_reg: 1.0,
            w_piv_gen: 1.0,
            w_piv_piv: 1.0,
            margin: 0.2,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let w = [self.w_adv, self.w_reg, self.w_piv_gen, self.w_piv_piv];
        if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::Invalid(format!(
                "loss weights must be finite and >= 0: {self:?}"
            )));
        }
        if !(self.margin.is_finite() && self.margin > 0.0) {
            return Err(Error::Invalid(format!(
                "triplet margin must be positive, got {}",
                self.margin
            )));
        }
        Ok(())
    }
}

/// Unweighted loss values of one step.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossComponents {
    pub l_adv: f64,
    pub l_reg: f64,
    pub l_piv_gen: f64,
    pub l_piv_piv: f64,
    pub l_d: f64,
}

/// `w_adv * L_adv + w_reg * L_reg + w_piv_gen * L_piv_gen`.
pub fn generator_total(c: &LossComponents, w: &LossWeights) -> f64 {
    w.w_adv * c.l_adv + w.w_reg * c.l_reg + w.w_piv_gen * c.l_piv_gen
}

/// `w_reg * L_reg + w_adv * L_adv + w_piv_piv * L_piv_piv`.
pub fn piv_total(c: &LossComponents, w: &LossWeights) -> f64 {
    w.w_reg * c.l_reg + w.w_adv * c.l_adv + w.w_piv_piv * c.l_piv_piv
}

/// Least-squares generator term `(1 - D(y_hat))^2`.
pub fn adversarial_gen_loss(d_score_fake: f64) -> f64 {
    (1.0 - d_score_fake).powi(2)
}

/// `(1 - D(y))^2 + D(y_hat)^2`.
pub fn discriminator_loss(d_score_real: f64, d_score_fake: f64) -> f64 {
    (1.0 - d_score_real).powi(2) + d_score_fake.powi(2)
}

fn same_len(a: &[f64], b: &[f64], axis: &'static str) -> Result<()> {
    if a.len() != b.len() {
        return Err(Error::Shape {
            axis,
            expected: a.len(),
            actual: b.len(),
        });
    }
    Ok(())
}

/// Mean absolute difference over all `T x 136` entries.
pub fn regression_loss(y: &[f64], y_hat: &[f64]) -> Result<f64> {
    same_len(y, y_hat, "keypoint sequence")?;
    if y.is_empty() {
        return Err(Error::Empty("empty keypoint sequence"));
    }
    Ok(y.iter().zip(y_hat).map(|(a, b)| (a - b).abs()).sum::<f64>() / y.len() as f64)
}

/// Squared L2 distance between `e_k` and the frame-average of
/// `e_frames` (`[T x latent]`, row-major).
pub fn piv_gen_loss(e_k: &[f64], e_frames: &[f64]) -> Result<f64> {
    let d = e_k.len();
    if d == 0 || e_frames.is_empty() || !e_frames.len().is_multiple_of(d) {
        return Err(Error::Shape {
            axis: "latent",
            expected: d,
            actual: e_frames.len(),
        });
    }
    let t = (e_frames.len() / d) as f64;
    let mut avg = vec![0.0; d];
    for row in e_frames.chunks_exact(d) {
        for (a, v) in avg.iter_mut().zip(row) {
            *a += v / t;
        }
    }
    Ok(e_k.iter().zip(&avg).map(|(a, b)| (a - b).powi(2)).sum())
}

/// Root-mean-squared coordinate difference.
pub fn rms_distance(a: &[f64], b: &[f64]) -> f64 {
    (a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64).sqrt()
}

pub fn triplet_from_distances(d_pos: f64, d_neg: f64, margin: f64) -> f64 {
    (d_pos - d_neg + margin).max(0.0)
}

/// Anchor `e_k`, positives the ground-truth frame encodings, negatives the
/// generated frame encodings; averaged over frames.
pub fn piv_triplet_loss(e_k: &[f64], e_y: &[f64], e_y_hat: &[f64], margin: f64) -> Result<f64> {
    let d = e_k.len();
    same_len(e_y, e_y_hat, "frame encodings")?;
    if d == 0 || e_y.is_empty() || !e_y.len().is_multiple_of(d) {
        return Err(Error::Shape {
            axis: "latent",
            expected: d,
            actual: e_y.len(),
        });
    }
    let t = e_y.len() / d;
    let total: f64 = e_y
        .chunks_exact(d)
        .zip(e_y_hat.chunks_exact(d))
        .map(|(pos, neg)| triplet_from_distances(rms_distance(e_k, pos), rms_distance(e_k, neg), margin))
        .sum();
    Ok(total / t as f64)
}

/// Tape forms over batches.
pub mod graph {
    use super::*;

    fn check(tape: &Tape, a: Var, b: Var, axis: &'static str) -> Result<()> {
        if tape.shape(a) != tape.shape(b) {
            return Err(Error::Shape {
                axis,
                expected: tape.value(a).len(),
                actual: tape.value(b).len(),
            });
        }
        Ok(())
    }

    /// Scores `[N]` -> mean of `(1 - s)^2`.
    pub fn adversarial_gen(tape: &mut Tape, fake: Var) -> Var {
        let neg = tape.scale(fake, -1.0);
        let gap = tape.add_scalar(neg, 1.0);
        let sq = tape.square(gap);
        tape.mean(sq)
    }

    pub fn discriminator(tape: &mut Tape, real: Var, fake: Var) -> Var {
        let real_term = adversarial_gen(tape, real);
        let sq = tape.square(fake);
        let fake_term = tape.mean(sq);
        tape.add(real_term, fake_term)
    }

    pub fn regression(tape: &mut Tape, y: Var, y_hat: Var) -> Result<Var> {
        check(tape, y, y_hat, "keypoint sequence")?;
        let diff = tape.sub(y, y_hat);
        let abs = tape.abs(diff);
        Ok(tape.mean(abs))
    }

    /// `e_k [N, L]`, `e_frames [N, T, L]`.
    pub fn piv_gen(tape: &mut Tape, e_k: Var, e_frames: Var) -> Result<Var> {
        let avg = tape.mean_axis(e_frames, 1);
        check(tape, e_k, avg, "latent")?;
        let latent = tape.shape(e_k)[1] as f64;
        let diff = tape.sub(e_k, avg);
        let sq = tape.square(diff);
        let per_dim = tape.mean(sq);
        // mean over N*L entries, times L, is the batch mean of squared norms
        Ok(tape.scale(per_dim, latent))
    }

    fn rms(tape: &mut Tape, anchor: Var, frames: Var) -> Var {
        let diff = tape.sub(anchor, frames);
        let sq = tape.square(diff);
        let ms = tape.mean_axis(sq, 2);
        tape.sqrt(ms)
    }

    /// `e_k [N, L]`, `e_y` and `e_y_hat` `[N, T, L]`.
    pub fn piv_triplet(tape: &mut Tape, e_k: Var, e_y: Var, e_y_hat: Var, margin: f64) -> Result<Var> {
        check(tape, e_y, e_y_hat, "frame encodings")?;
        let t = tape.shape(e_y)[1];
        let anchor = tape.broadcast(e_k, 1, t);
        check(tape, anchor, e_y, "latent")?;
        let d_pos = rms(tape, anchor, e_y);
        let d_neg = rms(tape, anchor, e_y_hat);
        let gap = tape.sub(d_pos, d_neg);
        let shifted = tape.add_scalar(gap, margin);
        let hinge = tape.relu(shifted);
        Ok(tape.mean(hinge))
    }
}
