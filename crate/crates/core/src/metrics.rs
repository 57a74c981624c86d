//! Average L1 and percentage of correct keypoints (PCK).

use crate::error::{Error, Result};
use crate::keypoints::{bounding_box, KeypointSequence, NUM_POINTS};

pub const DEFAULT_PCK_ALPHA: f64 = 0.02;

fn check_pair(y: &KeypointSequence, y_hat: &KeypointSequence) -> Result<()> {
    if y.len() != y_hat.len() {
        return Err(Error::Shape {
            axis: "frames",
            expected: y.len(),
            actual: y_hat.len(),
        });
    }
    if y.space() != y_hat.space() {
        return Err(Error::Space {
            expected: y.space(),
            actual: y_hat.space(),
        });
    }
    if y.is_empty() {
        return Err(Error::Empty("keypoint sequences have no frames"));
    }
    Ok(())
}

/// Mean absolute coordinate error over all frames and points.
pub fn average_l1(y: &KeypointSequence, y_hat: &KeypointSequence) -> Result<f64> {
    check_pair(y, y_hat)?;
    let (a, b) = (y.to_flat(), y_hat.to_flat());
    Ok(a.iter().zip(&b).map(|(p, q)| (p - q).abs()).sum::<f64>() / a.len() as f64)
}

/// Threshold `alpha * max(h, w)` from the ground-truth bounding box.
pub fn pck_threshold(y: &KeypointSequence, alpha: f64) -> Result<f64> {
    let extent = bounding_box(y).max_extent();
    if !(extent > 0.0) {
        return Err(Error::Invalid(
            "degenerate ground truth: bounding box has zero extent".into(),
        ));
    }
    Ok(alpha * extent)
}

/// Percentage of predicted points within the threshold of the ground truth.
/// A distance exactly equal to the threshold counts as correct.
pub fn pck(y: &KeypointSequence, y_hat: &KeypointSequence, alpha: f64) -> Result<f64> {
    check_pair(y, y_hat)?;
    if !(alpha.is_finite() && alpha > 0.0) {
        return Err(Error::Invalid(format!("pck alpha must be positive, got {alpha}")));
    }
    let tau = pck_threshold(y, alpha)?;
    let (a, b) = (y.to_flat(), y_hat.to_flat());
    let correct = a
        .chunks_exact(2)
        .zip(b.chunks_exact(2))
        .filter(|(p, q)| point_distance(p, q) <= tau)
        .count();
    Ok(100.0 * correct as f64 / (y.len() * NUM_POINTS) as f64)
}

fn point_distance(p: &[f64], q: &[f64]) -> f64 {
    let (dx, dy) = (p[0] - q[0], p[1] - q[1]);
    (dx * dx + dy * dy).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoints::{KeypointFrame, Space};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn seq(flat: Vec<f64>) -> KeypointSequence {
        KeypointSequence::from_flat(&flat, 25.0, Space::BaseNormalized).unwrap()
    }

    fn random_seq(rng: &mut ChaCha8Rng, t: usize, scale: f64) -> KeypointSequence {
        seq((0..t * 136).map(|_| rng.random_range(-scale..scale)).collect())
    }

    #[test]
    fn l1_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let y = random_seq(&mut rng, 4, 10.0);
        assert_eq!(average_l1(&y, &y).unwrap(), 0.0);
        let shifted = seq(y.to_flat().iter().map(|v| v + 1.0).collect());
        assert!((average_l1(&y, &shifted).unwrap() - 1.0).abs() < 1e-12);
        let other = random_seq(&mut rng, 4, 10.0);
        let mut total = 0.0;
        for (fa, fb) in y.frames().iter().zip(other.frames()) {
            for p in 0..68 {
                for c in 0..2 {
                    total += (fa.point(p)[c] - fb.point(p)[c]).abs();
                }
            }
        }
        assert!((average_l1(&y, &other).unwrap() - total / (4.0 * 136.0)).abs() < 1e-12);
        assert!(average_l1(&y, &random_seq(&mut rng, 3, 1.0)).is_err());
    }

    #[test]
    fn pck_threshold_boundary() {
        // bbox max extent 100 -> tau = 2
        let mut pts = [[0.0, 0.0]; 68];
        pts[1] = [100.0, 40.0];
        let y = KeypointSequence::new(vec![KeypointFrame::new(&pts).unwrap()], 25.0, Space::BaseNormalized).unwrap();
        assert_eq!(pck_threshold(&y, 0.02).unwrap(), 2.0);
        let displaced = |d: f64| {
            let mut p = pts;
            p[5][1] += d;
            KeypointSequence::new(vec![KeypointFrame::new(&p).unwrap()], 25.0, Space::BaseNormalized).unwrap()
        };
        let all = 100.0;
        let one_off = 100.0 * 67.0 / 68.0;
        assert_eq!(pck(&y, &displaced(1.9), 0.02).unwrap(), all);
        assert_eq!(pck(&y, &displaced(2.0), 0.02).unwrap(), all);
        assert_eq!(pck(&y, &displaced(2.1), 0.02).unwrap(), one_off);
        assert_eq!(pck(&y, &y, 0.02).unwrap(), 100.0);
    }

    /// Independent per-point count: bounding box and distances recomputed
    /// frame by frame, point by point.
    fn brute_force_pck(y: &KeypointSequence, y_hat: &KeypointSequence, alpha: f64) -> f64 {
        let (mut x0, mut x1, mut y0, mut y1) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
        for f in y.frames() {
            for p in 0..68 {
                let [x, yy] = f.point(p);
                x0 = x0.min(x);
                x1 = x1.max(x);
                y0 = y0.min(yy);
                y1 = y1.max(yy);
            }
        }
        let tau = alpha * (x1 - x0).max(y1 - y0);
        let mut correct = 0usize;
        for (fa, fb) in y.frames().iter().zip(y_hat.frames()) {
            for p in 0..68 {
                let (a, b) = (fa.point(p), fb.point(p));
                if ((a[0] - b[0]).powi(2) + (a[1] - b[1]).powi(2)).sqrt() <= tau {
                    correct += 1;
                }
            }
        }
        100.0 * correct as f64 / (y.len() * 68) as f64
    }

    #[test]
    fn pck_matches_brute_force_on_random_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let t = 16;
        let mut boundary_hits = 0;
        for _ in 0..100 {
            // integer coordinates spanning exactly 100 px, so tau = 2
            let mut y = Vec::with_capacity(t * 136);
            for f in 0..t {
                for p in 0..68 {
                    let (x, yy) = match (f, p) {
                        (0, 0) => (0.0, 0.0),
                        (0, 1) => (100.0, 60.0),
                        _ => (rng.random_range(1..100) as f64, rng.random_range(1..60) as f64),
                    };
                    y.extend([x, yy]);
                }
            }
            let y_hat: Vec<f64> = y
                .chunks_exact(2)
                .flat_map(|p| {
                    let (dx, dy) = match rng.random_range(0..4) {
                        0 => (2.0, 0.0),
                        1 => (0.0, -2.0),
                        2 => (2.0, 1.0),
                        _ => (rng.random_range(-3.0..3.0), rng.random_range(-3.0..3.0)),
                    };
                    [p[0] + dx, p[1] + dy]
                })
                .collect();
            boundary_hits += y
                .chunks_exact(2)
                .zip(y_hat.chunks_exact(2))
                .filter(|(a, b)| point_distance(a, b) == 2.0)
                .count();
            let (y, y_hat) = (seq(y), seq(y_hat));
            assert_eq!(pck_threshold(&y, DEFAULT_PCK_ALPHA).unwrap(), 2.0);
            assert_eq!(
                pck(&y, &y_hat, DEFAULT_PCK_ALPHA).unwrap(),
                brute_force_pck(&y, &y_hat, DEFAULT_PCK_ALPHA)
            );
        }
        assert!(boundary_hits > 1000);
    }

    #[test]
    fn degenerate_ground_truth_is_rejected() {
        let y = seq(vec![3.0; 136 * 2]);
        let err = pck(&y, &y, 0.02).unwrap_err();
        assert!(err.to_string().contains("degenerate ground truth"));
    }

    proptest! {
        #[test]
        fn pck_invariances(seed in any::<u64>(), dx in -50.0f32..50.0, k in -2i32..=2) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            // f32-grid values keep shifted and power-of-two scaled distances exact
            let grid = |v: f64| v as f32 as f64;
            let y = seq((0..3 * 136).map(|_| grid(rng.random_range(-50.0..50.0))).collect());
            let y_hat = seq(y.to_flat().iter().map(|v| grid(v + rng.random_range(-1.5..1.5))).collect());
            let base = pck(&y, &y_hat, 0.02).unwrap();
            prop_assert!((0.0..=100.0).contains(&base));
            let k = 2f64.powi(k);
            let scale = |s: &KeypointSequence| seq(s.to_flat().iter().map(|v| v * k).collect());
            prop_assert_eq!(pck(&scale(&y), &scale(&y_hat), 0.02).unwrap(), base);
            let d = dx as f64;
            prop_assert_eq!(pck(&y.translated([d, -d]), &y_hat.translated([d, -d]), 0.02).unwrap(), base);
        }

        #[test]
        fn l1_symmetric_and_triangle(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b, c) = (random_seq(&mut rng, 2, 5.0), random_seq(&mut rng, 2, 5.0), random_seq(&mut rng, 2, 5.0));
            prop_assert_eq!(average_l1(&a, &b).unwrap(), average_l1(&b, &a).unwrap());
            prop_assert!(average_l1(&a, &c).unwrap() <= average_l1(&a, &b).unwrap() + average_l1(&b, &c).unwrap() + 1e-12);
        }
    }
}
