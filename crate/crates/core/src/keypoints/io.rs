//! `VOXKP001` keypoint files: magic, little-endian `u32` frame count, then
//! `T x 68 x 2` little-endian `f32` coordinates in `(x, y)` order.

use std::path::Path;

use super::{KeypointFrame, KeypointSequence, Space, DEFAULT_FPS, NUM_POINTS};
use crate::error::{Error, Result};

pub const KEYPOINT_MAGIC: &[u8; 8] = b"VOXKP001";
const HEADER_LEN: usize = 12;

pub fn encode_keypoints(seq: &KeypointSequence) -> Vec<u8> {
    let mut out = Vec::with_capacity(HEADER_LEN + seq.len() * NUM_POINTS * 8);
    out.extend_from_slice(KEYPOINT_MAGIC);
    out.extend_from_slice(&(seq.len() as u32).to_le_bytes());
    for frame in seq.frames() {
        for [x, y] in frame.points() {
            out.extend_from_slice(&(*x as f32).to_le_bytes());
            out.extend_from_slice(&(*y as f32).to_le_bytes());
        }
    }
    out
}

/// Parses a keypoint buffer. `path` is only used to label errors.
pub fn decode_keypoints(bytes: &[u8], space: Space, path: &Path) -> Result<KeypointSequence> {
    if bytes.len() < HEADER_LEN || &bytes[..8] != KEYPOINT_MAGIC {
        return Err(Error::format(path, "missing VOXKP001 header"));
    }
    let n_frames = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if n_frames == 0 {
        return Err(Error::format(path, "keypoint file declares zero frames"));
    }
    let body = &bytes[HEADER_LEN..];
    let expected = n_frames * NUM_POINTS * 2 * 4;
    if body.len() != expected {
        return Err(Error::format(
            path,
            format!(
                "expected {expected} coordinate bytes for {n_frames} frames of {NUM_POINTS} points, found {}",
                body.len()
            ),
        ));
    }
    let coords: Vec<f64> = body
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()) as f64)
        .collect();
    let frames = coords
        .chunks_exact(NUM_POINTS * 2)
        .enumerate()
        .map(|(t, c)| KeypointFrame::unflatten(c).map_err(|e| Error::format(path, format!("frame {t}: {e}"))))
        .collect::<Result<Vec<_>>>()?;
    KeypointSequence::new(frames, DEFAULT_FPS, space)
}

pub fn read_keypoints(path: &Path, space: Space) -> Result<KeypointSequence> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_keypoints(&bytes, space, path)
}

pub fn write_keypoints(path: &Path, seq: &KeypointSequence) -> Result<()> {
    std::fs::write(path, encode_keypoints(seq)).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn f32_grid_sequences_round_trip_exactly(
            coords in prop::collection::vec(-1.0e4f32..1.0e4, NUM_POINTS * 2 * 3)
        ) {
            let flat: Vec<f64> = coords.iter().map(|&c| c as f64).collect();
            let seq = KeypointSequence::from_flat(&flat, DEFAULT_FPS, Space::RawPixel).unwrap();
            let bytes = encode_keypoints(&seq);
            let back = decode_keypoints(&bytes, Space::RawPixel, Path::new("mem")).unwrap();
            prop_assert_eq!(&back, &seq);
            prop_assert_eq!(encode_keypoints(&back), bytes);
        }
    }

    #[test]
    fn rejects_67_point_payload() {
        let mut bytes = KEYPOINT_MAGIC.to_vec();
        bytes.extend_from_slice(&2u32.to_le_bytes());
        bytes.extend(std::iter::repeat_n(0u8, 2 * 67 * 2 * 4));
        let err = decode_keypoints(&bytes, Space::RawPixel, Path::new("short.kp")).unwrap_err();
        assert!(err.to_string().contains("short.kp"));
        assert!(err.is_validation());
    }

    #[test]
    fn rejects_bad_magic_and_nan() {
        assert!(decode_keypoints(b"NOTKP001\0\0\0\0", Space::RawPixel, Path::new("x")).is_err());
        let mut bytes = KEYPOINT_MAGIC.to_vec();
        bytes.extend_from_slice(&1u32.to_le_bytes());
        for i in 0..NUM_POINTS * 2 {
            let v = if i == 7 { f32::NAN } else { 1.0 };
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert!(decode_keypoints(&bytes, Space::RawPixel, Path::new("x")).is_err());
    }
}
