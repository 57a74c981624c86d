use std::ops::Range;
use std::path::{Path, PathBuf};

use image::{Rgb, RgbImage};

use super::{KeypointFrame, KeypointSequence};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum FacePart {
    Chin,
    RightBrow,
    LeftBrow,
    Nose,
    RightEye,
    LeftEye,
    OuterLips,
    InnerLips,
}

impl FacePart {
    pub const ALL: [FacePart; 8] = [
        FacePart::Chin,
        FacePart::RightBrow,
        FacePart::LeftBrow,
        FacePart::Nose,
        FacePart::RightEye,
        FacePart::LeftEye,
        FacePart::OuterLips,
        FacePart::InnerLips,
    ];

    pub fn indices(self) -> Range<usize> {
        match self {
            FacePart::Chin => 0..17,
            FacePart::RightBrow => 17..22,
            FacePart::LeftBrow => 22..27,
            FacePart::Nose => 27..36,
            FacePart::RightEye => 36..42,
            FacePart::LeftEye => 42..48,
            FacePart::OuterLips => 48..60,
            FacePart::InnerLips => 60..68,
        }
    }

    /// Closed parts connect their last point back to the first.
    pub fn is_closed(self) -> bool {
        matches!(
            self,
            FacePart::RightEye | FacePart::LeftEye | FacePart::OuterLips | FacePart::InnerLips
        )
    }

    pub fn of_point(index: usize) -> Option<FacePart> {
        Self::ALL.into_iter().find(|p| p.indices().contains(&index))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Palette {
    pub chin: Rgb<u8>,
    pub brows: Rgb<u8>,
    pub nose: Rgb<u8>,
    pub eyes: Rgb<u8>,
    pub outer_lips: Rgb<u8>,
    pub inner_lips: Rgb<u8>,
}

impl Default for Palette {
    fn default() -> Self {
        Self {
            chin: Rgb([128, 128, 128]),
            brows: Rgb([0, 255, 0]),
            nose: Rgb([0, 0, 255]),
            eyes: Rgb([255, 0, 0]),
            outer_lips: Rgb([255, 255, 0]),
            inner_lips: Rgb([255, 0, 255]),
        }
    }
}

impl Palette {
    pub fn color(&self, part: FacePart) -> Rgb<u8> {
        match part {
            FacePart::Chin => self.chin,
            FacePart::RightBrow | FacePart::LeftBrow => self.brows,
            FacePart::Nose => self.nose,
            FacePart::RightEye | FacePart::LeftEye => self.eyes,
            FacePart::OuterLips => self.outer_lips,
            FacePart::InnerLips => self.inner_lips,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Canvas {
    pub width: u32,
    pub height: u32,
}

impl Canvas {
    pub const VOX: Canvas = Canvas {
        width: 224,
        height: 224,
    };
}

fn put(img: &mut RgbImage, x: i64, y: i64, color: Rgb<u8>) {
    if x >= 0 && y >= 0 && (x as u64) < img.width() as u64 && (y as u64) < img.height() as u64 {
        img.put_pixel(x as u32, y as u32, color);
    }
}

fn draw_line(img: &mut RgbImage, from: (i64, i64), to: (i64, i64), color: Rgb<u8>) {
    let (mut x, mut y) = from;
    let dx = (to.0 - x).abs();
    let dy = -(to.1 - y).abs();
    let sx = if x < to.0 { 1 } else { -1 };
    let sy = if y < to.1 { 1 } else { -1 };
    let mut err = dx + dy;
    loop {
        put(img, x, y, color);
        if (x, y) == to {
            break;
        }
        let e2 = 2 * err;
        if e2 >= dy {
            err += dy;
            x += sx;
        }
        if e2 <= dx {
            err += dx;
            y += sy;
        }
    }
}

fn to_pixel(p: [f64; 2]) -> (i64, i64) {
    // clamp keeps far off-canvas points from overflowing the line walker
    let lim = 1.0e6;
    (
        p[0].round().clamp(-lim, lim) as i64,
        p[1].round().clamp(-lim, lim) as i64,
    )
}

/// Draws each facial part as a polyline in its palette color on black.
/// Keypoints are plotted last, so the pixel under a keypoint carries the
/// color of the part that point belongs to.
pub fn rasterize_frame(frame: &KeypointFrame, canvas: Canvas, palette: &Palette) -> Result<RgbImage> {
    if canvas.width == 0 || canvas.height == 0 {
        return Err(Error::Invalid(format!(
            "canvas must be positive, got {}x{}",
            canvas.width, canvas.height
        )));
    }
    let mut img = RgbImage::new(canvas.width, canvas.height);
    let pts = frame.points();
    for part in FacePart::ALL {
        let color = palette.color(part);
        let idx = part.indices();
        for i in idx.start..idx.end - 1 {
            draw_line(&mut img, to_pixel(pts[i]), to_pixel(pts[i + 1]), color);
        }
        if part.is_closed() {
            draw_line(&mut img, to_pixel(pts[idx.end - 1]), to_pixel(pts[idx.start]), color);
        }
    }
    for part in FacePart::ALL {
        let color = palette.color(part);
        for i in part.indices() {
            let (x, y) = to_pixel(pts[i]);
            put(&mut img, x, y, color);
        }
    }
    Ok(img)
}

/// Rasterizes every output frame. When `fps` differs from the sequence
/// rate, frames are resampled by nearest preceding source frame.
pub fn render_frames(seq: &KeypointSequence, canvas: Canvas, palette: &Palette, fps: f64) -> Result<Vec<RgbImage>> {
    if !(fps.is_finite() && fps > 0.0) {
        return Err(Error::Invalid(format!("fps must be positive, got {fps}")));
    }
    let n_out = ((seq.len() as f64 * fps / seq.fps()).round() as usize).max(1);
    (0..n_out)
        .map(|i| {
            let src = if fps == seq.fps() {
                i
            } else {
                ((i as f64 * seq.fps() / fps).floor() as usize).min(seq.len() - 1)
            };
            rasterize_frame(&seq.frames()[src], canvas, palette).map_err(|e| Error::Render {
                index: i,
                source: Box::new(e),
            })
        })
        .collect()
}

/// Writes `000000.png`, `000001.png`, ... into `out_dir`.
pub fn render_sequence(
    seq: &KeypointSequence,
    canvas: Canvas,
    palette: &Palette,
    fps: f64,
    out_dir: &Path,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let frames = render_frames(seq, canvas, palette, fps)?;
    frames
        .iter()
        .enumerate()
        .map(|(i, img)| {
            let path = out_dir.join(format!("{i:06}.png"));
            img.save_with_format(&path, image::ImageFormat::Png)
                .map_err(|e| Error::Render {
                    index: i,
                    source: Box::new(e.into()),
                })?;
            Ok(path)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keypoints::{Space, DEFAULT_FPS, NUM_POINTS};

    fn spread_frame() -> KeypointFrame {
        // each point on its own row so no two parts share a pixel
        let pts: Vec<[f64; 2]> = (0..NUM_POINTS)
            .map(|i| [20.0 + (i % 7) as f64 * 25.0, 10.0 + i as f64 * 3.0])
            .collect();
        KeypointFrame::new(&pts).unwrap()
    }

    #[test]
    fn off_canvas_points_give_black_image() {
        let pts = vec![[-50.0, -50.0]; NUM_POINTS];
        let img = rasterize_frame(&KeypointFrame::new(&pts).unwrap(), Canvas::VOX, &Palette::default()).unwrap();
        assert!(img.pixels().all(|p| p.0 == [0, 0, 0]));
    }

    #[test]
    fn rendering_is_deterministic() {
        let f = spread_frame();
        let a = rasterize_frame(&f, Canvas::VOX, &Palette::default()).unwrap();
        let b = rasterize_frame(&f, Canvas::VOX, &Palette::default()).unwrap();
        assert_eq!(a.as_raw(), b.as_raw());
    }

    #[test]
    fn keypoint_pixels_carry_part_color() {
        let f = spread_frame();
        let palette = Palette::default();
        let img = rasterize_frame(&f, Canvas::VOX, &palette).unwrap();
        for (i, p) in f.points().iter().enumerate() {
            let part = FacePart::of_point(i).unwrap();
            let px = img.get_pixel(p[0].round() as u32, p[1].round() as u32);
            assert_eq!(*px, palette.color(part), "point {i}");
        }
    }

    #[test]
    fn closed_parts_draw_closing_segment() {
        // right eye as a horizontal segment pair; the closing edge runs 41 -> 36
        let mut pts = vec![[200.0, 200.0]; NUM_POINTS];
        for (k, i) in (36..42).enumerate() {
            pts[i] = [10.0 + k as f64, 100.0];
        }
        pts[36] = [10.0, 100.0];
        pts[41] = [10.0, 120.0];
        let img = rasterize_frame(&KeypointFrame::new(&pts).unwrap(), Canvas::VOX, &Palette::default()).unwrap();
        assert_eq!(*img.get_pixel(10, 110), Palette::default().eyes);
    }

    #[test]
    fn zero_canvas_is_rejected() {
        let canvas = Canvas { width: 0, height: 10 };
        assert!(rasterize_frame(&spread_frame(), canvas, &Palette::default()).is_err());
    }

    #[test]
    fn frame_counts_follow_fps() {
        let seq = KeypointSequence::new(vec![spread_frame(); 64], DEFAULT_FPS, Space::RawPixel).unwrap();
        let canvas = Canvas { width: 32, height: 32 };
        let frames = render_frames(&seq, canvas, &Palette::default(), DEFAULT_FPS).unwrap();
        assert_eq!(frames.len(), 64);
        assert!(frames.windows(2).all(|w| w[0].as_raw() == w[1].as_raw()));
        assert_eq!(
            render_frames(&seq, canvas, &Palette::default(), 50.0).unwrap().len(),
            128
        );
    }
}
