//! Static correspondence visualization: side-by-side frames with sampled
//! match lines colored by world distance.

use std::path::Path;

use super::IoError;
use crate::geometry::{CameraFrame, ColorImage};
use crate::matching::{subsample_matches, CorrespondenceSet};

/// Composes the two color images side by side and draws `sample` match
/// lines (seeded subsample). Near matches draw blue, far ones red.
pub fn compose_pair_image(
    frame_a: &CameraFrame,
    frame_b: &CameraFrame,
    corrs: &CorrespondenceSet,
    sample: usize,
    seed: u64,
) -> ColorImage {
    let w = frame_a.width() + frame_b.width();
    let h = frame_a.height().max(frame_b.height());
    let mut canvas = ColorImage::zeros(w, h);
    blit(&mut canvas, &frame_a.color, 0);
    blit(&mut canvas, &frame_b.color, frame_a.width());

    let picked = if sample > 0 && !corrs.is_empty() {
        subsample_matches(corrs, sample, seed)
    } else {
        CorrespondenceSet { matches: vec![], ..corrs.clone() }
    };
    let max_dist = picked
        .matches
        .iter()
        .map(|m| m.distance)
        .fold(0.0f32, f32::max)
        .max(1e-12);

    for m in &picked.matches {
        let t = (m.distance / max_dist).clamp(0.0, 1.0) as f64;
        let color = [
            (t * 255.0).round() as u8,
            64,
            ((1.0 - t) * 255.0).round() as u8,
        ];
        let (x0, y0) = (m.pixel_a.0 as i64, m.pixel_a.1 as i64);
        let (x1, y1) = (m.pixel_b.0 as i64 + frame_a.width() as i64, m.pixel_b.1 as i64);
        draw_line(&mut canvas, x0, y0, x1, y1, color);
        draw_dot(&mut canvas, x0, y0, color);
        draw_dot(&mut canvas, x1, y1, color);
    }
    canvas
}

/// Renders the composition and writes it as a PNG.
pub fn visualize_pair(
    frame_a: &CameraFrame,
    frame_b: &CameraFrame,
    corrs: &CorrespondenceSet,
    sample: usize,
    seed: u64,
    out: &Path,
) -> Result<(), IoError> {
    let canvas = compose_pair_image(frame_a, frame_b, corrs, sample, seed);
    let buf: image::RgbImage =
        image::ImageBuffer::from_raw(canvas.width, canvas.height, canvas.data().to_vec())
            .expect("canvas buffer size");
    buf.save(out).map_err(|e| IoError::Png { path: out.to_path_buf(), source: e })
}

fn blit(canvas: &mut ColorImage, src: &ColorImage, x_offset: u32) {
    for y in 0..src.height {
        for x in 0..src.width {
            canvas.set(x + x_offset, y, src.get(x, y));
        }
    }
}

fn draw_dot(canvas: &mut ColorImage, x: i64, y: i64, color: [u8; 3]) {
    for dy in -1..=1 {
        for dx in -1..=1 {
            put(canvas, x + dx, y + dy, color);
        }
    }
}

#[inline]
fn put(canvas: &mut ColorImage, x: i64, y: i64, color: [u8; 3]) {
    if x >= 0 && y >= 0 && (x as u32) < canvas.width && (y as u32) < canvas.height {
        canvas.set(x as u32, y as u32, color);
    }
}

/// Integer Bresenham over all octants.
fn draw_line(canvas: &mut ColorImage, x0: i64, y0: i64, x1: i64, y1: i64, color: [u8; 3]) {
    let dx = (x1 - x0).abs();
    let dy = -(y1 - y0).abs();
    let sx = if x0 < x1 { 1 } else { -1 };
    let sy = if y0 < y1 { 1 } else { -1 };
    let mut err = dx + dy;
    let (mut x, mut y) = (x0, y0);
    loop {
        put(canvas, x, y, color);
        if x == x1 && y == y1 {
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
