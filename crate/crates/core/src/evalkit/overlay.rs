use std::path::Path;

use image::{ImageFormat, Rgb, RgbImage};

use crate::error::{ensure, Error, Result};
use crate::fieldcore::{Image, Points};

const ARM: i64 = 2;
const MARK: Rgb<u8> = Rgb([255, 64, 32]);
const HIGHLIGHT: Rgb<u8> = Rgb([64, 255, 64]);

/// Grayscale PNG of `image` (min-max normalized) with a cross at every
/// landmark; indices in `highlight` get a second colour. For 3-D images
/// `slice` selects an index along the first axis and only landmarks within
/// one voxel of that slice are drawn.
pub fn render_overlay(
    image: &Image,
    landmarks: &Points,
    highlight: &[usize],
    slice: Option<usize>,
    path: impl AsRef<Path>,
) -> Result<()> {
    let g = image.grid();
    ensure!(
        landmarks.is_empty() || landmarks.dim() == g.dim(),
        Shape,
        "{}-D landmarks on a {}-D image",
        landmarks.dim(),
        g.dim()
    );
    let (plane, rows, cols, z) = match g.dim() {
        2 => (0, g.dims()[0], g.dims()[1], None),
        _ => {
            let s = slice.unwrap_or(g.dims()[0] / 2);
            ensure!(s < g.dims()[0], InvalidInput, "slice {s} out of range for depth {}", g.dims()[0]);
            (s, g.dims()[1], g.dims()[2], Some(s))
        }
    };
    let n = rows * cols;
    let values = &image.values()[plane * n..(plane + 1) * n];
    let (lo, hi) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut img = RgbImage::new(cols as u32, rows as u32);
    for (i, &v) in values.iter().enumerate() {
        let p = (255.0 * (v - lo) / span).round().clamp(0.0, 255.0) as u8;
        img.put_pixel((i % cols) as u32, (i / cols) as u32, Rgb([p, p, p]));
    }
    let off = g.dim() - 2;
    for (idx, p) in landmarks.rows().enumerate() {
        if let Some(s) = z {
            if (g.to_index(0, p[0]) - s as f64).abs() > 1.0 {
                continue;
            }
        }
        let r = g.to_index(off, p[off]).round() as i64;
        let c = g.to_index(off + 1, p[off + 1]).round() as i64;
        let colour = if highlight.contains(&idx) { HIGHLIGHT } else { MARK };
        for d in -ARM..=ARM {
            for (y, x) in [(r + d, c), (r, c + d)] {
                if (0..rows as i64).contains(&y) && (0..cols as i64).contains(&x) {
                    img.put_pixel(x as u32, y as u32, colour);
                }
            }
        }
    }
    let path = path.as_ref();
    img.save_with_format(path, ImageFormat::Png).map_err(|e| match e {
        image::ImageError::IoError(io) => Error::io(path, io),
        other => Error::InvalidInput(format!("{}: {other}", path.display())),
    })
}
