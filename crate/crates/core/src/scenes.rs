//! Procedural clean images: piecewise-smooth shapes over a gradient with
//! faint texture. Used as a self-contained toy corpus.
//!
//! Intensities stay in mid-tones (about 0.17 to 0.83) so that clipping of
//! σ = 25 noise is rare and noisy-vs-clean PSNR sits at the analytic value.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::image::ImageBuffer;

enum Shape {
    Rect { y0: f32, x0: f32, y1: f32, x1: f32 },
    Ellipse { cy: f32, cx: f32, ry: f32, rx: f32 },
}

impl Shape {
    fn contains(&self, y: f32, x: f32) -> bool {
        match *self {
            Shape::Rect { y0, x0, y1, x1 } => y >= y0 && y < y1 && x >= x0 && x < x1,
            Shape::Ellipse { cy, cx, ry, rx } => {
                ((y - cy) / ry).powi(2) + ((x - cx) / rx).powi(2) <= 1.0
            }
        }
    }
}

/// One `channels × height × width` scene, deterministic in `seed`.
pub fn scene(seed: u64, channels: usize, height: usize, width: usize) -> Result<ImageBuffer> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (height as f32, width as f32);
    let color = |rng: &mut ChaCha8Rng| -> Vec<f32> {
        (0..channels)
            .map(|_| rng.random_range(0.25..0.75))
            .collect()
    };

    let base = color(&mut rng);
    let tilt: Vec<f32> = (0..channels).map(|_| rng.random_range(0.0..0.2)).collect();
    let angle: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let (gy, gx) = (angle.sin(), angle.cos());

    let count = rng.random_range(6..14);
    let shapes: Vec<(Shape, Vec<f32>)> = (0..count)
        .map(|_| {
            let shape = if rng.random_bool(0.5) {
                let (y0, x0) = (rng.random_range(0.0..h), rng.random_range(0.0..w));
                let (dy, dx) = (
                    rng.random_range(0.1..0.5) * h,
                    rng.random_range(0.1..0.5) * w,
                );
                Shape::Rect {
                    y0,
                    x0,
                    y1: y0 + dy,
                    x1: x0 + dx,
                }
            } else {
                Shape::Ellipse {
                    cy: rng.random_range(0.0..h),
                    cx: rng.random_range(0.0..w),
                    ry: rng.random_range(0.05..0.3) * h,
                    rx: rng.random_range(0.05..0.3) * w,
                }
            };
            (shape, color(&mut rng))
        })
        .collect();

    let freq: f32 = rng.random_range(0.05..0.25);
    let amp: f32 = rng.random_range(0.0..0.03);
    let plane = height * width;
    let mut data = vec![0.0f32; channels * plane];
    for y in 0..height {
        for x in 0..width {
            let (fy, fx) = (y as f32, x as f32);
            let ramp = (gy * (fy / h - 0.5) + gx * (fx / w - 0.5)) * 0.5;
            let texture = amp * (freq * fx).sin() * (freq * 0.7 * fy).cos();
            let top = shapes.iter().rev().find(|(s, _)| s.contains(fy, fx));
            for c in 0..channels {
                let v = match top {
                    Some((_, col)) => col[c] + texture,
                    None => base[c] + tilt[c] * ramp,
                };
                data[c * plane + y * width + x] = v;
            }
        }
    }
    ImageBuffer::from_clipped(channels, height, width, data)
}
