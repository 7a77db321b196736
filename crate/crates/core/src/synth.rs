//! Seeded piecewise-smooth grayscale scenes, a stand-in corpus for desk runs.

use std::path::Path;

use image::GrayImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

enum Shape {
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64, angle: f64 },
    Rect { x0: f64, y0: f64, x1: f64, y1: f64 },
    HalfPlane { nx: f64, ny: f64, offset: f64 },
}

impl Shape {
    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Shape::Ellipse { cx, cy, rx, ry, angle } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = (c * dx + s * dy) / rx;
                let v = (-s * dx + c * dy) / ry;
                u * u + v * v <= 1.0
            }
            Shape::Rect { x0, y0, x1, y1 } => x >= x0 && x <= x1 && y >= y0 && y <= y1,
            Shape::HalfPlane { nx, ny, offset } => nx * x + ny * y > offset,
        }
    }
}

struct Layer {
    shape: Shape,
    level: f64,
    slope: (f64, f64),
}

/// A `size x size` scene: a smooth background gradient overlaid with a few
/// flat-shaded ellipses, rectangles and half-planes. Coordinates are in
/// `[0, 1]`, so the same seed gives the same scene at every size.
pub fn scene(size: usize, seed: u64) -> GrayImage {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let base = rng.random_range(0.25..0.75);
    let grad = (rng.random_range(-0.3..0.3), rng.random_range(-0.3..0.3));
    let count = rng.random_range(3..8);
    let layers: Vec<Layer> = (0..count)
        .map(|_| {
            let shape = match rng.random_range(0..3) {
                0 => Shape::Ellipse {
                    cx: rng.random_range(0.0..1.0),
                    cy: rng.random_range(0.0..1.0),
                    rx: rng.random_range(0.08..0.4),
                    ry: rng.random_range(0.08..0.4),
                    angle: rng.random_range(0.0..std::f64::consts::PI),
                },
                1 => {
                    let (x0, y0) = (rng.random_range(0.0..0.8), rng.random_range(0.0..0.8));
                    Shape::Rect {
                        x0,
                        y0,
                        x1: x0 + rng.random_range(0.1..0.5),
                        y1: y0 + rng.random_range(0.1..0.5),
                    }
                }
                _ => {
                    let t: f64 = rng.random_range(0.0..std::f64::consts::TAU);
                    Shape::HalfPlane {
                        nx: t.cos(),
                        ny: t.sin(),
                        offset: rng.random_range(0.2..0.9),
                    }
                }
            };
            Layer {
                shape,
                level: rng.random_range(0.0..1.0),
                slope: (rng.random_range(-0.2..0.2), rng.random_range(-0.2..0.2)),
            }
        })
        .collect();

    let scale = 1.0 / size.max(1) as f64;
    GrayImage::from_fn(size as u32, size as u32, |px, py| {
        let (x, y) = ((px as f64 + 0.5) * scale, (py as f64 + 0.5) * scale);
        let mut v = base + grad.0 * (x - 0.5) + grad.1 * (y - 0.5);
        for layer in &layers {
            if layer.shape.contains(x, y) {
                v = layer.level + layer.slope.0 * (x - 0.5) + layer.slope.1 * (y - 0.5);
            }
        }
        image::Luma([(v.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

/// Writes `count` scenes as `scene_00000.png`, ... into `dir`; scene `i`
/// uses seed `seed + i`.
pub fn write_corpus(dir: &Path, count: usize, size: usize, seed: u64) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    for i in 0..count {
        let path = dir.join(format!("scene_{i:05}.png"));
        scene(size, seed.wrapping_add(i as u64))
            .save(&path)
            .map_err(|e| Error::Image {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
    }
    Ok(())
}
