//! Procedural digit dataset: stroke skeletons per class, randomized affine
//! jitter, thickness and noise, rasterized to [0, 1] grayscale and quantized
//! to 8-bit levels so an IDX round trip is lossless.
//!
//! Used as the desk-scale stand-in when no MNIST files are available; the
//! generated set ships through the same IDX files and loaders.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::{Dataset, LabeledImage};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct SynthConfig {
    /// Square image side in pixels.
    pub size: usize,
    /// Amplitude of uniform pixel noise.
    pub noise: f64,
    /// Shape variability: scales affine jitter and per-vertex skeleton
    /// displacement. 1.0 is mild; 2.0 and above produces a hard set where
    /// small models keep a few percent test error.
    pub jitter: f64,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            size: 14,
            noise: 0.12,
            jitter: 1.0,
            seed: 0,
        }
    }
}

type Stroke = Vec<(f64, f64)>;

fn ellipse(cx: f64, cy: f64, rx: f64, ry: f64, n: usize) -> Stroke {
    (0..=n)
        .map(|i| {
            let a = std::f64::consts::TAU * i as f64 / n as f64;
            (cx + rx * a.cos(), cy + ry * a.sin())
        })
        .collect()
}

/// Stroke skeletons in the unit square, y pointing down. Each digit has a
/// few handwriting styles so classes are multimodal, like real digit data.
fn skeleton(digit: usize, style: usize) -> Vec<Stroke> {
    match (digit, style % 3) {
        (0, 0) => vec![ellipse(0.5, 0.5, 0.26, 0.36, 14)],
        (0, 1) => vec![ellipse(0.5, 0.5, 0.32, 0.33, 14)],
        (0, _) => vec![
            ellipse(0.5, 0.5, 0.24, 0.37, 14),
            vec![(0.62, 0.3), (0.4, 0.72)],
        ],
        (1, 0) => vec![vec![(0.34, 0.3), (0.54, 0.12), (0.54, 0.9)]],
        (1, 1) => vec![vec![(0.5, 0.1), (0.5, 0.9)]],
        (1, _) => vec![
            vec![(0.36, 0.28), (0.54, 0.12), (0.54, 0.9)],
            vec![(0.32, 0.9), (0.74, 0.9)],
        ],
        (2, 0) => vec![vec![
            (0.26, 0.3),
            (0.32, 0.14),
            (0.52, 0.1),
            (0.7, 0.16),
            (0.74, 0.32),
            (0.62, 0.5),
            (0.3, 0.74),
            (0.25, 0.9),
            (0.75, 0.9),
        ]],
        (2, 1) => vec![vec![
            (0.3, 0.26),
            (0.5, 0.12),
            (0.7, 0.24),
            (0.68, 0.44),
            (0.4, 0.62),
            (0.26, 0.88),
            (0.5, 0.78),
            (0.74, 0.86),
        ]],
        (2, _) => vec![vec![
            (0.28, 0.22),
            (0.52, 0.1),
            (0.72, 0.22),
            (0.66, 0.46),
            (0.34, 0.68),
            (0.26, 0.9),
            (0.76, 0.9),
        ]],
        (3, 0) => vec![vec![
            (0.27, 0.16),
            (0.52, 0.1),
            (0.73, 0.24),
            (0.56, 0.44),
            (0.42, 0.49),
            (0.58, 0.54),
            (0.74, 0.7),
            (0.54, 0.89),
            (0.27, 0.83),
        ]],
        (3, 1) => vec![vec![
            (0.3, 0.12),
            (0.72, 0.12),
            (0.48, 0.42),
            (0.68, 0.52),
            (0.72, 0.72),
            (0.52, 0.9),
            (0.28, 0.84),
        ]],
        (3, _) => vec![
            ellipse(0.52, 0.3, 0.2, 0.19, 12),
            ellipse(0.52, 0.68, 0.22, 0.2, 12),
            vec![(0.33, 0.3), (0.52, 0.49)],
        ],
        (4, 0) => vec![
            vec![(0.62, 0.1), (0.24, 0.62), (0.8, 0.62)],
            vec![(0.62, 0.1), (0.62, 0.9)],
        ],
        (4, 1) => vec![
            vec![(0.3, 0.12), (0.3, 0.5), (0.74, 0.5)],
            vec![(0.68, 0.12), (0.68, 0.9)],
        ],
        (4, _) => vec![
            vec![(0.56, 0.12), (0.26, 0.56), (0.78, 0.56)],
            vec![(0.64, 0.3), (0.64, 0.9)],
        ],
        (5, 0) => vec![vec![
            (0.74, 0.12),
            (0.31, 0.12),
            (0.28, 0.46),
            (0.55, 0.42),
            (0.74, 0.56),
            (0.71, 0.79),
            (0.5, 0.9),
            (0.27, 0.82),
        ]],
        (5, 1) => vec![
            vec![(0.72, 0.1), (0.3, 0.1), (0.3, 0.44)],
            ellipse(0.5, 0.64, 0.24, 0.25, 12),
        ],
        (5, _) => vec![vec![
            (0.7, 0.14),
            (0.34, 0.14),
            (0.32, 0.4),
            (0.6, 0.4),
            (0.72, 0.62),
            (0.6, 0.86),
            (0.3, 0.86),
        ]],
        (6, 0) => vec![vec![
            (0.66, 0.1),
            (0.42, 0.26),
            (0.31, 0.5),
            (0.31, 0.72),
            (0.46, 0.9),
            (0.66, 0.84),
            (0.72, 0.64),
            (0.6, 0.5),
            (0.36, 0.56),
        ]],
        (6, 1) => vec![
            vec![(0.62, 0.1), (0.38, 0.4), (0.32, 0.64)],
            ellipse(0.5, 0.7, 0.2, 0.2, 12),
        ],
        (6, _) => vec![vec![
            (0.7, 0.14),
            (0.44, 0.3),
            (0.32, 0.58),
            (0.36, 0.84),
            (0.58, 0.9),
            (0.7, 0.7),
            (0.56, 0.54),
            (0.34, 0.62),
        ]],
        (7, 0) => vec![vec![(0.25, 0.13), (0.75, 0.13), (0.44, 0.9)]],
        (7, 1) => vec![
            vec![(0.26, 0.14), (0.74, 0.14), (0.46, 0.9)],
            vec![(0.34, 0.52), (0.66, 0.52)],
        ],
        (7, _) => vec![vec![(0.26, 0.22), (0.3, 0.12), (0.74, 0.16), (0.5, 0.9)]],
        (8, 0) => vec![
            ellipse(0.5, 0.3, 0.2, 0.18, 12),
            ellipse(0.5, 0.68, 0.23, 0.2, 12),
        ],
        (8, 1) => vec![
            ellipse(0.5, 0.28, 0.17, 0.16, 12),
            ellipse(0.5, 0.66, 0.26, 0.23, 12),
        ],
        (8, _) => vec![
            ellipse(0.46, 0.3, 0.2, 0.17, 12),
            ellipse(0.54, 0.68, 0.21, 0.2, 12),
        ],
        (9, 0) => vec![
            ellipse(0.52, 0.32, 0.2, 0.2, 12),
            vec![(0.72, 0.34), (0.68, 0.9)],
        ],
        (9, 1) => vec![
            ellipse(0.5, 0.3, 0.19, 0.18, 12),
            vec![(0.69, 0.32), (0.66, 0.62), (0.48, 0.88)],
        ],
        (9, _) => vec![
            ellipse(0.52, 0.34, 0.21, 0.21, 12),
            vec![(0.73, 0.36), (0.73, 0.9), (0.52, 0.84)],
        ],
        _ => unreachable!("digits are 0..10"),
    }
}

fn dist_to_segment(p: (f64, f64), a: (f64, f64), b: (f64, f64)) -> f64 {
    let (vx, vy) = (b.0 - a.0, b.1 - a.1);
    let (wx, wy) = (p.0 - a.0, p.1 - a.1);
    let len2 = vx * vx + vy * vy;
    let t = if len2 > 0.0 {
        ((wx * vx + wy * vy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    let (dx, dy) = (wx - t * vx, wy - t * vy);
    (dx * dx + dy * dy).sqrt()
}

fn render(digit: usize, size: usize, rng: &mut ChaCha8Rng, noise: f64, jitter: f64) -> Vec<f64> {
    let style: usize = rng.gen_range(0..3);
    let j = jitter.max(1e-6);
    let theta: f64 = rng.gen_range(-0.22 * j..0.22 * j);
    let scale_x: f64 = rng.gen_range(1.0 - 0.18 * j..1.0 + 0.12 * j);
    let scale_y: f64 = rng.gen_range(1.0 - 0.18 * j..1.0 + 0.12 * j);
    let shear: f64 = rng.gen_range(-0.15 * j..0.15 * j);
    let shift_x: f64 = rng.gen_range(-0.06 * j..0.06 * j);
    let shift_y: f64 = rng.gen_range(-0.06 * j..0.06 * j);
    let thickness: f64 = rng.gen_range(0.075 - 0.02 * j..0.075 + 0.02 * j).max(0.02);
    let wobble = 0.035 * j;

    let (sin, cos) = theta.sin_cos();
    let transform = |(x, y): (f64, f64)| {
        let (x, y) = (x - 0.5, y - 0.5);
        let (x, y) = (x * scale_x + shear * y, y * scale_y);
        let (x, y) = (cos * x - sin * y, sin * x + cos * y);
        (x + 0.5 + shift_x, y + 0.5 + shift_y)
    };

    let strokes: Vec<Stroke> = skeleton(digit, style)
        .into_iter()
        .map(|s| {
            s.into_iter()
                .map(transform)
                .map(|(x, y)| {
                    (
                        x + rng.gen_range(-wobble..wobble),
                        y + rng.gen_range(-wobble..wobble),
                    )
                })
                .collect()
        })
        .collect();

    let aa = 0.5 / size as f64;
    let mut pixels = Vec::with_capacity(size * size);
    for py in 0..size {
        for px in 0..size {
            let p = ((px as f64 + 0.5) / size as f64, (py as f64 + 0.5) / size as f64);
            let mut dist = f64::INFINITY;
            for stroke in &strokes {
                for seg in stroke.windows(2) {
                    dist = dist.min(dist_to_segment(p, seg[0], seg[1]));
                }
            }
            let ink = ((thickness + aa - dist) / (2.0 * aa)).clamp(0.0, 1.0);
            let noisy = (ink + rng.gen_range(-noise..noise)).clamp(0.0, 1.0);
            // quantize to the 8-bit grid so IDX serialization is lossless
            pixels.push((noisy * 255.0).round() / 255.0);
        }
    }
    pixels
}

/// Generates `n` labeled digit images, labels uniform over 0..10.
pub fn generate(n: usize, cfg: &SynthConfig) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let examples = (0..n)
        .map(|i| {
            let digit = rng.gen_range(0..10usize);
            let pixels = render(digit, cfg.size, &mut rng, cfg.noise, cfg.jitter);
            LabeledImage {
                x: Tensor::new(vec![cfg.size, cfg.size, 1], pixels).expect("shape matches"),
                y: digit,
                source_index: i,
            }
        })
        .collect();
    Dataset::new(examples, "synthetic")
}
