//! Synthetic face-like images with a well-defined identity.
//!
//! A generator owns a fixed set of smooth non-negative part patterns (face
//! oval, mirrored eye/brow/cheek pairs, nose, mouth, plus a few one-sided
//! blobs and a lighting ramp). A face is a random non-negative combination
//! of the parts on top of a constant background, plus a little pixel noise.
//! The identity of a face is its part-weight vector.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::image::{Geometry, Image};

#[derive(Debug, Clone)]
struct Part {
    /// Planar pattern, one value per pixel (shared by all channels).
    mask: Vec<f64>,
    /// Per-channel tint.
    tint: [f64; 3],
    /// Upper bound of the part weight.
    weight: f64,
}

#[derive(Debug, Clone)]
pub struct FaceGenerator {
    geometry: Geometry,
    background: f64,
    noise: f64,
    parts: Vec<Part>,
}

fn blob(g: Geometry, cy: f64, cx: f64, sy: f64, sx: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(g.width * g.height);
    for r in 0..g.height {
        for c in 0..g.width {
            let y = (r as f64 + 0.5) / g.height as f64;
            let x = (c as f64 + 0.5) / g.width as f64;
            let q = ((y - cy) / sy).powi(2) + ((x - cx) / sx).powi(2);
            out.push((-0.5 * q).exp());
        }
    }
    out
}

fn add(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x + y).collect()
}

impl FaceGenerator {
    /// Builds the part set for `geometry` from `seed`.
    pub fn new(geometry: Geometry, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let g = geometry;
        let mut parts = Vec::new();
        let skin = [0.85, 0.65, 0.5];
        let dark = [0.35, 0.25, 0.2];
        let jitter = |rng: &mut ChaCha8Rng, v: f64, s: f64| v + rng.random_range(-s..s);

        // face oval and hair
        parts.push(Part {
            mask: blob(g, 0.55, 0.5, 0.32, 0.24),
            tint: skin,
            weight: 0.6,
        });
        parts.push(Part {
            mask: blob(g, 0.12, 0.5, 0.12, 0.3),
            tint: dark,
            weight: 0.5,
        });
        // mirrored pairs: eyes, brows, cheeks, ears, plus random extras
        let pair_specs = [
            (0.45, 0.32, 0.04, 0.06, dark, 0.45),
            (0.37, 0.32, 0.025, 0.08, dark, 0.4),
            (0.62, 0.3, 0.08, 0.08, skin, 0.3),
            (0.5, 0.18, 0.08, 0.04, skin, 0.3),
        ];
        for (cy, cx, sy, sx, tint, weight) in pair_specs {
            for _ in 0..3 {
                let (cy, cx) = (jitter(&mut rng, cy, 0.04), jitter(&mut rng, cx, 0.04));
                let (sy, sx) = (sy * rng.random_range(0.7..1.3), sx * rng.random_range(0.7..1.3));
                parts.push(Part {
                    mask: add(&blob(g, cy, cx, sy, sx), &blob(g, cy, 1.0 - cx, sy, sx)),
                    tint,
                    weight,
                });
            }
        }
        // central features: nose, mouth, chin
        let center_specs = [
            (0.58, 0.03, 0.1, skin, 0.3),
            (0.74, 0.03, 0.1, [0.6, 0.3, 0.3], 0.4),
            (0.86, 0.06, 0.12, skin, 0.3),
        ];
        for (cy, sy, sx, tint, weight) in center_specs {
            for _ in 0..3 {
                parts.push(Part {
                    mask: blob(
                        g,
                        jitter(&mut rng, cy, 0.03),
                        0.5,
                        sy * rng.random_range(0.7..1.4),
                        sx * rng.random_range(0.7..1.4),
                    ),
                    tint,
                    weight,
                });
            }
        }
        // one-sided details: hair parting, moles, shadows
        for _ in 0..6 {
            let cy = rng.random_range(0.1..0.9);
            let cx = rng.random_range(0.15..0.85);
            let s = rng.random_range(0.04..0.12);
            parts.push(Part {
                mask: blob(g, cy, cx, s, s),
                tint: if rng.random_bool(0.5) { dark } else { skin },
                weight: 0.25,
            });
        }
        // side lighting ramp
        let ramp: Vec<f64> = (0..g.height)
            .flat_map(|_| (0..g.width).map(move |c| (c as f64 + 0.5) / g.width as f64))
            .collect();
        parts.push(Part {
            mask: ramp,
            tint: [1.0, 1.0, 1.0],
            weight: 0.15,
        });

        Self {
            geometry,
            background: 0.15,
            noise: 0.02,
            parts,
        }
    }

    pub fn geometry(&self) -> Geometry {
        self.geometry
    }

    pub fn part_count(&self) -> usize {
        self.parts.len()
    }

    /// Draws one face. Weights are uniform in `[0, part weight]`.
    pub fn sample(&self, rng: &mut impl Rng) -> Image {
        let weights: Vec<f64> = self
            .parts
            .iter()
            .map(|p| rng.random_range(0.0..=p.weight))
            .collect();
        self.render(&weights, rng)
    }

    fn render(&self, weights: &[f64], rng: &mut impl Rng) -> Image {
        let g = self.geometry;
        let noise = Normal::new(0.0, self.noise).expect("valid noise scale");
        let plane = g.width * g.height;
        let mut data = vec![0.0; g.len()];
        for px in 0..plane {
            for ch in 0..g.channels {
                let mut v = self.background;
                for (p, w) in self.parts.iter().zip(weights) {
                    let tint = if g.channels == 1 {
                        (p.tint[0] + p.tint[1] + p.tint[2]) / 3.0
                    } else {
                        p.tint[ch]
                    };
                    v += w * tint * p.mask[px];
                }
                data[px * g.channels + ch] = v + noise.sample(rng);
            }
        }
        Image::from_interleaved(g, data)
            .expect("geometry length")
            .clip()
    }

    /// `n` faces from a seeded generator.
    pub fn dataset(&self, n: usize, seed: u64) -> Vec<Image> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| self.sample(&mut rng)).collect()
    }
}
