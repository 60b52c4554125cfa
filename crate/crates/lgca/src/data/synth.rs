//! Synthetic rotated/scaled-shapes dataset. Every foreground class is one
//! geometry type drawn at random orientation and scale, and all classes
//! share one instance-color palette: appearance alone cannot identify the
//! class, so the data exhibits the orientation/scale spread and intra-class
//! variance the model is built to absorb.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::SegSample;

#[derive(Clone, Copy)]
enum Geometry {
    Box,
    Disc,
    Bar,
    Wedge,
}

const GEOMETRIES: [Geometry; 4] = [Geometry::Box, Geometry::Disc, Geometry::Bar, Geometry::Wedge];

// Shared instance palette: any class may appear in any of these colors.
const PALETTE: [[f64; 3]; 6] = [
    [0.80, 0.25, 0.25],
    [0.22, 0.65, 0.30],
    [0.25, 0.38, 0.80],
    [0.82, 0.76, 0.25],
    [0.66, 0.30, 0.72],
    [0.25, 0.70, 0.70],
];

impl Geometry {
    /// Inside test in the shape's local frame with half-extent `a`.
    fn contains(&self, u: f64, v: f64, a: f64) -> bool {
        match self {
            Geometry::Box => u.abs() <= a && v.abs() <= 0.60 * a,
            Geometry::Disc => (u / a).powi(2) + (v / (0.70 * a)).powi(2) <= 1.0,
            Geometry::Bar => u.abs() <= 1.5 * a && v.abs() <= 0.18 * a,
            Geometry::Wedge => {
                // Isosceles triangle pointing +u.
                u >= -a && u <= a && v.abs() <= 0.62 * a * (1.0 - (u + a) / (2.0 * a))
            }
        }
    }

    /// Circumscribing radius used for overlap rejection.
    fn radius(&self, a: f64) -> f64 {
        match self {
            Geometry::Box => a * 1.17,
            Geometry::Disc => a,
            Geometry::Bar => a * 1.52,
            Geometry::Wedge => a * 1.2,
        }
    }
}

/// Generates `n` samples of `size x size` with `K` classes (background plus
/// `K - 1` geometry types). Reproducible from `rng_seed` alone.
pub fn synth_shapes(n: usize, classes: usize, size: usize, rng_seed: u64) -> Vec<SegSample> {
    assert!(classes >= 2, "need at least one foreground class");
    assert!(
        classes - 1 <= GEOMETRIES.len(),
        "at most {} foreground classes supported",
        GEOMETRIES.len()
    );
    assert!(size % 32 == 0, "size must be a multiple of 32");
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::with_capacity(n);
    for _ in 0..n {
        out.push(one_sample(&mut rng, classes, size));
    }
    out
}

fn one_sample(rng: &mut ChaCha8Rng, classes: usize, size: usize) -> SegSample {
    let base_gray = rng.random_range(0.40..0.58);
    let grad = rng.random_range(-0.06..0.06);
    let mut image = Array3::from_shape_fn((3, size, size), |(_, y, _)| {
        base_gray + grad * (y as f64 / size as f64 - 0.5)
    });
    let mut mask = Array2::<i64>::zeros((size, size));

    // Every foreground class appears at least once; extras drawn uniformly.
    let extra = rng.random_range(2..=4);
    let mut shape_classes: Vec<usize> = (1..classes).collect();
    for _ in 0..extra {
        shape_classes.push(rng.random_range(1..classes));
    }

    let mut placed: Vec<(f64, f64, f64)> = Vec::new();
    for class in shape_classes {
        let geometry = GEOMETRIES[class - 1];
        let theta = rng.random_range(0.0..std::f64::consts::TAU);
        // Scale spread biased toward larger objects; range [0.25, 2).
        let u: f64 = rng.random_range(0.0..1.0);
        let scale = 0.25 + 1.75 * u.powf(0.6);
        let a = scale * size as f64 / 7.0;
        let r = geometry.radius(a);
        // A few placement attempts to limit overlap; give up quietly after
        // that so generation always terminates.
        let mut center = None;
        for _ in 0..12 {
            let cx = rng.random_range(0.12 * size as f64..0.88 * size as f64);
            let cy = rng.random_range(0.12 * size as f64..0.88 * size as f64);
            let clear = placed
                .iter()
                .all(|&(px, py, pr)| ((px - cx).powi(2) + (py - cy).powi(2)).sqrt() > 0.8 * (pr + r));
            if clear {
                center = Some((cx, cy));
                break;
            }
        }
        let Some((cx, cy)) = center else { continue };
        placed.push((cx, cy, r));
        // Instance color from the shared palette: uninformative about class.
        let base = PALETTE[rng.random_range(0..PALETTE.len())];
        let jitter: Vec<f64> = (0..3).map(|_| rng.random_range(-0.08..0.08)).collect();
        let (sin, cos) = theta.sin_cos();
        for y in 0..size {
            for x in 0..size {
                let dx = x as f64 - cx;
                let dy = y as f64 - cy;
                // Rotate into the shape frame.
                let u = cos * dx + sin * dy;
                let v = -sin * dx + cos * dy;
                if geometry.contains(u, v, a) {
                    mask[[y, x]] = class as i64;
                    for c in 0..3 {
                        image[[c, y, x]] = (base[c] + jitter[c]).clamp(0.0, 1.0);
                    }
                }
            }
        }
    }

    // Pixel noise over everything.
    for v in image.iter_mut() {
        *v = (*v + rng.random_range(-0.03..0.03)).clamp(0.0, 1.0);
    }
    SegSample { image, mask }
}
