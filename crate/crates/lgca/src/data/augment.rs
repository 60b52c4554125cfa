//! Training-time augmentation: random flip, isotropic scale jitter and
//! photometric distortion. Geometric changes hit image and mask identically
//! (mask via nearest neighbor); photometric changes touch the image only.
//! Everything is a pure function of the seed.

use ndarray::{s, Array2, Array3, Axis};
use rand::seq::SliceRandom;
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::resize::{bilinear_planes, hflip_mask, hflip_planes, nearest_mask};
use super::{SegBatch, SegSample, IGNORE};

#[derive(Clone, Copy, Debug)]
pub struct AugmentParams {
    pub scale_range: (f64, f64),
    pub flip_prob: f64,
    pub photometric: bool,
}

impl Default for AugmentParams {
    fn default() -> AugmentParams {
        AugmentParams {
            scale_range: (0.5, 1.5),
            flip_prob: 0.5,
            photometric: true,
        }
    }
}

/// Augments a batch; output keeps the input tile size, with scale-jitter
/// shortfall padded using the ignore label.
pub fn augment(batch: &SegBatch, rng_seed: u64, params: AugmentParams) -> SegBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let (h, w) = batch.size();
    let mut images = batch.images.clone();
    let mut masks = batch.masks.clone();
    for b in 0..batch.len() {
        let mut sample = SegSample {
            image: batch.images.index_axis(Axis(0), b).to_owned(),
            mask: batch.masks.index_axis(Axis(0), b).to_owned(),
        };
        sample = scale_jitter(sample, &mut rng, params.scale_range, h, w);
        if rng.random::<f64>() < params.flip_prob {
            sample.image = hflip_planes(&sample.image);
            sample.mask = hflip_mask(&sample.mask);
        }
        if params.photometric {
            photometric(&mut sample.image, &mut rng);
        }
        images.index_axis_mut(Axis(0), b).assign(&sample.image);
        masks.index_axis_mut(Axis(0), b).assign(&sample.mask);
    }
    SegBatch { images, masks }
}

fn scale_jitter(
    sample: SegSample,
    rng: &mut ChaCha8Rng,
    (lo, hi): (f64, f64),
    h: usize,
    w: usize,
) -> SegSample {
    assert!(lo <= hi && lo > 0.0, "bad scale range {lo}..{hi}");
    let s = if lo == hi {
        lo
    } else {
        rng.random_range(lo..hi)
    };
    if s == 1.0 {
        return sample;
    }
    let nh = ((h as f64 * s).round() as usize).max(1);
    let nw = ((w as f64 * s).round() as usize).max(1);
    let image = bilinear_planes(&sample.image, nh, nw);
    let mask = nearest_mask(&sample.mask, nh, nw);
    if nh >= h && nw >= w {
        let oy = if nh > h { rng.random_range(0..=nh - h) } else { 0 };
        let ox = if nw > w { rng.random_range(0..=nw - w) } else { 0 };
        SegSample {
            image: image.slice(s![.., oy..oy + h, ox..ox + w]).to_owned(),
            mask: mask.slice(s![oy..oy + h, ox..ox + w]).to_owned(),
        }
    } else {
        // Shrunk content placed on an ignore-labelled canvas.
        let oy = if h > nh { rng.random_range(0..=h - nh) } else { 0 };
        let ox = if w > nw { rng.random_range(0..=w - nw) } else { 0 };
        let mut canvas_img = Array3::<f64>::zeros((3, h, w));
        let mut canvas_mask = Array2::<i64>::from_elem((h, w), IGNORE);
        canvas_img
            .slice_mut(s![.., oy..oy + nh, ox..ox + nw])
            .assign(&image);
        canvas_mask
            .slice_mut(s![oy..oy + nh, ox..ox + nw])
            .assign(&mask);
        SegSample {
            image: canvas_img,
            mask: canvas_mask,
        }
    }
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

/// Brightness/contrast/saturation within +-25%, hue within +-9 degrees,
/// applied in a random order.
fn photometric(image: &mut Array3<f64>, rng: &mut ChaCha8Rng) {
    let mut order = [0usize, 1, 2, 3];
    order.shuffle(rng);
    for op in order {
        match op {
            0 => {
                let f = rng.random_range(0.75..1.25);
                image.mapv_inplace(|v| (v * f).clamp(0.0, 1.0));
            }
            1 => {
                let f = rng.random_range(0.75..1.25);
                let (_, h, w) = image.dim();
                let mut mean = 0.0;
                for y in 0..h {
                    for x in 0..w {
                        mean += luma(image[[0, y, x]], image[[1, y, x]], image[[2, y, x]]);
                    }
                }
                mean /= (h * w) as f64;
                image.mapv_inplace(|v| (mean + f * (v - mean)).clamp(0.0, 1.0));
            }
            2 => {
                let f = rng.random_range(0.75..1.25);
                let (_, h, w) = image.dim();
                for y in 0..h {
                    for x in 0..w {
                        let l = luma(image[[0, y, x]], image[[1, y, x]], image[[2, y, x]]);
                        for c in 0..3 {
                            image[[c, y, x]] = (l + f * (image[[c, y, x]] - l)).clamp(0.0, 1.0);
                        }
                    }
                }
            }
            _ => {
                let shift = rng.random_range(-9.0..9.0) / 360.0;
                let (_, h, w) = image.dim();
                for y in 0..h {
                    for x in 0..w {
                        let (hh, ss, vv) = rgb_to_hsv(
                            image[[0, y, x]],
                            image[[1, y, x]],
                            image[[2, y, x]],
                        );
                        let (r, g, b) = hsv_to_rgb((hh + shift).rem_euclid(1.0), ss, vv);
                        image[[0, y, x]] = r.clamp(0.0, 1.0);
                        image[[1, y, x]] = g.clamp(0.0, 1.0);
                        image[[2, y, x]] = b.clamp(0.0, 1.0);
                    }
                }
            }
        }
    }
}

fn rgb_to_hsv(r: f64, g: f64, b: f64) -> (f64, f64, f64) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        (((g - b) / d).rem_euclid(6.0)) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f64, s: f64, v: f64) -> (f64, f64, f64) {
    let h6 = h * 6.0;
    let c = v * s;
    let x = c * (1.0 - (h6.rem_euclid(2.0) - 1.0).abs());
    let m = v - c;
    let (r, g, b) = match h6 as usize {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    (r + m, g + m, b + m)
}
