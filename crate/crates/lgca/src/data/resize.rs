//! Plain (non-differentiable) resampling shared by augmentation, test-time
//! augmentation and prediction. Uses the same half-pixel bilinear convention
//! as the differentiable upsampling operator.

use ndarray::{Array2, Array3};

fn lut(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5)
                .clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            (i0, (i0 + 1).min(n_in - 1), s - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of channel-first planes `[C, H, W]`.
pub fn bilinear_planes(x: &Array3<f64>, oh: usize, ow: usize) -> Array3<f64> {
    let (c, h, w) = x.dim();
    if (oh, ow) == (h, w) {
        return x.clone();
    }
    let rows = lut(h, oh);
    let cols = lut(w, ow);
    Array3::from_shape_fn((c, oh, ow), |(ch, oy, ox)| {
        let (y0, y1, fy) = rows[oy];
        let (x0, x1, fx) = cols[ox];
        (1.0 - fy) * ((1.0 - fx) * x[[ch, y0, x0]] + fx * x[[ch, y0, x1]])
            + fy * ((1.0 - fx) * x[[ch, y1, x0]] + fx * x[[ch, y1, x1]])
    })
}

/// Nearest-neighbor resize for label masks.
pub fn nearest_mask(m: &Array2<i64>, oh: usize, ow: usize) -> Array2<i64> {
    let (h, w) = m.dim();
    if (oh, ow) == (h, w) {
        return m.clone();
    }
    Array2::from_shape_fn((oh, ow), |(oy, ox)| {
        let sy = (((oy as f64 + 0.5) * h as f64 / oh as f64 - 0.5).round() as isize)
            .clamp(0, h as isize - 1) as usize;
        let sx = (((ox as f64 + 0.5) * w as f64 / ow as f64 - 0.5).round() as isize)
            .clamp(0, w as isize - 1) as usize;
        m[[sy, sx]]
    })
}

/// Horizontal flip of channel-first planes.
pub fn hflip_planes(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, h, w), |(ch, y, xx)| x[[ch, y, w - 1 - xx]])
}

pub fn hflip_mask(m: &Array2<i64>) -> Array2<i64> {
    let (h, w) = m.dim();
    Array2::from_shape_fn((h, w), |(y, x)| m[[y, w - 1 - x]])
}
