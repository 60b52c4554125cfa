//! Differentiable geometry: bilinear resize, replicate padding, point
//! sampling and the per-window affine grid builder.

use ndarray::Ix4;

use super::{dim, Arr, SharedArr, Var};

fn read_factors(f: &SharedArr, layout: FactorLayout, win: usize) -> (f64, f64, f64, f64) {
    let theta = layout.theta.map_or(0.0, |c| f[[win, c]]);
    let dx = layout.offset.map_or(0.0, |(c, _)| f[[win, c]]);
    let dy = layout.offset.map_or(0.0, |(_, c)| f[[win, c]]);
    // Zero raw scale maps to the identity transform.
    let psi = 1.0 + layout.scale.map_or(0.0, |c| f[[win, c]]);
    (theta, dx, dy, psi)
}

/// Per-axis bilinear source indices and weights, half-pixel convention.
fn resize_lut(n_in: usize, n_out: usize) -> Vec<(usize, usize, f64)> {
    (0..n_out)
        .map(|o| {
            let s = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
            let i0 = s.floor() as usize;
            let i1 = (i0 + 1).min(n_in - 1);
            (i0, i1, s - i0 as f64)
        })
        .collect()
}

impl Var {
    /// Bilinear resize of `[B, C, H, W]` to `[B, C, oh, ow]` (half-pixel
    /// alignment, edges clamped).
    pub fn upsample_bilinear(&self, oh: usize, ow: usize) -> Var {
        let xv = self.value();
        let s = xv.shape().to_vec();
        assert_eq!(s.len(), 4, "upsample_bilinear expects [B, C, H, W]");
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        if oh == h && ow == w {
            return self.scale(1.0);
        }
        let rows = resize_lut(h, oh);
        let cols = resize_lut(w, ow);
        let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
        let mut value = Arr::zeros(dim(&[bsz, c, oh, ow]));
        {
            let mut v4 = value.view_mut().into_dimensionality::<Ix4>().unwrap();
            for b in 0..bsz {
                for ch in 0..c {
                    for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                            v4[[b, ch, oy, ox]] = (1.0 - fy)
                                * ((1.0 - fx) * x4[[b, ch, y0, x0]] + fx * x4[[b, ch, y0, x1]])
                                + fy * ((1.0 - fx) * x4[[b, ch, y1, x0]]
                                    + fx * x4[[b, ch, y1, x1]]);
                        }
                    }
                }
            }
        }
        let a = self.id;
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Arr::zeros(dim(&[bsz, c, h, w]));
                let mut d4 = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
                for b in 0..bsz {
                    for ch in 0..c {
                        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
                            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                                let gv = g4[[b, ch, oy, ox]];
                                d4[[b, ch, y0, x0]] += (1.0 - fy) * (1.0 - fx) * gv;
                                d4[[b, ch, y0, x1]] += (1.0 - fy) * fx * gv;
                                d4[[b, ch, y1, x0]] += fy * (1.0 - fx) * gv;
                                d4[[b, ch, y1, x1]] += fy * fx * gv;
                            }
                        }
                    }
                }
                drop(d4);
                vec![(a, dx)]
            })),
        )
    }

    /// Replicate-pads the bottom and right edges of `[B, C, H, W]`.
    pub fn pad_replicate_br(&self, pad_b: usize, pad_r: usize) -> Var {
        if pad_b == 0 && pad_r == 0 {
            return self.scale(1.0);
        }
        let xv = self.value();
        let s = xv.shape().to_vec();
        assert_eq!(s.len(), 4);
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        let (oh, ow) = (h + pad_b, w + pad_r);
        let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
        let mut value = Arr::zeros(dim(&[bsz, c, oh, ow]));
        {
            let mut v4 = value.view_mut().into_dimensionality::<Ix4>().unwrap();
            for b in 0..bsz {
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            v4[[b, ch, y, x]] = x4[[b, ch, y.min(h - 1), x.min(w - 1)]];
                        }
                    }
                }
            }
        }
        let a = self.id;
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Arr::zeros(dim(&[bsz, c, h, w]));
                let mut d4 = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
                for b in 0..bsz {
                    for ch in 0..c {
                        for y in 0..oh {
                            for x in 0..ow {
                                d4[[b, ch, y.min(h - 1), x.min(w - 1)]] += g4[[b, ch, y, x]];
                            }
                        }
                    }
                }
                drop(d4);
                vec![(a, dx)]
            })),
        )
    }

    /// Samples `[B, C, H, W]` at per-item point lists `grid [B, P, 2]`
    /// (absolute cell coordinates, entry 0 = column, entry 1 = row) with
    /// bilinear interpolation and border clamping. Differentiable in both the
    /// plane values and the coordinates.
    pub fn grid_sample_points(&self, grid: &Var) -> Var {
        self.same_tape(grid);
        let xv = self.value();
        let gv = grid.value();
        let xs = xv.shape().to_vec();
        let gs = gv.shape().to_vec();
        assert_eq!(xs.len(), 4, "grid_sample_points input must be [B, C, H, W]");
        assert!(
            gs.len() == 3 && gs[2] == 2,
            "grid must be [B, P, 2], got {gs:?}"
        );
        assert_eq!(xs[0], gs[0], "grid_sample_points: batch mismatch");
        let (bsz, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let p = gs[1];
        let (xmax, ymax) = ((w - 1) as f64, (h - 1) as f64);
        let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
        let mut value = Arr::zeros(dim(&[bsz, c, p]));
        for b in 0..bsz {
            for k in 0..p {
                let cx = gv[[b, k, 0]].clamp(0.0, xmax);
                let cy = gv[[b, k, 1]].clamp(0.0, ymax);
                let x0 = cx.floor() as usize;
                let y0 = cy.floor() as usize;
                let x1 = (x0 + 1).min(w - 1);
                let y1 = (y0 + 1).min(h - 1);
                let (fx, fy) = (cx - x0 as f64, cy - y0 as f64);
                for ch in 0..c {
                    value[[b, ch, k]] = (1.0 - fy)
                        * ((1.0 - fx) * x4[[b, ch, y0, x0]] + fx * x4[[b, ch, y0, x1]])
                        + fy * ((1.0 - fx) * x4[[b, ch, y1, x0]] + fx * x4[[b, ch, y1, x1]]);
                }
            }
        }
        let (xid, gid) = (self.id, grid.id);
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
                let mut dx = Arr::zeros(dim(&[bsz, c, h, w]));
                let mut dgrid = Arr::zeros(dim(&[bsz, p, 2]));
                let mut d4 = dx.view_mut().into_dimensionality::<Ix4>().unwrap();
                for b in 0..bsz {
                    for k in 0..p {
                        let rawx = gv[[b, k, 0]];
                        let rawy = gv[[b, k, 1]];
                        let cx = rawx.clamp(0.0, xmax);
                        let cy = rawy.clamp(0.0, ymax);
                        let x0 = cx.floor() as usize;
                        let y0 = cy.floor() as usize;
                        let x1 = (x0 + 1).min(w - 1);
                        let y1 = (y0 + 1).min(h - 1);
                        let (fx, fy) = (cx - x0 as f64, cy - y0 as f64);
                        let in_x = rawx > 0.0 && rawx < xmax;
                        let in_y = rawy > 0.0 && rawy < ymax;
                        let (mut gx, mut gy) = (0.0, 0.0);
                        for ch in 0..c {
                            let up = g[[b, ch, k]];
                            d4[[b, ch, y0, x0]] += (1.0 - fy) * (1.0 - fx) * up;
                            d4[[b, ch, y0, x1]] += (1.0 - fy) * fx * up;
                            d4[[b, ch, y1, x0]] += fy * (1.0 - fx) * up;
                            d4[[b, ch, y1, x1]] += fy * fx * up;
                            gx += up
                                * ((1.0 - fy) * (x4[[b, ch, y0, x1]] - x4[[b, ch, y0, x0]])
                                    + fy * (x4[[b, ch, y1, x1]] - x4[[b, ch, y1, x0]]));
                            gy += up
                                * ((1.0 - fx) * (x4[[b, ch, y1, x0]] - x4[[b, ch, y0, x0]])
                                    + fx * (x4[[b, ch, y1, x1]] - x4[[b, ch, y0, x1]]));
                        }
                        if in_x {
                            dgrid[[b, k, 0]] = gx;
                        }
                        if in_y {
                            dgrid[[b, k, 1]] = gy;
                        }
                    }
                }
                drop(d4);
                vec![(xid, dx), (gid, dgrid)]
            })),
        )
    }

    /// Builds per-window sampling grids from affine factors: each base grid
    /// point is scaled about the window center, rotated, then offset.
    /// Output is `[N, h*w, 2]` absolute plane coordinates.
    pub fn affine_window_grid(&self, layout: FactorLayout, geom: &WindowGeometry) -> Var {
        let fv = self.value();
        let fs = fv.shape().to_vec();
        let n = geom.len();
        assert_eq!(
            fs,
            [n, layout.count()],
            "affine factors must be [windows, {}]",
            layout.count()
        );
        let (h, w) = (geom.win_h, geom.win_w);
        let (hx, hy) = geom.half_extents();
        let geom = geom.clone();
        let us: Vec<f64> = (0..w).map(|j| j as f64 - (w as f64 - 1.0) / 2.0).collect();
        let vs: Vec<f64> = (0..h).map(|i| i as f64 - (h as f64 - 1.0) / 2.0).collect();
        let mut value = Arr::zeros(dim(&[n, h * w, 2]));
        for win in 0..n {
            let (xc, yc) = geom.center(win);
            let (theta, dx, dy, psi) = read_factors(&fv, layout, win);
            let (sin, cos) = theta.sin_cos();
            for (i, &v) in vs.iter().enumerate() {
                for (j, &u) in us.iter().enumerate() {
                    let p = i * w + j;
                    value[[win, p, 0]] = xc + dx * hx + psi * (cos * u + sin * v);
                    value[[win, p, 1]] = yc + dy * hy + psi * (-sin * u + cos * v);
                }
            }
        }
        let fid = self.id;
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                let mut df = Arr::zeros(dim(&[n, layout.count()]));
                for win in 0..n {
                    let (theta, _, _, psi) = read_factors(&fv, layout, win);
                    let (sin, cos) = theta.sin_cos();
                    let (mut dth, mut ddx, mut ddy, mut dps) = (0.0, 0.0, 0.0, 0.0);
                    for (i, &v) in vs.iter().enumerate() {
                        for (j, &u) in us.iter().enumerate() {
                            let p = i * w + j;
                            let gx = g[[win, p, 0]];
                            let gy = g[[win, p, 1]];
                            dth += gx * psi * (-sin * u + cos * v) + gy * psi * (-cos * u - sin * v);
                            dps += gx * (cos * u + sin * v) + gy * (-sin * u + cos * v);
                            ddx += gx * hx;
                            ddy += gy * hy;
                        }
                    }
                    if let Some(c) = layout.theta {
                        df[[win, c]] = dth;
                    }
                    if let Some((cx, cy)) = layout.offset {
                        df[[win, cx]] = ddx;
                        df[[win, cy]] = ddy;
                    }
                    if let Some(c) = layout.scale {
                        df[[win, c]] = dps;
                    }
                }
                vec![(fid, df)]
            })),
        )
    }
}

/// Which affine factors the transform head emits, and the column each
/// occupies in its output. Raw columns are ordered rotation, offset, scale.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct FactorLayout {
    pub theta: Option<usize>,
    pub offset: Option<(usize, usize)>,
    pub scale: Option<usize>,
}

impl FactorLayout {
    pub fn new(scale: bool, rotation: bool, offset: bool) -> FactorLayout {
        let mut next = 0;
        let mut take = |on: bool| {
            if on {
                next += 1;
                Some(next - 1)
            } else {
                None
            }
        };
        let theta = take(rotation);
        let off = match (take(offset), take(offset)) {
            (Some(a), Some(b)) => Some((a, b)),
            _ => None,
        };
        let scale = take(scale);
        FactorLayout {
            theta,
            offset: off,
            scale,
        }
    }

    pub fn count(&self) -> usize {
        self.theta.is_some() as usize
            + 2 * self.offset.is_some() as usize
            + self.scale.is_some() as usize
    }

    pub fn any(&self) -> bool {
        self.count() > 0
    }
}

/// Placement of a regular window grid on a (padded) feature plane, in cell
/// coordinates. Corner fields hold the first and last cell centers of each
/// window; window order is batch-major, then row, then column.
#[derive(Clone, Debug)]
pub struct WindowGeometry {
    pub xl: Vec<f64>,
    pub yl: Vec<f64>,
    pub xr: Vec<f64>,
    pub yr: Vec<f64>,
    pub win_h: usize,
    pub win_w: usize,
}

impl WindowGeometry {
    /// Geometry for `batch` items split into `nh x nw` windows of `h x w`
    /// cells.
    pub fn regular(batch: usize, nh: usize, nw: usize, h: usize, w: usize) -> WindowGeometry {
        let n = batch * nh * nw;
        let mut g = WindowGeometry {
            xl: Vec::with_capacity(n),
            yl: Vec::with_capacity(n),
            xr: Vec::with_capacity(n),
            yr: Vec::with_capacity(n),
            win_h: h,
            win_w: w,
        };
        for _ in 0..batch {
            for wi in 0..nh {
                for wj in 0..nw {
                    g.xl.push((wj * w) as f64);
                    g.yl.push((wi * h) as f64);
                    g.xr.push((wj * w + w - 1) as f64);
                    g.yr.push((wi * h + h - 1) as f64);
                }
            }
        }
        g
    }

    pub fn len(&self) -> usize {
        self.xl.len()
    }

    pub fn is_empty(&self) -> bool {
        self.xl.is_empty()
    }

    pub fn center(&self, n: usize) -> (f64, f64) {
        (
            (self.xl[n] + self.xr[n]) / 2.0,
            (self.yl[n] + self.yr[n]) / 2.0,
        )
    }

    /// Offsets are expressed in units of half the window extent.
    pub fn half_extents(&self) -> (f64, f64) {
        (self.win_w as f64 / 2.0, self.win_h as f64 / 2.0)
    }
}
