//! 2-d convolution via im2col and a single GEMM per batch item.

use ndarray::{Array2, ArrayView2, ArrayView3, Axis, Ix3, Ix4};

use super::{dim, Arr, SharedArr, Var};

/// Unfolds one `[Cin, H, W]` item into `[Cin*kh*kw, Ho*Wo]` with zero padding.
fn im2col(
    x: &ArrayView3<'_, f64>,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> Array2<f64> {
    let (cin, h, w) = x.dim();
    let mut col = Array2::<f64>::zeros((cin * kh * kw, ho * wo));
    for c in 0..cin {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (c * kh + di) * kw + dj;
                for oy in 0..ho {
                    let iy = (oy * stride + di) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + dj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        col[[row, oy * wo + ox]] = x[[c, iy as usize, ix as usize]];
                    }
                }
            }
        }
    }
    col
}

/// Folds `[Cin*kh*kw, Ho*Wo]` gradients back onto a `[Cin, H, W]` item.
fn col2im(
    col: &ArrayView2<'_, f64>,
    cin: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
) -> ndarray::Array3<f64> {
    let mut x = ndarray::Array3::<f64>::zeros((cin, h, w));
    for c in 0..cin {
        for di in 0..kh {
            for dj in 0..kw {
                let row = (c * kh + di) * kw + dj;
                for oy in 0..ho {
                    let iy = (oy * stride + di) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for ox in 0..wo {
                        let ix = (ox * stride + dj) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        x[[c, iy as usize, ix as usize]] += col[[row, oy * wo + ox]];
                    }
                }
            }
        }
    }
    x
}

fn item3(v: &SharedArr, b: usize) -> ArrayView3<'_, f64> {
    v.index_axis(Axis(0), b)
        .into_dimensionality::<Ix3>()
        .unwrap()
}

impl Var {
    /// Convolution of `[B, Cin, H, W]` with `[Cout, Cin, kh, kw]` weights,
    /// zero padding and optional `[Cout]` bias.
    pub fn conv2d(&self, weight: &Var, bias: Option<&Var>, stride: usize, pad: usize) -> Var {
        self.same_tape(weight);
        if let Some(b) = bias {
            self.same_tape(b);
        }
        let xv = self.value();
        let wv = weight.value();
        let xs = xv.shape().to_vec();
        let ws = wv.shape().to_vec();
        assert_eq!(xs.len(), 4, "conv2d input must be [B, Cin, H, W]");
        assert_eq!(ws.len(), 4, "conv2d weight must be [Cout, Cin, kh, kw]");
        assert_eq!(xs[1], ws[1], "conv2d: channel mismatch");
        assert!(stride >= 1);
        let (bsz, cin, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        assert!(
            h + 2 * pad >= kh && w + 2 * pad >= kw,
            "conv2d: kernel larger than padded input"
        );
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;

        let w2 = wv
            .to_owned()
            .into_shape_with_order(dim(&[cout, cin * kh * kw]))
            .unwrap()
            .into_dimensionality::<ndarray::Ix2>()
            .unwrap();
        let bias_v = bias.map(|b| b.value());
        let mut value = Arr::zeros(dim(&[bsz, cout, ho, wo]));
        for b in 0..bsz {
            let col = im2col(&item3(&xv, b), kh, kw, stride, pad, ho, wo);
            let mut out = w2.dot(&col); // [Cout, Ho*Wo]
            if let Some(bv) = &bias_v {
                for (mut row, &bc) in out.axis_iter_mut(Axis(0)).zip(bv.iter()) {
                    row += bc;
                }
            }
            value.index_axis_mut(Axis(0), b).assign(
                &out.into_shape_with_order((cout, ho, wo))
                    .unwrap()
                    .into_dyn(),
            );
        }

        let xid = self.id;
        let wid = weight.id;
        let bid = bias.map(|b| b.id);
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
                let mut dw2 = Array2::<f64>::zeros((cout, cin * kh * kw));
                let mut dx = Arr::zeros(dim(&[bsz, cin, h, w]));
                let mut db = Arr::zeros(dim(&[cout]));
                for b in 0..bsz {
                    let gb = g4
                        .index_axis(Axis(0), b)
                        .to_owned()
                        .into_shape_with_order((cout, ho * wo))
                        .unwrap();
                    let col = im2col(&item3(&xv, b), kh, kw, stride, pad, ho, wo);
                    dw2 = dw2 + gb.dot(&col.t());
                    let dcol = w2.t().dot(&gb);
                    dx.index_axis_mut(Axis(0), b).assign(
                        &col2im(&dcol.view(), cin, h, w, kh, kw, stride, pad, ho, wo).into_dyn(),
                    );
                    if bid.is_some() {
                        for c in 0..cout {
                            db[[c]] += gb.index_axis(Axis(0), c).sum();
                        }
                    }
                }
                let dw = dw2
                    .into_shape_with_order((cout, cin, kh, kw))
                    .unwrap()
                    .into_dyn();
                let mut out = vec![(xid, dx), (wid, dw)];
                if let Some(bid) = bid {
                    out.push((bid, db));
                }
                out
            })),
        )
    }
}
