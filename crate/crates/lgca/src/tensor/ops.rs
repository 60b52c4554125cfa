//! Elementwise, reduction, shape and linear-algebra operations.

use ndarray::{concatenate, Array2, ArrayBase, ArrayView2, Axis, Data, Ix2, IxDyn, Slice};

use super::{dim, Arr, Var};

fn to2<S: Data<Elem = f64>>(a: &ArrayBase<S, IxDyn>) -> ArrayView2<'_, f64> {
    a.view().into_dimensionality::<Ix2>().expect("2-d array")
}

fn mm(a: ArrayView2<'_, f64>, b: ArrayView2<'_, f64>) -> Array2<f64> {
    a.dot(&b)
}

impl Var {
    pub fn add(&self, other: &Var) -> Var {
        self.same_tape(other);
        let (av, bv) = (self.value(), other.value());
        assert_eq!(av.shape(), bv.shape(), "add: shape mismatch");
        let value = (&av + &bv).into_owned();
        let (a, b) = (self.id, other.id);
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| vec![(a, g.clone()), (b, g.clone())])),
        )
    }

    pub fn sub(&self, other: &Var) -> Var {
        self.same_tape(other);
        let (av, bv) = (self.value(), other.value());
        assert_eq!(av.shape(), bv.shape(), "sub: shape mismatch");
        let value = (&av - &bv).into_owned();
        let (a, b) = (self.id, other.id);
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| vec![(a, g.clone()), (b, -g.clone())])),
        )
    }

    pub fn mul(&self, other: &Var) -> Var {
        self.same_tape(other);
        let (av, bv) = (self.value(), other.value());
        assert_eq!(av.shape(), bv.shape(), "mul: shape mismatch");
        let value = (&av * &bv).into_owned();
        let (a, b) = (self.id, other.id);
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                vec![(a, (g * &bv).into_owned()), (b, (g * &av).into_owned())]
            })),
        )
    }

    pub fn scale(&self, c: f64) -> Var {
        let value = self.value().mapv(|x| x * c);
        let a = self.id;
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| vec![(a, g.mapv(|x| x * c))])),
        )
    }

    pub fn add_scalar(&self, c: f64) -> Var {
        let value = self.value().mapv(|x| x + c);
        let a = self.id;
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| vec![(a, g.clone())])),
        )
    }

    pub fn neg(&self) -> Var {
        self.scale(-1.0)
    }

    pub fn relu(&self) -> Var {
        let av = self.value();
        let value = av.mapv(|x| x.max(0.0));
        let a = self.id;
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&av, |d, &x| {
                    if x <= 0.0 {
                        *d = 0.0
                    }
                });
                vec![(a, dx)]
            })),
        )
    }

    pub fn leaky_relu(&self, slope: f64) -> Var {
        let av = self.value();
        let value = av.mapv(|x| if x >= 0.0 { x } else { slope * x });
        let a = self.id;
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                let mut dx = g.clone();
                dx.zip_mut_with(&av, |d, &x| {
                    if x < 0.0 {
                        *d *= slope
                    }
                });
                vec![(a, dx)]
            })),
        )
    }

    pub fn sum_all(&self) -> Var {
        let av = self.value();
        let value = Arr::from_elem(dim(&[]), av.sum());
        let a = self.id;
        let shape = av.shape().to_vec();
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                vec![(a, Arr::from_elem(dim(&shape), *g.first().unwrap()))]
            })),
        )
    }

    pub fn mean_all(&self) -> Var {
        let n = self.value().len() as f64;
        self.sum_all().scale(1.0 / n)
    }

    /// Mean over the two trailing (spatial) axes: `[N, C, h, w] -> [N, C]`.
    pub fn mean_tail2(&self) -> Var {
        let av = self.value();
        let s = av.shape().to_vec();
        assert!(s.len() >= 3, "mean_tail2 needs at least 3 axes");
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let m = (h * w) as f64;
        let lead: Vec<usize> = s[..s.len() - 2].to_vec();
        let value = av
            .sum_axis(Axis(s.len() - 1))
            .sum_axis(Axis(s.len() - 2))
            .mapv(|x| x / m);
        let a = self.id;
        let full = s.clone();
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                let mut dx = Arr::zeros(dim(&full));
                let gl = g.view().into_shape_with_order(dim(&lead)).unwrap();
                for (mut lane, gv) in dx
                    .view_mut()
                    .into_shape_with_order(dim(&[lead.iter().product::<usize>(), h * w]))
                    .unwrap()
                    .axis_iter_mut(Axis(0))
                    .zip(gl.iter())
                {
                    lane.fill(gv / m);
                }
                vec![(a, dx)]
            })),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Var {
        let av = self.value();
        assert_eq!(
            av.len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch {:?} -> {:?}",
            av.shape(),
            shape
        );
        let old = av.shape().to_vec();
        let value = av
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(dim(shape))
            .unwrap();
        let a = self.id;
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                vec![(
                    a,
                    g.as_standard_layout()
                        .to_owned()
                        .into_shape_with_order(dim(&old))
                        .unwrap(),
                )]
            })),
        )
    }

    pub fn permute(&self, axes: &[usize]) -> Var {
        let av = self.value();
        assert_eq!(axes.len(), av.ndim(), "permute: axis count mismatch");
        let value = av
            .view()
            .permuted_axes(axes)
            .as_standard_layout()
            .to_owned();
        let mut inverse = vec![0usize; axes.len()];
        for (i, &ax) in axes.iter().enumerate() {
            inverse[ax] = i;
        }
        let a = self.id;
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                vec![(
                    a,
                    g.view()
                        .permuted_axes(&inverse[..])
                        .as_standard_layout()
                        .to_owned(),
                )]
            })),
        )
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Var {
        let av = self.value();
        assert!(start + len <= av.shape()[axis], "narrow out of bounds");
        let value = av
            .slice_axis(Axis(axis), Slice::from(start..start + len))
            .to_owned();
        let a = self.id;
        let full = av.shape().to_vec();
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                let mut dx = Arr::zeros(dim(&full));
                dx.slice_axis_mut(Axis(axis), Slice::from(start..start + len))
                    .assign(g);
                vec![(a, dx)]
            })),
        )
    }

    pub fn concat(axis: usize, parts: &[&Var]) -> Var {
        assert!(!parts.is_empty(), "concat of zero parts");
        for p in &parts[1..] {
            parts[0].same_tape(p);
        }
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let views: Vec<_> = values.iter().map(|v| v.view()).collect();
        let value = concatenate(Axis(axis), &views).expect("concat: incompatible shapes");
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        Var::push(
            &parts[0].tape,
            value,
            Some(Box::new(move |g| {
                let mut out = Vec::with_capacity(ids.len());
                let mut off = 0;
                for (&pid, &sz) in ids.iter().zip(&sizes) {
                    out.push((
                        pid,
                        g.slice_axis(Axis(axis), Slice::from(off..off + sz))
                            .to_owned(),
                    ));
                    off += sz;
                }
                out
            })),
        )
    }

    /// Repeats each leading-axis item `r` times consecutively:
    /// `[B, ...] -> [B*r, ...]`.
    pub fn repeat_batch(&self, r: usize) -> Var {
        let av = self.value();
        let s = av.shape().to_vec();
        let mut out_shape = s.clone();
        out_shape[0] = s[0] * r;
        let mut value = Arr::zeros(dim(&out_shape));
        for b in 0..s[0] {
            for t in 0..r {
                value
                    .index_axis_mut(Axis(0), b * r + t)
                    .assign(&av.index_axis(Axis(0), b));
            }
        }
        let a = self.id;
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                let mut dx = Arr::zeros(dim(&s));
                for b in 0..s[0] {
                    let mut row = dx.index_axis_mut(Axis(0), b);
                    for t in 0..r {
                        row += &g.index_axis(Axis(0), b * r + t);
                    }
                }
                vec![(a, dx)]
            })),
        )
    }

    /// 2-d matrix product `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&self, other: &Var) -> Var {
        self.same_tape(other);
        let (av, bv) = (self.value(), other.value());
        let value = mm(to2(&av), to2(&bv)).into_dyn();
        let (a, b) = (self.id, other.id);
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                let g2 = to2(g);
                let da = mm(g2, to2(&bv).reversed_axes()).into_dyn();
                let db = mm(to2(&av).reversed_axes(), g2).into_dyn();
                vec![(a, da), (b, db)]
            })),
        )
    }

    /// Batched matrix product `[N, m, k] x [N, k, n] -> [N, m, n]`.
    pub fn bmm(&self, other: &Var) -> Var {
        self.same_tape(other);
        let (av, bv) = (self.value(), other.value());
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[1]);
        let n = sa[0];
        let mut value = Arr::zeros(dim(&[n, sa[1], sb[2]]));
        for i in 0..n {
            let ai = av.index_axis(Axis(0), i);
            let bi = bv.index_axis(Axis(0), i);
            value.index_axis_mut(Axis(0), i).assign(
                &mm(
                    ai.into_dimensionality::<Ix2>().unwrap(),
                    bi.into_dimensionality::<Ix2>().unwrap(),
                )
                .into_dyn(),
            );
        }
        let (a, b) = (self.id, other.id);
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                let mut da = Arr::zeros(dim(&sa));
                let mut db = Arr::zeros(dim(&sb));
                for i in 0..n {
                    let gi = g
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let ai = av
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let bi = bv
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    da.index_axis_mut(Axis(0), i)
                        .assign(&mm(gi, bi.reversed_axes()).into_dyn());
                    db.index_axis_mut(Axis(0), i)
                        .assign(&mm(ai.reversed_axes(), gi).into_dyn());
                }
                vec![(a, da), (b, db)]
            })),
        )
    }

    /// Batched product with the right operand transposed:
    /// `[N, m, k] x [N, n, k] -> [N, m, n]`.
    pub fn bmm_nt(&self, other: &Var) -> Var {
        self.same_tape(other);
        let (av, bv) = (self.value(), other.value());
        let (sa, sb) = (av.shape().to_vec(), bv.shape().to_vec());
        assert!(sa.len() == 3 && sb.len() == 3 && sa[0] == sb[0] && sa[2] == sb[2]);
        let n = sa[0];
        let mut value = Arr::zeros(dim(&[n, sa[1], sb[1]]));
        for i in 0..n {
            let ai = av
                .index_axis(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap();
            let bi = bv
                .index_axis(Axis(0), i)
                .into_dimensionality::<Ix2>()
                .unwrap();
            value
                .index_axis_mut(Axis(0), i)
                .assign(&mm(ai, bi.reversed_axes()).into_dyn());
        }
        let (a, b) = (self.id, other.id);
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                let mut da = Arr::zeros(dim(&sa));
                let mut db = Arr::zeros(dim(&sb));
                for i in 0..n {
                    let gi = g
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let ai = av
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    let bi = bv
                        .index_axis(Axis(0), i)
                        .into_dimensionality::<Ix2>()
                        .unwrap();
                    da.index_axis_mut(Axis(0), i).assign(&mm(gi, bi).into_dyn());
                    db.index_axis_mut(Axis(0), i)
                        .assign(&mm(gi.reversed_axes(), ai).into_dyn());
                }
                vec![(a, da), (b, db)]
            })),
        )
    }

    /// Adds a `[C]` bias to the trailing axis of `[..., C]`.
    pub fn add_bias_rows(&self, bias: &Var) -> Var {
        self.same_tape(bias);
        let (av, bv) = (self.value(), bias.value());
        let c = *av.shape().last().unwrap();
        assert_eq!(bv.shape(), [c]);
        let mut value = av.to_owned();
        for mut row in value
            .view_mut()
            .into_shape_with_order(dim(&[av.len() / c, c]))
            .unwrap()
            .axis_iter_mut(Axis(0))
        {
            row += &bv.view().into_shape_with_order(dim(&[c])).unwrap();
        }
        let (a, b) = (self.id, bias.id);
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                let rows = g.len() / c;
                let g2 = g.view().into_shape_with_order(dim(&[rows, c])).unwrap();
                let db = g2.sum_axis(Axis(0)).into_dyn();
                vec![(a, g.clone()), (b, db)]
            })),
        )
    }

    /// Adds a `[C]` bias along axis 1 of `[B, C, ...]`.
    pub fn add_bias_channel(&self, bias: &Var) -> Var {
        self.same_tape(bias);
        let (av, bv) = (self.value(), bias.value());
        let s = av.shape().to_vec();
        let c = s[1];
        assert_eq!(bv.shape(), [c]);
        let mut value = av.to_owned();
        for b in 0..s[0] {
            for ch in 0..c {
                let mut lane = value.index_axis_mut(Axis(0), b);
                let mut lane = lane.index_axis_mut(Axis(0), ch);
                lane += bv[[ch]];
            }
        }
        let (a, bid) = (self.id, bias.id);
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                let mut db = Arr::zeros(dim(&[c]));
                for b in 0..s[0] {
                    for ch in 0..c {
                        db[[ch]] += g.index_axis(Axis(0), b).index_axis(Axis(0), ch).sum();
                    }
                }
                vec![(a, g.clone()), (bid, db)]
            })),
        )
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Var {
        let av = self.value();
        let mut value = av.to_owned();
        for mut lane in value.lanes_mut(Axis(axis)) {
            let max = lane.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            lane.mapv_inplace(|x| (x - max).exp());
            let sum = lane.sum();
            lane.mapv_inplace(|x| x / sum);
        }
        let s = value.to_shared();
        let a = self.id;
        Var::push(
            &self.tape,
            s.to_owned(),
            Some(Box::new(move |g| {
                let t = (g * &s).sum_axis(Axis(axis)).insert_axis(Axis(axis));
                let dx = (&s * &(g - &t)).into_owned();
                vec![(a, dx)]
            })),
        )
    }

    /// Mean cross-entropy of `[B, K, H, W]` logits against integer targets
    /// `[B, H, W]`. Pixels whose target equals `ignore` contribute neither to
    /// the loss nor to the gradient; an all-ignored batch yields exactly zero
    /// for both.
    pub fn cross_entropy_mean(&self, target: &ndarray::ArrayD<i64>, ignore: i64) -> Var {
        let lv = self.value();
        let s = lv.shape().to_vec();
        assert_eq!(s.len(), 4, "cross_entropy_mean expects [B, K, H, W] logits");
        let (bsz, k, h, w) = (s[0], s[1], s[2], s[3]);
        assert_eq!(target.shape(), [bsz, h, w], "target shape mismatch");
        let l4 = lv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
        let mut total = 0.0;
        let mut count = 0usize;
        for b in 0..bsz {
            for y in 0..h {
                for x in 0..w {
                    let t = target[[b, y, x]];
                    if t == ignore {
                        continue;
                    }
                    assert!(
                        (0..k as i64).contains(&t),
                        "target class {t} out of range 0..{k}"
                    );
                    let mut max = f64::NEG_INFINITY;
                    for c in 0..k {
                        max = max.max(l4[[b, c, y, x]]);
                    }
                    let mut sum = 0.0;
                    for c in 0..k {
                        sum += (l4[[b, c, y, x]] - max).exp();
                    }
                    total += max + sum.ln() - l4[[b, t as usize, y, x]];
                    count += 1;
                }
            }
        }
        let value = Arr::from_elem(dim(&[]), if count > 0 { total / count as f64 } else { 0.0 });
        let a = self.id;
        let target = target.clone();
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                let up = *g.first().unwrap();
                let mut dl = Arr::zeros(dim(&s));
                if count > 0 {
                    let l4 = lv.view().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let mut d4 = dl.view_mut().into_dimensionality::<ndarray::Ix4>().unwrap();
                    let scale = up / count as f64;
                    for b in 0..bsz {
                        for y in 0..h {
                            for x in 0..w {
                                let t = target[[b, y, x]];
                                if t == ignore {
                                    continue;
                                }
                                let mut max = f64::NEG_INFINITY;
                                for c in 0..k {
                                    max = max.max(l4[[b, c, y, x]]);
                                }
                                let mut sum = 0.0;
                                for c in 0..k {
                                    sum += (l4[[b, c, y, x]] - max).exp();
                                }
                                for c in 0..k {
                                    let p = (l4[[b, c, y, x]] - max).exp() / sum;
                                    let onehot = (c as i64 == t) as usize as f64;
                                    d4[[b, c, y, x]] = (p - onehot) * scale;
                                }
                            }
                        }
                    }
                    drop(d4);
                }
                vec![(a, dl)]
            })),
        )
    }

    /// Group normalization over `[B, C, H, W]` with affine `[C]` parameters.
    pub fn group_norm(&self, gamma: &Var, beta: &Var, groups: usize, eps: f64) -> Var {
        self.same_tape(gamma);
        self.same_tape(beta);
        let (xv, gv, bv) = (self.value(), gamma.value(), beta.value());
        let s = xv.shape().to_vec();
        assert_eq!(s.len(), 4, "group_norm expects [B, C, H, W]");
        let (bsz, c, h, w) = (s[0], s[1], s[2], s[3]);
        assert!(
            c % groups == 0,
            "group_norm: {c} channels not divisible by {groups} groups"
        );
        let cg = c / groups;
        let m = (cg * h * w) as f64;
        // x4 view [B, G, cg*h*w]
        let x3 = xv
            .as_standard_layout()
            .to_owned()
            .into_shape_with_order(dim(&[bsz, groups, cg * h * w]))
            .unwrap();
        let mut xhat = Arr::zeros(dim(&[bsz, groups, cg * h * w]));
        let mut inv = Array2::<f64>::zeros((bsz, groups));
        for b in 0..bsz {
            for g in 0..groups {
                let lane = x3.index_axis(Axis(0), b);
                let lane = lane.index_axis(Axis(0), g);
                let mu = lane.sum() / m;
                let var = lane.mapv(|x| (x - mu) * (x - mu)).sum() / m;
                let iv = 1.0 / (var + eps).sqrt();
                inv[[b, g]] = iv;
                let mut dst = xhat.index_axis_mut(Axis(0), b);
                let mut dst = dst.index_axis_mut(Axis(0), g);
                dst.assign(&lane.mapv(|x| (x - mu) * iv));
            }
        }
        let xhat4 = xhat
            .clone()
            .into_shape_with_order(dim(&[bsz, c, h, w]))
            .unwrap();
        let mut value = xhat4.clone();
        for ch in 0..c {
            let mut lane = value.slice_axis_mut(Axis(1), Slice::from(ch..ch + 1));
            lane.mapv_inplace(|x| x * gv[[ch]]);
            lane += bv[[ch]];
        }
        let (xid, gid, bid) = (self.id, gamma.id, beta.id);
        let xhat_s = xhat4.to_shared();
        Var::push(
            &self.tape,
            value,
            Some(Box::new(move |g| {
                // d gamma, d beta
                let mut dgamma = Arr::zeros(dim(&[c]));
                let mut dbeta = Arr::zeros(dim(&[c]));
                for ch in 0..c {
                    let gs = g.slice_axis(Axis(1), Slice::from(ch..ch + 1));
                    let xs = xhat_s.slice_axis(Axis(1), Slice::from(ch..ch + 1));
                    dgamma[[ch]] = (&gs * &xs).sum();
                    dbeta[[ch]] = gs.sum();
                }
                // d x: per group, dx = inv * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
                let mut dxhat = g.clone();
                for ch in 0..c {
                    let mut lane = dxhat.slice_axis_mut(Axis(1), Slice::from(ch..ch + 1));
                    lane.mapv_inplace(|x| x * gv[[ch]]);
                }
                let dxhat3 = dxhat
                    .into_shape_with_order(dim(&[bsz, groups, cg * h * w]))
                    .unwrap();
                let xhat3 = xhat_s
                    .to_owned()
                    .into_shape_with_order(dim(&[bsz, groups, cg * h * w]))
                    .unwrap();
                let mut dx = Arr::zeros(dim(&[bsz, groups, cg * h * w]));
                for b in 0..bsz {
                    for gi in 0..groups {
                        let dh = dxhat3.index_axis(Axis(0), b);
                        let dh = dh.index_axis(Axis(0), gi);
                        let xh = xhat3.index_axis(Axis(0), b);
                        let xh = xh.index_axis(Axis(0), gi);
                        let h1 = dh.sum() / m;
                        let h2 = (&dh * &xh).sum() / m;
                        let iv = inv[[b, gi]];
                        let mut dst = dx.index_axis_mut(Axis(0), b);
                        let mut dst = dst.index_axis_mut(Axis(0), gi);
                        dst.assign(&dh.mapv(|v| v * iv));
                        dst.zip_mut_with(&xh, |d, &x| *d -= iv * (h1 + x * h2));
                    }
                }
                let dx = dx.into_shape_with_order(dim(&[bsz, c, h, w])).unwrap();
                vec![(xid, dx), (gid, dgamma), (bid, dbeta)]
            })),
        )
    }
}
