//! Local class-aware context: split a feature plane into windows, warp each
//! window with learned affine factors, pool per-window class centers, and
//! let every pixel attend over them — with the global centers as values, so
//! local structure steers how global class context is mixed back in.

use rand_chacha::ChaCha8Rng;

use crate::backbone::ModelError;
use crate::gca::{class_centers_flat, Preclassifier};
use crate::nn::{Bindings, Init, Linear, Registry};
use crate::tensor::{Arr, FactorLayout, Var, WindowGeometry};

/// How a decoder stage sources its attention keys and values.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ContextMode {
    /// Keys from local class centers, values from the global ones.
    LocalGlobal,
    /// Global module disabled: local centers serve as keys and values.
    LocalOnly,
    /// Local module disabled: global centers serve as keys and values,
    /// attended over the whole plane.
    GlobalOnly,
}

/// Static description of a window split.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct WindowLayout {
    pub batch: usize,
    pub nh: usize,
    pub nw: usize,
    pub win_h: usize,
    pub win_w: usize,
    pub orig_h: usize,
    pub orig_w: usize,
}

impl WindowLayout {
    pub fn plan(
        batch: usize,
        h: usize,
        w: usize,
        nh: usize,
        nw: usize,
    ) -> Result<WindowLayout, ModelError> {
        if nh == 0 || nw == 0 {
            return Err(ModelError::Invalid("window grid must be at least 1x1".into()));
        }
        if nh > h || nw > w {
            return Err(ModelError::Invalid(format!(
                "window grid {nh}x{nw} exceeds spatial size {h}x{w}"
            )));
        }
        Ok(WindowLayout {
            batch,
            nh,
            nw,
            win_h: h.div_ceil(nh),
            win_w: w.div_ceil(nw),
            orig_h: h,
            orig_w: w,
        })
    }

    pub fn windows_per_item(&self) -> usize {
        self.nh * self.nw
    }

    pub fn padded(&self) -> (usize, usize) {
        (self.nh * self.win_h, self.nw * self.win_w)
    }

    pub fn geometry(&self) -> WindowGeometry {
        WindowGeometry::regular(self.batch, self.nh, self.nw, self.win_h, self.win_w)
    }

    /// Replicate-pads a `[B, C, H, W]` plane to the window-divisible size.
    pub fn pad(&self, plane: &Var) -> Var {
        let (ph, pw) = self.padded();
        plane.pad_replicate_br(ph - self.orig_h, pw - self.orig_w)
    }

    /// `[B, C, Hp, Wp] -> [B*N, C, h, w]`, windows in row-major order.
    pub fn split_plane(&self, padded: &Var) -> Var {
        let s = padded.shape();
        let (b, c) = (s[0], s[1]);
        padded
            .reshape(&[b, c, self.nh, self.win_h, self.nw, self.win_w])
            .permute(&[0, 2, 4, 1, 3, 5])
            .reshape(&[b * self.windows_per_item(), c, self.win_h, self.win_w])
    }

    /// Inverse of [`Self::split_plane`], cropped back to the original size.
    pub fn merge_plane(&self, windows: &Var) -> Var {
        let s = windows.shape();
        let c = s[1];
        let (ph, pw) = self.padded();
        let merged = windows
            .reshape(&[self.batch, self.nh, self.nw, c, self.win_h, self.win_w])
            .permute(&[0, 3, 1, 4, 2, 5])
            .reshape(&[self.batch, c, ph, pw]);
        merged
            .narrow(2, 0, self.orig_h)
            .narrow(3, 0, self.orig_w)
    }
}

/// Splits feature and distribution planes into aligned window grids.
pub fn split(
    feature: &Var,
    dist: &Var,
    nh: usize,
    nw: usize,
) -> Result<(Var, Var, WindowLayout), ModelError> {
    let fs = feature.shape();
    let ds = dist.shape();
    assert_eq!(fs.len(), 4, "feature must be [B, C, H, W]");
    assert_eq!(
        (fs[0], fs[2], fs[3]),
        (ds[0], ds[2], ds[3]),
        "feature {fs:?} / distribution {ds:?} mismatch"
    );
    let layout = WindowLayout::plan(fs[0], fs[2], fs[3], nh, nw)?;
    let fw = layout.split_plane(&layout.pad(feature));
    let dw = layout.split_plane(&layout.pad(dist));
    Ok((fw, dw, layout))
}

/// Per-window class centers from flat windows `[N, C, P]` / `[N, K, P]`.
pub fn local_class_centers(windows: &Var, dist_windows: &Var) -> Var {
    class_centers_flat(windows, dist_windows)
}

/// The affine transform head: average-pool each window, project to the
/// enabled factor set, and activate. The projection starts at zero so the
/// initial transform is exactly the identity.
pub struct AtbHead {
    pub proj: Linear,
    pub layout: FactorLayout,
    pub slope: f64,
}

impl AtbHead {
    pub fn new(
        reg: &mut Registry,
        name: &str,
        channels: usize,
        layout: FactorLayout,
        slope: f64,
        rng: &mut ChaCha8Rng,
    ) -> AtbHead {
        assert!(layout.any(), "affine head with no factors enabled");
        let proj = Linear::new(reg, name, channels, layout.count(), true, Init::Zero, rng);
        AtbHead {
            proj,
            layout,
            slope,
        }
    }

    /// Raw factors for each window of `[N, C, h, w]`: shape `[N, count]`.
    pub fn factors(&self, windows: &Var, bind: &mut Bindings) -> Var {
        let pooled = windows.mean_tail2();
        self.proj.forward(&pooled, bind).leaky_relu(self.slope)
    }
}

/// Intermediate values captured for invariant tests.
#[derive(Default)]
pub struct LcaTrace {
    /// Per head: affinity `[N, P, K]` after the class softmax.
    pub affinities: Vec<Arr>,
    /// Per head: attention output `[N, P, dv]` before concatenation.
    pub head_outputs: Vec<Arr>,
    /// Per head: projected value rows `[N, K, dv]`.
    pub head_values: Vec<Arr>,
}

/// Construction-time description of one stage.
#[derive(Clone, Copy, Debug)]
pub struct StageSpec {
    pub mode: ContextMode,
    /// Channel width of the stage input (queries and local centers).
    pub channels: usize,
    /// Channel width of the value source (global centers), ignored for
    /// [`ContextMode::LocalOnly`].
    pub value_in: usize,
    pub classes: usize,
    pub heads: usize,
    pub patches: (usize, usize),
    /// Affine factor switches; `None` disables the transform head entirely.
    pub atb: Option<FactorLayout>,
    pub atb_slope: f64,
    pub tie_value_heads: bool,
    /// Identity projections (for oracle comparison) instead of random init.
    pub identity_init: bool,
}

/// One decoder stage of window-context attention.
pub struct LcaStage {
    pub spec: StageSpec,
    pub pre: Option<Preclassifier>,
    pub atb: Option<AtbHead>,
    q_proj: Linear,
    k_proj: Linear,
    v_proj: Linear,
    out_proj: Linear,
}

impl LcaStage {
    pub fn new(
        reg: &mut Registry,
        name: &str,
        spec: StageSpec,
        rng: &mut ChaCha8Rng,
    ) -> Result<LcaStage, ModelError> {
        let c = spec.channels;
        if c % spec.heads != 0 {
            return Err(ModelError::Invalid(format!(
                "{name}: heads {} must divide channel width {c}",
                spec.heads
            )));
        }
        let value_in = match spec.mode {
            ContextMode::LocalOnly => c,
            _ => spec.value_in,
        };
        let key_in = match spec.mode {
            ContextMode::GlobalOnly => value_in,
            _ => c,
        };
        let v_out = if spec.tie_value_heads { c / spec.heads } else { c };
        let init = if spec.identity_init { Init::Identity } else { Init::He };
        let (pre, atb) = match spec.mode {
            ContextMode::GlobalOnly => (None, None),
            _ => {
                let pre = Preclassifier::new(reg, &format!("{name}.pre"), c, spec.classes, rng)?;
                let atb = spec.atb.map(|layout| {
                    AtbHead::new(reg, &format!("{name}.atb"), c, layout, spec.atb_slope, rng)
                });
                (Some(pre), atb)
            }
        };
        Ok(LcaStage {
            spec,
            pre,
            atb,
            q_proj: Linear::new(reg, &format!("{name}.q"), c, c, true, init, rng),
            k_proj: Linear::new(reg, &format!("{name}.k"), key_in, c, true, init, rng),
            v_proj: Linear::new(reg, &format!("{name}.v"), value_in, v_out, true, init, rng),
            out_proj: Linear::new(reg, &format!("{name}.out"), c, c, true, init, rng),
        })
    }

    fn rows(linear: &Linear, x: &Var, bind: &mut Bindings) -> Var {
        // Apply a linear layer to the trailing axis of [N, P, C].
        let s = x.shape();
        let out = linear.forward(&x.reshape(&[s[0] * s[1], s[2]]), bind);
        let cout = out.shape()[1];
        out.reshape(&[s[0], s[1], cout])
    }

    /// Multi-head cross attention: queries `[N, P, C]` against `keys
    /// [N, K, key_in]`, mixing `values [N, K, value_in]`. Affinity softmax
    /// runs over the class axis; logits are scaled by the inverse square
    /// root of the per-head width.
    pub fn attention(
        &self,
        queries: &Var,
        keys: &Var,
        values: &Var,
        bind: &mut Bindings,
        mut trace: Option<&mut LcaTrace>,
    ) -> Var {
        let heads = self.spec.heads;
        let c = self.spec.channels;
        let dh = c / heads;
        let q = Self::rows(&self.q_proj, queries, bind);
        let k = Self::rows(&self.k_proj, keys, bind);
        let v = Self::rows(&self.v_proj, values, bind);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for head in 0..heads {
            let qh = q.narrow(2, head * dh, dh);
            let kh = k.narrow(2, head * dh, dh);
            let vh = if self.spec.tie_value_heads {
                v.clone()
            } else {
                v.narrow(2, head * dh, dh)
            };
            let affinity = qh.bmm_nt(&kh).scale(scale).softmax(2);
            let oh = affinity.bmm(&vh);
            if let Some(t) = trace.as_deref_mut() {
                t.affinities.push(affinity.value().to_owned());
                t.head_outputs.push(oh.value().to_owned());
                t.head_values.push(vh.value().to_owned());
            }
            outs.push(oh);
        }
        let refs: Vec<&Var> = outs.iter().collect();
        let cat = Var::concat(2, &refs);
        Self::rows(&self.out_proj, &cat, bind)
    }

    /// Runs the stage on `x [B, C, H, W]`. `global_centers` is required
    /// unless the mode is [`ContextMode::LocalOnly`]. Returns the context
    /// output (same shape as `x`) and this stage's pre-classification logits
    /// when it owns a pre-classifier.
    pub fn forward(
        &self,
        x: &Var,
        global_centers: Option<&Var>,
        bind: &mut Bindings,
        trace: Option<&mut LcaTrace>,
    ) -> Result<(Var, Option<Var>), ModelError> {
        match self.spec.mode {
            ContextMode::GlobalOnly => self.forward_global(x, global_centers, bind, trace),
            _ => self.forward_windowed(x, global_centers, bind, trace),
        }
    }

    fn forward_global(
        &self,
        x: &Var,
        global_centers: Option<&Var>,
        bind: &mut Bindings,
        trace: Option<&mut LcaTrace>,
    ) -> Result<(Var, Option<Var>), ModelError> {
        let cg = global_centers
            .ok_or_else(|| ModelError::Invalid("global-only stage requires global centers".into()))?;
        let s = x.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let queries = x.reshape(&[b, c, h * w]).permute(&[0, 2, 1]);
        let out = self.attention(&queries, cg, cg, bind, trace);
        let plane = out.permute(&[0, 2, 1]).reshape(&[b, c, h, w]);
        Ok((plane, None))
    }

    fn forward_windowed(
        &self,
        x: &Var,
        global_centers: Option<&Var>,
        bind: &mut Bindings,
        trace: Option<&mut LcaTrace>,
    ) -> Result<(Var, Option<Var>), ModelError> {
        let pre = self.pre.as_ref().expect("windowed stage owns a pre-classifier");
        let s = x.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        let d_logits = pre.forward(x, bind);
        // Small planes (deep stages, downscaled test-time inputs) cap the
        // effective grid so windows never go below one cell.
        let nh = self.spec.patches.0.min(h);
        let nw = self.spec.patches.1.min(w);
        let layout = WindowLayout::plan(b, h, w, nh, nw)?;
        let xp = layout.pad(x);
        let dp = layout.pad(&d_logits);
        let xw = layout.split_plane(&xp);
        let n = layout.windows_per_item();
        let (hw, k) = (layout.win_h * layout.win_w, self.spec.classes);

        // Window contents used for center pooling, affine-resampled when the
        // transform head is present.
        let (xs, ds) = match &self.atb {
            Some(atb) => {
                let factors = atb.factors(&xw, bind);
                let grid = factors
                    .affine_window_grid(atb.layout, &layout.geometry())
                    .reshape(&[b, n * hw, 2]);
                let sample = |plane: &Var, ch: usize| {
                    plane
                        .grid_sample_points(&grid)
                        .reshape(&[b, ch, n, hw])
                        .permute(&[0, 2, 1, 3])
                        .reshape(&[b * n, ch, hw])
                };
                (sample(&xp, c), sample(&dp, k))
            }
            None => {
                let dw = layout.split_plane(&dp);
                (
                    xw.reshape(&[b * n, c, hw]),
                    dw.reshape(&[b * n, k, hw]),
                )
            }
        };
        let local_centers = local_class_centers(&xs, &ds);

        // Queries always come from the untransformed window pixels.
        let queries = xw.reshape(&[b * n, c, hw]).permute(&[0, 2, 1]);
        let values = match self.spec.mode {
            ContextMode::LocalGlobal => {
                let cg = global_centers.ok_or_else(|| {
                    ModelError::Invalid("local-global stage requires global centers".into())
                })?;
                cg.repeat_batch(n)
            }
            ContextMode::LocalOnly => local_centers.clone(),
            ContextMode::GlobalOnly => unreachable!(),
        };
        let ctx = self.attention(&queries, &local_centers, &values, bind, trace);
        let windows = ctx
            .permute(&[0, 2, 1])
            .reshape(&[b * n, c, layout.win_h, layout.win_w]);
        Ok((layout.merge_plane(&windows), Some(d_logits)))
    }

    pub fn q_proj(&self) -> &Linear {
        &self.q_proj
    }

    /// Approximate multiplies for one forward pass on an `h x w` stage input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let c = self.spec.channels as u64;
        let hw = (h * w) as u64;
        let k = self.spec.classes as u64;
        let mut total = 0u64;
        if let Some(pre) = &self.pre {
            total += pre.macs(h, w);
        }
        if let Some(atb) = &self.atb {
            let n = (self.spec.patches.0 * self.spec.patches.1) as u64;
            total += n * atb.proj.macs(1);
        }
        total += self.q_proj.macs(hw as usize);
        total += self.k_proj.macs(k as usize);
        total += self.v_proj.macs(k as usize);
        total += self.out_proj.macs(hw as usize);
        // Affinity and mixing matmuls.
        total += hw * k * c * 2;
        total
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gca;
    use crate::oracle;
    use crate::tensor::Tape;
    use ndarray::{Array2, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    fn spec(mode: ContextMode, c: usize, k: usize, heads: usize, patches: (usize, usize)) -> StageSpec {
        StageSpec {
            mode,
            channels: c,
            value_in: c,
            classes: k,
            heads,
            patches,
            atb: Some(FactorLayout::new(true, true, true)),
            atb_slope: 0.01,
            tie_value_heads: false,
            identity_init: false,
        }
    }

    #[test]
    fn split_single_window_is_whole_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let tape = Tape::new();
        let f = tape.leaf(rand_arr(&mut rng, &[1, 3, 4, 4]));
        let d = tape.leaf(rand_arr(&mut rng, &[1, 2, 4, 4]));
        let (fw, dw, layout) = split(&f, &d, 1, 1).unwrap();
        assert_eq!(fw.shape(), vec![1, 3, 4, 4]);
        assert_eq!(dw.shape(), vec![1, 2, 4, 4]);
        assert!(fw.value().iter().zip(f.value().iter()).all(|(a, b)| a == b));
        assert_eq!(layout.windows_per_item(), 1);
    }

    #[test]
    fn split_eight_by_eight_into_sixteen_windows() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let tape = Tape::new();
        let fv = rand_arr(&mut rng, &[2, 3, 8, 8]);
        let f = tape.leaf(fv.clone());
        let d = tape.leaf(rand_arr(&mut rng, &[2, 2, 8, 8]));
        let (fw, _, layout) = split(&f, &d, 4, 4).unwrap();
        assert_eq!(fw.shape(), vec![32, 3, 2, 2]);
        assert_eq!(layout.windows_per_item(), 16);
        // Window (row 1, col 2) of item 0 holds cells (2..4, 4..6).
        let wv = fw.value();
        let widx = 1 * 4 + 2;
        for c in 0..3 {
            for y in 0..2 {
                for x in 0..2 {
                    assert_eq!(wv[[widx, c, y, x]], fv[[0, c, 2 + y, 4 + x]]);
                }
            }
        }
    }

    #[test]
    fn split_pads_and_merge_recovers_original() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let tape = Tape::new();
        let fv = rand_arr(&mut rng, &[1, 2, 7, 7]);
        let f = tape.leaf(fv.clone());
        let d = tape.leaf(rand_arr(&mut rng, &[1, 2, 7, 7]));
        let (fw, _, layout) = split(&f, &d, 4, 4).unwrap();
        assert_eq!(layout.win_h, 2);
        assert_eq!(layout.padded(), (8, 8));
        assert_eq!(fw.shape(), vec![16, 2, 2, 2]);
        let merged = layout.merge_plane(&fw);
        assert_eq!(merged.shape(), vec![1, 2, 7, 7]);
        assert!(merged.value().iter().zip(fv.iter()).all(|(a, b)| a == b));
    }

    #[test]
    fn split_rejects_oversized_grid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let f = tape.leaf(rand_arr(&mut rng, &[1, 2, 4, 4]));
        let d = tape.leaf(rand_arr(&mut rng, &[1, 2, 4, 4]));
        assert!(split(&f, &d, 5, 1).is_err());
        assert!(split(&f, &d, 0, 1).is_err());
    }

    proptest::proptest! {
        #[test]
        fn split_merge_roundtrip_any_grid(
            h in 1usize..10, w in 1usize..10,
            nh in 1usize..6, nw in 1usize..6,
            seed in 0u64..1000,
        ) {
            proptest::prop_assume!(nh <= h && nw <= w);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let tape = Tape::new();
            let fv = rand_arr(&mut rng, &[2, 3, h, w]);
            let f = tape.leaf(fv.clone());
            let d = tape.leaf(rand_arr(&mut rng, &[2, 2, h, w]));
            let (fw, _, layout) = split(&f, &d, nh, nw).unwrap();
            let merged = layout.merge_plane(&fw);
            proptest::prop_assert_eq!(merged.shape(), vec![2, 3, h, w]);
            let mv = merged.value();
            proptest::prop_assert!(mv.iter().zip(fv.iter()).all(|(a, b)| a == b));
        }
    }

    #[test]
    fn atb_zero_init_yields_identity_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut reg = Registry::new();
        let layout = FactorLayout::new(true, true, true);
        let atb = AtbHead::new(&mut reg, "atb", 3, layout, 0.01, &mut rng);
        let tape = Tape::new();
        let mut bind = Bindings::new();
        let windows = tape.leaf(rand_arr(&mut rng, &[4, 3, 2, 2]));
        let factors = atb.factors(&windows, &mut bind).value();
        assert!(factors.iter().all(|&v| v == 0.0));
        // Through the grid op: zero raw factors mean psi=1, theta=0, delta=0.
        let f = tape.leaf(Arr::zeros(IxDyn(&[4, 4])));
        let geom = WindowGeometry::regular(1, 2, 2, 2, 2);
        let grid = f.affine_window_grid(layout, &geom).value();
        assert_eq!(grid[[0, 0, 0]], 0.0);
        assert_eq!(grid[[3, 3, 0]], 3.0);
    }

    #[test]
    fn atb_identical_windows_get_identical_factors() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut reg = Registry::new();
        let layout = FactorLayout::new(true, true, true);
        let atb = AtbHead::new(&mut reg, "atb", 3, layout, 0.01, &mut rng);
        // Give the projection non-zero weights.
        atb.proj.w.set_value(rand_arr(&mut rng, &[4, 3]));
        atb.proj.b.as_ref().unwrap().set_value(rand_arr(&mut rng, &[4]));
        let tape = Tape::new();
        let mut bind = Bindings::new();
        let one = rand_arr(&mut rng, &[1, 3, 2, 2]);
        let mut both = Arr::zeros(IxDyn(&[2, 3, 2, 2]));
        both.index_axis_mut(ndarray::Axis(0), 0).assign(&one.index_axis(ndarray::Axis(0), 0));
        both.index_axis_mut(ndarray::Axis(0), 1).assign(&one.index_axis(ndarray::Axis(0), 0));
        let windows = tape.leaf(both);
        let factors = atb.factors(&windows, &mut bind).value();
        for col in 0..4 {
            assert_eq!(factors[[0, col]], factors[[1, col]]);
        }
    }

    #[test]
    fn atb_rotation_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut reg = Registry::new();
        let layout = FactorLayout::new(true, true, true);
        let atb = AtbHead::new(&mut reg, "atb", 2, layout, 0.01, &mut rng);
        // Bias away from the activation kink so finite differences are clean.
        atb.proj.w.set_value(rand_arr(&mut rng, &[4, 2]).mapv(|v| v * 0.2));
        atb.proj.b.as_ref().unwrap().set_value(
            Arr::from_shape_vec(IxDyn(&[4]), vec![0.15, -0.2, 0.25, 0.1]).unwrap(),
        );
        let x0 = rand_arr(&mut rng, &[2, 2, 2, 2]);
        // Readout: the rotation column (index 0 in the canonical order).
        let run = |input: &Arr| {
            let tape = Tape::new();
            let mut bind = Bindings::new();
            let w = tape.leaf(input.clone());
            let f = atb.factors(&w, &mut bind);
            (tape.clone(), w, f.narrow(1, 0, 1).sum_all())
        };
        let (tape, w, out) = run(&x0);
        tape.backward(&out);
        let analytic = tape.grad(&w).unwrap();
        let numeric = oracle::finite_diff_grad(|v| run(v).2.scalar(), &x0, 1e-5);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() <= 1e-7 + 1e-4 * n.abs());
        }
    }

    #[test]
    fn local_centers_uniform_logits_are_window_means() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let tape = Tape::new();
        let xv = rand_arr(&mut rng, &[3, 2, 4]);
        let x = tape.leaf(xv.clone());
        let d = tape.leaf(Arr::from_elem(IxDyn(&[3, 2, 4]), 1.3));
        let centers = local_class_centers(&x, &d).value();
        for n in 0..3 {
            for c in 0..2 {
                let mean: f64 = (0..4).map(|p| xv[[n, c, p]]).sum::<f64>() / 4.0;
                for k in 0..2 {
                    assert!((centers[[n, k, c]] - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn single_window_centers_equal_global_centers() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let tape = Tape::new();
        let fv = rand_arr(&mut rng, &[1, 3, 4, 4]);
        let dv = rand_arr(&mut rng, &[1, 2, 4, 4]);
        let f = tape.leaf(fv.clone());
        let d = tape.leaf(dv.clone());
        let global = gca::class_centers(&f, &d).value();
        let local = local_class_centers(
            &f.reshape(&[1, 3, 16]),
            &d.reshape(&[1, 2, 16]),
        )
        .value();
        for (a, b) in global.iter().zip(local.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn local_centers_match_bruteforce_on_hand_window() {
        let fv = Arr::from_shape_vec(IxDyn(&[1, 2, 4]), vec![1.0, -1.0, 2.0, 0.5, 0.0, 3.0, -2.0, 1.0]).unwrap();
        let dv = Arr::from_shape_vec(IxDyn(&[1, 2, 4]), vec![0.1, 0.9, -0.4, 0.2, -0.8, 0.3, 0.6, 0.0]).unwrap();
        let tape = Tape::new();
        let got = local_class_centers(&tape.leaf(fv.clone()), &tape.leaf(dv.clone())).value();
        let feat = Array2::from_shape_fn((2, 4), |(c, p)| fv[[0, c, p]]);
        let logits = Array2::from_shape_fn((2, 4), |(k, p)| dv[[0, k, p]]);
        let want = oracle::class_centers(&feat, &logits);
        for k in 0..2 {
            for c in 0..2 {
                assert!((got[[0, k, c]] - want[[k, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_single_class_broadcasts_projected_center() {
        // K = 1: affinity is identically one, so each pixel receives the
        // (identity-projected) global center row.
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut reg = Registry::new();
        let mut sp = spec(ContextMode::LocalGlobal, 4, 2, 1, (1, 1));
        sp.identity_init = true;
        let stage = LcaStage::new(&mut reg, "s", sp, &mut rng).unwrap();
        let tape = Tape::new();
        let mut bind = Bindings::new();
        let q = tape.leaf(rand_arr(&mut rng, &[1, 3, 4]));
        let keys = tape.leaf(rand_arr(&mut rng, &[1, 1, 4]));
        let values_v = rand_arr(&mut rng, &[1, 1, 4]);
        let values = tape.leaf(values_v.clone());
        let out = stage.attention(&q, &keys, &values, &mut bind, None).value();
        for p in 0..3 {
            for c in 0..4 {
                assert!((out[[0, p, c]] - values_v[[0, 0, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn attention_affinities_are_row_stochastic() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        let mut reg = Registry::new();
        let stage = LcaStage::new(&mut reg, "s", spec(ContextMode::LocalGlobal, 8, 3, 2, (2, 2)), &mut rng).unwrap();
        let tape = Tape::new();
        let mut bind = Bindings::new();
        let q = tape.leaf(rand_arr(&mut rng, &[2, 5, 8]));
        let keys = tape.leaf(rand_arr(&mut rng, &[2, 3, 8]));
        let values = tape.leaf(rand_arr(&mut rng, &[2, 3, 8]));
        let mut trace = LcaTrace::default();
        stage.attention(&q, &keys, &values, &mut bind, Some(&mut trace));
        assert_eq!(trace.affinities.len(), 2);
        for aff in &trace.affinities {
            for n in 0..2 {
                for p in 0..5 {
                    let sum: f64 = (0..3).map(|k| aff[[n, p, k]]).sum();
                    assert!((sum - 1.0).abs() < 1e-6);
                }
            }
        }
    }

    #[test]
    fn attention_two_pixel_hand_case_matches_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut reg = Registry::new();
        let mut sp = spec(ContextMode::LocalGlobal, 2, 2, 1, (1, 1));
        sp.identity_init = true;
        let stage = LcaStage::new(&mut reg, "s", sp, &mut rng).unwrap();
        let pixels = Array2::from_shape_vec((2, 2), vec![1.0, 0.0, -0.5, 2.0]).unwrap();
        let keys = Array2::from_shape_vec((2, 2), vec![0.5, 0.5, -1.0, 1.0]).unwrap();
        let values = Array2::from_shape_vec((2, 2), vec![3.0, -3.0, 1.0, 4.0]).unwrap();
        let want = oracle::attention(&pixels, &keys, &values, 1);
        let tape = Tape::new();
        let mut bind = Bindings::new();
        let to3 = |m: &Array2<f64>| {
            let (r, c) = m.dim();
            tape.leaf(m.clone().into_dyn().into_shape_with_order(IxDyn(&[1, r, c])).unwrap())
        };
        let got = stage
            .attention(&to3(&pixels), &to3(&keys), &to3(&values), &mut bind, None)
            .value();
        for p in 0..2 {
            for c in 0..2 {
                assert!((got[[0, p, c]] - want[[p, c]]).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn per_head_outputs_stay_in_value_hull() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut reg = Registry::new();
        let stage = LcaStage::new(&mut reg, "s", spec(ContextMode::LocalGlobal, 8, 3, 2, (2, 2)), &mut rng).unwrap();
        let tape = Tape::new();
        let mut bind = Bindings::new();
        let q = tape.leaf(rand_arr(&mut rng, &[1, 6, 8]));
        let keys = tape.leaf(rand_arr(&mut rng, &[1, 3, 8]));
        let values = tape.leaf(rand_arr(&mut rng, &[1, 3, 8]));
        let mut trace = LcaTrace::default();
        stage.attention(&q, &keys, &values, &mut bind, Some(&mut trace));
        for (outs, vals) in trace.head_outputs.iter().zip(&trace.head_values) {
            let dv = vals.shape()[2];
            for p in 0..6 {
                for c in 0..dv {
                    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                    for k in 0..3 {
                        lo = lo.min(vals[[0, k, c]]);
                        hi = hi.max(vals[[0, k, c]]);
                    }
                    let v = outs[[0, p, c]];
                    assert!(v >= lo - 1e-9 && v <= hi + 1e-9, "head output escapes hull");
                }
            }
        }
    }

    #[test]
    fn positive_scaling_of_affinity_logits_keeps_argmax() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..20 {
            let logits: Vec<f64> = (0..5).map(|_| rng.random_range(-2.0..2.0)).collect();
            let c: f64 = rng.random_range(0.1..10.0);
            let softmax = |v: &[f64]| {
                let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
                let s: f64 = e.iter().sum();
                e.into_iter().map(|x| x / s).collect::<Vec<f64>>()
            };
            let a = softmax(&logits);
            let scaled: Vec<f64> = logits.iter().map(|x| x * c).collect();
            let b = softmax(&scaled);
            let argmax = |v: &[f64]| {
                v.iter().enumerate().max_by(|x, y| x.1.partial_cmp(y.1).unwrap()).unwrap().0
            };
            assert_eq!(argmax(&a), argmax(&b));
            // Values themselves generally change.
            if (c - 1.0).abs() > 0.2 && logits.iter().any(|&x| x.abs() > 0.5) {
                assert!(a.iter().zip(&b).any(|(x, y)| (x - y).abs() > 1e-6));
            }
        }
    }

    #[test]
    fn identity_factors_equal_disabled_transform_end_to_end() {
        // Zero-initialized transform heads emit exactly (1, 0, (0,0)); the
        // stage output must be bit-comparable to a stage with no transform.
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let mut reg_a = Registry::new();
        let sp_on = spec(ContextMode::LocalGlobal, 4, 3, 2, (2, 2));
        let stage_on = LcaStage::new(&mut reg_a, "s", sp_on, &mut rng).unwrap();
        let mut reg_b = Registry::new();
        let mut rng_b = ChaCha8Rng::seed_from_u64(999);
        let mut sp_off = sp_on;
        sp_off.atb = None;
        let stage_off = LcaStage::new(&mut reg_b, "s", sp_off, &mut rng_b).unwrap();
        // Align the shared weights.
        for p in reg_a.params() {
            if let Some(q) = reg_b.params().iter().find(|q| q.name() == p.name()) {
                q.set_value(p.value());
            }
        }
        let x0 = rand_arr(&mut rng, &[2, 4, 5, 6]);
        let cg0 = rand_arr(&mut rng, &[2, 3, 4]);
        let run = |stage: &LcaStage| {
            let tape = Tape::new();
            let mut bind = Bindings::new();
            let x = tape.leaf(x0.clone());
            let cg = tape.leaf(cg0.clone());
            let (out, _) = stage.forward(&x, Some(&cg), &mut bind, None).unwrap();
            out.value().to_owned()
        };
        let a = run(&stage_on);
        let b = run(&stage_off);
        for (x, y) in a.iter().zip(b.iter()) {
            assert!((x - y).abs() < 1e-6, "identity transform diverges: {x} vs {y}");
        }
    }

    #[test]
    fn full_stage_gradient_through_sampling() {
        // End-to-end finite-difference check through pad, split, transform,
        // sampling, centers and attention, with active affine factors.
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mut reg = Registry::new();
        let stage = LcaStage::new(&mut reg, "s", spec(ContextMode::LocalGlobal, 4, 2, 2, (2, 2)), &mut rng).unwrap();
        let atb = stage.atb.as_ref().unwrap();
        atb.proj.w.set_value(rand_arr(&mut rng, &[4, 4]).mapv(|v| v * 0.1));
        atb.proj.b.as_ref().unwrap().set_value(
            Arr::from_shape_vec(IxDyn(&[4]), vec![0.2, 0.15, -0.25, 0.1]).unwrap(),
        );
        let x0 = rand_arr(&mut rng, &[1, 4, 4, 4]);
        let cg0 = rand_arr(&mut rng, &[1, 2, 4]);
        let run = |input: &Arr| {
            let tape = Tape::new();
            let mut bind = Bindings::new();
            let x = tape.leaf(input.clone());
            let cg = tape.leaf(cg0.clone());
            let (out, _) = stage.forward(&x, Some(&cg), &mut bind, None).unwrap();
            let loss = out.mul(&out).mean_all();
            (tape, x, loss)
        };
        let (tape, x, loss) = run(&x0);
        tape.backward(&loss);
        let analytic = tape.grad(&x).unwrap();
        let numeric = oracle::finite_diff_grad(|v| run(v).2.scalar(), &x0, 1e-5);
        let denom: f64 = numeric.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
        let diff: f64 = analytic
            .iter()
            .zip(numeric.iter())
            .map(|(a, n)| (a - n) * (a - n))
            .sum::<f64>()
            .sqrt();
        assert!(diff / denom < 1e-4, "stage gradient relative error {}", diff / denom);
    }
}
