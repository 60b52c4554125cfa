//! Global class-aware context: pre-classify a feature plane, then pool it
//! into one average feature vector per class.

use rand_chacha::ChaCha8Rng;

use crate::backbone::ModelError;
use crate::nn::{Bindings, Conv2d, Init, Registry};
use crate::tensor::Var;

/// 1x1 projection producing per-pixel class logits. Trained through the
/// auxiliary loss; also the source of pooling weights for class centers.
pub struct Preclassifier {
    conv: Conv2d,
    pub classes: usize,
}

impl Preclassifier {
    pub fn new(
        reg: &mut Registry,
        name: &str,
        channels: usize,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Preclassifier, ModelError> {
        if classes < 2 {
            return Err(ModelError::Invalid(format!(
                "{name}: need at least 2 classes, got {classes}"
            )));
        }
        Ok(Preclassifier {
            conv: Conv2d::new(reg, name, channels, classes, 1, 1, 0, true, Init::He, rng),
            classes,
        })
    }

    /// `[B, C, H, W] -> [B, K, H, W]` logits.
    pub fn forward(&self, feature: &Var, bind: &mut Bindings) -> Var {
        self.conv.forward(feature, bind)
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        self.conv.macs(h, w)
    }
}

/// Center pooling on flattened planes: `feature [N, C, P]`, `dist [N, K, P]`
/// to centers `[N, K, C]`. Per class, a softmax over the P positions yields
/// convex pooling weights, making each center the weighted average feature
/// of that class.
pub fn class_centers_flat(feature: &Var, dist: &Var) -> Var {
    let fs = feature.shape();
    let ds = dist.shape();
    assert!(fs.len() == 3 && ds.len() == 3, "expected [N, C, P] planes");
    assert_eq!(
        (fs[0], fs[2]),
        (ds[0], ds[2]),
        "feature {fs:?} and distribution {ds:?} must share batch and positions"
    );
    let weights = dist.softmax(2);
    weights.bmm(&feature.permute(&[0, 2, 1]))
}

/// Pools `[B, C, H, W]` features into `[B, K, C]` class centers.
pub fn class_centers(feature: &Var, dist: &Var) -> Var {
    let fs = feature.shape();
    let ds = dist.shape();
    assert_eq!(fs.len(), 4, "feature must be [B, C, H, W]");
    assert_eq!(ds.len(), 4, "distribution must be [B, K, H, W]");
    assert_eq!(
        (fs[0], fs[2], fs[3]),
        (ds[0], ds[2], ds[3]),
        "feature {fs:?} and distribution {ds:?} must share batch and spatial dims"
    );
    let (b, c, hw) = (fs[0], fs[1], fs[2] * fs[3]);
    let k = ds[1];
    class_centers_flat(&feature.reshape(&[b, c, hw]), &dist.reshape(&[b, k, hw]))
}

/// The global module: its own pre-classifier on the chosen source layer plus
/// the pooling above.
pub struct GcaModule {
    pub pre: Preclassifier,
    pub source_layer: usize,
}

impl GcaModule {
    pub fn new(
        reg: &mut Registry,
        channels: usize,
        classes: usize,
        source_layer: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<GcaModule, ModelError> {
        Ok(GcaModule {
            pre: Preclassifier::new(reg, "gca.pre", channels, classes, rng)?,
            source_layer,
        })
    }

    /// Returns `(global centers [B, K, C], logits [B, K, H, W])`.
    pub fn forward(&self, feature: &Var, bind: &mut Bindings) -> (Var, Var) {
        let dist = self.pre.forward(feature, bind);
        (class_centers(feature, &dist), dist)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Registry;
    use crate::oracle;
    use crate::tensor::{Arr, Tape};
    use ndarray::{Array2, IxDyn};
    use rand::{Rng, SeedableRng};

    fn rand_arr(rng: &mut ChaCha8Rng, shape: &[usize]) -> Arr {
        Arr::from_shape_fn(IxDyn(shape), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn preclassify_shape_contract() {
        let mut reg = Registry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pre = Preclassifier::new(&mut reg, "pre", 8, 3, &mut rng).unwrap();
        let tape = Tape::new();
        let mut bind = Bindings::new();
        let x = tape.leaf(rand_arr(&mut rng, &[2, 8, 2, 2]));
        assert_eq!(pre.forward(&x, &mut bind).shape(), vec![2, 3, 2, 2]);
    }

    #[test]
    fn preclassify_rejects_single_class() {
        let mut reg = Registry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(Preclassifier::new(&mut reg, "pre", 8, 1, &mut rng).is_err());
    }

    #[test]
    fn zero_weight_preclassifier_emits_bias() {
        let mut reg = Registry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pre = Preclassifier::new(&mut reg, "pre", 4, 2, &mut rng).unwrap();
        pre.conv.w.set_value(Arr::zeros(IxDyn(&[2, 4, 1, 1])));
        pre.conv
            .b
            .as_ref()
            .unwrap()
            .set_value(Arr::from_shape_vec(IxDyn(&[2]), vec![0.3, -1.2]).unwrap());
        let tape = Tape::new();
        let mut bind = Bindings::new();
        let x = tape.leaf(rand_arr(&mut rng, &[1, 4, 3, 3]));
        let d = pre.forward(&x, &mut bind).value();
        for y in 0..3 {
            for xx in 0..3 {
                assert_eq!(d[[0, 0, y, xx]], 0.3);
                assert_eq!(d[[0, 1, y, xx]], -1.2);
            }
        }
    }

    #[test]
    fn preclassify_gradient_matches_finite_differences() {
        let mut reg = Registry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let pre = Preclassifier::new(&mut reg, "pre", 4, 3, &mut rng).unwrap();
        let x0 = rand_arr(&mut rng, &[1, 4, 2, 2]);
        let run = |input: &Arr| {
            let tape = Tape::new();
            let mut bind = Bindings::new();
            let x = tape.leaf(input.clone());
            let out = pre.forward(&x, &mut bind).mean_all();
            (tape, x, out)
        };
        let (tape, x, out) = run(&x0);
        tape.backward(&out);
        let analytic = tape.grad(&x).unwrap();
        let numeric = oracle::finite_diff_grad(|v| run(v).2.scalar(), &x0, 1e-5);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() <= 1e-7 + 1e-4 * n.abs());
        }
    }

    #[test]
    fn uniform_logits_pool_to_spatial_mean() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let fv = rand_arr(&mut rng, &[1, 3, 2, 2]);
        let f = tape.leaf(fv.clone());
        let d = tape.leaf(Arr::from_elem(IxDyn(&[1, 2, 2, 2]), 0.4));
        let centers = class_centers(&f, &d).value();
        for k in 0..2 {
            for c in 0..3 {
                let mean = (fv[[0, c, 0, 0]] + fv[[0, c, 0, 1]] + fv[[0, c, 1, 0]] + fv[[0, c, 1, 1]]) / 4.0;
                assert!((centers[[0, k, c]] - mean).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn saturated_logits_pick_single_pixels() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let tape = Tape::new();
        let fv = rand_arr(&mut rng, &[1, 2, 2, 2]);
        let f = tape.leaf(fv.clone());
        let mut dv = Arr::zeros(IxDyn(&[1, 2, 2, 2]));
        dv[[0, 0, 0, 1]] = 1e4; // class 0 -> position (0,1)
        dv[[0, 1, 1, 0]] = 1e4; // class 1 -> position (1,0)
        let d = tape.leaf(dv);
        let centers = class_centers(&f, &d).value();
        for c in 0..2 {
            assert!((centers[[0, 0, c]] - fv[[0, c, 0, 1]]).abs() < 1e-9);
            assert!((centers[[0, 1, c]] - fv[[0, c, 1, 0]]).abs() < 1e-9);
        }
    }

    #[test]
    fn matches_bruteforce_oracle_on_hand_logits() {
        let fv = Arr::from_shape_vec(IxDyn(&[1, 2, 2, 2]), vec![1.0, -2.0, 0.5, 3.0, 0.0, 1.5, -1.0, 2.0])
            .unwrap();
        let dv = Arr::from_shape_vec(IxDyn(&[1, 2, 2, 2]), vec![0.2, -0.7, 1.1, 0.4, -0.3, 0.9, 0.0, -1.5])
            .unwrap();
        let tape = Tape::new();
        let f = tape.leaf(fv.clone());
        let d = tape.leaf(dv.clone());
        let got = class_centers(&f, &d).value();
        let feat2 = Array2::from_shape_fn((2, 4), |(c, p)| fv[[0, c, p / 2, p % 2]]);
        let logit2 = Array2::from_shape_fn((2, 4), |(k, p)| dv[[0, k, p / 2, p % 2]]);
        let want = oracle::class_centers(&feat2, &logit2);
        for k in 0..2 {
            for c in 0..2 {
                assert!((got[[0, k, c]] - want[[k, c]]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn centers_stay_in_per_channel_hull_and_weights_normalize() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let fv = rand_arr(&mut rng, &[1, 3, 3, 3]);
            let dv = rand_arr(&mut rng, &[1, 4, 3, 3]).mapv(|v| v * 3.0);
            let tape = Tape::new();
            let f = tape.leaf(fv.clone());
            let d = tape.leaf(dv.clone());
            // Row-stochastic pooling weights.
            let w = d.reshape(&[1, 4, 9]).softmax(2).value();
            for k in 0..4 {
                let sum: f64 = (0..9).map(|p| w[[0, k, p]]).sum();
                assert!((sum - 1.0).abs() < 1e-6);
            }
            let centers = class_centers(&f, &d).value();
            for c in 0..3 {
                let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
                for y in 0..3 {
                    for x in 0..3 {
                        lo = lo.min(fv[[0, c, y, x]]);
                        hi = hi.max(fv[[0, c, y, x]]);
                    }
                }
                for k in 0..4 {
                    assert!(centers[[0, k, c]] >= lo - 1e-9 && centers[[0, k, c]] <= hi + 1e-9);
                }
            }
        }
    }

    #[test]
    fn spatial_permutation_invariance() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let fv = rand_arr(&mut rng, &[1, 2, 2, 3]);
        let dv = rand_arr(&mut rng, &[1, 2, 2, 3]);
        let perm: Vec<usize> = vec![4, 0, 5, 2, 1, 3];
        let permute = |a: &Arr, k: usize| {
            let mut out = Arr::zeros(IxDyn(&[1, k, 2, 3]));
            for ch in 0..k {
                for (dst, &src) in perm.iter().enumerate() {
                    out[[0, ch, dst / 3, dst % 3]] = a[[0, ch, src / 3, src % 3]];
                }
            }
            out
        };
        let tape = Tape::new();
        let c1 = class_centers(&tape.leaf(fv.clone()), &tape.leaf(dv.clone())).value();
        let c2 = class_centers(&tape.leaf(permute(&fv, 2)), &tape.leaf(permute(&dv, 2))).value();
        for (a, b) in c1.iter().zip(c2.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn center_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let fv = rand_arr(&mut rng, &[1, 2, 2, 2]);
        let dv = rand_arr(&mut rng, &[1, 3, 2, 2]);
        let w0 = rand_arr(&mut rng, &[1, 3, 2]);
        // Gradient with respect to the feature.
        let run_f = |input: &Arr| {
            let tape = Tape::new();
            let f = tape.leaf(input.clone());
            let d = tape.leaf(dv.clone());
            let w = tape.leaf(w0.clone());
            let out = class_centers(&f, &d).mul(&w).sum_all();
            (tape, f, out)
        };
        let (tape, f, out) = run_f(&fv);
        tape.backward(&out);
        let analytic = tape.grad(&f).unwrap();
        let numeric = oracle::finite_diff_grad(|v| run_f(v).2.scalar(), &fv, 1e-5);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() <= 1e-7 + 1e-4 * n.abs());
        }
        // Gradient with respect to the distribution.
        let run_d = |input: &Arr| {
            let tape = Tape::new();
            let f = tape.leaf(fv.clone());
            let d = tape.leaf(input.clone());
            let w = tape.leaf(w0.clone());
            let out = class_centers(&f, &d).mul(&w).sum_all();
            (tape, d, out)
        };
        let (tape, d, out) = run_d(&dv);
        tape.backward(&out);
        let analytic = tape.grad(&d).unwrap();
        let numeric = oracle::finite_diff_grad(|v| run_d(v).2.scalar(), &dv, 1e-5);
        for (a, n) in analytic.iter().zip(numeric.iter()) {
            assert!((a - n).abs() <= 1e-7 + 1e-4 * n.abs());
        }
    }
}
