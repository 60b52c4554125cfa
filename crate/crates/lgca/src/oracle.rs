//! Independent brute-force references for testing.
//!
//! Everything here is deliberately naive: explicit loops, no shared code
//! with the production operators, no tape. Test suites compare production
//! outputs and gradients against these.

use ndarray::{Array2, ArrayD};

/// Outcome of one oracle comparison.
#[derive(Clone, Debug)]
pub struct OracleReport {
    pub case: String,
    pub max_abs: f64,
    pub max_rel: f64,
    pub pass: bool,
}

impl OracleReport {
    /// Compares two flat slices under `|a - b| <= atol + rtol * |b|`.
    pub fn compare(case: &str, got: &[f64], want: &[f64], atol: f64, rtol: f64) -> OracleReport {
        assert_eq!(got.len(), want.len(), "oracle case {case}: length mismatch");
        let mut max_abs = 0.0f64;
        let mut max_rel = 0.0f64;
        let mut pass = true;
        for (&a, &b) in got.iter().zip(want) {
            let abs = (a - b).abs();
            max_abs = max_abs.max(abs);
            if b.abs() > 0.0 {
                max_rel = max_rel.max(abs / b.abs());
            }
            if abs > atol + rtol * b.abs() {
                pass = false;
            }
        }
        OracleReport {
            case: case.to_string(),
            max_abs,
            max_rel,
            pass,
        }
    }

    pub fn line(&self) -> String {
        format!(
            "{}  {}  max_abs={:.3e}  max_rel={:.3e}",
            if self.pass { "PASS" } else { "FAIL" },
            self.case,
            self.max_abs,
            self.max_rel
        )
    }
}

/// Per-class weighted average of pixel features: softmax over positions of
/// each class's logit row, then the weighted sum. `feature` is `[C, P]`,
/// `logits` is `[K, P]`; returns `[K, C]`.
pub fn class_centers(feature: &Array2<f64>, logits: &Array2<f64>) -> Array2<f64> {
    let (c, p) = feature.dim();
    let (k, p2) = logits.dim();
    assert_eq!(p, p2, "feature and logits must cover the same positions");
    let mut centers = Array2::<f64>::zeros((k, c));
    for ki in 0..k {
        let mut max = f64::NEG_INFINITY;
        for pi in 0..p {
            max = max.max(logits[[ki, pi]]);
        }
        let mut weights = vec![0.0; p];
        let mut sum = 0.0;
        for pi in 0..p {
            let e = (logits[[ki, pi]] - max).exp();
            weights[pi] = e;
            sum += e;
        }
        for w in weights.iter_mut() {
            *w /= sum;
        }
        for ci in 0..c {
            let mut acc = 0.0;
            for pi in 0..p {
                acc += weights[pi] * feature[[ci, pi]];
            }
            centers[[ki, ci]] = acc;
        }
    }
    centers
}

/// Class-attention reference: per head, affinity is the softmax over classes
/// of scaled query-key dot products; the output mixes that head's value
/// columns. `pixels [P, C]`, `keys [K, C]`, `values [K, Cv]`; `C` and `Cv`
/// must both divide evenly by `heads`. Returns `[P, Cv]`.
pub fn attention(
    pixels: &Array2<f64>,
    keys: &Array2<f64>,
    values: &Array2<f64>,
    heads: usize,
) -> Array2<f64> {
    let (p, c) = pixels.dim();
    let (k, ck) = keys.dim();
    let (k2, cv) = values.dim();
    assert_eq!(c, ck, "query/key width mismatch");
    assert_eq!(k, k2, "key/value row mismatch");
    assert!(c % heads == 0 && cv % heads == 0, "heads must divide widths");
    let dh = c / heads;
    let dv = cv / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut out = Array2::<f64>::zeros((p, cv));
    for head in 0..heads {
        let (q0, v0) = (head * dh, head * dv);
        for pi in 0..p {
            let mut logits = vec![0.0; k];
            for ki in 0..k {
                let mut dot = 0.0;
                for d in 0..dh {
                    dot += pixels[[pi, q0 + d]] * keys[[ki, q0 + d]];
                }
                logits[ki] = dot * scale;
            }
            let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            let mut weights = vec![0.0; k];
            for ki in 0..k {
                let e = (logits[ki] - max).exp();
                weights[ki] = e;
                sum += e;
            }
            for w in weights.iter_mut() {
                *w /= sum;
            }
            for d in 0..dv {
                let mut acc = 0.0;
                for ki in 0..k {
                    acc += weights[ki] * values[[ki, v0 + d]];
                }
                out[[pi, v0 + d]] = acc;
            }
        }
    }
    out
}

/// Point-wise affine window transform: signed displacement from the window
/// center is scaled, rotated, then the window is offset in units of its half
/// extent.
#[allow(clippy::too_many_arguments)]
pub fn affine_points(
    points: &[(f64, f64)],
    center: (f64, f64),
    half: (f64, f64),
    psi: f64,
    theta: f64,
    delta: (f64, f64),
) -> Vec<(f64, f64)> {
    let (sin, cos) = (theta.sin(), theta.cos());
    points
        .iter()
        .map(|&(x, y)| {
            let u = psi * (x - center.0);
            let v = psi * (y - center.1);
            (
                center.0 + delta.0 * half.0 + cos * u + sin * v,
                center.1 + delta.1 * half.1 - sin * u + cos * v,
            )
        })
        .collect()
}

/// Central-difference gradient of a scalar function, one coordinate at a
/// time. Panics if the function produces a non-finite value.
pub fn finite_diff_grad<F>(mut f: F, x: &ArrayD<f64>, eps: f64) -> ArrayD<f64>
where
    F: FnMut(&ArrayD<f64>) -> f64,
{
    let mut grad = ArrayD::<f64>::zeros(x.raw_dim());
    let mut probe = x.clone();
    for idx in 0..x.len() {
        let orig = probe.as_slice_mut().unwrap()[idx];
        probe.as_slice_mut().unwrap()[idx] = orig + eps;
        let fp = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig - eps;
        let fm = f(&probe);
        probe.as_slice_mut().unwrap()[idx] = orig;
        assert!(
            fp.is_finite() && fm.is_finite(),
            "finite_diff_grad: non-finite function value"
        );
        grad.as_slice_mut().unwrap()[idx] = (fp - fm) / (2.0 * eps);
    }
    grad
}
