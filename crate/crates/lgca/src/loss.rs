//! Training objective: masked cross-entropy on the main prediction plus a
//! weighted average of per-stage auxiliary cross-entropies.

use ndarray::Array3;
use thiserror::Error;

use crate::data::IGNORE;
use crate::tensor::Var;

#[derive(Debug, Error)]
pub enum LossError {
    #[error("loss weights must be nonnegative, got main={main} aux={aux}")]
    NegativeWeight { main: f64, aux: f64 },
    #[error("logits {logits:?} do not match targets {targets:?}")]
    ShapeMismatch {
        logits: Vec<usize>,
        targets: Vec<usize>,
    },
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub main: f64,
    pub aux: f64,
}

impl LossWeights {
    pub fn new(main: f64, aux: f64) -> Result<LossWeights, LossError> {
        if main < 0.0 || aux < 0.0 {
            return Err(LossError::NegativeWeight { main, aux });
        }
        Ok(LossWeights { main, aux })
    }
}

fn check_shapes(logits: &Var, targets: &Array3<i64>) -> Result<(), LossError> {
    let ls = logits.shape();
    let ts = targets.dim();
    if ls.len() != 4 || (ls[0], ls[2], ls[3]) != (ts.0, ts.1, ts.2) {
        return Err(LossError::ShapeMismatch {
            logits: ls,
            targets: vec![ts.0, ts.1, ts.2],
        });
    }
    Ok(())
}

/// Mean cross-entropy over non-ignored pixels; exactly zero (with zero
/// gradient) when every pixel is ignored.
pub fn cross_entropy(logits: &Var, targets: &Array3<i64>) -> Result<Var, LossError> {
    check_shapes(logits, targets)?;
    Ok(logits.cross_entropy_mean(&targets.clone().into_dyn(), IGNORE))
}

/// `w.main * main_ce + w.aux * mean(aux_ce)`. Auxiliary logit planes at
/// coarser scales are bilinearly upsampled to the target resolution first.
pub fn total_loss(
    main_logits: &Var,
    aux_logits: &[Var],
    targets: &Array3<i64>,
    w: LossWeights,
) -> Result<Var, LossError> {
    let (_, th, tw) = targets.dim();
    let mut total = cross_entropy(main_logits, targets)?.scale(w.main);
    if !aux_logits.is_empty() && w.aux > 0.0 {
        let mut aux_sum: Option<Var> = None;
        for aux in aux_logits {
            let s = aux.shape();
            let full = if (s[2], s[3]) == (th, tw) {
                aux.clone()
            } else {
                aux.upsample_bilinear(th, tw)
            };
            let ce = cross_entropy(&full, targets)?;
            aux_sum = Some(match aux_sum {
                Some(acc) => acc.add(&ce),
                None => ce,
            });
        }
        let mean_aux = aux_sum.unwrap().scale(1.0 / aux_logits.len() as f64);
        total = total.add(&mean_aux.scale(w.aux));
    }
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{Arr, Tape};
    use ndarray::IxDyn;

    #[test]
    fn weights_reject_negative() {
        assert!(LossWeights::new(-0.1, 0.8).is_err());
        assert!(LossWeights::new(1.0, -1e-9).is_err());
        assert!(LossWeights::new(1.0, 0.0).is_ok());
    }

    #[test]
    fn zero_aux_weight_reduces_to_main_term() {
        let tape = Tape::new();
        let logits = tape.leaf(Arr::zeros(IxDyn(&[1, 3, 2, 2])));
        let aux = tape.leaf(Arr::ones(IxDyn(&[1, 3, 1, 1])));
        let targets = Array3::<i64>::zeros((1, 2, 2));
        let w = LossWeights::new(1.0, 0.0).unwrap();
        let total = total_loss(&logits, &[aux], &targets, w).unwrap();
        let main_only = cross_entropy(&logits, &targets).unwrap();
        assert!((total.scalar() - main_only.scalar()).abs() < 1e-12);
    }

    #[test]
    fn weighted_sum_matches_hand_arithmetic() {
        // main CE = ln 3 (uniform over 3), one aux with saturated-correct
        // logits (CE ~ 0): total = 1.0 * ln3 + 0.8 * 0.
        let tape = Tape::new();
        let logits = tape.leaf(Arr::zeros(IxDyn(&[1, 3, 2, 2])));
        let mut sat = Arr::zeros(IxDyn(&[1, 3, 2, 2]));
        sat.slice_axis_mut(ndarray::Axis(1), ndarray::Slice::from(0..1))
            .fill(1e4);
        let aux = tape.leaf(sat);
        let targets = Array3::<i64>::zeros((1, 2, 2));
        let w = LossWeights::new(1.0, 0.8).unwrap();
        let total = total_loss(&logits, &[aux], &targets, w).unwrap();
        assert!((total.scalar() - (3.0f64).ln()).abs() < 1e-9);
    }

    #[test]
    fn scalar_example_one_plus_point_four() {
        // Constructed so main CE = 1.0 and the single aux CE = 0.5:
        // total = 1.0 * 1.0 + 0.8 * 0.5 = 1.4.
        // A 1-pixel K=2 case with logit gap g has CE = ln(1 + exp(-g)).
        let gap_for = |ce: f64| -((ce.exp() - 1.0).ln());
        let tape = Tape::new();
        let g1 = gap_for(1.0);
        let main = tape.leaf(
            Arr::from_shape_vec(IxDyn(&[1, 2, 1, 1]), vec![g1, 0.0]).unwrap(),
        );
        let g2 = gap_for(0.5);
        let aux = tape.leaf(
            Arr::from_shape_vec(IxDyn(&[1, 2, 1, 1]), vec![g2, 0.0]).unwrap(),
        );
        let targets = Array3::<i64>::zeros((1, 1, 1));
        let w = LossWeights::new(1.0, 0.8).unwrap();
        let total = total_loss(&main, &[aux], &targets, w).unwrap();
        assert!((total.scalar() - 1.4).abs() < 1e-10);
    }

    #[test]
    fn aux_planes_upsample_to_target_resolution() {
        let tape = Tape::new();
        let logits = tape.leaf(Arr::zeros(IxDyn(&[1, 2, 4, 4])));
        let aux = tape.leaf(Arr::zeros(IxDyn(&[1, 2, 1, 1])));
        let targets = Array3::<i64>::ones((1, 4, 4));
        let w = LossWeights::new(1.0, 0.8).unwrap();
        let total = total_loss(&logits, &[aux], &targets, w).unwrap();
        // Both terms are uniform: ln2 + 0.8 ln2.
        assert!((total.scalar() - 1.8 * (2.0f64).ln()).abs() < 1e-12);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let tape = Tape::new();
        let logits = tape.leaf(Arr::zeros(IxDyn(&[1, 2, 4, 4])));
        let targets = Array3::<i64>::zeros((1, 2, 2));
        assert!(cross_entropy(&logits, &targets).is_err());
    }
}
