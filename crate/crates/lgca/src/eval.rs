//! Evaluation: sliding-tile inference with probability-space averaging over
//! scales and horizontal flip, then confusion-matrix scoring.

use ndarray::{s, Array2, Array3, Array4, Axis};
use thiserror::Error;

use crate::backbone::ModelError;
use crate::config::Config;
use crate::data::resize::{bilinear_planes, hflip_planes};
use crate::data::{tile_offsets, SegSample};
use crate::metrics::{metrics, ConfusionMatrix, MetricsError, MetricsReport};
use crate::model::SegModel;
use crate::tensor::Tape;

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("empty evaluation set")]
    EmptyDataset,
}

/// Snaps an edge length to the nearest encoder-compatible size.
fn snap32(v: f64) -> usize {
    (((v / 32.0).round() as usize).max(1)) * 32
}

/// Class-probability plane `[K, H, W]` from one forward pass per tile.
fn tile_probs(model: &SegModel, image: &Array3<f64>) -> Result<Array3<f64>, ModelError> {
    let (_, h, w) = image.dim();
    let mut batch = Array4::<f64>::zeros((1, 3, h, w));
    batch.index_axis_mut(Axis(0), 0).assign(image);
    let tape = Tape::new();
    let out = model.forward(&tape, &batch)?;
    let logits = out.logits.value();
    let k = logits.shape()[1];
    let mut probs = Array3::<f64>::zeros((k, h, w));
    for y in 0..h {
        for x in 0..w {
            let mut max = f64::NEG_INFINITY;
            for c in 0..k {
                max = max.max(logits[[0, c, y, x]]);
            }
            let mut sum = 0.0;
            for c in 0..k {
                let e = (logits[[0, c, y, x]] - max).exp();
                probs[[c, y, x]] = e;
                sum += e;
            }
            for c in 0..k {
                probs[[c, y, x]] /= sum;
            }
        }
    }
    Ok(probs)
}

/// Sliding-window probabilities over an arbitrarily sized image, overlap
/// averaged. Tiles clamp to the image when it is smaller than the window.
fn sliding_probs(
    model: &SegModel,
    image: &Array3<f64>,
    tile: usize,
    stride: usize,
) -> Result<Array3<f64>, ModelError> {
    let (_, h, w) = image.dim();
    let k = model.decoder.classes;
    let th = tile.min(h).min(w);
    let sd = stride.min(th);
    let mut acc = Array3::<f64>::zeros((k, h, w));
    let mut hits = Array2::<f64>::zeros((h, w));
    for &oy in &tile_offsets(h, th, sd) {
        for &ox in &tile_offsets(w, th, sd) {
            let patch = image.slice(s![.., oy..oy + th, ox..ox + th]).to_owned();
            let p = tile_probs(model, &patch)?;
            acc.slice_mut(s![.., oy..oy + th, ox..ox + th])
                .zip_mut_with(&p, |a, &b| *a += b);
            hits.slice_mut(s![oy..oy + th, ox..ox + th]).mapv_inplace(|v| v + 1.0);
        }
    }
    for c in 0..k {
        for y in 0..h {
            for x in 0..w {
                acc[[c, y, x]] /= hits[[y, x]];
            }
        }
    }
    Ok(acc)
}

/// Test-time-augmented class probabilities at the original resolution:
/// average over the configured scale set and (optionally) horizontal flip,
/// in probability space.
pub fn infer_probs(
    model: &SegModel,
    image: &Array3<f64>,
    cfg: &Config,
) -> Result<Array3<f64>, EvalError> {
    let (_, h, w) = image.dim();
    let k = model.decoder.classes;
    let mut acc = Array3::<f64>::zeros((k, h, w));
    for &scale in &cfg.eval.tta_scales {
        let (sh, sw) = (snap32(h as f64 * scale), snap32(w as f64 * scale));
        let scaled = bilinear_planes(image, sh, sw);
        let mut p = sliding_probs(model, &scaled, cfg.eval.tile, cfg.eval.stride)?;
        if cfg.eval.tta_flip {
            let flipped = hflip_planes(&scaled);
            let pf = sliding_probs(model, &flipped, cfg.eval.tile, cfg.eval.stride)?;
            // Un-flip before averaging so orientations align.
            let pf = hflip_planes(&pf);
            p.zip_mut_with(&pf, |a, &b| *a = (*a + b) / 2.0);
        }
        let back = bilinear_planes(&p, h, w);
        acc.zip_mut_with(&back, |a, &b| *a += b);
    }
    acc.mapv_inplace(|v| v / cfg.eval.tta_scales.len() as f64);
    Ok(acc)
}

pub fn argmax_mask(probs: &Array3<f64>) -> Array2<i64> {
    let (k, h, w) = probs.dim();
    Array2::from_shape_fn((h, w), |(y, x)| {
        let mut best = 0usize;
        let mut best_v = f64::NEG_INFINITY;
        for c in 0..k {
            if probs[[c, y, x]] > best_v {
                best_v = probs[[c, y, x]];
                best = c;
            }
        }
        best as i64
    })
}

/// Predicted index mask for one image under the configured TTA.
pub fn predict_mask(
    model: &SegModel,
    image: &Array3<f64>,
    cfg: &Config,
) -> Result<Array2<i64>, EvalError> {
    Ok(argmax_mask(&infer_probs(model, image, cfg)?))
}

pub struct EvalOutcome {
    pub report: MetricsReport,
    pub cm: ConfusionMatrix,
}

/// Evaluates the model over a sample set, accumulating one confusion matrix.
pub fn evaluate(
    model: &SegModel,
    samples: &[SegSample],
    cfg: &Config,
) -> Result<EvalOutcome, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::EmptyDataset);
    }
    let mut cm = ConfusionMatrix::new(cfg.data.classes);
    for sample in samples {
        let mask = predict_mask(model, &sample.image, cfg)?;
        cm.accumulate(&mask, &sample.mask)?;
    }
    let report = metrics(&cm, &cfg.data.class_names);
    Ok(EvalOutcome { report, cm })
}
