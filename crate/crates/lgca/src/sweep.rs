//! Ablation sweeps: train and evaluate a grid of single-axis config
//! variations with everything else (seeds included) held fixed.

use std::str::FromStr;

use serde::Serialize;
use thiserror::Error;

use crate::config::{Config, ConfigError};
use crate::eval::{evaluate, EvalError};
use crate::model::SegModel;
use crate::train::{eval_set, train, training_set, TrainError};

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("unknown ablation axis `{0}` (expected structure|cg_layer|atb_factors|patches|heads|loss_weight)")]
    UnknownAxis(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Model(#[from] crate::backbone::ModelError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AblationAxis {
    Structure,
    CgLayer,
    AtbFactors,
    Patches,
    Heads,
    LossWeight,
}

impl FromStr for AblationAxis {
    type Err = SweepError;

    fn from_str(s: &str) -> Result<AblationAxis, SweepError> {
        Ok(match s {
            "structure" => AblationAxis::Structure,
            "cg_layer" => AblationAxis::CgLayer,
            "atb_factors" => AblationAxis::AtbFactors,
            "patches" => AblationAxis::Patches,
            "heads" => AblationAxis::Heads,
            "loss_weight" => AblationAxis::LossWeight,
            other => return Err(SweepError::UnknownAxis(other.to_string())),
        })
    }
}

impl AblationAxis {
    pub fn name(&self) -> &'static str {
        match self {
            AblationAxis::Structure => "structure",
            AblationAxis::CgLayer => "cg_layer",
            AblationAxis::AtbFactors => "atb_factors",
            AblationAxis::Patches => "patches",
            AblationAxis::Heads => "heads",
            AblationAxis::LossWeight => "loss_weight",
        }
    }

    /// The grid a bare sweep runs: one row per published table entry.
    pub fn default_grid(&self) -> Vec<GridPoint> {
        let point = |label: &str, overrides: &[(&str, &str)]| GridPoint {
            label: label.to_string(),
            overrides: overrides
                .iter()
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .collect(),
        };
        match self {
            AblationAxis::Structure => vec![
                point("gca+lca", &[("model.gca", "true"), ("model.lca", "true")]),
                point("lca_only", &[("model.gca", "false"), ("model.lca", "true")]),
                point("gca_only", &[("model.gca", "true"), ("model.lca", "false")]),
                point("baseline", &[("model.gca", "false"), ("model.lca", "false")]),
            ],
            AblationAxis::CgLayer => (1..=4)
                .map(|l| {
                    point(
                        &format!("layer{l}"),
                        &[("model.cg_layer", &l.to_string())],
                    )
                })
                .collect(),
            AblationAxis::AtbFactors => vec![
                point(
                    "scale+rot+offset",
                    &[("model.atb_scale", "true"), ("model.atb_rotation", "true"), ("model.atb_offset", "true")],
                ),
                point(
                    "no_scale",
                    &[("model.atb_scale", "false"), ("model.atb_rotation", "true"), ("model.atb_offset", "true")],
                ),
                point(
                    "no_rotation",
                    &[("model.atb_scale", "true"), ("model.atb_rotation", "false"), ("model.atb_offset", "true")],
                ),
                point(
                    "no_offset",
                    &[("model.atb_scale", "true"), ("model.atb_rotation", "true"), ("model.atb_offset", "false")],
                ),
                point(
                    "none",
                    &[("model.atb_scale", "false"), ("model.atb_rotation", "false"), ("model.atb_offset", "false")],
                ),
            ],
            AblationAxis::Patches => ["1x1", "2x2", "4x4", "8x8", "16x16"]
                .iter()
                .map(|p| point(p, &[("model.patches", p)]))
                .collect(),
            AblationAxis::Heads => [1usize, 2, 4, 8, 16]
                .iter()
                .map(|h| point(&h.to_string(), &[("model.heads", &h.to_string())]))
                .collect(),
            AblationAxis::LossWeight => ["0.2", "0.4", "0.6", "0.8", "1.0"]
                .iter()
                .map(|w| point(w, &[("loss.lambda_aux", w)]))
                .collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct GridPoint {
    pub label: String,
    pub overrides: Vec<(String, String)>,
}

#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub label: String,
    pub mean_iou: f64,
    pub mean_acc: f64,
    pub mean_f1: f64,
    pub final_loss: f64,
    pub params: usize,
    pub macs: u64,
}

/// Trains and evaluates one model per grid point, all else fixed.
pub fn ablation_sweep(
    axis: AblationAxis,
    base: &Config,
    grid: Option<Vec<GridPoint>>,
    mut progress: impl FnMut(&str),
) -> Result<Vec<SweepRow>, SweepError> {
    let grid = grid.unwrap_or_else(|| axis.default_grid());
    let mut rows = Vec::with_capacity(grid.len());
    for gp in grid {
        let mut cfg = base.clone();
        for (k, v) in &gp.overrides {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        progress(&gp.label);
        let model = SegModel::new(&cfg)?;
        let data = training_set(&cfg)?;
        let outcome = train(&model, &data, &cfg, None, |_, _, _| {})?;
        let eval_data = eval_set(&cfg)?;
        let result = evaluate(&model, &eval_data, &cfg)?;
        let (h, w) = (cfg.data.tile, cfg.data.tile);
        rows.push(SweepRow {
            label: gp.label,
            mean_iou: result.report.mean_iou,
            mean_acc: result.report.mean_acc,
            mean_f1: result.report.mean_f1,
            final_loss: outcome.final_loss().unwrap_or(f64::NAN),
            params: model.param_count(),
            macs: model.macs(h, w),
        });
    }
    Ok(rows)
}

/// Tab-separated table with a header, one row per grid point.
pub fn render_table(axis: AblationAxis, rows: &[SweepRow]) -> String {
    let mut out = format!("{}\tmIoU\tmAcc\tmF1\tfinal_loss\tparams\tmacs\n", axis.name());
    for r in rows {
        out.push_str(&format!(
            "{}\t{:.4}\t{:.4}\t{:.4}\t{:.4}\t{}\t{}\n",
            r.label, r.mean_iou, r.mean_acc, r.mean_f1, r.final_loss, r.params, r.macs
        ));
    }
    out
}
