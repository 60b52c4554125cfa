//! Four-stage decoder cascade: context attention on the deepest feature,
//! fuse upward with each shallower feature, re-apply, then project the
//! concatenated enhanced maps to per-pixel class logits.

use rand_chacha::ChaCha8Rng;

use crate::backbone::{ModelError, PyramidFeatures};
use crate::config::{Config, NormKind};
use crate::lca::{ContextMode, LcaStage, StageSpec};
use crate::nn::{Act, Bindings, Conv2d, ConvBlock, Init, Registry};
use crate::tensor::{FactorLayout, Var};

/// Enhanced per-stage maps (deep to shallow) plus auxiliary logits.
pub struct CascadeState {
    pub outputs: Vec<Var>,
    pub aux: Vec<Var>,
}

pub struct Decoder {
    /// Deep-to-shallow stage slots; `None` runs the fuse-only baseline.
    stages: Vec<Option<LcaStage>>,
    fuses: Vec<ConvBlock>,
    head: Conv2d,
    pub width: usize,
    pub classes: usize,
}

impl Decoder {
    pub fn new(
        reg: &mut Registry,
        cfg: &Config,
        rng: &mut ChaCha8Rng,
    ) -> Result<Decoder, ModelError> {
        let m = &cfg.model;
        let enc = cfg.encoder.channels;
        let d = m.width;
        let k = cfg.data.classes;
        let mode = match (m.gca, m.lca) {
            (true, true) => Some(ContextMode::LocalGlobal),
            (false, true) => Some(ContextMode::LocalOnly),
            (true, false) => Some(ContextMode::GlobalOnly),
            (false, false) => None,
        };
        let atb_layout = FactorLayout::new(m.atb_scale, m.atb_rotation, m.atb_offset);
        let value_in = enc[m.cg_layer - 1];
        let mut stages = Vec::new();
        // Stage channel widths, deep to shallow: the deepest stage runs on
        // the raw backbone output, the rest on fused maps of width d.
        let stage_channels = [enc[3], d, d, d];
        for (i, &c) in stage_channels.iter().enumerate() {
            let stage = match mode {
                None => None,
                Some(mode) => Some(LcaStage::new(
                    reg,
                    &format!("decoder.stage{}", 4 - i),
                    StageSpec {
                        mode,
                        channels: c,
                        value_in,
                        classes: k,
                        heads: m.heads,
                        patches: m.patches,
                        atb: atb_layout.any().then_some(atb_layout),
                        atb_slope: m.atb_leaky_slope,
                        tie_value_heads: m.tie_value_heads,
                        identity_init: false,
                    },
                    rng,
                )?),
            };
            stages.push(stage);
        }
        let norm = cfg.encoder.norm;
        let fuses = vec![
            fuse_block(reg, "decoder.fuse3", enc[3] + enc[2], d, norm, rng),
            fuse_block(reg, "decoder.fuse2", d + enc[1], d, norm, rng),
            fuse_block(reg, "decoder.fuse1", d + enc[0], d, norm, rng),
        ];
        let head_in = enc[3] + 3 * d;
        let head = Conv2d::new(reg, "decoder.head", head_in, k, 1, 1, 0, true, Init::He, rng);
        Ok(Decoder {
            stages,
            fuses,
            head,
            width: d,
            classes: k,
        })
    }

    fn stage_forward(
        &self,
        idx: usize,
        x: &Var,
        cg: Option<&Var>,
        bind: &mut Bindings,
    ) -> Result<(Var, Option<Var>), ModelError> {
        match &self.stages[idx] {
            Some(stage) => stage.forward(x, cg, bind, None),
            None => Ok((x.clone(), None)),
        }
    }

    /// Runs the full cascade; `global_centers` may be `None` only when the
    /// global module is disabled.
    pub fn run_cascade(
        &self,
        pyr: &PyramidFeatures,
        global_centers: Option<&Var>,
        bind: &mut Bindings,
    ) -> Result<CascadeState, ModelError> {
        let mut outputs = Vec::with_capacity(4);
        let mut aux = Vec::new();
        let (out4, aux4) = self.stage_forward(0, &pyr.get(4).data, global_centers, bind)?;
        aux.extend(aux4);
        outputs.push(out4);
        for (i, stage_id) in [3usize, 2, 1].iter().enumerate() {
            let shallow = &pyr.get(*stage_id).data;
            let ss = shallow.shape();
            let up = outputs[i].upsample_bilinear(ss[2], ss[3]);
            let fused = self.fuses[i].forward(&Var::concat(1, &[&up, shallow]), bind);
            let (out, stage_aux) = self.stage_forward(i + 1, &fused, global_centers, bind)?;
            aux.extend(stage_aux);
            outputs.push(out);
        }
        Ok(CascadeState { outputs, aux })
    }

    /// Fuses the enhanced maps into `[B, K, H, W]` logits at the input
    /// resolution `(h, w)`.
    pub fn predict(
        &self,
        state: &CascadeState,
        h: usize,
        w: usize,
        bind: &mut Bindings,
    ) -> Var {
        let (qh, qw) = (h / 4, w / 4);
        let upsampled: Vec<Var> = state
            .outputs
            .iter()
            .map(|o| o.upsample_bilinear(qh, qw))
            .collect();
        // Shallow-to-deep concat order keeps the finest map first.
        let refs: Vec<&Var> = upsampled.iter().rev().collect();
        let cat = Var::concat(1, &refs);
        let logits = self.head.forward(&cat, bind);
        logits.upsample_bilinear(h, w)
    }

    pub fn stage(&self, stage_id: usize) -> Option<&LcaStage> {
        self.stages[4 - stage_id].as_ref()
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let mut total = 0u64;
        let dims = [(h / 32, w / 32), (h / 16, w / 16), (h / 8, w / 8), (h / 4, w / 4)];
        for (i, stage) in self.stages.iter().enumerate() {
            if let Some(s) = stage {
                total += s.macs(dims[i].0, dims[i].1);
            }
        }
        for (i, f) in self.fuses.iter().enumerate() {
            let (fh, fw) = dims[i + 1];
            total += f.conv.macs(fh, fw);
        }
        total += self.head.macs(h / 4, w / 4);
        total
    }
}

fn fuse_block(
    reg: &mut Registry,
    name: &str,
    cin: usize,
    cout: usize,
    norm: NormKind,
    rng: &mut ChaCha8Rng,
) -> ConvBlock {
    ConvBlock::new(reg, name, cin, cout, 3, 1, norm, Act::Relu, rng)
}
