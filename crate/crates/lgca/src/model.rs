//! Full segmentation model: encoder, optional global class module, and the
//! cascaded context decoder.

use std::rc::Rc;

use ndarray::Array4;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Encoder, ModelError};
use crate::config::Config;
use crate::decoder::Decoder;
use crate::gca::GcaModule;
use crate::nn::{Bindings, Param, Registry};
use crate::tensor::{Tape, Var};

/// One forward pass: final logits plus every auxiliary pre-classification.
pub struct ModelOutput {
    pub logits: Var,
    /// Auxiliary logit planes at their native scales (global module first
    /// when present, then decoder stages deep to shallow).
    pub aux: Vec<Var>,
    pub bindings: Bindings,
}

pub struct SegModel {
    pub encoder: Encoder,
    pub gca: Option<GcaModule>,
    pub decoder: Decoder,
    registry: Registry,
    pub config: Config,
}

impl SegModel {
    /// Builds the model with weights drawn from the config's train seed.
    pub fn new(cfg: &Config) -> Result<SegModel, ModelError> {
        cfg.validate()
            .map_err(|e| ModelError::Invalid(e.to_string()))?;
        let mut reg = Registry::new();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.train.seed ^ 0x6d6f64656c);
        let encoder = Encoder::new(&mut reg, &cfg.encoder, &mut rng);
        let gca = if cfg.model.gca {
            Some(GcaModule::new(
                &mut reg,
                cfg.encoder.channels[cfg.model.cg_layer - 1],
                cfg.data.classes,
                cfg.model.cg_layer,
                &mut rng,
            )?)
        } else {
            None
        };
        let decoder = Decoder::new(&mut reg, cfg, &mut rng)?;
        Ok(SegModel {
            encoder,
            gca,
            decoder,
            registry: reg,
            config: cfg.clone(),
        })
    }

    /// Forward pass on a `[B, 3, H, W]` image batch.
    pub fn forward(&self, tape: &Rc<Tape>, images: &Array4<f64>) -> Result<ModelOutput, ModelError> {
        let mut bind = Bindings::new();
        let (_, _, h, w) = images.dim();
        let pyr = self.encoder.encode(tape, images, &mut bind)?;
        let mut aux = Vec::new();
        let centers = match &self.gca {
            Some(gca) => {
                let source = &pyr.get(gca.source_layer).data;
                let (cg, d_logits) = gca.forward(source, &mut bind);
                aux.push(d_logits);
                Some(cg)
            }
            None => None,
        };
        let state = self
            .decoder
            .run_cascade(&pyr, centers.as_ref(), &mut bind)?;
        aux.extend(state.aux.iter().cloned());
        let logits = self.decoder.predict(&state, h, w, &mut bind);
        Ok(ModelOutput {
            logits,
            aux,
            bindings: bind,
        })
    }

    pub fn params(&self) -> &[Param] {
        self.registry.params()
    }

    pub fn param_count(&self) -> usize {
        self.registry.total_len()
    }

    /// Copies values for every parameter whose name exists in both models.
    /// Returns the number of parameters copied.
    pub fn copy_matching_params(&self, from: &SegModel) -> usize {
        let mut copied = 0;
        for p in self.params() {
            if let Some(src) = from.params().iter().find(|q| q.name() == p.name()) {
                if src.shape() == p.shape() {
                    p.set_value(src.value());
                    copied += 1;
                }
            }
        }
        copied
    }

    /// Approximate multiplies for one forward pass at `h x w` input.
    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let mut total = self.encoder.macs(h, w);
        if let Some(gca) = &self.gca {
            let s = 4 << (gca.source_layer - 1);
            total += gca.pre.macs(h / s, w / s);
        }
        total += self.decoder.macs(h, w);
        total
    }

    /// Parameter count and forward multiplies, the standard efficiency pair.
    pub fn complexity(&self, h: usize, w: usize) -> Complexity {
        Complexity {
            params: self.param_count(),
            macs: self.macs(h, w),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Complexity {
    pub params: usize,
    pub macs: u64,
}
