//! Multi-scale encoder: four stride-2 stages emitting features at 1/4, 1/8,
//! 1/16 and 1/32 of the input resolution. The scale/channel contract is the
//! interface; the convolutional stack behind it is deliberately small and
//! swappable.

use ndarray::Array4;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::config::EncoderConfig;
use crate::nn::{Act, Bindings, ConvBlock, Registry};
use crate::tensor::{Tape, Var};

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("input {h}x{w} not divisible by 32")]
    BadInputSize { h: usize, w: usize },
    #[error("{0}")]
    Invalid(String),
}

/// Feature plane plus its downscale factor relative to the network input.
pub struct FeatureMap {
    pub data: Var,
    pub scale: usize,
}

impl FeatureMap {
    pub fn channels(&self) -> usize {
        self.data.shape()[1]
    }
}

/// Backbone output, shallow to deep.
pub struct PyramidFeatures {
    pub maps: Vec<FeatureMap>,
}

impl PyramidFeatures {
    pub fn get(&self, stage: usize) -> &FeatureMap {
        &self.maps[stage - 1]
    }
}

/// Two conv blocks per stage; the first carries the stride.
struct Stage {
    down: ConvBlock,
    refine: ConvBlock,
}

pub struct Encoder {
    stem: ConvBlock,
    stages: Vec<Stage>,
    pub channels: [usize; 4],
}

impl Encoder {
    pub fn new(reg: &mut Registry, cfg: &EncoderConfig, rng: &mut ChaCha8Rng) -> Encoder {
        let act = if cfg.leaky_act {
            Act::LeakyRelu(0.01)
        } else {
            Act::Relu
        };
        let c = cfg.channels;
        let stem = ConvBlock::new(reg, "encoder.stem", 3, c[0], 3, 2, cfg.norm, act, rng);
        let mut stages = Vec::new();
        let ins = [c[0], c[0], c[1], c[2]];
        for (i, (&cin, &cout)) in ins.iter().zip(c.iter()).enumerate() {
            stages.push(Stage {
                down: ConvBlock::new(
                    reg,
                    &format!("encoder.stage{}.down", i + 1),
                    cin,
                    cout,
                    3,
                    2,
                    cfg.norm,
                    act,
                    rng,
                ),
                refine: ConvBlock::new(
                    reg,
                    &format!("encoder.stage{}.refine", i + 1),
                    cout,
                    cout,
                    3,
                    1,
                    cfg.norm,
                    act,
                    rng,
                ),
            });
        }
        Encoder {
            stem,
            stages,
            channels: c,
        }
    }

    /// Runs the encoder; input spatial dims must be multiples of 32.
    pub fn encode(
        &self,
        tape: &std::rc::Rc<Tape>,
        images: &Array4<f64>,
        bind: &mut Bindings,
    ) -> Result<PyramidFeatures, ModelError> {
        let (_, _, h, w) = images.dim();
        if h % 32 != 0 || w % 32 != 0 {
            return Err(ModelError::BadInputSize { h, w });
        }
        let x = tape.leaf(images.clone().into_dyn());
        Ok(self.forward(&x, bind))
    }

    pub fn forward(&self, x: &Var, bind: &mut Bindings) -> PyramidFeatures {
        let mut maps = Vec::with_capacity(4);
        let mut y = self.stem.forward(x, bind); // 1/2
        for (i, stage) in self.stages.iter().enumerate() {
            y = stage.down.forward(&y, bind);
            y = stage.refine.forward(&y, bind);
            maps.push(FeatureMap {
                data: y.clone(),
                scale: 4 << i,
            });
        }
        PyramidFeatures { maps }
    }

    pub fn macs(&self, h: usize, w: usize) -> u64 {
        let mut total = self.stem.conv.macs(h / 2, w / 2);
        for (i, stage) in self.stages.iter().enumerate() {
            let s = 4 << i;
            total += stage.down.conv.macs(h / s, w / s);
            total += stage.refine.conv.macs(h / s, w / s);
        }
        total
    }
}
