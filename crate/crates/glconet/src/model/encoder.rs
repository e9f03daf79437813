//! Tiny built-in conv encoder standing in for a pretrained backbone: five
//! stride-2 stages emitting E1..E5 at halved resolution each.

use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::graph::{Graph, NodeId};
use crate::kernels::ConvSpec;
use crate::params::{Conv2dParams, ParamVisitor};

#[derive(Clone, Debug)]
pub struct EncoderParams {
    stages: Vec<Conv2dParams>,
}

impl EncoderParams {
    pub fn new(widths: [usize; 5], rng: &mut ChaCha8Rng) -> Self {
        let mut stages = Vec::with_capacity(5);
        let mut in_ch = 3;
        for &w in &widths {
            stages.push(Conv2dParams::new(ConvSpec::strided(in_ch, w, 3, 2), rng));
            in_ch = w;
        }
        EncoderParams { stages }
    }

    /// Returns [E1, E2, E3, E4, E5].
    pub fn forward(&self, g: &mut Graph, prefix: &str, image: NodeId) -> Result<[NodeId; 5]> {
        let mut outs = [0; 5];
        let mut x = image;
        for (i, stage) in self.stages.iter().enumerate() {
            let c = stage.forward(g, &format!("{prefix}.stage{}", i + 1), x)?;
            x = g.gelu(c)?;
            outs[i] = x;
        }
        Ok(outs)
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        for (i, stage) in self.stages.iter_mut().enumerate() {
            stage.visit(&format!("{prefix}.stage{}", i + 1), v);
        }
    }
}
