//! The collaborative optimization blocks: multi-scale transformer block
//! (global path), progressive convolution block (local path) and the
//! group-wise hybrid interaction module that fuses the two, plus the
//! per-level wiring with ablation switches.

mod ghim;
mod mtb;
mod pcb;

pub use ghim::GhimParams;
pub use mtb::MtbParams;
pub use pcb::PcbParams;

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::ConvSpec;
use crate::params::{Conv2dParams, ParamVisitor};

/// How GHIM merges each global/local channel group.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum FusionMode {
    Add,
    Cat,
}

/// 3x3 convolution squashed to a multiplicative gate in (0,1).
#[derive(Clone, Debug)]
pub struct GatedConv {
    pub conv: Conv2dParams,
}

impl GatedConv {
    pub fn new(channels: usize, rng: &mut ChaCha8Rng) -> Self {
        GatedConv { conv: Conv2dParams::new(ConvSpec::same(channels, channels, 3), rng) }
    }

    pub fn gate(&self, g: &mut Graph, prefix: &str, x: NodeId) -> Result<NodeId> {
        let logits = self.conv.forward(g, prefix, x)?;
        g.sigmoid(logits)
    }

    /// gate(x) ⊙ x
    pub fn apply(&self, g: &mut Graph, prefix: &str, x: NodeId) -> Result<NodeId> {
        let gate = self.gate(g, prefix, x)?;
        g.mul(gate, x)
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.conv.visit(prefix, v);
    }
}

/// Which parts of the per-level optimization run.
#[derive(Clone, Copy, Debug)]
pub struct CosFlags {
    pub gpm: bool,
    pub lrm: bool,
    pub ghim: bool,
}

impl CosFlags {
    pub fn all() -> Self {
        CosFlags { gpm: true, lrm: true, ghim: true }
    }
}

/// One encoder level of the collaborative optimization strategy.
#[derive(Clone, Debug)]
pub struct CosLevelParams {
    pub flags: CosFlags,
    pub mtb: Option<MtbParams>,
    pub pcb: Option<PcbParams>,
    pub ghim: Option<GhimParams>,
    /// Plain concat + 3x3 fusion used when GHIM is disabled but both
    /// branches are present.
    pub concat_fuse: Option<Conv2dParams>,
}

/// Outputs of one COS level: the global and local branch features (when the
/// branch exists) and the fused feature.
pub struct CosOut {
    pub global: Option<NodeId>,
    pub local: Option<NodeId>,
    pub fused: NodeId,
}

impl CosLevelParams {
    pub fn new(channels: usize, scales: &[usize], fusion: FusionMode, flags: CosFlags, rng: &mut ChaCha8Rng) -> Self {
        let mtb = flags.gpm.then(|| MtbParams::new(channels, scales, rng));
        let pcb = flags.lrm.then(|| PcbParams::new(channels, scales, rng));
        let both = flags.gpm && flags.lrm;
        let ghim = (both && flags.ghim).then(|| GhimParams::new(channels, fusion, rng));
        let concat_fuse = (both && !flags.ghim)
            .then(|| Conv2dParams::new(ConvSpec::same(2 * channels, channels, 3), rng));
        CosLevelParams { flags, mtb, pcb, ghim, concat_fuse }
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, e: NodeId) -> Result<CosOut> {
        let global = match &self.mtb {
            Some(mtb) => Some(mtb.forward(g, &format!("{prefix}.mtb"), e)?),
            None => None,
        };
        let local = match &self.pcb {
            Some(pcb) => Some(pcb.forward(g, &format!("{prefix}.pcb"), e)?),
            None => None,
        };
        let fused = match (global, local) {
            (Some(gf), Some(lf)) => {
                if let Some(ghim) = &self.ghim {
                    ghim.forward(g, &format!("{prefix}.ghim"), gf, lf)?
                } else {
                    let fuse = self
                        .concat_fuse
                        .as_ref()
                        .ok_or_else(|| Error::contract("cos_forward", "missing concat fusion parameters"))?;
                    let cat = g.concat(&[gf, lf], 1)?;
                    fuse.forward(g, &format!("{prefix}.fuse"), cat)?
                }
            }
            (Some(gf), None) => gf,
            (None, Some(lf)) => lf,
            (None, None) => e,
        };
        Ok(CosOut { global, local, fused })
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        if let Some(mtb) = &mut self.mtb {
            mtb.visit(&format!("{prefix}.mtb"), v);
        }
        if let Some(pcb) = &mut self.pcb {
            pcb.visit(&format!("{prefix}.pcb"), v);
        }
        if let Some(ghim) = &mut self.ghim {
            ghim.visit(&format!("{prefix}.ghim"), v);
        }
        if let Some(fuse) = &mut self.concat_fuse {
            fuse.visit(&format!("{prefix}.fuse"), v);
        }
    }
}
