//! Group-wise hybrid interaction: global and local features are split into
//! four channel groups, merged per group, re-mixed with the full features,
//! gated and residually combined.

use rand_chacha::ChaCha8Rng;

use crate::blocks::{FusionMode, GatedConv};
use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::ConvSpec;
use crate::params::{Conv2dParams, ParamVisitor};

pub const GHIM_GROUPS: usize = 4;

#[derive(Clone, Debug)]
pub struct GhimParams {
    channels: usize,
    fusion: FusionMode,
    group: Vec<Conv2dParams>,
    mix: Conv2dParams,
    gate: GatedConv,
    post: Conv2dParams,
    out: Conv2dParams,
}

impl GhimParams {
    pub fn new(channels: usize, fusion: FusionMode, rng: &mut ChaCha8Rng) -> Self {
        assert!(channels % GHIM_GROUPS == 0, "channels must split into {GHIM_GROUPS} groups");
        let gw = channels / GHIM_GROUPS;
        let group_in = match fusion {
            FusionMode::Add => gw,
            FusionMode::Cat => 2 * gw,
        };
        GhimParams {
            channels,
            fusion,
            group: (0..GHIM_GROUPS).map(|_| Conv2dParams::new(ConvSpec::same(group_in, gw, 3), rng)).collect(),
            mix: Conv2dParams::new(ConvSpec::same(3 * channels, channels, 3), rng),
            gate: GatedConv::new(channels, rng),
            post: Conv2dParams::new(ConvSpec::same(channels, channels, 3), rng),
            out: Conv2dParams::new(ConvSpec::same(channels, channels, 1), rng),
        }
    }

    pub fn fusion(&self) -> FusionMode {
        self.fusion
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, global: NodeId, local: NodeId) -> Result<NodeId> {
        let gs = g.value(global).shape().to_vec();
        if gs != g.value(local).shape() {
            return Err(Error::dim("ghim_forward", format!("{gs:?} vs {:?}", g.value(local).shape())));
        }
        let c = gs[1];
        if c != self.channels || c % GHIM_GROUPS != 0 {
            return Err(Error::dim("ghim_forward", format!("{c} channels not splittable into {GHIM_GROUPS} groups of {}", self.channels / GHIM_GROUPS)));
        }
        let gw = c / GHIM_GROUPS;
        let mut merged = Vec::with_capacity(GHIM_GROUPS);
        for m in 0..GHIM_GROUPS {
            let gm = g.slice(global, 1, m * gw, gw)?;
            let lm = g.slice(local, 1, m * gw, gw)?;
            let pair = match self.fusion {
                FusionMode::Add => g.add(lm, gm)?,
                FusionMode::Cat => g.concat(&[lm, gm], 1)?,
            };
            merged.push(self.group[m].forward(g, &format!("{prefix}.g{}", m + 1), pair)?);
        }
        merged.push(global);
        merged.push(local);
        let cat = g.concat(&merged, 1)?;
        let mixed = self.mix.forward(g, &format!("{prefix}.mix"), cat)?;
        let gated = self.gate.apply(g, &format!("{prefix}.gate"), mixed)?;
        let resid = g.add(gated, mixed)?;
        let post = self.post.forward(g, &format!("{prefix}.post"), resid)?;
        self.out.forward(g, &format!("{prefix}.out"), post)
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        for (m, conv) in self.group.iter_mut().enumerate() {
            conv.visit(&format!("{prefix}.g{}", m + 1), v);
        }
        self.mix.visit(&format!("{prefix}.mix"), v);
        self.gate.visit(&format!("{prefix}.gate"), v);
        self.post.visit(&format!("{prefix}.post"), v);
        self.out.visit(&format!("{prefix}.out"), v);
    }
}
