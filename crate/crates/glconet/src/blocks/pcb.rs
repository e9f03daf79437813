//! Progressive convolution block: stage one spreads the input through atrous
//! branches (rates = the scale set), stage two repeats the topology with
//! depthwise kernels, and both stages aggregate progressively against the
//! smallest-scale branch before a residual.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::ConvSpec;
use crate::params::{Conv2dParams, ParamVisitor};

/// One multi-receptive-field branch: the spatial conv then two 1x1 convs
/// (width kept, GELU between).
#[derive(Clone, Debug)]
struct Branch {
    spatial: Conv2dParams,
    pw1: Conv2dParams,
    pw2: Conv2dParams,
}

impl Branch {
    fn atrous(channels: usize, rate: usize, rng: &mut ChaCha8Rng) -> Self {
        Branch {
            spatial: Conv2dParams::new(ConvSpec::same_dilated(channels, channels, 3, rate), rng),
            pw1: Conv2dParams::new(ConvSpec::same(channels, channels, 1), rng),
            pw2: Conv2dParams::new(ConvSpec::same(channels, channels, 1), rng),
        }
    }

    fn depthwise(channels: usize, size: usize, rng: &mut ChaCha8Rng) -> Self {
        Branch {
            spatial: Conv2dParams::new(ConvSpec::depthwise(channels, size), rng),
            pw1: Conv2dParams::new(ConvSpec::same(channels, channels, 1), rng),
            pw2: Conv2dParams::new(ConvSpec::same(channels, channels, 1), rng),
        }
    }

    fn forward(&self, g: &mut Graph, prefix: &str, x: NodeId) -> Result<NodeId> {
        let s = self.spatial.forward(g, &format!("{prefix}.conv"), x)?;
        let p = self.pw1.forward(g, &format!("{prefix}.pw1"), s)?;
        let a = g.gelu(p)?;
        self.pw2.forward(g, &format!("{prefix}.pw2"), a)
    }

    fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.spatial.visit(&format!("{prefix}.conv"), v);
        self.pw1.visit(&format!("{prefix}.pw1"), v);
        self.pw2.visit(&format!("{prefix}.pw2"), v);
    }
}

/// Branches + progressive 3x3 fusions for one stage.
#[derive(Clone, Debug)]
struct Stage {
    branches: Vec<Branch>,
    progressive: Vec<Conv2dParams>,
    fuse: Conv2dParams,
}

impl Stage {
    fn new(channels: usize, scales: &[usize], atrous: bool, rng: &mut ChaCha8Rng) -> Self {
        let branches = scales
            .iter()
            .map(|&s| if atrous { Branch::atrous(channels, s, rng) } else { Branch::depthwise(channels, s, rng) })
            .collect();
        let progressive = scales[1..]
            .iter()
            .map(|_| Conv2dParams::new(ConvSpec::same(3 * channels, channels, 3), rng))
            .collect();
        let fuse = Conv2dParams::new(ConvSpec::same(scales.len() * channels, channels, 3), rng);
        Stage { branches, progressive, fuse }
    }

    fn forward(&self, g: &mut Graph, prefix: &str, scales: &[usize], x: NodeId) -> Result<NodeId> {
        let mut branch_out = Vec::with_capacity(scales.len());
        for (si, &n) in scales.iter().enumerate() {
            branch_out.push(self.branches[si].forward(g, &format!("{prefix}.b{n}"), x)?);
        }
        let base = branch_out[0];
        let mut fuse_in = Vec::with_capacity(scales.len());
        for (pi, &bk) in branch_out[1..].iter().enumerate() {
            let cat = g.concat(&[base, bk, x], 1)?;
            fuse_in.push(self.progressive[pi].forward(g, &format!("{prefix}.p{}", scales[pi + 1]), cat)?);
        }
        fuse_in.push(base);
        let cat = g.concat(&fuse_in, 1)?;
        let fused = self.fuse.forward(g, &format!("{prefix}.fuse"), cat)?;
        g.add(fused, x)
    }

    fn visit(&mut self, prefix: &str, scales: &[usize], v: &mut dyn ParamVisitor) {
        for (si, &n) in scales.iter().enumerate() {
            self.branches[si].visit(&format!("{prefix}.b{n}"), v);
        }
        for (pi, p) in self.progressive.iter_mut().enumerate() {
            p.visit(&format!("{prefix}.p{}", scales[pi + 1]), v);
        }
        self.fuse.visit(&format!("{prefix}.fuse"), v);
    }
}

#[derive(Clone, Debug)]
pub struct PcbParams {
    channels: usize,
    scales: Vec<usize>,
    stage1: Stage,
    stage2: Stage,
    out: Conv2dParams,
}

impl PcbParams {
    pub fn new(channels: usize, scales: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(!scales.is_empty(), "scale set must be nonempty");
        PcbParams {
            channels,
            scales: scales.to_vec(),
            stage1: Stage::new(channels, scales, true, rng),
            stage2: Stage::new(channels, scales, false, rng),
            out: Conv2dParams::new(ConvSpec::same(2 * channels, channels, 3), rng),
        }
    }

    pub fn forward(&self, g: &mut Graph, prefix: &str, e: NodeId) -> Result<NodeId> {
        let (_, c, _, _) = g.value(e).dims4()?;
        if c != self.channels {
            return Err(Error::dim("pcb_forward", format!("input has {c} channels, block wants {}", self.channels)));
        }
        let l1 = self.stage1.forward(g, &format!("{prefix}.s1"), &self.scales, e)?;
        let l2 = self.stage2.forward(g, &format!("{prefix}.s2"), &self.scales, l1)?;
        let cat = g.concat(&[l2, e], 1)?;
        let mixed = self.out.forward(g, &format!("{prefix}.out"), cat)?;
        g.add(mixed, e)
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        let scales = self.scales.clone();
        self.stage1.visit(&format!("{prefix}.s1"), &scales, v);
        self.stage2.visit(&format!("{prefix}.s2"), &scales, v);
        self.out.visit(&format!("{prefix}.out"), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::test_util::{rand_tensor, zero_params};
    use crate::graph::{gradcheck, GRADCHECK_STEP, GRADCHECK_TOL};
    use crate::kernels::conv2d_forward;
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn zero_weights_make_block_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut pcb = PcbParams::new(8, &[3, 5, 7], &mut rng);
        zero_params(|v| pcb.visit("pcb", v));
        let input = rand_tensor(&[1, 8, 9, 9], 2);
        let mut g = Graph::new();
        let e = g.leaf(input.clone());
        let out = pcb.forward(&mut g, "pcb", e).unwrap();
        assert_eq!(g.value(out).data(), input.data());
    }

    #[test]
    fn shape_preserved_for_all_scale_subsets() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for scales in [&[3usize][..], &[5], &[7], &[3, 5], &[3, 5, 7]] {
            let pcb = PcbParams::new(4, scales, &mut rng);
            let mut g = Graph::new();
            let e = g.leaf(rand_tensor(&[1, 4, 8, 8], 4));
            let out = pcb.forward(&mut g, "pcb", e).unwrap();
            assert_eq!(g.value(out).shape(), &[1, 4, 8, 8], "scales {scales:?}");
        }
    }

    #[test]
    fn receptive_field_probe_on_isolated_branch() {
        // One-hot input through the rate-d atrous conv alone: the response
        // extends exactly d pixels from center, with taps d apart.
        for rate in [3usize, 7] {
            let mut x = Tensor::zeros(&[1, 1, 17, 17]);
            x.data_mut()[8 * 17 + 8] = 1.0;
            let w = Tensor::ones(&[1, 1, 3, 3]);
            let spec = ConvSpec::same_dilated(1, 1, 3, rate);
            let y = conv2d_forward(&x, &w, None, &spec).unwrap();
            let mut max_reach = 0usize;
            for r in 0..17usize {
                for c in 0..17usize {
                    if y.data()[r * 17 + c] != 0.0 {
                        max_reach = max_reach.max(r.abs_diff(8)).max(c.abs_diff(8));
                    }
                }
            }
            assert_eq!(max_reach, rate, "rate {rate}");
        }
    }

    #[test]
    fn pcb_gradcheck_reduced_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pcb = PcbParams::new(4, &[3], &mut rng);
        let err = gradcheck(
            |g, x| {
                let y = pcb.forward(g, "pcb", x)?;
                g.sum_all(y)
            },
            &rand_tensor(&[1, 4, 6, 6], 6),
            GRADCHECK_STEP,
        )
        .unwrap();
        assert!(err < GRADCHECK_TOL, "pcb rel err {err}");
    }
}
