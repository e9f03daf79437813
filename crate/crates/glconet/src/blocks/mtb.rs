//! Multi-scale transformer block: channel-transposed self-attention at
//! depthwise scales plus a gated multi-scale feed-forward stage.
//!
//! Attention operates between channels: queries/keys/values are projected by
//! a 1x1 conv followed by an n x n depthwise conv per scale, reshaped to
//! C x HW, and the C x C attention map is softmax(Q K^T / sqrt(HW)) per row.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels::ConvSpec;
use crate::params::{Conv2dParams, LayerNormParams, ParamVisitor};

/// Per-scale 1x1 + depthwise projection pair.
#[derive(Clone, Debug)]
struct Projection {
    pw: Conv2dParams,
    dw: Conv2dParams,
}

impl Projection {
    fn new(channels: usize, scale: usize, rng: &mut ChaCha8Rng) -> Self {
        Projection {
            pw: Conv2dParams::new(ConvSpec::same(channels, channels, 1), rng),
            dw: Conv2dParams::new(ConvSpec::depthwise(channels, scale), rng),
        }
    }

    fn forward(&self, g: &mut Graph, prefix: &str, scale: usize, x: NodeId) -> Result<NodeId> {
        let p = self.pw.forward(g, &format!("{prefix}.pw{scale}"), x)?;
        self.dw.forward(g, &format!("{prefix}.dw{scale}"), p)
    }

    fn visit(&mut self, prefix: &str, scale: usize, v: &mut dyn ParamVisitor) {
        self.pw.visit(&format!("{prefix}.pw{scale}"), v);
        self.dw.visit(&format!("{prefix}.dw{scale}"), v);
    }
}

#[derive(Clone, Debug)]
pub struct MtbParams {
    channels: usize,
    scales: Vec<usize>,
    ln1: LayerNormParams,
    q: Vec<Projection>,
    k: Vec<Projection>,
    v: Vec<Projection>,
    attn_fuse: Conv2dParams,
    ln2: LayerNormParams,
    ffn_gate: Vec<Projection>,
    ffn_value: Vec<Projection>,
    ffn_fuse: Conv2dParams,
    out: Conv2dParams,
}

impl MtbParams {
    pub fn new(channels: usize, scales: &[usize], rng: &mut ChaCha8Rng) -> Self {
        assert!(!scales.is_empty(), "scale set must be nonempty");
        let proj_set = |rng: &mut ChaCha8Rng| -> Vec<Projection> {
            scales.iter().map(|&n| Projection::new(channels, n, rng)).collect()
        };
        let fused_in = scales.len() * channels;
        MtbParams {
            channels,
            scales: scales.to_vec(),
            ln1: LayerNormParams::new(channels),
            q: proj_set(rng),
            k: proj_set(rng),
            v: proj_set(rng),
            attn_fuse: Conv2dParams::new(ConvSpec::same(fused_in, channels, 1), rng),
            ln2: LayerNormParams::new(channels),
            ffn_gate: proj_set(rng),
            ffn_value: proj_set(rng),
            ffn_fuse: Conv2dParams::new(ConvSpec::same(fused_in, channels, 1), rng),
            out: Conv2dParams::new(ConvSpec::same(2 * channels, channels, 3), rng),
        }
    }

    pub fn scales(&self) -> &[usize] {
        &self.scales
    }

    /// First stage: transpose attention per scale, concatenated, fused and
    /// residually added to the input. Also returns every C x C attention map
    /// node (one per sample and scale) for inspection.
    pub fn attention(&self, g: &mut Graph, prefix: &str, e: NodeId) -> Result<(NodeId, Vec<NodeId>)> {
        let (b, c, h, w) = g.value(e).dims4()?;
        if c != self.channels {
            return Err(Error::dim("mtb_attention", format!("input has {c} channels, block wants {}", self.channels)));
        }
        let xn = self.ln1.forward(g, &format!("{prefix}.ln1"), e)?;

        let mut q_full = Vec::with_capacity(self.scales.len());
        let mut k_full = Vec::with_capacity(self.scales.len());
        let mut v_full = Vec::with_capacity(self.scales.len());
        for (si, &n) in self.scales.iter().enumerate() {
            q_full.push(self.q[si].forward(g, &format!("{prefix}.q"), n, xn)?);
            k_full.push(self.k[si].forward(g, &format!("{prefix}.k"), n, xn)?);
            v_full.push(self.v[si].forward(g, &format!("{prefix}.v"), n, xn)?);
        }

        let scale_factor = 1.0 / ((h * w) as f64).sqrt();
        let mut maps = Vec::new();
        let mut per_sample = Vec::with_capacity(b);
        for bi in 0..b {
            let mut branches = Vec::with_capacity(self.scales.len());
            for si in 0..self.scales.len() {
                let take = |g: &mut Graph, full: NodeId| -> Result<NodeId> {
                    if b == 1 {
                        Ok(full)
                    } else {
                        g.slice(full, 0, bi, 1)
                    }
                };
                let qs = take(g, q_full[si])?;
                let ks = take(g, k_full[si])?;
                let vs = take(g, v_full[si])?;
                let qm = g.reshape(qs, vec![c, h * w])?;
                let km = g.reshape(ks, vec![c, h * w])?;
                let kt = g.transpose2(km)?;
                let vm = g.reshape(vs, vec![c, h * w])?;
                let scores = g.matmul(qm, kt)?;
                let scaled = g.affine(scores, scale_factor, 0.0)?;
                let attn = g.softmax(scaled, 1)?;
                maps.push(attn);
                let mixed = g.matmul(attn, vm)?;
                branches.push(g.reshape(mixed, vec![1, c, h, w])?);
            }
            per_sample.push(g.concat(&branches, 1)?);
        }
        let cat = if b == 1 { per_sample[0] } else { g.concat(&per_sample, 0)? };
        let fused = self.attn_fuse.forward(g, &format!("{prefix}.attn.fuse"), cat)?;
        let out = g.add(fused, e)?;
        Ok((out, maps))
    }

    /// Second stage: gated multi-scale feed-forward with residual.
    pub fn ffn(&self, g: &mut Graph, prefix: &str, x: NodeId) -> Result<NodeId> {
        let xn = self.ln2.forward(g, &format!("{prefix}.ln2"), x)?;
        let mut branches = Vec::with_capacity(self.scales.len());
        for (si, &n) in self.scales.iter().enumerate() {
            let gate_lin = self.ffn_gate[si].forward(g, &format!("{prefix}.ffn.a"), n, xn)?;
            let gate = g.gelu(gate_lin)?;
            let value = self.ffn_value[si].forward(g, &format!("{prefix}.ffn.b"), n, xn)?;
            branches.push(g.mul(gate, value)?);
        }
        let cat = g.concat(&branches, 1)?;
        let fused = self.ffn_fuse.forward(g, &format!("{prefix}.ffn.fuse"), cat)?;
        g.add(fused, x)
    }

    /// Full block: attention, feed-forward, then the closing 3x3 fusion with
    /// the block input and a second residual.
    pub fn forward(&self, g: &mut Graph, prefix: &str, e: NodeId) -> Result<NodeId> {
        let (g1, _) = self.attention(g, prefix, e)?;
        let g2 = self.ffn(g, prefix, g1)?;
        let cat = g.concat(&[g2, e], 1)?;
        let mixed = self.out.forward(g, &format!("{prefix}.out"), cat)?;
        g.add(mixed, e)
    }

    pub fn visit(&mut self, prefix: &str, v: &mut dyn ParamVisitor) {
        self.ln1.visit(&format!("{prefix}.ln1"), v);
        let scales = self.scales.clone();
        for (si, &n) in scales.iter().enumerate() {
            self.q[si].visit(&format!("{prefix}.q"), n, v);
            self.k[si].visit(&format!("{prefix}.k"), n, v);
            self.v[si].visit(&format!("{prefix}.v"), n, v);
        }
        self.attn_fuse.visit(&format!("{prefix}.attn.fuse"), v);
        self.ln2.visit(&format!("{prefix}.ln2"), v);
        for (si, &n) in scales.iter().enumerate() {
            self.ffn_gate[si].visit(&format!("{prefix}.ffn.a"), n, v);
            self.ffn_value[si].visit(&format!("{prefix}.ffn.b"), n, v);
        }
        self.ffn_fuse.visit(&format!("{prefix}.ffn.fuse"), v);
        self.out.visit(&format!("{prefix}.out"), v);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::blocks::test_util::{rand_tensor, zero_params};
    use crate::graph::{gradcheck, GRADCHECK_STEP, GRADCHECK_TOL};
    use crate::tensor::Tensor;
    use rand::SeedableRng;

    #[test]
    fn zero_query_projection_gives_uniform_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = 8usize;
        let mut mtb = MtbParams::new(c, &[3], &mut rng);
        let proj = &mut mtb.q[0];
        for p in [&mut proj.pw, &mut proj.dw] {
            for v in p.weight.data_mut() {
                *v = 0.0;
            }
            for v in p.bias.data_mut() {
                *v = 0.0;
            }
        }
        let mut g = Graph::new();
        let e = g.leaf(rand_tensor(&[1, c, 5, 5], 2));
        let (_, maps) = mtb.attention(&mut g, "mtb", e).unwrap();
        assert_eq!(maps.len(), 1);
        for &v in g.value(maps[0]).data() {
            assert!((v - 1.0 / c as f64).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let c = 8usize;
        let mtb = MtbParams::new(c, &[3, 5, 7], &mut rng);
        let mut g = Graph::new();
        let e = g.leaf(rand_tensor(&[1, c, 6, 6], 4));
        let (_, maps) = mtb.attention(&mut g, "mtb", e).unwrap();
        assert_eq!(maps.len(), 3);
        for m in maps {
            let t = g.value(m);
            let (rows, cols) = t.dims2().unwrap();
            for r in 0..rows {
                let s: f64 = t.data()[r * cols..(r + 1) * cols].iter().sum();
                assert!((s - 1.0).abs() < 1e-6, "row sum {s}");
            }
        }
    }

    #[test]
    fn single_scale_configuration_builds_and_preserves_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mtb = MtbParams::new(8, &[3], &mut rng);
        let mut g = Graph::new();
        let e = g.leaf(rand_tensor(&[1, 8, 6, 6], 6));
        let out = mtb.forward(&mut g, "mtb", e).unwrap();
        assert_eq!(g.value(out).shape(), &[1, 8, 6, 6]);
    }

    #[test]
    fn zero_weights_make_block_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut mtb = MtbParams::new(8, &[3, 5, 7], &mut rng);
        zero_params(|v| mtb.visit("mtb", v));
        // Layer norms keep unit gain so the normalization itself still runs;
        // all conv weights are zero so both residual paths dominate.
        mtb.ln1 = LayerNormParams::new(8);
        mtb.ln2 = LayerNormParams::new(8);
        let input = rand_tensor(&[1, 8, 6, 6], 8);
        let mut g = Graph::new();
        let e = g.leaf(input.clone());
        let out = mtb.forward(&mut g, "mtb", e).unwrap();
        assert_eq!(g.value(out).data(), input.data());
    }

    #[test]
    fn ffn_zero_weights_is_passthrough() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut mtb = MtbParams::new(4, &[3, 5], &mut rng);
        zero_params(|v| mtb.visit("mtb", v));
        mtb.ln2 = LayerNormParams::new(4);
        let input = rand_tensor(&[1, 4, 5, 7], 10);
        let mut g = Graph::new();
        let x = g.leaf(input.clone());
        let out = mtb.ffn(&mut g, "mtb", x).unwrap();
        assert_eq!(g.value(out).data(), input.data());
    }

    #[test]
    fn ffn_shape_contract_odd_extents() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mtb = MtbParams::new(4, &[3, 5, 7], &mut rng);
        for (h, w) in [(5usize, 9usize), (8, 3), (11, 11)] {
            let mut g = Graph::new();
            let x = g.leaf(rand_tensor(&[1, 4, h, w], 12));
            let out = mtb.ffn(&mut g, "mtb", x).unwrap();
            assert_eq!(g.value(out).shape(), &[1, 4, h, w]);
        }
    }

    #[test]
    fn wrong_channel_count_is_dimension_error() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let mtb = MtbParams::new(8, &[3], &mut rng);
        let mut g = Graph::new();
        let e = g.leaf(Tensor::zeros(&[1, 4, 6, 6]));
        assert!(mtb.attention(&mut g, "mtb", e).is_err());
    }

    #[test]
    fn batched_forward_matches_per_sample() {
        let mut rng = ChaCha8Rng::seed_from_u64(15);
        let mtb = MtbParams::new(4, &[3, 5], &mut rng);
        let a = rand_tensor(&[1, 4, 5, 5], 16);
        let b = rand_tensor(&[1, 4, 5, 5], 17);
        let mut batch = Tensor::zeros(&[2, 4, 5, 5]);
        batch.data_mut()[..100].copy_from_slice(a.data());
        batch.data_mut()[100..].copy_from_slice(b.data());

        let run_single = |t: &Tensor| {
            let mut g = Graph::new();
            let e = g.leaf(t.clone());
            let out = mtb.forward(&mut g, "mtb", e).unwrap();
            g.value(out).data().to_vec()
        };
        let mut g = Graph::new();
        let e = g.leaf(batch);
        let out = mtb.forward(&mut g, "mtb", e).unwrap();
        let both = g.value(out).data();
        let sa = run_single(&a);
        let sb = run_single(&b);
        for (x, y) in both[..100].iter().zip(sa.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in both[100..].iter().zip(sb.iter()) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn mtb_gradcheck_reduced_width() {
        let mut rng = ChaCha8Rng::seed_from_u64(19);
        let mtb = MtbParams::new(4, &[3], &mut rng);
        let err = gradcheck(
            |g, x| {
                let y = mtb.forward(g, "mtb", x)?;
                g.sum_all(y)
            },
            &rand_tensor(&[1, 4, 5, 5], 20),
            GRADCHECK_STEP,
        )
        .unwrap();
        assert!(err < GRADCHECK_TOL, "mtb rel err {err}");
    }
}
