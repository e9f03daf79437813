//! Finite-difference verification battery: every primitive, every block and
//! every loss at reduced width, against central differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::blocks::{FusionMode, GatedConv, GhimParams, MtbParams, PcbParams};
use crate::error::Result;
use crate::graph::{gradcheck, GRADCHECK_STEP, GRADCHECK_TOL};
use crate::kernels::ConvSpec;
use crate::loss;
use crate::model::{ArdLevelParams, GlcoNet, HeadParams, ModelConfig, UpsMode};
use crate::tensor::Tensor;

pub struct CheckResult {
    pub name: &'static str,
    pub max_rel_err: f64,
}

impl CheckResult {
    pub fn passed(&self) -> bool {
        self.max_rel_err < GRADCHECK_TOL
    }
}

fn rand_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-1.0..1.0);
    }
    t
}

fn rand_mask(h: usize, w: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut t = Tensor::zeros(&[1, 1, h, w]);
    for v in t.data_mut() {
        *v = if rng.gen_bool(0.4) { 1.0 } else { 0.0 };
    }
    t
}

type Check = (&'static str, Box<dyn Fn() -> Result<f64> + Send + Sync>);

fn conv_check(seed: u64, spec: ConvSpec, h: usize, w: usize) -> impl Fn() -> Result<f64> {
    move || {
        let wt = rand_tensor(&spec.weight_shape(), seed ^ 0xa1).map(|v| v * 0.4);
        let bias = rand_tensor(&[spec.out_ch], seed ^ 0xa2).map(|v| v * 0.1);
        gradcheck(
            |g, x| {
                let wid = g.leaf(wt.clone());
                let bid = g.leaf(bias.clone());
                let y = g.conv2d(x, wid, Some(bid), &spec)?;
                let sq = g.mul(y, y)?;
                g.sum_all(sq)
            },
            &rand_tensor(&[1, spec.in_ch, h, w], seed),
            GRADCHECK_STEP,
        )
    }
}

/// Assembles the full battery. Every component of the network and the
/// objective appears exactly once.
fn checks(seed: u64) -> Vec<Check> {
    let mut list: Vec<Check> = Vec::new();

    // ── Primitives ───────────────────────────────────────────────────
    list.push((
        "matmul",
        Box::new(move || {
            let b = rand_tensor(&[4, 2], seed ^ 1);
            gradcheck(
                |g, a| {
                    let bid = g.leaf(b.clone());
                    let c = g.matmul(a, bid)?;
                    let sq = g.mul(c, c)?;
                    g.sum_all(sq)
                },
                &rand_tensor(&[3, 4], seed ^ 2),
                GRADCHECK_STEP,
            )
        }),
    ));
    list.push((
        "softmax",
        Box::new(move || {
            let w = rand_tensor(&[6, 6], seed ^ 3);
            gradcheck(
                |g, x| {
                    let s = g.softmax(x, 1)?;
                    let wid = g.leaf(w.clone());
                    let m = g.mul(s, wid)?;
                    g.sum_all(m)
                },
                &rand_tensor(&[6, 6], seed ^ 4),
                GRADCHECK_STEP,
            )
        }),
    ));
    list.push((
        "sigmoid",
        Box::new(move || {
            gradcheck(
                |g, x| {
                    let s = g.sigmoid(x)?;
                    let sq = g.mul(s, s)?;
                    g.sum_all(sq)
                },
                &rand_tensor(&[1, 4, 5, 5], seed ^ 5),
                GRADCHECK_STEP,
            )
        }),
    ));
    list.push((
        "gelu",
        Box::new(move || {
            gradcheck(
                |g, x| {
                    let a = g.gelu(x)?;
                    let sq = g.mul(a, a)?;
                    g.sum_all(sq)
                },
                &rand_tensor(&[1, 4, 5, 5], seed ^ 6),
                GRADCHECK_STEP,
            )
        }),
    ));
    list.push((
        "layer_norm",
        Box::new(move || {
            let gain = rand_tensor(&[8], seed ^ 7).map(|v| 1.0 + 0.3 * v);
            let offset = rand_tensor(&[8], seed ^ 8).map(|v| 0.2 * v);
            gradcheck(
                |g, x| {
                    let gid = g.leaf(gain.clone());
                    let oid = g.leaf(offset.clone());
                    let n = g.layer_norm(x, gid, oid)?;
                    let sq = g.mul(n, n)?;
                    g.sum_all(sq)
                },
                &rand_tensor(&[1, 8, 4, 4], seed ^ 9),
                GRADCHECK_STEP,
            )
        }),
    ));
    list.push((
        "elementwise_affine",
        Box::new(move || {
            let other = rand_tensor(&[1, 3, 4, 4], seed ^ 10);
            gradcheck(
                |g, x| {
                    let o = g.leaf(other.clone());
                    let a = g.affine(x, -1.7, 0.3)?;
                    let m = g.mul(a, o)?;
                    let s = g.add(m, x)?;
                    let d = g.sub(s, o)?;
                    g.sum_all(d)
                },
                &rand_tensor(&[1, 3, 4, 4], seed ^ 11),
                GRADCHECK_STEP,
            )
        }),
    ));
    list.push((
        "concat_slice_transpose_reshape",
        Box::new(move || {
            gradcheck(
                |g, x| {
                    let a = g.slice(x, 1, 0, 2)?;
                    let b = g.slice(x, 1, 2, 2)?;
                    let cat = g.concat(&[b, a], 1)?;
                    let m = g.reshape(cat, vec![4, 16])?;
                    let t = g.transpose2(m)?;
                    let sq = g.mul(t, t)?;
                    g.sum_all(sq)
                },
                &rand_tensor(&[1, 4, 4, 4], seed ^ 12),
                GRADCHECK_STEP,
            )
        }),
    ));
    list.push((
        "avg_pool",
        Box::new(move || {
            gradcheck(
                |g, x| {
                    let p = g.avg_pool(x, 3)?;
                    let sq = g.mul(p, p)?;
                    g.sum_all(sq)
                },
                &rand_tensor(&[1, 2, 7, 7], seed ^ 13),
                GRADCHECK_STEP,
            )
        }),
    ));
    list.push((
        "pixel_shuffle",
        Box::new(move || {
            gradcheck(
                |g, x| {
                    let s = g.pixel_shuffle(x, 2)?;
                    let sq = g.mul(s, s)?;
                    g.sum_all(sq)
                },
                &rand_tensor(&[1, 8, 3, 3], seed ^ 14),
                GRADCHECK_STEP,
            )
        }),
    ));
    list.push((
        "pixel_unshuffle",
        Box::new(move || {
            gradcheck(
                |g, x| {
                    let s = g.pixel_unshuffle(x, 2)?;
                    let sq = g.mul(s, s)?;
                    g.sum_all(sq)
                },
                &rand_tensor(&[1, 2, 6, 6], seed ^ 15),
                GRADCHECK_STEP,
            )
        }),
    ));
    list.push((
        "upsample_bilinear",
        Box::new(move || {
            gradcheck(
                |g, x| {
                    let u = g.upsample_bilinear(x, 9, 7)?;
                    let sq = g.mul(u, u)?;
                    g.sum_all(sq)
                },
                &rand_tensor(&[1, 2, 4, 3], seed ^ 16),
                GRADCHECK_STEP,
            )
        }),
    ));
    list.push((
        "mul_bcast_ch",
        Box::new(move || {
            let feat = rand_tensor(&[1, 4, 5, 5], seed ^ 17);
            gradcheck(
                |g, gate| {
                    let f = g.leaf(feat.clone());
                    let s = g.sigmoid(gate)?;
                    let m = g.mul_bcast_ch(s, f)?;
                    g.sum_all(m)
                },
                &rand_tensor(&[1, 1, 5, 5], seed ^ 18),
                GRADCHECK_STEP,
            )
        }),
    ));

    // ── Convolution variants: kernels x dilation x layout ───────────
    for &k in &[1usize, 3, 5, 7] {
        let name: &'static str = match k {
            1 => "conv_k1",
            3 => "conv_k3",
            5 => "conv_k5",
            _ => "conv_k7",
        };
        list.push((name, Box::new(conv_check(seed ^ (20 + k as u64), ConvSpec::same(3, 2, k), 9, 9))));
    }
    for &d in &[3usize, 5, 7] {
        let name: &'static str = match d {
            3 => "conv_dilated_d3",
            5 => "conv_dilated_d5",
            _ => "conv_dilated_d7",
        };
        list.push((name, Box::new(conv_check(seed ^ (30 + d as u64), ConvSpec::same_dilated(2, 2, 3, d), 9, 9))));
    }
    list.push(("conv_depthwise", Box::new(conv_check(seed ^ 40, ConvSpec::depthwise(4, 5), 8, 8))));
    list.push(("conv_grouped", Box::new(conv_check(seed ^ 41, ConvSpec::same(4, 4, 3).with_groups(2), 8, 8))));
    list.push(("conv_strided", Box::new(conv_check(seed ^ 42, ConvSpec::strided(3, 4, 3, 2), 9, 9))));
    list.push((
        "conv_weight_grad",
        Box::new(move || {
            let spec = ConvSpec::same(3, 3, 3);
            let x = rand_tensor(&[1, 3, 7, 7], seed ^ 43);
            gradcheck(
                |g, w| {
                    let xid = g.leaf(x.clone());
                    let y = g.conv2d(xid, w, None, &spec)?;
                    let sq = g.mul(y, y)?;
                    g.sum_all(sq)
                },
                &rand_tensor(&spec.weight_shape(), seed ^ 44).map(|v| v * 0.4),
                GRADCHECK_STEP,
            )
        }),
    ));
    list.push((
        "conv_bias_grad",
        Box::new(move || {
            let spec = ConvSpec::same(2, 3, 3);
            let x = rand_tensor(&[1, 2, 6, 6], seed ^ 45);
            let wt = rand_tensor(&spec.weight_shape(), seed ^ 46).map(|v| v * 0.4);
            gradcheck(
                |g, b| {
                    let xid = g.leaf(x.clone());
                    let wid = g.leaf(wt.clone());
                    let y = g.conv2d(xid, wid, Some(b), &spec)?;
                    let sq = g.mul(y, y)?;
                    g.sum_all(sq)
                },
                &rand_tensor(&[3], seed ^ 47).map(|v| v * 0.2),
                GRADCHECK_STEP,
            )
        }),
    ));

    // ── Blocks at reduced width ──────────────────────────────────────
    list.push((
        "gated_conv",
        Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 50);
            let gc = GatedConv::new(4, &mut rng);
            gradcheck(
                |g, x| {
                    let y = gc.apply(g, "gc", x)?;
                    g.sum_all(y)
                },
                &rand_tensor(&[1, 4, 6, 6], seed ^ 51),
                GRADCHECK_STEP,
            )
        }),
    ));
    list.push((
        "mtb_attention",
        Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 52);
            let mtb = MtbParams::new(16, &[3, 5], &mut rng);
            gradcheck(
                |g, x| {
                    let (y, _) = mtb.attention(g, "mtb", x)?;
                    let sq = g.mul(y, y)?;
                    g.sum_all(sq)
                },
                &rand_tensor(&[1, 16, 6, 6], seed ^ 53),
                GRADCHECK_STEP,
            )
        }),
    ));
    list.push((
        "mtb_ffn",
        Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 54);
            let mtb = MtbParams::new(16, &[3, 5], &mut rng);
            gradcheck(
                |g, x| {
                    let y = mtb.ffn(g, "mtb", x)?;
                    let sq = g.mul(y, y)?;
                    g.sum_all(sq)
                },
                &rand_tensor(&[1, 16, 6, 6], seed ^ 55),
                GRADCHECK_STEP,
            )
        }),
    ));
    list.push((
        "mtb_forward",
        Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 56);
            let mtb = MtbParams::new(16, &[3, 5, 7], &mut rng);
            gradcheck(
                |g, x| {
                    let y = mtb.forward(g, "mtb", x)?;
                    let sq = g.mul(y, y)?;
                    g.sum_all(sq)
                },
                &rand_tensor(&[1, 16, 8, 8], seed ^ 57),
                GRADCHECK_STEP,
            )
        }),
    ));
    list.push((
        "pcb_forward",
        Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 58);
            let pcb = PcbParams::new(16, &[3, 5, 7], &mut rng);
            gradcheck(
                |g, x| {
                    let y = pcb.forward(g, "pcb", x)?;
                    let sq = g.mul(y, y)?;
                    g.sum_all(sq)
                },
                &rand_tensor(&[1, 16, 6, 6], seed ^ 59),
                GRADCHECK_STEP,
            )
        }),
    ));
    list.push((
        "ghim_forward",
        Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 60);
            let ghim = GhimParams::new(16, FusionMode::Add, &mut rng);
            let local = rand_tensor(&[1, 16, 6, 6], seed ^ 61);
            gradcheck(
                |g, x| {
                    let l = g.leaf(local.clone());
                    let y = ghim.forward(g, "ghim", x, l)?;
                    let sq = g.mul(y, y)?;
                    g.sum_all(sq)
                },
                &rand_tensor(&[1, 16, 6, 6], seed ^ 62),
                GRADCHECK_STEP,
            )
        }),
    ));
    list.push((
        "head_d6",
        Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 63);
            let head = HeadParams::new(8, 16, &[3], true, &mut rng);
            let g5 = rand_tensor(&[1, 16, 4, 4], seed ^ 64);
            gradcheck(
                |g, e5| {
                    let gid = g.leaf(g5.clone());
                    let d6 = head.forward(g, "head", e5, gid)?;
                    let sq = g.mul(d6, d6)?;
                    g.sum_all(sq)
                },
                &rand_tensor(&[1, 8, 4, 4], seed ^ 65),
                GRADCHECK_STEP,
            )
        }),
    ));
    list.push((
        "ard_step",
        Box::new(move || {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 66);
            let level = ArdLevelParams::new(16, 2, Some(4), UpsMode::PixelShuffle, &mut rng);
            let dn = rand_tensor(&[1, 1, 4, 4], seed ^ 67);
            let dn2 = rand_tensor(&[1, 1, 2, 2], seed ^ 68);
            gradcheck(
                |g, f| {
                    let a = g.leaf(dn.clone());
                    let b = g.leaf(dn2.clone());
                    let d = level.forward(g, "ard", f, a, Some(b))?;
                    let sq = g.mul(d, d)?;
                    g.sum_all(sq)
                },
                &rand_tensor(&[1, 16, 8, 8], seed ^ 69),
                GRADCHECK_STEP,
            )
        }),
    ));

    // ── Losses ───────────────────────────────────────────────────────
    list.push((
        "weighted_bce",
        Box::new(move || {
            let gt = rand_mask(4, 4, seed ^ 70);
            let w = loss::weight_map(&gt)?;
            gradcheck(|g, x| g.weighted_bce(x, &gt, &w), &rand_tensor(&[1, 1, 4, 4], seed ^ 71), GRADCHECK_STEP)
        }),
    ));
    list.push((
        "weighted_iou",
        Box::new(move || {
            let gt = rand_mask(4, 4, seed ^ 72);
            let w = loss::weight_map(&gt)?;
            gradcheck(
                |g, x| {
                    let p = g.sigmoid(x)?;
                    g.weighted_iou(p, &gt, &w)
                },
                &rand_tensor(&[1, 1, 4, 4], seed ^ 73),
                GRADCHECK_STEP,
            )
        }),
    ));
    list.push((
        "total_loss_tiny_net",
        Box::new(move || {
            let cfg = ModelConfig {
                channels: 8,
                scale_set: vec![3],
                encoder_widths: [4, 6, 8, 10, 12],
                ..ModelConfig::default()
            };
            let net = GlcoNet::new(&cfg, seed ^ 74)?;
            let gt = rand_mask(32, 32, seed ^ 75);
            let w = loss::weight_map(&gt)?;
            let image = rand_tensor(&[1, 3, 32, 32], seed ^ 76).map(|v| 0.5 + 0.5 * v);
            gradcheck(
                |g, x| {
                    let out = net.forward(g, x)?;
                    let (total, _) = loss::total_loss(g, &out, &gt, &w)?;
                    Ok(total)
                },
                &image,
                GRADCHECK_STEP,
            )
        }),
    ));

    list
}

/// Runs the whole battery; results keep the declaration order.
pub fn battery(seed: u64) -> Result<Vec<CheckResult>> {
    let list = checks(seed);
    let results: Vec<Result<CheckResult>> = list
        .par_iter()
        .map(|(name, f)| f().map(|err| CheckResult { name, max_rel_err: err }))
        .collect();
    results.into_iter().collect()
}

pub fn battery_passed(results: &[CheckResult]) -> bool {
    results.iter().all(CheckResult::passed)
}
