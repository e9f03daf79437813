//! Training objective: boundary-weighted BCE + weighted IoU summed over all
//! five score maps, each bilinearly upsampled to the mask's resolution.

use crate::error::{Error, Result};
use crate::graph::{Graph, NodeId};
use crate::kernels;
use crate::model::NetOutputs;
use crate::tensor::Tensor;

/// Boundary-emphasis weight map: w = 5 * |meanpool15(G) - G|.
///
/// Interior and far-background pixels get ~0; pixels near the mask boundary
/// (within half the pooling window) get large weight.
pub fn weight_map(gt: &Tensor) -> Result<Tensor> {
    if !gt.is_binary() {
        return Err(Error::contract("weight_map", "mask is not binary"));
    }
    let pooled = kernels::avg_pool_same(gt, 15)?;
    let data = pooled
        .data()
        .iter()
        .zip(gt.data())
        .map(|(p, g)| 5.0 * (p - g).abs())
        .collect();
    Tensor::new(gt.shape().to_vec(), data)
}

/// Per-level and total loss values captured at graph-construction time.
/// Index 0 is level 2 (finest), index 4 is level 6 (coarsest).
#[derive(Clone, Debug, Default)]
pub struct LossReport {
    pub bce: [f64; 5],
    pub iou: [f64; 5],
    pub total: f64,
}

impl LossReport {
    pub fn level_total(&self, i: usize) -> f64 {
        self.bce[i] + self.iou[i]
    }
}

/// Builds the full objective on the graph and returns the scalar loss node.
///
/// Every D_i is upsampled to the mask's resolution; BCE runs on logits, IoU
/// on the sigmoid activation.
pub fn total_loss(g: &mut Graph, outputs: &NetOutputs, gt: &Tensor, weights: &Tensor) -> Result<(NodeId, LossReport)> {
    let (_, gc, gh, gw) = gt.dims4()?;
    if gc != 1 {
        return Err(Error::dim("total_loss", format!("mask must have 1 channel, got {gc}")));
    }
    let mut report = LossReport::default();
    let mut total: Option<NodeId> = None;
    for (i, &d) in outputs.d.iter().enumerate() {
        let up = g.upsample_bilinear(d, gh, gw)?;
        let bce = g.weighted_bce(up, gt, weights)?;
        let p = g.sigmoid(up)?;
        let iou = g.weighted_iou(p, gt, weights)?;
        report.bce[i] = g.value(bce).item();
        report.iou[i] = g.value(iou).item();
        let level = g.add(bce, iou)?;
        total = Some(match total {
            None => level,
            Some(t) => g.add(t, level)?,
        });
    }
    let total = total.expect("five levels");
    report.total = g.value(total).item();
    Ok((total, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gradcheck, GRADCHECK_STEP, GRADCHECK_TOL};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_mask(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(&[1, 1, h, w]);
        for v in t.data_mut() {
            *v = if rng.gen_bool(0.4) { 1.0 } else { 0.0 };
        }
        t
    }

    fn rand_logits(h: usize, w: usize, seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut t = Tensor::zeros(&[1, 1, h, w]);
        for v in t.data_mut() {
            *v = rng.gen_range(-2.0..2.0);
        }
        t
    }

    #[test]
    fn weight_map_zero_mask_is_zero() {
        let w = weight_map(&Tensor::zeros(&[1, 1, 16, 16])).unwrap();
        assert!(w.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn weight_map_all_ones_nonzero_only_near_border() {
        let w = weight_map(&Tensor::ones(&[1, 1, 32, 32])).unwrap();
        for r in 0..32usize {
            for c in 0..32usize {
                let v = w.data()[r * 32 + c];
                let near_border = r < 7 || r >= 25 || c < 7 || c >= 25;
                if near_border {
                    assert!(v > 0.0, "expected border weight at ({r},{c})");
                } else {
                    assert_eq!(v, 0.0, "interior weight at ({r},{c})");
                }
            }
        }
    }

    #[test]
    fn weight_map_single_pixel_peak() {
        let mut g = Tensor::zeros(&[1, 1, 32, 32]);
        g.data_mut()[16 * 32 + 16] = 1.0;
        let w = weight_map(&g).unwrap();
        let peak = w.data()[16 * 32 + 16];
        let expect = 5.0 * (1.0 - 1.0 / 225.0);
        assert!((peak - expect).abs() < 1e-12, "peak {peak} vs {expect}");
    }

    #[test]
    fn weight_map_rejects_non_binary() {
        assert!(weight_map(&Tensor::full(&[1, 1, 4, 4], 0.5)).is_err());
    }

    #[test]
    fn bce_zero_logits_is_ln2() {
        let gt = rand_mask(4, 4, 1);
        let w = Tensor::zeros(&[1, 1, 4, 4]);
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[1, 1, 4, 4]));
        let l = g.weighted_bce(x, &gt, &w).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-9);
    }

    #[test]
    fn bce_saturated_correct_logits_vanish() {
        let gt = rand_mask(5, 5, 2);
        let logits = gt.map(|v| if v == 1.0 { 20.0 } else { -20.0 });
        let w = Tensor::zeros(&[1, 1, 5, 5]);
        let mut g = Graph::new();
        let x = g.leaf(logits);
        let l = g.weighted_bce(x, &gt, &w).unwrap();
        assert!(g.value(l).item() < 1e-8);
    }

    #[test]
    fn bce_2x2_hand_case() {
        // P = 0.8 where G=1 and 0.2 where G=0: every pixel contributes
        // -ln 0.8.
        let gt = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let logit = (0.8f64 / 0.2).ln();
        let logits = gt.map(|v| if v == 1.0 { logit } else { -logit });
        let w = Tensor::zeros(&[1, 1, 2, 2]);
        let mut g = Graph::new();
        let x = g.leaf(logits);
        let l = g.weighted_bce(x, &gt, &w).unwrap();
        assert!((g.value(l).item() - 0.8f64.ln().abs()).abs() < 1e-9, "{}", g.value(l).item());
    }

    #[test]
    fn bce_uniform_weight_shift_is_invariant() {
        let gt = rand_mask(6, 6, 3);
        let logits = rand_logits(6, 6, 4);
        let run = |wv: f64| {
            let w = Tensor::full(&[1, 1, 6, 6], wv);
            let mut g = Graph::new();
            let x = g.leaf(logits.clone());
            let l = g.weighted_bce(x, &gt, &w).unwrap();
            g.value(l).item()
        };
        assert!((run(0.0) - run(3.7)).abs() < 1e-12);
    }

    #[test]
    fn iou_perfect_binary_prediction_is_zero() {
        let gt = rand_mask(5, 5, 5);
        let w = weight_map(&gt).unwrap();
        let mut g = Graph::new();
        let p = g.leaf(gt.clone());
        let l = g.weighted_iou(p, &gt, &w).unwrap();
        assert_eq!(g.value(l).item(), 0.0);
    }

    #[test]
    fn iou_empty_prediction_is_one() {
        let mut gt = Tensor::zeros(&[1, 1, 4, 4]);
        gt.data_mut()[5] = 1.0;
        gt.data_mut()[6] = 1.0;
        let w = Tensor::zeros(&[1, 1, 4, 4]);
        let mut g = Graph::new();
        let p = g.leaf(Tensor::zeros(&[1, 1, 4, 4]));
        let l = g.weighted_iou(p, &gt, &w).unwrap();
        assert_eq!(g.value(l).item(), 1.0);
    }

    #[test]
    fn iou_half_prediction_closed_form() {
        let gt = Tensor::ones(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 2, 2]);
        let mut g = Graph::new();
        let p = g.leaf(Tensor::full(&[1, 1, 2, 2], 0.5));
        let l = g.weighted_iou(p, &gt, &w).unwrap();
        assert!((g.value(l).item() - 0.5).abs() < 1e-9);
    }

    #[test]
    fn iou_rejects_out_of_range_prediction() {
        let gt = Tensor::ones(&[1, 1, 2, 2]);
        let w = Tensor::zeros(&[1, 1, 2, 2]);
        let mut g = Graph::new();
        let p = g.leaf(Tensor::full(&[1, 1, 2, 2], 1.5));
        assert!(g.weighted_iou(p, &gt, &w).is_err());
    }

    #[test]
    fn losses_are_permutation_equivariant() {
        let gt = rand_mask(4, 4, 7);
        let logits = rand_logits(4, 4, 8);
        let w = weight_map(&gt).unwrap();
        // A fixed permutation of the 16 pixels.
        let perm: Vec<usize> = vec![5, 0, 11, 3, 14, 2, 9, 7, 1, 15, 4, 12, 6, 10, 8, 13];
        let permute = |t: &Tensor| {
            let mut out = t.clone();
            for (dst, &src) in perm.iter().enumerate() {
                out.data_mut()[dst] = t.data()[src];
            }
            out
        };
        let eval = |lg: &Tensor, gt: &Tensor, w: &Tensor| {
            let mut g = Graph::new();
            let x = g.leaf(lg.clone());
            let b = g.weighted_bce(x, gt, w).unwrap();
            let p = g.sigmoid(x).unwrap();
            let i = g.weighted_iou(p, gt, w).unwrap();
            (g.value(b).item(), g.value(i).item())
        };
        let (b1, i1) = eval(&logits, &gt, &w);
        let (b2, i2) = eval(&permute(&logits), &permute(&gt), &permute(&w));
        assert!((b1 - b2).abs() < 1e-12);
        assert!((i1 - i2).abs() < 1e-12);
    }

    #[test]
    fn bce_monotone_as_pixels_move_toward_target() {
        let gt = rand_mask(4, 4, 9);
        let w = weight_map(&gt).unwrap();
        let logits = rand_logits(4, 4, 10);
        let eval = |lg: &Tensor| {
            let mut g = Graph::new();
            let x = g.leaf(lg.clone());
            let l = g.weighted_bce(x, &gt, &w).unwrap();
            g.value(l).item()
        };
        let base = eval(&logits);
        for i in 0..16 {
            let mut better = logits.clone();
            // Move one logit toward its target.
            let t = gt.data()[i];
            better.data_mut()[i] += if t == 1.0 { 0.5 } else { -0.5 };
            assert!(eval(&better) <= base + 1e-12, "pixel {i} increased the loss");
        }
    }

    #[test]
    fn bce_gradcheck_on_4x4_logit_map() {
        let gt = rand_mask(4, 4, 11);
        let w = weight_map(&gt).unwrap();
        let err = gradcheck(
            |g, x| g.weighted_bce(x, &gt, &w),
            &rand_logits(4, 4, 12),
            GRADCHECK_STEP,
        )
        .unwrap();
        assert!(err < GRADCHECK_TOL, "bce rel err {err}");
    }

    #[test]
    fn iou_gradcheck_through_sigmoid() {
        let gt = rand_mask(4, 4, 13);
        let w = weight_map(&gt).unwrap();
        let err = gradcheck(
            |g, x| {
                let p = g.sigmoid(x)?;
                g.weighted_iou(p, &gt, &w)
            },
            &rand_logits(4, 4, 14),
            GRADCHECK_STEP,
        )
        .unwrap();
        assert!(err < GRADCHECK_TOL, "iou rel err {err}");
    }

    #[test]
    fn total_loss_is_additive_over_levels() {
        use crate::model::{GlcoNet, ModelConfig};
        let cfg = ModelConfig { channels: 8, scale_set: vec![3], encoder_widths: [4, 4, 4, 4, 4], ..ModelConfig::default() };
        let net = GlcoNet::new(&cfg, 1).unwrap();
        let img = {
            let mut rng = ChaCha8Rng::seed_from_u64(15);
            let mut t = Tensor::zeros(&[1, 3, 64, 64]);
            for v in t.data_mut() {
                *v = rng.gen_range(0.0..1.0);
            }
            t
        };
        let gt = rand_mask(64, 64, 16);
        let w = weight_map(&gt).unwrap();
        let mut g = Graph::new();
        let x = g.leaf(img);
        let out = net.forward(&mut g, x).unwrap();
        let (_, report) = total_loss(&mut g, &out, &gt, &w).unwrap();
        let sum: f64 = (0..5).map(|i| report.level_total(i)).sum();
        assert!((report.total - sum).abs() < 1e-9);
        for i in 0..5 {
            assert!(report.bce[i] >= 0.0 && report.iou[i] >= 0.0);
        }
    }

    #[test]
    fn saturated_outputs_drive_total_near_zero() {
        // Hand-build "outputs" whose upsampled logits saturate to the mask.
        let gt = {
            let mut t = Tensor::zeros(&[1, 1, 8, 8]);
            // A 4x4 block: constant within every 2x2 cell so even the
            // coarsest map can match after bilinear upsampling.
            for r in 2..6 {
                for c in 2..6 {
                    t.data_mut()[r * 8 + c] = 1.0;
                }
            }
            t
        };
        let w = weight_map(&gt).unwrap();
        let mut g = Graph::new();
        // All levels at full 8x8 resolution with huge correct logits.
        let logits = gt.map(|v| if v == 1.0 { 60.0 } else { -60.0 });
        let ids: Vec<NodeId> = (0..5).map(|_| g.leaf(logits.clone())).collect();
        let outputs = NetOutputs { d: [ids[0], ids[1], ids[2], ids[3], ids[4]] };
        let (_, report) = total_loss(&mut g, &outputs, &gt, &w).unwrap();
        assert!(report.total < 1e-6, "total {}", report.total);
    }
}
