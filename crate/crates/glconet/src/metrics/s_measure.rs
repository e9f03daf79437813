//! Structure measure: convex combination of an object-aware term (mean and
//! spread of the prediction over foreground/background) and a region-aware
//! term (per-quadrant regional similarity about the mask centroid).

use crate::metrics::MaskPair;

pub const S_ALPHA: f64 = 0.5;
const EPS: f64 = f64::EPSILON;

pub fn s_measure(pair: &MaskPair) -> f64 {
    let gt_mean = pair.gt().mean();
    if gt_mean == 0.0 {
        return (1.0 - pair.pred().mean()).clamp(0.0, 1.0);
    }
    if gt_mean == 1.0 {
        return pair.pred().mean().clamp(0.0, 1.0);
    }
    let s = S_ALPHA * s_object(pair) + (1.0 - S_ALPHA) * s_region(pair);
    s.clamp(0.0, 1.0)
}

/// Similarity of a masked region: 2x / (x^2 + 1 + std + eps) over the mean
/// and spread of the selected prediction values.
fn object_score(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let x = values.iter().sum::<f64>() / n;
    let std = if values.len() > 1 {
        (values.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1.0)).sqrt()
    } else {
        0.0
    };
    2.0 * x / (x * x + 1.0 + std + EPS)
}

fn s_object(pair: &MaskPair) -> f64 {
    let p = pair.pred().data();
    let g = pair.gt().data();
    let fg: Vec<f64> = p.iter().zip(g).filter(|(_, &gv)| gv == 1.0).map(|(&pv, _)| pv).collect();
    let bg: Vec<f64> = p.iter().zip(g).filter(|(_, &gv)| gv == 0.0).map(|(&pv, _)| 1.0 - pv).collect();
    let u = pair.gt().mean();
    u * object_score(&fg) + (1.0 - u) * object_score(&bg)
}

/// Foreground centroid in 1-based (col, row) coordinates, rounded half away
/// from zero.
fn centroid(pair: &MaskPair) -> (usize, usize) {
    let (h, w) = pair.extents();
    let g = pair.gt().data();
    let total: f64 = g.iter().sum();
    if total == 0.0 {
        return (((w as f64) / 2.0).round() as usize, ((h as f64) / 2.0).round() as usize);
    }
    let mut sx = 0.0;
    let mut sy = 0.0;
    for y in 0..h {
        for x in 0..w {
            let v = g[y * w + x];
            sx += v * (x + 1) as f64;
            sy += v * (y + 1) as f64;
        }
    }
    (((sx / total).round() as usize).clamp(1, w), ((sy / total).round() as usize).clamp(1, h))
}

/// Regional similarity of one sub-window.
fn region_ssim(p: &[f64], g: &[f64]) -> f64 {
    let n = p.len() as f64;
    if p.is_empty() {
        return 1.0; // zero-area quadrant carries zero weight
    }
    let x = p.iter().sum::<f64>() / n;
    let y = g.iter().sum::<f64>() / n;
    let sx2 = p.iter().map(|v| (v - x) * (v - x)).sum::<f64>() / (n - 1.0 + EPS);
    let sy2 = g.iter().map(|v| (v - y) * (v - y)).sum::<f64>() / (n - 1.0 + EPS);
    let sxy = p.iter().zip(g).map(|(a, b)| (a - x) * (b - y)).sum::<f64>() / (n - 1.0 + EPS);
    let alpha = 4.0 * x * y * sxy;
    let beta = (x * x + y * y) * (sx2 + sy2);
    if alpha != 0.0 {
        alpha / (beta + EPS)
    } else if beta == 0.0 {
        1.0
    } else {
        0.0
    }
}

fn gather(data: &[f64], w: usize, rows: std::ops::Range<usize>, cols: std::ops::Range<usize>) -> Vec<f64> {
    let mut out = Vec::with_capacity(rows.len() * cols.len());
    for y in rows {
        for x in cols.clone() {
            out.push(data[y * w + x]);
        }
    }
    out
}

fn s_region(pair: &MaskPair) -> f64 {
    let (h, w) = pair.extents();
    let (cx, cy) = centroid(pair);
    let p = pair.pred().data();
    let g = pair.gt().data();
    let area = (h * w) as f64;

    // Quadrants about the 1-based centroid: left/top blocks include it.
    let quads = [
        (0..cy, 0..cx),
        (0..cy, cx..w),
        (cy..h, 0..cx),
        (cy..h, cx..w),
    ];
    let w1 = (cx * cy) as f64 / area;
    let w2 = ((w - cx) * cy) as f64 / area;
    let w3 = ((h - cy) * cx) as f64 / area;
    let w4 = 1.0 - w1 - w2 - w3;
    let weights = [w1, w2, w3, w4];

    let mut score = 0.0;
    for (quad, &weight) in quads.iter().zip(&weights) {
        if weight == 0.0 {
            continue;
        }
        let pq = gather(p, w, quad.0.clone(), quad.1.clone());
        let gq = gather(g, w, quad.0.clone(), quad.1.clone());
        score += weight * region_ssim(&pq, &gq);
    }
    score
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn pair(pred: Vec<f64>, gt: Vec<f64>, h: usize, w: usize) -> MaskPair {
        MaskPair::new(Tensor::new(vec![h, w], pred).unwrap(), Tensor::new(vec![h, w], gt).unwrap()).unwrap()
    }

    fn square_mask(h: usize, w: usize, y0: usize, x0: usize, side: usize) -> Vec<f64> {
        let mut g = vec![0.0; h * w];
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                g[y * w + x] = 1.0;
            }
        }
        g
    }

    #[test]
    fn perfect_prediction_scores_one() {
        let g = square_mask(8, 8, 2, 2, 4);
        let s = s_measure(&pair(g.clone(), g, 8, 8));
        assert!((s - 1.0).abs() < 1e-6, "s = {s}");
    }

    #[test]
    fn constant_prediction_scores_below_one() {
        let g = square_mask(8, 8, 2, 2, 4);
        let mean = g.iter().sum::<f64>() / 64.0;
        let s = s_measure(&pair(vec![mean; 64], g, 8, 8));
        assert!(s < 0.999, "s = {s}");
    }

    #[test]
    fn shifted_prediction_sits_between_perfect_and_swap() {
        let g = square_mask(8, 8, 2, 2, 4);
        let shifted = square_mask(8, 8, 3, 2, 4);
        let swapped: Vec<f64> = g.iter().map(|v| 1.0 - v).collect();
        let s_perfect = s_measure(&pair(g.clone(), g.clone(), 8, 8));
        let s_shift = s_measure(&pair(shifted, g.clone(), 8, 8));
        let s_swap = s_measure(&pair(swapped, g, 8, 8));
        assert!(s_swap < s_shift && s_shift < s_perfect, "{s_swap} < {s_shift} < {s_perfect}");
    }

    #[test]
    fn degenerate_masks_use_area_conventions() {
        let zero = Tensor::zeros(&[4, 4]);
        let p = Tensor::full(&[4, 4], 0.3);
        assert!((s_measure(&MaskPair::new(p, zero).unwrap()) - 0.7).abs() < 1e-12);
        let one = Tensor::ones(&[4, 4]);
        let p = Tensor::full(&[4, 4], 0.3);
        assert!((s_measure(&MaskPair::new(p, one).unwrap()) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn result_stays_in_unit_interval() {
        // Adversarial pairs.
        let g = square_mask(6, 6, 0, 0, 3);
        for pred in [vec![0.0; 36], vec![1.0; 36], g.iter().map(|v| 1.0 - v).collect::<Vec<_>>()] {
            let s = s_measure(&pair(pred, g.clone(), 6, 6));
            assert!((0.0..=1.0).contains(&s), "s = {s}");
        }
    }
}
