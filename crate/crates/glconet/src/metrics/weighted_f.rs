//! Dependency-weighted F-measure: per-pixel errors are propagated to the
//! nearest foreground pixel, blurred by a Gaussian dependency kernel, and
//! background errors decay with distance from the object.

use crate::metrics::MaskPair;

/// Constants of the weighted F-measure, isolated so variants are one-line
/// swaps. `sigma` parameterizes the 7x7 dependency kernel; `decay_rate` is
/// ln(1/2)/5 so the background importance halves every 5 pixels; beta = 1.
#[derive(Clone, Copy, Debug)]
pub struct WfConfig {
    pub kernel_size: usize,
    pub sigma: f64,
    pub decay_numerator: f64,
    pub decay_denominator: f64,
}

impl Default for WfConfig {
    fn default() -> Self {
        WfConfig { kernel_size: 7, sigma: 5.0, decay_numerator: 0.5f64.ln(), decay_denominator: 5.0 }
    }
}

const EPS: f64 = f64::EPSILON;

/// Exact squared Euclidean distance transform (Felzenszwalb-Huttenlocher)
/// with nearest-seed recovery. Returns (squared distance, nearest seed flat
/// index) for every pixel; seeds are `fg == true` pixels.
pub fn edt_with_nearest(fg: &[bool], h: usize, w: usize) -> (Vec<f64>, Vec<usize>) {
    const INF: f64 = 1e30;

    // Column pass: nearest seed within each column (1D two-scan).
    let mut col_d = vec![INF; h * w];
    let mut col_idx = vec![usize::MAX; h * w];
    for x in 0..w {
        let mut last: Option<usize> = None;
        for y in 0..h {
            if fg[y * w + x] {
                last = Some(y);
            }
            if let Some(sy) = last {
                let d = (y - sy) as f64;
                col_d[y * w + x] = d * d;
                col_idx[y * w + x] = sy * w + x;
            }
        }
        last = None;
        for y in (0..h).rev() {
            if fg[y * w + x] {
                last = Some(y);
            }
            if let Some(sy) = last {
                let d = (sy - y) as f64;
                if d * d < col_d[y * w + x] {
                    col_d[y * w + x] = d * d;
                    col_idx[y * w + x] = sy * w + x;
                }
            }
        }
    }

    // Row pass: 1D lower envelope of parabolas rooted at the column
    // distances. Only seed-bearing columns contribute parabolas.
    let sources: Vec<usize> = (0..w).filter(|&x| col_d[x] < INF).collect();
    let mut dist = vec![INF; h * w];
    let mut idx = vec![usize::MAX; h * w];
    if sources.is_empty() {
        return (dist, idx);
    }
    let mut v = vec![0usize; sources.len()];
    let mut z = vec![0.0f64; sources.len() + 1];
    for y in 0..h {
        let f = |x: usize| col_d[y * w + x];
        let mut k = 0usize;
        v[0] = sources[0];
        z[0] = -INF;
        z[1] = INF;
        for &q in &sources[1..] {
            // z[0] = -INF guarantees termination with k >= 0.
            let mut s;
            loop {
                let p = v[k];
                s = ((f(q) + (q * q) as f64) - (f(p) + (p * p) as f64)) / (2.0 * (q as f64 - p as f64));
                if s <= z[k] {
                    k -= 1;
                } else {
                    break;
                }
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = INF;
        }
        let mut k2 = 0usize;
        for q in 0..w {
            while k2 < k && z[k2 + 1] < q as f64 {
                k2 += 1;
            }
            let p = v[k2];
            let dq = q as f64 - p as f64;
            dist[y * w + q] = dq * dq + f(p);
            idx[y * w + q] = col_idx[y * w + p];
        }
    }
    (dist, idx)
}

/// Normalized Gaussian kernel correlation with zero padding ("same").
fn gaussian_filter(x: &[f64], h: usize, w: usize, cfg: &WfConfig) -> Vec<f64> {
    let k = cfg.kernel_size;
    let half = (k / 2) as isize;
    let mut kernel = vec![0.0; k * k];
    let mut sum = 0.0;
    for i in 0..k {
        for j in 0..k {
            let di = i as isize - half;
            let dj = j as isize - half;
            let v = (-((di * di + dj * dj) as f64) / (2.0 * cfg.sigma * cfg.sigma)).exp();
            kernel[i * k + j] = v;
            sum += v;
        }
    }
    for v in &mut kernel {
        *v /= sum;
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x_ in 0..w {
            let mut acc = 0.0;
            for i in 0..k {
                let sy = y as isize + i as isize - half;
                if sy < 0 || sy >= h as isize {
                    continue;
                }
                for j in 0..k {
                    let sx = x_ as isize + j as isize - half;
                    if sx < 0 || sx >= w as isize {
                        continue;
                    }
                    acc += kernel[i * k + j] * x[sy as usize * w + sx as usize];
                }
            }
            out[y * w + x_] = acc;
        }
    }
    out
}

pub fn weighted_f_with(pair: &MaskPair, cfg: &WfConfig) -> f64 {
    let (h, w) = pair.extents();
    let p = pair.pred().data();
    let g = pair.gt().data();
    let fg: Vec<bool> = g.iter().map(|&v| v == 1.0).collect();
    let n_fg: usize = fg.iter().filter(|&&v| v).count();
    if n_fg == 0 {
        // Convention for empty masks: perfect only if the prediction is
        // empty too.
        return if p.iter().all(|&v| v == 0.0) { 1.0 } else { 0.0 };
    }

    let e: Vec<f64> = p.iter().zip(g).map(|(&pv, &gv)| (pv - gv).abs()).collect();
    let (dist2, _) = edt_with_nearest(&fg, h, w);

    // Background pixels inherit the error of their nearest foreground
    // pixel(s). Ties (several seeds at the exact same squared distance) are
    // averaged so the metric is invariant under transposition/reflection.
    let mut et = e.clone();
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if fg[i] {
                continue;
            }
            let d2 = dist2[i] as u64;
            let mut sum = 0.0;
            let mut cnt = 0usize;
            let r = (d2 as f64).sqrt() as i64 + 1;
            for dy in -r..=r {
                let dy2 = (dy * dy) as u64;
                if dy2 > d2 {
                    continue;
                }
                let sy = y as i64 + dy;
                if sy < 0 || sy >= h as i64 {
                    continue;
                }
                let rem = d2 - dy2;
                let dx = (rem as f64).sqrt().round() as i64;
                if (dx * dx) as u64 != rem {
                    continue;
                }
                for sx in if dx == 0 { vec![x as i64] } else { vec![x as i64 - dx, x as i64 + dx] } {
                    if sx < 0 || sx >= w as i64 {
                        continue;
                    }
                    let j = sy as usize * w + sx as usize;
                    if fg[j] {
                        sum += e[j];
                        cnt += 1;
                    }
                }
            }
            debug_assert!(cnt > 0, "EDT distance must be witnessed by a seed");
            et[i] = sum / cnt as f64;
        }
    }
    let ea = gaussian_filter(&et, h, w, cfg);
    let mut ew = vec![0.0; h * w];
    for i in 0..h * w {
        let min_e_ea = if fg[i] && ea[i] < e[i] { ea[i] } else { e[i] };
        let b = if fg[i] {
            1.0
        } else {
            2.0 - (cfg.decay_numerator / cfg.decay_denominator * dist2[i].sqrt()).exp()
        };
        ew[i] = min_e_ea * b;
    }

    let sum_ew_fg: f64 = (0..h * w).filter(|&i| fg[i]).map(|i| ew[i]).sum();
    let sum_ew_bg: f64 = (0..h * w).filter(|&i| !fg[i]).map(|i| ew[i]).sum();
    let tpw = (n_fg as f64 - sum_ew_fg).max(0.0);
    let fpw = sum_ew_bg;
    let recall = 1.0 - sum_ew_fg / n_fg as f64;
    let precision = tpw / (EPS + tpw + fpw);
    (2.0 * precision * recall / (EPS + precision + recall)).clamp(0.0, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn edt_matches_brute_force() {
        let (h, w) = (9usize, 7usize);
        // Deterministic scattered seeds.
        let mut fg = vec![false; h * w];
        for (y, x) in [(0usize, 3usize), (4, 1), (7, 6), (8, 0)] {
            fg[y * w + x] = true;
        }
        let (dist2, idx) = edt_with_nearest(&fg, h, w);
        for y in 0..h {
            for x in 0..w {
                let mut best = f64::INFINITY;
                for sy in 0..h {
                    for sx in 0..w {
                        if fg[sy * w + sx] {
                            let d = ((y as f64 - sy as f64).powi(2)) + ((x as f64 - sx as f64).powi(2));
                            best = best.min(d);
                        }
                    }
                }
                assert_eq!(dist2[y * w + x], best, "at ({y},{x})");
                // The recovered index must achieve the optimal distance.
                let s = idx[y * w + x];
                let (sy, sx) = (s / w, s % w);
                let d = ((y as f64 - sy as f64).powi(2)) + ((x as f64 - sx as f64).powi(2));
                assert_eq!(d, best, "index at ({y},{x})");
            }
        }
    }

    #[test]
    fn edt_zero_at_seeds() {
        let mut fg = vec![false; 25];
        fg[12] = true;
        let (dist2, idx) = edt_with_nearest(&fg, 5, 5);
        assert_eq!(dist2[12], 0.0);
        assert_eq!(idx[12], 12);
        assert_eq!(dist2[0], 8.0); // (2,2) away
    }
}
