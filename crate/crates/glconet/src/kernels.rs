//! Raw numeric routines behind the graph ops: convolution, pooling, layer
//! normalization, bilinear resampling, pixel shuffle, matmul and scalar
//! nonlinearities. Everything is a pure function of its inputs.

use crate::error::{Error, Result};
use crate::tensor::{idx4, Tensor};

// ── Convolution ──────────────────────────────────────────────────────

/// Square-kernel 2D cross-correlation with zero padding.
///
/// `padding` defaults to dilation*(kernel-1)/2 via [`ConvSpec::same`], which
/// preserves spatial extent at stride 1.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: usize,
    pub stride: usize,
    pub dilation: usize,
    pub groups: usize,
    pub padding: usize,
}

impl ConvSpec {
    pub fn same(in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        ConvSpec::same_dilated(in_ch, out_ch, kernel, 1)
    }

    pub fn same_dilated(in_ch: usize, out_ch: usize, kernel: usize, dilation: usize) -> Self {
        ConvSpec {
            in_ch,
            out_ch,
            kernel,
            stride: 1,
            dilation,
            groups: 1,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    pub fn depthwise(ch: usize, kernel: usize) -> Self {
        ConvSpec { groups: ch, ..ConvSpec::same(ch, ch, kernel) }
    }

    pub fn strided(in_ch: usize, out_ch: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec { stride, ..ConvSpec::same(in_ch, out_ch, kernel) }
    }

    pub fn with_groups(self, groups: usize) -> Self {
        ConvSpec { groups, ..self }
    }

    pub fn validate(&self) -> Result<()> {
        if self.kernel == 0 || self.kernel % 2 == 0 {
            return Err(Error::dim("conv2d", format!("kernel extent {} must be odd and positive", self.kernel)));
        }
        if self.stride == 0 || self.dilation == 0 || self.groups == 0 {
            return Err(Error::dim("conv2d", "stride, dilation and groups must be >= 1"));
        }
        if self.in_ch % self.groups != 0 || self.out_ch % self.groups != 0 {
            return Err(Error::dim(
                "conv2d",
                format!("channels in={} out={} not divisible by groups={}", self.in_ch, self.out_ch, self.groups),
            ));
        }
        Ok(())
    }

    /// Weight tensor shape: [out_ch, in_ch/groups, k, k].
    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_ch, self.in_ch / self.groups, self.kernel, self.kernel]
    }

    pub fn fan_in(&self) -> usize {
        (self.in_ch / self.groups) * self.kernel * self.kernel
    }

    pub fn out_extent(&self, h: usize) -> Result<usize> {
        let span = self.dilation * (self.kernel - 1) + 1;
        let padded = h + 2 * self.padding;
        if padded < span {
            return Err(Error::dim(
                "conv2d",
                format!("input extent {h} (+2*{}) smaller than receptive extent {span}", self.padding),
            ));
        }
        Ok((padded - span) / self.stride + 1)
    }
}

/// Valid output range [lo, hi) such that `o*stride + tap - pad` stays inside
/// [0, extent) for every o in the range.
#[inline]
fn valid_out_range(extent_in: usize, extent_out: usize, stride: usize, tap: isize, pad: isize) -> (usize, usize) {
    // o*stride + tap - pad >= 0  =>  o >= (pad - tap)/stride  (ceil)
    let off = pad - tap;
    let lo = if off <= 0 { 0 } else { ((off as usize) + stride - 1) / stride };
    // o*stride + tap - pad < extent_in  =>  o < (extent_in + pad - tap)/stride (ceil)
    let top = extent_in as isize + off;
    let hi = if top <= 0 { 0 } else { (((top as usize) + stride - 1) / stride).min(extent_out) };
    (lo.min(hi), hi)
}

pub fn conv2d_forward(x: &Tensor, w: &Tensor, b: Option<&Tensor>, spec: &ConvSpec) -> Result<Tensor> {
    spec.validate()?;
    let (bs, cin, h, wd) = x.dims4()?;
    if cin != spec.in_ch {
        return Err(Error::dim("conv2d", format!("input has {cin} channels, spec wants {}", spec.in_ch)));
    }
    let wshape = spec.weight_shape();
    if w.shape() != wshape {
        return Err(Error::dim("conv2d", format!("weight shape {:?} != expected {:?}", w.shape(), wshape)));
    }
    if let Some(bias) = b {
        if bias.shape() != [spec.out_ch] {
            return Err(Error::dim("conv2d", format!("bias shape {:?} != [{}]", bias.shape(), spec.out_ch)));
        }
    }
    let oh = spec.out_extent(h)?;
    let ow = spec.out_extent(wd)?;
    let (k, s, d, p) = (spec.kernel, spec.stride, spec.dilation, spec.padding as isize);
    let cing = spec.in_ch / spec.groups;
    let coutg = spec.out_ch / spec.groups;

    let mut out = Tensor::zeros(&[bs, spec.out_ch, oh, ow]);
    let xv = x.data();
    let wv = w.data();
    let ov = out.data_mut();

    for bi in 0..bs {
        for g in 0..spec.groups {
            for ocl in 0..coutg {
                let oc = g * coutg + ocl;
                let obase = idx4(spec.out_ch, oh, ow, bi, oc, 0, 0);
                if let Some(bias) = b {
                    let bv = bias.data()[oc];
                    ov[obase..obase + oh * ow].iter_mut().for_each(|v| *v = bv);
                }
                for icl in 0..cing {
                    let ic = g * cing + icl;
                    let ibase = idx4(cin, h, wd, bi, ic, 0, 0);
                    for kh in 0..k {
                        let tap_h = (kh * d) as isize;
                        let (oh_lo, oh_hi) = valid_out_range(h, oh, s, tap_h, p);
                        for kw in 0..k {
                            let tap_w = (kw * d) as isize;
                            let (ow_lo, ow_hi) = valid_out_range(wd, ow, s, tap_w, p);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let wval = wv[((oc * cing + icl) * k + kh) * k + kw];
                            if wval == 0.0 {
                                continue;
                            }
                            for ohi in oh_lo..oh_hi {
                                let ih = (ohi * s) as isize + tap_h - p;
                                let irow = ibase + ih as usize * wd;
                                let orow = obase + ohi * ow;
                                let iw0 = (ow_lo * s) as isize + tap_w - p;
                                let mut iw = iw0 as usize;
                                for owi in ow_lo..ow_hi {
                                    ov[orow + owi] += wval * xv[irow + iw];
                                    iw += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Gradient of the convolution w.r.t. its input.
pub fn conv2d_backward_input(grad_out: &Tensor, w: &Tensor, spec: &ConvSpec, in_shape: (usize, usize, usize, usize)) -> Tensor {
    let (bs, cin, h, wd) = in_shape;
    let (_, _, oh, ow) = grad_out.dims4().expect("grad shape");
    let (k, s, d, p) = (spec.kernel, spec.stride, spec.dilation, spec.padding as isize);
    let cing = spec.in_ch / spec.groups;
    let coutg = spec.out_ch / spec.groups;

    let mut dx = Tensor::zeros(&[bs, cin, h, wd]);
    let gv = grad_out.data();
    let wv = w.data();
    let dv = dx.data_mut();

    for bi in 0..bs {
        for g in 0..spec.groups {
            for ocl in 0..coutg {
                let oc = g * coutg + ocl;
                let obase = idx4(spec.out_ch, oh, ow, bi, oc, 0, 0);
                for icl in 0..cing {
                    let ic = g * cing + icl;
                    let ibase = idx4(cin, h, wd, bi, ic, 0, 0);
                    for kh in 0..k {
                        let tap_h = (kh * d) as isize;
                        let (oh_lo, oh_hi) = valid_out_range(h, oh, s, tap_h, p);
                        for kw in 0..k {
                            let tap_w = (kw * d) as isize;
                            let (ow_lo, ow_hi) = valid_out_range(wd, ow, s, tap_w, p);
                            if ow_lo >= ow_hi {
                                continue;
                            }
                            let wval = wv[((oc * cing + icl) * k + kh) * k + kw];
                            if wval == 0.0 {
                                continue;
                            }
                            for ohi in oh_lo..oh_hi {
                                let ih = (ohi * s) as isize + tap_h - p;
                                let irow = ibase + ih as usize * wd;
                                let orow = obase + ohi * ow;
                                let mut iw = ((ow_lo * s) as isize + tap_w - p) as usize;
                                for owi in ow_lo..ow_hi {
                                    dv[irow + iw] += wval * gv[orow + owi];
                                    iw += s;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

/// Gradient of the convolution w.r.t. the weight tensor.
pub fn conv2d_backward_weight(grad_out: &Tensor, x: &Tensor, spec: &ConvSpec) -> Tensor {
    let (bs, cin, h, wd) = x.dims4().expect("x shape");
    let (_, _, oh, ow) = grad_out.dims4().expect("grad shape");
    let (k, s, d, p) = (spec.kernel, spec.stride, spec.dilation, spec.padding as isize);
    let cing = spec.in_ch / spec.groups;
    let coutg = spec.out_ch / spec.groups;

    let mut dw = Tensor::zeros(&spec.weight_shape());
    let gv = grad_out.data();
    let xv = x.data();
    let dv = dw.data_mut();

    for g in 0..spec.groups {
        for ocl in 0..coutg {
            let oc = g * coutg + ocl;
            for icl in 0..cing {
                let ic = g * cing + icl;
                for kh in 0..k {
                    let tap_h = (kh * d) as isize;
                    let (oh_lo, oh_hi) = valid_out_range(h, oh, s, tap_h, p);
                    for kw in 0..k {
                        let tap_w = (kw * d) as isize;
                        let (ow_lo, ow_hi) = valid_out_range(wd, ow, s, tap_w, p);
                        let mut acc = 0.0;
                        for bi in 0..bs {
                            let obase = idx4(spec.out_ch, oh, ow, bi, oc, 0, 0);
                            let ibase = idx4(cin, h, wd, bi, ic, 0, 0);
                            for ohi in oh_lo..oh_hi {
                                let ih = (ohi * s) as isize + tap_h - p;
                                let irow = ibase + ih as usize * wd;
                                let orow = obase + ohi * ow;
                                let mut iw = ((ow_lo * s) as isize + tap_w - p) as usize;
                                for owi in ow_lo..ow_hi {
                                    acc += gv[orow + owi] * xv[irow + iw];
                                    iw += s;
                                }
                            }
                        }
                        dv[((oc * cing + icl) * k + kh) * k + kw] = acc;
                    }
                }
            }
        }
    }
    dw
}

/// Gradient of the convolution w.r.t. the bias.
pub fn conv2d_backward_bias(grad_out: &Tensor) -> Tensor {
    let (bs, oc, oh, ow) = grad_out.dims4().expect("grad shape");
    let gv = grad_out.data();
    let mut db = Tensor::zeros(&[oc]);
    let dv = db.data_mut();
    for bi in 0..bs {
        for c in 0..oc {
            let base = idx4(oc, oh, ow, bi, c, 0, 0);
            dv[c] += gv[base..base + oh * ow].iter().sum::<f64>();
        }
    }
    db
}

// ── Mean pooling (stride 1, same zero padding, divide by k^2) ────────

pub fn avg_pool_same(x: &Tensor, k: usize) -> Result<Tensor> {
    if k == 0 || k % 2 == 0 {
        return Err(Error::dim("avg_pool", format!("kernel {k} must be odd")));
    }
    let (bs, c, h, w) = x.dims4()?;
    let pad = (k / 2) as isize;
    let norm = 1.0 / (k * k) as f64;
    let mut out = Tensor::zeros(&[bs, c, h, w]);
    let xv = x.data();
    let ov = out.data_mut();
    for bi in 0..bs {
        for ci in 0..c {
            let base = idx4(c, h, w, bi, ci, 0, 0);
            for oh in 0..h {
                for ow in 0..w {
                    let mut acc = 0.0;
                    for kh in 0..k {
                        let ih = oh as isize + kh as isize - pad;
                        if ih < 0 || ih >= h as isize {
                            continue;
                        }
                        let row = base + ih as usize * w;
                        let lo = (ow as isize - pad).max(0) as usize;
                        let hi = ((ow as isize + pad) as usize).min(w - 1);
                        for iw in lo..=hi {
                            acc += xv[row + iw];
                        }
                    }
                    ov[base + oh * w + ow] = acc * norm;
                }
            }
        }
    }
    Ok(out)
}

// ── Layer normalization across channels per spatial position ─────────

/// Normalizes across the channel axis at every (batch, spatial) position,
/// then applies a per-channel affine. Variance is biased (divide by C).
pub const LN_EPS: f64 = 1e-6;

pub fn layer_norm_forward(x: &Tensor, gain: &Tensor, offset: &Tensor) -> Result<Tensor> {
    let (bs, c, h, w) = x.dims4()?;
    if gain.shape() != [c] || offset.shape() != [c] {
        return Err(Error::dim("layer_norm", format!("gain/offset must be [{c}]")));
    }
    let xv = x.data();
    let gv = gain.data();
    let ov = offset.data();
    let mut out = Tensor::zeros(x.shape());
    let yv = out.data_mut();
    let plane = h * w;
    for bi in 0..bs {
        for pos in 0..plane {
            let mut mu = 0.0;
            for ci in 0..c {
                mu += xv[(bi * c + ci) * plane + pos];
            }
            mu /= c as f64;
            let mut var = 0.0;
            for ci in 0..c {
                let d = xv[(bi * c + ci) * plane + pos] - mu;
                var += d * d;
            }
            var /= c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();
            for ci in 0..c {
                let i = (bi * c + ci) * plane + pos;
                yv[i] = (xv[i] - mu) * inv * gv[ci] + ov[ci];
            }
        }
    }
    Ok(out)
}

/// Returns (dx, dgain, doffset).
pub fn layer_norm_backward(grad: &Tensor, x: &Tensor, gain: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (bs, c, h, w) = x.dims4().expect("x shape");
    let plane = h * w;
    let xv = x.data();
    let gv = gain.data();
    let gr = grad.data();
    let mut dx = Tensor::zeros(x.shape());
    let mut dgain = Tensor::zeros(&[c]);
    let mut doffset = Tensor::zeros(&[c]);
    let dxv = dx.data_mut();
    for bi in 0..bs {
        for pos in 0..plane {
            let mut mu = 0.0;
            for ci in 0..c {
                mu += xv[(bi * c + ci) * plane + pos];
            }
            mu /= c as f64;
            let mut var = 0.0;
            for ci in 0..c {
                let d = xv[(bi * c + ci) * plane + pos] - mu;
                var += d * d;
            }
            var /= c as f64;
            let inv = 1.0 / (var + LN_EPS).sqrt();

            // xhat = (x - mu) * inv; dxhat = grad * gain
            let mut mean_dxhat = 0.0;
            let mut mean_dxhat_xhat = 0.0;
            for ci in 0..c {
                let i = (bi * c + ci) * plane + pos;
                let xhat = (xv[i] - mu) * inv;
                let dxhat = gr[i] * gv[ci];
                mean_dxhat += dxhat;
                mean_dxhat_xhat += dxhat * xhat;
                dgain.data_mut()[ci] += gr[i] * xhat;
                doffset.data_mut()[ci] += gr[i];
            }
            mean_dxhat /= c as f64;
            mean_dxhat_xhat /= c as f64;
            for ci in 0..c {
                let i = (bi * c + ci) * plane + pos;
                let xhat = (xv[i] - mu) * inv;
                let dxhat = gr[i] * gv[ci];
                dxv[i] = inv * (dxhat - mean_dxhat - xhat * mean_dxhat_xhat);
            }
        }
    }
    (dx, dgain, doffset)
}

// ── Bilinear resampling (align_corners = false) ──────────────────────

/// Source taps and weights for one output coordinate.
#[inline]
fn bilinear_taps(out_i: usize, scale: f64, in_ext: usize) -> (usize, usize, f64) {
    let center = (out_i as f64 + 0.5) * scale - 0.5;
    let clamped = center.clamp(0.0, (in_ext - 1) as f64);
    let i0 = clamped.floor() as usize;
    let i1 = (i0 + 1).min(in_ext - 1);
    (i0, i1, clamped - i0 as f64)
}

pub fn bilinear_forward(x: &Tensor, th: usize, tw: usize) -> Result<Tensor> {
    let (bs, c, h, w) = x.dims4()?;
    if th == 0 || tw == 0 {
        return Err(Error::dim("upsample_bilinear", "target extents must be >= 1"));
    }
    let sh = h as f64 / th as f64;
    let sw = w as f64 / tw as f64;
    let xv = x.data();
    let mut out = Tensor::zeros(&[bs, c, th, tw]);
    let ov = out.data_mut();
    for bi in 0..bs {
        for ci in 0..c {
            let ibase = idx4(c, h, w, bi, ci, 0, 0);
            let obase = idx4(c, th, tw, bi, ci, 0, 0);
            for oy in 0..th {
                let (y0, y1, fy) = bilinear_taps(oy, sh, h);
                for ox in 0..tw {
                    let (x0, x1, fx) = bilinear_taps(ox, sw, w);
                    let v00 = xv[ibase + y0 * w + x0];
                    let v01 = xv[ibase + y0 * w + x1];
                    let v10 = xv[ibase + y1 * w + x0];
                    let v11 = xv[ibase + y1 * w + x1];
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    ov[obase + oy * tw + ox] = top + (bot - top) * fy;
                }
            }
        }
    }
    Ok(out)
}

pub fn bilinear_backward(grad: &Tensor, in_shape: (usize, usize, usize, usize)) -> Tensor {
    let (bs, c, h, w) = in_shape;
    let (_, _, th, tw) = grad.dims4().expect("grad shape");
    let sh = h as f64 / th as f64;
    let sw = w as f64 / tw as f64;
    let gv = grad.data();
    let mut dx = Tensor::zeros(&[bs, c, h, w]);
    let dv = dx.data_mut();
    for bi in 0..bs {
        for ci in 0..c {
            let ibase = idx4(c, h, w, bi, ci, 0, 0);
            let obase = idx4(c, th, tw, bi, ci, 0, 0);
            for oy in 0..th {
                let (y0, y1, fy) = bilinear_taps(oy, sh, h);
                for ox in 0..tw {
                    let (x0, x1, fx) = bilinear_taps(ox, sw, w);
                    let g = gv[obase + oy * tw + ox];
                    dv[ibase + y0 * w + x0] += g * (1.0 - fy) * (1.0 - fx);
                    dv[ibase + y0 * w + x1] += g * (1.0 - fy) * fx;
                    dv[ibase + y1 * w + x0] += g * fy * (1.0 - fx);
                    dv[ibase + y1 * w + x1] += g * fy * fx;
                }
            }
        }
    }
    dx
}

// ── Pixel shuffle ────────────────────────────────────────────────────

/// [b, c*r^2, h, w] -> [b, c, r*h, r*w]; block (dy*r + dx) of channel group c
/// lands at spatial offset (dy, dx).
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (bs, c_in, h, w) = x.dims4()?;
    if r == 0 || c_in % (r * r) != 0 {
        return Err(Error::dim("pixel_shuffle", format!("{c_in} channels not divisible by r^2={}", r * r)));
    }
    let c = c_in / (r * r);
    let xv = x.data();
    let mut out = Tensor::zeros(&[bs, c, h * r, w * r]);
    let ov = out.data_mut();
    for bi in 0..bs {
        for co in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let ci = co * r * r + dy * r + dx;
                    let ibase = idx4(c_in, h, w, bi, ci, 0, 0);
                    let obase = idx4(c, h * r, w * r, bi, co, 0, 0);
                    for y in 0..h {
                        let orow = obase + (y * r + dy) * (w * r) + dx;
                        let irow = ibase + y * w;
                        for x_ in 0..w {
                            ov[orow + x_ * r] = xv[irow + x_];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

/// Exact inverse of [`pixel_shuffle`].
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (bs, c, hh, ww) = x.dims4()?;
    if r == 0 || hh % r != 0 || ww % r != 0 {
        return Err(Error::dim("pixel_unshuffle", format!("extents {hh}x{ww} not divisible by r={r}")));
    }
    let (h, w) = (hh / r, ww / r);
    let c_out = c * r * r;
    let xv = x.data();
    let mut out = Tensor::zeros(&[bs, c_out, h, w]);
    let ov = out.data_mut();
    for bi in 0..bs {
        for co in 0..c {
            for dy in 0..r {
                for dx in 0..r {
                    let ci = co * r * r + dy * r + dx;
                    let obase = idx4(c_out, h, w, bi, ci, 0, 0);
                    let ibase = idx4(c, hh, ww, bi, co, 0, 0);
                    for y in 0..h {
                        let irow = ibase + (y * r + dy) * ww + dx;
                        let orow = obase + y * w;
                        for x_ in 0..w {
                            ov[orow + x_] = xv[irow + x_ * r];
                        }
                    }
                }
            }
        }
    }
    Ok(out)
}

// ── Matrix multiply ──────────────────────────────────────────────────

/// C[m,n] = A[m,k] * B[k,n], accumulated row-major with the k loop hoisted.
pub fn matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for t in 0..k {
            let av = a[i * k + t];
            if av == 0.0 {
                continue;
            }
            let brow = &b[t * n..(t + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow.iter()) {
                *cv += av * bv;
            }
        }
    }
    c
}

pub fn transpose(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut t = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            t[j * rows + i] = a[i * cols + j];
        }
    }
    t
}

// ── Scalar nonlinearities ────────────────────────────────────────────

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// ln(1 + e^x), computed without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Tanh-approximation constants: sqrt(2/pi) and the cubic coefficient.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044715;

#[inline]
pub fn gelu(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}
