//! Raw NCHW compute kernels, forward and backward. The autograd graph wires
//! these together; nothing here tracks gradients on its own.

use crate::error::{shape_err, Result};
use crate::tensor::Tensor;

/// Zero padding that keeps spatial size for an odd kernel at the given dilation.
pub fn same_padding(kernel: usize, dilation: usize) -> usize {
    dilation * (kernel - 1) / 2
}

fn im2col(
    x: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
    cols: &mut [f64],
) {
    let pad = same_padding(k, dilation) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &x[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let oy = (ky * dilation) as isize - pad;
                let ox = (kx * dilation) as isize - pad;
                for y in 0..h {
                    let sy = y as isize + oy;
                    let drow = &mut dst[y * w..(y + 1) * w];
                    if sy < 0 || sy >= h as isize {
                        drow.fill(0.0);
                        continue;
                    }
                    let srow = &plane[sy as usize * w..(sy as usize + 1) * w];
                    for (xx, d) in drow.iter_mut().enumerate() {
                        let sx = xx as isize + ox;
                        *d = if sx < 0 || sx >= w as isize {
                            0.0
                        } else {
                            srow[sx as usize]
                        };
                    }
                }
            }
        }
    }
}

fn col2im(
    cols: &[f64],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    dilation: usize,
    out: &mut [f64],
) {
    let pad = same_padding(k, dilation) as isize;
    let hw = h * w;
    for ci in 0..c {
        let plane = &mut out[ci * hw..(ci + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let oy = (ky * dilation) as isize - pad;
                let ox = (kx * dilation) as isize - pad;
                for y in 0..h {
                    let sy = y as isize + oy;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let prow = &mut plane[sy as usize * w..(sy as usize + 1) * w];
                    for xx in 0..w {
                        let sx = xx as isize + ox;
                        if sx >= 0 && sx < w as isize {
                            prow[sx as usize] += src[y * w + xx];
                        }
                    }
                }
            }
        }
    }
}

/// `c = alpha * a * b + beta * c` with explicit row/column strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: callers pass slices sized for the given dimensions and strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn check_conv(x: &Tensor, weight: &Tensor) -> Result<(usize, usize, usize, usize, usize, usize)> {
    let (n, c, h, w) = x.dims4()?;
    let (co, ci, kh, kw) = weight.dims4()?;
    if ci != c {
        return shape_err(format!(
            "conv expects {ci} input channels, got {c} (input {:?})",
            x.shape()
        ));
    }
    if kh != kw || kh % 2 == 0 {
        return shape_err(format!("conv kernels must be square and odd, got {kh}x{kw}"));
    }
    Ok((n, c, h, w, co, kh))
}

/// Stride-1 convolution with "same" zero padding.
pub fn conv2d(x: &Tensor, weight: &Tensor, bias: Option<&Tensor>, dilation: usize) -> Result<Tensor> {
    let (n, c, h, w, co, k) = check_conv(x, weight)?;
    if let Some(b) = bias {
        if b.numel() != co {
            return shape_err(format!("conv bias has {} entries, expected {co}", b.numel()));
        }
    }
    let hw = h * w;
    let kk = c * k * k;
    let mut out = vec![0.0; n * co * hw];
    let mut cols = vec![0.0; kk * hw];
    for i in 0..n {
        let xi = &x.data()[i * c * hw..(i + 1) * c * hw];
        let oi = &mut out[i * co * hw..(i + 1) * co * hw];
        let src: &[f64] = if k == 1 {
            xi
        } else {
            im2col(xi, c, h, w, k, dilation, &mut cols);
            &cols
        };
        if let Some(b) = bias {
            for (o, bv) in oi.chunks_mut(hw).zip(b.data()) {
                o.fill(*bv);
            }
        }
        gemm(co, kk, hw, weight.data(), kk, 1, src, hw, 1, 1.0, oi);
    }
    Tensor::new(vec![n, co, h, w], out)
}

/// Gradients of [`conv2d`] with respect to input, weight and bias.
pub fn conv2d_backward(
    x: &Tensor,
    weight: &Tensor,
    grad_out: &Tensor,
    dilation: usize,
) -> Result<(Tensor, Tensor, Tensor)> {
    let (n, c, h, w, co, k) = check_conv(x, weight)?;
    let hw = h * w;
    let kk = c * k * k;
    let mut gx = vec![0.0; n * c * hw];
    let mut gw = vec![0.0; co * kk];
    let mut gb = vec![0.0; co];
    let mut cols = vec![0.0; kk * hw];
    let mut gcols = vec![0.0; kk * hw];
    for i in 0..n {
        let xi = &x.data()[i * c * hw..(i + 1) * c * hw];
        let go = &grad_out.data()[i * co * hw..(i + 1) * co * hw];
        for (b, row) in gb.iter_mut().zip(go.chunks(hw)) {
            *b += row.iter().sum::<f64>();
        }
        let src: &[f64] = if k == 1 {
            xi
        } else {
            im2col(xi, c, h, w, k, dilation, &mut cols);
            &cols
        };
        // gw += go (co x hw) * src^T (hw x kk)
        gemm(co, hw, kk, go, hw, 1, src, 1, hw, 1.0, &mut gw);
        let gxi = &mut gx[i * c * hw..(i + 1) * c * hw];
        if k == 1 {
            // gx = W^T (kk x co) * go (co x hw)
            gemm(kk, co, hw, weight.data(), 1, kk, go, hw, 1, 0.0, gxi);
        } else {
            gemm(kk, co, hw, weight.data(), 1, kk, go, hw, 1, 0.0, &mut gcols);
            col2im(&gcols, c, h, w, k, dilation, gxi);
        }
    }
    Ok((
        Tensor::new(vec![n, c, h, w], gx)?,
        Tensor::new(weight.shape().to_vec(), gw)?,
        Tensor::new(vec![co], gb)?,
    ))
}

/// 2x2 max pooling with stride 2. Returns the pooled tensor and, per output
/// element, the flat input index that won (first maximum on ties).
pub fn max_pool2(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    if h % 2 != 0 || w % 2 != 0 {
        return shape_err(format!("2x2 pooling needs even height and width, got {h}x{w}"));
    }
    let (oh, ow) = (h / 2, w / 2);
    let d = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    let mut arg = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            for xx in 0..ow {
                let mut best = base + 2 * y * w + 2 * xx;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * y + dy) * w + 2 * xx + dx;
                    if d[idx] > d[best] {
                        best = idx;
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, oh, ow], out)?, arg))
}

/// 3x3 max pooling, stride 1, out-of-bounds positions ignored.
pub fn max_pool3_same(x: &Tensor) -> Result<(Tensor, Vec<usize>)> {
    let (n, c, h, w) = x.dims4()?;
    let d = x.data();
    let mut out = Vec::with_capacity(d.len());
    let mut arg = Vec::with_capacity(d.len());
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..h {
            for xx in 0..w {
                let mut best = base + y * w + xx;
                for sy in y.saturating_sub(1)..(y + 2).min(h) {
                    for sx in xx.saturating_sub(1)..(xx + 2).min(w) {
                        let idx = base + sy * w + sx;
                        if d[idx] > d[best] {
                            best = idx;
                        }
                    }
                }
                out.push(d[best]);
                arg.push(best);
            }
        }
    }
    Ok((Tensor::new(vec![n, c, h, w], out)?, arg))
}

/// Routes pooled gradients back to the winning input positions.
pub fn max_pool_backward(input_shape: &[usize], argmax: &[usize], grad_out: &Tensor) -> Tensor {
    let mut gx = Tensor::zeros(input_shape);
    let g = gx.data_mut();
    for (&idx, &go) in argmax.iter().zip(grad_out.data()) {
        g[idx] += go;
    }
    gx
}

/// Nearest-neighbour upsampling by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let (oh, ow) = (h * factor, w * factor);
    let d = x.data();
    let mut out = Vec::with_capacity(n * c * oh * ow);
    for plane in 0..n * c {
        let base = plane * h * w;
        for y in 0..oh {
            let row = base + (y / factor) * w;
            for xx in 0..ow {
                out.push(d[row + xx / factor]);
            }
        }
    }
    Tensor::new(vec![n, c, oh, ow], out)
}

pub fn upsample_nearest_backward(grad_out: &Tensor, factor: usize) -> Result<Tensor> {
    let (n, c, oh, ow) = grad_out.dims4()?;
    let (h, w) = (oh / factor, ow / factor);
    let g = grad_out.data();
    let mut out = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        for y in 0..oh {
            for xx in 0..ow {
                out[plane * h * w + (y / factor) * w + xx / factor] += g[plane * oh * ow + y * ow + xx];
            }
        }
    }
    Tensor::new(vec![n, c, h, w], out)
}

/// Per-axis bilinear taps `(i0, i1, frac)` using half-pixel centres with
/// edge clamping.
pub fn bilinear_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|o| {
            let pos = ((o as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let i0 = pos.floor() as usize;
            let i1 = (i0 + 1).min(src - 1);
            (i0, i1, pos - i0 as f64)
        })
        .collect()
}

/// Bilinear resize of every plane to `out_h x out_w`.
pub fn resize_bilinear(x: &Tensor, out_h: usize, out_w: usize) -> Result<Tensor> {
    let (n, c, h, w) = x.dims4()?;
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let d = x.data();
    let mut out = Vec::with_capacity(n * c * out_h * out_w);
    for plane in 0..n * c {
        let p = &d[plane * h * w..(plane + 1) * h * w];
        for &(y0, y1, fy) in &ty {
            for &(x0, x1, fx) in &tx {
                let top = p[y0 * w + x0] * (1.0 - fx) + p[y0 * w + x1] * fx;
                let bot = p[y1 * w + x0] * (1.0 - fx) + p[y1 * w + x1] * fx;
                out.push(top * (1.0 - fy) + bot * fy);
            }
        }
    }
    Tensor::new(vec![n, c, out_h, out_w], out)
}

pub fn resize_bilinear_backward(input_shape: &[usize], grad_out: &Tensor) -> Result<Tensor> {
    let (n, c, h, w) = (input_shape[0], input_shape[1], input_shape[2], input_shape[3]);
    let (_, _, out_h, out_w) = grad_out.dims4()?;
    let ty = bilinear_taps(h, out_h);
    let tx = bilinear_taps(w, out_w);
    let g = grad_out.data();
    let mut gx = vec![0.0; n * c * h * w];
    for plane in 0..n * c {
        let p = &mut gx[plane * h * w..(plane + 1) * h * w];
        let go = &g[plane * out_h * out_w..(plane + 1) * out_h * out_w];
        for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                let v = go[oy * out_w + ox];
                p[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                p[y0 * w + x1] += v * (1.0 - fy) * fx;
                p[y1 * w + x0] += v * fy * (1.0 - fx);
                p[y1 * w + x1] += v * fy * fx;
            }
        }
    }
    Tensor::new(input_shape.to_vec(), gx)
}

pub const GROUP_NORM_EPS: f64 = 1e-5;

/// Saved statistics from a group-norm forward pass.
#[derive(Debug, Clone)]
pub struct GroupNormCache {
    pub xhat: Vec<f64>,
    pub rstd: Vec<f64>,
}

/// Group normalisation with per-channel affine parameters.
pub fn group_norm(
    x: &Tensor,
    gamma: &Tensor,
    beta: &Tensor,
    groups: usize,
) -> Result<(Tensor, GroupNormCache)> {
    let (n, c, h, w) = x.dims4()?;
    if groups == 0 || c % groups != 0 {
        return shape_err(format!("{c} channels cannot be split into {groups} groups"));
    }
    if gamma.numel() != c || beta.numel() != c {
        return shape_err(format!("group norm affine parameters must have {c} entries"));
    }
    let cg = c / groups;
    let m = cg * h * w;
    let d = x.data();
    let mut out = vec![0.0; d.len()];
    let mut xhat = vec![0.0; d.len()];
    let mut rstd = Vec::with_capacity(n * groups);
    for i in 0..n {
        for g in 0..groups {
            let start = (i * c + g * cg) * h * w;
            let seg = &d[start..start + m];
            let mean = seg.iter().sum::<f64>() / m as f64;
            let var = seg.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / m as f64;
            let r = 1.0 / (var + GROUP_NORM_EPS).sqrt();
            rstd.push(r);
            for j in 0..m {
                let ch = g * cg + j / (h * w);
                let xh = (seg[j] - mean) * r;
                xhat[start + j] = xh;
                out[start + j] = xh * gamma.data()[ch] + beta.data()[ch];
            }
        }
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, GroupNormCache { xhat, rstd }))
}

pub fn group_norm_backward(
    shape: &[usize],
    gamma: &Tensor,
    groups: usize,
    cache: &GroupNormCache,
    grad_out: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (n, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let cg = c / groups;
    let hw = h * w;
    let m = cg * hw;
    let go = grad_out.data();
    let mut gx = vec![0.0; go.len()];
    let mut ggamma = vec![0.0; c];
    let mut gbeta = vec![0.0; c];
    for i in 0..n {
        for g in 0..groups {
            let start = (i * c + g * cg) * hw;
            let mut sum_dxh = 0.0;
            let mut sum_dxh_xh = 0.0;
            for j in 0..m {
                let ch = g * cg + j / hw;
                let dy = go[start + j];
                let xh = cache.xhat[start + j];
                ggamma[ch] += dy * xh;
                gbeta[ch] += dy;
                let dxh = dy * gamma.data()[ch];
                sum_dxh += dxh;
                sum_dxh_xh += dxh * xh;
            }
            let r = cache.rstd[i * groups + g];
            let mf = m as f64;
            for j in 0..m {
                let ch = g * cg + j / hw;
                let dxh = go[start + j] * gamma.data()[ch];
                let xh = cache.xhat[start + j];
                gx[start + j] = r / mf * (mf * dxh - sum_dxh - xh * sum_dxh_xh);
            }
        }
    }
    (
        Tensor::new(shape.to_vec(), gx).expect("shape preserved"),
        Tensor::new(vec![c], ggamma).expect("channel count"),
        Tensor::new(vec![c], gbeta).expect("channel count"),
    )
}

/// Concatenates NCHW tensors along the channel axis.
pub fn concat_channels(parts: &[&Tensor]) -> Result<Tensor> {
    let Some(first) = parts.first() else {
        return shape_err("concat needs at least one input");
    };
    let (n, _, h, w) = first.dims4()?;
    let mut total_c = 0;
    for p in parts {
        let (pn, pc, ph, pw) = p.dims4()?;
        if (pn, ph, pw) != (n, h, w) {
            return shape_err(format!(
                "concat inputs disagree: {:?} vs {:?}",
                p.shape(),
                first.shape()
            ));
        }
        total_c += pc;
    }
    let hw = h * w;
    let mut out = Vec::with_capacity(n * total_c * hw);
    for i in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[i * pc * hw..(i + 1) * pc * hw]);
        }
    }
    Tensor::new(vec![n, total_c, h, w], out)
}

/// Splits a channel-concatenated gradient back into per-input pieces.
pub fn split_channels(grad: &Tensor, channels: &[usize]) -> Vec<Tensor> {
    let (n, c, h, w) = grad.dims4().expect("rank-4 gradient");
    let hw = h * w;
    let mut parts: Vec<Vec<f64>> = channels.iter().map(|&pc| Vec::with_capacity(n * pc * hw)).collect();
    let g = grad.data();
    for i in 0..n {
        let mut off = i * c * hw;
        for (part, &pc) in parts.iter_mut().zip(channels) {
            part.extend_from_slice(&g[off..off + pc * hw]);
            off += pc * hw;
        }
    }
    parts
        .into_iter()
        .zip(channels)
        .map(|(d, &pc)| Tensor::new(vec![n, pc, h, w], d).expect("split shape"))
        .collect()
}

pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive_conv(x: &Tensor, wt: &Tensor, b: &Tensor, dil: usize) -> Tensor {
        let (n, c, h, w) = x.dims4().unwrap();
        let (co, _, k, _) = wt.dims4().unwrap();
        let pad = (dil * (k - 1) / 2) as isize;
        let mut out = Tensor::zeros(&[n, co, h, w]);
        for i in 0..n {
            for o in 0..co {
                for y in 0..h {
                    for xx in 0..w {
                        let mut acc = b.data()[o];
                        for ci in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let sy = y as isize + (ky * dil) as isize - pad;
                                    let sx = xx as isize + (kx * dil) as isize - pad;
                                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                        continue;
                                    }
                                    acc += wt.data()[((o * c + ci) * k + ky) * k + kx]
                                        * x.data()[((i * c + ci) * h + sy as usize) * w + sx as usize];
                                }
                            }
                        }
                        out.data_mut()[((i * co + o) * h + y) * w + xx] = acc;
                    }
                }
            }
        }
        out
    }

    fn seq(shape: &[usize], scale: f64) -> Tensor {
        Tensor::from_fn(shape, |i| ((i * 37 % 11) as f64 - 5.0) * scale)
    }

    #[test]
    fn conv_matches_nested_loops() {
        for (k, dil) in [(1, 1), (3, 1), (3, 2), (5, 1), (3, 4)] {
            let x = seq(&[2, 3, 7, 6], 0.1);
            let wt = seq(&[4, 3, k, k], 0.05);
            let b = seq(&[4], 0.3);
            let fast = conv2d(&x, &wt, Some(&b), dil).unwrap();
            let slow = naive_conv(&x, &wt, &b, dil);
            assert!(fast.max_abs_diff(&slow) < 1e-12, "k={k} dil={dil}");
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let x = Tensor::zeros(&[1, 2, 4, 4]);
        let wt = Tensor::zeros(&[1, 3, 3, 3]);
        assert!(conv2d(&x, &wt, None, 1).is_err());
    }

    #[test]
    fn pool_picks_maximum() {
        let x = Tensor::new(vec![1, 1, 2, 2], vec![1.0, 4.0, 3.0, 2.0]).unwrap();
        let (y, arg) = max_pool2(&x).unwrap();
        assert_eq!(y.data(), &[4.0]);
        assert_eq!(arg, vec![1]);
    }

    #[test]
    fn resize_to_same_size_is_identity() {
        let x = seq(&[1, 2, 5, 7], 0.3);
        let y = resize_bilinear(&x, 5, 7).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn group_norm_output_is_standardised() {
        let x = seq(&[1, 4, 3, 3], 0.7);
        let (y, _) = group_norm(&x, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 2).unwrap();
        for g in 0..2 {
            let seg = &y.data()[g * 18..(g + 1) * 18];
            let mean: f64 = seg.iter().sum::<f64>() / 18.0;
            assert!(mean.abs() < 1e-12);
        }
    }
}
