//! Forward and adjoint kernels on raw slices. The graph in `graph.rs` wires
//! these together; they are also used directly for no-grad image warping.

use crate::error::{Error, Result};

/// `c = a * b (+ beta * c)` for row-major `a: m x k`, `b: k x n`, either of
/// which may be read transposed.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    a_trans: bool,
    b: &[f32],
    b_trans: bool,
    c: &mut [f32],
    beta: f32,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        for v in c[..m * n].iter_mut() {
            *v *= beta;
        }
        return;
    }
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: bounds asserted above; strides describe the row-major layouts.
    unsafe {
        matrixmultiply::sgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub h: usize,
    pub w: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub h_out: usize,
    pub w_out: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], kernel: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (c_in, h, w) = match input {
            &[c, h, w] => (c, h, w),
            s => return Err(Error::shape("conv2d", format!("input must be c x h x w, got {s:?}"))),
        };
        let (c_out, kc, kh, kw) = match kernel {
            &[o, c, kh, kw] => (o, c, kh, kw),
            s => {
                return Err(Error::shape(
                    "conv2d",
                    format!("kernel must be c_out x c_in x k x k, got {s:?}"),
                ))
            }
        };
        if kc != c_in {
            return Err(Error::shape(
                "conv2d",
                format!("kernel expects {kc} input channels, input has {c_in}"),
            ));
        }
        if kh != kw || kh % 2 == 0 {
            return Err(Error::shape("conv2d", format!("kernel must be square and odd, got {kh}x{kw}")));
        }
        if !(stride == 1 || stride == 2) {
            return Err(Error::InvalidArgument(format!("conv2d stride must be 1 or 2, got {stride}")));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw {
            return Err(Error::shape(
                "conv2d",
                format!("input {h}x{w} with padding {pad} smaller than kernel {kh}"),
            ));
        }
        let h_out = (h + 2 * pad - kh) / stride + 1;
        let w_out = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom {
            c_in,
            h,
            w,
            c_out,
            k: kh,
            stride,
            pad,
            h_out,
            w_out,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.c_in * self.k * self.k
    }

    pub fn col_cols(&self) -> usize {
        self.h_out * self.w_out
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + kx - pad` lies inside `[0, w)`.
#[inline]
fn valid_range(k_off: usize, g: &ConvGeom, n_out: usize, n_in: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.pad);
    let lo = if k_off >= p { 0 } else { (p - k_off).div_ceil(s) };
    // largest ox with ox * s + k_off - p <= n_in - 1
    let hi = if n_in + p < k_off + 1 { 0 } else { ((n_in - 1 + p - k_off) / s + 1).min(n_out) };
    (lo.min(hi), hi)
}

pub(crate) fn im2col(input: &[f32], g: &ConvGeom, cols: &mut [f32]) {
    let n = g.col_cols();
    for ci in 0..g.c_in {
        let plane = &input[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = valid_range(ky, g, g.h_out, g.h);
            for kx in 0..g.k {
                let (xlo, xhi) = valid_range(kx, g, g.w_out, g.w);
                let row = (ci * g.k + ky) * g.k + kx;
                let dst = &mut cols[row * n..(row + 1) * n];
                for oy in 0..g.h_out {
                    let out_row = &mut dst[oy * g.w_out..(oy + 1) * g.w_out];
                    if oy < ylo || oy >= yhi {
                        out_row.fill(0.0);
                        continue;
                    }
                    let iy = oy * g.stride + ky - g.pad;
                    let src = &plane[iy * g.w..(iy + 1) * g.w];
                    out_row[..xlo].fill(0.0);
                    out_row[xhi..].fill(0.0);
                    let ix0 = xlo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        out_row[xlo..xhi].copy_from_slice(&src[ix0..ix0 + (xhi - xlo)]);
                    } else {
                        for (j, o) in out_row[xlo..xhi].iter_mut().enumerate() {
                            *o = src[ix0 + j * g.stride];
                        }
                    }
                }
            }
        }
    }
}

pub(crate) fn col2im(cols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let n = g.col_cols();
    for ci in 0..g.c_in {
        let plane = &mut dx[ci * g.h * g.w..(ci + 1) * g.h * g.w];
        for ky in 0..g.k {
            let (ylo, yhi) = valid_range(ky, g, g.h_out, g.h);
            for kx in 0..g.k {
                let (xlo, xhi) = valid_range(kx, g, g.w_out, g.w);
                let row = (ci * g.k + ky) * g.k + kx;
                let src = &cols[row * n..(row + 1) * n];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ky - g.pad;
                    let dst = &mut plane[iy * g.w..(iy + 1) * g.w];
                    let s_row = &src[oy * g.w_out + xlo..oy * g.w_out + xhi];
                    let ix0 = xlo * g.stride + kx - g.pad;
                    if g.stride == 1 {
                        dst[ix0..ix0 + s_row.len()].iter_mut().zip(s_row).for_each(|(d, v)| *d += v);
                    } else {
                        for (j, v) in s_row.iter().enumerate() {
                            dst[ix0 + j * g.stride] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Returns the output and the im2col buffer (kept for the adjoint).
pub(crate) fn conv2d_forward(input: &[f32], kernel: &[f32], g: &ConvGeom) -> (Vec<f32>, Vec<f32>) {
    let mut cols = vec![0.0; g.col_rows() * g.col_cols()];
    im2col(input, g, &mut cols);
    let mut out = vec![0.0; g.c_out * g.col_cols()];
    gemm(g.c_out, g.col_rows(), g.col_cols(), kernel, false, &cols, false, &mut out, 0.0);
    (out, cols)
}

pub(crate) fn conv2d_backward_kernel(dy: &[f32], cols: &[f32], g: &ConvGeom, dk: &mut [f32]) {
    gemm(g.c_out, g.col_cols(), g.col_rows(), dy, false, cols, true, dk, 1.0);
}

pub(crate) fn conv2d_backward_input(dy: &[f32], kernel: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let mut dcols = vec![0.0; g.col_rows() * g.col_cols()];
    gemm(g.col_rows(), g.c_out, g.col_cols(), kernel, true, dy, false, &mut dcols, 0.0);
    col2im(&dcols, g, dx);
}

/// Clamped bilinear sample position along one axis.
#[derive(Clone, Copy, Debug)]
struct Tap {
    i0: usize,
    i1: usize,
    frac: f32,
    /// False when the requested position was clamped to the border.
    inside: bool,
}

#[inline]
fn tap(pos: f32, size: usize) -> Tap {
    let hi = (size - 1) as f32;
    let inside = (0.0..=hi).contains(&pos);
    let p = pos.clamp(0.0, hi);
    let i0 = p.floor() as usize;
    let i0 = i0.min(size - 1);
    let i1 = (i0 + 1).min(size - 1);
    Tap {
        i0,
        i1,
        frac: p - i0 as f32,
        inside,
    }
}

#[inline]
fn lerp(a: f32, b: f32, t: f32) -> f32 {
    if t == 0.0 {
        a
    } else {
        a + t * (b - a)
    }
}

/// Bilinear warp: `out(c, y, x) = input(c, y + flow_y, x + flow_x)`, border clamped.
pub fn grid_sample_forward(input: &[f32], c: usize, h: usize, w: usize, flow: &[f32]) -> Vec<f32> {
    let hw = h * w;
    let mut out = vec![0.0; c * hw];
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let tx = tap(x as f32 + flow[idx], w);
            let ty = tap(y as f32 + flow[hw + idx], h);
            for ch in 0..c {
                let p = &input[ch * hw..(ch + 1) * hw];
                let top = lerp(p[ty.i0 * w + tx.i0], p[ty.i0 * w + tx.i1], tx.frac);
                let v = if ty.frac == 0.0 {
                    top
                } else {
                    let bot = lerp(p[ty.i1 * w + tx.i0], p[ty.i1 * w + tx.i1], tx.frac);
                    lerp(top, bot, ty.frac)
                };
                out[ch * hw + idx] = v;
            }
        }
    }
    out
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn grid_sample_backward(
    input: &[f32],
    c: usize,
    h: usize,
    w: usize,
    flow: &[f32],
    dy: &[f32],
    mut dinput: Option<&mut [f32]>,
    mut dflow: Option<&mut [f32]>,
) {
    let hw = h * w;
    for y in 0..h {
        for x in 0..w {
            let idx = y * w + x;
            let tx = tap(x as f32 + flow[idx], w);
            let ty = tap(y as f32 + flow[hw + idx], h);
            let (fx, fy) = (tx.frac, ty.frac);
            let mut gx = 0.0;
            let mut gy = 0.0;
            for ch in 0..c {
                let g = dy[ch * hw + idx];
                if g == 0.0 {
                    continue;
                }
                let off = ch * hw;
                let i00 = off + ty.i0 * w + tx.i0;
                let i01 = off + ty.i0 * w + tx.i1;
                let i10 = off + ty.i1 * w + tx.i0;
                let i11 = off + ty.i1 * w + tx.i1;
                if let Some(di) = dinput.as_deref_mut() {
                    di[i00] += g * (1.0 - fx) * (1.0 - fy);
                    di[i01] += g * fx * (1.0 - fy);
                    di[i10] += g * (1.0 - fx) * fy;
                    di[i11] += g * fx * fy;
                }
                let (v00, v01, v10, v11) = (input[i00], input[i01], input[i10], input[i11]);
                gx += g * ((1.0 - fy) * (v01 - v00) + fy * (v11 - v10));
                gy += g * ((1.0 - fx) * (v10 - v00) + fx * (v11 - v01));
            }
            if let Some(df) = dflow.as_deref_mut() {
                if tx.inside {
                    df[idx] += gx;
                }
                if ty.inside {
                    df[hw + idx] += gy;
                }
            }
        }
    }
}

pub(crate) fn down2_forward(input: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        let p = &input[ch * h * w..];
        for i in 0..ho {
            for j in 0..wo {
                let a = p[2 * i * w + 2 * j] + p[2 * i * w + 2 * j + 1];
                let b = p[(2 * i + 1) * w + 2 * j] + p[(2 * i + 1) * w + 2 * j + 1];
                out[(ch * ho + i) * wo + j] = 0.25 * (a + b);
            }
        }
    }
    out
}

pub(crate) fn down2_backward(dy: &[f32], c: usize, h: usize, w: usize, dx: &mut [f32]) {
    let (ho, wo) = (h / 2, w / 2);
    for ch in 0..c {
        for i in 0..ho {
            for j in 0..wo {
                let g = 0.25 * dy[(ch * ho + i) * wo + j];
                let base = ch * h * w;
                dx[base + 2 * i * w + 2 * j] += g;
                dx[base + 2 * i * w + 2 * j + 1] += g;
                dx[base + (2 * i + 1) * w + 2 * j] += g;
                dx[base + (2 * i + 1) * w + 2 * j + 1] += g;
            }
        }
    }
}

/// Source taps for output index `o` of a 2x half-pixel bilinear upsample.
#[inline]
fn up_taps(o: usize, n: usize) -> (usize, usize) {
    let i = o / 2;
    if o % 2 == 0 {
        (i, i.saturating_sub(1))
    } else {
        (i, (i + 1).min(n - 1))
    }
}

pub(crate) fn up2_forward(input: &[f32], c: usize, h: usize, w: usize) -> Vec<f32> {
    let (ho, wo) = (2 * h, 2 * w);
    let mut rows = vec![0.0; c * h * wo];
    for ch in 0..c {
        for i in 0..h {
            let src = &input[(ch * h + i) * w..(ch * h + i + 1) * w];
            let dst = &mut rows[(ch * h + i) * wo..(ch * h + i + 1) * wo];
            for (o, d) in dst.iter_mut().enumerate() {
                let (a, b) = up_taps(o, w);
                *d = 0.75 * src[a] + 0.25 * src[b];
            }
        }
    }
    let mut out = vec![0.0; c * ho * wo];
    for ch in 0..c {
        for o in 0..ho {
            let (a, b) = up_taps(o, h);
            let ra = (ch * h + a) * wo;
            let rb = (ch * h + b) * wo;
            let dst = (ch * ho + o) * wo;
            for x in 0..wo {
                out[dst + x] = 0.75 * rows[ra + x] + 0.25 * rows[rb + x];
            }
        }
    }
    out
}

pub(crate) fn up2_backward(dy: &[f32], c: usize, h: usize, w: usize, dx: &mut [f32]) {
    let (ho, wo) = (2 * h, 2 * w);
    let mut drows = vec![0.0; c * h * wo];
    for ch in 0..c {
        for o in 0..ho {
            let (a, b) = up_taps(o, h);
            let src = (ch * ho + o) * wo;
            for x in 0..wo {
                let g = dy[src + x];
                drows[(ch * h + a) * wo + x] += 0.75 * g;
                drows[(ch * h + b) * wo + x] += 0.25 * g;
            }
        }
    }
    for ch in 0..c {
        for i in 0..h {
            for o in 0..wo {
                let (a, b) = up_taps(o, w);
                let g = drows[(ch * h + i) * wo + o];
                dx[(ch * h + i) * w + a] += 0.75 * g;
                dx[(ch * h + i) * w + b] += 0.25 * g;
            }
        }
    }
}

/// Maps grid index to continuous pixel coordinate: `coord = scale * index + offset`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CoordMap {
    pub scale: f32,
    pub offset: f32,
}

impl CoordMap {
    pub const IDENTITY: CoordMap = CoordMap {
        scale: 1.0,
        offset: 0.0,
    };

    /// Grid downsampled by `factor` relative to the pixel grid, pixel centers aligned.
    pub fn downsampled(factor: usize) -> Self {
        let f = factor as f32;
        CoordMap {
            scale: f,
            offset: 0.5 * (f - 1.0),
        }
    }

    #[inline]
    pub fn at(&self, i: usize) -> f32 {
        self.scale * i as f32 + self.offset
    }
}

/// Normalized spatial moments per channel: `[px, py, sxx, sxy, syy]`, with
/// `eps` added to the covariance diagonal.
pub(crate) fn moments_forward(act: &[f32], k: usize, h: usize, w: usize, map: CoordMap, eps: f32) -> Result<Vec<f32>> {
    let hw = h * w;
    let mut out = vec![0.0; k * 5];
    for ch in 0..k {
        let a = &act[ch * hw..(ch + 1) * hw];
        let mut s = 0.0f64;
        let mut mx = 0.0f64;
        let mut my = 0.0f64;
        for y in 0..h {
            let cy = map.at(y) as f64;
            for x in 0..w {
                let v = a[y * w + x] as f64;
                s += v;
                mx += v * map.at(x) as f64;
                my += v * cy;
            }
        }
        if !(s > 0.0) {
            return Err(Error::NonFinite { op: "spatial_moments" });
        }
        mx /= s;
        my /= s;
        let (mut sxx, mut sxy, mut syy) = (0.0f64, 0.0f64, 0.0f64);
        for y in 0..h {
            let dy = map.at(y) as f64 - my;
            for x in 0..w {
                let v = a[y * w + x] as f64 / s;
                let dx = map.at(x) as f64 - mx;
                sxx += v * dx * dx;
                sxy += v * dx * dy;
                syy += v * dy * dy;
            }
        }
        out[ch * 5..ch * 5 + 5].copy_from_slice(&[
            mx as f32,
            my as f32,
            (sxx + eps as f64) as f32,
            sxy as f32,
            (syy + eps as f64) as f32,
        ]);
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn moments_backward(
    act: &[f32],
    out: &[f32],
    k: usize,
    h: usize,
    w: usize,
    map: CoordMap,
    eps: f32,
    dy: &[f32],
    dx: &mut [f32],
) {
    let hw = h * w;
    for ch in 0..k {
        let a = &act[ch * hw..(ch + 1) * hw];
        let s: f64 = a.iter().map(|&v| v as f64).sum();
        let o = &out[ch * 5..ch * 5 + 5];
        let (px, py) = (o[0] as f64, o[1] as f64);
        let (sxx, sxy, syy) = ((o[2] - eps) as f64, o[3] as f64, (o[4] - eps) as f64);
        let g: Vec<f64> = dy[ch * 5..ch * 5 + 5].iter().map(|&v| v as f64).collect();
        for y in 0..h {
            let ry = map.at(y) as f64 - py;
            for x in 0..w {
                let rx = map.at(x) as f64 - px;
                let d = g[0] * rx
                    + g[1] * ry
                    + g[2] * (rx * rx - sxx)
                    + g[3] * (rx * ry - sxy)
                    + g[4] * (ry * ry - syy);
                dx[ch * hw + y * w + x] += (d / s) as f32;
            }
        }
    }
}

/// Inverse-covariance quadratic form pieces for one keypoint.
#[derive(Clone, Copy)]
struct Gauss {
    px: f32,
    py: f32,
    sxx: f32,
    sxy: f32,
    syy: f32,
    det: f32,
}

fn gauss(kp: &[f32]) -> Result<Gauss> {
    let (sxx, sxy, syy) = (kp[2], kp[3], kp[4]);
    let det = sxx * syy - sxy * sxy;
    if !(det > 0.0 && sxx > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "covariance [[{sxx}, {sxy}], [{sxy}, {syy}]] is not positive definite"
        )));
    }
    Ok(Gauss {
        px: kp[0],
        py: kp[1],
        sxx,
        sxy,
        syy,
        det,
    })
}

/// `H_k(x) = exp(-0.5 (x - p_k)^T S_k^-1 (x - p_k))` on an `h x w` grid.
pub(crate) fn heatmaps_forward(kp: &[f32], k: usize, h: usize, w: usize, map: CoordMap) -> Result<Vec<f32>> {
    let hw = h * w;
    let mut out = vec![0.0; k * hw];
    for ch in 0..k {
        let g = gauss(&kp[ch * 5..ch * 5 + 5])?;
        for y in 0..h {
            let dy = map.at(y) - g.py;
            for x in 0..w {
                let dx = map.at(x) - g.px;
                let q = (g.syy * dx * dx - 2.0 * g.sxy * dx * dy + g.sxx * dy * dy) / g.det;
                out[ch * hw + y * w + x] = (-0.5 * q).exp();
            }
        }
    }
    Ok(out)
}

#[allow(clippy::too_many_arguments)]
pub(crate) fn heatmaps_backward(
    kp: &[f32],
    out: &[f32],
    k: usize,
    h: usize,
    w: usize,
    map: CoordMap,
    dy_out: &[f32],
    dkp: &mut [f32],
) {
    let hw = h * w;
    for ch in 0..k {
        let Ok(g) = gauss(&kp[ch * 5..ch * 5 + 5]) else { continue };
        let mut acc = [0.0f64; 5];
        for y in 0..h {
            let dy = map.at(y) - g.py;
            for x in 0..w {
                let i = ch * hw + y * w + x;
                let up = dy_out[i] * out[i];
                if up == 0.0 {
                    continue;
                }
                let dx = map.at(x) - g.px;
                let n = g.syy * dx * dx - 2.0 * g.sxy * dx * dy + g.sxx * dy * dy;
                // dH = -0.5 * H * dq
                let c = (-0.5 * up) as f64;
                let det = g.det as f64;
                let (dx, dy, n) = (dx as f64, dy as f64, n as f64);
                let (sxx, sxy, syy) = (g.sxx as f64, g.sxy as f64, g.syy as f64);
                acc[0] += c * (-(2.0 * syy * dx - 2.0 * sxy * dy) / det);
                acc[1] += c * (-(2.0 * sxx * dy - 2.0 * sxy * dx) / det);
                acc[2] += c * (dy * dy / det - n * syy / (det * det));
                acc[3] += c * (-2.0 * dx * dy / det + 2.0 * n * sxy / (det * det));
                acc[4] += c * (dx * dx / det - n * sxx / (det * det));
            }
        }
        for (d, a) in dkp[ch * 5..ch * 5 + 5].iter_mut().zip(acc) {
            *d += a as f32;
        }
    }
}

