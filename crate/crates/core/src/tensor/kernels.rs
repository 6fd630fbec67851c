//! Raw numeric kernels over flat slices. Shapes are validated by the graph
//! layer before anything here runs.

/// Spatial geometry of a 2D convolution over `frame × frequency`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub dilation: (usize, usize),
    pub groups: usize,
}

impl Conv2dGeometry {
    pub fn out_h(&self) -> usize {
        out_len(
            self.in_h,
            self.kernel.0,
            self.stride.0,
            self.padding.0,
            self.dilation.0,
        )
    }

    pub fn out_w(&self) -> usize {
        out_len(
            self.in_w,
            self.kernel.1,
            self.stride.1,
            self.padding.1,
            self.dilation.1,
        )
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels && self.groups > 1
    }

    fn is_pointwise(&self) -> bool {
        self.kernel == (1, 1) && self.stride == (1, 1) && self.padding == (0, 0)
    }
}

/// Output length along one axis, or 0 if the dilated kernel does not fit.
pub(crate) fn out_len(n: usize, k: usize, s: usize, p: usize, d: usize) -> usize {
    let span = d * (k - 1) + 1;
    if n + 2 * p < span {
        0
    } else {
        (n + 2 * p - span) / s + 1
    }
}

/// `c = a·b + beta·c` with explicit row/column strides on every operand.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
    (rsc, csc): (usize, usize),
) {
    if m == 0 || n == 0 {
        return;
    }
    let last = |rows: usize, cols: usize, rs: usize, cs: usize| (rows - 1) * rs + (cols - 1) * cs;
    assert!(k == 0 || a.len() > last(m, k, rsa, csa));
    assert!(k == 0 || b.len() > last(k, n, rsb, csb));
    assert!(c.len() > last(m, n, rsc, csc));
    // SAFETY: the asserts above bound every index the kernel touches.
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
            rsc as isize,
            csc as isize,
        );
    }
}

/// Unfold one image (`channels × h × w`) into columns
/// `(channels·kh·kw) × (out_h·out_w)`.
fn im2col(x: &[f64], channels: usize, g: &Conv2dGeometry, col: &mut [f64]) {
    let (kh, kw) = g.kernel;
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, w) = (g.in_h, g.in_w);
    let p = oh * ow;
    for c in 0..channels {
        let plane = &x[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = ((c * kh + i) * kw + j) * p;
                let dst = &mut col[row..row + p];
                for to in 0..oh {
                    let ti = (to * g.stride.0 + i * g.dilation.0) as isize - g.padding.0 as isize;
                    let line = &mut dst[to * ow..(to + 1) * ow];
                    if ti < 0 || ti >= h as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[ti as usize * w..(ti as usize + 1) * w];
                    if g.stride.1 == 1 {
                        let (lo, hi, off) = tap_range(ow, w, j, g.dilation.1, g.padding.1);
                        line[..lo].fill(0.0);
                        line[hi..].fill(0.0);
                        if lo < hi {
                            let s0 = (lo as isize + off) as usize;
                            line[lo..hi].copy_from_slice(&src[s0..s0 + hi - lo]);
                        }
                        continue;
                    }
                    let off = (j * g.dilation.1) as isize - g.padding.1 as isize;
                    for (fo, v) in line.iter_mut().enumerate() {
                        let fi = (fo * g.stride.1) as isize + off;
                        *v = if fi < 0 || fi >= w as isize {
                            0.0
                        } else {
                            src[fi as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatter-add columns back into an image gradient.
fn col2im(col: &[f64], channels: usize, g: &Conv2dGeometry, dx: &mut [f64]) {
    let (kh, kw) = g.kernel;
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, w) = (g.in_h, g.in_w);
    let p = oh * ow;
    for c in 0..channels {
        let plane = &mut dx[c * h * w..(c + 1) * h * w];
        for i in 0..kh {
            for j in 0..kw {
                let row = ((c * kh + i) * kw + j) * p;
                let src = &col[row..row + p];
                for to in 0..oh {
                    let ti = (to * g.stride.0 + i * g.dilation.0) as isize - g.padding.0 as isize;
                    if ti < 0 || ti >= h as isize {
                        continue;
                    }
                    let dst = &mut plane[ti as usize * w..(ti as usize + 1) * w];
                    if g.stride.1 == 1 {
                        let (lo, hi, off) = tap_range(ow, w, j, g.dilation.1, g.padding.1);
                        if lo < hi {
                            let d0 = (lo as isize + off) as usize;
                            let line = &src[to * ow + lo..to * ow + hi];
                            dst[d0..d0 + hi - lo].iter_mut().zip(line).for_each(|(d, v)| *d += v);
                        }
                        continue;
                    }
                    let off = (j * g.dilation.1) as isize - g.padding.1 as isize;
                    for (fo, &v) in src[to * ow..(to + 1) * ow].iter().enumerate() {
                        let fi = (fo * g.stride.1) as isize + off;
                        if fi >= 0 && fi < w as isize {
                            dst[fi as usize] += v;
                        }
                    }
                }
            }
        }
    }
}

/// Valid output range `[lo, hi)` along one axis for kernel tap `tap` with
/// stride 1, i.e. outputs whose input index `o + tap·d − p` lies in `[0, n)`.
fn tap_range(n_out: usize, n_in: usize, tap: usize, d: usize, p: usize) -> (usize, usize, isize) {
    let off = (tap * d) as isize - p as isize;
    let lo = (-off).max(0) as usize;
    let hi = ((n_in as isize - off).max(0) as usize).min(n_out);
    (lo.min(hi), hi, off)
}

pub(crate) fn conv2d_forward(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    g: &Conv2dGeometry,
    out: &mut [f64],
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    let in_plane = g.in_h * g.in_w;
    if g.is_depthwise() && g.stride == (1, 1) {
        depthwise_forward(x, w, g, out);
    } else {
        let cin_g = g.in_channels / g.groups;
        let cout_g = g.out_channels / g.groups;
        let kk = cin_g * g.kernel.0 * g.kernel.1;
        let mut col = if g.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; kk * p]
        };
        for b in 0..g.batch {
            for grp in 0..g.groups {
                let xs = &x[(b * g.in_channels + grp * cin_g) * in_plane..][..cin_g * in_plane];
                let cols: &[f64] = if g.is_pointwise() {
                    xs
                } else {
                    im2col(xs, cin_g, g, &mut col);
                    &col
                };
                let ws = &w[grp * cout_g * kk..(grp + 1) * cout_g * kk];
                let os = &mut out[(b * g.out_channels + grp * cout_g) * p..][..cout_g * p];
                gemm(cout_g, kk, p, ws, (kk, 1), cols, (p, 1), 0.0, os, (p, 1));
            }
        }
    }
    if let Some(bias) = bias {
        for b in 0..g.batch {
            for (c, &bv) in bias.iter().enumerate() {
                let o = &mut out[(b * g.out_channels + c) * p..][..p];
                o.iter_mut().for_each(|v| *v += bv);
            }
        }
    }
}

fn depthwise_forward(x: &[f64], w: &[f64], g: &Conv2dGeometry, out: &mut [f64]) {
    let (kh, kw) = g.kernel;
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, wd) = (g.in_h, g.in_w);
    out.fill(0.0);
    for b in 0..g.batch {
        for c in 0..g.in_channels {
            let xs = &x[(b * g.in_channels + c) * h * wd..][..h * wd];
            let os = &mut out[(b * g.in_channels + c) * oh * ow..][..oh * ow];
            let ws = &w[c * kh * kw..(c + 1) * kh * kw];
            for i in 0..kh {
                let (t_lo, t_hi, t_off) = tap_range(oh, h, i, g.dilation.0, g.padding.0);
                for j in 0..kw {
                    let wv = ws[i * kw + j];
                    if wv == 0.0 {
                        continue;
                    }
                    let (f_lo, f_hi, f_off) = tap_range(ow, wd, j, g.dilation.1, g.padding.1);
                    if f_lo >= f_hi {
                        continue;
                    }
                    for to in t_lo..t_hi {
                        let ti = (to as isize + t_off) as usize;
                        let src = &xs[ti * wd + (f_lo as isize + f_off) as usize..][..f_hi - f_lo];
                        let dst = &mut os[to * ow + f_lo..to * ow + f_hi];
                        for (d, s) in dst.iter_mut().zip(src) {
                            *d += wv * s;
                        }
                    }
                }
            }
        }
    }
}

/// Gradients of a convolution. Each output buffer is accumulated into.
pub(crate) fn conv2d_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &Conv2dGeometry,
    dx: Option<&mut [f64]>,
    dw: Option<&mut [f64]>,
    db: Option<&mut [f64]>,
) {
    let (oh, ow) = (g.out_h(), g.out_w());
    let p = oh * ow;
    if let Some(db) = db {
        for b in 0..g.batch {
            for (c, d) in db.iter_mut().enumerate() {
                *d += gout[(b * g.out_channels + c) * p..][..p].iter().sum::<f64>();
            }
        }
    }
    if g.is_depthwise() && g.stride == (1, 1) {
        depthwise_backward(x, w, gout, g, dx, dw);
        return;
    }
    let in_plane = g.in_h * g.in_w;
    let cin_g = g.in_channels / g.groups;
    let cout_g = g.out_channels / g.groups;
    let kk = cin_g * g.kernel.0 * g.kernel.1;
    let pointwise = g.is_pointwise();
    let mut col = if pointwise { Vec::new() } else { vec![0.0; kk * p] };
    let mut dcol = vec![0.0; if dx.is_some() { kk * p } else { 0 }];
    let mut dx = dx;
    let mut dw = dw;
    for b in 0..g.batch {
        for grp in 0..g.groups {
            let go = &gout[(b * g.out_channels + grp * cout_g) * p..][..cout_g * p];
            let xs = &x[(b * g.in_channels + grp * cin_g) * in_plane..][..cin_g * in_plane];
            if let Some(dw) = dw.as_deref_mut() {
                let cols: &[f64] = if pointwise {
                    xs
                } else {
                    im2col(xs, cin_g, g, &mut col);
                    &col
                };
                let dws = &mut dw[grp * cout_g * kk..(grp + 1) * cout_g * kk];
                // dW[co, r] += Σ_p gout[co, p] · col[r, p]
                gemm(cout_g, p, kk, go, (p, 1), cols, (1, p), 1.0, dws, (kk, 1));
            }
            if let Some(dx) = dx.as_deref_mut() {
                let ws = &w[grp * cout_g * kk..(grp + 1) * cout_g * kk];
                let dxs = &mut dx[(b * g.in_channels + grp * cin_g) * in_plane..][..cin_g * in_plane];
                if pointwise {
                    gemm(kk, cout_g, p, ws, (1, kk), go, (p, 1), 1.0, dxs, (p, 1));
                } else {
                    gemm(kk, cout_g, p, ws, (1, kk), go, (p, 1), 0.0, &mut dcol, (p, 1));
                    col2im(&dcol, cin_g, g, dxs);
                }
            }
        }
    }
}

fn depthwise_backward(
    x: &[f64],
    w: &[f64],
    gout: &[f64],
    g: &Conv2dGeometry,
    mut dx: Option<&mut [f64]>,
    mut dw: Option<&mut [f64]>,
) {
    let (kh, kw) = g.kernel;
    let (oh, ow) = (g.out_h(), g.out_w());
    let (h, wd) = (g.in_h, g.in_w);
    for b in 0..g.batch {
        for c in 0..g.in_channels {
            let base_in = (b * g.in_channels + c) * h * wd;
            let xs = &x[base_in..][..h * wd];
            let gs = &gout[(b * g.in_channels + c) * oh * ow..][..oh * ow];
            for i in 0..kh {
                let (t_lo, t_hi, t_off) = tap_range(oh, h, i, g.dilation.0, g.padding.0);
                for j in 0..kw {
                    let (f_lo, f_hi, f_off) = tap_range(ow, wd, j, g.dilation.1, g.padding.1);
                    if f_lo >= f_hi {
                        continue;
                    }
                    let widx = c * kh * kw + i * kw + j;
                    let wv = w[widx];
                    let mut acc = 0.0;
                    for to in t_lo..t_hi {
                        let ti = (to as isize + t_off) as usize;
                        let start = ti * wd + (f_lo as isize + f_off) as usize;
                        let gl = &gs[to * ow + f_lo..to * ow + f_hi];
                        if dw.is_some() {
                            acc += xs[start..start + gl.len()]
                                .iter()
                                .zip(gl)
                                .map(|(a, b)| a * b)
                                .sum::<f64>();
                        }
                        if let Some(dx) = dx.as_deref_mut() {
                            let dst = &mut dx[base_in + start..base_in + start + gl.len()];
                            for (d, gv) in dst.iter_mut().zip(gl) {
                                *d += wv * gv;
                            }
                        }
                    }
                    if let Some(dw) = dw.as_deref_mut() {
                        dw[widx] += acc;
                    }
                }
            }
        }
    }
}

/// Non-overlapping mean pooling with floor semantics on each axis.
pub(crate) fn avg_pool2d_forward(
    x: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (ph, pw): (usize, usize),
    out: &mut [f64],
) {
    let (oh, ow) = (h / ph, w / pw);
    let scale = 1.0 / (ph * pw) as f64;
    for n in 0..planes {
        let xs = &x[n * h * w..][..h * w];
        let os = &mut out[n * oh * ow..][..oh * ow];
        for to in 0..oh {
            for fo in 0..ow {
                let mut s = 0.0;
                for i in 0..ph {
                    let row = &xs[(to * ph + i) * w + fo * pw..][..pw];
                    s += row.iter().sum::<f64>();
                }
                os[to * ow + fo] = s * scale;
            }
        }
    }
}

pub(crate) fn avg_pool2d_backward(
    gout: &[f64],
    planes: usize,
    (h, w): (usize, usize),
    (ph, pw): (usize, usize),
    dx: &mut [f64],
) {
    let (oh, ow) = (h / ph, w / pw);
    let scale = 1.0 / (ph * pw) as f64;
    for n in 0..planes {
        let gs = &gout[n * oh * ow..][..oh * ow];
        let ds = &mut dx[n * h * w..][..h * w];
        for to in 0..oh {
            for fo in 0..ow {
                let v = gs[to * ow + fo] * scale;
                for i in 0..ph {
                    ds[(to * ph + i) * w + fo * pw..][..pw]
                        .iter_mut()
                        .for_each(|d| *d += v);
                }
            }
        }
    }
}
