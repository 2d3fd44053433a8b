//! Raw slice kernels shared by forward and backward passes.

use crate::math;

/// `c (m×n) += op(a) (m×k) · op(b) (k×n)` where `op` optionally transposes a
/// row-major operand.
pub fn gemm(
    m: usize,
    n: usize,
    k: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    match (trans_a, trans_b) {
        (false, false) => {
            for i in 0..m {
                let crow = &mut c[i * n..(i + 1) * n];
                for p in 0..k {
                    let av = a[i * k + p];
                    if av == 0.0 {
                        continue;
                    }
                    let brow = &b[p * n..(p + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (false, true) => {
            for i in 0..m {
                let arow = &a[i * k..(i + 1) * k];
                for j in 0..n {
                    c[i * n + j] += math::dot(arow, &b[j * k..(j + 1) * k]);
                }
            }
        }
        (true, false) => {
            for p in 0..k {
                let brow = &b[p * n..(p + 1) * n];
                for i in 0..m {
                    let av = a[p * m + i];
                    if av == 0.0 {
                        continue;
                    }
                    let crow = &mut c[i * n..(i + 1) * n];
                    for (cv, bv) in crow.iter_mut().zip(brow) {
                        *cv += av * bv;
                    }
                }
            }
        }
        (true, true) => {
            for i in 0..m {
                for j in 0..n {
                    let mut s = 0.0;
                    for p in 0..k {
                        s += a[p * m + i] * b[j * k + p];
                    }
                    c[i * n + j] += s;
                }
            }
        }
    }
}

pub fn strides(shape: &[usize]) -> alloc::vec::Vec<usize> {
    let mut s = alloc::vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Writes `out[idx_out] = x[idx_in]` for a permutation `perm` where output
/// axis `i` is input axis `perm[i]`.
pub fn permute(x: &[f64], shape: &[usize], perm: &[usize], out: &mut [f64]) {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: alloc::vec::Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mapped: alloc::vec::Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut idx = alloc::vec![0usize; rank];
    let mut src = 0usize;
    for o in out.iter_mut() {
        *o = x[src];
        // increment the multi-index from the innermost output axis
        let mut ax = rank;
        while ax > 0 {
            ax -= 1;
            idx[ax] += 1;
            src += mapped[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            src -= mapped[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// Row-wise normalisation over rows of width `n`; returns `(xhat, rstd)`.
pub fn normalize_rows(x: &[f64], n: usize, eps: f64, xhat: &mut [f64], rstd: &mut [f64]) {
    for (r, (row, out)) in x.chunks(n).zip(xhat.chunks_mut(n)).enumerate() {
        let mean = row.iter().sum::<f64>() / n as f64;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let rs = 1.0 / math::sqrt(var + eps);
        rstd[r] = rs;
        for (o, v) in out.iter_mut().zip(row) {
            *o = (v - mean) * rs;
        }
    }
}

pub fn normalize_rows_backward(dy: &[f64], xhat: &[f64], rstd: &[f64], n: usize, dx: &mut [f64]) {
    for r in 0..rstd.len() {
        let dyr = &dy[r * n..(r + 1) * n];
        let xr = &xhat[r * n..(r + 1) * n];
        let mean_dy = dyr.iter().sum::<f64>() / n as f64;
        let mean_dyx = math::dot(dyr, xr) / n as f64;
        for j in 0..n {
            dx[r * n + j] += rstd[r] * (dyr[j] - mean_dy - xr[j] * mean_dyx);
        }
    }
}

pub struct Conv2dGeom {
    pub batch: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
}

impl Conv2dGeom {
    pub fn new(x: &[usize], wt: &[usize], stride: usize, pad: usize) -> Self {
        let (batch, cin, h, w) = (x[0], x[1], x[2], x[3]);
        let (cout, kh, kw) = (wt[0], wt[2], wt[3]);
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Self {
            batch,
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            stride,
            pad,
            oh,
            ow,
        }
    }

    /// Visits every `(x_index, w_index, out_index)` triple of the convolution.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let s = self;
        for b in 0..s.batch {
            for co in 0..s.cout {
                for ci in 0..s.cin {
                    for ky in 0..s.kh {
                        for kx in 0..s.kw {
                            let widx = ((co * s.cin + ci) * s.kh + ky) * s.kw + kx;
                            for oy in 0..s.oh {
                                let iy = (oy * s.stride + ky) as isize - s.pad as isize;
                                if iy < 0 || iy >= s.h as isize {
                                    continue;
                                }
                                let xrow = ((b * s.cin + ci) * s.h + iy as usize) * s.w;
                                let orow = ((b * s.cout + co) * s.oh + oy) * s.ow;
                                for ox in 0..s.ow {
                                    let ix = (ox * s.stride + kx) as isize - s.pad as isize;
                                    if ix < 0 || ix >= s.w as isize {
                                        continue;
                                    }
                                    f(xrow + ix as usize, widx, orow + ox);
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        self.for_each(|xi, wi, oi| out[oi] += w[wi] * x[xi]);
    }

    pub fn backward(&self, x: &[f64], w: &[f64], dy: &[f64], dx: Option<&mut [f64]>, dw: Option<&mut [f64]>) {
        if let Some(dx) = dx {
            self.for_each(|xi, wi, oi| dx[xi] += w[wi] * dy[oi]);
        }
        if let Some(dw) = dw {
            self.for_each(|xi, wi, oi| dw[wi] += x[xi] * dy[oi]);
        }
    }
}

/// 3-D convolution over `(frames, channels, h, w)` with replicate padding
/// along time and zero padding in space, stride 1, "same" output size.
pub struct Conv3dGeom {
    pub frames: usize,
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub kt: usize,
    pub kh: usize,
    pub kw: usize,
}

impl Conv3dGeom {
    pub fn new(x: &[usize], wt: &[usize]) -> Self {
        Self {
            frames: x[0],
            cin: x[1],
            h: x[2],
            w: x[3],
            cout: wt[0],
            kt: wt[2],
            kh: wt[3],
            kw: wt[4],
        }
    }

    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, usize, usize)) {
        let s = self;
        let (pt, py, px) = (s.kt / 2, s.kh / 2, s.kw / 2);
        for fr in 0..s.frames {
            for dt in 0..s.kt {
                // replicate padding: clamp the source frame
                let src_f = (fr as isize + dt as isize - pt as isize).clamp(0, s.frames as isize - 1) as usize;
                for co in 0..s.cout {
                    for ci in 0..s.cin {
                        for ky in 0..s.kh {
                            for kx in 0..s.kw {
                                let widx = (((co * s.cin + ci) * s.kt + dt) * s.kh + ky) * s.kw + kx;
                                for y in 0..s.h {
                                    let iy = y as isize + ky as isize - py as isize;
                                    if iy < 0 || iy >= s.h as isize {
                                        continue;
                                    }
                                    let xrow = ((src_f * s.cin + ci) * s.h + iy as usize) * s.w;
                                    let orow = ((fr * s.cout + co) * s.h + y) * s.w;
                                    for x in 0..s.w {
                                        let ix = x as isize + kx as isize - px as isize;
                                        if ix < 0 || ix >= s.w as isize {
                                            continue;
                                        }
                                        f(xrow + ix as usize, widx, orow + x);
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }

    pub fn forward(&self, x: &[f64], w: &[f64], out: &mut [f64]) {
        self.for_each(|xi, wi, oi| out[oi] += w[wi] * x[xi]);
    }

    pub fn backward(&self, x: &[f64], w: &[f64], dy: &[f64], dx: Option<&mut [f64]>, dw: Option<&mut [f64]>) {
        if let Some(dx) = dx {
            self.for_each(|xi, wi, oi| dx[xi] += w[wi] * dy[oi]);
        }
        if let Some(dw) = dw {
            self.for_each(|xi, wi, oi| dw[wi] += x[xi] * dy[oi]);
        }
    }
}
