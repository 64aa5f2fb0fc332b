//! Raw numeric kernels shared by the forward and backward passes.

/// Convolution geometry for one image: `channels × in_h × in_w` input,
/// square `kernel`, producing `out_h × out_w`.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvGeom {
    pub channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(channels: usize, in_h: usize, in_w: usize, kernel: usize, stride: usize, pad: usize) -> Option<Self> {
        let ph = in_h + 2 * pad;
        let pw = in_w + 2 * pad;
        if kernel > ph || kernel > pw || stride == 0 {
            return None;
        }
        Some(Self {
            channels,
            in_h,
            in_w,
            kernel,
            stride,
            pad,
            out_h: (ph - kernel) / stride + 1,
            out_w: (pw - kernel) / stride + 1,
        })
    }

    pub fn col_rows(&self) -> usize {
        self.channels * self.kernel * self.kernel
    }

    pub fn col_cols(&self) -> usize {
        self.out_h * self.out_w
    }
}

/// Unfolds one image into `cols`, whose rows are `ld` apart.
pub(crate) fn im2col(x: &[f64], g: &ConvGeom, cols: &mut [f64], ld: usize) {
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            let (ilo, ihi) = valid_range(ki, g.pad, g.stride, g.in_h, g.out_h);
            for kj in 0..k {
                let (jlo, jhi) = valid_range(kj, g.pad, g.stride, g.in_w, g.out_w);
                let row = (c * k + ki) * k + kj;
                let dst = &mut cols[row * ld..row * ld + ncols];
                dst[..ilo * g.out_w].fill(0.0);
                dst[ihi * g.out_w..].fill(0.0);
                for oi in ilo..ihi {
                    let ii = oi * g.stride + ki - g.pad;
                    let src = &plane[ii * g.in_w..(ii + 1) * g.in_w];
                    let out_row = &mut dst[oi * g.out_w..(oi + 1) * g.out_w];
                    out_row[..jlo].fill(0.0);
                    out_row[jhi..].fill(0.0);
                    if jlo >= jhi {
                        continue;
                    }
                    let j0 = jlo * g.stride + kj - g.pad;
                    if g.stride == 1 {
                        out_row[jlo..jhi].copy_from_slice(&src[j0..j0 + jhi - jlo]);
                    } else {
                        for (o, v) in out_row[jlo..jhi].iter_mut().zip(src[j0..].iter().step_by(g.stride)) {
                            *o = *v;
                        }
                    }
                }
            }
        }
    }
}

/// Output positions `[lo, hi)` whose tap at kernel offset `off` lands
/// inside an input extent of `len`.
fn valid_range(off: usize, pad: usize, stride: usize, len: usize, out: usize) -> (usize, usize) {
    // need 0 <= o*stride + off - pad < len
    let lo = if off >= pad { 0 } else { (pad - off).div_ceil(stride) };
    let hi = if len + pad > off { (len + pad - off).div_ceil(stride) } else { 0 };
    let hi = hi.min(out);
    (lo.min(hi), hi)
}

/// Scatter-add of `cols` back onto the image grid (adjoint of `im2col`).
pub(crate) fn col2im(cols: &[f64], g: &ConvGeom, x: &mut [f64], ld: usize) {
    let k = g.kernel;
    let ncols = g.col_cols();
    for c in 0..g.channels {
        let plane = &mut x[c * g.in_h * g.in_w..(c + 1) * g.in_h * g.in_w];
        for ki in 0..k {
            let (ilo, ihi) = valid_range(ki, g.pad, g.stride, g.in_h, g.out_h);
            for kj in 0..k {
                let (jlo, jhi) = valid_range(kj, g.pad, g.stride, g.in_w, g.out_w);
                if jlo >= jhi {
                    continue;
                }
                let row = (c * k + ki) * k + kj;
                let src = &cols[row * ld..row * ld + ncols];
                for oi in ilo..ihi {
                    let ii = oi * g.stride + ki - g.pad;
                    let dst = &mut plane[ii * g.in_w..(ii + 1) * g.in_w];
                    let j0 = jlo * g.stride + kj - g.pad;
                    let s = &src[oi * g.out_w + jlo..oi * g.out_w + jhi];
                    if g.stride == 1 {
                        for (d, v) in dst[j0..j0 + s.len()].iter_mut().zip(s) {
                            *d += v;
                        }
                    } else {
                        for (d, v) in dst[j0..].iter_mut().step_by(g.stride).zip(s) {
                            *d += v;
                        }
                    }
                }
            }
        }
    }
}

/// `[n, C, H, W]` images unfolded side by side into `[rows, n·cols]`.
pub(crate) fn im2col_batch(x: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let ncols = g.col_cols();
    let ld = n * ncols;
    let plane = g.channels * g.in_h * g.in_w;
    let mut cols = vec![0.0; g.col_rows() * ld];
    for b in 0..n {
        im2col(&x[b * plane..(b + 1) * plane], g, &mut cols[b * ncols..], ld);
    }
    cols
}

/// Adjoint of [`im2col_batch`].
pub(crate) fn col2im_batch(cols: &[f64], n: usize, g: &ConvGeom) -> Vec<f64> {
    let ncols = g.col_cols();
    let plane = g.channels * g.in_h * g.in_w;
    let mut x = vec![0.0; n * plane];
    for b in 0..n {
        col2im(&cols[b * ncols..], g, &mut x[b * plane..(b + 1) * plane], n * ncols);
    }
    x
}

/// `[n, c, p]` → `[c, n·p]`.
pub(crate) fn to_channel_major(x: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(ch * n + b) * p..(ch * n + b + 1) * p].copy_from_slice(&x[(b * c + ch) * p..(b * c + ch + 1) * p]);
        }
    }
    out
}

/// `[c, n·p]` → `[n, c, p]`.
pub(crate) fn from_channel_major(y: &[f64], n: usize, c: usize, p: usize) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for b in 0..n {
        for ch in 0..c {
            out[(b * c + ch) * p..(b * c + ch + 1) * p].copy_from_slice(&y[(ch * n + b) * p..(ch * n + b + 1) * p]);
        }
    }
    out
}

/// `c = op(a) · op(b) + beta · c` for row-major operands, where `op(a)` is
/// `m × k` and `op(b)` is `k × n`. With `trans_a` the buffer `a` holds the
/// `k × m` matrix; likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    c: &mut [f64],
    beta: f64,
) {
    assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the asserted buffer lengths cover every index the strides reach.
    unsafe {
        matrixmultiply::dgemm(
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

/// Splits `shape` around `axis` into (outer, extent, inner).
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_transposes() {
        // a = [[1,2],[3,4]], b = [[5,6],[7,8]]
        let a = [1.0, 2.0, 3.0, 4.0];
        let b = [5.0, 6.0, 7.0, 8.0];
        let mut c = [0.0; 4];
        gemm(2, 2, 2, &a, false, &b, false, &mut c, 0.0);
        assert_eq!(c, [19.0, 22.0, 43.0, 50.0]);
        gemm(2, 2, 2, &a, true, &b, false, &mut c, 0.0);
        assert_eq!(c, [26.0, 30.0, 38.0, 44.0]);
        gemm(2, 2, 2, &a, false, &b, true, &mut c, 0.0);
        assert_eq!(c, [17.0, 23.0, 39.0, 53.0]);
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let g = ConvGeom::new(2, 5, 4, 3, 2, 1).unwrap();
        let x: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).sin()).collect();
        let y: Vec<f64> = (0..g.col_rows() * g.col_cols()).map(|i| (i as f64 * 0.11).cos()).collect();
        let mut cols = vec![0.0; y.len()];
        im2col(&x, &g, &mut cols, g.col_cols());
        let mut back = vec![0.0; 40];
        col2im(&y, &g, &mut back, g.col_cols());
        let lhs: f64 = cols.iter().zip(&y).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(&back).map(|(a, b)| a * b).sum();
        assert!((lhs - rhs).abs() < 1e-12);
    }
}
