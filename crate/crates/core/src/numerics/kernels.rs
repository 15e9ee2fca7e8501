//! Raw NCHW kernels shared by the tape operations.

use super::tensor::Real;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
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

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, pad: usize) -> Result<Self> {
        let (&[n, cin, h, w], &[cout, wcin, kh, kw]) = (input, weight) else {
            return Err(Error::shape(
                "conv2d",
                format!("expected NCHW input and OIHW weight, got {:?} and {:?}", input, weight),
            ));
        };
        if stride == 0 {
            return Err(Error::shape("conv2d", "stride must be at least 1"));
        }
        if cin != wcin {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?} has {} channels but weight {:?} expects {}", input, cin, weight, wcin),
            ));
        }
        if h + 2 * pad < kh || w + 2 * pad < kw || kh == 0 || kw == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {}x{} does not fit input {:?} with padding {}", kh, kw, input, pad),
            ));
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        Ok(ConvGeom { n, cin, h, w, cout, kh, kw, stride, pad, oh, ow })
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.n, self.cout, self.oh, self.ow]
    }

    /// Rows of the unfolded input matrix.
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    /// Columns of the unfolded input matrix.
    fn m(&self) -> usize {
        self.n * self.oh * self.ow
    }

    /// Valid output-column range for kernel offset `kx`.
    fn col_range(&self, kx: usize, width: usize, out: usize) -> (usize, usize) {
        // ox valid iff 0 <= ox*s + kx - pad < width
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(self.stride) };
        let hi = if width + self.pad > kx { ((width + self.pad - kx - 1) / self.stride + 1).min(out) } else { 0 };
        (lo.min(hi), hi)
    }
}

/// Unfolds the input into a `[cin*kh*kw, n*oh*ow]` matrix.
fn im2col<T: Real>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let m = g.m();
    let plane = g.oh * g.ow;
    let mut col = vec![T::zero(); g.k() * m];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            let (ylo, yhi) = g.col_range(ky, g.h, g.oh);
            for kx in 0..g.kw {
                let (xlo, xhi) = g.col_range(kx, g.w, g.ow);
                let row = (ci * g.kh + ky) * g.kw + kx;
                let dst_row = &mut col[row * m..(row + 1) * m];
                for ni in 0..g.n {
                    let src = &x[(ni * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    let dst = &mut dst_row[ni * plane..(ni + 1) * plane];
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - g.pad;
                        let src_row = &src[iy * g.w..(iy + 1) * g.w];
                        let dst_row = &mut dst[oy * g.ow..(oy + 1) * g.ow];
                        if g.stride == 1 {
                            let ix0 = xlo + kx - g.pad;
                            dst_row[xlo..xhi].copy_from_slice(&src_row[ix0..ix0 + (xhi - xlo)]);
                        } else {
                            for ox in xlo..xhi {
                                dst_row[ox] = src_row[ox * g.stride + kx - g.pad];
                            }
                        }
                    }
                }
            }
        }
    }
    col
}

/// Folds a `[cin*kh*kw, n*oh*ow]` matrix back into an input-shaped gradient.
fn col2im<T: Real>(col: &[T], g: &ConvGeom) -> Vec<T> {
    let m = g.m();
    let plane = g.oh * g.ow;
    let mut x = vec![T::zero(); g.n * g.cin * g.h * g.w];
    for ci in 0..g.cin {
        for ky in 0..g.kh {
            let (ylo, yhi) = g.col_range(ky, g.h, g.oh);
            for kx in 0..g.kw {
                let (xlo, xhi) = g.col_range(kx, g.w, g.ow);
                let row = (ci * g.kh + ky) * g.kw + kx;
                let src_row = &col[row * m..(row + 1) * m];
                for ni in 0..g.n {
                    let dst = &mut x[(ni * g.cin + ci) * g.h * g.w..][..g.h * g.w];
                    let src = &src_row[ni * plane..(ni + 1) * plane];
                    for oy in ylo..yhi {
                        let iy = oy * g.stride + ky - g.pad;
                        let dst_row = &mut dst[iy * g.w..(iy + 1) * g.w];
                        let src_row = &src[oy * g.ow..(oy + 1) * g.ow];
                        for ox in xlo..xhi {
                            dst_row[ox * g.stride + kx - g.pad] += src_row[ox];
                        }
                    }
                }
            }
        }
    }
    x
}

#[inline]
fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += a * xi;
    }
}

/// Dot product with a fixed eight-lane summation order.
#[inline]
pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let chunks = a.len() / 8;
    for c in 0..chunks {
        let (x, y) = (&a[c * 8..c * 8 + 8], &b[c * 8..c * 8 + 8]);
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut tail = T::zero();
    for i in chunks * 8..a.len() {
        tail += a[i] * b[i];
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

/// `[cout, m]` channel-major output to NCHW.
fn cm_to_nchw<T: Real>(cm: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut out = vec![T::zero(); n * c * plane];
    for ci in 0..c {
        for ni in 0..n {
            out[(ni * c + ci) * plane..][..plane].copy_from_slice(&cm[ci * n * plane + ni * plane..][..plane]);
        }
    }
    out
}

fn nchw_to_cm<T: Real>(x: &[T], n: usize, c: usize, plane: usize) -> Vec<T> {
    let mut cm = vec![T::zero(); n * c * plane];
    for ni in 0..n {
        for ci in 0..c {
            cm[ci * n * plane + ni * plane..][..plane].copy_from_slice(&x[(ni * c + ci) * plane..][..plane]);
        }
    }
    cm
}

pub fn conv2d_forward<T: Real>(x: &[T], weight: &[T], g: &ConvGeom) -> Vec<T> {
    let (k, m) = (g.k(), g.m());
    let col = im2col(x, g);
    let mut out = vec![T::zero(); g.cout * m];
    for oc in 0..g.cout {
        let out_row = &mut out[oc * m..(oc + 1) * m];
        let wrow = &weight[oc * k..(oc + 1) * k];
        for (kk, &wv) in wrow.iter().enumerate() {
            if wv != T::zero() {
                axpy(wv, &col[kk * m..(kk + 1) * m], out_row);
            }
        }
    }
    cm_to_nchw(&out, g.n, g.cout, g.oh * g.ow)
}

/// Gradients with respect to the input and the weight.
pub fn conv2d_backward<T: Real>(
    x: &[T],
    weight: &[T],
    grad_out: &[T],
    g: &ConvGeom,
    need_input: bool,
    need_weight: bool,
) -> (Option<Vec<T>>, Option<Vec<T>>) {
    let (k, m) = (g.k(), g.m());
    let dout = nchw_to_cm(grad_out, g.n, g.cout, g.oh * g.ow);
    let dw = need_weight.then(|| {
        let col = im2col(x, g);
        let mut dw = vec![T::zero(); g.cout * k];
        for oc in 0..g.cout {
            let drow = &dout[oc * m..(oc + 1) * m];
            for kk in 0..k {
                dw[oc * k + kk] = dot(drow, &col[kk * m..(kk + 1) * m]);
            }
        }
        dw
    });
    let dx = need_input.then(|| {
        let mut dcol = vec![T::zero(); k * m];
        for kk in 0..k {
            let row = &mut dcol[kk * m..(kk + 1) * m];
            for oc in 0..g.cout {
                let wv = weight[oc * k + kk];
                if wv != T::zero() {
                    axpy(wv, &dout[oc * m..(oc + 1) * m], row);
                }
            }
        }
        col2im(&dcol, g)
    });
    (dx, dw)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct PoolGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub window: usize,
    pub stride: usize,
    pub oh: usize,
    pub ow: usize,
}

impl PoolGeom {
    pub fn new(input: &[usize], window: usize, stride: usize) -> Result<Self> {
        let &[n, c, h, w] = input else {
            return Err(Error::shape("pool", format!("expected NCHW, got {:?}", input)));
        };
        if window == 0 || stride == 0 {
            return Err(Error::shape("pool", "window and stride must be positive"));
        }
        if window > h || window > w {
            return Err(Error::shape(
                "pool",
                format!("window {} larger than input {}x{}", window, h, w),
            ));
        }
        Ok(PoolGeom { n, c, h, w, window, stride, oh: (h - window) / stride + 1, ow: (w - window) / stride + 1 })
    }
}

/// Max pooling; returns outputs and the flat input index of each maximum.
/// Ties resolve to the first maximum in row-major order.
pub fn max_pool_forward<T: Real>(x: &[T], g: &PoolGeom) -> (Vec<T>, Vec<usize>) {
    let planes = g.n * g.c;
    let mut out = Vec::with_capacity(planes * g.oh * g.ow);
    let mut arg = Vec::with_capacity(out.capacity());
    for p in 0..planes {
        let base = p * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut best = base + oy * g.stride * g.w + ox * g.stride;
                for dy in 0..g.window {
                    for dx in 0..g.window {
                        let idx = base + (oy * g.stride + dy) * g.w + ox * g.stride + dx;
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                out.push(x[best]);
                arg.push(best);
            }
        }
    }
    (out, arg)
}

pub fn avg_pool_forward<T: Real>(x: &[T], g: &PoolGeom) -> Vec<T> {
    let planes = g.n * g.c;
    let scale = T::one() / T::lit((g.window * g.window) as f64);
    let mut out = Vec::with_capacity(planes * g.oh * g.ow);
    for p in 0..planes {
        let base = p * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut s = T::zero();
                for dy in 0..g.window {
                    let row = base + (oy * g.stride + dy) * g.w + ox * g.stride;
                    for dx in 0..g.window {
                        s += x[row + dx];
                    }
                }
                out.push(s * scale);
            }
        }
    }
    out
}

pub fn avg_pool_backward<T: Real>(grad_out: &[T], g: &PoolGeom) -> Vec<T> {
    let scale = T::one() / T::lit((g.window * g.window) as f64);
    let mut dx = vec![T::zero(); g.n * g.c * g.h * g.w];
    for p in 0..g.n * g.c {
        let base = p * g.h * g.w;
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let gv = grad_out[(p * g.oh + oy) * g.ow + ox] * scale;
                for dy in 0..g.window {
                    let row = base + (oy * g.stride + dy) * g.w + ox * g.stride;
                    for dx_ in 0..g.window {
                        dx[row + dx_] += gv;
                    }
                }
            }
        }
    }
    dx
}

/// Per-channel statistics over N, H and W: biased mean and variance.
pub fn channel_moments<T: Real>(x: &[T], n: usize, c: usize, plane: usize) -> (Vec<T>, Vec<T>) {
    let count = T::lit((n * plane) as f64);
    let mut mean = vec![T::zero(); c];
    let mut var = vec![T::zero(); c];
    for ci in 0..c {
        let mut s = T::zero();
        for ni in 0..n {
            s += x[(ni * c + ci) * plane..][..plane].iter().copied().sum::<T>();
        }
        let mu = s / count;
        let mut v = T::zero();
        for ni in 0..n {
            for &xv in &x[(ni * c + ci) * plane..][..plane] {
                let d = xv - mu;
                v += d * d;
            }
        }
        mean[ci] = mu;
        var[ci] = v / count;
    }
    (mean, var)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn col_range_matches_bruteforce() {
        for &(w, k, s, p) in &[(5, 3, 1, 1), (4, 2, 2, 0), (7, 3, 2, 1), (3, 3, 1, 0), (1, 1, 1, 0), (6, 3, 3, 2)] {
            let g = ConvGeom::new(&[1, 1, w, w], &[1, 1, k, k], s, p).unwrap();
            for kx in 0..k {
                let (lo, hi) = g.col_range(kx, w, g.ow);
                let valid: Vec<usize> = (0..g.ow)
                    .filter(|&ox| {
                        let ix = (ox * s + kx) as isize - p as isize;
                        ix >= 0 && (ix as usize) < w
                    })
                    .collect();
                assert_eq!((lo..hi).collect::<Vec<_>>(), valid, "w={} k={} s={} p={} kx={}", w, k, s, p, kx);
            }
        }
    }

    #[test]
    fn im2col_col2im_are_adjoint() {
        // <im2col(x), c> == <x, col2im(c)>
        let g = ConvGeom::new(&[2, 3, 5, 4], &[2, 3, 3, 3], 2, 1).unwrap();
        let x: Vec<f64> = (0..2 * 3 * 5 * 4).map(|i| ((i * 7) % 11) as f64 - 5.0).collect();
        let c: Vec<f64> = (0..g.k() * g.m()).map(|i| ((i * 5) % 13) as f64 - 6.0).collect();
        let lhs: f64 = im2col(&x, &g).iter().zip(&c).map(|(a, b)| a * b).sum();
        let rhs: f64 = x.iter().zip(col2im(&c, &g)).map(|(a, b)| a * b).sum();
        assert_eq!(lhs, rhs);
    }

    #[test]
    fn dot_matches_sequential_on_integers() {
        let a: Vec<f32> = (0..37).map(|i| i as f32).collect();
        let b: Vec<f32> = (0..37).map(|i| (i % 5) as f32).collect();
        let expect: f32 = a.iter().zip(&b).map(|(x, y)| x * y).sum();
        assert_eq!(dot(&a, &b), expect);
    }
}
