//! Raw numeric kernels on contiguous slices. Callers validate shapes.

use super::Element;

/// `dst[m×n] (+)= op(a) · op(b)` with row-major storage. `a` is `m×k`
/// (stored `k×m` when `a_t`), `b` is `k×n` (stored `n×k` when `b_t`).
#[allow(clippy::too_many_arguments)]
pub fn matmul<T: Element>(
    m: usize,
    n: usize,
    k: usize,
    dst: &mut [T],
    accumulate: bool,
    a: &[T],
    a_t: bool,
    b: &[T],
    b_t: bool,
) {
    assert_eq!(dst.len(), m * n);
    assert_eq!(a.len(), m * k);
    assert_eq!(b.len(), k * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            dst.iter_mut().for_each(|v| *v = T::zero());
        }
        return;
    }
    let (a_rs, a_cs) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (b_rs, b_cs) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the slices cover exactly the index ranges implied by the
    // dimensions and strides checked above; `dst` does not alias `a` or `b`.
    unsafe {
        gemm::gemm(
            m,
            n,
            k,
            dst.as_mut_ptr(),
            1,
            n as isize,
            accumulate,
            a.as_ptr(),
            a_cs,
            a_rs,
            b.as_ptr(),
            b_cs,
            b_rs,
            T::one(),
            T::one(),
            false,
            false,
            false,
            gemm::Parallelism::None,
        );
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub n: usize,
    pub c: usize,
    pub h: usize,
    pub w: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_h(&self) -> usize {
        (self.h + 2 * self.pad - self.kh) / self.stride + 1
    }

    pub fn out_w(&self) -> usize {
        (self.w + 2 * self.pad - self.kw) / self.stride + 1
    }

    pub fn patch(&self) -> usize {
        self.c * self.kh * self.kw
    }

    pub fn cols(&self) -> usize {
        self.n * self.out_h() * self.out_w()
    }
}

/// Unfolds `x[n,c,h,w]` into `cols[c*kh*kw, n*oh*ow]`.
pub fn im2col<T: Element>(x: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = g.cols();
    let mut cols = vec![T::zero(); g.patch() * ncols];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let dst = &mut cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let plane = &x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        let base = (n * oh + oy) * ow;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let src_row = &plane[iy as usize * g.w..][..g.w];
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst[base + ox] = src_row[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: folds `cols` back, summing overlapping patches.
pub fn col2im<T: Element>(cols: &[T], g: &ConvGeom) -> Vec<T> {
    let (oh, ow) = (g.out_h(), g.out_w());
    let ncols = g.cols();
    let mut x = vec![T::zero(); g.n * g.c * g.h * g.w];
    for c in 0..g.c {
        for ki in 0..g.kh {
            for kj in 0..g.kw {
                let row = (c * g.kh + ki) * g.kw + kj;
                let src = &cols[row * ncols..(row + 1) * ncols];
                for n in 0..g.n {
                    let plane = &mut x[(n * g.c + c) * g.h * g.w..][..g.h * g.w];
                    for oy in 0..oh {
                        let iy = (oy * g.stride + ki) as isize - g.pad as isize;
                        if iy < 0 || iy >= g.h as isize {
                            continue;
                        }
                        let base = (n * oh + oy) * ow;
                        let dst_row = &mut plane[iy as usize * g.w..][..g.w];
                        for ox in 0..ow {
                            let ix = (ox * g.stride + kj) as isize - g.pad as isize;
                            if ix >= 0 && ix < g.w as isize {
                                dst_row[ix as usize] += src[base + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    x
}

/// `[n, c, p]` <-> `[c, n*p]` layout swap used around the convolution gemm.
pub fn swap_batch_channel<T: Element>(src: &[T], n: usize, c: usize, p: usize) -> Vec<T> {
    let mut dst = vec![T::zero(); src.len()];
    for i in 0..n {
        for j in 0..c {
            let s = &src[(i * c + j) * p..][..p];
            dst[(j * n + i) * p..][..p].copy_from_slice(s);
        }
    }
    dst
}

pub fn avg_pool2<T: Element>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (plane, dst) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
        for y in 0..oh {
            for xx in 0..ow {
                let a = plane[2 * y * w + 2 * xx];
                let b = plane[2 * y * w + 2 * xx + 1];
                let c2 = plane[(2 * y + 1) * w + 2 * xx];
                let d = plane[(2 * y + 1) * w + 2 * xx + 1];
                dst[y * ow + xx] = (a + b + c2 + d) * quarter;
            }
        }
    }
    out
}

pub fn avg_pool2_backward<T: Element>(dy: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, src) in dx.chunks_exact_mut(h * w).zip(dy.chunks_exact(oh * ow)) {
        for y in 0..oh {
            for xx in 0..ow {
                let g = src[y * ow + xx] * quarter;
                plane[2 * y * w + 2 * xx] = g;
                plane[2 * y * w + 2 * xx + 1] = g;
                plane[(2 * y + 1) * w + 2 * xx] = g;
                plane[(2 * y + 1) * w + 2 * xx + 1] = g;
            }
        }
    }
    dx
}

pub fn upsample2<T: Element>(x: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * c * oh * ow];
    for (plane, dst) in x.chunks_exact(h * w).zip(out.chunks_exact_mut(oh * ow)) {
        for y in 0..oh {
            for xx in 0..ow {
                dst[y * ow + xx] = plane[(y / 2) * w + xx / 2];
            }
        }
    }
    out
}

pub fn upsample2_backward<T: Element>(dy: &[T], n: usize, c: usize, h: usize, w: usize) -> Vec<T> {
    let ow = 2 * w;
    let mut dx = vec![T::zero(); n * c * h * w];
    for (plane, src) in dx.chunks_exact_mut(h * w).zip(dy.chunks_exact(4 * h * w)) {
        for (i, &g) in src.iter().enumerate() {
            let (y, xx) = (i / ow, i % ow);
            plane[(y / 2) * w + xx / 2] += g;
        }
    }
    dx
}
