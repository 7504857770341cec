//! Raw conv2d kernels. The whole batch is unfolded into one column matrix
//! so every convolution becomes a single large SGEMM; batch items fill
//! disjoint column ranges in parallel and reductions keep a fixed order,
//! so results are bit-reproducible.

use rayon::prelude::*;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct ConvDims {
    pub n: usize,
    pub ci: usize,
    pub h: usize,
    pub w: usize,
    pub co: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub ho: usize,
    pub wo: usize,
}

impl ConvDims {
    pub fn cols_rows(&self) -> usize {
        self.ci * self.k * self.k
    }
    pub fn out_hw(&self) -> usize {
        self.ho * self.wo
    }
}

/// C = alpha * op(A) * op(B), row-major C (m x n); strides select
/// transposes. Large products split their output columns (or rows) across
/// two workers; per-element accumulation order is unchanged by the split,
/// so results stay bit-reproducible.
#[allow(clippy::too_many_arguments)]
fn sgemm_strided(
    m: usize,
    k: usize,
    n: usize,
    a: &[f32],
    rsa: isize,
    csa: isize,
    b: &[f32],
    rsb: isize,
    csb: isize,
    c: &mut [f32],
) {
    debug_assert_eq!(c.len(), m * n);
    let raw = |m: usize, n: usize, a: *const f32, b: *const f32, c: *mut f32| unsafe {
        matrixmultiply::sgemm(m, k, n, 1.0, a, rsa, csa, b, rsb, csb, 0.0, c, n as isize, 1);
    };
    const SPLIT_FLOPS: usize = 1 << 21;
    if 2 * m * k * n < SPLIT_FLOPS || (n < 32 && m < 32) {
        raw(m, n, a.as_ptr(), b.as_ptr(), c.as_mut_ptr());
        return;
    }
    struct Ptr(*mut f32);
    unsafe impl Send for Ptr {}
    unsafe impl Sync for Ptr {}
    if n >= m {
        // Column split: workers write disjoint column ranges of C.
        let n0 = n / 2;
        let cp = Ptr(c.as_mut_ptr());
        let cref = &cp;
        let left = move || unsafe {
            matrixmultiply::sgemm(
                m, k, n0, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, cref.0,
                n as isize, 1,
            );
        };
        let right = move || unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n - n0,
                1.0,
                a.as_ptr(),
                rsa,
                csa,
                b.as_ptr().offset(n0 as isize * csb),
                rsb,
                csb,
                0.0,
                cref.0.add(n0),
                n as isize,
                1,
            );
        };
        rayon::join(left, right);
    } else {
        // Row split: workers write disjoint row ranges of C.
        let m0 = m / 2;
        let cp = Ptr(c.as_mut_ptr());
        let cref = &cp;
        let top = move || unsafe {
            matrixmultiply::sgemm(
                m0, k, n, 1.0, a.as_ptr(), rsa, csa, b.as_ptr(), rsb, csb, 0.0, cref.0,
                n as isize, 1,
            );
        };
        let bottom = move || unsafe {
            matrixmultiply::sgemm(
                m - m0,
                k,
                n,
                1.0,
                a.as_ptr().offset(m0 as isize * rsa),
                rsa,
                csa,
                b.as_ptr(),
                rsb,
                csb,
                0.0,
                cref.0.add(m0 * n),
                n as isize,
                1,
            );
        };
        rayon::join(top, bottom);
    }
}

/// Output-column range [lo, hi) whose source index ow*stride + kc - pad
/// stays inside [0, w), plus the source offset at ow = lo.
fn valid_range(kc: usize, pad: usize, stride: usize, w: usize, wo: usize) -> (usize, usize, usize) {
    let lo = if pad > kc { (pad - kc).div_ceil(stride) } else { 0 };
    if w + pad <= kc || lo >= wo {
        return (0, 0, 0);
    }
    let hi = (((w - 1 + pad - kc) / stride) + 1).min(wo);
    if hi <= lo {
        return (0, 0, 0);
    }
    (lo, hi, lo * stride + kc - pad)
}

/// Unfolds one image (ci x h x w) into its column block: rows are kernel
/// taps (ci*k*k), columns are output positions, `ldc` the full batch
/// column count.
fn im2col_block(img: &[f32], d: &ConvDims, cols: &mut [f32], col0: usize, ldc: usize) {
    let ConvDims { ci, h, w, k, stride, pad, ho, wo, .. } = *d;
    for c in 0..ci {
        let plane = &img[c * h * w..(c + 1) * h * w];
        for kr in 0..k {
            for kc in 0..k {
                let row = (c * k + kr) * k + kc;
                let (lo, hi, start) = valid_range(kc, pad, stride, w, wo);
                for oh in 0..ho {
                    let ih = (oh * stride + kr) as isize - pad as isize;
                    let at = row * ldc + col0 + oh * wo;
                    let dst = &mut cols[at..at + wo];
                    if ih < 0 || ih >= h as isize || lo >= hi {
                        dst.fill(0.0);
                        continue;
                    }
                    let src_row = &plane[ih as usize * w..(ih as usize + 1) * w];
                    dst[..lo].fill(0.0);
                    dst[hi..].fill(0.0);
                    if stride == 1 {
                        dst[lo..hi].copy_from_slice(&src_row[start..start + hi - lo]);
                    } else {
                        for (dv, sv) in
                            dst[lo..hi].iter_mut().zip(src_row[start..].iter().step_by(stride))
                        {
                            *dv = *sv;
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add of one image's column block back into image layout.
fn col2im_block(cols: &[f32], d: &ConvDims, img: &mut [f32], col0: usize, ldc: usize) {
    let ConvDims { ci, h, w, k, stride, pad, ho, wo, .. } = *d;
    for c in 0..ci {
        let plane = &mut img[c * h * w..(c + 1) * h * w];
        for kr in 0..k {
            for kc in 0..k {
                let row = (c * k + kr) * k + kc;
                let (lo, hi, start) = valid_range(kc, pad, stride, w, wo);
                if lo >= hi {
                    continue;
                }
                for oh in 0..ho {
                    let ih = (oh * stride + kr) as isize - pad as isize;
                    if ih < 0 || ih >= h as isize {
                        continue;
                    }
                    let src = &cols[row * ldc + col0 + oh * wo..][..wo];
                    let dst_row = &mut plane[ih as usize * w..(ih as usize + 1) * w];
                    if stride == 1 {
                        for (dv, sv) in dst_row[start..start + hi - lo].iter_mut().zip(&src[lo..hi])
                        {
                            *dv += *sv;
                        }
                    } else {
                        for (dv, sv) in
                            dst_row[start..].iter_mut().step_by(stride).zip(&src[lo..hi])
                        {
                            *dv += *sv;
                        }
                    }
                }
            }
        }
    }
}

fn batch_cols(x: &[f32], d: &ConvDims) -> Vec<f32> {
    let in_sz = d.ci * d.h * d.w;
    let rows = d.cols_rows();
    let hw = d.out_hw();
    let ldc = d.n * hw;
    let mut cols = vec![0.0f32; rows * ldc];
    if d.n == 1 {
        im2col_block(&x[..in_sz], d, &mut cols, 0, ldc);
        return cols;
    }
    // Each image owns a disjoint column stripe; hand out row-major chunks
    // via raw pointer arithmetic per image to parallelize safely.
    struct Ptr(*mut f32);
    unsafe impl Send for Ptr {}
    unsafe impl Sync for Ptr {}
    let base = Ptr(cols.as_mut_ptr());
    let len = cols.len();
    let base_ref = &base;
    (0..d.n).into_par_iter().for_each(move |n| {
        // Columns interleave across rows, so each worker writes strided
        // slices of the shared buffer; ranges never overlap.
        let cols_view = unsafe { std::slice::from_raw_parts_mut(base_ref.0, len) };
        im2col_block(&x[n * in_sz..(n + 1) * in_sz], d, cols_view, n * hw, ldc);
    });
    cols
}

/// Forward conv over the whole batch in one GEMM:
/// out[co, n*hw] = W[co, ci*k*k] * cols[ci*k*k, n*hw], then bias. Returns
/// the column matrix so backward can reuse it.
pub(crate) fn conv2d_forward(
    x: &[f32],
    weight: &[f32],
    bias: &[f32],
    d: &ConvDims,
) -> (Vec<f32>, Vec<f32>) {
    let rows = d.cols_rows();
    let hw = d.out_hw();
    let ldc = d.n * hw;
    let cols = batch_cols(x, d);
    let mut out = vec![0.0f32; d.n * d.co * hw];
    if rows < 64 && d.n > 1 {
        // Shallow-input convolutions (the stem) spend more time reordering
        // the batched GEMM output than multiplying; per-image GEMMs write
        // the final layout directly.
        out.par_chunks_mut(d.co * hw).enumerate().for_each(|(n, dst)| {
            unsafe {
                matrixmultiply::sgemm(
                    d.co,
                    rows,
                    hw,
                    1.0,
                    weight.as_ptr(),
                    rows as isize,
                    1,
                    cols.as_ptr().add(n * hw),
                    ldc as isize,
                    1,
                    0.0,
                    dst.as_mut_ptr(),
                    hw as isize,
                    1,
                );
            }
            for o in 0..d.co {
                let b = bias[o];
                for v in dst[o * hw..(o + 1) * hw].iter_mut() {
                    *v += b;
                }
            }
        });
        return (out, cols);
    }
    let mut flat = vec![0.0f32; d.co * ldc];
    sgemm_strided(d.co, rows, ldc, weight, rows as isize, 1, &cols, ldc as isize, 1, &mut flat);
    // Reorder [co][n][hw] -> [n][co][hw] and add bias.
    out.par_chunks_mut(d.co * hw).enumerate().for_each(|(n, dst)| {
        for o in 0..d.co {
            let b = bias[o];
            let src = &flat[o * ldc + n * hw..o * ldc + (n + 1) * hw];
            let dst_row = &mut dst[o * hw..(o + 1) * hw];
            for (dv, sv) in dst_row.iter_mut().zip(src) {
                *dv = sv + b;
            }
        }
    });
    (out, cols)
}

pub(crate) struct ConvGrads {
    pub dx: Vec<f32>,
    pub dw: Vec<f32>,
    pub db: Vec<f32>,
}

/// Backward conv for upstream gradient `dy` (n x co x ho x wo). `need_dx`
/// skips the input-gradient GEMM when the input is a constant (images,
/// frozen-teacher activations).
pub(crate) fn conv2d_backward(
    cols: &[f32],
    weight: &[f32],
    dy: &[f32],
    d: &ConvDims,
    need_dx: bool,
) -> ConvGrads {
    let in_sz = d.ci * d.h * d.w;
    let out_sz = d.co * d.out_hw();
    let rows = d.cols_rows();
    let hw = d.out_hw();
    let ldc = d.n * hw;

    // Regroup dy [n][co][hw] -> [co][n*hw] once; both GEMMs consume it.
    let mut dy_flat = vec![0.0f32; d.co * ldc];
    for n in 0..d.n {
        for o in 0..d.co {
            let src = &dy[n * out_sz + o * hw..n * out_sz + (o + 1) * hw];
            dy_flat[o * ldc + n * hw..o * ldc + (n + 1) * hw].copy_from_slice(src);
        }
    }

    // dW[co, rows] = dY[co, n*hw] * cols^T[n*hw, rows]
    let mut dw = vec![0.0f32; d.co * rows];
    sgemm_strided(d.co, ldc, rows, &dy_flat, ldc as isize, 1, cols, 1, ldc as isize, &mut dw);

    let dx = if need_dx {
        // dcols[rows, n*hw] = W^T[rows, co] * dY[co, n*hw]
        let mut dcols = vec![0.0f32; rows * ldc];
        sgemm_strided(rows, d.co, ldc, weight, 1, rows as isize, &dy_flat, ldc as isize, 1, &mut dcols);
        let mut dx = vec![0.0f32; d.n * in_sz];
        dx.par_chunks_mut(in_sz).enumerate().for_each(|(n, img)| {
            col2im_block(&dcols, d, img, n * hw, ldc);
        });
        dx
    } else {
        Vec::new()
    };

    let mut db = vec![0.0f32; d.co];
    for (o, dbv) in db.iter_mut().enumerate() {
        let mut acc = 0.0f64;
        for v in &dy_flat[o * ldc..(o + 1) * ldc] {
            acc += *v as f64;
        }
        *dbv = acc as f32;
    }
    ConvGrads { dx, dw, db }
}
