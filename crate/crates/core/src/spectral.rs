//! 2D discrete Fourier analysis of feature maps: forward/inverse transform,
//! amplitude/phase decomposition, and amplitude-manipulation utilities.
//!
//! Conventions: forward transform is unnormalized with kernel
//! `e^{-j2pi(hu/H + wv/W)}`; the inverse applies `1/(H*W)`. Bin (0,0) is DC;
//! spectra are never fftshift-ed. All maps are row-major H x W in f64.

use crate::error::{Error, Result};
use std::cell::RefCell;
use std::collections::HashMap;
use std::rc::Rc;

/// Guard below which a bin is treated as having no usable phase.
pub const PHASE_EPS: f64 = 1e-8;

/// Dense H x W real-valued map, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct RealMap {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

impl RealMap {
    pub fn new(h: usize, w: usize, data: Vec<f64>) -> Self {
        assert_eq!(data.len(), h * w, "map data length must equal H*W");
        RealMap { h, w, data }
    }

    pub fn zeros(h: usize, w: usize) -> Self {
        RealMap { h, w, data: vec![0.0; h * w] }
    }

    pub fn at(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.w + c]
    }
}

/// Frequency-domain representation with explicit real and imaginary parts.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexSpectrum {
    pub h: usize,
    pub w: usize,
    pub re: Vec<f64>,
    pub im: Vec<f64>,
}

impl ComplexSpectrum {
    pub fn at(&self, u: usize, v: usize) -> (f64, f64) {
        let i = u * self.w + v;
        (self.re[i], self.im[i])
    }
}

/// Per-bin magnitudes sqrt(R^2 + I^2); always non-negative.
#[derive(Debug, Clone, PartialEq)]
pub struct AmplitudeSpectrum {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

/// Per-bin angles in (-pi, pi], from atan2(I, R).
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseSpectrum {
    pub h: usize,
    pub w: usize,
    pub data: Vec<f64>,
}

// ---------------------------------------------------------------------------
// 1D kernels
// ---------------------------------------------------------------------------

thread_local! {
    static TWIDDLES: RefCell<HashMap<(usize, bool), Rc<Vec<(f64, f64)>>>> =
        RefCell::new(HashMap::new());
}

/// Table of (cos, sin) for e^{sign * j2pi t / n}, t in 0..n.
fn twiddles(n: usize, inverse: bool) -> Rc<Vec<(f64, f64)>> {
    TWIDDLES.with(|cache| {
        if let Some(t) = cache.borrow().get(&(n, inverse)) {
            return Rc::clone(t);
        }
        let sign = if inverse { 1.0 } else { -1.0 };
        let step = sign * std::f64::consts::TAU / n as f64;
        let table: Vec<(f64, f64)> =
            (0..n).map(|t| ((t as f64 * step).cos(), (t as f64 * step).sin())).collect();
        let rc = Rc::new(table);
        cache.borrow_mut().insert((n, inverse), Rc::clone(&rc));
        rc
    })
}

fn smallest_factor_le7(n: usize) -> Option<usize> {
    [2usize, 3, 5, 7].into_iter().find(|p| n % p == 0)
}

/// Direct O(n^2) DFT; terminal case for prime lengths above 7.
fn dft1d(re: &mut [f64], im: &mut [f64], tw: &[(f64, f64)]) {
    let n = re.len();
    let mut out_re = vec![0.0; n];
    let mut out_im = vec![0.0; n];
    for k in 0..n {
        let mut ar = 0.0;
        let mut ai = 0.0;
        for t in 0..n {
            let (c, s) = tw[(t * k) % n];
            ar += re[t] * c - im[t] * s;
            ai += re[t] * s + im[t] * c;
        }
        out_re[k] = ar;
        out_im[k] = ai;
    }
    re.copy_from_slice(&out_re);
    im.copy_from_slice(&out_im);
}

/// Recursive mixed-radix Cooley-Tukey. `scratch_*` must be at least n long.
fn fft1d_rec(
    re: &mut [f64],
    im: &mut [f64],
    scratch_re: &mut [f64],
    scratch_im: &mut [f64],
    inverse: bool,
) {
    let n = re.len();
    if n <= 1 {
        return;
    }
    let tw = twiddles(n, inverse);
    let p = match smallest_factor_le7(n) {
        Some(p) => p,
        None => {
            // Prime length above 7: direct evaluation.
            dft1d(re, im, &tw);
            return;
        }
    };
    let m = n / p;
    // Decimate in time: subsequence j holds x[j], x[j+p], ...
    for j in 0..p {
        for t in 0..m {
            scratch_re[j * m + t] = re[t * p + j];
            scratch_im[j * m + t] = im[t * p + j];
        }
    }
    for j in 0..p {
        fft1d_rec(
            &mut scratch_re[j * m..(j + 1) * m],
            &mut scratch_im[j * m..(j + 1) * m],
            &mut re[..m],
            &mut im[..m],
            inverse,
        );
    }
    // Combine: X[k] = sum_j w_n^{jk} Y_j[k mod m].
    for k in 0..n {
        let mut ar = 0.0;
        let mut ai = 0.0;
        let base = k % m;
        for j in 0..p {
            let (c, s) = tw[(j * k) % n];
            let yr = scratch_re[j * m + base];
            let yi = scratch_im[j * m + base];
            ar += yr * c - yi * s;
            ai += yr * s + yi * c;
        }
        re[k] = ar;
        im[k] = ai;
    }
}

/// In-place unnormalized 2D transform over a row-major H x W complex buffer.
/// Forward uses the `e^{-j...}` kernel; `inverse` flips the sign and applies
/// no scaling (callers normalize).
pub fn fft2_raw(re: &mut [f64], im: &mut [f64], h: usize, w: usize, inverse: bool) {
    assert_eq!(re.len(), h * w);
    assert_eq!(im.len(), h * w);
    let mut sr = vec![0.0; w.max(h)];
    let mut si = vec![0.0; w.max(h)];
    for r in 0..h {
        fft1d_rec(
            &mut re[r * w..(r + 1) * w],
            &mut im[r * w..(r + 1) * w],
            &mut sr[..w],
            &mut si[..w],
            inverse,
        );
    }
    let mut col_re = vec![0.0; h];
    let mut col_im = vec![0.0; h];
    for c in 0..w {
        for r in 0..h {
            col_re[r] = re[r * w + c];
            col_im[r] = im[r * w + c];
        }
        fft1d_rec(&mut col_re, &mut col_im, &mut sr[..h], &mut si[..h], inverse);
        for r in 0..h {
            re[r * w + c] = col_re[r];
            im[r * w + c] = col_im[r];
        }
    }
}

// ---------------------------------------------------------------------------
// Public operations
// ---------------------------------------------------------------------------

/// Reference transform: exact evaluation of the DFT double sum, O(N^2).
/// Serves as the independent oracle for [`fft2`].
pub fn dft2_direct(x: &RealMap) -> ComplexSpectrum {
    let (h, w) = (x.h, x.w);
    let mut re = vec![0.0; h * w];
    let mut im = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let mut ar = 0.0;
            let mut ai = 0.0;
            for r in 0..h {
                for c in 0..w {
                    let ang = -std::f64::consts::TAU
                        * (r as f64 * u as f64 / h as f64 + c as f64 * v as f64 / w as f64);
                    let val = x.at(r, c);
                    ar += val * ang.cos();
                    ai += val * ang.sin();
                }
            }
            re[u * w + v] = ar;
            im[u * w + v] = ai;
        }
    }
    ComplexSpectrum { h, w, re, im }
}

/// Fast 2D transform of a real map. Mixed-radix with a direct-DFT fallback
/// for prime factors above 7.
pub fn fft2(x: &RealMap) -> ComplexSpectrum {
    let mut re = x.data.clone();
    let mut im = vec![0.0; x.data.len()];
    fft2_raw(&mut re, &mut im, x.h, x.w, false);
    ComplexSpectrum { h: x.h, w: x.w, re, im }
}

/// Inverse of [`fft2`]; returns the real part of the normalized inverse
/// transform.
pub fn ifft2(s: &ComplexSpectrum) -> RealMap {
    let mut re = s.re.clone();
    let mut im = s.im.clone();
    fft2_raw(&mut re, &mut im, s.h, s.w, true);
    let norm = 1.0 / (s.h * s.w) as f64;
    for v in re.iter_mut() {
        *v *= norm;
    }
    RealMap { h: s.h, w: s.w, data: re }
}

/// Per-bin magnitude sqrt(R^2 + I^2).
pub fn amplitude(s: &ComplexSpectrum) -> AmplitudeSpectrum {
    let data = s.re.iter().zip(&s.im).map(|(&r, &i)| r.hypot(i)).collect();
    AmplitudeSpectrum { h: s.h, w: s.w, data }
}

/// Per-bin four-quadrant angle atan2(I, R) in (-pi, pi].
pub fn phase(s: &ComplexSpectrum) -> PhaseSpectrum {
    let data = s.im.iter().zip(&s.re).map(|(&i, &r)| i.atan2(r)).collect();
    PhaseSpectrum { h: s.h, w: s.w, data }
}

/// Rebuilds a spectrum from amplitude and phase: (A cos P, A sin P).
pub fn recompose(a: &AmplitudeSpectrum, p: &PhaseSpectrum) -> Result<ComplexSpectrum> {
    if a.h != p.h || a.w != p.w {
        return Err(Error::Dimension(format!(
            "recompose extents differ: amplitude {}x{}, phase {}x{}",
            a.h, a.w, p.h, p.w
        )));
    }
    let mut re = vec![0.0; a.data.len()];
    let mut im = vec![0.0; a.data.len()];
    for (k, (&amp, &ang)) in a.data.iter().zip(&p.data).enumerate() {
        re[k] = amp * ang.cos();
        im[k] = amp * ang.sin();
    }
    Ok(ComplexSpectrum { h: a.h, w: a.w, re, im })
}

/// Replaces the amplitude spectrum of `content` with that of `style`,
/// keeping the content phase. Used to manufacture appearance-only shifts.
pub fn amplitude_swap(content: &RealMap, style: &RealMap) -> Result<RealMap> {
    if content.h != style.h || content.w != style.w {
        return Err(Error::Dimension(format!(
            "amplitude_swap extents differ: content {}x{}, style {}x{}",
            content.h, content.w, style.h, style.w
        )));
    }
    let fc = fft2(content);
    let fs = fft2(style);
    let spec = recompose(&amplitude(&fs), &phase(&fc))?;
    Ok(ifft2(&spec))
}

/// Normalizes every bin to unit modulus, `(R, I) / max(A, eps)`. Bins whose
/// amplitude falls below the guard keep their (near-zero) scale instead of
/// being blown up to the unit circle.
pub fn unit_phase(s: &ComplexSpectrum) -> ComplexSpectrum {
    let n = s.re.len();
    let mut re = vec![0.0; n];
    let mut im = vec![0.0; n];
    for k in 0..n {
        let d = s.re[k].hypot(s.im[k]).max(PHASE_EPS);
        re[k] = s.re[k] / d;
        im[k] = s.im[k] / d;
    }
    ComplexSpectrum { h: s.h, w: s.w, re, im }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_map(h: usize, w: usize, seed: u64) -> RealMap {
        let mut rng = crate::util::rng(seed);
        RealMap::new(h, w, (0..h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
    }

    fn assert_spectra_close(a: &ComplexSpectrum, b: &ComplexSpectrum, tol: f64) {
        assert_eq!((a.h, a.w), (b.h, b.w));
        for k in 0..a.re.len() {
            assert!(
                (a.re[k] - b.re[k]).abs() < tol && (a.im[k] - b.im[k]).abs() < tol,
                "bin {k}: ({}, {}) vs ({}, {})",
                a.re[k],
                a.im[k],
                b.re[k],
                b.im[k]
            );
        }
    }

    #[test]
    fn direct_dft_constant_map_is_dc_only() {
        let c = 0.7;
        let x = RealMap::new(3, 5, vec![c; 15]);
        let s = dft2_direct(&x);
        assert!((s.re[0] - c * 15.0).abs() < 1e-6);
        assert!(s.im[0].abs() < 1e-6);
        for k in 1..15 {
            assert!(s.re[k].abs() < 1e-6 && s.im[k].abs() < 1e-6, "bin {k} not zero");
        }
    }

    #[test]
    fn direct_dft_2x2_hand_case() {
        // [[1,2],[3,4]]: four-term sums give 10, -2, -4, 0, all real.
        let x = RealMap::new(2, 2, vec![1.0, 2.0, 3.0, 4.0]);
        let s = dft2_direct(&x);
        let expect = [10.0, -2.0, -4.0, 0.0];
        for k in 0..4 {
            assert!((s.re[k] - expect[k]).abs() < 1e-9, "re[{k}] = {}", s.re[k]);
            assert!(s.im[k].abs() < 1e-9);
        }
    }

    #[test]
    fn direct_dft_impulse_is_flat() {
        let mut x = RealMap::zeros(4, 4);
        x.data[0] = 1.0;
        let s = dft2_direct(&x);
        for k in 0..16 {
            assert!((s.re[k] - 1.0).abs() < 1e-9);
            assert!(s.im[k].abs() < 1e-9);
        }
    }

    #[test]
    fn fft_matches_direct_on_assorted_extents() {
        // Includes non-power-of-two, prime > 7, and degenerate 1xN shapes.
        let cases =
            [(1, 1), (1, 7), (2, 2), (3, 4), (5, 5), (6, 10), (8, 8), (11, 3), (13, 13), (16, 12)];
        for (i, &(h, w)) in cases.iter().enumerate() {
            let x = random_map(h, w, 100 + i as u64);
            assert_spectra_close(&fft2(&x), &dft2_direct(&x), 1e-5);
        }
    }

    #[test]
    fn fft_round_trip() {
        for seed in 0..3 {
            let x = random_map(6, 10, seed);
            let back = ifft2(&fft2(&x));
            for k in 0..x.data.len() {
                assert!((back.data[k] - x.data[k]).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn parseval_holds() {
        for seed in 0..5 {
            let x = random_map(7, 9, seed);
            let s = fft2(&x);
            let spatial: f64 = x.data.iter().map(|v| v * v).sum();
            let freq: f64 =
                s.re.iter().zip(&s.im).map(|(&r, &i)| r * r + i * i).sum::<f64>() / (63.0);
            assert!((spatial - freq).abs() / spatial.abs().max(1e-12) < 1e-4);
        }
    }

    #[test]
    fn conjugate_symmetry_for_real_input() {
        let x = random_map(6, 8, 42);
        let s = fft2(&x);
        for u in 0..6 {
            for v in 0..8 {
                let (r1, i1) = s.at(u, v);
                let (r2, i2) = s.at((6 - u) % 6, (8 - v) % 8);
                assert!((r1 - r2).abs() < 1e-5);
                assert!((i1 + i2).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn amplitude_phase_three_four_five() {
        let s = ComplexSpectrum { h: 1, w: 1, re: vec![3.0], im: vec![4.0] };
        assert!((amplitude(&s).data[0] - 5.0).abs() < 1e-12);
        assert!((phase(&s).data[0] - 4.0f64.atan2(3.0)).abs() < 1e-12);
    }

    #[test]
    fn scaling_moves_amplitude_not_phase() {
        let x = random_map(8, 8, 1);
        let scaled = RealMap::new(8, 8, x.data.iter().map(|v| v * 3.5).collect());
        let (sa, sb) = (fft2(&x), fft2(&scaled));
        let (aa, ab) = (amplitude(&sa), amplitude(&sb));
        let (pa, pb) = (phase(&sa), phase(&sb));
        for k in 0..64 {
            if aa.data[k] > 1e-6 {
                assert!((ab.data[k] - 3.5 * aa.data[k]).abs() < 1e-6 * ab.data[k].max(1.0));
                assert!((pb.data[k] - pa.data[k]).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn constant_offset_changes_only_dc_phase() {
        let x = random_map(8, 8, 2);
        let shifted = RealMap::new(8, 8, x.data.iter().map(|v| v + 0.75).collect());
        let pa = phase(&fft2(&x));
        let pb = phase(&fft2(&shifted));
        let amp = amplitude(&fft2(&x));
        for k in 1..64 {
            if amp.data[k] > 1e-6 {
                assert!((pa.data[k] - pb.data[k]).abs() < 1e-9, "non-DC phase moved at {k}");
            }
        }
    }

    #[test]
    fn recompose_round_trip() {
        let x = random_map(5, 6, 3);
        let s = fft2(&x);
        let back = recompose(&amplitude(&s), &phase(&s)).unwrap();
        assert_spectra_close(&back, &s, 1e-5);
        let spatial = ifft2(&back);
        for k in 0..30 {
            assert!((spatial.data[k] - x.data[k]).abs() < 1e-5);
        }
    }

    #[test]
    fn recompose_zero_amplitude_gives_zero_map() {
        let a = AmplitudeSpectrum { h: 4, w: 4, data: vec![0.0; 16] };
        let p = PhaseSpectrum { h: 4, w: 4, data: vec![1.2; 16] };
        let m = ifft2(&recompose(&a, &p).unwrap());
        assert!(m.data.iter().all(|v| v.abs() < 1e-12));
    }

    #[test]
    fn recompose_extent_mismatch_errors() {
        let a = AmplitudeSpectrum { h: 4, w: 4, data: vec![0.0; 16] };
        let p = PhaseSpectrum { h: 4, w: 5, data: vec![0.0; 20] };
        assert!(matches!(recompose(&a, &p), Err(Error::Dimension(_))));
    }

    #[test]
    fn amplitude_swap_identity_and_scale() {
        let x = random_map(8, 8, 4);
        let same = amplitude_swap(&x, &x).unwrap();
        for k in 0..64 {
            assert!((same.data[k] - x.data[k]).abs() < 1e-4);
        }
        // Style = alpha * x reproduces alpha * x: amplitude scales uniformly,
        // phase is preserved.
        let alpha = 2.25;
        let styled = RealMap::new(8, 8, x.data.iter().map(|v| v * alpha).collect());
        let swapped = amplitude_swap(&x, &styled).unwrap();
        for k in 0..64 {
            assert!((swapped.data[k] - alpha * x.data[k]).abs() < 1e-4);
        }
    }

    #[test]
    fn amplitude_swap_preserves_content_phase() {
        let x = random_map(8, 8, 5);
        let y = random_map(8, 8, 6);
        let swapped = amplitude_swap(&x, &y).unwrap();
        let px = phase(&fft2(&x));
        let ps = phase(&fft2(&swapped));
        let amp = amplitude(&fft2(&swapped));
        for k in 0..64 {
            if amp.data[k] > 1e-6 {
                let mut d = (px.data[k] - ps.data[k]).abs();
                d = d.min(std::f64::consts::TAU - d);
                assert!(d < 1e-4, "phase moved at bin {k}: {d}");
            }
        }
    }

    #[test]
    fn unit_phase_normalizes_and_guards_zero() {
        let s = ComplexSpectrum { h: 1, w: 2, re: vec![3.0, 0.0], im: vec![4.0, 0.0] };
        let u = unit_phase(&s);
        assert!((u.re[0] - 0.6).abs() < 1e-12);
        assert!((u.im[0] - 0.8).abs() < 1e-12);
        assert_eq!((u.re[1], u.im[1]), (0.0, 0.0));
    }

    #[test]
    fn unit_phase_scale_invariant() {
        let x = random_map(6, 6, 7);
        let s = fft2(&x);
        let scaled = ComplexSpectrum {
            h: 6,
            w: 6,
            re: s.re.iter().map(|v| v * 4.0).collect(),
            im: s.im.iter().map(|v| v * 4.0).collect(),
        };
        let (ua, ub) = (unit_phase(&s), unit_phase(&scaled));
        let amp = amplitude(&s);
        for k in 0..36 {
            if amp.data[k] > PHASE_EPS {
                assert!((ua.re[k] - ub.re[k]).abs() < 1e-9);
                assert!((ua.im[k] - ub.im[k]).abs() < 1e-9);
                let modulus = ua.re[k].hypot(ua.im[k]);
                assert!((modulus - 1.0).abs() < 1e-9);
            }
        }
    }
}
