//! Reverse-mode tape. Every operation records the references and saved
//! buffers its backward rule needs; replaying nodes in reverse append order
//! applies the chain rule. Recording is opt-in per tensor: an op lands on
//! the tape only when at least one operand is tracked, so frozen-teacher
//! forward passes cost nothing in graph bookkeeping.

use super::conv::{conv2d_backward, conv2d_forward, ConvDims};
use super::{require_rank4, same_shape, Tensor};
use crate::error::{Error, Result};
use crate::spectral::{fft2_raw, PHASE_EPS};
use std::sync::Arc;

pub type NodeId = usize;

/// Operand reference: tape position (when tracked) plus the forward values
/// backward rules may need.
#[derive(Debug, Clone)]
struct Input {
    node: Option<NodeId>,
    data: Arc<Vec<f32>>,
}

impl Input {
    fn of(t: &Tensor) -> Self {
        Input { node: t.node(), data: t.data_arc() }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Input, Input),
    Sub(Input, Input),
    Mul(Input, Input),
    Div(Input, Input),
    Neg(Input),
    Scale(Input, f32),
    AddScalar(Input),
    LeakyRelu(Input, f32),
    Sigmoid(Input, Arc<Vec<f32>>),
    Exp(Input, Arc<Vec<f32>>),
    Log1p(Input),
    Clamp(Input, f32, f32),
    Min2(Input, Input),
    Max2(Input, Input),
    Conv2d { x: Input, w: Input, b: Input, dims: ConvDims, cols: Arc<Vec<f32>> },
    MaxPool2 { x: Input, arg: Vec<u32> },
    Upsample2 { x: Input, n: usize, c: usize, h: usize, w: usize },
    ConcatC { a: Input, b: Input, n: usize, ca: usize, cb: usize, hw: usize },
    SliceC { x: Input, c0: usize, c1: usize, n: usize, c: usize, hw: usize },
    Gather { x: Input, idx: Arc<Vec<usize>> },
    SumAll(Input),
    MeanAll(Input),
    SpatialMean { x: Input, n: usize, c: usize, hw: usize },
    BceWithLogits { x: Input, targets: Arc<Vec<f32>> },
    Fft2 { x: Input, n: usize, c: usize, h: usize, w: usize },
    Ifft2 { s: Input, n: usize, c: usize, h: usize, w: usize },
    UnitPhase { s: Input, n: usize, c: usize, h: usize, w: usize },
    Amplitude { s: Input, n: usize, c: usize, h: usize, w: usize },
}

struct Node {
    op: Op,
}

/// Append-only record of operations; replayed in reverse for gradients.
#[derive(Default)]
pub struct GradTape {
    nodes: Vec<Node>,
}

/// Gradient buffers produced by [`GradTape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Vec<f32>>>,
}

impl Gradients {
    /// Gradient of the loss w.r.t. a tracked tensor; zeros for tracked
    /// tensors the loss never used.
    pub fn of(&self, t: &Tensor) -> Option<&[f32]> {
        t.node().and_then(|n| self.grads.get(n)).and_then(|g| g.as_deref())
    }

    /// Like [`Gradients::of`] but always returns a buffer (zeros when the
    /// leaf was unused), taking ownership.
    pub fn take_or_zeros(&mut self, t: &Tensor) -> Vec<f32> {
        match t.node() {
            Some(n) => self.grads[n].take().unwrap_or_else(|| vec![0.0; t.len()]),
            None => vec![0.0; t.len()],
        }
    }
}

fn widen(v: &[f32]) -> Vec<f64> {
    v.iter().map(|&x| x as f64).collect()
}

/// Raw shared output buffer for loops whose iterations write disjoint
/// regions; used to parallelize per-channel transforms.
struct SharedOut(*mut f32, usize);
unsafe impl Send for SharedOut {}
unsafe impl Sync for SharedOut {}
impl SharedOut {
    fn of(v: &mut [f32]) -> Self {
        SharedOut(v.as_mut_ptr(), v.len())
    }
    /// Caller guarantees disjointness of concurrent writes.
    #[allow(clippy::mut_from_ref)]
    unsafe fn view(&self) -> &mut [f32] {
        std::slice::from_raw_parts_mut(self.0, self.1)
    }
}

/// Runs `f(ni, ci, out_view)` for every (image, channel) pair in parallel.
fn par_channels(n: usize, c: usize, out: &mut [f32], f: impl Fn(usize, usize, &mut [f32]) + Send + Sync) {
    use rayon::prelude::*;
    let shared = SharedOut::of(out);
    let shared_ref = &shared;
    (0..n * c).into_par_iter().for_each(move |nc| {
        let view = unsafe { shared_ref.view() };
        f(nc / c, nc % c, view);
    });
}

fn stable_sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl GradTape {
    pub fn new() -> Self {
        GradTape { nodes: Vec::new() }
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(Node { op });
        self.nodes.len() - 1
    }

    /// Registers a tensor as a differentiable leaf.
    pub fn leaf(&mut self, t: &Tensor) -> Tensor {
        let id = self.push(Op::Leaf);
        t.clone().with_node(Some(id))
    }

    fn track(&mut self, out: Tensor, op: Op, any_tracked: bool) -> Tensor {
        if any_tracked {
            let id = self.push(op);
            out.with_node(Some(id))
        } else {
            out
        }
    }

    // -- elementwise binary ----------------------------------------------

    fn binary(
        &mut self,
        a: &Tensor,
        b: &Tensor,
        name: &str,
        f: impl Fn(f32, f32) -> f32,
        f64s: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Input, Input) -> Op,
    ) -> Result<Tensor> {
        same_shape(a, b, name)?;
        let data: Vec<f32> = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        let mut out = Tensor::new(a.shape(), data)?;
        if a.len() == 1 {
            out = out.with_scalar_f64(Some(f64s(a.item_f64(), b.item_f64())));
        }
        let tracked = a.node().is_some() || b.node().is_some();
        Ok(self.track(out, op(Input::of(a), Input::of(b)), tracked))
    }

    pub fn add(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, "add", |x, y| x + y, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, "sub", |x, y| x - y, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, "mul", |x, y| x * y, |x, y| x * y, Op::Mul)
    }

    pub fn div(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, "div", |x, y| x / y, |x, y| x / y, Op::Div)
    }

    pub fn min2(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, "min2", f32::min, f64::min, Op::Min2)
    }

    pub fn max2(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        self.binary(a, b, "max2", f32::max, f64::max, Op::Max2)
    }

    // -- elementwise unary -----------------------------------------------

    fn unary(
        &mut self,
        a: &Tensor,
        f: impl Fn(f32) -> f32,
        f64s: impl Fn(f64) -> f64,
        op: impl FnOnce(Input, Arc<Vec<f32>>) -> Op,
    ) -> Tensor {
        let data: Vec<f32> = a.data().iter().map(|&x| f(x)).collect();
        let mut out = Tensor::new(a.shape(), data).expect("same shape");
        if a.len() == 1 {
            out = out.with_scalar_f64(Some(f64s(a.item_f64())));
        }
        let tracked = a.node().is_some();
        let saved = out.data_arc();
        self.track(out, op(Input::of(a), saved), tracked)
    }

    pub fn neg(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, |x| -x, |x| -x, |i, _| Op::Neg(i))
    }

    pub fn scale(&mut self, a: &Tensor, k: f32) -> Tensor {
        self.unary(a, |x| k * x, |x| k as f64 * x, |i, _| Op::Scale(i, k))
    }

    pub fn add_scalar(&mut self, a: &Tensor, k: f32) -> Tensor {
        self.unary(a, |x| x + k, |x| x + k as f64, |i, _| Op::AddScalar(i))
    }

    pub fn leaky_relu(&mut self, a: &Tensor, slope: f32) -> Result<Tensor> {
        if !(0.0..1.0).contains(&slope) {
            return Err(Error::Contract(format!("leaky_relu slope must be in [0,1), got {slope}")));
        }
        Ok(self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            |x| if x > 0.0 { x } else { slope as f64 * x },
            |i, _| Op::LeakyRelu(i, slope),
        ))
    }

    pub fn relu(&mut self, a: &Tensor) -> Tensor {
        self.leaky_relu(a, 0.0).expect("slope 0 is valid")
    }

    pub fn sigmoid(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, stable_sigmoid, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid)
    }

    pub fn exp(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, f32::exp, f64::exp, Op::Exp)
    }

    pub fn log1p(&mut self, a: &Tensor) -> Tensor {
        self.unary(a, f32::ln_1p, f64::ln_1p, |i, _| Op::Log1p(i))
    }

    pub fn clamp(&mut self, a: &Tensor, lo: f32, hi: f32) -> Tensor {
        self.unary(a, |x| x.clamp(lo, hi), |x| x.clamp(lo as f64, hi as f64), |i, _| {
            Op::Clamp(i, lo, hi)
        })
    }

    // -- structure ---------------------------------------------------------

    pub fn conv2d(
        &mut self,
        x: &Tensor,
        weight: &Tensor,
        bias: &Tensor,
        stride: usize,
        pad: usize,
    ) -> Result<Tensor> {
        let (n, ci, h, w) = require_rank4(x, "conv2d input")?;
        let (co, wi, kh, kw) = require_rank4(weight, "conv2d weight")?;
        if stride == 0 {
            return Err(Error::Contract("conv2d stride must be positive".into()));
        }
        if kh != kw {
            return Err(Error::Dimension(format!("conv2d kernel must be square, got {kh}x{kw}")));
        }
        if wi != ci {
            return Err(Error::Dimension(format!(
                "conv2d channel mismatch: input has {ci}, weight expects {wi}"
            )));
        }
        if bias.shape() != [co] {
            return Err(Error::Dimension(format!(
                "conv2d bias shape {:?} must be [{co}]",
                bias.shape()
            )));
        }
        let k = kh;
        if k > h + 2 * pad || k > w + 2 * pad {
            return Err(Error::Dimension(format!(
                "conv2d kernel {k} exceeds padded input {}x{}",
                h + 2 * pad,
                w + 2 * pad
            )));
        }
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let dims = ConvDims { n, ci, h, w, co, k, stride, pad, ho, wo };
        let (out, cols) = conv2d_forward(x.data(), weight.data(), bias.data(), &dims);
        let out = Tensor::new(&[n, co, ho, wo], out)?;
        let tracked = x.node().is_some() || weight.node().is_some() || bias.node().is_some();
        Ok(self.track(
            out,
            Op::Conv2d {
                x: Input::of(x),
                w: Input::of(weight),
                b: Input::of(bias),
                dims,
                cols: Arc::new(cols),
            },
            tracked,
        ))
    }

    pub fn maxpool2(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = require_rank4(x, "maxpool2")?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Dimension(format!("maxpool2 requires even extents, got {h}x{w}")));
        }
        let (ho, wo) = (h / 2, w / 2);
        let mut out = vec![0.0f32; n * c * ho * wo];
        let mut arg = vec![0u32; n * c * ho * wo];
        let data = x.data();
        for nc in 0..n * c {
            let plane = nc * h * w;
            for oh in 0..ho {
                for ow in 0..wo {
                    let mut best = f32::NEG_INFINITY;
                    let mut best_at = 0usize;
                    for dy in 0..2 {
                        for dx in 0..2 {
                            let at = plane + (2 * oh + dy) * w + 2 * ow + dx;
                            if data[at] > best {
                                best = data[at];
                                best_at = at;
                            }
                        }
                    }
                    let o = nc * ho * wo + oh * wo + ow;
                    out[o] = best;
                    arg[o] = best_at as u32;
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        let tracked = x.node().is_some();
        Ok(self.track(out, Op::MaxPool2 { x: Input::of(x), arg }, tracked))
    }

    pub fn upsample2_nearest(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = require_rank4(x, "upsample2_nearest")?;
        let (ho, wo) = (2 * h, 2 * w);
        let mut out = vec![0.0f32; n * c * ho * wo];
        let data = x.data();
        for nc in 0..n * c {
            for ih in 0..h {
                for iw in 0..w {
                    let v = data[nc * h * w + ih * w + iw];
                    let base = nc * ho * wo + 2 * ih * wo + 2 * iw;
                    out[base] = v;
                    out[base + 1] = v;
                    out[base + wo] = v;
                    out[base + wo + 1] = v;
                }
            }
        }
        let out = Tensor::new(&[n, c, ho, wo], out)?;
        let tracked = x.node().is_some();
        Ok(self.track(out, Op::Upsample2 { x: Input::of(x), n, c, h, w }, tracked))
    }

    pub fn concat_channels(&mut self, a: &Tensor, b: &Tensor) -> Result<Tensor> {
        let (na, ca, ha, wa) = require_rank4(a, "concat_channels")?;
        let (nb, cb, hb, wb) = require_rank4(b, "concat_channels")?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::Dimension(format!(
                "concat_channels: N/H/W differ, {:?} vs {:?}",
                a.shape(),
                b.shape()
            )));
        }
        let hw = ha * wa;
        let mut out = vec![0.0f32; na * (ca + cb) * hw];
        for n in 0..na {
            let dst = &mut out[n * (ca + cb) * hw..];
            dst[..ca * hw].copy_from_slice(&a.data()[n * ca * hw..(n + 1) * ca * hw]);
            dst[ca * hw..(ca + cb) * hw]
                .copy_from_slice(&b.data()[n * cb * hw..(n + 1) * cb * hw]);
        }
        let out = Tensor::new(&[na, ca + cb, ha, wa], out)?;
        let tracked = a.node().is_some() || b.node().is_some();
        Ok(self.track(
            out,
            Op::ConcatC { a: Input::of(a), b: Input::of(b), n: na, ca, cb, hw },
            tracked,
        ))
    }

    pub fn slice_channels(&mut self, x: &Tensor, c0: usize, c1: usize) -> Result<Tensor> {
        let (n, c, h, w) = require_rank4(x, "slice_channels")?;
        if c0 >= c1 || c1 > c {
            return Err(Error::Dimension(format!(
                "slice_channels range {c0}..{c1} invalid for {c} channels"
            )));
        }
        let hw = h * w;
        let cs = c1 - c0;
        let mut out = vec![0.0f32; n * cs * hw];
        for ni in 0..n {
            let src = &x.data()[(ni * c + c0) * hw..(ni * c + c1) * hw];
            out[ni * cs * hw..(ni + 1) * cs * hw].copy_from_slice(src);
        }
        let out = Tensor::new(&[n, cs, h, w], out)?;
        let tracked = x.node().is_some();
        Ok(self.track(out, Op::SliceC { x: Input::of(x), c0, c1, n, c, hw }, tracked))
    }

    /// Picks elements by flat index into a rank-1 tensor. Duplicate indices
    /// are allowed; their gradients accumulate.
    pub fn gather(&mut self, x: &Tensor, idx: &[usize]) -> Result<Tensor> {
        if idx.is_empty() {
            return Err(Error::Contract("gather needs at least one index".into()));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= x.len()) {
            return Err(Error::Dimension(format!(
                "gather index {bad} out of bounds for {} elements",
                x.len()
            )));
        }
        let data: Vec<f32> = idx.iter().map(|&i| x.data()[i]).collect();
        let out = Tensor::new(&[idx.len()], data)?;
        let tracked = x.node().is_some();
        Ok(self.track(
            out,
            Op::Gather { x: Input::of(x), idx: Arc::new(idx.to_vec()) },
            tracked,
        ))
    }

    // -- reductions --------------------------------------------------------

    pub fn sum_all(&mut self, x: &Tensor) -> Tensor {
        let acc: f64 = x.data().iter().map(|&v| v as f64).sum();
        let out = Tensor::new(&[1], vec![acc as f32]).unwrap().with_scalar_f64(Some(acc));
        let tracked = x.node().is_some();
        self.track(out, Op::SumAll(Input::of(x)), tracked)
    }

    pub fn mean_all(&mut self, x: &Tensor) -> Tensor {
        let acc: f64 = x.data().iter().map(|&v| v as f64).sum::<f64>() / x.len() as f64;
        let out = Tensor::new(&[1], vec![acc as f32]).unwrap().with_scalar_f64(Some(acc));
        let tracked = x.node().is_some();
        self.track(out, Op::MeanAll(Input::of(x)), tracked)
    }

    /// Per-(n, c) mean over the spatial extent: NCHW -> rank-2 [N, C].
    pub fn spatial_mean(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = require_rank4(x, "spatial_mean")?;
        let hw = h * w;
        let mut out = vec![0.0f32; n * c];
        for nc in 0..n * c {
            let acc: f64 = x.data()[nc * hw..(nc + 1) * hw].iter().map(|&v| v as f64).sum();
            out[nc] = (acc / hw as f64) as f32;
        }
        let out = Tensor::new(&[n, c], out)?;
        let tracked = x.node().is_some();
        Ok(self.track(out, Op::SpatialMean { x: Input::of(x), n, c, hw }, tracked))
    }

    /// Elementwise binary cross entropy on logits against constant targets:
    /// max(x,0) - x*t + ln(1 + e^{-|x|}).
    pub fn bce_with_logits(&mut self, logits: &Tensor, targets: &[f32]) -> Result<Tensor> {
        if logits.len() != targets.len() {
            return Err(Error::Dimension(format!(
                "bce_with_logits: {} logits vs {} targets",
                logits.len(),
                targets.len()
            )));
        }
        let data: Vec<f32> = logits
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &t)| {
                let x64 = x as f64;
                (x64.max(0.0) - x64 * t as f64 + (-x64.abs()).exp().ln_1p()) as f32
            })
            .collect();
        let out = Tensor::new(logits.shape(), data)?;
        let tracked = logits.node().is_some();
        Ok(self.track(
            out,
            Op::BceWithLogits { x: Input::of(logits), targets: Arc::new(targets.to_vec()) },
            tracked,
        ))
    }

    // -- spectral ops (packed complex: first C channels real, next C imag) --

    /// Per-channel 2D FFT of a real NCHW tensor; output is N x 2C x H x W
    /// with real parts in channels 0..C and imaginary parts in C..2C.
    pub fn fft2(&mut self, x: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = require_rank4(x, "fft2")?;
        let hw = h * w;
        let mut out = vec![0.0f32; n * 2 * c * hw];
        let data = x.data();
        par_channels(n, c, &mut out, |ni, ci, out| {
            let src = &data[(ni * c + ci) * hw..(ni * c + ci + 1) * hw];
            let mut re = widen(src);
            let mut im = vec![0.0f64; hw];
            fft2_raw(&mut re, &mut im, h, w, false);
            let re_dst = (ni * 2 * c + ci) * hw;
            let im_dst = (ni * 2 * c + c + ci) * hw;
            for k in 0..hw {
                out[re_dst + k] = re[k] as f32;
                out[im_dst + k] = im[k] as f32;
            }
        });
        let out = Tensor::new(&[n, 2 * c, h, w], out)?;
        let tracked = x.node().is_some();
        Ok(self.track(out, Op::Fft2 { x: Input::of(x), n, c, h, w }, tracked))
    }

    fn packed_dims(t: &Tensor, op: &str) -> Result<(usize, usize, usize, usize)> {
        let (n, c2, h, w) = require_rank4(t, op)?;
        if c2 % 2 != 0 {
            return Err(Error::Dimension(format!(
                "{op}: packed complex tensor needs even channel count, got {c2}"
            )));
        }
        Ok((n, c2 / 2, h, w))
    }

    /// Inverse of [`GradTape::fft2`]: packed N x 2C x H x W -> real N x C x H x W.
    pub fn ifft2(&mut self, s: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = Self::packed_dims(s, "ifft2")?;
        let hw = h * w;
        let norm = 1.0 / hw as f64;
        let mut out = vec![0.0f32; n * c * hw];
        let data = s.data();
        par_channels(n, c, &mut out, |ni, ci, out| {
            let re_src = (ni * 2 * c + ci) * hw;
            let im_src = (ni * 2 * c + c + ci) * hw;
            let mut re = widen(&data[re_src..re_src + hw]);
            let mut im = widen(&data[im_src..im_src + hw]);
            fft2_raw(&mut re, &mut im, h, w, true);
            let dst = (ni * c + ci) * hw;
            for k in 0..hw {
                out[dst + k] = (re[k] * norm) as f32;
            }
        });
        let out = Tensor::new(&[n, c, h, w], out)?;
        let tracked = s.node().is_some();
        Ok(self.track(out, Op::Ifft2 { s: Input::of(s), n, c, h, w }, tracked))
    }

    /// Normalizes each complex bin to unit modulus, (R, I)/max(A, eps);
    /// the smooth stand-in for comparing raw phase angles.
    pub fn unit_phase(&mut self, s: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = Self::packed_dims(s, "unit_phase")?;
        let hw = h * w;
        let mut out = vec![0.0f32; s.len()];
        for ni in 0..n {
            for ci in 0..c {
                let re_at = (ni * 2 * c + ci) * hw;
                let im_at = (ni * 2 * c + c + ci) * hw;
                for k in 0..hw {
                    let re = s.data()[re_at + k] as f64;
                    let im = s.data()[im_at + k] as f64;
                    let d = re.hypot(im).max(PHASE_EPS);
                    out[re_at + k] = (re / d) as f32;
                    out[im_at + k] = (im / d) as f32;
                }
            }
        }
        let out = Tensor::new(s.shape(), out)?;
        let tracked = s.node().is_some();
        Ok(self.track(out, Op::UnitPhase { s: Input::of(s), n, c, h, w }, tracked))
    }

    /// Per-bin modulus of a packed complex tensor: N x 2C x H x W -> N x C x H x W.
    pub fn amplitude(&mut self, s: &Tensor) -> Result<Tensor> {
        let (n, c, h, w) = Self::packed_dims(s, "amplitude")?;
        let hw = h * w;
        let mut out = vec![0.0f32; n * c * hw];
        for ni in 0..n {
            for ci in 0..c {
                let re_at = (ni * 2 * c + ci) * hw;
                let im_at = (ni * 2 * c + c + ci) * hw;
                let dst = (ni * c + ci) * hw;
                for k in 0..hw {
                    let re = s.data()[re_at + k] as f64;
                    let im = s.data()[im_at + k] as f64;
                    out[dst + k] = re.hypot(im) as f32;
                }
            }
        }
        let out = Tensor::new(&[n, c, h, w], out)?;
        let tracked = s.node().is_some();
        Ok(self.track(out, Op::Amplitude { s: Input::of(s), n, c, h, w }, tracked))
    }

    // -- backward ----------------------------------------------------------

    /// Runs reverse-mode accumulation from a scalar loss. Returns per-node
    /// gradient buffers; leaves keep theirs for retrieval.
    pub fn backward(&self, loss: &Tensor) -> Result<Gradients> {
        if loss.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                loss.shape()
            )));
        }
        if !loss.item().is_finite() {
            return Err(Error::Contract(format!("backward requires a finite loss, got {}", loss.item())));
        }
        let root = loss
            .node()
            .ok_or_else(|| Error::Contract("loss is not tracked on this tape".into()))?;
        let mut grads: Vec<Option<Vec<f32>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root] = Some(vec![1.0]);

        for id in (0..=root).rev() {
            let Some(g) = grads[id].take() else { continue };
            match &self.nodes[id].op {
                Op::Leaf => {
                    grads[id] = Some(g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, a, |d| add_assign(d, &g));
                    acc(&mut grads, b, |d| add_assign(d, &g));
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, a, |d| add_assign(d, &g));
                    acc(&mut grads, b, |d| sub_assign(d, &g));
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, a, |d| madd(d, &g, &b.data));
                    acc(&mut grads, b, |d| madd(d, &g, &a.data));
                }
                Op::Div(a, b) => {
                    acc(&mut grads, a, |d| {
                        for i in 0..d.len() {
                            d[i] += g[i] / b.data[i];
                        }
                    });
                    acc(&mut grads, b, |d| {
                        for i in 0..d.len() {
                            d[i] -= g[i] * a.data[i] / (b.data[i] * b.data[i]);
                        }
                    });
                }
                Op::Neg(a) => acc(&mut grads, a, |d| sub_assign(d, &g)),
                Op::Scale(a, k) => {
                    let k = *k;
                    acc(&mut grads, a, |d| {
                        for i in 0..d.len() {
                            d[i] += k * g[i];
                        }
                    });
                }
                Op::AddScalar(a) => acc(&mut grads, a, |d| add_assign(d, &g)),
                Op::LeakyRelu(a, slope) => {
                    let slope = *slope;
                    acc(&mut grads, a, |d| {
                        use rayon::prelude::*;
                        d.par_chunks_mut(1 << 14).enumerate().for_each(|(ci, dch)| {
                            let at = ci << 14;
                            for (i, dv) in dch.iter_mut().enumerate() {
                                let j = at + i;
                                *dv += g[j] * if a.data[j] > 0.0 { 1.0 } else { slope };
                            }
                        });
                    });
                }
                Op::Sigmoid(a, y) => acc(&mut grads, a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * y[i] * (1.0 - y[i]);
                    }
                }),
                Op::Exp(a, y) => acc(&mut grads, a, |d| madd(d, &g, y)),
                Op::Log1p(a) => acc(&mut grads, a, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] / (1.0 + a.data[i]);
                    }
                }),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    acc(&mut grads, a, |d| {
                        for i in 0..d.len() {
                            if (lo..=hi).contains(&a.data[i]) {
                                d[i] += g[i];
                            }
                        }
                    });
                }
                Op::Min2(a, b) => {
                    acc(&mut grads, a, |d| {
                        for i in 0..d.len() {
                            if a.data[i] <= b.data[i] {
                                d[i] += g[i];
                            }
                        }
                    });
                    acc(&mut grads, b, |d| {
                        for i in 0..d.len() {
                            if a.data[i] > b.data[i] {
                                d[i] += g[i];
                            }
                        }
                    });
                }
                Op::Max2(a, b) => {
                    acc(&mut grads, a, |d| {
                        for i in 0..d.len() {
                            if a.data[i] >= b.data[i] {
                                d[i] += g[i];
                            }
                        }
                    });
                    acc(&mut grads, b, |d| {
                        for i in 0..d.len() {
                            if a.data[i] < b.data[i] {
                                d[i] += g[i];
                            }
                        }
                    });
                }
                Op::Conv2d { x, w, b, dims, cols } => {
                    let cg = conv2d_backward(cols, &w.data, &g, dims, x.node.is_some());
                    acc(&mut grads, x, |d| add_assign(d, &cg.dx));
                    acc(&mut grads, w, |d| add_assign(d, &cg.dw));
                    acc(&mut grads, b, |d| add_assign(d, &cg.db));
                }
                Op::MaxPool2 { x, arg } => acc(&mut grads, x, |d| {
                    for (o, &at) in arg.iter().enumerate() {
                        d[at as usize] += g[o];
                    }
                }),
                Op::Upsample2 { x, n, c, h, w } => {
                    let (n, c, h, w) = (*n, *c, *h, *w);
                    let wo = 2 * w;
                    acc(&mut grads, x, |d| {
                        for nc in 0..n * c {
                            for ih in 0..h {
                                for iw in 0..w {
                                    let base = nc * 4 * h * w + 2 * ih * wo + 2 * iw;
                                    d[nc * h * w + ih * w + iw] +=
                                        g[base] + g[base + 1] + g[base + wo] + g[base + wo + 1];
                                }
                            }
                        }
                    });
                }
                Op::ConcatC { a, b, n, ca, cb, hw } => {
                    let (n, ca, cb, hw) = (*n, *ca, *cb, *hw);
                    acc(&mut grads, a, |d| {
                        for ni in 0..n {
                            let src = &g[ni * (ca + cb) * hw..ni * (ca + cb) * hw + ca * hw];
                            add_assign(&mut d[ni * ca * hw..(ni + 1) * ca * hw], src);
                        }
                    });
                    acc(&mut grads, b, |d| {
                        for ni in 0..n {
                            let at = ni * (ca + cb) * hw + ca * hw;
                            let src = &g[at..at + cb * hw];
                            add_assign(&mut d[ni * cb * hw..(ni + 1) * cb * hw], src);
                        }
                    });
                }
                Op::SliceC { x, c0, c1, n, c, hw } => {
                    let (c0, c1, n, c, hw) = (*c0, *c1, *n, *c, *hw);
                    let cs = c1 - c0;
                    acc(&mut grads, x, |d| {
                        for ni in 0..n {
                            let dst = &mut d[(ni * c + c0) * hw..(ni * c + c1) * hw];
                            add_assign(dst, &g[ni * cs * hw..(ni + 1) * cs * hw]);
                        }
                    });
                }
                Op::Gather { x, idx } => acc(&mut grads, x, |d| {
                    for (o, &i) in idx.iter().enumerate() {
                        d[i] += g[o];
                    }
                }),
                Op::SumAll(a) => {
                    let g0 = g[0];
                    acc(&mut grads, a, |d| {
                        for v in d.iter_mut() {
                            *v += g0;
                        }
                    });
                }
                Op::MeanAll(a) => {
                    let g0 = g[0] / a.data.len() as f32;
                    acc(&mut grads, a, |d| {
                        for v in d.iter_mut() {
                            *v += g0;
                        }
                    });
                }
                Op::SpatialMean { x, n, c, hw } => {
                    let (n, c, hw) = (*n, *c, *hw);
                    acc(&mut grads, x, |d| {
                        for nc in 0..n * c {
                            let gv = g[nc] / hw as f32;
                            for v in d[nc * hw..(nc + 1) * hw].iter_mut() {
                                *v += gv;
                            }
                        }
                    });
                }
                Op::BceWithLogits { x, targets } => acc(&mut grads, x, |d| {
                    for i in 0..d.len() {
                        d[i] += g[i] * (stable_sigmoid(x.data[i]) - targets[i]);
                    }
                }),
                Op::Fft2 { x, n, c, h, w } => {
                    let (n, c, h, w) = (*n, *c, *h, *w);
                    let hw = h * w;
                    acc(&mut grads, x, |d| {
                        par_channels(n, c, d, |ni, ci, d| {
                            let re_at = (ni * 2 * c + ci) * hw;
                            let im_at = (ni * 2 * c + c + ci) * hw;
                            let mut re = widen(&g[re_at..re_at + hw]);
                            let mut im = widen(&g[im_at..im_at + hw]);
                            // Adjoint of the forward transform is the
                            // unnormalized inverse applied to the complex
                            // upstream gradient.
                            fft2_raw(&mut re, &mut im, h, w, true);
                            let dst = (ni * c + ci) * hw;
                            for k in 0..hw {
                                d[dst + k] += re[k] as f32;
                            }
                        });
                    });
                }
                Op::Ifft2 { s, n, c, h, w } => {
                    let (n, c, h, w) = (*n, *c, *h, *w);
                    let hw = h * w;
                    let norm = 1.0 / hw as f64;
                    acc(&mut grads, s, |d| {
                        par_channels(n, c, d, |ni, ci, d| {
                            let src = (ni * c + ci) * hw;
                            let mut re = widen(&g[src..src + hw]);
                            let mut im = vec![0.0f64; hw];
                            fft2_raw(&mut re, &mut im, h, w, false);
                            let re_at = (ni * 2 * c + ci) * hw;
                            let im_at = (ni * 2 * c + c + ci) * hw;
                            for k in 0..hw {
                                d[re_at + k] += (re[k] * norm) as f32;
                                d[im_at + k] += (im[k] * norm) as f32;
                            }
                        });
                    });
                }
                Op::UnitPhase { s, n, c, h, w } => {
                    let (n, c, h, w) = (*n, *c, *h, *w);
                    let hw = h * w;
                    acc(&mut grads, s, |d| {
                        for ni in 0..n {
                            for ci in 0..c {
                                let re_at = (ni * 2 * c + ci) * hw;
                                let im_at = (ni * 2 * c + c + ci) * hw;
                                for k in 0..hw {
                                    let re = s.data[re_at + k] as f64;
                                    let im = s.data[im_at + k] as f64;
                                    let a = re.hypot(im);
                                    let gr = g[re_at + k] as f64;
                                    let gi = g[im_at + k] as f64;
                                    // The guard region is treated as flat:
                                    // no gradient where the modulus sits
                                    // under the epsilon clamp.
                                    if a > PHASE_EPS {
                                        let a3 = a * a * a;
                                        d[re_at + k] += ((gr * im * im - gi * re * im) / a3) as f32;
                                        d[im_at + k] += ((gi * re * re - gr * re * im) / a3) as f32;
                                    }
                                }
                            }
                        }
                    });
                }
                Op::Amplitude { s, n, c, h, w } => {
                    let (n, c, h, w) = (*n, *c, *h, *w);
                    let hw = h * w;
                    acc(&mut grads, s, |d| {
                        for ni in 0..n {
                            for ci in 0..c {
                                let re_at = (ni * 2 * c + ci) * hw;
                                let im_at = (ni * 2 * c + c + ci) * hw;
                                let src = (ni * c + ci) * hw;
                                for k in 0..hw {
                                    let re = s.data[re_at + k] as f64;
                                    let im = s.data[im_at + k] as f64;
                                    let a = re.hypot(im).max(1e-12);
                                    let gv = g[src + k] as f64;
                                    d[re_at + k] += (gv * re / a) as f32;
                                    d[im_at + k] += (gv * im / a) as f32;
                                }
                            }
                        }
                    });
                }
            }
        }
        Ok(Gradients { grads })
    }
}

/// Gets-or-creates the gradient buffer for a tracked input and applies the
/// accumulation closure; untracked inputs are skipped.
fn acc(grads: &mut [Option<Vec<f32>>], input: &Input, f: impl FnOnce(&mut Vec<f32>)) {
    if let Some(node) = input.node {
        let slot = grads[node].get_or_insert_with(|| vec![0.0; input.data.len()]);
        f(slot);
    }
}

fn add_assign(d: &mut [f32], s: &[f32]) {
    for (a, b) in d.iter_mut().zip(s) {
        *a += b;
    }
}

fn sub_assign(d: &mut [f32], s: &[f32]) {
    for (a, b) in d.iter_mut().zip(s) {
        *a -= b;
    }
}

fn madd(d: &mut [f32], g: &[f32], m: &[f32]) {
    for i in 0..d.len() {
        d[i] += g[i] * m[i];
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::gradcheck::{assert_grad_matches, random_inputs};

    fn t(shape: &[usize], data: Vec<f32>) -> Tensor {
        Tensor::new(shape, data).unwrap()
    }

    #[test]
    fn conv_identity_scale_kernel() {
        let mut tape = GradTape::new();
        let x = t(&[1, 1, 3, 3], vec![1.0; 9]);
        let w = t(&[1, 1, 1, 1], vec![2.0]);
        let b = t(&[1], vec![0.0]);
        let y = tape.conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn conv_full_window_sums() {
        let mut tape = GradTape::new();
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let w = t(&[1, 1, 2, 2], vec![1.0; 4]);
        let b = t(&[1], vec![0.0]);
        let y = tape.conv2d(&x, &w, &b, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 10.0);
    }

    #[test]
    fn conv_output_extent_formula_and_padding() {
        let mut tape = GradTape::new();
        let x = t(&[1, 1, 5, 5], (0..25).map(|v| v as f32).collect());
        let w = t(&[2, 1, 3, 3], vec![0.5; 18]);
        let b = t(&[2], vec![1.0, -1.0]);
        let y = tape.conv2d(&x, &w, &b, 2, 1).unwrap();
        assert_eq!(y.shape(), &[1, 2, 3, 3]);
    }

    #[test]
    fn conv_shape_mismatch_is_dimension_error() {
        let mut tape = GradTape::new();
        let x = t(&[1, 2, 4, 4], vec![0.0; 32]);
        let w = t(&[1, 3, 3, 3], vec![0.0; 27]);
        let b = t(&[1], vec![0.0]);
        let err = tape.conv2d(&x, &w, &b, 1, 0).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        assert!(err.to_string().contains("channel mismatch"));
    }

    #[test]
    fn conv_weight_gradient_matches_finite_differences() {
        let x = random_inputs(&[&[1, 2, 5, 5]], 11).remove(0);
        assert_grad_matches(&[&[3, 2, 3, 3], &[3]], &[0, 1, 2, 3, 4], 1e-3, 1e-3, |tape, v| {
            let y = tape.conv2d(&x, &v[0], &v[1], 1, 1).unwrap();
            tape.sum_all(&y)
        });
    }

    #[test]
    fn conv_input_gradient_matches_finite_differences() {
        let w = random_inputs(&[&[2, 2, 3, 3]], 21).remove(0);
        let b = random_inputs(&[&[2]], 22).remove(0);
        assert_grad_matches(&[&[1, 2, 4, 4]], &[5, 6, 7], 1e-3, 1e-3, |tape, v| {
            let y = tape.conv2d(&v[0], &w, &b, 2, 1).unwrap();
            let sq = tape.mul(&y, &y).unwrap();
            tape.sum_all(&sq)
        });
    }

    #[test]
    fn leaky_relu_basics() {
        let mut tape = GradTape::new();
        let x = t(&[3], vec![-1.0, 0.0, 2.0]);
        let y = tape.leaky_relu(&x, 0.1).unwrap();
        assert_eq!(y.data(), &[-0.1, 0.0, 2.0]);
        let r = tape.leaky_relu(&x, 0.0).unwrap();
        assert_eq!(r.data(), &[0.0, 0.0, 2.0]);
        assert!(tape.leaky_relu(&x, 1.0).is_err());
    }

    #[test]
    fn leaky_relu_gradient_away_from_zero() {
        // Inputs in [-1,1) with |x| > 0.05 enforced by shifting.
        for seed in [1u64, 2, 3] {
            let raw = random_inputs(&[&[16]], seed).remove(0);
            let shifted: Vec<f32> =
                raw.data().iter().map(|&v| if v >= 0.0 { v + 0.06 } else { v - 0.06 }).collect();
            let x = t(&[16], shifted);
            let mut tape = GradTape::new();
            let leaf = tape.leaf(&x);
            let y = tape.leaky_relu(&leaf, 0.1).unwrap();
            let loss = tape.sum_all(&y);
            let mut grads = tape.backward(&loss).unwrap();
            let g = grads.take_or_zeros(&leaf);
            for (xv, gv) in x.data().iter().zip(&g) {
                let expect = if *xv > 0.0 { 1.0 } else { 0.1 };
                assert!((gv - expect).abs() < 1e-4);
            }
        }
    }

    #[test]
    fn maxpool_and_upsample() {
        let mut tape = GradTape::new();
        let x = t(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let y = tape.maxpool2(&x).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1]);
        assert_eq!(y.item(), 4.0);

        let odd = t(&[1, 1, 3, 2], vec![0.0; 6]);
        assert!(matches!(tape.maxpool2(&odd), Err(Error::Dimension(_))));

        // x that is its own 2x2 block max: upsample then pool returns x.
        let x2 = t(&[1, 1, 2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let up = tape.upsample2_nearest(&x2).unwrap();
        assert_eq!(up.shape(), &[1, 1, 4, 4]);
        let back = tape.maxpool2(&up).unwrap();
        assert_eq!(back.data(), x2.data());
    }

    #[test]
    fn concat_and_slice_channels() {
        let mut tape = GradTape::new();
        let a = t(&[2, 2, 1, 1], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 1, 1, 1], vec![9.0, 8.0]);
        let c = tape.concat_channels(&a, &b).unwrap();
        assert_eq!(c.shape(), &[2, 3, 1, 1]);
        assert_eq!(c.data(), &[1.0, 2.0, 9.0, 3.0, 4.0, 8.0]);
        let s = tape.slice_channels(&c, 2, 3).unwrap();
        assert_eq!(s.data(), &[9.0, 8.0]);

        let bad = t(&[1, 1, 2, 2], vec![0.0; 4]);
        assert!(matches!(tape.concat_channels(&a, &bad), Err(Error::Dimension(_))));
    }

    #[test]
    fn pool_upsample_concat_slice_gather_gradients() {
        assert_grad_matches(&[&[1, 2, 4, 4], &[1, 1, 4, 4]], &[0, 1, 2, 3, 4], 1e-3, 1e-3, |tape, v| {
            let p = tape.maxpool2(&v[0]).unwrap();
            let u = tape.upsample2_nearest(&p).unwrap();
            let c = tape.concat_channels(&u, &v[1]).unwrap();
            let s = tape.slice_channels(&c, 1, 3).unwrap();
            let g = tape.gather(&s, &[0, 3, 3, 17]).unwrap();
            let sq = tape.mul(&g, &g).unwrap();
            tape.mean_all(&sq)
        });
    }

    #[test]
    fn backward_of_sum_is_ones_and_square_is_2x() {
        let mut tape = GradTape::new();
        let theta = t(&[2], vec![1.0, 2.0]);
        let leaf = tape.leaf(&theta);
        let loss = tape.sum_all(&leaf);
        let mut grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.take_or_zeros(&leaf), vec![1.0, 1.0]);

        let mut tape = GradTape::new();
        let leaf = tape.leaf(&theta);
        let sq = tape.mul(&leaf, &leaf).unwrap();
        let loss = tape.sum_all(&sq);
        let mut grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.take_or_zeros(&leaf), vec![2.0, 4.0]);
    }

    #[test]
    fn composite_graph_matches_finite_differences() {
        assert_grad_matches(&[&[6], &[6]], &[0, 1, 2, 3, 4], 1e-3, 1e-3, |tape, v| {
            let s = tape.sigmoid(&v[0]);
            let e = tape.exp(&v[1]);
            let m = tape.mul(&s, &e).unwrap();
            let shifted = tape.add_scalar(&e, 1.5);
            let d = tape.div(&m, &shifted).unwrap();
            let dsq = tape.mul(&d, &d).unwrap();
            let l = tape.log1p(&dsq);
            let mn = tape.min2(&l, &s).unwrap();
            let quarter = tape.scale(&v[0], 0.25);
            let mx = tape.max2(&mn, &quarter).unwrap();
            tape.mean_all(&mx)
        });
    }

    #[test]
    fn non_scalar_or_untracked_loss_is_contract_error() {
        let mut tape = GradTape::new();
        let x = t(&[2], vec![1.0, 2.0]);
        let leaf = tape.leaf(&x);
        assert!(matches!(tape.backward(&leaf), Err(Error::Contract(_))));
        let constant = Tensor::scalar(1.0);
        assert!(matches!(tape.backward(&constant), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_leaf_gets_exact_zeros() {
        let mut tape = GradTape::new();
        let a = tape.leaf(&t(&[3], vec![1.0, 2.0, 3.0]));
        let b = tape.leaf(&t(&[3], vec![4.0, 5.0, 6.0]));
        let loss = tape.sum_all(&a);
        let mut grads = tape.backward(&loss).unwrap();
        assert_eq!(grads.take_or_zeros(&b), vec![0.0, 0.0, 0.0]);
    }

    #[test]
    fn ops_on_constants_record_nothing() {
        let mut tape = GradTape::new();
        let a = t(&[4], vec![1.0; 4]);
        let b = t(&[4], vec![2.0; 4]);
        let c = tape.add(&a, &b).unwrap();
        let d = tape.mul(&c, &c).unwrap();
        let _ = tape.sum_all(&d);
        assert_eq!(tape.num_nodes(), 0);
    }

    #[test]
    fn spatial_mean_and_bce() {
        let mut tape = GradTape::new();
        let x = t(&[1, 2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, -1.0, -1.0, 1.0, 1.0]);
        let m = tape.spatial_mean(&x).unwrap();
        assert_eq!(m.shape(), &[1, 2]);
        assert_eq!(m.data(), &[2.5, 0.0]);

        // BCE at strongly negative logit with target 0 is near zero.
        let logits = t(&[1], vec![-10.0]);
        let l = tape.bce_with_logits(&logits, &[0.0]).unwrap();
        assert!(l.item() < 1e-3);
        // ... and at logit 0 it is ln 2.
        let l2 = tape.bce_with_logits(&t(&[1], vec![0.0]), &[1.0]).unwrap();
        assert!((l2.item() - std::f32::consts::LN_2).abs() < 1e-6);
    }

    #[test]
    fn bce_clamp_spatialmean_gradients() {
        let targets = vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0];
        assert_grad_matches(&[&[1, 2, 2, 2]], &[0, 1, 2, 3, 4], 1e-3, 1e-3, move |tape, v| {
            let scaled = tape.scale(&v[0], 3.0);
            let bce = tape.bce_with_logits(&scaled, &targets).unwrap();
            let sm = tape.spatial_mean(&bce).unwrap();
            let cl = tape.clamp(&sm, -0.45, 0.45);
            let s = tape.sum_all(&cl);
            tape.scale(&s, 0.5)
        });
    }

    #[test]
    fn fft_ops_match_pure_spectral_path() {
        let x = random_inputs(&[&[1, 1, 6, 8]], 33).remove(0);
        let mut tape = GradTape::new();
        let s = tape.fft2(&x).unwrap();
        assert_eq!(s.shape(), &[1, 2, 6, 8]);
        let map = crate::spectral::RealMap::new(6, 8, x.data().iter().map(|&v| v as f64).collect());
        let oracle = crate::spectral::fft2(&map);
        for k in 0..48 {
            assert!((s.data()[k] as f64 - oracle.re[k]).abs() < 1e-4);
            assert!((s.data()[48 + k] as f64 - oracle.im[k]).abs() < 1e-4);
        }
        let back = tape.ifft2(&s).unwrap();
        for k in 0..48 {
            assert!((back.data()[k] - x.data()[k]).abs() < 1e-5);
        }
        let u = tape.unit_phase(&s).unwrap();
        for k in 0..48 {
            let m = (u.data()[k] as f64).hypot(u.data()[48 + k] as f64);
            assert!(m <= 1.0 + 1e-6);
        }
        let a = tape.amplitude(&s).unwrap();
        assert_eq!(a.shape(), &[1, 1, 6, 8]);
        for k in 0..48 {
            assert!((a.data()[k] as f64 - oracle.re[k].hypot(oracle.im[k])).abs() < 1e-3);
        }
    }

    #[test]
    fn fft_pipeline_gradient_matches_finite_differences() {
        assert_grad_matches(&[&[1, 1, 4, 4]], &[0, 1, 2, 3, 4], 1e-3, 1e-3, |tape, v| {
            let s = tape.fft2(&v[0]).unwrap();
            let sq = tape.mul(&s, &s).unwrap();
            tape.mean_all(&sq)
        });
        // Round trip with a nonlinearity in frequency space. A fixed mask
        // breaks the Parseval invariance that would otherwise make this
        // loss constant in the input.
        let mask = random_inputs(&[&[1, 1, 4, 6]], 400).remove(0);
        assert_grad_matches(&[&[1, 1, 4, 6]], &[5, 6, 7], 1e-3, 1e-3, move |tape, v| {
            let s = tape.fft2(&v[0]).unwrap();
            let a = tape.unit_phase(&s).unwrap();
            let x = tape.ifft2(&a).unwrap();
            let m = tape.mul(&x, &mask).unwrap();
            let sq = tape.mul(&m, &m).unwrap();
            tape.sum_all(&sq)
        });
    }

    #[test]
    fn amplitude_gradient_matches_finite_differences() {
        // Shift inputs away from zero so no bin amplitude sits near the
        // non-differentiable origin.
        for seed in [0u64, 1, 2, 3, 4] {
            let raw = random_inputs(&[&[1, 1, 4, 4]], seed).remove(0);
            let shifted: Vec<f32> = raw.data().iter().map(|&v| v + 3.0).collect();
            let x = t(&[1, 1, 4, 4], shifted);
            let err = crate::tensor::gradcheck::finite_diff_error(&[x], 1e-3, |tape, v| {
                let s = tape.fft2(&v[0]).unwrap();
                let a = tape.amplitude(&s).unwrap();
                let l = tape.log1p(&a);
                let sq = tape.mul(&l, &l).unwrap();
                tape.mean_all(&sq)
            });
            assert!(err < 1e-3, "seed {seed}: rel err {err:.3e}");
        }
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let x = random_inputs(&[&[2, 3, 8, 8]], 99).remove(0);
            let w = random_inputs(&[&[4, 3, 3, 3]], 100).remove(0);
            let b = random_inputs(&[&[4]], 101).remove(0);
            let mut tape = GradTape::new();
            let lw = tape.leaf(&w);
            let y = tape.conv2d(&x, &lw, &b, 2, 1).unwrap();
            let act = tape.leaky_relu(&y, 0.1).unwrap();
            let loss = tape.mean_all(&act);
            let mut grads = tape.backward(&loss).unwrap();
            (y.data().to_vec(), grads.take_or_zeros(&lw))
        };
        let (y1, g1) = run();
        let (y2, g2) = run();
        assert!(y1.iter().zip(&y2).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(g1.iter().zip(&g2).all(|(a, b)| a.to_bits() == b.to_bits()));
    }
}
