//! Small neural-network toolkit on top of the candle tensor backend.
//!
//! Parameters are created from a seeded generator so that a run is fully determined
//! by its seed. Convolutions go through an explicit im2col + matmul path because the
//! backend's native CPU convolution backward is several times slower at these sizes.

use std::cell::RefCell;
use std::collections::BTreeMap;

use candle_core::{CpuStorage, CustomOp1, CustomOp2, DType, Device, Layout, Shape, Tensor, Var, WithDType, D};
use num_traits::Float;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{invalid, Result};

pub fn normal_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

/// Independent generator for a position in a run, e.g. `(step, item)`. Streams for
/// different paths do not overlap in practice and do not depend on evaluation order.
pub fn derive_rng(seed: u64, path: &[u64]) -> ChaCha8Rng {
    fn splitmix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        z ^ (z >> 31)
    }
    let mut h = splitmix(seed);
    for &p in path {
        h = splitmix(h ^ splitmix(p.wrapping_add(0x632b_e59b_d9b4_e019)));
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Sinusoidal features of scalar positions, `len(values) x dim`.
pub fn sinusoidal(values: &[f64], dim: usize) -> Vec<f32> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(values.len() * dim);
    for &v in values {
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            out.push((v * freq).sin() as f32);
        }
        for k in 0..half {
            let freq = (-(10_000f64.ln()) * k as f64 / half as f64).exp();
            out.push((v * freq).cos() as f32);
        }
        out.extend(std::iter::repeat_n(0.0, dim - 2 * half));
    }
    out
}

/// Fixed 2D position code for a `gh x gw` token grid: row features then column features.
pub fn position_grid(gh: usize, gw: usize, dim: usize, device: &Device) -> Result<Tensor> {
    let half = dim / 2;
    let mut out = Vec::with_capacity(gh * gw * dim);
    for r in 0..gh {
        let rf = sinusoidal(&[r as f64], half);
        for c in 0..gw {
            out.extend_from_slice(&rf);
            out.extend(sinusoidal(&[c as f64], dim - half));
        }
    }
    Ok(Tensor::from_vec(out, (1, gh * gw, dim), device)?)
}

pub fn normal_tensor(rng: &mut ChaCha8Rng, shape: &[usize], device: &Device) -> Result<Tensor> {
    let n = shape.iter().product();
    Ok(Tensor::from_vec(normal_vec(rng, n), shape, device)?)
}

#[derive(Debug, Clone, Copy)]
pub enum Init {
    Zeros,
    Ones,
    /// Uniform in `[-b, b]` with `b = sqrt(3 / fan_in)` (unit-variance preserving for linear maps).
    FanIn(usize),
    Normal(f64),
    /// Convolution weight `c_out x (c_in*k*k)` whose output channel `o` copies input
    /// channel `offset + o` through the centre tap; every other entry is zero.
    PassThrough { offset: usize, k: usize },
}

/// Named trainable tensors for one network component.
pub struct ParamStore {
    vars: RefCell<BTreeMap<String, Var>>,
    rng: RefCell<ChaCha8Rng>,
    device: Device,
}

impl ParamStore {
    pub fn new(rng: ChaCha8Rng, device: &Device) -> Self {
        Self { vars: RefCell::new(BTreeMap::new()), rng: RefCell::new(rng), device: device.clone() }
    }

    pub fn root(&self) -> ParamPath<'_> {
        ParamPath { store: self, prefix: String::new() }
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    pub fn vars(&self) -> Vec<(String, Var)> {
        self.vars.borrow().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    pub fn num_params(&self) -> usize {
        self.vars.borrow().values().map(|v| v.elem_count()).sum()
    }

    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.vars.borrow().iter().map(|(k, v)| (k.clone(), v.as_tensor().clone())).collect()
    }

    /// Overwrites every parameter from `tensors`; all names must be present with matching shapes.
    pub fn load(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        for (name, var) in self.vars.borrow().iter() {
            let t = tensors.get(name).ok_or_else(|| invalid!("missing parameter {name}"))?;
            if t.dims() != var.dims() {
                return Err(invalid!("parameter {name} has shape {:?}, expected {:?}", t.dims(), var.dims()));
            }
            var.set(&t.to_dtype(DType::F32)?)?;
        }
        Ok(())
    }

    fn get(&self, name: String, shape: &[usize], init: Init) -> Result<Tensor> {
        if let Some(v) = self.vars.borrow().get(&name) {
            if v.dims() != shape {
                return Err(invalid!("parameter {name} requested with shape {shape:?}, exists as {:?}", v.dims()));
            }
            return Ok(v.as_tensor().clone());
        }
        let n: usize = shape.iter().product();
        let mut rng = self.rng.borrow_mut();
        let data: Vec<f32> = match init {
            Init::Zeros => vec![0.0; n],
            Init::Ones => vec![1.0; n],
            Init::FanIn(fan_in) => {
                let b = (3.0 / fan_in.max(1) as f64).sqrt() as f32;
                (0..n).map(|_| rng.random_range(-b..=b)).collect()
            }
            Init::Normal(std) => normal_vec(&mut rng, n).into_iter().map(|v| v * std as f32).collect(),
            Init::PassThrough { offset, k } => {
                let (rows, cols) = (shape[0], shape[1]);
                let mut w = vec![0.0; n];
                for o in 0..rows {
                    let col = ((offset + o) * k + k / 2) * k + k / 2;
                    if col < cols {
                        w[o * cols + col] = 1.0;
                    }
                }
                w
            }
        };
        let var = Var::from_tensor(&Tensor::from_vec(data, shape, &self.device)?)?;
        let t = var.as_tensor().clone();
        self.vars.borrow_mut().insert(name, var);
        Ok(t)
    }
}

#[derive(Clone)]
pub struct ParamPath<'a> {
    store: &'a ParamStore,
    prefix: String,
}

impl<'a> ParamPath<'a> {
    pub fn pp(&self, name: impl std::fmt::Display) -> ParamPath<'a> {
        let prefix = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        ParamPath { store: self.store, prefix }
    }

    pub fn get(&self, name: &str, shape: &[usize], init: Init) -> Result<Tensor> {
        let full = if self.prefix.is_empty() { name.to_string() } else { format!("{}.{}", self.prefix, name) };
        self.store.get(full, shape, init)
    }

    pub fn device(&self) -> &Device {
        &self.store.device
    }
}

/// Unfolds `B x C x H x W` into a `(C*k*k) x (B*OH*OW)` patch matrix, so a convolution is
/// one plain matmul and its weight gradient needs no reduction over the batch.
struct Im2Col {
    k: usize,
    stride: usize,
    pad: usize,
}

struct Col2Im {
    k: usize,
    b: usize,
    stride: usize,
    pad: usize,
    h: usize,
    w: usize,
}

fn out_size(n: usize, k: usize, stride: usize, pad: usize) -> usize {
    (n + 2 * pad - k) / stride + 1
}

fn im2col<T: Float>(src: &[T], b: usize, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Vec<T> {
    let (oh, ow) = (out_size(h, k, stride, pad), out_size(w, k, stride, pad));
    let n = oh * ow;
    let mut dst = vec![T::zero(); c * k * k * b * n];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &src[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let d = &mut dst[(row * b + bi) * n..(row * b + bi + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let srow = &plane[iy as usize * w..(iy as usize + 1) * w];
                        let drow = &mut d[oy * ow..(oy + 1) * ow];
                        for (ox, dv) in drow.iter_mut().enumerate() {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                *dv = srow[ix as usize];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Float>(cols: &[T], b: usize, c: usize, h: usize, w: usize, k: usize, stride: usize, pad: usize) -> Vec<T> {
    let (oh, ow) = (out_size(h, k, stride, pad), out_size(w, k, stride, pad));
    let n = oh * ow;
    let mut dst = vec![T::zero(); b * c * h * w];
    for bi in 0..b {
        for ci in 0..c {
            let plane = &mut dst[(bi * c + ci) * h * w..(bi * c + ci + 1) * h * w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (ci * k + ky) * k + kx;
                    let s = &cols[(row * b + bi) * n..(row * b + bi + 1) * n];
                    for oy in 0..oh {
                        let iy = (oy * stride + ky) as isize - pad as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        let drow = &mut plane[iy as usize * w..(iy as usize + 1) * w];
                        for ox in 0..ow {
                            let ix = (ox * stride + kx) as isize - pad as isize;
                            if ix >= 0 && ix < w as isize {
                                drow[ix as usize] = drow[ix as usize] + s[oy * ow + ox];
                            }
                        }
                    }
                }
            }
        }
    }
    dst
}

fn contiguous<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("expected a contiguous tensor"),
    }
}

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (b, c, h, w) = l.shape().dims4()?;
        let (oh, ow) = (out_size(h, self.k, self.stride, self.pad), out_size(w, self.k, self.stride, self.pad));
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(im2col(contiguous(v, l)?, b, c, h, w, self.k, self.stride, self.pad)),
            CpuStorage::F64(v) => CpuStorage::F64(im2col(contiguous(v, l)?, b, c, h, w, self.k, self.stride, self.pad)),
            _ => candle_core::bail!("im2col supports f32/f64"),
        };
        Ok((out, Shape::from((c * self.k * self.k, b * oh * ow))))
    }

    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let (b, _, h, w) = arg.dims4()?;
        let op = Col2Im { k: self.k, stride: self.stride, pad: self.pad, b, h, w };
        Ok(Some(grad.contiguous()?.apply_op1_no_bwd(&op)?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (ckk, _) = l.shape().dims2()?;
        let c = ckk / (self.k * self.k);
        let (b, h, w) = (self.b, self.h, self.w);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(col2im(contiguous(v, l)?, b, c, h, w, self.k, self.stride, self.pad)),
            CpuStorage::F64(v) => CpuStorage::F64(col2im(contiguous(v, l)?, b, c, h, w, self.k, self.stride, self.pad)),
            _ => candle_core::bail!("col2im supports f32/f64"),
        };
        Ok((out, Shape::from((b, c, h, w))))
    }
}

/// Elementwise combination of a tensor with a per-channel vector broadcast along `axis`.
/// The backend reduces broadcast gradients over leading axes slowly; this op sums them
/// in one pass instead.
#[derive(Clone, Copy)]
enum ChannelKind {
    Add,
    Mul,
}

#[derive(Clone, Copy)]
struct ChannelOp {
    kind: ChannelKind,
    axis: usize,
}

/// Per-channel sums of `x` over every axis except `axis`.
struct ChannelSum {
    axis: usize,
    channels: usize,
}

fn split_dims(dims: &[usize], axis: usize) -> (usize, usize, usize) {
    (dims[..axis].iter().product(), dims[axis], dims[axis + 1..].iter().product())
}

fn channel_apply<T: Float>(x: &[T], p: &[T], kind: ChannelKind, c: usize, post: usize) -> Vec<T> {
    x.iter()
        .enumerate()
        .map(|(i, &v)| {
            let pc = p[(i / post) % c];
            match kind {
                ChannelKind::Add => v + pc,
                ChannelKind::Mul => v * pc,
            }
        })
        .collect()
}

fn channel_sum<T: Float>(x: &[T], c: usize, post: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); c];
    for (row, chunk) in x.chunks(post).enumerate() {
        let s = chunk.iter().fold(T::zero(), |a, &v| a + v);
        acc[row % c] = acc[row % c] + s;
    }
    acc
}

impl CustomOp2 for ChannelOp {
    fn name(&self) -> &'static str {
        "channel-op"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, post) = split_dims(l1.dims(), self.axis);
        if l2.shape().elem_count() != c {
            candle_core::bail!("channel op: {} parameters for {c} channels", l2.shape().elem_count());
        }
        let out = match (s1, s2) {
            (CpuStorage::F32(x), CpuStorage::F32(p)) => {
                CpuStorage::F32(channel_apply(contiguous(x, l1)?, contiguous(p, l2)?, self.kind, c, post))
            }
            (CpuStorage::F64(x), CpuStorage::F64(p)) => {
                CpuStorage::F64(channel_apply(contiguous(x, l1)?, contiguous(p, l2)?, self.kind, c, post))
            }
            _ => candle_core::bail!("channel op supports matching f32/f64"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, p: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let sum = ChannelSum { axis: self.axis, channels: p.elem_count() };
        match self.kind {
            ChannelKind::Add => {
                let dp = grad.apply_op1_no_bwd(&sum)?.reshape(p.shape())?;
                Ok((Some(grad), Some(dp)))
            }
            ChannelKind::Mul => {
                let dx = grad.apply_op2_no_bwd(p, self)?;
                let dp = (&grad * x)?.apply_op1_no_bwd(&sum)?.reshape(p.shape())?;
                Ok((Some(dx), Some(dp)))
            }
        }
    }
}

impl CustomOp1 for ChannelSum {
    fn name(&self) -> &'static str {
        "channel-sum"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let (_, c, post) = split_dims(l.dims(), self.axis);
        debug_assert_eq!(c, self.channels);
        let out = match s {
            CpuStorage::F32(v) => CpuStorage::F32(channel_sum(contiguous(v, l)?, c, post)),
            CpuStorage::F64(v) => CpuStorage::F64(channel_sum(contiguous(v, l)?, c, post)),
            _ => candle_core::bail!("channel sum supports f32/f64"),
        };
        Ok((out, Shape::from(self.channels)))
    }
}

fn channel_op(x: &Tensor, p: &Tensor, axis: usize, kind: ChannelKind) -> Result<Tensor> {
    if axis >= x.rank() || p.elem_count() != x.dims()[axis] {
        return Err(invalid!("channel op: {:?} parameters on axis {axis} of {:?}", p.dims(), x.dims()));
    }
    Ok(x.contiguous()?.apply_op2(&p.contiguous()?, ChannelOp { kind, axis })?)
}

/// `x + p` with `p` (one value per channel) broadcast along `axis`.
pub fn channel_add(x: &Tensor, p: &Tensor, axis: usize) -> Result<Tensor> {
    channel_op(x, p, axis, ChannelKind::Add)
}

/// `x * p` with `p` (one value per channel) broadcast along `axis`.
pub fn channel_mul(x: &Tensor, p: &Tensor, axis: usize) -> Result<Tensor> {
    channel_op(x, p, axis, ChannelKind::Mul)
}

/// Applies a `d_in x d_out` matrix to the last axis through one 2D matmul.
fn matmul_last(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let dims = x.dims().to_vec();
    let d_in = *dims.last().ok_or_else(|| invalid!("matmul on a scalar"))?;
    let rows = x.elem_count() / d_in.max(1);
    let y = x.reshape((rows, d_in))?.matmul(w)?;
    let mut out = dims;
    *out.last_mut().unwrap() = w.dim(1)?;
    Ok(y.reshape(out)?)
}

/// 2D convolution with square kernels, weights stored as `C_out x (C_in*k*k)`.
#[derive(Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Tensor,
    k: usize,
    stride: usize,
    pad: usize,
    c_out: usize,
}

impl Conv2d {
    pub fn new(p: &ParamPath, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Self::with_init(p, c_in, c_out, k, stride, Init::FanIn(c_in * k * k))
    }

    /// Convolution whose weights and bias start at zero.
    pub fn zeros(p: &ParamPath, c_in: usize, c_out: usize, k: usize, stride: usize) -> Result<Self> {
        Self::with_init(p, c_in, c_out, k, stride, Init::Zeros)
    }

    /// Stride-1 convolution that starts as an exact copy of input channels
    /// `offset..offset + c_out`.
    pub fn pass_through(p: &ParamPath, c_in: usize, c_out: usize, k: usize, offset: usize) -> Result<Self> {
        if offset + c_out > c_in {
            return Err(invalid!("pass-through of {c_out} channels from offset {offset} exceeds {c_in} inputs"));
        }
        Self::with_init(p, c_in, c_out, k, 1, Init::PassThrough { offset, k })
    }

    fn with_init(p: &ParamPath, c_in: usize, c_out: usize, k: usize, stride: usize, init: Init) -> Result<Self> {
        Ok(Self {
            weight: p.get("weight", &[c_out, c_in * k * k], init)?,
            bias: p.get("bias", &[c_out], Init::Zeros)?,
            k,
            stride,
            pad: k / 2,
            c_out,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x.dims4()?;
        let (oh, ow) = (out_size(h, self.k, self.stride, self.pad), out_size(w, self.k, self.stride, self.pad));
        let cols = if self.k == 1 && self.stride == 1 {
            x.reshape((b, c, h * w))?.transpose(0, 1)?.contiguous()?.reshape((c, b * h * w))?
        } else {
            x.contiguous()?.apply_op1(Im2Col { k: self.k, stride: self.stride, pad: self.pad })?
        };
        let y = channel_add(&self.weight.matmul(&cols)?, &self.bias, 0)?;
        Ok(y.reshape((self.c_out, b, oh * ow))?.transpose(0, 1)?.contiguous()?.reshape((b, self.c_out, oh, ow))?)
    }
}

/// Affine map on the last dimension, weights stored as `in x out`.
#[derive(Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(p: &ParamPath, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self { weight: p.get("weight", &[d_in, d_out], Init::FanIn(d_in))?, bias: p.get("bias", &[d_out], Init::Zeros)? })
    }

    pub fn zeros(p: &ParamPath, d_in: usize, d_out: usize) -> Result<Self> {
        Ok(Self { weight: p.get("weight", &[d_in, d_out], Init::Zeros)?, bias: p.get("bias", &[d_out], Init::Zeros)? })
    }

    pub fn weight(&self) -> &Tensor {
        &self.weight
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = matmul_last(x, &self.weight)?;
        channel_add(&y, &self.bias, y.rank() - 1)
    }
}

#[derive(Clone)]
pub struct LayerNorm {
    gamma: Tensor,
    beta: Tensor,
}

impl LayerNorm {
    pub fn new(p: &ParamPath, dim: usize) -> Result<Self> {
        Ok(Self { gamma: p.get("gamma", &[dim], Init::Ones)?, beta: p.get("beta", &[dim], Init::Zeros)? })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let xc = x.broadcast_sub(&mean)?;
        let var = xc.sqr()?.mean_keepdim(D::Minus1)?;
        let y = xc.broadcast_div(&(var + 1e-5)?.sqrt()?)?;
        let last = y.rank() - 1;
        channel_add(&channel_mul(&y, &self.gamma, last)?, &self.beta, last)
    }
}

pub fn softmax_last_dim(x: &Tensor) -> Result<Tensor> {
    let shifted = x.broadcast_sub(&x.max_keepdim(D::Minus1)?.detach())?;
    let e = shifted.exp()?;
    Ok(e.broadcast_div(&e.sum_keepdim(D::Minus1)?)?)
}

/// Multi-head attention; queries from `x`, keys/values from `ctx` (self-attention when they coincide).
#[derive(Clone)]
pub struct Attention {
    q: Linear,
    k: Linear,
    v: Linear,
    out: Linear,
    heads: usize,
}

impl Attention {
    pub fn new(p: &ParamPath, dim: usize, ctx_dim: usize, heads: usize) -> Result<Self> {
        if dim % heads != 0 {
            return Err(invalid!("attention width {dim} not divisible by {heads} heads"));
        }
        Ok(Self {
            q: Linear::new(&p.pp("q"), dim, dim)?,
            k: Linear::new(&p.pp("k"), ctx_dim, dim)?,
            v: Linear::new(&p.pp("v"), ctx_dim, dim)?,
            out: Linear::new(&p.pp("out"), dim, dim)?,
            heads,
        })
    }

    fn split_heads(&self, t: &Tensor) -> Result<Tensor> {
        let (b, l, d) = t.dims3()?;
        Ok(t.reshape((b, l, self.heads, d / self.heads))?.transpose(1, 2)?.contiguous()?)
    }

    pub fn forward(&self, x: &Tensor, ctx: &Tensor) -> Result<Tensor> {
        let (b, l, d) = x.dims3()?;
        let q = self.split_heads(&self.q.forward(x)?)?;
        let k = self.split_heads(&self.k.forward(ctx)?)?;
        let v = self.split_heads(&self.v.forward(ctx)?)?;
        let scale = 1.0 / ((d / self.heads) as f64).sqrt();
        let scores = (q.matmul(&k.transpose(2, 3)?.contiguous()?)? * scale)?;
        let attn = softmax_last_dim(&scores)?;
        let y = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, l, d))?;
        self.out.forward(&y)
    }
}

/// `B x C x H x W -> B x (C*r*r) x H/r x W/r` without loss of information.
pub fn pixel_unshuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % r != 0 || w % r != 0 {
        return Err(invalid!("cannot unshuffle {h}x{w} by {r}"));
    }
    Ok(x
        .reshape(&[b, c, h / r, r, w / r, r][..])?
        .permute(vec![0, 1, 3, 5, 2, 4])?
        .contiguous()?
        .reshape((b, c * r * r, h / r, w / r))?)
}

/// Inverse of [`pixel_unshuffle`].
pub fn pixel_shuffle(x: &Tensor, r: usize) -> Result<Tensor> {
    let (b, crr, h, w) = x.dims4()?;
    if crr % (r * r) != 0 {
        return Err(invalid!("cannot shuffle {crr} channels by {r}"));
    }
    let c = crr / (r * r);
    Ok(x
        .reshape(&[b, c, r, r, h, w][..])?
        .permute(vec![0, 1, 4, 2, 5, 3])?
        .contiguous()?
        .reshape((b, c, h * r, w * r))?)
}

pub fn mse(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    Ok((a - b)?.sqr()?.mean_all()?)
}

/// Adam with bias correction; moments live in plain vectors so they can be checkpointed.
#[derive(Debug, Clone)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
}

impl Default for Adam {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8, step: 0, moments: BTreeMap::new() }
    }
}

impl Adam {
    /// Applies one update to every parameter that received a gradient. Gradients are
    /// rescaled so their global L2 norm is at most `clip` (when positive).
    /// Returns the pre-clip gradient norm.
    pub fn update(&mut self, params: &[(String, Var)], grads: &candle_core::backprop::GradStore, lr: f64, clip: f64) -> Result<f64> {
        self.step += 1;
        let mut flat: Vec<(usize, Vec<f32>)> = Vec::new();
        let mut sq = 0.0f64;
        for (i, (_, var)) in params.iter().enumerate() {
            if let Some(g) = grads.get(var.as_tensor()) {
                let g: Vec<f32> = g.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
                sq += g.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>();
                flat.push((i, g));
            }
        }
        let norm = sq.sqrt();
        if !norm.is_finite() {
            return Ok(norm);
        }
        let factor = if clip > 0.0 && norm > clip { (clip / norm) as f32 } else { 1.0 };
        let bc1 = 1.0 - self.beta1.powi(self.step as i32);
        let bc2 = 1.0 - self.beta2.powi(self.step as i32);
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let step_size = (lr / bc1) as f32;
        let bc2_sqrt = bc2.sqrt() as f32;
        let eps = self.eps as f32;
        for (i, g) in flat {
            let (name, var) = &params[i];
            let mut p: Vec<f32> = var.as_tensor().flatten_all()?.to_vec1()?;
            let (m, v) = self.moments.entry(name.clone()).or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            for j in 0..p.len() {
                let gj = g[j] * factor;
                m[j] = b1 * m[j] + (1.0 - b1) * gj;
                v[j] = b2 * v[j] + (1.0 - b2) * gj * gj;
                p[j] -= step_size * m[j] / (v[j].sqrt() / bc2_sqrt + eps);
            }
            var.set(&Tensor::from_vec(p, var.shape(), var.device())?)?;
        }
        Ok(norm)
    }

    pub fn moments(&self) -> &BTreeMap<String, (Vec<f32>, Vec<f32>)> {
        &self.moments
    }

    pub fn set_moments(&mut self, moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>) {
        self.moments = moments;
    }
}
