//! Pixel-space transforms: dense flow warping, per-pixel color affine and their composition.
//!
//! A [`FlowField`] holds *absolute* sampling positions in normalized coordinates:
//! `-1` addresses the first row/column and `+1` the last. Fractional positions are
//! read with bilinear interpolation and positions outside the image are clamped to
//! the border. Every operation has a matching `*_backward` that returns analytic
//! gradients, which is what the training graph uses through [`warp_tensor`].

use candle_core::{CpuStorage, CustomOp2, DType, Layout, Shape, Tensor, WithDType};
use num_traits::Float;

use crate::error::{invalid, Result};
use crate::image::ImageTensor;

/// Maps pixel index `i` of an axis with `n` samples to normalized `[-1, 1]`.
/// A single-sample axis maps its only index to `-1`.
pub fn normalize(i: usize, n: usize) -> f64 {
    if n <= 1 {
        -1.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Per-pixel `(row, col)` sampling positions into a reference image.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    height: usize,
    width: usize,
    /// Interleaved `(row, col)` pairs, row-major over pixels.
    coords: Vec<f64>,
}

impl FlowField {
    pub fn new(height: usize, width: usize, coords: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("flow dimensions must be positive, got {height}x{width}"));
        }
        if coords.len() != height * width * 2 {
            return Err(invalid!("flow buffer has {} values, expected {}", coords.len(), height * width * 2));
        }
        Ok(Self { height, width, coords })
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn coords_mut(&mut self) -> &mut [f64] {
        &mut self.coords
    }

    /// `(row, col)` at pixel `(h, w)`.
    pub fn at(&self, h: usize, w: usize) -> (f64, f64) {
        let i = (h * self.width + w) * 2;
        (self.coords[i], self.coords[i + 1])
    }

    fn planes(&self) -> (Vec<f64>, Vec<f64>) {
        self.coords.chunks(2).map(|rc| (rc[0], rc[1])).unzip()
    }

    /// Builds a flow from a 2x3 matrix acting on normalized `(row, col)` output positions.
    pub fn from_affine(height: usize, width: usize, m: &[[f64; 3]; 2]) -> Result<Self> {
        let mut coords = Vec::with_capacity(height * width * 2);
        for h in 0..height {
            let r = normalize(h, height);
            for w in 0..width {
                let c = normalize(w, width);
                coords.push(m[0][0] * r + m[0][1] * c + m[0][2]);
                coords.push(m[1][0] * r + m[1][1] * c + m[1][2]);
            }
        }
        Self::new(height, width, coords)
    }
}

/// Per-pixel `(scale, bias)` shared across channels.
#[derive(Debug, Clone, PartialEq)]
pub struct ColorAffine {
    height: usize,
    width: usize,
    params: Vec<f64>,
}

impl ColorAffine {
    pub fn new(height: usize, width: usize, params: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(invalid!("affine dimensions must be positive"));
        }
        if params.len() != height * width * 2 {
            return Err(invalid!("affine buffer has {} values, expected {}", params.len(), height * width * 2));
        }
        Ok(Self { height, width, params })
    }

    pub fn identity(height: usize, width: usize) -> Result<Self> {
        Self::uniform(height, width, 1.0, 0.0)
    }

    pub fn uniform(height: usize, width: usize, scale: f64, bias: f64) -> Result<Self> {
        Self::new(height, width, [scale, bias].repeat(height * width))
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn at(&self, h: usize, w: usize) -> (f64, f64) {
        let i = (h * self.width + w) * 2;
        (self.params[i], self.params[i + 1])
    }
}

/// The explicit representation of a source-domain transform: flow then color affine.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformPack {
    pub flow: FlowField,
    pub affine: ColorAffine,
}

impl TransformPack {
    pub fn new(flow: FlowField, affine: ColorAffine) -> Result<Self> {
        if (flow.height, flow.width) != (affine.height, affine.width) {
            return Err(invalid!(
                "flow is {}x{} but affine is {}x{}",
                flow.height,
                flow.width,
                affine.height,
                affine.width
            ));
        }
        Ok(Self { flow, affine })
    }

    pub fn identity(height: usize, width: usize) -> Result<Self> {
        Self::new(identity_flow(height, width)?, ColorAffine::identity(height, width)?)
    }

    pub fn height(&self) -> usize {
        self.flow.height
    }

    pub fn width(&self) -> usize {
        self.flow.width
    }

    /// Serializes to four planes: flow-row, flow-col, scale, bias (each `H x W`).
    pub fn to_planes(&self) -> Vec<f64> {
        let hw = self.height() * self.width();
        let mut out = vec![0.0; 4 * hw];
        for p in 0..hw {
            out[p] = self.flow.coords[2 * p];
            out[hw + p] = self.flow.coords[2 * p + 1];
            out[2 * hw + p] = self.affine.params[2 * p];
            out[3 * hw + p] = self.affine.params[2 * p + 1];
        }
        out
    }

    pub fn from_planes(height: usize, width: usize, planes: &[f64]) -> Result<Self> {
        let hw = height * width;
        if planes.len() != 4 * hw {
            return Err(invalid!("pack planes have {} values, expected {}", planes.len(), 4 * hw));
        }
        let mut coords = vec![0.0; 2 * hw];
        let mut params = vec![0.0; 2 * hw];
        for p in 0..hw {
            coords[2 * p] = planes[p];
            coords[2 * p + 1] = planes[hw + p];
            params[2 * p] = planes[2 * hw + p];
            params[2 * p + 1] = planes[3 * hw + p];
        }
        Self::new(FlowField::new(height, width, coords)?, ColorAffine::new(height, width, params)?)
    }

    /// Splits a `B x 4 x H x W` tensor into packs.
    pub fn batch_from_tensor(t: &Tensor) -> Result<Vec<TransformPack>> {
        let (b, c, h, w) = t.dims4()?;
        if c != 4 {
            return Err(invalid!("pack tensor must have 4 planes, got {c}"));
        }
        let flat: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
        let per = 4 * h * w;
        (0..b)
            .map(|i| {
                let planes: Vec<f64> = flat[i * per..(i + 1) * per].iter().map(|&v| v as f64).collect();
                TransformPack::from_planes(h, w, &planes)
            })
            .collect()
    }
}

pub fn identity_flow(height: usize, width: usize) -> Result<FlowField> {
    if height == 0 || width == 0 {
        return Err(invalid!("flow dimensions must be positive, got {height}x{width}"));
    }
    FlowField::from_affine(height, width, &[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])
}

/// Flow that mirrors an image left-right: the identity grid with the column negated.
pub fn hflip_flow(height: usize, width: usize) -> Result<FlowField> {
    if height == 0 || width == 0 {
        return Err(invalid!("flow dimensions must be positive, got {height}x{width}"));
    }
    let mut flow = identity_flow(height, width)?;
    for rc in flow.coords.chunks_mut(2) {
        rc[1] = -rc[1];
    }
    Ok(flow)
}

fn check_flow(reference: &ImageTensor, flow: &FlowField) -> Result<()> {
    if (reference.height(), reference.width()) != (flow.height, flow.width) {
        return Err(invalid!(
            "apply_flow: image is {}x{} but flow is {}x{}",
            reference.height(),
            reference.width(),
            flow.height,
            flow.width
        ));
    }
    if flow.coords.iter().any(|v| !v.is_finite()) {
        return Err(invalid!("apply_flow: flow contains non-finite coordinates"));
    }
    Ok(())
}

fn check_affine(img: &ImageTensor, aff: &ColorAffine) -> Result<()> {
    if (img.height(), img.width()) != (aff.height, aff.width) {
        return Err(invalid!(
            "apply_color_affine: image is {}x{} but affine is {}x{}",
            img.height(),
            img.width(),
            aff.height,
            aff.width
        ));
    }
    Ok(())
}

/// Samples `reference` at every flow position (bilinear, border-clamped).
pub fn apply_flow(reference: &ImageTensor, flow: &FlowField) -> Result<ImageTensor> {
    check_flow(reference, flow)?;
    let (h, w, c) = reference.shape();
    let src = reference.to_planar();
    let (rows, cols) = flow.planes();
    let mut out = vec![0.0; src.len()];
    kernel::warp_forward(h, w, c, &src, &rows, &cols, &mut out);
    ImageTensor::from_planar(h, w, c, &out)
}

/// Gradients of a scalar loss through [`apply_flow`], given `d loss / d output`.
/// Returns `(d loss / d reference, d loss / d flow)`.
pub fn apply_flow_backward(
    reference: &ImageTensor,
    flow: &FlowField,
    grad_out: &ImageTensor,
) -> Result<(ImageTensor, FlowField)> {
    check_flow(reference, flow)?;
    reference.check_same_shape(grad_out, "apply_flow_backward")?;
    let (h, w, c) = reference.shape();
    let src = reference.to_planar();
    let (rows, cols) = flow.planes();
    let g = grad_out.to_planar();
    let mut g_src = vec![0.0; src.len()];
    let mut g_rows = vec![0.0; h * w];
    let mut g_cols = vec![0.0; h * w];
    kernel::warp_backward(h, w, c, &src, &rows, &cols, &g, &mut g_src, &mut g_rows, &mut g_cols);
    let coords = g_rows.iter().zip(&g_cols).flat_map(|(&r, &c)| [r, c]).collect();
    Ok((ImageTensor::from_planar(h, w, c, &g_src)?, FlowField::new(h, w, coords)?))
}

/// `out[h, w, c] = scale[h, w] * img[h, w, c] + bias[h, w]`.
pub fn apply_color_affine(img: &ImageTensor, aff: &ColorAffine) -> Result<ImageTensor> {
    check_affine(img, aff)?;
    let c = img.channels();
    let data = img
        .data()
        .chunks(c)
        .zip(aff.params.chunks(2))
        .flat_map(|(px, sb)| px.iter().map(move |&v| sb[0] * v + sb[1]))
        .collect();
    ImageTensor::new(img.height(), img.width(), c, data)
}

/// Returns `(d loss / d img, d loss / d affine)` for [`apply_color_affine`].
pub fn apply_color_affine_backward(
    img: &ImageTensor,
    aff: &ColorAffine,
    grad_out: &ImageTensor,
) -> Result<(ImageTensor, ColorAffine)> {
    check_affine(img, aff)?;
    img.check_same_shape(grad_out, "apply_color_affine_backward")?;
    let c = img.channels();
    let mut g_img = Vec::with_capacity(img.data().len());
    let mut g_aff = Vec::with_capacity(aff.params.len());
    for ((px, g), sb) in img.data().chunks(c).zip(grad_out.data().chunks(c)).zip(aff.params.chunks(2)) {
        g_img.extend(g.iter().map(|&gv| gv * sb[0]));
        g_aff.push(px.iter().zip(g).map(|(v, gv)| v * gv).sum());
        g_aff.push(g.iter().sum());
    }
    Ok((
        ImageTensor::new(img.height(), img.width(), c, g_img)?,
        ColorAffine::new(img.height(), img.width(), g_aff)?,
    ))
}

/// Warps by the pack's flow, then applies its color affine.
pub fn compose_transform(img: &ImageTensor, pack: &TransformPack) -> Result<ImageTensor> {
    apply_color_affine(&apply_flow(img, &pack.flow)?, &pack.affine)
}

/// Gradients through [`compose_transform`]: `(d img, d pack)`.
pub fn compose_transform_backward(
    img: &ImageTensor,
    pack: &TransformPack,
    grad_out: &ImageTensor,
) -> Result<(ImageTensor, TransformPack)> {
    let warped = apply_flow(img, &pack.flow)?;
    let (g_warped, g_aff) = apply_color_affine_backward(&warped, &pack.affine, grad_out)?;
    let (g_img, g_flow) = apply_flow_backward(img, &pack.flow, &g_warped)?;
    Ok((g_img, TransformPack::new(g_flow, g_aff)?))
}

/// Planar (`C x H x W`) bilinear kernels shared by the f64 API and the f32 training op.
pub(crate) mod kernel {
    use super::Float;

    /// Resolves a normalized coordinate on an axis of `n` samples into the two
    /// neighbouring indices, the interpolation weight of the upper one, and
    /// `d position / d coordinate` (zero when the coordinate is clamped).
    #[inline]
    pub fn axis<T: Float>(u: T, n: usize) -> (usize, usize, T, T) {
        if n == 1 {
            return (0, 0, T::zero(), T::zero());
        }
        let one = T::one();
        let two = one + one;
        let last = T::from(n - 1).unwrap();
        let half_span = last / two;
        let mut p = (u + one) * half_span;
        let mut slope = half_span;
        if p <= T::zero() {
            if p < T::zero() {
                slope = T::zero();
            }
            p = T::zero();
        } else if p >= last {
            if p > last {
                slope = T::zero();
            }
            p = last;
        }
        // Grid positions computed through normalize/denormalize carry a few ulps of
        // error; snap them so that on-grid sampling is exact.
        let r = p.round();
        let tol = T::epsilon() * T::from(4 * n).unwrap();
        if (p - r).abs() <= tol {
            p = r;
        }
        let i0 = p.floor().to_usize().unwrap().min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        (i0, i1, p - T::from(i0).unwrap(), slope)
    }

    pub fn warp_forward<T: Float>(h: usize, w: usize, c: usize, src: &[T], rows: &[T], cols: &[T], out: &mut [T]) {
        let hw = h * w;
        let one = T::one();
        for p in 0..hw {
            let (r0, r1, wy, _) = axis(rows[p], h);
            let (c0, c1, wx, _) = axis(cols[p], w);
            let (w00, w01, w10, w11) = ((one - wy) * (one - wx), (one - wy) * wx, wy * (one - wx), wy * wx);
            for ch in 0..c {
                let plane = &src[ch * hw..(ch + 1) * hw];
                out[ch * hw + p] = w00 * plane[r0 * w + c0]
                    + w01 * plane[r0 * w + c1]
                    + w10 * plane[r1 * w + c0]
                    + w11 * plane[r1 * w + c1];
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    pub fn warp_backward<T: Float>(
        h: usize,
        w: usize,
        c: usize,
        src: &[T],
        rows: &[T],
        cols: &[T],
        grad_out: &[T],
        grad_src: &mut [T],
        grad_rows: &mut [T],
        grad_cols: &mut [T],
    ) {
        let hw = h * w;
        let one = T::one();
        for p in 0..hw {
            let (r0, r1, wy, sy) = axis(rows[p], h);
            let (c0, c1, wx, sx) = axis(cols[p], w);
            let (w00, w01, w10, w11) = ((one - wy) * (one - wx), (one - wy) * wx, wy * (one - wx), wy * wx);
            let mut gy = T::zero();
            let mut gx = T::zero();
            for ch in 0..c {
                let g = grad_out[ch * hw + p];
                let base = ch * hw;
                let (v00, v01, v10, v11) = (
                    src[base + r0 * w + c0],
                    src[base + r0 * w + c1],
                    src[base + r1 * w + c0],
                    src[base + r1 * w + c1],
                );
                grad_src[base + r0 * w + c0] = grad_src[base + r0 * w + c0] + g * w00;
                grad_src[base + r0 * w + c1] = grad_src[base + r0 * w + c1] + g * w01;
                grad_src[base + r1 * w + c0] = grad_src[base + r1 * w + c0] + g * w10;
                grad_src[base + r1 * w + c1] = grad_src[base + r1 * w + c1] + g * w11;
                gy = gy + g * ((one - wx) * (v10 - v00) + wx * (v11 - v01));
                gx = gx + g * ((one - wy) * (v01 - v00) + wy * (v11 - v10));
            }
            grad_rows[p] = grad_rows[p] + gy * sy;
            grad_cols[p] = grad_cols[p] + gx * sx;
        }
    }
}

/// Bilinear warp of a `B x C x H x W` batch by a `B x 2 x H x W` flow (row plane, col plane).
struct WarpOp;

fn contiguous_slice<'a, T: WithDType>(s: &'a [T], l: &Layout) -> candle_core::Result<&'a [T]> {
    match l.contiguous_offsets() {
        Some((a, b)) => Ok(&s[a..b]),
        None => candle_core::bail!("warp op expects contiguous inputs"),
    }
}

fn warp_fwd_typed<T: Float + WithDType>(
    src: &[T],
    ls: &Layout,
    flow: &[T],
    lf: &Layout,
) -> candle_core::Result<Vec<T>> {
    let (b, c, h, w) = ls.shape().dims4()?;
    let (fb, fc, fh, fw) = lf.shape().dims4()?;
    if fb != b || fc != 2 || fh != h || fw != w {
        candle_core::bail!("warp op: image {:?} incompatible with flow {:?}", ls.shape(), lf.shape());
    }
    let src = contiguous_slice(src, ls)?;
    let flow = contiguous_slice(flow, lf)?;
    let (hw, chw) = (h * w, c * h * w);
    let mut out = vec![T::zero(); b * chw];
    for i in 0..b {
        let f = &flow[i * 2 * hw..(i + 1) * 2 * hw];
        kernel::warp_forward(h, w, c, &src[i * chw..(i + 1) * chw], &f[..hw], &f[hw..], &mut out[i * chw..(i + 1) * chw]);
    }
    Ok(out)
}

fn warp_bwd_typed<T: Float + WithDType>(img: &Tensor, flow: &Tensor, grad: &Tensor) -> candle_core::Result<(Tensor, Tensor)> {
    let (b, c, h, w) = img.dims4()?;
    let src: Vec<T> = img.flatten_all()?.to_vec1()?;
    let fl: Vec<T> = flow.flatten_all()?.to_vec1()?;
    let g: Vec<T> = grad.flatten_all()?.to_vec1()?;
    let (hw, chw) = (h * w, c * h * w);
    let mut g_src = vec![T::zero(); b * chw];
    let mut g_flow = vec![T::zero(); b * 2 * hw];
    for i in 0..b {
        let f = &fl[i * 2 * hw..(i + 1) * 2 * hw];
        let (g_rows, g_cols) = g_flow[i * 2 * hw..(i + 1) * 2 * hw].split_at_mut(hw);
        kernel::warp_backward(
            h,
            w,
            c,
            &src[i * chw..(i + 1) * chw],
            &f[..hw],
            &f[hw..],
            &g[i * chw..(i + 1) * chw],
            &mut g_src[i * chw..(i + 1) * chw],
            g_rows,
            g_cols,
        );
    }
    Ok((
        Tensor::from_vec(g_src, (b, c, h, w), img.device())?,
        Tensor::from_vec(g_flow, (b, 2, h, w), img.device())?,
    ))
}

impl CustomOp2 for WarpOp {
    fn name(&self) -> &'static str {
        "bilinear-warp"
    }

    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match (s1, s2) {
            (CpuStorage::F32(a), CpuStorage::F32(f)) => CpuStorage::F32(warp_fwd_typed(a, l1, f, l2)?),
            (CpuStorage::F64(a), CpuStorage::F64(f)) => CpuStorage::F64(warp_fwd_typed(a, l1, f, l2)?),
            _ => candle_core::bail!("warp op supports matching f32 or f64 inputs"),
        };
        Ok((out, l1.shape().clone()))
    }

    fn bwd(&self, img: &Tensor, flow: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let (gi, gf) = match img.dtype() {
            DType::F32 => warp_bwd_typed::<f32>(img, flow, grad)?,
            DType::F64 => warp_bwd_typed::<f64>(img, flow, grad)?,
            dt => candle_core::bail!("warp op backward does not support {dt:?}"),
        };
        Ok((Some(gi), Some(gf)))
    }
}

/// Differentiable batched warp: `img` is `B x C x H x W`, `flow` is `B x 2 x H x W`.
pub fn warp_tensor(img: &Tensor, flow: &Tensor) -> Result<Tensor> {
    Ok(img.contiguous()?.apply_op2(&flow.contiguous()?, WarpOp)?)
}

/// Differentiable batched [`compose_transform`] on a `B x 4 x H x W` pack tensor.
pub fn compose_tensor(img: &Tensor, pack: &Tensor) -> Result<Tensor> {
    let warped = warp_tensor(img, &pack.narrow(1, 0, 2)?)?;
    let scale = pack.narrow(1, 2, 1)?;
    let bias = pack.narrow(1, 3, 1)?;
    Ok(warped.broadcast_mul(&scale)?.broadcast_add(&bias)?)
}

/// `B x 2 x H x W` identity grid (row plane, col plane).
pub fn identity_grid_tensor(batch: usize, height: usize, width: usize, device: &candle_core::Device) -> Result<Tensor> {
    let mut buf = Vec::with_capacity(2 * height * width);
    for h in 0..height {
        for _ in 0..width {
            buf.push(normalize(h, height) as f32);
        }
    }
    for _ in 0..height {
        for w in 0..width {
            buf.push(normalize(w, width) as f32);
        }
    }
    let grid = Tensor::from_vec(buf, (1, 2, height, width), device)?;
    Ok(grid.repeat((batch, 1, 1, 1))?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, c: usize, rng: &mut ChaCha8Rng) -> ImageTensor {
        ImageTensor::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn identity_flow_2x2() {
        let f = identity_flow(2, 2).unwrap();
        assert_eq!(f.coords(), &[-1.0, -1.0, -1.0, 1.0, 1.0, -1.0, 1.0, 1.0]);
        assert_eq!(identity_flow(1, 1).unwrap().coords(), &[-1.0, -1.0]);
        assert!(identity_flow(0, 3).is_err());
        assert!(hflip_flow(3, 0).is_err());
    }

    #[test]
    fn identity_warp_is_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(h, w) in &[(1, 1), (3, 7), (16, 16), (64, 48)] {
            let img = random_image(h, w, 3, &mut rng);
            assert_eq!(apply_flow(&img, &identity_flow(h, w).unwrap()).unwrap(), img);
        }
    }

    #[test]
    fn hflip_mirrors_and_is_an_involution() {
        let img = ImageTensor::new(1, 2, 1, vec![0.25, -0.5]).unwrap();
        let flipped = apply_flow(&img, &hflip_flow(1, 2).unwrap()).unwrap();
        assert_eq!(flipped.data(), &[-0.5, 0.25]);

        let board = ImageTensor::from_fn(4, 4, 1, |h, w, _| if (h + w) % 2 == 0 { 1.0 } else { -1.0 }).unwrap();
        let mirrored = apply_flow(&board, &hflip_flow(4, 4).unwrap()).unwrap();
        for h in 0..4 {
            for w in 0..4 {
                assert_eq!(mirrored.get(h, w, 0), board.get(h, 3 - w, 0));
            }
        }
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let img = random_image(9, 13, 3, &mut rng);
        let flip = hflip_flow(9, 13).unwrap();
        let twice = apply_flow(&apply_flow(&img, &flip).unwrap(), &flip).unwrap();
        assert_eq!(twice, img);
        let id = identity_flow(9, 13).unwrap();
        for h in 0..9 {
            for w in 0..13 {
                assert_eq!(flip.at(h, w), (id.at(h, w).0, -id.at(h, w).1));
            }
        }
    }

    #[test]
    fn center_sample_of_checker_is_half() {
        let img = ImageTensor::new(2, 2, 1, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let flow = FlowField::new(2, 2, vec![0.0; 8]).unwrap();
        let out = apply_flow(&img, &flow).unwrap();
        assert!(out.data().iter().all(|&v| (v - 0.5).abs() < 1e-15));
    }

    #[test]
    fn out_of_range_clamps_to_border() {
        let img = ImageTensor::new(1, 3, 1, vec![0.1, 0.2, 0.3]).unwrap();
        let flow = FlowField::new(1, 3, vec![0.0, -5.0, 0.0, 7.0, 3.0, 0.0]).unwrap();
        let out = apply_flow(&img, &flow).unwrap();
        assert_eq!(out.data(), &[0.1, 0.3, 0.2]);
    }

    #[test]
    fn flow_errors() {
        let img = ImageTensor::filled(2, 2, 1, 0.0).unwrap();
        assert!(apply_flow(&img, &identity_flow(2, 3).unwrap()).is_err());
        let bad = FlowField::new(2, 2, vec![0.0, f64::NAN, 0.0, 0.0, 0.0, 0.0, 0.0, 0.0]).unwrap();
        assert!(apply_flow(&img, &bad).is_err());
        assert!(apply_color_affine(&img, &ColorAffine::identity(3, 2).unwrap()).is_err());
        assert!(TransformPack::new(identity_flow(2, 2).unwrap(), ColorAffine::identity(2, 3).unwrap()).is_err());
    }

    #[test]
    fn color_affine_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = random_image(4, 5, 3, &mut rng);
        assert_eq!(apply_color_affine(&img, &ColorAffine::identity(4, 5).unwrap()).unwrap(), img);
        let flat = apply_color_affine(&img, &ColorAffine::uniform(4, 5, 0.0, 0.3).unwrap()).unwrap();
        assert!(flat.data().iter().all(|&v| v == 0.3));
        let px = ImageTensor::new(1, 1, 1, vec![0.5]).unwrap();
        let out = apply_color_affine(&px, &ColorAffine::uniform(1, 1, 2.0, -0.25).unwrap()).unwrap();
        assert_eq!(out.data(), &[0.75]);
    }

    #[test]
    fn compose_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let img = random_image(6, 6, 3, &mut rng);
        assert_eq!(compose_transform(&img, &TransformPack::identity(6, 6).unwrap()).unwrap(), img);

        let pack = TransformPack::new(hflip_flow(6, 6).unwrap(), ColorAffine::uniform(6, 6, 0.5, 0.0).unwrap()).unwrap();
        let out = compose_transform(&img, &pack).unwrap();
        for h in 0..6 {
            for w in 0..6 {
                for c in 0..3 {
                    assert_eq!(out.get(h, w, c), 0.5 * img.get(h, 5 - w, c));
                }
            }
        }

        let coords = (0..72).map(|_| rng.random_range(-1.2..1.2)).collect();
        let params = (0..72).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pack = TransformPack::new(FlowField::new(6, 6, coords).unwrap(), ColorAffine::new(6, 6, params).unwrap()).unwrap();
        let seq = apply_color_affine(&apply_flow(&img, &pack.flow).unwrap(), &pack.affine).unwrap();
        assert_eq!(compose_transform(&img, &pack).unwrap(), seq);
    }

    #[test]
    fn planes_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let coords = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let params = (0..24).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pack = TransformPack::new(FlowField::new(3, 4, coords).unwrap(), ColorAffine::new(3, 4, params).unwrap()).unwrap();
        let planes = pack.to_planes();
        assert_eq!(planes[0], pack.flow.at(0, 0).0);
        assert_eq!(planes[12], pack.flow.at(0, 0).1);
        assert_eq!(planes[24 + 5], pack.affine.at(1, 1).0);
        assert_eq!(TransformPack::from_planes(3, 4, &planes).unwrap(), pack);
    }

    #[test]
    fn tensor_op_matches_f64_kernel_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let dev = Device::Cpu;
        let img = random_image(5, 7, 3, &mut rng);
        let coords: Vec<f64> = (0..70).map(|_| rng.random_range(-1.1..1.1)).collect();
        let flow = FlowField::new(5, 7, coords).unwrap();
        let reference = apply_flow(&img, &flow).unwrap();

        let img_t = Tensor::from_vec(img.to_planar(), (1, 3, 5, 7), &dev).unwrap();
        let (rows, cols) = flow.planes();
        let flow_t = Tensor::from_vec([rows, cols].concat(), (1, 2, 5, 7), &dev).unwrap();
        let img_v = Var::from_tensor(&img_t).unwrap();
        let flow_v = Var::from_tensor(&flow_t).unwrap();
        let out = warp_tensor(img_v.as_tensor(), flow_v.as_tensor()).unwrap();
        let got: Vec<f64> = out.flatten_all().unwrap().to_vec1().unwrap();
        for (a, b) in got.iter().zip(reference.to_planar()) {
            assert!((a - b).abs() < 1e-14);
        }

        // loss = sum(out * weights) so that d loss / d out = weights
        let weights = random_image(5, 7, 3, &mut rng);
        let w_t = Tensor::from_vec(weights.to_planar(), (1, 3, 5, 7), &dev).unwrap();
        let grads = out.mul(&w_t).unwrap().sum_all().unwrap().backward().unwrap();
        let (g_img, g_flow) = apply_flow_backward(&img, &flow, &weights).unwrap();
        let gi: Vec<f64> = grads.get(&img_v).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        for (a, b) in gi.iter().zip(g_img.to_planar()) {
            assert!((a - b).abs() < 1e-14);
        }
        let gf: Vec<f64> = grads.get(&flow_v).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let (gr, gc) = g_flow.planes();
        for (a, b) in gf.iter().zip(gr.iter().chain(&gc)) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn compose_tensor_matches_pure() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let img = random_image(4, 4, 1, &mut rng);
        let planes: Vec<f64> = (0..64).map(|_| rng.random_range(-1.0..1.0)).collect();
        let pack = TransformPack::from_planes(4, 4, &planes).unwrap();
        let dev = Device::Cpu;
        let img_t = Tensor::from_vec(img.to_planar(), (1, 1, 4, 4), &dev).unwrap();
        let pack_t = Tensor::from_vec(planes, (1, 4, 4, 4), &dev).unwrap();
        let got: Vec<f64> = compose_tensor(&img_t, &pack_t).unwrap().flatten_all().unwrap().to_vec1().unwrap();
        let want = compose_transform(&img, &pack).unwrap();
        for (a, b) in got.iter().zip(want.data()) {
            assert!((a - b).abs() < 1e-14);
        }
        let back = TransformPack::batch_from_tensor(&pack_t.to_dtype(DType::F32).unwrap()).unwrap();
        assert_eq!(back.len(), 1);
        assert!((back[0].flow.at(1, 2).0 - pack.flow.at(1, 2).0).abs() < 1e-6);
    }

    #[test]
    fn identity_grid_tensor_matches_identity_flow() {
        let g = identity_grid_tensor(2, 3, 5, &Device::Cpu).unwrap();
        assert_eq!(g.dims(), &[2, 2, 3, 5]);
        let v: Vec<f32> = g.flatten_all().unwrap().to_vec1().unwrap();
        let id = identity_flow(3, 5).unwrap();
        assert_eq!(v[7], id.at(1, 2).0 as f32);
        assert_eq!(v[15 + 7], id.at(1, 2).1 as f32);
    }

    proptest! {
        #[test]
        fn affine_range_preservation(
            vals in prop::collection::vec(-1.0f64..=1.0, 16),
            scales in prop::collection::vec(0.0f64..=1.0, 4),
            biases in prop::collection::vec(-0.05f64..=0.05, 4),
        ) {
            let img = ImageTensor::new(2, 2, 1, vals[..4].to_vec()).unwrap();
            let params = scales.iter().zip(&biases).flat_map(|(&s, &b)| [s, b]).collect();
            let out = apply_color_affine(&img, &ColorAffine::new(2, 2, params).unwrap()).unwrap();
            prop_assert!(out.data().iter().all(|&v| (-1.05..=1.05).contains(&v)));
        }

        #[test]
        fn warp_stays_within_reference_range(
            vals in prop::collection::vec(-1.0f64..=1.0, 9),
            coords in prop::collection::vec(-3.0f64..=3.0, 18),
        ) {
            let img = ImageTensor::new(3, 3, 1, vals.clone()).unwrap();
            let out = apply_flow(&img, &FlowField::new(3, 3, coords).unwrap()).unwrap();
            let lo = vals.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            prop_assert!(out.data().iter().all(|&v| v >= lo - 1e-12 && v <= hi + 1e-12));
        }
    }
}
