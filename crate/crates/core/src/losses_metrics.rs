//! Spectral training loss and evaluation metrics.

use std::path::Path;

use candle_core::{Device, Tensor};
use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::ImageTensor;

/// Value reported by [`psnr`] for identical images.
pub const PSNR_CAP: f64 = 99.0;
pub const DEFAULT_TAU: f64 = 0.1;

fn fft2_orthonormal(plane: &[f64], h: usize, w: usize, planner: &mut FftPlanner<f64>) -> Vec<Complex<f64>> {
    let mut buf: Vec<Complex<f64>> = plane.iter().map(|&v| Complex::new(v, 0.0)).collect();
    let row_fft = planner.plan_fft_forward(w);
    for row in buf.chunks_mut(w) {
        row_fft.process(row);
    }
    let col_fft = planner.plan_fft_forward(h);
    let mut col = vec![Complex::new(0.0, 0.0); h];
    for x in 0..w {
        for y in 0..h {
            col[y] = buf[y * w + x];
        }
        col_fft.process(&mut col);
        for y in 0..h {
            buf[y * w + x] = col[y];
        }
    }
    let s = 1.0 / ((h * w) as f64).sqrt();
    buf.iter_mut().for_each(|v| *v *= s);
    buf
}

/// Mean squared spectral difference under an orthonormal 2D DFT per channel. With
/// `focal` each bin is weighted by `|delta| / max|delta|` over the image.
pub fn frequency_loss(a: &ImageTensor, b: &ImageTensor, focal: bool) -> Result<f64> {
    a.check_same_shape(b, "frequency_loss")?;
    let (h, w, c) = a.shape();
    let (pa, pb) = (a.to_planar(), b.to_planar());
    let mut planner = FftPlanner::new();
    let mut mags = Vec::with_capacity(h * w * c);
    for ch in 0..c {
        let diff: Vec<f64> = (0..h * w).map(|p| pa[ch * h * w + p] - pb[ch * h * w + p]).collect();
        mags.extend(fft2_orthonormal(&diff, h, w, &mut planner).iter().map(|z| z.norm_sqr()));
    }
    let n = mags.len() as f64;
    if !focal {
        return Ok(mags.iter().sum::<f64>() / n);
    }
    let max = mags.iter().cloned().fold(0.0, f64::max).sqrt();
    if max == 0.0 {
        return Ok(0.0);
    }
    Ok(mags.iter().map(|m| m.sqrt() / max * m).sum::<f64>() / n)
}

fn dft_mats(n: usize, device: &Device) -> Result<(Tensor, Tensor)> {
    let s = 1.0 / (n as f64).sqrt();
    let mut cos = Vec::with_capacity(n * n);
    let mut sin = Vec::with_capacity(n * n);
    for k in 0..n {
        for x in 0..n {
            let theta = 2.0 * std::f64::consts::PI * ((k * x) % n) as f64 / n as f64;
            cos.push((theta.cos() * s) as f32);
            sin.push((theta.sin() * s) as f32);
        }
    }
    Ok((Tensor::from_vec(cos, (n, n), device)?, Tensor::from_vec(sin, (n, n), device)?))
}

/// Differentiable batched counterpart of [`frequency_loss`] on `B x C x H x W` tensors.
/// In focal mode the maximum is taken per image.
pub fn frequency_loss_tensor(a: &Tensor, b: &Tensor, focal: bool) -> Result<Tensor> {
    let (bs, c, h, w) = a.dims4()?;
    if b.dims() != a.dims() {
        return Err(invalid!("frequency loss shapes differ: {:?} vs {:?}", a.dims(), b.dims()));
    }
    let (ch, sh) = dft_mats(h, a.device())?;
    let (cw, sw) = dft_mats(w, a.device())?;
    let d = (a - b)?;
    // F = (C - iS) D (C - iS) with symmetric C, S
    let dc = d.broadcast_matmul(&cw)?;
    let ds = d.broadcast_matmul(&sw)?;
    let re = (ch.broadcast_matmul(&dc)? - sh.broadcast_matmul(&ds)?)?;
    let im = (ch.broadcast_matmul(&ds)? + sh.broadcast_matmul(&dc)?)?;
    let power = (re.sqr()? + im.sqr()?)?;
    if !focal {
        return Ok(power.mean_all()?);
    }
    let mag = power.detach().sqrt()?;
    let max = mag.reshape((bs, c * h * w))?.max_keepdim(1)?.reshape((bs, 1, 1, 1))?;
    let weight = mag.broadcast_div(&(max + 1e-12)?)?;
    Ok((power * weight)?.mean_all()?)
}

pub fn mse(a: &ImageTensor, b: &ImageTensor) -> Result<f64> {
    a.check_same_shape(b, "mse")?;
    let n = a.data().len() as f64;
    Ok(a.data().iter().zip(b.data()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n)
}

/// `10 log10(peak^2 / mse)`, or [`PSNR_CAP`] when the images are identical.
pub fn psnr(a: &ImageTensor, b: &ImageTensor, peak: f64) -> Result<f64> {
    if peak <= 0.0 {
        return Err(invalid!("psnr peak must be positive, got {peak}"));
    }
    let e = mse(a, b)?;
    if e == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((10.0 * (peak * peak / e).log10()).min(PSNR_CAP))
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EditMask {
    pub height: usize,
    pub width: usize,
    pub bits: Vec<bool>,
}

impl EditMask {
    pub fn area(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }

    pub fn get(&self, h: usize, w: usize) -> bool {
        self.bits[h * self.width + w]
    }
}

/// Pixels where any channel of `y` differs from `x` by more than `tau`.
pub fn edit_mask(x: &ImageTensor, y: &ImageTensor, tau: f64) -> Result<EditMask> {
    x.check_same_shape(y, "edit_mask")?;
    let c = x.channels();
    let bits = x
        .data()
        .chunks(c)
        .zip(y.data().chunks(c))
        .map(|(a, b)| a.iter().zip(b).map(|(u, v)| (v - u).abs()).fold(0.0, f64::max) > tau)
        .collect();
    Ok(EditMask { height: x.height(), width: x.width(), bits })
}

fn union(masks: &[EditMask], what: &str) -> Result<Vec<bool>> {
    let first = masks.first().ok_or_else(|| invalid!("{what} mask list is empty"))?;
    let mut u = vec![false; first.bits.len()];
    for m in masks {
        if (m.height, m.width) != (first.height, first.width) {
            return Err(invalid!("{what} masks differ in shape"));
        }
        u.iter_mut().zip(&m.bits).for_each(|(a, &b)| *a |= b);
    }
    Ok(u)
}

/// IoU between the union of generated edit masks and the union of reference masks.
/// Higher is better; 1 when both unions are empty.
pub fn diou(gen_masks: &[EditMask], ref_masks: &[EditMask]) -> Result<f64> {
    let g = union(gen_masks, "generated")?;
    let r = union(ref_masks, "reference")?;
    if g.len() != r.len() {
        return Err(invalid!("generated and reference masks differ in shape"));
    }
    let inter = g.iter().zip(&r).filter(|(a, b)| **a && **b).count();
    let uni = g.iter().zip(&r).filter(|(a, b)| **a || **b).count();
    Ok(if uni == 0 { 1.0 } else { inter as f64 / uni as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureGaussian {
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl FeatureGaussian {
    /// Sample mean and unbiased covariance of per-image feature vectors (at least two).
    pub fn from_features(features: &[Vec<f64>]) -> Result<Self> {
        if features.len() < 2 {
            return Err(invalid!("need at least two feature vectors, got {}", features.len()));
        }
        let d = features[0].len();
        if d == 0 || features.iter().any(|f| f.len() != d) {
            return Err(invalid!("feature vectors must share a positive length"));
        }
        let n = features.len() as f64;
        let mut mean = DVector::zeros(d);
        for f in features {
            mean += DVector::from_column_slice(f);
        }
        mean /= n;
        let mut cov = DMatrix::zeros(d, d);
        for f in features {
            let c = DVector::from_column_slice(f) - &mean;
            cov += &c * c.transpose();
        }
        cov /= n - 1.0;
        Ok(Self { mean, cov })
    }
}

/// Default pluggable features: the grayscale image area-averaged down to 8x8.
pub fn pixel_features(img: &ImageTensor) -> Vec<f64> {
    const S: usize = 8;
    let (h, w) = (img.height(), img.width());
    let gray = img.gray();
    let mut out = vec![0.0; S * S];
    for by in 0..S {
        let (y0, y1) = (by * h / S, ((by + 1) * h / S).max(by * h / S + 1).min(h));
        for bx in 0..S {
            let (x0, x1) = (bx * w / S, ((bx + 1) * w / S).max(bx * w / S + 1).min(w));
            let mut acc = 0.0;
            for y in y0..y1 {
                for x in x0..x1 {
                    acc += gray[y * w + x];
                }
            }
            out[by * S + bx] = acc / ((y1 - y0) * (x1 - x0)) as f64;
        }
    }
    out
}

const PSD_TOL: f64 = 1e-6;

fn psd_sqrt(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    if let Some(&min) = eig.eigenvalues.iter().min_by(|a, b| a.total_cmp(b)) {
        if min < -PSD_TOL {
            return Err(invalid!("{what} is not positive semi-definite (eigenvalue {min:.3e})"));
        }
    }
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    Ok(&eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose())
}

/// `|mu_p - mu_q|^2 + tr(S_p + S_q - 2 (S_p S_q)^{1/2})`.
pub fn frechet_distance(p: &FeatureGaussian, q: &FeatureGaussian) -> Result<f64> {
    let d = p.mean.len();
    if q.mean.len() != d || p.cov.shape() != (d, d) || q.cov.shape() != (d, d) {
        return Err(invalid!("feature gaussians have mismatched dimensions"));
    }
    // tr((S_p S_q)^{1/2}) = tr((S_p^{1/2} S_q S_p^{1/2})^{1/2}), and the latter is symmetric
    let sp = psd_sqrt(&p.cov, "first covariance")?;
    psd_sqrt(&q.cov, "second covariance")?;
    let inner = &sp * &q.cov * &sp;
    let inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(inner).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    let gap = (&p.mean - &q.mean).norm_squared();
    Ok((gap + p.cov.trace() + q.cov.trace() - 2.0 * tr_sqrt).max(0.0))
}

/// Summary written by evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    pub psnr_mean: f64,
    pub diou: f64,
    pub n_samples: usize,
    pub tau: f64,
}

impl EvalReport {
    pub fn to_kv(&self) -> String {
        format!(
            "fid={:.6}\npsnr_mean={:.6}\ndiou={:.6}\nn_samples={}\ntau={}\n",
            self.fid, self.psnr_mean, self.diou, self.n_samples, self.tau
        )
    }

    /// Writes `report.txt` and `report.json` into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let txt = dir.join("report.txt");
        std::fs::write(&txt, self.to_kv()).map_err(|e| Error::io(&txt, e))?;
        let json = dir.join("report.json");
        let body = serde_json::to_string_pretty(self).expect("report fields serialize");
        std::fs::write(&json, body + "\n").map_err(|e| Error::io(&json, e))
    }
}

/// Scores generated edits against reference edits of the same sources.
pub fn evaluate(sources: &[ImageTensor], generated: &[ImageTensor], references: &[ImageTensor], tau: f64) -> Result<EvalReport> {
    if sources.is_empty() {
        return Err(invalid!("evaluation set is empty"));
    }
    if sources.len() != generated.len() || sources.len() != references.len() {
        return Err(invalid!("evaluation lists differ in length"));
    }
    let mut psnr_sum = 0.0;
    let (mut gm, mut rm) = (Vec::new(), Vec::new());
    for ((x, g), r) in sources.iter().zip(generated).zip(references) {
        psnr_sum += psnr(g, r, 2.0)?;
        gm.push(edit_mask(x, g, tau)?);
        rm.push(edit_mask(x, r, tau)?);
    }
    let fid = if sources.len() >= 2 {
        let fg: Vec<Vec<f64>> = generated.iter().map(pixel_features).collect();
        let fr: Vec<Vec<f64>> = references.iter().map(pixel_features).collect();
        frechet_distance(&FeatureGaussian::from_features(&fg)?, &FeatureGaussian::from_features(&fr)?)?
    } else {
        0.0
    };
    Ok(EvalReport { fid, psnr_mean: psnr_sum / sources.len() as f64, diou: diou(&gm, &rm)?, n_samples: sources.len(), tau })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_img(rng: &mut ChaCha8Rng, h: usize, w: usize, c: usize) -> ImageTensor {
        ImageTensor::from_fn(h, w, c, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn parseval_and_delta() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let (a, b) = (rand_img(&mut rng, 8, 8, 3), rand_img(&mut rng, 8, 8, 3));
        assert_abs_diff_eq!(frequency_loss(&a, &b, false).unwrap(), mse(&a, &b).unwrap(), epsilon = 1e-12);
        assert_eq!(frequency_loss(&a, &a, true).unwrap(), 0.0);
        let zero = ImageTensor::filled(8, 8, 1, 0.0).unwrap();
        let mut delta = zero.clone();
        delta.set(3, 5, 0, 1.0);
        assert_abs_diff_eq!(frequency_loss(&delta, &zero, false).unwrap(), 1.0 / 64.0, epsilon = 1e-15);
        // flat spectrum: every bin has the maximal magnitude, so focal weighting is inert
        assert_abs_diff_eq!(frequency_loss(&delta, &zero, true).unwrap(), 1.0 / 64.0, epsilon = 1e-15);
    }

    #[test]
    fn tensor_loss_agrees_with_fft() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let imgs: Vec<ImageTensor> = (0..4).map(|_| rand_img(&mut rng, 8, 12, 3)).collect();
        let ta = ImageTensor::batch_to_tensor(&[&imgs[0], &imgs[1]], &Device::Cpu).unwrap();
        let tb = ImageTensor::batch_to_tensor(&[&imgs[2], &imgs[3]], &Device::Cpu).unwrap();
        for focal in [false, true] {
            let got = frequency_loss_tensor(&ta, &tb, focal).unwrap().to_scalar::<f32>().unwrap() as f64;
            let want = (frequency_loss(&imgs[0], &imgs[2], focal).unwrap() + frequency_loss(&imgs[1], &imgs[3], focal).unwrap()) / 2.0;
            assert!((got - want).abs() < 1e-5 * want.max(1.0), "{focal}: {got} vs {want}");
        }
    }

    #[test]
    fn psnr_examples() {
        let a = ImageTensor::filled(4, 4, 1, 0.0).unwrap();
        let b = ImageTensor::filled(4, 4, 1, 0.1).unwrap();
        assert_eq!(psnr(&a, &a, 2.0).unwrap(), PSNR_CAP);
        assert_abs_diff_eq!(psnr(&a, &b, 1.0).unwrap(), 20.0, epsilon = 1e-9);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let (x, y) = (rand_img(&mut rng, 5, 5, 3), rand_img(&mut rng, 5, 5, 3));
        let m: f64 = x.data().iter().zip(y.data()).map(|(u, v)| (u - v).powi(2)).sum::<f64>() / 75.0;
        assert_abs_diff_eq!(psnr(&x, &y, 2.0).unwrap(), 10.0 * (4.0 / m).log10(), epsilon = 1e-9);
    }

    #[test]
    fn mask_examples() {
        let x = ImageTensor::filled(6, 6, 3, -0.2).unwrap();
        assert_eq!(edit_mask(&x, &x, 0.1).unwrap().area(), 0);
        let mut y = x.clone();
        for (h, w) in [(1, 2), (1, 3), (2, 2), (2, 3)] {
            y.set(h, w, 1, 0.3);
        }
        let m = edit_mask(&x, &y, 0.1).unwrap();
        assert_eq!(m.area(), 4);
        assert!(m.get(1, 2) && m.get(2, 3) && !m.get(0, 0));
        let graded = ImageTensor::from_fn(6, 6, 3, |h, w, _| -0.2 + (h * 6 + w) as f64 / 36.0).unwrap();
        let areas: Vec<usize> = (0..20).map(|k| edit_mask(&x, &graded, k as f64 * 0.05).unwrap().area()).collect();
        assert!(areas.windows(2).all(|p| p[1] <= p[0]));
    }

    fn mask_from(pixels: &[(usize, usize)]) -> EditMask {
        let mut bits = vec![false; 16];
        for &(h, w) in pixels {
            bits[h * 4 + w] = true;
        }
        EditMask { height: 4, width: 4, bits }
    }

    #[test]
    fn diou_examples() {
        let r = [mask_from(&[(0, 0), (0, 1)]), mask_from(&[(1, 0), (1, 1)])];
        let g = [mask_from(&[(0, 0), (1, 1), (3, 3), (3, 2)])];
        assert_abs_diff_eq!(diou(&g, &r).unwrap(), 2.0 / 6.0, epsilon = 1e-15);
        assert_eq!(diou(&r, &r).unwrap(), 1.0);
        assert_eq!(diou(&[mask_from(&[(3, 3)])], &[mask_from(&[(0, 0)])]).unwrap(), 0.0);
        assert_eq!(diou(&[mask_from(&[])], &[mask_from(&[])]).unwrap(), 1.0);
        assert!(diou(&[], &r).is_err());
    }

    fn gauss(mean: &[f64], cov: &[f64]) -> FeatureGaussian {
        let d = mean.len();
        FeatureGaussian { mean: DVector::from_column_slice(mean), cov: DMatrix::from_row_slice(d, d, cov) }
    }

    #[test]
    fn frechet_closed_forms() {
        assert_abs_diff_eq!(frechet_distance(&gauss(&[0.0], &[1.0]), &gauss(&[1.0], &[1.0])).unwrap(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(frechet_distance(&gauss(&[0.0], &[1.0]), &gauss(&[0.0], &[4.0])).unwrap(), 1.0, epsilon = 1e-12);
        let p = gauss(&[1.0, 2.0], &[2.0, 0.5, 0.5, 1.0]);
        assert_abs_diff_eq!(frechet_distance(&p, &p).unwrap(), 0.0, epsilon = 1e-9);
        assert!(frechet_distance(&p, &gauss(&[0.0, 0.0], &[1.0, 0.0, 0.0, -1.0])).is_err());
    }

    #[test]
    fn features_are_block_means() {
        let img = ImageTensor::from_fn(16, 16, 3, |h, w, _| if h < 8 && w < 8 { 1.0 } else { -1.0 }).unwrap();
        let f = pixel_features(&img);
        assert_eq!(f.len(), 64);
        assert_eq!(f[0], 1.0);
        assert_eq!(f[63], -1.0);
    }

    #[test]
    fn report_has_documented_keys() {
        let r = EvalReport { fid: 0.5, psnr_mean: 30.0, diou: 0.75, n_samples: 3, tau: 0.1 };
        let kv = r.to_kv();
        let keys: Vec<&str> = kv.lines().map(|l| l.split('=').next().unwrap()).collect();
        assert_eq!(keys, ["fid", "psnr_mean", "diou", "n_samples", "tau"]);
        let v: serde_json::Value = serde_json::to_value(&r).unwrap();
        let mut jk: Vec<&String> = v.as_object().unwrap().keys().collect();
        jk.sort();
        assert_eq!(jk, ["diou", "fid", "n_samples", "psnr_mean", "tau"]);
    }

    #[test]
    fn self_evaluation_is_perfect() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let xs: Vec<ImageTensor> = (0..3).map(|_| rand_img(&mut rng, 8, 8, 3)).collect();
        let ys: Vec<ImageTensor> = xs.iter().map(|x| x.map(|v| v * 0.5).unwrap()).collect();
        let r = evaluate(&xs, &ys, &ys, DEFAULT_TAU).unwrap();
        assert_eq!((r.diou, r.psnr_mean, r.n_samples), (1.0, PSNR_CAP, 3));
        assert!(r.fid.abs() < 1e-9);
        assert!(evaluate(&[], &[], &[], 0.1).is_err());
    }

    proptest! {
        #[test]
        fn frequency_loss_is_symmetric(seed in any::<u64>(), focal in any::<bool>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let (a, b) = (rand_img(&mut rng, 4, 6, 1), rand_img(&mut rng, 4, 6, 1));
            let (ab, ba) = (frequency_loss(&a, &b, focal).unwrap(), frequency_loss(&b, &a, focal).unwrap());
            prop_assert!((ab - ba).abs() < 1e-14);
            prop_assert!(ab > 0.0);
        }

        #[test]
        fn frechet_is_symmetric(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let feats = |rng: &mut ChaCha8Rng| (0..6).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect::<Vec<Vec<f64>>>();
            let p = FeatureGaussian::from_features(&feats(&mut rng)).unwrap();
            let q = FeatureGaussian::from_features(&feats(&mut rng)).unwrap();
            let (pq, qp) = (frechet_distance(&p, &q).unwrap(), frechet_distance(&q, &p).unwrap());
            prop_assert!((pq - qp).abs() < 1e-9 && pq >= 0.0);
        }

        #[test]
        fn diou_grows_with_shared_pixels(seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rand_mask = |rng: &mut ChaCha8Rng| EditMask { height: 4, width: 4, bits: (0..16).map(|_| rng.random_bool(0.3)).collect() };
            let (g, r) = (rand_mask(&mut rng), rand_mask(&mut rng));
            let base = diou(&[g.clone()], &[r.clone()]).unwrap();
            let k = rng.random_range(0..16);
            let (mut g2, mut r2) = (g, r);
            g2.bits[k] = true;
            r2.bits[k] = true;
            prop_assert!(diou(&[g2], &[r2]).unwrap() >= base);
            prop_assert!((0.0..=1.0).contains(&base));
        }
    }
}
