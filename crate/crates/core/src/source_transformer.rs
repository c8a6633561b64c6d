//! The source-side network: given `(x_i, x_j)` it predicts the warp-plus-recolor pack
//! that turns `x_i` into `x_j`.

use candle_core::{Device, Tensor, D};

use crate::error::{invalid, Result};
use crate::image::ImageTensor;
use crate::nn::{pixel_shuffle, pixel_unshuffle, Conv2d, Linear, ParamPath};
use crate::transform_ops::{compose_tensor, compose_transform, identity_grid_tensor, normalize, TransformPack};

#[derive(Debug, Clone, PartialEq)]
pub struct SourceNetConfig {
    pub image_channels: usize,
    /// Width at half resolution; deeper levels use twice this.
    pub base: usize,
    /// Largest flow displacement the head can express, in normalized units.
    pub max_displacement: f64,
}

impl Default for SourceNetConfig {
    fn default() -> Self {
        Self { image_channels: 3, base: 24, max_displacement: 2.5 }
    }
}

pub struct SourceNet {
    e0a: Conv2d,
    e0b: Conv2d,
    e1a: Conv2d,
    e1b: Conv2d,
    e2a: Conv2d,
    e2b: Conv2d,
    ctx: Linear,
    ctx_out: Linear,
    up1: Conv2d,
    d1: Conv2d,
    up0: Conv2d,
    d0: Conv2d,
    head: Conv2d,
    cfg: SourceNetConfig,
}

impl SourceNet {
    pub fn new(p: &ParamPath, cfg: &SourceNetConfig) -> Result<Self> {
        let (c, b) = (cfg.image_channels, cfg.base);
        let cin = (2 * c + 2) * 4;
        Ok(Self {
            e0a: Conv2d::new(&p.pp("e0a"), cin, b, 3, 1)?,
            e0b: Conv2d::new(&p.pp("e0b"), b, b, 3, 1)?,
            e1a: Conv2d::new(&p.pp("e1a"), b, 2 * b, 3, 2)?,
            e1b: Conv2d::new(&p.pp("e1b"), 2 * b, 2 * b, 3, 1)?,
            e2a: Conv2d::new(&p.pp("e2a"), 2 * b, 2 * b, 3, 2)?,
            e2b: Conv2d::new(&p.pp("e2b"), 2 * b, 2 * b, 3, 1)?,
            ctx: Linear::new(&p.pp("ctx"), 2 * b, 2 * b)?,
            ctx_out: Linear::new(&p.pp("ctx_out"), 2 * b, 2 * b)?,
            up1: Conv2d::new(&p.pp("up1"), 2 * b, 8 * b, 1, 1)?,
            d1: Conv2d::new(&p.pp("d1"), 2 * b, 2 * b, 3, 1)?,
            up0: Conv2d::new(&p.pp("up0"), 2 * b, 4 * b, 1, 1)?,
            d0: Conv2d::new(&p.pp("d0"), b, b, 3, 1)?,
            head: Conv2d::zeros(&p.pp("head"), b, 16, 3, 1)?,
            cfg: cfg.clone(),
        })
    }

    /// `x_i`, `x_j` are `B x C x H x W` with `H`, `W` divisible by 8. Returns the
    /// `B x 4 x H x W` pack (flow row, flow col, scale, bias).
    pub fn forward(&self, x_i: &Tensor, x_j: &Tensor) -> Result<Tensor> {
        let r = self.residual(x_i, x_j)?;
        let (b, _, h, w) = r.dims4()?;
        let grid = identity_grid_tensor(b, h, w, r.device())?;
        let flow = (grid + (r.narrow(1, 0, 2)? * self.cfg.max_displacement)?)?.clamp(-1.0, 1.0)?;
        let scale = (r.narrow(1, 2, 1)? + 1.0)?;
        let bias = r.narrow(1, 3, 1)?;
        Ok(Tensor::cat(&[&flow, &scale, &bias], 1)?)
    }

    /// Bounded head output in `(-1, 1)`, one plane per pack field, before it is
    /// offset by the identity.
    pub fn residual(&self, x_i: &Tensor, x_j: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = x_i.dims4()?;
        if x_j.dims() != x_i.dims() {
            return Err(invalid!("source images differ in shape: {:?} vs {:?}", x_i.dims(), x_j.dims()));
        }
        if c != self.cfg.image_channels {
            return Err(invalid!("source net expects {} channels, got {c}", self.cfg.image_channels));
        }
        if h % 8 != 0 || w % 8 != 0 {
            return Err(invalid!("source net needs sides divisible by 8, got {h}x{w}"));
        }
        let grid = identity_grid_tensor(b, h, w, x_i.device())?;
        let inp = Tensor::cat(&[x_i, x_j, &grid], 1)?;
        let x = pixel_unshuffle(&inp, 2)?;
        let f0 = self.e0b.forward(&self.e0a.forward(&x)?.silu()?)?.silu()?;
        let f1 = self.e1b.forward(&self.e1a.forward(&f0)?.silu()?)?.silu()?;
        let f2 = self.e2b.forward(&self.e2a.forward(&f1)?.silu()?)?.silu()?;
        // image-wide summary, e.g. where the salient content sits in each input
        let pooled = f2.mean(D::Minus1)?.mean(D::Minus1)?;
        let g = self.ctx_out.forward(&self.ctx.forward(&pooled)?.silu()?)?;
        let f2 = f2.broadcast_add(&g.unsqueeze(2)?.unsqueeze(3)?)?;
        let u1 = (pixel_shuffle(&self.up1.forward(&f2)?, 2)?.silu()? + f1)?;
        let u1 = self.d1.forward(&u1)?.silu()?;
        let u0 = (pixel_shuffle(&self.up0.forward(&u1)?, 2)?.silu()? + f0)?;
        let u0 = self.d0.forward(&u0)?.silu()?;
        Ok(pixel_shuffle(&self.head.forward(&u0)?, 2)?.tanh()?)
    }

    pub fn config(&self) -> &SourceNetConfig {
        &self.cfg
    }
}

/// Predicts the pack taking `x_i` to `x_j` for a single pair of images.
pub fn predict_transform(x_i: &ImageTensor, x_j: &ImageTensor, net: &SourceNet, device: &Device) -> Result<TransformPack> {
    x_i.check_same_shape(x_j, "predict_transform")?;
    let ti = ImageTensor::batch_to_tensor(&[x_i], device)?;
    let tj = ImageTensor::batch_to_tensor(&[x_j], device)?;
    // assembled in f64 so a zero residual is exactly the identity pack
    let r: Vec<f32> = net.residual(&ti, &tj)?.flatten_all()?.to_vec1()?;
    let (h, w) = (x_i.height(), x_i.width());
    let hw = h * w;
    let md = net.cfg.max_displacement;
    let mut planes = vec![0.0; 4 * hw];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            planes[p] = (normalize(y, h) + md * r[p] as f64).clamp(-1.0, 1.0);
            planes[hw + p] = (normalize(x, w) + md * r[hw + p] as f64).clamp(-1.0, 1.0);
            planes[2 * hw + p] = 1.0 + r[2 * hw + p] as f64;
            planes[3 * hw + p] = r[3 * hw + p] as f64;
        }
    }
    TransformPack::from_planes(h, w, &planes)
}

/// Mean squared error between `compose_transform(x_i, pack)` and `x_j`.
pub fn source_loss(x_i: &ImageTensor, x_j: &ImageTensor, pack: &TransformPack) -> Result<f64> {
    x_i.check_same_shape(x_j, "source_loss")?;
    let recon = compose_transform(x_i, pack)?;
    let n = recon.data().len() as f64;
    Ok(recon.data().iter().zip(x_j.data()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / n)
}

/// Batched differentiable counterpart of [`source_loss`].
pub fn source_loss_tensor(x_i: &Tensor, x_j: &Tensor, pack: &Tensor) -> Result<Tensor> {
    crate::nn::mse(&compose_tensor(x_i, pack)?, x_j)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::transform_ops::{ColorAffine, FlowField};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn small() -> (ParamStore, SourceNet) {
        let store = ParamStore::new(ChaCha8Rng::seed_from_u64(0), &Device::Cpu);
        let net = SourceNet::new(&store.root(), &SourceNetConfig { base: 8, ..Default::default() }).unwrap();
        (store, net)
    }

    fn random_image(rng: &mut ChaCha8Rng, n: usize) -> ImageTensor {
        ImageTensor::from_fn(n, n, 3, |_, _, _| rng.random_range(-1.0..1.0)).unwrap()
    }

    #[test]
    fn zero_head_gives_identity_pack() {
        let (_, net) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let (a, b) = (random_image(&mut rng, 16), random_image(&mut rng, 16));
        let pack = predict_transform(&a, &b, &net, &Device::Cpu).unwrap();
        assert_eq!(pack, TransformPack::identity(16, 16).unwrap());
        assert_eq!(source_loss(&a, &a, &pack).unwrap(), 0.0);
    }

    #[test]
    fn outputs_stay_in_bounds_for_any_weights() {
        let (store, net) = small();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (_, v) in store.vars() {
            let t = crate::nn::normal_tensor(&mut rng, v.dims(), &Device::Cpu).unwrap();
            v.set(&(t * 3.0).unwrap()).unwrap();
        }
        let (a, b) = (random_image(&mut rng, 16), random_image(&mut rng, 16));
        let pack = predict_transform(&a, &b, &net, &Device::Cpu).unwrap();
        assert!(pack.flow.coords().iter().all(|v| (-1.0..=1.0).contains(v)));
        for sb in pack.affine.params().chunks(2) {
            assert!((0.0..=2.0).contains(&sb[0]) && (-1.0..=1.0).contains(&sb[1]));
        }
        assert!(predict_transform(&a, &random_image(&mut rng, 8), &net, &Device::Cpu).is_err());
    }

    #[test]
    fn source_loss_examples() {
        let zero = ImageTensor::filled(4, 4, 3, 0.0).unwrap();
        let half = ImageTensor::filled(4, 4, 3, 0.5).unwrap();
        let id = TransformPack::identity(4, 4).unwrap();
        assert_eq!(source_loss(&zero, &half, &id).unwrap(), 0.25);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (a, b) = (random_image(&mut rng, 6), random_image(&mut rng, 6));
        let flow = FlowField::new(6, 6, (0..72).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let aff = ColorAffine::new(6, 6, (0..72).map(|_| rng.random_range(0.0..1.5)).collect()).unwrap();
        let pack = TransformPack::new(flow, aff).unwrap();
        let recon = compose_transform(&a, &pack).unwrap();
        let mut acc = 0.0;
        for h in 0..6 {
            for w in 0..6 {
                for c in 0..3 {
                    acc += (recon.get(h, w, c) - b.get(h, w, c)).powi(2);
                }
            }
        }
        assert!((source_loss(&a, &b, &pack).unwrap() - acc / 108.0).abs() < 1e-12);
    }
}
