//! Jointly trained autoencoder: images are compressed by a factor of 4 per side into a
//! small latent, the decoder receives skip features and learned-gain noise.

use candle_core::{Device, Tensor};
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::image::ImageTensor;
use crate::nn::{channel_mul, normal_tensor, pixel_shuffle, pixel_unshuffle, Conv2d, Init, ParamPath};

/// Spatial downsampling factor of the latent.
pub const FACTOR: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct AutoencoderConfig {
    pub image_channels: usize,
    pub latent_dim: usize,
    /// Width at half resolution.
    pub c0: usize,
    /// Width at quarter resolution.
    pub c1: usize,
}

impl Default for AutoencoderConfig {
    fn default() -> Self {
        Self { image_channels: 3, latent_dim: 4, c0: 24, c1: 48 }
    }
}

/// A batch of latents, `B x d x H/4 x W/4`.
#[derive(Debug, Clone)]
pub struct LatentTensor {
    pub data: Tensor,
}

impl LatentTensor {
    pub fn new(data: Tensor) -> Result<Self> {
        data.dims4()?;
        Ok(Self { data })
    }

    pub fn dims(&self) -> (usize, usize, usize, usize) {
        self.data.dims4().expect("checked at construction")
    }
}

/// Encoder activations handed to the decoder, finest level first.
#[derive(Debug, Clone)]
pub struct SkipStack {
    pub levels: Vec<Tensor>,
}

impl SkipStack {
    pub fn zeros_like(&self) -> Result<SkipStack> {
        Ok(SkipStack { levels: self.levels.iter().map(|t| t.zeros_like()).collect::<candle_core::Result<_>>()? })
    }

    pub fn detach(&self) -> SkipStack {
        SkipStack { levels: self.levels.iter().map(|t| t.detach()).collect() }
    }
}

pub const SKIP_LEVELS: usize = 3;

pub struct Encoder {
    in0: Conv2d,
    c00: Conv2d,
    down: Conv2d,
    c10: Conv2d,
    c20: Conv2d,
    head: Conv2d,
    cfg: AutoencoderConfig,
}

pub struct Decoder {
    inp: Conv2d,
    c2: Conv2d,
    up: Conv2d,
    c1: Conv2d,
    out: Conv2d,
    gains: Vec<Tensor>,
    cfg: AutoencoderConfig,
}

pub struct Encoded {
    pub mu: LatentTensor,
    pub logvar: LatentTensor,
    pub skips: SkipStack,
}

impl Encoder {
    pub fn new(p: &ParamPath, cfg: &AutoencoderConfig) -> Result<Self> {
        let (c, c0, c1, d) = (cfg.image_channels, cfg.c0, cfg.c1, cfg.latent_dim);
        Ok(Self {
            in0: Conv2d::new(&p.pp("in0"), c * 4, c0, 3, 1)?,
            c00: Conv2d::new(&p.pp("c00"), c0, c0, 3, 1)?,
            down: Conv2d::new(&p.pp("down"), c0, c1, 3, 2)?,
            c10: Conv2d::new(&p.pp("c10"), c1, c1, 3, 1)?,
            c20: Conv2d::new(&p.pp("c20"), c1, c1, 3, 1)?,
            head: Conv2d::new(&p.pp("head"), c1, 2 * d, 1, 1)?,
            cfg: cfg.clone(),
        })
    }

    /// `img` is `B x C x H x W` with `H`, `W` divisible by 4.
    pub fn encode(&self, img: &Tensor) -> Result<Encoded> {
        let (_, c, h, w) = img.dims4()?;
        if h % FACTOR != 0 || w % FACTOR != 0 {
            return Err(invalid!("image {h}x{w} is not divisible by the latent factor {FACTOR}"));
        }
        if c != self.cfg.image_channels {
            return Err(invalid!("encoder expects {} channels, got {c}", self.cfg.image_channels));
        }
        let x = pixel_unshuffle(img, 2)?;
        let f0 = self.c00.forward(&self.in0.forward(&x)?.silu()?)?.silu()?;
        let s1 = self.c10.forward(&self.down.forward(&f0)?.silu()?)?.silu()?;
        let s2 = self.c20.forward(&s1)?.silu()?;
        let stats = self.head.forward(&s2)?;
        let d = self.cfg.latent_dim;
        Ok(Encoded {
            mu: LatentTensor::new(stats.narrow(1, 0, d)?)?,
            logvar: LatentTensor::new(stats.narrow(1, d, d)?)?,
            // the top level also carries the space-to-depth input, so fine detail of the
            // encoded image is one linear map away from the decoder output
            skips: SkipStack { levels: vec![Tensor::cat(&[&f0, &x], 1)?, s1, s2] },
        })
    }
}

impl Decoder {
    pub fn new(p: &ParamPath, cfg: &AutoencoderConfig) -> Result<Self> {
        let (c, c0, c1, d) = (cfg.image_channels, cfg.c0, cfg.c1, cfg.latent_dim);
        let gains = [c1, c1, c0]
            .iter()
            .enumerate()
            .map(|(k, &ch)| p.get(&format!("noise_gain{k}"), &[ch], Init::Zeros))
            .collect::<Result<_>>()?;
        Ok(Self {
            inp: Conv2d::new(&p.pp("inp"), d, c1, 3, 1)?,
            c2: Conv2d::new(&p.pp("c2"), c1, c1, 3, 1)?,
            up: Conv2d::new(&p.pp("up"), c1, c0 * 4, 1, 1)?,
            c1: Conv2d::new(&p.pp("c1"), c0, c0, 3, 1)?,
            // starts as a copy of the skip's space-to-depth input: the decoder reproduces
            // the skip image exactly until it learns what to change
            out: Conv2d::pass_through(&p.pp("out"), c0 + c * 4, c * 4, 3, c0)?,
            gains,
            cfg: cfg.clone(),
        })
    }

    fn noise(&self, h: &Tensor, level: usize, noise_scale: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if noise_scale == 0.0 {
            return Ok(h.clone());
        }
        let eps = (normal_tensor(rng, h.dims(), h.device())? * noise_scale)?;
        Ok((h + channel_mul(&eps, &self.gains[level], 1)?)?)
    }

    /// Returns a `B x C x H x W` image batch (unclamped).
    pub fn decode(&self, z: &LatentTensor, skips: &SkipStack, noise_scale: f64, rng: &mut ChaCha8Rng) -> Result<Tensor> {
        if skips.levels.len() != SKIP_LEVELS {
            return Err(invalid!("decoder needs {SKIP_LEVELS} skip levels, got {}", skips.levels.len()));
        }
        let (b, d, h, w) = z.dims();
        let c0 = self.cfg.c0;
        let want = [(c0 + 4 * self.cfg.image_channels, 2 * h, 2 * w), (self.cfg.c1, h, w), (self.cfg.c1, h, w)];
        for (lvl, (t, &(c, th, tw))) in skips.levels.iter().zip(&want).enumerate() {
            if t.dims() != [b, c, th, tw] {
                return Err(invalid!("skip level {lvl} has shape {:?}, expected {:?}", t.dims(), [b, c, th, tw]));
            }
        }
        if d != self.cfg.latent_dim {
            return Err(invalid!("latent has {d} channels, decoder expects {}", self.cfg.latent_dim));
        }
        let s = &skips.levels;
        let h2 = (self.inp.forward(&z.data)?.silu()? + &s[2])?;
        let h2 = self.noise(&h2, 0, noise_scale, rng)?;
        let h1 = (self.c2.forward(&h2)?.silu()? + &s[1])?;
        let h1 = self.noise(&h1, 1, noise_scale, rng)?;
        let (feat0, raw0) = (s[0].narrow(1, 0, c0)?, s[0].narrow(1, c0, s[0].dim(1)? - c0)?);
        let h0 = (pixel_shuffle(&self.up.forward(&h1)?, 2)?.silu()? + feat0)?;
        let h0 = self.noise(&h0, 2, noise_scale, rng)?;
        let h0 = self.c1.forward(&h0)?.silu()?;
        pixel_shuffle(&self.out.forward(&Tensor::cat(&[&h0, &raw0], 1)?)?, 2)
    }
}

/// `mu + exp(logvar / 2) * eps`; `None` for the generator returns `mu` unchanged.
pub fn reparameterize(mu: &LatentTensor, logvar: &LatentTensor, rng: Option<&mut ChaCha8Rng>) -> Result<LatentTensor> {
    if mu.data.dims() != logvar.data.dims() {
        return Err(invalid!("mu and logvar shapes differ"));
    }
    match rng {
        None => Ok(mu.clone()),
        Some(rng) => {
            let eps = normal_tensor(rng, mu.data.dims(), mu.data.device())?;
            let std = (logvar.data.clamp(-30.0, 20.0)? * 0.5)?.exp()?;
            LatentTensor::new((&mu.data + std.mul(&eps)?)?)
        }
    }
}

/// Mean over coordinates of `0.5 * (exp(logvar) + mu^2 - 1 - logvar)`.
pub fn kl_loss(mu: &LatentTensor, logvar: &LatentTensor) -> Result<Tensor> {
    if mu.data.dims() != logvar.data.dims() {
        return Err(invalid!("mu and logvar shapes differ"));
    }
    let lv = logvar.data.clamp(-30.0, 20.0)?;
    let terms = ((lv.exp()? + mu.data.sqr()?)? - 1.0)?.sub(&lv)?;
    Ok((terms.mean_all()? * 0.5)?)
}

/// Single-image convenience wrapper around [`Encoder::encode`].
pub fn encode_image(enc: &Encoder, img: &ImageTensor, device: &Device) -> Result<Encoded> {
    enc.encode(&ImageTensor::batch_to_tensor(&[img], device)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use rand::SeedableRng;

    fn nets(cfg: &AutoencoderConfig) -> (ParamStore, Encoder, Decoder) {
        let store = ParamStore::new(ChaCha8Rng::seed_from_u64(0), &Device::Cpu);
        let enc = Encoder::new(&store.root().pp("enc"), cfg).unwrap();
        let dec = Decoder::new(&store.root().pp("dec"), cfg).unwrap();
        (store, enc, dec)
    }

    fn vals(t: &Tensor) -> Vec<f32> {
        t.flatten_all().unwrap().to_vec1().unwrap()
    }

    #[test]
    fn latent_shape_contract() {
        let cfg = AutoencoderConfig { c0: 8, c1: 8, ..Default::default() };
        let (_, enc, _) = nets(&cfg);
        let img = ImageTensor::filled(16, 16, 3, 0.2).unwrap();
        let e = encode_image(&enc, &img, &Device::Cpu).unwrap();
        assert_eq!(e.mu.dims(), (1, 4, 4, 4));
        assert_eq!(e.skips.levels.len(), SKIP_LEVELS);
        let e2 = encode_image(&enc, &img, &Device::Cpu).unwrap();
        assert_eq!(vals(&e.mu.data), vals(&e2.mu.data));
        let bad = ImageTensor::filled(18, 16, 3, 0.2).unwrap();
        assert!(encode_image(&enc, &bad, &Device::Cpu).is_err());
    }

    #[test]
    fn decoder_noise_is_inert_at_init_and_absent_at_zero_scale() {
        let cfg = AutoencoderConfig { c0: 8, c1: 8, ..Default::default() };
        let (_, enc, dec) = nets(&cfg);
        let img = ImageTensor::from_fn(16, 16, 3, |h, w, c| ((h + 2 * w + c) % 5) as f64 * 0.2 - 0.4).unwrap();
        let e = encode_image(&enc, &img, &Device::Cpu).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let a = dec.decode(&e.mu, &e.skips, 0.0, &mut rng).unwrap();
        let b = dec.decode(&e.mu, &e.skips, 0.0, &mut rng).unwrap();
        let c = dec.decode(&e.mu, &e.skips, 1.0, &mut rng).unwrap();
        assert_eq!(a.dims(), &[1, 3, 16, 16]);
        assert_eq!(vals(&a), vals(&b));
        assert_eq!(vals(&a), vals(&c));
        let short = SkipStack { levels: e.skips.levels[..2].to_vec() };
        assert!(dec.decode(&e.mu, &short, 0.0, &mut rng).is_err());
    }

    #[test]
    fn reparameterize_limits() {
        let dev = Device::Cpu;
        let mu = LatentTensor::new(Tensor::full(0.3f32, (1, 2, 3, 3), &dev).unwrap()).unwrap();
        let lv = LatentTensor::new(Tensor::full(-1e4f32, (1, 2, 3, 3), &dev).unwrap()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let z = reparameterize(&mu, &lv, Some(&mut rng)).unwrap();
        assert!(vals(&z.data).iter().all(|v| (v - 0.3).abs() < 1e-6));
        let z = reparameterize(&mu, &lv, None).unwrap();
        assert_eq!(vals(&z.data), vals(&mu.data));
    }

    #[test]
    fn reparameterize_has_unit_variance() {
        let dev = Device::Cpu;
        let mu = LatentTensor::new(Tensor::zeros((10_000, 1, 1, 1), candle_core::DType::F32, &dev).unwrap()).unwrap();
        let lv = mu.clone();
        let z = vals(&reparameterize(&mu, &lv, Some(&mut ChaCha8Rng::seed_from_u64(3))).unwrap().data);
        let mean = z.iter().map(|&v| v as f64).sum::<f64>() / z.len() as f64;
        let var = z.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / (z.len() - 1) as f64;
        assert!((var - 1.0).abs() < 0.05, "{var}");
    }

    #[test]
    fn kl_closed_forms() {
        let dev = Device::Cpu;
        let lat = |v: f32| LatentTensor::new(Tensor::full(v, (1, 1, 2, 2), &dev).unwrap()).unwrap();
        assert_eq!(kl_loss(&lat(0.0), &lat(0.0)).unwrap().to_scalar::<f32>().unwrap(), 0.0);
        assert!((kl_loss(&lat(1.0), &lat(0.0)).unwrap().to_scalar::<f32>().unwrap() - 0.5).abs() < 1e-7);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mu = normal_tensor(&mut rng, &[1, 2, 3, 3], &dev).unwrap().to_dtype(candle_core::DType::F64).unwrap();
        let lv = normal_tensor(&mut rng, &[1, 2, 3, 3], &dev).unwrap().to_dtype(candle_core::DType::F64).unwrap();
        let got = kl_loss(&LatentTensor::new(mu.clone()).unwrap(), &LatentTensor::new(lv.clone()).unwrap())
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        let (m, l): (Vec<f64>, Vec<f64>) = (mu.flatten_all().unwrap().to_vec1().unwrap(), lv.flatten_all().unwrap().to_vec1().unwrap());
        let want = m.iter().zip(&l).map(|(m, l)| 0.5 * (l.exp() + m * m - 1.0 - l)).sum::<f64>() / m.len() as f64;
        assert!((got - want).abs() < 1e-10);
    }
}
