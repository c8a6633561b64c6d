//! The conditioned latent generator and everything around it: the noise schedule,
//! the pack embedder, the transformer denoiser that regresses `y_j` directly, the
//! joint training step and the inference sampler.

use candle_core::{DType, Device, Tensor};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Error, Result};
use crate::image::ImageTensor;
use crate::latent_autoencoder::{kl_loss, reparameterize, AutoencoderConfig, Decoder, Encoder, LatentTensor, SkipStack};
use crate::losses_metrics::frequency_loss_tensor;
use crate::nn::{mse, normal_tensor, position_grid, sinusoidal, Adam, Attention, LayerNorm, Linear, ParamPath, ParamStore};
use crate::pair_sampler::{paired_augment, sample_group, AugmentConfig, PairedDataset};
use crate::source_transformer::{source_loss_tensor, SourceNet, SourceNetConfig};
use crate::transform_ops::TransformPack;

/// Variance-preserving forward process with betas linear in `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    pub beta_start: f64,
    pub beta_end: f64,
    betas: Vec<f64>,
    alpha_bar: Vec<f64>,
}

impl NoiseSchedule {
    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    /// `beta[t]` for `t` in `1..=T`.
    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t - 1]
    }

    /// `alpha_bar[t]` for `t` in `0..=T`, with `alpha_bar[0] = 1`.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bar[t]
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }
}

pub fn make_linear_schedule(steps: usize, beta_start: f64, beta_end: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(invalid!("schedule needs at least one step"));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(invalid!("schedule needs 0 < beta_start <= beta_end < 1, got {beta_start}, {beta_end}"));
    }
    let betas: Vec<f64> = (0..steps)
        .map(|k| if steps == 1 { beta_start } else { beta_start + (beta_end - beta_start) * k as f64 / (steps - 1) as f64 })
        .collect();
    let mut alpha_bar = Vec::with_capacity(steps + 1);
    alpha_bar.push(1.0);
    for b in &betas {
        alpha_bar.push(alpha_bar.last().unwrap() * (1.0 - b));
    }
    Ok(NoiseSchedule { beta_start, beta_end, betas, alpha_bar })
}

/// `sqrt(ab) * y + sqrt(1 - ab) * z` for a given cumulative coefficient.
pub fn mix_noise(y: &Tensor, z: &Tensor, alpha_bar: f64) -> Result<Tensor> {
    if y.dims() != z.dims() {
        return Err(invalid!("noise shape {:?} does not match latent {:?}", z.dims(), y.dims()));
    }
    if alpha_bar == 1.0 {
        return Ok(y.clone());
    }
    if alpha_bar == 0.0 {
        return Ok(z.clone());
    }
    Ok(((y * alpha_bar.sqrt())? + (z * (1.0 - alpha_bar).sqrt())?)?)
}

/// The forward process at step `t`; `t = 0` returns `y` unchanged.
pub fn add_noise(y: &LatentTensor, z: &Tensor, t: usize, sched: &NoiseSchedule) -> Result<LatentTensor> {
    if t > sched.steps() {
        return Err(invalid!("timestep {t} outside 0..={}", sched.steps()));
    }
    LatentTensor::new(mix_noise(&y.data, z, sched.alpha_bar(t))?)
}

/// Per-item forward process for a batch with one timestep per item.
fn add_noise_batch(y: &Tensor, z: &Tensor, ts: &[usize], sched: &NoiseSchedule) -> Result<Tensor> {
    let b = ts.len();
    let a: Vec<f32> = ts.iter().map(|&t| sched.alpha_bar(t).sqrt() as f32).collect();
    let s: Vec<f32> = ts.iter().map(|&t| (1.0 - sched.alpha_bar(t)).sqrt() as f32).collect();
    let a = Tensor::from_vec(a, (b, 1, 1, 1), y.device())?;
    let s = Tensor::from_vec(s, (b, 1, 1, 1), y.device())?;
    Ok((y.broadcast_mul(&a)? + z.broadcast_mul(&s)?)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditorNetConfig {
    pub latent_dim: usize,
    /// Patch size on the latent grid.
    pub patch: usize,
    pub width: usize,
    pub depth: usize,
    pub heads: usize,
    pub time_dim: usize,
    /// Patch size on the pixel-resolution pack.
    pub cond_patch: usize,
    pub cond_dim: usize,
    /// Also stack the latent of `x_i` onto the denoiser input.
    pub concat_xi: bool,
}

impl Default for EditorNetConfig {
    fn default() -> Self {
        Self { latent_dim: 4, patch: 2, width: 96, depth: 4, heads: 4, time_dim: 64, cond_patch: 8, cond_dim: 96, concat_xi: false }
    }
}

fn patchify(x: &Tensor, p: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    if h % p != 0 || w % p != 0 {
        return Err(invalid!("{h}x{w} grid is not divisible by patch size {p}"));
    }
    Ok(x
        .reshape(&[b, c, h / p, p, w / p, p][..])?
        .permute(vec![0, 2, 4, 1, 3, 5])?
        .contiguous()?
        .reshape((b, (h / p) * (w / p), c * p * p))?)
}

fn unpatchify(x: &Tensor, c: usize, h: usize, w: usize, p: usize) -> Result<Tensor> {
    let b = x.dims3()?.0;
    Ok(x
        .reshape(&[b, h / p, w / p, c, p, p][..])?
        .permute(vec![0, 3, 1, 4, 2, 5])?
        .contiguous()?
        .reshape((b, c, h, w))?)
}

/// Condition tokens from a pack: patch content projection plus a fixed position code.
pub struct ConditionEmbedder {
    fc1: Linear,
    fc2: Linear,
    cfg: EditorNetConfig,
}

impl ConditionEmbedder {
    pub fn new(p: &ParamPath, cfg: &EditorNetConfig) -> Result<Self> {
        let d_in = 4 * cfg.cond_patch * cfg.cond_patch;
        Ok(Self {
            fc1: Linear::new(&p.pp("fc1"), d_in, cfg.cond_dim)?,
            fc2: Linear::new(&p.pp("fc2"), cfg.cond_dim, cfg.cond_dim)?,
            cfg: cfg.clone(),
        })
    }

    /// Per-patch content part of the tokens, `B x L x d_cond`.
    pub fn content(&self, pack: &Tensor) -> Result<Tensor> {
        let (_, c, _, _) = pack.dims4()?;
        if c != 4 {
            return Err(invalid!("pack tensor must have 4 planes, got {c}"));
        }
        let patches = patchify(pack, self.cfg.cond_patch)?;
        self.fc2.forward(&self.fc1.forward(&patches)?.silu()?)
    }

    pub fn forward(&self, pack: &Tensor) -> Result<Tensor> {
        let (_, _, h, w) = pack.dims4()?;
        let p = self.cfg.cond_patch;
        let pos = position_grid(h / p, w / p, self.cfg.cond_dim, pack.device())?;
        Ok(self.content(pack)?.broadcast_add(&pos)?)
    }

    /// Constant stand-in used when the condition path is ablated.
    pub fn constant(&self, batch: usize, h: usize, w: usize, device: &Device) -> Result<Tensor> {
        let p = self.cfg.cond_patch;
        Ok(Tensor::zeros((batch, (h / p) * (w / p), self.cfg.cond_dim), DType::F32, device)?)
    }
}

/// Embeds one pack into condition tokens (`1 x L x d_cond`).
pub fn embed_condition(pack: &TransformPack, m_e: &ConditionEmbedder, device: &Device) -> Result<Tensor> {
    let (h, w) = (pack.height(), pack.width());
    let planes: Vec<f32> = pack.to_planes().into_iter().map(|v| v as f32).collect();
    m_e.forward(&Tensor::from_vec(planes, (1, 4, h, w), device)?)
}

/// Residual sublayer wrapper normalizing both the input and the output of `f`.
struct DualNorm {
    pre: LayerNorm,
    post: LayerNorm,
}

impl DualNorm {
    fn new(p: &ParamPath, dim: usize) -> Result<Self> {
        Ok(Self { pre: LayerNorm::new(&p.pp("pre"), dim)?, post: LayerNorm::new(&p.pp("post"), dim)? })
    }

    fn apply(&self, x: &Tensor, f: impl FnOnce(&Tensor) -> Result<Tensor>) -> Result<Tensor> {
        Ok((x + self.post.forward(&f(&self.pre.forward(x)?)?)?)?)
    }
}

struct Block {
    n_self: DualNorm,
    self_attn: Attention,
    n_cross: DualNorm,
    cross_attn: Attention,
    n_mlp: DualNorm,
    fc1: Linear,
    fc2: Linear,
}

impl Block {
    fn new(p: &ParamPath, cfg: &EditorNetConfig) -> Result<Self> {
        let d = cfg.width;
        Ok(Self {
            n_self: DualNorm::new(&p.pp("n_self"), d)?,
            self_attn: Attention::new(&p.pp("self_attn"), d, d, cfg.heads)?,
            n_cross: DualNorm::new(&p.pp("n_cross"), d)?,
            cross_attn: Attention::new(&p.pp("cross_attn"), d, cfg.cond_dim, cfg.heads)?,
            n_mlp: DualNorm::new(&p.pp("n_mlp"), d)?,
            fc1: Linear::new(&p.pp("fc1"), d, 4 * d)?,
            fc2: Linear::new(&p.pp("fc2"), 4 * d, d)?,
        })
    }

    fn forward(&self, x: &Tensor, cond: &Tensor) -> Result<Tensor> {
        let x = self.n_self.apply(x, |h| self.self_attn.forward(h, h))?;
        let x = self.n_cross.apply(&x, |h| self.cross_attn.forward(h, cond))?;
        self.n_mlp.apply(&x, |h| self.fc2.forward(&self.fc1.forward(h)?.silu()?))
    }
}

/// Transformer denoiser on the latent grid predicting the clean target latent.
pub struct Denoiser {
    embed: Linear,
    t1: Linear,
    t2: Linear,
    blocks: Vec<Block>,
    norm: LayerNorm,
    out: Linear,
    cfg: EditorNetConfig,
}

impl Denoiser {
    pub fn new(p: &ParamPath, cfg: &EditorNetConfig) -> Result<Self> {
        let stacked = if cfg.concat_xi { 3 } else { 2 } * cfg.latent_dim;
        let pp = cfg.patch * cfg.patch;
        Ok(Self {
            embed: Linear::new(&p.pp("embed"), stacked * pp, cfg.width)?,
            t1: Linear::new(&p.pp("t1"), cfg.time_dim, cfg.width)?,
            t2: Linear::new(&p.pp("t2"), cfg.width, cfg.width)?,
            blocks: (0..cfg.depth).map(|k| Block::new(&p.pp(format!("block{k}")), cfg)).collect::<Result<_>>()?,
            norm: LayerNorm::new(&p.pp("norm"), cfg.width)?,
            out: Linear::new(&p.pp("out"), cfg.width, cfg.latent_dim * pp)?,
            cfg: cfg.clone(),
        })
    }

    pub fn input_channels(&self) -> usize {
        (if self.cfg.concat_xi { 3 } else { 2 }) * self.cfg.latent_dim
    }

    /// `stacked` is the channel concatenation of the noisy latent and its conditions
    /// (`B x input_channels x h x w`); `ts` holds one timestep per item.
    pub fn forward(&self, stacked: &Tensor, ts: &[usize], cond: &Tensor) -> Result<Tensor> {
        let (b, c, h, w) = stacked.dims4()?;
        if c != self.input_channels() {
            return Err(invalid!("denoiser expects {} input channels, got {c}", self.input_channels()));
        }
        if ts.len() != b {
            return Err(invalid!("{} timesteps for a batch of {b}", ts.len()));
        }
        let p = self.cfg.patch;
        let tokens = self.embed.forward(&patchify(stacked, p)?)?;
        let pos = position_grid(h / p, w / p, self.cfg.width, stacked.device())?;
        let tvals: Vec<f64> = ts.iter().map(|&t| t as f64).collect();
        let temb = Tensor::from_vec(sinusoidal(&tvals, self.cfg.time_dim), (b, self.cfg.time_dim), stacked.device())?;
        let temb = self.t2.forward(&self.t1.forward(&temb)?.silu()?)?.unsqueeze(1)?;
        let mut x = tokens.broadcast_add(&pos)?.broadcast_add(&temb)?;
        for blk in &self.blocks {
            x = blk.forward(&x, cond)?;
        }
        let out = self.out.forward(&self.norm.forward(&x)?)?;
        unpatchify(&out, self.cfg.latent_dim, h, w, p)
    }
}

/// Denoiser call on single-item inputs: `y_t_cat_xj` is `1 x input_channels x h x w`.
pub fn predict_target(y_t_cat_xj: &LatentTensor, t: usize, cond: &Tensor, m_y: &Denoiser) -> Result<LatentTensor> {
    LatentTensor::new(m_y.forward(&y_t_cat_xj.data, &[t], cond)?)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub source: SourceNetConfig,
    pub autoencoder: AutoencoderConfig,
    pub editor: EditorNetConfig,
}

impl ModelConfig {
    pub fn for_image(height: usize, width: usize, channels: usize) -> Self {
        Self {
            height,
            width,
            channels,
            source: SourceNetConfig { image_channels: channels, ..Default::default() },
            autoencoder: AutoencoderConfig { image_channels: channels, ..Default::default() },
            editor: EditorNetConfig::default(),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(invalid!("image sides must be divisible by 8, got {}x{}", self.height, self.width));
        }
        let e = &self.editor;
        let (lh, lw) = (self.height / 4, self.width / 4);
        if lh % e.patch != 0 || lw % e.patch != 0 {
            return Err(invalid!("latent grid {lh}x{lw} not divisible by patch {}", e.patch));
        }
        if self.height % e.cond_patch != 0 || self.width % e.cond_patch != 0 {
            return Err(invalid!("image not divisible by condition patch {}", e.cond_patch));
        }
        if e.latent_dim != self.autoencoder.latent_dim {
            return Err(invalid!("editor and autoencoder latent widths differ"));
        }
        Ok(())
    }
}

/// All trainable components sharing one parameter store. Parameter names are
/// prefixed by their component key (`m_x`, `enc`, `dec`, `m_y`, `m_e`).
pub struct EditModel {
    pub store: ParamStore,
    pub m_x: SourceNet,
    pub enc: Encoder,
    pub dec: Decoder,
    pub m_e: ConditionEmbedder,
    pub m_y: Denoiser,
    pub cfg: ModelConfig,
}

pub const COMPONENTS: [&str; 5] = ["m_x", "enc", "dec", "m_y", "m_e"];

impl EditModel {
    pub fn new(cfg: &ModelConfig, init: ChaCha8Rng, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::new(init, device);
        let root = store.root();
        let m_x = SourceNet::new(&root.pp("m_x"), &cfg.source)?;
        let enc = Encoder::new(&root.pp("enc"), &cfg.autoencoder)?;
        let dec = Decoder::new(&root.pp("dec"), &cfg.autoencoder)?;
        let m_e = ConditionEmbedder::new(&root.pp("m_e"), &cfg.editor)?;
        let m_y = Denoiser::new(&root.pp("m_y"), &cfg.editor)?;
        Ok(Self { store, m_x, enc, dec, m_e, m_y, cfg: cfg.clone() })
    }

    pub fn device(&self) -> &Device {
        self.store.device()
    }
}

/// Switches removing one ingredient each; all off is the full method.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Ablations {
    pub no_nn_expansion: bool,
    pub no_xj_concat: bool,
    pub no_fc_condition: bool,
    pub no_skips: bool,
    pub no_noise: bool,
    pub no_freq_loss: bool,
}

impl Ablations {
    pub const NAMES: [&'static str; 6] = ["no_nn_expansion", "no_xj_concat", "no_fc_condition", "no_skips", "no_noise", "no_freq_loss"];

    pub fn set(&mut self, name: &str, on: bool) -> Result<()> {
        let slot = match name {
            "no_nn_expansion" => &mut self.no_nn_expansion,
            "no_xj_concat" => &mut self.no_xj_concat,
            "no_fc_condition" => &mut self.no_fc_condition,
            "no_skips" => &mut self.no_skips,
            "no_noise" => &mut self.no_noise,
            "no_freq_loss" => &mut self.no_freq_loss,
            other => return Err(invalid!("unknown ablation flag {other:?}")),
        };
        *slot = on;
        Ok(())
    }

    pub fn get(&self, name: &str) -> bool {
        match name {
            "no_nn_expansion" => self.no_nn_expansion,
            "no_xj_concat" => self.no_xj_concat,
            "no_fc_condition" => self.no_fc_condition,
            "no_skips" => self.no_skips,
            "no_noise" => self.no_noise,
            "no_freq_loss" => self.no_freq_loss,
            _ => false,
        }
    }

    /// Whether the decoder receives skip features of `x_j`. Without the `x_j` stack the
    /// generator has no access to `x_j`, so its encoder features are withheld too.
    pub fn uses_skips(&self) -> bool {
        !self.no_skips && !self.no_xj_concat
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossWeights {
    pub src: f64,
    pub diff: f64,
    pub freq: f64,
    pub kl: f64,
    pub rec: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { src: 1.0, diff: 1.0, freq: 0.1, kl: 1e-6, rec: 1.0 }
    }
}

/// Everything one training step needs besides the model.
#[derive(Debug, Clone)]
pub struct StepOptions {
    pub weights: LossWeights,
    pub ablations: Ablations,
    pub noise_scale: f64,
    pub lr: f64,
    pub grad_clip: f64,
}

/// One training example after group sampling and augmentation.
#[derive(Debug, Clone)]
pub struct TrainItem {
    pub x_i: ImageTensor,
    pub x_j: ImageTensor,
    pub y_i: ImageTensor,
    pub y_j: ImageTensor,
    pub t: usize,
}

/// Builds one item. With `one_to_one` a single pair plays both roles, so the model
/// sees `x_k` and is asked for `y_k`.
pub fn make_item(
    ds: &PairedDataset,
    n: usize,
    aug: &AugmentConfig,
    sched: &NoiseSchedule,
    one_to_one: bool,
    rng: &mut ChaCha8Rng,
) -> Result<TrainItem> {
    let g = sample_group(ds, n, rng)?;
    let t = rng.random_range(1..=sched.steps());
    let (ri, rj) = if one_to_one { (g.target_index(), g.target_index()) } else { (g.ref_index(), g.target_index()) };
    let (x_j, y_j, _) = paired_augment(ds.x(rj), ds.y(rj), aug, rng)?;
    let (x_i, y_i) = if one_to_one {
        (x_j.clone(), y_j.clone())
    } else {
        let (a, b, _) = paired_augment(ds.x(ri), ds.y(ri), aug, rng)?;
        (a, b)
    };
    Ok(TrainItem { x_i, x_j, y_i, y_j, t })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub total: f64,
    pub src: f64,
    pub diff: f64,
    pub freq: f64,
    pub kl: f64,
    pub rec: f64,
    pub grad_norm: f64,
}

struct Losses {
    total: Tensor,
    parts: [Tensor; 5],
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn batch(items: &[TrainItem], f: impl Fn(&TrainItem) -> &ImageTensor, device: &Device) -> Result<Tensor> {
    let imgs: Vec<&ImageTensor> = items.iter().map(f).collect();
    ImageTensor::batch_to_tensor(&imgs, device)
}

fn forward_losses(model: &EditModel, items: &[TrainItem], sched: &NoiseSchedule, opts: &StepOptions, rng: &mut ChaCha8Rng) -> Result<Losses> {
    let dev = model.device();
    let b = items.len();
    let ab = opts.ablations;
    let (xi, xj) = (batch(items, |it| &it.x_i, dev)?, batch(items, |it| &it.x_j, dev)?);
    let (yi, yj) = (batch(items, |it| &it.y_i, dev)?, batch(items, |it| &it.y_j, dev)?);
    let ts: Vec<usize> = items.iter().map(|it| it.t).collect();

    let pack = model.m_x.forward(&xi, &xj)?;
    // in the one-to-one regime x_i == x_j, and the source network is asked for y
    let src_target = if ab.no_nn_expansion { &yj } else { &xj };
    let l_src = source_loss_tensor(&xi, src_target, &pack)?;

    let enc = model.enc.encode(&Tensor::cat(&[&xj, &yj, &yi], 0)?)?;
    let d = model.cfg.autoencoder.latent_dim;
    let mu = &enc.mu.data;
    let lv = &enc.logvar.data;
    let (mu_xj, mu_yj, mu_yi) = (mu.narrow(0, 0, b)?, mu.narrow(0, b, b)?, mu.narrow(0, 2 * b, b)?);
    let lv_yj = lv.narrow(0, b, b)?;
    let skips_xj = SkipStack { levels: enc.skips.levels.iter().map(|s| s.narrow(0, 0, b)).collect::<candle_core::Result<_>>()? };
    let skips = if ab.uses_skips() { skips_xj } else { skips_xj.zeros_like()? };

    let (_, _, lh, lw) = mu_yi.dims4()?;
    let z = normal_tensor(rng, &[b, d, lh, lw], dev)?;
    // latents reach the generator as data: the encoder is shaped by reconstruction, and
    // cannot outgrow the injected noise by inflating its scale
    let noisy = add_noise_batch(&mu_yi.detach(), &z, &ts, sched)?;
    let xcond = if ab.no_xj_concat { mu_xj.zeros_like()? } else { mu_xj.detach() };
    let mut stack = vec![noisy, xcond];
    if model.cfg.editor.concat_xi {
        let mu_xi = model.enc.encode(&xi)?.mu.data.detach();
        stack.push(mu_xi);
    }
    let stacked = Tensor::cat(&stack, 1)?;
    let cond = if ab.no_fc_condition {
        model.m_e.constant(b, model.cfg.height, model.cfg.width, dev)?
    } else {
        model.m_e.forward(&pack)?
    };
    let y_hat = model.m_y.forward(&stacked, &ts, &cond)?;
    let l_diff = mse(&y_hat, &mu_yj.detach())?;

    // one decoder pass over [prediction; posterior sample of y_j]
    let z_yj = reparameterize(&LatentTensor::new(mu_yj.clone())?, &LatentTensor::new(lv_yj)?, Some(rng))?;
    let dec_in = LatentTensor::new(Tensor::cat(&[&y_hat, &z_yj.data], 0)?)?;
    let dec_skips = SkipStack { levels: skips.levels.iter().map(|s| Tensor::cat(&[s, s], 0)).collect::<candle_core::Result<_>>()? };
    let noise_scale = if ab.no_noise { 0.0 } else { opts.noise_scale };
    let decoded = model.dec.decode(&dec_in, &dec_skips, noise_scale, rng)?;
    let (pred_img, rec_img) = (decoded.narrow(0, 0, b)?, decoded.narrow(0, b, b)?);
    let l_freq = frequency_loss_tensor(&pred_img, &yj, true)?;
    let l_rec = mse(&rec_img, &yj)?;
    let l_kl = kl_loss(&enc.mu, &enc.logvar)?;

    let w = &opts.weights;
    let freq_w = if ab.no_freq_loss { 0.0 } else { w.freq };
    let total = ((((l_src.clone() * w.src)? + (l_diff.clone() * w.diff)?)? + (l_freq.clone() * freq_w)?)?
        + ((l_kl.clone() * w.kl)? + (l_rec.clone() * w.rec)?)?)?;
    Ok(Losses { total, parts: [l_src, l_diff, l_freq, l_kl, l_rec] })
}

/// One joint optimization step over a batch of items. `rng` supplies the diffusion
/// noise, the posterior sample and the decoder noise.
pub fn train_step(
    model: &EditModel,
    opt: &mut Adam,
    items: &[TrainItem],
    sched: &NoiseSchedule,
    opts: &StepOptions,
    rng: &mut ChaCha8Rng,
) -> Result<LossReport> {
    if items.is_empty() {
        return Err(invalid!("empty training batch"));
    }
    let losses = forward_losses(model, items, sched, opts, rng)?;
    let [src, diff, freq, kl, rec] = losses.parts.each_ref().map(scalar);
    let total = scalar(&losses.total)?;
    if !total.is_finite() {
        return Err(Error::TrainingFault { step: opt.step + 1, reason: format!("non-finite loss {total}") });
    }
    let grads = losses.total.backward()?;
    let grad_norm = opt.update(&model.store.vars(), &grads, opts.lr, opts.grad_clip)?;
    if !grad_norm.is_finite() {
        return Err(Error::TrainingFault { step: opt.step, reason: format!("non-finite gradient norm {grad_norm}") });
    }
    Ok(LossReport { total, src: src?, diff: diff?, freq: freq?, kl: kl?, rec: rec?, grad_norm })
}

/// Timesteps visited by a `steps`-step sampler, from `T` downwards.
pub fn sampler_timesteps(t_max: usize, steps: usize) -> Vec<usize> {
    let steps = steps.clamp(1, t_max);
    let mut ts: Vec<usize> = (0..steps).map(|k| t_max - (k * t_max) / steps).collect();
    ts.dedup();
    ts
}

/// Result of editing one image.
#[derive(Debug, Clone)]
pub struct EditOutput {
    pub image: ImageTensor,
    /// Dataset index of the reference pair that was drawn.
    pub reference: usize,
}

/// Edits `x_j` by transferring the edit of a randomly drawn training pair.
pub fn sample_edit(
    x_j: &ImageTensor,
    ds: &PairedDataset,
    steps: usize,
    model: &EditModel,
    sched: &NoiseSchedule,
    ablations: &Ablations,
    noise_scale: f64,
    rng: &mut ChaCha8Rng,
) -> Result<EditOutput> {
    if steps < 1 {
        return Err(invalid!("sampler needs at least one step"));
    }
    let (h, w, c) = (model.cfg.height, model.cfg.width, model.cfg.channels);
    if x_j.shape() != (h, w, c) {
        return Err(invalid!("image is {:?}, model expects {:?}", x_j.shape(), (h, w, c)));
    }
    if ds.shape() != (h, w, c) {
        return Err(invalid!("reference pairs are {:?}, model expects {:?}", ds.shape(), (h, w, c)));
    }
    let dev = model.device();
    let k = rng.random_range(0..ds.m());
    let xi = ImageTensor::batch_to_tensor(&[ds.x(k)], dev)?;
    let yi = ImageTensor::batch_to_tensor(&[ds.y(k)], dev)?;
    let xj = ImageTensor::batch_to_tensor(&[x_j], dev)?;

    let pack = model.m_x.forward(&xi, &xj)?;
    let cond = if ablations.no_fc_condition { model.m_e.constant(1, h, w, dev)? } else { model.m_e.forward(&pack)? };
    let enc_xj = model.enc.encode(&xj)?;
    let skips = if ablations.uses_skips() { enc_xj.skips.clone() } else { enc_xj.skips.zeros_like()? };
    let xcond = if ablations.no_xj_concat { enc_xj.mu.data.zeros_like()? } else { enc_xj.mu.data.clone() };
    let xi_lat = if model.cfg.editor.concat_xi { Some(model.enc.encode(&xi)?.mu.data) } else { None };
    let mu_yi = model.enc.encode(&yi)?.mu.data;

    let t_max = sched.steps();
    let z = normal_tensor(rng, mu_yi.dims(), dev)?;
    let mut state = mix_noise(&mu_yi, &z, sched.alpha_bar(t_max))?;
    let ts = sampler_timesteps(t_max, steps);
    let mut y_hat = state.clone();
    for (s, &t) in ts.iter().enumerate() {
        let mut parts = vec![state.clone(), xcond.clone()];
        parts.extend(xi_lat.iter().cloned());
        y_hat = model.m_y.forward(&Tensor::cat(&parts, 1)?, &[t], &cond)?;
        let next = ts.get(s + 1).copied().unwrap_or(0);
        if next > 0 {
            // re-anchor on the clean estimate, keep the implied noise direction
            let (a_t, a_n) = (sched.alpha_bar(t), sched.alpha_bar(next));
            let z_hat = ((&state - (&y_hat * a_t.sqrt())?)? / (1.0 - a_t).sqrt())?;
            state = ((&y_hat * a_n.sqrt())? + (z_hat * (1.0 - a_n).sqrt())?)?;
        }
    }
    let ns = if ablations.no_noise { 0.0 } else { noise_scale };
    let out = model.dec.decode(&LatentTensor::new(y_hat)?, &skips, ns, rng)?;
    let image = ImageTensor::batch_from_tensor(&out)?.remove(0).clamped();
    Ok(EditOutput { image, reference: k })
}
