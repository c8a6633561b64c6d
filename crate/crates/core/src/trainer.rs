//! Run configuration, the joint training loop, checkpoints, and the edit / eval / synth
//! commands built on top of them.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype, TensorView};
use safetensors::SafeTensors;
use serde::{Deserialize, Serialize};

use crate::diffusion_editor::{
    make_item, make_linear_schedule, sample_edit, train_step, Ablations, EditModel, LossReport, LossWeights, ModelConfig,
    NoiseSchedule, StepOptions, COMPONENTS,
};
use crate::error::{invalid, Error, Result};
use crate::image::ImageTensor;
use crate::losses_metrics::{evaluate, EvalReport, DEFAULT_TAU};
use crate::nn::{derive_rng, Adam};
use crate::pair_sampler::{AugmentConfig, PairedDataset};
use crate::synth_data::{generate_spec, load_pair_folder, save_pair_folder, SynthSpec, SynthTask};

/// Environment variable naming the directory runs and reports are written under.
pub const OUT_ROOT_ENV: &str = "PAIREDIT_OUT";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.safetensors";
pub const DIAGNOSTIC_FILE: &str = "diagnostic.safetensors";
pub const LOG_FILE: &str = "metrics.log";
const META_KEY: &str = "pairedit";

// stream tags for derive_rng
const TAG_INIT: u64 = 1;
const TAG_ITEM: u64 = 2;
const TAG_STEP: u64 = 3;
const TAG_EVAL: u64 = 4;

/// Output root from the environment, `runs` when unset.
pub fn out_root() -> PathBuf {
    std::env::var_os(OUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| PathBuf::from("runs"))
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synth(SynthTask),
    Folder(PathBuf),
}

impl DataSource {
    fn parse(s: &str) -> Result<Self> {
        match s.strip_prefix("synth:") {
            Some(task) => Ok(DataSource::Synth(SynthTask::parse(task)?)),
            None if s.is_empty() => Err(invalid!("empty data source")),
            None => Ok(DataSource::Folder(PathBuf::from(s))),
        }
    }

    fn render(&self) -> String {
        match self {
            DataSource::Synth(t) => format!("synth:{}", t.name()),
            DataSource::Folder(p) => p.display().to_string(),
        }
    }
}

/// Everything that determines a run. Serialized as flat `key = value` lines.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub data: DataSource,
    pub size: usize,
    pub m: usize,
    /// Group size; 2 means one reference pair and one target pair.
    pub n: usize,
    pub data_seed: u64,
    /// Held-out pair folder; synthetic data generates its own.
    pub eval_data: Option<PathBuf>,
    pub eval_pairs: usize,
    pub eval_seed: u64,
    pub t_max: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub weights: LossWeights,
    pub noise_scale: f64,
    pub augment: AugmentConfig,
    pub lr: f64,
    /// Floor of the cosine decay.
    pub lr_min: f64,
    pub steps: u64,
    pub batch: usize,
    pub grad_clip: f64,
    pub seed: u64,
    pub ablations: Ablations,
    pub model: ModelWidths,
    /// Sampler steps used for held-out evaluation and as the edit default.
    pub sample_steps: usize,
    /// Held-out evaluation period in steps; the final step is always evaluated.
    pub eval_every: u64,
    pub tau: f64,
    /// Extra step-stamped checkpoints; the final checkpoint is always written.
    pub ckpt_every: u64,
    pub log_every: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelWidths {
    pub mx_base: usize,
    pub max_displacement: f64,
    pub ae_c0: usize,
    pub ae_c1: usize,
    pub latent_dim: usize,
    pub vit_patch: usize,
    pub vit_width: usize,
    pub vit_depth: usize,
    pub vit_heads: usize,
    pub time_dim: usize,
    pub cond_patch: usize,
    pub cond_dim: usize,
    pub concat_xi: bool,
}

impl Default for ModelWidths {
    fn default() -> Self {
        let m = ModelConfig::for_image(64, 64, 3);
        Self {
            mx_base: m.source.base,
            max_displacement: m.source.max_displacement,
            ae_c0: m.autoencoder.c0,
            ae_c1: m.autoencoder.c1,
            latent_dim: m.autoencoder.latent_dim,
            vit_patch: m.editor.patch,
            vit_width: m.editor.width,
            vit_depth: m.editor.depth,
            vit_heads: m.editor.heads,
            time_dim: m.editor.time_dim,
            cond_patch: m.editor.cond_patch,
            cond_dim: m.editor.cond_dim,
            concat_xi: m.editor.concat_xi,
        }
    }
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataSource::Synth(SynthTask::Dot),
            size: 64,
            m: 10,
            n: 2,
            data_seed: 1,
            eval_data: None,
            eval_pairs: 20,
            eval_seed: 1_000_003,
            t_max: 100,
            beta_start: 1e-4,
            beta_end: 0.02,
            weights: LossWeights::default(),
            noise_scale: 1.0,
            augment: AugmentConfig::default(),
            lr: 2e-4,
            lr_min: 0.0,
            steps: 5000,
            batch: 8,
            grad_clip: 1.0,
            seed: 0,
            ablations: Ablations::default(),
            model: ModelWidths::default(),
            sample_steps: 10,
            eval_every: 0,
            tau: DEFAULT_TAU,
            ckpt_every: 0,
            log_every: 1,
        }
    }
}

fn num<T: std::str::FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse().map_err(|_| invalid!("bad value for {key}: {v:?}"))
}

fn flag(key: &str, v: &str) -> Result<bool> {
    match v {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(invalid!("bad value for {key}: {v:?} (expected true/false)")),
    }
}

impl RunConfig {
    /// Parses `key = value` lines on top of the defaults. `#` starts a comment.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| invalid!("line {}: expected key = value", lineno + 1))?;
            cfg.set(k.trim(), v.trim())?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        if key == "ablate" {
            return self.set_ablations(v);
        }
        let a = &mut self.augment;
        let w = &mut self.model;
        match key {
            "data" => self.data = DataSource::parse(v)?,
            "size" => self.size = num(key, v)?,
            "m" => self.m = num(key, v)?,
            "n" => self.n = num(key, v)?,
            "data_seed" => self.data_seed = num(key, v)?,
            "eval_data" => self.eval_data = if v.is_empty() { None } else { Some(PathBuf::from(v)) },
            "eval_pairs" => self.eval_pairs = num(key, v)?,
            "eval_seed" => self.eval_seed = num(key, v)?,
            "t_max" => self.t_max = num(key, v)?,
            "beta_start" => self.beta_start = num(key, v)?,
            "beta_end" => self.beta_end = num(key, v)?,
            "w_src" => self.weights.src = num(key, v)?,
            "w_diff" => self.weights.diff = num(key, v)?,
            "w_freq" => self.weights.freq = num(key, v)?,
            "w_kl" => self.weights.kl = num(key, v)?,
            "w_rec" => self.weights.rec = num(key, v)?,
            "noise_scale" => self.noise_scale = num(key, v)?,
            "aug_flip_p" => a.flip_p = num(key, v)?,
            "aug_jitter_p" => a.jitter_p = num(key, v)?,
            "aug_brightness" => a.brightness = num(key, v)?,
            "aug_contrast" => a.contrast = num(key, v)?,
            "aug_affine_p" => a.affine_p = num(key, v)?,
            "aug_rotate_deg" => a.rotate_deg = num(key, v)?,
            "aug_translate" => a.translate = num(key, v)?,
            "aug_scale_min" => a.scale_min = num(key, v)?,
            "aug_scale_max" => a.scale_max = num(key, v)?,
            "lr" => self.lr = num(key, v)?,
            "lr_min" => self.lr_min = num(key, v)?,
            "steps" => self.steps = num(key, v)?,
            "batch" => self.batch = num(key, v)?,
            "grad_clip" => self.grad_clip = num(key, v)?,
            "seed" => self.seed = num(key, v)?,
            "mx_base" => w.mx_base = num(key, v)?,
            "max_displacement" => w.max_displacement = num(key, v)?,
            "ae_c0" => w.ae_c0 = num(key, v)?,
            "ae_c1" => w.ae_c1 = num(key, v)?,
            "latent_dim" => w.latent_dim = num(key, v)?,
            "vit_patch" => w.vit_patch = num(key, v)?,
            "vit_width" => w.vit_width = num(key, v)?,
            "vit_depth" => w.vit_depth = num(key, v)?,
            "vit_heads" => w.vit_heads = num(key, v)?,
            "time_dim" => w.time_dim = num(key, v)?,
            "cond_patch" => w.cond_patch = num(key, v)?,
            "cond_dim" => w.cond_dim = num(key, v)?,
            "concat_xi" => w.concat_xi = flag(key, v)?,
            "sample_steps" => self.sample_steps = num(key, v)?,
            "eval_every" => self.eval_every = num(key, v)?,
            "tau" => self.tau = num(key, v)?,
            "ckpt_every" => self.ckpt_every = num(key, v)?,
            "log_every" => self.log_every = num(key, v)?,
            other => return Err(invalid!("unknown config key {other:?}")),
        }
        Ok(())
    }

    /// Replaces the ablation set with a comma-separated list of flag names.
    pub fn set_ablations(&mut self, list: &str) -> Result<()> {
        let mut ab = Ablations::default();
        for name in list.split(',').map(str::trim).filter(|s| !s.is_empty()) {
            ab.set(name, true)?;
        }
        self.ablations = ab;
        Ok(())
    }

    fn ablation_list(&self) -> String {
        Ablations::NAMES.iter().filter(|n| self.ablations.get(n)).copied().collect::<Vec<_>>().join(",")
    }

    /// Every key with its resolved value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let a = &self.augment;
        let w = &self.model;
        let wt = &self.weights;
        vec![
            ("data", self.data.render()),
            ("size", self.size.to_string()),
            ("m", self.m.to_string()),
            ("n", self.n.to_string()),
            ("data_seed", self.data_seed.to_string()),
            ("eval_data", self.eval_data.as_ref().map(|p| p.display().to_string()).unwrap_or_default()),
            ("eval_pairs", self.eval_pairs.to_string()),
            ("eval_seed", self.eval_seed.to_string()),
            ("t_max", self.t_max.to_string()),
            ("beta_start", self.beta_start.to_string()),
            ("beta_end", self.beta_end.to_string()),
            ("w_src", wt.src.to_string()),
            ("w_diff", wt.diff.to_string()),
            ("w_freq", wt.freq.to_string()),
            ("w_kl", wt.kl.to_string()),
            ("w_rec", wt.rec.to_string()),
            ("noise_scale", self.noise_scale.to_string()),
            ("aug_flip_p", a.flip_p.to_string()),
            ("aug_jitter_p", a.jitter_p.to_string()),
            ("aug_brightness", a.brightness.to_string()),
            ("aug_contrast", a.contrast.to_string()),
            ("aug_affine_p", a.affine_p.to_string()),
            ("aug_rotate_deg", a.rotate_deg.to_string()),
            ("aug_translate", a.translate.to_string()),
            ("aug_scale_min", a.scale_min.to_string()),
            ("aug_scale_max", a.scale_max.to_string()),
            ("lr", self.lr.to_string()),
            ("lr_min", self.lr_min.to_string()),
            ("steps", self.steps.to_string()),
            ("batch", self.batch.to_string()),
            ("grad_clip", self.grad_clip.to_string()),
            ("seed", self.seed.to_string()),
            ("ablate", self.ablation_list()),
            ("mx_base", w.mx_base.to_string()),
            ("max_displacement", w.max_displacement.to_string()),
            ("ae_c0", w.ae_c0.to_string()),
            ("ae_c1", w.ae_c1.to_string()),
            ("latent_dim", w.latent_dim.to_string()),
            ("vit_patch", w.vit_patch.to_string()),
            ("vit_width", w.vit_width.to_string()),
            ("vit_depth", w.vit_depth.to_string()),
            ("vit_heads", w.vit_heads.to_string()),
            ("time_dim", w.time_dim.to_string()),
            ("cond_patch", w.cond_patch.to_string()),
            ("cond_dim", w.cond_dim.to_string()),
            ("concat_xi", w.concat_xi.to_string()),
            ("sample_steps", self.sample_steps.to_string()),
            ("eval_every", self.eval_every.to_string()),
            ("tau", self.tau.to_string()),
            ("ckpt_every", self.ckpt_every.to_string()),
            ("log_every", self.log_every.to_string()),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn model_config(&self) -> ModelConfig {
        let w = &self.model;
        let mut c = ModelConfig::for_image(self.size, self.size, 3);
        c.source.base = w.mx_base;
        c.source.max_displacement = w.max_displacement;
        c.autoencoder.c0 = w.ae_c0;
        c.autoencoder.c1 = w.ae_c1;
        c.autoencoder.latent_dim = w.latent_dim;
        let e = &mut c.editor;
        e.latent_dim = w.latent_dim;
        e.patch = w.vit_patch;
        e.width = w.vit_width;
        e.depth = w.vit_depth;
        e.heads = w.vit_heads;
        e.time_dim = w.time_dim;
        e.cond_patch = w.cond_patch;
        e.cond_dim = w.cond_dim;
        e.concat_xi = w.concat_xi;
        c
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        make_linear_schedule(self.t_max, self.beta_start, self.beta_end)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 2 {
            return Err(invalid!("group size n must be at least 2, got {}", self.n));
        }
        if self.batch == 0 || self.steps == 0 {
            return Err(invalid!("batch and steps must be positive"));
        }
        if self.sample_steps == 0 {
            return Err(invalid!("sample_steps must be positive"));
        }
        if !(self.lr > 0.0 && self.lr_min >= 0.0 && self.lr_min <= self.lr) {
            return Err(invalid!("need 0 <= lr_min <= lr and lr > 0"));
        }
        if let DataSource::Synth(_) = self.data {
            if self.m < self.n - 1 {
                return Err(invalid!("m={} is too small for groups of {}", self.m, self.n));
            }
        }
        Ok(())
    }

    /// Cosine decay from `lr` at step 0 to `lr_min` at `steps`.
    pub fn lr_at(&self, step: u64) -> f64 {
        let frac = step.min(self.steps) as f64 / self.steps as f64;
        self.lr_min + 0.5 * (self.lr - self.lr_min) * (1.0 + (std::f64::consts::PI * frac).cos())
    }

    /// Training pairs and, when available, the held-out pairs.
    pub fn datasets(&self) -> Result<(PairedDataset, Option<PairedDataset>)> {
        match &self.data {
            DataSource::Synth(task) => {
                let train = generate_spec(&SynthSpec { task: *task, size: self.size, m: self.m, seed: self.data_seed })?;
                let held = match &self.eval_data {
                    Some(p) => load_pair_folder(p, Some((self.size, self.size)))?.0,
                    None => {
                        if self.eval_seed == self.data_seed {
                            return Err(invalid!("eval_seed must differ from data_seed"));
                        }
                        generate_spec(&SynthSpec { task: *task, size: self.size, m: self.eval_pairs, seed: self.eval_seed })?
                    }
                };
                if held.pairs().iter().any(|(x, _)| train.pairs().iter().any(|(tx, _)| tx == x)) {
                    return Err(invalid!("held-out pairs overlap the training pairs"));
                }
                Ok((train, Some(held)))
            }
            DataSource::Folder(p) => {
                let (train, rep) = load_pair_folder(p, Some((self.size, self.size)))?;
                for w in &rep.warnings {
                    log::warn!("{w}");
                }
                let held = match &self.eval_data {
                    Some(e) => Some(load_pair_folder(e, Some((self.size, self.size)))?.0),
                    None => None,
                };
                Ok((train, held))
            }
        }
    }
}

/// Serialized training state.
pub struct Checkpoint {
    pub version: u32,
    pub config: RunConfig,
    /// Completed optimization steps.
    pub step: u64,
    /// Per-step generators are derived from `(seed, step)`, so this plus `step` is the
    /// complete generator state.
    pub rng_seed: u64,
    pub params: BTreeMap<String, Tensor>,
    pub adam_step: u64,
    pub moments: BTreeMap<String, (Vec<f32>, Vec<f32>)>,
    /// Reference pairs the editor draws from at inference time.
    pub train: PairedDataset,
}

#[derive(Serialize, Deserialize)]
struct ScheduleMeta {
    t_max: usize,
    beta_start: f64,
    beta_end: f64,
}

#[derive(Serialize, Deserialize)]
struct CheckpointMeta {
    format_version: u32,
    components: Vec<String>,
    config: String,
    step: u64,
    rng_seed: u64,
    adam_step: u64,
    sched: ScheduleMeta,
}

fn f32_bytes(v: &[f32]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn f64_bytes(v: &[f64]) -> Vec<u8> {
    v.iter().flat_map(|x| x.to_le_bytes()).collect()
}

fn bytes_f32(b: &[u8]) -> Vec<f32> {
    b.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()
}

fn bytes_f64(b: &[u8]) -> Vec<f64> {
    b.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()
}

fn ck_err(e: impl std::fmt::Display) -> Error {
    Error::Checkpoint(e.to_string())
}

/// Writes `bytes` to a sibling temp file and renames it over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).and_then(|_| f.sync_all()).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut blobs: Vec<(String, Vec<usize>, Dtype, Vec<u8>)> = Vec::new();
        for (name, t) in &self.params {
            let v: Vec<f32> = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1()?;
            blobs.push((name.clone(), t.dims().to_vec(), Dtype::F32, f32_bytes(&v)));
        }
        for (name, (m, v)) in &self.moments {
            blobs.push((format!("adam.m.{name}"), vec![m.len()], Dtype::F32, f32_bytes(m)));
            blobs.push((format!("adam.v.{name}"), vec![v.len()], Dtype::F32, f32_bytes(v)));
        }
        let (h, w, c) = self.train.shape();
        let shape = vec![self.train.m(), h, w, c];
        let xs: Vec<f64> = self.train.pairs().iter().flat_map(|(x, _)| x.data().iter().copied()).collect();
        let ys: Vec<f64> = self.train.pairs().iter().flat_map(|(_, y)| y.data().iter().copied()).collect();
        blobs.push(("data.x".into(), shape.clone(), Dtype::F64, f64_bytes(&xs)));
        blobs.push(("data.y".into(), shape, Dtype::F64, f64_bytes(&ys)));

        let meta = CheckpointMeta {
            format_version: self.version,
            components: COMPONENTS.iter().map(|s| s.to_string()).collect(),
            config: self.config.to_text(),
            step: self.step,
            rng_seed: self.rng_seed,
            adam_step: self.adam_step,
            sched: ScheduleMeta { t_max: self.config.t_max, beta_start: self.config.beta_start, beta_end: self.config.beta_end },
        };
        // a single metadata entry keeps the header byte-stable
        let info = HashMap::from([(META_KEY.to_string(), serde_json::to_string(&meta).map_err(ck_err)?)]);
        let views = blobs
            .iter()
            .map(|(n, s, d, b)| TensorView::new(*d, s.clone(), b).map(|v| (n.clone(), v)))
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(ck_err)?;
        safetensors::serialize(views, Some(info)).map_err(ck_err)
    }

    pub fn from_bytes(bytes: &[u8], device: &Device) -> Result<Self> {
        let (_, header) = SafeTensors::read_metadata(bytes).map_err(ck_err)?;
        let raw = header
            .metadata()
            .as_ref()
            .and_then(|m| m.get(META_KEY))
            .ok_or_else(|| Error::Checkpoint("missing metadata".into()))?;
        let meta: CheckpointMeta = serde_json::from_str(raw).map_err(ck_err)?;
        if meta.format_version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!("unsupported format version {}", meta.format_version)));
        }
        let config = RunConfig::parse(&meta.config)?;
        if (meta.sched.t_max, meta.sched.beta_start, meta.sched.beta_end) != (config.t_max, config.beta_start, config.beta_end) {
            return Err(Error::Checkpoint("schedule metadata disagrees with the config snapshot".into()));
        }
        let st = SafeTensors::deserialize(bytes).map_err(ck_err)?;
        let mut params = BTreeMap::new();
        let mut m_parts = BTreeMap::new();
        let mut v_parts = BTreeMap::new();
        let (mut xs, mut ys) = (None, None);
        for (name, view) in st.tensors() {
            if let Some(p) = name.strip_prefix("adam.m.") {
                m_parts.insert(p.to_string(), bytes_f32(view.data()));
            } else if let Some(p) = name.strip_prefix("adam.v.") {
                v_parts.insert(p.to_string(), bytes_f32(view.data()));
            } else if name == "data.x" || name == "data.y" {
                if view.dtype() != Dtype::F64 || view.shape().len() != 4 {
                    return Err(Error::Checkpoint(format!("{name} must be a 4-d f64 array")));
                }
                let slot = if name == "data.x" { &mut xs } else { &mut ys };
                *slot = Some((view.shape().to_vec(), bytes_f64(view.data())));
            } else {
                let component = name.split('.').next().unwrap_or("");
                if !COMPONENTS.contains(&component) {
                    return Err(Error::Checkpoint(format!("tensor {name} belongs to no known component")));
                }
                if view.dtype() != Dtype::F32 {
                    return Err(Error::Checkpoint(format!("tensor {name} is not f32")));
                }
                params.insert(name.clone(), Tensor::from_vec(bytes_f32(view.data()), view.shape(), device)?);
            }
        }
        let mut moments = BTreeMap::new();
        for (name, m) in m_parts {
            let v = v_parts.remove(&name).ok_or_else(|| Error::Checkpoint(format!("adam moments for {name} incomplete")))?;
            moments.insert(name, (m, v));
        }
        let ((shape, xs), (yshape, ys)) = match (xs, ys) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(Error::Checkpoint("reference pairs missing".into())),
        };
        if shape != yshape {
            return Err(Error::Checkpoint("reference pair arrays differ in shape".into()));
        }
        let (m, h, w, c) = (shape[0], shape[1], shape[2], shape[3]);
        let per = h * w * c;
        let pairs = (0..m)
            .map(|k| {
                Ok((
                    ImageTensor::new(h, w, c, xs[k * per..(k + 1) * per].to_vec())?,
                    ImageTensor::new(h, w, c, ys[k * per..(k + 1) * per].to_vec())?,
                ))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            version: meta.format_version,
            config,
            step: meta.step,
            rng_seed: meta.rng_seed,
            params,
            adam_step: meta.adam_step,
            moments,
            train: PairedDataset::new(pairs)?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path, device: &Device) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, device)
    }

    /// Rebuilds the model described by the snapshot and loads the weights into it.
    pub fn model(&self, device: &Device) -> Result<EditModel> {
        let model = EditModel::new(&self.config.model_config(), derive_rng(self.rng_seed, &[TAG_INIT]), device)?;
        model.store.load(&self.params)?;
        Ok(model)
    }
}

/// Append-only, line-flushed metric log.
struct MetricLog {
    file: fs::File,
    path: PathBuf,
}

impl MetricLog {
    fn create(path: &Path, cfg: &RunConfig) -> Result<Self> {
        let mut log = Self { file: fs::File::create(path).map_err(|e| Error::io(path, e))?, path: path.into() };
        log.line("# pairedit training log")?;
        for (k, v) in cfg.entries() {
            log.line(&format!("# {k} = {v}"))?;
        }
        Ok(log)
    }

    fn append(path: &Path) -> Result<Self> {
        let file = fs::OpenOptions::new().append(true).create(true).open(path).map_err(|e| Error::io(path, e))?;
        Ok(Self { file, path: path.into() })
    }

    fn line(&mut self, s: &str) -> Result<()> {
        writeln!(self.file, "{s}").map_err(|e| Error::io(&self.path, e))
    }
}

pub fn format_step(step: u64, lr: f64, r: &LossReport) -> String {
    format!(
        "step={step} lr={lr:.6e} total={:.6e} src={:.6e} diff={:.6e} freq={:.6e} kl={:.6e} rec={:.6e} gnorm={:.6e}",
        r.total, r.src, r.diff, r.freq, r.kl, r.rec, r.grad_norm
    )
}

pub fn format_eval(step: u64, r: &EvalReport) -> String {
    format!(
        "eval step={step} fid={:.6e} psnr_mean={:.6} diou={:.6} n_samples={} tau={}",
        r.fid, r.psnr_mean, r.diou, r.n_samples, r.tau
    )
}

/// A model, its optimizer state and its data, advanced one step at a time.
pub struct Trainer {
    pub cfg: RunConfig,
    pub model: EditModel,
    pub opt: Adam,
    pub train: PairedDataset,
    pub held_out: Option<PairedDataset>,
    pub sched: NoiseSchedule,
    /// Completed steps.
    pub step: u64,
}

impl Trainer {
    pub fn new(cfg: &RunConfig, device: &Device) -> Result<Self> {
        cfg.validate()?;
        let (train, held_out) = cfg.datasets()?;
        let model = EditModel::new(&cfg.model_config(), derive_rng(cfg.seed, &[TAG_INIT]), device)?;
        Ok(Self { cfg: cfg.clone(), model, opt: Adam::default(), train, held_out, sched: cfg.schedule()?, step: 0 })
    }

    pub fn from_checkpoint(ck: &Checkpoint, device: &Device) -> Result<Self> {
        ck.config.validate()?;
        let model = ck.model(device)?;
        let mut opt = Adam::default();
        opt.step = ck.adam_step;
        opt.set_moments(ck.moments.clone());
        let (_, held_out) = ck.config.datasets()?;
        Ok(Self {
            cfg: ck.config.clone(),
            model,
            opt,
            train: ck.train.clone(),
            held_out,
            sched: ck.config.schedule()?,
            step: ck.step,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            version: CHECKPOINT_VERSION,
            config: self.cfg.clone(),
            step: self.step,
            rng_seed: self.cfg.seed,
            params: self.model.store.named_tensors().into_iter().collect(),
            adam_step: self.opt.step,
            moments: self.opt.moments().clone(),
            train: self.train.clone(),
        }
    }

    pub fn step_options(&self) -> StepOptions {
        StepOptions {
            weights: self.cfg.weights.clone(),
            ablations: self.cfg.ablations,
            noise_scale: self.cfg.noise_scale,
            lr: self.cfg.lr_at(self.step),
            grad_clip: self.cfg.grad_clip,
        }
    }

    /// Runs one optimization step; the item and noise generators depend only on the
    /// seed and the step index.
    pub fn step_once(&mut self) -> Result<LossReport> {
        let s = self.step;
        let one_to_one = self.cfg.ablations.no_nn_expansion;
        let items = (0..self.cfg.batch)
            .map(|k| {
                let mut rng = derive_rng(self.cfg.seed, &[TAG_ITEM, s, k as u64]);
                make_item(&self.train, self.cfg.n, &self.cfg.augment, &self.sched, one_to_one, &mut rng)
            })
            .collect::<Result<Vec<_>>>()?;
        let opts = self.step_options();
        let report = train_step(&self.model, &mut self.opt, &items, &self.sched, &opts, &mut derive_rng(self.cfg.seed, &[TAG_STEP, s]))?;
        self.step += 1;
        Ok(report)
    }

    /// Edits every held-out source with `sample_steps` sampler steps and scores the
    /// results against the held-out targets.
    pub fn evaluate(&self) -> Result<Option<EvalReport>> {
        let Some(held) = &self.held_out else { return Ok(None) };
        let generated = edit_all(&self.model, &self.train, held, &self.cfg, self.cfg.seed)?;
        let sources: Vec<ImageTensor> = held.pairs().iter().map(|(x, _)| x.clone()).collect();
        let refs: Vec<ImageTensor> = held.pairs().iter().map(|(_, y)| y.clone()).collect();
        evaluate(&sources, &generated, &refs, self.cfg.tau).map(Some)
    }
}

fn edit_all(model: &EditModel, train: &PairedDataset, held: &PairedDataset, cfg: &RunConfig, seed: u64) -> Result<Vec<ImageTensor>> {
    let sched = cfg.schedule()?;
    held.pairs()
        .iter()
        .enumerate()
        .map(|(k, (x, _))| {
            let mut rng = derive_rng(seed, &[TAG_EVAL, k as u64]);
            Ok(sample_edit(x, train, cfg.sample_steps, model, &sched, &cfg.ablations, cfg.noise_scale, &mut rng)?.image)
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub run_dir: PathBuf,
    pub checkpoint: PathBuf,
    pub final_eval: Option<EvalReport>,
    pub last_loss: Option<LossReport>,
}

/// Trains `cfg` into `run_dir` (or continues `resume`), writing `metrics.log`, the final
/// checkpoint and, when held-out data exists, `report.txt` / `report.json`.
pub fn cmd_train(cfg: &RunConfig, run_dir: &Path, resume: Option<&Path>, device: &Device) -> Result<TrainOutcome> {
    fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
    let log_path = run_dir.join(LOG_FILE);
    let (mut trainer, mut log) = match resume {
        Some(ck) => {
            let ck = Checkpoint::load(ck, device)?;
            if &ck.config != cfg {
                log::warn!("resuming with the checkpoint's configuration; command-line config ignored");
            }
            let t = Trainer::from_checkpoint(&ck, device)?;
            let mut log = MetricLog::append(&log_path)?;
            log.line(&format!("# resumed step={}", t.step))?;
            (t, log)
        }
        None => (Trainer::new(cfg, device)?, MetricLog::create(&log_path, cfg)?),
    };
    log::info!(
        "training {} parameters for {} steps into {}",
        trainer.model.store.num_params(),
        trainer.cfg.steps,
        run_dir.display()
    );
    let started = std::time::Instant::now();
    let mut last_loss = None;
    let mut final_eval = None;
    while trainer.step < trainer.cfg.steps {
        let lr = trainer.cfg.lr_at(trainer.step);
        let report = match trainer.step_once() {
            Ok(r) => r,
            Err(e @ Error::TrainingFault { .. }) => {
                let diag = run_dir.join(DIAGNOSTIC_FILE);
                trainer.checkpoint().save(&diag)?;
                log.line(&format!("# fault: {e}; diagnostic checkpoint {}", diag.display()))?;
                return Err(e);
            }
            Err(e) => return Err(e),
        };
        let s = trainer.step;
        if trainer.cfg.log_every > 0 && (s % trainer.cfg.log_every == 0 || s == trainer.cfg.steps) {
            log.line(&format_step(s, lr, &report))?;
        }
        if s % 100 == 0 {
            log::info!("step {s} total {:.4e} ({:.1}s)", report.total, started.elapsed().as_secs_f64());
        }
        last_loss = Some(report);
        let is_last = s == trainer.cfg.steps;
        if is_last || (trainer.cfg.eval_every > 0 && s % trainer.cfg.eval_every == 0) {
            if let Some(r) = trainer.evaluate()? {
                log.line(&format_eval(s, &r))?;
                if is_last {
                    r.write(run_dir)?;
                    final_eval = Some(r);
                }
            }
        }
        if trainer.cfg.ckpt_every > 0 && s % trainer.cfg.ckpt_every == 0 && !is_last {
            trainer.checkpoint().save(&run_dir.join(format!("ckpt-{s:06}.safetensors")))?;
        }
    }
    let ckpt = run_dir.join(CHECKPOINT_FILE);
    trainer.checkpoint().save(&ckpt)?;
    Ok(TrainOutcome { run_dir: run_dir.into(), checkpoint: ckpt, final_eval, last_loss })
}

#[derive(Debug, Clone)]
pub struct EditOptions {
    /// Sampler steps; `None` uses the value stored with the run.
    pub steps: Option<usize>,
    pub seed: u64,
    pub suffix: String,
    pub strict: bool,
}

impl Default for EditOptions {
    fn default() -> Self {
        Self { steps: None, seed: 0, suffix: "_edit".into(), strict: false }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EditRecord {
    pub input: PathBuf,
    pub output: PathBuf,
    /// Index of the training pair used as the edit reference.
    pub reference: usize,
    pub resized: bool,
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
        .unwrap_or(false)
}

fn edit_inputs(input: &Path, suffix: &str) -> Result<Vec<PathBuf>> {
    if input.is_file() {
        return Ok(vec![input.to_path_buf()]);
    }
    let entries = fs::read_dir(input).map_err(|e| Error::io(input, e))?;
    let mut out = Vec::new();
    for entry in entries {
        let p = entry.map_err(|e| Error::io(input, e))?.path();
        let stem = p.file_stem().and_then(|s| s.to_str()).unwrap_or("");
        // earlier outputs live next to the inputs
        if p.is_file() && is_image(&p) && (suffix.is_empty() || !stem.ends_with(suffix)) {
            out.push(p);
        }
    }
    out.sort();
    if out.is_empty() {
        return Err(invalid!("no images under {}", input.display()));
    }
    Ok(out)
}

/// Edits one image or every image in a folder, writing `<stem><suffix>.png` next to each.
pub fn cmd_edit(ckpt: &Path, input: &Path, opts: &EditOptions, device: &Device) -> Result<Vec<EditRecord>> {
    let ck = Checkpoint::load(ckpt, device)?;
    let model = ck.model(device)?;
    let cfg = &ck.config;
    let sched = cfg.schedule()?;
    let steps = opts.steps.unwrap_or(cfg.sample_steps);
    let size = cfg.size;
    let mut records = Vec::new();
    for (k, path) in edit_inputs(input, &opts.suffix)?.into_iter().enumerate() {
        let mut img = ImageTensor::load_png(&path, None, 3)?;
        let resized = img.height() != size || img.width() != size;
        if resized {
            if opts.strict {
                return Err(invalid!("{} is {}x{}, model expects {size}x{size}", path.display(), img.height(), img.width()));
            }
            log::warn!("{} is {}x{}; resizing to {size}x{size}", path.display(), img.height(), img.width());
            img = ImageTensor::load_png(&path, Some((size, size)), 3)?;
        }
        let mut rng = derive_rng(opts.seed, &[k as u64]);
        let out = sample_edit(&img, &ck.train, steps, &model, &sched, &cfg.ablations, cfg.noise_scale, &mut rng)?;
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let dest = path.with_file_name(format!("{stem}{}.png", opts.suffix));
        out.image.save_png(&dest)?;
        log::info!("{} -> {} (reference pair {})", path.display(), dest.display(), out.reference);
        records.push(EditRecord { input: path, output: dest, reference: out.reference, resized });
    }
    Ok(records)
}

#[derive(Debug, Clone, Default)]
pub struct EvalOptions {
    pub steps: Option<usize>,
    pub seed: u64,
    pub tau: Option<f64>,
}

/// Edits every source of a pair folder and scores the edits against its targets,
/// writing `report.txt` and `report.json` into `out_dir`.
pub fn cmd_eval(ckpt: &Path, data: &Path, out_dir: &Path, opts: &EvalOptions, device: &Device) -> Result<EvalReport> {
    let ck = Checkpoint::load(ckpt, device)?;
    let model = ck.model(device)?;
    let mut cfg = ck.config.clone();
    if let Some(s) = opts.steps {
        cfg.sample_steps = s;
    }
    let (held, rep) = load_pair_folder(data, Some((cfg.size, cfg.size)))?;
    for w in &rep.warnings {
        log::warn!("{w}");
    }
    let generated = edit_all(&model, &ck.train, &held, &cfg, opts.seed)?;
    let sources: Vec<ImageTensor> = held.pairs().iter().map(|(x, _)| x.clone()).collect();
    let refs: Vec<ImageTensor> = held.pairs().iter().map(|(_, y)| y.clone()).collect();
    let report = evaluate(&sources, &generated, &refs, opts.tau.unwrap_or(cfg.tau))?;
    report.write(out_dir)?;
    Ok(report)
}

/// Materializes a synthetic task as a pair folder. A non-empty `out` is refused unless
/// `force` is set, in which case earlier pair files are replaced.
pub fn cmd_synth(spec: &SynthSpec, out: &Path, force: bool) -> Result<PairedDataset> {
    if out.exists() {
        let mut entries = fs::read_dir(out).map_err(|e| Error::io(out, e))?;
        if entries.next().is_some() {
            if !force {
                return Err(Error::InvalidState(format!("{} is not empty (use --force to overwrite)", out.display())));
            }
            for sub in ["source", "target"] {
                let d = out.join(sub);
                if d.exists() {
                    fs::remove_dir_all(&d).map_err(|e| Error::io(&d, e))?;
                }
            }
        }
    }
    let ds = generate_spec(spec)?;
    save_pair_folder(&ds, out, spec.task.name())?;
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny() -> RunConfig {
        let mut c = RunConfig::default();
        c.size = 16;
        c.m = 4;
        c.eval_pairs = 3;
        c.steps = 3;
        c.batch = 2;
        c.t_max = 10;
        c.sample_steps = 2;
        c.model = ModelWidths {
            mx_base: 4,
            ae_c0: 4,
            ae_c1: 8,
            vit_width: 16,
            vit_depth: 1,
            vit_heads: 2,
            time_dim: 8,
            cond_patch: 4,
            cond_dim: 8,
            ..ModelWidths::default()
        };
        c
    }

    #[test]
    fn config_text_round_trips() {
        let mut c = tiny();
        c.set_ablations("no_skips, no_noise").unwrap();
        c.lr = 1.0 / 3.0;
        c.eval_data = Some("/tmp/x y".into());
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(RunConfig::parse("").unwrap(), RunConfig::default());
    }

    #[test]
    fn config_parse_errors() {
        assert!(RunConfig::parse("steps = many").is_err());
        assert!(RunConfig::parse("nonsense = 1").is_err());
        assert!(RunConfig::parse("just a line").is_err());
        assert!(RunConfig::parse("ablate = no_such_flag").is_err());
        let c = RunConfig::parse("# comment\nsteps = 7 # trailing\n\nablate = no_skips").unwrap();
        assert_eq!(c.steps, 7);
        assert!(c.ablations.no_skips && !c.ablations.no_noise);
    }

    #[test]
    fn defaults_match_the_documented_optimizer() {
        let c = RunConfig::default();
        assert_eq!((c.lr, c.batch, c.n, c.eval_pairs, c.t_max), (2e-4, 8, 2, 20, 100));
        assert_eq!(c.lr_at(0), 2e-4);
        assert!((c.lr_at(c.steps / 2) - 1e-4).abs() < 1e-15);
        assert!(c.lr_at(c.steps).abs() < 1e-18);
        let lrs: Vec<f64> = (0..=c.steps).step_by(250).map(|s| c.lr_at(s)).collect();
        assert!(lrs.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn validation_rejects_bad_runs() {
        let mut c = tiny();
        c.n = 1;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.lr_min = 1.0;
        assert!(c.validate().is_err());
        let mut c = tiny();
        c.eval_seed = c.data_seed;
        assert!(c.datasets().is_err());
    }

    #[test]
    fn checkpoint_bytes_round_trip() {
        let dev = Device::Cpu;
        let mut t = Trainer::new(&tiny(), &dev).unwrap();
        t.step_once().unwrap();
        let ck = t.checkpoint();
        let bytes = ck.to_bytes().unwrap();
        assert_eq!(bytes, t.checkpoint().to_bytes().unwrap());
        let back = Checkpoint::from_bytes(&bytes, &dev).unwrap();
        assert_eq!(back.to_bytes().unwrap(), bytes);
        assert_eq!(back.step, 1);
        assert_eq!(back.config, ck.config);
        assert_eq!(back.train.pairs(), ck.train.pairs());
        assert_eq!(back.moments, ck.moments);
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() / 2], &dev).is_err());
    }

    #[test]
    fn atomic_write_leaves_no_temp_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("sub").join("a.bin");
        write_atomic(&p, b"one").unwrap();
        write_atomic(&p, b"two").unwrap();
        assert_eq!(fs::read(&p).unwrap(), b"two");
        assert_eq!(fs::read_dir(p.parent().unwrap()).unwrap().count(), 1);
    }
}
