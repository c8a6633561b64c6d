//! Few-shot datasets, group sampling for the sample-to-sample expansion, and
//! augmentation that moves a source and its target in lockstep.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{invalid, Result};
use crate::image::ImageTensor;
use crate::transform_ops::{apply_color_affine, apply_flow, ColorAffine, FlowField};

/// Ordered `(x, y)` pairs; all sources share one shape and all targets share one shape.
#[derive(Debug, Clone)]
pub struct PairedDataset {
    pairs: Vec<(ImageTensor, ImageTensor)>,
}

impl PairedDataset {
    pub fn new(pairs: Vec<(ImageTensor, ImageTensor)>) -> Result<Self> {
        let (x0, y0) = pairs.first().ok_or_else(|| invalid!("dataset needs at least one pair"))?;
        for (k, (x, y)) in pairs.iter().enumerate() {
            if !x.same_shape(x0) || !y.same_shape(y0) {
                return Err(invalid!("pair {k} does not match the shape of pair 0"));
            }
        }
        Ok(Self { pairs })
    }

    pub fn m(&self) -> usize {
        self.pairs.len()
    }

    pub fn pairs(&self) -> &[(ImageTensor, ImageTensor)] {
        &self.pairs
    }

    pub fn x(&self, k: usize) -> &ImageTensor {
        &self.pairs[k].0
    }

    pub fn y(&self, k: usize) -> &ImageTensor {
        &self.pairs[k].1
    }

    /// `(height, width, channels)` of the source images.
    pub fn shape(&self) -> (usize, usize, usize) {
        self.pairs[0].0.shape()
    }
}

/// `n` dataset indices plus the positions playing the reference (`i`) and target (`j`) roles.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SampleGroup {
    pub members: Vec<usize>,
    pub i: usize,
    pub j: usize,
}

impl SampleGroup {
    pub fn n(&self) -> usize {
        self.members.len()
    }

    /// Dataset index of the reference pair.
    pub fn ref_index(&self) -> usize {
        self.members[self.i]
    }

    /// Dataset index of the target pair.
    pub fn target_index(&self) -> usize {
        self.members[self.j]
    }
}

/// Draws `n` pairs uniformly with replacement and picks two distinct role positions.
pub fn sample_group(ds: &PairedDataset, n: usize, rng: &mut ChaCha8Rng) -> Result<SampleGroup> {
    if n < 2 {
        return Err(invalid!("group size must be at least 2, got {n}"));
    }
    if ds.m() == 0 {
        return Err(invalid!("cannot sample from an empty dataset"));
    }
    let members: Vec<usize> = (0..n).map(|_| rng.random_range(0..ds.m())).collect();
    let i = rng.random_range(0..n);
    let mut j = rng.random_range(0..n - 1);
    if j >= i {
        j += 1;
    }
    Ok(SampleGroup { members, i, j })
}

fn binomial(n: u128, k: u128) -> Option<u128> {
    let k = k.min(n - k);
    let mut acc: u128 = 1;
    for t in 0..k {
        // exact at every step: acc * (n - t) is divisible by (t + 1)
        acc = acc.checked_mul(n - t)? / (t + 1);
    }
    Some(acc)
}

/// Number of learnable `[f_x, f_y]` combinations, `m * C(m, n - 1)`.
pub fn expansion_count(m: u64, n: u64) -> Result<u128> {
    if m < 1 || n < 2 || n - 1 > m {
        return Err(invalid!("expansion count needs m >= 1 and 2 <= n <= m + 1, got m={m}, n={n}"));
    }
    binomial(m as u128, n as u128 - 1)
        .and_then(|c| c.checked_mul(m as u128))
        .ok_or_else(|| invalid!("expansion count overflows for m={m}, n={n}"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AugmentConfig {
    pub flip_p: f64,
    pub jitter_p: f64,
    /// Half-width of the brightness offset range.
    pub brightness: f64,
    /// Half-width of the contrast factor range around 1.
    pub contrast: f64,
    pub affine_p: f64,
    pub rotate_deg: f64,
    /// Maximum shift as a fraction of the image size, rounded to whole pixels.
    pub translate: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            flip_p: 0.5,
            jitter_p: 1.0,
            brightness: 0.1,
            contrast: 0.1,
            affine_p: 1.0,
            rotate_deg: 10.0,
            translate: 0.05,
            scale_min: 0.95,
            scale_max: 1.05,
        }
    }
}

impl AugmentConfig {
    pub fn none() -> Self {
        Self { flip_p: 0.0, jitter_p: 0.0, affine_p: 0.0, ..Self::default() }
    }
}

/// Parameters actually drawn by one [`paired_augment`] call.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentLog {
    pub flipped: bool,
    /// Maps normalized output `(row, col, 1)` to the sampled input position; includes the flip.
    pub matrix: [[f64; 3]; 2],
    pub contrast: f64,
    pub brightness: f64,
}

impl AugmentLog {
    pub fn is_identity_warp(&self) -> bool {
        self.matrix == [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]
    }
}

fn uniform(rng: &mut ChaCha8Rng, half: f64) -> f64 {
    if half > 0.0 {
        rng.random_range(-half..=half)
    } else {
        0.0
    }
}

/// A shift of `frac * n` pixels, rounded, in normalized units.
fn pixel_shift(frac: f64, n: usize) -> f64 {
    if n <= 1 {
        return 0.0;
    }
    (frac * n as f64).round() * 2.0 / (n - 1) as f64
}

/// Applies one draw of flip, random affine and color jitter identically to `x` and `y`.
pub fn paired_augment(
    x: &ImageTensor,
    y: &ImageTensor,
    cfg: &AugmentConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(ImageTensor, ImageTensor, AugmentLog)> {
    x.check_same_shape(y, "paired_augment")?;
    // every draw is made unconditionally so the stream position does not depend on outcomes
    let flip_u: f64 = rng.random();
    let aff_u: f64 = rng.random();
    let angle = uniform(rng, cfg.rotate_deg).to_radians();
    let (h, w, _) = x.shape();
    // shifts are whole pixels, so a pure translation moves content without resampling it
    let ty = pixel_shift(uniform(rng, cfg.translate), h);
    let tx = pixel_shift(uniform(rng, cfg.translate), w);
    let scale = if cfg.scale_max > cfg.scale_min { rng.random_range(cfg.scale_min..=cfg.scale_max) } else { cfg.scale_min };
    let jit_u: f64 = rng.random();
    let contrast_d = uniform(rng, cfg.contrast);
    let bright_d = uniform(rng, cfg.brightness);

    let flipped = flip_u < cfg.flip_p;
    let mut matrix = [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]];
    if aff_u < cfg.affine_p {
        let (s, c) = angle.sin_cos();
        let inv = 1.0 / scale;
        matrix = [[c * inv, -s * inv, ty], [s * inv, c * inv, tx]];
    }
    if flipped {
        matrix[0][1] = -matrix[0][1];
        matrix[1][1] = -matrix[1][1];
    }
    let (contrast, brightness) = if jit_u < cfg.jitter_p { (1.0 + contrast_d, bright_d) } else { (1.0, 0.0) };
    let log = AugmentLog { flipped, matrix, contrast, brightness };
    let apply = |img: &ImageTensor| -> Result<ImageTensor> {
        let (h, w, _) = img.shape();
        let warped = if log.is_identity_warp() { img.clone() } else { apply_flow(img, &FlowField::from_affine(h, w, &log.matrix)?)? };
        if log.contrast == 1.0 && log.brightness == 0.0 {
            Ok(warped)
        } else {
            apply_color_affine(&warped, &ColorAffine::uniform(h, w, log.contrast, log.brightness)?)
        }
    };
    Ok((apply(x)?, apply(y)?, log))
}
