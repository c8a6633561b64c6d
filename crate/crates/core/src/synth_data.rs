//! Procedural paired datasets with known edit functions, and pair-folder I/O.
//!
//! Every generated source is a flat rectangle on a dark textured background; the
//! target is a documented function of the source alone, so held-out ground truth
//! can always be recomputed.

use std::collections::BTreeMap;
use std::path::Path;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::image::ImageTensor;
use crate::pair_sampler::PairedDataset;

/// Background pixels lie in `[BG_LEVEL - BG_TEXTURE, BG_LEVEL + BG_TEXTURE]`.
pub const BG_LEVEL: f64 = -0.8;
pub const BG_TEXTURE: f64 = 0.1;
/// Rectangle channel values are drawn from this range.
pub const RECT_RANGE: (f64, f64) = (-0.4, 0.6);
/// Pixels whose brightest channel exceeds this belong to the rectangle.
pub const DETECT_LEVEL: f64 = -0.5;
/// Offset of the dot from the rectangle's top-left corner, in pixels.
pub const DOT_OFFSET: usize = 2;
pub const DOT_SIZE: usize = 2;
/// `(scale, bias)` applied inside the rectangle by the recolor task.
pub const RECOLOR: (f64, f64) = (0.5, 0.5);
pub const MIN_SIZE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthTask {
    Dot,
    Recolor,
    Outline,
}

impl SynthTask {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "dot" => Ok(Self::Dot),
            "recolor" => Ok(Self::Recolor),
            "outline" => Ok(Self::Outline),
            other => Err(invalid!("unknown synthetic task {other:?} (expected dot, recolor or outline)")),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::Dot => "dot",
            Self::Recolor => "recolor",
            Self::Outline => "outline",
        }
    }

    /// The task's ground-truth edit.
    pub fn edit(&self, x: &ImageTensor) -> Result<ImageTensor> {
        match self {
            Self::Dot => dot_edit(x),
            Self::Recolor => recolor_edit(x),
            Self::Outline => outline_edit(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthSpec {
    pub task: SynthTask,
    pub size: usize,
    pub m: usize,
    pub seed: u64,
}

/// Inclusive bounding box `(top, left, bottom, right)`.
pub type Rect = (usize, usize, usize, usize);

fn check_spec(spec: &SynthSpec) -> Result<()> {
    if spec.size < MIN_SIZE {
        return Err(invalid!("synthetic images must be at least {MIN_SIZE} pixels, got {}", spec.size));
    }
    if spec.m < 1 {
        return Err(invalid!("synthetic dataset needs m >= 1"));
    }
    Ok(())
}

/// One source image: textured background plus a flat rectangle.
pub fn gen_source(size: usize, rng: &mut ChaCha8Rng) -> Result<(ImageTensor, Rect)> {
    if size < MIN_SIZE {
        return Err(invalid!("synthetic images must be at least {MIN_SIZE} pixels, got {size}"));
    }
    let min_side = DOT_OFFSET + DOT_SIZE + 2;
    let max_side = (size * 3 / 8).max(min_side);
    let rh = rng.random_range(min_side..=max_side);
    let rw = rng.random_range(min_side..=max_side);
    if rh > size || rw > size {
        return Err(invalid!("rectangle does not fit in a {size}px canvas"));
    }
    let top = rng.random_range(0..=size - rh);
    let left = rng.random_range(0..=size - rw);
    let color: Vec<f64> = (0..3).map(|_| rng.random_range(RECT_RANGE.0..=RECT_RANGE.1)).collect();
    let texture: Vec<f64> = (0..size * size).map(|_| rng.random_range(-BG_TEXTURE..=BG_TEXTURE)).collect();
    let rect = (top, left, top + rh - 1, left + rw - 1);
    let img = ImageTensor::from_fn(size, size, 3, |h, w, c| {
        if h >= rect.0 && h <= rect.2 && w >= rect.1 && w <= rect.3 {
            color[c]
        } else {
            BG_LEVEL + texture[h * size + w]
        }
    })?;
    Ok((img, rect))
}

/// Bounding box of the pixels brighter than [`DETECT_LEVEL`].
pub fn find_rect(x: &ImageTensor) -> Result<Rect> {
    let (h, w, c) = x.shape();
    let mut bb: Option<Rect> = None;
    for r in 0..h {
        for col in 0..w {
            let bright = (0..c).map(|k| x.get(r, col, k)).fold(f64::MIN, f64::max) > DETECT_LEVEL;
            if bright {
                bb = Some(match bb {
                    None => (r, col, r, col),
                    Some((t, l, b, rr)) => (t.min(r), l.min(col), b.max(r), rr.max(col)),
                });
            }
        }
    }
    bb.ok_or_else(|| invalid!("no rectangle found in the image"))
}

/// White `2 x 2` dot two pixels in from the rectangle's top-left corner.
pub fn dot_edit(x: &ImageTensor) -> Result<ImageTensor> {
    let (top, left, _, _) = find_rect(x)?;
    let (h, w, c) = x.shape();
    if top + DOT_OFFSET + DOT_SIZE > h || left + DOT_OFFSET + DOT_SIZE > w {
        return Err(invalid!("dot does not fit inside the canvas"));
    }
    let mut y = x.clone();
    for r in top + DOT_OFFSET..top + DOT_OFFSET + DOT_SIZE {
        for col in left + DOT_OFFSET..left + DOT_OFFSET + DOT_SIZE {
            for k in 0..c {
                y.set(r, col, k, 1.0);
            }
        }
    }
    Ok(y)
}

/// Applies [`RECOLOR`] to every pixel of the rectangle.
pub fn recolor_edit(x: &ImageTensor) -> Result<ImageTensor> {
    let (top, left, bottom, right) = find_rect(x)?;
    let mut y = x.clone();
    for r in top..=bottom {
        for col in left..=right {
            for k in 0..x.channels() {
                y.set(r, col, k, RECOLOR.0 * x.get(r, col, k) + RECOLOR.1);
            }
        }
    }
    Ok(y)
}

/// Paints the rectangle's one-pixel border white.
pub fn outline_edit(x: &ImageTensor) -> Result<ImageTensor> {
    let (top, left, bottom, right) = find_rect(x)?;
    let mut y = x.clone();
    for r in top..=bottom {
        for col in left..=right {
            if r == top || r == bottom || col == left || col == right {
                for k in 0..x.channels() {
                    y.set(r, col, k, 1.0);
                }
            }
        }
    }
    Ok(y)
}

fn generate(spec: &SynthSpec, rng: &mut ChaCha8Rng, task: SynthTask) -> Result<PairedDataset> {
    check_spec(spec)?;
    let pairs = (0..spec.m)
        .map(|_| {
            let (x, _) = gen_source(spec.size, rng)?;
            let y = task.edit(&x)?;
            Ok((x, y))
        })
        .collect::<Result<Vec<_>>>()?;
    PairedDataset::new(pairs)
}

pub fn gen_dot_edit(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<PairedDataset> {
    generate(spec, rng, SynthTask::Dot)
}

pub fn gen_recolor(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<PairedDataset> {
    generate(spec, rng, SynthTask::Recolor)
}

pub fn gen_outline(spec: &SynthSpec, rng: &mut ChaCha8Rng) -> Result<PairedDataset> {
    generate(spec, rng, SynthTask::Outline)
}

/// Generates `spec.task` from a generator seeded with `spec.seed`.
pub fn generate_spec(spec: &SynthSpec) -> Result<PairedDataset> {
    use rand::SeedableRng;
    generate(spec, &mut ChaCha8Rng::seed_from_u64(spec.seed), spec.task)
}

/// Optional sidecar describing a pair folder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub name: String,
    pub height: usize,
    pub width: usize,
    pub m: usize,
}

pub const MANIFEST_FILE: &str = "manifest.json";

/// Writes `source/` and `target/` PNGs named `0000.png`, `0001.png`, ... plus a manifest.
pub fn save_pair_folder(ds: &PairedDataset, root: &Path, name: &str) -> Result<()> {
    for sub in ["source", "target"] {
        let d = root.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    for (k, (x, y)) in ds.pairs().iter().enumerate() {
        let file = format!("{k:04}.png");
        x.save_png(&root.join("source").join(&file))?;
        y.save_png(&root.join("target").join(&file))?;
    }
    let (h, w, _) = ds.shape();
    let manifest = Manifest { name: name.to_string(), height: h, width: w, m: ds.m() };
    let path = root.join(MANIFEST_FILE);
    let body = serde_json::to_string_pretty(&manifest).expect("manifest serializes");
    std::fs::write(&path, body + "\n").map_err(|e| Error::io(&path, e))
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct LoadReport {
    pub matched: Vec<String>,
    /// Human-readable notes about skipped files.
    pub warnings: Vec<String>,
}

fn list_images(dir: &Path) -> Result<BTreeMap<String, std::path::PathBuf>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let entry = entry.map_err(|e| Error::io(dir, e))?;
        let path = entry.path();
        let is_image = path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg" | "bmp"))
            .unwrap_or(false);
        if path.is_file() && is_image {
            out.insert(entry.file_name().to_string_lossy().into_owned(), path);
        }
    }
    Ok(out)
}

/// Loads `<root>/source/*` and `<root>/target/*` matched by file name, in name order.
/// `size` resizes every image to `(height, width)`; otherwise all must already agree.
pub fn load_pair_folder(root: &Path, size: Option<(usize, usize)>) -> Result<(PairedDataset, LoadReport)> {
    let sources = list_images(&root.join("source"))?;
    let targets = list_images(&root.join("target"))?;
    let mut report = LoadReport::default();
    let mut pairs = Vec::new();
    for (name, sp) in &sources {
        match targets.get(name) {
            Some(tp) => {
                let x = ImageTensor::load_png(sp, size, 3)?;
                let y = ImageTensor::load_png(tp, size, 3)?;
                pairs.push((x, y));
                report.matched.push(name.clone());
            }
            None => report.warnings.push(format!("source/{name} has no matching target")),
        }
    }
    for name in targets.keys().filter(|n| !sources.contains_key(*n)) {
        report.warnings.push(format!("target/{name} has no matching source"));
    }
    if pairs.is_empty() {
        return Err(invalid!("no matched source/target pairs under {}", root.display()));
    }
    Ok((PairedDataset::new(pairs)?, report))
}

pub fn read_manifest(root: &Path) -> Result<Option<Manifest>> {
    let path = root.join(MANIFEST_FILE);
    if !path.exists() {
        return Ok(None);
    }
    let body = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&body).map(Some).map_err(|e| invalid!("bad manifest {}: {e}", path.display()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::losses_metrics::edit_mask;
    use rand::SeedableRng;

    fn spec(task: SynthTask, m: usize) -> SynthSpec {
        SynthSpec { task, size: 24, m, seed: 3 }
    }

    #[test]
    fn dot_pairs_differ_in_four_pixels() {
        let ds = generate_spec(&spec(SynthTask::Dot, 30)).unwrap();
        for (x, y) in ds.pairs() {
            assert_eq!(edit_mask(x, y, 0.1).unwrap().area(), 4);
        }
    }

    #[test]
    fn generation_is_deterministic_and_varied() {
        let a = generate_spec(&spec(SynthTask::Dot, 5)).unwrap();
        let b = generate_spec(&spec(SynthTask::Dot, 5)).unwrap();
        assert_eq!(a.pairs(), b.pairs());
        let rects: std::collections::BTreeSet<Rect> = a.pairs().iter().map(|(x, _)| find_rect(x).unwrap()).collect();
        assert!(rects.len() > 1);
    }

    #[test]
    fn edit_function_reproduces_held_out_targets() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for task in [SynthTask::Dot, SynthTask::Recolor, SynthTask::Outline] {
            let ds = generate(&spec(task, 4), &mut rng, task).unwrap();
            for (x, y) in ds.pairs() {
                assert_eq!(&task.edit(x).unwrap(), y);
            }
        }
    }

    #[test]
    fn generated_rect_is_detected() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..20 {
            let (x, rect) = gen_source(20, &mut rng).unwrap();
            assert_eq!(find_rect(&x).unwrap(), rect);
        }
        assert!(gen_source(15, &mut rng).is_err());
        assert!(generate_spec(&SynthSpec { task: SynthTask::Dot, size: 12, m: 2, seed: 0 }).is_err());
    }

    #[test]
    fn recolor_support_and_affine() {
        let ds = generate_spec(&spec(SynthTask::Recolor, 10)).unwrap();
        for (x, y) in ds.pairs() {
            let (t, l, b, r) = find_rect(x).unwrap();
            let mask = edit_mask(x, y, 0.1).unwrap();
            let (mut sx, mut sy, mut n) = (0.0, 0.0, 0.0);
            for h in 0..24 {
                for w in 0..24 {
                    let inside = h >= t && h <= b && w >= l && w <= r;
                    assert_eq!(mask.get(h, w), inside);
                    if inside {
                        sx += x.get(h, w, 0);
                        sy += y.get(h, w, 0);
                        n += 1.0;
                    } else {
                        assert_eq!(x.get(h, w, 1), y.get(h, w, 1));
                    }
                }
            }
            assert!((sy / n - (RECOLOR.0 * sx / n + RECOLOR.1)).abs() < 1e-12);
        }
    }

    #[test]
    fn folder_round_trip_within_quantization() {
        let ds = generate_spec(&spec(SynthTask::Outline, 3)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_pair_folder(&ds, dir.path(), "outline").unwrap();
        std::fs::copy(dir.path().join("source/0000.png"), dir.path().join("source/extra.png")).unwrap();
        let (back, report) = load_pair_folder(dir.path(), None).unwrap();
        assert_eq!(back.m(), 3);
        assert_eq!(report.warnings.len(), 1);
        for ((x0, y0), (x1, y1)) in ds.pairs().iter().zip(back.pairs()) {
            for (a, b) in x0.data().iter().chain(y0.data()).zip(x1.data().iter().chain(y1.data())) {
                assert!((a - b).abs() <= 1.0 / 127.5);
            }
        }
        let m = read_manifest(dir.path()).unwrap().unwrap();
        assert_eq!((m.m, m.height, m.name.as_str()), (3, 24, "outline"));
        let empty = tempfile::tempdir().unwrap();
        std::fs::create_dir_all(empty.path().join("source")).unwrap();
        std::fs::create_dir_all(empty.path().join("target")).unwrap();
        assert!(load_pair_folder(empty.path(), None).is_err());
    }
}
