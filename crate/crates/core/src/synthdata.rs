//! Synthetic two-domain segmentation benchmark.
//!
//! A scene is a label map of simple primitives on a textured background. The
//! source image paints each class with its own colour and texture. The target
//! image re-renders the same picture through a fixed real, positive low-pass
//! filter on every channel's spectrum, then a global affine colour map, then
//! small Gaussian noise. The two domains share geometry and differ mostly in
//! amplitude statistics.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fs;
use std::path::{Path, PathBuf};

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::Tensor;
use crate::image::Image;
use crate::io::{self, FileTensor, JsonlWriter};
use crate::mask::SegMask;
use crate::spectral::{dft2, idft2, Spectrum};

pub const MIN_CLASSES: usize = 2;
pub const MAX_CLASSES: usize = 8;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("class count must lie in [{MIN_CLASSES}, {MAX_CLASSES}], got {0}")]
    Classes(usize),
    #[error("image extents must be powers of two of at least 8, got {0}x{1}")]
    Extent(usize, usize),
    #[error("dataset size must be positive")]
    EmptyDataset,
    #[error("invalid shift config: {0}")]
    Shift(String),
    #[error("masks of split `{split}` are evaluation-only and cannot be read for training")]
    MaskRefused { split: String },
    #[error("no scene {index} in split `{split}`")]
    MissingScene { split: String, index: usize },
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Pnm(#[from] io::PnmError),
    #[error(transparent)]
    TensorFile(#[from] io::TensorFileError),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> SynthError + '_ {
    move |source| SynthError::Io { path: path.display().to_string(), source }
}

/// How the target domain is rendered from the source picture.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ShiftConfig {
    /// Spatial standard deviation (pixels) of the Gaussian part of the filter; 0 disables it.
    pub blur_sigma: f64,
    /// Weight of the Gaussian part: the filter is `(1 − s) + s·gauss` per frequency.
    pub blur_strength: f64,
    /// Row-major 3×3 colour matrix applied after filtering.
    pub color_matrix: [[f64; 3]; 3],
    pub color_offset: [f64; 3],
    pub noise_sigma: f64,
    /// Maximum absolute phase perturbation (radians) per frequency; 0 keeps phase intact.
    pub phase_jitter: f64,
}

impl Default for ShiftConfig {
    fn default() -> Self {
        Self {
            blur_sigma: 1.2,
            blur_strength: 0.9,
            color_matrix: [[0.55, 0.10, 0.05], [0.05, 0.60, 0.15], [0.10, 0.05, 0.50]],
            color_offset: [0.30, 0.22, 0.12],
            noise_sigma: 0.01,
            phase_jitter: 0.0,
        }
    }
}

impl ShiftConfig {
    /// Target rendered identically to the source.
    pub fn identity() -> Self {
        Self {
            blur_sigma: 0.0,
            blur_strength: 0.0,
            color_matrix: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            color_offset: [0.0; 3],
            noise_sigma: 0.0,
            phase_jitter: 0.0,
        }
    }

    /// The default shift plus mild phase jitter.
    pub fn adversarial() -> Self {
        Self { phase_jitter: 0.35, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Shift(m.to_string()));
        if !(self.blur_sigma >= 0.0 && self.blur_sigma.is_finite()) {
            return bad("blur_sigma must be finite and nonnegative");
        }
        if !(0.0..=1.0).contains(&self.blur_strength) {
            return bad("blur_strength must lie in [0, 1]");
        }
        if !(0.0..=0.02).contains(&self.noise_sigma) {
            return bad("noise_sigma must lie in [0, 0.02]");
        }
        if !(self.phase_jitter >= 0.0 && self.phase_jitter <= PI) {
            return bad("phase_jitter must lie in [0, π]");
        }
        let finite = self.color_matrix.iter().flatten().chain(&self.color_offset).all(|v| v.is_finite());
        if !finite {
            return bad("colour map must be finite");
        }
        Ok(())
    }

    /// Real, positive, Hermitian-symmetric per-bin gain of the target filter.
    pub fn filter_response(&self, height: usize, width: usize) -> Tensor<f64> {
        let freq = |k: usize, n: usize| k.min(n - k) as f64 / n as f64;
        Tensor::from_fn(&[height, width], |i| {
            let (u, v) = (i / width, i % width);
            if self.blur_sigma == 0.0 || self.blur_strength == 0.0 {
                return 1.0;
            }
            let f2 = freq(u, height).powi(2) + freq(v, width).powi(2);
            let gauss = (-2.0 * PI * PI * self.blur_sigma * self.blur_sigma * f2).exp();
            (1.0 - self.blur_strength) + self.blur_strength * gauss
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SceneConfig {
    pub classes: usize,
    pub height: usize,
    pub width: usize,
    pub min_shapes: usize,
    pub max_shapes: usize,
    pub shift: ShiftConfig,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { classes: 5, height: 64, width: 64, min_shapes: 3, max_shapes: 5, shift: ShiftConfig::default() }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        if !(MIN_CLASSES..=MAX_CLASSES).contains(&self.classes) {
            return Err(SynthError::Classes(self.classes));
        }
        let ok = |n: usize| n >= 8 && n.is_power_of_two();
        if !ok(self.height) || !ok(self.width) {
            return Err(SynthError::Extent(self.height, self.width));
        }
        if self.min_shapes == 0 || self.min_shapes > self.max_shapes {
            return Err(SynthError::Shift("need 1 <= min_shapes <= max_shapes".into()));
        }
        self.shift.validate()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub source: Image,
    pub target: Image,
    pub mask: SegMask,
    pub seed: u64,
}

/// Shape primitives, in class-id order starting at 1.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Shape {
    Disk,
    Rectangle,
    Triangle,
    Stripes,
    Ring,
    Cross,
    Diamond,
}

const SHAPES: [Shape; 7] =
    [Shape::Disk, Shape::Rectangle, Shape::Triangle, Shape::Stripes, Shape::Ring, Shape::Cross, Shape::Diamond];

/// Source-domain base colour per class id.
const PALETTE: [[f64; 3]; 8] = [
    [0.38, 0.42, 0.46],
    [0.88, 0.22, 0.18],
    [0.20, 0.78, 0.30],
    [0.22, 0.28, 0.88],
    [0.90, 0.82, 0.20],
    [0.75, 0.25, 0.80],
    [0.15, 0.80, 0.82],
    [0.95, 0.55, 0.15],
];

/// Pixel-membership test of one placed primitive, in pixel coordinates.
struct Placed {
    shape: Shape,
    cy: f64,
    cx: f64,
    r: f64,
    aux: f64,
    angle: f64,
}

impl Placed {
    fn contains(&self, y: f64, x: f64) -> bool {
        let (dy, dx) = (y - self.cy, x - self.cx);
        let (s, c) = self.angle.sin_cos();
        // coordinates in the primitive's rotated frame
        let (u, v) = (c * dx + s * dy, -s * dx + c * dy);
        match self.shape {
            Shape::Disk => dx * dx + dy * dy <= self.r * self.r,
            Shape::Rectangle => u.abs() <= self.r && v.abs() <= self.aux,
            Shape::Triangle => {
                // upright isosceles triangle with apex at cy − r
                let t = (dy + self.r) / (2.0 * self.r);
                (0.0..=1.0).contains(&t) && dx.abs() <= t * self.r
            }
            Shape::Stripes => v.abs() <= self.aux,
            Shape::Ring => {
                let d2 = dx * dx + dy * dy;
                d2 <= self.r * self.r && d2 >= (self.r - self.aux).powi(2)
            }
            Shape::Cross => {
                (u.abs() <= self.r && v.abs() <= self.aux) || (v.abs() <= self.r && u.abs() <= self.aux)
            }
            Shape::Diamond => u.abs() + v.abs() <= self.r,
        }
    }
}

/// Multiplicative texture of class `k` at pixel `(y, x)`, centred on 1.
fn texture(k: usize, y: f64, x: f64, phase: f64) -> f64 {
    match k {
        0 => 1.0 + 0.10 * (0.21 * x + 0.13 * y + phase).sin() + 0.06 * (0.07 * x - 0.19 * y + 2.0 * phase).sin(),
        1 => 1.0 - 0.12 * ((y * 0.35).sin() * (x * 0.35).cos()),
        2 => 1.0 + if ((y as i64 / 3) + (x as i64 / 3)) % 2 == 0 { 0.07 } else { -0.07 },
        3 => 1.0 + 0.10 * ((x + y) * 0.25).sin(),
        4 => 1.0 + if (x as i64 / 2) % 2 == 0 { 0.12 } else { -0.12 },
        _ => 1.0 + 0.08 * ((x - y) * 0.4 + phase).cos(),
    }
}

fn sample_primitive(rng: &mut ChaCha8Rng, shape: Shape, h: f64, w: f64) -> Placed {
    let m = h.min(w);
    let r = rng.random_range(0.09 * m..0.18 * m);
    let (aux, angle) = match shape {
        Shape::Rectangle => (rng.random_range(0.5 * r..r), rng.random_range(0.0..PI)),
        Shape::Stripes => (rng.random_range(0.05 * m..0.09 * m), rng.random_range(0.0..PI)),
        Shape::Ring => (rng.random_range(0.35 * r..0.55 * r), 0.0),
        Shape::Cross => (rng.random_range(0.25 * r..0.4 * r), rng.random_range(0.0..PI / 2.0)),
        Shape::Diamond => (0.0, rng.random_range(0.0..PI / 2.0)),
        Shape::Disk | Shape::Triangle => (0.0, 0.0),
    };
    let margin = if shape == Shape::Stripes { 0.0 } else { r };
    Placed {
        shape,
        cy: rng.random_range(margin..h - margin),
        cx: rng.random_range(margin..w - margin),
        r,
        aux,
        angle,
    }
}

/// Label map plus per-scene texture phase. Placement retries are bounded; a
/// primitive that never fits is dropped.
fn layout(rng: &mut ChaCha8Rng, cfg: &SceneConfig) -> (SegMask, f64) {
    let (h, w) = (cfg.height, cfg.width);
    let mut labels = vec![0u8; h * w];
    let count = rng.random_range(cfg.min_shapes..=cfg.max_shapes);
    let mut classes: Vec<usize> = (0..count).map(|_| rng.random_range(1..cfg.classes)).collect();
    // bands span the image, so they go down first
    classes.sort_by_key(|&k| SHAPES[k - 1] != Shape::Stripes);
    for k in classes {
        for _ in 0..20 {
            let p = sample_primitive(rng, SHAPES[k - 1], h as f64, w as f64);
            let pixels: Vec<usize> = (0..h * w)
                .filter(|&i| p.contains((i / w) as f64 + 0.5, (i % w) as f64 + 0.5))
                .collect();
            if pixels.len() < 6 || pixels.iter().any(|&i| labels[i] != 0) {
                continue;
            }
            pixels.iter().for_each(|&i| labels[i] = k as u8);
            break;
        }
    }
    let phase = rng.random_range(0.0..2.0 * PI);
    (SegMask::new(h, w, labels).expect("sized"), phase)
}

fn render_source(mask: &SegMask, phase: f64) -> Image {
    let (h, w) = (mask.height(), mask.width());
    let mut data = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        let k = mask.values()[i] as usize;
        let t = texture(k, (i / w) as f64, (i % w) as f64, phase);
        for c in 0..3 {
            data[c * h * w + i] = (PALETTE[k][c] * t).clamp(0.0, 1.0) as f32;
        }
    }
    Image::new(3, h, w, data).expect("sized")
}

/// Random odd (antisymmetric) phase field, so the perturbed spectrum stays Hermitian.
fn jitter_field(rng: &mut ChaCha8Rng, h: usize, w: usize, amount: f64) -> Vec<f64> {
    let mut field = vec![0.0; h * w];
    for u in 0..h {
        for v in 0..w {
            let (mu, mv) = ((h - u) % h, (w - v) % w);
            let (i, j) = (u * w + v, mu * w + mv);
            if i < j {
                let p = rng.random_range(-amount..=amount);
                field[i] = p;
                field[j] = -p;
            }
        }
    }
    field
}

fn render_target(source: &Image, shift: &ShiftConfig, rng: &mut ChaCha8Rng) -> Image {
    let (h, w) = (source.height(), source.width());
    let gain = shift.filter_response(h, w);
    let jitter = (shift.phase_jitter > 0.0).then(|| jitter_field(rng, h, w, shift.phase_jitter));
    let mut filtered = Vec::with_capacity(3 * h * w);
    for c in 0..3 {
        let plane = Tensor::new(vec![h, w], source.plane(c).iter().map(|&v| v as f64).collect()).expect("sized");
        let spec = dft2(&plane).expect("non-empty");
        let coeffs: Vec<Complex64> = spec
            .coeffs()
            .iter()
            .enumerate()
            .map(|(j, &z)| {
                let z = z * gain.data()[j];
                match &jitter {
                    Some(f) => z * Complex64::from_polar(1.0, f[j]),
                    None => z,
                }
            })
            .collect();
        let out = idft2(&Spectrum::new(h, w, coeffs).expect("sized")).expect("filter keeps Hermitian symmetry");
        filtered.push(out.into_data());
    }
    let noise = Normal::new(0.0, shift.noise_sigma.max(f64::MIN_POSITIVE)).expect("valid sigma");
    let mut data = vec![0.0f32; 3 * h * w];
    for i in 0..h * w {
        for c in 0..3 {
            let mut v = shift.color_offset[c];
            for (d, plane) in filtered.iter().enumerate() {
                v += shift.color_matrix[c][d] * plane[i];
            }
            if shift.noise_sigma > 0.0 {
                v += noise.sample(rng);
            }
            data[c * h * w + i] = v.clamp(0.0, 1.0) as f32;
        }
    }
    Image::new(3, h, w, data).expect("sized")
}

/// One scene, deterministic in `seed`.
pub fn gen_scene(seed: u64, cfg: &SceneConfig) -> Result<Scene, SynthError> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mask, phase) = layout(&mut rng, cfg);
    let source = render_source(&mask, phase);
    let target = render_target(&source, &cfg.shift, &mut rng);
    Ok(Scene { source, target, mask, seed })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    /// Source images with masks.
    TrainSrc,
    /// Target images; masks are evaluation-only.
    TrainTgt,
    /// Held-out target images with masks.
    EvalTgt,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::TrainSrc, Split::TrainTgt, Split::EvalTgt];

    pub fn name(self) -> &'static str {
        match self {
            Split::TrainSrc => "train_src",
            Split::TrainTgt => "train_tgt",
            Split::EvalTgt => "eval_tgt",
        }
    }

    fn tag(self) -> u64 {
        match self {
            Split::TrainSrc => 1,
            Split::TrainTgt => 2,
            Split::EvalTgt => 3,
        }
    }

    /// Whether training code may read this split's masks.
    pub fn masks_trainable(self) -> bool {
        self == Split::TrainSrc
    }
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Per-scene seed for `(split, index)` under a dataset seed.
pub fn scene_seed(dataset_seed: u64, split: Split, index: usize) -> u64 {
    splitmix64(splitmix64(dataset_seed ^ split.tag().wrapping_mul(0xa076_1d64_78bd_642f)) ^ index as u64)
}

/// Scene counts for a 70/15/15 split of `n`.
pub fn split_sizes(n: usize) -> [usize; 3] {
    let tgt = n * 15 / 100;
    let eval = n * 15 / 100;
    [n - tgt - eval, tgt, eval]
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub seed: u64,
    pub config: SceneConfig,
    pub train_src: Vec<Scene>,
    pub train_tgt: Vec<Scene>,
    pub eval_tgt: Vec<Scene>,
}

pub fn gen_dataset(n: usize, seed: u64, cfg: &SceneConfig) -> Result<Dataset, SynthError> {
    if n == 0 {
        return Err(SynthError::EmptyDataset);
    }
    cfg.validate()?;
    let sizes = split_sizes(n);
    let mut seen = HashSet::new();
    let mut splits: Vec<Vec<Scene>> = Vec::with_capacity(3);
    for (split, &count) in Split::ALL.iter().zip(&sizes) {
        let scenes = (0..count)
            .map(|i| {
                let s = scene_seed(seed, *split, i);
                assert!(seen.insert(s), "scene seeds collide");
                gen_scene(s, cfg)
            })
            .collect::<Result<Vec<_>, _>>()?;
        splits.push(scenes);
    }
    let eval_tgt = splits.pop().expect("three splits");
    let train_tgt = splits.pop().expect("three splits");
    let train_src = splits.pop().expect("three splits");
    Ok(Dataset { seed, config: cfg.clone(), train_src, train_tgt, eval_tgt })
}

impl Dataset {
    pub fn split(&self, split: Split) -> &[Scene] {
        match split {
            Split::TrainSrc => &self.train_src,
            Split::TrainTgt => &self.train_tgt,
            Split::EvalTgt => &self.eval_tgt,
        }
    }

    /// The part of the dataset that training code may see.
    pub fn training_view(&self) -> TrainingView<'_> {
        TrainingView { data: self }
    }
}

/// Source images with masks, target images without.
#[derive(Clone, Copy)]
pub struct TrainingView<'a> {
    data: &'a Dataset,
}

impl<'a> TrainingView<'a> {
    pub fn classes(&self) -> usize {
        self.data.config.classes
    }

    pub fn source_len(&self) -> usize {
        self.data.train_src.len()
    }

    pub fn target_len(&self) -> usize {
        self.data.train_tgt.len()
    }

    pub fn source(&self, i: usize) -> (&'a Image, &'a SegMask) {
        let s = &self.data.train_src[i];
        (&s.source, &s.mask)
    }

    pub fn target_image(&self, i: usize) -> &'a Image {
        &self.data.train_tgt[i].target
    }

    pub fn target_mask(&self, _i: usize) -> Result<&'a SegMask, SynthError> {
        Err(SynthError::MaskRefused { split: Split::TrainTgt.name().into() })
    }
}

/// One manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub split: Split,
    pub index: usize,
    pub seed: u64,
    pub source_ppm: String,
    pub target_ppm: String,
    pub source_tensor: String,
    pub target_tensor: String,
    pub mask_pgm: String,
    pub mask_access: MaskAccess,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskAccess {
    Train,
    EvalOnly,
}

pub const MANIFEST: &str = "manifest.jsonl";

/// Write every scene as P6/P5 images plus f32 tensor files, and a manifest listing them.
/// Returns the paths written, manifest last.
pub fn write_dataset(ds: &Dataset, dir: &Path) -> Result<Vec<PathBuf>, SynthError> {
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let manifest_path = dir.join(MANIFEST);
    let mut manifest = JsonlWriter::create(&manifest_path).map_err(io_err(&manifest_path))?;
    let mut written = Vec::new();
    for split in Split::ALL {
        let sub = dir.join(split.name());
        fs::create_dir_all(&sub).map_err(io_err(&sub))?;
        for (index, scene) in ds.split(split).iter().enumerate() {
            let stem = format!("{}/{index:04}", split.name());
            let entry = ManifestEntry {
                split,
                index,
                seed: scene.seed,
                source_ppm: format!("{stem}_source.ppm"),
                target_ppm: format!("{stem}_target.ppm"),
                source_tensor: format!("{stem}_source.tnsr"),
                target_tensor: format!("{stem}_target.tnsr"),
                mask_pgm: format!("{stem}_mask.pgm"),
                mask_access: if split.masks_trainable() { MaskAccess::Train } else { MaskAccess::EvalOnly },
            };
            io::write_ppm(&dir.join(&entry.source_ppm), &scene.source)?;
            io::write_ppm(&dir.join(&entry.target_ppm), &scene.target)?;
            io::write_tensor_file(&dir.join(&entry.source_tensor), &FileTensor::F32(scene.source.tensor().clone()))?;
            io::write_tensor_file(&dir.join(&entry.target_tensor), &FileTensor::F32(scene.target.tensor().clone()))?;
            io::write_pgm(&dir.join(&entry.mask_pgm), &scene.mask)?;
            for f in [&entry.source_ppm, &entry.target_ppm, &entry.source_tensor, &entry.target_tensor, &entry.mask_pgm] {
                written.push(dir.join(f));
            }
            manifest.write(&entry).map_err(io_err(&manifest_path))?;
        }
    }
    manifest.flush().map_err(io_err(&manifest_path))?;
    written.push(manifest_path);
    Ok(written)
}

/// Reads a dataset directory written by [`write_dataset`], enforcing mask access flags.
pub struct DatasetReader {
    dir: PathBuf,
    entries: Vec<ManifestEntry>,
}

fn read_image_tensor(path: &Path) -> Result<Image, SynthError> {
    match io::read_tensor_file(path)? {
        FileTensor::F32(t) => Image::from_tensor(t).map_err(|e| SynthError::Manifest(format!("{}: {e}", path.display()))),
        other => Err(SynthError::Manifest(format!("{}: expected f32 image, found {}", path.display(), other.dtype_name()))),
    }
}

impl DatasetReader {
    pub fn open(dir: &Path) -> Result<Self, SynthError> {
        let path = dir.join(MANIFEST);
        let entries = io::read_jsonl(&path).map_err(io_err(&path))?;
        Ok(Self { dir: dir.to_path_buf(), entries })
    }

    pub fn entries(&self) -> &[ManifestEntry] {
        &self.entries
    }

    pub fn len(&self, split: Split) -> usize {
        self.entries.iter().filter(|e| e.split == split).count()
    }

    fn entry(&self, split: Split, index: usize) -> Result<&ManifestEntry, SynthError> {
        self.entries
            .iter()
            .find(|e| e.split == split && e.index == index)
            .ok_or_else(|| SynthError::MissingScene { split: split.name().into(), index })
    }

    pub fn source_image(&self, split: Split, index: usize) -> Result<Image, SynthError> {
        read_image_tensor(&self.dir.join(&self.entry(split, index)?.source_tensor))
    }

    pub fn target_image(&self, split: Split, index: usize) -> Result<Image, SynthError> {
        read_image_tensor(&self.dir.join(&self.entry(split, index)?.target_tensor))
    }

    /// Masks for training; refused unless the manifest grants training access.
    pub fn training_mask(&self, split: Split, index: usize) -> Result<SegMask, SynthError> {
        let e = self.entry(split, index)?;
        if e.mask_access != MaskAccess::Train {
            return Err(SynthError::MaskRefused { split: split.name().into() });
        }
        Ok(io::read_pgm(&self.dir.join(&e.mask_pgm))?)
    }

    /// Masks for evaluation; any split.
    pub fn evaluation_mask(&self, split: Split, index: usize) -> Result<SegMask, SynthError> {
        Ok(io::read_pgm(&self.dir.join(&self.entry(split, index)?.mask_pgm))?)
    }

    /// Reassemble the in-memory dataset (all masks, for evaluation tooling).
    pub fn load(&self, config: SceneConfig, seed: u64) -> Result<Dataset, SynthError> {
        let mut ds = Dataset { seed, config, train_src: vec![], train_tgt: vec![], eval_tgt: vec![] };
        for e in &self.entries {
            let scene = Scene {
                source: read_image_tensor(&self.dir.join(&e.source_tensor))?,
                target: read_image_tensor(&self.dir.join(&e.target_tensor))?,
                mask: io::read_pgm(&self.dir.join(&e.mask_pgm))?,
                seed: e.seed,
            };
            match e.split {
                Split::TrainSrc => ds.train_src.push(scene),
                Split::TrainTgt => ds.train_tgt.push(scene),
                Split::EvalTgt => ds.eval_tgt.push(scene),
            }
        }
        Ok(ds)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn split_bookkeeping() {
        assert_eq!(split_sizes(100), [70, 15, 15]);
        assert_eq!(split_sizes(3), [3, 0, 0]);
        assert!(matches!(gen_dataset(0, 1, &SceneConfig::default()), Err(SynthError::EmptyDataset)));
    }

    #[test]
    fn rejects_bad_configs() {
        let bad_k = SceneConfig { classes: 9, ..SceneConfig::default() };
        assert!(matches!(gen_scene(0, &bad_k), Err(SynthError::Classes(9))));
        let bad_hw = SceneConfig { height: 48, ..SceneConfig::default() };
        assert!(matches!(gen_scene(0, &bad_hw), Err(SynthError::Extent(48, 64))));
    }

    #[test]
    fn filter_is_real_positive_and_symmetric() {
        let f = ShiftConfig::default().filter_response(16, 8);
        assert!(f.data().iter().all(|&g| g > 0.0 && g <= 1.0));
        assert_eq!(f.data()[0], 1.0);
        for u in 0..16 {
            for v in 0..8 {
                assert_eq!(f.data()[u * 8 + v], f.data()[((16 - u) % 16) * 8 + (8 - v) % 8]);
            }
        }
    }
}
