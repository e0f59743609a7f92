//! Procedural paired-view scenes and the position-shift transforms.
//!
//! A scene is a handful of coloured rectangles and discs on a ground plane.
//! Its satellite image is the top-down render; each drone image renders the
//! same layout through a seeded rotation, zoom, brightness shift and pixel
//! noise. Datasets are written as MFT1 images plus a JSON manifest whose
//! per-file SHA-256 sums make the manifest checksum cover every pixel.

use std::f64::consts::PI;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backbone::{View, ViewImage};
use crate::tensor::mft::{self, MftError};
use crate::tensor::{Scalar, Tensor};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const MANIFEST_FORMAT: &str = "mfaf-dataset/1";

#[derive(Debug, Error)]
pub enum DataError {
    #[error("need at least 2 classes, got {0}")]
    TooFewClasses(usize),
    #[error("need at least one drone image per class")]
    NoDrones,
    #[error("pad width {px} must be smaller than image width {width}")]
    PadTooWide { px: usize, width: usize },
    #[error("image must be H x W x C, got shape {0:?}")]
    NotAnImage(Vec<usize>),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Mft(#[from] MftError),
    #[error("manifest: {0}")]
    Json(#[from] serde_json::Error),
    #[error("manifest: {0}")]
    Manifest(String),
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> DataError + '_ {
    move |source| DataError::Io {
        path: path.to_path_buf(),
        source,
    }
}

/// Mixes a stream id into a seed (splitmix64 finaliser).
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Primitive {
    /// Rotated rectangle with half extents `hw`, `hh` and angle in radians.
    Rect {
        cx: f64,
        cy: f64,
        hw: f64,
        hh: f64,
        angle: f64,
        color: [f32; 3],
    },
    Disc {
        cx: f64,
        cy: f64,
        r: f64,
        color: [f32; 3],
    },
}

impl Primitive {
    fn color(&self) -> [f32; 3] {
        match *self {
            Primitive::Rect { color, .. } | Primitive::Disc { color, .. } => color,
        }
    }

    fn contains(&self, x: f64, y: f64) -> bool {
        match *self {
            Primitive::Rect {
                cx, cy, hw, hh, angle, ..
            } => {
                let (s, c) = angle.sin_cos();
                let (dx, dy) = (x - cx, y - cy);
                let u = c * dx + s * dy;
                let v = -s * dx + c * dy;
                u.abs() <= hw && v.abs() <= hh
            }
            Primitive::Disc { cx, cy, r, .. } => (x - cx).powi(2) + (y - cy).powi(2) <= r * r,
        }
    }

    /// Axis-aligned bounding box `(x0, y0, x1, y1)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Primitive::Rect {
                cx, cy, hw, hh, angle, ..
            } => {
                let (s, c) = angle.sin_cos();
                let ex = hw * c.abs() + hh * s.abs();
                let ey = hw * s.abs() + hh * c.abs();
                (cx - ex, cy - ey, cx + ex, cy + ey)
            }
            Primitive::Disc { cx, cy, r, .. } => (cx - r, cy - r, cx + r, cy + r),
        }
    }
}

/// A scene in the unit square; later shapes paint over earlier ones.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub class_id: u32,
    pub seed: u64,
    pub ground: [f32; 3],
    pub layout: Vec<Primitive>,
    /// Planar scene location used by SDM@K.
    pub coords: (f64, f64),
}

/// Roof colours shared by all scenes, so colour alone does not identify a scene.
pub const PALETTE: [[f32; 3]; 6] = [
    [0.80, 0.30, 0.25],
    [0.85, 0.80, 0.70],
    [0.30, 0.35, 0.70],
    [0.60, 0.60, 0.60],
    [0.20, 0.20, 0.20],
    [0.75, 0.65, 0.30],
];
pub const GROUND: [f32; 3] = [0.35, 0.40, 0.30];
/// Range of rectangle half extents; disc radii use three quarters of it.
pub const SHAPE_HALF_EXTENT: (f64, f64) = (0.03, 0.09);
pub const MIN_SHAPES: usize = 3;
pub const MAX_SHAPES: usize = 8;
/// Side of the square area scene coordinates are drawn from.
pub const WORLD_SIZE: f64 = 10.0;

impl SceneSpec {
    pub fn generate(class_id: u32, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let ground = GROUND;
        let n = rng.gen_range(MIN_SHAPES..=MAX_SHAPES);
        let mut layout = Vec::with_capacity(n);
        for _ in 0..n {
            let color = PALETTE[rng.gen_range(0..PALETTE.len())];
            let shape = if rng.gen_bool(0.6) {
                let hw: f64 = rng.gen_range(SHAPE_HALF_EXTENT.0..SHAPE_HALF_EXTENT.1);
                let hh: f64 = rng.gen_range(SHAPE_HALF_EXTENT.0..SHAPE_HALF_EXTENT.1);
                let angle = rng.gen_range(0.0..PI);
                let reach = (hw * hw + hh * hh).sqrt();
                Primitive::Rect {
                    cx: rng.gen_range(reach..1.0 - reach),
                    cy: rng.gen_range(reach..1.0 - reach),
                    hw,
                    hh,
                    angle,
                    color,
                }
            } else {
                let r: f64 = rng.gen_range(SHAPE_HALF_EXTENT.0..SHAPE_HALF_EXTENT.1 * 0.75);
                Primitive::Disc {
                    cx: rng.gen_range(r..1.0 - r),
                    cy: rng.gen_range(r..1.0 - r),
                    r,
                    color,
                }
            };
            layout.push(shape);
        }
        let coords = (rng.gen_range(0.0..WORLD_SIZE), rng.gen_range(0.0..WORLD_SIZE));
        Self {
            class_id,
            seed,
            ground,
            layout,
            coords,
        }
    }

    /// True when the shape count is in range and every shape lies in the unit square.
    pub fn is_valid(&self) -> bool {
        (MIN_SHAPES..=MAX_SHAPES).contains(&self.layout.len())
            && self.layout.iter().all(|p| {
                let (x0, y0, x1, y1) = p.bounds();
                x0 >= 0.0 && y0 >= 0.0 && x1 <= 1.0 && y1 <= 1.0
            })
    }

    fn color_at(&self, x: f64, y: f64) -> [f32; 3] {
        self.layout
            .iter()
            .rev()
            .find(|p| p.contains(x, y))
            .map_or(self.ground, |p| p.color())
    }
}

/// Drone-view camera perturbation. The satellite view uses [`Perturbation::IDENTITY`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Perturbation {
    pub rotation_deg: f64,
    pub scale: f64,
    pub brightness: f32,
    pub noise_sigma: f32,
}

impl Perturbation {
    pub const IDENTITY: Perturbation = Perturbation {
        rotation_deg: 0.0,
        scale: 1.0,
        brightness: 0.0,
        noise_sigma: 0.0,
    };
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PerturbationRanges {
    /// Rotation is uniform in `±max_rotation_deg`.
    pub max_rotation_deg: f64,
    pub scale: (f64, f64),
    pub max_brightness: f32,
    pub noise_sigma: f32,
}

impl Default for PerturbationRanges {
    fn default() -> Self {
        Self {
            max_rotation_deg: 30.0,
            scale: (0.8, 1.2),
            max_brightness: 0.15,
            noise_sigma: 0.02,
        }
    }
}

impl PerturbationRanges {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> Perturbation {
        let r = self.max_rotation_deg;
        let b = self.max_brightness;
        Perturbation {
            rotation_deg: if r > 0.0 { rng.gen_range(-r..=r) } else { 0.0 },
            scale: if self.scale.0 < self.scale.1 {
                rng.gen_range(self.scale.0..=self.scale.1)
            } else {
                self.scale.0
            },
            brightness: if b > 0.0 { rng.gen_range(-b..=b) } else { 0.0 },
            noise_sigma: self.noise_sigma,
        }
    }
}

/// Subsamples per pixel side.
const SUPERSAMPLE: usize = 2;

/// Renders the scene through a camera perturbation. `noise_rng` feeds the
/// additive noise and is untouched when the noise level is zero.
pub fn render_with(scene: &SceneSpec, size: usize, p: &Perturbation, noise_rng: &mut ChaCha8Rng) -> Tensor<f32> {
    let (s, c) = p.rotation_deg.to_radians().sin_cos();
    let inv = 1.0 / p.scale;
    let n = SUPERSAMPLE;
    let norm = 1.0 / (n * n) as f32;
    let mut out = Vec::with_capacity(size * size * 3);
    for row in 0..size {
        for col in 0..size {
            let mut acc = [0f32; 3];
            for sy in 0..n {
                for sx in 0..n {
                    let u = (col as f64 + (sx as f64 + 0.5) / n as f64) / size as f64 - 0.5;
                    let v = (row as f64 + (sy as f64 + 0.5) / n as f64) / size as f64 - 0.5;
                    let x = (c * u - s * v) * inv + 0.5;
                    let y = (s * u + c * v) * inv + 0.5;
                    let col = scene.color_at(x, y);
                    for k in 0..3 {
                        acc[k] += col[k];
                    }
                }
            }
            for a in acc {
                out.push((a * norm + p.brightness).clamp(0.0, 1.0));
            }
        }
    }
    if p.noise_sigma > 0.0 {
        let normal = Normal::new(0.0f32, p.noise_sigma).expect("positive sigma");
        for v in &mut out {
            *v = (*v + normal.sample(noise_rng)).clamp(0.0, 1.0);
        }
    }
    Tensor::new(vec![size, size, 3], out).expect("render buffer matches shape")
}

fn view_stream(view: View, sample: u32) -> u64 {
    match view {
        View::Satellite => 0,
        View::Drone => 1 + sample as u64,
    }
}

/// Deterministic render for `(scene, view, sample index)`.
pub fn render(scene: &SceneSpec, view: View, sample: u32, size: usize, ranges: &PerturbationRanges) -> ViewImage {
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(scene.seed, view_stream(view, sample)));
    let p = match view {
        View::Satellite => Perturbation::IDENTITY,
        View::Drone => ranges.sample(&mut rng),
    };
    ViewImage {
        pixels: render_with(scene, size, &p, &mut rng),
        view,
        class_id: scene.class_id,
        coords: Some(scene.coords),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PadMode {
    Black,
    Flip,
}

impl PadMode {
    pub fn as_str(self) -> &'static str {
        match self {
            PadMode::Black => "black",
            PadMode::Flip => "flip",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PadSpec {
    pub mode: PadMode,
    pub px: usize,
}

/// Shifts the image right by `px` columns, cropping on the right and filling
/// the left strip with zeros (black) or the mirrored leading columns (flip).
pub fn pad_shift_tensor<T: Scalar>(pixels: &Tensor<T>, spec: PadSpec) -> Result<Tensor<T>, DataError> {
    let (h, w, c) = match *pixels.shape() {
        [h, w, c] => (h, w, c),
        _ => return Err(DataError::NotAnImage(pixels.shape().to_vec())),
    };
    if spec.px >= w {
        return Err(DataError::PadTooWide { px: spec.px, width: w });
    }
    let src = pixels.data();
    let mut out = vec![T::zero(); src.len()];
    for y in 0..h {
        let row = y * w * c;
        for x in 0..w {
            let from = if x >= spec.px {
                Some(x - spec.px)
            } else {
                match spec.mode {
                    PadMode::Black => None,
                    PadMode::Flip => Some(spec.px - 1 - x),
                }
            };
            if let Some(fx) = from {
                out[row + x * c..row + (x + 1) * c].copy_from_slice(&src[row + fx * c..row + (fx + 1) * c]);
            }
        }
    }
    Ok(Tensor::new(pixels.shape().to_vec(), out).expect("same shape"))
}

pub fn pad_shift(image: &ViewImage, spec: PadSpec) -> Result<ViewImage, DataError> {
    Ok(ViewImage {
        pixels: pad_shift_tensor(&image.pixels, spec)?,
        ..image.clone()
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DatasetConfig {
    /// Classes per split; the test split holds as many unseen classes.
    pub num_classes: usize,
    pub drones_per_class: usize,
    /// Extra test scenes with no matching query.
    pub distractors: usize,
    pub image_size: usize,
    pub perturbation: PerturbationRanges,
    /// Also write greyscale PGM previews next to the images.
    pub previews: bool,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            num_classes: 20,
            drones_per_class: 4,
            distractors: 0,
            image_size: 32,
            perturbation: PerturbationRanges::default(),
            previews: false,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), DataError> {
        if self.num_classes < 2 {
            return Err(DataError::TooFewClasses(self.num_classes));
        }
        if self.drones_per_class < 1 {
            return Err(DataError::NoDrones);
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRecord {
    pub id: usize,
    pub file: String,
    pub split: Split,
    pub view: View,
    pub class_id: u32,
    pub distractor: bool,
    pub sample: u32,
    pub coords: (f64, f64),
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub seed: u64,
    pub config: DatasetConfig,
    pub train_classes: Vec<u32>,
    pub test_classes: Vec<u32>,
    pub distractor_classes: Vec<u32>,
    pub images: Vec<ImageRecord>,
}

impl Manifest {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("manifest serialises");
        s.push('\n');
        s
    }
}

/// Images in manifest order, `images[i]` belonging to `manifest.images[i]`.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub manifest: Manifest,
    pub images: Vec<ViewImage>,
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn image_file(split: Split, class: u32, view: View, sample: u32) -> String {
    let split = match split {
        Split::Train => "train",
        Split::Test => "test",
    };
    format!("images/{split}/{class:04}_{}_{sample}.mft", view.as_str())
}

/// Builds the dataset in memory. Train classes are `0..N`, test classes
/// `N..2N`, distractor scenes follow; every scene has one satellite and
/// `drones_per_class` drone images.
pub fn build_dataset(config: &DatasetConfig, seed: u64) -> Result<Dataset, DataError> {
    config.validate()?;
    let n = config.num_classes as u32;
    let train: Vec<u32> = (0..n).collect();
    let test: Vec<u32> = (n..2 * n).collect();
    let distractors: Vec<u32> = (2 * n..2 * n + config.distractors as u32).collect();
    let mut records = Vec::new();
    let mut images = Vec::new();
    let scenes = train
        .iter()
        .map(|&c| (c, Split::Train, false))
        .chain(test.iter().map(|&c| (c, Split::Test, false)))
        .chain(distractors.iter().map(|&c| (c, Split::Test, true)));
    for (class, split, distractor) in scenes {
        let scene = SceneSpec::generate(class, derive_seed(seed, class as u64));
        let views =
            std::iter::once((View::Satellite, 0)).chain((0..config.drones_per_class as u32).map(|s| (View::Drone, s)));
        for (view, sample) in views {
            let img = render(&scene, view, sample, config.image_size, &config.perturbation);
            records.push(ImageRecord {
                id: records.len(),
                file: image_file(split, class, view, sample),
                split,
                view,
                class_id: class,
                distractor,
                sample,
                coords: scene.coords,
                sha256: sha256_hex(&mft::encode(&img.pixels)),
            });
            images.push(img);
        }
    }
    Ok(Dataset {
        manifest: Manifest {
            format: MANIFEST_FORMAT.into(),
            seed,
            config: *config,
            train_classes: train,
            test_classes: test,
            distractor_classes: distractors,
            images: records,
        },
        images,
    })
}

/// Binary greyscale PGM (P5) of a 2-D map, min-max scaled to 0..=255.
pub fn pgm_bytes(width: usize, height: usize, values: &[f32]) -> Vec<u8> {
    let (lo, hi) = values.iter().fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
        (lo.min(v), hi.max(v))
    });
    let span = hi - lo;
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().map(|&v| {
        if span > 0.0 {
            ((v - lo) / span * 255.0).round() as u8
        } else {
            0
        }
    }));
    out
}

fn luminance(img: &Tensor<f32>) -> Vec<f32> {
    img.data()
        .chunks_exact(3)
        .map(|p| 0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2])
        .collect()
}

pub(crate) fn write_bytes(path: &Path, bytes: &[u8]) -> Result<(), DataError> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
    }
    let mut f = fs::File::create(path).map_err(io_err(path))?;
    f.write_all(bytes).map_err(io_err(path))
}

impl Dataset {
    pub fn write(&self, dir: &Path) -> Result<(), DataError> {
        fs::create_dir_all(dir).map_err(io_err(dir))?;
        for (rec, img) in self.manifest.images.iter().zip(&self.images) {
            let path = dir.join(&rec.file);
            write_bytes(&path, &mft::encode(&img.pixels))?;
            if self.manifest.config.previews {
                let s = self.manifest.config.image_size;
                write_bytes(&path.with_extension("pgm"), &pgm_bytes(s, s, &luminance(&img.pixels)))?;
            }
        }
        write_bytes(&dir.join(MANIFEST_FILE), self.manifest.to_json().as_bytes())
    }

    /// Loads a dataset directory, verifying every image against its checksum.
    pub fn load(dir: &Path) -> Result<Self, DataError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(io_err(&path))?;
        let manifest: Manifest = serde_json::from_str(&text)?;
        if manifest.format != MANIFEST_FORMAT {
            return Err(DataError::Manifest(format!("unsupported format {:?}", manifest.format)));
        }
        let s = manifest.config.image_size;
        let mut images = Vec::with_capacity(manifest.images.len());
        for rec in &manifest.images {
            let p = dir.join(&rec.file);
            let bytes = fs::read(&p).map_err(io_err(&p))?;
            if sha256_hex(&bytes) != rec.sha256 {
                return Err(DataError::Manifest(format!("checksum mismatch for {}", rec.file)));
            }
            let pixels = mft::decode::<f32>(&bytes)?;
            if pixels.shape() != [s, s, 3] {
                return Err(DataError::Manifest(format!(
                    "{} has shape {:?}, expected {s}x{s}x3",
                    rec.file,
                    pixels.shape()
                )));
            }
            images.push(ViewImage {
                pixels,
                view: rec.view,
                class_id: rec.class_id,
                coords: Some(rec.coords),
            });
        }
        Ok(Self { manifest, images })
    }

    /// Indices of images in a split and view, in manifest order.
    pub fn select(&self, split: Split, view: View) -> Vec<usize> {
        self.manifest
            .images
            .iter()
            .filter(|r| r.split == split && r.view == view)
            .map(|r| r.id)
            .collect()
    }

    pub fn num_train_classes(&self) -> usize {
        self.manifest.train_classes.len()
    }
}

/// SHA-256 of a dataset directory's manifest file.
pub fn manifest_checksum(dir: &Path) -> Result<String, DataError> {
    let path = dir.join(MANIFEST_FILE);
    Ok(sha256_hex(&fs::read(&path).map_err(io_err(&path))?))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(vals: &[f64]) -> Tensor<f64> {
        Tensor::new(vec![1, vals.len(), 1], vals.to_vec()).unwrap()
    }

    #[test]
    fn pad_examples() {
        let r = row(&[1., 2., 3., 4.]);
        let black = PadSpec {
            mode: PadMode::Black,
            px: 2,
        };
        let flip = PadSpec {
            mode: PadMode::Flip,
            px: 2,
        };
        assert_eq!(pad_shift_tensor(&r, black).unwrap().data(), &[0., 0., 1., 2.]);
        assert_eq!(pad_shift_tensor(&r, flip).unwrap().data(), &[2., 1., 1., 2.]);
        for mode in [PadMode::Black, PadMode::Flip] {
            assert_eq!(pad_shift_tensor(&r, PadSpec { mode, px: 0 }).unwrap(), r);
            assert!(matches!(
                pad_shift_tensor(&r, PadSpec { mode, px: 4 }),
                Err(DataError::PadTooWide { px: 4, width: 4 })
            ));
        }
    }

    #[test]
    fn scenes_are_valid_and_deterministic() {
        for c in 0..50 {
            let s = SceneSpec::generate(c, derive_seed(7, c as u64));
            assert!(s.is_valid(), "scene {c} invalid");
            assert_eq!(s, SceneSpec::generate(c, derive_seed(7, c as u64)));
        }
    }

    #[test]
    fn identity_drone_equals_satellite() {
        let scene = SceneSpec::generate(3, 99);
        let none = PerturbationRanges {
            max_rotation_deg: 0.0,
            scale: (1.0, 1.0),
            max_brightness: 0.0,
            noise_sigma: 0.0,
        };
        let sat = render(&scene, View::Satellite, 0, 32, &none);
        let drone = render(&scene, View::Drone, 2, 32, &none);
        assert_eq!(sat.pixels, drone.pixels);
        let again = render(&scene, View::Satellite, 0, 32, &PerturbationRanges::default());
        assert_eq!(sat.pixels, again.pixels);
        let noisy = render(&scene, View::Drone, 2, 32, &PerturbationRanges::default());
        assert_ne!(sat.pixels, noisy.pixels);
        assert!(noisy.pixels.data().iter().all(|v| (0.0..=1.0).contains(v)));
    }

    #[test]
    fn dataset_counts_and_disjoint_splits() {
        let cfg = DatasetConfig {
            distractors: 3,
            ..DatasetConfig::default()
        };
        let ds = build_dataset(&cfg, 5).unwrap();
        assert_eq!(ds.select(Split::Train, View::Drone).len(), 80);
        assert_eq!(ds.select(Split::Train, View::Satellite).len(), 20);
        assert_eq!(ds.select(Split::Test, View::Satellite).len(), 23);
        let m = &ds.manifest;
        assert!(m.train_classes.iter().all(|c| !m.test_classes.contains(c)));
        assert!(matches!(
            build_dataset(&DatasetConfig { num_classes: 1, ..cfg }, 5),
            Err(DataError::TooFewClasses(1))
        ));
    }
}
