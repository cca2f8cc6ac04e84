//! Synthetic shapes benchmark and labeled/unlabeled pool bookkeeping.
//!
//! Images have three channels: channel 0 carries the rendered scene
//! (background, distractor clutter and filled shapes), channels 1 and 2 carry
//! independent noise. About `hard_fraction` of the images are object-rich
//! (several small, possibly overlapping shapes over dense clutter); the rest
//! hold at most a couple of large shapes on a clean background.

use std::collections::BTreeSet;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::{GroundTruth, ImageId};
use crate::geometry::{iou, BBox};

pub const SHAPE_NAMES: [&str; 4] = ["circle", "square", "triangle", "diamond"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub image_size: usize,
    pub channels: usize,
    /// Number of shape classes, 3 or 4 (circle, square, triangle, diamond).
    pub num_classes: usize,
    pub max_objects: usize,
    pub min_object_area: f64,
    pub hard_fraction: f64,
    pub easy_objects: (usize, usize),
    pub hard_objects: (usize, usize),
    pub easy_size: (f64, f64),
    pub hard_size: (f64, f64),
    pub easy_clutter: (f64, f64),
    pub hard_clutter: (f64, f64),
    /// Largest IoU allowed between two objects of a hard image.
    pub max_overlap: f64,
    pub noise_std: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            image_size: 96,
            channels: 3,
            num_classes: 3,
            max_objects: 6,
            min_object_area: 64.0,
            hard_fraction: 0.3,
            easy_objects: (0, 2),
            hard_objects: (3, 6),
            easy_size: (26.0, 44.0),
            hard_size: (16.0, 28.0),
            easy_clutter: (0.0, 0.15),
            hard_clutter: (0.5, 1.0),
            max_overlap: 0.25,
            noise_std: 0.05,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Config(m));
        if self.image_size == 0 || self.channels == 0 {
            return err("image_size and channels must be positive".into());
        }
        if !(3..=SHAPE_NAMES.len()).contains(&self.num_classes) {
            return err(format!(
                "num_classes must be in 3..={}, got {}",
                SHAPE_NAMES.len(),
                self.num_classes
            ));
        }
        let side = self.image_size as f64;
        for (name, (lo, hi)) in [("easy_size", self.easy_size), ("hard_size", self.hard_size)] {
            if !(lo > 0.0 && lo <= hi) {
                return err(format!("{name} must satisfy 0 < min <= max"));
            }
            if hi > side {
                return err(format!("{name} max {hi} exceeds image size {side}"));
            }
            // aspect jitter can shrink one side by up to 20%
            if (hi * 0.8).powi(2) < self.min_object_area {
                return err(format!(
                    "min_object_area {} is infeasible for {name} up to {hi}",
                    self.min_object_area
                ));
            }
        }
        if self.min_object_area > side * side {
            return err("min_object_area exceeds the image area".into());
        }
        for (name, (lo, hi)) in [
            ("easy_objects", self.easy_objects),
            ("hard_objects", self.hard_objects),
        ] {
            if lo > hi {
                return err(format!("{name} must satisfy min <= max"));
            }
        }
        for (name, (lo, hi)) in [
            ("easy_clutter", self.easy_clutter),
            ("hard_clutter", self.hard_clutter),
        ] {
            if !(0.0..=1.0).contains(&lo) || !(0.0..=1.0).contains(&hi) || lo > hi {
                return err(format!("{name} must be an ordered range inside [0, 1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.hard_fraction) {
            return err("hard_fraction must lie in [0, 1]".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSample {
    pub image_id: ImageId,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    /// Channel-major pixel data in [0, 1].
    pub image: Vec<f32>,
    pub annotations: Vec<Annotation>,
    pub clutter_level: f64,
    pub hard: bool,
}

/// Generated images plus the fixed train/test split.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub seed: u64,
    pub config: GeneratorConfig,
    pub samples: Vec<SyntheticSample>,
    pub train_ids: Vec<ImageId>,
    pub test_ids: Vec<ImageId>,
}

impl Dataset {
    /// Generates `num_images` samples and holds out `test_fraction` of them.
    pub fn generate(
        seed: u64,
        num_images: usize,
        config: &GeneratorConfig,
        test_fraction: f64,
    ) -> Result<Self> {
        let samples = generate_dataset(seed, num_images, config)?;
        let (train_ids, test_ids) = split_ids(seed, num_images, test_fraction)?;
        Ok(Self {
            seed,
            config: config.clone(),
            samples,
            train_ids,
            test_ids,
        })
    }

    pub fn sample(&self, id: ImageId) -> &SyntheticSample {
        &self.samples[id as usize]
    }

    pub fn ground_truth(&self, ids: &[ImageId]) -> Vec<GroundTruth> {
        ids.iter()
            .flat_map(|&id| {
                self.sample(id).annotations.iter().map(move |a| GroundTruth {
                    image_id: id,
                    class_id: a.class_id,
                    bbox: a.bbox,
                })
            })
            .collect()
    }
}

/// Deterministic split: ids are ordered by a seeded hash and the first
/// `round(test_fraction * n)` become the test split. Both lists are returned
/// sorted.
pub fn split_ids(seed: u64, n: usize, test_fraction: f64) -> Result<(Vec<ImageId>, Vec<ImageId>)> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::Config(format!(
            "test_fraction must lie in [0, 1), got {test_fraction}"
        )));
    }
    let mut keyed: Vec<(u64, ImageId)> = (0..n as ImageId)
        .map(|id| (splitmix64(seed ^ splitmix64(u64::from(id) + 1)), id))
        .collect();
    keyed.sort_unstable();
    let n_test = (test_fraction * n as f64).round() as usize;
    let mut test: Vec<ImageId> = keyed[..n_test].iter().map(|k| k.1).collect();
    let mut train: Vec<ImageId> = keyed[n_test..].iter().map(|k| k.1).collect();
    test.sort_unstable();
    train.sort_unstable();
    Ok((train, test))
}

pub(crate) fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Generates `q` samples; sample `i` depends only on `(seed, config, i)`.
pub fn generate_dataset(seed: u64, q: usize, config: &GeneratorConfig) -> Result<Vec<SyntheticSample>> {
    if q == 0 {
        return Err(Error::Config("dataset size must be positive".into()));
    }
    config.validate()?;
    Ok((0..q as ImageId)
        .map(|id| generate_sample(seed, id, config))
        .collect())
}

fn generate_sample(seed: u64, image_id: ImageId, cfg: &GeneratorConfig) -> SyntheticSample {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(u64::from(image_id));

    let side = cfg.image_size;
    let hard = rng.random::<f64>() < cfg.hard_fraction;
    let (count_range, size_range, clutter_range) = if hard {
        (cfg.hard_objects, cfg.hard_size, cfg.hard_clutter)
    } else {
        (cfg.easy_objects, cfg.easy_size, cfg.easy_clutter)
    };
    let count = rng
        .random_range(count_range.0..=count_range.1)
        .min(cfg.max_objects);
    let clutter_level = sample_range(&mut rng, clutter_range);
    let max_overlap = if hard { cfg.max_overlap } else { 0.0 };

    let mut annotations: Vec<Annotation> = Vec::with_capacity(count);
    for _ in 0..count {
        for _attempt in 0..64 {
            let size = sample_range(&mut rng, size_range);
            let aspect: f64 = rng.random_range(0.8..1.25);
            let w = (size * aspect.sqrt()).min(side as f64);
            let h = (size / aspect.sqrt()).min(side as f64);
            if w * h < cfg.min_object_area {
                continue;
            }
            let x = rng.random_range(0.0..=(side as f64 - w));
            let y = rng.random_range(0.0..=(side as f64 - h));
            let bbox = BBox::new(x, y, x + w, y + h);
            if annotations
                .iter()
                .any(|a| iou(&a.bbox, &bbox) > max_overlap || (max_overlap == 0.0 && a.bbox.intersection_area(&bbox) > 0.0))
            {
                continue;
            }
            let class_id = rng.random_range(0..cfg.num_classes);
            annotations.push(Annotation { class_id, bbox });
            break;
        }
    }

    let image = render(&mut rng, cfg, &annotations, clutter_level);
    SyntheticSample {
        image_id,
        channels: cfg.channels,
        height: side,
        width: side,
        image,
        annotations,
        clutter_level,
        hard,
    }
}

fn sample_range<R: Rng>(rng: &mut R, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn inside_shape(class_id: usize, b: &BBox, px: f64, py: f64) -> bool {
    if px < b.x_min || px > b.x_max || py < b.y_min || py > b.y_max {
        return false;
    }
    let (cx, cy) = b.center();
    let (hw, hh) = (b.width() / 2.0, b.height() / 2.0);
    let (u, v) = ((px - cx) / hw, (py - cy) / hh);
    match class_id {
        0 => u * u + v * v <= 1.0,
        1 => true,
        // apex at the top middle, base along the bottom edge
        2 => u.abs() <= (v + 1.0) / 2.0,
        _ => u.abs() + v.abs() <= 1.0,
    }
}

fn render<R: Rng>(
    rng: &mut R,
    cfg: &GeneratorConfig,
    annotations: &[Annotation],
    clutter_level: f64,
) -> Vec<f32> {
    let side = cfg.image_size;
    let plane = side * side;
    let mut image = vec![0f32; cfg.channels * plane];
    let scene = &mut image[..plane];

    let background: f32 = rng.random_range(0.05..0.3);
    scene.fill(background);

    // distractors: short strokes and blobs smaller than any object
    let n_distractors = (clutter_level * 40.0).round() as usize;
    for _ in 0..n_distractors {
        let level: f32 = rng.random_range(0.4..0.9);
        let cx: f64 = rng.random_range(0.0..side as f64);
        let cy: f64 = rng.random_range(0.0..side as f64);
        if rng.random::<bool>() {
            let r: f64 = rng.random_range(1.0..3.0);
            paint(scene, side, cx - r, cy - r, cx + r, cy + r, level, |px, py| {
                (px - cx).powi(2) + (py - cy).powi(2) <= r * r
            });
        } else {
            let len: f64 = rng.random_range(4.0..12.0);
            let angle: f64 = rng.random_range(0.0..std::f64::consts::PI);
            let (dx, dy) = (angle.cos() * len / 2.0, angle.sin() * len / 2.0);
            let (x0, y0, x1, y1) = (cx - dx, cy - dy, cx + dx, cy + dy);
            paint(
                scene,
                side,
                x0.min(x1) - 1.0,
                y0.min(y1) - 1.0,
                x0.max(x1) + 1.0,
                y0.max(y1) + 1.0,
                level,
                |px, py| segment_distance(px, py, x0, y0, x1, y1) <= 0.7,
            );
        }
    }

    for a in annotations {
        let level: f32 = rng.random_range(0.6..1.0);
        let b = a.bbox;
        paint(scene, side, b.x_min, b.y_min, b.x_max, b.y_max, level, |px, py| {
            inside_shape(a.class_id, &b, px, py)
        });
    }

    let noise = Normal::new(0.0, cfg.noise_std.max(1e-12)).expect("finite std");
    for v in scene.iter_mut() {
        *v = (*v + noise.sample(rng) as f32).clamp(0.0, 1.0);
    }
    for v in image[plane..].iter_mut() {
        *v = rng.random::<f32>();
    }
    image
}

#[allow(clippy::too_many_arguments)]
fn paint(
    plane: &mut [f32],
    side: usize,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
    level: f32,
    inside: impl Fn(f64, f64) -> bool,
) {
    let lo = |v: f64| (v.floor().max(0.0) as usize).min(side);
    let hi = |v: f64| (v.ceil().max(0.0) as usize).min(side);
    for y in lo(y0)..hi(y1) {
        for x in lo(x0)..hi(x1) {
            if inside(x as f64 + 0.5, y as f64 + 0.5) {
                plane[y * side + x] = level;
            }
        }
    }
}

fn segment_distance(px: f64, py: f64, x0: f64, y0: f64, x1: f64, y1: f64) -> f64 {
    let (dx, dy) = (x1 - x0, y1 - y0);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 {
        (((px - x0) * dx + (py - y0) * dy) / len2).clamp(0.0, 1.0)
    } else {
        0.0
    };
    ((px - x0 - t * dx).powi(2) + (py - y0 - t * dy).powi(2)).sqrt()
}

/// Checks every annotation of every sample against the image bounds and the
/// minimum area. Returns human-readable violations.
pub fn validate_annotations(samples: &[SyntheticSample], config: &GeneratorConfig) -> Vec<String> {
    let mut violations = Vec::new();
    for s in samples {
        if s.annotations.len() > config.max_objects {
            violations.push(format!("image {}: {} objects", s.image_id, s.annotations.len()));
        }
        for a in &s.annotations {
            let b = a.bbox;
            let in_bounds = b.is_valid()
                && b.x_min >= 0.0
                && b.y_min >= 0.0
                && b.x_max <= s.width as f64
                && b.y_max <= s.height as f64;
            if !in_bounds {
                violations.push(format!("image {}: box {:?} out of bounds", s.image_id, b));
            }
            if b.area() < config.min_object_area {
                violations.push(format!("image {}: box {:?} below min area", s.image_id, b));
            }
            if a.class_id >= config.num_classes {
                violations.push(format!("image {}: class {}", s.image_id, a.class_id));
            }
        }
    }
    violations
}

/// Partition of the training ids into labeled and unlabeled images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolState {
    pub labeled_ids: BTreeSet<ImageId>,
    pub unlabeled_ids: BTreeSet<ImageId>,
    pub cycle_index: usize,
    pub budget_per_cycle: usize,
}

/// Labels `round(initial_fraction * ids.len())` ids drawn uniformly under `seed`.
pub fn init_pool(
    ids: &[ImageId],
    initial_fraction: f64,
    budget_per_cycle: i64,
    seed: u64,
) -> Result<PoolState> {
    if !(initial_fraction > 0.0 && initial_fraction < 1.0) {
        return Err(Error::Config(format!(
            "initial_fraction must lie in (0, 1), got {initial_fraction}"
        )));
    }
    if budget_per_cycle <= 0 {
        return Err(Error::Config(format!(
            "budget_per_cycle must be positive, got {budget_per_cycle}"
        )));
    }
    let q = ids.len();
    let k0 = ((initial_fraction * q as f64).round() as usize).min(q);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let picked = index::sample(&mut rng, q, k0);
    let labeled_ids: BTreeSet<ImageId> = picked.iter().map(|i| ids[i]).collect();
    let unlabeled_ids = ids
        .iter()
        .copied()
        .filter(|id| !labeled_ids.contains(id))
        .collect();
    Ok(PoolState {
        labeled_ids,
        unlabeled_ids,
        cycle_index: 0,
        budget_per_cycle: budget_per_cycle as usize,
    })
}

impl PoolState {
    /// Moves `selected` from the unlabeled to the labeled pool and advances
    /// the cycle index. `self` is left untouched.
    pub fn promote(&self, selected: &[ImageId]) -> Result<PoolState> {
        if selected.len() > self.budget_per_cycle {
            return Err(Error::PoolInvariant(format!(
                "{} ids selected with a budget of {}",
                selected.len(),
                self.budget_per_cycle
            )));
        }
        let mut next = self.clone();
        for id in selected {
            if !next.unlabeled_ids.remove(id) {
                let why = if self.labeled_ids.contains(id) {
                    "already labeled"
                } else {
                    "unknown or duplicated"
                };
                return Err(Error::PoolInvariant(format!("image {id} is {why}")));
            }
            next.labeled_ids.insert(*id);
        }
        next.cycle_index += 1;
        Ok(next)
    }

    pub fn labeled(&self) -> Vec<ImageId> {
        self.labeled_ids.iter().copied().collect()
    }

    pub fn unlabeled(&self) -> Vec<ImageId> {
        self.unlabeled_ids.iter().copied().collect()
    }

    /// Disjoint and covering `all_ids` exactly.
    pub fn check_partition(&self, all_ids: &[ImageId]) -> Result<()> {
        if !self.labeled_ids.is_disjoint(&self.unlabeled_ids) {
            return Err(Error::PoolInvariant("labeled and unlabeled overlap".into()));
        }
        let all: BTreeSet<ImageId> = all_ids.iter().copied().collect();
        let union: BTreeSet<ImageId> = self.labeled_ids.union(&self.unlabeled_ids).copied().collect();
        if union != all {
            return Err(Error::PoolInvariant("pool does not cover the id set".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// On-disk layout
//
//   <dir>/manifest.json      seed, generator config, train/test ids
//   <dir>/index.jsonl        one IndexEntry per image
//   <dir>/images/NNNNNN.bin  raw image array
//
// Image file: b"SIMG", version u8 (1), dtype u8 (1 = f32 little endian),
// two reserved bytes, then channels, height, width as u32 LE, then the
// channel-major pixel values.

const IMAGE_MAGIC: &[u8; 4] = b"SIMG";
const DTYPE_F32_LE: u8 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct DatasetManifest {
    format_version: u32,
    seed: u64,
    num_images: usize,
    config: GeneratorConfig,
    train_ids: Vec<ImageId>,
    test_ids: Vec<ImageId>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct IndexEntry {
    pub image_id: ImageId,
    pub path: String,
    pub split: String,
    pub clutter_level: f64,
    pub hard: bool,
    pub annotations: Vec<Annotation>,
}

pub fn write_image_array(path: &Path, channels: usize, height: usize, width: usize, data: &[f32]) -> Result<()> {
    let mut out = BufWriter::new(fs::File::create(path)?);
    out.write_all(IMAGE_MAGIC)?;
    out.write_all(&[1, DTYPE_F32_LE, 0, 0])?;
    for d in [channels, height, width] {
        out.write_all(&(d as u32).to_le_bytes())?;
    }
    for v in data {
        out.write_all(&v.to_le_bytes())?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_image_array(path: &Path) -> Result<(usize, usize, usize, Vec<f32>)> {
    let mut bytes = Vec::new();
    fs::File::open(path)?.read_to_end(&mut bytes)?;
    if bytes.len() < 20 || &bytes[..4] != IMAGE_MAGIC {
        return Err(Error::format(path, "missing image header"));
    }
    if bytes[4] != 1 || bytes[5] != DTYPE_F32_LE {
        return Err(Error::format(path, "unsupported version or dtype"));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (c, h, w) = (dim(0), dim(1), dim(2));
    let payload = &bytes[20..];
    if payload.len() != c * h * w * 4 {
        return Err(Error::format(path, "payload size does not match header"));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    Ok((c, h, w, data))
}

pub fn save_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir.join("images"))?;
    let manifest = DatasetManifest {
        format_version: 1,
        seed: dataset.seed,
        num_images: dataset.samples.len(),
        config: dataset.config.clone(),
        train_ids: dataset.train_ids.clone(),
        test_ids: dataset.test_ids.clone(),
    };
    fs::write(dir.join("manifest.json"), serde_json::to_string_pretty(&manifest)?)?;

    let test: BTreeSet<ImageId> = dataset.test_ids.iter().copied().collect();
    let mut index = BufWriter::new(fs::File::create(dir.join("index.jsonl"))?);
    for s in &dataset.samples {
        let rel = format!("images/{:06}.bin", s.image_id);
        write_image_array(&dir.join(&rel), s.channels, s.height, s.width, &s.image)?;
        let entry = IndexEntry {
            image_id: s.image_id,
            path: rel,
            split: if test.contains(&s.image_id) { "test" } else { "train" }.to_string(),
            clutter_level: s.clutter_level,
            hard: s.hard,
            annotations: s.annotations.clone(),
        };
        serde_json::to_writer(&mut index, &entry)?;
        index.write_all(b"\n")?;
    }
    index.flush()?;
    Ok(())
}

pub fn load_dataset(dir: &Path) -> Result<Dataset> {
    let manifest_path = dir.join("manifest.json");
    let manifest: DatasetManifest = serde_json::from_slice(&fs::read(&manifest_path)?)?;
    let index_path = dir.join("index.jsonl");
    let mut samples = Vec::with_capacity(manifest.num_images);
    for (i, line) in BufReader::new(fs::File::open(&index_path)?).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: IndexEntry = serde_json::from_str(&line)?;
        if entry.image_id as usize != i {
            return Err(Error::format(&index_path, format!("line {i} holds image {}", entry.image_id)));
        }
        let (channels, height, width, image) = read_image_array(&dir.join(&entry.path))?;
        samples.push(SyntheticSample {
            image_id: entry.image_id,
            channels,
            height,
            width,
            image,
            annotations: entry.annotations,
            clutter_level: entry.clutter_level,
            hard: entry.hard,
        });
    }
    if samples.len() != manifest.num_images {
        return Err(Error::format(
            &index_path,
            format!("{} entries, manifest says {}", samples.len(), manifest.num_images),
        ));
    }
    Ok(Dataset {
        seed: manifest.seed,
        config: manifest.config,
        samples,
        train_ids: manifest.train_ids,
        test_ids: manifest.test_ids,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn generation_is_deterministic() {
        let cfg = GeneratorConfig::default();
        let a = generate_dataset(0, 1, &cfg).unwrap();
        let b = generate_dataset(0, 1, &cfg).unwrap();
        assert_eq!(a, b);
        let bits = |s: &SyntheticSample| s.image.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a[0]), bits(&b[0]));
    }

    #[test]
    fn sample_depends_only_on_its_id() {
        let cfg = GeneratorConfig::default();
        let small = generate_dataset(3, 4, &cfg).unwrap();
        let large = generate_dataset(3, 10, &cfg).unwrap();
        assert_eq!(small[..], large[..4]);
    }

    #[test]
    fn zero_max_objects_gives_empty_annotations() {
        let cfg = GeneratorConfig {
            max_objects: 0,
            ..Default::default()
        };
        let samples = generate_dataset(1, 50, &cfg).unwrap();
        assert!(samples.iter().all(|s| s.annotations.is_empty()));
    }

    #[test]
    fn infeasible_min_area_is_rejected() {
        let cfg = GeneratorConfig {
            min_object_area: 50.0 * 50.0,
            ..Default::default()
        };
        assert!(matches!(generate_dataset(0, 1, &cfg), Err(Error::Config(_))));
        let cfg = GeneratorConfig {
            hard_size: (12.0, 200.0),
            ..Default::default()
        };
        assert!(matches!(generate_dataset(0, 1, &cfg), Err(Error::Config(_))));
    }

    #[test]
    fn pixels_stay_in_unit_interval() {
        let samples = generate_dataset(5, 20, &GeneratorConfig::default()).unwrap();
        for s in &samples {
            assert_eq!(s.image.len(), 3 * 96 * 96);
            assert!(s.image.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn hard_images_are_object_rich() {
        let samples = generate_dataset(0, 200, &GeneratorConfig::default()).unwrap();
        let hard: Vec<_> = samples.iter().filter(|s| s.hard).collect();
        let easy: Vec<_> = samples.iter().filter(|s| !s.hard).collect();
        assert!(!hard.is_empty() && !easy.is_empty());
        let mean = |v: &[&SyntheticSample]| {
            v.iter().map(|s| s.annotations.len()).sum::<usize>() as f64 / v.len() as f64
        };
        assert!(mean(&hard) > 2.0 * mean(&easy));
        assert!(easy.iter().all(|s| s.annotations.len() <= 2));
    }

    #[test]
    fn split_is_exact_and_disjoint() {
        let (train, test) = split_ids(7, 500, 0.2).unwrap();
        assert_eq!((train.len(), test.len()), (400, 100));
        let t: BTreeSet<_> = test.iter().collect();
        assert!(train.iter().all(|id| !t.contains(id)));
    }

    #[test]
    fn init_pool_sizes_and_determinism() {
        let ids: Vec<ImageId> = (0..100).collect();
        let a = init_pool(&ids, 0.05, 5, 11).unwrap();
        assert_eq!(a.labeled_ids.len(), 5);
        assert_eq!(a.cycle_index, 0);
        assert_eq!(a, init_pool(&ids, 0.05, 5, 11).unwrap());
        a.check_partition(&ids).unwrap();
    }

    #[test]
    fn init_pool_rejects_bad_arguments() {
        let ids: Vec<ImageId> = (0..10).collect();
        assert!(matches!(init_pool(&ids, 0.1, 0, 0), Err(Error::Config(_))));
        assert!(matches!(init_pool(&ids, 0.1, -3, 0), Err(Error::Config(_))));
        assert!(matches!(init_pool(&ids, 1.0, 1, 0), Err(Error::Config(_))));
        assert!(matches!(init_pool(&ids, 0.0, 1, 0), Err(Error::Config(_))));
    }

    #[test]
    fn promote_moves_ids_and_keeps_input() {
        let ids: Vec<ImageId> = (0..100).collect();
        let pool = init_pool(&ids, 0.05, 5, 0).unwrap();
        let target = *pool.unlabeled_ids.iter().next().unwrap();
        let next = pool.promote(&[target]).unwrap();
        assert!(next.labeled_ids.contains(&target));
        assert!(!next.unlabeled_ids.contains(&target));
        assert!(pool.unlabeled_ids.contains(&target));
        assert_eq!(next.cycle_index, 1);

        let same = pool.promote(&[]).unwrap();
        assert_eq!(same.labeled_ids, pool.labeled_ids);
        assert_eq!(same.cycle_index, 1);
    }

    #[test]
    fn promote_rejects_labeled_unknown_or_over_budget() {
        let ids: Vec<ImageId> = (0..20).collect();
        let pool = init_pool(&ids, 0.25, 3, 0).unwrap();
        let labeled = *pool.labeled_ids.iter().next().unwrap();
        assert!(matches!(pool.promote(&[labeled]), Err(Error::PoolInvariant(_))));
        assert!(matches!(pool.promote(&[999]), Err(Error::PoolInvariant(_))));
        let free = pool.unlabeled();
        assert!(matches!(pool.promote(&free[..4]), Err(Error::PoolInvariant(_))));
        assert!(matches!(pool.promote(&[free[0], free[0]]), Err(Error::PoolInvariant(_))));
    }

    #[test]
    fn six_promotions_reach_35_of_100() {
        let ids: Vec<ImageId> = (0..100).collect();
        let mut pool = init_pool(&ids, 0.05, 5, 2).unwrap();
        for _ in 0..6 {
            let pick: Vec<ImageId> = pool.unlabeled_ids.iter().copied().take(5).collect();
            pool = pool.promote(&pick).unwrap();
            pool.check_partition(&ids).unwrap();
        }
        assert_eq!((pool.labeled_ids.len(), pool.unlabeled_ids.len()), (35, 65));
        assert_eq!(pool.cycle_index, 6);
    }

    #[test]
    fn dataset_round_trips_through_disk() {
        let ds = Dataset::generate(9, 6, &GeneratorConfig::default(), 0.2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_dataset(&ds, dir.path()).unwrap();
        assert_eq!(load_dataset(dir.path()).unwrap(), ds);
    }
}
