use serde::{Deserialize, Serialize};

use crate::data::Annotation;
use crate::error::{Error, Result};
use crate::geometry::{encode, iou, BBox};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AnchorConfig {
    /// One pyramid level per stride, finest first.
    pub strides: Vec<usize>,
    /// Anchor side at scale 1 is `size_factor * stride`.
    pub size_factor: f64,
    pub scales: Vec<f64>,
    /// Height over width.
    pub aspect_ratios: Vec<f64>,
    pub positive_iou: f64,
    pub negative_iou: f64,
}

impl Default for AnchorConfig {
    fn default() -> Self {
        Self {
            strides: vec![8, 16],
            size_factor: 2.0,
            scales: vec![1.0, 2f64.powf(1.0 / 3.0), 2f64.powf(2.0 / 3.0)],
            aspect_ratios: vec![1.0],
            positive_iou: 0.5,
            negative_iou: 0.4,
        }
    }
}

impl AnchorConfig {
    pub fn anchors_per_cell(&self) -> usize {
        self.scales.len() * self.aspect_ratios.len()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LevelShape {
    pub stride: usize,
    pub grid_h: usize,
    pub grid_w: usize,
    /// Index of the first anchor of this level.
    pub offset: usize,
}

/// Anchors ordered by level, then row, column and anchor slot.
#[derive(Debug, Clone, PartialEq)]
pub struct AnchorGrid {
    pub anchors: Vec<BBox>,
    pub levels: Vec<LevelShape>,
    pub anchors_per_cell: usize,
    pub image_size: usize,
}

impl AnchorGrid {
    pub fn len(&self) -> usize {
        self.anchors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.anchors.is_empty()
    }

    pub fn level_range(&self, level: usize) -> std::ops::Range<usize> {
        let l = &self.levels[level];
        l.offset..l.offset + l.grid_h * l.grid_w * self.anchors_per_cell
    }
}

pub fn build_anchors(image_size: usize, config: &AnchorConfig) -> Result<AnchorGrid> {
    if config.strides.is_empty() || config.anchors_per_cell() == 0 {
        return Err(Error::Config("anchor config needs at least one level and one anchor shape".into()));
    }
    let a = config.anchors_per_cell();
    let side = image_size as f64;
    let mut anchors = Vec::new();
    let mut levels = Vec::with_capacity(config.strides.len());
    for &stride in &config.strides {
        if stride == 0 || !image_size.is_multiple_of(stride) {
            return Err(Error::Config(format!(
                "stride {stride} does not divide image size {image_size}"
            )));
        }
        let g = image_size / stride;
        levels.push(LevelShape {
            stride,
            grid_h: g,
            grid_w: g,
            offset: anchors.len(),
        });
        let base = config.size_factor * stride as f64;
        for y in 0..g {
            for x in 0..g {
                let cx = (x as f64 + 0.5) * stride as f64;
                let cy = (y as f64 + 0.5) * stride as f64;
                for &scale in &config.scales {
                    for &ratio in &config.aspect_ratios {
                        let w = base * scale / ratio.sqrt();
                        let h = base * scale * ratio.sqrt();
                        anchors.push(BBox::from_center(cx, cy, w, h).clip(side, side));
                    }
                }
            }
        }
    }
    debug_assert!(anchors.len() % a == 0);
    Ok(AnchorGrid {
        anchors,
        levels,
        anchors_per_cell: a,
        image_size,
    })
}

/// Per-anchor training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct InstanceTargets {
    /// Class per anchor; `num_classes` is background.
    pub cls_target: Vec<usize>,
    /// Encoded offsets; zeros for non-positive anchors.
    pub loc_target: Vec<[f64; 4]>,
    pub positive: Vec<bool>,
    pub ignore: Vec<bool>,
    pub num_classes: usize,
}

impl InstanceTargets {
    pub fn background(&self) -> usize {
        self.num_classes
    }

    pub fn num_positive(&self) -> usize {
        self.positive.iter().filter(|p| **p).count()
    }

    pub fn positive_indices(&self) -> Vec<usize> {
        (0..self.positive.len()).filter(|&j| self.positive[j]).collect()
    }
}

/// IoU assignment: positive at `positive_iou`, background below
/// `negative_iou`, ignored in between; each ground-truth box also claims its
/// best anchor so that no object goes unmatched.
pub fn match_targets(
    grid: &AnchorGrid,
    annotations: &[Annotation],
    num_classes: usize,
    config: &AnchorConfig,
) -> InstanceTargets {
    let t = grid.len();
    let mut cls_target = vec![num_classes; t];
    let mut loc_target = vec![[0.0; 4]; t];
    let mut positive = vec![false; t];
    let mut ignore = vec![false; t];
    if annotations.is_empty() {
        return InstanceTargets {
            cls_target,
            loc_target,
            positive,
            ignore,
            num_classes,
        };
    }

    let mut best_gt = vec![0usize; t];
    let mut best_iou = vec![f64::NEG_INFINITY; t];
    let mut gt_best_anchor = vec![(0usize, f64::NEG_INFINITY); annotations.len()];
    for (j, anchor) in grid.anchors.iter().enumerate() {
        for (g, ann) in annotations.iter().enumerate() {
            let v = iou(anchor, &ann.bbox);
            if v > best_iou[j] {
                best_iou[j] = v;
                best_gt[j] = g;
            }
            if v > gt_best_anchor[g].1 {
                gt_best_anchor[g] = (j, v);
            }
        }
    }

    let mut assigned: Vec<Option<usize>> = vec![None; t];
    for j in 0..t {
        if best_iou[j] >= config.positive_iou {
            assigned[j] = Some(best_gt[j]);
        } else if best_iou[j] >= config.negative_iou {
            ignore[j] = true;
        }
    }
    // forced matches; on a shared anchor the higher IoU wins
    let mut forced_iou = vec![f64::NEG_INFINITY; t];
    for (g, &(j, v)) in gt_best_anchor.iter().enumerate() {
        if v > 0.0 && v > forced_iou[j] {
            forced_iou[j] = v;
            assigned[j] = Some(g);
            ignore[j] = false;
        }
    }

    for j in 0..t {
        if let Some(g) = assigned[j] {
            let ann = &annotations[g];
            positive[j] = true;
            cls_target[j] = ann.class_id;
            loc_target[j] = encode(&ann.bbox, &grid.anchors[j]);
        }
    }
    InstanceTargets {
        cls_target,
        loc_target,
        positive,
        ignore,
        num_classes,
    }
}
