//! Anchor-based single-stage detector with a classification committee.
//!
//! A strided convolutional backbone produces one feature map per pyramid
//! level. Every head is a 3x3 convolution shared across levels: the main
//! classifier (softmax over the classes plus an explicit background label),
//! the main box regressor, and `N` committee classifiers with the main
//! classifier's shape but their own parameters. Committee heads read the
//! backbone features but never send gradient back into the backbone.

pub mod anchors;
pub mod checkpoint;
pub mod nn;
pub mod train;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::Detection;
use crate::geometry::{decode, nms, BBox};
use crate::losses::softmax_in_place;

use self::anchors::{build_anchors, AnchorConfig, AnchorGrid};
use self::nn::{relu_in_place, Conv2d};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub image_size: usize,
    pub in_channels: usize,
    /// Output channels of the stride-2 backbone blocks.
    pub backbone_channels: Vec<usize>,
    pub num_classes: usize,
    pub committee_size: usize,
    pub anchors: AnchorConfig,
    /// Initial foreground probability encoded in the classifier biases.
    pub prior_prob: f64,
    pub head_init_std: f64,
    /// Subtracted from every pixel before the first convolution.
    pub input_offset: f64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            image_size: 96,
            in_channels: 3,
            backbone_channels: vec![16, 32, 48, 48],
            num_classes: 3,
            committee_size: 3,
            anchors: AnchorConfig::default(),
            prior_prob: 0.1,
            head_init_std: 0.01,
            input_offset: 0.5,
        }
    }
}

impl DetectorConfig {
    /// Backbone block whose output feeds each pyramid level.
    fn level_blocks(&self) -> Result<Vec<usize>> {
        self.anchors
            .strides
            .iter()
            .map(|&s| {
                if !s.is_power_of_two() || s < 2 {
                    return Err(Error::Config(format!("stride {s} is not a power of two >= 2")));
                }
                let block = s.trailing_zeros() as usize - 1;
                if block >= self.backbone_channels.len() {
                    return Err(Error::Config(format!(
                        "stride {s} needs {} backbone blocks, have {}",
                        block + 1,
                        self.backbone_channels.len()
                    )));
                }
                Ok(block)
            })
            .collect()
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 {
            return Err(Error::Config("num_classes must be positive".into()));
        }
        let blocks = self.level_blocks()?;
        let feat = self.backbone_channels[blocks[0]];
        if blocks.iter().any(|&b| self.backbone_channels[b] != feat) {
            return Err(Error::Config(
                "pyramid levels must have equal channel counts (heads are shared)".into(),
            ));
        }
        build_anchors(self.image_size, &self.anchors)?;
        Ok(())
    }

    pub fn num_labels(&self) -> usize {
        self.num_classes + 1
    }
}

/// Per-anchor outputs for one image. Probability matrices are row-major
/// `T x (C+1)` with background in the last column.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePrediction {
    pub num_anchors: usize,
    pub num_labels: usize,
    pub main_cls: Vec<f64>,
    /// `T x 4` encoded offsets.
    pub main_loc: Vec<f64>,
    pub committee_cls: Vec<Vec<f64>>,
}

impl InstancePrediction {
    pub fn main_row(&self, j: usize) -> &[f64] {
        &self.main_cls[j * self.num_labels..(j + 1) * self.num_labels]
    }

    pub fn committee_row(&self, member: usize, j: usize) -> &[f64] {
        &self.committee_cls[member][j * self.num_labels..(j + 1) * self.num_labels]
    }

    pub fn loc_row(&self, j: usize) -> [f64; 4] {
        let r = &self.main_loc[j * 4..j * 4 + 4];
        [r[0], r[1], r[2], r[3]]
    }

    /// Main classifier's background probability for anchor `j`.
    pub fn background_score(&self, j: usize) -> f64 {
        self.main_cls[j * self.num_labels + self.num_labels - 1]
    }
}

/// Backbone outputs needed by the heads.
#[derive(Debug, Clone)]
pub struct LevelFeatures {
    pub h: usize,
    pub w: usize,
    /// im2col of the level feature map under the head geometry.
    pub cols: Vec<f32>,
}

#[derive(Debug, Clone)]
pub struct Features {
    pub levels: Vec<LevelFeatures>,
    /// Global average pool of the last backbone block.
    pub pooled: Vec<f32>,
}

/// Identifies which optimizer group a parameter tensor belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ParamGroup {
    Backbone,
    MainHead,
    Committee,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Detector {
    pub config: DetectorConfig,
    pub anchors: AnchorGrid,
    pub backbone: Vec<Conv2d>,
    pub main_cls: Conv2d,
    pub main_loc: Conv2d,
    pub committee: Vec<Conv2d>,
    level_blocks: Vec<usize>,
}

impl Detector {
    pub fn new(config: &DetectorConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut backbone = Vec::with_capacity(config.backbone_channels.len());
        let mut c_in = config.in_channels;
        for &c_out in &config.backbone_channels {
            backbone.push(Conv2d::new(&mut rng, c_in, c_out, 3, 2, 1));
            c_in = c_out;
        }
        let level_blocks = config.level_blocks()?;
        let feat = config.backbone_channels[level_blocks[0]];
        let a = config.anchors.anchors_per_cell();
        let k = config.num_labels();
        let std = config.head_init_std;

        let bg_bias = (config.num_classes as f64 * (1.0 - config.prior_prob) / config.prior_prob).ln();
        let classifier = |rng: &mut ChaCha8Rng| {
            let mut conv = Conv2d::with_std(rng, feat, a * k, 3, 1, 1, std);
            for slot in 0..a {
                for label in 0..k {
                    let prior = if label == k - 1 { bg_bias } else { 0.0 };
                    conv.bias[slot * k + label] = (prior + rng.random_range(-std..std)) as f32;
                }
            }
            conv
        };
        let main_cls = classifier(&mut rng);
        let committee = (0..config.committee_size).map(|_| classifier(&mut rng)).collect();
        let main_loc = Conv2d::with_std(&mut rng, feat, a * 4, 3, 1, 1, std);

        Ok(Self {
            config: config.clone(),
            anchors: build_anchors(config.image_size, &config.anchors)?,
            backbone,
            main_cls,
            main_loc,
            committee,
            level_blocks,
        })
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn num_params(&self) -> usize {
        self.convs().iter().map(|c| c.num_params()).sum()
    }

    /// All layers in a fixed order: backbone, main classifier, main
    /// regressor, committee members.
    pub fn convs(&self) -> Vec<&Conv2d> {
        let mut v: Vec<&Conv2d> = self.backbone.iter().collect();
        v.push(&self.main_cls);
        v.push(&self.main_loc);
        v.extend(self.committee.iter());
        v
    }

    pub fn convs_mut(&mut self) -> Vec<&mut Conv2d> {
        let mut v: Vec<&mut Conv2d> = self.backbone.iter_mut().collect();
        v.push(&mut self.main_cls);
        v.push(&mut self.main_loc);
        v.extend(self.committee.iter_mut());
        v
    }

    pub fn layer_names(&self) -> Vec<String> {
        let mut names: Vec<String> = (0..self.backbone.len()).map(|i| format!("backbone.{i}")).collect();
        names.push("main_cls".into());
        names.push("main_loc".into());
        names.extend((0..self.committee.len()).map(|i| format!("committee.{i}")));
        names
    }

    pub fn layer_groups(&self) -> Vec<ParamGroup> {
        let mut g = vec![ParamGroup::Backbone; self.backbone.len()];
        g.extend([ParamGroup::MainHead, ParamGroup::MainHead]);
        g.extend(std::iter::repeat_n(ParamGroup::Committee, self.committee.len()));
        g
    }

    fn check_image(&self, image: &[f32]) -> Result<()> {
        let expected = self.config.in_channels * self.config.image_size * self.config.image_size;
        if image.len() != expected {
            return Err(Error::Config(format!(
                "image has {} values, detector expects {expected}",
                image.len()
            )));
        }
        Ok(())
    }

    /// Backbone forward; keeps every block's im2col and activation when
    /// `cache` is given.
    pub(crate) fn backbone_forward(&self, image: &[f32], mut cache: Option<&mut BackboneCache>) -> Vec<(Vec<f32>, usize, usize)> {
        let mut outputs = Vec::with_capacity(self.backbone.len());
        let (mut h, mut w) = (self.config.image_size, self.config.image_size);
        let shift = self.config.input_offset as f32;
        let mut input: Vec<f32> = image.iter().map(|v| v - shift).collect();
        for conv in &self.backbone {
            let mut cols = Vec::new();
            conv.im2col(&input, h, w, &mut cols);
            let (ho, wo) = conv.output_size(h, w);
            let mut out = Vec::new();
            conv.forward_cols(&cols, ho * wo, &mut out);
            relu_in_place(&mut out);
            if let Some(c) = cache.as_deref_mut() {
                c.cols.push(cols);
                c.dims.push((h, w));
            }
            outputs.push((out.clone(), ho, wo));
            input = out;
            h = ho;
            w = wo;
        }
        outputs
    }

    pub fn features(&self, image: &[f32]) -> Result<Features> {
        self.check_image(image)?;
        let outputs = self.backbone_forward(image, None);
        Ok(self.features_from_outputs(&outputs))
    }

    pub(crate) fn features_from_outputs(&self, outputs: &[(Vec<f32>, usize, usize)]) -> Features {
        let levels = self
            .level_blocks
            .iter()
            .map(|&b| {
                let (act, h, w) = &outputs[b];
                let mut cols = Vec::new();
                self.main_cls.im2col(act, *h, *w, &mut cols);
                LevelFeatures { h: *h, w: *w, cols }
            })
            .collect();
        let (last, h, w) = outputs.last().expect("at least one backbone block");
        let n = h * w;
        let pooled = last.chunks_exact(n).map(|c| c.iter().sum::<f32>() / n as f32).collect();
        Features { levels, pooled }
    }

    /// Raw head outputs per level, `out_channels x (h*w)`.
    pub(crate) fn head_outputs(&self, head: &Conv2d, features: &Features) -> Vec<Vec<f32>> {
        features
            .levels
            .iter()
            .map(|l| {
                let mut out = Vec::new();
                head.forward_cols(&l.cols, l.h * l.w, &mut out);
                out
            })
            .collect()
    }

    /// Gathers per-level conv outputs into anchor-major rows of `width`
    /// values each.
    pub(crate) fn gather(&self, outputs: &[Vec<f32>], width: usize) -> Vec<f64> {
        let a = self.anchors.anchors_per_cell;
        let mut rows = vec![0.0f64; self.num_anchors() * width];
        for (level, out) in outputs.iter().enumerate() {
            let range = self.anchors.level_range(level);
            let hw = range.len() / a;
            for pos in 0..hw {
                for slot in 0..a {
                    let j = range.start + pos * a + slot;
                    for c in 0..width {
                        rows[j * width + c] = out[(slot * width + c) * hw + pos] as f64;
                    }
                }
            }
        }
        rows
    }

    /// Inverse of [`Detector::gather`]: scatters anchor-major gradients into
    /// per-level conv output layout.
    pub(crate) fn scatter(&self, rows: &[f64], width: usize) -> Vec<Vec<f32>> {
        let a = self.anchors.anchors_per_cell;
        (0..self.anchors.levels.len())
            .map(|level| {
                let range = self.anchors.level_range(level);
                let hw = range.len() / a;
                let mut out = vec![0.0f32; a * width * hw];
                for pos in 0..hw {
                    for slot in 0..a {
                        let j = range.start + pos * a + slot;
                        for c in 0..width {
                            out[(slot * width + c) * hw + pos] = rows[j * width + c] as f32;
                        }
                    }
                }
                out
            })
            .collect()
    }

    pub(crate) fn classify(&self, head: &Conv2d, features: &Features) -> Vec<f64> {
        let k = self.config.num_labels();
        let mut probs = self.gather(&self.head_outputs(head, features), k);
        for row in probs.chunks_exact_mut(k) {
            softmax_in_place(row);
        }
        probs
    }

    pub fn committee_probs(&self, features: &Features) -> Vec<Vec<f64>> {
        self.committee.iter().map(|h| self.classify(h, features)).collect()
    }

    pub fn heads(&self, features: &Features) -> InstancePrediction {
        InstancePrediction {
            num_anchors: self.num_anchors(),
            num_labels: self.config.num_labels(),
            main_cls: self.classify(&self.main_cls, features),
            main_loc: self.gather(&self.head_outputs(&self.main_loc, features), 4),
            committee_cls: self.committee_probs(features),
        }
    }

    pub fn forward(&self, image: &[f32]) -> Result<InstancePrediction> {
        let features = self.features(image)?;
        Ok(self.heads(&features))
    }

    /// Global-average-pooled final backbone feature map.
    pub fn embedding(&self, image: &[f32]) -> Result<Vec<f32>> {
        Ok(self.features(image)?.pooled)
    }

    pub fn predict(&self, image: &[f32], score_threshold: f64, nms_iou: f64) -> Result<Vec<Detection>> {
        let pred = self.forward(image)?;
        Ok(decode_detections(&pred, &self.anchors, score_threshold, nms_iou, MAX_DETECTIONS))
    }
}

#[derive(Debug, Default)]
pub(crate) struct BackboneCache {
    pub cols: Vec<Vec<f32>>,
    pub dims: Vec<(usize, usize)>,
}

pub const MAX_DETECTIONS: usize = 100;

/// Turns per-anchor outputs into detections: every (anchor, class) pair with
/// probability strictly above `score_threshold` becomes a candidate box,
/// candidates go through class-wise greedy NMS, and the `max_detections`
/// most confident survivors are returned.
pub fn decode_detections(
    pred: &InstancePrediction,
    anchors: &AnchorGrid,
    score_threshold: f64,
    nms_iou: f64,
    max_detections: usize,
) -> Vec<Detection> {
    let num_classes = pred.num_labels - 1;
    let side = anchors.image_size as f64;
    let mut per_class: Vec<Vec<(f64, usize, BBox)>> = vec![Vec::new(); num_classes];
    for j in 0..pred.num_anchors {
        let row = pred.main_row(j);
        let mut decoded: Option<BBox> = None;
        for (c, &score) in row[..num_classes].iter().enumerate() {
            if score > score_threshold {
                let b = *decoded.get_or_insert_with(|| decode(&pred.loc_row(j), &anchors.anchors[j]).clip(side, side));
                if b.is_valid() {
                    per_class[c].push((score, j, b));
                }
            }
        }
    }

    let mut out = Vec::new();
    for (class_id, mut cands) in per_class.into_iter().enumerate() {
        cands.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let boxes: Vec<BBox> = cands.iter().map(|c| c.2).collect();
        let order: Vec<usize> = (0..cands.len()).collect();
        for i in nms(&boxes, &order, nms_iou) {
            out.push(Detection {
                bbox: cands[i].2,
                class_id,
                confidence: cands[i].0,
            });
        }
    }
    out.sort_by(|a, b| b.confidence.total_cmp(&a.confidence).then(a.class_id.cmp(&b.class_id)));
    out.truncate(max_detections);
    out
}
