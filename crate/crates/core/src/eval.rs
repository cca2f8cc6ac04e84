//! PASCAL-VOC style mean average precision.
//!
//! Average precision is the area under the all-point interpolated
//! precision/recall curve. Predictions are matched greedily in descending
//! confidence against the highest-IoU ground-truth box of the same class in
//! the same image; a ground-truth box can absorb at most one prediction.

use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou, BBox};

pub type ImageId = u32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: BBox,
    pub class_id: usize,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub image_id: ImageId,
    pub class_id: usize,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    pub per_class_ap: BTreeMap<usize, f64>,
    pub map_50: f64,
}

/// Area under the all-point interpolated precision/recall curve.
///
/// `hits` is the TP/FP outcome of each prediction in ranking order and
/// `num_gt` the number of ground-truth boxes of the class.
pub fn average_precision(hits: &[bool], num_gt: usize) -> f64 {
    if num_gt == 0 || hits.is_empty() {
        return 0.0;
    }
    let mut recall = Vec::with_capacity(hits.len());
    let mut precision = Vec::with_capacity(hits.len());
    let mut tp = 0usize;
    for (rank, &hit) in hits.iter().enumerate() {
        if hit {
            tp += 1;
        }
        recall.push(tp as f64 / num_gt as f64);
        precision.push(tp as f64 / (rank + 1) as f64);
    }
    // precision envelope, right to left
    for i in (0..precision.len().saturating_sub(1)).rev() {
        if precision[i + 1] > precision[i] {
            precision[i] = precision[i + 1];
        }
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for (r, p) in recall.iter().zip(&precision) {
        if *r > prev_recall {
            ap += (r - prev_recall) * p;
            prev_recall = *r;
        }
    }
    ap
}

/// Mean average precision over the classes that have ground truth.
pub fn evaluate_map(
    predictions: &[(ImageId, Detection)],
    ground_truth: &[GroundTruth],
    iou_threshold: f64,
) -> Result<EvalResult> {
    if ground_truth.is_empty() {
        return Err(Error::EmptyGroundTruth);
    }

    let mut gt_by_class: BTreeMap<usize, HashMap<ImageId, Vec<BBox>>> = BTreeMap::new();
    for gt in ground_truth {
        gt_by_class
            .entry(gt.class_id)
            .or_default()
            .entry(gt.image_id)
            .or_default()
            .push(gt.bbox);
    }

    let mut per_class_ap = BTreeMap::new();
    for (&class_id, gt_images) in &gt_by_class {
        let num_gt: usize = gt_images.values().map(Vec::len).sum();

        let mut ranked: Vec<(usize, ImageId, &Detection)> = predictions
            .iter()
            .enumerate()
            .filter(|(_, (_, d))| d.class_id == class_id)
            .map(|(order, (img, d))| (order, *img, d))
            .collect();
        ranked.sort_by(|a, b| {
            b.2.confidence
                .total_cmp(&a.2.confidence)
                .then(a.1.cmp(&b.1))
                .then(a.0.cmp(&b.0))
        });

        let mut taken: HashMap<ImageId, Vec<bool>> = gt_images
            .iter()
            .map(|(img, boxes)| (*img, vec![false; boxes.len()]))
            .collect();
        let hits: Vec<bool> = ranked
            .iter()
            .map(|(_, img, det)| {
                let Some(boxes) = gt_images.get(img) else {
                    return false;
                };
                let mut best = None;
                let mut best_iou = f64::NEG_INFINITY;
                for (k, gt) in boxes.iter().enumerate() {
                    let v = iou(&det.bbox, gt);
                    if v > best_iou {
                        best_iou = v;
                        best = Some(k);
                    }
                }
                match best {
                    Some(k) if best_iou >= iou_threshold => {
                        let flags = taken.get_mut(img).expect("flags exist for every gt image");
                        if flags[k] {
                            false
                        } else {
                            flags[k] = true;
                            true
                        }
                    }
                    _ => false,
                }
            })
            .collect();

        per_class_ap.insert(class_id, average_precision(&hits, num_gt));
    }

    let map_50 = per_class_ap.values().sum::<f64>() / per_class_ap.len() as f64;
    Ok(EvalResult {
        per_class_ap,
        map_50,
    })
}

/// One line of an audit dump: ground truth when `confidence` is absent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxRecord {
    pub image_id: ImageId,
    pub class_id: usize,
    pub bbox: [f64; 4],
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub confidence: Option<f64>,
}

impl From<&GroundTruth> for BoxRecord {
    fn from(gt: &GroundTruth) -> Self {
        let b = gt.bbox;
        Self {
            image_id: gt.image_id,
            class_id: gt.class_id,
            bbox: [b.x_min, b.y_min, b.x_max, b.y_max],
            confidence: None,
        }
    }
}

impl From<&(ImageId, Detection)> for BoxRecord {
    fn from((image_id, det): &(ImageId, Detection)) -> Self {
        let b = det.bbox;
        Self {
            image_id: *image_id,
            class_id: det.class_id,
            bbox: [b.x_min, b.y_min, b.x_max, b.y_max],
            confidence: Some(det.confidence),
        }
    }
}

pub fn write_box_records<'a, W: Write>(
    mut out: W,
    records: impl IntoIterator<Item = &'a BoxRecord>,
) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_box_records<R: BufRead>(input: R) -> Result<Vec<BoxRecord>> {
    let mut out = Vec::new();
    for line in input.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line)?);
    }
    Ok(out)
}
