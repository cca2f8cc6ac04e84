//! The active-learning loop: train, evaluate, select, promote, repeat.
//!
//! Cycle `p` trains a model on pool `p`, evaluates it on the test split and,
//! unless it is the last cycle, selects the images that form pool `p + 1`.
//! Record `p` therefore lists the ids that were added to reach pool `p`
//! (none for cycle 0).
//!
//! Training is two-phase. The labeled phase minimizes `L_main + L_com` over
//! every parameter. The unlabeled phase maximizes the committee discrepancy
//! with only the committee heads in the optimizer, on backbone features
//! computed once at the start of the phase.

use std::collections::BTreeMap;
use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::acquisition::{score_records, select, write_score_records};
use crate::config::ExperimentConfig;
use crate::data::{init_pool, splitmix64, Dataset, PoolState};
use crate::detector::anchors::{match_targets, InstanceTargets};
use crate::detector::checkpoint::Checkpoint;
use crate::detector::train::{FrozenInstance, Gradients, Sgd, SupervisedTerms};
use crate::detector::{Detector, DetectorConfig, ParamGroup};
use crate::error::{Error, Result};
use crate::eval::{evaluate_map, EvalResult, ImageId};
use crate::losses::assemble_total;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Labeled,
    Unlabeled,
}

/// One optimizer step of the loss log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossRecord {
    pub cycle: usize,
    pub phase: Phase,
    pub epoch: usize,
    pub step: usize,
    pub l_main: f64,
    pub l_com: f64,
    pub d_com: f64,
    pub total: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CycleRecord {
    pub cycle_index: usize,
    pub labeled_count: usize,
    pub map_50: f64,
    pub per_class_ap: BTreeMap<usize, f64>,
    /// Ids promoted into the pool this cycle trained on.
    pub selected_ids: Vec<ImageId>,
    /// Positive anchors inside `selected_ids`.
    pub true_positive_instances_selected: usize,
    pub wall_clock_seconds: f64,
    pub loss_curve_ref: Option<String>,
}

impl CycleRecord {
    /// Equality on everything except timing and file paths.
    pub fn same_outcome(&self, other: &Self) -> bool {
        self.cycle_index == other.cycle_index
            && self.labeled_count == other.labeled_count
            && self.map_50 == other.map_50
            && self.per_class_ap == other.per_class_ap
            && self.selected_ids == other.selected_ids
            && self.true_positive_instances_selected == other.true_positive_instances_selected
    }
}

#[derive(Debug, Clone, Copy)]
#[repr(u64)]
enum SeedPurpose {
    Pool = 1,
    Init = 2,
    Shuffle = 3,
    Select = 4,
}

fn derive_seed(seed: u64, cycle: usize, purpose: SeedPurpose) -> u64 {
    splitmix64(splitmix64(seed ^ 0xA11C_E5ED) ^ splitmix64((cycle as u64) << 8 | purpose as u64))
}

/// Matching targets for every image, indexed by image id.
pub fn build_targets(dataset: &Dataset, detector: &DetectorConfig) -> Result<Vec<InstanceTargets>> {
    let grid = crate::detector::anchors::build_anchors(detector.image_size, &detector.anchors)?;
    Ok(dataset
        .samples
        .iter()
        .map(|s| match_targets(&grid, &s.annotations, detector.num_classes, &detector.anchors))
        .collect())
}

/// Positive anchors summed over `selected_ids`.
pub fn count_true_positive_instances(selected_ids: &[ImageId], targets: &[InstanceTargets]) -> usize {
    selected_ids.iter().map(|&id| targets[id as usize].num_positive()).sum()
}

fn divergence(cycle: usize, step: usize, detail: impl Into<String>) -> Error {
    Error::Divergence {
        cycle,
        step,
        detail: detail.into(),
    }
}

/// One pass over `ids` in shuffled mini-batches, all parameter groups.
#[allow(clippy::too_many_arguments)]
pub fn train_labeled_epoch(
    det: &mut Detector,
    opt: &mut Sgd,
    ids: &[ImageId],
    dataset: &Dataset,
    targets: &[InstanceTargets],
    cfg: &ExperimentConfig,
    rng: &mut ChaCha8Rng,
    cycle: usize,
    epoch: usize,
    log: &mut Vec<LossRecord>,
) -> Result<()> {
    if ids.is_empty() {
        return Err(Error::EmptyLabeledPool);
    }
    let mut order = ids.to_vec();
    order.shuffle(rng);
    let mut grads = Gradients::zeros(det);
    for batch in order.chunks(cfg.training.batch_size) {
        grads.fill_zero();
        let scale = 1.0 / batch.len() as f64;
        let (mut l_main, mut l_com) = (0.0, 0.0);
        for &id in batch {
            let v = det.accumulate_supervised(
                &dataset.sample(id).image,
                &targets[id as usize],
                &cfg.loss,
                scale,
                SupervisedTerms::BOTH,
                &mut grads,
            )?;
            l_main += v.l_main * scale;
            l_com += v.l_com * scale;
        }
        let b = assemble_total(l_main, l_com, 0.0, cfg.loss.lambda, cfg.loss.gamma_fpil);
        let step = log.len();
        if !b.is_finite() || !grads.is_finite() {
            return Err(divergence(cycle, step, format!("labeled phase: l_main={l_main}, l_com={l_com}")));
        }
        if let Some(max) = cfg.training.grad_clip_norm {
            grads.clip_norm(max);
        }
        opt.step(det, &grads, &[ParamGroup::Backbone, ParamGroup::MainHead, ParamGroup::Committee]);
        log.push(LossRecord {
            cycle,
            phase: Phase::Labeled,
            epoch,
            step,
            l_main: b.l_main,
            l_com: b.l_com,
            d_com: 0.0,
            total: b.total,
        });
    }
    Ok(())
}

/// Backbone features of `ids` under the current weights.
pub fn freeze_images(det: &Detector, dataset: &Dataset, ids: &[ImageId]) -> Result<Vec<FrozenInstance>> {
    ids.iter().map(|&id| det.freeze(&dataset.sample(id).image)).collect()
}

/// One pass over the frozen unlabeled images, maximizing the (optionally
/// weighted) image discrepancy with the committee heads only.
#[allow(clippy::too_many_arguments)]
pub fn train_unlabeled_epoch(
    det: &mut Detector,
    opt: &mut Sgd,
    frozen: &[FrozenInstance],
    cfg: &ExperimentConfig,
    rng: &mut ChaCha8Rng,
    cycle: usize,
    epoch: usize,
    log: &mut Vec<LossRecord>,
) -> Result<()> {
    let mut order: Vec<usize> = (0..frozen.len()).collect();
    order.shuffle(rng);
    let gamma = cfg.fpil.then_some(cfg.loss.gamma_fpil);
    let lambda = cfg.loss.lambda;
    let mut grads = Gradients::zeros(det);
    for batch in order.chunks(cfg.training.batch_size) {
        grads.fill_zero();
        let scale = 1.0 / batch.len() as f64;
        let mut d_com = 0.0;
        for &i in batch {
            // minimizing -lambda * D
            d_com += det.accumulate_discrepancy(&frozen[i], gamma, -lambda * scale, &mut grads)? * scale;
        }
        let b = assemble_total(0.0, 0.0, d_com, lambda, cfg.loss.gamma_fpil);
        let step = log.len();
        if !b.is_finite() || !grads.is_finite() {
            return Err(divergence(cycle, step, format!("unlabeled phase: d_com={d_com}")));
        }
        opt.step(det, &grads, &[ParamGroup::Committee]);
        log.push(LossRecord {
            cycle,
            phase: Phase::Unlabeled,
            epoch,
            step,
            l_main: 0.0,
            l_com: 0.0,
            d_com,
            total: b.total,
        });
    }
    Ok(())
}

pub fn labeled_optimizer(det: &Detector, cfg: &ExperimentConfig) -> Sgd {
    let t = &cfg.training;
    Sgd::new(det, t.learning_rate, t.momentum, t.weight_decay)
}

pub fn unlabeled_optimizer(det: &Detector, cfg: &ExperimentConfig) -> Sgd {
    let t = &cfg.training;
    Sgd::new(det, t.unlabeled_learning_rate.unwrap_or(t.learning_rate), t.momentum, t.weight_decay)
}

/// Trains `det` on the pool for one cycle and returns the loss log.
/// `train_committee = false` skips the unlabeled phase.
pub fn train_cycle(
    det: &mut Detector,
    pool: &PoolState,
    dataset: &Dataset,
    targets: &[InstanceTargets],
    cfg: &ExperimentConfig,
    cycle: usize,
    train_committee: bool,
) -> Result<Vec<LossRecord>> {
    let labeled = pool.labeled();
    if labeled.is_empty() {
        return Err(Error::EmptyLabeledPool);
    }
    let unlabeled = pool.unlabeled();
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, cycle, SeedPurpose::Shuffle));
    let mut log = Vec::new();
    let t = &cfg.training;
    let unlabeled_epochs = if train_committee && !unlabeled.is_empty() {
        t.epochs_unlabeled
    } else {
        0
    };

    let mut opt = labeled_optimizer(det, cfg);
    if t.interleaved {
        // unlabeled passes ride along with the last labeled epochs
        let total = t.epochs_labeled.max(unlabeled_epochs);
        let first_unlabeled = total - unlabeled_epochs;
        let mut opt_u = unlabeled_optimizer(det, cfg);
        for epoch in 0..total {
            if epoch < t.epochs_labeled {
                train_labeled_epoch(det, &mut opt, &labeled, dataset, targets, cfg, &mut rng, cycle, epoch, &mut log)?;
            }
            if epoch >= first_unlabeled {
                let frozen = freeze_images(det, dataset, &unlabeled)?;
                train_unlabeled_epoch(det, &mut opt_u, &frozen, cfg, &mut rng, cycle, epoch, &mut log)?;
            }
        }
        return Ok(log);
    }

    for epoch in 0..t.epochs_labeled {
        train_labeled_epoch(det, &mut opt, &labeled, dataset, targets, cfg, &mut rng, cycle, epoch, &mut log)?;
    }
    if unlabeled_epochs > 0 {
        let frozen = freeze_images(det, dataset, &unlabeled)?;
        let mut opt_u = unlabeled_optimizer(det, cfg);
        for epoch in 0..unlabeled_epochs {
            train_unlabeled_epoch(det, &mut opt_u, &frozen, cfg, &mut rng, cycle, epoch, &mut log)?;
        }
    }
    Ok(log)
}

/// mAP of the main detector over `ids`.
pub fn evaluate_detector(det: &Detector, dataset: &Dataset, ids: &[ImageId], cfg: &ExperimentConfig) -> Result<EvalResult> {
    let mut predictions = Vec::new();
    for &id in ids {
        for d in det.predict(&dataset.sample(id).image, cfg.eval.score_threshold, cfg.eval.nms_iou)? {
            predictions.push((id, d));
        }
    }
    evaluate_map(&predictions, &dataset.ground_truth(ids), cfg.eval.iou_threshold)
}

/// Errors unless `dataset` is the one `cfg` describes.
pub fn check_dataset(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<()> {
    let d = &cfg.data;
    if dataset.seed != d.seed || dataset.config != d.generator || dataset.samples.len() != d.num_images {
        return Err(Error::Config(format!(
            "dataset (seed {}, {} images) does not match the configuration (seed {}, {} images)",
            dataset.seed,
            dataset.samples.len(),
            d.seed,
            d.num_images
        )));
    }
    if dataset.train_ids.iter().any(|id| dataset.test_ids.binary_search(id).is_ok()) {
        return Err(Error::Config("train and test splits overlap".into()));
    }
    Ok(())
}

pub fn initial_pool(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<PoolState> {
    init_pool(
        &dataset.train_ids,
        cfg.pool.initial_fraction,
        cfg.pool.budget_per_cycle as i64,
        derive_seed(cfg.seed, 0, SeedPurpose::Pool),
    )
}

pub fn initial_model(cfg: &ExperimentConfig, cycle: usize) -> Result<Detector> {
    Detector::new(&cfg.detector, derive_seed(cfg.seed, cycle, SeedPurpose::Init))
}

/// Files of one run directory.
#[derive(Debug, Clone)]
pub struct RunDir {
    pub root: PathBuf,
}

impl RunDir {
    pub const RECORDS: &'static str = "cycle_records.jsonl";

    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn config_path(&self) -> PathBuf {
        self.root.join("config.toml")
    }

    pub fn hash_path(&self) -> PathBuf {
        self.root.join("config_hash.txt")
    }

    pub fn records_path(&self) -> PathBuf {
        self.root.join(Self::RECORDS)
    }

    pub fn checkpoint_path(&self, cycle: usize) -> PathBuf {
        self.root.join("checkpoints").join(format!("cycle_{cycle:03}.ckpt"))
    }

    pub fn loss_log_rel(cycle: usize) -> String {
        format!("loss_logs/cycle_{cycle:03}.jsonl")
    }

    pub fn score_path(&self, cycle: usize) -> PathBuf {
        self.root.join("scores").join(format!("cycle_{cycle:03}.jsonl"))
    }

    fn create(&self) -> Result<()> {
        for sub in ["checkpoints", "loss_logs", "scores"] {
            fs::create_dir_all(self.root.join(sub))?;
        }
        Ok(())
    }
}

pub fn read_cycle_records(path: &Path) -> Result<Vec<CycleRecord>> {
    let file = fs::File::open(path)?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(
            serde_json::from_str(&line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?,
        );
    }
    Ok(out)
}

/// Rewrites the whole file through a temporary sibling, so readers only ever
/// see complete records.
fn write_records_atomic(path: &Path, records: &[CycleRecord]) -> Result<()> {
    let tmp = path.with_extension("jsonl.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        for r in records {
            serde_json::to_writer(&mut f, r)?;
            f.write_all(b"\n")?;
        }
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = std::io::BufWriter::new(fs::File::create(path)?);
    for it in items {
        serde_json::to_writer(&mut out, it)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Persist everything under this directory.
    pub dir: Option<PathBuf>,
    /// Continue from the records and checkpoint already in `dir`.
    pub resume: bool,
    /// Return after this cycle is recorded, as if the process had stopped.
    pub stop_after: Option<usize>,
}

/// In-memory run, nothing written to disk.
pub fn run_experiment(cfg: &ExperimentConfig, dataset: &Dataset) -> Result<Vec<CycleRecord>> {
    run_experiment_with(cfg, dataset, &RunOptions::default())
}

pub fn run_experiment_with(cfg: &ExperimentConfig, dataset: &Dataset, opts: &RunOptions) -> Result<Vec<CycleRecord>> {
    cfg.validate()?;
    check_dataset(cfg, dataset)?;
    let hash = cfg.hash();
    let dir = opts.dir.as_ref().map(RunDir::new);

    let mut records: Vec<CycleRecord> = Vec::new();
    if let Some(d) = &dir {
        d.create()?;
        if d.hash_path().exists() {
            let found = fs::read_to_string(d.hash_path())?.trim().to_string();
            if found != hash {
                return Err(Error::ConfigMismatch { expected: found, found: hash });
            }
        }
        if d.records_path().exists() {
            records = read_cycle_records(&d.records_path())?;
            if !records.is_empty() && !opts.resume {
                return Err(Error::Config(format!(
                    "{} already holds records; resume or use a fresh directory",
                    d.root.display()
                )));
            }
        }
        fs::write(d.config_path(), cfg.to_toml_string())?;
        fs::write(d.hash_path(), format!("{hash}\n"))?;
    }
    for (i, r) in records.iter().enumerate() {
        if r.cycle_index != i {
            return Err(Error::format(dir.as_ref().unwrap().records_path(), "cycle indices are not consecutive"));
        }
    }

    let targets = build_targets(dataset, &cfg.detector)?;
    let strategy = cfg.selection.strategy;
    let train_committee = strategy.uses_committee() || cfg.training.always_train_committee;
    let scoring = cfg.scoring();
    let last_cycle = cfg.pool.num_cycles;

    // replay promotions of the recorded cycles
    let mut pool = initial_pool(cfg, dataset)?;
    for r in records.iter().skip(1) {
        pool = pool.promote(&r.selected_ids)?;
    }
    let mut prev_model: Option<Detector> = None;
    let mut pending: Vec<ImageId> = Vec::new();
    let mut start = records.len();
    if let Some(last) = records.last() {
        let p = last.cycle_index;
        if p >= last_cycle || pool.unlabeled_ids.is_empty() {
            return Ok(records);
        }
        let d = dir.as_ref().expect("records only come from a run directory");
        let ckpt = Checkpoint::load(&d.checkpoint_path(p))?;
        if ckpt.config_hash != hash {
            return Err(Error::ConfigMismatch { expected: ckpt.config_hash, found: hash });
        }
        let model = ckpt.to_detector(&cfg.detector)?;
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, p, SeedPurpose::Select));
        let sel = select(strategy, &model, &pool, dataset, cfg.pool.budget_per_cycle, &scoring, &mut rng)?;
        write_score_records(&d.score_path(p), &score_records(p, &sel))?;
        pool = pool.promote(&sel.selected_ids)?;
        pending = sel.selected_ids;
        prev_model = Some(model);
        start = p + 1;
    }

    for p in start..=last_cycle {
        let started = Instant::now();
        let mut model = match (&prev_model, cfg.training.warm_start) {
            (Some(m), true) => m.clone(),
            _ => initial_model(cfg, p)?,
        };
        let log = train_cycle(&mut model, &pool, dataset, &targets, cfg, p, train_committee)?;
        let eval = evaluate_detector(&model, dataset, &dataset.test_ids, cfg)?;
        let mut loss_curve_ref = None;
        if let Some(d) = &dir {
            Checkpoint::from_detector(&model, &hash, p as u64).save(&d.checkpoint_path(p))?;
            let rel = RunDir::loss_log_rel(p);
            write_jsonl(&d.root.join(&rel), &log)?;
            loss_curve_ref = Some(rel);
        }
        records.push(CycleRecord {
            cycle_index: p,
            labeled_count: pool.labeled_ids.len(),
            map_50: eval.map_50,
            per_class_ap: eval.per_class_ap,
            true_positive_instances_selected: count_true_positive_instances(&pending, &targets),
            selected_ids: std::mem::take(&mut pending),
            wall_clock_seconds: started.elapsed().as_secs_f64(),
            loss_curve_ref,
        });
        if let Some(d) = &dir {
            write_records_atomic(&d.records_path(), &records)?;
        }
        if opts.stop_after == Some(p) || p == last_cycle || pool.unlabeled_ids.is_empty() {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, p, SeedPurpose::Select));
        let sel = select(strategy, &model, &pool, dataset, cfg.pool.budget_per_cycle, &scoring, &mut rng)?;
        if let Some(d) = &dir {
            write_score_records(&d.score_path(p), &score_records(p, &sel))?;
        }
        pool = pool.promote(&sel.selected_ids)?;
        pending = sel.selected_ids;
        prev_model = Some(model);
    }
    Ok(records)
}
