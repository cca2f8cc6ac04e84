//! Image scoring and batch selection.
//!
//! Ranking is always by score descending with ties broken by the smaller
//! image id.

use std::cmp::Ordering;
use std::fmt;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PoolState};
use crate::detector::{Detector, InstancePrediction};
use crate::error::{Error, Result};
use crate::eval::ImageId;
use crate::losses::{fpil_weight, instance_discrepancies, EPS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Strategy {
    Committee,
    Random,
    Entropy,
    #[serde(rename = "coreset")]
    CoreSet,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [Strategy::Committee, Strategy::Random, Strategy::Entropy, Strategy::CoreSet];

    pub fn name(self) -> &'static str {
        match self {
            Strategy::Committee => "committee",
            Strategy::Random => "random",
            Strategy::Entropy => "entropy",
            Strategy::CoreSet => "coreset",
        }
    }

    /// Whether the strategy reads the committee heads.
    pub fn uses_committee(self) -> bool {
        self == Strategy::Committee
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|st| st.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown strategy {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageScore {
    pub image_id: ImageId,
    pub score: f64,
    /// `(anchor_index, instance_score)`, descending.
    pub top_instances: Vec<(usize, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionResult {
    pub strategy_name: String,
    pub selected_ids: Vec<ImageId>,
    pub all_scores: Vec<ImageScore>,
}

/// Knobs for the committee score.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScoringConfig {
    pub z: usize,
    /// Weight instance discrepancies by `(1 - w_b)^gamma` at selection time.
    pub weighted_gamma: Option<f64>,
}

impl Default for ScoringConfig {
    fn default() -> Self {
        Self {
            z: 50,
            weighted_gamma: None,
        }
    }
}

fn descending(a: &(usize, f64), b: &(usize, f64)) -> Ordering {
    b.1.total_cmp(&a.1).then(a.0.cmp(&b.0))
}

/// Mean of the `min(z, T)` largest instance scores.
pub fn score_from_instances(image_id: ImageId, instance_scores: &[f64], z: usize) -> ImageScore {
    let mut ranked: Vec<(usize, f64)> = instance_scores.iter().copied().enumerate().collect();
    ranked.sort_by(descending);
    ranked.truncate(z.min(ranked.len()));
    let score = if ranked.is_empty() {
        0.0
    } else {
        ranked.iter().map(|r| r.1).sum::<f64>() / ranked.len() as f64
    };
    ImageScore {
        image_id,
        score,
        top_instances: ranked,
    }
}

pub fn score_image_committee(
    image_id: ImageId,
    pred: &InstancePrediction,
    scoring: &ScoringConfig,
) -> Result<ImageScore> {
    if scoring.z == 0 {
        return Err(Error::Config("Z must be at least 1".into()));
    }
    let mut d = instance_discrepancies(pred)?;
    if let Some(gamma) = scoring.weighted_gamma {
        for (j, v) in d.iter_mut().enumerate() {
            *v *= fpil_weight(pred.background_score(j), gamma);
        }
    }
    Ok(score_from_instances(image_id, &d, scoring.z))
}

/// Shannon entropy of a probability row, in nats.
pub fn entropy(row: &[f64]) -> f64 {
    row.iter()
        .map(|&p| {
            let p = p.clamp(EPS, 1.0);
            if p <= EPS {
                0.0
            } else {
                -p * p.ln()
            }
        })
        .sum()
}

/// Sum of main-classifier entropies over all anchors.
pub fn score_image_entropy(image_id: ImageId, pred: &InstancePrediction) -> ImageScore {
    let h: Vec<f64> = (0..pred.num_anchors).map(|j| entropy(pred.main_row(j))).collect();
    let mut s = score_from_instances(image_id, &h, h.len());
    s.score = h.iter().sum();
    s
}

/// The `budget` best-scoring ids (score descending, then id ascending).
pub fn select_top(scores: &[ImageScore], budget: usize) -> Vec<ImageId> {
    let mut order: Vec<&ImageScore> = scores.iter().collect();
    order.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.image_id.cmp(&b.image_id)));
    order.into_iter().take(budget).map(|s| s.image_id).collect()
}

fn sq_dist(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (*x as f64 - *y as f64).powi(2)).sum()
}

/// Greedy k-center. The score stored for each unlabeled image is its
/// distance to the labeled set before any pick.
pub fn select_core_set(
    labeled: &[(ImageId, Vec<f32>)],
    unlabeled: &[(ImageId, Vec<f32>)],
    budget: usize,
) -> SelectionResult {
    let mut min_d: Vec<f64> = unlabeled
        .iter()
        .map(|(_, u)| labeled.iter().map(|(_, l)| sq_dist(u, l)).fold(f64::INFINITY, f64::min))
        .collect();
    let all_scores = unlabeled
        .iter()
        .zip(&min_d)
        .map(|((id, _), d)| ImageScore {
            image_id: *id,
            score: if d.is_finite() { d.sqrt() } else { f64::MAX },
            top_instances: Vec::new(),
        })
        .collect();
    let mut taken = vec![false; unlabeled.len()];
    let mut selected = Vec::new();
    for _ in 0..budget.min(unlabeled.len()) {
        let mut best: Option<usize> = None;
        for i in 0..unlabeled.len() {
            if taken[i] {
                continue;
            }
            best = match best {
                None => Some(i),
                Some(b) => {
                    let better = match min_d[i].total_cmp(&min_d[b]) {
                        Ordering::Greater => true,
                        Ordering::Equal => unlabeled[i].0 < unlabeled[b].0,
                        Ordering::Less => false,
                    };
                    Some(if better { i } else { b })
                }
            };
        }
        let b = best.expect("budget bounded by pool size");
        taken[b] = true;
        selected.push(unlabeled[b].0);
        for i in 0..unlabeled.len() {
            if !taken[i] {
                min_d[i] = min_d[i].min(sq_dist(&unlabeled[i].1, &unlabeled[b].1));
            }
        }
    }
    SelectionResult {
        strategy_name: Strategy::CoreSet.name().into(),
        selected_ids: selected,
        all_scores,
    }
}

/// Scores the unlabeled pool (ascending id order) and picks `budget` images.
pub fn select<R: Rng>(
    strategy: Strategy,
    model: &Detector,
    pool: &PoolState,
    dataset: &Dataset,
    budget: usize,
    scoring: &ScoringConfig,
    rng: &mut R,
) -> Result<SelectionResult> {
    if pool.unlabeled_ids.is_empty() {
        return Err(Error::ExhaustedPool);
    }
    let unlabeled = pool.unlabeled();
    let budget = budget.min(unlabeled.len());
    let name = strategy.name().to_string();
    match strategy {
        Strategy::Random => Ok(SelectionResult {
            strategy_name: name,
            selected_ids: unlabeled.choose_multiple(rng, budget).copied().collect(),
            all_scores: Vec::new(),
        }),
        Strategy::Committee | Strategy::Entropy => {
            let mut all_scores = Vec::with_capacity(unlabeled.len());
            for &id in &unlabeled {
                let pred = model.forward(&dataset.sample(id).image)?;
                all_scores.push(match strategy {
                    Strategy::Committee => score_image_committee(id, &pred, scoring)?,
                    _ => score_image_entropy(id, &pred),
                });
            }
            Ok(SelectionResult {
                strategy_name: name,
                selected_ids: select_top(&all_scores, budget),
                all_scores,
            })
        }
        Strategy::CoreSet => {
            let embed = |ids: Vec<ImageId>| -> Result<Vec<(ImageId, Vec<f32>)>> {
                ids.into_iter()
                    .map(|id| Ok((id, model.embedding(&dataset.sample(id).image)?)))
                    .collect()
            };
            Ok(select_core_set(&embed(pool.labeled())?, &embed(unlabeled)?, budget))
        }
    }
}

/// One line of a per-cycle score dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRecord {
    pub cycle: usize,
    pub strategy: String,
    pub image_id: ImageId,
    pub score: f64,
    pub top_instance_scores: Vec<f64>,
}

/// Dump records sorted by score descending, ties by image id.
pub fn score_records(cycle: usize, result: &SelectionResult) -> Vec<ScoreRecord> {
    let mut records: Vec<ScoreRecord> = result
        .all_scores
        .iter()
        .map(|s| ScoreRecord {
            cycle,
            strategy: result.strategy_name.clone(),
            image_id: s.image_id,
            score: s.score,
            top_instance_scores: s.top_instances.iter().take(5).map(|t| t.1).collect(),
        })
        .collect();
    records.sort_by(|a, b| b.score.total_cmp(&a.score).then(a.image_id.cmp(&b.image_id)));
    records
}

pub fn write_score_records(path: &Path, records: &[ScoreRecord]) -> Result<()> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut out, r)?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{init_pool, GeneratorConfig};
    use crate::detector::DetectorConfig;
    use crate::losses::image_discrepancy;
    use proptest::prelude::{any, prop, prop_assert, prop_assert_eq, proptest};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn prediction(committee: Vec<Vec<f64>>, main: Vec<f64>, num_anchors: usize, num_labels: usize) -> InstancePrediction {
        InstancePrediction {
            num_anchors,
            num_labels,
            main_cls: main,
            main_loc: vec![0.0; num_anchors * 4],
            committee_cls: committee,
        }
    }

    fn random_prediction(rng: &mut ChaCha8Rng, t: usize, k: usize, n: usize) -> InstancePrediction {
        let row = |rng: &mut ChaCha8Rng| -> Vec<f64> {
            let raw: Vec<f64> = (0..k).map(|_| rng.random::<f64>() + 1e-3).collect();
            let s: f64 = raw.iter().sum();
            raw.into_iter().map(|v| v / s).collect()
        };
        let main: Vec<f64> = (0..t).flat_map(|_| row(rng)).collect();
        let committee = (0..n).map(|_| (0..t).flat_map(|_| row(rng)).collect()).collect();
        prediction(committee, main, t, k)
    }

    #[test]
    fn agreeing_committee_scores_zero() {
        let member = vec![0.2, 0.3, 0.5, 0.6, 0.1, 0.3];
        let pred = prediction(vec![member.clone(); 3], member, 2, 3);
        let s = score_image_committee(0, &pred, &ScoringConfig::default()).unwrap();
        assert_eq!(s.score, 0.0);
    }

    #[test]
    fn top_z_mean() {
        let s = score_from_instances(4, &[0.3, 0.1, 0.5], 2);
        assert!((s.score - 0.4).abs() < 1e-15);
        assert_eq!(s.top_instances, vec![(2, 0.5), (0, 0.3)]);
    }

    #[test]
    fn z_covering_all_anchors_equals_image_discrepancy() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..20 {
            let pred = random_prediction(&mut rng, 17, 4, 3);
            let cfg = ScoringConfig { z: 17, weighted_gamma: None };
            let s = score_image_committee(0, &pred, &cfg).unwrap();
            let d = image_discrepancy(&pred, false, 1.0).unwrap();
            assert!((s.score - d).abs() < 1e-12);
            let big = ScoringConfig { z: 10_000, weighted_gamma: None };
            assert_eq!(score_image_committee(0, &pred, &big).unwrap().score, s.score);
        }
    }

    #[test]
    fn zero_z_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let pred = random_prediction(&mut rng, 3, 3, 2);
        assert!(score_image_committee(0, &pred, &ScoringConfig { z: 0, weighted_gamma: None }).is_err());
    }

    #[test]
    fn entropy_extremes() {
        let one_hot = vec![1.0, 0.0, 0.0, 0.0, 0.0, 1.0];
        let pred = prediction(vec![one_hot.clone(); 2], one_hot, 2, 3);
        assert_eq!(score_image_entropy(0, &pred).score, 0.0);

        let uniform = vec![0.25; 3 * 4];
        let pred = prediction(vec![uniform.clone(); 2], uniform, 3, 4);
        let s = score_image_entropy(0, &pred);
        assert!((s.score - 3.0 * 4f64.ln()).abs() < 1e-12);
        assert_eq!(s.top_instances.len(), 3);
    }

    #[test]
    fn entropy_mixed_rows() {
        let main = vec![0.5, 0.5, 0.0, 0.7, 0.2, 0.1];
        let pred = prediction(vec![main.clone(); 2], main, 2, 3);
        let h0 = -2.0 * 0.5 * 0.5f64.ln();
        let h1 = -(0.7 * 0.7f64.ln() + 0.2 * 0.2f64.ln() + 0.1 * 0.1f64.ln());
        assert!((score_image_entropy(0, &pred).score - (h0 + h1)).abs() < 1e-12);
    }

    #[test]
    fn select_top_breaks_ties_by_id() {
        let mk = |id, score| ImageScore { image_id: id, score, top_instances: vec![] };
        let scores = [mk(9, 0.5), mk(3, 0.5), mk(5, 0.9), mk(1, 0.1)];
        assert_eq!(select_top(&scores, 2), vec![5, 3]);
        assert_eq!(select_top(&scores, 10), vec![5, 3, 9, 1]);
    }

    #[test]
    fn core_set_trivial_cases() {
        let labeled = vec![(0, vec![0.0f32, 0.0])];
        let unlabeled = vec![(1, vec![0.0f32, 0.0]), (2, vec![5.0, 5.0])];
        assert!(select_core_set(&labeled, &unlabeled, 0).selected_ids.is_empty());
        assert_eq!(select_core_set(&labeled, &unlabeled, 1).selected_ids, vec![2]);
        assert_eq!(select_core_set(&labeled, &unlabeled, 9).selected_ids.len(), 2);
    }

    /// Exhaustive re-evaluation of the max-min criterion at every step.
    fn greedy_oracle(labeled: &[[f64; 2]], unlabeled: &[[f64; 2]], budget: usize) -> Vec<usize> {
        let mut centers: Vec<[f64; 2]> = labeled.to_vec();
        let mut picked = Vec::new();
        for _ in 0..budget {
            let mut best = (f64::NEG_INFINITY, usize::MAX);
            for (i, u) in unlabeled.iter().enumerate() {
                if picked.contains(&i) {
                    continue;
                }
                let d = centers
                    .iter()
                    .map(|c| ((u[0] - c[0]).powi(2) + (u[1] - c[1]).powi(2)).sqrt())
                    .fold(f64::INFINITY, f64::min);
                if d > best.0 {
                    best = (d, i);
                }
            }
            picked.push(best.1);
            centers.push(unlabeled[best.1]);
        }
        picked
    }

    #[test]
    fn core_set_matches_exhaustive_greedy() {
        let mut rng = ChaCha8Rng::seed_from_u64(10);
        for _ in 0..50 {
            let pts: Vec<[f64; 2]> = (0..10)
                .map(|_| [rng.random_range(0.0..10.0), rng.random_range(0.0..10.0)])
                .collect();
            let (lab, unl) = pts.split_at(2);
            let to_f = |v: &[[f64; 2]], offset: u32| -> Vec<(ImageId, Vec<f32>)> {
                v.iter()
                    .enumerate()
                    .map(|(i, p)| (offset + i as u32, vec![p[0] as f32, p[1] as f32]))
                    .collect()
            };
            // oracle on the same f32-rounded points
            let round = |v: &[[f64; 2]]| -> Vec<[f64; 2]> {
                v.iter().map(|p| [p[0] as f32 as f64, p[1] as f32 as f64]).collect()
            };
            let got = select_core_set(&to_f(lab, 0), &to_f(unl, 100), 3).selected_ids;
            let want: Vec<ImageId> = greedy_oracle(&round(lab), &round(unl), 3)
                .into_iter()
                .map(|i| 100 + i as u32)
                .collect();
            assert_eq!(got, want);
        }
    }

    #[test]
    fn high_disagreement_image_wins() {
        let agreed = vec![0.1, 0.1, 0.8];
        let calm = prediction(vec![agreed.clone(); 3], agreed.clone(), 1, 3);
        let loud = prediction(
            vec![vec![1.0, 0.0, 0.0], vec![0.0, 1.0, 0.0], vec![0.0, 0.0, 1.0]],
            agreed,
            1,
            3,
        );
        let cfg = ScoringConfig::default();
        let scores = [
            score_image_committee(0, &calm, &cfg).unwrap(),
            score_image_committee(1, &loud, &cfg).unwrap(),
        ];
        assert_eq!(select_top(&scores, 1), vec![1]);
    }

    #[test]
    fn select_exhaustion_and_errors() {
        let gen = GeneratorConfig::default();
        let ds = Dataset::generate(1, 30, &gen, 0.2).unwrap();
        let det = Detector::new(&DetectorConfig::default(), 0).unwrap();
        let pool = init_pool(&ds.train_ids, 0.5, 20, 0).unwrap();
        let n = pool.unlabeled_ids.len();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for st in Strategy::ALL {
            let r = select(st, &det, &pool, &ds, n, &ScoringConfig::default(), &mut rng).unwrap();
            let mut got = r.selected_ids.clone();
            got.sort_unstable();
            assert_eq!(got, pool.unlabeled(), "{st}");
        }
        let drained = pool.promote(&pool.unlabeled()).unwrap();
        assert!(matches!(
            select(Strategy::Random, &det, &drained, &ds, 1, &ScoringConfig::default(), &mut rng),
            Err(Error::ExhaustedPool)
        ));
    }

    #[test]
    fn strategy_names_round_trip() {
        for st in Strategy::ALL {
            assert_eq!(st.name().parse::<Strategy>().unwrap(), st);
        }
        assert!("bogus".parse::<Strategy>().is_err());
    }

    proptest! {
        #[test]
        fn anchor_permutation_keeps_score(scores in prop::collection::vec(0.0f64..4.0, 1..40), z in 1usize..50, seed in any::<u64>()) {
            use rand::seq::SliceRandom;
            let mut shuffled = scores.clone();
            shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
            let a = score_from_instances(0, &scores, z).score;
            let b = score_from_instances(0, &shuffled, z).score;
            prop_assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0));
        }

        #[test]
        fn uniform_rescaling_keeps_selection(
            images in prop::collection::vec(prop::collection::vec(0.0f64..4.0, 5..20), 2..30),
            z in 1usize..10,
            budget in 0usize..10,
        ) {
            let base: Vec<ImageScore> = images.iter().enumerate().map(|(i, s)| score_from_instances(i as u32, s, z)).collect();
            let scaled: Vec<ImageScore> = images
                .iter()
                .enumerate()
                .map(|(i, s)| score_from_instances(i as u32, &s.iter().map(|v| v * 7.3).collect::<Vec<_>>(), z))
                .collect();
            prop_assert_eq!(select_top(&base, budget), select_top(&scaled, budget));
        }
    }
}
