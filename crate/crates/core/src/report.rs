//! Aggregation of cycle records across seeds and strategies.
//!
//! Everything here is a pure function of the records it is given.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::active_loop::{read_cycle_records, CycleRecord, RunDir};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SeedStatus {
    Pending,
    Running,
    Completed,
    Failed,
}

/// `manifest.json` of a strategy directory holding one run per seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub run_id: String,
    /// Hash of the configuration before the seed is substituted.
    pub config_hash: String,
    pub strategy: String,
    pub seeds: Vec<u64>,
    pub status: BTreeMap<u64, SeedStatus>,
    /// Seed run directories, relative to the manifest.
    pub paths: BTreeMap<u64, String>,
}

impl RunManifest {
    pub const FILE: &'static str = "manifest.json";

    pub fn load(dir: &Path) -> Result<Self> {
        let path = dir.join(Self::FILE);
        serde_json::from_str(&fs::read_to_string(&path)?).map_err(|e| Error::format(path, e.to_string()))
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        let tmp = dir.join("manifest.json.tmp");
        fs::write(&tmp, serde_json::to_string_pretty(self)?)?;
        fs::rename(tmp, dir.join(Self::FILE))?;
        Ok(())
    }

    pub fn seed_dir_name(seed: u64) -> String {
        format!("seed_{seed}")
    }
}

/// One seed's records, labeled with the strategy they belong to.
#[derive(Debug, Clone, PartialEq)]
pub struct SeedRun {
    pub strategy: String,
    pub seed: u64,
    pub records: Vec<CycleRecord>,
}

/// Reads either a strategy directory (with `manifest.json`) or a single seed
/// run directory (with `cycle_records.jsonl`).
pub fn load_runs(dir: &Path) -> Result<Vec<SeedRun>> {
    if dir.join(RunManifest::FILE).exists() {
        let m = RunManifest::load(dir)?;
        let mut runs = Vec::new();
        for (seed, rel) in &m.paths {
            let path = dir.join(rel).join(RunDir::RECORDS);
            if path.exists() {
                runs.push(SeedRun {
                    strategy: m.strategy.clone(),
                    seed: *seed,
                    records: read_cycle_records(&path)?,
                });
            }
        }
        return Ok(runs);
    }
    let path = dir.join(RunDir::RECORDS);
    if path.exists() {
        let name = |p: &Path| p.file_name().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
        let seed_name = name(dir);
        let seed = seed_name.strip_prefix("seed_").and_then(|s| s.parse().ok()).unwrap_or(0);
        let strategy = dir.parent().map(name).unwrap_or_else(|| seed_name.clone());
        return Ok(vec![SeedRun {
            strategy,
            seed,
            records: read_cycle_records(&path)?,
        }]);
    }
    Err(Error::format(
        dir,
        format!("neither {} nor {} found", RunManifest::FILE, RunDir::RECORDS),
    ))
}

/// Mean and sample standard deviation; the deviation is 0 for one value.
pub fn mean_std(values: &[f64]) -> (f64, f64) {
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclePoint {
    pub cycle: usize,
    pub num_seeds: usize,
    pub labeled_count_mean: f64,
    pub map_mean: f64,
    pub map_std: f64,
    pub tp_mean: f64,
    /// Mean over seeds of the true positives selected in cycles `1..=cycle`.
    pub tp_cumulative_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: String,
    pub seeds: Vec<u64>,
    pub points: Vec<CyclePoint>,
    /// Cycles some seeds are missing, as `(cycle, seeds present)`.
    pub gaps: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: String,
    pub final_cycle: usize,
    pub final_map_mean: f64,
    pub final_map_std: f64,
    pub tp_cumulative_mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub strategies: Vec<StrategySummary>,
    /// Committee with and without background weighting, when both ran.
    pub ablation: Vec<AblationRow>,
}

pub fn summarize_strategy(strategy: &str, runs: &[&SeedRun]) -> StrategySummary {
    let max_cycles = runs.iter().map(|r| r.records.len()).max().unwrap_or(0);
    let mut points = Vec::new();
    let mut gaps = Vec::new();
    for c in 0..max_cycles {
        let at: Vec<(&SeedRun, &CycleRecord)> = runs
            .iter()
            .filter_map(|r| r.records.get(c).map(|rec| (*r, rec)))
            .collect();
        if at.len() < runs.len() {
            gaps.push((c, at.len()));
        }
        let maps: Vec<f64> = at.iter().map(|(_, r)| r.map_50).collect();
        let (map_mean, map_std) = mean_std(&maps);
        let n = at.len() as f64;
        let cumulative = at
            .iter()
            .map(|(run, _)| {
                run.records[..=c]
                    .iter()
                    .map(|r| r.true_positive_instances_selected as f64)
                    .sum::<f64>()
            })
            .sum::<f64>()
            / n;
        points.push(CyclePoint {
            cycle: c,
            num_seeds: at.len(),
            labeled_count_mean: at.iter().map(|(_, r)| r.labeled_count as f64).sum::<f64>() / n,
            map_mean,
            map_std,
            tp_mean: at.iter().map(|(_, r)| r.true_positive_instances_selected as f64).sum::<f64>() / n,
            tp_cumulative_mean: cumulative,
        });
    }
    let mut seeds: Vec<u64> = runs.iter().map(|r| r.seed).collect();
    seeds.sort_unstable();
    StrategySummary {
        strategy: strategy.to_string(),
        seeds,
        points,
        gaps,
    }
}

pub fn summarize(runs: &[SeedRun]) -> Result<Summary> {
    if runs.is_empty() {
        return Err(Error::Config("no runs to report".into()));
    }
    let mut by_strategy: BTreeMap<&str, Vec<&SeedRun>> = BTreeMap::new();
    for r in runs {
        by_strategy.entry(&r.strategy).or_default().push(r);
    }
    let strategies: Vec<StrategySummary> = by_strategy
        .iter()
        .map(|(name, rs)| summarize_strategy(name, rs))
        .collect();
    let ablation = ["committee-nofpil", "committee"]
        .iter()
        .filter_map(|v| strategies.iter().find(|s| s.strategy == *v))
        .filter_map(|s| {
            s.points.last().map(|p| AblationRow {
                variant: s.strategy.clone(),
                final_cycle: p.cycle,
                final_map_mean: p.map_mean,
                final_map_std: p.map_std,
                tp_cumulative_mean: p.tp_cumulative_mean,
            })
        })
        .collect::<Vec<_>>();
    Ok(Summary {
        strategies,
        ablation: if ablation.len() == 2 { ablation } else { Vec::new() },
    })
}

/// Markdown tables: learning curve, selected true positives, ablation.
pub fn render_markdown(summary: &Summary) -> String {
    let mut out = String::new();
    out.push_str("## mAP@0.5 by cycle (mean ± std over seeds)\n\n| cycle |");
    for s in &summary.strategies {
        out.push_str(&format!(" {} |", s.strategy));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(summary.strategies.len()));
    out.push('\n');
    let cycles = summary.strategies.iter().map(|s| s.points.len()).max().unwrap_or(0);
    for c in 0..cycles {
        out.push_str(&format!("| {c} |"));
        for s in &summary.strategies {
            match s.points.get(c) {
                Some(p) => out.push_str(&format!(" {:.4} ± {:.4} (n={}) |", p.map_mean, p.map_std, p.num_seeds)),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }

    out.push_str("\n## True-positive instances selected (mean per cycle / cumulative)\n\n| cycle |");
    for s in &summary.strategies {
        out.push_str(&format!(" {} |", s.strategy));
    }
    out.push_str("\n|---|");
    out.push_str(&"---|".repeat(summary.strategies.len()));
    out.push('\n');
    for c in 1..cycles {
        out.push_str(&format!("| {c} |"));
        for s in &summary.strategies {
            match s.points.get(c) {
                Some(p) => out.push_str(&format!(" {:.1} / {:.1} |", p.tp_mean, p.tp_cumulative_mean)),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }

    if !summary.ablation.is_empty() {
        out.push_str("\n## Ablation: background weighting\n\n| variant | final cycle | final mAP | cumulative TP |\n|---|---|---|---|\n");
        for a in &summary.ablation {
            out.push_str(&format!(
                "| {} | {} | {:.4} ± {:.4} | {:.1} |\n",
                a.variant, a.final_cycle, a.final_map_mean, a.final_map_std, a.tp_cumulative_mean
            ));
        }
    }
    for s in &summary.strategies {
        for (c, n) in &s.gaps {
            out.push_str(&format!("\nnote: {} cycle {c} has {n} of {} seeds\n", s.strategy, s.seeds.len()));
        }
    }
    out
}

/// Every directory holding a manifest or cycle records, in sorted order.
pub fn discover_run_dirs(root: &Path) -> Result<Vec<PathBuf>> {
    if root.join(RunManifest::FILE).exists() || root.join(RunDir::RECORDS).exists() {
        return Ok(vec![root.to_path_buf()]);
    }
    let mut out = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(root)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_dir())
        .collect();
    entries.sort();
    for p in entries {
        if p.join(RunManifest::FILE).exists() || p.join(RunDir::RECORDS).exists() {
            out.push(p);
        }
    }
    Ok(out)
}
