use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::config::Variant;
use super::eval::{ObjectCount, SweepResult};
use super::plot::{BandPoint, LinePlot, Series};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Metric {
    FAri,
    Ari,
    L2,
}

impl Metric {
    pub const ALL: [Metric; 3] = [Metric::FAri, Metric::Ari, Metric::L2];

    pub fn name(self) -> &'static str {
        match self {
            Metric::FAri => "f_ari",
            Metric::Ari => "ari",
            Metric::L2 => "l2",
        }
    }

    fn label(self) -> &'static str {
        match self {
            Metric::FAri => "F-ARI",
            Metric::Ari => "ARI",
            Metric::L2 => "reconstruction MSE",
        }
    }

    pub fn of(self, r: &SweepResult) -> f64 {
        match self {
            Metric::FAri => r.f_ari,
            Metric::Ari => r.ari,
            Metric::L2 => r.l2,
        }
    }
}

/// Median by sorting; the mean of the two middle values for even counts.
pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let mid = v.len() / 2;
    Some(if v.len() % 2 == 1 {
        v[mid]
    } else {
        (v[mid - 1] + v[mid]) / 2.0
    })
}

pub fn write_results_csv(path: &Path, results: &[SweepResult]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in results {
        w.serialize(r)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn read_results_csv(path: &Path) -> Result<Vec<SweepResult>> {
    let mut r = csv::Reader::from_path(path)?;
    Ok(r.deserialize().collect::<std::result::Result<_, _>>()?)
}

/// A run judged non-object-centric: its pooled F-ARI at the training slot
/// count is below the threshold.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FailedRun {
    pub variant: Variant,
    pub seed: u64,
    #[serde(rename = "O")]
    pub train_objects: usize,
    #[serde(rename = "K")]
    pub train_slots: usize,
    pub f_ari: f64,
}

type RunKey = (Variant, usize, usize, u64);

fn run_key(r: &SweepResult) -> RunKey {
    (r.variant, r.train_objects, r.train_slots, r.seed)
}

pub fn failed_runs(results: &[SweepResult], threshold: f64) -> Vec<FailedRun> {
    let mut out: Vec<FailedRun> = results
        .iter()
        .filter(|r| {
            r.eval_slots == r.train_slots
                && r.eval_objects == ObjectCount::All
                && r.f_ari < threshold
        })
        .map(|r| FailedRun {
            variant: r.variant,
            seed: r.seed,
            train_objects: r.train_objects,
            train_slots: r.train_slots,
            f_ari: r.f_ari,
        })
        .collect();
    out.sort_by_key(|f| (f.variant, f.train_objects, f.train_slots, f.seed));
    out.dedup_by_key(|f| (f.variant, f.train_objects, f.train_slots, f.seed));

    let judged: BTreeSet<RunKey> = results
        .iter()
        .filter(|r| r.eval_slots == r.train_slots && r.eval_objects == ObjectCount::All)
        .map(run_key)
        .collect();
    let unjudged: BTreeSet<RunKey> = results
        .iter()
        .map(run_key)
        .filter(|k| !judged.contains(k))
        .collect();
    for (variant, o, k, seed) in unjudged {
        log::warn!(
            "{variant} (O={o}, K={k}) seed {seed} has no K'={k} record; failure check skipped"
        );
    }
    out
}

/// Results of runs not listed in `failed`.
pub fn retained<'a>(results: &'a [SweepResult], failed: &[FailedRun]) -> Vec<&'a SweepResult> {
    results
        .iter()
        .filter(|r| {
            !failed
                .iter()
                .any(|f| (f.variant, f.train_objects, f.train_slots, f.seed) == run_key(r))
        })
        .collect()
}

/// Median and min–max across seeds of `metric` per `(variant, O, K)` and x.
fn band_series(
    rows: &[&SweepResult],
    metric: Metric,
    x_of: impl Fn(&SweepResult) -> usize,
) -> Vec<Series> {
    let mut groups: BTreeMap<(Variant, usize, usize), BTreeMap<usize, Vec<f64>>> = BTreeMap::new();
    for r in rows {
        groups
            .entry((r.variant, r.train_objects, r.train_slots))
            .or_default()
            .entry(x_of(r))
            .or_default()
            .push(metric.of(r));
    }
    groups
        .into_iter()
        .map(|((variant, o, k), by_x)| Series {
            label: format!("{variant} ({o},{k})"),
            points: by_x
                .into_iter()
                .map(|(x, values)| BandPoint {
                    x: x as f64,
                    y: median(&values).expect("non-empty group"),
                    low: values.iter().copied().fold(f64::INFINITY, f64::min),
                    high: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                })
                .collect(),
        })
        .collect()
}

/// Metric against evaluation slot count over pooled records.
pub fn slot_sweep_plot(rows: &[&SweepResult], metric: Metric) -> LinePlot {
    let pooled: Vec<&SweepResult> = rows
        .iter()
        .copied()
        .filter(|r| r.eval_objects == ObjectCount::All)
        .collect();
    LinePlot {
        title: format!("{} vs. slots at evaluation", metric.label()),
        x_label: "slots at evaluation".into(),
        y_label: metric.label().into(),
        series: band_series(&pooled, metric, |r| r.eval_slots),
    }
}

/// Metric against object count at one evaluation slot count; `None` when
/// no per-count records exist for it.
pub fn object_sweep_plot(
    rows: &[&SweepResult],
    metric: Metric,
    eval_slots: usize,
) -> Option<LinePlot> {
    let cells: Vec<&SweepResult> = rows
        .iter()
        .copied()
        .filter(|r| r.eval_slots == eval_slots && matches!(r.eval_objects, ObjectCount::Exactly(_)))
        .collect();
    if cells.is_empty() {
        return None;
    }
    Some(LinePlot {
        title: format!("{} vs. objects ({eval_slots} slots)", metric.label()),
        x_label: "objects in scene".into(),
        y_label: metric.label().into(),
        series: band_series(&cells, metric, |r| match r.eval_objects {
            ObjectCount::Exactly(n) => n,
            ObjectCount::All => unreachable!("filtered above"),
        }),
    })
}

#[derive(Clone, Debug)]
pub struct ReportFiles {
    pub csv: PathBuf,
    pub failed: PathBuf,
    pub plots: Vec<PathBuf>,
    pub failed_runs: Vec<FailedRun>,
}

/// Writes `results.csv` (every record), `failed_runs.csv` and SVG plots of
/// each metric against slot count and against object count. Failed runs
/// stay in `results.csv` but are left out of the plots.
pub fn emit_report(
    results: &[SweepResult],
    out_dir: &Path,
    failure_threshold: f64,
) -> Result<ReportFiles> {
    if results.is_empty() {
        return Err(Error::contract("emit_report", "no results to report"));
    }
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let csv_path = out_dir.join("results.csv");
    write_results_csv(&csv_path, results)?;

    let failed = failed_runs(results, failure_threshold);
    let failed_path = out_dir.join("failed_runs.csv");
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(&failed_path)?;
    w.write_record(["variant", "seed", "O", "K", "f_ari"])?;
    for f in &failed {
        w.serialize(f)?;
    }
    w.flush().map_err(|e| Error::io(&failed_path, e))?;
    for f in &failed {
        log::warn!(
            "excluding {} (O={}, K={}) seed {} from plots: F-ARI {:.3} below {failure_threshold}",
            f.variant,
            f.train_objects,
            f.train_slots,
            f.seed,
            f.f_ari
        );
    }

    let rows = retained(results, &failed);
    let mut slot_counts: Vec<usize> = rows.iter().map(|r| r.eval_slots).collect();
    slot_counts.sort_unstable();
    slot_counts.dedup();
    let mut plots = Vec::new();
    let mut write = |name: String, plot: LinePlot| -> Result<()> {
        let path = out_dir.join(name);
        std::fs::write(&path, plot.to_svg()).map_err(|e| Error::io(&path, e))?;
        plots.push(path);
        Ok(())
    };
    if !rows.is_empty() {
        for metric in Metric::ALL {
            write(
                format!("{}_vs_slots.svg", metric.name()),
                slot_sweep_plot(&rows, metric),
            )?;
            for &k in &slot_counts {
                if let Some(plot) = object_sweep_plot(&rows, metric, k) {
                    write(format!("{}_vs_objects_k{k}.svg", metric.name()), plot)?;
                }
            }
        }
    }
    Ok(ReportFiles {
        csv: csv_path,
        failed: failed_path,
        plots,
        failed_runs: failed,
    })
}

/// Directional comparison of median pooled F-ARI between a small and a
/// large evaluation slot count.
#[derive(Clone, Debug, PartialEq)]
pub struct TrendCheck {
    pub low_slots: usize,
    pub high_slots: usize,
    /// Median F-ARI at `(low_slots, high_slots)` per variant.
    pub medians: BTreeMap<Variant, (f64, f64)>,
    /// Baseline drop strictly exceeds the weighted-sum drop.
    pub baseline_drops_more: bool,
    /// Weighted-sum and batch medians at `high_slots` are at least the
    /// baseline median there.
    pub scaled_variants_hold_up: bool,
}

impl TrendCheck {
    pub fn passed(&self) -> bool {
        self.baseline_drops_more && self.scaled_variants_hold_up
    }

    pub fn drop(&self, v: Variant) -> f64 {
        let (lo, hi) = self.medians[&v];
        lo - hi
    }
}

/// Evaluates the slot-count trend over runs that pass the failed-run policy.
pub fn trend_check(
    results: &[SweepResult],
    failure_threshold: f64,
    low_slots: usize,
    high_slots: usize,
) -> Result<TrendCheck> {
    let failed = failed_runs(results, failure_threshold);
    let rows = retained(results, &failed);
    let mut medians = BTreeMap::new();
    for v in [Variant::Baseline, Variant::WeightedSum, Variant::Batch] {
        let at = |k: usize| {
            let values: Vec<f64> = rows
                .iter()
                .filter(|r| {
                    r.variant == v && r.eval_slots == k && r.eval_objects == ObjectCount::All
                })
                .map(|r| r.f_ari)
                .collect();
            median(&values).ok_or_else(|| {
                Error::contract(
                    "trend_check",
                    format!("no retained {v} records at {k} slots"),
                )
            })
        };
        medians.insert(v, (at(low_slots)?, at(high_slots)?));
    }
    let drop = |v| medians[&v].0 - medians[&v].1;
    let baseline_high = medians[&Variant::Baseline].1;
    Ok(TrendCheck {
        low_slots,
        high_slots,
        baseline_drops_more: drop(Variant::Baseline) > drop(Variant::WeightedSum),
        scaled_variants_hold_up: medians[&Variant::WeightedSum].1 >= baseline_high
            && medians[&Variant::Batch].1 >= baseline_high,
        medians,
    })
}
