//! Evaluation protocol and report emission.
//!
//! Open-set scoring is deliberately strict: a sample from a held-out
//! category counts as wrong until that category has been incorporated into
//! the classifier, even when the detector correctly flags it as unknown.
//! Before incorporation there is no label the system could answer with, so
//! the initial unknown accuracy is exactly zero and every later gain comes
//! from categories the session actually learned.
//!
//! `evaluate_open` also enforces evaluation hygiene: test samples must not
//! overlap each other or any id that was used for training or calibration.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::batch::{detect_batch, predict_batch};
use crate::classifier::ClassifierState;
use crate::dataset::{fmt_float, CategoryId, Dataset, OpenSplit};
use crate::error::{Error, Result};
use crate::openworld::{replay_session, run_open_world, IterationScript, SessionConfig};
use crate::thresholds::{TripletThresholds, Verdict};

// ---------------------------------------------------------------------------
// Reports
// ---------------------------------------------------------------------------

/// Whether a per-category row counts toward the known or unknown aggregate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scope {
    Known,
    Unknown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub scope: Scope,
    pub correct: u64,
    pub total: u64,
    pub accuracy: f64,
}

/// Counts and accuracies for one evaluation. The integer counts are the
/// ground truth; every accuracy is derived from them, and
/// `overall_accuracy` is exactly `(known_correct + unknown_correct) /
/// (known_total + unknown_total)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub known_correct: u64,
    pub known_total: u64,
    pub unknown_correct: u64,
    pub unknown_total: u64,
    pub known_accuracy: f64,
    pub unknown_accuracy: f64,
    pub overall_accuracy: f64,
    /// Known categories keyed by label, held-out categories by truth id.
    pub per_category: BTreeMap<CategoryId, CategoryScore>,
    /// Classifier size when the evaluation ran.
    pub n_known_at_eval: usize,
    /// Distinct held-out categories in play: still in the test pool or
    /// already incorporated.
    pub openness_unknown_count: usize,
    /// Expected categories that had no test samples left.
    pub missing_categories: Vec<CategoryId>,
}

fn ratio(correct: u64, total: u64) -> f64 {
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}

// ---------------------------------------------------------------------------
// Open and closed evaluation
// ---------------------------------------------------------------------------

/// Scores an open-set snapshot.
///
/// Known-test samples are correct when the cascade returns their own label.
/// Unknown-test samples are correct only when their category was already
/// incorporated (`incorporated` maps pool truth id to assigned classifier
/// label) and the cascade returns that assigned label. `used_ids` is the
/// set of sample ids seen by training or calibration; any overlap with the
/// test sets is an error rather than a silently optimistic number.
pub fn evaluate_open(
    state: &ClassifierState,
    thresholds: &TripletThresholds,
    known_test: &Dataset,
    unknown_test: &Dataset,
    incorporated: &BTreeMap<CategoryId, CategoryId>,
    used_ids: &BTreeSet<u64>,
) -> Result<MetricsReport> {
    if thresholds.len() != state.n_categories() {
        return Err(Error::Shape(format!(
            "thresholds cover {} categories, classifier has {}",
            thresholds.len(),
            state.n_categories()
        )));
    }
    let known_ids = known_test.ids();
    let unknown_ids = unknown_test.ids();
    if !known_ids.is_disjoint(&unknown_ids) {
        return Err(Error::Protocol(
            "known and unknown test sets share sample ids".into(),
        ));
    }
    for id in known_ids.union(&unknown_ids) {
        if used_ids.contains(id) {
            return Err(Error::Protocol(format!(
                "test sample {id} was used for training or calibration"
            )));
        }
    }

    let mut per_category: BTreeMap<CategoryId, CategoryScore> = BTreeMap::new();
    let mut tally = |key: CategoryId, scope: Scope, correct: bool| -> Result<()> {
        let entry = per_category.entry(key).or_insert(CategoryScore {
            scope,
            correct: 0,
            total: 0,
            accuracy: 0.0,
        });
        if entry.scope != scope {
            return Err(Error::Protocol(format!(
                "category {key} appears in both known and unknown test sets"
            )));
        }
        entry.total += 1;
        entry.correct += u64::from(correct);
        Ok(())
    };

    let mut known_correct = 0u64;
    let outcomes = detect_batch(state, thresholds, known_test.samples())?;
    for (s, out) in known_test.samples().iter().zip(&outcomes) {
        let correct = out.verdict == Verdict::Known(s.true_label);
        known_correct += u64::from(correct);
        tally(s.true_label, Scope::Known, correct)?;
    }

    let mut unknown_correct = 0u64;
    let outcomes = detect_batch(state, thresholds, unknown_test.samples())?;
    for (s, out) in unknown_test.samples().iter().zip(&outcomes) {
        let correct = match incorporated.get(&s.true_label) {
            Some(&assigned) => out.verdict == Verdict::Known(assigned),
            None => false,
        };
        unknown_correct += u64::from(correct);
        tally(s.true_label, Scope::Unknown, correct)?;
    }

    for score in per_category.values_mut() {
        score.accuracy = ratio(score.correct, score.total);
    }

    let known_total = known_test.len() as u64;
    let unknown_total = unknown_test.len() as u64;

    // Expected but absent: known labels with no test rows (incorporated
    // labels are tested from the unknown side, keyed by truth id) and
    // incorporated truths whose pool residue is empty.
    let assigned: BTreeSet<CategoryId> = incorporated.values().copied().collect();
    let mut missing = Vec::new();
    for col in 0..state.n_categories() {
        let label = CategoryId::from_column(col);
        if !assigned.contains(&label) && !per_category.contains_key(&label) {
            missing.push(label);
        }
    }
    for truth in incorporated.keys() {
        if !per_category.contains_key(truth) {
            missing.push(*truth);
        }
    }
    missing.sort_unstable();

    let mut in_play: BTreeSet<CategoryId> = unknown_test.labels().into_iter().collect();
    in_play.extend(incorporated.keys().copied());

    Ok(MetricsReport {
        known_correct,
        known_total,
        unknown_correct,
        unknown_total,
        known_accuracy: ratio(known_correct, known_total),
        unknown_accuracy: ratio(unknown_correct, unknown_total),
        overall_accuracy: ratio(known_correct + unknown_correct, known_total + unknown_total),
        per_category,
        n_known_at_eval: state.n_categories(),
        openness_unknown_count: in_play.len(),
        missing_categories: missing,
    })
}

/// Plain closed-set scoring: argmax prediction against the true label, no
/// cascade and no unknown side.
pub fn evaluate_closed(state: &ClassifierState, test: &Dataset) -> Result<MetricsReport> {
    let preds = predict_batch(state, test.samples())?;
    let mut per_category: BTreeMap<CategoryId, CategoryScore> = BTreeMap::new();
    let mut known_correct = 0u64;
    for (s, p) in test.samples().iter().zip(&preds) {
        let correct = *p == s.true_label;
        known_correct += u64::from(correct);
        let entry = per_category.entry(s.true_label).or_insert(CategoryScore {
            scope: Scope::Known,
            correct: 0,
            total: 0,
            accuracy: 0.0,
        });
        entry.total += 1;
        entry.correct += u64::from(correct);
    }
    for score in per_category.values_mut() {
        score.accuracy = ratio(score.correct, score.total);
    }
    let known_total = test.len() as u64;
    Ok(MetricsReport {
        known_correct,
        known_total,
        unknown_correct: 0,
        unknown_total: 0,
        known_accuracy: ratio(known_correct, known_total),
        unknown_accuracy: 0.0,
        overall_accuracy: ratio(known_correct, known_total),
        per_category,
        n_known_at_eval: state.n_categories(),
        openness_unknown_count: 0,
        missing_categories: Vec::new(),
    })
}

// ---------------------------------------------------------------------------
// Sweeps, comparisons, ablations
// ---------------------------------------------------------------------------

/// Final report of one full session at a given number of held-out
/// categories.
#[derive(Clone, Debug, Serialize)]
pub struct SweepRow {
    pub unknown_count: usize,
    pub report: MetricsReport,
}

/// Runs one complete session per entry of `unknown_counts`, sharing the
/// base dataset, split policy, and session config, and keeps each run's
/// final metrics. Larger counts mean a more open problem.
pub fn openness_sweep(
    ds: &Dataset,
    n_known: usize,
    unknown_counts: &[usize],
    train_frac: f64,
    split_seed: u64,
    cfg: &SessionConfig,
) -> Result<Vec<SweepRow>> {
    if unknown_counts.is_empty() {
        return Err(Error::Config("unknown_counts must not be empty".into()));
    }
    let mut rows = Vec::with_capacity(unknown_counts.len());
    for &count in unknown_counts {
        let split = crate::dataset::make_open_split_with_unknowns(
            ds,
            n_known,
            Some(count),
            train_frac,
            split_seed,
        )?;
        let log = run_open_world(&split, cfg)?;
        let report = log
            .iterations
            .last()
            .map(|r| r.metrics.clone())
            .unwrap_or_else(|| log.initial.clone());
        rows.push(SweepRow {
            unknown_count: count,
            report,
        });
    }
    Ok(rows)
}

/// Per-iteration overall accuracy of both initialization arms, averaged
/// over the seeds that reached that iteration.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PairedRow {
    pub iteration: usize,
    pub mean_init_accuracy: f64,
    pub stochastic_init_accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct InitComparison {
    pub rows: Vec<PairedRow>,
    /// Mean over seeds of each arm's final overall accuracy.
    pub mean_init_final: f64,
    pub stochastic_init_final: f64,
    pub seeds: Vec<u64>,
}

/// Compares mean-column initialization against a norm-matched random
/// column. For every seed the mean-init arm runs the full detection
/// pipeline; the stochastic arm then replays exactly the recorded
/// incorporation stream (same categories, same samples, same training
/// seeds), so the initial column is the only difference between the arms.
pub fn compare_init_strategies(
    split: &OpenSplit,
    cfg: &SessionConfig,
    seeds: &[u64],
) -> Result<InitComparison> {
    if seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    let mut per_seed: Vec<(Vec<f64>, Vec<f64>)> = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut mean_cfg = cfg.clone();
        mean_cfg.emphasis = false;
        mean_cfg.stochastic_init = None;
        mean_cfg.train.seed = seed;

        let log = run_open_world(split, &mean_cfg)?;
        let script: Vec<IterationScript> = log
            .iterations
            .iter()
            .map(|r| IterationScript {
                truth: r.truth,
                sample_ids: r.training_sample_ids.clone(),
            })
            .collect();

        let mut stochastic_cfg = mean_cfg.clone();
        stochastic_cfg.stochastic_init = Some(seed.wrapping_mul(0x9e37_79b9).wrapping_add(1));
        let replayed = replay_session(split, &stochastic_cfg, &script)?;

        let mean_acc: Vec<f64> = log
            .iterations
            .iter()
            .map(|r| r.metrics.overall_accuracy)
            .collect();
        let stochastic_acc: Vec<f64> =
            replayed.iter().map(|m| m.overall_accuracy).collect();
        if mean_acc.len() != stochastic_acc.len() {
            return Err(Error::Protocol(
                "replay produced a different iteration count than the recorded run".into(),
            ));
        }
        per_seed.push((mean_acc, stochastic_acc));
    }

    let longest = per_seed.iter().map(|(a, _)| a.len()).max().unwrap_or(0);
    let mut rows = Vec::with_capacity(longest);
    for k in 0..longest {
        let reached: Vec<&(Vec<f64>, Vec<f64>)> =
            per_seed.iter().filter(|(a, _)| k < a.len()).collect();
        let n = reached.len() as f64;
        rows.push(PairedRow {
            iteration: k + 1,
            mean_init_accuracy: reached.iter().map(|(a, _)| a[k]).sum::<f64>() / n,
            stochastic_init_accuracy: reached.iter().map(|(_, b)| b[k]).sum::<f64>() / n,
        });
    }

    let finals = |pick: fn(&(Vec<f64>, Vec<f64>)) -> &Vec<f64>| -> f64 {
        let vals: Vec<f64> = per_seed
            .iter()
            .filter_map(|s| pick(s).last().copied())
            .collect();
        if vals.is_empty() {
            0.0
        } else {
            vals.iter().sum::<f64>() / vals.len() as f64
        }
    };

    Ok(InitComparison {
        rows,
        mean_init_final: finals(|s| &s.0),
        stochastic_init_final: finals(|s| &s.1),
        seeds: seeds.to_vec(),
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationRow {
    pub iteration: usize,
    pub variant: String,
    pub accuracy: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct AblationOutcome {
    pub rows: Vec<AblationRow>,
    pub final_by_variant: BTreeMap<String, f64>,
}

pub const ABLATION_VARIANTS: [&str; 4] = [
    "emphasis+allometry",
    "emphasis_only",
    "allometry_only",
    "simple_mean",
];

/// For each seed, runs the full pipeline once with both mechanisms enabled,
/// then replays the identical incorporation stream with each mechanism
/// toggled off, so every variant trains on the same samples in the same
/// order. Per-iteration accuracies are averaged over the seeds that
/// reached that iteration.
pub fn ablation_table(
    split: &OpenSplit,
    cfg: &SessionConfig,
    seeds: &[u64],
) -> Result<AblationOutcome> {
    if seeds.is_empty() {
        return Err(Error::Config("need at least one seed".into()));
    }
    let mut per_variant: BTreeMap<&str, Vec<Vec<f64>>> = ABLATION_VARIANTS
        .iter()
        .map(|v| (*v, Vec::with_capacity(seeds.len())))
        .collect();
    let mut finals: BTreeMap<&str, Vec<f64>> = per_variant
        .keys()
        .map(|v| (*v, Vec::with_capacity(seeds.len())))
        .collect();

    for &seed in seeds {
        let mut base = cfg.clone();
        base.emphasis = true;
        base.allometry = true;
        base.stochastic_init = None;
        base.train.seed = seed;

        let log = run_open_world(split, &base)?;
        let script: Vec<IterationScript> = log
            .iterations
            .iter()
            .map(|r| IterationScript {
                truth: r.truth,
                sample_ids: r.training_sample_ids.clone(),
            })
            .collect();

        for variant in ABLATION_VARIANTS {
            let (emphasis, allometry) = match variant {
                "emphasis+allometry" => (true, true),
                "emphasis_only" => (true, false),
                "allometry_only" => (false, true),
                "simple_mean" => (false, false),
                _ => unreachable!(),
            };
            let accs: Vec<f64> = if emphasis && allometry {
                log.iterations
                    .iter()
                    .map(|r| r.metrics.overall_accuracy)
                    .collect()
            } else {
                let mut arm = base.clone();
                arm.emphasis = emphasis;
                arm.allometry = allometry;
                replay_session(split, &arm, &script)?
                    .iter()
                    .map(|m| m.overall_accuracy)
                    .collect()
            };
            finals
                .get_mut(variant)
                .expect("variant preregistered")
                .push(accs.last().copied().unwrap_or(log.initial.overall_accuracy));
            per_variant
                .get_mut(variant)
                .expect("variant preregistered")
                .push(accs);
        }
    }

    let mut rows = Vec::new();
    let mut final_by_variant = BTreeMap::new();
    for variant in ABLATION_VARIANTS {
        let runs = &per_variant[variant];
        let longest = runs.iter().map(Vec::len).max().unwrap_or(0);
        for k in 0..longest {
            let reached: Vec<f64> = runs
                .iter()
                .filter_map(|accs| accs.get(k).copied())
                .collect();
            rows.push(AblationRow {
                iteration: k + 1,
                variant: variant.to_string(),
                accuracy: reached.iter().sum::<f64>() / reached.len() as f64,
            });
        }
        let last = &finals[variant];
        final_by_variant.insert(
            variant.to_string(),
            last.iter().sum::<f64>() / last.len() as f64,
        );
    }
    Ok(AblationOutcome {
        rows,
        final_by_variant,
    })
}

// ---------------------------------------------------------------------------
// Emission
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReportFormat {
    Csv,
    Json,
}

impl std::str::FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            other => Err(Error::Config(format!(
                "unknown format `{other}` (expected csv or json)"
            ))),
        }
    }
}

fn config_comment(config: &BTreeMap<String, String>) -> String {
    let mut out = String::new();
    for (k, v) in config {
        out.push_str(&format!("# {k}={v}\n"));
    }
    out
}

/// Per-category rows followed by the three aggregates, which carry an empty
/// category field.
pub fn metrics_to_csv(report: &MetricsReport, config: &BTreeMap<String, String>) -> String {
    let mut out = config_comment(config);
    out.push_str("scope,category,correct,total,accuracy\n");
    for (id, score) in &report.per_category {
        let scope = match score.scope {
            Scope::Known => "known",
            Scope::Unknown => "unknown",
        };
        out.push_str(&format!(
            "{scope},{id},{},{},{}\n",
            score.correct,
            score.total,
            fmt_float(score.accuracy)
        ));
    }
    out.push_str(&format!(
        "known,,{},{},{}\n",
        report.known_correct,
        report.known_total,
        fmt_float(report.known_accuracy)
    ));
    out.push_str(&format!(
        "unknown,,{},{},{}\n",
        report.unknown_correct,
        report.unknown_total,
        fmt_float(report.unknown_accuracy)
    ));
    out.push_str(&format!(
        "overall,,{},{},{}\n",
        report.known_correct + report.unknown_correct,
        report.known_total + report.unknown_total,
        fmt_float(report.overall_accuracy)
    ));
    out
}

#[derive(Serialize)]
struct WithConfig<'a, T: Serialize> {
    config: &'a BTreeMap<String, String>,
    #[serde(flatten)]
    payload: &'a T,
}

fn to_json<T: Serialize>(payload: &T, config: &BTreeMap<String, String>) -> Result<String> {
    serde_json::to_string_pretty(&WithConfig { config, payload })
        .map(|s| s + "\n")
        .map_err(|e| Error::Config(format!("serialization failed: {e}")))
}

#[derive(Serialize)]
struct MetricsPayload<'a> {
    report: &'a MetricsReport,
}

pub fn metrics_to_json(
    report: &MetricsReport,
    config: &BTreeMap<String, String>,
) -> Result<String> {
    to_json(&MetricsPayload { report }, config)
}

pub fn sweep_to_csv(rows: &[SweepRow], config: &BTreeMap<String, String>) -> String {
    let mut out = config_comment(config);
    out.push_str("unknown_count,overall,known,unknown\n");
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{}\n",
            row.unknown_count,
            fmt_float(row.report.overall_accuracy),
            fmt_float(row.report.known_accuracy),
            fmt_float(row.report.unknown_accuracy)
        ));
    }
    out
}

#[derive(Serialize)]
struct SweepPayload<'a> {
    rows: &'a [SweepRow],
}

pub fn sweep_to_json(rows: &[SweepRow], config: &BTreeMap<String, String>) -> Result<String> {
    to_json(&SweepPayload { rows }, config)
}

/// Flattens the paired comparison into `iteration,arm,accuracy` rows.
pub fn comparison_to_csv(cmp: &InitComparison, config: &BTreeMap<String, String>) -> String {
    let mut out = config_comment(config);
    out.push_str("iteration,arm,accuracy\n");
    for row in &cmp.rows {
        out.push_str(&format!(
            "{},mean_init,{}\n",
            row.iteration,
            fmt_float(row.mean_init_accuracy)
        ));
        out.push_str(&format!(
            "{},stochastic_init,{}\n",
            row.iteration,
            fmt_float(row.stochastic_init_accuracy)
        ));
    }
    out
}

#[derive(Serialize)]
struct ComparisonPayload<'a> {
    comparison: &'a InitComparison,
}

pub fn comparison_to_json(
    cmp: &InitComparison,
    config: &BTreeMap<String, String>,
) -> Result<String> {
    to_json(&ComparisonPayload { comparison: cmp }, config)
}

pub fn ablation_to_csv(out_rows: &AblationOutcome, config: &BTreeMap<String, String>) -> String {
    let mut out = config_comment(config);
    out.push_str("iteration,arm,accuracy\n");
    for row in &out_rows.rows {
        out.push_str(&format!(
            "{},{},{}\n",
            row.iteration,
            row.variant,
            fmt_float(row.accuracy)
        ));
    }
    out
}

#[derive(Serialize)]
struct AblationPayload<'a> {
    ablation: &'a AblationOutcome,
}

pub fn ablation_to_json(
    outcome: &AblationOutcome,
    config: &BTreeMap<String, String>,
) -> Result<String> {
    to_json(&AblationPayload { ablation: outcome }, config)
}

pub fn write_report(text: &str, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
