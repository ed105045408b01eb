//! The open-world session loop.
//!
//! One session starts from a classifier over the known categories and then
//! cycles: flag pool samples the cascade rejects, have the teacher label a
//! bounded number of them, pick the largest labeled group, append a column
//! for it, and fine-tune with established columns damped. Every consumed
//! sample joins the training corpus under its assigned label, the
//! thresholds are recalibrated, and the snapshot is evaluated before the
//! next sweep.
//!
//! The whole loop is deterministic: a fixed split and config reproduce the
//! session log byte for byte.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::batch::detect_batch;
use crate::classifier::{
    allometry_factors, emphasis_init, expand, run_epochs, train_initial, AllometryFactors,
    ClassifierState, TrainConfig,
};
use crate::dataset::{balanced_subset, CategoryId, Dataset, FeatureSample, OpenSplit};
use crate::error::{Error, Result};
use crate::eval::{evaluate_open, CategoryScore, MetricsReport};
use crate::thresholds::{calibrate, ConfidenceMode, TripletThresholds};

// ---------------------------------------------------------------------------
// Teacher
// ---------------------------------------------------------------------------

/// Ground-truth oracle with label accounting.
///
/// The oracle knows the truth for every pool sample but only answers are
/// charged: the first label issued for a sample costs one annotation, and
/// re-showing an already labeled sample is free. A lifetime per-category
/// budget caps how many annotations any single category may ever consume.
#[derive(Clone, Debug)]
pub struct TeacherOracle {
    truth: BTreeMap<u64, CategoryId>,
    issued: BTreeSet<u64>,
    per_category_issued: BTreeMap<CategoryId, u64>,
    labels_issued: u64,
}

impl TeacherOracle {
    pub fn from_dataset(pool: &Dataset) -> Self {
        TeacherOracle::from_truth(pool.samples().iter().map(|s| (s.id, s.true_label)).collect())
    }

    pub fn from_truth(truth: BTreeMap<u64, CategoryId>) -> Self {
        TeacherOracle {
            truth,
            issued: BTreeSet::new(),
            per_category_issued: BTreeMap::new(),
            labels_issued: 0,
        }
    }

    pub fn labels_issued(&self) -> u64 {
        self.labels_issued
    }

    pub fn per_category_issued(&self) -> &BTreeMap<CategoryId, u64> {
        &self.per_category_issued
    }

    fn truth_of(&self, id: u64) -> Result<CategoryId> {
        self.truth.get(&id).copied().ok_or_else(|| {
            Error::Protocol(format!("teacher has no ground truth for sample {id}"))
        })
    }

    fn has_issued(&self, id: u64) -> bool {
        self.issued.contains(&id)
    }

    fn issued_for(&self, category: CategoryId) -> u64 {
        self.per_category_issued.get(&category).copied().unwrap_or(0)
    }

    fn issue(&mut self, id: u64, category: CategoryId) {
        if self.issued.insert(id) {
            self.labels_issued += 1;
            *self.per_category_issued.entry(category).or_insert(0) += 1;
        }
    }
}

// ---------------------------------------------------------------------------
// Detection over the pool
// ---------------------------------------------------------------------------

/// Pool split into cascade-rejected samples and the accepted rest.
#[derive(Clone, Debug)]
pub struct PoolPartition {
    pub detected_unknown: Vec<FeatureSample>,
    pub accepted: Vec<(FeatureSample, CategoryId)>,
}

/// Runs up to `passes` detection sweeps over `pool`. Each sweep scans the
/// samples not yet flagged; flagged ones accumulate in pool order. With a
/// fixed model a second sweep adds nothing and the loop exits early, so
/// extra passes only matter for detectors whose state changes between
/// sweeps.
pub fn detect_unknown_pool(
    state: &ClassifierState,
    thresholds: &TripletThresholds,
    pool: &Dataset,
    passes: usize,
) -> Result<PoolPartition> {
    if passes == 0 {
        return Err(Error::Config("passes must be positive".into()));
    }
    let mut current: Vec<FeatureSample> = pool.samples().to_vec();
    let mut detected_unknown = Vec::new();
    let mut accepted: Vec<(FeatureSample, CategoryId)> = Vec::new();
    for _ in 0..passes {
        if current.is_empty() {
            accepted.clear();
            break;
        }
        let outcomes = detect_batch(state, thresholds, &current)?;
        let mut survivors = Vec::new();
        let mut survivor_labels = Vec::new();
        let mut flagged = 0usize;
        for (sample, outcome) in current.into_iter().zip(&outcomes) {
            match outcome.verdict {
                crate::thresholds::Verdict::Unknown => {
                    detected_unknown.push(sample);
                    flagged += 1;
                }
                crate::thresholds::Verdict::Known(label) => {
                    survivor_labels.push(label);
                    survivors.push(sample);
                }
            }
        }
        accepted = survivors
            .iter()
            .cloned()
            .zip(survivor_labels.iter().copied())
            .collect();
        if flagged == 0 {
            break;
        }
        current = survivors;
    }
    Ok(PoolPartition {
        detected_unknown,
        accepted,
    })
}

// ---------------------------------------------------------------------------
// Labeling
// ---------------------------------------------------------------------------

/// Teacher response for one batch of detector-flagged samples.
#[derive(Clone, Debug)]
pub struct LabelingOutcome {
    /// Labeled samples grouped by their true category, each group in
    /// first-seen order. Only categories not yet in the classifier appear.
    pub groups: BTreeMap<CategoryId, Vec<FeatureSample>>,
    /// Flagged samples whose category the classifier already covers, as
    /// `(sample id, truth)`. These cost no annotations.
    pub false_detections: Vec<(u64, CategoryId)>,
    /// Fresh annotations charged by this call.
    pub labels_consumed: u64,
}

/// Presents the flagged samples to the teacher. Samples already labeled in
/// earlier iterations rejoin their group for free; unlabeled ones consume
/// one annotation each while the category stays under `budget` lifetime
/// annotations, and are skipped afterwards. Samples of categories in
/// `known` are reported as false detections.
pub fn label_with_teacher(
    detected: &[FeatureSample],
    oracle: &mut TeacherOracle,
    budget: usize,
    known: &BTreeSet<CategoryId>,
) -> Result<LabelingOutcome> {
    if budget == 0 {
        return Err(Error::Config("labeling budget must be positive".into()));
    }
    let mut groups: BTreeMap<CategoryId, Vec<FeatureSample>> = BTreeMap::new();
    let mut false_detections = Vec::new();
    let mut labels_consumed = 0u64;
    for sample in detected {
        let truth = oracle.truth_of(sample.id)?;
        if known.contains(&truth) {
            false_detections.push((sample.id, truth));
            continue;
        }
        if oracle.has_issued(sample.id) {
            groups.entry(truth).or_default().push(sample.clone());
        } else if oracle.issued_for(truth) < budget as u64 {
            oracle.issue(sample.id, truth);
            labels_consumed += 1;
            groups.entry(truth).or_default().push(sample.clone());
        }
    }
    Ok(LabelingOutcome {
        groups,
        false_detections,
        labels_consumed,
    })
}

/// Largest labeled group; ties resolve to the smallest category id. `None`
/// when there is nothing to add.
pub fn choose_next_category(
    groups: &BTreeMap<CategoryId, Vec<FeatureSample>>,
) -> Option<CategoryId> {
    let mut best: Option<(CategoryId, usize)> = None;
    for (&category, members) in groups {
        if members.is_empty() {
            continue;
        }
        match best {
            Some((_, size)) if members.len() <= size => {}
            _ => best = Some((category, members.len())),
        }
    }
    best.map(|(category, _)| category)
}

// ---------------------------------------------------------------------------
// Incorporation
// ---------------------------------------------------------------------------

/// How the appended column is initialized.
#[derive(Clone, Debug, PartialEq)]
pub enum InitStrategy {
    /// Blend of the mean existing column and the mean over the `m` columns
    /// most responsive to the new samples. `alpha: 1.0, beta: 0.0` is the
    /// plain mean column.
    Blend { alpha: f64, beta: f64, m: usize },
    /// Random direction scaled to the mean column's norm, with the mean
    /// bias. Exists as the baseline arm for comparisons.
    Stochastic { seed: u64 },
}

/// Appends one category for `new_samples` (which must share a single truth
/// label) and returns the expanded state plus the label the new column
/// answers to.
pub fn incorporate_category(
    state: &ClassifierState,
    new_samples: &[FeatureSample],
    strategy: &InitStrategy,
) -> Result<(ClassifierState, CategoryId)> {
    if new_samples.is_empty() {
        return Err(Error::Config("no samples for the new category".into()));
    }
    let truth = new_samples[0].true_label;
    if new_samples.iter().any(|s| s.true_label != truth) {
        return Err(Error::Protocol(
            "new-category samples carry more than one truth label".into(),
        ));
    }

    let k = state.n_categories();
    let mut mean_activation = vec![0.0; k];
    for s in new_samples {
        let v = state.activations(&s.features)?;
        for (acc, x) in mean_activation.iter_mut().zip(&v) {
            *acc += x;
        }
    }
    for acc in mean_activation.iter_mut() {
        *acc /= new_samples.len() as f64;
    }

    let (column, bias) = match strategy {
        InitStrategy::Blend { alpha, beta, m } => {
            let m_eff = (*m).min(k).max(1);
            emphasis_init(state, &mean_activation, m_eff, *alpha, *beta)?
        }
        InitStrategy::Stochastic { seed } => {
            let (mean_column, mean_bias) = emphasis_init(state, &mean_activation, 1, 1.0, 0.0)?;
            let target: f64 = mean_column.iter().map(|w| w * w).sum::<f64>().sqrt();
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let draw: Vec<f64> = (0..state.dim())
                .map(|_| StandardNormal.sample(&mut rng))
                .collect();
            let norm: f64 = draw.iter().map(|w| w * w).sum::<f64>().sqrt();
            if norm == 0.0 {
                return Err(Error::Numeric("degenerate random column draw".into()));
            }
            let column = draw.iter().map(|w| w * (target / norm)).collect();
            (column, mean_bias)
        }
    };

    let expanded = expand(state, column, bias)?;
    Ok((expanded, CategoryId::from_column(k)))
}

/// Fine-tunes a just-expanded state (exactly one appended category). The
/// training set is the new samples, relabeled to the new column, plus a
/// balanced draw of `per_class` samples from every established category in
/// `train`. With `allometric` set, established columns step at a tenth of
/// the new column's rate.
pub fn incremental_finetune(
    state: &ClassifierState,
    new_samples: &[FeatureSample],
    train: &Dataset,
    cfg: &TrainConfig,
    per_class: usize,
    allometric: bool,
) -> Result<ClassifierState> {
    cfg.validate()?;
    if state.n_categories() != state.n_initial() + 1 {
        return Err(Error::Protocol(format!(
            "fine-tuning expects exactly one appended category, found {} over {} established",
            state.n_categories(),
            state.n_initial()
        )));
    }
    if new_samples.is_empty() {
        return Err(Error::Config("no samples for the new category".into()));
    }
    let truth = new_samples[0].true_label;
    if new_samples.iter().any(|s| s.true_label != truth) {
        return Err(Error::Protocol(
            "new-category samples carry more than one truth label".into(),
        ));
    }
    if per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }

    let established: BTreeSet<CategoryId> = (1..=state.n_initial() as u32)
        .map(CategoryId)
        .collect();
    let train_labels: BTreeSet<CategoryId> = train.labels().into_iter().collect();
    if train_labels != established {
        return Err(Error::Protocol(format!(
            "training corpus covers {train_labels:?}, expected exactly {established:?}"
        )));
    }

    let balanced = balanced_subset(train, &established, per_class, cfg.seed)?;
    let new_label = CategoryId(state.n_categories() as u32);
    let relabeled: Vec<FeatureSample> = new_samples
        .iter()
        .map(|s| FeatureSample::new(s.id, new_label, s.features.clone()))
        .collect();

    let mut combined: Vec<&FeatureSample> = balanced.data.samples().iter().collect();
    combined.extend(relabeled.iter());

    let factors = if allometric {
        allometry_factors(state.n_initial(), state.n_categories())?
    } else {
        AllometryFactors::neutral(state.n_categories())
    };
    run_epochs(state, &combined, cfg, &factors)
}

// ---------------------------------------------------------------------------
// Session configuration
// ---------------------------------------------------------------------------

/// Everything one open-world session needs beyond the split itself.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionConfig {
    /// Scale for the per-category floor `mu = epsilon * eta`.
    pub epsilon: f64,
    /// Scale for the per-category margin bar `delta`.
    pub rho: f64,
    pub confidence_mode: ConfidenceMode,
    /// Blend weight of the mean column in new-column initialization.
    pub alpha: f64,
    /// Blend weight of the most-responsive columns.
    pub beta: f64,
    /// How many of the most-responsive columns the blend draws on.
    pub m_emphasis: usize,
    /// Blend initialization on; off falls back to the plain mean column.
    pub emphasis: bool,
    /// Damped established columns during fine-tuning; off trains every
    /// column at the full rate.
    pub allometry: bool,
    /// Random-column initialization with this seed; overrides the blend.
    pub stochastic_init: Option<u64>,
    /// Lifetime annotation budget per category.
    pub teacher_budget: usize,
    /// Detection sweeps per iteration.
    pub detect_passes: usize,
    /// Hard cap on detector sweeps per session.
    pub max_iterations: usize,
    /// Consecutive empty sweeps before the session stalls out.
    pub patience: usize,
    pub train: TrainConfig,
}

impl Default for SessionConfig {
    fn default() -> Self {
        SessionConfig {
            epsilon: 0.5,
            rho: 0.5,
            confidence_mode: ConfidenceMode::Activation,
            alpha: 0.5,
            beta: 0.5,
            m_emphasis: 5,
            emphasis: true,
            allometry: true,
            stochastic_init: None,
            teacher_budget: 8,
            detect_passes: 1,
            max_iterations: 40,
            patience: 3,
            train: TrainConfig::default(),
        }
    }
}

impl SessionConfig {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        if !self.alpha.is_finite() || !self.beta.is_finite() {
            return Err(Error::Config("alpha and beta must be finite".into()));
        }
        if self.m_emphasis == 0 {
            return Err(Error::Config("m_emphasis must be positive".into()));
        }
        if self.teacher_budget == 0 {
            return Err(Error::Config("teacher_budget must be positive".into()));
        }
        if self.detect_passes == 0 {
            return Err(Error::Config("detect_passes must be positive".into()));
        }
        if self.max_iterations == 0 {
            return Err(Error::Config("max_iterations must be positive".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be positive".into()));
        }
        Ok(())
    }

    /// Column initialization for the given 1-based incorporation index.
    pub fn init_strategy(&self, iteration: usize) -> InitStrategy {
        if let Some(seed) = self.stochastic_init {
            InitStrategy::Stochastic {
                seed: seed.wrapping_add(iteration as u64),
            }
        } else if self.emphasis {
            InitStrategy::Blend {
                alpha: self.alpha,
                beta: self.beta,
                m: self.m_emphasis,
            }
        } else {
            InitStrategy::Blend {
                alpha: 1.0,
                beta: 0.0,
                m: 1,
            }
        }
    }

    /// Training config for the given 1-based incorporation index: the base
    /// config with a per-iteration derived seed.
    pub fn iter_train_cfg(&self, iteration: usize) -> TrainConfig {
        TrainConfig {
            seed: self.train.seed.wrapping_add(iteration as u64),
            ..self.train.clone()
        }
    }

    /// Flat key/value view, embedded into every emitted report.
    pub fn echo(&self) -> BTreeMap<String, String> {
        let mode = match self.confidence_mode {
            ConfidenceMode::Activation => "activation",
            ConfidenceMode::Softmax => "softmax",
        };
        let stochastic = match self.stochastic_init {
            Some(seed) => seed.to_string(),
            None => "none".to_string(),
        };
        [
            ("epsilon", self.epsilon.to_string()),
            ("rho", self.rho.to_string()),
            ("confidence_mode", mode.to_string()),
            ("alpha", self.alpha.to_string()),
            ("beta", self.beta.to_string()),
            ("m_emphasis", self.m_emphasis.to_string()),
            ("emphasis", self.emphasis.to_string()),
            ("allometry", self.allometry.to_string()),
            ("stochastic_init", stochastic),
            ("teacher_budget", self.teacher_budget.to_string()),
            ("detect_passes", self.detect_passes.to_string()),
            ("max_iterations", self.max_iterations.to_string()),
            ("patience", self.patience.to_string()),
            ("learning_rate", self.train.learning_rate.to_string()),
            ("epochs", self.train.epochs.to_string()),
            ("batch_size", self.train.batch_size.to_string()),
            ("l2", self.train.l2.to_string()),
            ("train_seed", self.train.seed.to_string()),
        ]
        .into_iter()
        .map(|(k, v)| (k.to_string(), v))
        .collect()
    }
}

// ---------------------------------------------------------------------------
// Session log
// ---------------------------------------------------------------------------

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    /// 1-based incorporation counter.
    pub iteration: usize,
    /// Pool ground-truth id of the chosen category.
    pub truth: CategoryId,
    /// Label the new column answers to.
    pub assigned: CategoryId,
    /// Samples the detector flagged this sweep.
    pub detected_unknown: usize,
    /// Flagged samples whose category was already covered.
    pub false_detections: usize,
    /// Fresh annotations consumed this iteration.
    pub teacher_labels_used: u64,
    /// Ids of the samples that trained the new column.
    pub training_sample_ids: Vec<u64>,
    /// Snapshot after fine-tuning and recalibration.
    pub metrics: MetricsReport,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TerminationReason {
    /// Every pool sample was consumed.
    PoolExhausted,
    /// The sweep cap was reached.
    MaxIterations,
    /// `patience` consecutive sweeps yielded nothing to add.
    Stalled,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionLog {
    pub config: BTreeMap<String, String>,
    pub initial: MetricsReport,
    pub iterations: Vec<IterationRecord>,
    pub final_per_category: BTreeMap<CategoryId, CategoryScore>,
    pub labels_issued: u64,
    pub average_labels_per_category: f64,
    pub termination: TerminationReason,
}

impl SessionLog {
    pub fn to_json_string(&self) -> Result<String> {
        serde_json::to_string_pretty(self)
            .map(|s| s + "\n")
            .map_err(|e| Error::Config(format!("serialization failed: {e}")))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json_string()?).map_err(|e| Error::io(path, e))
    }

    pub fn final_metrics(&self) -> &MetricsReport {
        self.iterations
            .last()
            .map(|r| &r.metrics)
            .unwrap_or(&self.initial)
    }
}

// ---------------------------------------------------------------------------
// Running a session
// ---------------------------------------------------------------------------

struct SessionState {
    classifier: ClassifierState,
    thresholds: TripletThresholds,
    corpus: Dataset,
    consumed: BTreeSet<u64>,
    incorporated: BTreeMap<CategoryId, CategoryId>,
}

impl SessionState {
    fn start(split: &OpenSplit, cfg: &SessionConfig) -> Result<Self> {
        let classifier = train_initial(&split.train, &cfg.train)?;
        let corpus = split.train.clone();
        let thresholds = calibrate(
            &classifier,
            &corpus,
            cfg.epsilon,
            cfg.rho,
            cfg.confidence_mode,
        )?;
        Ok(SessionState {
            classifier,
            thresholds,
            corpus,
            consumed: BTreeSet::new(),
            incorporated: BTreeMap::new(),
        })
    }

    fn snapshot(&self, split: &OpenSplit) -> Result<MetricsReport> {
        let unknown_test = split
            .unknown_pool
            .filtered(|s| !self.consumed.contains(&s.id));
        evaluate_open(
            &self.classifier,
            &self.thresholds,
            &split.known_test,
            &unknown_test,
            &self.incorporated,
            &self.corpus.ids(),
        )
    }

    /// Appends a column for `samples` (all one truth), fine-tunes, folds the
    /// samples into the corpus under the assigned label, and recalibrates.
    fn incorporate(
        &mut self,
        samples: &[FeatureSample],
        truth: CategoryId,
        cfg: &SessionConfig,
        iteration: usize,
    ) -> Result<CategoryId> {
        let strategy = cfg.init_strategy(iteration);
        let (expanded, assigned) = incorporate_category(&self.classifier, samples, &strategy)?;
        let iter_cfg = cfg.iter_train_cfg(iteration);
        let tuned = incremental_finetune(
            &expanded,
            samples,
            &self.corpus,
            &iter_cfg,
            samples.len(),
            cfg.allometry,
        )?;

        let adopted: Vec<FeatureSample> = samples
            .iter()
            .map(|s| FeatureSample::new(s.id, assigned, s.features.clone()))
            .collect();
        self.corpus = self
            .corpus
            .merged(&Dataset::new(self.corpus.dim(), adopted)?)?;
        self.consumed.extend(samples.iter().map(|s| s.id));
        self.incorporated.insert(truth, assigned);
        self.thresholds = calibrate(
            &tuned,
            &self.corpus,
            cfg.epsilon,
            cfg.rho,
            cfg.confidence_mode,
        )?;
        self.classifier = tuned;
        Ok(assigned)
    }
}

/// Runs a complete open-world session over `split` and returns the log:
/// initial snapshot, one record per incorporated category, teacher
/// accounting, and why the loop stopped.
pub fn run_open_world(split: &OpenSplit, cfg: &SessionConfig) -> Result<SessionLog> {
    cfg.validate()?;
    let mut session = SessionState::start(split, cfg)?;
    let initial = session.snapshot(split)?;

    let mut oracle = TeacherOracle::from_dataset(&split.unknown_pool);
    let mut known_truths: BTreeSet<CategoryId> = split.known_labels.clone();
    let mut records: Vec<IterationRecord> = Vec::new();
    let mut stall = 0usize;
    let mut termination = None;

    for _sweep in 0..cfg.max_iterations {
        let residual = split
            .unknown_pool
            .filtered(|s| !session.consumed.contains(&s.id));
        if residual.is_empty() {
            termination = Some(TerminationReason::PoolExhausted);
            break;
        }

        let partition = detect_unknown_pool(
            &session.classifier,
            &session.thresholds,
            &residual,
            cfg.detect_passes,
        )?;
        let outcome = label_with_teacher(
            &partition.detected_unknown,
            &mut oracle,
            cfg.teacher_budget,
            &known_truths,
        )?;

        let Some(truth) = choose_next_category(&outcome.groups) else {
            stall += 1;
            if stall >= cfg.patience {
                termination = Some(TerminationReason::Stalled);
                break;
            }
            continue;
        };
        stall = 0;

        let samples = &outcome.groups[&truth];
        let iteration = records.len() + 1;
        let assigned = session.incorporate(samples, truth, cfg, iteration)?;
        known_truths.insert(truth);

        let metrics = session.snapshot(split)?;
        records.push(IterationRecord {
            iteration,
            truth,
            assigned,
            detected_unknown: partition.detected_unknown.len(),
            false_detections: outcome.false_detections.len(),
            teacher_labels_used: outcome.labels_consumed,
            training_sample_ids: samples.iter().map(|s| s.id).collect(),
            metrics,
        });
    }

    let final_per_category = records
        .last()
        .map(|r| r.metrics.per_category.clone())
        .unwrap_or_else(|| initial.per_category.clone());
    let labels_issued = oracle.labels_issued();
    let average = if records.is_empty() {
        0.0
    } else {
        labels_issued as f64 / records.len() as f64
    };

    Ok(SessionLog {
        config: cfg.echo(),
        initial,
        iterations: records,
        final_per_category,
        labels_issued,
        average_labels_per_category: average,
        termination: termination.unwrap_or(TerminationReason::MaxIterations),
    })
}

// ---------------------------------------------------------------------------
// Scripted replay
// ---------------------------------------------------------------------------

/// One recorded incorporation: which category was added and from which
/// samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterationScript {
    pub truth: CategoryId,
    pub sample_ids: Vec<u64>,
}

/// Re-runs the incorporation sequence of a recorded session without the
/// detector or teacher: iteration `k` adds exactly `script[k]`'s samples.
/// Comparison arms use this so initialization and fine-tuning variants see
/// identical streams; with the recording session's own config the replay
/// reproduces its per-iteration metrics exactly.
pub fn replay_session(
    split: &OpenSplit,
    cfg: &SessionConfig,
    script: &[IterationScript],
) -> Result<Vec<MetricsReport>> {
    cfg.validate()?;
    let mut session = SessionState::start(split, cfg)?;

    let by_id: BTreeMap<u64, &FeatureSample> = split
        .unknown_pool
        .samples()
        .iter()
        .map(|s| (s.id, s))
        .collect();

    let mut reports = Vec::with_capacity(script.len());
    for (idx, step) in script.iter().enumerate() {
        let mut samples = Vec::with_capacity(step.sample_ids.len());
        for id in &step.sample_ids {
            let s = by_id.get(id).ok_or_else(|| {
                Error::Protocol(format!("scripted sample {id} is not in the pool"))
            })?;
            if s.true_label != step.truth {
                return Err(Error::Protocol(format!(
                    "scripted sample {id} has truth {}, step expects {}",
                    s.true_label, step.truth
                )));
            }
            samples.push((*s).clone());
        }
        session.incorporate(&samples, step.truth, cfg, idx + 1)?;
        reports.push(session.snapshot(split)?);
    }
    Ok(reports)
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{make_open_split, synth_blobs};

    fn pool_of(samples: Vec<(u64, u32)>) -> Dataset {
        let samples = samples
            .into_iter()
            .map(|(id, label)| FeatureSample::new(id, CategoryId(label), vec![id as f64, 0.0]))
            .collect();
        Dataset::new(2, samples).expect("dataset")
    }

    fn quick_cfg() -> SessionConfig {
        SessionConfig {
            teacher_budget: 4,
            max_iterations: 12,
            train: TrainConfig {
                epochs: 15,
                ..TrainConfig::default()
            },
            ..SessionConfig::default()
        }
    }

    #[test]
    fn teacher_charges_once_per_sample() {
        let pool = pool_of(vec![(1, 7), (2, 7), (3, 8)]);
        let mut oracle = TeacherOracle::from_dataset(&pool);
        let known = BTreeSet::new();
        let first =
            label_with_teacher(pool.samples(), &mut oracle, 10, &known).expect("label");
        assert_eq!(first.labels_consumed, 3);
        assert_eq!(first.groups[&CategoryId(7)].len(), 2);

        let second =
            label_with_teacher(pool.samples(), &mut oracle, 10, &known).expect("label");
        assert_eq!(second.labels_consumed, 0, "re-shown samples are free");
        assert_eq!(second.groups[&CategoryId(7)].len(), 2);
        assert_eq!(oracle.labels_issued(), 3);
    }

    #[test]
    fn teacher_budget_is_a_lifetime_per_category_cap() {
        let pool = pool_of(vec![(1, 7), (2, 7), (3, 7), (4, 7), (5, 8)]);
        let mut oracle = TeacherOracle::from_dataset(&pool);
        let known = BTreeSet::new();
        let out = label_with_teacher(pool.samples(), &mut oracle, 2, &known).expect("label");
        assert_eq!(out.groups[&CategoryId(7)].len(), 2, "capped at the budget");
        assert_eq!(out.groups[&CategoryId(8)].len(), 1);
        assert_eq!(out.labels_consumed, 3);

        // Later calls cannot push category 7 past its lifetime budget.
        let again = label_with_teacher(pool.samples(), &mut oracle, 2, &known).expect("label");
        assert_eq!(again.groups[&CategoryId(7)].len(), 2);
        assert_eq!(again.labels_consumed, 0);
        assert_eq!(oracle.per_category_issued()[&CategoryId(7)], 2);
    }

    #[test]
    fn teacher_reports_already_covered_categories_as_false_detections() {
        let pool = pool_of(vec![(1, 3), (2, 7)]);
        let mut oracle = TeacherOracle::from_dataset(&pool);
        let known: BTreeSet<CategoryId> = [CategoryId(3)].into();
        let out = label_with_teacher(pool.samples(), &mut oracle, 5, &known).expect("label");
        assert_eq!(out.false_detections, vec![(1, CategoryId(3))]);
        assert_eq!(out.labels_consumed, 1, "false detections are free");
        assert!(!out.groups.contains_key(&CategoryId(3)));
    }

    #[test]
    fn choose_next_category_prefers_large_groups_then_small_ids() {
        let mut groups: BTreeMap<CategoryId, Vec<FeatureSample>> = BTreeMap::new();
        let sample = |id| FeatureSample::new(id, CategoryId(9), vec![0.0]);
        groups.insert(CategoryId(9), vec![sample(1), sample(2)]);
        groups.insert(CategoryId(4), vec![sample(3)]);
        assert_eq!(choose_next_category(&groups), Some(CategoryId(9)));

        groups.get_mut(&CategoryId(4)).unwrap().push(sample(4));
        assert_eq!(
            choose_next_category(&groups),
            Some(CategoryId(4)),
            "equal sizes resolve to the smaller id"
        );
        assert_eq!(choose_next_category(&BTreeMap::new()), None);
    }

    #[test]
    fn incorporate_assigns_the_next_label() {
        let ds = synth_blobs(3, 20, 6, 0.2, 5.0, 5).expect("synth");
        let state = train_initial(&ds, &TrainConfig::default()).expect("train");
        let new_samples: Vec<FeatureSample> = (0..4)
            .map(|i| {
                let mut features = vec![0.0; 6];
                features[5] = 5.0;
                FeatureSample::new(1000 + i, CategoryId(9), features)
            })
            .collect();
        let strategy = InitStrategy::Blend {
            alpha: 0.5,
            beta: 0.5,
            m: 5,
        };
        let (expanded, assigned) =
            incorporate_category(&state, &new_samples, &strategy).expect("incorporate");
        assert_eq!(assigned, CategoryId(4));
        assert_eq!(expanded.n_categories(), 4);
        assert_eq!(expanded.n_initial(), 3);
        assert_eq!(&expanded.weights()[..3], state.weights());
    }

    #[test]
    fn incorporate_rejects_mixed_truths() {
        let ds = synth_blobs(2, 10, 4, 0.2, 5.0, 5).expect("synth");
        let state = train_initial(&ds, &TrainConfig::default()).expect("train");
        let mixed = vec![
            FeatureSample::new(100, CategoryId(8), vec![0.0; 4]),
            FeatureSample::new(101, CategoryId(9), vec![0.0; 4]),
        ];
        let strategy = InitStrategy::Blend {
            alpha: 0.5,
            beta: 0.5,
            m: 2,
        };
        assert!(incorporate_category(&state, &mixed, &strategy).is_err());
    }

    #[test]
    fn stochastic_init_matches_the_mean_column_norm() {
        let ds = synth_blobs(3, 20, 6, 0.2, 5.0, 5).expect("synth");
        let state = train_initial(&ds, &TrainConfig::default()).expect("train");
        let new_samples = vec![FeatureSample::new(500, CategoryId(9), {
            let mut f = vec![0.0; 6];
            f[4] = 5.0;
            f
        })];
        let (a, _) = incorporate_category(
            &state,
            &new_samples,
            &InitStrategy::Stochastic { seed: 3 },
        )
        .expect("incorporate");
        let (b, _) = incorporate_category(
            &state,
            &new_samples,
            &InitStrategy::Blend {
                alpha: 1.0,
                beta: 0.0,
                m: 1,
            },
        )
        .expect("incorporate");
        let norm = |col: &[f64]| col.iter().map(|w| w * w).sum::<f64>().sqrt();
        let random_norm = norm(a.weight_column(3));
        let mean_norm = norm(b.weight_column(3));
        assert!(
            (random_norm - mean_norm).abs() < 1e-9,
            "random column norm {random_norm} vs mean column norm {mean_norm}"
        );
        assert_ne!(a.weight_column(3), b.weight_column(3));
        assert_eq!(a.biases()[3], b.biases()[3], "both take the mean bias");
    }

    #[test]
    fn finetune_learns_the_new_category_and_keeps_the_old() {
        let ds = synth_blobs(4, 30, 8, 0.2, 8.0, 5).expect("synth");
        // Categories 1..3 are established; category 4's samples play the
        // part of a freshly discovered category.
        let train = ds.filtered(|s| s.true_label.0 <= 3);
        let newcomers: Vec<FeatureSample> = ds
            .filtered(|s| s.true_label.0 == 4)
            .samples()
            .iter()
            .take(6)
            .cloned()
            .collect();
        let cfg = TrainConfig::default();
        let state = train_initial(&train, &cfg).expect("train");
        let (expanded, assigned) = incorporate_category(
            &state,
            &newcomers,
            &InitStrategy::Blend {
                alpha: 0.5,
                beta: 0.5,
                m: 3,
            },
        )
        .expect("incorporate");
        let tuned = incremental_finetune(&expanded, &newcomers, &train, &cfg, newcomers.len(), true)
            .expect("finetune");

        for s in &newcomers {
            assert_eq!(
                tuned.predict(&s.features).expect("predict"),
                assigned,
                "new-category sample {} must land on the new column",
                s.id
            );
        }
        let still_right = train
            .samples()
            .iter()
            .filter(|s| tuned.predict(&s.features).expect("predict") == s.true_label)
            .count();
        assert_eq!(still_right, train.len(), "established categories survive");
    }

    #[test]
    fn finetune_requires_exactly_one_appended_category() {
        let ds = synth_blobs(3, 10, 6, 0.2, 5.0, 5).expect("synth");
        let state = train_initial(&ds, &TrainConfig::default()).expect("train");
        let newcomers = vec![FeatureSample::new(900, CategoryId(9), vec![0.0; 6])];
        // No expansion happened: n_categories == n_initial.
        assert!(incremental_finetune(
            &state,
            &newcomers,
            &ds,
            &TrainConfig::default(),
            1,
            true
        )
        .is_err());
    }

    #[test]
    fn session_incorporates_categories_and_logs_them() {
        let ds = synth_blobs(6, 20, 8, 0.1, 10.0, 3).expect("synth");
        let split = make_open_split(&ds, 3, 0.8, 7).expect("split");
        let log = run_open_world(&split, &quick_cfg()).expect("session");

        assert!(
            !log.iterations.is_empty(),
            "well-separated pool categories must be discovered"
        );
        assert_eq!(log.initial.unknown_correct, 0);
        for (i, record) in log.iterations.iter().enumerate() {
            assert_eq!(record.iteration, i + 1);
            assert_eq!(record.assigned, CategoryId(4 + i as u32));
            assert!(
                record.training_sample_ids.len() <= 4,
                "group size stays within the per-category budget"
            );
            assert!(!record.training_sample_ids.is_empty());
        }
        assert_eq!(
            log.labels_issued,
            log.iterations
                .iter()
                .map(|r| r.teacher_labels_used)
                .sum::<u64>()
        );
    }

    #[test]
    fn session_with_empty_pool_stops_at_the_initial_snapshot() {
        let ds = synth_blobs(4, 10, 6, 0.1, 8.0, 3).expect("synth");
        let split = make_open_split(&ds, 4, 0.8, 7).expect("split");
        let log = run_open_world(&split, &quick_cfg()).expect("session");
        assert!(log.iterations.is_empty());
        assert_eq!(log.termination, TerminationReason::PoolExhausted);
        assert_eq!(log.labels_issued, 0);
        assert_eq!(
            log.initial.unknown_total, 0,
            "nothing was held out, so the unknown side is empty"
        );
    }

    #[test]
    fn session_log_is_reproducible() {
        let ds = synth_blobs(5, 16, 6, 0.1, 8.0, 4).expect("synth");
        let split = make_open_split(&ds, 3, 0.75, 2).expect("split");
        let cfg = quick_cfg();
        let a = run_open_world(&split, &cfg).expect("session");
        let b = run_open_world(&split, &cfg).expect("session");
        assert_eq!(
            a.to_json_string().expect("json"),
            b.to_json_string().expect("json"),
            "same split and config must give a byte-identical log"
        );
    }

    #[test]
    fn replay_reproduces_the_recorded_session() {
        let ds = synth_blobs(5, 16, 6, 0.1, 8.0, 4).expect("synth");
        let split = make_open_split(&ds, 3, 0.75, 2).expect("split");
        let cfg = quick_cfg();
        let log = run_open_world(&split, &cfg).expect("session");
        let script: Vec<IterationScript> = log
            .iterations
            .iter()
            .map(|r| IterationScript {
                truth: r.truth,
                sample_ids: r.training_sample_ids.clone(),
            })
            .collect();
        let replayed = replay_session(&split, &cfg, &script).expect("replay");
        assert_eq!(replayed.len(), log.iterations.len());
        for (record, metrics) in log.iterations.iter().zip(&replayed) {
            assert_eq!(
                &record.metrics, metrics,
                "replay with the same config must match iteration {}",
                record.iteration
            );
        }
    }
}
