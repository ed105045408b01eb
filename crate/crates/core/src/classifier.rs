//! Linear-softmax classification layer.
//!
//! The layer scores a feature vector `x` as `v_i = w_i . x + b_i` for each
//! category `i` and trains with plain mini-batch SGD on cross-entropy plus an
//! L2 penalty on the weights (never the biases). States are immutable values:
//! every operation returns a new `ClassifierState`, which keeps session
//! snapshots and equality checks trivial.
//!
//! Two operations support category growth:
//!
//! * [`emphasis_init`] builds the weight column for a new category as a blend
//!   of the mean existing column and the mean over the columns that respond
//!   most strongly to the new category's samples.
//! * [`allometry_factors`] scales per-column learning rates so established
//!   columns move at a tenth of the rate of newly added ones, letting the new
//!   category settle in without eroding what the old ones learned.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{CategoryId, Dataset, FeatureSample};
use crate::error::{Error, Result};

/// Learning-rate scale applied to columns that existed before the most
/// recent expansion.
pub const ESTABLISHED_COLUMN_RATE: f64 = 0.1;

// ---------------------------------------------------------------------------
// State
// ---------------------------------------------------------------------------

/// Weights and biases of the classification layer.
///
/// `weights[i]` is the column for category `i+1` (labels are 1-based, columns
/// 0-based). `n_initial` records how many categories existed before the most
/// recent expansion; columns at or below that index are treated as
/// established during fine-tuning.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierState {
    dim: usize,
    n_initial: usize,
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

impl ClassifierState {
    /// Zero-initialized layer over `n_categories` categories.
    pub fn zeros(dim: usize, n_categories: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if n_categories == 0 {
            return Err(Error::Config("need at least one category".into()));
        }
        Ok(ClassifierState {
            dim,
            n_initial: n_categories,
            weights: vec![vec![0.0; dim]; n_categories],
            biases: vec![0.0; n_categories],
        })
    }

    pub fn from_parts(
        dim: usize,
        n_initial: usize,
        weights: Vec<Vec<f64>>,
        biases: Vec<f64>,
    ) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        if weights.is_empty() {
            return Err(Error::Config("need at least one category".into()));
        }
        if biases.len() != weights.len() {
            return Err(Error::Shape(format!(
                "{} weight columns but {} biases",
                weights.len(),
                biases.len()
            )));
        }
        if n_initial > weights.len() {
            return Err(Error::Config(format!(
                "n_initial {} exceeds category count {}",
                n_initial,
                weights.len()
            )));
        }
        for (i, col) in weights.iter().enumerate() {
            if col.len() != dim {
                return Err(Error::Shape(format!(
                    "weight column {} has length {}, expected {}",
                    i,
                    col.len(),
                    dim
                )));
            }
            if col.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!("weight column {i} is not finite")));
            }
        }
        if biases.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric("biases are not finite".into()));
        }
        Ok(ClassifierState {
            dim,
            n_initial,
            weights,
            biases,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn n_categories(&self) -> usize {
        self.weights.len()
    }

    /// Category count before the most recent expansion.
    pub fn n_initial(&self) -> usize {
        self.n_initial
    }

    pub fn weights(&self) -> &[Vec<f64>] {
        &self.weights
    }

    pub fn biases(&self) -> &[f64] {
        &self.biases
    }

    pub fn weight_column(&self, col: usize) -> &[f64] {
        &self.weights[col]
    }

    /// Pre-softmax scores `v_i = w_i . x + b_i`.
    pub fn activations(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.dim {
            return Err(Error::Shape(format!(
                "input has {} features, layer expects {}",
                x.len(),
                self.dim
            )));
        }
        Ok(self
            .weights
            .iter()
            .zip(&self.biases)
            .map(|(w, b)| w.iter().zip(x).map(|(wi, xi)| wi * xi).sum::<f64>() + b)
            .collect())
    }

    /// Predicted label: 1-based argmax of the activations, ties resolved to
    /// the smallest index.
    pub fn predict(&self, x: &[f64]) -> Result<CategoryId> {
        let v = self.activations(x)?;
        Ok(CategoryId::from_column(argmax(&v)))
    }
}

/// Index of the largest entry, ties resolved to the smallest index.
/// Callers guarantee `v` is nonempty and finite.
pub(crate) fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Numerically stable softmax: shifts by the maximum before exponentiating.
pub fn softmax(v: &[f64]) -> Result<Vec<f64>> {
    if v.is_empty() {
        return Err(Error::Shape("softmax of an empty vector".into()));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("softmax input is not finite".into()));
    }
    let max = v[argmax(v)];
    let exps: Vec<f64> = v.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    Ok(exps.iter().map(|e| e / total).collect())
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Hyperparameters for one SGD run. `seed` drives the per-epoch shuffle.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub l2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.05,
            epochs: 40,
            batch_size: 16,
            l2: 1e-4,
            seed: 13,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.l2.is_finite() && self.l2 >= 0.0) {
            return Err(Error::Config("l2 must be non-negative".into()));
        }
        Ok(())
    }
}

/// Mean gradient of cross-entropy plus L2 over one batch.
#[derive(Clone, Debug)]
pub struct BatchGradient {
    pub d_weights: Vec<Vec<f64>>,
    pub d_biases: Vec<f64>,
}

fn target_column(state: &ClassifierState, s: &FeatureSample) -> Result<usize> {
    match s.true_label.column() {
        Some(col) if col < state.n_categories() => Ok(col),
        _ => Err(Error::Protocol(format!(
            "sample {} has label {} outside the trained range 1..={}",
            s.id,
            s.true_label,
            state.n_categories()
        ))),
    }
}

/// Gradient of `mean(cross_entropy) + (l2/2) * ||W||^2` at `state`.
///
/// Per sample the cross-entropy gradient for column `j` is
/// `(softmax(v)_j - [j == y]) * x` for the weights and the same coefficient
/// for the bias. The L2 term touches weights only.
pub fn batch_gradient(
    state: &ClassifierState,
    batch: &[&FeatureSample],
    l2: f64,
) -> Result<BatchGradient> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let k = state.n_categories();
    let mut d_weights = vec![vec![0.0; state.dim]; k];
    let mut d_biases = vec![0.0; k];
    for s in batch {
        let y = target_column(state, s)?;
        let p = softmax(&state.activations(&s.features)?)?;
        for j in 0..k {
            let coef = p[j] - if j == y { 1.0 } else { 0.0 };
            for (dw, x) in d_weights[j].iter_mut().zip(&s.features) {
                *dw += coef * x;
            }
            d_biases[j] += coef;
        }
    }
    let scale = 1.0 / batch.len() as f64;
    for j in 0..k {
        for (dw, w) in d_weights[j].iter_mut().zip(&state.weights[j]) {
            *dw = *dw * scale + l2 * w;
        }
        d_biases[j] *= scale;
    }
    Ok(BatchGradient {
        d_weights,
        d_biases,
    })
}

/// Loss matching [`batch_gradient`]: mean cross-entropy plus `(l2/2)` times
/// the squared weight norm.
pub fn batch_loss(state: &ClassifierState, batch: &[&FeatureSample], l2: f64) -> Result<f64> {
    if batch.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let mut ce = 0.0;
    for s in batch {
        let y = target_column(state, s)?;
        let p = softmax(&state.activations(&s.features)?)?;
        ce -= p[y].ln();
    }
    ce /= batch.len() as f64;
    let sq: f64 = state
        .weights
        .iter()
        .flat_map(|col| col.iter())
        .map(|w| w * w)
        .sum();
    Ok(ce + 0.5 * l2 * sq)
}

// ---------------------------------------------------------------------------
// Allometric update
// ---------------------------------------------------------------------------

/// Per-column learning-rate scales for fine-tuning after an expansion:
/// established columns get [`ESTABLISHED_COLUMN_RATE`], new ones `1.0`.
#[derive(Clone, Debug, PartialEq)]
pub struct AllometryFactors {
    per_column: Vec<f64>,
}

impl AllometryFactors {
    pub fn as_slice(&self) -> &[f64] {
        &self.per_column
    }

    /// Factors of `1.0` everywhere: plain SGD over `n_categories` columns.
    pub fn neutral(n_categories: usize) -> Self {
        AllometryFactors {
            per_column: vec![1.0; n_categories],
        }
    }
}

/// Scale vector over `n_categories` columns where the first `n_initial`
/// (the established categories) receive [`ESTABLISHED_COLUMN_RATE`] and the
/// rest receive `1.0`.
pub fn allometry_factors(n_initial: usize, n_categories: usize) -> Result<AllometryFactors> {
    if n_categories == 0 {
        return Err(Error::Config("need at least one category".into()));
    }
    if n_initial > n_categories {
        return Err(Error::Config(format!(
            "n_initial {n_initial} exceeds category count {n_categories}"
        )));
    }
    let per_column = (0..n_categories)
        .map(|i| {
            if i < n_initial {
                ESTABLISHED_COLUMN_RATE
            } else {
                1.0
            }
        })
        .collect();
    Ok(AllometryFactors { per_column })
}

/// One SGD step with per-column scaling. The update applied to column `j` is
/// `factor_j * (learning_rate * gradient)`, with the factor multiplied last:
/// a column with factor `f` moves exactly `f` times the plain-SGD step, down
/// to the final rounding.
pub fn sgd_step_allometric(
    state: &ClassifierState,
    batch: &[&FeatureSample],
    cfg: &TrainConfig,
    factors: &AllometryFactors,
) -> Result<ClassifierState> {
    cfg.validate()?;
    if factors.per_column.len() != state.n_categories() {
        return Err(Error::Shape(format!(
            "{} factors for {} columns",
            factors.per_column.len(),
            state.n_categories()
        )));
    }
    let g = batch_gradient(state, batch, cfg.l2)?;
    let mut next = state.clone();
    for (j, factor) in factors.per_column.iter().enumerate() {
        for (w, dw) in next.weights[j].iter_mut().zip(&g.d_weights[j]) {
            *w -= factor * (cfg.learning_rate * dw);
        }
        next.biases[j] -= factor * (cfg.learning_rate * g.d_biases[j]);
    }
    Ok(next)
}

/// Runs `cfg.epochs` passes of shuffled mini-batch SGD over `samples`,
/// applying `factors` at every step.
pub(crate) fn run_epochs(
    state: &ClassifierState,
    samples: &[&FeatureSample],
    cfg: &TrainConfig,
    factors: &AllometryFactors,
) -> Result<ClassifierState> {
    if samples.is_empty() {
        return Err(Error::Config("no training samples".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut state = state.clone();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&FeatureSample> = chunk.iter().map(|&i| samples[i]).collect();
            state = sgd_step_allometric(&state, &batch, cfg, factors)?;
        }
    }
    Ok(state)
}

/// Trains a fresh zero-initialized layer on `ds`, whose labels must be
/// exactly `1..=N` for some `N`. Deterministic for a fixed config.
pub fn train_initial(ds: &Dataset, cfg: &TrainConfig) -> Result<ClassifierState> {
    cfg.validate()?;
    if ds.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let labels = ds.labels();
    let n = labels.len();
    let contiguous = labels
        .iter()
        .enumerate()
        .all(|(i, l)| *l == CategoryId(i as u32 + 1));
    if !contiguous {
        return Err(Error::Protocol(format!(
            "training labels must be exactly 1..={n}, found {labels:?}"
        )));
    }
    let state = ClassifierState::zeros(ds.dim(), n)?;
    let refs: Vec<&FeatureSample> = ds.samples().iter().collect();
    run_epochs(&state, &refs, cfg, &AllometryFactors::neutral(n))
}

// ---------------------------------------------------------------------------
// Expansion
// ---------------------------------------------------------------------------

/// Weight column and bias for a category about to be appended.
///
/// Both blend the mean over all existing columns with the mean over the `m`
/// columns responding most strongly to the new category:
///
/// `w_new = alpha * mean(all columns) + beta * mean(top-m columns)`
///
/// `mean_activation[i]` is the mean pre-softmax activation of column `i` over
/// the new category's labeled samples; the top-`m` set resolves ties toward
/// the smallest index. With `alpha = 1, beta = 0` this reduces to the plain
/// mean column.
pub fn emphasis_init(
    state: &ClassifierState,
    mean_activation: &[f64],
    m: usize,
    alpha: f64,
    beta: f64,
) -> Result<(Vec<f64>, f64)> {
    let k = state.n_categories();
    if mean_activation.len() != k {
        return Err(Error::Shape(format!(
            "{} mean activations for {} categories",
            mean_activation.len(),
            k
        )));
    }
    if mean_activation.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("mean activations are not finite".into()));
    }
    if m == 0 || m > k {
        return Err(Error::Config(format!(
            "m must lie in 1..={k}, got {m}"
        )));
    }
    if !alpha.is_finite() || !beta.is_finite() {
        return Err(Error::Config("alpha and beta must be finite".into()));
    }

    // Top-m columns by mean activation, descending value with ties toward
    // the smaller index; summed in ascending index order for determinism.
    let mut ranked: Vec<usize> = (0..k).collect();
    ranked.sort_by(|&a, &b| {
        mean_activation[b]
            .partial_cmp(&mean_activation[a])
            .expect("finite activations compare")
            .then(a.cmp(&b))
    });
    let mut top: Vec<usize> = ranked[..m].to_vec();
    top.sort_unstable();

    let mut column = vec![0.0; state.dim()];
    let mut all_sum = vec![0.0; state.dim()];
    let mut top_sum = vec![0.0; state.dim()];
    for j in 0..k {
        for (acc, w) in all_sum.iter_mut().zip(&state.weights[j]) {
            *acc += w;
        }
    }
    for &j in &top {
        for (acc, w) in top_sum.iter_mut().zip(&state.weights[j]) {
            *acc += w;
        }
    }
    for (i, c) in column.iter_mut().enumerate() {
        *c = alpha * (all_sum[i] / k as f64) + beta * (top_sum[i] / m as f64);
    }

    let all_bias: f64 = state.biases.iter().sum();
    let top_bias: f64 = top.iter().map(|&j| state.biases[j]).sum();
    let bias = alpha * (all_bias / k as f64) + beta * (top_bias / m as f64);

    Ok((column, bias))
}

/// Appends a category column. The existing columns and biases are carried
/// over untouched, and `n_initial` resets to the pre-expansion category
/// count so the next fine-tune treats them all as established.
pub fn expand(state: &ClassifierState, column: Vec<f64>, bias: f64) -> Result<ClassifierState> {
    if column.len() != state.dim {
        return Err(Error::Shape(format!(
            "new column has length {}, layer dimension is {}",
            column.len(),
            state.dim
        )));
    }
    if column.iter().any(|v| !v.is_finite()) || !bias.is_finite() {
        return Err(Error::Numeric("new column is not finite".into()));
    }
    let mut next = state.clone();
    next.n_initial = state.n_categories();
    next.weights.push(column);
    next.biases.push(bias);
    Ok(next)
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CheckpointFile {
    version: u32,
    dim: usize,
    n_categories: usize,
    n_initial: usize,
    weights: Vec<Vec<f64>>,
    biases: Vec<f64>,
}

const CHECKPOINT_VERSION: u32 = 1;

/// Writes the layer as versioned JSON. Floats survive the round-trip exactly.
pub fn save_checkpoint(state: &ClassifierState, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = CheckpointFile {
        version: CHECKPOINT_VERSION,
        dim: state.dim,
        n_categories: state.n_categories(),
        n_initial: state.n_initial,
        weights: state.weights.clone(),
        biases: state.biases.clone(),
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<ClassifierState> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: CheckpointFile = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if file.version != CHECKPOINT_VERSION {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!(
                "unsupported version {} (expected {})",
                file.version, CHECKPOINT_VERSION
            ),
        });
    }
    if file.weights.len() != file.n_categories {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!(
                "{} weight columns but n_categories is {}",
                file.weights.len(),
                file.n_categories
            ),
        });
    }
    ClassifierState::from_parts(file.dim, file.n_initial, file.weights, file.biases)
}

// ---------------------------------------------------------------------------
