//! Feature-vector data model: CSV ingestion, synthetic blob generation,
//! open-set splits, and balanced subsampling.
//!
//! Every operation here is deterministic: randomized steps take an explicit
//! seed and iteration orders are fixed (sorted label order, stored sample
//! order), so repeated calls with equal inputs produce bitwise-equal output.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

// ---------------------------------------------------------------------------
// Labels and samples
// ---------------------------------------------------------------------------

/// Category label. Zero is reserved for "unknown"; known categories are
/// positive integers. A classifier over N categories uses labels `1..=N`.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct CategoryId(pub u32);

impl CategoryId {
    pub const UNKNOWN: CategoryId = CategoryId(0);

    pub fn is_unknown(self) -> bool {
        self.0 == 0
    }

    /// Zero-based classifier column for a known label, `None` for unknown.
    pub fn column(self) -> Option<usize> {
        if self.0 == 0 {
            None
        } else {
            Some(self.0 as usize - 1)
        }
    }

    /// Label for the zero-based classifier column `col`.
    pub fn from_column(col: usize) -> CategoryId {
        CategoryId(col as u32 + 1)
    }
}

impl fmt::Debug for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "CategoryId({})", self.0)
    }
}

impl fmt::Display for CategoryId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// One labeled feature vector. `id` is unique within a dataset and stable
/// across splits, so downstream bookkeeping (teacher labels, leakage checks)
/// can track individual samples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureSample {
    pub id: u64,
    pub true_label: CategoryId,
    pub features: Vec<f64>,
}

impl FeatureSample {
    pub fn new(id: u64, true_label: CategoryId, features: Vec<f64>) -> Self {
        FeatureSample {
            id,
            true_label,
            features,
        }
    }
}

// ---------------------------------------------------------------------------
// Dataset
// ---------------------------------------------------------------------------

/// An ordered collection of samples sharing one feature dimension.
///
/// Construction validates that every feature value is finite, every sample
/// has the declared dimension, and ids are unique. A label index is kept so
/// per-category access does not rescan the sample list.
#[derive(Clone, Debug)]
pub struct Dataset {
    dim: usize,
    samples: Vec<FeatureSample>,
    by_label: BTreeMap<CategoryId, Vec<usize>>,
}

impl Dataset {
    pub fn new(dim: usize, samples: Vec<FeatureSample>) -> Result<Self> {
        if dim == 0 {
            return Err(Error::Config("feature dimension must be positive".into()));
        }
        let mut seen = BTreeSet::new();
        for s in &samples {
            if s.features.len() != dim {
                return Err(Error::Shape(format!(
                    "sample {} has {} features, dataset dimension is {}",
                    s.id,
                    s.features.len(),
                    dim
                )));
            }
            if let Some(bad) = s.features.iter().find(|v| !v.is_finite()) {
                return Err(Error::Numeric(format!(
                    "sample {} contains non-finite feature {}",
                    s.id, bad
                )));
            }
            if !seen.insert(s.id) {
                return Err(Error::Config(format!("duplicate sample id {}", s.id)));
            }
        }
        let mut by_label: BTreeMap<CategoryId, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_label.entry(s.true_label).or_default().push(i);
        }
        Ok(Dataset {
            dim,
            samples,
            by_label,
        })
    }

    pub fn empty(dim: usize) -> Result<Self> {
        Dataset::new(dim, Vec::new())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn samples(&self) -> &[FeatureSample] {
        &self.samples
    }

    /// Distinct labels in ascending order.
    pub fn labels(&self) -> Vec<CategoryId> {
        self.by_label.keys().copied().collect()
    }

    pub fn count_of(&self, label: CategoryId) -> usize {
        self.by_label.get(&label).map_or(0, Vec::len)
    }

    /// Samples carrying `label`, in stored order.
    pub fn samples_of(&self, label: CategoryId) -> Vec<&FeatureSample> {
        self.by_label
            .get(&label)
            .map(|idx| idx.iter().map(|&i| &self.samples[i]).collect())
            .unwrap_or_default()
    }

    pub fn ids(&self) -> BTreeSet<u64> {
        self.samples.iter().map(|s| s.id).collect()
    }

    /// New dataset with the samples matching `keep`, preserving order.
    pub fn filtered(&self, mut keep: impl FnMut(&FeatureSample) -> bool) -> Dataset {
        let samples: Vec<FeatureSample> = self
            .samples
            .iter()
            .filter(|s| keep(s))
            .cloned()
            .collect();
        // Subset of a validated dataset cannot fail validation.
        Dataset::new(self.dim, samples).expect("filtered subset stays valid")
    }

    /// Concatenation of two datasets with the same dimension. Ids must stay
    /// unique across the union.
    pub fn merged(&self, other: &Dataset) -> Result<Dataset> {
        if self.dim != other.dim {
            return Err(Error::Shape(format!(
                "cannot merge datasets of dimension {} and {}",
                self.dim, other.dim
            )));
        }
        let mut samples = self.samples.clone();
        samples.extend(other.samples.iter().cloned());
        Dataset::new(self.dim, samples)
    }
}

// ---------------------------------------------------------------------------
// CSV ingestion
// ---------------------------------------------------------------------------

/// Formats a float with enough digits that parsing it back is exact.
pub(crate) fn fmt_float(x: f64) -> String {
    format!("{x:.16e}")
}

/// Loads a dataset from CSV. The header must be `label,f0,...,f{d-1}`; every
/// row needs an integer label and `d` finite floats. Sample ids are assigned
/// from row order. Errors name the offending 1-based line.
pub fn load_csv(path: impl AsRef<Path>) -> Result<Dataset> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.lines().enumerate();

    let (_, header) = lines
        .next()
        .ok_or_else(|| Error::parse(path, 1, "missing header"))?;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.first() != Some(&"label") || cols.len() < 2 {
        return Err(Error::parse(
            path,
            1,
            "header must be `label,f0,...` with at least one feature column",
        ));
    }
    let dim = cols.len() - 1;
    for (i, name) in cols[1..].iter().enumerate() {
        if *name != format!("f{i}") {
            return Err(Error::parse(
                path,
                1,
                format!("feature column {} must be named `f{}`, found `{}`", i + 2, i, name),
            ));
        }
    }

    let mut samples = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 1 {
            return Err(Error::parse(
                path,
                lineno,
                format!("expected {} fields, found {}", dim + 1, fields.len()),
            ));
        }
        let label: u32 = fields[0].trim().parse().map_err(|_| {
            Error::parse(path, lineno, format!("label `{}` is not a non-negative integer", fields[0]))
        })?;
        let mut features = Vec::with_capacity(dim);
        for f in &fields[1..] {
            let v: f64 = f.trim().parse().map_err(|_| {
                Error::parse(path, lineno, format!("`{f}` is not a float"))
            })?;
            if !v.is_finite() {
                return Err(Error::parse(path, lineno, format!("non-finite value `{f}`")));
            }
            features.push(v);
        }
        samples.push(FeatureSample::new(
            samples.len() as u64,
            CategoryId(label),
            features,
        ));
    }
    Dataset::new(dim, samples)
}

/// Writes a dataset as CSV with full-precision floats, so a load/save
/// round-trip reproduces the file byte for byte.
pub fn save_csv(ds: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::from("label");
    for i in 0..ds.dim() {
        out.push_str(&format!(",f{i}"));
    }
    out.push('\n');
    for s in ds.samples() {
        out.push_str(&s.true_label.0.to_string());
        for v in &s.features {
            out.push(',');
            out.push_str(&fmt_float(*v));
        }
        out.push('\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Synthetic data
// ---------------------------------------------------------------------------

/// Generates `n_classes * per_class` samples from isotropic Gaussian blobs.
/// Class `c` (1-based) is centered at `separation` times the `c`-th standard
/// basis vector, so `dim >= n_classes` is required and pairwise center
/// distances are all `separation * sqrt(2)`.
pub fn synth_blobs(
    n_classes: usize,
    per_class: usize,
    dim: usize,
    spread: f64,
    separation: f64,
    seed: u64,
) -> Result<Dataset> {
    if n_classes < 2 {
        return Err(Error::Config("need at least 2 classes".into()));
    }
    if per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }
    if dim < n_classes {
        return Err(Error::Config(format!(
            "dimension {dim} is too small for {n_classes} one-hot centers"
        )));
    }
    if !(spread.is_finite() && spread > 0.0) {
        return Err(Error::Config("spread must be a positive float".into()));
    }
    if !(separation.is_finite() && separation > 0.0) {
        return Err(Error::Config("separation must be a positive float".into()));
    }

    let noise = Normal::new(0.0, spread)
        .map_err(|e| Error::Config(format!("invalid noise distribution: {e}")))?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut samples = Vec::with_capacity(n_classes * per_class);
    for class in 1..=n_classes {
        for _ in 0..per_class {
            let mut features = vec![0.0; dim];
            for f in features.iter_mut() {
                *f = noise.sample(&mut rng);
            }
            features[class - 1] += separation;
            samples.push(FeatureSample::new(
                samples.len() as u64,
                CategoryId(class as u32),
                features,
            ));
        }
    }
    Dataset::new(dim, samples)
}

// ---------------------------------------------------------------------------
// Open-set split
// ---------------------------------------------------------------------------

/// Partition of a dataset for an open-set session.
///
/// After the split, known categories are relabeled to `1..=n_known` and
/// held-out categories to `n_known+1..`, both in shuffle order. The pool
/// keeps those relabeled ids as ground truth for the teacher; the initial
/// classifier never sees them.
#[derive(Clone, Debug)]
pub struct OpenSplit {
    pub known_labels: BTreeSet<CategoryId>,
    pub unknown_labels: BTreeSet<CategoryId>,
    /// Training samples of known categories.
    pub train: Dataset,
    /// Held-out test samples of known categories.
    pub known_test: Dataset,
    /// Every sample of the held-out categories.
    pub unknown_pool: Dataset,
    pub seed: u64,
}

/// Splits `ds` into `n_known` known categories and all remaining categories
/// as the unknown pool. See [`make_open_split_with_unknowns`].
pub fn make_open_split(
    ds: &Dataset,
    n_known: usize,
    train_frac: f64,
    seed: u64,
) -> Result<OpenSplit> {
    make_open_split_with_unknowns(ds, n_known, None, train_frac, seed)
}

/// Splits `ds` with an explicit number of held-out categories; `None` takes
/// every label that was not chosen as known. Selection shuffles the distinct
/// labels with the seeded generator, takes the first `n_known` as known and
/// the next `n_unknown` as held out. Known samples are divided per class
/// into train/test by `train_frac` (rounded down, clamped so each class
/// keeps at least one sample on each side).
pub fn make_open_split_with_unknowns(
    ds: &Dataset,
    n_known: usize,
    n_unknown: Option<usize>,
    train_frac: f64,
    seed: u64,
) -> Result<OpenSplit> {
    if n_known == 0 {
        return Err(Error::Config("need at least one known category".into()));
    }
    if !(train_frac > 0.0 && train_frac < 1.0) {
        return Err(Error::Config(format!(
            "train_frac must lie in (0,1), got {train_frac}"
        )));
    }
    // Zero held-out categories is legal: the session then has nothing to
    // discover and stops after the initial snapshot.
    let mut labels = ds.labels();
    let needed = n_known + n_unknown.unwrap_or(0);
    if labels.len() < needed {
        return Err(Error::Config(format!(
            "need at least {} distinct labels, found {}",
            needed,
            labels.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    labels.shuffle(&mut rng);
    let known_orig = &labels[..n_known];
    let n_unk = n_unknown.unwrap_or(labels.len() - n_known);
    let unknown_orig = &labels[n_known..n_known + n_unk];

    let remap: BTreeMap<CategoryId, CategoryId> = known_orig
        .iter()
        .chain(unknown_orig.iter())
        .enumerate()
        .map(|(i, &orig)| (orig, CategoryId(i as u32 + 1)))
        .collect();

    let mut train = Vec::new();
    let mut known_test = Vec::new();
    for &orig in known_orig {
        let new_label = remap[&orig];
        let mut members = ds.samples_of(orig);
        if members.len() < 2 {
            return Err(Error::Config(format!(
                "category {orig} has {} samples; need at least 2 to split",
                members.len()
            )));
        }
        members.shuffle(&mut rng);
        let n_train = ((members.len() as f64 * train_frac).floor() as usize)
            .clamp(1, members.len() - 1);
        for (i, s) in members.into_iter().enumerate() {
            let sample = FeatureSample::new(s.id, new_label, s.features.clone());
            if i < n_train {
                train.push(sample);
            } else {
                known_test.push(sample);
            }
        }
    }

    let unknown_set: BTreeSet<CategoryId> = unknown_orig.iter().copied().collect();
    let pool: Vec<FeatureSample> = ds
        .samples()
        .iter()
        .filter(|s| unknown_set.contains(&s.true_label))
        .map(|s| FeatureSample::new(s.id, remap[&s.true_label], s.features.clone()))
        .collect();

    Ok(OpenSplit {
        known_labels: (1..=n_known as u32).map(CategoryId).collect(),
        unknown_labels: (n_known as u32 + 1..=(n_known + n_unk) as u32)
            .map(CategoryId)
            .collect(),
        train: Dataset::new(ds.dim(), train)?,
        known_test: Dataset::new(ds.dim(), known_test)?,
        unknown_pool: Dataset::new(ds.dim(), pool)?,
        seed,
    })
}

// ---------------------------------------------------------------------------
// Balanced subsampling
// ---------------------------------------------------------------------------

/// Result of [`balanced_subset`]: the drawn samples plus how many were
/// actually taken per label, so callers can see shortfalls.
#[derive(Clone, Debug)]
pub struct BalancedSubset {
    pub data: Dataset,
    pub taken: BTreeMap<CategoryId, usize>,
}

/// Draws up to `per_class` samples for each label in `labels`, without
/// replacement, seeded. Labels are visited in ascending order; a label with
/// fewer than `per_class` samples contributes everything it has. A label
/// absent from `ds` is an error.
pub fn balanced_subset(
    ds: &Dataset,
    labels: &BTreeSet<CategoryId>,
    per_class: usize,
    seed: u64,
) -> Result<BalancedSubset> {
    if per_class == 0 {
        return Err(Error::Config("per_class must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut chosen = Vec::new();
    let mut taken = BTreeMap::new();
    for &label in labels {
        let mut members = ds.samples_of(label);
        if members.is_empty() {
            return Err(Error::Config(format!(
                "category {label} has no samples to draw from"
            )));
        }
        if members.len() > per_class {
            members.shuffle(&mut rng);
            members.truncate(per_class);
        }
        taken.insert(label, members.len());
        chosen.extend(members.into_iter().cloned());
    }
    Ok(BalancedSubset {
        data: Dataset::new(ds.dim(), chosen)?,
        taken,
    })
}

// ---------------------------------------------------------------------------
