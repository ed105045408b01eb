//! Per-category confidence thresholds and the unknown-detection cascade.
//!
//! Calibration inspects the training samples the classifier already gets
//! right and records, per category:
//!
//! * `eta`: mean top confidence over those samples (the accept bar),
//! * `mu = epsilon * eta`: a scaled-down floor under which nothing is
//!   trusted,
//! * `delta`: scaled mean margin between the top and second confidence
//!   (the ambiguity bar).
//!
//! Detection walks four rules in order and always lands on exactly one:
//! accept a clear top score, reject a vector that clears no floor, then
//! settle the middle band by margin. Categories with no correctly
//! classified calibration samples are flagged and never accept.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, softmax, ClassifierState};
use crate::dataset::{CategoryId, Dataset};
use crate::error::{Error, Result};

/// Which confidence the thresholds are calibrated against.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ConfidenceMode {
    /// Raw pre-softmax activations.
    Activation,
    /// Softmax probabilities.
    Softmax,
}

/// Confidence vector for `x` under `mode`.
pub fn confidence_vector(
    state: &ClassifierState,
    x: &[f64],
    mode: ConfidenceMode,
) -> Result<Vec<f64>> {
    let v = state.activations(x)?;
    match mode {
        ConfidenceMode::Activation => Ok(v),
        ConfidenceMode::Softmax => softmax(&v),
    }
}

/// Largest entry after removing one instance of the maximum. With duplicated
/// maxima this is the maximum itself.
pub fn second_max(v: &[f64]) -> Result<f64> {
    if v.len() < 2 {
        return Err(Error::Shape(format!(
            "second_max needs at least 2 entries, got {}",
            v.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("second_max input is not finite".into()));
    }
    let top = argmax(v);
    let mut best = f64::NEG_INFINITY;
    for (i, &x) in v.iter().enumerate() {
        if i != top && x > best {
            best = x;
        }
    }
    Ok(best)
}

// ---------------------------------------------------------------------------
// Triplet table
// ---------------------------------------------------------------------------

/// Calibrated per-category thresholds. Entry `i` belongs to label `i+1`.
#[derive(Clone, Debug, PartialEq)]
pub struct TripletThresholds {
    epsilon: f64,
    rho: f64,
    mode: ConfidenceMode,
    eta: Vec<f64>,
    mu: Vec<f64>,
    delta: Vec<f64>,
    /// Correctly classified calibration samples per category.
    counts: Vec<usize>,
    calibrated: Vec<bool>,
}

impl TripletThresholds {
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        epsilon: f64,
        rho: f64,
        mode: ConfidenceMode,
        eta: Vec<f64>,
        mu: Vec<f64>,
        delta: Vec<f64>,
        counts: Vec<usize>,
        calibrated: Vec<bool>,
    ) -> Result<Self> {
        validate_scales(epsilon, rho)?;
        let k = eta.len();
        if mu.len() != k || delta.len() != k || counts.len() != k || calibrated.len() != k {
            return Err(Error::Shape(
                "threshold vectors must share one length".into(),
            ));
        }
        if k < 2 {
            return Err(Error::Config(
                "thresholds cover at least two categories".into(),
            ));
        }
        for v in eta.iter().chain(mu.iter()).chain(delta.iter()) {
            if !v.is_finite() {
                return Err(Error::Numeric("thresholds must be finite".into()));
            }
        }
        Ok(TripletThresholds {
            epsilon,
            rho,
            mode,
            eta,
            mu,
            delta,
            counts,
            calibrated,
        })
    }

    pub fn len(&self) -> usize {
        self.eta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eta.is_empty()
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn mode(&self) -> ConfidenceMode {
        self.mode
    }

    pub fn eta(&self, col: usize) -> f64 {
        self.eta[col]
    }

    pub fn mu(&self, col: usize) -> f64 {
        self.mu[col]
    }

    pub fn delta(&self, col: usize) -> f64 {
        self.delta[col]
    }

    pub fn count(&self, col: usize) -> usize {
        self.counts[col]
    }

    pub fn is_calibrated(&self, col: usize) -> bool {
        self.calibrated[col]
    }
}

fn validate_scales(epsilon: f64, rho: f64) -> Result<()> {
    if !(epsilon.is_finite() && epsilon > 0.0 && epsilon <= 1.0) {
        return Err(Error::Config(format!(
            "epsilon must lie in (0,1], got {epsilon}"
        )));
    }
    if !(rho.is_finite() && rho > 0.0) {
        return Err(Error::Config(format!("rho must be positive, got {rho}")));
    }
    Ok(())
}

/// Calibrates the triplet table from the samples of `train` that `state`
/// classifies correctly. A category contributing no correct samples is
/// flagged uncalibrated: it keeps zero thresholds, never accepts, and is
/// skipped by the all-below-floor rule.
pub fn calibrate(
    state: &ClassifierState,
    train: &Dataset,
    epsilon: f64,
    rho: f64,
    mode: ConfidenceMode,
) -> Result<TripletThresholds> {
    validate_scales(epsilon, rho)?;
    let k = state.n_categories();
    if k < 2 {
        return Err(Error::Config(
            "calibration needs at least two categories".into(),
        ));
    }
    if train.dim() != state.dim() {
        return Err(Error::Shape(format!(
            "calibration data has dimension {}, layer expects {}",
            train.dim(),
            state.dim()
        )));
    }

    let mut top_sum = vec![0.0; k];
    let mut gap_sum = vec![0.0; k];
    let mut counts = vec![0usize; k];
    for s in train.samples() {
        let y = match s.true_label.column() {
            Some(col) if col < k => col,
            _ => {
                return Err(Error::Protocol(format!(
                    "calibration sample {} has label {} outside 1..={}",
                    s.id, s.true_label, k
                )))
            }
        };
        let v = confidence_vector(state, &s.features, mode)?;
        if argmax(&v) == y {
            top_sum[y] += v[y];
            gap_sum[y] += v[y] - second_max(&v)?;
            counts[y] += 1;
        }
    }

    let mut eta = vec![0.0; k];
    let mut mu = vec![0.0; k];
    let mut delta = vec![0.0; k];
    let mut calibrated = vec![false; k];
    for i in 0..k {
        if counts[i] > 0 {
            let n = counts[i] as f64;
            eta[i] = top_sum[i] / n;
            mu[i] = epsilon * eta[i];
            delta[i] = rho * (gap_sum[i] / n);
            calibrated[i] = true;
        }
    }
    TripletThresholds::from_parts(epsilon, rho, mode, eta, mu, delta, counts, calibrated)
}

// ---------------------------------------------------------------------------
// Detection
// ---------------------------------------------------------------------------

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Verdict {
    Known(CategoryId),
    Unknown,
}

impl Verdict {
    pub fn is_unknown(self) -> bool {
        self == Verdict::Unknown
    }
}

/// Which cascade rule settled the verdict.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionRule {
    /// Top confidence clears its category's accept bar.
    AcceptTop,
    /// Every calibrated category sits below its floor.
    RejectAllBelowMu,
    /// Mid-band top confidence with a wide enough margin.
    DistanceAccept,
    /// Mid-band top confidence, margin too narrow.
    DistanceReject,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DetectionOutcome {
    pub verdict: Verdict,
    pub rule: DetectionRule,
}

/// Runs the four-rule cascade over a confidence vector. Exactly one rule
/// fires for every finite input; ties at the top resolve to the smallest
/// index.
pub fn detect(v: &[f64], t: &TripletThresholds) -> Result<DetectionOutcome> {
    if v.len() != t.len() {
        return Err(Error::Shape(format!(
            "confidence vector has {} entries, thresholds cover {}",
            v.len(),
            t.len()
        )));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric("confidence vector is not finite".into()));
    }

    let l = argmax(v);

    if t.calibrated[l] && v[l] > t.eta[l] {
        return Ok(DetectionOutcome {
            verdict: Verdict::Known(CategoryId::from_column(l)),
            rule: DetectionRule::AcceptTop,
        });
    }

    let all_below_floor = (0..t.len())
        .filter(|&i| t.calibrated[i])
        .all(|i| v[i] < t.mu[i]);
    if all_below_floor {
        return Ok(DetectionOutcome {
            verdict: Verdict::Unknown,
            rule: DetectionRule::RejectAllBelowMu,
        });
    }

    if t.calibrated[l] && t.mu[l] <= v[l] && v[l] <= t.eta[l] {
        let margin = v[l] - second_max(v)?;
        if margin > t.delta[l] {
            return Ok(DetectionOutcome {
                verdict: Verdict::Known(CategoryId::from_column(l)),
                rule: DetectionRule::DistanceAccept,
            });
        }
    }

    Ok(DetectionOutcome {
        verdict: Verdict::Unknown,
        rule: DetectionRule::DistanceReject,
    })
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct CategoryEntry {
    id: u32,
    eta: f64,
    mu: f64,
    delta: f64,
    count: usize,
    calibrated: bool,
}

#[derive(Serialize, Deserialize)]
struct ThresholdsFile {
    version: u32,
    epsilon: f64,
    rho: f64,
    mode: ConfidenceMode,
    per_category: Vec<CategoryEntry>,
}

const THRESHOLDS_VERSION: u32 = 1;

pub fn save_thresholds(t: &TripletThresholds, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let file = ThresholdsFile {
        version: THRESHOLDS_VERSION,
        epsilon: t.epsilon,
        rho: t.rho,
        mode: t.mode,
        per_category: (0..t.len())
            .map(|i| CategoryEntry {
                id: i as u32 + 1,
                eta: t.eta[i],
                mu: t.mu[i],
                delta: t.delta[i],
                count: t.counts[i],
                calibrated: t.calibrated[i],
            })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&file).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn load_thresholds(path: impl AsRef<Path>) -> Result<TripletThresholds> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: ThresholdsFile = serde_json::from_str(&text).map_err(|e| Error::Checkpoint {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if file.version != THRESHOLDS_VERSION {
        return Err(Error::Checkpoint {
            path: path.to_path_buf(),
            message: format!(
                "unsupported version {} (expected {})",
                file.version, THRESHOLDS_VERSION
            ),
        });
    }
    for (i, e) in file.per_category.iter().enumerate() {
        if e.id != i as u32 + 1 {
            return Err(Error::Checkpoint {
                path: path.to_path_buf(),
                message: format!("entry {} has id {}, expected {}", i, e.id, i + 1),
            });
        }
    }
    TripletThresholds::from_parts(
        file.epsilon,
        file.rho,
        file.mode,
        file.per_category.iter().map(|e| e.eta).collect(),
        file.per_category.iter().map(|e| e.mu).collect(),
        file.per_category.iter().map(|e| e.delta).collect(),
        file.per_category.iter().map(|e| e.count).collect(),
        file.per_category.iter().map(|e| e.calibrated).collect(),
    )
}

// ---------------------------------------------------------------------------

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::FeatureSample;

    #[test]
    fn second_max_skips_one_instance_of_the_top() {
        assert_eq!(second_max(&[3.0, 1.0, 2.0]).unwrap(), 2.0);
        assert_eq!(second_max(&[1.0, 4.0]).unwrap(), 1.0);
        assert_eq!(
            second_max(&[5.0, 5.0, 1.0]).unwrap(),
            5.0,
            "a duplicated maximum is its own runner-up"
        );
        assert!(second_max(&[1.0]).is_err());
        assert!(second_max(&[1.0, f64::NAN]).is_err());
    }

    fn diag_state() -> ClassifierState {
        // Activations reproduce the input coordinates.
        ClassifierState::from_parts(2, 2, vec![vec![1.0, 0.0], vec![0.0, 1.0]], vec![0.0, 0.0])
            .expect("state")
    }

    fn labeled(id: u64, label: u32, features: Vec<f64>) -> FeatureSample {
        FeatureSample::new(id, CategoryId(label), features)
    }

    #[test]
    fn calibrate_averages_top_confidence_and_margin() {
        let state = diag_state();
        let ds = Dataset::new(
            2,
            vec![
                labeled(0, 1, vec![2.0, 0.5]),
                labeled(1, 1, vec![3.0, 1.5]),
                // Misclassified: argmax is category 2, so this sample must
                // not contribute to category 1's statistics.
                labeled(2, 1, vec![0.0, 5.0]),
                labeled(3, 2, vec![0.2, 4.0]),
            ],
        )
        .expect("dataset");
        let t = calibrate(&state, &ds, 0.5, 0.5, ConfidenceMode::Activation).expect("calibrate");

        assert_eq!(t.count(0), 2);
        assert_eq!(t.eta(0), 2.5, "mean of top confidences 2.0 and 3.0");
        assert_eq!(t.mu(0), 1.25);
        assert_eq!(t.delta(0), 0.75, "half the mean margin (1.5 + 1.5) / 2");
        assert!(t.is_calibrated(0));

        assert_eq!(t.count(1), 1);
        assert_eq!(t.eta(1), 4.0);
        assert!(t.is_calibrated(1));
    }

    #[test]
    fn calibrate_floor_is_exactly_scaled_accept_bar() {
        let state = diag_state();
        let ds = Dataset::new(
            2,
            vec![
                labeled(0, 1, vec![2.3, 0.1]),
                labeled(1, 1, vec![2.9, 1.1]),
                labeled(2, 2, vec![0.3, 1.7]),
            ],
        )
        .expect("dataset");
        let eps = 0.37;
        let t = calibrate(&state, &ds, eps, 0.5, ConfidenceMode::Activation).expect("calibrate");
        for i in 0..t.len() {
            assert_eq!(
                t.mu(i).to_bits(),
                (eps * t.eta(i)).to_bits(),
                "category {}: floor must be epsilon * eta down to the bit",
                i + 1
            );
        }
    }

    #[test]
    fn calibrate_flags_category_without_correct_samples() {
        let state = diag_state();
        // Every category-2 sample lands on category 1.
        let ds = Dataset::new(
            2,
            vec![
                labeled(0, 1, vec![3.0, 0.0]),
                labeled(1, 2, vec![5.0, 0.1]),
            ],
        )
        .expect("dataset");
        let t = calibrate(&state, &ds, 0.5, 0.5, ConfidenceMode::Activation).expect("calibrate");
        assert!(t.is_calibrated(0));
        assert!(!t.is_calibrated(1));
        assert_eq!(t.count(1), 0);
        assert_eq!(t.eta(1), 0.0);
    }

    #[test]
    fn calibrate_validates_scales_and_labels() {
        let state = diag_state();
        let ds = Dataset::new(2, vec![labeled(0, 1, vec![1.0, 0.0])]).expect("dataset");
        assert!(calibrate(&state, &ds, 0.0, 0.5, ConfidenceMode::Activation).is_err());
        assert!(calibrate(&state, &ds, 1.5, 0.5, ConfidenceMode::Activation).is_err());
        assert!(calibrate(&state, &ds, 0.5, 0.0, ConfidenceMode::Activation).is_err());

        let bad = Dataset::new(2, vec![labeled(0, 3, vec![1.0, 0.0])]).expect("dataset");
        assert!(calibrate(&state, &bad, 0.5, 0.5, ConfidenceMode::Activation).is_err());
    }

    #[test]
    fn softmax_mode_calibrates_probabilities() {
        let state = diag_state();
        let ds = Dataset::new(
            2,
            vec![
                labeled(0, 1, vec![2.0, 0.0]),
                labeled(1, 2, vec![0.0, 2.0]),
            ],
        )
        .expect("dataset");
        let t = calibrate(&state, &ds, 0.5, 0.5, ConfidenceMode::Softmax).expect("calibrate");
        for i in 0..2 {
            assert!(t.eta(i) > 0.5 && t.eta(i) < 1.0, "eta {} = {}", i, t.eta(i));
        }
    }

    /// Thresholds with category 1 calibrated at eta 2.5, mu 1.25, delta 0.75
    /// and category 2 as given.
    fn table(second_calibrated: bool) -> TripletThresholds {
        TripletThresholds::from_parts(
            0.5,
            0.5,
            ConfidenceMode::Activation,
            vec![2.5, if second_calibrated { 4.0 } else { 0.0 }],
            vec![1.25, if second_calibrated { 2.0 } else { 0.0 }],
            vec![0.75, if second_calibrated { 1.0 } else { 0.0 }],
            vec![2, usize::from(second_calibrated)],
            vec![true, second_calibrated],
        )
        .expect("thresholds")
    }

    #[test]
    fn cascade_accepts_clear_top_confidence() {
        let out = detect(&[3.0, 0.1], &table(false)).expect("detect");
        assert_eq!(out.verdict, Verdict::Known(CategoryId(1)));
        assert_eq!(out.rule, DetectionRule::AcceptTop);
    }

    #[test]
    fn cascade_rejects_when_everything_is_below_floor() {
        let out = detect(&[1.0, 1.0], &table(false)).expect("detect");
        assert_eq!(out.verdict, Verdict::Unknown);
        assert_eq!(out.rule, DetectionRule::RejectAllBelowMu);
    }

    #[test]
    fn cascade_settles_mid_band_by_margin() {
        let accept = detect(&[2.0, 0.5], &table(false)).expect("detect");
        assert_eq!(accept.verdict, Verdict::Known(CategoryId(1)));
        assert_eq!(accept.rule, DetectionRule::DistanceAccept);

        let reject = detect(&[2.0, 1.6], &table(false)).expect("detect");
        assert_eq!(reject.verdict, Verdict::Unknown);
        assert_eq!(reject.rule, DetectionRule::DistanceReject);
    }

    #[test]
    fn cascade_band_edges_belong_to_the_margin_rules() {
        // Exactly at eta: rule 1 needs a strict inequality, so the margin
        // rules take over.
        let out = detect(&[2.5, 0.1], &table(false)).expect("detect");
        assert_eq!(out.rule, DetectionRule::DistanceAccept);
        // Exactly at mu with a wide margin: inside the band.
        let out = detect(&[1.25, -2.0], &table(false)).expect("detect");
        assert_eq!(out.rule, DetectionRule::DistanceAccept);
        // Margin exactly at delta does not accept.
        let out = detect(&[2.0, 1.25], &table(false)).expect("detect");
        assert_eq!(out.rule, DetectionRule::DistanceReject);
        assert_eq!(out.verdict, Verdict::Unknown);
    }

    #[test]
    fn cascade_never_accepts_an_uncalibrated_category() {
        // Argmax lands on uncalibrated category 2 with a huge score; the
        // floor rule does not fire because calibrated category 1 is above
        // its floor.
        let out = detect(&[1.3, 100.0], &table(false)).expect("detect");
        assert_eq!(out.verdict, Verdict::Unknown);
        assert_eq!(out.rule, DetectionRule::DistanceReject);
    }

    #[test]
    fn cascade_floor_rule_skips_uncalibrated_categories() {
        // Category 2 is uncalibrated, so only category 1's floor counts.
        let out = detect(&[1.0, 1.2], &table(false)).expect("detect");
        assert_eq!(out.rule, DetectionRule::RejectAllBelowMu);
    }

    #[test]
    fn cascade_ties_resolve_to_the_smaller_index() {
        let t = table(true);
        // Both categories at 3.0: argmax picks category 1, above its eta.
        let out = detect(&[3.0, 3.0], &t).expect("detect");
        assert_eq!(out.verdict, Verdict::Known(CategoryId(1)));
        assert_eq!(out.rule, DetectionRule::AcceptTop);
    }

    #[test]
    fn detect_validates_input() {
        let t = table(false);
        assert!(detect(&[1.0], &t).is_err());
        assert!(detect(&[1.0, f64::NAN], &t).is_err());
    }

    #[test]
    fn thresholds_round_trip_through_json() {
        let state = diag_state();
        let ds = Dataset::new(
            2,
            vec![
                labeled(0, 1, vec![2.0, 0.5]),
                labeled(1, 1, vec![3.0, 1.5]),
                labeled(2, 2, vec![0.2, 4.0]),
            ],
        )
        .expect("dataset");
        let t = calibrate(&state, &ds, 0.5, 0.5, ConfidenceMode::Activation).expect("calibrate");
        let dir = tempfile::tempdir().expect("tempdir");
        let path = dir.path().join("thresholds.json");
        save_thresholds(&t, &path).expect("save");
        let loaded = load_thresholds(&path).expect("load");
        assert_eq!(t, loaded, "thresholds must round-trip exactly");
    }
}
