//! Batch scoring and detection over sample slices.
//!
//! With the default `parallel` feature these fan out across rayon worker
//! threads; the `*_seq` variants are always available. Both paths visit
//! samples independently and write results in input order, so their outputs
//! are identical bit for bit and everything downstream (metrics, session
//! logs) is the same under either feature setting.

#[cfg(feature = "parallel")]
use rayon::prelude::*;

use crate::classifier::ClassifierState;
use crate::dataset::{CategoryId, FeatureSample};
use crate::error::Result;
use crate::thresholds::{confidence_vector, detect, DetectionOutcome, TripletThresholds};

/// Predicted label per sample, sequential.
pub fn predict_batch_seq(
    state: &ClassifierState,
    samples: &[FeatureSample],
) -> Result<Vec<CategoryId>> {
    samples.iter().map(|s| state.predict(&s.features)).collect()
}

/// Predicted label per sample, in input order.
#[cfg(feature = "parallel")]
pub fn predict_batch(
    state: &ClassifierState,
    samples: &[FeatureSample],
) -> Result<Vec<CategoryId>> {
    samples
        .par_iter()
        .map(|s| state.predict(&s.features))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn predict_batch(
    state: &ClassifierState,
    samples: &[FeatureSample],
) -> Result<Vec<CategoryId>> {
    predict_batch_seq(state, samples)
}

fn detect_one(
    state: &ClassifierState,
    thresholds: &TripletThresholds,
    sample: &FeatureSample,
) -> Result<DetectionOutcome> {
    let v = confidence_vector(state, &sample.features, thresholds.mode())?;
    detect(&v, thresholds)
}

/// Cascade verdict per sample, sequential.
pub fn detect_batch_seq(
    state: &ClassifierState,
    thresholds: &TripletThresholds,
    samples: &[FeatureSample],
) -> Result<Vec<DetectionOutcome>> {
    samples
        .iter()
        .map(|s| detect_one(state, thresholds, s))
        .collect()
}

/// Cascade verdict per sample, in input order.
#[cfg(feature = "parallel")]
pub fn detect_batch(
    state: &ClassifierState,
    thresholds: &TripletThresholds,
    samples: &[FeatureSample],
) -> Result<Vec<DetectionOutcome>> {
    samples
        .par_iter()
        .map(|s| detect_one(state, thresholds, s))
        .collect()
}

#[cfg(not(feature = "parallel"))]
pub fn detect_batch(
    state: &ClassifierState,
    thresholds: &TripletThresholds,
    samples: &[FeatureSample],
) -> Result<Vec<DetectionOutcome>> {
    detect_batch_seq(state, thresholds, samples)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::classifier::{train_initial, TrainConfig};
    use crate::dataset::synth_blobs;
    use crate::thresholds::{calibrate, ConfidenceMode};

    #[test]
    fn parallel_and_sequential_paths_agree_exactly() {
        let ds = synth_blobs(4, 30, 6, 0.4, 5.0, 12).expect("synth");
        let state = train_initial(&ds, &TrainConfig::default()).expect("train");
        let thresholds =
            calibrate(&state, &ds, 0.5, 0.5, ConfidenceMode::Activation).expect("calibrate");

        let probes = synth_blobs(6, 40, 6, 1.5, 4.0, 99).expect("probes");

        let par = predict_batch(&state, probes.samples()).expect("predict");
        let seq = predict_batch_seq(&state, probes.samples()).expect("predict seq");
        assert_eq!(par, seq);

        let par = detect_batch(&state, &thresholds, probes.samples()).expect("detect");
        let seq = detect_batch_seq(&state, &thresholds, probes.samples()).expect("detect seq");
        assert_eq!(par, seq, "both paths must agree outcome for outcome");
    }

    #[test]
    fn batch_results_follow_input_order() {
        let ds = synth_blobs(3, 10, 4, 0.2, 5.0, 3).expect("synth");
        let state = train_initial(&ds, &TrainConfig::default()).expect("train");
        let preds = predict_batch(&state, ds.samples()).expect("predict");
        for (s, p) in ds.samples().iter().zip(&preds) {
            assert_eq!(state.predict(&s.features).expect("predict"), *p);
        }
    }
}
