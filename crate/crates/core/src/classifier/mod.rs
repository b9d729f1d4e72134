//! Probabilistic human classifier: RBF-kernel SVM trained with SMO and
//! calibrated with a Platt sigmoid, retrained on every accumulated sample.

mod io;
pub mod platt;
pub mod smo;
mod store;

use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::features::{
    apply_scaler, fit_scaler, FeatureError, FeatureScaler, FeatureVector, FEATURE_DIM,
};
use crate::model::{CONFIDENCE_CEIL, CONFIDENCE_FLOOR};
use crate::scalar::{clamp, Scalar};

pub use io::MODEL_MAGIC;
pub use platt::PlattSigmoid;
pub use smo::{RbfKernel, SmoParams, SmoSolution};
pub use store::SampleStore;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClassifierError {
    #[error("training data must contain both classes")]
    SingleClass,
    #[error("all training vectors are identical")]
    DegenerateFeatures,
    #[error(transparent)]
    Feature(#[from] FeatureError),
    #[error("corrupt model: {0}")]
    CorruptModel(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClassifierConfig<T> {
    /// Box constraint of the dual.
    pub c: T,
    pub gamma: T,
    pub kkt_tolerance: T,
    /// Iteration cap, in multiples of the training-set size.
    pub max_smo_passes: usize,
    pub platt_max_iter: usize,
}

impl<T: Scalar> Default for ClassifierConfig<T> {
    fn default() -> Self {
        Self {
            c: T::one(),
            gamma: T::one() / T::from_usize(FEATURE_DIM).unwrap(),
            kkt_tolerance: T::lit(1e-3),
            max_smo_passes: 100,
            platt_max_iter: 100,
        }
    }
}

/// A trained, calibrated classifier together with its frozen scaler.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel<T> {
    /// Scaled support vectors.
    pub support_vectors: Vec<Vec<T>>,
    /// Signed dual coefficients `alpha_i * y_i`.
    pub coefficients: Vec<T>,
    pub rho: T,
    pub gamma: T,
    pub c: T,
    pub platt: PlattSigmoid<T>,
    pub scaler: FeatureScaler<T>,
    pub iteration: u64,
}

/// Summary of one training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainReport<T> {
    pub samples: usize,
    pub support_vectors: usize,
    pub smo_iterations: usize,
    pub converged: bool,
    pub violation: T,
}

impl<T: Scalar> ClassifierModel<T> {
    pub fn kernel(&self) -> RbfKernel<T> {
        RbfKernel { gamma: self.gamma }
    }

    pub fn dim(&self) -> usize {
        self.scaler.dim()
    }

    /// Raw SVM decision value of an already scaled vector.
    pub fn decision_scaled(&self, scaled: &[T]) -> T {
        smo::decision(
            &self.support_vectors,
            &self.coefficients,
            self.rho,
            self.kernel(),
            scaled,
        )
    }

    pub fn decision_value(&self, v: &FeatureVector<T>) -> Result<T, ClassifierError> {
        let scaled = apply_scaler(&self.scaler, v)?;
        Ok(self.decision_scaled(scaled.values()))
    }

    /// Calibrated probability of the human class, clamped to `[1e-6, 1 - 1e-6]`.
    pub fn predict_proba(&self, v: &FeatureVector<T>) -> Result<T, ClassifierError> {
        let f = self.decision_value(v)?;
        Ok(clamp(
            self.platt.probability(f),
            T::lit(CONFIDENCE_FLOOR),
            T::lit(CONFIDENCE_CEIL),
        ))
    }

    pub fn save(&self) -> Vec<u8> {
        io::encode(self)
    }

    pub fn load(bytes: &[u8]) -> Result<Self, ClassifierError> {
        io::decode(bytes)
    }
}

/// Trains on labeled vectors directly; the scaler is fitted on `x` unless
/// one is supplied.
pub fn train_on<T: Scalar>(
    x: &[&FeatureVector<T>],
    human: &[bool],
    config: &ClassifierConfig<T>,
    scaler: Option<FeatureScaler<T>>,
    iteration: u64,
) -> Result<(ClassifierModel<T>, TrainReport<T>), ClassifierError> {
    assert_eq!(x.len(), human.len());
    if !human.iter().any(|&h| h) || human.iter().all(|&h| h) {
        return Err(ClassifierError::SingleClass);
    }
    let scaler = match scaler {
        Some(s) => s,
        None => fit_scaler(x.iter().copied())?,
    };
    let scaled: Vec<Vec<T>> = x
        .iter()
        .map(|v| apply_scaler(&scaler, v).map(FeatureVector::into_values))
        .collect::<Result<_, _>>()?;
    if scaled.windows(2).all(|w| w[0] == w[1]) {
        return Err(ClassifierError::DegenerateFeatures);
    }
    let y: Vec<T> = human
        .iter()
        .map(|&h| if h { T::one() } else { -T::one() })
        .collect();
    let kernel = RbfKernel {
        gamma: config.gamma,
    };
    let params = SmoParams {
        c: config.c,
        tolerance: config.kkt_tolerance,
        max_iterations: config.max_smo_passes.saturating_mul(scaled.len().max(1)),
    };
    let sol = smo::solve(&scaled, &y, kernel, params);

    let mut support_vectors = Vec::new();
    let mut coefficients = Vec::new();
    for (k, &a) in sol.alpha.iter().enumerate() {
        if a > T::zero() {
            support_vectors.push(scaled[k].clone());
            coefficients.push(a * y[k]);
        }
    }
    let decisions: Vec<T> = scaled
        .iter()
        .map(|v| smo::decision(&support_vectors, &coefficients, sol.rho, kernel, v))
        .collect();
    let platt = PlattSigmoid::fit(&decisions, human, config.platt_max_iter);
    let report = TrainReport {
        samples: scaled.len(),
        support_vectors: support_vectors.len(),
        smo_iterations: sol.iterations,
        converged: sol.converged,
        violation: sol.violation,
    };
    let model = ClassifierModel {
        support_vectors,
        coefficients,
        rho: sol.rho,
        gamma: config.gamma,
        c: config.c,
        platt,
        scaler,
        iteration,
    };
    Ok((model, report))
}

/// Batch-incremental retraining: a fresh model on a 1:1 balanced snapshot
/// of the whole store.
///
/// The scaler of `previous` is reused when present, so stored samples keep
/// one fixed scaling for the whole run.
pub fn train<T: Scalar, R: Rng + ?Sized>(
    store: &SampleStore<T>,
    config: &ClassifierConfig<T>,
    previous: Option<&ClassifierModel<T>>,
    rng: &mut R,
) -> Result<(ClassifierModel<T>, TrainReport<T>), ClassifierError> {
    let idx = store.balanced_indices(rng);
    if idx.is_empty() {
        return Err(ClassifierError::SingleClass);
    }
    let samples = store.samples();
    let x: Vec<&FeatureVector<T>> = idx.iter().map(|&i| &samples[i].features).collect();
    let human: Vec<bool> = idx.iter().map(|&i| samples[i].label.is_human()).collect();
    let iteration = previous.map_or(1, |m| m.iteration + 1);
    train_on(
        &x,
        &human,
        config,
        previous.map(|m| m.scaler.clone()),
        iteration,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BinaryLabel, LabeledSample, Timestamp};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn labeled(head: &[f64], human: bool) -> LabeledSample<f64> {
        LabeledSample {
            features: FeatureVector::padded(head),
            label: BinaryLabel::from_bool(human),
            source_track: None,
            stamp: Timestamp(0.0),
        }
    }

    /// 20 points, separable by x0 + x1 > 0 with margin.
    fn separable_store() -> SampleStore<f64> {
        let mut s = SampleStore::new();
        for k in 0..10 {
            let t = k as f64 / 10.0;
            s.push(labeled(&[1.0 + t, 0.5 - t], true));
            s.push(labeled(&[-1.0 - t, -0.5 + t * 0.7], false));
        }
        s
    }

    fn rng() -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(3)
    }

    #[test]
    fn separable_toy_set_is_fit_exactly() {
        let store = separable_store();
        let (m, report) = train(&store, &ClassifierConfig::default(), None, &mut rng()).unwrap();
        assert!(report.converged);
        assert_eq!(m.iteration, 1);
        for s in store.samples() {
            let f = m.decision_value(&s.features).unwrap();
            assert_eq!(f > 0.0, s.label.is_human());
        }
        let pos = store.samples().iter().find(|s| s.label.is_human()).unwrap();
        assert!(m.predict_proba(&pos.features).unwrap() > 0.5);
    }

    #[test]
    fn xor_pattern_is_fit_exactly() {
        let mut s = SampleStore::new();
        s.push(labeled(&[1.0, 1.0], true));
        s.push(labeled(&[-1.0, -1.0], true));
        s.push(labeled(&[1.0, -1.0], false));
        s.push(labeled(&[-1.0, 1.0], false));
        let cfg = ClassifierConfig {
            gamma: 1.0,
            c: 10.0,
            ..Default::default()
        };
        let (m, _) = train(&s, &cfg, None, &mut rng()).unwrap();
        for x in s.samples() {
            assert_eq!(
                m.decision_value(&x.features).unwrap() > 0.0,
                x.label.is_human()
            );
        }
    }

    #[test]
    fn single_class_and_degenerate_inputs_are_rejected() {
        let mut s = SampleStore::new();
        s.push(labeled(&[1.0], true));
        s.push(labeled(&[2.0], true));
        assert_eq!(
            train(&s, &ClassifierConfig::default(), None, &mut rng()).unwrap_err(),
            ClassifierError::SingleClass
        );

        let mut s = SampleStore::new();
        s.push(labeled(&[1.0], true));
        s.push(labeled(&[1.0], false));
        assert_eq!(
            train(&s, &ClassifierConfig::default(), None, &mut rng()).unwrap_err(),
            ClassifierError::DegenerateFeatures
        );
    }

    #[test]
    fn midpoint_of_symmetric_pair_is_uncertain() {
        let mut s = SampleStore::new();
        s.push(labeled(&[1.0, 0.0], true));
        s.push(labeled(&[-1.0, 0.0], false));
        let (m, _) = train(&s, &ClassifierConfig::default(), None, &mut rng()).unwrap();
        let p = m
            .predict_proba(&FeatureVector::padded(&[0.0, 0.0]))
            .unwrap();
        assert!((p - 0.5).abs() <= 0.05, "p = {p}");
    }

    #[test]
    fn probabilities_are_clamped_and_monotone() {
        let (m, _) = train(
            &separable_store(),
            &ClassifierConfig::default(),
            None,
            &mut rng(),
        )
        .unwrap();
        assert!(m.platt.a < 0.0);
        for k in -50..=50 {
            let v = FeatureVector::padded(&[k as f64, -(k as f64)]);
            let p = m.predict_proba(&v).unwrap();
            assert!((CONFIDENCE_FLOOR..=CONFIDENCE_CEIL).contains(&p));
        }
        assert!(matches!(
            m.predict_proba(&FeatureVector::from_values(vec![0.0; 3]).unwrap()),
            Err(ClassifierError::Feature(
                FeatureError::DimensionMismatch { .. }
            ))
        ));
    }

    #[test]
    fn retraining_reuses_scaler_and_bumps_iteration() {
        let store = separable_store();
        let cfg = ClassifierConfig::default();
        let (m1, _) = train(&store, &cfg, None, &mut rng()).unwrap();
        let mut bigger = store.clone();
        bigger.push(labeled(&[50.0, 50.0], true));
        bigger.push(labeled(&[-50.0, -50.0], false));
        let (m2, _) = train(&bigger, &cfg, Some(&m1), &mut rng()).unwrap();
        assert_eq!(m2.iteration, 2);
        assert_eq!(m2.scaler, m1.scaler);
    }

    #[test]
    fn training_is_deterministic() {
        let store = separable_store();
        let cfg = ClassifierConfig::default();
        let a = train(&store, &cfg, None, &mut rng()).unwrap().0;
        let b = train(&store, &cfg, None, &mut rng()).unwrap().0;
        assert_eq!(a.save(), b.save());
    }
}
