use rand::seq::index;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::model::{BinaryLabel, LabeledSample};
use crate::scalar::Scalar;

/// Every labeled sample accumulated since the start of a run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SampleStore<T> {
    samples: Vec<LabeledSample<T>>,
}

impl<T: Scalar> SampleStore<T> {
    pub fn new() -> Self {
        Self {
            samples: Vec::new(),
        }
    }

    pub fn push(&mut self, s: LabeledSample<T>) {
        self.samples.push(s);
    }

    pub fn extend<I: IntoIterator<Item = LabeledSample<T>>>(&mut self, it: I) {
        self.samples.extend(it);
    }

    pub fn samples(&self) -> &[LabeledSample<T>] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn count(&self, label: BinaryLabel) -> usize {
        self.samples.iter().filter(|s| s.label == label).count()
    }

    /// Indices of a 1:1 class-balanced subset, in arrival order.
    ///
    /// The majority class is downsampled uniformly without replacement.
    pub fn balanced_indices<R: Rng + ?Sized>(&self, rng: &mut R) -> Vec<usize> {
        let (pos, neg): (Vec<usize>, Vec<usize>) =
            (0..self.samples.len()).partition(|&i| self.samples[i].label.is_human());
        let keep = pos.len().min(neg.len());
        let mut pick = |class: Vec<usize>| -> Vec<usize> {
            if class.len() == keep {
                class
            } else {
                let mut chosen: Vec<usize> = index::sample(rng, class.len(), keep)
                    .into_iter()
                    .map(|k| class[k])
                    .collect();
                chosen.sort_unstable();
                chosen
            }
        };
        let mut out = pick(pos);
        out.extend(pick(neg));
        out.sort_unstable();
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::FeatureVector;
    use crate::model::Timestamp;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn sample(i: usize, human: bool) -> LabeledSample<f64> {
        LabeledSample {
            features: FeatureVector::padded(&[i as f64]),
            label: BinaryLabel::from_bool(human),
            source_track: None,
            stamp: Timestamp(i as f64),
        }
    }

    #[test]
    fn balancing_downsamples_majority_deterministically() {
        let mut store = SampleStore::new();
        store.extend((0..30).map(|i| sample(i, i % 3 == 0)));
        assert_eq!(store.count(BinaryLabel::Human), 10);
        let a = store.balanced_indices(&mut ChaCha8Rng::seed_from_u64(7));
        let b = store.balanced_indices(&mut ChaCha8Rng::seed_from_u64(7));
        assert_eq!(a, b);
        assert_eq!(a.len(), 20);
        let humans = a
            .iter()
            .filter(|&&i| store.samples()[i].label.is_human())
            .count();
        assert_eq!(humans, 10);
        assert!(a.windows(2).all(|w| w[0] < w[1]));
    }

    #[test]
    fn balanced_store_is_kept_whole() {
        let mut store = SampleStore::new();
        store.extend((0..8).map(|i| sample(i, i < 4)));
        let idx = store.balanced_indices(&mut ChaCha8Rng::seed_from_u64(1));
        assert_eq!(idx, (0..8).collect::<Vec<_>>());
    }
}
