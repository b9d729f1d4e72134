//! Versioned little-endian binary model format.
//!
//! ```text
//! magic "TFSVM" | version u8 | scalar tag u8 | dim u32 | n_sv u32 | iteration u64
//! gamma | c | rho | platt a | platt b | scaler min[dim] | scaler max[dim]
//! n_sv x (coefficient | vector[dim])
//! ```

use super::{ClassifierError, ClassifierModel, PlattSigmoid};
use crate::features::FeatureScaler;
use crate::scalar::Scalar;

pub const MODEL_MAGIC: &[u8; 5] = b"TFSVM";
const VERSION: u8 = 1;

pub(super) fn encode<T: Scalar>(m: &ClassifierModel<T>) -> Vec<u8> {
    let dim = m.dim();
    let mut out =
        Vec::with_capacity(32 + (m.support_vectors.len() * (dim + 1) + 2 * dim + 5) * T::BYTES);
    out.extend_from_slice(MODEL_MAGIC);
    out.push(VERSION);
    out.push(T::TAG);
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(m.support_vectors.len() as u32).to_le_bytes());
    out.extend_from_slice(&m.iteration.to_le_bytes());
    for v in [m.gamma, m.c, m.rho, m.platt.a, m.platt.b] {
        v.write_le(&mut out);
    }
    for &v in m.scaler.min.iter().chain(&m.scaler.max) {
        v.write_le(&mut out);
    }
    for (sv, &coef) in m.support_vectors.iter().zip(&m.coefficients) {
        coef.write_le(&mut out);
        for &v in sv {
            v.write_le(&mut out);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ClassifierError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(ClassifierError::CorruptModel(format!(
                "truncated at byte {}",
                self.pos
            ))),
        }
    }

    fn u8(&mut self) -> Result<u8, ClassifierError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ClassifierError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, ClassifierError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn scalar<T: Scalar>(&mut self) -> Result<T, ClassifierError> {
        let v = T::read_le(self.take(T::BYTES)?);
        if v.is_finite() {
            Ok(v)
        } else {
            Err(ClassifierError::CorruptModel("non-finite value".into()))
        }
    }

    fn scalars<T: Scalar>(&mut self, n: usize) -> Result<Vec<T>, ClassifierError> {
        (0..n).map(|_| self.scalar()).collect()
    }
}

pub(super) fn decode<T: Scalar>(bytes: &[u8]) -> Result<ClassifierModel<T>, ClassifierError> {
    let corrupt = |m: &str| ClassifierError::CorruptModel(m.to_string());
    let mut r = Reader { bytes, pos: 0 };
    if r.take(MODEL_MAGIC.len())? != MODEL_MAGIC {
        return Err(corrupt("bad magic"));
    }
    let version = r.u8()?;
    if version != VERSION {
        return Err(ClassifierError::CorruptModel(format!(
            "unsupported version {version}"
        )));
    }
    let tag = r.u8()?;
    if tag != T::TAG {
        return Err(ClassifierError::CorruptModel(format!(
            "scalar tag {tag}, expected {}",
            T::TAG
        )));
    }
    let dim = r.u32()? as usize;
    let n_sv = r.u32()? as usize;
    let iteration = r.u64()?;
    let needed = (5 + 2 * dim)
        .saturating_add(n_sv.saturating_mul(dim + 1))
        .saturating_mul(T::BYTES);
    if bytes.len() - r.pos != needed {
        return Err(ClassifierError::CorruptModel(format!(
            "payload is {} bytes, header implies {needed}",
            bytes.len() - r.pos
        )));
    }
    let gamma = r.scalar()?;
    let c = r.scalar()?;
    let rho = r.scalar()?;
    let platt = PlattSigmoid {
        a: r.scalar()?,
        b: r.scalar()?,
    };
    let min = r.scalars(dim)?;
    let max = r.scalars(dim)?;
    if min.iter().zip(&max).any(|(a, b)| a > b) {
        return Err(corrupt("scaler min exceeds max"));
    }
    let mut support_vectors = Vec::with_capacity(n_sv);
    let mut coefficients = Vec::with_capacity(n_sv);
    for _ in 0..n_sv {
        coefficients.push(r.scalar()?);
        support_vectors.push(r.scalars(dim)?);
    }
    Ok(ClassifierModel {
        support_vectors,
        coefficients,
        rho,
        gamma,
        c,
        platt,
        scaler: FeatureScaler { min, max },
        iteration,
    })
}

#[cfg(test)]
mod tests {
    use super::super::*;
    use crate::features::FeatureVector;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn toy_model() -> ClassifierModel<f64> {
        let a: Vec<FeatureVector<f64>> = (0..6)
            .map(|k| {
                FeatureVector::padded(&[
                    k as f64,
                    (k * k) as f64 * 0.1,
                    if k < 3 { 1.0 } else { -1.0 },
                ])
            })
            .collect();
        let refs: Vec<&FeatureVector<f64>> = a.iter().collect();
        let human = [true, true, true, false, false, false];
        train_on(&refs, &human, &ClassifierConfig::default(), None, 4)
            .unwrap()
            .0
    }

    #[test]
    fn round_trip_predicts_identically() {
        let m = toy_model();
        let bytes = m.save();
        let back = ClassifierModel::<f64>::load(&bytes).unwrap();
        assert_eq!(back, m);
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..100 {
            let v: Vec<f64> = (0..61).map(|_| rng.random_range(-5.0..5.0)).collect();
            let v = FeatureVector::new(v).unwrap();
            assert_eq!(
                m.predict_proba(&v).unwrap().to_bits(),
                back.predict_proba(&v).unwrap().to_bits()
            );
        }
    }

    #[test]
    fn truncated_stream_is_corrupt() {
        let bytes = toy_model().save();
        for cut in [0, 3, 10, bytes.len() / 2, bytes.len() - 1] {
            assert!(matches!(
                ClassifierModel::<f64>::load(&bytes[..cut]),
                Err(ClassifierError::CorruptModel(_))
            ));
        }
    }

    #[test]
    fn header_mismatches_are_corrupt() {
        let mut bytes = toy_model().save();
        bytes[5] = 9;
        assert!(matches!(
            ClassifierModel::<f64>::load(&bytes),
            Err(ClassifierError::CorruptModel(_))
        ));

        let bytes = toy_model().save();
        assert!(matches!(
            ClassifierModel::<f32>::load(&bytes),
            Err(ClassifierError::CorruptModel(_))
        ));

        let mut bytes = toy_model().save();
        bytes[0] = b'X';
        assert!(matches!(
            ClassifierModel::<f64>::load(&bytes),
            Err(ClassifierError::CorruptModel(_))
        ));
    }
}
