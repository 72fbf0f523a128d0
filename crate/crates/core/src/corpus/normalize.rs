use log::warn;

use super::motion::MotionSequence;
use crate::error::{Error, Result};

/// Smallest standard deviation a channel may have; constant channels are clamped here.
pub const STD_FLOOR: f64 = 1e-6;

/// Per-channel standardization statistics, fitted on the training split.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl Normalizer {
    /// Mean and (population) standard deviation over every frame of every motion.
    pub fn fit<'a>(motions: impl IntoIterator<Item = &'a MotionSequence>) -> Result<Self> {
        let mut dim = None;
        let mut n = 0usize;
        let mut sum: Vec<f64> = Vec::new();
        let mut sq: Vec<f64> = Vec::new();
        let motions: Vec<&MotionSequence> = motions.into_iter().collect();
        for m in &motions {
            let d = *dim.get_or_insert(m.pose_dim());
            if d != m.pose_dim() {
                return Err(Error::Shape(format!(
                    "mixed pose dimensions {d} and {}",
                    m.pose_dim()
                )));
            }
            if sum.is_empty() {
                sum = vec![0.0; d];
            }
            for row in m.data().chunks(d) {
                sum.iter_mut().zip(row).for_each(|(s, &x)| *s += x);
            }
            n += m.frames();
        }
        let Some(d) = dim else {
            return Err(Error::InsufficientData {
                what: "normalizer fit",
                needed: 1,
                available: 0,
            });
        };
        let mean: Vec<f64> = sum.iter().map(|s| s / n as f64).collect();
        sq.resize(d, 0.0);
        for m in &motions {
            for row in m.data().chunks(d) {
                for ((q, &x), &mu) in sq.iter_mut().zip(row).zip(&mean) {
                    *q += (x - mu) * (x - mu);
                }
            }
        }
        let mut std = Vec::with_capacity(d);
        for (c, q) in sq.iter().enumerate() {
            let s = (q / n as f64).sqrt();
            if s < STD_FLOOR {
                warn!("channel {c} is constant on the training split; clamping its std to {STD_FLOOR}");
                std.push(STD_FLOOR);
            } else {
                std.push(s);
            }
        }
        Ok(Self { mean, std })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    fn check(&self, m: &MotionSequence) -> Result<()> {
        if m.pose_dim() != self.dim() {
            return Err(Error::Shape(format!(
                "normalizer has {} channels, motion has {}",
                self.dim(),
                m.pose_dim()
            )));
        }
        Ok(())
    }

    pub fn normalize(&self, m: &MotionSequence) -> Result<MotionSequence> {
        self.check(m)?;
        Ok(m.map_values(|c, x| (x - self.mean[c]) / self.std[c]))
    }

    pub fn denormalize(&self, m: &MotionSequence) -> Result<MotionSequence> {
        self.check(m)?;
        Ok(m.map_values(|c, x| x * self.std[c] + self.mean[c]))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, split_of, CorpusConfig, Split};

    #[test]
    fn static_single_sample_normalizes_to_zero() {
        let m =
            MotionSequence::new(20, 7, [0.3, 1.0, -2.0, 0.0, 0.0, 0.0, 0.5].repeat(10)).unwrap();
        let n = Normalizer::fit([&m]).unwrap();
        assert!(n.std.iter().all(|&s| s == STD_FLOOR));
        let z = n.normalize(&m).unwrap();
        assert!(z.data().iter().all(|&x| x.abs() < 1e-9));
    }

    #[test]
    fn empty_fit_is_an_error() {
        assert!(Normalizer::fit(std::iter::empty()).is_err());
    }

    #[test]
    fn train_split_is_standardized() {
        let corpus = generate_corpus(
            &CorpusConfig {
                samples: 80,
                ..Default::default()
            },
            4,
        )
        .unwrap();
        let train: Vec<_> = split_of(&corpus, Split::Train)
            .into_iter()
            .map(|s| &s.motion)
            .collect();
        let n = Normalizer::fit(train.iter().copied()).unwrap();
        let d = n.dim();
        let mut sum = vec![0.0; d];
        let mut sq = vec![0.0; d];
        let mut count = 0.0;
        for m in &train {
            let z = n.normalize(m).unwrap();
            for row in z.data().chunks(d) {
                for c in 0..d {
                    sum[c] += row[c];
                    sq[c] += row[c] * row[c];
                }
                count += 1.0;
            }
        }
        for c in 0..d {
            let mean = sum[c] / count;
            assert!(mean.abs() < 1e-4, "channel {c} mean {mean}");
            if n.std[c] > STD_FLOOR {
                let std = (sq[c] / count - mean * mean).sqrt();
                assert!((std - 1.0).abs() < 1e-4, "channel {c} std {std}");
            }
        }
    }
}
