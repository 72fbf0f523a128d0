//! Motion data model and the procedural text-motion corpus.

pub mod actions;
pub mod io;
mod motion;
mod normalize;
pub mod text;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use motion::{MotionSequence, PoseLayout, PoseVector, JOINT_NAMES, SKELETON};
pub use normalize::{Normalizer, STD_FLOOR};
pub use text::{ActionKind, MotionParams, TextDescriptor, TextEmbedder, TextEmbedding, Variant};

use crate::error::{Error, Result};
use crate::rng;
use rand::Rng as _;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn tag(self) -> u8 {
        match self {
            Split::Train => 0,
            Split::Val => 1,
            Split::Test => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        match tag {
            0 => Some(Split::Train),
            1 => Some(Split::Val),
            2 => Some(Split::Test),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct CorpusConfig {
    pub samples: usize,
    pub min_frames: usize,
    pub max_frames: usize,
    pub fps: u32,
    pub actions: Vec<ActionKind>,
    pub val_fraction: f64,
    pub test_fraction: f64,
    /// Seed of the train/val/test assignment, independent of the content seed.
    pub split_seed: u64,
    pub text_dim: usize,
    pub text_seed: u64,
}

impl Default for CorpusConfig {
    fn default() -> Self {
        Self {
            samples: 600,
            min_frames: 30,
            max_frames: 200,
            fps: 20,
            actions: ActionKind::ALL.to_vec(),
            val_fraction: 0.15,
            test_fraction: 0.15,
            split_seed: 17,
            text_dim: 64,
            text_seed: 29,
        }
    }
}

impl CorpusConfig {
    pub fn validate(&self) -> Result<()> {
        if self.actions.is_empty() {
            return Err(Error::Config("corpus.actions must not be empty".into()));
        }
        if self.min_frames < 2 {
            return Err(Error::Config("corpus.min_frames must be at least 2".into()));
        }
        if self.min_frames > self.max_frames {
            return Err(Error::Config(format!(
                "corpus.min_frames ({}) exceeds corpus.max_frames ({})",
                self.min_frames, self.max_frames
            )));
        }
        if self.fps == 0 {
            return Err(Error::Config("corpus.fps must be positive".into()));
        }
        let held = self.val_fraction + self.test_fraction;
        if !(0.0..1.0).contains(&self.val_fraction)
            || !(0.0..1.0).contains(&self.test_fraction)
            || held >= 1.0
        {
            return Err(Error::Config(
                "split fractions must be in [0, 1) and sum below 1".into(),
            ));
        }
        if self.text_dim == 0 {
            return Err(Error::Config("corpus.text_dim must be positive".into()));
        }
        Ok(())
    }

    pub fn embedder(&self) -> TextEmbedder {
        TextEmbedder::new(self.text_dim, self.text_seed)
    }

    pub fn check_frames(&self, frames: usize) -> Result<()> {
        if frames < self.min_frames || frames > self.max_frames {
            return Err(Error::Length {
                frames,
                min: self.min_frames,
                max: self.max_frames,
            });
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct CorpusSample {
    pub id: u32,
    pub motion: MotionSequence,
    pub descriptor: TextDescriptor,
    pub split: Split,
}

/// Split assignment as a pure function of the sample id and the split seed.
pub fn assign_split(id: u32, split_seed: u64, val_fraction: f64, test_fraction: f64) -> Split {
    let u = (rng::derive_seed(split_seed, rng::stream::SPLIT, u64::from(id)) >> 11) as f64
        / (1u64 << 53) as f64;
    if u < test_fraction {
        Split::Test
    } else if u < test_fraction + val_fraction {
        Split::Val
    } else {
        Split::Train
    }
}

/// One sample with an explicit action, variant, and length.
pub fn generate_sample(
    config: &CorpusConfig,
    seed: u64,
    id: u32,
    action: ActionKind,
    variant: Variant,
    frames: usize,
) -> Result<CorpusSample> {
    let mut r = rng::derived(seed, rng::stream::CORPUS, u64::from(id));
    let params = actions::draw_params(action, &mut r);
    let subject = r.random_range(0..text::SUBJECTS.len());
    let motion = actions::synthesize(action, variant, &params, frames, config.fps)?;
    Ok(CorpusSample {
        id,
        motion,
        descriptor: TextDescriptor::new(action, variant, subject, Some(params)),
        split: assign_split(
            id,
            config.split_seed,
            config.val_fraction,
            config.test_fraction,
        ),
    })
}

/// Generates the whole corpus. Sample `i` cycles through the configured actions and
/// draws its variant, length, wording, and kinematics from a seed derived from `(seed, i)`.
pub fn generate_corpus(config: &CorpusConfig, seed: u64) -> Result<Vec<CorpusSample>> {
    config.validate()?;
    (0..config.samples as u32)
        .into_par_iter()
        .map(|id| {
            let mut r = rng::derived(seed, rng::stream::CORPUS, u64::from(id) | (1 << 40));
            let action = config.actions[id as usize % config.actions.len()];
            let variants = action.variants();
            let variant = variants[r.random_range(0..variants.len())];
            let frames = r.random_range(config.min_frames..=config.max_frames);
            generate_sample(config, seed, id, action, variant, frames)
        })
        .collect()
}

pub fn split_of(samples: &[CorpusSample], split: Split) -> Vec<&CorpusSample> {
    samples.iter().filter(|s| s.split == split).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> CorpusConfig {
        CorpusConfig {
            samples: 60,
            ..Default::default()
        }
    }

    #[test]
    fn rejects_bad_configs() {
        let empty = CorpusConfig {
            actions: vec![],
            ..Default::default()
        };
        assert!(matches!(generate_corpus(&empty, 0), Err(Error::Config(_))));
        let inverted = CorpusConfig {
            min_frames: 90,
            max_frames: 40,
            ..Default::default()
        };
        assert!(matches!(
            generate_corpus(&inverted, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn walk_advances_by_step_length_times_steps() {
        let cfg = CorpusConfig::default();
        let params = MotionParams {
            amplitude: 0.6,
            repeats: 5,
            extent: 0.0,
            body_scale: 1.0,
        };
        let m = actions::synthesize(ActionKind::Walk, Variant::Forward, &params, 60, 20).unwrap();
        assert_eq!(m.frames(), 60);
        let start = m.pose(0).position(0);
        let end = m.pose(59).position(0);
        assert!(((end[2] - start[2]) - 0.6 * 5.0).abs() < 1e-9);
        assert!(m.velocity_consistency_error() < 1e-5);
        cfg.check_frames(m.frames()).unwrap();
    }

    #[test]
    fn shorter_duration_means_proportionally_faster_root() {
        let params = MotionParams {
            amplitude: 0.65,
            repeats: 6,
            extent: 0.0,
            body_scale: 1.0,
        };
        let short =
            actions::synthesize(ActionKind::Walk, Variant::Forward, &params, 48, 20).unwrap();
        let long =
            actions::synthesize(ActionKind::Walk, Variant::Forward, &params, 170, 20).unwrap();
        // oracle: identical path length divided by the two durations
        let path = 0.65 * 6.0;
        let expected = (path / (47.0 / 20.0)) / (path / (169.0 / 20.0));
        let ratio = short.mean_root_speed() / long.mean_root_speed();
        assert!(
            (ratio / expected - 1.0).abs() < 0.05,
            "ratio {ratio} expected {expected}"
        );
        assert!((ratio / (170.0 / 48.0) - 1.0).abs() < 0.05);
    }

    #[test]
    fn generation_is_deterministic() {
        let a = generate_corpus(&small(), 5).unwrap();
        let b = generate_corpus(&small(), 5).unwrap();
        assert_eq!(a, b);
        let c = generate_corpus(&small(), 6).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn every_sample_has_consistent_velocities_and_valid_length() {
        let cfg = small();
        for s in generate_corpus(&cfg, 11).unwrap() {
            assert!(
                s.motion.velocity_consistency_error() < 1e-5,
                "sample {}",
                s.id
            );
            cfg.check_frames(s.motion.frames()).unwrap();
            assert_eq!(s.motion.pose_dim(), SKELETON.dim());
            assert_eq!(
                TextDescriptor::parse(&s.descriptor.text)
                    .unwrap()
                    .class_label(),
                s.descriptor.class_label()
            );
        }
    }

    #[test]
    fn split_is_a_function_of_id_and_seed() {
        let cfg = small();
        let corpus = generate_corpus(&cfg, 1).unwrap();
        let other_content = generate_corpus(&cfg, 2).unwrap();
        for (a, b) in corpus.iter().zip(&other_content) {
            assert_eq!(a.split, b.split);
            assert_eq!(
                a.split,
                assign_split(a.id, cfg.split_seed, cfg.val_fraction, cfg.test_fraction)
            );
        }
        let counts = [Split::Train, Split::Val, Split::Test].map(|s| split_of(&corpus, s).len());
        assert!(counts.iter().all(|&c| c > 0), "{counts:?}");
    }

    #[test]
    fn inverse_length_correlates_with_root_speed_per_action() {
        let cfg = CorpusConfig {
            samples: 240,
            ..Default::default()
        };
        let corpus = generate_corpus(&cfg, 3).unwrap();
        for action in ActionKind::ALL {
            let pts: Vec<(f64, f64)> = corpus
                .iter()
                .filter(|s| s.descriptor.action == action)
                .map(|s| (1.0 / s.motion.frames() as f64, s.motion.mean_root_speed()))
                .collect();
            assert!(pearson(&pts) > 0.0, "{action}: {}", pearson(&pts));
        }
    }

    fn pearson(pts: &[(f64, f64)]) -> f64 {
        let n = pts.len() as f64;
        let (mx, my) = (
            pts.iter().map(|p| p.0).sum::<f64>() / n,
            pts.iter().map(|p| p.1).sum::<f64>() / n,
        );
        let cov: f64 = pts.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
        let vx: f64 = pts.iter().map(|p| (p.0 - mx).powi(2)).sum();
        let vy: f64 = pts.iter().map(|p| (p.1 - my).powi(2)).sum();
        cov / (vx * vy).sqrt()
    }
}
