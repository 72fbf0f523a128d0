//! Experiment configuration: one TOML document with a table per stage.
//!
//! Unknown keys are rejected everywhere. Fields that follow from other sections
//! (pose width, frame rate, slot count `K`, text width) are derived on load and cannot
//! be set directly.

use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::corpus::{CorpusConfig, TextDescriptor, SKELETON};
use crate::error::{Error, Result};
use crate::eval::{EvalConfig, ExtractorConfig};
use crate::ladiff::{DenoiserConfig, DiffusionConfig};
use crate::lavae::{DvaeTarget, LaVaeConfig};
use crate::analysis::InactiveSlots;
use crate::training::TrainConfig;

/// Checked-in desk-scale configuration used by the end-to-end run.
pub const DESK_TOML: &str = include_str!("../configs/desk.toml");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnalysisConfig {
    /// Target lengths of the dynamics sweep.
    pub lengths: Vec<usize>,
    /// Captions swept over `lengths`; each must be a sentence of the corpus grammar.
    pub captions: Vec<String>,
    /// Lengths whose decoder attention maps are exported.
    pub attention_lengths: Vec<usize>,
    pub inactive: InactiveSlots,
}

impl Default for AnalysisConfig {
    fn default() -> Self {
        Self {
            lengths: vec![48, 84, 170],
            captions: vec!["a person walks forward".into(), "a person sits down".into()],
            attention_lengths: vec![48, 96, 144, 200],
            inactive: InactiveSlots::PriorMean,
        }
    }
}

/// Keyword standing for "one slot covers every frame".
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AllFrames {
    All,
}

/// Slot width on the ablation grid; `"all"` means the longest admissible motion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SlotWidth {
    Frames(usize),
    All(AllFrames),
}

impl SlotWidth {
    pub fn resolve(self, max_frames: usize) -> usize {
        match self {
            Self::Frames(r) => r,
            Self::All(_) => max_frames,
        }
    }
}

impl fmt::Display for SlotWidth {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Frames(r) => write!(f, "{r}"),
            Self::All(_) => f.write_str("all"),
        }
    }
}

/// Ablation grid. Each listed value yields one cell that differs from the base
/// configuration on that axis alone.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateConfig {
    pub frames_per_latent: Vec<SlotWidth>,
    pub dvae_fraction: Vec<f64>,
    pub length_aware: Vec<bool>,
    pub dvae_target: Vec<DvaeTarget>,
    /// Multiplies every training epoch count of a cell; cells train at reduced budget.
    pub budget: f64,
    /// Evaluation replicates per cell.
    pub replicates: usize,
}

impl Default for AblateConfig {
    fn default() -> Self {
        Self {
            frames_per_latent: vec![
                SlotWidth::Frames(16),
                SlotWidth::Frames(32),
                SlotWidth::Frames(48),
                SlotWidth::Frames(64),
                SlotWidth::All(AllFrames::All),
            ],
            dvae_fraction: vec![0.0, 0.33, 0.5],
            length_aware: vec![false],
            dvae_target: vec![DvaeTarget::Latent],
            budget: 0.25,
            replicates: 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    /// Master seed; every stage derives its own stream from it.
    pub seed: u64,
    pub out_dir: PathBuf,
    pub corpus: CorpusConfig,
    pub lavae: LaVaeConfig,
    pub vae_train: TrainConfig,
    pub denoiser: DenoiserConfig,
    pub diffusion: DiffusionConfig,
    pub denoiser_train: TrainConfig,
    pub extractor: ExtractorConfig,
    pub extractor_train: TrainConfig,
    pub eval: EvalConfig,
    pub analysis: AnalysisConfig,
    pub ablate: AblateConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            out_dir: PathBuf::from("runs/default"),
            corpus: CorpusConfig::default(),
            lavae: LaVaeConfig::default(),
            vae_train: TrainConfig::default(),
            denoiser: DenoiserConfig::default(),
            diffusion: DiffusionConfig::default(),
            denoiser_train: TrainConfig::default(),
            extractor: ExtractorConfig::default(),
            extractor_train: TrainConfig::default(),
            eval: EvalConfig::default(),
            analysis: AnalysisConfig::default(),
            ablate: AblateConfig::default(),
        };
        c.derive();
        c
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let mut c: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        c.resolve()?;
        Ok(c)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            crate::corpus::io::missing(path, e, "pass an existing file to --config")
        })?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    /// The checked-in desk-scale configuration.
    pub fn desk() -> Self {
        Self::from_toml(DESK_TOML).expect("bundled desk configuration is valid")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("configuration serializes")
    }

    /// `K = ceil(F_max / r)`.
    pub fn max_slots(&self) -> usize {
        self.lavae.max_slots()
    }

    /// Recomputes derived fields and validates every section. Call after editing fields in code.
    pub fn resolve(&mut self) -> Result<()> {
        self.corpus.validate()?;
        if self.lavae.max_frames != self.corpus.max_frames {
            return Err(Error::Config(format!(
                "lavae.max_frames ({}) must equal corpus.max_frames ({})",
                self.lavae.max_frames, self.corpus.max_frames
            )));
        }
        self.derive();
        self.lavae.validate()?;
        self.denoiser.validate()?;
        self.diffusion.schedule()?;
        self.extractor.validate()?;
        self.eval.validate()?;
        self.vae_train.validate("vae_train")?;
        self.denoiser_train.validate("denoiser_train")?;
        self.extractor_train.validate("extractor_train")?;
        for &f in &self.analysis.lengths {
            self.corpus.check_frames(f)?;
        }
        for &f in &self.analysis.attention_lengths {
            self.corpus.check_frames(f)?;
        }
        for caption in &self.analysis.captions {
            TextDescriptor::parse(caption)?;
        }
        let a = &self.ablate;
        if !(a.budget > 0.0 && a.budget.is_finite()) || a.replicates == 0 {
            return Err(Error::Config("ablate.budget and ablate.replicates must be positive".into()));
        }
        if a.frames_per_latent.iter().any(|w| w.resolve(self.corpus.max_frames) == 0) {
            return Err(Error::Config("ablate.frames_per_latent entries must be positive".into()));
        }
        if a.dvae_fraction.iter().any(|f| !(0.0..=1.0).contains(f)) {
            return Err(Error::Config("ablate.dvae_fraction entries must lie in [0, 1]".into()));
        }
        Ok(())
    }

    fn derive(&mut self) {
        self.lavae.pose_dim = SKELETON.dim();
        self.lavae.fps = self.corpus.fps;
        self.denoiser.latent_dim = self.lavae.latent_dim;
        self.denoiser.max_slots = self.lavae.max_slots();
        self.denoiser.text_dim = self.corpus.text_dim;
        self.extractor.pose_dim = SKELETON.dim();
        self.extractor.text_dim = self.corpus.text_dim;
    }

    pub fn path(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }
}
