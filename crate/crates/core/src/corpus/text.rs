//! Template grammar for motion descriptions and the frozen token-table embedder.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionKind {
    Walk,
    WalkCircle,
    Sit,
    Throw,
    Jump,
    Wave,
}

impl ActionKind {
    pub const ALL: [ActionKind; 6] = [
        Self::Walk,
        Self::WalkCircle,
        Self::Sit,
        Self::Throw,
        Self::Jump,
        Self::Wave,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::Walk => "walk",
            Self::WalkCircle => "walk-circle",
            Self::Sit => "sit",
            Self::Throw => "throw",
            Self::Jump => "jump",
            Self::Wave => "wave",
        }
    }

    pub fn variants(self) -> &'static [Variant] {
        use Variant::*;
        match self {
            Self::Walk => &[Forward, Backward, Left, Right],
            Self::WalkCircle => &[Clockwise, CounterClockwise],
            Self::Sit => &[Plain],
            Self::Throw | Self::Wave => &[LeftHand, RightHand],
            Self::Jump => &[InPlace, Forward],
        }
    }
}

impl fmt::Display for ActionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ActionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown action `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Plain,
    Forward,
    Backward,
    Left,
    Right,
    Clockwise,
    CounterClockwise,
    LeftHand,
    RightHand,
    InPlace,
}

pub const SUBJECTS: [&str; 3] = ["a person", "a man", "someone"];

fn phrase(action: ActionKind, variant: Variant) -> &'static str {
    use ActionKind as A;
    use Variant as V;
    match (action, variant) {
        (A::Walk, V::Forward) => "walks forward",
        (A::Walk, V::Backward) => "walks backward",
        (A::Walk, V::Left) => "steps to the left",
        (A::Walk, V::Right) => "steps to the right",
        (A::WalkCircle, V::Clockwise) => "walks in a circle clockwise",
        (A::WalkCircle, V::CounterClockwise) => "walks in a circle counterclockwise",
        (A::Sit, _) => "sits down",
        (A::Throw, V::LeftHand) => "throws a ball with the left hand",
        (A::Throw, _) => "throws a ball with the right hand",
        (A::Jump, V::Forward) => "jumps forward",
        (A::Jump, _) => "jumps in place",
        (A::Wave, V::LeftHand) => "waves with the left hand",
        (A::Wave, _) => "waves with the right hand",
        (A::Walk, _) => "walks forward",
        (A::WalkCircle, _) => "walks in a circle clockwise",
    }
}

/// Every `(action, variant)` pair of the grammar.
pub fn templates() -> Vec<(ActionKind, Variant)> {
    ActionKind::ALL
        .iter()
        .flat_map(|&a| a.variants().iter().map(move |&v| (a, v)))
        .collect()
}

/// Renders the description for an action variant with the given subject slot.
pub fn render(action: ActionKind, variant: Variant, subject: usize) -> String {
    format!(
        "{} {}",
        SUBJECTS[subject % SUBJECTS.len()],
        phrase(action, variant)
    )
}

/// Every word the grammar can emit, sorted.
pub fn vocabulary() -> Vec<String> {
    let mut words: Vec<String> = SUBJECTS
        .iter()
        .copied()
        .chain(templates().into_iter().map(|(a, v)| phrase(a, v)))
        .flat_map(|s| s.split_whitespace().map(str::to_owned).collect::<Vec<_>>())
        .collect();
    words.sort();
    words.dedup();
    words
}

/// Continuous kinematic parameters of a synthesized motion.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MotionParams {
    /// Step length, circle radius, throw reach, jump height, or wave amplitude (meters).
    pub amplitude: f64,
    /// Steps, circle fraction numerator, or wave count.
    pub repeats: u32,
    /// Extra distance for forward jumps, sitting depth, circle fraction.
    pub extent: f64,
    pub body_scale: f64,
}

/// A text description together with the labels it was rendered from.
#[derive(Debug, Clone, PartialEq)]
pub struct TextDescriptor {
    pub text: String,
    pub action: ActionKind,
    pub variant: Variant,
    pub subject: usize,
    /// Present for freshly generated samples; lost when read back from a corpus file.
    pub params: Option<MotionParams>,
}

impl TextDescriptor {
    pub fn new(
        action: ActionKind,
        variant: Variant,
        subject: usize,
        params: Option<MotionParams>,
    ) -> Self {
        Self {
            text: render(action, variant, subject),
            action,
            variant,
            subject,
            params,
        }
    }

    /// Recovers the labels of a grammar sentence.
    pub fn parse(text: &str) -> Result<Self> {
        let norm = normalize(text);
        for (a, v) in templates() {
            for s in 0..SUBJECTS.len() {
                if render(a, v, s) == norm {
                    return Ok(Self::new(a, v, s, None));
                }
            }
        }
        match norm
            .split_whitespace()
            .find(|w| !vocabulary().iter().any(|v| v == w))
        {
            Some(w) => Err(Error::Vocabulary {
                token: w.to_owned(),
            }),
            None => Err(Error::Config(format!(
                "`{text}` is not a sentence of the template grammar"
            ))),
        }
    }

    /// Label identifying the template irrespective of subject wording.
    pub fn class_label(&self) -> (ActionKind, Variant) {
        (self.action, self.variant)
    }
}

fn normalize(text: &str) -> String {
    text.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

/// Fixed-dimension conditioning vector with unit L2 norm.
#[derive(Debug, Clone, PartialEq)]
pub struct TextEmbedding(pub Vec<f64>);

impl TextEmbedding {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn cosine(&self, other: &Self) -> f64 {
        self.0.iter().zip(&other.0).map(|(a, b)| a * b).sum()
    }
}

/// Frozen table of random per-token vectors over the grammar vocabulary.
#[derive(Debug, Clone)]
pub struct TextEmbedder {
    dim: usize,
    table: BTreeMap<String, Vec<f64>>,
}

impl TextEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        let mut r = rng::derived(seed, rng::stream::TEXT_TABLE, 0);
        let table = vocabulary()
            .into_iter()
            .map(|w| {
                let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(&mut r)).collect();
                (w, v)
            })
            .collect();
        Self { dim, table }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Mean of the token vectors, L2-normalized.
    pub fn embed(&self, text: &str) -> Result<TextEmbedding> {
        let mut acc = vec![0.0; self.dim];
        let mut n = 0usize;
        for tok in text.split_whitespace() {
            let tok = tok.to_lowercase();
            let v = self
                .table
                .get(&tok)
                .ok_or(Error::Vocabulary { token: tok.clone() })?;
            acc.iter_mut().zip(v).for_each(|(a, b)| *a += b);
            n += 1;
        }
        if n == 0 {
            return Err(Error::Domain("cannot embed an empty description".into()));
        }
        let norm = acc.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            return Err(Error::Numerical("token vectors cancel to zero".into()));
        }
        Ok(TextEmbedding(acc.into_iter().map(|x| x / norm).collect()))
    }

    pub fn embed_descriptor(&self, d: &TextDescriptor) -> Result<TextEmbedding> {
        self.embed(&d.text)
    }
}
