//! Retrieval, distribution, and diversity metrics over a learned text/motion co-embedding,
//! plus joint dynamics statistics.

mod extractor;

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::{index, SliceRandom};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{MotionSequence, TextEmbedding};
use crate::error::{Error, Result};
use crate::rng;

pub use extractor::{train_extractors, ExtractorConfig, FeatureExtractors};

/// Texts per retrieval batch: the true motion plus 31 mismatched ones.
pub const RETRIEVAL_BATCH: usize = 32;

/// Top-1/2/3 retrieval accuracy of real captured motions under the reference extractors of a
/// large public corpus. Kept for comparison only; the synthetic corpus does not reproduce it.
pub const REAL_DATA_R_PRECISION: [f64; 3] = [0.511, 0.703, 0.797];

const Z95: f64 = 1.96;
const EIGEN_TOLERANCE: f64 = 1e-12;
const EIGEN_MAX_ITER: usize = 10_000;
/// Relative floor below which negative covariance eigenvalues count as round-off.
const NEGATIVE_EIGEN_SLACK: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub replicates: usize,
    pub retrieval_batch: usize,
    pub diversity_subset: usize,
    pub mmodality_texts: usize,
    pub mmodality_subset: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            replicates: 20,
            retrieval_batch: RETRIEVAL_BATCH,
            diversity_subset: 50,
            mmodality_texts: 20,
            mmodality_subset: 5,
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.replicates == 0 || self.retrieval_batch < 2 {
            return Err(Error::Config(
                "eval.replicates must be positive and eval.retrieval_batch at least 2".into(),
            ));
        }
        if self.diversity_subset == 0 || self.mmodality_texts == 0 || self.mmodality_subset == 0 {
            return Err(Error::Config("eval subset sizes must be positive".into()));
        }
        Ok(())
    }
}

pub fn euclidean(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn check_paired(motion: &[Vec<f64>], text: &[Vec<f64>]) -> Result<()> {
    if motion.len() != text.len() {
        return Err(Error::Shape(format!(
            "{} motion features but {} text features",
            motion.len(),
            text.len()
        )));
    }
    Ok(())
}

/// Top-1/2/3 retrieval accuracy. Pairs are shuffled into batches of `batch_size` (a trailing
/// partial batch is dropped); within a batch each text ranks every motion by Euclidean
/// distance. A true match counts as top-`n` when fewer than `n` distractors are strictly
/// closer, so exact ties go to the true match.
pub fn r_precision<R: Rng + ?Sized>(
    motion: &[Vec<f64>],
    text: &[Vec<f64>],
    batch_size: usize,
    rng: &mut R,
) -> Result<[f64; 3]> {
    check_paired(motion, text)?;
    if motion.len() < batch_size || batch_size == 0 {
        return Err(Error::InsufficientData {
            what: "retrieval pairs",
            needed: batch_size.max(1),
            available: motion.len(),
        });
    }
    let mut order: Vec<usize> = (0..motion.len()).collect();
    order.shuffle(rng);
    let mut hits = [0usize; 3];
    let mut total = 0usize;
    for batch in order.chunks_exact(batch_size) {
        for &i in batch {
            let own = euclidean(&text[i], &motion[i]);
            let closer = batch
                .iter()
                .filter(|&&j| j != i && euclidean(&text[i], &motion[j]) < own)
                .count();
            for (n, h) in hits.iter_mut().enumerate() {
                if closer <= n {
                    *h += 1;
                }
            }
            total += 1;
        }
    }
    Ok(hits.map(|h| h as f64 / total as f64))
}

/// Mean Euclidean distance between matched motion and text features.
pub fn mm_dist(motion: &[Vec<f64>], text: &[Vec<f64>]) -> Result<f64> {
    check_paired(motion, text)?;
    if motion.is_empty() {
        return Err(Error::Domain("multimodal distance of an empty set".into()));
    }
    Ok(motion
        .iter()
        .zip(text)
        .map(|(m, t)| euclidean(m, t))
        .sum::<f64>()
        / motion.len() as f64)
}

fn moments(feats: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let n = feats.len();
    if n < 2 {
        return Err(Error::InsufficientData {
            what: "feature vectors for a covariance",
            needed: 2,
            available: n,
        });
    }
    let d = feats[0].len();
    if feats.iter().any(|f| f.len() != d) {
        return Err(Error::Shape("features of mixed width".into()));
    }
    let x = DMatrix::from_fn(n, d, |i, j| feats[i][j]);
    let mean = x.row_mean().transpose();
    let centered = DMatrix::from_fn(n, d, |i, j| x[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (n - 1) as f64;
    Ok((mean, cov))
}

/// Eigen-decomposition of a symmetric PSD matrix with round-off negatives clipped.
fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let sym = (&m + m.transpose()) * 0.5;
    let mut eig =
        SymmetricEigen::try_new(sym, EIGEN_TOLERANCE, EIGEN_MAX_ITER).ok_or_else(|| {
            Error::Numerical(format!("eigen-decomposition of {what} did not converge"))
        })?;
    let hi = eig.eigenvalues.max();
    let lo = eig.eigenvalues.min();
    if lo < -NEGATIVE_EIGEN_SLACK * hi.abs().max(1.0) {
        return Err(Error::Numerical(format!(
            "{what} is not positive semidefinite: eigenvalues span [{lo:e}, {hi:e}]"
        )));
    }
    eig.eigenvalues.iter_mut().for_each(|v| *v = v.max(0.0));
    Ok(eig)
}

/// Frechet distance between Gaussian fits of two feature sets:
/// `|mu_a - mu_b|^2 + tr(S_a + S_b - 2 (S_a S_b)^(1/2))`.
pub fn fid(real: &[Vec<f64>], generated: &[Vec<f64>]) -> Result<f64> {
    let (mu_a, cov_a) = moments(real)?;
    let (mu_b, cov_b) = moments(generated)?;
    if mu_a.len() != mu_b.len() {
        return Err(Error::Shape("feature sets of different width".into()));
    }
    // tr((S_a S_b)^(1/2)) = tr((R S_b R)^(1/2)) with R = S_a^(1/2), which is symmetric
    let ea = psd_eigen(cov_a.clone(), "the first covariance")?;
    let root = &ea.eigenvectors
        * DMatrix::from_diagonal(&ea.eigenvalues.map(f64::sqrt))
        * ea.eigenvectors.transpose();
    let inner = psd_eigen(&root * &cov_b * &root, "the covariance product")?;
    let cross: f64 = inner.eigenvalues.iter().map(|v| v.sqrt()).sum();
    let value = (&mu_a - &mu_b).norm_squared() + cov_a.trace() + cov_b.trace() - 2.0 * cross;
    if !value.is_finite() {
        return Err(Error::Numerical("non-finite Frechet distance".into()));
    }
    Ok(value.max(0.0))
}

/// Mean distance between corresponding members of two disjoint random subsets of `subset` features.
pub fn diversity<R: Rng + ?Sized>(feats: &[Vec<f64>], subset: usize, rng: &mut R) -> Result<f64> {
    if subset == 0 || feats.len() < 2 * subset {
        return Err(Error::InsufficientData {
            what: "features for diversity",
            needed: 2 * subset.max(1),
            available: feats.len(),
        });
    }
    let idx = index::sample(rng, feats.len(), 2 * subset).into_vec();
    let (a, b) = idx.split_at(subset);
    Ok(a.iter()
        .zip(b)
        .map(|(&i, &j)| euclidean(&feats[i], &feats[j]))
        .sum::<f64>()
        / subset as f64)
}

/// Within-text diversity of repeated generations, averaged over `texts` randomly chosen texts.
pub fn mmodality<R: Rng + ?Sized>(
    per_text: &[Vec<Vec<f64>>],
    texts: usize,
    subset: usize,
    rng: &mut R,
) -> Result<f64> {
    let eligible: Vec<usize> = (0..per_text.len())
        .filter(|&i| per_text[i].len() >= 2 * subset)
        .collect();
    if texts == 0 || eligible.len() < texts {
        return Err(Error::InsufficientData {
            what: "texts with enough generations",
            needed: texts.max(1),
            available: eligible.len(),
        });
    }
    let chosen = index::sample(rng, eligible.len(), texts).into_vec();
    let mut sum = 0.0;
    for c in chosen {
        sum += diversity(&per_text[eligible[c]], subset, rng)?;
    }
    Ok(sum / texts as f64)
}

/// Joint speed and acceleration magnitudes in metric units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DynamicsStats {
    /// Mean joint speed, m/s.
    pub avg_vel: f64,
    /// Mean joint acceleration magnitude, m/s^2.
    pub avg_acc: f64,
    pub max_acc: f64,
}

/// Finite-difference dynamics of the world-space joint positions of an unnormalized motion.
pub fn dynamics_stats(motion: &MotionSequence) -> Result<DynamicsStats> {
    let f = motion.frames();
    if f < 3 {
        return Err(Error::InsufficientData {
            what: "motion frames",
            needed: 3,
            available: f,
        });
    }
    let layout = motion.layout().ok_or_else(|| {
        Error::Shape(format!(
            "{} channels do not form a pose layout",
            motion.pose_dim()
        ))
    })?;
    let fps = f64::from(motion.fps());
    let world: Vec<Vec<[f64; 3]>> = (0..f)
        .map(|i| {
            (0..layout.joints)
                .map(|j| motion.pose(i).world_position(j))
                .collect()
        })
        .collect();
    let norm = |v: [f64; 3]| (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt();
    let mut vel = 0.0;
    for i in 1..f {
        for j in 0..layout.joints {
            let (a, b) = (world[i - 1][j], world[i][j]);
            vel += norm([b[0] - a[0], b[1] - a[1], b[2] - a[2]]) * fps;
        }
    }
    let (mut acc, mut max_acc) = (0.0, 0.0f64);
    for i in 1..f - 1 {
        for j in 0..layout.joints {
            let (a, b, c) = (world[i - 1][j], world[i][j], world[i + 1][j]);
            let m = norm([
                c[0] - 2.0 * b[0] + a[0],
                c[1] - 2.0 * b[1] + a[1],
                c[2] - 2.0 * b[2] + a[2],
            ]) * fps
                * fps;
            acc += m;
            max_acc = max_acc.max(m);
        }
    }
    Ok(DynamicsStats {
        avg_vel: vel / ((f - 1) * layout.joints) as f64,
        avg_acc: acc / ((f - 2) * layout.joints) as f64,
        max_acc,
    })
}

/// Metric names in report order.
pub const METRICS: [&str; 7] = [
    "r_precision_top1",
    "r_precision_top2",
    "r_precision_top3",
    "fid",
    "mm_dist",
    "diversity",
    "mmodality",
];

/// Replicate means with 95% normal-approximation half-widths (absent for a single replicate).
#[derive(Debug, Clone, PartialEq)]
pub struct MetricReport {
    pub r_precision: [f64; 3],
    pub fid: f64,
    pub mm_dist: f64,
    pub diversity: f64,
    pub mmodality: f64,
    /// Half-widths in [`METRICS`] order.
    pub ci95: Option<[f64; 7]>,
    pub replicates: usize,
}

impl MetricReport {
    pub fn values(&self) -> [f64; 7] {
        let [a, b, c] = self.r_precision;
        [
            a,
            b,
            c,
            self.fid,
            self.mm_dist,
            self.diversity,
            self.mmodality,
        ]
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        METRICS
            .iter()
            .position(|&m| m == name)
            .map(|i| self.values()[i])
    }

    /// Aggregates per-replicate metric vectors in [`METRICS`] order.
    pub fn from_replicates(rows: &[[f64; 7]]) -> Result<Self> {
        let n = rows.len();
        if n == 0 {
            return Err(Error::InsufficientData {
                what: "metric replicates",
                needed: 1,
                available: 0,
            });
        }
        let mean: [f64; 7] =
            std::array::from_fn(|k| rows.iter().map(|r| r[k]).sum::<f64>() / n as f64);
        let ci95 = (n > 1).then(|| {
            std::array::from_fn(|k| {
                let var =
                    rows.iter().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / (n - 1) as f64;
                Z95 * var.sqrt() / (n as f64).sqrt()
            })
        });
        let report = Self {
            r_precision: [mean[0], mean[1], mean[2]],
            fid: mean[3],
            mm_dist: mean[4],
            diversity: mean[5],
            mmodality: mean[6],
            ci95,
            replicates: n,
        };
        if report.values().iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical("non-finite metric in report".into()));
        }
        Ok(report)
    }

    /// Flat `key = value` text with fixed key order; half-widths are `n/a` for one replicate.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let values = self.values();
        for (name, v) in METRICS.iter().zip(values) {
            let _ = writeln!(s, "{name} = {v:.6}");
        }
        for (k, name) in METRICS.iter().enumerate() {
            match &self.ci95 {
                Some(ci) => {
                    let _ = writeln!(s, "{name}_ci95 = {:.6}", ci[k]);
                }
                None => {
                    let _ = writeln!(s, "{name}_ci95 = n/a");
                }
            }
        }
        let _ = writeln!(s, "replicates = {}", self.replicates);
        s
    }
}

/// One generation to perform: the evaluation item it belongs to, its caption, and its length.
#[derive(Debug, Clone, Copy)]
pub struct GenerationRequest<'a> {
    pub index: usize,
    pub text: &'a TextEmbedding,
    pub frames: usize,
}

/// Anything that produces normalized motions for captions and target lengths.
pub trait MotionGenerator: Sync {
    fn generate(
        &self,
        request: &GenerationRequest<'_>,
        rng: &mut rng::Rng,
    ) -> Result<MotionSequence>;
}

/// Held-out pairs in normalized motion space.
#[derive(Debug, Clone)]
pub struct EvalSet {
    pub motions: Vec<MotionSequence>,
    pub texts: Vec<TextEmbedding>,
}

impl EvalSet {
    pub fn len(&self) -> usize {
        self.motions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.motions.is_empty()
    }
}

/// Regenerates every held-out caption at its ground-truth length once per replicate and
/// aggregates all metrics. Every generation draws from its own seed derived from
/// `(seed, replicate, item)`, so results do not depend on scheduling.
pub fn evaluate<G: MotionGenerator + ?Sized, T: crate::nn::Real>(
    generator: &G,
    set: &EvalSet,
    extractors: &FeatureExtractors<T>,
    config: &EvalConfig,
    seed: u64,
) -> Result<MetricReport> {
    config.validate()?;
    extractors.ensure_validated()?;
    if set.motions.len() != set.texts.len() {
        return Err(Error::Shape(
            "evaluation set motions and captions differ in count".into(),
        ));
    }
    let n = set.len();
    let real_refs: Vec<&MotionSequence> = set.motions.iter().collect();
    let real = extractors.motion_features(&real_refs)?;
    let text = extractors.text_features(&set.texts.iter().collect::<Vec<_>>())?;
    let per_text = 2 * config.mmodality_subset;
    let mut rows = Vec::with_capacity(config.replicates);
    for rep in 0..config.replicates as u64 {
        let item_seed = |tag: u64, i: usize| {
            rng::derive_seed(
                seed,
                rng::stream::EVALUATE,
                (rep << 40) | (tag << 32) | i as u64,
            )
        };
        let generated: Vec<MotionSequence> = (0..n)
            .into_par_iter()
            .map(|i| {
                let req = GenerationRequest {
                    index: i,
                    text: &set.texts[i],
                    frames: set.motions[i].frames(),
                };
                generator.generate(&req, &mut rng::seeded(item_seed(0, i)))
            })
            .collect::<Result<_>>()?;
        let gen = extractors.motion_features(&generated.iter().collect::<Vec<_>>())?;
        let mut r = rng::derived(seed, rng::stream::EVALUATE, (rep << 40) | (3 << 32));
        let rp = r_precision(&gen, &text, config.retrieval_batch, &mut r)?;
        let mm = mm_dist(&gen, &text)?;
        let f = fid(&real, &gen)?;
        let div = diversity(&gen, config.diversity_subset, &mut r)?;
        if n < config.mmodality_texts {
            return Err(Error::InsufficientData {
                what: "captions for multimodality",
                needed: config.mmodality_texts,
                available: n,
            });
        }
        let picked = index::sample(&mut r, n, config.mmodality_texts).into_vec();
        let repeats: Vec<MotionSequence> = (0..picked.len() * per_text)
            .into_par_iter()
            .map(|j| {
                let i = picked[j / per_text];
                let req = GenerationRequest {
                    index: i,
                    text: &set.texts[i],
                    frames: set.motions[i].frames(),
                };
                generator.generate(&req, &mut rng::seeded(item_seed(1, j)))
            })
            .collect::<Result<_>>()?;
        let feats = extractors.motion_features(&repeats.iter().collect::<Vec<_>>())?;
        let groups: Vec<Vec<Vec<f64>>> = feats.chunks(per_text).map(<[Vec<f64>]>::to_vec).collect();
        let mmod = mmodality(
            &groups,
            config.mmodality_texts,
            config.mmodality_subset,
            &mut r,
        )?;
        log::debug!(
            "replicate {rep}: top1 {:.4} fid {f:.4} mm_dist {mm:.4}",
            rp[0]
        );
        rows.push([rp[0], rp[1], rp[2], f, mm, div, mmod]);
    }
    MetricReport::from_replicates(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand_distr::{Distribution, StandardNormal};

    fn gaussian(n: usize, d: usize, shift: &[f64], r: &mut rng::Rng) -> Vec<Vec<f64>> {
        (0..n).map(|_| (0..d).map(|j| { let z: f64 = StandardNormal.sample(r); z } + shift.get(j).copied().unwrap_or(0.0)).collect()).collect()
    }

    #[test]
    fn identical_pairs_are_always_retrieved() {
        let mut r = rng::seeded(1);
        let f = gaussian(64, 4, &[], &mut r);
        assert_eq!(r_precision(&f, &f, 32, &mut r).unwrap(), [1.0, 1.0, 1.0]);
        assert!(matches!(
            r_precision(&f[..31], &f[..31], 32, &mut r),
            Err(Error::InsufficientData { .. })
        ));
    }

    #[test]
    fn random_features_retrieve_at_chance() {
        let mut r = rng::seeded(2);
        let n = 10_016;
        let (m, t) = (gaussian(n, 8, &[], &mut r), gaussian(n, 8, &[], &mut r));
        let rp = r_precision(&m, &t, 32, &mut r).unwrap();
        for (k, v) in rp.iter().enumerate() {
            let p = (k + 1) as f64 / 32.0;
            let sigma = (p * (1.0 - p) / n as f64).sqrt();
            assert!((v - p).abs() < 3.0 * sigma, "top{} = {v}", k + 1);
        }
    }

    #[test]
    fn mm_dist_examples() {
        assert_eq!(mm_dist(&[vec![0.0, 0.0]], &[vec![3.0, 4.0]]).unwrap(), 5.0);
        let a = vec![vec![1.0, 2.0], vec![-1.0, 0.5]];
        assert_eq!(mm_dist(&a, &a).unwrap(), 0.0);
        let b: Vec<Vec<f64>> = a.iter().map(|v| vec![v[0] + 0.6, v[1] - 0.8]).collect();
        assert!((mm_dist(&a, &b).unwrap() - 1.0).abs() < 1e-12);
        assert!(matches!(mm_dist(&[], &[]), Err(Error::Domain(_))));
    }

    #[test]
    fn fid_of_a_set_with_itself_vanishes() {
        let mut r = rng::seeded(3);
        let a = gaussian(300, 16, &[], &mut r);
        assert!(fid(&a, &a).unwrap() < 1e-6);
    }

    #[test]
    fn fid_matches_the_closed_form_for_shifted_gaussians() {
        let mut r = rng::seeded(4);
        let shift = [2.0 / 2f64.sqrt(), 2.0 / 2f64.sqrt()];
        let a = gaussian(10_000, 4, &[], &mut r);
        let b = gaussian(10_000, 4, &shift, &mut r);
        let v = fid(&a, &b).unwrap();
        assert!((v - 4.0).abs() < 0.2, "{v}");
        assert!((v - fid(&b, &a).unwrap()).abs() < 1e-6);
    }

    #[test]
    fn fid_grows_with_the_shift() {
        let mut r = rng::seeded(5);
        let a = gaussian(500, 3, &[], &mut r);
        let mut last = -1.0;
        for s in [0.0, 0.5, 1.0, 2.0] {
            let b: Vec<Vec<f64>> = a
                .iter()
                .map(|v| v.iter().map(|x| x + s).collect())
                .collect();
            let v = fid(&a, &b).unwrap();
            assert!(v > last);
            last = v;
        }
    }

    #[test]
    fn diversity_of_duplicates_is_zero() {
        let f = vec![vec![1.0, -2.0]; 10];
        assert_eq!(diversity(&f, 5, &mut rng::seeded(6)).unwrap(), 0.0);
        assert!(diversity(&f, 6, &mut rng::seeded(6)).is_err());
        let groups = vec![f.clone(), f.clone()];
        assert_eq!(mmodality(&groups, 2, 5, &mut rng::seeded(6)).unwrap(), 0.0);
        assert!(mmodality(&groups, 3, 5, &mut rng::seeded(6)).is_err());
    }

    #[test]
    fn diversity_expectation_matches_enumeration() {
        // two points at distance d, two copies each
        let d = 3.0;
        let f = vec![vec![0.0], vec![0.0], vec![d], vec![d]];
        let mut exact = 0.0;
        let mut perms = 0;
        for a in 0..4 {
            for b in 0..4 {
                for c in 0..4 {
                    for e in 0..4 {
                        let p = [a, b, c, e];
                        if (0..4).all(|i| (0..i).all(|j| p[i] != p[j])) {
                            exact += (euclidean(&f[a], &f[c]) + euclidean(&f[b], &f[e])) / 2.0;
                            perms += 1;
                        }
                    }
                }
            }
        }
        exact /= perms as f64;
        let mut r = rng::seeded(7);
        let n = 40_000;
        let mc = (0..n)
            .map(|_| diversity(&f, 2, &mut r).unwrap())
            .sum::<f64>()
            / n as f64;
        assert!((mc - exact).abs() < 0.03, "{mc} vs {exact}");
        assert_eq!(
            diversity(&f, 2, &mut rng::seeded(8)).unwrap(),
            diversity(&f, 2, &mut rng::seeded(8)).unwrap()
        );
    }

    fn motion_from_world(frames: usize, pos: impl Fn(usize, usize) -> [f64; 3]) -> MotionSequence {
        let layout = crate::corpus::SKELETON;
        let mut data = vec![0.0; frames * layout.dim()];
        for i in 0..frames {
            let row = &mut data[i * layout.dim()..(i + 1) * layout.dim()];
            let root = pos(i, 0);
            for j in 0..layout.joints {
                let p = pos(i, j);
                let o = layout.position(j);
                let v = if j == 0 {
                    p
                } else {
                    [p[0] - root[0], p[1] - root[1], p[2] - root[2]]
                };
                row[o..o + 3].copy_from_slice(&v);
            }
        }
        MotionSequence::new(20, layout.dim(), data).unwrap()
    }

    #[test]
    fn dynamics_of_static_and_uniform_motion() {
        let still = motion_from_world(10, |_, j| [j as f64, 1.0, 0.0]);
        assert_eq!(
            dynamics_stats(&still).unwrap(),
            DynamicsStats {
                avg_vel: 0.0,
                avg_acc: 0.0,
                max_acc: 0.0
            }
        );
        // every joint translates at 1 m/s along x
        let moving = motion_from_world(30, |i, j| [i as f64 / 20.0, j as f64, 0.0]);
        let s = dynamics_stats(&moving).unwrap();
        assert!((s.avg_vel - 1.0).abs() < 1e-9 && s.avg_acc < 1e-9, "{s:?}");
        assert!(dynamics_stats(&motion_from_world(2, |_, _| [0.0; 3])).is_err());
    }

    #[test]
    fn report_aggregates_replicates() {
        let rows = [
            [0.1, 0.2, 0.3, 1.0, 2.0, 3.0, 4.0],
            [0.3, 0.4, 0.5, 3.0, 2.0, 5.0, 2.0],
        ];
        let r = MetricReport::from_replicates(&rows).unwrap();
        assert_eq!(r.r_precision, [0.2, 0.30000000000000004, 0.4]);
        let ci = r.ci95.unwrap();
        assert!((ci[3] - 1.96 * 2f64.sqrt() / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!(ci[4], 0.0);
        let one = MetricReport::from_replicates(&rows[..1]).unwrap();
        assert!(one.ci95.is_none());
        assert!(one.to_text().contains("fid_ci95 = n/a"));
        assert!(r.to_text().lines().count() == 15);
        assert_eq!(r.get("mmodality"), Some(3.0));
    }

    fn arb_features() -> impl Strategy<Value = Vec<Vec<f64>>> {
        prop::collection::vec(prop::collection::vec(-5.0f64..5.0, 3), 64..96)
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn top_k_is_monotone(m in arb_features(), seed in any::<u64>()) {
            let t: Vec<Vec<f64>> = m.iter().map(|v| v.iter().map(|x| x * 0.5 + 0.1).collect()).collect();
            let rp = r_precision(&m, &t, 32, &mut rng::seeded(seed)).unwrap();
            prop_assert!(rp[0] <= rp[1] && rp[1] <= rp[2]);
        }

        #[test]
        fn metrics_scale_with_the_features(a in arb_features(), c in 0.1f64..10.0, seed in any::<u64>()) {
            let b: Vec<Vec<f64>> = a.iter().rev().map(|v| v.iter().map(|x| x + 1.0).collect()).collect();
            let scale = |f: &[Vec<f64>]| -> Vec<Vec<f64>> { f.iter().map(|v| v.iter().map(|x| x * c).collect()).collect() };
            let (ca, cb) = (scale(&a), scale(&b));
            let mm = mm_dist(&a, &b).unwrap();
            prop_assert!((mm_dist(&ca, &cb).unwrap() - c * mm).abs() < 1e-9 * (1.0 + c * mm));
            let div = diversity(&a, 20, &mut rng::seeded(seed)).unwrap();
            prop_assert!((diversity(&ca, 20, &mut rng::seeded(seed)).unwrap() - c * div).abs() < 1e-9 * (1.0 + c * div));
            let f = fid(&a, &b).unwrap();
            prop_assert!((fid(&ca, &cb).unwrap() - c * c * f).abs() < 1e-6 * (1.0 + c * c * f));
        }

        #[test]
        fn reversal_preserves_speed_and_peak_acceleration(seed in any::<u64>(), frames in 3usize..40) {
            let mut r = rng::seeded(seed);
            let data: Vec<f64> = (0..frames * 49).map(|_| r.random_range(-1.0..1.0)).collect();
            let m = MotionSequence::new(20, 49, data).unwrap();
            let (a, b) = (dynamics_stats(&m).unwrap(), dynamics_stats(&m.reversed()).unwrap());
            prop_assert!((a.avg_vel - b.avg_vel).abs() < 1e-9 * a.avg_vel.max(1.0));
            prop_assert!((a.max_acc - b.max_acc).abs() < 1e-9 * a.max_acc.max(1.0));
            prop_assert!(a.max_acc >= a.avg_acc && a.avg_vel >= 0.0);
        }
    }

    struct Replay<'a>(&'a EvalSet);

    impl MotionGenerator for Replay<'_> {
        fn generate(
            &self,
            request: &GenerationRequest<'_>,
            _: &mut rng::Rng,
        ) -> Result<MotionSequence> {
            Ok(self.0.motions[request.index].clone())
        }
    }

    #[test]
    fn evaluation_refuses_unvalidated_extractors() {
        let x = FeatureExtractors::<f32>::new(ExtractorConfig::default(), 0).unwrap();
        let set = EvalSet {
            motions: vec![],
            texts: vec![],
        };
        let r = evaluate(&Replay(&set), &set, &x, &EvalConfig::default(), 0);
        assert!(matches!(r, Err(Error::ExtractorQuality { .. })));
    }
}
