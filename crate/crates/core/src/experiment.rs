//! Pipeline stages shared by the command line, the Python bindings, and the end-to-end tests.
//!
//! Every stage is a pure function of the configuration, the master seed, and its input
//! artifacts.

use std::fs;
use std::path::{Path, PathBuf};

use log::info;

use crate::analysis::{
    attention_map, chunking_score, latent_occupancy, length_sweep, AttentionMap, SubspaceUsage, SweepRow,
};
use crate::checkpoint::{config_digest, load_checkpoint, save_checkpoint, Component};
use crate::config::ExperimentConfig;
use crate::corpus::io::{read_corpus, read_normalizer, write_corpus, write_normalizer};
use crate::corpus::{
    generate_corpus, CorpusSample, MotionSequence, Normalizer, Split, TextDescriptor, TextEmbedder, TextEmbedding,
};
use crate::error::{Error, Result};
use crate::eval::{evaluate, train_extractors, EvalSet, FeatureExtractors, MetricReport};
use crate::ladiff::{encode_posteriors, sample_latent, train_denoiser, Denoiser, DiffusionGenerator, NoiseSchedule};
use crate::lavae::{train_vae, LaVae};
use crate::rng;
use crate::training::{EpochRecord, TrainingLog};

pub const CORPUS_FILE: &str = "corpus.ladc";
pub const NORMALIZER_FILE: &str = "normalizer.ladn";
pub const VAE_FILE: &str = "vae.ladk";
pub const DENOISER_FILE: &str = "denoiser.ladk";
pub const EXTRACTOR_FILE: &str = "extractor.ladk";
pub const METRICS_FILE: &str = "metrics.txt";

/// Normalized motions and caption embeddings of one split, in corpus order.
#[derive(Debug, Clone, Default)]
pub struct SplitData {
    pub ids: Vec<u32>,
    pub motions: Vec<MotionSequence>,
    pub texts: Vec<TextEmbedding>,
    pub captions: Vec<TextDescriptor>,
}

impl SplitData {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn motion_refs(&self) -> Vec<&MotionSequence> {
        self.motions.iter().collect()
    }

    pub fn text_refs(&self) -> Vec<&TextEmbedding> {
        self.texts.iter().collect()
    }
}

#[derive(Debug, Clone)]
pub struct Dataset {
    pub normalizer: Normalizer,
    pub embedder: TextEmbedder,
    pub train: SplitData,
    pub val: SplitData,
    pub test: SplitData,
}

impl Dataset {
    /// Generates the corpus in memory and fits the normalizer on its training split.
    pub fn generate(config: &ExperimentConfig) -> Result<Self> {
        let samples = generate_corpus(&config.corpus, config.seed)?;
        let normalizer = fit_normalizer(&samples)?;
        Self::from_samples(config, &samples, normalizer)
    }

    pub fn from_samples(config: &ExperimentConfig, samples: &[CorpusSample], normalizer: Normalizer) -> Result<Self> {
        let embedder = config.corpus.embedder();
        let mut splits = [SplitData::default(), SplitData::default(), SplitData::default()];
        for s in samples {
            config.corpus.check_frames(s.motion.frames())?;
            let d = &mut splits[usize::from(s.split.tag())];
            d.ids.push(s.id);
            d.motions.push(normalizer.normalize(&s.motion)?);
            d.texts.push(embedder.embed_descriptor(&s.descriptor)?);
            d.captions.push(s.descriptor.clone());
        }
        let [train, val, test] = splits;
        for (what, split) in [("training samples", &train), ("validation samples", &val), ("test samples", &test)] {
            if split.is_empty() {
                return Err(Error::InsufficientData { what, needed: 1, available: 0 });
            }
        }
        Ok(Self { normalizer, embedder, train, val, test })
    }

    /// Reads the corpus and normalizer written by [`write_corpus_artifacts`].
    pub fn load(config: &ExperimentConfig) -> Result<Self> {
        let samples = read_corpus(&config.path(CORPUS_FILE))?;
        let normalizer = read_normalizer(&config.path(NORMALIZER_FILE))?;
        Self::from_samples(config, &samples, normalizer)
    }

    pub fn split(&self, split: Split) -> &SplitData {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub fn eval_set(&self) -> EvalSet {
        EvalSet { motions: self.test.motions.clone(), texts: self.test.texts.clone() }
    }

    pub fn embed(&self, caption: &str) -> Result<TextEmbedding> {
        self.embedder.embed(&TextDescriptor::parse(caption)?.text)
    }
}

/// Per-channel statistics of the training split.
pub fn fit_normalizer(samples: &[CorpusSample]) -> Result<Normalizer> {
    Normalizer::fit(samples.iter().filter(|s| s.split == Split::Train).map(|s| &s.motion))
}

/// Generates the corpus, writes it with its normalizer, and returns both.
pub fn write_corpus_artifacts(config: &ExperimentConfig) -> Result<(Vec<CorpusSample>, Normalizer)> {
    let samples = generate_corpus(&config.corpus, config.seed)?;
    let normalizer = fit_normalizer(&samples)?;
    write_corpus(&config.path(CORPUS_FILE), &samples)?;
    write_normalizer(&config.path(NORMALIZER_FILE), &normalizer, config.corpus.fps)?;
    Ok((samples, normalizer))
}

fn log_epoch(stage: &'static str) -> impl FnMut(&EpochRecord) {
    move |e| info!("{stage} {}", e.to_line())
}

pub fn fit_vae(config: &ExperimentConfig, data: &Dataset) -> Result<(LaVae<f32>, TrainingLog)> {
    let mut vae = LaVae::new(config.lavae.clone(), config.seed)?;
    let log = train_vae(&mut vae, &data.train.motions, &config.vae_train, config.seed, log_epoch("vae"))?;
    Ok((vae, log))
}

pub fn fit_denoiser(config: &ExperimentConfig, vae: &LaVae<f32>, data: &Dataset) -> Result<(Denoiser<f32>, TrainingLog)> {
    let items = encode_posteriors(vae, &data.train.motion_refs(), &data.train.texts)?;
    let mut denoiser = Denoiser::new(config.denoiser.clone(), config.seed)?;
    let schedule = config.diffusion.schedule()?;
    let log = train_denoiser(
        &mut denoiser,
        vae,
        &items,
        &schedule,
        &config.denoiser_train,
        config.seed,
        log_epoch("denoiser"),
    )?;
    Ok((denoiser, log))
}

pub fn fit_extractors(config: &ExperimentConfig, data: &Dataset) -> Result<(FeatureExtractors<f32>, TrainingLog)> {
    let mut ex = FeatureExtractors::new(config.extractor.clone(), config.seed)?;
    let log = train_extractors(
        &mut ex,
        (&data.train.motion_refs(), &data.train.text_refs()),
        (&data.val.motion_refs(), &data.val.text_refs()),
        &config.extractor_train,
        config.seed,
        log_epoch("extractor"),
    )?;
    info!("extractor validation margin {:.4}", ex.margin());
    Ok((ex, log))
}

/// Trained models of one experiment.
#[derive(Debug, Clone)]
pub struct Models {
    pub vae: LaVae<f32>,
    pub denoiser: Denoiser<f32>,
    pub schedule: NoiseSchedule,
}

impl Models {
    pub fn generator(&self, config: &ExperimentConfig) -> DiffusionGenerator<'_, f32, f32> {
        DiffusionGenerator {
            vae: &self.vae,
            denoiser: &self.denoiser,
            schedule: &self.schedule,
            sampler: config.diffusion.sampler,
            min_frames: config.corpus.min_frames,
        }
    }

    /// Samples a normalized motion of `frames` frames for `text`.
    pub fn sample(&self, config: &ExperimentConfig, text: &TextEmbedding, frames: usize, seed: u64) -> Result<MotionSequence> {
        use crate::eval::{GenerationRequest, MotionGenerator};
        let mut r = rng::derived(seed, rng::stream::SAMPLE, 0);
        self.generator(config).generate(&GenerationRequest { index: 0, text, frames }, &mut r)
    }
}

pub fn vae_digest(config: &ExperimentConfig) -> [u8; 32] {
    config_digest(&(&config.lavae, &config.corpus))
}

/// The denoiser is only meaningful on top of the autoencoder it was trained against.
/// Inference-only settings (sampler, step count) stay out so they can change freely.
pub fn denoiser_digest(config: &ExperimentConfig) -> [u8; 32] {
    let d = &config.diffusion;
    config_digest(&(&config.denoiser, d.steps, d.schedule, vae_digest(config)))
}

pub fn extractor_digest(config: &ExperimentConfig) -> [u8; 32] {
    config_digest(&(&config.extractor, &config.corpus))
}

pub fn save_vae(config: &ExperimentConfig, vae: &LaVae<f32>) -> Result<PathBuf> {
    let path = config.path(VAE_FILE);
    save_checkpoint(&path, Component::Vae, &vae_digest(config), vae.store())?;
    Ok(path)
}

pub fn load_vae(config: &ExperimentConfig) -> Result<LaVae<f32>> {
    let mut vae = LaVae::new(config.lavae.clone(), config.seed)?;
    vae.replace_parameters(load_checkpoint(&config.path(VAE_FILE), Component::Vae, &vae_digest(config))?)?;
    Ok(vae)
}

pub fn save_denoiser(config: &ExperimentConfig, denoiser: &Denoiser<f32>) -> Result<PathBuf> {
    let path = config.path(DENOISER_FILE);
    save_checkpoint(&path, Component::Denoiser, &denoiser_digest(config), denoiser.store())?;
    Ok(path)
}

pub fn load_denoiser(config: &ExperimentConfig) -> Result<Denoiser<f32>> {
    let mut d = Denoiser::new(config.denoiser.clone(), config.seed)?;
    d.replace_parameters(load_checkpoint(&config.path(DENOISER_FILE), Component::Denoiser, &denoiser_digest(config))?)?;
    Ok(d)
}

pub fn save_extractors(config: &ExperimentConfig, ex: &FeatureExtractors<f32>) -> Result<PathBuf> {
    let path = config.path(EXTRACTOR_FILE);
    save_checkpoint(&path, Component::Extractor, &extractor_digest(config), ex.store())?;
    Ok(path)
}

pub fn load_extractors(config: &ExperimentConfig) -> Result<FeatureExtractors<f32>> {
    let mut ex = FeatureExtractors::new(config.extractor.clone(), config.seed)?;
    ex.replace_parameters(load_checkpoint(
        &config.path(EXTRACTOR_FILE),
        Component::Extractor,
        &extractor_digest(config),
    )?)?;
    Ok(ex)
}

pub fn load_models(config: &ExperimentConfig) -> Result<Models> {
    Ok(Models { vae: load_vae(config)?, denoiser: load_denoiser(config)?, schedule: config.diffusion.schedule()? })
}

pub fn evaluate_models(
    config: &ExperimentConfig,
    models: &Models,
    extractors: &FeatureExtractors<f32>,
    data: &Dataset,
) -> Result<MetricReport> {
    let seed = rng::derive_seed(config.seed, rng::stream::EVALUATE, 0);
    evaluate(&models.generator(config), &data.eval_set(), extractors, &config.eval, seed)
}

/// Outputs of the latent-space and attention diagnostics.
#[derive(Debug, Clone)]
pub struct AnalysisReport {
    /// One dynamics sweep per configured caption.
    pub sweeps: Vec<(String, Vec<SweepRow>)>,
    /// Attention map per configured length with its chunking score when at least two slots are active.
    pub attention: Vec<(AttentionMap, Option<f64>)>,
    /// Occupancy of the test split.
    pub occupancy: SubspaceUsage,
}

pub fn analyze(config: &ExperimentConfig, models: &Models, data: &Dataset) -> Result<AnalysisReport> {
    let a = &config.analysis;
    let r = config.lavae.frames_per_latent;
    let seed = rng::derive_seed(config.seed, rng::stream::ANALYSIS, 0);
    let generator = models.generator(config);
    let sweeps = a
        .captions
        .iter()
        .map(|c| Ok((c.clone(), length_sweep(&generator, &data.normalizer, &data.embed(c)?, &a.lengths, r, seed)?)))
        .collect::<Result<Vec<_>>>()?;

    let caption = a.captions.first().map_or("a person walks forward", String::as_str);
    let text = data.embed(caption)?;
    let mut attention = Vec::new();
    for &frames in &a.attention_lengths {
        let k = config.lavae.active_slots(frames)?;
        let mut rr = rng::derived(seed, rng::stream::ANALYSIS, 1 + frames as u64);
        let mut z = sample_latent(
            &models.denoiser,
            &models.schedule,
            config.diffusion.sampler,
            &text,
            k,
            config.lavae.latent_dim,
            &mut rr,
        )?;
        let scale = models.denoiser.latent_scale();
        z.values.iter_mut().for_each(|x| *x *= scale);
        let map = attention_map(&models.vae, &z, frames)?;
        let score = if k >= 2 { Some(chunking_score(&map, r)?) } else { None };
        attention.push((map, score));
    }

    let pairs: Vec<(u32, &MotionSequence)> = data.test.ids.iter().copied().zip(&data.test.motions).collect();
    let occupancy = latent_occupancy(&models.vae, &pairs)?;
    Ok(AnalysisReport { sweeps, attention, occupancy })
}

/// Writes every analysis artifact under `dir` and returns the paths written.
pub fn write_analysis(report: &AnalysisReport, frames_per_latent: usize, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, text: String| -> Result<()> {
        let p = dir.join(name);
        fs::write(&p, text)?;
        written.push(p);
        Ok(())
    };
    for (i, (caption, rows)) in report.sweeps.iter().enumerate() {
        put(format!("sweep_{i}.txt"), format!("# caption: {caption}\n{}", crate::analysis::sweep_text(rows)))?;
    }
    let mut scores = String::from("# chunking frames slots score\n");
    for (map, score) in &report.attention {
        put(format!("attention_{}.txt", map.frames), map.to_grid(frames_per_latent))?;
        let s = score.map_or("n/a".to_owned(), |s| format!("{s:.4}"));
        scores.push_str(&format!("{} {} {s}\n", map.frames, map.slots));
    }
    put("chunking.txt".into(), scores)?;
    put("occupancy.txt".into(), report.occupancy.histogram_text(frames_per_latent))?;
    put("latents.txt".into(), report.occupancy.coordinates_text(frames_per_latent))?;
    Ok(written)
}

/// One ablation cell: a label naming the changed axis and the full configuration.
#[derive(Debug, Clone)]
pub struct AblationCell {
    pub label: String,
    pub config: ExperimentConfig,
}

/// Enumerates the grid one axis at a time. Each cell trains at the reduced budget, evaluates
/// with the cell replicate count, and writes under its own directory.
pub fn ablation_cells(base: &ExperimentConfig) -> Result<Vec<AblationCell>> {
    let a = &base.ablate;
    let mut cells = Vec::new();
    let mut push = |label: String, edit: &dyn Fn(&mut ExperimentConfig)| -> Result<()> {
        let mut c = base.clone();
        edit(&mut c);
        for t in [&mut c.vae_train, &mut c.denoiser_train] {
            t.epochs = ((t.epochs as f64 * a.budget).round() as usize).max(1);
        }
        c.eval.replicates = a.replicates;
        c.out_dir = base.out_dir.join("ablate").join(&label);
        c.resolve()?;
        cells.push(AblationCell { label, config: c });
        Ok(())
    };
    for &w in &a.frames_per_latent {
        push(format!("r={w}"), &|c| c.lavae.frames_per_latent = w.resolve(c.corpus.max_frames))?;
    }
    for &f in &a.dvae_fraction {
        push(format!("noise={f}"), &|c| c.lavae.dvae_fraction = f)?;
    }
    for &la in &a.length_aware {
        push(format!("length_aware={la}"), &|c| c.lavae.length_aware = la)?;
    }
    for &t in &a.dvae_target {
        let name = match t {
            crate::lavae::DvaeTarget::Input => "input",
            crate::lavae::DvaeTarget::Latent => "latent",
        };
        push(format!("dvae_target={name}"), &|c| c.lavae.dvae_target = t)?;
    }
    Ok(cells)
}

/// Trains and evaluates one cell against shared, already validated extractors.
pub fn run_cell(cell: &AblationCell, data: &Dataset, extractors: &FeatureExtractors<f32>) -> Result<MetricReport> {
    let c = &cell.config;
    info!("ablation cell {} (K = {})", cell.label, c.max_slots());
    let (vae, _) = fit_vae(c, data)?;
    let (denoiser, _) = fit_denoiser(c, &vae, data)?;
    let models = Models { vae, denoiser, schedule: c.diffusion.schedule()? };
    let report = evaluate_models(c, &models, extractors, data)?;
    fs::create_dir_all(&c.out_dir)?;
    fs::write(c.path(METRICS_FILE), format!("# cell {}\n{}", cell.label, report.to_text()))?;
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cells_differ_from_the_base_on_one_axis() {
        let base = ExperimentConfig::desk();
        let cells = ablation_cells(&base).unwrap();
        let a = &base.ablate;
        assert_eq!(
            cells.len(),
            a.frames_per_latent.len() + a.dvae_fraction.len() + a.length_aware.len() + a.dvae_target.len()
        );
        let all = cells.iter().find(|c| c.label == "r=all").unwrap();
        assert_eq!(all.config.lavae.frames_per_latent, base.corpus.max_frames);
        assert_eq!(all.config.max_slots(), 1);
        for cell in &cells {
            let mut c = cell.config.clone();
            c.lavae = base.lavae.clone();
            c.denoiser = base.denoiser.clone();
            c.vae_train.epochs = base.vae_train.epochs;
            c.denoiser_train.epochs = base.denoiser_train.epochs;
            c.eval.replicates = base.eval.replicates;
            c.out_dir = base.out_dir.clone();
            assert_eq!(c, base, "{}", cell.label);
        }
    }

    #[test]
    fn small_r_grid_has_one_cell_per_value() {
        let text = "[ablate]\nframes_per_latent = [16, 32, 48, 64]\ndvae_fraction = []\nlength_aware = []\ndvae_target = []\n";
        let cells = ablation_cells(&ExperimentConfig::from_toml(text).unwrap()).unwrap();
        let ks: Vec<usize> = cells.iter().map(|c| c.config.max_slots()).collect();
        assert_eq!(ks, vec![13, 7, 5, 4]);
    }

    #[test]
    fn dataset_splits_are_disjoint_and_normalized() {
        let mut c = ExperimentConfig::desk();
        c.corpus.samples = 60;
        c.resolve().unwrap();
        let d = Dataset::generate(&c).unwrap();
        assert_eq!(d.train.len() + d.val.len() + d.test.len(), 60);
        let dim = d.normalizer.dim();
        let mut sum = vec![0.0; dim];
        let mut n = 0.0;
        for m in &d.train.motions {
            for f in 0..m.frames() {
                m.frame(f).iter().zip(&mut sum).for_each(|(x, s)| *s += x);
                n += 1.0;
            }
        }
        assert!(sum.iter().all(|s| (s / n).abs() < 1e-4));
    }
}
