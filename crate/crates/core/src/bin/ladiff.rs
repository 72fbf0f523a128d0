use std::fs;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use log::info;

use ladiff::analysis::subspace_ablation;
use ladiff::config::ExperimentConfig;
use ladiff::corpus::io::write_corpus;
use ladiff::corpus::{CorpusSample, Split, TextDescriptor};
use ladiff::eval::dynamics_stats;
use ladiff::experiment::{self as exp, Dataset};
use ladiff::{rng, Error, Result};

#[derive(Debug, Parser)]
#[command(name = "ladiff", version, about = "Length-aware latent diffusion for text-to-motion synthesis")]
struct Cli {
    /// TOML experiment configuration; built-in defaults when absent.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Overrides the artifact directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus and its normalizer.
    GenCorpus,
    /// Train the length-aware autoencoder.
    TrainVae,
    /// Train the latent denoiser on the frozen autoencoder.
    TrainDenoiser,
    /// Train and validate the evaluation feature extractors.
    TrainExtractors,
    /// Generate one motion for a caption at a target length.
    Sample {
        #[arg(long)]
        text: String,
        #[arg(long)]
        frames: usize,
        /// Inference steps of the sampler.
        #[arg(long)]
        steps: Option<usize>,
        /// Comma-separated 1-based slots kept active; the rest are replaced.
        #[arg(long, value_delimiter = ',')]
        active_set: Option<Vec<usize>>,
        /// Also write velocity and acceleration statistics.
        #[arg(long)]
        dynamics: bool,
    },
    /// Compute the metric report on the test split.
    Evaluate {
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Export attention maps, occupancy, latent coordinates, and length sweeps.
    Analyze {
        #[arg(long, value_delimiter = ',')]
        lengths: Option<Vec<usize>>,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Train and evaluate every cell of the ablation grid at reduced budget.
    Ablate,
}

fn resolve(cli: &Cli) -> Result<ExperimentConfig> {
    let mut c = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(o) = &cli.out {
        c.out_dir = o.clone();
    }
    match &cli.command {
        Command::Sample { steps, .. } | Command::Evaluate { steps } => set_steps(&mut c, *steps),
        Command::Analyze { lengths, steps } => {
            set_steps(&mut c, *steps);
            if let Some(l) = lengths {
                c.analysis.lengths = l.clone();
            }
        }
        _ => {}
    }
    c.resolve()?;
    Ok(c)
}

fn set_steps(c: &mut ExperimentConfig, steps: Option<usize>) {
    if let Some(s) = steps {
        c.diffusion.inference_steps = s;
    }
}

fn run(cli: &Cli) -> Result<()> {
    let c = resolve(cli)?;
    eprintln!("# resolved configuration (seed {})\n{}", c.seed, c.to_toml());
    fs::create_dir_all(&c.out_dir)?;
    fs::write(c.path("resolved.toml"), c.to_toml())?;
    match &cli.command {
        Command::GenCorpus => {
            let (samples, _) = exp::write_corpus_artifacts(&c)?;
            let count = |s| samples.iter().filter(|x| x.split == s).count();
            println!(
                "wrote {} samples (train {}, val {}, test {}) to {}",
                samples.len(),
                count(Split::Train),
                count(Split::Val),
                count(Split::Test),
                c.path(exp::CORPUS_FILE).display()
            );
        }
        Command::TrainVae => {
            let data = Dataset::load(&c)?;
            info!("K = {} slots of {} coordinates", c.max_slots(), c.lavae.latent_dim);
            let (vae, log) = exp::fit_vae(&c, &data)?;
            fs::write(c.path("vae_train.log"), log.to_text())?;
            println!("wrote {}", exp::save_vae(&c, &vae)?.display());
        }
        Command::TrainDenoiser => {
            let data = Dataset::load(&c)?;
            let vae = exp::load_vae(&c)?;
            let (denoiser, log) = exp::fit_denoiser(&c, &vae, &data)?;
            fs::write(c.path("denoiser_train.log"), log.to_text())?;
            println!("wrote {}", exp::save_denoiser(&c, &denoiser)?.display());
        }
        Command::TrainExtractors => {
            let data = Dataset::load(&c)?;
            let (ex, log) = exp::fit_extractors(&c, &data)?;
            fs::write(c.path("extractor_train.log"), log.to_text())?;
            println!("validation margin {:.4}", ex.margin());
            println!("wrote {}", exp::save_extractors(&c, &ex)?.display());
        }
        Command::Sample { text, frames, active_set, dynamics, .. } => {
            c.corpus.check_frames(*frames)?;
            let descriptor = TextDescriptor::parse(text)?;
            let data = Dataset::load(&c)?;
            let models = exp::load_models(&c)?;
            let k = c.lavae.active_slots(*frames)?;
            info!("k={k} active latent slots for {frames} frames (r={})", c.lavae.frames_per_latent);
            let embedding = data.embed(text)?;
            let normalized = match active_set {
                Some(active) => {
                    let mut r = rng::derived(c.seed, rng::stream::SAMPLE, 0);
                    let (vae, den, s) = (&models.vae, &models.denoiser, &models.schedule);
                    let sampler = c.diffusion.sampler;
                    subspace_ablation(vae, den, s, &embedding, *frames, active, c.analysis.inactive, sampler, &mut r)?
                }
                None => models.sample(&c, &embedding, *frames, c.seed)?,
            };
            let motion = data.normalizer.denormalize(&normalized)?;
            let path = c.path("sample.ladc");
            let sample = CorpusSample { id: 0, motion: motion.clone(), descriptor, split: Split::Test };
            write_corpus(&path, std::slice::from_ref(&sample))?;
            println!("wrote {} ({frames} frames, k={k})", path.display());
            if *dynamics {
                let s = dynamics_stats(&motion)?;
                let text = format!("avg_vel = {:.6}\navg_acc = {:.6}\nmax_acc = {:.6}\n", s.avg_vel, s.avg_acc, s.max_acc);
                fs::write(c.path("sample_dynamics.txt"), &text)?;
                print!("{text}");
            }
        }
        Command::Evaluate { .. } => {
            let data = Dataset::load(&c)?;
            let models = exp::load_models(&c)?;
            let ex = exp::load_extractors(&c)?;
            let report = exp::evaluate_models(&c, &models, &ex, &data)?;
            fs::write(c.path(exp::METRICS_FILE), report.to_text())?;
            print!("{}", report.to_text());
        }
        Command::Analyze { .. } => {
            let data = Dataset::load(&c)?;
            let models = exp::load_models(&c)?;
            let report = exp::analyze(&c, &models, &data)?;
            for (map, score) in &report.attention {
                if let Some(s) = score {
                    info!("chunking score at {} frames: {s:.4}", map.frames);
                }
            }
            for p in exp::write_analysis(&report, c.lavae.frames_per_latent, &c.path("analysis"))? {
                println!("wrote {}", p.display());
            }
        }
        Command::Ablate => {
            let data = Dataset::load(&c)?;
            let ex = exp::load_extractors(&c)?;
            let cells = exp::ablation_cells(&c)?;
            let mut table = String::from("# cell K r_precision_top1 fid mm_dist diversity\n");
            for cell in &cells {
                let r = exp::run_cell(cell, &data, &ex)?;
                let line = format!(
                    "{} {} {:.4} {:.4} {:.4} {:.4}\n",
                    cell.label,
                    cell.config.max_slots(),
                    r.r_precision[0],
                    r.fid,
                    r.mm_dist,
                    r.diversity
                );
                print!("{line}");
                table.push_str(&line);
            }
            fs::write(c.out_dir.join("ablate").join("summary.txt"), table)?;
        }
    }
    Ok(())
}

fn init_threads() -> Result<()> {
    if let Ok(v) = std::env::var("LADIFF_THREADS") {
        let n: usize = v
            .parse()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("LADIFF_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| Error::Config(e.to_string()))?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match init_threads().and_then(|()| run(&cli)) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
