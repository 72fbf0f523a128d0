//! Acceptance criteria, one PASS/FAIL line each. Runs as a plain binary so the lines are
//! visible under `cargo test`; exits non-zero when any criterion fails.

use std::process::ExitCode;
use std::time::{Duration, Instant};

use rand::Rng as _;
use rand_distr::{Distribution, Normal};

use ladiff::analysis::{analytic_histogram, latent_occupancy, CHUNKING_REPORT_THRESHOLD};
use ladiff::checkpoint::{config_digest, load_checkpoint, save_checkpoint, Component};
use ladiff::config::ExperimentConfig;
use ladiff::corpus::{generate_sample, ActionKind, MotionSequence, TextEmbedding, Variant, SKELETON};
use ladiff::eval::{diversity, fid, r_precision, FeatureExtractors};
use ladiff::experiment::{self as exp, Dataset, Models};
use ladiff::ladiff::{build_schedule, forward_diffuse, Denoiser, DenoiserConfig, DiffusionItem, NoisePredictor, ScheduleKind};
use ladiff::lavae::{activation_count, perturb_frames, LaVae, LaVaeConfig, LatentCode, NoiseScale, SubspacePosterior};
use ladiff::nn::gradcheck::{gradient_check, GradProbe};
use ladiff::nn::{Graph, ParamStore};
use ladiff::rng;

/// Outcome of one criterion: pass flag and a one-line summary.
type Outcome = (bool, String);

fn random_motion(frames: usize, pose_dim: usize, r: &mut rng::Rng) -> MotionSequence {
    MotionSequence::new(20, pose_dim, (0..frames * pose_dim).map(|_| r.random_range(-1.0..1.0)).collect()).unwrap()
}

fn activation_arithmetic() -> Outcome {
    let anchors = [activation_count(48, 48).unwrap(), activation_count(200, 48).unwrap()];
    let mut ok = anchors == [1, 5];
    for r in [1, 16, 32, 48, 64, 200] {
        for f in 1..=200 {
            let k = activation_count(f, r).unwrap();
            // smallest k with k * r >= f
            let oracle = (1..).find(|&k| k * r >= f).unwrap();
            ok &= k == oracle && activation_count(f + 1, r).unwrap() >= k;
        }
    }
    (ok, format!("48->{} 200->{} at r=48; monotone and equal to the ceiling oracle on [1, 200]", anchors[0], anchors[1]))
}

fn tiny_vae(seed: u64) -> LaVae<f32> {
    let cfg = LaVaeConfig { latent_dim: 8, model_dim: 16, layers: 1, heads: 2, ff_dim: 16, ..LaVaeConfig::default() };
    LaVae::new(cfg, seed).unwrap()
}

fn masking_discipline() -> Outcome {
    let vae = tiny_vae(1);
    let mut r = rng::seeded(2);
    let (mut rejected, mut valid, mut ok) = (0, 0, true);
    for _ in 0..1000 {
        let f: usize = r.random_range(1..=200);
        let k: usize = r.random_range(1..=6);
        let z = LatentCode::standard_normal(k, 8, &mut r);
        if k == f.div_ceil(48) {
            let a = vae.decode(&z, f).unwrap();
            ok &= a.frames() == f && a == vae.decode(&z, f).unwrap();
            valid += 1;
        } else {
            ok &= vae.decode(&z, f).is_err();
            rejected += 1;
        }
    }
    (ok, format!("{rejected} mismatched pairs rejected, {valid} valid pairs decoded bit-identically twice"))
}

fn worst(probes: &[&GradProbe]) -> f64 {
    probes.iter().map(|p| p.rel_error).fold(0.0, f64::max)
}

/// Moves every parameter off symmetric points such as zero-initialized outputs and unit gains.
fn jitter(store: &mut ParamStore<f64>, seed: u64) {
    let mut r = rng::seeded(seed);
    for id in store.ids().collect::<Vec<_>>() {
        store.get_mut(id).iter_mut().for_each(|x| *x += r.random_range(-0.1..0.1));
    }
}

fn gradient_checks() -> Outcome {
    // autoencoder: F=6, V=7, D=8, one layer, one head
    let cfg = LaVaeConfig {
        max_frames: 6,
        frames_per_latent: 4,
        latent_dim: 8,
        model_dim: 8,
        layers: 1,
        heads: 1,
        ff_dim: 16,
        pose_dim: 7,
        ..LaVaeConfig::default()
    };
    let mut vae = LaVae::<f64>::new(cfg, 11).unwrap();
    jitter(vae.store_mut(), 12);
    let x = random_motion(6, 7, &mut rng::seeded(13));
    let (grads, _) = vae.batch_gradients(&[&x], &[5]).unwrap();
    let loss = |m: &LaVae<f64>| {
        let mut g = Graph::new(m.store());
        let n = m.loss_nodes(&mut g, &x, &mut rng::seeded(5)).unwrap();
        g.scalar(n.total)
    };
    let rep = gradient_check(&mut vae, 100, 1e-5, &mut rng::seeded(14), |m| m.store_mut(), loss, &grads);
    let vae_worst = worst(&rep.probes.iter().collect::<Vec<_>>());

    // denoiser: the latent scale is a fixed normalizer, not a trained parameter
    let dcfg = DenoiserConfig { model_dim: 8, layers: 1, heads: 2, ff_dim: 16, latent_dim: 8, max_slots: 5, text_dim: 6 };
    let mut den = Denoiser::<f64>::new(dcfg, 1).unwrap();
    jitter(den.store_mut(), 2);
    den.set_latent_scale(1.0);
    let schedule = build_schedule(100, ScheduleKind::Linear, 10).unwrap();
    let mut r = rng::seeded(3);
    let items: Vec<DiffusionItem> = [2usize, 2, 3]
        .iter()
        .map(|&k| {
            let mus = (0..k * 8).map(|_| r.random_range(-1.0..1.0)).collect();
            let lv = (0..k * 8).map(|_| r.random_range(-2.0..0.0)).collect();
            let text = (0..6).map(|_| r.random_range(-1.0..1.0)).collect();
            DiffusionItem { posterior: SubspacePosterior::new(k, 8, mus, lv).unwrap(), text: TextEmbedding(text) }
        })
        .collect();
    let refs: Vec<&DiffusionItem> = items.iter().collect();
    let seeds = [7, 8, 9];
    let (grads, _) = den.batch_gradients(&refs, &seeds, &schedule, NoiseScale::Variance).unwrap();
    let loss = |m: &Denoiser<f64>| m.batch_gradients(&refs, &seeds, &schedule, NoiseScale::Variance).unwrap().1;
    let scale = den.store().find("latent_scale").unwrap();
    let scale_name = den.store().name(scale).to_owned();
    let rep = gradient_check(&mut den, 130, 1e-5, &mut rng::seeded(10), |m| m.store_mut(), loss, &grads);
    let probes: Vec<&GradProbe> = rep.probes.iter().filter(|p| p.param != scale_name).take(100).collect();
    let den_worst = worst(&probes);
    let ok = vae_worst < 1e-4 && den_worst < 1e-4 && probes.len() == 100;
    (ok, format!("max relative error over 100 probes: autoencoder {vae_worst:.2e}, denoiser {den_worst:.2e}"))
}

fn diffusion_statistics() -> Outcome {
    let s = build_schedule(1000, ScheduleKind::Linear, 20).unwrap();
    let n = 100_000;
    let mut ok = true;
    let mut worst_z: f64 = 0.0;
    for (i, t) in [1, 500, 1000].into_iter().enumerate() {
        for c in [0.7, -1.3] {
            let z0 = LatentCode::new(1, n, vec![c; n]).unwrap();
            let noise = LatentCode::standard_normal(1, n, &mut rng::seeded(100 + i as u64));
            let zt = forward_diffuse(&z0, t, &noise, &s).unwrap().values;
            let a = s.alpha_bar(t);
            let mean = zt.iter().sum::<f64>() / n as f64;
            let var = zt.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            let (want_mean, want_var) = (a.sqrt() * c, 1.0 - a);
            let se_mean = (want_var / n as f64).sqrt();
            let se_var = want_var * (2.0 / (n - 1) as f64).sqrt();
            let zm = (mean - want_mean).abs() / se_mean;
            let zv = (var - want_var).abs() / se_var;
            worst_z = worst_z.max(zm).max(zv);
            ok &= zm < 3.0 && zv < 3.0;
        }
    }
    (ok, format!("worst deviation {worst_z:.2} standard errors at t in {{1, T/2, T}}"))
}

fn gaussian_rows(n: usize, dim: usize, offset: &[f64], r: &mut rng::Rng) -> Vec<Vec<f64>> {
    let g = Normal::new(0.0, 1.0).unwrap();
    (0..n).map(|_| (0..dim).map(|j| offset[j] + g.sample(r)).collect()).collect()
}

fn metric_oracles() -> Outcome {
    let mut r = rng::seeded(21);
    let dim = 4;
    let a = gaussian_rows(10_000, dim, &[0.0; 4], &mut r);
    let self_fid = fid(&a, &a).unwrap();
    let b = gaussian_rows(10_000, dim, &[2.0, 0.0, 0.0, 0.0], &mut r);
    let offset_fid = fid(&a, &b).unwrap();

    let m = gaussian_rows(10_000, 8, &[0.0; 8], &mut r);
    let t = gaussian_rows(10_000, 8, &[0.0; 8], &mut r);
    let top = r_precision(&m, &t, 32, &mut r).unwrap();
    let queries = (10_000 / 32 * 32) as f64;
    let mut rp_ok = true;
    for (k, &p_hat) in top.iter().enumerate() {
        let p = (k + 1) as f64 / 32.0;
        rp_ok &= (p_hat - p).abs() <= 3.0 * (p * (1.0 - p) / queries).sqrt();
    }
    let dup = vec![vec![0.3, -1.2, 4.0]; 100];
    let div = diversity(&dup, 50, &mut r).unwrap();
    let ok = self_fid < 1e-6 && (offset_fid - 4.0).abs() <= 0.2 && rp_ok && div == 0.0;
    (
        ok,
        format!(
            "fid(A,A)={self_fid:.1e}, fid offset 2 = {offset_fid:.3}, random top-1/2/3 = {:.4}/{:.4}/{:.4}, diversity of duplicates = {div}",
            top[0], top[1], top[2]
        ),
    )
}

fn dvae_identity() -> Outcome {
    let mut r = rng::seeded(31);
    let mut ok = true;
    for _ in 0..1000 {
        let f = r.random_range(1..=200);
        let m = random_motion(f, SKELETON.dim(), &mut r);
        ok &= perturb_frames(&m, 0.0, 0.1, &mut r).unwrap() == m;
        ok &= perturb_frames(&m, r.random_range(0.0..=1.0), 0.0, &mut r).unwrap() == m;
        let p = perturb_frames(&m, 0.33, 0.1, &mut r).unwrap();
        let changed = (0..f).filter(|&i| p.frame(i) != m.frame(i)).count();
        ok &= changed == (0.33 * f as f64).floor() as usize;
    }
    (ok, "1000 random motions: identity at fraction 0 and std 0; fraction 0.33 changes floor(0.33 F) frames".into())
}

fn persistence() -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::desk();
    let mut ok = true;

    let vae = LaVae::<f32>::new(cfg.lavae.clone(), 3).unwrap();
    let digest = config_digest(vae.config());
    let path = dir.path().join("vae.ladk");
    save_checkpoint(&path, Component::Vae, &digest, vae.store()).unwrap();
    let mut vae2 = LaVae::<f32>::new(cfg.lavae.clone(), 4).unwrap();
    vae2.replace_parameters(load_checkpoint(&path, Component::Vae, &digest).unwrap()).unwrap();

    let den = Denoiser::<f32>::new(cfg.denoiser.clone(), 3).unwrap();
    let ddigest = config_digest(den.config());
    let dpath = dir.path().join("denoiser.ladk");
    save_checkpoint(&dpath, Component::Denoiser, &ddigest, den.store()).unwrap();
    let mut den2 = Denoiser::<f32>::new(cfg.denoiser.clone(), 4).unwrap();
    den2.replace_parameters(load_checkpoint(&dpath, Component::Denoiser, &ddigest).unwrap()).unwrap();

    let ex = FeatureExtractors::<f32>::new(cfg.extractor.clone(), 3).unwrap();
    let edigest = config_digest(ex.config());
    let epath = dir.path().join("extractor.ladk");
    save_checkpoint(&epath, Component::Extractor, &edigest, ex.store()).unwrap();
    let mut ex2 = FeatureExtractors::<f32>::new(cfg.extractor.clone(), 4).unwrap();
    ex2.replace_parameters(load_checkpoint(&epath, Component::Extractor, &edigest).unwrap()).unwrap();

    let mut r = rng::seeded(41);
    let d = cfg.lavae.latent_dim;
    for _ in 0..10 {
        let f = r.random_range(30..=200);
        let k = cfg.lavae.active_slots(f).unwrap();
        let z = LatentCode::standard_normal(k, d, &mut r);
        ok &= vae.decode(&z, f).unwrap() == vae2.decode(&z, f).unwrap();
        let m = random_motion(f, SKELETON.dim(), &mut r);
        ok &= vae.encode(&m).unwrap() == vae2.encode(&m).unwrap();
        let text = TextEmbedding((0..cfg.corpus.text_dim).map(|_| r.random_range(-1.0..1.0)).collect());
        let t = r.random_range(1..=1000);
        ok &= den.predict(&z, t, &text).unwrap() == den2.predict(&z, t, &text).unwrap();
        ok &= ex.motion_features(&[&m]).unwrap() == ex2.motion_features(&[&m]).unwrap();
        ok &= ex.text_features(&[&text]).unwrap() == ex2.text_features(&[&text]).unwrap();
    }
    (ok, "autoencoder, denoiser, and extractor forward passes bit-identical after reload on 10 inputs".into())
}

const DESK_BUDGET: Duration = Duration::from_secs(30 * 60);

/// Trains every stage on the desk configuration; shared by the end-to-end and accounting criteria.
struct DeskRun {
    config: ExperimentConfig,
    data: Dataset,
    models: Models,
    report: Result<ladiff::eval::MetricReport, ladiff::Error>,
    analysis: ladiff::experiment::AnalysisReport,
    elapsed: Duration,
}

fn desk_run() -> Result<DeskRun, ladiff::Error> {
    let start = Instant::now();
    let config = ExperimentConfig::desk();
    let data = Dataset::generate(&config)?;
    let (vae, _) = exp::fit_vae(&config, &data)?;
    let (denoiser, _) = exp::fit_denoiser(&config, &vae, &data)?;
    let elapsed = start.elapsed();
    let models = Models { vae, denoiser, schedule: config.diffusion.schedule()? };
    let report = exp::fit_extractors(&config, &data).and_then(|(ex, _)| exp::evaluate_models(&config, &models, &ex, &data));
    let analysis = exp::analyze(&config, &models, &data)?;
    Ok(DeskRun { config, data, models, report, analysis, elapsed })
}

fn end_to_end(run: &DeskRun) -> Outcome {
    let chance = 1.0 / 32.0;
    let (top1, retrieval) = match &run.report {
        Ok(rep) => (rep.r_precision[0], format!("top-1 {:.4} (needs >= {:.4}), fid {:.3}", rep.r_precision[0], 5.0 * chance, rep.fid)),
        Err(e) => (0.0, format!("evaluation failed: {e}")),
    };
    let mut ok = top1 >= 5.0 * chance && run.elapsed <= DESK_BUDGET;
    let mut dynamics = Vec::new();
    for (caption, rows) in &run.analysis.sweeps {
        let speed = |f| rows.iter().find(|r| r.frames == f).map(|r| r.stats.avg_vel);
        match (speed(48), speed(170)) {
            (Some(short), Some(long)) => {
                let gain = short / long - 1.0;
                ok &= gain >= 0.15;
                dynamics.push(format!("`{caption}` {short:.3} vs {long:.3} m/s ({:+.1}%)", 100.0 * gain));
            }
            _ => {
                ok = false;
                dynamics.push(format!("`{caption}` lacks 48 or 170 frames"));
            }
        }
    }
    ok &= run.analysis.sweeps.len() >= 2;
    (ok, format!("training {:.0}s; {retrieval}; speed at 48 vs 170 frames: {}", run.elapsed.as_secs_f64(), dynamics.join(", ")))
}

fn subspace_accounting(run: &DeskRun) -> Outcome {
    let r = run.config.lavae.frames_per_latent;
    let pairs: Vec<(u32, &MotionSequence)> = run.data.test.ids.iter().copied().zip(&run.data.test.motions).collect();
    let analytic = analytic_histogram(run.data.test.motions.iter().map(|m| m.frames()), r).unwrap();
    let mut ok = run.analysis.occupancy.histogram == analytic;
    let rows: usize = analytic.iter().map(|(k, n)| k * n).sum();
    ok &= run.analysis.occupancy.coordinates.len() == rows;
    ok &= latent_occupancy(&run.models.vae, &pairs).unwrap().histogram == analytic;

    // ten sequences each of 30, 96, and 144 frames
    let mut mixed = Vec::new();
    for (i, f) in [30usize, 96, 144].iter().flat_map(|&f| std::iter::repeat_n(f, 10)).enumerate() {
        let s = generate_sample(&run.config.corpus, 5, i as u32, ActionKind::Walk, Variant::Forward, f).unwrap();
        mixed.push((s.id, run.data.normalizer.normalize(&s.motion).unwrap()));
    }
    let refs: Vec<(u32, &MotionSequence)> = mixed.iter().map(|(id, m)| (*id, m)).collect();
    let usage = latent_occupancy(&run.models.vae, &refs).unwrap();
    ok &= usage.histogram == [(1, 10), (2, 10), (3, 10)].into_iter().collect();

    let chunking = run
        .analysis
        .attention
        .iter()
        .find(|(m, _)| m.frames == 200)
        .and_then(|(_, s)| *s);
    let note = match chunking {
        Some(s) if s >= CHUNKING_REPORT_THRESHOLD => format!("chunking score at 200 frames {s:.3} (specialized)"),
        Some(s) => format!("chunking score at 200 frames {s:.3} (below the informational {CHUNKING_REPORT_THRESHOLD})"),
        None => {
            ok = false;
            "no attention map at 200 frames".into()
        }
    };
    (ok, format!("test-split histogram {analytic:?} matches the analytic counts; mixed 30/96/144 -> {:?}; {note}", usage.histogram))
}

fn report(index: usize, name: &str, started: Instant, (ok, detail): Outcome) -> bool {
    let verdict = if ok { "PASS" } else { "FAIL" };
    println!("criterion {index} {name}: {verdict} [{:.1}s] {detail}", started.elapsed().as_secs_f64());
    ok
}

fn main() -> ExitCode {
    let quick: [(usize, &str, fn() -> Outcome); 7] = [
        (1, "activation arithmetic", activation_arithmetic),
        (2, "masking discipline", masking_discipline),
        (3, "gradient checks", gradient_checks),
        (4, "diffusion statistics", diffusion_statistics),
        (5, "metric oracles", metric_oracles),
        (6, "dvae identity", dvae_identity),
        (9, "persistence", persistence),
    ];
    let mut all = true;
    for (i, name, f) in quick {
        let t = Instant::now();
        all &= report(i, name, t, f());
    }
    let t = Instant::now();
    match desk_run() {
        Ok(run) => {
            all &= report(7, "end-to-end desk run", t, end_to_end(&run));
            let t = Instant::now();
            all &= report(8, "subspace accounting", t, subspace_accounting(&run));
        }
        Err(e) => {
            all &= report(7, "end-to-end desk run", t, (false, format!("pipeline failed: {e}")));
            all &= report(8, "subspace accounting", t, (false, "no trained model".into()));
        }
    }
    if all {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
