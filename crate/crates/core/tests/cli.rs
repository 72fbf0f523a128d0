//! Drives the `ladiff` binary through every stage on a tiny configuration.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ladiff::corpus::io::read_corpus;

const TINY: &str = r#"
seed = 5

[corpus]
samples = 80
max_frames = 96

[lavae]
max_frames = 96
latent_dim = 8
model_dim = 16
layers = 1
heads = 2
ff_dim = 32

[vae_train]
epochs = 1
batch_size = 16

[denoiser]
model_dim = 16
layers = 1
heads = 2
ff_dim = 32

[diffusion]
steps = 50
inference_steps = 5

[denoiser_train]
epochs = 1
batch_size = 16

[analysis]
lengths = [48, 90]
attention_lengths = [96]
"#;

fn ladiff(config: &Path, out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ladiff"))
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn stages_run_in_order_and_reproduce() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("tiny.toml");
    fs::write(&config, TINY).unwrap();
    let out = dir.path().join("run");

    let early = ladiff(&config, &out, &["train-vae"]);
    assert!(!early.status.success());
    assert!(String::from_utf8_lossy(&early.stderr).contains("gen-corpus"));

    assert!(ok(&ladiff(&config, &out, &["gen-corpus"])).contains("wrote 80 samples"));
    ok(&ladiff(&config, &out, &["train-vae"]));

    let no_denoiser = ladiff(&config, &out, &["sample", "--text", "a person walks forward", "--frames", "48"]);
    assert!(!no_denoiser.status.success());

    ok(&ladiff(&config, &out, &["train-denoiser"]));
    let args = ["sample", "--text", "a person walks forward", "--frames", "48", "--dynamics"];
    let first = ok(&ladiff(&config, &out, &args));
    assert!(first.contains("k=1"), "{first}");
    assert!(first.contains("avg_vel"));
    let a = fs::read(out.join("sample.ladc")).unwrap();
    ok(&ladiff(&config, &out, &args));
    assert_eq!(a, fs::read(out.join("sample.ladc")).unwrap(), "same seed must reproduce the sample");

    let sample = read_corpus(&out.join("sample.ladc")).unwrap();
    assert_eq!(sample.len(), 1);
    assert_eq!(sample[0].motion.frames(), 48);

    let ablated = ["sample", "--text", "a person sits down", "--frames", "90", "--active-set", "1"];
    assert!(ok(&ladiff(&config, &out, &ablated)).contains("k=2"));

    ok(&ladiff(&config, &out, &["analyze"]));
    assert!(out.join("analysis").read_dir().unwrap().count() > 0);

    let too_long = ladiff(&config, &out, &["sample", "--text", "a person walks forward", "--frames", "97"]);
    assert!(!too_long.status.success());
    let unknown = ladiff(&config, &out, &["sample", "--text", "a person juggles", "--frames", "40"]);
    assert!(!unknown.status.success());
    let stderr = String::from_utf8_lossy(&unknown.stderr);
    assert!(stderr.lines().any(|l| l.starts_with("error:") && l.contains("juggles")), "{stderr}");
}

#[test]
fn unknown_config_keys_fail_before_any_work() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "[lavae]\nframes_per_latnet = 16\n").unwrap();
    let out = dir.path().join("run");
    let o = ladiff(&config, &out, &["gen-corpus"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("frames_per_latnet"));
    assert!(!out.exists());
}
