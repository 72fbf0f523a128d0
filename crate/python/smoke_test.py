"""Smoke test for the ladiff_py extension: tiny corpus, short training, one sample, metrics.

Build the module first (see README), then run `python3 python/smoke_test.py` from the repo root.
"""

import math
import sys
import tempfile

import ladiff_py as ld

TINY = """
seed = 3
out_dir = "{out}"

[corpus]
samples = 200
max_frames = 96

[lavae]
max_frames = 96
latent_dim = 16
model_dim = 32
layers = 1
heads = 2
ff_dim = 64

[vae_train]
epochs = 2
batch_size = 16

[denoiser]
model_dim = 32
layers = 1
heads = 2
ff_dim = 64

[diffusion]
steps = 100
inference_steps = 10

[denoiser_train]
epochs = 2
batch_size = 16

[extractor]
feature_dim = 16
model_dim = 16
layers = 1
heads = 2
ff_dim = 32

[extractor_train]
epochs = 80
batch_size = 16

[eval]
replicates = 1
retrieval_batch = 8
diversity_subset = 5
mmodality_texts = 2
mmodality_subset = 2

[analysis]
lengths = [48]
attention_lengths = [96]
"""


def main() -> int:
    assert ld.activation_count(48, 16) == 3
    assert ld.activation_count(200, 16) == 13
    assert ld.fid([[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]], [[0.0, 1.0], [1.0, 0.0], [0.5, 0.5]]) < 1e-9
    try:
        ld.activation_count(0, 16)
    except ValueError:
        pass
    else:
        raise AssertionError("zero frames must be rejected")

    with tempfile.TemporaryDirectory() as out:
        config = ld.ExperimentConfig.from_toml(TINY.format(out=out))
        print(config)
        assert config.active_slots(48) == 1 and config.active_slots(96) == 2

        pipeline = ld.Pipeline(config)
        print("splits", pipeline.split_sizes())
        vae_line, den_line = pipeline.fit()
        print("vae", vae_line)
        print("denoiser", den_line)

        motion = pipeline.sample("a person walks forward", 48, seed=1)
        assert len(motion) == 48
        assert all(len(row) == ld.POSE_DIM for row in motion)
        assert all(math.isfinite(v) for row in motion for v in row)
        again = pipeline.sample("a person walks forward", 48, seed=1)
        assert motion == again, "sampling must be deterministic for a fixed seed"
        print("dynamics", pipeline.dynamics("a person sits down", 60))

        try:
            margin = pipeline.fit_extractors()
            print("extractor margin", margin)
            for name, value in pipeline.evaluate():
                print(f"{name} = {value:.4f}")
        except RuntimeError as e:
            # A tiny extractor may miss the validation margin; the refusal itself is the contract.
            print("evaluation refused:", e)

        saved = pipeline.save()
        reloaded = ld.Pipeline(config)
        reloaded.load()
        assert reloaded.sample("a person walks forward", 48, seed=1) == motion
        print("saved", [str(p) for p in saved])

    try:
        ld.Pipeline(ld.ExperimentConfig.from_toml(TINY.format(out="/nonexistent/x"))).load()
    except FileNotFoundError:
        pass
    else:
        raise AssertionError("loading without checkpoints must fail")

    print("smoke test passed")
    return 0


if __name__ == "__main__":
    sys.exit(main())
