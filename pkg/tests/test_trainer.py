"""Fine-tuning loop contract tests on a micro config (16x16, tiny widths)."""

import csv
import glob
import os

import numpy as np
import pytest

import synth
from chromadiff import colorspace, data, trainer
from chromadiff.diffusion import GuidanceConfig, make_schedule
from chromadiff.model import (DivergenceError, ModelConfig, load_bundle,
                              new_bundle)
from chromadiff.trainer import (RunLog, TrainConfig, TrainerError, ValEntry,
                                finetune, read_run_log, render_probe_grid,
                                snapshot_probe, validate)

MICRO = ModelConfig(image_size=16, vae_base=8, unet_base=8, text_dim=8,
                    temb_dim=8, groups=4, text_vocab=64, text_tokens=4,
                    dtype="float32")

CFG = TrainConfig(batch_size=2, n_prompts=3, max_steps=6, val_every=2,
                  snapshot_steps=(1, 3, 6), seed=5, sample_steps=2)


@pytest.fixture(scope="module")
def manifest(tmp_path_factory):
    src = tmp_path_factory.mktemp("src")
    synth.write_source_images(src, n=6, size=48, seed=2)
    pool = data.expand_prompts(n=3)
    out = tmp_path_factory.mktemp("ds")
    return data.build_dataset(src, out, pool, image_size=16,
                              val_fraction=0.2, seed=1)


@pytest.fixture(scope="module")
def sched():
    return make_schedule(T=20)


@pytest.fixture(scope="module")
def run(manifest, sched, tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    bundle = new_bundle(MICRO, seed=9)
    bundle, log, ckpts = finetune(bundle, manifest, CFG, out, sched=sched)
    return bundle, log, ckpts, out


# ---------------------------------------------------------------- config


def test_config_defaults():
    cfg = TrainConfig()
    assert cfg.learning_rate == pytest.approx(5e-4)
    assert cfg.batch_size == 4
    assert cfg.n_prompts == 30
    assert cfg.max_steps == 50


def test_config_validation():
    with pytest.raises(TrainerError, match="positive"):
        TrainConfig(batch_size=0)
    with pytest.raises(TrainerError, match="positive"):
        TrainConfig(learning_rate=-1e-4)
    with pytest.raises(TrainerError, match="3 snapshot"):
        TrainConfig(snapshot_steps=(10, 20))
    with pytest.raises(TrainerError, match="increasing"):
        TrainConfig(snapshot_steps=(20, 10, 30))
    with pytest.raises(TrainerError, match="increasing"):
        TrainConfig(snapshot_steps=(10, 20, 60), max_steps=50)


# ---------------------------------------------------------------- finetune


def test_log_lengths(run):
    _, log, _, _ = run
    assert [s for s, _ in log.train] == [1, 2, 3, 4, 5, 6]
    # floor(6/2) = 3 validations; the final step coincides with one
    assert [e.step for e in log.val] == [2, 4, 6]


def test_checkpoints_present(run):
    _, _, ckpts, _ = run
    assert set(ckpts) == {"init", "early", "middle", "late", "final"}
    for stage, path in ckpts.items():
        assert os.path.isdir(path), stage
        loaded = load_bundle(path)
        expected_step = {"init": 0, "early": 1, "middle": 3,
                         "late": 6, "final": 6}[stage]
        assert loaded.step == expected_step


def test_frozen_components_byte_identical(run):
    _, _, ckpts, _ = run
    for fname in sorted(os.listdir(ckpts["init"])):
        if fname.startswith(("autoencoder.", "text_encoder.")):
            a = open(os.path.join(ckpts["init"], fname), "rb").read()
            b = open(os.path.join(ckpts["final"], fname), "rb").read()
            assert a == b, fname


def test_denoiser_actually_changed(run):
    _, _, ckpts, _ = run
    init = load_bundle(ckpts["init"])
    final = load_bundle(ckpts["final"])
    diffs = []
    for name, arr in final.denoiser.state_dict().items():
        diffs.append(np.abs(arr - init.denoiser.state_dict()[name]).max())
    assert max(diffs) > 0.0


def test_logs_written(run):
    _, log, _, out = run
    assert os.path.exists(os.path.join(out, trainer.TRAIN_LOG_NAME))
    assert os.path.exists(os.path.join(out, trainer.VAL_LOG_NAME))
    assert os.path.exists(os.path.join(out, trainer.TIMINGS_NAME))
    reread = read_run_log(out)
    assert reread.train == [(s, v) for s, v in log.train]
    assert reread.val == log.val


def test_probe_grid_layout(run):
    _, _, _, out = run
    from PIL import Image
    with Image.open(os.path.join(out, trainer.PROBE_GRID_NAME)) as im:
        w, h = im.size
    # input + 3 stages + target = 5 panels of 16px plus 4 separators of 2px
    assert w == 5 * 16 + 4 * 2
    assert h == 16 + 14


def test_deterministic_rerun(manifest, sched, tmp_path):
    out_a, out_b = tmp_path / "a", tmp_path / "b"
    for out in (out_a, out_b):
        bundle = new_bundle(MICRO, seed=9)
        finetune(bundle, manifest, CFG, out, sched=sched)
    for name in (trainer.TRAIN_LOG_NAME, trainer.VAL_LOG_NAME):
        assert (out_a / name).read_bytes() == (out_b / name).read_bytes()
    assert (out_a / trainer.PROBE_GRID_NAME).read_bytes() == \
        (out_b / trainer.PROBE_GRID_NAME).read_bytes()
    for fname in sorted(os.listdir(out_a / "checkpoints" / "final")):
        fa = (out_a / "checkpoints" / "final" / fname).read_bytes()
        fb = (out_b / "checkpoints" / "final" / fname).read_bytes()
        assert fa == fb, fname


def test_finetune_rejects_unfrozen_autoencoder(manifest, sched, tmp_path):
    bundle = new_bundle(MICRO, seed=0)
    bundle.freeze_flags["autoencoder"] = False
    with pytest.raises(TrainerError, match="frozen"):
        finetune(bundle, manifest, CFG, tmp_path / "x", sched=sched)


def test_finetune_rejects_invalid_manifest(manifest, sched, tmp_path):
    import dataclasses
    bad = dataclasses.replace(manifest)
    bad.samples = list(manifest.samples)
    bad.samples[0] = dataclasses.replace(bad.samples[0],
                                         split="val", prompt="wrong")
    bundle = new_bundle(MICRO, seed=0)
    with pytest.raises(TrainerError, match="violation"):
        finetune(bundle, bad, CFG, tmp_path / "x", sched=sched)


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_and_preserves_checkpoint(manifest, sched,
                                                    tmp_path):
    bundle = new_bundle(MICRO, seed=9)
    cfg = TrainConfig(batch_size=2, n_prompts=2, max_steps=6, val_every=10,
                      snapshot_steps=(1, 2, 6), seed=5, sample_steps=2,
                      learning_rate=1e18)
    out = tmp_path / "div"
    with pytest.raises(DivergenceError, match="aborted at step"):
        finetune(bundle, manifest, cfg, out, sched=sched)
    # the last good checkpoint survives and loads
    saved = sorted(os.listdir(out / "checkpoints"))
    assert "init" in saved
    load_bundle(out / "checkpoints" / saved[0])
    # partial train log was flushed
    assert os.path.exists(out / trainer.TRAIN_LOG_NAME)


# ---------------------------------------------------------------- validate


def test_validate_row_count_and_prompts(run, manifest, sched):
    bundle, _, _, _ = run
    rows, report = validate(bundle, manifest, sched, steps=2, seed=0)
    assert len(rows) == len(manifest.split_samples("val"))
    assert report.n_images == len(rows)
    for s in manifest.split_samples("val"):
        assert s.prompt == data.BASE_PROMPT


def test_validate_deterministic(run, manifest, sched):
    bundle, _, _, _ = run
    rows1, rep1 = validate(bundle, manifest, sched, steps=2, seed=3)
    rows2, rep2 = validate(bundle, manifest, sched, steps=2, seed=3)
    assert rows1 == rows2
    assert rep1 == rep2


def test_checkpoint_roundtrip_validation_identical(run, manifest, sched):
    bundle, _, ckpts, _ = run
    rows_mem, rep_mem = validate(bundle, manifest, sched, steps=2, seed=0)
    reloaded = load_bundle(ckpts["final"])
    rows_disk, rep_disk = validate(reloaded, manifest, sched, steps=2,
                                   seed=0)
    assert rows_mem == rows_disk
    assert rep_mem == rep_disk


def test_passthrough_lab_mse_positive(manifest):
    from chromadiff import metrics
    inputs, targets, _ = data.load_arrays(manifest, "val")
    passthrough = metrics.lab_mse(inputs[0], targets[0])
    assert passthrough > 0.0
    assert metrics.lab_mse(targets[0], targets[0]) == 0.0


def test_validate_empty_val_split(manifest, sched):
    import dataclasses
    train_only = dataclasses.replace(manifest)
    train_only.samples = [s for s in manifest.samples if s.split == "train"]
    bundle = new_bundle(MICRO, seed=0)
    with pytest.raises(TrainerError, match="empty"):
        validate(bundle, train_only, sched)


# ---------------------------------------------------------------- run log


def test_runlog_check_rejects_nonfinite():
    log = RunLog(train=[(1, 0.5), (2, float("nan"))])
    with pytest.raises(TrainerError, match="non-finite"):
        log.check()


def test_runlog_check_rejects_nonincreasing():
    log = RunLog(train=[(2, 0.5), (2, 0.4)])
    with pytest.raises(TrainerError, match="not increasing"):
        log.check()
    log2 = RunLog(val=[ValEntry(4, 1.0, 10.0, 0.5, 3.0),
                       ValEntry(2, 1.0, 10.0, 0.5, 3.0)])
    with pytest.raises(TrainerError, match="not increasing"):
        log2.check()


def test_runlog_allows_inf_psnr():
    log = RunLog(val=[ValEntry(1, 0.0, float("inf"), 1.0, 0.0)])
    log.check()


# ---------------------------------------------------------------- probe


def test_render_probe_grid_standalone(tmp_path):
    rng = np.random.default_rng(0)
    img = rng.random((16, 16, 3))
    panels = [trainer.ProbePanel(stage=s, step=i * 10,
                                 image=rng.random((16, 16, 3)))
              for i, s in enumerate(trainer.STAGES)]
    path = tmp_path / "grid.png"
    grid = render_probe_grid(img, img, panels, path=path)
    assert grid.shape == (16 + 14, 5 * 16 + 4 * 2, 3)
    assert path.exists()
    # header strips carry rendered label text (not uniform background)
    header = grid[:14]
    assert header.std() > 0.0


def test_snapshot_probe_reproducible(run, manifest, sched):
    bundle, _, _, _ = run
    inputs, _, _ = data.load_arrays(manifest, "val")
    p1 = snapshot_probe(bundle, sched, inputs[0], data.BASE_PROMPT,
                        "late", 6, steps=2, seed=1)
    p2 = snapshot_probe(bundle, sched, inputs[0], data.BASE_PROMPT,
                        "late", 6, steps=2, seed=1)
    assert np.array_equal(p1.image, p2.image)
    assert p1.stage == "late" and p1.step == 6
