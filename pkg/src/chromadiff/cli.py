"""Command-line entry point: dataset building, prompt expansion, autoencoder
pretraining, fine-tuning, sampling, evaluation, sweeps, and reports.

Exit codes: 0 success, 1 usage error (bad flags, missing --force), 2 runtime
failure.  Every successful command writes one run_manifest.json next to its
outputs recording the command, resolved config + digest, paths, seed, and
library versions.  All randomness funnels through --seed (default 0).

Train/guidance/schedule settings may come from a TOML or JSON config file
(sections [train], [guidance], [schedule]; pretraining uses [pretrain] and
[model]); any individual field is overridable by its CLI flag.
"""

import argparse
import dataclasses
import hashlib
import json
import os
import platform
import shutil
import sys
from datetime import datetime, timezone

import numpy as np
import PIL
from PIL import Image

from . import __version__, colorspace
from . import data as data_mod
from . import metrics as metrics_mod
from . import report as report_mod
from .diffusion import GuidanceConfig, make_schedule, sample
from .model import (ModelConfig, PretrainConfig, load_bundle, new_bundle,
                    pretrain_autoencoder, save_bundle)
from .sweep import SweepGrid, run_sweep
from .trainer import TrainConfig, finetune


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse that exits 1 (not 2) on usage errors, per the CLI contract."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


# ----------------------------------------------------------------- helpers


def _now():
    return datetime.now(timezone.utc).isoformat()


def _config_digest(config):
    blob = json.dumps(config, sort_keys=True, default=str).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()


def _write_run_manifest(location, command, config, inputs, outputs, seed,
                        started_at):
    manifest = {
        "command": command,
        "config": config,
        "config_digest": _config_digest(config),
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "seed": int(seed),
        "versions": {
            "chromadiff": __version__,
            "numpy": np.__version__,
            "pillow": PIL.__version__,
            "python": platform.python_version(),
        },
        "started_at": started_at,
        "finished_at": _now(),
    }
    if os.path.isdir(location):
        path = os.path.join(location, "run_manifest.json")
    else:
        path = str(location) + ".run_manifest.json"
    with open(path, "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
    return path


def _prepare_out_dir(path, force, resume=False):
    path = str(path)
    if os.path.exists(path) and os.listdir(path):
        if resume:
            return path
        if not force:
            raise UsageError(
                f"output directory {path} exists; pass --force to overwrite")
        shutil.rmtree(path)
    os.makedirs(path, exist_ok=True)
    return path


def _prepare_out_file(path, force):
    path = str(path)
    if os.path.exists(path) and not force:
        raise UsageError(f"output file {path} exists; pass --force to "
                         "overwrite")
    parent = os.path.dirname(os.path.abspath(path))
    os.makedirs(parent, exist_ok=True)
    return path


def _load_config_file(path):
    if path is None:
        return {}
    if path.endswith(".toml"):
        try:
            import tomllib as toml_mod
        except ModuleNotFoundError:
            import tomli as toml_mod
        with open(path, "rb") as fh:
            return toml_mod.load(fh)
    if path.endswith(".json"):
        with open(path) as fh:
            return json.load(fh)
    raise UsageError(f"config file must be .toml or .json, got {path}")


def _resolve_section(file_cfg, section, defaults, overrides):
    """defaults <- config-file section <- explicitly set CLI flags."""
    out = dict(defaults)
    section_cfg = file_cfg.get(section, {})
    unknown = set(section_cfg) - set(defaults)
    if unknown:
        raise UsageError(
            f"unknown [{section}] config keys: {sorted(unknown)}")
    out.update(section_cfg)
    for key, value in overrides.items():
        if value is not None:
            out[key] = value
    return out


def _int_list(text):
    try:
        return tuple(int(s) for s in str(text).split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated "
                                         f"integers, got {text!r}") from exc


def _float_list(text):
    try:
        return tuple(float(s) for s in str(text).split(","))
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"expected comma-separated "
                                         f"numbers, got {text!r}") from exc


_TRAIN_DEFAULTS = dataclasses.asdict(TrainConfig())
_GUIDANCE_DEFAULTS = dataclasses.asdict(GuidanceConfig())
_SCHEDULE_DEFAULTS = {"timesteps": 200, "beta_start": 5e-4, "beta_end": 0.1}
_PRETRAIN_DEFAULTS = dataclasses.asdict(PretrainConfig())


def _add_train_flags(p):
    d = _TRAIN_DEFAULTS
    p.add_argument("--config", help="TOML/JSON config file "
                   "([train]/[guidance]/[schedule] sections)")
    p.add_argument("--learning-rate", type=float, default=None,
                   help=f"Adam learning rate (default {d['learning_rate']})")
    p.add_argument("--batch-size", type=int, default=None,
                   help=f"training batch size (default {d['batch_size']})")
    p.add_argument("--n-prompts", type=int, default=None,
                   help=f"training prompt-pool size "
                   f"(default {d['n_prompts']})")
    p.add_argument("--max-steps", type=int, default=None,
                   help=f"optimizer updates (default {d['max_steps']})")
    p.add_argument("--val-every", type=int, default=None,
                   help=f"validation period in steps "
                   f"(default {d['val_every']})")
    p.add_argument("--snapshot-steps", type=_int_list, default=None,
                   metavar="EARLY,MID,LATE",
                   help="three probe snapshot steps "
                   f"(default {','.join(map(str, d['snapshot_steps']))})")
    p.add_argument("--sample-steps", type=int, default=None,
                   help="DDIM steps for validation sampling "
                   f"(default {d['sample_steps']})")
    p.add_argument("--seed", type=int, default=None,
                   help="master seed (default 0)")
    g = _GUIDANCE_DEFAULTS
    p.add_argument("--s-text", type=float, default=None,
                   help=f"text guidance scale (default {g['s_text']})")
    p.add_argument("--s-image", type=float, default=None,
                   help=f"image guidance scale (default {g['s_image']})")
    p.add_argument("--drop-text", type=float, default=None,
                   help="text-conditioning dropout probability "
                   f"(default {g['cond_drop_text']})")
    p.add_argument("--drop-image", type=float, default=None,
                   help="image-conditioning dropout probability "
                   f"(default {g['cond_drop_image']})")
    s = _SCHEDULE_DEFAULTS
    p.add_argument("--timesteps", type=int, default=None,
                   help=f"diffusion timesteps T (default {s['timesteps']})")
    p.add_argument("--beta-start", type=float, default=None,
                   help=f"first beta (default {s['beta_start']})")
    p.add_argument("--beta-end", type=float, default=None,
                   help=f"last beta (default {s['beta_end']})")


def _resolve_training(args):
    file_cfg = _load_config_file(args.config)
    train = _resolve_section(file_cfg, "train", _TRAIN_DEFAULTS, {
        "learning_rate": args.learning_rate,
        "batch_size": args.batch_size,
        "n_prompts": args.n_prompts,
        "max_steps": args.max_steps,
        "val_every": args.val_every,
        "snapshot_steps": args.snapshot_steps,
        "sample_steps": args.sample_steps,
        "seed": args.seed,
    })
    guidance = _resolve_section(file_cfg, "guidance", _GUIDANCE_DEFAULTS, {
        "s_text": args.s_text,
        "s_image": args.s_image,
        "cond_drop_text": args.drop_text,
        "cond_drop_image": args.drop_image,
    })
    schedule = _resolve_section(file_cfg, "schedule", _SCHEDULE_DEFAULTS, {
        "timesteps": args.timesteps,
        "beta_start": args.beta_start,
        "beta_end": args.beta_end,
    })
    train["snapshot_steps"] = tuple(train["snapshot_steps"])
    cfg = TrainConfig(**train)
    guide = GuidanceConfig(**guidance)
    sched = make_schedule(T=schedule["timesteps"],
                          beta_start=schedule["beta_start"],
                          beta_end=schedule["beta_end"])
    config = {"train": dataclasses.asdict(cfg),
              "guidance": dataclasses.asdict(guide),
              "schedule": dict(schedule)}
    return cfg, guide, sched, config


# -------------------------------------------------------------- subcommands


def _cmd_dataset_build(args):
    started = _now()
    pool = data_mod.expand_prompts(n=args.n_prompts,
                                   client=data_mod.client_from_env())
    out = _prepare_out_dir(args.out, args.force)
    manifest = data_mod.build_dataset(
        args.src, out, pool, image_size=args.image_size,
        val_fraction=args.val_fraction, seed=args.seed)
    violations = data_mod.validate_manifest(manifest)
    if violations:
        raise RuntimeError(f"built dataset fails validation: "
                           f"{violations[0]}")
    config = {"image_size": args.image_size,
              "val_fraction": args.val_fraction,
              "n_prompts": args.n_prompts}
    _write_run_manifest(out, "dataset build", config,
                        {"src": args.src}, {"dataset": out},
                        args.seed, started)
    n_train = len(manifest.split_samples("train"))
    n_val = len(manifest.split_samples("val"))
    print(f"dataset: {n_train} train + {n_val} val samples -> {out}")
    return 0


def _cmd_prompts_expand(args):
    started = _now()
    out = _prepare_out_file(args.out, args.force)
    pool = data_mod.expand_prompts(base=args.base, n=args.n,
                                   client=data_mod.client_from_env())
    with open(out, "w") as fh:
        json.dump({"base_prompt": pool.base_prompt,
                   "train_prompts": list(pool.train_prompts)},
                  fh, indent=2)
    config = {"base": args.base, "n": args.n}
    _write_run_manifest(out, "prompts expand", config, {}, {"prompts": out},
                        args.seed, started)
    print(f"prompts: {len(pool.train_prompts)} paraphrases -> {out}")
    return 0


def _cmd_autoencoder_pretrain(args):
    started = _now()
    file_cfg = _load_config_file(args.config)
    manifest = data_mod.load_manifest(args.dataset)
    pre = _resolve_section(file_cfg, "pretrain", _PRETRAIN_DEFAULTS, {
        "steps": args.steps,
        "batch_size": args.batch_size,
        "learning_rate": args.learning_rate,
        "kl_weight": args.kl_weight,
        "eval_every": args.eval_every,
    })
    model_defaults = dataclasses.asdict(
        ModelConfig(image_size=manifest.image_size))
    model = _resolve_section(file_cfg, "model", model_defaults, {})
    model["image_size"] = manifest.image_size
    model_cfg = ModelConfig(**model)
    pretrain_cfg = PretrainConfig(**pre)

    out = _prepare_out_dir(args.out, args.force)
    _, targets, _ = data_mod.load_arrays(manifest, "train")
    ae, rep = pretrain_autoencoder(targets, model_cfg, pretrain_cfg,
                                   seed=args.seed)
    bundle = new_bundle(model_cfg, args.seed)
    bundle.autoencoder = ae
    bundle.latent_scale = rep["latent_scale"]
    ckpt = os.path.join(out, "checkpoint")
    save_bundle(ckpt, bundle)
    with open(os.path.join(out, "pretrain_report.json"), "w") as fh:
        json.dump({k: v for k, v in rep.items()}, fh, indent=2,
                  sort_keys=True, default=float)
    config = {"pretrain": pre, "model": model}
    _write_run_manifest(out, "autoencoder pretrain", config,
                        {"dataset": args.dataset}, {"checkpoint": ckpt},
                        args.seed, started)
    print(f"pretrain: final val MSE {rep['final_val_mse']:.6f}, "
          f"latent scale {rep['latent_scale']:.4f} -> {ckpt}")
    return 0


def _cmd_finetune(args):
    started = _now()
    cfg, guide, sched, config = _resolve_training(args)
    manifest = data_mod.load_manifest(args.dataset)
    bundle = load_bundle(args.checkpoint)
    out = _prepare_out_dir(args.out, args.force)
    _, log, ckpts = finetune(bundle, manifest, cfg, out, sched=sched,
                             guidance=guide)
    _write_run_manifest(out, "finetune", config,
                        {"dataset": args.dataset,
                         "checkpoint": args.checkpoint},
                        {"run": out, "final": ckpts["final"]},
                        cfg.seed, started)
    last = log.val[-1]
    print(f"finetune: {cfg.max_steps} steps, final val LAB-MSE "
          f"{last.lab_mse:.4f} -> {out}")
    return 0


def _cmd_sample(args):
    started = _now()
    bundle = load_bundle(args.checkpoint)
    guide = GuidanceConfig(s_text=args.s_text, s_image=args.s_image)
    sched = make_schedule(T=args.timesteps, beta_start=args.beta_start,
                          beta_end=args.beta_end)
    out = _prepare_out_file(args.out, args.force)
    with Image.open(args.input) as im:
        rgb = data_mod.center_crop_resize(
            im.convert("RGB"), bundle.config.image_size)
    arr = np.asarray(rgb, dtype=np.float64) / 255.0
    gray = colorspace.to_grayscale(arr)
    result = sample(bundle, sched, gray, args.prompt, guidance=guide,
                    steps=args.steps, seed=args.seed)
    colorspace.save_image(out, result)
    header_path = os.path.join(args.checkpoint, "header.json")
    with open(header_path, "rb") as fh:
        ckpt_id = hashlib.sha256(fh.read()).hexdigest()[:16]
    sidecar = {
        "seed": args.seed,
        "steps": args.steps,
        "s_text": args.s_text,
        "s_image": args.s_image,
        "prompt": args.prompt,
        "timesteps": args.timesteps,
        "checkpoint": str(args.checkpoint),
        "checkpoint_id": ckpt_id,
        "input": str(args.input),
    }
    with open(out + ".json", "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
    _write_run_manifest(out, "sample", sidecar,
                        {"checkpoint": args.checkpoint,
                         "input": args.input},
                        {"image": out, "sidecar": out + ".json"},
                        args.seed, started)
    print(f"sample: {out}")
    return 0


def _cmd_evaluate(args):
    started = _now()
    out = _prepare_out_file(args.out, args.force)
    rows, report = metrics_mod.evaluate_files(args.pairs, out)
    _write_run_manifest(out, "evaluate", {"pairs": str(args.pairs)},
                        {"pairs": args.pairs}, {"report": out},
                        args.seed, started)
    print(f"evaluate: n={report.n_images} "
          f"psnr={metrics_mod.format_metric(report.psnr_db)} "
          f"ssim={report.ssim:.6f} mae={report.mae:.6f} "
          f"lab_mse={report.lab_mse:.6f} -> {out}")
    return 0


def _cmd_sweep(args):
    started = _now()
    cfg, guide, sched, config = _resolve_training(args)
    grid = SweepGrid(lr_ratios=args.lr_ratios, batch_sizes=args.batch_sizes,
                     prompt_counts=args.prompt_counts, mode=args.mode)
    manifest = data_mod.load_manifest(args.dataset)
    bundle = load_bundle(args.checkpoint)
    out = _prepare_out_dir(args.out, args.force, resume=args.resume)
    result = run_sweep(grid, cfg, manifest, bundle, out, sched=sched,
                       guidance=guide)
    config["grid"] = dataclasses.asdict(grid)
    _write_run_manifest(out, "sweep", config,
                        {"dataset": args.dataset,
                         "checkpoint": args.checkpoint},
                        {"sweep": out}, cfg.seed, started)
    n_ok = sum(a.status == "ok" for a in result.arms)
    print(f"sweep: {n_ok}/{len(result.arms)} arms ok, "
          f"baseline {result.baseline_id} -> {out}")
    return 0


def _cmd_report(args):
    started = _now()
    run_dir = str(args.run)
    run_manifest_path = os.path.join(run_dir, "run_manifest.json")
    run_cfg = {}
    dataset_dir = args.dataset
    if os.path.exists(run_manifest_path):
        with open(run_manifest_path) as fh:
            recorded = json.load(fh)
        run_cfg = recorded.get("config", {})
        if dataset_dir is None:
            dataset_dir = recorded.get("inputs", {}).get("dataset")
    manifest = None
    if dataset_dir is not None:
        manifest = data_mod.load_manifest(dataset_dir)
    sched = None
    if "schedule" in run_cfg:
        s = run_cfg["schedule"]
        sched = make_schedule(T=s["timesteps"], beta_start=s["beta_start"],
                              beta_end=s["beta_end"])
    guide = GuidanceConfig(**run_cfg["guidance"]) if "guidance" in run_cfg \
        else None
    steps = run_cfg.get("train", {}).get("sample_steps", 10)
    seed = run_cfg.get("train", {}).get("seed", 0)
    out = args.out if args.out is not None \
        else os.path.join(run_dir, "report")
    out = _prepare_out_dir(out, args.force)
    outputs = report_mod.write_run_report(run_dir, out, manifest=manifest,
                                          sched=sched, guidance=guide,
                                          steps=steps, seed=seed)
    _write_run_manifest(out, "report", run_cfg, {"run": run_dir},
                        outputs, args.seed, started)
    print("report: " + ", ".join(sorted(outputs.values())))
    return 0


# ------------------------------------------------------------------ parser


def build_parser():
    parser = _Parser(prog="chromadiff",
                     description="Instruction-conditioned latent-diffusion "
                     "colorization toolkit")
    sub = parser.add_subparsers(dest="command", required=True,
                                metavar="COMMAND")

    ds = sub.add_parser("dataset", help="dataset operations")
    ds_sub = ds.add_subparsers(dest="subcommand", required=True,
                               metavar="SUBCOMMAND")
    b = ds_sub.add_parser(
        "build", help="build paired gray/color data from source images",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    b.add_argument("--src", required=True, help="directory of color images")
    b.add_argument("--out", required=True, help="output dataset directory")
    b.add_argument("--image-size", type=int, default=64,
                   help="square side after crop+resize")
    b.add_argument("--val-fraction", type=float, default=0.1,
                   help="fraction of images held out for validation")
    b.add_argument("--n-prompts", type=int, default=30,
                   help="training prompt-pool size")
    b.add_argument("--seed", type=int, default=0, help="build seed")
    b.add_argument("--force", action="store_true",
                   help="overwrite an existing output directory")
    b.set_defaults(func=_cmd_dataset_build)

    pr = sub.add_parser("prompts", help="prompt-pool operations")
    pr_sub = pr.add_subparsers(dest="subcommand", required=True,
                               metavar="SUBCOMMAND")
    e = pr_sub.add_parser(
        "expand", help="expand the base prompt into a paraphrase pool",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter,
        epilog="Set CHROMADIFF_PROMPT_ENDPOINT (and optionally "
        "CHROMADIFF_PROMPT_TOKEN) to use an external paraphrase service; "
        "otherwise the bundled list is used.")
    e.add_argument("--base", default=data_mod.BASE_PROMPT,
                   help="base prompt to paraphrase")
    e.add_argument("--n", type=int, default=30, help="pool size")
    e.add_argument("--out", required=True, help="output JSON file")
    e.add_argument("--seed", type=int, default=0, help="unused; recorded")
    e.add_argument("--force", action="store_true",
                   help="overwrite an existing output file")
    e.set_defaults(func=_cmd_prompts_expand)

    ae = sub.add_parser("autoencoder", help="autoencoder operations")
    ae_sub = ae.add_subparsers(dest="subcommand", required=True,
                               metavar="SUBCOMMAND")
    p = ae_sub.add_parser("pretrain",
                          help="pretrain the frozen image autoencoder")
    p.add_argument("--dataset", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--config", help="TOML/JSON config "
                   "([pretrain]/[model] sections)")
    d = _PRETRAIN_DEFAULTS
    p.add_argument("--steps", type=int, default=None,
                   help=f"training steps (default {d['steps']})")
    p.add_argument("--batch-size", type=int, default=None,
                   help=f"batch size (default {d['batch_size']})")
    p.add_argument("--learning-rate", type=float, default=None,
                   help=f"Adam learning rate "
                   f"(default {d['learning_rate']})")
    p.add_argument("--kl-weight", type=float, default=None,
                   help=f"KL regularizer weight (default {d['kl_weight']})")
    p.add_argument("--eval-every", type=int, default=None,
                   help=f"eval period in steps (default {d['eval_every']})")
    p.add_argument("--seed", type=int, default=0, help="master seed")
    p.add_argument("--force", action="store_true",
                   help="overwrite an existing output directory")
    p.set_defaults(func=_cmd_autoencoder_pretrain)

    f = sub.add_parser("finetune", help="fine-tune the denoiser")
    f.add_argument("--dataset", required=True, help="dataset directory")
    f.add_argument("--checkpoint", required=True,
                   help="starting bundle checkpoint directory")
    f.add_argument("--out", required=True, help="run output directory")
    _add_train_flags(f)
    f.add_argument("--force", action="store_true",
                   help="overwrite an existing output directory")
    f.set_defaults(func=_cmd_finetune)

    s = sub.add_parser(
        "sample", help="colorize one image with a trained checkpoint",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    s.add_argument("--checkpoint", required=True,
                   help="bundle checkpoint directory")
    s.add_argument("--input", required=True, help="input image (any size; "
                   "center-cropped, resized, and grayscaled)")
    s.add_argument("--prompt", default=data_mod.BASE_PROMPT,
                   help="conditioning instruction")
    s.add_argument("--out", required=True, help="output PNG path")
    s.add_argument("--steps", type=int, default=20, help="DDIM steps")
    s.add_argument("--seed", type=int, default=0, help="sampler seed")
    s.add_argument("--s-text", type=float,
                   default=_GUIDANCE_DEFAULTS["s_text"],
                   help="text guidance scale")
    s.add_argument("--s-image", type=float,
                   default=_GUIDANCE_DEFAULTS["s_image"],
                   help="image guidance scale")
    s.add_argument("--timesteps", type=int,
                   default=_SCHEDULE_DEFAULTS["timesteps"],
                   help="diffusion timesteps T")
    s.add_argument("--beta-start", type=float,
                   default=_SCHEDULE_DEFAULTS["beta_start"],
                   help="first beta")
    s.add_argument("--beta-end", type=float,
                   default=_SCHEDULE_DEFAULTS["beta_end"],
                   help="last beta")
    s.add_argument("--force", action="store_true",
                   help="overwrite an existing output file")
    s.set_defaults(func=_cmd_sample)

    ev = sub.add_parser(
        "evaluate", help="score generated/target image pairs",
        formatter_class=argparse.ArgumentDefaultsHelpFormatter)
    ev.add_argument("--pairs", required=True,
                    help="CSV with header 'generated,target'")
    ev.add_argument("--out", required=True, help="output report CSV")
    ev.add_argument("--seed", type=int, default=0, help="unused; recorded")
    ev.add_argument("--force", action="store_true",
                    help="overwrite an existing output file")
    ev.set_defaults(func=_cmd_evaluate)

    sw = sub.add_parser("sweep", help="run the hyperparameter sweep")
    sw.add_argument("--dataset", required=True, help="dataset directory")
    sw.add_argument("--checkpoint", required=True,
                    help="starting bundle checkpoint directory")
    sw.add_argument("--out", required=True, help="sweep output directory")
    _add_train_flags(sw)
    sw.add_argument("--lr-ratios", type=_float_list, default=(2.0, 1.0, 0.2),
                    metavar="R1,R2,...",
                    help="learning-rate ratios (default 2,1,0.2)")
    sw.add_argument("--batch-sizes", type=_int_list, default=(2, 4, 8),
                    metavar="B1,B2,...",
                    help="batch sizes (default 2,4,8)")
    sw.add_argument("--prompt-counts", type=_int_list, default=(1, 30),
                    metavar="P1,P2,...",
                    help="prompt-pool sizes (default 1,30)")
    sw.add_argument("--mode", default="one_factor_at_a_time",
                    choices=("one_factor_at_a_time", "full_cross"),
                    help="arm enumeration mode "
                    "(default one_factor_at_a_time)")
    sw.add_argument("--resume", action="store_true",
                    help="continue into an existing sweep directory, "
                    "skipping completed arms")
    sw.add_argument("--force", action="store_true",
                    help="overwrite an existing output directory")
    sw.set_defaults(func=_cmd_sweep)

    rp = sub.add_parser("report",
                        help="render loss curves and comparison tables "
                        "from a finetune run")
    rp.add_argument("--run", required=True, help="finetune run directory")
    rp.add_argument("--out", default=None,
                    help="report output directory (default <run>/report)")
    rp.add_argument("--dataset", default=None,
                    help="dataset directory (default: read from the run's "
                    "run_manifest.json)")
    rp.add_argument("--seed", type=int, default=0, help="unused; recorded")
    rp.add_argument("--force", action="store_true",
                    help="overwrite an existing report directory")
    rp.set_defaults(func=_cmd_report)

    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure -> exit 2 per contract
        if os.environ.get("CHROMADIFF_DEBUG"):
            raise
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
