"""Hyperparameter sweep over learning rate, batch size, and prompt count.

One-factor-at-a-time mode varies each axis around the base config (the
default arm is shared across axes, so the stock grid yields six distinct
arms); full_cross runs the whole product.  Every arm is an independent,
fully seeded fine-tune from the same initial weights on the same manifest.
Arm identity is a stable hash of (train config, guidance, manifest digest),
which makes sweeps resumable: completed arms are skipped on re-run, failed
arms are retried.

Results directory layout:
    out_dir/init_bundle/          shared starting checkpoint
    out_dir/arms/<id>/config.json, metrics.csv, probe.png, run/...
    out_dir/summary.csv, summary.md, axis_<name>.png
"""

import csv
import dataclasses
import hashlib
import itertools
import json
import math
import os
import shutil
from dataclasses import dataclass

import numpy as np
from PIL import Image, ImageDraw

from . import data as data_mod
from . import metrics as metrics_mod
from .diffusion import GuidanceConfig, make_schedule
from .metrics import MetricsReport
from .model import load_bundle, save_bundle
from .trainer import TrainConfig, finetune, validate

ONE_FACTOR = "one_factor_at_a_time"
FULL_CROSS = "full_cross"

AXES = ("lr_ratio", "batch_size", "n_prompts")


class SweepError(ValueError):
    pass


@dataclass(frozen=True)
class SweepGrid:
    lr_ratios: tuple = (2.0, 1.0, 0.2)
    batch_sizes: tuple = (2, 4, 8)
    prompt_counts: tuple = (1, 30)
    mode: str = ONE_FACTOR

    def __post_init__(self):
        object.__setattr__(self, "lr_ratios",
                           tuple(float(r) for r in self.lr_ratios))
        object.__setattr__(self, "batch_sizes",
                           tuple(int(b) for b in self.batch_sizes))
        object.__setattr__(self, "prompt_counts",
                           tuple(int(p) for p in self.prompt_counts))
        for name in ("lr_ratios", "batch_sizes", "prompt_counts"):
            if not getattr(self, name):
                raise SweepError(f"{name} must be non-empty")
        if self.mode not in (ONE_FACTOR, FULL_CROSS):
            raise SweepError(f"unknown sweep mode {self.mode!r}")


@dataclass
class ArmResult:
    arm_id: str
    config: dict
    status: str                 # "ok" | "failed"
    report: object = None       # MetricsReport when ok
    probe_path: str = ""
    axes: tuple = ()
    error: str = ""


@dataclass
class SweepResult:
    arms: list
    baseline_id: str
    out_dir: str = ""

    def by_id(self, arm_id):
        for arm in self.arms:
            if arm.arm_id == arm_id:
                return arm
        raise SweepError(f"no arm {arm_id!r}")


def arm_hash(cfg, manifest_digest, guidance):
    payload = {
        "config": dataclasses.asdict(cfg),
        "guidance": dataclasses.asdict(guidance),
        "manifest": manifest_digest,
    }
    blob = json.dumps(payload, sort_keys=True).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


def _arm_configs(grid, base_cfg):
    """Ordered mapping arm config -> axis tags (axis, value) it serves."""
    specs = []
    if grid.mode == ONE_FACTOR:
        if 1.0 not in grid.lr_ratios:
            raise SweepError("one-factor grid needs lr ratio 1.0")
        if base_cfg.batch_size not in grid.batch_sizes:
            raise SweepError(
                f"one-factor grid needs base batch size "
                f"{base_cfg.batch_size} in batch_sizes")
        if base_cfg.n_prompts not in grid.prompt_counts:
            raise SweepError(
                f"one-factor grid needs base prompt count "
                f"{base_cfg.n_prompts} in prompt_counts")
        for r in grid.lr_ratios:
            specs.append((dataclasses.replace(
                base_cfg, learning_rate=base_cfg.learning_rate * r),
                ("lr_ratio", r)))
        for b in grid.batch_sizes:
            specs.append((dataclasses.replace(base_cfg, batch_size=b),
                          ("batch_size", b)))
        for p in grid.prompt_counts:
            specs.append((dataclasses.replace(base_cfg, n_prompts=p),
                          ("n_prompts", p)))
    else:
        for r, b, p in itertools.product(grid.lr_ratios, grid.batch_sizes,
                                         grid.prompt_counts):
            cfg = dataclasses.replace(
                base_cfg, learning_rate=base_cfg.learning_rate * r,
                batch_size=b, n_prompts=p)
            specs.append((cfg, ("cross", f"lr{r}-bs{b}-np{p}")))
    ordered = {}
    for cfg, tag in specs:
        key = json.dumps(dataclasses.asdict(cfg), sort_keys=True)
        if key not in ordered:
            ordered[key] = (cfg, [])
        ordered[key][1].append(tag)
    return list(ordered.values())


def _read_metrics_csv(path):
    rows = []
    with open(path, newline="") as fh:
        for rec in csv.DictReader(fh):
            rows.append(rec)
    mean = next(r for r in rows if r["name"] == "mean")
    report = MetricsReport(
        psnr_db=float(mean["psnr_db"]), ssim=float(mean["ssim"]),
        mae=float(mean["mae"]), lab_mse=float(mean["lab_mse"]),
        n_images=len(rows) - 1)
    return rows, report


def _load_completed_arm(arm_dir):
    with open(os.path.join(arm_dir, "config.json")) as fh:
        config = json.load(fh)
    _, report = _read_metrics_csv(os.path.join(arm_dir, "metrics.csv"))
    return ArmResult(
        arm_id=config["arm_id"], config=config, status="ok", report=report,
        probe_path=os.path.join(arm_dir, "probe.png"),
        axes=tuple(tuple(t) for t in config["axes"]))


def _labeled_row(label, img_u8, header=14):
    h, w = img_u8.shape[:2]
    row = Image.new("RGB", (w, h + header), (24, 24, 24))
    row.paste(Image.fromarray(img_u8, mode="RGB"), (0, header))
    ImageDraw.Draw(row).text((2, 1), label, fill=(235, 235, 235))
    return np.asarray(row)


def _write_axis_grids(out_dir, arms):
    """One stacked probe comparison per swept axis (ok arms only)."""
    for axis in AXES:
        rows = []
        for arm in arms:
            for ax, value in arm.axes:
                if ax != axis or arm.status != "ok":
                    continue
                if not os.path.exists(arm.probe_path):
                    continue
                with Image.open(arm.probe_path) as im:
                    img = np.asarray(im.convert("RGB"))
                label = f"{axis}={value}"
                if len(arm.axes) > 1:
                    label += " (default)"
                rows.append(_labeled_row(label, img))
        if not rows:
            continue
        width = max(r.shape[1] for r in rows)
        padded = []
        for r in rows:
            if r.shape[1] < width:
                pad = np.full((r.shape[0], width - r.shape[1], 3), 24,
                              dtype=np.uint8)
                r = np.concatenate([r, pad], axis=1)
            padded.append(r)
        grid = np.concatenate(padded, axis=0)
        Image.fromarray(grid, mode="RGB").save(
            os.path.join(out_dir, f"axis_{axis}.png"))


_SUMMARY_FIELDS = ("arm_id", "status", "axes", "learning_rate", "batch_size",
                   "n_prompts", "lab_mse", "psnr_db", "ssim", "mae")


def _write_summary(out_dir, arms, baseline_id):
    with open(os.path.join(out_dir, "summary.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(_SUMMARY_FIELDS)
        for arm in arms:
            cfg = arm.config["config"]
            axes = "+".join(f"{a}={v}" for a, v in arm.axes)
            if arm.report is not None:
                vals = [metrics_mod.format_metric(getattr(arm.report, k))
                        for k in ("lab_mse", "psnr_db", "ssim", "mae")]
            else:
                vals = ["", "", "", ""]
            w.writerow([arm.arm_id, arm.status, axes, cfg["learning_rate"],
                        cfg["batch_size"], cfg["n_prompts"]] + vals)
    lines = [
        "# Sweep summary",
        "",
        f"Baseline arm: `{baseline_id}`",
        "",
        "| arm | axes | lr | batch | prompts | LAB-MSE | PSNR | SSIM | MAE |",
        "|---|---|---:|---:|---:|---:|---:|---:|---:|",
    ]
    for arm in arms:
        cfg = arm.config["config"]
        axes = ", ".join(f"{a}={v}" for a, v in arm.axes)
        if arm.status == "ok":
            cells = [f"{getattr(arm.report, k):.4f}"
                     for k in ("lab_mse", "psnr_db", "ssim", "mae")]
        else:
            cells = [f"failed: {arm.error}", "", "", ""]
        lines.append(
            f"| `{arm.arm_id}` | {axes} | {cfg['learning_rate']:.2e} | "
            f"{cfg['batch_size']} | {cfg['n_prompts']} | "
            + " | ".join(cells) + " |")
    lines.append("")
    with open(os.path.join(out_dir, "summary.md"), "w") as fh:
        fh.write("\n".join(lines))


def run_sweep(grid, base_cfg, manifest, bundle, out_dir, sched=None,
              guidance=None):
    """Execute (or resume) the sweep; returns a SweepResult.

    Every arm starts from the same saved copy of `bundle` and validates on
    the same manifest and seed; only the varied factor differs.  An arm
    failure is recorded in the summary and the sweep continues.
    """
    sched = sched if sched is not None else make_schedule()
    guidance = guidance if guidance is not None else GuidanceConfig()
    digest = data_mod.manifest_digest(manifest)
    os.makedirs(out_dir, exist_ok=True)
    init_dir = os.path.join(out_dir, "init_bundle")
    if not os.path.isdir(init_dir):
        save_bundle(init_dir, bundle)

    arms = []
    for cfg, tags in _arm_configs(grid, base_cfg):
        arm_id = arm_hash(cfg, digest, guidance)
        arm_dir = os.path.join(out_dir, "arms", arm_id)
        metrics_path = os.path.join(arm_dir, "metrics.csv")
        if os.path.exists(metrics_path):
            arms.append(_load_completed_arm(arm_dir))
            continue
        os.makedirs(arm_dir, exist_ok=True)
        config_snapshot = {
            "arm_id": arm_id,
            "axes": [list(t) for t in tags],
            "config": dataclasses.asdict(cfg),
            "guidance": dataclasses.asdict(guidance),
            "manifest_digest": digest,
        }
        with open(os.path.join(arm_dir, "config.json"), "w") as fh:
            json.dump(config_snapshot, fh, indent=2, sort_keys=True)
        try:
            arm_bundle = load_bundle(init_dir)
            run_dir = os.path.join(arm_dir, "run")
            _, _, _ = finetune(arm_bundle, manifest, cfg, run_dir,
                               sched=sched, guidance=guidance)
            rows, report = validate(arm_bundle, manifest, sched,
                                    guidance=guidance,
                                    steps=cfg.sample_steps, seed=cfg.seed)
            probe_path = os.path.join(arm_dir, "probe.png")
            shutil.copyfile(os.path.join(run_dir, "probe_grid.png"),
                            probe_path)
            # metrics.csv last: it is the completion marker for resume
            metrics_mod.write_report_csv(metrics_path, rows, report)
            arms.append(ArmResult(arm_id=arm_id, config=config_snapshot,
                                  status="ok", report=report,
                                  probe_path=probe_path, axes=tuple(tags)))
        except Exception as exc:  # arm failures must not kill the sweep
            with open(os.path.join(arm_dir, "error.txt"), "w") as fh:
                fh.write(f"{type(exc).__name__}: {exc}\n")
            arms.append(ArmResult(arm_id=arm_id, config=config_snapshot,
                                  status="failed", axes=tuple(tags),
                                  error=str(exc)))

    baseline_id = arm_hash(base_cfg, digest, guidance)
    _write_summary(out_dir, arms, baseline_id)
    _write_axis_grids(out_dir, arms)
    return SweepResult(arms=arms, baseline_id=baseline_id, out_dir=out_dir)


# ------------------------------------------------------------- comparison

# Published full-scale reference (InstructPix2Pix before/after the
# colorization fine-tune), embedded for context in every comparison table.
REFERENCE_ROWS = {
    "baseline": {"psnr_db": 19.7804, "ssim": 0.4301, "mae": 22.1093},
    "fine-tuned": {"psnr_db": 19.9019, "ssim": 0.5348, "mae": 21.3045},
}

_HIGHER_BETTER = {"psnr_db": True, "ssim": True, "mae": False,
                  "lab_mse": False}
_COLUMNS = (("psnr_db", "PSNR↑"), ("ssim", "SSIM↑"), ("mae", "MAE↓"),
            ("lab_mse", "LAB-MSE↓"))


def _fmt(value, bold):
    text = f"{value:.4f}" if math.isfinite(value) else \
        metrics_mod.format_metric(value)
    return f"**{text}**" if bold else text


def compare_models(baseline_ckpt, tuned_ckpt, manifest, sched=None,
                   guidance=None, steps=10, seed=0):
    """Validate two checkpoints on the same val split; markdown table out.

    The better value per column is bold-marked (ties unmarked).  Raises
    SweepError when the checkpoints' model configs differ.
    """
    sched = sched if sched is not None else make_schedule()
    base = load_bundle(baseline_ckpt)
    tuned = load_bundle(tuned_ckpt)
    if base.config != tuned.config:
        raise SweepError(
            f"checkpoint configs differ: {base.config} vs {tuned.config}")
    _, rep_base = validate(base, manifest, sched, guidance=guidance,
                           steps=steps, seed=seed)
    _, rep_tuned = validate(tuned, manifest, sched, guidance=guidance,
                            steps=steps, seed=seed)

    header = "| model | " + " | ".join(t for _, t in _COLUMNS) + " |"
    rule = "|---|" + "---:|" * len(_COLUMNS)
    lines = [header, rule]
    for label, rep, other in (("baseline", rep_base, rep_tuned),
                              ("fine-tuned", rep_tuned, rep_base)):
        cells = []
        for key, _ in _COLUMNS:
            mine, theirs = getattr(rep, key), getattr(other, key)
            if _HIGHER_BETTER[key]:
                bold = mine > theirs
            else:
                bold = mine < theirs
            cells.append(_fmt(mine, bold))
        lines.append(f"| {label} | " + " | ".join(cells) + " |")
    ref_b, ref_t = REFERENCE_ROWS["baseline"], REFERENCE_ROWS["fine-tuned"]
    lines.append("")
    lines.append(
        "Reference values from the full-scale InstructPix2Pix colorization "
        f"fine-tune: PSNR {ref_b['psnr_db']:.4f}→{ref_t['psnr_db']:.4f}, "
        f"SSIM {ref_b['ssim']:.4f}→{ref_t['ssim']:.4f}, "
        f"MAE {ref_b['mae']:.4f}→{ref_t['mae']:.4f} (baseline→fine-tuned).")
    return "\n".join(lines) + "\n"
