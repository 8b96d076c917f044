"""Static report artifacts for a fine-tune run: loss-curve figures, the
validation-metric table, and the baseline-vs-tuned comparison."""

import os

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402  (backend must be set first)

from .diffusion import make_schedule
from .sweep import compare_models
from .trainer import read_run_log

LOSS_CURVES_NAME = "loss_curves.png"
VAL_TABLE_NAME = "val_metrics.md"
COMPARISON_NAME = "comparison.md"


class ReportError(ValueError):
    pass


def plot_loss_curves(log, path):
    """Training noise-MSE per step beside the validation LAB-MSE curve."""
    if not log.train:
        raise ReportError("run log has no training entries")
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10.0, 4.0))
    steps = [s for s, _ in log.train]
    ax1.plot(steps, [v for _, v in log.train], lw=0.9, color="#1f6fb2")
    ax1.set_xlabel("step")
    ax1.set_ylabel("noise MSE")
    ax1.set_title("training loss")
    if log.val:
        vsteps = [e.step for e in log.val]
        ax2.plot(vsteps, [e.lab_mse for e in log.val], marker="o",
                 color="#b2421f", label="LAB-MSE")
        ax2.set_xlabel("step")
        ax2.set_ylabel("LAB-MSE")
        twin = ax2.twinx()
        twin.plot(vsteps, [e.psnr_db for e in log.val], marker="s",
                  color="#3a8f3a", label="PSNR")
        twin.set_ylabel("PSNR (dB)")
        handles1, labels1 = ax2.get_legend_handles_labels()
        handles2, labels2 = twin.get_legend_handles_labels()
        ax2.legend(handles1 + handles2, labels1 + labels2, loc="best",
                   fontsize=8)
    ax2.set_title("validation metrics")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def val_metrics_table(log):
    """Markdown table of every logged validation checkpoint."""
    lines = [
        "| step | LAB-MSE | PSNR (dB) | SSIM | MAE |",
        "|---:|---:|---:|---:|---:|",
    ]
    for e in log.val:
        lines.append(f"| {e.step} | {e.lab_mse:.4f} | {e.psnr_db:.4f} | "
                     f"{e.ssim:.4f} | {e.mae:.4f} |")
    return "\n".join(lines) + "\n"


def write_run_report(run_dir, out_dir, manifest=None, sched=None,
                     guidance=None, steps=10, seed=0):
    """Render a run directory into report files; returns {name: path}.

    Always writes the loss-curve PNG and validation-metric table.  When a
    dataset manifest is supplied and the run kept its init/final
    checkpoints, also writes the baseline-vs-fine-tuned comparison table.
    """
    os.makedirs(out_dir, exist_ok=True)
    log = read_run_log(run_dir)
    outputs = {}

    curve_path = os.path.join(out_dir, LOSS_CURVES_NAME)
    plot_loss_curves(log, curve_path)
    outputs["loss_curves"] = curve_path

    table_path = os.path.join(out_dir, VAL_TABLE_NAME)
    with open(table_path, "w") as fh:
        fh.write("# Validation metrics by step\n\n")
        fh.write(val_metrics_table(log))
    outputs["val_metrics"] = table_path

    init_ckpt = os.path.join(run_dir, "checkpoints", "init")
    final_ckpt = os.path.join(run_dir, "checkpoints", "final")
    if manifest is not None:
        if not (os.path.isdir(init_ckpt) and os.path.isdir(final_ckpt)):
            raise ReportError(
                f"run {run_dir} is missing init/final checkpoints")
        sched = sched if sched is not None else make_schedule()
        table = compare_models(init_ckpt, final_ckpt, manifest, sched=sched,
                               guidance=guidance, steps=steps, seed=seed)
        cmp_path = os.path.join(out_dir, COMPARISON_NAME)
        with open(cmp_path, "w") as fh:
            fh.write("# Baseline vs. fine-tuned\n\n")
            fh.write(table)
        outputs["comparison"] = cmp_path
    return outputs
