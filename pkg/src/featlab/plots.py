"""Optional matplotlib renderings of the CSV artifacts.

The report paths always emit delimited data; these helpers render the
same quantities to PNG files next to them when plotting is requested.
"""
from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def plot_trajectory(traj, path: str | Path, switch_step: int | None = None) -> None:
    """Two panels: per-env penalty scalars and the feature aggregates."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    for e in range(traj.c.shape[1]):
        ax1.plot(traj.steps, traj.c[:, e], label=f"$C^{{{e}}}$")
    ax1.plot(traj.steps, traj.c_norm, "k--", label=r"$\|c\|_2$", lw=1)
    ax1.set_xlabel("step")
    ax1.set_ylabel("penalty scalar")
    ax1.legend()

    ax2.plot(traj.steps, traj.agg_inv, label="invariant")
    ax2.plot(traj.steps, traj.agg_spu, label="spurious")
    ax2.set_xlabel("step")
    ax2.set_ylabel("aggregate feature")
    ax2.legend()
    if switch_step is not None:
        for ax in (ax1, ax2):
            ax.axvline(switch_step, color="gray", ls=":", lw=1)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def plot_rounds(result, path: str | Path) -> None:
    """Loss curves per round plus end-of-round accuracies."""
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    offset = 0
    for rm in result.rounds:
        epochs = [offset + e["epoch"] for e in rm.epoch_log]
        ax1.plot(epochs, [e["dro_loss"] for e in rm.epoch_log],
                 label=f"round {rm.round_index} worst-group")
        if any(e["retain_loss"] for e in rm.epoch_log):
            ax1.plot(epochs, [e["retain_loss"] for e in rm.epoch_log],
                     ls="--", label=f"round {rm.round_index} retention")
        offset = epochs[-1] + 1 if epochs else offset
    ax1.set_xlabel("cumulative epoch")
    ax1.set_ylabel("loss")
    ax1.legend(fontsize=8)

    idx = [rm.round_index for rm in result.rounds]
    ax2.plot(idx, [rm.train_acc for rm in result.rounds], "o-", label="train")
    ret = [rm.retention_acc for rm in result.rounds]
    ax2.plot(idx, ret, "s-", label="retention")
    if all(rm.ood_acc is not None for rm in result.rounds):
        ax2.plot(idx, [rm.ood_acc for rm in result.rounds], "^-", label="ood")
    ax2.set_xlabel("round")
    ax2.set_ylabel("accuracy")
    ax2.set_ylim(0, 1.05)
    ax2.legend()
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
