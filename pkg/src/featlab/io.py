"""Artifact serialization: trajectory/round CSVs, run manifests,
parameter checkpoints, and summary JSON.

Every CSV starts with a `# manifest=<hash>` comment so outputs can be
traced back to the exact resolved configuration; JSON artifacts carry
the same hash under the key "manifest_hash".
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .cnn import Activation, CnnParams
from .data import PRNG_ID

TOOL_VERSION = "0.1.0"


@dataclass
class RunManifest:
    """Reproducibility record for one CLI invocation."""

    command: str
    config: dict
    seed: int
    outputs: list[str] = field(default_factory=list)
    inputs: list[str] = field(default_factory=list)
    version: str = TOOL_VERSION
    prng: str = PRNG_ID
    duration_s: float = 0.0

    @property
    def hash(self) -> str:
        payload = json.dumps(
            {"command": self.command, "config": self.config, "seed": self.seed,
             "version": self.version, "prng": self.prng},
            sort_keys=True,
        )
        return hashlib.sha256(payload.encode()).hexdigest()[:16]

    def to_dict(self) -> dict:
        return {
            "command": self.command,
            "config": self.config,
            "seed": self.seed,
            "inputs": self.inputs,
            "outputs": self.outputs,
            "version": self.version,
            "prng": self.prng,
            "duration_s": self.duration_s,
            "manifest_hash": self.hash,
        }

    def write(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")


def _fmt(v: float) -> str:
    return repr(float(v))


def write_trajectory_csv(traj, path: str | Path, manifest_hash: str = "") -> None:
    """Fixed-header trajectory dump, one row per recorded step."""
    n_env = traj.c.shape[1]
    cols = ["step", "agg_inv", "agg_spu", "c_norm"]
    cols += [f"c_{e}" for e in range(n_env)]
    cols += ["erm_loss", "irm_loss", "train_acc", "max_xi"]
    with Path(path).open("w") as fh:
        fh.write(f"# manifest={manifest_hash}\n")
        fh.write(",".join(cols) + "\n")
        for i in range(traj.n_recorded):
            row = [str(int(traj.steps[i])), _fmt(traj.agg_inv[i]), _fmt(traj.agg_spu[i]),
                   _fmt(traj.c_norm[i])]
            row += [_fmt(traj.c[i, e]) for e in range(n_env)]
            row += [_fmt(traj.erm_loss[i]), _fmt(traj.irm_loss[i]),
                    _fmt(traj.train_acc[i]), _fmt(traj.max_xi[i])]
            fh.write(",".join(row) + "\n")


def read_trajectory_csv(path: str | Path) -> dict[str, np.ndarray]:
    lines = [l for l in Path(path).read_text().splitlines() if l and not l.startswith("#")]
    header = lines[0].split(",")
    data = np.array([[float(v) for v in l.split(",")] for l in lines[1:]])
    return {name: data[:, i] for i, name in enumerate(header)}


def write_rounds_csv(result, path: str | Path, manifest_hash: str = "") -> None:
    """Per-epoch round log; accuracies appear on each round's last row."""
    with Path(path).open("w") as fh:
        fh.write(f"# manifest={manifest_hash}\n")
        fh.write("round,epoch,dro_loss,retain_loss,train_acc,retention_acc,ood_acc\n")
        for rm in result.rounds:
            last = len(rm.epoch_log) - 1
            for i, entry in enumerate(rm.epoch_log):
                row = [str(rm.round_index), str(entry["epoch"]),
                       _fmt(entry["dro_loss"]), _fmt(entry["retain_loss"])]
                if i == last:
                    row += [_fmt(rm.train_acc),
                            "" if np.isnan(rm.retention_acc) else _fmt(rm.retention_acc),
                            "" if rm.ood_acc is None else _fmt(rm.ood_acc)]
                else:
                    row += ["", "", ""]
                fh.write(",".join(row) + "\n")


def save_checkpoint(p: CnnParams, path: str | Path, seed: int | None = None) -> None:
    """JSON header line, then the flat row-major filter entries
    (w_pos rows first, then w_neg rows), one decimal per line."""
    header = {
        "m": p.m,
        "d": p.d,
        "activation": p.activation.kind,
        "beta_smooth": p.activation.beta_smooth,
        "seed": seed,
    }
    with Path(path).open("w") as fh:
        fh.write(json.dumps(header) + "\n")
        for v in np.concatenate([p.w_pos.ravel(), p.w_neg.ravel()]):
            fh.write(_fmt(v) + "\n")


def load_checkpoint(path: str | Path) -> CnnParams:
    lines = Path(path).read_text().splitlines()
    header = json.loads(lines[0])
    m, d = header["m"], header["d"]
    vals = np.array([float(v) for v in lines[1 : 1 + 2 * m * d]])
    if vals.size != 2 * m * d:
        raise ValueError(f"checkpoint truncated: expected {2 * m * d} values, got {vals.size}")
    act = Activation(header["activation"], header.get("beta_smooth", 5.0))
    return CnnParams(vals[: m * d].reshape(m, d), vals[m * d :].reshape(m, d), act)


def write_json(payload: dict, path: str | Path, manifest_hash: str = "") -> None:
    payload = dict(payload)
    payload["manifest_hash"] = manifest_hash
    Path(path).write_text(json.dumps(payload, indent=2, default=_json_default) + "\n")


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.floating, np.integer)):
        return obj.item()
    raise TypeError(f"not JSON serializable: {type(obj)}")


class Timer:
    def __enter__(self):
        self.t0 = time.perf_counter()
        return self

    def __exit__(self, *exc):
        self.elapsed = time.perf_counter() - self.t0
