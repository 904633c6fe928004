"""Two-bit multi-environment data model.

Each sample is a pair of patches: a feature patch x1 carrying an
invariant component along v1 = e1 (label flip rate alpha, shared across
environments) and a spurious component along v2 = e2 (flip rate beta_e,
environment dependent), plus a pure-noise patch x2 supported on the
orthogonal complement of span{v1, v2}.

Datasets are immutable after creation and deterministic per seed
(counter-based Philox generator).
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

PRNG_ID = "numpy-philox-1.x"


@dataclass(frozen=True)
class EnvironmentSpec:
    """One training environment: (alpha, beta, n)."""

    alpha: float
    beta: float
    n: int

    def __post_init__(self) -> None:
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if not 0.0 <= self.beta <= 1.0:
            raise ValueError(f"beta must be in [0, 1], got {self.beta}")
        if self.n < 1:
            raise ValueError(f"n must be >= 1, got {self.n}")


@dataclass(frozen=True)
class TwoBitSample:
    """Single sample view with its latent Rademacher draws."""

    x1: np.ndarray
    x2: np.ndarray
    y: int
    env_index: int
    rad_alpha: int
    rad_beta: int


@dataclass(frozen=True)
class GroupCounts:
    """Aggregated fractions of (rad_alpha, rad_beta) sign groups.

    c_pp counts (+1, +1), c_pm counts (+1, -1), c_mp counts (-1, +1),
    c_mm counts (-1, -1); each environment contributes fractions summing
    to one, so the four fields sum to the number of environments.
    """

    c_pp: float
    c_pm: float
    c_mp: float
    c_mm: float

    def as_array(self) -> np.ndarray:
        return np.array([self.c_pp, self.c_pm, self.c_mp, self.c_mm])


@dataclass(frozen=True)
class TwoBitDataset:
    """Generated multi-environment dataset with latent draws retained.

    Arrays are row-aligned: sample i belongs to environment
    env_index[i], ordered by environment.
    """

    envs: tuple[EnvironmentSpec, ...]
    d: int
    sigma_p: float
    seed: int
    x1: np.ndarray
    x2: np.ndarray
    y: np.ndarray
    rad_alpha: np.ndarray
    rad_beta: np.ndarray
    env_index: np.ndarray
    metadata: dict = field(default_factory=dict)

    @property
    def n(self) -> int:
        return self.y.shape[0]

    @property
    def n_envs(self) -> int:
        return len(self.envs)

    def env_slice(self, e: int) -> slice:
        start = sum(spec.n for spec in self.envs[:e])
        return slice(start, start + self.envs[e].n)

    def sample(self, i: int) -> TwoBitSample:
        return TwoBitSample(
            x1=self.x1[i],
            x2=self.x2[i],
            y=int(self.y[i]),
            env_index=int(self.env_index[i]),
            rad_alpha=int(self.rad_alpha[i]),
            rad_beta=int(self.rad_beta[i]),
        )

    @property
    def samples(self) -> list[TwoBitSample]:
        return [self.sample(i) for i in range(self.n)]

    @property
    def x_sum(self) -> np.ndarray:
        """Cached x1 + x2, used by the linear-activation fast path."""
        cached = self.metadata.get("_x_sum")
        if cached is None:
            cached = self.x1 + self.x2
            self.metadata["_x_sum"] = cached
        return cached


def _rademacher(rng: np.random.Generator, delta: float, n: int) -> np.ndarray:
    """Rad(delta): -1 with probability delta, +1 otherwise."""
    return np.where(rng.random(n) < delta, -1, 1).astype(np.int64)


def _noise_patch(rng: np.random.Generator, n: int, d: int, sigma_p: float) -> np.ndarray:
    xi = rng.normal(0.0, sigma_p, size=(n, d))
    xi[:, :2] = 0.0  # covariance sigma_p^2 (I - v1 v1^T - v2 v2^T)
    return xi


def sample_dataset(
    specs: list[EnvironmentSpec],
    d: int = 50,
    sigma_p: float = 0.01,
    seed: int = 0,
) -> TwoBitDataset:
    """Draw a training dataset from the two-bit model.

    For each sample: y uniform on {-1, +1},
    x1 = y * Rad(alpha) * v1 + y * Rad(beta_e) * v2, x2 pure noise.
    """
    if not specs:
        raise ValueError("specs must be nonempty")
    if d < 3:
        raise ValueError(f"d must be >= 3, got {d}")
    if sigma_p < 0:
        raise ValueError(f"sigma_p must be >= 0, got {sigma_p}")

    rng = np.random.Generator(np.random.Philox(seed))
    x1_parts, x2_parts, y_parts, ra_parts, rb_parts, env_parts = [], [], [], [], [], []
    for e, spec in enumerate(specs):
        y = np.where(rng.random(spec.n) < 0.5, -1, 1).astype(np.int64)
        ra = _rademacher(rng, spec.alpha, spec.n)
        rb = _rademacher(rng, spec.beta, spec.n)
        x1 = np.zeros((spec.n, d))
        x1[:, 0] = y * ra
        x1[:, 1] = y * rb
        x1_parts.append(x1)
        x2_parts.append(_noise_patch(rng, spec.n, d, sigma_p))
        y_parts.append(y)
        ra_parts.append(ra)
        rb_parts.append(rb)
        env_parts.append(np.full(spec.n, e, dtype=np.int64))

    return TwoBitDataset(
        envs=tuple(specs),
        d=d,
        sigma_p=sigma_p,
        seed=seed,
        x1=np.concatenate(x1_parts),
        x2=np.concatenate(x2_parts),
        y=np.concatenate(y_parts),
        rad_alpha=np.concatenate(ra_parts),
        rad_beta=np.concatenate(rb_parts),
        env_index=np.concatenate(env_parts),
        metadata={"prng": PRNG_ID, "kind": "train"},
    )


def sample_test_set(
    n: int,
    beta_list: list[float],
    d: int = 50,
    sigma_p: float = 0.01,
    seed: int = 0,
) -> TwoBitDataset:
    """Reversed-correlation test set.

    x1 = y*v1 + y*Rad(1 - beta_e)*v2: the invariant bit is perfectly
    correlated with the label while the spurious bit is mostly
    anti-correlated. Samples split evenly across beta_list.
    """
    if not beta_list:
        raise ValueError("beta_list must be nonempty")
    if n % len(beta_list) != 0:
        raise ValueError(f"n={n} must divide evenly across {len(beta_list)} betas")
    n_each = n // len(beta_list)
    # Effective per-sample flip rates: alpha=0 (never flips), spurious
    # flips with probability 1 - beta_e.
    specs = [EnvironmentSpec(alpha=0.0, beta=1.0 - b, n=n_each) for b in beta_list]
    ds = sample_dataset(specs, d=d, sigma_p=sigma_p, seed=seed)
    ds.metadata.update({"kind": "test", "beta_list": list(beta_list)})
    return ds


def group_counts(ds: TwoBitDataset) -> GroupCounts:
    """Empirical per-environment sign-group fractions, summed over envs."""
    totals = np.zeros(4)
    for e in range(ds.n_envs):
        sl = ds.env_slice(e)
        ra = ds.rad_alpha[sl]
        rb = ds.rad_beta[sl]
        n_e = ds.envs[e].n
        totals[0] += np.sum((ra == 1) & (rb == 1)) / n_e
        totals[1] += np.sum((ra == 1) & (rb == -1)) / n_e
        totals[2] += np.sum((ra == -1) & (rb == 1)) / n_e
        totals[3] += np.sum((ra == -1) & (rb == -1)) / n_e
    return GroupCounts(*totals)


def expected_group_counts(specs: list[EnvironmentSpec]) -> GroupCounts:
    """Population limits of the sign-group fractions."""
    totals = np.zeros(4)
    for spec in specs:
        a, b = spec.alpha, spec.beta
        totals += [(1 - a) * (1 - b), (1 - a) * b, a * (1 - b), a * b]
    return GroupCounts(*totals)


def group_count_tolerance(specs: list[EnvironmentSpec], rho: float = 0.05) -> float:
    """Hoeffding half-width for the group-count concentration check."""
    n_min = min(spec.n for spec in specs)
    return float(np.sqrt(2.0 * np.log(16.0 / rho) / n_min))


def dataset_to_csv(ds: TwoBitDataset, path: str | Path, header_comment: str | None = None) -> None:
    """Write `env,y,rad_alpha,rad_beta,x...` rows plus a JSON sidecar."""
    path = Path(path)
    cols = [f"x{i}" for i in range(2 * ds.d)]
    with path.open("w") as fh:
        if header_comment:
            fh.write(f"# {header_comment}\n")
        fh.write("env,y,rad_alpha,rad_beta," + ",".join(cols) + "\n")
        for i in range(ds.n):
            vals = np.concatenate([ds.x1[i], ds.x2[i]])
            row = ",".join(repr(float(v)) for v in vals)
            fh.write(f"{ds.env_index[i]},{ds.y[i]},{ds.rad_alpha[i]},{ds.rad_beta[i]},{row}\n")
    sidecar = {
        "specs": [{"alpha": s.alpha, "beta": s.beta, "n": s.n} for s in ds.envs],
        "d": ds.d,
        "sigma_p": ds.sigma_p,
        "seed": ds.seed,
        "prng": PRNG_ID,
    }
    path.with_suffix(path.suffix + ".json").write_text(json.dumps(sidecar, indent=2))


def dataset_from_csv(path: str | Path) -> TwoBitDataset:
    """Reload a dataset written by dataset_to_csv."""
    path = Path(path)
    meta = json.loads(path.with_suffix(path.suffix + ".json").read_text())
    rows = [
        line.split(",")
        for line in path.read_text().splitlines()
        if line and not line.startswith("#") and not line.startswith("env,")
    ]
    d = meta["d"]
    arr = np.array([[float(v) for v in row] for row in rows])
    specs = tuple(EnvironmentSpec(**s) for s in meta["specs"])
    return TwoBitDataset(
        envs=specs,
        d=d,
        sigma_p=meta["sigma_p"],
        seed=meta["seed"],
        x1=arr[:, 4 : 4 + d],
        x2=arr[:, 4 + d : 4 + 2 * d],
        y=arr[:, 1].astype(np.int64),
        rad_alpha=arr[:, 2].astype(np.int64),
        rad_beta=arr[:, 3].astype(np.int64),
        env_index=arr[:, 0].astype(np.int64),
        metadata={"prng": meta["prng"]},
    )
