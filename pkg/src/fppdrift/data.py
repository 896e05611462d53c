"""Synthetic snapshot datasets and the snapshot CSV format.

CSV schema: header ``t_index,dim_0,...,dim_{D-1}``, one row per particle,
floats written with 17 significant digits so values round-trip exactly.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .sde import Drift, LinearDrift, SampleBatch, SdeConfig, rollout
from .seeding import derive_seed

SYN1_RECORD = (0, 20, 50, 200, 500)
SYN1_TRAIN = (0, 20, 200)
SYN1_EVAL = (50, 500)
SYN23_RECORD = (0, 2, 3, 4, 6, 10)
SYN23_TRAIN = (0, 3, 6)
SYN23_EVAL = (2, 4, 10)
TRAIN_FRACTION = 0.6  # 1200 of 2000


@dataclass
class MixtureDrift(Drift):
    """Responsibility-weighted attraction to two isotropic Gaussian modes.

    Acts independently on each consecutive pair of coordinates:
    ``g(x) = -[w1 (x - mu1) / s1 + w2 (x - mu2) / s2]`` with ``w_k`` the
    posterior weight of mode ``k`` under equal priors.
    """

    mu1: np.ndarray
    mu2: np.ndarray
    s1: float = 1.0
    s2: float = 1.0
    tag = "mixture"

    def __post_init__(self):
        self.mu1 = np.asarray(self.mu1, dtype=float)
        self.mu2 = np.asarray(self.mu2, dtype=float)
        if self.mu1.shape != (2,) or self.mu2.shape != (2,):
            raise ValueError("mode centres are 2-vectors")
        if not (self.s1 > 0 and self.s2 > 0):
            raise ValueError("mode scales must be positive")

    def weights(self, x: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        blocks = x.reshape(*x.shape[:-1], -1, 2)
        l1 = -np.sum((blocks - self.mu1) ** 2, axis=-1) / (2 * self.s1**2) - 2 * np.log(self.s1)
        l2 = -np.sum((blocks - self.mu2) ** 2, axis=-1) / (2 * self.s2**2) - 2 * np.log(self.s2)
        norm = np.logaddexp(l1, l2)
        return np.exp(l1 - norm), np.exp(l2 - norm)

    def __call__(self, x):
        x = np.asarray(x, dtype=float)
        if x.shape[-1] % 2:
            raise ValueError("mixture drift needs an even dimension")
        blocks = x.reshape(*x.shape[:-1], -1, 2)
        w1, w2 = self.weights(x)
        g = -(w1[..., None] * (blocks - self.mu1) / self.s1 + w2[..., None] * (blocks - self.mu2) / self.s2)
        return g.reshape(x.shape)

    def describe(self):
        return {"tag": self.tag, "mu1": self.mu1.tolist(), "mu2": self.mu2.tolist(), "s1": self.s1, "s2": self.s2}


@dataclass
class DatasetBundle:
    train: dict[int, SampleBatch]
    test: dict[int, SampleBatch]
    dt: float
    sigma: float
    generator: str
    seed: int
    train_indices: tuple[int, ...]
    eval_indices: tuple[int, ...]
    drift: Drift | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return next(iter(self.train.values())).dim

    def metadata(self) -> dict:
        return {
            "generator": self.generator,
            "dt": self.dt,
            "sigma": self.sigma,
            "seed": self.seed,
            "dim": self.dim,
            "train_indices": list(self.train_indices),
            "eval_indices": list(self.eval_indices),
            "record": sorted(set(self.train) | set(self.test)),
            "drift": self.drift.describe() if self.drift is not None else None,
        }


def _check_dim(dim):
    if dim < 2 or dim % 2:
        raise ValueError(f"dimension must be an even number >= 2, got {dim}")


def simulate_bundle(
    drift: Drift,
    dim: int,
    n: int,
    seed: int,
    record: Sequence[int],
    train_indices: Sequence[int],
    eval_indices: Sequence[int],
    dt: float,
    sigma: float,
    generator: str,
    x0: np.ndarray | None = None,
    train_fraction: float = TRAIN_FRACTION,
) -> DatasetBundle:
    """Simulate ``n`` particles and split them into train/test sets."""
    if n < 2:
        raise ValueError("need at least two particles to split into train and test")
    record = sorted(set(record) | set(train_indices) | set(eval_indices) | {0})
    if x0 is None:
        x0 = np.random.default_rng(derive_seed(seed, generator, "x0")).standard_normal((n, dim))
    cfg = SdeConfig(sigma, dt, max(record[-1], 1), derive_seed(seed, generator, "noise"))
    snaps = {b.time_index: b for b in rollout(SampleBatch(0, x0), drift, cfg, record)}
    perm = np.random.default_rng(derive_seed(seed, generator, "split")).permutation(n)
    n_train = min(max(int(round(train_fraction * n)), 1), n - 1)
    tr, te = perm[:n_train], perm[n_train:]
    train = {t: SampleBatch(t, snaps[t].points[tr]) for t in train_indices}
    test = {t: SampleBatch(t, snaps[t].points[te]) for t in record}
    return DatasetBundle(train, test, dt, sigma, generator, seed, tuple(train_indices), tuple(eval_indices), drift)


def synthetic1_drift(dim: int, A=(4.0, 1.0), B=(-3.0, -3.0)) -> LinearDrift:
    _check_dim(dim)
    return LinearDrift(np.tile(A, dim // 2), np.tile(B, dim // 2))


def gen_synthetic1(
    dim: int = 2,
    n: int = 2000,
    seed: int = 0,
    record: Sequence[int] = SYN1_RECORD,
    train_indices: Sequence[int] = SYN1_TRAIN,
    eval_indices: Sequence[int] = SYN1_EVAL,
    sigma: float = 1.0,
    dt: float = 0.01,
    x0: np.ndarray | None = None,
) -> DatasetBundle:
    """Diagonal OU dynamics ``x += -(A*x + B) dt + sigma sqrt(dt) N(0, I)``."""
    _check_dim(dim)
    return simulate_bundle(
        synthetic1_drift(dim), dim, n, seed, record, train_indices, eval_indices, dt, sigma, "syn1", x0=x0
    )


def synthetic23_drift(variant: int) -> tuple[MixtureDrift, float]:
    if variant == 2:
        return MixtureDrift([15.0, 15.0], [-15.0, -15.0], 1.0, 1.0), 0.01
    if variant == 3:
        return MixtureDrift([16.0, 12.0], [-18.0, -10.0], 1.0, math.sqrt(0.95)), 0.02
    raise ValueError(f"variant must be 2 or 3, got {variant}")


def gen_synthetic23(
    variant: int,
    dim: int = 2,
    n: int = 2000,
    seed: int = 0,
    record: Sequence[int] = SYN23_RECORD,
    train_indices: Sequence[int] = SYN23_TRAIN,
    eval_indices: Sequence[int] = SYN23_EVAL,
    sigma: float = 1.0,
) -> DatasetBundle:
    """Bimodal mixture dynamics (variant 2 balanced, variant 3 biased)."""
    drift, dt = synthetic23_drift(variant)
    _check_dim(dim)
    return simulate_bundle(drift, dim, n, seed, record, train_indices, eval_indices, dt, sigma, f"syn{variant}")


# -- snapshot CSV -----------------------------------------------------------------


class SnapshotFormatError(ValueError):
    def __init__(self, message, line=None):
        super().__init__(f"line {line}: {message}" if line is not None else message)
        self.line = line


def save_snapshots(batches: Sequence[SampleBatch], path) -> None:
    batches = list(batches)
    if not batches:
        raise ValueError("nothing to write")
    dim = batches[0].dim
    if any(b.dim != dim for b in batches):
        raise ValueError("batches have different dimensions")
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["t_index", *(f"dim_{i}" for i in range(dim))])
        for b in batches:
            for row in b.points:
                w.writerow([b.time_index, *(format(v, ".17g") for v in row)])


def load_snapshots(path) -> list[SampleBatch]:
    """Read a snapshot CSV; batches come back ordered by ``t_index``."""
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise SnapshotFormatError(f"{path} is empty")
    header = [h.strip() for h in rows[0]]
    dim = len(header) - 1
    if dim < 1 or header[0] != "t_index" or header[1:] != [f"dim_{i}" for i in range(dim)]:
        raise SnapshotFormatError("header must be t_index,dim_0,...,dim_{D-1}", line=1)
    groups: dict[int, list] = {}
    for lineno, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != dim + 1:
            raise SnapshotFormatError(f"expected {dim + 1} fields, found {len(row)}", line=lineno)
        try:
            t = int(row[0])
            vals = [float(c) for c in row[1:]]
        except ValueError:
            raise SnapshotFormatError("non-numeric cell", line=lineno) from None
        if not all(math.isfinite(v) for v in vals):
            raise SnapshotFormatError("non-finite value", line=lineno)
        groups.setdefault(t, []).append(vals)
    if not groups:
        raise SnapshotFormatError(f"{path} has a header but no data rows")
    return [SampleBatch(t, np.array(groups[t])) for t in sorted(groups)]


def save_bundle(bundle: DatasetBundle, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    written = []
    for split, batches in (("train", bundle.train), ("test", bundle.test)):
        for t in sorted(batches):
            p = out / f"{split}_t{t}.csv"
            save_snapshots([batches[t]], p)
            written.append(p)
    meta = out / "metadata.json"
    meta.write_text(json.dumps(bundle.metadata(), indent=2))
    written.append(meta)
    return written


def load_bundle(in_dir) -> DatasetBundle:
    d = Path(in_dir)
    meta_path = d / "metadata.json"
    if not meta_path.exists():
        raise FileNotFoundError(f"no metadata.json in {d}")
    meta = json.loads(meta_path.read_text())
    train, test = {}, {}
    for t in meta["train_indices"]:
        p = d / f"train_t{t}.csv"
        if not p.exists():
            raise FileNotFoundError(f"missing training snapshot {p}")
        train[t] = load_snapshots(p)[0]
    for p in sorted(d.glob("test_t*.csv")):
        b = load_snapshots(p)[0]
        test[b.time_index] = b
    drift = None
    info = meta.get("drift") or {}
    if info.get("tag") == "linear":
        drift = LinearDrift(info["A"], info["B"])
    elif info.get("tag") == "mixture":
        drift = MixtureDrift(info["mu1"], info["mu2"], info["s1"], info["s2"])
    return DatasetBundle(
        train, test, meta["dt"], meta["sigma"], meta["generator"], meta["seed"],
        tuple(meta["train_indices"]), tuple(meta["eval_indices"]), drift,
    )
