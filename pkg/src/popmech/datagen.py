"""Synthetic snapshot data: gradient-flow SDEs, Boids flocks, and the on-disk bundle format."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Sequence

import numpy as np

from . import kernels

BUNDLE_VERSION = 1
POTENTIALS = ("bohachevsky", "oakley-ohagan", "quadratic", "styblinski-tang", "wavy-plateau")


class DatasetError(ValueError):
    pass


@dataclass
class SnapshotDataset:
    """Marginals at increasing times; the first ``num_train`` are for fitting, the rest held out."""

    dim: int
    times: np.ndarray
    snapshots: list[np.ndarray]
    velocities: list[np.ndarray | None] | None = None
    paired: bool = False
    num_train: int | None = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.snapshots = [np.asarray(s, dtype=float) for s in self.snapshots]
        if self.num_train is None:
            self.num_train = len(self.times)
        self.validate()

    def validate(self):
        if len(self.times) != len(self.snapshots):
            raise DatasetError(f"{len(self.times)} times but {len(self.snapshots)} snapshots")
        if len(self.times) == 0:
            raise DatasetError("dataset has no snapshots")
        if np.any(np.diff(self.times) <= 0):
            raise DatasetError(f"times must be strictly increasing: {self.times.tolist()}")
        for i, s in enumerate(self.snapshots):
            if s.ndim != 2 or s.shape[1] != self.dim:
                raise DatasetError(f"snapshot {i} has shape {s.shape}, expected (N, {self.dim})")
        if self.paired and len({s.shape[0] for s in self.snapshots}) > 1:
            raise DatasetError("paired dataset needs equal particle counts at every time")
        if self.velocities is not None:
            if len(self.velocities) != len(self.snapshots):
                raise DatasetError("velocities list must align with snapshots")
            for i, (v, s) in enumerate(zip(self.velocities, self.snapshots)):
                if v is not None and np.shape(v) != s.shape:
                    raise DatasetError(f"velocity {i} has shape {np.shape(v)}, snapshot has {s.shape}")
        if not 1 <= self.num_train <= len(self.times):
            raise DatasetError(f"num_train={self.num_train} out of range for {len(self.times)} snapshots")

    def __len__(self):
        return len(self.times)

    def velocity(self, i: int) -> np.ndarray | None:
        return None if self.velocities is None else self.velocities[i]

    def split(self) -> tuple["SnapshotDataset", "SnapshotDataset | None"]:
        """(train part, held-out part); the held-out part is None when nothing is held out."""
        k = self.num_train
        vel = self.velocities
        train = SnapshotDataset(self.dim, self.times[:k], self.snapshots[:k], None if vel is None else vel[:k],
                                self.paired, k, dict(self.meta))
        if k == len(self.times):
            return train, None
        test = SnapshotDataset(self.dim, self.times[k:], self.snapshots[k:], None if vel is None else vel[k:],
                               self.paired, len(self.times) - k, dict(self.meta))
        return train, test


# --- gradient-flow SDEs -------------------------------------------------------------------------


@dataclass(frozen=True)
class SdeSpec:
    potential: str = "quadratic"
    sigma2: float = 1.0
    dt: float = 0.01
    em_substeps: int = 10
    num_train: int = 10
    num_test: int = 10
    N: int = 1000
    dim: int = 2
    init_variance: float = 0.2
    paired: bool = True
    seed: int = 0

    def __post_init__(self):
        if self.potential not in POTENTIALS:
            raise ValueError(f"unknown potential {self.potential!r}; expected one of {POTENTIALS}")
        if self.potential == "bohachevsky" and self.dim != 2:
            raise ValueError("bohachevsky is defined in two dimensions only")
        if self.sigma2 < 0:
            raise ValueError("sigma2 must be >= 0")
        for name in ("dt", "init_variance"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        for name in ("em_substeps", "num_train", "N", "dim"):
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be a positive integer")
        if self.num_test < 0:
            raise ValueError("num_test must be >= 0")


def potential_value(name: str, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if name == "bohachevsky":
        x1, x2 = X[:, 0], X[:, 1]
        return 10 * (x1 ** 2 + 2 * x2 ** 2 - 0.3 * np.cos(3 * np.pi * x1) - 0.4 * np.cos(4 * np.pi * x2))
    if name == "oakley-ohagan":
        return 5 * np.sum(np.sin(X) + np.cos(X) + X ** 2 + X, axis=1)
    if name == "quadratic":
        return 5 * np.sum(X ** 2, axis=1)
    if name == "styblinski-tang":
        return 0.5 * np.sum(X ** 4 - 16 * X ** 2 + 5 * X, axis=1)
    if name == "wavy-plateau":
        return np.sum(np.cos(np.pi * X) + 0.5 * X ** 4 - 3 * X ** 2 + 1, axis=1)
    raise ValueError(f"unknown potential {name!r}")


def potential_grad(name: str, X: np.ndarray) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if name == "bohachevsky":
        x1, x2 = X[:, 0], X[:, 1]
        g1 = 10 * (2 * x1 + 0.9 * np.pi * np.sin(3 * np.pi * x1))
        g2 = 10 * (4 * x2 + 1.6 * np.pi * np.sin(4 * np.pi * x2))
        return np.stack([g1, g2], axis=1)
    if name == "oakley-ohagan":
        return 5 * (np.cos(X) - np.sin(X) + 2 * X + 1)
    if name == "quadratic":
        return 10 * X
    if name == "styblinski-tang":
        return 0.5 * (4 * X ** 3 - 32 * X + 5)
    if name == "wavy-plateau":
        return -np.pi * np.sin(np.pi * X) + 2 * X ** 3 - 6 * X
    raise ValueError(f"unknown potential {name!r}")


def _em(X: np.ndarray, spec: SdeSpec, steps: int, rng: np.random.Generator) -> np.ndarray:
    h = spec.dt / spec.em_substeps
    noise = np.sqrt(spec.sigma2 * h)
    for _ in range(steps):
        X = X - h * potential_grad(spec.potential, X) + noise * rng.standard_normal(X.shape)
    return X


def _init_cloud(spec: SdeSpec, rng: np.random.Generator) -> np.ndarray:
    return np.sqrt(spec.init_variance) * rng.standard_normal((spec.N, spec.dim))


def analytic_gf_v0(spec: SdeSpec, X0) -> np.ndarray:
    """-grad V(x) - (sigma^2 / 2) grad log p0(x) for the Gaussian initial law."""
    X0 = np.asarray(X0, dtype=float)
    score = -X0 / spec.init_variance
    return -potential_grad(spec.potential, X0) - 0.5 * spec.sigma2 * score


def gen_sde(spec: SdeSpec) -> SnapshotDataset:
    """Euler-Maruyama snapshots of dX = -grad V dt + sigma dW; held-out marginals follow the training ones."""
    total = spec.num_train + spec.num_test
    times = spec.dt * np.arange(total)
    snaps = []
    if spec.paired:
        rng = np.random.default_rng(spec.seed)
        X = _init_cloud(spec, rng)
        snaps.append(X.copy())
        for _ in range(1, total):
            X = _em(X, spec, spec.em_substeps, rng)
            snaps.append(X.copy())
    else:
        # every recorded time gets its own simulation and its own seed, so times are independent
        for i in range(total):
            rng = np.random.default_rng([spec.seed, i])
            snaps.append(_em(_init_cloud(spec, rng), spec, i * spec.em_substeps, rng))
    vels: list = [None] * total
    vels[0] = analytic_gf_v0(spec, snaps[0])
    meta = {"generator": "sde", "spec": asdict(spec)}
    return SnapshotDataset(spec.dim, times, snaps, vels, spec.paired, spec.num_train, meta)


# --- Boids --------------------------------------------------------------------------------------


@dataclass(frozen=True)
class BoidsSpec:
    N: int = 1000
    r_inner: float = 0.3
    r_outer: float = 1.0
    w_separation: float = 0.1
    w_alignment: float = 0.3
    w_cohesion: float = 0.005
    w_boundary: float = 0.5
    boundary_radius: float = 5.0
    dt: float = 0.5
    sim_substeps: int = 10
    frames: int = 50
    forecast_frames: int = 50
    init: str = "gaussian"
    pos_std: float = 1.0
    vel_std: float = 1.0
    mixture_centers: tuple = ((-2.0, 0.0), (2.0, 0.0))
    seed: int = 0

    def __post_init__(self):
        if not 0 < self.r_inner < self.r_outer:
            raise ValueError("need 0 < r_inner < r_outer")
        for name in ("w_separation", "w_alignment", "w_cohesion", "w_boundary"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if not (self.dt > 0 and self.boundary_radius > 0 and self.pos_std >= 0 and self.vel_std >= 0):
            raise ValueError("dt, boundary_radius must be > 0 and std fields >= 0")
        if self.N < 1 or self.frames < 1 or self.forecast_frames < 0 or self.sim_substeps < 1:
            raise ValueError("N, frames, sim_substeps must be positive and forecast_frames >= 0")
        if self.init not in ("gaussian", "mixture"):
            raise ValueError(f"unknown init {self.init!r}")


def boids_accel(spec: BoidsSpec, X: np.ndarray, V: np.ndarray) -> np.ndarray:
    return kernels.boids_accel(np.ascontiguousarray(X, dtype=float), np.ascontiguousarray(V, dtype=float),
                               spec.r_inner, spec.r_outer, spec.w_separation, spec.w_alignment,
                               spec.w_cohesion, spec.w_boundary, spec.boundary_radius)


def boids_step(spec: BoidsSpec, X: np.ndarray, V: np.ndarray, h: float) -> tuple[np.ndarray, np.ndarray]:
    """One explicit Euler step; positions move with the old velocity."""
    a = boids_accel(spec, X, V)
    return X + h * V, V + h * a


def _boids_init(spec: BoidsSpec, rng: np.random.Generator) -> tuple[np.ndarray, np.ndarray]:
    X = spec.pos_std * rng.standard_normal((spec.N, 2))
    if spec.init == "mixture":
        centers = np.asarray(spec.mixture_centers, dtype=float)
        X = X + centers[rng.integers(len(centers), size=spec.N)]
    V = spec.vel_std * rng.standard_normal((spec.N, 2))
    return X, V


def gen_boids(spec: BoidsSpec) -> SnapshotDataset:
    rng = np.random.default_rng(spec.seed)
    X, V = _boids_init(spec, rng)
    total = spec.frames + spec.forecast_frames
    h = spec.dt / spec.sim_substeps
    snaps, vels = [X.copy()], [V.copy()]
    for _ in range(1, total):
        for _ in range(spec.sim_substeps):
            X, V = boids_step(spec, X, V, h)
        snaps.append(X.copy())
        vels.append(V.copy())
    meta = {"generator": "boids", "spec": asdict(spec)}
    return SnapshotDataset(2, spec.dt * np.arange(total), snaps, vels, True, spec.frames, meta)


# --- initial velocities -------------------------------------------------------------------------

V0_MODES = ("provided", "zero", "paired-finite-difference")


def estimate_v0(dataset: SnapshotDataset, mode: str = "provided") -> np.ndarray:
    X0 = dataset.snapshots[0]
    if mode == "zero":
        return np.zeros_like(X0)
    if mode == "provided":
        v = dataset.velocity(0)
        if v is None:
            raise DatasetError("v0 mode 'provided' needs stored velocities at the first time")
        return np.array(v, dtype=float)
    if mode == "paired-finite-difference":
        if not dataset.paired or len(dataset) < 2:
            raise DatasetError("v0 mode 'paired-finite-difference' needs paired data with at least two times")
        return (dataset.snapshots[1] - X0) / (dataset.times[1] - dataset.times[0])
    raise DatasetError(f"unknown v0 mode {mode!r}; expected one of {V0_MODES}")


# --- bundle I/O ---------------------------------------------------------------------------------


def _write_csv(path: Path, X: np.ndarray, V: np.ndarray | None):
    d = X.shape[1]
    cols = [f"x{k + 1}" for k in range(d)]
    data = X
    if V is not None:
        cols += [f"v{k + 1}" for k in range(d)]
        data = np.hstack([X, V])
    lines = [",".join(cols)]
    lines += [",".join(format(float(x), ".17g") for x in row) for row in data]
    path.write_text("\n".join(lines) + "\n", encoding="utf-8", newline="\n")


def save_dataset(path, ds: SnapshotDataset) -> Path:
    """Write ``manifest.json`` plus one CSV per snapshot into directory ``path``."""
    ds.validate()
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    entries = []
    for i, (t, X) in enumerate(zip(ds.times, ds.snapshots)):
        V = ds.velocity(i)
        name = f"snapshot_{i:04d}.csv"
        _write_csv(root / name, X, V)
        entries.append({"time": float(t), "file": name, "rows": int(X.shape[0]), "velocities": V is not None})
    manifest = {"format_version": BUNDLE_VERSION, "dim": ds.dim, "paired": ds.paired, "num_train": ds.num_train,
                "snapshots": entries, "meta": ds.meta}
    (root / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return root


def _read_csv(path: Path, dim: int, with_v: bool) -> np.ndarray:
    if not path.is_file():
        raise DatasetError(f"{path}: missing snapshot file")
    want = dim * (2 if with_v else 1)
    with open(path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        expect = [f"x{k + 1}" for k in range(dim)] + ([f"v{k + 1}" for k in range(dim)] if with_v else [])
        if header != expect:
            raise DatasetError(f"{path}:1: header {header} does not match expected {expect}")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            if not line.strip():
                continue
            parts = line.split(",")
            if len(parts) != want:
                raise DatasetError(f"{path}:{lineno}: expected {want} columns, got {len(parts)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError as exc:
                raise DatasetError(f"{path}:{lineno}: {exc}") from None
    return np.array(rows, dtype=float).reshape(-1, want)


def load_dataset(path) -> SnapshotDataset:
    root = Path(path)
    mpath = root / "manifest.json"
    if not mpath.is_file():
        raise DatasetError(f"{mpath}: missing manifest")
    try:
        manifest = json.loads(mpath.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise DatasetError(f"{mpath}:{exc.lineno}: malformed manifest ({exc.msg})") from None
    for key in ("format_version", "dim", "paired", "snapshots"):
        if key not in manifest:
            raise DatasetError(f"{mpath}: malformed manifest, missing key {key!r}")
    if manifest["format_version"] != BUNDLE_VERSION:
        raise DatasetError(f"{mpath}: unsupported format version {manifest['format_version']}")
    dim = int(manifest["dim"])
    times, snaps, vels = [], [], []
    for i, entry in enumerate(manifest["snapshots"]):
        try:
            t, fname, with_v = float(entry["time"]), entry["file"], bool(entry.get("velocities", False))
        except (KeyError, TypeError, ValueError):
            raise DatasetError(f"{mpath}: malformed snapshot entry {i}") from None
        arr = _read_csv(root / fname, dim, with_v)
        if "rows" in entry and arr.shape[0] != entry["rows"]:
            raise DatasetError(f"{root / fname}: {arr.shape[0]} rows, manifest says {entry['rows']}")
        times.append(t)
        snaps.append(arr[:, :dim])
        vels.append(arr[:, dim:] if with_v else None)
    if times and np.any(np.diff(times) <= 0):
        raise DatasetError(f"{mpath}: times must be strictly increasing, got {times}")
    has_v = any(v is not None for v in vels)
    return SnapshotDataset(dim, np.array(times), snaps, vels if has_v else None, bool(manifest["paired"]),
                           manifest.get("num_train"), manifest.get("meta", {}))


def subsample(ds: SnapshotDataset, n: int, seed: int = 0) -> SnapshotDataset:
    """Keep ``n`` particles per time (the same rows everywhere when paired)."""
    rng = np.random.default_rng(seed)
    snaps, vels = [], []
    rows = None
    for i, X in enumerate(ds.snapshots):
        if rows is None or not ds.paired:
            rows = np.sort(rng.choice(X.shape[0], size=min(n, X.shape[0]), replace=False))
        snaps.append(X[rows])
        v = ds.velocity(i)
        vels.append(None if v is None else v[rows])
    return replace(ds, snapshots=snaps, velocities=None if ds.velocities is None else vels)
