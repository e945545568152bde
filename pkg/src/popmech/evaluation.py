"""Forecast and leave-one-out interpolation protocols, scored with W1, plus report files."""
from __future__ import annotations

import csv
import io
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy.stats import gaussian_kde

from . import autodiff as ad
from . import kernels
from .datagen import DatasetError, SnapshotDataset
from .divergence import EXACT_W1_CAP, cost_matrix, entropic_plan, exact_w1
from .energy import NonFiniteError, conservative_accel
from .integrator import IntegratorConfig, MechState, rollout

V_MODES = ("provided", "zero", "carried")
FORMATS = ("csv", "json", "svg")


@dataclass
class EvalReport:
    protocol: str
    times: list[float]
    labels: list[str]
    w1: list[float]
    exact: list[bool]
    v_mode: str | None = None
    divergence_nonconverged: bool = False
    meta: dict = field(default_factory=dict)
    predicted: list[np.ndarray] = field(default_factory=list, repr=False)
    observed: list[np.ndarray] = field(default_factory=list, repr=False)

    @property
    def approximate_w1(self) -> bool:
        return not all(self.exact)

    def mean(self, label: str) -> float:
        vals = [w for w, l in zip(self.w1, self.labels) if l == label]
        return float(np.mean(vals)) if vals else float("nan")

    def summary(self) -> dict:
        out = {lab: self.mean(lab) for lab in dict.fromkeys(self.labels)}
        return out

    def to_dict(self) -> dict:
        return {
            "protocol": self.protocol,
            "v_mode": self.v_mode,
            "entries": [{"time": t, "label": l, "w1": w, "exact": e}
                        for t, l, w, e in zip(self.times, self.labels, self.w1, self.exact)],
            "means": self.summary(),
            "flags": {"approximate_w1": self.approximate_w1, "divergence_nonconverged": self.divergence_nonconverged},
            "meta": self.meta,
        }


def score_w1(pred: np.ndarray, obs: np.ndarray, cap: int = EXACT_W1_CAP) -> tuple[float, bool]:
    """W1 between two clouds; exact assignment when sizes match and fit under ``cap``."""
    pred, obs = np.asarray(pred, dtype=float), np.asarray(obs, dtype=float)
    if pred.shape == obs.shape:
        rep = exact_w1(pred, obs, cap=cap, return_report=True)
        return rep.value, rep.exact
    pts = np.concatenate([pred, obs])
    blur = max(1e-3 * float(np.linalg.norm(pts.max(0) - pts.min(0))), 1e-12)
    plan, _ = entropic_plan(pred, obs, blur, p=1)
    return float((plan * cost_matrix(pred, obs, 1)).sum()), False


def accel_fn(model):
    """Conservative acceleration callable for an energy model (no graph recorded)."""
    def accel(X, t):
        with ad.no_grad():
            return conservative_accel(model, X, t)
    return accel


def _resample(X0: np.ndarray, v0: np.ndarray, n: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Draw ``n`` starts from a Gaussian KDE of X0; each borrows its nearest original particle's velocity."""
    kde = gaussian_kde(X0.T)
    pts = kde.resample(n, seed=np.random.default_rng(seed)).T
    nearest = np.argmin(cost_matrix(pts, X0, 2), axis=1)
    return pts, v0[nearest]


def forecast_eval(model, dataset_train: SnapshotDataset, dataset_test: SnapshotDataset | None, v0,
                  integ_cfg: IntegratorConfig | None = None, gamma: float = 0.0, resample: int | None = None,
                  seed: int = 0) -> EvalReport:
    """One rollout from the first training snapshot through every later time.

    The first snapshot is the initial condition, so it gets no entry.
    """
    integ_cfg = integ_cfg or IntegratorConfig(substeps=5)
    times = list(dataset_train.times)
    snaps = list(dataset_train.snapshots)
    labels = ["train"] * len(times)
    if dataset_test is not None:
        if dataset_test.times[0] <= times[-1]:
            raise DatasetError("test times must come after the training times")
        times += list(dataset_test.times)
        snaps += list(dataset_test.snapshots)
        labels += ["test"] * len(dataset_test)
    X0, v0 = snaps[0], np.asarray(v0, dtype=float)
    if resample:
        X0, v0 = _resample(X0, v0, resample, seed)
    try:
        traj = rollout(MechState(X0, v0, times[0]), accel_fn(model), gamma, num_intervals=len(times) - 1,
                       substeps=integ_cfg.substeps, scheme=integ_cfg.scheme, times=times)
    except NonFiniteError as exc:
        raise NonFiniteError(f"forecast rollout from t={times[0]:.6g}: {exc}") from None
    rep = EvalReport("forecast", [], [], [], [], meta={"gamma": float(gamma), "substeps": integ_cfg.substeps,
                                                       "scheme": integ_cfg.scheme, "resample": resample})
    for i in range(1, len(times)):
        pred = traj[i].X.data
        w, exact = score_w1(pred, snaps[i])
        rep.times.append(float(times[i]))
        rep.labels.append(labels[i])
        rep.w1.append(w)
        rep.exact.append(exact)
        rep.predicted.append(pred)
        rep.observed.append(snaps[i])
    return rep


def carry_velocities(X_roll: np.ndarray, V_roll: np.ndarray, X_obs: np.ndarray) -> np.ndarray:
    """Give each observed particle the velocity of the rolled particle it is optimally matched to."""
    if X_roll.shape != X_obs.shape:
        raise DatasetError("carried velocities need equal particle counts")
    col = kernels.assignment(cost_matrix(X_obs, X_roll, 2))
    return V_roll[col]


def interpolate_eval(model, dataset: SnapshotDataset, h: int, v_mode: str = "carried",
                     integ_cfg: IntegratorConfig | None = None, gamma: float = 0.0, v0=None) -> EvalReport:
    """Roll one interval from the observed snapshot before ``h`` and score the held-out snapshot ``h``."""
    integ_cfg = integ_cfg or IntegratorConfig(substeps=5)
    M = len(dataset) - 1
    if not 0 < h < M:
        raise ValueError(f"held-out index must be interior (0 < h < {M}), got {h}")
    if v_mode not in V_MODES:
        raise ValueError(f"unknown v_mode {v_mode!r}; expected one of {V_MODES}")
    X_prev = dataset.snapshots[h - 1]
    accel = accel_fn(model)
    if v_mode == "provided":
        V = dataset.velocity(h - 1)
        if V is None:
            raise DatasetError(f"v_mode 'provided' needs stored velocities at time index {h - 1}")
    elif v_mode == "zero":
        V = np.zeros_like(X_prev)
    else:
        if v0 is None:
            raise DatasetError("v_mode 'carried' needs the initial velocities v0")
        if h - 1 == 0:
            V = np.asarray(v0, dtype=float)
        else:
            times = dataset.times[:h]
            traj = rollout(MechState(dataset.snapshots[0], v0, times[0]), accel, gamma, num_intervals=h - 1,
                           substeps=integ_cfg.substeps, scheme=integ_cfg.scheme, times=times)
            V = carry_velocities(traj[-1].X.data, traj[-1].V.data, X_prev)
    t0, t1 = float(dataset.times[h - 1]), float(dataset.times[h])
    try:
        traj = rollout(MechState(X_prev, V, t0), accel, gamma, num_intervals=1, substeps=integ_cfg.substeps,
                       scheme=integ_cfg.scheme, times=[t0, t1])
    except NonFiniteError as exc:
        raise NonFiniteError(f"interpolation rollout {t0:.6g} -> {t1:.6g}: {exc}") from None
    pred = traj[-1].X.data
    w, exact = score_w1(pred, dataset.snapshots[h])
    return EvalReport("interpolate", [t1], ["heldout"], [w], [exact], v_mode,
                      meta={"heldout_index": h, "gamma": float(gamma), "substeps": integ_cfg.substeps},
                      predicted=[pred], observed=[dataset.snapshots[h]])


# --- aggregation and files ----------------------------------------------------------------------


def aggregate_reports(reports: Sequence[EvalReport]) -> dict:
    """Per label: mean over times then over seeds (with standard error), and the pooled per-time mean."""
    out = {}
    labels = dict.fromkeys(l for r in reports for l in r.labels)
    for lab in labels:
        per_seed = [r.mean(lab) for r in reports if lab in r.labels]
        pooled = [w for r in reports for w, l in zip(r.w1, r.labels) if l == lab]
        n = len(per_seed)
        se = float(np.std(per_seed, ddof=1) / np.sqrt(n)) if n > 1 else 0.0
        out[lab] = {"mean_of_means": float(np.mean(per_seed)), "stderr": se, "pooled_mean": float(np.mean(pooled)),
                    "num_seeds": n}
    return out


def _csv_text(report: EvalReport) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["time", "label", "w1", "exact"])
    for t, l, v, e in zip(report.times, report.labels, report.w1, report.exact):
        w.writerow([repr(float(t)), l, repr(float(v)), int(e)])
    return buf.getvalue()


def read_report_csv(path) -> list[dict]:
    with open(path, encoding="utf-8", newline="") as fh:
        return [{"time": float(r["time"]), "label": r["label"], "w1": float(r["w1"]), "exact": bool(int(r["exact"]))}
                for r in csv.DictReader(fh)]


def _svg(pred: np.ndarray, obs: np.ndarray, title: str, size: int = 360) -> str:
    pts = np.concatenate([pred[:, :2], obs[:, :2]]) if len(pred) + len(obs) else np.zeros((1, 2))
    lo, hi = pts.min(axis=0), pts.max(axis=0)
    span = float(max((hi - lo).max(), 1e-12))
    pad = 16

    def xy(p):
        s = (size - 2 * pad) / span
        return pad + (p[0] - lo[0]) * s, size - pad - (p[1] - lo[1]) * s

    lines = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size}" viewBox="0 0 {size} {size}">',
             f"<title>{title}</title>", '<rect width="100%" height="100%" fill="white"/>']
    for cls, cloud, color in (("observed", obs, "#888888"), ("predicted", pred, "#6a3d9a")):
        for p in cloud:
            x, y = xy(p)
            lines.append(f'<circle class="{cls}" cx="{x:.2f}" cy="{y:.2f}" r="1.6" fill="{color}" fill-opacity="0.6"/>')
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def report_emit(report: EvalReport, path, formats: Sequence[str] = ("csv", "json"), label: str = "summary") -> list[Path]:
    """Write ``{protocol}_{label}.csv/.json`` and one ``{protocol}_t{time}.svg`` per time."""
    bad = set(formats) - set(FORMATS)
    if bad:
        raise ValueError(f"unknown report formats {sorted(bad)}")
    root = Path(path)
    written = []
    try:
        root.mkdir(parents=True, exist_ok=True)
        if "csv" in formats:
            p = root / f"{report.protocol}_{label}.csv"
            p.write_text(_csv_text(report), encoding="utf-8", newline="\n")
            written.append(p)
        if "json" in formats:
            p = root / f"{report.protocol}_{label}.json"
            p.write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
            written.append(p)
        if "svg" in formats:
            for t, pred, obs in zip(report.times, report.predicted, report.observed):
                p = root / f"{report.protocol}_t{t:.6g}.svg"
                p.write_text(_svg(pred, obs, f"{report.protocol} t={t:.6g}"), encoding="utf-8")
                written.append(p)
    except OSError as exc:
        raise OSError(f"{root}: cannot write report ({exc.strerror or exc})") from exc
    return written
