"""Damped second-order time stepping: dX/dt = V, dV/dt = a(X) - gamma V.

``accel`` callables take ``(X, t)`` and return the conservative acceleration
only; friction is applied here, exactly, as an exponential velocity factor.
States hold either arrays or recorded tensors, so a rollout is differentiable
whenever ``accel`` builds a graph.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .energy import NonFiniteError

SCHEMES = ("damped-velocity-verlet", "semi-implicit-euler")

AccelFn = Callable[[Tensor, float], Tensor]


@dataclass(frozen=True)
class IntegratorConfig:
    scheme: str = "damped-velocity-verlet"
    dt: float = 0.1
    substeps: int = 1

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown scheme {self.scheme!r}; expected one of {SCHEMES}")
        if not self.dt > 0:
            raise ValueError(f"dt must be > 0, got {self.dt}")
        if int(self.substeps) != self.substeps or self.substeps < 1:
            raise ValueError(f"substeps must be a positive integer, got {self.substeps}")


@dataclass
class MechState:
    X: Tensor
    V: Tensor
    t: float = 0.0

    def __post_init__(self):
        self.X = ad.constant(self.X)
        self.V = ad.constant(self.V)
        if self.X.shape != self.V.shape:
            raise ad.ShapeError(f"MechState: X {self.X.shape} and V {self.V.shape} differ")

    def numpy(self) -> tuple[np.ndarray, np.ndarray]:
        return self.X.data.copy(), self.V.data.copy()


def _damping(gamma, h: float):
    """exp(-gamma * h) as a float or a recorded scalar tensor."""
    if isinstance(gamma, Tensor):
        return ad.exp(gamma * (-h))
    return float(np.exp(-float(gamma) * h))


def _check_gamma(gamma):
    g = gamma.data if isinstance(gamma, Tensor) else gamma
    if np.any(np.asarray(g) < 0):
        raise ValueError(f"gamma must be >= 0, got {g}")


def _check_finite(state: MechState, where: str):
    if not (np.isfinite(state.X.data).all() and np.isfinite(state.V.data).all()):
        raise NonFiniteError(f"non-finite state at {where}")


def step(state: MechState, accel: AccelFn, gamma=0.0, dt: float = 0.1, cached_a: Tensor | None = None,
         scheme: str = "damped-velocity-verlet", index: int = 0) -> tuple[MechState, Tensor | None]:
    """Advance one step; returns the new state and the acceleration to reuse next step."""
    if scheme not in SCHEMES:
        raise ValueError(f"unknown scheme {scheme!r}")
    _check_gamma(gamma)
    X, V, t = state.X, state.V, state.t
    if scheme == "semi-implicit-euler":
        a = accel(X, t)
        V = (V + a * dt) * _damping(gamma, dt)
        X = X + V * dt
        new, a_next = MechState(X, V, t + dt), None
    else:
        a = cached_a if cached_a is not None else accel(X, t)
        half = _damping(gamma, 0.5 * dt)
        V = V * half + a * (0.5 * dt)
        X = X + V * dt
        a_next = accel(X, t + dt)
        V = (V + a_next * (0.5 * dt)) * half
        new = MechState(X, V, t + dt)
    _check_finite(new, f"step {index}")
    return new, a_next


def _interval(state, accel, gamma, length, substeps, scheme, cached_a, base_index):
    h = length / substeps
    for s in range(substeps):
        state, cached_a = step(state, accel, gamma, h, cached_a, scheme, index=base_index + s)
    return state, cached_a


def rollout(state0: MechState, accel: AccelFn, gamma=0.0, dt: float = 0.1, num_intervals: int = 1,
            substeps: int = 1, scheme: str = "damped-velocity-verlet", times: Sequence[float] | None = None,
            checkpoint: bool = False, params: Sequence[Tensor] = ()) -> list[MechState]:
    """States at every interval boundary (``num_intervals + 1`` of them).

    Intervals have length ``dt`` unless ``times`` (length ``num_intervals + 1``)
    is given.  With ``checkpoint`` each interval is recomputed during backward
    instead of being stored; ``params`` must then list every tensor ``accel``
    depends on (gamma is added automatically), and only first-order gradients
    are available.
    """
    IntegratorConfig(scheme, dt if times is None else 1.0, substeps)
    if num_intervals < 0:
        raise ValueError("num_intervals must be >= 0")
    if times is not None:
        times = np.asarray(times, dtype=float)
        if len(times) != num_intervals + 1:
            raise ValueError(f"times has {len(times)} entries, expected {num_intervals + 1}")
        lengths = np.diff(times)
        if np.any(lengths <= 0):
            raise ValueError("times must be strictly increasing")
    else:
        lengths = np.full(num_intervals, float(dt))
    _check_gamma(gamma)
    traj = [state0]
    state, cached = state0, None
    for k, length in enumerate(lengths):
        try:
            if checkpoint:
                state, cached = _checkpointed_interval(state, accel, gamma, float(length), substeps, scheme,
                                                       cached, params, k * substeps)
            else:
                state, cached = _interval(state, accel, gamma, float(length), substeps, scheme, cached, k * substeps)
        except NonFiniteError as exc:
            raise NonFiniteError(f"interval {k}: {exc}") from None
        traj.append(state)
    return traj


def _checkpointed_interval(state, accel, gamma, length, substeps, scheme, cached, params, base_index):
    t0 = state.t
    extra = [gamma] if isinstance(gamma, Tensor) else []
    has_a = cached is not None

    def seg(X, V, *rest):
        a = rest[0] if has_a else None
        s, a_next = _interval(MechState(X, V, t0), accel, gamma, length, substeps, scheme, a, base_index)
        outs = [s.X, s.V]
        if a_next is not None:
            outs.append(a_next)
        return outs

    inputs = [state.X, state.V] + ([cached] if has_a else [])
    outs = ad.checkpoint(seg, inputs, list(params) + extra)
    a_next = outs[2] if len(outs) > 2 else None
    return MechState(outs[0], outs[1], t0 + length), a_next


@dataclass
class DiagnosticsReport:
    times: np.ndarray
    kinetic: np.ndarray
    potential: np.ndarray | None
    total: np.ndarray | None
    max_abs_drift: float | None = None
    max_rel_drift: float | None = None
    notes: list[str] = field(default_factory=list)


def diagnostics(trajectory: Sequence[MechState], analytic=None) -> DiagnosticsReport:
    """Kinetic (1/2 mean |v|^2), potential (Psi) and total energy at each stored state."""
    if len(trajectory) == 0:
        raise ValueError("diagnostics: empty trajectory")
    times = np.array([s.t for s in trajectory], dtype=float)
    kin = np.array([0.5 * np.mean(np.sum(s.V.data ** 2, axis=1)) for s in trajectory])
    if analytic is None:
        return DiagnosticsReport(times, kin, None, None, notes=["no potential supplied"])
    with ad.no_grad():
        pot = np.array([float(analytic.energy(s.X.data, s.t).data) for s in trajectory])
    tot = kin + pot
    drift = np.abs(tot - tot[0])
    rel = float(drift.max() / abs(tot[0])) if tot[0] != 0 else float("inf") if drift.max() > 0 else 0.0
    return DiagnosticsReport(times, kin, pot, tot, float(drift.max()), rel)
