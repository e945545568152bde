"""Discretize-then-optimize training: random-horizon rollouts scored by Sinkhorn divergence.

Each epoch draws a horizon K uniformly from {1..M}, rolls the learned mechanics
out from the first snapshot for K intervals, averages the divergence to the
observed snapshots along the way and back-propagates through the whole rollout,
including the force evaluations, which are themselves energy gradients.
"""
from __future__ import annotations

import json
import logging
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .datagen import SnapshotDataset
from .divergence import DivergenceConfig, estimate_blur, sinkhorn_divergence
from .energy import (EnergyConfig, EnergyParams, NonFiniteError, conservative_accel, init_params, load_params,
                     save_params)
from .integrator import IntegratorConfig, MechState, rollout

log = logging.getLogger(__name__)

GAMMA = "gamma"


class TrainingError(RuntimeError):
    """Non-finite loss or gradient; the message names the epoch and interval."""


@dataclass
class TrainConfig:
    lr_theta: float = 1e-4
    lr_gamma: float = 1e-2
    gamma_init: float = 1.0
    gamma_learnable: bool = True
    gamma_fixed_value: float = 0.0
    epochs: int = 1000
    substeps_train: int = 1
    minibatch: int | None = None
    loss: DivergenceConfig = field(default_factory=DivergenceConfig)
    ema_decay: float = 0.999
    weight_decay: float = 0.0
    grad_clip_norm: float | None = None
    seed: int = 0
    checkpoint_rollout: bool = False

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = DivergenceConfig(**self.loss)
        for name in ("lr_theta", "lr_gamma"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be > 0")
        if not 0.0 <= self.ema_decay < 1.0:
            raise ValueError("ema_decay must lie in [0, 1)")
        if self.epochs < 0 or self.substeps_train < 1:
            raise ValueError("epochs must be >= 0 and substeps_train >= 1")
        if self.minibatch is not None and self.minibatch < 1:
            raise ValueError("minibatch must be a positive integer")
        if self.gamma_init < 0 or self.gamma_fixed_value < 0:
            raise ValueError("gamma values must be >= 0")
        if self.grad_clip_norm is not None and not self.grad_clip_norm > 0:
            raise ValueError("grad_clip_norm must be > 0")

    @property
    def gamma_start(self) -> float:
        return self.gamma_init if self.gamma_learnable else self.gamma_fixed_value


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, arrays: dict[str, np.ndarray]) -> "AdamState":
        return cls({k: np.zeros_like(a) for k, a in arrays.items()}, {k: np.zeros_like(a) for k, a in arrays.items()})


@dataclass
class TrainState:
    params: EnergyParams
    ema_params: EnergyParams
    gamma: float
    adam: AdamState
    epoch: int = 0
    blur: float = 0.0
    loss_history: list[dict] = field(default_factory=list)

    def copy(self) -> "TrainState":
        adam = AdamState({k: v.copy() for k, v in self.adam.m.items()},
                         {k: v.copy() for k, v in self.adam.v.items()}, self.adam.step)
        return TrainState(self.params.copy(), self.ema_params.copy(), self.gamma, adam, self.epoch, self.blur,
                          [dict(r) for r in self.loss_history])


# --- optimizer pieces -------------------------------------------------------------------------


def adam_update(opt: AdamState, params: dict[str, np.ndarray], grads: dict[str, np.ndarray], lr,
                weight_decay: float = 0.0, beta1: float = 0.9, beta2: float = 0.999,
                eps: float = 1e-8) -> dict[str, np.ndarray]:
    """One bias-corrected Adam step with decoupled weight decay; moments in ``opt`` are updated in place.

    ``lr`` and ``weight_decay`` may be floats or dicts keyed by parameter name.
    """
    opt.step += 1
    c1 = 1.0 - beta1 ** opt.step
    c2 = 1.0 - beta2 ** opt.step
    out = {}
    for k, p in params.items():
        g = grads.get(k)
        rate = lr[k] if isinstance(lr, dict) else lr
        wd = weight_decay.get(k, 0.0) if isinstance(weight_decay, dict) else weight_decay
        if g is None:
            out[k] = p
            continue
        if np.shape(g) != np.shape(p):
            raise ad.ShapeError(f"adam: gradient for {k} has shape {np.shape(g)}, parameter {np.shape(p)}")
        opt.m[k] = beta1 * opt.m[k] + (1 - beta1) * g
        opt.v[k] = beta2 * opt.v[k] + (1 - beta2) * g * g
        step = rate * (opt.m[k] / c1) / (np.sqrt(opt.v[k] / c2) + eps)
        out[k] = p - step - rate * wd * p
    return out


def ema_update(ema: dict[str, np.ndarray], params: dict[str, np.ndarray], decay: float) -> dict[str, np.ndarray]:
    if not 0.0 <= decay < 1.0:
        raise ValueError("decay must lie in [0, 1)")
    return {k: decay * ema[k] + (1.0 - decay) * params[k] for k in ema}


def clip_by_global_norm(grads: dict[str, np.ndarray], max_norm: float) -> tuple[dict[str, np.ndarray], float]:
    norm = float(np.sqrt(sum(float(np.sum(g * g)) for g in grads.values())))
    if norm > max_norm:
        grads = {k: g * (max_norm / norm) for k, g in grads.items()}
    return grads, norm


# --- loss ---------------------------------------------------------------------------------------


def init_state(energy_cfg: EnergyConfig, train_cfg: TrainConfig, dataset: SnapshotDataset) -> TrainState:
    params = init_params(energy_cfg, train_cfg.seed)
    arrays = dict(params.arrays)
    arrays[GAMMA] = np.array(train_cfg.gamma_start)
    blur = train_cfg.loss.blur
    blur = estimate_blur(dataset) if blur == "auto" else float(blur)
    return TrainState(params, params.copy(), float(train_cfg.gamma_start), AdamState.zeros_like(arrays), 0, blur)


def _sample_rows(rng: np.random.Generator, n: int, size: int | None) -> np.ndarray | None:
    if size is None or size >= n:
        return None
    return np.sort(rng.choice(n, size=size, replace=False))


def loss_for_horizon(state: TrainState, dataset: SnapshotDataset, v0: np.ndarray, K: int,
                     train_cfg: TrainConfig | None = None, integ_cfg: IntegratorConfig | None = None,
                     rng: np.random.Generator | None = None, model=None, gamma=None):
    """Mean divergence over the first K predicted snapshots.

    Returns ``(loss, model, gamma, per_interval)``; ``model`` and ``gamma`` are
    the tensors the loss was recorded against.
    """
    train_cfg = train_cfg or TrainConfig()
    integ_cfg = integ_cfg or IntegratorConfig()
    M = dataset.num_train - 1
    if not 1 <= K <= max(M, 0):
        raise ValueError(f"horizon K={K} outside 1..{M}")
    X0 = dataset.snapshots[0]
    if np.shape(v0) != X0.shape:
        raise ad.ShapeError(f"v0 shape {np.shape(v0)} does not match X0 {X0.shape}")
    rng = rng if rng is not None else np.random.default_rng(train_cfg.seed)
    rows = _sample_rows(rng, X0.shape[0], train_cfg.minibatch)
    if model is None:
        model = state.params.model(requires_grad=True)
    if gamma is None:
        gamma = Tensor(np.array(state.gamma), requires_grad=train_cfg.gamma_learnable)
    x0, u0 = (X0, v0) if rows is None else (X0[rows], np.asarray(v0)[rows])

    def accel(X, t):
        return conservative_accel(model, X, t, create_graph=True)

    traj = rollout(MechState(x0, u0, float(dataset.times[0])), accel, gamma, num_intervals=K,
                   substeps=train_cfg.substeps_train, scheme=integ_cfg.scheme, times=dataset.times[:K + 1],
                   checkpoint=train_cfg.checkpoint_rollout, params=model.parameters())
    terms = []
    for i in range(1, K + 1):
        target = dataset.snapshots[i]
        if train_cfg.minibatch is not None and train_cfg.minibatch < target.shape[0]:
            if dataset.paired and rows is not None:
                target = target[rows]
            else:
                target = target[_sample_rows(rng, target.shape[0], train_cfg.minibatch)]
        terms.append(sinkhorn_divergence(traj[i].X, target, train_cfg.loss, blur=state.blur))
    loss = terms[0]
    for term in terms[1:]:
        loss = loss + term
    loss = loss * (1.0 / K)
    return loss, model, gamma, [float(t.data) for t in terms]


# --- training loop ------------------------------------------------------------------------------


def _log_record(fh, record: dict):
    if fh is not None:
        fh.write(json.dumps(record, sort_keys=True) + "\n")
        fh.flush()


def train(dataset: SnapshotDataset, v0: np.ndarray, energy_cfg: EnergyConfig, train_cfg: TrainConfig,
          integ_cfg: IntegratorConfig | None = None, state: TrainState | None = None, log_path=None,
          checkpoint_path=None, checkpoint_every: int = 0, progress_every: int = 0) -> TrainState:
    """Train for ``train_cfg.epochs`` epochs in total (a resumed ``state`` continues from its epoch)."""
    integ_cfg = integ_cfg or IntegratorConfig()
    M = dataset.num_train - 1
    if M < 1:
        raise ValueError("training needs at least two training snapshots (one interval)")
    if train_cfg.minibatch is not None and train_cfg.minibatch > dataset.snapshots[0].shape[0]:
        raise ValueError("minibatch exceeds the number of particles")
    state = state if state is not None else init_state(energy_cfg, train_cfg, dataset)
    names = list(state.params.arrays)
    lrs = {k: train_cfg.lr_theta for k in names}
    lrs[GAMMA] = train_cfg.lr_gamma
    fh = open(log_path, "a", encoding="utf-8") if log_path else None
    try:
        while state.epoch < train_cfg.epochs:
            epoch = state.epoch
            # per-epoch generator so a resumed run draws exactly what an uninterrupted one would
            rng = np.random.default_rng([train_cfg.seed, epoch])
            K = int(rng.integers(1, M + 1))
            t_start = time.perf_counter()
            try:
                loss, model, gamma, terms = loss_for_horizon(state, dataset, v0, K, train_cfg, integ_cfg, rng)
            except NonFiniteError as exc:
                raise TrainingError(f"epoch {epoch}: {exc} (horizon K={K}, gamma={state.gamma:.6g})") from None
            if not np.isfinite(loss.data):
                bad = next(i for i, v in enumerate(terms) if not np.isfinite(v))
                raise TrainingError(f"epoch {epoch}: non-finite loss on interval {bad} "
                                    f"(t={dataset.times[bad]:.6g} -> {dataset.times[bad + 1]:.6g}), terms={terms}")
            wrt = model.parameters() + ([gamma] if gamma.requires_grad else [])
            gs = ad.grad(loss, wrt, allow_unused=True)
            grads = {k: g.data for k, g in zip(names, gs[:len(names)])}
            if gamma.requires_grad:
                grads[GAMMA] = gs[-1].data
            for k, g in grads.items():
                if not np.all(np.isfinite(g)):
                    raise TrainingError(f"epoch {epoch}: non-finite gradient for {k} (horizon K={K})")
            gnorm = None
            if train_cfg.grad_clip_norm is not None:
                grads, gnorm = clip_by_global_norm(grads, train_cfg.grad_clip_norm)
            current = dict(state.params.arrays)
            current[GAMMA] = np.array(state.gamma)
            new = adam_update(state.adam, current, grads, lrs, {k: train_cfg.weight_decay for k in names})
            state.gamma = max(float(new.pop(GAMMA)), 0.0) if train_cfg.gamma_learnable else state.gamma
            state.params = EnergyParams(state.params.config, state.params.seed, new)
            state.ema_params = EnergyParams(state.params.config, state.params.seed,
                                            ema_update(state.ema_params.arrays, new, train_cfg.ema_decay))
            record = {"epoch": epoch, "K": K, "loss": float(loss.data), "gamma": state.gamma,
                      "wall_time": time.perf_counter() - t_start}
            if gnorm is not None:
                record["grad_norm"] = gnorm
            state.loss_history.append(record)
            _log_record(fh, record)
            state.epoch += 1
            if progress_every and state.epoch % progress_every == 0:
                recent = [r["loss"] for r in state.loss_history[-progress_every:]]
                log.info("epoch %d loss %.5f gamma %.4g", state.epoch, float(np.mean(recent)), state.gamma)
            if checkpoint_path and checkpoint_every and state.epoch % checkpoint_every == 0:
                save_checkpoint(checkpoint_path, state, train_cfg)
    finally:
        if fh is not None:
            fh.close()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, state, train_cfg)
    return state


# --- checkpoints --------------------------------------------------------------------------------


def save_checkpoint(path, state: TrainState, train_cfg: TrainConfig | None = None) -> Path:
    extra = {"ema/" + k: v for k, v in state.ema_params.arrays.items()}
    extra.update({"adam_m/" + k: v for k, v in state.adam.m.items()})
    extra.update({"adam_v/" + k: v for k, v in state.adam.v.items()})
    extra["loss_history"] = np.array([[r["epoch"], r["K"], r["loss"], r["gamma"]] for r in state.loss_history],
                                     dtype=float).reshape(-1, 4)
    header = {"kind": "checkpoint", "gamma": state.gamma, "epoch": state.epoch, "blur": state.blur,
              "adam_step": state.adam.step}
    if train_cfg is not None:
        header["train_config"] = asdict(train_cfg)
    path = Path(path)
    tmp = path.with_suffix(path.suffix + ".tmp")
    save_params(tmp, state.params, header, extra)
    tmp.replace(path)
    return path


def load_checkpoint(path) -> TrainState:
    params, header, rest = load_params(path)
    names = list(params.arrays) + [GAMMA]
    ema = EnergyParams(params.config, params.seed, {k: rest["ema/" + k] for k in params.arrays})
    adam = AdamState({k: rest["adam_m/" + k] for k in names}, {k: rest["adam_v/" + k] for k in names},
                     int(header["adam_step"]))
    hist = [{"epoch": int(e), "K": int(k), "loss": float(l), "gamma": float(g)}
            for e, k, l, g in rest["loss_history"]]
    return TrainState(params, ema, float(header["gamma"]), adam, int(header["epoch"]), float(header["blur"]), hist)
