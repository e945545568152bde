"""Population potential energies and the accelerations they induce.

A population energy maps a whole particle cloud ``X`` (N x d) to a scalar.
Forces are per-particle gradients scaled by N, so a mean-normalized energy
yields O(1) accelerations whatever the cloud size::

    a_j = -N * grad_{x_j} Psi(X) - gamma * v_j

Two families are provided: :class:`EnergyModel`, a permutation-invariant
attention network with learnable weights, and :class:`AnalyticEnergy`, closed
form functionals used as exact references.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .archive import read_archive, write_archive
from .autodiff import Tensor


class NonFiniteError(FloatingPointError):
    """A force or energy evaluation produced NaN/inf."""


@dataclass(frozen=True)
class EnergyConfig:
    dim: int
    hidden: int = 64
    blocks: int = 4
    heads: int = 4
    ff_inner: int = 512
    time_features: int = 0
    activation: str = "silu"
    dropout: float = 0.0
    arch: str = "attention"

    def __post_init__(self):
        if self.arch not in ARCHS:
            raise ValueError(f"arch must be one of {ARCHS}")
        for name in ("dim", "hidden", "blocks", "heads", "ff_inner"):
            if getattr(self, name) < 1:
                raise ValueError(f"EnergyConfig.{name} must be >= 1")
        if self.hidden % self.heads:
            raise ValueError(f"hidden ({self.hidden}) must be divisible by heads ({self.heads})")
        if self.time_features < 0 or self.time_features % 2:
            raise ValueError("time_features must be a non-negative even number (sin/cos pairs)")
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"activation must be one of {sorted(_ACTIVATIONS)}")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")

    @property
    def head_dim(self) -> int:
        return self.hidden // self.heads


_ACTIVATIONS = {"silu": ad.silu, "tanh": ad.tanh}
# attention: the full set model; mlp: per-particle MLP plus a Gaussian pair term with learnable
# amplitude; linear: per-particle w.x + q.x^2 (linear in its parameters)
ARCHS = ("attention", "mlp", "linear")


def param_shapes(cfg: EnergyConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes for a config."""
    H, F = cfg.hidden, cfg.ff_inner
    d_in = cfg.dim + cfg.time_features
    if cfg.arch == "linear":
        return {"lin.w": (d_in,), "lin.q": (d_in,)}
    if cfg.arch == "mlp":
        return {"mlp.w1": (d_in, H), "mlp.b1": (H,), "mlp.w2": (H,), "mlp.b2": (), "pair.amp": ()}
    shapes = {"embed.w": (cfg.dim + cfg.time_features, H), "embed.b": (H,)}
    for k in range(cfg.blocks):
        p = f"block{k}."
        shapes.update({
            p + "ln1.g": (H,), p + "ln1.b": (H,),
            p + "attn.q": (H, H), p + "attn.k": (H, H), p + "attn.v": (H, H),
            p + "attn.o": (H, H), p + "attn.ob": (H,),
            p + "ln2.g": (H,), p + "ln2.b": (H,),
            p + "ff.w1": (H, F), p + "ff.b1": (F,),
            p + "ff.w2": (F, H), p + "ff.b2": (H,),
        })
    shapes.update({"final.g": (H,), "final.b": (H,), "head.w": (H,), "head.b": ()})
    return shapes


@dataclass
class EnergyParams:
    config: EnergyConfig
    seed: int
    arrays: dict[str, np.ndarray] = field(repr=False)

    def copy(self) -> "EnergyParams":
        return EnergyParams(self.config, self.seed, {k: v.copy() for k, v in self.arrays.items()})

    def flat(self) -> np.ndarray:
        return np.concatenate([v.reshape(-1) for v in self.arrays.values()])

    def num_params(self) -> int:
        return sum(v.size for v in self.arrays.values())

    def model(self, requires_grad: bool = False) -> "EnergyModel":
        return EnergyModel(self.config, {k: Tensor(v.copy(), requires_grad) for k, v in self.arrays.items()})


def init_params(config: EnergyConfig, seed: int = 0) -> EnergyParams:
    """Fan-in scaled uniform init; norm gains 1, norm biases and head bias 0."""
    rng = np.random.default_rng(seed)
    H, F = config.hidden, config.ff_inner
    d_in = config.dim + config.time_features
    bias_fan_in = {"embed.b": d_in, "attn.ob": H, "ff.b1": H, "ff.b2": F, "mlp.b1": d_in, "mlp.w2": H,
                   "lin.w": d_in, "lin.q": d_in, "pair.amp": 1}
    arrays = {}
    for name, shape in param_shapes(config).items():
        tail = name.split(".", 1)[1] if name.startswith("block") else name
        if tail.endswith(("ln1.g", "ln2.g")) or tail == "final.g":
            arrays[name] = np.ones(shape)
        elif tail.endswith(("ln1.b", "ln2.b")) or tail in ("final.b", "head.b", "mlp.b2"):
            arrays[name] = np.zeros(shape)
        else:
            fan_in = shape[0] if len(shape) == 2 else bias_fan_in.get(tail, H)
            bound = 1.0 / math.sqrt(fan_in)
            arrays[name] = rng.uniform(-bound, bound, shape)
    return EnergyParams(config, int(seed), arrays)


def time_features(t: float, count: int) -> np.ndarray:
    """Sinusoidal features sin/cos(2*pi*f_k*t) with f_k = 2**k."""
    freqs = 2.0 ** np.arange(count // 2)
    ang = 2.0 * np.pi * freqs * float(t)
    return np.concatenate([np.sin(ang), np.cos(ang)])


def save_params(path, params: EnergyParams, extra_header: dict | None = None,
                extra_arrays: dict[str, np.ndarray] | None = None) -> None:
    header = {"kind": "energy", "config": asdict(params.config), "seed": params.seed}
    header.update(extra_header or {})
    arrays = {f"params/{k}": v for k, v in params.arrays.items()}
    arrays.update(extra_arrays or {})
    write_archive(path, header, arrays)


def load_params(path) -> tuple[EnergyParams, dict, dict[str, np.ndarray]]:
    """Returns (params, header, remaining arrays)."""
    header, arrays = read_archive(path)
    cfg = EnergyConfig(**header["config"])
    names = list(param_shapes(cfg))
    params = EnergyParams(cfg, int(header["seed"]), {k: arrays.pop(f"params/{k}") for k in names})
    return params, header, arrays


# ---------------------------------------------------------------------------
# energies
# ---------------------------------------------------------------------------

class EnergyModel:
    """Learnable energy bound to a set of parameter tensors.

    The default architecture is a per-particle linear embedding, ``blocks``
    pre-norm residual blocks of multi-head self-attention and feed-forward,
    mean-pool, linear head.  ``mlp`` and ``linear`` are small stand-ins for tests.
    """

    def __init__(self, config: EnergyConfig, tensors: dict[str, Tensor]):
        self.config = config
        self.tensors = tensors
        self.dropout_rng: np.random.Generator | None = None

    def parameters(self) -> list[Tensor]:
        return list(self.tensors.values())

    def to_params(self, seed: int = 0) -> EnergyParams:
        return EnergyParams(self.config, seed, {k: v.data.copy() for k, v in self.tensors.items()})

    def energy(self, X, t: float | None = None) -> Tensor:
        cfg, P = self.config, self.tensors
        X = ad.constant(X)
        if X.ndim != 2 or X.shape[1] != cfg.dim:
            raise ad.ShapeError(f"energy: expected N x {cfg.dim} particles, got {X.shape}")
        N = X.shape[0]
        act = _ACTIVATIONS[cfg.activation]
        inp = X
        if cfg.time_features:
            if t is None:
                raise ValueError("this energy uses time features; pass t")
            feats = np.broadcast_to(time_features(t, cfg.time_features), (N, cfg.time_features))
            inp = ad.concat([X, Tensor(feats)], axis=1)
        if cfg.arch == "linear":
            return ad.mean(inp @ ad.reshape(P["lin.w"], (-1, 1)) + (inp * inp) @ ad.reshape(P["lin.q"], (-1, 1)))
        if cfg.arch == "mlp":
            u = act(inp @ P["mlp.w1"] + P["mlp.b1"]) @ ad.reshape(P["mlp.w2"], (-1, 1))
            full = (N, N, cfg.dim)
            diff = ad.broadcast_to(ad.reshape(X, (N, 1, cfg.dim)), full) - ad.broadcast_to(X, full)
            kern = ad.exp(ad.sum_(diff * diff, axis=2) * -0.5)
            return ad.mean(u) + P["mlp.b2"] + ad.mean(kern) * P["pair.amp"]
        h = inp @ P["embed.w"] + P["embed.b"]
        nh, dh = cfg.heads, cfg.head_dim
        scale = 1.0 / math.sqrt(dh)
        for k in range(cfg.blocks):
            p = f"block{k}."
            z = ad.layer_norm(h, P[p + "ln1.g"], P[p + "ln1.b"])
            q = ad.transpose(ad.reshape(z @ P[p + "attn.q"], (N, nh, dh)), (1, 0, 2))
            kk = ad.transpose(ad.reshape(z @ P[p + "attn.k"], (N, nh, dh)), (1, 2, 0))
            v = ad.transpose(ad.reshape(z @ P[p + "attn.v"], (N, nh, dh)), (1, 0, 2))
            att = ad.softmax(ad.matmul(q, kk) * scale, axis=-1)
            o = ad.reshape(ad.transpose(ad.matmul(att, v), (1, 0, 2)), (N, cfg.hidden))
            h = h + (o @ P[p + "attn.o"] + P[p + "attn.ob"])
            z = ad.layer_norm(h, P[p + "ln2.g"], P[p + "ln2.b"])
            u = act(z @ P[p + "ff.w1"] + P[p + "ff.b1"])
            if cfg.dropout > 0 and self.dropout_rng is not None:
                keep = (self.dropout_rng.random(u.shape) >= cfg.dropout) / (1.0 - cfg.dropout)
                u = u * Tensor(keep)
            h = h + (u @ P[p + "ff.w2"] + P[p + "ff.b2"])
        pooled = ad.layer_norm(ad.mean(h, axis=0), P["final.g"], P["final.b"])
        return ad.sum_(pooled * P["head.w"]) + P["head.b"]


class AnalyticEnergy:
    """Closed-form population energies (mean-normalized).

    ``kind``:
      * ``"expectation"`` -- Psi = mean_i U(x_i), with ``potential`` one of
        ``"harmonic"`` (U = omega^2 |x|^2 / 2), ``"quadratic"`` (U = c |x|^2),
        ``"constant"`` (U = c).
      * ``"pairwise"`` -- Psi = 1/(2 N^2) sum_ij k(x_i, x_j) with Gaussian
        kernel k = amp * exp(-|x - y|^2 / ell^2).
      * ``"neg_sq_force"`` -- Psi = -1/2 mean_i |grad V(x_i)|^2 for V = c |x|^2,
        the inverted energy of the gradient flow of V.
    """

    def __init__(self, kind: str, potential: str = "harmonic", omega: float = 1.0, c: float = 5.0,
                 amp: float = 1.0, ell: float = 1.0):
        if kind not in ("expectation", "pairwise", "neg_sq_force"):
            raise ValueError(f"unknown analytic energy kind {kind!r}")
        if kind == "expectation" and potential not in ("harmonic", "quadratic", "constant"):
            raise ValueError(f"unknown potential {potential!r}")
        self.kind, self.potential = kind, potential
        self.omega, self.c, self.amp, self.ell = float(omega), float(c), float(amp), float(ell)

    def __repr__(self):
        return f"AnalyticEnergy(kind={self.kind!r}, potential={self.potential!r})"

    # state-space potential of the expectation kind
    def _U(self, sq):
        if self.potential == "harmonic":
            return sq * (0.5 * self.omega ** 2)
        if self.potential == "quadratic":
            return sq * self.c
        return sq * 0.0 + self.c

    def _gradU(self, X: np.ndarray) -> np.ndarray:
        if self.potential == "harmonic":
            return self.omega ** 2 * X
        if self.potential == "quadratic":
            return 2.0 * self.c * X
        return np.zeros_like(X)

    def energy(self, X, t: float | None = None) -> Tensor:
        X = ad.constant(X)
        N = X.shape[0]
        if self.kind == "expectation":
            return ad.mean(self._U(ad.sum_(X * X, axis=1)))
        if self.kind == "neg_sq_force":
            return ad.mean(ad.sum_(X * X, axis=1)) * (-2.0 * self.c ** 2)
        d = X.shape[1]
        xb = ad.broadcast_to(ad.reshape(X, (N, 1, d)), (N, N, d))
        yb = ad.broadcast_to(ad.reshape(X, (1, N, d)), (N, N, d))
        diff = xb - yb
        k = ad.exp(ad.sum_(diff * diff, axis=2) * (-1.0 / self.ell ** 2)) * self.amp
        return ad.sum_(k) * (0.5 / N ** 2)

    def first_variation_grad(self, X: np.ndarray, at: np.ndarray | None = None) -> np.ndarray:
        """Spatial gradient of the functional derivative at the empirical measure of X.

        Evaluated at the points ``at`` (default: X itself).
        """
        X = np.asarray(X, dtype=np.float64)
        at = X if at is None else np.asarray(at, dtype=np.float64)
        if self.kind == "expectation":
            return self._gradU(at)
        if self.kind == "neg_sq_force":
            # delta U / delta rho = -|grad V|^2 / 2 = -2 c^2 |x|^2
            return -4.0 * self.c ** 2 * at
        diff = at[:, None, :] - X[None, :, :]
        k = self.amp * np.exp(-(diff ** 2).sum(axis=2) / self.ell ** 2)
        return (k[:, :, None] * diff).sum(axis=1) * (-2.0 / self.ell ** 2) / len(X)

    def force(self, X: np.ndarray, t: float | None = None) -> np.ndarray:
        """Conservative acceleration -grad(delta U / delta rho)(x_j) in closed form."""
        return -self.first_variation_grad(X)


def energy(model, X, t: float | None = None) -> Tensor:
    return model.energy(X, t)


def conservative_accel(model, X, t: float | None = None, create_graph: bool = False) -> Tensor:
    """-N * grad_X Psi(X) as a tensor (recorded when ``create_graph``)."""
    X = ad.constant(X)
    if not create_graph and hasattr(model, "force"):
        return Tensor(model.force(X.data, t))
    if X.requires_grad and create_graph:
        Xg = X
    else:
        Xg = Tensor(X.data, requires_grad=True)
    with ad.enable_grad():
        psi = model.energy(Xg, t)
        if not psi.requires_grad:
            return Tensor(np.zeros_like(X.data))
        (g,) = ad.grad(psi, [Xg], create_graph=create_graph, allow_unused=True)
    a = g * (-float(X.shape[0]))
    bad = ~np.isfinite(a.data)
    if bad.any():
        idx = int(np.argwhere(bad.any(axis=1))[0, 0])
        raise NonFiniteError(f"non-finite energy gradient at particle {idx}")
    return a


def acceleration(model, X, V, gamma=0.0, t: float | None = None, create_graph: bool = False) -> Tensor:
    """a = -N grad Psi(X) - gamma V."""
    X, V = ad.constant(X), ad.constant(V)
    if X.shape != V.shape:
        raise ad.ShapeError(f"acceleration: X {X.shape} and V {V.shape} differ")
    g = ad.constant(gamma)
    if np.any(g.data < 0):
        raise ValueError("gamma must be >= 0")
    return conservative_accel(model, X, t, create_graph) - V * g


@dataclass
class FunctionalDerivativeReport:
    max_rel_err: float
    autodiff_grad: np.ndarray
    closed_form: np.ndarray


def functional_derivative_check(analytic: AnalyticEnergy, X) -> FunctionalDerivativeReport:
    """Compare grad_{x_j} Psi against (1/N) grad (dU/drho)(x_j) for every particle.

    The error is normwise: max absolute deviation over the largest reference
    component.
    """
    X = np.asarray(X, dtype=np.float64)
    Xg = Tensor(X, requires_grad=True)
    with ad.enable_grad():
        (g,) = ad.grad(analytic.energy(Xg), [Xg], allow_unused=True)
    ref = analytic.first_variation_grad(X) / len(X)
    scale = float(np.abs(ref).max()) if ref.size else 0.0
    err = float(np.abs(g.data - ref).max()) if ref.size else 0.0
    rel = err / scale if scale > 0 else err
    return FunctionalDerivativeReport(rel, g.data, ref)
