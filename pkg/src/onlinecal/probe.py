"""Online-adaptive confidence probe.

The probe scores a step embedding with ``sigmoid(w . view_Q(phi) + b)`` and then
takes one gradient step on the Brier loss ``(sigmoid(w . view_K(phi) + b) - c)^2``.
Scoring always uses the weights accumulated through the previous step.

Three variants are supported: ``no_qk`` (identity views), ``qk`` (separate
learned projections for scoring and updating) and ``shared_qk`` (one
projection serving both views).
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field, replace
from typing import Optional, Tuple

import numpy as np

from .errors import ContractError, NumericError


class Variant(str, enum.Enum):
    NO_QK = "no_qk"
    QK = "qk"
    SHARED_QK = "shared_qk"


@dataclass(frozen=True)
class ProbeConfig:
    variant: Variant
    embed_dim: int
    proj_dim: Optional[int] = None
    smoothing_window: int = 10
    inner_lr_learnable: bool = False

    def __post_init__(self) -> None:
        object.__setattr__(self, "variant", Variant(self.variant))
        if self.embed_dim < 1:
            raise ContractError("embed_dim must be positive")
        if self.smoothing_window < 1:
            raise ContractError("smoothing_window must be >= 1")
        if self.variant is Variant.NO_QK:
            if self.proj_dim is not None:
                raise ContractError("no_qk probes take no proj_dim")
        elif self.proj_dim is None or self.proj_dim < 1:
            raise ContractError(f"{self.variant.value} probes need a positive proj_dim")

    @property
    def weight_dim(self) -> int:
        return self.embed_dim if self.variant is Variant.NO_QK else self.proj_dim


@dataclass
class SlowWeights:
    """Outer-loop parameters. ``theta_q``/``theta_k`` are ``None`` for identity.

    For shared_qk, ``theta_k`` is the very same array object as ``theta_q``.
    """

    w0: np.ndarray
    b0: float
    theta_q: Optional[np.ndarray] = None
    theta_k: Optional[np.ndarray] = None
    eta: float = 0.01

    def __post_init__(self) -> None:
        self.w0 = np.asarray(self.w0, dtype=np.float64)
        self.b0 = float(self.b0)
        self.eta = float(self.eta)
        if self.eta < 0 or not math.isfinite(self.eta):
            raise ContractError(f"eta must be a finite non-negative rate, got {self.eta}")
        if not np.all(np.isfinite(self.w0)) or not math.isfinite(self.b0):
            raise ContractError("slow weights must be finite")

    def copy(self) -> "SlowWeights":
        tq = None if self.theta_q is None else self.theta_q.copy()
        if self.theta_k is None:
            tk = None
        elif self.theta_k is self.theta_q:
            tk = tq
        else:
            tk = self.theta_k.copy()
        return SlowWeights(self.w0.copy(), self.b0, tq, tk, self.eta)

    @property
    def shared(self) -> bool:
        return self.theta_q is not None and self.theta_k is self.theta_q

    def check(self, cfg: ProbeConfig) -> None:
        if self.w0.shape != (cfg.weight_dim,):
            raise ContractError(f"w0 has shape {self.w0.shape}, expected ({cfg.weight_dim},)")
        if cfg.variant is Variant.NO_QK:
            if self.theta_q is not None or self.theta_k is not None:
                raise ContractError("no_qk weights must not carry projections")
            return
        shape = (cfg.proj_dim, cfg.embed_dim)
        for name, th in (("theta_q", self.theta_q), ("theta_k", self.theta_k)):
            if th is None or th.shape != shape:
                raise ContractError(f"{name} must have shape {shape}")
        if cfg.variant is Variant.SHARED_QK and not self.shared:
            raise ContractError("shared_qk weights must share one projection")


def init_slow_weights(cfg: ProbeConfig, rng: np.random.Generator, eta: float = 0.01) -> SlowWeights:
    """Zero probe init; projections uniform in +-1/sqrt(d_phi)."""
    w0 = np.zeros(cfg.weight_dim)
    if cfg.variant is Variant.NO_QK:
        return SlowWeights(w0, 0.0, None, None, eta)
    bound = 1.0 / math.sqrt(cfg.embed_dim)
    shape = (cfg.proj_dim, cfg.embed_dim)
    tq = rng.uniform(-bound, bound, size=shape)
    tk = tq if cfg.variant is Variant.SHARED_QK else rng.uniform(-bound, bound, size=shape)
    return SlowWeights(w0, 0.0, tq, tk, eta)


@dataclass(frozen=True)
class FastState:
    w: np.ndarray
    b: float
    step: int = 0
    raw_scores: Tuple[float, ...] = field(default_factory=tuple)

    @classmethod
    def fresh(cls, slow: SlowWeights) -> "FastState":
        return cls(slow.w0.copy(), slow.b0, 0, ())


def sigmoid(z):
    """Logistic function in the overflow-free two-branch form."""
    z = np.asarray(z, dtype=np.float64)
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _sig(z: float) -> float:
    # same kernel as the batched path so both agree bit for bit
    return float(sigmoid(np.array([z]))[0])


def dot_last(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Sum of products over the last axis, accumulated left to right.

    BLAS and pairwise summation pick their association order by array shape;
    a fixed order makes single-step and batched scores agree bit for bit.
    """
    acc = a[..., 0] * b[..., 0]
    for j in range(1, a.shape[-1]):
        acc = acc + a[..., j] * b[..., j]
    return acc


def project(phi: np.ndarray, theta: np.ndarray) -> np.ndarray:
    """``phi @ theta.T`` with the same fixed accumulation order as :func:`dot_last`."""
    acc = phi[..., 0, None] * theta[:, 0]
    for j in range(1, theta.shape[1]):
        acc = acc + phi[..., j, None] * theta[:, j]
    return acc


def views(slow: SlowWeights, phi: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Scoring and update views of ``phi`` (any leading batch shape)."""
    q = phi if slow.theta_q is None else project(phi, slow.theta_q)
    if slow.theta_k is None:
        k = phi
    elif slow.theta_k is slow.theta_q:
        k = q
    else:
        k = project(phi, slow.theta_k)
    return q, k


def _check_phi(cfg: ProbeConfig, phi) -> np.ndarray:
    phi = np.asarray(phi, dtype=np.float64)
    if phi.shape != (cfg.embed_dim,):
        raise ContractError(f"embedding has shape {phi.shape}, expected ({cfg.embed_dim},)")
    if not np.all(np.isfinite(phi)):
        raise ContractError("embedding has non-finite entries")
    return phi


def _check_label(c) -> float:
    if c not in (0, 1):
        raise ContractError(f"label must be 0 or 1, got {c!r}")
    return float(c)


def _forward(w: np.ndarray, b: float, u: np.ndarray) -> float:
    if w.shape != u.shape:
        raise ContractError(f"weight shape {w.shape} does not match view shape {u.shape}")
    s = _sig(float(dot_last(w, u)) + b)
    if not math.isfinite(s):
        raise NumericError("non-finite probe score")
    return s


def score(fast: FastState, slow: SlowWeights, cfg: ProbeConfig, phi) -> float:
    phi = _check_phi(cfg, phi)
    q, _ = views(slow, phi)
    return _forward(fast.w, fast.b, q)


def inner_loss(fast: FastState, slow: SlowWeights, cfg: ProbeConfig, phi, c) -> float:
    phi = _check_phi(cfg, phi)
    c = _check_label(c)
    _, k = views(slow, phi)
    return (_forward(fast.w, fast.b, k) - c) ** 2


def inner_grad(fast: FastState, slow: SlowWeights, cfg: ProbeConfig, phi, c) -> Tuple[np.ndarray, float]:
    """Analytic gradient of the inner Brier loss with respect to ``(w, b)``."""
    phi = _check_phi(cfg, phi)
    c = _check_label(c)
    _, k = views(slow, phi)
    s = _forward(fast.w, fast.b, k)
    g = 2.0 * (s - c) * s * (1.0 - s)
    gw = g * k
    if not (math.isfinite(g) and np.all(np.isfinite(gw))):
        raise NumericError("non-finite inner gradient")
    return gw, g


def inner_update(fast: FastState, slow: SlowWeights, cfg: ProbeConfig, phi, c) -> FastState:
    """One online gradient step; the step counter is left to :func:`advance`."""
    gw, gb = inner_grad(fast, slow, cfg, phi, c)
    eta = slow.eta
    return replace(fast, w=fast.w - eta * gw, b=fast.b - eta * gb)


def window_mean(values, window: int) -> float:
    """Mean of the last ``window`` values, summed left to right."""
    tail = values[-window:]
    acc = 0.0
    for v in tail:
        acc += v
    return acc / len(tail)


def advance(fast: FastState, slow: SlowWeights, cfg: ProbeConfig, phi, c) -> Tuple[float, float, FastState]:
    """Score the step, then update. Returns ``(raw, smoothed, next_state)``."""
    raw = score(fast, slow, cfg, phi)
    history = fast.raw_scores + (raw,)
    smoothed = window_mean(history, cfg.smoothing_window)
    nxt = inner_update(fast, slow, cfg, phi, c)
    return raw, smoothed, replace(nxt, step=fast.step + 1, raw_scores=history)


def smooth_rows(raw: np.ndarray, window: int) -> np.ndarray:
    """Rolling mean over the last ``window`` columns, matching :func:`window_mean` bit for bit."""
    N, T = raw.shape
    out = np.empty_like(raw)
    for t in range(T):
        lo = max(0, t - window + 1)
        acc = np.zeros(N)
        for j in range(lo, t + 1):
            acc += raw[:, j]
        out[:, t] = acc / (t + 1 - lo)
    return out


def batch_raw_scores(slow: SlowWeights, cfg: ProbeConfig, phi: np.ndarray) -> np.ndarray:
    """Raw deployed scores for a padded batch ``(N, T, d)`` with ``C_t = 0`` updates.

    Every step is updated, so row ``i`` is the score path of the deployed
    procedure up to (and including) whatever step it stops at: the stopping
    step itself is scored before its update, and later steps are never read.
    """
    slow.check(cfg)
    if phi.ndim != 3 or phi.shape[2] != cfg.embed_dim:
        raise ContractError(f"expected (N, T, {cfg.embed_dim}) embeddings, got {phi.shape}")
    q, k = views(slow, phi)
    N, T, _ = phi.shape
    w = np.broadcast_to(slow.w0, (N, slow.w0.shape[0])).copy()
    b = np.full(N, slow.b0)
    raw = np.empty((N, T))
    eta = slow.eta
    for t in range(T):
        raw[:, t] = sigmoid(dot_last(w, q[:, t]) + b)
        sk = raw[:, t] if k is q else sigmoid(dot_last(w, k[:, t]) + b)
        g = 2.0 * sk * sk * (1.0 - sk)
        w = w - eta * (g[:, None] * k[:, t])
        b = b - eta * g
    if not np.all(np.isfinite(raw)):
        raise NumericError("non-finite probe score in batch")
    return raw
