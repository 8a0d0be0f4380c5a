"""Outer-loop meta-training of the probe's slow weights.

The inner loop is unrolled over a (padded) batch of trajectories and the
summed Brier loss of the raw scores is differentiated back through every
fast-weight update with a hand-written reverse pass. The forward pass records
a :class:`Tape`; :func:`outer_gradients` replays it backwards.

Per step ``t`` (0-based, ``w_{-1} = w0``)::

    s_t  = sig(w_{t-1} . q_t + b_{t-1})           scored, enters the outer loss
    sk_t = sig(w_{t-1} . k_t + b_{t-1})           update view
    g_t  = 2 (sk_t - c_t) sk_t (1 - sk_t)
    w_t  = w_{t-1} - eta g_t k_t,   b_t = b_{t-1} - eta g_t
"""

from __future__ import annotations

import enum
import logging
import math
import time
from dataclasses import dataclass, field
from typing import List, Optional, Sequence, Tuple, Union

import numpy as np

from .data import Trajectory, pad_embeddings
from .errors import ContractError, TrainingDiverged
from .probe import ProbeConfig, SlowWeights, Variant, dot_last, init_slow_weights, sigmoid, views

log = logging.getLogger(__name__)

ETA_FLOOR = 1e-6


class Mode(str, enum.Enum):
    SUPERVISED = "supervised"
    CONSISTENT = "consistent"


class InnerPolicy(str, enum.Enum):
    PSEUDO_ZERO = "pseudo_zero"
    TRUE_LABELS = "true_labels"


@dataclass(frozen=True)
class LabelMode:
    mode: Mode = Mode.SUPERVISED
    cumulative: bool = True

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))


@dataclass(frozen=True)
class TrainConfig:
    outer_lr: float = 1e-3
    grad_clip: float = 1.0
    epochs: Optional[int] = None  # None -> 20 for no_qk, 10 otherwise
    truncation: Union[int, str] = "full"
    inner_label_policy: InnerPolicy = InnerPolicy.PSEUDO_ZERO
    seed: int = 0
    batch: int = 1

    def __post_init__(self) -> None:
        object.__setattr__(self, "inner_label_policy", InnerPolicy(self.inner_label_policy))
        if self.outer_lr <= 0 or self.grad_clip <= 0:
            raise ContractError("outer_lr and grad_clip must be positive")
        if self.batch < 1:
            raise ContractError("batch must be >= 1")
        if self.epochs is not None and self.epochs < 0:
            raise ContractError("epochs must be >= 0")
        if self.truncation != "full" and (not isinstance(self.truncation, int) or self.truncation < 1):
            raise ContractError("truncation must be a positive integer or 'full'")

    def epochs_for(self, cfg: ProbeConfig) -> int:
        if self.epochs is not None:
            return self.epochs
        return 20 if cfg.variant is Variant.NO_QK else 10


@dataclass
class EpochReport:
    epoch: int
    mean_loss: float
    wall_time: float
    snapshot: SlowWeights = field(repr=False)


def build_labels(traj: Trajectory, mode: LabelMode) -> np.ndarray:
    """Step labels for one trajectory; cumulative labels are a running maximum."""
    if mode.mode is Mode.SUPERVISED:
        if traj.correct is None:
            raise ContractError(f"trajectory {traj.id}: supervised labels need correctness bits")
        raw = traj.correct.astype(np.int8)
    else:
        if traj.answer_ids is None:
            raise ContractError(f"trajectory {traj.id}: consistent labels need answer ids")
        raw = (traj.answer_ids == traj.answer_ids[-1]).astype(np.int8)
    if mode.cumulative:
        raw = np.maximum.accumulate(raw)
    return raw


@dataclass
class Grads:
    w0: np.ndarray
    b0: float
    theta_q: Optional[np.ndarray] = None
    theta_k: Optional[np.ndarray] = None
    eta: Optional[float] = None


@dataclass
class Tape:
    """Forward intermediates of a batched unroll (arrays are ``(B, T, ...)``)."""

    slow: SlowWeights
    cfg: ProbeConfig
    phi: np.ndarray
    q: np.ndarray
    k: np.ndarray
    w_prev: np.ndarray
    s: np.ndarray
    sk: np.ndarray
    g: np.ndarray
    targets: np.ndarray
    labels: np.ndarray
    weights: np.ndarray  # per-term loss weights, zero on padding
    truncation: Union[int, str]
    learn_eta: bool
    losses: np.ndarray


def _batch_arrays(trajs: Sequence[Trajectory], labels: Sequence[np.ndarray]):
    phi, lengths = pad_embeddings(trajs)
    B, T, _ = phi.shape
    lab = np.zeros((B, T))
    for i, (tr, y) in enumerate(zip(trajs, labels)):
        if len(y) != len(tr):
            raise ContractError(f"trajectory {tr.id}: {len(y)} labels for {len(tr)} steps")
        lab[i, : len(y)] = y
    mask = (np.arange(T)[None, :] < lengths[:, None]).astype(np.float64)
    return phi, lab, mask, lengths


def unroll_batch(
    slow: SlowWeights,
    cfg: ProbeConfig,
    trajs: Sequence[Trajectory],
    labels: Sequence[np.ndarray],
    policy: InnerPolicy = InnerPolicy.PSEUDO_ZERO,
    truncation: Union[int, str] = "full",
    per_step_mean: bool = False,
) -> Tape:
    """Unroll the inner loop over a batch and record the tape.

    ``losses[i]`` is the summed (or, with ``per_step_mean``, averaged) Brier loss
    of trajectory ``i``'s raw scores against its labels.
    """
    slow.check(cfg)
    phi, lab, mask, lengths = _batch_arrays(trajs, labels)
    policy = InnerPolicy(policy)
    targets = lab if policy is InnerPolicy.TRUE_LABELS else np.zeros_like(lab)
    q, k = views(slow, phi)
    B, T, _ = phi.shape
    h = slow.w0.shape[0]
    w = np.broadcast_to(slow.w0, (B, h)).copy()
    b = np.full(B, slow.b0)
    w_prev = np.empty((B, T, h))
    b_prev = np.empty((B, T))
    s = np.empty((B, T))
    sk = np.empty((B, T))
    g = np.empty((B, T))
    eta = slow.eta
    for t in range(T):
        w_prev[:, t] = w
        b_prev[:, t] = b
        s[:, t] = sigmoid(dot_last(w, q[:, t]) + b)
        sk[:, t] = s[:, t] if k is q else sigmoid(dot_last(w, k[:, t]) + b)
        g[:, t] = 2.0 * (sk[:, t] - targets[:, t]) * sk[:, t] * (1.0 - sk[:, t])
        w = w - eta * (g[:, t, None] * k[:, t])
        b = b - eta * g[:, t]
    weights = mask / lengths[:, None] if per_step_mean else mask
    losses = (weights * (s - lab) ** 2).sum(axis=1)
    return Tape(
        slow=slow, cfg=cfg, phi=phi, q=q, k=k, w_prev=w_prev, s=s, sk=sk, g=g,
        targets=targets, labels=lab, weights=weights, truncation=truncation,
        learn_eta=cfg.inner_lr_learnable, losses=losses,
    )


def unroll_outer_loss(
    slow: SlowWeights,
    cfg: ProbeConfig,
    traj: Trajectory,
    labels: np.ndarray,
    policy: InnerPolicy = InnerPolicy.PSEUDO_ZERO,
    truncation: Union[int, str] = "full",
) -> Tuple[float, Tape]:
    tape = unroll_batch(slow, cfg, [traj], [labels], policy, truncation)
    return float(tape.losses[0]), tape


def _update_backward(tape: Tape, t: int, aw: np.ndarray, ab: np.ndarray, kbar: np.ndarray, eta_acc: np.ndarray):
    """Pull the adjoint of ``(w_t, b_t)`` back through update ``t``.

    Returns the adjoint of ``(w_{t-1}, b_{t-1})``; accumulates into ``kbar``
    and ``eta_acc`` in place.
    """
    eta = tape.slow.eta
    k_t = tape.k[:, t]
    g_t = tape.g[:, t]
    sk = tape.sk[:, t]
    dot = (aw * k_t).sum(axis=1) + ab
    eta_acc -= g_t * dot
    gbar = -eta * dot
    v = sk * (1.0 - sk)
    dg_dz = 2.0 * v * (v + (sk - tape.targets[:, t]) * (1.0 - 2.0 * sk))
    zbar = gbar * dg_dz
    kbar[:, t] += -eta * g_t[:, None] * aw + zbar[:, None] * tape.w_prev[:, t]
    return aw + zbar[:, None] * k_t, ab + zbar


def _loss_adjoint(tape: Tape, t: int) -> np.ndarray:
    s = tape.s[:, t]
    return tape.weights[:, t] * 2.0 * (s - tape.labels[:, t]) * s * (1.0 - s)


def outer_gradients(tape: Tape) -> Grads:
    """Exact reverse-mode gradient of the batch-mean outer loss."""
    B, T, h = tape.w_prev.shape
    qbar = np.zeros((B, T, h))
    kbar = np.zeros((B, T, h))
    eta_acc = np.zeros(B)
    trunc = tape.truncation
    if trunc == "full" or trunc >= T:
        aw = np.zeros((B, h))
        ab = np.zeros(B)
        for t in range(T - 1, -1, -1):
            aw, ab = _update_backward(tape, t, aw, ab, kbar, eta_acc)
            a = _loss_adjoint(tape, t)
            qbar[:, t] += a[:, None] * tape.w_prev[:, t]
            aw = aw + a[:, None] * tape.q[:, t]
            ab = ab + a
        gw0, gb0 = aw, ab
    else:
        gw0, gb0 = _windowed_backward(tape, int(trunc), qbar, kbar, eta_acc)
    if not (np.all(np.isfinite(gw0)) and np.all(np.isfinite(gb0))):
        raise TrainingDiverged("non-finite outer gradient")
    slow = tape.slow
    out = Grads(w0=gw0.sum(axis=0) / B, b0=float(gb0.sum()) / B)
    if slow.theta_q is not None:
        gq = np.einsum("bth,btd->hd", qbar, tape.phi) / B
        gk = np.einsum("bth,btd->hd", kbar, tape.phi) / B
        if slow.shared:
            out.theta_q = out.theta_k = gq + gk
        else:
            out.theta_q, out.theta_k = gq, gk
    if tape.learn_eta:
        out.eta = float(eta_acc.sum()) / B
    return out


def _windowed_backward(tape: Tape, K: int, qbar, kbar, eta_acc):
    """Truncated reverse pass: each score sees only its ``K`` most recent updates.

    Older increments are treated as constants, so the leftover adjoint lands
    directly on ``(w0, b0)``.
    """
    B, T, h = tape.w_prev.shape
    gw0 = np.zeros((B, h))
    gb0 = np.zeros(B)
    for t in range(T):
        a = _loss_adjoint(tape, t)
        qbar[:, t] += a[:, None] * tape.w_prev[:, t]
        aw = a[:, None] * tape.q[:, t]
        ab = a.copy()
        for j in range(t - 1, max(-1, t - 1 - K), -1):
            aw, ab = _update_backward(tape, j, aw, ab, kbar, eta_acc)
        gw0 += aw
        gb0 += ab
    return gw0, gb0


# --- optimisation -----------------------------------------------------------

def _param_names(slow: SlowWeights, learn_eta: bool) -> List[str]:
    names = ["w0", "b0"]
    if slow.theta_q is not None:
        names.append("theta_q")
        if not slow.shared:
            names.append("theta_k")
    if learn_eta:
        names.append("eta")
    return names


def _pack(obj, names) -> np.ndarray:
    return np.concatenate([np.ravel(np.asarray(getattr(obj, n), dtype=np.float64)) for n in names])


def _unpack(vec: np.ndarray, template: SlowWeights, names) -> SlowWeights:
    out = template.copy()
    i = 0
    for n in names:
        ref = getattr(template, n)
        size = np.size(ref)
        chunk = vec[i : i + size]
        i += size
        if n in ("b0", "eta"):
            setattr(out, n, float(chunk[0]))
        else:
            setattr(out, n, chunk.reshape(np.shape(ref)).copy())
    if template.shared:
        out.theta_k = out.theta_q
    if "eta" in names:
        out.eta = max(out.eta, ETA_FLOOR)
    return out


class Adam:
    """Adam with global-norm clipping applied before the moment updates."""

    def __init__(self, lr: float, clip: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr, self.clip, self.beta1, self.beta2, self.eps = lr, clip, beta1, beta2, eps
        self.m = self.v = None
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> np.ndarray:
        norm = math.sqrt(float(grad @ grad))
        if norm > self.clip:
            grad = grad * (self.clip / norm)
        if self.m is None:
            self.m = np.zeros_like(params)
            self.v = np.zeros_like(params)
        self.t += 1
        self.m = self.beta1 * self.m + (1 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1 - self.beta2) * grad * grad
        mhat = self.m / (1 - self.beta1 ** self.t)
        vhat = self.v / (1 - self.beta2 ** self.t)
        return params - self.lr * mhat / (np.sqrt(vhat) + self.eps)


def _fit(
    dataset: Sequence[Trajectory],
    probe_cfg: ProbeConfig,
    train_cfg: TrainConfig,
    mode: LabelMode,
    slow: SlowWeights,
    policy: InnerPolicy,
    per_step_mean: bool,
    learn_eta: bool,
):
    if not dataset:
        raise ContractError("training set is empty")
    rng = np.random.default_rng(train_cfg.seed)
    labels = [build_labels(t, mode) for t in dataset]
    cfg = probe_cfg if probe_cfg.inner_lr_learnable == learn_eta else _with_learnable(probe_cfg, learn_eta)
    names = _param_names(slow, learn_eta)
    opt = Adam(train_cfg.outer_lr, train_cfg.grad_clip)
    reports: List[EpochReport] = []
    for epoch in range(1, train_cfg.epochs_for(probe_cfg) + 1):
        t0 = time.perf_counter()
        order = rng.permutation(len(dataset))
        total = 0.0
        for bi, start in enumerate(range(0, len(order), train_cfg.batch)):
            idx = order[start : start + train_cfg.batch]
            tape = unroll_batch(
                slow, cfg, [dataset[i] for i in idx], [labels[i] for i in idx],
                policy, train_cfg.truncation, per_step_mean,
            )
            if not np.all(np.isfinite(tape.losses)):
                raise TrainingDiverged(f"non-finite outer loss at epoch {epoch} batch {bi}")
            total += float(tape.losses.sum())
            try:
                grads = outer_gradients(tape)
            except TrainingDiverged as exc:
                raise TrainingDiverged(f"{exc} at epoch {epoch} batch {bi}") from None
            params = opt.step(_pack(slow, names), _pack(grads, names))
            if not np.all(np.isfinite(params)):
                raise TrainingDiverged(f"non-finite parameters at epoch {epoch} batch {bi}")
            slow = _unpack(params, slow, names)
        rep = EpochReport(epoch, total / len(dataset), time.perf_counter() - t0, slow.copy())
        log.info("epoch %d mean outer loss %.6f (%.2fs)", epoch, rep.mean_loss, rep.wall_time)
        reports.append(rep)
    return slow, reports


def _with_learnable(cfg: ProbeConfig, flag: bool) -> ProbeConfig:
    from dataclasses import replace

    return replace(cfg, inner_lr_learnable=flag)


def train(
    dataset: Sequence[Trajectory],
    probe_cfg: ProbeConfig,
    train_cfg: TrainConfig,
    mode: LabelMode,
    init: Optional[SlowWeights] = None,
    eta: float = 0.01,
) -> Tuple[SlowWeights, List[EpochReport], List[SlowWeights]]:
    """Meta-train the slow weights by differentiating through the inner loop."""
    slow = init.copy() if init is not None else init_slow_weights(
        probe_cfg, np.random.default_rng(train_cfg.seed), eta
    )
    if slow.eta <= 0:
        raise ContractError("meta-training needs eta > 0")
    slow, reports = _fit(
        dataset, probe_cfg, train_cfg, mode, slow, train_cfg.inner_label_policy,
        per_step_mean=False, learn_eta=probe_cfg.inner_lr_learnable,
    )
    return slow, reports, [r.snapshot for r in reports]


def train_static(
    dataset: Sequence[Trajectory],
    probe_cfg: ProbeConfig,
    train_cfg: TrainConfig,
    mode: LabelMode,
) -> SlowWeights:
    """Standard probe training: no inner updates, mean per-step Brier loss."""
    slow = init_slow_weights(probe_cfg, np.random.default_rng(train_cfg.seed), eta=0.0)
    slow, _ = _fit(
        dataset, probe_cfg, train_cfg, mode, slow, InnerPolicy.PSEUDO_ZERO,
        per_step_mean=True, learn_eta=False,
    )
    slow.eta = 0.0
    return slow
