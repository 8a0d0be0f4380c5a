"""Seeded synthetic reasoning trajectories with a single transition point.

Each trajectory sits at ``pre_mean`` until its transition step ``t*`` and at
``post_mean`` from then on, with AR(1) Gaussian noise on top. The noise
process restarts at the transition by default, so each instance has its own
pre-transition baseline that an online learner can adapt to. Correctness bits
are 0 before ``t*`` and 1 from ``t*`` on; answer ids churn before ``t*`` and
freeze at the (fresh) correct id.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field, replace
from typing import List, Optional, Tuple

import numpy as np
from scipy.signal import lfilter

from .data import Trajectory
from .errors import ContractError

CORRECT_ANSWER_ID = 0


@dataclass(frozen=True)
class TransitionLaw:
    kind: str = "uniform"  # "uniform" over a fraction range of T, or "geometric"
    frac_range: Tuple[float, float] = (0.1, 0.9)
    p_geom: float = 0.05
    p_neg: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in ("uniform", "geometric"):
            raise ContractError(f"unknown transition law {self.kind!r}")
        if not 0.0 <= self.p_neg <= 1.0:
            raise ContractError("p_neg must lie in [0, 1]")
        lo, hi = self.frac_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ContractError("frac_range must satisfy 0 <= lo <= hi <= 1")
        if not 0.0 < self.p_geom <= 1.0:
            raise ContractError("p_geom must lie in (0, 1]")


@dataclass(frozen=True)
class Shift:
    """Affine map ``phi -> R phi + translation`` with ``R`` a Givens rotation."""

    translation: Tuple[float, ...] = ()
    angle: float = 0.0
    plane: Tuple[int, int] = (0, 1)

    def apply(self, emb: np.ndarray) -> np.ndarray:
        out = emb
        if self.angle:
            i, j = self.plane
            c, s = math.cos(self.angle), math.sin(self.angle)
            out = out.copy()
            xi, xj = emb[:, i].copy(), emb[:, j].copy()
            out[:, i] = c * xi - s * xj
            out[:, j] = s * xi + c * xj
        if self.translation:
            out = out + np.asarray(self.translation)
        return out


@dataclass(frozen=True)
class SynthConfig:
    embed_dim: int = 16
    length_range: Tuple[int, int] = (20, 60)
    transition: TransitionLaw = field(default_factory=TransitionLaw)
    pre_mean: Tuple[float, ...] = ()
    post_mean: Tuple[float, ...] = ()
    noise_scale: float = 1.0
    drift_coeff: float = 0.0
    answer_churn: float = 0.3
    token_mean: float = 120.0
    restart_at_transition: bool = True
    shift: Optional[Shift] = None
    seed: int = 0

    def __post_init__(self) -> None:
        lo, hi = self.length_range
        if lo < 2 or hi < lo:
            raise ContractError("length_range must satisfy 2 <= T_min <= T_max")
        if self.noise_scale <= 0:
            raise ContractError("noise_scale must be positive")
        if not 0.0 <= self.drift_coeff < 1.0:
            raise ContractError("drift_coeff must lie in [0, 1)")
        if not 0.0 <= self.answer_churn <= 1.0:
            raise ContractError("answer_churn must lie in [0, 1]")
        for name in ("pre_mean", "post_mean"):
            v = getattr(self, name)
            if v and len(v) != self.embed_dim:
                raise ContractError(f"{name} must have length {self.embed_dim}")
        if self.shift is not None and self.shift.translation and len(self.shift.translation) != self.embed_dim:
            raise ContractError("shift translation must match embed_dim")

    def means(self) -> Tuple[np.ndarray, np.ndarray]:
        d = self.embed_dim
        pre = np.asarray(self.pre_mean) if self.pre_mean else np.zeros(d)
        post = np.asarray(self.post_mean) if self.post_mean else np.zeros(d)
        return pre, post

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "SynthConfig":
        d = dict(d)
        d["transition"] = TransitionLaw(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.get("transition", {}).items()})
        if d.get("shift") is not None:
            d["shift"] = Shift(**{k: tuple(v) if isinstance(v, list) else v for k, v in d["shift"].items()})
        for k in ("length_range", "pre_mean", "post_mean"):
            if k in d:
                d[k] = tuple(d[k])
        return cls(**d)


def reference_config(seed: int = 0, shifted: bool = False) -> SynthConfig:
    """Checked-in default world.

    d=16, T in [20, 60]. The pre- and post-transition means are orthogonal
    (norm 3 on coordinates 0 and 8), noise is AR(1) with coefficient 0.9 and
    restarts at the transition, and 2% of trajectories never transition.
    """
    d = 16
    pre = np.zeros(d)
    post = np.zeros(d)
    pre[0] = 3.0
    post[8] = 3.0
    cfg = SynthConfig(
        embed_dim=d,
        length_range=(20, 60),
        transition=TransitionLaw("uniform", (0.1, 0.9), p_neg=0.02),
        pre_mean=tuple(pre),
        post_mean=tuple(post),
        noise_scale=1.0,
        drift_coeff=0.9,
        answer_churn=0.3,
        token_mean=120.0,
        seed=seed,
    )
    return with_ood_shift(cfg) if shifted else cfg


def with_ood_shift(cfg: SynthConfig, angle: float = math.pi / 3) -> SynthConfig:
    """Reference out-of-distribution deployment.

    Rotates the means by ``angle`` in the plane spanned by coordinate 8 (the
    reference post-transition direction) and the last coordinate, so a probe
    fitted in-distribution sees a weaker answer direction.
    """
    d = cfg.embed_dim
    return replace(cfg, shift=Shift((), angle=angle, plane=(8 % d, d - 1)))


def _ar1(rng: np.random.Generator, n: int, d: int, rho: float, sigma: float) -> np.ndarray:
    eps = rng.standard_normal((n, d))
    if rho == 0.0:
        return sigma * eps
    out = np.empty((n, d))
    out[0] = sigma * eps[0]
    if n > 1:
        c = sigma * math.sqrt(1.0 - rho * rho)
        out[1:] = lfilter([c], [1.0, -rho], eps[1:], axis=0, zi=(rho * out[0])[None, :])[0]
    return out


def _transition_step(rng: np.random.Generator, law: TransitionLaw, T: int) -> Optional[int]:
    negative = rng.random() < law.p_neg
    if law.kind == "uniform":
        u = rng.uniform(*law.frac_range)
        t_star = min(T, max(1, math.ceil(u * T)))
    else:
        t_star = min(T, int(rng.geometric(law.p_geom)))
    return None if negative else t_star


def generate_one(cfg: SynthConfig, index: int) -> Trajectory:
    """Trajectory ``index`` of the world; depends only on ``(cfg.seed, index)``."""
    rng = np.random.default_rng([cfg.seed & 0xFFFFFFFFFFFFFFFF, index])
    d = cfg.embed_dim
    T = int(rng.integers(cfg.length_range[0], cfg.length_range[1] + 1))
    t_star = _transition_step(rng, cfg.transition, T)
    pre, post = cfg.means()
    if cfg.shift is not None:
        pre, post = cfg.shift.apply(np.vstack([pre, post]))
    cut = T if t_star is None else t_star - 1  # number of pre-transition steps
    rho, sigma = cfg.drift_coeff, cfg.noise_scale
    if cfg.restart_at_transition and 0 < cut < T:
        noise = np.vstack([_ar1(rng, cut, d, rho, sigma), _ar1(rng, T - cut, d, rho, sigma)])
    else:
        noise = _ar1(rng, T, d, rho, sigma)
    emb = noise
    emb[:cut] += pre
    emb[cut:] += post

    correct = np.zeros(T, dtype=np.int8)
    correct[cut:] = 1
    churn = rng.random(T) < cfg.answer_churn
    fresh = rng.integers(1, 2**31, size=T)
    answers = np.empty(T, dtype=np.int64)
    current = fresh[0]
    for t in range(T):
        if t >= cut:
            current = CORRECT_ANSWER_ID
        elif t > 0 and churn[t]:
            current = fresh[t]
        answers[t] = current
    tokens = 1 + rng.poisson(cfg.token_mean, size=T)
    return Trajectory(emb, correct, answers, tokens, id=index, meta={"t_star": t_star})


def generate_dataset(cfg: SynthConfig, count: int, start: int = 0) -> List[Trajectory]:
    if count < 0:
        raise ContractError("count must be non-negative")
    return [generate_one(cfg, start + i) for i in range(count)]


def oracle_transition(traj: Trajectory) -> Optional[int]:
    """First 1-based step whose cumulative correctness is 1, or ``None``."""
    if traj.correct is None:
        raise ContractError(f"trajectory {traj.id} has no correctness labels")
    hits = np.flatnonzero(traj.correct)
    return int(hits[0]) + 1 if hits.size else None
