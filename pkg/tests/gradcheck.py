"""Central finite-difference checks of the outer-loop gradient."""

import numpy as np

from onlinecal.probe import ProbeConfig, SlowWeights, init_slow_weights
from onlinecal.trainer import InnerPolicy, outer_gradients, unroll_batch
from tests.conftest import make_traj


def random_instance(rng, variant, learn_eta, policy=InnerPolicy.PSEUDO_ZERO, n_traj=2):
    d = int(rng.integers(1, 5))
    h = None if variant == "no_qk" else int(rng.integers(1, 4))
    cfg = ProbeConfig(variant, d, h, smoothing_window=3, inner_lr_learnable=learn_eta)
    slow = init_slow_weights(cfg, rng, eta=float(rng.uniform(0.05, 0.5)))
    slow.w0 = rng.normal(size=cfg.weight_dim)
    slow.b0 = float(rng.normal())
    trajs, labels = [], []
    for i in range(n_traj):
        T = int(rng.integers(1, 9))
        trajs.append(make_traj(rng.normal(size=(T, d)), id=i))
        cut = int(rng.integers(0, T + 1))
        labels.append(np.r_[np.zeros(cut), np.ones(T - cut)])
    return cfg, slow, trajs, labels, policy


def _mean_loss(slow, cfg, trajs, labels, policy):
    return float(unroll_batch(slow, cfg, trajs, labels, policy).losses.mean())


def _perturbed(slow, name, index, delta):
    s = slow.copy()
    if name == "eta":
        s.eta = s.eta + delta
    elif name == "b0":
        s.b0 = s.b0 + delta
    else:
        arr = getattr(s, name)
        arr[np.unravel_index(index, arr.shape)] += delta  # shared views see this too
    return s


def numeric_grads(cfg, slow, trajs, labels, policy, h=1e-6):
    names = ["w0", "b0"]
    if slow.theta_q is not None:
        names += ["theta_q"] if slow.shared else ["theta_q", "theta_k"]
    if cfg.inner_lr_learnable:
        names.append("eta")
    out = {}
    for name in names:
        size = 1 if name in ("b0", "eta") else getattr(slow, name).size
        g = np.empty(size)
        for i in range(size):
            up = _mean_loss(_perturbed(slow, name, i, h), cfg, trajs, labels, policy)
            dn = _mean_loss(_perturbed(slow, name, i, -h), cfg, trajs, labels, policy)
            g[i] = (up - dn) / (2 * h)
        out[name] = g
    return out


def max_relative_error(cfg, slow, trajs, labels, policy) -> float:
    tape = unroll_batch(slow, cfg, trajs, labels, policy)
    ana = outer_gradients(tape)
    num = numeric_grads(cfg, slow, trajs, labels, policy)
    worst = 0.0
    for name, g in num.items():
        a = np.ravel(np.asarray(getattr(ana, name), dtype=np.float64))
        scale = max(np.linalg.norm(a), np.linalg.norm(g), 1e-8)
        worst = max(worst, float(np.linalg.norm(a - g) / scale))
    return worst
