"""Minibatch SGD with momentum on the MSE between predicted and ideal ratio masks."""
import csv
from dataclasses import dataclass, field

import numpy as np

from ..errors import TrainingError
from . import network
from .features import SENTINEL


@dataclass
class TrainConfig:
    lr: float = 0.05
    momentum: float = 0.9
    batch_size: int = 16
    epochs: int = 10
    seed: int = 0
    broken_links: tuple = (0, 0)  # inclusive range of links dropped per sample
    grad_clip: float = 5.0
    log_gates: bool = True


@dataclass
class TrainResult:
    params: network.EstimatorParams
    initial_loss: float
    losses: list  # mean training loss per epoch
    gate_log: list = field(default_factory=list)  # applied gate weights per batch
    links_dropped: list = field(default_factory=list)  # per batch, per sample

    def save_losses(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "loss"])
            w.writerow([0, repr(self.initial_loss)])
            for i, l in enumerate(self.losses, 1):
                w.writerow([i, repr(l)])


def drop_links(x, n_drop, rng):
    """Sentinel-fill ``n_drop`` randomly chosen link pairs of one sample [C, T, F]."""
    n_links = (x.shape[0] - 1) // 2
    if n_drop == 0 or n_links == 0:
        return x
    x = x.copy()
    for j in rng.choice(n_links, size=min(n_drop, n_links), replace=False):
        x[2 * j + 1] = SENTINEL
        x[2 * j + 2] = SENTINEL
    return x


def _batches(n, bs, rng):
    idx = rng.permutation(n)
    return [idx[i:i + bs] for i in range(0, n, bs)]


def train(inputs, targets, net_cfg, cfg=None, init=None):
    """Train a mask estimator.

    ``inputs`` [N, C, T, F] are normalised features with every link valid;
    ``targets`` [N, T, F] are IRM windows. Each time a sample enters a batch
    a number of broken links is drawn uniformly from ``cfg.broken_links``
    and those pairs are replaced by the sentinel.
    """
    cfg = cfg or TrainConfig()
    if len(inputs) == 0:
        raise ValueError("empty training set")
    if len(inputs) != len(targets):
        raise ValueError("inputs and targets differ in length")
    rng = np.random.default_rng(cfg.seed)
    est = init.copy() if init is not None else network.init_params(net_cfg, cfg.seed)
    dt = np.dtype(net_cfg.dtype)
    inputs = np.asarray(inputs, dtype=dt)
    targets = np.asarray(targets, dtype=dt)
    vel = {k: np.zeros_like(v) for k, v in est.params.items()}
    lo, hi = cfg.broken_links
    result = TrainResult(est, np.nan, [])

    def make_batch(idx):
        xb = inputs[idx]
        drops = rng.integers(lo, hi + 1, size=len(idx)) if hi > 0 else np.zeros(len(idx), dtype=int)
        if hi > 0:
            xb = np.stack([drop_links(x, d, rng) for x, d in zip(xb, drops)])
        return xb, targets[idx], drops

    # initial loss: training-mode forward on the whole set, no updates
    snapshot = {k: v.copy() for k, v in est.state.items()}
    tot = 0.0
    for idx in _batches(len(inputs), cfg.batch_size, np.random.default_rng(cfg.seed + 1)):
        out, _ = network.forward(est, inputs[idx], train=True, rng=np.random.default_rng(cfg.seed + 2))
        tot += network.mse_loss(out, targets[idx])[0] * len(idx)
    est.state = snapshot
    result.initial_loss = tot / len(inputs)

    for epoch in range(1, cfg.epochs + 1):
        tot = 0.0
        for idx in _batches(len(inputs), cfg.batch_size, rng):
            xb, yb, drops = make_batch(idx)
            out, cache = network.forward(est, xb, train=True, rng=rng)
            loss, dout = network.mse_loss(out, yb)
            if not np.isfinite(loss):
                raise TrainingError("training loss is not finite", epoch)
            grads = network.backward(est, cache, dout.astype(dt))
            norm = np.sqrt(sum(float(np.sum(g.astype(np.float64) ** 2)) for g in grads.values()))
            scale = min(1.0, cfg.grad_clip / norm) if norm > 0 else 1.0
            for k, g in grads.items():
                vel[k] = cfg.momentum * vel[k] - cfg.lr * scale * g.astype(dt)
                est.params[k] = (est.params[k] + vel[k]).astype(dt)
            tot += loss * len(idx)
            if cfg.log_gates and cache["gate"] is not None:
                result.gate_log.append(np.array(cache["gate"], dtype=np.float64))
            result.links_dropped.append(drops)
        result.losses.append(tot / len(inputs))
    return result
