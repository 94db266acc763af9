"""Estimator inputs: channel layout, broken-link sentinel, normalisation, inference."""
from dataclasses import dataclass

import numpy as np

from ..errors import LengthError, ShapeError
from ..masks import TFMask
from . import network

SENTINEL = -1e-7
WINDOW = 21


def apply_sentinel(channels, link_ok):
    """Replace the target/noise channels of every failed link by ``SENTINEL``.

    ``channels`` is laid out as ``[local, z_1, n_1, z_2, n_2, ...]`` (any
    trailing dims); ``link_ok[j]`` describes the pair at channels 2j+1, 2j+2.
    Channel 0 is never touched.
    """
    x = np.array(channels, copy=True)
    link_ok = np.asarray(link_ok, dtype=bool)
    if x.shape[0] != 1 + 2 * link_ok.size:
        raise ShapeError(f"{x.shape[0]} channels do not match {link_ok.size} links")
    for j, ok in enumerate(link_ok):
        if not ok:
            x[2 * j + 1] = SENTINEL
            x[2 * j + 2] = SENTINEL
    return x


def stack_magnitudes(local_ref, received, n_links=None):
    """[1 + 2L, T, F] magnitudes of the local reference and received pairs.

    Missing pairs (``None``) become zeros; callers mark them with
    :func:`apply_sentinel`.
    """
    ref = np.abs(np.asarray(local_ref))
    if ref.ndim == 3:
        ref = ref[0]
    n_links = len(received) if n_links is None else n_links
    out = np.zeros((1 + 2 * n_links,) + ref.shape)
    out[0] = ref
    for j, pair in enumerate(received[:n_links]):
        if pair is None:
            continue
        z, n = pair
        z = z.data if hasattr(z, "data") else z
        n = n.data if hasattr(n, "data") else n
        out[2 * j + 1] = np.abs(np.reshape(z, ref.shape))
        out[2 * j + 2] = np.abs(np.reshape(n, ref.shape))
    return out


@dataclass
class FeatureNorm:
    """Per-channel statistics of ``log(1 + |X|)``.

    ``mode="standardize"`` subtracts the mean and divides by the standard
    deviation; ``mode="scale"`` only divides by the root mean square (so an
    all-zero channel stays at zero); ``mode="none"`` leaves log-magnitudes.
    """

    mean: np.ndarray
    std: np.ndarray
    mode: str = "standardize"

    @classmethod
    def fit(cls, mags, mode="standardize"):
        """``mags``: iterable of [C, T, F] magnitude arrays (valid links only)."""
        s = s2 = n = 0
        for m in mags:
            lm = np.log1p(m)
            s = s + lm.sum(axis=(1, 2))
            s2 = s2 + (lm ** 2).sum(axis=(1, 2))
            n += lm.shape[1] * lm.shape[2]
        mean = s / n
        if mode == "scale":
            std = np.sqrt(s2 / n)
        else:
            std = np.sqrt(np.maximum(s2 / n - mean ** 2, 0))
        return cls(mean, np.maximum(std, 1e-8), mode)

    def __call__(self, mags, link_ok=None):
        x = np.log1p(np.asarray(mags, dtype=np.float64))
        if self.mode == "standardize":
            x = (x - self.mean[:, None, None]) / self.std[:, None, None]
        elif self.mode == "scale":
            x = x / self.std[:, None, None]
        if link_ok is not None:
            x = apply_sentinel(x, link_ok)
        return x

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist(), "mode": self.mode}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]), d.get("mode", "standardize"))


def estimator_forward(x, est, rng=None):
    """Mask window [T, n_bins] for one input window [C, T, n_bins] (inference mode)."""
    if x.ndim != 3:
        raise ShapeError(f"expected one window [C, T, F], got {x.shape}")
    out, _ = network.forward(est, x[None], train=False, rng=rng)
    return out[0]


def window_starts(T, window=WINDOW):
    """Start frame of the window used for every output frame (edge-clamped)."""
    if T < window:
        raise LengthError(f"{T} frames is shorter than the {window}-frame window")
    return np.clip(np.arange(T) - window // 2, 0, T - window)


def _receptive_half(cfg):
    return len(cfg.filters) * (cfg.kernel[0] // 2) + cfg.temporal_kernel // 2


def infer_mask(feats, est, rng=None, batch=64):
    """Frame-wise mask [T, n_bins] from features [C, T, n_bins].

    Each output frame is the row of the edge-clamped 21-frame window centred
    on it (the middle row for interior frames). Ungated estimators see each
    frame through a receptive field narrower than the window, so one pass
    over the full sequence yields exactly the per-window rows. Gated ones
    rescale the whole window, so every window is evaluated on the crop of
    frames its output row depends on.
    """
    cfg = est.config
    x = np.asarray(feats, dtype=cfg.dtype)
    if x.ndim != 3 or x.shape[0] != cfg.in_channels or x.shape[2] != cfg.n_bins:
        raise ShapeError(f"features must be [{cfg.in_channels}, T, {cfg.n_bins}], got {x.shape}")
    W = cfg.window
    T = x.shape[1]
    starts = window_starts(T, W)
    r = _receptive_half(cfg)
    if 2 * r + 1 > W:
        raise ValueError("receptive field wider than the window")
    if not cfg.gated or cfg.weight_override == "ones":
        out, _ = network.forward(est, x[None], train=False)
        return TFMask(out[0].astype(np.float64))
    # gated: one gate per distinct window, crop of 2r+1 frames per output frame
    uniq = np.unique(starts)
    gates = {}
    if rng is None:
        rng = np.random.default_rng(est.seed)
    for i in range(0, len(uniq), batch):
        s = uniq[i:i + batch]
        wins = np.ascontiguousarray(np.stack([x[:, a:a + W] for a in s]))
        w, _ = network.gate_weights(est, wins, rng)
        for a, g in zip(s, w):
            gates[a] = g
    C = 2 * r + 1
    mask = np.empty((T, cfg.n_bins))
    no_gate = network.NetConfig(**{**cfg.to_dict(), "se": False, "weight_override": "none", "in_channels": cfg.in_channels})
    ungated = network.EstimatorParams(no_gate, est.params, est.state, est.seed)
    for i in range(0, T, batch):
        ts = np.arange(i, min(T, i + batch))
        crops, rows = [], []
        for t in ts:
            a = starts[t]
            cs = int(np.clip(t - r, a, a + W - C))
            crops.append(x[:, cs:cs + C] * gates[a][:, None, None])
            rows.append(t - cs)
        out, _ = network.forward(ungated, np.stack(crops), train=False)
        mask[ts] = out[np.arange(len(ts)), rows]
    return TFMask(mask)
