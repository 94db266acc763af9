"""Mask estimator: optional SE input gate, conv front-end, temporal conv, sigmoid head.

Layout per conv block: 3x3 conv (no bias; batch norm follows) -> batch norm
-> ReLU -> 4x1 max-pool over frequency. The pooled maps are flattened per
frame, passed through a zero-padded temporal convolution (ReLU) and a dense
sigmoid layer giving one mask value per frequency bin and frame.
"""
import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from ..errors import NumericError, ShapeError
from . import layers as L

WEIGHT_OVERRIDES = ("none", "random", "ones")


@dataclass(frozen=True)
class NetConfig:
    in_channels: int = 7
    n_bins: int = 257
    window: int = 21
    filters: tuple = (32, 64, 64)
    kernel: tuple = (3, 3)
    pool: int = 4
    temporal_kernel: int = 5
    temporal_width: int = 128
    se: bool = False
    se_reduction: int = 2
    weight_override: str = "none"
    dtype: str = "float32"

    def __post_init__(self):
        if self.weight_override not in WEIGHT_OVERRIDES:
            raise ValueError(f"weight_override must be one of {WEIGHT_OVERRIDES}")
        object.__setattr__(self, "filters", tuple(self.filters))
        object.__setattr__(self, "kernel", tuple(self.kernel))
        f = self.n_bins
        for _ in self.filters:
            f //= self.pool
        if f < 1:
            raise ValueError(f"{self.n_bins} bins cannot be pooled {len(self.filters)} times by {self.pool}")

    @property
    def pooled_bins(self):
        f = self.n_bins
        for _ in self.filters:
            f //= self.pool
        return f

    @property
    def se_hidden(self):
        return max(1, self.in_channels // self.se_reduction)

    @property
    def gated(self):
        """True when channel weights multiply the input (learned or overridden)."""
        if self.in_channels == 1:
            return False
        return self.se or self.weight_override != "none"

    def to_dict(self):
        d = asdict(self)
        d["filters"] = list(self.filters)
        d["kernel"] = list(self.kernel)
        return d


@dataclass
class EstimatorParams:
    config: NetConfig
    params: dict  # name -> ndarray
    state: dict = field(default_factory=dict)  # batch-norm running statistics
    seed: int = 0
    extra: dict = field(default_factory=dict)  # feature normalisation etc.

    def copy(self):
        return EstimatorParams(
            self.config,
            {k: v.copy() for k, v in self.params.items()},
            {k: v.copy() for k, v in self.state.items()},
            self.seed,
            json.loads(json.dumps(self.extra)),
        )

    def config_hash(self):
        return hashlib.sha1(json.dumps(self.config.to_dict(), sort_keys=True).encode()).hexdigest()[:16]

    # single binary file: 8-byte header length, JSON header, raw little-endian arrays
    def save(self, path):
        arrays = [("param", k, v) for k, v in self.params.items()] + [("state", k, v) for k, v in self.state.items()]
        entries, blobs, offset = [], [], 0
        for kind, name, arr in arrays:
            a = np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<"))
            entries.append({"kind": kind, "name": name, "shape": list(a.shape), "dtype": a.dtype.str,
                            "offset": offset, "nbytes": a.nbytes})
            blobs.append(a.tobytes())
            offset += a.nbytes
        header = {"config": self.config.to_dict(), "config_hash": self.config_hash(), "seed": self.seed,
                  "extra": self.extra, "arrays": entries}
        hb = json.dumps(header, sort_keys=True).encode()
        with open(path, "wb") as fh:
            fh.write(len(hb).to_bytes(8, "little"))
            fh.write(hb)
            for b in blobs:
                fh.write(b)

    @classmethod
    def load(cls, path):
        with open(path, "rb") as fh:
            n = int.from_bytes(fh.read(8), "little")
            header = json.loads(fh.read(n))
            payload = fh.read()
        cfg = NetConfig(**header["config"])
        params, state = {}, {}
        for e in header["arrays"]:
            a = np.frombuffer(payload, dtype=np.dtype(e["dtype"]), count=int(np.prod(e["shape"])),
                              offset=e["offset"]).reshape(e["shape"]).copy()
            (params if e["kind"] == "param" else state)[e["name"]] = a
        return cls(cfg, params, state, header["seed"], header.get("extra", {}))


def init_params(cfg, seed=0):
    """He-initialised conv/temporal layers, Xavier head, small SE weights."""
    rng = np.random.default_rng(seed)
    dt = np.dtype(cfg.dtype)
    p, st = {}, {}
    C = cfg.in_channels
    if cfg.se and C > 1:
        h = cfg.se_hidden
        p["se_W1"] = rng.normal(0, np.sqrt(2.0 / C), (h, C))
        p["se_b1"] = np.zeros(h)
        p["se_W2"] = rng.normal(0, np.sqrt(1.0 / h), (C, h))
        p["se_b2"] = np.zeros(C)
    cin = C
    kt, kf = cfg.kernel
    for i, co in enumerate(cfg.filters):
        p[f"conv{i}_W"] = rng.normal(0, np.sqrt(2.0 / (cin * kt * kf)), (co, cin, kt, kf))
        p[f"bn{i}_g"] = np.ones(co)
        p[f"bn{i}_b"] = np.zeros(co)
        st[f"bn{i}_mean"] = np.zeros(co)
        st[f"bn{i}_var"] = np.ones(co)
        cin = co
    D = cin * cfg.pooled_bins
    k = cfg.temporal_kernel
    p["tconv_W"] = rng.normal(0, np.sqrt(2.0 / (k * D)), (k * D, cfg.temporal_width))
    p["tconv_b"] = np.zeros(cfg.temporal_width)
    p["head_W"] = rng.normal(0, np.sqrt(1.0 / cfg.temporal_width), (cfg.temporal_width, cfg.n_bins))
    p["head_b"] = np.zeros(cfg.n_bins)
    p = {k_: v.astype(dt) for k_, v in p.items()}
    st = {k_: v.astype(dt) for k_, v in st.items()}
    return EstimatorParams(cfg, p, st, seed)


def gate_weights(est, x, rng=None):
    """Channel weights for a batch [B, C, T, F] and the SE cache (or None)."""
    cfg = est.config
    B, C = x.shape[:2]
    if cfg.weight_override == "ones":
        return np.ones((B, C), dtype=x.dtype), None
    if cfg.weight_override == "random":
        rng = rng if rng is not None else np.random.default_rng(est.seed)
        return rng.uniform(0.0, 1.0, size=(B, C)).astype(x.dtype), None
    p = est.params
    return L.se_weights_forward(x, p["se_W1"], p["se_b1"], p["se_W2"], p["se_b2"])


def forward(est, x, train=False, rng=None):
    """Mask windows [B, T, n_bins] for inputs [B, C, T, n_bins] (or [C, T, n_bins]).

    Returns ``(mask, cache)``; ``cache["gate"]`` holds the channel weights
    actually applied (or None when ungated).
    """
    cfg = est.config
    p, st = est.params, est.state
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.shape[1] != cfg.in_channels or x.shape[3] != cfg.n_bins:
        raise ShapeError(f"estimator expects [B, {cfg.in_channels}, T, {cfg.n_bins}], got {x.shape}")
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite estimator input")
    x = x.astype(cfg.dtype, copy=False)
    cache = {"gate": None}
    h = x
    if cfg.gated:
        w, se_cache = gate_weights(est, h, rng)
        h, cache["gate_op"] = L.gate_forward(h, w)
        cache["se"] = se_cache
        cache["gate"] = w
    for i in range(len(cfg.filters)):
        h, cache[f"conv{i}"] = L.conv_forward(h, p[f"conv{i}_W"])
        running = [st[f"bn{i}_mean"], st[f"bn{i}_var"]]
        h, cache[f"bn{i}"] = L.bn_forward(h, p[f"bn{i}_g"], p[f"bn{i}_b"], running, train)
        if train:
            st[f"bn{i}_mean"], st[f"bn{i}_var"] = (r.astype(cfg.dtype) for r in running)
        h, cache[f"relu{i}"] = L.relu_forward(h)
        h, cache[f"pool{i}"] = L.pool_forward(h, cfg.pool)
    B, Cc, T, Fp = h.shape
    cache["flat_shape"] = h.shape
    h = np.ascontiguousarray(h.transpose(0, 2, 1, 3)).reshape(B, T, Cc * Fp)
    h, cache["tconv"] = L.tconv_forward(h, p["tconv_W"], p["tconv_b"])
    h, cache["trelu"] = L.relu_forward(h)
    a, cache["head"] = L.dense_forward(h, p["head_W"], p["head_b"])
    out = L.sigmoid(a)
    cache["out"] = out
    return (out[0] if single else out), cache


def backward(est, cache, dout):
    """Parameter gradients given dL/dmask [B, T, n_bins]."""
    cfg = est.config
    g = {}
    out = cache["out"]
    da = dout * out * (1 - out)
    dh, g["head_W"], g["head_b"] = L.dense_backward(da, cache["head"])
    dh = L.relu_backward(dh, cache["trelu"])
    dh, g["tconv_W"], g["tconv_b"] = L.tconv_backward(dh, cache["tconv"])
    B, Cc, T, Fp = cache["flat_shape"]
    dh = np.ascontiguousarray(dh.reshape(B, T, Cc, Fp).transpose(0, 2, 1, 3))
    for i in reversed(range(len(cfg.filters))):
        dh = L.pool_backward(dh, cache[f"pool{i}"])
        dh = L.relu_backward(dh, cache[f"relu{i}"])
        dh, g[f"bn{i}_g"], g[f"bn{i}_b"] = L.bn_backward(dh, cache[f"bn{i}"])
        dh, g[f"conv{i}_W"], _ = L.conv_backward(dh, cache[f"conv{i}"])
    if cfg.gated and cache.get("se") is not None:
        _, dw = L.gate_backward(dh, cache["gate_op"])
        _, gse = L.se_weights_backward(dw, cache["se"])
        g.update(gse)
    for k in est.params:
        g.setdefault(k, np.zeros_like(est.params[k]))
    return g


def mse_loss(pred, target):
    diff = pred - target
    return float(np.mean(diff ** 2)), 2.0 * diff / diff.size
