"""Oracle time-frequency masks and mask application."""
import json
import hashlib
from dataclasses import dataclass

import numpy as np

from .dsp import ComplexSpectrogram, frame_energy
from .errors import ShapeError

IRM_EPS = 1e-12


@dataclass
class TFMask:
    data: np.ndarray  # real [T, F], entries in [0, 1]

    def __post_init__(self):
        self.data = np.asarray(self.data, dtype=np.float64)
        if self.data.ndim != 2:
            raise ShapeError(f"mask must be [T, F], got {self.data.shape}")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("mask has non-finite entries")
        if self.data.size and (self.data.min() < 0 or self.data.max() > 1):
            raise ValueError("mask entries must lie in [0, 1]")

    @property
    def shape(self):
        return self.data.shape

    def save(self, path, config=None):
        """Write ``path`` as raw float32 [T x F] plus a ``path.json`` sidecar."""
        self.data.astype("<f4").tofile(path)
        meta = {"shape": list(self.shape), "dtype": "float32"}
        if config is not None:
            meta["config_hash"] = hashlib.sha1(repr(config).encode()).hexdigest()[:16]
        with open(f"{path}.json", "w") as fh:
            json.dump(meta, fh, indent=2, sort_keys=True)

    @classmethod
    def load(cls, path):
        with open(f"{path}.json") as fh:
            meta = json.load(fh)
        data = np.fromfile(path, dtype="<f4").reshape(meta["shape"])
        return cls(data.astype(np.float64))


def _single(spec, name):
    data = spec.data if isinstance(spec, ComplexSpectrogram) else np.asarray(spec)
    if data.ndim == 3:
        if data.shape[0] != 1:
            raise ShapeError(f"{name} must have a single channel, got {data.shape[0]}")
        data = data[0]
    return data


def ideal_ratio_mask(speech, noise, eps=IRM_EPS):
    """Magnitude ratio mask ``|S| / (|S| + |N| + eps)``."""
    S = np.abs(_single(speech, "speech"))
    N = np.abs(_single(noise, "noise"))
    if S.shape != N.shape:
        raise ShapeError(f"speech {S.shape} and noise {N.shape} shapes differ")
    return TFMask(S / (S + N + eps))


def oracle_vad(speech, threshold_db=40.0):
    """Frame-constant binary mask: frames within ``threshold_db`` of the loudest one."""
    X = _single(speech, "speech")
    e = frame_energy(X)
    active = np.zeros(e.shape, dtype=bool)
    if e.max() > 0:
        e_db = 10 * np.log10(np.maximum(e, 1e-300))
        active = e_db >= e_db.max() - threshold_db
    return TFMask(np.repeat(active[:, None].astype(float), X.shape[-1], axis=1))


def apply_mask(mix, mask):
    """Scale every TF bin of every channel of ``mix`` by ``mask``."""
    m = mask.data if isinstance(mask, TFMask) else np.asarray(mask)
    if mix.data.shape[1:] != m.shape:
        raise ShapeError(f"mask {m.shape} does not match spectrogram {mix.data.shape[1:]}")
    return ComplexSpectrogram(mix.data * m[None], mix.config)
