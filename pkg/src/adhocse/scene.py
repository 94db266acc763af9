"""Randomised shoebox scenes: geometry sampling, image-source RIRs, mixing.

Source signals are synthetic. The long-term speech spectrum used to colour
noise is a piecewise-linear curve in dB (``LTASS_POINTS``) turned into a
257-tap linear-phase FIR with :func:`scipy.signal.firwin2`.
"""
import json
from dataclasses import dataclass

import numpy as np
import scipy.signal

from .dsp import SAMPLE_RATE
from .errors import GenerationError, GeometryError, ShapeError
from .kernels import rir_accumulate

SPEED_OF_SOUND = 343.0

# (Hz, dB) breakpoints of the speech-shaped colouring filter
LTASS_POINTS = (
    (0.0, -30.0),
    (100.0, -8.0),
    (250.0, 0.0),
    (500.0, -1.0),
    (1000.0, -5.0),
    (2000.0, -12.0),
    (4000.0, -20.0),
    (8000.0, -32.0),
)
LTASS_TAPS = 257
SOURCE_RMS = 0.05
NOISE_KINDS = ("speech_shaped_noise", "white", "babble_surrogate")


@dataclass
class GeometryConfig:
    room_x: tuple = (4.0, 8.0)
    room_y: tuple = (4.0, 8.0)
    room_z: tuple = (2.5, 3.5)
    rt60: tuple = (0.15, 0.4)
    sir_db: tuple = (0.0, 6.0)
    n_nodes: int = 4
    mics_per_node: int = 4
    mic_radius: float = 0.05
    min_distance: float = 0.5
    max_retries: int = 1000
    sample_rate: int = SAMPLE_RATE


@dataclass
class SceneSpec:
    room_dims: np.ndarray  # [3]
    rt60: float
    node_centers: np.ndarray  # [K, 3]
    node_positions: np.ndarray  # [K, M, 3]
    source_positions: np.ndarray  # [2, 3]: target, noise
    sir_db: float
    seed: int
    sample_rate: int = SAMPLE_RATE
    noise_kind: str = "speech_shaped_noise"

    def __post_init__(self):
        self.room_dims = np.asarray(self.room_dims, dtype=float)
        self.node_centers = np.asarray(self.node_centers, dtype=float)
        self.node_positions = np.asarray(self.node_positions, dtype=float)
        self.source_positions = np.asarray(self.source_positions, dtype=float)

    @property
    def n_nodes(self):
        return self.node_positions.shape[0]

    @property
    def mics_per_node(self):
        return self.node_positions.shape[1]

    def to_dict(self):
        return {
            "room_dims": self.room_dims.tolist(),
            "rt60": float(self.rt60),
            "nodes": [
                {"center": c.tolist(), "mics": m.tolist()}
                for c, m in zip(self.node_centers, self.node_positions)
            ],
            "sources": [
                {"role": "target", "position": self.source_positions[0].tolist()},
                {"role": "noise", "position": self.source_positions[1].tolist(), "kind": self.noise_kind},
            ],
            "sir_db": float(self.sir_db),
            "seed": int(self.seed),
            "sample_rate": int(self.sample_rate),
        }

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d):
        src = {s["role"]: s for s in d["sources"]}
        return cls(
            room_dims=d["room_dims"],
            rt60=d["rt60"],
            node_centers=[n["center"] for n in d["nodes"]],
            node_positions=[n["mics"] for n in d["nodes"]],
            source_positions=[src["target"]["position"], src["noise"]["position"]],
            sir_db=d["sir_db"],
            seed=d["seed"],
            sample_rate=d.get("sample_rate", SAMPLE_RATE),
            noise_kind=src["noise"].get("kind", "speech_shaped_noise"),
        )

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))

    def save(self, path):
        with open(path, "w") as fh:
            fh.write(self.to_json())

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_json(fh.read())


@dataclass
class SceneSignals:
    """Component images per node and microphone, each [K, M, samples]."""

    spec: SceneSpec
    speech_image: np.ndarray
    noise_image: np.ndarray
    mixture: np.ndarray
    dry_speech: np.ndarray
    dry_noise: np.ndarray  # already scaled to the scene SIR
    ref_mic: int = 0

    @property
    def n_nodes(self):
        return self.mixture.shape[0]

    @property
    def n_samples(self):
        return self.mixture.shape[-1]


def validate_spec(spec, min_distance=0.5):
    """Raise :class:`GeometryError` listing every violated placement constraint."""
    problems = []
    L = spec.room_dims
    points = [("target", spec.source_positions[0]), ("noise", spec.source_positions[1])]
    points += [(f"node{k}", c) for k, c in enumerate(spec.node_centers)]
    tol = 1e-9
    for name, p in points:
        if np.any(p < min_distance - tol) or np.any(p > L - min_distance + tol):
            problems.append(f"{name} closer than {min_distance} m to a wall")
    for i in range(len(points)):
        for j in range(i + 1, len(points)):
            d = np.linalg.norm(points[i][1] - points[j][1])
            if d < min_distance - tol:
                problems.append(f"{points[i][0]}-{points[j][0]} distance {d:.3f} m")
    mics = spec.node_positions.reshape(-1, 3)
    if np.any(mics <= 0) or np.any(mics >= L):
        problems.append("microphone outside the room")
    if not 0.0 <= spec.sir_db <= 6.0:
        problems.append(f"sir_db {spec.sir_db} outside [0, 6]")
    if not 0.15 <= spec.rt60 <= 0.4:
        problems.append(f"rt60 {spec.rt60} outside [0.15, 0.4]")
    if problems:
        raise GeometryError("; ".join(problems))


def _node_mics(center, n_mics, radius, angle):
    phi = angle + 2 * np.pi * np.arange(n_mics) / n_mics
    offs = np.stack([radius * np.cos(phi), radius * np.sin(phi), np.zeros(n_mics)], axis=1)
    return center[None, :] + offs


def sample_scene(seed, cfg=None, room_dims=None):
    """Draw a random scene satisfying all placement constraints.

    ``room_dims`` pins the room size instead of sampling it. Raises
    :class:`GenerationError` if no valid placement is found within
    ``cfg.max_retries`` draws.
    """
    cfg = cfg or GeometryConfig()
    rng = np.random.default_rng(seed)
    if room_dims is None:
        L = np.array([rng.uniform(*cfg.room_x), rng.uniform(*cfg.room_y), rng.uniform(*cfg.room_z)])
    else:
        L = np.asarray(room_dims, dtype=float)
    rt60 = rng.uniform(*cfg.rt60)
    sir = rng.uniform(*cfg.sir_db)
    noise_kind = NOISE_KINDS[rng.integers(len(NOISE_KINDS))]
    d = cfg.min_distance
    n_pts = cfg.n_nodes + 2
    lo, hi = np.full(3, d), L - d
    if np.any(hi < lo):
        raise GenerationError(f"room {L.tolist()} too small for {d} m wall clearance")
    for _ in range(cfg.max_retries):
        pts = rng.uniform(lo, hi, size=(n_pts, 3))
        diff = pts[:, None, :] - pts[None, :, :]
        dist = np.sqrt((diff ** 2).sum(-1)) + np.eye(n_pts) * 1e9
        if dist.min() >= d:
            break
    else:
        raise GenerationError(
            f"no valid placement of {cfg.n_nodes} nodes and 2 sources in room {L.round(2).tolist()} "
            f"after {cfg.max_retries} draws"
        )
    centers = pts[2:]
    angles = rng.uniform(0, 2 * np.pi, size=cfg.n_nodes)
    mics = np.stack([_node_mics(c, cfg.mics_per_node, cfg.mic_radius, a) for c, a in zip(centers, angles)])
    return SceneSpec(
        room_dims=L, rt60=rt60, node_centers=centers, node_positions=mics,
        source_positions=pts[:2], sir_db=sir, seed=seed, sample_rate=cfg.sample_rate,
        noise_kind=noise_kind,
    )


# ---------------------------------------------------------------------------
# image-source method
# ---------------------------------------------------------------------------


def sabine_absorption(room_dims, rt60):
    """Uniform wall absorption coefficient from Sabine's formula."""
    Lx, Ly, Lz = room_dims
    V = Lx * Ly * Lz
    S = 2 * (Lx * Ly + Lx * Lz + Ly * Lz)
    return 0.161 * V / (S * rt60)


def image_sources(room_dims, src, max_order):
    """All image positions up to ``max_order`` reflections and their orders.

    Returns ``(positions [N, 3], orders [N])``; the direct source has order 0.
    """
    n = np.arange(-max_order, max_order + 1)
    per_axis = []
    for ax in range(3):
        pos = np.concatenate([2 * n * room_dims[ax] + src[ax], 2 * n * room_dims[ax] - src[ax]])
        refl = np.concatenate([np.abs(2 * n), np.abs(2 * n - 1)])
        per_axis.append((pos, refl))
    (px, rx), (py, ry), (pz, rz) = per_axis
    order = rx[:, None, None] + ry[None, :, None] + rz[None, None, :]
    keep = order <= max_order
    ix, iy, iz = np.nonzero(keep)
    positions = np.stack([px[ix], py[iy], pz[iz]], axis=1)
    return positions, order[keep]


def _check_inside(room_dims, p, what):
    p = np.asarray(p, dtype=float)
    if np.any(p < 0) or np.any(p > room_dims):
        raise GeometryError(f"{what} {p.tolist()} outside room {np.asarray(room_dims).tolist()}")
    return p


def simulate_rir(spec, src, mic, max_order=10, fractional=True, half_width=16):
    """Image-source room impulse response between two points of ``spec``'s room.

    Walls share one absorption coefficient derived from ``spec.rt60``; each
    image contributes ``beta**order / (4 pi d)`` at delay ``d / c``.
    ``fractional=False`` rounds delays to whole samples.
    """
    L = spec.room_dims
    src = _check_inside(L, src, "source")
    mic = _check_inside(L, mic, "microphone")
    if max_order < 0:
        raise ValueError("max_order must be >= 0")
    alpha = min(sabine_absorption(L, spec.rt60), 1.0)
    beta = np.sqrt(1.0 - alpha)
    pos, order = image_sources(L, src, max_order)
    dist = np.linalg.norm(pos - mic[None, :], axis=1)
    dist = np.maximum(dist, 1e-3)
    delays = dist / SPEED_OF_SOUND * spec.sample_rate
    amps = beta ** order / (4 * np.pi * dist)
    hw = half_width if fractional else 0
    length = int(np.ceil(delays.max())) + hw + 2
    return rir_accumulate(delays, amps, length, hw)


# ---------------------------------------------------------------------------
# synthetic sources
# ---------------------------------------------------------------------------


def ltass_filter(sample_rate=SAMPLE_RATE):
    """FIR taps of the speech-shaped colouring filter."""
    f, g = np.array(LTASS_POINTS).T
    nyq = sample_rate / 2
    f = np.clip(f / nyq, 0, 1)
    return scipy.signal.firwin2(LTASS_TAPS, f, 10 ** (g / 20))


def _speech_shaped(n, rng, sample_rate):
    w = rng.standard_normal(n + LTASS_TAPS)
    return scipy.signal.lfilter(ltass_filter(sample_rate), 1.0, w)[LTASS_TAPS:]


def _syllable_envelope(n, rng, sample_rate, rate=4.0, pause_prob=0.25):
    t = np.arange(n) / sample_rate
    phase = rng.uniform(0, 2 * np.pi)
    env = np.maximum(np.sin(2 * np.pi * rate * t + phase), 0.0)
    # drop whole syllables to create pauses
    cycle = np.floor((2 * np.pi * rate * t + phase) / (2 * np.pi)).astype(int)
    cycle -= cycle.min()
    keep = rng.random(cycle.max() + 1) >= pause_prob
    return env * keep[cycle]


def _normalise(x):
    rms = np.sqrt(np.mean(x ** 2))
    return x * (SOURCE_RMS / rms) if rms > 0 else x


def synth_source(kind, duration, seed, sample_rate=SAMPLE_RATE):
    """Deterministic synthetic source signal at RMS ``SOURCE_RMS``.

    kinds: ``white``, ``speech_shaped_noise`` (stationary, LTASS-coloured),
    ``babble_surrogate`` (six overlapping syllable-modulated speech-shaped
    streams) and ``speech`` (one syllable-modulated stream at 4 Hz with random
    pauses; the default target surrogate).
    """
    if duration <= 0:
        raise ValueError("duration must be positive")
    n = int(round(duration * sample_rate))
    rng = np.random.default_rng(seed)
    if kind == "white":
        x = rng.standard_normal(n)
    elif kind == "speech_shaped_noise":
        x = _speech_shaped(n, rng, sample_rate)
    elif kind == "speech":
        x = _speech_shaped(n, rng, sample_rate) * _syllable_envelope(n, rng, sample_rate)
    elif kind == "babble_surrogate":
        x = np.zeros(n)
        for _ in range(6):
            rate = rng.uniform(3.0, 5.0)
            x += _speech_shaped(n, rng, sample_rate) * _syllable_envelope(n, rng, sample_rate, rate, 0.1)
    else:
        raise ValueError(f"unknown source kind {kind!r}")
    return _normalise(x)


# ---------------------------------------------------------------------------
# rendering
# ---------------------------------------------------------------------------


def scale_to_sir(dry_speech, dry_noise, sir_db):
    """Gain-adjusted copy of ``dry_noise`` so the dry-signal SIR equals ``sir_db``."""
    es = np.sum(dry_speech ** 2)
    en = np.sum(dry_noise ** 2)
    if en == 0:
        return np.zeros_like(dry_noise)
    return dry_noise * np.sqrt(es / (en * 10 ** (sir_db / 10)))


def _images(spec, src, dry, max_order):
    K, M, _ = spec.node_positions.shape
    rirs = [simulate_rir(spec, src, spec.node_positions[k, m], max_order) for k in range(K) for m in range(M)]
    n = max(len(h) for h in rirs)
    H = np.zeros((K * M, n))
    for i, h in enumerate(rirs):
        H[i, :len(h)] = h
    out = scipy.signal.fftconvolve(H, dry[None, :], axes=1)[:, : dry.size]
    return out.reshape(K, M, dry.size)


def render_scene(spec, dry_speech, dry_noise, max_order=10, ref_mic=0):
    """Convolve both dry sources with every microphone's RIR and mix."""
    dry_speech = np.asarray(dry_speech, dtype=float)
    dry_noise = np.asarray(dry_noise, dtype=float)
    if dry_speech.shape != dry_noise.shape or dry_speech.ndim != 1:
        raise ShapeError(f"dry signals must be equal-length vectors, got {dry_speech.shape} and {dry_noise.shape}")
    noise = scale_to_sir(dry_speech, dry_noise, spec.sir_db)
    s_img = _images(spec, spec.source_positions[0], dry_speech, max_order)
    if np.any(noise):
        n_img = _images(spec, spec.source_positions[1], noise, max_order)
    else:
        n_img = np.zeros_like(s_img)
    return SceneSignals(spec, s_img, n_img, s_img + n_img, dry_speech, noise, ref_mic)


def make_scene(seed, duration=10.0, cfg=None, max_order=10):
    """Sample a scene and render it with synthetic target and noise sources."""
    spec = sample_scene(seed, cfg)
    sr = spec.sample_rate
    speech = synth_source("speech", duration, 2 * seed + 1_000_003, sr)
    noise = synth_source(spec.noise_kind, duration, 2 * seed + 2_000_003, sr)
    return render_scene(spec, speech, noise, max_order)
