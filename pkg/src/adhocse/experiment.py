"""Experiment harness: dataset generation, estimator training, failure sweeps, enhancement."""
import csv
import dataclasses
import json
import os
from dataclasses import dataclass, field

import numpy as np

from . import metrics as M
from .danse import LinkFailurePlan, NodeState, OracleMaskSource, run_pipeline, sample_failures, step1_compress
from .dsp import ComplexSpectrogram, StftConfig, read_wav, stft, write_wav
from .errors import ConfigError, LengthError, MissingArtifactError, ShapeError
from .masks import ideal_ratio_mask
from .neural import (WINDOW, EstimatorParams, FeatureNorm, NetConfig, TrainConfig, infer_mask, stack_magnitudes,
                     train)
from .scene import SPEED_OF_SOUND, GeometryConfig, SceneSpec, make_scene

# in_channels, SE gate, gate override, broken links per training sample
VARIANTS = {
    "SN": (1, False, "none", (0, 0)),
    "MN0": (7, False, "none", (0, 0)),
    "MN0-3": (7, False, "none", (0, 3)),
    "MN-SE": (7, True, "none", (0, 3)),
    "rand-MN": (7, False, "random", (0, 3)),
    "SE-rand-MN": (7, True, "random", (0, 3)),
    "SE-1-MN": (7, True, "ones", (0, 3)),
}
MAIN_VARIANTS = ("SN", "MN0", "MN0-3", "MN-SE")
ABLATION_VARIANTS = ("rand-MN", "SE-rand-MN", "SE-1-MN")
ORACLE = "oracle"  # sweep-only variant: ideal ratio masks in both steps


@dataclass
class ExperimentConfig:
    run_dir: str = "run"
    n_train_scenes: int = 20
    n_test_scenes: int = 20
    train_seed_start: int = 0
    test_seed_start: int = 100000
    duration: float = 4.0
    n_nodes: int = 4
    mics_per_node: int = 4
    max_order: int = 10
    failure_mode: str = "estimator"
    variants: list = field(default_factory=lambda: list(MAIN_VARIANTS))
    L_values: list = field(default_factory=lambda: [0, 1, 2, 3])
    step1_masks: str = "sn"  # masks forming z and n in training data: "sn" or "oracle"
    # estimator
    filters: list = field(default_factory=lambda: [16, 32, 32])
    temporal_width: int = 128
    norm_mode: str = "scale"
    windows_per_node: int = 32
    epochs: int = 10
    batch_size: int = 16
    lr: float = 0.05
    momentum: float = 0.9
    seed: int = 0

    def __post_init__(self):
        self.validate()

    def validate(self):
        tr = set(self.train_seeds)
        if tr & set(self.test_seeds):
            raise ConfigError("train and test seed ranges overlap")
        if any(L < 0 or L > self.n_nodes - 1 for L in self.L_values):
            raise ConfigError(f"L values must lie in [0, {self.n_nodes - 1}]")
        bad = [v for v in self.variants if v not in VARIANTS and v != ORACLE]
        if bad:
            raise ConfigError(f"unknown variants {bad}")
        if self.step1_masks not in ("sn", "oracle"):
            raise ConfigError("step1_masks must be 'sn' or 'oracle'")
        if self.failure_mode not in ("estimator", "both"):
            raise ConfigError("failure_mode must be 'estimator' or 'both'")
        if self.norm_mode not in ("standardize", "scale", "none"):
            raise ConfigError("norm_mode must be 'standardize', 'scale' or 'none'")
        if any(v != "SN" and v in VARIANTS for v in self.variants) and self.n_nodes != 4:
            raise ConfigError("multi-node estimators expect exactly 4 nodes (7 input channels)")

    @property
    def train_seeds(self):
        return list(range(self.train_seed_start, self.train_seed_start + self.n_train_scenes))

    @property
    def test_seeds(self):
        return list(range(self.test_seed_start, self.test_seed_start + self.n_test_scenes))

    def to_dict(self):
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d):
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ConfigError(f"unknown config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path):
        if str(path).endswith(".toml"):
            try:
                import tomllib
            except ModuleNotFoundError:  # python < 3.11
                import tomli as tomllib
            with open(path, "rb") as fh:
                return cls.from_dict(tomllib.load(fh))
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def replace(self, **kw):
        return self.from_dict({**self.to_dict(), **kw})

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")

    def geometry(self):
        return GeometryConfig(n_nodes=self.n_nodes, mics_per_node=self.mics_per_node)

    def net_config(self, variant, n_bins=257):
        c, se, override, _ = VARIANTS[variant]
        return NetConfig(in_channels=c, n_bins=n_bins, filters=tuple(self.filters),
                         temporal_width=self.temporal_width, se=se, weight_override=override)

    def train_config(self, variant):
        return TrainConfig(lr=self.lr, momentum=self.momentum, batch_size=self.batch_size, epochs=self.epochs,
                           seed=self.seed, broken_links=VARIANTS[variant][3])

    # run directory layout
    def path(self, *parts):
        return os.path.join(self.run_dir, *parts)

    def scene_dir(self, split, seed):
        return self.path("scenes", split, f"scene_{seed:06d}")

    def model_path(self, variant):
        return self.path("models", f"{variant}.model")


def snapshot_config(cfg):
    os.makedirs(cfg.run_dir, exist_ok=True)
    cfg.save(cfg.path("config.json"))


# ---------------------------------------------------------------------------
# scenes on disk
# ---------------------------------------------------------------------------


@dataclass
class SceneData:
    """One scene as STFT components per node, plus what the metrics need."""

    scene_id: int
    spec: SceneSpec
    speech: list  # ComplexSpectrogram [M_k, T, F] per node
    noise: list
    dry_speech: np.ndarray
    ref_mic: int = 0

    @property
    def n_nodes(self):
        return len(self.speech)

    @property
    def mixture(self):
        return [ComplexSpectrogram(s.data + n.data, s.config) for s, n in zip(self.speech, self.noise)]

    def direct_delay(self, node):
        """Target-to-reference-mic propagation delay of ``node`` in samples."""
        d = np.linalg.norm(self.spec.source_positions[0] - self.spec.node_positions[node][self.ref_mic])
        return d / SPEED_OF_SOUND * self.spec.sample_rate


def scene_from_signals(signals, stft_cfg=None):
    """In-memory :class:`SceneData` from rendered :class:`SceneSignals`."""
    cfg = stft_cfg or StftConfig()
    speech = [stft(x, cfg) for x in signals.speech_image]
    noise = [stft(x, cfg) for x in signals.noise_image]
    return SceneData(signals.spec.seed, signals.spec, speech, noise, np.asarray(signals.dry_speech))


def write_scene(directory, signals):
    os.makedirs(directory, exist_ok=True)
    signals.spec.save(os.path.join(directory, "spec.json"))
    for k in range(signals.n_nodes):
        write_wav(os.path.join(directory, f"speech_node{k}.wav"), signals.speech_image[k])
        write_wav(os.path.join(directory, f"noise_node{k}.wav"), signals.noise_image[k])
        write_wav(os.path.join(directory, f"mixture_node{k}.wav"), signals.mixture[k])
    write_wav(os.path.join(directory, "dry_speech.wav"), signals.dry_speech)
    write_wav(os.path.join(directory, "dry_noise.wav"), signals.dry_noise)


def load_scene(directory, stft_cfg=None):
    spec_path = os.path.join(directory, "spec.json")
    if not os.path.exists(spec_path):
        raise MissingArtifactError(f"no scene at {directory}; run 'generate' first")
    spec = SceneSpec.load(spec_path)
    cfg = stft_cfg or StftConfig()
    K = len(spec.node_positions)
    speech = [stft(read_wav(os.path.join(directory, f"speech_node{k}.wav")), cfg) for k in range(K)]
    noise = [stft(read_wav(os.path.join(directory, f"noise_node{k}.wav")), cfg) for k in range(K)]
    dry = read_wav(os.path.join(directory, "dry_speech.wav"))[0]
    return SceneData(spec.seed, spec, speech, noise, dry)


def cmd_generate(cfg, splits=("train", "test")):
    """Render every train and test scene to disk and write ``manifest.csv``."""
    snapshot_config(cfg)
    rows = []
    for split in splits:
        for seed in (cfg.train_seeds if split == "train" else cfg.test_seeds):
            sig = make_scene(seed, cfg.duration, cfg.geometry(), cfg.max_order)
            d = cfg.scene_dir(split, seed)
            write_scene(d, sig)
            s = sig.spec
            rows.append([split, seed, os.path.relpath(d, cfg.run_dir), f"{s.rt60:.6f}", f"{s.sir_db:.6f}",
                         s.noise_kind, *(f"{v:.6f}" for v in s.room_dims)])
    with open(cfg.path("manifest.csv"), "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["split", "seed", "path", "rt60", "sir_db", "noise_kind", "room_x", "room_y", "room_z"])
        w.writerows(rows)
    return rows


def iter_scenes(cfg, split):
    for seed in (cfg.train_seeds if split == "train" else cfg.test_seeds):
        yield load_scene(cfg.scene_dir(split, seed))


# ---------------------------------------------------------------------------
# estimator-driven masks
# ---------------------------------------------------------------------------


def load_model(path):
    if not os.path.exists(path):
        raise MissingArtifactError(f"model file {path} not found; run 'train' first")
    return EstimatorParams.load(path)


def model_norm(est):
    return FeatureNorm.from_dict(est.extra["norm"])


def sn_mask(est, reference):
    """Single-node mask from the reference-mic spectrogram [T, F]."""
    feats = model_norm(est)(np.abs(reference)[None])
    return infer_mask(feats, est)


class EstimatorMaskSource:
    """Masks from trained estimators.

    Step 1 uses the single-node model on the local reference channel. Step 2
    uses the multi-node model on ``[local, z_j, n_j, ...]`` magnitudes with
    failed links replaced by the sentinel; with no multi-node model the
    step-1 mask is reused.
    """

    def __init__(self, sn, mn=None, seed=0, step1=None):
        self.sn = sn
        self.mn = mn
        self.seed = seed
        self._step1 = dict(step1 or {})

    def step1_mask(self, node):
        if node.node_id not in self._step1:
            self._step1[node.node_id] = sn_mask(self.sn, node.reference)
        return self._step1[node.node_id]

    def step2_mask(self, node, received, link_ok):
        if self.mn is None:
            return self.step1_mask(node)
        mags = stack_magnitudes(node.reference, received, len(received))
        if mags.shape[0] != self.mn.config.in_channels:
            raise ShapeError(f"multi-node model expects {self.mn.config.in_channels} channels, got {mags.shape[0]}")
        feats = model_norm(self.mn)(mags, link_ok)
        rng = np.random.default_rng([self.seed, node.node_id])
        return infer_mask(feats, self.mn, rng)


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def step1_signals(scene, masks):
    """``(z, n)`` of every node after the local MWF with the given step-1 masks."""
    out = []
    for k, y in enumerate(scene.mixture):
        node = NodeState(k, y, ref=scene.ref_mic)
        out.append(step1_compress(node, masks[k]))
    return out


def scene_step1_masks(scene, mode, sn=None):
    if mode == "oracle":
        return [ideal_ratio_mask(s.data[scene.ref_mic:scene.ref_mic + 1], n.data[scene.ref_mic:scene.ref_mic + 1])
                for s, n in zip(scene.speech, scene.noise)]
    return [sn_mask(sn, y.data[scene.ref_mic]) for y in scene.mixture]


def node_examples(scene, multi_node, step1=None):
    """Per node: magnitude stack [C, T, F] and IRM target [T, F]."""
    r = scene.ref_mic
    ex = []
    for k in range(scene.n_nodes):
        y = scene.mixture[k].data[r]
        target = ideal_ratio_mask(scene.speech[k].data[r], scene.noise[k].data[r]).data
        if multi_node:
            received = [step1[j] for j in range(scene.n_nodes) if j != k]
            mags = stack_magnitudes(y, received)
        else:
            mags = np.abs(y)[None]
        ex.append((mags, target))
    return ex


class TrainingSet:
    """Windows and targets drawn from the training scenes, cached per feature type."""

    def __init__(self, cfg):
        self.cfg = cfg
        self._examples = {}

    def examples(self, multi_node, sn=None):
        key = ("mn", self.cfg.step1_masks) if multi_node else ("sn",)
        if key not in self._examples:
            ex = []
            for scene in iter_scenes(self.cfg, "train"):
                step1 = None
                if multi_node:
                    if self.cfg.step1_masks == "sn" and sn is None:
                        raise MissingArtifactError("multi-node training data needs the SN model; train SN first")
                    step1 = step1_signals(scene, scene_step1_masks(scene, self.cfg.step1_masks, sn))
                ex.append(node_examples(scene, multi_node, step1))
            self._examples[key] = ex
        return self._examples[key]

    def windows(self, multi_node, sn=None):
        """Normalised input windows [N, C, 21, F], targets [N, 21, F] and the fitted norm."""
        ex = self.examples(multi_node, sn)
        norm = FeatureNorm.fit((m for scene in ex for m, _ in scene), self.cfg.norm_mode)
        xs, ys = [], []
        for i, scene in enumerate(ex):
            for k, (mags, target) in enumerate(scene):
                T = mags.shape[1]
                if T < WINDOW:
                    raise LengthError(f"training scene has {T} frames, fewer than {WINDOW}")
                rng = np.random.default_rng([self.cfg.seed, i, k])
                starts = rng.integers(0, T - WINDOW + 1, size=self.cfg.windows_per_node)
                feats = norm(mags).astype(np.float32)
                for s in starts:
                    xs.append(feats[:, s:s + WINDOW])
                    ys.append(target[s:s + WINDOW])
        return np.stack(xs), np.stack(ys).astype(np.float32), norm


def write_gate_log(path, gate_log):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["batch", "sample"] + [f"w{c}" for c in range(gate_log[0].shape[1] if gate_log else 0)])
        for b, g in enumerate(gate_log):
            for s, row in enumerate(g):
                w.writerow([b, s] + [f"{v:.9g}" for v in row])


def cmd_train(cfg, variant, data=None):
    """Train one variant and persist its model, loss curve and gate log."""
    if variant not in VARIANTS:
        raise ConfigError(f"unknown variant {variant!r}")
    snapshot_config(cfg)
    if not os.path.exists(cfg.scene_dir("train", cfg.train_seeds[0])):
        raise MissingArtifactError(f"no training scenes under {cfg.run_dir}; run 'generate' first")
    data = data or TrainingSet(cfg)
    multi = VARIANTS[variant][0] > 1
    sn = None
    if multi and cfg.step1_masks == "sn":
        sn = load_model(cfg.model_path("SN"))
    x, y, norm = data.windows(multi, sn)
    net = cfg.net_config(variant, x.shape[-1])
    res = train(x, y, net, cfg.train_config(variant))
    res.params.extra = {"variant": variant, "norm": norm.to_dict(), "n_windows": int(len(x))}
    os.makedirs(cfg.path("models"), exist_ok=True)
    res.params.save(cfg.model_path(variant))
    res.save_losses(cfg.path("models", f"{variant}_loss.csv"))
    if res.gate_log:
        write_gate_log(cfg.path("models", f"{variant}_gates.csv"), res.gate_log)
    return res


def train_order(variants):
    """SN first, since multi-node training data is built from its masks."""
    return sorted(set(variants) - {ORACLE}, key=lambda v: (v != "SN", list(VARIANTS).index(v)))


# ---------------------------------------------------------------------------
# sweep
# ---------------------------------------------------------------------------


def scene_records(scene, result, variant, L):
    """Metrics of every node of one pipeline run."""
    r = scene.ref_mic
    comps = M.component_passthrough(scene.speech, scene.noise, result)
    recs = []
    for k, (s_out, n_out) in enumerate(comps):
        cfg = s_out.config
        s_ref = M.time_signal(ComplexSpectrogram(scene.speech[k].data[r:r + 1], cfg))
        n_ref = M.time_signal(ComplexSpectrogram(scene.noise[k].data[r:r + 1], cfg))
        s_o = M.time_signal(s_out)
        n_o = M.time_signal(n_out)
        dsir = M.delta_sir(s_o, n_o, s_ref, n_ref)
        idx = cfg.interior(s_out.n_frames)
        dry = M.align_reference(scene.dry_speech, scene.direct_delay(k))[idx]
        enh = s_o + n_o
        sdr = M.si_sdr(enh, dry)
        sdr_in = M.si_sdr(s_ref + n_ref, dry)
        recs.append(M.MetricsRecord(scene.scene_id, k, variant, L, dsir, sdr, sdr - sdr_in))
    return recs


def sweep_scene(scene, cfg, variants, models):
    """All (variant, L) pipeline runs of one scene; step-1 masks computed once."""
    recs = []
    oracle = OracleMaskSource(scene.speech, scene.noise, scene.ref_mic)
    step1 = None
    if any(v != ORACLE for v in variants):
        step1 = {k: m for k, m in enumerate(scene_step1_masks(scene, "sn", models["SN"]))}
    mixture = scene.mixture
    for variant in variants:
        if variant == ORACLE:
            source = oracle
        else:
            mn = None if variant == "SN" else models[variant]
            source = EstimatorMaskSource(models["SN"], mn, seed=scene.scene_id, step1=step1)
        for L in cfg.L_values:
            plan = sample_failures(scene.n_nodes, L, scene.scene_id, cfg.failure_mode)
            result = run_pipeline(mixture, source, plan, refs=[scene.ref_mic] * scene.n_nodes)
            recs.extend(scene_records(scene, result, variant, L))
    return recs


def cmd_sweep(cfg, variants=None, out_name="results"):
    """Failure sweep over the test scenes; writes per-record and aggregate CSVs."""
    variants = list(variants or cfg.variants)
    snapshot_config(cfg)
    models = {}
    for v in variants:
        if v == ORACLE:
            continue
        models[v] = load_model(cfg.model_path(v))
    if any(v != ORACLE for v in variants) and "SN" not in models:
        models["SN"] = load_model(cfg.model_path("SN"))
    records = []
    for scene in iter_scenes(cfg, "test"):
        records.extend(sweep_scene(scene, cfg, variants, models))
    order = {v: i for i, v in enumerate(variants)}
    records.sort(key=lambda r: (order[r.variant], r.L, r.scene_id, r.node_id))
    M.write_records(cfg.path(f"{out_name}.csv"), records)
    M.write_aggregate(cfg.path(f"{out_name}_aggregate.csv"), M.aggregate(records, variants, cfg.L_values))
    return records


def cmd_ablate(cfg):
    return cmd_sweep(cfg, ABLATION_VARIANTS, out_name="ablation")


# ---------------------------------------------------------------------------
# enhancement of user recordings
# ---------------------------------------------------------------------------


def _load_nodes(paths, stft_cfg):
    sigs = [read_wav(p) for p in paths]
    n = {s.shape[1] for s in sigs}
    if len(n) != 1:
        raise LengthError(f"node recordings differ in length: {sorted(n)}")
    return [stft(s, stft_cfg) for s in sigs]


def cmd_enhance(mixtures, out_dir, sn_model=None, mn_model=None, plan=None, speech=None, noise=None, ref_mic=0):
    """Enhance per-node mixture WAVs and write ``enhanced_node{k}.wav``.

    With ``sn_model=None`` the masks are oracle IRMs, which needs the
    speech and noise component WAVs of every node. A single node runs the
    local MWF only.
    """
    from .dsp import istft

    cfg = StftConfig()
    Y = _load_nodes(mixtures, cfg)
    n_samples = read_wav(mixtures[0]).shape[-1]
    K = len(Y)
    if sn_model is None:
        if not speech or not noise or len(speech) != K or len(noise) != K:
            raise ConfigError("oracle-mask mode needs speech and noise component WAVs for every node")
        S, N = _load_nodes(speech, cfg), _load_nodes(noise, cfg)
        if S[0].n_frames != Y[0].n_frames:
            raise LengthError("component WAVs and mixtures differ in length")
        source = OracleMaskSource(S, N, ref_mic)
    else:
        sn = load_model(sn_model) if isinstance(sn_model, str) else sn_model
        mn = None
        if K > 1 and mn_model is not None:
            mn = load_model(mn_model) if isinstance(mn_model, str) else mn_model
        source = EstimatorMaskSource(sn, mn)
    os.makedirs(out_dir, exist_ok=True)
    if K == 1:
        node = NodeState(0, Y[0], ref=ref_mic)
        z, _ = step1_compress(node, source.step1_mask(node))
        outs = [z]
    else:
        plan = plan or LinkFailurePlan.none()
        outs = run_pipeline(Y, source, plan, refs=[ref_mic] * K).outputs
    paths = []
    for k, out in enumerate(outs):
        p = os.path.join(out_dir, f"enhanced_node{k}.wav")
        x = istft(out, cfg).reshape(-1)
        write_wav(p, np.pad(x, (0, max(0, n_samples - len(x))))[:n_samples])
        paths.append(p)
    return paths


__all__ = [
    "VARIANTS", "MAIN_VARIANTS", "ABLATION_VARIANTS", "ORACLE", "ExperimentConfig", "SceneData", "write_scene",
    "load_scene", "scene_from_signals", "cmd_generate", "cmd_train", "cmd_sweep", "cmd_ablate", "cmd_enhance", "EstimatorMaskSource",
    "TrainingSet", "train_order", "sweep_scene", "scene_records",
]
