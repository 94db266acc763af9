"""Enhancement metrics via exact component decomposition, SI-SDR and aggregation."""
import csv
import math
import warnings
from collections import defaultdict
from dataclasses import astuple, dataclass, fields

import numpy as np

from .danse import replay_pipeline
from .dsp import ComplexSpectrogram, istft

DB_CAP = 100.0
RECORD_COLUMNS = ("scene_id", "node_id", "variant", "L", "delta_sir_db", "si_sdr_db", "delta_si_sdr_db")
METRICS = ("delta_sir_db", "si_sdr_db", "delta_si_sdr_db")


class MetricCapWarning(UserWarning):
    pass


@dataclass
class MetricsRecord:
    scene_id: int
    node_id: int
    variant: str
    L: int
    delta_sir_db: float
    si_sdr_db: float
    delta_si_sdr_db: float


def _energy(x):
    x = x.data if isinstance(x, ComplexSpectrogram) else np.asarray(x)
    return float(np.sum(np.abs(x) ** 2))


def ratio_db(num, den):
    """``10 log10(num / den)`` capped to +-100 dB; returns (value, capped)."""
    if den <= 0 and num <= 0:
        return 0.0, True
    if den <= 0:
        return DB_CAP, True
    if num <= 0:
        return -DB_CAP, True
    v = 10 * math.log10(num / den)
    if abs(v) > DB_CAP:
        return math.copysign(DB_CAP, v), True
    return v, False


def sir_db(s, n):
    return ratio_db(_energy(s), _energy(n))


def delta_sir(s_out, n_out, s_ref, n_ref, with_flag=False):
    """SIR of the output components minus SIR of the reference components (dB)."""
    out, c1 = sir_db(s_out, n_out)
    ref, c2 = sir_db(s_ref, n_ref)
    capped = c1 or c2
    if capped:
        warnings.warn("zero-energy component; SIR capped at +-100 dB", MetricCapWarning)
    d = out - ref
    return (d, capped) if with_flag else d


def si_sdr(estimate, reference):
    """Scale-invariant SDR (dB) of ``estimate`` against ``reference``, capped at +-100."""
    e = np.asarray(estimate, dtype=np.float64)
    r = np.asarray(reference, dtype=np.float64)
    if e.shape != r.shape:
        raise ValueError(f"length mismatch {e.shape} vs {r.shape}")
    rr = float(np.dot(r, r))
    if rr == 0:
        raise ValueError("reference signal has zero energy")
    target = (np.dot(e, r) / rr) * r
    resid = e - target
    return ratio_db(float(np.dot(target, target)), float(np.dot(resid, resid)))[0]


def align_reference(dry, delay, length=None):
    """``dry`` delayed by ``delay`` samples (fractional allowed), same length by default."""
    dry = np.asarray(dry, dtype=np.float64)
    length = len(dry) if length is None else length
    n = int(2 ** np.ceil(np.log2(len(dry) + abs(delay) + 64)))
    f = np.fft.rfftfreq(n)
    out = np.fft.irfft(np.fft.rfft(dry, n) * np.exp(-2j * np.pi * f * delay), n)
    return out[:length] if length <= n else np.pad(out, (0, length - n))


def component_passthrough(speech_nodes, noise_nodes, result):
    """Speech-only and noise-only outputs of every node's frozen filters.

    Returns a list of ``(s_out, n_out)`` spectrogram pairs; by linearity
    ``s_out + n_out`` equals the enhanced output.
    """
    if not result.step2_filters or not result.step1_filters:
        raise ValueError("pipeline result carries no frozen filters")
    s_out, _ = replay_pipeline(speech_nodes, result)
    n_out, _ = replay_pipeline(noise_nodes, result)
    return list(zip(s_out, n_out))


def write_records(path, records):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_COLUMNS)
        for r in records:
            w.writerow([_fmt(v) for v in astuple(r)])


def read_records(path):
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(MetricsRecord(int(row["scene_id"]), int(row["node_id"]), row["variant"], int(row["L"]),
                                     float(row["delta_sir_db"]), float(row["si_sdr_db"]),
                                     float(row["delta_si_sdr_db"])))
    return out


def _fmt(v):
    if isinstance(v, float):
        return f"{v:.10g}"
    return str(v)


@dataclass
class CellStats:
    variant: str
    L: int
    metric: str
    n: int
    mean: float
    stderr: float
    ci_low: float
    ci_high: float
    status: str = "ok"


def mean_ci(values, z=1.96):
    """Mean, standard error and normal-approximation confidence interval."""
    v = np.asarray(values, dtype=np.float64)
    if v.size == 0:
        return math.nan, math.nan, math.nan, math.nan
    m = float(v.mean())
    se = float(v.std(ddof=1) / math.sqrt(v.size)) if v.size > 1 else math.nan
    return m, se, m - z * se, m + z * se


def aggregate(records, variants=None, Ls=None, metrics=METRICS):
    """Per (variant, L, metric) statistics; every record weighs the same.

    Cells named in ``variants`` x ``Ls`` without records are reported with
    status ``"missing"``; cells with a single record get status
    ``"single"`` and no interval.
    """
    cells = defaultdict(list)
    for r in records:
        cells[(r.variant, r.L)].append(r)
    keys = sorted(cells)
    if variants is not None and Ls is not None:
        keys = [(v, L) for v in variants for L in Ls]
    out = []
    for v, L in keys:
        recs = cells.get((v, L), [])
        for metric in metrics:
            vals = [getattr(r, metric) for r in recs]
            m, se, lo, hi = mean_ci(vals)
            status = "missing" if not vals else "single" if len(vals) == 1 else "ok"
            out.append(CellStats(v, L, metric, len(vals), m, se, lo, hi, status))
    return out


def write_aggregate(path, stats):
    names = [f.name for f in fields(CellStats)]
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(names)
        for s in stats:
            w.writerow([_fmt(getattr(s, n)) for n in names])


def time_signal(spec, n_frames=None):
    """Interior samples of ``istft(spec)`` (those covered by overlapping frames)."""
    x = istft(spec)
    cfg = spec.config
    T = spec.n_frames if n_frames is None else n_frames
    return x[..., cfg.interior(T)]
