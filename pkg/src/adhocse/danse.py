"""Mask-based multichannel Wiener filtering and the two-step distributed scheme.

Every node k owns ``M_k`` microphones. In step 1 it runs a local MWF over its
own channels and broadcasts the filtered signal ``z_k`` together with the
companion noise estimate ``n_k = y_ref - z_k``. In step 2 it stacks its own
channels with the pairs received from every other node (ascending node
order) and solves a second MWF over that stack.

All covariance estimation and solving is batch (one estimate per utterance),
vectorised over frequency bins.
"""
import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .dsp import ComplexSpectrogram
from .errors import DegenerateMaskError, NumericError, ProtocolError, ShapeError
from .kernels import weighted_outer_sum
from .masks import TFMask

LOADING = 1e-9
FAILURE_MODES = ("estimator", "both")


def _data(x):
    return x.data if isinstance(x, ComplexSpectrogram) else np.asarray(x)


def _mask(m):
    return m.data if isinstance(m, TFMask) else np.asarray(m, dtype=float)


def _hermitian(R):
    return 0.5 * (R + np.conj(np.swapaxes(R, -1, -2)))


@dataclass
class CovariancePair:
    """Per-frequency mixture and noise covariances, each [F, D, D]."""

    Ryy: np.ndarray
    Rnn: np.ndarray
    frame_weights_sum: np.ndarray = None  # [F] noise weight totals

    @property
    def dim(self):
        return self.Ryy.shape[-1]

    @property
    def loading(self):
        """Diagonal loading per frequency: ``1e-9 * trace(Ryy) / D``."""
        tr = np.real(np.trace(self.Ryy, axis1=-2, axis2=-1))
        return LOADING * tr / self.dim

    def transform(self, A):
        """Covariances of ``A^H y`` for a [F, D, D'] (or [D, D']) mixing matrix."""
        A = np.asarray(A)
        if A.ndim == 2:
            A = np.broadcast_to(A, (self.Ryy.shape[0],) + A.shape)
        AH = np.conj(np.swapaxes(A, -1, -2))
        return CovariancePair(_hermitian(AH @ self.Ryy @ A), _hermitian(AH @ self.Rnn @ A),
                              self.frame_weights_sum)


@dataclass
class FilterBank:
    """One filter per frequency bin, [F, D]; output is ``w^H y``."""

    w: np.ndarray
    ref: tuple = (0, 0)  # (node, mic) realising the selection vector

    @property
    def dim(self):
        return self.w.shape[1]

    @classmethod
    def identity(cls, n_bins, dim, ref_index=0, ref=(0, 0)):
        w = np.zeros((n_bins, dim), dtype=complex)
        w[:, ref_index] = 1.0
        return cls(w, ref)

    def save(self, path):
        """Raw little-endian float64 (re, im interleaved) [F x D] plus JSON sidecar."""
        np.ascontiguousarray(self.w, dtype="<c16").tofile(path)
        with open(f"{path}.json", "w") as fh:
            json.dump({"shape": list(self.w.shape), "dtype": "complex128", "ref": list(self.ref)}, fh)

    @classmethod
    def load(cls, path):
        with open(f"{path}.json") as fh:
            meta = json.load(fh)
        w = np.fromfile(path, dtype="<c16").reshape(meta["shape"])
        return cls(w, tuple(meta["ref"]))


def estimate_covariances(signals, mask, speech_weighted_ryy=False):
    """Mask-weighted covariance estimates for a [D, T, F] stack.

    ``Ryy`` averages all frames (or, with ``speech_weighted_ryy``, weights
    them by ``m``); ``Rnn`` weights frames by ``1 - m`` and normalises by the
    weight total.
    """
    Y = _data(signals)
    m = _mask(mask)
    if Y.ndim != 3 or Y.shape[1:] != m.shape:
        raise ShapeError(f"mask {m.shape} does not match signals {Y.shape}")
    T = Y.shape[1]
    wn = 1.0 - m
    wsum = wn.sum(axis=0)
    bad = np.nonzero(wsum <= 0)[0]
    if bad.size:
        raise DegenerateMaskError(bad)
    if speech_weighted_ryy:
        ms = m.sum(axis=0)
        Ryy = weighted_outer_sum(Y, m) / np.maximum(ms, 1e-300)[:, None, None]
    else:
        Ryy = weighted_outer_sum(Y, np.ones_like(m)) / T
    Rnn = weighted_outer_sum(Y, wn) / wsum[:, None, None]
    return CovariancePair(_hermitian(Ryy), _hermitian(Rnn), wsum)


def speech_covariance(cov):
    """``Ryy - Rnn`` with negative eigenvalues clipped to zero."""
    Rss = _hermitian(cov.Ryy - cov.Rnn)
    lam, V = np.linalg.eigh(Rss)
    lam = np.maximum(lam, 0.0)
    return _hermitian((V * lam[:, None, :]) @ np.conj(np.swapaxes(V, -1, -2)))


def solve_mwf(cov, ref=0):
    """MWF ``(Ryy + delta I)^-1 (Ryy - Rnn)_+ e_ref`` per frequency, [F, D]."""
    if not (np.all(np.isfinite(cov.Ryy)) and np.all(np.isfinite(cov.Rnn))):
        raise NumericError("non-finite covariance entries")
    D = cov.dim
    if not 0 <= ref < D:
        raise ShapeError(f"reference index {ref} outside stack of dimension {D}")
    Rss = speech_covariance(cov)
    A = cov.Ryy + cov.loading[:, None, None] * np.eye(D)
    return np.linalg.solve(A, Rss[:, :, ref:ref + 1])[..., 0]


def filter_apply(signals, fb):
    """``out(t, f) = w(f)^H y(t, f)``; returns a one-channel spectrogram."""
    Y = _data(signals)
    w = fb.w if isinstance(fb, FilterBank) else np.asarray(fb)
    if Y.shape[0] != w.shape[1] or Y.shape[2] != w.shape[0]:
        raise ShapeError(f"filter {w.shape} incompatible with signals {Y.shape}")
    out = np.einsum("fd,dtf->tf", np.conj(w), Y)
    cfg = signals.config if isinstance(signals, ComplexSpectrogram) else None
    return ComplexSpectrogram(out[None], cfg)


def local_mwf(signals, mask, ref=0, speech_weighted_ryy=False):
    """Single-node MWF; returns (output spectrogram, filter bank)."""
    cov = estimate_covariances(signals, mask, speech_weighted_ryy)
    fb = FilterBank(solve_mwf(cov, ref))
    return filter_apply(signals, fb), fb


# ---------------------------------------------------------------------------
# link failures
# ---------------------------------------------------------------------------


@dataclass
class LinkFailurePlan:
    """Failed directed links ``(sender, receiver)`` and where failures act.

    ``mode="estimator"`` hides failed links from the mask estimator only;
    ``mode="both"`` also removes them from the step-2 filter stack.
    """

    failed: frozenset = frozenset()
    mode: str = "estimator"

    def __post_init__(self):
        self.failed = frozenset((int(s), int(r)) for s, r in self.failed)
        if self.mode not in FAILURE_MODES:
            raise ValueError(f"unknown failure mode {self.mode!r}")
        if any(s == r for s, r in self.failed):
            raise ValueError("a node cannot have a link to itself")

    @classmethod
    def none(cls, mode="estimator"):
        return cls(frozenset(), mode)

    @classmethod
    def all_failed(cls, n_nodes, mode="both"):
        return cls(frozenset((s, r) for s in range(n_nodes) for r in range(n_nodes) if s != r), mode)

    def link_ok(self, receiver, n_nodes):
        """Boolean vector over the other nodes, ascending, True if the link works."""
        return np.array([(j, receiver) not in self.failed for j in range(n_nodes) if j != receiver])

    def to_dict(self):
        return {"failed": [{"sender": s, "receiver": r} for s, r in sorted(self.failed)], "mode": self.mode}

    def to_json(self):
        return json.dumps(self.to_dict(), indent=2)

    @classmethod
    def from_dict(cls, d):
        return cls(frozenset((e["sender"], e["receiver"]) for e in d.get("failed", [])), d.get("mode", "estimator"))

    @classmethod
    def from_json(cls, text):
        return cls.from_dict(json.loads(text))


def sample_failures(n_nodes, n_broken, seed, mode="estimator"):
    """Per receiving node, ``n_broken`` of its incoming links chosen uniformly.

    Each receiver draws from its own generator seeded by ``(seed, node,
    n_broken)``.
    """
    failed = set()
    for r in range(n_nodes):
        senders = [j for j in range(n_nodes) if j != r]
        if n_broken > len(senders):
            raise ValueError(f"cannot break {n_broken} of {len(senders)} links")
        rng = np.random.default_rng([int(seed), r, int(n_broken)])
        for s in rng.choice(senders, size=n_broken, replace=False):
            failed.add((int(s), r))
    return LinkFailurePlan(frozenset(failed), mode)


# ---------------------------------------------------------------------------
# two-step scheme
# ---------------------------------------------------------------------------


@dataclass
class NodeState:
    node_id: int
    local: ComplexSpectrogram  # [M_k, T, F]
    link_ok: np.ndarray = None
    ref: int = 0
    local_filter: FilterBank = None
    z: ComplexSpectrogram = None
    n_tilde: ComplexSpectrogram = None

    @property
    def reference(self):
        return self.local.data[self.ref]


def step1_compress(node, mask, speech_weighted_ryy=False):
    """Local MWF at ``node``; stores and returns ``(z, n_tilde)``."""
    z, fb = local_mwf(node.local, mask, node.ref, speech_weighted_ryy)
    fb.ref = (node.node_id, node.ref)
    node.local_filter = fb
    node.z = z
    node.n_tilde = ComplexSpectrogram(node.reference[None] - z.data, node.local.config)
    return node.z, node.n_tilde


def stack_inputs(node, received, link_ok=None, mode="estimator"):
    """Step-2 stack ``[y_k; z_j, n_j, ...]`` and the indices of kept links.

    ``received`` holds one ``(z_j, n_j)`` pair per other node (ascending) or
    ``None`` for a link whose signals never arrived. Under ``"estimator"`` the
    stack always carries every pair; under ``"both"`` failed links are left
    out.
    """
    if mode not in FAILURE_MODES:
        raise ValueError(f"unknown failure mode {mode!r}")
    link_ok = np.ones(len(received), dtype=bool) if link_ok is None else np.asarray(link_ok, dtype=bool)
    if len(link_ok) != len(received):
        raise ProtocolError(f"link state has {len(link_ok)} entries for {len(received)} received pairs")
    parts = [node.local.data]
    kept = []
    for j, (ok, pair) in enumerate(zip(link_ok, received)):
        if mode == "both" and not ok:
            continue
        if pair is None:
            raise ProtocolError(f"link {j} marked usable but no signals were received")
        z, n = pair
        parts.append(_data(z).reshape(1, *node.local.data.shape[1:]))
        parts.append(_data(n).reshape(1, *node.local.data.shape[1:]))
        kept.append(j)
    return ComplexSpectrogram(np.concatenate(parts, axis=0), node.local.config), kept


def step2_enhance(node, received, mask, mode="estimator", n_nodes=None, speech_weighted_ryy=False):
    """Second MWF over the stacked local and received signals.

    Returns ``(output, filter_bank, kept_links)``.
    """
    if n_nodes is not None and len(received) != n_nodes - 1:
        raise ProtocolError(f"expected {n_nodes - 1} received entries, got {len(received)}")
    link_ok = node.link_ok if node.link_ok is not None else np.ones(len(received), dtype=bool)
    stack, kept = stack_inputs(node, received, link_ok, mode)
    out, fb = local_mwf(stack, mask, node.ref, speech_weighted_ryy)
    fb.ref = (node.node_id, node.ref)
    return out, fb, kept


# ---------------------------------------------------------------------------
# mask sources
# ---------------------------------------------------------------------------


class OracleMaskSource:
    """Ideal ratio masks at each node's reference microphone, for both steps."""

    name = "oracle"

    def __init__(self, speech, noise, ref=0):
        from .masks import ideal_ratio_mask

        self.masks = [ideal_ratio_mask(s.data[ref:ref + 1], n.data[ref:ref + 1]) for s, n in zip(speech, noise)]

    def step1_mask(self, node):
        return self.masks[node.node_id]

    def step2_mask(self, node, received, link_ok):
        return self.masks[node.node_id]


@dataclass
class PipelineResult:
    outputs: list  # step-2 ComplexSpectrogram per node
    step1_outputs: list  # z per node
    n_tilde: list
    step1_filters: list
    step2_filters: list
    kept_links: list
    step1_masks: list
    step2_masks: list
    plan: LinkFailurePlan
    refs: list = field(default_factory=list)


def run_pipeline(node_signals, masks, plan=None, speech_weighted_ryy=False, refs=None):
    """Run step 1 at every node, exchange, then step 2 at every node.

    ``node_signals`` is a list of [M_k, T, F] spectrograms; ``masks`` is a
    mask source with ``step1_mask(node)`` and ``step2_mask(node, received,
    link_ok)``.
    """
    K = len(node_signals)
    plan = plan or LinkFailurePlan.none()
    refs = refs or [0] * K
    nodes = [NodeState(k, node_signals[k], plan.link_ok(k, K), refs[k]) for k in range(K)]
    m1 = []
    for node in nodes:
        m = masks.step1_mask(node)
        step1_compress(node, m, speech_weighted_ryy)
        m1.append(m)
    outputs, fbs, kept_all, m2 = [], [], [], []
    for node in nodes:
        received = []
        for j in range(K):
            if j == node.node_id:
                continue
            ok = (j, node.node_id) not in plan.failed
            if plan.mode == "both" and not ok:
                received.append(None)
            else:
                received.append((nodes[j].z, nodes[j].n_tilde))
        m = masks.step2_mask(node, received, node.link_ok)
        out, fb, kept = step2_enhance(node, received, m, plan.mode, K, speech_weighted_ryy)
        outputs.append(out)
        fbs.append(fb)
        kept_all.append(kept)
        m2.append(m)
    return PipelineResult(
        outputs=outputs,
        step1_outputs=[n.z for n in nodes],
        n_tilde=[n.n_tilde for n in nodes],
        step1_filters=[n.local_filter for n in nodes],
        step2_filters=fbs,
        kept_links=kept_all,
        step1_masks=m1,
        step2_masks=m2,
        plan=plan,
        refs=list(refs),
    )


def replay_pipeline(node_signals, result):
    """Apply the frozen filters of ``result`` to other signals (e.g. one component).

    Returns ``(step2_outputs, step1_outputs)``; the map is linear in the input.
    """
    K = len(node_signals)
    z, nt = [], []
    for k in range(K):
        zk = filter_apply(node_signals[k], result.step1_filters[k])
        z.append(zk)
        ref = _data(node_signals[k])[result.refs[k]]
        nt.append(ComplexSpectrogram(ref[None] - zk.data, zk.config))
    outs = []
    for k in range(K):
        others = [j for j in range(K) if j != k]
        parts = [_data(node_signals[k])]
        for idx in result.kept_links[k]:
            j = others[idx]
            parts += [z[j].data, nt[j].data]
        stack = np.concatenate(parts, axis=0)
        outs.append(filter_apply(ComplexSpectrogram(stack, z[k].config), result.step2_filters[k]))
    return outs, z


# ---------------------------------------------------------------------------
# iterative batch scheme and centralized reference
# ---------------------------------------------------------------------------


class ConvergenceWarning(UserWarning):
    pass


@dataclass
class DanseResult:
    filters: list  # FilterBank over each node's step-2 stack
    effective: list  # [F, M_total] equivalent filter on all microphones
    outputs: list
    iterations: int
    residual: float
    converged: bool
    history: list = field(default_factory=list)


def _node_offsets(sizes):
    return np.concatenate([[0], np.cumsum(sizes)])


def _stack_matrix(k, local_parts, sizes, refs, n_bins):
    """[F, M_total, D_k] matrix A with ``ytilde_k = A^H y``."""
    off = _node_offsets(sizes)
    M = off[-1]
    K = len(sizes)
    D = sizes[k] + 2 * (K - 1)
    A = np.zeros((n_bins, M, D), dtype=complex)
    for m in range(sizes[k]):
        A[:, off[k] + m, m] = 1.0
    col = sizes[k]
    for j in range(K):
        if j == k:
            continue
        wj = local_parts[j]  # [F, M_j]
        A[:, off[j]:off[j + 1], col] = wj
        A[:, off[j]:off[j + 1], col + 1] = -wj
        A[:, off[j] + refs[j], col + 1] += 1.0
        col += 2
    return A


def centralized_mwf(full_cov, ref_index):
    """MWF over all microphones for the global reference index."""
    return FilterBank(solve_mwf(full_cov, ref_index))


def iterate_danse(node_signals, masks=None, max_iters=20, tol=1e-6, covariances=None, refs=None):
    """Batch DANSE iterations with target and noise exchange.

    Iteration 1 is exactly :func:`run_pipeline` (local MWFs, then every node
    solves over its stack). Later iterations update nodes one at a time in
    ascending order; each node compresses with the local-microphone part of
    its latest filter. Stops when the relative change of all outputs falls
    below ``tol``.

    Covariances come from ``masks`` (one per node, applied to each node's
    stack) or, when ``covariances`` is given, from that full-array pair
    transformed exactly into each node's stack ("oracle" statistics).
    """
    Y = [_data(s) for s in node_signals]
    cfg = node_signals[0].config if isinstance(node_signals[0], ComplexSpectrogram) else None
    K = len(Y)
    sizes = [y.shape[0] for y in Y]
    refs = refs or [0] * K
    F = Y[0].shape[2]
    off = _node_offsets(sizes)
    Yall = np.concatenate(Y, axis=0)
    if masks is not None and isinstance(masks, (TFMask, np.ndarray)):
        masks = [masks] * K

    def node_cov(k, A):
        if covariances is not None:
            return covariances.transform(A)
        stack = np.einsum("fmd,mtf->dtf", np.conj(A), Yall)
        return estimate_covariances(stack, masks[k])

    def local_cov(k):
        A = np.zeros((F, off[-1], sizes[k]), dtype=complex)
        for m in range(sizes[k]):
            A[:, off[k] + m, m] = 1.0
        return node_cov(k, A), A

    # step 1: local MWFs
    local_parts = []
    for k in range(K):
        cov, _ = local_cov(k)
        local_parts.append(solve_mwf(cov, refs[k]))

    def solve_node(k):
        A = _stack_matrix(k, local_parts, sizes, refs, F)
        w = solve_mwf(node_cov(k, A), refs[k])
        eff = np.einsum("fmd,fd->fm", A, w)
        return w, eff

    def outputs_of(effs):
        return [np.einsum("fm,mtf->tf", np.conj(e), Yall) for e in effs]

    ws, effs = zip(*[solve_node(k) for k in range(K)])
    ws, effs = list(ws), list(effs)
    outs = outputs_of(effs)
    history = []
    residual = np.inf
    it = 1
    converged = K == 1 or not np.isfinite(tol)
    while not converged and it < max_iters:
        it += 1
        for k in range(K):
            local_parts[k] = ws[k][:, : sizes[k]]
            ws[k], effs[k] = solve_node(k)
        new = outputs_of(effs)
        num = sum(np.sum(np.abs(a - b) ** 2) for a, b in zip(new, outs))
        den = sum(np.sum(np.abs(a) ** 2) for a in new)
        residual = float(np.sqrt(num / max(den, 1e-300)))
        history.append(residual)
        outs = new
        converged = residual < tol
    if not converged:
        warnings.warn(f"DANSE did not converge in {max_iters} iterations (residual {residual:.3g})",
                      ConvergenceWarning)
    return DanseResult(
        filters=[FilterBank(w, (k, refs[k])) for k, w in enumerate(ws)],
        effective=effs,
        outputs=[ComplexSpectrogram(o[None], cfg) for o in outs],
        iterations=it,
        residual=residual if it > 1 else 0.0 if K == 1 else residual,
        converged=converged,
        history=history,
    )
