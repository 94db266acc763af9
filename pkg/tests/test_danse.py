import warnings

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adhocse.danse import (CovariancePair, FilterBank, LinkFailurePlan, NodeState, OracleMaskSource,
                           centralized_mwf, estimate_covariances, filter_apply, iterate_danse, local_mwf,
                           run_pipeline, sample_failures, solve_mwf, stack_inputs, step1_compress, step2_enhance)
from adhocse.dsp import ComplexSpectrogram
from adhocse.errors import DegenerateMaskError, NumericError, ProtocolError
from adhocse.masks import ideal_ratio_mask
from adhocse.metrics import component_passthrough, sir_db
from synth import cgauss, rank1_scene


def test_zero_mask_gives_rnn_equal_ryy(rng):
    Y = cgauss(rng, (3, 50, 4))
    cov = estimate_covariances(Y, np.zeros((50, 4)))
    np.testing.assert_array_equal(cov.Rnn, cov.Ryy)


def test_single_channel_variance():
    rng = np.random.default_rng(5)
    Y = rng.standard_normal((1, 10000, 2)) * 1.7
    cov = estimate_covariances(Y, np.zeros((10000, 2)))
    np.testing.assert_allclose(cov.Rnn[:, 0, 0].real, 1.7 ** 2, rtol=0.05)


def test_correlated_channels_rank_one(rng):
    x = cgauss(rng, (1, 200, 3))
    cov = estimate_covariances(np.concatenate([x, 2 * x]), np.zeros((200, 3)))
    lam = np.linalg.eigvalsh(cov.Ryy)
    assert np.all(lam[:, 0] <= 10 * cov.loading)
    np.testing.assert_array_equal(cov.Ryy, np.conj(np.swapaxes(cov.Ryy, 1, 2)))


def test_degenerate_mask_names_bins(rng):
    m = np.full((20, 5), 0.5)
    m[:, 3] = 1.0
    with pytest.raises(DegenerateMaskError) as e:
        estimate_covariances(cgauss(rng, (2, 20, 5)), m)
    assert e.value.bins == [3]


def test_solve_no_noise_is_reference(rng):
    Y = cgauss(rng, (3, 100, 4))
    cov = estimate_covariances(Y, np.zeros((100, 4)))
    cov = CovariancePair(cov.Ryy, np.zeros_like(cov.Ryy))
    w = solve_mwf(cov, 1)
    np.testing.assert_allclose(w, np.eye(3)[1][None].repeat(4, 0), atol=1e-6)


def test_solve_no_speech_is_zero(rng):
    cov = estimate_covariances(cgauss(rng, (3, 100, 4)), np.zeros((100, 4)))
    assert np.max(np.abs(solve_mwf(cov, 0))) <= 1e-6


def test_rank1_closed_form():
    rng = np.random.default_rng(3)
    F, D, s2 = 5, 2, 2.5
    h = cgauss(rng, (F, D))
    Ryy = s2 * np.einsum("fm,fn->fmn", h, np.conj(h)) + np.eye(D)
    w = solve_mwf(CovariancePair(Ryy, np.broadcast_to(np.eye(D), (F, D, D)).copy()), 0)
    # Sherman-Morrison: (I + s2 h h^H)^-1 s2 h h^H e = s2 h conj(h_0) / (1 + s2 |h|^2)
    closed = s2 * h * np.conj(h[:, :1]) / (1 + s2 * np.sum(np.abs(h) ** 2, axis=1, keepdims=True))
    np.testing.assert_allclose(w, closed, rtol=1e-6, atol=1e-8)


def test_non_finite_covariance():
    R = np.eye(2)[None].astype(complex)
    R[0, 0, 0] = np.nan
    with pytest.raises(NumericError):
        solve_mwf(CovariancePair(R, np.eye(2)[None]), 0)


def test_mwf_optimality_under_perturbation():
    _, _, _, cov, h = rank1_scene((3,), T=10, F=4, seed=2)
    w = solve_mwf(cov, 0)
    Rss = cov.Ryy - cov.Rnn

    def mse(v):
        return np.real(np.einsum("fd,fde,fe->f", np.conj(v), cov.Ryy, v)
                       - 2 * np.real(np.einsum("fd,fd->f", np.conj(v), Rss[:, :, 0])) + Rss[:, 0, 0])

    base = mse(w)
    rng = np.random.default_rng(0)
    for _ in range(20):
        d = cgauss(rng, w.shape)
        assert np.all(mse(w + 1e-3 * d / np.linalg.norm(d)) >= base - 1e-9)


def test_filter_apply_reference_and_zero(rng):
    Y = ComplexSpectrogram(cgauss(rng, (4, 30, 6)))
    out = filter_apply(Y, FilterBank.identity(6, 4, 2))
    np.testing.assert_array_equal(out.data[0], Y.data[2])
    assert not np.any(filter_apply(Y, FilterBank(np.zeros((6, 4), complex))).data)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2 ** 31))
def test_filter_linearity(seed):
    r = np.random.default_rng(seed)
    s, n = cgauss(r, (3, 20, 5)), cgauss(r, (3, 20, 5))
    fb = FilterBank(cgauss(r, (5, 3)))
    lhs = filter_apply(s + n, fb).data
    rhs = filter_apply(s, fb).data + filter_apply(n, fb).data
    assert np.max(np.abs(lhs - rhs)) <= 1e-12 * np.max(np.abs(rhs))


def test_filterbank_io(tmp_path, rng):
    fb = FilterBank(cgauss(rng, (7, 3)), (2, 0))
    fb.save(tmp_path / "fb.bin")
    back = FilterBank.load(tmp_path / "fb.bin")
    np.testing.assert_array_equal(back.w, fb.w)
    assert back.ref == (2, 0)


def oracle_masks(speech, noise):
    return [ideal_ratio_mask(s.data[0], n.data[0]) for s, n in zip(speech, noise)]


def test_step1_exchange_identity_and_gain():
    Y, S, N, _, _ = rank1_scene((4,), seed=1)
    node = NodeState(0, Y[0])
    z, nt = step1_compress(node, oracle_masks(S, N)[0])
    y = Y[0].data[0]
    np.testing.assert_array_equal(nt.data[0], y - z.data[0])
    # the float sum z + n can miss y by one rounding step
    tol = np.finfo(float).eps * np.maximum(np.abs(z.data[0]), np.abs(y))
    assert np.all(np.abs(z.data[0] + nt.data[0] - y) <= 2 * tol)
    s_out = filter_apply(S[0], node.local_filter)
    n_out = filter_apply(N[0], node.local_filter)
    assert sir_db(s_out, n_out)[0] >= sir_db(S[0].data[0], N[0].data[0])[0]


def test_step1_noise_free():
    _, S, N, _, _ = rank1_scene((4,), seed=2)
    # speech pauses in every other block of 20 frames, noise far below speech
    gate = (np.arange(S[0].n_frames) // 20 % 2)[None, :, None]
    s = ComplexSpectrogram(S[0].data * gate)
    y = ComplexSpectrogram(s.data + 1e-6 * N[0].data)
    node = NodeState(0, y)
    z, _ = step1_compress(node, ideal_ratio_mask(s.data[0], 1e-6 * N[0].data[0]))
    ref = s.data[0]
    assert np.linalg.norm(z.data[0] - ref) / np.linalg.norm(ref) <= 0.1


def test_stack_dimension_contract():
    Y, S, N, _, _ = rank1_scene((4, 4, 4, 4), T=60, seed=3)
    src = OracleMaskSource(S, N)
    for L in range(4):
        res = run_pipeline(Y, src, sample_failures(4, L, 9))
        assert all(fb.dim == 10 for fb in res.step2_filters)
    res = run_pipeline(Y, src, sample_failures(4, 2, 9, mode="both"))
    assert all(fb.dim == 4 + 2 * 1 for fb in res.step2_filters)


def test_step2_protocol_error():
    Y, S, N, _, _ = rank1_scene((2, 2, 2), T=40, seed=4)
    node = NodeState(0, Y[0])
    step1_compress(node, oracle_masks(S, N)[0])
    with pytest.raises(ProtocolError):
        step2_enhance(node, [(node.z, node.n_tilde)], oracle_masks(S, N)[0], n_nodes=3)


def test_single_node_reduces_to_local_mwf():
    Y, S, N, _, _ = rank1_scene((4,), seed=5)
    src = OracleMaskSource(S, N)
    res = run_pipeline(Y, src)
    out, _ = local_mwf(Y[0], src.masks[0])
    np.testing.assert_array_equal(res.outputs[0].data, out.data)


def test_all_failed_both_mode_is_independent_local():
    Y, S, N, _, _ = rank1_scene((3, 3, 3), T=80, seed=6)
    src = OracleMaskSource(S, N)
    res = run_pipeline(Y, src, LinkFailurePlan.all_failed(3, "both"))
    for k in range(3):
        out, _ = local_mwf(Y[k], src.masks[k])
        np.testing.assert_array_equal(res.outputs[k].data, out.data)


def test_pipeline_deterministic():
    Y, S, N, _, _ = rank1_scene((2, 2), T=50, seed=7)
    a = run_pipeline(Y, OracleMaskSource(S, N), sample_failures(2, 1, 3))
    b = run_pipeline(Y, OracleMaskSource(S, N), sample_failures(2, 1, 3))
    for x, y in zip(a.outputs, b.outputs):
        np.testing.assert_array_equal(x.data, y.data)


def test_step2_beats_step1_on_average():
    gains = []
    for seed in range(20):
        Y, S, N, _, _ = rank1_scene((4, 4, 4, 4), T=120, F=5, seed=100 + seed, speech_var=0.5)
        res = run_pipeline(Y, OracleMaskSource(S, N))
        comps = component_passthrough(S, N, res)
        for k, (s2, n2) in enumerate(comps):
            s1 = filter_apply(S[k], res.step1_filters[k])
            n1 = filter_apply(N[k], res.step1_filters[k])
            gains.append(sir_db(s2, n2)[0] - sir_db(s1, n1)[0])
    assert np.mean(gains) >= 0


def test_link_plan_json_and_sampling():
    plan = sample_failures(4, 2, seed=11)
    assert all(sum(not ok for ok in plan.link_ok(r, 4)) == 2 for r in range(4))
    assert LinkFailurePlan.from_json(plan.to_json()) == plan
    assert sample_failures(4, 2, seed=11) == plan
    assert sample_failures(4, 0, seed=11).failed == frozenset()
    with pytest.raises(ValueError):
        sample_failures(4, 4, seed=0)
    with pytest.raises(ValueError):
        LinkFailurePlan(frozenset({(1, 1)}))


def test_failure_choice_uniform():
    counts = np.zeros(3)
    for seed in range(600):
        plan = sample_failures(4, 1, seed)
        counts += ~plan.link_ok(0, 4)
    assert np.all(np.abs(counts / 600 - 1 / 3) < 0.06)


def test_stack_estimator_mode_keeps_failed_links():
    Y, S, N, _, _ = rank1_scene((2, 2, 2), T=40, seed=8)
    node = NodeState(0, Y[0], link_ok=np.array([False, True]))
    pairs = [(Y[1].data[:1], Y[1].data[1:]), (Y[2].data[:1], Y[2].data[1:])]
    stack, kept = stack_inputs(node, pairs, node.link_ok, "estimator")
    assert stack.n_channels == 6 and kept == [0, 1]
    stack, kept = stack_inputs(node, [None, pairs[1]], node.link_ok, "both")
    assert stack.n_channels == 4 and kept == [1]


def centralized_outputs(Y, cov, sizes):
    Yall = np.concatenate([y.data for y in Y])
    off = np.concatenate([[0], np.cumsum(sizes)])
    outs = []
    for k in range(len(sizes)):
        w = centralized_mwf(cov, off[k]).w
        outs.append(np.einsum("fm,mtf->tf", np.conj(w), Yall))
    return outs


def test_iterate_danse_matches_centralized():
    sizes = (4, 4)
    Y, _, _, cov, _ = rank1_scene(sizes, T=200, F=6, seed=9)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        res = iterate_danse(Y, covariances=cov, max_iters=20, tol=1e-12)
    ref = centralized_outputs(Y, cov, sizes)
    for out, c in zip(res.outputs, ref):
        assert np.linalg.norm(out.data[0] - c) / np.linalg.norm(c) <= 1e-3


def test_iterate_single_node_and_infinite_tol():
    Y, S, N, _, _ = rank1_scene((3,), T=50, seed=10)
    masks = oracle_masks(S, N)
    res = iterate_danse(Y, masks)
    assert res.iterations == 1 and res.converged
    Y, S, N, _, _ = rank1_scene((2, 2, 2), T=60, seed=11)
    masks = oracle_masks(S, N)
    res = iterate_danse(Y, masks, tol=np.inf)
    pipe = run_pipeline(Y, OracleMaskSource(S, N))
    assert res.iterations == 1
    for a, b in zip(res.outputs, pipe.outputs):
        np.testing.assert_allclose(a.data, b.data, rtol=1e-9, atol=1e-12)
