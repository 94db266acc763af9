import itertools

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from adhocse.errors import GenerationError, GeometryError, ShapeError
from adhocse.scene import (SPEED_OF_SOUND, GeometryConfig, SceneSpec, image_sources, ltass_filter, render_scene,
                           sabine_absorption, sample_scene, simulate_rir, synth_source, validate_spec)


def box_spec(room, rt60=0.3, sir=3.0):
    room = np.asarray(room, float)
    return SceneSpec(room, rt60, room[None] / 2, np.full((1, 1, 3), 1.0),
                     np.array([room / 2, room / 3]), sir, 0)


def pairwise_ok(spec, d=0.5):
    pts = np.vstack([spec.source_positions, spec.node_centers])
    dist = np.linalg.norm(pts[:, None] - pts[None], axis=-1) + np.eye(len(pts)) * 1e9
    return dist.min() >= d and np.all(pts >= d) and np.all(pts <= spec.room_dims - d)


def test_sample_seed7_geometry():
    spec = sample_scene(7)
    assert spec.node_positions.shape == (4, 4, 3)
    assert pairwise_ok(spec)
    validate_spec(spec)


def test_sample_deterministic():
    a, b = sample_scene(11), sample_scene(11)
    assert a.to_json() == b.to_json()


def test_tiny_room_fails():
    with pytest.raises(GenerationError):
        sample_scene(0, room_dims=(1.0, 1.0, 1.0))


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 10 ** 6))
def test_generated_specs_valid(seed):
    spec = sample_scene(seed)
    assert pairwise_ok(spec)
    validate_spec(spec)
    mic_r = np.linalg.norm(spec.node_positions - spec.node_centers[:, None], axis=-1)
    np.testing.assert_allclose(mic_r, GeometryConfig().mic_radius)


def test_spec_json_roundtrip(tmp_path):
    spec = sample_scene(3)
    spec.save(tmp_path / "s.json")
    back = SceneSpec.load(tmp_path / "s.json")
    assert back.to_json() == spec.to_json()
    assert set(spec.to_dict()) >= {"room_dims", "rt60", "nodes", "sources", "sir_db", "seed"}


def test_validate_rejects_close_points():
    spec = sample_scene(5)
    spec.source_positions[1] = spec.source_positions[0] + 0.1
    with pytest.raises(GeometryError):
        validate_spec(spec)


def test_sabine_oracle():
    # V = 90, S = 2(30 + 18 + 15) = 126
    assert sabine_absorption((6.0, 5.0, 3.0), 0.3) == pytest.approx(0.161 * 90 / (126 * 0.3), rel=1e-12)
    assert sabine_absorption((6.0, 5.0, 3.0), 0.3) == pytest.approx(0.3833333333, rel=1e-9)


def test_free_field_delay():
    spec = box_spec((10.0, 10.0, 10.0))
    h = simulate_rir(spec, (3.0, 5.0, 5.0), (6.43, 5.0, 5.0), max_order=0)
    assert abs(int(np.argmax(np.abs(h))) - round(3.43 / 343 * 16000)) <= 1
    assert np.max(np.abs(h)) == pytest.approx(1 / (4 * np.pi * 3.43), rel=0.05)


def test_first_order_images_by_hand():
    room = np.array([4.0, 4.0, 4.0])
    src = np.array([2.0, 2.0, 1.5])
    # hand enumeration: mirror through each of the 6 walls
    hand = []
    for ax in range(3):
        lo, hi = src.copy(), src.copy()
        lo[ax] = -src[ax]
        hi[ax] = 2 * room[ax] - src[ax]
        hand += [lo, hi]
    pos, order = image_sources(room, src, 1)
    first = pos[order == 1]
    assert len(first) == 6 and np.sum(order == 0) == 1
    key = lambda p: tuple(np.round(p, 9))
    assert sorted(map(key, first)) == sorted(map(key, hand))
    np.testing.assert_allclose(pos[order == 0][0], src)


def test_first_order_rir_peaks():
    room = np.array([4.0, 4.0, 4.0])
    spec = box_spec(room)
    src, mic = np.array([2.0, 2.0, 2.0]), np.array([2.0, 2.0, 1.0])
    h = simulate_rir(spec, src, mic, max_order=1, fractional=False)
    imgs = [src.copy()]
    for ax, wall in itertools.product(range(3), (0, 1)):
        p = src.copy()
        p[ax] = -src[ax] if wall == 0 else 2 * room[ax] - src[ax]
        imgs.append(p)
    delays = sorted({int(round(np.linalg.norm(p - mic) / SPEED_OF_SOUND * 16000)) for p in imgs})
    assert sorted(np.nonzero(h)[0].tolist()) == delays


def test_rir_outside_room():
    spec = box_spec((4.0, 4.0, 3.0))
    with pytest.raises(GeometryError):
        simulate_rir(spec, (5.0, 1.0, 1.0), (1.0, 1.0, 1.0))


def _tail_db(h, rt60, fs=16000):
    d = int(np.argmax(np.abs(h)))
    direct = np.sum(h[max(0, d - 16):d + 17] ** 2)
    a, b = int(rt60 * fs), int((rt60 + 0.05) * fs)
    tail = np.sum(h[a:b] ** 2)
    return np.inf if tail == 0 else 10 * np.log10(direct / tail)


def test_tail_decay_default_order():
    spec = sample_scene(2)
    h = simulate_rir(spec, spec.source_positions[0], spec.node_positions[0, 0])
    assert _tail_db(h, spec.rt60) >= 45


@pytest.mark.parametrize("side,rt60", [(4.0, 0.2), (5.0, 0.3), (6.0, 0.4)])
def test_tail_decay_full_order_cube(side, rt60):
    room = np.full(3, side)
    spec = box_spec(room, rt60)
    h = simulate_rir(spec, room * [0.55, 0.45, 0.4], room * [0.25, 0.35, 0.3], max_order=30)
    assert 45 <= _tail_db(h, rt60) <= 65


def test_white_source():
    x = synth_source("white", 1.0, 3)
    assert x.shape == (16000,)
    assert abs(x.mean()) < 0.05
    np.testing.assert_array_equal(x, synth_source("white", 1.0, 3))


def band_energy(x, lo, hi, fs=16000):
    P = np.abs(np.fft.rfft(x)) ** 2
    f = np.fft.rfftfreq(len(x), 1 / fs)
    return P[(f >= lo) & (f < hi)].sum()


@pytest.mark.parametrize("kind", ["speech_shaped_noise", "speech", "babble_surrogate"])
def test_speech_shaped_tilt(kind):
    x = synth_source(kind, 2.0, 9)
    assert band_energy(x, 100, 1000) > band_energy(x, 4000, 8000)


def test_ltass_filter_is_documented_length():
    assert len(ltass_filter()) == 257


def test_unknown_kind():
    with pytest.raises(ValueError):
        synth_source("violin", 1.0, 0)


def test_render_sir_and_additivity():
    spec = sample_scene(4)
    s = synth_source("speech", 0.5, 1)
    n = synth_source("white", 0.5, 2)
    sig = render_scene(spec, s, n, max_order=3)
    ratio = np.sum(sig.dry_speech ** 2) / np.sum(sig.dry_noise ** 2)
    assert ratio == pytest.approx(10 ** (spec.sir_db / 10), rel=1e-10)
    np.testing.assert_array_equal(sig.mixture, sig.speech_image + sig.noise_image)
    assert sig.mixture.shape == (4, 4, 8000)


def test_render_zero_sir():
    spec = sample_scene(4)
    spec.sir_db = 0.0
    s = synth_source("speech", 0.5, 1)
    sig = render_scene(spec, s, synth_source("white", 0.5, 2), max_order=1)
    rms = lambda v: np.sqrt(np.mean(v ** 2))
    assert (rms(sig.dry_speech) / rms(sig.dry_noise)) ** 2 == pytest.approx(1.0, abs=1e-12)


def test_render_zero_noise():
    spec = sample_scene(4)
    s = synth_source("speech", 0.3, 1)
    sig = render_scene(spec, s, np.zeros_like(s), max_order=1)
    np.testing.assert_array_equal(sig.mixture, sig.speech_image)


def test_render_length_mismatch():
    with pytest.raises(ShapeError):
        render_scene(sample_scene(4), np.ones(100), np.ones(99))
