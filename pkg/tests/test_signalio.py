import warnings

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.spatial.transform import Rotation

from gaitlwm.signalio import (
    AP,
    ML,
    V,
    AugmentationConfig,
    CanonicalWindow,
    FallDirection,
    FallInterval,
    RawRecording,
    WindowSet,
    augment,
    augment_gyro_drift,
    augment_parity,
    augment_percentile_censor,
    augment_tilt,
    harmonize,
    make_batch_augmenter,
    rate_ratio,
    read_container,
    resample_polyphase,
    rotate_to_frame,
    scale_fixed_range,
    segment_windows,
    window_starts,
    write_container,
)
from gaitlwm.numcore import RngStream


# resampling


def test_constant_downsample():
    x = np.full((1000, 6), 0.5)
    y = resample_polyphase(x, 200, 100)
    assert y.shape == (500, 6)
    assert np.allclose(y, 0.5, atol=1e-9)


def test_upsample_length():
    assert resample_polyphase(np.zeros((1000, 6)), 50, 100).shape == (2000, 6)


def test_sine_survives_downsampling():
    t = np.arange(800) / 200.0
    x = np.repeat(np.sin(2 * np.pi * 3 * t)[:, None], 6, axis=1)
    y = resample_polyphase(x, 200, 100)[:, 0]
    ref = np.sin(2 * np.pi * 3 * np.arange(400) / 100.0)
    inner = slice(20, -20)  # ignore edge transients
    assert abs(np.abs(y[inner]).max() - 1.0) < 0.01
    assert np.sqrt(np.mean((y[inner] - ref[inner]) ** 2)) / np.sqrt(np.mean(ref[inner] ** 2)) < 0.02


def test_round_trip_low_band():
    g = np.random.default_rng(0)
    t = np.arange(4000) / 200.0
    x = sum(g.standard_normal() * np.sin(2 * np.pi * f * t + g.uniform(0, 6)) for f in (0.7, 2.1, 9.0, 17.0))
    x = np.repeat(x[:, None], 6, axis=1)
    back = resample_polyphase(resample_polyphase(x, 200, 100), 100, 200)
    inner = slice(100, -100)
    err = np.sqrt(np.mean((back[inner] - x[inner]) ** 2) / np.mean(x[inner] ** 2))
    assert err < 0.05


def test_ill_posed_rate_rejected():
    with pytest.raises(ValueError, match="ill-posed"):
        rate_ratio(100.00001, 100.0)
    with pytest.raises(ValueError):
        resample_polyphase(np.zeros((4, 6)), 200, 100)
    assert rate_ratio(128, 100) == (25, 32)


# rotation and scaling


def test_identity_rotation():
    x = np.random.default_rng(0).standard_normal((10, 6))
    assert np.array_equal(rotate_to_frame(x, np.eye(3)), x)


def test_quarter_turn_about_vertical_maps_anterior_to_medial():
    R = Rotation.from_rotvec([np.pi / 2, 0, 0]).as_matrix()  # vertical is axis 0
    x = np.zeros((1, 6))
    x[0, AP] = 1.0
    y = rotate_to_frame(x, R)
    assert np.allclose(y[0, :3], [0, 0, 1], atol=1e-12)


def test_rotation_preserves_norms():
    x = np.random.default_rng(1).standard_normal((50, 6))
    R = Rotation.random(random_state=3).as_matrix()
    y = rotate_to_frame(x, R)
    assert np.allclose(np.linalg.norm(y[:, :3], axis=1), np.linalg.norm(x[:, :3], axis=1), atol=1e-6)
    assert np.allclose(np.linalg.norm(y[:, 3:], axis=1), np.linalg.norm(x[:, 3:], axis=1), atol=1e-6)


def test_non_rotation_rejected():
    with pytest.raises(ValueError):
        rotate_to_frame(np.zeros((2, 6)), np.diag([1.0, 1.0, -1.0]))
    with pytest.raises(ValueError):
        rotate_to_frame(np.zeros((2, 6)), 2 * np.eye(3))


def test_fixed_range_scaling():
    x = np.array([[16.0, 0, -32.0, -2000.0, 1000.0, 0.0], [0.0] * 6])
    y = scale_fixed_range(x)
    assert y[0, 0] == 1.0 and y[0, 2] == -1.0 and y[0, 3] == -1.0 and y[0, 4] == 0.5
    assert np.array_equal(y[1], np.zeros(6))


# windowing


def test_window_enumeration():
    assert window_starts(1024, 0.5) == [0, 256, 512]
    assert window_starts(614, 0.1) == [0, 51, 102]
    assert window_starts(512, 0.5) == [0]


@settings(max_examples=40, deadline=None)
@given(st.integers(512, 5000), st.sampled_from([0.5, 0.1]))
def test_window_count_formula(m, frac):
    stride = int(np.floor(512 * frac))
    assert len(window_starts(m, frac)) == (m - 512) // stride + 1


def test_short_signal_warns():
    with pytest.warns(UserWarning):
        assert segment_windows(np.zeros((300, 6))) == []


def test_fall_mask_by_intersection():
    x = np.zeros((1024, 6))
    falls = [FallInterval(5.2, 5.5, "forward")]
    ws = segment_windows(x, 0.5, falls)
    assert [w.fall_mask for w in ws] == [False, True, True]
    assert ws[1].fall_direction is FallDirection.FORWARD
    assert ws[0].fall_direction is None


def test_window_invariants():
    with pytest.raises(ValueError):
        CanonicalWindow(np.zeros((511, 6), np.float32))
    with pytest.raises(ValueError):
        CanonicalWindow(np.full((512, 6), 1.5, np.float32))
    with pytest.raises(ValueError):
        CanonicalWindow(np.zeros((512, 6), np.float32), False, FallDirection.LATERAL)


def test_raw_recording_validation():
    with pytest.raises(ValueError):
        RawRecording(np.zeros((10, 5)), 100)
    with pytest.raises(ValueError):
        RawRecording(np.zeros((10, 6)), 0)
    with pytest.raises(ValueError):
        RawRecording(np.zeros((100, 6)), 100, fall_intervals=[FallInterval(0.5, 2.0, "lateral")])


def test_harmonize_dense_fall_pass():
    x = np.zeros((3000, 6))
    x[:, 0] = 1.0
    rec = RawRecording(x, 100, fall_intervals=[FallInterval(12.0, 15.0, "backward")], subject_id="s", cohort_label="c")
    windows = harmonize(rec, np.eye(3))
    base = [w for w in windows if not w.dense]
    dense = [w for w in windows if w.dense]
    assert len(base) == (3000 - 512) // 256 + 1
    assert dense and all(w.fall_mask for w in dense)
    starts = [round(w.start_time * 100) for w in windows]
    assert len(starts) == len(set(starts))
    assert all(np.allclose(w.values[:, 0], 1 / 16) for w in windows)


# augmentations


def _window(seed=0):
    return np.clip(np.random.default_rng(seed).standard_normal((512, 6)) * 0.2, -1, 1).astype(np.float32)


def test_parity_involution_and_isometry():
    w = _window()
    p = augment_parity(w)
    assert np.array_equal(augment_parity(p), w)
    assert np.allclose(np.linalg.norm(p[:, :3], axis=1), np.linalg.norm(w[:, :3], axis=1))
    assert np.array_equal(augment_parity(np.zeros((512, 6))), np.zeros((512, 6)))
    assert np.array_equal(p[:, [V, AP, 3 + ML]], w[:, [V, AP, 3 + ML]])


def test_parity_matches_reflection_geometry():
    # mirror M = diag(1, 1, -1); polar vectors map by M, axial ones by det(M) M = -M
    M = np.diag([1.0, 1.0, -1.0])
    w = _window(1)
    ref = np.concatenate([w[:, :3] @ M.T, w[:, 3:] @ (-M).T], axis=1)
    assert np.allclose(augment_parity(w), ref)


def test_tilt():
    w = _window(2) * 0.5
    assert np.array_equal(augment_tilt(w, np.random.default_rng(0), 0.0), w)
    t = augment_tilt(w, np.random.default_rng(5), 8.0, clamp=False)
    assert np.allclose(np.linalg.norm(t[:, :3], axis=1), np.linalg.norm(w[:, :3], axis=1), atol=1e-6)
    assert np.allclose(np.linalg.norm(t[:, 3:], axis=1), np.linalg.norm(w[:, 3:], axis=1), atol=1e-6)
    assert np.array_equal(t, augment_tilt(w, np.random.default_rng(5), 8.0, clamp=False))


def test_drift():
    w = _window(3)
    assert np.array_equal(augment_gyro_drift(w, np.random.default_rng(0), 0.0), w)
    d = augment_gyro_drift(w, np.random.default_rng(0))
    assert np.array_equal(d[:, :3], w[:, :3])
    assert not np.array_equal(d[:, 3:], w[:, 3:])


def test_drift_variance_grows_linearly():
    z = np.zeros((512, 6))
    draws = np.stack([augment_gyro_drift(z, np.random.default_rng(i), clamp=False)[:, 3] for i in range(1000)])
    var = draws.var(axis=0)
    t = np.arange(1, 513)
    slope = np.polyfit(t, var, 1)[0]
    expected = (2.0 / 2000.0) ** 2
    assert abs(slope / expected - 1) < 0.2


def test_censor():
    w = np.full((512, 6), 0.05, dtype=np.float32)
    w[100, 2] = 1.0
    assert np.array_equal(augment_percentile_censor(w, 100), w)
    c = augment_percentile_censor(w, 95)
    assert c[100, 2] == pytest.approx(np.percentile(np.abs(w[:, 2]), 95))
    assert (np.abs(c) <= np.abs(w) + 1e-7).all()


def test_augment_preserves_shape_and_range():
    cfg = AugmentationConfig(probability=1.0)
    for s in range(5):
        out = augment(_window(s) * 4, cfg, np.random.default_rng(s))
        assert out.shape == (512, 6) and np.abs(out).max() <= 1.0


def test_batch_augmenter_pairs_share_draw():
    fn = make_batch_augmenter(AugmentationConfig(probability=1.0, drift=False, censor=False))
    w = torch.from_numpy(np.stack([_window(0), _window(1)]) * 0.3)
    a, b = fn((w, w.clone()), RngStream(0))
    assert torch.equal(a, b)
    assert not torch.equal(a[0], w[0])


def test_augmentation_config_validation():
    with pytest.raises(ValueError):
        AugmentationConfig(tilt_sigma_deg=-1)
    with pytest.raises(ValueError):
        AugmentationConfig(censor_percentile=40)


# container


def test_container_round_trip(tmp_path, small_corpus):
    write_container(tmp_path / "c", small_corpus)
    back = read_container(tmp_path / "c")
    assert np.array_equal(back.windows, small_corpus.windows)
    for f in ("fall_mask", "fall_direction", "cohort", "subject", "recording", "dense"):
        assert np.array_equal(getattr(back, f), getattr(small_corpus, f))
    assert back.cohort_names == small_corpus.cohort_names
    raw = (tmp_path / "c" / "windows.f32").read_bytes()
    assert len(raw) == 4 * small_corpus.windows.size


def test_container_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_container(tmp_path)


def test_labels_listing(small_corpus):
    with pytest.raises(KeyError, match="available"):
        small_corpus.labels("gait_speed")
    assert np.array_equal(small_corpus.labels("fall_mask"), small_corpus.fall_mask.astype(int))


def test_pairs_are_adjacent_and_non_overlapping(small_corpus):
    ws = small_corpus
    ctx, tgt, rec = ws.pairs()
    assert len(ctx) > 0
    assert np.array_equal(ws.recording[ctx], ws.recording[tgt])
    assert np.allclose(ws.start_time[tgt] - ws.start_time[ctx], 5.12)
    assert not ws.dense[ctx].any() and not ws.dense[tgt].any()


def test_windowset_requires_windows():
    with pytest.raises(ValueError):
        WindowSet.from_windows([[]])
