import json

import numpy as np
import pytest

from gaitlwm.numcore import RngStream
from gaitlwm.signalio import AP, ML, V, FallDirection, read_container, segment_windows, window_starts
from gaitlwm.synthgait import (
    DEVICE_TO_CANONICAL,
    GaitParams,
    SynthCohortSpec,
    control_cohort,
    default_spec,
    generate_corpus,
    generate_recording,
    impaired_cohort,
    inject_fall,
    load_spec,
    to_canonical,
    to_device,
)


def _still(noise=0.01):
    return GaitParams(vertical_amp_g=0, ap_amp_g=0, ml_amp_g=0, trunk_tilt_deg=0, sensor_noise_std_g=noise)


def test_gravity_only_recording():
    rec = generate_recording(_still(), 20, np.random.default_rng(0))
    acc = rec.samples[:, :3]
    assert np.allclose(acc.mean(0), [0, 0, 1], atol=3e-3)  # device z is vertical
    assert acc.std(0).max() < 0.02
    assert np.abs(rec.samples[:, 3:].mean(0)).max() < 0.1


def test_static_norm_is_one_g():
    rec = generate_recording(_still(0.005), 20, np.random.default_rng(1))
    norm = np.linalg.norm(rec.samples[:, :3], axis=1)
    assert np.abs(norm.mean() - 1.0) < 3 * 0.005


def test_vertical_spectral_peak_at_stride_frequency():
    rec = generate_recording(GaitParams(stride_hz=1.0), 40, np.random.default_rng(2))
    v = to_canonical(rec.samples)[:, V]
    spec = np.abs(np.fft.rfft(v - v.mean()))
    freqs = np.fft.rfftfreq(len(v), 1 / 100)
    assert abs(freqs[spec.argmax()] - 1.0) <= freqs[1]


def test_autocorrelation_peaks_at_stride_period():
    p = GaitParams(stride_hz=1.25)
    v = to_canonical(generate_recording(p, 60, np.random.default_rng(3)).samples)[:, V]
    v = v - v.mean()
    ac = np.correlate(v, v, "full")[len(v) - 1:]
    lag = np.argmax(ac[50:200]) + 50
    assert abs(lag - 100 / 1.25) <= 3


def test_deterministic_given_seed():
    a = generate_recording(GaitParams(), 15, np.random.default_rng(7))
    b = generate_recording(GaitParams(), 15, np.random.default_rng(7))
    assert np.array_equal(a.samples, b.samples)


def test_duration_precondition_and_params():
    with pytest.raises(ValueError):
        generate_recording(GaitParams(), 5, np.random.default_rng(0))
    with pytest.raises(ValueError):
        GaitParams(stride_hz=0)
    with pytest.raises(ValueError):
        GaitParams(ap_amp_g=-1)
    with pytest.raises(ValueError):
        SynthCohortSpec("x", subjects=0)


def test_frame_conversion_round_trip():
    x = np.random.default_rng(0).standard_normal((10, 6))
    assert np.allclose(to_canonical(to_device(x)), x)
    R = DEVICE_TO_CANONICAL
    assert np.allclose(R @ R.T, np.eye(3)) and np.isclose(np.linalg.det(R), 1.0)


def test_impaired_preset():
    c, i = control_cohort().params_mean, impaired_cohort().params_mean
    assert i.vertical_amp_g == pytest.approx(0.8 * c.vertical_amp_g)
    assert i.cadence_jitter_std == pytest.approx(1.5 * c.cadence_jitter_std)
    assert i.tremor_hz == 5.0 and c.tremor_hz is None


@pytest.mark.parametrize("direction", list(FallDirection))
def test_fall_peak_and_label(direction):
    rng = np.random.default_rng(4)
    rec = inject_fall(generate_recording(GaitParams(), 20, rng), 8.0, direction, rng)
    iv = rec.fall_intervals[0]
    assert iv.direction is direction and iv.end - iv.start == pytest.approx(3.0)
    seg = rec.samples[int(iv.start * 100):int(iv.end * 100), :3]
    assert np.linalg.norm(seg, axis=1).max() >= 2.5
    windows = segment_windows(np.clip(to_canonical(rec.samples) / 16, -1, 1), 0.5, rec.fall_intervals)
    for w in windows:
        hits = w.start_time < iv.end and iv.start < w.start_time + 5.12
        assert w.fall_mask == hits


def test_forward_and_backward_impulse_signs():
    peaks = {}
    for d in (FallDirection.FORWARD, FallDirection.BACKWARD):
        rng = np.random.default_rng(5)
        rec = inject_fall(generate_recording(_still(), 20, rng), 5.0, d, rng)
        ap = to_canonical(rec.samples)[500:800, AP]
        peaks[d] = ap[np.argmax(np.abs(ap))]
    assert peaks[FallDirection.FORWARD] > 2.0 and peaks[FallDirection.BACKWARD] < -2.0


def test_lateral_fall_moves_medial_axis():
    rng = np.random.default_rng(6)
    rec = inject_fall(generate_recording(_still(), 20, rng), 5.0, "lateral", rng)
    x = to_canonical(rec.samples)
    assert np.abs(x[550:800, ML]).max() > 2.0
    assert np.abs(x[750:800, ML]).mean() > 0.9  # lying on the side


def test_overlapping_falls_rejected():
    rng = np.random.default_rng(0)
    rec = inject_fall(generate_recording(GaitParams(), 20, rng), 5.0, "forward", rng)
    with pytest.raises(ValueError, match="overlap"):
        inject_fall(rec, 6.0, "backward", rng)
    with pytest.raises(ValueError):
        inject_fall(rec, 18.5, "backward", rng)


def test_corpus_window_count_and_ids(tmp_path):
    specs = [control_cohort(subjects=10, duration_s=60), impaired_cohort(subjects=10, duration_s=60)]
    ws = generate_corpus(specs, RngStream(0), tmp_path / "c")
    per_rec = len(window_starts(6000, 0.5))
    assert len(ws) == 20 * per_rec
    assert len(set(ws.subject_names)) == 20
    assert ws.cohort_names == ["control", "impaired"]
    back = read_container(tmp_path / "c")
    assert np.array_equal(back.windows, ws.windows)
    assert np.array_equal(back.cohort, ws.cohort)


def test_corpus_with_falls_has_dense_windows():
    ws = generate_corpus([control_cohort(subjects=2, duration_s=30, fall_rate=2.0)], RngStream(1))
    assert ws.fall_mask.any() and ws.dense.any()
    assert (ws.fall_direction[ws.fall_mask] >= 0).all()
    assert (ws.fall_direction[~ws.fall_mask] == -1).all()


def test_cohorts_separable_by_spectral_feature():
    from gaitlwm.probes import auc_roc

    specs = [control_cohort(subjects=6, duration_s=30, params_mean=GaitParams(stride_hz=0.9)),
             impaired_cohort(subjects=6, duration_s=30)]
    specs[1].params_mean.stride_hz = 1.4
    ws = generate_corpus(specs, RngStream(2))
    v = ws.windows[..., V] - ws.windows[..., V].mean(1, keepdims=True)
    freqs = np.fft.rfftfreq(512, 0.01)
    peak = freqs[np.abs(np.fft.rfft(v, axis=1)).argmax(1)]
    assert auc_roc(peak, ws.cohort) >= 0.99


def test_spec_json_round_trip(tmp_path):
    doc = default_spec(seed=3, subjects=2, duration_s=20)
    p = tmp_path / "spec.json"
    p.write_text(json.dumps(doc))
    specs, seed, dataset = load_spec(p)
    assert seed == 3 and dataset == "synth"
    assert specs[1].params_mean.tremor_hz == 5.0 and specs[0].subjects == 2
