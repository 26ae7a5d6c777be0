"""Deterministic synthetic six-axis gait recordings with cohort structure and falls.

Signals are built in the canonical (vertical, anterior, medial) frame and then
expressed in a device frame (x = anterior, y = medial, z = vertical), so the
harmonisation rotation is exercised exactly as for a real dataset.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .numcore import RngStream
from .signalio import (
    AP,
    ML,
    V,
    FallDirection,
    FallInterval,
    RawRecording,
    WindowSet,
    harmonize,
    recording_metadata,
    write_container,
)

# canonical = DEVICE_TO_CANONICAL @ device
DEVICE_TO_CANONICAL = np.array([[0.0, 0.0, 1.0], [1.0, 0.0, 0.0], [0.0, 1.0, 0.0]])

PITCH_DPS_PER_G = 60.0
ROLL_DPS_PER_G = 60.0
GYRO_NOISE_DPS_PER_G = 100.0
HARMONICS = ((1.0, 0.0), (0.35, 0.6), (0.15, 1.3))  # (relative amplitude, phase) per stride harmonic
FALL_DURATION = 3.0


@dataclass
class GaitParams:
    stride_hz: float = 1.0
    vertical_amp_g: float = 0.3
    ap_amp_g: float = 0.2
    ml_amp_g: float = 0.1
    asymmetry: float = 0.05
    cadence_jitter_std: float = 0.02
    tremor_hz: float | None = None
    tremor_amp_g: float = 0.0
    trunk_tilt_deg: float = 5.0
    sensor_noise_std_g: float = 0.01

    def __post_init__(self):
        if self.stride_hz <= 0:
            raise ValueError("stride_hz must be positive")
        if min(self.vertical_amp_g, self.ap_amp_g, self.ml_amp_g, self.tremor_amp_g) < 0:
            raise ValueError("amplitudes must be non-negative")
        if not 0 <= self.asymmetry <= 1:
            raise ValueError("asymmetry must lie in [0, 1]")


@dataclass
class SynthCohortSpec:
    name: str
    params_mean: GaitParams = field(default_factory=GaitParams)
    params_std: dict[str, float] = field(default_factory=dict)
    subjects: int = 10
    recordings_per_subject: int = 1
    duration_s: float = 60.0
    fall_rate: float = 0.0  # expected falls per recording
    fall_mix: dict[str, float] = field(default_factory=lambda: {d.value: 1.0 for d in FallDirection})
    source_hz: float = 100.0

    def __post_init__(self):
        if isinstance(self.params_mean, dict):
            self.params_mean = GaitParams(**self.params_mean)
        if self.subjects < 1:
            raise ValueError("a cohort needs at least one subject")

    def sample_params(self, rng: np.random.Generator) -> GaitParams:
        base = asdict(self.params_mean)
        for k, sd in sorted(self.params_std.items()):
            if base.get(k) is not None and sd > 0:
                base[k] = base[k] + rng.normal(0.0, sd)
        for k in ("vertical_amp_g", "ap_amp_g", "ml_amp_g", "tremor_amp_g", "cadence_jitter_std",
                  "sensor_noise_std_g"):
            base[k] = max(0.0, base[k])
        base["asymmetry"] = float(np.clip(base["asymmetry"], 0.0, 1.0))
        base["stride_hz"] = float(np.clip(base["stride_hz"], 0.5, 2.5))
        return GaitParams(**base)


def control_cohort(**kw) -> SynthCohortSpec:
    spec = dict(
        name="control",
        params_mean=GaitParams(),
        params_std={"stride_hz": 0.06, "vertical_amp_g": 0.03, "ap_amp_g": 0.02, "ml_amp_g": 0.01,
                    "trunk_tilt_deg": 2.0},
    )
    spec.update(kw)
    return SynthCohortSpec(**spec)


def impaired_cohort(**kw) -> SynthCohortSpec:
    """Control preset with 20% lower amplitudes, +50% cadence jitter and a 5 Hz tremor."""
    ctl = GaitParams()
    mean = GaitParams(
        stride_hz=ctl.stride_hz,
        vertical_amp_g=0.8 * ctl.vertical_amp_g,
        ap_amp_g=0.8 * ctl.ap_amp_g,
        ml_amp_g=0.8 * ctl.ml_amp_g,
        asymmetry=ctl.asymmetry,
        cadence_jitter_std=1.5 * ctl.cadence_jitter_std,
        tremor_hz=5.0,
        tremor_amp_g=0.04,
        trunk_tilt_deg=ctl.trunk_tilt_deg,
        sensor_noise_std_g=ctl.sensor_noise_std_g,
    )
    spec = dict(
        name="impaired",
        params_mean=mean,
        params_std={"stride_hz": 0.06, "vertical_amp_g": 0.024, "ap_amp_g": 0.016, "ml_amp_g": 0.008,
                    "trunk_tilt_deg": 2.0, "tremor_amp_g": 0.008},
    )
    spec.update(kw)
    return SynthCohortSpec(**spec)


def _tilt_matrix(deg: float) -> np.ndarray:
    """Forward pitch of the trunk: rotation about the medial axis in (V, AP, ML)."""
    th = np.deg2rad(deg)
    c, s = np.cos(th), np.sin(th)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def _stride_phase(n: int, hz: float, p: GaitParams, rng: np.random.Generator) -> np.ndarray:
    """Piecewise-linear phase (radians) with per-stride duration jitter."""
    t_end = n / hz
    bounds = [0.0]
    while bounds[-1] < t_end + 2.0 / p.stride_hz:
        dur = (1.0 / p.stride_hz) * max(0.3, 1.0 + rng.normal(0.0, p.cadence_jitter_std))
        bounds.append(bounds[-1] + dur)
    bounds = np.array(bounds)
    t = np.arange(n) / hz + rng.uniform(0, 1.0 / p.stride_hz)
    k = np.searchsorted(bounds, t, side="right") - 1
    frac = (t - bounds[k]) / (bounds[k + 1] - bounds[k])
    return 2 * np.pi * (k + frac)


def _canonical_gait(p: GaitParams, n: int, hz: float, rng: np.random.Generator) -> np.ndarray:
    phi = _stride_phase(n, hz, p, rng)
    sides = 1.0 + p.asymmetry * np.sign(np.sin(phi))
    wave = np.zeros(n)
    wave_q = np.zeros(n)
    for m, (rel, ph) in enumerate(HARMONICS, start=1):
        wave += rel * np.sin(m * phi + ph)
        wave_q += rel * np.cos(m * phi + ph)
    x = np.zeros((n, 6))
    x[:, V] = p.vertical_amp_g * wave * sides
    x[:, AP] = p.ap_amp_g * wave_q * sides
    x[:, ML] = p.ml_amp_g * np.sin(phi + 0.3)
    x[:, 3 + ML] = PITCH_DPS_PER_G * p.ap_amp_g * np.cos(phi + 0.2) * sides
    x[:, 3 + AP] = ROLL_DPS_PER_G * p.ml_amp_g * np.sin(phi - 0.4)
    x[:, 3 + V] = 0.2 * ROLL_DPS_PER_G * p.ml_amp_g * np.sin(phi + 1.1)
    if p.tremor_hz and p.tremor_amp_g > 0:
        t = np.arange(n) / hz
        for ax in range(3):
            x[:, ax] += p.tremor_amp_g * np.sin(2 * np.pi * p.tremor_hz * t + rng.uniform(0, 2 * np.pi))
        x[:, 3 + AP] += PITCH_DPS_PER_G * p.tremor_amp_g * np.sin(2 * np.pi * p.tremor_hz * t)
    gravity = _tilt_matrix(p.trunk_tilt_deg) @ np.array([1.0, 0.0, 0.0])
    x[:, :3] += gravity
    x[:, :3] += rng.normal(0.0, p.sensor_noise_std_g, size=(n, 3))
    x[:, 3:] += rng.normal(0.0, GYRO_NOISE_DPS_PER_G * p.sensor_noise_std_g, size=(n, 3))
    return x


def to_device(canonical: np.ndarray) -> np.ndarray:
    out = np.empty_like(canonical)
    out[:, :3] = canonical[:, :3] @ DEVICE_TO_CANONICAL
    out[:, 3:] = canonical[:, 3:] @ DEVICE_TO_CANONICAL
    return out


def to_canonical(device: np.ndarray) -> np.ndarray:
    out = np.empty_like(device)
    out[:, :3] = device[:, :3] @ DEVICE_TO_CANONICAL.T
    out[:, 3:] = device[:, 3:] @ DEVICE_TO_CANONICAL.T
    return out


def generate_recording(params: GaitParams, duration: float, rng: np.random.Generator, hz: float = 100.0,
                       subject_id: str = "", cohort_label: str | None = None,
                       dataset_id: str = "synth") -> RawRecording:
    """Stride-periodic walking with gravity, harmonics, optional tremor and noise (device frame)."""
    if duration < 10:
        raise ValueError("duration must be at least 10 s")
    n = int(round(duration * hz))
    x = _canonical_gait(params, n, hz, rng)
    return RawRecording(to_device(x), hz, "lower_back", subject_id, dataset_id, [], cohort_label)


def _fall_axis(direction: FallDirection, rng: np.random.Generator) -> np.ndarray:
    if direction is FallDirection.FORWARD:
        return np.array([0.0, 1.0, 0.0])
    if direction is FallDirection.BACKWARD:
        return np.array([0.0, -1.0, 0.0])
    if direction is FallDirection.LATERAL:
        return np.array([0.0, 0.0, rng.choice([-1.0, 1.0])])
    return np.array([0.0, rng.choice([-1.0, 1.0]), 0.0])


def inject_fall(rec: RawRecording, t: float, direction: FallDirection | str,
                rng: np.random.Generator) -> RawRecording:
    """Overlay a 3 s fall template starting at ``t`` seconds.

    0.5 s of growing instability, an impact impulse (>= 2.5 g peak) along the
    fall direction with gravity rotating into that direction, then 1.5 s of rest.
    Near-falls rotate only partway and recover.
    """
    direction = FallDirection(direction)
    hz = rec.source_hz
    if t < 0 or t + FALL_DURATION > rec.duration:
        raise ValueError("fall must fit inside the recording")
    for iv in rec.fall_intervals:
        if t < iv.end and iv.start < t + FALL_DURATION:
            raise ValueError("overlapping fall intervals")
    x = to_canonical(rec.samples)
    i0 = int(round(t * hz))
    n_pre, n_imp, n_rest = int(0.5 * hz), int(1.0 * hz), int(1.5 * hz)
    i1, i2, i3 = i0 + n_pre, i0 + n_pre + n_imp, min(len(x), i0 + n_pre + n_imp + n_rest)

    up = np.array([1.0, 0.0, 0.0])
    axis = _fall_axis(direction, rng)
    final_angle = np.deg2rad(25.0 if direction is FallDirection.NEAR_FALL else 90.0)

    # pre-fall instability: swell the dynamic part
    seg = x[i0:i1].copy()
    base = seg[:, :3].mean(axis=0)
    ramp = np.linspace(1.0, 2.0, i1 - i0)[:, None]
    x[i0:i1, :3] = base + (seg[:, :3] - base) * ramp
    x[i0:i1, 3:] = seg[:, 3:] * ramp

    # impact: gravity rotates towards the fall axis, impulse on top
    tt = np.arange(i2 - i1) / hz
    frac = np.clip(tt / 0.3, 0.0, 1.0)
    ang = final_angle * frac
    grav = np.cos(ang)[:, None] * up + np.sin(ang)[:, None] * axis
    peak = rng.uniform(3.0, 4.0)
    centre = 0.3
    pulse = peak * np.exp(-0.5 * ((tt - centre) / 0.04) ** 2)
    noise = rng.normal(0.0, 0.02, size=(i2 - i1, 3))
    x[i1:i2, :3] = grav + pulse[:, None] * axis + 0.3 * pulse[:, None] * up + noise
    rot_axis = np.cross(up, axis)
    rate = np.gradient(ang, 1.0 / hz)
    x[i1:i2, 3:] = np.rad2deg(rate)[:, None] * rot_axis + rng.normal(0.0, 1.0, size=(i2 - i1, 3))

    # rest (lying, or recovered upright after a near-fall)
    rest_g = up if direction is FallDirection.NEAR_FALL else np.cos(final_angle) * up + np.sin(final_angle) * axis
    x[i2:i3, :3] = rest_g + rng.normal(0.0, 0.01, size=(i3 - i2, 3))
    x[i2:i3, 3:] = rng.normal(0.0, 1.0, size=(i3 - i2, 3))

    falls = sorted([*rec.fall_intervals, FallInterval(t, t + FALL_DURATION, direction)], key=lambda iv: iv.start)
    return RawRecording(to_device(x), hz, rec.placement, rec.subject_id, rec.dataset_id, falls, rec.cohort_label)


def _sample_fall_times(k: int, duration: float, rng: np.random.Generator) -> list[float]:
    times: list[float] = []
    for _ in range(50 * max(k, 1)):
        if len(times) == k:
            break
        t = float(rng.uniform(1.0, duration - FALL_DURATION - 1.0))
        if all(abs(t - u) >= FALL_DURATION + 1.0 for u in times):
            times.append(t)
    return sorted(times)


def generate_recordings(specs: list[SynthCohortSpec], stream: RngStream,
                        dataset_id: str = "synth") -> list[RawRecording]:
    recs = []
    for ci, spec in enumerate(specs):
        cs = stream.child(ci)
        for s in range(spec.subjects):
            ss = cs.child(s)
            prng = ss.child(0).numpy()
            params = spec.sample_params(prng)
            sid = f"{spec.name}-{s:03d}"
            for r in range(spec.recordings_per_subject):
                rrng = ss.child(1 + r).numpy()
                rec = generate_recording(params, spec.duration_s, rrng, spec.source_hz, sid, spec.name, dataset_id)
                n_falls = int(rrng.poisson(spec.fall_rate)) if spec.fall_rate > 0 else 0
                if n_falls:
                    names = sorted(spec.fall_mix)
                    probs = np.array([spec.fall_mix[k] for k in names], dtype=float)
                    for t in _sample_fall_times(n_falls, spec.duration_s, rrng):
                        d = names[rrng.choice(len(names), p=probs / probs.sum())]
                        rec = inject_fall(rec, t, d, rrng)
                recs.append(rec)
    return recs


def generate_corpus(specs: list[SynthCohortSpec], stream: RngStream, out_dir: str | Path | None = None,
                    dataset_id: str = "synth", dense_falls: bool = True) -> WindowSet:
    """Generate, harmonise and (optionally) write a window container."""
    recs = generate_recordings(specs, stream, dataset_id)
    groups = [harmonize(r, DEVICE_TO_CANONICAL, dense_falls) for r in recs]
    meta = [recording_metadata(r, DEVICE_TO_CANONICAL) for r in recs]
    ws = WindowSet.from_windows(groups, dataset_id, meta)
    if out_dir is not None:
        write_container(out_dir, ws)
    return ws


# ---------------------------------------------------------------------------
# JSON spec files


def default_spec(seed: int = 0, subjects: int = 10, duration_s: float = 60.0, fall_rate: float = 0.0) -> dict:
    return {
        "seed": seed,
        "dataset_id": "synth",
        "cohorts": [
            spec_to_dict(control_cohort(subjects=subjects, duration_s=duration_s, fall_rate=fall_rate)),
            spec_to_dict(impaired_cohort(subjects=subjects, duration_s=duration_s, fall_rate=fall_rate)),
        ],
    }


def spec_to_dict(spec: SynthCohortSpec) -> dict:
    return asdict(spec)


def load_spec(path: str | Path) -> tuple[list[SynthCohortSpec], int, str]:
    doc = json.loads(Path(path).read_text())
    cohorts = [SynthCohortSpec(**c) for c in doc["cohorts"]]
    return cohorts, int(doc.get("seed", 0)), doc.get("dataset_id", "synth")
