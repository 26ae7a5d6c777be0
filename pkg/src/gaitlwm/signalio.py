"""Harmonisation of raw six-axis recordings into canonical 512 x 6 windows.

Canonical channel order is ``(acc_V, acc_AP, acc_ML, gyr_V, gyr_AP, gyr_ML)``:
vertical, anterior and medial axes, acceleration in g and angular rate in deg/s
before fixed-range scaling to [-1, 1].
"""

from __future__ import annotations

import json
import warnings
from dataclasses import asdict, dataclass, field
from enum import Enum
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.signal import resample_poly
from scipy.spatial.transform import Rotation

WINDOW = 512
TARGET_HZ = 100.0
ACC_FULL_SCALE_G = 16.0
GYRO_FULL_SCALE_DPS = 2000.0
DEFAULT_STRIDE = 0.5
DENSE_STRIDE = 0.1
MAX_RATE_TERM = 10_000

V, AP, ML = 0, 1, 2


class Placement(str, Enum):
    LOWER_BACK = "lower_back"
    WAIST = "waist"


class FallDirection(str, Enum):
    FORWARD = "forward"
    BACKWARD = "backward"
    LATERAL = "lateral"
    NEAR_FALL = "near_fall"


DIRECTIONS = list(FallDirection)


@dataclass
class FallInterval:
    start: float
    end: float
    direction: FallDirection

    def __post_init__(self):
        self.direction = FallDirection(self.direction)


@dataclass
class RawRecording:
    samples: np.ndarray  # (N, 6): acc xyz in g, gyro xyz in deg/s
    source_hz: float
    placement: Placement = Placement.LOWER_BACK
    subject_id: str = ""
    dataset_id: str = ""
    fall_intervals: list[FallInterval] = field(default_factory=list)
    cohort_label: str | None = None

    def __post_init__(self):
        self.samples = np.asarray(self.samples, dtype=np.float64)
        self.placement = Placement(self.placement)
        if self.samples.ndim != 2 or self.samples.shape[1] != 6 or len(self.samples) < 1:
            raise ValueError(f"samples must be (N >= 1, 6), got {self.samples.shape}")
        if self.source_hz <= 0:
            raise ValueError("source_hz must be positive")
        dur = len(self.samples) / self.source_hz
        for iv in self.fall_intervals:
            if not (0 <= iv.start <= iv.end <= dur):
                raise ValueError(f"fall interval {iv} outside [0, {dur}]")

    @property
    def duration(self) -> float:
        return len(self.samples) / self.source_hz


@dataclass
class CanonicalWindow:
    values: np.ndarray  # (512, 6) in [-1, 1]
    fall_mask: bool = False
    fall_direction: FallDirection | None = None
    cohort_label: str = ""
    subject_id: str = ""
    dataset_id: str = ""
    start_time: float = 0.0
    dense: bool = False

    def __post_init__(self):
        if self.values.shape != (WINDOW, 6):
            raise ValueError(f"window must be ({WINDOW}, 6), got {self.values.shape}")
        if np.abs(self.values).max(initial=0.0) > 1.0:
            raise ValueError("window values must lie in [-1, 1]")
        if self.fall_direction is not None and not self.fall_mask:
            raise ValueError("fall_direction set on a window without fall_mask")


@dataclass
class AugmentationConfig:
    tilt_sigma_deg: float = 8.0
    drift_step_sigma_dps: float = 2.0  # per-sample Brownian step, deg/s
    censor_percentile: float = 99.5
    probability: float = 0.5
    parity: bool = True
    tilt: bool = True
    drift: bool = True
    censor: bool = True

    def __post_init__(self):
        if self.tilt_sigma_deg < 0:
            raise ValueError("tilt_sigma_deg must be >= 0")
        if not 50 < self.censor_percentile <= 100:
            raise ValueError("censor_percentile must lie in (50, 100]")


# ---------------------------------------------------------------------------
# harmonisation


def rate_ratio(src_hz: float, dst_hz: float) -> tuple[int, int]:
    if src_hz <= 0 or dst_hz <= 0:
        raise ValueError("sample rates must be positive")
    r = Fraction(dst_hz) / Fraction(src_hz)
    if r.numerator > MAX_RATE_TERM or r.denominator > MAX_RATE_TERM:
        raise ValueError(f"ill-posed rate ratio {src_hz} -> {dst_hz} ({r.numerator}/{r.denominator})")
    return r.numerator, r.denominator


def resample_polyphase(signal: np.ndarray, src_hz: float, dst_hz: float = TARGET_HZ) -> np.ndarray:
    """Polyphase anti-aliased resampling per channel; output length ``round(N dst/src)``."""
    x = np.asarray(signal, dtype=np.float64)
    if len(x) < 8:
        raise ValueError("need at least 8 samples to resample")
    up, down = rate_ratio(src_hz, dst_hz)
    m = int(round(len(x) * dst_hz / src_hz))
    if up == down:
        return x.copy()
    y = resample_poly(x, up, down, axis=0, padtype="line")
    if len(y) >= m:
        return y[:m]
    return np.concatenate([y, np.repeat(y[-1:], m - len(y), axis=0)])


def check_rotation(R: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    R = np.asarray(R, dtype=np.float64)
    if R.shape != (3, 3):
        raise ValueError("rotation must be 3x3")
    if np.abs(R @ R.T - np.eye(3)).max() > tol or abs(np.linalg.det(R) - 1) > tol:
        raise ValueError("matrix is not a proper rotation")
    return R


def rotate_to_frame(signal: np.ndarray, R: np.ndarray) -> np.ndarray:
    """Left-multiply the acc and gyro triplets of every sample by ``R``."""
    R = check_rotation(R)
    x = np.asarray(signal, dtype=np.float64)
    out = np.empty_like(x)
    out[:, :3] = x[:, :3] @ R.T
    out[:, 3:] = x[:, 3:] @ R.T
    return out


def scale_fixed_range(signal: np.ndarray) -> np.ndarray:
    x = np.asarray(signal, dtype=np.float64)
    out = np.empty_like(x)
    out[..., :3] = x[..., :3] / ACC_FULL_SCALE_G
    out[..., 3:] = x[..., 3:] / GYRO_FULL_SCALE_DPS
    return np.clip(out, -1.0, 1.0)


def window_starts(m: int, stride_fraction: float) -> list[int]:
    if m < WINDOW:
        return []
    stride = int(np.floor(WINDOW * stride_fraction))
    return list(range(0, m - WINDOW + 1, stride))


def _fall_label(t0: float, t1: float, falls: list[FallInterval]) -> tuple[bool, FallDirection | None]:
    best, overlap = None, 0.0
    for iv in falls:
        ov = min(t1, iv.end) - max(t0, iv.start)
        if iv.start < t1 and t0 < iv.end and ov >= overlap:
            best, overlap = iv.direction, ov
    return best is not None, best


def segment_windows(
    signal: np.ndarray,
    stride_fraction: float = DEFAULT_STRIDE,
    fall_intervals: list[FallInterval] | None = None,
    hz: float = TARGET_HZ,
    **meta,
) -> list[CanonicalWindow]:
    """Slice a scaled 100 Hz signal into 512-sample windows.

    A window is fall-positive iff its time span intersects any fall interval.
    """
    x = np.asarray(signal)
    if len(x) < WINDOW:
        warnings.warn(f"signal of {len(x)} samples is shorter than one window", stacklevel=2)
        return []
    falls = fall_intervals or []
    out = []
    for s in window_starts(len(x), stride_fraction):
        t0, t1 = s / hz, (s + WINDOW) / hz
        mask, direction = _fall_label(t0, t1, falls)
        out.append(CanonicalWindow(np.ascontiguousarray(x[s:s + WINDOW], dtype=np.float32), mask, direction,
                                   start_time=t0, **meta))
    return out


def harmonize(rec: RawRecording, R: np.ndarray, dense_falls: bool = True) -> list[CanonicalWindow]:
    """Rotate -> resample to 100 Hz -> scale -> window (+ dense pass over falls)."""
    x = rotate_to_frame(rec.samples, R)
    x = resample_polyphase(x, rec.source_hz, TARGET_HZ)
    x = scale_fixed_range(x)
    meta = dict(cohort_label=rec.cohort_label or "", subject_id=rec.subject_id, dataset_id=rec.dataset_id)
    windows = segment_windows(x, DEFAULT_STRIDE, rec.fall_intervals, **meta)
    if dense_falls and rec.fall_intervals:
        taken = {round(w.start_time * TARGET_HZ) for w in windows}
        for w in segment_windows(x, DENSE_STRIDE, rec.fall_intervals, **meta):
            if w.fall_mask and round(w.start_time * TARGET_HZ) not in taken:
                w.dense = True
                windows.append(w)
    return windows


# ---------------------------------------------------------------------------
# augmentations (operate on scaled windows)


def augment_parity(window: np.ndarray) -> np.ndarray:
    """Mirror across the sagittal plane.

    Acceleration is a polar vector (its medial component flips); angular rate is
    axial, so the components lying in the mirror plane (vertical, anterior) flip.
    """
    out = np.array(window, copy=True)
    out[..., ML] *= -1
    out[..., 3 + V] *= -1
    out[..., 3 + AP] *= -1
    return out


def random_tilt(sigma_deg: float, rng: np.random.Generator) -> np.ndarray:
    angle = np.deg2rad(abs(rng.normal(0.0, sigma_deg))) if sigma_deg > 0 else 0.0
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    return Rotation.from_rotvec(angle * axis).as_matrix()


def augment_tilt(window: np.ndarray, rng: np.random.Generator, sigma_deg: float = 8.0,
                 clamp: bool = True) -> np.ndarray:
    R = random_tilt(sigma_deg, rng)
    out = rotate_to_frame(window, R).astype(np.asarray(window).dtype)
    return np.clip(out, -1, 1) if clamp else out


def augment_gyro_drift(window: np.ndarray, rng: np.random.Generator, step_sigma_dps: float = 2.0,
                       clamp: bool = True) -> np.ndarray:
    out = np.array(window, copy=True)
    if step_sigma_dps <= 0:
        return out
    sigma = step_sigma_dps / GYRO_FULL_SCALE_DPS
    bias = np.cumsum(rng.normal(0.0, sigma, size=(out.shape[0], 3)), axis=0)
    out[:, 3:] = out[:, 3:] + bias
    return np.clip(out, -1, 1) if clamp else out


def augment_percentile_censor(window: np.ndarray, p: float = 99.5) -> np.ndarray:
    """Clamp each channel to the p-th percentile of its absolute values."""
    x = np.asarray(window)
    if p >= 100:
        return np.array(x, copy=True)
    thr = np.percentile(np.abs(x), p, axis=0)
    return np.clip(x, -thr, thr).astype(x.dtype)


def augment(window: np.ndarray, cfg: AugmentationConfig, rng: np.random.Generator) -> np.ndarray:
    """Parity -> tilt -> drift -> censor, each applied independently with ``cfg.probability``."""
    x = np.asarray(window)
    flips = rng.random(4) < cfg.probability
    if cfg.parity and flips[0]:
        x = augment_parity(x)
    if cfg.tilt and flips[1]:
        x = augment_tilt(x, rng, cfg.tilt_sigma_deg)
    if cfg.drift and flips[2]:
        x = augment_gyro_drift(x, rng, cfg.drift_step_sigma_dps)
    if cfg.censor and flips[3]:
        x = augment_percentile_censor(x, cfg.censor_percentile)
    return x


def make_batch_augmenter(cfg: AugmentationConfig):
    """Returns ``fn(batch, stream)`` for the training loop.

    For ``(context, target)`` pairs both windows of a pair share the draw, so the
    simulated sensor placement is consistent across the pair.
    """
    import torch

    def fn(batch, stream):
        paired = isinstance(batch, tuple)
        arrays = [b.numpy() for b in batch] if paired else [batch.numpy()]
        out = [np.empty_like(a) for a in arrays]
        for i in range(arrays[0].shape[0]):
            for a, o in zip(arrays, out):
                o[i] = augment(a[i], cfg, stream.child(i).numpy())
        tens = [torch.from_numpy(o) for o in out]
        return tuple(tens) if paired else tens[0]

    return fn


# ---------------------------------------------------------------------------
# container


FIELDS = ("windows", "fall_mask", "fall_direction", "cohort", "subject", "recording", "start_time", "dense")


@dataclass
class WindowSet:
    """Columnar window corpus; label columns are integer codes into the name lists."""

    windows: np.ndarray  # (N, 512, 6) float32
    fall_mask: np.ndarray  # (N,) bool
    fall_direction: np.ndarray  # (N,) int, -1 = none, else index into DIRECTIONS
    cohort: np.ndarray  # (N,) int
    subject: np.ndarray  # (N,) int
    recording: np.ndarray  # (N,) int
    start_time: np.ndarray  # (N,) seconds
    dense: np.ndarray  # (N,) bool
    cohort_names: list[str] = field(default_factory=list)
    subject_names: list[str] = field(default_factory=list)
    dataset_id: str = ""
    recordings: list[dict] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.windows)

    @classmethod
    def from_windows(cls, groups: list[list[CanonicalWindow]], dataset_id: str = "",
                     recordings: list[dict] | None = None) -> "WindowSet":
        """Build from per-recording window lists (recording index = list position)."""
        cohorts: dict[str, int] = {}
        subjects: dict[str, int] = {}
        rows = []
        for r, ws in enumerate(groups):
            for w in ws:
                c = cohorts.setdefault(w.cohort_label, len(cohorts))
                s = subjects.setdefault(w.subject_id, len(subjects))
                d = -1 if w.fall_direction is None else DIRECTIONS.index(w.fall_direction)
                rows.append((w.values, w.fall_mask, d, c, s, r, w.start_time, w.dense))
        if not rows:
            raise ValueError("no windows")
        cols = list(zip(*rows))
        return cls(
            windows=np.stack(cols[0]).astype(np.float32),
            fall_mask=np.array(cols[1], dtype=bool),
            fall_direction=np.array(cols[2], dtype=np.int64),
            cohort=np.array(cols[3], dtype=np.int64),
            subject=np.array(cols[4], dtype=np.int64),
            recording=np.array(cols[5], dtype=np.int64),
            start_time=np.array(cols[6], dtype=np.float64),
            dense=np.array(cols[7], dtype=bool),
            cohort_names=list(cohorts),
            subject_names=list(subjects),
            dataset_id=dataset_id,
            recordings=recordings or [],
        )

    def labels(self, name: str) -> np.ndarray:
        if name == "cohort":
            return self.cohort
        if name == "fall_mask":
            return self.fall_mask.astype(np.int64)
        if name == "fall_direction":
            return self.fall_direction
        if name == "subject":
            return self.subject
        raise KeyError(f"unknown label field {name!r}; available: {', '.join(LABEL_FIELDS)}")

    def subset(self, idx) -> "WindowSet":
        idx = np.asarray(idx)
        return WindowSet(**{f: getattr(self, f)[idx] for f in FIELDS},
                         cohort_names=self.cohort_names, subject_names=self.subject_names,
                         dataset_id=self.dataset_id, recordings=self.recordings)

    def pairs(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """Adjacent non-overlapping (context, target) windows within one recording.

        Returns ``(context_idx, target_idx, recording)`` index arrays. Dense
        fall-oversampling windows never take part.
        """
        base = np.flatnonzero(~self.dense)
        key = {(int(self.recording[i]), int(round(self.start_time[i] * TARGET_HZ))): i for i in base}
        ctx, tgt = [], []
        for i in base:
            j = key.get((int(self.recording[i]), int(round(self.start_time[i] * TARGET_HZ)) + WINDOW))
            if j is not None:
                ctx.append(i)
                tgt.append(j)
        ctx, tgt = np.array(ctx, dtype=np.int64), np.array(tgt, dtype=np.int64)
        return ctx, tgt, self.recording[ctx]


LABEL_FIELDS = ("cohort", "fall_mask", "fall_direction", "subject")


def _write_blob(path: Path, arr: np.ndarray) -> None:
    path.write_bytes(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def write_container(out_dir: str | Path, ws: WindowSet) -> Path:
    """Directory with manifest.json and one little-endian f32 blob per field."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = len(ws)
    shapes = {}
    for f in FIELDS:
        arr = np.asarray(getattr(ws, f))
        _write_blob(out / f"{f}.f32", arr.astype(np.float32))
        shapes[f] = [n, WINDOW, 6] if f == "windows" else [n]
    manifest = {
        "format": "f32-le",
        "dataset_id": ws.dataset_id,
        "count": n,
        "fields": {f: {"file": f"{f}.f32", "shape": shapes[f]} for f in FIELDS},
        "cohorts": ws.cohort_names,
        "subjects": ws.subject_names,
        "directions": [d.value for d in DIRECTIONS],
        "recordings": ws.recordings,
        "labels": list(LABEL_FIELDS),
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return out


def read_container(path: str | Path) -> WindowSet:
    path = Path(path)
    manifest_path = path / "manifest.json"
    if not manifest_path.exists():
        raise FileNotFoundError(f"no manifest.json in {path}")
    m = json.loads(manifest_path.read_text())
    cols = {}
    for f in FIELDS:
        spec = m["fields"][f]
        cols[f] = np.frombuffer((path / spec["file"]).read_bytes(), dtype="<f4").reshape(spec["shape"])
    return WindowSet(
        windows=cols["windows"].astype(np.float32),
        fall_mask=cols["fall_mask"] > 0.5,
        fall_direction=np.rint(cols["fall_direction"]).astype(np.int64),
        cohort=np.rint(cols["cohort"]).astype(np.int64),
        subject=np.rint(cols["subject"]).astype(np.int64),
        recording=np.rint(cols["recording"]).astype(np.int64),
        start_time=cols["start_time"].astype(np.float64),
        dense=cols["dense"] > 0.5,
        cohort_names=m["cohorts"],
        subject_names=m["subjects"],
        dataset_id=m["dataset_id"],
        recordings=m.get("recordings", []),
    )


def recording_metadata(rec: RawRecording, R: np.ndarray) -> dict:
    return {
        "subject_id": rec.subject_id,
        "cohort": rec.cohort_label,
        "placement": rec.placement.value,
        "source_hz": rec.source_hz,
        "duration_s": rec.duration,
        "rotation": np.asarray(R).tolist(),
        "falls": [{**asdict(iv), "direction": iv.direction.value} for iv in rec.fall_intervals],
    }
