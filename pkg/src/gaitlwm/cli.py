"""Command-line interface: ``gaitlwm {synth,harmonize,pretrain,embed,probe,diagnose}``."""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .backbone import Encoder, GatedDeltaNetBlock, ModelConfig, StateOverflowError, load_encoder
from .numcore import RngStream
from .objective import TrainConfig, TrainingDiverged, save_result, train, write_trace
from .probes import (
    PROTOCOLS,
    awgn,
    cross_validate,
    effective_rank,
    latent_straightness,
    probe_inputs,
)
from .signalio import (
    LABEL_FIELDS,
    WINDOW,
    AugmentationConfig,
    FallInterval,
    RawRecording,
    WindowSet,
    harmonize,
    make_batch_augmenter,
    read_container,
    recording_metadata,
    write_container,
)
from .synthgait import DEVICE_TO_CANONICAL, default_spec, generate_recordings, load_spec

log = logging.getLogger("gaitlwm")

THREADS_ENV = "GAITLWM_THREADS"
EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_DIVERGED = 0, 2, 3, 4
EMBED_FILE = "embeddings.f32"


class ConfigError(ValueError):
    pass


class DataError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# run configuration


def _check_keys(section: str, given: dict, cls) -> None:
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(given) - allowed)
    if unknown:
        raise ConfigError(f"unknown key(s) in {section!r}: {', '.join(unknown)}")


@dataclass
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    augment: AugmentationConfig = field(default_factory=AugmentationConfig)
    data: str = ""
    out: str = ""
    seed: int = 0

    @classmethod
    def from_dict(cls, doc: dict) -> "RunConfig":
        if not isinstance(doc, dict):
            raise ConfigError("run config must be a JSON object")
        _check_keys("run config", doc, cls)
        sections = {"model": ModelConfig, "train": TrainConfig, "augment": AugmentationConfig}
        kw = {}
        for name, sub in sections.items():
            part = doc.get(name, {})
            if not isinstance(part, dict):
                raise ConfigError(f"{name!r} must be an object")
            _check_keys(name, part, sub)
            try:
                kw[name] = sub(**part)
            except (TypeError, ValueError) as exc:
                raise ConfigError(f"invalid {name!r} section: {exc}") from exc
        for key in ("data", "out"):
            if not isinstance(doc.get(key, ""), str):
                raise ConfigError(f"{key!r} must be a string path")
        seed = doc.get("seed", 0)
        if not isinstance(seed, int) or isinstance(seed, bool):
            raise ConfigError("'seed' must be an integer")
        return cls(data=doc.get("data", ""), out=doc.get("out", ""), seed=seed, **kw)

    def to_dict(self) -> dict:
        return {
            "model": self.model.to_dict(),
            "train": self.train.to_dict(),
            "augment": asdict(self.augment),
            "data": self.data,
            "out": self.out,
            "seed": self.seed,
        }


def load_run_config(path: str | None) -> RunConfig:
    if path is None:
        return RunConfig()
    p = Path(path)
    if not p.exists():
        raise ConfigError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config is not valid JSON: {exc}") from exc
    return RunConfig.from_dict(doc)


@contextlib.contextmanager
def run_lock(out_dir: Path):
    """Exclusive ownership of a run directory for the duration of a command."""
    out_dir.mkdir(parents=True, exist_ok=True)
    lock = out_dir / ".lock"
    try:
        fd = os.open(lock, os.O_CREAT | os.O_EXCL | os.O_WRONLY)
    except FileExistsError:
        raise ConfigError(f"run directory {out_dir} is locked by another command ({lock})") from None
    try:
        os.write(fd, str(os.getpid()).encode())
        os.close(fd)
        yield out_dir
    finally:
        lock.unlink(missing_ok=True)


def _write_json(path: Path, doc) -> None:
    path.write_text(json.dumps(doc, indent=2, sort_keys=True))


def _load_container(path: str) -> WindowSet:
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise DataError(f"no window container at {p}")
    return read_container(p)


def _load_checkpoint(path: str) -> Encoder:
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise DataError(f"no checkpoint at {p}")
    return load_encoder(p)


@torch.no_grad()
def embed_windows(encoder: Encoder, windows: np.ndarray, batch_size: int = 32) -> np.ndarray:
    encoder.eval()
    out = []
    for i in range(0, len(windows), batch_size):
        x = torch.from_numpy(np.ascontiguousarray(windows[i:i + batch_size], dtype=np.float32))
        out.append(probe_inputs(encoder(x)))
    if not out:
        return np.zeros((0, encoder.cfg.d_model), dtype=np.float32)
    return np.concatenate(out).astype(np.float32)


# ---------------------------------------------------------------------------
# commands


def cmd_synth(args) -> int:
    if args.spec is not None:
        if not Path(args.spec).exists():
            raise DataError(f"spec file not found: {args.spec}")
        specs, seed, dataset_id = load_spec(args.spec)
    else:
        from .synthgait import SynthCohortSpec

        doc = default_spec(seed=0 if args.seed is None else args.seed)
        specs = [SynthCohortSpec(**c) for c in doc["cohorts"]]
        seed, dataset_id = doc["seed"], doc["dataset_id"]
    if args.seed is not None:
        seed = args.seed
    out = Path(args.out)
    with run_lock(out):
        recs = generate_recordings(specs, RngStream(seed), dataset_id)
        if args.raw:
            write_raw_recordings(out / "raw", recs, DEVICE_TO_CANONICAL)
        groups = [harmonize(r, DEVICE_TO_CANONICAL) for r in recs]
        meta = [recording_metadata(r, DEVICE_TO_CANONICAL) for r in recs]
        ws = WindowSet.from_windows(groups, dataset_id, meta)
        write_container(out, ws)
    print(f"wrote {len(ws)} windows from {len(recs)} recordings to {out}")
    return EXIT_OK


RAW_INDEX = "recordings.json"


def write_raw_recordings(out_dir: Path, recs: list[RawRecording], rotation: np.ndarray) -> None:
    """Raw-recording directory: one CSV per recording plus an index for ``harmonize``."""
    out_dir.mkdir(parents=True, exist_ok=True)
    index = []
    for i, rec in enumerate(recs):
        name = f"rec{i:04d}.csv"
        np.savetxt(out_dir / name, rec.samples, delimiter=",", fmt="%.9g")
        index.append({
            "file": name,
            "source_hz": rec.source_hz,
            "placement": rec.placement.value,
            "subject_id": rec.subject_id,
            "cohort": rec.cohort_label,
            "rotation": np.asarray(rotation).tolist(),
            "falls": [{"start": iv.start, "end": iv.end, "direction": iv.direction.value}
                      for iv in rec.fall_intervals],
        })
    _write_json(out_dir / RAW_INDEX, {"dataset_id": recs[0].dataset_id if recs else "", "recordings": index})


def read_raw_recordings(in_dir: Path) -> tuple[list[RawRecording], list[np.ndarray], str]:
    idx_path = in_dir / RAW_INDEX
    if not idx_path.exists():
        raise DataError(f"no {RAW_INDEX} in {in_dir}")
    doc = json.loads(idx_path.read_text())
    recs, rots = [], []
    for entry in doc["recordings"]:
        path = in_dir / entry["file"]
        if not path.exists():
            raise DataError(f"missing recording file {path}")
        samples = np.loadtxt(path, delimiter=",", ndmin=2)
        falls = [FallInterval(f["start"], f["end"], f["direction"]) for f in entry.get("falls", [])]
        recs.append(RawRecording(samples, float(entry["source_hz"]), entry.get("placement", "lower_back"),
                                 entry.get("subject_id", ""), doc.get("dataset_id", ""), falls,
                                 entry.get("cohort")))
        rots.append(np.asarray(entry.get("rotation", np.eye(3).tolist()), dtype=np.float64))
    return recs, rots, doc.get("dataset_id", "")


def cmd_harmonize(args) -> int:
    recs, rots, dataset_id = read_raw_recordings(Path(args.input))
    out = Path(args.out)
    with run_lock(out):
        groups = [harmonize(r, R, dense_falls=not args.no_dense) for r, R in zip(recs, rots)]
        meta = [recording_metadata(r, R) for r, R in zip(recs, rots)]
        ws = WindowSet.from_windows(groups, dataset_id, meta)
        write_container(out, ws)
    print(f"wrote {len(ws)} windows to {out}")
    return EXIT_OK


def resolve_pretrain_config(args) -> tuple[RunConfig, dict]:
    cfg = load_run_config(args.config)
    overrides = {}
    train_kw = cfg.train.to_dict()
    objective = args.objective or train_kw["objective"]
    if args.objective:
        overrides["objective"] = args.objective
    if args.lam is not None:
        if objective == "mae":
            raise ConfigError("--lambda only applies to the latent objective (lin), not mae")
        overrides["lam"] = args.lam
    if args.predictor is not None:
        if objective == "mae":
            raise ConfigError("--predictor only applies to the latent objective (lin)")
        overrides["predictor"] = args.predictor
    for flag, key in (("eig", "eig_mode"), ("epochs", "epochs"), ("batch_size", "batch_size"),
                      ("max_steps", "max_steps"), ("seed", "seed")):
        val = getattr(args, flag)
        if val is not None:
            overrides[key] = val
    if args.recompute:
        overrides["recompute"] = True
    train_kw.update(overrides)
    try:
        cfg.train = TrainConfig(**train_kw)
        if args.tiny:
            cfg.model = ModelConfig.tiny(seq_len=WINDOW)
        cfg.model = ModelConfig(**{**cfg.model.to_dict(), "eig_mode": cfg.train.eig_mode})
    except (TypeError, ValueError) as exc:
        raise ConfigError(str(exc)) from exc
    if args.seed is not None:
        cfg.seed = args.seed
    if args.data:
        cfg.data = args.data
    if args.out:
        cfg.out = args.out
    if not cfg.data or not cfg.out:
        raise ConfigError("pretrain needs a data container and an output directory")
    if args.tiny:
        overrides["tiny"] = True
    return cfg, overrides


def cmd_pretrain(args) -> int:
    cfg, overrides = resolve_pretrain_config(args)
    ws = _load_container(cfg.data)
    if ws.windows.shape[1] != cfg.model.seq_len:
        raise DataError(f"container windows have length {ws.windows.shape[1]}, model expects {cfg.model.seq_len}")
    if cfg.train.objective == "lin":
        ctx, tgt, _ = ws.pairs()
        if len(ctx) == 0:
            raise DataError("container has no adjacent window pairs")
        data = (ws.windows[ctx], ws.windows[tgt])
    else:
        data = ws.windows[~ws.dense]
    augment_fn = make_batch_augmenter(cfg.augment) if cfg.train.augment else None
    out = Path(cfg.out)
    with run_lock(out):
        started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
        result = train(data, cfg.model, cfg.train, augment_fn=augment_fn)
        save_result(out / "checkpoint", result)
        write_trace(out / "trace.csv", result.trace)
        _write_json(out / "run.json", {
            "command": "pretrain",
            "version": __version__,
            "resolved": cfg.to_dict(),
            "overrides": overrides,
            "seed": cfg.train.seed,
            "started": started,
            "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
            "steps": len(result.trace),
        })
    last = result.trace[-1] if result.trace else {}
    print(f"trained {len(result.trace)} steps, final loss {last.get('total', float('nan')):.6f}; wrote {out}")
    return EXIT_OK


def cmd_embed(args) -> int:
    encoder = _load_checkpoint(args.checkpoint)
    ws = _load_container(args.container)
    out = Path(args.out)
    with run_lock(out):
        emb = embed_windows(encoder, ws.windows, args.batch_size)
        (out / EMBED_FILE).write_bytes(np.ascontiguousarray(emb, dtype="<f4").tobytes())
        _write_json(out / "manifest.json", {
            "format": "f32-le",
            "file": EMBED_FILE,
            "shape": list(emb.shape),
            "checkpoint": str(Path(args.checkpoint).resolve()),
            "container": str(Path(args.container).resolve()),
            "embedding": "pooled_embedding",
        })
    print(f"wrote {emb.shape[0]}x{emb.shape[1]} embeddings to {out}")
    return EXIT_OK


def read_embeddings(path: str | Path) -> tuple[np.ndarray, dict]:
    p = Path(path)
    if not (p / "manifest.json").exists():
        raise DataError(f"no embedding manifest in {p}")
    m = json.loads((p / "manifest.json").read_text())
    arr = np.frombuffer((p / m["file"]).read_bytes(), dtype="<f4").reshape(m["shape"])
    return arr, m


def cmd_probe(args) -> int:
    if args.labels is None or args.labels not in LABEL_FIELDS:
        raise ConfigError(f"--labels must name a label field; available: {', '.join(LABEL_FIELDS)}")
    if args.noise is not None and args.checkpoint is None:
        raise ConfigError("--noise needs --checkpoint (noise is applied to windows before embedding)")
    if args.embeddings is None and args.checkpoint is None:
        raise ConfigError("give --embeddings or --checkpoint")
    container = args.container
    if args.checkpoint is not None:
        if container is None:
            raise ConfigError("--checkpoint needs --container")
        ws = _load_container(container)
        windows = ws.windows
        if args.noise is not None:
            windows = awgn(windows, args.noise, RngStream(args.seed, 13).numpy())
        emb = embed_windows(_load_checkpoint(args.checkpoint), windows)
    else:
        emb, m = read_embeddings(args.embeddings)
        ws = _load_container(container or m["container"])
    if len(emb) != len(ws):
        raise DataError(f"{len(emb)} embeddings for {len(ws)} windows")
    keep = ~ws.dense if args.exclude_dense else np.ones(len(ws), dtype=bool)
    y = ws.labels(args.labels)[keep]
    if args.labels == "fall_direction":
        has = y >= 0
        keep = np.flatnonzero(keep)[has]
        y = y[has]
    else:
        keep = np.flatnonzero(keep)
    report = cross_validate(emb[keep], y, ws.subject[keep], args.protocol, seed=args.seed, label_name=args.labels)
    report.notes["snr_db"] = args.noise if args.noise is not None else "inf"
    out = Path(args.out)
    with run_lock(out):
        report.write(out)
    print(json.dumps(report.metrics, sort_keys=True))
    return EXIT_OK


@torch.no_grad()
def diagnostics(encoder: Encoder, ws: WindowSet, max_windows: int = 1024, bins: int = 20,
                straightness_windows: int = 32) -> dict:
    encoder.eval()
    n = min(len(ws), max_windows)
    windows = ws.windows[:n]
    emb = embed_windows(encoder, windows)
    straight = []
    for i in range(min(n, straightness_windows)):
        seq = encoder(torch.from_numpy(windows[i:i + 1])).sequence[0].numpy()
        straight.append(latent_straightness(seq))
    gates = []
    recurrent = [m for m in encoder.mixers if isinstance(m, GatedDeltaNetBlock)]
    for _ in recurrent:
        gates.append({"a": np.zeros(bins, dtype=np.int64), "g": np.zeros(bins, dtype=np.int64)})
    a_edges = np.linspace(0.0, 2.0, bins + 1)
    g_edges = np.linspace(0.0, 1.0, bins + 1)
    for i in range(0, n, 32):
        encoder(torch.from_numpy(windows[i:i + 32]))
        for hist, m in zip(gates, recurrent):
            hist["a"] += np.histogram(m.last_gates["a"].numpy(), a_edges)[0]
            hist["g"] += np.histogram(m.last_gates["g"].numpy(), g_edges)[0]
    return {
        "windows": int(n),
        "effective_rank": effective_rank(emb),
        "embedding_dim": int(emb.shape[1]),
        "latent_straightness": float(np.mean(straight)),
        "straightness_domain": "per-window timestep trajectory of the final layer",
        "gate_histograms": [
            {"layer": int(j), "a_edges": a_edges.tolist(), "a_counts": h["a"].tolist(),
             "g_edges": g_edges.tolist(), "g_counts": h["g"].tolist()}
            for j, h in zip([k for k, m in enumerate(encoder.mixers) if isinstance(m, GatedDeltaNetBlock)], gates)
        ],
    }


def cmd_diagnose(args) -> int:
    encoder = _load_checkpoint(args.checkpoint)
    ws = _load_container(args.container)
    if len(ws) < 512:
        log.warning("only %d windows available; effective rank is best read over >= 512", len(ws))
    report = diagnostics(encoder, ws, args.max_windows)
    out = Path(args.out)
    with run_lock(out):
        _write_json(out / "diagnostics.json", report)
    print(f"effective rank {report['effective_rank']:.3f} over {report['windows']} windows; "
          f"straightness {report['latent_straightness']:.3f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="gaitlwm", description=__doc__)
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("--threads", type=int, default=None,
                   help=f"torch intra-op threads (default: ${THREADS_ENV} or 1)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic two-cohort corpus")
    s.add_argument("--spec", help="cohort spec JSON (default: built-in control/impaired presets)")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=None)
    s.add_argument("--raw", action="store_true", help="also write raw device-frame recordings")
    s.set_defaults(func=cmd_synth)

    h = sub.add_parser("harmonize", help="rotate, resample, scale and window raw recordings")
    h.add_argument("--input", required=True, help=f"directory with {RAW_INDEX} and CSV recordings")
    h.add_argument("--out", required=True)
    h.add_argument("--no-dense", action="store_true", help="skip dense fall oversampling")
    h.set_defaults(func=cmd_harmonize)

    t = sub.add_parser("pretrain", help="pretrain an encoder")
    t.add_argument("--config", help="run config JSON")
    t.add_argument("--data", help="window container")
    t.add_argument("--out", help="run directory")
    t.add_argument("--objective", choices=("lin", "mae"))
    t.add_argument("--lambda", dest="lam", type=float)
    t.add_argument("--predictor", choices=("linear", "mlp", "transformer", "gdn"))
    t.add_argument("--eig", choices=("extended", "restricted"))
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--max-steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--tiny", action="store_true", help="use the tiny test-scale model")
    t.add_argument("--recompute", action="store_true",
                   help="recompute activations in the backward pass (larger batches in less memory)")
    t.set_defaults(func=cmd_pretrain)

    e = sub.add_parser("embed", help="pooled embeddings for every window")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--container", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--batch-size", type=int, default=32)
    e.set_defaults(func=cmd_embed)

    r = sub.add_parser("probe", help="frozen linear probe under subject-disjoint CV")
    r.add_argument("--embeddings", help="embedding directory from `embed`")
    r.add_argument("--checkpoint", help="embed on the fly (required for --noise)")
    r.add_argument("--container", help="window container (labels, subjects)")
    r.add_argument("--labels", help=f"label field: {', '.join(LABEL_FIELDS)}")
    r.add_argument("--protocol", choices=PROTOCOLS, default="kfold5")
    r.add_argument("--noise", type=float, help="AWGN SNR in dB applied to windows before embedding")
    r.add_argument("--exclude-dense", action="store_true", help="drop fall-oversampling windows")
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_probe)

    d = sub.add_parser("diagnose", help="effective rank, straightness and gate histograms")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--container", required=True)
    d.add_argument("--max-windows", type=int, default=1024)
    d.add_argument("--out", required=True)
    d.set_defaults(func=cmd_diagnose)
    return p


def _threads(arg: int | None) -> int:
    if arg is not None:
        return arg
    env = os.environ.get(THREADS_ENV)
    if env is None:
        return 1
    try:
        return max(1, int(env))
    except ValueError:
        raise ConfigError(f"${THREADS_ENV} must be an integer, got {env!r}") from None


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        torch.set_num_threads(_threads(args.threads))
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, FileNotFoundError, KeyError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (TrainingDiverged, StateOverflowError) as exc:
        print(f"numerical divergence: {exc}", file=sys.stderr)
        return EXIT_DIVERGED
    except ValueError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
