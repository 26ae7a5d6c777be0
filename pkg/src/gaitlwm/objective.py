"""Pretraining objectives: latent world-model loss, sketched Epps-Pulley regulariser,
predictor-head family, raw-signal forecasting head, and the training loop."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterable, Literal

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import Encoder, GatedDeltaNetBlock, ModelConfig, save_checkpoint
from .numcore import RngStream

log = logging.getLogger(__name__)

PredictorKind = Literal["linear", "mlp", "transformer", "gdn"]
TOKEN_SCOPE = ("linear", "mlp")

CONTEXT_LEN = 464
HORIZON = 48


class TrainingDiverged(FloatingPointError):
    def __init__(self, step: int, message: str = "non-finite loss"):
        super().__init__(f"{message} at step {step}")
        self.step = step


# ---------------------------------------------------------------------------
# heads


class Projector(nn.Module):
    """Expand-compress MLP: d -> hidden -> d with LayerNorm and GELU between."""

    def __init__(self, d: int = 128, hidden: int = 512):
        super().__init__()
        self.expand = nn.Linear(d, hidden)
        self.norm = nn.LayerNorm(hidden)
        self.compress = nn.Linear(hidden, d)

    def forward(self, s):
        return self.compress(F.gelu(self.norm(self.expand(s))))


class LinearPredictor(nn.Module):
    scope = "token"

    def __init__(self, d: int = 128):
        super().__init__()
        self.weight = nn.Parameter(torch.empty(d, d))
        nn.init.orthogonal_(self.weight)

    def forward(self, z):
        return z @ self.weight.T


class MLPPredictor(nn.Module):
    scope = "token"

    def __init__(self, d: int = 128, hidden: int = 512):
        super().__init__()
        self.net = nn.Sequential(nn.Linear(d, hidden), nn.LayerNorm(hidden), nn.GELU(), nn.Linear(hidden, d))

    def forward(self, z):
        return self.net(z)


class TransformerPredictor(nn.Module):
    """Two-layer bidirectional encoder with a learned positional embedding."""

    scope = "sequence"

    def __init__(self, d: int = 128, seq_len: int = 512, n_heads: int = 4, d_ff: int = 512, n_layers: int = 2):
        super().__init__()
        self.pos = nn.Parameter(torch.randn(seq_len, d) * 0.02)
        layer = nn.TransformerEncoderLayer(d, n_heads, d_ff, dropout=0.0, batch_first=True)
        self.encoder = nn.TransformerEncoder(layer, n_layers, enable_nested_tensor=False)

    def forward(self, z):
        return self.encoder(z + self.pos[: z.shape[1]])


class GDNPredictor(nn.Module):
    """Single gated delta-rule block (value expansion 2)."""

    scope = "sequence"

    def __init__(self, d: int = 128, seq_len: int = 512, n_heads: int = 4, eig_mode="extended", chunk: int = 64):
        super().__init__()
        cfg = ModelConfig(seq_len=seq_len, d_model=d, n_heads=n_heads, d_k=d // n_heads, d_v=2 * d,
                          stack="G", eig_mode=eig_mode, chunk_size=chunk)
        self.block = GatedDeltaNetBlock(cfg)
        for sub in self.block.children():
            if isinstance(sub, nn.Linear):
                nn.init.orthogonal_(sub.weight)
                if sub.bias is not None:
                    nn.init.zeros_(sub.bias)

    def forward(self, z):
        return self.block(z)[0]


def make_predictor(kind: PredictorKind, d: int = 128, seq_len: int = 512, eig_mode="extended") -> nn.Module:
    if kind == "linear":
        return LinearPredictor(d)
    if kind == "mlp":
        return MLPPredictor(d)
    if kind == "transformer":
        return TransformerPredictor(d, seq_len)
    if kind == "gdn":
        return GDNPredictor(d, seq_len, eig_mode=eig_mode, chunk=min(64, seq_len))
    raise ValueError(f"unknown predictor {kind!r}")


class MaeHead(nn.Module):
    """Learned horizon queries cross-attending over encoder sequence states."""

    def __init__(self, d: int = 128, horizon: int = HORIZON, out_channels: int = 6, n_heads: int = 4):
        super().__init__()
        self.queries = nn.Parameter(torch.randn(horizon, d) * 0.02)
        self.attn = nn.MultiheadAttention(d, n_heads, batch_first=True)
        self.norm1 = nn.LayerNorm(d)
        self.ffn = nn.Sequential(nn.Linear(d, 2 * d), nn.GELU(), nn.Linear(2 * d, d))
        self.norm2 = nn.LayerNorm(d)
        self.out = nn.Linear(d, out_channels)

    def forward(self, memory: torch.Tensor) -> torch.Tensor:
        q = self.queries.expand(memory.shape[0], -1, -1)
        h = self.norm1(q + self.attn(q, memory, memory, need_weights=False)[0])
        h = self.norm2(h + self.ffn(h))
        return self.out(h)


# ---------------------------------------------------------------------------
# losses


def project(projector: Projector, s: torch.Tensor) -> torch.Tensor:
    return projector(s)


def predict(predictor: nn.Module, z: torch.Tensor) -> torch.Tensor:
    expected = 2 if predictor.scope == "token" else 3
    if z.dim() != expected:
        raise ValueError(f"{type(predictor).__name__} expects {expected}-d input, got shape {tuple(z.shape)}")
    return predictor(z)


def prediction_loss(z_hat: torch.Tensor, z_target: torch.Tensor) -> torch.Tensor:
    if z_hat.shape != z_target.shape:
        raise ValueError(f"shape mismatch {tuple(z_hat.shape)} vs {tuple(z_target.shape)}")
    return (z_hat - z_target).pow(2).mean()


def _hermite_rule(knots: int, dtype, device):
    t, w = np.polynomial.hermite_e.hermegauss(knots)
    # hermegauss integrates against exp(-t^2/2); fold in the 1/sqrt(2 pi) of the normal density
    w = w / math.sqrt(2 * math.pi)
    return torch.as_tensor(t, dtype=dtype, device=device), torch.as_tensor(w, dtype=dtype, device=device)


def sigreg(
    z: torch.Tensor,
    num_projections: int = 1024,
    knots: int = 17,
    generator: torch.Generator | None = None,
    directions: torch.Tensor | None = None,
) -> torch.Tensor:
    """Sketched Epps-Pulley statistic of the rows of ``z`` against N(0, I).

    For each random unit direction u, with y = z u,
    ``T = N * int |phi_hat_y(t) - exp(-t^2/2)|^2 phi(t) dt`` by Gauss-Hermite
    quadrature; the mean over directions is returned.
    """
    N, d = z.shape
    if N < 2:
        raise ValueError("sigreg needs at least two embeddings")
    if directions is None:
        directions = torch.randn(d, num_projections, generator=generator, dtype=z.dtype)
    u = directions / directions.norm(dim=0, keepdim=True)
    y = z @ u  # (N, M)
    t, w = _hermite_rule(knots, z.dtype, z.device)
    ty = y[..., None] * t  # (N, M, K)
    re = ty.cos().mean(0)
    im = ty.sin().mean(0)
    target = torch.exp(-0.5 * t * t)
    err = (re - target).pow(2) + im.pow(2)  # (M, K)
    return N * (err @ w).mean()


@dataclass
class LossParts:
    total: torch.Tensor
    pred: torch.Tensor
    sigreg: torch.Tensor


class LwmHeads(nn.Module):
    def __init__(self, d: int = 128, predictor: PredictorKind = "linear", seq_len: int = 512,
                 eig_mode="extended", projector_hidden: int = 512):
        super().__init__()
        self.kind = predictor
        self.projector = Projector(d, projector_hidden)
        self.predictor = make_predictor(predictor, d, seq_len, eig_mode)

    @property
    def scope(self) -> str:
        return self.predictor.scope


def lwm_loss(
    x_t: torch.Tensor,
    x_next: torch.Tensor,
    encoder: Encoder,
    heads: LwmHeads,
    lam: float,
    num_projections: int = 1024,
    knots: int = 17,
    generator: torch.Generator | None = None,
) -> LossParts:
    """Latent world-model loss for a batch of consecutive window pairs.

    Both windows pass through the shared encoder and projector with gradients
    on both branches: no stop-gradient, no EMA target.
    """
    if x_t.shape != x_next.shape:
        raise ValueError("context and target batches must be paired")
    if not 0.0 <= lam <= 1.0:
        raise ValueError("lambda must lie in [0, 1]")
    B = x_t.shape[0]
    out = encoder(torch.cat([x_t, x_next], dim=0))
    if heads.scope == "token":
        z = heads.projector(out.terminal_state_token)
        z_t, z_next = z[:B], z[B:]
        pred = prediction_loss(predict(heads.predictor, z_t), z_next)
        tokens = z
    else:
        z = heads.projector(out.terminal_sequence)
        z_t, z_next = z[:B], z[B:]
        pred = prediction_loss(predict(heads.predictor, z_t), z_next)
        tokens = z[:, -1]
    if lam > 0:
        reg = sigreg(tokens, num_projections, knots, generator)
    else:
        reg = tokens.new_zeros(())
    total = (1 - lam) * pred + lam * reg
    return LossParts(total, pred, reg)


def mae_context(window: torch.Tensor, context: int = CONTEXT_LEN) -> torch.Tensor:
    """Keep the first ``context`` samples and zero the rest (bit-exact zeros)."""
    ctx = window.clone()
    ctx[:, context:] = 0.0
    return ctx


def mae_forecast(window: torch.Tensor, encoder: Encoder, head: MaeHead, context: int = CONTEXT_LEN):
    """Forecast the final samples of ``window`` from its zero-padded prefix.

    Returns ``(prediction (B, horizon, C), L1 loss)``.
    """
    out = encoder(mae_context(window, context))
    pred = head(out.sequence)
    target = window[:, context: context + pred.shape[1]]
    return pred, (pred - target).abs().mean()


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    lam: float = 0.2
    epochs: int = 30
    lr: float = 1e-3
    batch_size: int = 256
    seed: int = 0
    objective: Literal["lin", "mae"] = "lin"
    predictor: PredictorKind = "linear"
    eig_mode: Literal["extended", "restricted"] = "extended"
    weight_decay: float = 0.01
    betas: tuple[float, float] = (0.9, 0.999)
    warmup_frac: float = 0.1
    decay_frac: float = 0.4
    sigreg_projections: int = 1024
    sigreg_knots: int = 17
    augment: bool = False
    max_steps: int | None = None
    recompute: bool = False  # activation checkpointing: less memory, about a third more time

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lam must lie in [0, 1]")
        if self.objective not in ("lin", "mae"):
            raise ValueError(f"unknown objective {self.objective!r}")
        self.betas = tuple(self.betas)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["betas"] = list(self.betas)
        return d


def lr_at(step: int, total: int, peak: float, warmup_frac: float = 0.1, decay_frac: float = 0.4) -> float:
    """Linear warmup, constant middle, cosine decay over the final ``decay_frac``."""
    warm = max(1, int(round(warmup_frac * total)))
    decay_start = total - int(round(decay_frac * total))
    if step < warm:
        return peak * (step + 1) / warm
    if step < decay_start:
        return peak
    span = max(1, total - decay_start)
    return 0.5 * peak * (1 + math.cos(math.pi * (step - decay_start) / span))


@dataclass
class TrainResult:
    encoder: Encoder
    heads: nn.Module
    trace: list[dict] = field(default_factory=list)
    model_config: ModelConfig | None = None
    train_config: TrainConfig | None = None


_SHUFFLE, _SIGREG, _INIT, _AUG = range(4)


def build_model(model_cfg: ModelConfig, train_cfg: TrainConfig) -> tuple[Encoder, nn.Module]:
    torch.manual_seed(RngStream(train_cfg.seed, _INIT).numpy().integers(2**62))
    encoder = Encoder(model_cfg)
    if train_cfg.objective == "lin":
        heads = LwmHeads(model_cfg.d_model, train_cfg.predictor, model_cfg.seq_len, train_cfg.eig_mode)
    else:
        heads = MaeHead(model_cfg.d_model, HORIZON, model_cfg.in_channels)
    return encoder, heads


def train(
    data: np.ndarray | tuple[np.ndarray, np.ndarray],
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    encoder: Encoder | None = None,
    heads: nn.Module | None = None,
    augment_fn=None,
) -> TrainResult:
    """Pretrain an encoder.

    ``data`` is a pair of arrays ``(context, target)`` each (P, L, C) for the
    latent objective, or a single (N, L, C) array for the forecasting objective.
    ``augment_fn(batch, rng)`` is applied per batch when ``cfg.augment`` is set.
    """
    if model_cfg.eig_mode != cfg.eig_mode:
        model_cfg = ModelConfig(**{**model_cfg.to_dict(), "eig_mode": cfg.eig_mode})
    if encoder is None or heads is None:
        encoder, heads = build_model(model_cfg, cfg)
    if cfg.objective == "lin":
        if not isinstance(data, tuple) or len(data) != 2:
            raise ValueError("latent objective needs (context, target) window pairs")
        ctx = torch.as_tensor(np.asarray(data[0], dtype=np.float32))
        tgt = torch.as_tensor(np.asarray(data[1], dtype=np.float32))
        if ctx.shape != tgt.shape:
            raise ValueError("unpaired windows")
        n = ctx.shape[0]
    else:
        win = torch.as_tensor(np.asarray(data, dtype=np.float32))
        n = win.shape[0]

    params = list(encoder.parameters()) + list(heads.parameters())
    opt = torch.optim.AdamW(params, lr=cfg.lr, betas=cfg.betas, weight_decay=cfg.weight_decay)
    bs = min(cfg.batch_size, n)
    steps_per_epoch = max(1, n // bs)
    total = steps_per_epoch * cfg.epochs
    if cfg.max_steps is not None:
        total = min(total, cfg.max_steps)

    shuffle = RngStream(cfg.seed, _SHUFFLE)
    sig_stream = RngStream(cfg.seed, _SIGREG)
    aug_stream = RngStream(cfg.seed, _AUG)
    trace: list[dict] = []
    encoder.recompute = cfg.recompute
    encoder.train()
    heads.train()
    step = 0
    for epoch in range(cfg.epochs):
        order = shuffle.child(epoch).numpy().permutation(n)
        for b in range(steps_per_epoch):
            if step >= total:
                break
            idx = torch.as_tensor(order[b * bs:(b + 1) * bs])
            lr = lr_at(step, total, cfg.lr, cfg.warmup_frac, cfg.decay_frac)
            for gparam in opt.param_groups:
                gparam["lr"] = lr
            if cfg.objective == "lin":
                xa, xb = ctx[idx], tgt[idx]
                if cfg.augment and augment_fn is not None:
                    xa, xb = augment_fn((xa, xb), aug_stream.child(step))
                parts = lwm_loss(xa, xb, encoder, heads, cfg.lam, cfg.sigreg_projections, cfg.sigreg_knots,
                                 sig_stream.child(step).torch())
                total_loss, pred_v, reg_v = parts.total, parts.pred.item(), parts.sigreg.item()
            else:
                xw = win[idx]
                if cfg.augment and augment_fn is not None:
                    xw = augment_fn(xw, aug_stream.child(step))
                _, total_loss = mae_forecast(xw, encoder, heads)
                pred_v, reg_v = total_loss.item(), 0.0
            if not torch.isfinite(total_loss):
                raise TrainingDiverged(step)
            opt.zero_grad(set_to_none=True)
            total_loss.backward()
            opt.step()
            trace.append({"step": step, "epoch": epoch, "total": total_loss.item(), "pred": pred_v,
                          "sigreg": reg_v, "lr": lr})
            if step % 10 == 0:
                log.info("step %d epoch %d loss %.5f pred %.5f sigreg %.4f lr %.2e",
                         step, epoch, trace[-1]["total"], pred_v, reg_v, lr)
            step += 1
    encoder.eval()
    heads.eval()
    return TrainResult(encoder, heads, trace, model_cfg, cfg)


TRACE_COLUMNS = ("step", "epoch", "total", "pred", "sigreg", "lr")


def write_trace(path: str | Path, trace: Iterable[dict]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=TRACE_COLUMNS)
        w.writeheader()
        for row in trace:
            w.writerow({k: (repr(float(row[k])) if k not in ("step", "epoch") else int(row[k])) for k in TRACE_COLUMNS})


def save_result(path: str | Path, result: TrainResult) -> None:
    cfg = {"model": result.model_config.to_dict(), "train": result.train_config.to_dict()}
    save_checkpoint(path, {"encoder": result.encoder, "heads": result.heads}, cfg)
