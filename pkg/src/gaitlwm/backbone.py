"""Hybrid encoder: long-convolution blocks, gated delta-rule blocks, gated MLP mixers.

Tensors are batch-first ``(B, L, d)`` throughout. The recurrent state per head
is a ``(d_v/H) x d_k`` matrix and evolves as

    S_t = g_t * S_{t-1} (I - a_t k_t k_t^T) + a_t v_t k_t^T

with ``a_t = 2 sigmoid(.)`` (extended eigenvalues 1 - a_t in (-1, 1)) or
``a_t = sigmoid(.)`` (restricted, eigenvalues in (0, 1)).
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Literal

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn
from torch.utils.checkpoint import checkpoint

from .numcore import rfft_circular_convolve

EigMode = Literal["extended", "restricted"]

STATE_NORM_LIMIT = 1e4


class StateOverflowError(FloatingPointError):
    """Recurrent state left the bounded regime (training has diverged)."""


@dataclass
class ModelConfig:
    seq_len: int = 512
    in_channels: int = 6
    d_model: int = 128
    d_ffn: int = 768
    # gated-MLP hidden width; see README "Parameter budget"
    mlp_hidden: int = 528
    n_heads: int = 4
    d_k: int = 32
    d_v: int = 256
    stack: str = "CCCGCCCGCCCG"
    eig_mode: EigMode = "extended"
    chunk_size: int = 64
    gate_kernel: int = 3
    norm_eps: float = 1e-5

    def __post_init__(self):
        if self.d_v % self.n_heads:
            raise ValueError("d_v must be divisible by n_heads")
        L = self.seq_len
        if L <= 0 or L & (L - 1):
            raise ValueError("seq_len must be a power of two")
        if set(self.stack) - {"C", "G"}:
            raise ValueError(f"stack may only contain C and G, got {self.stack!r}")
        if self.eig_mode not in ("extended", "restricted"):
            raise ValueError(f"unknown eig_mode {self.eig_mode!r}")

    @property
    def weave_after(self) -> tuple[int, ...]:
        """Layer indices whose output is woven into the next unit (every G but the last)."""
        gs = [i for i, c in enumerate(self.stack) if c == "G"]
        return tuple(gs[:-1])

    @classmethod
    def tiny(cls, **kw) -> "ModelConfig":
        base = dict(seq_len=32, d_model=8, d_ffn=16, mlp_hidden=16, n_heads=2, d_k=4, d_v=8,
                    stack="CCCG", chunk_size=8)
        base.update(kw)
        return cls(**base)

    def to_dict(self) -> dict:
        return asdict(self)


# ---------------------------------------------------------------------------
# gated delta rule kernels


def gated_delta_sequential(q, k, v, a, log_g, S0=None):
    """Token-by-token reference recurrence.

    q, k: (B, H, L, dk) with k unit-norm; v: (B, H, L, dv); a, log_g: (B, H, L).
    Returns outputs (B, H, L, dv) with o_t = S_t q_t, and the final state (B, H, dv, dk).
    """
    B, H, L, dk = k.shape
    dv = v.shape[-1]
    S = q.new_zeros(B, H, dv, dk) if S0 is None else S0
    eye = torch.eye(dk, dtype=q.dtype, device=q.device)
    outs = []
    for t in range(L):
        kt = k[:, :, t]
        at = a[:, :, t, None, None]
        gt = log_g[:, :, t, None, None].exp()
        erase = eye - at * kt[..., :, None] * kt[..., None, :]
        S = gt * (S @ erase) + at * v[:, :, t, :, None] * kt[..., None, :]
        outs.append((S @ q[:, :, t, :, None])[..., 0])
    return torch.stack(outs, dim=2), S


def gated_delta_chunked(q, k, v, a, log_g, chunk: int = 64, S0=None):
    """Chunk-parallel form of :func:`gated_delta_sequential` (same signature).

    Within a chunk with cumulative decay gamma_i, the pseudo-values
    u_i = a_i (v_i - g_i S_{i-1} k_i) solve a unit lower-triangular system,
    after which outputs and the carried state are plain matmuls.
    """
    B, H, L, dk = k.shape
    dv = v.shape[-1]
    c = min(chunk, L)
    pad = (-L) % c
    if pad:
        # zero keys / rates and unit gates leave the state untouched
        q, k, v = (F.pad(x, (0, 0, 0, pad)) for x in (q, k, v))
        a = F.pad(a, (0, pad))
        log_g = F.pad(log_g, (0, pad))
    n = (L + pad) // c
    q, k, v = (x.reshape(B, H, n, c, -1) for x in (q, k, v))
    a = a.reshape(B, H, n, c)
    lg = log_g.reshape(B, H, n, c).cumsum(-1)

    incl = torch.ones(c, c, dtype=torch.bool, device=q.device).tril()
    strict = incl.tril(-1)
    diff = lg[..., :, None] - lg[..., None, :]
    decay = diff.masked_fill(~incl, float("-inf")).exp()  # gamma_i / gamma_j, j <= i

    kk = k @ k.transpose(-1, -2)
    T = torch.eye(c, dtype=q.dtype, device=q.device) + (a[..., :, None] * kk * decay).masked_fill(~strict, 0.0)
    gamma = lg.exp()
    Wk = torch.linalg.solve_triangular(T, (a * gamma)[..., None] * k, upper=False, unitriangular=True)
    Uv = torch.linalg.solve_triangular(T, a[..., None] * v, upper=False, unitriangular=True)
    qk = (q @ k.transpose(-1, -2)) * decay
    tail = (lg[..., -1:] - lg).exp()  # gamma_c / gamma_i

    S = q.new_zeros(B, H, dv, dk) if S0 is None else S0
    outs = []
    for i in range(n):
        St = S.transpose(-1, -2)
        U = Uv[:, :, i] - Wk[:, :, i] @ St
        outs.append(gamma[:, :, i, :, None] * (q[:, :, i] @ St) + qk[:, :, i] @ U)
        S = gamma[:, :, i, -1, None, None] * S + (U * tail[:, :, i, :, None]).transpose(-1, -2) @ k[:, :, i]
    o = torch.stack(outs, dim=2).reshape(B, H, n * c, dv)[:, :, :L]
    return o, S


# ---------------------------------------------------------------------------
# blocks


class LongConvBlock(nn.Module):
    """Gated global convolution: ``LN(h + ReLU(w (*) (gate(h) * h)))``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d = cfg.d_model
        self.gate_kernel = cfg.gate_kernel
        self.depthwise = nn.Conv1d(d, d, cfg.gate_kernel, groups=d)
        self.pointwise = nn.Linear(d, d)
        self.kernel = nn.Parameter(torch.randn(d, cfg.seq_len) / math.sqrt(cfg.seq_len))
        self.norm = nn.LayerNorm(d, eps=cfg.norm_eps)

    def gate(self, h: torch.Tensor) -> torch.Tensor:
        x = F.pad(h.transpose(1, 2), (self.gate_kernel - 1, 0))  # causal
        x = F.silu(self.depthwise(x)).transpose(1, 2)
        return torch.sigmoid(self.pointwise(x))

    def forward(self, h: torch.Tensor) -> torch.Tensor:
        u = (self.gate(h) * h).transpose(1, 2)
        y = rfft_circular_convolve(u, self.kernel).transpose(1, 2)
        return self.norm(h + F.relu(y))


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim))

    def forward(self, x):
        return x * torch.rsqrt(x.pow(2).mean(-1, keepdim=True) + self.eps) * self.weight


class GatedDeltaNetBlock(nn.Module):
    """Multi-head gated delta-rule mixer with SiLU-gated RMSNorm readout."""

    def __init__(self, cfg: ModelConfig, eig_mode: EigMode | None = None):
        super().__init__()
        d, H = cfg.d_model, cfg.n_heads
        self.n_heads, self.d_k = H, cfg.d_k
        self.dv_head = cfg.d_v // H
        self.eig_mode = eig_mode or cfg.eig_mode
        self.chunk = cfg.chunk_size
        self.w_q = nn.Linear(d, H * cfg.d_k, bias=False)
        self.w_k = nn.Linear(d, H * cfg.d_k, bias=False)
        self.w_v = nn.Linear(d, cfg.d_v, bias=False)
        self.w_beta = nn.Linear(d, H)
        self.w_gate = nn.Linear(d, H)
        self.w_z = nn.Linear(d, cfg.d_v, bias=False)
        self.out_norm = RMSNorm(self.dv_head, cfg.norm_eps)
        self.w_o = nn.Linear(cfg.d_v, d, bias=False)
        self.norm = nn.LayerNorm(d, eps=cfg.norm_eps)
        self.parallel = True
        self.last_gates: dict[str, torch.Tensor] | None = None

    def _heads(self, x, dim):
        B, L, _ = x.shape
        return x.view(B, L, self.n_heads, dim).transpose(1, 2)

    def rates(self, x: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        """(a, log g) per head and step, each (B, H, L)."""
        s = torch.sigmoid(self.w_beta(x))
        a = 2.0 * s if self.eig_mode == "extended" else s
        log_g = F.logsigmoid(self.w_gate(x))
        return a.transpose(1, 2), log_g.transpose(1, 2)

    def mix(self, x: torch.Tensor):
        q = self._heads(self.w_q(x), self.d_k)
        k = F.normalize(self._heads(self.w_k(x), self.d_k), dim=-1, eps=1e-6)
        v = self._heads(self.w_v(x), self.dv_head)
        a, log_g = self.rates(x)
        if self.parallel:
            o, S = gated_delta_chunked(q, k, v, a, log_g, self.chunk)
        else:
            o, S = gated_delta_sequential(q, k, v, a, log_g)
        if not torch.isfinite(S).all() or S.detach().flatten(2).norm(dim=-1).max() >= STATE_NORM_LIMIT:
            raise StateOverflowError("recurrent state norm exceeded bound")
        self.last_gates = {"a": a.detach(), "g": log_g.detach().exp()}
        return o, S

    def forward(self, x: torch.Tensor):
        B, L, _ = x.shape
        o, S = self.mix(x)
        o = self.out_norm(o).transpose(1, 2).reshape(B, L, -1)
        y = self.w_o(o * F.silu(self.w_z(x)))
        return self.norm(x + y), S


class GatedMLP(nn.Module):
    """Residual channel mixer ``LN(h + W_out(SiLU(W_g h) * W_u h))``."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        d, f = cfg.d_model, cfg.mlp_hidden
        self.w_gate = nn.Linear(d, f, bias=False)
        self.w_up = nn.Linear(d, f, bias=False)
        self.w_out = nn.Linear(f, d, bias=False)
        self.norm = nn.LayerNorm(d, eps=cfg.norm_eps)

    def forward(self, h):
        return self.norm(h + self.w_out(F.silu(self.w_gate(h)) * self.w_up(h)))


class Embed(nn.Module):
    """Per-timestep affine 6 -> d followed by LayerNorm; no positional encoding."""

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.proj = nn.Linear(cfg.in_channels, cfg.d_model)
        self.norm = nn.LayerNorm(cfg.d_model, eps=cfg.norm_eps)

    def forward(self, x):
        if x.shape[-1] != self.proj.in_features:
            raise ValueError(f"expected {self.proj.in_features} channels, got {x.shape[-1]}")
        return self.norm(self.proj(x))


def state_weave(h_next: torch.Tensor, h_prev: torch.Tensor) -> torch.Tensor:
    """Add the terminal step of ``h_prev`` to position 0 of ``h_next``."""
    if h_next.shape != h_prev.shape:
        raise ValueError(f"shape mismatch {tuple(h_next.shape)} vs {tuple(h_prev.shape)}")
    first = h_next[:, :1] + h_prev[:, -1:]
    return torch.cat([first, h_next[:, 1:]], dim=1)


@dataclass
class EncoderOutput:
    terminal_state_token: torch.Tensor  # (B, d), read at L-1 of the final recurrent block
    pooled_embedding: torch.Tensor  # (B, d), time-mean of the final MLP output
    sequence: torch.Tensor  # (B, L, d), final MLP output
    terminal_sequence: torch.Tensor  # (B, L, d), final recurrent block output
    per_layer_hidden: list[torch.Tensor] | None = None
    states: list[torch.Tensor] = field(default_factory=list)


class Encoder(nn.Module):
    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg
        self.embed = Embed(cfg)
        self.mixers = nn.ModuleList(
            [LongConvBlock(cfg) if kind == "C" else GatedDeltaNetBlock(cfg) for kind in cfg.stack]
        )
        self.mlps = nn.ModuleList([GatedMLP(cfg) for _ in cfg.stack])
        self._weave = set(cfg.weave_after)
        # recompute layer activations in the backward pass to trade time for memory
        self.recompute = False
        init_weights(self)

    def set_parallel(self, flag: bool) -> None:
        for m in self.modules():
            if isinstance(m, GatedDeltaNetBlock):
                m.parallel = flag

    def _layer(self, j: int, h: torch.Tensor):
        mixer = self.mixers[j]
        if isinstance(mixer, GatedDeltaNetBlock):
            seq_out, S = mixer(h)
        else:
            seq_out, S = mixer(h), None
        return seq_out, self.mlps[j](seq_out), S

    def forward(self, x: torch.Tensor, keep_hidden: bool = False) -> EncoderOutput:
        h = self.embed(x)
        hidden, states = [], []
        seq_out = h
        use_ckpt = self.recompute and torch.is_grad_enabled()
        for j in range(len(self.mixers)):
            if use_ckpt:
                seq_out, h, S = checkpoint(self._layer, j, h, use_reentrant=False)
            else:
                seq_out, h, S = self._layer(j, h)
            if S is not None:
                states.append(S)
            if keep_hidden:
                hidden.append(h)
            if j in self._weave:
                h = state_weave(h, seq_out)
        return EncoderOutput(
            terminal_state_token=seq_out[:, -1],
            pooled_embedding=h.mean(dim=1),
            sequence=h,
            terminal_sequence=seq_out,
            per_layer_hidden=hidden if keep_hidden else None,
            states=states,
        )


def init_weights(module: nn.Module) -> None:
    """Orthogonal projections, zero biases, zero MLP out-projections, N(0, 1/L) conv kernels."""
    for m in module.modules():
        if isinstance(m, GatedMLP):
            nn.init.orthogonal_(m.w_gate.weight)
            nn.init.orthogonal_(m.w_up.weight)
            nn.init.zeros_(m.w_out.weight)
        elif isinstance(m, (GatedDeltaNetBlock, LongConvBlock, Embed)):
            for sub in m.children():
                if isinstance(sub, nn.Linear):
                    nn.init.orthogonal_(sub.weight)
                    if sub.bias is not None:
                        nn.init.zeros_(sub.bias)
                elif isinstance(sub, nn.Conv1d):
                    nn.init.zeros_(sub.bias)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# ---------------------------------------------------------------------------
# checkpoints: manifest.json + one little-endian f32 blob per parameter


def save_checkpoint(path: str | Path, modules: dict[str, nn.Module], config: dict) -> None:
    path = Path(path)
    (path / "params").mkdir(parents=True, exist_ok=True)
    registry = []
    for prefix, mod in modules.items():
        for name, t in mod.state_dict().items():
            key = f"{prefix}.{name}"
            arr = t.detach().cpu().to(torch.float32).numpy().astype("<f4", copy=False)
            fname = f"params/{key}.f32"
            (path / fname).write_bytes(np.ascontiguousarray(arr).tobytes())
            registry.append({"name": key, "shape": list(arr.shape), "file": fname})
    manifest = {"format": "f32-le", "config": config, "parameters": registry}
    (path / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def read_checkpoint(path: str | Path) -> tuple[dict, dict[str, dict[str, torch.Tensor]]]:
    """Returns ``(config, {module prefix: state_dict})``."""
    path = Path(path)
    manifest = json.loads((path / "manifest.json").read_text())
    groups: dict[str, dict[str, torch.Tensor]] = {}
    for entry in manifest["parameters"]:
        arr = np.frombuffer((path / entry["file"]).read_bytes(), dtype="<f4").reshape(entry["shape"])
        prefix, name = entry["name"].split(".", 1)
        groups.setdefault(prefix, {})[name] = torch.from_numpy(arr.copy())
    return manifest["config"], groups


def load_encoder(path: str | Path) -> Encoder:
    config, groups = read_checkpoint(path)
    enc = Encoder(ModelConfig(**config["model"]))
    enc.load_state_dict(groups["encoder"])
    enc.eval()
    return enc
