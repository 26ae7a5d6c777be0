"""Numerical substrate: seeded RNG streams, FFT circular convolution, gradient checks.

Differentiation is delegated to torch autograd; :func:`check_gradient` is the
independent central-difference oracle every trainable op is validated against.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np
import torch

DTYPE_TRAIN = torch.float32
DTYPE_ORACLE = torch.float64


@dataclass(frozen=True)
class RngStream:
    """A reproducible random stream identified by ``(seed, stream_id)``.

    Children produced by :meth:`split` are statistically independent of each
    other and of the parent (``numpy.random.SeedSequence`` spawn keys).
    """

    seed: int
    stream_id: int = 0
    path: tuple[int, ...] = ()

    def _seed_sequence(self) -> np.random.SeedSequence:
        return np.random.SeedSequence(entropy=self.seed, spawn_key=(self.stream_id, *self.path))

    def numpy(self) -> np.random.Generator:
        return np.random.default_rng(self._seed_sequence())

    def torch(self) -> torch.Generator:
        g = torch.Generator()
        g.manual_seed(int(self._seed_sequence().generate_state(1, dtype=np.uint64)[0] & 0x7FFF_FFFF_FFFF_FFFF))
        return g

    def split(self, n: int) -> list["RngStream"]:
        return [RngStream(self.seed, self.stream_id, (*self.path, i)) for i in range(n)]

    def child(self, i: int) -> "RngStream":
        return RngStream(self.seed, self.stream_id, (*self.path, i))


def _is_pow2(n: int) -> bool:
    return n > 0 and (n & (n - 1)) == 0


def rfft_circular_convolve(x: torch.Tensor, w: torch.Tensor) -> torch.Tensor:
    """Circular convolution along the last axis, computed in the frequency domain.

    ``x`` has shape ``(..., C, L)`` and ``w`` has shape ``(C, L)`` (broadcast over
    leading axes). ``L`` must be a power of two.
    """
    L = x.shape[-1]
    if w.shape[-1] != L or w.shape[-2] != x.shape[-2]:
        raise ValueError(f"shape mismatch: x {tuple(x.shape)} vs kernel {tuple(w.shape)}")
    if not _is_pow2(L):
        raise ValueError(f"sequence length must be a power of two, got {L}")
    xf = torch.fft.rfft(x, n=L)
    wf = torch.fft.rfft(w, n=L)
    return torch.fft.irfft(xf * wf, n=L)


def direct_circular_convolve(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """O(L^2) reference: ``y[c, t] = sum_s x[c, s] * w[c, (t - s) mod L]``."""
    x = np.asarray(x, dtype=np.float64)
    w = np.asarray(w, dtype=np.float64)
    L = x.shape[-1]
    idx = (np.arange(L)[:, None] - np.arange(L)[None, :]) % L  # [t, s]
    return np.einsum("...cs,cts->...ct", x, w[..., idx])


def relative_error(a, b) -> float:
    """Norm-wise relative error ``||a - b|| / max(||b||, tiny)``."""
    a = np.asarray(a.detach().cpu() if isinstance(a, torch.Tensor) else a, dtype=np.float64)
    b = np.asarray(b.detach().cpu() if isinstance(b, torch.Tensor) else b, dtype=np.float64)
    den = max(np.linalg.norm(b), 1e-30)
    return float(np.linalg.norm(a - b) / den)


def check_gradient(
    f: Callable[[torch.Tensor], torch.Tensor],
    x: torch.Tensor,
    eps: float = 1e-5,
    max_coords: int | None = None,
    seed: int = 0,
) -> float:
    """Max relative error between the autograd gradient and central differences.

    Error per coordinate is ``|analytic - numeric| / max(|analytic|, 1e-8)``.
    ``max_coords`` limits the check to a random subset of coordinates.
    """
    x = x.detach().to(DTYPE_ORACLE).clone()
    xr = x.clone().requires_grad_(True)
    y = f(xr)
    if y.numel() != 1 or not torch.isfinite(y).all():
        raise ValueError("f must return a finite scalar")
    (analytic,) = torch.autograd.grad(y, xr, allow_unused=True)
    if analytic is None:
        analytic = torch.zeros_like(x)
    analytic = analytic.reshape(-1)

    flat = x.reshape(-1)
    coords = np.arange(flat.numel())
    if max_coords is not None and flat.numel() > max_coords:
        coords = np.sort(np.random.default_rng(seed).choice(flat.numel(), max_coords, replace=False))

    worst = 0.0
    with torch.no_grad():
        for i in coords:
            orig = flat[i].item()
            flat[i] = orig + eps
            fp = f(x).item()
            flat[i] = orig - eps
            fm = f(x).item()
            flat[i] = orig
            if not (np.isfinite(fp) and np.isfinite(fm)):
                raise ValueError("f is not finite in the perturbation neighbourhood")
            numeric = (fp - fm) / (2 * eps)
            a = analytic[i].item()
            worst = max(worst, abs(a - numeric) / max(abs(a), 1e-8))
    return worst


class _Closure(torch.nn.Module):
    def __init__(self, inner: torch.nn.Module, fn: Callable[[torch.nn.Module], torch.Tensor]):
        super().__init__()
        self.inner = inner
        self.fn = fn

    def forward(self) -> torch.Tensor:
        return self.fn(self.inner)


def check_module_gradients(
    module: torch.nn.Module,
    loss_fn: Callable[[torch.nn.Module], torch.Tensor],
    eps: float = 1e-5,
    coords_per_param: int = 6,
    seed: int = 0,
) -> dict[str, float]:
    """Per-parameter :func:`check_gradient` for a scalar loss of ``module``.

    The module must already be in float64. Returns ``{param name: max rel. error}``.
    """
    wrapper = _Closure(module, loss_fn)
    out = {}
    for k, (name, p) in enumerate(module.named_parameters()):
        def f(x: torch.Tensor, name=name) -> torch.Tensor:
            return torch.func.functional_call(wrapper, {"inner." + name: x}, ())

        out[name] = check_gradient(f, p.detach(), eps=eps, max_coords=coords_per_param, seed=seed + k)
    return out


def assert_finite(t: torch.Tensor, what: str = "tensor") -> torch.Tensor:
    if not torch.isfinite(t).all():
        raise FloatingPointError(f"non-finite values in {what}")
    return t
