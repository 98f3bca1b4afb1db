"""Dense tensor arithmetic, AdamW and counter-based random streams.

Tensors are ``torch.Tensor``; torch's tape records the graph on every forward
and ``loss.backward()`` replays it. The functions here pin down the contracts
the rest of the package relies on (shape errors, NaN rejection, row-wise
softmax with max subtraction, explicit layer norm) and keep a finite-difference
oracle that is independent of autograd.
"""

from __future__ import annotations

import hashlib
import math
from typing import Callable, Iterable, Sequence

import numpy as np
import torch

MASK64 = (1 << 64) - 1


class DimensionError(ValueError):
    pass


class NumericError(FloatingPointError):
    pass


# ---------------------------------------------------------------------------
# random streams


def _derive_stream(stream: int, labels: tuple) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(stream.to_bytes(8, "little"))
    for label in labels:
        h.update(b"\x1f")
        h.update(str(label).encode())
    return int.from_bytes(h.digest(), "little")


class RngStream:
    """Philox stream keyed by (seed, stream id).

    Draws depend only on the key and the number of values already drawn, so
    the same (seed, stream) replays bit-identically on any platform.
    """

    def __init__(self, seed: int, stream: int = 0):
        self.seed = int(seed) & MASK64
        self.stream = int(stream) & MASK64
        self._gen = np.random.Generator(np.random.Philox(key=(self.stream << 64) | self.seed))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream={self.stream:#x}, counter={self.counter})"

    @property
    def counter(self) -> int:
        st = self._gen.bit_generator.state["state"]["counter"]
        return int(sum(int(w) << (64 * i) for i, w in enumerate(st)))

    def child(self, *labels) -> "RngStream":
        """Stream for a named sub-task; does not advance this stream."""
        return RngStream(self.seed, _derive_stream(self.stream, labels))

    def split(self, n: int) -> list["RngStream"]:
        return [self.child("split", k) for k in range(n)]

    def uniform(self, size=None, low=0.0, high=1.0):
        return self._gen.uniform(low, high, size)

    def normal(self, size=None):
        return self._gen.standard_normal(size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def choice(self, seq, size=None, replace=True):
        return self._gen.choice(seq, size=size, replace=replace)

    def permutation(self, x):
        return self._gen.permutation(x)

    def normal_tensor(self, *shape, dtype=torch.float32) -> torch.Tensor:
        return torch.from_numpy(self._gen.standard_normal(shape)).to(dtype)


# ---------------------------------------------------------------------------
# ops


def matmul(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise DimensionError(f"matmul: cannot multiply {tuple(a.shape)} by {tuple(b.shape)}")
    return a @ b


def softmax_rows(x: torch.Tensor) -> torch.Tensor:
    """Softmax along the last axis with per-row max subtraction."""
    if torch.isnan(x).any():
        raise NumericError("softmax_rows: NaN in input")
    shifted = x - x.amax(dim=-1, keepdim=True).detach()
    e = shifted.exp()
    return e / e.sum(dim=-1, keepdim=True)


def layer_norm(x, gain=None, bias=None, eps: float = 1e-5):
    if eps <= 0:
        raise ValueError("layer_norm: eps must be positive")
    d = x.shape[-1]
    for name, p in (("gain", gain), ("bias", bias)):
        if p is not None and tuple(p.shape) != (d,):
            raise DimensionError(f"layer_norm: {name} shape {tuple(p.shape)} does not match last axis {d}")
    mu = x.mean(dim=-1, keepdim=True)
    xc = x - mu
    var = (xc * xc).mean(dim=-1, keepdim=True)
    y = xc / torch.sqrt(var + eps)
    if gain is not None:
        y = y * gain
    if bias is not None:
        y = y + bias
    return y


def gelu(x):
    return 0.5 * x * (1.0 + torch.erf(x / math.sqrt(2.0)))


def add(a, b):
    return a + b


def mul(a, b):
    return a * b


def scale(a, s: float):
    return a * s


def reshape(a, *shape):
    return a.reshape(*shape)


def transpose(a, dim0=-2, dim1=-1):
    return a.transpose(dim0, dim1)


def concat(tensors: Sequence[torch.Tensor], axis: int = 0):
    return torch.cat(list(tensors), dim=axis)


def slice_(a, axis: int, start: int, stop: int):
    return a.narrow(axis, start, stop - start)


def embedding(table: torch.Tensor, ids: torch.Tensor):
    if ids.dtype not in (torch.int32, torch.int64):
        raise TypeError("embedding ids must be integer")
    if ids.numel() and (int(ids.min()) < 0 or int(ids.max()) >= table.shape[0]):
        raise IndexError(f"embedding id out of range for table of {table.shape[0]} rows")
    return table[ids]


def mean(a, axis=None):
    return a.mean() if axis is None else a.mean(dim=axis)


def sum_(a, axis=None):
    return a.sum() if axis is None else a.sum(dim=axis)


# ---------------------------------------------------------------------------
# optimizer


def adamw_step(params, grads, state, lr, beta1=0.9, beta2=0.999, eps=1e-8, weight_decay=0.01):
    """One bias-corrected AdamW update, in place.

    ``state`` maps ``id(param)`` to ``{"step", "m", "v"}`` and is created on
    first use. Frozen params (``requires_grad`` false) and missing grads are
    skipped. The decay term uses the pre-update weights:
    ``theta <- theta - lr * (m_hat / (sqrt(v_hat) + eps) + wd * theta)``.
    """
    with torch.no_grad():
        for p, g in zip(params, grads):
            if g is None or not p.requires_grad:
                continue
            if g.shape != p.shape:
                raise DimensionError(f"adamw_step: grad shape {tuple(g.shape)} != param shape {tuple(p.shape)}")
            s = state.get(id(p))
            if s is None:
                s = state[id(p)] = {"step": 0, "m": torch.zeros_like(p), "v": torch.zeros_like(p)}
            s["step"] += 1
            s["m"].mul_(beta1).add_(g, alpha=1 - beta1)
            s["v"].mul_(beta2).addcmul_(g, g, value=1 - beta2)
            m_hat = s["m"] / (1 - beta1 ** s["step"])
            v_hat = s["v"] / (1 - beta2 ** s["step"])
            update = m_hat / (v_hat.sqrt() + eps) + weight_decay * p
            p.sub_(lr * update)
    return state


class AdamW:
    """Holds AdamW state for a fixed parameter list."""

    def __init__(self, params: Iterable[torch.nn.Parameter], lr=5e-5, betas=(0.9, 0.999), eps=1e-8,
                 weight_decay=0.01):
        self.params = [p for p in params if p.requires_grad]
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.state: dict = {}

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        adamw_step(self.params, [p.grad for p in self.params], self.state, self.lr,
                   self.betas[0], self.betas[1], self.eps, self.weight_decay)


# ---------------------------------------------------------------------------
# finite-difference oracle


def numerical_grad(f: Callable[..., torch.Tensor], inputs: Sequence[torch.Tensor], h: float = 1e-4):
    """Central differences of scalar ``f(*inputs)`` w.r.t. each input, in float64."""
    xs = [x.detach().to(torch.float64).clone() for x in inputs]
    out = []
    with torch.no_grad():
        for x in xs:
            g = torch.zeros_like(x)
            flat, gflat = x.view(-1), g.view(-1)
            for k in range(flat.numel()):
                orig = flat[k].item()
                flat[k] = orig + h
                fp = float(f(*xs))
                flat[k] = orig - h
                fm = float(f(*xs))
                flat[k] = orig
                gflat[k] = (fp - fm) / (2 * h)
            out.append(g)
    return out


def analytic_grad(f, inputs):
    xs = [x.detach().to(torch.float64).clone().requires_grad_(True) for x in inputs]
    y = f(*xs)
    gs = torch.autograd.grad(y, xs, allow_unused=True)
    return [torch.zeros_like(x) if g is None else g for x, g in zip(xs, gs)]


def relative_error(a: torch.Tensor, b: torch.Tensor) -> float:
    """Norm-wise relative error ``max|a-b| / max(max|a|, max|b|)``."""
    denom = max(a.abs().max().item(), b.abs().max().item(), 1e-12)
    return (a - b).abs().max().item() / denom


def grad_check(f, inputs, h: float = 1e-4) -> float:
    """Largest relative error between autograd and central differences."""
    num = numerical_grad(f, inputs, h)
    ana = analytic_grad(f, inputs)
    return max(relative_error(a, n) for a, n in zip(ana, num))
