"""Dense tensor primitives, reverse-mode backward, Adam, and the ATSR file format.

Tensors are plain ``torch.Tensor`` objects; torch's autograd tape records the
graph. This module adds the checked op surface the rest of the package uses:
shape validation with descriptive errors, a one-shot ``backward`` and an
explicit Adam state.
"""
from __future__ import annotations

import math
import struct
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import torch
import torch.nn.functional as F

_DEBUG = False


def set_debug(enabled: bool) -> None:
    """Enable finiteness assertions after every op."""
    global _DEBUG
    _DEBUG = enabled


def set_determinism(threads: int = 1) -> None:
    torch.set_num_threads(max(1, threads))
    torch.use_deterministic_algorithms(True)


class ShapeError(ValueError):
    pass


_KINKS: list | None = None


@contextmanager
def kink_trace():
    """Collect the discrete state (cell indices, sign patterns) of piecewise
    ops evaluated inside the block. Two evaluations with equal traces lie on
    the same smooth piece."""
    global _KINKS
    prev, _KINKS = _KINKS, []
    try:
        yield _KINKS
    finally:
        _KINKS = prev


def record_kinks(state: torch.Tensor) -> None:
    if _KINKS is not None:
        _KINKS.append(state.detach().clone())


def _check(out: torch.Tensor, kind: str) -> torch.Tensor:
    if _DEBUG and not torch.isfinite(out).all():
        raise FloatingPointError(f"{kind}: non-finite values in output")
    return out


def _same_shape(kind: str, a: torch.Tensor, b: torch.Tensor) -> None:
    if a.shape != b.shape:
        raise ShapeError(f"{kind}: shape mismatch {list(a.shape)} vs {list(b.shape)}")


def add(a, b):
    _same_shape("add", a, b)
    return _check(a + b, "add")


def sub(a, b):
    _same_shape("sub", a, b)
    return _check(a - b, "sub")


def mul(a, b):
    _same_shape("mul", a, b)
    return _check(a * b, "mul")


def scalar_mul(a, s: float):
    return _check(a * s, "scalar-mul")


def abs_(a):
    record_kinks(a > 0)
    return _check(a.abs(), "abs")


def square(a):
    return _check(a * a, "square")


def sqrt(a):
    return _check(torch.sqrt(a), "sqrt")


def mean(a):
    return _check(a.mean(), "mean")


def sum_(a):
    return _check(a.sum(), "sum")


def concat_channel(*xs):
    ref = xs[0]
    for x in xs[1:]:
        if x.dim() != 4 or x.shape[0] != ref.shape[0] or x.shape[2:] != ref.shape[2:]:
            raise ShapeError(
                f"concat-channel: shape mismatch {list(ref.shape)} vs {list(x.shape)}"
            )
    return _check(torch.cat(xs, dim=1), "concat-channel")


def leaky_relu(a, slope: float = 0.2):
    record_kinks(a > 0)
    return _check(F.leaky_relu(a, slope), "leaky-relu")


def sigmoid(a):
    return _check(torch.sigmoid(a), "sigmoid")


def conv2d(x, weight, bias=None, stride: int = 1, padding: int = 0):
    if x.dim() != 4 or weight.dim() != 4 or x.shape[1] != weight.shape[1]:
        raise ShapeError(
            f"conv2d: shape mismatch {list(x.shape)} vs {list(weight.shape)}"
        )
    return _check(F.conv2d(x, weight, bias, stride=stride, padding=padding), "conv2d")


def upsample2x(x):
    if x.dim() != 4:
        raise ShapeError(f"bilinear-upsample-2x: expected rank 4, got {list(x.shape)}")
    return _check(
        F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False),
        "bilinear-upsample-2x",
    )


def resize_bilinear(x, size: tuple[int, int]):
    return _check(F.interpolate(x, size=size, mode="bilinear", align_corners=False), "resize")


def avgpool(x, k: int = 2):
    if x.dim() != 4 or x.shape[2] % k or x.shape[3] % k:
        raise ShapeError(f"avgpool: shape {list(x.shape)} not divisible by {k}")
    return _check(F.avg_pool2d(x, k), "avgpool")


def gaussian_kernel1d(size: int, sigma: float, dtype=torch.float32) -> torch.Tensor:
    r = torch.arange(size, dtype=torch.float64) - (size - 1) / 2
    k = torch.exp(-0.5 * (r / sigma) ** 2)
    return (k / k.sum()).to(dtype)


def gaussian_blur(x, size: int = 9, sigma: float = 3.0):
    """Separable Gaussian blur with reflective padding, per channel."""
    if x.dim() != 4:
        raise ShapeError(f"gaussian-blur: expected rank 4, got {list(x.shape)}")
    c = x.shape[1]
    pad = size // 2
    if pad >= min(x.shape[2], x.shape[3]):
        raise ShapeError(f"gaussian-blur: kernel {size} too large for {list(x.shape)}")
    k = gaussian_kernel1d(size, sigma, x.dtype).to(x.device)
    kx = k.view(1, 1, 1, size).repeat(c, 1, 1, 1)
    ky = k.view(1, 1, size, 1).repeat(c, 1, 1, 1)
    y = F.pad(x, (pad, pad, pad, pad), mode="reflect")
    y = F.conv2d(y, kx, groups=c)
    y = F.conv2d(y, ky, groups=c)
    return _check(y, "gaussian-blur")


def hflip(x):
    return _check(torch.flip(x, dims=[-1]), "horizontal-flip")


OPS: dict[str, Callable] = {
    "add": add,
    "sub": sub,
    "mul": mul,
    "scalar-mul": scalar_mul,
    "abs": abs_,
    "square": square,
    "sqrt": sqrt,
    "mean": mean,
    "sum": sum_,
    "concat-channel": concat_channel,
    "leaky-relu": leaky_relu,
    "sigmoid": sigmoid,
    "conv2d": conv2d,
    "bilinear-upsample-2x": upsample2x,
    "avgpool": avgpool,
    "gaussian-blur": gaussian_blur,
    "horizontal-flip": hflip,
}


def forward_op(kind: str, *inputs, **kwargs) -> torch.Tensor:
    try:
        fn = OPS[kind]
    except KeyError:
        raise ValueError(f"unknown op kind {kind!r}") from None
    return fn(*inputs, **kwargs)


def backward(root: torch.Tensor, retain: bool = False) -> None:
    """Accumulate gradients of a scalar ``root`` into every reachable leaf.

    A root may be backpropagated once; pass ``retain=True`` to allow another
    pass over the same recording.
    """
    if root.numel() != 1:
        raise ValueError(f"backward: root must be scalar, got shape {list(root.shape)}")
    if not root.requires_grad:
        raise ValueError("backward: root is detached from the tape")
    if getattr(root, "_consumed", False):
        raise RuntimeError("backward: graph already consumed; re-record the forward pass")
    root.backward(retain_graph=retain)
    if not retain:
        root._consumed = True


# --- optimizer -------------------------------------------------------------


@dataclass
class OptimState:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step: int = 0
    m: list = field(default_factory=list)
    v: list = field(default_factory=list)

    def init(self, params: Sequence[torch.Tensor]) -> "OptimState":
        self.m = [torch.zeros_like(p) for p in params]
        self.v = [torch.zeros_like(p) for p in params]
        self.step = 0
        return self


@torch.no_grad()
def adam_step(params, grads, state: OptimState, names: Sequence[str] | None = None):
    if len(state.m) != len(params):
        raise ValueError("adam_step: state not initialized for these parameters")
    for i, g in enumerate(grads):
        if g is not None and not torch.isfinite(g).all():
            name = names[i] if names else f"#{i}"
            raise FloatingPointError(f"adam_step: non-finite gradient in parameter {name}")
    state.step += 1
    b1, b2 = state.beta1, state.beta2
    c1 = 1 - b1**state.step
    c2 = 1 - b2**state.step
    for p, g, m, v in zip(params, grads, state.m, state.v):
        if g is None:
            continue
        if p.shape != g.shape or p.shape != m.shape:
            raise ShapeError(f"adam_step: shape mismatch {list(p.shape)} vs {list(g.shape)}")
        m.mul_(b1).add_(g, alpha=1 - b1)
        v.mul_(b2).addcmul_(g, g, value=1 - b2)
        denom = (v / c2).sqrt_().add_(state.eps)
        p.addcdiv_(m, denom, value=-state.lr / c1)
    return params


class Adam:
    """Thin holder pairing named parameters with an :class:`OptimState`."""

    def __init__(self, named_params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8):
        named = list(named_params)
        self.names = [n for n, _ in named]
        self.params = [p for _, p in named]
        self.state = OptimState(lr, betas[0], betas[1], eps).init(self.params)

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        grads = [p.grad for p in self.params]
        adam_step(self.params, grads, self.state, self.names)

    def state_tensors(self) -> dict[str, torch.Tensor]:
        out = {"step": torch.tensor([float(self.state.step)], dtype=torch.float64)}
        for n, m, v in zip(self.names, self.state.m, self.state.v):
            out[f"m.{n}"] = m
            out[f"v.{n}"] = v
        return out

    def load_state_tensors(self, tensors: dict[str, torch.Tensor]) -> None:
        self.state.step = int(tensors["step"].item())
        for i, n in enumerate(self.names):
            self.state.m[i].copy_(tensors[f"m.{n}"])
            self.state.v[i].copy_(tensors[f"v.{n}"])


# --- ATSR format -----------------------------------------------------------

MAGIC = b"ATSR"
VERSION = 1
_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("<f8")}
_CODES = {np.dtype("float32"): 0, np.dtype("float64"): 1}


def to_atsr_bytes(t) -> bytes:
    arr = t.detach().cpu().numpy() if isinstance(t, torch.Tensor) else np.asarray(t)
    if arr.dtype not in _CODES:
        raise TypeError(f"ATSR supports f32/f64 only, got {arr.dtype}")
    code = _CODES[arr.dtype]
    head = MAGIC + struct.pack("<BBB", VERSION, code, arr.ndim)
    head += struct.pack(f"<{arr.ndim}Q", *arr.shape)
    return head + np.ascontiguousarray(arr, dtype=_DTYPES[code]).tobytes()


def from_atsr_bytes(buf: bytes) -> torch.Tensor:
    if buf[:4] != MAGIC:
        raise ValueError("not an ATSR file (bad magic)")
    version, code, rank = struct.unpack_from("<BBB", buf, 4)
    if version != VERSION:
        raise ValueError(f"unsupported ATSR version {version}")
    if code not in _DTYPES:
        raise ValueError(f"unknown ATSR dtype code {code}")
    dims = struct.unpack_from(f"<{rank}Q", buf, 7)
    off = 7 + 8 * rank
    dt = _DTYPES[code]
    n = math.prod(dims)
    if len(buf) - off != n * dt.itemsize:
        raise ValueError(f"ATSR payload size {len(buf) - off} does not match shape {list(dims)}")
    arr = np.frombuffer(buf, dtype=dt, count=n, offset=off).reshape(dims)
    return torch.from_numpy(arr.astype(dt.newbyteorder("="), copy=True))


def save_atsr(path, t) -> None:
    Path(path).write_bytes(to_atsr_bytes(t))


def load_atsr(path) -> torch.Tensor:
    return from_atsr_bytes(Path(path).read_bytes())
