"""Forward+backward timing of a vanilla conv layer against the affine conv layer."""
from __future__ import annotations

import csv
import io
import math
import statistics
import timeit

import torch
import torch.nn as nn

from .affconv import AffineConv2d
from .networks import seeded

OPS = ("conv", "affconv")
DEFAULT_SIZES = (16, 32, 64)
COLUMNS = ("op", "batch", "channels", "size", "stride", "out_elements", "median_ms", "min_ms", "max_ms", "repeats", "number")


def _layer(op: str, channels: int, stride: int) -> nn.Module:
    if op == "conv":
        return nn.Conv2d(channels, channels, 3, stride, 1)
    if op == "affconv":
        layer = AffineConv2d(channels, channels, 3, stride)
        with torch.no_grad():  # a non-trivial field so the sampler does real work
            layer.field_weight.normal_(0.0, 0.05)
        return layer
    raise ValueError(f"unknown bench op {op!r}; choose from {OPS}")


class _Case:
    def __init__(self, op, size, batch, channels, stride, seed):
        self.row = {"op": op, "batch": batch, "channels": channels, "size": size, "stride": stride}
        with seeded(seed):
            self.layer = _layer(op, channels, stride)
            self.x = torch.randn(batch, channels, size, size, requires_grad=True)
        self.times: list[float] = []
        self.number = 1

    def once(self):
        self.layer.zero_grad()
        self.x.grad = None
        y = self.layer(self.x)
        y.square().mean().backward()
        return y

    def calibrate(self, warmup: int, min_sample_s: float):
        for _ in range(warmup):
            y = self.once()
        self.row["out_elements"] = y.numel()
        self.timer = timeit.Timer(self.once)
        n, t = self.timer.autorange()
        self.number = max(1, math.ceil(n * min_sample_s / t))

    def sample(self):
        self.times.append(self.timer.timeit(self.number) / self.number * 1e3)

    def result(self) -> dict:
        t = self.times
        return dict(self.row, median_ms=statistics.median(t), min_ms=min(t), max_ms=max(t),
                    repeats=len(t), number=self.number)


def run(ops=OPS, sizes=DEFAULT_SIZES, batch: int = 4, channels: int = 16, stride: int = 2,
        repeats: int = 10, warmup: int = 2, seed: int = 0, min_sample_s: float = 0.02) -> list[dict]:
    """Per-iteration forward+backward time of each (size, op) pair.

    Each sample runs enough iterations to last ``min_sample_s``, and samples are
    taken round-robin over all pairs so slow drift or bursts of machine load
    are shared by every row instead of landing on one.
    """
    cases = [_Case(op, s, batch, channels, stride, seed) for s in sizes for op in ops]
    for c in cases:
        c.calibrate(warmup, min_sample_s)
    for _ in range(repeats):
        for c in cases:
            c.sample()
    return [c.result() for c in cases]


def time_layer(op: str, size: int, **kwargs) -> dict:
    return run([op], [size], **kwargs)[0]


def ratios(rows: list[dict]) -> dict[int, float]:
    """affconv/conv median-time ratio per size, where both were measured."""
    by = {(r["op"], r["size"]): r["median_ms"] for r in rows}
    return {s: by[("affconv", s)] / by[("conv", s)]
            for (op, s) in by if op == "affconv" and ("conv", s) in by}


def to_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=COLUMNS, lineterminator="\n")
    w.writeheader()
    for r in rows:
        w.writerow({k: (f"{v:.4f}" if isinstance(v, float) else v) for k, v in r.items()})
    return buf.getvalue()
