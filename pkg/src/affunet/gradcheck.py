"""Finite-difference gradient checks for the affine conv, the losses and the renderer.

Every check compares autograd gradients with central differences in float64.
Bilinear sampling, ReLU-type activations, ``abs`` and ``clamp`` are only
piecewise smooth, so a stencil that straddles a kink measures the average of
two one-sided slopes. Each evaluation therefore runs under
:func:`~affunet.tensor.kink_trace`; when the two stencil points land on
different smooth pieces the step is shrunk tenfold (up to three times) for
that element only. The number of refined elements is reported per group.
"""
from __future__ import annotations

import time
from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch

from .affconv import IDENTITY, affine_conv2d, affine_conv_layer_forward
from .losses import (
    FeatureExtractor,
    GaussianParams,
    LossWeights,
    discriminator_loss,
    generator_loss,
    l1_loss,
    perceptual_loss,
    reconstruction_loss,
    std_loss,
    symmetry_loss,
    tv_loss,
)
from .networks import PatchDiscriminator, seeded
from .tensor import kink_trace

THRESHOLD = 1e-4
STEP = 1e-5
FLOOR = 1e-3  # relative to the largest gradient entry of the group
TARGETS = ("affconv", "losses", "renderer")


@dataclass
class GroupResult:
    name: str
    max_rel_error: float
    max_abs_grad: float
    n: int
    refined: int = 0
    unresolved: int = 0

    @property
    def passed(self) -> bool:
        return self.max_rel_error < THRESHOLD and self.unresolved == 0


def relative_error(analytic, numeric, floor: float = FLOOR) -> float:
    """Max elementwise ``|a - n| / max(|a|, |n|, floor * scale)``.

    ``scale`` is the largest magnitude in either gradient, so entries that are
    tiny relative to the rest of the group are judged on an absolute basis.
    """
    a = np.asarray(analytic, dtype=np.float64).ravel()
    n = np.asarray(numeric, dtype=np.float64).ravel()
    scale = max(np.abs(a).max(initial=0.0), np.abs(n).max(initial=0.0))
    if scale == 0:
        return 0.0
    denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor * scale)
    return float((np.abs(a - n) / denom).max())


def _evaluate(fn):
    with torch.no_grad(), kink_trace() as trace:
        value = float(fn())
    return value, trace


def _same_piece(ta, tb) -> bool:
    return len(ta) == len(tb) and all(torch.equal(a, b) for a, b in zip(ta, tb))


def numeric_grad(fn: Callable[[], torch.Tensor], t: torch.Tensor, step: float = STEP,
                 max_refine: int = 3) -> tuple[np.ndarray, int, int]:
    """Central differences of scalar ``fn()`` w.r.t. every element of ``t``
    (perturbed in place). Returns ``(grad, refined, unresolved)``."""
    flat = t.data.view(-1)
    out = np.zeros(flat.numel())
    refined = unresolved = 0
    for i in range(flat.numel()):
        orig = flat[i].item()
        h = step
        for attempt in range(max_refine + 1):
            flat[i] = orig + h
            fp, kp = _evaluate(fn)
            flat[i] = orig - h
            fm, km = _evaluate(fn)
            if _same_piece(kp, km):
                break
            h /= 10
        else:
            unresolved += 1
        refined += attempt > 0
        flat[i] = orig
        out[i] = (fp - fm) / (2 * h)
    return out.reshape(t.shape), refined, unresolved


def check_groups(fn: Callable[[], torch.Tensor], tensors: dict[str, torch.Tensor],
                 prefix: str = "") -> list[GroupResult]:
    leaves = list(tensors.values())
    for t in leaves:
        t.requires_grad_(True)
    grads = torch.autograd.grad(fn(), leaves, allow_unused=True)
    results = []
    for (name, t), g in zip(tensors.items(), grads):
        analytic = np.zeros(t.shape) if g is None else g.detach().numpy()
        numeric, refined, unresolved = numeric_grad(fn, t)
        results.append(GroupResult(
            prefix + name, relative_error(analytic, numeric),
            float(np.abs(analytic).max(initial=0.0)), t.numel(), refined, unresolved,
        ))
    return results


def _merge(results: list[GroupResult]) -> list[GroupResult]:
    """Collapse per-seed results into one entry per group (worst case)."""
    merged: dict[str, GroupResult] = {}
    for r in results:
        m = merged.get(r.name)
        if m is None:
            merged[r.name] = GroupResult(**asdict(r))
            continue
        m.max_rel_error = max(m.max_rel_error, r.max_rel_error)
        m.max_abs_grad = max(m.max_abs_grad, r.max_abs_grad)
        m.n += r.n
        m.refined += r.refined
        m.unresolved += r.unresolved
    return list(merged.values())


# --- suites ------------------------------------------------------------------

def _gen(seed):
    return torch.Generator().manual_seed(seed)


def _rand(gen, *shape, lo=-1.0, hi=1.0):
    return lo + (hi - lo) * torch.rand(*shape, generator=gen, dtype=torch.float64)


AFFCONV_CASES = (  # (cin, cout, size, stride)
    (8, 4, 16, 1),
    (4, 3, 12, 1),
    (8, 2, 16, 2),
    (3, 4, 9, 2),
    (6, 5, 10, 1),
)


def affconv_suite(seeds: int = 5) -> list[GroupResult]:
    results = []
    for s in range(seeds):
        cin, cout, size, stride = AFFCONV_CASES[s % len(AFFCONV_CASES)]
        g = _gen(100 + s)
        x = _rand(g, 1, cin, size, size)
        w = _rand(g, cout, cin, 3, 3, lo=-0.5, hi=0.5)
        b = _rand(g, cout)
        out_n = (size + 2 - 3) // stride + 1
        ident = torch.tensor(IDENTITY, dtype=torch.float64).view(1, 6, 1, 1)
        field = ident + torch.cat([
            _rand(g, 1, 4, out_n, out_n, lo=-0.3, hi=0.3),
            _rand(g, 1, 2, out_n, out_n, lo=-1.5, hi=1.5),
        ], dim=1)
        probe = _rand(g, 1, cout, out_n, out_n)
        tensors = {"input": x, "weight": w, "bias": b, "field": field}
        fn = lambda: (affine_conv2d(x, w, b, field, stride) * probe).sum()  # noqa: E731
        results += check_groups(fn, tensors, "affine_conv2d/")

        # whole layer: the field comes from the predictor, so input and
        # predictor parameters both move the sampling grid
        fw = _rand(g, 6, cin, 3, 3, lo=-0.1, hi=0.1)
        fb = torch.tensor(IDENTITY, dtype=torch.float64) + _rand(g, 6, lo=-0.2, hi=0.2)
        params = {"input": x.detach().clone(), "weight": w.detach().clone(), "bias": b.detach().clone(),
                  "field_weight": fw, "field_bias": fb}

        def layer_fn(p=params, stride=stride, probe=probe):
            return (affine_conv_layer_forward(p["input"], p, stride) * probe).sum()

        results += check_groups(layer_fn, params, "affine_layer/")
    return _merge(results)


def losses_suite(seed: int = 0) -> list[GroupResult]:
    g = _gen(200 + seed)
    res = []
    a, b = _rand(g, 1, 3, 16, 16, lo=0, hi=1), _rand(g, 1, 3, 16, 16, lo=0, hi=1)
    res += check_groups(lambda: l1_loss(a, b), {"a": a}, "l1/")

    img, ren = _rand(g, 1, 3, 8, 8, lo=0, hi=1), _rand(g, 1, 3, 8, 8, lo=0, hi=1)
    pos, pgt = _rand(g, 1, 3, 8, 8), _rand(g, 1, 3, 8, 8)
    w = LossWeights()
    res += check_groups(lambda: reconstruction_loss(img, ren, pos, pgt, w),
                        {"rendered": ren, "position": pos}, "reconstruction/")

    fx = FeatureExtractor(width=4).double()
    pa, pb = _rand(g, 1, 3, 16, 16, lo=0, hi=1), _rand(g, 1, 3, 16, 16, lo=0, hi=1)
    res += check_groups(lambda: perceptual_loss(pa, pb, fx), {"a": pa}, "perceptual/")

    blur = GaussianParams(9, 2.0)
    d = _rand(g, 1, 3, 16, 16, lo=0, hi=1)
    res += check_groups(lambda: symmetry_loss(d, 0.3, blur), {"diffuse": d}, "symmetry/")

    im = _rand(g, 2, 3, 16, 16, lo=0, hi=1)
    mask = (_rand(g, 2, 1, 16, 16, lo=0, hi=1) > 0.3).double()
    res += check_groups(lambda: std_loss(im, mask, 1.0, blur), {"image": im}, "std/")

    light = _rand(g, 2, 1, 8, 8, lo=0, hi=1)
    res += check_groups(lambda: tv_loss(light, 0.3), {"light": light}, "tv/")

    with seeded(300 + seed):
        disc = PatchDiscriminator(width=4).double()
    real, fake = _rand(g, 1, 3, 16, 16, lo=0, hi=1), _rand(g, 1, 3, 16, 16, lo=0, hi=1)
    res += check_groups(lambda: generator_loss(fake, [disc], 0.01), {"fake": fake}, "adversarial_g/")
    dparams = dict(disc.named_parameters())
    res += check_groups(lambda: discriminator_loss(real, fake, [disc], 0.01),
                        {"disc_" + k: v for k, v in dparams.items()}, "adversarial_d/")
    for p in disc.parameters():
        p.requires_grad_(True)
    return res


def zero_case_gradients() -> dict[str, float]:
    """Max |gradient| of each loss at its zero case; all should be exactly 0."""
    g = _gen(7)
    blur = GaussianParams(9, 2.0)
    x = _rand(g, 1, 3, 16, 16, lo=0, hi=1).requires_grad_(True)
    const = torch.full((1, 3, 16, 16), 0.4, dtype=torch.float64, requires_grad=True)
    sym = (x + torch.flip(x, dims=[-1])).detach().requires_grad_(True)
    fx = FeatureExtractor(width=4).double()
    cases = {
        "l1": (lambda: l1_loss(x, x.detach()), x),
        "perceptual": (lambda: perceptual_loss(x, x.detach(), fx), x),
        "tv": (lambda: tv_loss(const, 1.0), const),
        "symmetry": (lambda: symmetry_loss(sym, 1.0, blur), sym),
        "std": (lambda: std_loss(const, torch.ones(1, 1, 16, 16, dtype=torch.float64), 1.0, blur), const),
    }
    out = {}
    for name, (fn, t) in cases.items():
        (grad,) = torch.autograd.grad(fn(), [t])
        out[name] = float(grad.abs().max())
    return out


def renderer_suite(seed: int = 0, res: int = 16) -> list[GroupResult]:
    from .geometry import TriMesh, load_bundled_head, rasterize_position_map, sample_positions
    from .render import Camera, Pose, rasterize_mesh, shade

    head = load_bundled_head()
    pm = rasterize_position_map(head, res)
    verts, ok = sample_positions(pm, head.uvs)
    raster = rasterize_mesh(TriMesh(verts, head.faces, head.uvs), Pose.from_euler(yaw=0.3, pitch=-0.2),
                            Camera.for_uv_frame(res), ok)
    g = _gen(400 + seed)
    diffuse = _rand(g, 3, res, res, lo=0.2, hi=0.8)
    light = _rand(g, 1, res // 4, res // 4, lo=0.5, hi=1.0)
    probe = _rand(g, 3, res, res)
    fn = lambda: (shade(raster, diffuse, light) * probe).sum()  # noqa: E731
    return check_groups(fn, {"diffuse": diffuse, "light": light}, "renderer/")


def run(target: str = "all", seeds: int = 5) -> dict:
    if target != "all" and target not in TARGETS:
        raise ValueError(f"unknown gradcheck target {target!r}; choose from {TARGETS + ('all',)}")
    targets = TARGETS if target == "all" else (target,)
    groups: list[GroupResult] = []
    extra = {}
    timings = {}
    for t in targets:
        t0 = time.perf_counter()
        if t == "affconv":
            groups += affconv_suite(seeds)
        elif t == "losses":
            groups += losses_suite()
            extra["zero_case_max_abs_grad"] = zero_case_gradients()
        else:
            groups += renderer_suite()
        timings[t] = time.perf_counter() - t0
    failed = [r.name for r in groups if not r.passed]
    zero = extra.get("zero_case_max_abs_grad", {})
    failed += [f"zero_case/{k}" for k, v in zero.items() if v != 0.0]
    return {
        "target": target,
        "threshold": THRESHOLD,
        "step": STEP,
        "dtype": "f64",
        "groups": {r.name: dict(asdict(r), passed=r.passed) for r in groups},
        **extra,
        "seconds": timings,
        "failed": failed,
        "passed": not failed,
    }
