"""Three-stage training, evaluation and the affine-conv ablation on toy data."""
from __future__ import annotations

import csv
import json
import logging
import shutil
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import losses as L
from .geometry import PositionMap, TriMesh, load_bundled_head, load_obj
from .networks import (
    FaceNets,
    NetworkConfig,
    build_affunet,
    build_multiscale_discriminators,
    count_parameters,
    field_parameter_count,
    load_checkpoint,
    save_checkpoint,
)
from .render import Camera, Pose, overlay, render_batch
from .tensor import Adam, set_determinism
from .toyset import ToySet

log = logging.getLogger(__name__)

TOY_EPOCHS = (20, 30, 40)
METRIC_COLUMNS = ("stage", "epoch", "step", "total", "rec_pos", "l1", "perc", "sym", "std",
                  "tv", "aux", "pose", "adv_g", "adv_d")


class NumericalError(RuntimeError):
    pass


def _write_json(path, obj) -> None:
    # wall-clock numbers live in separate timings.json files so every other
    # artifact is byte-identical across reruns
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


@dataclass
class RunConfig:
    seed: int = 7
    resolution: int = 64
    stage: int = 1
    epochs: tuple = TOY_EPOCHS
    max_steps: int | None = None  # per-stage cap, mostly for tests
    batch_size: int = 8
    width: int = 16
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    weights: L.LossWeights = field(default_factory=L.LossWeights)
    dataset: str = "toyset"
    out: str = "runs/default"
    init_from: str | None = None  # checkpoint to start from; defaults to previous stage's final
    std_target: str = "diffuse"  # or "rendered"
    render_pose: str = "gt"  # "gt" substitutes ground-truth poses in the renderer
    adversarial: bool = True  # build and train discriminators in stage 3
    affine: bool = True
    ablation_steps: int = 2000
    threads: int = 1

    def __post_init__(self):
        if self.stage not in (1, 2, 3):
            raise ValueError("stage must be 1, 2 or 3")
        if isinstance(self.weights, dict):
            self.weights = L.LossWeights.from_dict(self.weights)
        self.epochs = tuple(self.epochs)
        self.betas = tuple(self.betas)
        if self.std_target not in ("diffuse", "rendered"):
            raise ValueError("std_target must be 'diffuse' or 'rendered'")
        if self.render_pose not in ("gt", "pred"):
            raise ValueError("render_pose must be 'gt' or 'pred'")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["weights"] = self.weights.to_dict()
        return d

    @classmethod
    def from_json(cls, path, **overrides) -> "RunConfig":
        d = json.loads(Path(path).read_text()) if path else {}
        d.update({k: v for k, v in overrides.items() if v is not None})
        return cls(**d)

    def net_config(self) -> NetworkConfig:
        return NetworkConfig(self.resolution, self.width, affine=self.affine)


class MetricsLog:
    """Append-only CSV, flushed per row."""

    def __init__(self, path):
        self.path = Path(path)
        new = not self.path.exists()
        self.fh = open(self.path, "a", newline="")
        self.writer = csv.DictWriter(self.fh, fieldnames=METRIC_COLUMNS)
        if new:
            self.writer.writeheader()
            self.fh.flush()

    def write(self, row: dict):
        self.writer.writerow({k: (f"{v:.9g}" if isinstance(v, float) else v) for k, v in row.items()})
        self.fh.flush()

    def close(self):
        self.fh.close()


def masked_l1(a, b, mask) -> float:
    m = mask.expand_as(a)
    return float(((a - b).abs() * m).sum() / m.sum())


def _batches(n: int, batch: int, gen: torch.Generator):
    perm = torch.randperm(n, generator=gen)
    for i in range(0, n, batch):
        yield perm[i:i + batch]


class Trainer:
    def __init__(self, cfg: RunConfig, data: ToySet | None = None, template: TriMesh | None = None):
        self.cfg = cfg
        set_determinism(cfg.threads)
        if data is None:
            data = ToySet.load(cfg.dataset)
            template = template or load_obj(Path(cfg.dataset) / "template.obj")
        self.data = data
        self.template = template or load_bundled_head()
        if data.meta["resolution"] != cfg.resolution:
            raise ValueError(f"dataset resolution {data.meta['resolution']} != config {cfg.resolution}")
        self.cam = Camera.for_uv_frame(cfg.resolution)
        self.nets = FaceNets(cfg.net_config(), cfg.seed)
        self.fx = L.FeatureExtractor()
        self.blur = L.GaussianParams.for_resolution(cfg.resolution)
        self.discs = None
        self.out = Path(cfg.out)

    # --- pieces -------------------------------------------------------------------

    def _position_maps(self, pos, idx):
        pos = pos.detach().permute(0, 2, 3, 1).numpy()
        return [PositionMap(pos[k], self.data.valid[int(i), 0].numpy() > 0.5) for k, i in enumerate(idx)]

    def _poses(self, idx, pose_pred):
        if self.cfg.render_pose == "gt":
            return self.data.pose_list(idx)
        out = []
        for v in pose_pred.detach().double().numpy():
            rot = v[:3]
            n = np.linalg.norm(rot)
            if n >= np.pi - 1e-6:
                rot = rot * (np.pi - 1e-6) / n
            out.append(Pose(rot, v[3:]))
        return out

    def render_reconstruction(self, img, idx, diffuse, light, pos, pose_pred):
        rendered, cov = render_batch(self._position_maps(pos, idx), self.template, diffuse, light,
                                     self._poses(idx, pose_pred), self.cam)
        return overlay(rendered, cov, img), rendered, cov

    def _appearance_terms(self, img, idx, pos):
        w = self.cfg.weights
        nets = self.nets
        diffuse = nets.diffuse(img)
        light = nets.light(img)
        pose_pred = nets.pose(img).flatten(1)
        recon, rendered, cov = self.render_reconstruction(img, idx, diffuse, light, pos, pose_pred)
        skin = self.data.valid[idx]
        std_img = diffuse if self.cfg.std_target == "diffuse" else rendered
        std_mask = skin if self.cfg.std_target == "diffuse" else cov
        terms = {
            "l1": w.l1d * L.l1_loss(img, recon),
            "perc": L.perceptual_loss(img, recon, self.fx, w.perc),
            "sym": L.symmetry_loss(diffuse, w.sym, self.blur),
            "std": L.std_loss(std_img, std_mask, w.std, self.blur),
            "tv": L.tv_loss(light, w.tv),
            "aux": L.auxiliary_diffuse_loss(diffuse, self.data.diffuse[idx], self.fx, w.perc),
            "pose": L.l1_loss(pose_pred, self.data.poses[idx].to(pose_pred.dtype)),
        }
        return terms, recon

    # --- stages ---------------------------------------------------------------------

    def _trainable(self, stage):
        n = self.nets
        mods = {1: [n.position], 2: [n.diffuse, n.light, n.pose], 3: [n.position, n.diffuse, n.light, n.pose]}[stage]
        named = []
        for m in mods:
            prefix = next(k for k, v in n.named_children() if v is m)
            named += [(f"{prefix}.{k}", p) for k, p in m.named_parameters()]
        return named

    def step_losses(self, stage, idx):
        img = self.data.images[idx]
        w = self.cfg.weights
        if stage == 1:
            pos = self.nets.position(img)
            terms = {"rec_pos": w.l1p * L.l1_loss(pos, self.data.position[idx])}
            return terms, None
        if stage == 2:
            with torch.no_grad():
                pos = self.nets.position(img)
            return self._appearance_terms(img, idx, pos)
        pos = self.nets.position(img)
        terms, recon = self._appearance_terms(img, idx, pos)
        terms["rec_pos"] = w.l1p * L.l1_loss(pos, self.data.position[idx])
        if self.discs is not None:
            terms["adv_g"] = L.generator_loss(recon, self.discs, w.adv)
        return terms, recon

    def _resolve_init(self, stage):
        if self.cfg.init_from:
            return Path(self.cfg.init_from)
        if stage == 1:
            return None
        prev = self.out / f"stage{stage - 1}" / "final"
        if not (prev / "manifest.json").exists():
            raise FileNotFoundError(f"stage {stage} needs a stage {stage - 1} checkpoint at {prev}")
        return prev

    def _modules(self):
        mods = {k: v for k, v in self.nets.named_children()}
        if self.discs is not None:
            mods["disc"] = self.discs
        return mods

    def save(self, path, stage, epoch, step):
        manifest = {"config": self.cfg.to_dict(), "seed": self.cfg.seed, "stage": stage,
                    "epoch": epoch, "step": step}
        save_checkpoint(path, self._modules(), manifest)

    def train_stage(self, stage: int | None = None) -> dict:
        cfg = self.cfg
        stage = stage or cfg.stage
        init = self._resolve_init(stage)
        if init is not None:
            load_checkpoint(init, {k: v for k, v in self.nets.named_children()})
        if stage == 3 and cfg.adversarial:
            self.discs = build_multiscale_discriminators(cfg.net_config(), cfg.seed + 10)
            disc_opt = Adam(self.discs.named_parameters(), cfg.lr, cfg.betas)
        opt = Adam(self._trainable(stage), cfg.lr, cfg.betas)
        stage_dir = self.out / f"stage{stage}"
        stage_dir.mkdir(parents=True, exist_ok=True)
        metrics = MetricsLog(self.out / "metrics.csv")
        gen = torch.Generator().manual_seed(cfg.seed * 1000 + stage)
        n_train = self.data.n_train
        epochs = cfg.epochs[stage - 1]
        before = self.evaluate()
        step = 0
        last_ckpt = None
        t0 = time.time()
        try:
            for epoch in range(1, epochs + 1):
                for idx in _batches(n_train, cfg.batch_size, gen):
                    if cfg.max_steps is not None and step >= cfg.max_steps:
                        break
                    terms, recon = self.step_losses(stage, idx)
                    total = sum(terms.values())
                    if not torch.isfinite(total):
                        raise NumericalError(f"non-finite loss at stage {stage} step {step}")
                    opt.zero_grad()
                    total.backward()
                    opt.step()
                    row = {"stage": stage, "epoch": epoch, "step": step, "total": float(total.detach())}
                    row.update({k: float(v.detach()) for k, v in terms.items()})
                    if self.discs is not None:
                        d_loss = L.discriminator_loss(self.data.images[idx], recon, self.discs, cfg.weights.adv)
                        disc_opt.zero_grad()
                        d_loss.backward()
                        disc_opt.step()
                        row["adv_d"] = float(d_loss.detach())
                    metrics.write(row)
                    step += 1
                ckpt = stage_dir / f"epoch_{epoch:03d}"
                self.save(ckpt, stage, epoch, step)
                if last_ckpt is not None:
                    shutil.rmtree(last_ckpt, ignore_errors=True)
                last_ckpt = ckpt
                if cfg.max_steps is not None and step >= cfg.max_steps:
                    break
        finally:
            metrics.close()
        self.save(stage_dir / "final", stage, epoch, step)
        after = self.evaluate()
        report = {"stage": stage, "steps": step, "heldout_before": before, "heldout_after": after}
        _write_json(stage_dir / "report.json", report)
        _write_json(stage_dir / "timings.json", {"seconds": round(time.time() - t0, 3)})
        log.info("stage %d done: %s", stage, report)
        return report

    @torch.no_grad()
    def evaluate(self, indices=None) -> dict:
        """Held-out L1 of position and diffuse maps (skin texels) and of the
        overlaid reconstruction against the input."""
        data = self.data
        if indices is None:
            indices = torch.arange(data.n_train, len(data))
        if len(indices) == 0:
            return {}
        pos_l1 = diff_l1 = rend_l1 = 0.0
        n = 0
        for i in range(0, len(indices), self.cfg.batch_size):
            idx = indices[i:i + self.cfg.batch_size]
            img = data.images[idx]
            mask = data.valid[idx]
            pos = self.nets.position(img)
            diffuse = self.nets.diffuse(img)
            light = self.nets.light(img)
            pose = self.nets.pose(img).flatten(1)
            recon, _, _ = self.render_reconstruction(img, idx, diffuse, light, pos, pose)
            k = len(idx)
            pos_l1 += masked_l1(pos, data.position[idx], mask) * k
            diff_l1 += masked_l1(diffuse, data.diffuse[idx], mask) * k
            rend_l1 += float(L.l1_loss(img, recon)) * k
            n += k
        return {"position_l1": pos_l1 / n, "diffuse_l1": diff_l1 / n, "render_l1": rend_l1 / n}


def train(cfg: RunConfig, stages=None, data: ToySet | None = None) -> list[dict]:
    trainer = Trainer(cfg, data)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_json(out / "config.json", cfg.to_dict())
    return [trainer.train_stage(s) for s in (stages or [cfg.stage])]


# --- ablation ---------------------------------------------------------------------


def train_diffuse_only(cfg: RunConfig, data: ToySet, affine: bool, steps: int, log_path=None):
    """Supervised diffuse network (auxiliary L1 + perceptual); returns the net
    and its held-out skin-masked diffuse L1."""
    set_determinism(cfg.threads)
    ncfg = NetworkConfig(cfg.resolution, cfg.width, affine=affine)
    net = build_affunet(ncfg, 3, "sigmoid", cfg.seed)
    fx = L.FeatureExtractor()
    opt = Adam(net.named_parameters(), cfg.lr, cfg.betas)
    gen = torch.Generator().manual_seed(cfg.seed * 1000 + 99)
    fh = open(log_path, "a") if log_path else None
    step = 0
    while step < steps:
        for idx in _batches(data.n_train, cfg.batch_size, gen):
            if step >= steps:
                break
            pred = net(data.images[idx])
            loss = L.auxiliary_diffuse_loss(pred, data.diffuse[idx], fx, cfg.weights.perc)
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite loss at ablation step {step}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            if fh:
                fh.write(f"{int(affine)},{step},{float(loss.detach()):.9g}\n")
            step += 1
    if fh:
        fh.close()
    with torch.no_grad():
        idx = torch.arange(data.n_train, len(data))
        errs = [masked_l1(net(data.images[idx[i:i + 16]]), data.diffuse[idx[i:i + 16]],
                          data.valid[idx[i:i + 16]]) * len(idx[i:i + 16])
                for i in range(0, len(idx), 16)]
    return net, sum(errs) / len(idx)


def ablate_affconv(cfg: RunConfig, data: ToySet | None = None) -> dict:
    data = data if data is not None else ToySet.load(cfg.dataset)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    log_path = out / "ablation_loss.csv"
    log_path.write_text("affine,step,loss\n")
    t0 = time.time()
    aff_net, aff = train_diffuse_only(cfg, data, True, cfg.ablation_steps, log_path)
    van_net, van = train_diffuse_only(cfg, data, False, cfg.ablation_steps, log_path)
    report = {
        "steps": cfg.ablation_steps,
        "heldout_diffuse_l1": {"affine": aff, "vanilla": van},
        "ratio": aff / van,
        "parameters": {
            "affine": count_parameters(aff_net),
            "vanilla": count_parameters(van_net),
            "field_predictor": field_parameter_count(aff_net),
        },
        "aligned_dataset": bool(data.meta.get("aligned", False)),
    }
    _write_json(out / "ablation.json", report)
    _write_json(out / "timings.json", {"seconds": round(time.time() - t0, 3)})
    return report
