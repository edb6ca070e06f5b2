"""Training loop, test-time embedding adaptation, evaluation and rendering."""

from __future__ import annotations

import hashlib
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.stats import rankdata

from .io import Checkpoint, Dataset, ImageRecord
from .losses import LossBreakdown, LossConfig, ssim, total_loss
from .model import Model, RenderOutput, render, render_backward
from .nn import AdamState, adam_step
from .raster import set_threads
from .scene import Camera, Kernels, SceneConfig, prune_kernels
from .uncertainty import (BoundaryParams, boundary_penalty, extract_features,
                          feature_dissimilarity)

log = logging.getLogger("wildsplat")

PSNR_CAP = 99.0


class NumericAbort(RuntimeError):
    def __init__(self, iteration: int, term: str):
        super().__init__(f"non-finite {term} loss at iteration {iteration}")
        self.iteration = iteration
        self.term = term


@dataclass
class TrainConfig:
    iterations: int = 5000
    lr_kernels: float = 1.6e-3
    lr_features: float = 2.5e-3
    lr_heads: float = 1e-3
    lr_embeddings: float = 1e-2
    prune_from: int = 1500
    prune_every: int = 500
    prune_window: int = 100
    prune_threshold: float = 0.005
    seed: int = 0
    patch_size: int = 16
    tile_size: int = 16
    log_every: int = 100
    checkpoint_every: int = 0
    light_dim: int = 32
    transient_dim: int = 16
    adapt_iterations: int = 100
    adapt_lr: float = 3e-2
    threads: Optional[int] = None
    scene: SceneConfig = field(default_factory=SceneConfig)
    loss: LossConfig = field(default_factory=LossConfig)

    def __post_init__(self):
        for name in ("lr_kernels", "lr_features", "lr_heads", "lr_embeddings", "adapt_lr"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")

    def lr_for(self, name: str) -> float:
        if name in ("kernels.anchors", "kernels.offsets", "kernels.log_scale"):
            return self.lr_kernels
        if name == "kernels.features":
            return self.lr_features
        if name.startswith("kernels.") or name.startswith("embed."):
            return self.lr_embeddings
        return self.lr_heads


def param_hash(model: Model, exclude=("embed.light", "embed.transient")) -> str:
    h = hashlib.sha256()
    for name, arr in sorted(model.params().items()):
        if name in exclude:
            continue
        h.update(name.encode())
        h.update(np.ascontiguousarray(arr).tobytes())
    return h.hexdigest()


@dataclass
class Trainer:
    """Mutable training state; :func:`train` is the usual entry point."""

    dataset: Dataset
    cfg: TrainConfig
    model: Model
    rng: np.random.Generator
    optim: dict
    iteration: int = 0
    history: list = field(default_factory=list)
    grad_seen: dict = field(default_factory=dict)
    prune_log: list = field(default_factory=list)  # (PruneReport, accumulators before pruning)
    _features: dict = field(default_factory=dict)
    _mask: Optional[np.ndarray] = None
    _order: list = field(default_factory=list)

    @classmethod
    def create(cls, dataset: Dataset, cfg: TrainConfig) -> "Trainer":
        if len(dataset.train) < 2:
            raise ValueError("training needs at least two training images")
        rng = np.random.default_rng(cfg.seed)
        model = Model.create(dataset.points, dataset.ids, cfg.scene, rng,
                             cfg.light_dim, cfg.transient_dim)
        optim = {n: AdamState.for_params([p], lr=cfg.lr_for(n)) for n, p in model.params().items()}
        return cls(dataset, cfg, model, rng, optim)

    @classmethod
    def resume(cls, dataset: Dataset, cfg: TrainConfig, ckpt: Checkpoint) -> "Trainer":
        rng = np.random.default_rng()
        rng.bit_generator.state = ckpt.rng_state
        model = ckpt.model
        optim = ckpt.optimizer or {
            n: AdamState.for_params([p], lr=cfg.lr_for(n)) for n, p in model.params().items()}
        return cls(dataset, cfg, model, rng, optim, ckpt.iteration)

    def checkpoint(self) -> Checkpoint:
        return Checkpoint(self.model, self.iteration, self.optim,
                          self.rng.bit_generator.state, {"seed": self.cfg.seed})

    def _reference_features(self, rec: ImageRecord):
        if rec.id not in self._features:
            self._features[rec.id] = extract_features(rec.image, patch=self.cfg.patch_size)
        return self._features[rec.id]

    def _boundary(self, width: int, height: int):
        if not self.cfg.loss.enable_boundary:
            return None
        if self._mask is None or self._mask.shape != (height, width):
            self._mask = boundary_penalty(
                width, height, BoundaryParams.default(width, height, self.cfg.loss.m_min))
        return self._mask

    def _next_image(self) -> ImageRecord:
        if not self._order:
            self._order = list(self.rng.permutation(len(self.dataset.train)))
        return self.dataset.train[self._order.pop(0)]

    def step(self) -> LossBreakdown:
        cfg, model = self.cfg, self.model
        self.iteration += 1
        it = self.iteration
        rec = self._next_image()
        row = model.image_index(rec.id)
        out, ctx = render(model, rec.camera, model.light_emb[row], model.trans_emb[row],
                          "train", self.rng, cfg.tile_size)
        h, w = rec.image.shape[:2]
        dis = None
        if cfg.loss.enable_uncertainty:
            fmap = extract_features(np.clip(out.mapped, 0, 1), patch=cfg.patch_size)
            dis = feature_dissimilarity(fmap, self._reference_features(rec), h, w).pixel_map
        br, lg = total_loss(out.raw, out.mapped, rec.image, out.uncertainty, dis,
                            self._boundary(w, h), ctx.prims.scales, cfg.loss)
        for term, val in br.as_dict().items():
            if not math.isfinite(val):
                raise NumericAbort(it, term)
        grads = render_backward(model, ctx, lg.raw, lg.mapped, lg.beta, lg.scales)
        g_light = np.zeros_like(model.light_emb)
        g_light[row] = grads.pop("embed.light_row")
        g_trans = np.zeros_like(model.trans_emb)
        g_trans[row] = grads.pop("embed.transient_row")
        grads["embed.light"] = g_light
        grads["embed.transient"] = g_trans

        params = model.params()
        new = {}
        for name, p in params.items():
            g = grads[name]
            if not self.grad_seen.get(name) and np.any(g != 0):
                self.grad_seen[name] = True
            (new[name],), self.optim[name] = adam_step([p], [g], self.optim[name])
        model.set_params(new)

        self._track_opacity(ctx, it)
        self.history.append(br)
        if cfg.log_every and it % cfg.log_every == 0:
            log.info(format_progress(it, br, len(model.kernels)))
        return br

    def _track_opacity(self, ctx, it: int) -> None:
        cfg = self.cfg
        kern = self.model.kernels
        if it >= cfg.prune_from - cfg.prune_window + 1 and self._window_start(it):
            kern.acc_opacity[:] = 0.0
        op = ctx.prims.opacities.reshape(len(kern), kern.n_offsets).mean(axis=1)
        kern.acc_opacity += np.where(ctx.visible_kernels, op, 0.0)
        if it >= cfg.prune_from and (it - cfg.prune_from) % cfg.prune_every == 0:
            self.prune()

    def _window_start(self, it: int) -> bool:
        cfg = self.cfg
        target = it + cfg.prune_window - 1
        return target >= cfg.prune_from and (target - cfg.prune_from) % cfg.prune_every == 0

    def prune(self):
        cfg = self.cfg
        acc = self.model.kernels.acc_opacity.copy()
        kern, report = prune_kernels(self.model.kernels, cfg.prune_threshold, cfg.prune_window)
        self.prune_log.append((report, acc))
        if report.after == report.before:
            self.model.kernels = kern
            return report
        keep = report.kept
        self.model.kernels = kern
        for name in Kernels.PARAMS:
            key = f"kernels.{name}"
            st = self.optim[key]
            st.m = [st.m[0][keep]]
            st.v = [st.v[0][keep]]
        log.info("iter=%d pruned=%d kernels=%d", self.iteration, len(report.removed), report.after)
        return report


def format_progress(it: int, br: LossBreakdown, n_kernels: int) -> str:
    d = br.as_dict()
    return (f"iter={it} total={d['total']:.6g} color={d['color']:.6g} dssim={d['dssim']:.6g} "
            f"l1={d['l1']:.6g} uncert={d['uncert']:.6g} reg={d['reg']:.6g} kernels={n_kernels}")


def train(dataset: Dataset, cfg: TrainConfig,
          callback: Optional[Callable[[Trainer], None]] = None,
          checkpoint_path=None) -> tuple:
    """Run ``cfg.iterations`` steps; returns ``(Checkpoint, history)``."""
    from .io import save_checkpoint

    set_threads(cfg.threads)
    tr = Trainer.create(dataset, cfg)
    for _ in range(cfg.iterations):
        tr.step()
        if callback is not None:
            callback(tr)
        if checkpoint_path and cfg.checkpoint_every and tr.iteration % cfg.checkpoint_every == 0:
            save_checkpoint(checkpoint_path, tr.checkpoint())
    ckpt = tr.checkpoint()
    if checkpoint_path:
        save_checkpoint(checkpoint_path, ckpt)
    return ckpt, tr.history


# -- test-time protocol ------------------------------------------------------

def half_columns(width: int, region: str) -> slice:
    if region == "left":
        return slice(0, width // 2)
    if region == "right":
        return slice(width // 2, width)
    if region == "full":
        return slice(0, width)
    raise ValueError(f"unknown region {region!r}")


def adapt_embeddings(model: Model, rec: ImageRecord, iterations: int = 100, lr: float = 3e-2,
                     region: str = "left", loss_cfg: Optional[LossConfig] = None,
                     init=None, tile_size: int = 16):
    """Fit one image's light and transient embeddings with everything else frozen.

    The objective is the photometric colour loss on the ``region`` columns.
    Returns ``(light, transient)``; ``model`` is not modified.
    """
    cam = rec.camera
    if rec.image.shape[:2] != (cam.height, cam.width):
        raise ValueError(f"image {rec.id!r} size does not match its camera")
    cfg = loss_cfg or LossConfig()
    if init is None:
        try:
            row = model.image_index(rec.id)
            init = (model.light_emb[row], model.trans_emb[row])
        except KeyError:
            init = (np.zeros(model.light_dim), np.zeros(model.transient_dim))
    light, trans = (np.array(v, dtype=np.float64) for v in init)
    cols = half_columns(cam.width, region)
    ref = rec.image[:, cols]
    state = AdamState.for_params([light, trans], lr=lr)
    for _ in range(iterations):
        out, ctx = render(model, cam, light, trans, "eval", None, tile_size)
        # only the mapped-colour L1 term depends on the embeddings
        g_mapped = np.zeros_like(out.mapped)
        diff = out.mapped[:, cols] - ref
        g_mapped[:, cols] = (1 - cfg.lam) * np.sign(diff) / diff.size
        grads = render_backward(model, ctx, np.zeros_like(out.raw), g_mapped,
                                np.zeros(out.uncertainty.shape))
        (light, trans), state = adam_step(
            [light, trans], [grads["embed.light_row"], grads["embed.transient_row"]], state)
    return light, trans


def psnr(a, b) -> float:
    mse = float(np.mean((np.asarray(a, float) - np.asarray(b, float)) ** 2))
    if mse == 0.0:
        return PSNR_CAP
    return min(PSNR_CAP, 10.0 * math.log10(1.0 / mse))


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve via the rank-sum statistic (ties averaged)."""
    scores = np.asarray(scores, float).ravel()
    labels = np.asarray(labels, bool).ravel()
    n_pos, n_neg = labels.sum(), (~labels).sum()
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    return float((ranks[labels].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass
class EvalReport:
    psnr: dict
    ssim: dict
    occlusion_auc: Optional[float] = None
    region: str = "right"

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(list(self.psnr.values()))) if self.psnr else float("nan")

    @property
    def mean_ssim(self) -> float:
        return float(np.mean(list(self.ssim.values()))) if self.ssim else float("nan")

    def to_text(self) -> str:
        lines = [f"mean_psnr={self.mean_psnr:.6f}", f"mean_ssim={self.mean_ssim:.6f}",
                 f"region={self.region}", f"n_images={len(self.psnr)}"]
        if self.occlusion_auc is not None:
            lines.append(f"occlusion_auc={self.occlusion_auc:.6f}")
        lines.append("")
        lines.append(f"{'image':<16}{'psnr':>12}{'ssim':>12}")
        for iid in self.psnr:
            lines.append(f"{iid:<16}{self.psnr[iid]:>12.4f}{self.ssim[iid]:>12.6f}")
        return "\n".join(lines) + "\n"


def evaluate(model: Model, records: list, embeddings: Optional[dict] = None,
             region: str = "right", tile_size: int = 16) -> EvalReport:
    """PSNR/SSIM of mapped renders against references on the ``region`` columns.

    ``embeddings`` maps image id to ``(light, transient)``; every record must
    be present. With ``embeddings=None`` the protocol is disabled and zero
    embeddings are used.
    """
    ps, ss = {}, {}
    for rec in records:
        if embeddings is None:
            light, trans = np.zeros(model.light_dim), np.zeros(model.transient_dim)
        else:
            if rec.id not in embeddings:
                raise KeyError(f"no adapted embedding for image {rec.id!r}")
            light, trans = embeddings[rec.id]
        out, _ = render(model, rec.camera, light, trans, "eval", None, tile_size)
        cols = half_columns(rec.camera.width, region)
        pred = np.clip(out.mapped[:, cols], 0.0, 1.0)
        ps[rec.id] = psnr(pred, rec.image[:, cols])
        ss[rec.id] = ssim(pred, rec.image[:, cols])
    return EvalReport(ps, ss, region=region)


def occlusion_auc(model: Model, records: list, tile_size: int = 16) -> float:
    """ROC-AUC of rendered uncertainty against ground-truth occluder masks (pooled)."""
    scores, labels = [], []
    for rec in records:
        if rec.occluder_mask is None or not rec.occluder_mask.any():
            continue
        out = render_view(model, rec.camera, rec.id, tile_size=tile_size)
        scores.append(out.uncertainty.ravel())
        labels.append(rec.occluder_mask.ravel())
    if not scores:
        return float("nan")
    return roc_auc(np.concatenate(scores), np.concatenate(labels))


def resolve_light(model: Model, light):
    if isinstance(light, str):
        return model.light_emb[model.image_index(light)]
    return np.asarray(light, dtype=np.float64)


def render_view(model: Model, camera: Camera, light, transient=None,
                tile_size: int = 16) -> RenderOutput:
    """Eval-mode render; ``light`` is an image id or a raw light-embedding vector.

    With an image id and no explicit ``transient`` the image's transient
    embedding is used; otherwise zeros.
    """
    lvec = resolve_light(model, light)
    if transient is None:
        if isinstance(light, str):
            transient = model.trans_emb[model.image_index(light)]
        else:
            transient = np.zeros(model.transient_dim)
    elif isinstance(transient, str):
        transient = model.trans_emb[model.image_index(transient)]
    out, _ = render(model, camera, lvec, transient, "eval", None, tile_size)
    return out


def swap_lighting(model: Model, camera: Camera, light_a, light_b, tile_size: int = 16):
    """Render the same geometry under two light embeddings (ids or vectors)."""
    zeros = np.zeros(model.transient_dim)
    return (render_view(model, camera, light_a, zeros, tile_size),
            render_view(model, camera, light_b, zeros, tile_size))
