"""Peripheral-model construction and continual refinement.

Two-phase scheme: a fast initialization that seeds one Gaussian per surface
point, trains briefly with boosted learning rates and a single early
simplification pass (no densification, which also prevents floaters from
sparse view sets); and a refinement phase that restarts optimization from
the existing Gaussians with fresh optimizer state, densifying in a bounded
window to pick up detail from newly streamed foveal views.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, replace
from typing import Callable, Optional

import numpy as np
from scipy.spatial import cKDTree

from .camera import Camera
from .metrics import ssim_and_grad
from .pathtracer import ColoredPoint, points_to_arrays
from .rasterizer import RasterOutput, rasterize, rasterize_backward
from .splats import RawSplats, SplatModel, logit, save_model, sigmoid


@dataclass
class TrainView:
    camera: Camera
    rgba: np.ndarray  # (H, W, 4) float in [0, 1], straight alpha
    source: str = "initial"  # "initial" | "foveal"

    def __post_init__(self):
        self.rgba = np.asarray(self.rgba, dtype=np.float64)
        w, h = self.camera.resolution
        if self.rgba.shape != (h, w, 4):
            raise ValueError("view rgba must be (H, W, 4) at the camera resolution")
        if self.source not in ("initial", "foveal"):
            raise ValueError(f"unknown view source {self.source!r}")

    @property
    def rgb(self) -> np.ndarray:
        return self.rgba[:, :, :3]

    @property
    def alpha(self) -> np.ndarray:
        return self.rgba[:, :, 3]


@dataclass
class TrainConfig:
    total_iters: int = 700
    simplify_at: int = 95
    densify_from: int = 500
    densify_until: int = 900
    densify_interval: int = 100
    densify_grad_threshold: float = 2e-4
    percent_dense: float = 0.01
    prune_opacity: float = 0.005
    lr_position: float = 1.6e-4  # scaled by scene extent, decayed exponentially
    lr_position_final: float = 1.6e-6
    lr_scale: float = 5e-3
    lr_rotation: float = 1e-3
    lr_opacity: float = 5e-2
    lr_rgb: float = 2.5e-3
    lr_boost: float = 1.5  # applied to scale/opacity/color only
    target_gaussians: int = 10000
    max_growth: float = 5.0  # refinement count cap, relative to input
    lambda_dssim: float = 0.2
    lambda_alpha: float = 0.1
    seed: int = 0

    def __post_init__(self):
        if self.simplify_at >= self.total_iters:
            raise ValueError("simplify_at must be < total_iters")
        for name in ("lr_position", "lr_scale", "lr_rotation", "lr_opacity", "lr_rgb"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class ViewGate:
    delta_pos: float = 0.05  # relative to scene extent
    theta_view_deg: float = 5.0

    def __post_init__(self):
        if self.delta_pos <= 0 or self.theta_view_deg <= 0:
            raise ValueError("gate thresholds must be strictly positive")


def train_view_from_frame(frame, env, source: str = "foveal") -> TrainView:
    """Turn a rendered frame into a training target.

    The frame's RGB contains the environment behind escaped primary rays;
    subtracting that term (the environment along the pixel-center ray,
    weighted by 1 - alpha) recovers the straight-alpha foreground the
    randomized-background loss needs. No extra rendering happens here.
    """
    cam = frame.camera
    w, h = cam.resolution
    uvs = cam.pixel_center_uvs()
    _, dirs = cam.rays_for_uv(uvs)
    env_direct = env.sample(dirs).reshape(h, w, 3)
    alpha = frame.alpha_f
    fg_premul = np.clip(frame.rgb_f - (1.0 - alpha)[:, :, None] * env_direct, 0.0, 1.0)
    rgb_straight = np.clip(fg_premul / np.maximum(alpha, 1e-6)[:, :, None], 0.0, 1.0)
    rgba = np.concatenate([rgb_straight, alpha[:, :, None]], axis=2)
    return TrainView(camera=cam, rgba=rgba, source=source)


def model_view_mpsnr(model: SplatModel, view: TrainView) -> float:
    """Masked PSNR of the model against a view, both as premultiplied RGBA."""
    from .metrics import masked_psnr

    out = rasterize(model, view.camera, (0.0, 0.0, 0.0))
    pred = np.concatenate([out.rgb, out.alpha[:, :, None]], axis=2)
    target = np.concatenate([view.rgb * view.alpha[:, :, None], view.alpha[:, :, None]], axis=2)
    return masked_psnr(pred, target)


def should_add_view(
    gate: ViewGate,
    existing: list[Camera],
    candidate: Camera,
    scene_extent: float = 1.0,
) -> bool:
    """True iff the candidate clears the novelty gate against EVERY existing
    camera: position farther than delta_pos (scene-normalized) OR view
    direction apart by more than theta_view. Vacuously true when empty."""
    if scene_extent <= 0:
        raise ValueError("scene_extent must be positive")
    cos_t = np.cos(np.radians(gate.theta_view_deg))
    p_new = candidate.position / scene_extent
    f_new = candidate.forward
    for cam in existing:
        far_enough = np.linalg.norm(p_new - cam.position / scene_extent) > gate.delta_pos
        angled_enough = float(np.dot(f_new, cam.forward)) < cos_t
        if not (far_enough or angled_enough):
            return False
    return True


def compute_loss(
    render: RasterOutput,
    view: TrainView,
    background,
    lambdas: tuple[float, float] = (0.2, 0.1),
) -> tuple[float, np.ndarray, np.ndarray]:
    """L1 + DSSIM photometric loss on rgb composited over ``background``,
    plus an alpha L1 term. Returns (loss, d_rgb, d_alpha)."""
    lam_dssim, lam_alpha = lambdas
    bg = np.asarray(background, dtype=np.float64).reshape(3)
    target = view.rgb * view.alpha[:, :, None] + bg * (1.0 - view.alpha[:, :, None])

    diff = render.rgb - target
    n_rgb = diff.size
    l1 = float(np.abs(diff).mean())
    d_rgb = np.sign(diff) / n_rgb * (1.0 - lam_dssim)

    ssim_total = 0.0
    if lam_dssim > 0.0:
        for c in range(3):
            s, g = ssim_and_grad(render.rgb[:, :, c], target[:, :, c])
            ssim_total += s / 3.0
            d_rgb[:, :, c] += lam_dssim * (-g / 3.0)
    else:
        ssim_total = 1.0

    adiff = render.alpha - view.alpha
    l1_alpha = float(np.abs(adiff).mean())
    d_alpha = lam_alpha * np.sign(adiff) / adiff.size

    loss = (1.0 - lam_dssim) * l1 + lam_dssim * (1.0 - ssim_total) + lam_alpha * l1_alpha
    return loss, d_rgb, d_alpha


class _Adam:
    """Per-attribute Adam with support for row remapping on densify/prune."""

    def __init__(self, shape):
        self.m = np.zeros(shape)
        self.v = np.zeros(shape)
        self.step = 0

    def update(self, param: np.ndarray, grad: np.ndarray, lr: float, b1=0.9, b2=0.999, eps=1e-15):
        self.step += 1
        self.m = b1 * self.m + (1 - b1) * grad
        self.v = b2 * self.v + (1 - b2) * grad * grad
        mh = self.m / (1 - b1**self.step)
        vh = self.v / (1 - b2**self.step)
        param -= lr * mh / (np.sqrt(vh) + eps)

    def remap(self, keep_idx: np.ndarray, n_new: int):
        """Keep state for surviving rows, zero state for appended rows."""
        pad = ((0, n_new),) + tuple((0, 0) for _ in range(self.m.ndim - 1))
        self.m = np.pad(self.m[keep_idx], pad)
        self.v = np.pad(self.v[keep_idx], pad)


def _simplify_arrays(raw: RawSplats, importance: np.ndarray, target: int, rng: np.random.Generator):
    n = len(raw.positions)
    if target >= n:
        return raw, np.arange(n)
    w = np.asarray(importance, dtype=np.float64).clip(min=0.0)
    # weighted sampling without replacement via Gumbel keys; zero weight never wins
    with np.errstate(divide="ignore"):
        keys = np.log(w) + rng.gumbel(size=n)
    keys[w <= 0.0] = -np.inf
    alive = int(np.sum(w > 0.0))
    k = min(target, alive) if alive else 0
    if k == 0:
        idx = np.arange(min(target, n))
    else:
        idx = np.argpartition(-keys, k - 1)[:k]
        idx = np.sort(idx)
    ops = sigmoid(raw.opacity_logits)
    mass_all = float(ops.sum())
    mass_sel = float(ops[idx].sum())
    factor = mass_all / mass_sel if mass_sel > 0 else 1.0
    new_ops = np.clip(ops[idx] * factor, 1e-5, 1.0 - 1e-5)
    out = RawSplats(
        positions=raw.positions[idx],
        log_scales=raw.log_scales[idx],
        rotations=raw.rotations[idx],
        opacity_logits=logit(new_ops),
        rgbs=raw.rgbs[idx],
    )
    return out, idx


def simplify(model: SplatModel, importance, target: int, seed: int = 0) -> SplatModel:
    """Importance-proportional subsampling to ``target`` Gaussians, rescaling
    surviving opacities to preserve total opacity mass in expectation."""
    raw = RawSplats.from_model(model)
    out, _ = _simplify_arrays(raw, np.asarray(importance, dtype=np.float64), target, np.random.default_rng(seed))
    return out.to_model(model.generation, model.settings_hash)


def seed_from_points(points: list[ColoredPoint]) -> RawSplats:
    """One isotropic Gaussian per point: scale from the 3-NN mean distance,
    identity rotation, opacity 0.5, color from the point."""
    if not points:
        raise ValueError("empty point cloud")
    pos, rgba = points_to_arrays(points)
    n = len(pos)
    if n >= 4:
        tree = cKDTree(pos)
        dists, _ = tree.query(pos, k=4)
        nn = dists[:, 1:].mean(axis=1)
    else:
        nn = np.full(n, 1.0)
    nn = np.maximum(nn, 1e-4)
    return RawSplats(
        positions=pos.copy(),
        log_scales=np.log(nn)[:, None].repeat(3, axis=1),
        rotations=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1)),
        opacity_logits=np.zeros(n),
        rgbs=np.clip(rgba[:, :3], 0.0, 1.0),
    )


def scene_extent_of(views: list[TrainView]) -> float:
    """Camera-spread radius, the unit for position learning rates and the
    view gate (3DGS-style normalization)."""
    pos = np.array([v.camera.position for v in views])
    center = pos.mean(axis=0)
    r = float(np.linalg.norm(pos - center, axis=1).max())
    return max(r, 1e-6)


class _Trainer:
    def __init__(
        self,
        raw: RawSplats,
        views: list[TrainView],
        config: TrainConfig,
        extent: float,
        use_boost: bool = True,
        balance_sources: bool = False,
    ):
        self.raw = raw
        self.views = views
        self.cfg = config
        self.extent = extent
        self.use_boost = use_boost
        # continual refinement mixes a few wide initial views with many narrow
        # foveal ones; picking the source group evenly keeps the model from
        # drifting toward close-up appearance at the expense of wide views
        self.groups = None
        if balance_sources:
            initial = [v for v in views if v.source == "initial"]
            foveal = [v for v in views if v.source == "foveal"]
            if initial and foveal:
                self.groups = (initial, foveal)
        self.rng = np.random.default_rng(config.seed)
        self.opt = {
            "positions": _Adam(raw.positions.shape),
            "log_scales": _Adam(raw.log_scales.shape),
            "rotations": _Adam(raw.rotations.shape),
            "opacity_logits": _Adam(raw.opacity_logits.shape),
            "rgbs": _Adam(raw.rgbs.shape),
        }
        self.max_weight = np.zeros(len(raw.positions))
        self.grad_accum = np.zeros(len(raw.positions))
        self.grad_count = np.zeros(len(raw.positions))
        self.last_loss = float("nan")

    def _pos_lr(self, it: int) -> float:
        c = self.cfg
        frac = it / max(c.total_iters - 1, 1)
        return self.extent * c.lr_position * (c.lr_position_final / c.lr_position) ** frac

    def step(self, it: int):
        c = self.cfg
        if self.groups is not None:
            group = self.groups[int(self.rng.integers(2))]
            view = group[int(self.rng.integers(len(group)))]
        else:
            view = self.views[int(self.rng.integers(len(self.views)))]
        bg = self.rng.uniform(0.0, 1.0, size=3)
        holder: list = []
        out = rasterize(self.raw, view.camera, bg, _ctx_out=holder)
        loss, d_rgb, d_alpha = compute_loss(out, view, bg, (c.lambda_dssim, c.lambda_alpha))
        g = rasterize_backward(self.raw, view.camera, bg, d_rgb, d_alpha, _ctx=holder[0])
        self.last_loss = loss

        self.max_weight = np.maximum(self.max_weight, out.max_blend_weight)
        norms = np.linalg.norm(g.mean2d, axis=1)
        touched = norms > 0
        self.grad_accum[touched] += norms[touched]
        self.grad_count[touched] += 1

        boost = c.lr_boost if self.use_boost else 1.0
        self.opt["positions"].update(self.raw.positions, g.positions, self._pos_lr(it))
        self.opt["log_scales"].update(self.raw.log_scales, g.log_scales, c.lr_scale * boost)
        self.opt["rotations"].update(self.raw.rotations, g.rotations, c.lr_rotation)
        self.opt["opacity_logits"].update(self.raw.opacity_logits, g.opacity_logits, c.lr_opacity * boost)
        self.opt["rgbs"].update(self.raw.rgbs, g.rgbs, c.lr_rgb * boost)
        np.clip(self.raw.rgbs, 0.0, 1.0, out=self.raw.rgbs)
        np.clip(self.raw.opacity_logits, -12.0, 12.0, out=self.raw.opacity_logits)
        return loss

    def simplify_now(self, target: int):
        self.raw, idx = _simplify_arrays(self.raw, self.max_weight, target, self.rng)
        for opt in self.opt.values():
            opt.remap(idx, 0)
        self.max_weight = self.max_weight[idx] * 0.0
        self.grad_accum = self.grad_accum[idx] * 0.0
        self.grad_count = self.grad_count[idx] * 0.0

    def densify_and_prune(self, cap: int):
        c = self.cfg
        n = len(self.raw.positions)
        avg = np.zeros(n)
        seen = self.grad_count > 0
        avg[seen] = self.grad_accum[seen] / self.grad_count[seen]
        ops = sigmoid(self.raw.opacity_logits)
        keep = ops > c.prune_opacity
        candidates = (avg > c.densify_grad_threshold) & keep
        budget = max(cap - int(keep.sum()), 0)
        cand_idx = np.nonzero(candidates)[0]
        if len(cand_idx) > budget:
            top = np.argsort(-avg[cand_idx], kind="stable")[:budget]
            chosen = np.zeros(n, dtype=bool)
            chosen[cand_idx[top]] = True
        else:
            chosen = candidates
        scales = np.exp(self.raw.log_scales)
        big = scales.max(axis=1) > c.percent_dense * self.extent
        split_m = chosen & big
        clone_m = chosen & ~big

        keep_after = keep & ~split_m  # split replaces the original
        keep_idx = np.nonzero(keep_after)[0]

        new_pos, new_ls, new_rot, new_op, new_rgb = [], [], [], [], []
        if clone_m.any():
            ci = np.nonzero(clone_m)[0]
            new_pos.append(self.raw.positions[ci])
            new_ls.append(self.raw.log_scales[ci])
            new_rot.append(self.raw.rotations[ci])
            new_op.append(self.raw.opacity_logits[ci])
            new_rgb.append(self.raw.rgbs[ci])
        if split_m.any():
            si = np.nonzero(split_m)[0]
            from .rasterizer import quat_to_rot

            q = self.raw.rotations[si]
            qn = q / np.maximum(np.linalg.norm(q, axis=1, keepdims=True), 1e-12)
            R = quat_to_rot(qn)
            s = np.exp(self.raw.log_scales[si])
            for _ in range(2):
                local = self.rng.normal(size=(len(si), 3)) * s
                offs = np.einsum("nij,nj->ni", R, local)
                new_pos.append(self.raw.positions[si] + offs)
                new_ls.append(self.raw.log_scales[si] - np.log(1.6))
                new_rot.append(self.raw.rotations[si])
                new_op.append(self.raw.opacity_logits[si])
                new_rgb.append(self.raw.rgbs[si])

        def stack(old, extra):
            return np.concatenate([old[keep_idx]] + extra, axis=0) if extra else old[keep_idx].copy()

        n_new = sum(len(p) for p in new_pos)
        self.raw = RawSplats(
            positions=stack(self.raw.positions, new_pos),
            log_scales=stack(self.raw.log_scales, new_ls),
            rotations=stack(self.raw.rotations, new_rot),
            opacity_logits=stack(self.raw.opacity_logits, new_op),
            rgbs=stack(self.raw.rgbs, new_rgb),
        )
        for opt in self.opt.values():
            opt.remap(keep_idx, n_new)
        total = len(self.raw.positions)
        self.max_weight = np.zeros(total)
        self.grad_accum = np.zeros(total)
        self.grad_count = np.zeros(total)


def initialize_model(
    points: list[ColoredPoint],
    views: list[TrainView],
    config: TrainConfig | None = None,
    settings_hash: int = 0,
    should_stop: Optional[Callable[[], bool]] = None,
    on_iteration: Optional[Callable[[int, float], None]] = None,
) -> SplatModel:
    """Abbreviated training on the seeded point cloud: no densification, one
    simplification pass at ``simplify_at`` down to ``target_gaussians``."""
    config = config or TrainConfig()
    if not points:
        raise ValueError("empty point cloud")
    if len(views) < 4:
        raise ValueError("need at least 4 training views")
    raw = seed_from_points(points)
    extent = scene_extent_of(views)
    tr = _Trainer(raw, views, config, extent)
    for it in range(config.total_iters):
        if should_stop is not None and should_stop():
            break
        loss = tr.step(it)
        if it == config.simplify_at:
            tr.simplify_now(config.target_gaussians)
        if on_iteration is not None:
            on_iteration(it, loss)
    if len(tr.raw.positions) > config.target_gaussians:
        tr.simplify_now(config.target_gaussians)
    return tr.raw.to_model(generation=1, settings_hash=settings_hash)


VALIDATE_EVERY = 200


def refine_model(
    model: SplatModel,
    views: list[TrainView],
    config: TrainConfig | None = None,
    settings_hash: Optional[int] = None,
    should_stop: Optional[Callable[[], bool]] = None,
    on_iteration: Optional[Callable[[int, float], None]] = None,
    snapshot: Optional[Callable[[SplatModel], None]] = None,
) -> SplatModel:
    """Restart optimization from the model's Gaussians with fresh optimizer
    state; densify inside [densify_from, densify_until]; bump the generation.

    A slice of the views is held out for validation and the best-scoring
    snapshot is returned (the input model is the iteration-0 candidate), so
    refining without genuinely new information cannot degrade the model.
    """
    if config is None:
        config = TrainConfig(total_iters=4000, simplify_at=95)
    if len(model) == 0:
        raise ValueError("cannot refine an empty model")
    if settings_hash is not None and settings_hash != model.settings_hash:
        raise ValueError(
            f"stale model: settings hash {model.settings_hash:#x} does not match views {settings_hash:#x}"
        )
    if len(views) < 1:
        raise ValueError("refinement needs at least one view")

    if len(views) >= 8:
        val_views = views[::6][:8]
        train_views = [v for i, v in enumerate(views) if i % 6 != 0 or i // 6 >= 8]
    else:
        val_views = []
        train_views = views

    def score(m: SplatModel) -> float:
        return float(np.mean([model_view_mpsnr(m, v) for v in val_views]))

    cap = int(np.ceil(config.max_growth * len(model)))
    raw = RawSplats.from_model(model)
    extent = scene_extent_of(views)
    tr = _Trainer(raw, train_views, config, extent, use_boost=False, balance_sources=True)
    best = model
    best_score = score(model) if val_views else -np.inf
    for it in range(config.total_iters):
        if should_stop is not None and should_stop():
            break
        loss = tr.step(it)
        in_window = config.densify_from <= it < config.densify_until
        if in_window and (it - config.densify_from + 1) % config.densify_interval == 0:
            tr.densify_and_prune(cap)
        if val_views and ((it + 1) % VALIDATE_EVERY == 0 or it + 1 == config.total_iters):
            cand = tr.raw.to_model(model.generation + 1, model.settings_hash)
            s = score(cand)
            if s > best_score:
                best, best_score = cand, s
        if on_iteration is not None:
            on_iteration(it, loss)
        if snapshot is not None:
            snapshot(tr.raw.to_model(model.generation + 1, model.settings_hash))
    if not val_views:
        best = tr.raw.to_model(model.generation + 1, model.settings_hash)
    if best is model:
        best = RawSplats.from_model(model).to_model(model.generation + 1, model.settings_hash)
    return best


def save_checkpoint(model: SplatModel, path, iteration: int, loss: float, view_count: int) -> None:
    """Splat binary plus a JSON sidecar with training metadata."""
    path = str(path)
    save_model(model, path)
    meta = {"iteration": iteration, "loss": loss, "view_count": view_count, "gaussians": len(model)}
    with open(path + ".json", "w", encoding="utf-8") as fh:
        json.dump(meta, fh)
