"""Level-of-detail lifecycle: scale floors, importance pruning, level
cloning, and the standard densify/prune loop.

Each level imposes a lower bound on splat scale; training advances through
levels coarse to fine, pruning low-importance splats at each transition and
re-solving the unconstrained scale parameter so effective scales carry over.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import InvalidInputError, inverse_sigmoid, sigmoid

_SOLVE_FLOOR = 1e-12


@dataclass(frozen=True)
class LodConfig:
    l_max: int = 3
    lam: float = 0.002            # level-1 scale floor, world units
    rho: float = 0.5              # geometric factor across levels
    exponent_sign: str = "paper"  # "paper": rho**(1-l); "flod": rho**(l-1)
    q_prune: float = 0.1          # importance quantile dropped per transition

    def __post_init__(self):
        if not (0.0 < self.rho < 1.0):
            raise InvalidInputError("rho must be in (0,1)")
        if self.lam <= 0:
            raise InvalidInputError("lam must be > 0")
        if self.l_max < 1:
            raise InvalidInputError("l_max must be >= 1")
        if self.exponent_sign not in ("paper", "flod"):
            raise InvalidInputError("exponent_sign must be 'paper' or 'flod'")


@dataclass(frozen=True)
class DensifyConfig:
    grad_threshold: float = 1e-4
    opacity_prune: float = 0.005
    interval: int = 300
    window_start: int = 500
    window_end: int = 10000
    reset_iteration: int = 3000
    reset_value: float = 0.01
    percent_dense: float = 0.01
    scene_extent: float = 3.0
    max_gaussians: int = 100000
    split_scale_factor: float = 1.6   # children scale = parent / 1.6
    split_children: int = 2


def min_scale(level, cfg: LodConfig):
    """Scale floor at a level: zero at the finest level, geometric elsewhere."""
    if level < 1 or level > cfg.l_max:
        raise InvalidInputError(f"level {level} outside [1, {cfg.l_max}]")
    if level == cfg.l_max:
        return 0.0
    expo = (1 - level) if cfg.exponent_sign == "paper" else (level - 1)
    return cfg.lam * cfg.rho**expo


def min_scale_per_gaussian(levels, cfg: LodConfig):
    table = np.array([min_scale(l, cfg) for l in range(1, cfg.l_max + 1)])
    return table[np.asarray(levels, dtype=int) - 1]


def effective_scale(log_scale_opt, level, cfg: LodConfig):
    """exp(s_opt) + floor(level), component-wise."""
    s = np.exp(np.asarray(log_scale_opt, dtype=float))
    if np.isscalar(level) or np.asarray(level).ndim == 0:
        return s + min_scale(int(level), cfg)
    return s + min_scale_per_gaussian(level, cfg)[..., None]


def solve_log_scale(target_effective, level, cfg: LodConfig):
    """Invert effective_scale for a new level.

    Returns (log_scale_opt, feasible); infeasible components (target at or
    below the new floor) clamp to a tiny positive exp() argument.
    """
    target = np.asarray(target_effective, dtype=float)
    floor = min_scale(level, cfg) if np.isscalar(level) else min_scale_per_gaussian(level, cfg)[..., None]
    diff = target - floor
    feasible = diff > _SOLVE_FLOOR
    out = np.log(np.where(feasible, diff, _SOLVE_FLOOR))
    return out, feasible


def accumulate_importance(importance, increments):
    """Add one render pass's per-splat blend-weight sums."""
    importance += increments
    return importance


def advance_level(scene, cfg: LodConfig):
    """Move the whole scene one level finer.

    Prunes the lowest-importance quantile, re-solves log scales so every
    survivor keeps its effective scale where algebraically possible, resets
    importance counters. Returns (keep_indices, n_clamped).
    """
    levels = scene.levels
    current = int(levels.max(initial=1))
    if current >= cfg.l_max:
        raise InvalidInputError("already at the finest level")
    n = scene.n
    order = np.argsort(scene.importance, kind="stable")
    n_prune = int(np.floor(cfg.q_prune * n))
    n_prune = min(n_prune, n - 1)       # never empty the scene
    keep = np.sort(order[n_prune:])
    scene.select(keep)
    old_eff = effective_scale(scene.log_scales, scene.levels, cfg)
    new_level = scene.levels + 1
    new_opt, feasible = solve_log_scale(old_eff, new_level, cfg)
    scene.log_scales = new_opt
    scene.levels = new_level
    scene.importance[:] = 0.0
    return keep, int(np.sum(~feasible))


def densify_candidates(scene, grad_accum, grad_count, cfg_d: DensifyConfig,
                       lod_cfg: LodConfig):
    """Split/clone masks from accumulated screen-space gradient statistics."""
    avg = grad_accum / np.maximum(grad_count, 1)
    hot = avg > cfg_d.grad_threshold
    eff = effective_scale(scene.log_scales, scene.levels, lod_cfg)
    big = eff.max(axis=1) > cfg_d.percent_dense * cfg_d.scene_extent
    return hot & big, hot & ~big      # split_mask, clone_mask


def split_parameters(scene, split_idx, cfg_d: DensifyConfig, lod_cfg: LodConfig, rng):
    """Child parameters for a split: positions sampled inside the parent
    footprint, scales divided by the split factor."""
    from .gaussians import quat_to_rotmat
    k = cfg_d.split_children
    idx = np.repeat(split_idx, k)
    eff = effective_scale(scene.log_scales[idx], scene.levels[idx], lod_cfg)
    R = quat_to_rotmat(scene.quaternions[idx])
    local = rng.normal(0.0, 1.0, (idx.size, 3)) * eff
    positions = scene.positions[idx] + np.einsum("nij,nj->ni", R, local)
    child_eff = eff / cfg_d.split_scale_factor
    log_scales, _ = solve_log_scale(child_eff, scene.levels[idx], lod_cfg)
    return idx, positions, log_scales


def opacity_reset_logits(opacity_logits, reset_value):
    """Clamp opacities down to the reset value (in logit space)."""
    ceiling = inverse_sigmoid(reset_value)
    return np.minimum(opacity_logits, ceiling)


def prune_mask_low_opacity(opacity_logits, threshold):
    return sigmoid(opacity_logits) < threshold
