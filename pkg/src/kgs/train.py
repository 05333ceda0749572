"""Training loop: Adam with exponential learning-rate decay, the composite
objective, densification bookkeeping, the partition/level schedules, and
exact-resume checkpoints.

Gradients across a batch reduce in fixed frame order and all structural
edits happen at iteration barriers, so a run is a deterministic function of
(config, dataset, seed, thread count) with thread count only affecting tile
scheduling, never values.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np

from .decomposition import (
    Partition,
    all_dynamic_partition,
    classify,
    compute_scores,
    evaluate_partition_schedule,
)
from .deform import FieldParams, NoiseSchedule, build_neighbor_table
from .gaussians import NumericalError
from .lod import (
    DensifyConfig,
    LodConfig,
    advance_level,
    densify_candidates,
    opacity_reset_logits,
    prune_mask_low_opacity,
    split_parameters,
)
from .losses import (
    ani_loss,
    ani_loss_backward,
    image_loss,
    image_loss_backward,
    reg_loss,
    reg_loss_backward,
)
from .renderer import ParamGrads, RenderSettings, render, render_backward, zero_grads
from .scene import Scene, read_checkpoint, write_checkpoint


def exponential_lr(initial, final, k, total):
    if total <= 0 or initial <= 0:
        return initial
    frac = np.clip(k / total, 0.0, 1.0)
    return float(initial * (final / initial) ** frac)


class Adam:
    """Adam over a dict of named arrays, with row surgery for per-splat
    parameters so densification can extend or prune optimizer state."""

    def __init__(self, names_shapes, beta1=0.9, beta2=0.999, eps=1e-15):
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.t = 0
        self.m = {n: np.zeros(s) for n, s in names_shapes}
        self.v = {n: np.zeros(s) for n, s in names_shapes}

    def step(self, params: dict, grads: dict, lrs: dict):
        self.t += 1
        bc1 = 1.0 - self.beta1**self.t
        bc2 = 1.0 - self.beta2**self.t
        for name, p in params.items():
            g = grads[name]
            m = self.m[name]
            v = self.v[name]
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            p -= lrs[name] * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def select_rows(self, names, idx):
        for n in names:
            self.m[n] = self.m[n][idx]
            self.v[n] = self.v[n][idx]

    def append_rows(self, names, k):
        for n in names:
            pad = np.zeros((k,) + self.m[n].shape[1:])
            self.m[n] = np.concatenate([self.m[n], pad])
            self.v[n] = np.concatenate([self.v[n], pad])

    def state_arrays(self):
        out = {}
        for n in self.m:
            out[f"adam_m_{n}"] = self.m[n]
            out[f"adam_v_{n}"] = self.v[n]
        return out

    def load_state_arrays(self, arrays):
        for n in self.m:
            self.m[n] = arrays[f"adam_m_{n}"]
            self.v[n] = arrays[f"adam_v_{n}"]


@dataclass
class LossWeights:
    lambda_dssim: float = 0.2
    lambda_reg: float = 0.01
    lambda_ani: float = 0.001
    eps_ani: float = 1e-6


@dataclass
class TrainState:
    scene: Scene
    fieldp: FieldParams
    partition: Partition
    neighbor_table: np.ndarray | None
    adam: Adam
    rng: np.random.Generator
    iteration: int = 0
    grad_accum: np.ndarray = None
    grad_count: np.ndarray = None
    clamp_warnings: int = 0

    def __post_init__(self):
        if self.grad_accum is None:
            self.grad_accum = np.zeros(self.scene.n)
        if self.grad_count is None:
            self.grad_count = np.zeros(self.scene.n)


SCENE_PARAM_NAMES = ["positions", "quaternions", "log_scales", "opacity_logits", "colors"]


def make_adam(scene: Scene, fieldp: FieldParams, beta1=0.9, beta2=0.999, eps=1e-15):
    shapes = [(n, scene.per_gaussian_arrays()[n].shape) for n in SCENE_PARAM_NAMES]
    shapes += [(n, a.shape) for n, a in fieldp.param_items()]
    return Adam(shapes, beta1=beta1, beta2=beta2, eps=eps)


def frame_loss_and_grads(state: TrainState, cam, target, t, dt, noise_sigma,
                         settings: RenderSettings, weights: LossWeights):
    """Render one frame in train mode and backpropagate the full objective."""
    frame, tape = render(state.scene, state.partition, state.fieldp, cam, t,
                         settings, mode="train", rng=state.rng,
                         noise_sigma=noise_sigma, dt=dt,
                         neighbor_table=state.neighbor_table, want_tape=True)
    img_val, img_cache = image_loss(frame.image, target, weights.lambda_dssim)
    d_image = image_loss_backward(img_cache)

    pose = tape.pose
    dyn = pose["dyn"]
    # offsets the objective regularizes: composed for dynamic, raw for static
    dx_reg = np.where(dyn[:, None], pose["offsets"][:, 0:3], pose["raw"][:, 0:3])
    reg_val = reg_loss(dx_reg, dyn)
    d_dx_extra = reg_loss_backward(dx_reg, dyn, weights.lambda_reg)

    scales = pose["scales_render"]
    ani_val = ani_loss(scales, weights.eps_ani)
    d_scales_extra = ani_loss_backward(scales, weights.eps_ani, weights.lambda_ani)

    grads = render_backward(tape, d_image, state.fieldp,
                            d_dx_extra=d_dx_extra, d_scales_extra=d_scales_extra)
    total = img_val + weights.lambda_reg * reg_val + weights.lambda_ani * ani_val
    terms = {"loss": total, "l_img": img_val, "l_reg": reg_val, "l_ani": ani_val}
    return terms, grads, frame


def apply_step(state: TrainState, grads: ParamGrads, lrs: dict):
    params = {n: state.scene.per_gaussian_arrays()[n] for n in SCENE_PARAM_NAMES}
    params.update(dict(state.fieldp.param_items()))
    gdict = dict(grads.scene_items() + grads.field_items())
    state.adam.step(params, gdict, lrs)
    state.scene.renormalize_rotations()


def learning_rates(cfg, k):
    """Per-parameter learning rates at iteration k (exponential decay)."""
    total = cfg.iterations
    return {
        "positions": exponential_lr(cfg.lr_position, cfg.lr_position_final, k, total),
        "quaternions": cfg.lr_rotation,
        "log_scales": cfg.lr_scale,
        "opacity_logits": cfg.lr_opacity,
        "colors": cfg.lr_color,
        "w1": exponential_lr(cfg.lr_field, cfg.lr_field_final, k, total),
        "b1": exponential_lr(cfg.lr_field, cfg.lr_field_final, k, total),
        "w2": exponential_lr(cfg.lr_field, cfg.lr_field_final, k, total),
        "b2": exponential_lr(cfg.lr_field, cfg.lr_field_final, k, total),
        "fine_w1": exponential_lr(cfg.lr_field, cfg.lr_field_final, k, total),
        "fine_b1": exponential_lr(cfg.lr_field, cfg.lr_field_final, k, total),
        "fine_w2": exponential_lr(cfg.lr_field, cfg.lr_field_final, k, total),
        "fine_b2": exponential_lr(cfg.lr_field, cfg.lr_field_final, k, total),
        "features": cfg.lr_features,
    }


# ---------------------------------------------------------------------------
# structural edits
# ---------------------------------------------------------------------------

def _refresh_partition_arrays(state: TrainState, keep=None, appended=0,
                              parent_idx=None):
    """Keep partition/stat arrays aligned with the scene after row surgery.
    New splats inherit the parent's label until the next evaluation."""
    mask = state.partition.dynamic_mask()
    scores = state.partition.scores
    if keep is not None:
        mask = mask[keep]
        scores = scores[keep]
        state.grad_accum = state.grad_accum[keep]
        state.grad_count = state.grad_count[keep]
    if appended:
        mask = np.concatenate([mask, mask[parent_idx]])
        scores = np.concatenate([scores, scores[parent_idx]])
        state.grad_accum = np.concatenate([state.grad_accum, np.zeros(appended)])
        state.grad_count = np.concatenate([state.grad_count, np.zeros(appended)])
    idx = np.arange(mask.size)
    state.partition = Partition(dynamic_indices=idx[mask],
                                static_indices=idx[~mask], scores=scores)


def rebuild_neighbors(state: TrainState, k):
    dyn_idx = state.partition.dynamic_indices
    if dyn_idx.size:
        state.neighbor_table = build_neighbor_table(state.scene.positions[dyn_idx], k)
    else:
        state.neighbor_table = None


def densify_and_prune(state: TrainState, iteration, dcfg: DensifyConfig,
                      lod_cfg: LodConfig):
    """Standard split/clone densification plus low-opacity pruning; the
    global opacity reset fires at its own iteration regardless of window."""
    scene = state.scene
    changed = False
    in_window = dcfg.window_start <= iteration <= dcfg.window_end
    if in_window and iteration % dcfg.interval == 0 and scene.n < dcfg.max_gaussians:
        split_mask, clone_mask = densify_candidates(scene, state.grad_accum,
                                                    state.grad_count, dcfg, lod_cfg)
        split_idx = np.where(split_mask)[0]
        clone_idx = np.where(clone_mask)[0]
        parents = []
        if clone_idx.size:
            scene.append(scene.positions[clone_idx], scene.quaternions[clone_idx],
                         scene.log_scales[clone_idx], scene.opacity_logits[clone_idx],
                         scene.colors[clone_idx], scene.levels[clone_idx])
            state.fieldp.features = np.concatenate(
                [state.fieldp.features, state.fieldp.features[clone_idx]])
            parents.append(clone_idx)
        if split_idx.size:
            rep, positions, log_scales = split_parameters(scene, split_idx, dcfg,
                                                          lod_cfg, state.rng)
            scene.append(positions, scene.quaternions[rep], log_scales,
                         scene.opacity_logits[rep], scene.colors[rep],
                         scene.levels[rep])
            state.fieldp.features = np.concatenate(
                [state.fieldp.features, state.fieldp.features[rep]])
            parents.append(rep)
        appended = sum(p.size for p in parents)
        if appended:
            parent_idx = np.concatenate(parents)
            state.adam.append_rows(SCENE_PARAM_NAMES + ["features"], appended)
            _refresh_partition_arrays(state, appended=appended, parent_idx=parent_idx)
            changed = True
        # drop split parents and anything too transparent
        drop = prune_mask_low_opacity(scene.opacity_logits, dcfg.opacity_prune)
        if split_idx.size:
            drop[split_idx] = True
        if drop.any():
            keep = np.where(~drop)[0]
            if keep.size == 0:
                keep = np.array([int(np.argmax(scene.opacity_logits))])
            scene.select(keep)
            state.fieldp.features = state.fieldp.features[keep]
            state.adam.select_rows(SCENE_PARAM_NAMES + ["features"], keep)
            _refresh_partition_arrays(state, keep=keep)
            changed = True
        state.grad_accum[:] = 0.0
        state.grad_count[:] = 0.0
    if iteration == dcfg.reset_iteration:
        scene.opacity_logits = opacity_reset_logits(scene.opacity_logits,
                                                    dcfg.reset_value)
        # the reset rewrites opacities wholesale; stale moments would undo it
        state.adam.m["opacity_logits"][:] = 0.0
        state.adam.v["opacity_logits"][:] = 0.0
        changed = True
    return changed


def advance_scene_level(state: TrainState, lod_cfg: LodConfig):
    keep, clamped = advance_level(state.scene, lod_cfg)
    state.fieldp.features = state.fieldp.features[keep]
    state.adam.select_rows(SCENE_PARAM_NAMES + ["features"], keep)
    _refresh_partition_arrays(state, keep=keep)
    state.clamp_warnings += clamped
    return clamped


def recompute_partition(state: TrainState, tau, n_samples, clamps):
    q_n = state.scene.quaternions / np.linalg.norm(state.scene.quaternions,
                                                   axis=1, keepdims=True)
    scores = compute_scores(state.fieldp, state.scene.positions, q_n,
                            state.scene.log_scales, clamps, n_samples)
    state.partition = classify(scores, tau)


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def save_checkpoint(path, state: TrainState, config_dict: dict):
    arrays = dict(state.scene.per_gaussian_arrays())
    arrays.update(dict(state.fieldp.param_items()))
    arrays.update(state.adam.state_arrays())
    arrays["partition_scores"] = state.partition.scores
    arrays["partition_dynamic"] = state.partition.dynamic_mask().astype(np.uint8)
    arrays["grad_accum"] = state.grad_accum
    arrays["grad_count"] = state.grad_count
    if state.neighbor_table is not None:
        arrays["neighbor_table"] = state.neighbor_table.astype(np.int64)
    meta = {
        "iteration": state.iteration,
        "adam_t": state.adam.t,
        "rng_state": _rng_state_to_json(state.rng),
        "config": config_dict,
        "field_meta": {"time_bands": state.fieldp.time_bands,
                       "pos_bands": state.fieldp.pos_bands},
        "clamp_warnings": state.clamp_warnings,
    }
    write_checkpoint(path, arrays, meta)


def load_checkpoint(path, beta1=0.9, beta2=0.999, eps=1e-15):
    arrays, meta = read_checkpoint(path)
    scene = Scene(positions=arrays["positions"], quaternions=arrays["quaternions"],
                  log_scales=arrays["log_scales"],
                  opacity_logits=arrays["opacity_logits"], colors=arrays["colors"],
                  levels=arrays["levels"].astype(np.int64),
                  importance=arrays["importance"])
    fm = meta["field_meta"]
    fieldp = FieldParams(w1=arrays["w1"], b1=arrays["b1"], w2=arrays["w2"],
                         b2=arrays["b2"], fine_w1=arrays["fine_w1"],
                         fine_b1=arrays["fine_b1"], fine_w2=arrays["fine_w2"],
                         fine_b2=arrays["fine_b2"], features=arrays["features"],
                         time_bands=fm["time_bands"], pos_bands=fm["pos_bands"])
    mask = arrays["partition_dynamic"].astype(bool)
    idx = np.arange(mask.size)
    partition = Partition(dynamic_indices=idx[mask], static_indices=idx[~mask],
                          scores=arrays["partition_scores"])
    adam = make_adam(scene, fieldp, beta1=beta1, beta2=beta2, eps=eps)
    adam.load_state_arrays(arrays)
    adam.t = meta["adam_t"]
    rng = _rng_from_json(meta["rng_state"])
    table = arrays.get("neighbor_table")
    state = TrainState(scene=scene, fieldp=fieldp, partition=partition,
                       neighbor_table=table, adam=adam, rng=rng,
                       iteration=meta["iteration"],
                       grad_accum=arrays["grad_accum"],
                       grad_count=arrays["grad_count"],
                       clamp_warnings=meta.get("clamp_warnings", 0))
    return state, meta


def _rng_state_to_json(rng):
    st = rng.bit_generator.state
    return {"bit_generator": st["bit_generator"],
            "state": {k: int(v) for k, v in st["state"].items()},
            "has_uint32": int(st.get("has_uint32", 0)),
            "uinteger": int(st.get("uinteger", 0))}


def _rng_from_json(d):
    rng = np.random.default_rng(0)
    rng.bit_generator.state = {"bit_generator": d["bit_generator"],
                               "state": {k: int(v) for k, v in d["state"].items()},
                               "has_uint32": d["has_uint32"],
                               "uinteger": d["uinteger"]}
    return rng


# ---------------------------------------------------------------------------
# full loop
# ---------------------------------------------------------------------------

def train_loop(state: TrainState, dataset, cfg, settings: RenderSettings,
               weights: LossWeights, dcfg: DensifyConfig, schedule: NoiseSchedule,
               log_rows: list, iterations=None, on_checkpoint=None):
    """Run (or continue) training. dataset supplies train_frames():
    a list of (cam, target, t) and dt. Appends one log row per iteration."""
    frames = dataset.train_frames()
    dt = dataset.frame_interval()
    total = iterations if iterations is not None else cfg.iterations
    level_budget = max(total // settings.lod.l_max, 1)
    batch = max(cfg.batch, 1)

    while state.iteration < total:
        k = state.iteration + 1
        t0 = time.perf_counter()

        current_level = int(state.scene.levels.max(initial=1))
        if (current_level < settings.lod.l_max and k > 1
                and (k - 1) % level_budget == 0
                and (k - 1) // level_budget == current_level):
            advance_scene_level(state, settings.lod)
            rebuild_neighbors(state, cfg.k_neighbors)

        sigma = schedule.sigma(k)
        picks = state.rng.choice(len(frames), size=min(batch, len(frames)),
                                 replace=False)
        grads = None
        terms_sum = None
        for j in picks:
            cam, target, t = frames[j]
            terms, g, frame = frame_loss_and_grads(state, cam, target, t, dt,
                                                   sigma, settings, weights)
            state.scene.importance += frame.importance
            grads = g if grads is None else grads.add_(g)
            terms_sum = (terms if terms_sum is None else
                         {n: terms_sum[n] + terms[n] for n in terms})
        nb = len(picks)
        grads.scale_(1.0 / nb)
        terms_avg = {n: v / nb for n, v in terms_sum.items()}
        if not np.isfinite(terms_avg["loss"]):
            raise NumericalError(f"non-finite loss at iteration {k}")

        state.grad_accum += grads.densify_norm / nb
        state.grad_count += grads.densify_count / nb

        apply_step(state, grads, learning_rates(cfg, k))
        state.iteration = k

        changed = densify_and_prune(state, k, dcfg, settings.lod)
        if evaluate_partition_schedule(k, cfg.decomp_warmup, cfg.decomp_repeat):
            recompute_partition(state, cfg.tau, cfg.decomp_samples, settings.clamps)
            changed = True
        if changed or k % cfg.k_refresh == 0:
            rebuild_neighbors(state, cfg.k_neighbors)

        wall_ms = (time.perf_counter() - t0) * 1000.0
        log_rows.append({
            "iteration": k, "loss": terms_avg["loss"], "l_img": terms_avg["l_img"],
            "l_reg": terms_avg["l_reg"], "l_ani": terms_avg["l_ani"],
            "n_gaussians": state.scene.n,
            "n_dynamic": state.partition.dynamic_indices.size,
            "wall_ms": wall_ms,
        })
        if on_checkpoint is not None:
            on_checkpoint(state)
    return state
