"""Differentiable software rasterizer for the full pipeline.

Forward: deform the dynamic set, gate on the partition, refine covariances
against predicted velocities, project with the local affine pinhole
Jacobian, bin splats into pixel tiles by conservative screen-space extent,
and composite front-to-back per pixel. The backward pass is fully analytic
and mirrors every stage; per-tile work recomputes its intermediates from the
tape, which reproduces the forward bit-exactly.

Tiles are independent: they may run on a thread pool, and results merge in
fixed tile order, so renders are bit-identical for any thread count.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .decomposition import Partition
from .deform import (
    OffsetClamps,
    coarse_offsets_backward,
    coarse_offsets_batch,
    fine_offsets_backward,
    fine_offsets_batch,
    predict_offsets_backward,
    predict_offsets_batch,
)
from .gaussians import (
    ALPHA_MAX,
    COV2D_DILATION,
    FOOTPRINT_CHI2,
    FOOTPRINT_RADIUS,
    TRANSMITTANCE_CUTOFF,
    Camera,
    NumericalError,
    covariance_from_matrix,
    dexp_map_so3,
    drotmat_dquat,
    exp_map_so3,
    quat_normalize,
    quat_to_rotmat,
    sigmoid,
)
from .kinematics import (
    DEFAULT_KAPPA,
    DEFAULT_LAMBDA_S,
    VELOCITY_FLOOR,
    kinematic_frames_backward,
    kinematic_frames_cached,
)
from .lod import LodConfig, min_scale_per_gaussian

_POOLS: dict = {}


def _pool(threads):
    if threads <= 1:
        return None
    if threads not in _POOLS:
        _POOLS[threads] = ThreadPoolExecutor(max_workers=threads)
    return _POOLS[threads]


@dataclass(frozen=True)
class RenderSettings:
    background: np.ndarray = field(default_factory=lambda: np.zeros(3))
    tile: int = 16
    threads: int = 1
    dilation: float = COV2D_DILATION
    alpha_max: float = ALPHA_MAX
    cutoff: float = TRANSMITTANCE_CUTOFF
    chi2: float = FOOTPRINT_CHI2
    kappa: float = DEFAULT_KAPPA
    lambda_s: float = DEFAULT_LAMBDA_S
    velocity_floor: float = VELOCITY_FLOOR
    refine_enabled: bool = True
    coarse_fine: bool = True
    clamps: OffsetClamps = field(default_factory=OffsetClamps)
    lod: LodConfig = field(default_factory=LodConfig)
    noise_shared: bool = False


@dataclass
class RenderedFrame:
    image: np.ndarray          # (H,W,3), clamped to [0,1]
    transmittance: np.ndarray  # (H,W) remaining light per pixel
    importance: np.ndarray     # (N,) summed blend weights per splat


@dataclass
class RenderTape:
    pose: dict
    proj: dict
    tiles: list
    touched: np.ndarray
    cam: Camera
    settings: RenderSettings
    n: int


@dataclass
class ParamGrads:
    positions: np.ndarray
    quaternions: np.ndarray
    log_scales: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray
    w1: np.ndarray
    b1: np.ndarray
    w2: np.ndarray
    b2: np.ndarray
    fine_w1: np.ndarray
    fine_b1: np.ndarray
    fine_w2: np.ndarray
    fine_b2: np.ndarray
    features: np.ndarray
    densify_norm: np.ndarray
    densify_count: np.ndarray

    def scene_items(self):
        return [("positions", self.positions), ("quaternions", self.quaternions),
                ("log_scales", self.log_scales), ("opacity_logits", self.opacity_logits),
                ("colors", self.colors)]

    def field_items(self):
        return [("w1", self.w1), ("b1", self.b1), ("w2", self.w2), ("b2", self.b2),
                ("fine_w1", self.fine_w1), ("fine_b1", self.fine_b1),
                ("fine_w2", self.fine_w2), ("fine_b2", self.fine_b2),
                ("features", self.features)]

    def add_(self, other):
        for (_, a), (_, b) in zip(self.scene_items() + self.field_items(),
                                  other.scene_items() + other.field_items()):
            a += b
        self.densify_norm += other.densify_norm
        self.densify_count += other.densify_count
        return self

    def scale_(self, factor):
        for _, a in self.scene_items() + self.field_items():
            a *= factor
        return self


def zero_grads(scene, fieldp) -> ParamGrads:
    return ParamGrads(
        positions=np.zeros_like(scene.positions),
        quaternions=np.zeros_like(scene.quaternions),
        log_scales=np.zeros_like(scene.log_scales),
        opacity_logits=np.zeros_like(scene.opacity_logits),
        colors=np.zeros_like(scene.colors),
        w1=np.zeros_like(fieldp.w1), b1=np.zeros_like(fieldp.b1),
        w2=np.zeros_like(fieldp.w2), b2=np.zeros_like(fieldp.b2),
        fine_w1=np.zeros_like(fieldp.fine_w1), fine_b1=np.zeros_like(fieldp.fine_b1),
        fine_w2=np.zeros_like(fieldp.fine_w2), fine_b2=np.zeros_like(fieldp.fine_b2),
        features=np.zeros_like(fieldp.features),
        densify_norm=np.zeros(scene.n), densify_count=np.zeros(scene.n))


# ---------------------------------------------------------------------------
# pose stage: deformation, gating, refinement
# ---------------------------------------------------------------------------

def _pose_forward(scene, partition: Partition, fieldp, neighbor_table, t, dt,
                  blur_dt, noise_sigma, rng, s: RenderSettings):
    n = scene.n
    dyn = partition.dynamic_mask()
    dyn_idx = np.where(dyn)[0]
    q_n = quat_normalize(scene.quaternions)

    raw, pred_cache = predict_offsets_batch(
        fieldp, scene.positions, q_n, scene.log_scales, t, noise_sigma, rng,
        s.clamps, noise_shared=s.noise_shared)

    fine_cache = None
    table = neighbor_table
    if s.coarse_fine and dyn_idx.size:
        if table is None:
            from .deform import build_neighbor_table
            table = build_neighbor_table(scene.positions[dyn_idx], 8)
        coarse = coarse_offsets_batch(raw[dyn_idx], table)
        fine, fine_cache = fine_offsets_batch(fieldp, fieldp.features[dyn_idx], t, s.clamps)
        eff_dyn = coarse + fine
    else:
        eff_dyn = raw[dyn_idx]

    offsets = np.zeros((n, 9))
    offsets[dyn_idx] = eff_dyn
    dx_r, dr_r, ds_r = offsets[:, 0:3], offsets[:, 3:6], offsets[:, 6:9]

    pos_t = scene.positions + dx_r
    E = exp_map_so3(dr_r)
    R_q = quat_to_rotmat(q_n)
    R_pred = R_q @ E
    s_min = min_scale_per_gaussian(scene.levels, s.lod)[:, None]
    exp_term = np.exp(scene.log_scales + ds_r)
    s_pred = exp_term + s_min
    cov_pred = covariance_from_matrix(R_pred, s_pred)

    v = dx_r / dt
    speed = np.linalg.norm(v, axis=1)
    refined = s.refine_enabled & dyn & (speed >= s.velocity_floor)
    ridx = np.where(refined)[0]

    cov_render = cov_pred.copy()
    scales_render = s_pred.copy()
    refine_cache = None
    if ridx.size:
        U, basis_cache = kinematic_frames_cached(v[ridx])
        cov_p = cov_pred[ridx]
        variances = np.einsum("nik,nij,njk->nk", U, cov_p, U)
        sig = np.sqrt(variances)
        r_z = R_pred[ridx][:, :, 2]
        u_z = U[:, :, 2]
        dot = np.sum(r_z * u_z, axis=1)
        gate_floor = sigmoid(s.kappa)
        eta = np.maximum(np.abs(dot), gate_floor)
        gate_open = np.abs(dot) > gate_floor
        blur_len = eta * speed[ridx] * blur_dt
        s_prime = sig.copy()
        s_prime[:, 2] += blur_len
        ell = np.log(s_prime) + s.lambda_s * ds_r[ridx]
        S_diag = np.exp(ell)
        R_kin = U @ E[ridx]
        cov_render[ridx] = covariance_from_matrix(R_kin, S_diag)
        scales_render[ridx] = S_diag
        refine_cache = {"U": U, "basis": basis_cache, "variances": variances,
                        "sig": sig, "dot": dot, "eta": eta, "gate_open": gate_open,
                        "blur_len": blur_len, "s_prime": s_prime, "S_diag": S_diag,
                        "R_kin": R_kin, "cov_p": cov_p}

    bad = ~np.isfinite(cov_render.reshape(n, -1)).all(axis=1) | ~np.isfinite(pos_t).all(axis=1)
    if bad.any():
        raise NumericalError(f"non-finite pose for gaussian {int(np.where(bad)[0][0])}")

    colors_c = np.clip(scene.colors, 0.0, 1.0)
    color_mask = (scene.colors > 0.0) & (scene.colors < 1.0)
    opac = sigmoid(scene.opacity_logits)

    return {"n": n, "dyn": dyn, "dyn_idx": dyn_idx, "q_n": q_n, "raw": raw,
            "pred_cache": pred_cache, "fine_cache": fine_cache, "table": table,
            "offsets": offsets, "pos_t": pos_t, "E": E, "R_q": R_q,
            "R_pred": R_pred, "exp_term": exp_term, "s_pred": s_pred,
            "cov_pred": cov_pred, "v": v, "speed": speed, "refined": refined,
            "ridx": ridx, "refine": refine_cache, "cov_render": cov_render,
            "scales_render": scales_render, "colors_c": colors_c,
            "color_mask": color_mask, "opac": opac, "dt": dt, "blur_dt": blur_dt,
            "quats_raw": scene.quaternions.copy(), "cf_active": bool(s.coarse_fine and dyn_idx.size)}


def _sym(m):
    return 0.5 * (m + np.swapaxes(m, -1, -2))


def _cov_matrix_backward(R, scale, grad_cov):
    """Backward of covariance_from_matrix: returns (d_R, d_scale)."""
    G = _sym(grad_cov)
    d_R = 2.0 * G @ (R * (scale**2)[..., None, :])
    diag = np.einsum("nik,nij,njk->nk", R, G, R)
    d_scale = 2.0 * scale * diag
    return d_R, d_scale


def _pose_backward(pose, s: RenderSettings, fieldp, d_pos_t, d_cov3,
                   d_dx_extra=None, d_scales_extra=None):
    n = pose["n"]
    dyn = pose["dyn"]
    dyn_idx = pose["dyn_idx"]
    ridx = pose["ridx"]
    refined = pose["refined"]
    E = pose["E"]

    d_positions = d_pos_t.copy()
    d_dx_render = np.where(dyn[:, None], d_pos_t, 0.0)
    d_ds_render = np.zeros((n, 3))
    d_cov_pred = np.where(refined[:, None, None], 0.0, d_cov3)
    d_s_pred = np.zeros((n, 3))
    d_Rpred = np.zeros((n, 3, 3))
    d_E = np.zeros((n, 3, 3))
    d_v = np.zeros((n, 3))

    if d_scales_extra is not None:
        d_s_pred += np.where(refined[:, None], 0.0, d_scales_extra)

    rc = pose["refine"]
    if ridx.size:
        U = rc["U"]
        S_diag = rc["S_diag"]
        R_kin = rc["R_kin"]
        G_kin = d_cov3[ridx]
        d_Rkin, d_ell_from_cov = _cov_matrix_backward(R_kin, S_diag, G_kin)
        # d/d ell of exp(ell): one more factor of S_diag
        d_ell = d_ell_from_cov * S_diag
        if d_scales_extra is not None:
            d_ell += d_scales_extra[ridx] * S_diag
        d_ds_render[ridx] += s.lambda_s * d_ell
        d_sprime = d_ell / rc["s_prime"]
        d_sig = d_sprime.copy()
        d_blur = d_sprime[:, 2]
        d_eta = d_blur * pose["speed"][ridx] * pose["blur_dt"]
        d_speed_r = d_blur * rc["eta"] * pose["blur_dt"]
        # eta = max(|dot|, floor): zero subgradient on the floor branch
        d_dot = np.where(rc["gate_open"], np.sign(rc["dot"]) * d_eta, 0.0)
        u_z = U[:, :, 2]
        r_z = pose["R_pred"][ridx][:, :, 2]
        d_rz = d_dot[:, None] * u_z
        d_uz_eta = d_dot[:, None] * r_z
        d_vars = d_sig / (2.0 * rc["sig"])
        d_cov_pred[ridx] += np.einsum("nk,nik,njk->nij", d_vars, U, U)
        d_U = 2.0 * np.einsum("nk,nij,njk->nik", d_vars, rc["cov_p"], U)
        d_U += d_Rkin @ np.swapaxes(E[ridx], -1, -2)
        d_E[ridx] += np.swapaxes(U, -1, -2) @ d_Rkin
        d_U[:, :, 2] += d_uz_eta
        d_v[ridx] = kinematic_frames_backward(rc["basis"], d_U, d_speed_r)
        d_Rpred_r = np.zeros((ridx.size, 3, 3))
        d_Rpred_r[:, :, 2] = d_rz
        d_Rpred[ridx] += d_Rpred_r

    # predicted (pre-refinement) covariance for every row
    d_Rp, d_sp = _cov_matrix_backward(pose["R_pred"], pose["s_pred"], d_cov_pred)
    d_Rpred += d_Rp
    d_s_pred += d_sp
    d_exp = d_s_pred * pose["exp_term"]
    d_log_scales = d_exp.copy()
    d_ds_render += d_exp

    # R_pred = R_q E
    d_Rq = d_Rpred @ np.swapaxes(E, -1, -2)
    d_E += np.swapaxes(pose["R_q"], -1, -2) @ d_Rpred

    # rotation residual (dynamic rows only; static rows held at zero)
    d_dr_render = np.zeros((n, 3))
    if dyn_idx.size:
        dexp = dexp_map_so3(pose["offsets"][dyn_idx, 3:6])
        d_dr_render[dyn_idx] = np.einsum("nab,nmab->nm", d_E[dyn_idx], dexp)

    # velocity path
    d_dx_render += d_v / pose["dt"]

    # assemble gradients wrt the applied (composed) offsets
    d_eff = np.concatenate([d_dx_render, d_dr_render, d_ds_render], axis=1)[dyn_idx]
    if d_dx_extra is not None and dyn_idx.size:
        d_eff[:, 0:3] += d_dx_extra[dyn_idx]

    d_raw = np.zeros((n, 9))
    grads_fine = None
    d_features = np.zeros_like(fieldp.features)
    if pose["cf_active"]:
        d_raw[dyn_idx] = coarse_offsets_backward(pose["table"], dyn_idx.size, d_eff)
        fw1, fb1, fw2, fb2, d_f = fine_offsets_backward(fieldp, pose["fine_cache"], d_eff)
        grads_fine = (fw1, fb1, fw2, fb2)
        d_features[dyn_idx] = d_f
    elif dyn_idx.size:
        d_raw[dyn_idx] = d_eff
    if d_dx_extra is not None:
        static_rows = ~dyn
        d_raw[static_rows, 0:3] += d_dx_extra[static_rows]

    d_w1, d_b1, d_w2, d_b2, d_pos_enc, d_qn_pred, d_ls_pred = predict_offsets_backward(
        fieldp, pose["pred_cache"], d_raw)
    d_positions += d_pos_enc
    d_log_scales += d_ls_pred

    # quaternion path: rotation matrices take the raw quaternion directly;
    # the predictor consumed the normalized one
    q_raw = pose["quats_raw"]
    d_quats = np.einsum("nab,nmab->nm", d_Rq, drotmat_dquat(q_raw))
    q_n = pose["q_n"]
    norm_raw = np.linalg.norm(q_raw, axis=1, keepdims=True)
    d_quats += (d_qn_pred - np.sum(d_qn_pred * q_n, axis=1, keepdims=True) * q_n) / norm_raw

    if grads_fine is None:
        grads_fine = (np.zeros_like(fieldp.fine_w1), np.zeros_like(fieldp.fine_b1),
                      np.zeros_like(fieldp.fine_w2), np.zeros_like(fieldp.fine_b2))
    return {"positions": d_positions, "quaternions": d_quats,
            "log_scales": d_log_scales, "w1": d_w1, "b1": d_b1, "w2": d_w2,
            "b2": d_b2, "fine": grads_fine, "features": d_features}


# ---------------------------------------------------------------------------
# projection stage
# ---------------------------------------------------------------------------

def _project_forward(pos_t, cov3, cam: Camera, dilation):
    p_cam = pos_t @ cam.rotation.T + cam.translation
    x, y, z = p_cam[:, 0], p_cam[:, 1], p_cam[:, 2]
    valid = z >= cam.near
    zs = np.where(valid, z, 1.0)
    inv_z = 1.0 / zs
    inv_z2 = inv_z * inv_z
    n = pos_t.shape[0]
    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = cam.fx * inv_z
    J[:, 0, 2] = -cam.fx * x * inv_z2
    J[:, 1, 1] = cam.fy * inv_z
    J[:, 1, 2] = -cam.fy * y * inv_z2
    M = J @ cam.rotation
    cov2d = _sym(M @ cov3 @ np.swapaxes(M, -1, -2))
    cov2d[:, 0, 0] += dilation
    cov2d[:, 1, 1] += dilation
    mean2d = np.stack([cam.fx * x * inv_z + cam.cx, cam.fy * y * inv_z + cam.cy], axis=-1)
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    conic = np.stack([cov2d[:, 1, 1] / det, -cov2d[:, 0, 1] / det,
                      cov2d[:, 0, 0] / det], axis=-1)
    return {"p_cam": p_cam, "valid": valid, "J": J, "M": M, "cov2d": cov2d,
            "mean2d": mean2d, "conic": conic, "depth": z, "cov3": cov3}


def _project_backward(proj, cam: Camera, d_mean2d, d_conic):
    valid = proj["valid"]
    M = proj["M"]
    cov2d = proj["cov2d"]
    n = M.shape[0]
    # conic = inverse of cov2d; off-diagonal gradient splits across the two
    # symmetric entries
    Gl = np.empty((n, 2, 2))
    Gl[:, 0, 0] = d_conic[:, 0]
    Gl[:, 0, 1] = Gl[:, 1, 0] = 0.5 * d_conic[:, 1]
    Gl[:, 1, 1] = d_conic[:, 2]
    lam = np.empty((n, 2, 2))
    lam[:, 0, 0] = proj["conic"][:, 0]
    lam[:, 0, 1] = lam[:, 1, 0] = proj["conic"][:, 1]
    lam[:, 1, 1] = proj["conic"][:, 2]
    d_cov2d = -lam @ Gl @ lam
    G2 = _sym(d_cov2d)
    d_cov3 = np.swapaxes(M, -1, -2) @ G2 @ M
    d_M = 2.0 * G2 @ M @ proj["cov3"]
    d_J = d_M @ cam.rotation.T

    x, y, z = proj["p_cam"][:, 0], proj["p_cam"][:, 1], proj["p_cam"][:, 2]
    zs = np.where(valid, z, 1.0)
    inv_z = 1.0 / zs
    inv_z2 = inv_z * inv_z
    inv_z3 = inv_z2 * inv_z
    d_x = d_J[:, 0, 2] * (-cam.fx * inv_z2) + d_mean2d[:, 0] * cam.fx * inv_z
    d_y = d_J[:, 1, 2] * (-cam.fy * inv_z2) + d_mean2d[:, 1] * cam.fy * inv_z
    d_z = (d_J[:, 0, 0] * (-cam.fx * inv_z2) + d_J[:, 1, 1] * (-cam.fy * inv_z2)
           + d_J[:, 0, 2] * (2.0 * cam.fx * x * inv_z3)
           + d_J[:, 1, 2] * (2.0 * cam.fy * y * inv_z3)
           + d_mean2d[:, 0] * (-cam.fx * x * inv_z2)
           + d_mean2d[:, 1] * (-cam.fy * y * inv_z2))
    d_pcam = np.stack([d_x, d_y, d_z], axis=-1)
    d_pcam[~valid] = 0.0
    d_cov3[~valid] = 0.0
    d_pos = d_pcam @ cam.rotation
    return d_pos, d_cov3


# ---------------------------------------------------------------------------
# rasterization stage
# ---------------------------------------------------------------------------

def _bin_tiles(mean2d, cov2d, depth, valid, width, height, tile):
    n = mean2d.shape[0]
    mid = 0.5 * (cov2d[:, 0, 0] + cov2d[:, 1, 1])
    det = cov2d[:, 0, 0] * cov2d[:, 1, 1] - cov2d[:, 0, 1] ** 2
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    radius = FOOTPRINT_RADIUS * np.sqrt(lam_max)
    ntx = (width + tile - 1) // tile
    nty = (height + tile - 1) // tile
    tiles = [[] for _ in range(ntx * nty)]
    touched = np.zeros(n, dtype=bool)
    order = np.argsort(depth, kind="stable")
    order = order[valid[order]]
    for i in order:
        mx, my, r = mean2d[i, 0], mean2d[i, 1], radius[i]
        tx0 = max(int(np.floor((mx - r) / tile)), 0)
        tx1 = min(int(np.floor((mx + r) / tile)), ntx - 1)
        ty0 = max(int(np.floor((my - r) / tile)), 0)
        ty1 = min(int(np.floor((my + r) / tile)), nty - 1)
        if tx0 > tx1 or ty0 > ty1:
            continue
        touched[i] = True
        for ty in range(ty0, ty1 + 1):
            row = ty * ntx
            for tx in range(tx0, tx1 + 1):
                tiles[row + tx].append(i)
    return ([np.asarray(t, dtype=int) for t in tiles], (ntx, nty), touched)


def _tile_rect(tile_id, ntx, tile, width, height):
    ty, tx = divmod(tile_id, ntx)
    x0 = tx * tile
    y0 = ty * tile
    return x0, y0, min(x0 + tile, width), min(y0 + tile, height)


def _tile_compute(idx, rect, mean2d, conic, opac, colors, s: RenderSettings):
    """Shared forward math for one tile; returns everything compositing needs."""
    x0, y0, x1, y1 = rect
    xs = np.arange(x0, x1) + 0.5
    ys = np.arange(y0, y1) + 0.5
    px = np.tile(xs, y1 - y0)        # row-major pixel centers
    py = np.repeat(ys, x1 - x0)
    dx = px[:, None] - mean2d[idx, 0][None, :]
    dy = py[:, None] - mean2d[idx, 1][None, :]
    a = conic[idx, 0][None, :]
    b = conic[idx, 1][None, :]
    c = conic[idx, 2][None, :]
    q = a * dx * dx + 2.0 * b * dx * dy + c * dy * dy
    G = np.where(q <= s.chi2, np.exp(-0.5 * q), 0.0)
    alpha_raw = opac[idx][None, :] * G
    alpha = np.minimum(alpha_raw, s.alpha_max)
    T = np.cumprod(1.0 - alpha, axis=1)
    t_before = np.concatenate([np.ones((alpha.shape[0], 1)), T[:, :-1]], axis=1)
    proc = t_before >= s.cutoff
    w = alpha * t_before * proc
    count = proc.sum(axis=1)
    t_final = np.where(count > 0,
                       np.take_along_axis(T, np.maximum(count - 1, 0)[:, None], 1)[:, 0],
                       1.0)
    return dx, dy, q, G, alpha_raw, alpha, t_before, proc, w, t_final


def _tile_forward(idx, rect, mean2d, conic, opac, colors, s: RenderSettings):
    x0, y0, x1, y1 = rect
    h, wdt = y1 - y0, x1 - x0
    if idx.size == 0:
        img = np.broadcast_to(s.background, (h, wdt, 3)).copy()
        return img, np.ones((h, wdt)), idx, np.zeros(0)
    dx, dy, q, G, alpha_raw, alpha, t_before, proc, w, t_final = _tile_compute(
        idx, rect, mean2d, conic, opac, colors, s)
    pix = w @ colors[idx] + t_final[:, None] * s.background
    importance = w.sum(axis=0)
    return pix.reshape(h, wdt, 3), t_final.reshape(h, wdt), idx, importance


def _tile_backward(idx, rect, mean2d, conic, opac, colors, s: RenderSettings,
                   d_img_tile):
    if idx.size == 0:
        return idx, None
    dx, dy, q, G, alpha_raw, alpha, t_before, proc, w, t_final = _tile_compute(
        idx, rect, mean2d, conic, opac, colors, s)
    p = d_img_tile.reshape(-1, 3)
    col = colors[idx]
    d_w = p @ col.T
    d_colors = w.T @ p
    d_tfinal = p @ s.background
    A = d_w * w
    rear = np.cumsum(A[:, ::-1], axis=1)[:, ::-1] - A
    rear += (d_tfinal * t_final)[:, None]
    d_alpha = (d_w * t_before - rear / (1.0 - alpha)) * proc
    unclamped = alpha_raw <= s.alpha_max
    d_alpha_raw = d_alpha * unclamped
    d_G = d_alpha_raw * opac[idx][None, :]
    d_opac = (d_alpha_raw * G).sum(axis=0)
    d_q = -0.5 * G * d_G
    a = conic[idx, 0][None, :]
    b = conic[idx, 1][None, :]
    c = conic[idx, 2][None, :]
    d_dx = d_q * (2.0 * a * dx + 2.0 * b * dy)
    d_dy = d_q * (2.0 * b * dx + 2.0 * c * dy)
    d_mean = -np.stack([d_dx.sum(axis=0), d_dy.sum(axis=0)], axis=-1)
    d_conic = np.stack([(d_q * dx * dx).sum(axis=0),
                        (d_q * 2.0 * dx * dy).sum(axis=0),
                        (d_q * dy * dy).sum(axis=0)], axis=-1)
    return idx, (d_mean, d_conic, d_opac, d_colors)


def _raster_forward(tiles, grid, cam, proj, pose, s: RenderSettings, n):
    ntx, _ = grid
    width, height = cam.width, cam.height
    image = np.empty((height, width, 3))
    trans = np.empty((height, width))
    importance = np.zeros(n)
    mean2d, conic = proj["mean2d"], proj["conic"]
    opac, colors = pose["opac"], pose["colors_c"]

    def job(tid):
        rect = _tile_rect(tid, ntx, s.tile, width, height)
        return rect, _tile_forward(tiles[tid], rect, mean2d, conic, opac, colors, s)

    pool = _pool(s.threads)
    results = pool.map(job, range(len(tiles))) if pool else map(job, range(len(tiles)))
    for rect, (pix, tfin, idx, imp) in results:
        x0, y0, x1, y1 = rect
        image[y0:y1, x0:x1] = pix
        trans[y0:y1, x0:x1] = tfin
        if idx.size:
            np.add.at(importance, idx, imp)
    return image, trans, importance


def _raster_backward(tape: RenderTape, d_image):
    s = tape.settings
    proj, pose = tape.proj, tape.pose
    width, height = tape.cam.width, tape.cam.height
    ntx = (width + s.tile - 1) // s.tile
    mean2d, conic = proj["mean2d"], proj["conic"]
    opac, colors = pose["opac"], pose["colors_c"]
    n = tape.n
    d_mean2d = np.zeros((n, 2))
    d_conic = np.zeros((n, 3))
    d_opac = np.zeros(n)
    d_colors = np.zeros((n, 3))

    def job(tid):
        rect = _tile_rect(tid, ntx, s.tile, width, height)
        x0, y0, x1, y1 = rect
        return _tile_backward(tape.tiles[tid], rect, mean2d, conic, opac, colors,
                              s, d_image[y0:y1, x0:x1])

    pool = _pool(s.threads)
    results = pool.map(job, range(len(tape.tiles))) if pool else map(job, range(len(tape.tiles)))
    for idx, grads in results:
        if grads is None:
            continue
        dm, dc, do, dcol = grads
        np.add.at(d_mean2d, idx, dm)
        np.add.at(d_conic, idx, dc)
        np.add.at(d_opac, idx, do)
        np.add.at(d_colors, idx, dcol)
    return d_mean2d, d_conic, d_opac, d_colors


# ---------------------------------------------------------------------------
# public entry points
# ---------------------------------------------------------------------------

def render(scene, partition: Partition, fieldp, cam: Camera, t, settings: RenderSettings,
           mode="train", rng=None, noise_sigma=0.0, dt=1.0, neighbor_table=None,
           want_tape=None):
    """Render the scene at time t.

    Train mode injects predictor noise and models exposure blur over the
    frame interval; eval mode forces noise off and renders zero-exposure.
    Returns RenderedFrame, or (RenderedFrame, RenderTape) when want_tape.
    """
    train = mode == "train"
    if want_tape is None:
        want_tape = train
    blur_dt = dt if train else 0.0
    sigma = noise_sigma if train else 0.0
    pose = _pose_forward(scene, partition, fieldp, neighbor_table, t, dt,
                         blur_dt, sigma, rng, settings)
    proj = _project_forward(pose["pos_t"], pose["cov_render"], cam, settings.dilation)
    tiles, grid, touched = _bin_tiles(proj["mean2d"], proj["cov2d"], proj["depth"],
                                      proj["valid"], cam.width, cam.height,
                                      settings.tile)
    image, trans, importance = _raster_forward(tiles, grid, cam, proj, pose,
                                               settings, scene.n)
    if not np.all(np.isfinite(image)):
        bad = np.argwhere(~np.isfinite(image))[0]
        raise NumericalError(f"non-finite pixel at {tuple(bad[:2])}")
    frame = RenderedFrame(image=np.clip(image, 0.0, 1.0), transmittance=trans,
                          importance=importance)
    if not want_tape:
        return frame
    tape = RenderTape(pose=pose, proj=proj, tiles=tiles, touched=touched,
                      cam=cam, settings=settings, n=scene.n)
    return frame, tape


def replay_tape(tape: RenderTape):
    """Re-run compositing from the tape; bit-identical to the forward image."""
    image, _, _ = _raster_forward(tape.tiles, None, tape.cam, tape.proj,
                                  tape.pose, tape.settings, tape.n)
    return np.clip(image, 0.0, 1.0)


def render_backward(tape: RenderTape, d_image, fieldp, d_dx_extra=None,
                    d_scales_extra=None) -> ParamGrads:
    """Analytic gradients of a scalar loss through the rendered image.

    d_image is dLoss/dImage; optional extras inject gradients wrt the applied
    position offsets (regularizer) and the rendered scales (anisotropy term).
    """
    d_mean2d, d_conic, d_opac, d_colors = _raster_backward(tape, d_image)
    d_pos_t, d_cov3 = _project_backward(tape.proj, tape.cam, d_mean2d, d_conic)
    pose = tape.pose
    out = _pose_backward(pose, tape.settings, fieldp, d_pos_t, d_cov3,
                         d_dx_extra=d_dx_extra, d_scales_extra=d_scales_extra)

    d_logits = d_opac * pose["opac"] * (1.0 - pose["opac"])
    d_colors_raw = d_colors * pose["color_mask"]

    half = np.array([tape.cam.width * 0.5, tape.cam.height * 0.5])
    densify_norm = np.linalg.norm(d_mean2d * half, axis=1)

    fw1, fb1, fw2, fb2 = out["fine"]
    return ParamGrads(
        positions=out["positions"], quaternions=out["quaternions"],
        log_scales=out["log_scales"], opacity_logits=d_logits,
        colors=d_colors_raw,
        w1=out["w1"], b1=out["b1"], w2=out["w2"], b2=out["b2"],
        fine_w1=fw1, fine_b1=fb1, fine_w2=fw2, fine_b2=fb2,
        features=out["features"],
        densify_norm=densify_norm,
        densify_count=tape.touched.astype(float))


def render_points(positions, cov3, colors, opacities, cam: Camera,
                  settings: RenderSettings) -> RenderedFrame:
    """Rasterize bare world-space Gaussians (no deformation, no refinement)."""
    proj = _project_forward(np.asarray(positions, dtype=float),
                            np.asarray(cov3, dtype=float), cam, settings.dilation)
    tiles, grid, _ = _bin_tiles(proj["mean2d"], proj["cov2d"], proj["depth"],
                                proj["valid"], cam.width, cam.height, settings.tile)
    pose = {"opac": np.asarray(opacities, dtype=float),
            "colors_c": np.clip(np.asarray(colors, dtype=float), 0.0, 1.0)}
    n = np.asarray(positions).shape[0]
    image, trans, importance = _raster_forward(tiles, grid, cam, proj, pose, settings, n)
    return RenderedFrame(image=np.clip(image, 0.0, 1.0), transmittance=trans,
                         importance=importance)


def render_points_naive(positions, cov3, colors, opacities, cam: Camera,
                        settings: RenderSettings) -> RenderedFrame:
    """Per-pixel reference compositor; same footprint and cutoff semantics as
    the tiled path, used to pin its correctness."""
    proj = _project_forward(np.asarray(positions, dtype=float),
                            np.asarray(cov3, dtype=float), cam, settings.dilation)
    order = np.argsort(proj["depth"], kind="stable")
    order = order[proj["valid"][order]]
    colors_c = np.clip(np.asarray(colors, dtype=float), 0.0, 1.0)
    opac = np.asarray(opacities, dtype=float)
    h, w = cam.height, cam.width
    image = np.zeros((h, w, 3))
    trans = np.ones((h, w))
    for yi in range(h):
        for xi in range(w):
            px, py = xi + 0.5, yi + 0.5
            color = np.zeros(3)
            T = 1.0
            for i in order:
                if T < settings.cutoff:
                    break
                dxi = px - proj["mean2d"][i, 0]
                dyi = py - proj["mean2d"][i, 1]
                a, b, c = proj["conic"][i]
                q = a * dxi * dxi + 2.0 * b * dxi * dyi + c * dyi * dyi
                if q > settings.chi2:
                    continue
                alpha = min(opac[i] * np.exp(-0.5 * q), settings.alpha_max)
                color = color + T * alpha * colors_c[i]
                T = T * (1.0 - alpha)
            image[yi, xi] = color + T * settings.background
            trans[yi, xi] = T
    return RenderedFrame(image=np.clip(image, 0.0, 1.0), transmittance=trans,
                         importance=np.zeros(np.asarray(positions).shape[0]))
