"""Motion-aligned basis construction and covariance refinement.

A dynamic splat's instantaneous velocity defines a right-handed orthonormal
frame with one axis along the motion. The predicted covariance is measured in
that frame, elongated along the motion axis in proportion to the displacement
over the frame interval (gated by how well the predicted orientation agrees
with the velocity), recombined with learnable log-scale and rotation
residuals, and reassembled into a guaranteed-SPD covariance.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .gaussians import (
    InvalidInputError,
    NumericalError,
    exp_map_so3,
    require_finite,
    rotmat_to_quat,
    sigmoid,
)

# Division guard in the basis construction. Directions are renormalized
# exactly afterwards, so the guard only prevents 0/0 for vanishing input.
BASIS_EPS = 1e-8
# Switch to the alternate reference direction when the motion axis is nearly
# colinear with +x.
COLINEAR_LIMIT = 0.99
# Below this speed the frame is noise-dominated; callers skip refinement.
VELOCITY_FLOOR = 1e-6
# Alignment-gate floor parameter: sigmoid(DEFAULT_KAPPA) ~= 0.1.
DEFAULT_KAPPA = -2.1972
# Weight of the log-space scale residual.
DEFAULT_LAMBDA_S = 0.1

_FALLBACK_AXIS = np.array([0.0, 0.0, 1.0])
_REF_X = np.array([1.0, 0.0, 0.0])
_REF_Y = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class KinematicBasis:
    """Right-handed orthonormal frame with u_z along the velocity."""

    u_x: np.ndarray
    u_y: np.ndarray
    u_z: np.ndarray

    @property
    def matrix(self):
        return np.stack([self.u_x, self.u_y, self.u_z], axis=-1)


@dataclass
class RefinementInputs:
    """Inputs to one covariance refinement."""

    cov: np.ndarray           # predicted covariance, SPD (3,3)
    velocity: np.ndarray      # world units per time unit
    dt: float                 # frame interval
    d_scale: np.ndarray       # log-scale residual (3,)
    d_rot: np.ndarray         # axis-angle rotation residual (3,)
    r_z: np.ndarray           # unit principal axis of the predicted rotation
    kappa: float = DEFAULT_KAPPA

    def validate(self):
        if self.dt <= 0:
            raise InvalidInputError("dt must be > 0")
        require_finite("refinement inputs", self.cov, self.velocity,
                       self.d_scale, self.d_rot, self.r_z)
        if abs(np.linalg.norm(self.r_z) - 1.0) > 1e-6:
            raise InvalidInputError("r_z must be unit norm")


@dataclass(frozen=True)
class RefinedShape:
    """Refined covariance with its rotation/scale factorization."""

    cov: np.ndarray          # (3,3) SPD
    rotation: np.ndarray     # (3,3)
    scale_diag: np.ndarray   # (3,) positive


def kinematic_frames(velocity):
    """Batched motion-aligned frames; (..., 3) velocities -> (..., 3, 3).

    Columns are (u_x, u_y, u_z). Near-zero velocities fall back to the +z
    axis so the result is always a well-formed frame, but callers must not
    refine below VELOCITY_FLOOR.
    """
    v = np.asarray(velocity, dtype=float)
    require_finite("velocity", v)
    speed = np.linalg.norm(v, axis=-1)
    v = np.where((speed < VELOCITY_FLOOR)[..., None], _FALLBACK_AXIS, v)
    n = np.linalg.norm(v, axis=-1, keepdims=True)
    u_z = v / (n + BASIS_EPS)
    u_z = u_z / np.linalg.norm(u_z, axis=-1, keepdims=True)
    use_alt = np.abs(u_z[..., 0]) > COLINEAR_LIMIT
    r_ref = np.where(use_alt[..., None], _REF_Y, _REF_X)
    w = np.cross(u_z, r_ref)
    m = np.linalg.norm(w, axis=-1, keepdims=True)
    u_x = w / (m + BASIS_EPS)
    u_x = u_x / np.linalg.norm(u_x, axis=-1, keepdims=True)
    u_y = np.cross(u_z, u_x)
    return np.stack([u_x, u_y, u_z], axis=-1)


def kinematic_basis(velocity) -> KinematicBasis:
    """Motion-aligned frame for a single velocity vector."""
    frame = kinematic_frames(np.asarray(velocity, dtype=float))
    return KinematicBasis(u_x=frame[..., 0], u_y=frame[..., 1], u_z=frame[..., 2])


def kinematic_frames_cached(velocity):
    """kinematic_frames plus the intermediates its backward needs.

    All rows must be above VELOCITY_FLOOR (the renderer gates on that before
    refining). Returns (frames, cache).
    """
    v = np.asarray(velocity, dtype=float)
    n = np.linalg.norm(v, axis=-1)
    u_z = v / (n + BASIS_EPS)[..., None]
    u_z = u_z / np.linalg.norm(u_z, axis=-1, keepdims=True)
    use_alt = np.abs(u_z[..., 0]) > COLINEAR_LIMIT
    r_ref = np.where(use_alt[..., None], _REF_Y, _REF_X)
    w = np.cross(u_z, r_ref)
    m = np.linalg.norm(w, axis=-1)
    u_x = w / (m + BASIS_EPS)[..., None]
    u_x = u_x / np.linalg.norm(u_x, axis=-1, keepdims=True)
    u_y = np.cross(u_z, u_x)
    frames = np.stack([u_x, u_y, u_z], axis=-1)
    return frames, {"n": n, "m": m, "u_x": u_x, "u_z": u_z, "r_ref": r_ref}


def kinematic_frames_backward(cache, d_frames, d_speed=None):
    """Chain gradients from a frame (and optionally from the speed) back to
    the velocity. The reference-direction branch is locally constant."""
    u_x, u_z = cache["u_x"], cache["u_z"]
    r_ref = cache["r_ref"]
    n, m = cache["n"], cache["m"]
    d_ux = d_frames[..., 0].copy()
    d_uy = d_frames[..., 1]
    d_uz = d_frames[..., 2].copy()
    # u_y = u_z x u_x
    d_uz += np.cross(u_x, d_uy)
    d_ux -= np.cross(u_z, d_uy)
    # u_x = w/|w| with w = u_z x r_ref
    d_w = (d_ux - np.sum(d_ux * u_x, axis=-1, keepdims=True) * u_x) / m[..., None]
    d_uz += np.cross(r_ref, d_w)
    # u_z = v/|v|
    d_v = (d_uz - np.sum(d_uz * u_z, axis=-1, keepdims=True) * u_z) / n[..., None]
    if d_speed is not None:
        d_v = d_v + u_z * d_speed[..., None]
    return d_v


def project_variances(cov, basis):
    """Variances of an SPD covariance along a frame's axes: u_k^T Sigma u_k."""
    U = basis.matrix if isinstance(basis, KinematicBasis) else np.asarray(basis, dtype=float)
    cov = np.asarray(cov, dtype=float)
    return np.einsum("...ik,...ij,...jk->...k", U, cov, U)


def alignment_factor(r_z, u_z, kappa=DEFAULT_KAPPA):
    """Gate in [sigmoid(kappa), 1]: agreement of the predicted principal axis
    with the motion direction, floored for stability under noisy estimates."""
    dot = np.sum(np.asarray(r_z, dtype=float) * np.asarray(u_z, dtype=float), axis=-1)
    return np.maximum(np.abs(dot), sigmoid(kappa))


def blur_scales(sigmas, velocity, dt, eta):
    """Axis-aligned scales with the motion axis elongated by eta*|v|*dt."""
    sigmas = np.asarray(sigmas, dtype=float)
    speed = np.linalg.norm(np.asarray(velocity, dtype=float), axis=-1)
    out = sigmas.copy()
    out[..., 2] = out[..., 2] + eta * speed * dt
    return out


def refine_covariance(inputs: RefinementInputs, lambda_s=DEFAULT_LAMBDA_S) -> RefinedShape:
    """Refine one covariance against its velocity.

    Callers must skip this below VELOCITY_FLOOR and render the unrefined
    covariance instead.
    """
    inputs.validate()
    frame = kinematic_frames(inputs.velocity)
    variances = project_variances(inputs.cov, frame)
    if np.any(variances <= 0):
        raise NumericalError("projected variances not positive")
    sigmas = np.sqrt(variances)
    eta = alignment_factor(inputs.r_z, frame[..., 2], inputs.kappa)
    s_prime = blur_scales(sigmas, inputs.velocity, inputs.dt, eta)
    ell = np.log(s_prime) + lambda_s * np.asarray(inputs.d_scale, dtype=float)
    if not np.all(np.isfinite(ell)):
        raise NumericalError("log-scale residual produced non-finite values")
    scale_diag = np.exp(ell)
    rotation = frame @ exp_map_so3(inputs.d_rot)
    cov = (rotation * scale_diag[..., None, :] ** 2) @ np.swapaxes(rotation, -1, -2)
    cov = 0.5 * (cov + np.swapaxes(cov, -1, -2))
    if not np.all(np.isfinite(cov)):
        raise NumericalError("refined covariance non-finite")
    return RefinedShape(cov=cov, rotation=rotation, scale_diag=scale_diag)


def refined_rotation_quaternion(R):
    """Unit quaternion (w >= 0) for an orthonormal rotation matrix."""
    R = np.asarray(R, dtype=float)
    require_finite("rotation matrix", R)
    if np.max(np.abs(R @ np.swapaxes(R, -1, -2) - np.eye(3))) > 1e-5:
        raise InvalidInputError("matrix is not orthonormal")
    if np.any(np.linalg.det(R) < 0):
        raise InvalidInputError("matrix has negative determinant")
    return rotmat_to_quat(R)
