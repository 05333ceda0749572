"""Scene container (struct-of-arrays over splats) and checkpoint I/O.

Checkpoints are a versioned little-endian binary: 4-byte magic ``KGS1``, a
uint32 header length, a UTF-8 JSON header describing every array field
(name, dtype, shape) plus scalar metadata, then the raw arrays concatenated
in header order. See README for the field table.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .gaussians import InvalidInputError, quat_normalize

MAGIC = b"KGS1"


@dataclass
class Scene:
    """All per-splat optimization state, kept as parallel arrays."""

    positions: np.ndarray       # (N,3)
    quaternions: np.ndarray     # (N,4) unit, (w,x,y,z)
    log_scales: np.ndarray      # (N,3) unconstrained
    opacity_logits: np.ndarray  # (N,)
    colors: np.ndarray          # (N,3), clamped to [0,1] at render
    levels: np.ndarray          # (N,) int, >= 1
    importance: np.ndarray      # (N,) accumulated blend weights

    @property
    def n(self):
        return self.positions.shape[0]

    def per_gaussian_arrays(self):
        return {"positions": self.positions, "quaternions": self.quaternions,
                "log_scales": self.log_scales, "opacity_logits": self.opacity_logits,
                "colors": self.colors, "levels": self.levels,
                "importance": self.importance}

    def select(self, indices):
        """Keep only the given rows (in the given order)."""
        self.positions = self.positions[indices]
        self.quaternions = self.quaternions[indices]
        self.log_scales = self.log_scales[indices]
        self.opacity_logits = self.opacity_logits[indices]
        self.colors = self.colors[indices]
        self.levels = self.levels[indices]
        self.importance = self.importance[indices]

    def append(self, positions, quaternions, log_scales, opacity_logits, colors,
               levels, importance=None):
        k = positions.shape[0]
        self.positions = np.concatenate([self.positions, positions])
        self.quaternions = np.concatenate([self.quaternions, quaternions])
        self.log_scales = np.concatenate([self.log_scales, log_scales])
        self.opacity_logits = np.concatenate([self.opacity_logits, opacity_logits])
        self.colors = np.concatenate([self.colors, colors])
        self.levels = np.concatenate([self.levels, np.asarray(levels, dtype=self.levels.dtype)])
        add_imp = np.zeros(k) if importance is None else importance
        self.importance = np.concatenate([self.importance, add_imp])

    def renormalize_rotations(self):
        self.quaternions = quat_normalize(self.quaternions)

    def copy(self):
        return Scene(**{k: v.copy() for k, v in self.per_gaussian_arrays().items()})


def make_scene(positions, quaternions, log_scales, opacity_logits, colors, levels=None):
    positions = np.asarray(positions, dtype=float)
    n = positions.shape[0]
    if levels is None:
        levels = np.ones(n, dtype=np.int64)
    return Scene(positions=positions,
                 quaternions=quat_normalize(np.asarray(quaternions, dtype=float)),
                 log_scales=np.asarray(log_scales, dtype=float),
                 opacity_logits=np.asarray(opacity_logits, dtype=float),
                 colors=np.asarray(colors, dtype=float),
                 levels=np.asarray(levels, dtype=np.int64),
                 importance=np.zeros(n))


def random_scene(rng, count, bound, scale=0.05, opacity=0.1, level=1):
    """Uniform random initialization inside a centered cube."""
    from .gaussians import inverse_sigmoid
    positions = rng.uniform(-bound, bound, (count, 3))
    quats = np.zeros((count, 4))
    quats[:, 0] = 1.0
    log_scales = np.full((count, 3), np.log(scale))
    logits = np.full(count, inverse_sigmoid(opacity))
    colors = np.full((count, 3), 0.5)
    levels = np.full(count, level, dtype=np.int64)
    return make_scene(positions, quats, log_scales, logits, colors, levels)


# ---------------------------------------------------------------------------
# checkpoint serialization
# ---------------------------------------------------------------------------

def write_checkpoint(path, arrays: dict, meta: dict):
    """Write named arrays plus JSON-serializable metadata."""
    fields = []
    blobs = []
    for name, arr in arrays.items():
        arr = np.ascontiguousarray(arr)
        dt = arr.dtype.newbyteorder("<")
        blob = arr.astype(dt, copy=False).tobytes()
        fields.append({"name": name, "dtype": dt.str, "shape": list(arr.shape)})
        blobs.append(blob)
    header = json.dumps({"version": 1, "fields": fields, "meta": meta},
                        sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(np.uint32(len(header)).newbyteorder("<").tobytes())
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def read_checkpoint(path):
    """Read back (arrays, meta) written by write_checkpoint."""
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != MAGIC:
            raise InvalidInputError(f"bad checkpoint magic {magic!r} in {path}")
        (hlen,) = np.frombuffer(fh.read(4), dtype="<u4")
        header = json.loads(fh.read(int(hlen)).decode("utf-8"))
        arrays = {}
        for f in header["fields"]:
            dt = np.dtype(f["dtype"])
            count = int(np.prod(f["shape"])) if f["shape"] else 1
            buf = fh.read(dt.itemsize * count)
            if len(buf) != dt.itemsize * count:
                raise InvalidInputError(f"truncated checkpoint field {f['name']}")
            arrays[f["name"]] = np.frombuffer(buf, dtype=dt).reshape(f["shape"]).copy()
    return arrays, header["meta"]
