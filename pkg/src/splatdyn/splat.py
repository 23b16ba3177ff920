"""Gaussian splat cloud: data model, PLY I/O and domain normalization.

Covariance is the canonical per-kernel shape. Quaternion + log-scale is only
the on-disk encoding used by 3DGS tooling.
"""
from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

log = logging.getLogger(__name__)

SH_C0 = 0.28209479177387814
NO_GROUP = -1
EIG_FLOOR = 1e-12

REQUIRED_PROPERTIES = (
    "x", "y", "z",
    "scale_0", "scale_1", "scale_2",
    "rot_0", "rot_1", "rot_2", "rot_3",
    "opacity",
    "f_dc_0", "f_dc_1", "f_dc_2",
)

_PLY_TYPES = {
    "char": "i1", "int8": "i1",
    "uchar": "u1", "uint8": "u1",
    "short": "i2", "int16": "i2",
    "ushort": "u2", "uint16": "u2",
    "int": "i4", "int32": "i4",
    "uint": "u4", "uint32": "u4",
    "float": "f4", "float32": "f4",
    "double": "f8", "float64": "f8",
}


class PlyError(ValueError):
    """Malformed or unsupported PLY input."""

    def __init__(self, message, *, property_name=None, index=None):
        super().__init__(message)
        self.property_name = property_name
        self.index = index


class DegenerateCloudError(ValueError):
    pass


@dataclass(frozen=True)
class GaussianKernel:
    position: np.ndarray
    covariance: np.ndarray
    opacity: float
    color: np.ndarray
    group_id: int | None = None
    material: object | None = None


@dataclass(frozen=True, eq=False)
class SplatCloud:
    """Array-of-fields storage for P Gaussian kernels.

    Index p is the kernel identity and is preserved by every transform.
    ``group_ids`` uses -1 for "no group". ``materials`` maps group id to
    MaterialProperties once perception has run.
    """

    positions: np.ndarray
    covariances: np.ndarray
    opacities: np.ndarray
    colors: np.ndarray
    group_ids: np.ndarray = None
    materials: dict = field(default_factory=dict)

    def __post_init__(self):
        pos = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        count = len(pos)
        if count < 1:
            raise ValueError("a splat cloud needs at least one kernel")
        cov = np.asarray(self.covariances, dtype=np.float64).reshape(count, 3, 3)
        opa = np.asarray(self.opacities, dtype=np.float64).reshape(count)
        col = np.asarray(self.colors, dtype=np.float64).reshape(count, 3)
        if self.group_ids is None:
            gid = np.full(count, NO_GROUP, dtype=np.int64)
        else:
            gid = np.asarray(self.group_ids, dtype=np.int64).reshape(count)
        for name, arr in (("positions", pos), ("covariances", cov),
                          ("opacities", opa), ("colors", col), ("group_ids", gid)):
            arr = np.array(arr, copy=True)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        object.__setattr__(self, "materials", dict(self.materials))

    @property
    def count(self) -> int:
        return len(self.positions)

    def __len__(self):
        return self.count

    def __getitem__(self, p: int) -> GaussianKernel:
        gid = int(self.group_ids[p])
        group = None if gid == NO_GROUP else gid
        return GaussianKernel(
            position=self.positions[p],
            covariance=self.covariances[p],
            opacity=float(self.opacities[p]),
            color=self.colors[p],
            group_id=group,
            material=self.materials.get(group),
        )

    def replace(self, **changes) -> "SplatCloud":
        return dataclasses.replace(self, **changes)

    @property
    def labeled(self) -> np.ndarray:
        return self.group_ids != NO_GROUP

    @classmethod
    def from_kernels(cls, kernels) -> "SplatCloud":
        kernels = list(kernels)
        return cls(
            positions=[k.position for k in kernels],
            covariances=[k.covariance for k in kernels],
            opacities=[k.opacity for k in kernels],
            colors=[k.color for k in kernels],
            group_ids=[NO_GROUP if k.group_id is None else k.group_id for k in kernels],
        )


@dataclass(frozen=True)
class DomainTransform:
    """Isotropic map world -> simulation domain: ``x_dom = scale * x + translation``."""

    scale: float
    translation: np.ndarray

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError("domain scale must be positive")
        object.__setattr__(self, "translation", np.asarray(self.translation, dtype=np.float64))

    def to_domain(self, x):
        return self.scale * np.asarray(x, dtype=np.float64) + self.translation

    def to_world(self, x):
        return (np.asarray(x, dtype=np.float64) - self.translation) / self.scale

    def covariance_to_domain(self, cov):
        return np.asarray(cov) * self.scale**2

    def covariance_to_world(self, cov):
        return np.asarray(cov) / self.scale**2


def symmetrize(a):
    return 0.5 * (a + np.swapaxes(a, -1, -2))


# --- quaternion helpers (w, x, y, z order, as written by 3DGS) -------------

def quat_to_rotmat(q):
    q = np.asarray(q, dtype=np.float64)
    q = q / np.linalg.norm(q, axis=-1, keepdims=True)
    w, x, y, z = np.moveaxis(q, -1, 0)
    rot = np.stack([
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    ], axis=-1)
    return rot.reshape(q.shape[:-1] + (3, 3))


def rotmat_to_quat(rot):
    """Shepperd's method, batched. Returns unit quaternions with w >= 0."""
    rot = np.asarray(rot, dtype=np.float64).reshape(-1, 3, 3)
    m = rot
    tr = m[:, 0, 0] + m[:, 1, 1] + m[:, 2, 2]
    cand = np.stack([tr, m[:, 0, 0], m[:, 1, 1], m[:, 2, 2]], axis=1)
    pick = np.argmax(cand, axis=1)
    q = np.empty((len(m), 4))
    for case in range(4):
        sel = pick == case
        if not sel.any():
            continue
        r = m[sel]
        if case == 0:
            s = np.sqrt(1.0 + tr[sel]) * 2
            q[sel] = np.stack([0.25 * s, (r[:, 2, 1] - r[:, 1, 2]) / s,
                               (r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 1, 0] - r[:, 0, 1]) / s], 1)
        elif case == 1:
            s = np.sqrt(1.0 + r[:, 0, 0] - r[:, 1, 1] - r[:, 2, 2]) * 2
            q[sel] = np.stack([(r[:, 2, 1] - r[:, 1, 2]) / s, 0.25 * s,
                               (r[:, 0, 1] + r[:, 1, 0]) / s, (r[:, 0, 2] + r[:, 2, 0]) / s], 1)
        elif case == 2:
            s = np.sqrt(1.0 + r[:, 1, 1] - r[:, 0, 0] - r[:, 2, 2]) * 2
            q[sel] = np.stack([(r[:, 0, 2] - r[:, 2, 0]) / s, (r[:, 0, 1] + r[:, 1, 0]) / s,
                               0.25 * s, (r[:, 1, 2] + r[:, 2, 1]) / s], 1)
        else:
            s = np.sqrt(1.0 + r[:, 2, 2] - r[:, 0, 0] - r[:, 1, 1]) * 2
            q[sel] = np.stack([(r[:, 1, 0] - r[:, 0, 1]) / s, (r[:, 0, 2] + r[:, 2, 0]) / s,
                               (r[:, 1, 2] + r[:, 2, 1]) / s, 0.25 * s], 1)
    q[q[:, 0] < 0] *= -1
    return q / np.linalg.norm(q, axis=1, keepdims=True)


def covariance_from_scale_rot(log_scales, quats):
    rot = quat_to_rotmat(quats)
    s2 = np.exp(2.0 * np.asarray(log_scales, dtype=np.float64))
    return symmetrize(np.einsum("pij,pj,pkj->pik", rot, s2, rot))


def decompose_covariance(cov):
    """Split covariances into (log_scales, quats, n_clamped).

    Eigenvalues below zero are clamped to 1e-12 and counted per kernel.
    """
    cov = symmetrize(np.asarray(cov, dtype=np.float64).reshape(-1, 3, 3))
    evals, evecs = np.linalg.eigh(cov)
    n_clamped = int(np.count_nonzero((evals < 0).any(axis=1)))
    evals = np.maximum(evals, EIG_FLOOR)
    flip = np.linalg.det(evecs) < 0
    evecs[flip, :, 0] *= -1
    return 0.5 * np.log(evals), rotmat_to_quat(evecs), n_clamped


# --- PLY ---------------------------------------------------------------------

def _read_header(fh):
    magic = fh.readline().strip()
    if magic != b"ply":
        raise PlyError("not a PLY file (missing 'ply' magic)")
    fmt = None
    elements = []
    while True:
        line = fh.readline()
        if not line:
            raise PlyError("unexpected end of header")
        tokens = line.decode("ascii", errors="replace").split()
        if not tokens or tokens[0] in ("comment", "obj_info"):
            continue
        if tokens[0] == "end_header":
            break
        if tokens[0] == "format":
            fmt = tokens[1]
        elif tokens[0] == "element":
            elements.append((tokens[1], int(tokens[2]), []))
        elif tokens[0] == "property":
            if not elements:
                raise PlyError("property declared before any element")
            if tokens[1] == "list":
                raise PlyError(f"list property '{tokens[-1]}' is not supported",
                               property_name=tokens[-1])
            if tokens[1] not in _PLY_TYPES:
                raise PlyError(f"unknown property type '{tokens[1]}'", property_name=tokens[2])
            elements[-1][2].append((tokens[2], _PLY_TYPES[tokens[1]]))
    if fmt not in ("ascii", "binary_little_endian"):
        raise PlyError(f"unsupported PLY format '{fmt}'")
    return fmt, elements


def load_splat_ply(path) -> SplatCloud:
    path = Path(path)
    with open(path, "rb") as fh:
        fmt, elements = _read_header(fh)
        if not elements or elements[0][0] != "vertex":
            raise PlyError("first element must be 'vertex'")
        _, count, props = elements[0]
        names = [p[0] for p in props]
        for req in REQUIRED_PROPERTIES:
            if req not in names:
                raise PlyError(f"missing vertex property '{req}'", property_name=req)
        if fmt == "ascii":
            rows = [fh.readline().split() for _ in range(count)]
            try:
                table = np.array(rows, dtype=np.float64).reshape(count, len(props))
            except ValueError as exc:
                raise PlyError(f"malformed ASCII vertex data: {exc}") from exc
            data = {name: table[:, i] for i, name in enumerate(names)}
        else:
            dtype = np.dtype([(n, "<" + t) for n, t in props])
            raw = fh.read(dtype.itemsize * count)
            if len(raw) < dtype.itemsize * count:
                raise PlyError("truncated binary vertex data")
            rec = np.frombuffer(raw, dtype=dtype, count=count)
            data = {name: rec[name].astype(np.float64) for name in names}

    cols = np.stack([data[k] for k in REQUIRED_PROPERTIES], axis=1)
    bad = ~np.isfinite(cols).all(axis=1)
    if bad.any():
        idx = int(np.flatnonzero(bad)[0])
        prop = REQUIRED_PROPERTIES[int(np.flatnonzero(~np.isfinite(cols[idx]))[0])]
        raise PlyError(f"non-finite value in vertex {idx} (property '{prop}')",
                       property_name=prop, index=idx)

    pos = np.stack([data["x"], data["y"], data["z"]], axis=1)
    log_scales = np.stack([data[f"scale_{i}"] for i in range(3)], axis=1)
    quats = np.stack([data[f"rot_{i}"] for i in range(4)], axis=1)
    qn = np.linalg.norm(quats, axis=1)
    if (qn == 0).any():
        idx = int(np.flatnonzero(qn == 0)[0])
        raise PlyError(f"zero-length quaternion in vertex {idx}", property_name="rot_0", index=idx)
    cov = covariance_from_scale_rot(log_scales, quats)
    opacity = 1.0 / (1.0 + np.exp(-data["opacity"]))
    dc = np.stack([data[f"f_dc_{i}"] for i in range(3)], axis=1)
    colors = np.clip(0.5 + SH_C0 * dc, 0.0, 1.0)
    return SplatCloud(positions=pos, covariances=cov, opacities=opacity, colors=colors)


def save_frame(cloud: SplatCloud, path) -> int:
    """Write ``cloud`` as a binary little-endian 3DGS PLY.

    Returns the number of kernels whose covariance needed an eigenvalue clamp.
    """
    log_scales, quats, n_clamped = decompose_covariance(cloud.covariances)
    if n_clamped:
        log.warning("%d kernel covariance(s) were not PSD; eigenvalues clamped to %g",
                    n_clamped, EIG_FLOOR)
    op = np.clip(cloud.opacities, 1e-7, 1 - 1e-7)
    raw_opacity = np.log(op / (1 - op))
    dc = (cloud.colors - 0.5) / SH_C0
    nx = np.zeros(cloud.count)

    columns = {
        "x": cloud.positions[:, 0], "y": cloud.positions[:, 1], "z": cloud.positions[:, 2],
        "nx": nx, "ny": nx, "nz": nx,
        "f_dc_0": dc[:, 0], "f_dc_1": dc[:, 1], "f_dc_2": dc[:, 2],
        "opacity": raw_opacity,
        "scale_0": log_scales[:, 0], "scale_1": log_scales[:, 1], "scale_2": log_scales[:, 2],
        "rot_0": quats[:, 0], "rot_1": quats[:, 1], "rot_2": quats[:, 2], "rot_3": quats[:, 3],
    }
    dtype = np.dtype([(k, "<f4") for k in columns])
    rec = np.empty(cloud.count, dtype=dtype)
    for k, v in columns.items():
        rec[k] = v
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {cloud.count}"]
    header += [f"property float {k}" for k in columns]
    header.append("end_header")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(("\n".join(header) + "\n").encode("ascii"))
        fh.write(rec.tobytes())
    return n_clamped


def normalize_to_domain(cloud: SplatCloud, padding: float = 0.1):
    """Fit the cloud's bounding box isotropically into ``[padding, 1 - padding]^3``."""
    if not 0.0 <= padding <= 0.45:
        raise ValueError(f"padding must lie in [0, 0.45], got {padding}")
    lo = cloud.positions.min(axis=0)
    hi = cloud.positions.max(axis=0)
    extent = float(np.max(hi - lo))
    if extent <= 0.0:
        raise DegenerateCloudError("bounding box has zero extent on every axis")
    scale = (1.0 - 2.0 * padding) / extent
    translation = 0.5 - scale * 0.5 * (lo + hi)
    xform = DomainTransform(scale=scale, translation=translation)
    out = cloud.replace(
        positions=xform.to_domain(cloud.positions),
        covariances=xform.covariance_to_domain(cloud.covariances),
    )
    return out, xform
