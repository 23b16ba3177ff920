"""MLS-MPM substep on a uniform grid with quadratic B-spline weights.

Domain is the unit cube with ``n`` cells per axis (``n + 1`` nodes). All
scatter and gather orders are fixed, so results are bit-identical for any
numba thread count.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace

import numba as nb
import numpy as np

from .constitutive import (
    MATERIAL_CODES,
    _nb_det,
    _nb_energy,
    _nb_hardening,
    _nb_kirchhoff,
    _nb_plasticity,
    drucker_prager_alpha,
    lame_parameters,
)

log = logging.getLogger(__name__)

EPS_MASS = 1e-12
BOUNDARY_MARGIN = 2
DET_FLOOR = 1e-3
CFL_FACTOR = 0.3
FACES = ("-x", "+x", "-y", "+y", "-z", "+z")


class SimulationAbort(RuntimeError):
    """Non-finite state encountered inside a substep."""

    def __init__(self, stage, index, message=None):
        super().__init__(message or f"non-finite state in stage '{stage}' at particle {index}")
        self.stage = stage
        self.index = index


@dataclass
class MpmGrid:
    n: int = 50
    mv: np.ndarray = None
    m: np.ndarray = None
    v: np.ndarray = None

    def __post_init__(self):
        shape = (self.n + 1,) * 3
        if self.mv is None:
            self.mv = np.zeros(shape + (3,))
        if self.m is None:
            self.m = np.zeros(shape)
        if self.v is None:
            self.v = np.zeros(shape + (3,))

    @property
    def dx(self):
        return 1.0 / self.n

    def zero(self):
        self.mv[...] = 0.0
        self.m[...] = 0.0
        self.v[...] = 0.0
        return self

    def node_positions(self):
        g = np.arange(self.n + 1) * self.dx
        return np.stack(np.meshgrid(g, g, g, indexing="ij"), axis=-1)


@dataclass
class MpmParticles:
    x: np.ndarray
    v: np.ndarray
    F: np.ndarray
    C: np.ndarray
    mass: np.ndarray
    volume: np.ndarray  # rest volume
    mtype: np.ndarray
    mu: np.ndarray
    lam: np.ndarray
    Jp: np.ndarray
    theta_c: np.ndarray
    theta_s: np.ndarray
    hardening: np.ndarray
    dp_alpha: np.ndarray
    group: np.ndarray

    @property
    def count(self):
        return len(self.x)

    def copy(self):
        return replace(self, **{k: np.array(getattr(self, k)) for k in self.__dataclass_fields__})

    @classmethod
    def create(cls, x, mass, volume, *, v=None, F=None, C=None, mtype=None, mu=None, lam=None,
               group=None, theta_c=2.5e-2, theta_s=7.5e-3, hardening=10.0, dp_alpha=None):
        x = np.array(x, dtype=np.float64).reshape(-1, 3)
        P = len(x)

        def full(val, default, dtype=np.float64):
            if val is None:
                val = default
            return np.ascontiguousarray(np.broadcast_to(np.asarray(val, dtype=dtype), (P,)))

        eye = np.broadcast_to(np.eye(3), (P, 3, 3))
        return cls(
            x=x,
            v=np.zeros((P, 3)) if v is None else np.array(np.broadcast_to(v, (P, 3)), dtype=np.float64),
            F=np.array(eye if F is None else np.broadcast_to(F, (P, 3, 3)), dtype=np.float64),
            C=np.zeros((P, 3, 3)) if C is None else np.array(np.broadcast_to(C, (P, 3, 3)), dtype=np.float64),
            mass=full(mass, None),
            volume=full(volume, None),
            mtype=full(mtype, 0, np.int64),
            mu=full(mu, 0.0),
            lam=full(lam, 0.0),
            Jp=np.ones(P),
            theta_c=full(theta_c, None),
            theta_s=full(theta_s, None),
            hardening=full(hardening, None),
            dp_alpha=full(dp_alpha, drucker_prager_alpha(30.0)),
            group=full(group, 0, np.int64),
        )

    def center_of_mass(self):
        return (self.mass[:, None] * self.x).sum(axis=0) / self.mass.sum()

    def momentum(self):
        return (self.mass[:, None] * self.v).sum(axis=0)


@dataclass
class BoundaryCondition:
    """Per-face sticky/slip walls ``margin`` cells deep, plus an optional ground plane."""

    faces: dict = field(default_factory=lambda: {f: "sticky" for f in FACES})
    margin: int = BOUNDARY_MARGIN
    ground_height: float | None = None
    ground: str = "slip"
    friction: float = 0.0

    def __post_init__(self):
        faces = {f: "sticky" for f in FACES}
        faces.update(self.faces or {})
        for f, kind in faces.items():
            if f not in FACES or kind not in ("sticky", "slip"):
                raise ValueError(f"bad boundary face spec {f}={kind}")
        self.faces = faces
        if self.friction < 0:
            raise ValueError("friction coefficient must be >= 0")
        if self.ground not in ("sticky", "slip"):
            raise ValueError("ground must be 'sticky' or 'slip'")

    def encode(self):
        face_codes = np.array([0 if self.faces[f] == "sticky" else 1 for f in FACES], dtype=np.int64)
        has_ground = self.ground_height is not None
        return (face_codes, int(self.margin), has_ground,
                float(self.ground_height) if has_ground else 0.0,
                self.ground == "sticky", float(self.friction))


@dataclass
class Diagnostics:
    plastic_projections: int = 0
    det_clamps: int = 0
    substeps: int = 0

    def as_dict(self):
        return {"plastic_projections": self.plastic_projections,
                "det_clamps": self.det_clamps, "substeps": self.substeps}


# --- B-spline ----------------------------------------------------------------------------

def bspline_weights(x_p, n):
    """Base node (3,) and per-axis weights (3 stencil nodes, 3 axes) for one particle."""
    x_p = np.asarray(x_p, dtype=np.float64)
    dx = 1.0 / n
    if np.any(x_p < dx) or np.any(x_p > 1.0 - dx):
        raise ValueError(f"particle {x_p} outside the valid domain [dx, 1 - dx]^3")
    Xs = x_p * n
    base = np.floor(Xs - 0.5).astype(np.int64)
    fx = Xs - base
    w = np.stack([0.5 * (1.5 - fx) ** 2, 0.75 - (fx - 1.0) ** 2, 0.5 * (fx - 0.5) ** 2])
    return base, w


@nb.njit(cache=True)
def _weights(xp, inv_dx, base, w, fx):
    for d in range(3):
        Xs = xp[d] * inv_dx
        b = int(math.floor(Xs - 0.5))
        f = Xs - b
        base[d] = b
        fx[d] = f
        w[0, d] = 0.5 * (1.5 - f) ** 2
        w[1, d] = 0.75 - (f - 1.0) ** 2
        w[2, d] = 0.5 * (f - 0.5) ** 2


# --- P2G ---------------------------------------------------------------------------------

@nb.njit(parallel=True, cache=True)
def _p2g_prepare(x, v, C, F, mass, vol, mtype, mu, lam, Jp, hard, impulse, inv_dx, dt,
                 with_stress, base, w, fx, affine, mom):
    """Per-particle stencil data. Returns index of first non-finite particle or -1."""
    P = x.shape[0]
    bad = np.full(P, False)
    stress_coef = -dt * 4.0 * inv_dx * inv_dx
    for p in nb.prange(P):
        _weights(x[p], inv_dx, base[p], w[p], fx[p])
        for a in range(3):
            mom[p, a] = mass[p] * v[p, a] + impulse[p, a]
            for b in range(3):
                affine[p, a, b] = mass[p] * C[p, a, b]
        if with_stress and (mu[p] != 0.0 or lam[p] != 0.0):
            h = _nb_hardening(mtype[p], Jp[p], hard[p])
            tau = _nb_kirchhoff(F[p], mu[p] * h, lam[p] * h)
            for a in range(3):
                for b in range(3):
                    affine[p, a, b] += stress_coef * vol[p] * tau[a, b]
        ok = True
        for a in range(3):
            if not (math.isfinite(mom[p, a]) and math.isfinite(x[p, a])):
                ok = False
            for b in range(3):
                if not math.isfinite(affine[p, a, b]):
                    ok = False
        bad[p] = not ok
    for p in range(P):
        if bad[p]:
            return p
    return -1


@nb.njit(cache=True)
def _scatter(x, mass, base, w, fx, affine, mom, dx, gmv, gm):
    for p in range(x.shape[0]):
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    wt = w[p, i, 0] * w[p, j, 1] * w[p, k, 2]
                    I = base[p, 0] + i
                    Jn = base[p, 1] + j
                    K = base[p, 2] + k
                    # offsets in cell units are exact, which keeps linear reproduction tight
                    d0 = (i - fx[p, 0]) * dx
                    d1 = (j - fx[p, 1]) * dx
                    d2 = (k - fx[p, 2]) * dx
                    gm[I, Jn, K] += wt * mass[p]
                    for a in range(3):
                        gmv[I, Jn, K, a] += wt * (mom[p, a] + affine[p, a, 0] * d0
                                                  + affine[p, a, 1] * d1 + affine[p, a, 2] * d2)


@nb.njit(cache=True)
def _cell_sort(base, lo, dims):
    """Counting sort of particles by base cell; stable, so within-cell order is particle order."""
    P = base.shape[0]
    ncell = dims[0] * dims[1] * dims[2]
    keys = np.empty(P, dtype=np.int64)
    counts = np.zeros(ncell + 1, dtype=np.int64)
    for p in range(P):
        key = ((base[p, 0] - lo[0]) * dims[1] + (base[p, 1] - lo[1])) * dims[2] + (base[p, 2] - lo[2])
        keys[p] = key
        counts[key + 1] += 1
    for c in range(ncell):
        counts[c + 1] += counts[c]
    order = np.empty(P, dtype=np.int64)
    fill = counts[:-1].copy()
    for p in range(P):
        order[fill[keys[p]]] = p
        fill[keys[p]] += 1
    return order, counts


@nb.njit(parallel=True, cache=True)
def _gather(x, mass, base, w, fx, affine, mom, dx, gmv, gm, order, starts, lo, dims):
    """Each node sums its 27 neighbouring base cells in fixed (stencil, particle) order."""
    for ii in nb.prange(dims[0] + 2):
        I = lo[0] + ii
        for jj in range(dims[1] + 2):
            Jn = lo[1] + jj
            for kk in range(dims[2] + 2):
                K = lo[2] + kk
                m_acc = 0.0
                a0 = 0.0
                a1 = 0.0
                a2 = 0.0
                touched = False
                for i in range(3):
                    ci = ii - i
                    if ci < 0 or ci >= dims[0]:
                        continue
                    for j in range(3):
                        cj = jj - j
                        if cj < 0 or cj >= dims[1]:
                            continue
                        for k in range(3):
                            ck = kk - k
                            if ck < 0 or ck >= dims[2]:
                                continue
                            cell = (ci * dims[1] + cj) * dims[2] + ck
                            for s in range(starts[cell], starts[cell + 1]):
                                p = order[s]
                                wt = w[p, i, 0] * w[p, j, 1] * w[p, k, 2]
                                d0 = (i - fx[p, 0]) * dx
                                d1 = (j - fx[p, 1]) * dx
                                d2 = (k - fx[p, 2]) * dx
                                m_acc += wt * mass[p]
                                a0 += wt * (mom[p, 0] + affine[p, 0, 0] * d0 + affine[p, 0, 1] * d1 + affine[p, 0, 2] * d2)
                                a1 += wt * (mom[p, 1] + affine[p, 1, 0] * d0 + affine[p, 1, 1] * d1 + affine[p, 1, 2] * d2)
                                a2 += wt * (mom[p, 2] + affine[p, 2, 0] * d0 + affine[p, 2, 1] * d1 + affine[p, 2, 2] * d2)
                                touched = True
                if touched:
                    gm[I, Jn, K] += m_acc
                    gmv[I, Jn, K, 0] += a0
                    gmv[I, Jn, K, 1] += a1
                    gmv[I, Jn, K, 2] += a2


def _check_domain(particles, n):
    dx = 1.0 / n
    x = particles.x
    if np.any(x < dx) or np.any(x > 1.0 - dx):
        bad = int(np.flatnonzero(((x < dx) | (x > 1.0 - dx)).any(axis=1))[0])
        raise ValueError(f"particle {bad} at {x[bad]} lies outside the grid stencil domain")


def p2g(particles: MpmParticles, grid: MpmGrid, dt, *, impulse=None, with_stress=True,
        mode="gather"):
    """Scatter mass and APIC/MLS momentum (plus the stress impulse) onto ``grid``.

    ``impulse`` is an optional per-particle external momentum increment (P, 3).
    ``mode`` "gather" builds a cell-sorted index and lets every node sum its
    neighbours; "scatter" walks particles serially. Both are deterministic.
    """
    P = particles.count
    n = grid.n
    _check_domain(particles, n)
    base = np.empty((P, 3), dtype=np.int64)
    w = np.empty((P, 3, 3))
    fx = np.empty((P, 3))
    affine = np.empty((P, 3, 3))
    mom = np.empty((P, 3))
    if impulse is None:
        impulse = np.zeros((P, 3))
    bad = _p2g_prepare(particles.x, particles.v, particles.C, particles.F, particles.mass,
                       particles.volume, particles.mtype, particles.mu, particles.lam,
                       particles.Jp, particles.hardening, impulse, float(n), float(dt),
                       with_stress, base, w, fx, affine, mom)
    if bad >= 0:
        raise SimulationAbort("p2g", bad)
    dx = 1.0 / n
    if mode == "scatter":
        _scatter(particles.x, particles.mass, base, w, fx, affine, mom, dx, grid.mv, grid.m)
    elif mode == "gather":
        lo = base.min(axis=0)
        dims = base.max(axis=0) - lo + 1
        order, starts = _cell_sort(base, lo, dims)
        _gather(particles.x, particles.mass, base, w, fx, affine, mom, dx, grid.mv, grid.m,
                order, starts, lo, dims)
    else:
        raise ValueError(f"unknown transfer mode {mode!r}")
    return grid


# --- grid update ----------------------------------------------------------------------------

@nb.njit(parallel=True, cache=True)
def _grid_update(gmv, gm, gv, accel, dt, n, eps, face_codes, margin, has_ground, ground_h,
                 ground_sticky, friction):
    dx = 1.0 / n
    N = n + 1
    for I in nb.prange(N):
        for J in range(N):
            for K in range(N):
                m = gm[I, J, K]
                if m <= eps:
                    gv[I, J, K, 0] = 0.0
                    gv[I, J, K, 1] = 0.0
                    gv[I, J, K, 2] = 0.0
                    continue
                v0 = gmv[I, J, K, 0] / m + accel[0] * dt
                v1 = gmv[I, J, K, 1] / m + accel[1] * dt
                v2 = gmv[I, J, K, 2] / m + accel[2] * dt
                for d in range(3):
                    c = np.int64(I) if d == 0 else (np.int64(J) if d == 1 else np.int64(K))
                    lo_hit = c < margin
                    hi_hit = c > n - margin
                    if lo_hit or hi_hit:
                        code = face_codes[2 * d] if lo_hit else face_codes[2 * d + 1]
                        if code == 0:
                            v0 = 0.0
                            v1 = 0.0
                            v2 = 0.0
                        elif d == 0:
                            v0 = 0.0
                        elif d == 1:
                            v1 = 0.0
                        else:
                            v2 = 0.0
                if has_ground and K * dx < ground_h:
                    if ground_sticky:
                        v0 = 0.0
                        v1 = 0.0
                        v2 = 0.0
                    elif v2 < 0.0:
                        vn = v2
                        v2 = 0.0
                        vt = math.sqrt(v0 * v0 + v1 * v1)
                        if vt <= -friction * vn:
                            v0 = 0.0
                            v1 = 0.0
                        elif vt > 0.0:
                            s = 1.0 + friction * vn / vt
                            v0 *= s
                            v1 *= s
                gv[I, J, K, 0] = v0
                gv[I, J, K, 1] = v1
                gv[I, J, K, 2] = v2


def grid_update(grid: MpmGrid, bc: BoundaryCondition | None = None, dt=5e-5,
                acceleration=(0.0, 0.0, 0.0)):
    """Momentum -> velocity on nodes with mass, add uniform acceleration, apply walls."""
    bc = bc or BoundaryCondition()
    face_codes, margin, has_ground, gh, gsticky, mu_f = bc.encode()
    _grid_update(grid.mv, grid.m, grid.v, np.asarray(acceleration, dtype=np.float64), float(dt),
                 grid.n, EPS_MASS, face_codes, margin, has_ground, gh, gsticky, mu_f)
    return grid


# --- G2P ------------------------------------------------------------------------------------

@nb.njit(parallel=True, cache=True)
def _g2p(gv, gm, eps, x, v, C, F, mtype, mu, lam, Jp, theta_c, theta_s, alpha, dt, n, lo_clamp,
         hi_clamp, plastic_flag, det_flag, bad_flag):
    inv_dx = float(n)
    dx = 1.0 / n
    P = x.shape[0]
    for p in nb.prange(P):
        base = np.empty(3, dtype=np.int64)
        w = np.empty((3, 3))
        fx = np.empty(3)
        _weights(x[p], inv_dx, base, w, fx)
        vp = np.empty(3)
        for a in range(3):
            vp[a] = v[p, a]
        nv = np.zeros(3)
        nC = np.zeros((3, 3))
        for i in range(3):
            for j in range(3):
                for k in range(3):
                    wt = w[i, 0] * w[j, 1] * w[k, 2]
                    I = base[0] + i
                    J = base[1] + j
                    K = base[2] + k
                    d0 = (i - fx[0]) * dx
                    d1 = (j - fx[1]) * dx
                    d2 = (k - fx[2]) * dx
                    # a node below the mass floor has no velocity; reading the
                    # particle's own keeps it from pulling on v and C
                    empty = gm[I, J, K] <= eps
                    for a in range(3):
                        gva = vp[a] if empty else gv[I, J, K, a]
                        nv[a] += wt * gva
                        nC[a, 0] += wt * gva * d0
                        nC[a, 1] += wt * gva * d1
                        nC[a, 2] += wt * gva * d2
        scale = 4.0 * inv_dx * inv_dx
        Fn = np.empty((3, 3))
        for a in range(3):
            v[p, a] = nv[a]
            x[p, a] += dt * nv[a]
            for b in range(3):
                C[p, a, b] = scale * nC[a, b]
        for a in range(3):
            for b in range(3):
                s = F[p, a, b]
                for c in range(3):
                    s += dt * C[p, a, c] * F[p, c, b]
                Fn[a, b] = s
        finite = True
        for a in range(3):
            if not (math.isfinite(x[p, a]) and math.isfinite(v[p, a])):
                finite = False
            for b in range(3):
                if not math.isfinite(Fn[a, b]):
                    finite = False
        if not finite:
            bad_flag[p] = True
            continue
        if _nb_det(Fn) <= 0.0:
            U, sig, Vt = np.linalg.svd(Fn)
            if _nb_det(U) * _nb_det(Vt) < 0.0:
                # move the reflection into U so U Vt is a rotation; the flipped
                # singular value is negative and gets clamped below
                for a in range(3):
                    U[a, 2] = -U[a, 2]
                sig[2] = -sig[2]
            for a in range(3):
                if sig[a] < 1e-3:
                    sig[a] = 1e-3
            for a in range(3):
                for b in range(3):
                    s = 0.0
                    for c in range(3):
                        s += U[a, c] * sig[c] * Vt[c, b]
                    Fn[a, b] = s
            det_flag[p] = True
        if mtype[p] != 0:
            Fp, jp, changed = _nb_plasticity(Fn, mtype[p], Jp[p], mu[p], lam[p], theta_c[p],
                                             theta_s[p], alpha[p])
            Fn = Fp
            Jp[p] = jp
            plastic_flag[p] = changed
        for a in range(3):
            for b in range(3):
                F[p, a, b] = Fn[a, b]
            if x[p, a] < lo_clamp:
                x[p, a] = lo_clamp
            elif x[p, a] > hi_clamp:
                x[p, a] = hi_clamp


def g2p(grid: MpmGrid, particles: MpmParticles, dt, diagnostics: Diagnostics | None = None):
    """Gather velocities back, update C, x, F (in place), project plastically, clamp to domain."""
    P = particles.count
    n = grid.n
    plastic = np.zeros(P, dtype=np.bool_)
    det = np.zeros(P, dtype=np.bool_)
    bad = np.zeros(P, dtype=np.bool_)
    margin = BOUNDARY_MARGIN / n
    _g2p(grid.v, grid.m, EPS_MASS, particles.x, particles.v, particles.C, particles.F, particles.mtype,
         particles.mu, particles.lam, particles.Jp, particles.theta_c, particles.theta_s,
         particles.dp_alpha, float(dt), n, margin, 1.0 - margin, plastic, det, bad)
    if bad.any():
        raise SimulationAbort("g2p", int(np.flatnonzero(bad)[0]))
    if diagnostics is not None:
        diagnostics.plastic_projections += int(plastic.sum())
        diagnostics.det_clamps += int(det.sum())
    return particles


# --- substep ---------------------------------------------------------------------------------

def stable_dt_bound(youngs_max, density_min, dx):
    """Elastic-wave CFL-like limit 0.3 * dx / sqrt(E_max / rho_min)."""
    return CFL_FACTOR * dx / math.sqrt(youngs_max / density_min)


def substep(particles: MpmParticles, grid: MpmGrid, dt, *, bc=None, acceleration=(0, 0, 0),
            impulse=None, diagnostics=None, mode="gather"):
    """zero grid -> p2g -> grid_update -> g2p. Mutates and returns ``particles``."""
    grid.zero()
    p2g(particles, grid, dt, impulse=impulse, mode=mode)
    grid_update(grid, bc, dt, acceleration)
    g2p(grid, particles, dt, diagnostics)
    if diagnostics is not None:
        diagnostics.substeps += 1
    return particles


# --- setup -------------------------------------------------------------------------------------

def occupied_cell_volume(positions, n):
    cells = np.floor(np.asarray(positions) * n).astype(np.int64)
    return len(np.unique(cells, axis=0)) / n**3


def init_particle_masses(cloud, grid: MpmGrid, materials=None) -> MpmParticles:
    """Particles from a normalized, labeled cloud.

    Every particle gets V_p = (volume of occupied cells) / P and m_p = rho_group * V_p.
    ``materials`` maps group id -> MaterialProperties (defaults to ``cloud.materials``).
    """
    materials = cloud.materials if materials is None else materials
    groups = np.asarray(cloud.group_ids)
    if np.any(groups < 0):
        raise ValueError("cloud has unlabeled kernels; run perception first")
    missing = sorted(set(np.unique(groups).tolist()) - set(materials))
    if missing:
        raise ValueError(f"no material for group(s) {missing}")
    P = cloud.count
    vol = occupied_cell_volume(cloud.positions, grid.n) / P
    rho = np.empty(P)
    mtype = np.empty(P, dtype=np.int64)
    mu = np.empty(P)
    lam = np.empty(P)
    theta_c = np.empty(P)
    theta_s = np.empty(P)
    hard = np.empty(P)
    alpha = np.empty(P)
    for g, props in materials.items():
        sel = groups == g
        if not sel.any():
            continue
        lame = lame_parameters(props.youngs_modulus, props.poissons_ratio)
        rho[sel] = props.density
        mtype[sel] = MATERIAL_CODES[props.material_type]
        mu[sel] = lame.mu
        lam[sel] = lame.lam
        theta_c[sel] = props.theta_c
        theta_s[sel] = props.theta_s
        hard[sel] = props.hardening
        alpha[sel] = drucker_prager_alpha(props.friction_angle)
    return MpmParticles.create(
        cloud.positions, mass=rho * vol, volume=np.full(P, vol), mtype=mtype, mu=mu, lam=lam,
        group=groups, theta_c=theta_c, theta_s=theta_s, hardening=hard, dp_alpha=alpha)


@nb.njit(cache=True)
def _elastic_energy(F, mtype, mu, lam, Jp, hard, vol):
    total = 0.0
    for p in range(F.shape[0]):
        if mu[p] == 0.0 and lam[p] == 0.0:
            continue
        h = _nb_hardening(mtype[p], Jp[p], hard[p])
        total += vol[p] * _nb_energy(F[p], mu[p] * h, lam[p] * h)
    return total


def kinetic_energy(particles):
    return 0.5 * float(np.sum(particles.mass * np.einsum("pi,pi->p", particles.v, particles.v)))


def elastic_energy(particles):
    return float(_elastic_energy(particles.F, particles.mtype, particles.mu, particles.lam,
                                 particles.Jp, particles.hardening, particles.volume))
