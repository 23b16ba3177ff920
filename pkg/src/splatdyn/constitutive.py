"""Fixed-corotated elasticity with snow and Drucker-Prager sand plasticity.

The ``_nb_*`` kernels are njit-compiled and shared with the MPM substep; the
public functions wrap them for single-particle use.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba as nb
import numpy as np

ELASTIC, SNOW, SAND = 0, 1, 2
MATERIAL_CODES = {"elastic": ELASTIC, "snow": SNOW, "sand": SAND}

SNOW_THETA_C = 2.5e-2
SNOW_THETA_S = 7.5e-3
SNOW_HARDENING = 10.0
SAND_FRICTION_DEG = 30.0


@dataclass(frozen=True)
class LameParameters:
    mu: float
    lam: float


@dataclass
class ElasticState:
    F: np.ndarray
    Jp: float = 1.0


def lame_parameters(E, nu) -> LameParameters:
    if not E > 0:
        raise ValueError("Young's modulus must be positive")
    if nu >= 0.5:
        raise ValueError("Poisson's ratio must be < 0.5 (lambda is singular at 0.5)")
    return LameParameters(mu=E / (2.0 * (1.0 + nu)),
                          lam=E * nu / ((1.0 + nu) * (1.0 - 2.0 * nu)))


def drucker_prager_alpha(friction_angle_deg):
    s = math.sin(math.radians(friction_angle_deg))
    return math.sqrt(2.0 / 3.0) * 2.0 * s / (3.0 - s)


# --- compiled kernels -----------------------------------------------------------------

@nb.njit(cache=True)
def _nb_det(A):
    return (A[0, 0] * (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1])
            - A[0, 1] * (A[1, 0] * A[2, 2] - A[1, 2] * A[2, 0])
            + A[0, 2] * (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]))


@nb.njit(cache=True)
def _nb_inv(A):
    d = _nb_det(A)
    out = np.empty((3, 3))
    out[0, 0] = (A[1, 1] * A[2, 2] - A[1, 2] * A[2, 1]) / d
    out[0, 1] = (A[0, 2] * A[2, 1] - A[0, 1] * A[2, 2]) / d
    out[0, 2] = (A[0, 1] * A[1, 2] - A[0, 2] * A[1, 1]) / d
    out[1, 0] = (A[1, 2] * A[2, 0] - A[1, 0] * A[2, 2]) / d
    out[1, 1] = (A[0, 0] * A[2, 2] - A[0, 2] * A[2, 0]) / d
    out[1, 2] = (A[0, 2] * A[1, 0] - A[0, 0] * A[1, 2]) / d
    out[2, 0] = (A[1, 0] * A[2, 1] - A[1, 1] * A[2, 0]) / d
    out[2, 1] = (A[0, 1] * A[2, 0] - A[0, 0] * A[2, 1]) / d
    out[2, 2] = (A[0, 0] * A[1, 1] - A[0, 1] * A[1, 0]) / d
    return out


@nb.njit(cache=True)
def _nb_polar_rotation(F):
    """Rotation factor of F = R S (det F > 0) by scaled Newton iteration."""
    X = F.copy()
    for it in range(60):
        Xi = _nb_inv(X)
        nx = 0.0
        ni = 0.0
        for a in range(3):
            for b in range(3):
                nx += X[a, b] * X[a, b]
                ni += Xi[a, b] * Xi[a, b]
        g = math.sqrt(math.sqrt(ni / nx)) if it < 6 else 1.0
        diff = 0.0
        Xn = np.empty((3, 3))
        for a in range(3):
            for b in range(3):
                Xn[a, b] = 0.5 * (g * X[a, b] + Xi[b, a] / g)
                diff += (Xn[a, b] - X[a, b]) ** 2
        X = Xn
        if diff < 1e-30:
            break
    return X


@nb.njit(cache=True)
def _nb_kirchhoff(F, mu, lam):
    """tau = P F^T = 2 mu (F - R) F^T + lam (J - 1) J I."""
    R = _nb_polar_rotation(F)
    J = _nb_det(F)
    tau = np.empty((3, 3))
    for a in range(3):
        for b in range(3):
            s = 0.0
            for c in range(3):
                s += (F[a, c] - R[a, c]) * F[b, c]
            tau[a, b] = 2.0 * mu * s
        tau[a, a] += lam * (J - 1.0) * J
    for a in range(3):
        for b in range(a + 1, 3):
            m = 0.5 * (tau[a, b] + tau[b, a])
            tau[a, b] = m
            tau[b, a] = m
    return tau


@nb.njit(cache=True)
def _nb_first_piola(F, mu, lam):
    R = _nb_polar_rotation(F)
    J = _nb_det(F)
    Fit = _nb_inv(F).T
    return 2.0 * mu * (F - R) + lam * (J - 1.0) * J * Fit


@nb.njit(cache=True)
def _nb_energy(F, mu, lam):
    R = _nb_polar_rotation(F)
    J = _nb_det(F)
    s = 0.0
    for a in range(3):
        for b in range(3):
            s += (F[a, b] - R[a, b]) ** 2
    return mu * s + 0.5 * lam * (J - 1.0) ** 2


@nb.njit(cache=True)
def _nb_rebuild(U, sig, Vt):
    out = np.empty((3, 3))
    for a in range(3):
        for b in range(3):
            s = 0.0
            for c in range(3):
                s += U[a, c] * sig[c] * Vt[c, b]
            out[a, b] = s
    return out


@nb.njit(cache=True)
def _nb_project_snow(F, theta_c, theta_s):
    """Clamp singular values into [1 - theta_c, 1 + theta_s].

    Returns (F_elastic, det ratio old/new, changed). The ratio multiplies J_p.
    """
    U, sig, Vt = np.linalg.svd(F)
    lo = 1.0 - theta_c
    hi = 1.0 + theta_s
    changed = False
    new = sig.copy()
    for a in range(3):
        if new[a] < lo:
            new[a] = lo
            changed = True
        elif new[a] > hi:
            new[a] = hi
            changed = True
    if not changed:
        return F.copy(), 1.0, False
    ratio = (sig[0] * sig[1] * sig[2]) / (new[0] * new[1] * new[2])
    return _nb_rebuild(U, new, Vt), ratio, True


@nb.njit(cache=True)
def _nb_project_sand(F, mu, lam, alpha):
    """Drucker-Prager return map on the Hencky strain of F's singular values."""
    U, sig, Vt = np.linalg.svd(F)
    eps = np.log(np.maximum(sig, 1e-12))
    tr = eps[0] + eps[1] + eps[2]
    hat = eps - tr / 3.0
    norm = math.sqrt(hat[0] ** 2 + hat[1] ** 2 + hat[2] ** 2)
    if tr > 0.0:
        return _nb_rebuild(U, np.ones(3), Vt), True
    if norm == 0.0:
        return F.copy(), False
    dgamma = norm + (3.0 * lam + 2.0 * mu) / (2.0 * mu) * tr * alpha
    if dgamma <= 0.0:
        return F.copy(), False
    h = eps - dgamma / norm * hat
    return _nb_rebuild(U, np.exp(h), Vt), True


@nb.njit(cache=True)
def _nb_plasticity(F, mtype, Jp, mu, lam, theta_c, theta_s, alpha):
    """Returns (F_elastic, J_p, projected)."""
    if mtype == 1:
        Fn, ratio, changed = _nb_project_snow(F, theta_c, theta_s)
        return Fn, Jp * ratio, changed
    if mtype == 2:
        Fn, changed = _nb_project_sand(F, mu, lam, alpha)
        return Fn, Jp, changed
    return F, Jp, False


@nb.njit(cache=True)
def _nb_hardening(mtype, Jp, xi):
    if mtype == 1:
        return math.exp(xi * (1.0 - Jp))
    return 1.0


# --- public API ------------------------------------------------------------------------

def _as_F(F):
    F = np.ascontiguousarray(F, dtype=np.float64).reshape(3, 3)
    if not np.isfinite(F).all():
        raise ValueError("deformation gradient has non-finite entries")
    if np.linalg.det(F) <= 0:
        raise ValueError("det(F) must be positive")
    return F


def polar_rotation(F):
    return _nb_polar_rotation(_as_F(F))


def first_piola(F, lame: LameParameters):
    return _nb_first_piola(_as_F(F), lame.mu, lame.lam)


def corotated_energy(F, lame: LameParameters):
    return _nb_energy(_as_F(F), lame.mu, lame.lam)


def cauchy_stress(F, lame: LameParameters, material_type="elastic", state=None,
                  hardening=SNOW_HARDENING):
    """Cauchy stress of the fixed-corotated model, sigma = P F^T / J.

    Snow scales mu and lambda by exp(hardening * (1 - J_p)).
    """
    F = _as_F(F)
    code = MATERIAL_CODES[material_type]
    Jp = state.Jp if state is not None else 1.0
    h = _nb_hardening(code, Jp, hardening)
    tau = _nb_kirchhoff(F, lame.mu * h, lame.lam * h)
    return tau / _nb_det(F)


def apply_plasticity(F_trial, material_type="elastic", state=None, *, lame=None,
                     theta_c=SNOW_THETA_C, theta_s=SNOW_THETA_S,
                     friction_angle=SAND_FRICTION_DEG):
    """Project a trial deformation gradient onto the material's elastic region.

    Returns (F, ElasticState). Sand needs ``lame`` for the return map.
    """
    F = _as_F(F_trial)
    code = MATERIAL_CODES[material_type]
    Jp = state.Jp if state is not None else 1.0
    if code == SAND and lame is None:
        raise ValueError("sand plasticity needs Lame parameters")
    mu, lam = (lame.mu, lame.lam) if lame is not None else (1.0, 1.0)
    Fn, Jp_new, _ = _nb_plasticity(F, code, Jp, mu, lam, theta_c, theta_s,
                                   drucker_prager_alpha(friction_angle))
    return Fn, ElasticState(F=Fn, Jp=Jp_new)
