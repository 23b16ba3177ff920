import numpy as np
import pytest

from splatdyn.constitutive import lame_parameters
from splatdyn.materials import MaterialProperties
from splatdyn.mpm import MpmParticles
from splatdyn.splat import SplatCloud


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def make_cloud(positions, groups=None, sigma=0.01, materials=None):
    P = len(positions)
    return SplatCloud(
        positions=positions,
        covariances=np.broadcast_to(np.eye(3) * sigma**2, (P, 3, 3)),
        opacities=np.full(P, 0.9),
        colors=np.full((P, 3), 0.5),
        group_ids=groups,
        materials=materials or {},
    )


def lattice(lo, hi, n):
    ax = [np.linspace(lo[d], hi[d], n) for d in range(3)]
    g = np.meshgrid(*ax, indexing="ij")
    return np.stack([a.ravel() for a in g], axis=1)


def elastic_block(center=(0.5, 0.5, 0.5), size=0.2, n=8, E=1e5, nu=0.3, rho=1000.0, v=None):
    """Particles on an n^3 lattice filling a cube; mass from density times lattice cell volume."""
    c = np.asarray(center)
    x = lattice(c - size / 2, c + size / 2, n)
    vol = size**3 / len(x)
    lame = lame_parameters(E, nu)
    return MpmParticles.create(x, mass=rho * vol, volume=vol, mu=lame.mu, lam=lame.lam, v=v)


ELASTIC = MaterialProperties("elastic", 1000.0, 1e5, 0.3, name="elastic")


# criterion number -> (passed, one-line detail); filled by test_acceptance.py
ACCEPTANCE = {}


def record(number, ok, detail):
    ACCEPTANCE[number] = (bool(ok), detail)
    print(f"criterion {number:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
    return ok


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE):
        ok, detail = ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:>2}: {'PASS' if ok else 'FAIL'}  {detail}")
