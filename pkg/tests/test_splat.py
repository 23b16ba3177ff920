import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_cloud
from splatdyn.splat import (
    NO_GROUP, DegenerateCloudError, PlyError, SplatCloud, covariance_from_scale_rot,
    decompose_covariance, load_splat_ply, normalize_to_domain, quat_to_rotmat, rotmat_to_quat,
    save_frame,
)

SH_C0 = 0.28209479177387814
PROPS = ["x", "y", "z", "f_dc_0", "f_dc_1", "f_dc_2", "opacity",
         "scale_0", "scale_1", "scale_2", "rot_0", "rot_1", "rot_2", "rot_3"]


def write_ascii_ply(path, rows, props=PROPS):
    lines = ["ply", "format ascii 1.0", f"element vertex {len(rows)}"]
    lines += [f"property float {p}" for p in props]
    lines.append("end_header")
    lines += [" ".join(repr(float(v)) for v in r) for r in rows]
    path.write_text("\n".join(lines) + "\n")


def write_binary_ply(path, rows, props=PROPS):
    head = ["ply", "format binary_little_endian 1.0", f"element vertex {len(rows)}"]
    head += [f"property float {p}" for p in props]
    head.append("end_header")
    body = b"".join(struct.pack("<" + "f" * len(props), *r) for r in rows)
    path.write_bytes(("\n".join(head) + "\n").encode() + body)


def kernel_row(pos=(0, 0, 0), dc=(0, 0, 0), logit=0.0, log_scale=(-3, -3, -3), q=(1, 0, 0, 0)):
    return [*pos, *dc, logit, *log_scale, *q]


def test_ascii_ply_activations(tmp_path):
    p = tmp_path / "a.ply"
    write_ascii_ply(p, [kernel_row(pos=(1, 2, 3), dc=(1.0, 0.0, -1.0), logit=0.0,
                                   log_scale=(np.log(0.1), np.log(0.2), np.log(0.3)))])
    c = load_splat_ply(p)
    assert c.count == 1
    np.testing.assert_allclose(c.positions[0], [1, 2, 3])
    assert c.opacities[0] == pytest.approx(0.5)
    np.testing.assert_allclose(c.colors[0], [0.5 + SH_C0, 0.5, 0.5 - SH_C0], rtol=1e-6)
    np.testing.assert_allclose(c.covariances[0], np.diag([0.01, 0.04, 0.09]), rtol=1e-5)
    assert (c.group_ids == NO_GROUP).all()


def test_binary_matches_ascii(tmp_path, rng):
    rows = [kernel_row(pos=rng.normal(size=3), dc=rng.normal(size=3), logit=rng.normal(),
                       log_scale=rng.uniform(-5, -2, 3), q=rng.normal(size=4)) for _ in range(20)]
    rows = [list(np.float32(r)) for r in rows]
    write_ascii_ply(tmp_path / "a.ply", rows)
    write_binary_ply(tmp_path / "b.ply", rows)
    a, b = load_splat_ply(tmp_path / "a.ply"), load_splat_ply(tmp_path / "b.ply")
    np.testing.assert_allclose(a.positions, b.positions, rtol=1e-6)
    np.testing.assert_allclose(a.covariances, b.covariances, rtol=1e-5, atol=1e-12)


def test_missing_property_is_named(tmp_path):
    p = tmp_path / "m.ply"
    props = [q for q in PROPS if q != "rot_2"]
    write_ascii_ply(p, [kernel_row()[:12] + [0.0]], props)
    with pytest.raises(PlyError) as err:
        load_splat_ply(p)
    assert err.value.property_name == "rot_2"
    assert "rot_2" in str(err.value)


def test_nonfinite_field_reports_index(tmp_path):
    p = tmp_path / "n.ply"
    rows = [kernel_row(), kernel_row(), kernel_row()]
    rows[2][1] = float("nan")
    write_ascii_ply(p, rows)
    with pytest.raises(PlyError) as err:
        load_splat_ply(p)
    assert err.value.index == 2


def test_save_and_reload_roundtrip(tmp_path, rng):
    q = rng.normal(size=(50, 4))
    cov = covariance_from_scale_rot(rng.uniform(-5, -2, (50, 3)), q)
    cloud = SplatCloud(rng.normal(size=(50, 3)), cov, rng.uniform(0.05, 0.95, 50),
                       rng.uniform(0.05, 0.95, (50, 3)))
    assert save_frame(cloud, tmp_path / "f.ply") == 0
    back = load_splat_ply(tmp_path / "f.ply")
    np.testing.assert_allclose(back.positions, cloud.positions, rtol=1e-6, atol=1e-6)
    np.testing.assert_allclose(back.opacities, cloud.opacities, atol=1e-6)
    np.testing.assert_allclose(back.colors, cloud.colors, atol=1e-6)
    np.testing.assert_allclose(back.covariances, cloud.covariances, rtol=1e-4, atol=1e-9)


def test_save_clamps_negative_eigenvalues(tmp_path):
    cov = np.array([np.diag([1e-4, 1e-4, -1e-6]), np.eye(3) * 1e-4])
    cloud = SplatCloud(np.zeros((2, 3)), cov, [0.5, 0.5], np.full((2, 3), 0.5))
    assert save_frame(cloud, tmp_path / "c.ply") == 1


@settings(max_examples=50, deadline=None)
@given(st.lists(st.floats(-1, 1), min_size=4, max_size=4).filter(
    lambda q: np.linalg.norm(q) > 0.1))
def test_quaternion_roundtrip(q):
    R = quat_to_rotmat(np.array(q))
    np.testing.assert_allclose(R @ R.T, np.eye(3), atol=1e-12)
    R2 = quat_to_rotmat(rotmat_to_quat(R)[0])
    np.testing.assert_allclose(R2, R, atol=1e-10)


def test_decompose_inverts_compose(rng):
    ls = rng.uniform(-4, -1, (30, 3))
    cov = covariance_from_scale_rot(ls, rng.normal(size=(30, 4)))
    log_scales, quats, n_clamped = decompose_covariance(cov)
    assert n_clamped == 0
    np.testing.assert_allclose(np.sort(log_scales, axis=1), np.sort(ls, axis=1), atol=1e-8)
    np.testing.assert_allclose(covariance_from_scale_rot(log_scales, quats), cov,
                               rtol=1e-8, atol=1e-14)


def test_normalize_to_domain(rng):
    pts = rng.uniform([-3, 1, 5], [1, 2, 6], (500, 3))
    cloud = make_cloud(pts)
    dom, xf = normalize_to_domain(cloud, padding=0.1)
    lo, hi = dom.positions.min(axis=0), dom.positions.max(axis=0)
    assert np.max(hi - lo) == pytest.approx(0.8)
    np.testing.assert_allclose(0.5 * (lo + hi), 0.5, atol=1e-12)
    np.testing.assert_allclose(xf.to_world(dom.positions), pts, atol=1e-12)
    np.testing.assert_allclose(dom.covariances, cloud.covariances * xf.scale**2)


def test_normalize_rejects_degenerate():
    with pytest.raises(DegenerateCloudError):
        normalize_to_domain(make_cloud(np.ones((5, 3))))


def test_cloud_is_immutable():
    c = make_cloud(np.zeros((3, 3)))
    with pytest.raises(ValueError):
        c.positions[0, 0] = 1.0
    k = c[1]
    assert k.group_id is None
