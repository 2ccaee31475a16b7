import io
import logging

import numpy as np
import pytest

from diffmesh.errors import (
    ConfigError,
    DimensionError,
    FormatError,
    ProjectionError,
    ShapeError,
    SizeError,
)
from diffmesh.geometry import (
    Camera,
    JointRegressor,
    MeshTopology,
    edge_face_counts,
    face_normals,
    farthest_point_sample,
    load_obj,
    metrics,
    nearest_selected,
    obj_text,
    procrustes_align,
    procrustes_transform,
    project,
    read_obj,
    regress_joints,
    write_obj,
)
from diffmesh.numcore import Rng, Tensor, grad_check, mul, sum_all


TETRA_VERTS = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
TETRA = MeshTopology([[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]], 4)


def random_rotation(rng):
    q, r = np.linalg.qr(rng.normal((3, 3)))
    q = q * np.sign(np.diag(r))
    if np.linalg.det(q) < 0:
        q[:, 0] = -q[:, 0]
    return q


def test_fps_greedy_property():
    rng = Rng(100)
    for _ in range(1000):
        n = int(rng.integers(1, 12))
        k = int(rng.integers(1, n))
        points = np.round(rng.uniform((n, 3)) * 4) / 4
        selected = farthest_point_sample(points, k).tolist()
        assert selected[0] == 0
        assert len(set(selected)) == k
        for i in range(1, k):
            chosen = selected[:i]
            best, best_distance = None, -1.0
            for j in range(n):
                if j in chosen:
                    continue
                distance = min(np.sum((points[j] - points[c]) ** 2) for c in chosen)
                if distance > best_distance:
                    best, best_distance = j, distance
            assert selected[i] == best


def test_fps_size():
    with pytest.raises(SizeError):
        farthest_point_sample(np.zeros((3, 3)), 4)
    with pytest.raises(SizeError):
        farthest_point_sample(np.zeros((3, 3)), 0)


def test_nearest_selected():
    points = np.array([[0.0, 0, 0], [0.1, 0, 0], [1, 0, 0], [0.9, 0, 0]])
    assert nearest_selected(points, np.array([0, 2])).tolist() == [0, 0, 1, 1]


def test_topology_validation():
    with pytest.raises(ShapeError):
        MeshTopology(np.zeros((2, 4), dtype=int), 4)
    with pytest.raises(ConfigError):
        MeshTopology([[0, 1, 4]], 4)
    with pytest.raises(ConfigError):
        MeshTopology([[0, 1, 1]], 4)


def test_regressor_validation():
    with pytest.raises(ConfigError):
        JointRegressor([[0.5, 0.6]])
    with pytest.raises(ConfigError):
        JointRegressor([[1.5, -0.5]])
    W = JointRegressor([[0.25, 0.75]])
    assert (W.joint_count, W.vertex_count) == (1, 2)


def test_face_normals():
    normals, degenerate = face_normals(TETRA_VERTS, TETRA)
    assert np.linalg.norm(normals, axis=1) == pytest.approx(np.ones(4))
    assert not degenerate.any()
    assert normals[0] == pytest.approx([0.0, 0.0, -1.0])


def test_face_normals_degenerate(caplog):
    verts = np.array([[0.0, 0, 0], [1, 0, 0], [2, 0, 0]])
    with caplog.at_level(logging.WARNING):
        normals, degenerate = face_normals(verts, MeshTopology([[0, 1, 2]], 3))
    assert degenerate.tolist() == [True]
    assert "degenerate" in caplog.text.lower()


def test_regress_joints_gradient():
    W = JointRegressor(np.array([[0.5, 0.5, 0.0, 0.0], [0.0, 0.25, 0.25, 0.5]]))
    verts = Tensor(Rng(1).normal((4, 3)), requires_grad=True)
    weights = Rng(2).normal((2, 3))
    assert regress_joints(TETRA_VERTS, W)[0] == pytest.approx([0.5, 0.0, 0.0])
    assert grad_check(lambda v: sum_all(mul(regress_joints(v, W), weights)), [verts]) < 1e-8


def test_project():
    cam = Camera(10.0, 20.0, 16.0, 8.0)
    pixels = project(np.array([[1.0, 1.0, 2.0]]), cam)
    assert pixels.tolist() == [[21.0, 18.0]]
    with pytest.raises(ProjectionError) as excinfo:
        project(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, 0.0]]), cam)
    assert excinfo.value.index == 1


def test_project_gradient():
    cam = Camera(30.0, 30.0, 16.0, 16.0)
    joints = Tensor(Rng(3).normal((5, 3)) * 0.2 + [0.0, 0.0, 3.0], requires_grad=True)
    weights = Rng(4).normal((5, 2))
    assert grad_check(lambda j: sum_all(mul(project(j, cam), weights)), [joints]) < 1e-5
    assert project(joints, cam).data == pytest.approx(project(joints.data, cam))


def test_procrustes_recovers_similarity():
    rng = Rng(5)
    for _ in range(20):
        gt = rng.normal((30, 3))
        R = random_rotation(rng)
        s = 0.5 + 2.0 * float(rng.uniform())
        translation = rng.normal(3)
        pred = (gt - translation) @ R / s
        assert np.abs(procrustes_align(pred, gt) - gt).max() < 1e-9


def test_procrustes_returns_proper_rotation():
    gt = Rng(6).normal((10, 3))
    mirrored = gt * [-1.0, 1.0, 1.0]
    s, R, _ = procrustes_transform(mirrored, gt)
    assert np.linalg.det(R) == pytest.approx(1.0)
    assert s > 0


def test_procrustes_degenerate_falls_back(caplog):
    gt = np.zeros((4, 3))
    pred = np.ones((4, 3))
    with caplog.at_level(logging.WARNING):
        s, R, translation = procrustes_transform(pred, gt)
    assert s == 1.0
    assert np.array_equal(R, np.eye(3))
    assert translation == pytest.approx([-1.0, -1.0, -1.0])
    assert "translation" in caplog.text


def test_procrustes_errors():
    with pytest.raises(DimensionError):
        procrustes_transform(np.zeros((4, 3)), np.zeros((5, 3)))
    with pytest.raises(SizeError):
        procrustes_transform(np.zeros((2, 3)), np.zeros((2, 3)))


@pytest.fixture
def mesh_and_regressor():
    rng = Rng(7)
    verts = rng.normal((20, 3))
    weights = rng.uniform((4, 20))
    return verts, JointRegressor(weights / weights.sum(axis=1, keepdims=True))


def test_metrics_zero_at_ground_truth(mesh_and_regressor):
    verts, W = mesh_and_regressor
    for value in metrics(verts, verts, W, root_relative=True).values():
        assert value == pytest.approx(0.0, abs=1e-12)


def test_aligned_metrics_invariant(mesh_and_regressor):
    verts, W = mesh_and_regressor
    rng = Rng(8)
    pred = verts + 0.05 * rng.normal(verts.shape)
    base = metrics(pred, verts, W)
    moved = 1.7 * pred @ random_rotation(rng).T + [0.3, -2.0, 1.0]
    errors = metrics(moved, verts, W)
    assert errors["E_PV"] == pytest.approx(base["E_PV"], abs=1e-9)
    assert errors["E_PJ"] == pytest.approx(base["E_PJ"], abs=1e-9)


def test_root_relative_metrics_ignore_translation(mesh_and_regressor):
    verts, W = mesh_and_regressor
    errors = metrics(verts + [1.0, 2.0, 3.0], verts, W, root_relative=True)
    assert errors["E_V"] == pytest.approx(0.0, abs=1e-12)
    assert errors["E_J"] == pytest.approx(0.0, abs=1e-12)


def test_edge_face_counts():
    counts = edge_face_counts(TETRA)
    assert len(counts) == 6
    assert set(counts.values()) == {2}


def test_obj_roundtrip(tmp_path):
    path = str(tmp_path / "mesh.obj")
    write_obj(path, TETRA_VERTS, TETRA)
    verts, topo = read_obj(path)
    assert np.array_equal(verts, TETRA_VERTS)
    assert np.array_equal(topo.faces, TETRA.faces)
    assert "f 1 3 2" in obj_text(TETRA_VERTS, TETRA)


def test_obj_errors(tmp_path):
    with pytest.raises(DimensionError):
        write_obj(str(tmp_path / "bad.obj"), TETRA_VERTS[:3], TETRA)
    assert not (tmp_path / "bad.obj").exists()
    with pytest.raises(FormatError):
        load_obj(io.StringIO("v 0 0 0\nf 1 2 3 4\n"))
