import collections
import math

import numpy as np
import pytest

from diffmesh.errors import ConfigError, DimensionError
from diffmesh.geometry import Camera, JointRegressor, MeshTopology, project, regress_joints
from diffmesh.losses import (
    LossWeights,
    Target,
    csv_row,
    epsilon_loss,
    joint_loss,
    smooth_loss,
    total_loss,
    vertex_loss,
)
from diffmesh.numcore import Rng, Tensor, grad_check


CAMERA = Camera(40.0, 40.0, 16.0, 16.0)
TETRA = MeshTopology([[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]], 4)
TETRA_VERTS = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]]) * 0.5 + [0, 0, 3]
REGRESSOR = JointRegressor(
    [[1.0, 0, 0, 0], [0.5, 0.5, 0, 0], [0, 0.5, 0.5, 0], [0.25, 0.25, 0.25, 0.25]]
)


def make_target(verts=TETRA_VERTS):
    joints = regress_joints(verts, REGRESSOR)
    return Target(
        verts=verts,
        joints3d=joints,
        joints2d=project(joints, CAMERA),
        regressor=REGRESSOR,
        camera=CAMERA,
        topology=TETRA,
        image_size=32,
    )


def test_default_weights():
    weights = LossWeights()
    assert (weights.lambda_joint, weights.lambda_smooth) == (1.0, 0.05)
    with pytest.raises(ConfigError):
        LossWeights(lambda_joint=-1.0)


def test_losses_vanish_at_ground_truth():
    target = make_target()
    terms = total_loss(TETRA_VERTS, target, LossWeights())
    assert terms.vertex.item() == 0.0
    assert terms.joint.item() == pytest.approx(0.0, abs=1e-20)
    assert terms.smooth.item() == pytest.approx(0.0, abs=1e-12)
    assert terms.total.item() == pytest.approx(0.0, abs=1e-12)


def test_smooth_loss_tilted_triangle():
    gt = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    pred = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 1]])
    triangle = MeshTopology([[0, 1, 2]], 3)
    expected = 1.0 / math.sqrt(3.0) + 1.0 / math.sqrt(2.0)
    assert smooth_loss(pred, gt, triangle).item() == pytest.approx(expected, abs=1e-9)


def test_smooth_loss_counts_degenerate_edges():
    gt = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0]])
    pred = np.array([[0.0, 0, 0], [0, 0, 0], [0, 1, 1]])
    counter = collections.Counter()
    loss = smooth_loss(pred, gt, MeshTopology([[0, 1, 2]], 3), counter)
    assert counter["degenerate_edges"] == 1
    assert math.isfinite(loss.item())


def test_joint_loss_skips_joints_behind_camera():
    target = make_target()
    pred = TETRA_VERTS.copy()
    pred[0, 2] = -1.0
    counter = collections.Counter()
    loss = joint_loss(
        pred,
        target.joints3d,
        target.joints2d,
        REGRESSOR,
        CAMERA,
        32,
        counter,
    )
    assert counter["skipped_projections"] == 1
    assert loss.item() > 0


def test_joint_loss_pixel_scale():
    target = make_target()
    gt_2d = target.joints2d + [3.2, 0.0]
    loss = joint_loss(TETRA_VERTS, target.joints3d, gt_2d, REGRESSOR, CAMERA, 32)
    assert loss.item() == pytest.approx(4 * 0.1 ** 2)


def test_zero_weights_skip_terms():
    target = make_target()
    pred = TETRA_VERTS + 0.1
    terms = total_loss(pred, target, LossWeights(0.0, 0.0))
    assert terms.joint is None and terms.smooth is None
    values = terms.values()
    assert math.isnan(values[1]) and math.isnan(values[2])
    assert terms.finite()
    assert csv_row(7, values)[2:4] == ["", ""]
    assert terms.total.item() == pytest.approx(terms.vertex.item())
    assert terms.vertex.item() == pytest.approx(12 * 0.01)


def test_total_loss_gradient():
    target = make_target()
    pred = Tensor(TETRA_VERTS + 0.05 * Rng(1).normal((4, 3)), requires_grad=True)
    error = grad_check(lambda p: total_loss(p, target, LossWeights()).total, [pred])
    assert error < 1e-5


def test_shape_mismatch():
    with pytest.raises(DimensionError):
        vertex_loss(np.zeros((3, 3)), np.zeros((4, 3)))


def test_epsilon_loss():
    assert epsilon_loss(np.ones((2, 3)), np.zeros((2, 3))).item() == 6.0


def rotation(angle, axis):
    c, s = math.cos(angle), math.sin(angle)
    i, j = [k for k in range(3) if k != axis]
    R = np.eye(3)
    R[i, i], R[i, j], R[j, i], R[j, j] = c, -s, s, c
    return R


def test_smooth_loss_rigid_invariance():
    pred = TETRA_VERTS + 0.1 * Rng(3).normal((4, 3))
    R = rotation(0.7, 0) @ rotation(-1.1, 2)
    offset = np.array([0.3, -2.0, 5.0])
    before = smooth_loss(pred, TETRA_VERTS, TETRA).item()
    after = smooth_loss(pred @ R.T + offset, TETRA_VERTS @ R.T + offset, TETRA).item()
    assert after == pytest.approx(before, abs=1e-9)


def test_smooth_loss_penalizes_rotated_prediction():
    center = TETRA_VERTS.mean(axis=0)
    pred = (TETRA_VERTS - center) @ rotation(0.3, 0).T + center
    assert smooth_loss(TETRA_VERTS, TETRA_VERTS, TETRA).item() == pytest.approx(0.0, abs=1e-12)
    assert smooth_loss(pred, TETRA_VERTS, TETRA).item() > 0.01


def test_joint_loss_one_hot_regressor():
    picked = [0, 1, 3]
    W = JointRegressor(np.eye(4)[picked])
    # Scaling about the camera centre keeps every projection in place.
    pred = 1.2 * TETRA_VERTS
    gt_j3d = regress_joints(TETRA_VERTS, W)
    loss = joint_loss(pred, gt_j3d, project(gt_j3d, CAMERA), W, CAMERA, 32)
    expected = vertex_loss(pred[picked], TETRA_VERTS[picked]).item()
    assert loss.item() == pytest.approx(expected, rel=1e-12)


def test_joint_loss_translation():
    verts = TETRA_VERTS.copy()
    verts[:, 2] = 3.0
    delta = 0.1
    gt_j3d = regress_joints(verts, REGRESSOR)
    pred = verts + [delta, 0.0, 0.0]
    loss = joint_loss(pred, gt_j3d, project(gt_j3d, CAMERA), REGRESSOR, CAMERA, 32)
    expected = 4 * delta ** 2 + 4 * (CAMERA.fx * delta / 3.0 / 32) ** 2
    assert loss.item() == pytest.approx(expected, rel=1e-9)
