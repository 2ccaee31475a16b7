""" Training objectives over predicted vertices. """

import dataclasses
import logging
import math
import typing as t

import numpy as np

from diffmesh.config import ConfigSection, register_check
from diffmesh.errors import ConfigError, DimensionError
from diffmesh.geometry import (
    Camera,
    JointRegressor,
    MeshTopology,
    face_normals,
    project,
    regress_joints,
)
from diffmesh.numcore import (
    Tensor,
    absolute,
    add,
    as_tensor,
    div,
    gather_rows,
    matmul,
    mul,
    scale,
    sqrt,
    square,
    sub,
    sum_all,
)
from diffmesh.typing import Array


logger = logging.getLogger(__name__)

DEGENERATE_EDGE = 1e-12
CSV_COLUMNS = ("step", "L_vertex", "L_joint", "L_smooth", "total")

_ONES = np.ones((3, 1))


@dataclasses.dataclass
class LossWeights(ConfigSection):
    """Weights of the joint and smoothness terms in the total loss."""

    lambda_joint: float = 1.0
    lambda_smooth: float = 0.05

    @register_check
    def non_negative(self):
        if self.lambda_joint < 0 or self.lambda_smooth < 0:
            raise ConfigError("Loss weights must be non-negative")


@dataclasses.dataclass
class Target:
    """Ground truth a vertex prediction is scored against."""

    verts: Array
    joints3d: Array
    joints2d: Array
    regressor: JointRegressor
    camera: Camera
    topology: MeshTopology
    image_size: int


class LossTerms(t.NamedTuple):
    """
    Loss terms of one prediction. `joint` and `smooth` are None when their
    weight is zero or the objective does not use them.
    """

    vertex: Tensor
    joint: t.Optional[Tensor]
    smooth: t.Optional[Tensor]
    total: Tensor

    def values(self) -> t.Tuple[float, float, float, float]:
        """Term values, NaN for terms that were not evaluated."""
        return tuple(math.nan if term is None else term.item() for term in self)

    def finite(self) -> bool:
        return all(math.isfinite(term.item()) for term in self if term is not None)


def _check_shapes(pred: Tensor, gt: Array):
    if tuple(pred.shape) != tuple(np.shape(gt)):
        raise DimensionError(f"Cannot compare shapes {pred.shape} and {np.shape(gt)}")


def vertex_loss(pred: t.Any, gt: Array) -> Tensor:
    """
    Sum over vertices of the squared distance to ground truth.

    Examples:

        >>> vertex_loss(np.array([[1.0, 1, 0], [0, 0, 2]]), np.zeros((2, 3))).item()
        6.0
    """
    pred = as_tensor(pred)
    _check_shapes(pred, gt)
    return sum_all(square(sub(pred, gt)))


def joint_loss(
    pred_v: t.Any,
    gt_j3d: Array,
    gt_j2d: Array,
    W: JointRegressor,
    cam: Camera,
    image_size: int,
    counter: t.Optional[t.Counter] = None,
) -> Tensor:
    """
    Squared 3D error of the regressed joints plus squared 2D error of their
    projections, the latter in units of the image side. Joints that fall
    behind the camera are left out of the 2D term and counted under
    `skipped_projections`.
    """
    joints = regress_joints(as_tensor(pred_v), W)
    _check_shapes(joints, gt_j3d)
    loss = sum_all(square(sub(joints, gt_j3d)))
    visible = np.nonzero(joints.data[:, 2] > 0.0)[0]
    skipped = joints.shape[0] - visible.size
    if skipped:
        logger.debug("Skipping %d joints behind the camera", skipped)
        if counter is not None:
            counter["skipped_projections"] += skipped
    if visible.size:
        pixels = project(gather_rows(joints, visible), cam)
        offset = scale(sub(pixels, np.asarray(gt_j2d)[visible]), 1.0 / image_size)
        loss = add(loss, sum_all(square(offset)))
    return loss


def smooth_loss(
    pred_v: t.Any,
    gt_v: Array,
    topo: MeshTopology,
    counter: t.Optional[t.Counter] = None,
) -> Tensor:
    """
    Sum over faces and their three edges of |unit edge · ground-truth face
    normal|. Edges shorter than 1e-12 contribute nothing and are counted
    under `degenerate_edges`.
    """
    pred_v = as_tensor(pred_v)
    _check_shapes(pred_v, gt_v)
    normals, _ = face_normals(gt_v, topo)
    loss = as_tensor(0.0)
    for j in range(3):
        start = topo.faces[:, j]
        end = topo.faces[:, (j + 1) % 3]
        edge = sub(gather_rows(pred_v, end), gather_rows(pred_v, start))
        raw = pred_v.data[end] - pred_v.data[start]
        degenerate = np.sum(raw * raw, axis=1, keepdims=True) < DEGENERATE_EDGE ** 2
        if degenerate.any() and counter is not None:
            counter["degenerate_edges"] += int(degenerate.sum())
        length = sqrt(add(matmul(square(edge), _ONES), degenerate.astype(np.float64)))
        dot = matmul(mul(edge, normals), _ONES)
        term = mul(div(absolute(dot), length), (~degenerate).astype(np.float64))
        loss = add(loss, sum_all(term))
    return loss


def total_loss(
    pred: t.Any,
    target: Target,
    weights: LossWeights,
    counter: t.Optional[t.Counter] = None,
) -> LossTerms:
    """
    Vertex loss plus the weighted joint and smoothness losses. Terms with a
    zero weight are not evaluated.
    """
    pred = as_tensor(pred)
    vertex = vertex_loss(pred, target.verts)
    total = vertex
    joint = smooth = None
    if weights.lambda_joint > 0:
        joint = joint_loss(
            pred,
            target.joints3d,
            target.joints2d,
            target.regressor,
            target.camera,
            target.image_size,
            counter,
        )
        total = add(total, scale(joint, weights.lambda_joint))
    if weights.lambda_smooth > 0:
        smooth = smooth_loss(pred, target.verts, target.topology, counter)
        total = add(total, scale(smooth, weights.lambda_smooth))
    return LossTerms(vertex, joint, smooth, total)


def epsilon_loss(eps_hat: t.Any, eps: Array) -> Tensor:
    """Squared error of a noise prediction, for the epsilon objective."""
    return vertex_loss(eps_hat, eps)


def csv_row(step: int, values: t.Sequence[float]) -> t.List[str]:
    """
    One loss log row: step, then vertex, joint, smoothness and total loss.
    Terms that were not evaluated (NaN) are written as empty cells.

    Examples:

        >>> csv_row(3, (1.0, 0.5, 0.25, 1.5125))
        ['3', '1', '0.5', '0.25', '1.5125']
        >>> csv_row(4, (2.0, math.nan, math.nan, 2.0))
        ['4', '2', '', '', '2']
    """
    return [str(step)] + ["" if math.isnan(value) else f"{value:.9g}" for value in values]
