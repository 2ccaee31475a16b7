""" Mesh topology, sampling, projection, alignment and error metrics. """

import collections
import dataclasses
import io
import logging
import typing as t

import numpy as np

from diffmesh.errors import (
    ConfigError,
    DimensionError,
    FormatError,
    ProjectionError,
    ShapeError,
    SizeError,
)
from diffmesh.numcore import Tensor, add, div, matmul, mul
from diffmesh.parsers import transaction
from diffmesh.typing import Array


logger = logging.getLogger(__name__)

DEGENERATE_AREA = 1e-12
METRIC_NAMES = ("E_J", "E_PJ", "E_V", "E_PV")


@dataclasses.dataclass
class MeshTopology:
    """Triangle faces (F×3, counter-clockwise) over `vertex_count` vertices."""

    faces: Array
    vertex_count: int

    def __post_init__(self):
        self.faces = np.asarray(self.faces, dtype=np.int64)
        if self.faces.ndim != 2 or self.faces.shape[1] != 3:
            raise ShapeError(f"Expected F×3 faces, got {self.faces.shape}")
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= self.vertex_count):
            raise ConfigError(f"Face index outside 0..{self.vertex_count - 1}")
        a, b, c = self.faces.T
        if np.any((a == b) | (b == c) | (a == c)):
            raise ConfigError("Face with repeated vertex index")

    def __len__(self) -> int:
        return self.faces.shape[0]


@dataclasses.dataclass
class JointRegressor:
    """Non-negative M×N weights whose rows are convex combinations."""

    weights: Array

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 2:
            raise ShapeError(f"Expected an M×N regressor, got {self.weights.shape}")
        if np.any(self.weights < 0.0):
            raise ConfigError("Joint regressor weights must be non-negative")
        if np.any(np.abs(self.weights.sum(axis=1) - 1.0) > 1e-9):
            raise ConfigError("Joint regressor rows must sum to 1")

    @property
    def joint_count(self) -> int:
        return self.weights.shape[0]

    @property
    def vertex_count(self) -> int:
        return self.weights.shape[1]


@dataclasses.dataclass(frozen=True)
class Camera:
    """Pinhole intrinsics in pixels."""

    fx: float
    fy: float
    cx: float
    cy: float

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ConfigError(f"Focal lengths must be positive, got {self.fx}, {self.fy}")

    def as_array(self) -> Array:
        return np.array([self.fx, self.fy, self.cx, self.cy], dtype=np.float64)


def farthest_point_sample(points: Array, k: int) -> Array:
    """
    Greedy farthest point sampling. Starts at index 0 and repeatedly picks the
    point with the largest distance to the selected set; ties go to the
    lowest index. Returns indices in selection order.

    Examples:

        >>> square = [[0, 0, 0], [1, 0, 0], [0, 1, 0], [1, 1, 0], [0.5, 0.5, 0]]
        >>> farthest_point_sample(np.array(square), 4).tolist()
        [0, 3, 1, 2]

        >>> farthest_point_sample(np.zeros((2, 3)), 3)
        Traceback (most recent call last):
          ...
        diffmesh.errors.SizeError: Cannot select 3 of 2 points
    """
    points = np.asarray(points, dtype=np.float64)
    count = points.shape[0]
    if k > count:
        raise SizeError(f"Cannot select {k} of {count} points")
    if k < 1:
        raise SizeError(f"Cannot select {k} points")
    selected = np.empty(k, dtype=np.int64)
    selected[0] = 0
    distance = np.sum((points - points[0]) ** 2, axis=1)
    distance[0] = -1.0
    for i in range(1, k):
        index = int(np.argmax(distance))
        selected[i] = index
        distance = np.minimum(distance, np.sum((points - points[index]) ** 2, axis=1))
        distance[selected[: i + 1]] = -1.0
    return selected


def nearest_selected(points: Array, selected: Array) -> Array:
    """
    For every point, the position in `selected` of its nearest selected
    point, ties going to the earlier selection.
    """
    points = np.asarray(points, dtype=np.float64)
    distance = np.sum(
        (points[:, None, :] - points[selected][None, :, :]) ** 2, axis=-1
    )
    return np.argmin(distance, axis=1)


def face_normals(verts: Array, topo: MeshTopology) -> t.Tuple[Array, Array]:
    """
    Unit normals of all faces by the right-hand rule, and a mask of the faces
    whose area is zero. Zero-area faces get the zero vector.

    Examples:

        >>> topo = MeshTopology([[0, 1, 2]], 3)
        >>> face_normals(np.array([[0, 0, 0], [1, 0, 0], [0, 1, 0]]), topo)[0].tolist()
        [[0.0, 0.0, 1.0]]
        >>> face_normals(np.array([[0, 0, 0], [0, 1, 0], [1, 0, 0]]), topo)[0].tolist()
        [[0.0, 0.0, -1.0]]
    """
    verts = np.asarray(verts, dtype=np.float64)
    v0, v1, v2 = (verts[topo.faces[:, i]] for i in range(3))
    cross = np.cross(v1 - v0, v2 - v0)
    length = np.linalg.norm(cross, axis=1)
    degenerate = length <= DEGENERATE_AREA
    normals = np.zeros_like(cross)
    normals[~degenerate] = cross[~degenerate] / length[~degenerate, None]
    if degenerate.any():
        logger.warning("%d degenerate faces have no normal", int(degenerate.sum()))
    return normals, degenerate


def regress_joints(
    verts: t.Union[Tensor, Array], W: JointRegressor
) -> t.Union[Tensor, Array]:
    """
    Joints as the regressor-weighted combination of vertices. Tensors stay
    differentiable, arrays stay arrays.
    """
    shape = verts.shape
    if len(shape) != 2 or shape[0] != W.vertex_count:
        raise DimensionError(
            f"Cannot regress {W.weights.shape} joints from vertices {shape}"
        )
    if isinstance(verts, Tensor):
        return matmul(W.weights, verts)
    return W.weights @ np.asarray(verts, dtype=np.float64)


_SELECT_XY = np.array([[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]])
_SELECT_ZZ = np.array([[0.0, 0.0], [0.0, 0.0], [1.0, 1.0]])


def project(
    j3d: t.Union[Tensor, Array], cam: Camera
) -> t.Union[Tensor, Array]:
    """
    Perspective projection of camera-frame points to pixels.

    Examples:

        >>> cam = Camera(100.0, 100.0, 16.0, 16.0)
        >>> project(np.array([[0.0, 0.0, 1.0], [0.1, 0.0, 1.0]]), cam).tolist()
        [[16.0, 16.0], [26.0, 16.0]]

        >>> project(np.array([[0.0, 0.0, 1.0], [0.0, 0.0, -1.0]]), cam)
        Traceback (most recent call last):
          ...
        diffmesh.errors.ProjectionError: Cannot project joint 1: depth -1.0 is not positive
    """
    values = j3d.data if isinstance(j3d, Tensor) else np.asarray(j3d, dtype=np.float64)
    if values.ndim != 2 or values.shape[1] != 3:
        raise ShapeError(f"Expected M×3 points, got {values.shape}")
    behind = np.nonzero(values[:, 2] <= 0.0)[0]
    if behind.size:
        raise ProjectionError(int(behind[0]), float(values[behind[0], 2]))
    focal = np.array([cam.fx, cam.fy])
    center = np.array([cam.cx, cam.cy])
    if isinstance(j3d, Tensor):
        ratio = div(matmul(j3d, _SELECT_XY), matmul(j3d, _SELECT_ZZ))
        return add(mul(ratio, focal), center)
    return values[:, :2] / values[:, 2:] * focal + center


def procrustes_transform(pred: Array, gt: Array) -> t.Tuple[float, Array, Array]:
    """
    Similarity transform `(s, R, t)` minimizing ‖s·R·pred + t − gt‖² with R a
    proper rotation. A rank-deficient cross-covariance falls back to a pure
    translation with a logged warning.
    """
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape or pred.ndim != 2 or pred.shape[1] != 3:
        raise DimensionError(f"Cannot align shapes {pred.shape} and {gt.shape}")
    if pred.shape[0] < 3:
        raise SizeError(f"Alignment needs at least 3 points, got {pred.shape[0]}")
    mu_pred = pred.mean(axis=0)
    mu_gt = gt.mean(axis=0)
    centered_pred = pred - mu_pred
    centered_gt = gt - mu_gt
    cov = centered_gt.T @ centered_pred / pred.shape[0]
    U, D, VH = np.linalg.svd(cov)
    var_pred = np.square(centered_pred).sum(axis=1).mean()
    if D[0] <= 1e-15 or D[1] <= 1e-12 * D[0] or var_pred <= 1e-30:
        logger.warning("Rank-deficient alignment, falling back to translation only")
        return 1.0, np.eye(3), mu_gt - mu_pred
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(VH) < 0:
        S[-1, -1] = -1.0
    R = U @ S @ VH
    s = float(np.trace(np.diag(D) @ S) / var_pred)
    return s, R, mu_gt - s * R @ mu_pred


def procrustes_align(pred: Array, gt: Array) -> Array:
    """
    Return `pred` after the best similarity alignment onto `gt`.

    Examples:

        >>> gt = np.array([[0.0, 0, 0], [1, 0, 0], [0, 2, 0], [0, 0, 3]])
        >>> pred = 2.0 * gt[:, [1, 0, 2]] * [1, -1, 1] + 5.0
        >>> float(np.abs(procrustes_align(pred, gt) - gt).max()) < 1e-9
        True
    """
    s, R, translation = procrustes_transform(pred, gt)
    return s * np.asarray(pred, dtype=np.float64) @ R.T + translation


def mean_distance(a: Array, b: Array) -> float:
    return float(np.linalg.norm(a - b, axis=1).mean())


def metrics(
    pred_v: Array,
    gt_v: Array,
    W: JointRegressor,
    root_relative: bool = False,
    root: int = 0,
) -> t.Dict[str, float]:
    """
    Mean joint and vertex errors, plain and after Procrustes alignment (the
    alignment estimated separately on joints and on vertices). With
    `root_relative`, joint `root` is subtracted from each point set before
    the plain errors.

    Examples:

        >>> W = JointRegressor(np.full((1, 4), 0.25))
        >>> gt = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
        >>> errors = metrics(gt + [3.0, 4.0, 0.0], gt, W)
        >>> round(errors["E_V"], 12), round(errors["E_PV"], 12)
        (5.0, 0.0)
    """
    pred_v = np.asarray(pred_v, dtype=np.float64)
    gt_v = np.asarray(gt_v, dtype=np.float64)
    if pred_v.shape != gt_v.shape:
        raise DimensionError(f"Cannot compare shapes {pred_v.shape} and {gt_v.shape}")
    pred_j = regress_joints(pred_v, W)
    gt_j = regress_joints(gt_v, W)
    if root_relative:
        pred_v, pred_j = pred_v - pred_j[root], pred_j - pred_j[root]
        gt_v, gt_j = gt_v - gt_j[root], gt_j - gt_j[root]
    errors = {
        "E_J": mean_distance(pred_j, gt_j),
        "E_V": mean_distance(pred_v, gt_v),
        "E_PV": mean_distance(procrustes_align(pred_v, gt_v), gt_v),
    }
    if pred_j.shape[0] >= 3:
        errors["E_PJ"] = mean_distance(procrustes_align(pred_j, gt_j), gt_j)
    else:
        errors["E_PJ"] = errors["E_J"]
    return {name: errors[name] for name in METRIC_NAMES}


def edge_face_counts(topo: MeshTopology) -> t.Counter:
    """
    Number of faces sharing every undirected edge. A watertight mesh has
    exactly 2 for every edge.

    Examples:

        >>> tetra = MeshTopology([[0, 2, 1], [0, 1, 3], [1, 2, 3], [0, 3, 2]], 4)
        >>> set(edge_face_counts(tetra).values())
        {2}
    """
    counts: t.Counter = collections.Counter()
    for face in topo.faces.tolist():
        for i in range(3):
            a, b = face[i], face[(i + 1) % 3]
            counts[(min(a, b), max(a, b))] += 1
    return counts


def dump_obj(stream: t.TextIO, verts: Array, topo: MeshTopology):
    """Write vertices and 1-based faces as OBJ lines, 9 significant digits."""
    for x, y, z in np.asarray(verts, dtype=np.float64).tolist():
        stream.write(f"v {x:.9g} {y:.9g} {z:.9g}\n")
    for a, b, c in (topo.faces + 1).tolist():
        stream.write(f"f {a} {b} {c}\n")


def write_obj(path: str, verts: Array, topo: MeshTopology):
    if len(verts) != topo.vertex_count:
        raise DimensionError(
            f"Mesh has {topo.vertex_count} vertices, got coordinates {np.shape(verts)}"
        )
    with transaction(path, "w") as stream:
        dump_obj(stream, verts, topo)


def load_obj(stream: t.TextIO, source: str = "") -> t.Tuple[Array, MeshTopology]:
    """
    Parse `v` and `f` lines of an OBJ stream. Other statements are ignored;
    face entries may carry `/`-separated texture and normal indices.

    Examples:

        >>> verts, topo = load_obj(io.StringIO("v 0 0 0\\nv 1 0 0\\nv 0 1 0\\nf 1 2 3\\n"))
        >>> verts.shape, topo.faces.tolist()
        ((3, 3), [[0, 1, 2]])
    """
    verts = []
    faces = []
    for linenum, line in enumerate(stream, 1):
        parts = line.split()
        if not parts:
            continue
        try:
            if parts[0] == "v":
                verts.append([float(value) for value in parts[1:4]])
            elif parts[0] == "f":
                if len(parts) != 4:
                    raise ValueError("only triangles are supported")
                faces.append([int(part.split("/")[0]) - 1 for part in parts[1:4]])
        except ValueError as exc:
            raise FormatError(f"Invalid OBJ statement at {source} line {linenum}: {exc}")
    return (
        np.array(verts, dtype=np.float64).reshape(-1, 3),
        MeshTopology(np.array(faces, dtype=np.int64).reshape(-1, 3), len(verts)),
    )


def read_obj(path: str) -> t.Tuple[Array, MeshTopology]:
    with open(path, "r", encoding="utf-8") as stream:
        return load_obj(stream, source=path)


def obj_text(verts: Array, topo: MeshTopology) -> str:
    stream = io.StringIO()
    dump_obj(stream, verts, topo)
    return stream.getvalue()

