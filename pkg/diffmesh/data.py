""" Deterministic synthetic articulated-mesh dataset and its files. """

import dataclasses
import hashlib
import logging
import math
import os
import struct
import typing as t

import numpy as np

from diffmesh.config import ConfigSection, register_check
from diffmesh.errors import ConfigError, FormatError, ShapeError
from diffmesh.geometry import Camera, JointRegressor, MeshTopology, project, regress_joints
from diffmesh.losses import Target
from diffmesh.numcore import Rng
from diffmesh.parsers import Settings, transaction
from diffmesh.typing import Array


logger = logging.getLogger(__name__)

RECORD_MAGIC = b"DMS1"
DATASET_FORMAT_VERSION = 1
MANIFEST_NAME = "manifest.txt"
RECORDS_NAME = "records.bin"
SCALE_MARGIN = 1.05
MIN_TEMPLATE_VERTICES = 64
MIN_JOINTS = 6
DIGIT_COUNT = 5
KERNEL_WIDTH = 0.05
COVER_TOLERANCE = 1e-12

PALM_RADII = (0.25, 0.3, 0.08)
# Base point, direction, length, base radius per digit; the last is the thumb.
DIGITS = (
    ((-0.18, 0.26, 0.0), (-0.15, 1.0, 0.0), 0.32, 0.045),
    ((-0.06, 0.28, 0.0), (-0.05, 1.0, 0.0), 0.38, 0.048),
    ((0.06, 0.28, 0.0), (0.05, 1.0, 0.0), 0.36, 0.047),
    ((0.18, 0.26, 0.0), (0.15, 1.0, 0.0), 0.28, 0.042),
    ((0.22, -0.06, 0.0), (1.0, 0.7, 0.0), 0.26, 0.05),
)
DIGIT_TAPER = 0.7
CURL_AXIS_SIGN = -1.0


@ConfigSection.register_section("data")
@dataclasses.dataclass
class SyntheticSpec(ConfigSection):
    """Everything the synthetic dataset is a pure function of."""

    seed: int = 0
    sample_count: int = 2560
    train_fraction: float = 0.8
    vertex_count: int = 320
    joint_count: int = 16
    image_size: int = 32
    bend_max: float = math.radians(80)
    rotation_range: float = math.radians(30)
    translation_range: float = 0.2
    depth_min: float = 2.0
    depth_max: float = 4.0
    fx: float = 0.0
    fy: float = 0.0
    cx: float = 0.0
    cy: float = 0.0

    def __post_init__(self):
        # Zero intrinsics follow the image size.
        if self.fx == 0.0:
            self.fx = 1.25 * self.image_size
        if self.fy == 0.0:
            self.fy = 1.25 * self.image_size
        if self.cx == 0.0:
            self.cx = self.image_size / 2.0
        if self.cy == 0.0:
            self.cy = self.image_size / 2.0
        super().__post_init__()

    @register_check
    def feasible_template(self):
        if self.vertex_count < MIN_TEMPLATE_VERTICES:
            raise ConfigError(
                f"vertex_count must be at least {MIN_TEMPLATE_VERTICES}, "
                f"got {self.vertex_count}"
            )
        if self.joint_count < MIN_JOINTS:
            raise ConfigError(
                f"joint_count must be at least {MIN_JOINTS}, got {self.joint_count}"
            )

    @register_check
    def valid_ranges(self):
        if self.sample_count < 1 or self.image_size < 4:
            raise ConfigError("sample_count and image_size must be positive")
        if not 0.0 < self.train_fraction <= 1.0:
            raise ConfigError(f"train_fraction must lie in (0, 1], got {self.train_fraction}")
        if not 0.0 < self.depth_min <= self.depth_max:
            raise ConfigError("Depth range must satisfy 0 < depth_min <= depth_max")
        if self.bend_max < 0 or self.rotation_range < 0 or self.translation_range < 0:
            raise ConfigError("Pose ranges must be non-negative")

    @property
    def camera(self) -> Camera:
        return Camera(self.fx, self.fy, self.cx, self.cy)

    @property
    def train_count(self) -> int:
        return int(math.floor(self.sample_count * self.train_fraction))


@dataclasses.dataclass
class Template:
    """
    Canonical mesh with a per-vertex `part` (0 palm, 1..5 digits) and
    `axial` position along its digit (0 at the knuckle, 1 at the tip).
    """

    verts: Array
    topology: MeshTopology
    regressor: JointRegressor
    part: Array
    axial: Array


@dataclasses.dataclass
class Pose:
    """Two bend angles per digit, global Euler angles and translation."""

    bends: Array
    rotation: Array
    translation: Array

    @classmethod
    def canonical(cls, depth: float) -> "Pose":
        return cls(np.zeros((DIGIT_COUNT, 2)), np.zeros(3), np.array([0.0, 0.0, depth]))


@dataclasses.dataclass
class Sample:
    index: int
    image: Array
    depth: Array
    verts: Array
    joints3d: Array
    joints2d: Array
    camera: Camera

    @property
    def root(self) -> Array:
        return self.joints3d[0]


def _orient_outward(
    verts: Array, faces: t.List[t.List[int]], center: t.Callable[[Array], Array]
) -> t.List[t.List[int]]:
    # `center` maps a face centroid to the interior point it should face away from.
    oriented = []
    for a, b, c in faces:
        normal = np.cross(verts[b] - verts[a], verts[c] - verts[a])
        centroid = (verts[a] + verts[b] + verts[c]) / 3.0
        outward = normal @ (centroid - center(centroid)) > 0
        oriented.append([a, b, c] if outward else [a, c, b])
    return oriented


def _ring_faces(
    first: int, rings: int, segments: int, bottom: int, top: int
) -> t.List[t.List[int]]:
    faces = []
    for k in range(segments):
        faces.append([bottom, first + k, first + (k + 1) % segments])
    for r in range(rings - 1):
        lower = first + r * segments
        upper = lower + segments
        for k in range(segments):
            k1 = (k + 1) % segments
            faces.append([lower + k, upper + k, upper + k1])
            faces.append([lower + k, upper + k1, lower + k1])
    last = first + (rings - 1) * segments
    for k in range(segments):
        faces.append([top, last + (k + 1) % segments, last + k])
    return faces


def _palm() -> t.Tuple[Array, t.List[t.List[int]]]:
    rx, ry, rz = PALM_RADII
    points = [[0.0, -ry, 0.0]]
    for latitude in (-math.pi / 6, math.pi / 6):
        for k in range(6):
            longitude = 2.0 * math.pi * k / 6
            points.append(
                [
                    rx * math.cos(latitude) * math.cos(longitude),
                    ry * math.sin(latitude),
                    rz * math.cos(latitude) * math.sin(longitude),
                ]
            )
    points.append([0.0, ry, 0.0])
    verts = np.array(points)
    faces = _ring_faces(1, 2, 6, 0, 13)
    return verts, _orient_outward(verts, faces, lambda centroid: np.zeros(3))


def _digit_frame(index: int) -> t.Tuple[Array, Array, Array, float, float]:
    base, direction, length, radius = DIGITS[index]
    axis = np.array(direction) / np.linalg.norm(direction)
    side = np.cross(axis, [0.0, 0.0, 1.0])
    side /= np.linalg.norm(side)
    return np.array(base), axis, side, length, radius


def _digit(index: int) -> t.Tuple[Array, t.List[t.List[int]], Array]:
    base, axis, side, length, radius = _digit_frame(index)
    normal = np.cross(side, axis)
    points = [base - 0.6 * radius * axis]
    axial = [-0.6 * radius / length]
    for s in (0.0, 1.0):
        r = radius * (1.0 - (1.0 - DIGIT_TAPER) * s)
        for k in range(4):
            angle = 2.0 * math.pi * k / 4 + math.pi / 4
            points.append(
                base
                + s * length * axis
                + r * (math.cos(angle) * side + math.sin(angle) * normal)
            )
            axial.append(s)
    points.append(base + (length + 0.6 * radius * DIGIT_TAPER) * axis)
    axial.append(1.0 + 0.6 * radius * DIGIT_TAPER / length)
    verts = np.array(points)
    faces = _ring_faces(1, 2, 4, 0, 9)

    def on_axis(centroid):
        return base + np.clip((centroid - base) @ axis, 0.0, length) * axis

    return verts, _orient_outward(verts, faces, on_axis), np.array(axial)


def _longest_edge(verts: Array, faces: Array) -> t.Tuple[int, int]:
    edges = np.concatenate([faces[:, [0, 1]], faces[:, [1, 2]], faces[:, [2, 0]]])
    edges = np.sort(edges, axis=1)
    lengths = np.sum((verts[edges[:, 0]] - verts[edges[:, 1]]) ** 2, axis=1)
    candidates = edges[lengths == lengths.max()]
    a, b = min(map(tuple, candidates.tolist()))
    return a, b


def _split_edge(faces: t.List[t.List[int]], a: int, b: int, middle: int) -> t.List[t.List[int]]:
    out = []
    for face in faces:
        if a in face and b in face:
            for i in range(3):
                u, v, w = face[i], face[(i + 1) % 3], face[(i + 2) % 3]
                if {u, v} == {a, b}:
                    out.append([u, middle, w])
                    out.append([middle, v, w])
                    break
        else:
            out.append(face)
    return out


def generate_template(N: int, M: int) -> Template:
    """
    Build the canonical hand-like mesh: an ellipsoid palm and five tapered,
    capped digit tubes, refined by longest-edge bisection to exactly `N`
    vertices, plus a regressor for `M` joints (the wrist, then joints spread
    along the digits).
    """
    if N < MIN_TEMPLATE_VERTICES:
        raise ConfigError(f"A template needs at least {MIN_TEMPLATE_VERTICES} vertices, got {N}")
    if M < MIN_JOINTS:
        raise ConfigError(f"A template needs at least {MIN_JOINTS} joints, got {M}")
    palm_verts, palm_faces = _palm()
    parts = [palm_verts]
    faces = list(palm_faces)
    part = [0] * len(palm_verts)
    axial = [0.0] * len(palm_verts)
    offset = len(palm_verts)
    for d in range(DIGIT_COUNT):
        digit_verts, digit_faces, digit_axial = _digit(d)
        parts.append(digit_verts)
        faces.extend([[i + offset for i in face] for face in digit_faces])
        part.extend([d + 1] * len(digit_verts))
        axial.extend(digit_axial.tolist())
        offset += len(digit_verts)
    verts = list(np.concatenate(parts))
    while len(verts) < N:
        a, b = _longest_edge(np.array(verts), np.array(faces))
        middle = len(verts)
        verts.append((verts[a] + verts[b]) / 2.0)
        part.append(part[a])
        axial.append((axial[a] + axial[b]) / 2.0)
        faces = _split_edge(faces, a, b, middle)
    verts = np.array(verts)
    part = np.array(part)
    axial = np.array(axial)
    topology = MeshTopology(np.array(faces), N)
    return Template(verts, topology, _build_regressor(verts, part, M), part, axial)


def joint_anchors(M: int) -> t.Tuple[Array, Array]:
    """Anchor points of the `M` joints and the part each one belongs to."""
    anchors = [np.array([0.0, -PALM_RADII[1], 0.0])]
    owners = [0]
    remaining = M - 1
    for d in range(DIGIT_COUNT):
        count = remaining // DIGIT_COUNT + (1 if d < remaining % DIGIT_COUNT else 0)
        base, axis, _, length, _ = _digit_frame(d)
        for j in range(count):
            s = j / (count - 1) if count > 1 else 0.5
            anchors.append(base + s * length * axis)
            owners.append(d + 1)
    return np.array(anchors), np.array(owners)


def _build_regressor(verts: Array, part: Array, M: int) -> JointRegressor:
    anchors, owners = joint_anchors(M)
    weights = np.zeros((M, verts.shape[0]))
    for i, (anchor, owner) in enumerate(zip(anchors, owners)):
        members = np.nonzero(part == owner)[0]
        dist2 = np.sum((verts[members] - anchor) ** 2, axis=1)
        kernel = np.exp(-(dist2 - dist2.min()) / (2.0 * KERNEL_WIDTH ** 2))
        weights[i, members] = kernel / kernel.sum()
    return JointRegressor(weights)


def rotation_matrix(axis: Array, angle: float) -> Array:
    """Rodrigues rotation about the unit vector `axis`."""
    x, y, z = axis
    K = np.array([[0.0, -z, y], [z, 0.0, -x], [-y, x, 0.0]])
    return np.eye(3) + math.sin(angle) * K + (1.0 - math.cos(angle)) * K @ K


def euler_matrix(angles: Array) -> Array:
    rx, ry, rz = angles
    return (
        rotation_matrix(np.array([0.0, 0.0, 1.0]), rz)
        @ rotation_matrix(np.array([0.0, 1.0, 0.0]), ry)
        @ rotation_matrix(np.array([1.0, 0.0, 0.0]), rx)
    )


def _smoothstep(x: Array, low: float, high: float) -> Array:
    s = np.clip((x - low) / (high - low), 0.0, 1.0)
    return s * s * (3.0 - 2.0 * s)


def rotate_about(points: Array, pivot: Array, axis: Array, angles: Array) -> Array:
    """Rotate each point about the line through `pivot` along unit `axis`."""
    offset = points - pivot
    cos = np.cos(angles)[:, None]
    sin = np.sin(angles)[:, None]
    along = (offset @ axis)[:, None] * axis
    return pivot + offset * cos + np.cross(axis, offset) * sin + along * (1.0 - cos)


def pose_mesh(template: Template, pose: Pose) -> Array:
    """
    Bend every digit at its knuckle and middle hinge, blending the angle
    smoothly across each hinge, then apply the global rotation and
    translation.
    """
    verts = template.verts.copy()
    for d in range(DIGIT_COUNT):
        members = np.nonzero(template.part == d + 1)[0]
        base, axis, side, length, _ = _digit_frame(d)
        s = template.axial[members]
        points = verts[members]
        # Distal hinge first, in the unbent frame, then the knuckle.
        for position, angle in ((0.5, pose.bends[d, 1]), (0.0, pose.bends[d, 0])):
            weight = _smoothstep(s, position - 0.1, position + 0.1)
            pivot = base + position * length * axis
            points = rotate_about(points, pivot, CURL_AXIS_SIGN * side, angle * weight)
        verts[members] = points
    return verts @ euler_matrix(pose.rotation).T + pose.translation


def draw_pose(spec: SyntheticSpec, rng: Rng) -> Pose:
    bends = rng.uniform((DIGIT_COUNT, 2)) * spec.bend_max
    rotation = (2.0 * rng.uniform(3) - 1.0) * spec.rotation_range
    shift = (2.0 * rng.uniform(2) - 1.0) * spec.translation_range
    depth = spec.depth_min + rng.uniform() * (spec.depth_max - spec.depth_min)
    return Pose(bends, rotation, np.array([shift[0], shift[1], depth]))


def rasterize(
    verts: Array, topo: MeshTopology, cam: Camera, size: int
) -> t.Tuple[Array, Array]:
    """
    Silhouette and nearest inverse depth at every pixel center. A pixel is
    covered when its center lies inside the projection of some face; the
    inverse depth is interpolated linearly in screen space.
    """
    pixels = project(verts, cam)
    inv_z = 1.0 / verts[:, 2]
    centers = (np.arange(size) + 0.5)[:, None]
    qx = np.broadcast_to(centers.T, (size, size)).reshape(-1)
    qy = np.broadcast_to(centers, (size, size)).reshape(-1)
    p0, p1, p2 = (pixels[topo.faces[:, i]] for i in range(3))
    area = (p1[:, 0] - p0[:, 0]) * (p2[:, 1] - p0[:, 1]) - (p1[:, 1] - p0[:, 1]) * (
        p2[:, 0] - p0[:, 0]
    )
    keep = np.abs(area) > 1e-15
    p0, p1, p2, area = p0[keep], p1[keep], p2[keep], area[keep]
    faces = topo.faces[keep]

    def signed_area(a, b):
        # Twice the signed area of (pixel center, a, b), one row per face.
        ax, ay = a[:, None, 0] - qx, a[:, None, 1] - qy
        bx, by = b[:, None, 0] - qx, b[:, None, 1] - qy
        return ax * by - ay * bx

    w0 = signed_area(p1, p2) / area[:, None]
    w1 = signed_area(p2, p0) / area[:, None]
    w2 = 1.0 - w0 - w1
    covered = (
        (w0 >= -COVER_TOLERANCE) & (w1 >= -COVER_TOLERANCE) & (w2 >= -COVER_TOLERANCE)
    )
    depth = (
        w0 * inv_z[faces[:, 0], None]
        + w1 * inv_z[faces[:, 1], None]
        + w2 * inv_z[faces[:, 2], None]
    )
    nearest = np.where(covered, depth, 0.0).max(axis=0, initial=0.0)
    silhouette = covered.any(axis=0).astype(np.float64)
    return silhouette.reshape(size, size), nearest.reshape(size, size)


def pose_sample(
    template: Template, spec: SyntheticSpec, index: int, pose: t.Optional[Pose] = None
) -> Sample:
    """
    Pose the template with the draws of sample `index` (or the given
    `pose`), render it and return the full record.
    """
    if pose is None:
        pose = draw_pose(spec, Rng(spec.seed, stream=index + 1))
    verts = pose_mesh(template, pose)
    camera = spec.camera
    silhouette, inv_depth = rasterize(verts, template.topology, camera, spec.image_size)
    joints3d = regress_joints(verts, template.regressor)
    return Sample(
        index=index,
        image=silhouette.astype(np.float32)[:, :, None],
        depth=(spec.depth_min * inv_depth).astype(np.float32)[:, :, None],
        verts=verts,
        joints3d=joints3d,
        joints2d=project(joints3d, camera),
        camera=camera,
    )


class Dataset:
    """
    Samples generated from one `SyntheticSpec`, the template they share, the
    normalization scale and the train/test split by index.
    """

    def __init__(
        self,
        spec: SyntheticSpec,
        samples: t.List[Sample],
        scale: float,
        template: t.Optional[Template] = None,
    ):
        self.spec = spec
        self.samples = samples
        self.scale = scale
        self.template = template or generate_template(spec.vertex_count, spec.joint_count)

    def __len__(self) -> int:
        return len(self.samples)

    @property
    def train_count(self) -> int:
        return min(self.spec.train_count, len(self.samples))

    def train(self) -> t.List[Sample]:
        return self.samples[: self.train_count]

    def test(self) -> t.List[Sample]:
        return self.samples[self.train_count :]

    def normalize(self, sample: Sample) -> Array:
        """Root-relative vertices divided by the dataset scale."""
        return (sample.verts - sample.root) / self.scale

    def denormalize(self, coords: Array, root: Array) -> Array:
        return coords * self.scale + root

    def target(self, sample: Sample) -> Target:
        return Target(
            verts=sample.verts,
            joints3d=sample.joints3d,
            joints2d=sample.joints2d,
            regressor=self.template.regressor,
            camera=sample.camera,
            topology=self.template.topology,
            image_size=self.spec.image_size,
        )

    def manifest(self) -> Settings:
        settings = Settings([("format_version", str(DATASET_FORMAT_VERSION))])
        settings.update(self.spec.to_settings())
        settings["record_count"] = str(len(self.samples))
        settings["train_count"] = str(self.train_count)
        settings["test_count"] = str(len(self.samples) - self.train_count)
        settings["scale"] = repr(self.scale)
        return settings


def normalization_scale(samples: t.Sequence[Sample]) -> float:
    """Root-relative coordinate extent of `samples`, with a margin."""
    extent = max(float(np.abs(s.verts - s.root).max()) for s in samples)
    return extent * SCALE_MARGIN


def generate_dataset(spec: SyntheticSpec, count: t.Optional[int] = None) -> Dataset:
    """Generate the first `count` samples of `spec` (all of them by default)."""
    template = generate_template(spec.vertex_count, spec.joint_count)
    count = spec.sample_count if count is None else min(count, spec.sample_count)
    samples = []
    for index in range(count):
        samples.append(pose_sample(template, spec, index))
        if (index + 1) % 256 == 0:
            logger.info("Generated %d of %d samples", index + 1, count)
    train = samples[: spec.train_count]
    if not train:
        logger.warning("No training samples, normalizing by all %d samples", len(samples))
        train = samples
    return Dataset(spec, samples, normalization_scale(train), template)


def record_size(spec: SyntheticSpec) -> int:
    pixels = spec.image_size ** 2
    return 8 + 4 * 2 * pixels + 8 * (3 * spec.vertex_count + 5 * spec.joint_count + 4)


def pack_sample(sample: Sample) -> bytes:
    return b"".join(
        [
            RECORD_MAGIC,
            struct.pack("<I", sample.index),
            np.ascontiguousarray(sample.image, dtype="<f4").tobytes(),
            np.ascontiguousarray(sample.depth, dtype="<f4").tobytes(),
            np.ascontiguousarray(sample.verts, dtype="<f8").tobytes(),
            np.ascontiguousarray(sample.joints3d, dtype="<f8").tobytes(),
            np.ascontiguousarray(sample.joints2d, dtype="<f8").tobytes(),
            np.ascontiguousarray(sample.camera.as_array(), dtype="<f8").tobytes(),
        ]
    )


def unpack_sample(blob: bytes, spec: SyntheticSpec) -> Sample:
    if blob[:4] != RECORD_MAGIC:
        raise FormatError("Bad record magic bytes")
    (index,) = struct.unpack("<I", blob[4:8])
    H, N, M = spec.image_size, spec.vertex_count, spec.joint_count
    offset = 8
    arrays = []
    for dtype, shape in (
        ("<f4", (H, H, 1)),
        ("<f4", (H, H, 1)),
        ("<f8", (N, 3)),
        ("<f8", (M, 3)),
        ("<f8", (M, 2)),
        ("<f8", (4,)),
    ):
        count = int(np.prod(shape))
        width = np.dtype(dtype).itemsize
        arrays.append(
            np.frombuffer(blob, dtype=dtype, count=count, offset=offset).reshape(shape)
        )
        offset += count * width
    image, depth, verts, joints3d, joints2d, camera = arrays
    return Sample(
        index=index,
        image=image.astype(np.float32),
        depth=depth.astype(np.float32),
        verts=verts.astype(np.float64),
        joints3d=joints3d.astype(np.float64),
        joints2d=joints2d.astype(np.float64),
        camera=Camera(*camera.tolist()),
    )


def checksum(path: str) -> str:
    digest = hashlib.sha256()
    with open(os.path.join(path, RECORDS_NAME), "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def write_dataset(path: str, dataset: Dataset):
    """Write the records file and then the manifest into directory `path`."""
    os.makedirs(path, exist_ok=True)
    with transaction(os.path.join(path, RECORDS_NAME)) as fh:
        for sample in dataset.samples:
            fh.write(pack_sample(sample))
    with transaction(os.path.join(path, MANIFEST_NAME), "w") as fh:
        dataset.manifest().dump(fh)


def read_dataset(path: str, spec: t.Optional[SyntheticSpec] = None) -> Dataset:
    """
    Read a dataset directory. When `spec` is given its sizes must match the
    manifest's.
    """
    manifest = Settings.read(os.path.join(path, MANIFEST_NAME))
    version = manifest.get("format_version")
    if version != str(DATASET_FORMAT_VERSION):
        raise FormatError(f"Unsupported dataset format version {version}")
    stored = SyntheticSpec.from_settings(manifest)
    if spec is not None:
        for key in ("vertex_count", "joint_count", "image_size"):
            if getattr(spec, key) != getattr(stored, key):
                raise ShapeError(
                    f"Dataset has {key} = {getattr(stored, key)}, expected {getattr(spec, key)}"
                )
    try:
        count = int(manifest["record_count"])
        scale = float(manifest["scale"])
    except (KeyError, ValueError) as exc:
        raise FormatError(f"Invalid manifest in {path}: {exc}")
    size = record_size(stored)
    with open(os.path.join(path, RECORDS_NAME), "rb") as fh:
        blob = fh.read()
    if len(blob) != count * size:
        raise FormatError(
            f"Records file holds {len(blob)} bytes, expected {count} records of {size}"
        )
    samples = [unpack_sample(blob[i * size : (i + 1) * size], stored) for i in range(count)]
    return Dataset(stored, samples, scale)
