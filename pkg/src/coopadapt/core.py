"""Domain types, SE(3) helpers and ego-frame projection."""
from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np


class InvariantError(ValueError):
    """Raised when a value violates a documented type invariant."""


class AgentType(str, enum.Enum):
    VEHICLE = "vehicle"
    INFRASTRUCTURE = "infrastructure"

    @property
    def index(self) -> int:
        return 0 if self is AgentType.VEHICLE else 1


class Domain(str, enum.Enum):
    SOURCE = "source"
    TARGET = "target"


def wrap_angle(a):
    """Map angles to (-pi, pi]."""
    a = np.asarray(a, dtype=np.float64)
    out = np.mod(a + np.pi, 2 * np.pi) - np.pi
    out = np.where(out <= -np.pi, out + 2 * np.pi, out)
    return out if out.ndim else float(out)


@dataclass(frozen=True)
class PointCloud:
    """N x 4 LiDAR returns: x, y, z in meters and intensity in [0, 1]."""

    points: np.ndarray

    def __post_init__(self):
        pts = np.asarray(self.points, dtype=np.float64)
        if pts.size == 0:
            pts = pts.reshape(0, 4)
        if pts.ndim != 2 or pts.shape[1] != 4:
            raise InvariantError(f"point cloud must be N x 4, got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise InvariantError("point cloud contains non-finite values")
        if pts.shape[0] and (pts[:, 3].min() < 0 or pts[:, 3].max() > 1):
            raise InvariantError("intensity must lie in [0, 1]")
        object.__setattr__(self, "points", pts)

    @classmethod
    def empty(cls) -> "PointCloud":
        return cls(np.zeros((0, 4)))

    @property
    def xyz(self) -> np.ndarray:
        return self.points[:, :3]

    @property
    def intensity(self) -> np.ndarray:
        return self.points[:, 3]

    def __len__(self):
        return self.points.shape[0]


@dataclass(frozen=True)
class Pose:
    """Rigid agent-to-world transform stored as a 4 x 4 homogeneous matrix."""

    matrix: np.ndarray

    def __post_init__(self):
        m = np.array(self.matrix, dtype=np.float64)
        if m.shape != (4, 4) or not np.all(np.isfinite(m)):
            raise InvariantError(f"pose must be a finite 4 x 4 matrix, got shape {m.shape}")
        r = m[:3, :3]
        if not np.allclose(r.T @ r, np.eye(3), atol=1e-9, rtol=0):
            raise InvariantError("pose rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > 1e-9:
            raise InvariantError("pose rotation must have det +1")
        if not np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0]):
            raise InvariantError("pose last row must be (0, 0, 0, 1)")
        m.setflags(write=False)
        object.__setattr__(self, "matrix", m)

    @classmethod
    def identity(cls) -> "Pose":
        return cls(np.eye(4))

    @classmethod
    def from_xyz_rpy(cls, x=0.0, y=0.0, z=0.0, roll=0.0, pitch=0.0, yaw=0.0) -> "Pose":
        """Pose from translation and intrinsic Z-Y-X (yaw, pitch, roll) angles.

        Positive pitch rotates +x towards -z (nose down), the usual LiDAR
        mounting convention, so a sensor tilted towards the ground has pitch > 0
        in this helper. ``SensorModel.pitch`` stores the signed elevation
        instead and negates it when building poses.
        """
        cr, sr = math.cos(roll), math.sin(roll)
        cp, sp = math.cos(pitch), math.sin(pitch)
        cy, sy = math.cos(yaw), math.sin(yaw)
        rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
        ry = np.array([[cp, 0, sp], [0, 1, 0], [-sp, 0, cp]])
        rx = np.array([[1, 0, 0], [0, cr, -sr], [0, sr, cr]])
        m = np.eye(4)
        m[:3, :3] = rz @ ry @ rx
        m[:3, 3] = (x, y, z)
        return cls(_orthonormalize(m))

    @property
    def rotation(self) -> np.ndarray:
        return self.matrix[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.matrix[:3, 3]

    @property
    def yaw(self) -> float:
        """Heading of the rotated +x axis in the ground plane."""
        return math.atan2(self.matrix[1, 0], self.matrix[0, 0])

    def __matmul__(self, other: "Pose") -> "Pose":
        return compose(self, other)


def _orthonormalize(m: np.ndarray) -> np.ndarray:
    u, _, vt = np.linalg.svd(m[:3, :3])
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, -1] *= -1
        r = u @ vt
    out = m.copy()
    out[:3, :3] = r
    out[3] = (0, 0, 0, 1)
    return out


def compose(a: Pose, b: Pose) -> Pose:
    """Pose of ``b`` expressed through ``a`` (matrix product a @ b)."""
    return Pose(_orthonormalize(a.matrix @ b.matrix))


def pose_inverse(p: Pose) -> Pose:
    r = p.rotation
    m = np.eye(4)
    m[:3, :3] = r.T
    m[:3, 3] = -r.T @ p.translation
    return Pose(m)


def relative_transform(t_from: Pose, t_to: Pose) -> np.ndarray:
    """Matrix mapping coordinates of frame ``t_from`` into frame ``t_to``."""
    return pose_inverse(t_to).matrix @ t_from.matrix


def transform_points(xyz: np.ndarray, m: np.ndarray) -> np.ndarray:
    xyz = np.asarray(xyz, dtype=np.float64).reshape(-1, 3)
    return xyz @ m[:3, :3].T + m[:3, 3]


def project_to_ego(cloud: PointCloud, t_agent: Pose, t_ego: Pose) -> PointCloud:
    """Express an agent's cloud in the ego frame: T_ego^-1 T_agent p.

    Intensity is carried through unchanged.
    """
    m = relative_transform(t_agent, t_ego)
    out = cloud.points.copy()
    out[:, :3] = transform_points(cloud.xyz, m)
    return PointCloud(out)


# -- boxes ------------------------------------------------------------------


@dataclass(frozen=True)
class Box:
    """Oriented 3D box; yaw is counter-clockwise from +x in the ground plane."""

    center: tuple
    size: tuple
    yaw: float
    score: Optional[float] = None

    def __post_init__(self):
        if len(self.center) != 3 or len(self.size) != 3:
            raise InvariantError("box center and size must have 3 components")
        if min(self.size) <= 0:
            raise InvariantError(f"box sizes must be positive, got {self.size}")
        if self.score is not None and not 0.0 <= self.score <= 1.0:
            raise InvariantError("box score must lie in [0, 1]")
        object.__setattr__(self, "center", tuple(float(v) for v in self.center))
        object.__setattr__(self, "size", tuple(float(v) for v in self.size))
        object.__setattr__(self, "yaw", float(wrap_angle(self.yaw)))

    def as_array(self) -> np.ndarray:
        return np.array([*self.center, *self.size, self.yaw])


@dataclass
class BoxSet:
    """Array-backed list of boxes: rows are (cx, cy, cz, l, w, h, yaw)."""

    boxes: np.ndarray = field(default_factory=lambda: np.zeros((0, 7)))
    scores: Optional[np.ndarray] = None

    def __post_init__(self):
        b = np.array(self.boxes, dtype=np.float64).reshape(-1, 7)
        if b.shape[0] and np.any(b[:, 3:6] <= 0):
            raise InvariantError("box sizes must be positive")
        b[:, 6] = wrap_angle(b[:, 6]) if b.shape[0] else b[:, 6]
        self.boxes = b
        if self.scores is not None:
            s = np.asarray(self.scores, dtype=np.float64).reshape(-1)
            if s.shape[0] != b.shape[0]:
                raise InvariantError("scores must align with boxes")
            self.scores = s

    @classmethod
    def from_boxes(cls, boxes: Sequence[Box]) -> "BoxSet":
        arr = np.array([b.as_array() for b in boxes]).reshape(-1, 7)
        scores = None
        if boxes and all(b.score is not None for b in boxes):
            scores = np.array([b.score for b in boxes])
        return cls(arr, scores)

    def __len__(self):
        return self.boxes.shape[0]

    def __iter__(self):
        for k, row in enumerate(self.boxes):
            score = None if self.scores is None else float(self.scores[k])
            yield Box(tuple(row[:3]), tuple(row[3:6]), row[6], score)

    def bev(self) -> np.ndarray:
        """(N, 5) footprints: x, y, l, w, yaw."""
        return self.boxes[:, [0, 1, 3, 4, 6]]

    def subset(self, mask) -> "BoxSet":
        scores = None if self.scores is None else self.scores[mask]
        return BoxSet(self.boxes[mask], scores)


def box_corners(boxes: np.ndarray) -> np.ndarray:
    """(N, 8, 3) corners; the first four are the bottom face, counter-clockwise."""
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 7)
    sx = np.array([1, -1, -1, 1, 1, -1, -1, 1]) * 0.5
    sy = np.array([1, 1, -1, -1, 1, 1, -1, -1]) * 0.5
    sz = np.array([-1, -1, -1, -1, 1, 1, 1, 1]) * 0.5
    lx = boxes[:, None, 3] * sx
    ly = boxes[:, None, 4] * sy
    lz = boxes[:, None, 5] * sz
    c, s = np.cos(boxes[:, 6])[:, None], np.sin(boxes[:, 6])[:, None]
    x = boxes[:, None, 0] + c * lx - s * ly
    y = boxes[:, None, 1] + s * lx + c * ly
    z = boxes[:, None, 2] + lz
    return np.stack([x, y, z], axis=-1)


def transform_boxes(boxes: BoxSet, t_from: Pose, t_to: Pose) -> BoxSet:
    """Re-express boxes given in frame ``t_from`` in frame ``t_to``.

    Centers move as points; yaw shifts by the planar part of the rotation.
    """
    m = relative_transform(t_from, t_to)
    out = boxes.boxes.copy()
    if len(out):
        out[:, :3] = transform_points(out[:, :3], m)
        out[:, 6] = wrap_angle(out[:, 6] + math.atan2(m[1, 0], m[0, 0]))
    return BoxSet(out, None if boxes.scores is None else boxes.scores.copy())


# -- collaborative samples --------------------------------------------------


@dataclass
class AgentFrame:
    cloud: PointCloud
    pose: Pose
    agent_type: AgentType
    is_ego: bool = False

    def __post_init__(self):
        self.agent_type = AgentType(self.agent_type)


@dataclass
class CollaborativeSample:
    """One frame: agents in a fixed order plus optional world-frame labels."""

    agents: list
    domain: Domain
    annotations: Optional[BoxSet] = None
    name: str = ""

    def __post_init__(self):
        self.domain = Domain(self.domain)
        if not self.agents:
            raise InvariantError("a collaborative sample needs at least one agent")
        n_ego = sum(a.is_ego for a in self.agents)
        if n_ego != 1:
            raise InvariantError(f"exactly one ego agent required, found {n_ego}")

    @property
    def ego(self) -> AgentFrame:
        return next(a for a in self.agents if a.is_ego)

    @property
    def n_agents(self) -> int:
        return len(self.agents)

    def ego_view(self):
        """Clouds of every agent in the ego frame (ego first) and ego-frame labels."""
        ego = self.ego
        ordered = [ego] + [a for a in self.agents if not a.is_ego]
        clouds = [project_to_ego(a.cloud, a.pose, ego.pose) for a in ordered]
        types = [a.agent_type for a in ordered]
        labels = None
        if self.annotations is not None:
            labels = transform_boxes(self.annotations, Pose.identity(), ego.pose)
        return clouds, types, labels
