"""Synthetic two-domain multi-agent LiDAR scenes and their on-disk format.

Scenes are flat worlds (ground at z = 0) populated with car boxes. A vehicle
agent is always present and acts as ego; an infrastructure agent sits on a
pole and looks into the scene. Every generator output is a pure function of
its configuration and seed.
"""
from __future__ import annotations

import dataclasses
import enum
import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from coopadapt import kernels
from coopadapt.core import (
    AgentFrame,
    AgentType,
    BoxSet,
    CollaborativeSample,
    Domain,
    PointCloud,
    Pose,
)

log = logging.getLogger(__name__)


class GenerationError(RuntimeError):
    pass


class IntensityModel(str, enum.Enum):
    CONSTANT = "constant"
    LAMBERTIAN = "lambertian"


@dataclass(frozen=True)
class SensorModel:
    """A scanning LiDAR.

    ``pitch`` is the boresight elevation in radians (negative looks down).
    ``vertical_fov`` is (lowest, highest) beam elevation in degrees relative
    to the boresight.
    """

    beams: int = 40
    horizontal_fov: float = 360.0
    max_range: float = 200.0
    mount_height: float = 1.8
    pitch: float = 0.0
    range_noise_sigma: float = 0.0
    dropout_prob: float = 0.0
    intensity_model: IntensityModel = IntensityModel.CONSTANT
    vertical_fov: tuple = (-25.0, 5.0)
    azimuth_step: float = 0.4
    ground_returns: bool = False

    def __post_init__(self):
        object.__setattr__(self, "intensity_model", IntensityModel(self.intensity_model))
        object.__setattr__(self, "vertical_fov", tuple(float(v) for v in self.vertical_fov))
        if self.beams < 1:
            raise ValueError("beams must be >= 1")
        if not 0 < self.horizontal_fov <= 360:
            raise ValueError("horizontal_fov must be in (0, 360]")
        if self.max_range <= 0:
            raise ValueError("max_range must be positive")
        if self.range_noise_sigma < 0:
            raise ValueError("range_noise_sigma must be >= 0")
        if not 0 <= self.dropout_prob < 1:
            raise ValueError("dropout_prob must be in [0, 1)")
        if self.azimuth_step <= 0:
            raise ValueError("azimuth_step must be positive")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["intensity_model"] = self.intensity_model.value
        d["vertical_fov"] = list(self.vertical_fov)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "SensorModel":
        return cls(**d)

    def digest(self) -> str:
        return _digest(self.to_dict())

    def ray_directions(self) -> np.ndarray:
        """Unit ray directions in the sensor frame, beam-major order."""
        if self.beams == 1:
            elev = np.array([0.5 * (self.vertical_fov[0] + self.vertical_fov[1])])
        else:
            elev = np.linspace(self.vertical_fov[0], self.vertical_fov[1], self.beams)
        n_az = max(1, int(round(self.horizontal_fov / self.azimuth_step)))
        if self.horizontal_fov >= 360.0:
            az = -180.0 + self.azimuth_step * np.arange(n_az)
        else:
            az = np.linspace(-0.5 * self.horizontal_fov, 0.5 * self.horizontal_fov, n_az)
        e, a = np.meshgrid(np.radians(elev), np.radians(az), indexing="ij")
        d = np.stack([np.cos(e) * np.cos(a), np.cos(e) * np.sin(a), np.sin(e)], axis=-1)
        return d.reshape(-1, 3)


def sensor_pose(agent_pose: Pose, sensor: SensorModel) -> Pose:
    """World pose of a sensor mounted on an agent standing on the ground."""
    mount = Pose.from_xyz_rpy(z=sensor.mount_height, pitch=-sensor.pitch)
    return agent_pose @ mount


@dataclass(frozen=True)
class SceneSpec:
    """Layout parameters for one scene."""

    extent: tuple = (38.0, 38.0)
    n_cars: int = 20
    size_mean: tuple = (4.5, 1.9, 1.6)
    size_std: tuple = (0.3, 0.1, 0.1)
    ego_pose: Pose = field(default_factory=Pose.identity)
    infra_pose: Optional[Pose] = None
    seed: int = 0
    margin: float = 0.4
    max_attempts: int = 200

    def __post_init__(self):
        if self.n_cars < 0:
            raise ValueError("n_cars must be >= 0")


_EGO_FOOTPRINT = (4.6, 1.9)


def sample_scene(spec: SceneSpec):
    """Place non-overlapping cars; returns (world-frame BoxSet, agent poses).

    The pose list starts with the ego vehicle; the infrastructure pose, when
    configured, follows.
    """
    rng = np.random.default_rng(spec.seed)
    hx, hy = spec.extent
    ego_xy = spec.ego_pose.translation[:2]
    obstacles = [[ego_xy[0], ego_xy[1], _EGO_FOOTPRINT[0] + 2 * spec.margin,
                  _EGO_FOOTPRINT[1] + 2 * spec.margin, spec.ego_pose.yaw]]
    if spec.infra_pose is not None:
        ip = spec.infra_pose.translation[:2]
        obstacles.append([ip[0], ip[1], 2.0, 2.0, 0.0])
    boxes = []
    for k in range(spec.n_cars):
        for _ in range(spec.max_attempts):
            l, w, h = np.maximum(rng.normal(spec.size_mean, spec.size_std), 0.5)
            yaw = rng.integers(4) * (np.pi / 2) + rng.normal(0.0, 0.15)
            x = rng.uniform(-hx, hx)
            y = rng.uniform(-hy, hy)
            cand = np.array([[x, y, l + 2 * spec.margin, w + 2 * spec.margin, yaw]])
            if not _inside_extent(x, y, l, w, yaw, hx, hy):
                continue
            if kernels.iou_matrix(cand, np.array(obstacles)).max(initial=0.0) > 0:
                continue
            obstacles.append(cand[0].tolist())
            boxes.append([x, y, h / 2, l, w, h, yaw])
            break
        else:
            raise GenerationError(
                f"could not place car {k} of {spec.n_cars} without overlap inside extent "
                f"{spec.extent} after {spec.max_attempts} attempts"
            )
    poses = [spec.ego_pose]
    if spec.infra_pose is not None:
        poses.append(spec.infra_pose)
    return BoxSet(np.array(boxes).reshape(-1, 7)), poses


def _inside_extent(x, y, l, w, yaw, hx, hy):
    c, s = abs(math.cos(yaw)), abs(math.sin(yaw))
    ex = 0.5 * (l * c + w * s)
    ey = 0.5 * (l * s + w * c)
    return abs(x) + ex <= hx and abs(y) + ey <= hy


def raycast(boxes: BoxSet, sensor: SensorModel, pose: Pose, seed, *,
            clutter_density: float = 0.0, reflectance_offset: float = 0.0,
            return_hits: bool = False):
    """Simulate one sweep of ``sensor`` at world pose ``pose``.

    Points are returned in the sensor frame. Box hits (and ground hits when
    the sensor reports them) get range noise and dropout; clutter returns
    are sampled uniformly on the ground and just above it.
    """
    rng = np.random.default_rng(seed)
    dirs_s = sensor.ray_directions()
    rot = pose.rotation
    dirs_w = dirs_s @ rot.T
    t, hit, cos_inc = kernels.raycast(pose.translation[None], dirs_w, boxes.boxes,
                                      sensor.max_range, sensor.ground_returns)
    keep = hit >= 0
    if sensor.ground_returns:
        keep |= hit == -2
    idx = np.nonzero(keep)[0]
    # draws happen for every candidate so the stream does not depend on masks
    noise = rng.normal(0.0, 1.0, idx.size) * sensor.range_noise_sigma
    drop = rng.random(idx.size) < sensor.dropout_prob
    rng_t = t[idx] + noise
    ok = (~drop) & (rng_t > 0) & (rng_t <= sensor.max_range)
    idx, rng_t = idx[ok], rng_t[ok]
    xyz = dirs_s[idx] * rng_t[:, None]
    refl = np.where(hit[idx] >= 0, 0.6, 0.3)
    if sensor.intensity_model is IntensityModel.LAMBERTIAN:
        inten = refl * np.clip(cos_inc[idx], 0.0, 1.0)
    else:
        inten = refl
    inten = np.clip(inten + reflectance_offset, 0.0, 1.0)
    pts = np.concatenate([xyz, inten[:, None]], axis=1)
    hits = hit[idx]

    if clutter_density > 0:
        clutter = _sample_clutter(rng, sensor, pose, clutter_density, reflectance_offset)
        pts = np.concatenate([pts, clutter], axis=0)
        hits = np.concatenate([hits, np.full(clutter.shape[0], -3)])
    cloud = PointCloud(pts)
    if return_hits:
        return cloud, hits
    return cloud


def _sample_clutter(rng, sensor, pose, density, offset, reach=40.0):
    """Uniform ground and low-obstacle returns within the sensor's footprint."""
    reach = min(reach, sensor.max_range)
    area = math.pi * reach * reach
    n = rng.poisson(density * area)
    r = reach * np.sqrt(rng.random(n))
    phi = rng.uniform(-np.pi, np.pi, n)
    z = np.where(rng.random(n) < 0.8, 0.0, rng.uniform(0.2, 2.5, n))
    origin = pose.translation
    world = np.stack([origin[0] + r * np.cos(phi), origin[1] + r * np.sin(phi), z], axis=1)
    local = (world - origin) @ pose.rotation
    dist = np.linalg.norm(local, axis=1)
    az = np.degrees(np.arctan2(local[:, 1], local[:, 0]))
    el = np.degrees(np.arcsin(np.clip(local[:, 2] / np.maximum(dist, 1e-9), -1, 1)))
    inside = (np.abs(az) <= 0.5 * sensor.horizontal_fov) & (dist <= sensor.max_range) & (dist > 0.5)
    inside &= (el >= sensor.vertical_fov[0]) & (el <= sensor.vertical_fov[1])
    local = local[inside]
    inten = np.clip(rng.uniform(0.0, 0.3, local.shape[0]) + offset, 0.0, 1.0)
    return np.concatenate([local, inten[:, None]], axis=1)


# -- domain profiles --------------------------------------------------------


@dataclass(frozen=True)
class DomainProfile:
    """Sensors per agent type plus the scene-level knobs of a domain."""

    name: str
    vehicle: SensorModel
    infrastructure: SensorModel
    clutter_density: float = 0.0
    reflectance_offset: float = 0.0
    n_cars: tuple = (15, 25)
    extent: tuple = (38.0, 38.0)
    with_infrastructure: bool = True

    def sensor_for(self, agent_type: AgentType) -> SensorModel:
        return self.vehicle if AgentType(agent_type) is AgentType.VEHICLE else self.infrastructure

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "vehicle": self.vehicle.to_dict(),
            "infrastructure": self.infrastructure.to_dict(),
            "clutter_density": self.clutter_density,
            "reflectance_offset": self.reflectance_offset,
            "n_cars": list(self.n_cars),
            "extent": list(self.extent),
            "with_infrastructure": self.with_infrastructure,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DomainProfile":
        d = dict(d)
        d["vehicle"] = SensorModel.from_dict(d["vehicle"])
        d["infrastructure"] = SensorModel.from_dict(d["infrastructure"])
        d["n_cars"] = tuple(d.get("n_cars", (15, 25)))
        d["extent"] = tuple(d.get("extent", (38.0, 38.0)))
        return cls(**d)

    def digest(self) -> str:
        return _digest(self.to_dict())

    def replace(self, **changes) -> "DomainProfile":
        return dataclasses.replace(self, **changes)


VEHICLE_LIDAR = SensorModel(beams=40, horizontal_fov=360.0, max_range=200.0,
                            mount_height=1.8, pitch=0.0, vertical_fov=(-25.0, 5.0))
INFRA_LIDAR = SensorModel(beams=300, horizontal_fov=100.0, max_range=280.0,
                          mount_height=6.0, pitch=math.radians(-15.0),
                          vertical_fov=(-20.0, 20.0))


def synthetic_sim() -> DomainProfile:
    """Clean simulator: identical mechanical LiDARs, no noise, flat intensity."""
    infra = dataclasses.replace(VEHICLE_LIDAR, mount_height=INFRA_LIDAR.mount_height)
    return DomainProfile(name="synthetic_sim", vehicle=VEHICLE_LIDAR, infrastructure=infra,
                         clutter_density=0.02, reflectance_offset=0.0)


def synthetic_real() -> DomainProfile:
    """Noisy real-world stand-in with a solid-state roadside LiDAR."""
    veh = dataclasses.replace(VEHICLE_LIDAR, range_noise_sigma=0.03, dropout_prob=0.15,
                              intensity_model=IntensityModel.LAMBERTIAN)
    infra = dataclasses.replace(INFRA_LIDAR, range_noise_sigma=0.03, dropout_prob=0.15,
                                intensity_model=IntensityModel.LAMBERTIAN)
    return DomainProfile(name="synthetic_real", vehicle=veh, infrastructure=infra,
                         clutter_density=0.15, reflectance_offset=0.2)


PROFILES = {"synthetic_sim": synthetic_sim, "synthetic_real": synthetic_real}


def get_profile(name_or_path) -> DomainProfile:
    """A built-in profile by name, or one loaded from a JSON file."""
    if str(name_or_path) in PROFILES:
        return PROFILES[str(name_or_path)]()
    path = Path(name_or_path)
    if not path.is_file():
        raise ValueError(f"unknown profile {name_or_path!r}; built-ins: {sorted(PROFILES)}")
    return DomainProfile.from_dict(json.loads(path.read_text()))


# -- frames and datasets ----------------------------------------------------


def frame_seed(seed: int, index: int) -> np.random.SeedSequence:
    return np.random.SeedSequence([int(seed) & (2**64 - 1), int(index)])


def generate_frame(profile: DomainProfile, seed: int, index: int, domain=Domain.SOURCE):
    """Build one CollaborativeSample as a pure function of (profile, seed, index)."""
    ss = frame_seed(seed, index)
    layout_ss, scene_ss, *sensor_ss = ss.spawn(4)
    rng = np.random.default_rng(layout_ss)
    ego = Pose.from_xyz_rpy(rng.uniform(-3, 3), rng.uniform(-3, 3), 0.0,
                            yaw=rng.uniform(-np.pi, np.pi))
    infra = None
    if profile.with_infrastructure:
        dist = rng.uniform(12.0, 25.0)
        bearing = rng.uniform(-np.pi, np.pi)
        ix = ego.translation[0] + dist * math.cos(bearing)
        iy = ego.translation[1] + dist * math.sin(bearing)
        facing = math.atan2(ego.translation[1] - iy, ego.translation[0] - ix)
        infra = Pose.from_xyz_rpy(ix, iy, 0.0, yaw=facing + rng.uniform(-0.3, 0.3))
    n_cars = int(rng.integers(profile.n_cars[0], profile.n_cars[1] + 1))
    scene_seed = int(np.random.default_rng(scene_ss).integers(2**63))
    spec = SceneSpec(extent=profile.extent, n_cars=n_cars, ego_pose=ego, infra_pose=infra,
                     seed=scene_seed)
    boxes, poses = sample_scene(spec)
    agents = []
    types = [AgentType.VEHICLE] + ([AgentType.INFRASTRUCTURE] if infra is not None else [])
    for j, (agent_pose, atype) in enumerate(zip(poses, types)):
        sensor = profile.sensor_for(atype)
        spose = sensor_pose(agent_pose, sensor)
        cloud = raycast(boxes, sensor, spose, sensor_ss[j],
                        clutter_density=profile.clutter_density,
                        reflectance_offset=profile.reflectance_offset)
        agents.append(AgentFrame(cloud, spose, atype, is_ego=(j == 0)))
    return CollaborativeSample(agents, domain, annotations=boxes, name=f"frame_{index:05d}")


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()[:16]


def write_frame(sample: CollaborativeSample, frame_dir: Path, sensor_digests=None):
    frame_dir.mkdir(parents=True, exist_ok=True)
    for j, agent in enumerate(sample.agents):
        adir = frame_dir / f"agent_{j}"
        adir.mkdir(exist_ok=True)
        try:
            agent.cloud.points.astype("<f4").tofile(adir / "points.bin")
            (adir / "pose.txt").write_text(
                " ".join(f"{v:.17g}" for v in agent.pose.matrix.reshape(-1)) + "\n")
            meta = {"agent_type": agent.agent_type.value, "is_ego": bool(agent.is_ego),
                    "sensor_hash": (sensor_digests or {}).get(agent.agent_type, "")}
            (adir / "meta.json").write_text(json.dumps(meta, sort_keys=True) + "\n")
        except OSError as exc:
            raise OSError(f"failed writing {adir}: {exc}") from exc
    if sample.annotations is not None:
        labels = [dict(zip(("cx", "cy", "cz", "l", "w", "h", "yaw"), map(float, row)))
                  for row in sample.annotations.boxes]
        try:
            (frame_dir / "labels.json").write_text(json.dumps(labels, indent=1) + "\n")
        except OSError as exc:
            raise OSError(f"failed writing {frame_dir / 'labels.json'}: {exc}") from exc


def generate_dataset(profile: DomainProfile, n_frames: int, out_dir, seed: int) -> dict:
    """Write ``n_frames`` samples plus ``manifest.json`` under ``out_dir``."""
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot create dataset directory {out}: {exc}") from exc
    if n_frames == 0:
        log.warning("generating a manifest-only dataset (0 frames) at %s", out)
    digests = {AgentType.VEHICLE: profile.vehicle.digest(),
               AgentType.INFRASTRUCTURE: profile.infrastructure.digest()}
    frames = []
    for i in range(n_frames):
        sample = generate_frame(profile, seed, i)
        write_frame(sample, out / sample.name, digests)
        frames.append({"name": sample.name, "n_agents": sample.n_agents})
    manifest = {
        "format": "coopadapt-dataset/1",
        "domain": profile.name,
        "frame_count": n_frames,
        "seed": int(seed),
        "profile_hash": profile.digest(),
        "profile": profile.to_dict(),
        "frames": frames,
    }
    path = out / "manifest.json"
    try:
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
    except OSError as exc:
        raise OSError(f"failed writing {path}: {exc}") from exc
    return manifest


def read_manifest(root) -> dict:
    path = Path(root) / "manifest.json"
    try:
        return json.loads(path.read_text())
    except OSError as exc:
        raise OSError(f"cannot read dataset manifest {path}: {exc}") from exc


def read_frame(frame_dir: Path, domain, load_labels=True) -> CollaborativeSample:
    agents = []
    for adir in sorted(frame_dir.glob("agent_*"), key=lambda p: int(p.name.split("_")[1])):
        pts = np.fromfile(adir / "points.bin", dtype="<f4").reshape(-1, 4).astype(np.float64)
        mat = np.array(adir.joinpath("pose.txt").read_text().split(), dtype=np.float64)
        meta = json.loads((adir / "meta.json").read_text())
        agents.append(AgentFrame(PointCloud(pts), Pose(mat.reshape(4, 4)),
                                 AgentType(meta["agent_type"]), bool(meta["is_ego"])))
    labels = None
    lpath = frame_dir / "labels.json"
    if load_labels and lpath.is_file():
        rows = json.loads(lpath.read_text())
        labels = BoxSet(np.array([[r[k] for k in ("cx", "cy", "cz", "l", "w", "h", "yaw")]
                                  for r in rows]).reshape(-1, 7))
    return CollaborativeSample(agents, domain, annotations=labels, name=frame_dir.name)


def load_dataset(root, domain=Domain.SOURCE, load_labels=True):
    """Read every frame listed in the manifest, in manifest order."""
    root = Path(root)
    manifest = read_manifest(root)
    return [read_frame(root / f["name"], Domain(domain), load_labels) for f in manifest["frames"]]
