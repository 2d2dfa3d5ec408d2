import numpy as np
import pytest
import torch

from coopadapt.core import AgentFrame, AgentType, BoxSet, CollaborativeSample, Domain, PointCloud, Pose
from coopadapt.detector.boxes import AnchorConfig
from coopadapt.detector.grid import GridConfig
from coopadapt.detector.model import DetectorConfig

torch.set_num_threads(1)


@pytest.fixture
def tiny_grid():
    # 8x8 pillars, stride 2 -> 4x4 feature grid
    return GridConfig(x_range=(-3.2, 3.2), y_range=(-3.2, 3.2), z_range=(-3.0, 1.0), cell=0.8, stride=2,
                      max_points=4)


@pytest.fixture
def tiny_det_cfg(tiny_grid):
    return DetectorConfig(grid=tiny_grid, anchors=AnchorConfig(size=(1.6, 0.8, 1.0), z=-1.0),
                          point_channels=3, channels=3)


def random_cloud(rng, n, lo=-3.0, hi=3.0):
    xyz = rng.uniform(lo, hi, (n, 3))
    xyz[:, 2] = rng.uniform(-2.5, 0.5, n)
    return PointCloud(np.column_stack([xyz, rng.uniform(0, 1, n)]))


def make_sample(rng, domain=Domain.SOURCE, n_points=12, labels=True, n_agents=2, name="s"):
    agents = [AgentFrame(random_cloud(rng, n_points), Pose.identity(), AgentType.VEHICLE, True)]
    for _ in range(n_agents - 1):
        agents.append(AgentFrame(random_cloud(rng, n_points), Pose.identity(), AgentType.INFRASTRUCTURE))
    ann = BoxSet(np.array([[rng.uniform(-1, 1), rng.uniform(-1, 1), -1.0, 1.6, 0.8, 1.0,
                            rng.uniform(-np.pi, np.pi)]])) if labels else None
    return CollaborativeSample(agents, domain, annotations=ann, name=name)


@pytest.fixture
def toy_samples():
    rng = np.random.default_rng(5)
    src = [make_sample(rng, Domain.SOURCE, name=f"s{k}") for k in range(4)]
    tgt = [make_sample(rng, Domain.TARGET, name=f"t{k}") for k in range(4)]
    return src, tgt


ACCEPTANCE = {}


@pytest.fixture
def verdict():
    """Record one pass/fail line per acceptance criterion, then assert it."""
    def record(n, ok, detail):
        line = f"criterion {n}: {'PASS' if ok else 'FAIL'}  {detail}"
        ACCEPTANCE[n] = line
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[n])
