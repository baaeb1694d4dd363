import numpy as np
import pytest
import torch
from shapely.geometry import Point, Polygon

from rearrange.physics import ROBOT_FOOTPRINT
from rearrange.worldmodel import DISC, Footprint, transform_points

torch.set_num_threads(1)


def footprint_geometry(fp: Footprint, pose):
    """Shapely geometry of a footprint placed at ``pose`` (independent of the SAT kernels)."""
    pose = np.asarray(pose, float)
    if fp.kind == DISC:
        return Point(pose[0], pose[1]).buffer(fp.radius, quad_segs=64)
    pts = transform_points(pose, np.column_stack([fp.vertices, np.zeros(len(fp.vertices))]))
    return Polygon(pts[:, :2])


@pytest.fixture
def robot_fp():
    return ROBOT_FOOTPRINT


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
