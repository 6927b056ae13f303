import sys

import numpy as np
import pytest

from fgfas.core import DepthMap, LandmarkSet, Sample
from fgfas.pipeline.synth import synth_samples


def box_landmarks(regions: dict, extra=()) -> LandmarkSet:
    """Landmarks from ``{region: [(x, y), ...]}``."""
    points, index = [], {}
    for name, pts in regions.items():
        index[name] = tuple(range(len(points), len(points) + len(pts)))
        points.extend(pts)
    return LandmarkSet(np.array(points, dtype=float), index, extra)


def square(x0, y0, x1, y1):
    return [(x0, y0), (x1, y0), (x1, y1), (x0, y1)]


@pytest.fixture
def tiny_face():
    """A 16x16 face: skin square with eyes, nose and mouth boxes inside."""
    return box_landmarks(
        {
            "face_skin": square(2, 2, 13, 13),
            "eyes": square(4, 4, 11, 5),
            "nose": square(7, 6, 8, 9),
            "mouth": square(5, 10, 10, 11),
            "hair": square(2, 0, 13, 1),
        }
    )


def make_sample(landmarks, truth="bona_fide", attack_type=None, pai=(), size=16, depth=None, seed=0):
    rng = np.random.default_rng(seed)
    image = rng.integers(0, 256, size=(size, size, 3), dtype=np.uint8)
    if depth is None:
        depth = rng.random((size, size)).astype(np.float32)
    return Sample(image, landmarks, truth, DepthMap(depth), attack_type, list(pai), "t")


@pytest.fixture(scope="session")
def synth_items():
    return synth_samples(24, seed=5, size=64)


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    results = getattr(mod, "RESULTS", None)
    if not results:
        return
    terminalreporter.section("acceptance criteria")
    for key in sorted(results):
        terminalreporter.write_line(results[key])
