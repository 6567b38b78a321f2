import numpy as np
import pytest

from geoseg.scenes import ClassTable, LabelSet, PointCloud, Scene


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def make_scene(
    rng: np.random.Generator,
    n: int = 40,
    num_classes: int = 4,
    scene_id: str = "t0",
    intensity_low: float = 0.2,
    intensity_high: float = 0.9,
) -> Scene:
    """Random scene with float32-exact values and uniform class labels."""
    pts = np.column_stack(
        [
            rng.uniform(-40.0, 40.0, size=(n, 3)),
            rng.uniform(intensity_low, intensity_high, size=n),
        ]
    )
    pts = pts.astype(np.float32).astype(np.float64)
    labels = rng.integers(0, num_classes, size=n).astype(np.uint16)
    return Scene(PointCloud(pts), LabelSet(labels), scene_id)


@pytest.fixture
def small_table():
    return ClassTable(("a", "b", "c", "d"), accumulable=frozenset({0, 1}))
