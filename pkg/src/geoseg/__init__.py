"""Domain-generalized point cloud segmentation with category-level geometry learning.

Desk-scale reference implementation: numpy only, 64-bit floats, every
random draw routed through named Philox substreams so that runs are
bit-reproducible.
"""

__version__ = "0.1.0"

from geoseg.scenes import IGNORE_ID, ClassTable, LabelSet, PointCloud, Scene

__all__ = [
    "IGNORE_ID",
    "ClassTable",
    "LabelSet",
    "PointCloud",
    "Scene",
    "__version__",
]
