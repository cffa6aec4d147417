from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..geometry import NUM_POLYGON_POINTS, polygon_bounds


@dataclass
class TextInstance:
    polygon: np.ndarray  # (16, 2) normalized, top edge L->R then bottom edge R->L
    transcript: str
    ignore: bool = False

    def __post_init__(self):
        self.polygon = np.asarray(self.polygon, dtype=np.float64).reshape(NUM_POLYGON_POINTS, 2)

    @property
    def box(self) -> tuple[float, float, float, float]:
        return polygon_bounds(self.polygon)


@dataclass
class SpottingSample:
    image: np.ndarray  # (H, W, 3) float32 in [0, 1]
    instances: list[TextInstance] = field(default_factory=list)

    @property
    def size(self) -> tuple[int, int]:
        return self.image.shape[0], self.image.shape[1]

    def pixel_polygons(self) -> list[np.ndarray]:
        h, w = self.size
        return [inst.polygon * np.array([w, h]) for inst in self.instances]
