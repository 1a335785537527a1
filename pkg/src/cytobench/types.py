"""Core data carriers shared across the pipeline."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .geometry import Polygon


class InstanceClass(str, Enum):
    NUCLEUS_ONLY = "nucleus-only"
    WHOLE_CELL = "whole-cell"


class InstanceSource(str, Enum):
    GOLD = "gold"
    PREDICTED = "predicted"


@dataclass(frozen=True, eq=False)
class ImagePatch:
    """An RGB raster with a physical scale attached.

    ``pixels`` is (height, width, 3) uint8; ``scale`` is micrometers per
    pixel and is the single place physical units enter the pipeline.
    """

    pixels: np.ndarray
    scale: float
    patient_id: str = ""
    patch_id: str = ""

    def __post_init__(self):
        px = np.asarray(self.pixels)
        if px.ndim != 3 or px.shape[2] != 3:
            raise ValueError("pixels must be (height, width, 3)")
        if px.shape[0] <= 0 or px.shape[1] <= 0:
            raise ValueError("patch dimensions must be positive")
        if px.dtype != np.uint8:
            raise ValueError("pixels must be 8-bit per channel")
        if not self.scale > 0:
            raise ValueError("scale must be positive (um per px)")
        px = px.copy()
        px.setflags(write=False)
        object.__setattr__(self, "pixels", px)

    @property
    def width(self) -> int:
        return self.pixels.shape[1]

    @property
    def height(self) -> int:
        return self.pixels.shape[0]


@dataclass(frozen=True)
class PatchDescriptor:
    """Identity and geometry of a patch, without its pixels."""

    patch_id: str
    patient_id: str
    width: int
    height: int
    file_name: str = ""


@dataclass(frozen=True, eq=False)
class CellInstance:
    """A nucleus polygon with an optional whole-cell polygon around it."""

    nucleus: Polygon
    cell: Polygon | None = None
    confidence: float | None = None
    source: InstanceSource = InstanceSource.PREDICTED
    patch_id: str = ""
    instance_id: int = 0

    def __post_init__(self):
        if self.confidence is not None and not 0.0 <= self.confidence <= 1.0:
            raise ValueError("confidence must lie in [0, 1]")

    @property
    def category(self) -> InstanceClass:
        return InstanceClass.WHOLE_CELL if self.cell is not None else InstanceClass.NUCLEUS_ONLY

    def nucleus_centroid_in_cell(self) -> bool:
        """Check the pairing invariant; vacuously true without a cell."""
        if self.cell is None:
            return True
        cx, cy = self.nucleus.centroid()
        return self.cell.contains_point(cx, cy)


@dataclass(frozen=True)
class DatasetSplit:
    """Patient-disjoint partition of patch ids."""

    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15)

    def subset(self, name: str) -> tuple[str, ...]:
        if name not in ("train", "validation", "test"):
            raise ValueError(f"unknown split {name!r}")
        return getattr(self, name)


@dataclass(frozen=True, eq=False)
class LabelMap:
    """Integer label raster; 0 is background, objects are 1..K."""

    labels: np.ndarray

    def __post_init__(self):
        lab = np.asarray(self.labels)
        if lab.ndim != 2 or not np.issubdtype(lab.dtype, np.integer):
            raise ValueError("labels must be a 2-D integer array")
        object.__setattr__(self, "labels", lab)

    @property
    def width(self) -> int:
        return self.labels.shape[1]

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def num_labels(self) -> int:
        return int(self.labels.max(initial=0))

    def mask(self, k: int) -> np.ndarray:
        return self.labels == k
