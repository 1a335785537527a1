"""The 17 per-cell features: shape, nucleus-to-cell ratio, stain statistics.

Shape features are measured on the polygons themselves (no raster
round-trip); intensity statistics are taken over the rasterized cell mask
on unclamped concentration channels, so eosin minima may be negative.
"""

from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .geometry import GeometryError, Polygon, convex_hull, hull_diameter, hull_width, rasterize
from .stain import ConcentrationMap
from .types import CellInstance

FEATURE_NAMES = (
    "area_um2",
    "perimeter_um",
    "circularity",
    "solidity",
    "max_diameter_um",
    "min_diameter_um",
    "nucleus_cell_ratio",
    "h_median",
    "h_mean",
    "h_std",
    "h_max",
    "h_min",
    "e_median",
    "e_mean",
    "e_std",
    "e_max",
    "e_min",
)


@dataclass(frozen=True)
class FeatureRecord:
    area_um2: float
    perimeter_um: float
    circularity: float
    solidity: float
    max_diameter_um: float
    min_diameter_um: float
    nucleus_cell_ratio: float
    h_median: float
    h_mean: float
    h_std: float
    h_max: float
    h_min: float
    e_median: float
    e_mean: float
    e_std: float
    e_max: float
    e_min: float

    def values(self) -> tuple[float, ...]:
        """Feature values in canonical CSV column order."""
        return tuple(getattr(self, name) for name in FEATURE_NAMES)


assert tuple(f.name for f in fields(FeatureRecord)) == FEATURE_NAMES


def shape_features(poly: Polygon, scale: float) -> tuple[float, float, float, float]:
    """(area um^2, perimeter um, circularity, solidity) of one polygon."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    area_px = poly.area()
    perim_px = poly.perimeter()
    hull = convex_hull(poly.vertices)
    hull_area_px = 0.5 * float(
        np.sum(
            hull[:, 0] * np.roll(hull[:, 1], -1) - np.roll(hull[:, 0], -1) * hull[:, 1]
        )
    )
    area = area_px * scale * scale
    perimeter = perim_px * scale
    circularity = 4.0 * np.pi * area_px / (perim_px * perim_px)
    solidity = area_px / hull_area_px
    return area, perimeter, float(circularity), float(solidity)


def calipers_diameters(poly: Polygon, scale: float) -> tuple[float, float]:
    """(min diameter, max diameter) in um via rotating calipers on the hull."""
    if scale <= 0:
        raise ValueError("scale must be positive")
    hull = convex_hull(poly.vertices)
    return hull_width(hull) * scale, hull_diameter(hull) * scale


def stain_stats(mask: np.ndarray, conc: ConcentrationMap) -> tuple[float, ...]:
    """Ten intensity statistics over the masked pixels.

    Order: h median, mean, std, max, min, then the same for eosin.
    Standard deviation is the population one (ddof=0).
    """
    m = np.asarray(mask, dtype=bool)
    if m.shape != conc.h.shape:
        raise ValueError("mask and concentration map dimensions differ")
    if not m.any():
        raise ValueError("empty mask")
    out: list[float] = []
    for channel in (conc.h, conc.e):
        vals = channel[m]
        out += [
            float(np.median(vals)),
            float(vals.mean()),
            float(vals.std()),
            float(vals.max()),
            float(vals.min()),
        ]
    return tuple(out)


def feature_record(instance: CellInstance, conc: ConcentrationMap, scale: float) -> FeatureRecord:
    """All 17 features for a whole-cell instance."""
    if instance.cell is None:
        raise GeometryError("feature extraction needs a cell polygon")
    area, perimeter, circularity, solidity = shape_features(instance.cell, scale)
    min_d, max_d = calipers_diameters(instance.cell, scale)
    ratio = instance.nucleus.area() / instance.cell.area()
    mask = rasterize(instance.cell, conc.width, conc.height)
    stats = stain_stats(mask, conc)
    return FeatureRecord(area, perimeter, circularity, solidity, max_d, min_d, ratio, *stats)
