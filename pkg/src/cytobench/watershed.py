"""Watershed nucleus detection on the hematoxylin channel.

The pipeline mirrors the classical recipe: deconvolve, subtract the
morphological-opening background, blur, threshold, split touching blobs by
watershed seeded at suppressed regional maxima, filter by physical area,
and trace each surviving component to a polygon.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np
from scipy import ndimage
from skimage.morphology import local_maxima, reconstruction
from skimage.segmentation import watershed as _watershed_flood

from .geometry import trace_mask
from .stain import StainProfile, deconvolve
from .types import CellInstance, ImagePatch, InstanceSource, LabelMap

# seeds come from regional maxima surviving this prominence cutoff
H_MAXIMA_DEPTH = 0.05

FOUR_CONNECTED = np.array([[0, 1, 0], [1, 1, 1], [0, 1, 0]], dtype=bool)

_CONFIG_KEYS = {
    "background_radius_um": "background_radius",
    "sigma_um": "sigma",
    "min_area_um2": "min_area",
    "max_area_um2": "max_area",
    "intensity_threshold": "intensity_threshold",
    "expansion_radius_um": "expansion_radius",
}


@dataclass(frozen=True)
class WatershedParams:
    """Physical-unit detection parameters (um, um^2, OD concentration)."""

    background_radius: float
    sigma: float
    min_area: float
    max_area: float
    intensity_threshold: float
    expansion_radius: float

    def __post_init__(self):
        values = (
            self.background_radius,
            self.sigma,
            self.min_area,
            self.max_area,
            self.intensity_threshold,
            self.expansion_radius,
        )
        if any(v <= 0 for v in values):
            raise ValueError("watershed parameters must be positive")
        if not self.min_area < self.max_area:
            raise ValueError("min_area must be below max_area")

    def to_config(self) -> str:
        lines = [f"{key}={getattr(self, attr)!r}" for key, attr in _CONFIG_KEYS.items()]
        return "\n".join(lines) + "\n"


def default_params() -> WatershedParams:
    return WatershedParams(
        background_radius=8.0,
        sigma=1.5,
        min_area=10.0,
        max_area=400.0,
        intensity_threshold=0.1,
        expansion_radius=5.0,
    )


def finetuned_params() -> WatershedParams:
    # background radius stays at its default; the tuned set leaves it untouched
    return WatershedParams(
        background_radius=8.0,
        sigma=2.5,
        min_area=20.0,
        max_area=400.0,
        intensity_threshold=0.15,
        expansion_radius=5.0,
    )


def parse_config_text(text: str) -> dict[str, float]:
    """Parse flat key=value lines; '#' starts a comment."""
    out: dict[str, float] = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key=value, got {raw!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        out[key] = float(value)
    return out


def load_params(path: str | Path, base: WatershedParams | None = None) -> WatershedParams:
    """Read watershed parameters from a key=value file, over a base set."""
    values = parse_config_text(Path(path).read_text())
    base = base or default_params()
    updates = {}
    for key, value in values.items():
        attr = _CONFIG_KEYS.get(key)
        if attr is None:
            continue
        updates[attr] = value
    return replace(base, **updates)


def _radius_px(radius_um: float, scale: float) -> float:
    # filter radii snap to a tenth of a pixel for reproducible footprints
    return round(radius_um / scale, 1)


def _disk_footprint(radius_px: float) -> np.ndarray:
    r = int(np.floor(radius_px))
    yy, xx = np.mgrid[-r : r + 1, -r : r + 1]
    return (yy * yy + xx * xx) <= radius_px * radius_px


def _seed_markers(smoothed: np.ndarray, mask: np.ndarray, depth: float) -> np.ndarray:
    """Label one marker per suppressed regional maximum inside the mask.

    Components of the mask that end up without any marker get one at their
    highest pixel so no thresholded blob is lost.
    """
    rec = reconstruction(smoothed - depth, smoothed, method="dilation")
    peaks = local_maxima(rec, connectivity=1) & mask
    markers, _ = ndimage.label(peaks, structure=FOUR_CONNECTED)

    blobs, n_blobs = ndimage.label(mask, structure=FOUR_CONNECTED)
    if n_blobs:
        has_seed = np.zeros(n_blobs + 1, dtype=bool)
        has_seed[np.unique(blobs[peaks])] = True
        next_label = int(markers.max()) + 1
        for b in range(1, n_blobs + 1):
            if has_seed[b]:
                continue
            inside = blobs == b
            values = np.where(inside, smoothed, -np.inf)
            r, c = np.unravel_index(int(np.argmax(values)), values.shape)
            markers[r, c] = next_label
            next_label += 1
    return markers


def segment_nuclei(patch: ImagePatch, profile: StainProfile, params: WatershedParams) -> LabelMap:
    """Run the detection pipeline up to the filtered label map."""
    conc = deconvolve(patch, profile, clamp_negative=True)
    h = conc.h

    bg_radius = _radius_px(params.background_radius, patch.scale)
    opened = ndimage.grey_opening(h, footprint=_disk_footprint(bg_radius))
    h_sub = h - opened

    sigma_px = _radius_px(params.sigma, patch.scale)
    smoothed = ndimage.gaussian_filter(h_sub, sigma=sigma_px)

    mask = smoothed > params.intensity_threshold
    labels = np.zeros(h.shape, dtype=np.int32)
    if mask.any():
        markers = _seed_markers(smoothed, mask, H_MAXIMA_DEPTH)
        flooded = _watershed_flood(-smoothed, markers=markers, connectivity=1, mask=mask)
        labels = _filter_components(flooded, params, patch.scale)
    return LabelMap(labels)


def _filter_components(flooded: np.ndarray, params: WatershedParams, scale: float) -> np.ndarray:
    """Split regions into 4-connected parts, fill holes, apply the area gate.

    Components are relabeled 1..K in top-left (row-major first pixel)
    order; hole filling only claims background pixels so labels stay
    disjoint.
    """
    px_area = scale * scale
    candidates: list[tuple[int, np.ndarray]] = []
    out = np.zeros_like(flooded, dtype=np.int32)
    for value in np.unique(flooded):
        if value == 0:
            continue
        pieces, n = ndimage.label(flooded == value, structure=FOUR_CONNECTED)
        for k in range(1, n + 1):
            piece = pieces == k
            filled = ndimage.binary_fill_holes(piece)
            piece = piece | (filled & (flooded == 0) & (out == 0))
            area = np.count_nonzero(piece) * px_area
            if params.min_area <= area <= params.max_area:
                first = int(np.argmax(piece))
                candidates.append((first, piece))
                out[piece] = -1  # reserve so later hole fills cannot overlap
    out[:] = 0
    candidates.sort(key=lambda item: item[0])
    for label, (_, piece) in enumerate(candidates, start=1):
        out[piece] = label
    return out


def detect_nuclei(
    patch: ImagePatch, profile: StainProfile, params: WatershedParams
) -> list[CellInstance]:
    """Detect nuclei and trace them to polygons, top-left first."""
    label_map = segment_nuclei(patch, profile, params)
    instances = []
    for k in range(1, label_map.num_labels + 1):
        # outer boundary only; holes claimed by other labels stay theirs in the map
        poly = trace_mask(ndimage.binary_fill_holes(label_map.mask(k)))
        instances.append(
            CellInstance(
                nucleus=poly,
                source=InstanceSource.PREDICTED,
                patch_id=patch.patch_id,
                instance_id=k,
            )
        )
    return instances
