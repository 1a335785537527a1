"""H&E stain estimation, normalization, and deconvolution.

The estimator follows the classic optical-density recipe: drop near-white
pixels, find the two principal directions of the OD point cloud, and take
extreme percentile angles in that plane as the hematoxylin and eosin
vectors. Normalization rescales per-stain concentrations to a fixed
reference profile and recomposes RGB through the reference matrix.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .types import ImagePatch

DEFAULT_BETA = 0.15
DEFAULT_ALPHA_PERCENTILE = 1.0
DEFAULT_BACKGROUND = 255
MIN_TISSUE_PIXELS = 100


class NoTissueError(RuntimeError):
    """Raised when too few pixels survive the optical-density cutoff."""


class DegenerateStainError(ValueError):
    """Raised when the two stain vectors are (near-)collinear."""


@dataclass(frozen=True, eq=False)
class StainProfile:
    """Unit stain vectors (columns: hematoxylin, eosin) plus concentration scale.

    ``stain_matrix`` is 3x2 in OD space; ``max_concentrations`` holds the
    99th-percentile concentration per stain used for normalization.
    """

    stain_matrix: np.ndarray
    max_concentrations: np.ndarray

    def __post_init__(self):
        m = np.asarray(self.stain_matrix, dtype=float)
        c = np.asarray(self.max_concentrations, dtype=float)
        if m.shape != (3, 2):
            raise ValueError("stain_matrix must be 3x2")
        if c.shape != (2,):
            raise ValueError("max_concentrations must have 2 entries")
        norms = np.linalg.norm(m, axis=0)
        if np.any(np.abs(norms - 1.0) > 1e-9):
            raise ValueError("stain columns must be unit vectors")
        if np.any(m < 0):
            raise ValueError("stain matrix entries must be non-negative")
        if np.any(c <= 0):
            raise ValueError("max concentrations must be positive")
        m = m.copy()
        c = c.copy()
        m.setflags(write=False)
        c.setflags(write=False)
        object.__setattr__(self, "stain_matrix", m)
        object.__setattr__(self, "max_concentrations", c)

    def to_json(self) -> str:
        return json.dumps(
            {
                "stain_matrix": self.stain_matrix.tolist(),
                "max_concentrations": self.max_concentrations.tolist(),
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "StainProfile":
        d = json.loads(text)
        return cls(np.array(d["stain_matrix"]), np.array(d["max_concentrations"]))


@dataclass(frozen=True, eq=False)
class ConcentrationMap:
    """Per-pixel hematoxylin and eosin concentrations for one patch."""

    h: np.ndarray
    e: np.ndarray

    def __post_init__(self):
        h = np.asarray(self.h, dtype=float)
        e = np.asarray(self.e, dtype=float)
        if h.shape != e.shape or h.ndim != 2:
            raise ValueError("h and e channels must be matching 2-D arrays")
        object.__setattr__(self, "h", h)
        object.__setattr__(self, "e", e)

    @property
    def width(self) -> int:
        return self.h.shape[1]

    @property
    def height(self) -> int:
        return self.h.shape[0]


def _unit(v: np.ndarray) -> np.ndarray:
    return v / np.linalg.norm(v)

# widely used H&E reference vectors; configuration, not a truth claim
_REFERENCE_MATRIX = np.column_stack(
    [_unit(np.array([0.65, 0.70, 0.29])), _unit(np.array([0.07, 0.99, 0.11]))]
)
_REFERENCE_MAX_CONC = np.array([1.9705, 1.0308])


def reference_profile() -> StainProfile:
    """The fixed target profile that `normalize` maps patches onto."""
    return StainProfile(_REFERENCE_MATRIX, _REFERENCE_MAX_CONC)


def rgb_to_od(pixels: np.ndarray | ImagePatch, background_intensity: int = DEFAULT_BACKGROUND) -> np.ndarray:
    """Optical density per channel: -log10((I + 1) / (background + 1))."""
    if isinstance(pixels, ImagePatch):
        pixels = pixels.pixels
    if not 1 <= background_intensity <= 255:
        raise ValueError("background_intensity must be in [1, 255]")
    arr = np.asarray(pixels, dtype=float)
    return -np.log10((arr + 1.0) / (background_intensity + 1.0))


def od_to_rgb(od: np.ndarray, background_intensity: int = DEFAULT_BACKGROUND) -> np.ndarray:
    """Invert `rgb_to_od` with rounding and clamping to valid 8-bit values."""
    intensity = (background_intensity + 1.0) * np.power(10.0, -np.asarray(od, dtype=float)) - 1.0
    return np.clip(np.rint(intensity), 0, 255).astype(np.uint8)


def _solve_concentrations(od_flat: np.ndarray, matrix: np.ndarray) -> np.ndarray:
    """Least-squares concentrations for rows of OD vectors (no clamping)."""
    h, e = matrix[:, 0], matrix[:, 1]
    if np.linalg.norm(np.cross(h, e)) < 1e-6:
        raise DegenerateStainError("stain vectors are collinear")
    pinv = np.linalg.pinv(matrix)  # 2x3
    return od_flat @ pinv.T


def estimate_stain_matrix(
    od: np.ndarray,
    beta: float = DEFAULT_BETA,
    alpha_percentile: float = DEFAULT_ALPHA_PERCENTILE,
    min_tissue_pixels: int = MIN_TISSUE_PIXELS,
) -> StainProfile:
    """Estimate the per-patch stain profile from an OD raster.

    Pixels whose OD vector norm falls below ``beta`` are treated as
    background. The extreme angular percentiles of the remaining cloud in
    its principal plane become the stain vectors; the one with the larger
    red-channel OD is labeled hematoxylin.
    """
    flat = np.asarray(od, dtype=float).reshape(-1, 3)
    if flat.size == 0:
        raise ValueError("empty OD raster")
    tissue = flat[np.linalg.norm(flat, axis=1) >= beta]
    if len(tissue) < min_tissue_pixels:
        raise NoTissueError(
            f"only {len(tissue)} tissue pixels above OD {beta} (need {min_tissue_pixels})"
        )

    # principal plane of the (uncentered) OD cloud
    moment = tissue.T @ tissue
    eigvals, eigvecs = np.linalg.eigh(moment)
    plane = eigvecs[:, [2, 1]]  # top-2 directions, columns
    mean_od = tissue.mean(axis=0)
    for k in range(2):
        if plane[:, k] @ mean_od < 0:
            plane[:, k] = -plane[:, k]

    proj = tissue @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [alpha_percentile, 100.0 - alpha_percentile])
    v_lo = plane @ np.array([np.cos(lo), np.sin(lo)])
    v_hi = plane @ np.array([np.cos(hi), np.sin(hi)])

    first, second = (v_lo, v_hi) if v_lo[0] > v_hi[0] else (v_hi, v_lo)
    matrix = np.column_stack([first, second])
    matrix = np.clip(matrix, 0.0, None)  # tiny negative leakage from the angle sweep
    matrix /= np.linalg.norm(matrix, axis=0, keepdims=True)

    conc = _solve_concentrations(tissue, matrix)
    max_conc = np.percentile(conc, 99, axis=0)
    if np.any(max_conc <= 0):
        raise DegenerateStainError("non-positive 99th-percentile concentration")
    return StainProfile(matrix, max_conc)


def deconvolve(
    patch: ImagePatch,
    profile: StainProfile,
    background_intensity: int = DEFAULT_BACKGROUND,
    clamp_negative: bool = False,
) -> ConcentrationMap:
    """Split a patch into hematoxylin and eosin concentration channels.

    Values are the per-pixel least-squares solution and may be slightly
    negative; pass ``clamp_negative=True`` to floor them at zero.
    Feature extraction uses the unclamped values.
    """
    od = rgb_to_od(patch, background_intensity).reshape(-1, 3)
    conc = _solve_concentrations(od, profile.stain_matrix)
    if clamp_negative:
        conc = np.clip(conc, 0.0, None)
    h = conc[:, 0].reshape(patch.height, patch.width)
    e = conc[:, 1].reshape(patch.height, patch.width)
    return ConcentrationMap(h, e)


def compose(
    h: np.ndarray,
    e: np.ndarray,
    profile: StainProfile,
    background_intensity: int = DEFAULT_BACKGROUND,
) -> np.ndarray:
    """Forward model: concentration channels to 8-bit RGB pixels."""
    h = np.asarray(h, dtype=float)
    e = np.asarray(e, dtype=float)
    if h.shape != e.shape:
        raise ValueError("channel shapes differ")
    conc = np.stack([h.ravel(), e.ravel()], axis=1)
    od = conc @ profile.stain_matrix.T
    return od_to_rgb(od, background_intensity).reshape(h.shape + (3,))


def normalize(
    patch: ImagePatch,
    source: StainProfile,
    reference: StainProfile | None = None,
    background_intensity: int = DEFAULT_BACKGROUND,
) -> ImagePatch:
    """Map a patch from its own stain profile onto the reference profile."""
    if reference is None:
        reference = reference_profile()
    od = rgb_to_od(patch, background_intensity).reshape(-1, 3)
    conc = _solve_concentrations(od, source.stain_matrix)
    conc = np.clip(conc, 0.0, None)
    conc *= reference.max_concentrations / source.max_concentrations
    od_new = conc @ reference.stain_matrix.T
    pixels = od_to_rgb(od_new, background_intensity).reshape(patch.pixels.shape)
    return ImagePatch(pixels, patch.scale, patch.patient_id, patch.patch_id)
