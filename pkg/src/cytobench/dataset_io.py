"""COCO and GeoJSON interchange, patient-level splitting, CSV export.

All functions here are pure over their inputs; rejected or ambiguous
annotations are reported through the module logger rather than silently
dropped.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import random
from pathlib import Path
from typing import Iterable, NamedTuple

import numpy as np
from PIL import Image

from .geometry import GeometryError, Polygon
from .morphometry import FEATURE_NAMES, FeatureRecord
from .types import CellInstance, DatasetSplit, ImagePatch, InstanceSource, PatchDescriptor

logger = logging.getLogger(__name__)

NUCLEUS_CATEGORY = "nucleus"
CELL_CATEGORY = "cell"


class CocoParseError(ValueError):
    """Invalid COCO input; carries the byte offset for JSON syntax errors."""

    def __init__(self, message: str, byte_offset: int | None = None):
        super().__init__(message)
        self.byte_offset = byte_offset


class SplitError(ValueError):
    pass


def _segmentation_to_polygon(segmentation, ann_id) -> Polygon:
    if not isinstance(segmentation, list) or not segmentation:
        raise CocoParseError(f"annotation {ann_id}: unsupported segmentation encoding")
    rings = segmentation
    if isinstance(rings[0], (int, float)):
        rings = [rings]
    best = None
    for ring in rings:
        if len(ring) < 6 or len(ring) % 2 != 0:
            raise CocoParseError(f"annotation {ann_id}: bad polygon ring length {len(ring)}")
        poly = Polygon(np.asarray(ring, dtype=float).reshape(-1, 2))
        if best is None or poly.area() > best.area():
            best = poly
    if len(rings) > 1:
        logger.warning("annotation %s: %d rings, keeping the largest", ann_id, len(rings))
    return best


def parse_coco(
    json_text: str, source: InstanceSource | None = None
) -> tuple[list[PatchDescriptor], list[CellInstance]]:
    """Parse a COCO-style export into patch descriptors and cell instances.

    Categories named "nucleus" and "cell" (case-insensitive) identify the
    two classes. A nucleus is paired with a cell annotation when the
    nucleus centroid falls inside exactly one cell polygon of the same
    image; ambiguous or leftover annotations are logged. Self-intersecting
    polygons are rejected and reported by annotation id.

    ``source`` stamps every instance; when omitted, annotations carrying a
    confidence/score are treated as predicted and the rest as gold.
    """
    try:
        doc = json.loads(json_text)
    except json.JSONDecodeError as exc:
        raise CocoParseError(f"malformed JSON at byte {exc.pos}: {exc.msg}", exc.pos) from exc
    for key in ("images", "annotations", "categories"):
        if key not in doc:
            raise CocoParseError(f"missing top-level {key!r} array")

    cat_names = {}
    for cat in doc["categories"]:
        name = str(cat.get("name", "")).lower()
        if name in (NUCLEUS_CATEGORY, CELL_CATEGORY):
            cat_names[cat["id"]] = name

    patches: list[PatchDescriptor] = []
    image_meta: dict[int, PatchDescriptor] = {}
    for img in doc["images"]:
        file_name = str(img.get("file_name", ""))
        parts = Path(file_name).parts
        patch_id = Path(file_name).stem or str(img["id"])
        patient_id = parts[-2] if len(parts) >= 2 else ""
        desc = PatchDescriptor(
            patch_id=patch_id,
            patient_id=patient_id,
            width=int(img["width"]),
            height=int(img["height"]),
            file_name=file_name,
        )
        patches.append(desc)
        image_meta[img["id"]] = desc

    nuclei: dict[int, list[tuple[int, Polygon, float | None]]] = {}
    cells: dict[int, list[tuple[int, Polygon]]] = {}
    for ann in doc["annotations"]:
        ann_id = ann.get("id")
        image_id = ann.get("image_id")
        name = cat_names.get(ann.get("category_id"))
        if name is None:
            logger.warning("annotation %s: unknown category, skipped", ann_id)
            continue
        if image_id not in image_meta:
            raise CocoParseError(f"annotation {ann_id}: unknown image_id {image_id}")
        try:
            poly = _segmentation_to_polygon(ann.get("segmentation"), ann_id)
        except GeometryError as exc:
            logger.warning("annotation %s rejected: %s", ann_id, exc)
            continue
        if name == NUCLEUS_CATEGORY:
            conf = ann.get("confidence", ann.get("score"))
            conf = float(conf) if conf is not None else None
            nuclei.setdefault(image_id, []).append((ann_id, poly, conf))
        else:
            cells.setdefault(image_id, []).append((ann_id, poly))

    instances: list[CellInstance] = []
    for image_id, desc in image_meta.items():
        img_cells = cells.get(image_id, [])
        claimed: set[int] = set()
        for ann_id, nucleus, conf in nuclei.get(image_id, []):
            cx, cy = nucleus.centroid()
            hits = [k for k, (_, cp) in enumerate(img_cells) if cp.contains_point(cx, cy)]
            cell_poly = None
            if len(hits) == 1:
                cell_poly = img_cells[hits[0]][1]
                claimed.add(hits[0])
            elif len(hits) > 1:
                logger.warning(
                    "annotation %s: nucleus centroid inside %d cells, left unpaired",
                    ann_id,
                    len(hits),
                )
            stamp = source
            if stamp is None:
                stamp = InstanceSource.PREDICTED if conf is not None else InstanceSource.GOLD
            instances.append(
                CellInstance(
                    nucleus=nucleus,
                    cell=cell_poly,
                    confidence=conf,
                    source=stamp,
                    patch_id=desc.patch_id,
                    instance_id=int(ann_id),
                )
            )
        for k, (ann_id, _) in enumerate(img_cells):
            if k not in claimed:
                logger.warning("annotation %s: cell without a contained nucleus, skipped", ann_id)
    return patches, instances


def split_by_patient(
    patches: Iterable[PatchDescriptor],
    fractions: tuple[float, float, float] = (0.70, 0.15, 0.15),
    seed: int = 0,
) -> DatasetSplit:
    """Deterministic patient-disjoint split into train/validation/test.

    Patient groups are shuffled with the seed and assigned greedily to the
    split with the largest remaining patch deficit, so split sizes match
    the target fractions up to one patient-group of granularity.
    """
    if abs(sum(fractions) - 1.0) > 1e-9:
        raise SplitError("fractions must sum to 1")
    patches = list(patches)
    by_patient: dict[str, list[str]] = {}
    for p in patches:
        by_patient.setdefault(p.patient_id, []).append(p.patch_id)
    if len(by_patient) < 3:
        raise SplitError(f"need at least 3 patients to split, got {len(by_patient)}")

    order = sorted(by_patient)
    random.Random(seed).shuffle(order)
    total = len(patches)
    targets = [f * total for f in fractions]
    assigned: list[list[str]] = [[], [], []]
    counts = [0, 0, 0]
    for patient in order:
        group = sorted(by_patient[patient])
        deficits = [targets[i] - counts[i] for i in range(3)]
        dest = max(range(3), key=lambda i: (deficits[i], -i))
        assigned[dest].extend(group)
        counts[dest] += len(group)
    return DatasetSplit(
        train=tuple(assigned[0]),
        validation=tuple(assigned[1]),
        test=tuple(assigned[2]),
        fractions=tuple(fractions),
    )


def _ring(poly: Polygon) -> list[list[float]]:
    ring = poly.vertices.tolist()
    ring.append(ring[0])  # explicit closure
    return ring


def export_geojson(instances: Iterable[CellInstance]) -> str:
    """Serialize instances as a GeoJSON FeatureCollection.

    Whole-cell instances use the cell ring as the feature geometry and
    carry the nucleus ring in properties.nucleusGeometry, the layout
    QuPath uses for cell objects. Nucleus-only instances are plain
    detections.
    """
    features = []
    for inst in instances:
        if inst.cell is not None:
            geometry = {"type": "Polygon", "coordinates": [_ring(inst.cell)]}
            properties: dict = {
                "objectType": "cell",
                "nucleusGeometry": {"type": "Polygon", "coordinates": [_ring(inst.nucleus)]},
            }
        else:
            geometry = {"type": "Polygon", "coordinates": [_ring(inst.nucleus)]}
            properties = {"objectType": "detection"}
        if inst.confidence is not None:
            properties["confidence"] = inst.confidence
        properties["source"] = inst.source.value
        properties["instanceId"] = inst.instance_id
        features.append({"type": "Feature", "geometry": geometry, "properties": properties})
    return json.dumps({"type": "FeatureCollection", "features": features})


def parse_geojson(text: str, patch_id: str = "") -> list[CellInstance]:
    """Inverse of `export_geojson`; preserves vertex lists bit-exactly."""
    doc = json.loads(text)
    if doc.get("type") != "FeatureCollection":
        raise ValueError("expected a FeatureCollection")
    out: list[CellInstance] = []
    for feature in doc.get("features", []):
        props = feature.get("properties", {})
        outer = np.asarray(feature["geometry"]["coordinates"][0], dtype=float)
        confidence = props.get("confidence")
        source = InstanceSource(props.get("source", "predicted"))
        instance_id = int(props.get("instanceId", 0))
        if "nucleusGeometry" in props:
            nucleus = Polygon(np.asarray(props["nucleusGeometry"]["coordinates"][0], dtype=float))
            cell = Polygon(outer)
        else:
            nucleus = Polygon(outer)
            cell = None
        out.append(
            CellInstance(
                nucleus=nucleus,
                cell=cell,
                confidence=confidence,
                source=source,
                patch_id=patch_id,
                instance_id=instance_id,
            )
        )
    return out


class FeatureRow(NamedTuple):
    patch_id: str
    instance_id: int
    record: FeatureRecord


def export_feature_csv(rows: Iterable[FeatureRow]) -> str:
    """CSV with instance/patch ids followed by the 17 canonical feature columns."""
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(("instance_id", "patch_id") + FEATURE_NAMES)
    for row in rows:
        writer.writerow((row.instance_id, row.patch_id) + tuple(
            repr(v) for v in row.record.values()
        ))
    return buf.getvalue()


def read_feature_csv(text: str) -> list[FeatureRow]:
    reader = csv.reader(io.StringIO(text))
    header = next(reader)
    if tuple(header) != ("instance_id", "patch_id") + FEATURE_NAMES:
        raise ValueError("unexpected feature CSV header")
    out = []
    for line in reader:
        record = FeatureRecord(*(float(v) for v in line[2:]))
        out.append(FeatureRow(line[1], int(line[0]), record))
    return out


def load_patch_png(path: str | Path, scale: float, patient_id: str = "", patch_id: str = "") -> ImagePatch:
    with Image.open(path) as img:
        pixels = np.asarray(img.convert("RGB"), dtype=np.uint8)
    path = Path(path)
    return ImagePatch(
        pixels,
        scale,
        patient_id or (path.parent.name if path.parent.name else ""),
        patch_id or path.stem,
    )


def save_patch_png(patch: ImagePatch, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.asarray(patch.pixels), mode="RGB").save(path, format="PNG")
