"""Scene annotations in the xBD label layout, dataset manifests and statistics.

Label files are JSON::

    {"metadata": {"disaster": ..., "width": W, "height": H, "id": ...},
     "features": {"xy": [{"wkt": "POLYGON ((...))",
                          "properties": {"feature_type": "building",
                                         "uid": ..., "subtype": ...}}]}}

Footprints are pixel-space WKT polygons. ``subtype`` is absent on
pre-disaster labels and may be ``"un-classified"`` on post-disaster ones; both
parse to ``damage=None``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import re
from collections import Counter
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Sequence

logger = logging.getLogger(__name__)

Point = tuple[float, float]
Ring = tuple[Point, ...]

UNCLASSIFIED = "un-classified"


class LabelError(ValueError):
    """Raised for malformed label files, WKT or manifests."""


class DamageClass(IntEnum):
    NO_DAMAGE = 0
    MINOR_DAMAGE = 1
    MAJOR_DAMAGE = 2
    DESTROYED = 3

    @property
    def label(self) -> str:
        return _DAMAGE_NAMES[self]

    @classmethod
    def from_label(cls, name: str) -> "DamageClass":
        try:
            return _DAMAGE_BY_NAME[name]
        except KeyError:
            raise LabelError(f"unknown damage subtype {name!r}") from None


_DAMAGE_NAMES = {
    DamageClass.NO_DAMAGE: "no-damage",
    DamageClass.MINOR_DAMAGE: "minor-damage",
    DamageClass.MAJOR_DAMAGE: "major-damage",
    DamageClass.DESTROYED: "destroyed",
}
_DAMAGE_BY_NAME = {v: k for k, v in _DAMAGE_NAMES.items()}


def damage_to_mask_value(damage: DamageClass | int) -> int:
    """Annotation ordinal (0-3) to dense mask value (1-4); 0 is background."""
    value = int(damage)
    if not 0 <= value <= 3:
        raise ValueError(f"damage ordinal out of range: {value}")
    return value + 1


def mask_value_to_damage(value: int) -> DamageClass:
    if not 1 <= value <= 4:
        raise ValueError(f"mask value {value} is not a damage class")
    return DamageClass(value - 1)


@dataclass(frozen=True)
class Polygon:
    exterior: Ring
    holes: tuple[Ring, ...] = ()

    def __post_init__(self):
        object.__setattr__(self, "exterior", _as_ring(self.exterior))
        object.__setattr__(self, "holes", tuple(_as_ring(h) for h in self.holes))

    @property
    def rings(self) -> tuple[Ring, ...]:
        return (self.exterior,) + self.holes

    def bounds(self) -> tuple[float, float, float, float]:
        xs = [p[0] for p in self.exterior]
        ys = [p[1] for p in self.exterior]
        return min(xs), min(ys), max(xs), max(ys)

    def area(self) -> float:
        """Signed-free area: exterior minus holes."""
        return abs(ring_signed_area(self.exterior)) - sum(
            abs(ring_signed_area(h)) for h in self.holes
        )

    def clamped(self, width: float, height: float) -> "Polygon":
        def clamp(ring):
            return tuple((min(max(x, 0.0), width), min(max(y, 0.0), height)) for x, y in ring)

        return Polygon(clamp(self.exterior), tuple(clamp(h) for h in self.holes))

    def to_wkt(self) -> str:
        return format_wkt_polygon(self)


def _as_ring(points: Iterable[Sequence[float]]) -> Ring:
    ring = tuple((float(p[0]), float(p[1])) for p in points)
    if len(ring) < 3:
        raise LabelError(f"ring needs at least 3 vertices, got {len(ring)}")
    for x, y in ring:
        if not (math.isfinite(x) and math.isfinite(y)):
            raise LabelError("non-finite coordinate in ring")
    return ring


def ring_signed_area(ring: Sequence[Point]) -> float:
    total = 0.0
    n = len(ring)
    for i in range(n):
        x0, y0 = ring[i]
        x1, y1 = ring[(i + 1) % n]
        total += x0 * y1 - x1 * y0
    return total / 2.0


_NUMBER = r"[-+]?(?:\d+\.?\d*|\.\d+)(?:[eE][-+]?\d+)?|[-+]?(?:nan|inf|infinity)"
_WKT_HEAD = re.compile(r"^\s*POLYGON\s*(Z|M|ZM)?\s*", re.IGNORECASE)


def parse_wkt_polygon(text: str) -> Polygon:
    """Parse a WKT ``POLYGON`` into exterior and holes.

    A trailing vertex equal to the first is dropped, so rings come back open.
    Z/M ordinates are accepted and discarded.
    """
    head = _WKT_HEAD.match(text)
    if head is None:
        raise LabelError(f"not a WKT POLYGON: {text[:40]!r}")
    body = text[head.end():].strip()
    if body.upper() == "EMPTY":
        raise LabelError("empty polygon")
    if not (body.startswith("(") and body.endswith(")")):
        raise LabelError("polygon body must be parenthesised")
    inner = body[1:-1].strip()
    ring_texts = re.findall(r"\(([^()]*)\)", inner)
    skeleton = re.sub(r"\([^()]*\)", "R", inner)
    if not ring_texts or re.fullmatch(r"R(\s*,\s*R)*", skeleton) is None:
        raise LabelError(f"malformed ring list in {text[:60]!r}")

    rings = []
    for rt in ring_texts:
        points = []
        for vertex in rt.split(","):
            parts = vertex.split()
            if len(parts) not in (2, 3, 4) or not all(
                re.fullmatch(_NUMBER, p, re.IGNORECASE) for p in parts
            ):
                raise LabelError(f"malformed vertex {vertex.strip()!r}")
            x, y = float(parts[0]), float(parts[1])
            if not (math.isfinite(x) and math.isfinite(y)):
                raise LabelError(f"non-finite coordinate {vertex.strip()!r}")
            points.append((x, y))
        if len(points) > 1 and points[-1] == points[0]:
            points.pop()
        if len(set(points)) < 3:
            raise LabelError("ring has fewer than 3 distinct vertices")
        rings.append(tuple(points))
    return Polygon(rings[0], tuple(rings[1:]))


def _fmt(v: float) -> str:
    # repr round-trips doubles exactly; trim integral values to keep WKT tidy
    return str(int(v)) if v.is_integer() and abs(v) < 1e15 else repr(v)


def format_wkt_polygon(polygon: Polygon) -> str:
    parts = []
    for ring in polygon.rings:
        closed = ring + (ring[0],)
        parts.append("(" + ", ".join(f"{_fmt(x)} {_fmt(y)}" for x, y in closed) + ")")
    return "POLYGON (" + ", ".join(parts) + ")"


@dataclass(frozen=True)
class BuildingAnnotation:
    uid: str
    footprint: Polygon
    damage: DamageClass | None = None
    # raw subtype string when it did not map to a damage class ("un-classified")
    subtype: str | None = None

    @property
    def unclassified(self) -> bool:
        return self.damage is None and self.subtype == UNCLASSIFIED


@dataclass(frozen=True)
class SceneLabel:
    scene_id: str
    disaster_name: str
    width: int
    height: int
    buildings: tuple[BuildingAnnotation, ...] = ()

    def __post_init__(self):
        if self.width <= 0 or self.height <= 0:
            raise LabelError(f"image dimensions must be positive: {self.width}x{self.height}")
        object.__setattr__(self, "buildings", tuple(self.buildings))
        uids = [b.uid for b in self.buildings]
        if len(set(uids)) != len(uids):
            dupes = sorted(u for u, c in Counter(uids).items() if c > 1)
            raise LabelError(f"duplicate building uids: {dupes}")


def parse_scene_label(text: str) -> SceneLabel:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise LabelError(f"label is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise LabelError("label root must be an object")
    meta = doc.get("metadata")
    if not isinstance(meta, dict):
        raise LabelError("missing metadata object")
    for key in ("disaster", "width", "height", "id"):
        if key not in meta:
            raise LabelError(f"missing metadata field {key!r}")
    width, height = meta["width"], meta["height"]
    if not (isinstance(width, int) and isinstance(height, int)) or isinstance(width, bool):
        raise LabelError("metadata width/height must be integers")
    scene_id = str(meta["id"])

    features = doc.get("features", {})
    if not isinstance(features, dict) or not isinstance(features.get("xy", []), list):
        raise LabelError("features.xy must be a list")

    buildings = []
    for i, feat in enumerate(features.get("xy", [])):
        props = feat.get("properties", {}) if isinstance(feat, dict) else None
        if not isinstance(props, dict) or "wkt" not in feat:
            raise LabelError(f"feature {i} lacks wkt/properties")
        if props.get("feature_type", "building") != "building":
            continue
        polygon = parse_wkt_polygon(feat["wkt"])
        clamped = polygon.clamped(width, height)
        if clamped != polygon:
            logger.warning("scene %s feature %d: coordinates clamped to image bounds", scene_id, i)
        subtype = props.get("subtype")
        damage = None
        if subtype is not None and subtype != UNCLASSIFIED:
            damage = DamageClass.from_label(subtype)
        uid = str(props.get("uid", f"{scene_id}:{i}"))
        buildings.append(BuildingAnnotation(uid, clamped, damage, subtype))
    return SceneLabel(scene_id, str(meta["disaster"]), width, height, tuple(buildings))


def serialize_scene_label(label: SceneLabel) -> str:
    xy = []
    for b in label.buildings:
        props = {"feature_type": "building", "uid": b.uid}
        if b.damage is not None:
            props["subtype"] = b.damage.label
        elif b.subtype is not None:
            props["subtype"] = b.subtype
        xy.append({"wkt": format_wkt_polygon(b.footprint), "properties": props})
    doc = {
        "metadata": {
            "disaster": label.disaster_name,
            "width": label.width,
            "height": label.height,
            "id": label.scene_id,
        },
        "features": {"xy": xy},
    }
    return json.dumps(doc, indent=1)


def read_scene_label(path: str | Path) -> SceneLabel:
    return parse_scene_label(Path(path).read_text(encoding="utf-8"))


def write_scene_label(label: SceneLabel, path: str | Path) -> None:
    Path(path).write_text(serialize_scene_label(label), encoding="utf-8")


MANIFEST_HEADER = ["scene_id", "disaster", "pre_image", "post_image", "label"]


@dataclass(frozen=True)
class ManifestEntry:
    scene_id: str
    disaster_name: str
    pre_image: str
    post_image: str
    label: str


@dataclass(frozen=True)
class DatasetManifest:
    entries: tuple[ManifestEntry, ...]
    # directory that relative paths in entries are resolved against
    root: Path = field(default=Path("."), compare=False)

    def __post_init__(self):
        object.__setattr__(self, "entries", tuple(self.entries))
        ids = [e.scene_id for e in self.entries]
        if len(set(ids)) != len(ids):
            dupes = sorted(u for u, c in Counter(ids).items() if c > 1)
            raise LabelError(f"duplicate scene ids in manifest: {dupes}")

    def resolve(self, relpath: str) -> Path:
        p = Path(relpath)
        return p if p.is_absolute() else self.root / p

    def by_id(self) -> dict[str, ManifestEntry]:
        return {e.scene_id: e for e in self.entries}

    def __len__(self):
        return len(self.entries)


def read_manifest(path: str | Path) -> DatasetManifest:
    path = Path(path)
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != MANIFEST_HEADER:
            raise LabelError(f"manifest header must be {','.join(MANIFEST_HEADER)}, got {header}")
        entries = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(MANIFEST_HEADER):
                raise LabelError(f"{path}:{lineno}: expected 5 columns, got {len(row)}")
            entries.append(ManifestEntry(*row))
    return DatasetManifest(tuple(entries), root=path.parent)


def write_manifest(manifest: DatasetManifest, path: str | Path) -> None:
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(MANIFEST_HEADER)
        for e in manifest.entries:
            writer.writerow([e.scene_id, e.disaster_name, e.pre_image, e.post_image, e.label])


@dataclass
class DistributionReport:
    images_per_disaster: dict[str, int]
    class_counts: dict[int, int]
    class_counts_per_disaster: dict[str, dict[int, int]]
    # buildings-per-image -> number of images
    buildings_histogram: dict[int, int]
    unclassified: int = 0
    errors: dict[str, str] = field(default_factory=dict)

    @property
    def total_buildings(self) -> int:
        return sum(self.class_counts.values())

    def class_fractions(self) -> dict[int, float]:
        total = self.total_buildings
        return {k: (v / total if total else 0.0) for k, v in sorted(self.class_counts.items())}

    def to_dict(self) -> dict:
        return {
            "images_per_disaster": dict(sorted(self.images_per_disaster.items())),
            "class_counts": {str(k): v for k, v in sorted(self.class_counts.items())},
            "class_fractions": {str(k): round(v, 5) for k, v in self.class_fractions().items()},
            "class_counts_per_disaster": {
                d: {str(k): v for k, v in sorted(c.items())}
                for d, c in sorted(self.class_counts_per_disaster.items())
            },
            "buildings_histogram": {str(k): v for k, v in sorted(self.buildings_histogram.items())},
            "unclassified": self.unclassified,
            "errors": dict(sorted(self.errors.items())),
        }


def dataset_stats(
    manifest: DatasetManifest, labels: dict[str, SceneLabel] | None = None
) -> DistributionReport:
    """Per-disaster image counts, damage-class counts and building density.

    ``labels`` maps scene_id to an already parsed label; scenes missing from it
    are read from disk. Unreadable entries are recorded in ``errors`` and left
    out of every count. Buildings without a damage class count towards the
    density histogram but not the class counts.
    """
    labels = labels or {}
    images = Counter()
    classes = Counter()
    per_disaster: dict[str, Counter] = {}
    histogram = Counter()
    unclassified = 0
    errors = {}
    for entry in manifest.entries:
        label = labels.get(entry.scene_id)
        if label is None:
            try:
                label = read_scene_label(manifest.resolve(entry.label))
            except (OSError, LabelError) as exc:
                errors[entry.scene_id] = str(exc)
                continue
        images[entry.disaster_name] += 1
        histogram[len(label.buildings)] += 1
        bucket = per_disaster.setdefault(entry.disaster_name, Counter())
        for b in label.buildings:
            if b.damage is None:
                unclassified += 1
                continue
            classes[int(b.damage)] += 1
            bucket[int(b.damage)] += 1
    return DistributionReport(
        images_per_disaster=dict(images),
        class_counts=dict(classes),
        class_counts_per_disaster={d: dict(c) for d, c in per_disaster.items()},
        buildings_histogram=dict(histogram),
        unclassified=unclassified,
        errors=errors,
    )
