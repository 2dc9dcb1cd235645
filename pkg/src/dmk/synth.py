"""Synthetic pre/post scene pairs standing in for xBD imagery.

Buildings are non-overlapping axis-aligned rectangles with at least one
background pixel between any two, so every footprint is its own 8-connected
component. Damage is drawn per building from the disaster's distribution and
rendered relative to the roof colour, which makes post-image brightness fall
with damage class:

* 0: untouched (post pixels equal pre pixels)
* 1: mild darkening plus dark speckle
* 2: strong darkening with a patch of roof replaced by debris
* 3: roof replaced by dark rubble texture

``ambiguity`` > 0 makes a damaged building look like a random damaged class,
which stands in for the visual similarity between damage levels.
"""

from __future__ import annotations

import logging
import re
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .imaging import write_image
from .labels import (
    BuildingAnnotation,
    DamageClass,
    DatasetManifest,
    ManifestEntry,
    Polygon,
    SceneLabel,
    write_manifest,
    write_scene_label,
)

logger = logging.getLogger(__name__)

MAX_PLACEMENT_TRIES = 200


@dataclass(frozen=True)
class DisasterSpec:
    name: str
    ground_color: tuple[int, int, int]
    roof_color: tuple[int, int, int]
    damage_distribution: tuple[float, float, float, float]
    building_count_range: tuple[int, int] = (3, 8)
    building_size_range: tuple[int, int] = (6, 16)
    ambiguity: float = 0.0

    def __post_init__(self):
        probs = tuple(float(p) for p in self.damage_distribution)
        if len(probs) != 4 or any(p < 0 for p in probs) or abs(sum(probs) - 1.0) > 1e-9:
            raise ValueError(f"{self.name}: damage_distribution must be 4 probabilities summing to 1")
        object.__setattr__(self, "damage_distribution", probs)
        lo, hi = self.building_count_range
        if lo < 0 or hi < lo:
            raise ValueError(f"{self.name}: empty building_count_range")
        lo, hi = self.building_size_range
        if lo < 2 or hi < lo:
            raise ValueError(f"{self.name}: building_size_range must satisfy 2 <= lo <= hi")
        if not 0.0 <= self.ambiguity <= 1.0:
            raise ValueError(f"{self.name}: ambiguity must lie in [0, 1]")


DEFAULT_SPECS = (
    # mostly destroyed, like the hurricane the real data singles out
    DisasterSpec("hurricane", (70, 110, 80), (200, 200, 205), (0.2, 0.15, 0.15, 0.5)),
    DisasterSpec("wildfire", (150, 130, 90), (190, 80, 60), (0.75, 0.03, 0.02, 0.2)),
    DisasterSpec("flood", (90, 90, 130), (210, 170, 110), (0.6, 0.25, 0.12, 0.03)),
    DisasterSpec("earthquake", (120, 120, 110), (100, 160, 200), (0.85, 0.07, 0.05, 0.03)),
)


@dataclass(frozen=True)
class SceneBundle:
    pre: np.ndarray
    post: np.ndarray
    label: SceneLabel


def slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-") or "disaster"


def _place(rng: np.random.Generator, side: int, count: int, size_range) -> list[tuple[int, int, int, int]]:
    lo, hi = size_range
    hi = min(hi, side - 2)
    lo = min(lo, hi)
    occupied = np.zeros((side, side), dtype=bool)
    rects = []
    for _ in range(count):
        for _ in range(MAX_PLACEMENT_TRIES):
            w, h = (int(v) for v in rng.integers(lo, hi + 1, size=2))
            x = int(rng.integers(1, side - w))
            y = int(rng.integers(1, side - h))
            # one-pixel moat keeps buildings apart even diagonally
            if not occupied[y - 1 : y + h + 1, x - 1 : x + w + 1].any():
                occupied[y : y + h, x : x + w] = True
                rects.append((x, y, w, h))
                break
        else:
            logger.warning("placed %d of %d buildings after bounded retries", len(rects), count)
            break
    return rects


def _render_damage(rng, roof: np.ndarray, level: int) -> np.ndarray:
    h, w, _ = roof.shape
    if level == 0:
        return roof
    if level == 1:
        out = roof * 0.78
        speckle = rng.random((h, w)) < 0.15
        out[speckle] *= 0.6
        return out
    if level == 2:
        out = roof * 0.55
        frac = rng.uniform(0.25, 0.45)
        ew = max(1, int(round(w * np.sqrt(frac))))
        eh = max(1, int(round(h * np.sqrt(frac))))
        ex = int(rng.integers(0, w - ew + 1))
        ey = int(rng.integers(0, h - eh + 1))
        out[ey : ey + eh, ex : ex + ew] = roof[ey : ey + eh, ex : ex + ew] * 0.3
        return out
    grey = roof.mean(axis=2, keepdims=True)
    texture = rng.uniform(0.6, 1.4, size=(h, w, 1))
    return 0.32 * texture * (0.5 * roof + 0.5 * grey)


def generate_scene(
    spec: DisasterSpec, side: int = 128, seed: int = 0, scene_id: str | None = None
) -> SceneBundle:
    if side < 64:
        raise ValueError("scene side must be >= 64")
    rng = np.random.default_rng(seed)
    scene_id = scene_id or f"{slug(spec.name)}_{seed}"

    ground = np.asarray(spec.ground_color, dtype=np.float64)
    pre = ground + rng.normal(0.0, 6.0, size=(side, side, 1))

    count = int(rng.integers(spec.building_count_range[0], spec.building_count_range[1] + 1))
    rects = _place(rng, side, count, spec.building_size_range)
    roof_color = np.asarray(spec.roof_color, dtype=np.float64)
    for x, y, w, h in rects:
        tone = rng.uniform(0.94, 1.06)
        pre[y : y + h, x : x + w] = roof_color * tone + rng.normal(0.0, 4.0, size=(h, w, 1))
    pre = np.clip(np.rint(pre), 0, 255)

    post = pre.copy()
    buildings = []
    for j, (x, y, w, h) in enumerate(rects):
        damage = int(rng.choice(4, p=spec.damage_distribution))
        shown = damage
        if damage > 0 and spec.ambiguity > 0 and rng.random() < spec.ambiguity:
            shown = int(rng.integers(1, 4))
        region = pre[y : y + h, x : x + w]
        post[y : y + h, x : x + w] = _render_damage(rng, region.copy(), shown)
        footprint = Polygon(((x, y), (x + w, y), (x + w, y + h), (x, y + h)))
        buildings.append(BuildingAnnotation(f"{scene_id}-b{j:03d}", footprint, DamageClass(damage)))
    post = np.clip(np.rint(post), 0, 255)
    label = SceneLabel(scene_id, spec.name, side, side, tuple(buildings))
    return SceneBundle(pre, post, label)


def scene_seed(seed: int, disaster_index: int, scene_index: int) -> int:
    return int(np.random.SeedSequence([seed, disaster_index, scene_index]).generate_state(1)[0])


def generate_scenes(
    specs: Sequence[DisasterSpec], scenes_per_disaster: int, seed: int = 0, side: int = 128
) -> list[SceneBundle]:
    """In-memory counterpart of :func:`generate_dataset`."""
    if not specs:
        raise ValueError("need at least one disaster spec")
    out = []
    for d, spec in enumerate(specs):
        for i in range(scenes_per_disaster):
            sid = f"{slug(spec.name)}_{i:05d}"
            out.append(generate_scene(spec, side, scene_seed(seed, d, i), scene_id=sid))
    return out


def generate_dataset(
    specs: Sequence[DisasterSpec],
    scenes_per_disaster: int,
    seed: int,
    out_dir: str | Path,
    side: int = 128,
    jobs: int = 1,
) -> DatasetManifest:
    """Write images, labels and ``manifest.csv`` under ``out_dir``."""
    if not specs:
        raise ValueError("need at least one disaster spec")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "labels").mkdir(parents=True, exist_ok=True)
    tasks = [
        (spec, f"{slug(spec.name)}_{i:05d}", scene_seed(seed, d, i))
        for d, spec in enumerate(specs)
        for i in range(scenes_per_disaster)
    ]

    def work(task):
        spec, sid, s = task
        bundle = generate_scene(spec, side, s, scene_id=sid)
        pre_rel, post_rel, label_rel = f"images/{sid}_pre.png", f"images/{sid}_post.png", f"labels/{sid}.json"
        write_image(bundle.pre, out / pre_rel)
        write_image(bundle.post, out / post_rel)
        write_scene_label(bundle.label, out / label_rel)
        return ManifestEntry(sid, spec.name, pre_rel, post_rel, label_rel)

    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            entries = list(pool.map(work, tasks))
    else:
        entries = [work(t) for t in tasks]
    manifest = DatasetManifest(tuple(entries), root=out)
    write_manifest(manifest, out / "manifest.csv")
    return manifest
