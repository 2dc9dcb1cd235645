"""Per-disaster train/validation split.

Each disaster contributes ``floor(val_fraction * N)`` scenes to validation.
Membership comes from a seeded shuffle of that disaster's sorted scene ids,
using the portable generator in :mod:`dmk.rng`, so a given (manifest, seed)
always yields the same split.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

from .labels import DatasetManifest
from .rng import XorShift64Star


@dataclass(frozen=True)
class SplitManifest:
    train: tuple[str, ...]
    val: tuple[str, ...]
    seed: int
    val_fraction: float

    def write(self, out_dir: str | Path) -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / "train.txt").write_text("".join(f"{s}\n" for s in sorted(self.train)), encoding="utf-8")
        (out / "val.txt").write_text("".join(f"{s}\n" for s in sorted(self.val)), encoding="utf-8")
        meta = {
            "seed": self.seed,
            "val_fraction": self.val_fraction,
            "train": len(self.train),
            "val": len(self.val),
        }
        (out / "split.json").write_text(json.dumps(meta, indent=2) + "\n", encoding="utf-8")


def val_count(n: int, val_fraction: float) -> int:
    # exact rational arithmetic: 0.2 * 15 must give 3, not 3.0000000000000004
    return math.floor(Fraction(repr(val_fraction)) * n)


def _disaster_seed(seed: int, disaster: str) -> int:
    h = 1469598103934665603
    for byte in disaster.encode("utf-8"):
        h = ((h ^ byte) * 1099511628211) & ((1 << 64) - 1)
    return seed ^ h


def stratified_split(manifest: DatasetManifest, val_fraction: float = 0.2, seed: int = 42) -> SplitManifest:
    if not len(manifest):
        raise ValueError("cannot split an empty manifest")
    if not 0.0 < val_fraction < 1.0:
        raise ValueError("val_fraction must lie strictly between 0 and 1")
    groups: dict[str, list[str]] = {}
    for e in manifest.entries:
        groups.setdefault(e.disaster_name, []).append(e.scene_id)
    train, val = [], []
    for disaster in sorted(groups):
        ids = sorted(groups[disaster])
        # per-disaster stream (FNV-1a of the name) so adding a disaster does
        # not reshuffle the others
        XorShift64Star(_disaster_seed(seed, disaster)).shuffle(ids)
        k = val_count(len(ids), val_fraction)
        val.extend(ids[:k])
        train.extend(ids[k:])
    return SplitManifest(tuple(sorted(train)), tuple(sorted(val)), seed, val_fraction)
