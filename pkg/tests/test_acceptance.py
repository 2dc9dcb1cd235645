"""Acceptance criteria 1-11.

Each test prints one ``[PASS]``/``[FAIL]`` line; the lines are repeated in the
terminal summary. Run just this suite with::

    pytest tests/test_acceptance.py -v
"""

from __future__ import annotations

import hashlib
import math
import time

import numpy as np
import pytest

from dmk.labels import Polygon
from dmk.metrics import (
    ConfusionMatrix,
    accumulate,
    combined_score,
    empty_prediction,
    label_to_mask,
    miou,
    score_dataset,
    weighted_f1,
)
from dmk.models import (
    ClassifierModel,
    DisasterClassifier,
    ExtraBranch,
    SegmentationNet,
    TowerConfig,
    TrainConfig,
    building_dataset,
    model_classifier,
    model_segmenter,
    run_two_step,
    train_classifier,
    train_disaster_classifier,
    train_segmenter,
)
from dmk.imaging import SsimParams, ssim
from dmk.raster import CropSpec, polygonize, rasterize
from dmk.split import stratified_split
from dmk.synth import DEFAULT_SPECS, DisasterSpec, generate_scenes

from conftest import make_manifest
from gradcases import CASES, worst_error
from oracles import miou_recount, random_convex_polygon, random_disjoint_rects, weighted_f1_recount

RESULTS: list[str] = []
_CACHE: dict[str, object] = {}


def report(number: int, passed: bool, detail: str) -> None:
    line = f"[{'PASS' if passed else 'FAIL'}] criterion {number:>2}: {detail}"
    RESULTS.append(line)
    print(line)


def once(key, fn):
    if key not in _CACHE:
        _CACHE[key] = fn()
    return _CACHE[key]


def digest(state: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for k in sorted(state):
        h.update(k.encode())
        h.update(np.ascontiguousarray(state[k]).tobytes())
    return h.hexdigest()


# ---------------------------------------------------------------- 1


TABLE4 = [((0.80482, 0.06091), 0.28408), ((0.84330, 0.5873), 0.6641), ((0.84330, 0.54679), 0.63574)]


def test_c01_combined_score():
    errs = [abs(combined_score(s, c) - want) for (s, c), want in TABLE4]
    ok = max(errs) <= 5e-6
    report(1, ok, f"combined-score rows, max |err| = {max(errs):.2e} (tol 5e-6)")
    assert ok


# ---------------------------------------------------------------- 2

TABLE1 = {
    "Guatemala Volcano": (18, 3),
    "Hurricane Florence": (319, 63),
    "Hurricane Harvey": (319, 63),
    "Hurricane Matthew": (238, 47),
    "Hurricane Michael": (343, 68),
    "Mexico Earthquake": (121, 24),
    "Midwest Flood": (279, 55),
    "Palu Tsunami": (113, 22),
    "Santa Rosa Wildfire": (226, 45),
    "Socal Fire": (823, 164),
}


def run_split():
    manifest = make_manifest({k: n for k, (n, _) in TABLE1.items()})
    return manifest, stratified_split(manifest, 0.2, seed=42)


def test_c02_split_reproduction():
    manifest, split = once("split", run_split)
    by_id = manifest.by_id()
    val = {k: 0 for k in TABLE1}
    for sid in split.val:
        val[by_id[sid].disaster_name] += 1
    train_michael = sum(1 for sid in split.train if by_id[sid].disaster_name == "Hurricane Michael")
    ok = (
        all(val[k] == v for k, (_, v) in TABLE1.items())
        and (len(split.train), len(split.val)) == (2245, 554)
        and train_michael == 275
    )
    report(2, ok, f"val counts {list(val.values())}, totals {len(split.train)}/{len(split.val)}, Michael train {train_michael}")
    assert ok


# ---------------------------------------------------------------- 3


def pixel_sets(mask):
    from dmk.raster import connected_components

    return [frozenset(map(tuple, c.pixels.tolist())) for c in connected_components(mask > 0)]


def test_c03_geometry_round_trip():
    rng = np.random.default_rng(2024)
    side = 64
    rect_ok = 0
    for _ in range(500):
        rects = random_disjoint_rects(rng, side, int(rng.integers(1, 9)))
        items = [
            (Polygon(((x, y), (x + w, y), (x + w, y + h), (x, y + h))), int(rng.integers(1, 5)))
            for x, y, w, h in rects
        ]
        mask = rasterize(items, side, side)
        out = polygonize(mask, min_area=1)
        want = {frozenset((r, c) for r in range(y, y + h) for c in range(x, x + w)) for x, y, w, h in rects}
        got = {frozenset(zip(*np.nonzero(rasterize([(p, 1)], side, side)))) for p, _ in out}
        got = {frozenset((int(r), int(c)) for r, c in s) for s in got}
        classes_ok = sorted(c for _, c in out) == sorted(c for _, c in items)
        rect_ok += got == want and classes_ok and np.array_equal(rasterize(out, side, side), mask)

    ious = []
    cell, grid = 20, 5
    n_scenes = 8  # 8 scenes x 25 cells = 200 polygons
    for _ in range(n_scenes):
        polys = []
        for i in range(grid):
            for j in range(grid):
                while True:
                    pts = random_convex_polygon(
                        rng, j * cell + cell / 2, i * cell + cell / 2, rng.uniform(3.5, cell / 2 - 1.5), n=int(rng.integers(5, 10))
                    )
                    p = Polygon(tuple(pts))
                    if p.area() >= 25:
                        break
                polys.append(p)
        w = h = cell * grid
        mask = rasterize([(p, 1) for p in polys], w, h)
        traced = [rasterize([(p, 1)], w, h) > 0 for p, _ in polygonize(mask, min_area=1)]
        for p in polys:
            orig = rasterize([(p, 1)], w, h) > 0
            best = max((np.sum(orig & t) / np.sum(orig | t) for t in traced), default=0.0)
            ious.append(best)
    ok = rect_ok == 500 and len(ious) == 200 and min(ious) >= 0.99
    report(3, ok, f"rect scenes exact {rect_ok}/500, convex polygons min IoU {min(ious):.4f} over {len(ious)} (>= 0.99)")
    assert ok


# ---------------------------------------------------------------- 4


def test_c04_metric_oracle():
    rng = np.random.default_rng(77)
    worst = 0.0
    for _ in range(100):
        k = int(rng.integers(2, 6))
        shape = tuple(int(v) for v in rng.integers(1, 9, size=2))
        gt, pred = rng.integers(0, k, (2, *shape))
        cm = accumulate(ConfusionMatrix(k), pred, gt)
        worst = max(
            worst,
            abs(miou(cm) - miou_recount(pred, gt, k)),
            abs(weighted_f1(cm) - weighted_f1_recount(pred, gt, k)),
        )
    ok = worst <= 1e-12
    report(4, ok, f"mIoU / weighted F1 vs brute-force recount on 100 pairs, max |err| = {worst:.2e} (tol 1e-12)")
    assert ok


# ---------------------------------------------------------------- 5


def test_c05_ssim():
    rng = np.random.default_rng(5)
    ident = max(abs(ssim(a, a) - 1.0) for a in (rng.uniform(0, 255, (int(rng.integers(11, 40)), 32, 3)) for _ in range(50)))
    c1 = SsimParams().c1
    const = ssim(np.zeros((32, 32, 3)), np.full((32, 32, 3), 255.0))
    sym = 0.0
    for _ in range(50):
        a, b = rng.uniform(0, 255, (2, 24, 24, 3))
        sym = max(sym, abs(ssim(a, b) - ssim(b, a)))
    ok = ident <= 1e-12 and abs(const - 9.999e-5) <= 1e-8 and abs(const - c1 / (255**2 + c1)) <= 1e-12 and sym <= 1e-12
    report(5, ok, f"ssim(x,x) err {ident:.1e}, const 0 vs 255 = {const:.6e}, symmetry err {sym:.1e}")
    assert ok


# ---------------------------------------------------------------- 6


def test_c06_gradient_checks():
    errors = {name: worst_error(name, trials=20) for name in CASES}
    worst_name = max(errors, key=errors.get)
    ok = all(e < 1e-6 for e in errors.values())
    report(6, ok, f"{len(errors)} ops x 20 trials, worst {worst_name} rel err {errors[worst_name]:.2e} (< 1e-6)")
    assert ok


# ---------------------------------------------------------------- 7

VARIANTS = ("none", "disaster", "ssim")


def run_overtrain():
    specs = DEFAULT_SPECS
    scenes = generate_scenes(specs, 3, seed=1, side=64)
    index = {s.name: i for i, s in enumerate(specs)}
    data = building_dataset([(s.pre, s.post, s.label) for s in scenes], CropSpec(0.1, 32), index)
    pick = np.concatenate([np.flatnonzero(data.labels == c)[:2] for c in range(4)])
    batch = data.subset(pick)
    out = {}
    for kind in VARIANTS:
        branch = ExtraBranch(kind, len(specs))
        model = ClassifierModel(TowerConfig(32), branch, seed=3)
        hist = train_classifier(
            model, batch.with_branch(branch), TrainConfig(seed=3, batch=8, epochs=500, stop_at_train_acc=1.0)
        )
        out[kind] = ([(h.train_loss, h.train_acc) for h in hist], digest(model.state_dict()))
    return len(batch), out


def test_c07_overtraining():
    t = time.time()
    n, runs = once("overtrain", run_overtrain)
    reached = {k: (v[0][-1][1], len(v[0])) for k, v in runs.items()}
    ok = n == 8 and all(acc == 1.0 and epochs <= 500 for acc, epochs in reached.values())
    detail = ", ".join(f"{k}: acc {a:.2f} at epoch {e}" for k, (a, e) in reached.items())
    report(7, ok, f"8-sample over-training, {detail} ({time.time() - t:.0f}s)")
    assert ok


# ---------------------------------------------------------------- 8

# one shared palette so the disaster is not visible in the imagery; each
# disaster has a different dominant damage class, one of them mostly destroyed
C8_SPECS = tuple(
    DisasterSpec(f"d{i}", (90, 110, 80), (190, 150, 120), dist, (4, 8), (6, 14), ambiguity=0.6)
    for i, dist in enumerate(
        [(0.7, 0.1, 0.1, 0.1), (0.1, 0.7, 0.1, 0.1), (0.1, 0.1, 0.7, 0.1), (0.1, 0.1, 0.1, 0.7)]
    )
)
C8_SEEDS = (1, 2, 3)


def run_disaster_vs_plain():
    index = {s.name: i for i, s in enumerate(C8_SPECS)}
    crop = CropSpec(0.1, 32)
    out = {}
    for seed in C8_SEEDS:
        train = generate_scenes(C8_SPECS, 40, seed=seed, side=64)
        val = generate_scenes(C8_SPECS, 15, seed=seed + 1000, side=64)
        dtr = building_dataset([(s.pre, s.post, s.label) for s in train], crop, index)
        dva = building_dataset([(s.pre, s.post, s.label) for s in val], crop, index)
        for kind in ("none", "disaster"):
            branch = ExtraBranch(kind, len(C8_SPECS))
            model = ClassifierModel(TowerConfig(32), branch, seed=seed)
            hist = train_classifier(
                model, dtr.with_branch(branch), TrainConfig(seed=seed, epochs=15), val=dva.with_branch(branch)
            )
            out[(seed, kind)] = ([(h.train_loss, h.train_acc, h.val_acc) for h in hist], digest(model.state_dict()))
    return out


def test_c08_disaster_one_hot_vs_plain():
    t = time.time()
    runs = once("c8", run_disaster_vs_plain)
    finals = {key: hist[-1][2] for key, (hist, _) in runs.items()}
    per_seed = [(s, finals[(s, "none")], finals[(s, "disaster")]) for s in C8_SEEDS]
    ok = all(d >= p for _, p, d in per_seed)
    detail = "; ".join(f"seed {s}: plain {p:.3f} one-hot {d:.3f}" for s, p, d in per_seed)
    report(8, ok, f"final val acc {detail} ({time.time() - t:.0f}s)")
    assert ok


# ---------------------------------------------------------------- 9


def test_c09_disaster_classifier():
    t = time.time()
    names = [s.name for s in DEFAULT_SPECS]
    train = generate_scenes(DEFAULT_SPECS, 50, seed=21, side=64)
    val = generate_scenes(DEFAULT_SPECS, 25, seed=22, side=64)
    model = DisasterClassifier(len(names), side=32, seed=1)

    def stack(scenes):
        x = np.stack([model.prepare(s.pre, s.post) for s in scenes])
        return x, np.array([names.index(s.label.disaster_name) for s in scenes])

    x, y = stack(train)
    hist = train_disaster_classifier(model, x, y, TrainConfig(seed=1, epochs=30, batch=16, lr=1e-3), val=stack(val))
    acc = hist[-1].val_acc
    ok = acc >= 0.90
    report(9, ok, f"disaster classifier val acc {acc:.3f} on {len(val)} scenes (>= 0.90) ({time.time() - t:.0f}s)")
    assert ok


# ---------------------------------------------------------------- 10


def test_c10_end_to_end_pipeline():
    t = time.time()
    train = generate_scenes(DEFAULT_SPECS, 20, seed=11, side=64)
    test = generate_scenes(DEFAULT_SPECS, 5, seed=12, side=64)
    labels = [s.label for s in test]
    crop = CropSpec(0.1, 32)

    # oracle test doubles first: the pipeline itself must be lossless
    oracle_preds = {}
    for s in test:
        gt = label_to_mask(s.label)[0]
        by_bounds = {b.footprint.bounds(): int(b.damage) for b in s.label.buildings}
        oracle_preds[s.label.scene_id] = run_two_step(
            s.pre, s.post, lambda pre, gt=gt: (gt > 0).astype(np.uint8), lambda a, b, p, m=by_bounds: m[p.bounds()], crop
        )
    oracle_exact = all(np.array_equal(oracle_preds[l.scene_id], label_to_mask(l)[0]) for l in labels)

    seg = SegmentationNet(3, 2, seed=1)
    x = np.stack([(s.pre / 255.0).transpose(2, 0, 1) for s in train])
    y = np.stack([(label_to_mask(s.label)[0] > 0).astype(np.int64) for s in train])
    train_segmenter(seg, x, y, TrainConfig(seed=1, epochs=15, batch=4, lr=0.01))

    data = building_dataset([(s.pre, s.post, s.label) for s in train], crop, with_ssim=False)
    cls = ClassifierModel(TowerConfig(32), seed=1)
    train_classifier(cls, data, TrainConfig(seed=1, epochs=20, batch=16, lr=3e-3))

    preds = {s.label.scene_id: run_two_step(s.pre, s.post, model_segmenter(seg), model_classifier(cls), crop) for s in test}
    score = score_dataset(preds, labels).combined
    baseline = score_dataset({l.scene_id: empty_prediction(l) for l in labels}, labels).combined
    ok = oracle_exact and score > 0.5 and score > baseline
    report(
        10,
        ok,
        f"oracle pipeline exact={oracle_exact}, trained combined {score:.4f} (> 0.5), "
        f"all-background {baseline:.4f} ({time.time() - t:.0f}s)",
    )
    assert ok


# ---------------------------------------------------------------- 11


def test_c11_determinism():
    t = time.time()
    first_split = once("split", run_split)[1]
    first_7 = once("overtrain", run_overtrain)
    first_8 = once("c8", run_disaster_vs_plain)
    same = {
        2: run_split()[1] == first_split,
        7: run_overtrain() == first_7,
        8: run_disaster_vs_plain() == first_8,
    }
    ok = all(same.values())
    report(11, ok, f"bit-identical reruns: {', '.join(f'c{k}={v}' for k, v in same.items())} ({time.time() - t:.0f}s)")
    assert ok


if __name__ == "__main__":
    import sys

    sys.exit(pytest.main([__file__, "-v"]))
