"""``dmk`` command line.

Exit status: 0 on success, 1 on a domain error (bad data, failed training),
2 on a usage error. Diagnostics go to stderr; results go to files under
``--out`` or, for ``ssim`` and ``stats`` without ``--out``, to stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import __version__
from .imaging import ImageError, read_image, ssim
from .labels import (
    DamageClass,
    LabelError,
    SceneLabel,
    BuildingAnnotation,
    dataset_stats,
    read_manifest,
    read_scene_label,
    serialize_scene_label,
    damage_to_mask_value,
)
from .metrics import MetricError, score_dataset
from .raster import CropSpec, RasterError, polygonize, rasterize, read_mask, write_mask
from .split import stratified_split
from .synth import DEFAULT_SPECS, DisasterSpec, generate_dataset

log = logging.getLogger("dmk")

DEFAULT_SEED = 42


class UsageError(Exception):
    pass


def default_seed() -> int:
    raw = os.environ.get("DMK_SEED")
    if raw is None:
        return DEFAULT_SEED
    try:
        return int(raw)
    except ValueError:
        raise UsageError(f"DMK_SEED must be an integer, got {raw!r}") from None


def _map(fn: Callable, items: Sequence, jobs: int) -> list:
    if jobs > 1:
        with ThreadPoolExecutor(jobs) as pool:
            return list(pool.map(fn, items))
    return [fn(x) for x in items]


def _read_ids(path: str | None) -> set[str] | None:
    if path is None:
        return None
    return {line.strip() for line in Path(path).read_text(encoding="utf-8").splitlines() if line.strip()}


def _entries(manifest, scenes_file):
    wanted = _read_ids(scenes_file)
    entries = [e for e in manifest.entries if wanted is None or e.scene_id in wanted]
    if wanted is not None:
        missing = wanted - {e.scene_id for e in entries}
        if missing:
            raise LabelError(f"scene ids not in manifest: {sorted(missing)[:5]}")
    return entries


def _load_scene(manifest, entry):
    pre = read_image(manifest.resolve(entry.pre_image))
    post = read_image(manifest.resolve(entry.post_image))
    label = read_scene_label(manifest.resolve(entry.label))
    return pre, post, label


def _existing(path: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} not found: {path}")
    return p


# ---------------------------------------------------------------- subcommands


def cmd_synth(args) -> int:
    if args.spec_file:
        raw = json.loads(_existing(args.spec_file, "spec file").read_text(encoding="utf-8"))
        specs = [DisasterSpec(**{k: tuple(v) if isinstance(v, list) else v for k, v in s.items()}) for s in raw]
    else:
        specs = list(DEFAULT_SPECS[: args.disasters])
    manifest = generate_dataset(specs, args.per_disaster, args.seed, args.out, side=args.side, jobs=args.jobs)
    log.info("wrote %d scenes to %s", len(manifest), args.out)
    return 0


def cmd_stats(args) -> int:
    manifest = read_manifest(_existing(args.manifest, "manifest"))
    report = dataset_stats(manifest)
    for sid, err in sorted(report.errors.items()):
        log.warning("unreadable entry %s: %s", sid, err)
    text = json.dumps(report.to_dict(), indent=2) + "\n"
    if args.out:
        out = Path(args.out)
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text, encoding="utf-8")
    else:
        sys.stdout.write(text)
    return 0


def cmd_split(args) -> int:
    manifest = read_manifest(_existing(args.manifest, "manifest"))
    split = stratified_split(manifest, args.val_frac, args.seed)
    split.write(args.out)
    log.info("train %d / val %d", len(split.train), len(split.val))
    return 0


def _label_mask(label: SceneLabel) -> np.ndarray:
    return rasterize(
        [(b.footprint, damage_to_mask_value(b.damage)) for b in label.buildings if b.damage is not None],
        label.width,
        label.height,
    )


def cmd_rasterize(args) -> int:
    label = read_scene_label(_existing(args.label, "label"))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_mask(_label_mask(label), out)
    return 0


def cmd_polygonize(args) -> int:
    mask = read_mask(_existing(args.mask, "mask"))
    h, w = mask.shape
    buildings = []
    for i, (poly, cls) in enumerate(polygonize(mask, args.min_area)):
        buildings.append(BuildingAnnotation(f"p{i:05d}", poly, DamageClass(cls - 1)))
    scene_id = args.scene_id or Path(args.mask).stem
    label = SceneLabel(scene_id, args.disaster, w, h, tuple(buildings))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(serialize_scene_label(label), encoding="utf-8")
    return 0


def cmd_ssim(args) -> int:
    a = read_image(_existing(args.a, "image"))
    b = read_image(_existing(args.b, "image"))
    print(f"{ssim(a, b):.6f}")
    return 0


def _train_config(args) -> dict:
    from .models import load_train_config

    cfg = load_train_config(args.config) if args.config else {}
    cfg.setdefault("seed", args.seed)
    if args.seed_given:
        cfg["seed"] = args.seed
    for key in ("epochs", "batch", "lr"):
        v = getattr(args, key, None)
        if v is not None:
            cfg[key] = v
    return cfg


def _fit_config(cfg: dict):
    from .models import TrainConfig

    return TrainConfig(
        seed=int(cfg.get("seed", DEFAULT_SEED)),
        lr=float(cfg.get("lr", 8e-4)),
        batch=int(cfg.get("batch", 32)),
        epochs=int(cfg.get("epochs", 10)),
        momentum=float(cfg.get("momentum", 0.9)),
    )


def _disaster_names(manifest) -> list[str]:
    return sorted({e.disaster_name for e in manifest.entries})


def cmd_train_seg(args) -> int:
    from .imaging import subtract
    from .models import SegmentationNet, save_model, train_segmenter, write_history
    from .metrics import label_to_mask

    manifest = read_manifest(_existing(args.manifest, "manifest"))
    cfg = _train_config(args)
    fit = _fit_config(cfg)
    scenes = _map(lambda e: _load_scene(manifest, e), _entries(manifest, args.scenes), args.jobs)
    if not scenes:
        raise LabelError("no scenes to train on")
    if args.target == "building":
        x = np.stack([(pre / 255.0).transpose(2, 0, 1) for pre, _, _ in scenes])
        y = np.stack([(label_to_mask(lab)[0] > 0).astype(np.int64) for _, _, lab in scenes])
        model = SegmentationNet(3, 2, seed=fit.seed)
    else:
        x = np.stack([(subtract(pre, post) / 255.0).transpose(2, 0, 1) for pre, post, _ in scenes])
        y = np.stack([label_to_mask(lab)[0].astype(np.int64) for _, _, lab in scenes])
        model = SegmentationNet(3, 5, seed=fit.seed)
    history = train_segmenter(model, x, y, fit)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    name = "segmenter.dmk" if args.target == "building" else "end_to_end.dmk"
    save_model(model, out / name, {"target": args.target})
    write_history(history, out / "history.csv")
    return 0


def _classifier_data(manifest, entries, crop, names, jobs):
    from .models import building_dataset

    scenes = _map(lambda e: _load_scene(manifest, e), entries, jobs)
    index = {n: i for i, n in enumerate(names)}
    return building_dataset(scenes, crop, index)


def cmd_train_cls(args) -> int:
    from .models import (
        ClassifierModel,
        ExtraBranch,
        TowerConfig,
        save_model,
        train_classifier,
        write_history,
    )

    manifest = read_manifest(_existing(args.manifest, "manifest"))
    cfg = _train_config(args)
    fit = _fit_config(cfg)
    side = int(cfg.get("patch_side", 64))
    names = _disaster_names(manifest)
    branch = ExtraBranch(str(cfg.get("branch", args.branch)), len(names))
    crop = CropSpec(args.padding, side)
    train = _classifier_data(manifest, _entries(manifest, args.scenes), crop, names, args.jobs).with_branch(branch)
    val = None
    if args.val_scenes:
        val = _classifier_data(manifest, _entries(manifest, args.val_scenes), crop, names, args.jobs)
        val = val.with_branch(branch)
    model = ClassifierModel(
        TowerConfig(side), branch, shared_towers=bool(cfg.get("shared_towers", True)), seed=fit.seed
    )
    history = train_classifier(model, train, fit, val)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "classifier.dmk", {"disasters": names, "padding": args.padding})
    write_history(history, out / "history.csv")
    return 0


def cmd_train_disaster(args) -> int:
    from .models import DisasterClassifier, save_model, train_disaster_classifier, write_history

    manifest = read_manifest(_existing(args.manifest, "manifest"))
    cfg = _train_config(args)
    fit = _fit_config(cfg)
    names = _disaster_names(manifest)
    model = DisasterClassifier(len(names), side=int(cfg.get("patch_side", 64)), seed=fit.seed)

    def prepare(entries):
        scenes = _map(lambda e: _load_scene(manifest, e), entries, args.jobs)
        x = np.stack([model.prepare(pre, post) for pre, post, _ in scenes])
        y = np.array([names.index(e.disaster_name) for e in entries])
        return x, y

    x, y = prepare(_entries(manifest, args.scenes))
    val = prepare(_entries(manifest, args.val_scenes)) if args.val_scenes else None
    history = train_disaster_classifier(model, x, y, fit, val)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    save_model(model, out / "disaster.dmk", {"disasters": names})
    write_history(history, out / "history.csv")
    return 0


def cmd_infer(args) -> int:
    from .models import disaster_extra, load_model, model_classifier, model_meta, model_segmenter, run_two_step

    manifest = read_manifest(_existing(args.manifest, "manifest"))
    segmenter = load_model(_existing(args.segmenter, "segmenter checkpoint"))
    classifier = load_model(_existing(args.classifier, "classifier checkpoint"))
    meta = model_meta(args.classifier)
    names = meta.get("disasters", [])
    disaster_model = None
    if classifier.branch.kind == "disaster" and not args.oracle_disaster:
        if not args.disaster_model:
            raise UsageError("disaster-branch classifier needs --disaster-model or --oracle-disaster")
        disaster_model = load_model(_existing(args.disaster_model, "disaster checkpoint"))
    crop = CropSpec(meta.get("padding", 0.1), classifier.tower_cfg.input_side)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    seg = model_segmenter(segmenter)

    def work(entry):
        pre, post, _ = _load_scene(manifest, entry)
        oracle = None
        if args.oracle_disaster and classifier.branch.kind == "disaster":
            oracle = names.index(entry.disaster_name)
        extra = disaster_extra(classifier, pre, post, disaster_model, oracle)
        mask = run_two_step(pre, post, seg, model_classifier(classifier, extra), crop, args.min_area)
        write_mask(mask, out / f"{entry.scene_id}.png")

    _map(work, _entries(manifest, args.scenes), args.jobs)
    return 0


def cmd_infer_e2e(args) -> int:
    from .models import end_to_end_input, load_model, segment_end_to_end

    manifest = read_manifest(_existing(args.manifest, "manifest"))
    model = load_model(_existing(args.model, "model checkpoint"))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def work(entry):
        pre, post, _ = _load_scene(manifest, entry)
        write_mask(segment_end_to_end(model, end_to_end_input(pre, post)), out / f"{entry.scene_id}.png")

    _map(work, _entries(manifest, args.scenes), args.jobs)
    return 0


def cmd_score(args) -> int:
    manifest = read_manifest(_existing(args.manifest, "manifest"))
    pred_dir = _existing(args.pred, "prediction directory")
    entries = _entries(manifest, args.scenes)
    labels = _map(lambda e: read_scene_label(manifest.resolve(e.label)), entries, args.jobs)
    preds = {}
    for e in entries:
        p = pred_dir / f"{e.scene_id}.png"
        if not p.exists():
            raise MetricError(f"missing prediction for scene {e.scene_id}: {p}")
        preds[e.scene_id] = read_mask(p)
    report = score_dataset(preds, labels)
    text = json.dumps(report.to_dict(), indent=2) + "\n"
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(text, encoding="utf-8")
    return 0


# ---------------------------------------------------------------- parser


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="dmk", description="Building damage assessment toolkit")
    parser.add_argument("--version", action="version", version=f"dmk {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND")

    def add(name, fn, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text)
        p.set_defaults(func=fn)
        p.add_argument("--seed", type=int, default=None, help="random seed (default: $DMK_SEED or 42)")
        p.add_argument("--jobs", type=int, default=1, help="parallel workers per scene (default 1)")
        return p

    p = add("synth", cmd_synth, "generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-disaster", type=int, default=25, help="scenes per disaster")
    p.add_argument("--disasters", type=int, default=len(DEFAULT_SPECS), choices=range(1, len(DEFAULT_SPECS) + 1))
    p.add_argument("--side", type=int, default=128)
    p.add_argument("--spec-file", help="JSON list of disaster specs instead of the defaults")

    p = add("stats", cmd_stats, "damage-class and density statistics for a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", help="report path (default: stdout)")

    p = add("split", cmd_split, "per-disaster train/val split")
    p.add_argument("--manifest", required=True)
    p.add_argument("--val-frac", type=float, default=0.2)
    p.add_argument("--out", default=".", help="directory for train.txt, val.txt, split.json")

    p = add("rasterize", cmd_rasterize, "label JSON to class mask PNG")
    p.add_argument("--label", required=True)
    p.add_argument("--out", required=True)

    p = add("polygonize", cmd_polygonize, "class mask PNG to label JSON")
    p.add_argument("--mask", required=True)
    p.add_argument("--min-area", type=int, default=4)
    p.add_argument("--scene-id")
    p.add_argument("--disaster", default="unknown")
    p.add_argument("--out", required=True)

    p = add("ssim", cmd_ssim, "SSIM between two images")
    p.add_argument("a")
    p.add_argument("b")

    def training(p):
        p.add_argument("--manifest", required=True)
        p.add_argument("--scenes", help="file of scene ids to train on (default: all)")
        p.add_argument("--config", help="key = value training config")
        p.add_argument("--epochs", type=int)
        p.add_argument("--batch", type=int)
        p.add_argument("--lr", type=float)
        p.add_argument("--out", required=True)

    p = add("train-seg", cmd_train_seg, "train the building segmenter or the end-to-end model")
    training(p)
    p.add_argument("--target", choices=("building", "damage"), default="building")

    p = add("train-cls", cmd_train_cls, "train the building damage classifier")
    training(p)
    p.add_argument("--val-scenes")
    p.add_argument("--branch", choices=("none", "disaster", "ssim"), default="none")
    p.add_argument("--padding", type=float, default=0.1)

    p = add("train-disaster", cmd_train_disaster, "train the disaster-name classifier")
    training(p)
    p.add_argument("--val-scenes")

    p = add("infer", cmd_infer, "two-step inference: segment, then classify each building")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scenes")
    p.add_argument("--segmenter", required=True)
    p.add_argument("--classifier", required=True)
    p.add_argument("--disaster-model")
    p.add_argument("--oracle-disaster", action="store_true", help="use manifest disaster names")
    p.add_argument("--min-area", type=int, default=4)
    p.add_argument("--out", required=True)

    p = add("infer-e2e", cmd_infer_e2e, "end-to-end inference on difference images")
    p.add_argument("--manifest", required=True)
    p.add_argument("--scenes")
    p.add_argument("--model", required=True)
    p.add_argument("--out", required=True)

    p = add("score", cmd_score, "score prediction masks against manifest labels")
    p.add_argument("--manifest", required=True)
    p.add_argument("--pred", required=True)
    p.add_argument("--scenes")
    p.add_argument("--out", required=True)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    if args.command is None:
        parser.print_usage(sys.stderr)
        return 2
    try:
        args.seed_given = args.seed is not None
        if args.seed is None:
            args.seed = default_seed()
        if args.jobs < 1:
            raise UsageError("--jobs must be >= 1")
        return args.func(args)
    except UsageError as exc:
        print(f"dmk {args.command}: {exc}", file=sys.stderr)
        return 2
    except (LabelError, RasterError, ImageError, MetricError, OSError, ValueError, RuntimeError) as exc:
        print(f"dmk {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
