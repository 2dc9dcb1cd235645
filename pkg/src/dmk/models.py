"""Toy-scale versions of the damage models.

* :class:`ClassifierModel` - twin conv towers over pre/post building crops,
  optionally joined by a third branch (disaster one-hot or an SSIM scalar),
  feeding two fully connected layers with 4 damage logits.
* :class:`DisasterClassifier` - one conv tower over the channel-stacked
  pre/post scene, predicting the disaster.
* :class:`SegmentationNet` - small encoder/decoder with one skip connection.
  With 2 classes on the pre image it is the two-step building segmenter; with
  5 classes on the difference image it is the end-to-end model.

Arrays fed to the networks are channel-first (N, C, H, W) and scaled to
[0, 1] (difference images to [-1, 1]).
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .imaging import normalize, resize_bilinear, ssim, subtract
from .labels import Polygon, SceneLabel, damage_to_mask_value
from .raster import CropSpec, crop_building, polygonize, rasterize
from .rng import XorShift64Star

logger = logging.getLogger(__name__)

NUM_DAMAGE = 4
BRANCH_KINDS = ("none", "disaster", "ssim")


class ModelError(ValueError):
    pass


class TrainingError(RuntimeError):
    pass


@dataclass(frozen=True)
class TowerConfig:
    input_side: int = 64
    in_channels: int = 3
    # (filters, kernel, stride); each block is conv -> relu -> 2x2 max-pool
    blocks: tuple[tuple[int, int, int], ...] = ((8, 3, 1), (16, 3, 1))

    def __post_init__(self):
        object.__setattr__(self, "blocks", tuple(tuple(int(v) for v in b) for b in self.blocks))
        if self.feature_side < 1:
            raise ModelError(f"input side {self.input_side} too small for blocks {self.blocks}")

    @property
    def feature_side(self) -> int:
        s = self.input_side
        for _, k, stride in self.blocks:
            s = (s + 2 * (k // 2) - k) // stride + 1
            s //= 2
        return s

    @property
    def feature_dim(self) -> int:
        return self.blocks[-1][0] * self.feature_side**2


@dataclass(frozen=True)
class ExtraBranch:
    kind: str = "none"
    num_disasters: int = 10

    def __post_init__(self):
        if self.kind not in BRANCH_KINDS:
            raise ModelError(f"unknown branch kind {self.kind!r}; choose from {BRANCH_KINDS}")
        if self.kind == "disaster" and self.num_disasters < 1:
            raise ModelError("num_disasters must be positive")

    @property
    def width(self) -> int:
        return {"none": 0, "disaster": self.num_disasters, "ssim": 1}[self.kind]


def one_hot(index: int, n: int) -> np.ndarray:
    v = np.zeros(n)
    v[index] = 1.0
    return v


class Module:
    """Named parameter registry with deterministic initialisation."""

    def __init__(self, seed: int):
        self._rng = XorShift64Star(seed)
        self.params: dict[str, Tensor] = {}

    def _weight(self, name, shape, fan_in, fan_out) -> Tensor:
        t = Tensor(ad.glorot_uniform(shape, fan_in, fan_out, self._rng), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def _bias(self, name, n) -> Tensor:
        t = Tensor(np.zeros(n), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def parameters(self) -> list[Tensor]:
        return list(self.params.values())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {k: v.data.copy() for k, v in self.params.items()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        if set(state) != set(self.params):
            missing = sorted(set(self.params) - set(state))
            extra = sorted(set(state) - set(self.params))
            raise ModelError(f"checkpoint mismatch: missing {missing}, unexpected {extra}")
        for k, v in state.items():
            if v.shape != self.params[k].shape:
                raise ModelError(f"{k}: checkpoint shape {v.shape} vs model {self.params[k].shape}")
            self.params[k].data = np.array(v, dtype=np.float64)

    def config(self) -> dict:
        raise NotImplementedError


class Tower:
    def __init__(self, owner: Module, prefix: str, cfg: TowerConfig):
        self.cfg = cfg
        self.layers = []
        c = cfg.in_channels
        for i, (f, k, s) in enumerate(cfg.blocks):
            w = owner._weight(f"{prefix}.conv{i}.w", (f, c, k, k), c * k * k, f * k * k)
            b = owner._bias(f"{prefix}.conv{i}.b", f)
            self.layers.append((w, b, s, k // 2))
            c = f

    def __call__(self, x: Tensor) -> Tensor:
        for w, b, stride, pad in self.layers:
            x = ad.maxpool2d(ad.relu(ad.conv2d(x, w, b, stride=stride, padding=pad)), 2)
        return ad.flatten(x)


class ClassifierModel(Module):
    def __init__(
        self,
        tower: TowerConfig = TowerConfig(),
        branch: ExtraBranch = ExtraBranch(),
        shared_towers: bool = True,
        hidden: int = 128,
        branch_dim: int = 16,
        seed: int = 42,
    ):
        super().__init__(seed)
        self.tower_cfg, self.branch = tower, branch
        self.shared_towers, self.hidden, self.branch_dim, self.seed = shared_towers, hidden, branch_dim, seed
        self.tower_pre = Tower(self, "tower_pre", tower)
        self.tower_post = self.tower_pre if shared_towers else Tower(self, "tower_post", tower)
        width = 2 * tower.feature_dim
        if branch.kind != "none":
            self.branch_w = self._weight("branch.w", (branch.width, branch_dim), branch.width, branch_dim)
            self.branch_b = self._bias("branch.b", branch_dim)
            width += branch_dim
        self.fc1_w = self._weight("fc1.w", (width, hidden), width, hidden)
        self.fc1_b = self._bias("fc1.b", hidden)
        self.fc2_w = self._weight("fc2.w", (hidden, NUM_DAMAGE), hidden, NUM_DAMAGE)
        self.fc2_b = self._bias("fc2.b", NUM_DAMAGE)

    def config(self) -> dict:
        return {
            "type": "classifier",
            "tower": {
                "input_side": self.tower_cfg.input_side,
                "in_channels": self.tower_cfg.in_channels,
                "blocks": [list(b) for b in self.tower_cfg.blocks],
            },
            "branch": asdict(self.branch),
            "shared_towers": self.shared_towers,
            "hidden": self.hidden,
            "branch_dim": self.branch_dim,
            "seed": self.seed,
        }

    def forward(self, pre: np.ndarray, post: np.ndarray, extra: np.ndarray | None = None) -> Tensor:
        side, c = self.tower_cfg.input_side, self.tower_cfg.in_channels
        for name, arr in (("pre", pre), ("post", post)):
            if arr.ndim != 4 or arr.shape[1:] != (c, side, side):
                raise ModelError(f"{name} batch must be (N, {c}, {side}, {side}), got {arr.shape}")
        feats = [self.tower_pre(Tensor(pre)), self.tower_post(Tensor(post))]
        if self.branch.kind == "none":
            if extra is not None:
                raise ModelError("model has no extra branch but extra features were given")
        else:
            if extra is None or extra.shape != (pre.shape[0], self.branch.width):
                got = None if extra is None else extra.shape
                raise ModelError(f"{self.branch.kind} branch needs extra of shape (N, {self.branch.width}), got {got}")
            feats.append(ad.linear(Tensor(extra), self.branch_w, self.branch_b))
        h = ad.relu(ad.linear(ad.concat(feats, axis=1), self.fc1_w, self.fc1_b))
        return ad.linear(h, self.fc2_w, self.fc2_b)


def classify_building(
    model: ClassifierModel, pre_patch: np.ndarray, post_patch: np.ndarray, extra: np.ndarray | None = None
) -> np.ndarray:
    """Logits for one building; patches are (side, side, C) scaled to [0, 1]."""
    pre = np.asarray(pre_patch, dtype=np.float64).transpose(2, 0, 1)[None]
    post = np.asarray(post_patch, dtype=np.float64).transpose(2, 0, 1)[None]
    ex = None if extra is None else np.asarray(extra, dtype=np.float64).reshape(1, -1)
    with ad.no_grad():
        return model.forward(pre, post, ex).data[0].copy()


class DisasterClassifier(Module):
    def __init__(
        self,
        num_disasters: int,
        side: int = 64,
        blocks: Sequence[tuple[int, int, int]] = ((8, 3, 1), (16, 3, 1)),
        hidden: int = 64,
        seed: int = 42,
    ):
        super().__init__(seed)
        if num_disasters < 1:
            raise ModelError("num_disasters must be positive")
        self.num_disasters, self.hidden, self.seed = num_disasters, hidden, seed
        self.tower_cfg = TowerConfig(input_side=side, in_channels=6, blocks=tuple(blocks))
        self.tower = Tower(self, "tower", self.tower_cfg)
        d = self.tower_cfg.feature_dim
        self.fc1_w = self._weight("fc1.w", (d, hidden), d, hidden)
        self.fc1_b = self._bias("fc1.b", hidden)
        self.fc2_w = self._weight("fc2.w", (hidden, num_disasters), hidden, num_disasters)
        self.fc2_b = self._bias("fc2.b", num_disasters)

    @property
    def side(self) -> int:
        return self.tower_cfg.input_side

    def config(self) -> dict:
        return {
            "type": "disaster",
            "num_disasters": self.num_disasters,
            "side": self.side,
            "blocks": [list(b) for b in self.tower_cfg.blocks],
            "hidden": self.hidden,
            "seed": self.seed,
        }

    def forward(self, x: np.ndarray) -> Tensor:
        if x.ndim != 4 or x.shape[1:] != (6, self.side, self.side):
            raise ModelError(f"input must be (N, 6, {self.side}, {self.side}), got {x.shape}")
        h = ad.relu(ad.linear(self.tower(Tensor(x)), self.fc1_w, self.fc1_b))
        return ad.linear(h, self.fc2_w, self.fc2_b)

    def prepare(self, pre_image: np.ndarray, post_image: np.ndarray) -> np.ndarray:
        """Resize both images to the model side, scale and stack to (6, side, side)."""
        pre, post = np.asarray(pre_image, dtype=np.float64), np.asarray(post_image, dtype=np.float64)
        if pre.shape != post.shape:
            raise ModelError(f"pre/post sizes differ: {pre.shape} vs {post.shape}")
        pre = normalize(resize_bilinear(pre, self.side, self.side))
        post = normalize(resize_bilinear(post, self.side, self.side))
        return np.concatenate([pre, post], axis=2).transpose(2, 0, 1)


def classify_disaster(model: DisasterClassifier, pre_image: np.ndarray, post_image: np.ndarray) -> np.ndarray:
    with ad.no_grad():
        return model.forward(model.prepare(pre_image, post_image)[None]).data[0].copy()


class SegmentationNet(Module):
    """conv -> pool -> conv -> nearest upsample -> concat skip -> conv -> 1x1 conv."""

    def __init__(self, in_channels: int = 3, num_classes: int = 2, widths: tuple[int, int] = (8, 16), seed: int = 42):
        super().__init__(seed)
        self.in_channels, self.num_classes, self.widths, self.seed = in_channels, num_classes, tuple(widths), seed
        a, b = widths
        self.enc1_w = self._weight("enc1.w", (a, in_channels, 3, 3), in_channels * 9, a * 9)
        self.enc1_b = self._bias("enc1.b", a)
        self.enc2_w = self._weight("enc2.w", (b, a, 3, 3), a * 9, b * 9)
        self.enc2_b = self._bias("enc2.b", b)
        self.dec_w = self._weight("dec.w", (b, a + b, 3, 3), (a + b) * 9, b * 9)
        self.dec_b = self._bias("dec.b", b)
        self.out_w = self._weight("out.w", (num_classes, b, 1, 1), b, num_classes)
        self.out_b = self._bias("out.b", num_classes)

    def config(self) -> dict:
        return {
            "type": "segmentation",
            "in_channels": self.in_channels,
            "num_classes": self.num_classes,
            "widths": list(self.widths),
            "seed": self.seed,
        }

    def forward(self, x: np.ndarray) -> Tensor:
        if x.ndim != 4 or x.shape[1] != self.in_channels:
            raise ModelError(f"input must be (N, {self.in_channels}, H, W), got {x.shape}")
        if x.shape[2] % 2 or x.shape[3] % 2:
            raise ModelError(f"spatial dims must be even, got {x.shape[2:]}")
        e1 = ad.relu(ad.conv2d(Tensor(x), self.enc1_w, self.enc1_b, padding=1))
        e2 = ad.relu(ad.conv2d(ad.maxpool2d(e1, 2), self.enc2_w, self.enc2_b, padding=1))
        up = ad.upsample_nearest(e2, 2)
        d = ad.relu(ad.conv2d(ad.concat([up, e1], axis=1), self.dec_w, self.dec_b, padding=1))
        return ad.conv2d(d, self.out_w, self.out_b)


def predict_mask(model: SegmentationNet, image: np.ndarray) -> np.ndarray:
    """Per-pixel argmax for one (H, W, C) input; ties go to the lower class."""
    x = np.asarray(image, dtype=np.float64).transpose(2, 0, 1)[None]
    with ad.no_grad():
        logits = model.forward(x).data[0]
    return logits.argmax(axis=0).astype(np.uint8)


def segment_end_to_end(model: SegmentationNet, diff_image: np.ndarray) -> np.ndarray:
    """5-class mask from a difference image already scaled by 1/255."""
    if model.num_classes != NUM_DAMAGE + 1:
        raise ModelError("end-to-end model must have 5 output classes")
    return predict_mask(model, diff_image)


def end_to_end_input(pre: np.ndarray, post: np.ndarray) -> np.ndarray:
    return subtract(pre, post) / 255.0


# ---------------------------------------------------------------- training


@dataclass
class TrainConfig:
    seed: int = 42
    lr: float = 8e-4
    batch: int = 32
    epochs: int = 10
    momentum: float = 0.9
    # stop once an epoch's running train accuracy reaches this value
    stop_at_train_acc: float | None = None


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    train_acc: float
    val_acc: float = math.nan


def _fit(
    model: Module,
    n: int,
    step: Callable[[np.ndarray], tuple[Tensor, int, int]],
    config: TrainConfig,
    evaluate: Callable[[], float] | None = None,
) -> list[EpochRecord]:
    """Shared SGD loop. ``step(indices)`` returns (loss, n_correct, n_counted)."""
    if n == 0:
        raise TrainingError("cannot train on an empty dataset")
    opt = ad.SGD(model.parameters(), config.lr, config.momentum)
    order_rng = XorShift64Star(config.seed ^ 0x5DEECE66D)
    history = []
    for epoch in range(1, config.epochs + 1):
        order = np.array(order_rng.permutation(n))
        total_loss, correct, counted = 0.0, 0, 0
        for start in range(0, n, config.batch):
            idx = order[start : start + config.batch]
            opt.zero_grad()
            try:
                loss, ok, cnt = step(idx)
                loss.backward()
                opt.step()
            except ad.NonFiniteError as exc:
                raise TrainingError(
                    f"non-finite loss or gradient at epoch {epoch}, batch starting {start} "
                    f"(lr={config.lr}); lower the learning rate"
                ) from exc
            total_loss += float(loss.data) * len(idx)
            correct += ok
            counted += cnt
        rec = EpochRecord(epoch, total_loss / n, correct / counted)
        if evaluate is not None:
            rec.val_acc = evaluate()
        history.append(rec)
        logger.info("epoch %d loss %.5f acc %.4f val %.4f", epoch, rec.train_loss, rec.train_acc, rec.val_acc)
        if config.stop_at_train_acc is not None and rec.train_acc >= config.stop_at_train_acc:
            break
    return history


@dataclass
class ClassifierData:
    pre: np.ndarray
    post: np.ndarray
    labels: np.ndarray
    extra: np.ndarray | None = None
    # raw-scale ssim per sample, kept for switching branch kinds
    ssim: np.ndarray | None = None
    disaster: np.ndarray | None = None

    def __len__(self):
        return len(self.labels)

    def subset(self, idx) -> "ClassifierData":
        pick = lambda a: None if a is None else a[idx]
        return ClassifierData(
            self.pre[idx], self.post[idx], self.labels[idx], pick(self.extra), pick(self.ssim), pick(self.disaster)
        )

    def with_branch(self, branch: ExtraBranch) -> "ClassifierData":
        """Copy with ``extra`` filled for the given branch kind."""
        if branch.kind == "none":
            extra = None
        elif branch.kind == "ssim":
            if self.ssim is None:
                raise ModelError("dataset has no SSIM features")
            extra = self.ssim.reshape(-1, 1)
        else:
            if self.disaster is None:
                raise ModelError("dataset has no disaster indices")
            extra = np.eye(branch.num_disasters)[self.disaster]
        return ClassifierData(self.pre, self.post, self.labels, extra, self.ssim, self.disaster)


def building_patches(pre: np.ndarray, post: np.ndarray, footprint: Polygon, crop: CropSpec):
    """Raw-scale (side, side, C) crops of one building from both images."""
    return crop_building(pre, footprint, crop), crop_building(post, footprint, crop)


def building_dataset(
    scenes: Sequence[tuple[np.ndarray, np.ndarray, SceneLabel]],
    crop: CropSpec,
    disaster_index: dict[str, int] | None = None,
    with_ssim: bool = True,
) -> ClassifierData:
    """One sample per classified building: scaled crops, label, SSIM, disaster index."""
    pres, posts, labels, ssims, dis = [], [], [], [], []
    for pre, post, label in scenes:
        for b in label.buildings:
            if b.damage is None:
                continue
            a, c = building_patches(pre, post, b.footprint, crop)
            pres.append(normalize(a).transpose(2, 0, 1))
            posts.append(normalize(c).transpose(2, 0, 1))
            labels.append(int(b.damage))
            if with_ssim:
                ssims.append(ssim(a, c))
            if disaster_index is not None:
                dis.append(disaster_index[label.disaster_name])
    if not labels:
        raise ModelError("no classified buildings in the given scenes")
    return ClassifierData(
        np.stack(pres),
        np.stack(posts),
        np.array(labels, dtype=np.int64),
        None,
        np.array(ssims) if with_ssim else None,
        np.array(dis, dtype=np.int64) if disaster_index is not None else None,
    )


def classifier_accuracy(model: ClassifierModel, data: ClassifierData, batch: int = 256) -> float:
    preds = classifier_predict(model, data, batch)
    return float(np.mean(preds == data.labels))


def classifier_predict(model: ClassifierModel, data: ClassifierData, batch: int = 256) -> np.ndarray:
    out = []
    with ad.no_grad():
        for s in range(0, len(data), batch):
            sl = slice(s, s + batch)
            ex = None if data.extra is None else data.extra[sl]
            out.append(model.forward(data.pre[sl], data.post[sl], ex).data.argmax(axis=1))
    return np.concatenate(out)


def train_classifier(
    model: ClassifierModel,
    data: ClassifierData,
    config: TrainConfig = TrainConfig(),
    val: ClassifierData | None = None,
) -> list[EpochRecord]:
    """SGD on cross-entropy; returns one record per epoch."""
    if len(data) == 0:
        raise TrainingError("cannot train on an empty dataset")
    if data.labels.min() < 0 or data.labels.max() >= NUM_DAMAGE:
        raise TrainingError("damage labels must lie in 0..3")

    def step(idx):
        ex = None if data.extra is None else data.extra[idx]
        logits = model.forward(data.pre[idx], data.post[idx], ex)
        loss = ad.softmax_cross_entropy(logits, data.labels[idx])
        return loss, int(np.sum(logits.data.argmax(axis=1) == data.labels[idx])), len(idx)

    evaluate = (lambda: classifier_accuracy(model, val)) if val is not None else None
    return _fit(model, len(data), step, config, evaluate)


def train_disaster_classifier(
    model: DisasterClassifier,
    inputs: np.ndarray,
    labels: np.ndarray,
    config: TrainConfig = TrainConfig(),
    val: tuple[np.ndarray, np.ndarray] | None = None,
) -> list[EpochRecord]:
    """``inputs`` are prepared (N, 6, side, side) stacks, see :meth:`DisasterClassifier.prepare`."""
    labels = np.asarray(labels, dtype=np.int64)

    def step(idx):
        logits = model.forward(inputs[idx])
        loss = ad.softmax_cross_entropy(logits, labels[idx])
        return loss, int(np.sum(logits.data.argmax(axis=1) == labels[idx])), len(idx)

    def evaluate():
        with ad.no_grad():
            pred = model.forward(val[0]).data.argmax(axis=1)
        return float(np.mean(pred == val[1]))

    return _fit(model, len(labels), step, config, evaluate if val is not None else None)


def train_segmenter(
    model: SegmentationNet,
    images: np.ndarray,
    targets: np.ndarray,
    config: TrainConfig = TrainConfig(),
    val: tuple[np.ndarray, np.ndarray] | None = None,
) -> list[EpochRecord]:
    """Per-pixel cross-entropy on (N, C, H, W) inputs and (N, H, W) class targets."""
    targets = np.asarray(targets, dtype=np.int64)
    if targets.min() < 0 or targets.max() >= model.num_classes:
        raise TrainingError(f"targets must lie in 0..{model.num_classes - 1}")

    def step(idx):
        logits = model.forward(images[idx])
        loss = ad.pixel_cross_entropy(logits, targets[idx])
        ok = int(np.sum(logits.data.argmax(axis=1) == targets[idx]))
        return loss, ok, targets[idx].size

    def evaluate():
        return pixel_accuracy(model, *val)

    return _fit(model, len(targets), step, config, evaluate if val is not None else None)


def pixel_accuracy(model: SegmentationNet, images: np.ndarray, targets: np.ndarray) -> float:
    correct = 0
    with ad.no_grad():
        for i in range(len(images)):
            correct += int(np.sum(model.forward(images[i : i + 1]).data[0].argmax(axis=0) == targets[i]))
    return correct / np.asarray(targets).size


# ---------------------------------------------------------------- pipeline

Segmenter = Callable[[np.ndarray], np.ndarray]
BuildingClassifier = Callable[[np.ndarray, np.ndarray, Polygon], int]


def model_segmenter(model: SegmentationNet) -> Segmenter:
    """Wrap a 2-class net as ``pre_image -> binary mask``."""

    def segment(pre_image):
        return (predict_mask(model, normalize(pre_image)) > 0).astype(np.uint8)

    return segment


def model_classifier(
    model: ClassifierModel, extra: np.ndarray | None = None
) -> BuildingClassifier:
    """Wrap a classifier as ``(pre_patch, post_patch, footprint) -> damage ordinal``.

    Patches arrive raw-scale. ``extra`` is the scene-level one-hot for the
    disaster branch; the SSIM branch computes its feature per crop.
    """

    def classify(pre_patch, post_patch, footprint):
        ex = extra
        if model.branch.kind == "ssim":
            ex = np.array([ssim(pre_patch, post_patch)])
        logits = classify_building(model, normalize(pre_patch), normalize(post_patch), ex)
        return int(np.argmax(logits))

    return classify


def disaster_extra(
    model: ClassifierModel,
    pre_image: np.ndarray,
    post_image: np.ndarray,
    disaster_model: DisasterClassifier | None = None,
    oracle_index: int | None = None,
) -> np.ndarray | None:
    """Scene one-hot for the disaster branch: predicted unless an oracle index is given."""
    if model.branch.kind != "disaster":
        return None
    if oracle_index is None:
        if disaster_model is None:
            raise ModelError("disaster branch needs a disaster classifier or an oracle index")
        oracle_index = int(np.argmax(classify_disaster(disaster_model, pre_image, post_image)))
    return one_hot(oracle_index, model.branch.num_disasters)


def run_two_step(
    pre_image: np.ndarray,
    post_image: np.ndarray,
    segmenter: Segmenter,
    classifier: BuildingClassifier,
    crop: CropSpec = CropSpec(),
    min_area: int = 4,
) -> np.ndarray:
    """Segment the pre image, then paint each found building with its predicted class."""
    pre, post = np.asarray(pre_image, dtype=np.float64), np.asarray(post_image, dtype=np.float64)
    if pre.shape != post.shape:
        raise ModelError(f"pre/post sizes differ: {pre.shape} vs {post.shape}")
    h, w = pre.shape[:2]
    footprints = polygonize(np.asarray(segmenter(pre), dtype=np.uint8), min_area=min_area)
    painted = []
    for polygon, _ in footprints:
        a, b = building_patches(pre, post, polygon, crop)
        painted.append((polygon, damage_to_mask_value(classifier(a, b, polygon))))
    return rasterize(painted, w, h)


# ---------------------------------------------------------------- persistence


def save_model(model: Module, path: str | Path, meta: dict | None = None) -> None:
    """Checkpoint at ``path`` plus architecture JSON alongside (``.json``)."""
    path = Path(path)
    ad.save_checkpoint(model.params, path)
    cfg = model.config()
    if meta:
        cfg["meta"] = meta
    path.with_suffix(".json").write_text(json.dumps(cfg, indent=2) + "\n", encoding="utf-8")


def model_meta(path: str | Path) -> dict:
    return json.loads(Path(path).with_suffix(".json").read_text(encoding="utf-8")).get("meta", {})


def build_model(cfg: dict) -> Module:
    kind = cfg.get("type")
    if kind == "classifier":
        t = cfg["tower"]
        return ClassifierModel(
            TowerConfig(t["input_side"], t["in_channels"], tuple(tuple(b) for b in t["blocks"])),
            ExtraBranch(**cfg["branch"]),
            cfg["shared_towers"],
            cfg["hidden"],
            cfg["branch_dim"],
            cfg["seed"],
        )
    if kind == "disaster":
        return DisasterClassifier(
            cfg["num_disasters"], cfg["side"], tuple(tuple(b) for b in cfg["blocks"]), cfg["hidden"], cfg["seed"]
        )
    if kind == "segmentation":
        return SegmentationNet(cfg["in_channels"], cfg["num_classes"], tuple(cfg["widths"]), cfg["seed"])
    raise ModelError(f"unknown model type {kind!r}")


def load_model(path: str | Path) -> Module:
    path = Path(path)
    cfg = json.loads(path.with_suffix(".json").read_text(encoding="utf-8"))
    model = build_model(cfg)
    model.load_state_dict(ad.load_checkpoint(path))
    return model


# ---------------------------------------------------------------- config files


def parse_config_text(text: str) -> dict:
    """``key = value`` lines; ``#`` comments; values are ints, floats, bools or strings."""
    out = {}
    for lineno, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line or line.startswith("["):
            continue
        if "=" not in line:
            raise ValueError(f"line {lineno}: expected key = value")
        key, value = (s.strip() for s in line.split("=", 1))
        out[key] = _parse_value(value)
    return out


def _parse_value(v: str):
    if len(v) >= 2 and v[0] == v[-1] and v[0] in "\"'":
        return v[1:-1]
    if v.lower() in ("true", "false"):
        return v.lower() == "true"
    for cast in (int, float):
        try:
            return cast(v)
        except ValueError:
            pass
    return v


TRAIN_KEYS = {"seed", "lr", "batch", "epochs", "momentum", "branch", "shared_towers", "patch_side"}


def load_train_config(path: str | Path) -> dict:
    cfg = parse_config_text(Path(path).read_text(encoding="utf-8"))
    unknown = set(cfg) - TRAIN_KEYS
    if unknown:
        raise ValueError(f"unknown training config keys: {sorted(unknown)}")
    return cfg


def write_history(history: Sequence[EpochRecord], path: str | Path) -> None:
    lines = ["epoch,train_loss,train_acc,val_acc"]
    for r in history:
        val = "" if math.isnan(r.val_acc) else f"{r.val_acc:.6f}"
        lines.append(f"{r.epoch},{r.train_loss:.8f},{r.train_acc:.6f},{val}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
