"""A small, fully deterministic synthetic detection task.

Scenes hold a few axis-aligned objects. A regular anchor grid is matched to
them by IoU, and each anchor carries a fixed feature vector: its normalized
geometry plus a noisy copy of the offsets to its best-matching object. Two
linear heads on top of those features are trained with hand-written
gradients, either with plain cross-entropy / smooth L1 or with the
IoU-balanced losses.
"""

from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field, replace
from typing import Sequence

import numpy as np

from . import evaluation
from .analysis import calibrate_w_loc_array
from .evaluation import ApTable, Detection, GroundTruth
from .geometry import Box, boxes_to_array, clip_array, decode_array, encode_array, iou_matrix, paired_iou
from .losses import (
    LossConfig,
    WeightDiagnostics,
    clamp_score,
    cls_grad_array,
    cls_loss_array,
    cls_weights_array,
    loc_grad_array,
    loc_loss_array,
    loc_weights_array,
)

log = logging.getLogger(__name__)

NEGATIVE = -1
IGNORE = -2

# exp() guard for decoding wild size offsets
MAX_LOG_SCALE = math.log(1000.0 / 16.0)


class SceneGenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class SceneConfig:
    width: float = 64.0
    height: float = 64.0
    min_objects: int = 1
    max_objects: int = 3
    min_size: float = 12.0
    max_size: float = 32.0
    max_pair_iou: float = 0.3
    num_classes: int = 1
    rejection_budget: int = 1000

    def __post_init__(self) -> None:
        if not 1 <= self.min_objects <= self.max_objects:
            raise ValueError("need 1 <= min_objects <= max_objects")
        if not 0 < self.min_size <= self.max_size <= min(self.width, self.height):
            raise ValueError("object size range must fit inside the scene")
        if self.num_classes < 1:
            raise ValueError("num_classes must be >= 1")


@dataclass(frozen=True)
class Scene:
    bounds: Box
    objects: tuple[tuple[Box, int], ...]
    seed: int

    @property
    def boxes(self) -> np.ndarray:
        return boxes_to_array([b for b, _ in self.objects])

    @property
    def class_ids(self) -> np.ndarray:
        return np.array([c for _, c in self.objects], dtype=int)


def generate_scene(seed: int, cfg: SceneConfig = SceneConfig()) -> Scene:
    """Objects with uniform sizes and positions, pairwise IoU at most ``cfg.max_pair_iou``."""
    rng = np.random.default_rng(seed)
    count = int(rng.integers(cfg.min_objects, cfg.max_objects + 1))
    objects: list[tuple[Box, int]] = []
    attempts = 0
    while len(objects) < count:
        attempts += 1
        if attempts > cfg.rejection_budget:
            raise SceneGenerationError(f"could not place {count} objects within {cfg.rejection_budget} draws (seed={seed})")
        w, h = rng.uniform(cfg.min_size, cfg.max_size, size=2)
        x1 = rng.uniform(0.0, cfg.width - w)
        y1 = rng.uniform(0.0, cfg.height - h)
        box = Box(float(x1), float(y1), float(x1 + w), float(y1 + h))
        cls = int(rng.integers(cfg.num_classes))
        if objects:
            overlap = iou_matrix(boxes_to_array([box]), boxes_to_array([b for b, _ in objects]))
            if overlap.max() > cfg.max_pair_iou:
                continue
        objects.append((box, cls))
    return Scene(Box(0.0, 0.0, cfg.width, cfg.height), tuple(objects), seed)


# -- anchors and matching -------------------------------------------------


@dataclass(frozen=True)
class AnchorConfig:
    stride: float = 8.0
    scales: tuple[float, ...] = (16.0, 24.0, 32.0)
    ratios: tuple[float, ...] = (0.5, 1.0, 2.0)


@dataclass(frozen=True)
class AnchorSet:
    anchors: np.ndarray  # (N, 4) corner form
    grid_cells: int
    per_cell: int

    def __len__(self) -> int:
        return len(self.anchors)


def make_anchors(bounds: Box, cfg: AnchorConfig = AnchorConfig()) -> AnchorSet:
    xs = np.arange(bounds.x1 + cfg.stride / 2.0, bounds.x2, cfg.stride)
    ys = np.arange(bounds.y1 + cfg.stride / 2.0, bounds.y2, cfg.stride)
    shapes = []
    for s in cfg.scales:
        for r in cfg.ratios:
            # r = h / w at constant area s*s
            shapes.append((s / math.sqrt(r), s * math.sqrt(r)))
    rows = []
    for cy in ys:
        for cx in xs:
            for w, h in shapes:
                rows.append((cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0))
    return AnchorSet(np.array(rows, dtype=float), len(xs) * len(ys), len(shapes))


@dataclass(frozen=True)
class MatchResult:
    """``assignment[i]`` is the matched object index, ``NEGATIVE`` or ``IGNORE``."""

    assignment: np.ndarray
    max_iou: np.ndarray
    best_object: np.ndarray

    @property
    def positive_index(self) -> np.ndarray:
        return np.flatnonzero(self.assignment >= 0)

    @property
    def negative_index(self) -> np.ndarray:
        return np.flatnonzero(self.assignment == NEGATIVE)


def match_anchors(anchors: AnchorSet, scene: Scene, pos_thresh: float = 0.5, neg_thresh: float = 0.4) -> MatchResult:
    if not 0.0 <= neg_thresh <= pos_thresh <= 1.0:
        raise ValueError("need 0 <= neg_thresh <= pos_thresh <= 1")
    ious = iou_matrix(anchors.anchors, scene.boxes)
    best = np.argmax(ious, axis=1)  # first maximum -> lowest object index on ties
    max_iou = ious[np.arange(len(ious)), best]
    assignment = np.full(len(ious), IGNORE, dtype=int)
    pos = max_iou >= pos_thresh
    assignment[pos] = best[pos]
    assignment[max_iou < neg_thresh] = NEGATIVE
    return MatchResult(assignment, max_iou, best)


# -- features and model ---------------------------------------------------


@dataclass(frozen=True)
class FeatureConfig:
    """Offset noise is Gaussian with a per-anchor scale: ``outlier_noise`` for a
    random ``outlier_fraction`` of anchors, ``inlier_noise`` otherwise. The
    anchor also sees a noisy reading (std ``indicator_noise``) of whether it
    drew the outlier scale; that reading says nothing about objectness, only
    about how well the anchor can be localized.
    """

    inlier_noise: float = 0.02
    outlier_noise: float = 0.3
    outlier_fraction: float = 0.3
    indicator_noise: float = 0.5


@dataclass(frozen=True)
class SceneBatch:
    scene: Scene
    anchors: AnchorSet
    match: MatchResult
    features: np.ndarray  # (N, F)
    labels: np.ndarray  # (N, C) in {0, 1}
    valid: np.ndarray  # (N,) False for ignored anchors
    targets: np.ndarray  # (P, 4) encoded offsets for positives

    @property
    def positive_index(self) -> np.ndarray:
        return self.match.positive_index

    @property
    def target_boxes(self) -> np.ndarray:
        return self.scene.boxes[self.match.assignment[self.positive_index]]


def _nearest_objects(anchors: np.ndarray, boxes: np.ndarray, match: MatchResult) -> np.ndarray:
    """Best-IoU object per anchor, or the nearest center when nothing overlaps."""
    acx = (anchors[:, 0] + anchors[:, 2]) / 2.0
    acy = (anchors[:, 1] + anchors[:, 3]) / 2.0
    ocx = (boxes[:, 0] + boxes[:, 2]) / 2.0
    ocy = (boxes[:, 1] + boxes[:, 3]) / 2.0
    dist = (acx[:, None] - ocx[None, :]) ** 2 + (acy[:, None] - ocy[None, :]) ** 2
    return np.where(match.max_iou > 0.0, match.best_object, np.argmin(dist, axis=1))


def anchor_features(scene: Scene, anchors: AnchorSet, match: MatchResult, cfg: FeatureConfig) -> np.ndarray:
    """Bias, normalized anchor geometry, noisy offsets to the nearest object,
    their magnitudes, and the noisy outlier indicator."""
    rng = np.random.default_rng([scene.seed, 0x5EED])
    a = anchors.anchors
    n = len(a)
    w = a[:, 2] - a[:, 0]
    h = a[:, 3] - a[:, 1]
    geom = np.stack(
        [
            (a[:, 0] + w / 2.0) / scene.bounds.w - 0.5,
            (a[:, 1] + h / 2.0) / scene.bounds.h - 0.5,
            np.log(w / scene.bounds.w),
            np.log(h / scene.bounds.h),
        ],
        axis=1,
    )
    nearest = _nearest_objects(a, scene.boxes, match)
    offsets = encode_array(a, scene.boxes[nearest])
    outlier = rng.random(n) < cfg.outlier_fraction
    sigma = np.where(outlier, cfg.outlier_noise, cfg.inlier_noise)
    noisy = offsets + sigma[:, None] * rng.standard_normal((n, 4))
    indicator = outlier + cfg.indicator_noise * rng.standard_normal(n)
    return np.concatenate([np.ones((n, 1)), geom, noisy, np.abs(noisy), indicator[:, None]], axis=1)


FEATURE_DIM = 14


def prepare_batch(
    scene: Scene,
    anchors: AnchorSet,
    feature_cfg: FeatureConfig = FeatureConfig(),
    num_classes: int = 1,
    pos_thresh: float = 0.5,
    neg_thresh: float = 0.4,
) -> SceneBatch:
    match = match_anchors(anchors, scene, pos_thresh, neg_thresh)
    features = anchor_features(scene, anchors, match, feature_cfg)
    labels = np.zeros((len(anchors), num_classes))
    pos = match.positive_index
    labels[pos, scene.class_ids[match.assignment[pos]]] = 1.0
    targets = encode_array(anchors.anchors[pos], scene.boxes[match.assignment[pos]])
    return SceneBatch(scene, anchors, match, features, labels, match.assignment != IGNORE, targets)


@dataclass
class ToyModel:
    cls_head: np.ndarray  # (C, F)
    reg_head: np.ndarray  # (4, F)

    @classmethod
    def zeros(cls, num_classes: int = 1, feature_dim: int = FEATURE_DIM) -> ToyModel:
        return cls(np.zeros((num_classes, feature_dim)), np.zeros((4, feature_dim)))

    def copy(self) -> ToyModel:
        return ToyModel(self.cls_head.copy(), self.reg_head.copy())

    def is_finite(self) -> bool:
        return bool(np.all(np.isfinite(self.cls_head)) and np.all(np.isfinite(self.reg_head)))


@dataclass
class ForwardResult:
    logits: np.ndarray  # (N, C)
    raw_scores: np.ndarray  # (N, C) sigmoid before clamping
    scores: np.ndarray  # (N, C) clamped
    deltas: np.ndarray  # (P, 4) predicted offsets of positive anchors
    iou: np.ndarray  # (P,) IoU of the clipped decoded positives with their targets


def sigmoid(z: np.ndarray) -> np.ndarray:
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def decode_clipped(anchors: np.ndarray, deltas: np.ndarray, bounds: Box) -> np.ndarray:
    safe = np.array(deltas, dtype=float, copy=True)
    safe[:, 2:] = np.clip(safe[:, 2:], -MAX_LOG_SCALE, MAX_LOG_SCALE)
    return clip_array(decode_array(anchors, safe), bounds)


def forward(model: ToyModel, batch: SceneBatch) -> ForwardResult:
    logits = batch.features @ model.cls_head.T
    raw = sigmoid(logits)
    pos = batch.positive_index
    deltas = batch.features[pos] @ model.reg_head.T
    boxes = decode_clipped(batch.anchors.anchors[pos], deltas, batch.scene.bounds)
    iou = paired_iou(boxes, batch.target_boxes)
    return ForwardResult(logits, raw, clamp_score(raw), deltas, iou)


# -- training -------------------------------------------------------------


@dataclass(frozen=True)
class TrainConfig:
    loss: LossConfig = LossConfig()
    baseline: bool = False
    calibrate_w_loc: bool = True
    learning_rate: float = 0.1
    cls_learning_rate: float | None = 1.0
    epochs: int = 10
    scenes_count: int = 200
    test_scenes: int = 60
    batch_size: int = 1
    seed: int = 0
    scene: SceneConfig = SceneConfig()
    anchors: AnchorConfig = AnchorConfig()
    features: FeatureConfig = FeatureConfig()
    pos_thresh: float = 0.5
    neg_thresh: float = 0.4
    score_thresh: float = 0.05
    nms_thresh: float = 0.5
    max_detections: int = 100

    def __post_init__(self) -> None:
        if not self.learning_rate >= 0.0:
            raise ValueError("learning_rate must be >= 0")
        if self.cls_learning_rate is not None and not self.cls_learning_rate >= 0.0:
            raise ValueError("cls_learning_rate must be >= 0")
        if self.epochs < 1 or self.scenes_count < 1 or self.test_scenes < 1:
            raise ValueError("epochs, scenes_count and test_scenes must be >= 1")
        if self.batch_size != 1:
            raise ValueError("only batch_size=1 (one scene per step) is supported")

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: dict) -> TrainConfig:
        """Build from a (possibly partial) nested dict, as read from a JSON config."""
        nested = {"loss": LossConfig, "scene": SceneConfig, "anchors": AnchorConfig, "features": FeatureConfig}
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kwargs = {}
        for key, value in data.items():
            if key in nested:
                sub = nested[key]
                extra = set(value) - set(sub.__dataclass_fields__)
                if extra:
                    raise ValueError(f"unknown keys in {key!r}: {sorted(extra)}")
                value = {k: tuple(v) if isinstance(v, list) else v for k, v in value.items()}
                kwargs[key] = sub(**value)
            else:
                kwargs[key] = value
        return cls(**kwargs)


@dataclass
class StepResult:
    cls_loss: float
    loc_loss: float
    num_positives: int
    skipped: bool = False
    diagnostics: WeightDiagnostics = field(default_factory=WeightDiagnostics)


def _example_weights(
    fwd: ForwardResult, batch: SceneBatch, cfg: TrainConfig, w_loc: float, diag: WeightDiagnostics
) -> tuple[np.ndarray, np.ndarray, LossConfig]:
    pos = batch.positive_index
    residuals = fwd.deltas - batch.targets
    loss_cfg = replace(cfg.loss, w_loc=w_loc)
    if cfg.baseline:
        return np.ones(len(pos)), np.ones(len(pos)), loss_cfg
    diag.zero_iou_positives += int(np.count_nonzero(fwd.iou == 0.0))
    cls_of_pos = batch.scene.class_ids[batch.match.assignment[pos]]
    pos_scores = fwd.scores[pos, cls_of_pos]
    cls_w = cls_weights_array(fwd.iou, pos_scores, cfg.loss.eta, diag)
    loc_w = loc_weights_array(fwd.iou, residuals, loss_cfg, diag)
    return cls_w, loc_w, loss_cfg


def batch_losses(
    model: ToyModel, batch: SceneBatch, cfg: TrainConfig, w_loc: float
) -> tuple[float, float]:
    """(cls_loss, loc_loss) of the model on one batch."""
    fwd = forward(model, batch)
    cls_w, loc_w, loss_cfg = _example_weights(fwd, batch, cfg, w_loc, WeightDiagnostics())
    return _loss_values(fwd, batch, cls_w, loc_w, loss_cfg)


def _loss_values(fwd, batch, cls_w, loc_w, loss_cfg) -> tuple[float, float]:
    pos_mask, neg_mask = _pair_masks(batch)
    cls = cls_loss_array(fwd.scores[pos_mask], _pair_weights(batch, cls_w)[pos_mask], fwd.scores[neg_mask])
    loc = loc_loss_array(fwd.deltas - batch.targets, loc_w, loss_cfg.delta)
    return cls, loc


def _pair_masks(batch: SceneBatch) -> tuple[np.ndarray, np.ndarray]:
    valid = batch.valid[:, None]
    return (batch.labels == 1.0) & valid, (batch.labels == 0.0) & valid


def _pair_weights(batch: SceneBatch, cls_w: np.ndarray) -> np.ndarray:
    """Scatter per-positive weights onto the (anchor, class) grid; ones elsewhere."""
    out = np.ones_like(batch.labels)
    pos = batch.positive_index
    out[pos, batch.scene.class_ids[batch.match.assignment[pos]]] = cls_w
    return out


def gradients(
    model: ToyModel, batch: SceneBatch, cfg: TrainConfig, w_loc: float
) -> tuple[np.ndarray, np.ndarray, StepResult]:
    """Gradients of ``cls_loss / num_valid + loc_loss / num_positives`` w.r.t. both heads.

    IoU-based weights come from this forward pass and are held constant.
    """
    diag = WeightDiagnostics()
    fwd = forward(model, batch)
    n_pos = len(batch.positive_index)
    cls_w, loc_w, loss_cfg = _example_weights(fwd, batch, cfg, w_loc, diag)
    cls_val, loc_val = _loss_values(fwd, batch, cls_w, loc_w, loss_cfg)

    pos_mask, neg_mask = _pair_masks(batch)
    pair_w = _pair_weights(batch, cls_w)
    dscore = np.zeros_like(fwd.scores)
    dscore[pos_mask] = cls_grad_array(fwd.scores[pos_mask], 1.0, pair_w[pos_mask])
    dscore[neg_mask] = cls_grad_array(fwd.scores[neg_mask], 0.0, 1.0)
    unclamped = fwd.raw_scores == fwd.scores
    dlogit = np.where(unclamped, dscore * fwd.raw_scores * (1.0 - fwd.raw_scores), 0.0)
    g_cls = dlogit.T @ batch.features / max(1, int(np.count_nonzero(batch.valid)))

    dl = loc_grad_array(fwd.deltas - batch.targets, loc_w, loss_cfg.delta)
    g_reg = dl.T @ batch.features[batch.positive_index] / n_pos
    return g_cls, g_reg, StepResult(cls_val, loc_val, n_pos, diagnostics=diag)


def train_step(
    model: ToyModel,
    batch: SceneBatch,
    cfg: TrainConfig,
    w_loc: float | None = None,
    lr_scale: float = 1.0,
) -> tuple[ToyModel, StepResult]:
    """One plain SGD step on one scene; returns a new model.

    ``lr_scale`` multiplies both heads' learning rates (the trainer passes its
    schedule factor here).
    """
    if len(batch.positive_index) == 0:
        log.info("scene %d has no positive anchors; step skipped", batch.scene.seed)
        return model, StepResult(0.0, 0.0, 0, skipped=True)
    w = cfg.loss.w_loc if w_loc is None else w_loc
    g_cls, g_reg, res = gradients(model, batch, cfg, w)
    lr_reg = cfg.learning_rate * lr_scale
    lr_cls = (cfg.learning_rate if cfg.cls_learning_rate is None else cfg.cls_learning_rate) * lr_scale
    return ToyModel(model.cls_head - lr_cls * g_cls, model.reg_head - lr_reg * g_reg), res


# -- experiment -----------------------------------------------------------


def scene_seeds(seed: int, count: int, stream: int) -> list[int]:
    """Distinct scene seeds for one stream (0 = train, 1 = held-out)."""
    ss = np.random.SeedSequence([seed, stream])
    return [int(s) for s in ss.generate_state(count, dtype=np.uint64)]


@dataclass
class EpochLoss:
    epoch: int
    cls_loss: float
    loc_loss: float
    skipped_steps: int


@dataclass
class ExperimentReport:
    config: dict
    w_loc: float
    epochs: list[EpochLoss]
    detections: list[list[Detection]]
    ground_truth: list[GroundTruth]
    ap_table: ApTable
    spearman: float | None
    stats: evaluation.ScoreIouStats
    pre_nms_spearman: float | None
    pre_nms_stats: evaluation.ScoreIouStats
    diagnostics: WeightDiagnostics
    model: ToyModel

    def to_dict(self) -> dict:
        return {
            "config": self.config,
            "w_loc": self.w_loc,
            "epochs": [asdict(e) for e in self.epochs],
            "ap_table": self.ap_table.to_dict(),
            "spearman": self.spearman,
            "score_iou_stats": self.stats.to_dict(),
            "pre_nms_spearman": self.pre_nms_spearman,
            "pre_nms_score_iou_stats": self.pre_nms_stats.to_dict(),
            "diagnostics": asdict(self.diagnostics),
            "detections": [
                [
                    {"box": list(d.box.as_tuple()), "score": d.score, "class_id": d.class_id, "image_id": d.image_id}
                    for d in dets
                ]
                for dets in self.detections
            ],
            "ground_truth": [
                {"box": list(g.box.as_tuple()), "class_id": g.class_id, "image_id": g.image_id}
                for g in self.ground_truth
            ],
            "model": {"cls_head": self.model.cls_head.tolist(), "reg_head": self.model.reg_head.tolist()},
        }


def detect(model: ToyModel, batch: SceneBatch, image_id: int, cfg: TrainConfig, apply_nms: bool = True) -> list[Detection]:
    """Decoded, clipped detections above the score threshold, optionally after per-class NMS."""
    a = batch.anchors.anchors
    scores = sigmoid(batch.features @ model.cls_head.T)
    deltas = batch.features @ model.reg_head.T
    boxes = decode_clipped(a, deltas, batch.scene.bounds)
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    out: list[Detection] = []
    for c in range(scores.shape[1]):
        idx = np.flatnonzero((scores[:, c] >= cfg.score_thresh) & (area > 0.0))
        if apply_nms:
            idx = idx[evaluation.nms_array(boxes[idx], scores[idx, c], cfg.nms_thresh)]
        else:
            idx = idx[np.argsort(-scores[idx, c], kind="stable")]
        out.extend(Detection(Box(*map(float, boxes[i])), float(scores[i, c]), c, image_id) for i in idx)
    out.sort(key=lambda d: -d.score)
    return out[: cfg.max_detections] if apply_nms else out


def positive_detection_correlation(dets: Sequence[Detection], gts: Sequence[GroundTruth]) -> float | None:
    """Spearman(score, IoU) over detections whose best-GT IoU is at least 0.5."""
    ious = evaluation.best_gt_iou(dets, gts)
    pairs = [(d.score, v) for d, v in zip(dets, ious) if v >= 0.5]
    if len(pairs) < 2:
        return None
    return evaluation.rank_correlation(pairs)


def _batch_for(seed: int, cfg: TrainConfig, anchors: AnchorSet) -> SceneBatch:
    scene = generate_scene(seed, cfg.scene)
    return prepare_batch(scene, anchors, cfg.features, cfg.scene.num_classes, cfg.pos_thresh, cfg.neg_thresh)


def cosine_decay(step: int, total: int) -> float:
    return 0.5 * (1.0 + math.cos(math.pi * step / total))


def train(cfg: TrainConfig) -> tuple[ToyModel, float, list[EpochLoss], WeightDiagnostics]:
    bounds = Box(0.0, 0.0, cfg.scene.width, cfg.scene.height)
    anchors = make_anchors(bounds, cfg.anchors)
    batches = [_batch_for(s, cfg, anchors) for s in scene_seeds(cfg.seed, cfg.scenes_count, 0)]
    model = ToyModel.zeros(cfg.scene.num_classes, batches[0].features.shape[1])
    rng = np.random.default_rng([cfg.seed, 2])
    diag = WeightDiagnostics()

    w_loc = cfg.loss.w_loc
    if cfg.calibrate_w_loc and not cfg.baseline and cfg.loss.loc_weight_mode == "manual":
        first = next((b for b in batches if len(b.positive_index)), None)
        if first is None:
            raise ValueError("no training scene has a positive anchor")
        fwd = forward(model, first)
        w_loc = calibrate_w_loc_array(fwd.iou, fwd.deltas - first.targets, cfg.loss.lambda_, cfg.loss.delta)
        log.info("calibrated w_loc=%.6g for lambda=%g", w_loc, cfg.loss.lambda_)

    history = []
    total_steps = cfg.epochs * len(batches)
    step = 0
    for epoch in range(cfg.epochs):
        cls_sum = loc_sum = 0.0
        skipped = 0
        for i in rng.permutation(len(batches)):
            scale = cosine_decay(step, total_steps)
            step += 1
            model, res = train_step(model, batches[i], cfg, w_loc, scale)
            skipped += res.skipped
            cls_sum += res.cls_loss
            loc_sum += res.loc_loss
            diag.merge(res.diagnostics)
        steps = max(1, len(batches) - skipped)
        history.append(EpochLoss(epoch, cls_sum / steps, loc_sum / steps, skipped))
    return model, w_loc, history, diag


def run_experiment(cfg: TrainConfig) -> ExperimentReport:
    model, w_loc, history, diag = train(cfg)
    bounds = Box(0.0, 0.0, cfg.scene.width, cfg.scene.height)
    anchors = make_anchors(bounds, cfg.anchors)
    detections: list[list[Detection]] = []
    pre_nms: list[Detection] = []
    gts: list[GroundTruth] = []
    for image_id, s in enumerate(scene_seeds(cfg.seed, cfg.test_scenes, 1)):
        batch = _batch_for(s, cfg, anchors)
        detections.append(detect(model, batch, image_id, cfg))
        pre_nms.extend(detect(model, batch, image_id, cfg, apply_nms=False))
        gts.extend(GroundTruth(b, c, image_id) for b, c in batch.scene.objects)
    flat = [d for dets in detections for d in dets]
    return ExperimentReport(
        config=cfg.to_dict(),
        w_loc=w_loc,
        epochs=history,
        detections=detections,
        ground_truth=gts,
        ap_table=evaluation.coco_ap(flat, gts),
        spearman=positive_detection_correlation(flat, gts),
        stats=evaluation.score_iou_stats(flat, gts),
        pre_nms_spearman=positive_detection_correlation(pre_nms, gts),
        pre_nms_stats=evaluation.score_iou_stats(pre_nms, gts),
        diagnostics=diag,
        model=model,
    )
