"""
YOLO-style single-class detection on top of the spiking backbone.

The off-chip head normalizes the final-layer spike counts of one timestep,
applies a linear layer with bias and squashes everything through a logistic
function into an [S, S, B*5] grid of (cx, cy, w, h, conf).
"""

import json
import logging
from dataclasses import dataclass, field
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import config
from event_io import BoundingBox
from tensor_engine import (BatchNormState, ShapeMismatch, Tape, Tensor, _grad_of, _tracks,
                           batch_norm, layer_norm, linear, reshape, sigmoid)

logger = logging.getLogger(__name__)

MAP_RANGE_THRESHOLDS = np.linspace(0.5, 0.95, 10)
SIZE_FLOOR = 1e-12  # lower bound on predicted w, h under the square root


class DetectionError(Exception):
    """Base class for detection errors"""


class NoGroundTruth(DetectionError):
    pass


@dataclass
class LossWeights:
    coord: float = field(default_factory=lambda: config.LAMBDA_COORD)
    noobj: float = field(default_factory=lambda: config.LAMBDA_NOOBJ)

    def to_dict(self) -> Dict:
        return {"coord": self.coord, "noobj": self.noobj}


@dataclass
class RegularizationConfig:
    lam: float = field(default_factory=lambda: config.REG_LAMBDA)
    layer_weights: Optional[List[float]] = None  # optional per-layer multipliers on lam

    def __post_init__(self):
        if self.lam < 0:
            raise ValueError(f"Regularization weight must be non-negative, got {self.lam}")
        if self.layer_weights is not None and any(w < 0 for w in self.layer_weights):
            raise ValueError("Per-layer regularization weights must be non-negative")

    def weight_for(self, layer: int) -> float:
        if self.layer_weights is None:
            return self.lam
        return self.lam * self.layer_weights[layer]


@dataclass
class FiringRateStats:
    """Per-layer, per-timestep spike totals of one sample window"""

    totals: np.ndarray  # [layers, T]
    window_us: int
    tensors: Optional[List[List[Tensor]]] = None

    def __post_init__(self):
        self.totals = np.atleast_2d(np.asarray(self.totals, dtype=np.float64))
        if (self.totals < 0).any():
            raise ValueError("Spike totals must be non-negative")

    @classmethod
    def from_run(cls, run, window_us: int) -> "FiringRateStats":
        tensors = [[s.tensor for s in layer] for layer in run.layer_spikes]
        return cls(totals=run.layer_totals(), window_us=window_us, tensors=tensors)

    @property
    def timesteps(self) -> int:
        return int(self.totals.shape[1])

    @property
    def duration_s(self) -> float:
        return self.timesteps * self.window_us * 1e-6

    @property
    def total_spikes(self) -> float:
        return float(self.totals.sum())

    @property
    def spikes_per_s(self) -> float:
        if self.duration_s == 0:
            return 0.0
        return self.total_spikes / self.duration_s

    def layer_spikes_per_s(self) -> np.ndarray:
        if self.duration_s == 0:
            return np.zeros(self.totals.shape[0])
        return self.totals.sum(axis=1) / self.duration_s


@dataclass
class GridPrediction:
    """Squashed head output [S, S, B*5] for one timestep"""

    tensor: Tensor
    grid: Tuple[int, int]
    frame_size: int

    def __post_init__(self):
        s, b = self.grid
        if self.tensor.shape != (s, s, b * 5):
            raise ShapeMismatch(f"Grid prediction {self.tensor.shape} does not match S={s}, B={b}")

    @property
    def values(self) -> np.ndarray:
        return self.tensor.values


@dataclass
class DetectionSet:
    """(box, confidence) predictions for one frame"""

    detections: List[Tuple[BoundingBox, float]] = field(default_factory=list)

    def __post_init__(self):
        for _, conf in self.detections:
            if not 0.0 <= conf <= 1.0:
                raise ValueError(f"Confidence {conf} outside [0, 1]")

    def __len__(self) -> int:
        return len(self.detections)

    def __iter__(self) -> Iterator[Tuple[BoundingBox, float]]:
        return iter(self.detections)

    def top(self) -> Optional[Tuple[BoundingBox, float]]:
        if not self.detections:
            return None
        return max(self.detections, key=lambda d: d[1])

    def to_list(self) -> List[Dict]:
        return [dict(box.to_dict(), confidence=conf) for box, conf in self.detections]

    @classmethod
    def from_list(cls, items: Sequence[Dict]) -> "DetectionSet":
        return cls([(BoundingBox.from_dict(d), float(d["confidence"])) for d in items])


@dataclass
class DecodeHead:
    """Off-chip normalization and linear decode with bias"""

    W: Tensor
    b: Tensor
    gamma: Tensor
    beta: Tensor
    normalization: str = "layer"
    grid: Tuple[int, int] = (4, 2)
    frame_size: int = 128
    bn_state: Optional[BatchNormState] = None

    @classmethod
    def create(cls, n_in: int, frame_size: int, normalization: str = "layer",
               grid: Optional[Tuple[int, int]] = None, seed: int = 0) -> "DecodeHead":
        grid = grid or (config.GRID_S, config.GRID_B)
        s, b = grid
        n_out = s * s * b * 5
        rng = np.random.default_rng(seed)
        W = rng.normal(0.0, 1.0 / np.sqrt(n_in), size=(n_out, n_in))
        bn_state = None
        if normalization == "batch":
            bn_state = BatchNormState(np.zeros(n_in), np.ones(n_in), config.BN_MOMENTUM)
        return cls(
            W=Tensor(W, requires_grad=True, name="head.W"),
            b=Tensor(np.zeros(n_out), requires_grad=True, name="head.b"),
            gamma=Tensor(np.ones(n_in), requires_grad=True, name="head.gamma"),
            beta=Tensor(np.zeros(n_in), requires_grad=True, name="head.beta"),
            normalization=normalization,
            grid=grid,
            frame_size=frame_size,
            bn_state=bn_state,
        )

    def parameters(self) -> Dict[str, Tensor]:
        params = {"head.W": self.W, "head.b": self.b}
        if self.normalization != "none":
            params["head.gamma"] = self.gamma
            params["head.beta"] = self.beta
        return params


def _flat(spikes: Tensor, tape: Optional[Tape]) -> Tensor:
    if spikes.values.ndim == 1:
        return spikes
    return reshape(spikes, (-1,), tape=tape)


def _project(normed: Tensor, head: DecodeHead, tape: Optional[Tape]) -> GridPrediction:
    s, b = head.grid
    y = sigmoid(linear(normed, head.W, head.b, tape=tape), tape=tape)
    return GridPrediction(reshape(y, (s, s, b * 5), tape=tape), head.grid, head.frame_size)


def decode_head(spikes: Tensor, head: DecodeHead, tape: Optional[Tape] = None) -> GridPrediction:
    """Decode one timestep; batch normalization uses its running statistics here"""
    x = _flat(spikes, tape)
    if x.shape[0] != head.W.shape[1]:
        raise ShapeMismatch(f"Head expects {head.W.shape[1]} inputs, got {x.shape[0]}")
    if head.normalization == "layer":
        x = layer_norm(x, head.gamma, head.beta, config.LN_EPS, tape=tape)
    elif head.normalization == "batch":
        x = batch_norm([x], head.gamma, head.beta, head.bn_state, training=False,
                       eps=config.LN_EPS, tape=tape)[0]
    return _project(x, head, tape)


def decode_batch(rows: Sequence[Tensor], head: DecodeHead, training: bool,
                 tape: Optional[Tape] = None) -> List[GridPrediction]:
    """Decode one timestep for several samples at once (batch statistics when training)"""
    xs = [_flat(r, tape) for r in rows]
    if head.normalization == "batch" and training and len(xs) > 1:
        normed = batch_norm(xs, head.gamma, head.beta, head.bn_state, training=True,
                            eps=config.LN_EPS, tape=tape)
        return [_project(x, head, tape) for x in normed]
    return [decode_head(x, head, tape=tape) for x in xs]


def _cell_box(values: np.ndarray, row: int, col: int, k: int, s: int, frame: int) -> BoundingBox:
    cell = frame / s
    cx = (col + values[row, col, 5 * k]) * cell
    cy = (row + values[row, col, 5 * k + 1]) * cell
    w = values[row, col, 5 * k + 2] * frame
    h = values[row, col, 5 * k + 3] * frame
    return BoundingBox(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2,
                       float(values[row, col, 5 * k + 4]), 0)


def to_boxes(pred: GridPrediction, keep_all: bool = False) -> DetectionSet:
    """Per cell, the predictor with the highest confidence (or all B when keep_all)"""
    s, b = pred.grid
    values = pred.values
    detections = []
    for row in range(s):
        for col in range(s):
            candidates = range(b) if keep_all else [int(np.argmax(values[row, col, 4::5]))]
            for k in candidates:
                box = _cell_box(values, row, col, k, s, pred.frame_size).clamp(pred.frame_size, pred.frame_size)
                detections.append((box, float(box.objectness)))
    return DetectionSet(detections)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = a.area + b.area - inter
    return float(inter / union) if union > 0 else 0.0


def _loss_terms(values: np.ndarray, gt: Sequence[BoundingBox], grid: Tuple[int, int], frame: int,
                weights: LossWeights):
    """Loss components and d(loss)/d(values)"""
    s, b = grid
    cell = frame / s
    grad = np.zeros_like(values)
    coord = obj = 0.0
    responsible = np.zeros((s, s, b), dtype=bool)
    assigned = set()

    for box in gt:
        cx, cy = box.center
        col = min(max(int(cx // cell), 0), s - 1)
        row = min(max(int(cy // cell), 0), s - 1)
        if (row, col) in assigned:
            logger.debug(f"Cell ({row}, {col}) already holds an object; extra box ignored")
            continue
        assigned.add((row, col))

        overlaps = [iou(_cell_box(values, row, col, k, s, frame), box) for k in range(b)]
        k = int(np.argmax(overlaps))
        responsible[row, col, k] = True
        target = np.array([cx / cell - col, cy / cell - row, box.width / frame, box.height / frame])
        p = values[row, col, 5 * k:5 * k + 4]
        base = 5 * k

        diff_xy = p[:2] - target[:2]
        sqrt_p = np.sqrt(np.maximum(p[2:4], SIZE_FLOOR))
        diff_wh = sqrt_p - np.sqrt(target[2:4])
        coord += weights.coord * float((diff_xy ** 2).sum() + (diff_wh ** 2).sum())
        grad[row, col, base:base + 2] += 2 * weights.coord * diff_xy
        grad[row, col, base + 2:base + 4] += 2 * weights.coord * diff_wh / (2 * sqrt_p)

        conf = values[row, col, base + 4]
        obj += float((conf - 1.0) ** 2)
        grad[row, col, base + 4] += 2 * (conf - 1.0)

    confs = values[:, :, 4::5]
    idle = ~responsible
    noobj = weights.noobj * float((confs[idle] ** 2).sum())
    grad[:, :, 4::5] += np.where(idle, 2 * weights.noobj * confs, 0.0)
    return {"coord": coord, "obj": obj, "noobj": noobj}, grad


def yolo_loss_terms(pred: GridPrediction, gt: Sequence[BoundingBox],
                    weights: Optional[LossWeights] = None) -> Dict[str, float]:
    if not gt:
        raise NoGroundTruth("yolo_loss needs at least one ground-truth box")
    terms, _ = _loss_terms(pred.values, gt, pred.grid, pred.frame_size, weights or LossWeights())
    return terms


def yolo_loss(pred: GridPrediction, gt: Sequence[BoundingBox], weights: Optional[LossWeights] = None,
              tape: Optional[Tape] = None) -> Tensor:
    """Coordinate (with square-rooted sizes), objectness and no-object squared errors"""
    if not gt:
        raise NoGroundTruth("yolo_loss needs at least one ground-truth box")
    terms, grad = _loss_terms(pred.values, gt, pred.grid, pred.frame_size, weights or LossWeights())
    total = terms["coord"] + terms["obj"] + terms["noobj"]
    tracked = _tracks(tape, pred.tensor)
    out = Tensor(np.array(total), requires_grad=tracked)
    if tracked:
        def backward():
            pred.tensor.accumulate(grad * float(_grad_of(out)))

        tape.record("yolo_loss", (pred.tensor,), (out,), backward)
    return out


def firing_rate_penalty(stats: FiringRateStats, cfg: RegularizationConfig,
                        tape: Optional[Tape] = None) -> Tensor:
    """L1 penalty: lam times every spike of every layer at every timestep"""
    n_layers = stats.totals.shape[0]
    if cfg.layer_weights is not None and len(cfg.layer_weights) != n_layers:
        raise ValueError(f"{len(cfg.layer_weights)} layer weights for {n_layers} layers")
    weights = np.array([cfg.weight_for(l) for l in range(n_layers)])
    value = float((weights[:, None] * stats.totals).sum())

    inputs = [t for layer in (stats.tensors or []) for t in layer]
    tracked = cfg.lam > 0 and _tracks(tape, *inputs) if inputs else False
    out = Tensor(np.array(value), requires_grad=tracked)
    if tracked:
        def backward():
            g = float(_grad_of(out))
            for layer_index, layer in enumerate(stats.tensors):
                w = weights[layer_index]
                for spikes in layer:
                    if spikes.requires_grad:
                        spikes.accumulate(np.full(spikes.shape, g * w))

        tape.record("firing_rate_penalty", tuple(inputs), (out,), backward)
    return out


def _match(preds: Sequence[DetectionSet], gts: Sequence[Sequence[BoundingBox]], iou_thresh: float):
    n_gt = sum(len(g) for g in gts)
    if n_gt == 0:
        raise NoGroundTruth("mean_ap needs at least one ground-truth box")
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} prediction frames for {len(gts)} ground-truth frames")

    flat = [(frame, box, conf) for frame, dets in enumerate(preds) for box, conf in dets]
    confs = np.array([c for _, _, c in flat], dtype=np.float64)
    order = np.argsort(-confs, kind="stable")
    used = [np.zeros(len(g), dtype=bool) for g in gts]
    tp = np.zeros(len(flat))
    for rank, i in enumerate(order):
        frame, box, _ = flat[i]
        best, best_iou = -1, iou_thresh
        for j, truth in enumerate(gts[frame]):
            if used[frame][j]:
                continue
            overlap = iou(box, truth)
            if overlap >= best_iou and (best < 0 or overlap > best_iou):
                best, best_iou = j, overlap
        if best >= 0:
            used[frame][best] = True
            tp[rank] = 1.0
    return confs[order], tp, n_gt


def pr_curve(preds: Sequence[DetectionSet], gts: Sequence[Sequence[BoundingBox]],
             iou_thresh: Optional[float] = None) -> pd.DataFrame:
    iou_thresh = config.IOU_THRESHOLD if iou_thresh is None else iou_thresh
    confs, tp, n_gt = _match(preds, gts, iou_thresh)
    cum_tp = np.cumsum(tp)
    ranks = np.arange(1, len(tp) + 1)
    return pd.DataFrame({
        "confidence": confs,
        "tp": tp.astype(int),
        "precision": cum_tp / ranks if len(tp) else cum_tp,
        "recall": cum_tp / n_gt,
    })


def mean_ap(preds: Sequence[DetectionSet], gts: Sequence[Sequence[BoundingBox]],
            iou_thresh: Optional[float] = None) -> float:
    """All-points interpolated average precision (single class, so mAP == AP)"""
    curve = pr_curve(preds, gts, iou_thresh)
    if curve.empty:
        return 0.0
    recall = np.concatenate([[0.0], curve["recall"].to_numpy(), [1.0]])
    precision = np.concatenate([[0.0], curve["precision"].to_numpy(), [0.0]])
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    steps = np.flatnonzero(recall[1:] != recall[:-1])
    return float(((recall[steps + 1] - recall[steps]) * precision[steps + 1]).sum())


def mean_ap_range(preds: Sequence[DetectionSet], gts: Sequence[Sequence[BoundingBox]]) -> float:
    """mAP averaged over IoU thresholds 0.50, 0.55, ... 0.95"""
    return float(np.mean([mean_ap(preds, gts, t) for t in MAP_RANGE_THRESHOLDS]))


def save_detections_jsonl(path, preds: Sequence[DetectionSet],
                          gts: Sequence[Sequence[BoundingBox]]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for frame, (dets, truth) in enumerate(zip(preds, gts)):
            record = {
                "frame": frame,
                "predictions": dets.to_list(),
                "ground_truth": [b.to_dict() for b in truth],
            }
            f.write(json.dumps(record) + "\n")


def load_detections_jsonl(path) -> Tuple[List[DetectionSet], List[List[BoundingBox]]]:
    preds, gts = [], []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            if not line.strip():
                continue
            try:
                record = json.loads(line)
                preds.append(DetectionSet.from_list(record["predictions"]))
                gts.append([BoundingBox.from_dict(b) for b in record["ground_truth"]])
            except (KeyError, ValueError, TypeError) as e:
                raise DetectionError(f"{path}:{line_no}: malformed detection record ({e})") from e
    return preds, gts
