"""
Surrogate-gradient BPTT training of the spiking detector.

The model is the on-chip spiking stack plus the off-chip decode head. Each
sample is unrolled over its timesteps with membrane state carried through,
decoded per timestep, and trained on the mean detection loss plus the
firing-rate penalty. Samples of a batch run on a thread pool, each on its
own tape; gradients are reduced in batch order.
"""

import hashlib
import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from chip_emulator import (ConstraintViolation, CoreBudget, clock_driven_report, estimate_power,
                           quantize, readout_counts, run_per_event)
from config import config
from detection import (DecodeHead, FiringRateStats, GridPrediction, LossWeights, RegularizationConfig,
                       decode_batch, decode_head, firing_rate_penalty, mean_ap, mean_ap_range, to_boxes,
                       yolo_loss)
from event_io import (AugmentConfig, DegenerateBox, FrameSequence, Sample, augment, bin_events,
                      downsample)
from snn_core import (REPRESENTATION_FOR_MODE, LayerParams, NetworkRun, NetworkSpec, check_constraints,
                      init_params, run_network)
from tensor_engine import (BatchNormState, Tape, Tensor, add_scalars, backward, load_tensors,
                           save_tensors, scale)

logger = logging.getLogger(__name__)

EVAL_MODES = ("float_sim", "quant_sim", "emulator")


class TrainingError(Exception):
    """Base class for training errors"""


class DivergedLoss(TrainingError):
    pass


class EmptySplit(TrainingError):
    pass


@dataclass
class TrainConfig:
    epochs: int = field(default_factory=lambda: config.EPOCHS)
    batch_size: int = field(default_factory=lambda: config.BATCH_SIZE)
    learning_rate: float = field(default_factory=lambda: config.LEARNING_RATE)
    beta1: float = field(default_factory=lambda: config.ADAM_BETA1)
    beta2: float = field(default_factory=lambda: config.ADAM_BETA2)
    adam_eps: float = field(default_factory=lambda: config.ADAM_EPS)
    window_us: int = field(default_factory=lambda: config.WINDOW_US)
    activation: str = "multi"
    representation: Optional[str] = None  # paired with the activation when unset
    lam: float = field(default_factory=lambda: config.REG_LAMBDA)
    layer_weights: Optional[List[float]] = None
    coord_weight: float = field(default_factory=lambda: config.LAMBDA_COORD)
    noobj_weight: float = field(default_factory=lambda: config.LAMBDA_NOOBJ)
    seed: int = field(default_factory=lambda: config.SEED)
    augment: bool = True
    theta: float = field(default_factory=lambda: config.DEFAULT_THETA)
    init_gain: float = 1.0
    surrogate_beta: Optional[float] = None
    threads: int = field(default_factory=lambda: config.THREADS)

    def __post_init__(self):
        if self.epochs < 1 or self.batch_size < 1:
            raise ValueError("epochs and batch_size must be positive")
        if self.lam < 0:
            raise ValueError(f"Regularization weight must be non-negative, got {self.lam}")
        if self.window_us <= 0:
            raise ValueError(f"window_us must be positive, got {self.window_us}")
        if self.representation is None:
            self.representation = REPRESENTATION_FOR_MODE[self.activation]
        if self.representation not in ("binary", "histogram"):
            raise ValueError(f"Unknown representation '{self.representation}'")

    def loss_weights(self) -> LossWeights:
        return LossWeights(coord=self.coord_weight, noobj=self.noobj_weight)

    def regularization(self) -> RegularizationConfig:
        return RegularizationConfig(lam=self.lam, layer_weights=self.layer_weights)

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "TrainConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"Unknown training config keys: {sorted(unknown)}")
        return cls(**data)

    def config_hash(self) -> str:
        # threads do not change results
        payload = {k: v for k, v in self.to_dict().items() if k != "threads"}
        return hashlib.sha256(json.dumps(payload, sort_keys=True).encode("utf-8")).hexdigest()


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.step_count = 0
        self.m: Dict[str, np.ndarray] = {}
        self.v: Dict[str, np.ndarray] = {}

    def step(self, params: Dict[str, Tensor], grads: Dict[str, np.ndarray]) -> None:
        self.step_count += 1
        bias1 = 1 - self.beta1 ** self.step_count
        bias2 = 1 - self.beta2 ** self.step_count
        for name, param in params.items():
            g = grads[name]
            m = self.m.get(name, np.zeros_like(g))
            v = self.v.get(name, np.zeros_like(g))
            m = self.beta1 * m + (1 - self.beta1) * g
            v = self.beta2 * v + (1 - self.beta2) * g * g
            self.m[name], self.v[name] = m, v
            param.values -= self.lr * (m / bias1) / (np.sqrt(v / bias2) + self.eps)

    def state_tensors(self) -> Dict[str, np.ndarray]:
        state = {f"adam.m.{k}": v for k, v in self.m.items()}
        state.update({f"adam.v.{k}": v for k, v in self.v.items()})
        return state

    def load_state(self, tensors: Dict[str, np.ndarray], step_count: int) -> None:
        self.step_count = step_count
        for key, value in tensors.items():
            if key.startswith("adam.m."):
                self.m[key[len("adam.m."):]] = value.copy()
            elif key.startswith("adam.v."):
                self.v[key[len("adam.v."):]] = value.copy()


@dataclass
class DetectorModel:
    """On-chip spiking layers plus the off-chip decode head"""

    spec: NetworkSpec
    layers: List[LayerParams]
    head: DecodeHead

    @classmethod
    def create(cls, spec: NetworkSpec, seed: int, theta: Optional[float] = None,
               gain: float = 1.0) -> "DetectorModel":
        layers = init_params(spec, seed, theta=theta, gain=gain)
        for i, p in enumerate(layers):
            p.W.requires_grad = True
            p.W.name = f"layer{i}.W"
        head = DecodeHead.create(spec.n_out, frame_size=spec.input_shape[2],
                                 normalization=spec.normalization, seed=seed + 1)
        return cls(spec, layers, head)

    @property
    def frame_size(self) -> int:
        return self.spec.input_shape[2]

    def parameters(self) -> Dict[str, Tensor]:
        params = {f"layer{i}.W": p.W for i, p in enumerate(self.layers)}
        params.update(self.head.parameters())
        return params

    def bound(self) -> "DetectorModel":
        """A view whose tensors share values but own their gradients"""
        layers = [
            LayerParams(W=Tensor(p.W.values, requires_grad=True, name=p.W.name), theta=p.theta)
            for p in self.layers
        ]
        h = self.head
        head = replace(
            h,
            W=Tensor(h.W.values, requires_grad=True, name=h.W.name),
            b=Tensor(h.b.values, requires_grad=True, name=h.b.name),
            gamma=Tensor(h.gamma.values, requires_grad=True, name=h.gamma.name),
            beta=Tensor(h.beta.values, requires_grad=True, name=h.beta.name),
        )
        return DetectorModel(self.spec, layers, head)

    def run(self, frames: FrameSequence, mode: Optional[str] = None, tape: Optional[Tape] = None,
            layers: Optional[Sequence[LayerParams]] = None, surrogate_beta: Optional[float] = None) -> NetworkRun:
        return run_network(self.spec, layers or self.layers, frames, mode=mode, tape=tape,
                           surrogate_beta=surrogate_beta)

    def predict(self, frames: FrameSequence, mode: Optional[str] = None,
                layers: Optional[Sequence[LayerParams]] = None) -> Tuple[List[GridPrediction], NetworkRun]:
        run = self.run(frames, mode=mode, layers=layers)
        return [decode_head(out, self.head) for out in run.outputs], run


def fit_to_input(sample: Sample, spec: NetworkSpec) -> Sample:
    """Downsample a sample whose sensor resolution differs from the network input"""
    _, height, width = spec.input_shape
    if tuple(sample.stream.resolution) == (width, height):
        return sample
    sx = width / sample.stream.resolution[0]
    sy = height / sample.stream.resolution[1]

    def rescale(box):
        return box.scaled(sx, sy).clamp(width, height)

    return replace(
        sample,
        stream=downsample(sample.stream, (width, height)),
        boxes=[rescale(b) for b in sample.boxes],
        track=[rescale(b) for b in sample.track] if sample.track else sample.track,
    )


def _frames(sample: Sample, cfg: TrainConfig) -> FrameSequence:
    return bin_events(sample.stream, cfg.window_us, cfg.representation)


def _forward_sample(model: DetectorModel, sample: Sample, cfg: TrainConfig, tape: Tape) -> NetworkRun:
    return model.run(_frames(sample, cfg), mode=cfg.activation, tape=tape, surrogate_beta=cfg.surrogate_beta)


def _sample_loss(run: NetworkRun, preds: Sequence[GridPrediction], sample: Sample, cfg: TrainConfig,
                 tape: Tape) -> Tuple[Tensor, Dict[str, float]]:
    timesteps = len(preds)
    if timesteps == 0:
        raise TrainingError(f"Sample '{sample.name}' has no timesteps")
    weights = cfg.loss_weights()
    terms = [yolo_loss(p, sample.boxes_at(t, cfg.window_us), weights, tape=tape) for t, p in enumerate(preds)]
    detection = scale(add_scalars(terms, tape=tape), 1.0 / timesteps, tape=tape)
    stats = FiringRateStats.from_run(run, cfg.window_us)
    penalty = firing_rate_penalty(stats, cfg.regularization(), tape=tape)
    total = add_scalars([detection, penalty], tape=tape)
    return total, {
        "loss": float(total.values),
        "detection_loss": float(detection.values),
        "penalty": float(penalty.values),
        "spikes": stats.total_spikes,
    }


def _sample_gradients(model: DetectorModel, sample: Sample, cfg: TrainConfig):
    view = model.bound()
    tape = Tape()
    run = _forward_sample(view, sample, cfg, tape)
    preds = [decode_head(out, view.head, tape=tape) for out in run.outputs]
    loss, terms = _sample_loss(run, preds, sample, cfg, tape)
    grads = backward(tape, loss, view.parameters())
    return grads, terms


def _batch_gradients_bn(model: DetectorModel, batch: Sequence[Sample], cfg: TrainConfig):
    """Batch normalization couples the samples, so the whole batch shares one tape"""
    view = model.bound()
    tape = Tape()
    runs = [_forward_sample(view, s, cfg, tape) for s in batch]
    preds: List[List[GridPrediction]] = [[] for _ in batch]
    horizon = max(len(r.outputs) for r in runs)
    for t in range(horizon):
        members = [i for i, r in enumerate(runs) if t < len(r.outputs)]
        decoded = decode_batch([runs[i].outputs[t] for i in members], view.head, training=True, tape=tape)
        for i, pred in zip(members, decoded):
            preds[i].append(pred)
    losses, all_terms = [], []
    for run, pred, sample in zip(runs, preds, batch):
        loss, terms = _sample_loss(run, pred, sample, cfg, tape)
        losses.append(loss)
        all_terms.append(terms)
    total = scale(add_scalars(losses, tape=tape), 1.0 / len(batch), tape=tape)
    grads = backward(tape, total, view.parameters())
    return grads, all_terms


def train_step(model: DetectorModel, optimizer: Adam, batch: Sequence[Sample], cfg: TrainConfig,
               pool: Optional[ThreadPoolExecutor] = None) -> Dict[str, float]:
    """One optimizer step on the mean loss of a batch; returns mean loss terms"""
    params = model.parameters()
    if model.spec.normalization == "batch" and len(batch) > 1:
        grads, terms = _batch_gradients_bn(model, batch, cfg)
    else:
        if pool is not None:
            results = list(pool.map(lambda s: _sample_gradients(model, s, cfg), batch))
        else:
            results = [_sample_gradients(model, s, cfg) for s in batch]
        grads = {name: np.zeros_like(p.values) for name, p in params.items()}
        for sample_grads, _ in results:
            for name in grads:
                grads[name] += sample_grads[name]
        grads = {k: g / len(batch) for k, g in grads.items()}
        terms = [t for _, t in results]

    mean_terms = {key: float(np.mean([t[key] for t in terms])) for key in terms[0]}
    if not np.isfinite(mean_terms["loss"]):
        raise DivergedLoss(f"Loss became non-finite ({mean_terms['loss']})")
    optimizer.step(params, grads)
    return mean_terms


@dataclass
class Checkpoint:
    spec: NetworkSpec
    tensors: Dict[str, np.ndarray]
    thetas: List[float]
    grid: Tuple[int, int]
    epoch: int
    config: Dict
    config_hash: str
    history: List[Dict] = field(default_factory=list)
    optimizer: Dict[str, np.ndarray] = field(default_factory=dict)
    optimizer_step: int = 0

    @classmethod
    def from_model(cls, model: DetectorModel, cfg: TrainConfig, epoch: int, history: List[Dict],
                   optimizer: Optional[Adam] = None) -> "Checkpoint":
        tensors = {name: t.values.copy() for name, t in model.parameters().items()}
        tensors.setdefault("head.gamma", model.head.gamma.values.copy())
        tensors.setdefault("head.beta", model.head.beta.values.copy())
        if model.head.bn_state is not None:
            tensors["bn.running_mean"] = model.head.bn_state.running_mean.copy()
            tensors["bn.running_var"] = model.head.bn_state.running_var.copy()
        return cls(
            spec=model.spec,
            tensors=tensors,
            thetas=[p.theta for p in model.layers],
            grid=tuple(model.head.grid),
            epoch=epoch,
            config=cfg.to_dict(),
            config_hash=cfg.config_hash(),
            history=[dict(row) for row in history],
            optimizer={k: v.copy() for k, v in optimizer.state_tensors().items()} if optimizer else {},
            optimizer_step=optimizer.step_count if optimizer else 0,
        )

    @property
    def train_config(self) -> TrainConfig:
        return TrainConfig.from_dict(self.config)

    def model(self) -> DetectorModel:
        layers = [
            LayerParams(W=Tensor(self.tensors[f"layer{i}.W"].copy(), requires_grad=True, name=f"layer{i}.W"),
                        theta=theta)
            for i, theta in enumerate(self.thetas)
        ]
        bn_state = None
        if "bn.running_mean" in self.tensors:
            bn_state = BatchNormState(self.tensors["bn.running_mean"].copy(),
                                      self.tensors["bn.running_var"].copy(), config.BN_MOMENTUM)
        head = DecodeHead(
            W=Tensor(self.tensors["head.W"].copy(), requires_grad=True, name="head.W"),
            b=Tensor(self.tensors["head.b"].copy(), requires_grad=True, name="head.b"),
            gamma=Tensor(self.tensors["head.gamma"].copy(), requires_grad=True, name="head.gamma"),
            beta=Tensor(self.tensors["head.beta"].copy(), requires_grad=True, name="head.beta"),
            normalization=self.spec.normalization,
            grid=self.grid,
            frame_size=self.spec.input_shape[2],
            bn_state=bn_state,
        )
        return DetectorModel(self.spec, layers, head)

    def save(self, path) -> str:
        metadata = {
            "kind": "detector_checkpoint",
            "spec": self.spec.to_dict(),
            "thetas": self.thetas,
            "grid": list(self.grid),
            "epoch": self.epoch,
            "config": self.config,
            "config_hash": self.config_hash,
            "history": self.history,
            "optimizer_step": self.optimizer_step,
        }
        digest = save_tensors(path, {**self.tensors, **self.optimizer}, metadata)
        logger.info(f"Checkpoint for epoch {self.epoch} saved to {path}")
        return digest

    @classmethod
    def load(cls, path) -> "Checkpoint":
        arrays, metadata = load_tensors(path)
        if metadata.get("kind") != "detector_checkpoint":
            raise TrainingError(f"{path} is not a detector checkpoint")
        optimizer = {k: v for k, v in arrays.items() if k.startswith("adam.")}
        tensors = {k: v for k, v in arrays.items() if not k.startswith("adam.")}
        return cls(
            spec=NetworkSpec.from_dict(metadata["spec"]),
            tensors=tensors,
            thetas=[float(t) for t in metadata["thetas"]],
            grid=tuple(metadata["grid"]),
            epoch=int(metadata["epoch"]),
            config=metadata["config"],
            config_hash=metadata["config_hash"],
            history=metadata.get("history", []),
            optimizer=optimizer,
            optimizer_step=int(metadata.get("optimizer_step", 0)),
        )


@dataclass
class TrainResult:
    checkpoint: Checkpoint
    history: pd.DataFrame


@dataclass
class Metrics:
    mode: str
    map50: float
    map_range: float
    spikes_per_s: float
    synops_per_s: float
    frames: int
    layer_spikes_per_s: List[float] = field(default_factory=list)
    power_mw: Optional[float] = None
    stall: Optional[Dict] = None  # emulator mode only

    def to_dict(self) -> Dict:
        return asdict(self)


def _augment_epoch(samples: Sequence[Sample], cfg: TrainConfig, epoch: int) -> List[Sample]:
    if not cfg.augment:
        return list(samples)
    out = []
    for index, sample in enumerate(samples):
        seed = cfg.seed * 1_000_003 + epoch * 10_007 + index
        try:
            out.append(augment(sample, seed, AugmentConfig()))
        except DegenerateBox:
            logger.debug(f"Augmentation collapsed a box of '{sample.name}'; using the original")
            out.append(sample)
    return out


def train(spec: NetworkSpec, train_samples: Sequence[Sample], val_samples: Sequence[Sample],
          cfg: Optional[TrainConfig] = None, budget: Optional[CoreBudget] = None,
          out_dir: Optional[Path] = None, enforce_constraints: bool = True) -> TrainResult:
    """Train with BPTT and keep the checkpoint with the best validation mAP[0.5]"""
    cfg = cfg or TrainConfig()
    if not train_samples:
        raise EmptySplit("Training split is empty")
    if not val_samples:
        raise EmptySplit("Validation split is empty")
    if enforce_constraints:
        report = check_constraints(spec, budget or CoreBudget())
        if not report.passed:
            raise ConstraintViolation(config.ERROR_CONSTRAINTS.format(violations="; ".join(report.violations)))

    train_samples = [fit_to_input(s, spec) for s in train_samples]
    val_samples = [fit_to_input(s, spec) for s in val_samples]
    model = DetectorModel.create(spec, cfg.seed, theta=cfg.theta, gain=cfg.init_gain)
    optimizer = Adam(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.adam_eps)
    rng = np.random.default_rng(cfg.seed)

    history: List[Dict] = []
    best: Optional[Checkpoint] = None
    best_map = -1.0
    with ThreadPoolExecutor(max_workers=max(1, cfg.threads)) as pool:
        for epoch in range(1, cfg.epochs + 1):
            epoch_samples = _augment_epoch(train_samples, cfg, epoch)
            order = rng.permutation(len(epoch_samples))
            epoch_terms = []
            for start in range(0, len(order), cfg.batch_size):
                batch = [epoch_samples[i] for i in order[start:start + cfg.batch_size]]
                epoch_terms.append(train_step(model, optimizer, batch, cfg, pool))

            val = _evaluate_model(model, val_samples, cfg, "float_sim", pool=pool)
            row = {"epoch": epoch}
            for key in epoch_terms[0]:
                row[key] = float(np.mean([t[key] for t in epoch_terms]))
            row["val_map"] = val.map50
            row["val_spikes_per_s"] = val.spikes_per_s
            for i, rate in enumerate(val.layer_spikes_per_s):
                row[f"layer{i}_spikes_per_s"] = rate
            history.append(row)
            logger.info(
                f"Epoch {epoch}/{cfg.epochs}: loss={row['loss']:.4f} "
                f"(det {row['detection_loss']:.4f}, pen {row['penalty']:.4f}), "
                f"val mAP[0.5]={val.map50:.3f}, spikes/s={val.spikes_per_s:.0f}"
            )
            if val.map50 > best_map:
                best_map = val.map50
                best = Checkpoint.from_model(model, cfg, epoch, history, optimizer)

    best.history = [dict(row) for row in history]
    frame = pd.DataFrame(history)
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        frame.to_csv(out_dir / "metrics.csv", index=False)
        best.save(out_dir / "checkpoint.sfck")
    return TrainResult(checkpoint=best, history=frame)


def _evaluate_sample(model: DetectorModel, sample: Sample, cfg: TrainConfig, mode: str,
                     layers: Optional[List[LayerParams]], qnet, budget: Optional[CoreBudget]):
    frames = _frames(sample, cfg)
    gts = [sample.boxes_at(t, cfg.window_us) for t in range(frames.timesteps)]
    if mode == "emulator":
        events, report = run_per_event(qnet, sample.stream, budget, check=False)
        counts = readout_counts(events, qnet.output_grid, cfg.window_us, frames.timesteps)
        preds = [decode_head(Tensor(row.astype(np.float64)), model.head) for row in counts]
        power = estimate_power(report).average_mw
        return preds, gts, report, power
    preds, run = model.predict(frames, mode=cfg.activation, layers=layers)
    return preds, gts, clock_driven_report(model.spec, frames, run), None


def _evaluate_model(model: DetectorModel, samples: Sequence[Sample], cfg: TrainConfig, mode: str,
                    budget: Optional[CoreBudget] = None, pool: Optional[ThreadPoolExecutor] = None) -> Metrics:
    if mode not in EVAL_MODES:
        raise ValueError(f"Unknown evaluation mode '{mode}'")
    layers = qnet = None
    if mode != "float_sim":
        qnet = quantize(model.spec, model.layers)
        layers = qnet.as_params()
    if mode == "emulator":
        budget = budget or CoreBudget()
        report = check_constraints(model.spec, budget)
        if not report.passed:
            raise ConstraintViolation(config.ERROR_CONSTRAINTS.format(violations="; ".join(report.violations)))

    def job(sample):
        return _evaluate_sample(model, sample, cfg, mode, layers, qnet, budget)

    results = list(pool.map(job, samples)) if pool is not None else [job(s) for s in samples]
    preds, gts = [], []
    neuron_spikes = synops = duration = 0.0
    layer_spikes = None
    powers = []
    stalled = dropped = 0
    max_delay = 0.0
    for sample_preds, sample_gts, report, power in results:
        preds.extend(to_boxes(p) for p in sample_preds)
        gts.extend(sample_gts)
        neuron_spikes += report.neuron_spikes
        synops += report.total_synops
        duration += report.duration_s
        per_layer = np.array(report.spikes[1:])
        layer_spikes = per_layer if layer_spikes is None else layer_spikes + per_layer
        if power is not None:
            powers.append(power)
            stalled += int(report.stall)
            dropped += report.dropped_events
            max_delay = max(max_delay, report.max_delay_us)

    def rate(value):
        return value / duration if duration > 0 else 0.0

    stall = None
    if mode == "emulator":
        stall = {"stalled_samples": stalled, "dropped_events": dropped, "max_delay_us": max_delay}
    has_truth = any(gts)
    return Metrics(
        mode=mode,
        map50=mean_ap(preds, gts) if has_truth else 0.0,
        map_range=mean_ap_range(preds, gts) if has_truth else 0.0,
        spikes_per_s=rate(neuron_spikes),
        synops_per_s=rate(synops),
        frames=len(preds),
        layer_spikes_per_s=[rate(float(v)) for v in (layer_spikes if layer_spikes is not None else [])],
        power_mw=float(np.mean(powers)) if powers else None,
        stall=stall,
    )


def evaluate(checkpoint: Checkpoint, samples: Sequence[Sample], mode: str = "float_sim",
             budget: Optional[CoreBudget] = None, threads: Optional[int] = None) -> Metrics:
    """mAP[0.5], mAP[0.5:0.95], spikes/s and SynOps/s in float, quantized or per-event mode"""
    cfg = checkpoint.train_config
    model = checkpoint.model()
    samples = [fit_to_input(s, model.spec) for s in samples]
    with ThreadPoolExecutor(max_workers=max(1, threads or config.THREADS)) as pool:
        metrics = _evaluate_model(model, samples, cfg, mode, budget=budget, pool=pool)
    logger.info(f"Evaluation ({mode}): mAP[0.5]={metrics.map50:.3f}, spikes/s={metrics.spikes_per_s:.0f}")
    return metrics


SWEEP_COLUMNS = [
    "lambda", "sim_map", "sim_quant_map", "chip_map", "chip_power_mw",
    "chip_spikes_per_s", "sim_spikes_per_s", "sim_synops_per_s_m", "chip_stall",
]


def sweep_lambda(spec: NetworkSpec, train_samples: Sequence[Sample], val_samples: Sequence[Sample],
                 base: TrainConfig, lambdas: Sequence[float], budget: Optional[CoreBudget] = None,
                 out_dir: Optional[Path] = None) -> pd.DataFrame:
    """Train one model per regularization weight and evaluate it in all three modes"""
    if len(lambdas) < 2:
        raise TrainingError(f"A sweep needs at least 2 regularization values, got {len(lambdas)}")
    budget = budget or CoreBudget()
    rows = []
    for lam in lambdas:
        cfg = replace(base, lam=float(lam))
        cell_dir = Path(out_dir) / f"lambda_{lam:g}" if out_dir is not None else None
        result = train(spec, train_samples, val_samples, cfg, budget=budget, out_dir=cell_dir)
        sim = evaluate(result.checkpoint, val_samples, "float_sim", budget, cfg.threads)
        quant = evaluate(result.checkpoint, val_samples, "quant_sim", budget, cfg.threads)
        chip = evaluate(result.checkpoint, val_samples, "emulator", budget, cfg.threads)
        rows.append({
            "lambda": float(lam),
            "sim_map": sim.map50,
            "sim_quant_map": quant.map50,
            "chip_map": chip.map50,
            "chip_power_mw": chip.power_mw,
            "chip_spikes_per_s": chip.spikes_per_s,
            "sim_spikes_per_s": sim.spikes_per_s,
            "sim_synops_per_s_m": sim.synops_per_s / 1e6,
            "chip_stall": bool(chip.stall and chip.stall.get("stalled_samples", 0) > 0),
        })
        logger.info(f"Sweep row lambda={lam:g}: sim mAP={sim.map50:.3f}, chip spikes/s={chip.spikes_per_s:.0f}")
    table = pd.DataFrame(rows, columns=SWEEP_COLUMNS)
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
        table.to_csv(Path(out_dir) / "sweep.csv", index=False)
    return table
