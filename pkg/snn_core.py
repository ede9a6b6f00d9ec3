"""
Integrate-and-Fire dynamics, surrogate gradients and network topology.

Neurons integrate drive into a membrane potential U and fire when U exceeds
the threshold theta (strictly). Single-spike neurons emit at most one spike
per step, multi-spike neurons emit floor(U / theta). Both use a soft reset
(U -= spikes * theta). A stateless ReLU mode exists for reference ANN runs.
"""

import json
import logging
import math
from dataclasses import asdict, dataclass, field
from typing import TYPE_CHECKING, Dict, List, Optional, Sequence, Tuple, Union

import numpy as np

from config import config
from tensor_engine import (Tape, Tensor, _grad_of, _tracks, conv2d, linear, relu,
                           reshape, sum_pool)

if TYPE_CHECKING:
    from chip_emulator import CoreBudget
    from event_io import FrameSequence

logger = logging.getLogger(__name__)

ACTIVATIONS = ("single", "multi", "relu")
NORMALIZATIONS = ("none", "batch", "layer")
SURROGATE_KINDS = ("single_exponential", "periodic_exponential")
REPRESENTATION_FOR_MODE = {"single": "binary", "multi": "histogram", "relu": "histogram"}


class SNNError(Exception):
    """Base class for spiking network errors"""


class NonFiniteState(SNNError):
    pass


class NonPositiveLambda(SNNError):
    pass


class SpecError(SNNError):
    pass


@dataclass
class LayerParams:
    W: Tensor
    theta: float

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"Threshold must be positive, got {self.theta}")
        if not np.all(np.isfinite(self.W.values)):
            raise ValueError("Layer weights must be finite")


@dataclass
class IFLayerState:
    U: Tensor
    cap_hits: int = 0

    @classmethod
    def zeros(cls, shape: Tuple[int, ...]) -> "IFLayerState":
        return cls(U=Tensor(np.zeros(shape)))


@dataclass
class SpikeTensor:
    tensor: Tensor
    mode: str

    @property
    def counts(self) -> np.ndarray:
        return np.rint(self.tensor.values).astype(np.int64)

    @property
    def total(self) -> float:
        return float(self.tensor.values.sum())


@dataclass
class SurrogateConfig:
    kind: str = "single_exponential"
    beta: Optional[float] = None
    theta: float = 1.0

    def __post_init__(self):
        if self.kind not in SURROGATE_KINDS:
            raise ValueError(f"Unknown surrogate kind '{self.kind}'")
        if self.beta is not None and not self.beta > 0:
            raise ValueError(f"Surrogate steepness must be positive, got {self.beta}")

    @property
    def steepness(self) -> float:
        return self.beta if self.beta is not None else config.SURROGATE_STEEPNESS / self.theta

    @classmethod
    def for_mode(cls, mode: str, theta: float, beta: Optional[float] = None) -> "SurrogateConfig":
        kind = "periodic_exponential" if mode == "multi" else "single_exponential"
        return cls(kind=kind, beta=beta, theta=theta)


def surrogate_grad(U, cfg: SurrogateConfig):
    """Backward-pass stand-in for the derivative of the spike function at U"""
    beta = cfg.steepness
    theta = cfg.theta
    U = np.asarray(U, dtype=np.float64)
    if cfg.kind == "single_exponential":
        distance = np.abs(U - theta)
    else:
        phase = np.mod(U, theta)
        distance = np.minimum(phase, theta - phase)
    g = beta * np.exp(-beta * distance)
    return float(g) if g.ndim == 0 else g


def if_step(state: IFLayerState, drive: Tensor, params: LayerParams, mode: str,
            surrogate: Optional[SurrogateConfig] = None, tape: Optional[Tape] = None,
            max_spikes: Optional[int] = None,
            detach_reset: Optional[bool] = None) -> Tuple[IFLayerState, SpikeTensor]:
    """
    One Integrate-and-Fire update: U += drive, fire, soft reset.

    The spike count is capped at `max_spikes` to mirror 16-bit state limits;
    cap hits are counted on the returned state rather than raised.
    """
    if mode not in ACTIVATIONS:
        raise ValueError(f"Unknown activation mode '{mode}'")
    if mode == "relu":
        return state, SpikeTensor(relu(drive, tape=tape), mode)

    theta = params.theta
    max_spikes = config.MAX_SPIKES_PER_STEP if max_spikes is None else max_spikes
    detach_reset = config.DETACH_RESET if detach_reset is None else detach_reset
    surrogate = surrogate or SurrogateConfig.for_mode(mode, theta)

    U_prev = state.U
    if U_prev.shape != drive.shape:
        raise SNNError(f"Drive shape {drive.shape} does not match state shape {U_prev.shape}")
    u = U_prev.values + drive.values
    if mode == "single":
        spikes = (u > theta).astype(np.float64)
    else:
        spikes = np.where(u > theta, np.floor(u / theta), 0.0)
    capped = spikes > max_spikes
    cap_hits = state.cap_hits + int(capped.sum())
    if capped.any():
        spikes = np.minimum(spikes, max_spikes)
    u_next = u - spikes * theta
    if not np.all(np.isfinite(u_next)):
        raise NonFiniteState("Membrane potential became non-finite")

    tracked = _tracks(tape, U_prev, drive)
    s_out = Tensor(spikes, requires_grad=tracked)
    U_out = Tensor(u_next, requires_grad=tracked)
    if tracked:
        g = surrogate_grad(u, surrogate)

        def backward():
            through_state = _grad_of(U_out)
            if not detach_reset:
                through_state = through_state * (1.0 - theta * g)
            d_u = through_state + _grad_of(s_out) * g
            if drive.requires_grad:
                drive.accumulate(d_u)
            if U_prev.requires_grad:
                U_prev.accumulate(d_u)

        tape.record(f"if_{mode}", (U_prev, drive), (s_out, U_out), backward)
    return IFLayerState(U=U_out, cap_hits=cap_hits), SpikeTensor(s_out, mode)


def scale_layer(params: LayerParams, lam: float) -> LayerParams:
    """Jointly scale weights and threshold, which leaves spike trains unchanged"""
    if not lam > 0:
        raise NonPositiveLambda(f"Scale factor must be positive, got {lam}")
    return LayerParams(W=Tensor(params.W.values * lam), theta=params.theta * lam)


@dataclass
class LayerSpec:
    kind: str  # "conv" or "fc"
    n_in: int
    n_out: int
    pool: bool = False

    def __post_init__(self):
        if self.kind not in ("conv", "fc"):
            raise SpecError(f"Unknown layer kind '{self.kind}'")
        if self.kind == "fc" and self.pool:
            raise SpecError("Fully-connected layers cannot pool")


@dataclass
class NetworkSpec:
    input_shape: Tuple[int, int, int]
    layers: List[LayerSpec]
    activation: str = "multi"
    normalization: str = "layer"

    def __post_init__(self):
        self.input_shape = tuple(int(v) for v in self.input_shape)
        if self.activation not in ACTIVATIONS:
            raise SpecError(f"Unknown activation '{self.activation}'")
        if self.normalization not in NORMALIZATIONS:
            raise SpecError(f"Unknown normalization '{self.normalization}'")
        self.layer_shapes()

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    def layer_shapes(self) -> List[Dict[str, Tuple[int, ...]]]:
        """Input, neuron and output shapes of every layer"""
        shapes = []
        current: Tuple[int, ...] = self.input_shape
        for index, layer in enumerate(self.layers):
            if layer.kind == "conv":
                if len(current) != 3 or current[0] != layer.n_in:
                    raise SpecError(f"Layer {index}: conv expects {layer.n_in} channels, got {current}")
                _, h, w = current
                neurons = (layer.n_out, h, w)
                if layer.pool:
                    if h % 2 or w % 2:
                        raise SpecError(f"Layer {index}: cannot pool odd extent {h}x{w}")
                    out = (layer.n_out, h // 2, w // 2)
                else:
                    out = neurons
            else:
                flat = int(np.prod(current))
                if flat != layer.n_in:
                    raise SpecError(f"Layer {index}: fc expects {layer.n_in} inputs, got {flat}")
                neurons = out = (layer.n_out,)
            shapes.append({"input": current, "neurons": neurons, "output": out})
            current = out
        return shapes

    def with_activation(self, activation: str) -> "NetworkSpec":
        return NetworkSpec(self.input_shape, list(self.layers), activation, self.normalization)

    def to_dict(self) -> Dict:
        return {
            "input_shape": list(self.input_shape),
            "activation": self.activation,
            "normalization": self.normalization,
            "layers": [asdict(layer) for layer in self.layers],
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "NetworkSpec":
        allowed = {"input_shape", "activation", "normalization", "layers"}
        unknown = set(data) - allowed
        if unknown:
            raise SpecError(f"Unknown network spec keys: {sorted(unknown)}")
        layers = []
        for entry in data["layers"]:
            extra = set(entry) - {"kind", "n_in", "n_out", "pool"}
            if extra:
                raise SpecError(f"Unknown layer keys: {sorted(extra)}")
            layers.append(LayerSpec(**entry))
        return cls(
            input_shape=tuple(data["input_shape"]),
            layers=layers,
            activation=data.get("activation", "multi"),
            normalization=data.get("normalization", "layer"),
        )


def save_network_spec(path, spec: NetworkSpec) -> None:
    """Human-readable JSON with keys input_shape, activation, normalization, layers[kind, n_in, n_out, pool]"""
    with open(path, "w", encoding="utf-8") as f:
        json.dump(spec.to_dict(), f, indent=2)


def load_network_spec(path) -> NetworkSpec:
    with open(path, "r", encoding="utf-8") as f:
        return NetworkSpec.from_dict(json.load(f))


def speck_yolo_spec(n_out: int = 128, activation: str = "multi", normalization: str = "layer",
                    input_shape: Tuple[int, int, int] = (2, 128, 128)) -> NetworkSpec:
    """Four pooled 3x3 conv layers and four bias-free fully-connected layers"""
    channels = (16, 32, 64, 64)
    layers = []
    c_in = input_shape[0]
    for c_out in channels:
        layers.append(LayerSpec("conv", c_in, c_out, pool=True))
        c_in = c_out
    flat = channels[-1] * (input_shape[1] // 16) * (input_shape[2] // 16)
    widths = (256, 256, 256, n_out)
    for width in widths:
        layers.append(LayerSpec("fc", flat, width))
        flat = width
    return NetworkSpec(input_shape, layers, activation, normalization)


def yole_spec(n_out: int = 4 * 4 * (2 * 5 + 100), activation: str = "single",
              normalization: str = "none") -> NetworkSpec:
    """Larger 240x240 reference topology used to show a multi-class model cannot be deployed"""
    input_shape = (2, 240, 240)
    layers = [
        LayerSpec("conv", 2, 16, pool=True),
        LayerSpec("conv", 16, 32, pool=True),
        LayerSpec("conv", 32, 64, pool=True),
        LayerSpec("conv", 64, 128, pool=True),
        LayerSpec("conv", 128, 256),
        LayerSpec("fc", 256 * 15 * 15, 1024),
        LayerSpec("fc", 1024, n_out),
    ]
    return NetworkSpec(input_shape, layers, activation, normalization)


def compact_spec(resolution: int = 32, n_out: int = 32, activation: str = "multi",
                 normalization: str = "layer", channels: Sequence[int] = (4, 8, 8, 8),
                 hidden: int = 64) -> NetworkSpec:
    """Same layout as the default topology, shrunk for desk-scale runs"""
    layers = []
    c_in = 2
    side = resolution
    for c_out in channels:
        layers.append(LayerSpec("conv", c_in, c_out, pool=True))
        c_in = c_out
        side //= 2
    flat = c_in * side * side
    for width in (hidden, hidden, hidden, n_out):
        layers.append(LayerSpec("fc", flat, width))
        flat = width
    return NetworkSpec((2, resolution, resolution), layers, activation, normalization)


def init_params(spec: NetworkSpec, seed: int, theta: Optional[float] = None,
                gain: float = 1.0) -> List[LayerParams]:
    """He-style normal initialisation; every layer starts with the same threshold"""
    theta = config.DEFAULT_THETA if theta is None else theta
    rng = np.random.default_rng(seed)
    params = []
    for layer in spec.layers:
        if layer.kind == "conv":
            shape = (layer.n_out, layer.n_in, 3, 3)
            fan_in = layer.n_in * 9
        else:
            shape = (layer.n_out, layer.n_in)
            fan_in = layer.n_in
        std = gain * theta * math.sqrt(2.0 / fan_in)
        params.append(LayerParams(W=Tensor(rng.normal(0.0, std, size=shape)), theta=theta))
    return params


@dataclass
class NetworkRun:
    """Spikes of every layer at every timestep plus the final states"""

    layer_spikes: List[List[SpikeTensor]]
    outputs: List[Tensor]
    states: List[IFLayerState]
    cap_hits: int = 0

    def layer_totals(self) -> np.ndarray:
        """Spike totals with shape [layers, T]"""
        return np.array([[s.total for s in layer] for layer in self.layer_spikes])

    @property
    def total_spikes(self) -> float:
        return float(self.layer_totals().sum()) if self.layer_spikes else 0.0


def initial_states(spec: NetworkSpec) -> List[IFLayerState]:
    return [IFLayerState.zeros(s["neurons"]) for s in spec.layer_shapes()]


def run_network(spec: NetworkSpec, params: Sequence[LayerParams],
                frames: Union["FrameSequence", np.ndarray], mode: Optional[str] = None,
                states: Optional[List[IFLayerState]] = None, tape: Optional[Tape] = None,
                surrogate_beta: Optional[float] = None) -> NetworkRun:
    """
    Run the spiking stack over every timestep of one sample.

    Each layer is conv -> IF -> sum-pool (or fc -> IF). States start at zero
    unless `states` from a previous call are passed in, in which case the run
    continues seamlessly from where that call stopped.
    """
    mode = mode or spec.activation
    data = frames.data if hasattr(frames, "data") else np.asarray(frames)
    if tuple(data.shape[1:]) != spec.input_shape:
        raise SpecError(f"Frames {data.shape[1:]} do not match network input {spec.input_shape}")
    if len(params) != len(spec.layers):
        raise SpecError(f"Expected {len(spec.layers)} parameter sets, got {len(params)}")
    states = list(states) if states is not None else initial_states(spec)
    surrogates = [SurrogateConfig.for_mode(mode, p.theta, surrogate_beta) for p in params]

    layer_spikes: List[List[SpikeTensor]] = [[] for _ in spec.layers]
    outputs = []
    for t in range(data.shape[0]):
        x = Tensor(data[t])
        for index, (layer, p) in enumerate(zip(spec.layers, params)):
            if layer.kind == "conv":
                drive = conv2d(x, p.W, tape=tape)
            else:
                if x.values.ndim != 1:
                    x = reshape(x, (-1,), tape=tape)
                drive = linear(x, p.W, None, tape=tape)
            states[index], spikes = if_step(states[index], drive, p, mode,
                                            surrogate=surrogates[index], tape=tape)
            out = spikes.tensor
            if layer.pool:
                out = sum_pool(out, 2, tape=tape)
            layer_spikes[index].append(SpikeTensor(out, mode))
            x = out
        outputs.append(x)

    cap_hits = sum(s.cap_hits for s in states)
    if cap_hits:
        logger.warning(f"Multi-spike cap reached {cap_hits} times during the run")
    return NetworkRun(layer_spikes=layer_spikes, outputs=outputs, states=states, cap_hits=cap_hits)


@dataclass
class ConstraintReport:
    layers: List[Dict] = field(default_factory=list)
    core_count: int = 0
    violations: List[str] = field(default_factory=list)
    kernel_utilization: float = 0.0
    neuron_utilization: float = 0.0

    @property
    def passed(self) -> bool:
        return not self.violations

    def to_dict(self) -> Dict:
        return {
            "passed": self.passed,
            "core_count": self.core_count,
            "kernel_utilization": self.kernel_utilization,
            "neuron_utilization": self.neuron_utilization,
            "violations": list(self.violations),
            "layers": list(self.layers),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def check_constraints(spec: NetworkSpec, budget: "CoreBudget") -> ConstraintReport:
    """Per-core kernel/neuron memory, core count and input resolution against the budget"""
    report = ConstraintReport(core_count=len(spec.layers))
    kernel_total = neuron_total = 0
    for index, (layer, shapes) in enumerate(zip(spec.layers, spec.layer_shapes())):
        if layer.kind == "conv":
            kernel = layer.n_in * layer.n_out * 9
        else:
            kernel = layer.n_in * layer.n_out
        neurons = int(np.prod(shapes["output"]))
        kernel_ok = kernel <= budget.max_kernel_entries
        neuron_ok = neurons <= budget.max_neuron_entries
        report.layers.append({
            "layer": index,
            "kind": layer.kind,
            "kernel_entries": kernel,
            "neuron_entries": neurons,
            "kernel_ok": kernel_ok,
            "neuron_ok": neuron_ok,
        })
        if not kernel_ok:
            report.violations.append(
                f"layer {index}: kernel memory {kernel} > {budget.max_kernel_entries}"
            )
        if not neuron_ok:
            report.violations.append(
                f"layer {index}: neuron memory {neurons} > {budget.max_neuron_entries}"
            )
        kernel_total += kernel
        neuron_total += neurons

    if report.core_count > budget.core_count:
        report.violations.append(f"core count > {budget.core_count} ({report.core_count} layers)")
    _, height, width = spec.input_shape
    limit = budget.max_input_resolution
    if height > limit or width > limit:
        report.violations.append(f"input resolution {width}x{height} exceeds {limit}x{limit}")

    report.kernel_utilization = kernel_total / (budget.max_kernel_entries * budget.core_count)
    report.neuron_utilization = neuron_total / (budget.max_neuron_entries * budget.core_count)
    if report.violations:
        logger.warning(f"Constraint check failed: {'; '.join(report.violations)}")
    return report
