"""
Emulation of per-event asynchronous inference on a nine-core neuromorphic chip.

A trained network is quantized to 8-bit weights with co-scaled integer
thresholds, then every input event is pushed through a chain of FIFO cores.
Each core processes one event at a time at a bounded SynOps rate, updates
16-bit saturating membranes, fires multi-spike packets and forwards them to
the next core. Telemetry covers SynOps, spikes, queueing delay, drops and an
activity-proportional power estimate.
"""

import heapq
import itertools
import json
import logging
import math
from collections import deque
from dataclasses import asdict, dataclass, field, fields
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from config import config
from event_io import EventStream, bin_events
from snn_core import LayerParams, NetworkSpec, check_constraints, run_network
from tensor_engine import Tensor, load_tensors, save_tensors

logger = logging.getLogger(__name__)

I16_MIN, I16_MAX = -(2 ** 15), 2 ** 15 - 1
WEIGHT_LIMIT = 127

# Complete (spikes/s, mW) rows of the published regularization sweep
MEASURED_POWER_POINTS = (
    (567002, 33.2),
    (553794, 33.1),
    (411300, 24.8),
    (319966, 19.4),
    (279745, 17.3),
    (192292, 11.8),
    (104767, 7.3),
)


class EmulatorError(Exception):
    """Base class for chip emulator errors"""


class ZeroWeights(EmulatorError):
    pass


class ConstraintViolation(EmulatorError):
    pass


class DegenerateFit(EmulatorError):
    pass


@dataclass
class CoreBudget:
    """Per-core limits; capacities are estimates, the datasheet values are not public"""

    max_kernel_entries: int = field(default_factory=lambda: config.MAX_KERNEL_ENTRIES)
    max_neuron_entries: int = field(default_factory=lambda: config.MAX_NEURON_ENTRIES)
    max_synops_per_s: float = field(default_factory=lambda: config.MAX_SYNOPS_PER_S)
    core_count: int = field(default_factory=lambda: config.CORE_COUNT)
    max_input_resolution: int = field(default_factory=lambda: config.MAX_INPUT_RESOLUTION)
    queue_capacity: int = field(default_factory=lambda: config.QUEUE_CAPACITY)
    stall_delay_us: float = field(default_factory=lambda: config.STALL_DELAY_US)

    def __post_init__(self):
        for f in fields(self):
            if not getattr(self, f.name) > 0:
                raise ValueError(f"Budget field '{f.name}' must be positive")

    def to_dict(self) -> Dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict) -> "CoreBudget":
        known = {f.name for f in fields(cls)}
        unknown = set(data) - known
        if unknown:
            raise ValueError(f"Unknown budget keys: {sorted(unknown)}")
        return cls(**data)

    @classmethod
    def load(cls, name_or_path: Optional[str]) -> "CoreBudget":
        """'default' (or None) for config defaults, otherwise a JSON file path"""
        if name_or_path in (None, "", "default"):
            return cls()
        with open(name_or_path, "r", encoding="utf-8") as f:
            return cls.from_dict(json.load(f))


@dataclass
class QuantizedLayer:
    W_q: np.ndarray  # int8
    scale: float
    theta_q: int
    max_error: float = 0.0  # max |W - W_q / scale| over the layer

    def __post_init__(self):
        self.W_q = np.asarray(self.W_q, dtype=np.int8)
        if np.abs(self.W_q.astype(np.int64)).max(initial=0) > WEIGHT_LIMIT:
            raise ValueError("Quantized weights must lie within [-127, 127]")
        if self.theta_q < 1:
            raise ValueError(f"Quantized threshold must be >= 1, got {self.theta_q}")


@dataclass
class QuantizedNetwork:
    spec: NetworkSpec
    layers: List[QuantizedLayer]

    @property
    def output_grid(self) -> Tuple[int, int, int]:
        return _grid(self.spec.layer_shapes()[-1]["output"])

    def as_params(self) -> List[LayerParams]:
        """Integer weights and thresholds as float layer parameters for clock-driven runs"""
        return [
            LayerParams(W=Tensor(layer.W_q.astype(np.float64)), theta=float(layer.theta_q))
            for layer in self.layers
        ]

    def error_summary(self) -> pd.DataFrame:
        rows = []
        for index, (spec_layer, layer) in enumerate(zip(self.spec.layers, self.layers)):
            step = 1.0 / layer.scale
            rows.append({
                "layer": index,
                "kind": spec_layer.kind,
                "scale": layer.scale,
                "theta_q": layer.theta_q,
                "max_abs_error": layer.max_error,
                "error_in_steps": layer.max_error / step,
            })
        return pd.DataFrame(rows)


def quantize(spec: NetworkSpec, params: Sequence[LayerParams]) -> QuantizedNetwork:
    """Per-layer symmetric 8-bit quantization with the threshold scaled by the same factor"""
    layers = []
    for index, p in enumerate(params):
        peak = float(np.abs(p.W.values).max(initial=0.0))
        if peak == 0.0:
            raise ZeroWeights(f"Layer {index} has all-zero weights; no scale can be chosen")
        scale = WEIGHT_LIMIT / peak
        W_q = np.clip(np.rint(p.W.values * scale), -WEIGHT_LIMIT, WEIGHT_LIMIT)
        theta_q = max(1, int(round(p.theta * scale)))
        error = float(np.abs(p.W.values - W_q / scale).max())
        layers.append(QuantizedLayer(W_q=W_q, scale=scale, theta_q=theta_q, max_error=error))
        logger.debug(f"Layer {index}: scale={scale:.4f}, theta_q={theta_q}, max error={error:.3e}")
    return QuantizedNetwork(spec=spec, layers=layers)


def save_quantized(path, qnet: QuantizedNetwork) -> str:
    """Checkpoint-format file: int8 payload per layer, scales and thresholds in the metadata"""
    metadata = {
        "kind": "quantized_network",
        "spec": qnet.spec.to_dict(),
        "layers": [
            {"scale": q.scale, "theta_q": q.theta_q, "max_error": q.max_error} for q in qnet.layers
        ],
    }
    tensors = {f"layer{i}.W_q": q.W_q for i, q in enumerate(qnet.layers)}
    return save_tensors(path, tensors, metadata)


def load_quantized(path) -> QuantizedNetwork:
    tensors, metadata = load_tensors(path)
    if metadata.get("kind") != "quantized_network":
        raise EmulatorError(f"{path} does not hold a quantized network")
    layers = [
        QuantizedLayer(W_q=tensors[f"layer{i}.W_q"], scale=meta["scale"], theta_q=meta["theta_q"],
                       max_error=meta.get("max_error", 0.0))
        for i, meta in enumerate(metadata["layers"])
    ]
    return QuantizedNetwork(spec=NetworkSpec.from_dict(metadata["spec"]), layers=layers)


@dataclass(frozen=True)
class ChipEvent:
    layer: int
    channel: int
    y: int
    x: int
    t_us: float
    count: int = 1


def _grid(shape: Tuple[int, ...]) -> Tuple[int, int, int]:
    """Spatial view of an output shape: conv maps stay [C,H,W], vectors become [1,1,N]"""
    if len(shape) == 3:
        return tuple(int(v) for v in shape)
    return 1, 1, int(shape[0])


def layer_fanouts(spec: NetworkSpec) -> List[np.ndarray]:
    """
    Fanout of every spike source, indexed by source.

    Source 0 is the sensor input, source l+1 the output of layer l. A spike
    entering a conv layer touches C_out * rows * cols synapses, where rows and
    cols drop to 2 at the frame border; a spike entering an FC layer touches
    its full width. Spikes leaving the last layer are read out off-chip.
    """
    shapes = spec.layer_shapes()
    fanouts = []
    for layer, shape in zip(spec.layers, shapes):
        if layer.kind == "conv":
            c, h, w = _grid(shape["input"])
            rows = np.full(h, 3)
            rows[0] -= 1
            rows[-1] -= 1
            cols = np.full(w, 3)
            cols[0] -= 1
            cols[-1] -= 1
            if h == 1:
                rows[:] = 1
            if w == 1:
                cols[:] = 1
            per_pixel = layer.n_out * np.outer(rows, cols)
            fanouts.append(np.broadcast_to(per_pixel, (c, h, w)).astype(np.int64))
        else:
            fanouts.append(np.full((1, 1, layer.n_in), layer.n_out, dtype=np.int64))
    fanouts.append(np.zeros(_grid(shapes[-1]["output"]), dtype=np.int64))
    return fanouts


@dataclass
class SynOpsReport:
    """Activity and bandwidth telemetry; lists are indexed by spike source (0 = sensor)"""

    duration_s: float
    synops: List[float]
    spikes: List[float]
    delayed: List[int] = field(default_factory=list)
    dropped: List[int] = field(default_factory=list)
    queue_peak: List[int] = field(default_factory=list)
    max_delay_us: float = 0.0
    completion_us: float = 0.0
    saturations: int = 0
    cap_hits: int = 0
    stall: bool = False
    spike_times_us: Optional[np.ndarray] = None
    spike_counts: Optional[np.ndarray] = None
    occupancy: Optional[pd.DataFrame] = None

    @property
    def total_synops(self) -> float:
        return float(sum(self.synops))

    @property
    def neuron_spikes(self) -> float:
        """Spikes emitted by on-chip neurons (sensor events excluded)"""
        return float(sum(self.spikes[1:]))

    def _rate(self, value: float) -> float:
        return value / self.duration_s if self.duration_s > 0 else 0.0

    @property
    def synops_per_s(self) -> List[float]:
        return [self._rate(s) for s in self.synops]

    @property
    def total_synops_per_s(self) -> float:
        return self._rate(self.total_synops)

    @property
    def spikes_per_s(self) -> float:
        return self._rate(self.neuron_spikes)

    @property
    def delayed_events(self) -> int:
        return int(sum(self.delayed))

    @property
    def dropped_events(self) -> int:
        return int(sum(self.dropped))

    def to_dict(self) -> Dict:
        return {
            "duration_s": self.duration_s,
            "synops": list(map(float, self.synops)),
            "synops_per_s": self.synops_per_s,
            "total_synops_per_s": self.total_synops_per_s,
            "spikes": list(map(float, self.spikes)),
            "spikes_per_s": self.spikes_per_s,
            "delayed": list(self.delayed),
            "dropped": list(self.dropped),
            "queue_peak": list(self.queue_peak),
            "max_delay_us": self.max_delay_us,
            "completion_us": self.completion_us,
            "saturations": self.saturations,
            "cap_hits": self.cap_hits,
            "stall": self.stall,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def synops_count(spikes: Sequence[np.ndarray], fanouts: Sequence[np.ndarray], duration_s: float = 0.0,
                 spike_times_us: Optional[np.ndarray] = None,
                 spike_counts: Optional[np.ndarray] = None) -> SynOpsReport:
    """SynOps of every source: its spike counts times the matching fanout map"""
    if len(spikes) != len(fanouts):
        raise ValueError(f"{len(spikes)} spike records for {len(fanouts)} fanout maps")
    synops, totals = [], []
    for record, fanout in zip(spikes, fanouts):
        record = np.asarray(record, dtype=np.float64)
        if record.size != np.size(fanout):
            raise ValueError(f"Spike record of size {record.size} does not match fanout size {np.size(fanout)}")
        synops.append(float((record.reshape(-1) * np.asarray(fanout).reshape(-1)).sum()))
        totals.append(float(record.sum()))
    return SynOpsReport(duration_s=duration_s, synops=synops, spikes=totals,
                        spike_times_us=spike_times_us, spike_counts=spike_counts)


def clock_driven_report(spec: NetworkSpec, frames, run) -> SynOpsReport:
    """SynOps telemetry of a clock-driven run, with per-timestep spike totals as the timeline"""
    records = [frames.data.sum(axis=0)]
    for layer in run.layer_spikes:
        records.append(np.sum([s.tensor.values for s in layer], axis=0))
    totals = run.layer_totals().sum(axis=0) if run.layer_spikes else np.zeros(frames.timesteps)
    times = np.arange(frames.timesteps) * frames.window_us + frames.window_us / 2.0
    duration_s = frames.timesteps * frames.window_us * 1e-6
    return synops_count(records, layer_fanouts(spec), duration_s, times, totals)


class _Core:
    """One convolutional core holding the weights and membranes of one layer"""

    def __init__(self, index: int, kind: str, pool: bool, layer: QuantizedLayer,
                 neuron_shape: Tuple[int, ...], fanout: np.ndarray):
        self.index = index
        self.kind = kind
        self.pool = pool
        self.theta = int(layer.theta_q)
        weights = layer.W_q.astype(np.int64)
        self.weights = weights[:, :, ::-1, ::-1].copy() if kind == "conv" else weights
        self.U = np.zeros(neuron_shape, dtype=np.int64)
        self.fanout = fanout
        self.free_at = 0.0
        self.waiting: deque = deque()
        self.synops = 0.0
        self.events = 0
        self.spikes = 0
        self.delayed = 0
        self.dropped = 0
        self.queue_peak = 0
        self.saturations = 0
        self.cap_hits = 0

    def integrate(self, channel: int, y: int, x: int, count: int) -> List[Tuple[int, int, int, int]]:
        """Apply one input packet and return fired (channel, y, x, count) in output coordinates"""
        if self.kind == "conv":
            _, h, w = self.U.shape
            i0, i1 = max(y - 1, 0), min(y + 2, h)
            j0, j1 = max(x - 1, 0), min(x + 2, w)
            region = self.U[:, i0:i1, j0:j1]
            region += count * self.weights[:, channel, i0 - y + 1:i1 - y + 1, j0 - x + 1:j1 - x + 1]
        else:
            i0 = j0 = 0
            region = self.U
            region += count * self.weights[:, x]

        clipped = (region > I16_MAX) | (region < I16_MIN)
        if clipped.any():
            self.saturations += int(clipped.sum())
            np.clip(region, I16_MIN, I16_MAX, out=region)

        firing = region > self.theta
        if not firing.any():
            return []
        spikes = np.where(firing, region // self.theta, 0)
        capped = spikes > config.MAX_SPIKES_PER_STEP
        if capped.any():
            self.cap_hits += int(capped.sum())
            spikes = np.minimum(spikes, config.MAX_SPIKES_PER_STEP)
        region -= spikes * self.theta

        fired: Dict[Tuple[int, int, int], int] = {}
        for coords in zip(*np.nonzero(spikes)):
            n = int(spikes[coords])
            if self.kind == "conv":
                o, i, j = int(coords[0]), i0 + int(coords[1]), j0 + int(coords[2])
                if self.pool:
                    i, j = i // 2, j // 2
                key = (o, i, j)
            else:
                key = (0, 0, int(coords[0]))
            fired[key] = fired.get(key, 0) + n
        self.spikes += sum(fired.values())
        return [(c, i, j, n) for (c, i, j), n in sorted(fired.items(), key=lambda kv: (kv[0][1], kv[0][2], kv[0][0]))]


def _to_input(kind: str, grid: Tuple[int, int, int], channel: int, y: int, x: int) -> Tuple[int, int, int]:
    if kind == "conv":
        return channel, y, x
    _, h, w = grid
    return 0, 0, (channel * h + y) * w + x


def run_per_event(qnet: QuantizedNetwork, stream: EventStream, budget: Optional[CoreBudget] = None,
                  check: bool = True) -> Tuple[List[ChipEvent], SynOpsReport]:
    """
    Discrete-event simulation of asynchronous per-event inference.

    Packets are ordered by (timestamp, layer, y, x, channel, arrival). A core
    serves its FIFO one packet at a time; service time is packet SynOps over
    the core's SynOps/s limit. Packets arriving to a queue already holding
    `queue_capacity` waiting packets are dropped. Output spikes of the last
    core are returned with their completion timestamps.
    """
    budget = budget or CoreBudget()
    spec = qnet.spec
    if check:
        report = check_constraints(spec, budget)
        if not report.passed:
            raise ConstraintViolation(config.ERROR_CONSTRAINTS.format(violations="; ".join(report.violations)))
    c_in, h_in, w_in = spec.input_shape
    if tuple(stream.resolution) != (w_in, h_in) or c_in != 2:
        raise ConstraintViolation(
            f"Stream resolution {stream.resolution} does not match network input {w_in}x{h_in}"
        )

    shapes = spec.layer_shapes()
    fanouts = layer_fanouts(spec)
    cores = [
        _Core(i, layer.kind, layer.pool, q, shape["neurons"], fanouts[i])
        for i, (layer, q, shape) in enumerate(zip(spec.layers, qnet.layers, shapes))
    ]
    grids = [_grid(shape["output"]) for shape in shapes]
    n_layers = len(cores)

    seq = itertools.count()
    ev = stream.events
    heap = []
    for t, y, x, p in zip(ev["t"], ev["y"], ev["x"], ev["p"]):
        channel, y, x = _to_input(cores[0].kind, spec.input_shape, int(p), int(y), int(x))
        heap.append((float(t), 0, y, x, channel, next(seq), 1))
    heapq.heapify(heap)

    outputs: List[ChipEvent] = []
    spike_times: List[float] = []
    spike_counts: List[int] = []
    occupancy: List[Tuple[float, int, int]] = []
    max_delay = completion = 0.0
    service_scale = 1e6 / budget.max_synops_per_s

    while heap:
        t, layer, y, x, channel, _, count = heapq.heappop(heap)
        core = cores[layer]
        waiting = core.waiting
        while waiting and waiting[0] <= t:
            waiting.popleft()
        queued = len(waiting)
        occupancy.append((t, layer, queued))
        if queued >= budget.queue_capacity:
            core.dropped += 1
            continue

        synops = count * int(core.fanout[channel, y, x])
        start = max(t, core.free_at)
        done = start + float(synops) * service_scale
        core.free_at = done
        if start > t:
            waiting.append(start)
            core.queue_peak = max(core.queue_peak, len(waiting))
            core.delayed += 1
            max_delay = max(max_delay, start - t)
        core.synops += float(synops)
        core.events += count
        completion = max(completion, done)

        for out_c, out_y, out_x, n in core.integrate(channel, y, x, count):
            spike_times.append(done)
            spike_counts.append(n)
            if layer + 1 < n_layers:
                nc, ny, nx = _to_input(cores[layer + 1].kind, grids[layer], out_c, out_y, out_x)
                heapq.heappush(heap, (done, layer + 1, ny, nx, nc, next(seq), n))
            else:
                outputs.append(ChipEvent(layer, out_c, out_y, out_x, done, n))

    dropped = [c.dropped for c in cores]
    stall = bool(sum(dropped) > 0 or max_delay > budget.stall_delay_us)
    report = SynOpsReport(
        duration_s=stream.duration_us * 1e-6,
        synops=[c.synops for c in cores] + [0.0],
        spikes=[float(cores[0].events)] + [float(c.spikes) for c in cores],
        delayed=[c.delayed for c in cores],
        dropped=dropped,
        queue_peak=[c.queue_peak for c in cores],
        max_delay_us=float(max_delay),
        completion_us=float(completion),
        saturations=int(sum(c.saturations for c in cores)),
        cap_hits=int(sum(c.cap_hits for c in cores)),
        stall=stall,
        spike_times_us=np.array(spike_times, dtype=np.float64),
        spike_counts=np.array(spike_counts, dtype=np.int64),
        occupancy=pd.DataFrame(occupancy, columns=["t_us", "core", "queued"]),
    )
    if report.saturations:
        logger.warning(f"Membrane saturation hit {report.saturations} times")
    if stall:
        logger.warning(
            f"Chip stall: {report.dropped_events} dropped, max queueing delay {max_delay:.1f} us"
        )
    logger.info(
        f"Per-event run: {len(ev)} input events, {report.neuron_spikes:.0f} spikes, "
        f"{report.total_synops:.0f} SynOps, completion {completion:.1f} us"
    )
    return outputs, report


def _flat_index(event: ChipEvent, grid: Tuple[int, int, int]) -> int:
    _, h, w = grid
    return (event.channel * h + event.y) * w + event.x


def readout_counts(events: Sequence[ChipEvent], grid: Tuple[int, int, int], window_us: int,
                   timesteps: int) -> np.ndarray:
    """Output spikes summed per window, [timesteps, N]; late spikes land in the last window"""
    n_out = int(np.prod(grid))
    counts = np.zeros((timesteps, n_out), dtype=np.int64)
    if timesteps == 0:
        return counts
    for event in events:
        bin_index = min(int(event.t_us // window_us), timesteps - 1)
        counts[bin_index, _flat_index(event, grid)] += event.count
    return counts


def sliding_readout(events: Sequence[ChipEvent], grid: Tuple[int, int, int], window_us: int,
                    stride_us: int, duration_us: int) -> Tuple[np.ndarray, np.ndarray]:
    """Sum of the last `window_us` of output spikes, evaluated every `stride_us`"""
    if window_us <= 0 or stride_us <= 0:
        raise ValueError("window_us and stride_us must be positive")
    ends = np.arange(stride_us, duration_us + stride_us, stride_us, dtype=np.float64)
    n_out = int(np.prod(grid))
    if not len(events):
        return ends, np.zeros((len(ends), n_out), dtype=np.int64)
    times = np.array([e.t_us for e in events])
    index = np.array([_flat_index(e, grid) for e in events])
    weight = np.array([e.count for e in events])
    counts = np.zeros((len(ends), n_out), dtype=np.int64)
    for k, end in enumerate(ends):
        inside = (times >= end - window_us) & (times < end)
        np.add.at(counts[k], index[inside], weight[inside])
    return ends, counts


@dataclass
class PowerModel:
    idle_mw: float = field(default_factory=lambda: config.IDLE_MW)
    slope_mw: float = field(default_factory=lambda: config.POWER_SLOPE_MW)  # mW per spike/s

    def power_at(self, spikes_per_s):
        return self.idle_mw + self.slope_mw * np.asarray(spikes_per_s, dtype=np.float64)


@dataclass
class PowerEstimate:
    idle_mw: float
    dyn_mw_per_spike_s: float
    timeline: pd.DataFrame  # t_ms, spikes_per_s, mW
    average_mw: float

    def to_dict(self) -> Dict:
        return {
            "idle_mw": self.idle_mw,
            "dyn_mw_per_spike_s": self.dyn_mw_per_spike_s,
            "average_mw": self.average_mw,
            "samples": len(self.timeline),
        }

    def save_timeline(self, path) -> None:
        self.timeline[["t_ms", "mW"]].to_csv(path, index=False)


def estimate_power(report: SynOpsReport, model: Optional[PowerModel] = None,
                   sample_hz: Optional[float] = None) -> PowerEstimate:
    """Instantaneous power idle + slope * spikes/s, sampled on a fixed grid"""
    model = model or PowerModel()
    sample_hz = sample_hz or config.POWER_SAMPLE_HZ
    period_us = 1e6 / sample_hz
    duration_us = max(report.duration_s * 1e6, report.completion_us)
    n_samples = max(1, math.ceil(duration_us / period_us))

    if report.spike_times_us is not None and len(report.spike_times_us):
        bins = np.minimum((report.spike_times_us // period_us).astype(np.int64), n_samples - 1)
        counts = np.bincount(bins, weights=report.spike_counts, minlength=n_samples)
        rates = counts / (period_us * 1e-6)
    else:
        rates = np.full(n_samples, report.spikes_per_s)

    power = model.power_at(rates)
    timeline = pd.DataFrame({
        "t_ms": np.arange(n_samples) * period_us / 1000.0,
        "spikes_per_s": rates,
        "mW": power,
    })
    return PowerEstimate(
        idle_mw=model.idle_mw,
        dyn_mw_per_spike_s=model.slope_mw,
        timeline=timeline,
        average_mw=float(power.mean()),
    )


@dataclass
class CalibrationResult:
    idle_mw: float
    slope_mw: float
    r2: float
    points: int
    stated_idle_mw: float = field(default_factory=lambda: config.IDLE_MW)

    def as_tuple(self) -> Tuple[float, float, float]:
        return self.idle_mw, self.slope_mw, self.r2

    def to_model(self) -> PowerModel:
        return PowerModel(idle_mw=self.idle_mw, slope_mw=self.slope_mw)

    def to_dict(self) -> Dict:
        return {
            "idle_mw": self.idle_mw,
            "slope_mw_per_spike_s": self.slope_mw,
            "r2": self.r2,
            "points": self.points,
            "stated_idle_mw": self.stated_idle_mw,
            "intercept_minus_stated_idle_mw": self.idle_mw - self.stated_idle_mw,
            "intercept_exceeds_stated_idle": self.idle_mw > self.stated_idle_mw,
        }


def calibrate_power(table: Sequence[Tuple[float, float]]) -> CalibrationResult:
    """Least-squares line through (spikes/s, mW) measurements"""
    if len(table) < 2:
        raise DegenerateFit(f"Need at least 2 points to fit a line, got {len(table)}")
    if len(table) < 3:
        logger.warning(f"Calibrating power from only {len(table)} points")
    xs = np.array([row[0] for row in table], dtype=np.float64)
    ys = np.array([row[1] for row in table], dtype=np.float64)
    if np.all(xs == xs[0]):
        raise DegenerateFit("All calibration points share the same spikes/s")

    slope, intercept = np.polyfit(xs, ys, 1)
    predicted = intercept + slope * xs
    ss_res = float(((ys - predicted) ** 2).sum())
    ss_tot = float(((ys - ys.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    result = CalibrationResult(idle_mw=float(intercept), slope_mw=float(slope), r2=r2, points=len(table))
    if result.idle_mw > result.stated_idle_mw:
        logger.info(
            f"Fitted intercept {result.idle_mw:.2f} mW exceeds the configured idle {result.stated_idle_mw:.2f} mW"
        )
    return result


@dataclass
class GapReport:
    window_us: int
    single_spikes: float
    multi_spikes: float
    event_spikes: float
    timeline: pd.DataFrame
    synops: SynOpsReport

    @staticmethod
    def _ratio(num: float, den: float) -> float:
        if den > 0:
            return num / den
        return math.inf if num > 0 else 1.0

    @property
    def event_over_single(self) -> float:
        return self._ratio(self.event_spikes, self.single_spikes)

    @property
    def event_over_multi(self) -> float:
        return self._ratio(self.event_spikes, self.multi_spikes)

    def to_dict(self) -> Dict:
        return {
            "window_us": self.window_us,
            "single_spikes": self.single_spikes,
            "multi_spikes": self.multi_spikes,
            "event_spikes": self.event_spikes,
            "event_over_single": self.event_over_single,
            "event_over_multi": self.event_over_multi,
            "stall": self.synops.stall,
        }


def gap_report(spec: NetworkSpec, params: Sequence[LayerParams], qnet: QuantizedNetwork,
               stream: EventStream, window_us: int, budget: Optional[CoreBudget] = None,
               check: bool = True) -> GapReport:
    """Compare binned single-spike, binned multi-spike and per-event spike activity"""
    binary = bin_events(stream, window_us, "binary")
    histogram = bin_events(stream, window_us, "histogram")
    run_single = run_network(spec, params, binary, mode="single")
    run_multi = run_network(spec, params, histogram, mode="multi")
    events, synops = run_per_event(qnet, stream, budget, check=check)

    timesteps = histogram.timesteps
    out_single = np.array([o.values.reshape(-1) for o in run_single.outputs]).reshape(timesteps, -1)
    out_multi = np.array([o.values.reshape(-1) for o in run_multi.outputs]).reshape(timesteps, -1)
    out_event = readout_counts(events, qnet.output_grid, window_us, timesteps)

    timeline = pd.DataFrame({
        "t": np.arange(timesteps),
        "input_events": histogram.data.reshape(timesteps, -1).sum(axis=1),
        "out_single": out_single.sum(axis=1),
        "out_multi": out_multi.sum(axis=1),
        "out_event": out_event.sum(axis=1),
        "div_single_event": np.abs(out_single - out_event).sum(axis=1),
        "div_multi_event": np.abs(out_multi - out_event).sum(axis=1),
    })
    report = GapReport(
        window_us=window_us,
        single_spikes=run_single.total_spikes,
        multi_spikes=run_multi.total_spikes,
        event_spikes=synops.neuron_spikes,
        timeline=timeline,
        synops=synops,
    )
    logger.info(
        f"Gap report: single={report.single_spikes:.0f}, multi={report.multi_spikes:.0f}, "
        f"per-event={report.event_spikes:.0f} (x{report.event_over_single:.1f} over single)"
    )
    return report
