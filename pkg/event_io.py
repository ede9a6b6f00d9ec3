"""
Event-camera data ingestion and preparation.

Covers the N-Caltech101 5-byte AER codec, spatial downsampling, binning of
event streams into binary/histogram frame tensors, seeded augmentation,
stratified splitting, the synthetic moving-box generator and the JSONL box
sidecar.
"""

import json
import logging
import math
import struct
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, Iterator, List, Optional, Sequence, Tuple

import numpy as np

from config import config

logger = logging.getLogger(__name__)

EVENT_DTYPE = np.dtype([("x", "<i4"), ("y", "<i4"), ("t", "<i8"), ("p", "<i1")])

AER_RECORD_BYTES = 5
AER_MAX_TIMESTAMP = 2 ** 23 - 1

FRAMES_MAGIC = b"SFFS"
FRAMES_HEADER = struct.Struct("<4sIIIIBI")
FRAME_MODES = ("binary", "histogram")


class EventIOError(Exception):
    """Base class for event ingestion errors"""


class TruncatedRecord(EventIOError):
    def __init__(self, length: int):
        self.offset = length - length % AER_RECORD_BYTES
        super().__init__(
            f"Buffer of {length} bytes is not a multiple of {AER_RECORD_BYTES}; "
            f"trailing record starts at byte offset {self.offset}"
        )


class OutOfBounds(EventIOError):
    def __init__(self, message: str, offset: Optional[int] = None):
        self.offset = offset
        super().__init__(message)


class NonMonotonicTimestamp(EventIOError):
    def __init__(self, offset: int, previous: int, current: int):
        self.offset = offset
        super().__init__(
            f"Timestamp {current} at byte offset {offset} precedes {previous}"
        )


class TimestampOverflow(EventIOError):
    pass


class InvalidTarget(EventIOError):
    pass


class DegenerateBox(EventIOError):
    pass


class EmptyClass(EventIOError):
    pass


@dataclass(frozen=True)
class Event:
    x: int
    y: int
    t: int
    p: int


@dataclass(frozen=True)
class BoundingBox:
    """PASCAL-VOC style box in pixels with objectness and class label"""

    x_min: float
    y_min: float
    x_max: float
    y_max: float
    objectness: float = 1.0
    label: int = 0

    @property
    def width(self) -> float:
        return self.x_max - self.x_min

    @property
    def height(self) -> float:
        return self.y_max - self.y_min

    @property
    def area(self) -> float:
        return max(self.width, 0.0) * max(self.height, 0.0)

    @property
    def center(self) -> Tuple[float, float]:
        return (self.x_min + self.x_max) / 2.0, (self.y_min + self.y_max) / 2.0

    def clamp(self, width: float, height: float) -> "BoundingBox":
        return replace(
            self,
            x_min=min(max(self.x_min, 0.0), width),
            y_min=min(max(self.y_min, 0.0), height),
            x_max=min(max(self.x_max, 0.0), width),
            y_max=min(max(self.y_max, 0.0), height),
        )

    def scaled(self, sx: float, sy: float) -> "BoundingBox":
        return replace(
            self,
            x_min=self.x_min * sx,
            y_min=self.y_min * sy,
            x_max=self.x_max * sx,
            y_max=self.y_max * sy,
        )

    def to_dict(self) -> Dict[str, float]:
        return {
            "x_min": self.x_min,
            "y_min": self.y_min,
            "x_max": self.x_max,
            "y_max": self.y_max,
            "objectness": self.objectness,
            "label": self.label,
        }

    @classmethod
    def from_dict(cls, data: Dict) -> "BoundingBox":
        return cls(
            x_min=float(data["x_min"]),
            y_min=float(data["y_min"]),
            x_max=float(data["x_max"]),
            y_max=float(data["y_max"]),
            objectness=float(data.get("objectness", 1.0)),
            label=int(data.get("label", 0)),
        )


@dataclass
class EventStream:
    """Time-ordered events stored as a structured numpy array"""

    events: np.ndarray
    resolution: Tuple[int, int]
    duration_us: int

    def __post_init__(self):
        self.events = np.asarray(self.events, dtype=EVENT_DTYPE)
        self.resolution = (int(self.resolution[0]), int(self.resolution[1]))
        self.duration_us = int(self.duration_us)

    @classmethod
    def empty(cls, resolution: Tuple[int, int], duration_us: int = 0) -> "EventStream":
        return cls(np.zeros(0, dtype=EVENT_DTYPE), resolution, duration_us)

    @classmethod
    def from_events(cls, events: Sequence[Event], resolution: Tuple[int, int],
                    duration_us: Optional[int] = None) -> "EventStream":
        array = np.array([(e.x, e.y, e.t, e.p) for e in events], dtype=EVENT_DTYPE)
        if duration_us is None:
            duration_us = int(array["t"][-1]) + 1 if len(array) else 0
        return cls(array, resolution, duration_us)

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[Event]:
        for x, y, t, p in self.events.tolist():
            yield Event(x=x, y=y, t=t, p=p)

    def __getitem__(self, index: int) -> Event:
        x, y, t, p = self.events[index].tolist()
        return Event(x=x, y=y, t=t, p=p)

    def __eq__(self, other) -> bool:
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            self.resolution == other.resolution
            and self.duration_us == other.duration_us
            and np.array_equal(self.events, other.events)
        )

    @property
    def width(self) -> int:
        return self.resolution[0]

    @property
    def height(self) -> int:
        return self.resolution[1]

    def validate(self) -> "EventStream":
        """Check the bounds and ordering invariants, raising on the first violation"""
        ev = self.events
        if len(ev) == 0:
            return self
        bad = np.flatnonzero(
            (ev["x"] < 0) | (ev["x"] >= self.width) | (ev["y"] < 0) | (ev["y"] >= self.height)
        )
        if len(bad):
            i = int(bad[0])
            raise OutOfBounds(
                f"Event {i} at ({ev['x'][i]}, {ev['y'][i]}) outside {self.resolution}"
            )
        back = np.flatnonzero(np.diff(ev["t"]) < 0)
        if len(back):
            i = int(back[0]) + 1
            raise NonMonotonicTimestamp(i, int(ev["t"][i - 1]), int(ev["t"][i]))
        return self

    def slice_time(self, start_us: int, stop_us: int) -> "EventStream":
        t = self.events["t"]
        lo, hi = np.searchsorted(t, [start_us, stop_us], side="left")
        shifted = self.events[lo:hi].copy()
        shifted["t"] -= start_us
        return EventStream(shifted, self.resolution, stop_us - start_us)


@dataclass
class FrameSequence:
    """Binned events with shape [T, 2, H, W]"""

    data: np.ndarray
    window_us: int
    mode: str

    @property
    def timesteps(self) -> int:
        return int(self.data.shape[0])

    def __eq__(self, other) -> bool:
        if not isinstance(other, FrameSequence):
            return NotImplemented
        return (
            self.window_us == other.window_us
            and self.mode == other.mode
            and np.array_equal(self.data, other.data)
        )


@dataclass
class Sample:
    """One recording with its ground truth.

    `track` optionally holds one box per `track_window_us` bin for moving
    objects; without it the static `boxes` apply to every timestep.
    """

    stream: EventStream
    boxes: List[BoundingBox]
    split_tag: str = "train"
    name: str = ""
    track: Optional[List[BoundingBox]] = None
    track_window_us: int = 0

    @property
    def label(self) -> int:
        return self.boxes[0].label if self.boxes else -1

    def boxes_at(self, timestep: int, window_us: int) -> List[BoundingBox]:
        if not self.track:
            return list(self.boxes)
        mid_us = (timestep + 0.5) * window_us
        index = min(int(mid_us // self.track_window_us), len(self.track) - 1)
        return [self.track[index]]


@dataclass
class AugmentConfig:
    scale_range: Tuple[float, float] = (0.8, 1.2)
    crop_jitter: float = 1.0  # fraction of the admissible crop offset range actually used

    def validate(self) -> "AugmentConfig":
        lo, hi = self.scale_range
        if not (0.5 <= lo <= hi <= 1.5):
            raise ValueError(f"scale_range {self.scale_range} must lie within [0.5, 1.5]")
        if not 0.0 <= self.crop_jitter <= 1.0:
            raise ValueError(f"crop_jitter {self.crop_jitter} must lie within [0, 1]")
        return self


@dataclass
class SynthConfig:
    """Moving bright rectangle on a dark background"""

    resolution: Tuple[int, int] = (64, 64)
    box_size: Tuple[int, int] = (16, 16)
    velocity: Tuple[float, float] = (0.4, 0.25)  # pixels per millisecond
    events_per_change: int = 2  # events emitted per pixel edge crossing
    duration_us: int = 90000
    noise_rate: float = 0.5  # events per pixel per second
    step_us: int = 1000
    window_us: int = field(default_factory=lambda: config.WINDOW_US)
    label: int = 0


def decode_aer(buffer: bytes, resolution: Tuple[int, int]) -> EventStream:
    """
    Decode N-Caltech101 5-byte address-event records.

    byte0 = x, byte1 = y, byte2 bit7 = polarity, the remaining 23 bits
    (byte2 bits6-0, byte3, byte4) are the big-endian timestamp in microseconds.
    """
    length = len(buffer)
    if length % AER_RECORD_BYTES:
        raise TruncatedRecord(length)
    if length == 0:
        return EventStream.empty(resolution)

    raw = np.frombuffer(buffer, dtype=np.uint8).reshape(-1, AER_RECORD_BYTES).astype(np.int64)
    events = np.zeros(len(raw), dtype=EVENT_DTYPE)
    events["x"] = raw[:, 0]
    events["y"] = raw[:, 1]
    events["p"] = raw[:, 2] >> 7
    events["t"] = ((raw[:, 2] & 0x7F) << 16) | (raw[:, 3] << 8) | raw[:, 4]

    width, height = resolution
    bad = np.flatnonzero((events["x"] >= width) | (events["y"] >= height))
    if len(bad):
        i = int(bad[0])
        raise OutOfBounds(
            f"Event at byte offset {i * AER_RECORD_BYTES} has address "
            f"({events['x'][i]}, {events['y'][i]}) outside {width}x{height}",
            offset=i * AER_RECORD_BYTES,
        )
    back = np.flatnonzero(np.diff(events["t"]) < 0)
    if len(back):
        i = int(back[0]) + 1
        raise NonMonotonicTimestamp(
            i * AER_RECORD_BYTES, int(events["t"][i - 1]), int(events["t"][i])
        )
    return EventStream(events, resolution, int(events["t"][-1]) + 1)


def encode_aer(stream: EventStream) -> bytes:
    ev = stream.events
    if len(ev) == 0:
        return b""
    over = np.flatnonzero(ev["t"] > AER_MAX_TIMESTAMP)
    if len(over):
        i = int(over[0])
        raise TimestampOverflow(f"Event {i} timestamp {ev['t'][i]} exceeds 23 bits")
    if ev["x"].max() > 255 or ev["y"].max() > 255 or ev["x"].min() < 0 or ev["y"].min() < 0:
        raise OutOfBounds("AER addresses are limited to one byte per axis")

    t = ev["t"].astype(np.int64)
    raw = np.empty((len(ev), AER_RECORD_BYTES), dtype=np.uint8)
    raw[:, 0] = ev["x"]
    raw[:, 1] = ev["y"]
    raw[:, 2] = ((ev["p"].astype(np.int64) & 1) << 7) | ((t >> 16) & 0x7F)
    raw[:, 3] = (t >> 8) & 0xFF
    raw[:, 4] = t & 0xFF
    return raw.tobytes()


def read_aer_file(path, resolution: Tuple[int, int]) -> EventStream:
    with open(path, "rb") as f:
        return decode_aer(f.read(), resolution)


def write_aer_file(path, stream: EventStream) -> None:
    with open(path, "wb") as f:
        f.write(encode_aer(stream))


def downsample(stream: EventStream, target: Tuple[int, int]) -> EventStream:
    """Floor-remap coordinates onto a coarser grid, keeping every event"""
    tw, th = int(target[0]), int(target[1])
    sw, sh = stream.resolution
    if tw <= 0 or th <= 0 or tw > sw or th > sh:
        raise InvalidTarget(f"Target {target} must be positive and within source {stream.resolution}")
    if (tw, th) == (sw, sh):
        return EventStream(stream.events.copy(), stream.resolution, stream.duration_us)

    events = stream.events.copy()
    events["x"] = (events["x"].astype(np.int64) * tw) // sw
    events["y"] = (events["y"].astype(np.int64) * th) // sh
    return EventStream(events, (tw, th), stream.duration_us)


def bin_events(stream: EventStream, window_us: int, mode: str = "histogram") -> FrameSequence:
    """Accumulate events into [T, 2, H, W] bins; an event at t = k*window lands in bin k"""
    if window_us <= 0:
        raise ValueError(f"window_us must be positive, got {window_us}")
    if mode not in FRAME_MODES:
        raise ValueError(f"Unknown frame mode '{mode}'")

    timesteps = math.ceil(stream.duration_us / window_us)
    width, height = stream.resolution
    data = np.zeros((timesteps, 2, height, width), dtype=np.int64)
    ev = stream.events
    if len(ev) and timesteps:
        bins = ev["t"] // window_us
        keep = bins < timesteps
        if not keep.all():
            logger.warning(f"Dropping {int((~keep).sum())} events beyond declared duration")
        np.add.at(
            data,
            (bins[keep], ev["p"][keep].astype(np.int64), ev["y"][keep], ev["x"][keep]),
            1,
        )
    if mode == "binary":
        np.minimum(data, 1, out=data)
    return FrameSequence(data=data, window_us=int(window_us), mode=mode)


def save_frames(path, frames: FrameSequence) -> None:
    """Little-endian header (magic, T, P, H, W, mode, window_us) then dense u16 payload"""
    t, p, h, w = frames.data.shape
    if frames.data.max(initial=0) > np.iinfo(np.uint16).max:
        logger.warning("Histogram counts exceed u16 range; clipping on save")
    payload = np.clip(frames.data, 0, np.iinfo(np.uint16).max).astype("<u2")
    header = FRAMES_HEADER.pack(
        FRAMES_MAGIC, t, p, h, w, FRAME_MODES.index(frames.mode), frames.window_us
    )
    with open(path, "wb") as f:
        f.write(header)
        f.write(payload.tobytes())


def load_frames(path) -> FrameSequence:
    with open(path, "rb") as f:
        blob = f.read()
    magic, t, p, h, w, mode, window_us = FRAMES_HEADER.unpack_from(blob, 0)
    if magic != FRAMES_MAGIC:
        raise EventIOError(f"{path} is not a frame file (magic {magic!r})")
    payload = np.frombuffer(blob, dtype="<u2", offset=FRAMES_HEADER.size)
    if payload.size != t * p * h * w:
        raise TruncatedRecord(len(blob))
    data = payload.reshape(t, p, h, w).astype(np.int64)
    return FrameSequence(data=data, window_us=window_us, mode=FRAME_MODES[mode])


def apply_affine(sample: Sample, scale: float, offset: Tuple[float, float]) -> Sample:
    """
    Map every event and box through (x, y) -> (scale*x - ox, scale*y - oy).

    Events landing outside the frame are dropped, boxes are clamped; a box
    left with less than one square pixel raises DegenerateBox.
    """
    ox, oy = offset
    width, height = sample.stream.resolution
    identity = scale == 1.0 and ox == 0 and oy == 0

    ev = sample.stream.events.copy()
    if not identity and len(ev):
        x = np.floor(ev["x"] * scale - ox).astype(np.int64)
        y = np.floor(ev["y"] * scale - oy).astype(np.int64)
        inside = (x >= 0) & (x < width) & (y >= 0) & (y < height)
        ev["x"] = x
        ev["y"] = y
        ev = ev[inside]
    stream = EventStream(ev, sample.stream.resolution, sample.stream.duration_us)

    def transform(box: BoundingBox) -> BoundingBox:
        if identity:
            return box
        moved = replace(
            box,
            x_min=box.x_min * scale - ox,
            y_min=box.y_min * scale - oy,
            x_max=box.x_max * scale - ox,
            y_max=box.y_max * scale - oy,
        ).clamp(width, height)
        if moved.area < 1.0:
            raise DegenerateBox(
                f"Box {box.to_dict()} collapses to area {moved.area:.3f} under "
                f"scale={scale:.3f}, offset=({ox:.2f}, {oy:.2f})"
            )
        return moved

    boxes = [transform(b) for b in sample.boxes]
    track = [transform(b) for b in sample.track] if sample.track else sample.track
    return replace(sample, stream=stream, boxes=boxes, track=track)


def augment(sample: Sample, rng_seed: int, cfg: Optional[AugmentConfig] = None) -> Sample:
    """Seeded random scale-and-crop applied identically to events and boxes"""
    cfg = (cfg or AugmentConfig()).validate()
    rng = np.random.default_rng(rng_seed)
    scale = float(rng.uniform(*cfg.scale_range))
    width, height = sample.stream.resolution

    def pick_offset(extent: int) -> float:
        slack = scale * extent - extent
        lo, hi = min(0.0, slack), max(0.0, slack)
        return float(rng.uniform(lo, hi)) * cfg.crop_jitter

    offset = (pick_offset(width), pick_offset(height))
    return apply_affine(sample, scale, offset)


def stratified_split(samples: Sequence[Sample], train_frac: float = None, seed: int = 0,
                     classes: Optional[Sequence[int]] = None) -> Tuple[List[Sample], List[Sample]]:
    """Per-class seeded shuffle, then the first round(frac * n) of each class go to train"""
    if train_frac is None:
        train_frac = config.TRAIN_FRACTION
    if not 0.0 < train_frac < 1.0:
        raise ValueError(f"train_frac must lie in (0, 1), got {train_frac}")
    if not samples:
        raise EmptyClass("No samples to split")

    by_class: Dict[int, List[int]] = {}
    for index, sample in enumerate(samples):
        by_class.setdefault(sample.label, []).append(index)
    for label in classes or []:
        if label not in by_class:
            raise EmptyClass(f"Class {label} has no samples")

    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for label in sorted(by_class):
        members = np.array(by_class[label])
        members = members[rng.permutation(len(members))]
        n_train = int(round(train_frac * len(members)))
        train_idx.extend(members[:n_train].tolist())
        val_idx.extend(members[n_train:].tolist())

    train = [replace(samples[i], split_tag="train") for i in sorted(train_idx)]
    val = [replace(samples[i], split_tag="val") for i in sorted(val_idx)]
    logger.info(f"Split {len(samples)} samples into {len(train)} train / {len(val)} val")
    return train, val


def _coverage(x0: float, y0: float, size: Tuple[int, int], resolution: Tuple[int, int]) -> np.ndarray:
    width, height = resolution
    mask = np.zeros((height, width), dtype=bool)
    xi, yi = int(math.floor(x0)), int(math.floor(y0))
    mask[max(yi, 0):max(yi + size[1], 0), max(xi, 0):max(xi + size[0], 0)] = True
    return mask


def synth_moving_box(cfg: SynthConfig, seed: int) -> Sample:
    """
    Generate a translating bright rectangle as an event stream.

    Pixels newly covered by the rectangle emit ON events, uncovered pixels
    emit OFF events, and uniform background noise is added at
    `noise_rate` events per pixel per second. The rectangle bounces off the
    frame borders so every ground-truth box stays inside the frame.
    """
    rng = np.random.default_rng(seed)
    width, height = cfg.resolution
    bw, bh = cfg.box_size
    x = float(rng.uniform(0, width - bw))
    y = float(rng.uniform(0, height - bh))
    vx = cfg.velocity[0] * (1 if rng.random() < 0.5 else -1)
    vy = cfg.velocity[1] * (1 if rng.random() < 0.5 else -1)

    chunks = []
    covered = np.zeros((height, width), dtype=bool)
    positions = []
    for start in range(0, cfg.duration_us, cfg.step_us):
        positions.append((start, x, y))
        now = _coverage(x, y, cfg.box_size, cfg.resolution)
        for polarity, changed in ((1, now & ~covered), (0, covered & ~now)):
            ys, xs = np.nonzero(changed)
            if not len(xs):
                continue
            n = len(xs) * cfg.events_per_change
            chunk = np.zeros(n, dtype=EVENT_DTYPE)
            chunk["x"] = np.repeat(xs, cfg.events_per_change)
            chunk["y"] = np.repeat(ys, cfg.events_per_change)
            chunk["p"] = polarity
            chunk["t"] = start + rng.integers(0, cfg.step_us, size=n)
            chunks.append(chunk)
        covered = now

        dt_ms = cfg.step_us / 1000.0
        x += vx * dt_ms
        y += vy * dt_ms
        if x < 0 or x > width - bw:
            vx = -vx
            x = min(max(x, 0.0), float(width - bw))
        if y < 0 or y > height - bh:
            vy = -vy
            y = min(max(y, 0.0), float(height - bh))

    expected_noise = cfg.noise_rate * (cfg.duration_us * 1e-6) * width * height
    n_noise = int(rng.poisson(expected_noise)) if expected_noise > 0 else 0
    if n_noise:
        noise = np.zeros(n_noise, dtype=EVENT_DTYPE)
        noise["x"] = rng.integers(0, width, size=n_noise)
        noise["y"] = rng.integers(0, height, size=n_noise)
        noise["t"] = rng.integers(0, cfg.duration_us, size=n_noise)
        noise["p"] = rng.integers(0, 2, size=n_noise)
        chunks.append(noise)

    events = np.concatenate(chunks) if chunks else np.zeros(0, dtype=EVENT_DTYPE)
    events = events[np.argsort(events["t"], kind="stable")]
    stream = EventStream(events, cfg.resolution, cfg.duration_us)

    track = []
    n_windows = math.ceil(cfg.duration_us / cfg.window_us)
    for k in range(n_windows):
        mid = min(int((k + 0.5) * cfg.window_us), cfg.duration_us - 1)
        _, bx, by = positions[min(mid // cfg.step_us, len(positions) - 1)]
        bx, by = math.floor(bx), math.floor(by)
        track.append(BoundingBox(bx, by, bx + bw, by + bh, 1.0, cfg.label))

    return Sample(
        stream=stream,
        boxes=[track[0]],
        name=f"synth-{seed}",
        track=track,
        track_window_us=cfg.window_us,
    )


def load_boxes_jsonl(path) -> List[BoundingBox]:
    boxes = []
    with open(path, "r", encoding="utf-8") as f:
        for line_no, line in enumerate(f, 1):
            line = line.strip()
            if not line:
                continue
            try:
                boxes.append(BoundingBox.from_dict(json.loads(line)))
            except (KeyError, ValueError, TypeError) as e:
                raise EventIOError(f"{path}:{line_no}: malformed box record ({e})") from e
    return boxes


def save_boxes_jsonl(path, boxes: Sequence[BoundingBox]) -> None:
    with open(path, "w", encoding="utf-8") as f:
        for box in boxes:
            f.write(json.dumps(box.to_dict()) + "\n")


def load_ncaltech_sample(aer_path, boxes_path, source_resolution: Optional[Tuple[int, int]] = None,
                         target: Optional[Tuple[int, int]] = None) -> Sample:
    """Load an N-Caltech101 recording with its converted box sidecar and rescale both"""
    side = config.NCALTECH_RESOLUTION
    source_resolution = source_resolution or (side, side)
    target = target or (config.SENSOR_WIDTH, config.SENSOR_HEIGHT)

    stream = read_aer_file(aer_path, source_resolution)
    boxes = load_boxes_jsonl(boxes_path)
    if target != source_resolution:
        stream = downsample(stream, target)
        sx = target[0] / source_resolution[0]
        sy = target[1] / source_resolution[1]
        boxes = [b.scaled(sx, sy).clamp(*target) for b in boxes]
    return Sample(stream=stream, boxes=boxes, name=Path(aer_path).stem)
