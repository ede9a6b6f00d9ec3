"""
Dense tensor ops with reverse-mode differentiation recorded on an explicit tape.

The op set is closed: conv2d (3x3, stride 1, pad 1, no bias), sum_pool (2x2),
linear, layer_norm, batch_norm, reshape, elementwise add/mul/scale, sigmoid,
sum, plus whatever custom nodes other modules record (spike functions,
detection loss). Every op takes an optional `tape`; when it is None or no
input requires a gradient, nothing is recorded.
"""

import hashlib
import json
import logging
import struct
import warnings
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Tuple

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

logger = logging.getLogger(__name__)

CHECKPOINT_MAGIC = b"SFCK"
CHECKPOINT_VERSION = 1
DTYPE_CODES = {
    np.dtype("<f8"): 0,
    np.dtype("<f4"): 1,
    np.dtype("i1"): 2,
    np.dtype("<i4"): 3,
    np.dtype("<i8"): 4,
}
CODE_DTYPES = {code: dtype for dtype, code in DTYPE_CODES.items()}


class TensorError(Exception):
    """Base class for tensor engine errors"""


class ShapeMismatch(TensorError):
    pass


class OddExtent(TensorError):
    pass


class ChecksumMismatch(TensorError):
    pass


class DisconnectedParameter(UserWarning):
    """A parameter received no gradient from the loss"""


class Tensor:
    """A dense float buffer with an optional gradient"""

    __slots__ = ("values", "grad", "requires_grad", "name")

    def __init__(self, values, requires_grad: bool = False, name: str = "", dtype=np.float64):
        self.values = np.asarray(values, dtype=dtype)
        self.grad: Optional[np.ndarray] = None
        self.requires_grad = requires_grad
        self.name = name

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.values.shape

    def zero_grad(self):
        self.grad = None

    def accumulate(self, grad: np.ndarray):
        if self.grad is None:
            self.grad = np.array(grad, dtype=np.float64, copy=True)
        else:
            self.grad += grad

    def item(self) -> float:
        return float(self.values.reshape(-1)[0])

    def detach(self) -> "Tensor":
        return Tensor(self.values.copy())

    def __repr__(self):
        label = f" '{self.name}'" if self.name else ""
        return f"Tensor{label}(shape={self.shape}, requires_grad={self.requires_grad})"


@dataclass
class Node:
    op: str
    inputs: Tuple[Tensor, ...]
    outputs: Tuple[Tensor, ...]
    backward: Callable[[], None]


@dataclass
class Tape:
    """Operations in the order they were executed"""

    nodes: List[Node] = field(default_factory=list)

    def record(self, op: str, inputs: Sequence[Tensor], outputs: Sequence[Tensor],
               backward: Callable[[], None]) -> None:
        self.nodes.append(Node(op, tuple(inputs), tuple(outputs), backward))

    def __len__(self) -> int:
        return len(self.nodes)


def _tracks(tape: Optional[Tape], *tensors: Tensor) -> bool:
    return tape is not None and any(t.requires_grad for t in tensors)


def _result(values: np.ndarray, tracked: bool) -> Tensor:
    return Tensor(values, requires_grad=tracked)


def _grad_of(t: Tensor) -> np.ndarray:
    return t.grad if t.grad is not None else np.zeros_like(t.values)


def _push(t: Tensor, grad: np.ndarray):
    if t.requires_grad:
        t.accumulate(grad)


def conv2d(x: Tensor, kernel: Tensor, tape: Optional[Tape] = None) -> Tensor:
    """3x3 cross-correlation, stride 1, zero padding 1, no bias"""
    if x.values.ndim != 3 or kernel.values.ndim != 4:
        raise ShapeMismatch(f"conv2d expects [C,H,W] and [O,C,3,3], got {x.shape} and {kernel.shape}")
    c_out, c_in, kh, kw = kernel.shape
    if (kh, kw) != (3, 3) or c_in != x.shape[0]:
        raise ShapeMismatch(f"Kernel {kernel.shape} incompatible with input {x.shape}")

    padded = np.pad(x.values, ((0, 0), (1, 1), (1, 1)))
    windows = sliding_window_view(padded, (3, 3), axis=(1, 2))  # [C,H,W,3,3]
    out_values = np.tensordot(kernel.values, windows, axes=([1, 2, 3], [0, 3, 4]))
    tracked = _tracks(tape, x, kernel)
    out = _result(out_values, tracked)

    if tracked:
        def backward():
            g = _grad_of(out)
            if kernel.requires_grad:
                kernel.accumulate(np.tensordot(g, windows, axes=([1, 2], [1, 2])))
            if x.requires_grad:
                g_windows = sliding_window_view(np.pad(g, ((0, 0), (1, 1), (1, 1))), (3, 3), axis=(1, 2))
                flipped = kernel.values[:, :, ::-1, ::-1]
                x.accumulate(np.tensordot(flipped, g_windows, axes=([0, 2, 3], [0, 3, 4])))

        tape.record("conv2d", (x, kernel), (out,), backward)
    return out


def sum_pool(x: Tensor, k: int = 2, tape: Optional[Tape] = None) -> Tensor:
    """Sum of each k x k block"""
    c, h, w = x.shape
    if h % k or w % k:
        raise OddExtent(f"sum_pool needs extents divisible by {k}, got {h}x{w}")
    out_values = x.values.reshape(c, h // k, k, w // k, k).sum(axis=(2, 4))
    tracked = _tracks(tape, x)
    out = _result(out_values, tracked)

    if tracked:
        def backward():
            g = _grad_of(out)
            x.accumulate(np.repeat(np.repeat(g, k, axis=1), k, axis=2))

        tape.record("sum_pool", (x,), (out,), backward)
    return out


def linear(x: Tensor, weight: Tensor, bias: Optional[Tensor] = None,
           tape: Optional[Tape] = None) -> Tensor:
    """y = W x (+ b)"""
    if x.values.ndim != 1 or weight.values.ndim != 2 or weight.shape[1] != x.shape[0]:
        raise ShapeMismatch(f"linear: weight {weight.shape} cannot multiply input {x.shape}")
    if bias is not None and bias.shape != (weight.shape[0],):
        raise ShapeMismatch(f"linear: bias {bias.shape} does not match {weight.shape[0]} outputs")

    out_values = weight.values @ x.values
    if bias is not None:
        out_values = out_values + bias.values
    inputs = (x, weight) + ((bias,) if bias is not None else ())
    tracked = _tracks(tape, *inputs)
    out = _result(out_values, tracked)

    if tracked:
        def backward():
            g = _grad_of(out)
            _push(weight, np.outer(g, x.values))
            _push(x, weight.values.T @ g)
            if bias is not None:
                _push(bias, g)

        tape.record("linear", inputs, (out,), backward)
    return out


def layer_norm(x: Tensor, gamma: Tensor, beta: Tensor, eps: float = 1e-5,
               tape: Optional[Tape] = None) -> Tensor:
    """Normalize over the feature axis of one sample with population variance"""
    n = x.shape[0]
    if x.values.ndim != 1 or n < 2:
        raise ShapeMismatch(f"layer_norm needs a feature vector of length >= 2, got {x.shape}")
    if gamma.shape != x.shape or beta.shape != x.shape:
        raise ShapeMismatch("layer_norm: gamma/beta must match the input")

    mean = x.values.mean()
    centered = x.values - mean
    inv_std = 1.0 / np.sqrt((centered ** 2).mean() + eps)
    x_hat = centered * inv_std
    tracked = _tracks(tape, x, gamma, beta)
    out = _result(gamma.values * x_hat + beta.values, tracked)

    if tracked:
        def backward():
            g = _grad_of(out)
            _push(gamma, g * x_hat)
            _push(beta, g)
            if x.requires_grad:
                d_hat = g * gamma.values
                x.accumulate(inv_std / n * (n * d_hat - d_hat.sum() - x_hat * (d_hat * x_hat).sum()))

        tape.record("layer_norm", (x, gamma, beta), (out,), backward)
    return out


@dataclass
class BatchNormState:
    running_mean: np.ndarray
    running_var: np.ndarray
    momentum: float = 0.1


def batch_norm(rows: Sequence[Tensor], gamma: Tensor, beta: Tensor, state: BatchNormState,
               training: bool, eps: float = 1e-5, tape: Optional[Tape] = None) -> List[Tensor]:
    """Normalize each feature across a batch of vectors (running statistics in eval)"""
    stacked = np.stack([r.values for r in rows])
    m = stacked.shape[0]
    if training:
        mean = stacked.mean(axis=0)
        var = stacked.var(axis=0)
        state.running_mean = (1 - state.momentum) * state.running_mean + state.momentum * mean
        state.running_var = (1 - state.momentum) * state.running_var + state.momentum * var
    else:
        mean, var = state.running_mean, state.running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    x_hat = (stacked - mean) * inv_std
    tracked = _tracks(tape, gamma, beta, *rows)
    outs = [_result(gamma.values * x_hat[i] + beta.values, tracked) for i in range(m)]

    if tracked:
        def backward():
            g = np.stack([_grad_of(o) for o in outs])
            _push(gamma, (g * x_hat).sum(axis=0))
            _push(beta, g.sum(axis=0))
            d_hat = g * gamma.values
            if training:
                dx = inv_std / m * (m * d_hat - d_hat.sum(axis=0) - x_hat * (d_hat * x_hat).sum(axis=0))
            else:
                dx = d_hat * inv_std
            for i, row in enumerate(rows):
                _push(row, dx[i])

        tape.record("batch_norm", (gamma, beta, *rows), tuple(outs), backward)
    return outs


def reshape(x: Tensor, shape: Tuple[int, ...], tape: Optional[Tape] = None) -> Tensor:
    tracked = _tracks(tape, x)
    out = _result(x.values.reshape(shape), tracked)
    if tracked:
        def backward():
            x.accumulate(_grad_of(out).reshape(x.shape))

        tape.record("reshape", (x,), (out,), backward)
    return out


def add(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"add: {a.shape} vs {b.shape}")
    tracked = _tracks(tape, a, b)
    out = _result(a.values + b.values, tracked)
    if tracked:
        def backward():
            g = _grad_of(out)
            _push(a, g)
            _push(b, g)

        tape.record("add", (a, b), (out,), backward)
    return out


def mul(a: Tensor, b: Tensor, tape: Optional[Tape] = None) -> Tensor:
    if a.shape != b.shape:
        raise ShapeMismatch(f"mul: {a.shape} vs {b.shape}")
    tracked = _tracks(tape, a, b)
    out = _result(a.values * b.values, tracked)
    if tracked:
        def backward():
            g = _grad_of(out)
            _push(a, g * b.values)
            _push(b, g * a.values)

        tape.record("mul", (a, b), (out,), backward)
    return out


def scale(a: Tensor, factor: float, tape: Optional[Tape] = None) -> Tensor:
    tracked = _tracks(tape, a)
    out = _result(a.values * factor, tracked)
    if tracked:
        def backward():
            a.accumulate(_grad_of(out) * factor)

        tape.record("scale", (a,), (out,), backward)
    return out


def sigmoid(a: Tensor, tape: Optional[Tape] = None) -> Tensor:
    s = 0.5 * (1.0 + np.tanh(0.5 * a.values))
    tracked = _tracks(tape, a)
    out = _result(s, tracked)
    if tracked:
        def backward():
            a.accumulate(_grad_of(out) * s * (1.0 - s))

        tape.record("sigmoid", (a,), (out,), backward)
    return out


def relu(a: Tensor, tape: Optional[Tape] = None) -> Tensor:
    mask = a.values > 0
    tracked = _tracks(tape, a)
    out = _result(np.where(mask, a.values, 0.0), tracked)
    if tracked:
        def backward():
            a.accumulate(_grad_of(out) * mask)

        tape.record("relu", (a,), (out,), backward)
    return out


def sum_all(a: Tensor, tape: Optional[Tape] = None) -> Tensor:
    tracked = _tracks(tape, a)
    out = _result(np.array(a.values.sum()), tracked)
    if tracked:
        def backward():
            a.accumulate(np.full(a.shape, float(_grad_of(out))))

        tape.record("sum", (a,), (out,), backward)
    return out


def add_scalars(terms: Sequence[Tensor], tape: Optional[Tape] = None) -> Tensor:
    """Sum of scalar tensors in the given order"""
    total = 0.0
    for term in terms:
        total += float(term.values)
    tracked = _tracks(tape, *terms)
    out = _result(np.array(total), tracked)
    if tracked:
        def backward():
            g = float(_grad_of(out))
            for term in terms:
                _push(term, np.array(g))

        tape.record("add_scalars", tuple(terms), (out,), backward)
    return out


def backward(tape: Tape, loss: Tensor, parameters: Optional[Dict[str, Tensor]] = None) -> Dict[str, np.ndarray]:
    """
    Replay the tape in reverse and return gradients for `parameters`.

    Nodes whose outputs received no gradient are skipped. Parameters left
    without a gradient get zeros and a DisconnectedParameter warning.
    """
    if loss.values.size != 1:
        raise ShapeMismatch(f"backward needs a scalar loss, got shape {loss.shape}")
    loss.grad = np.ones_like(loss.values)
    for node in reversed(tape.nodes):
        if any(o.grad is not None for o in node.outputs):
            node.backward()

    grads = {}
    for name, param in (parameters or {}).items():
        if param.grad is None:
            message = f"Parameter '{name}' is disconnected from the loss; using zero gradient"
            logger.warning(message)
            warnings.warn(message, DisconnectedParameter, stacklevel=2)
            grads[name] = np.zeros_like(param.values)
        else:
            grads[name] = param.grad
    return grads


def numeric_gradient(fn: Callable[[], float], tensor: Tensor, h: float = 1e-5) -> np.ndarray:
    """Central finite differences of a scalar function with respect to `tensor`"""
    grad = np.zeros_like(tensor.values)
    flat = tensor.values.reshape(-1)
    out = grad.reshape(-1)
    for i in range(flat.size):
        original = flat[i]
        flat[i] = original + h
        plus = fn()
        flat[i] = original - h
        minus = fn()
        flat[i] = original
        out[i] = (plus - minus) / (2 * h)
    return grad


def save_tensors(path, tensors: Dict[str, np.ndarray], metadata: Optional[Dict] = None) -> str:
    """
    Write named tensors to a checkpoint file and return its SHA-256.

    Layout (little-endian): magic "SFCK", u16 version, u32 metadata length,
    metadata JSON, u32 tensor count, then per tensor: u16 name length, name
    (utf-8), u8 ndim, u32 per dimension, u8 dtype code, u64 payload bytes,
    raw payload. A 32-byte SHA-256 of everything before it closes the file.
    """
    meta_bytes = json.dumps(metadata or {}, sort_keys=True).encode("utf-8")
    parts = [
        CHECKPOINT_MAGIC,
        struct.pack("<HI", CHECKPOINT_VERSION, len(meta_bytes)),
        meta_bytes,
        struct.pack("<I", len(tensors)),
    ]
    for name, array in tensors.items():
        array = np.asarray(array)
        dtype = array.dtype.newbyteorder("<") if array.dtype.byteorder == ">" else array.dtype
        if dtype not in DTYPE_CODES:
            raise TensorError(f"Unsupported dtype {array.dtype} for tensor '{name}'")
        payload = np.ascontiguousarray(array, dtype=dtype).tobytes()
        encoded = name.encode("utf-8")
        parts.append(struct.pack("<H", len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<B", array.ndim))
        parts.append(struct.pack(f"<{array.ndim}I", *array.shape))
        parts.append(struct.pack("<BQ", DTYPE_CODES[dtype], len(payload)))
        parts.append(payload)
    body = b"".join(parts)
    digest = hashlib.sha256(body).digest()
    with open(path, "wb") as f:
        f.write(body)
        f.write(digest)
    logger.info(f"Saved {len(tensors)} tensors to {path}")
    return digest.hex()


def load_tensors(path) -> Tuple[Dict[str, np.ndarray], Dict]:
    with open(path, "rb") as f:
        blob = f.read()
    body, digest = blob[:-32], blob[-32:]
    if hashlib.sha256(body).digest() != digest:
        raise ChecksumMismatch(f"Checksum mismatch in {path}")
    if body[:4] != CHECKPOINT_MAGIC:
        raise TensorError(f"{path} is not a checkpoint file")

    offset = 4
    version, meta_len = struct.unpack_from("<HI", body, offset)
    offset += 6
    if version != CHECKPOINT_VERSION:
        raise TensorError(f"Unsupported checkpoint version {version}")
    metadata = json.loads(body[offset:offset + meta_len].decode("utf-8"))
    offset += meta_len
    (count,) = struct.unpack_from("<I", body, offset)
    offset += 4

    tensors = {}
    for _ in range(count):
        (name_len,) = struct.unpack_from("<H", body, offset)
        offset += 2
        name = body[offset:offset + name_len].decode("utf-8")
        offset += name_len
        (ndim,) = struct.unpack_from("<B", body, offset)
        offset += 1
        shape = struct.unpack_from(f"<{ndim}I", body, offset)
        offset += 4 * ndim
        code, nbytes = struct.unpack_from("<BQ", body, offset)
        offset += 9
        array = np.frombuffer(body, dtype=CODE_DTYPES[code], count=nbytes // CODE_DTYPES[code].itemsize,
                              offset=offset).reshape(shape).copy()
        offset += nbytes
        tensors[name] = array
    return tensors, metadata
