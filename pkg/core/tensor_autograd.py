# core/tensor_autograd.py
"""
Dense float64 tensors with tape-based reverse-mode differentiation.

Every numeric operation the skeleton model needs lives here together with its
backward rule. Operations are recorded on the active Tape only when at least one
input requires a gradient; outside a tape they run as plain numpy evaluation.
Feature maps are laid out C×T×N for a single clip or B×C×T×N for a batch.
"""

import math
import threading
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable, Dict, Iterator, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .errors import ConfigError, NumericError, ShapeError, TapeError, shape_str

DTYPE = np.float64

_local = threading.local()


class Tensor:
    """Dense array of 64-bit floats with an optional gradient accumulator"""

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        self.data = np.array(data, dtype=DTYPE)
        self.requires_grad = bool(requires_grad)
        self.name = name
        self.is_leaf = True
        self.grad = np.zeros_like(self.data) if self.requires_grad else None

    @classmethod
    def _wrap(cls, data: np.ndarray, requires_grad: bool) -> "Tensor":
        out = cls.__new__(cls)
        out.data = np.ascontiguousarray(data, dtype=DTYPE)
        out.requires_grad = requires_grad
        out.name = None
        out.is_leaf = False
        # intermediate gradients are allocated by Tape.backward, only on the path to the root
        out.grad = None
        return out

    @property
    def shape(self) -> Tuple[int, ...]:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return int(self.data.size)

    def zero_grad(self):
        if self.requires_grad:
            if self.grad is None or self.grad.shape != self.data.shape:
                self.grad = np.zeros_like(self.data)
            else:
                self.grad.fill(0.0)

    def item(self) -> float:
        if self.data.size != 1:
            raise ShapeError(f"item() needs a single value, tensor is {shape_str(self.shape)}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data.copy()

    def detach(self) -> "Tensor":
        return Tensor._wrap(self.data.copy(), False)

    def __add__(self, other):
        return add(self, other)

    def __mul__(self, other):
        if isinstance(other, Tensor):
            return mul(self, other)
        return scale(self, other)

    __rmul__ = __mul__

    def __repr__(self):
        label = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={shape_str(self.shape)}{label}, requires_grad={self.requires_grad})"


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


# ---------------------------------------------------------------------------
# Tape
# ---------------------------------------------------------------------------

@dataclass
class TapeEntry:
    op: str
    inputs: Tuple[Tensor, ...]
    output: Optional[Tensor]
    backward: Optional[Callable[[np.ndarray], Sequence[Optional[np.ndarray]]]]

    def release(self) -> None:
        """Drop the closure and tensor references so saved activations can be freed"""
        self.inputs = ()
        self.output = None
        self.backward = None


def _accumulate(tensor: Tensor, grad: np.ndarray) -> None:
    if tensor.grad is None:
        tensor.grad = np.array(grad, dtype=DTYPE)
    else:
        tensor.grad += grad


class Tape:
    """
    Ordered record of the operations of one forward pass.

    Use as a context manager around the forward pass, then call backward()
    exactly once. Backward visits entries in exact reverse recording order and
    releases each entry after it runs, so only leaf tensors keep a gradient.
    """

    def __init__(self):
        self.entries: List[TapeEntry] = []
        self.visited: List[int] = []
        self._consumed = False

    def __enter__(self) -> "Tape":
        if self._consumed:
            raise TapeError("tape already ran backward; record a new forward pass on a fresh tape")
        stack = getattr(_local, "tapes", None)
        if stack is None:
            stack = _local.tapes = []
        stack.append(self)
        return self

    def __exit__(self, exc_type, exc, tb):
        _local.tapes.pop()
        return False

    def __len__(self) -> int:
        return len(self.entries)

    def record(self, op: str, inputs: Tuple[Tensor, ...], output: Tensor, backward) -> None:
        self.entries.append(TapeEntry(op, inputs, output, backward))

    def backward(self, root: Tensor, seed: Optional[np.ndarray] = None) -> None:
        if self._consumed:
            raise TapeError("backward called twice on the same tape without re-recording")
        if not root.requires_grad:
            raise TapeError("backward root was not produced by a recorded operation")
        if seed is None:
            if root.size != 1:
                raise TapeError(f"backward needs a scalar root, got {shape_str(root.shape)}")
            seed = np.ones_like(root.data)
        self._consumed = True
        _accumulate(root, seed)

        for index in range(len(self.entries) - 1, -1, -1):
            entry = self.entries[index]
            self.visited.append(index)
            output = entry.output
            if output.grad is not None:
                grads = entry.backward(output.grad)
                for tensor, grad in zip(entry.inputs, grads):
                    if grad is not None and tensor.requires_grad:
                        _accumulate(tensor, grad)
            if not output.is_leaf:
                output.grad = None
            entry.release()


def active_tape() -> Optional[Tape]:
    stack = getattr(_local, "tapes", None)
    return stack[-1] if stack else None


def _result(op: str, data: np.ndarray, inputs: Sequence[Tensor], backward) -> Tensor:
    tape = active_tape()
    needs_grad = tape is not None and any(t.requires_grad for t in inputs)
    out = Tensor._wrap(data, needs_grad)
    if needs_grad:
        tape.record(op, tuple(inputs), out, backward)
    return out


@contextmanager
def watch_relu_masks() -> Iterator[List[np.ndarray]]:
    """Collect the active set of every relu evaluated inside the block"""
    masks: List[np.ndarray] = []
    previous = getattr(_local, "relu_masks", None)
    _local.relu_masks = masks
    try:
        yield masks
    finally:
        _local.relu_masks = previous


def _unbroadcast(grad: np.ndarray, shape: Tuple[int, ...]) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, extent in enumerate(shape):
        if extent == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


# ---------------------------------------------------------------------------
# Operations
# ---------------------------------------------------------------------------

def matmul(a, b) -> Tensor:
    """
    Matrix product over the last two axes.

    A 2-D right operand is shared across all leading axes of the left operand,
    which is how joint mixing x·A applies one N×N matrix to a whole feature map.
    """
    a, b = as_tensor(a), as_tensor(b)
    if a.ndim < 2 or b.ndim < 2 or a.shape[-1] != b.shape[-2]:
        raise ShapeError(f"matmul: inner extents disagree for {shape_str(a.shape)} and {shape_str(b.shape)}")

    if b.ndim == 2:
        a2 = a.data.reshape(-1, a.shape[-1])
        out = (a2 @ b.data).reshape(a.shape[:-1] + (b.shape[-1],))

        def backward(g):
            g2 = g.reshape(-1, b.shape[-1])
            return (g2 @ b.data.T).reshape(a.shape), a2.T @ g2

        return _result("matmul", out, (a, b), backward)

    out = np.matmul(a.data, b.data)

    def backward(g):
        ga = np.matmul(g, np.swapaxes(b.data, -1, -2))
        gb = np.matmul(np.swapaxes(a.data, -1, -2), g)
        return _unbroadcast(ga, a.shape), _unbroadcast(gb, b.shape)

    return _result("matmul", out, (a, b), backward)


def conv_temporal(x, w, bias=None, stride: int = 1, pad: int = 0) -> Tensor:
    """
    K_t×1 convolution along the temporal axis with zero padding.

    x is C_in×T×N (or B×C_in×T×N), w is C_out×C_in×K_t, bias is C_out or None.
    Each joint column is convolved independently.
    Output length is floor((T + 2·pad − K_t)/stride) + 1.
    """
    x, w = as_tensor(x), as_tensor(w)
    if not isinstance(stride, (int, np.integer)) or stride < 1:
        raise ShapeError(f"conv_temporal: stride must be a positive integer, got {stride}")
    if pad < 0:
        raise ShapeError(f"conv_temporal: padding must be non-negative, got {pad}")
    single = x.ndim == 3
    xd = x.data[None] if single else x.data
    if xd.ndim != 4:
        raise ShapeError(f"conv_temporal: expected C×T×N or B×C×T×N input, got {shape_str(x.shape)}")
    if w.ndim != 3 or w.shape[1] != xd.shape[1]:
        raise ShapeError(
            f"conv_temporal: kernel {shape_str(w.shape)} does not match input channels of {shape_str(x.shape)}")
    c_out, _, k = w.shape
    if bias is not None:
        bias = as_tensor(bias)
        if bias.shape != (c_out,):
            raise ShapeError(f"conv_temporal: bias {shape_str(bias.shape)} does not match {c_out} output channels")

    t = xd.shape[2]
    if t + 2 * pad < k:
        raise ShapeError(f"conv_temporal: kernel size {k} exceeds padded length {t + 2 * pad}")
    t_out = (t + 2 * pad - k) // stride + 1
    span = (t_out - 1) * stride + 1

    xp = np.pad(xd, ((0, 0), (0, 0), (pad, pad), (0, 0))) if pad else xd
    windows = sliding_window_view(xp, k, axis=2)[:, :, :span:stride]   # B×C_in×T'×N×K
    out = np.tensordot(windows, w.data, axes=([1, 4], [1, 2]))          # B×T'×N×C_out
    out = out.transpose(0, 3, 1, 2)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    if single:
        out = out[0]

    def backward(g):
        g4 = g[None] if single else g
        gw = np.tensordot(g4, windows, axes=([0, 2, 3], [0, 2, 3]))
        gwin = np.tensordot(g4, w.data, axes=([1], [0]))               # B×T'×N×C_in×K
        gxp = np.zeros_like(xp)
        for j in range(k):
            gxp[:, :, j:j + span:stride, :] += gwin[..., j].transpose(0, 3, 1, 2)
        gx = gxp[:, :, pad:pad + t, :]
        if single:
            gx = gx[0]
        if bias is None:
            return gx, gw
        return gx, gw, g4.sum(axis=(0, 2, 3))

    inputs = (x, w) if bias is None else (x, w, bias)
    return _result("conv_temporal", out, inputs, backward)


def ewise(a, b, kind: str = "add") -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    if a.shape != b.shape:
        raise ShapeError(f"ewise {kind}: shapes {shape_str(a.shape)} and {shape_str(b.shape)} differ")
    if kind == "add":
        return _result("add", a.data + b.data, (a, b), lambda g: (g, g))
    if kind == "mul":
        return _result("mul", a.data * b.data, (a, b), lambda g: (g * b.data, g * a.data))
    raise ConfigError(f"ewise: unknown kind '{kind}' (expected add or mul)")


def add(a, b) -> Tensor:
    return ewise(a, b, "add")


def mul(a, b) -> Tensor:
    return ewise(a, b, "mul")


def scale(a, s: Union[float, Tensor]) -> Tensor:
    """Multiply by a scalar; a scalar Tensor participates in differentiation"""
    a = as_tensor(a)
    if isinstance(s, Tensor):
        if s.size != 1:
            raise ShapeError(f"scale: factor must be a scalar, got {shape_str(s.shape)}")
        factor = s.data.reshape(-1)[0]
        return _result("scale", factor * a.data, (a, s),
                       lambda g: (factor * g, np.sum(g * a.data).reshape(s.shape)))
    factor = float(s)
    return _result("scale", factor * a.data, (a,), lambda g: (factor * g,))


def relu(a) -> Tensor:
    a = as_tensor(a)
    mask = a.data > 0
    monitor = getattr(_local, "relu_masks", None)
    if monitor is not None:
        monitor.append(mask)
    return _result("relu", np.where(mask, a.data, 0.0), (a,), lambda g: (g * mask,))


def tensor_sum(a) -> Tensor:
    a = as_tensor(a)
    return _result("sum", np.array(a.data.sum()), (a,), lambda g: (np.full(a.shape, g.reshape(-1)[0]),))


def channel_norm(x, eps: float = 1e-5) -> Tensor:
    """
    Per-channel normalization over the T×N slice:
    (x_c − mean(x_c)) / (std(x_c) + eps), population standard deviation.
    A constant channel maps to all zeros.
    """
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"channel_norm: expected C×T×N or B×C×T×N input, got {shape_str(x.shape)}")
    axes = (-2, -1)
    count = x.shape[-2] * x.shape[-1]
    centered = x.data - x.data.mean(axis=axes, keepdims=True)
    std = np.sqrt(np.mean(centered * centered, axis=axes, keepdims=True))
    denom = std + eps
    out = centered / denom

    def backward(g):
        safe_std = np.where(std > 0, std, 1.0)
        proj = np.sum(g * centered, axis=axes, keepdims=True)
        gu = g / denom - centered * proj / (denom * denom * count * safe_std)
        return (gu - gu.mean(axis=axes, keepdims=True),)

    return _result("channel_norm", out, (x,), backward)


def global_avg_pool(x) -> Tensor:
    """Mean over T×N per channel: C×T×N → C, B×C×T×N → B×C"""
    x = as_tensor(x)
    if x.ndim not in (3, 4):
        raise ShapeError(f"global_avg_pool: expected C×T×N or B×C×T×N input, got {shape_str(x.shape)}")
    count = x.shape[-2] * x.shape[-1]
    out = x.data.mean(axis=(-2, -1))
    return _result("global_avg_pool", out, (x,),
                   lambda g: (np.broadcast_to(g[..., None, None] / count, x.shape).copy(),))


def linear(x, w, b=None) -> Tensor:
    """Affine map x·wᵀ + b for x of extent B×C (or C), w of extent K×C"""
    x, w = as_tensor(x), as_tensor(w)
    single = x.ndim == 1
    x2 = x.data[None] if single else x.data
    if w.ndim != 2 or x2.ndim != 2 or x2.shape[1] != w.shape[1]:
        raise ShapeError(f"linear: input {shape_str(x.shape)} does not match weight {shape_str(w.shape)}")
    out = x2 @ w.data.T
    if b is not None:
        b = as_tensor(b)
        if b.shape != (w.shape[0],):
            raise ShapeError(f"linear: bias {shape_str(b.shape)} does not match {w.shape[0]} outputs")
        out = out + b.data
    if single:
        out = out[0]

    def backward(g):
        g2 = g[None] if single else g
        gx = g2 @ w.data
        grads = [gx[0] if single else gx, g2.T @ x2]
        if b is not None:
            grads.append(g2.sum(axis=0))
        return grads

    inputs = (x, w) if b is None else (x, w, b)
    return _result("linear", out, inputs, backward)


def softmax_cross_entropy(logits, labels) -> Tuple[Tensor, np.ndarray]:
    """
    Mean negative log-likelihood of max-subtracted softmax probabilities.

    Returns the scalar loss tensor and the B×K probability matrix.
    """
    logits = as_tensor(logits)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if logits.ndim != 2:
        raise ShapeError(f"softmax_cross_entropy: logits must be B×K, got {shape_str(logits.shape)}")
    batch, classes = logits.shape
    if labels.shape[0] != batch:
        raise ShapeError(f"softmax_cross_entropy: {labels.shape[0]} labels for {batch} rows")
    bad = labels[(labels < 0) | (labels >= classes)]
    if bad.size:
        raise ConfigError(f"softmax_cross_entropy: label {int(bad[0])} outside [0, {classes})")

    shifted = logits.data - logits.data.max(axis=1, keepdims=True)
    log_norm = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    log_probs = shifted - log_norm
    probs = np.exp(log_probs)
    rows = np.arange(batch)
    loss = -log_probs[rows, labels].mean()

    def backward(g):
        grad = probs.copy()
        grad[rows, labels] -= 1.0
        return (grad * (g.reshape(-1)[0] / batch),)

    return _result("softmax_cross_entropy", np.array(loss), (logits,), backward), probs


# ---------------------------------------------------------------------------
# Gradient checking
# ---------------------------------------------------------------------------

@dataclass
class GradCheckResult:
    max_rel_error: float
    checked: int
    kinks_skipped: int
    worst: str
    per_parameter: Dict[str, float] = field(default_factory=dict)

    def passed(self, tolerance: float = 1e-4) -> bool:
        return self.max_rel_error < tolerance


def _scalar_value(out: Tensor) -> float:
    if out.size != 1:
        raise ShapeError(f"grad_check: function must return a scalar, got {shape_str(out.shape)}")
    value = out.item()
    if not math.isfinite(value):
        raise NumericError(f"grad_check: non-finite output {value}")
    return value


def _active_pattern(masks: List[np.ndarray]) -> bytes:
    return b"".join(np.packbits(m).tobytes() for m in masks)


def grad_check(fn: Callable[[], Tensor],
               params: Union[Mapping[str, Tensor], Sequence[Tensor]],
               h: float = 1e-5,
               mode: str = "central",
               floor: float = 1e-8,
               track_kinks: bool = True) -> GradCheckResult:
    """
    Compare analytic gradients of a scalar function against central differences.

    Relative error per entry is |a − n| / max(|a|, |n|, floor). With track_kinks,
    entries whose ±h perturbation changes any relu active set are excluded and
    counted in kinks_skipped, since the function is not differentiable there.
    """
    if mode != "central":
        raise ConfigError(f"grad_check: unsupported mode '{mode}' (only central)")
    if isinstance(params, Mapping):
        named = list(params.items())
    else:
        named = [(p.name or f"param{i}", p) for i, p in enumerate(params)]
    for name, p in named:
        if not p.requires_grad:
            raise ConfigError(f"grad_check: parameter '{name}' does not require a gradient")
        p.zero_grad()

    with Tape() as tape, watch_relu_masks() as masks:
        out = fn()
    _scalar_value(out)
    baseline = _active_pattern(masks)
    tape.backward(out)
    analytic = {name: p.grad.copy() for name, p in named}
    for name, grad in analytic.items():
        if not np.all(np.isfinite(grad)):
            raise NumericError(f"grad_check: non-finite analytic gradient for '{name}'")

    def evaluate() -> Tuple[float, bytes]:
        with watch_relu_masks() as perturbed_masks:
            value = _scalar_value(fn())
        return value, _active_pattern(perturbed_masks)

    worst_err, worst_name, checked, skipped = 0.0, "", 0, 0
    per_parameter: Dict[str, float] = {}
    for name, p in named:
        flat = p.data.reshape(-1)
        grad = analytic[name].reshape(-1)
        param_worst = 0.0
        for i in range(flat.size):
            original = flat[i]
            flat[i] = original + h
            f_plus, pattern_plus = evaluate()
            flat[i] = original - h
            f_minus, pattern_minus = evaluate()
            flat[i] = original
            if track_kinks and (pattern_plus != baseline or pattern_minus != baseline):
                skipped += 1
                continue
            numeric = (f_plus - f_minus) / (2.0 * h)
            a = grad[i]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            checked += 1
            param_worst = max(param_worst, err)
            if err > worst_err:
                worst_err, worst_name = err, f"{name}[{i}]"
        per_parameter[name] = param_worst

    return GradCheckResult(worst_err, checked, skipped, worst_name, per_parameter)
