# core/parameter_store.py
"""
Named, ordered collection of trainable tensors plus the checkpoint format.

Checkpoint layout: one line of compact sorted JSON (the manifest) terminated
by a newline, followed by every tensor as raw little-endian float64 in
manifest order. The manifest carries names, shapes, byte offsets into the
payload, the seed, the configuration and its hash.
"""

import json
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple, Union

import numpy as np

from .errors import ConfigError, ShapeError, shape_str
from .tensor_autograd import Tensor

CHECKPOINT_FORMAT = "cfsc-checkpoint"
CHECKPOINT_VERSION = 1
_PAYLOAD_DTYPE = np.dtype("<f8")


class ParameterStore:
    """
    Trainable tensors in creation order.

    Initialization draws from a single generator seeded once, so the values
    depend only on the seed and on the order in which parameters are created.
    """

    def __init__(self, seed: int = 0):
        self.seed = int(seed)
        self.rng = np.random.default_rng(self.seed)
        self._params: Dict[str, Tensor] = {}
        self._decay: Dict[str, bool] = {}

    def add(self, name: str, tensor: Tensor, decay: bool = True) -> Tensor:
        if name in self._params:
            raise ConfigError(f"parameter '{name}' registered twice")
        tensor.requires_grad = True
        tensor.name = name
        tensor.zero_grad()
        self._params[name] = tensor
        self._decay[name] = decay
        return tensor

    def uniform(self, name: str, shape: Tuple[int, ...], fan_in: int) -> Tensor:
        bound = np.sqrt(1.0 / max(int(fan_in), 1))
        return self.add(name, Tensor(self.rng.uniform(-bound, bound, size=shape)), decay=True)

    def constant(self, name: str, shape: Tuple[int, ...], value: float, decay: bool = False) -> Tensor:
        return self.add(name, Tensor(np.full(shape, float(value))), decay=decay)

    def zeros(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self.constant(name, shape, 0.0)

    def ones(self, name: str, shape: Tuple[int, ...]) -> Tensor:
        return self.constant(name, shape, 1.0)

    def __getitem__(self, name: str) -> Tensor:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[str]:
        return iter(self._params)

    def __len__(self) -> int:
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self) -> List[str]:
        return list(self._params)

    def decays(self, name: str) -> bool:
        return self._decay[name]

    def decay_mask(self) -> Dict[str, bool]:
        return dict(self._decay)

    def count(self) -> int:
        return sum(p.size for p in self._params.values())

    def zero_grad(self):
        for p in self._params.values():
            p.zero_grad()

    def grads(self) -> Dict[str, np.ndarray]:
        return {name: p.grad for name, p in self._params.items()}

    def state_arrays(self) -> Dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def load_arrays(self, arrays: Dict[str, np.ndarray]):
        missing = set(self._params) - set(arrays)
        extra = set(arrays) - set(self._params)
        if missing or extra:
            raise ConfigError(f"checkpoint does not match the model: missing {sorted(missing)}, "
                              f"unexpected {sorted(extra)}")
        for name, p in self._params.items():
            value = np.asarray(arrays[name], dtype=np.float64)
            if value.shape != p.shape:
                raise ShapeError(f"checkpoint tensor '{name}' is {shape_str(value.shape)}, "
                                 f"model expects {shape_str(p.shape)}")
            p.data[...] = value

    # -----------------------------------------------------------------------
    # Checkpoint I/O
    # -----------------------------------------------------------------------

    def save_checkpoint(self, path: Union[str, Path], extra: Optional[Dict[str, Any]] = None) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)

        entries, offset = [], 0
        for name, p in self._params.items():
            nbytes = p.size * _PAYLOAD_DTYPE.itemsize
            entries.append({"name": name, "shape": list(p.shape), "offset": offset, "nbytes": nbytes})
            offset += nbytes

        manifest = {"format": CHECKPOINT_FORMAT, "version": CHECKPOINT_VERSION,
                    "seed": self.seed, "tensors": entries}
        manifest.update(extra or {})
        header = json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n"

        with open(path, "wb") as f:
            f.write(header.encode("utf-8"))
            for p in self._params.values():
                f.write(np.ascontiguousarray(p.data, dtype=_PAYLOAD_DTYPE).tobytes())
        return path


def read_checkpoint(path: Union[str, Path]) -> Tuple[Dict[str, Any], Dict[str, np.ndarray]]:
    """Return (manifest, name → array) for a checkpoint file"""
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    split = raw.find(b"\n")
    if split < 0:
        raise ConfigError(f"checkpoint {path} has no manifest line")
    try:
        manifest = json.loads(raw[:split].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise ConfigError(f"checkpoint {path} has an unreadable manifest ({e})")
    if manifest.get("format") != CHECKPOINT_FORMAT:
        raise ConfigError(f"{path} is not a {CHECKPOINT_FORMAT} file")

    payload = raw[split + 1:]
    arrays = {}
    for entry in manifest["tensors"]:
        start, nbytes = entry["offset"], entry["nbytes"]
        if start + nbytes > len(payload):
            raise ConfigError(f"checkpoint {path} is truncated at tensor '{entry['name']}'")
        values = np.frombuffer(payload[start:start + nbytes], dtype=_PAYLOAD_DTYPE)
        arrays[entry["name"]] = values.astype(np.float64).reshape(entry["shape"])
    return manifest, arrays
