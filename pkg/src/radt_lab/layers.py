"""Parameterized building blocks with seeded init, plus checkpoint IO.

Checkpoint format (flat binary, little-endian): 8-byte magic, u32 version,
32-byte config digest, then one record per parameter: u32 name length,
utf-8 name, u32 ndim, u32 dims, raw float64 payload. Round-trips bit-exact.
"""

from __future__ import annotations

import struct
from typing import Dict, List, Optional, Sequence

import numpy as np

from .tensor import Tensor, gelu, index_select, linear, mul, relu, reshape, silu, tanh

INIT_STD = 0.02  # GPT-lineage default for generic weights

ACTIVATIONS = {"silu": silu, "gelu": gelu, "relu": relu, "tanh": tanh}

CHECKPOINT_MAGIC = b"RADTCKPT"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file malformed or inconsistent."""


def init_rng(seed: int) -> np.random.Generator:
    """Deterministic generator for parameter initialization."""
    return np.random.default_rng(seed)


class Linear:
    """Affine map ``x W^T + b`` with weight stored ``[out, in]``."""

    def __init__(self, in_dim: int, out_dim: int, rng: Optional[np.random.Generator] = None,
                 bias: bool = True, init: str = "scaled-normal", std: float = INIT_STD):
        self.in_dim, self.out_dim = in_dim, out_dim
        self.init_mode = init
        if init == "zero":
            w = np.zeros((out_dim, in_dim))
        elif init == "scaled-normal":
            if rng is None:
                raise ValueError("scaled-normal init requires an rng")
            w = rng.normal(0.0, std, size=(out_dim, in_dim))
        else:
            raise ValueError(f"unknown init mode {init!r}")
        self.weight = Tensor(w, requires_grad=True)
        self.bias = Tensor(np.zeros(out_dim), requires_grad=True) if bias else None

    def __call__(self, x: Tensor) -> Tensor:
        return linear(x, self.weight, self.bias)

    def parameters(self) -> List[Tensor]:
        return [self.weight] if self.bias is None else [self.weight, self.bias]

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        out = {f"{prefix}.weight": self.weight}
        if self.bias is not None:
            out[f"{prefix}.bias"] = self.bias
        return out


class Embedding:
    """Lookup table ``[vocab, dim]``; raises on out-of-range indices."""

    def __init__(self, vocab: int, dim: int, rng: np.random.Generator, std: float = INIT_STD):
        self.vocab, self.dim = vocab, dim
        self.table = Tensor(rng.normal(0.0, std, size=(vocab, dim)), requires_grad=True)

    def __call__(self, indices: np.ndarray) -> Tensor:
        idx = np.asarray(indices, dtype=np.int64)
        if idx.size and idx.max() >= self.vocab:
            raise IndexError(f"embedding index {int(idx.max())} >= vocab size {self.vocab}")
        if idx.size and idx.min() < 0:
            raise IndexError(f"negative embedding index {int(idx.min())}")
        flat = index_select(self.table, 0, idx.reshape(-1))
        return reshape(flat, idx.shape + (self.dim,))

    def parameters(self) -> List[Tensor]:
        return [self.table]

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        return {f"{prefix}.table": self.table}


class Mlp:
    """Linear stack with an activation between layers.

    ``final_zero`` zero-initializes the last layer so the head outputs exact
    zeros at construction regardless of input.
    """

    def __init__(self, dims: Sequence[int], rng: np.random.Generator,
                 activation: str = "silu", final_zero: bool = False):
        if len(dims) < 2:
            raise ValueError("Mlp needs at least input and output dims")
        self.activation = activation
        self.final_zero = final_zero
        self.layers: List[Linear] = []
        for i in range(len(dims) - 1):
            last = i == len(dims) - 2
            init = "zero" if (final_zero and last) else "scaled-normal"
            self.layers.append(Linear(dims[i], dims[i + 1], rng=rng, init=init))

    def __call__(self, x: Tensor) -> Tensor:
        act = ACTIVATIONS[self.activation]
        for i, layer in enumerate(self.layers):
            x = layer(x)
            if i < len(self.layers) - 1:
                x = act(x)
        return x

    def parameters(self) -> List[Tensor]:
        return [p for layer in self.layers for p in layer.parameters()]

    def named_parameters(self, prefix: str) -> Dict[str, Tensor]:
        out: Dict[str, Tensor] = {}
        for i, layer in enumerate(self.layers):
            out.update(layer.named_parameters(f"{prefix}.{i}"))
        return out


def dropout(x: Tensor, rate: float, training: bool, rng: Optional[np.random.Generator]) -> Tensor:
    """Inverted dropout: eval mode and rate 0 are exact identities."""
    if not 0.0 <= rate < 1.0:
        raise ValueError(f"dropout rate must be in [0, 1), got {rate}")
    if not training or rate == 0.0:
        return x
    if rng is None:
        raise ValueError("training-mode dropout requires an rng")
    keep = (rng.random(size=x.shape) >= rate).astype(np.float64)
    return mul(x, Tensor(keep * (1.0 / (1.0 - rate))))


# -- checkpoint IO -----------------------------------------------------------

def save_checkpoint(path, arrays: Dict[str, np.ndarray], config_digest: bytes) -> None:
    """Write named float64 arrays; records sorted by name for stable bytes."""
    if len(config_digest) != 32:
        raise ValueError("config digest must be 32 bytes")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", CHECKPOINT_VERSION))
        fh.write(config_digest)
        for name in sorted(arrays):
            arr = np.asarray(arrays[name], dtype="<f8")
            nb = name.encode("utf-8")
            fh.write(struct.pack("<I", len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def load_checkpoint(path):
    """Read a checkpoint; returns ``(config_digest, {name: array})``."""
    with open(path, "rb") as fh:
        blob = fh.read()
    off = 0

    def take(n):
        nonlocal off
        if off + n > len(blob):
            raise CheckpointError(f"truncated checkpoint at byte {off}")
        chunk = blob[off:off + n]
        off += n
        return chunk

    if take(8) != CHECKPOINT_MAGIC:
        raise CheckpointError("bad checkpoint magic")
    (version,) = struct.unpack("<I", take(4))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {version}")
    digest = take(32)
    arrays: Dict[str, np.ndarray] = {}
    while off < len(blob):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (ndim,) = struct.unpack("<I", take(4))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim)) if ndim else ()
        count = int(np.prod(shape)) if shape else 1
        data = np.frombuffer(take(8 * count), dtype="<f8").reshape(shape)
        arrays[name] = data.astype(np.float64)
    return digest, arrays
