"""Named parameter store and the binary checkpoint format.

Checkpoint layout::

    PPMN-CHECKPOINT 1
    <count>
    <name> <d0>x<d1>x... <frozen 0|1>      (one line per parameter)
    END
    <little-endian float64 values, parameters in header order>
"""

from __future__ import annotations

import hashlib
import math
from collections import OrderedDict
from pathlib import Path
from typing import Iterator

import numpy as np

from .autodiff import Parameter, ShapeError

MAGIC = "PPMN-CHECKPOINT 1"


class CheckpointError(ValueError):
    """Checkpoint is malformed or does not match the model configuration."""


class ParamStore:
    """Ordered collection of named parameters with optimizer state."""

    def __init__(self):
        self._params: "OrderedDict[str, Parameter]" = OrderedDict()
        self.velocity: dict[str, np.ndarray] = {}

    def add(self, param: Parameter) -> Parameter:
        if param.name in self._params:
            raise KeyError(f"duplicate parameter name {param.name}")
        self._params[param.name] = param
        return param

    def __getitem__(self, name: str) -> Parameter:
        return self._params[name]

    def __contains__(self, name: str) -> bool:
        return name in self._params

    def __iter__(self) -> Iterator[Parameter]:
        return iter(self._params.values())

    def __len__(self) -> int:
        return len(self._params)

    def names(self) -> list[str]:
        return list(self._params)

    def group(self, prefix: str) -> list[Parameter]:
        return [p for name, p in self._params.items() if name.startswith(prefix)]

    def trainable(self) -> list[Parameter]:
        return [p for p in self if not p.frozen]

    def freeze(self, prefix: str = "", frozen: bool = True) -> None:
        for p in self.group(prefix):
            p.frozen = frozen

    def zero_grad(self) -> None:
        for p in self:
            p.zero_grad()

    def snapshot(self) -> dict[str, np.ndarray]:
        return {name: p.data.copy() for name, p in self._params.items()}

    def checksum(self, prefix: str = "") -> str:
        h = hashlib.sha256()
        for p in self.group(prefix):
            h.update(p.name.encode())
            h.update(np.ascontiguousarray(p.data, dtype="<f8").tobytes())
        return h.hexdigest()

    def grad_norm(self, prefix: str = "") -> float:
        return math.sqrt(sum(float(np.sum(p.grad ** 2)) for p in self.group(prefix)))


def glorot_uniform(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    """Uniform in +-sqrt(6 / (fan_in + fan_out)) for (out, in[, kh, kw]) shapes."""
    receptive = int(np.prod(shape[2:])) if len(shape) > 2 else 1
    fan_in = shape[1] * receptive
    fan_out = shape[0] * receptive
    limit = math.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-limit, limit, size=shape)


def save_checkpoint(store: ParamStore, path) -> None:
    lines = [MAGIC, str(len(store))]
    for p in store:
        dims = "x".join(str(d) for d in p.shape)
        lines.append(f"{p.name} {dims} {int(p.frozen)}")
    lines.append("END")
    with open(path, "wb") as fh:
        fh.write(("\n".join(lines) + "\n").encode("ascii"))
        for p in store:
            fh.write(np.ascontiguousarray(p.data, dtype="<f8").tobytes())


def read_checkpoint(path) -> list[tuple[str, np.ndarray, bool]]:
    raw = Path(path).read_bytes()
    entries = []
    pos = 0

    def next_line() -> str:
        nonlocal pos
        end = raw.index(b"\n", pos)
        line = raw[pos:end].decode("ascii")
        pos = end + 1
        return line

    try:
        if next_line() != MAGIC:
            raise CheckpointError(f"{path}: not a PPMN checkpoint")
        count = int(next_line())
        header = []
        for _ in range(count):
            name, dims, frozen = next_line().split()
            shape = tuple(int(d) for d in dims.split("x"))
            header.append((name, shape, frozen == "1"))
        if next_line() != "END":
            raise CheckpointError(f"{path}: missing END marker")
    except (ValueError, IndexError) as exc:
        if isinstance(exc, CheckpointError):
            raise
        raise CheckpointError(f"{path}: malformed header ({exc})") from exc
    for name, shape, frozen in header:
        n = int(np.prod(shape))
        chunk = raw[pos:pos + 8 * n]
        if len(chunk) != 8 * n:
            raise CheckpointError(f"{path}: truncated data for parameter {name}")
        entries.append((name, np.frombuffer(chunk, dtype="<f8").reshape(shape).astype(np.float64), frozen))
        pos += 8 * n
    if pos != len(raw):
        raise CheckpointError(f"{path}: {len(raw) - pos} trailing bytes")
    return entries


def load_checkpoint(store: ParamStore, path, *, prefix_map: dict[str, str] | None = None,
                    keep_frozen_flags: bool = True) -> None:
    """Load values into ``store``; every store parameter must be present with the same shape.

    ``prefix_map`` renames checkpoint prefixes (e.g. to graft a channel into
    another model); entries whose renamed name is not in the store are an error
    unless the map is given, in which case unmapped entries are skipped.
    """
    entries = read_checkpoint(path)
    seen = set()
    for name, values, frozen in entries:
        target = name
        if prefix_map is not None:
            for src, dst in prefix_map.items():
                if name.startswith(src):
                    target = dst + name[len(src):]
                    break
            else:
                continue
        if target not in store:
            raise CheckpointError(f"parameter {name}: present in checkpoint but not in the model")
        p = store[target]
        if p.shape != values.shape:
            raise CheckpointError(
                f"parameter {name}: checkpoint shape {values.shape} does not match model shape {p.shape}"
            )
        try:
            p.assign(values)
        except ShapeError as exc:
            raise CheckpointError(str(exc)) from exc
        if keep_frozen_flags:
            p.frozen = frozen
        seen.add(target)
    expected = [n for n in store.names()
                if prefix_map is None or any(n.startswith(d) for d in prefix_map.values())]
    missing = [n for n in expected if n not in seen]
    if missing:
        raise CheckpointError(f"parameter {missing[0]}: missing from checkpoint {path}")
