"""Uniform cell-centred grids, density fields and the AGD1 snapshot format."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path
from typing import BinaryIO

import numpy as np

SNAPSHOT_MAGIC = b"AGD1"
_HEADER = struct.Struct("<4sIIdd")


@dataclass(frozen=True)
class GridSpec:
    """Uniform grid of ``n**d`` cells covering the cube ``[-L, L)**d``.

    Cell centres sit at ``-L + (i + 1/2) h`` with ``h = 2L/n``, so the grid is
    symmetric under ``x -> -x`` and the origin is a cell corner.
    """

    d: int
    n: int
    L: float

    def __post_init__(self) -> None:
        if self.d not in (1, 2, 3):
            raise ValueError(f"dimension must be 1, 2 or 3, got {self.d}")
        if self.n < 8 or self.n & (self.n - 1):
            raise ValueError(f"n must be a power of two >= 8, got {self.n}")
        if not self.L > 0 or not np.isfinite(self.L):
            raise ValueError(f"half-width L must be positive, got {self.L}")

    @property
    def h(self) -> float:
        return 2.0 * self.L / self.n

    @property
    def shape(self) -> tuple[int, ...]:
        return (self.n,) * self.d

    @property
    def cell_volume(self) -> float:
        return self.h**self.d

    def axis(self) -> np.ndarray:
        """Cell-centre coordinates along one axis."""
        return -self.L + (np.arange(self.n) + 0.5) * self.h

    def mesh(self) -> list[np.ndarray]:
        ax = self.axis()
        return list(np.meshgrid(*([ax] * self.d), indexing="ij"))

    def radius(self, center=None) -> np.ndarray:
        """Distance of every cell centre from ``center`` (default: origin)."""
        c = np.zeros(self.d) if center is None else np.asarray(center, dtype=float)
        r2 = np.zeros(self.shape)
        for xi, ci in zip(self.mesh(), c):
            r2 += (xi - ci) ** 2
        return np.sqrt(r2)

    def wavenumbers(self) -> list[np.ndarray]:
        """Angular wavenumbers of the periodic transform, broadcastable to ``shape``."""
        k = 2.0 * np.pi * np.fft.fftfreq(self.n, d=self.h)
        out = []
        for ax in range(self.d):
            sh = [1] * self.d
            sh[ax] = self.n
            out.append(k.reshape(sh))
        return out

    def zeros(self) -> "Field":
        return Field(self, np.zeros(self.shape))

    def field(self, values) -> "Field":
        return Field(self, np.asarray(values, dtype=float).reshape(self.shape))


@dataclass(frozen=True, eq=False)
class Field:
    """Real samples of a density on a :class:`GridSpec`, one per cell centre."""

    spec: GridSpec
    values: np.ndarray

    def __post_init__(self) -> None:
        v = np.asarray(self.values, dtype=float)
        if v.shape != self.spec.shape:
            if v.size != self.spec.n**self.spec.d:
                raise ValueError(f"expected {self.spec.shape} samples, got shape {v.shape}")
            v = v.reshape(self.spec.shape)
        if not np.isfinite(v).all():
            raise ValueError("field values must be finite")
        object.__setattr__(self, "values", v)

    def _other(self, other) -> np.ndarray | float:
        if isinstance(other, Field):
            if other.spec != self.spec:
                raise ValueError(f"grid mismatch: {self.spec} vs {other.spec}")
            return other.values
        return other

    def __add__(self, other) -> "Field":
        return Field(self.spec, self.values + self._other(other))

    def __sub__(self, other) -> "Field":
        return Field(self.spec, self.values - self._other(other))

    def __mul__(self, other) -> "Field":
        return Field(self.spec, self.values * self._other(other))

    __radd__ = __add__
    __rmul__ = __mul__

    def __neg__(self) -> "Field":
        return Field(self.spec, -self.values)

    def copy(self) -> "Field":
        return Field(self.spec, self.values.copy())


def check_same_grid(*fields: Field) -> GridSpec:
    spec = fields[0].spec
    for f in fields[1:]:
        if f.spec != spec:
            raise ValueError(f"grid mismatch: {spec} vs {f.spec}")
    return spec


def integrate(f: Field) -> float:
    """Midpoint-rule integral ``h**d * sum(values)``."""
    # numpy reduces with fixed-order pairwise summation, so this is deterministic
    return float(f.spec.cell_volume * np.sum(f.values))


def lp_norm(f: Field, p: float) -> float:
    """Discrete L^p norm; ``p = inf`` gives the max of ``|values|``."""
    if not p >= 1:
        raise ValueError(f"L^p norm needs p >= 1, got {p}")
    a = np.abs(f.values)
    top = float(a.max()) if a.size else 0.0
    if np.isinf(p):
        return top
    if top == 0.0:
        return 0.0
    # scale by the max so large p does not overflow
    return top * float(f.spec.cell_volume * np.sum((a / top) ** p)) ** (1.0 / p)


def truncate_above(f: Field, j: float) -> tuple[Field, Field]:
    """Split ``u`` into ``(max(u - j, 0), min(u, j))``; the two parts sum to ``u``."""
    if j < 0:
        raise ValueError(f"truncation level must be >= 0, got {j}")
    upper = np.maximum(f.values - j, 0.0)
    lower = np.minimum(f.values, j)
    return Field(f.spec, upper), Field(f.spec, lower)


# --- AGD1 snapshots -----------------------------------------------------------


def snapshot_bytes(f: Field, t: float) -> bytes:
    g = f.spec
    head = _HEADER.pack(SNAPSHOT_MAGIC, g.d, g.n, float(g.L), float(t))
    return head + np.ascontiguousarray(f.values, dtype="<f8").tobytes(order="C")


def write_snapshot(path: str | Path | BinaryIO, f: Field, t: float) -> None:
    data = snapshot_bytes(f, t)
    if hasattr(path, "write"):
        path.write(data)
        return
    Path(path).write_bytes(data)


def parse_snapshot(data: bytes) -> tuple[Field, float]:
    if len(data) < _HEADER.size:
        raise ValueError("truncated AGD1 snapshot header")
    magic, d, n, L, t = _HEADER.unpack_from(data)
    if magic != SNAPSHOT_MAGIC:
        raise ValueError(f"bad snapshot magic {magic!r}")
    spec = GridSpec(d, n, L)
    count = n**d
    body = data[_HEADER.size:]
    if len(body) != 8 * count:
        raise ValueError(f"snapshot body has {len(body)} bytes, expected {8 * count}")
    values = np.frombuffer(body, dtype="<f8").astype(float).reshape(spec.shape)
    return Field(spec, values), t


def read_snapshot(path: str | Path | BinaryIO) -> tuple[Field, float]:
    if hasattr(path, "read"):
        return parse_snapshot(path.read())
    return parse_snapshot(Path(path).read_bytes())
