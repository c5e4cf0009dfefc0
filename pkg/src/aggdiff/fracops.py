"""Fractional operators on a grid: Riesz potentials, (-Delta)^r and |grad|^r.

Normalisation is fixed in Fourier space: the Riesz potential of order ``s``
has symbol ``|xi|^(-2s)``, which in real space is convolution with
``riesz_constant(d, s) * |z|^(-d+2s)``.

Two modes are supported. ``PERIODIC`` treats the cube as a torus and drops
the zero mode. ``FREE_SPACE`` convolves with the real-space kernel on a
zero-padded grid, which is exact free-space convolution of the sampled data.
"""
from __future__ import annotations

import enum
import functools
import math
from dataclasses import dataclass

import numpy as np

from . import _fft
from .grid import Field, GridSpec, check_same_grid


class Mode(str, enum.Enum):
    PERIODIC = "periodic"
    FREE_SPACE = "free"


@dataclass(frozen=True)
class KernelSpec:
    d: int
    s: float
    mode: Mode = Mode.FREE_SPACE
    pad: int = 2

    def __post_init__(self) -> None:
        object.__setattr__(self, "mode", Mode(self.mode))
        if not 0 < self.s < self.d / 2:
            raise ValueError(f"kernel order s must lie in (0, d/2) = (0, {self.d / 2}), got {self.s}")
        if self.mode is Mode.FREE_SPACE and self.pad < 2:
            raise ValueError("free-space convolution needs a padding factor >= 2")


def riesz_constant(d: int, s: float) -> float:
    """Prefactor ``c`` with ``c |z|^(-d+2s)`` having Fourier symbol ``|xi|^(-2s)``."""
    return math.gamma(d / 2 - s) / (4.0**s * math.pi ** (d / 2) * math.gamma(s))


def gradient_constant(d: int, s: float) -> float:
    """Coefficient ``g`` in ``grad(c |z|^(-d+2s)) = g |z|^(-d-2+2s) z``.

    Equals ``c (2s - d)``. The product stays finite at ``s = d/2``, where it is
    the gradient coefficient of the logarithmic kernel with symbol ``|xi|^(-d)``.
    """
    if not 0 < s <= d / 2:
        raise ValueError(f"order s must lie in (0, d/2], got {s}")
    return -2.0 * math.gamma(d / 2 - s + 1) / (4.0**s * math.pi ** (d / 2) * math.gamma(s))


@functools.lru_cache(maxsize=None)
def cube_average_power(d: int, a: float) -> float:
    """Mean of ``|z|^a`` over the unit cube ``[-1/2, 1/2]^d`` (needs ``a > -d``).

    The cube is split into ``2d`` pyramids with apex at the origin; the radial
    integral is done in closed form, leaving a smooth integral over one face.
    """
    if not a > -d:
        raise ValueError("power is not integrable at the origin")
    if d == 1:
        face = 0.5**a
    else:
        x, w = np.polynomial.legendre.leggauss(24)
        x, w = 0.5 * x, 0.5 * w
        grids = np.meshgrid(*([x] * (d - 1)), indexing="ij")
        weights = functools.reduce(np.multiply, np.meshgrid(*([w] * (d - 1)), indexing="ij"))
        r2 = 0.25 + sum(g**2 for g in grids)
        face = float(np.sum(weights * r2 ** (a / 2)))
    return d * face / (d + a)


def padded_offsets(g: GridSpec, pad: int = 2) -> list[np.ndarray]:
    """Offset coordinates of the wrapped ``pad*n`` grid, broadcastable per axis.

    Index ``j`` on an axis holds the offset ``j*h`` for ``j < N/2`` and
    ``(j - N)*h`` otherwise, the layout a circular convolution expects.
    """
    N = pad * g.n
    j = np.arange(N)
    o = np.where(j < N // 2, j, j - N) * g.h
    out = []
    for ax in range(g.d):
        sh = [1] * g.d
        sh[ax] = N
        out.append(o.reshape(sh))
    return out


def _offset_radius(g: GridSpec, pad: int) -> np.ndarray:
    offs = padded_offsets(g, pad)
    r2 = functools.reduce(np.add, [o**2 for o in offs])
    return np.sqrt(r2)


def riesz_kernel_table(g: GridSpec, s: float, pad: int = 2, scale: float = 1.0) -> np.ndarray:
    """Kernel ``c |z|^(-d+2s)`` on the padded offset grid, times the cell volume.

    The singular cell at ``z = 0`` holds the exact cell average of the kernel.
    ``scale`` multiplies the whole table (used only to inject faults in the
    verification battery).
    """
    a = -g.d + 2 * s
    c = riesz_constant(g.d, s) * scale
    r = _offset_radius(g, pad)
    with np.errstate(divide="ignore"):
        table = c * r**a
    table[(0,) * g.d] = c * g.h**a * cube_average_power(g.d, a)
    return table * g.cell_volume


@functools.lru_cache(maxsize=32)
def _kernel_hat(g: GridSpec, s: float, pad: int, scale: float) -> np.ndarray:
    table = riesz_kernel_table(g, s, pad, scale)
    khat = _fft.plan(table.shape).forward(table)
    # the table is even, so its transform is real up to rounding
    return khat.real.copy()


def rfft_wavenumbers(shape: tuple[int, ...], h: float) -> list[np.ndarray]:
    """Angular wavenumbers laid out like the output of ``rfftn(x, shape)``."""
    d = len(shape)
    out = []
    for ax, N in enumerate(shape):
        if ax == d - 1:
            k = 2 * np.pi * np.fft.rfftfreq(N, d=h)
        else:
            k = 2 * np.pi * np.fft.fftfreq(N, d=h)
        sh = [1] * d
        sh[ax] = k.size
        out.append(k.reshape(sh))
    return out


def _derivative_symbols(shape: tuple[int, ...], h: float) -> list[np.ndarray]:
    """``i*xi_j`` with the Nyquist entry zeroed (odd symbols cannot represent it)."""
    ks = rfft_wavenumbers(shape, h)
    out = []
    for ax, (k, N) in enumerate(zip(ks, shape)):
        k = k.copy()
        if N % 2 == 0:
            if ax == len(shape) - 1:
                k.flat[-1] = 0.0
            else:
                k.flat[N // 2] = 0.0
        out.append(1j * k)
    return out


def _abs_xi(shape: tuple[int, ...], h: float) -> np.ndarray:
    ks = rfft_wavenumbers(shape, h)
    return np.sqrt(functools.reduce(np.add, [k**2 for k in ks]))


@functools.lru_cache(maxsize=64)
def _power_symbol(shape: tuple[int, ...], h: float, power: float, keep_mean: bool) -> np.ndarray:
    xi = _abs_xi(shape, h)
    with np.errstate(divide="ignore"):
        sym = xi**power
    sym[(0,) * len(shape)] = 1.0 if keep_mean else 0.0
    return sym


def apply_symbol(u: Field, power: float, keep_mean: bool = False) -> Field:
    """Periodic multiplier ``|xi|^power``; the zero mode is kept or dropped."""
    g = u.spec
    p = _fft.plan(g.shape)
    sym = _power_symbol(g.shape, g.h, float(power), keep_mean)
    return Field(g, p.inverse(p.forward(u.values) * sym))


def _check_kernel(u: Field, k: KernelSpec) -> None:
    if k.d != u.spec.d:
        raise ValueError(f"kernel dimension {k.d} does not match grid dimension {u.spec.d}")


def riesz_potential(u: Field, k: KernelSpec, absolute: bool = False, scale: float = 1.0) -> Field:
    """Discrete ``K_s * u``.

    In periodic mode only the mean-free part is seen, so ``absolute=True``
    (caller needs the true potential, not one up to a constant) is rejected.
    """
    _check_kernel(u, k)
    g = u.spec
    if k.mode is Mode.PERIODIC:
        if absolute:
            raise ValueError("periodic mode yields potentials up to a constant; use free-space mode")
        return apply_symbol(u, -2 * k.s) * scale
    shape = (k.pad * g.n,) * g.d
    p = _fft.plan(shape)
    khat = _kernel_hat(g, float(k.s), k.pad, float(scale))
    return Field(g, p.inverse(p.forward(u.values) * khat, crop=g.shape))


def grad_riesz_potential(u: Field, k: KernelSpec) -> list[Field]:
    """``grad(K_s * u)`` by spectral differentiation, one field per axis."""
    _check_kernel(u, k)
    g = u.spec
    if k.mode is Mode.PERIODIC:
        p = _fft.plan(g.shape)
        uh = p.forward(u.values) * _power_symbol(g.shape, g.h, -2.0 * k.s, False)
        return [Field(g, p.inverse(uh * dk)) for dk in _derivative_symbols(g.shape, g.h)]
    shape = (k.pad * g.n,) * g.d
    p = _fft.plan(shape)
    prod = p.forward(u.values) * _kernel_hat(g, float(k.s), k.pad, 1.0)
    return [Field(g, p.inverse(prod * dk, crop=g.shape)) for dk in _derivative_symbols(shape, g.h)]


def frac_laplacian(u: Field, r: float) -> Field:
    """``(-Delta)^r u`` on the periodic grid (symbol ``|xi|^(2r)``)."""
    if not 0 < r <= 1:
        raise ValueError(f"fractional order r must lie in (0, 1], got {r}")
    return apply_symbol(u, 2 * r)


def abs_grad_power(u: Field, r: float) -> Field:
    """``|grad|^r u`` (symbol ``|xi|^r``); ``r = 0`` is the identity."""
    if r < 0:
        raise ValueError(f"order must be >= 0, got {r}")
    if r == 0:
        return u.copy()
    return apply_symbol(u, r)


def bilinear_form(v: Field, w: Field, r: float) -> float:
    """``<(-Delta)^r v, w>`` evaluated spectrally on the periodic grid."""
    if not 0 < r < 1:
        raise ValueError(f"bilinear form order r must lie in (0, 1), got {r}")
    g = check_same_grid(v, w)
    return float(g.cell_volume * np.sum(w.values * frac_laplacian(v, r).values))


def spectral_gradient(u: Field) -> list[Field]:
    """Periodic spectral gradient of ``u``."""
    g = u.spec
    p = _fft.plan(g.shape)
    uh = p.forward(u.values)
    return [Field(g, p.inverse(uh * dk)) for dk in _derivative_symbols(g.shape, g.h)]


def fd_laplacian(values: np.ndarray, h: float) -> np.ndarray:
    """Second-order ``2d+1``-point Laplacian on interior cells (one-cell border dropped)."""
    d = values.ndim
    core = tuple(slice(1, -1) for _ in range(d))
    out = -2.0 * d * values[core]
    for ax in range(d):
        for shift in (0, 2):
            sl = [slice(1, -1)] * d
            sl[ax] = slice(shift, values.shape[ax] - 2 + shift)
            out = out + values[tuple(sl)]
    return out / h**2


def is_log_convex(values: np.ndarray, rtol: float = 1e-9) -> bool:
    """Discrete log-convexity of a positive sequence on an equispaced grid."""
    lv = np.log(np.asarray(values, dtype=float))
    second = lv[:-2] - 2 * lv[1:-1] + lv[2:]
    return bool(np.all(second >= -rtol * np.maximum(1.0, np.abs(lv[1:-1]))))
