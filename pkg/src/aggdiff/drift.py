"""Regularised interaction field ``V = zeta_eps(|x|) grad K_s`` and its convolution.

``zeta_eps`` removes the kernel singularity below ``eps`` and the tail beyond
``2/eps`` with quintic smoothstep ramps on ``[eps, 2 eps]`` and
``[1/eps, 2/eps]``. The ramps are C^2 and have slope at most ``15/8`` in the
rescaled variable.
"""
from __future__ import annotations

import csv
import functools
import io
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import _fft
from . import _kernels
from .fracops import gradient_constant, padded_offsets, riesz_constant
from .grid import Field, GridSpec

SMOOTHSTEP_SLOPE = 15.0 / 8.0


@dataclass(frozen=True)
class RegularizerSpec:
    """Cutoff scale and kernel order of the regularised field.

    ``s = d/2`` is accepted as the limiting logarithmic kernel: ``c_norm`` is
    then the prefactor ``a`` of ``-a log|z|``, whose gradient is the limit of
    the Riesz gradients as ``s -> d/2``.
    """

    epsilon: float
    s: float
    d: int
    c_norm: float | None = None

    def __post_init__(self) -> None:
        if not 0 < self.s <= self.d / 2:
            raise ValueError(f"kernel order s must lie in (0, d/2], got {self.s}")
        if not 0 < self.epsilon < 1 / math.sqrt(2):
            raise ValueError(f"epsilon must lie in (0, 1/sqrt(2)) so that 2*eps < 1/eps, got {self.epsilon}")
        if self.c_norm is None:
            c = -gradient_constant(self.d, self.s) if self.logarithmic else riesz_constant(self.d, self.s)
            object.__setattr__(self, "c_norm", c)

    @property
    def logarithmic(self) -> bool:
        return self.s == self.d / 2

    @property
    def grad_coeff(self) -> float:
        """``c (-d + 2s)``, the coefficient of ``|x|^(-d-2+2s) x`` in ``grad K``."""
        if self.logarithmic:
            return -self.c_norm
        return self.c_norm * (-self.d + 2 * self.s)


def _smoothstep(t):
    t = np.clip(t, 0.0, 1.0)
    return t**3 * (10.0 - 15.0 * t + 6.0 * t**2)


def _smoothstep_prime(t):
    t = np.asarray(t, dtype=float)
    inside = (t > 0) & (t < 1)
    return np.where(inside, 30.0 * t**2 * (1.0 - t) ** 2, 0.0)


def zeta(rho, spec: RegularizerSpec):
    """Radial cutoff: 0 on ``[0, eps]``, 1 on ``[2 eps, 1/eps]``, 0 beyond ``2/eps``."""
    rho = np.asarray(rho, dtype=float)
    if np.any(rho < 0):
        raise ValueError("radius must be non-negative")
    e = spec.epsilon
    inner = _smoothstep((rho - e) / e)
    outer = 1.0 - _smoothstep(rho * e - 1.0)
    out = np.where(rho <= 1.0 / e, inner, outer)
    return float(out) if out.ndim == 0 else out


def zeta_prime(rho, spec: RegularizerSpec):
    rho = np.asarray(rho, dtype=float)
    e = spec.epsilon
    inner = _smoothstep_prime((rho - e) / e) / e
    outer = -_smoothstep_prime(rho * e - 1.0) * e
    out = np.where(rho <= 1.0 / e, inner, outer)
    return float(out) if out.ndim == 0 else out


def grad_kernel_profile(rho, spec: RegularizerSpec):
    """``g(rho)`` with ``grad K_s(x) = g(|x|) x``, i.e. ``c(-d+2s)|x|^(-d-2+2s)``."""
    return spec.grad_coeff * np.asarray(rho, dtype=float) ** (-spec.d - 2 + 2 * spec.s)


@dataclass
class DriftKernel:
    """Tabulated ``V`` on the wrapped padded offset grid (components times ``h^d``)."""

    spec: RegularizerSpec
    grid: GridSpec
    pad: int
    components: list[np.ndarray]
    clamped: bool
    notes: list[str] = field(default_factory=list)


def build_drift_kernel(spec: RegularizerSpec, g: GridSpec, pad: int = 2) -> DriftKernel:
    """Tabulate ``V_{s,eps}(z) = zeta(|z|) grad K_s(z)`` on the padded offsets."""
    if spec.d != g.d:
        raise ValueError(f"kernel dimension {spec.d} does not match grid dimension {g.d}")
    if spec.epsilon < 2 * g.h * (1 - 1e-12):
        raise ValueError(f"cutoff eps={spec.epsilon} is under-resolved: needs eps >= 2h = {2 * g.h}")
    offs = padded_offsets(g, pad)
    r = np.sqrt(functools.reduce(np.add, [o**2 for o in offs]))
    z = zeta(r, spec)
    with np.errstate(divide="ignore", invalid="ignore"):
        prof = np.where(z > 0, z * grad_kernel_profile(np.where(r > 0, r, 1.0), spec), 0.0)
    N = pad * g.n
    comps = []
    for o in offs:
        c = prof * o * g.cell_volume
        # offset -N/2 has no mirror partner; it never couples two cells of the box
        for ax in range(g.d):
            sl = [slice(None)] * g.d
            sl[ax] = N // 2
            c[tuple(sl)] = 0.0
        comps.append(c)
    clamped = 2.0 / spec.epsilon > N // 2 * g.h
    notes = []
    if clamped:
        notes.append(
            f"outer cutoff 2/eps={2 / spec.epsilon:.4g} exceeds the table half-width {N // 2 * g.h:.4g}; "
            "kernel truncated at the padded domain"
        )
    return DriftKernel(spec, g, pad, comps, clamped, notes)


def _power_integral(x, y, a):
    """``int_x^y t^a dt`` for ``0 < x <= y``."""
    if a == -1:
        return np.log(y / x)
    return (y ** (a + 1) - x ** (a + 1)) / (a + 1)


def _gauss_integral(f, x, y, nodes: int = 16):
    gx, gw = np.polynomial.legendre.leggauss(nodes)
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    half = 0.5 * (y - x)
    mid = 0.5 * (y + x)
    t = mid[..., None] + half[..., None] * gx
    return half * np.sum(gw * f(t), axis=-1)


def potential_profile(rho, spec: RegularizerSpec):
    """Radial potential ``phi`` with ``grad phi(|x|) = V_{s,eps}(x)``, vanishing beyond ``2/eps``.

    ``phi' = zeta(rho) c(-d+2s) rho^(-d-1+2s)``; the plateau is integrated in
    closed form and each ramp by 16-point Gauss-Legendre (the integrand is a
    polynomial times a smooth power there).
    """
    rho = np.atleast_1d(np.asarray(rho, dtype=float))
    e, c = spec.epsilon, spec.grad_coeff
    a = -spec.d - 1 + 2 * spec.s

    def dphi(t):
        return zeta(t, spec) * c * t**a

    r_in0, r_in1, r_out0, r_out1 = e, 2 * e, 1 / e, 2 / e
    outer = float(_gauss_integral(dphi, np.array(r_out0), np.array(r_out1)))
    plateau = c * float(_power_integral(r_in1, r_out0, a))
    F = np.zeros_like(rho)
    m = (rho >= r_out0) & (rho < r_out1)
    F[m] = _gauss_integral(dphi, rho[m], np.full(m.sum(), r_out1))
    m = (rho >= r_in1) & (rho < r_out0)
    F[m] = c * _power_integral(rho[m], r_out0, a) + outer
    m = (rho >= r_in0) & (rho < r_in1)
    F[m] = _gauss_integral(dphi, rho[m], np.full(m.sum(), r_in1)) + plateau + outer
    inner = float(_gauss_integral(dphi, np.array(r_in0), np.array(r_in1))) + plateau + outer
    F[rho < r_in0] = inner
    return -F


class DriftOperator:
    """Applies ``u -> V_{s,eps} * u`` by zero-padded FFT convolution.

    The kernel transform is computed once; ``V`` is real and odd, so only the
    imaginary part of its transform is stored.
    """

    def __init__(self, spec: RegularizerSpec, g: GridSpec, pad: int = 2, strength: float = 1.0):
        self.spec = spec
        self.grid = g
        self.kernel = build_drift_kernel(spec, g, pad)
        self.strength = strength
        self.pad = pad
        self._plan = _fft.plan((pad * g.n,) * g.d)
        self._vhat = [self._plan.forward(c).imag.copy() for c in self.kernel.components]
        self._phihat = None

    def potential_table(self) -> np.ndarray:
        """``Phi_eps`` on the padded offsets (times ``h^d``); ``grad Phi_eps = V_{s,eps}``."""
        offs = padded_offsets(self.grid, self.pad)
        r = np.sqrt(functools.reduce(np.add, [o**2 for o in offs]))
        rr, inv = np.unique(r, return_inverse=True)
        return potential_profile(rr, self.spec)[inv].reshape(r.shape) * self.grid.cell_volume

    def potential_array(self, u: np.ndarray) -> np.ndarray:
        """``Phi_eps * u`` on the grid."""
        if self._phihat is None:
            self._phihat = self._plan.forward(self.potential_table()).real.copy()
        uh = self._plan.forward(u)
        return self.strength * self._plan.inverse_with(
            lambda buf: np.multiply(uh, self._phihat, out=buf), crop=self.grid.shape
        )

    def velocity_array(self, u: np.ndarray) -> list[np.ndarray]:
        uh = self._plan.forward(u)
        out = []
        for vim in self._vhat:
            v = self._plan.inverse_with(lambda buf, vim=vim: _kernels.odd_product(uh, vim, buf), crop=self.grid.shape)
            if self.strength != 1.0:
                v *= self.strength
            out.append(v)
        return out

    def velocity(self, u: Field) -> list[Field]:
        if u.spec != self.grid:
            raise ValueError(f"grid mismatch: {u.spec} vs {self.grid}")
        return [Field(self.grid, v) for v in self.velocity_array(u.values)]


@functools.lru_cache(maxsize=8)
def drift_operator(spec: RegularizerSpec, g: GridSpec) -> DriftOperator:
    return DriftOperator(spec, g)


def drift_velocity(u: Field, spec: RegularizerSpec) -> list[Field]:
    """``V_{s,eps} * u`` on the grid of ``u``."""
    if spec.d != u.spec.d:
        raise ValueError(f"kernel dimension {spec.d} does not match grid dimension {u.spec.d}")
    return drift_operator(spec, u.spec).velocity(u)


# --- divergence decay ---------------------------------------------------------

REGIONS = ("zero", "inner_ramp", "plateau", "outer_ramp")


@dataclass
class DivDecayRow:
    epsilon: float
    region: str
    fitted_C: float
    passed: bool


@dataclass
class DivDecayReport:
    s: float
    d: int
    rows: list[DivDecayRow]
    overall: dict[float, float]
    passed: bool
    notes: list[str]

    def to_csv(self, path: str | Path | None = None) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["epsilon", "region", "fitted_C", "pass"])
        for r in self.rows:
            w.writerow([repr(r.epsilon), r.region, repr(r.fitted_C), str(r.passed).lower()])
        text = buf.getvalue()
        if path is not None:
            Path(path).write_text(text)
        return text


def divergence_table(kernel: DriftKernel) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference divergence of the tabulated ``V`` and the offset radius.

    Both are returned on the centred (fft-shifted) table with the outermost
    layer dropped, so no stencil crosses the wrap-around seam.
    """
    g = kernel.grid
    h = g.h
    vol = g.cell_volume
    comps = [np.fft.fftshift(c) / vol for c in kernel.components]
    offs = [np.fft.fftshift(o, axes=ax) for ax, o in enumerate(padded_offsets(g, kernel.pad))]
    d = g.d
    core = tuple(slice(2, -1) for _ in range(d))
    div = 0.0
    for ax, c in enumerate(comps):
        hi = [slice(2, -1)] * d
        lo = [slice(2, -1)] * d
        hi[ax] = slice(3, None)
        lo[ax] = slice(1, -2)
        div = div + (c[tuple(hi)] - c[tuple(lo)]) / (2 * h)
    r = np.sqrt(functools.reduce(np.add, [o**2 for o in offs]))[core]
    return np.asarray(div), r


def _region_masks(r: np.ndarray, eps: float, h: float) -> dict[str, np.ndarray]:
    # classify by the whole stencil [r - h, r + h] so each cell sees one formula
    return {
        "zero": r + h <= eps,
        "inner_ramp": (r + h > eps) & (r - h < 2 * eps),
        "plateau": (r - h >= 2 * eps) & (r + h <= 1 / eps),
        "outer_ramp": (r + h > 1 / eps) & (r - h < 2 / eps),
    }


def fitted_div_constants(spec: RegularizerSpec, g: GridSpec) -> tuple[dict[str, float], list[str]]:
    """Smallest ``C`` with ``|div V| <= C |x|^(-d-2+2s)`` per region, over ``|x| >= h``."""
    kern = build_drift_kernel(spec, g)
    div, r = divergence_table(kern)
    keep = r >= g.h
    ratio = np.abs(div) * np.where(keep, r, 1.0) ** (g.d + 2 - 2 * spec.s)
    out = {}
    for name, mask in _region_masks(r, spec.epsilon, g.h).items():
        m = mask & keep
        out[name] = float(ratio[m].max()) if m.any() else 0.0
    return out, kern.notes


def verify_div_decay(spec: RegularizerSpec, g: GridSpec, eps_list=(0.05, 0.1, 0.2)) -> DivDecayReport:
    """Fit the divergence-decay constant for each cutoff and compare across cutoffs.

    Passes when the overall fitted ``C`` varies by less than a factor 2 over
    ``eps_list``.
    """
    per_eps: dict[float, dict[str, float]] = {}
    notes: list[str] = []
    for e in eps_list:
        consts, n = fitted_div_constants(replace(spec, epsilon=float(e)), g)
        per_eps[float(e)] = consts
        notes.extend(n)
    overall = {e: max(c.values()) for e, c in per_eps.items()}
    vals = np.array(list(overall.values()))
    passed = bool(vals.min() > 0 and vals.max() / vals.min() < 2.0)
    rows = [
        DivDecayRow(e, region, c[region], passed)
        for e, c in per_eps.items()
        for region in REGIONS
    ]
    rows += [DivDecayRow(e, "all", overall[e], passed) for e in overall]
    return DivDecayReport(spec.s, spec.d, rows, overall, passed, notes)
