"""Initial densities and the Barenblatt source solution of the porous medium equation."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .grid import Field, GridSpec, integrate


def _normalise(g: GridSpec, values: np.ndarray, mass: float | None) -> Field:
    f = Field(g, values)
    if mass is None:
        return f
    total = integrate(f)
    if total <= 0:
        if mass == 0:
            return f
        raise ValueError("profile has no mass on this grid; enlarge it or refine the grid")
    return Field(g, values * (mass / total))


def gaussian(g: GridSpec, mass: float = 1.0, sigma: float = 0.5, center=None) -> Field:
    """Gaussian of width ``sigma`` rescaled to have discrete mass ``mass``."""
    if not sigma > 0:
        raise ValueError("sigma must be positive")
    r = g.radius(center)
    return _normalise(g, np.exp(-0.5 * (r / sigma) ** 2), mass)


def ball(g: GridSpec, mass: float = 1.0, radius: float = 0.5, center=None) -> Field:
    """Indicator of a ball, rescaled to discrete mass ``mass``."""
    r = g.radius(center)
    return _normalise(g, (r <= radius).astype(float), mass)


def bump(g: GridSpec, mass: float | None = 1.0, radius: float = 0.9, power: int = 4, center=None) -> Field:
    """Compactly supported ``(1 - |x|^2/R^2)_+^power``."""
    r = g.radius(center)
    return _normalise(g, np.clip(1.0 - (r / radius) ** 2, 0.0, None) ** power, mass)


@dataclass(frozen=True)
class Barenblatt:
    """``U(x,t) = t^-alpha (C - k |x|^2 t^(-2 beta))_+^(1/(m-1))`` solving ``u_t = Lap u^m``."""

    d: int
    m: float
    C: float = 1.0

    def __post_init__(self) -> None:
        if not self.m > 1:
            raise ValueError("Barenblatt profile needs m > 1")
        if not self.C > 0:
            raise ValueError("Barenblatt constant must be positive")

    @property
    def beta(self) -> float:
        return 1.0 / (self.d * (self.m - 1) + 2)

    @property
    def alpha(self) -> float:
        return self.d * self.beta

    @property
    def k(self) -> float:
        return self.beta * (self.m - 1) / (2 * self.m)

    def support_radius(self, t: float) -> float:
        return math.sqrt(self.C / self.k) * t**self.beta

    def values(self, g: GridSpec, t: float) -> np.ndarray:
        r = g.radius()
        base = np.clip(self.C - self.k * r**2 * t ** (-2 * self.beta), 0.0, None)
        return t ** (-self.alpha) * base ** (1.0 / (self.m - 1))

    def field(self, g: GridSpec, t: float) -> Field:
        return Field(g, self.values(g, t))

    def mass(self) -> float:
        """Exact (continuum) mass, independent of ``t``."""
        d, q = self.d, 1.0 / (self.m - 1)
        rho = math.sqrt(self.C / self.k)
        # int_{|y|<1} (1-|y|^2)^q dy = pi^(d/2) Gamma(q+1) / Gamma(q + 1 + d/2)
        unit = math.pi ** (d / 2) * math.gamma(q + 1) / math.gamma(q + 1 + d / 2)
        return self.C**q * rho**d * unit


def make_initial(g: GridSpec, kind: str, params: dict | None = None) -> Field:
    """Build initial data by name: ``zero``, ``gaussian``, ``ball``, ``bump`` or ``barenblatt``."""
    params = dict(params or {})
    if kind == "zero":
        return g.zeros()
    if kind == "gaussian":
        return gaussian(g, **params)
    if kind == "ball":
        return ball(g, **params)
    if kind == "bump":
        return bump(g, **params)
    if kind == "barenblatt":
        t0 = params.pop("t0", 1.0)
        return Barenblatt(g.d, **params).field(g, t0)
    raise ValueError(f"unknown initial data kind {kind!r}")
