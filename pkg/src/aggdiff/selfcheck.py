"""Operator and property battery behind ``aggdiff verify``."""
from __future__ import annotations

import math
import time
from dataclasses import dataclass
from fractions import Fraction
from typing import Callable

import numpy as np

from .diagnostics import gn_check, gn_two_step, gn_two_step_ratios, iteration_exponents, moser_closed_form, moser_sequence
from .drift import RegularizerSpec, build_drift_kernel, verify_div_decay, zeta
from .fracops import (
    KernelSpec,
    Mode,
    abs_grad_power,
    bilinear_form,
    fd_laplacian,
    frac_laplacian,
    grad_riesz_potential,
    riesz_potential,
    spectral_gradient,
)
from .grid import Field, GridSpec, integrate
from .initial import bump, gaussian

FAULTS = ("kernel-scale",)


@dataclass
class Check:
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0


def newtonian_residual(n: int, scale: float = 1.0, L: float = 1.0, radius: float = 0.9, power: int = 4) -> float:
    """``| -Lap_h (K_1 * u) - u |_2 / |u|_2`` over interior cells for a smooth bump in 3-D."""
    g = GridSpec(3, n, L)
    u = bump(g, None, radius, power)
    P = riesz_potential(u, KernelSpec(3, 1.0), scale=scale)
    res = -fd_laplacian(P.values, g.h) - u.values[1:-1, 1:-1, 1:-1]
    return float(np.sqrt(np.sum(res**2) / np.sum(u.values**2)))


def random_smooth_field(g: GridSpec, rng: np.random.Generator, signed: bool = False) -> Field:
    """Sum of one to four Gaussians with random centres, widths and weights."""
    v = np.zeros(g.shape)
    mesh = g.mesh()
    for _ in range(int(rng.integers(1, 5))):
        c = rng.uniform(-0.35 * g.L, 0.35 * g.L, g.d)
        sig = rng.uniform(0.1, 0.25) * g.L
        w = rng.uniform(0.2, 1.0) * (rng.choice([-1.0, 1.0]) if signed else 1.0)
        r2 = sum((x - cc) ** 2 for x, cc in zip(mesh, c))
        v += w * np.exp(-0.5 * r2 / sig**2)
    return Field(g, v)


def _mode(g: GridSpec, k: tuple[int, ...]) -> tuple[Field, float]:
    mesh = g.mesh()
    arg = sum(np.pi / g.L * kk * x for kk, x in zip(k, mesh))
    xi = np.pi / g.L * math.sqrt(sum(kk * kk for kk in k))
    return Field(g, np.sin(arg)), xi


def _checks(fast: bool, fault: str | None) -> list[tuple[str, Callable[[], tuple[bool, str]]]]:
    scale = 1.1 if fault == "kernel-scale" else 1.0
    out = []

    def newton():
        ns = (16, 32) if fast else (32, 64)
        r = [newtonian_residual(n, scale) for n in ns]
        order = math.log2(r[0] / r[1])
        ok = r[ns.index(32)] <= 1e-2 and order >= 1.8
        return ok, f"residual(n=32)={r[ns.index(32)]:.3g}, order {ns[0]}->{ns[1]} = {order:.2f}"

    out.append(("Newtonian inverse -Lap(K_1*u) = u", newton))

    def eigen():
        g = GridSpec(3, 16, math.pi)
        u, xi = _mode(g, (1, 2, 0))
        errs = []
        for s in (0.5, 1.0, 1.4):
            errs.append(np.abs(riesz_potential(u, KernelSpec(3, s, Mode.PERIODIC)).values - xi ** (-2 * s) * u.values).max())
        for r in (0.3, 1.0):
            errs.append(np.abs(frac_laplacian(u, r).values - xi ** (2 * r) * u.values).max())
        errs.append(np.abs(abs_grad_power(u, 0.7).values - xi**0.7 * u.values).max())
        e = float(max(errs))
        return e < 1e-10, f"max symbol error {e:.2e}"

    out.append(("periodic eigenmodes of |xi|^a symbols", eigen))

    def antisym():
        g = GridSpec(3, 16 if fast else 32, 2.0)
        u = gaussian(g, 1.0, 0.4)
        grads = grad_riesz_potential(u, KernelSpec(3, 1.0))
        e = max(float(np.abs(c.values + c.values[::-1, ::-1, ::-1]).max()) for c in grads)
        return e < 1e-10, f"max |f(x)+f(-x)| = {e:.2e}"

    out.append(("grad K_s*u odd for radial u", antisym))

    def plancherel():
        g = GridSpec(2, 16, math.pi)
        rng = np.random.default_rng(5)
        v = random_smooth_field(g, rng, signed=True)
        w = random_smooth_field(g, rng, signed=True)
        v = v - integrate(v) / (2 * g.L) ** 2
        w = w - integrate(w) / (2 * g.L) ** 2
        r = 0.6
        vals = []
        for r1 in (0.1, 0.3, 0.5):
            a = abs_grad_power(v, r - r1)
            b = abs_grad_power(w, r1)
            vals.append(g.cell_volume * float(np.sum(a.values * b.values)))
        ref = bilinear_form(v, w, r / 2)
        spread = (max(vals) - min(vals)) / abs(ref)
        sym = abs(bilinear_form(v, w, 0.4) - bilinear_form(w, v, 0.4)) / abs(bilinear_form(v, w, 0.4))
        e = max(spread, abs(vals[0] - ref) / abs(ref), sym)
        return e < 1e-10, f"relative spread {e:.2e}"

    out.append(("Plancherel split of the bilinear form", plancherel))

    def parseval():
        g = GridSpec(3, 16, math.pi)
        # band-limited: the Nyquist plane has no spectral derivative
        u = sum((c * _mode(g, k)[0] for c, k in ((1.0, (1, 0, 2)), (0.5, (3, 1, 1)), (-0.7, (0, 5, 2)))), g.zeros())
        lhs = float(np.sum(abs_grad_power(u, 1.0).values ** 2))
        rhs = float(sum(np.sum(c.values**2) for c in spectral_gradient(u)))
        e = abs(lhs - rhs) / rhs
        return e < 1e-10, f"relative gap {e:.2e}"

    out.append(("| |grad| u |_2 = |grad u|_2", parseval))

    def kernel_table():
        g = GridSpec(3, 32, 1.6)
        spec = RegularizerSpec(0.2, 1.0, 3)
        k = build_drift_kernel(spec, g)
        net = max(abs(float(c.sum())) for c in k.components) / max(float(np.abs(c).sum()) for c in k.components)
        z = zeta(np.array([0.0, 0.1, 0.4, 3.0, 10.0, 12.0]), spec)
        ok = net < 1e-13 and z[0] == 0 and z[1] == 0 and z[2] == 1 and z[3] == 1 and z[4] == 0 and z[5] == 0
        return ok, f"net table sum {net:.1e}, zeta {np.round(z, 3).tolist()}"

    out.append(("drift kernel: zeta cutoffs, zero net sum", kernel_table))

    def div_decay():
        if fast:
            g, eps = GridSpec(3, 32, 1.6), (0.2, 0.3, 0.4)
        else:
            g, eps = GridSpec(3, 64, 0.8), (0.05, 0.1, 0.2)
        parts, ok = [], True
        for s in (0.75, 1.0, 1.5):
            rep = verify_div_decay(RegularizerSpec(eps[0], s, 3), g, eps)
            ok &= rep.passed
            vals = list(rep.overall.values())
            parts.append(f"s={s}: x{max(vals) / min(vals):.2f}")
        return ok, f"eps={list(eps)}; fitted-C spread " + ", ".join(parts)

    out.append(("divergence decay |div V| <= C|x|^(2s-d-2)", div_decay))

    def gn_sweep():
        g = GridSpec(3, 16 if fast else 32, 4.0)
        rng = np.random.default_rng(11)
        count = 20 if fast else 200
        ts = gn_two_step(3, 0.5, 2.0, 2.0, 0.8)
        worst, gap = 0.0, 0.0
        for _ in range(count):
            u = random_smooth_field(g, rng)
            R1, R2, R = gn_two_step_ratios(u, ts)
            worst = max(worst, R, gn_check(u, 0.5, 2.0, 2.0, 1.5, 2.0 / 3.0))
            gap = max(gap, abs(R - R1 * R2 ** (1 - ts.alpha1)) / R)
        ok = worst < 10 and gap < 1e-10
        return ok, f"{count} fields: max ratio {worst:.3f}, composition gap {gap:.1e}"

    out.append(("Gagliardo-Nirenberg ratio sweep", gn_sweep))

    def exponents():
        rng = np.random.default_rng(3)
        bad = 0
        for _ in range(50):
            d = 3
            s = Fraction(int(rng.integers(1, 150)), 100)
            m_c = 2 - 2 * s / d
            m = m_c + Fraction(int(rng.integers(-300, 301)), 1000)
            if not 1 < m < 2:
                continue
            th = iteration_exponents(d, m, 3 - m, s).theta
            bad += (th < 2) != (m > m_c)
        seq_ok = all(Fraction(v) == moser_closed_form(Fraction(3, 2), k)
                     for k, v in enumerate(moser_sequence(Fraction(3, 2), 20, exact=True)))
        return bad == 0 and seq_ok, f"theta/critical-line mismatches {bad}, sequence closed form {'ok' if seq_ok else 'broken'}"

    out.append(("exponent algebra (exact rationals)", exponents))

    def mass():
        from .solver import Fixed, SolverConfig, run

        g = GridSpec(3, 32, 4.0)
        u0 = gaussian(g, 1.0, 0.5)
        cfg = SolverConfig(m=2.0, t_end=0.02, dt_policy=Fixed(1e-3), snapshot_every=5)
        _, ser = run(u0, cfg, RegularizerSpec(2 * g.h, 1.0, 3))
        mm = ser["mass"]
        e = float(np.abs(mm - mm[0]).max() / mm[0])
        return e <= 1e-11, f"relative mass drift {e:.1e} over {int(ser['step'][-1])} steps"

    out.append(("solver mass conservation", mass))
    return out


def run_battery(fast: bool = False, fault: str | None = None) -> list[Check]:
    if fault is not None and fault not in FAULTS:
        raise ValueError(f"unknown fault {fault!r}; known: {FAULTS}")
    results = []
    for name, fn in _checks(fast, fault):
        t0 = time.perf_counter()
        try:
            ok, detail = fn()
        except Exception as exc:  # a crash is a failed check, reported in the table
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        results.append(Check(name, bool(ok), detail, time.perf_counter() - t0))
    return results


def format_table(results: list[Check]) -> str:
    width = max(len(c.name) for c in results)
    lines = [f"{'check':<{width}}  result  time    detail"]
    for c in results:
        lines.append(f"{c.name:<{width}}  {'PASS' if c.passed else 'FAIL':<6}  {c.seconds:5.2f}s  {c.detail}")
    n_fail = sum(not c.passed for c in results)
    lines.append(f"{len(results) - n_fail}/{len(results)} checks passed")
    return "\n".join(lines)
