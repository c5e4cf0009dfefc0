"""Finite-volume integration of ``u_t = eps Lap u + Lap u^m - div(u V_{s,eps} * u)``.

One step is a Lie splitting on the cube ``[-L, L)^d`` with zero-flux walls:

1. explicit advection with upwind, minmod-limited fluxes driven by the face
   average of ``V * u`` evaluated at the start of the step;
2. backward-Euler diffusion ``u - dt div(D grad u) = u*`` with face mobility
   ``D = (a^m - b^m)/(a - b) + eps`` lagged at the previous Picard iterate.

The diffusion update is written back in flux form from the converged
iterate, so mass moves only between neighbouring cells and is conserved to
rounding. Undershoots below zero are clipped and the clipped mass logged.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence, Union

import numpy as np

from . import _kernels as K
from .drift import DriftOperator, RegularizerSpec, drift_operator
from .grid import Field, GridSpec, integrate, lp_norm
from .series import DiagnosticsSeries, lp_column

log = logging.getLogger(__name__)


class SolverError(RuntimeError):
    """Base class; carries the step index and time at which the run stopped."""

    def __init__(self, message: str, step: int | None = None, t: float | None = None):
        self.step = step
        self.t = t
        where = "" if step is None else f" (step {step}, t={t:.6g})"
        super().__init__(message + where)


class CFLError(SolverError):
    pass


class NonFiniteError(SolverError):
    pass


class MassDriftError(SolverError):
    pass


class BoundaryMassError(SolverError):
    pass


class BlowUpHalt(SolverError):
    """Raised when ``max u`` passes the configured halt level; keeps the partial run."""

    def __init__(self, message, step=None, t=None, series=None, state=None):
        super().__init__(message, step, t)
        self.series = series
        self.state = state


@dataclass(frozen=True)
class Fixed:
    dt: float

    def __post_init__(self) -> None:
        if not self.dt > 0:
            raise ValueError(f"time step must be positive, got {self.dt}")


@dataclass(frozen=True)
class Adaptive:
    cfl_diff: float = 0.5
    cfl_adv: float = 0.5
    dt_max: float = math.inf

    def __post_init__(self) -> None:
        for name in ("cfl_diff", "cfl_adv"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ValueError(f"{name} must lie in (0, 1], got {v}")


DtPolicy = Union[Fixed, Adaptive]


@dataclass(frozen=True)
class SolverConfig:
    """Time-stepping parameters.

    ``epsilon=None`` ties the parabolic regularisation to the kernel cutoff of
    the drift (the coupled approximate problem); a number decouples them.
    """

    m: float
    t_end: float
    dt_policy: DtPolicy = field(default_factory=Adaptive)
    epsilon: float | None = None
    snapshot_every: int = 10
    drift_enabled: bool = True
    t_start: float = 0.0
    picard_sweeps: int = 2
    cg_tol: float = 1e-12
    cg_maxiter: int = 2000
    p_list: Sequence[float] = (2.0,)
    energy_n: Sequence[float] = ()
    boundary_band: int = 2
    boundary_tol: float | None = 1e-8
    mass_tol: float = 1e-9
    halt_linf: float | None = None
    max_steps: int = 10_000_000
    faces: str = "potential"

    def __post_init__(self) -> None:
        if not self.m > 1:
            raise ValueError(f"diffusion exponent must satisfy m > 1, got {self.m}")
        if self.epsilon is not None and self.epsilon < 0:
            raise ValueError(f"parabolic epsilon must be >= 0, got {self.epsilon}")
        if not self.t_end > self.t_start:
            raise ValueError(f"t_end={self.t_end} must exceed t_start={self.t_start}")
        if self.snapshot_every < 1:
            raise ValueError("snapshot_every must be >= 1")
        if self.picard_sweeps < 1:
            raise ValueError("at least one Picard sweep is needed")
        if not isinstance(self.dt_policy, (Fixed, Adaptive)):
            raise TypeError(f"unknown dt policy {self.dt_policy!r}")
        if self.faces not in ("potential", "average"):
            raise ValueError(f"faces must be 'potential' or 'average', got {self.faces!r}")


@dataclass
class RunState:
    u: Field
    t: float
    step: int
    diag: DiagnosticsSeries | None = None
    info: dict = field(default_factory=dict)


class Stepper:
    """Binds a configuration, a grid and an optional drift operator."""

    def __init__(self, g: GridSpec, cfg: SolverConfig, drift: DriftOperator | None):
        if drift is not None and drift.grid != g:
            raise ValueError(f"drift grid {drift.grid} does not match {g}")
        self.g = g
        self.cfg = cfg
        self.drift = drift if cfg.drift_enabled else None
        if cfg.epsilon is not None:
            self.eps = float(cfg.epsilon)
        elif self.drift is not None:
            self.eps = float(self.drift.spec.epsilon)
        else:
            self.eps = 0.0
        self.clipped_total = 0.0

    # -- pieces --------------------------------------------------------------

    def face_velocity(self, u: np.ndarray) -> list[np.ndarray]:
        """Normal drift velocity on the interior faces of each axis (3-D views).

        ``potential``: difference quotient of ``Phi_eps * u`` across the face,
        one forward and one inverse transform. ``average``: mean of the two
        adjacent cell values of ``V_{s,eps} * u``.
        """
        nx, ny, nz = u.shape
        shapes = [(max(nx - 1, 0), ny, nz), (nx, max(ny - 1, 0), nz), (nx, ny, max(nz - 1, 0))]
        if self.drift is None:
            return [np.zeros(s) for s in shapes]
        if self.cfg.faces == "potential":
            P = K.as3d(self.drift.potential_array(u.reshape(self.g.shape)))
            return [np.diff(P, axis=ax) / self.g.h for ax in range(3)]
        cells = [K.as3d(c) for c in self.drift.velocity_array(u.reshape(self.g.shape))]
        out = []
        for ax in range(3):
            if ax < self.g.d:
                c = cells[ax]
                lo = [slice(None)] * 3
                hi = [slice(None)] * 3
                lo[ax] = slice(0, -1)
                hi[ax] = slice(1, None)
                out.append(0.5 * (c[tuple(lo)] + c[tuple(hi)]))
            else:
                out.append(np.zeros(shapes[ax]))
        return out

    @staticmethod
    def speed_sum(vel: list[np.ndarray]) -> float:
        return sum(float(np.abs(v).max()) for v in vel if v.size)

    def choose_dt(self, u: np.ndarray, vel: list[np.ndarray], t: float) -> float:
        g, cfg = self.g, self.cfg
        remaining = cfg.t_end - t
        vsum = self.speed_sum(vel)
        pol = cfg.dt_policy
        if isinstance(pol, Fixed):
            dt = pol.dt
        else:
            top = float(u.max())
            diff = self.eps + cfg.m * top ** (cfg.m - 1)
            dt = pol.dt_max
            if diff > 0:
                dt = min(dt, pol.cfl_diff * g.h**2 / (2 * g.d * diff))
            if vsum > 0:
                # the 1/2 keeps the limited upwind update positivity preserving
                dt = min(dt, 0.5 * pol.cfl_adv * g.h / vsum)
            if not math.isfinite(dt):
                dt = remaining
        # land exactly on t_end without a sliver step
        if dt >= remaining * (1 - 1e-12):
            dt = remaining
        return dt

    def advance(self, u: np.ndarray, t: float, step: int, dt: float | None = None):
        """One split step on the 3-D view ``u``; returns ``(u_new, dt, info)``."""
        g, cfg = self.g, self.cfg
        vel = self.face_velocity(u)
        if dt is None:
            dt = self.choose_dt(u, vel, t)
        vsum = self.speed_sum(vel)
        courant = dt * vsum / g.h
        if courant > 0.5 * (1 + 1e-12):
            raise CFLError(
                f"advective Courant number {courant:.4g} exceeds 1/2 (dt={dt:.4g}, sum max|V|={vsum:.4g})",
                step, t,
            )
        info: dict = {"dt": dt, "courant": courant}

        if self.drift is not None:
            F = K.muscl_fluxes(u, vel[0], vel[1], vel[2])
            ustar = K.flux_update(u, F[0], F[1], F[2], dt / g.h)
        else:
            F = None
            ustar = u
        info["fluxes"] = F
        info["velocity"] = vel

        coef = dt / g.h**2
        x = ustar
        iters = []
        prev = ustar
        D = None
        for _ in range(cfg.picard_sweeps):
            D = K.face_mobility(np.maximum(x, 0.0), cfg.m, self.eps)
            prev = x
            x, it, res = _coupled_solve(ustar, x, D, coef, cfg.cg_tol, cfg.cg_maxiter)
            iters.append(it)
            if res > 1e3 * cfg.cg_tol:
                log.warning("CG stopped at relative residual %.3g after %d iterations", res, it)
        scale = max(float(np.abs(x).max()), 1e-300)
        info["picard_change"] = float(np.abs(x - prev).max()) / scale
        info["cg_iterations"] = iters
        # flux-form write-back: only face fluxes change cell values
        Ax = np.empty_like(x)
        K.apply_graph_laplacian(x, D[0], D[1], D[2], Ax)
        unew = ustar - coef * Ax

        neg = unew < 0
        clipped = float(-unew[neg].sum() * g.cell_volume) if neg.any() else 0.0
        if clipped:
            unew[neg] = 0.0
            self.clipped_total += clipped
        info["clipped_mass"] = clipped
        if not np.isfinite(unew).all():
            raise NonFiniteError("non-finite values after step", step, t)
        return unew, dt, info


def _active_box(D) -> tuple[slice, ...] | None:
    """Smallest cell box containing every face with nonzero mobility."""
    Dx, Dy, Dz = D
    shape = (Dx.shape[0] + 1, Dy.shape[1] + 1, Dz.shape[2] + 1)
    act = np.zeros(shape, dtype=bool)
    for ax, Da in enumerate(D):
        on = Da != 0
        lo = [slice(None)] * 3
        hi = [slice(None)] * 3
        lo[ax] = slice(0, shape[ax] - 1)
        hi[ax] = slice(1, shape[ax])
        act[tuple(lo)] |= on
        act[tuple(hi)] |= on
    if not act.any():
        return None
    box = []
    for ax in range(3):
        idx = np.flatnonzero(act.any(axis=tuple(a for a in range(3) if a != ax)))
        box.append(slice(int(idx[0]), int(idx[-1]) + 1))
    return tuple(box)


def _coupled_solve(b, x0, D, coef, tol, maxiter):
    """Solve ``(I + coef A) x = b`` only where faces couple cells.

    With degenerate mobility the faces outside the support vanish and those
    cells decouple (``x = b`` there), so the CG runs on the bounding box of
    the active faces.
    """
    box = _active_box(D)
    x = b.copy()
    if box is None:
        return x, 0, 0.0
    full = all(sl.start == 0 and sl.stop == n for sl, n in zip(box, b.shape))
    if full:
        return K.pcg_solve(b, x0, D[0], D[1], D[2], coef, tol, maxiter)
    sx, sy, sz = box
    Dx = D[0][sx.start:sx.stop - 1, sy, sz]
    Dy = D[1][sx, sy.start:sy.stop - 1, sz]
    Dz = D[2][sx, sy, sz.start:sz.stop - 1]
    sub, it, res = K.pcg_solve(
        np.ascontiguousarray(b[box]), np.ascontiguousarray(x0[box]),
        np.ascontiguousarray(Dx), np.ascontiguousarray(Dy), np.ascontiguousarray(Dz), coef, tol, maxiter,
    )
    x[box] = sub
    return x, it, res


def boundary_mass(u: np.ndarray, g: GridSpec, band: int) -> float:
    """Mass held in the outer ``band`` cell layers of the box."""
    v = u.reshape(g.shape)
    core = tuple(slice(band, g.n - band) for _ in range(g.d))
    return float((v.sum() - v[core].sum()) * g.cell_volume)


def _energy_columns(energy_n) -> list[str]:
    cols = []
    for n in energy_n:
        tag = f"{float(n):g}"
        cols += [f"int_u{tag}", f"dissip_{tag}", f"drift_{tag}", f"dissip_int_{tag}", f"drift_int_{tag}"]
    return cols


_POW_FLOOR = 1e-150


def _pow(u: np.ndarray, a: float) -> np.ndarray:
    """``u**a`` for ``u >= 0``, with cells below ``_POW_FLOOR`` set to ``0**a``.

    Implicit diffusion leaves subnormal tails, on which ``pow`` is very slow.
    """
    if a == 0:
        return np.ones_like(u)
    out = np.zeros_like(u)
    mask = u > _POW_FLOOR
    np.power(u, a, out=out, where=mask)
    return out


def dissipation(u: np.ndarray, g: GridSpec, m: float, eps: float, n: float) -> float:
    """Discrete ``n int grad(u^m + eps u) . grad u^(n-1)``, consistent with the diffusion faces.

    In the continuum this equals ``C_m |grad u^((n+m-1)/2)|_2^2`` plus the
    ``eps`` contribution, with ``C_m = 4 m n (n-1)/(n+m-1)^2``.
    """
    u3 = K.as3d(u)
    w = _pow(u3, n - 1)
    return n * g.h ** (g.d - 2) * K.face_pair_sum(_pow(u3, m) + eps * u3, w)


def drift_work(u: np.ndarray, F, g: GridSpec, n: float) -> float:
    """Discrete ``n int (u V*u) . grad u^(n-1)`` from the scheme's own face fluxes."""
    if F is None:
        return 0.0
    w = _pow(K.as3d(u), n - 1)
    return n * g.h ** (g.d - 1) * K.flux_work(F[0], F[1], F[2], w)


def run(
    u0: Field,
    cfg: SolverConfig,
    kspec: RegularizerSpec | None,
    callback: Callable[[int, float, Field], None] | None = None,
    drift: DriftOperator | None = None,
) -> tuple[Field, DiagnosticsSeries]:
    """Integrate from ``cfg.t_start`` to ``cfg.t_end``.

    Diagnostics are recorded at the start, every ``snapshot_every`` steps and
    at the end; ``callback(step, t, u)`` fires at the same times.
    """
    g = u0.spec
    if np.any(u0.values < 0):
        raise ValueError("initial data must be non-negative")
    if cfg.drift_enabled and drift is None:
        if kspec is None:
            raise ValueError("drift is enabled but no regulariser spec was given")
        drift = drift_operator(kspec, g)
    stepper = Stepper(g, cfg, drift if cfg.drift_enabled else None)
    extra = _energy_columns(cfg.energy_n) + ["grad_l2sq_int", "vel_l2sq_int", "clipped_mass", "dt"]
    series = DiagnosticsSeries(cfg.p_list, extra)

    u = K.as3d(u0.values.copy())
    mass0 = integrate(u0)
    t, step = cfg.t_start, 0
    acc = {c: 0.0 for c in extra}
    last_dt = 0.0

    def record(vel_F=None) -> None:
        f = Field(g, u.reshape(g.shape))
        row = {
            "t": t,
            "step": step,
            "mass": integrate(f),
            "linf": float(u.max()),
            "boundary_mass": boundary_mass(u, g, cfg.boundary_band),
            "dt": last_dt,
        }
        for p in series.p_list:
            row[lp_column(p)] = lp_norm(f, p)
        if cfg.energy_n:
            F = vel_F
            if F is None and stepper.drift is not None:
                vel = stepper.face_velocity(u)
                F = K.muscl_fluxes(u, vel[0], vel[1], vel[2])
            for n in cfg.energy_n:
                tag = f"{float(n):g}"
                row[f"int_u{tag}"] = g.cell_volume * float(np.sum(_pow(u, n)))
                row[f"dissip_{tag}"] = dissipation(u, g, cfg.m, stepper.eps, n)
                row[f"drift_{tag}"] = drift_work(u, F, g, n)
        for c in ("grad_l2sq_int", "vel_l2sq_int", "clipped_mass") + tuple(
            c for c in extra if c.startswith(("dissip_int_", "drift_int_"))
        ):
            row[c] = acc[c]
        series.append(**row)
        if callback is not None:
            callback(step, t, f)

    record()
    while t < cfg.t_end * (1 - 1e-14) and step < cfg.max_steps:
        u_old = u
        try:
            u, dt, info = stepper.advance(u, t, step)
        except SolverError:
            raise
        last_dt = dt
        vel, F = info["velocity"], info["fluxes"]
        acc["clipped_mass"] += info["clipped_mass"]
        acc["grad_l2sq_int"] += dt * g.h ** (g.d - 2) * K.face_pair_sum(u, u)
        if stepper.drift is not None:
            acc["vel_l2sq_int"] += dt * g.cell_volume * float(sum(np.sum(v * v) for v in vel))
        for n in cfg.energy_n:
            tag = f"{float(n):g}"
            acc[f"dissip_int_{tag}"] += dt * dissipation(u, g, cfg.m, stepper.eps, n)
            acc[f"drift_int_{tag}"] += dt * drift_work(u_old, F, g, n)
        t = cfg.t_end if abs(cfg.t_end - (t + dt)) <= 1e-12 * max(1.0, abs(cfg.t_end)) else t + dt
        step += 1

        mass = g.cell_volume * float(np.sum(u))
        if abs(mass - mass0) > cfg.mass_tol * max(mass0, 1e-300) and mass0 > 0:
            raise MassDriftError(f"mass drifted from {mass0:.17g} to {mass:.17g}", step, t)
        if cfg.boundary_tol is not None and mass0 > 0:
            bm = boundary_mass(u, g, cfg.boundary_band)
            if bm > cfg.boundary_tol * mass0:
                raise BoundaryMassError(
                    f"boundary mass {bm:.3g} exceeds {cfg.boundary_tol:g} of the total; enlarge L", step, t
                )
        if cfg.halt_linf is not None and u.max() > cfg.halt_linf:
            record()
            raise BlowUpHalt(
                f"max u = {u.max():.4g} passed the halt level {cfg.halt_linf:g}",
                step, t, series, RunState(Field(g, u.reshape(g.shape)), t, step, series),
            )
        if step % cfg.snapshot_every == 0 or t >= cfg.t_end:
            record()
    if stepper.clipped_total:
        log.info("clipped %.3g mass in total (%.3g of the initial mass)",
                 stepper.clipped_total, stepper.clipped_total / max(mass0, 1e-300))
    return Field(g, u.reshape(g.shape)), series


def step(state: RunState, cfg: SolverConfig, drift: DriftOperator | None, dt: float | None = None) -> RunState:
    """Advance ``state`` by one step (``dt`` overrides the policy's choice)."""
    g = state.u.spec
    if dt is None and isinstance(cfg.dt_policy, Fixed):
        dt = min(cfg.dt_policy.dt, cfg.t_end - state.t) if state.t < cfg.t_end else cfg.dt_policy.dt
    stepper = Stepper(g, cfg, drift if cfg.drift_enabled else None)
    u, dt, info = stepper.advance(K.as3d(state.u.values.copy()), state.t, state.step, dt)
    info.pop("fluxes", None)
    info.pop("velocity", None)
    return RunState(Field(g, u.reshape(g.shape)), state.t + dt, state.step + 1, state.diag, info)


# --- epsilon limit ------------------------------------------------------------


@dataclass
class EpsilonStudy:
    eps_list: list[float]
    distances: list[float]
    order: float | None
    monotone: bool
    finals: list[Field]


def _spacetime_l1(a: list[np.ndarray], b: list[np.ndarray], dts: np.ndarray, vol: float) -> float:
    return float(sum(w * vol * np.abs(x - y).sum() for x, y, w in zip(a, b, dts)))


def epsilon_limit_study(
    u0: Field, cfg: SolverConfig, kspec: RegularizerSpec, eps_list: Sequence[float]
) -> EpsilonStudy:
    """Solve with each cutoff (parabolic and kernel cutoffs tied) and compare successive runs.

    Distances are L^1 in space-time, using the samples taken every
    ``snapshot_every`` steps; the time step policy must be ``Fixed`` so the
    samples line up.
    """
    eps_list = [float(e) for e in eps_list]
    if any(b >= a for a, b in zip(eps_list, eps_list[1:])):
        raise ValueError("eps_list must be strictly decreasing")
    if not isinstance(cfg.dt_policy, Fixed):
        raise ValueError("the epsilon study needs a Fixed time step so that samples align")
    g = u0.spec
    histories, finals = [], []
    for e in eps_list:
        frames: list[np.ndarray] = []
        times: list[float] = []

        def keep(step, t, f, frames=frames, times=times):
            frames.append(f.values.copy())
            times.append(t)

        c = replace(cfg, epsilon=None)
        final, _ = run(u0, c, replace(kspec, epsilon=e), callback=keep)
        histories.append(frames)
        finals.append(final)
    tt = np.array(times)
    w = np.gradient(tt) if tt.size > 1 else np.ones(1)
    dists = [_spacetime_l1(a, b, w, g.cell_volume) for a, b in zip(histories, histories[1:])]
    order = None
    if len(dists) >= 2 and all(d > 0 for d in dists):
        ratios = [eps_list[i] / eps_list[i + 1] for i in range(len(eps_list) - 1)]
        orders = [math.log(dists[i] / dists[i + 1]) / math.log(ratios[i + 1]) for i in range(len(dists) - 1)]
        order = float(np.mean(orders))
    monotone = all(b <= a for a, b in zip(dists, dists[1:]))
    return EpsilonStudy(eps_list, dists, order, monotone, finals)
