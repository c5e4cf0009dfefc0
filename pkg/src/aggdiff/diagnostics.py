"""Audits of the measurable statements about the aggregation-diffusion equation.

Regime classification, the Moser exponent sequence and its iteration
recursion, the parabolic scaling law, Gagliardo-Nirenberg ratios, the
H^-1 distance with its Gronwall fit, oscillation decay over parabolic
cylinders and the L^n energy balance.

Exponent algebra is carried out in :class:`fractions.Fraction`. Floats are
converted exactly (``Fraction(0.1)`` is the binary value of ``0.1``), so
strict inequalities near the critical line are decided without rounding.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field, replace
from fractions import Fraction
from typing import Iterable, Mapping, Sequence

import numpy as np

from .drift import DriftOperator, RegularizerSpec
from .fracops import abs_grad_power, apply_symbol, spectral_gradient
from .grid import Field, GridSpec, check_same_grid, integrate, lp_norm
from .series import DiagnosticsSeries

__all__ = [
    "DiagnosticsSeries",
    "RegimeParams",
    "classify",
    "moser_sequence",
    "moser_closed_form",
    "IterationExponents",
    "iteration_exponents",
    "theta_limit",
    "RecursionReport",
    "iteration_recursion",
    "measure_iteration_constants",
    "ScalingReport",
    "rescale_field",
    "scaling_test",
    "gn_condition",
    "gn_check",
    "TwoStepGN",
    "gn_two_step",
    "gn_two_step_ratios",
    "hminus1_distance",
    "GronwallFit",
    "gronwall_fit",
    "ResolutionError",
    "OscillationReport",
    "oscillation_decay",
    "EnergyAudit",
    "energy_audit",
]

Number = int | float | Fraction


def _rational(x: Number) -> Fraction:
    if isinstance(x, Fraction):
        return x
    if isinstance(x, (int, np.integer)):
        return Fraction(int(x))
    x = float(x)
    if not math.isfinite(x):
        raise ValueError(f"expected a finite number, got {x}")
    return Fraction(x)


# --- regime ------------------------------------------------------------------

CASE_COVERAGE = {
    "S_half_m_lt2": "uniform L^inf bound: 1/2 < s <= 1, m < 2 (Moser iteration along n_k)",
    "S_half_m_ge2": "uniform L^inf bound: 1/2 < s <= 1, m >= 2 (truncation u_j = (u - j)_+)",
    "S_small_m_lt2": "uniform L^inf bound: s <= 1/2, m < 2 (exponents p(n), q(n))",
    "S_large": "uniform L^inf bound: s > 1",
    "Unsupported": "no boundedness result: m >= 2 with s <= 1/2 is open",
}

# floats this close to the critical line are treated as lying on it
_FLOAT_CRITICAL_TOL = Fraction(1, 10**12)


@dataclass(frozen=True)
class RegimeParams:
    """Classification of ``(d, m, s)`` against ``m_c = 2 - 2s/d``."""

    d: int
    m: Fraction
    s: Fraction
    m_c: Fraction
    case_tag: str
    regime: str
    flags: tuple[str, ...] = ()

    @property
    def subcritical(self) -> bool:
        return self.regime == "subcritical"

    @property
    def supported(self) -> bool:
        return self.subcritical and self.case_tag != "Unsupported"

    @property
    def coverage(self) -> str:
        if not self.subcritical:
            return f"none ({self.regime}); the boundedness results need m > m_c"
        return CASE_COVERAGE[self.case_tag]

    @property
    def scaling_exponent(self) -> Fraction:
        """``2d - dm - 2s``; zero exactly at ``m = m_c``."""
        return 2 * self.d - self.d * self.m - 2 * self.s

    def to_dict(self) -> dict:
        return {
            "d": self.d,
            "m": float(self.m),
            "s": float(self.s),
            "m_c": float(self.m_c),
            "m_c_exact": str(self.m_c),
            "regime": self.regime,
            "case_tag": self.case_tag,
            "coverage": self.coverage,
            "flags": list(self.flags),
        }


def _case_tag(m: Fraction, s: Fraction) -> str:
    if s > 1:
        return "S_large"
    if s > Fraction(1, 2):
        return "S_half_m_lt2" if m < 2 else "S_half_m_ge2"
    return "S_small_m_lt2" if m < 2 else "Unsupported"


def classify(d: int, m: Number, s: Number) -> RegimeParams:
    """Regime of ``(d, m, s)``: subcritical iff ``m > 2 - 2s/d``.

    ``s = d/2`` (the logarithmic endpoint) is accepted. Float inputs within
    ``1e-12`` of the critical line are reported as critical, so that e.g.
    ``m = 4/3`` typed as a float is not misfiled by its last bit.
    """
    if d not in (1, 2, 3):
        raise ValueError(f"dimension must be 1, 2 or 3, got {d}")
    mq, sq = _rational(m), _rational(s)
    if not mq > 1:
        raise ValueError(f"diffusion exponent must satisfy m > 1, got {m}")
    if not 0 < sq <= Fraction(d, 2):
        raise ValueError(f"kernel order must lie in (0, d/2] = (0, {d / 2}], got {s}")
    m_c = 2 - 2 * sq / d
    gap = mq - m_c
    exact = isinstance(m, (int, Fraction)) and isinstance(s, (int, Fraction))
    if gap == 0 or (not exact and abs(gap) <= _FLOAT_CRITICAL_TOL):
        regime = "critical"
    else:
        regime = "subcritical" if gap > 0 else "supercritical"
    tag = _case_tag(mq, sq)
    flags = []
    if regime == "supercritical":
        flags.append("finite time blow-up possible")
    elif regime == "critical":
        flags.append("critical mass threshold: finite time blow-up possible for large mass")
    if tag == "Unsupported":
        flags.append("boundedness unknown for m>=2, s<=1/2")
    if sq < 1:
        flags.append("uniqueness open for s<1")
    if sq <= Fraction(1, 2):
        flags.append("Holder regularity open for s<=1/2")
    if sq == Fraction(d, 2):
        flags.append("logarithmic kernel endpoint s=d/2")
    return RegimeParams(d, mq, sq, m_c, tag, regime, tuple(flags))


# --- Moser sequence and exponents ----------------------------------------------


def _check_moser_m(m: Fraction) -> None:
    if m >= 2:
        raise ValueError(
            "the sequence n_{k+1} = 2 n_k + 1 - m targets 1 < m < 2; "
            "for m >= 2 iterate along the dyadic exponents n = 2^k instead"
        )
    if m <= 1:
        raise ValueError(f"diffusion exponent must satisfy m > 1, got {m}")


def moser_sequence(m: Number, k_max: int, exact: bool = False) -> list:
    """``n_0 = 1, n_{k+1} = 2 n_k + 1 - m`` for ``k <= k_max`` (recursion).

    With ``exact=True`` the terms are Fractions.
    """
    mq = _rational(m)
    _check_moser_m(mq)
    if k_max < 0:
        raise ValueError("k_max must be >= 0")
    seq = [Fraction(1)]
    for _ in range(k_max):
        seq.append(2 * seq[-1] + 1 - mq)
    return seq if exact else [float(v) for v in seq]


def moser_closed_form(m: Number, k: int) -> Fraction:
    """``n_k = 2^k (2 - m) - 1 + m``."""
    mq = _rational(m)
    _check_moser_m(mq)
    return 2**k * (2 - mq) - 1 + mq


@dataclass(frozen=True)
class IterationExponents:
    """Exponents attached to the ``L^n`` step; Fractions throughout.

    ``alpha``, ``beta`` and ``theta`` need the kernel order and are ``None``
    when it was not supplied.
    """

    d: int
    m: Fraction
    n: Fraction
    l: Fraction
    p: Fraction
    q: Fraction
    alpha: Fraction | None = None
    beta: Fraction | None = None
    theta: Fraction | None = None

    def as_floats(self) -> dict[str, float | None]:
        return {k: (None if v is None else float(v)) for k, v in asdict(self).items()}


def iteration_exponents(d: int, m: Number, n: Number, s: Number | None = None) -> IterationExponents:
    """``l = (m+n-1)/2`` and the Hoelder/GN exponents of the ``L^n`` estimate.

    ``p = (2 + d(m+n-1)) / (1 + d(m+l-2))`` and ``q = (2 + d(m+n-1)) / (1 + d(n+1-l))``
    are conjugate (``1/p + 1/q = 1``). With ``s`` given, ``alpha`` and ``beta``
    solve::

        1/2 = (2-2s)/d + (1/2 - 1/d) alpha + 1 - alpha
        l / (2(n+1-l)) = (1/2 - 1/d) beta + 1 - beta

    and ``theta = alpha + beta (n+1-l)/l`` is the total power of
    ``|grad u^l|_2`` in the drift bound.
    """
    mq, nq = _rational(m), _rational(n)
    if nq < 3 - mq:
        raise ValueError(f"the estimate needs n >= 3 - m = {float(3 - mq):g}, got n = {float(nq):g}")
    l = (mq + nq - 1) / 2
    top = 2 + d * (mq + nq - 1)
    p = top / (1 + d * (mq + l - 2))
    q = top / (1 + d * (nq + 1 - l))
    alpha = beta = theta = None
    if s is not None:
        sq = _rational(s)
        half_plus = Fraction(1, 2) + Fraction(1, d)
        alpha = (Fraction(1, 2) + (2 - 2 * sq) / d) / half_plus
        beta = (1 - l / (2 * (nq + 1 - l))) / half_plus
        theta = alpha + (nq + 1 - l) / l * beta
    return IterationExponents(d, mq, nq, l, p, q, alpha, beta, theta)


def theta_limit(d: int, s: Number) -> Fraction:
    """``lim_{n -> inf} theta(n) = ((2-2s)/d + 1) / (1/2 + 1/d)``."""
    sq = _rational(s)
    return ((2 - 2 * sq) / d + 1) / (Fraction(1, 2) + Fraction(1, d))


# --- iteration recursion -------------------------------------------------------


@dataclass
class RecursionReport:
    """Worst-case solution of the coupled ``A_k`` inequalities on a time grid."""

    t: np.ndarray
    n: list[float]
    log_A: np.ndarray  # (K+1, len(t)); row 0 is the supplied A_0
    sup_B: np.ndarray  # sup_t B_k for each k
    sup: float
    certified: bool
    reason: str
    C0: float
    C1: float

    @property
    def B(self) -> np.ndarray:
        n = np.asarray(self.n)[:, None]
        with np.errstate(invalid="ignore"):
            return np.exp(self.log_A / n)


def _log(x):
    with np.errstate(divide="ignore"):
        return np.log(x)


def _recursion_coeffs(coeffs) -> tuple[float, float]:
    if isinstance(coeffs, Mapping):
        return float(coeffs["C0"]), float(coeffs["C1"])
    c0, c1 = coeffs
    return float(c0), float(c1)


def _log_source(k: int, nk: float, logC1: float, C1: float, logA_prev: np.ndarray) -> np.ndarray:
    """``log(C1^n_k + C1^k A_{k-1}^(2 + C1/n_k))``."""
    with np.errstate(invalid="ignore"):
        a = nk * logC1 if C1 > 0 else -np.inf
        b = (k * logC1 if C1 > 0 else -np.inf) + (2 + C1 / nk) * logA_prev
    b = np.where(np.isnan(b), -np.inf, b)
    return np.logaddexp(a, b)


def iteration_recursion(
    A0_bound,
    coeffs,
    seq: Sequence[float],
    t_grid,
    B_init=None,
    tol_k: float = 1e-3,
    tol_t: float = 1e-3,
) -> RecursionReport:
    """Integrate ``A_k' + C0 A_k = C1^n_k + C1^k A_{k-1}^(2 + C1/n_k)`` for ``k >= 1``.

    The inequality is taken with equality, the worst case. ``A_0`` is
    ``A0_bound`` (scalar or samples on ``t_grid``); ``B_init`` gives
    ``B_k(0) = A_k(0)^(1/n_k)`` for ``k >= 1`` (scalar or sequence, default
    ``B_0(0)``). Each time step uses the exact exponential integrator with the
    source frozen at the larger of its endpoint values. Logarithms are carried
    throughout because ``A_k`` scales like ``B^(2^k)``.

    Boundedness is certified when ``sup_t B_k`` settles in ``k`` (last relative
    change ``<= tol_k``) and no ``B_k`` is still rising at the end of the grid
    (``log B_k(T)`` exceeds its maximum over the first 80% of the grid by at
    most ``tol_t``). ``C0 <= 0`` runs are integrated and reported, never raised.
    """
    C0, C1 = _recursion_coeffs(coeffs)
    if C1 < 0:
        raise ValueError("C1 must be non-negative")
    t = np.asarray(t_grid, dtype=float)
    if t.ndim != 1 or t.size < 2 or np.any(np.diff(t) <= 0):
        raise ValueError("t_grid must be strictly increasing with at least two points")
    n = [float(v) for v in seq]
    if len(n) < 2:
        raise ValueError("need at least n_0 and n_1")
    K = len(n) - 1
    A0 = np.broadcast_to(np.asarray(A0_bound, dtype=float), t.shape)
    if np.any(A0 < 0) or not np.all(np.isfinite(A0)):
        raise ValueError("A_0 must be finite and non-negative on t_grid")
    logA = np.empty((K + 1, t.size))
    logA[0] = _log(A0)
    if B_init is None:
        B_init = float(np.exp(logA[0, 0] / n[0]))
    Binit = np.broadcast_to(np.asarray(B_init, dtype=float), (K,))
    logC1 = math.log(C1) if C1 > 0 else -math.inf
    dt = np.diff(t)
    z = C0 * dt
    decay = -z
    # log of (1 - e^{-z}) / C0 in a form that is stable for z -> 0 and z < 0
    with np.errstate(divide="ignore", invalid="ignore"):
        phi = np.where(np.abs(z) > 1e-8, -np.expm1(-z) / np.where(z == 0, 1, z), 1.0 - 0.5 * z)
    log_gain = np.log(phi * dt)
    for k in range(1, K + 1):
        src = _log_source(k, n[k], logC1, C1, logA[k - 1])
        s_bar = np.maximum(src[:-1], src[1:])
        cur = n[k] * _log(Binit[k - 1])
        row = logA[k]
        row[0] = cur
        for i in range(dt.size):
            cur = np.logaddexp(cur + decay[i], s_bar[i] + log_gain[i])
            row[i + 1] = cur
    with np.errstate(invalid="ignore"):
        logB = logA / np.asarray(n)[:, None]
    sup_logB = logB.max(axis=1)
    sup_B = np.exp(sup_logB)
    reasons = []
    certified = True
    if not np.all(np.isfinite(sup_B[np.isfinite(sup_logB)])):
        certified = False
        reasons.append("overflow in B_k")
    last, prev = sup_logB[-1], sup_logB[-2]
    if np.isfinite(last) and np.isfinite(prev):
        change = abs(last - prev) / max(1.0, abs(last))
        if change > tol_k:
            certified = False
            reasons.append(f"sup_t B_k still moving in k (relative change {change:.3g} in log)")
    cut = max(1, int(0.8 * (t.size - 1)))
    early = logB[1:, : cut + 1].max(axis=1)
    rise = logB[1:, -1] - early
    rise = rise[np.isfinite(rise)]
    if rise.size and rise.max() > tol_t:
        certified = False
        k_bad = int(np.argmax(logB[1:, -1] - early)) + 1
        reasons.append(f"B_{k_bad} still growing at the end of the time grid (log rise {rise.max():.3g})")
    if C0 <= 0 and certified:
        reasons.append("C0 <= 0: no decay, horizon too short to see growth")
    reason = "; ".join(reasons) if reasons else "sup_t B_k stabilised in k and in time"
    return RecursionReport(t, n, logA, sup_B, float(np.nanmax(sup_B[1:])), certified, reason, C0, C1)


def measure_iteration_constants(
    t,
    A: np.ndarray,
    seq: Sequence[float],
    C0: float = 1.0,
    skip: int = 1,
) -> float:
    """Smallest ``C1`` (given ``C0``) for which sampled ``A_k(t)`` satisfy the inequalities.

    ``A`` holds ``int u^{n_k}`` with rows ``k = 0..K`` sampled at ``t``;
    derivatives are centred differences and ``skip`` samples are dropped at
    each end. The search is a bisection in ``log C1`` that only ever accepts
    feasible values, so the returned constant satisfies every sampled
    inequality.
    """
    t = np.asarray(t, dtype=float)
    A = np.asarray(A, dtype=float)
    n = [float(v) for v in seq]
    if A.shape != (len(n), t.size):
        raise ValueError(f"expected A of shape {(len(n), t.size)}, got {A.shape}")
    dA = np.gradient(A, t, axis=1)
    sl = slice(skip, t.size - skip if skip else None)
    lhs = (dA + C0 * A)[:, sl]
    logA = _log(A[:, sl])

    def feasible(C1: float) -> bool:
        logC1 = math.log(C1) if C1 > 0 else -math.inf
        for k in range(1, len(n)):
            need = lhs[k]
            pos = need > 0
            if not pos.any():
                continue
            src = _log_source(k, n[k], logC1, C1, logA[k - 1])
            if np.any(np.log(need[pos]) > src[pos] + 1e-12):
                return False
        return True

    if feasible(0.0):
        return 0.0
    lo = hi = 1.0
    if feasible(hi):
        while feasible(lo):
            hi, lo = lo, lo / 2
            if lo < 1e-12:
                return hi
    else:
        while not feasible(hi):
            lo, hi = hi, hi * 2
            if hi > 1e12:
                raise ValueError("no C1 below 1e12 satisfies the sampled inequalities")
    while hi / lo > 1 + 1e-9:
        mid = math.sqrt(lo * hi)
        if feasible(mid):
            hi = mid
        else:
            lo = mid
    return hi


# --- scaling -------------------------------------------------------------------


def scaling_time_exponent(d: int, m: float) -> float:
    """``gamma = d(m-1) + 2`` in ``u_r(x,t) = r^d u(rx, r^gamma t)``."""
    return d * (m - 1) + 2


def rescale_field(u: Field, r: float, layout: str = "shared") -> Field:
    """``u_r(x) = r^d u(rx)`` sampled exactly.

    ``shared``: on the grid of ``u``; needs integer ``r`` and takes ``r^d`` times
    the mean of the ``r^d`` cells forming the image cell (mass preserving).
    ``nested``: on the grid of half-width ``L/r`` with the same ``n``, where the
    cell centres map onto those of ``u`` and the values are just ``r^d u``.
    """
    g = u.spec
    if layout == "nested":
        return Field(GridSpec(g.d, g.n, g.L / r), u.values * float(r) ** g.d)
    if layout != "shared":
        raise ValueError(f"layout must be 'shared' or 'nested', got {layout!r}")
    if float(r) != int(r) or r < 1:
        raise ValueError("the shared layout needs an integer r >= 1")
    r = int(r)
    if r == 1:
        return u.copy()
    n = g.n
    off = (r - 1) * n // 2
    # index map for one axis: image cell i covers base cells r*i - off .. r*i - off + r - 1
    cover = np.zeros((n, n))
    for i in range(n):
        for j in range(r * i - off, r * i - off + r):
            if 0 <= j < n:
                cover[i, j] = 1.0
    v = u.values
    for ax in range(g.d):
        v = np.moveaxis(np.tensordot(cover, v, axes=([1], [ax])), 0, ax)
    return Field(g, v)


@dataclass
class ScalingReport:
    r: float
    layout: str
    m: float
    m_c: float
    theory_exponent: float
    discrepancy: float
    fitted_strength: float | None = None
    fitted_exponent: float | None = None
    fit_history: list[tuple[float, float]] = field(default_factory=list)
    t_rescaled: float = 0.0
    t_base: float = 0.0
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def _relative_l1(a: Field, b: Field) -> float:
    check_same_grid(a, b)
    den = float(np.abs(a.values).sum())
    return float(np.abs(a.values - b.values).sum()) / den if den > 0 else float(np.abs(b.values).sum())


def scaling_test(
    u0: Field,
    r: float,
    regime: RegimeParams,
    t_end: float,
    dt: float,
    layout: str = "shared",
    eps_cells: float = 2.0,
    fit_strength: bool | None = None,
    fit_iters: int = 6,
    solver_options: Mapping | None = None,
) -> ScalingReport:
    """Compare ``u_r`` formed from the base run with the directly evolved rescaled data.

    The base run starts from ``u0`` and is integrated to ``r^gamma t_end`` with
    step ``r^gamma dt``; the rescaled data ``u_r(., 0)`` is integrated to
    ``t_end`` with step ``dt``. Both use no parabolic regularisation and a
    kernel cutoff of ``eps_cells`` cells of their own grid. The report holds
    the relative L^1 distance between ``u_r`` built from the base solution
    and the direct solution.

    Away from ``m = m_c`` the rescaled equation carries the drift with a
    different weight. ``fit_strength`` finds the factor ``lambda`` by which
    the base drift must be multiplied for the two to agree (least squares,
    secant iterations on the linearised response) and reports
    ``log lambda / log r``, to be compared with ``2d - dm - 2s``.
    """
    from .solver import Fixed, SolverConfig, run

    g = u0.spec
    d, m, s = regime.d, float(regime.m), float(regime.s)
    if g.d != d:
        raise ValueError(f"grid dimension {g.d} does not match the regime dimension {d}")
    if not r > 0:
        raise ValueError("r must be positive")
    gamma = scaling_time_exponent(d, m)
    scale_t = float(r) ** gamma
    ur0 = rescale_field(u0, r, layout)
    gr = ur0.spec
    if layout == "shared" and gr != g:
        raise ValueError("base and rescaled grids are incompatible")
    opts = dict(solver_options or {})

    def evolve(u, T, step, grid, strength):
        spec = RegularizerSpec(eps_cells * grid.h, s, d)
        cfg = SolverConfig(m=m, t_end=T, dt_policy=Fixed(step), epsilon=0.0, snapshot_every=10**9, **opts)
        drift = DriftOperator(spec, grid, strength=strength)
        final, _ = run(u, cfg, spec, drift=drift)
        return final

    direct = evolve(ur0, t_end, dt, gr, 1.0)

    def transformed(strength):
        base = evolve(u0, scale_t * t_end, scale_t * dt, g, strength)
        return rescale_field(base, r, layout)

    t1 = transformed(1.0)
    rep = ScalingReport(
        r=float(r), layout=layout, m=m, m_c=float(regime.m_c), theory_exponent=float(regime.scaling_exponent),
        discrepancy=_relative_l1(direct, t1), t_rescaled=t_end, t_base=scale_t * t_end,
    )
    if fit_strength is None:
        fit_strength = regime.regime != "critical"
    if not fit_strength or r == 1:
        return rep

    target = direct.values

    def misfit(v):
        return float(np.sqrt(np.sum((v - target) ** 2)))

    pts = {1.0: t1.values, 0.0: transformed(0.0).values}
    rep.fit_history = [(lam, misfit(v)) for lam, v in pts.items()]
    lam = None
    for _ in range(fit_iters):
        # nearest two evaluations to the current best bracket the linear model
        best = sorted(pts, key=lambda k: misfit(pts[k]))[:2]
        a, b = best
        va, vb = pts[a], pts[b]
        dv = (vb - va) / (b - a)
        den = float(np.sum(dv * dv))
        if den == 0:
            break
        new = a + float(np.sum(dv * (target - va))) / den
        if lam is not None and abs(new - lam) <= 1e-4 * max(abs(new), 1e-12):
            lam = new
            break
        lam = new
        if lam in pts:
            break
        pts[lam] = transformed(lam).values
        rep.fit_history.append((lam, misfit(pts[lam])))
    rep.fitted_strength = lam
    if lam is not None and lam > 0:
        rep.fitted_exponent = math.log(lam) / math.log(r)
    else:
        rep.notes.append("fitted drift factor is not positive; no exponent")
    return rep


# --- Gagliardo-Nirenberg --------------------------------------------------------


def _gn_residual(d, s, p, r, q, alpha) -> float:
    return 1 / p - (s / d + (1 / r - 1 / d) * alpha + (1 - alpha) / q)


def gn_condition(d: int, s: float, p: float, r: float, q: float, alpha: float, tol: float = 1e-12) -> str:
    """Which admissible set the exponent tuple belongs to; raises if none.

    The scaling balance ``1/p = s/d + (1/r - 1/d) alpha + (1 - alpha)/q`` must
    hold to ``tol``. Then one of: ``standard`` (``0 <= s <= alpha < 1``,
    ``1 < r, p, q < inf``), ``q_one`` (``0 < s < alpha < 1``, ``1 < r, p <
    inf``, ``1 <= q < inf``) or ``classical`` (``s = 0``, ``0 <= alpha <= 1``,
    ``1 <= r, p <= inf``, ``1 <= q < inf``).
    """
    res = _gn_residual(d, s, p, r, q, alpha)
    if not abs(res) <= tol:
        raise ValueError(f"exponents violate the scaling balance by {res:.3g}")
    inf = math.inf
    if 0 <= s <= alpha < 1 and 1 < r < inf and 1 < p < inf and 1 < q < inf:
        return "standard"
    if 0 < s < alpha < 1 and 1 < r < inf and 1 < p < inf and 1 <= q < inf:
        return "q_one"
    if s == 0 and 0 <= alpha <= 1 and 1 <= r <= inf and 1 <= p <= inf and 1 <= q < inf:
        return "classical"
    raise ValueError(f"exponent tuple (s={s}, p={p}, r={r}, q={q}, alpha={alpha}) is outside every admissible set")


def _gradient_norm(u: Field, r: float) -> float:
    grads = spectral_gradient(u)
    mag = np.sqrt(sum(gr.values**2 for gr in grads))
    return lp_norm(Field(u.spec, mag), r)


def gn_check(u: Field, s_ord: float, p: float, r: float, q: float, alpha: float) -> float:
    """``| |grad|^s u |_p / ( |grad u|_r^alpha |u|_q^(1-alpha) )`` on the periodic grid."""
    gn_condition(u.spec.d, s_ord, p, r, q, alpha)
    num = lp_norm(abs_grad_power(u, s_ord), p)
    den = 1.0
    if alpha:
        den *= _gradient_norm(u, r) ** alpha
    if alpha != 1:
        den *= lp_norm(u, q) ** (1 - alpha)
    return num / den


@dataclass(frozen=True)
class TwoStepGN:
    """``q = 1`` bound split as ``(s, p, r, q', alpha')`` then ``(0, q', r, 1, beta)``."""

    d: int
    s: float
    p: float
    r: float
    alpha: float
    alpha1: float
    q1: float
    beta: float


def gn_two_step(d: int, s: float, p: float, r: float, alpha: float, alpha1: float | None = None) -> TwoStepGN:
    """Intermediate exponents for a ``q = 1`` tuple.

    Picks ``alpha' in [s, alpha)`` (default the midpoint) and solves the
    balance for ``q'``, which must satisfy ``1 < q' < r``; then
    ``beta = (1 - 1/q') / (1 + 1/d - 1/r)`` and ``alpha = alpha' + beta - alpha' beta``.
    """
    if gn_condition(d, s, p, r, 1.0, alpha) != "q_one":
        raise ValueError("two-step composition is for the q = 1 set with 0 < s < alpha < 1")
    if alpha1 is None:
        alpha1 = 0.5 * (s + alpha)
    if not s <= alpha1 < alpha:
        raise ValueError(f"need s <= alpha' < alpha, got alpha' = {alpha1}")
    inv_q1 = (1 / p - s / d - (1 / r - 1 / d) * alpha1) / (1 - alpha1)
    q1 = 1 / inv_q1
    if not 1 < q1 < r:
        raise ValueError(f"intermediate exponent q' = {q1:.6g} is not in (1, r); choose another alpha'")
    beta = (1 - 1 / q1) / (1 + 1 / d - 1 / r)
    composed = alpha1 + beta - alpha1 * beta
    if abs(composed - alpha) > 1e-10:
        raise AssertionError(f"composition gives alpha = {composed}, expected {alpha}")
    return TwoStepGN(d, s, p, r, alpha, alpha1, q1, beta)


def gn_two_step_ratios(u: Field, ts: TwoStepGN) -> tuple[float, float, float]:
    """Ratios of the two steps and of the direct ``q = 1`` inequality.

    Returns ``(R1, R2, R)`` with ``R = R1 * R2^(1 - alpha')`` identically.
    """
    R1 = gn_check(u, ts.s, ts.p, ts.r, ts.q1, ts.alpha1)
    R2 = gn_check(u, 0.0, ts.q1, ts.r, 1.0, ts.beta)
    R = gn_check(u, ts.s, ts.p, ts.r, 1.0, ts.alpha)
    return R1, R2, R


# --- H^-1 distance ----------------------------------------------------------------


def hminus1_distance(u1: Field, u2: Field, rtol: float = 1e-10) -> float:
    """``eta = |grad phi|_2^2`` where ``Lap phi = u1 - u2`` on the periodic grid.

    Computed as ``| |grad|^-1 (u1 - u2) |_2^2``. The masses must agree to
    ``rtol`` (relative to the larger mass), since only mean-free differences
    have a periodic potential.
    """
    g = check_same_grid(u1, u2)
    m1, m2 = integrate(u1), integrate(u2)
    scale = max(abs(m1), abs(m2), 1e-300)
    if abs(m1 - m2) > rtol * scale and abs(m1 - m2) > 1e-300:
        raise ValueError(f"masses differ ({m1:.17g} vs {m2:.17g}); the H^-1 distance needs equal mass")
    w = Field(g, u1.values - u2.values)
    psi = apply_symbol(w, -1.0)
    return float(g.cell_volume * np.sum(psi.values**2))


@dataclass
class GronwallFit:
    """Least-squares line ``log eta ~ log_eta0 + C t``."""

    C: float
    log_eta0: float
    max_deviation: float  # max |log eta - fit|
    r_squared: float
    t_range: tuple[float, float]
    n_points: int

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def gronwall_fit(t, eta, t_range: tuple[float, float] | None = None) -> GronwallFit:
    t = np.asarray(t, dtype=float)
    eta = np.asarray(eta, dtype=float)
    sel = eta > 0
    if t_range is not None:
        sel &= (t >= t_range[0]) & (t <= t_range[1])
    if sel.sum() < 2:
        raise ValueError("need at least two positive samples of eta to fit")
    tt, y = t[sel], np.log(eta[sel])
    C, c0 = np.polyfit(tt, y, 1)
    fit = c0 + C * tt
    res = y - fit
    ss = float(np.sum((y - y.mean()) ** 2))
    r2 = 1.0 - float(np.sum(res**2)) / ss if ss > 0 else 1.0
    return GronwallFit(float(C), float(c0), float(np.abs(res).max()), r2, (float(tt[0]), float(tt[-1])), int(sel.sum()))


# --- oscillation decay ------------------------------------------------------------


class ResolutionError(ValueError):
    """The smallest requested cylinder is not resolved by the grid."""


@dataclass
class OscillationReport:
    k: list[int]
    radius: list[float]
    t_window: list[tuple[float, float]]
    osc: list[float]  # percentile-based essential oscillation
    osc_exact: list[float]
    samples: list[int]
    eta: float
    exponent: float | None
    a: float
    b: float
    r0: float

    def to_json(self) -> str:
        return json.dumps(asdict(self))


def _snapshot_pairs(snapshots) -> list[tuple[float, Field]]:
    out = []
    for item in snapshots:
        if isinstance(item, Field):
            raise ValueError("snapshots must be (t, Field) pairs")
        t, f = item
        out.append((float(t), f))
    out.sort(key=lambda p: p[0])
    return out


def oscillation_decay(
    snapshots: Iterable,
    center,
    a: float,
    b: float,
    r0: float,
    K: int | None = None,
    m: float = 1.0,
    t0: float | None = None,
    percentiles: tuple[float, float] = (2.0, 98.0),
) -> OscillationReport:
    """Oscillation of ``v = u^m`` over nested cylinders ``Q(a^k r0, b^(2k))``.

    The k-th cylinder is ``{|x - center| <= r_k} x [t0, t0 + b^(2k) r_k^2]``
    with ``r_k = a^k r0``; every snapshot whose time falls in the window
    contributes its cells. ``osc`` uses the given percentiles as essential
    sup/inf; ``osc_exact`` uses min/max. The fit of ``log osc_k`` against ``k``
    gives the decay rate ``eta``; ``log eta / log a`` is the implied Hoelder
    exponent. ``K`` defaults to the deepest level with ``r_K >= 4h``; asking
    for more raises :class:`ResolutionError`.
    """
    snaps = _snapshot_pairs(snapshots)
    if not snaps:
        raise ValueError("no snapshots")
    if not (0 < a < 1 and 0 < b < 1 and r0 > 0):
        raise ValueError("need 0 < a, b < 1 and r0 > 0")
    g = snaps[0][1].spec
    for _, f in snaps:
        if f.spec != g:
            raise ValueError("all snapshots must share one grid")
    k_res = int(math.floor(math.log(4 * g.h / r0) / math.log(a) + 1e-9))
    if K is None:
        K = k_res
    if K < 1:
        raise ResolutionError(f"r0 = {r0} leaves fewer than two resolved levels at h = {g.h:.4g}")
    if a**K * r0 < 4 * g.h * (1 - 1e-12):
        raise ResolutionError(f"level K={K} has radius {a**K * r0:.4g} < 4h = {4 * g.h:.4g}")
    if t0 is None:
        t0 = snaps[0][0]
    dist = g.radius(center)
    vs = [(t, np.power(np.maximum(f.values, 0.0), m) if m != 1 else f.values) for t, f in snaps]
    ks, radii, windows, osc, osc_exact, counts = [], [], [], [], [], []
    for k in range(K + 1):
        rk = a**k * r0
        t1 = t0 + b ** (2 * k) * rk**2
        mask = dist <= rk
        vals = [v[mask] for t, v in vs if t0 - 1e-12 <= t <= t1 + 1e-12]
        if not vals:
            raise ResolutionError(f"no snapshot falls in the time window [{t0:g}, {t1:g}] of level {k}")
        allv = np.concatenate(vals)
        lo, hi = np.percentile(allv, percentiles)
        ks.append(k)
        radii.append(rk)
        windows.append((t0, t1))
        osc.append(float(hi - lo))
        osc_exact.append(float(allv.max() - allv.min()))
        counts.append(int(allv.size))
    o = np.asarray(osc)
    pos = o > 0
    if pos.sum() >= 2:
        slope = np.polyfit(np.asarray(ks)[pos], np.log(o[pos]), 1)[0]
        eta = float(math.exp(slope))
        exponent = float(slope / math.log(a))
    else:
        eta, exponent = 0.0, None
    return OscillationReport(ks, radii, windows, osc, osc_exact, counts, eta, exponent, a, b, r0)


# --- energy audit -----------------------------------------------------------------


@dataclass
class EnergyAudit:
    """``d/dt int u^n + dissipation - drift work`` along a recorded run.

    ``lhs`` is the rate of change of ``int u^n`` plus the dissipation
    ``n int grad(u^m + eps u) . grad u^(n-1)`` (equal to
    ``C_m |grad u^l|_2^2`` plus the ``eps`` part, ``C_m = 4mn(n-1)/(n+m-1)^2``);
    ``rhs`` is the drift work ``(n-1) int V*u . grad u^n``. ``relative`` is the
    residual divided by ``int u^n``, a rate per unit time.
    """

    n: float
    method: str
    t: np.ndarray
    lhs: np.ndarray
    rhs: np.ndarray
    residual: np.ndarray
    relative: np.ndarray
    tol: float
    grad_l2_spacetime: float
    vel_l2_spacetime: float

    @property
    def max_relative(self) -> float:
        return float(self.relative.max()) if self.relative.size else 0.0

    @property
    def ok(self) -> bool:
        return self.max_relative <= self.tol

    def attach(self, series: DiagnosticsSeries) -> None:
        """Add ``energy_lhs_{n}``/``energy_rhs_{n}`` columns (centred audits only)."""
        if self.method != "centered":
            raise ValueError("only centred audits share the series time grid")
        tag = f"{self.n:g}"
        series.add_column(f"energy_lhs_{tag}", self.lhs)
        series.add_column(f"energy_rhs_{tag}", self.rhs)


def energy_audit(
    series: DiagnosticsSeries,
    n: float,
    regime: RegimeParams | None = None,
    method: str = "centered",
    tol: float = 1e-3,
) -> EnergyAudit:
    """Residual of the ``L^n`` balance from the energy columns of a run.

    ``centered``: ``d/dt int u^n`` by centred differences on the record times,
    dissipation and drift work taken at those times. ``interval``: increments
    of ``int u^n`` against the step-by-step accumulated dissipation and drift
    work over each record interval, which is the scheme's own balance and
    carries no differencing error.
    """
    n = float(n)
    if regime is not None and n < float(3 - regime.m) - 1e-12:
        raise ValueError(f"the balance is audited for n >= 3 - m = {float(3 - regime.m):g}")
    tag = f"{n:g}"
    need = [f"int_u{tag}", f"dissip_{tag}", f"drift_{tag}", f"dissip_int_{tag}", f"drift_int_{tag}"]
    missing = [c for c in need if c not in series.columns]
    if missing:
        raise ValueError(f"series lacks energy columns {missing}; run with energy_n including {n:g}")
    t = series["t"]
    I = series[f"int_u{tag}"]
    if method == "centered":
        dI = np.gradient(I, t) if t.size > 1 else np.zeros_like(I)
        lhs = dI + series[f"dissip_{tag}"]
        rhs = series[f"drift_{tag}"]
        tt, scale = t, I
    elif method == "interval":
        dt = np.diff(t)
        lhs = (np.diff(I) + np.diff(series[f"dissip_int_{tag}"])) / dt
        rhs = np.diff(series[f"drift_int_{tag}"]) / dt
        tt, scale = 0.5 * (t[1:] + t[:-1]), 0.5 * (I[1:] + I[:-1])
    else:
        raise ValueError(f"method must be 'centered' or 'interval', got {method!r}")
    res = lhs - rhs
    with np.errstate(divide="ignore", invalid="ignore"):
        rel = np.where(scale > 0, res / scale, np.where(res > 0, np.inf, 0.0))
    grad = math.sqrt(max(float(series["grad_l2sq_int"][-1]), 0.0)) if "grad_l2sq_int" in series.columns else math.nan
    vel = math.sqrt(max(float(series["vel_l2sq_int"][-1]), 0.0)) if "vel_l2sq_int" in series.columns else math.nan
    return EnergyAudit(n, method, tt, lhs, rhs, res, rel, tol, grad, vel)
