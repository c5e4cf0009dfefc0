"""Batch experiment runner.

``aggdiff run <config.json>``, ``aggdiff compare <a.json> <b.json>``,
``aggdiff verify [--fast]``, ``aggdiff regime <d> <m> <s>`` and
``aggdiff holder <run_dir>``. Exit status: 0 success, 1 failed checks,
2 configuration error, 3 solver error, 4 mass mismatch in ``compare``.
"""
from __future__ import annotations

import argparse
import copy
import hashlib
import json
import logging
import os
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

import numpy as np

from . import __version__
from ._fft import n_threads
from .diagnostics import (
    RegimeParams,
    ResolutionError,
    classify,
    gronwall_fit,
    hminus1_distance,
    oscillation_decay,
)
from .drift import RegularizerSpec
from .grid import Field, GridSpec, integrate, read_snapshot, snapshot_bytes, write_snapshot
from .initial import Barenblatt, make_initial
from .series import DiagnosticsSeries
from .solver import Adaptive, BlowUpHalt, Fixed, SolverConfig, SolverError, run

log = logging.getLogger("aggdiff")

EXIT_OK, EXIT_CHECKS, EXIT_CONFIG, EXIT_SOLVER, EXIT_MASS = 0, 1, 2, 3, 4

INITIAL_KINDS = ("zero", "gaussian", "ball", "bump", "barenblatt", "file")


class ConfigError(ValueError):
    pass


class MassMismatch(ValueError):
    pass


# --- configuration ------------------------------------------------------------

DEFAULTS = {
    "grid": {"d": 3, "n": 32, "L": 4.0},
    "physics": {"m": 2.0, "s": 1.0, "epsilon": None, "parabolic_epsilon": None, "drift_enabled": True},
    "solver": {"dt_policy": {"kind": "adaptive"}, "t_end": 1.0, "snapshot_every": 10},
    "initial": {"kind": "gaussian", "params": {}},
    "diagnostics": {"p_list": [2.0], "energy_n_list": [], "oscillation": None, "pair_run": None,
                    "barenblatt_tol": None, "write_snapshots": True},
    "output_dir": "aggdiff_run",
}

_SOLVER_PASSTHROUGH = ("t_start", "picard_sweeps", "cg_tol", "cg_maxiter", "boundary_band", "boundary_tol",
                       "mass_tol", "halt_linf", "max_steps", "faces")


def _merge(base: dict, over: dict, path: str = "") -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if k not in base:
            raise ConfigError(f"unknown configuration key {path + k!r}")
        if isinstance(base[k], dict) and isinstance(v, dict) and k not in ("params",):
            out[k] = _merge(base[k], v, path + k + ".") if k != "solver" else {**base[k], **v}
        else:
            out[k] = v
    return out


@dataclass
class ExperimentConfig:
    """Validated experiment description; ``raw`` is the normalised JSON echo."""

    raw: dict
    grid: GridSpec
    m: float
    s: float
    kernel: RegularizerSpec | None
    solver: SolverConfig
    regime: RegimeParams
    base_dir: Path = field(default_factory=Path.cwd)

    @property
    def output_dir(self) -> Path:
        p = Path(self.raw["output_dir"])
        return p if p.is_absolute() else self.base_dir / p


def _dt_policy(spec) -> Fixed | Adaptive:
    if not isinstance(spec, dict):
        raise ConfigError("solver.dt_policy must be an object with a 'kind'")
    spec = dict(spec)
    kind = spec.pop("kind", "adaptive")
    if kind == "fixed":
        return Fixed(float(spec["dt"]))
    if kind == "adaptive":
        return Adaptive(**{k: float(v) for k, v in spec.items()})
    raise ConfigError(f"unknown dt policy kind {kind!r}")


def parse_config(data: dict, base_dir: Path | None = None) -> ExperimentConfig:
    """Validate a config mapping; raises :class:`ConfigError` on any problem."""
    if not isinstance(data, dict):
        raise ConfigError("configuration must be a JSON object")
    try:
        raw = _merge(DEFAULTS, data)
        gr, ph, so, diag = raw["grid"], raw["physics"], raw["solver"], raw["diagnostics"]
        g = GridSpec(int(gr["d"]), int(gr["n"]), float(gr["L"]))
        m, s = float(ph["m"]), float(ph["s"])
        regime = classify(g.d, _exactish(ph["m"]), _exactish(ph["s"]))
        drift_on = bool(ph["drift_enabled"])
        kernel = None
        if drift_on:
            eps = ph["epsilon"]
            eps = 2.0 * g.h if eps is None else float(eps)
            kernel = RegularizerSpec(eps, s, g.d)
        extra = {k: so[k] for k in _SOLVER_PASSTHROUGH if k in so}
        unknown = set(so) - set(_SOLVER_PASSTHROUGH) - {"dt_policy", "t_end", "snapshot_every"}
        if unknown:
            raise ConfigError(f"unknown solver keys {sorted(unknown)}")
        par = ph["parabolic_epsilon"]
        cfg = SolverConfig(
            m=m,
            t_end=float(so["t_end"]),
            dt_policy=_dt_policy(so["dt_policy"]),
            epsilon=None if par is None else float(par),
            snapshot_every=int(so["snapshot_every"]),
            drift_enabled=drift_on,
            p_list=tuple(float(p) for p in diag["p_list"]),
            energy_n=tuple(float(n) for n in diag["energy_n_list"]),
            **extra,
        )
        kind = raw["initial"]["kind"]
        if kind not in INITIAL_KINDS:
            raise ConfigError(f"unknown initial kind {kind!r}; expected one of {INITIAL_KINDS}")
    except ConfigError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise ConfigError(f"invalid configuration: {exc}") from exc
    return ExperimentConfig(raw, g, m, s, kernel, cfg, regime, base_dir or Path.cwd())


def _exactish(x):
    """JSON numbers as exact decimals, so ``1.2`` means 6/5 when classifying."""
    if isinstance(x, str):
        return Fraction(x)
    if isinstance(x, int):
        return Fraction(x)
    return Fraction(repr(float(x)))


def load_config(path: str | Path) -> ExperimentConfig:
    p = Path(path)
    try:
        data = json.loads(p.read_text())
    except OSError as exc:
        raise ConfigError(f"cannot read {p}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{p} is not valid JSON: {exc}") from exc
    return parse_config(data, p.parent.resolve())


def build_initial(exp: ExperimentConfig, spec: dict | None = None) -> Field:
    spec = spec or exp.raw["initial"]
    kind, params = spec.get("kind"), dict(spec.get("params") or {})
    try:
        if kind == "file":
            path = Path(params.get("path") or spec.get("path"))
            if not path.is_absolute():
                path = exp.base_dir / path
            u, _ = read_snapshot(path)
            if u.spec != exp.grid:
                raise ConfigError(f"initial file grid {u.spec} does not match {exp.grid}")
        else:
            if kind == "barenblatt":
                params.setdefault("m", exp.m)
            u = make_initial(exp.grid, kind, params)
    except ConfigError:
        raise
    except (OSError, TypeError, ValueError) as exc:
        raise ConfigError(f"cannot build initial data: {exc}") from exc
    if np.any(u.values < 0) or not np.all(np.isfinite(u.values)):
        raise ConfigError("initial data must be finite and non-negative")
    return u


def blob_sha1(data: bytes) -> str:
    """Git blob hash of ``data``."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def _regime_tags(r: RegimeParams) -> list[str]:
    tags = []
    if r.regime != "subcritical":
        tags.append(r.regime.capitalize())
    if r.case_tag == "Unsupported":
        tags.append("Unsupported")
    return tags


def _error_record(exc: BaseException) -> dict:
    rec = {"type": type(exc).__name__, "message": str(exc)}
    for k in ("step", "t"):
        v = getattr(exc, k, None)
        if v is not None:
            rec[k] = v
    return rec


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")


def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, Fraction):
        return str(o)
    if isinstance(o, Path):
        return str(o)
    raise TypeError(f"cannot serialise {type(o).__name__}")


# --- run ------------------------------------------------------------------------


def _barenblatt_check(exp: ExperimentConfig, final: Field, t_final: float) -> dict | None:
    init = exp.raw["initial"]
    if init["kind"] != "barenblatt":
        return None
    params = dict(init.get("params") or {})
    t0 = float(params.pop("t0", 1.0))
    prof = Barenblatt(exp.grid.d, float(params.pop("m", exp.m)), **params)
    exact = prof.field(exp.grid, t0 + t_final - exp.solver.t_start)
    err = float(np.abs(final.values - exact.values).sum() * exp.grid.cell_volume)
    rel = err / max(integrate(exact), 1e-300)
    out = {"l1_error": err, "relative_l1_error": rel, "profile_time": t0 + t_final - exp.solver.t_start}
    tol = exp.raw["diagnostics"].get("barenblatt_tol")
    if not exp.solver.drift_enabled and (exp.solver.epsilon or 0.0) == 0.0 and tol is not None:
        out["tol"] = float(tol)
        out["pass"] = bool(err <= float(tol))
    elif exp.solver.drift_enabled:
        out["note"] = "drift enabled: the closed form is not the solution"
    return out


def execute(exp: ExperimentConfig, out_dir: Path | None = None) -> tuple[int, dict]:
    """Run one experiment and write its directory; returns ``(exit code, meta)``."""
    out = out_dir or exp.output_dir
    out.mkdir(parents=True, exist_ok=True)
    u0 = build_initial(exp)
    meta = {
        "version": __version__,
        "config": exp.raw,
        "regime": exp.regime.to_dict(),
        "tags": _regime_tags(exp.regime),
        "u0_sha1": blob_sha1(snapshot_bytes(u0, exp.solver.t_start)),
        "u0_mass": integrate(u0),
        "threads": n_threads(),
    }
    for tag in meta["tags"]:
        log.warning("parameters are %s: %s", tag, "; ".join(exp.regime.flags) or exp.regime.coverage)
    pair = exp.raw["diagnostics"].get("pair_run")
    u0b = None
    if pair:
        u0b = build_initial(exp, pair)
        ma, mb = integrate(u0), integrate(u0b)
        if abs(ma - mb) > 1e-10 * max(abs(ma), abs(mb), 1e-300):
            raise MassMismatch(f"pair_run mass {mb:.17g} differs from {ma:.17g}")
    write = bool(exp.raw["diagnostics"].get("write_snapshots", True))
    snaps: list[str] = []
    frames: tuple[list[float], list[Field]] = ([], [])

    def keep(step, t, f):
        if write:
            name = f"snap_{step}.agd"
            write_snapshot(out / name, f, t)
            snaps.append(name)
        if u0b is not None:
            frames[0].append(t)
            frames[1].append(f.copy())

    t0 = time.perf_counter()
    code = EXIT_OK
    series = None
    try:
        final, series = run(u0, exp.solver, exp.kernel, callback=keep)
        meta["status"] = "completed"
        meta["final_time"] = float(series["t"][-1])
        bc = _barenblatt_check(exp, final, float(series["t"][-1]))
        if bc is not None:
            meta["barenblatt"] = bc
        if u0b is not None:
            try:
                tb, fb, _ = _evolve_frames(exp, u0b)
            except SolverError as exc:
                meta["failed_run"] = "pair_run"
                raise exc
            rows, fit, note = pair_distance(frames[0], frames[1], tb, fb, out, exp.solver.t_end)
            meta["pair"] = {"eta_final": rows[-1][1] if rows else None,
                            "gronwall": None if fit is None else json.loads(fit.to_json())}
            if note:
                meta["pair"]["note"] = note
    except SolverError as exc:
        code = EXIT_SOLVER
        meta["status"] = "solver_error"
        meta["error"] = _error_record(exc)
        if isinstance(exc, BlowUpHalt):
            series = exc.series
            meta["status"] = "halted"
        log.error("%s", exc)
    meta["wall_seconds"] = time.perf_counter() - t0
    meta["snapshots"] = snaps
    if series is not None:
        series.to_csv(out / "series.csv")
        mass = series["mass"]
        meta["mass_relative_drift"] = float(np.abs(mass - mass[0]).max() / mass[0]) if mass[0] > 0 else 0.0
        meta["linf_max"] = float(series["linf"].max())
    _write_json(out / "meta.json", meta)
    return code, meta


def cmd_run(args) -> int:
    try:
        exp = load_config(args.config)
        if args.output_dir:
            exp.raw["output_dir"] = str(Path(args.output_dir).resolve())
        code, meta = execute(exp)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except MassMismatch as exc:
        print(f"mass mismatch: {exc}", file=sys.stderr)
        return EXIT_MASS
    print(f"{meta['status']}: {exp.output_dir}")
    return code


# --- compare ---------------------------------------------------------------------


def _evolve_frames(exp: ExperimentConfig, u0: Field) -> tuple[list[float], list[Field], DiagnosticsSeries]:
    times: list[float] = []
    frames: list[Field] = []

    def keep(step, t, f):
        times.append(t)
        frames.append(f.copy())

    _, ser = run(u0, exp.solver, exp.kernel, callback=keep)
    return times, frames, ser


def _common_times(ta, tb, tol):
    pairs = []
    j = 0
    for i, t in enumerate(ta):
        while j < len(tb) and tb[j] < t - tol:
            j += 1
        if j < len(tb) and abs(tb[j] - t) <= tol:
            pairs.append((i, j))
    return pairs


def pair_distance(ta, fa, tb, fb, out: Path, t_end: float):
    """H^-1 distance at common record times; writes ``eta.csv`` and ``gronwall.json``."""
    tol = 1e-9 * max(1.0, abs(t_end))
    rows = [(ta[i], hminus1_distance(fa[i], fb[j])) for i, j in _common_times(ta, tb, tol)]
    lines = ["t,eta,metric"] + [f"{t!r},{e!r},{float(np.sqrt(e))!r}" for t, e in rows]
    (out / "eta.csv").write_text("\n".join(lines) + "\n")
    t = np.array([r[0] for r in rows])
    eta = np.array([r[1] for r in rows])
    fit, note = None, None
    if np.count_nonzero(eta > 0) >= 2:
        fit = gronwall_fit(t, eta)
        (out / "gronwall.json").write_text(fit.to_json() + "\n")
    else:
        note = "eta vanishes at all but at most one common time; no Gronwall fit"
    return rows, fit, note


def cmd_compare(args) -> int:
    try:
        a, b = load_config(args.config_a), load_config(args.config_b)
        if a.grid != b.grid:
            raise ConfigError(f"grids differ: {a.grid} vs {b.grid}")
        if a.raw["physics"] != b.raw["physics"]:
            raise ConfigError("physics sections differ; compare needs one equation")
        ua, ub = build_initial(a), build_initial(b)
    except ConfigError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ma, mb = integrate(ua), integrate(ub)
    if abs(ma - mb) > 1e-10 * max(abs(ma), abs(mb), 1e-300):
        print(f"mass mismatch: {ma:.17g} vs {mb:.17g}", file=sys.stderr)
        return EXIT_MASS
    out = Path(args.output_dir).resolve() if args.output_dir else a.output_dir
    out.mkdir(parents=True, exist_ok=True)
    try:
        if n_threads() > 1:
            with ThreadPoolExecutor(2) as pool:
                fa, fb = pool.submit(_evolve_frames, a, ua), pool.submit(_evolve_frames, b, ub)
                ra, rb = fa.result(), fb.result()
        else:
            ra, rb = _evolve_frames(a, ua), _evolve_frames(b, ub)
    except SolverError as exc:
        _write_json(out / "meta.json", {"status": "solver_error", "error": _error_record(exc)})
        print(f"solver error: {exc}", file=sys.stderr)
        return EXIT_SOLVER
    rows, fit, note = pair_distance(ra[0], ra[1], rb[0], rb[1], out, a.solver.t_end)
    eta = np.array([r[1] for r in rows])
    meta = {
        "version": __version__,
        "status": "completed",
        "config_a": a.raw,
        "config_b": b.raw,
        "regime": a.regime.to_dict(),
        "tags": _regime_tags(a.regime),
        "u0_sha1": [blob_sha1(snapshot_bytes(ua, a.solver.t_start)), blob_sha1(snapshot_bytes(ub, b.solver.t_start))],
        "common_times": len(rows),
        "eta_final": float(eta[-1]) if eta.size else None,
        "gronwall": None if fit is None else json.loads(fit.to_json()),
    }
    if note:
        meta["note"] = note
    _write_json(out / "meta.json", meta)
    print(f"eta(t_end) = {meta['eta_final']:.6g}" + ("" if fit is None else f", Gronwall C = {fit.C:.6g}"))
    return EXIT_OK


# --- verify / regime / holder -------------------------------------------------------


def cmd_verify(args) -> int:
    from .selfcheck import format_table, run_battery

    fault = args.inject_fault or os.environ.get("AGGDIFF_INJECT_FAULT") or None
    try:
        results = run_battery(fast=args.fast, fault=fault)
    except ValueError as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(format_table(results))
    return EXIT_OK if all(c.passed for c in results) else EXIT_CHECKS


def regime_table(r: RegimeParams) -> str:
    rows = [
        ("d", str(r.d)),
        ("m", f"{r.m} ({float(r.m):g})"),
        ("s", f"{r.s} ({float(r.s):g})"),
        ("m_c = 2 - 2s/d", f"{r.m_c} ({float(r.m_c):.6g})"),
        ("regime", r.regime),
        ("case", r.case_tag),
        ("coverage", r.coverage),
        ("flags", "; ".join(r.flags) if r.flags else "-"),
    ]
    w = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{w}}  {v}" for k, v in rows)


def cmd_regime(args) -> int:
    try:
        r = classify(int(args.d), Fraction(args.m), Fraction(args.s))
    except (ValueError, ZeroDivisionError) as exc:
        print(f"invalid parameters: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    print(regime_table(r))
    return EXIT_OK


def cmd_holder(args) -> int:
    run_dir = Path(args.run_dir)
    try:
        meta = json.loads((run_dir / "meta.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"cannot read run metadata: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    files = sorted(run_dir.glob("snap_*.agd"), key=lambda p: int(p.stem.split("_")[1]))
    if not files:
        print(f"no snapshots in {run_dir}", file=sys.stderr)
        return EXIT_CONFIG
    snaps = [(t, f) for f, t in (read_snapshot(p) for p in files)]
    g = snaps[0][1].spec
    osc = dict(meta["config"]["diagnostics"].get("oscillation") or {})
    for k in ("a", "b", "r0", "K"):
        v = getattr(args, k, None)
        if v is not None:
            osc[k] = v
    center = osc.get("center", [0.0] * g.d)
    m = float(meta["config"]["physics"]["m"])
    try:
        rep = oscillation_decay(
            snaps, center, float(osc.get("a", 0.7)), float(osc.get("b", 0.9)),
            float(osc.get("r0", g.L / 2)), K=osc.get("K"), m=m, t0=osc.get("t0"),
        )
    except ResolutionError as exc:
        print(f"insufficient resolution: {exc}", file=sys.stderr)
        return EXIT_CHECKS
    (run_dir / "holder.json").write_text(rep.to_json() + "\n")
    expo = "n/a" if rep.exponent is None else f"{rep.exponent:.4g}"
    print(f"eta_osc = {rep.eta:.4g}, Holder exponent = {expo} over k = 0..{rep.k[-1]}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="aggdiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="run one experiment from a JSON config")
    r.add_argument("config")
    r.add_argument("--output-dir", help="override output_dir from the config")
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("compare", help="co-evolve two configs and report the H^-1 distance")
    c.add_argument("config_a")
    c.add_argument("config_b")
    c.add_argument("--output-dir", help="where to write eta.csv (default: output_dir of the first config)")
    c.set_defaults(func=cmd_compare)

    v = sub.add_parser("verify", help="operator and property self-tests")
    v.add_argument("--fast", action="store_true", help="coarse grids, completes in seconds")
    v.add_argument("--inject-fault", choices=("kernel-scale",), help=argparse.SUPPRESS)
    v.set_defaults(func=cmd_verify)

    g = sub.add_parser("regime", help="classify (d, m, s) against m_c = 2 - 2s/d")
    g.add_argument("d")
    g.add_argument("m")
    g.add_argument("s")
    g.set_defaults(func=cmd_regime)

    h = sub.add_parser("holder", help="oscillation decay of u^m over a run's snapshots")
    h.add_argument("run_dir")
    h.add_argument("--a", type=float)
    h.add_argument("--b", type=float)
    h.add_argument("--r0", type=float)
    h.add_argument("--K", type=int)
    h.set_defaults(func=cmd_holder)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_CONFIG if exc.code not in (0, None) else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    return args.func(args)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
