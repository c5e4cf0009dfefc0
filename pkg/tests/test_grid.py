import io
import math
import struct

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aggdiff.grid import (
    Field,
    GridSpec,
    check_same_grid,
    integrate,
    lp_norm,
    parse_snapshot,
    read_snapshot,
    snapshot_bytes,
    truncate_above,
    write_snapshot,
)


def test_gridspec_geometry():
    g = GridSpec(3, 16, 2.0)
    assert g.h == 0.25
    assert g.shape == (16, 16, 16)
    assert g.cell_volume * g.n**g.d == pytest.approx((2 * g.L) ** g.d, rel=0, abs=1e-12)
    ax = g.axis()
    assert ax[0] == -2.0 + 0.125 and ax[-1] == 2.0 - 0.125
    np.testing.assert_array_equal(ax, -ax[::-1])


@pytest.mark.parametrize("args", [(4, 16, 1.0), (3, 12, 1.0), (3, 4, 1.0), (2, 16, 0.0), (2, 16, -1.0)])
def test_gridspec_rejects(args):
    with pytest.raises(ValueError):
        GridSpec(*args)


def test_field_rejects_bad_values():
    g = GridSpec(1, 8, 1.0)
    with pytest.raises(ValueError):
        Field(g, np.zeros(7))
    with pytest.raises(ValueError):
        Field(g, np.full(8, np.nan))
    with pytest.raises(ValueError):
        Field(g, np.zeros(8)) + Field(GridSpec(1, 16, 1.0), np.zeros(16))
    with pytest.raises(ValueError):
        check_same_grid(g.zeros(), GridSpec(1, 8, 2.0).zeros())


def test_integrate_constant_and_zero():
    g = GridSpec(3, 8, 1.0)
    assert integrate(Field(g, np.ones(g.shape))) == 8.0
    assert integrate(g.zeros()) == 0.0


def test_integrate_gaussian_matches_summation_oracle():
    g = GridSpec(3, 32, 8.0)
    r2 = sum(x * x for x in g.mesh())
    v = np.exp(-r2 / 2)
    # oracle: plain Python summation of the same samples, scaled by h^3
    total = math.fsum(v.ravel().tolist()) * g.h**3
    assert integrate(Field(g, v)) == pytest.approx(total, rel=1e-12)
    # and the continuum value (2 pi)^(3/2) to quadrature accuracy
    assert integrate(Field(g, v)) == pytest.approx((2 * math.pi) ** 1.5, rel=1e-10)


def test_lp_norm_examples():
    g = GridSpec(1, 8, 1.0)
    assert lp_norm(Field(g, np.full(8, 2.0)), 1) == 4.0
    f = Field(g, np.array([0.0, -3.0, 1.0, 2.0, 0.5, 0.0, 0.0, 1.0]))
    assert lp_norm(f, math.inf) == 3.0
    with pytest.raises(ValueError):
        lp_norm(f, 0.5)
    assert lp_norm(g.zeros(), 2) == 0.0


def test_lp_norm_random_p3_oracle():
    rng = np.random.default_rng(0)
    g = GridSpec(2, 16, 1.5)
    v = rng.normal(size=g.shape)
    ref = (math.fsum((abs(x) ** 3 for x in v.ravel().tolist())) * g.h**2) ** (1 / 3)
    assert lp_norm(Field(g, v), 3) == pytest.approx(ref, rel=1e-12)


def test_lp_norm_large_p_does_not_overflow():
    g = GridSpec(1, 8, 1.0)
    f = Field(g, np.full(8, 1e10))
    assert lp_norm(f, 200) == pytest.approx(1e10 * 2 ** (1 / 200), rel=1e-12)


def test_lp_norm_monotone_in_p_for_unit_measure():
    # on a domain of measure 1 the normalised norms increase with p
    rng = np.random.default_rng(1)
    g = GridSpec(1, 64, 0.5)
    for _ in range(100):
        f = Field(g, rng.random(g.shape))
        vals = [lp_norm(f, p) for p in (1, 1.5, 2, 4, 8, math.inf)]
        assert all(a <= b * (1 + 1e-12) for a, b in zip(vals, vals[1:]))


def test_truncate_examples():
    g = GridSpec(1, 8, 1.0)
    up, lo = truncate_above(Field(g, np.full(8, 0.5)), 1.0)
    assert np.all(up.values == 0) and np.all(lo.values == 0.5)
    up, lo = truncate_above(Field(g, np.full(8, 3.0)), 1.0)
    assert np.all(up.values == 2) and np.all(lo.values == 1)
    with pytest.raises(ValueError):
        truncate_above(g.zeros(), -1.0)


@settings(max_examples=50, deadline=None)
@given(j=st.floats(0, 2), seed=st.integers(0, 2**31))
def test_truncate_reconstruction(j, seed):
    g = GridSpec(2, 8, 1.0)
    u = Field(g, np.random.default_rng(seed).random(g.shape) * 2)
    up, lo = truncate_above(u, j)
    # (u - j) + j may round by one ulp
    assert np.all(np.abs(up.values + lo.values - u.values) <= np.spacing(u.values))
    assert integrate(up) + integrate(lo) == pytest.approx(integrate(u), rel=1e-12)


def test_snapshot_layout_and_roundtrip(tmp_path):
    g = GridSpec(2, 8, 1.5)
    v = np.arange(64, dtype=float).reshape(g.shape) / 7
    data = snapshot_bytes(Field(g, v), 0.25)
    assert data[:4] == b"AGD1"
    assert struct.unpack_from("<IIdd", data, 4) == (2, 8, 1.5, 0.25)
    # row-major, little-endian doubles
    assert np.frombuffer(data[28:], "<f8")[1] == v[0, 1]
    write_snapshot(tmp_path / "s.agd", Field(g, v), 0.25)
    f, t = read_snapshot(tmp_path / "s.agd")
    assert t == 0.25 and f.spec == g
    np.testing.assert_array_equal(f.values, v)
    buf = io.BytesIO()
    write_snapshot(buf, Field(g, v), 1.0)
    buf.seek(0)
    assert read_snapshot(buf)[1] == 1.0


def test_snapshot_rejects_corrupt():
    g = GridSpec(1, 8, 1.0)
    data = snapshot_bytes(g.zeros(), 0.0)
    with pytest.raises(ValueError):
        parse_snapshot(b"XXXX" + data[4:])
    with pytest.raises(ValueError):
        parse_snapshot(data[:-8])
    with pytest.raises(ValueError):
        parse_snapshot(data[:10])
