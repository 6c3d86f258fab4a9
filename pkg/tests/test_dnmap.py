import json
import math

import numpy as np
import pytest

from pipl.dnmap import add_noise, load_measurement, measure, passive_map, save_measurement
from pipl.grid import (
    BoundaryPortion,
    Field,
    GridError,
    SpaceTimeGrid,
    field_from_function,
)
from pipl.model import Nonlinearity


def grid1d(nx=65, nt=32, T=0.1):
    return SpaceTimeGrid.make([0.0], [1.0], [nx], nt, T)


def heat_field(grid):
    return field_from_function(
        grid, lambda x, t: np.exp(-math.pi**2 * t) * np.sin(math.pi * x), "Q"
    )


LEFT = BoundaryPortion.named("left")


def test_measure_heat_oracle_left_end():
    g = grid1d(nx=129)
    m = measure(heat_field(g), LEFT)
    # outward normal at x=0 is -1: d_nu u = -pi exp(-pi^2 t)
    expected = -math.pi * np.exp(-math.pi**2 * g.times())
    assert np.max(np.abs(m.values[:, 0] - expected)) < 2e-3


def test_measure_zero_field():
    g = grid1d(nx=17, nt=4)
    z = Field(g, np.zeros((g.n_levels, *g.nx)), "Q")
    assert np.all(measure(z, BoundaryPortion.full()).values == 0.0)


def test_measure_linearity_exact():
    g = grid1d(nx=33, nt=8)
    u1 = field_from_function(g, lambda x, t: np.sin(x) + t, "Q")
    u2 = field_from_function(g, lambda x, t: np.cos(2 * x) * (1 + t), "Q")
    a, b = 2.5, -1.25
    lhs = measure(Field(g, a * u1.values + b * u2.values, "Q"), BoundaryPortion.full())
    m1 = measure(u1, BoundaryPortion.full())
    m2 = measure(u2, BoundaryPortion.full())
    assert np.allclose(lhs.values, a * m1.values + b * m2.values, rtol=1e-13, atol=1e-13)


def test_measure_refinement_order():
    errs, hs = [], []
    for nx in (33, 65, 129):
        g = grid1d(nx=nx)
        m = measure(heat_field(g), LEFT)
        expected = -math.pi * np.exp(-math.pi**2 * g.times())
        errs.append(np.max(np.abs(m.values[:, 0] - expected)))
        hs.append(g.h[0])
    rate = np.polyfit(np.log(hs), np.log(errs), 1)[0]
    assert rate >= 1.8


def test_empty_portion_rejected():
    g = grid1d(nx=17, nt=4)
    u = heat_field(g)
    with pytest.raises(GridError):
        measure(u, BoundaryPortion.named())


def test_portion_restriction_consistency():
    g2 = SpaceTimeGrid.make([0, 0], [1, 1], [9, 9], 4, 0.1)
    u = field_from_function(g2, lambda x, y, t: np.sin(x) * np.cos(y) + t * x, "Q")
    full = measure(u, BoundaryPortion.full())
    sub = measure(u, BoundaryPortion.named("left", "bottom"))
    # every (face, node) entry of the sub-portion appears identically in full
    key_full = {
        (face, mi): full.values[:, j]
        for j, (face, mi) in enumerate(zip(full.portion.face_of_node, full.portion.multi_indices))
    }
    for j, (face, mi) in enumerate(zip(sub.portion.face_of_node, sub.portion.multi_indices)):
        assert np.array_equal(sub.values[:, j], key_full[(face, mi)])


def test_passive_map_zero_config_is_zero():
    g = grid1d(nx=17, nt=8)
    z = Field(g, np.zeros(g.nx), "Omega")
    m = passive_map(g, None, Nonlinearity.parse("u^2"), z, BoundaryPortion.full())
    assert np.all(m.values == 0.0)


def test_passive_map_heat_oracle():
    g = grid1d(nx=129, nt=256)
    g0 = field_from_function(g, lambda x: np.sin(math.pi * x), "Omega")
    m = passive_map(g, None, Nonlinearity.zero(), g0, LEFT, scheme="cn")
    expected = -math.pi * np.exp(-math.pi**2 * g.times())
    assert np.max(np.abs(m.values[:, 0] - expected)) < 5e-3


def test_noise_zero_level_identity():
    g = grid1d(nx=17, nt=4)
    m = measure(heat_field(g), LEFT)
    m2 = add_noise(m, "gaussian-relative", 0.0, seed=42)
    assert np.array_equal(m.values, m2.values)


def test_noise_reproducible_and_scaled():
    g = grid1d(nx=33, nt=64)
    m = measure(heat_field(g), BoundaryPortion.full())
    a = add_noise(m, "gaussian-relative", 0.01, seed=5)
    b = add_noise(m, "gaussian-relative", 0.01, seed=5)
    assert np.array_equal(a.values, b.values)
    rel = (
        measureish_l2(a.values - m.values, m) / measureish_l2(m.values, m)
    )
    assert 0.005 <= rel <= 0.02


def measureish_l2(vals, m):
    per_level = (np.abs(vals) ** 2) @ m.portion.weights
    return float(np.sqrt(np.dot(m.grid.time_weights(), per_level)))


def test_noise_two_seeds_differ():
    g = grid1d(nx=33, nt=16)
    m = measure(heat_field(g), BoundaryPortion.full())
    a = add_noise(m, "gaussian-absolute", 0.1, seed=1)
    b = add_noise(m, "gaussian-absolute", 0.1, seed=2)
    assert not np.array_equal(a.values, b.values)
    assert abs(np.std(a.values - m.values) - np.std(b.values - m.values)) < 0.02


def test_measurement_roundtrip(tmp_path):
    g = grid1d(nx=17, nt=6)
    m = add_noise(measure(heat_field(g), LEFT), "gaussian-relative", 0.05, seed=9)
    csv = tmp_path / "dn.csv"
    sidecar = tmp_path / "dn.json"
    save_measurement(m, csv, sidecar)
    back = load_measurement(g, LEFT, csv)
    assert np.allclose(back.values, m.values, rtol=0, atol=0)
    meta = json.loads(sidecar.read_text())
    assert meta["noise"]["seed"] == 9
    assert meta["grid_digest"] == g.digest()
