import json
import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from graphtune.space import (
    FULL_SHAPE,
    ConfigSpace,
    ParamConfig,
    config_to_unit,
    geometric_grid,
    nearest_in_log,
)


def test_full_grid_cardinalities_and_bounds():
    s = ConfigSpace.full()
    assert s.shape == FULL_SHAPE == (20, 13, 94)
    assert (s.efc_grid[0], s.efc_grid[-1]) == (20, 800)
    assert (s.m_grid[0], s.m_grid[-1]) == (4, 100)
    assert (s.efs_grid[0], s.efs_grid[-1]) == (10, 5000)
    assert len(s.construction_configs()) == 260
    assert len(s) == 24440


def test_reduced_grid():
    s = ConfigSpace.reduced()
    assert s.shape == (5, 4, 12)
    assert len(s.construction_configs()) == 20


@given(st.integers(1, 60), st.integers(1, 400), st.integers(0, 400))
def test_geometric_grid_strict_and_bounded(n, lo, extra):
    hi = lo + n - 1 + extra
    g = geometric_grid(lo, hi, n)
    assert len(g) == n
    assert all(b > a for a, b in zip(g, g[1:]))
    assert g[0] >= lo and g[-1] <= hi
    if n > 1:
        assert g[0] == lo and g[-1] == hi


def test_geometric_grid_too_dense():
    with pytest.raises(ValueError):
        geometric_grid(4, 6, 5)


def test_param_config_ranges():
    ParamConfig(20, 4, 10)
    for bad in [(19, 4, 10), (20, 101, 10), (20, 4, 5001)]:
        with pytest.raises(ValueError):
            ParamConfig(*bad)


def test_space_rejects_unsorted():
    with pytest.raises(ValueError):
        ConfigSpace((20, 20), (4,), (10,))


def test_space_file_round_trip(tmp_path):
    p = tmp_path / "g.json"
    p.write_text(json.dumps({"efC": [20, 40], "M": [4, 8], "efS": [10, 20, 40]}))
    s = ConfigSpace.from_name(str(p))
    assert s.shape == (2, 2, 3)
    assert s.to_dict() == json.loads(p.read_text())


def test_config_to_unit_endpoints():
    assert np.allclose(config_to_unit(ParamConfig(20, 4, 10)), 0.0)
    assert np.allclose(config_to_unit(ParamConfig(800, 100, 5000)), 1.0)
    mid = config_to_unit(ParamConfig(int(round(math.sqrt(20 * 800))), 52, 224))
    assert abs(mid[1] - 0.5) < 1e-12
    assert abs(mid[0] - 0.5) < 0.01 and abs(mid[2] - 0.5) < 0.01


def test_nearest_in_log_and_snap():
    assert nearest_in_log([10, 100], 31) == 10
    assert nearest_in_log([10, 100], 32) == 100
    s = ConfigSpace.reduced()
    assert s.snap_efs_up(11) == s.efs_grid[1]
    assert s.snap_efs_up(10**6) == s.efs_grid[-1]
