import json
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from mfrisk.model import (
    GroupSpec,
    HetModelParams,
    InvalidParams,
    ModelParams,
    SystemState,
    check,
    force_U,
    params_from_json,
    potential_V,
    validate,
)


def test_force_examples():
    assert force_U(0.0) == 0.0
    assert force_U(1.0) == 0.0
    assert force_U(0.5) == pytest.approx(-0.375, abs=1e-15)


def test_potential_examples():
    assert potential_V(0.0) == 0.0
    assert potential_V(1.0) == -0.25
    assert potential_V(-1.0) == -0.25


def test_parity_exact():
    y = np.random.default_rng(0).normal(scale=3.0, size=1000)
    assert np.array_equal(force_U(-y), -force_U(y))
    assert np.array_equal(potential_V(-y), potential_V(y))


def test_potential_derivative_is_force():
    y = np.linspace(-2.5, 2.5, 100)
    eps = 1e-5
    fd = (potential_V(y + eps) - potential_V(y - eps)) / (2 * eps)
    u = force_U(y)
    scale = np.maximum(np.abs(u), 1.0)
    assert np.max(np.abs(fd - u) / scale) < 1e-6


def test_validate_reference_params_ok():
    p = ModelParams(h=0.1, theta=10, sigma=1, n_agents=100, horizon=100, dt=0.02)
    assert validate(p) == []


def test_validate_sigma_zero():
    errs = validate(ModelParams(h=0.1, theta=10, sigma=0))
    assert any("sigma must be positive" in e for e in errs)


def test_validate_dt_exceeds_horizon():
    errs = validate(ModelParams(h=0.1, theta=1, sigma=1, horizon=100, dt=200))
    assert any("dt exceeds horizon" in e for e in errs)


def test_validate_collects_every_error():
    p = ModelParams(h=-1, theta=1, sigma=0, n_agents=0, horizon=1, dt=float("nan"))
    errs = validate(p)
    assert len(errs) >= 4
    with pytest.raises(InvalidParams) as exc:
        check(p)
    assert exc.value.errors == errs


def test_stability_guard():
    assert validate(ModelParams(h=0.1, theta=20, sigma=1, dt=0.02)) != []
    assert validate(ModelParams(h=0.1, theta=20, sigma=1, dt=0.01)) == []


def test_h_zero_allowed():
    assert validate(ModelParams(h=0.0, theta=2, sigma=1)) == []


def test_group_validation():
    assert validate(HetModelParams(0.1, 1.0, GroupSpec((1, 3), (0.5, 0.5)), dt=0.01)) == []
    bad = HetModelParams(0.1, 1.0, GroupSpec((1, 1), (0.5, 0.6)), dt=0.01)
    errs = validate(bad)
    assert any("sum to 1" in e for e in errs)
    assert any("distinct" in e for e in errs)


def test_mean_theta():
    assert GroupSpec((1, 3), (0.25, 0.75)).mean_theta() == 2.5


def test_empirical_mean():
    s = SystemState(np.array([-1.0, 0.0, 4.0]))
    assert s.empirical_mean() == 1.0
    assert s.n_agents == 3


finite = st.floats(min_value=0.01, max_value=50, allow_nan=False)


@given(h=st.floats(0, 1), theta=finite, sigma=finite, n=st.integers(1, 5000))
def test_json_roundtrip_homogeneous(h, theta, sigma, n):
    p = ModelParams(h=h, theta=theta, sigma=sigma, n_agents=n, horizon=50.0, dt=0.001)
    text = json.dumps(p.to_dict())
    assert params_from_json(json.loads(text)) == p
    assert json.dumps(params_from_json(json.loads(text)).to_dict()) == text


@given(st.lists(st.floats(0.1, 20), min_size=1, max_size=5, unique=True))
def test_json_roundtrip_heterogeneous(thetas):
    k = len(thetas)
    g = GroupSpec(tuple(thetas), tuple([1.0 / k] * k))
    p = HetModelParams(h=0.1, sigma=1.0, groups=g, n_agents=50, horizon=10.0, dt=0.005)
    back = params_from_json(json.loads(json.dumps(p.to_dict())))
    assert back == p
