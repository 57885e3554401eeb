import pytest

from branchforge.errors import ConfigViolation
from branchforge.params import Params, from_dict, require_valid, validate


def test_preset_is_valid():
    p = Params()
    assert validate(p) == []
    assert p.qbar == 2 and p.q == 1 and p.n == 2
    assert p.graph_decay == pytest.approx(2.54)
    assert p.holder_kappa == pytest.approx(0.0005)


def test_ball_depth_arithmetic():
    # sqrt(2)*4*2^(10-13) = 0.707... fits under 1, depth 10 does not
    p = Params()
    assert 2**0.5 * p.ball_scale * 2 ** (10 - p.start_depth) <= 1.0
    shallow = Params(start_depth=10)
    assert 2**0.5 * 4 * 2**0 == pytest.approx(5.656854249492381)
    assert "ball-depth" in validate(shallow)


def test_gamma0_window_edges():
    # gamma0 must clear five separate ceilings; poke each one
    assert "gamma0-window" in validate(Params(gamma0=0.21))          # > gamma
    assert "gamma0-window" in validate(Params(gamma0=0.25))          # > alpha_bar too
    assert "gamma0-window" in validate(Params(a=2.52, gamma0=0.04))  # > a - b
    ok = Params(gamma0=0.039)
    assert validate(ok) == []


def test_horn_ordering():
    assert "horn-ordering" in validate(Params(a=2.4))  # a <= b breaks the horn
    # b barely above 1 fails the separation growth margin
    assert "separation-growth" in validate(Params(b=1.001))


def test_sheet_and_branch_counts():
    assert "branch-order" in validate(Params(qbar=1))
    assert "sheet-count" in validate(Params(q=0))
    assert "codimension" in validate(Params(n=1))


def test_threshold_helpers_scale_correctly():
    p = Params()
    m0, d, ell = 1e-4, 0.25, 2**-14
    ex = p.excess_threshold(m0, d, ell)
    ht = p.height_threshold(m0, d, ell)
    assert ex == pytest.approx(
        p.excess_gate * m0 * d ** (2 * p.gamma0 - 2 + 2 * p.delta1) * ell ** (2 - 2 * p.delta1)
    )
    assert ht == pytest.approx(
        p.height_gate * m0**0.25 * d ** (p.gamma0 / 2 - p.beta2) * ell ** (1 + p.beta2)
    )
    # halving ell drops the excess threshold by about 4 and height by about 2
    assert p.excess_threshold(m0, d, ell / 2) / ex == pytest.approx(
        0.25 * 2 ** (2 * p.delta1), rel=1e-12
    )
    assert p.height_threshold(m0, d, ell / 2) / ht == pytest.approx(
        0.5 * 2 ** (-p.beta2), rel=1e-12
    )


def test_ball_radius():
    p = Params()
    assert p.ball_radius(2**-13) == pytest.approx(2**0.5 * 4 * 2**-13)


def test_from_dict_rejects_unknown_keys():
    with pytest.raises(ConfigViolation):
        from_dict({"qbar": 2, "nonsense": 1})


def test_from_dict_roundtrip_and_coercion():
    p = from_dict({"qbar": 3, "start_depth": 13, "b": 2.5, "a": 3.5})
    assert p.qbar == 3 and isinstance(p.qbar, int)
    assert p.a == 3.5


def test_require_valid_raises_with_relation_names():
    with pytest.raises(ConfigViolation) as err:
        require_valid(Params(qbar=1))
    assert "branch-order" in str(err.value)


def test_chart_regularity_ceiling():
    # alpha_bar must stay under 1/(2 qbar)
    assert "chart-regularity" in validate(Params(alpha_bar=0.3))
    assert validate(Params(qbar=2, alpha_bar=0.24)) == []
