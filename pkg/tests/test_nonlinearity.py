import numpy as np
import pytest

from geometry import ball
from nonlinearity import (
    CONDITIONS,
    Componentwise,
    CubicDecay,
    ExpressionVector,
    LinearDecay,
    Nonlinearity,
    NonlinearityEvaluationError,
    Rotation,
    check_condition,
    check_declared,
    condition_values,
    draw_samples,
    evaluate,
    finite_sweep,
    truncate,
)

DISK = ball((0.0, 0.0), 1.0)


def test_truncate_projects_onto_ball():
    y = np.array([[3.0, 4.0], [0.3, 0.4]])
    out = truncate(y, 1.0)
    assert np.allclose(out[0], [0.6, 0.8])
    assert np.allclose(out[1], y[1])
    with pytest.raises(ValueError):
        truncate(y, 0.0)


def test_truncated_nonlinearity_is_bounded():
    f = Nonlinearity(2, CubicDecay()).truncated(2.0)
    y = np.random.default_rng(0).uniform(-10, 10, size=(200, 2))
    values = f(np.zeros((200, 2)), y)
    assert np.all(np.linalg.norm(values, axis=1) <= 2.0 + 1e-12)
    assert f.truncated(None).level is None


def test_declared_conditions_are_closed_under_implication():
    f = Nonlinearity(1, LinearDecay(1.0), frozenset({"A5"}))
    assert f.alpha == 1.0
    assert f.declares("A4")
    assert not f.declares("A4prime")
    g = Nonlinearity(1, Componentwise.from_texts(["-y"]), frozenset({"monotone_componentwise"}))
    assert g.declares("A4doubleprime") and g.declares("A4")
    assert Nonlinearity(1).declares("A4prime")
    assert not Nonlinearity(1).declares("A4doubleprime", explicit=True)
    assert Nonlinearity(1, declared_conditions=frozenset({"A5"}), alpha=1.0).declares("A4", explicit=True)
    assert f.declares("A5", explicit=True)


def test_construction_errors():
    with pytest.raises(ValueError):
        Nonlinearity(3, Rotation())
    with pytest.raises(ValueError):
        Nonlinearity(2, Componentwise.from_texts(["-y"]))
    with pytest.raises(ValueError):
        Nonlinearity(1, Componentwise.from_texts(["-y"]), frozenset({"A5"}))
    with pytest.raises(ValueError):
        Nonlinearity(1, declared_conditions=frozenset({"A6"}))


def test_rotation_satisfies_angle_but_not_sign_condition():
    f = Nonlinearity(2, Rotation(), frozenset({"A4"}))
    assert check_condition(f, "A4", DISK, 5000).holds_on_sample
    report = check_condition(f, "A4doubleprime", DISK, 5000)
    assert not report.holds_on_sample
    assert report.worst_violation.value > 0
    assert "VIOLATED" in report.to_line()


def test_linear_decay_conditions():
    f = Nonlinearity(2, LinearDecay(0.5), frozenset({"A5", "A4prime"}))
    for condition in ("A4", "A5", "A4prime", "A4doubleprime", "monotone_componentwise"):
        assert check_condition(f, condition, DISK, 5000).holds_on_sample, condition
    assert not check_condition(f, "A5", DISK, 5000, alpha=1.0).holds_on_sample


def test_cubic_decay_is_monotone():
    f = Nonlinearity(2, CubicDecay())
    for condition in ("A4", "A4prime", "A4doubleprime", "monotone_componentwise"):
        assert check_condition(f, condition, DISK, 5000).holds_on_sample, condition


def test_growth_violates_angle_condition():
    f = Nonlinearity(1, Componentwise.from_texts(["y^3"]), frozenset({"A4"}))
    reports = check_declared(f, DISK, 2000)
    assert [r.condition for r in reports] == ["A4"]
    assert not reports[0].holds_on_sample


def test_expression_vector_uses_all_components():
    f = Nonlinearity(2, ExpressionVector.from_texts(["y2 - y1", "-y1 - y2"]))
    value = evaluate(f, [0.1, 0.1], [1.0, 2.0])
    assert np.allclose(value, [1.0, -3.0])
    assert check_condition(f, "A4", DISK, 2000).holds_on_sample


def test_evaluate_rejects_non_finite_values():
    f = Nonlinearity(1, Componentwise.from_texts(["1 / y"]))
    with pytest.raises(NonlinearityEvaluationError):
        evaluate(f, [0.0, 0.0], 0.0)
    g = Nonlinearity(1, Componentwise.from_texts(["sqrt(y)"]))
    with pytest.raises(NonlinearityEvaluationError):
        finite_sweep(g, DISK, 500)


def test_evaluate_scalar_for_single_component():
    f = Nonlinearity(1, LinearDecay(2.0))
    assert evaluate(f, [0.0, 0.0], 1.5) == pytest.approx(-3.0)


CATALOG = [
    Nonlinearity(2),
    Nonlinearity(2, LinearDecay(0.5)),
    Nonlinearity(2, Rotation()),
    Nonlinearity(2, CubicDecay()),
    Nonlinearity(2, Componentwise.from_texts(["-y - y^3", "-y"])),
    Nonlinearity(2, ExpressionVector.from_texts(["y2 - y1", "-y1 - y2"])),
    Nonlinearity(2, ExpressionVector.from_texts(["y1 * y2 - y1", "x1 * y1 - 0.5 * y2"])),
]


def test_truncate_is_non_expansive():
    rng = np.random.default_rng(3)
    y = rng.normal(scale=4.0, size=(5000, 3))
    z = rng.normal(scale=4.0, size=(5000, 3))
    for r in (0.1, 1.0, 5.0):
        gap = np.linalg.norm(truncate(y, r) - truncate(z, r), axis=1)
        assert np.all(gap <= np.linalg.norm(y - z, axis=1) + 1e-12)


def test_truncate_fixes_exactly_the_ball():
    rng = np.random.default_rng(4)
    y = rng.normal(scale=2.0, size=(5000, 2))
    for r in (0.5, 2.0, 3.0):
        unchanged = np.all(truncate(y, r) == y, axis=1)
        assert np.array_equal(unchanged, np.linalg.norm(y, axis=1) <= r)


@pytest.mark.parametrize("f", CATALOG, ids=lambda f: type(f.kind).__name__)
def test_truncation_keeps_the_angle(f):
    samples = draw_samples(2, DISK, 4000, box_radius=10.0, seed=5)
    raw = f(samples.xs, samples.ys)
    inner = np.sum(raw * samples.ys, axis=1)
    scale = 1e-12 * max(1.0, float(np.max(np.abs(raw) * np.abs(samples.ys))))
    for level in (0.5, 4.0, 50.0):
        truncated = f.truncated(level)(samples.xs, samples.ys)
        truncated_inner = np.sum(truncated * samples.ys, axis=1)
        assert np.all(truncated_inner[inner <= 0] <= scale)


def test_conditions_share_one_draw():
    first = draw_samples(2, DISK, 50, seed=7)
    second = draw_samples(2, DISK, 50, seed=7)
    assert np.array_equal(first.xs, second.xs)
    assert np.array_equal(first.ys, second.ys)
    f = Nonlinearity(2, LinearDecay(1.0), frozenset(CONDITIONS[:4]))
    together = check_declared(f, DISK, 50, seed=7)
    for report in together:
        alone = check_condition(f, report.condition, DISK, 50, seed=7)
        assert alone.worst_violation.value == report.worst_violation.value
        assert np.array_equal(alone.worst_violation.x, report.worst_violation.x)


@pytest.mark.parametrize("f", CATALOG, ids=lambda f: type(f.kind).__name__)
def test_stronger_conditions_imply_the_angle_condition_per_sample(f):
    samples = draw_samples(2, DISK, 4000, seed=9)
    a4, a4_tol = condition_values(f, "A4", samples)
    a5, a5_tol = condition_values(f, "A5", samples, alpha=0.5)
    a4pp, a4pp_tol = condition_values(f, "A4doubleprime", samples)
    assert np.all(a4[a5 <= a5_tol] <= a4_tol)
    assert np.all(a4[a4pp <= a4pp_tol] <= a4_tol)


def test_rotation_verdicts_on_the_same_samples():
    f = Nonlinearity(2, Rotation(), frozenset({"A4", "A4doubleprime"}))
    a4, a4pp = check_declared(f, DISK, 5000, seed=2)
    assert a4.holds_on_sample
    assert not a4pp.holds_on_sample
