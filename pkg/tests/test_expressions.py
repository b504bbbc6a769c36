import numpy as np
import pytest

from expressions import ExpressionError, parse_expression

POINTS = np.array([[0.0, 0.0], [0.3, 0.4], [1.0, -2.0]])


def test_constant_broadcasts_to_every_point():
    assert np.array_equal(parse_expression("1").__call__(POINTS), np.ones(3))


def test_coordinates_and_radius():
    expr = parse_expression("sqrt(x1^2 + x2**2) - r")
    assert np.allclose(expr(POINTS), 0.0)
    assert expr.names == frozenset({"x1", "x2", "r"})


def test_precedence():
    x = POINTS[:1]
    assert parse_expression("-2^2")(x)[0] == pytest.approx(-4.0)
    assert parse_expression("2^3^2")(x)[0] == pytest.approx(512.0)
    assert parse_expression("1 + 2 * 3 - 4 / 2")(x)[0] == pytest.approx(5.0)
    assert parse_expression("(1 + 2) * 3")(x)[0] == pytest.approx(9.0)
    assert parse_expression("2 * pi")(x)[0] == pytest.approx(2 * np.pi)


def test_functions():
    x = POINTS[:1]
    assert parse_expression("exp(0) + cos(0) + sin(0) + abs(-3)")(x)[0] == pytest.approx(5.0)


def test_unknowns_by_index_and_own_value():
    y = np.array([[1.0, 2.0], [3.0, 4.0], [-1.0, 0.5]])
    expr = parse_expression("y1 * y2 + x1")
    assert np.allclose(expr(POINTS, y), y[:, 0] * y[:, 1] + POINTS[:, 0])
    own = parse_expression("-y - y^3")
    assert np.allclose(own(POINTS, own=y[:, 0]), -y[:, 0] - y[:, 0] ** 3)


def test_check_names():
    expr = parse_expression("x1 + y3")
    expr.check_names({"x1", "x2", "y1", "y2", "y3"})
    with pytest.raises(ExpressionError, match="unknown name"):
        expr.check_names({"x1", "x2", "y1", "y2"})


@pytest.mark.parametrize("text", ["", "1 +", "(1 + 2", "2 $ 3", "foo(1)", "1 2"])
def test_malformed_expressions(text):
    with pytest.raises(ExpressionError):
        parse_expression(text)


def test_missing_values_are_reported():
    with pytest.raises(ExpressionError, match="needs values"):
        parse_expression("y1 + 1")(POINTS)


def test_unknown_function_is_named():
    with pytest.raises(ExpressionError, match="unknown function"):
        parse_expression("gamma(x1) + 1")


@pytest.mark.parametrize("text", ["sqrt(-1)", "1/0", "x1 > 0"])
def test_non_real_expressions_are_rejected(text):
    with pytest.raises(ExpressionError):
        parse_expression(text)


def test_symbolic_form_is_kept():
    expr = parse_expression("x1^2 + 2*x1 + 1")
    x1 = expr.symbolic.free_symbols.pop()
    assert (expr.symbolic - (x1 + 1) ** 2).expand() == 0
    assert expr.arguments == ("x1",)
