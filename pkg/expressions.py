"""Arithmetic expressions for densities and nonlinearities, parsed with sympy.

``^`` and ``**`` both mean power. Names are coordinates ``x1..xd``, unknown
components ``y1..yn`` (or ``y`` for a componentwise map), ``r`` for |x|, and
the constants ``pi`` and ``e``. Functions: exp, sin, cos, abs, sqrt.
Parsed expressions are compiled with ``sympy.lambdify`` and evaluated on
numpy arrays.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from tokenize import TokenError
from typing import Callable

import numpy as np
import sympy
from sympy.core.function import AppliedUndef
from sympy.parsing.sympy_parser import auto_number, auto_symbol, convert_xor, parse_expr

__all__ = ["Expression", "ExpressionError", "parse_expression"]


class ExpressionError(ValueError):
    """Malformed expression or reference to an unknown name."""


FUNCTIONS = {
    "exp": sympy.exp,
    "sin": sympy.sin,
    "cos": sympy.cos,
    "abs": sympy.Abs,
    "sqrt": sympy.sqrt,
}
CONSTANTS = {"pi": sympy.pi, "e": sympy.E}

TRANSFORMATIONS = (auto_symbol, auto_number, convert_xor)
# Only what the transformations emit; every other name becomes a Symbol or an undefined Function.
_GLOBALS = {
    "__builtins__": {},
    "Integer": sympy.Integer,
    "Float": sympy.Float,
    "Rational": sympy.Rational,
    "Symbol": sympy.Symbol,
    "Function": sympy.Function,
}


@dataclass(frozen=True)
class Expression:
    """A parsed expression; evaluate it on arrays of points."""

    text: str
    symbolic: sympy.Expr = field(repr=False, compare=False)
    names: frozenset = field(repr=False, compare=False)
    function: Callable = field(repr=False, compare=False)

    @property
    def arguments(self) -> tuple[str, ...]:
        return tuple(sorted(self.names))

    def check_names(self, allowed: set[str]) -> None:
        unknown = sorted(self.names - set(allowed))
        if unknown:
            raise ExpressionError(
                f"expression {self.text!r} uses unknown name(s) {unknown}; allowed: {sorted(allowed)}"
            )

    def __call__(self, x: np.ndarray, y: np.ndarray | None = None, own: np.ndarray | None = None) -> np.ndarray:
        """Evaluate at points ``x`` of shape (m, d), with optional unknowns ``y`` of shape (m, n)."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        env: dict[str, np.ndarray] = {f"x{i + 1}": x[:, i] for i in range(x.shape[1])}
        env["r"] = np.linalg.norm(x, axis=1)
        if y is not None:
            y = np.atleast_2d(np.asarray(y, dtype=float))
            env.update({f"y{i + 1}": y[:, i] for i in range(y.shape[1])})
        if own is not None:
            env["y"] = np.asarray(own, dtype=float)
        missing = self.names - env.keys()
        if missing:
            raise ExpressionError(f"expression {self.text!r} needs values for {sorted(missing)}")
        with np.errstate(all="ignore"):
            value = self.function(*(env[name] for name in self.arguments))
        return np.broadcast_to(np.asarray(value, dtype=float), (x.shape[0],)).copy()


def parse_expression(text: str) -> Expression:
    """Parse ``text`` into a vectorised expression.

    Inputs:
        text: Expression source, e.g. ``"1 + x1^2"``.
    Returns:
        Expression object that evaluates on numpy arrays.
    """
    if not isinstance(text, str) or not text.strip():
        raise ExpressionError("expression must be a non-empty string")
    local_dict = {**FUNCTIONS, **CONSTANTS}
    try:
        symbolic = parse_expr(
            text.strip(), local_dict=local_dict, global_dict=dict(_GLOBALS), transformations=TRANSFORMATIONS
        )
    except (SyntaxError, TokenError, TypeError, NameError, AttributeError, ValueError) as exc:
        raise ExpressionError(f"cannot parse expression {text!r}: {exc}") from exc
    if not isinstance(symbolic, sympy.Expr):
        raise ExpressionError(f"expression {text!r} is not arithmetic")
    undefined = sorted(str(f.func) for f in symbolic.atoms(AppliedUndef))
    if undefined:
        raise ExpressionError(f"unknown function(s) {undefined} in {text!r}; known: {sorted(FUNCTIONS)}")
    if symbolic.has(sympy.I, sympy.zoo, sympy.nan):
        raise ExpressionError(f"expression {text!r} is not real-valued")
    symbols = {s.name: s for s in symbolic.free_symbols}
    names = frozenset(symbols)
    function = sympy.lambdify([symbols[n] for n in sorted(names)], symbolic, modules="numpy")
    return Expression(text, symbolic, names, function)
