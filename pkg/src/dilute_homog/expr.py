"""Scalar expressions of position used for boundary data and conductivity.

Expressions are plain strings in the variables ``x``, ``y``, ``z`` (aliases
``x1``, ``x2``, ``x3``) parsed with sympy and compiled to vectorised numpy
callables, e.g. ``"exp(x)"`` or ``"x**2 - y**2"``.
"""
from __future__ import annotations

from functools import cached_property

import numpy as np
import sympy as sp

_X, _Y, _Z = sp.symbols("x y z", real=True)
_LOCALS = {"x": _X, "y": _Y, "z": _Z, "x1": _X, "x2": _Y, "x3": _Z}


class ExpressionError(ValueError):
    pass


class ScalarExpr:
    """A position-dependent scalar compiled for array evaluation.

    Parameters
    ----------
    text : str
        Expression in ``x, y, z``.
    """

    def __init__(self, text: str | float | int):
        self.text = str(text)
        try:
            self.sym = sp.sympify(self.text, locals=_LOCALS)
        except (sp.SympifyError, SyntaxError, TypeError) as err:
            raise ExpressionError(f"cannot parse expression {self.text!r}: {err}") from err
        extra = self.sym.free_symbols - {_X, _Y, _Z}
        if extra:
            names = ", ".join(sorted(str(s) for s in extra))
            raise ExpressionError(f"expression {self.text!r} uses unknown symbols: {names}")
        self._f = sp.lambdify((_X, _Y, _Z), self.sym, "numpy")

    def __repr__(self) -> str:
        return f"ScalarExpr({self.text!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, ScalarExpr) and self.text == other.text

    def __hash__(self) -> int:
        return hash(self.text)

    # compiled callables do not pickle; workers rebuild them from the text
    def __reduce__(self):
        return (ScalarExpr, (self.text,))

    @property
    def is_constant(self) -> bool:
        return not self.sym.free_symbols

    @cached_property
    def _grad(self):
        return [sp.lambdify((_X, _Y, _Z), sp.diff(self.sym, v), "numpy") for v in (_X, _Y, _Z)]

    @cached_property
    def is_harmonic(self) -> bool:
        lap = sum(sp.diff(self.sym, v, 2) for v in (_X, _Y, _Z))
        return sp.simplify(lap) == 0

    def __call__(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        out = self._f(p[..., 0], p[..., 1], p[..., 2])
        return np.broadcast_to(np.asarray(out, dtype=float), p.shape[:-1]).copy()

    def gradient(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float)
        comps = []
        for g in self._grad:
            v = g(p[..., 0], p[..., 1], p[..., 2])
            comps.append(np.broadcast_to(np.asarray(v, dtype=float), p.shape[:-1]))
        return np.stack(comps, axis=-1)
