"""Tiny closed-form expression language for scenario files and feature bounds.

The whole grammar:

    expr  := number | name | ( expr ) | -expr | expr + expr | expr - expr
           | expr * expr | expr / expr | func( expr [, expr] )
    func  := pow | exp | log | sin | cos | min | max

``pow``, ``min`` and ``max`` take two arguments, the rest take one.
``a ** b`` is accepted as a synonym for ``pow(a, b)``. Names are bound to
feature values at evaluation time and may be numpy arrays; evaluation is
elementwise (``min``/``max`` map to ``np.minimum``/``np.maximum``).

Parsed expressions round-trip: ``str(Expression.parse(s))`` is a canonical
form that parses back to an expression with identical values.
"""

from __future__ import annotations

import ast

import numpy as np

from .errors import ExpressionError

_UNARY_FUNCS = {
    "exp": np.exp,
    "log": np.log,
    "sin": np.sin,
    "cos": np.cos,
}
_BINARY_FUNCS = {
    "pow": np.power,
    "min": np.minimum,
    "max": np.maximum,
}
_BIN_OPS = {
    ast.Add: np.add,
    ast.Sub: np.subtract,
    ast.Mult: np.multiply,
    ast.Div: np.divide,
}


class Expression:
    """A validated closed-form expression over named features."""

    __slots__ = ("source", "names", "_tree")

    def __init__(self, source: str, tree: ast.expression, names: frozenset[str]):
        self.source = source
        self._tree = tree
        self.names = names

    @classmethod
    def parse(cls, source) -> "Expression":
        if isinstance(source, Expression):
            return source
        if isinstance(source, (int, float)) and not isinstance(source, bool):
            source = repr(float(source))
        if not isinstance(source, str):
            raise ExpressionError(f"expression must be a string, got {type(source).__name__}")
        try:
            tree = ast.parse(source, mode="eval")
        except SyntaxError as e:
            raise ExpressionError(f"cannot parse expression {source!r}: {e.msg}") from None
        names: set[str] = set()
        _validate(tree.body, names)
        canonical = ast.unparse(tree.body)
        return cls(canonical, tree.body, frozenset(names))

    def evaluate(self, env=None):
        """Evaluate with feature values from ``env`` (mapping name -> value)."""
        env = {} if env is None else env
        missing = self.names.difference(env)
        if missing:
            raise ExpressionError(
                f"expression {self.source!r} needs values for {sorted(missing)}"
            )
        return _eval(self._tree, env)

    def __call__(self, env=None):
        return self.evaluate(env)

    def __str__(self) -> str:
        return self.source

    def __repr__(self) -> str:
        return f"Expression({self.source!r})"

    def __eq__(self, other) -> bool:
        return isinstance(other, Expression) and self.source == other.source

    def __hash__(self) -> int:
        return hash(self.source)


def _validate(node, names: set[str]) -> None:
    if isinstance(node, ast.Constant):
        if isinstance(node.value, bool) or not isinstance(node.value, (int, float)):
            raise ExpressionError(f"only numeric constants allowed, got {node.value!r}")
        return
    if isinstance(node, ast.Name):
        names.add(node.id)
        return
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        _validate(node.operand, names)
        return
    if isinstance(node, ast.BinOp):
        if not isinstance(node.op, (*_BIN_OPS, ast.Pow)):
            raise ExpressionError(f"operator {type(node.op).__name__} not in grammar")
        _validate(node.left, names)
        _validate(node.right, names)
        return
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.keywords:
            raise ExpressionError("only plain calls of grammar functions are allowed")
        fname = node.func.id
        if fname in _UNARY_FUNCS:
            arity = 1
        elif fname in _BINARY_FUNCS:
            arity = 2
        else:
            raise ExpressionError(f"unknown function {fname!r}")
        if len(node.args) != arity:
            raise ExpressionError(
                f"{fname}() takes {arity} argument(s), got {len(node.args)}"
            )
        for a in node.args:
            _validate(a, names)
        return
    raise ExpressionError(f"syntax {type(node).__name__} not in grammar")


def _eval(node, env):
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        return env[node.id]
    if isinstance(node, ast.UnaryOp):
        v = _eval(node.operand, env)
        return -v if isinstance(node.op, ast.USub) else +v
    if isinstance(node, ast.BinOp):
        left = _eval(node.left, env)
        right = _eval(node.right, env)
        if isinstance(node.op, ast.Pow):
            return np.power(left, right)
        return _BIN_OPS[type(node.op)](left, right)
    # _validate guarantees this is a known call
    fn = node.func.id
    args = [_eval(a, env) for a in node.args]
    return (_UNARY_FUNCS.get(fn) or _BINARY_FUNCS[fn])(*args)
