"""Small arithmetic-expression language for user-supplied coefficients.

Grammar: numbers, ``pi``, ``e``, the variables ``t``, ``x``, ``y``, the
operators ``+ - * /`` (unary minus included) and the functions ``min``,
``max``, ``sqrt``, ``tanh``, ``abs``.  A bracketed list of expressions
(``[[1, 0], [0, 1]]``) builds a vector or matrix.  Parsing goes through the
stdlib :mod:`ast` with a node whitelist; evaluation is vectorized numpy.
"""
from __future__ import annotations

import ast
from dataclasses import dataclass

import numpy as np


class ExpressionError(ValueError):
    pass


_FUNCS = {
    "min": np.minimum,
    "max": np.maximum,
    "sqrt": np.sqrt,
    "tanh": np.tanh,
    "abs": np.abs,
}
_CONSTS = {"pi": np.pi, "e": np.e}
_VARS = ("t", "x", "y")
_BINOPS = {ast.Add: np.add, ast.Sub: np.subtract, ast.Mult: np.multiply, ast.Div: np.divide}


def _check(node: ast.AST, text: str) -> None:
    if isinstance(node, ast.Expression):
        return _check(node.body, text)
    if isinstance(node, ast.Constant):
        if not isinstance(node.value, (int, float)) or isinstance(node.value, bool):
            raise ExpressionError(f"only numeric constants allowed in {text!r}")
        return
    if isinstance(node, ast.Name):
        if node.id not in _VARS and node.id not in _CONSTS:
            raise ExpressionError(f"unknown name {node.id!r} in {text!r}")
        return
    if isinstance(node, ast.BinOp):
        if type(node.op) not in _BINOPS:
            raise ExpressionError(f"operator {type(node.op).__name__} not allowed in {text!r}")
        _check(node.left, text)
        _check(node.right, text)
        return
    if isinstance(node, ast.UnaryOp) and isinstance(node.op, (ast.USub, ast.UAdd)):
        return _check(node.operand, text)
    if isinstance(node, ast.Call):
        if not isinstance(node.func, ast.Name) or node.func.id not in _FUNCS or node.keywords:
            raise ExpressionError(f"unsupported call in {text!r}")
        want = 2 if node.func.id in ("min", "max") else 1
        if len(node.args) != want:
            raise ExpressionError(f"{node.func.id} takes {want} argument(s) in {text!r}")
        for a in node.args:
            _check(a, text)
        return
    if isinstance(node, (ast.List, ast.Tuple)):
        for el in node.elts:
            _check(el, text)
        return
    raise ExpressionError(f"unsupported syntax {type(node).__name__} in {text!r}")


def _eval(node: ast.AST, env: dict):
    if isinstance(node, ast.Constant):
        return float(node.value)
    if isinstance(node, ast.Name):
        return env[node.id] if node.id in env else _CONSTS[node.id]
    if isinstance(node, ast.BinOp):
        return _BINOPS[type(node.op)](_eval(node.left, env), _eval(node.right, env))
    if isinstance(node, ast.UnaryOp):
        v = _eval(node.operand, env)
        return -v if isinstance(node.op, ast.USub) else v
    if isinstance(node, ast.Call):
        return _FUNCS[node.func.id](*[_eval(a, env) for a in node.args])
    if isinstance(node, (ast.List, ast.Tuple)):
        return [_eval(el, env) for el in node.elts]
    raise ExpressionError("unreachable")  # pragma: no cover


@dataclass(frozen=True)
class Expression:
    """Parsed expression; call with ``t`` (scalar or (n,)) and ``x`` of shape (n, d)."""

    text: str
    tree: ast.Expression
    shape: tuple[int, ...]

    @property
    def uses_time(self) -> bool:
        return any(isinstance(n, ast.Name) and n.id == "t" for n in ast.walk(self.tree))

    def uses(self, name: str) -> bool:
        return any(isinstance(n, ast.Name) and n.id == name for n in ast.walk(self.tree))

    def __call__(self, t, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n = x.shape[0]
        env = {"t": np.broadcast_to(np.asarray(t, dtype=float), (n,)), "x": x[:, 0]}
        if x.shape[1] > 1:
            env["y"] = x[:, 1]
        val = _eval(self.tree.body, env)
        return _stack(val, n)


def _stack(val, n):
    if isinstance(val, list):
        return np.stack([_stack(v, n) for v in val], axis=1)
    return np.broadcast_to(np.asarray(val, dtype=float), (n,)).copy()


def _shape(node) -> tuple[int, ...]:
    if isinstance(node, (ast.List, ast.Tuple)):
        inner = {_shape(el) for el in node.elts}
        if len(inner) != 1:
            raise ExpressionError("ragged list expression")
        return (len(node.elts),) + inner.pop()
    return ()


def parse(text: str, dimension: int = 1) -> Expression:
    """Parse and validate an expression string."""
    try:
        tree = ast.parse(text.strip(), mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc.msg}") from None
    _check(tree, text)
    expr = Expression(text, tree, _shape(tree.body))
    if dimension == 1 and expr.uses("y"):
        raise ExpressionError(f"'y' used in a one-dimensional expression {text!r}")
    return expr
