"""Safe arithmetic expression strings for run-config callables.

Config files describe densities and boundary data as expressions in x1, x2
(polynomials and powers; also exp/sin/cos/sqrt for convenience).  Parsed once
through the ast module with a whitelist, compiled to a vectorized callable.
"""

from __future__ import annotations

import ast
import operator
from typing import Callable

import numpy as np

__all__ = ["compile_expression", "ExpressionError"]


class ExpressionError(ValueError):
    pass


_BINOPS = {
    ast.Add: operator.add,
    ast.Sub: operator.sub,
    ast.Mult: operator.mul,
    ast.Div: operator.truediv,
    ast.Pow: operator.pow,
}
_UNARY = {ast.UAdd: operator.pos, ast.USub: operator.neg}
_FUNCS = {"exp": np.exp, "sin": np.sin, "cos": np.cos, "sqrt": np.sqrt,
          "abs": np.abs, "log": np.log}


def compile_expression(text: str) -> Callable:
    """Compile an expression in x1, x2 into a vectorized callable f(x1, x2)."""
    try:
        tree = ast.parse(text, mode="eval")
    except SyntaxError as exc:
        raise ExpressionError(f"cannot parse {text!r}: {exc}") from exc

    def ev(node, env):
        if isinstance(node, ast.Expression):
            return ev(node.body, env)
        if isinstance(node, ast.Constant):
            if isinstance(node.value, (int, float)):
                return float(node.value)
            raise ExpressionError(f"non-numeric constant {node.value!r}")
        if isinstance(node, ast.Name):
            if node.id in env:
                return env[node.id]
            raise ExpressionError(f"unknown name {node.id!r} (use x1, x2)")
        if isinstance(node, ast.BinOp) and type(node.op) in _BINOPS:
            return _BINOPS[type(node.op)](ev(node.left, env), ev(node.right, env))
        if isinstance(node, ast.UnaryOp) and type(node.op) in _UNARY:
            return _UNARY[type(node.op)](ev(node.operand, env))
        if isinstance(node, ast.Call) and isinstance(node.func, ast.Name) \
                and node.func.id in _FUNCS and not node.keywords:
            return _FUNCS[node.func.id](*(ev(a, env) for a in node.args))
        raise ExpressionError(f"disallowed syntax in {text!r}: {ast.dump(node)}")

    def fn(x1, x2):
        out = ev(tree, {"x1": np.asarray(x1, float), "x2": np.asarray(x2, float)})
        return out + 0.0 * np.asarray(x1, float)

    fn(0.5, -0.5)   # fail fast on bad expressions
    fn.source = text
    return fn
