"""Finite-difference cases, one scalar-valued graph per autodiff op."""

import numpy as np

from dama import tensor as T

_rng = np.random.default_rng(1234)


def _normal(*shape):
    return _rng.standard_normal(shape)


def _weights(shape, seed):
    return np.random.default_rng(seed).standard_normal(shape)


_COND = _weights((3, 4), 99) > 0

OP_CASES = {
    "matmul": (lambda t: T.sum_((t["a"] @ t["b"]) * _weights((3, 5), 1)),
               {"a": _normal(3, 4), "b": _normal(4, 5)}),
    "batched_matmul": (lambda t: T.sum_((t["a"] @ t["b"]) * _weights((2, 3, 5), 2)),
                       {"a": _normal(2, 3, 4), "b": _normal(4, 5)}),
    "layer_norm": (lambda t: T.sum_(T.layer_norm(t["x"], t["g"], t["b"]) * _weights((3, 6), 3)),
                   {"x": _normal(3, 6), "g": _normal(6), "b": _normal(6)}),
    "softmax": (lambda t: T.sum_(T.softmax(t["x"]) * _weights((3, 5), 4)), {"x": _normal(3, 5)}),
    "log_softmax": (lambda t: T.sum_(T.log_softmax(t["x"]) * _weights((3, 5), 5)), {"x": _normal(3, 5)}),
    "gelu": (lambda t: T.sum_(T.gelu(t["x"]) * _weights((4, 4), 6)), {"x": _normal(4, 4)}),
    "add": (lambda t: T.sum_((t["x"] + t["y"]) ** 2), {"x": _normal(3, 4), "y": _normal(4)}),
    "sub": (lambda t: T.sum_((t["x"] - t["y"]) ** 2), {"x": _normal(3, 4), "y": _normal(3, 1)}),
    "mul": (lambda t: T.sum_(t["x"] * t["y"] * _weights((3, 4), 7)), {"x": _normal(3, 4), "y": _normal(3, 4)}),
    "scale": (lambda t: T.sum_(T.scale(t["x"], -2.5) ** 2), {"x": _normal(5)}),
    "transpose": (lambda t: T.sum_(T.transpose(t["x"], (2, 0, 1)) * _weights((4, 2, 3), 8)),
                  {"x": _normal(2, 3, 4)}),
    "reshape": (lambda t: T.sum_(T.reshape(t["x"], (4, 3)) * _weights((4, 3), 9)), {"x": _normal(2, 6)}),
    "gather_rows": (lambda t: T.sum_(T.gather_rows(t["x"], [2, 0, 2]) * _weights((3, 4), 10)),
                    {"x": _normal(3, 4)}),
    "gather_rows_batched": (
        lambda t: T.sum_(T.gather_rows(t["x"], [[0, 2], [1, 1]]) * _weights((2, 2, 3), 11)),
        {"x": _normal(2, 3, 3)}),
    "concat": (lambda t: T.sum_(T.concat([t["x"], t["y"]], axis=1) * _weights((2, 5), 12)),
               {"x": _normal(2, 2), "y": _normal(2, 3)}),
    "mean_over_axis": (lambda t: T.sum_(T.mean(t["x"], axis=1) * _weights((3, 5), 13)),
                       {"x": _normal(3, 4, 5)}),
    "abs": (lambda t: T.sum_(T.abs_(t["x"]) * _weights((6,), 14)), {"x": _normal(6)}),
    "power": (lambda t: T.sum_(T.power(t["x"], 3) * _weights((5,), 15)), {"x": _normal(5)}),
    "where": (lambda t: T.sum_(T.where(_COND, t["x"], t["y"]) * _weights((3, 4), 16)),
              {"x": _normal(3, 4), "y": _normal(3, 4)}),
    "sum_over_axis": (lambda t: T.sum_(T.sum_(t["x"], axis=0) * _weights((4,), 17)), {"x": _normal(3, 4)}),
    "reciprocal": (lambda t: T.sum_(t["y"] / t["x"]),
                   {"x": np.abs(_normal(4)) + 0.5, "y": _normal(4)}),
}
