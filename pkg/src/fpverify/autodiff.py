"""Reverse-mode gradients through operator graphs, accumulated in FP64.

The forward pass here is a plain FP64 evaluation (no profile semantics);
it exists to drive the attack optimizer, not to reproduce execution bits.
Gradients with respect to an additive perturbation at node v equal the
cotangent arriving at v's output, so one backward sweep serves every
injection site at once.
"""

from __future__ import annotations

import math

import numpy as np

from .graph import Graph, OpNode, parse_ref

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_COEFF = 0.044715


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    """Sum a gradient down to the shape it was broadcast from."""
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for ax, dim in enumerate(shape):
        if dim == 1 and grad.shape[ax] != 1:
            grad = grad.sum(axis=ax, keepdims=True)
    return grad


def _softmax64(x, axis):
    shifted = x - np.max(x, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def _layernorm64(x, axis, eps):
    mu = np.mean(x, axis=axis, keepdims=True)
    xc = x - mu
    var = np.mean(xc * xc, axis=axis, keepdims=True)
    sigma = np.sqrt(var + eps)
    return xc / sigma, sigma


def forward_op(node: OpNode, args: list[np.ndarray]) -> np.ndarray:
    kind = node.kind
    if kind == "add":
        return args[0] + args[1]
    if kind == "sub":
        return args[0] - args[1]
    if kind == "mul":
        return args[0] * args[1]
    if kind == "div":
        return args[0] / args[1]
    if kind == "neg":
        return -args[0]
    if kind == "relu":
        return np.maximum(args[0], 0.0)
    if kind == "exp":
        return np.exp(args[0])
    if kind == "log":
        return np.log(args[0])
    if kind == "sqrt":
        return np.sqrt(args[0])
    if kind == "rsqrt":
        return 1.0 / np.sqrt(args[0])
    if kind == "tanh":
        return np.tanh(args[0])
    if kind == "gelu":
        x = args[0]
        return 0.5 * x * (1.0 + np.tanh(_SQRT_2_OVER_PI * (x + _GELU_COEFF * x**3)))
    if kind == "silu":
        x = args[0]
        return x / (1.0 + np.exp(-x))
    if kind == "sum":
        return np.sum(args[0], axis=int(node.attr("axis", -1)))
    if kind == "mean":
        return np.mean(args[0], axis=int(node.attr("axis", -1)))
    if kind == "max":
        return np.max(args[0], axis=int(node.attr("axis", -1)))
    if kind == "min":
        return np.min(args[0], axis=int(node.attr("axis", -1)))
    if kind == "matmul":
        b = args[1]
        if node.attr("transpose_b", 0):
            b = np.swapaxes(b, -1, -2)
        return np.matmul(args[0], b)
    if kind == "linear":
        return np.matmul(args[0], args[1]) + args[2]
    if kind == "softmax":
        return _softmax64(args[0], int(node.attr("axis", -1)))
    if kind == "layernorm":
        y, _ = _layernorm64(args[0], int(node.attr("axis", -1)),
                            float(node.attr("eps", 1e-5)))
        return y
    if kind == "concat":
        return np.concatenate(args, axis=int(node.attr("axis", 0)))
    if kind == "slice":
        x = args[0]
        axis = int(node.attr("axis", 0)) % x.ndim
        index = [slice(None)] * x.ndim
        index[axis] = slice(int(node.attr("start", 0)), int(node.attr("stop", 0)))
        return x[tuple(index)]
    if kind == "reshape":
        shape = tuple(int(tok) for tok in str(node.attr("shape")).split(",") if tok)
        return args[0].reshape(shape)
    if kind == "embedding":
        ids, table = args
        return table[ids.astype(np.int64)]
    raise ValueError(f"no forward rule for kind {kind!r}")


def _extreme_mask(x, out, axis):
    """One-hot mask of the first extreme element along the axis."""
    expanded = np.expand_dims(out, axis)
    hits = x == expanded
    first = np.cumsum(hits, axis=axis) == 1
    return hits & first


def vjp_op(node: OpNode, args: list[np.ndarray], out: np.ndarray,
           grad: np.ndarray) -> list[np.ndarray | None]:
    """Gradients of <grad, out> with respect to each input (None where the
    input is not differentiable, e.g. embedding ids)."""
    kind = node.kind
    a = args[0]
    if kind == "add":
        return [_unbroadcast(grad, args[0].shape), _unbroadcast(grad, args[1].shape)]
    if kind == "sub":
        return [_unbroadcast(grad, args[0].shape), _unbroadcast(-grad, args[1].shape)]
    if kind == "mul":
        return [_unbroadcast(grad * args[1], args[0].shape),
                _unbroadcast(grad * args[0], args[1].shape)]
    if kind == "div":
        b = args[1]
        return [_unbroadcast(grad / b, a.shape),
                _unbroadcast(-grad * a / (b * b), b.shape)]
    if kind == "neg":
        return [-grad]
    if kind == "relu":
        return [grad * (a > 0)]
    if kind == "exp":
        return [grad * out]
    if kind == "log":
        return [grad / a]
    if kind == "sqrt":
        return [grad / (2.0 * out)]
    if kind == "rsqrt":
        return [-0.5 * grad * out / a]
    if kind == "tanh":
        return [grad * (1.0 - out * out)]
    if kind == "gelu":
        inner = _SQRT_2_OVER_PI * (a + _GELU_COEFF * a**3)
        t = np.tanh(inner)
        d_inner = _SQRT_2_OVER_PI * (1.0 + 3.0 * _GELU_COEFF * a * a)
        return [grad * (0.5 * (1.0 + t) + 0.5 * a * (1.0 - t * t) * d_inner)]
    if kind == "silu":
        s = 1.0 / (1.0 + np.exp(-a))
        return [grad * (s + a * s * (1.0 - s))]
    if kind in ("sum", "mean"):
        axis = int(node.attr("axis", -1)) % a.ndim
        g = np.expand_dims(grad, axis)
        if kind == "mean":
            g = g / a.shape[axis]
        return [np.broadcast_to(g, a.shape).copy()]
    if kind in ("max", "min"):
        axis = int(node.attr("axis", -1)) % a.ndim
        mask = _extreme_mask(a, out, axis)
        return [np.expand_dims(grad, axis) * mask]
    if kind == "matmul":
        b = args[1]
        b_eff = np.swapaxes(b, -1, -2) if node.attr("transpose_b", 0) else b
        ga = _unbroadcast(np.matmul(grad, np.swapaxes(b_eff, -1, -2)), a.shape)
        gb_eff = np.matmul(np.swapaxes(a, -1, -2), grad)
        if node.attr("transpose_b", 0):
            gb = _unbroadcast(np.swapaxes(gb_eff, -1, -2), b.shape)
        else:
            gb = _unbroadcast(gb_eff, b.shape)
        return [ga, gb]
    if kind == "linear":
        x, w, bias = args
        gx = _unbroadcast(np.matmul(grad, np.swapaxes(w, -1, -2)), x.shape)
        gw = _unbroadcast(np.matmul(np.swapaxes(x, -1, -2), grad), w.shape)
        gb = _unbroadcast(grad, bias.shape)
        return [gx, gw, gb]
    if kind == "softmax":
        axis = int(node.attr("axis", -1)) % a.ndim
        dot = np.sum(grad * out, axis=axis, keepdims=True)
        return [out * (grad - dot)]
    if kind == "layernorm":
        axis = int(node.attr("axis", -1)) % a.ndim
        _, sigma = _layernorm64(a, axis, float(node.attr("eps", 1e-5)))
        gy = (grad - out * np.mean(grad * out, axis=axis, keepdims=True)) / sigma
        return [gy - np.mean(gy, axis=axis, keepdims=True)]
    if kind == "concat":
        axis = int(node.attr("axis", 0)) % a.ndim
        grads = []
        offset = 0
        for arg in args:
            index = [slice(None)] * grad.ndim
            index[axis] = slice(offset, offset + arg.shape[axis])
            grads.append(grad[tuple(index)])
            offset += arg.shape[axis]
        return grads
    if kind == "slice":
        axis = int(node.attr("axis", 0)) % a.ndim
        start = int(node.attr("start", 0))
        g = np.zeros_like(a)
        index = [slice(None)] * a.ndim
        index[axis] = slice(start, start + grad.shape[axis])
        g[tuple(index)] = grad
        return [g]
    if kind == "reshape":
        return [grad.reshape(a.shape)]
    if kind == "embedding":
        ids, table = args
        g = np.zeros_like(table)
        np.add.at(g, ids.astype(np.int64).reshape(-1),
                  grad.reshape(-1, table.shape[-1]))
        return [None, g]
    raise ValueError(f"no vjp rule for kind {kind!r}")


class GradGraph:
    """Forward/backward context over a fixed graph with FP64 values."""

    def __init__(self, g: Graph):
        self.g = g
        self._weights64 = {k: t.astype64() for k, t in g.weights.items()}

    def _resolve(self, ref, inputs64, values):
        cat, key = parse_ref(ref)
        if cat == "node":
            return values[key]
        if cat == "input":
            return inputs64[key]
        return self._weights64[key]

    def forward(self, inputs64: dict[str, np.ndarray],
                deltas: dict[int, np.ndarray] | None = None) -> list[np.ndarray]:
        values = []
        for node in self.g.nodes:
            args = [self._resolve(r, inputs64, values) for r in node.inputs]
            out = forward_op(node, args)
            if deltas and node.index in deltas:
                out = out + deltas[node.index]
            values.append(out)
        return values

    def backward(self, values: list[np.ndarray], inputs64: dict[str, np.ndarray],
                 out_index: int, cotangent: np.ndarray) -> dict[int, np.ndarray]:
        """Cotangent of every node output given a cotangent at out_index."""
        grads: dict[int, np.ndarray] = {out_index: np.asarray(cotangent, dtype=np.float64)}
        for node in reversed(self.g.nodes[: out_index + 1]):
            g_out = grads.get(node.index)
            if g_out is None:
                continue
            args = [self._resolve(r, inputs64, values) for r in node.inputs]
            in_grads = vjp_op(node, args, values[node.index], g_out)
            for ref, gin in zip(node.inputs, in_grads):
                if gin is None:
                    continue
                cat, key = parse_ref(ref)
                if cat != "node":
                    continue
                if key in grads:
                    grads[key] = grads[key] + gin
                else:
                    grads[key] = gin
        return grads


def finite_diff_grad(fn, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of a scalar function, relative step per element."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gf = g.reshape(-1)
    for i in range(flat.size):
        step = h * max(1.0, abs(flat[i]))
        orig = flat[i]
        flat[i] = orig + step
        fp = fn(x)
        flat[i] = orig - step
        fm = fn(x)
        flat[i] = orig
        gf[i] = (fp - fm) / (2.0 * step)
    return g
