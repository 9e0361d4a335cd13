"""Deterministic FP32 executor with profile-governed reduction orders, plus
the FP64 reference oracle.

Cross-device nondeterminism is simulated exactly where it originates: every
reduction (sum/mean/matmul/linear and the sums inside softmax/layernorm)
is ordered by the active DeviceProfile. Elementwise ops are profile-independent.
Unary intrinsics (exp, tanh, ...) are evaluated in FP64 and rounded once to
FP32, which keeps them within the 2-ULP budget assumed by the bound templates.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .graph import DATA_MOVEMENT_KINDS, Graph, OpNode, parse_ref
from .tensor import Tensor, read_tensor_file, write_tensor_file

_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_GELU_COEFF = 0.044715

REDUCTIONS = ("sequential", "pairwise", "blocked", "permuted")


@dataclass(frozen=True)
class DeviceProfile:
    """Simulated hardware identity: a reduction order plus an fma policy."""

    id: str
    reduction: str = "sequential"
    block_size: int = 32
    perm_seed: int = 0
    fma: bool = False

    def __post_init__(self):
        if self.reduction not in REDUCTIONS:
            raise ValueError(f"unknown reduction strategy {self.reduction!r}")

    @classmethod
    def from_spec(cls, spec: str, id: str | None = None) -> "DeviceProfile":
        """Parse "sequential", "blocked:32", "permuted:7", optionally "+fma"."""
        fma = spec.endswith("+fma")
        if fma:
            spec = spec[: -len("+fma")]
        head, _, arg = spec.partition(":")
        kw = {}
        if head == "blocked" and arg:
            kw["block_size"] = int(arg)
        elif head == "permuted" and arg:
            kw["perm_seed"] = int(arg)
        return cls(id=id or spec + ("+fma" if fma else ""), reduction=head, fma=fma, **kw)


def default_profiles() -> list[DeviceProfile]:
    """Default simulated fleet; count is a config knob."""
    return [
        DeviceProfile("seq", "sequential"),
        DeviceProfile("pair", "pairwise"),
        DeviceProfile("blk32", "blocked", block_size=32),
        DeviceProfile("perm7+fma", "permuted", perm_seed=7, fma=True),
    ]


class ExecutionError(RuntimeError):
    def __init__(self, message, node_index=None, node_name=None):
        super().__init__(message)
        self.node_index = node_index
        self.node_name = node_name


def _permutation(seed: int, n: int) -> np.ndarray:
    gen = np.random.Generator(np.random.Philox(key=seed, counter=n << 128))
    return gen.permutation(n)


def _fold_last(arr: np.ndarray) -> np.ndarray:
    acc = arr[..., 0]
    for k in range(1, arr.shape[-1]):
        acc = acc + arr[..., k]
    return acc


def _pairwise_last(arr: np.ndarray) -> np.ndarray:
    n = arr.shape[-1]
    if n == 1:
        return arr[..., 0]
    mid = (n + 1) // 2
    return _pairwise_last(arr[..., :mid]) + _pairwise_last(arr[..., mid:])


def reduce_last_axis(arr: np.ndarray, profile: DeviceProfile | None) -> np.ndarray:
    """Reduce the trailing axis under the profile's strategy (FP64 oracle
    callers pass profile=None for plain sequential order)."""
    n = arr.shape[-1]
    if n == 0:
        raise ValueError("cannot reduce an empty axis")
    if profile is None or profile.reduction == "sequential":
        return _fold_last(arr)
    if profile.reduction == "pairwise":
        return _pairwise_last(arr)
    if profile.reduction == "blocked":
        b = max(1, profile.block_size)
        partials = [_fold_last(arr[..., i : min(i + b, n)]) for i in range(0, n, b)]
        acc = partials[0]
        for p in partials[1:]:
            acc = acc + p
        return acc
    perm = _permutation(profile.perm_seed, n)
    return _fold_last(arr[..., perm])


def reduce_values(values, profile: DeviceProfile) -> np.float32:
    """Profile-ordered FP32 reduction of a flat value list."""
    arr = np.asarray(values, dtype=np.float32).reshape(-1)
    if arr.size == 0:
        raise ValueError("cannot reduce empty input")
    return np.float32(reduce_last_axis(arr, profile))


def _move_axis_last(arr, axis):
    axis = axis % arr.ndim
    return np.moveaxis(arr, axis, -1), axis


def _round32(arr64: np.ndarray) -> np.ndarray:
    return arr64.astype(np.float32)


def _unary_intrinsic(kind: str, x: np.ndarray, fp64: bool) -> np.ndarray:
    # domain violations surface as non-finite intermediates at the node check
    with np.errstate(all="ignore"):
        x64 = x.astype(np.float64)
        if kind == "exp":
            out = np.exp(x64)
        elif kind == "log":
            out = np.log(x64)
        elif kind == "sqrt":
            out = np.sqrt(x64)
        elif kind == "rsqrt":
            out = 1.0 / np.sqrt(x64)
        elif kind == "tanh":
            out = np.tanh(x64)
        elif kind == "gelu":
            inner = _SQRT_2_OVER_PI * (x64 + _GELU_COEFF * x64**3)
            out = 0.5 * x64 * (1.0 + np.tanh(inner))
        elif kind == "silu":
            out = x64 / (1.0 + np.exp(-x64))
        else:
            raise ValueError(kind)
    return out if fp64 else _round32(out)


def matmul_op(a, b, profile: DeviceProfile | None, transpose_b=False, fp64=False):
    """Batched matmul with the inner-product reduction ordered per profile.

    Without fma: K product roundings then K-1 profile-ordered adds. With fma:
    each step is one multiply-add evaluated in FP64 and rounded once to FP32,
    i.e. K roundings per output element.
    """
    if transpose_b:
        b = np.swapaxes(b, -1, -2)
    if a.shape[-1] != b.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a.shape} @ {b.shape}")
    if fp64:
        prods = a[..., :, :, None].astype(np.float64) * b[..., None, :, :].astype(np.float64)
        return reduce_last_axis(np.moveaxis(prods, -2, -1), None)
    if profile is not None and profile.fma:
        k_dim = a.shape[-1]
        a64 = a.astype(np.float64)
        b64 = b.astype(np.float64)
        acc = None
        for k in range(k_dim):
            step = a64[..., :, k, None] * b64[..., None, k, :]
            acc = step if acc is None else step + acc.astype(np.float64)
            acc = _round32(acc)
        return acc
    prods = a[..., :, :, None] * b[..., None, :, :]  # (..., M, K, N) fp32
    return reduce_last_axis(np.moveaxis(prods, -2, -1), profile)


def softmax_parts(x, axis, profile, fp64=False):
    """Numerically-shifted softmax decomposed into the steps the bound
    template reasons about: m, z, e, S, y."""
    xm, axis = _move_axis_last(x, axis)
    m = np.max(xm, axis=-1, keepdims=True)
    z = xm - m
    e = _unary_intrinsic("exp", z, fp64)
    s = reduce_last_axis(e, None if fp64 else profile)[..., None]
    y = e / s
    return {"m": m, "z": z, "e": e, "s": s, "y": np.moveaxis(y, -1, axis)}


def layernorm_parts(x, axis, eps, profile, fp64=False):
    """Layernorm decomposed as mean, sub, mul, sum, sqrt, div sub-steps."""
    xm, axis = _move_axis_last(x, axis)
    n = xm.shape[-1]
    dt = np.float64 if fp64 else np.float32
    inv_n = dt(n)
    mu = (reduce_last_axis(xm, None if fp64 else profile) / inv_n)[..., None]
    xc = xm - mu
    sq = xc * xc
    var = (reduce_last_axis(sq, None if fp64 else profile) / inv_n)[..., None]
    sp = var + dt(eps)
    sigma = np.sqrt(sp)
    y = xc / sigma
    return {
        "mu": mu, "xc": xc, "sq": sq, "var": var, "sp": sp, "sigma": sigma,
        "y": np.moveaxis(y, -1, axis),
    }


def _parse_shape_attr(spec: str) -> tuple[int, ...]:
    return tuple(int(tok) for tok in str(spec).split(",") if tok != "")


def apply_op(node: OpNode, arrays: list[np.ndarray], profile: DeviceProfile | None,
             fp64: bool = False) -> np.ndarray:
    """Evaluate one operator. profile=None selects oracle ordering."""
    kind = node.kind
    if kind in ("add", "sub", "mul", "div"):
        a, b = arrays
        if kind == "add":
            return a + b
        if kind == "sub":
            return a - b
        if kind == "mul":
            return a * b
        return a / b
    if kind == "neg":
        return -arrays[0]
    if kind == "relu":
        x = arrays[0]
        return np.maximum(x, np.zeros_like(x))
    if kind in ("exp", "log", "sqrt", "rsqrt", "tanh", "gelu", "silu"):
        return _unary_intrinsic(kind, arrays[0], fp64)
    if kind in ("sum", "mean"):
        axis = int(node.attr("axis", -1))
        xm, _ = _move_axis_last(arrays[0], axis)
        red = reduce_last_axis(xm, None if fp64 else profile)
        if kind == "sum":
            return red
        dt = np.float64 if fp64 else np.float32
        return red / dt(xm.shape[-1])
    if kind in ("max", "min"):
        axis = int(node.attr("axis", -1))
        fn = np.max if kind == "max" else np.min
        return fn(arrays[0], axis=axis % arrays[0].ndim)
    if kind == "matmul":
        return matmul_op(arrays[0], arrays[1], profile,
                         transpose_b=bool(node.attr("transpose_b", 0)), fp64=fp64)
    if kind == "linear":
        x, w, b = arrays
        mm = matmul_op(x, w, profile, fp64=fp64)
        return mm + b
    if kind == "softmax":
        axis = int(node.attr("axis", -1))
        return softmax_parts(arrays[0], axis, profile, fp64=fp64)["y"]
    if kind == "layernorm":
        axis = int(node.attr("axis", -1))
        eps = float(node.attr("eps", 1e-5))
        return layernorm_parts(arrays[0], axis, eps, profile, fp64=fp64)["y"]
    if kind == "concat":
        axis = int(node.attr("axis", 0))
        return np.concatenate(arrays, axis=axis)
    if kind == "slice":
        axis = int(node.attr("axis", 0))
        start = int(node.attr("start", 0))
        stop = int(node.attr("stop", 0))
        x = arrays[0]
        index = [slice(None)] * x.ndim
        index[axis % x.ndim] = slice(start, stop)
        return x[tuple(index)]
    if kind == "reshape":
        return arrays[0].reshape(_parse_shape_attr(node.attr("shape")))
    if kind == "embedding":
        ids, table = arrays
        idx = ids.astype(np.int64)
        if idx.size and (idx.min() < 0 or idx.max() >= table.shape[0]):
            raise ValueError("embedding index out of range")
        return table[idx]
    raise ExecutionError(f"unsupported op kind {kind!r}")


@dataclass
class Trace:
    """Per-node outputs in canonical order with provenance digests."""

    tensors: list[Tensor]
    profile_id: str
    input_digests: dict[str, str]
    weight_digests: dict[str, str]

    def __len__(self):
        return len(self.tensors)


def _resolve(ref, g: Graph, inputs, node_values, fp64):
    cat, key = parse_ref(ref)
    if cat == "node":
        return node_values[key]
    if cat == "input":
        t = inputs[key]
        return t.astype64() if fp64 else t.array
    t = g.weights[key]
    return t.astype64() if fp64 else t.array


def _check_declared_inputs(g: Graph, inputs):
    declared = dict(g.inputs)
    missing = set(declared) - set(inputs)
    if missing:
        raise ExecutionError(f"missing graph inputs: {sorted(missing)}")
    for name, shape in declared.items():
        if shape is not None and tuple(inputs[name].shape) != tuple(shape):
            raise ExecutionError(
                f"input {name!r} has shape {inputs[name].shape}, declared {shape}"
            )


def execute(g: Graph, inputs: dict[str, Tensor], profile: DeviceProfile,
            inject: dict[int, np.ndarray] | None = None):
    """Run the graph in FP32 under a device profile; bitwise deterministic.

    `inject` maps node index to an additive perturbation applied to that
    node's output (the adversarial-proposer hook); downstream nodes consume
    the perturbed value.
    """
    from .commitments import tensor_digest

    _check_declared_inputs(g, inputs)
    node_values: list[np.ndarray] = []
    for node in g.nodes:
        args = [_resolve(r, g, inputs, node_values, fp64=False) for r in node.inputs]
        try:
            out = apply_op(node, args, profile, fp64=False)
        except ExecutionError:
            raise
        except Exception as exc:
            raise ExecutionError(
                f"node {node.index} ({node.name!r}, {node.kind}): {exc}",
                node_index=node.index, node_name=node.name,
            ) from exc
        out = np.ascontiguousarray(out, dtype=np.float32)
        if inject and node.index in inject:
            out = np.ascontiguousarray(
                out + inject[node.index].astype(np.float32), dtype=np.float32
            )
        if out.size and not np.all(np.isfinite(out)):
            raise ExecutionError(
                f"non-finite intermediate at node {node.index} ({node.name!r})",
                node_index=node.index, node_name=node.name,
            )
        node_values.append(out)

    trace = Trace(
        tensors=[Tensor(v.shape, v.reshape(-1)) for v in node_values],
        profile_id=profile.id,
        input_digests={k: tensor_digest(v) for k, v in sorted(inputs.items())},
        weight_digests={k: tensor_digest(v) for k, v in sorted(g.weights.items())},
    )
    outputs = [trace.tensors[parse_ref(ref)[1]] for ref in g.outputs]
    return outputs, trace


def execute_fp64(g: Graph, inputs: dict[str, Tensor]):
    """Reference oracle: same graph, FP64 arithmetic, sequential reductions."""
    _check_declared_inputs(g, inputs)
    node_values: list[np.ndarray] = []
    for node in g.nodes:
        args = [_resolve(r, g, inputs, node_values, fp64=True) for r in node.inputs]
        try:
            out = apply_op(node, args, None, fp64=True)
        except Exception as exc:
            raise ExecutionError(
                f"node {node.index} ({node.name!r}, {node.kind}): {exc}",
                node_index=node.index, node_name=node.name,
            ) from exc
        out = np.ascontiguousarray(out, dtype=np.float64)
        if out.size and not np.all(np.isfinite(out)):
            raise ExecutionError(
                f"non-finite intermediate at node {node.index} ({node.name!r})",
                node_index=node.index, node_name=node.name,
            )
        node_values.append(out)
    outputs = [node_values[parse_ref(ref)[1]] for ref in g.outputs]
    return outputs, node_values


def run_subgraph(module, boundary: dict[str, Tensor], profile: DeviceProfile):
    """Execute an extracted slice from frontier tensors keyed by parent ref."""
    feed = {}
    for ref in module.placeholder_refs:
        if ref not in boundary:
            raise ExecutionError(f"missing boundary tensor for {ref}")
        feed["ph_" + ref.replace(":", "_")] = boundary[ref]
    return execute(module.graph, feed, profile)


_FLOP_WEIGHTS = {
    "add": 1, "sub": 1, "mul": 1, "div": 1, "neg": 1, "relu": 1,
    "exp": 4, "log": 4, "sqrt": 2, "rsqrt": 3, "tanh": 4, "gelu": 8, "silu": 6,
}


def node_flops(node: OpNode, out_shape, in_shapes) -> int:
    """Analytic FLOP estimate; only relative consistency matters for DCR."""
    kind = node.kind
    out_size = int(np.prod(out_shape, dtype=np.int64)) if out_shape else 1
    if kind in DATA_MOVEMENT_KINDS:
        return 0
    if kind in _FLOP_WEIGHTS:
        return _FLOP_WEIGHTS[kind] * out_size
    if kind in ("sum", "mean", "max", "min"):
        return int(np.prod(in_shapes[0], dtype=np.int64))
    if kind == "softmax":
        return 4 * int(np.prod(in_shapes[0], dtype=np.int64))
    if kind == "layernorm":
        return 8 * int(np.prod(in_shapes[0], dtype=np.int64))
    if kind == "matmul":
        k_dim = in_shapes[0][-1]
        return 2 * k_dim * out_size
    if kind == "linear":
        k_dim = in_shapes[0][-1]
        return 2 * k_dim * out_size + out_size
    raise ValueError(f"no flop model for kind {kind!r}")


def graph_flops(g: Graph, trace: Trace) -> int:
    total = 0
    for node, t in zip(g.nodes, trace.tensors):
        in_shapes = []
        for ref in node.inputs:
            cat, key = parse_ref(ref)
            if cat == "node":
                in_shapes.append(trace.tensors[key].shape)
            elif cat == "weight":
                in_shapes.append(g.weights[key].shape)
            else:
                in_shapes.append(None)
        in_shapes = [s if s is not None else t.shape for s in in_shapes]
        total += node_flops(node, t.shape, in_shapes)
    return total


def save_trace(dirpath, trace: Trace) -> None:
    """Trace dump: one tensor file per node index plus a manifest."""
    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    for i, t in enumerate(trace.tensors):
        write_tensor_file(dirpath / f"{i:06d}.naot", t.array)
    manifest = {
        "n_nodes": len(trace.tensors),
        "profile_id": trace.profile_id,
        "input_digests": trace.input_digests,
        "weight_digests": trace.weight_digests,
    }
    with open(dirpath / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)


def load_trace(dirpath) -> Trace:
    dirpath = Path(dirpath)
    with open(dirpath / "manifest.json") as fh:
        manifest = json.load(fh)
    tensors = []
    for i in range(manifest["n_nodes"]):
        arr = read_tensor_file(dirpath / f"{i:06d}.naot")
        tensors.append(Tensor(arr.shape, arr.reshape(-1)))
    return Trace(
        tensors=tensors,
        profile_id=manifest["profile_id"],
        input_digests=manifest["input_digests"],
        weight_digests=manifest["weight_digests"],
    )
