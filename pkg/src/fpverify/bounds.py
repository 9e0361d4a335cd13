"""Per-operator elementwise rounding-error bounds under the standard
IEEE-754 model, co-computed with FP32 execution.

Bounds cover only error introduced *within* each operator (propagated across
its own sub-steps plus fresh roundings); nothing is propagated across
operators. Reductions of k steps use the deterministic constant
gamma(k) = ku/(1-ku) or the probabilistic gamma_tilde(k, lambda). All bound
arithmetic runs in FP64 and its own rounding is ignored.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import engine
from .engine import DeviceProfile, Trace
from .graph import DATA_MOVEMENT_KINDS, Graph, OpNode, parse_ref
from .tensor import Tensor

FP32_UNIT_ROUNDOFF = 2.0 ** -24


@dataclass(frozen=True)
class FpModel:
    """Floating-point model parameters for bound computation."""

    u: float = FP32_UNIT_ROUNDOFF
    lam: float = 4.0
    mode: str = "probabilistic"

    def __post_init__(self):
        if self.u <= 0:
            raise ValueError("unit roundoff must be positive")
        if self.lam <= 0:
            raise ValueError("lambda must be positive")
        if self.mode not in ("deterministic", "probabilistic"):
            raise ValueError(f"unknown bound mode {self.mode!r}")

    def reduction_const(self, k: int) -> float:
        if self.mode == "deterministic":
            return gamma(k, self.u)
        return gamma_tilde(k, self.lam, self.u)

    def confidence(self) -> float:
        """Per-reduction success probability of the probabilistic bound."""
        return 1.0 - 2.0 * math.exp(-self.lam**2 * (1.0 - self.u) ** 2 / 2.0)


def gamma(k: int, u: float = FP32_UNIT_ROUNDOFF) -> float:
    """Worst-case constant for k accumulated roundings: ku / (1 - ku)."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    ku = k * u
    if ku >= 1.0:
        raise ValueError(f"gamma undefined: k*u = {ku} >= 1")
    return ku / (1.0 - ku)


def gamma_tilde(k: int, lam: float = 4.0, u: float = FP32_UNIT_ROUNDOFF) -> float:
    """Probabilistic constant exp(lambda*sqrt(k)*u + k*u^2/(1-u)) - 1."""
    if k < 0:
        raise ValueError("k must be nonnegative")
    return math.expm1(lam * math.sqrt(k) * u + k * u * u / (1.0 - u))


@dataclass(frozen=True)
class BoundTensor:
    """Same-shape elementwise cap: certifies the true value lies within
    +/- eps of the computed output."""

    shape: tuple
    eps: np.ndarray  # float64, flat

    def __post_init__(self):
        if self.eps.size and float(self.eps.min()) < 0.0:
            raise ValueError("bound must be nonnegative")

    @property
    def array(self) -> np.ndarray:
        return self.eps.reshape(self.shape)

    @classmethod
    def from_array(cls, arr: np.ndarray) -> "BoundTensor":
        arr = np.asarray(arr, dtype=np.float64)
        return cls(shape=arr.shape, eps=np.ascontiguousarray(arr).reshape(-1))

    @classmethod
    def zeros(cls, shape) -> "BoundTensor":
        n = int(np.prod(tuple(shape), dtype=np.int64)) if tuple(shape) else 1
        return cls(shape=tuple(shape), eps=np.zeros(n, dtype=np.float64))


def _abs64(arr) -> np.ndarray:
    return np.abs(arr.astype(np.float64))


def matmul_bound(a, b, model: FpModel, fma: bool = False, transpose_b: bool = False) -> BoundTensor:
    """Reduction bound per output element: const(count) * sum_k |a_ik||b_kj|,
    with count = 2K-1 basic roundings (K products, K-1 adds) or K under fma."""
    a64 = _abs64(np.asarray(a))
    b64 = _abs64(np.asarray(b))
    if transpose_b:
        b64 = np.swapaxes(b64, -1, -2)
    k_dim = a64.shape[-1]
    if k_dim != b64.shape[-2]:
        raise ValueError(f"matmul inner dims disagree: {a64.shape} @ {b64.shape}")
    count = k_dim if fma else 2 * k_dim - 1
    return BoundTensor.from_array(model.reduction_const(count) * (a64 @ b64))


def softmax_bound_parts(x, axis, model: FpModel, profile: DeviceProfile | None):
    """Shift/exp/sum/divide bound chain; returns (value, eps) on the
    original axis layout."""
    x = np.asarray(x)
    parts = engine.softmax_parts(x, axis, profile, fp64=False)
    u = model.u
    axis_n = parts["e"].shape[-1]
    rc = model.reduction_const(axis_n - 1)

    xm = np.moveaxis(x, axis % x.ndim, -1).astype(np.float64)
    m64 = parts["m"].astype(np.float64)
    e64 = _abs64(parts["e"])
    s64 = _abs64(parts["s"])
    y_last = np.moveaxis(parts["y"], axis % x.ndim, -1)

    eps_z = u * (np.abs(xm) + np.abs(m64))
    eps_e = e64 * eps_z + 2.0 * u * e64
    eps_s = rc * np.sum(e64, axis=-1, keepdims=True) + (rc + 1.0) * np.sum(
        eps_e, axis=-1, keepdims=True
    )
    eps_y = eps_e / s64 + e64 * eps_s / s64**2 + u * _abs64(y_last)
    return parts["y"], np.moveaxis(eps_y, -1, axis % x.ndim)


def softmax_bound(x, axis, model: FpModel, profile: DeviceProfile | None = None) -> BoundTensor:
    _, eps = softmax_bound_parts(x, axis, model, profile)
    return BoundTensor.from_array(eps)


def layernorm_bound_parts(x, axis, eps_attr, model: FpModel, profile: DeviceProfile | None):
    x = np.asarray(x)
    parts = engine.layernorm_parts(x, axis, eps_attr, profile, fp64=False)
    u = model.u
    n = parts["xc"].shape[-1]
    rc = model.reduction_const(n - 1)

    xm64 = np.moveaxis(x, axis % x.ndim, -1).astype(np.float64)
    mu = _abs64(parts["mu"])
    xc = _abs64(parts["xc"])
    sq = _abs64(parts["sq"])
    var = _abs64(parts["var"])
    sp = _abs64(parts["sp"])
    sigma = _abs64(parts["sigma"])
    y_last = np.moveaxis(parts["y"], axis % x.ndim, -1)

    eps_mu = rc * np.sum(np.abs(xm64), axis=-1, keepdims=True) / n + u * mu
    eps_xc = eps_mu + u * xc
    eps_sq = 2.0 * xc * eps_xc + u * sq
    eps_ssq = rc * np.sum(sq, axis=-1, keepdims=True) + (rc + 1.0) * np.sum(
        eps_sq, axis=-1, keepdims=True
    )
    eps_var = eps_ssq / n + u * var
    eps_sp = eps_var + u * sp
    eps_sigma = eps_sp / (2.0 * sigma) + u * sigma
    eps_y = eps_xc / sigma + xc * eps_sigma / sigma**2 + u * _abs64(y_last)
    return parts["y"], np.moveaxis(eps_y, -1, axis % x.ndim)


_SINGLE_ROUNDING_KINDS = frozenset({"add", "sub", "mul", "div", "neg"})
_INTRINSIC_KINDS = frozenset({"exp", "log", "sqrt", "rsqrt", "tanh", "gelu", "silu"})


def op_bound(node: OpNode, arrays: list[np.ndarray], model: FpModel,
             profile: DeviceProfile | None):
    """Co-compute (FP32 value, FP64 bound) for one operator.

    The value goes through the exact same engine paths as execute(), so
    co-execution is bitwise identical to plain execution.
    """
    kind = node.kind
    if kind == "softmax":
        axis = int(node.attr("axis", -1))
        return softmax_bound_parts(arrays[0], axis, model, profile)
    if kind == "layernorm":
        axis = int(node.attr("axis", -1))
        eps_attr = float(node.attr("eps", 1e-5))
        return layernorm_bound_parts(arrays[0], axis, eps_attr, model, profile)

    out = engine.apply_op(node, arrays, profile, fp64=False)
    u = model.u
    if kind in DATA_MOVEMENT_KINDS or kind in ("relu", "max", "min"):
        return out, np.zeros(out.shape, dtype=np.float64)
    if kind in _SINGLE_ROUNDING_KINDS:
        return out, u * _abs64(out)
    if kind in _INTRINSIC_KINDS:
        return out, 2.0 * u * _abs64(out)
    if kind in ("sum", "mean"):
        axis = int(node.attr("axis", -1)) % arrays[0].ndim
        x64 = np.abs(arrays[0].astype(np.float64))
        n = x64.shape[axis]
        rc = model.reduction_const(n - 1)
        eps = rc * np.sum(x64, axis=axis)
        if kind == "mean":
            eps = eps / n + u * _abs64(out)
        return out, eps
    if kind == "matmul":
        fma = bool(profile.fma) if profile is not None else False
        bt = matmul_bound(arrays[0], arrays[1], model, fma=fma,
                          transpose_b=bool(node.attr("transpose_b", 0)))
        return out, bt.array
    if kind == "linear":
        fma = bool(profile.fma) if profile is not None else False
        bt = matmul_bound(arrays[0], arrays[1], model, fma=fma)
        return out, bt.array + u * _abs64(out)
    raise ValueError(f"no bound template for kind {kind!r}")


def co_execute(g: Graph, inputs: dict[str, Tensor], profile: DeviceProfile,
               model: FpModel, with_trace: bool = False):
    """Execute while producing a BoundTensor per node. Values match
    execute() bitwise; every operator starts from zero input error."""
    from .commitments import tensor_digest

    engine._check_declared_inputs(g, inputs)
    node_values: list[np.ndarray] = []
    bound_list: list[BoundTensor] = []
    for node in g.nodes:
        args = [engine._resolve(r, g, inputs, node_values, fp64=False) for r in node.inputs]
        try:
            out, eps = op_bound(node, args, model, profile)
        except engine.ExecutionError:
            raise
        except Exception as exc:
            raise engine.ExecutionError(
                f"node {node.index} ({node.name!r}, {node.kind}): {exc}",
                node_index=node.index, node_name=node.name,
            ) from exc
        out = np.ascontiguousarray(out, dtype=np.float32)
        if out.size and not np.all(np.isfinite(out)):
            raise engine.ExecutionError(
                f"non-finite intermediate at node {node.index} ({node.name!r})",
                node_index=node.index, node_name=node.name,
            )
        node_values.append(out)
        bound_list.append(BoundTensor.from_array(eps))

    outputs = [
        Tensor(node_values[parse_ref(r)[1]].shape, node_values[parse_ref(r)[1]].reshape(-1))
        for r in g.outputs
    ]
    if not with_trace:
        return outputs, bound_list
    trace = Trace(
        tensors=[Tensor(v.shape, v.reshape(-1)) for v in node_values],
        profile_id=profile.id,
        input_digests={k: tensor_digest(v) for k, v in sorted(inputs.items())},
        weight_digests={k: tensor_digest(v) for k, v in sorted(g.weights.items())},
    )
    return outputs, bound_list, trace


def save_bounds(dirpath, bounds: list[BoundTensor], model: FpModel, profile_id: str) -> None:
    """Bound dump mirroring the trace dump: FP64 tensor files + manifest."""
    import json
    from pathlib import Path

    from .tensor import write_tensor_file

    dirpath = Path(dirpath)
    dirpath.mkdir(parents=True, exist_ok=True)
    for i, bt in enumerate(bounds):
        write_tensor_file(dirpath / f"{i:06d}.naot", bt.array)
    manifest = {
        "n_nodes": len(bounds),
        "profile_id": profile_id,
        "fp_model": {"u": model.u, "lambda": model.lam, "mode": model.mode},
    }
    with open(dirpath / "manifest.json", "w") as fh:
        json.dump(manifest, fh, sort_keys=True, indent=1)
