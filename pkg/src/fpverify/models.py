"""Built-in toy model zoo: small enough for CI, structured enough to
exercise every supported operator kind and log-depth dispute games.

The dispute chain is deliberately norm-neutral: orthogonal matmuls are the
only profile-sensitive (reduction) ops, and the elementwise ops between them
transport deviations with |Jacobian| = 1, so injected perturbations neither
die out nor blow up relative to calibrated noise at any depth.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .graph import (Graph, build_graph, input_ref, make_node, node_ref, weight_ref)
from .tensor import Rng, Tensor

MODEL_NAMES = ("mlp", "cnn", "transformer", "chain")


@dataclass
class ModelSpec:
    name: str
    graph: Graph
    input_kinds: dict  # input name -> ("uniform", lo, hi) | ("tokens", vocab)
    n_classes: int

    def make_inputs(self, rng: Rng) -> dict[str, Tensor]:
        out = {}
        for name, shape in self.graph.inputs:
            kind = self.input_kinds[name]
            if kind[0] == "uniform":
                out[name] = rng.uniform(shape, kind[1], kind[2])
            else:
                vocab = kind[1]
                ids = rng.integers(0, vocab, size=int(np.prod(shape)))
                out[name] = Tensor(shape, ids.astype(np.float32))
        return out


class _Builder:
    def __init__(self):
        self.nodes = []
        self.weights = {}

    def add(self, name, kind, inputs, attrs=None) -> str:
        self.nodes.append(make_node(name, kind, inputs, attrs))
        return node_ref(len(self.nodes) - 1)

    def weight(self, name, rng: Rng, shape, lo=-0.5, hi=0.5) -> str:
        self.weights[name] = rng.uniform(shape, lo, hi)
        return weight_ref(name)

    def const(self, name, values) -> str:
        arr = np.asarray(values, dtype=np.float32)
        self.weights[name] = Tensor(arr.shape, arr.reshape(-1))
        return weight_ref(name)


def _ortho_weight(rng: Rng, dim: int) -> np.ndarray:
    mat = rng.normal((dim, dim)).astype64()
    q, r = np.linalg.qr(mat)
    q = q * np.sign(np.diag(r))  # fix sign convention for determinism
    return q.astype(np.float32)


def build_mlp(seed: int = 0, batch: int = 16, in_dim: int = 32, hidden: int = 256,
              n_classes: int = 10) -> ModelSpec:
    """Classifier covering every non-embedding op kind, ~35 ops."""
    rng = Rng(seed)
    b = _Builder()
    x = input_ref("x")
    scale = float(1.0 / np.sqrt(in_dim))

    h = b.add("fc0", "linear", [x, b.weight("w0", rng, (in_dim, hidden), -scale, scale),
                                b.weight("b0", rng, (hidden,), -0.1, 0.1)])
    h = b.add("act0", "gelu", [h])
    skip = h
    h = b.add("fc1", "linear", [h, b.weight("w1", rng, (hidden, hidden), -0.2, 0.2),
                                b.weight("b1", rng, (hidden,), -0.1, 0.1)])
    h = b.add("res1", "add", [h, skip])
    h = b.add("ln1", "layernorm", [h], {"axis": -1, "eps": 1e-5})
    h = b.add("act1", "relu", [h])
    h = b.add("mm1", "matmul", [h, b.weight("w2", rng, (hidden, hidden), -0.2, 0.2)])
    h = b.add("act2", "tanh", [h])
    h = b.add("scale1", "mul", [h, b.weight("wm", rng, (hidden,), 0.5, 1.5)])
    h = b.add("shift1", "sub", [h, b.weight("wb", rng, (hidden,), -0.2, 0.2)])
    h = b.add("neg1", "neg", [h])
    h = b.add("act3", "silu", [h])
    mx = b.add("rowmax", "max", [h], {"axis": 1})
    mxc = b.add("rowmax_col", "reshape", [mx], {"shape": f"{batch},1"})
    h2 = b.add("center", "sub", [h, mxc])
    eh = b.add("expo", "exp", [h2])
    sm = b.add("rowsum", "sum", [eh], {"axis": 1})
    smc = b.add("rowsum_col", "reshape", [sm], {"shape": f"{batch},1"})
    p = b.add("norm", "div", [eh, smc])
    sq = b.add("square", "mul", [p, p])
    pos = b.add("lift", "add", [sq, b.weight("wc", rng, (hidden,), 0.8, 1.2)])
    rt = b.add("root", "sqrt", [pos])
    irt = b.add("invroot", "rsqrt", [pos])
    mixed = b.add("mix", "add", [rt, irt])
    lg = b.add("logpos", "log", [pos])
    cat = b.add("widen", "concat", [mixed, lg], {"axis": 1})
    cut = b.add("window", "slice", [cat], {"axis": 1, "start": hidden // 2,
                                           "stop": hidden // 2 + hidden})
    mu = b.add("rowmean", "mean", [cut], {"axis": 1})
    mn = b.add("rowmin", "min", [cut], {"axis": 1})
    spread = b.add("spread", "sub", [mu, mn])
    spreadc = b.add("spread_col", "reshape", [spread], {"shape": f"{batch},1"})
    h3 = b.add("recenter", "add", [cut, spreadc])
    h3 = b.add("ln2", "layernorm", [h3], {"axis": -1, "eps": 1e-5})
    h3 = b.add("attend", "softmax", [h3], {"axis": -1})
    # head bias lifts logits away from zero to keep relative-error
    # denominators scale-stable; argmax and margins are shift-invariant
    logits = b.add("head", "linear",
                   [h3, b.weight("w3", rng, (hidden, n_classes), -0.4, 0.4),
                    b.weight("b3", rng, (n_classes,), 1.5, 2.5)])

    g = build_graph(b.nodes, [("x", (batch, in_dim))], b.weights, [logits])
    return ModelSpec("mlp", g, {"x": ("uniform", -1.0, 1.0)}, n_classes)


def _im2col_conv(b: _Builder, rng: Rng, prefix: str, src: str, shape, ksize: int,
                 out_ch: int, spatial_axes=(1, 2)):
    """3x3 convolution written with slice/reshape/concat/matmul only."""
    batch = shape[0]
    h, w = shape[spatial_axes[0]], shape[spatial_axes[1]]
    tail = list(shape[spatial_axes[1] + 1 :])
    oh, ow = h - ksize + 1, w - ksize + 1
    in_ch = int(np.prod(tail)) if tail else 1
    patches = []
    for di in range(ksize):
        for dj in range(ksize):
            s1 = b.add(f"{prefix}_r{di}{dj}", "slice", [src],
                       {"axis": spatial_axes[0], "start": di, "stop": di + oh})
            s2 = b.add(f"{prefix}_c{di}{dj}", "slice", [s1],
                       {"axis": spatial_axes[1], "start": dj, "stop": dj + ow})
            flat = b.add(f"{prefix}_f{di}{dj}", "reshape", [s2],
                         {"shape": f"{batch},{oh * ow},1,{in_ch}"})
            patches.append(flat)
    cat = b.add(f"{prefix}_cat", "concat", patches, {"axis": 2})
    col = b.add(f"{prefix}_col", "reshape", [cat],
                {"shape": f"{batch},{oh * ow},{ksize * ksize * in_ch}"})
    scale = float(1.0 / np.sqrt(ksize * ksize * in_ch))
    wk = b.weight(f"{prefix}_w", rng, (ksize * ksize * in_ch, out_ch), -scale, scale)
    mm = b.add(f"{prefix}_mm", "matmul", [col, wk])
    out = b.add(f"{prefix}_b", "add", [mm, b.weight(f"{prefix}_bias", rng, (out_ch,),
                                                    -0.1, 0.1)])
    return out, (batch, oh, ow, out_ch), (batch, oh * ow, out_ch)


def build_mini_cnn(seed: int = 0, batch: int = 8, side: int = 8,
                   n_classes: int = 10) -> ModelSpec:
    """Two im2col conv stages plus pooled heads, ~80 ops."""
    rng = Rng(seed + 1)
    b = _Builder()
    x = input_ref("img")

    c1, grid1, flat1 = _im2col_conv(b, rng, "conv1", x, (batch, side, side), 3, 8)
    a1 = b.add("act_c1", "relu", [c1])
    g1 = b.add("grid1", "reshape", [a1], {"shape": ",".join(str(d) for d in grid1)})

    c2, grid2, flat2 = _im2col_conv(b, rng, "conv2", g1, grid1, 3, 16)
    a2 = b.add("act_c2", "gelu", [c2])

    pool1 = b.add("pool1", "mean", [a1], {"axis": 1})  # (batch, 8)
    pool2 = b.add("pool2", "mean", [a2], {"axis": 1})  # (batch, 16)
    merged = b.add("merge", "concat", [pool1, pool2], {"axis": 1})
    h = b.add("fc0", "linear",
              [merged, b.weight("wfc0", rng, (24, 32), -0.3, 0.3),
               b.weight("bfc0", rng, (32,), -0.1, 0.1)])
    h = b.add("act_fc0", "tanh", [h])
    h = b.add("lnf", "layernorm", [h], {"axis": -1, "eps": 1e-5})
    # lifted head bias: see build_mlp
    logits = b.add("head", "linear",
                   [h, b.weight("wout", rng, (32, n_classes), -0.4, 0.4),
                    b.weight("bout", rng, (n_classes,), 1.5, 2.5)])

    g = build_graph(b.nodes, [("img", (batch, side, side))], b.weights, [logits])
    return ModelSpec("cnn", g, {"img": ("uniform", -1.0, 1.0)}, n_classes)


def build_transformer(seed: int = 0, batch: int = 4, seq: int = 16, dim: int = 64,
                      ff_dim: int = 128, vocab: int = 48, n_blocks: int = 2,
                      n_classes: int = 16) -> ModelSpec:
    """Single-head encoder blocks with decomposed projections, ~40 ops."""
    rng = Rng(seed + 2)
    b = _Builder()
    ids = input_ref("ids")
    scale = float(1.0 / np.sqrt(dim))

    emb = b.weight("tok_emb", rng, (vocab, dim), -0.5, 0.5)
    pos = b.weight("pos_emb", rng, (seq, dim), -0.2, 0.2)
    h = b.add("embed", "embedding", [ids, emb])
    h = b.add("posadd", "add", [h, pos])

    for blk in range(n_blocks):
        p = f"b{blk}"
        ln1 = b.add(f"{p}_ln1", "layernorm", [h], {"axis": -1, "eps": 1e-5})
        q = b.add(f"{p}_q", "linear", [ln1, b.weight(f"{p}_wq", rng, (dim, dim), -scale, scale),
                                       b.weight(f"{p}_bq", rng, (dim,), -0.05, 0.05)])
        k = b.add(f"{p}_k", "linear", [ln1, b.weight(f"{p}_wk", rng, (dim, dim), -scale, scale),
                                       b.weight(f"{p}_bk", rng, (dim,), -0.05, 0.05)])
        v = b.add(f"{p}_v", "linear", [ln1, b.weight(f"{p}_wv", rng, (dim, dim), -scale, scale),
                                       b.weight(f"{p}_bv", rng, (dim,), -0.05, 0.05)])
        scores = b.add(f"{p}_scores", "matmul", [q, k], {"transpose_b": 1})
        scaled = b.add(f"{p}_scale", "mul", [scores, b.const(f"{p}_rsqd", [scale])])
        att = b.add(f"{p}_att", "softmax", [scaled], {"axis": -1})
        ctx = b.add(f"{p}_ctx", "matmul", [att, v])
        proj = b.add(f"{p}_proj", "matmul",
                     [ctx, b.weight(f"{p}_wo", rng, (dim, dim), -scale, scale)])
        projb = b.add(f"{p}_projb", "add", [proj, b.weight(f"{p}_bo", rng, (dim,), -0.05, 0.05)])
        res1 = b.add(f"{p}_res1", "add", [projb, h])
        ln2 = b.add(f"{p}_ln2", "layernorm", [res1], {"axis": -1, "eps": 1e-5})
        f1 = b.add(f"{p}_ff1", "matmul",
                   [ln2, b.weight(f"{p}_wf1", rng, (dim, ff_dim), -scale, scale)])
        f1b = b.add(f"{p}_ff1b", "add", [f1, b.weight(f"{p}_bf1", rng, (ff_dim,), -0.05, 0.05)])
        act = b.add(f"{p}_ffact", "gelu", [f1b])
        f2 = b.add(f"{p}_ff2", "matmul",
                   [act, b.weight(f"{p}_wf2", rng, (ff_dim, dim), -scale, scale)])
        f2b = b.add(f"{p}_ff2b", "add", [f2, b.weight(f"{p}_bf2", rng, (dim,), -0.05, 0.05)])
        h = b.add(f"{p}_res2", "add", [f2b, res1])

    hf = b.add("final_ln", "layernorm", [h], {"axis": -1, "eps": 1e-5})
    pooled = b.add("pool", "mean", [hf], {"axis": 1})
    # wide classifier stack: the long head reductions contribute fresh
    # fine-grained rounding noise, keeping the output error spectrum dense
    head_dim = 4 * dim
    hh = b.add("head_up", "linear",
               [pooled, b.weight("wh1", rng, (dim, head_dim), -scale, scale),
                b.weight("bh1", rng, (head_dim,), -0.05, 0.05)])
    hh = b.add("head_act", "gelu", [hh])
    # lifted head bias: see build_mlp
    logits = b.add("head", "linear",
                   [hh, b.weight("wcls", rng, (head_dim, n_classes), -0.2, 0.2),
                    b.weight("bcls", rng, (n_classes,), 1.5, 2.5)])

    g = build_graph(b.nodes, [("ids", (batch, seq))], b.weights, [logits])
    return ModelSpec("transformer", g, {"ids": ("tokens", vocab)}, n_classes)


def build_chain(n_nodes: int = 2048, seed: int = 0, batch: int = 4, width: int = 32,
                matmul_period: int = 128) -> ModelSpec:
    """Synthetic chain DAG for dispute localization sweeps.

    Norm-preserving by construction: orthogonal matmuls every
    `matmul_period` ops, exact-magnitude (+/-1) scalings, small shifts, and
    one flatten/unflatten reshape pair per period.
    """
    rng = Rng(seed + 3)
    b = _Builder()
    prev = input_ref("x")
    flat = False
    reshape_at = matmul_period // 2
    for i in range(n_nodes):
        m = i % matmul_period
        if m == 0:
            if flat:
                prev = b.add(f"n{i:05d}_unflat", "reshape", [prev],
                             {"shape": f"{batch},{width}"})
                flat = False
                continue
            w = _ortho_weight(rng, width)
            b.weights[f"w{i:05d}"] = Tensor(w.shape, w.reshape(-1))
            prev = b.add(f"n{i:05d}_mix", "matmul", [prev, weight_ref(f"w{i:05d}")])
            continue
        if m == reshape_at and not flat and i + 2 < n_nodes:
            prev = b.add(f"n{i:05d}_flat", "reshape", [prev],
                         {"shape": f"{batch * width}"})
            flat = True
            continue
        if flat and m == reshape_at + 1:
            prev = b.add(f"n{i:05d}_unflat", "reshape", [prev],
                         {"shape": f"{batch},{width}"})
            flat = False
            continue
        shape = (batch * width,) if flat else (width,)
        step = m % 4
        if step == 1:
            prev = b.add(f"n{i:05d}_shift", "add",
                         [prev, b.weight(f"s{i:05d}", rng, shape, -0.05, 0.05)])
        elif step == 2:
            signs = np.where(rng.uniform(shape).array >= 0.5, 1.0, -1.0)
            prev = b.add(f"n{i:05d}_flip", "mul",
                         [prev, b.const(f"f{i:05d}", signs)])
        elif step == 3:
            prev = b.add(f"n{i:05d}_drop", "sub",
                         [prev, b.weight(f"d{i:05d}", rng, shape, -0.05, 0.05)])
        else:
            prev = b.add(f"n{i:05d}_neg", "neg", [prev])
    if flat:
        prev = b.add("final_unflat", "reshape", [prev], {"shape": f"{batch},{width}"})

    g = build_graph(b.nodes, [("x", (batch, width))], b.weights, [prev])
    return ModelSpec("chain", g, {"x": ("uniform", -1.0, 1.0)}, width)


def build_model(name: str, **kwargs) -> ModelSpec:
    if name == "mlp":
        return build_mlp(**kwargs)
    if name == "cnn":
        return build_mini_cnn(**kwargs)
    if name == "transformer":
        return build_transformer(**kwargs)
    if name == "chain":
        return build_chain(**kwargs)
    raise ValueError(f"unknown model {name!r}; choose from {MODEL_NAMES}")
