"""Operator-granular DAG with canonical topological order, frontier
computation, contiguous-slice extraction, and N-way partitioning.

Producer references are strings: "node:<index>", "input:<name>", or
"weight:<name>". The node list order *is* the canonical topological order;
build_graph validates it instead of re-sorting.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

from .tensor import Tensor, load_tensor, save_tensor

OP_KINDS = frozenset(
    {
        "add", "sub", "mul", "div", "neg",
        "exp", "log", "sqrt", "rsqrt", "tanh", "relu", "gelu", "silu",
        "sum", "mean", "max", "min",
        "matmul", "linear", "softmax", "layernorm",
        "concat", "slice", "reshape", "embedding",
    }
)

DATA_MOVEMENT_KINDS = frozenset({"concat", "slice", "reshape", "embedding"})

GRAPH_FILE_VERSION = 1


def node_ref(index: int) -> str:
    return f"node:{index}"


def input_ref(name: str) -> str:
    return f"input:{name}"


def weight_ref(name: str) -> str:
    return f"weight:{name}"


def parse_ref(ref: str) -> tuple[str, object]:
    kind, _, rest = ref.partition(":")
    if kind == "node":
        return ("node", int(rest))
    if kind in ("input", "weight"):
        return (kind, rest)
    raise ValueError(f"malformed reference {ref!r}")


@dataclass(frozen=True)
class OpNode:
    index: int
    name: str
    kind: str
    inputs: tuple[str, ...]
    attrs: tuple[tuple[str, object], ...] = ()

    def attr(self, key, default=None):
        for k, v in self.attrs:
            if k == key:
                return v
        return default


@dataclass(frozen=True)
class Slice:
    start: int
    end: int

    def __post_init__(self):
        if not (0 <= self.start < self.end):
            raise ValueError(f"invalid slice [{self.start}, {self.end})")

    def __len__(self):
        return self.end - self.start

    def contains(self, index: int) -> bool:
        return self.start <= index < self.end


@dataclass(frozen=True)
class Graph:
    nodes: tuple[OpNode, ...]
    inputs: tuple[tuple[str, tuple | None], ...]  # (name, shape or None)
    weights: dict[str, Tensor]
    outputs: tuple[str, ...]

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    def input_names(self) -> list[str]:
        return [name for name, _ in self.inputs]

    def full_slice(self) -> Slice:
        return Slice(0, len(self.nodes))


def _canon_attrs(attrs) -> tuple[tuple[str, object], ...]:
    if attrs is None:
        return ()
    items = list(attrs.items()) if isinstance(attrs, dict) else list(attrs)
    for k, v in items:
        if not isinstance(k, str):
            raise ValueError(f"attr key {k!r} is not a string")
        if not isinstance(v, (int, float, str)):
            raise ValueError(f"attr {k!r} has non-scalar value {v!r}")
    return tuple(sorted(items, key=lambda kv: kv[0]))


def build_graph(nodes, inputs, weights, outputs) -> Graph:
    """Validate and canonicalize a node list given in topological order.

    Rejects forward/self references (which is how any cycle appears when the
    order is fixed), dangling input/weight references, and duplicate names.
    """
    input_specs = []
    for item in inputs:
        if isinstance(item, str):
            input_specs.append((item, None))
        else:
            name, shape = item
            input_specs.append((name, tuple(shape) if shape is not None else None))
    input_names = {name for name, _ in input_specs}
    if len(input_names) != len(input_specs):
        raise ValueError("duplicate graph input name")

    canon_nodes = []
    seen_names = set()
    for i, node in enumerate(nodes):
        if node.kind not in OP_KINDS:
            raise ValueError(f"node {node.name!r}: unsupported kind {node.kind!r}")
        if node.name in seen_names:
            raise ValueError(f"duplicate node name {node.name!r}")
        seen_names.add(node.name)
        for ref in node.inputs:
            cat, key = parse_ref(ref)
            if cat == "node":
                if not (0 <= key < i):
                    raise ValueError(
                        f"node {node.name!r} (index {i}) references node {key}: "
                        "producers must precede consumers in canonical order"
                    )
            elif cat == "input":
                if key not in input_names:
                    raise ValueError(f"node {node.name!r} references unknown input {key!r}")
            else:
                if key not in weights:
                    raise ValueError(f"node {node.name!r} references unknown weight {key!r}")
        canon_nodes.append(
            OpNode(index=i, name=node.name, kind=node.kind,
                   inputs=tuple(node.inputs), attrs=_canon_attrs(node.attrs))
        )

    out_refs = tuple(outputs)
    for ref in out_refs:
        cat, key = parse_ref(ref)
        if cat != "node" or not (0 <= key < len(canon_nodes)):
            raise ValueError(f"graph output {ref!r} is not a valid node reference")

    return Graph(nodes=tuple(canon_nodes), inputs=tuple(input_specs),
                 weights=dict(weights), outputs=out_refs)


def make_node(name, kind, inputs, attrs=None) -> OpNode:
    """Convenience constructor; index is assigned by build_graph."""
    return OpNode(index=-1, name=name, kind=kind, inputs=tuple(inputs),
                  attrs=_canon_attrs(attrs))


@dataclass(frozen=True)
class Frontier:
    """Live-in / live-out sets of a slice, in canonical frontier order:
    graph inputs (declaration order), weights (lexicographic), then external
    producer nodes (ascending index)."""

    in_inputs: tuple[str, ...]
    in_weights: tuple[str, ...]
    in_nodes: tuple[int, ...]
    out_nodes: tuple[int, ...]

    def in_refs(self) -> list[str]:
        return (
            [input_ref(n) for n in self.in_inputs]
            + [weight_ref(n) for n in self.in_weights]
            + [node_ref(i) for i in self.in_nodes]
        )


def frontiers(g: Graph, s: Slice) -> Frontier:
    """Single linear scan for In(S) and Out(S)."""
    if s.end > g.n_nodes:
        raise ValueError(f"slice end {s.end} exceeds graph size {g.n_nodes}")
    in_inputs, in_weights, in_nodes = set(), set(), set()
    for i in range(s.start, s.end):
        for ref in g.nodes[i].inputs:
            cat, key = parse_ref(ref)
            if cat == "input":
                in_inputs.add(key)
            elif cat == "weight":
                in_weights.add(key)
            elif not s.contains(key):
                in_nodes.add(key)

    out_nodes = set()
    for i in range(s.end, g.n_nodes):
        for ref in g.nodes[i].inputs:
            cat, key = parse_ref(ref)
            if cat == "node" and s.contains(key):
                out_nodes.add(key)
    for ref in g.outputs:
        _, key = parse_ref(ref)
        if s.contains(key):
            out_nodes.add(key)

    input_order = {name: k for k, (name, _) in enumerate(g.inputs)}
    return Frontier(
        in_inputs=tuple(sorted(in_inputs, key=input_order.__getitem__)),
        in_weights=tuple(sorted(in_weights)),
        in_nodes=tuple(sorted(in_nodes)),
        out_nodes=tuple(sorted(out_nodes)),
    )


def _placeholder_name(ref: str) -> str:
    return "ph_" + ref.replace(":", "_")


@dataclass(frozen=True)
class SubgraphModule:
    """A contiguous slice materialized as a standalone graph. External node
    and graph-input producers become placeholder inputs; weights are shared
    by reference with the parent."""

    parent_slice: Slice
    graph: Graph
    placeholder_refs: tuple[str, ...]  # parent refs, in canonical frontier order
    out_nodes: tuple[int, ...]  # parent node indices emitted as outputs


def extract_subgraph(g: Graph, s: Slice) -> SubgraphModule:
    fr = frontiers(g, s)
    placeholder_refs = tuple(
        [input_ref(n) for n in fr.in_inputs] + [node_ref(i) for i in fr.in_nodes]
    )
    remap = {ref: input_ref(_placeholder_name(ref)) for ref in placeholder_refs}

    cloned = []
    for i in range(s.start, s.end):
        node = g.nodes[i]
        new_inputs = []
        for ref in node.inputs:
            cat, key = parse_ref(ref)
            if ref in remap:
                new_inputs.append(remap[ref])
            elif cat == "node":
                new_inputs.append(node_ref(key - s.start))
            else:
                new_inputs.append(ref)  # weight refs stay shared
        cloned.append(make_node(node.name, node.kind, new_inputs, dict(node.attrs)))

    module_graph = build_graph(
        cloned,
        inputs=[(_placeholder_name(ref), None) for ref in placeholder_refs],
        weights=g.weights,
        outputs=[node_ref(i - s.start) for i in fr.out_nodes],
    )
    return SubgraphModule(parent_slice=s, graph=module_graph,
                          placeholder_refs=placeholder_refs, out_nodes=fr.out_nodes)


def partition(s: Slice, n: int) -> list[Slice]:
    """Contiguous op-count-balanced split into at most n children.

    Sizes differ by at most one, larger children first. A slice shorter than
    n degenerates to one single-node child per op.
    """
    if n < 2:
        raise ValueError("partition requires n >= 2")
    length = len(s)
    if length <= n:
        return [Slice(i, i + 1) for i in range(s.start, s.end)]
    base, extra = divmod(length, n)
    children = []
    pos = s.start
    for j in range(n):
        size = base + (1 if j < extra else 0)
        children.append(Slice(pos, pos + size))
        pos += size
    return children


def graph_to_json(g: Graph, weight_files: dict[str, str]) -> dict:
    return {
        "version": GRAPH_FILE_VERSION,
        "nodes": [
            {
                "name": n.name,
                "kind": n.kind,
                "inputs": list(n.inputs),
                "attrs": {k: v for k, v in n.attrs},
            }
            for n in g.nodes
        ],
        "inputs": [
            {"name": name, "shape": list(shape) if shape is not None else None}
            for name, shape in g.inputs
        ],
        "weights": [{"name": name, "file": weight_files[name]} for name in sorted(g.weights)],
        "outputs": list(g.outputs),
    }


def save_graph(path, g: Graph, weights_dir) -> None:
    """Graph JSON next to a directory of binary weight tensor files."""
    weights_dir = Path(weights_dir)
    weights_dir.mkdir(parents=True, exist_ok=True)
    files = {}
    for name in sorted(g.weights):
        fname = name.replace("/", "_") + ".naot"
        save_tensor(weights_dir / fname, g.weights[name])
        files[name] = fname
    doc = graph_to_json(g, files)
    with open(path, "w") as fh:
        json.dump(doc, fh, sort_keys=True, indent=1)


def load_graph(path, weights_dir) -> Graph:
    with open(path) as fh:
        doc = json.load(fh)
    if doc.get("version") != GRAPH_FILE_VERSION:
        raise ValueError(f"unsupported graph file version {doc.get('version')}")
    weights_dir = Path(weights_dir)
    weights = {
        entry["name"]: load_tensor(weights_dir / entry["file"]) for entry in doc["weights"]
    }
    nodes = [
        make_node(nd["name"], nd["kind"], nd["inputs"], nd.get("attrs") or {})
        for nd in doc["nodes"]
    ]
    inputs = [
        (spec["name"], tuple(spec["shape"]) if spec.get("shape") is not None else None)
        for spec in doc["inputs"]
    ]
    return build_graph(nodes, inputs, weights, doc["outputs"])
