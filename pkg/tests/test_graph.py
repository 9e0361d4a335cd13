import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fpverify.engine import DeviceProfile, execute
from fpverify.graph import (Graph, Slice, build_graph, extract_subgraph, frontiers,
                            input_ref, load_graph, make_node, node_ref, parse_ref,
                            partition, save_graph, weight_ref)
from fpverify.tensor import Rng


def two_node_chain():
    w = Rng(1).uniform((4, 4), -1, 1)
    nodes = [
        make_node("mm", "matmul", [input_ref("x"), weight_ref("w")]),
        make_node("sm", "softmax", [node_ref(0)], {"axis": -1}),
    ]
    return build_graph(nodes, [("x", (2, 4))], {"w": w}, [node_ref(1)])


def random_dag(n_nodes, seed, max_fanin=3):
    """Structural random DAG in topological order (add/concat nodes)."""
    gen = np.random.default_rng(seed)
    nodes = [make_node("n0", "relu", [input_ref("x")])]
    for i in range(1, n_nodes):
        fanin = 2 if i >= 2 else 1
        srcs = gen.integers(0, i, size=fanin)
        if fanin == 1:
            nodes.append(make_node(f"n{i}", "neg", [node_ref(int(srcs[0]))]))
        else:
            nodes.append(
                make_node(f"n{i}", "add", [node_ref(int(s)) for s in srcs])
            )
    outputs = [node_ref(n_nodes - 1)]
    return build_graph(nodes, [("x", None)], {}, outputs)


class TestBuildGraph:
    def test_two_node_chain(self):
        g = two_node_chain()
        assert g.n_nodes == 2
        assert g.nodes[1].attrs == (("axis", -1),)

    def test_forward_reference_rejected(self):
        nodes = [make_node("a", "neg", [node_ref(1)]), make_node("b", "relu", [input_ref("x")])]
        with pytest.raises(ValueError, match="precede"):
            build_graph(nodes, [("x", None)], {}, [node_ref(1)])

    def test_self_reference_rejected(self):
        nodes = [make_node("a", "neg", [node_ref(0)])]
        with pytest.raises(ValueError):
            build_graph(nodes, [], {}, [node_ref(0)])

    def test_duplicate_names_rejected(self):
        nodes = [make_node("a", "relu", [input_ref("x")]),
                 make_node("a", "neg", [node_ref(0)])]
        with pytest.raises(ValueError, match="duplicate"):
            build_graph(nodes, [("x", None)], {}, [node_ref(1)])

    def test_dangling_weight_rejected(self):
        nodes = [make_node("a", "neg", [weight_ref("missing")])]
        with pytest.raises(ValueError, match="unknown weight"):
            build_graph(nodes, [], {}, [node_ref(0)])

    def test_unknown_kind_rejected(self):
        nodes = [make_node("a", "fancy_conv", [input_ref("x")])]
        with pytest.raises(ValueError, match="unsupported kind"):
            build_graph(nodes, [("x", None)], {}, [node_ref(0)])

    def test_attrs_sorted(self):
        n = make_node("s", "slice", [input_ref("x")], {"stop": 3, "axis": 0, "start": 1})
        g = build_graph([n], [("x", None)], {}, [node_ref(0)])
        assert [k for k, _ in g.nodes[0].attrs] == ["axis", "start", "stop"]

    def test_large_random_dag_accepted_and_shuffle_rejected(self):
        g = random_dag(1000, seed=3)
        assert g.n_nodes == 1000
        # shuffling the order creates forward references
        gen = np.random.default_rng(4)
        perm = gen.permutation(1000)
        shuffled = [g.nodes[i] for i in perm]
        renamed = [
            make_node(n.name, n.kind, n.inputs, dict(n.attrs)) for n in shuffled
        ]
        with pytest.raises(ValueError):
            build_graph(renamed, [("x", None)], {}, [node_ref(999)])


class TestFrontiers:
    def test_whole_graph(self):
        g = two_node_chain()
        fr = frontiers(g, g.full_slice())
        assert fr.in_inputs == ("x",)
        assert fr.in_weights == ("w",)
        assert fr.in_nodes == ()
        assert fr.out_nodes == (1,)

    def test_middle_of_chain(self):
        nodes = [
            make_node("a", "relu", [input_ref("x")]),
            make_node("b", "neg", [node_ref(0)]),
            make_node("c", "exp", [node_ref(1)]),
        ]
        g = build_graph(nodes, [("x", None)], {}, [node_ref(2)])
        fr = frontiers(g, Slice(1, 2))
        assert fr.in_nodes == (0,)
        assert fr.out_nodes == (1,)

    def brute_force(self, g, s):
        in_nodes, out_nodes = set(), set()
        in_inputs, in_weights = set(), set()
        for i, node in enumerate(g.nodes):
            for ref in node.inputs:
                cat, key = parse_ref(ref)
                if s.contains(i):
                    if cat == "node" and not s.contains(key):
                        in_nodes.add(key)
                    elif cat == "input":
                        in_inputs.add(key)
                    elif cat == "weight":
                        in_weights.add(key)
                elif cat == "node" and s.contains(key):
                    out_nodes.add(key)
        for ref in g.outputs:
            _, key = parse_ref(ref)
            if s.contains(key):
                out_nodes.add(key)
        return in_inputs, in_weights, in_nodes, out_nodes

    def test_matches_edge_scan_oracle_on_random_dags(self):
        for seed in range(5):
            g = random_dag(400, seed=seed)
            gen = np.random.default_rng(seed + 100)
            for _ in range(20):
                a, b = sorted(gen.integers(0, 400, size=2))
                if a == b:
                    continue
                s = Slice(int(a), int(b))
                fr = frontiers(g, s)
                ii, iw, inn, onn = self.brute_force(g, s)
                assert set(fr.in_inputs) == ii
                assert set(fr.in_weights) == iw
                assert set(fr.in_nodes) == inn
                assert set(fr.out_nodes) == onn

    def test_large_dag(self):
        g = random_dag(2000, seed=11)
        s = Slice(500, 1500)
        fr = frontiers(g, s)
        ii, iw, inn, onn = self.brute_force(g, s)
        assert set(fr.in_nodes) == inn and set(fr.out_nodes) == onn


class TestExtractSubgraph:
    def test_whole_graph_equivalent(self):
        g = two_node_chain()
        module = extract_subgraph(g, g.full_slice())
        x = Rng(2).uniform((2, 4), -1, 1)
        prof = DeviceProfile("t", "pairwise")
        full, _ = execute(g, {"x": x}, prof)
        sub, _ = execute(module.graph, {"ph_input_x": x}, prof)
        assert np.array_equal(full[0].data, sub[0].data)

    def test_single_node_slice_placeholders(self):
        g = two_node_chain()
        module = extract_subgraph(g, Slice(1, 2))
        assert module.placeholder_refs == ("node:0",)
        assert module.out_nodes == (1,)

    def test_chained_halves_bitwise_equal(self):
        nodes = [
            make_node("a", "tanh", [input_ref("x")]),
            make_node("b", "neg", [node_ref(0)]),
            make_node("c", "exp", [node_ref(1)]),
            make_node("d", "relu", [node_ref(2)]),
        ]
        g = build_graph(nodes, [("x", None)], {}, [node_ref(3)])
        x = Rng(3).uniform((8,), -1, 1)
        prof = DeviceProfile("t", "blocked", block_size=2)
        full, trace = execute(g, {"x": x}, prof)

        first = extract_subgraph(g, Slice(0, 2))
        second = extract_subgraph(g, Slice(2, 4))
        mid, _ = execute(first.graph, {"ph_input_x": x}, prof)
        out, _ = execute(second.graph, {"ph_node_1": mid[0]}, prof)
        assert np.array_equal(out[0].data, full[0].data)

    def test_weights_shared_not_copied(self):
        g = two_node_chain()
        module = extract_subgraph(g, Slice(0, 1))
        assert module.graph.weights["w"] is g.weights["w"]


class TestPartition:
    def test_even_split(self):
        children = partition(Slice(0, 10), 2)
        assert [(c.start, c.end) for c in children] == [(0, 5), (5, 10)]

    def test_ceil_floor_rule(self):
        children = partition(Slice(0, 5), 4)
        assert [len(c) for c in children] == [2, 1, 1, 1]

    def test_degenerate_single_node(self):
        children = partition(Slice(0, 1), 4)
        assert [(c.start, c.end) for c in children] == [(0, 1)]

    def test_short_slice_one_node_per_child(self):
        children = partition(Slice(3, 6), 4)
        assert [(c.start, c.end) for c in children] == [(3, 4), (4, 5), (5, 6)]

    def test_n_too_small(self):
        with pytest.raises(ValueError):
            partition(Slice(0, 4), 1)

    @given(st.integers(1, 500), st.integers(2, 12))
    @settings(max_examples=100, deadline=None)
    def test_children_cover_parent_without_overlap(self, length, n):
        s = Slice(10, 10 + length)
        children = partition(s, n)
        assert children[0].start == s.start
        assert children[-1].end == s.end
        for a, b in zip(children, children[1:]):
            assert a.end == b.start
        sizes = [len(c) for c in children]
        assert max(sizes) - min(sizes) <= 1
        assert partition(s, n) == children  # deterministic


class TestGraphFile:
    def test_round_trip(self, tmp_path):
        g = two_node_chain()
        save_graph(tmp_path / "g.json", g, tmp_path / "w")
        back = load_graph(tmp_path / "g.json", tmp_path / "w")
        assert back.n_nodes == g.n_nodes
        assert back.nodes[0].kind == "matmul"
        assert back.inputs == g.inputs
        assert np.array_equal(back.weights["w"].data, g.weights["w"].data)
        x = Rng(2).uniform((2, 4), -1, 1)
        prof = DeviceProfile("t", "sequential")
        a, _ = execute(g, {"x": x}, prof)
        b, _ = execute(back, {"x": x}, prof)
        assert np.array_equal(a[0].data, b[0].data)


def test_partition_chained_execution_equivalence():
    """Running an N-way partition's children in order with forwarded
    frontier tensors reproduces the parent trace bitwise, per profile."""
    from fpverify.models import build_mlp

    spec = build_mlp(batch=4, hidden=32, in_dim=16)
    g = spec.graph
    x = spec.make_inputs(Rng(17))
    for prof in (DeviceProfile("s", "sequential"),
                 DeviceProfile("p", "permuted", perm_seed=3, fma=True)):
        _, full_trace = execute(g, x, prof)
        for n in (2, 3, 5):
            values = {}  # parent node index -> tensor
            for child in partition(g.full_slice(), n):
                module = extract_subgraph(g, child)
                feed = {}
                for ref in module.placeholder_refs:
                    cat, key = parse_ref(ref)
                    feed["ph_" + ref.replace(":", "_")] = (
                        x[key] if cat == "input" else values[key]
                    )
                outs, _ = execute(module.graph, feed, prof)
                for local, parent_idx in zip(outs, module.out_nodes):
                    values[parent_idx] = local
            for idx, tensor in values.items():
                assert np.array_equal(tensor.data, full_trace.tensors[idx].data), (
                    f"divergence at node {idx} with n={n}, profile {prof.id}"
                )
