import hashlib
import json

import numpy as np
import pytest

from fpverify.commitments import (Commitment, MerkleProof, MerkleTree, build_tree,
                                  canon_tensor, graph_tree, interface_hash,
                                  leaf_digest, make_commitment, make_subgraph_record,
                                  op_signature, prove, sha256, thresholds_tree, verify,
                                  verify_commitment, verify_subgraph_record, weight_tree)
from fpverify.engine import default_profiles, execute
from fpverify.graph import Slice, input_ref, make_node, weight_ref
from fpverify.models import build_mlp
from fpverify.tensor import Rng, tensor_new

GOLDEN = json.load(open("tests/golden/commitment_vectors.json"))


class TestCanonTensor:
    def test_deterministic(self):
        t = Rng(1).uniform((2, 3), -1, 1)
        assert canon_tensor(t) == canon_tensor(t)

    def test_payload_bit_sensitivity(self):
        a = tensor_new([2], [1.0, 2.0])
        b = tensor_new([2], [1.0, np.nextafter(np.float32(2.0), np.float32(3.0))])
        assert canon_tensor(a) != canon_tensor(b)

    def test_shape_in_canon(self):
        a = tensor_new([2, 3], [1, 2, 3, 4, 5, 6])
        b = tensor_new([3, 2], [1, 2, 3, 4, 5, 6])
        assert canon_tensor(a) != canon_tensor(b)

    def test_golden_vector(self):
        t = tensor_new([2, 2], [1.0, -2.0, 0.5, 4.0])
        assert sha256(canon_tensor(t)).hex() == GOLDEN["canon_2x2"]

    def test_layout(self):
        t = tensor_new([2], [1.0, 2.0])
        raw = canon_tensor(t)
        assert raw[0] == 0  # fp32 code
        assert raw[1:5] == (1).to_bytes(4, "little")  # rank
        assert raw[5:13] == (2).to_bytes(8, "little")  # dim
        assert raw[13:21] == (1).to_bytes(8, "little")  # contiguous stride


class TestOpSignature:
    def test_name_sensitivity(self):
        a = make_node("a", "relu", [input_ref("x")])
        b = make_node("b", "relu", [input_ref("x")])
        assert op_signature(a) != op_signature(b)

    def test_attr_sensitivity(self):
        a = make_node("s", "softmax", [input_ref("x")], {"axis": -1})
        b = make_node("s", "softmax", [input_ref("x")], {"axis": 0})
        assert op_signature(a) != op_signature(b)

    def test_deterministic(self):
        n = make_node("s", "slice", [input_ref("x")], {"axis": 1, "start": 0, "stop": 2})
        assert op_signature(n) == op_signature(n)

    def test_golden_vector(self):
        n = make_node("mm", "matmul", [input_ref("x"), weight_ref("w")],
                      {"transpose_b": 1})
        assert sha256(op_signature(n)).hex() == GOLDEN["signature_matmul"]


def reference_tree_root(leaves):
    """Independent reference implementation: recursive, list-based."""
    level = [hashlib.sha256(b"\x00" + leaf).digest() for leaf in leaves]
    while len(level) > 1:
        nxt = []
        for i in range(0, len(level), 2):
            left = level[i]
            right = level[i + 1] if i + 1 < len(level) else level[i]
            nxt.append(hashlib.sha256(b"\x01" + left + right).digest())
        level = nxt
    return level[0]


class TestMerkleTree:
    def test_single_leaf_root(self):
        tree = build_tree([b"hello"])
        assert tree.root == hashlib.sha256(b"\x00hello").digest()

    def test_two_leaf_root(self):
        d0 = leaf_digest(b"a")
        d1 = leaf_digest(b"b")
        tree = build_tree([b"a", b"b"])
        assert tree.root == hashlib.sha256(b"\x01" + d0 + d1).digest()

    def test_five_leaves_match_reference(self):
        leaves = [f"leaf{i}".encode() for i in range(5)]
        assert build_tree(leaves).root == reference_tree_root(leaves)

    def test_many_sizes_match_reference(self):
        for n in (1, 2, 3, 4, 7, 8, 9, 31, 64, 100):
            leaves = [bytes([i % 256]) * 4 for i in range(n)]
            assert build_tree(leaves).root == reference_tree_root(leaves)

    def test_zero_leaves_rejected(self):
        with pytest.raises(ValueError):
            build_tree([])

    def test_golden_root(self):
        leaves = [f"leaf{i}".encode() for i in range(5)]
        assert build_tree(leaves).root.hex() == GOLDEN["tree_root_5"]


class TestProofs:
    def test_round_trip_all_indices(self):
        for n in (1, 2, 3, 5, 8, 13):
            leaves = [f"L{i}".encode() for i in range(n)]
            tree = build_tree(leaves)
            for i in range(n):
                proof = prove(tree, i)
                assert verify(tree.root, leaves[i], proof)
                assert len(proof.siblings) == (n - 1).bit_length() if n > 1 else True

    def test_proof_size(self):
        tree = build_tree([bytes([i]) for i in range(5)])
        assert len(prove(tree, 0).siblings) == 3  # ceil(log2(5))

    def test_flipped_leaf_rejected(self):
        leaves = [b"aaa", b"bbb", b"ccc"]
        tree = build_tree(leaves)
        proof = prove(tree, 1)
        assert not verify(tree.root, b"bbc", proof)

    def test_index_out_of_range(self):
        tree = build_tree([b"x"])
        with pytest.raises(IndexError):
            prove(tree, 1)

    def test_randomized_tamper_sweep(self):
        gen = np.random.default_rng(9)
        rejections = 0
        trials = 300
        for t in range(trials):
            n = int(gen.integers(2, 20))
            leaves = [gen.bytes(8) for _ in range(n)]
            tree = build_tree(leaves)
            i = int(gen.integers(0, n))
            proof = prove(tree, i)
            mode = t % 3
            if mode == 0:  # flip a bit in the leaf
                raw = bytearray(leaves[i])
                raw[int(gen.integers(0, len(raw)))] ^= 1 << int(gen.integers(0, 8))
                ok = verify(tree.root, bytes(raw), proof)
            elif mode == 1:  # flip a bit in a sibling digest
                sibs = list(proof.siblings)
                j = int(gen.integers(0, len(sibs)))
                raw = bytearray(sibs[j])
                raw[int(gen.integers(0, 32))] ^= 1 << int(gen.integers(0, 8))
                sibs[j] = bytes(raw)
                bad = MerkleProof(proof.leaf_index, tuple(sibs), proof.directions)
                ok = verify(tree.root, leaves[i], bad)
            else:  # flip a bit in the root
                raw = bytearray(tree.root)
                raw[int(gen.integers(0, 32))] ^= 1 << int(gen.integers(0, 8))
                ok = verify(bytes(raw), leaves[i], proof)
            if not ok:
                rejections += 1
        assert rejections == trials

    def test_wire_round_trip(self):
        tree = build_tree([f"L{i}".encode() for i in range(9)])
        proof = prove(tree, 4)
        wire = proof.to_wire()
        assert wire[0] == 1  # version byte
        back = MerkleProof.from_wire(wire)
        assert back == proof
        assert verify(tree.root, b"L4", back)

    def test_golden_proof_wire(self):
        tree = build_tree([f"leaf{i}".encode() for i in range(5)])
        assert prove(tree, 2).to_wire().hex() == GOLDEN["proof_wire_5_2"]


class TestInterfaceHash:
    def test_empty(self):
        assert interface_hash([]) == hashlib.sha256(b"").digest()

    def test_single(self):
        t = tensor_new([2], [1, 2])
        inner = hashlib.sha256(canon_tensor(t)).digest()
        assert interface_hash([t]) == hashlib.sha256(inner).digest()

    def test_order_sensitive(self):
        a = tensor_new([1], [1.0])
        b = tensor_new([1], [2.0])
        assert interface_hash([a, b]) != interface_hash([b, a])


class TestCommitment:
    def setup_method(self):
        self.meta = {"device": "seq", "kernel": "v1", "dtype": "fp32", "window": 10}
        self.x = [tensor_new([2], [1, 2])]
        self.y = [tensor_new([2], [3, 4])]
        self.roots = (sha256(b"w"), sha256(b"g"), sha256(b"e"))

    def test_round_trip(self):
        c = make_commitment(*self.roots, self.x, self.y, self.meta)
        assert verify_commitment(c, self.x, self.y)

    def test_altered_output_rejected(self):
        c = make_commitment(*self.roots, self.x, self.y, self.meta)
        assert not verify_commitment(c, self.x, [tensor_new([2], [3, 5])])

    def test_altered_window_rejected(self):
        c = make_commitment(*self.roots, self.x, self.y, self.meta)
        tampered = Commitment(
            c0=c.c0, r_w=c.r_w, r_g=c.r_g, r_e=c.r_e, input_digest=c.input_digest,
            output_digest=c.output_digest, meta={**self.meta, "window": 11},
        )
        assert not verify_commitment(tampered, self.x, self.y)

    def test_malformed_meta_rejected(self):
        with pytest.raises(ValueError):
            make_commitment(*self.roots, self.x, self.y, {"bad": [1, 2]})

    def test_json_round_trip(self):
        c = make_commitment(*self.roots, self.x, self.y, self.meta)
        back = Commitment.from_json(c.to_json())
        assert back == c


class TestSubgraphRecord:
    def build(self):
        spec = build_mlp(batch=4, hidden=32, in_dim=16)
        g = spec.graph
        x = spec.make_inputs(Rng(11))
        _, trace = execute(g, x, default_profiles()[0])
        wtree, wnames = weight_tree(g.weights)
        gtree = graph_tree(g)
        return g, x, trace, wtree, wnames, gtree

    def frontier_tensors(self, g, s, trace, x):
        from fpverify.graph import frontiers

        fr = frontiers(g, s)
        ins = ([x[n] for n in fr.in_inputs] + [g.weights[n] for n in fr.in_weights]
               + [trace.tensors[i] for i in fr.in_nodes])
        outs = [trace.tensors[i] for i in fr.out_nodes]
        return ins, outs

    def test_honest_record_verifies(self):
        g, x, trace, wtree, wnames, gtree = self.build()
        s = Slice(3, 9)
        rec = make_subgraph_record(g, s, trace.tensors, x, wtree, wnames, gtree)
        ins, outs = self.frontier_tensors(g, s, trace, x)
        assert verify_subgraph_record(rec, g, wtree.root, gtree.root, ins, outs)

    def test_tampered_h_out_fails(self):
        g, x, trace, wtree, wnames, gtree = self.build()
        s = Slice(3, 9)
        rec = make_subgraph_record(g, s, trace.tensors, x, wtree, wnames, gtree)
        ins, outs = self.frontier_tensors(g, s, trace, x)
        from dataclasses import replace

        bad = replace(rec, h_out=sha256(b"forged"))
        assert not verify_subgraph_record(bad, g, wtree.root, gtree.root, ins, outs)

    def test_swapped_weight_from_other_model_fails(self):
        g, x, trace, wtree, wnames, gtree = self.build()
        s = Slice(0, 3)
        rec = make_subgraph_record(g, s, trace.tensors, x, wtree, wnames, gtree)
        ins, outs = self.frontier_tensors(g, s, trace, x)
        other = build_mlp(seed=99, batch=4, hidden=32, in_dim=16).graph
        assert not verify_subgraph_record(rec, other, wtree.root, gtree.root, ins, outs)

    def test_weight_tree_order(self):
        g = self.build()[0]
        _, wnames = weight_tree(g.weights)
        assert wnames == sorted(g.weights)


def test_thresholds_tree_chunked_per_operator():
    doc = {
        "version": 1, "alpha": 3.0, "epsilon": 1e-12, "grid": [0, 50, 100],
        "ops": [
            {"name": "a", "tau_abs": [0, 1, 2], "tau_rel": [0, 1, 2]},
            {"name": "b", "tau_abs": [0, 2, 4], "tau_rel": [0, 2, 4]},
        ],
    }
    tree = thresholds_tree(doc)
    assert tree.n_leaves == 3  # header + 2 operator chunks
    doc2 = json.loads(json.dumps(doc))
    doc2["ops"][1]["tau_abs"][2] = 5
    assert thresholds_tree(doc2).root != tree.root
