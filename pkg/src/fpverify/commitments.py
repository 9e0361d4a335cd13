"""Canonical serialization, SHA-256 Merkle trees, inclusion proofs,
interface hashes, result commitments, and verifiable subgraph records.

Byte formats are fixed here so independent parties agree:
  - canon tensor: u8 dtype code, u32 rank, rank x u64 LE dims, rank x u64 LE
    contiguous element strides, raw little-endian IEEE-754 payload.
  - leaf digest H(0x00 || bytes); internal H(0x01 || left || right); an odd
    node at any level is paired with itself.
  - proof wire: u8 version, u32 leaf index, u8 depth, then per level one
    direction byte (0 = sibling on the right) and a 32-byte sibling digest.
"""

from __future__ import annotations

import hashlib
import json
import struct
from dataclasses import dataclass

import numpy as np

from .graph import Graph, OpNode, Slice, frontiers, parse_ref
from .tensor import Tensor

PROOF_WIRE_VERSION = 1

_LEAF_TAG = b"\x00"
_NODE_TAG = b"\x01"


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def canonical_json_bytes(obj) -> bytes:
    return json.dumps(obj, sort_keys=True, separators=(",", ":")).encode("utf-8")


def canon_tensor(t) -> bytes:
    """Deterministic byte encoding of a tensor (payload, dtype, shape, stride)."""
    if isinstance(t, Tensor):
        arr = t.array
    else:
        arr = np.asarray(t)
    if arr.dtype == np.float32:
        code, dt = 0, np.dtype("<f4")
    elif arr.dtype == np.float64:
        code, dt = 1, np.dtype("<f8")
    else:
        raise ValueError(f"unsupported dtype {arr.dtype}")
    shape = arr.shape
    strides = []
    acc = 1
    for d in reversed(shape):
        strides.append(acc)
        acc *= d
    strides.reverse()
    head = struct.pack("<BI", code, len(shape))
    dims = b"".join(struct.pack("<Q", d) for d in shape)
    strd = b"".join(struct.pack("<Q", s) for s in strides)
    return head + dims + strd + np.ascontiguousarray(arr, dtype=dt).tobytes()


def tensor_digest(t) -> str:
    return sha256(canon_tensor(t)).hex()


def op_signature(node: OpNode) -> bytes:
    """Canonical encoding of (name, op, target kind, input refs, attrs)."""
    return canonical_json_bytes(
        {
            "name": node.name,
            "op": "call",
            "target": node.kind,
            "args": list(node.inputs),
            "kwargs": {k: v for k, v in node.attrs},
        }
    )


@dataclass(frozen=True)
class MerkleProof:
    leaf_index: int
    siblings: tuple[bytes, ...]
    directions: tuple[int, ...]  # 1 when the sibling sits to the right

    def to_wire(self) -> bytes:
        out = [struct.pack("<BIB", PROOF_WIRE_VERSION, self.leaf_index, len(self.siblings))]
        for d, s in zip(self.directions, self.siblings):
            out.append(struct.pack("<B", d))
            out.append(s)
        return b"".join(out)

    @classmethod
    def from_wire(cls, data: bytes) -> "MerkleProof":
        version, index, depth = struct.unpack_from("<BIB", data, 0)
        if version != PROOF_WIRE_VERSION:
            raise ValueError(f"unsupported proof version {version}")
        off = 6
        sibs, dirs = [], []
        for _ in range(depth):
            if data[off] not in (0, 1):
                raise ValueError(f"invalid direction byte {data[off]}")
            dirs.append(data[off])
            sibs.append(data[off + 1 : off + 33])
            off += 33
        if off != len(data):
            raise ValueError("trailing bytes in proof wire")
        return cls(leaf_index=index, siblings=tuple(sibs), directions=tuple(dirs))


class MerkleTree:
    """SHA-256 tree with 0x00/0x01 domain separation and odd-leaf duplication."""

    def __init__(self, leaf_digests: list[bytes]):
        if not leaf_digests:
            raise ValueError("merkle tree requires at least one leaf")
        self.levels = [list(leaf_digests)]
        while len(self.levels[-1]) > 1:
            prev = self.levels[-1]
            nxt = []
            for i in range(0, len(prev), 2):
                left = prev[i]
                right = prev[i + 1] if i + 1 < len(prev) else prev[i]
                nxt.append(sha256(_NODE_TAG + left + right))
            self.levels.append(nxt)

    @property
    def root(self) -> bytes:
        return self.levels[-1][0]

    @property
    def n_leaves(self) -> int:
        return len(self.levels[0])


def leaf_digest(data: bytes) -> bytes:
    return sha256(_LEAF_TAG + data)


def build_tree(leaves: list[bytes]) -> MerkleTree:
    return MerkleTree([leaf_digest(x) for x in leaves])


def prove(tree: MerkleTree, index: int) -> MerkleProof:
    if not (0 <= index < tree.n_leaves):
        raise IndexError(f"leaf index {index} out of range")
    sibs, dirs = [], []
    idx = index
    for level in tree.levels[:-1]:
        sib = idx ^ 1
        if sib >= len(level):
            sib = idx  # odd node pairs with itself
        sibs.append(level[sib])
        dirs.append(1 if sib > idx or sib == idx else 0)
        idx //= 2
    return MerkleProof(leaf_index=index, siblings=tuple(sibs), directions=tuple(dirs))


def verify(root: bytes, leaf: bytes, proof: MerkleProof) -> bool:
    node = leaf_digest(leaf)
    for d, sib in zip(proof.directions, proof.siblings):
        if sib == node and d != 1:
            return False  # self-paired levels are canonically right-siblinged
        if d:
            node = sha256(_NODE_TAG + node + sib)
        else:
            node = sha256(_NODE_TAG + sib + node)
    return node == root


def interface_hash(tensors) -> bytes:
    """H over the concatenated per-tensor digests, order-sensitive."""
    return sha256(b"".join(sha256(canon_tensor(t)) for t in tensors))


def weight_tree(weights: dict[str, Tensor]) -> tuple[MerkleTree, list[str]]:
    """Weight leaves in lexicographic parameter-name order."""
    names = sorted(weights)
    tree = build_tree([canon_tensor(weights[n]) for n in names])
    return tree, names


def graph_tree(g: Graph) -> MerkleTree:
    return build_tree([op_signature(n) for n in g.nodes])


@dataclass(frozen=True)
class Commitment:
    c0: bytes
    r_w: bytes
    r_g: bytes
    r_e: bytes
    input_digest: bytes
    output_digest: bytes
    meta: dict

    def to_json(self) -> dict:
        return {
            "c0": self.c0.hex(),
            "r_w": self.r_w.hex(),
            "r_g": self.r_g.hex(),
            "r_e": self.r_e.hex(),
            "input_digest": self.input_digest.hex(),
            "output_digest": self.output_digest.hex(),
            "meta": self.meta,
        }

    @classmethod
    def from_json(cls, doc: dict) -> "Commitment":
        return cls(
            c0=bytes.fromhex(doc["c0"]),
            r_w=bytes.fromhex(doc["r_w"]),
            r_g=bytes.fromhex(doc["r_g"]),
            r_e=bytes.fromhex(doc["r_e"]),
            input_digest=bytes.fromhex(doc["input_digest"]),
            output_digest=bytes.fromhex(doc["output_digest"]),
            meta=doc["meta"],
        )


def _meta_bytes(meta: dict) -> bytes:
    for k, v in meta.items():
        if not isinstance(k, str) or not isinstance(v, (str, int, float, bool)):
            raise ValueError(f"malformed meta entry {k!r}: {v!r}")
    return canonical_json_bytes(meta)


def make_commitment(r_w: bytes, r_g: bytes, r_e: bytes, input_tensors, output_tensors,
                    meta: dict) -> Commitment:
    h_x = interface_hash(input_tensors)
    h_y = interface_hash(output_tensors)
    c0 = sha256(r_w + r_g + h_x + h_y + _meta_bytes(meta))
    return Commitment(c0=c0, r_w=r_w, r_g=r_g, r_e=r_e,
                      input_digest=h_x, output_digest=h_y, meta=meta)


def verify_commitment(c: Commitment, input_tensors=None, output_tensors=None) -> bool:
    h_x = interface_hash(input_tensors) if input_tensors is not None else c.input_digest
    h_y = interface_hash(output_tensors) if output_tensors is not None else c.output_digest
    if h_x != c.input_digest or h_y != c.output_digest:
        return False
    try:
        expected = sha256(c.r_w + c.r_g + h_x + h_y + _meta_bytes(c.meta))
    except ValueError:
        return False
    return expected == c.c0


def thresholds_tree(threshold_doc: dict) -> MerkleTree:
    """r_e commits to the canonical threshold file, chunked per operator
    entry with one header chunk for the shared parameters."""
    header = {k: threshold_doc[k] for k in ("version", "alpha", "epsilon", "grid")}
    chunks = [canonical_json_bytes(header)]
    chunks += [canonical_json_bytes(entry) for entry in threshold_doc["ops"]]
    return build_tree(chunks)


@dataclass(frozen=True)
class SubgraphRecord:
    """Proposer-published summary of one child slice: indices, interface
    hashes, and inclusion proofs for every referenced weight and node
    signature."""

    start: int
    end: int
    h_in: bytes
    h_out: bytes
    weight_proofs: tuple[tuple[str, MerkleProof], ...]
    sig_proofs: tuple[tuple[int, MerkleProof], ...]


def _frontier_tensors(fr, g: Graph, trace_tensors, inputs):
    ins = (
        [inputs[n] for n in fr.in_inputs]
        + [g.weights[n] for n in fr.in_weights]
        + [trace_tensors[i] for i in fr.in_nodes]
    )
    outs = [trace_tensors[i] for i in fr.out_nodes]
    return ins, outs


def make_subgraph_record(g: Graph, s: Slice, trace_tensors, inputs,
                         wtree: MerkleTree, wnames: list[str],
                         gtree: MerkleTree) -> SubgraphRecord:
    fr = frontiers(g, s)
    ins, outs = _frontier_tensors(fr, g, trace_tensors, inputs)

    referenced_weights = set()
    for i in range(s.start, s.end):
        for ref in g.nodes[i].inputs:
            cat, key = parse_ref(ref)
            if cat == "weight":
                referenced_weights.add(key)
    name_to_leaf = {n: i for i, n in enumerate(wnames)}
    weight_proofs = tuple(
        (name, prove(wtree, name_to_leaf[name])) for name in sorted(referenced_weights)
    )
    sig_proofs = tuple((i, prove(gtree, i)) for i in range(s.start, s.end))
    return SubgraphRecord(
        start=s.start, end=s.end,
        h_in=interface_hash(ins), h_out=interface_hash(outs),
        weight_proofs=weight_proofs, sig_proofs=sig_proofs,
    )


def verify_subgraph_record(record: SubgraphRecord, g: Graph, r_w: bytes, r_g: bytes,
                           in_tensors, out_tensors) -> bool:
    """The challenger's three checks: weight membership, signature
    membership, then interface hashes recomputed from observed tensors."""
    for name, proof in record.weight_proofs:
        if name not in g.weights or not verify(r_w, canon_tensor(g.weights[name]), proof):
            return False
    for index, proof in record.sig_proofs:
        if not (0 <= index < g.n_nodes):
            return False
        if not verify(r_g, op_signature(g.nodes[index]), proof):
            return False
    if interface_hash(in_tensors) != record.h_in:
        return False
    if interface_hash(out_tensors) != record.h_out:
        return False
    return True
