"""Four-phase optimistic verification as a multi-actor simulation over an
append-only ledger: challenge windows, N-way threshold-guided localization,
per-round timeouts, bonds, and single-operator leaf adjudication.

All protocol state is a pure fold over ledger entries, so replaying a
transcript reproduces the terminal DisputeState exactly. Actors only ever
talk through ledger appends; the driver schedules them deterministically.
"""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import commitments as cmt
from .bounds import FpModel, op_bound
from .calibration import ThresholdSet, percentile_profile
from .engine import (DeviceProfile, apply_op, execute, graph_flops, node_flops,
                     run_subgraph)
from .graph import Graph, Slice, extract_subgraph, frontiers, parse_ref, partition
from .tensor import Rng, Tensor


class ProtocolError(RuntimeError):
    pass


# ---------------------------------------------------------------- ledger


def encode_tensor(t: Tensor) -> dict:
    return {
        "shape": list(t.shape),
        "data": base64.b64encode(t.data.astype("<f4").tobytes()).decode("ascii"),
    }


def decode_tensor(doc: dict) -> Tensor:
    raw = base64.b64decode(doc["data"])
    arr = np.frombuffer(raw, dtype="<f4")
    return Tensor(tuple(doc["shape"]), arr.copy())


@dataclass(frozen=True)
class LedgerEntry:
    seq: int
    tick: int
    sender: str
    type: str
    payload_digest: str
    payload: dict

    def to_json(self) -> dict:
        return {
            "seq": self.seq,
            "tick": self.tick,
            "sender": self.sender,
            "type": self.type,
            "payload_digest": self.payload_digest,
            "payload": self.payload,
        }


class Ledger:
    """Append-only total order with a logical tick clock."""

    def __init__(self):
        self.entries: list[LedgerEntry] = []
        self.tick = 0

    def advance(self, ticks: int = 1) -> None:
        self.tick += ticks

    def append(self, sender: str, type: str, payload: dict) -> LedgerEntry:
        digest = cmt.sha256(cmt.canonical_json_bytes(payload)).hex()
        entry = LedgerEntry(
            seq=len(self.entries), tick=self.tick, sender=sender, type=type,
            payload_digest=digest, payload=payload,
        )
        self.entries.append(entry)
        return entry

    def save_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")

    @classmethod
    def load_jsonl(cls, path) -> "Ledger":
        ledger = cls()
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                doc = json.loads(line)
                ledger.entries.append(
                    LedgerEntry(
                        seq=doc["seq"], tick=doc["tick"], sender=doc["sender"],
                        type=doc["type"], payload_digest=doc["payload_digest"],
                        payload=doc["payload"],
                    )
                )
        if ledger.entries:
            ledger.tick = ledger.entries[-1].tick
        return ledger


# ---------------------------------------------------------------- selection rule


def p_max(abs_profile, rel_profile, tau_abs, tau_rel) -> float:
    """Max over the grid and over {abs, rel} of observed/threshold, with a
    zero-threshold guard (0/0 -> 0, otherwise infinity)."""
    if len(abs_profile) != len(tau_abs) or len(rel_profile) != len(tau_rel):
        raise ValueError("percentile grid mismatch between observation and thresholds")
    worst = 0.0
    for obs, tau in ((abs_profile, tau_abs), (rel_profile, tau_rel)):
        obs = np.asarray(obs, dtype=np.float64)
        tau = np.asarray(tau, dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            ratio = np.where(tau > 0.0, obs / np.where(tau > 0.0, tau, 1.0),
                             np.where(obs > 0.0, np.inf, 0.0))
        worst = max(worst, float(np.max(ratio)) if ratio.size else 0.0)
    return worst


def observed_p_max(local: Tensor, claimed: Tensor, thresholds: ThresholdSet,
                   name: str) -> float:
    """p_max of the claimed tensor against the challenger's local value; the
    relative denominator uses the local (re-executed) magnitudes."""
    diff = np.abs(local.data.astype(np.float64) - claimed.data.astype(np.float64))
    abs_p = percentile_profile(diff, thresholds.grid)
    rel_p = percentile_profile(
        diff / (np.abs(local.data.astype(np.float64)) + thresholds.epsilon),
        thresholds.grid,
    )
    op = thresholds.lookup(name)
    return p_max(abs_p, rel_p, op.tau_abs, op.tau_rel)


def screen(local_outputs: list[Tensor], claimed_outputs: list[Tensor],
           output_names: list[str], thresholds: ThresholdSet) -> tuple[bool, dict]:
    """Dispute-worthiness check on the final graph outputs only."""
    details = {}
    for local, claimed, name in zip(local_outputs, claimed_outputs, output_names):
        details[name] = observed_p_max(local, claimed, thresholds, name)
    return any(v > 1.0 for v in details.values()), details


def select_offending(offense_ratios: list[float | None]) -> int | None:
    """Smallest child index whose worst live-out ratio exceeds 1 (strict)."""
    for j, ratio in enumerate(offense_ratios):
        if ratio is not None and ratio > 1.0:
            return j
    return None


# ---------------------------------------------------------------- state machine


@dataclass(frozen=True)
class Verdict:
    winner: str  # "proposer" | "challenger"
    path: str  # unchallenged | timeout | theoretical | committee | unfounded | record
    evidence: tuple[tuple[str, str], ...] = ()


@dataclass
class DisputeState:
    phase: str = "idle"
    round: int = 0
    slice: tuple[int, int] | None = None
    children: tuple[tuple[int, int], ...] | None = None
    n_nodes: int = 0
    n_partition: int = 0
    window_end: int = 0
    deadline: int = 0
    round_timeout: int = 0
    bond: int = 0
    payment: int = 0
    challenger_flops: int = 0
    leaf_index: int | None = None
    outcome: Verdict | None = None
    payouts: tuple[tuple[str, int], ...] | None = None

    def clone(self) -> "DisputeState":
        return replace(self)


def apply_entry(state: DisputeState, entry: LedgerEntry) -> DisputeState:
    """Pure protocol reducer; raises ProtocolError on invalid transitions."""
    s = state.clone()
    t = entry.type
    p = entry.payload

    if t == "commit":
        if s.phase != "idle":
            raise ProtocolError("duplicate commitment")
        s.phase = "committed"
        s.n_nodes = int(p["n_nodes"])
        s.n_partition = int(p["n_partition"])
        s.window_end = entry.tick + int(p["window"])
        s.round_timeout = int(p["round_timeout"])
        s.bond = int(p["bond"])
        s.payment = int(p["payment"])
        return s

    if t == "finalize":
        if s.phase != "committed":
            raise ProtocolError(f"finalize in phase {s.phase}")
        if entry.tick < s.window_end:
            raise ProtocolError("finalize before the challenge window closed")
        s.phase = "decided"
        s.outcome = Verdict(winner="proposer", path="unchallenged")
        return s

    if t == "challenge":
        if s.phase != "committed":
            raise ProtocolError(f"challenge in phase {s.phase}")
        if entry.tick >= s.window_end:
            raise ProtocolError("challenge window closed")
        s.slice = (0, s.n_nodes)
        if s.n_nodes == 1:
            s.phase = "leaf"
            s.leaf_index = 0
        else:
            s.phase = "challenged"
        s.deadline = entry.tick + s.round_timeout
        return s

    if t == "partition":
        if s.phase not in ("challenged", "advanced"):
            raise ProtocolError(f"partition in phase {s.phase}")
        if entry.sender != "proposer":
            raise ProtocolError("only the proposer partitions")
        if entry.tick > s.deadline:
            raise ProtocolError("partition after deadline")
        children = tuple((int(c["start"]), int(c["end"])) for c in p["children"])
        expected = tuple(
            (c.start, c.end) for c in partition(Slice(*s.slice), s.n_partition)
        )
        if children != expected:
            raise ProtocolError("partition does not match the canonical split")
        s.children = children
        s.phase = "partitioned"
        s.deadline = entry.tick + s.round_timeout
        return s

    if t == "select":
        if s.phase != "partitioned":
            raise ProtocolError(f"select in phase {s.phase}")
        if entry.sender != "challenger":
            raise ProtocolError("only the challenger selects")
        if entry.tick > s.deadline:
            raise ProtocolError("selection after deadline")
        j = int(p["child"])
        if not (0 <= j < len(s.children)):
            raise ProtocolError("selected child out of range")
        s.slice = s.children[j]
        s.children = None
        s.round += 1
        s.challenger_flops += int(p["flops"])
        if s.slice[1] - s.slice[0] == 1:
            s.phase = "leaf"
            s.leaf_index = s.slice[0]
        else:
            s.phase = "advanced"
        s.deadline = entry.tick + s.round_timeout
        return s

    if t == "concede":
        if s.phase != "partitioned":
            raise ProtocolError(f"concede in phase {s.phase}")
        s.phase = "decided"
        s.outcome = Verdict(winner="proposer", path="unfounded")
        return s

    if t == "record_invalid":
        if s.phase != "partitioned":
            raise ProtocolError(f"record_invalid in phase {s.phase}")
        s.phase = "decided"
        s.outcome = Verdict(
            winner="challenger", path="record",
            evidence=(("child", str(p["child"])),),
        )
        return s

    if t == "timeout":
        if s.phase in ("decided", "settled", "idle"):
            raise ProtocolError(f"timeout in phase {s.phase}")
        if entry.tick <= s.deadline:
            raise ProtocolError("timeout claimed before the deadline passed")
        party = p["party"]
        winner = "challenger" if party == "proposer" else "proposer"
        s.phase = "decided"
        s.outcome = Verdict(winner=winner, path="timeout",
                            evidence=(("timed_out", party),))
        return s

    if t == "leaf_verdict":
        if s.phase != "leaf":
            raise ProtocolError(f"leaf_verdict in phase {s.phase}")
        s.phase = "decided"
        s.challenger_flops += int(p.get("flops", 0))
        s.outcome = Verdict(
            winner=p["winner"], path=p["path"],
            evidence=tuple((k, str(v)) for k, v in sorted(p["evidence"].items())),
        )
        return s

    if t == "settle":
        if s.phase != "decided":
            raise ProtocolError("settle requires a decided dispute")
        if s.payouts is not None:
            raise ProtocolError("double settlement")
        s.phase = "settled"
        s.payouts = tuple((k, int(v)) for k, v in sorted(p["payouts"].items()))
        return s

    raise ProtocolError(f"unknown ledger entry type {t!r}")


def replay(ledger: Ledger) -> DisputeState:
    """Fold the full transcript into a DisputeState."""
    state = DisputeState()
    for entry in ledger.entries:
        state = apply_entry(state, entry)
    return state


def settle_payouts(state: DisputeState) -> dict[str, int]:
    """Winner takes the loser's bond; an unchallenged finalize just releases
    the user's payment to the proposer."""
    v = state.outcome
    if v is None:
        raise ProtocolError("cannot settle an undecided dispute")
    if v.path == "unchallenged":
        return {"proposer": state.payment, "challenger": 0}
    if v.winner == "proposer":
        return {"proposer": state.payment + state.bond, "challenger": -state.bond}
    return {"proposer": -state.bond, "challenger": state.bond}


# ---------------------------------------------------------------- actors


@dataclass
class ProtocolConfig:
    n_partition: int = 4
    window: int = 10
    round_timeout: int = 10
    bond: int = 100
    payment: int = 10
    committee_size: int = 5
    committee_seed: int = 1234
    fp_model: FpModel = field(default_factory=FpModel)
    meta_extra: dict = field(default_factory=dict)

    def validate(self):
        if self.committee_size % 2 == 0:
            raise ValueError("committee size must be odd")
        if self.n_partition < 2:
            raise ValueError("n_partition must be >= 2")


def make_injection(thresholds: ThresholdSet, name: str, shape, scale: float) -> np.ndarray:
    """Constant additive fault of scale x the committed p100 absolute cap."""
    cap = float(thresholds.lookup(name).tau_abs[-1])
    return np.full(shape, scale * cap, dtype=np.float64)


class Proposer:
    def __init__(self, graph: Graph, inputs: dict[str, Tensor], profile: DeviceProfile,
                 thresholds: ThresholdSet, config: ProtocolConfig,
                 inject: dict[int, np.ndarray] | None = None,
                 corrupt_record: bool = False, stall_round: int | None = None,
                 trace=None):
        self.graph = graph
        self.inputs = inputs
        self.profile = profile
        self.thresholds = thresholds
        self.config = config
        self.inject = inject
        self.corrupt_record = corrupt_record
        self.stall_round = stall_round
        self.wtree, self.wnames = cmt.weight_tree(graph.weights)
        self.gtree = cmt.graph_tree(graph)
        self.etree = cmt.thresholds_tree(thresholds.to_json())
        if trace is not None:
            self.trace = trace
            self.outputs = [trace.tensors[parse_ref(r)[1]] for r in graph.outputs]
        else:
            self.outputs, self.trace = execute(graph, inputs, profile, inject=inject)

    def meta(self) -> dict:
        m = {
            "device": self.profile.id,
            "kernel": "fpverify-engine/1",
            "dtype": "fp32",
            "window": self.config.window,
            "n_partition": self.config.n_partition,
            "round_timeout": self.config.round_timeout,
            "bond": self.config.bond,
            "committee_size": self.config.committee_size,
            "committee_seed": self.config.committee_seed,
            "fp_u": self.config.fp_model.u,
            "fp_lambda": self.config.fp_model.lam,
            "fp_mode": self.config.fp_model.mode,
            "alpha": self.thresholds.alpha,
            "epsilon": self.thresholds.epsilon,
            "r_e": self.etree.root.hex(),
        }
        m.update(self.config.meta_extra)
        return m

    def commitment(self) -> cmt.Commitment:
        input_list = [self.inputs[n] for n in self.graph.input_names()]
        return cmt.make_commitment(
            self.wtree.root, self.gtree.root, self.etree.root,
            input_list, self.outputs, self.meta(),
        )

    def commit_payload(self) -> dict:
        c = self.commitment()
        return {
            "commitment": c.to_json(),
            "n_nodes": self.graph.n_nodes,
            "n_partition": self.config.n_partition,
            "window": self.config.window,
            "round_timeout": self.config.round_timeout,
            "bond": self.config.bond,
            "payment": self.config.payment,
            "outputs": [encode_tensor(t) for t in self.outputs],
        }

    def partition_payload(self, state: DisputeState) -> dict | None:
        if self.stall_round is not None and state.round == self.stall_round:
            return None
        children = partition(Slice(*state.slice), self.config.n_partition)
        docs = []
        for child in children:
            record = cmt.make_subgraph_record(
                self.graph, child, self.trace.tensors, self.inputs,
                self.wtree, self.wnames, self.gtree,
            )
            fr = frontiers(self.graph, child)
            in_docs = {}
            for name in fr.in_inputs:
                in_docs[f"input:{name}"] = encode_tensor(self.inputs[name])
            for idx in fr.in_nodes:
                in_docs[f"node:{idx}"] = encode_tensor(self.trace.tensors[idx])
            out_docs = {str(i): encode_tensor(self.trace.tensors[i]) for i in fr.out_nodes}
            h_out = record.h_out
            if self.corrupt_record:
                h_out = bytes([h_out[0] ^ 1]) + h_out[1:]
            docs.append(
                {
                    "start": child.start,
                    "end": child.end,
                    "h_in": record.h_in.hex(),
                    "h_out": h_out.hex(),
                    "weight_proofs": {
                        name: proof.to_wire().hex() for name, proof in record.weight_proofs
                    },
                    "sig_proofs": {
                        str(i): proof.to_wire().hex() for i, proof in record.sig_proofs
                    },
                    "in_tensors": in_docs,
                    "out_tensors": out_docs,
                }
            )
        return {"round": state.round, "children": docs}


class Challenger:
    def __init__(self, graph: Graph, inputs: dict[str, Tensor], profile: DeviceProfile,
                 thresholds: ThresholdSet, config: ProtocolConfig,
                 force_challenge: bool = False, verify_last_child: bool = False,
                 stall_round: int | None = None):
        self.graph = graph
        self.inputs = inputs
        self.profile = profile
        self.thresholds = thresholds
        self.config = config
        self.force_challenge = force_challenge
        self.verify_last_child = verify_last_child
        self.stall_round = stall_round
        self.wtree, self.wnames = cmt.weight_tree(graph.weights)
        self.gtree = cmt.graph_tree(graph)
        self.local_outputs, self.local_trace = execute(graph, inputs, profile)
        self.output_names = [
            graph.nodes[parse_ref(r)[1]].name for r in graph.outputs
        ]
        self.merkle_checks = 0

    def check_commit(self, payload: dict) -> bool:
        c = cmt.Commitment.from_json(payload["commitment"])
        input_list = [self.inputs[n] for n in self.graph.input_names()]
        claimed = [decode_tensor(d) for d in payload["outputs"]]
        if not cmt.verify_commitment(c, input_list, claimed):
            return False
        return c.r_w == self.wtree.root and c.r_g == self.gtree.root

    def screen_payload(self, payload: dict) -> dict | None:
        claimed = [decode_tensor(d) for d in payload["outputs"]]
        worthy, details = screen(self.local_outputs, claimed, self.output_names,
                                 self.thresholds)
        if not (worthy or self.force_challenge):
            return None
        return {"p_max": {k: float(v) for k, v in details.items()},
                "forced": bool(self.force_challenge and not worthy)}

    def _verify_child(self, doc: dict, child: Slice) -> bool:
        record = cmt.SubgraphRecord(
            start=doc["start"], end=doc["end"],
            h_in=bytes.fromhex(doc["h_in"]), h_out=bytes.fromhex(doc["h_out"]),
            weight_proofs=tuple(
                (name, cmt.MerkleProof.from_wire(bytes.fromhex(wire)))
                for name, wire in sorted(doc["weight_proofs"].items())
            ),
            sig_proofs=tuple(
                (int(i), cmt.MerkleProof.from_wire(bytes.fromhex(wire)))
                for i, wire in sorted(doc["sig_proofs"].items(), key=lambda kv: int(kv[0]))
            ),
        )
        fr = frontiers(self.graph, child)
        try:
            in_tensors = (
                [decode_tensor(doc["in_tensors"][f"input:{n}"]) for n in fr.in_inputs]
                + [self.graph.weights[n] for n in fr.in_weights]
                + [decode_tensor(doc["in_tensors"][f"node:{i}"]) for i in fr.in_nodes]
            )
            out_tensors = [decode_tensor(doc["out_tensors"][str(i)]) for i in fr.out_nodes]
        except KeyError:
            return False
        self.merkle_checks += len(record.weight_proofs) + len(record.sig_proofs)
        return cmt.verify_subgraph_record(
            record, self.graph, self.wtree.root, self.gtree.root, in_tensors, out_tensors
        )

    def _child_offense(self, doc: dict, child: Slice) -> tuple[float, int]:
        """Re-execute one child from its committed inputs; returns the worst
        live-out p_max and the FLOPs spent."""
        module = extract_subgraph(self.graph, child)
        boundary = {}
        for ref in module.placeholder_refs:
            boundary[ref] = decode_tensor(doc["in_tensors"][ref])
        outputs, trace = run_subgraph(module, boundary, self.profile)
        flops = graph_flops(module.graph, trace)
        worst = 0.0
        for local_idx, parent_idx in enumerate(module.out_nodes):
            claimed = decode_tensor(doc["out_tensors"][str(parent_idx)])
            name = self.graph.nodes[parent_idx].name
            ratio = observed_p_max(outputs[local_idx], claimed, self.thresholds, name)
            worst = max(worst, ratio)
        return worst, flops

    def select_payload(self, state: DisputeState, part_payload: dict):
        """Returns ("select", payload), ("concede", payload),
        ("record_invalid", payload), or None when stalling."""
        if self.stall_round is not None and state.round == self.stall_round:
            return None
        docs = part_payload["children"]
        children = [Slice(d["start"], d["end"]) for d in docs]
        for j, (doc, child) in enumerate(zip(docs, children)):
            if not self._verify_child(doc, child):
                return ("record_invalid", {"child": j, "round": state.round})

        ratios: list[float | None] = [None] * len(children)
        flops = 0
        n = len(children)
        last_unchecked = not self.verify_last_child
        check_up_to = n - 1 if last_unchecked else n
        choice = None
        for j in range(check_up_to):
            ratio, spent = self._child_offense(docs[j], children[j])
            ratios[j] = ratio
            flops += spent
            if ratio > 1.0:
                choice = j
                break
        if choice is None:
            offending = select_offending(ratios)
            if offending is not None:
                choice = offending
            elif last_unchecked:
                # all verified children are clean: the offense must sit in the
                # final child, designated by exclusion without re-execution
                choice = n - 1
            else:
                return ("concede", {"round": state.round})
        return (
            "select",
            {
                "round": state.round,
                "child": choice,
                "flops": flops,
                "ratios": {str(j): float(r) for j, r in enumerate(ratios) if r is not None},
            },
        )

    def leaf_payload(self, state: DisputeState, part_payload: dict | None,
                     committee_pool: list[DeviceProfile],
                     commit_payload: dict | None = None) -> dict:
        """Route the single-operator check and produce the leaf verdict."""
        leaf = state.leaf_index
        node = self.graph.nodes[leaf]
        if part_payload is None:
            # degenerate single-op graph: no partition round happened, the
            # leaf inputs are the agreed graph inputs and the claim is y
            claimed = decode_tensor(commit_payload["outputs"][0])
            args = []
            for ref in node.inputs:
                cat, key = parse_ref(ref)
                if cat == "weight":
                    args.append(self.graph.weights[key].array)
                else:
                    args.append(self.inputs[key].array)
        else:
            doc = None
            for child_doc in part_payload["children"]:
                if child_doc["start"] == leaf and child_doc["end"] == leaf + 1:
                    doc = child_doc
                    break
            if doc is None:
                raise ProtocolError("leaf slice missing from final partition round")
            claimed = decode_tensor(doc["out_tensors"][str(leaf)])
            args = []
            for ref in node.inputs:
                cat, key = parse_ref(ref)
                if cat == "weight":
                    args.append(self.graph.weights[key].array)
                else:
                    args.append(decode_tensor(doc["in_tensors"][ref]).array)

        y_ref, eps = op_bound(node, args, self.config.fp_model, self.profile)
        flops = node_flops(node, y_ref.shape, [a.shape for a in args])
        diff = np.abs(claimed.array.astype(np.float64) - y_ref.astype(np.float64))
        evidence = {
            "leaf": leaf,
            "leaf_name": node.name,
            "claimed_digest": cmt.tensor_digest(claimed),
        }

        if bool(np.any(diff > eps)):
            # theoretical path: recompute against the FP64 oracle
            args64 = [a.astype(np.float64) for a in args]
            y_oracle = apply_op(node, args64, None, fp64=True)
            oracle_diff = np.abs(claimed.array.astype(np.float64) - y_oracle)
            ok = bool(np.all(oracle_diff <= eps))
            evidence["max_excess"] = float(np.max(oracle_diff - eps))
            winner = "proposer" if ok else "challenger"
            return {"path": "theoretical", "winner": winner, "evidence": evidence,
                    "flops": flops}

        members = sample_committee(committee_pool, self.config.committee_size,
                                   self.config.committee_seed)
        votes = []
        for member in members:
            y_member = apply_op(node, args, member, fp64=False)
            member_t = Tensor(y_member.shape, np.ascontiguousarray(y_member).reshape(-1))
            ratio = observed_p_max(member_t, claimed, self.thresholds, node.name)
            votes.append(ratio <= 1.0)
        within = sum(votes)
        evidence["votes_within"] = within
        evidence["committee"] = ",".join(m.id for m in members)
        winner = "proposer" if within * 2 > len(votes) else "challenger"
        return {"path": "committee", "winner": winner, "evidence": evidence,
                "flops": flops}


def sample_committee(pool: list[DeviceProfile], size: int, seed: int) -> list[DeviceProfile]:
    """Draw member profiles without replacement using the committed seed."""
    if size % 2 == 0:
        raise ValueError("committee size must be odd")
    if size > len(pool):
        raise ValueError(f"committee size {size} exceeds profile pool {len(pool)}")
    order = Rng(seed).permutation(len(pool))
    return [pool[i] for i in order[:size]]


# ---------------------------------------------------------------- driver


@dataclass
class DisputeResult:
    state: DisputeState
    ledger: Ledger
    forward_flops: int
    merkle_checks: int = 0

    @property
    def verdict(self) -> Verdict | None:
        return self.state.outcome

    def dcr(self) -> dict:
        if self.state.phase != "settled":
            raise ProtocolError("DCR is defined for settled disputes only")
        flops = self.state.challenger_flops
        return {
            "challenger_flops": flops,
            "cost_ratio": flops / self.forward_flops if self.forward_flops else 0.0,
        }


def run_dispute(graph: Graph, inputs: dict[str, Tensor], proposer: Proposer,
                challenger: Challenger, config: ProtocolConfig,
                committee_pool: list[DeviceProfile]) -> DisputeResult:
    """Deterministic single-threaded schedule of the four phases."""
    config.validate()
    ledger = Ledger()
    state = DisputeState()

    def post(sender, type, payload):
        nonlocal state
        entry = ledger.append(sender, type, payload)
        state = apply_entry(state, entry)

    post("proposer", "commit", proposer.commit_payload())
    forward_flops = graph_flops(graph, proposer.trace)

    if not challenger.check_commit(ledger.entries[0].payload):
        raise ProtocolError("commitment failed verification")

    ledger.advance(1)
    challenge = challenger.screen_payload(ledger.entries[0].payload)
    if challenge is None:
        ledger.advance(config.window)
        post("contract", "finalize", {})
        post("contract", "settle", {"payouts": settle_payouts(state)})
        return DisputeResult(state=state, ledger=ledger, forward_flops=forward_flops,
                             merkle_checks=challenger.merkle_checks)

    post("challenger", "challenge", challenge)

    last_partition_payload = None
    while state.phase in ("challenged", "advanced", "partitioned"):
        if state.phase in ("challenged", "advanced"):
            ledger.advance(1)
            payload = proposer.partition_payload(state)
            if payload is None:
                ledger.advance(state.deadline - ledger.tick + 1)
                post("contract", "timeout", {"party": "proposer"})
                break
            last_partition_payload = payload
            post("proposer", "partition", payload)
        else:
            ledger.advance(1)
            action = challenger.select_payload(state, last_partition_payload)
            if action is None:
                ledger.advance(state.deadline - ledger.tick + 1)
                post("contract", "timeout", {"party": "challenger"})
                break
            kind, payload = action
            post("challenger", kind, payload)
            if kind in ("concede", "record_invalid"):
                break

    if state.phase == "leaf":
        ledger.advance(1)
        payload = challenger.leaf_payload(state, last_partition_payload, committee_pool,
                                          commit_payload=ledger.entries[0].payload)
        post("challenger", "leaf_verdict", payload)

    if state.phase == "decided":
        post("contract", "settle", {"payouts": settle_payouts(state)})

    return DisputeResult(state=state, ledger=ledger, forward_flops=forward_flops,
                         merkle_checks=challenger.merkle_checks)
