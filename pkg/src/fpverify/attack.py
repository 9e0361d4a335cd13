"""Bound-aware adversarial attacks: feasible-set projections for both error
models, margin-loss PGD with Adam, target bucketing, and ASR metrics.

Injected perturbations are additive at non-data-movement nodes. Theoretical
caps are frozen from the unperturbed co-execution; empirical caps come from
the committed absolute-percentile curve (relative caps still apply at
verification time but are not part of the projection).
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from .autodiff import GradGraph
from .bounds import FpModel, co_execute
from .calibration import ThresholdSet
from .engine import DeviceProfile, execute
from .graph import DATA_MOVEMENT_KINDS, Graph, parse_ref
from .models import ModelSpec
from .tensor import Rng, Tensor

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

EARLY_STOP_WINDOW = 10
EARLY_STOP_REL = 1e-3

ATTACK_MODES = ("theo-d", "theo-p", "emp", "free")


def margin_loss(logits, c1: int, c2: int) -> float:
    """Attack objective z_c2 - z_c1; positive means the flip succeeded."""
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    if c1 == c2:
        raise ValueError("target class equals the predicted class")
    if int(np.argmax(z)) != c1:
        raise ValueError("c1 must be the argmax of the clean logits")
    return float(z[c2] - z[c1])


def project_theoretical(delta: np.ndarray, tau: np.ndarray, scale: float = 1.0) -> np.ndarray:
    if delta.shape != tau.shape:
        raise ValueError(f"shape mismatch: {delta.shape} vs {tau.shape}")
    cap = scale * tau
    return np.clip(delta, -cap, cap)


def cap_curve(grid, tau_abs) -> tuple[np.ndarray, np.ndarray]:
    """Nondecreasing cap curve over ranks in [0, 1], anchored at (0, 0) and
    linearly interpolated through the committed (percentile, cap) pairs."""
    ranks = [0.0]
    caps = [0.0]
    for p, tau in zip(grid, tau_abs):
        if p <= 0.0:
            continue
        ranks.append(p / 100.0)
        caps.append(float(tau))
    return np.asarray(ranks), np.asarray(caps)


def _rank_caps(n: int, ranks: np.ndarray, caps: np.ndarray, scale: float) -> np.ndarray:
    r = (np.arange(1, n + 1) - 0.5) / n
    c = scale * np.interp(r, ranks, caps)
    return np.maximum.accumulate(c)


class _CapCache(dict):
    """Per-(curve, size) rank-cap vectors; projection is called every
    iteration and the caps never change within an attack."""

    def get_caps(self, key, n, ranks, caps, scale):
        hit = self.get((key, n))
        if hit is None:
            hit = _rank_caps(n, ranks, caps, scale)
            self[(key, n)] = hit
        return hit


def project_empirical(delta: np.ndarray, ranks: np.ndarray, caps: np.ndarray,
                      scale: float = 1.0) -> np.ndarray:
    """Order-statistic projection: sort |delta|, clip the k-th smallest at the
    monotone-repaired cap for rank (k - 1/2)/n, then restore sign and shape."""
    if delta.size == 0:
        raise ValueError("cannot project an empty tensor")
    flat = delta.reshape(-1)
    a = np.abs(flat)
    s = np.sign(flat)
    order = np.argsort(a, kind="stable")
    c = _rank_caps(a.size, ranks, caps, scale)
    clipped = np.minimum(a[order], c)
    out = np.empty_like(a)
    out[order] = clipped
    return (s * out).reshape(delta.shape)


def empirical_feasible(delta: np.ndarray, ranks: np.ndarray, caps: np.ndarray,
                       scale: float = 1.0, slack: float = 1e-12) -> bool:
    """Quantile-function membership test for the empirical feasible set."""
    a = np.sort(np.abs(delta.reshape(-1)))
    c = _rank_caps(a.size, ranks, caps, scale)
    return bool(np.all(a <= c + slack))


@dataclass
class FeasibleSpec:
    """Which error model constrains the attack, at which threshold scale."""

    mode: str  # "theoretical" | "empirical" | "free"
    scale: float = 1.0
    tau: dict = field(default_factory=dict)  # node index -> FP64 cap array
    curves: dict = field(default_factory=dict)  # node index -> (ranks, caps)
    _cache: _CapCache = field(default_factory=_CapCache, repr=False)

    def _ranked(self, index: int, n: int) -> np.ndarray:
        ranks, caps = self.curves[index]
        return self._cache.get_caps(index, n, ranks, caps, self.scale)

    def project(self, index: int, delta: np.ndarray) -> np.ndarray:
        if self.mode == "free":
            return delta
        if self.mode == "theoretical":
            return project_theoretical(delta, self.tau[index], self.scale)
        flat = delta.reshape(-1)
        a = np.abs(flat)
        order = np.argsort(a)
        c = self._ranked(index, a.size)
        clipped = np.minimum(a[order], c)
        out = np.empty_like(a)
        out[order] = clipped
        return (np.sign(flat) * out).reshape(delta.shape)

    def median_cap(self, index: int, size: int) -> float:
        if self.mode == "free":
            return float("nan")
        if self.mode == "theoretical":
            return float(np.median(self.scale * self.tau[index]))
        return float(np.median(self._ranked(index, size)))


def injectable_nodes(g: Graph) -> list[int]:
    return [n.index for n in g.nodes if n.kind not in DATA_MOVEMENT_KINDS]


def theoretical_feasible_spec(g: Graph, inputs: dict[str, Tensor], profile: DeviceProfile,
                              model: FpModel, scale: float = 1.0,
                              nodes: list[int] | None = None) -> FeasibleSpec:
    """Freeze per-node theoretical caps from the unperturbed co-execution."""
    _, bound_list = co_execute(g, inputs, profile, model)
    nodes = injectable_nodes(g) if nodes is None else nodes
    tau = {i: bound_list[i].array for i in nodes}
    return FeasibleSpec(mode="theoretical", scale=scale, tau=tau)


def empirical_feasible_spec(g: Graph, thresholds: ThresholdSet, scale: float = 1.0,
                            nodes: list[int] | None = None) -> FeasibleSpec:
    nodes = injectable_nodes(g) if nodes is None else nodes
    curves = {}
    for i in nodes:
        op = thresholds.lookup(g.nodes[i].name)
        curves[i] = cap_curve(thresholds.grid, op.tau_abs)
    return FeasibleSpec(mode="empirical", scale=scale, curves=curves)


def free_feasible_spec() -> FeasibleSpec:
    return FeasibleSpec(mode="free")


@dataclass
class AttackResult:
    success: bool
    iterations: int
    margin_before: float  # m0 = z_c1 - z_c2 > 0
    margin_after: float  # m' after the attack
    delta_m: float  # m0 - m'
    delta_rel: float  # delta_m / m0
    bucket: int = -1
    target: int = -1


def pgd_attack(g: Graph, inputs: dict[str, Tensor], feasible: FeasibleSpec, c2: int,
               budget: int = 500, inject: list[int] | None = None,
               free_step: float = 0.05, stop_on_success: bool = True) -> AttackResult:
    """Adam-driven PGD over additive per-node perturbations.

    Per-node stepsize is 1/4 of the median of that node's cap (a fixed step
    in free mode). Early stopping follows the printed rule: the last 10
    updates changed the margin by < 1e-3 |m0| each AND the margin itself is
    below 1e-3 |m0|; the iteration budget is the hard fallback.
    """
    if budget <= 0:
        raise ValueError("budget must be positive")
    grad_graph = GradGraph(g)
    inputs64 = {k: t.astype64() for k, t in inputs.items()}
    out_index = parse_ref(g.outputs[0])[1]
    sites = injectable_nodes(g) if inject is None else list(inject)

    clean = grad_graph.forward(inputs64)
    logits0 = clean[out_index].reshape(-1) if clean[out_index].ndim == 1 else clean[out_index][0]
    c1 = int(np.argmax(logits0))
    if c1 == c2:
        raise ValueError("target class equals the clean prediction")
    m0 = float(logits0[c1] - logits0[c2])

    deltas = {i: np.zeros(clean[i].shape, dtype=np.float64) for i in sites}
    steps = {}
    for i in sites:
        eta = feasible.median_cap(i, int(np.prod(clean[i].shape)))
        steps[i] = free_step if feasible.mode == "free" else 0.25 * eta
    adam_m = {i: np.zeros_like(deltas[i]) for i in sites}
    adam_v = {i: np.zeros_like(deltas[i]) for i in sites}

    margins = []
    iterations = 0
    cot = np.zeros(clean[out_index].shape, dtype=np.float64)
    if cot.ndim == 1:
        cot[c2], cot[c1] = 1.0, -1.0
    else:
        cot[0, c2], cot[0, c1] = 1.0, -1.0

    values = clean
    margin = m0
    for t in range(1, budget + 1):
        iterations = t
        grads = grad_graph.backward(values, inputs64, out_index, cot)
        b1t = 1.0 - ADAM_BETA1**t
        b2t = 1.0 - ADAM_BETA2**t
        for i in sites:
            if steps[i] == 0.0:
                continue
            gi = grads.get(i)
            if gi is None:
                continue
            adam_m[i] = ADAM_BETA1 * adam_m[i] + (1.0 - ADAM_BETA1) * gi
            adam_v[i] = ADAM_BETA2 * adam_v[i] + (1.0 - ADAM_BETA2) * gi * gi
            step = steps[i] * (adam_m[i] / b1t) / (np.sqrt(adam_v[i] / b2t) + ADAM_EPS)
            deltas[i] = feasible.project(i, deltas[i] + step)

        values = grad_graph.forward(inputs64, deltas)
        z = values[out_index].reshape(-1) if values[out_index].ndim == 1 else values[out_index][0]
        margin = float(z[c1] - z[c2])
        margins.append(margin)
        if stop_on_success and margin < 0.0:
            break
        if len(margins) > EARLY_STOP_WINDOW:
            recent = margins[-(EARLY_STOP_WINDOW + 1):]
            tol = EARLY_STOP_REL * abs(m0)
            stalled = all(
                abs(recent[k + 1] - recent[k]) < tol for k in range(EARLY_STOP_WINDOW)
            )
            if stalled and abs(margin) < tol:
                break

    delta_m = m0 - margin
    return AttackResult(
        success=margin < 0.0, iterations=iterations, margin_before=m0,
        margin_after=margin, delta_m=delta_m,
        delta_rel=delta_m / m0 if m0 != 0.0 else 0.0, target=c2,
    )


def bucket_targets(logits, rng: Rng, buckets: int = 5,
                   allow_fallback: bool = False) -> list[tuple[int, int]]:
    """One sampled target class per logit-margin quintile.

    Non-argmax classes are ranked by their margin to the prediction; bucket 0
    holds the smallest margins. With fewer classes than buckets the caller
    must opt into a single-bucket fallback.
    """
    z = np.asarray(logits, dtype=np.float64).reshape(-1)
    c1 = int(np.argmax(z))
    others = [c for c in range(z.size) if c != c1]
    if len(others) < buckets:
        if not allow_fallback:
            raise ValueError(
                f"{z.size} classes cannot fill {buckets} buckets; "
                "pass allow_fallback=True for a single bucket"
            )
        pick = others[int(rng.integers(0, len(others), 1)[0])]
        return [(0, pick)]
    others.sort(key=lambda c: z[c1] - z[c])
    out = []
    n = len(others)
    for b in range(buckets):
        lo = b * n // buckets
        hi = (b + 1) * n // buckets
        pick = others[lo + int(rng.integers(0, hi - lo, 1)[0])]
        out.append((b, pick))
    return out


def _spec_for(mode: str, alpha: float, g: Graph, inputs, profile, thresholds,
              lam: float) -> FeasibleSpec:
    if mode == "theo-d":
        return theoretical_feasible_spec(g, inputs, profile,
                                         FpModel(lam=lam, mode="deterministic"), alpha)
    if mode == "theo-p":
        return theoretical_feasible_spec(g, inputs, profile,
                                         FpModel(lam=lam, mode="probabilistic"), alpha)
    if mode == "emp":
        return empirical_feasible_spec(g, thresholds.scaled(alpha) if
                                       alpha != thresholds.alpha else thresholds)
    if mode == "free":
        return free_feasible_spec()
    raise ValueError(f"unknown attack mode {mode!r}; choose from {ATTACK_MODES}")


def evaluate(spec: ModelSpec, n_inputs: int, configs: list[tuple[str, float]],
             thresholds: ThresholdSet, profile: DeviceProfile, seed: int = 0,
             budget: int = 500, buckets: int = 5, lam: float = 4.0) -> list[dict]:
    """Attack sweep over (mode, alpha) configs and margin buckets.

    Returns one row per (config, bucket) with ASR and the mean margin
    progress over failed runs.
    """
    if n_inputs <= 0:
        raise ValueError("empty dataset")
    data_rng = Rng(seed)
    target_rng = Rng(seed + 1)
    g = spec.graph
    grad_graph = GradGraph(g)
    out_index = parse_ref(g.outputs[0])[1]

    cases = []
    for _ in range(n_inputs):
        inputs = spec.make_inputs(data_rng)
        values = grad_graph.forward({k: t.astype64() for k, t in inputs.items()})
        logits = values[out_index]
        logits = logits.reshape(-1) if logits.ndim == 1 else logits[0]
        targets = bucket_targets(logits, target_rng, buckets=buckets,
                                 allow_fallback=(spec.n_classes <= buckets))
        cases.append((inputs, targets))

    rows = []
    for mode, alpha in configs:
        cells: dict[int, dict] = {}
        for inputs, targets in cases:
            fspec = _spec_for(mode, alpha, g, inputs, profile, thresholds, lam)
            for bucket, c2 in targets:
                res = pgd_attack(g, inputs, fspec, c2, budget=budget)
                cell = cells.setdefault(
                    bucket, {"n": 0, "wins": 0, "dm_fail": [], "rel_fail": []}
                )
                cell["n"] += 1
                if res.success:
                    cell["wins"] += 1
                else:
                    cell["dm_fail"].append(res.delta_m)
                    cell["rel_fail"].append(res.delta_rel)
        for bucket in sorted(cells):
            cell = cells[bucket]
            rows.append(
                {
                    "model": spec.name,
                    "mode": mode,
                    "alpha": alpha,
                    "bucket": bucket,
                    "n": cell["n"],
                    "asr": cell["wins"] / cell["n"],
                    "mean_dm_fail": float(np.mean(cell["dm_fail"])) if cell["dm_fail"] else 0.0,
                    "mean_delta_fail": float(np.mean(cell["rel_fail"])) if cell["rel_fail"] else 0.0,
                }
            )
    return rows


def honest_false_positive_rate(spec: ModelSpec, thresholds: ThresholdSet, alphas,
                               profiles: list[DeviceProfile], n_runs: int,
                               seed: int = 0) -> dict[float, float]:
    """Held-out honest runs through the dispute screen at each alpha."""
    from .dispute import screen

    rng = Rng(seed)
    output_names = [spec.graph.nodes[parse_ref(r)[1]].name for r in spec.graph.outputs]
    scaled = {alpha: thresholds.scaled(alpha) for alpha in alphas}
    fired = {alpha: 0 for alpha in alphas}
    n_prof = len(profiles)
    for r in range(n_runs):
        inputs = spec.make_inputs(rng)
        p_prof = profiles[r % n_prof]
        c_prof = profiles[(r + 1) % n_prof]
        claimed, _ = execute(spec.graph, inputs, p_prof)
        local, _ = execute(spec.graph, inputs, c_prof)
        for alpha in alphas:
            worthy, _ = screen(local, claimed, output_names, scaled[alpha])
            if worthy:
                fired[alpha] += 1
    return {alpha: fired[alpha] / n_runs for alpha in alphas}


def write_results_csv(path, rows: list[dict]) -> None:
    fields = ["model", "mode", "alpha", "bucket", "n", "asr", "mean_dm_fail",
              "mean_delta_fail"]
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in fields})
