"""Offline cross-profile calibration: per-operator error percentile
profiles, max-envelope aggregation, alpha-scaled thresholds, and the
running-median stability diagnostics."""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .engine import DeviceProfile, execute
from .graph import Graph
from .tensor import Tensor

PERCENTILE_GRID = (0.0, 1.0) + tuple(float(p) for p in range(5, 100, 5)) + (99.0, 100.0)

THRESHOLD_FILE_VERSION = 1
DEFAULT_EPSILON = 1e-12
DEFAULT_ALPHA = 3.0


def percentile(values, p: float) -> float:
    """Linear interpolation between closest order statistics; p=0 is the min,
    p=100 the max, and an even-count median is the midpoint of the two
    central order statistics."""
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("percentile of empty input")
    return float(np.percentile(arr, p, method="linear"))


def percentile_profile(values, grid=PERCENTILE_GRID) -> np.ndarray:
    arr = np.asarray(values, dtype=np.float64).reshape(-1)
    if arr.size == 0:
        raise ValueError("percentile profile of empty input")
    return np.percentile(arr, list(grid), method="linear")


def elementwise_errors(y_a: Tensor, y_b: Tensor, epsilon: float = DEFAULT_EPSILON):
    """Flat absolute and relative errors; the relative denominator uses the
    first argument's magnitudes plus the guard epsilon."""
    if y_a.shape != y_b.shape:
        raise ValueError(f"shape mismatch: {y_a.shape} vs {y_b.shape}")
    a = y_a.data.astype(np.float64)
    b = y_b.data.astype(np.float64)
    abs_err = np.abs(a - b)
    rel_err = abs_err / (np.abs(a) + epsilon)
    return abs_err, rel_err


def error_profiles(y_a: Tensor, y_b: Tensor, grid=PERCENTILE_GRID,
                   epsilon: float = DEFAULT_EPSILON):
    abs_err, rel_err = elementwise_errors(y_a, y_b, epsilon)
    return percentile_profile(abs_err, grid), percentile_profile(rel_err, grid)


@dataclass
class EnvelopeSet:
    """Per-operator max-envelope of percentile profiles across device pairs
    and calibration inputs."""

    grid: tuple
    abs_env: list[np.ndarray]
    rel_env: list[np.ndarray]
    node_names: list[str]
    per_sample_abs: list[list[np.ndarray]] = field(default_factory=list)


def calibrate(g: Graph, dataset: list[dict[str, Tensor]], profiles: list[DeviceProfile],
              grid=PERCENTILE_GRID, epsilon: float = DEFAULT_EPSILON) -> EnvelopeSet:
    """Run every input under every profile and take the pointwise maximum of
    the per-(pair, input) percentile profiles.

    Absolute errors are pair-symmetric; relative errors are evaluated in both
    orientations because the denominator is orientation-dependent.
    """
    if len(profiles) < 2:
        raise ValueError("calibration requires at least 2 device profiles")
    if not dataset:
        raise ValueError("calibration requires at least 1 input")

    n_nodes = g.n_nodes
    n_grid = len(grid)
    grid_list = list(grid)
    abs_env = [np.zeros(n_grid) for _ in range(n_nodes)]
    rel_env = [np.zeros(n_grid) for _ in range(n_nodes)]
    per_sample_abs = [[] for _ in range(n_nodes)]

    n_prof = len(profiles)
    for sample in dataset:
        traces = [execute(g, sample, prof)[1] for prof in profiles]
        for i in range(n_nodes):
            flats = [tr.tensors[i].data.astype(np.float64) for tr in traces]
            sample_abs = np.zeros(n_grid)
            for j in range(n_prof):
                for k in range(j + 1, n_prof):
                    diff = np.abs(flats[j] - flats[k])
                    # abs error is pair-symmetric; rel needs both orientations
                    stacked = np.stack(
                        [diff, diff / (np.abs(flats[j]) + epsilon),
                         diff / (np.abs(flats[k]) + epsilon)]
                    )
                    profs = np.percentile(stacked, grid_list, axis=1, method="linear")
                    np.maximum(abs_env[i], profs[:, 0], out=abs_env[i])
                    np.maximum(rel_env[i], profs[:, 1], out=rel_env[i])
                    np.maximum(rel_env[i], profs[:, 2], out=rel_env[i])
                    np.maximum(sample_abs, profs[:, 0], out=sample_abs)
            per_sample_abs[i].append(sample_abs)

    return EnvelopeSet(
        grid=tuple(grid), abs_env=abs_env, rel_env=rel_env,
        node_names=[n.name for n in g.nodes], per_sample_abs=per_sample_abs,
    )


@dataclass(frozen=True)
class OpThresholds:
    name: str
    tau_abs: np.ndarray
    tau_rel: np.ndarray


@dataclass
class ThresholdSet:
    """alpha-scaled envelopes over the committed percentile grid."""

    alpha: float
    epsilon: float
    grid: tuple
    ops: list[OpThresholds]

    def __post_init__(self):
        self._by_name = {op.name: op for op in self.ops}

    def lookup(self, name: str) -> OpThresholds:
        if name not in self._by_name:
            raise KeyError(f"no thresholds for operator {name!r}")
        return self._by_name[name]

    def scaled(self, alpha: float) -> "ThresholdSet":
        """Same envelopes under a different safety factor."""
        if alpha <= 0:
            raise ValueError("alpha must be positive")
        factor = alpha / self.alpha
        ops = [
            OpThresholds(name=op.name, tau_abs=op.tau_abs * factor,
                         tau_rel=op.tau_rel * factor)
            for op in self.ops
        ]
        return ThresholdSet(alpha=alpha, epsilon=self.epsilon, grid=self.grid, ops=ops)

    def to_json(self) -> dict:
        return {
            "version": THRESHOLD_FILE_VERSION,
            "alpha": self.alpha,
            "epsilon": self.epsilon,
            "grid": list(self.grid),
            "ops": [
                {
                    "name": op.name,
                    "tau_abs": [float(v) for v in op.tau_abs],
                    "tau_rel": [float(v) for v in op.tau_rel],
                }
                for op in self.ops
            ],
        }

    @classmethod
    def from_json(cls, doc: dict) -> "ThresholdSet":
        if doc.get("version") != THRESHOLD_FILE_VERSION:
            raise ValueError(f"unsupported threshold file version {doc.get('version')}")
        ops = [
            OpThresholds(
                name=entry["name"],
                tau_abs=np.asarray(entry["tau_abs"], dtype=np.float64),
                tau_rel=np.asarray(entry["tau_rel"], dtype=np.float64),
            )
            for entry in doc["ops"]
        ]
        return cls(alpha=doc["alpha"], epsilon=doc["epsilon"],
                   grid=tuple(doc["grid"]), ops=ops)

    def save(self, path) -> None:
        with open(path, "w") as fh:
            json.dump(self.to_json(), fh, sort_keys=True, indent=1)

    @classmethod
    def load(cls, path) -> "ThresholdSet":
        with open(path) as fh:
            return cls.from_json(json.load(fh))


def build_thresholds(envelopes: EnvelopeSet, alpha: float = DEFAULT_ALPHA,
                     epsilon: float = DEFAULT_EPSILON) -> ThresholdSet:
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    ops = [
        OpThresholds(name=name, tau_abs=alpha * abs_e, tau_rel=alpha * rel_e)
        for name, abs_e, rel_e in zip(envelopes.node_names, envelopes.abs_env,
                                      envelopes.rel_env)
    ]
    return ThresholdSet(alpha=alpha, epsilon=epsilon, grid=envelopes.grid, ops=ops)


def symmetric_rel_change(a: float, b: float, epsilon: float = DEFAULT_EPSILON) -> float:
    """2|a-b| / (|a| + |b| + epsilon); zero when both are zero."""
    return 2.0 * abs(a - b) / (abs(a) + abs(b) + epsilon)


def _running_medians(seq: np.ndarray) -> np.ndarray:
    return np.array([np.median(seq[: k + 1]) for k in range(len(seq))])


def sup_norm_drift(seq, window: int, epsilon: float = DEFAULT_EPSILON) -> float:
    """Largest symmetric relative change between the final running median and
    any running median in the last `window` steps."""
    seq = np.asarray(seq, dtype=np.float64)
    med = _running_medians(seq)
    n = len(seq)
    final = med[n - 1]
    return max(
        symmetric_rel_change(final, med[k], epsilon) for k in range(n - window - 1, n - 1)
    )


def jackknife_influence(seq, epsilon: float = DEFAULT_EPSILON) -> float:
    """Max leave-one-out shift of the median, relative to the full median."""
    seq = np.asarray(seq, dtype=np.float64)
    theta = float(np.median(seq))
    n = len(seq)
    worst = 0.0
    for t in range(n):
        loo = float(np.median(np.delete(seq, t)))
        worst = max(worst, abs(loo - theta) / (abs(theta) + epsilon))
    return worst


def tail_adjustment(seq, window: int, epsilon: float = DEFAULT_EPSILON) -> float:
    """Max consecutive running-median step over the last `window` steps,
    relative to the final median."""
    seq = np.asarray(seq, dtype=np.float64)
    med = _running_medians(seq)
    n = len(seq)
    theta = med[n - 1]
    return max(
        abs(med[k + 1] - med[k]) / (abs(theta) + epsilon) for k in range(n - window - 1, n - 1)
    )


def rolling_sd(seq, window: int, epsilon: float = DEFAULT_EPSILON) -> float:
    """Standard deviation of length-`window` sliding-window medians,
    relative to the final running median."""
    seq = np.asarray(seq, dtype=np.float64)
    n = len(seq)
    theta = float(np.median(seq))
    roll = np.array([np.median(seq[k - window : k]) for k in range(window, n + 1)])
    return float(np.std(roll)) / (abs(theta) + epsilon)


METRIC_NAMES = ("SupNorm", "Jackknife", "TailAdj", "RollSD")


@dataclass
class StabilityReport:
    """Per-(operator, percentile) diagnostics plus the cross-operator
    aggregation (p50/p90 per percentile column)."""

    window: int
    n_samples: int
    percentiles: list[float]
    op_names: list[str]
    metrics: dict  # metric -> {op -> {percentile -> value}}
    delta_inf: dict  # op -> worst-case drift across percentiles
    aggregate: dict  # metric -> {percentile -> {"p50": v, "p90": v}}

    def to_csv(self) -> str:
        lines = ["metric,percentile,p50_across_ops,p90_across_ops"]
        for metric in METRIC_NAMES:
            for p in self.percentiles:
                agg = self.aggregate[metric][p]
                lines.append(f"{metric},{p},{agg['p50']:.6g},{agg['p90']:.6g}")
        return "\n".join(lines) + "\n"


def stability_report(samples: dict[str, dict[float, np.ndarray]], window: int,
                     epsilon: float = DEFAULT_EPSILON) -> StabilityReport:
    """Diagnostics over per-(operator, percentile) sample sequences.

    samples maps operator name -> percentile -> length-n sequence of the
    per-input percentile values gathered during calibration.
    """
    op_names = list(samples)
    if not op_names:
        raise ValueError("no operators given")
    first = samples[op_names[0]]
    percentiles = list(first)
    n = len(np.asarray(first[percentiles[0]]))
    if not (n > window >= 1):
        raise ValueError(f"require n > W >= 1, got n={n}, W={window}")

    metrics = {m: {} for m in METRIC_NAMES}
    delta_inf = {}
    for op in op_names:
        per_metric = {m: {} for m in METRIC_NAMES}
        worst = 0.0
        for p in percentiles:
            seq = np.asarray(samples[op][p], dtype=np.float64)
            if len(seq) != n:
                raise ValueError("ragged sample sequences")
            sup = sup_norm_drift(seq, window, epsilon)
            per_metric["SupNorm"][p] = sup
            per_metric["Jackknife"][p] = jackknife_influence(seq, epsilon)
            per_metric["TailAdj"][p] = tail_adjustment(seq, window, epsilon)
            per_metric["RollSD"][p] = rolling_sd(seq, window, epsilon)
            worst = max(worst, sup)
        for m in METRIC_NAMES:
            metrics[m][op] = per_metric[m]
        delta_inf[op] = worst

    aggregate = {}
    for m in METRIC_NAMES:
        aggregate[m] = {}
        for p in percentiles:
            vals = np.array([metrics[m][op][p] for op in op_names])
            aggregate[m][p] = {
                "p50": float(np.percentile(vals, 50, method="linear")),
                "p90": float(np.percentile(vals, 90, method="linear")),
            }
    return StabilityReport(
        window=window, n_samples=n, percentiles=percentiles, op_names=op_names,
        metrics=metrics, delta_inf=delta_inf, aggregate=aggregate,
    )


def stability_samples_from_calibration(envelopes: EnvelopeSet,
                                       percentiles=None) -> dict:
    """Assemble per-(op, percentile) sequences from calibration: sample t's
    value is the cross-pair max of that input's percentile profile."""
    grid = list(envelopes.grid)
    if percentiles is None:
        percentiles = [p for p in grid if 10.0 <= p <= 90.0 and p % 5 == 0]
    cols = [grid.index(p) for p in percentiles]
    out = {}
    for name, rows in zip(envelopes.node_names, envelopes.per_sample_abs):
        mat = np.stack(rows)  # (n_samples, n_grid)
        out[name] = {p: mat[:, c] for p, c in zip(percentiles, cols)}
    return out
