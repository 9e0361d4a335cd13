"""Run configuration: every knob that can affect a verification outcome is
echoed into the committed meta or the threshold file, so two runs with equal
commitments agree on all verification-relevant parameters."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass

from .bounds import FP32_UNIT_ROUNDOFF, FpModel
from .dispute import ProtocolConfig
from .engine import DeviceProfile

DEFAULT_PROFILE_SPECS = ("sequential", "pairwise", "blocked:32", "permuted:7+fma")
# calibration runs over a wider fleet than any dispute pair so the committed
# envelopes strictly dominate what honest parties can produce
DEFAULT_CALIBRATION_EXTRAS = ("permuted:3", "blocked:4")
DEFAULT_COMMITTEE_EXTRAS = ("permuted:11", "blocked:8")


@dataclass
class RunConfig:
    # artifact paths (None means "use the built-in model zoo")
    graph: str | None = None
    weights: str | None = None
    thresholds: str | None = None
    ledger: str | None = None
    model: str = "mlp"
    # protocol knobs
    n_partition: int = 4
    window: int = 10
    round_timeout: int = 10
    bond: int = 100
    payment: int = 10
    committee_size: int = 5
    # floating-point model
    u: float = FP32_UNIT_ROUNDOFF
    lam: float = 4.0
    mode: str = "probabilistic"
    # calibration
    alpha: float = 3.0
    epsilon: float = 1e-12
    dataset_size: int = 50
    profiles: tuple[str, ...] = DEFAULT_PROFILE_SPECS
    calibration_extras: tuple[str, ...] = DEFAULT_CALIBRATION_EXTRAS
    committee_extras: tuple[str, ...] = DEFAULT_COMMITTEE_EXTRAS
    # seeds
    data_seed: int = 101
    committee_seed: int = 1234
    attack_seed: int = 202

    @classmethod
    def from_file(cls, path) -> "RunConfig":
        with open(path) as fh:
            doc = json.load(fh)
        cfg = cls()
        for key, value in doc.items():
            if not hasattr(cfg, key):
                raise ValueError(f"unknown config key {key!r}")
            if isinstance(getattr(cfg, key), tuple) and isinstance(value, list):
                value = tuple(value)
            setattr(cfg, key, value)
        return cfg

    def apply_overrides(self, overrides: dict) -> None:
        for key, value in overrides.items():
            if value is None:
                continue
            if not hasattr(self, key):
                raise ValueError(f"unknown config key {key!r}")
            setattr(self, key, value)

    def fp_model(self) -> FpModel:
        return FpModel(u=self.u, lam=self.lam, mode=self.mode)

    def device_profiles(self) -> list[DeviceProfile]:
        return [DeviceProfile.from_spec(s) for s in self.profiles]

    def calibration_profiles(self) -> list[DeviceProfile]:
        specs = tuple(self.profiles) + tuple(self.calibration_extras)
        return [DeviceProfile.from_spec(s) for s in specs]

    def committee_pool(self) -> list[DeviceProfile]:
        specs = tuple(self.profiles) + tuple(self.committee_extras)
        return [DeviceProfile.from_spec(s) for s in specs]

    def protocol(self) -> ProtocolConfig:
        return ProtocolConfig(
            n_partition=self.n_partition,
            window=self.window,
            round_timeout=self.round_timeout,
            bond=self.bond,
            payment=self.payment,
            committee_size=self.committee_size,
            committee_seed=self.committee_seed,
            fp_model=self.fp_model(),
        )

    def to_json(self) -> dict:
        doc = asdict(self)
        doc["profiles"] = list(self.profiles)
        doc["calibration_extras"] = list(self.calibration_extras)
        doc["committee_extras"] = list(self.committee_extras)
        return doc
