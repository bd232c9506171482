from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

ANCHOR_BLOCK = 8  # grid cells per anchor block side


@dataclass(frozen=True)
class PredictorConfig:
    grid: int = 64
    history_len: int = 3
    horizon: int = 10
    hidden_dim: int = 128
    c_thr: float = 0.3
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    lr: float = 5e-4
    batch_size: int = 16
    d_max: int = 16
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    prior: float = 0.01
    use_detection: bool = True  # False drops the instance loss (no-MEP ablation)

    def __post_init__(self):
        if self.horizon < 1 or self.history_len < 1 or self.hidden_dim < 1:
            raise ValueError("horizon, history_len and hidden_dim must be >= 1")
        if self.grid % ANCHOR_BLOCK or self.grid < ANCHOR_BLOCK:
            raise ValueError("grid must be a positive multiple of 8")
        for name in ("c_thr", "focal_alpha", "prior"):
            v = getattr(self, name)
            if not 0.0 < v < 1.0:
                raise ValueError(f"{name} must lie in (0, 1)")

    @property
    def anchors_per_side(self) -> int:
        return self.grid // ANCHOR_BLOCK

    @property
    def n_anchors(self) -> int:
        return self.anchors_per_side**2


@dataclass
class PredictorParams:
    """Named weight arrays plus Adam moments and step counter."""

    arrays: dict[str, np.ndarray]
    adam_m: dict[str, np.ndarray] = field(default_factory=dict)
    adam_v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0

    def count(self) -> int:
        return int(sum(a.size for a in self.arrays.values()))

    def copy(self) -> "PredictorParams":
        return PredictorParams(
            {k: v.copy() for k, v in self.arrays.items()},
            {k: v.copy() for k, v in self.adam_m.items()},
            {k: v.copy() for k, v in self.adam_v.items()},
            self.step,
        )


@dataclass
class ScenePrediction:
    p_offroad: float
    p_offlane: float
    p_collision: float
    p_speed: float


@dataclass
class InstancePrediction:
    c: float
    x1: float
    y1: float
    x2: float
    y2: float
    phi: float
    anchor_index: int


@dataclass
class StatePrediction:
    seg_logits: np.ndarray | None  # (G, G, 4); None when decoding was skipped
    scene: ScenePrediction
    instances: list[InstancePrediction]


class NonFiniteLossError(RuntimeError):
    pass
