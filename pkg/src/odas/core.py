"""Shared domain types and error classes.

Label convention used everywhere: action classes are 1..K, background is
K+1, and the hard-negative class reserved for generated samples is K+2.
The hard-negative class exists during training only; at inference the
label space is 1..K+1.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class OdasError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(OdasError):
    """Invalid or degenerate configuration."""


class DataError(OdasError):
    """Invalid data: empty pools, bad labels, malformed inputs."""


class ShapeError(OdasError):
    """Array dimension mismatch."""


class StateError(OdasError):
    """Operation called in the wrong order (e.g. backward before forward)."""


class StreamError(OdasError):
    """Stream contract violation (e.g. non-monotonic timestamps)."""


class TrainingDivergedError(OdasError):
    """Non-finite loss or gradient encountered during training."""


ROLE_START = "start"
ROLE_FOLLOW_UP = "follow_up"
ROLE_INSIDE = "inside"
ROLE_BACKGROUND = "background"
ROLES = frozenset({ROLE_START, ROLE_FOLLOW_UP, ROLE_INSIDE, ROLE_BACKGROUND})


@dataclass(frozen=True)
class ModelConfig:
    """Dimensions and weights of the window classifier and its generator.

    num_classes is K: the number of action classes. The classifier output
    layer has K+2 logits during training (actions, background, hard
    negative) and K+1 at inference.
    """

    num_classes: int
    feature_dim: int
    fc_hidden_dim: int
    noise_dim: int = 100
    gen_hidden_dim: int = 100
    similarity_weight: float = 1.0
    window_len: int = 16
    stride: int = 1

    def __post_init__(self):
        if self.num_classes < 1:
            raise ConfigError("num_classes must be >= 1")
        for name in ("feature_dim", "fc_hidden_dim", "noise_dim",
                     "gen_hidden_dim", "window_len", "stride"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be >= 1")
        if self.similarity_weight < 0:
            raise ConfigError("similarity_weight must be >= 0")

    @property
    def background_label(self) -> int:
        return self.num_classes + 1

    @property
    def fake_label(self) -> int:
        return self.num_classes + 2

    @property
    def num_train_labels(self) -> int:
        return self.num_classes + 2

    @property
    def num_infer_labels(self) -> int:
        return self.num_classes + 1


def _as_readonly_features(values) -> np.ndarray:
    x = np.ascontiguousarray(values, dtype=np.float64)
    if x.ndim != 1:
        raise ShapeError(f"features must be 1-D, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DataError("features contain non-finite values")
    x.flags.writeable = False
    return x


@dataclass(frozen=True)
class WindowSample:
    """One fixed-length temporal window: features, label, and role.

    end_time is the timestamp (seconds) of the window's last frame. The
    label is the action class of that frame, or K+1 for background.
    """

    video_id: str
    end_time: float
    features: np.ndarray
    label: int
    role: str

    def __post_init__(self):
        object.__setattr__(self, "features", _as_readonly_features(self.features))
        if self.role not in ROLES:
            raise DataError(f"unknown role {self.role!r}")
        if self.label < 1:
            raise DataError(f"label must be >= 1, got {self.label}")
        if not math.isfinite(self.end_time) or self.end_time < 0:
            raise DataError(f"end_time must be finite and >= 0, got {self.end_time}")

    def validate(self, cfg: ModelConfig) -> None:
        """Check the role/label invariants that need K to state."""
        if self.features.shape[0] != cfg.feature_dim:
            raise ShapeError(
                f"expected {cfg.feature_dim} features, got {self.features.shape[0]}")
        if self.role in (ROLE_START, ROLE_FOLLOW_UP, ROLE_INSIDE):
            if not 1 <= self.label <= cfg.num_classes:
                raise DataError(
                    f"role {self.role} requires an action label, got {self.label}")
        elif self.label != cfg.background_label:
            raise DataError(
                f"background window must carry label {cfg.background_label}, "
                f"got {self.label}")

    def to_dict(self) -> dict:
        return {
            "video_id": self.video_id,
            "end_time": self.end_time,
            "features": [float(v) for v in self.features],
            "label": self.label,
            "role": self.role,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "WindowSample":
        return cls(video_id=d["video_id"], end_time=d["end_time"],
                   features=d["features"], label=d["label"], role=d["role"])


@dataclass(frozen=True)
class StartPair:
    """A start window paired with its follow-up window (same instance)."""

    start: WindowSample
    follow_up: WindowSample
    label: int

    def __post_init__(self):
        if self.start.role != ROLE_START:
            raise DataError("pair.start must have role 'start'")
        if self.follow_up.role != ROLE_FOLLOW_UP:
            raise DataError("pair.follow_up must have role 'follow_up'")
        if self.start.video_id != self.follow_up.video_id:
            raise DataError("paired windows must come from the same video")
        if not self.follow_up.end_time > self.start.end_time:
            raise DataError("follow-up window must end after the start window")
        if not (self.start.label == self.follow_up.label == self.label):
            raise DataError("pair labels must match")


@dataclass(frozen=True)
class ASGroundTruth:
    """An annotated action-start point."""

    video_id: str
    as_time: float
    action_class: int
    ambiguous: bool = False

    def __post_init__(self):
        if self.as_time < 0:
            raise DataError(f"as_time must be >= 0, got {self.as_time}")
        if self.action_class < 1:
            raise DataError("action_class must be >= 1")


@dataclass(frozen=True)
class ASPrediction:
    """A detected action start: when, which class, how confident."""

    video_id: str
    time: float
    action_class: int
    score: float

    def __post_init__(self):
        if self.time < 0:
            raise DataError(f"time must be >= 0, got {self.time}")
        if self.action_class < 1:
            raise DataError("action_class must be >= 1")
        if not 0.0 <= self.score <= 1.0:
            raise DataError(f"score must be in [0, 1], got {self.score}")


@dataclass(frozen=True)
class EvalConfig:
    """Evaluation protocol parameters."""

    offset_thresholds: tuple[float, ...]
    ap_depth: float = 1.0

    def __post_init__(self):
        offsets = tuple(float(t) for t in self.offset_thresholds)
        object.__setattr__(self, "offset_thresholds", offsets)
        if not offsets:
            raise ConfigError("offset_thresholds must be non-empty")
        if any(t <= 0 for t in offsets):
            raise ConfigError("offset thresholds must be > 0")
        if list(offsets) != sorted(offsets):
            raise ConfigError("offset thresholds must be sorted ascending")
        if not 0.0 < self.ap_depth <= 1.0:
            raise ConfigError("ap_depth must be in (0, 1]")


@dataclass(frozen=True)
class ClassCounts:
    num_gt: int
    tp: int
    fp: int


@dataclass(frozen=True)
class EvalReport:
    """Per-class AP, mAP per offset threshold, and their average.

    per_class_ap and counts are keyed by (action_class, offset_threshold);
    map_per_offset by offset_threshold. Classes with zero ground truths are
    excluded from the mAP averages.
    """

    per_class_ap: dict[tuple[int, float], float]
    map_per_offset: dict[float, float]
    average_map: float
    counts: dict[tuple[int, float], ClassCounts]

    def to_json_dict(self) -> dict:
        per_class: dict[str, dict[str, float]] = {}
        for (c, off), ap in sorted(self.per_class_ap.items()):
            per_class.setdefault(str(c), {})[f"{off:g}"] = ap
        counts: dict[str, dict[str, dict[str, int]]] = {}
        for (c, off), cc in sorted(self.counts.items()):
            counts.setdefault(str(c), {})[f"{off:g}"] = {
                "num_gt": cc.num_gt, "tp": cc.tp, "fp": cc.fp}
        return {
            "per_class_ap": per_class,
            "map_per_offset": {f"{off:g}": v
                               for off, v in sorted(self.map_per_offset.items())},
            "average_map": self.average_map,
            "counts": counts,
        }
