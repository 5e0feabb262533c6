"""Streaming inference: per-window scoring and action-start emission.

A prediction is emitted at time t when all three conditions hold: the
predicted class c_t is an action (not background), c_t differs from the
previous window's predicted class, and the confidence s_t (the softmax
probability of c_t over the K+1 inference classes) exceeds the threshold.
The previous-class state updates on every window regardless of emission,
so the emitted set at threshold x is exactly the threshold-free candidate
set filtered by score > x.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .core import (ASGroundTruth, ASPrediction, DataError, EvalConfig,
                   StreamError)
from .dataset import FeatureStream, VideoAnnotation, frame_to_time
from .nn import Discriminator, softmax

DEFAULT_THRESHOLD_GRID = tuple(round(0.05 * i, 2) for i in range(1, 20))

Scorer = Callable[[np.ndarray], np.ndarray]


def model_scorer(d: Discriminator) -> Scorer:
    """Batch scorer: (n, feature_dim) -> (n, K+1) softmax probabilities."""

    def score(x: np.ndarray) -> np.ndarray:
        acts = d.forward(np.atleast_2d(x), train=False)
        return softmax(acts.logits)

    return score


def random_guess(rng: np.random.Generator, num_labels: int) -> np.ndarray:
    """Uniform draw from the probability simplex (normalized exponentials)."""
    e = rng.exponential(size=num_labels)
    return e / e.sum()


def random_scorer(rng: np.random.Generator, num_labels: int) -> Scorer:
    """Baseline scorer that ignores the features entirely."""

    def score(x: np.ndarray) -> np.ndarray:
        n = np.atleast_2d(x).shape[0]
        e = rng.exponential(size=(n, num_labels))
        return e / e.sum(axis=1, keepdims=True)

    return score


@dataclass
class DetectorState:
    """Per-stream detector state; owns nothing but the running class."""

    scorer: Scorer
    num_actions: int
    threshold: float
    video_id: str
    prev_class: int | None = None
    last_time: float = field(default=-math.inf)


def step(state: DetectorState, features: np.ndarray,
         t: float) -> ASPrediction | None:
    """Consume one window ending at time t; maybe emit a prediction."""
    if t <= state.last_time:
        raise StreamError(
            f"{state.video_id}: window times must be strictly increasing "
            f"({t} after {state.last_time})")
    probs = np.asarray(state.scorer(features)).reshape(-1)
    c = int(np.argmax(probs)) + 1
    s = float(probs[c - 1])
    emit = (c <= state.num_actions and c != state.prev_class
            and s > state.threshold)
    state.prev_class = c
    state.last_time = t
    if emit:
        return ASPrediction(video_id=state.video_id, time=t,
                            action_class=c, score=s)
    return None


def _scan_candidates(video_id: str, probs: np.ndarray, times: Sequence[float],
                     num_actions: int) -> list[ASPrediction]:
    """Threshold-free emission candidates from a scored window sequence."""
    classes = np.argmax(probs, axis=1) + 1
    out = []
    prev = None
    for i, c in enumerate(classes):
        c = int(c)
        if c <= num_actions and c != prev:
            out.append(ASPrediction(video_id=video_id, time=float(times[i]),
                                    action_class=c,
                                    score=float(probs[i, c - 1])))
        prev = c
    return out


def stream_candidates(scorer: Scorer, fs: FeatureStream, fps: float,
                      num_actions: int, window_len: int,
                      stride: int = 1) -> list[ASPrediction]:
    """Score every stride-th window of a stream and scan for class changes."""
    if stride < 1:
        raise DataError("stride must be >= 1")
    ends = list(range(window_len - 1, len(fs), stride))
    if not ends:
        return []
    probs = scorer(fs.features[ends])
    times = [frame_to_time(e, fps) for e in ends]
    return _scan_candidates(fs.video_id, probs, times, num_actions)


def apply_threshold(candidates: Sequence[ASPrediction],
                    threshold: float) -> list[ASPrediction]:
    return [c for c in candidates if c.score > threshold]


def detect_stream(scorer: Scorer, fs: FeatureStream, fps: float,
                  num_actions: int, window_len: int, threshold: float,
                  stride: int = 1) -> list[ASPrediction]:
    """All action-start predictions for one stream at a fixed threshold.

    Equivalent to feeding every stride-th window through step() in order.
    """
    return apply_threshold(
        stream_candidates(scorer, fs, fps, num_actions, window_len, stride),
        threshold)


def corpus_candidates(scorer: Scorer, anns: Sequence[VideoAnnotation],
                      streams: dict[str, FeatureStream], num_actions: int,
                      window_len: int, stride: int = 1) -> list[ASPrediction]:
    cands = []
    for ann in sorted(anns, key=lambda a: a.video_id):
        cands.extend(stream_candidates(scorer, streams[ann.video_id], ann.fps,
                                       num_actions, window_len, stride))
    return cands


def grid_search_threshold(scorer: Scorer, anns: Sequence[VideoAnnotation],
                          streams: dict[str, FeatureStream],
                          gts: Sequence[ASGroundTruth],
                          num_actions: int, window_len: int,
                          eval_cfg: EvalConfig,
                          grid: Sequence[float] = DEFAULT_THRESHOLD_GRID,
                          stride: int = 1) -> float:
    """Grid value maximizing average mAP on the given streams.

    Candidates are scored once; each grid value only re-filters them. Ties
    break toward the larger threshold.
    """
    from .evaluation import evaluate  # local import: eval depends on core only

    grid = sorted(float(t) for t in grid)
    if not grid:
        raise DataError("threshold grid must be non-empty")
    cands = corpus_candidates(scorer, anns, streams, num_actions, window_len,
                              stride)
    best_theta = grid[0]
    best_map = -1.0
    for theta in grid:
        report = evaluate(apply_threshold(cands, theta), gts, eval_cfg,
                          num_actions)
        if report.average_map >= best_map:  # >=: ties go to the larger theta
            best_map = report.average_map
            best_theta = theta
    return best_theta


# ---------------------------------------------------------------------------
# Predictions file


PREDICTIONS_HEADER = "video_id,time_sec,class_id,score"


def save_predictions(path, preds: Sequence[ASPrediction]) -> None:
    ordered = sorted(preds, key=lambda p: (p.video_id, p.time,
                                           p.action_class, p.score))
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(PREDICTIONS_HEADER + "\n")
        for p in ordered:
            fh.write(f"{p.video_id},{p.time:.6f},{p.action_class},"
                     f"{p.score:.6f}\n")


def load_predictions(path) -> list[ASPrediction]:
    preds = []
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    if not lines or lines[0] != PREDICTIONS_HEADER:
        raise DataError(f"{path}: line 1: expected header "
                        f"{PREDICTIONS_HEADER!r}")
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        if len(parts) != 4:
            raise DataError(f"{path}: line {lineno}: expected 4 fields, "
                            f"got {len(parts)}")
        try:
            preds.append(ASPrediction(video_id=parts[0], time=float(parts[1]),
                                      action_class=int(parts[2]),
                                      score=float(parts[3])))
        except (ValueError, DataError) as exc:
            raise DataError(f"{path}: line {lineno}: {exc}") from exc
    return preds
