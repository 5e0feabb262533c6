"""Annotation/feature ingestion, sliding-window datasets, synthetic corpora.

Frame conventions used throughout: frame f of a video carries timestamp
f / fps seconds. An instance annotated with (start_sec, end_sec) covers
frames round(start_sec * fps) .. round(end_sec * fps) - 1; its action
start (AS) frame is the first of those. The window ending at frame e
covers frames e - L + 1 .. e, so valid window ends are L-1 .. num_frames-1.

A window is a start window when it contains the AS frame of the instance
that owns its last frame; it is an inside window when all L frames lie in
one instance; otherwise it is background. Follow-up roles are assigned
only through pairing: the follow-up of a start window ending at frame t is
the window ending at t + L, provided frames t+1 .. t+L lie entirely inside
the same instance.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .core import (ASGroundTruth, ConfigError, DataError, ModelConfig,
                   ROLE_BACKGROUND, ROLE_FOLLOW_UP, ROLE_INSIDE, ROLE_START,
                   ShapeError, StartPair, WindowSample)

FEATURES_MAGIC = b"ODFS"


@dataclass(frozen=True)
class Instance:
    action_class: int
    start_sec: float
    end_sec: float
    ambiguous_start: bool = False

    def __post_init__(self):
        if self.action_class < 1:
            raise DataError("action_class must be >= 1")
        if not 0 <= self.start_sec < self.end_sec:
            raise DataError(
                f"need 0 <= start < end, got [{self.start_sec}, {self.end_sec}]")


@dataclass(frozen=True)
class VideoAnnotation:
    video_id: str
    fps: float
    num_frames: int
    instances: tuple[Instance, ...]

    def __post_init__(self):
        object.__setattr__(self, "instances", tuple(self.instances))
        if self.fps <= 0:
            raise DataError(f"fps must be > 0, got {self.fps}")
        if self.num_frames < 1:
            raise DataError("num_frames must be >= 1")
        duration = self.num_frames / self.fps
        for inst in self.instances:
            if inst.end_sec > duration + 1e-9:
                raise DataError(
                    f"{self.video_id}: instance ends at {inst.end_sec}s, "
                    f"video lasts {duration}s")
        by_class: dict[int, list[Instance]] = {}
        for inst in self.instances:
            by_class.setdefault(inst.action_class, []).append(inst)
        for insts in by_class.values():
            insts.sort(key=lambda i: i.start_sec)
            for a, b in zip(insts, insts[1:]):
                if b.start_sec < a.end_sec:
                    raise DataError(
                        f"{self.video_id}: same-class instances overlap")

    def frame_spans(self) -> list[tuple[int, int, Instance]]:
        """Instance frame ranges as (start_frame, end_frame_exclusive)."""
        spans = []
        for inst in self.instances:
            start_f = time_to_frame(inst.start_sec, self.fps)
            end_f = time_to_frame(inst.end_sec, self.fps)
            spans.append((start_f, end_f, inst))
        return spans


@dataclass
class FeatureStream:
    """Per-window feature vectors, indexed by window end frame."""

    video_id: str
    features: np.ndarray

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2:
            raise ShapeError("features must be a (count, dim) matrix")
        if self.features.size == 0:
            raise DataError(f"{self.video_id}: empty feature stream")
        if not np.all(np.isfinite(self.features)):
            raise DataError(f"{self.video_id}: non-finite feature values")

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def __len__(self) -> int:
        return self.features.shape[0]


def time_to_frame(t: float, fps: float) -> int:
    return int(round(t * fps))


def frame_to_time(f: int, fps: float) -> float:
    return f / fps


def build_window_dataset(ann: VideoAnnotation, fs: FeatureStream,
                         cfg: ModelConfig) -> list[WindowSample]:
    """One sample per valid window end, labeled by its last frame."""
    if fs.video_id != ann.video_id:
        raise DataError(f"stream {fs.video_id} does not match annotation "
                        f"{ann.video_id}")
    if len(fs) < ann.num_frames:
        raise DataError(f"{ann.video_id}: stream has {len(fs)} feature rows, "
                        f"annotation declares {ann.num_frames} frames")
    if fs.dim != cfg.feature_dim:
        raise ShapeError(f"{ann.video_id}: feature dim {fs.dim}, "
                         f"expected {cfg.feature_dim}")
    spans = ann.frame_spans()
    samples = []
    for end in range(cfg.window_len - 1, ann.num_frames):
        owner = _owning_span(spans, end)
        if owner is None:
            label, role = cfg.background_label, ROLE_BACKGROUND
        else:
            start_f, _, inst = owner
            label = inst.action_class
            role = ROLE_START if start_f >= end - cfg.window_len + 1 else ROLE_INSIDE
        samples.append(WindowSample(
            video_id=ann.video_id,
            end_time=frame_to_time(end, ann.fps),
            features=fs.features[end],
            label=label,
            role=role,
        ))
    return samples


def _owning_span(spans, frame):
    """The instance owning a frame; latest-starting one wins on overlap."""
    owner = None
    for span in spans:
        if span[0] <= frame < span[1]:
            if owner is None or span[0] > owner[0]:
                owner = span
    return owner


def build_start_pairs(samples: list[WindowSample], ann: VideoAnnotation,
                      cfg: ModelConfig) -> list[StartPair]:
    """Pair each start window with its adjacent fully-inside follow-up."""
    spans = ann.frame_spans()
    by_end = {time_to_frame(s.end_time, ann.fps): s for s in samples}
    pairs = []
    for s in samples:
        if s.role != ROLE_START:
            continue
        end = time_to_frame(s.end_time, ann.fps)
        owner = _owning_span(spans, end)
        if owner is None:
            raise DataError(f"{ann.video_id}: start window at frame {end} "
                            "has no owning instance")
        partner_end = end + cfg.window_len
        # frames end+1 .. end+L must all lie inside the owning instance
        if partner_end >= owner[1] or partner_end not in by_end:
            continue
        partner = by_end[partner_end]
        if partner.role != ROLE_INSIDE or partner.label != s.label:
            continue
        follow_up = replace(partner, role=ROLE_FOLLOW_UP)
        pairs.append(StartPair(start=s, follow_up=follow_up, label=s.label))
    return pairs


def build_corpus_dataset(anns: list[VideoAnnotation],
                         streams: dict[str, FeatureStream],
                         cfg: ModelConfig):
    """Windows and pairs for a whole corpus, merged in video-id order."""
    samples: list[WindowSample] = []
    pairs: list[StartPair] = []
    for ann in sorted(anns, key=lambda a: a.video_id):
        if ann.video_id not in streams:
            raise DataError(f"no feature stream for video {ann.video_id}")
        vid_samples = build_window_dataset(ann, streams[ann.video_id], cfg)
        samples.extend(vid_samples)
        pairs.extend(build_start_pairs(vid_samples, ann, cfg))
    return samples, pairs


def ground_truths(anns: list[VideoAnnotation]) -> list[ASGroundTruth]:
    gts = []
    for ann in anns:
        for inst in ann.instances:
            gts.append(ASGroundTruth(video_id=ann.video_id,
                                     as_time=inst.start_sec,
                                     action_class=inst.action_class,
                                     ambiguous=inst.ambiguous_start))
    return gts


# ---------------------------------------------------------------------------
# Synthetic corpora


@dataclass(frozen=True)
class SynthConfig:
    """Parameters of the seeded synthetic corpus generator.

    Background windows come from one Gaussian cluster, inside-action
    windows from per-class clusters, and start windows from the convex
    mixture alpha * class + (1 - alpha) * background where alpha is the
    fraction of action frames in the window.
    """

    seed: int
    num_classes: int
    feature_dim: int
    num_videos: int
    window_len: int = 16
    fps: float = 8.0
    min_frames: int = 280
    max_frames: int = 400
    min_instances: int = 1
    max_instances: int = 3
    min_instance_len: int = 24
    max_instance_len: int = 72
    noise_std: float = 1.0
    noise_corr: float = 0.0
    center_scale: float = 3.0
    ambiguous_fraction: float = 0.0
    id_prefix: str = "video"

    def __post_init__(self):
        if self.num_classes < 2:
            raise ConfigError("synthetic corpus needs num_classes >= 2")
        if self.feature_dim < 2:
            raise ConfigError("synthetic corpus needs feature_dim >= 2")
        if self.num_videos < 1:
            raise ConfigError("num_videos must be >= 1")
        if not 1 <= self.min_instances <= self.max_instances:
            raise ConfigError("need 1 <= min_instances <= max_instances")
        if self.min_instance_len <= self.window_len:
            raise ConfigError(
                "min_instance_len must exceed window_len, otherwise no start "
                "window can ever be paired with a follow-up")
        if self.min_instance_len > self.max_instance_len:
            raise ConfigError("min_instance_len > max_instance_len")
        if self.min_frames < 2 * self.window_len + self.max_instance_len:
            raise ConfigError("videos too short for one instance plus margins")
        if self.min_frames > self.max_frames:
            raise ConfigError("min_frames > max_frames")
        if self.noise_std < 0 or self.fps <= 0:
            raise ConfigError("noise_std must be >= 0 and fps > 0")
        if not 0 <= self.noise_corr < 1:
            raise ConfigError("noise_corr must be in [0, 1)")
        if not 0 <= self.ambiguous_fraction <= 1:
            raise ConfigError("ambiguous_fraction must be in [0, 1]")


def synth_corpus(sc: SynthConfig):
    """Seed-deterministic corpus: (annotations, {video_id: FeatureStream})."""
    rng = np.random.default_rng(np.random.SeedSequence(sc.seed))
    # non-negative centers: ingested features stand in for rectified
    # pooling outputs, which live in the positive orthant
    centers = np.abs(rng.normal(0.0, sc.center_scale,
                                size=(sc.num_classes + 1, sc.feature_dim)))
    anns = []
    streams = {}
    width = max(4, len(str(sc.num_videos - 1)))
    for v in range(sc.num_videos):
        video_id = f"{sc.id_prefix}_{v:0{width}d}"
        num_frames = int(rng.integers(sc.min_frames, sc.max_frames + 1))
        want = int(rng.integers(sc.min_instances, sc.max_instances + 1))
        instances = []
        spans = []
        cursor = sc.window_len  # leading background so every AS has L start windows
        for _ in range(want):
            length = int(rng.integers(sc.min_instance_len,
                                      sc.max_instance_len + 1))
            latest = num_frames - length
            if cursor > latest:
                break
            start_f = int(rng.integers(cursor, latest + 1))
            action = int(rng.integers(1, sc.num_classes + 1))
            ambiguous = bool(rng.random() < sc.ambiguous_fraction)
            instances.append(Instance(
                action_class=action,
                start_sec=frame_to_time(start_f, sc.fps),
                end_sec=frame_to_time(start_f + length, sc.fps),
                ambiguous_start=ambiguous,
            ))
            spans.append((start_f, start_f + length, action))
            cursor = start_f + length + sc.window_len
        ann = VideoAnnotation(video_id=video_id, fps=sc.fps,
                              num_frames=num_frames,
                              instances=tuple(instances))
        # per-window mixture weights: alpha = action-frame fraction in window
        alpha = np.zeros(num_frames)
        cls = np.zeros(num_frames, dtype=int)
        for start_f, end_f, action in spans:
            for e in range(start_f, min(end_f, num_frames)):
                lo = max(0, e - sc.window_len + 1)
                alpha[e] = (e - max(start_f, lo) + 1) / (e - lo + 1)
                cls[e] = action
        mix = (alpha[:, None] * centers[cls]
               + (1.0 - alpha)[:, None] * centers[0])
        noise = sc.noise_std * rng.standard_normal((num_frames, sc.feature_dim))
        if sc.noise_corr > 0:
            # AR(1) over time, same marginal std: consecutive windows share
            # most of their frames, so their features should be correlated
            rho = sc.noise_corr
            scale = np.sqrt(1.0 - rho * rho)
            for t in range(1, num_frames):
                noise[t] = rho * noise[t - 1] + scale * noise[t]
        feats = mix + noise
        # float32 round-trip now so in-memory and on-disk corpora agree
        feats = feats.astype(np.float32).astype(np.float64)
        anns.append(ann)
        streams[video_id] = FeatureStream(video_id=video_id, features=feats)
    return anns, streams


# ---------------------------------------------------------------------------
# On-disk formats


def save_annotations(path, anns: list[VideoAnnotation]) -> None:
    doc = {"videos": [
        {
            "id": ann.video_id,
            "fps": ann.fps,
            "num_frames": ann.num_frames,
            "instances": [
                {
                    "class": inst.action_class,
                    "start_sec": inst.start_sec,
                    "end_sec": inst.end_sec,
                    "ambiguous_start": inst.ambiguous_start,
                }
                for inst in ann.instances
            ],
        }
        for ann in anns
    ]}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_annotations(path) -> list[VideoAnnotation]:
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"{path}: cannot read annotations ({exc})") from exc
    try:
        anns = []
        for v in doc["videos"]:
            instances = tuple(
                Instance(action_class=i["class"], start_sec=i["start_sec"],
                         end_sec=i["end_sec"],
                         ambiguous_start=bool(i.get("ambiguous_start", False)))
                for i in v["instances"])
            anns.append(VideoAnnotation(video_id=v["id"], fps=v["fps"],
                                        num_frames=v["num_frames"],
                                        instances=instances))
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed annotation document ({exc})") from exc
    return anns


def write_feature_stream(path, fs: FeatureStream) -> None:
    data = np.ascontiguousarray(fs.features, dtype="<f4")
    with open(path, "wb") as fh:
        fh.write(FEATURES_MAGIC)
        fh.write(struct.pack("<II", data.shape[1], data.shape[0]))
        fh.write(data.tobytes())


def read_feature_stream(path, video_id: str) -> FeatureStream:
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[:4] != FEATURES_MAGIC:
        raise DataError(f"{path}: not a feature stream file (bad magic)")
    dim, count = struct.unpack_from("<II", blob, 4)
    expected = 12 + 4 * dim * count
    if len(blob) != expected:
        raise DataError(f"{path}: truncated feature stream "
                        f"({len(blob)} bytes, expected {expected})")
    feats = np.frombuffer(blob, dtype="<f4", count=dim * count, offset=12)
    return FeatureStream(video_id=video_id,
                         features=feats.reshape(count, dim).astype(np.float64))


def write_corpus(out_dir, anns: list[VideoAnnotation],
                 streams: dict[str, FeatureStream]) -> None:
    out = Path(out_dir)
    (out / "features").mkdir(parents=True, exist_ok=True)
    save_annotations(out / "annotations.json", anns)
    for ann in anns:
        write_feature_stream(out / "features" / f"{ann.video_id}.odfs",
                             streams[ann.video_id])


def load_corpus(data_dir):
    root = Path(data_dir)
    anns = load_annotations(root / "annotations.json")
    streams = {}
    for ann in anns:
        path = root / "features" / f"{ann.video_id}.odfs"
        if not path.exists():
            raise DataError(f"missing feature file {path}")
        streams[ann.video_id] = read_feature_stream(path, ann.video_id)
    return anns, streams
