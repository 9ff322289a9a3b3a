"""Camera-invariant pose features, training-split standardization and the
extractor adapter boundary."""
from __future__ import annotations

import json
import warnings
from dataclasses import dataclass
from typing import Iterable, Iterator, Sequence

import numpy as np

from .datamodel import (
    CONF_CHANNELS,
    COORD_CHANNELS,
    EMO_DIM,
    EMOTIONS,
    N_KEYPOINTS,
    POSE_DIM,
    BoundingBox,
    DatasetError,
    EmotionDistribution,
    MultimodalFrame,
    PoseDescriptor,
    SequenceRecord,
)

STD_FLOOR = 1e-6
NEUTRAL = np.eye(EMO_DIM)[EMOTIONS.index("neutral")]


@dataclass(frozen=True)
class RawDetection:
    """One person detection in pixel space as produced by a pose/face extractor."""

    keypoints: np.ndarray  # (17, 3) rows of (u, v, s)
    bbox: BoundingBox
    face_emotion: EmotionDistribution | None = None

    def __post_init__(self):
        kp = np.asarray(self.keypoints, dtype=np.float64).reshape(-1, 3)
        if kp.shape != (N_KEYPOINTS, 3):
            raise ValueError(f"expected {N_KEYPOINTS} keypoints, got {kp.shape[0]}")
        object.__setattr__(self, "keypoints", kp)


def normalize_pose_array(kp_px: np.ndarray, bbox: np.ndarray) -> np.ndarray:
    """Vectorised bounding-box normalisation.

    ``kp_px`` is (..., 51) pixel triplets, ``bbox`` is (..., 4) as
    (u_min, v_min, w, h). Zero-confidence keypoints are extractor placeholders
    and map to coordinate 0.
    """
    kp = np.asarray(kp_px, dtype=np.float64)
    box = np.asarray(bbox, dtype=np.float64)
    if np.any(box[..., 2] <= 0) or np.any(box[..., 3] <= 0):
        raise ValueError("degenerate bounding box (w <= 0 or h <= 0)")
    out = kp.copy()
    u = kp[..., 0::3]
    v = kp[..., 1::3]
    s = kp[..., 2::3]
    un = (u - box[..., 0:1]) / box[..., 2:3]
    vn = (v - box[..., 1:2]) / box[..., 3:4]
    missing = s == 0
    out[..., 0::3] = np.where(missing, 0.0, un)
    out[..., 1::3] = np.where(missing, 0.0, vn)
    return out


def normalize_pose(det: RawDetection) -> PoseDescriptor:
    b = det.bbox
    box = np.array([b.u_min, b.v_min, b.w, b.h])
    return PoseDescriptor(normalize_pose_array(det.keypoints.reshape(-1), box))


@dataclass(frozen=True)
class StandardizationStats:
    """Per-channel mean/std over the 51 pose channels.

    Confidence channels always carry mean 0 and std 1, so standardisation
    leaves them untouched.
    """

    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        mean = np.asarray(self.mean, dtype=np.float64).reshape(POSE_DIM)
        std = np.asarray(self.std, dtype=np.float64).reshape(POSE_DIM)
        if np.any(std <= 0):
            raise ValueError("standardization std must be positive on every channel")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "std", std)

    @classmethod
    def identity(cls) -> "StandardizationStats":
        return cls(np.zeros(POSE_DIM), np.ones(POSE_DIM))

    def to_dict(self) -> dict[str, list[float]]:
        return {"mean": [float(x) for x in self.mean], "std": [float(x) for x in self.std]}

    @classmethod
    def from_dict(cls, d: dict) -> "StandardizationStats":
        return cls(np.asarray(d["mean"]), np.asarray(d["std"]))


def fit_standardization(train_seqs: Sequence[SequenceRecord]) -> StandardizationStats:
    pose = np.concatenate([r.pose for r in train_seqs]) if train_seqs else np.zeros((0, POSE_DIM))
    detected = np.any(pose[:, CONF_CHANNELS] > 0, axis=1)
    if np.count_nonzero(detected) < 2:
        raise ValueError("need at least 2 frames with detected keypoints to fit standardization")
    mean = np.zeros(POSE_DIM)
    std = np.ones(POSE_DIM)
    coords = pose[:, COORD_CHANNELS]
    mean[COORD_CHANNELS] = coords.mean(axis=0)
    sd = coords.std(axis=0)
    flat = sd < STD_FLOOR
    if np.any(flat):
        warnings.warn(
            f"zero-variance pose channels {COORD_CHANNELS[flat].tolist()} clamped to std {STD_FLOOR}",
            stacklevel=2,
        )
    std[COORD_CHANNELS] = np.maximum(sd, STD_FLOOR)
    return StandardizationStats(mean, std)


def apply_standardization(pose, stats: StandardizationStats):
    """Standardise pose values; accepts a PoseDescriptor or any (..., 51) array."""
    if isinstance(pose, PoseDescriptor):
        return PoseDescriptor(apply_standardization(pose.values, stats))
    x = np.asarray(pose, dtype=np.float64)
    out = (x - stats.mean) / stats.std
    out[..., CONF_CHANNELS] = x[..., CONF_CHANNELS]
    return out


def invert_standardization(pose, stats: StandardizationStats):
    if isinstance(pose, PoseDescriptor):
        return PoseDescriptor(invert_standardization(pose.values, stats))
    x = np.asarray(pose, dtype=np.float64)
    out = x * stats.std + stats.mean
    out[..., CONF_CHANNELS] = x[..., CONF_CHANNELS]
    return out


def standardize_records(records: Iterable[SequenceRecord], stats: StandardizationStats) -> list[SequenceRecord]:
    return [r.replace(pose=apply_standardization(r.pose, stats)) for r in records]


def destandardize_records(records: Iterable[SequenceRecord], stats: StandardizationStats) -> list[SequenceRecord]:
    return [r.replace(pose=invert_standardization(r.pose, stats)) for r in records]


def build_frame(
    det: RawDetection,
    stats: StandardizationStats | None = None,
    label: int | None = None,
) -> MultimodalFrame:
    pose = normalize_pose(det)
    if stats is not None:
        pose = apply_standardization(pose, stats)
    emotion = det.face_emotion if det.face_emotion is not None else EmotionDistribution(NEUTRAL)
    return MultimodalFrame(pose, emotion, label)


# adapter stream --------------------------------------------------------------


@dataclass(frozen=True)
class AdapterFrame:
    frame_idx: int
    detection: RawDetection | None
    label: int | None = None
    seq_id: str | None = None


def parse_adapter_line(line: str, lineno: int | None = None) -> AdapterFrame:
    """Parse one adapter JSON object (``kp_px`` 51 floats, ``bbox`` 4 floats,
    optional ``emo`` 7 floats, ``frame_idx``, ``label``)."""
    try:
        obj = json.loads(line)
    except json.JSONDecodeError as exc:
        raise DatasetError(f"malformed JSON ({exc.msg})", lineno) from None
    if "frame_idx" not in obj:
        raise DatasetError("adapter frame missing frame_idx", lineno)
    kp, bbox = obj.get("kp_px"), obj.get("bbox")
    label = obj.get("label")
    if label not in (None, 0, 1):
        raise DatasetError(f"label must be 0, 1 or null, got {label!r}", lineno)
    if kp is None or bbox is None:
        # no person detected in this frame
        return AdapterFrame(int(obj["frame_idx"]), None, label, obj.get("seq_id"))
    if len(kp) != POSE_DIM or len(bbox) != 4:
        raise DatasetError("adapter frame needs kp_px[51] and bbox[4]", lineno)
    try:
        emo = obj.get("emo")
        det = RawDetection(
            keypoints=np.asarray(kp, dtype=np.float64).reshape(N_KEYPOINTS, 3),
            bbox=BoundingBox(*map(float, bbox)),
            face_emotion=None if emo is None else EmotionDistribution(emo),
        )
    except ValueError as exc:
        raise DatasetError(str(exc), lineno) from None
    return AdapterFrame(int(obj["frame_idx"]), det, label, obj.get("seq_id"))


def read_adapter_stream(lines: Iterable[str]) -> Iterator[AdapterFrame]:
    for lineno, line in enumerate(lines, start=1):
        if line.strip():
            yield parse_adapter_line(line, lineno)


def adapter_frame_to_frame(af: AdapterFrame, stats: StandardizationStats | None = None) -> MultimodalFrame:
    if af.detection is None:
        return MultimodalFrame(PoseDescriptor(np.zeros(POSE_DIM)), EmotionDistribution(NEUTRAL), af.label)
    return build_frame(af.detection, stats, af.label)
