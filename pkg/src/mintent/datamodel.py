"""Sequence containers, windowing, feature files and checkpoint persistence."""
from __future__ import annotations

import csv
import io
import json
import math
import struct
import warnings
from collections import OrderedDict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Iterable, Sequence

import numpy as np

EMOTIONS = ("happy", "sad", "neutral", "surprise", "angry", "fear", "disgust")
N_KEYPOINTS = 17
POSE_DIM = 3 * N_KEYPOINTS
EMO_DIM = len(EMOTIONS)
FEATURE_DIM = POSE_DIM + EMO_DIM
RVAE_DIM = FEATURE_DIM + 1
DEFAULT_WINDOW = 15
DEFAULT_K = 7
SIMPLEX_TOL = 1e-3
ENVIRONMENTS = (1, 2, 3, "synthetic")

FILE_SCHEMA = "mintent-frames"
FILE_VERSION = 1

# channel layout of the 51-dim pose block: keypoint-major (u, v, s) triplets
COORD_CHANNELS = np.array([c for c in range(POSE_DIM) if c % 3 != 2])
CONF_CHANNELS = np.arange(2, POSE_DIM, 3)


class DatasetError(ValueError):
    """A feature file or record violates the on-disk schema."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


class CheckpointError(ValueError):
    pass


def _check_simplex(q: np.ndarray, tol: float = SIMPLEX_TOL) -> None:
    if q.shape[-1] != EMO_DIM:
        raise DatasetError(f"emotion vector must have {EMO_DIM} entries, got {q.shape[-1]}")
    if not np.all(np.isfinite(q)):
        raise DatasetError("emotion vector contains non-finite values")
    if np.any(q < -tol) or np.any(q > 1 + tol):
        raise DatasetError("emotion simplex violation: entries outside [0, 1]")
    sums = q.sum(axis=-1)
    if np.any(np.abs(sums - 1.0) > tol):
        bad = float(np.atleast_1d(sums)[np.argmax(np.abs(np.atleast_1d(sums) - 1.0))])
        raise DatasetError(f"emotion simplex violation: entries sum to {bad:.6g}")


def _check_pose(p: np.ndarray) -> None:
    if p.shape[-1] != POSE_DIM:
        raise DatasetError(f"pose vector must have {POSE_DIM} entries, got {p.shape[-1]}")
    if not np.all(np.isfinite(p)):
        raise DatasetError("pose vector contains non-finite values")
    conf = p[..., CONF_CHANNELS]
    if np.any(conf < 0) or np.any(conf > 1):
        raise DatasetError("keypoint confidence outside [0, 1]")


@dataclass(frozen=True)
class Keypoint:
    u: float
    v: float
    s: float

    def __post_init__(self):
        if not (math.isfinite(self.u) and math.isfinite(self.v)):
            raise ValueError("keypoint coordinates must be finite")
        if not 0.0 <= self.s <= 1.0:
            raise ValueError(f"keypoint confidence {self.s} outside [0, 1]")


@dataclass(frozen=True)
class BoundingBox:
    u_min: float
    v_min: float
    w: float
    h: float

    def __post_init__(self):
        if not (self.w > 0 and self.h > 0):
            raise ValueError(f"degenerate bounding box: w={self.w}, h={self.h}")


@dataclass(frozen=True)
class PoseDescriptor:
    """Keypoint-major (u, v, s) triplets for the 17 COCO keypoints."""

    values: np.ndarray

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if values.shape != (POSE_DIM,):
            raise ValueError(f"pose descriptor needs {POSE_DIM} values, got {values.size}")
        _check_pose(values)
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @property
    def coords(self) -> np.ndarray:
        return self.values[COORD_CHANNELS]

    @property
    def confidences(self) -> np.ndarray:
        return self.values[CONF_CHANNELS]


@dataclass(frozen=True)
class EmotionDistribution:
    q: np.ndarray

    def __post_init__(self):
        q = np.asarray(self.q, dtype=np.float64).reshape(-1)
        _check_simplex(q)
        q.setflags(write=False)
        object.__setattr__(self, "q", q)

    @classmethod
    def one_hot(cls, name: str) -> "EmotionDistribution":
        q = np.zeros(EMO_DIM)
        q[EMOTIONS.index(name)] = 1.0
        return cls(q)

    @classmethod
    def uniform(cls) -> "EmotionDistribution":
        return cls(np.full(EMO_DIM, 1.0 / EMO_DIM))


@dataclass(frozen=True)
class MultimodalFrame:
    pose: PoseDescriptor
    emotion: EmotionDistribution
    label: int | None = None

    def __post_init__(self):
        if self.label not in (None, 0, 1):
            raise ValueError(f"intent label must be 0, 1 or None, got {self.label!r}")

    @property
    def features(self) -> np.ndarray:
        """58-dim classifier view."""
        return np.concatenate([self.pose.values, self.emotion.q])

    @property
    def labeled(self) -> np.ndarray:
        """59-dim generative-model view (features followed by the label)."""
        if self.label is None:
            raise ValueError("frame has no intent label")
        return np.concatenate([self.features, [float(self.label)]])


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class SequenceRecord:
    """One tracked person's frame-synchronous pose/emotion stream.

    Stored column-wise: ``pose`` is (T, 51), ``emotion`` is (T, 7) and
    ``labels`` is (T,) or None for unlabeled streams.
    """

    sequence_id: str
    participant_id: str
    environment_id: int | str
    pose: np.ndarray
    emotion: np.ndarray
    labels: np.ndarray | None = None
    frame_idx: np.ndarray | None = None
    frame_rate: float = 30.0

    def __post_init__(self):
        pose = np.asarray(self.pose, dtype=np.float64)
        emotion = np.asarray(self.emotion, dtype=np.float64)
        if pose.ndim != 2 or emotion.ndim != 2:
            raise DatasetError(f"sequence {self.sequence_id}: pose/emotion must be 2-D")
        if len(pose) < 1:
            raise DatasetError(f"sequence {self.sequence_id}: needs at least one frame")
        if len(pose) != len(emotion):
            raise DatasetError(f"sequence {self.sequence_id}: pose and emotion lengths differ")
        _check_pose(pose)
        _check_simplex(emotion)
        if self.environment_id not in ENVIRONMENTS:
            raise DatasetError(f"unknown environment id {self.environment_id!r}")
        object.__setattr__(self, "pose", _frozen(pose))
        object.__setattr__(self, "emotion", _frozen(emotion))
        if self.labels is not None:
            labels = np.asarray(self.labels, dtype=np.int8)
            if labels.shape != (len(pose),):
                raise DatasetError(f"sequence {self.sequence_id}: label count mismatch")
            if np.any((labels != 0) & (labels != 1)):
                raise DatasetError(f"sequence {self.sequence_id}: labels must be binary")
            object.__setattr__(self, "labels", _frozen(labels))
        idx = np.arange(len(pose)) if self.frame_idx is None else np.asarray(self.frame_idx, dtype=np.int64)
        if idx.shape != (len(pose),):
            raise DatasetError(f"sequence {self.sequence_id}: frame index count mismatch")
        object.__setattr__(self, "frame_idx", _frozen(idx))

    def __len__(self) -> int:
        return len(self.pose)

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    @property
    def is_synthetic(self) -> bool:
        return self.environment_id == "synthetic"

    @property
    def features(self) -> np.ndarray:
        return np.concatenate([self.pose, self.emotion], axis=1)

    @property
    def labeled_view(self) -> np.ndarray:
        if self.labels is None:
            raise ValueError(f"sequence {self.sequence_id} is unlabeled")
        return np.concatenate([self.features, self.labels[:, None].astype(np.float64)], axis=1)

    @property
    def frames(self) -> list[MultimodalFrame]:
        out = []
        for i in range(len(self)):
            label = None if self.labels is None else int(self.labels[i])
            out.append(MultimodalFrame(PoseDescriptor(self.pose[i]), EmotionDistribution(self.emotion[i]), label))
        return out

    def replace(self, **changes: Any) -> "SequenceRecord":
        fields = dict(
            sequence_id=self.sequence_id,
            participant_id=self.participant_id,
            environment_id=self.environment_id,
            pose=self.pose,
            emotion=self.emotion,
            labels=self.labels,
            frame_idx=self.frame_idx,
            frame_rate=self.frame_rate,
        )
        fields.update(changes)
        return SequenceRecord(**fields)

    @classmethod
    def from_frames(
        cls,
        frames: Sequence[MultimodalFrame],
        sequence_id: str,
        participant_id: str = "unknown",
        environment_id: int | str = 1,
        frame_rate: float = 30.0,
    ) -> "SequenceRecord":
        labels = [f.label for f in frames]
        if any(lb is None for lb in labels) and not all(lb is None for lb in labels):
            raise DatasetError(f"sequence {sequence_id}: labels must be present on all frames or none")
        return cls(
            sequence_id=sequence_id,
            participant_id=participant_id,
            environment_id=environment_id,
            pose=np.stack([f.pose.values for f in frames]),
            emotion=np.stack([f.emotion.q for f in frames]),
            labels=None if labels[0] is None else np.array(labels),
            frame_rate=frame_rate,
        )


@dataclass(frozen=True)
class Window:
    """A contiguous run of frames viewed from its source sequence."""

    record: SequenceRecord
    start: int
    length: int = DEFAULT_WINDOW

    def __post_init__(self):
        if self.start < 0 or self.start + self.length > len(self.record):
            raise ValueError("window exceeds its source sequence")

    @property
    def origin(self) -> tuple[str, int]:
        return (self.record.sequence_id, self.start)

    @property
    def _span(self) -> slice:
        return slice(self.start, self.start + self.length)

    @property
    def features(self) -> np.ndarray:
        return self.record.features[self._span]

    @property
    def labels(self) -> np.ndarray | None:
        return None if self.record.labels is None else self.record.labels[self._span]

    @property
    def frames(self) -> list[MultimodalFrame]:
        return self.record.frames[self._span]


def windows(seq: SequenceRecord, W: int = DEFAULT_WINDOW, stride: int = 1) -> list[Window]:
    if W < 1 or stride < 1:
        raise ValueError("window length and stride must be positive")
    if len(seq) < W:
        warnings.warn(
            f"sequence {seq.sequence_id} has {len(seq)} frames, shorter than window {W}; no windows",
            stacklevel=2,
        )
        return []
    return [Window(seq, s, W) for s in range(0, len(seq) - W + 1, stride)]


def window_label(win: Window | np.ndarray, k: int = DEFAULT_K) -> int:
    """1 when at least ``k`` frames of the window carry a positive intent label."""
    labels = win.labels if isinstance(win, Window) else np.asarray(win)
    if labels is None:
        raise ValueError("window contains unlabeled frames")
    return int(np.count_nonzero(labels) >= k)


def window_arrays(
    records: Iterable[SequenceRecord],
    W: int = DEFAULT_WINDOW,
    stride: int = 1,
    labeled: bool = False,
) -> tuple[np.ndarray, np.ndarray | None, list[tuple[str, int]]]:
    """Stack every window of every record.

    Returns ``(X, Y, origins)`` with X of shape (N, W, 58) or (N, W, 59) when
    ``labeled`` is set, Y the (N, W) frame labels (None if any record is
    unlabeled) and the (sequence_id, start) origin of each window.
    """
    xs, ys, origins = [], [], []
    all_labeled = True
    for rec in records:
        if len(rec) < W:
            continue
        data = rec.labeled_view if labeled else rec.features
        starts = range(0, len(rec) - W + 1, stride)
        idx = np.asarray(list(starts))[:, None] + np.arange(W)[None, :]
        xs.append(data[idx])
        if rec.labels is None:
            all_labeled = False
        else:
            ys.append(rec.labels[idx])
        origins.extend((rec.sequence_id, int(s)) for s in starts)
    dim = RVAE_DIM if labeled else FEATURE_DIM
    if not xs:
        return np.zeros((0, W, dim), np.float32), np.zeros((0, W), np.int8), []
    X = np.concatenate(xs).astype(np.float32)
    Y = np.concatenate(ys).astype(np.int8) if all_labeled else None
    return X, Y, origins


def positive_window_fraction(records: Iterable[SequenceRecord], W: int = DEFAULT_WINDOW, k: int = DEFAULT_K) -> float:
    _, Y, _ = window_arrays(records, W)
    if Y is None or len(Y) == 0:
        return 0.0
    return float(np.mean(np.count_nonzero(Y, axis=1) >= k))


# feature files -------------------------------------------------------------

KP_COLUMNS = [f"kp_{i:02d}" for i in range(POSE_DIM)]
EMO_COLUMNS = [f"emo_{i}" for i in range(EMO_DIM)]
CSV_COLUMNS = ["seq_id", "frame_idx", "participant_id", "env_id", *KP_COLUMNS, *EMO_COLUMNS, "label"]


def _parse_env(raw: Any, line: int) -> int | str:
    if raw in ENVIRONMENTS:
        return raw
    if isinstance(raw, str) and raw.isdigit() and int(raw) in ENVIRONMENTS:
        return int(raw)
    raise DatasetError(f"unknown env_id {raw!r}", line)


def _parse_label(raw: Any, line: int) -> int | None:
    if raw is None or raw == "":
        return None
    if raw in (0, 1) and not isinstance(raw, float):
        return int(raw)
    if raw in ("0", "1"):
        return int(raw)
    raise DatasetError(f"label must be 0, 1 or null, got {raw!r}", line)


def _iter_jsonl(text: str):
    for lineno, raw in enumerate(text.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            obj = json.loads(raw)
        except json.JSONDecodeError as exc:
            raise DatasetError(f"malformed JSON ({exc.msg})", lineno) from None
        if not isinstance(obj, dict):
            raise DatasetError("each line must be a JSON object", lineno)
        if "schema" in obj and "seq_id" not in obj:
            if tuple(obj.get("emotions", EMOTIONS)) != EMOTIONS:
                raise DatasetError("file emotion order differs from " + ",".join(EMOTIONS), lineno)
            continue
        missing = [k for k in ("seq_id", "frame_idx", "participant_id", "env_id", "kp", "emo") if k not in obj]
        if missing:
            raise DatasetError(f"missing keys {missing}", lineno)
        yield lineno, obj["seq_id"], obj["frame_idx"], obj["participant_id"], obj["env_id"], obj["kp"], obj["emo"], obj.get("label")


def _iter_csv(text: str):
    lines = text.splitlines()
    body = []
    for lineno, raw in enumerate(lines, start=1):
        if raw.startswith("#"):
            if raw.startswith("# emotions=") and tuple(raw[len("# emotions="):].split(",")) != EMOTIONS:
                raise DatasetError("file emotion order differs from " + ",".join(EMOTIONS), lineno)
            continue
        body.append((lineno, raw))
    if not body:
        return
    reader = csv.reader([raw for _, raw in body])
    header = next(reader)
    if header != CSV_COLUMNS:
        raise DatasetError("unexpected CSV header", body[0][0])
    for (lineno, _), row in zip(body[1:], reader):
        if len(row) != len(CSV_COLUMNS):
            raise DatasetError(f"expected {len(CSV_COLUMNS)} columns, got {len(row)}", lineno)
        try:
            kp = [float(x) for x in row[4 : 4 + POSE_DIM]]
            emo = [float(x) for x in row[4 + POSE_DIM : 4 + POSE_DIM + EMO_DIM]]
            frame_idx = int(row[1])
        except ValueError as exc:
            raise DatasetError(f"unparseable number ({exc})", lineno) from None
        yield lineno, row[0], frame_idx, row[2], row[3], kp, emo, row[-1]


def parse_dataset(text: str, format: str = "jsonl") -> list[SequenceRecord]:
    rows = _iter_jsonl(text) if format == "jsonl" else _iter_csv(text)
    grouped: "OrderedDict[str, dict]" = OrderedDict()
    for lineno, seq_id, frame_idx, pid, env, kp, emo, label in rows:
        seq_id = str(seq_id)
        if not isinstance(frame_idx, int) or isinstance(frame_idx, bool):
            raise DatasetError("frame_idx must be an integer", lineno)
        kp = np.asarray(kp, dtype=np.float64)
        emo = np.asarray(emo, dtype=np.float64)
        try:
            _check_pose(kp)
            _check_simplex(emo)
        except DatasetError as exc:
            raise DatasetError(str(exc), lineno) from None
        g = grouped.setdefault(seq_id, dict(pid=str(pid), env=_parse_env(env, lineno), rows={}))
        if frame_idx in g["rows"]:
            raise DatasetError(f"duplicate frame ({seq_id}, {frame_idx})", lineno)
        if str(pid) != g["pid"]:
            raise DatasetError(f"sequence {seq_id} changes participant_id", lineno)
        g["rows"][frame_idx] = (kp, emo, _parse_label(label, lineno), lineno)
    records = []
    for seq_id, g in grouped.items():
        order = sorted(g["rows"])
        rows_ = [g["rows"][i] for i in order]
        labels = [r[2] for r in rows_]
        if any(lb is None for lb in labels) and not all(lb is None for lb in labels):
            first = next(r[3] for r in rows_ if r[2] is None)
            raise DatasetError(f"sequence {seq_id} mixes labeled and unlabeled frames", first)
        records.append(
            SequenceRecord(
                sequence_id=seq_id,
                participant_id=g["pid"],
                environment_id=g["env"],
                pose=np.stack([r[0] for r in rows_]),
                emotion=np.stack([r[1] for r in rows_]),
                labels=None if labels[0] is None else np.array(labels),
                frame_idx=np.array(order),
            )
        )
    return records


def _infer_format(path: Path, format: str | None) -> str:
    if format is None:
        format = "csv" if path.suffix.lower() == ".csv" else "jsonl"
    if format not in ("jsonl", "csv"):
        raise ValueError(f"unknown dataset format {format!r}")
    return format


def load_dataset(path: str | Path, format: str | None = None) -> list[SequenceRecord]:
    path = Path(path)
    return parse_dataset(path.read_text(encoding="utf-8"), _infer_format(path, format))


def dumps_dataset(records: Iterable[SequenceRecord], format: str = "jsonl") -> str:
    buf = io.StringIO()
    if format == "jsonl":
        buf.write(json.dumps({"schema": FILE_SCHEMA, "version": FILE_VERSION, "emotions": list(EMOTIONS)}) + "\n")
        for rec in records:
            for i in range(len(rec)):
                obj = {
                    "seq_id": rec.sequence_id,
                    "frame_idx": int(rec.frame_idx[i]),
                    "participant_id": rec.participant_id,
                    "env_id": rec.environment_id,
                    "kp": [float(x) for x in rec.pose[i]],
                    "emo": [float(x) for x in rec.emotion[i]],
                    "label": None if rec.labels is None else int(rec.labels[i]),
                }
                buf.write(json.dumps(obj, separators=(",", ":")) + "\n")
    else:
        buf.write("# emotions=" + ",".join(EMOTIONS) + "\n")
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)
        for rec in records:
            for i in range(len(rec)):
                writer.writerow(
                    [rec.sequence_id, int(rec.frame_idx[i]), rec.participant_id, rec.environment_id]
                    + [repr(float(x)) for x in rec.pose[i]]
                    + [repr(float(x)) for x in rec.emotion[i]]
                    + ["" if rec.labels is None else int(rec.labels[i])]
                )
    return buf.getvalue()


def save_dataset(records: Iterable[SequenceRecord], path: str | Path, format: str | None = None) -> Path:
    path = Path(path)
    path.write_text(dumps_dataset(records, _infer_format(path, format)), encoding="utf-8")
    return path


# checkpoints ---------------------------------------------------------------

CHECKPOINT_MAGIC = b"MINT1"
CHECKPOINT_SCHEMA = 1
MODEL_KINDS = ("gru", "lstm", "transformer", "mintrvae", "discriminator")


@dataclass
class ModelCheckpoint:
    model_kind: str
    config: dict[str, Any]
    arrays: "OrderedDict[str, np.ndarray]" = field(default_factory=OrderedDict)
    standardization_stats: dict[str, list[float]] | None = None
    schema_version: int = CHECKPOINT_SCHEMA

    def __post_init__(self):
        if self.model_kind not in MODEL_KINDS:
            raise CheckpointError(f"unknown model kind {self.model_kind!r}")
        self.arrays = OrderedDict(
            (name, np.ascontiguousarray(a, dtype="<f4")) for name, a in self.arrays.items()
        )


def save_checkpoint(ckpt: ModelCheckpoint, path: str | Path) -> Path:
    if not ckpt.arrays:
        raise CheckpointError("checkpoint has no arrays")
    directory, offset = [], 0
    for name, arr in ckpt.arrays.items():
        nbytes = int(np.prod(arr.shape, dtype=np.int64)) * 4
        if arr.nbytes != nbytes:
            raise CheckpointError(f"array {name!r}: payload size does not match shape {arr.shape}")
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": nbytes})
        offset += nbytes
    header = {
        "schema_version": ckpt.schema_version,
        "model_kind": ckpt.model_kind,
        "config": ckpt.config,
        "standardization_stats": ckpt.standardization_stats,
        "arrays": directory,
    }
    blob = json.dumps(header, separators=(",", ":")).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in ckpt.arrays.values():
            fh.write(arr.astype("<f4", copy=False).tobytes(order="C"))
    return path


def load_checkpoint(path: str | Path) -> ModelCheckpoint:
    raw = Path(path).read_bytes()
    if raw[: len(CHECKPOINT_MAGIC)] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    pos = len(CHECKPOINT_MAGIC)
    (hlen,) = struct.unpack_from("<Q", raw, pos)
    pos += 8
    try:
        header = json.loads(raw[pos : pos + hlen].decode("utf-8"), object_pairs_hook=OrderedDict)
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupt checkpoint header: {exc}") from None
    if header.get("schema_version") != CHECKPOINT_SCHEMA:
        raise CheckpointError(
            f"checkpoint schema_version {header.get('schema_version')} unsupported (expected {CHECKPOINT_SCHEMA})"
        )
    payload = raw[pos + hlen :]
    arrays: "OrderedDict[str, np.ndarray]" = OrderedDict()
    end = 0
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = int(np.prod(shape, dtype=np.int64)) * 4
        if entry["nbytes"] != nbytes or entry["offset"] + nbytes > len(payload):
            raise CheckpointError(f"array {entry['name']!r}: payload length does not match shape {shape}")
        chunk = payload[entry["offset"] : entry["offset"] + nbytes]
        arrays[entry["name"]] = np.frombuffer(chunk, dtype="<f4").reshape(shape).copy()
        end = max(end, entry["offset"] + nbytes)
    if end != len(payload):
        last = header["arrays"][-1]["name"] if header["arrays"] else "<none>"
        raise CheckpointError(f"array {last!r}: {len(payload) - end} trailing payload bytes")
    return ModelCheckpoint(
        model_kind=header["model_kind"],
        config=dict(header["config"]),
        arrays=arrays,
        standardization_stats=header["standardization_stats"],
        schema_version=header["schema_version"],
    )
