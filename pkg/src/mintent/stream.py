"""Streaming intent inference: ring buffer, engagement state machine, latency accounting."""
from __future__ import annotations

import enum
import json
import time
from collections import deque
from dataclasses import dataclass, field
from typing import Callable, Iterable, TextIO

import numpy as np
import torch

from .datamodel import FEATURE_DIM, POSE_DIM, MultimodalFrame, SequenceRecord
from .features import adapter_frame_to_frame, apply_standardization, read_adapter_stream
from .intentnet import TrainedClassifier, feature_select


class EngagementState(str, enum.Enum):
    NO_INTENT = "no_intent"
    TRANSITIONAL = "transitional"
    ENGAGED = "engaged"


@dataclass(frozen=True)
class EngineConfig:
    threshold: float = 0.5
    k: int = 7
    low_band: float = 0.4
    holdoff: int = 15  # frames the engaged state survives after the k-run last held

    def __post_init__(self):
        if not 0.0 <= self.low_band <= self.threshold <= 1.0:
            raise ValueError("need 0 <= low_band <= threshold <= 1")
        if self.k < 1 or self.holdoff < 1:
            raise ValueError("k and holdoff must be positive")


@dataclass(frozen=True)
class EngagementStatus:
    state: EngagementState
    prob: float | None
    run: int


@dataclass
class StreamStats:
    frames: int = 0
    dropped: int = 0
    missing_detections: int = 0
    latencies_ms: list[float] = field(default_factory=list)

    def percentile(self, q: float) -> float:
        return float(np.percentile(self.latencies_ms, q)) if self.latencies_ms else float("nan")

    def to_dict(self) -> dict:
        return {
            "frames": self.frames,
            "dropped": self.dropped,
            "missing_detections": self.missing_detections,
            "latency_p50_ms": self.percentile(50),
            "latency_p95_ms": self.percentile(95),
            "latency_max_ms": max(self.latencies_ms) if self.latencies_ms else float("nan"),
        }


class _StaggeredRecurrent:
    """Exact sliding-window evaluation for GRU/LSTM backbones.

    One zero-initialised chain starts at every frame; each push advances all
    live chains with a single batched cell step, and the chain that has
    seen a full window yields that window's frame logits.
    """

    def __init__(self, trained: TrainedClassifier):
        model = trained.model
        self.kind = trained.config.backbone
        self.cell = model.rnn.cell
        self.head = model.head
        self.W = trained.config.window
        H = trained.config.hidden
        self.h = torch.zeros(0, H)
        self.c = torch.zeros(0, H)
        self.logits = torch.zeros(0, 0)

    @torch.no_grad()
    def push(self, x: torch.Tensor) -> np.ndarray | None:
        H = self.h.shape[1]
        self.h = torch.cat([self.h, torch.zeros(1, H)])
        inp = x.expand(len(self.h), -1)
        if self.kind == "lstm":
            self.c = torch.cat([self.c, torch.zeros(1, H)])
            self.h, self.c = self.cell(inp, self.h, self.c)
        else:
            self.h = self.cell(inp, self.h)
        step = self.head(self.h)  # (n, 1)
        pad = torch.full((1, self.logits.shape[1]), float("nan"))
        self.logits = torch.cat([torch.cat([self.logits, pad]), step], 1)[:, -self.W :]
        if self.logits.shape[1] < self.W or torch.isnan(self.logits[0]).any():
            return None
        out = torch.sigmoid(self.logits[0]).numpy().astype(np.float64)
        self.h, self.c, self.logits = self.h[1:], self.c[1:], self.logits[1:]
        return out


class StreamEngine:
    """One engine per tracked person; frames must be pushed in order.

    Frames arrive bounding-box normalised but unstandardised; the engine
    applies the classifier's stored standardisation. Every full window is
    evaluated from scratch through the same code path as offline
    evaluation, unless ``fast_path`` selects the staggered recurrent carry.
    """

    def __init__(
        self,
        trained: TrainedClassifier,
        config: EngineConfig | None = None,
        fast_path: bool = False,
        clock: Callable[[], float] = time.perf_counter,
    ):
        self.trained = trained
        self.config = config or EngineConfig()
        self.window = trained.config.window
        if self.config.k > self.window:
            raise ValueError(f"k={self.config.k} exceeds the window length {self.window}")
        if fast_path and trained.config.backbone == "transformer":
            raise ValueError("the recurrent fast path needs a GRU or LSTM backbone")
        self.fast_path = fast_path
        self.clock = clock
        self.stats = StreamStats()
        self.reset()

    def reset(self) -> None:
        """Forget buffered frames and engagement history (keeps latency stats)."""
        self.buffer: deque[np.ndarray] = deque(maxlen=self.window)
        self.run = 0
        self.full_frames = 0
        self.last_fire: int | None = None
        self._carry = _StaggeredRecurrent(self.trained) if self.fast_path else None

    def _row(self, frame) -> np.ndarray:
        if isinstance(frame, MultimodalFrame):
            pose, emo = frame.pose.values, frame.emotion.q
        else:
            arr = np.asarray(frame, dtype=np.float64).reshape(-1)
            if arr.size != FEATURE_DIM:
                raise ValueError(f"frame has {arr.size} features, the model expects {FEATURE_DIM}")
            pose, emo = arr[:POSE_DIM], arr[POSE_DIM:]
        row = np.concatenate([apply_standardization(pose, self.trained.stats), emo])
        return row.astype(np.float32)

    def _state(self, prob: float) -> EngagementState:
        cfg = self.config
        if self.last_fire is not None and self.full_frames - self.last_fire < cfg.holdoff:
            return EngagementState.ENGAGED
        if prob < cfg.low_band:
            return EngagementState.NO_INTENT
        return EngagementState.TRANSITIONAL

    def push_frame(self, frame) -> tuple[float | None, EngagementStatus]:
        """Add one frame; returns (window probability or None during warm-up, status)."""
        t0 = self.clock()
        row = self._row(frame)
        self.buffer.append(row)
        prob = None
        if self._carry is not None:
            x = torch.from_numpy(np.ascontiguousarray(feature_select(row, self.trained.config.feature_set)))[None]
            probs = self._carry.push(x)
            if probs is not None:
                prob = float(probs.mean())
        elif len(self.buffer) == self.window:
            prob = self.trained.predict_window(np.stack(self.buffer)).window_prob
        if prob is None:
            status = EngagementStatus(EngagementState.NO_INTENT, None, 0)
        else:
            self.full_frames += 1
            self.run = self.run + 1 if prob >= self.config.threshold else 0
            if self.run >= self.config.k:
                self.last_fire = self.full_frames
            status = EngagementStatus(self._state(prob), prob, self.run)
        self.stats.frames += 1
        self.stats.latencies_ms.append(max(0.0, (self.clock() - t0) * 1000.0))
        return prob, status


# offline reference and replay -------------------------------------------------


def batch_window_probs(trained: TrainedClassifier, record: SequenceRecord, vectorised: bool = False) -> np.ndarray:
    """Window probabilities for every full window of ``record`` (window ending at frame W-1, W, ...).

    The default evaluates each window on its own through the same call the
    engine makes; ``vectorised`` pushes all windows through one batch.
    """
    X, _, _ = trained.windows_for([record])
    if vectorised:
        return trained.frame_probs(X).mean(1) if len(X) else np.zeros(0)
    return np.array([trained.predict_window(x).window_prob for x in X])


@dataclass
class ReplayResult:
    trace: list[dict]
    stats: StreamStats


def replay(engine: StreamEngine, records: Iterable[SequenceRecord]) -> ReplayResult:
    """Stream every record frame by frame (engine reset between sequences)."""
    trace = []
    for rec in records:
        engine.reset()
        for i, frame in enumerate(rec.frames):
            before = len(engine.stats.latencies_ms)
            prob, status = engine.push_frame(frame)
            trace.append(
                {
                    "seq_id": rec.sequence_id,
                    "frame_idx": int(rec.frame_idx[i]),
                    "prob": prob,
                    "state": status.state.value,
                    "latency_ms": engine.stats.latencies_ms[before],
                }
            )
    return ReplayResult(trace, engine.stats)


def run_adapter(engine: StreamEngine, lines: Iterable[str], out: TextIO) -> StreamStats:
    """Consume adapter JSONL frames and write one JSON object per processed frame.

    Frames whose index does not increase are dropped; frames without a
    detection are fed as an empty pose with a neutral emotion.
    """
    current, last_idx = None, None
    for af in read_adapter_stream(lines):
        key = af.seq_id
        if last_idx is not None and key != current:
            engine.reset()
            last_idx = None
        current = key
        if last_idx is not None and af.frame_idx <= last_idx:
            engine.stats.dropped += 1
            continue
        last_idx = af.frame_idx
        if af.detection is None:
            engine.stats.missing_detections += 1
        before = len(engine.stats.latencies_ms)
        prob, status = engine.push_frame(adapter_frame_to_frame(af))
        row = {"frame_idx": af.frame_idx, "prob": prob, "state": status.state.value, "latency_ms": engine.stats.latencies_ms[before]}
        if key is not None:
            row["seq_id"] = key
        out.write(json.dumps(row) + "\n")
    return engine.stats
