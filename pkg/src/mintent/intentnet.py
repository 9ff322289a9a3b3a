"""Temporal intent classifiers over fixed windows: GRU, LSTM and a one-block Transformer."""
from __future__ import annotations

import copy
import logging
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .datamodel import (
    DEFAULT_K,
    DEFAULT_WINDOW,
    FEATURE_DIM,
    POSE_DIM,
    ModelCheckpoint,
    SequenceRecord,
    window_arrays,
)
from .evalkit import auroc
from .features import StandardizationStats, fit_standardization, standardize_records
from .neuro import (
    GRU,
    LSTM,
    Adam,
    Linear,
    NumericalError,
    PositionalEmbedding,
    TransformerBlock,
    bce_with_logits,
    load_module_arrays,
    module_arrays,
)

log = logging.getLogger(__name__)

BACKBONES = ("gru", "lstm", "transformer")
FEATURE_SETS = {
    "pose_only": slice(0, POSE_DIM),
    "emotion_only": slice(POSE_DIM, FEATURE_DIM),
    "fused": slice(0, FEATURE_DIM),
}
HISTORY_COLUMNS = ("epoch", "train_loss", "val_frame_auroc", "val_seq_auroc", "lr", "tf_ratio")


def default_hidden(backbone: str, feature_set: str) -> int:
    if feature_set == "pose_only":
        return 256
    if feature_set == "emotion_only":
        return 16
    return 256 if backbone == "transformer" else 96


@dataclass
class ClassifierConfig:
    backbone: str = "transformer"
    feature_set: str = "fused"
    hidden: int | None = None
    window: int = DEFAULT_WINDOW
    heads: int = 4
    blocks: int = 1
    epochs: int = 100
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-5
    dropout: float = 0.1
    window_stride: int = 1
    early_stopping: bool = False
    patience: int = 20
    class_weight: bool = False

    def __post_init__(self):
        if self.backbone not in BACKBONES:
            raise ValueError(f"unknown backbone {self.backbone!r}; expected one of {BACKBONES}")
        if self.feature_set not in FEATURE_SETS:
            raise ValueError(f"unknown feature set {self.feature_set!r}; expected one of {tuple(FEATURE_SETS)}")
        if self.hidden is None:
            self.hidden = default_hidden(self.backbone, self.feature_set)
        if self.backbone == "transformer" and self.hidden % self.heads:
            raise ValueError(f"hidden size {self.hidden} is not divisible by {self.heads} heads")

    @property
    def input_dim(self) -> int:
        s = FEATURE_SETS[self.feature_set]
        return s.stop - s.start

    @classmethod
    def from_dict(cls, d: dict) -> "ClassifierConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown classifier config keys: {sorted(unknown)}")
        return cls(**d)


def feature_select(x, feature_set: str):
    """Slice the 58-dim (pose ++ emotion) view down to the configured modality."""
    return x[..., FEATURE_SETS[feature_set]]


@dataclass(frozen=True)
class IntentOutput:
    frame_probs: np.ndarray
    window_prob: float


class IntentClassifier(nn.Module):
    def __init__(self, config: ClassifierConfig):
        super().__init__()
        self.config = config
        H, d = config.hidden, config.input_dim
        if config.backbone == "gru":
            self.rnn = GRU(d, H)
        elif config.backbone == "lstm":
            self.rnn = LSTM(d, H)
        else:
            self.proj = Linear(d, H)
            self.pos = PositionalEmbedding(config.window, H)
            self.blocks = nn.ModuleList(TransformerBlock(H, config.heads, dropout=config.dropout) for _ in range(config.blocks))
            self.norm = nn.LayerNorm(H)
        self.head = Linear(H, 1)

    def forward(self, x: Tensor) -> Tensor:
        """(B, W, d) -> per-frame logits (B, W)."""
        if x.shape[-1] != self.config.input_dim:
            raise ValueError(f"feature dimension {x.shape[-1]} does not match model input {self.config.input_dim}")
        if self.config.backbone == "transformer":
            z = self.pos(self.proj(x))
            for block in self.blocks:
                z = block(z)
            z = self.norm(z)
        else:
            z, _ = self.rnn(x)
        return self.head(z).squeeze(-1)


@dataclass
class TrainedClassifier:
    model: IntentClassifier
    config: ClassifierConfig
    stats: StandardizationStats
    history: list[dict] = None
    best_epoch: int | None = None

    def checkpoint(self) -> ModelCheckpoint:
        cfg = asdict(self.config)
        return ModelCheckpoint(self.config.backbone, cfg, module_arrays(self.model), self.stats.to_dict())

    @torch.no_grad()
    def frame_probs(self, X: np.ndarray, batch: int = 1024) -> np.ndarray:
        """Standardised 58-dim windows (N, W, 58) -> frame probabilities (N, W)."""
        self.model.eval()
        X = np.asarray(X, dtype=np.float32)
        if len(X) == 0:
            return np.zeros((0, X.shape[1] if X.ndim > 1 else self.config.window))
        out = []
        for i in range(0, len(X), batch):
            xb = torch.from_numpy(np.ascontiguousarray(feature_select(X[i : i + batch], self.config.feature_set)))
            out.append(torch.sigmoid(self.model(xb)).numpy().astype(np.float64))
        return np.concatenate(out)

    def predict_window(self, window: np.ndarray) -> IntentOutput:
        """Single standardised (W, 58) window."""
        probs = self.frame_probs(np.asarray(window)[None])[0]
        return IntentOutput(probs, float(probs.mean()))

    def windows_for(self, records: Sequence[SequenceRecord], stride: int = 1):
        """Standardise ``records`` with the stored stats and window them."""
        return window_arrays(standardize_records(records, self.stats), self.config.window, stride)


def load_classifier(ckpt: ModelCheckpoint) -> TrainedClassifier:
    if ckpt.model_kind not in BACKBONES:
        raise ValueError(f"expected a classifier checkpoint ({', '.join(BACKBONES)}), got {ckpt.model_kind!r}")
    cfg = ClassifierConfig.from_dict(ckpt.config)
    if cfg.backbone != ckpt.model_kind:
        raise ValueError(f"checkpoint kind {ckpt.model_kind!r} disagrees with its config backbone {cfg.backbone!r}")
    model = IntentClassifier(cfg)
    load_module_arrays(model, ckpt.arrays)
    model.eval()
    return TrainedClassifier(model, cfg, StandardizationStats.from_dict(ckpt.standardization_stats), [])


def _evaluate(trained: TrainedClassifier, X: np.ndarray, Y: np.ndarray, k: int) -> tuple[float, float]:
    probs = trained.frame_probs(X)
    frame_y = Y.reshape(-1)
    win_y = (np.count_nonzero(Y, axis=1) >= k).astype(int)
    frame = auroc(probs.reshape(-1), frame_y) if 0 < frame_y.sum() < frame_y.size else float("nan")
    seq = auroc(probs.mean(1), win_y) if 0 < win_y.sum() < win_y.size else float("nan")
    return frame, seq


Rebalancer = Callable[[list[SequenceRecord]], list[SequenceRecord]]


def train_classifier(
    train_records: Sequence[SequenceRecord],
    val_records: Sequence[SequenceRecord] | None = None,
    config: ClassifierConfig | None = None,
    seed: int = 0,
    rebalancer: Rebalancer | None = None,
    stats: StandardizationStats | None = None,
    k: int = DEFAULT_K,
) -> TrainedClassifier:
    """Per-frame BCE training on windows of ``train_records``.

    Standardisation stats come from the real (non-synthetic) training
    records and are applied to all of them. The optional ``rebalancer``
    receives the standardised training records and returns an
    augmented list; validation data never passes through it. With validation
    data the returned weights are those of the best validation frame AUROC.
    """
    cfg = config or ClassifierConfig()
    real = [r for r in train_records if not r.is_synthetic]
    stats = stats or fit_standardization(real or list(train_records))
    train_std = standardize_records(train_records, stats)
    if rebalancer is not None:
        train_std = rebalancer(train_std)
    X, Y, _ = window_arrays(train_std, cfg.window, cfg.window_stride)
    if Y is None:
        raise ValueError("training records must be labelled")
    if len(X) == 0 or Y.min() == Y.max():
        raise ValueError("training set contains a single class; cannot train a classifier")
    Xv = Yv = None
    if val_records:
        Xv, Yv, _ = window_arrays(standardize_records(val_records, stats), cfg.window)
        if Yv is None or len(Xv) == 0:
            Xv = Yv = None

    torch.manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = IntentClassifier(cfg)
    trained = TrainedClassifier(model, cfg, stats, [])
    opt = Adam(model, lr=cfg.lr, weight_decay=cfg.weight_decay)
    Xt = torch.from_numpy(np.ascontiguousarray(feature_select(X, cfg.feature_set)))
    Yt = torch.from_numpy(Y.astype(np.float32))
    weight_for = None
    if cfg.class_weight:
        pos = float(Yt.mean())
        weight_for = lambda y: torch.where(y > 0.5, 0.5 / pos, 0.5 / (1 - pos))  # noqa: E731

    best = (-np.inf, None, None)
    stale = 0
    for epoch in range(cfg.epochs):
        model.train()
        perm = rng.permutation(len(Xt))
        total, n = 0.0, 0
        for start in range(0, len(perm), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            yb = Yt[idx]
            logits = model(Xt[idx])
            loss = bce_with_logits(logits, yb, None if weight_for is None else weight_for(yb))
            if not torch.isfinite(loss):
                raise NumericalError(f"non-finite classifier loss at epoch {epoch}")
            opt.zero_grad()
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            n += len(idx)
        row = {"epoch": epoch, "train_loss": total / n, "val_frame_auroc": float("nan"), "val_seq_auroc": float("nan"), "lr": cfg.lr, "tf_ratio": "n/a"}
        if Xv is not None:
            row["val_frame_auroc"], row["val_seq_auroc"] = _evaluate(trained, Xv, Yv, k)
            score = row["val_frame_auroc"]
            if np.isfinite(score) and score > best[0]:
                best = (score, epoch, copy.deepcopy(model.state_dict()))
                stale = 0
            else:
                stale += 1
        trained.history.append(row)
        log.debug("classifier epoch %d loss %.4f", epoch, row["train_loss"])
        if cfg.early_stopping and Xv is not None and stale >= cfg.patience:
            break
    if best[2] is not None:
        model.load_state_dict(best[2])
        trained.best_epoch = best[1]
    model.eval()
    return trained


def stream_trace(trained: TrainedClassifier, record: SequenceRecord) -> np.ndarray:
    """Per-frame probability as a streaming engine would report it: the window
    probability of the window ending at each frame (NaN during warm-up)."""
    W = trained.config.window
    out = np.full(len(record), np.nan)
    X, _, _ = trained.windows_for([record])
    if len(X):
        out[W - 1 :] = trained.frame_probs(X).mean(1)
    return out
