"""Recurrent VAE over labelled pose+emotion windows and minority rebalancing.

The encoder runs a per-frame MLP (Linear/BatchNorm/ReLU/Dropout x3) into a
GRU whose final state feeds mean and log-variance heads. The decoder is a
GRU cell initialised from the latent code through a linear map; at every
step it reads the previous frame concatenated with the latent code and
emits pose (linear), emotion (softmax) and intent (sigmoid) heads.

Loss weights follow the naming used across the package:
lambda_pose / lambda_emotion / lambda_intent multiply the reconstruction
terms and the KL weight ramps linearly with the epoch.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, fields
from typing import Callable, Sequence

import numpy as np
import torch
from torch import Tensor, nn

from .datamodel import (
    CONF_CHANNELS,
    COORD_CHANNELS,
    DEFAULT_K,
    DEFAULT_WINDOW,
    EMO_DIM,
    EMOTIONS,
    FEATURE_DIM,
    POSE_DIM,
    RVAE_DIM,
    ModelCheckpoint,
    SequenceRecord,
    window_arrays,
)
from .features import StandardizationStats, fit_standardization, standardize_records
from .neuro import (
    GRU,
    Adam,
    GRUCell,
    Linear,
    NumericalError,
    SequenceBatchNorm,
    bce,
    gaussian_kl,
    huber,
    kl_div,
    load_module_arrays,
    module_arrays,
)

log = logging.getLogger(__name__)


@dataclass
class RVAEConfig:
    input_dim: int = RVAE_DIM
    encoder_mlp: tuple[int, ...] = (256, 128, 64)
    latent_dim: int = 32
    encoder_hidden: int = 64
    decoder_hidden: int = 64
    dropout: float = 0.1
    lambda_pose: float = 20.0
    lambda_emotion: float = 10.0
    lambda_intent: float = 1.0
    eta_max: float = 0.8
    warmup_epochs: int = 5000
    free_bits: float = 0.1
    huber_delta: float = 1.0
    conf_offset: float = 0.1
    xi_coord: float = 0.8
    xi_conf: float = 0.2
    epochs: int = 700
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 1e-5
    window: int = DEFAULT_WINDOW
    window_stride: int = 1
    emission_noise: bool = False
    sampling_prior: str = "standard"  # or "aggregate": Gaussian fitted to training posteriors
    start_frame: str = "zero"  # or "mean": average first frame of the training windows

    def __post_init__(self):
        if self.sampling_prior not in ("standard", "aggregate"):
            raise ValueError(f"sampling_prior must be 'standard' or 'aggregate', got {self.sampling_prior!r}")
        if self.start_frame not in ("zero", "mean"):
            raise ValueError(f"start_frame must be 'zero' or 'mean', got {self.start_frame!r}")
        self.encoder_mlp = tuple(int(w) for w in self.encoder_mlp)
        weights = (self.lambda_pose, self.lambda_emotion, self.lambda_intent, self.eta_max, self.xi_coord, self.xi_conf)
        if min(weights) < 0:
            raise ValueError("loss weights must be non-negative")
        if not math.isclose(self.xi_coord + self.xi_conf, 1.0, abs_tol=1e-9):
            raise ValueError("xi_coord + xi_conf must equal 1")
        if self.input_dim != RVAE_DIM:
            raise ValueError(f"input_dim must be {RVAE_DIM}")

    @classmethod
    def from_dict(cls, d: dict) -> "RVAEConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown RVAE config keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["encoder_mlp"] = list(self.encoder_mlp)
        return d


@dataclass
class Decoded:
    """One decoder step: pose (B, 51), emotion (B, 7) on the simplex, label_prob (B,)."""

    pose: Tensor
    emotion: Tensor
    label_prob: Tensor

    @property
    def frame(self) -> Tensor:
        return torch.cat([self.pose, self.emotion, self.label_prob.unsqueeze(-1)], -1)

    def as_input(self) -> Tensor:
        """Frame fed back to the decoder: label thresholded at 0.5 to stay in-domain."""
        return torch.cat([self.pose, self.emotion, (self.label_prob >= 0.5).to(self.pose.dtype).unsqueeze(-1)], -1)


@dataclass
class Reconstruction:
    pose: Tensor  # (B, T-1, 51)
    emotion: Tensor  # (B, T-1, 7)
    label_prob: Tensor  # (B, T-1)
    mu: Tensor
    sigma: Tensor


class MintRVAE(nn.Module):
    def __init__(self, config: RVAEConfig | None = None):
        super().__init__()
        cfg = config or RVAEConfig()
        self.config = cfg
        layers: list[nn.Module] = []
        width_in = cfg.input_dim
        for width in cfg.encoder_mlp:
            layers += [Linear(width_in, width), SequenceBatchNorm(width), nn.ReLU(), nn.Dropout(cfg.dropout)]
            width_in = width
        self.frame_mlp = nn.Sequential(*layers)
        self.encoder_gru = GRU(width_in, cfg.encoder_hidden)
        self.mu_head = Linear(cfg.encoder_hidden, cfg.latent_dim)
        self.logvar_head = Linear(cfg.encoder_hidden, cfg.latent_dim)
        self.decoder_init = Linear(cfg.latent_dim, cfg.decoder_hidden)
        self.decoder_cell = GRUCell(cfg.input_dim + cfg.latent_dim, cfg.decoder_hidden)
        self.pose_head = Linear(cfg.decoder_hidden, POSE_DIM)
        self.emotion_head = Linear(cfg.decoder_hidden, EMO_DIM)
        self.label_head = Linear(cfg.decoder_hidden, 1)

    def encode(self, x: Tensor) -> tuple[Tensor, Tensor]:
        """(B, T, 59) labelled windows -> posterior mean and standard deviation (B, latent)."""
        if x.shape[1] == 0:
            raise ValueError("cannot encode an empty sequence")
        _, last = self.encoder_gru(self.frame_mlp(x))
        mu = self.mu_head(last)
        sigma = torch.exp(0.5 * self.logvar_head(last))
        return mu, sigma

    @staticmethod
    def reparameterize(mu: Tensor, sigma: Tensor, eps: Tensor) -> Tensor:
        return mu + sigma * eps

    def init_hidden(self, h: Tensor) -> Tensor:
        return self.decoder_init(h)

    def decode_step(self, h: Tensor, prev: Tensor, hidden: Tensor) -> tuple[Decoded, Tensor]:
        hidden = self.decoder_cell(torch.cat([prev, h], -1), hidden)
        out = Decoded(
            pose=self.pose_head(hidden),
            emotion=torch.softmax(self.emotion_head(hidden), -1),
            label_prob=torch.sigmoid(self.label_head(hidden)).squeeze(-1),
        )
        return out, hidden

    def reconstruct(
        self,
        x: Tensor,
        tf_ratio: float = 1.0,
        eps: Tensor | None = None,
        generator: torch.Generator | None = None,
        use_truth: Tensor | None = None,
    ) -> Reconstruction:
        """Teacher-forced / scheduled-sampling pass predicting frames 2..T from 1..T-1.

        ``use_truth`` (B, T-2) pins the per-step selection; otherwise each
        step draws Bernoulli(tf_ratio) per sequence.
        """
        B, T, _ = x.shape
        mu, sigma = self.encode(x)
        if eps is None:
            eps = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
        h = self.reparameterize(mu, sigma, eps)
        if use_truth is None:
            use_truth = torch.rand((B, max(T - 2, 0)), generator=generator) < tf_ratio
        hidden = self.init_hidden(h)
        prev = x[:, 0]
        poses, emos, labels = [], [], []
        for i in range(T - 1):
            dec, hidden = self.decode_step(h, prev, hidden)
            poses.append(dec.pose)
            emos.append(dec.emotion)
            labels.append(dec.label_prob)
            if i < T - 2:
                prev = torch.where(use_truth[:, i : i + 1], x[:, i + 1], dec.as_input().detach())
        return Reconstruction(torch.stack(poses, 1), torch.stack(emos, 1), torch.stack(labels, 1), mu, sigma)

    @torch.no_grad()
    def generate(self, h: Tensor, length: int, start: Tensor | None = None) -> Tensor:
        """Fully autoregressive decode from latent codes -> (n, length, 59).

        The decoder reads ``start`` (default: a zero frame) before the first step.
        """
        hidden = self.init_hidden(h)
        prev = h.new_zeros(h.shape[0], self.config.input_dim)
        if start is not None:
            prev = prev + start
        frames = []
        for _ in range(length):
            dec, hidden = self.decode_step(h, prev, hidden)
            frames.append(dec.frame)
            prev = dec.as_input()
        return torch.stack(frames, 1) if frames else h.new_zeros(h.shape[0], 0, self.config.input_dim)


# objective -------------------------------------------------------------------


def pose_loss(
    pred: Tensor,
    target: Tensor,
    xi_coord: float = 0.8,
    xi_conf: float = 0.2,
    conf_offset: float = 0.1,
    delta: float = 1.0,
) -> Tensor:
    """Confidence-weighted Huber on keypoint coordinates plus MSE on confidences.

    ``pred`` / ``target`` are (..., S, 51); the Huber term sums over joints
    and averages over steps (and any leading batch axes).
    """
    shape = target.shape[:-1] + (POSE_DIM // 3, 3)
    p, t = pred.reshape(shape), target.reshape(shape)
    weight = t[..., 2] + conf_offset
    coord = (weight * huber(p[..., :2] - t[..., :2], delta)).sum(-1).mean()
    conf = ((p[..., 2] - t[..., 2]) ** 2).mean()
    return xi_coord * coord + xi_conf * conf


def emotion_loss(pred: Tensor, target: Tensor) -> Tensor:
    """KL(target || pred) per step, averaged over steps."""
    return kl_div(target, pred)


def intent_loss(pred_prob: Tensor, target: Tensor) -> Tensor:
    return bce(pred_prob, target)


def kl_regularizer(mu: Tensor, sigma: Tensor, free_bits: float = 0.1) -> Tensor:
    """Sum over latent dimensions of max(KL_d, free_bits); KL_d is batch-averaged first."""
    kl = gaussian_kl(mu, sigma)
    if kl.ndim > 1:
        kl = kl.reshape(-1, kl.shape[-1]).mean(0)
    return kl.clamp_min(free_bits).sum()


def kl_weight(epoch: float, eta_max: float = 0.8, warmup: float = 5000) -> float:
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    return eta_max * min(epoch / warmup, 1.0)


def teacher_forcing_ratio(epoch: int, epochs: int) -> float:
    """Linear anneal: 1 at the first epoch, 0 at the last."""
    if epochs <= 1:
        return 1.0
    return max(0.0, 1.0 - epoch / (epochs - 1))


@dataclass
class LossComponents:
    pose: Tensor | float
    emotion: Tensor | float
    intent: Tensor | float
    kl: Tensor | float


def total_loss(c: LossComponents, epoch: float, config: RVAEConfig | None = None):
    cfg = config or RVAEConfig()
    eta = kl_weight(epoch, cfg.eta_max, cfg.warmup_epochs)
    return cfg.lambda_pose * c.pose + cfg.lambda_emotion * c.emotion + cfg.lambda_intent * c.intent + eta * c.kl


def loss_components(rec: Reconstruction, x: Tensor, cfg: RVAEConfig) -> LossComponents:
    target = x[:, 1:]
    return LossComponents(
        pose=pose_loss(rec.pose, target[..., :POSE_DIM], cfg.xi_coord, cfg.xi_conf, cfg.conf_offset, cfg.huber_delta),
        emotion=emotion_loss(rec.emotion, target[..., POSE_DIM:FEATURE_DIM]),
        intent=intent_loss(rec.label_prob, target[..., FEATURE_DIM]),
        kl=kl_regularizer(rec.mu, rec.sigma, cfg.free_bits),
    )


def scheduled_input(truth, predicted, tau: float, rng: np.random.Generator):
    """Pick the ground-truth frame with probability ``tau``, else the model's own
    prediction with its label channel thresholded at 0.5."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError("teacher-forcing probability must lie in [0, 1]")
    if rng.random() < tau:
        return truth
    pred = np.array(predicted, dtype=np.float64, copy=True)
    pred[..., FEATURE_DIM] = (pred[..., FEATURE_DIM] >= 0.5).astype(np.float64)
    return pred


# emission model ----------------------------------------------------------------

_NEUTRAL_IDX = POSE_DIM + EMOTIONS.index("neutral")


def joint_missing(frames: np.ndarray) -> np.ndarray:
    """(..., 59) frames -> (..., 17) mask of keypoints reported with confidence 0."""
    return np.asarray(frames)[..., CONF_CHANNELS] == 0


def face_missing(frames: np.ndarray) -> np.ndarray:
    """Frames whose emotion block is the neutral one-hot fallback of an undetected face."""
    return np.asarray(frames)[..., _NEUTRAL_IDX] >= 1 - 1e-6


@dataclass
class EmissionModel:
    """Observation noise laid over decoded mean trajectories.

    The decoder is trained to read its own mean predictions, so sampling
    keeps that loop intact and draws observations afterwards. Keypoint and
    face dropouts follow two-state chains; present keypoints, confidences
    and centred emotion log-probabilities receive AR(1) Gaussian residuals.
    All quantities are fitted on fully autoregressive reconstructions of
    the training windows.
    """

    miss_rate: np.ndarray  # (17,) stationary keypoint missing rate
    miss_given_prev: np.ndarray  # (2, 17) P(missing | previous present / missing)
    missing_coord: np.ndarray  # (34,) standardised value of a zero placeholder coordinate
    face_miss_rate: np.ndarray  # (1,)
    face_miss_given_prev: np.ndarray  # (2,)
    pose_bias: np.ndarray  # (51,) residual mean on present keypoints
    pose_std: np.ndarray  # (51,)
    pose_rho: np.ndarray  # (51,) lag-1 residual autocorrelation
    emotion_bias: np.ndarray  # (7,)
    emotion_std: np.ndarray  # (7,)
    emotion_rho: np.ndarray  # (7,)

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"emission.{k}": np.asarray(v, dtype=np.float32) for k, v in asdict(self).items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "EmissionModel | None":
        keys = [f.name for f in fields(cls)]
        if not all(f"emission.{k}" in arrays for k in keys):
            return None
        return cls(**{k: np.asarray(arrays[f"emission.{k}"], dtype=np.float64) for k in keys})

    @staticmethod
    def _chain(rate: np.ndarray, given_prev: np.ndarray, shape: tuple, rng: np.random.Generator) -> np.ndarray:
        n, T = shape[:2]
        state = np.zeros(shape, dtype=bool)
        state[:, 0] = rng.random(state[:, 0].shape) < rate
        cols = np.arange(shape[2]) if len(shape) > 2 else None
        for t in range(1, T):
            prev = state[:, t - 1].astype(np.int64)
            p = given_prev[prev, cols] if cols is not None else given_prev[prev]
            state[:, t] = rng.random(p.shape) < p
        return state

    @staticmethod
    def _ar_noise(std: np.ndarray, rho: np.ndarray, shape: tuple, rng: np.random.Generator) -> np.ndarray:
        eps = rng.normal(size=shape)
        out = np.empty(shape)
        out[:, 0] = eps[:, 0]
        innov = np.sqrt(np.clip(1 - rho**2, 0.0, 1.0))
        for t in range(1, shape[1]):
            out[:, t] = rho * out[:, t - 1] + innov * eps[:, t]
        return out * std

    def apply(self, frames: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        """Draw observed (n, T, 59) frames around decoded means."""
        out = np.array(frames, dtype=np.float64, copy=True)
        n, T, _ = out.shape
        n_joints = len(CONF_CHANNELS)
        miss = self._chain(self.miss_rate, self.miss_given_prev, (n, T, n_joints), rng)
        pose = out[..., :POSE_DIM] + self.pose_bias + self._ar_noise(self.pose_std, self.pose_rho, (n, T, POSE_DIM), rng)
        coords = pose[..., COORD_CHANNELS].reshape(n, T, n_joints, 2)
        coords = np.where(miss[..., None], self.missing_coord.reshape(-1, 2), coords)
        pose[..., COORD_CHANNELS] = coords.reshape(n, T, -1)
        pose[..., CONF_CHANNELS] = np.where(miss, 0.0, np.clip(pose[..., CONF_CHANNELS], 1e-3, 1.0))
        out[..., :POSE_DIM] = pose

        logp = np.log(np.clip(out[..., POSE_DIM:FEATURE_DIM], 1e-7, 1.0))
        logp = logp - logp.mean(-1, keepdims=True) + self.emotion_bias
        logp = logp + self._ar_noise(self.emotion_std, self.emotion_rho, logp.shape, rng)
        e = np.exp(logp - logp.max(-1, keepdims=True))
        emo = e / e.sum(-1, keepdims=True)
        hidden = self._chain(self.face_miss_rate[0], self.face_miss_given_prev, (n, T), rng)
        emo[hidden] = np.eye(EMO_DIM)[EMOTIONS.index("neutral")]
        out[..., POSE_DIM:FEATURE_DIM] = emo
        return out


def _transition(prev_state: np.ndarray, next_state: np.ndarray) -> np.ndarray:
    """P(next | prev in {0, 1}) along axis 0, falling back to the marginal rate for unseen states."""
    marginal = next_state.mean(0)
    rows = []
    for s in (0, 1):
        sel = prev_state == s
        count = sel.sum(0)
        hits = (next_state & sel).sum(0)
        rows.append(np.where(count > 0, hits / np.maximum(count, 1), marginal))
    return np.stack(rows)


def _residual_moments(resid: np.ndarray, valid: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-channel mean, std and lag-1 autocorrelation of (N, T, C) residuals over valid entries."""
    C = resid.shape[-1]
    bias, std, rho = np.zeros(C), np.zeros(C), np.zeros(C)
    for c in range(C):
        r, v = resid[..., c], valid[..., c]
        if v.sum() < 2:
            continue
        bias[c], std[c] = r[v].mean(), r[v].std()
        pair = v[:, 1:] & v[:, :-1]
        if pair.sum() > 2 and std[c] > 0:
            a = r[:, 1:][pair] - bias[c]
            b = r[:, :-1][pair] - bias[c]
            rho[c] = np.clip(np.mean(a * b) / std[c] ** 2, -0.99, 0.99)
    return bias, std, rho


@torch.no_grad()
def fit_emission_model(model: MintRVAE, X: Tensor, stats: StandardizationStats, batch: int = 512) -> EmissionModel:
    model.eval()
    preds = []
    for i in range(0, len(X), batch):
        xb = X[i : i + batch]
        free = torch.zeros(len(xb), xb.shape[1] - 2, dtype=torch.bool)
        rec = model.reconstruct(xb, eps=torch.zeros(len(xb), model.config.latent_dim), use_truth=free)
        preds.append(torch.cat([rec.pose, rec.emotion], -1))
    pred = torch.cat(preds).numpy().astype(np.float64)
    x = X.numpy().astype(np.float64)
    target = x[:, 1:]

    miss = joint_missing(x)
    present = np.repeat(~miss[:, 1:], 3, axis=-1)
    pose_valid = np.zeros_like(target[..., :POSE_DIM], dtype=bool)
    pose_valid[..., COORD_CHANNELS] = present[..., : len(COORD_CHANNELS)]
    pose_valid[..., CONF_CHANNELS] = ~miss[:, 1:]
    pose_bias, pose_std, pose_rho = _residual_moments(target[..., :POSE_DIM] - pred[..., :POSE_DIM], pose_valid)

    face = face_missing(x)
    t_log = np.log(np.clip(target[..., POSE_DIM:FEATURE_DIM], 1e-7, 1.0))
    p_log = np.log(np.clip(pred[..., POSE_DIM:], 1e-7, 1.0))
    d = (t_log - t_log.mean(-1, keepdims=True)) - (p_log - p_log.mean(-1, keepdims=True))
    emo_valid = np.repeat(~face[:, 1:, None], EMO_DIM, axis=-1)
    emotion_bias, emotion_std, emotion_rho = _residual_moments(d, emo_valid)

    flat_miss, flat_face = miss.reshape(-1, miss.shape[-1]), face.reshape(-1)
    return EmissionModel(
        miss_rate=flat_miss.mean(0),
        miss_given_prev=_transition(miss[:, :-1].reshape(-1, miss.shape[-1]), miss[:, 1:].reshape(-1, miss.shape[-1])),
        missing_coord=(0.0 - stats.mean[COORD_CHANNELS]) / stats.std[COORD_CHANNELS],
        face_miss_rate=np.array([flat_face.mean()]),
        face_miss_given_prev=_transition(face[:, :-1].reshape(-1, 1), face[:, 1:].reshape(-1, 1))[:, 0],
        pose_bias=pose_bias,
        pose_std=pose_std,
        pose_rho=pose_rho,
        emotion_bias=emotion_bias,
        emotion_std=emotion_std,
        emotion_rho=emotion_rho,
    )


@dataclass
class LatentSummary:
    """Training-set statistics used by the optional sampling modes."""

    prior_mean: np.ndarray  # (latent,)
    prior_chol: np.ndarray  # (latent, latent) Cholesky factor of the aggregate posterior covariance
    start_frame: np.ndarray  # (59,) mean first frame, label thresholded

    def arrays(self) -> dict[str, np.ndarray]:
        return {f"sampling.{k}": np.asarray(v, dtype=np.float32) for k, v in asdict(self).items()}

    @classmethod
    def from_arrays(cls, arrays: dict[str, np.ndarray]) -> "LatentSummary | None":
        keys = [f.name for f in fields(cls)]
        if not all(f"sampling.{k}" in arrays for k in keys):
            return None
        return cls(**{k: np.asarray(arrays[f"sampling.{k}"], dtype=np.float64) for k in keys})


@torch.no_grad()
def fit_latent_summary(model: MintRVAE, X: Tensor, batch: int = 512) -> LatentSummary:
    """Moment-match a Gaussian to the aggregate posterior: cov(mu) + mean(sigma^2)."""
    model.eval()
    mus, variances = [], []
    for i in range(0, len(X), batch):
        mu, sigma = model.encode(X[i : i + batch])
        mus.append(mu.numpy().astype(np.float64))
        variances.append((sigma**2).numpy().astype(np.float64))
    mu = np.concatenate(mus)
    cov = np.diag(np.concatenate(variances).mean(0))
    if len(mu) > 1:
        cov = cov + np.cov(mu, rowvar=False)
    chol = np.linalg.cholesky(cov + 1e-9 * np.eye(len(cov)))
    start = X[:, 0].numpy().astype(np.float64).mean(0)
    start[FEATURE_DIM] = float(start[FEATURE_DIM] >= 0.5)
    return LatentSummary(mu.mean(0), chol, start)


# training --------------------------------------------------------------------

LOG_COLUMNS = ("epoch", "J_pose", "J_emotion", "J_intent", "J_KL", "eta", "tau", "total")


@dataclass
class TrainedRVAE:
    model: MintRVAE
    config: RVAEConfig
    stats: StandardizationStats
    loss_log: list[dict[str, float]]
    emission: EmissionModel | None = None
    latent: LatentSummary | None = None

    def checkpoint(self) -> ModelCheckpoint:
        arrays = module_arrays(self.model)
        if self.emission is not None:
            arrays.update(self.emission.arrays())
        if self.latent is not None:
            arrays.update(self.latent.arrays())
        return ModelCheckpoint("mintrvae", self.config.to_dict(), arrays, self.stats.to_dict())


def from_checkpoint(ckpt: ModelCheckpoint) -> TrainedRVAE:
    if ckpt.model_kind != "mintrvae":
        raise ValueError(f"expected a mintrvae checkpoint, got {ckpt.model_kind!r}")
    cfg = RVAEConfig.from_dict(ckpt.config)
    model = MintRVAE(cfg)
    extras = ("emission.", "sampling.")
    load_module_arrays(model, {k: v for k, v in ckpt.arrays.items() if not k.startswith(extras)})
    model.eval()
    stats = StandardizationStats.from_dict(ckpt.standardization_stats)
    return TrainedRVAE(model, cfg, stats, [], EmissionModel.from_arrays(ckpt.arrays), LatentSummary.from_arrays(ckpt.arrays))


def training_windows(records: Sequence[SequenceRecord], cfg: RVAEConfig, stats: StandardizationStats) -> Tensor:
    X, _, _ = window_arrays(standardize_records(records, stats), cfg.window, cfg.window_stride, labeled=True)
    return torch.from_numpy(X)


def train(
    records: Sequence[SequenceRecord],
    config: RVAEConfig | None = None,
    seed: int = 0,
    stats: StandardizationStats | None = None,
    on_epoch: Callable[[dict], None] | None = None,
) -> TrainedRVAE:
    """Fit the model on labelled windows of ``records`` (standardised with ``stats``,
    fitted on ``records`` when omitted)."""
    cfg = config or RVAEConfig()
    if any(not r.is_labeled for r in records):
        raise ValueError("RVAE training needs labelled sequences")
    stats = stats or fit_standardization(records)
    X = training_windows(records, cfg, stats)
    if len(X) < 2:
        raise ValueError(f"need at least 2 training windows of length {cfg.window}")
    torch.manual_seed(seed)
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    model = MintRVAE(cfg)
    opt = Adam(model, lr=cfg.lr, weight_decay=cfg.weight_decay)
    loss_log = []
    for epoch in range(cfg.epochs):
        model.train()
        tau = teacher_forcing_ratio(epoch, cfg.epochs)
        eta = kl_weight(epoch, cfg.eta_max, cfg.warmup_epochs)
        perm = rng.permutation(len(X))
        sums = np.zeros(5)
        n_batches = 0
        for start in range(0, len(X), cfg.batch_size):
            idx = perm[start : start + cfg.batch_size]
            if len(idx) < 2:
                continue
            xb = X[idx]
            rec = model.reconstruct(xb, tau, generator=gen)
            comps = loss_components(rec, xb, cfg)
            loss = total_loss(comps, epoch, cfg)
            if not torch.isfinite(loss):
                bad = [f.name for f in fields(comps) if not torch.isfinite(getattr(comps, f.name))]
                raise NumericalError(f"non-finite RVAE loss at epoch {epoch} (components: {bad or ['total']})")
            opt.zero_grad()
            loss.backward()
            opt.step()
            sums += [comps.pose.item(), comps.emotion.item(), comps.intent.item(), comps.kl.item(), loss.item()]
            n_batches += 1
        means = sums / max(n_batches, 1)
        row = dict(zip(LOG_COLUMNS, [epoch, *means[:4], eta, tau, means[4]]))
        loss_log.append(row)
        if on_epoch is not None:
            on_epoch(row)
        log.debug("rvae epoch %d total %.4f", epoch, row["total"])
    model.eval()
    return TrainedRVAE(model, cfg, stats, loss_log, fit_emission_model(model, X, stats), fit_latent_summary(model, X))


# sampling and rebalancing ----------------------------------------------------


class RebalanceError(RuntimeError):
    pass


def sample_frames(trained: TrainedRVAE, n: int, length: int, seed: int, chunk: int = 2048) -> np.ndarray:
    """Decode ``n`` latent draws into (n, length, 59) standardised frames (label channel is a probability).

    By default codes come from N(0, I) and decoding starts at a zero frame;
    the config's ``sampling_prior``, ``start_frame`` and ``emission_noise``
    switch on the fitted alternatives.
    """
    cfg = trained.config
    gen = torch.Generator().manual_seed(seed)
    rng = np.random.default_rng(seed)
    trained.model.eval()
    summary = trained.latent
    needs_summary = cfg.sampling_prior == "aggregate" or cfg.start_frame == "mean"
    if needs_summary and summary is None:
        raise ValueError("checkpoint lacks the latent summary needed by the configured sampling mode")
    if cfg.emission_noise and trained.emission is None:
        raise ValueError("checkpoint lacks an emission model")
    start_frame = None
    if cfg.start_frame == "mean":
        start_frame = torch.from_numpy(summary.start_frame.astype(np.float32))
    outs = []
    for start in range(0, n, chunk):
        m = min(chunk, n - start)
        h = torch.randn((m, cfg.latent_dim), generator=gen)
        if cfg.sampling_prior == "aggregate":
            h = torch.from_numpy(summary.prior_mean.astype(np.float32)) + h @ torch.from_numpy(summary.prior_chol.T.astype(np.float32))
        frames = trained.model.generate(h, length, start_frame).numpy().astype(np.float64)
        if cfg.emission_noise:
            frames = trained.emission.apply(frames, rng)
        outs.append(frames)
    if not outs:
        return np.zeros((0, length, RVAE_DIM))
    return np.concatenate(outs)


def finalize_frames(frames: np.ndarray) -> np.ndarray:
    """Clip confidences to [0, 1], renormalise emotions and threshold the label channel."""
    out = np.array(frames, dtype=np.float64)
    conf = out[..., :POSE_DIM][..., CONF_CHANNELS]
    out[..., CONF_CHANNELS] = np.clip(conf, 0.0, 1.0)
    emo = out[..., POSE_DIM:FEATURE_DIM]
    out[..., POSE_DIM:FEATURE_DIM] = emo / emo.sum(-1, keepdims=True)
    out[..., FEATURE_DIM] = out[..., FEATURE_DIM] >= 0.5
    return out


def frames_to_records(frames: np.ndarray, prefix: str) -> list[SequenceRecord]:
    frames = finalize_frames(frames)
    return [
        SequenceRecord(
            sequence_id=f"{prefix}{i:06d}",
            participant_id="synthetic",
            environment_id="synthetic",
            pose=f[:, :POSE_DIM],
            emotion=f[:, POSE_DIM:FEATURE_DIM],
            labels=f[:, FEATURE_DIM].astype(np.int8),
        )
        for i, f in enumerate(frames)
    ]


def sample(trained: TrainedRVAE, n: int, length: int | None = None, seed: int = 0) -> list[SequenceRecord]:
    """Draw ``n`` synthetic sequences from the prior (standardised pose space)."""
    length = length or trained.config.window
    if n == 0:
        return []
    return frames_to_records(sample_frames(trained, n, length, seed), f"syn{seed}_")


def rebalance(
    records: Sequence[SequenceRecord],
    trained: TrainedRVAE,
    target_ratio: float,
    seed: int = 0,
    W: int = DEFAULT_WINDOW,
    k: int = DEFAULT_K,
    chunk: int = 2048,
) -> list[SequenceRecord]:
    """Append synthetic positive windows until the positive-window fraction reaches ``target_ratio``.

    ``records`` must live in the generator's standardised space. Synthetic
    negatives are discarded.
    """
    if not 0.0 < target_ratio <= 1.0:
        raise ValueError("target_ratio must lie in (0, 1]")
    _, Y, _ = window_arrays(records, W)
    n_win = 0 if Y is None else len(Y)
    n_pos = 0 if Y is None else int(np.sum(np.count_nonzero(Y, axis=1) >= k))
    if n_win and n_pos / n_win >= target_ratio:
        return list(records)
    if target_ratio >= 1.0:
        raise RebalanceError("target ratio 1.0 is unreachable while negative windows are present")
    need = int(math.ceil((target_ratio * n_win - n_pos) / (1 - target_ratio)))
    budget = 10 * need
    kept: list[np.ndarray] = []
    drawn = 0
    have = 0
    round_ = 0
    while have < need:
        frames = sample_frames(trained, chunk, W, seed * 1_000_003 + round_)
        round_ += 1
        drawn += chunk
        pos = frames[np.count_nonzero(frames[:, :, FEATURE_DIM] >= 0.5, axis=1) >= k]
        kept.append(pos[: need - have])
        have += len(kept[-1])
        if drawn >= budget and have < need and have < 0.01 * drawn:
            raise RebalanceError(
                f"generator cannot rebalance: {have} positive windows from {drawn} draws (< 1%)"
            )
    synth = frames_to_records(np.concatenate(kept), f"reb{seed}_")
    return list(records) + synth


# realism ---------------------------------------------------------------------


def realism(
    trained: TrainedRVAE,
    records: Sequence[SequenceRecord],
    seeds: Sequence[int] = (0, 1, 2),
    stride: int = 4,
    epochs: int = 30,
) -> list:
    """Discriminative score of prior samples against labelled windows of ``records``.

    Real windows are grouped by source sequence so the discriminator's
    80/20 split never puts overlapping windows on both sides; each seed
    draws a fresh synthetic pool of the same size.
    """
    from .evalkit import discriminative_score

    W = trained.config.window
    real, _, origin = window_arrays(standardize_records(records, trained.stats), W, stride, labeled=True)
    groups = [o[0] for o in origin]
    results = []
    for seed in seeds:
        synth = finalize_frames(sample_frames(trained, len(real), W, seed=seed))
        results.append(discriminative_score(real, synth, seed=seed, epochs=epochs, real_groups=groups))
    return results
