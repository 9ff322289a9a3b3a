"""Procedural approach / pass-by trajectories with known intent onset.

People are posed as a 17-joint COCO skeleton in a body frame (height 1,
y up, z toward the camera when facing it), rotated by a yaw angle,
projected orthographically and placed in the image. Passers-by walk
laterally in profile; intending people turn toward the camera at onset,
approach (their box grows) and drift toward a happy expression.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, replace

import numpy as np

from .datamodel import EMO_DIM, EMOTIONS, N_KEYPOINTS, SequenceRecord
from .features import NEUTRAL, normalize_pose_array

# body-frame template (x lateral, y up, z forward), COCO keypoint order
_TEMPLATE = np.array(
    [
        (0.00, 0.93, 0.06),  # nose
        (0.03, 0.95, 0.04),  # left eye
        (-0.03, 0.95, 0.04),  # right eye
        (0.07, 0.94, -0.01),  # left ear
        (-0.07, 0.94, -0.01),  # right ear
        (0.13, 0.82, 0.00),  # left shoulder
        (-0.13, 0.82, 0.00),  # right shoulder
        (0.16, 0.64, 0.00),  # left elbow
        (-0.16, 0.64, 0.00),  # right elbow
        (0.17, 0.47, 0.02),  # left wrist
        (-0.17, 0.47, 0.02),  # right wrist
        (0.09, 0.52, 0.00),  # left hip
        (-0.09, 0.52, 0.00),  # right hip
        (0.09, 0.28, 0.00),  # left knee
        (-0.09, 0.28, 0.00),  # right knee
        (0.09, 0.04, 0.00),  # left ankle
        (-0.09, 0.04, 0.00),  # right ankle
    ]
)
_LEFT_LEG, _RIGHT_LEG = (13, 15), (14, 16)
_LEFT_ARM, _RIGHT_ARM = (7, 9), (8, 10)
_HAPPY = EMOTIONS.index("happy")
_NEUTRAL = EMOTIONS.index("neutral")

# (image width, image height, base person height range in px) per environment
_CAMERAS = {1: (1280, 720, (170, 260)), 2: (1280, 720, (150, 240)), 3: (1920, 1080, (200, 330))}


@dataclass(frozen=True)
class ScenarioConfig:
    n_sequences: int = 120
    length_range: tuple[int, int] = (60, 120)
    intent_fraction: float = 0.5
    onset_range: tuple[float, float] = (0.2, 0.8)
    n_participants: int = 10
    env_weights: tuple[float, float, float] = (0.55, 0.3, 0.15)
    # approach kinematics
    growth_range: tuple[float, float] = (0.004, 0.016)  # relative box growth per frame after onset
    arrival_scale: float = 1.8  # stop approaching at this multiple of the starting size
    passerby_yaw_deg: tuple[float, float] = (60.0, 100.0)
    facing_yaw_deg: float = 20.0
    turn_frames: tuple[int, int] = (4, 9)
    passerby_depth_drift: float = 0.008
    distractor_fraction: float = 0.45  # no-intent people that approach or face the camera
    wave_prob: float = 0.4
    # emotion dynamics
    happy_drift: float = 1.6
    emotion_noise: float = 0.45
    emotion_ar: float = 0.15
    face_miss_prob: float = 0.4  # face lost when seen in profile
    # observation noise
    jitter: float = 0.02  # coordinate jitter in box-normalised units
    conf_dropout: float = 0.1  # long-run fraction of keypoints reported missing
    dropout_persistence: float = 0.8  # P(missing keypoint stays missing next frame)
    conf_smoothing: float = 0.7  # AR(1) coefficient of detector confidence noise
    bbox_noise: float = 0.015
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.intent_fraction <= 1.0:
            raise ValueError("intent_fraction must lie in [0, 1]")
        if self.length_range[0] < 15 or self.length_range[0] > self.length_range[1]:
            raise ValueError("length_range must satisfy 15 <= min <= max")


@dataclass(frozen=True, eq=False)
class RawSequence:
    """Pixel-space extractor output for one tracked person."""

    sequence_id: str
    participant_id: str
    environment_id: int
    kp_px: np.ndarray  # (T, 51) keypoint-major (u, v, s)
    bbox: np.ndarray  # (T, 4) (u_min, v_min, w, h)
    emotion: np.ndarray  # (T, 7)
    face_detected: np.ndarray  # (T,) bool
    labels: np.ndarray  # (T,)
    onset: int | None = None
    frame_rate: float = 30.0

    def __len__(self) -> int:
        return len(self.labels)

    def to_record(self) -> SequenceRecord:
        return SequenceRecord(
            sequence_id=self.sequence_id,
            participant_id=self.participant_id,
            environment_id=self.environment_id,
            pose=normalize_pose_array(self.kp_px, self.bbox),
            emotion=self.emotion,
            labels=self.labels,
            frame_rate=self.frame_rate,
        )

    def adapter_lines(self) -> list[str]:
        out = []
        for i in range(len(self)):
            obj = {
                "seq_id": self.sequence_id,
                "frame_idx": i,
                "kp_px": [float(x) for x in self.kp_px[i]],
                "bbox": [float(x) for x in self.bbox[i]],
                "emo": [float(x) for x in self.emotion[i]] if self.face_detected[i] else None,
                "label": int(self.labels[i]),
            }
            out.append(json.dumps(obj, separators=(",", ":")))
        return out


@dataclass
class _Participant:
    pid: str
    proportions: np.ndarray  # per-keypoint lateral scale
    gait_freq: float
    happy_bias: float
    emotion_bias: np.ndarray


def _participants(n: int, rng: np.random.Generator) -> list[_Participant]:
    out = []
    for i in range(n):
        width = rng.uniform(0.85, 1.15)
        props = np.ones(N_KEYPOINTS)
        props[5:11] *= width
        props[11:] *= rng.uniform(0.9, 1.1)
        bias = rng.normal(0.0, 0.3, EMO_DIM)
        out.append(_Participant(f"P{i:02d}", props, rng.uniform(0.8, 1.15), rng.uniform(-0.4, 0.8), bias))
    return out


def _softmax(x: np.ndarray) -> np.ndarray:
    e = np.exp(x - x.max(-1, keepdims=True))
    return e / e.sum(-1, keepdims=True)


def _pose_body(yaw: float, gait: float, phase: float, wave: float, person: _Participant, t: int) -> np.ndarray:
    """Return (17, 3) body-frame points after yaw rotation."""
    p = _TEMPLATE.copy()
    p[:, 0] *= person.proportions
    swing = np.sin(phase)
    for (knee, ankle), sign in ((_LEFT_LEG, 1.0), (_RIGHT_LEG, -1.0)):
        p[knee, 2] += sign * 0.12 * gait * swing
        p[ankle, 2] += sign * 0.24 * gait * swing
        p[ankle, 1] += 0.04 * gait * max(0.0, sign * np.cos(phase))
    for (elbow, wrist), sign in ((_LEFT_ARM, -1.0), (_RIGHT_ARM, 1.0)):
        p[elbow, 2] += sign * 0.06 * gait * swing
        p[wrist, 2] += sign * 0.14 * gait * swing
    if wave > 0:
        osc = 0.04 * np.sin(0.5 * t)
        raised_elbow = np.array([-0.22, 0.86, 0.03])
        raised_wrist = np.array([-0.24 + osc, 1.02, 0.05])
        p[8] = (1 - wave) * p[8] + wave * raised_elbow
        p[10] = (1 - wave) * p[10] + wave * raised_wrist
    c, s = np.cos(yaw), np.sin(yaw)
    x = p[:, 0] * c + p[:, 2] * s
    z = -p[:, 0] * s + p[:, 2] * c
    return np.stack([x, p[:, 1], z], 1)


def _smoothstep(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return x * x * (3 - 2 * x)


def _trajectory(cfg: ScenarioConfig, T: int, kind: str, onset: int | None, rng: np.random.Generator):
    """Per-frame yaw, gait amplitude, relative growth, lateral speed sign, wave and happy drive."""
    direction = rng.choice([-1.0, 1.0])
    walk_yaw = direction * np.deg2rad(rng.uniform(*cfg.passerby_yaw_deg))
    yaw = np.full(T, walk_yaw)
    gait = np.ones(T)
    growth = np.full(T, rng.uniform(-cfg.passerby_depth_drift, cfg.passerby_depth_drift))
    lateral = np.full(T, direction)
    wave = np.zeros(T)
    happy = np.zeros(T)
    t = np.arange(T)

    if kind == "intent":
        face_yaw = np.deg2rad(rng.uniform(-cfg.facing_yaw_deg, cfg.facing_yaw_deg))
        turn = rng.integers(cfg.turn_frames[0], cfg.turn_frames[1] + 1)
        ramp = _smoothstep((t - onset) / turn)
        yaw = (1 - ramp) * walk_yaw + ramp * face_yaw
        lateral = direction * (1 - ramp) * 1.0
        g = rng.uniform(*cfg.growth_range)
        growth = np.where(t >= onset, g, growth)
        happy = _smoothstep((t - onset) / 20.0) * cfg.happy_drift
        if rng.random() < cfg.wave_prob:
            start = onset + rng.integers(turn, turn + 20)
            wave = _smoothstep((t - start) / 5.0)
    elif kind == "distractor":
        start = int(rng.integers(T // 5, max(T // 5 + 1, T // 2)))
        dur = int(rng.integers(15, 35))
        mode = rng.choice(["veer", "look"])
        bump = _smoothstep((t - start) / 6.0) * (1 - _smoothstep((t - start - dur) / 6.0))
        if mode == "veer":
            diag = direction * np.deg2rad(rng.uniform(15.0, 45.0))
            yaw = (1 - bump) * walk_yaw + bump * diag
            growth = growth + bump * rng.uniform(*cfg.growth_range)
        else:
            yaw = (1 - bump) * walk_yaw + bump * np.deg2rad(rng.uniform(-cfg.facing_yaw_deg, cfg.facing_yaw_deg) * 1.5)
            gait = 1 - bump
            lateral = direction * (1 - bump)
        happy = bump * rng.uniform(0.0, 0.6) * cfg.happy_drift
    return yaw, gait, growth, lateral, wave, happy


def _sequence(cfg: ScenarioConfig, idx: int, kind: str, person: _Participant, env: int, rng: np.random.Generator) -> RawSequence:
    T = int(rng.integers(cfg.length_range[0], cfg.length_range[1] + 1))
    onset = None
    if kind == "intent":
        lo, hi = int(np.ceil(cfg.onset_range[0] * T)), int(np.floor(cfg.onset_range[1] * T))
        onset = int(rng.integers(lo, hi + 1))
    yaw, gait, growth, lateral, wave, happy = _trajectory(cfg, T, kind, onset, rng)
    img_w, img_h, (h_lo, h_hi) = _CAMERAS[env]
    scale = rng.uniform(h_lo, h_hi)
    start_scale = scale
    cx = img_w * (0.2 if lateral[0] > 0 else 0.8) + rng.normal(0, 0.05 * img_w)
    foot = img_h * rng.uniform(0.55, 0.7)
    phase = rng.uniform(0, 2 * np.pi)
    dphase = 2 * np.pi * person.gait_freq / 30.0

    logits_base = person.emotion_bias.copy()
    logits_base[_NEUTRAL] += 1.8
    logits_base[_HAPPY] += person.happy_bias
    ar = np.zeros(EMO_DIM)

    kp_px = np.zeros((T, N_KEYPOINTS * 3))
    bbox = np.zeros((T, 4))
    emotion = np.zeros((T, EMO_DIM))
    face = np.ones(T, dtype=bool)
    arrived = False
    missing = np.zeros(N_KEYPOINTS, dtype=bool)
    conf_noise = rng.uniform(0, 1, N_KEYPOINTS)
    # two-state occlusion chain with stationary missing rate conf_dropout
    stay = cfg.dropout_persistence
    enter = cfg.conf_dropout * (1 - stay) / max(1 - cfg.conf_dropout, 1e-9)
    for i in range(T):
        if i > 0:
            if not arrived:
                scale *= 1 + growth[i]
                foot += 0.35 * scale * growth[i]
            if kind == "intent" and scale >= cfg.arrival_scale * start_scale:
                arrived = True
            cx += lateral[i] * 0.022 * scale * gait[i]
            if kind == "intent" and i >= onset:
                cx += 0.03 * (img_w / 2 - cx)
        g = gait[i] * (0.0 if arrived else 1.0)
        if kind == "intent" and arrived:
            g = 0.0
        phase += dphase * max(g, 0.2)
        body = _pose_body(yaw[i], g, phase, wave[i], person, i)
        u = cx + scale * body[:, 0]
        v = foot - scale * body[:, 1]
        occluded = body[:, 2] < -0.03
        a = cfg.conf_smoothing
        conf_noise = a * conf_noise + (1 - a) * rng.uniform(0, 1, N_KEYPOINTS)
        conf = np.where(occluded, 0.35 + 0.3 * conf_noise, 0.8 + 0.19 * conf_noise)

        pad_x, pad_top, pad_bot = 0.05 * scale, 0.09 * scale, 0.02 * scale
        edges = np.array([u.min() - pad_x, v.min() - pad_top, u.max() + pad_x, v.max() + pad_bot])
        edges += rng.normal(0, cfg.bbox_noise * scale, 4) if cfg.bbox_noise > 0 else 0.0
        w = max(edges[2] - edges[0], 1.0)
        h = max(edges[3] - edges[1], 1.0)
        bbox[i] = (edges[0], edges[1], w, h)
        if cfg.jitter > 0:
            u = u + rng.normal(0, cfg.jitter * w, N_KEYPOINTS)
            v = v + rng.normal(0, cfg.jitter * h, N_KEYPOINTS)
        if cfg.conf_dropout > 0:
            u_draw = rng.random(N_KEYPOINTS)
            missing = np.where(missing, u_draw < stay, u_draw < enter)
            drop = missing
            conf = np.where(drop, 0.0, conf)
            u = np.where(drop, 0.0, u)
            v = np.where(drop, 0.0, v)
        kp_px[i, 0::3], kp_px[i, 1::3], kp_px[i, 2::3] = u, v, conf

        if abs(np.sin(yaw[i])) > np.sin(np.deg2rad(60)) and rng.random() < cfg.face_miss_prob:
            face[i] = False
            emotion[i] = NEUTRAL
        else:
            ar = (1 - cfg.emotion_ar) * ar + cfg.emotion_ar * rng.normal(0, 1.0, EMO_DIM)
            logits = logits_base + ar + rng.normal(0, cfg.emotion_noise, EMO_DIM)
            logits[_HAPPY] += happy[i]
            emotion[i] = _softmax(logits)

    labels = np.zeros(T, dtype=np.int8)
    if onset is not None:
        labels[onset:] = 1
    return RawSequence(
        sequence_id=f"s{cfg.seed:04d}_{idx:04d}",
        participant_id=person.pid,
        environment_id=env,
        kp_px=kp_px,
        bbox=bbox,
        emotion=emotion,
        face_detected=face,
        labels=labels,
        onset=onset,
    )


def generate_raw(config: ScenarioConfig) -> list[RawSequence]:
    rng = np.random.default_rng(config.seed)
    people = _participants(config.n_participants, rng)
    n_intent = int(round(config.intent_fraction * config.n_sequences))
    kinds = np.array(["intent"] * n_intent + ["pass"] * (config.n_sequences - n_intent), dtype=object)
    rng.shuffle(kinds)
    seq_rngs = rng.spawn(config.n_sequences)
    envs = rng.choice([1, 2, 3], size=config.n_sequences, p=np.asarray(config.env_weights) / sum(config.env_weights))
    out = []
    for i, (kind, r) in enumerate(zip(kinds, seq_rngs)):
        if kind == "pass" and r.random() < config.distractor_fraction:
            kind = "distractor"
        person = people[i % config.n_participants]
        out.append(_sequence(config, i, kind, person, int(envs[i]), r))
    return out


def generate(config: ScenarioConfig) -> list[SequenceRecord]:
    """Generate labelled sequences and run them through bounding-box normalisation."""
    return [raw.to_record() for raw in generate_raw(config)]


def difficulty_presets() -> dict[str, ScenarioConfig]:
    base = ScenarioConfig()
    return {
        "separable": replace(
            base,
            length_range=(60, 100),
            intent_fraction=0.5,
            growth_range=(0.02, 0.02),
            arrival_scale=100.0,
            passerby_depth_drift=0.0,
            distractor_fraction=0.0,
            happy_drift=3.0,
            emotion_noise=0.0,
            emotion_ar=0.0,
            face_miss_prob=0.0,
            jitter=0.0,
            conf_dropout=0.0,
            bbox_noise=0.0,
        ),
        "standard": base,
        "hard": replace(
            base,
            intent_fraction=0.7,
            growth_range=(0.0, 0.008),
            arrival_scale=1.6,
            passerby_yaw_deg=(35.0, 100.0),
            facing_yaw_deg=35.0,
            turn_frames=(8, 20),
            passerby_depth_drift=0.008,
            distractor_fraction=0.6,
            happy_drift=0.7,
            emotion_noise=0.7,
            jitter=0.04,
            conf_dropout=0.3,
            bbox_noise=0.03,
        ),
    }


def preset(name: str, **overrides) -> ScenarioConfig:
    presets = difficulty_presets()
    if name not in presets:
        raise KeyError(f"unknown preset {name!r}; choose from {sorted(presets)}")
    return replace(presets[name], **overrides)
