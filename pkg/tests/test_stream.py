import io
import json

import numpy as np
import pytest
from torch import nn

from conftest import make_record
from mintent import synthgen
from mintent.datamodel import FEATURE_DIM, POSE_DIM, SequenceRecord
from mintent.features import StandardizationStats
from mintent.intentnet import ClassifierConfig, TrainedClassifier, train_classifier
from mintent.stream import EngagementState, EngineConfig, StreamEngine, batch_window_probs, replay, run_adapter


class Probe(nn.Module):
    """Frame logit read straight off pose channel 0, so tests can script the probability trace."""

    def forward(self, x):
        return 40.0 * (x[..., 0] - 0.5)


def probe_classifier():
    cfg = ClassifierConfig(backbone="gru", hidden=8)
    return TrainedClassifier(Probe(), cfg, StandardizationStats.identity(), [])


def scripted(levels):
    """Record whose frame i drives the probe to ~levels[i] (1 -> high, 0 -> low)."""
    T = len(levels)
    pose = np.full((T, POSE_DIM), 0.5)
    pose[:, 0] = np.asarray(levels, dtype=float)
    emo = np.full((T, 7), 1 / 7)
    return SequenceRecord("scripted", "p", 1, pose, emo)


def reference_states(probs, cfg: EngineConfig):
    """Independent state machine: engaged while the last k-run firing is within the hold-off."""
    states, run, fired_at = [], 0, None
    for n, p in enumerate(probs, start=1):
        run = run + 1 if p >= cfg.threshold else 0
        if run >= cfg.k:
            fired_at = n
        if fired_at is not None and n - fired_at < cfg.holdoff:
            states.append("engaged")
        elif p < cfg.low_band:
            states.append("no_intent")
        else:
            states.append("transitional")
    return states


def test_warm_up():
    engine = StreamEngine(probe_classifier())
    for frame in scripted([1] * 14).frames:
        prob, status = engine.push_frame(frame)
        assert prob is None and status.state is EngagementState.NO_INTENT
    prob, _ = engine.push_frame(scripted([1]).frames[0])
    assert prob is not None


def test_engages_on_seventh_full_window():
    engine = StreamEngine(probe_classifier())
    states = [engine.push_frame(f)[1].state for f in scripted([1] * 30).frames]
    first = states.index(EngagementState.ENGAGED)
    assert first == 14 + 6  # 7th full-window frame
    assert all(s is not EngagementState.ENGAGED for s in states[:first])


def test_disengages_after_holdoff():
    cfg = EngineConfig()
    engine = StreamEngine(probe_classifier(), cfg)
    levels = [1] * 30 + [0] * 40
    out = [engine.push_frame(f) for f in scripted(levels).frames]
    states = [s.state.value for _, s in out]
    assert states[-1] == "no_intent"
    probs = [p for p, _ in out if p is not None]
    assert states[14:] == reference_states(probs, cfg)


def test_states_match_reference_on_random_traces():
    rng = np.random.default_rng(0)
    for trial in range(20):
        cfg = EngineConfig(threshold=0.5, k=int(rng.integers(1, 15)), low_band=0.3, holdoff=int(rng.integers(1, 20)))
        levels = np.clip(rng.normal(0.5, 0.08, 120).cumsum() % 1.0, 0, 1)
        engine = StreamEngine(probe_classifier(), cfg)
        out = [engine.push_frame(f) for f in scripted(levels).frames]
        probs = [p for p, _ in out if p is not None]
        assert [s.state.value for _, s in out[14:]] == reference_states(probs, cfg)


def test_engine_config_validation():
    with pytest.raises(ValueError):
        EngineConfig(low_band=0.6, threshold=0.5)
    with pytest.raises(ValueError):
        StreamEngine(probe_classifier(), EngineConfig(k=16))


def test_feature_dimension_mismatch():
    engine = StreamEngine(probe_classifier())
    with pytest.raises(ValueError, match="features"):
        engine.push_frame(np.zeros(FEATURE_DIM + 1))


@pytest.fixture(scope="module")
def trained_models(small_standard):
    out = {}
    for backbone in ("gru", "lstm", "transformer"):
        cfg = ClassifierConfig(backbone=backbone, hidden=16, epochs=1, window_stride=4)
        out[backbone] = train_classifier(small_standard[:12], None, cfg, seed=0)
    return out


@pytest.mark.parametrize("backbone", ["gru", "lstm", "transformer"])
def test_replay_equals_batch(trained_models, small_standard, backbone):
    trained = trained_models[backbone]
    recs = small_standard[12:16]
    result = replay(StreamEngine(trained), recs)
    assert len(result.trace) == sum(len(r) for r in recs) == result.stats.frames
    for rec in recs:
        probs = np.array([row["prob"] for row in result.trace if row["seq_id"] == rec.sequence_id][14:], dtype=float)
        assert np.array_equal(probs, batch_window_probs(trained, rec))
        np.testing.assert_allclose(probs, batch_window_probs(trained, rec, vectorised=True), atol=1e-6)


@pytest.mark.parametrize("backbone", ["gru", "lstm"])
def test_fast_path_matches_full_recompute(trained_models, small_standard, backbone):
    trained = trained_models[backbone]
    rec = small_standard[20]
    slow = replay(StreamEngine(trained), [rec]).trace
    fast = replay(StreamEngine(trained, fast_path=True), [rec]).trace
    for a, b in zip(slow, fast):
        assert (a["prob"] is None) == (b["prob"] is None)
        if a["prob"] is not None:
            assert abs(a["prob"] - b["prob"]) <= 1e-6


def test_fast_path_rejects_transformer(trained_models):
    with pytest.raises(ValueError):
        StreamEngine(trained_models["transformer"], fast_path=True)


def test_empty_replay():
    result = replay(StreamEngine(probe_classifier()), [])
    assert result.trace == [] and result.stats.frames == 0
    assert np.isnan(result.stats.to_dict()["latency_p95_ms"])


def test_latency_stats_nonnegative():
    engine = StreamEngine(probe_classifier())
    replay(engine, [make_record(T=30)])
    d = engine.stats.to_dict()
    assert d["frames"] == 30 and min(engine.stats.latencies_ms) >= 0
    assert d["latency_p50_ms"] <= d["latency_p95_ms"] <= d["latency_max_ms"]


def test_fake_clock_latency():
    ticks = iter(np.arange(0, 100, 0.002))
    engine = StreamEngine(probe_classifier(), clock=lambda: next(ticks))
    engine.push_frame(np.zeros(FEATURE_DIM))
    assert engine.stats.latencies_ms[0] == pytest.approx(2.0)


def test_adapter_stream_matches_replay(trained_models):
    raw = synthgen.generate_raw(synthgen.preset("standard", n_sequences=1, seed=8))[0]
    trained = trained_models["gru"]
    out = io.StringIO()
    stats = run_adapter(StreamEngine(trained), raw.adapter_lines(), out)
    rows = [json.loads(line) for line in out.getvalue().splitlines()]
    assert len(rows) == len(raw) == stats.frames
    expect = batch_window_probs(trained, raw.to_record())
    got = np.array([r["prob"] for r in rows[14:]], dtype=float)
    np.testing.assert_allclose(got, expect, atol=1e-6)
    assert set(rows[0]) == {"frame_idx", "prob", "state", "latency_ms", "seq_id"}


def test_adapter_drops_out_of_order_frames():
    raw = synthgen.generate_raw(synthgen.preset("standard", n_sequences=1, seed=8))[0]
    lines = raw.adapter_lines()[:20]
    lines.insert(10, lines[5])
    out = io.StringIO()
    stats = run_adapter(StreamEngine(probe_classifier()), lines, out)
    assert stats.dropped == 1 and stats.frames == 20
