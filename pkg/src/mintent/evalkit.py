"""Metrics, decision rules, evaluation protocols and the realism score."""
from __future__ import annotations

import csv
import functools
import logging
import math
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np
import torch
from torch import nn

from .datamodel import DEFAULT_K, SequenceRecord
from .neuro import GRU, Adam, Linear, bce_with_logits

log = logging.getLogger(__name__)

SWEEP_GRID = np.round(np.arange(0, 101) / 100, 2)


class LeakageError(RuntimeError):
    """Raised when a train/test partition shares participants, scenes or synthetic data."""


class Score(float):
    """A metric value; ``undefined`` marks a zero-division branch reported as 0."""

    undefined: bool

    def __new__(cls, value: float, undefined: bool = False):
        obj = super().__new__(cls, value)
        obj.undefined = undefined
        return obj


def _ratio(num: float, den: float) -> Score:
    return Score(num / den) if den else Score(0.0, undefined=True)


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    fp: int
    fn: int
    tn: int

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    @classmethod
    def from_predictions(cls, pred, truth) -> "ConfusionCounts":
        p = np.asarray(pred).astype(bool).ravel()
        t = np.asarray(truth).astype(bool).ravel()
        if p.shape != t.shape:
            raise ValueError("predictions and labels differ in length")
        return cls(int(np.sum(p & t)), int(np.sum(p & ~t)), int(np.sum(~p & t)), int(np.sum(~p & ~t)))

    def flipped(self) -> "ConfusionCounts":
        """Counts with the negative class treated as positive."""
        return ConfusionCounts(self.tn, self.fn, self.fp, self.tp)


def accuracy(c: ConfusionCounts) -> Score:
    return _ratio(c.tp + c.tn, c.total)


def precision(c: ConfusionCounts) -> Score:
    return _ratio(c.tp, c.tp + c.fp)


def recall(c: ConfusionCounts) -> Score:
    return _ratio(c.tp, c.tp + c.fn)


def f1(c: ConfusionCounts) -> Score:
    return _ratio(2 * c.tp, 2 * c.tp + c.fp + c.fn)


def macro_f1(c: ConfusionCounts) -> Score:
    a, b = f1(c), f1(c.flipped())
    return Score((a + b) / 2, a.undefined or b.undefined)


def balanced_accuracy(c: ConfusionCounts) -> Score:
    a, b = recall(c), recall(c.flipped())
    return Score((a + b) / 2, a.undefined or b.undefined)


def counts_at(scores, labels, threshold: float) -> ConfusionCounts:
    return ConfusionCounts.from_predictions(np.asarray(scores) >= threshold, labels)


# decision rule ---------------------------------------------------------------


def longest_run(mask: np.ndarray) -> np.ndarray:
    """Length of the longest run of True along the last axis."""
    mask = np.asarray(mask, dtype=bool)
    run = np.zeros(mask.shape[:-1], dtype=np.int64)
    best = run.copy()
    for t in range(mask.shape[-1]):
        run = np.where(mask[..., t], run + 1, 0)
        best = np.maximum(best, run)
    return best


def sequence_decisions(frame_probs, threshold: float = 0.5, k: int = DEFAULT_K) -> np.ndarray:
    """k-run rule over (..., W) frame scores: 1 iff >= k consecutive scores reach ``threshold``."""
    p = np.asarray(frame_probs, dtype=np.float64)
    if k > p.shape[-1]:
        raise ValueError(f"k={k} exceeds window length {p.shape[-1]}")
    if k < 1:
        raise ValueError("k must be at least 1")
    return (longest_run(p >= threshold) >= k).astype(np.int8)


def sequence_decision(frame_probs, threshold: float = 0.5, k: int = DEFAULT_K) -> int:
    return int(sequence_decisions(np.asarray(frame_probs, dtype=np.float64).reshape(-1), threshold, k))


def run_scores(frame_probs, k: int = DEFAULT_K) -> np.ndarray:
    """Largest threshold at which the k-run rule still fires: max over k-frame runs of the run minimum.

    ``run_scores(P, k) >= tau`` equals ``sequence_decisions(P, tau, k)``, so
    sweeping a threshold over these scores sweeps the sequence-level rule.
    """
    p = np.asarray(frame_probs, dtype=np.float64)
    if not 1 <= k <= p.shape[-1]:
        raise ValueError(f"k={k} must lie in [1, {p.shape[-1]}]")
    runs = np.lib.stride_tricks.sliding_window_view(p, k, axis=-1)
    return runs.min(-1).max(-1)


# ranking ---------------------------------------------------------------------


def auroc(scores, labels) -> float:
    """Mann-Whitney AUROC: P(s+ > s-) + 0.5 P(s+ == s-)."""
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if s.shape != y.shape:
        raise ValueError("scores and labels differ in length")
    n_pos = int(y.sum())
    n_neg = y.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("AUROC is undefined when only one class is present")
    _, inverse, counts = np.unique(s, return_inverse=True, return_counts=True)
    # average 1-based rank of each tie group
    ends = np.cumsum(counts)
    avg_rank = ends - (counts - 1) / 2.0
    rank_sum = avg_rank[inverse][y].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


@dataclass(frozen=True)
class SweepPoint:
    threshold: float
    precision: Score
    recall: Score


def pr_sweep(scores, labels, grid: Iterable[float] | None = None) -> list[SweepPoint]:
    s = np.asarray(scores, dtype=np.float64).ravel()
    y = np.asarray(labels).astype(bool).ravel()
    if y.all() or not y.any():
        raise ValueError("precision/recall sweep needs both classes")
    grid = SWEEP_GRID if grid is None else np.asarray(list(grid), dtype=np.float64)
    order = np.sort(s)
    pos_sorted = np.sort(s[y])
    points = []
    for tau in grid:
        n_pred = s.size - np.searchsorted(order, tau, side="left")
        tp = y.sum() - np.searchsorted(pos_sorted, tau, side="left")
        points.append(SweepPoint(float(tau), _ratio(tp, n_pred), _ratio(tp, y.sum())))
    return points


# window-level evaluation -------------------------------------------------------


METRIC_NAMES = ("frame_macro_f1", "frame_balanced_acc", "frame_auroc", "seq_macro_f1", "seq_balanced_acc", "seq_auroc")


def window_metrics(frame_probs: np.ndarray, Y: np.ndarray, threshold: float = 0.5, k: int = DEFAULT_K) -> dict[str, float]:
    """Frame- and sequence-level metrics for (N, W) frame scores against (N, W) labels.

    Sequence verdicts use the k-run rule; the sequence AUROC ranks windows
    by the mean frame probability.
    """
    P = np.asarray(frame_probs, dtype=np.float64)
    Y = np.asarray(Y).astype(np.int8)
    fc = counts_at(P, Y, threshold)
    win_truth = (np.count_nonzero(Y, axis=1) >= k).astype(np.int8)
    sc = ConfusionCounts.from_predictions(sequence_decisions(P, threshold, k), win_truth)

    def safe_auroc(s, y):
        return auroc(s, y) if 0 < y.sum() < y.size else float("nan")

    return {
        "frame_macro_f1": float(macro_f1(fc)),
        "frame_balanced_acc": float(balanced_accuracy(fc)),
        "frame_auroc": safe_auroc(P.ravel(), Y.ravel()),
        "seq_macro_f1": float(macro_f1(sc)),
        "seq_balanced_acc": float(balanced_accuracy(sc)),
        "seq_auroc": safe_auroc(P.mean(1), win_truth),
    }


# trajectories ----------------------------------------------------------------


def onset_index(labels) -> int | None:
    """First frame of a 0 -> 1 transition, or None."""
    lab = np.asarray(labels)
    rises = np.flatnonzero((lab[1:] == 1) & (lab[:-1] == 0))
    return int(rises[0] + 1) if rises.size else None


@dataclass
class Trajectory:
    t_rel: np.ndarray
    median: np.ndarray
    q25: np.ndarray
    q75: np.ndarray
    n_sequences: int
    skipped: int

    def rows(self, variant: str = "") -> list[dict]:
        return [
            {"t_rel": int(t), "median": m, "q25": a, "q75": b, "variant": variant}
            for t, m, a, b in zip(self.t_rel, self.median, self.q25, self.q75)
        ]


def align_traces(traces: Sequence[np.ndarray], onsets: Sequence[int], horizon: int) -> np.ndarray:
    aligned = np.full((len(traces), 2 * horizon + 1), np.nan)
    for i, (trace, onset) in enumerate(zip(traces, onsets)):
        for j, t in enumerate(range(onset - horizon, onset + horizon + 1)):
            if 0 <= t < len(trace):
                aligned[i, j] = trace[t]
    return aligned


def onset_aligned_trajectories(
    model,
    records: Sequence[SequenceRecord],
    horizon: int = 30,
) -> Trajectory:
    """Median / quartile probability traces aligned to each sequence's intent onset.

    ``model`` is a trained classifier (traced as a streaming engine would
    report probabilities) or any callable mapping a record to a per-frame
    probability array.
    """
    if callable(model):
        trace_fn = model
    else:
        from .intentnet import stream_trace

        def trace_fn(r):
            return stream_trace(model, r)

    traces, onsets, skipped = [], [], 0
    for rec in records:
        onset = None if rec.labels is None else onset_index(rec.labels)
        if onset is None:
            skipped += 1
            continue
        traces.append(np.asarray(trace_fn(rec), dtype=np.float64))
        onsets.append(onset)
    if skipped:
        log.info("skipped %d sequences without an intent onset", skipped)
    t_rel = np.arange(-horizon, horizon + 1)
    if not traces:
        nan = np.full(t_rel.shape, np.nan)
        return Trajectory(t_rel, nan, nan.copy(), nan.copy(), 0, skipped)
    aligned = align_traces(traces, onsets, horizon)
    median, q25, q75 = (np.full(t_rel.shape, np.nan) for _ in range(3))
    for j in range(aligned.shape[1]):
        col = aligned[:, j][~np.isnan(aligned[:, j])]
        if col.size:
            median[j] = np.median(col)
            q25[j], q75[j] = np.percentile(col, [25, 75])
    return Trajectory(t_rel, median, q25, q75, len(traces), skipped)


# protocols -------------------------------------------------------------------


@dataclass
class ProtocolSplit:
    """Either participant -> fold assignments or a train/test environment partition."""

    kind: str
    assignment: dict = field(default_factory=dict)
    train_envs: tuple = ()
    test_envs: tuple = ()

    @property
    def n_folds(self) -> int:
        return len(set(self.assignment.values())) if self.kind != "cross_scene" else 1

    def folds(self, records: Sequence[SequenceRecord]):
        """Yield (fold_index, train_records, test_records); synthetic records are kept out of tests."""
        if self.kind == "cross_scene":
            train = [r for r in records if r.environment_id in self.train_envs]
            test = [r for r in records if r.environment_id in self.test_envs and not r.is_synthetic]
            check_leakage(train, test, self.kind)
            yield 0, train, test
            return
        for fold in sorted(set(self.assignment.values())):
            test = [r for r in records if not r.is_synthetic and self.assignment.get(r.participant_id) == fold]
            train = [r for r in records if r.is_synthetic or self.assignment.get(r.participant_id) != fold]
            check_leakage(train, test, self.kind)
            yield fold, train, test


def cross_subject_split(records: Sequence[SequenceRecord], n_folds: int = 5, seed: int = 0) -> ProtocolSplit:
    """Participant-grouped folds, greedily balancing positive-frame counts.

    Participants are visited from most to fewest positive frames (seeded
    tie-break) and each joins the fold with the fewest participants, then
    the fewest positive frames.
    """
    pos: dict[str, int] = defaultdict(int)
    for r in records:
        if r.is_synthetic:
            continue
        pos[r.participant_id] += 0 if r.labels is None else int(np.sum(r.labels))
    people = sorted(pos)
    if len(people) < n_folds:
        raise ValueError(f"{len(people)} participants cannot fill {n_folds} folds")
    rng = np.random.default_rng(seed)
    tiebreak = dict(zip(people, rng.permutation(len(people))))
    people.sort(key=lambda p: (-pos[p], tiebreak[p]))
    members = [0] * n_folds
    load = [0] * n_folds
    assignment = {}
    for p in people:
        fold = min(range(n_folds), key=lambda f: (members[f], load[f], f))
        assignment[p] = fold
        members[fold] += 1
        load[fold] += pos[p]
    return ProtocolSplit("cross_subject_5fold" if n_folds == 5 else "custom", assignment)


def cross_scene_split(train_envs=(1, 2), test_envs=(3,)) -> ProtocolSplit:
    overlap = set(train_envs) & set(test_envs)
    if overlap:
        raise LeakageError(f"environments {sorted(overlap, key=str)} appear in both train and test")
    return ProtocolSplit("cross_scene", train_envs=tuple(train_envs), test_envs=tuple(test_envs))


def check_leakage(train: Sequence[SequenceRecord], test: Sequence[SequenceRecord], kind: str) -> None:
    """Abort when the partition leaks synthetic data, participants or scenes into the test side."""
    problems = []
    synth = sorted(r.sequence_id for r in test if r.is_synthetic)
    if synth:
        problems.append(f"synthetic records in test split: {synth[:5]}")
    shared_ids = {r.sequence_id for r in train} & {r.sequence_id for r in test}
    if shared_ids:
        problems.append(f"sequences in both splits: {sorted(shared_ids)[:5]}")
    real_train = [r for r in train if not r.is_synthetic]
    if kind == "cross_scene":
        shared = {r.environment_id for r in real_train} & {r.environment_id for r in test}
        if shared:
            problems.append(f"environments in both splits: {sorted(shared, key=str)}")
    else:
        shared = {r.participant_id for r in real_train} & {r.participant_id for r in test}
        if shared:
            problems.append(f"participants in both splits: {sorted(shared)[:5]}")
    if problems:
        raise LeakageError("split leakage detected; " + "; ".join(problems))


@dataclass
class Variant:
    """One row of a results table: a classifier config, optionally with generative rebalancing."""

    name: str
    classifier: "object"  # intentnet.ClassifierConfig
    augment: bool = False
    target_ratio: float = 0.5


@dataclass
class ProtocolResult:
    fold_rows: list[dict]
    summary_rows: list[dict]


def summarize(values: Sequence[float]) -> tuple[float, float]:
    """Mean and sample standard deviation (ddof=1; 0 for a single value)."""
    v = np.asarray([x for x in values if not math.isnan(x)], dtype=np.float64)
    if v.size == 0:
        return float("nan"), float("nan")
    return float(v.mean()), float(v.std(ddof=1)) if v.size > 1 else 0.0


def run_protocol(
    records: Sequence[SequenceRecord],
    split: ProtocolSplit,
    variants: Sequence[Variant],
    seeds: Sequence[int] = (0,),
    rvae_config=None,
    threshold: float = 0.5,
    k: int = DEFAULT_K,
    progress: Callable[[dict], None] | None = None,
) -> ProtocolResult:
    """Train and score every variant on every fold and seed.

    Generative rebalancing, when a variant asks for it, is fitted per fold
    on that fold's training records only.
    """
    from . import mintrvae
    from .features import fit_standardization
    from .intentnet import train_classifier

    fold_rows = []
    for fold, train, test in split.folds(records):
        if not test:
            raise ValueError(f"fold {fold} has no test records")
        real_train = [r for r in train if not r.is_synthetic]
        stats = fit_standardization(real_train)
        generators = {}
        for seed in seeds:
            fold_seed = seed * 1000 + fold
            for variant in variants:
                rebalancer = None
                if variant.augment:
                    if fold_seed not in generators:
                        generators[fold_seed] = mintrvae.train(real_train, rvae_config, seed=fold_seed, stats=stats)
                    rebalancer = functools.partial(
                        mintrvae.rebalance,
                        trained=generators[fold_seed],
                        target_ratio=variant.target_ratio,
                        seed=fold_seed,
                        W=variant.classifier.window,
                        k=k,
                    )

                clf = train_classifier(real_train, None, variant.classifier, seed=fold_seed, rebalancer=rebalancer, stats=stats, k=k)
                X, Y, _ = clf.windows_for(test)
                metrics = window_metrics(clf.frame_probs(X), Y, threshold, k)
                row = {"variant": variant.name, "fold": fold, "seed": seed, **metrics}
                fold_rows.append(row)
                if progress:
                    progress(row)
    summary = []
    for variant in variants:
        rows = [r for r in fold_rows if r["variant"] == variant.name]
        out = {"variant": variant.name, "n": len(rows)}
        for m in METRIC_NAMES:
            out[f"{m}_mean"], out[f"{m}_sd"] = summarize([r[m] for r in rows])
        summary.append(out)
    return ProtocolResult(fold_rows, summary)


# realism ---------------------------------------------------------------------


@dataclass(frozen=True)
class DiscriminativeResult:
    accuracy: float
    D: float


class _Discriminator(nn.Module):
    def __init__(self, dim: int, hidden: int):
        super().__init__()
        self.rnn = GRU(dim, hidden)
        self.head = Linear(hidden, 1)

    def forward(self, x):
        _, h = self.rnn(x)
        return self.head(h).squeeze(-1)


def _group_split(
    groups: np.ndarray, rng: np.random.Generator, frac: float = 0.8, sides: dict | None = None
) -> tuple[np.ndarray, np.ndarray]:
    """Indices of an 80/20 split that keeps every group on one side.

    ``sides`` maps group id -> True (train) / False (test); groups already in
    it keep their side, new ones are split and recorded.
    """
    sides = {} if sides is None else sides
    fresh = [g for g in np.unique(groups).tolist() if g not in sides]
    order = rng.permutation(len(fresh))
    cut = int(round(frac * len(fresh)))
    for rank, i in enumerate(order):
        sides[fresh[i]] = rank < cut
    mask = np.array([sides[g] for g in groups.tolist()], dtype=bool)
    return np.flatnonzero(mask), np.flatnonzero(~mask)


def discriminative_score(
    real: np.ndarray,
    synthetic: np.ndarray,
    seed: int = 0,
    hidden: int = 32,
    epochs: int = 30,
    lr: float = 1e-3,
    batch_size: int = 64,
    real_groups: Sequence | None = None,
    synthetic_groups: Sequence | None = None,
) -> DiscriminativeResult:
    """Held-out accuracy of a GRU real-vs-synthetic classifier and D = |0.5 - accuracy|.

    Pools of (N, W, d) windows are subsampled to equal size when they differ
    by more than 10%; each pool is split 80/20 into train and test. When
    group ids are given (e.g. the source sequence of each window), the split
    keeps every group on one side, so overlapping windows of one sequence
    cannot be memorised across the split. Ids shared by both pools mark
    common provenance and land on the same side in both.
    """
    real = np.asarray(real, dtype=np.float32)
    synthetic = np.asarray(synthetic, dtype=np.float32)
    if len(real) < 20 or len(synthetic) < 20:
        raise ValueError("discriminative score needs at least 20 windows per pool")
    if real.shape[1:] != synthetic.shape[1:]:
        raise ValueError(f"window shapes differ: {real.shape[1:]} vs {synthetic.shape[1:]}")
    rng = np.random.default_rng(seed)
    # by default every window is its own group and the pools share none
    g_r = np.array([f"real{i}" for i in range(len(real))]) if real_groups is None else np.asarray(real_groups)
    g_s = np.array([f"synth{i}" for i in range(len(synthetic))]) if synthetic_groups is None else np.asarray(synthetic_groups)
    if len(g_r) != len(real) or len(g_s) != len(synthetic):
        raise ValueError("group ids must align with the windows")
    n_r, n_s = len(real), len(synthetic)
    if abs(n_r - n_s) > 0.1 * max(n_r, n_s):
        n = min(n_r, n_s)
        keep_r = np.sort(rng.choice(n_r, n, replace=False))
        keep_s = np.sort(rng.choice(n_s, n, replace=False))
        real, g_r = real[keep_r], g_r[keep_r]
        synthetic, g_s = synthetic[keep_s], g_s[keep_s]

    sides: dict = {}
    r_tr, r_te = _group_split(g_r, rng, sides=sides)
    s_tr, s_te = _group_split(g_s, rng, sides=sides)
    X_tr = torch.from_numpy(np.concatenate([real[r_tr], synthetic[s_tr]]))
    y_tr = torch.cat([torch.ones(len(r_tr)), torch.zeros(len(s_tr))])
    X_te = torch.from_numpy(np.concatenate([real[r_te], synthetic[s_te]]))
    y_te = np.concatenate([np.ones(len(r_te)), np.zeros(len(s_te))])
    if len(r_te) == 0 or len(s_te) == 0:
        raise ValueError("too few groups to hold out 20% of each pool")

    torch.manual_seed(seed)
    model = _Discriminator(real.shape[-1], hidden)
    opt = Adam(model, lr=lr, weight_decay=0.0)
    for _ in range(epochs):
        model.train()
        perm = rng.permutation(len(X_tr))
        for start in range(0, len(perm), batch_size):
            idx = perm[start : start + batch_size]
            loss = bce_with_logits(model(X_tr[idx]), y_tr[idx])
            opt.zero_grad()
            loss.backward()
            opt.step()
    model.eval()
    with torch.no_grad():
        pred = (model(X_te).numpy() >= 0).astype(np.float64)
    # class-balanced accuracy so uneven group sizes cannot bias the score
    acc = float((np.mean(pred[y_te == 1] == 1) + np.mean(pred[y_te == 0] == 0)) / 2)
    return DiscriminativeResult(acc, abs(0.5 - acc))


# deployment ------------------------------------------------------------------


@dataclass(frozen=True)
class DeploymentReport:
    counts: ConfusionCounts
    accuracy: Score
    precision: Score
    recall: Score
    f1: Score

    def row(self) -> dict:
        c = self.counts
        return {"tp": c.tp, "fp": c.fp, "fn": c.fn, "tn": c.tn, "accuracy": float(self.accuracy),
                "precision": float(self.precision), "recall": float(self.recall), "f1": float(self.f1)}


def score_deployment_trials(trials) -> DeploymentReport:
    """Score live trials given as ConfusionCounts or as (verdict, truth) pairs."""
    if isinstance(trials, ConfusionCounts):
        counts = trials
    else:
        pairs = list(trials)
        if not pairs:
            raise ValueError("trial log is empty")
        verdicts, truth = zip(*pairs)
        counts = ConfusionCounts.from_predictions(verdicts, truth)
    if counts.total == 0:
        raise ValueError("trial log is empty")
    return DeploymentReport(counts, accuracy(counts), precision(counts), recall(counts), f1(counts))


# output ----------------------------------------------------------------------


def write_csv(rows: Sequence[Mapping], path: str | Path, columns: Sequence[str] | None = None) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    columns = list(columns or (rows[0].keys() if rows else []))
    with path.open("w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        writer.writeheader()
        writer.writerows(rows)
    return path


def sweep_rows(points: Sequence[SweepPoint], variant: str = "") -> list[dict]:
    return [{"threshold": p.threshold, "precision": float(p.precision), "recall": float(p.recall), "variant": variant} for p in points]
