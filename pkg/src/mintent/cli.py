"""Command-line entry point: ``mintent <command> [options]``.

Exit codes: 0 success, 2 invalid input or configuration, 3 numerical abort.
"""
from __future__ import annotations

import argparse
import dataclasses
import functools
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import yaml

from . import evalkit, intentnet, mintrvae, synthgen
from .datamodel import load_checkpoint, load_dataset, positive_window_fraction, save_checkpoint, save_dataset
from .features import destandardize_records, standardize_records
from .neuro import NumericalError
from .stream import EngineConfig, StreamEngine, replay, run_adapter

log = logging.getLogger("mintent")

CONFIG_SECTIONS = ("scenario", "rvae", "classifier", "engine")
EXIT_OK, EXIT_INVALID, EXIT_NUMERICAL = 0, 2, 3


# configuration ---------------------------------------------------------------


def load_config(path: str | None) -> dict:
    """Read a YAML or JSON file of per-module sections."""
    if path is None:
        return {}
    text = Path(path).read_text(encoding="utf-8")
    data = json.loads(text) if path.endswith(".json") else yaml.safe_load(text)
    data = data or {}
    if not isinstance(data, dict):
        raise ValueError(f"config file {path} must hold a mapping of sections")
    unknown = set(data) - set(CONFIG_SECTIONS)
    if unknown:
        raise ValueError(f"unknown config sections {sorted(unknown)}; expected a subset of {list(CONFIG_SECTIONS)}")
    for name, section in data.items():
        if not isinstance(section, dict):
            raise ValueError(f"config section {name!r} must be a mapping")
    return data


def _tuples(d: dict) -> dict:
    return {k: tuple(v) if isinstance(v, list) else v for k, v in d.items()}


def _overrides(**kw) -> dict:
    return {k: v for k, v in kw.items() if v is not None}


def scenario_config(args, conf: dict) -> synthgen.ScenarioConfig:
    fields = {f.name for f in dataclasses.fields(synthgen.ScenarioConfig)}
    section = _tuples(conf.get("scenario", {}))
    unknown = set(section) - fields
    if unknown:
        raise ValueError(f"unknown scenario config keys: {sorted(unknown)}")
    return synthgen.preset(args.preset, **{**section, **_overrides(n_sequences=args.n_sequences, seed=args.seed)})


def rvae_config(conf: dict, **overrides) -> mintrvae.RVAEConfig:
    return mintrvae.RVAEConfig.from_dict({**conf.get("rvae", {}), **_overrides(**overrides)})


def classifier_config(conf: dict, **overrides) -> intentnet.ClassifierConfig:
    return intentnet.ClassifierConfig.from_dict({**conf.get("classifier", {}), **_overrides(**overrides)})


def engine_config(args, conf: dict) -> EngineConfig:
    section = conf.get("engine", {})
    known = {f.name for f in dataclasses.fields(EngineConfig)}
    if set(section) - known:
        raise ValueError(f"unknown engine config keys: {sorted(set(section) - known)}")
    return EngineConfig(**{**section, **_overrides(threshold=args.threshold, k=args.k, low_band=args.low_band, holdoff=args.holdoff)})


def _out_dir(args, default: str) -> Path:
    out = Path(args.out or default)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_rvae(path: str) -> mintrvae.TrainedRVAE:
    return mintrvae.from_checkpoint(load_checkpoint(path))


def _load_classifier(path: str) -> intentnet.TrainedClassifier:
    return intentnet.load_classifier(load_checkpoint(path))


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, default=lambda x: None if isinstance(x, float) and np.isnan(x) else str(x))


# commands --------------------------------------------------------------------


def cmd_synth(args, conf):
    cfg = scenario_config(args, conf)
    out = Path(args.out or "synth.jsonl")
    out.parent.mkdir(parents=True, exist_ok=True)
    if args.adapter:
        lines = [line for raw in synthgen.generate_raw(cfg) for line in raw.adapter_lines()]
        out.write_text("\n".join(lines) + "\n", encoding="utf-8")
        print(f"wrote {len(lines)} adapter frames to {out}")
        return
    records = synthgen.generate(cfg)
    save_dataset(records, out)
    print(f"wrote {len(records)} sequences ({positive_window_fraction(records):.1%} positive windows) to {out}")


def cmd_train_rvae(args, conf):
    cfg = rvae_config(conf, epochs=args.epochs, window_stride=args.stride)
    records = load_dataset(args.data)
    out = _out_dir(args, "rvae_run")

    def progress(row):
        if row["epoch"] % 10 == 0 or row["epoch"] == cfg.epochs - 1:
            log.info("epoch %d total %.4f (pose %.4f, emotion %.4f, intent %.4f, KL %.4f)", row["epoch"], row["total"], row["J_pose"], row["J_emotion"], row["J_intent"], row["J_KL"])

    trained = mintrvae.train(records, cfg, seed=args.seed, on_epoch=progress)
    from .plotting import plot_loss_log

    save_checkpoint(trained.checkpoint(), out / "rvae.ckpt")
    evalkit.write_csv(trained.loss_log, out / "rvae_loss.csv", mintrvae.LOG_COLUMNS)
    plot_loss_log(trained.loss_log, out / "rvae_loss.png", ["J_pose", "J_emotion", "J_intent", "J_KL", "total"])
    print(f"wrote {out / 'rvae.ckpt'} and {out / 'rvae_loss.csv'}")


def cmd_generate(args, conf):
    trained = _load_rvae(args.model)
    records = mintrvae.sample(trained, args.n, args.length, seed=args.seed)
    out = Path(args.out or "generated.jsonl")
    save_dataset(destandardize_records(records, trained.stats), out)
    print(f"wrote {len(records)} synthetic sequences to {out}")


def cmd_rebalance(args, conf):
    trained = _load_rvae(args.model)
    records = load_dataset(args.data)
    W = trained.config.window
    augmented = mintrvae.rebalance(standardize_records(records, trained.stats), trained, args.target_ratio, seed=args.seed, W=W, k=args.k)
    augmented = destandardize_records(augmented, trained.stats)
    out = Path(args.out or "rebalanced.jsonl")
    save_dataset(augmented, out)
    before = positive_window_fraction(records, W, args.k)
    after = positive_window_fraction(augmented, W, args.k)
    print(f"positive windows {before:.1%} -> {after:.1%}; added {len(augmented) - len(records)} synthetic windows; wrote {out}")


def cmd_train(args, conf):
    cfg = classifier_config(
        conf, backbone=args.backbone, feature_set=args.features, hidden=args.hidden, epochs=args.epochs,
        window_stride=args.stride, early_stopping=True if args.early_stopping else None,
    )
    records = load_dataset(args.data)
    val = load_dataset(args.val_data) if args.val_data else None
    rebalancer, stats = None, None
    if args.rvae:
        gen = _load_rvae(args.rvae)
        stats = gen.stats  # classifier and generator share one standardised space
        rebalancer = functools.partial(
            mintrvae.rebalance, trained=gen, target_ratio=args.target_ratio or 0.5, seed=args.seed, W=cfg.window, k=args.k
        )
    trained = intentnet.train_classifier(records, val, cfg, seed=args.seed, rebalancer=rebalancer, stats=stats, k=args.k)
    from .plotting import plot_loss_log

    out = _out_dir(args, "train_run")
    save_checkpoint(trained.checkpoint(), out / "model.ckpt")
    evalkit.write_csv(trained.history, out / "history.csv", intentnet.HISTORY_COLUMNS)
    plot_loss_log(trained.history, out / "history.png", ["train_loss", "val_frame_auroc", "val_seq_auroc"])
    best = "" if trained.best_epoch is None else f" (best validation epoch {trained.best_epoch})"
    print(f"wrote {out / 'model.ckpt'} and {out / 'history.csv'}{best}")


def cmd_evaluate(args, conf):
    records = load_dataset(args.data)
    if args.protocol == "cross_subject":
        split = evalkit.cross_subject_split(records, args.folds or 5, seed=args.seed)
    else:
        split = evalkit.cross_scene_split(tuple(args.train_envs or (1, 2)), tuple(args.test_envs or (3,)))
    variants = []
    for backbone in args.backbones:
        for features in args.features:
            cfg = classifier_config(conf, backbone=backbone, feature_set=features, epochs=args.epochs, window_stride=args.stride)
            variants.append(evalkit.Variant(f"{backbone}/{features}", cfg))
            if args.augment:
                variants.append(evalkit.Variant(f"{backbone}/{features}+VAE", cfg, True, args.target_ratio or 0.5))
    rcfg = rvae_config(conf, epochs=args.rvae_epochs, window_stride=args.rvae_stride) if args.augment else None
    seeds = list(range(args.seed, args.seed + args.n_seeds))

    def progress(row):
        log.info("%s fold %s seed %s: frame AUROC %.3f, seq macro-F1 %.3f", row["variant"], row["fold"], row["seed"], row["frame_auroc"], row["seq_macro_f1"])

    result = evalkit.run_protocol(records, split, variants, seeds, rcfg, args.threshold, args.k, progress)
    from .plotting import plot_summary

    out = _out_dir(args, "evaluate_run")
    evalkit.write_csv(result.fold_rows, out / "folds.csv")
    evalkit.write_csv(result.summary_rows, out / "summary.csv")
    plot_summary(result.summary_rows, out / "summary.png", evalkit.METRIC_NAMES)
    for row in result.summary_rows:
        print(
            f"{row['variant']:<28} "
            + "  ".join(f"{m} {row[m + '_mean']:.3f}±{row[m + '_sd']:.3f}" for m in ("frame_auroc", "seq_macro_f1", "seq_balanced_acc"))
        )
    print(f"wrote {out / 'summary.csv'} and {out / 'folds.csv'}")


def _variant_name(path: str, taken: set) -> str:
    p = Path(path)
    name = p.stem if p.stem not in taken else f"{p.parent.name}/{p.stem}"
    base, i = name, 2
    while name in taken:
        name, i = f"{base}#{i}", i + 1
    taken.add(name)
    return name


def cmd_sweep(args, conf):
    records = load_dataset(args.data)
    curves, rows, taken = {}, [], set()
    for path in args.model:
        trained = _load_classifier(path)
        X, Y, _ = trained.windows_for(records)
        if Y is None:
            raise ValueError("sweep needs a labelled dataset")
        P = trained.frame_probs(X)
        if args.level == "frame":
            scores, labels = P.ravel(), Y.ravel()
        else:
            scores, labels = evalkit.run_scores(P, args.k), (np.count_nonzero(Y, axis=1) >= args.k)
        name = _variant_name(path, taken)
        curves[name] = evalkit.pr_sweep(scores, labels)
        rows.extend(evalkit.sweep_rows(curves[name], name))
    from .plotting import plot_sweep

    out = _out_dir(args, "sweep_run")
    evalkit.write_csv(rows, out / "sweep.csv", ["threshold", "precision", "recall", "variant"])
    plot_sweep(curves, out / "sweep.png")
    print(f"wrote {out / 'sweep.csv'} and {out / 'sweep.png'}")


def cmd_trajectories(args, conf):
    records = load_dataset(args.data)
    curves, rows, taken = {}, [], set()
    for path in args.model:
        trained = _load_classifier(path)
        traj = evalkit.onset_aligned_trajectories(trained, records, args.horizon)
        name = _variant_name(path, taken)
        if traj.skipped:
            print(f"{name}: skipped {traj.skipped} sequences without an intent onset")
        curves[name] = traj
        rows.extend(traj.rows(name))
    from .plotting import plot_trajectories

    out = _out_dir(args, "trajectories_run")
    evalkit.write_csv(rows, out / "trajectories.csv", ["t_rel", "median", "q25", "q75", "variant"])
    plot_trajectories(curves, out / "trajectories.png", args.threshold)
    print(f"wrote {out / 'trajectories.csv'} and {out / 'trajectories.png'}")


def cmd_realism(args, conf):
    trained = _load_rvae(args.model)
    records = load_dataset(args.data)
    seeds = list(range(args.seed, args.seed + args.n_seeds))
    results = mintrvae.realism(trained, records, seeds, stride=args.stride, epochs=args.epochs)
    rows = [{"seed": s, "accuracy": r.accuracy, "D": r.D} for s, r in zip(seeds, results)]
    mean_d, sd_d = evalkit.summarize([r.D for r in results])
    rows.append({"seed": "mean", "accuracy": float(np.mean([r.accuracy for r in results])), "D": mean_d})
    out = _out_dir(args, "realism_run")
    evalkit.write_csv(rows, out / "realism.csv", ["seed", "accuracy", "D"])
    print(f"D = {mean_d:.3f} ± {sd_d:.3f} over {len(seeds)} seeds; wrote {out / 'realism.csv'}")


def cmd_replay(args, conf):
    engine = StreamEngine(_load_classifier(args.model), engine_config(args, conf), fast_path=args.fast_path)
    result = replay(engine, load_dataset(args.data))
    out = _out_dir(args, "replay_run")
    with (out / "trace.jsonl").open("w", encoding="utf-8") as fh:
        for row in result.trace:
            fh.write(json.dumps(row) + "\n")
    stats = result.stats.to_dict()
    (out / "stats.json").write_text(_dump(stats) + "\n", encoding="utf-8")
    if args.stats:
        print(_dump(stats))
    else:
        print(f"replayed {stats['frames']} frames; wrote {out / 'trace.jsonl'} and {out / 'stats.json'}")


def cmd_stream(args, conf):
    engine = StreamEngine(_load_classifier(args.model), engine_config(args, conf), fast_path=args.fast_path)
    src = sys.stdin if args.input in (None, "-") else open(args.input, encoding="utf-8")
    dst = sys.stdout if args.out in (None, "-") else open(args.out, "w", encoding="utf-8")
    try:
        stats = run_adapter(engine, src, dst)
    finally:
        if src is not sys.stdin:
            src.close()
        if dst is not sys.stdout:
            dst.close()
    if args.stats:
        print(_dump(stats.to_dict()), file=sys.stderr)


# conflicting flag checks ---------------------------------------------------------


def _engine_conflicts(args) -> list[str]:
    problems = []
    if args.threshold is not None and args.low_band is not None and args.low_band > args.threshold:
        problems.append(f"--low-band {args.low_band} exceeds --threshold {args.threshold}")
    if args.k is not None and args.k < 1:
        problems.append("--k must be at least 1")
    return problems


def conflicts(args) -> list[str]:
    problems = []
    cmd = args.command
    if cmd == "train":
        if args.target_ratio is not None and not args.rvae:
            problems.append("--target-ratio needs --rvae")
        if args.early_stopping and not args.val_data:
            problems.append("--early-stopping needs --val-data")
    if cmd in ("train", "rebalance", "evaluate") and args.target_ratio is not None and not 0 < args.target_ratio < 1:
        problems.append("--target-ratio must lie in (0, 1)")
    if cmd == "evaluate":
        if args.protocol == "cross_scene" and args.folds is not None:
            problems.append("--folds only applies to --protocol cross_subject")
        if args.protocol == "cross_subject" and (args.train_envs or args.test_envs):
            problems.append("--train-envs/--test-envs only apply to --protocol cross_scene")
        if args.target_ratio is not None and not args.augment:
            problems.append("--target-ratio needs --augment")
        if (args.rvae_epochs is not None or args.rvae_stride is not None) and not args.augment:
            problems.append("--rvae-epochs/--rvae-stride need --augment")
        if args.train_envs and args.test_envs and set(args.train_envs) & set(args.test_envs):
            problems.append("--train-envs and --test-envs overlap")
    if cmd in ("replay", "stream"):
        problems += _engine_conflicts(args)
    if cmd == "stream" and args.input not in (None, "-") and args.out not in (None, "-") and Path(args.input) == Path(args.out):
        problems.append("--input and --out name the same file")
    if cmd == "synth" and args.n_sequences is not None and args.n_sequences < 1:
        problems.append("--n-sequences must be positive")
    if cmd == "generate" and args.n < 0:
        problems.append("--n must be non-negative")
    return problems


# parser ----------------------------------------------------------------------


def _env(value: str):
    return int(value) if value.isdigit() else value


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=0, help="random seed (default 0)")
    common.add_argument("--config", help="YAML or JSON file with scenario/rvae/classifier/engine sections")
    common.add_argument("--out", help="output file or directory (command specific)")
    common.add_argument("-q", "--quiet", action="store_true", help="only print results")

    parser = argparse.ArgumentParser(prog="mintent", description="Pose+emotion intent detection toolkit")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")

    def add(name, func, help):
        p = sub.add_parser(name, parents=[common], help=help, description=help)
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "generate a synthetic labelled dataset")
    p.add_argument("--preset", choices=sorted(synthgen.difficulty_presets()), default="standard")
    p.add_argument("--n-sequences", type=int)
    p.add_argument("--adapter", action="store_true", help="write raw pixel-space adapter JSONL instead of a dataset")

    p = add("train-rvae", cmd_train_rvae, "train the recurrent VAE generator")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--stride", type=int, help="training window stride")

    p = add("generate", cmd_generate, "sample synthetic sequences from a trained generator")
    p.add_argument("--model", required=True)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--length", type=int)

    p = add("rebalance", cmd_rebalance, "append synthetic positive windows to a dataset")
    p.add_argument("--data", required=True)
    p.add_argument("--model", required=True)
    p.add_argument("--target-ratio", type=float, default=0.5)
    p.add_argument("--k", type=int, default=7)

    p = add("train", cmd_train, "train an intent classifier")
    p.add_argument("--data", required=True)
    p.add_argument("--val-data")
    p.add_argument("--backbone", choices=intentnet.BACKBONES)
    p.add_argument("--features", choices=sorted(intentnet.FEATURE_SETS))
    p.add_argument("--hidden", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--stride", type=int, help="training window stride")
    p.add_argument("--early-stopping", action="store_true")
    p.add_argument("--rvae", help="generator checkpoint used to rebalance the training set")
    p.add_argument("--target-ratio", type=float)
    p.add_argument("--k", type=int, default=7)

    p = add("evaluate", cmd_evaluate, "run a cross-subject or cross-scene protocol")
    p.add_argument("--data", required=True)
    p.add_argument("--protocol", choices=("cross_subject", "cross_scene"), default="cross_subject")
    p.add_argument("--folds", type=int)
    p.add_argument("--train-envs", type=_env, nargs="+")
    p.add_argument("--test-envs", type=_env, nargs="+")
    p.add_argument("--backbones", nargs="+", choices=intentnet.BACKBONES, default=["transformer"])
    p.add_argument("--features", nargs="+", choices=sorted(intentnet.FEATURE_SETS), default=["fused"])
    p.add_argument("--augment", action="store_true", help="add generator-rebalanced variants")
    p.add_argument("--target-ratio", type=float)
    p.add_argument("--n-seeds", type=int, default=1)
    p.add_argument("--epochs", type=int)
    p.add_argument("--stride", type=int, help="classifier training window stride")
    p.add_argument("--rvae-epochs", type=int)
    p.add_argument("--rvae-stride", type=int)
    p.add_argument("--threshold", type=float, default=0.5)
    p.add_argument("--k", type=int, default=7)

    p = add("sweep", cmd_sweep, "precision/recall against the decision threshold")
    p.add_argument("--model", required=True, action="append", help="classifier checkpoint (repeatable)")
    p.add_argument("--data", required=True)
    p.add_argument("--level", choices=("frame", "sequence"), default="sequence")
    p.add_argument("--k", type=int, default=7)

    p = add("trajectories", cmd_trajectories, "onset-aligned probability trajectories")
    p.add_argument("--model", required=True, action="append", help="classifier checkpoint (repeatable)")
    p.add_argument("--data", required=True)
    p.add_argument("--horizon", type=int, default=30)
    p.add_argument("--threshold", type=float, default=0.5)

    p = add("realism", cmd_realism, "discriminative score of generator samples")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--n-seeds", type=int, default=3)
    p.add_argument("--stride", type=int, default=4, help="stride of the real windows")
    p.add_argument("--epochs", type=int, default=30, help="discriminator epochs")

    for name, func, help in (
        ("replay", cmd_replay, "stream a dataset through the engine and report latency"),
        ("stream", cmd_stream, "run the engine on adapter JSONL from stdin or --input"),
    ):
        p = add(name, func, help)
        p.add_argument("--model", required=True)
        p.add_argument("--threshold", type=float)
        p.add_argument("--k", type=int)
        p.add_argument("--low-band", type=float)
        p.add_argument("--holdoff", type=int)
        p.add_argument("--fast-path", action="store_true", help="recurrent carry (GRU/LSTM only)")
        p.add_argument("--stats", action="store_true", help="print latency statistics as JSON")
        if name == "replay":
            p.add_argument("--data", required=True)
        else:
            p.add_argument("--input", help="adapter JSONL file (default stdin)")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    problems = conflicts(args)
    if problems:
        for msg in problems:
            print(f"mintent {args.command}: error: {msg}", file=sys.stderr)
        return EXIT_INVALID
    try:
        args.func(args, load_config(args.config))
    except BrokenPipeError:
        # downstream reader closed early (e.g. piped into head)
        sys.stdout = open(os.devnull, "w")
        return EXIT_OK
    except NumericalError as exc:
        print(f"mintent {args.command}: numerical abort: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValueError, KeyError, OSError, yaml.YAMLError, evalkit.LeakageError, mintrvae.RebalanceError) as exc:
        print(f"mintent {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
