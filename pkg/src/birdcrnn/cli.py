"""Command-line pipeline: synth, features, train, gridsearch, predict, evaluate, ensemble.

Every subcommand is deterministic given its flags and --seed, writes its
outputs atomically, and drops a run_manifest.json (resolved configuration,
input hashes, seed, tool version) beside them.

Exit codes: 0 success, 1 usage/configuration error, 2 data or format error,
3 numeric failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import sys
from pathlib import Path

from . import __version__, dataset, evaluate, features, net, train
from .errors import ConfigError, DataError, NumericError, PipelineError
from .fileio import atomic_write_text, sha256_file


def _hash_inputs(paths: dict[str, Path | list[Path] | None]) -> dict[str, str]:
    out: dict[str, str] = {}
    for name, value in paths.items():
        if value is None:
            continue
        if isinstance(value, list):
            digest = hashlib.sha256()
            for p in sorted(Path(v) for v in value):
                digest.update(p.name.encode())
                digest.update(bytes.fromhex(sha256_file(p)))
            out[name] = digest.hexdigest()
        else:
            out[name] = sha256_file(value)
    return out


def write_run_manifest(out_dir: Path, command: str, config: dict, inputs: dict[str, str], seed: int) -> None:
    doc = {
        "command": command,
        "config": config,
        "inputs": inputs,
        "seed": seed,
        "version": __version__,
    }
    atomic_write_text(out_dir / "run_manifest.json", json.dumps(doc, indent=1, sort_keys=True) + "\n")


def _load_config_file(path: str | None) -> dict:
    if path is None:
        return {}
    doc = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: config file must hold a JSON object")
    return doc


def _merge_config(cls, file_section: dict, overrides: dict):
    merged = dict(file_section)
    merged.update({k: v for k, v in overrides.items() if v is not None})
    try:
        return cls(**merged)
    except TypeError as exc:
        raise ConfigError(f"bad {cls.__name__} settings: {exc}") from exc


def _parse_int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(tok) for tok in text.replace(" ", "").split(",") if tok)
    except ValueError as exc:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from exc


def _parse_poolings(text: str) -> tuple[tuple[int, ...], ...]:
    return tuple(_parse_int_list(group) for group in text.split("|") if group.strip())


# --- data plumbing shared by train/gridsearch/predict/evaluate -----------------


def _load_feature_sets(
    features_dir: Path,
    manifest: dataset.Manifest,
    stats: features.NormStats | None,
) -> dict[str, features.FeatureMatrix]:
    out = {}
    for entry in manifest.entries:
        path = features_dir / f"{entry.clip_id}.badf"
        if not path.exists():
            raise DataError(f"missing feature file for {entry.clip_id!r}: {path}")
        fm = features.load_features(path)
        if stats is not None:
            fm = features.normalize(fm, stats)
        out[entry.clip_id] = fm
    return out


def _resolve_norm_stats(args) -> features.NormStats | None:
    if args.norm_stats is not None:
        return features.load_norm_stats(args.norm_stats)
    default = Path(args.features_dir) / "norm_stats.json"
    if default.exists():
        return features.load_norm_stats(default)
    return None


def _train_val_ids(args, manifest: dataset.Manifest, seed: int) -> tuple[set[str], set[str]]:
    if args.split_file is not None:
        splits, _, _ = dataset.load_splits(args.split_file)
        if not (0 <= args.split_index < len(splits)):
            raise ConfigError(f"--split-index {args.split_index} out of range for {len(splits)} splits")
        chosen = splits[args.split_index]
        return set(chosen.train), set(chosen.validation)
    fraction = args.val_fraction
    (split,) = dataset.make_splits(manifest, (1.0 - fraction, fraction, 0.0), n_splits=1, seed=seed)
    return set(split.train), set(split.validation)


def _labeled_sets(args, seed: int):
    manifest = dataset.load_manifest(args.manifest)
    stats = _resolve_norm_stats(args)
    feature_map = _load_feature_sets(Path(args.features_dir), manifest, stats)
    labels = manifest.labels()
    train_ids, val_ids = _train_val_ids(args, manifest, seed)
    train_set = [(feature_map[i], labels[i]) for i in sorted(train_ids)]
    val_set = [(feature_map[i], labels[i]) for i in sorted(val_ids)]
    return train_set, val_set


# --- subcommands -----------------------------------------------------------------


def cmd_synth(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    file_cfg = _load_config_file(args.config).get("synth", {})
    base = _merge_config(
        dataset.SynthSpec,
        {"positive": False, **file_cfg},
        {
            "duration_s": args.duration,
            "sample_rate": args.sample_rate,
            "noise_level": args.noise_level,
            "chirp_band": (args.chirp_low, args.chirp_high) if args.chirp_low is not None else None,
            "n_chirps": (args.chirps_min, args.chirps_max) if args.chirps_min is not None else None,
            "distractor": True if args.distractor else None,
        },
    )
    n_pos = int(round(args.n_clips * args.positive_fraction))
    entries = []
    for i in range(args.n_clips):
        positive = i < n_pos
        spec = dataclasses.replace(base, positive=positive)
        clip_id = f"clip_{i:04d}"
        clip, label = dataset.synth_clip(spec, seed=train.derive_seed(args.seed, i), clip_id=clip_id)
        dataset.encode_wav(clip, out_dir / f"{clip_id}.wav")
        entries.append(dataset.ManifestEntry(clip_id, label, out_dir / f"{clip_id}.wav"))
    manifest = dataset.Manifest(entries=entries)
    dataset.save_manifest(manifest, out_dir / "manifest.csv")
    write_run_manifest(
        out_dir, "synth",
        {**dataclasses.asdict(base), "n_clips": args.n_clips, "positive_fraction": args.positive_fraction},
        {}, args.seed,
    )
    return 0


def cmd_features(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    file_cfg = _load_config_file(args.config).get("features", {})
    config = _merge_config(
        features.FeatureConfig,
        file_cfg,
        {
            "frame_ms": args.frame_ms,
            "overlap_fraction": args.overlap,
            "n_mels": args.n_mels,
            "fft_size": args.fft_size,
            "fmin": args.fmin,
            "fmax": args.fmax,
            "log_epsilon": args.log_epsilon,
        },
    )
    manifest = dataset.load_manifest(args.manifest)
    banks: dict[int, features.FilterBank] = {}
    extracted: dict[str, features.FeatureMatrix] = {}
    for entry in manifest.entries:
        if not Path(entry.path).exists():
            raise DataError(f"missing WAV for {entry.clip_id!r}: {entry.path}")
        clip = dataset.decode_wav(entry.path, clip_id=entry.clip_id)
        if clip.sample_rate not in banks:
            banks[clip.sample_rate] = features.mel_filterbank(config, clip.sample_rate)
        fm = features.extract(clip, config, banks[clip.sample_rate])
        features.save_features(fm, out_dir / f"{entry.clip_id}.badf")
        extracted[entry.clip_id] = fm

    if args.split_file is not None:
        splits, _, _ = dataset.load_splits(args.split_file)
        if not (0 <= args.split_index < len(splits)):
            raise ConfigError(f"--split-index {args.split_index} out of range for {len(splits)} splits")
        fit_ids = sorted(splits[args.split_index].train)
    else:
        fit_ids = sorted(extracted)
    stats = features.fit_norm_stats([extracted[i] for i in fit_ids if i in extracted])
    features.save_norm_stats(stats, out_dir / "norm_stats.json")

    write_run_manifest(
        out_dir, "features", dataclasses.asdict(config),
        _hash_inputs({"manifest": Path(args.manifest),
                      "split_file": Path(args.split_file) if args.split_file else None}),
        args.seed,
    )
    return 0


def _model_config_from_args(args, seed: int) -> net.ModelConfig:
    file_cfg = _load_config_file(args.config).get("model", {})
    return _merge_config(
        net.ModelConfig,
        {"seed": seed, **file_cfg},
        {
            "n_feature_maps": args.n_feature_maps,
            "conv_pooling": _parse_int_list(args.conv_pooling) if args.conv_pooling else None,
            "kernel": _parse_int_list(args.kernel) if args.kernel else None,
            "n_recurrent_layers": args.recurrent_layers,
            "recurrent_type": args.recurrent_type,
            "dropout_rate": args.dropout,
            "n_mels": args.n_mels,
        },
    )


def _train_config_from_args(args, seed: int) -> train.TrainConfig:
    file_cfg = _load_config_file(args.config).get("train", {})
    return _merge_config(
        train.TrainConfig,
        {"seed": seed, **file_cfg},
        {
            "learning_rate": args.lr,
            "batch_size": args.batch_size,
            "max_epochs": args.max_epochs,
            "patience": args.patience,
        },
    )


def cmd_train(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    model_config = _model_config_from_args(args, args.seed)
    train_config = _train_config_from_args(args, args.seed)
    train_set, val_set = _labeled_sets(args, args.seed)

    log_rows = ["epoch,train_loss,val_auc,seconds"]
    run = train.train(
        train_config, model_config, train_set, val_set,
        log_fn=lambda s: log_rows.append(f"{s.epoch},{s.train_loss:.9g},{s.val_auc:.9g},{s.seconds:.3f}"),
    )
    net.save_model(run.best_model, out_dir / "model.badc")
    atomic_write_text(out_dir / "training_log.csv", "\n".join(log_rows) + "\n")
    atomic_write_text(
        out_dir / "train_run.json",
        json.dumps(
            {
                "best_epoch": run.best_epoch,
                "best_val_auc": run.best_val_auc,
                "stopped_reason": run.stopped_reason,
                "epochs_run": len(run.history),
                "model_config": json.loads(model_config.to_json()),
                "n_params": run.best_model.n_params,
            },
            indent=1, sort_keys=True,
        ) + "\n",
    )
    write_run_manifest(
        out_dir, "train",
        {"model": json.loads(model_config.to_json()), "train": dataclasses.asdict(train_config)},
        _hash_inputs({"manifest": Path(args.manifest),
                      "split_file": Path(args.split_file) if args.split_file else None}),
        args.seed,
    )
    return 0


def cmd_gridsearch(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    file_cfg = _load_config_file(args.config).get("grid", {})
    space = _merge_config(
        train.GridSpace,
        file_cfg,
        {
            "feature_map_choices": _parse_int_list(args.feature_maps) if args.feature_maps else None,
            "recurrent_layer_choices": (
                _parse_int_list(args.recurrent_layer_counts) if args.recurrent_layer_counts else None
            ),
            "pooling_arrangements": _parse_poolings(args.poolings) if args.poolings else None,
            "recurrent_type": args.recurrent_type,
            "n_mels": args.n_mels,
            "dropout_rate": args.dropout,
        },
    )
    train_config = _train_config_from_args(args, args.seed)
    train_set, val_set = _labeled_sets(args, args.seed)
    report = train.run_grid(space, train_config, train_set, val_set, jobs=args.jobs)

    rows = ["config_json,val_auc,best_epoch,n_params"]
    for r in report:
        config_json = r.config.to_json().replace('"', '""')
        rows.append(f'"{config_json}",{r.val_auc:.9g},{r.best_epoch},{r.n_params}')
    atomic_write_text(out_dir / "grid_report.csv", "\n".join(rows) + "\n")
    write_run_manifest(
        out_dir, "gridsearch",
        {"space": dataclasses.asdict(space), "train": dataclasses.asdict(train_config)},
        _hash_inputs({"manifest": Path(args.manifest),
                      "split_file": Path(args.split_file) if args.split_file else None}),
        args.seed,
    )
    return 0


def _collect_feature_paths(args) -> list[Path]:
    features_dir = Path(args.features_dir)
    if args.manifest is not None:
        manifest = dataset.load_manifest(args.manifest)
        return [features_dir / f"{e.clip_id}.badf" for e in manifest.entries]
    paths = sorted(features_dir.glob("*.badf"))
    if not paths:
        raise DataError(f"no .badf feature files in {features_dir}")
    return paths


def cmd_predict(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = _resolve_norm_stats(args)
    feature_paths = _collect_feature_paths(args)
    feature_list = [features.load_features(p) for p in feature_paths]
    prediction_sets = []
    for model_path in args.model:
        model, _ = net.load_model(model_path)
        prediction_sets.append(evaluate.predict_features(model, feature_list, stats))
    merged = (
        evaluate.ensemble_average(prediction_sets) if len(prediction_sets) > 1 else prediction_sets[0]
    )
    evaluate.save_predictions(merged, out_dir / "predictions.csv")
    write_run_manifest(
        out_dir, "predict", {"models": [str(m) for m in args.model]},
        _hash_inputs({"models": [Path(m) for m in args.model], "features": feature_paths}),
        args.seed,
    )
    return 0


def cmd_evaluate(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = dataset.load_manifest(args.manifest)
    labels = manifest.labels()
    if args.predictions:
        merged = evaluate.ensemble_average([evaluate.load_predictions(p) for p in args.predictions])
        report = evaluate.auc(merged, labels)
        evaluate.save_predictions(merged, out_dir / "predictions.csv")
        evaluate.save_report(report, out_dir / "report.json")
        hashes = _hash_inputs({"manifest": Path(args.manifest),
                               "predictions": [Path(p) for p in args.predictions]})
    else:
        if not args.model or not args.features_dir:
            raise ConfigError("evaluate needs --model with --features-dir, or --predictions")
        stats = _resolve_norm_stats(args)
        feature_paths = _collect_feature_paths(args)
        report = evaluate.evaluate_files(args.model, feature_paths, labels, out_dir, stats)
        hashes = _hash_inputs({"manifest": Path(args.manifest),
                               "models": [Path(m) for m in args.model],
                               "features": feature_paths})
    print(f"auc={report.auc:.6f} n_pos={report.n_pos} n_neg={report.n_neg}")
    write_run_manifest(out_dir, "evaluate", {"models": [str(m) for m in (args.model or [])]}, hashes, args.seed)
    return 0


def cmd_ensemble(args) -> int:
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    sets = [evaluate.load_predictions(p) for p in args.predictions]
    merged = evaluate.ensemble_average(sets)
    evaluate.save_predictions(merged, out_dir / "predictions.csv")
    write_run_manifest(
        out_dir, "ensemble", {"n_sets": len(sets)},
        _hash_inputs({"predictions": [Path(p) for p in args.predictions]}),
        args.seed,
    )
    return 0


# --- parser ------------------------------------------------------------------------


def _add_shared(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--seed", type=int, default=0, help="master seed; all randomness derives from it")
    parser.add_argument("--config", help="JSON file with sections: synth, features, model, train, grid")
    parser.add_argument("--out", required=True, help="output directory")
    parser.add_argument("--jobs", type=int, default=1, help="parallel workers where supported")


def _add_data_flags(parser: argparse.ArgumentParser, manifest_required: bool = True) -> None:
    parser.add_argument("--features-dir", required=True)
    parser.add_argument("--manifest", required=manifest_required)
    parser.add_argument("--norm-stats", help="normalization stats JSON (default: norm_stats.json in features dir)")


def _add_split_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--split-file", help="split JSON produced by make_splits")
    parser.add_argument("--split-index", type=int, default=0)
    parser.add_argument("--val-fraction", type=float, default=0.2)


def _add_model_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--n-feature-maps", type=int)
    parser.add_argument("--conv-pooling", help="comma-separated pool sizes, e.g. 5,4,2")
    parser.add_argument("--kernel", help="time,freq kernel size, e.g. 3,3")
    parser.add_argument("--recurrent-layers", type=int)
    parser.add_argument("--recurrent-type", choices=("gru", "feedforward"))
    parser.add_argument("--dropout", type=float)
    parser.add_argument("--n-mels", type=int)


def _add_train_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--lr", type=float)
    parser.add_argument("--batch-size", type=int)
    parser.add_argument("--max-epochs", type=int)
    parser.add_argument("--patience", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="birdcrnn", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="subcommand", required=True)

    p = sub.add_parser("synth", help="generate labeled synthetic clips + manifest")
    _add_shared(p)
    p.add_argument("--n-clips", type=int, required=True)
    p.add_argument("--positive-fraction", type=float, default=0.5)
    p.add_argument("--duration", type=float)
    p.add_argument("--sample-rate", type=int)
    p.add_argument("--noise-level", type=float)
    p.add_argument("--chirp-low", type=float)
    p.add_argument("--chirp-high", type=float)
    p.add_argument("--chirps-min", type=int)
    p.add_argument("--chirps-max", type=int)
    p.add_argument("--distractor", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("features", help="extract log mel-band energies to .badf files")
    _add_shared(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--frame-ms", type=float)
    p.add_argument("--overlap", type=float)
    p.add_argument("--n-mels", type=int)
    p.add_argument("--fft-size", type=int)
    p.add_argument("--fmin", type=float)
    p.add_argument("--fmax", type=float)
    p.add_argument("--log-epsilon", type=float)
    p.add_argument("--split-file")
    p.add_argument("--split-index", type=int, default=0)
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="train one model, keep the best-validation snapshot")
    _add_shared(p)
    _add_data_flags(p)
    _add_split_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("gridsearch", help="train every configuration of a hyperparameter grid")
    _add_shared(p)
    _add_data_flags(p)
    _add_split_flags(p)
    p.add_argument("--feature-maps", help="comma-separated choices, e.g. 96,256")
    p.add_argument("--recurrent-layer-counts", help="comma-separated choices, e.g. 1,2,3")
    p.add_argument("--poolings", help="pipe-separated arrangements, e.g. '4|2,2|5,4,2'")
    p.add_argument("--recurrent-type", choices=("gru", "feedforward"))
    p.add_argument("--dropout", type=float)
    p.add_argument("--n-mels", type=int)
    _add_train_flags(p)
    p.set_defaults(func=cmd_gridsearch)

    p = sub.add_parser("predict", help="write per-clip probabilities for one or more models")
    _add_shared(p)
    _add_data_flags(p, manifest_required=False)
    p.add_argument("--model", action="append", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="score predictions or models against labels")
    _add_shared(p)
    p.add_argument("--manifest", required=True)
    p.add_argument("--model", action="append")
    p.add_argument("--features-dir")
    p.add_argument("--norm-stats")
    p.add_argument("--predictions", action="append", help="score existing prediction CSVs instead of models")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ensemble", help="average prediction CSVs")
    _add_shared(p)
    p.add_argument("--predictions", action="append", required=True)
    p.set_defaults(func=cmd_ensemble)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return 0 if exc.code in (0, None) else 1
    try:
        return int(args.func(args) or 0)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3
    except (DataError, OSError, json.JSONDecodeError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except PipelineError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
