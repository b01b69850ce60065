#!/usr/bin/env python3
"""End-to-end desk-scale experiment.

Synthesizes a labeled corpus of chirp-vs-noise clips, extracts normalized
log mel-band energies, trains the recurrent model and its feedforward
baseline under the same harness, evaluates both on a held-out test split,
and finishes with a seed ensemble of the recurrent model.

    python scripts/desk_experiment.py --out runs/desk --seed 42
"""

import argparse
import dataclasses
import json
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from birdcrnn import dataset, evaluate, features, net, train


def build_corpus(n_per_class: int, seed: int, out_dir: Path):
    spec_pos = dataset.SynthSpec(positive=True, duration_s=2.0, sample_rate=22050)
    spec_neg = dataclasses.replace(spec_pos, positive=False, distractor=True)
    entries = []
    clips = {}
    for i in range(n_per_class):
        for spec, tag in ((spec_pos, "pos"), (spec_neg, "neg")):
            clip_id = f"{tag}_{i:04d}"
            clip, label = dataset.synth_clip(
                spec, seed=train.derive_seed(seed, len(entries)), clip_id=clip_id
            )
            path = out_dir / "audio" / f"{clip_id}.wav"
            dataset.encode_wav(clip, path)
            entries.append(dataset.ManifestEntry(clip_id, label, path))
            clips[clip_id] = clip
    manifest = dataset.Manifest(entries=entries)
    dataset.save_manifest(manifest, out_dir / "audio" / "manifest.csv")
    return manifest, clips


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/desk")
    parser.add_argument("--seed", type=int, default=42)
    parser.add_argument("--n-per-class", type=int, default=70)
    parser.add_argument("--max-epochs", type=int, default=30)
    parser.add_argument("--ensemble-size", type=int, default=5)
    args = parser.parse_args()

    out_dir = Path(args.out)
    (out_dir / "audio").mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    print(f"== synthesizing {2 * args.n_per_class} clips")
    manifest, clips = build_corpus(args.n_per_class, args.seed, out_dir)

    print("== extracting features")
    config = features.FeatureConfig()
    bank = features.mel_filterbank(config, 22050)
    matrices = {e.clip_id: features.extract(clips[e.clip_id], config, bank) for e in manifest.entries}

    (split,) = dataset.make_splits(manifest, (0.6, 0.2, 0.2), n_splits=1, seed=args.seed)
    stats = features.fit_norm_stats([matrices[i] for i in sorted(split.train)])
    features.save_norm_stats(stats, out_dir / "norm_stats.json")
    labels = manifest.labels()

    def labeled(ids):
        return [(features.normalize(matrices[i], stats), labels[i]) for i in sorted(ids)]

    train_set, val_set, test_set = labeled(split.train), labeled(split.validation), labeled(split.test)
    print(f"   splits: {len(train_set)} train / {len(val_set)} val / {len(test_set)} test")

    train_config = train.TrainConfig(
        batch_size=16, max_epochs=args.max_epochs, patience=10, seed=args.seed
    )
    test_labels = {fm.clip_id: y for fm, y in test_set}
    test_features = [fm for fm, _ in test_set]

    scores = {}
    for rec_type in ("gru", "feedforward"):
        model_config = net.ModelConfig(
            n_feature_maps=16, conv_pooling=(5, 4, 2), n_recurrent_layers=1,
            recurrent_type=rec_type, dropout_rate=0.25, n_mels=40, seed=args.seed,
        )
        print(f"== training {rec_type} model")
        run = train.train(train_config, model_config, train_set, val_set,
                          log_fn=lambda s: print(f"   epoch {s.epoch:3d}: loss {s.train_loss:.4f}  val auc {s.val_auc:.4f}"))
        net.save_model(run.best_model, out_dir / f"model_{rec_type}.badc")
        predictions = evaluate.predict_features(run.best_model, test_features)
        report = evaluate.auc(predictions, test_labels)
        scores[rec_type] = (run, report)
        print(f"   best val auc {run.best_val_auc:.4f} @ epoch {run.best_epoch}; test auc {report.auc:.4f}")

    print(f"== seed ensemble of {args.ensemble_size} recurrent models")
    prediction_sets = []
    for k in range(args.ensemble_size):
        model_config = net.ModelConfig(
            n_feature_maps=16, conv_pooling=(5, 4, 2), n_recurrent_layers=1,
            recurrent_type="gru", dropout_rate=0.25, n_mels=40,
            seed=train.derive_seed(args.seed, 1000 + k),
        )
        run = train.train(train_config, model_config, train_set, val_set)
        prediction_sets.append(evaluate.predict_features(run.best_model, test_features))
        print(f"   member {k}: val auc {run.best_val_auc:.4f}")
    merged = evaluate.ensemble_average(prediction_sets)
    ensemble_report = evaluate.auc(merged, test_labels)
    evaluate.save_predictions(merged, out_dir / "ensemble_predictions.csv")

    summary = {
        "crnn_test_auc": scores["gru"][1].auc,
        "cnn_test_auc": scores["feedforward"][1].auc,
        "ensemble_test_auc": ensemble_report.auc,
        "seconds": round(time.perf_counter() - started, 1),
    }
    (out_dir / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    print("== summary")
    for key, value in summary.items():
        print(f"   {key}: {value}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
