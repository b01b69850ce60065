#!/usr/bin/env python3
"""Reduced hyperparameter grid search at desk scale.

Uses small feature-map counts so the whole grid finishes in a few minutes;
the full reference space ({96, 256} maps x {1, 2, 3} recurrent layers x 8
pooling arrangements = 48 configurations) is available through the
`birdcrnn gridsearch` subcommand when more compute is at hand.

    python scripts/grid_demo.py --out runs/grid --seed 7
"""

import argparse
import dataclasses
import sys
import time
from pathlib import Path

sys.path.insert(0, str(Path(__file__).resolve().parent.parent / "src"))

from birdcrnn import dataset, features, train


def main() -> int:
    parser = argparse.ArgumentParser(description=__doc__)
    parser.add_argument("--out", default="runs/grid")
    parser.add_argument("--seed", type=int, default=7)
    parser.add_argument("--n-per-class", type=int, default=30)
    parser.add_argument("--max-epochs", type=int, default=8)
    parser.add_argument("--jobs", type=int, default=1)
    args = parser.parse_args()

    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    started = time.perf_counter()

    spec_pos = dataset.SynthSpec(positive=True, duration_s=1.0, sample_rate=22050)
    spec_neg = dataclasses.replace(spec_pos, positive=False)
    config = features.FeatureConfig()
    bank = features.mel_filterbank(config, 22050)

    def build(n, offset):
        out = []
        for i in range(n):
            for spec, tag in ((spec_pos, "p"), (spec_neg, "n")):
                clip, label = dataset.synth_clip(spec, seed=offset + 2 * i + (tag == "p"),
                                                 clip_id=f"{tag}{offset + i}")
                out.append((features.extract(clip, config, bank), label))
        return out

    train_raw = build(args.n_per_class, 0)
    val_raw = build(max(args.n_per_class // 3, 5), 50_000)
    stats = features.fit_norm_stats([fm for fm, _ in train_raw])
    train_set = [(features.normalize(fm, stats), y) for fm, y in train_raw]
    val_set = [(features.normalize(fm, stats), y) for fm, y in val_raw]

    space = train.GridSpace(
        feature_map_choices=(8, 16),
        recurrent_layer_choices=(1, 2),
        pooling_arrangements=((5, 4, 2), (8, 5)),
    )
    print(f"== grid of {len(train.enumerate_grid(space))} configurations")
    train_config = train.TrainConfig(batch_size=16, max_epochs=args.max_epochs,
                                     patience=args.max_epochs, seed=args.seed)
    report = train.run_grid(space, train_config, train_set, val_set, jobs=args.jobs)

    rows = ["config_json,val_auc,best_epoch,n_params"]
    for r in report:
        rows.append(f'"{r.config.to_json().replace(chr(34), chr(34) * 2)}",{r.val_auc:.9g},{r.best_epoch},{r.n_params}')
    (out_dir / "grid_report.csv").write_text("\n".join(rows) + "\n")

    print(f"{'maps':>5} {'rec':>4} {'pooling':>12} {'val auc':>8} {'params':>8}")
    for r in report:
        c = r.config
        print(f"{c.n_feature_maps:>5} {c.n_recurrent_layers:>4} {str(c.conv_pooling):>12} "
              f"{r.val_auc:>8.4f} {r.n_params:>8}")
    print(f"done in {time.perf_counter() - started:.0f}s; report at {out_dir / 'grid_report.csv'}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
