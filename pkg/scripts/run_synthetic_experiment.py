"""Synthesize a corpus, extract features, and run the cross-validated protocol twice.

Trains the multi-task model and the single-task (intent weight 0) model on the
same folds and seeds, then prints both mean reports side by side.

    python scripts/run_synthetic_experiment.py --out runs/synthetic
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import time
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

from turntaking import corpus, features, synthgen, trainer
from turntaking.net import LossWeights


def extract_all(audio: dict, jobs: int) -> dict:
    keys = sorted(audio)
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            mats = list(pool.map(features.extract, [audio[k] for k in keys], chunksize=64))
    else:
        mats = [features.extract(audio[k]) for k in keys]
    return dict(zip(keys, mats))


def main() -> None:
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--out", type=Path, default=None, help="write run directories here")
    ap.add_argument("--conversations", type=int, default=200)
    ap.add_argument("--seed", type=int, default=0)
    ap.add_argument("--widths", type=int, nargs="+", default=[32])
    ap.add_argument("--layers", type=int, nargs="+", default=[1])
    ap.add_argument("--jobs", type=int, default=1)
    args = ap.parse_args()

    t0 = time.time()
    synth = synthgen.synthesize_corpus(synthgen.default_config(n_conversations=args.conversations, seed=args.seed))
    convs = corpus.filter_corpus(synth.conversations)
    raw = extract_all(synth.audio, args.jobs)
    print(f"{sum(len(c) for c in convs)} utterances synthesized and extracted in {time.time() - t0:.0f}s")

    mt = trainer.TrainConfig(layers=tuple(args.layers), widths=tuple(args.widths), seed=args.seed, jobs=args.jobs)
    st = dataclasses.replace(mt, loss_weights=LossWeights(1.0, 0.0))
    means = {}
    for name, cfg in (("multi-task", mt), ("single-task", st)):
        t1 = time.time()
        out = args.out / name if args.out else None
        means[name] = trainer.run_experiment(convs, raw, cfg, out).mean
        print(f"{name}: {time.time() - t1:.0f}s")

    keys = ("f1", "auc", "recall_switch_smooth", "recall_switch_overlapping", "intent_uar")
    print(f"{'metric':28s}" + "".join(f"{n:>14s}" for n in means))
    for k in keys:
        print(f"{k:28s}" + "".join(f"{m[k] if m[k] is not None else float('nan'):14.4f}" for m in means.values()))
    if args.out:
        (args.out / "comparison.json").write_text(json.dumps(means, indent=1) + "\n")


if __name__ == "__main__":
    main()
