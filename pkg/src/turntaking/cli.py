"""Command-line entry point: synth, prepare, stats, extract, train, evaluate, predict, gradcheck.

Exit codes: 0 success, 1 usage/config error, 2 data error, 3 numeric failure.
"""
from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import corpus as corpus_mod
from . import features as feat_mod
from . import metrics, net, optim, synthgen, trainer
from .audio import read_wav
from .config import ConfigError, RunConfig, dump_config, load_config
from .corpus import IntentClass, TurnLabel

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3

CHANNELS = {"A": 0, "B": 1}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def cmd_synth(args) -> int:
    cfg = load_config(args.config)
    man_dir = synthgen.write_corpus(cfg.synth, args.out)
    _log(f"wrote {cfg.synth.n_conversations} conversations to {man_dir}")
    return EXIT_OK


def cmd_prepare(args) -> int:
    raw = corpus_mod.load_corpus(args.manifest_dir)
    convs = corpus_mod.filter_corpus(raw)
    corpus_mod.save_corpus(convs, args.out)
    n_in = sum(len(c) for c in raw)
    n_out = sum(len(c) for c in convs)
    _log(f"kept {n_out} of {n_in} utterances in {len(convs)} conversations")
    return EXIT_OK


def _labelled(convs):
    return [c if all(u.turn is not None for u in c.utterances[:-1]) else corpus_mod.derive_turn_labels(c)
            for c in convs]


def cmd_stats(args) -> int:
    convs = _labelled(corpus_mod.load_corpus(args.corpus))
    table = corpus_mod.contingency_table(convs)
    n_utts = sum(len(c) for c in convs)
    out = {"n_conversations": len(convs), "n_utterances": n_utts, "n_labelled": table.total,
           "counts": {c.label: {"hold": int(table.counts[c, 0]), "switch": int(table.counts[c, 1])}
                      for c in IntentClass}}
    try:
        chi = corpus_mod.chi_square_independence(table)
        out["chi_square"] = {"statistic": chi.statistic, "df": chi.df, "p": chi.p}
    except ValueError as exc:
        out["chi_square"] = None
        out["chi_square_error"] = str(exc)
    if args.json:
        print(json.dumps(out, indent=1))
        return EXIT_OK
    print(table.format())
    print(f"labelled utterances: {table.total:,d} ({n_utts:,d} in {len(convs)} conversations)")
    if out["chi_square"]:
        c = out["chi_square"]
        print(f"chi-square: {c['statistic']:.4f}, df = {c['df']}, p = {c['p']:.3g}")
    else:
        print(f"chi-square: not computable ({out['chi_square_error']})")
    return EXIT_OK


def _extract_one(job):
    utt_id, wav, channel, trim, fcfg, out_path = job
    audio = read_wav(wav, channel)
    if trim is not None:
        audio = audio.crop(*trim)
    feat_mod.write_features(out_path, feat_mod.extract(audio, fcfg))
    return utt_id


def cmd_extract(args) -> int:
    cfg = load_config(args.config)
    convs = corpus_mod.load_corpus(args.corpus)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    root = Path(args.audio_root)
    jobs = []
    for conv in convs:
        for u in conv.utterances:
            if not u.audio_ref:
                continue
            channel = CHANNELS[args.channel] if args.channel else None
            wav = root / u.audio_ref
            if channel is None and _n_channels(wav) > 1:
                channel = CHANNELS[u.speaker]
            trim = (u.start_s, u.end_s) if args.trim else None
            jobs.append((u.id, wav, channel, trim, cfg.features, out / f"{u.id}.ttfv"))
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            list(pool.map(_extract_one, jobs, chunksize=32))
    else:
        for job in jobs:
            _extract_one(job)
    _log(f"extracted {len(jobs)} feature files into {out}")
    return EXIT_OK


def _n_channels(path: Path) -> int:
    import wave
    with wave.open(str(path), "rb") as w:
        return w.getnchannels()


def _load_features(convs, feat_dir: Path, n_dims: int) -> dict[str, np.ndarray]:
    feats = {}
    for conv in convs:
        for u in conv.utterances:
            path = feat_dir / f"{u.id}.ttfv"
            if not path.exists() and u.features_ref:
                path = feat_dir / u.features_ref
            feats[u.id] = feat_mod.read_features(path, n_dims)
    return feats


def cmd_train(args) -> int:
    cfg = load_config(args.config)
    tcfg = cfg.train
    if args.single_task:
        tcfg = dataclasses.replace(tcfg, loss_weights=net.LossWeights(tcfg.loss_weights.lambda1, 0.0))
    if args.jobs is not None:
        tcfg = dataclasses.replace(tcfg, jobs=args.jobs)
    cfg = dataclasses.replace(cfg, train=tcfg)
    convs = _labelled(corpus_mod.load_corpus(args.corpus))
    feats = _load_features(convs, Path(args.features), cfg.features.n_dims)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    # jobs does not change results, so the written config pins it to 1
    dump_config(dataclasses.replace(cfg, train=dataclasses.replace(tcfg, jobs=1)), out / "config.json")
    result = trainer.run_experiment(convs, feats, tcfg, out, log=_log)
    m = result.mean
    _log(f"mean over {len(result.folds)} folds: f1 {m['f1']} auc {m['auc']} intent uar {m['intent_uar']}")
    return EXIT_OK


def _read_predictions(path: Path):
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    turn = np.array([int(r["turn"]) for r in rows])
    intent = np.array([int(r["intent"]) for r in rows])
    types = [r["switch_type"] or None for r in rows]
    tp = np.array([[float(r["p_hold"]), float(r["p_switch"])] for r in rows])
    ip = np.array([[float(r[f"p_intent{k}"]) for k in range(len(IntentClass))] for r in rows])
    return turn, intent, types, tp, ip


def _fold_dirs(run: Path) -> list[Path]:
    dirs = sorted((run / "folds").iterdir(), key=lambda p: int(p.name)) if (run / "folds").is_dir() else []
    if not dirs:
        raise FileNotFoundError(f"{run}: no folds/ directory with results")
    return dirs


def evaluate_run(run: Path, seed: int = 0) -> dict:
    model_reports, random_reports = [], []
    for d in _fold_dirs(run):
        turn, intent, types, tp, ip = _read_predictions(d / "predictions.csv")
        model_reports.append(metrics.evaluate(tp, ip, turn, intent, types).to_dict())
        random_reports.append(metrics.random_baseline(turn, intent, types, seed + int(d.name)).to_dict())
    return {
        "model": metrics.mean_report(model_reports),
        "random": metrics.mean_report(random_reports),
        "model_folds": model_reports,
    }


def _pct(x) -> str:
    return "  n/a" if x is None else f"{100 * x:5.1f}"


def cmd_evaluate(args) -> int:
    run = Path(args.run)
    ev = evaluate_run(run, args.seed)
    rows = [("Random", ev["random"]), ("Model", ev["model"])]
    if args.compare:
        other = evaluate_run(Path(args.compare), args.seed)
        ev["compare"] = other["model"]
        ev["paired_t"] = {}
        for key in ("recall", "precision", "f1", "auc"):
            a = [r[key] for r in ev["model_folds"]]
            b = [r[key] for r in other["model_folds"]]
            if len(a) == len(b) and len(a) > 1 and None not in a + b:
                t, p = metrics.paired_t_test(a, b)
                ev["paired_t"][key] = {"t": t, "p": p}
        rows.append(("Compare", other["model"]))
    print(f"{'method':<10} {'Rec.':>6} {'Prec.':>6} {'F1':>6} {'AUC':>6}")
    for name, m in rows:
        print(f"{name:<10} {_pct(m['recall']):>6} {_pct(m['precision']):>6} {_pct(m['f1']):>6} {_pct(m['auc']):>6}")
    m = ev["model"]
    print(f"\nswitch recall: smooth {_pct(m['recall_switch_smooth'])}  overlapping {_pct(m['recall_switch_overlapping'])}")
    print(f"intent UAR: {_pct(m['intent_uar'])} (chance {100 / len(IntentClass):.1f})\n")
    print(f"{'intent':<12} {'F1(sw)':>7} {'F1(hold)':>8} {'acc':>6}")
    for c in IntentClass:
        print(f"{c.label:<12} {_pct(m[c.label + '_f1_switch']):>7} {_pct(m[c.label + '_f1_hold']):>8} "
              f"{_pct(m[c.label + '_intent_acc']):>6}")
    for key, res in ev.get("paired_t", {}).items():
        print(f"paired t-test {key}: t = {res['t']:.3f}, p = {res['p']:.3g}")
    (run / "evaluation.json").write_text(json.dumps(ev, indent=1) + "\n")
    return EXIT_OK


def cmd_predict(args) -> int:
    models = [net.load_model(m) for m in args.model]
    fcfg = load_config(args.config).features
    channel = CHANNELS[args.channel] if args.channel else None
    seqs = [feat_mod.extract(read_wav(w, channel), fcfg) for w in [args.wav, *args.context]]
    normed, _ = feat_mod.speaker_z_norm(seqs)
    turn, intent = trainer.ensemble_predict_batch([m.params for m in models], normed[:1])
    turn, intent = turn[0], intent[0]
    out = {
        "turn_probs": {t.label: float(turn[t]) for t in TurnLabel},
        "intent_probs": {c.label: float(intent[c]) for c in IntentClass},
        "predicted_turn": TurnLabel(int(turn.argmax())).label,
        "predicted_intent": IntentClass(int(intent.argmax())).label,
    }
    print(json.dumps(out, indent=1))
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    worst, control = optim.random_grad_checks(args.instances, args.seed)
    print(f"max relative error over {args.instances} instances: {worst:.3e}")
    print(f"sign-flip control: {control:.3e}")
    return EXIT_OK if worst < 1e-4 and control > 1e-1 else EXIT_NUMERIC


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="turntaking", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic corpus")
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_synth)

    s = sub.add_parser("prepare", help="filter and label manifests into one corpus file")
    s.add_argument("--manifest-dir", required=True)
    s.add_argument("--out", required=True)
    s.set_defaults(func=cmd_prepare)

    s = sub.add_parser("stats", help="intent x turn table and chi-square test")
    s.add_argument("--corpus", required=True)
    s.add_argument("--json", action="store_true")
    s.set_defaults(func=cmd_stats)

    s = sub.add_parser("extract", help="write TTFV feature files")
    s.add_argument("--corpus", required=True)
    s.add_argument("--audio-root", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--channel", choices=sorted(CHANNELS))
    s.add_argument("--trim", action="store_true", help="cut each utterance from its audio by start/end time")
    s.add_argument("--config")
    s.add_argument("--jobs", type=int, default=1)
    s.set_defaults(func=cmd_extract)

    s = sub.add_parser("train", help="run the cross-validated experiment")
    s.add_argument("--corpus", required=True)
    s.add_argument("--features", required=True)
    s.add_argument("--config")
    s.add_argument("--out", required=True)
    s.add_argument("--single-task", action="store_true")
    s.add_argument("--jobs", type=int)
    s.set_defaults(func=cmd_train)

    s = sub.add_parser("evaluate", help="tabulate a finished run")
    s.add_argument("--run", required=True)
    s.add_argument("--compare", help="second run for a paired t-test over folds")
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_evaluate)

    s = sub.add_parser("predict", help="turn and intent probabilities for one WAV")
    s.add_argument("--model", required=True, nargs="+")
    s.add_argument("--wav", required=True)
    s.add_argument("--channel", choices=sorted(CHANNELS))
    s.add_argument("--context", nargs="*", default=[],
                   help="other utterances by the same speaker, pooled into the z-norm statistics")
    s.add_argument("--config")
    s.set_defaults(func=cmd_predict)

    s = sub.add_parser("gradcheck", help="finite-difference check of the LSTM gradients")
    s.add_argument("--instances", type=int, default=20)
    s.add_argument("--seed", type=int, default=0)
    s.set_defaults(func=cmd_gradcheck)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        _log(f"config error: {exc}")
        return EXIT_USAGE
    except (FloatingPointError, trainer.NonFiniteLoss, optim.NonFiniteGradient) as exc:
        _log(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except (OSError, ValueError, KeyError, json.JSONDecodeError) as exc:
        _log(f"data error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
