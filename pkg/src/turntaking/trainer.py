"""Cross-validated training protocol: early stopping, grid search, seeded ensembles."""
from __future__ import annotations

import csv
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable, Mapping, Sequence

import numpy as np

from . import metrics
from .corpus import Conversation, split_folds, split_validation, switch_types
from .features import normalize_by_speaker
from .net import (
    MAX_FRAMES, LossWeights, ModelParams, Prediction, backward, forward_batch, init_params,
    pad_batch, predict_batch, save_model,
)
from .optim import PlateauSchedule, RmspropState, rmsprop_step


class NonFiniteLoss(FloatingPointError):
    pass


@dataclass(frozen=True)
class TrainConfig:
    max_epochs: int = 100
    patience: int | None = 5
    initial_lr: float = 0.001
    lr_factor: float = 0.5
    lr_schedule: str = "plateau"
    batch_size: int = 32
    layers: tuple[int, ...] = (1, 2)
    widths: tuple[int, ...] = (32, 64, 128)
    n_seeds: int = 3
    loss_weights: LossWeights = LossWeights()
    validation_fraction: float = 0.33
    k_folds: int = 5
    folds: tuple[int, ...] | None = None
    seed: int = 0
    rho: float = 0.9
    eps: float = 1e-8
    grad_clip: float | None = None
    max_frames: int = MAX_FRAMES
    jobs: int = 1

    def __post_init__(self):
        if isinstance(self.loss_weights, Mapping):
            object.__setattr__(self, "loss_weights", LossWeights(**self.loss_weights))
        positive = ("max_epochs", "initial_lr", "batch_size", "n_seeds", "k_folds", "max_frames", "jobs")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.patience is not None and not 0 < self.patience < self.max_epochs:
            raise ValueError("patience must be positive and below max_epochs")
        if not self.layers or not self.widths or min(self.layers) < 1 or min(self.widths) < 1:
            raise ValueError("grid needs positive layer counts and widths")
        if not 0 < self.validation_fraction < 1 or not 0 < self.lr_factor < 1:
            raise ValueError("validation_fraction and lr_factor must lie in (0, 1)")
        if self.lr_schedule not in ("plateau", "constant"):
            raise ValueError("lr_schedule must be 'plateau' or 'constant'")
        if self.folds is not None and any(not 0 <= f < self.k_folds for f in self.folds):
            raise ValueError("fold indices out of range")

    @property
    def single_task(self) -> bool:
        return self.loss_weights.lambda2 == 0

    @property
    def grid(self) -> list[tuple[int, ...]]:
        return [(w,) * n for n in self.layers for w in self.widths]


@dataclass(frozen=True)
class Example:
    utt_id: str
    frames: np.ndarray
    turn: int
    intent: int
    switch_type: str | None = None


def build_examples(convs: Sequence[Conversation], features: Mapping[str, np.ndarray],
                   max_frames: int = MAX_FRAMES) -> list[Example]:
    """One example per utterance that has a turn label (all but each conversation's last)."""
    out = []
    for conv in convs:
        for u, st in zip(conv.utterances, switch_types(conv)):
            if u.turn is None:
                continue
            if u.id not in features:
                raise KeyError(f"no features for utterance {u.id}")
            frames = np.asarray(features[u.id][-max_frames:], dtype=np.float32)
            out.append(Example(u.id, frames, int(u.turn), int(u.intent), None if st is None else st.value))
    return out


def class_weights(labels, n_classes: int) -> np.ndarray:
    """Inverse-frequency weights N / (K * N_c); classes absent from ``labels`` get 1."""
    counts = np.bincount(np.asarray(labels, dtype=int), minlength=n_classes).astype(float)
    n = counts.sum()
    with np.errstate(divide="ignore"):
        w = np.where(counts > 0, n / (n_classes * counts), 1.0)
    return w


@dataclass
class Checkpoint:
    epoch: int
    params: ModelParams
    val_f1: float


@dataclass
class EpochRecord:
    epoch: int
    l_turn: float
    l_intent: float
    l_total: float
    val_f1: float
    val_turn_acc: float
    val_intent_acc: float
    lr: float


@dataclass
class TrainResult:
    best: Checkpoint
    history: list[EpochRecord]
    turn_weights: np.ndarray
    intent_weights: np.ndarray


class EarlyStopping:
    """Stop after ``patience`` consecutive epochs without strictly beating the best score."""

    def __init__(self, patience: int | None):
        self.patience = patience
        self.best = -np.inf
        self.best_epoch = 0
        self.bad_epochs = 0
        self.epoch = 0

    def update(self, metric: float) -> bool:
        self.epoch += 1
        if metric > self.best:
            self.best = metric
            self.best_epoch = self.epoch
            self.bad_epochs = 0
            return True
        self.bad_epochs += 1
        return False

    @property
    def should_stop(self) -> bool:
        return self.patience is not None and self.bad_epochs >= self.patience


def _batches(lengths: np.ndarray, batch_size: int, rng: np.random.Generator) -> list[np.ndarray]:
    # length-sorted within windows of 20 batches to cut padding, then batch order shuffled
    order = rng.permutation(lengths.size)
    window = batch_size * 20
    batches = []
    for s in range(0, order.size, window):
        idx = order[s:s + window]
        idx = idx[np.argsort(lengths[idx], kind="stable")]
        batches += [idx[i:i + batch_size] for i in range(0, idx.size, batch_size)]
    return [batches[i] for i in rng.permutation(len(batches))]


def _val_scores(params: ModelParams, examples: Sequence[Example]) -> tuple[float, float, float]:
    turn, intent = predict_batch(params, [e.frames for e in examples])
    t_true = np.array([e.turn for e in examples])
    i_true = np.array([e.intent for e in examples])
    t_pred, i_pred = turn.argmax(1), intent.argmax(1)
    return metrics.macro_f1(t_true, t_pred, 2), float((t_pred == t_true).mean()), float((i_pred == i_true).mean())


def train_one(params: ModelParams, train: Sequence[Example], val: Sequence[Example], config: TrainConfig,
              seed: int = 0, scorer: Callable[[ModelParams, int], float] | None = None,
              log: Callable[[str], None] | None = None) -> TrainResult:
    """Train in place and return the best-validation snapshot plus per-epoch history.

    ``scorer(params, epoch)`` overrides the validation turn macro-F1 (used to
    script histories in tests).
    """
    if not train or not val:
        raise ValueError("training and validation sets must be non-empty")
    rng = np.random.default_rng(seed)
    tw = class_weights([e.turn for e in train], 2)
    iw = class_weights([e.intent for e in train], params.intent_head.b.size)
    cw = (tw.astype(params.dtype), iw.astype(params.dtype))
    lw = config.loss_weights
    state = RmspropState(config.initial_lr, config.rho, config.eps)
    schedule = PlateauSchedule(config.initial_lr, config.lr_factor)
    stopper = EarlyStopping(config.patience)
    lengths = np.array([len(e.frames) for e in train])
    best = Checkpoint(0, params.copy(), -np.inf)
    history = []

    for epoch in range(1, config.max_epochs + 1):
        sums = np.zeros(3)
        for idx in _batches(lengths, config.batch_size, rng):
            X, lens = pad_batch([train[i].frames for i in idx], config.max_frames, params.dtype)
            _, _, cache = forward_batch(params, X, lens)
            grads, loss = backward(cache, [train[i].turn for i in idx], [train[i].intent for i in idx],
                                   lw, cw, single_task=config.single_task)
            if not np.isfinite(loss.l_total):
                raise NonFiniteLoss(f"non-finite loss at epoch {epoch}: {loss}")
            rmsprop_step(params, grads, state, config.grad_clip)
            sums += np.array([loss.l_turn, loss.l_intent, loss.l_total]) * len(idx)
        sums /= len(train)

        f1, t_acc, i_acc = _val_scores(params, val)
        if scorer is not None:
            f1 = scorer(params, epoch)
        lr_used = state.learning_rate
        if config.lr_schedule == "plateau":
            state.learning_rate = schedule.update(f1)
        if stopper.update(f1):
            best = Checkpoint(epoch, params.copy(), f1)
        history.append(EpochRecord(epoch, *map(float, sums), f1, t_acc, i_acc, lr_used))
        if log:
            log(f"epoch {epoch:3d} loss {sums[2]:.4f} val_f1 {f1:.4f} lr {lr_used:.2e}")
        if stopper.should_stop:
            break
    return TrainResult(best, history, tw, iw)


def _train_arch(arch: tuple[int, ...], seed: int, train, val, config: TrainConfig) -> TrainResult:
    params = init_params(arch, seed, input_dim=train[0].frames.shape[1])
    return train_one(params, train, val, config, seed=seed)


class _RunCache:
    """Memoizes (architecture, seed) trainings; training is deterministic so reuse is exact."""

    def __init__(self, train, val, config: TrainConfig):
        self.train, self.val, self.config = train, val, config
        self.results: dict[tuple, TrainResult] = {}

    def get_many(self, keys: list[tuple[tuple[int, ...], int]]) -> list[TrainResult]:
        todo = [k for k in dict.fromkeys(keys) if k not in self.results]
        if self.config.jobs > 1 and len(todo) > 1:
            with ProcessPoolExecutor(max_workers=self.config.jobs) as pool:
                futures = {k: pool.submit(_train_arch, k[0], k[1], self.train, self.val, self.config) for k in todo}
                for k, fut in futures.items():
                    self.results[k] = fut.result()
        else:
            for k in todo:
                self.results[k] = _train_arch(k[0], k[1], self.train, self.val, self.config)
        return [self.results[k] for k in keys]


def grid_search(train, val, config: TrainConfig, cache: _RunCache | None = None):
    """Train one model per grid point at the base seed; pick max validation F1.

    Ties go to the smaller model, then to fewer layers. Returns the winning
    architecture and every (architecture, result) pair.
    """
    cache = cache or _RunCache(train, val, config)
    grid = config.grid
    results = cache.get_many([(arch, config.seed) for arch in grid])
    scored = []
    for arch, res in zip(grid, results):
        n_params = res.best.params.n_params
        scored.append(((-res.best.val_f1, n_params, len(arch)), arch, res))
    scored.sort(key=lambda s: s[0])
    return scored[0][1], [(arch, res) for _, arch, res in scored]


@dataclass
class EnsembleModel:
    members: list[Checkpoint]
    seeds: list[int]
    turn_weights: np.ndarray
    intent_weights: np.ndarray


def train_ensemble(arch: tuple[int, ...], train, val, config: TrainConfig,
                   cache: _RunCache | None = None) -> EnsembleModel:
    cache = cache or _RunCache(train, val, config)
    seeds = [config.seed + k for k in range(config.n_seeds)]
    results = cache.get_many([(arch, s) for s in seeds])
    return EnsembleModel([r.best for r in results], seeds, results[0].turn_weights, results[0].intent_weights)


def ensemble_predict(ensemble: EnsembleModel | Sequence[ModelParams], seq: np.ndarray) -> Prediction:
    turn, intent = ensemble_predict_batch(ensemble, [seq])
    return Prediction(turn[0], intent[0])


def ensemble_predict_batch(ensemble: EnsembleModel | Sequence[ModelParams], seqs: Sequence[np.ndarray]):
    """Average the members' softmax outputs, per head."""
    members = [m.params for m in ensemble.members] if isinstance(ensemble, EnsembleModel) else list(ensemble)
    turn = intent = None
    for p in members:
        t, i = predict_batch(p, seqs)
        turn = t if turn is None else turn + t
        intent = i if intent is None else intent + i
    return turn / len(members), intent / len(members)


@dataclass
class FoldResult:
    index: int
    architecture: tuple[int, ...]
    grid_scores: dict[str, float]
    report: dict
    n_train: int
    n_val: int
    n_test: int


@dataclass
class ExperimentResult:
    folds: list[FoldResult]
    mean: dict
    summary: dict = field(default_factory=dict)


def _arch_name(arch: tuple[int, ...]) -> str:
    return "x".join(str(w) for w in arch)


def _stderr(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


def run_experiment(convs: Sequence[Conversation], features: Mapping[str, np.ndarray], config: TrainConfig,
                   out_dir: str | Path | None = None, log: Callable[[str], None] | None = _stderr) -> ExperimentResult:
    """Full protocol per fold: validation split, grid search, ensemble, test evaluation.

    ``features`` holds raw (un-normalized) frame matrices keyed by utterance id;
    they are z-normalized per speaker within each conversation before use.
    """
    normed = normalize_by_speaker(convs, features)
    folds = split_folds(list(convs), config.k_folds, config.seed)
    wanted = range(config.k_folds) if config.folds is None else config.folds
    out = Path(out_dir) if out_dir is not None else None
    log_rows = []
    fold_results = []
    for i in wanted:
        train_c, test_c = folds[i]
        tr_c, va_c = split_validation(train_c, config.validation_fraction, config.seed + i)
        tr = build_examples(tr_c, normed, config.max_frames)
        va = build_examples(va_c, normed, config.max_frames)
        te = build_examples(test_c, normed, config.max_frames)
        cache = _RunCache(tr, va, config)
        arch, grid = grid_search(tr, va, config, cache)
        ens = train_ensemble(arch, tr, va, config, cache)
        turn, intent = ensemble_predict_batch(ens, [e.frames for e in te])
        report = metrics.evaluate(turn, intent, [e.turn for e in te], [e.intent for e in te],
                                  [e.switch_type for e in te]).to_dict()
        grid_scores = {_arch_name(a): float(r.best.val_f1) for a, r in grid}
        fold_results.append(FoldResult(i, arch, grid_scores, report, len(tr), len(va), len(te)))
        if log:
            log(f"fold {i}: arch {_arch_name(arch)} test f1 {report['f1']:.4f} auc {report['auc']} "
                f"intent uar {report['intent_uar']}")
        for (a, s), res in sorted(cache.results.items()):
            for rec in res.history:
                log_rows.append({"fold": i, "arch": _arch_name(a), "seed": s, **asdict(rec)})
        if out is not None:
            _write_fold(out / "folds" / str(i), ens, arch, report, te, turn, intent, config)

    mean = metrics.mean_report([f.report for f in fold_results])
    summary = {
        "loss_weights": asdict(config.loss_weights),
        "folds": [
            {"fold": f.index, "architecture": list(f.architecture), "grid_val_f1": f.grid_scores,
             "n_train": f.n_train, "n_val": f.n_val, "n_test": f.n_test, "report": f.report}
            for f in fold_results
        ],
        "mean": mean,
    }
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        (out / "summary.json").write_text(json.dumps(summary, indent=1) + "\n")
        with open(out / "training_log.csv", "w", newline="") as fh:
            fields = ["fold", "arch", "seed", "epoch", "l_turn", "l_intent", "l_total", "val_f1",
                      "val_turn_acc", "val_intent_acc", "lr"]
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            writer.writerows(log_rows)
    return ExperimentResult(fold_results, mean, summary)


def _write_fold(fold_dir: Path, ens: EnsembleModel, arch, report: dict, test: Sequence[Example],
                turn: np.ndarray, intent: np.ndarray, config: TrainConfig) -> None:
    ckpt = fold_dir / "checkpoints"
    ckpt.mkdir(parents=True, exist_ok=True)
    for member, seed in zip(ens.members, ens.seeds):
        save_model(ckpt / f"{_arch_name(arch)}_seed{seed}.ttmd", member.params, ens.turn_weights,
                   ens.intent_weights, config.loss_weights)
    (fold_dir / "report.json").write_text(json.dumps(report, indent=1) + "\n")
    with open(fold_dir / "predictions.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["utt_id", "turn", "intent", "switch_type", "p_hold", "p_switch",
                         *(f"p_intent{k}" for k in range(intent.shape[1]))])
        for e, t, it in zip(test, turn, intent):
            writer.writerow([e.utt_id, e.turn, e.intent, e.switch_type or "",
                             *(repr(float(x)) for x in t), *(repr(float(x)) for x in it)])
