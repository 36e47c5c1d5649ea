import dataclasses
import json

import numpy as np
import pytest

from turntaking import net, trainer
from turntaking.corpus import derive_turn_labels
from turntaking.net import LossWeights
from turntaking.trainer import EarlyStopping, Example, TrainConfig

from conftest import make_conv


def _examples(n, seed=0, dims=6):
    g = np.random.default_rng(seed)
    return [Example(f"u{i}", g.normal(size=(int(g.integers(2, 8)), dims)).astype(np.float32),
                    int(g.integers(2)), int(g.integers(7))) for i in range(n)]


def _scripted(history, **kw):
    cfg = TrainConfig(layers=(1,), widths=(2,), **kw)
    ex = _examples(4)
    params = net.init_params((2,), 0, input_dim=6)
    return trainer.train_one(params, ex, ex, cfg, scorer=lambda p, epoch: history[epoch - 1])


def test_early_stopping_on_scripted_history():
    res = _scripted([0.5, 0.6, 0.6, 0.6, 0.6, 0.6, 0.6, 0.9, 0.9])
    assert len(res.history) == 7
    assert res.best.epoch == 2 and res.best.val_f1 == 0.6


def test_monotone_history_runs_every_epoch():
    res = _scripted(list(np.linspace(0.1, 0.9, 12)), max_epochs=12)
    assert len(res.history) == 12 and res.best.epoch == 12


def test_learning_rate_halves_on_scripted_plateaus():
    history = [0.5, 0.5, 0.6, 0.4, 0.7, 0.7, 0.8]
    res = _scripted(history, patience=None, max_epochs=len(history))
    # lr used in each epoch; ties and drops after epochs 2, 4 and 6 each halve it
    assert [r.lr for r in res.history] == [0.001 * 2.0 ** -k for k in (0, 0, 1, 1, 2, 2, 3)]


def test_early_stopping_unit():
    stop = EarlyStopping(2)
    assert [stop.update(m) for m in (0.3, 0.3, 0.4, 0.2)] == [True, False, True, False]
    assert not stop.should_stop
    stop.update(0.4)
    assert stop.should_stop and stop.best_epoch == 3
    never = EarlyStopping(None)
    for _ in range(50):
        never.update(0.0)
    assert not never.should_stop


@pytest.mark.parametrize("labels,k,expected", [
    ([0, 1] * 50, 2, [1.0, 1.0]),
    ([0] * 75 + [1] * 25, 2, [100 / 150, 2.0]),
    (list(range(7)) * 3, 7, [1.0] * 7),
])
def test_class_weights(labels, k, expected):
    np.testing.assert_allclose(trainer.class_weights(labels, k), expected)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(patience=100)
    with pytest.raises(ValueError):
        TrainConfig(lr_schedule="cosine")
    assert len(TrainConfig().grid) == 6
    assert TrainConfig(loss_weights=LossWeights(1.0, 0.0)).single_task


def test_grid_search_prefers_smaller_model_on_ties(monkeypatch):
    def fake_train(arch, seed, train, val, config):
        params = net.init_params(arch, seed, input_dim=6)
        return trainer.TrainResult(trainer.Checkpoint(1, params, 0.7), [], np.ones(2), np.ones(7))

    monkeypatch.setattr(trainer, "_train_arch", fake_train)
    ex = _examples(4)
    arch, ranked = trainer.grid_search(ex, ex, TrainConfig())
    assert arch == (32,)
    assert len(ranked) == 6
    single, _ = trainer.grid_search(ex, ex, TrainConfig(layers=(2,), widths=(64,)))
    assert single == (64, 64)


def test_ensemble_average():
    class Const:
        def __init__(self, t):
            self.t = np.array(t)

    def fake_predict(params, seqs):
        return np.tile(params.t, (len(seqs), 1)), np.full((len(seqs), 7), 1 / 7)

    members = [Const([0.6, 0.4]), Const([0.8, 0.2]), Const([0.7, 0.3])]
    orig = trainer.predict_batch
    trainer.predict_batch = fake_predict
    try:
        turn, _ = trainer.ensemble_predict_batch(members, [np.zeros((1, 2))])
    finally:
        trainer.predict_batch = orig
    np.testing.assert_allclose(turn[0], [0.7, 0.3])


def test_identical_members_reproduce_member_output():
    p = net.init_params((3,), 1, input_dim=6)
    seqs = [e.frames for e in _examples(5)]
    single, _ = net.predict_batch(p, seqs)
    ens, _ = trainer.ensemble_predict_batch([p, p.copy(), p.copy()], seqs)
    np.testing.assert_allclose(ens, single, rtol=1e-6)


def test_ensemble_is_deterministic():
    ex = _examples(12, seed=3)
    cfg = TrainConfig(layers=(1,), widths=(3,), max_epochs=3, patience=2, n_seeds=3, seed=5)
    a = trainer.train_ensemble((3,), ex[:8], ex[8:], cfg)
    b = trainer.train_ensemble((3,), ex[:8], ex[8:], cfg)
    assert a.seeds == [5, 6, 7]
    for ma, mb in zip(a.members, b.members):
        assert all(x.tobytes() == y.tobytes() for (_, x), (_, y) in zip(ma.params.tensors(), mb.params.tensors()))


def _tiny_corpus(n_convs=10, seed=0):
    g = np.random.default_rng(seed)
    convs, feats = [], {}
    for c in range(n_convs):
        conv = derive_turn_labels(make_conv("".join(g.choice(["A", "B"], 6)), tags=list(g.choice(["sd", "qy", "b"], 6)),
                                            conv_id=f"c{c}"))
        convs.append(conv)
        for u in conv.utterances:
            feats[u.id] = g.normal(size=(int(g.integers(3, 9)), 42))
    return convs, feats


def test_run_experiment_emits_artifacts(tmp_path):
    convs, feats = _tiny_corpus()
    cfg = TrainConfig(layers=(1,), widths=(4,), n_seeds=2, max_epochs=2, patience=1)
    res = trainer.run_experiment(convs, feats, cfg, tmp_path, log=None)
    assert len(res.folds) == 5 and res.mean["n_folds"] == 5
    summary = json.loads((tmp_path / "summary.json").read_text())
    assert len(summary["folds"]) == 5
    for i in range(5):
        fold = tmp_path / "folds" / str(i)
        assert (fold / "report.json").exists() and (fold / "predictions.csv").exists()
        assert len(list((fold / "checkpoints").glob("*.ttmd"))) == 2
    assert (tmp_path / "training_log.csv").read_text().startswith("fold,arch,seed,epoch")


def test_single_fold_mean_equals_fold_report():
    convs, feats = _tiny_corpus()
    cfg = TrainConfig(layers=(1,), widths=(4,), n_seeds=1, max_epochs=2, patience=1, folds=(2,))
    res = trainer.run_experiment(convs, feats, cfg, log=None)
    (fold,) = res.folds
    for k, v in fold.report.items():
        if isinstance(v, float):
            assert res.mean[k] == v


def test_run_experiment_is_deterministic():
    convs, feats = _tiny_corpus(seed=1)
    cfg = TrainConfig(layers=(1,), widths=(4,), n_seeds=1, max_epochs=2, patience=1, folds=(0,),
                      loss_weights=LossWeights(1.0, 0.0))
    a = trainer.run_experiment(convs, feats, cfg, log=None)
    b = trainer.run_experiment(convs, feats, dataclasses.replace(cfg), log=None)
    assert json.dumps(a.summary) == json.dumps(b.summary)
