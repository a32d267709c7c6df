import math
import statistics
from dataclasses import replace

import numpy as np
import pytest

from conftest import tiny_dataset
from dcap import numkit as nk
from dcap.backbone import BackboneConfig
from dcap.config import PretrainConfig
from dcap.episodes import Dataset, consistent_eval_set, manifest, rng_stream, sample_episode
from dcap.heads import GlobalClassifier
from dcap.objectives import LossWeights, episode_objective
from dcap.pipeline import (EvalReport, TrainingDivergence, ablate, build_meta_model, cross_domain_eval,
                           episode_accuracy, eval_episodes, evaluate, meta_finetune, model_from_checkpoint, pretrain,
                           report_csv)
from helpers import tiny_config, with_meta


@pytest.fixture(scope="module")
def ds():
    return tiny_dataset()


@pytest.fixture(scope="module")
def pre(ds):
    return pretrain(tiny_config(), ds)


def test_report_half_width_matches_direct_recomputation():
    accs = np.random.default_rng(0).random(37)
    rep = EvalReport.from_accuracies(accs, "x")
    assert rep.mean == pytest.approx(statistics.fmean(accs))
    assert rep.ci95 == pytest.approx(1.96 * statistics.stdev(accs) / math.sqrt(37))
    assert rep.line() == f"x: {100 * rep.mean:.2f} +- {100 * rep.ci95:.2f} (37 tasks)"
    one = EvalReport.from_accuracies([0.4])
    assert (one.mean, one.ci95) == (0.4, 0.0)
    with pytest.raises(ValueError):
        EvalReport.from_accuracies([])


def test_all_correct_episodes(ds):
    eps = consistent_eval_set(ds, "meta-test", 3, 1, 5, seed=0, count=30)
    accs = []
    for ep in eps:
        rows = np.concatenate([ep.support_labels, ep.query_labels])
        accs.append(episode_accuracy(np.eye(3)[rows] * 2.0, ep))
    rep = EvalReport.from_accuracies(accs)
    assert (rep.mean, rep.ci95) == (1.0, 0.0)


def test_random_embeddings_are_at_chance():
    big = tiny_dataset(classes_per_split=(6, 3, 8), per_class=20)
    eps = consistent_eval_set(big, "meta-test", 5, 1, 15, seed=3, count=2000)
    rng = np.random.default_rng(0)
    accs = [episode_accuracy(rng.normal(size=(80, 16)), ep) for ep in eps]
    sigma = math.sqrt(0.2 * 0.8 / (75 * len(eps)))
    assert abs(np.mean(accs) - 0.2) < 3 * sigma


def test_pretrain_history_and_best_selection(pre):
    hist = pre.history
    assert [h["epoch"] for h in hist] == [1, 2]
    assert all(math.isfinite(h["loss"]) and 0 <= h["holdout_acc"] <= 1 for h in hist)
    assert pre.stage == "pretrained" and "classifier.W" in pre.tensors


def test_single_class_pretrain_reaches_full_holdout_accuracy():
    rng = np.random.default_rng(0)
    images = rng.integers(0, 256, (40, 16, 16, 1), dtype=np.uint8)
    one = Dataset(images, np.zeros(40), ("only",), ("meta-train",))
    ckpt = pretrain(tiny_config(), one)
    assert ckpt.history[-1]["holdout_acc"] == 1.0


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_divergence_aborts_with_diagnostic(ds):
    cfg = tiny_config()
    cfg = replace(cfg, pretrain=replace(cfg.pretrain, lr=1e12))
    with pytest.raises(TrainingDivergence, match="pre-training"):
        pretrain(cfg, ds)


def test_meta_finetune_keeps_classifier_bitwise(ds, pre):
    final = meta_finetune(tiny_config(val_tasks=0), ds, pre)  # no model selection: last weights are kept
    for key in ("classifier.W", "classifier.b"):
        assert final.tensors[key].tobytes() == pre.tensors[key].tobytes()
    assert any(not np.array_equal(final.tensors[k], pre.tensors[k]) for k in pre.tensors if k.startswith("theta."))
    assert final.stage == "metatrained" and any(k.startswith("phi.") for k in final.tensors)
    assert [h["step"] for h in final.history] == [0, 2, 4]


def test_meta_finetune_is_deterministic(ds, pre):
    a = meta_finetune(tiny_config(), ds, pre)
    b = meta_finetune(tiny_config(), ds, pre)
    assert a.history == b.history
    assert a.to_bytes() == b.to_bytes()


def test_checkpoint_shape_mismatch(ds, pre):
    cfg = tiny_config()
    cfg = replace(cfg, backbone=BackboneConfig(filters=(8, 8, 8, 16), input_size=16))
    with pytest.raises(nk.ShapeError, match="does not match"):
        meta_finetune(cfg, ds, pre)


def test_gamma_zero_gradients_ignore_classifier(ds, pre):
    cfg = tiny_config()
    model = build_meta_model(cfg, ds, pre)
    ep = sample_episode(ds, "meta-train", 3, 1, 3, rng_stream(0, 1, 0))
    images = ds.as_float(np.concatenate([ep.support, ep.query]))
    grads = []
    for gc in (model.classifier, GlobalClassifier.build(8, 6, 99).freeze()):
        params = model.trainable()
        for p in params:
            p.grad = None
        terms = model.episode_terms(images, ep, "eval")
        nk.backward(episode_objective(terms, gc, LossWeights(0.1, 0.0)).total, params)
        grads.append([p.grad.copy() for p in params])
    assert all(np.array_equal(a, b) for a, b in zip(*grads))


def test_gap_pooling_run_has_no_regressor(ds, pre):
    final = meta_finetune(tiny_config(pooling="gap"), ds, pre)
    assert not any(k.startswith("phi.") for k in final.tensors)
    assert evaluate(final, ds, eval_episodes(tiny_config(pooling="gap"), ds)).variant == "DC-GAP"


def test_milestones_in_tasks_and_steps():
    from dcap.pipeline import _schedule_position
    cfg = tiny_config(tasks_per_batch=4)
    assert _schedule_position(10, cfg) == 40
    assert _schedule_position(10, with_meta(cfg, milestone_unit="steps")) == 10


def test_ablation_grid(ds):
    cfg = tiny_config(iterations=2)
    cfg = replace(cfg, pretrain=PretrainConfig(mode="dc", epochs=1, milestones=(), batch_size=64))
    result = ablate(cfg, ds)
    assert list(result.reports) == ["Zero-GAP", "Zero-AttPool", "GAP-GAP", "GAP-AttPool", "DC-GAP", "DC-AttPool"]
    assert result.manifest == manifest(eval_episodes(cfg, ds))
    assert sorted(result.pretrained) == ["dc", "gap"]
    rows = result.csv().splitlines()
    assert rows[0] == "variant,mean,ci,count,seed" and len(rows) == 7
    assert rows[1].startswith("Zero-GAP,") and rows[1].endswith(",20,0")
    assert len(result.grid().splitlines()) == 4
    again = ablate(cfg, ds, pretrained=result.pretrained)
    assert again.csv() == result.csv()


def test_report_csv_format():
    rep = EvalReport.from_accuracies([0.5, 1.0], "DC-AttPool")
    assert report_csv([rep], 3).splitlines()[1] == f"DC-AttPool,0.750000,{rep.ci95:.6f},2,3"


def test_cross_domain_same_dataset_equals_evaluate(ds, pre):
    cfg = tiny_config()
    rep = cross_domain_eval(pre, ds, ds, config=cfg, pooling="gap")
    direct = evaluate(pre, ds, eval_episodes(cfg, ds), pooling="gap", config=cfg)
    assert np.array_equal(rep.accuracies, direct.accuracies)


def test_cross_domain_rejects_class_overlap(ds, pre):
    other = tiny_dataset(seed=5)
    names = list(other.class_names)
    names[-1] = ds.class_names[0]  # a meta-test class named like a training class
    target = Dataset(other.images, other.labels, tuple(names), other.class_splits, name="clash")
    with pytest.raises(ValueError, match="shares classes"):
        cross_domain_eval(pre, target, ds, config=tiny_config(), pooling="gap")


def _attention_entropy(ckpt, config, dataset):
    model = model_from_checkpoint(ckpt, config)
    maps = model.backbone.feature_maps(dataset.as_float(dataset.split_indices("meta-val")))
    _, alpha = model.attention(maps)
    return float(-(alpha * np.log(alpha)).sum(-1).mean())


def test_entropy_weight_raises_attention_entropy():
    # paired runs from a shared pre-training; 2 x 2 maps so attention has room to vary
    ds32 = tiny_dataset(size=32)
    wins = 0
    for seed in range(3):
        cfg = replace(tiny_config(seed=seed, iterations=20, val_tasks=0),
                      backbone=BackboneConfig(filters=(8, 8, 8, 8), input_size=32))
        pre = pretrain(cfg, ds32)
        ents = [_attention_entropy(meta_finetune(with_meta(cfg, beta=b), ds32, pre), with_meta(cfg, beta=b), ds32)
                for b in (0.0, 0.1)]
        wins += ents[0] < ents[1]
    assert wins >= 2


@pytest.mark.slow
def test_dc_pretrain_beats_chance_on_desk_data():
    from dcap.config import RunConfig
    from dcap.synth import synth_generate
    base = RunConfig()
    data = synth_generate(base.data)
    chance = 1 / data.num_base_classes
    above = 0
    for seed in range(5):
        cfg = replace(base, run=replace(base.run, seed=seed), pretrain=replace(base.pretrain, epochs=5, milestones=()))
        above += pretrain(cfg, data).history[-1]["holdout_acc"] > chance
    assert above == 5
