"""Fast health check: gradient checks on toy episodes plus a few exact identities."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import numkit as nk
from .episodes import Dataset, check_episode, consistent_eval_set, manifest, rng_stream, sample_episode
from .heads import (AttentionMap, AttentionRegressor, GlobalClassifier, att_pool, attention_scores, centroids,
                    dense_logits, gap, nc_logits)
from .objectives import (EpisodeTerms, InvariantViolation, LossWeights, entropy_reg, meta_global_ce, meta_loss,
                         pretrain_loss_dc, pretrain_loss_gap, smooth_label, total_meta_objective)

GRAD_TOL = 1e-4


@dataclass
class CheckResult:
    name: str
    ok: bool
    detail: str


def _toy(seed: int, way: int = 2, d: int = 4, grid: int = 2, queries: int = 2, n_base: int = 3):
    rng = np.random.default_rng(seed)
    support = nk.parameter(rng.normal(size=(way, grid, grid, d)))
    query = nk.parameter(rng.normal(size=(way * queries, grid, grid, d)))
    reg = AttentionRegressor.build(d, seed)
    gc = GlobalClassifier.build(d, n_base, seed).freeze()
    base = rng.integers(0, n_base, way * queries)
    return support, query, reg, gc, base, np.arange(way), np.repeat(np.arange(way), queries)


def _p(rng, *shape):
    return nk.parameter(rng.normal(size=shape))


def primitive_cases(rng: np.random.Generator) -> dict:
    """name -> (scalar loss closure, params) exercising one primitive each (call under float64)."""
    x4 = _p(rng, 2, 4, 4, 3)
    pos = nk.parameter(rng.uniform(0.5, 2.0, size=(3, 4)))
    a, b = _p(rng, 3, 4), _p(rng, 3, 4)
    m1, m2 = _p(rng, 3, 5), _p(rng, 5, 2)
    w3, bias = _p(rng, 3, 3, 3, 2), _p(rng, 2)
    w1 = _p(rng, 1, 1, 3, 2)
    g, beta = nk.parameter(rng.uniform(0.5, 1.5, 3)), _p(rng, 3)
    lin_w, lin_b = _p(rng, 3, 2), _p(rng, 2)
    proj = rng.normal(size=(2, 2, 2, 3))
    rm, rv = rng.normal(size=3), rng.uniform(0.5, 2, 3)

    def weighted(t, target=None):
        # fixed random projection so the loss is a deterministic scalar
        target = np.random.default_rng(t.size).normal(size=t.shape) if target is None else target
        return (t * nk.Tensor(target)).sum()

    wa, wm, wc, wr = (rng.normal(size=s) for s in [(3, 4), (3, 2), (2, 4, 4, 2), (2, 2, 2, 3)])
    return {
        "add": (lambda: weighted(a + b, wa), [a, b]),
        "sub": (lambda: weighted(a - b, wa), [a, b]),
        "mul": (lambda: weighted(a * b, wa), [a, b]),
        "div": (lambda: weighted(a / pos, wa), [a, pos]),
        "scale": (lambda: weighted(nk.scale(a, -1.7), wa), [a]),
        "exp": (lambda: weighted(nk.exp(a), wa), [a]),
        "log": (lambda: weighted(nk.log(pos), wa), [pos]),
        "sqrt": (lambda: weighted(nk.sqrt(pos), wa), [pos]),
        "relu": (lambda: weighted(nk.relu(a), wa), [a]),
        "sigmoid": (lambda: weighted(nk.sigmoid(a), wa), [a]),
        "log_softmax": (lambda: weighted(nk.log_softmax(a, axis=-1), wa), [a]),
        "log_softmax_axis0": (lambda: weighted(nk.log_softmax(a, axis=0), wa), [a]),
        "sum_mean": (lambda: weighted(a.sum(axis=1, keepdims=True) * a.mean(axis=0), wa), [a]),
        "reshape_transpose": (lambda: weighted(a.reshape(4, 3).transpose(1, 0), wa), [a]),
        "getitem": (lambda: (a[np.array([0, 2, 2]), np.array([1, 3, 3])] * nk.Tensor([1.0, 2.0, -1.0])).sum(),
                    [a]),
        "concat": (lambda: weighted(nk.concat([a, b], axis=-1)), [a, b]),
        "broadcast_to": (lambda: weighted(nk.ops.broadcast_to(a.reshape(3, 1, 4), (3, 2, 4))), [a]),
        "matmul": (lambda: weighted(m1 @ m2, wm), [m1, m2]),
        "linear": (lambda: weighted(nk.linear(a.transpose(1, 0), lin_w, lin_b)), [a, lin_w, lin_b]),
        "conv3x3": (lambda: weighted(nk.conv2d(x4, w3, bias, pad=1), wc), [x4, w3, bias]),
        "conv3x3_stride2": (lambda: weighted(nk.conv2d(x4, w3, bias, stride=2, pad=1)), [x4, w3, bias]),
        "conv1x1": (lambda: weighted(nk.conv2d(x4, w1), wc), [x4, w1]),
        "batch_norm_train": (lambda: weighted(nk.batch_norm(x4, g, beta, rm.copy(), rv.copy(), training=True)),
                             [x4, g, beta]),
        "batch_norm_eval": (lambda: weighted(nk.batch_norm(x4, g, beta, rm, rv, training=False)), [x4, g, beta]),
        "max_pool": (lambda: weighted(nk.max_pool2d(x4), wr), [x4]),
        "gap": (lambda: weighted(nk.global_avg_pool(x4)), [x4]),
        "gap_after_pool": (lambda: (nk.global_avg_pool(nk.max_pool2d(nk.relu(x4))) * nk.Tensor(proj[0, 0, 0])).sum(),
                           [x4]),
    }


def primitive_checks(seeds=range(5)) -> list[CheckResult]:
    results = []
    with nk.precision(np.float64):
        for seed in seeds:
            for name, (fn, params) in primitive_cases(np.random.default_rng(seed)).items():
                rep = nk.grad_check_report(fn, params, eps=1e-4, seed=seed)
                results.append(CheckResult(f"grad:{name}:seed{seed}", rep.max_error < GRAD_TOL,
                                           f"max rel err {rep.max_error:.2e} over {rep.checked} coords"))
    return results


def gradient_checks(seeds=range(5)) -> list[CheckResult]:
    """Central-difference checks of every loss term on 2-way, d=4, r=4 toy episodes."""
    results = []
    with nk.precision(np.float64):
        for seed in seeds:
            support, query, reg, gc, base, s_lab, q_lab = _toy(seed)
            params = [support, query] + reg.parameters()
            w_gc = GlobalClassifier(nk.parameter(gc.weight.data.copy()), nk.parameter(gc.bias.data.copy()))

            def episode_terms():
                s_att = attention_scores(support, reg)
                q_att = attention_scores(query, reg)
                cents = centroids(att_pool(support, s_att), s_lab, 2)
                return EpisodeTerms(nc_logits(att_pool(query, q_att), cents), q_lab, query, base,
                                    q_att.alpha, q_att.raw)

            cases = {
                "pretrain_gap": (lambda: pretrain_loss_gap(query, base, w_gc), [query, w_gc.weight, w_gc.bias]),
                "pretrain_dc": (lambda: pretrain_loss_dc(query, base, w_gc), [query, w_gc.weight, w_gc.bias]),
                "meta_loss": (lambda: meta_loss(episode_terms().query_logits, q_lab), params),
                "entropy": (lambda: entropy_reg(attention_scores(query, reg).alpha), [query] + reg.parameters()),
                "global_ce": (lambda: meta_global_ce(query, gc, base, attention_scores(query, reg).raw),
                              [query] + reg.parameters()),
                "total": (lambda: total_meta_objective([episode_terms()], gc, LossWeights()), params),
            }
            for name, (fn, ps) in cases.items():
                rep = nk.grad_check_report(fn, ps, eps=1e-4, seed=seed)
                results.append(CheckResult(f"grad:{name}:seed{seed}", rep.max_error < GRAD_TOL,
                                           f"max rel err {rep.max_error:.2e} over {rep.checked} coords"))
    return results


def identity_checks(seed: int = 0) -> list[CheckResult]:
    rng = np.random.default_rng(seed)
    out = []
    with nk.precision(np.float64), nk.no_grad():
        maps = nk.Tensor(rng.normal(size=(3, 2, 2, 4)))
        r = 4
        uniform = nk.Tensor(np.full((3, r), 1.0 / r))
        diff = np.abs(att_pool(maps, AttentionMap(uniform, uniform)).data - gap(maps).data).max()
        out.append(CheckResult("attpool_uniform_is_gap", diff < 1e-6, f"max diff {diff:.1e}"))
        gc = GlobalClassifier.build(4, 5, seed)
        dense = dense_logits(maps, gc).data.mean(axis=1)
        diff = np.abs(dense - gc.logits(gap(maps)).data).max()
        out.append(CheckResult("dense_mean_is_gap_logits", diff < 1e-6, f"max diff {diff:.1e}"))
        one_hot = nk.Tensor(np.eye(r)[[0, 1, 2]])
        lo, hi = float(entropy_reg(uniform).data), float(entropy_reg(one_hot).data)
        ok = abs(lo + np.log(r)) < 1e-6 and abs(hi) < 1e-12
        out.append(CheckResult("entropy_extremes", ok, f"uniform {lo:.6f}, one-hot {hi:.6f}"))
        s = smooth_label(2, 5, 0.1)
        out.append(CheckResult("smooth_label_sums_to_one", abs(s.sum() - 1) < 1e-12, f"sum {s.sum():.12f}"))
    return out


def episode_checks(count: int = 200) -> list[CheckResult]:
    images = np.zeros((10 * 20, 16, 16, 1), dtype=np.uint8)
    labels = np.repeat(np.arange(10), 20)
    ds = Dataset(images, labels, tuple(f"c{i}" for i in range(10)), ("meta-train",) * 5 + ("meta-test",) * 5)
    bad = 0
    for i in range(count):
        ep = sample_episode(ds, "meta-train", 5, 1, 15, rng_stream(0, 1, i), i)
        try:
            check_episode(ep, ds)
            bad += ep.size != 80
        except AssertionError:
            bad += 1
    a = manifest(consistent_eval_set(ds, "meta-test", 5, 1, 15, seed=3, count=50, workers=1))
    b = manifest(consistent_eval_set(ds, "meta-test", 5, 1, 15, seed=3, count=50, workers=4))
    return [CheckResult("episode_invariants", bad == 0, f"{bad} of {count} episodes violated"),
            CheckResult("eval_set_worker_independent", a == b, "manifests equal" if a == b else "manifests differ")]


def run_selftest(verbose: bool = True) -> list[CheckResult]:
    """Run all checks; raises :class:`InvariantViolation` listing any failure."""
    results = identity_checks() + episode_checks() + primitive_checks() + gradient_checks()
    if verbose:
        for r in results:
            print(f"{'PASS' if r.ok else 'FAIL'} {r.name}: {r.detail}")
    failed = [r.name for r in results if not r.ok]
    if failed:
        raise InvariantViolation(f"selftest failed: {', '.join(failed)}")
    return results
