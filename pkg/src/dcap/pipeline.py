"""Two-stage training, evaluation with confidence intervals, ablation and cross-domain runs."""
from __future__ import annotations

import csv
import io
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import numkit as nk
from .backbone import Backbone
from .checkpoint import Checkpoint
from .config import RunConfig
from .episodes import (STREAM_BATCH, STREAM_TRAIN, Dataset, Episode, consistent_eval_set, horizontal_split, manifest,
                       rng_stream, sample_episode)
from .heads import AttentionRegressor, GlobalClassifier
from .model import FewShotModel
from .objectives import LossWeights, episode_objective, pretrain_loss_dc, pretrain_loss_gap

STREAM_FLIP = 5
PRETRAIN_MODES = ("gap", "dc")
ABLATION_ROWS = (("none", "Zero"), ("gap", "GAP"), ("dc", "DC"))
ABLATION_COLS = (("gap", "GAP"), ("attpool", "AttPool"))
CI_Z = 1.96


class TrainingDivergence(RuntimeError):
    pass


def _log(verbose: bool, msg: str) -> None:
    if verbose:
        print(msg, flush=True)


def _flip_some(images: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    mask = rng.random(len(images)) < 0.5
    if mask.any():
        images = images.copy()
        images[mask] = nk.ops.hflip(images[mask])
    return images


def _check_finite(value: float, where: str) -> None:
    if not np.isfinite(value):
        raise TrainingDivergence(f"non-finite loss ({value}) during {where}; "
                                 "lower the learning rate or enable normalize_by_r")


# ---------------------------------------------------------------- evaluation

@dataclass
class EvalReport:
    accuracies: np.ndarray
    mean: float
    ci95: float
    count: int
    variant: str = ""

    @classmethod
    def from_accuracies(cls, accuracies, variant: str = "") -> "EvalReport":
        acc = np.asarray(accuracies, dtype=np.float64)
        n = len(acc)
        if n == 0:
            raise ValueError("no episodes to report")
        sd = float(acc.std(ddof=1)) if n > 1 else 0.0
        return cls(acc, float(acc.mean()), CI_Z * sd / np.sqrt(n), n, variant)

    def line(self) -> str:
        return f"{self.variant or 'model'}: {100 * self.mean:.2f} +- {100 * self.ci95:.2f} ({self.count} tasks)"


def episode_accuracy(embeddings: np.ndarray, episode: Episode) -> float:
    """Nearest-centroid accuracy on one episode from precomputed embeddings.

    ``embeddings`` rows follow ``episode.support`` then ``episode.query``.
    """
    ns = len(episode.support)
    sup, qry = embeddings[:ns].astype(np.float64), embeddings[ns:].astype(np.float64)
    onehot = (episode.support_labels[None, :] == np.arange(episode.way)[:, None]).astype(np.float64)
    cents = (onehot @ sup) / onehot.sum(axis=1, keepdims=True)
    norms = np.linalg.norm(cents, axis=1, keepdims=True)
    cents = cents / np.where(norms == 0, 1.0, norms)
    pred = np.argmax(qry @ cents.T, axis=1)
    return float(np.mean(pred == episode.query_labels))


def evaluate_model(model: FewShotModel, dataset: Dataset, episodes: list[Episode], variant: str = "") -> EvalReport:
    """Mean accuracy and 95% half-width over ``episodes`` (no parameter updates)."""
    used = np.unique(np.concatenate([np.concatenate([e.support, e.query]) for e in episodes]))
    emb = model.embeddings(dataset, used)
    pos = np.full(len(dataset), -1, dtype=np.int64)
    pos[used] = np.arange(len(used))
    accs = [episode_accuracy(emb[pos[np.concatenate([e.support, e.query])]], e) for e in episodes]
    return EvalReport.from_accuracies(accs, variant)


def model_from_checkpoint(checkpoint: Checkpoint, config: RunConfig | None = None,
                          pooling: str | None = None) -> FewShotModel:
    """Rebuild a model; ``pooling`` overrides the stored one (``gap`` gives the no-finetune protocol)."""
    config = config or config_from_dict(checkpoint.config)
    pooling = pooling or config.run.pooling
    backbone = Backbone.build(config.backbone, config.run.seed)
    w = checkpoint.tensors.get("classifier.W")
    classifier = GlobalClassifier.build(config.backbone.depth, w.shape[1], config.run.seed) if w is not None else None
    has_phi = any(k.startswith("phi.") for k in checkpoint.tensors)
    regressor = AttentionRegressor.build(config.backbone.depth, config.run.seed) if has_phi else None
    if pooling == "attpool" and regressor is None:
        raise ValueError(f"{checkpoint.stage} checkpoint has no attention regressor; evaluate it with pooling=gap")
    model = FewShotModel(backbone, classifier, regressor, pooling)
    model.load_tensors(checkpoint.tensors, strict=True)
    return model


def evaluate(checkpoint: Checkpoint, dataset: Dataset, episodes: list[Episode], pooling: str | None = None,
             variant: str | None = None, config: RunConfig | None = None) -> EvalReport:
    model = model_from_checkpoint(checkpoint, config, pooling)
    if variant is None:
        cfg = config or config_from_dict(checkpoint.config)
        variant = cfg.variant if pooling in (None, cfg.run.pooling) else f"{cfg.variant}[{pooling}]"
    return evaluate_model(model, dataset, episodes, variant)


def eval_episodes(config: RunConfig, dataset: Dataset, split: str = "meta-test") -> list[Episode]:
    e = config.eval
    return consistent_eval_set(dataset, split, e.way, e.shot, e.queries, seed=e.seed, count=e.tasks)


def config_from_dict(d: dict) -> RunConfig:
    from .config import _set_values
    values = {s: {k: ",".join(str(x) for x in v) if isinstance(v, list) else str(v) for k, v in items.items()}
              for s, items in d.items()}
    return _set_values(RunConfig(), values)


# ---------------------------------------------------------------- pre-training

def pretrain(config: RunConfig, dataset: Dataset, verbose: bool = False) -> Checkpoint:
    """Base-class classification on the fit part of a horizontal split of meta-train.

    Returns the checkpoint with the best holdout top-1 accuracy.
    """
    pc = config.pretrain
    if pc.mode not in PRETRAIN_MODES:
        raise ValueError(f"pretrain mode must be one of {PRETRAIN_MODES}, got {pc.mode!r}")
    seed = config.run.seed
    n_base = dataset.num_base_classes
    if n_base == 0:
        raise ValueError("dataset has no meta-train classes")
    parts = horizontal_split(dataset, pc.holdout_rate, seed)
    fit, hold = parts["fit"], parts["holdout"]
    backbone = Backbone.build(config.backbone, seed)
    gc = GlobalClassifier.build(config.backbone.depth, n_base, seed)
    model = FewShotModel(backbone, gc, None, "gap")
    opt = nk.SGD([nk.ParamGroup(model.trainable(), pc.lr)], momentum=config.optim.momentum,
                 nesterov=config.optim.nesterov, weight_decay=config.optim.weight_decay)
    hold_labels = dataset.base_index(dataset.labels[hold])
    history, best, best_acc = [], None, -1.0
    for epoch in range(pc.epochs):
        opt.set_lr_scale(nk.multistep_factor(epoch, pc.milestones, config.optim.lr_decay))
        rng = rng_stream(seed, STREAM_BATCH, epoch)
        order = rng.permutation(fit)
        losses = []
        t0 = time.perf_counter()
        for i in range(0, len(order), pc.batch_size):
            idx = order[i:i + pc.batch_size]
            images = dataset.as_float(idx)
            if pc.flip:
                images = _flip_some(images, rng)
            labels = dataset.base_index(dataset.labels[idx])
            opt.zero_grad()
            maps = backbone.embed(images, "train")
            if pc.mode == "dc":
                loss = pretrain_loss_dc(maps, labels, gc, pc.smoothing, pc.normalize_by_r)
            else:
                loss = pretrain_loss_gap(maps, labels, gc, pc.smoothing)
            value = float(loss.data)
            _check_finite(value, f"pre-training epoch {epoch}")
            nk.backward(loss, opt.params)
            opt.step()
            losses.append(value)
        with nk.no_grad():
            logits = gc.logits(nk.Tensor(model.embeddings(dataset, hold))).data
        acc = float(np.mean(np.argmax(logits, axis=1) == hold_labels))
        history.append({"epoch": epoch + 1, "loss": float(np.mean(losses)), "holdout_acc": acc})
        _log(verbose, f"pretrain[{pc.mode}] epoch {epoch + 1}/{pc.epochs} loss {np.mean(losses):.4f} "
                      f"holdout {acc:.4f} ({time.perf_counter() - t0:.1f}s)")
        if acc > best_acc:
            best_acc, best = acc, model.snapshot()
    model.load_tensors(best)
    return Checkpoint("pretrained", model.named_tensors(), config.to_dict(), history,
                      {"seed": seed, "epochs": pc.epochs})


# ---------------------------------------------------------------- meta-finetuning

def build_meta_model(config: RunConfig, dataset: Dataset, checkpoint: Checkpoint | None) -> FewShotModel:
    seed = config.run.seed
    backbone = Backbone.build(config.backbone, seed)
    n_base = dataset.num_base_classes
    gc = GlobalClassifier.build(config.backbone.depth, n_base, seed)
    regressor = AttentionRegressor.build(config.backbone.depth, seed) if config.run.pooling == "attpool" else None
    model = FewShotModel(backbone, gc, regressor, config.run.pooling)
    if checkpoint is not None:
        tensors = {k: v for k, v in checkpoint.tensors.items() if not k.startswith("phi.")}
        current = model.named_tensors()
        for name, arr in tensors.items():
            if name in current and current[name].shape != arr.shape:
                raise nk.ShapeError("meta_finetune", f"checkpoint tensor {name} does not match the backbone",
                                    arr.shape, current[name].shape)
        model.load_tensors(tensors, strict=False)
        missing = [k for k in current if not k.startswith("phi.") and k not in tensors]
        if missing:
            raise nk.ShapeError("meta_finetune", f"checkpoint lacks tensors {missing[:3]}")
    gc.freeze()
    return model


def _schedule_position(step: int, config: RunConfig) -> int:
    mc = config.meta
    return step * mc.tasks_per_batch if mc.milestone_unit == "tasks" else step


def meta_finetune(config: RunConfig, dataset: Dataset, checkpoint: Checkpoint | None = None,
                  verbose: bool = False, val_episodes: list[Episode] | None = None) -> Checkpoint:
    """Episodic optimization of backbone (and regressor) with the classifier frozen.

    Each optimizer step averages the objective over ``tasks_per_batch``
    episodes. The returned checkpoint is the best one on meta-validation.
    """
    mc, seed = config.meta, config.run.seed
    model = build_meta_model(config, dataset, checkpoint)
    groups = [nk.ParamGroup(model.backbone.parameters(), mc.lr_backbone)]
    if model.pooling == "attpool":
        groups.append(nk.ParamGroup(model.regressor.parameters(), mc.lr_regressor))
    opt = nk.SGD(groups, momentum=config.optim.momentum, nesterov=config.optim.nesterov,
                 weight_decay=config.optim.weight_decay)
    weights = LossWeights(mc.beta, mc.gamma)
    if val_episodes is None and mc.val_tasks > 0:
        val_episodes = consistent_eval_set(dataset, "meta-val", mc.way, mc.shot, mc.queries,
                                           seed=config.eval.seed + 1, count=mc.val_tasks)
    history = []

    def validate(step: int, train_stats: dict) -> None:
        nonlocal best, best_acc
        row = {"step": step, **train_stats}
        if val_episodes:
            rep = evaluate_model(model, dataset, val_episodes)
            row["val_acc"] = rep.mean
            if rep.mean > best_acc:
                best_acc, best = rep.mean, model.snapshot()
        else:
            best = model.snapshot()
        history.append(row)
        _log(verbose, f"meta[{config.variant}] step {step}/{mc.iterations} "
                      + " ".join(f"{k} {v:.4f}" for k, v in row.items() if k != "step"))

    best, best_acc = None, -1.0
    validate(0, {})
    acc_stats = {"loss": [], "meta": [], "entropy": [], "global_ce": [], "train_acc": []}
    scale = 1.0 / mc.tasks_per_batch
    for step in range(mc.iterations):
        opt.set_lr_scale(nk.multistep_factor(_schedule_position(step, config), mc.milestones,
                                             config.optim.lr_decay))
        opt.zero_grad()
        for t in range(mc.tasks_per_batch):
            task = step * mc.tasks_per_batch + t
            ep = sample_episode(dataset, "meta-train", mc.way, mc.shot, mc.queries,
                                rng_stream(seed, STREAM_TRAIN, task), task_id=task)
            images = dataset.as_float(np.concatenate([ep.support, ep.query]))
            if mc.flip:
                images = _flip_some(images, rng_stream(seed, STREAM_FLIP, task))
            terms = model.episode_terms(images, ep, "train")
            obj = episode_objective(terms, model.classifier, weights, mc.normalize_by_r)
            value = float(obj.total.data)
            _check_finite(value, f"meta-finetuning step {step}")
            nk.backward(nk.scale(obj.total, scale), opt.params)
            acc_stats["loss"].append(value)
            acc_stats["meta"].append(obj.meta)
            acc_stats["entropy"].append(obj.entropy)
            acc_stats["global_ce"].append(obj.global_ce)
            acc_stats["train_acc"].append(float(np.mean(np.argmax(terms.query_logits.data, 1) == ep.query_labels)))
        opt.step()
        done = step + 1
        if done % mc.val_every == 0 or done == mc.iterations:
            validate(done, {k: float(np.mean(v)) for k, v in acc_stats.items()})
            acc_stats = {k: [] for k in acc_stats}
    model.load_tensors(best)
    return Checkpoint("metatrained", model.named_tensors(), config.to_dict(), history,
                      {"seed": seed, "tasks_drawn": mc.iterations * mc.tasks_per_batch})


# ---------------------------------------------------------------- full runs

@dataclass
class RunResult:
    config: RunConfig
    pretrained: Checkpoint | None
    final: Checkpoint
    report: EvalReport
    seconds: float


def train_and_evaluate(config: RunConfig, dataset: Dataset, episodes: list[Episode] | None = None,
                       pretrained: Checkpoint | None = None, verbose: bool = False) -> RunResult:
    """Pre-train (unless ``pretrain.mode == none`` or ``pretrained`` is given), meta-finetune, evaluate."""
    t0 = time.perf_counter()
    if pretrained is None and config.pretrain.mode != "none":
        pretrained = pretrain(config, dataset, verbose)
    final = meta_finetune(config, dataset, pretrained, verbose)
    episodes = episodes if episodes is not None else eval_episodes(config, dataset)
    report = evaluate(final, dataset, episodes, config=config)
    return RunResult(config, pretrained, final, report, time.perf_counter() - t0)


@dataclass
class AblationResult:
    reports: dict                 # variant name -> EvalReport
    manifest: str                 # eval episodes shared by every cell
    seed: int
    pretrained: dict = field(default_factory=dict)   # pretrain mode -> Checkpoint
    finals: dict = field(default_factory=dict)       # variant name -> meta-finetuned Checkpoint
    seconds: dict = field(default_factory=dict)      # variant name -> meta-finetune + eval wall time

    def csv(self) -> str:
        return report_csv(self.reports.values(), self.seed)

    def grid(self) -> str:
        lines = [f"{'pretrain':<10}{'GAP':>18}{'AttPool':>18}"]
        for mode, row in ABLATION_ROWS:
            cells = []
            for _, col in ABLATION_COLS:
                r = self.reports.get(f"{row}-{col}")
                cells.append(f"{100 * r.mean:.2f} +- {100 * r.ci95:.2f}" if r else "-")
            lines.append(f"{row:<10}" + "".join(f"{c:>18}" for c in cells))
        return "\n".join(lines) + "\n"


def report_csv(reports, seed: int) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["variant", "mean", "ci", "count", "seed"])
    for r in reports:
        writer.writerow([r.variant, f"{r.mean:.6f}", f"{r.ci95:.6f}", r.count, seed])
    return buf.getvalue()


def ablation_configs(config: RunConfig) -> list[RunConfig]:
    """The six cells: every pretrain mode crossed with both poolings, all else shared."""
    from dataclasses import replace
    return [replace(config, pretrain=replace(config.pretrain, mode=mode), run=replace(config.run, pooling=pool))
            for mode, _ in ABLATION_ROWS for pool, _ in ABLATION_COLS]


def ablate(config: RunConfig, dataset: Dataset, verbose: bool = False,
           pretrained: dict | None = None) -> AblationResult:
    """Run the 3 x 2 grid with one shared eval set; each pretrain mode is trained once."""
    episodes = eval_episodes(config, dataset)
    val_eps = None
    if config.meta.val_tasks > 0:
        mc = config.meta
        val_eps = consistent_eval_set(dataset, "meta-val", mc.way, mc.shot, mc.queries,
                                      seed=config.eval.seed + 1, count=mc.val_tasks)
    pretrained = dict(pretrained or {})
    reports, finals, seconds = {}, {}, {}
    for cell in ablation_configs(config):
        mode = cell.pretrain.mode
        if mode != "none" and mode not in pretrained:
            pretrained[mode] = pretrain(cell, dataset, verbose)
        t0 = time.perf_counter()
        final = meta_finetune(cell, dataset, pretrained.get(mode), verbose, val_episodes=val_eps)
        rep = evaluate(final, dataset, episodes, config=cell)
        reports[cell.variant], finals[cell.variant] = rep, final
        seconds[cell.variant] = time.perf_counter() - t0
        _log(verbose, rep.line())
    return AblationResult(reports, manifest(episodes), config.run.seed, pretrained, finals, seconds)


def cross_domain_eval(checkpoint: Checkpoint, target: Dataset, source: Dataset | None = None,
                      config: RunConfig | None = None, pooling: str | None = None) -> EvalReport:
    """Evaluate on the target's meta-test consistent set without any update."""
    config = config or config_from_dict(checkpoint.config)
    if source is not None and source is not target:
        seen = {source.class_names[c] for c in source.classes("meta-train")}
        shared = seen & {target.class_names[c] for c in target.classes("meta-test")}
        if shared:
            raise ValueError(f"target meta-test shares classes with the training set: {sorted(shared)[:3]}")
    episodes = eval_episodes(config, target)
    return evaluate(checkpoint, target, episodes, pooling=pooling, config=config,
                    variant=f"{config.variant}->{target.name}")


def write_text(path, text: str) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")
    return path
