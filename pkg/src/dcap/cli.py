"""``dcap`` command line.

Exit status: 0 success, 1 runtime failure, 2 bad config or arguments,
3 selftest invariant violation.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .config import ConfigParseError, RunConfig, apply_overrides, load_config, render_config

VERBS = ("synth-data", "pretrain", "metatrain", "eval", "ablate", "xdomain", "analyze", "selftest")
EXIT_OK, EXIT_RUNTIME, EXIT_CONFIG, EXIT_INVARIANT = 0, 1, 2, 3


class UsageError(ValueError):
    pass


def code_version() -> str:
    """Package version plus a digest of the package sources."""
    h = hashlib.sha256()
    root = Path(__file__).parent
    for path in sorted(root.rglob("*.py")):
        h.update(path.relative_to(root).as_posix().encode())
        h.update(path.read_bytes())
    return f"{__version__}+{h.hexdigest()[:12]}"


def _digest(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="dcap", description="Few-shot learning with dense pre-training and attentive pooling.")
    p.add_argument("verb", choices=VERBS)
    p.add_argument("--config", help="sectioned key = value file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config value (repeatable, applied after --config)")
    p.add_argument("--seed", type=int, help="shorthand for --set run.seed=N")
    p.add_argument("--out", help="output directory (default: run.output_dir)")
    p.add_argument("--data", help="image tree root/<split>/<class>/*.pgm; default renders the synthetic set")
    p.add_argument("--checkpoint", help="input checkpoint for metatrain/eval/xdomain/analyze")
    p.add_argument("--pooling", choices=("gap", "attpool"), help="eval: override pooling (gap = no-finetune protocol)")
    p.add_argument("--target", help="xdomain: target image tree")
    p.add_argument("--target-vocabulary", default="blobs", help="xdomain: synthetic target vocabulary")
    p.add_argument("--images", type=int, default=8, help="analyze: images to export")
    p.add_argument("-q", "--quiet", action="store_true")
    return p


def resolve_config(args) -> RunConfig:
    config = load_config(args.config) if args.config else RunConfig()
    overrides = list(args.overrides)
    if args.seed is not None:
        overrides.append(f"run.seed={args.seed}")
    return apply_overrides(config, overrides)


def _dataset(args, config: RunConfig):
    from .imageio import load_image_dir
    from .synth import synth_generate
    ds = load_image_dir(args.data) if args.data else synth_generate(config.data)
    bc = config.backbone
    if ds.image_size != bc.input_size or ds.channels != bc.channels_in:
        raise UsageError(f"dataset images are {ds.image_size}px x {ds.channels}ch, backbone expects "
                         f"{bc.input_size}px x {bc.channels_in}ch")
    return ds


def _need_checkpoint(args):
    from .checkpoint import Checkpoint
    if not args.checkpoint:
        raise UsageError(f"{args.verb} needs --checkpoint")
    return Checkpoint.load(args.checkpoint)


def _history_csv(history: list) -> str:
    keys = sorted({k for row in history for k in row}, key=lambda k: (k not in ("epoch", "step"), k))
    lines = [",".join(keys)]
    for row in history:
        lines.append(",".join("" if k not in row else f"{row[k]:.6f}" if isinstance(row[k], float) else str(row[k])
                              for k in keys))
    return "\n".join(lines) + "\n"


def _accuracies_csv(report) -> str:
    return "task,accuracy\n" + "".join(f"{i},{a:.6f}\n" for i, a in enumerate(report.accuracies))


def execute(args, config: RunConfig, out: Path) -> tuple[list[Path], dict]:
    """Run one verb; returns written files and metrics for the manifest."""
    from . import pipeline as P
    verbose = not args.quiet
    written: list[Path] = []
    metrics: dict = {}

    def put(name: str, text: str) -> None:
        written.append(P.write_text(out / name, text))

    if args.verb == "selftest":
        from .selftest import run_selftest
        results = run_selftest(verbose)
        put("selftest.txt", "".join(f"PASS {r.name}: {r.detail}\n" for r in results))
        metrics["checks"] = len(results)
    elif args.verb == "synth-data":
        from .episodes import SPLITS
        from .imageio import export_dataset
        from .synth import synth_generate
        ds = synth_generate(config.data)
        ds.audit()
        root = export_dataset(ds, out / "data")
        written.extend(sorted(p for p in root.rglob("*") if p.is_file()))
        metrics = {s: int(len(ds.classes(s))) for s in SPLITS}
        metrics["images"] = len(ds)
    elif args.verb == "pretrain":
        ds = _dataset(args, config)
        ck = P.pretrain(config, ds, verbose)
        written.append(ck.save(out / "pretrained.ckpt"))
        put("pretrain_history.csv", _history_csv(ck.history))
        metrics["best_holdout_acc"] = max(h["holdout_acc"] for h in ck.history)
    elif args.verb == "metatrain":
        ds = _dataset(args, config)
        pre = _need_checkpoint(args) if args.checkpoint else None
        if pre is None and config.pretrain.mode != "none":
            raise UsageError("metatrain without --checkpoint requires pretrain.mode=none (Zero- variants)")
        ck = P.meta_finetune(config, ds, pre, verbose)
        written.append(ck.save(out / "metatrained.ckpt"))
        put("meta_history.csv", _history_csv(ck.history))
        metrics["best_val_acc"] = max((h.get("val_acc", 0.0) for h in ck.history), default=0.0)
    elif args.verb == "eval":
        ds = _dataset(args, config)
        ck = _need_checkpoint(args)
        episodes = P.eval_episodes(config, ds)
        rep = P.evaluate(ck, ds, episodes, pooling=args.pooling or ("gap" if ck.stage == "pretrained" else None),
                         config=config)
        from .episodes import manifest
        put("episodes.tsv", manifest(episodes))
        put("eval.csv", P.report_csv([rep], config.run.seed))
        put("eval_accuracies.csv", _accuracies_csv(rep))
        metrics = {"variant": rep.variant, "mean": rep.mean, "ci95": rep.ci95, "count": rep.count}
        if verbose:
            print(rep.line())
    elif args.verb == "ablate":
        ds = _dataset(args, config)
        res = P.ablate(config, ds, verbose)
        put("episodes.tsv", res.manifest)
        put("ablation.csv", res.csv())
        put("ablation.txt", res.grid())
        metrics = {name: {"mean": r.mean, "ci95": r.ci95} for name, r in res.reports.items()}
        if verbose:
            print(res.grid(), end="")
    elif args.verb == "xdomain":
        from dataclasses import replace
        from .imageio import load_image_dir
        from .synth import synth_generate
        ck = _need_checkpoint(args)
        source = _dataset(args, config)
        if args.target:
            target = load_image_dir(args.target)
        else:
            target = synth_generate(replace(config.data, vocabulary=args.target_vocabulary))
        rep = P.cross_domain_eval(ck, target, source, config, pooling=args.pooling)
        put("xdomain.csv", P.report_csv([rep], config.run.seed))
        put("xdomain_accuracies.csv", _accuracies_csv(rep))
        metrics = {"variant": rep.variant, "mean": rep.mean, "ci95": rep.ci95, "count": rep.count}
        if verbose:
            print(rep.line())
    elif args.verb == "analyze":
        written_a, metrics = _analyze(args, config, out)
        written.extend(written_a)
    return written, metrics


def _analyze(args, config: RunConfig, out: Path) -> tuple[list[Path], dict]:
    from . import analysis as A
    from . import pipeline as P
    ds = _dataset(args, config)
    ck = _need_checkpoint(args)
    model = P.model_from_checkpoint(ck, config, "gap")
    idx = ds.split_indices("meta-test")
    maps = model.backbone.feature_maps(ds.as_float(idx))
    metrics = {"neighbor_consistency": A.dataset_neighbor_consistency(maps),
               "norm_dispersion": A.dataset_norm_dispersion(maps)}
    written = []
    lines = ["image,neighbor_consistency,norm_mean,norm_std"]
    for i, m in zip(idx, maps):
        s = A.descriptor_norm_stats(m)
        lines.append(f"{i},{A.neighbor_consistency(m):.6f},{s['mean']:.6f},{s['std']:.6f}")
    written.append(P.write_text(out / "descriptor_stats.csv", "\n".join(lines) + "\n"))
    picks = idx[:: max(1, len(idx) // max(1, args.images))][:args.images]
    has_phi = any(k.startswith("phi.") for k in ck.tensors)
    att_model = P.model_from_checkpoint(ck, config) if has_phi else None
    for i in picks:
        fm = maps[np.searchsorted(idx, i)]
        written.append(A.write_matrix_csv(A.descriptor_cosine_matrix(fm), out / "similarity" / f"img{i:05d}.csv"))
        if att_model is not None:
            raw, alpha = att_model.attention(fm[None])
            written.extend(A.export_attention_map(ds.images[i], raw[0], alpha[0], out / "attention" / f"img{i:05d}",
                                                  fm.shape[:2]))
    return written, metrics


def write_manifest(out: Path, args, config: RunConfig, written: list[Path], metrics: dict) -> Path:
    manifest = {
        "verb": args.verb,
        "config_file": args.config,
        "overrides": list(args.overrides) + ([f"run.seed={args.seed}"] if args.seed is not None else []),
        "seeds": {"run": config.run.seed, "data": config.data.seed, "eval": config.eval.seed},
        "code_version": code_version(),
        "config": config.to_dict(),
        "metrics": metrics,
        "outputs": {p.relative_to(out).as_posix(): _digest(p) for p in written},
    }
    path = out / "run_manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=float) + "\n", encoding="utf-8")
    (out / "resolved_config.ini").write_text(render_config(config), encoding="utf-8")
    return path


def main(argv=None) -> int:
    parser = _parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_CONFIG
    try:
        config = resolve_config(args)
    except ConfigParseError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    out = Path(args.out or config.run.output_dir)
    from .objectives import InvariantViolation
    try:
        out.mkdir(parents=True, exist_ok=True)
        written, metrics = execute(args, config, out)
        write_manifest(out, args, config, written, metrics)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except InvariantViolation as exc:
        print(f"invariant violation: {exc}", file=sys.stderr)
        return EXIT_INVARIANT
    except Exception as exc:  # categorized as a runtime failure
        print(f"runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
