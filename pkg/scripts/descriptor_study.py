"""Compare GAP and DC pre-training: descriptor consistency, norm dispersion and no-finetune accuracy."""
from dataclasses import replace

from _common import parser, resolve
from dcap.analysis import dataset_neighbor_consistency, dataset_norm_dispersion
from dcap.pipeline import eval_episodes, evaluate, model_from_checkpoint, pretrain, write_text
from dcap.synth import synth_generate


def main():
    args = parser(__doc__).parse_args()
    base, out = resolve(args)
    data = synth_generate(base.data)
    episodes = eval_episodes(base, data)
    idx = data.split_indices("meta-test")
    rows = ["seed,pretrain,neighbor_consistency,norm_dispersion,holdout_acc,nofinetune_mean,nofinetune_ci"]
    for seed in args.seeds:
        for mode in ("gap", "dc"):
            cfg = replace(base, run=replace(base.run, seed=seed), pretrain=replace(base.pretrain, mode=mode))
            ckpt = pretrain(cfg, data, args.verbose)
            maps = model_from_checkpoint(ckpt, pooling="gap").backbone.feature_maps(data.as_float(idx))
            rep = evaluate(ckpt, data, episodes, pooling="gap")
            row = (seed, mode, dataset_neighbor_consistency(maps), dataset_norm_dispersion(maps),
                   ckpt.history[-1]["holdout_acc"], rep.mean, rep.ci95)
            rows.append("{},{},{:.6f},{:.6f},{:.6f},{:.6f},{:.6f}".format(*row))
            print(rows[-1])
    write_text(out / "descriptor_study.csv", "\n".join(rows) + "\n")


if __name__ == "__main__":
    main()
