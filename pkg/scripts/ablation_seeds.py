"""The 3 x 2 pretrain-by-pooling grid repeated over seeds, one CSV and one table per seed."""
from dataclasses import replace

from _common import parser, resolve
from dcap.pipeline import ablate, write_text
from dcap.synth import synth_generate


def main():
    args = parser(__doc__).parse_args()
    base, out = resolve(args)
    data = synth_generate(base.data)
    for seed in args.seeds:
        res = ablate(replace(base, run=replace(base.run, seed=seed)), data, verbose=args.verbose)
        write_text(out / f"ablation_seed{seed}.csv", res.csv())
        write_text(out / f"ablation_seed{seed}.txt", res.grid())
        print(f"seed {seed}\n{res.grid()}")


if __name__ == "__main__":
    main()
