"""Train on stroke glyphs, evaluate unchanged on the blob vocabulary."""
from dataclasses import replace

from _common import parser, resolve
from dcap.pipeline import cross_domain_eval, report_csv, train_and_evaluate, write_text
from dcap.synth import synth_generate


def main():
    p = parser(__doc__)
    p.add_argument("--target-vocabulary", default="blobs")
    args = p.parse_args()
    base, out = resolve(args)
    source = synth_generate(base.data)
    target = synth_generate(replace(base.data, vocabulary=args.target_vocabulary))
    for seed in args.seeds:
        cfg = replace(base, run=replace(base.run, seed=seed))
        res = train_and_evaluate(cfg, source, verbose=args.verbose)
        shifted = cross_domain_eval(res.final, target, source, cfg)
        print(f"seed {seed}: {res.report.line()} | {shifted.line()}")
        write_text(out / f"xdomain_seed{seed}.csv", report_csv([res.report, shifted], seed))


if __name__ == "__main__":
    main()
