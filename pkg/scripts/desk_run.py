"""One DC-AttPool run end to end: pre-train, meta-finetune, evaluate on 1000 meta-test tasks."""
import time
from dataclasses import replace

from _common import parser, resolve
from dcap.pipeline import report_csv, train_and_evaluate, write_text
from dcap.synth import synth_generate


def main():
    args = parser(__doc__).parse_args()
    base, out = resolve(args)
    data = synth_generate(base.data)
    reports = []
    for seed in args.seeds:
        cfg = replace(base, run=replace(base.run, seed=seed))
        t0 = time.perf_counter()
        res = train_and_evaluate(cfg, data, verbose=args.verbose)
        res.final.save(out / f"{cfg.variant}_seed{seed}.ckpt")
        reports.append(res.report)
        print(f"seed {seed}: {res.report.line()} in {(time.perf_counter() - t0) / 60:.1f} min")
        write_text(out / f"desk_seed{seed}.csv", report_csv([res.report], seed))


if __name__ == "__main__":
    main()
