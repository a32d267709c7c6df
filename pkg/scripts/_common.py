"""Shared argument handling for the experiment scripts."""
import argparse
from pathlib import Path

from dcap.config import RunConfig, apply_overrides, load_config


def parser(description: str) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(description=description)
    p.add_argument("--config", help="INI file; defaults apply when omitted")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE")
    p.add_argument("--seeds", type=int, nargs="+", default=[0, 1, 2])
    p.add_argument("--out", default="runs", help="output directory")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def resolve(args) -> tuple[RunConfig, Path]:
    config = load_config(args.config) if args.config else RunConfig()
    config = apply_overrides(config, args.overrides)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return config, out
