"""Command line entry point: ``vqlab <command> --config cfg.json --out DIR``.

Outputs are written to a temporary sibling directory that is renamed into
place only when the command succeeds. Exit status is 0 on success, 2 for
invalid arguments or configuration, 1 for failures while running.
"""

import argparse
import json
import os
import shutil
import sys
import tempfile

from .experiments import COMMANDS, load_config
from .model import ConfigError


def _parser():
    p = argparse.ArgumentParser(prog="vqlab", description="Vector-quantization experiments.")
    sub = p.add_subparsers(dest="command", required=True, metavar="COMMAND")
    for name in COMMANDS:
        c = sub.add_parser(name)
        c.add_argument("--config", help="JSON config; defaults are used for missing sections")
        c.add_argument("--out", required=True, help="output directory (must not exist unless --force)")
        c.add_argument("--seed", type=int, help="override model, training and codebook seeds")
        c.add_argument("--force", action="store_true", help="replace an existing output directory")
        c.add_argument("--quiet", action="store_true", help="no per-epoch progress on stderr")
    return p


class _UsageError(Exception):
    pass


def _check_seed(seed):
    if seed is not None and not 0 <= seed < 2**64:
        raise _UsageError("--seed must be an unsigned 64-bit integer")


def _replace_dir(tmp, out):
    old = None
    if os.path.exists(out):
        old = tempfile.mkdtemp(prefix=".old-", dir=os.path.dirname(out))
        os.rmdir(old)
        os.rename(out, old)
    os.rename(tmp, out)
    if old is not None:
        shutil.rmtree(old)


def main(argv=None):
    args = _parser().parse_args(argv)
    log = None if args.quiet else (lambda s: print(s, file=sys.stderr, flush=True))
    try:
        _check_seed(args.seed)
        exp = load_config(args.config if args.config else {}, seed=args.seed)
        out = os.path.abspath(args.out)
        if os.path.exists(out) and not args.force:
            raise _UsageError(f"{args.out} exists; pass --force to replace it")
        parent = os.path.dirname(out)
        os.makedirs(parent, exist_ok=True)
    except (ConfigError, _UsageError) as exc:
        print(f"vqlab: error: {exc}", file=sys.stderr)
        return 2

    tmp = tempfile.mkdtemp(prefix=f".{os.path.basename(out)}.tmp-", dir=parent)
    try:
        with open(os.path.join(tmp, "config.json"), "w") as f:
            json.dump(exp.to_dict(), f, indent=2, sort_keys=True)
        COMMANDS[args.command](exp, tmp, log=log)
        _replace_dir(tmp, out)
    except ConfigError as exc:
        shutil.rmtree(tmp, ignore_errors=True)
        print(f"vqlab: error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # reported, not re-raised: the exit code carries it
        shutil.rmtree(tmp, ignore_errors=True)
        print(f"vqlab: {args.command} failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
