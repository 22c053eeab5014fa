"""Command-line entry point: ``metaseg <command> ...``.

Exit status is 0 on success, 2 for configuration errors and 1 for anything else.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .errors import ConfigError
from .manifest import RunManifest

log = logging.getLogger("metaseg")


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="metaseg", description="Meta-learning for multi-task segmentation.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic meta-dataset")
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--spec", required=True, help="K:n[,K:n...] classes and sample count per source")
    s.add_argument("--size", type=int, default=64, help="image side in pixels")
    s.add_argument("--out", required=True)

    t = sub.add_parser("train", help="run a manifest (maml, transfer, refine or eval)")
    t.add_argument("--manifest", required=True)

    m = sub.add_parser("matrix", help="held-out-task matrix over all sources")
    m.add_argument("--dataset", required=True)
    m.add_argument("--config", required=True, help="RunManifest JSON used as the protocol template")
    m.add_argument("--out", required=True)

    e = sub.add_parser("eval", help="mIoU of a checkpoint on one task")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--task", required=True)
    e.add_argument("--split", default="test", choices=["train", "test", "val", "all"])

    o = sub.add_parser("overlay", help="image | truth | prediction strip")
    o.add_argument("--checkpoint", required=True)
    o.add_argument("--task", required=True)
    o.add_argument("--index", type=int, required=True)
    o.add_argument("--out", required=True)
    o.add_argument("--dataset", help="defaults to the dataset recorded in the checkpoint")

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite (float64)")
    g.add_argument("--seeds", type=int, default=10)
    return p


def _run(args) -> int:
    from . import runner

    if args.command == "synth":
        paths = runner.cmd_synth(args.seed, runner.parse_synth_spec(args.spec), args.out, args.size)
        for path in paths:
            print(path)
    elif args.command == "train":
        result = runner.cmd_train(RunManifest.load(args.manifest))
        print(result)
    elif args.command == "matrix":
        grid = runner.cmd_matrix(args.dataset, runner.load_protocol(args.config), args.out)
        print(grid.to_text(), end="")
    elif args.command == "eval":
        score = runner.cmd_eval(args.checkpoint, args.dataset, args.task, args.split)
        print(f"{args.task}\tmIoU\t{score:.6f}")
    elif args.command == "overlay":
        print(runner.cmd_overlay(args.checkpoint, args.task, args.index, args.out, args.dataset))
    elif args.command == "gradcheck":
        from .gradcheck import run_suite

        results = run_suite(range(args.seeds), report=lambda r: print(
            f"{'PASS' if r.passed else 'FAIL'}  {r.name:16s} seed={r.seed:<3d} max_rel_err={r.max_rel_error:.3e}"
        ))
        return 0 if all(r.passed for r in results) else 1
    return 0


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return _run(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        log.debug("command failed", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
