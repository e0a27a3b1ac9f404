"""Command line: generate -> train -> eval -> remove.

Relative paths resolve against ``--root`` (default: current directory).
The optional YAML config has two sections::

    generator: {canvas: 64, num_pairs: 500}
    train: {profile: desk, steps: 1000}
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import yaml

from .config import TrainConfig, from_dict
from .dataforge import GeneratorConfig, generate_dataset

SECTIONS = ("generator", "train")


def read_config(path: Path | None) -> tuple[GeneratorConfig, TrainConfig]:
    if path is None:
        return GeneratorConfig(), TrainConfig()
    data = yaml.safe_load(path.read_text()) or {}
    unknown = set(data) - set(SECTIONS)
    if unknown:
        raise ValueError(f"{path}: unknown sections {sorted(unknown)}; expected {list(SECTIONS)}")
    return GeneratorConfig(**(data.get("generator") or {})), from_dict(data.get("train") or {})


def _resolve(root: Path, p: str | None) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else root / p


def cmd_generate(args, root: Path) -> int:
    gcfg, _ = read_config(_resolve(root, args.config))
    if args.num_pairs is not None:
        gcfg.num_pairs = args.num_pairs
    man = generate_dataset(_resolve(root, args.out), gcfg, seed=args.seed)
    print(json.dumps({"num_pairs": man["num_pairs"], "split_sizes": man["split_sizes"],
                      "size_tallies": man["size_tallies"]}))
    return 0


def cmd_train(args, root: Path) -> int:
    from .training import train

    _, tcfg = read_config(_resolve(root, args.config))
    out = _resolve(root, args.out)
    tr = train(tcfg, _resolve(root, args.data), out, split=args.split, max_steps=args.max_steps)
    last = tr.history[-1].to_dict() if tr.history else {}
    print(json.dumps({"steps": tr.step, "checkpoint": str(out / "final.pt"), "last": last}))
    return 0


def cmd_eval(args, root: Path) -> int:
    from .training import evaluate, load_checkpoint, write_report

    tr = load_checkpoint(_resolve(root, args.ckpt))
    report = evaluate(tr, _resolve(root, args.data), args.split)
    path = _resolve(root, args.report)
    path.parent.mkdir(parents=True, exist_ok=True)
    write_report(report, path)
    print(json.dumps({k: report.to_dict()[k] for k in ("psnr", "psnr_hole", "ssim", "iou", "fid_proxy")}))
    return 0


def cmd_remove(args, root: Path) -> int:
    from .training import remove_to_files

    info = remove_to_files(_resolve(root, args.ckpt), _resolve(root, args.image), args.expr,
                           _resolve(root, args.out))
    print(json.dumps(info))
    if info["low_confidence"]:
        print("warning: no confident mask for this expression", file=sys.stderr)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="refremoval", description=__doc__.splitlines()[0])
    p.add_argument("--root", default=".", help="workspace root for relative paths")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic dataset")
    g.add_argument("--config")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--num-pairs", type=int, help="override generator.num_pairs")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train a model on a generated dataset")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--split", default="train")
    t.add_argument("--max-steps", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--split", default="test")
    e.add_argument("--report", required=True)
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("remove", help="remove the object an expression refers to")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--image", required=True)
    r.add_argument("--expr", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_remove)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args, Path(args.root))
    except (ValueError, FileNotFoundError, RuntimeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
