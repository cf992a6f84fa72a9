"""Command-line entry point: gen-data, train, eval, predict, ablate."""

import argparse
import sys

from .config import load_config
from .data import generate_dataset, load_manifest
from .errors import ConfigurationError, InputError
from .harness import ablate, evaluate, load_network_from_checkpoint, predict, train


def _parse_sets(pairs):
    overrides = {}
    for pair in pairs or []:
        if "=" not in pair:
            raise ConfigurationError(f"--set expects key=value, got {pair!r}")
        key, value = pair.split("=", 1)
        overrides[key.strip()] = value.strip()
    return overrides


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="duplexseg", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic road-scene dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--width", type=int, default=96)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", dest="sets", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", required=True)
    p.add_argument("--data", default=None, help="dataset root (defaults to the checkpoint config)")
    p.add_argument("--out", default=None)

    p = sub.add_parser("predict", help="predict one image (optionally against ground truth)")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--rgb", required=True)
    p.add_argument("--depth", default=None)
    p.add_argument("--intrinsics", default=None)
    p.add_argument("--gt", default=None)
    p.add_argument("--out", required=True)

    p = sub.add_parser("ablate", help="train/evaluate every fusion mode")
    p.add_argument("--modes", default="concat,seb,hffm,ffrm,hffm+ffrm")
    p.add_argument("--config", default=None)
    p.add_argument("--set", action="append", dest="sets", metavar="KEY=VALUE")
    p.add_argument("--out", required=True)

    args = parser.parse_args(argv)
    try:
        if args.command == "gen-data":
            manifest = generate_dataset(args.out, args.count, args.seed, args.height, args.width)
            sizes = {k: len(v) for k, v in manifest.splits.items()}
            print(f"wrote {sum(sizes.values())} samples to {args.out} (splits: {sizes})")
        elif args.command == "train":
            cfg = load_config(args.config, _parse_sets(args.sets))
            result = train(cfg, args.out)
            print(f"finished {cfg['train.steps']} steps; checkpoint at {result.checkpoint_path}")
        elif args.command == "eval":
            net, cfg, meta, _ = load_network_from_checkpoint(args.checkpoint)
            root = args.data if args.data is not None else cfg["data.root"]
            manifest = load_manifest(root)
            report = evaluate(net, manifest, args.split, cfg, out_dir=args.out)
            from .metrics import format_report

            print(format_report(report), end="")
        elif args.command == "predict":
            net, cfg, meta, _ = load_network_from_checkpoint(args.checkpoint)
            predict(
                net,
                cfg,
                args.rgb,
                args.depth,
                args.out,
                intrinsics_path=args.intrinsics,
                gt_path=args.gt,
            )
            print(f"wrote predictions to {args.out}")
        elif args.command == "ablate":
            cfg = load_config(args.config, _parse_sets(args.sets))
            rows = ablate(cfg, [m.strip() for m in args.modes.split(",") if m.strip()], args.out)
            for row in rows:
                miou = "undef" if row["miou"] is None else f"{row['miou']:.4f}"
                print(f"{row['mode']}: miou={miou}")
    except (ConfigurationError, InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
