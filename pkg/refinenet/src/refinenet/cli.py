"""Command-line entry points: train and infer.

``refinenet train`` fits the refiner on a dataset directory and writes
``checkpoint.pt`` plus ``history.json`` into the output directory.
``refinenet infer`` loads a checkpoint and writes refined tensor files
for one split.

Exit codes: 0 success, 2 invalid arguments/inputs, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys

from . import __version__
from .infer import refine_dataset
from .network import NetworkConfig, desk_scale_config
from .train import TrainConfig, train


def _parse_channels(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(part) for part in text.split(","))
    except ValueError:
        raise ValueError(f"bad channel list {text!r}; expected e.g. 16,32,64") from None


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="refinenet",
        description="Train and apply the dynamic-convolution image refiner.",
    )
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    p_train = sub.add_parser("train", help="fit the refiner on a dataset")
    p_train.add_argument("--data", required=True, metavar="DIR",
                         help="dataset root containing manifest.json")
    p_train.add_argument("--out", required=True, metavar="DIR",
                         help="output directory for checkpoint and history")
    p_train.add_argument("--depth", type=int, help="down-sampling levels")
    p_train.add_argument("--channels", help="comma list, depth+1 entries")
    p_train.add_argument("--desk-scale", action="store_true",
                         help="use the small depth-2 configuration")
    p_train.add_argument("--no-deep-supervision", action="store_true",
                         help="use only the deepest output head")
    p_train.add_argument("--epochs", type=int, default=100,
                         help="maximum training epochs")
    p_train.add_argument("--batch", type=int, default=8, help="batch size")
    p_train.add_argument("--lr", type=float, default=1e-3, help="Adam step size")
    p_train.add_argument("--patience", type=int, default=10,
                         help="early-stop patience in epochs")
    p_train.add_argument("--t-start", type=float, default=30.0,
                         help="initial expert-softmax temperature")
    p_train.add_argument("--t-min", type=float, default=1.0,
                         help="final expert-softmax temperature")
    p_train.add_argument("--anneal-epochs", type=int, default=10,
                         help="epochs over which the temperature anneals")
    p_train.add_argument("--seed", type=int, default=0, help="master seed")
    p_train.add_argument("--device", default="cpu", help="torch device")

    p_infer = sub.add_parser("infer", help="refine one split of a dataset")
    p_infer.add_argument("--data", required=True, metavar="DIR",
                         help="dataset root containing manifest.json")
    p_infer.add_argument("--checkpoint", required=True, metavar="FILE",
                         help="trained checkpoint file")
    p_infer.add_argument("--out", required=True, metavar="DIR",
                         help="output directory for refined tensors")
    p_infer.add_argument("--split", default="test",
                         choices=("train", "val", "test"))
    p_infer.add_argument("--device", default="cpu", help="torch device")
    return parser


def _network_config(args: argparse.Namespace) -> NetworkConfig:
    overrides = {}
    if args.depth is not None:
        overrides["depth"] = args.depth
    if args.channels is not None:
        overrides["channels"] = _parse_channels(args.channels)
    if args.no_deep_supervision:
        overrides["deep_supervision"] = False
    if args.desk_scale:
        return desk_scale_config(**overrides)
    if "depth" in overrides and "channels" not in overrides:
        raise ValueError("--depth requires --channels with depth+1 entries")
    return NetworkConfig(**overrides)


def _run(args: argparse.Namespace) -> int:
    if args.command == "train":
        net_cfg = _network_config(args)
        train_cfg = TrainConfig(
            learning_rate=args.lr, batch_size=args.batch,
            max_epochs=args.epochs, patience=args.patience,
            t_start=args.t_start, t_min=args.t_min,
            anneal_epochs=args.anneal_epochs, seed=args.seed,
            device=args.device,
        )
        summary = train(args.data, net_cfg, train_cfg, args.out)
        last = summary["history"][-1]
        print(f"trained {last['epoch']} epochs; "
              f"best val loss {summary['best_val_loss']:.6g} "
              f"at epoch {summary['best_epoch']}")
        print(f"checkpoint: {summary['checkpoint']}")
        print(f"history: {summary['history_path']}")
        return 0
    if args.command == "infer":
        ids = refine_dataset(args.data, args.checkpoint, args.out,
                             split=args.split, device=args.device)
        print(f"refined {len(ids)} samples from split '{args.split}' "
              f"into {args.out}")
        return 0
    raise ValueError(f"unknown command {args.command!r}")


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _run(args)
    except (ValueError, OSError, KeyError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (RuntimeError, FloatingPointError, ArithmeticError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
