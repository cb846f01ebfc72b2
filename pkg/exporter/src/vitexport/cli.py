"""vitexport CLI: make-dataset, train, export, convert."""

from __future__ import annotations

import argparse
import json
import sys

from .data import generate, write_dataset
from .export import ConversionError, convert_pretrained, export_strv, load_name_map
from .toyvit import ToyConfig
from .train import TrainingError, load_checkpoint, save_checkpoint, train_toy


def _config_from_args(args) -> ToyConfig:
    return ToyConfig(
        image_size=args.image_size,
        patch_size=args.patch_size,
        embed_dim=args.embed_dim,
        num_heads=args.num_heads,
        num_layers=args.num_layers,
        mlp_hidden_dim=args.mlp_hidden_dim,
        num_classes=args.num_classes,
    )


def _cmd_make_dataset(args) -> int:
    images, labels = generate(args.count, args.seed, size=args.image_size)
    write_dataset(args.out, images, labels)
    print(json.dumps({"out": str(args.out), "count": len(images)}))
    return 0


def _cmd_train(args) -> int:
    from .data import read_dataset

    train_images, train_labels = read_dataset(args.train)
    val_images, val_labels = read_dataset(args.val)
    config = _config_from_args(args)
    model, info = train_toy(
        config,
        train_images,
        train_labels,
        val_images,
        val_labels,
        epochs=args.epochs,
        seed=args.seed,
        lr=args.lr,
        cutout_prob=args.cutout_prob,
        label_noise=args.label_noise,
        token_corrupt_max=args.token_corrupt_max,
    )
    save_checkpoint(args.out, model, info)
    print(json.dumps({"checkpoint": str(args.out), "val_accuracy": info["val_accuracy"]}))
    return 0


def _cmd_export(args) -> int:
    model, info = load_checkpoint(args.checkpoint)
    manifest = export_strv(
        args.out, model, accuracy=info.get("val_accuracy"), input_seed=args.input_seed
    )
    print(
        json.dumps(
            {
                "out": str(args.out),
                "tensors": len(manifest["checksums"]),
                "accuracy": manifest.get("accuracy"),
                "input_seed": manifest["reference"]["input_seed"],
            }
        )
    )
    return 0


def _cmd_convert(args) -> int:
    config = ToyConfig(**json.loads(open(args.config).read()))
    convert_pretrained(args.checkpoint, config, load_name_map(args.map), args.out)
    print(json.dumps({"out": str(args.out)}))
    return 0


def _add_config_args(p) -> None:
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--patch-size", type=int, default=8)
    p.add_argument("--embed-dim", type=int, default=64)
    p.add_argument("--num-heads", type=int, default=4)
    p.add_argument("--num-layers", type=int, default=4)
    p.add_argument("--mlp-hidden-dim", type=int, default=256)
    p.add_argument("--num-classes", type=int, default=10)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vitexport")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-dataset", help="render a synthetic shape dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=32)
    p.set_defaults(func=_cmd_make_dataset)

    p = sub.add_parser("train", help="train the toy ViT")
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=12)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--cutout-prob", type=float, default=0.15)
    p.add_argument("--label-noise", type=float, default=0.05)
    p.add_argument("--token-corrupt-max", type=int, default=4)
    _add_config_args(p)
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("export", help="write a checkpoint into the STRV container")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--input-seed", type=int, default=1)
    p.set_defaults(func=_cmd_export)

    p = sub.add_parser("convert", help="remap a pretrained state dict into STRV")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--config", required=True)
    p.add_argument("--map", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_convert)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConversionError, TrainingError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
