"""Command line front-end.

    vfcnn synth     --config run.ini --out data/
    vfcnn train     --config run.ini --data data/ --out runs/a/
    vfcnn predict   --checkpoint runs/a/best.ckpt --volume data/case000.volr --out pred.volr
    vfcnn evaluate  --pred pred.volr --gt data/case000_mask.volr [--out report.txt]
    vfcnn gradcheck

Exit codes: 0 success, 1 invalid input or configuration, 2 runtime failure.
"""
import argparse
import json
import os
import sys

from threadpoolctl import threadpool_limits

from .errors import VfcnnError
from .volume import MaskVolume, VolumeFormatError

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


def _common(parser):
    parser.add_argument("--config", help="INI run configuration")
    parser.add_argument("--seed", type=int, help="override the configured seed")
    parser.add_argument("--force", action="store_true", help="allow a non-empty output directory")
    parser.add_argument("--threads", type=int, default=1,
                        help="BLAS threads (default 1 keeps runs bit-reproducible)")


def make_parser():
    parser = argparse.ArgumentParser(prog="vfcnn", description=__doc__.split("\n\n")[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="write a synthetic phantom dataset")
    _common(p)
    p.add_argument("--out", required=True)
    p.add_argument("--count", type=int)
    p.add_argument("--n-val", type=int, dest="n_val")

    p = sub.add_parser("train", help="train a model on a dataset directory")
    _common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--quiet", action="store_true")

    p = sub.add_parser("predict", help="segment one volume with a checkpoint")
    _common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--volume", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threshold", type=float)

    p = sub.add_parser("evaluate", help="Dice / Hausdorff report for a predicted mask")
    _common(p)
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--out", help="write the key=value report here")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable op")
    _common(p)
    p.add_argument("--no-model", action="store_true", help="skip the whole-network spot check")
    return parser


def _sections(args):
    from .config import load_config
    return load_config(args.config) if args.config else load_config()


def cmd_synth(args):
    from .config import build
    from .train import synthesize_dataset
    cfg = _sections(args)
    synth = build("synth", cfg, count=args.count, n_val=args.n_val)
    phantom = build("phantom", cfg)
    seed = args.seed if args.seed is not None else phantom.seed
    train, val = synthesize_dataset(args.out, synth, phantom, seed=seed, force=args.force)
    print(f"wrote {len(train)} train / {len(val)} val cases to {args.out}")
    return EXIT_OK


def cmd_train(args):
    from .config import build
    from .train import train
    cfg = _sections(args)
    tcfg = build("train", cfg, epochs=args.epochs, lr=args.lr, seed=args.seed)
    model = build("model", cfg, seed=tcfg.seed)
    pipeline = build("pipeline", cfg)
    augment = build("augment", cfg, seed=tcfg.seed)
    if not os.path.isfile(os.path.join(args.data, "split.txt")):
        raise UsageError(f"{args.data}: not a dataset directory (missing split.txt)")
    notes = {}
    if tcfg.lr != 1e-4:
        notes["lr"] = f"learning rate {tcfg.lr} differs from the reference 1e-4"

    def log(row):
        if not args.quiet:
            print("epoch {:4d}  loss {:.6f}  mse {:.6f}  dice {:.4f}  val_dice {:.4f}".format(*row),
                  flush=True)

    train(args.data, args.out, tcfg, model, pipeline, augment, force=args.force, log=log, notes=notes)
    return EXIT_OK


def cmd_predict(args):
    from .train import load_for_prediction, predict_volume
    from .volume import read_volume, write_volume
    model, pipeline, threshold = load_for_prediction(args.checkpoint)
    if args.threshold is not None:
        threshold = args.threshold
    volume = read_volume(args.volume)
    if isinstance(volume, MaskVolume):
        raise UsageError(f"{args.volume} is a mask, expected an image volume")
    mask = predict_volume(model, volume, pipeline, threshold)
    write_volume(mask, args.out)
    meta = {"checkpoint": os.path.abspath(args.checkpoint), "volume": os.path.abspath(args.volume),
            "threshold": threshold, "pipeline": pipeline.to_dict(), "model": model.config.to_dict()}
    with open(os.path.splitext(args.out)[0] + ".json", "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
    print(f"wrote {args.out} ({mask.count} foreground voxels)")
    return EXIT_OK


def cmd_evaluate(args):
    from .metrics import evaluate
    from .volume import read_volume
    pred, gt = read_volume(args.pred), read_volume(args.gt)
    for name, m in (("pred", pred), ("gt", gt)):
        if not isinstance(m, MaskVolume):
            raise UsageError(f"--{name} must be a binary mask file")
    if pred.dims != gt.dims or pred.spacing != gt.spacing:
        raise UsageError(f"geometry mismatch: pred {pred.dims}@{pred.spacing} vs gt {gt.dims}@{gt.spacing}")
    report = evaluate(pred, gt)
    sys.stdout.write(report.to_text())
    if args.out:
        with open(args.out, "w") as fh:
            fh.write(report.to_kv())
    return EXIT_OK


def cmd_gradcheck(args):
    from .gradcheck import format_table, run_suite
    results = run_suite(seed=args.seed or 0, include_model=not args.no_model)
    sys.stdout.write(format_table(results))
    return EXIT_OK if all(r.passed for r in results) else EXIT_RUNTIME


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "predict": cmd_predict,
            "evaluate": cmd_evaluate, "gradcheck": cmd_gradcheck}


def main(argv=None):
    args = make_parser().parse_args(argv)
    try:
        with threadpool_limits(limits=max(1, args.threads)):
            return COMMANDS[args.command](args)
    except (UsageError, VolumeFormatError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except VfcnnError as exc:
        invalid = isinstance(exc, ValueError)
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID if invalid else EXIT_RUNTIME
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as exc:  # noqa: BLE001
        print(f"runtime failure: {exc!r}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
