"""Command line: gen-data, train, encode, decode, eval, rd-sweep.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numerical failure.
"""
import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .data import ChannelConfig, CsiSample, Dataset, generate_dataset, read_dataset, write_dataset
from .errors import CheckpointError, ConfigError, DataError, NumericalError
from .evaluate import (ExperimentConfig, evaluate, load_mapping, rd_sweep, serialize,
                       deserialize, write_rd_csv)
from .transform import from_angular_delay

log = logging.getLogger("csidiff")

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4


def _channel_config(path):
    return ChannelConfig.from_mapping(load_mapping(path)) if path else ChannelConfig()


def cmd_gen_data(args):
    cfg = _channel_config(args.config)
    ds = generate_dataset(cfg, args.count, args.split, keep_raw=not args.no_raw)
    write_dataset(ds, args.out)
    log.info("wrote %d %s samples to %s", len(ds), args.split, args.out)


def _training_config(args):
    from .training import TrainingConfig
    mapping = load_mapping(args.config) if args.config else {}
    for item in args.set or []:
        key, _, value = item.partition("=")
        if not _:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        mapping[key] = _parse_value(value)
    if args.codec:
        mapping["codec"] = args.codec
    return TrainingConfig.from_mapping(mapping)


def _parse_value(text):
    import yaml
    return yaml.safe_load(text)


def cmd_train(args):
    from .training import load_checkpoint, train
    cfg = _training_config(args)
    data = read_dataset(args.data)
    val = read_dataset(args.val_data) if args.val_data else None
    state = load_checkpoint(args.resume) if args.resume else None
    if state is not None:
        state.config = cfg
    state = train(cfg, data, val_dataset=val, out_dir=args.out, state=state)
    log.info("finished at step %d; checkpoint in %s", state.step, args.out)


def _load(args):
    from .training import load_codec
    return load_codec(args.checkpoint)


def cmd_encode(args):
    codec = _load(args)
    data = read_dataset(args.data)
    x = data.stack("x_ad")
    if x is None:
        raise DataError(f"{args.data}: no angular-delay inputs")
    Path(args.out).write_bytes(serialize(codec, codec.compress(x)))
    log.info("encoded %d samples at %d bits each", len(x), codec.rate_bits)


def cmd_decode(args):
    codec = _load(args)
    bits = deserialize(codec, Path(args.codes).read_bytes())
    y = None
    if codec.use_side_info:
        if not args.side_data:
            raise DataError("this checkpoint decodes with side information; pass --side-data")
        side = read_dataset(args.side_data)
        y = side.stack("y_ad")
        if y is None or len(y) != len(bits):
            raise DataError("side-information dataset does not match the codewords")
    z_hat = codec.decompress(np.stack(bits), y).astype(np.float32)
    samples = []
    for z in z_hat:
        s = CsiSample(z_ad=z)
        if args.n_subcarriers:
            s.z_raw = from_angular_delay(z, args.n_subcarriers).astype(np.complex64)
        samples.append(s)
    write_dataset(Dataset(samples, "test", "synthetic", {"decoded_from": str(args.codes)}), args.out)
    log.info("decoded %d samples to %s", len(samples), args.out)


def cmd_eval(args):
    from .training import read_descriptor
    codec = _load(args)
    desc, _ = read_descriptor(args.checkpoint)
    data = read_dataset(args.data)
    point = evaluate(codec, data, dataset_id=args.dataset_id or Path(args.data).stem,
                     train_steps=desc["training"]["n_train"], seed=desc["training"]["seed"])
    if args.csv:
        write_rd_csv([point], args.csv)
    print(f"{point.codec},{point.rate_bits},{point.nmse_db:.4f}")


def cmd_rd_sweep(args):
    cfg = ExperimentConfig.load(args.config)
    if args.out:
        cfg.out_dir = args.out
    for p in rd_sweep(cfg):
        print(f"{p.codec},{p.rate_bits},{p.nmse_db:.4f},{int(p.side_info)}")


def build_parser():
    p = argparse.ArgumentParser(prog="csidiff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("--config", help="channel config file (YAML/JSON)")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int, required=True)
    g.add_argument("--split", choices=("train", "test"), default="train")
    g.add_argument("--no-raw", action="store_true", help="store angular-delay forms only")
    g.set_defaults(func=cmd_gen_data)

    t = sub.add_parser("train", help="train a codec")
    t.add_argument("--config", help="training config file (flat key-value)")
    t.add_argument("--data", required=True)
    t.add_argument("--val-data")
    t.add_argument("--out", required=True, help="checkpoint directory")
    t.add_argument("--codec", choices=("diffusion", "baseline"))
    t.add_argument("--resume", help="checkpoint to continue from")
    t.add_argument("--set", action="append", metavar="KEY=VALUE", help="override a config key")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("encode", help="encode a dataset into a codeword file")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.set_defaults(func=cmd_encode)

    d = sub.add_parser("decode", help="decode a codeword file")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--codes", required=True)
    d.add_argument("--out", required=True)
    d.add_argument("--side-data", help="dataset providing UL side information")
    d.add_argument("--n-subcarriers", type=int, default=0,
                   help="also write the full spatial-frequency reconstruction")
    d.set_defaults(func=cmd_decode)

    v = sub.add_parser("eval", help="NMSE of a checkpoint on a dataset")
    v.add_argument("--checkpoint", required=True)
    v.add_argument("--data", required=True)
    v.add_argument("--csv")
    v.add_argument("--dataset-id")
    v.set_defaults(func=cmd_eval)

    r = sub.add_parser("rd-sweep", help="rate-distortion sweep with CSV and SVG output")
    r.add_argument("--config", required=True)
    r.add_argument("--out")
    r.set_defaults(func=cmd_rd_sweep)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, CheckpointError, OSError, ValueError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
