"""End-to-end evaluation and rate-distortion sweeps."""
import csv
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import yaml

from .data import ChannelConfig, generate_dataset, read_dataset
from .errors import ConfigError, DataError
from .transform import nmse_db
from .vq import container_bytes, parse_containers

log = logging.getLogger(__name__)

RD_COLUMNS = ("codec", "rate_bits", "nmse_db", "side_info", "train_steps", "seed", "dataset")


@dataclass(frozen=True)
class RDPoint:
    codec: str
    rate_bits: int
    nmse_db: float
    side_info: bool = False
    train_steps: int = 0
    seed: int = 0
    dataset: str = ""


def serialize(codec, bits):
    return b"".join(container_bytes(b, codec.container_symbol, codec.magic) for b in bits)


def deserialize(codec, buf):
    symbol, bits = parse_containers(buf, codec.magic)
    if symbol != codec.container_symbol:
        raise DataError(f"codewords were written for symbol size {symbol}, "
                        f"codec uses {codec.container_symbol}")
    if any(len(b) != codec.rate_bits for b in bits):
        raise DataError(f"codeword length differs from the codec's {codec.rate_bits} bits")
    return bits


def reconstruct(codec, dataset):
    """Encode, serialize, parse back and decode every sample of ``dataset``."""
    if len(dataset) == 0:
        raise DataError("cannot evaluate on an empty split")
    x = dataset.stack("x_ad")
    if x is None or x.shape[1:] != (32, 32, 2):
        raise DataError("dataset has no 32x32x2 input blocks")
    y = None
    if codec.use_side_info:
        y = dataset.stack("y_ad")
        if y is None:
            raise DataError("codec needs side information the dataset does not have")
    bits = deserialize(codec, serialize(codec, codec.compress(x)))
    return codec.decompress(np.stack(bits), y)


def evaluate(codec, dataset, dataset_id="", train_steps=0, seed=0):
    z_hat = reconstruct(codec, dataset)
    return RDPoint(codec.kind, int(codec.rate_bits), nmse_db(dataset.stack("z_ad"), z_hat),
                   bool(codec.use_side_info), int(train_steps), int(seed), dataset_id)


def write_rd_csv(points, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=RD_COLUMNS)
        w.writeheader()
        for p in points:
            row = asdict(p)
            row["nmse_db"] = repr(float(p.nmse_db))
            row["side_info"] = int(p.side_info)
            w.writerow(row)


def read_rd_csv(path):
    with open(path, newline="") as fh:
        return [RDPoint(r["codec"], int(r["rate_bits"]), float(r["nmse_db"]),
                        bool(int(r["side_info"])), int(r["train_steps"]), int(r["seed"]),
                        r["dataset"]) for r in csv.DictReader(fh)]


@dataclass
class ExperimentConfig:
    """One sweep: a dataset, codecs with rate points, shared training overrides.

    ``codecs`` entries look like ``{"kind": "diffusion", "rates": [2, 4, 8]}``
    (rates are N_v values) or ``{"kind": "baseline", "rates": [22]}`` (rates
    are latent sizes). ``side_info`` lists the conditioning variants to run.
    """

    channel: dict = field(default_factory=dict)
    n_train: int = 1000
    n_test: int = 200
    train_data: str = ""
    test_data: str = ""
    codecs: list = field(default_factory=lambda: [{"kind": "diffusion", "rates": [2, 4, 8]}])
    side_info: list = field(default_factory=lambda: [False])
    training: dict = field(default_factory=dict)
    seed: int = 0
    out_dir: str = "rd_out"
    dataset_id: str = "synthetic"

    def validate(self):
        if not any(c.get("rates") for c in self.codecs):
            raise ConfigError("experiment needs at least one rate point")
        for c in self.codecs:
            if c.get("kind") not in ("diffusion", "baseline"):
                raise ConfigError(f"unknown codec kind {c.get('kind')!r}")
        return self

    @classmethod
    def from_mapping(cls, mapping):
        unknown = set(mapping) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown experiment keys: {sorted(unknown)}")
        return cls(**mapping).validate()

    @classmethod
    def load(cls, path):
        return cls.from_mapping(load_mapping(path))


def load_mapping(path):
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh) or {}
    except (OSError, yaml.YAMLError) as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: expected a key-value document")
    return data


def _datasets(cfg):
    if cfg.train_data:
        train_ds = read_dataset(cfg.train_data)
        test_ds = read_dataset(cfg.test_data) if cfg.test_data else train_ds
        return train_ds, test_ds
    channel = ChannelConfig.from_mapping(cfg.channel)
    return (generate_dataset(channel, cfg.n_train, "train", keep_raw=False),
            generate_dataset(channel, cfg.n_test, "test", keep_raw=False))


def sweep_cells(cfg):
    for codec in cfg.codecs:
        for side in cfg.side_info:
            for rate in codec["rates"]:
                yield codec["kind"], bool(side), int(rate)


def rd_sweep(cfg, datasets=None):
    """Train and evaluate every (codec, side info, rate) cell.

    Writes ``rd.csv`` and ``rd.svg`` into ``cfg.out_dir`` and returns the points.
    """
    from .report import plot_rd
    from .training import TrainingConfig, train

    cfg.validate()
    train_ds, test_ds = datasets if datasets is not None else _datasets(cfg)
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    points = []
    for kind, side, rate in sweep_cells(cfg):
        overrides = dict(cfg.training, codec=kind, use_side_info=side, seed=cfg.seed)
        overrides["n_vectors" if kind == "diffusion" else "n_latent"] = rate
        tcfg = TrainingConfig.from_mapping(overrides)
        log.info("sweep cell %s side=%s rate=%d", kind, side, rate)
        state = train(tcfg, train_ds)
        points.append(evaluate(state.codec, test_ds, cfg.dataset_id, tcfg.n_train, cfg.seed))
    write_rd_csv(points, out / "rd.csv")
    plot_rd(points, out / "rd.svg")
    return points
