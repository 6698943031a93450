"""Training loop, train state and checkpoints.

Every source of randomness is a pure function of ``(seed, step)``: minibatch
order comes from a per-epoch permutation and the diffusion step/noise draws
from a per-step generator. Resuming from a checkpoint therefore replays the
uninterrupted run exactly.

Checkpoint layout::

    "CSIK" | version u16 | descriptor length u32 | descriptor JSON | torch payload

The descriptor holds the architecture and training config under the codec
kind; the payload holds parameters (codebook included), optimizer moments,
step and codebook usage counts.
"""
import csv
import io
import json
import logging
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .errors import (ArchitectureMismatchError, CheckpointVersionError, ConfigError,
                     CorruptCheckpointError, DataError, NumericalError)
from .model import DiffusionCodec, to_channels_first
from .networks import PROFILES, ModelConfig
from .transform import fit_scale, nmse_db

log = logging.getLogger(__name__)

CKPT_MAGIC = b"CSIK"
CKPT_VERSION = 1
METRIC_COLUMNS = ("step", "loss", "denoise_loss", "cb_loss", "val_nmse_db")


@dataclass
class TrainingConfig:
    eta: float = 4.5e-4
    n_train: int = 300_000
    batch_size: int = 100
    learning_rate: float = 1e-3
    adam_betas: tuple = (0.9, 0.999)
    adam_eps: float = 1e-8
    grad_clip: float = 1.0
    T: int = 4
    n_vectors: int = 4
    seed: int = 0
    checkpoint_every: int = 10_000
    log_every: int = 100
    val_every: int = 1000
    val_size: int = 100
    use_side_info: bool = False
    freeze_codebook: bool = False
    profile: str = "full"
    codec: str = "diffusion"
    # baseline codec only
    n_latent: int = 22
    bits_per_element: int = 6

    def __post_init__(self):
        self.adam_betas = tuple(self.adam_betas)

    def validate(self):
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")
        if self.n_train < 0:
            raise ConfigError("n_train must be >= 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ConfigError("learning_rate must be > 0")
        if self.profile not in PROFILES:
            raise ConfigError(f"profile must be one of {sorted(PROFILES)}")
        if self.codec not in ("diffusion", "baseline"):
            raise ConfigError("codec must be 'diffusion' or 'baseline'")
        return self

    @classmethod
    def from_mapping(cls, mapping):
        unknown = set(mapping) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown training config keys: {sorted(unknown)}")
        return cls(**mapping).validate()

    def to_dict(self):
        d = asdict(self)
        d["adam_betas"] = list(self.adam_betas)
        return d

    def model_config(self):
        return PROFILES[self.profile](n_vectors=self.n_vectors, T=self.T,
                                      use_side_info=self.use_side_info)


@dataclass
class TrainState:
    codec: torch.nn.Module
    optimizer: torch.optim.Optimizer
    config: TrainingConfig
    step: int = 0
    usage: Optional[np.ndarray] = None
    running_loss: float = float("nan")
    metrics: list = field(default_factory=list)

    def parameter_count(self):
        return sum(p.numel() for p in self.codec.parameters())


def build_codec(config, scale=1.0):
    if config.codec == "baseline":
        from .baseline import BaselineCodec, BaselineConfig
        bcfg = BaselineConfig(n_latent=config.n_latent,
                              bits_per_element=config.bits_per_element,
                              use_side_info=config.use_side_info)
        return BaselineCodec(bcfg, scale=scale, seed=config.seed)
    return DiffusionCodec(config.model_config(), scale=scale, seed=config.seed)


def init_state(config, scale=1.0, codec=None):
    config.validate()
    codec = codec if codec is not None else build_codec(config, scale)
    if config.freeze_codebook and hasattr(codec, "codebook"):
        codec.codebook.vectors.requires_grad_(False)
    params = [p for p in codec.parameters() if p.requires_grad]
    opt = torch.optim.Adam(params, lr=config.learning_rate,
                           betas=config.adam_betas, eps=config.adam_eps)
    n_symbols = getattr(getattr(codec, "cfg", None), "n_vectors", 0)
    usage = np.zeros(n_symbols, dtype=np.int64) if config.codec == "diffusion" else None
    return TrainState(codec, opt, config, usage=usage)


def _mix(*values):
    return int(np.random.SeedSequence(list(values)).generate_state(1, np.uint64)[0] >> 1)


def step_generator(seed, step):
    return torch.Generator().manual_seed(_mix(seed, step, 0x5EED))


class BatchSampler:
    """Epoch-wise shuffled minibatches, addressable by step."""

    def __init__(self, n, batch_size, seed):
        self.n = n
        self.batch_size = batch_size
        self.seed = seed
        self._cache = {}

    def _perm(self, epoch):
        if epoch not in self._cache:
            if len(self._cache) > 4:
                self._cache.clear()
            self._cache[epoch] = np.random.default_rng([self.seed, epoch]).permutation(self.n)
        return self._cache[epoch]

    def indices(self, step):
        start = step * self.batch_size
        return np.array([self._perm(k // self.n)[k % self.n]
                         for k in range(start, start + self.batch_size)])


class TensorData:
    """Normalized channels-first tensors for the fields a codec trains on."""

    def __init__(self, dataset, scale, use_side_info):
        if len(dataset) == 0:
            raise DataError("dataset is empty")
        z = dataset.stack("z_ad")
        x = dataset.stack("x_ad")
        if z is None or x is None:
            raise DataError("dataset lacks angular-delay forms; run preprocessing first")
        if z.shape[1:] != (32, 32, 2) or x.shape[1:] != (32, 32, 2):
            raise DataError(f"expected 32x32x2 blocks, got {x.shape[1:]} / {z.shape[1:]}")
        self.x = to_channels_first(x) / scale
        self.z = to_channels_first(z) / scale
        self.y = None
        if use_side_info:
            y = dataset.stack("y_ad")
            if y is None:
                raise DataError("codec uses side information but the dataset has none")
            self.y = to_channels_first(y) / scale

    def __len__(self):
        return len(self.z)

    def batch(self, idx):
        idx = torch.as_tensor(idx)
        y = self.y[idx] if self.y is not None else None
        return self.x[idx], y, self.z[idx]


def train_step(state, batch):
    """One optimizer update on ``batch = (x, y, z)`` of normalized tensors."""
    cfg = state.config
    codec = state.codec
    codec.train()
    gen = step_generator(cfg.seed, state.step)
    loss, parts, indices = codec.training_loss(batch, gen, cfg.eta)
    if not torch.isfinite(loss):
        raise NumericalError(
            f"non-finite loss {loss.item()} at step {state.step} "
            f"(denoise={parts['denoise_loss']}, cb={parts['cb_loss']})")
    state.optimizer.zero_grad(set_to_none=True)
    loss.backward()
    if cfg.grad_clip:
        torch.nn.utils.clip_grad_norm_(
            [p for p in codec.parameters() if p.requires_grad], cfg.grad_clip)
    state.optimizer.step()
    if state.usage is not None and indices is not None:
        state.usage += np.bincount(indices.reshape(-1).numpy(), minlength=len(state.usage))
    state.step += 1
    value = loss.item()
    state.running_loss = value if math.isnan(state.running_loss) else (
        0.99 * state.running_loss + 0.01 * value)
    return {"loss": value, **parts}


def validation_nmse_db(codec, dataset, size=None):
    subset = dataset if size is None or size >= len(dataset) else dataset.subset(range(size))
    z = subset.stack("z_ad")
    y = subset.stack("y_ad") if codec.use_side_info else None
    z_hat = codec.decompress(codec.compress(subset.stack("x_ad")), y)
    return nmse_db(z, z_hat)


def train(config, dataset, val_dataset=None, out_dir=None, state=None):
    """Run ``config.n_train`` steps (resuming from ``state.step`` if given).

    Returns the final state; ``state.metrics`` holds one dict per logged step.
    """
    config.validate()
    if state is None:
        state = init_state(config, scale=fit_scale(dataset.stack("z_ad")))
    if config.n_train == 0 or state.step >= config.n_train:
        return state
    data = TensorData(dataset, float(state.codec.scale), config.use_side_info)
    sampler = BatchSampler(len(data), config.batch_size, config.seed)
    val_set = val_dataset if val_dataset is not None else dataset
    out_dir = Path(out_dir) if out_dir else None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)

    while state.step < config.n_train:
        parts = train_step(state, data.batch(sampler.indices(state.step)))
        step = state.step
        val = None
        if config.val_every and step % config.val_every == 0:
            val = validation_nmse_db(state.codec, val_set, config.val_size)
        if val is not None or (config.log_every and step % config.log_every == 0) \
                or step == config.n_train:
            row = {"step": step, **parts, "val_nmse_db": val}
            state.metrics.append(row)
            log.info("step %d loss %.5g val %s", step, parts["loss"], val)
        if out_dir and config.checkpoint_every and step % config.checkpoint_every == 0:
            save_checkpoint(state, out_dir / f"step_{step:08d}.ckpt")
    if out_dir:
        save_checkpoint(state, out_dir / "final.ckpt")
        write_metrics(state.metrics, out_dir / "metrics.csv")
    return state


def write_metrics(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_COLUMNS, extrasaction="ignore")
        w.writeheader()
        for row in rows:
            w.writerow({k: ("" if row.get(k) is None else row[k]) for k in METRIC_COLUMNS})


def _descriptor(state):
    return {"kind": state.codec.kind, "model": state.codec.descriptor()["model"],
            "training": state.config.to_dict()}


def save_checkpoint(state, path):
    payload = io.BytesIO()
    torch.save({
        "model": state.codec.state_dict(),
        "optimizer": state.optimizer.state_dict(),
        "step": state.step,
        "usage": torch.from_numpy(state.usage) if state.usage is not None else None,
        "running_loss": state.running_loss,
    }, payload)
    desc = json.dumps(_descriptor(state)).encode()
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(CKPT_MAGIC + struct.pack("<HI", CKPT_VERSION, len(desc)) + desc)
        fh.write(payload.getvalue())
    tmp.replace(path)


def read_descriptor(path):
    buf = Path(path).read_bytes()
    if len(buf) < 10 or buf[:4] != CKPT_MAGIC:
        raise CorruptCheckpointError(f"{path}: not a checkpoint (bad magic)")
    version, n = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise CheckpointVersionError(f"{path}: checkpoint version {version}, expected {CKPT_VERSION}")
    try:
        desc = json.loads(buf[10:10 + n].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CorruptCheckpointError(f"{path}: unreadable descriptor") from exc
    return desc, buf[10 + n:]


def load_checkpoint(path, expected_model=None):
    """Restore a :class:`TrainState`.

    ``expected_model`` (a ModelConfig/BaselineConfig or its dict) must match
    the stored architecture exactly when given.
    """
    desc, payload = read_descriptor(path)
    if expected_model is not None:
        want = expected_model if isinstance(expected_model, dict) else expected_model.to_dict()
        if want != desc["model"]:
            diff = sorted(k for k in set(want) | set(desc["model"])
                          if want.get(k) != desc["model"].get(k))
            raise ArchitectureMismatchError(
                f"{path}: architecture mismatch in {diff}")
    try:
        blob = torch.load(io.BytesIO(payload), weights_only=True)
    except Exception as exc:
        raise CorruptCheckpointError(f"{path}: corrupt payload ({exc})") from exc
    config = TrainingConfig.from_mapping(desc["training"])
    state = init_state(config, codec=_codec_from_descriptor(desc))
    state.codec.load_state_dict(blob["model"])
    state.optimizer.load_state_dict(blob["optimizer"])
    state.step = int(blob["step"])
    state.usage = blob["usage"].numpy().copy() if blob["usage"] is not None else None
    state.running_loss = float(blob["running_loss"])
    return state


def _codec_from_descriptor(desc):
    seed = desc["training"].get("seed", 0)
    if desc["kind"] == "baseline":
        from .baseline import BaselineCodec, BaselineConfig
        return BaselineCodec(BaselineConfig.from_mapping(desc["model"]), seed=seed)
    return DiffusionCodec(ModelConfig(**desc["model"]), seed=seed)


def load_codec(path, expected_model=None):
    codec = load_checkpoint(path, expected_model).codec
    codec.eval()
    return codec
