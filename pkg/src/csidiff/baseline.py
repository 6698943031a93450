"""Uniform-quantization autoencoder baseline.

A CsiNet/CRNet-style codec: convolutional encoder, dense projection to an
``n_latent`` vector bounded by tanh, per-element uniform quantization with a
straight-through gradient, and a dense + refinement-block decoder. Side
information is concatenated with the tensor being refined in every block.
"""
from dataclasses import asdict, dataclass

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError
from .model import to_channels_first, to_channels_last
from .vq import pack_bits, unpack_bits


@dataclass
class BaselineConfig:
    n_latent: int = 22
    bits_per_element: int = 6
    use_side_info: bool = False
    input_size: int = 32
    in_channels: int = 2
    refine_blocks: int = 2
    refine_widths: tuple = (8, 16)

    def __post_init__(self):
        self.refine_widths = tuple(self.refine_widths)
        if self.n_latent < 1 or self.bits_per_element < 1:
            raise ConfigError("n_latent and bits_per_element must be >= 1")

    @property
    def rate_bits(self):
        return self.n_latent * self.bits_per_element

    def to_dict(self):
        d = asdict(self)
        d["refine_widths"] = list(self.refine_widths)
        return d

    @classmethod
    def from_mapping(cls, mapping):
        unknown = set(mapping) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown baseline config keys: {sorted(unknown)}")
        return cls(**mapping)


def uniform_quantize(v, bits):
    """Mid-rise quantizer on [-1, 1]: returns ``(level, dequantized)``.

    Works on numpy arrays and torch tensors alike.
    """
    n = 2 ** bits
    if isinstance(v, torch.Tensor):
        level = torch.clamp(torch.floor((v.clamp(-1, 1) + 1) / 2 * n), 0, n - 1)
        return level.long(), (level + 0.5) / n * 2 - 1
    v = np.clip(np.asarray(v, dtype=np.float64), -1, 1)
    level = np.clip(np.floor((v + 1) / 2 * n), 0, n - 1).astype(np.int64)
    return level, (level + 0.5) / n * 2 - 1


def dequantize_levels(level, bits):
    return (np.asarray(level, dtype=np.float64) + 0.5) / 2 ** bits * 2 - 1


class RefineBlock(nn.Module):
    def __init__(self, channels, side_channels, widths):
        super().__init__()
        dims = [channels + side_channels, *widths, channels]
        self.convs = nn.ModuleList(nn.Conv2d(a, b, 3, padding=1) for a, b in zip(dims, dims[1:]))

    def forward(self, h, y=None):
        out = torch.cat([h, y], dim=1) if y is not None else h
        for i, conv in enumerate(self.convs):
            out = conv(out)
            if i < len(self.convs) - 1:
                out = F.leaky_relu(out, 0.3)
        return F.leaky_relu(out + h, 0.3)


class BaselineCodec(nn.Module):
    kind = "baseline"
    magic = b"CSIU"

    def __init__(self, cfg: BaselineConfig, scale=1.0, seed=0):
        super().__init__()
        self.cfg = cfg
        c, s = cfg.in_channels, cfg.input_size
        side = c if cfg.use_side_info else 0
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.enc_conv = nn.Conv2d(c, c, 3, padding=1)
            self.enc_dense = nn.Linear(c * s * s, cfg.n_latent)
            self.dec_dense = nn.Linear(cfg.n_latent, c * s * s)
            self.refine = nn.ModuleList(RefineBlock(c, side, cfg.refine_widths)
                                        for _ in range(cfg.refine_blocks))
            self.dec_out = nn.Conv2d(c, c, 3, padding=1)
        self.register_buffer("scale", torch.tensor(float(scale), dtype=torch.float64))

    @property
    def use_side_info(self):
        return self.cfg.use_side_info

    @property
    def rate_bits(self):
        return self.cfg.rate_bits

    @property
    def container_symbol(self):
        return self.cfg.bits_per_element

    def latent(self, x):
        h = F.leaky_relu(self.enc_conv(x), 0.3)
        return torch.tanh(self.enc_dense(h.flatten(1)))

    def quantized_latent(self, c_conti):
        _, c = uniform_quantize(c_conti, self.cfg.bits_per_element)
        return c_conti + (c - c_conti).detach()

    def decode_latent(self, c, y=None):
        if self.use_side_info and y is None:
            raise ValueError("side information required for decoding")
        s = self.cfg.input_size
        h = self.dec_dense(c).reshape(-1, self.cfg.in_channels, s, s)
        for block in self.refine:
            h = block(h, y if self.use_side_info else None)
        return torch.tanh(self.dec_out(h))

    def forward(self, x, y=None):
        return self.decode_latent(self.quantized_latent(self.latent(x)), y)

    def training_loss(self, batch, generator, eta):
        x, y, z = batch
        mse = F.mse_loss(self(x, y), z)
        return mse, {"denoise_loss": mse.item(), "cb_loss": 0.0}, None

    def compress(self, x_ad):
        with torch.no_grad():
            c = self.latent(to_channels_first(x_ad) / float(self.scale))
        level, _ = uniform_quantize(c.double().numpy(), self.cfg.bits_per_element)
        return np.stack([pack_bits(row, 2 ** self.cfg.bits_per_element) for row in level])

    def decompress(self, bits, y_ad=None):
        bits = np.asarray(bits)
        if bits.ndim != 2 or bits.shape[1] != self.rate_bits:
            raise ValueError(f"expected codewords of {self.rate_bits} bits, got shape {bits.shape}")
        levels = np.stack([unpack_bits(b, 2 ** self.cfg.bits_per_element) for b in bits])
        c = torch.from_numpy(dequantize_levels(levels, self.cfg.bits_per_element)).float()
        y = to_channels_first(y_ad) / float(self.scale) if self.use_side_info else None
        with torch.no_grad():
            z = self.decode_latent(c, y)
        return to_channels_last(z).astype(np.float64) * float(self.scale)

    def descriptor(self):
        return {"kind": self.kind, "model": self.cfg.to_dict()}


def baseline_train(config, dataset, val_dataset=None, out_dir=None):
    """Train the baseline with plain MSE under the main trainer's optimizer contract."""
    from .training import train
    if config.codec != "baseline":
        config.codec = "baseline"
    return train(config, dataset, val_dataset=val_dataset, out_dir=out_dir)
