"""Encoder, codeword up-projection and the conditional U-Net denoiser.

Tensors are channels-first ``(batch, channels, angle, delay)``.
"""
import math
from dataclasses import asdict, dataclass, field

import torch
import torch.nn.functional as F
from torch import nn


@dataclass
class ModelConfig:
    """Architecture descriptor of the diffusion codec."""

    input_size: int = 32
    in_channels: int = 2
    enc_dims: tuple = (64, 128)
    embed_dim: int = 128
    n_vectors: int = 4
    up_dims: tuple = (64, 8)
    unet_dim: int = 64
    unet_mults: tuple = (1, 2, 3, 4)
    blocks_per_level: int = 2
    time_freqs: int = 64
    use_side_info: bool = False
    T: int = 4

    def __post_init__(self):
        self.enc_dims = tuple(self.enc_dims)
        self.up_dims = tuple(self.up_dims)
        self.unet_mults = tuple(self.unet_mults)

    @property
    def latent_size(self):
        return self.input_size // 2 ** len(self.enc_dims)

    @property
    def n_positions(self):
        return self.latent_size ** 2

    @property
    def cond_channels(self):
        return self.up_dims[-1] + (self.in_channels if self.use_side_info else 0)

    def to_dict(self):
        d = asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def full(cls, **overrides):
        return cls(**overrides)

    @classmethod
    def desk(cls, **overrides):
        base = dict(enc_dims=(32, 64), embed_dim=64, up_dims=(32, 8),
                    unet_dim=16, unet_mults=(1, 2), blocks_per_level=1)
        base.update(overrides)
        return cls(**base)


PROFILES = {"full": ModelConfig.full, "desk": ModelConfig.desk}


def _norm(channels):
    return nn.GroupNorm(8 if channels % 8 == 0 else 1, channels)


class ResnetBlock(nn.Module):
    """norm -> SiLU -> conv, twice, with an optional time shift and a skip."""

    def __init__(self, dim_in, dim_out, time_dim=None):
        super().__init__()
        self.norm1 = _norm(dim_in)
        self.conv1 = nn.Conv2d(dim_in, dim_out, 3, padding=1)
        self.time = nn.Linear(time_dim, dim_out) if time_dim else None
        self.norm2 = _norm(dim_out)
        self.conv2 = nn.Conv2d(dim_out, dim_out, 3, padding=1)
        self.skip = nn.Conv2d(dim_in, dim_out, 1) if dim_in != dim_out else nn.Identity()

    def forward(self, x, t_emb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.time is not None:
            h = h + self.time(F.silu(t_emb))[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return h + self.skip(x)


class Downsample(nn.Module):
    def __init__(self, dim_in, dim_out=None):
        super().__init__()
        self.conv = nn.Conv2d(dim_in, dim_out or dim_in, 4, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, dim_in, dim_out=None):
        super().__init__()
        self.conv = nn.ConvTranspose2d(dim_in, dim_out or dim_in, 4, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class LinearAttention(nn.Module):
    """Softmax-kernel linear attention over spatial positions, residual."""

    def __init__(self, dim, heads=4, dim_head=32):
        super().__init__()
        self.heads = heads
        self.scale = dim_head ** -0.5
        hidden = heads * dim_head
        self.norm = _norm(dim)
        self.to_qkv = nn.Conv2d(dim, hidden * 3, 1, bias=False)
        self.to_out = nn.Conv2d(hidden, dim, 1)

    def forward(self, x):
        b, c, h, w = x.shape
        qkv = self.to_qkv(self.norm(x)).chunk(3, dim=1)
        q, k, v = (t.reshape(b, self.heads, -1, h * w) for t in qkv)
        q = q.softmax(dim=-2) * self.scale
        k = k.softmax(dim=-1)
        context = torch.einsum("bhdn,bhen->bhde", k, v)
        out = torch.einsum("bhde,bhdn->bhen", context, q)
        return x + self.to_out(out.reshape(b, -1, h, w))


def sinusoidal_features(t, n_freqs):
    """``[sin(t w_k), cos(t w_k)]`` for ``n_freqs`` geometric frequencies."""
    t = torch.as_tensor(t, dtype=torch.float32).reshape(-1, 1)
    k = torch.arange(n_freqs, dtype=torch.float32)
    freqs = torch.exp(-math.log(10000.0) * k / n_freqs)
    return torch.cat([torch.sin(t * freqs), torch.cos(t * freqs)], dim=-1)


class TimeEmbedding(nn.Module):
    def __init__(self, n_freqs, dim):
        super().__init__()
        self.n_freqs = n_freqs
        self.mlp = nn.Sequential(nn.Linear(2 * n_freqs, dim), nn.SiLU(), nn.Linear(dim, dim))

    def forward(self, t):
        feats = sinusoidal_features(t, self.n_freqs)
        return self.mlp(feats.to(self.mlp[0].weight.dtype))


class Encoder(nn.Module):
    """``(B, 2, 32, 32) -> (B, embed_dim, 8, 8)`` via ResNet block + downsample stages."""

    def __init__(self, cfg):
        super().__init__()
        dims = cfg.enc_dims
        # no normalization before this conv: per-sample norms would erase the signal energy
        self.conv_in = nn.Conv2d(cfg.in_channels, dims[0], 3, padding=1)
        stages = []
        prev = dims[0]
        for d in dims:
            stages.append(nn.ModuleList([ResnetBlock(prev, d), Downsample(d)]))
            prev = d
        self.stages = nn.ModuleList(stages)
        self.norm_out = _norm(prev)
        self.conv_out = nn.Conv2d(prev, cfg.embed_dim, 1)
        self.out_shape = (cfg.embed_dim, cfg.latent_size, cfg.latent_size)

    def forward(self, x):
        h = self.conv_in(x)
        for block, down in self.stages:
            h = down(block(h))
        return self.conv_out(F.silu(self.norm_out(h)))


class UpProjection(nn.Module):
    """Quantized latent ``(B, E, 8, 8)`` -> conditioning features ``(B, 8, 32, 32)``."""

    def __init__(self, cfg):
        super().__init__()
        stages = []
        prev = cfg.embed_dim
        for d in cfg.up_dims:
            stages.append(nn.ModuleList([ResnetBlock(prev, d), Upsample(d)]))
            prev = d
        self.stages = nn.ModuleList(stages)

    def forward(self, e):
        h = e
        for block, up in self.stages:
            h = up(block(h))
        return h


class UNet(nn.Module):
    """Time-conditioned U-Net predicting the clean target from ``z_t`` and conditioning."""

    def __init__(self, cfg):
        super().__init__()
        dim = cfg.unet_dim
        time_dim = 4 * dim
        self.time_embed = TimeEmbedding(cfg.time_freqs, time_dim)
        self.in_channels = cfg.in_channels + cfg.cond_channels
        self.conv_in = nn.Conv2d(self.in_channels, dim, 3, padding=1)

        dims = [dim * m for m in cfg.unet_mults]
        n_levels = len(dims)
        self.downs = nn.ModuleList()
        skip_channels = []
        ch = dim
        for i, d in enumerate(dims):
            blocks = nn.ModuleList()
            for _ in range(cfg.blocks_per_level):
                blocks.append(ResnetBlock(ch, d, time_dim))
                ch = d
                skip_channels.append(ch)
            down = Downsample(ch) if i < n_levels - 1 else nn.Identity()
            self.downs.append(nn.ModuleList([blocks, down]))

        self.mid1 = ResnetBlock(ch, ch, time_dim)
        self.mid_attn = LinearAttention(ch)
        self.mid2 = ResnetBlock(ch, ch, time_dim)

        self.ups = nn.ModuleList()
        for i, d in reversed(list(enumerate(dims))):
            blocks = nn.ModuleList()
            for _ in range(cfg.blocks_per_level):
                blocks.append(ResnetBlock(ch + skip_channels.pop(), d, time_dim))
                ch = d
            up = Upsample(ch) if i > 0 else nn.Identity()
            self.ups.append(nn.ModuleList([blocks, up]))

        self.norm_out = _norm(ch)
        self.conv_out = nn.Conv2d(ch, cfg.in_channels, 3, padding=1)
        # zero head: the untrained denoiser predicts exactly 0
        nn.init.zeros_(self.conv_out.weight)
        nn.init.zeros_(self.conv_out.bias)

    def forward(self, x, t):
        if x.shape[1] != self.in_channels:
            raise ValueError(f"U-Net expects {self.in_channels} input channels, got {x.shape[1]}")
        t_emb = self.time_embed(t)
        h = self.conv_in(x)
        skips = []
        for blocks, down in self.downs:
            for block in blocks:
                h = block(h, t_emb)
                skips.append(h)
            h = down(h)
        h = self.mid2(self.mid_attn(self.mid1(h, t_emb)), t_emb)
        for blocks, up in self.ups:
            for block in blocks:
                h = block(torch.cat([h, skips.pop()], dim=1), t_emb)
            h = up(h)
        return self.conv_out(F.silu(self.norm_out(h)))


def count_parameters(module):
    return sum(p.numel() for p in module.parameters())
