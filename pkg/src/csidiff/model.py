"""The diffusion codec: VQ encoder plus codeword/side-info conditioned DDIM decoder."""
import numpy as np
import torch
from torch import nn

from .diffusion import cosine_schedule, ddim_sample, perturb
from .networks import Encoder, ModelConfig, UNet, UpProjection
from .vq import Codebook, codebook_loss, pack_bits, rate_for, straight_through, unpack_bits


def to_channels_first(blocks):
    """``(N, angle, delay, 2)`` numpy -> ``(N, 2, angle, delay)`` float32 tensor."""
    return torch.from_numpy(np.ascontiguousarray(
        np.moveaxis(np.asarray(blocks, dtype=np.float32), -1, 1)))


def to_channels_last(tensor):
    return np.moveaxis(tensor.detach().cpu().numpy(), 1, -1)


class DiffusionCodec(nn.Module):
    kind = "diffusion"
    magic = b"CSIC"

    def __init__(self, cfg: ModelConfig, scale=1.0, seed=0):
        super().__init__()
        self.cfg = cfg
        gen = torch.Generator().manual_seed(seed)
        # seed the default generator too so layer init is reproducible
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.encoder = Encoder(cfg)
            self.codebook = Codebook(cfg.n_vectors, cfg.embed_dim, generator=gen)
            self.up = UpProjection(cfg)
            self.unet = UNet(cfg)
        self.schedule = cosine_schedule(cfg.T)
        self.register_buffer("scale", torch.tensor(float(scale), dtype=torch.float64))

    @property
    def use_side_info(self):
        return self.cfg.use_side_info

    @property
    def rate_bits(self):
        return rate_for(self.cfg.n_vectors, self.cfg.n_positions)

    @property
    def container_symbol(self):
        return self.cfg.n_vectors

    # -- building blocks -------------------------------------------------
    def encode_continuous(self, x):
        if tuple(x.shape[1:]) != (self.cfg.in_channels, self.cfg.input_size, self.cfg.input_size):
            raise ValueError(f"encoder input must be (B, {self.cfg.in_channels}, "
                             f"{self.cfg.input_size}, {self.cfg.input_size}), got {tuple(x.shape)}")
        return self.encoder(x)

    def quantize(self, c_conti):
        """``(B, E, h, w)`` -> indices ``(B, h*w)`` row-major and embeddings ``(B, h*w, E)``."""
        b, e_dim = c_conti.shape[:2]
        vecs = c_conti.permute(0, 2, 3, 1).reshape(b, -1, e_dim)
        indices, e = self.codebook(vecs)
        return indices, vecs, e

    def _grid(self, vecs):
        s = self.cfg.latent_size
        return vecs.reshape(vecs.shape[0], s, s, -1).permute(0, 3, 1, 2)

    def conditioning(self, e_vecs):
        return self.up(self._grid(e_vecs))

    def denoise(self, z_t, cond, y, t):
        """Predict the clean target from ``z_t`` given conditioning features and side info."""
        if isinstance(t, int):
            if not 1 <= t <= self.cfg.T:
                raise ValueError(f"t must lie in [1, {self.cfg.T}], got {t}")
            t = torch.full((z_t.shape[0],), t, dtype=torch.long)
        parts = [z_t, cond]
        if self.cfg.use_side_info:
            if y is None:
                raise ValueError("this codec was built with side information; y is required")
            parts.append(y)
        return self.unet(torch.cat(parts, dim=1), t)

    def training_loss(self, batch, generator, eta):
        """Weighted denoising loss plus ``eta`` times the codebook loss."""
        x, y, z = batch
        n = z.shape[0]
        t = torch.randint(1, self.cfg.T + 1, (n,), generator=generator)
        eps = torch.randn(z.shape, generator=generator)
        c_conti = self.encode_continuous(x)
        indices, vecs, e = self.quantize(c_conti)
        cond = self.conditioning(straight_through(vecs, e))
        z_t = perturb(z, t.numpy(), eps, self.schedule)
        pred = self.denoise(z_t, cond, y, t)
        weight = z.new_tensor(self.schedule.snr_weight(t.numpy()))
        denoise_loss = (weight * ((z - pred) ** 2).reshape(n, -1).sum(1)).mean()
        cb = codebook_loss(vecs, e)
        loss = denoise_loss + eta * cb if eta else denoise_loss
        return loss, {"denoise_loss": denoise_loss.item(), "cb_loss": cb.item()}, indices

    # -- inference -------------------------------------------------------
    @torch.no_grad()
    def encode_indices(self, x):
        indices, _, _ = self.quantize(self.encode_continuous(x))
        return indices

    @torch.no_grad()
    def decode_indices(self, indices, y=None):
        indices = torch.as_tensor(indices, dtype=torch.long)
        if indices.ndim != 2 or indices.shape[1] != self.cfg.n_positions:
            raise ValueError(f"expected (B, {self.cfg.n_positions}) indices, got {tuple(indices.shape)}")
        if indices.min() < 0 or indices.max() >= self.cfg.n_vectors:
            raise ValueError(f"codeword index outside codebook of size {self.cfg.n_vectors}")
        cond = self.conditioning(self.codebook.vectors[indices])
        shape = (indices.shape[0], self.cfg.in_channels, self.cfg.input_size, self.cfg.input_size)
        z_T = torch.zeros(shape)
        return ddim_sample(lambda z, t: self.denoise(z, cond, y, t), z_T, self.schedule)

    def _normalized(self, blocks):
        return to_channels_first(blocks) / float(self.scale)

    def compress(self, x_ad, batch_size=256):
        """Un-normalized ``(N, 32, 32, 2)`` blocks -> bits ``(N, rate_bits)``."""
        was_training = self.training
        self.eval()
        out = []
        for i in range(0, len(x_ad), batch_size):
            idx = self.encode_indices(self._normalized(x_ad[i:i + batch_size]))
            out.extend(pack_bits(row, self.cfg.n_vectors) for row in idx.numpy())
        self.train(was_training)
        return np.stack(out)

    def decompress(self, bits, y_ad=None, batch_size=256):
        """Bits ``(N, rate_bits)`` (+ side info) -> un-normalized ``(N, 32, 32, 2)``."""
        bits = np.asarray(bits)
        if bits.ndim != 2 or bits.shape[1] != self.rate_bits:
            raise ValueError(f"expected codewords of {self.rate_bits} bits, got shape {bits.shape}")
        if self.use_side_info and y_ad is None:
            raise ValueError("side information required for decoding")
        was_training = self.training
        self.eval()
        out = []
        for i in range(0, len(bits), batch_size):
            idx = np.stack([unpack_bits(b, self.cfg.n_vectors) for b in bits[i:i + batch_size]])
            y = self._normalized(y_ad[i:i + batch_size]) if self.use_side_info else None
            z = self.decode_indices(idx, y)
            out.append(to_channels_last(z).astype(np.float64) * float(self.scale))
        self.train(was_training)
        return np.concatenate(out)

    def descriptor(self):
        return {"kind": self.kind, "model": self.cfg.to_dict()}
