"""Trainable-codebook vector quantization and codeword serialization.

A codeword is the row-major list of codebook indices over the encoder's
spatial grid, each written as a fixed-width big-endian field of
``log2(N_v)`` bits. Containers hold one codeword each and may be
concatenated in a file::

    magic (4 bytes) | version u16 | symbol u16 | length u32 (bits) | payload

``symbol`` is N_v for ``CSIC`` containers and bits-per-element for the
baseline's ``CSIU`` containers. The payload is zero-padded to a byte.
"""
import struct
from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ContainerError

N_POSITIONS = 64
CONTAINER_VERSION = 1
_CONTAINER = struct.Struct("<4sHHI")
HEADER_BYTES = _CONTAINER.size


def index_bits(n_vectors):
    n_vectors = int(n_vectors)
    if n_vectors < 2 or n_vectors & (n_vectors - 1):
        raise ValueError(f"N_v must be a power of two >= 2, got {n_vectors}")
    return n_vectors.bit_length() - 1


def rate_for(n_vectors, n_positions=N_POSITIONS):
    """Codeword length in bits: ``n_positions * log2(n_vectors)``."""
    return n_positions * index_bits(n_vectors)


class Codebook(nn.Module):
    """``N_v`` embedding vectors of dimension ``dim``."""

    def __init__(self, n_vectors, dim, generator=None):
        super().__init__()
        index_bits(n_vectors)
        self.n_vectors = n_vectors
        self.dim = dim
        bound = 1.0 / n_vectors
        init = torch.rand(n_vectors, dim, generator=generator) * 2 * bound - bound
        self.vectors = nn.Parameter(init)

    def forward(self, c_conti):
        return quantize(c_conti, self.vectors)


def quantize(c_conti, vectors):
    """Nearest-neighbour quantization of ``c_conti[..., dim]``.

    Returns ``(indices, e)`` where ``e = vectors[indices]`` keeps its graph to
    the codebook. Ties go to the lowest index.
    """
    if c_conti.shape[-1] != vectors.shape[-1]:
        raise ValueError(
            f"vector dimension {c_conti.shape[-1]} does not match codebook "
            f"dimension {vectors.shape[-1]}")
    with torch.no_grad():
        dist = ((c_conti.unsqueeze(-2) - vectors) ** 2).sum(-1)
        # argmin returns the first minimum, which gives the lowest-index tie-break
        indices = dist.argmin(-1)
    return indices, vectors[indices]


def codebook_loss(c_conti, e):
    """``||sg[c] - e||^2 + ||c - sg[e]||^2``, summed per sample, batch-averaged.

    The first term only reaches the codebook, the second only the encoder.
    """
    if c_conti.shape != e.shape:
        raise ValueError(f"shape mismatch: {tuple(c_conti.shape)} vs {tuple(e.shape)}")
    per = (c_conti.detach() - e) ** 2 + (c_conti - e.detach()) ** 2
    return per.reshape(per.shape[0], -1).sum(1).mean()


def straight_through(c_conti, e):
    """Forward value ``e``, gradient of the identity with respect to ``c_conti``."""
    return c_conti + (e - c_conti).detach()


def pack_bits(indices, n_vectors):
    """Indices -> flat 0/1 ``uint8`` array, big-endian fixed width per index."""
    width = index_bits(n_vectors)
    idx = np.asarray(indices, dtype=np.int64).reshape(-1)
    if idx.size and (idx.min() < 0 or idx.max() >= n_vectors):
        raise ValueError(f"index out of range [0, {n_vectors})")
    shifts = np.arange(width - 1, -1, -1)
    return ((idx[:, None] >> shifts) & 1).astype(np.uint8).reshape(-1)


def unpack_bits(bits, n_vectors):
    width = index_bits(n_vectors)
    bits = np.asarray(bits, dtype=np.int64).reshape(-1)
    if bits.size % width:
        raise ValueError(f"bit length {bits.size} not divisible by {width}")
    if bits.size and (bits.min() < 0 or bits.max() > 1):
        raise ValueError("bits must be 0 or 1")
    weights = 1 << np.arange(width - 1, -1, -1)
    return bits.reshape(-1, width) @ weights


@dataclass
class Codeword:
    indices: np.ndarray
    n_vectors: int

    @property
    def bits(self):
        return pack_bits(self.indices, self.n_vectors)

    @classmethod
    def from_bits(cls, bits, n_vectors):
        return cls(unpack_bits(bits, n_vectors), n_vectors)


def container_bytes(bits, symbol, magic=b"CSIC"):
    bits = np.asarray(bits, dtype=np.uint8).reshape(-1)
    return (_CONTAINER.pack(magic, CONTAINER_VERSION, symbol, bits.size)
            + np.packbits(bits).tobytes())


def parse_containers(buf, magic=b"CSIC"):
    """Parse concatenated containers; returns ``(symbol, [bits, ...])``."""
    pos = 0
    symbol = None
    out = []
    if not buf:
        raise ContainerError("empty codeword file")
    while pos < len(buf):
        if pos + HEADER_BYTES > len(buf):
            raise ContainerError(f"truncated container header at byte {pos}")
        got, version, sym, n_bits = _CONTAINER.unpack_from(buf, pos)
        if got != magic:
            raise ContainerError(f"bad container magic {got!r}, expected {magic!r}")
        if version != CONTAINER_VERSION:
            raise ContainerError(f"unsupported container version {version}")
        if symbol is not None and sym != symbol:
            raise ContainerError("containers in one file disagree on their symbol size")
        symbol = sym
        pos += HEADER_BYTES
        n_bytes = (n_bits + 7) // 8
        if pos + n_bytes > len(buf):
            raise ContainerError(f"truncated payload in container {len(out)}")
        payload = np.frombuffer(buf, dtype=np.uint8, count=n_bytes, offset=pos)
        out.append(np.unpackbits(payload)[:n_bits])
        pos += n_bytes
    return symbol, out
