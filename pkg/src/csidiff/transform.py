"""Spatial-frequency <-> cropped angular-delay conversion and the NMSE metric.

All FFTs use the unitary ("ortho") normalization so the forward and inverse
transforms are exact inverses and preserve energy.
"""
from dataclasses import dataclass

import numpy as np

DELAY_TAPS = 32
NMSE_FLOOR = 1e-12


@dataclass
class AngularDelayBlock:
    """Real angular-delay array ``[..., angle, delay, 2]`` with its scale."""

    data: np.ndarray
    scale: float = 1.0

    def __post_init__(self):
        if not self.scale > 0:
            raise ValueError(f"scale must be positive, got {self.scale}")


def to_angular_delay(raw, n_delay=DELAY_TAPS):
    """2D IFFT over (antenna, subcarrier), keep the first ``n_delay`` taps.

    ``raw`` is complex with shape ``[..., n_antennas, n_subcarriers]``; the
    result is real with shape ``[..., n_antennas, n_delay, 2]``.
    """
    raw = np.asarray(raw)
    if raw.ndim < 2:
        raise ValueError("raw CSI must have at least two axes")
    if raw.shape[-1] < n_delay:
        raise ValueError(
            f"need at least {n_delay} subcarriers, got {raw.shape[-1]}")
    ad = np.fft.ifft2(raw, axes=(-2, -1), norm="ortho")[..., :n_delay]
    return np.stack([ad.real, ad.imag], axis=-1)


def from_angular_delay(block, n_subcarriers):
    """Zero-pad the delay axis to ``n_subcarriers`` and apply the 2D FFT."""
    block = np.asarray(block.data if isinstance(block, AngularDelayBlock) else block)
    if block.ndim < 3 or block.shape[-1] != 2:
        raise ValueError(f"expected [..., angle, delay, 2], got {block.shape}")
    n_delay = block.shape[-2]
    if n_subcarriers < n_delay:
        raise ValueError(
            f"n_subcarriers ({n_subcarriers}) smaller than delay width ({n_delay})")
    ad = block[..., 0] + 1j * block[..., 1]
    pad = [(0, 0)] * (ad.ndim - 1) + [(0, n_subcarriers - n_delay)]
    return np.fft.fft2(np.pad(ad, pad), axes=(-2, -1), norm="ortho")


def retained_energy_ratio(raw, n_delay=DELAY_TAPS):
    """Fraction of delay-domain energy kept by the crop, per sample."""
    full = np.fft.ifft2(np.asarray(raw), axes=(-2, -1), norm="ortho")
    power = np.abs(full) ** 2
    return power[..., :n_delay].sum(axis=(-2, -1)) / power.sum(axis=(-2, -1))


def nmse(z, z_hat, batched=True):
    """Mean over samples of ``||z - z_hat||^2 / ||z||^2`` (real or complex input).

    With ``batched=True`` axis 0 indexes samples; otherwise the whole array
    is one sample.
    """
    z, z_hat = np.asarray(z), np.asarray(z_hat)
    dtype = np.complex128 if np.iscomplexobj(z) or np.iscomplexobj(z_hat) else np.float64
    z, z_hat = z.astype(dtype), z_hat.astype(dtype)
    if z.shape != z_hat.shape:
        raise ValueError(f"shape mismatch: {z.shape} vs {z_hat.shape}")
    if not batched:
        z, z_hat = z[None], z_hat[None]
    z = z.reshape(z.shape[0], -1)
    z_hat = z_hat.reshape(z_hat.shape[0], -1)
    ref = np.sum(np.abs(z) ** 2, axis=1)
    if np.any(ref == 0):
        raise ValueError("NMSE undefined for an all-zero reference sample")
    return float(np.mean(np.sum(np.abs(z - z_hat) ** 2, axis=1) / ref))


def to_db(linear):
    return float(10.0 * np.log10(max(linear, NMSE_FLOOR)))


def nmse_db(z, z_hat, batched=True):
    return to_db(nmse(z, z_hat, batched=batched))


def fit_scale(blocks, percentile=99.9):
    """Dataset-level scale mapping the given percentile of |entries| to 1."""
    scale = float(np.percentile(np.abs(np.asarray(blocks)), percentile))
    return scale if scale > 0 else 1.0


def normalize(block, scale):
    return AngularDelayBlock(np.asarray(block.data) / scale, scale)


def denormalize(block):
    return AngularDelayBlock(np.asarray(block.data) * block.scale, 1.0)
