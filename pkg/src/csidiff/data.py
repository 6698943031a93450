"""Synthetic UL/DL CSI generation and the ``CSID`` dataset file format.

The generator is a geometric multipath model: each path has a departure
angle at the BS array, a delay on the system's delay grid, a complex gain
and an arrival angle at the moving UE that sets its Doppler shift. UL and DL
share the geometry and differ only in carrier frequency.

File layout (little-endian)::

    "CSID" | version u16 | flags u16 | n_samples u64
    per stored field: ndim u32, dims u32 * ndim
    metadata length u32 | metadata JSON (utf-8)
    payload: samples in order, fields in declared order, float32 row-major,
             complex stored as interleaved (real, imag)

Field order is x_raw, y_raw, z_raw, x_ad, y_ad, z_ad; flags select which are
present (bit 0: side info, bit 1: raw matrices, bit 2: angular-delay forms,
bit 3: target only, i.e. no x/y fields).
"""
import json
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .errors import (ConfigError, DataError, MalformedHeaderError,
                     ShapeMismatchError, TruncatedFileError)
from .transform import DELAY_TAPS, to_angular_delay

SPEED_OF_LIGHT = 299_792_458.0

MAGIC = b"CSID"
VERSION = 1
FLAG_SIDE_INFO = 1
FLAG_RAW = 2
FLAG_AD = 4
FLAG_TARGET_ONLY = 8

_HEADER = struct.Struct("<4sHHQ")
_FIELDS = ("x_raw", "y_raw", "z_raw", "x_ad", "y_ad", "z_ad")


@dataclass
class ChannelConfig:
    n_bs_antennas: int = 32
    n_subcarriers: int = 667
    subcarrier_spacing: float = 15e3
    n_paths: int = 24
    delay_spread: float = 300e-9
    dl_carrier: float = 2.11e9
    ul_carrier: float = 1.91e9
    ue_speed: float = 5.0
    slot_interval: float = 5e-3
    n_slots: int = 71
    seed: int = 0

    def validate(self):
        for name in ("n_bs_antennas", "n_subcarriers", "n_paths", "n_slots"):
            value = getattr(self, name)
            if int(value) != value or value < 1:
                raise ConfigError(f"{name} must be a positive integer, got {value}")
        for name in ("subcarrier_spacing", "delay_spread", "dl_carrier",
                     "ul_carrier", "slot_interval"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        # zero speed is the static-channel limit and stays allowed
        if self.ue_speed < 0:
            raise ConfigError("ue_speed must be non-negative")
        if self.seed < 0:
            raise ConfigError("seed must be unsigned")
        if self.n_subcarriers < DELAY_TAPS:
            raise ConfigError(f"n_subcarriers must be >= {DELAY_TAPS}")
        return self

    @property
    def delay_resolution(self):
        return 1.0 / (self.n_subcarriers * self.subcarrier_spacing)

    @classmethod
    def from_mapping(cls, mapping):
        known = set(cls.__dataclass_fields__)
        unknown = set(mapping) - known
        if unknown:
            raise ConfigError(f"unknown channel config keys: {sorted(unknown)}")
        return cls(**mapping).validate()


@dataclass
class CsiSample:
    x_raw: Optional[np.ndarray] = None
    y_raw: Optional[np.ndarray] = None
    z_raw: Optional[np.ndarray] = None
    x_ad: Optional[np.ndarray] = None
    y_ad: Optional[np.ndarray] = None
    z_ad: Optional[np.ndarray] = None

    @property
    def has_side_info(self):
        return self.y_raw is not None or self.y_ad is not None

    @property
    def preprocessed(self):
        return self.z_ad is not None


@dataclass
class Dataset:
    samples: list
    split: str = "train"
    source: str = "synthetic"
    config: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.samples)

    @property
    def has_side_info(self):
        return bool(self.samples) and self.samples[0].has_side_info

    def stack(self, name):
        """Stack one field across samples; ``None`` if the field is absent."""
        if not self.samples or getattr(self.samples[0], name) is None:
            return None
        return np.stack([getattr(s, name) for s in self.samples])

    def subset(self, indices):
        return Dataset([self.samples[i] for i in indices], self.split,
                       self.source, dict(self.config))


def _sample_rng(config, sample_seed):
    seq = np.random.SeedSequence([config.seed, sample_seed])
    return np.random.Generator(np.random.Philox(seq))


def generate_sample(config, sample_seed):
    """Draw one (X, Y, Z) triple; a pure function of ``(config, sample_seed)``.

    X is the DL channel at slot 0; Y (UL) and Z (DL) are taken at the last
    slot. Path delays are rounded to the delay grid ``1/(N_sc * df)`` and kept
    inside the first ``DELAY_TAPS`` taps.
    """
    config.validate()
    rng = _sample_rng(config, sample_seed)
    n_paths = config.n_paths

    departure = rng.uniform(-np.pi / 2, np.pi / 2, n_paths)
    arrival = rng.uniform(0.0, 2 * np.pi, n_paths)
    delays = rng.exponential(config.delay_spread, n_paths)
    taps = np.minimum(np.round(delays / config.delay_resolution), DELAY_TAPS - 1)
    delays = taps * config.delay_resolution

    power = np.exp(-delays / config.delay_spread)
    power /= power.sum()
    gains = np.sqrt(power / 2) * (rng.standard_normal(n_paths)
                                  + 1j * rng.standard_normal(n_paths))

    antenna = np.arange(config.n_bs_antennas)[:, None]
    freqs = np.arange(config.n_subcarriers)[None, :] * config.subcarrier_spacing
    freq_response = np.exp(-2j * np.pi * delays[:, None] * freqs)

    def channel(carrier, time):
        # half-wavelength spacing at the DL carrier, fixed physical array
        steer = np.exp(1j * np.pi * antenna * np.sin(departure)[None, :]
                       * carrier / config.dl_carrier)
        doppler = config.ue_speed / SPEED_OF_LIGHT * carrier * np.cos(arrival)
        g = gains * np.exp(2j * np.pi * doppler * time)
        return (steer * g[None, :]) @ freq_response

    t_last = (config.n_slots - 1) * config.slot_interval
    return CsiSample(
        x_raw=channel(config.dl_carrier, 0.0).astype(np.complex64),
        y_raw=channel(config.ul_carrier, t_last).astype(np.complex64),
        z_raw=channel(config.dl_carrier, t_last).astype(np.complex64),
    )


def preprocess(sample):
    """Fill the angular-delay forms from the raw matrices (in place)."""
    for name in ("x", "y", "z"):
        raw = getattr(sample, f"{name}_raw")
        if raw is not None:
            setattr(sample, f"{name}_ad",
                    to_angular_delay(raw).astype(np.float32))
    return sample


def split_offset(split):
    if split == "train":
        return 0
    if split == "test":
        return 1 << 32
    raise ConfigError(f"split must be 'train' or 'test', got {split!r}")


def generate_dataset(config, count, split="train", keep_raw=True, side_info=True):
    """Generate ``count`` preprocessed samples.

    Train and test use disjoint sample-seed ranges, so the splits never share
    a sample.
    """
    config.validate()
    offset = split_offset(split)
    samples = []
    for i in range(count):
        s = preprocess(generate_sample(config, offset + i))
        if not side_info:
            s.y_raw = s.y_ad = None
        if not keep_raw:
            s.x_raw = s.y_raw = s.z_raw = None
        samples.append(s)
    return Dataset(samples, split, "synthetic", asdict(config))


def _stored_fields(flags):
    names = []
    for name in _FIELDS:
        kind = name[0]
        if name.endswith("raw") and not flags & FLAG_RAW:
            continue
        if name.endswith("ad") and not flags & FLAG_AD:
            continue
        if kind == "y" and not flags & FLAG_SIDE_INFO:
            continue
        if kind in "xy" and flags & FLAG_TARGET_ONLY:
            continue
        names.append(name)
    return names


def _as_float32(name, array):
    if name.endswith("raw"):
        return np.ascontiguousarray(array, dtype=np.complex64).view(np.float32)
    return np.ascontiguousarray(array, dtype=np.float32)


def _dataset_flags(dataset):
    first = dataset.samples[0]
    flags = 0
    if first.has_side_info:
        flags |= FLAG_SIDE_INFO
    if first.z_raw is not None:
        flags |= FLAG_RAW
    if first.z_ad is not None:
        flags |= FLAG_AD
    if first.x_raw is None and first.x_ad is None:
        flags |= FLAG_TARGET_ONLY
    return flags


def write_dataset(dataset, path):
    if not dataset.samples:
        raise DataError("refusing to write an empty dataset")
    flags = _dataset_flags(dataset)
    names = _stored_fields(flags)
    shapes = {n: _as_float32(n, getattr(dataset.samples[0], n)).shape for n in names}

    header = bytearray(_HEADER.pack(MAGIC, VERSION, flags, len(dataset)))
    for n in names:
        header += struct.pack("<I", len(shapes[n]))
        header += struct.pack(f"<{len(shapes[n])}I", *shapes[n])
    meta = json.dumps({"split": dataset.split, "source": dataset.source,
                       "config": dataset.config}).encode()
    header += struct.pack("<I", len(meta)) + meta

    with open(path, "wb") as fh:
        fh.write(header)
        for i, sample in enumerate(dataset.samples):
            for n in names:
                value = getattr(sample, n)
                if value is None:
                    raise ShapeMismatchError(f"sample {i} is missing field {n}")
                arr = _as_float32(n, value)
                if arr.shape != shapes[n]:
                    raise ShapeMismatchError(
                        f"sample {i} field {n} has shape {arr.shape}, "
                        f"expected {shapes[n]}")
                fh.write(arr.astype("<f4", copy=False).tobytes())


class _Reader:
    def __init__(self, buf):
        self.buf = buf
        self.pos = 0

    def take(self, fmt):
        size = struct.calcsize(fmt)
        if self.pos + size > len(self.buf):
            raise MalformedHeaderError("file ends inside the header")
        out = struct.unpack_from(fmt, self.buf, self.pos)
        self.pos += size
        return out


def read_dataset(path):
    buf = Path(path).read_bytes()
    r = _Reader(buf)
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise MalformedHeaderError(f"{path}: bad magic {buf[:4]!r}, expected {MAGIC!r}")
    _, version, flags, n_samples = r.take(_HEADER.format)
    if version != VERSION:
        raise MalformedHeaderError(f"{path}: unsupported format version {version}")
    names = _stored_fields(flags)
    shapes = {}
    for n in names:
        (ndim,) = r.take("<I")
        if ndim > 8:
            raise MalformedHeaderError(f"{path}: implausible rank {ndim} for {n}")
        shapes[n] = r.take(f"<{ndim}I")
    (meta_len,) = r.take("<I")
    if r.pos + meta_len > len(buf):
        raise MalformedHeaderError(f"{path}: file ends inside the metadata block")
    try:
        meta = json.loads(buf[r.pos:r.pos + meta_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise MalformedHeaderError(f"{path}: unreadable metadata: {exc}") from exc
    pos = r.pos + meta_len

    sizes = {n: int(np.prod(shapes[n])) * 4 for n in names}
    per_sample = sum(sizes.values())
    expected = pos + per_sample * n_samples
    if len(buf) > expected:
        raise ShapeMismatchError(
            f"{path}: {len(buf) - expected} trailing bytes after declared payload")

    samples = []
    for i in range(n_samples):
        if pos + per_sample > len(buf):
            raise TruncatedFileError(
                f"{path}: truncated inside sample {i} of {n_samples}", sample_index=i)
        sample = CsiSample()
        for n in names:
            arr = np.frombuffer(buf, dtype="<f4", count=sizes[n] // 4, offset=pos)
            arr = arr.reshape(shapes[n]).astype(np.float32)
            if n.endswith("raw"):
                arr = arr.view(np.complex64)
            setattr(sample, n, arr)
            pos += sizes[n]
        samples.append(sample)
    return Dataset(samples, meta.get("split", "train"),
                   meta.get("source", "synthetic"), meta.get("config", {}))


@dataclass
class LayoutDescriptor:
    """Describes an external binary or ``.npy`` CSI export.

    Attributes:
        shape: per-sample complex shape, e.g. ``(32, 32)``.
        complex_layout: ``"interleaved"`` (..., 2) real/imag last,
            ``"channels_first"`` (2, ...) real plane then imaginary plane.
        domain: ``"angular_delay"`` for pre-cropped data or
            ``"spatial_frequency"`` for raw matrices to be transformed.
        dtype: element type of the file, e.g. ``"<f4"`` or ``"<f8"``.
        offset: constant subtracted from every element after loading
            (CsiNet-style exports store values shifted by 0.5).
        count: expected number of samples, or ``None`` to infer.
    """

    shape: tuple = (32, 32)
    complex_layout: str = "channels_first"
    domain: str = "angular_delay"
    dtype: str = "<f4"
    offset: float = 0.0
    count: Optional[int] = None

    @classmethod
    def from_mapping(cls, mapping):
        unknown = set(mapping) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"unknown layout keys: {sorted(unknown)}")
        d = cls(**mapping)
        d.shape = tuple(d.shape)
        return d


def ingest_external(path, layout):
    """Load an external reconstruction-task corpus (Z = X, no side info)."""
    if isinstance(layout, dict):
        layout = LayoutDescriptor.from_mapping(layout)
    if layout.complex_layout not in ("interleaved", "channels_first"):
        raise ConfigError(f"unknown complex_layout {layout.complex_layout!r}")
    if layout.domain not in ("angular_delay", "spatial_frequency"):
        raise ConfigError(f"unknown domain {layout.domain!r}")
    path = Path(path)
    per_sample = 2 * int(np.prod(layout.shape))

    if path.suffix == ".npy":
        flat = np.load(path).astype(np.float64).reshape(-1)
    else:
        raw = path.read_bytes()
        itemsize = np.dtype(layout.dtype).itemsize
        if not raw:
            raise DataError(f"{path}: empty file")
        sample_bytes = per_sample * itemsize
        if layout.count is not None:
            expected = layout.count * sample_bytes
            if expected != len(raw):
                raise ShapeMismatchError(
                    f"{path}: descriptor expects {expected} bytes "
                    f"({layout.count} samples), file has {len(raw)}")
        elif len(raw) % sample_bytes:
            raise ShapeMismatchError(
                f"{path}: {len(raw)} bytes is not a multiple of the "
                f"{sample_bytes}-byte sample size")
        flat = np.frombuffer(raw, dtype=layout.dtype).astype(np.float64)
    if flat.size == 0:
        raise DataError(f"{path}: empty file")
    if flat.size % per_sample:
        raise ShapeMismatchError(
            f"{path}: {flat.size} elements do not divide into samples of {per_sample}")
    n = flat.size // per_sample
    if layout.count is not None and n != layout.count:
        raise ShapeMismatchError(f"{path}: expected {layout.count} samples, found {n}")

    flat = flat - layout.offset
    if layout.complex_layout == "channels_first":
        arr = flat.reshape((n, 2) + layout.shape)
        cplx = arr[:, 0] + 1j * arr[:, 1]
    else:
        arr = flat.reshape((n,) + layout.shape + (2,))
        cplx = arr[..., 0] + 1j * arr[..., 1]

    samples = []
    for c in cplx:
        if layout.domain == "angular_delay":
            ad = np.stack([c.real, c.imag], axis=-1).astype(np.float32)
            samples.append(CsiSample(x_ad=ad, z_ad=ad))
        else:
            raw_c = c.astype(np.complex64)
            s = preprocess(CsiSample(x_raw=raw_c, z_raw=raw_c))
            samples.append(s)
    return Dataset(samples, "train", "ingested",
                   {"path": str(path), "layout": asdict(layout)})
