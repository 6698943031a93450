import numpy as np
import pytest

from csidiff.errors import ConfigError, ContainerError, DataError
from csidiff.evaluate import (ExperimentConfig, RDPoint, deserialize, evaluate, rd_sweep,
                              read_rd_csv, reconstruct, serialize, write_rd_csv)
from csidiff.model import DiffusionCodec
from csidiff.networks import ModelConfig
from csidiff.report import curves, is_nonincreasing
from csidiff.vq import HEADER_BYTES


class StubCodec:
    """Stores a per-call lookup table so decoding can return any target exactly."""

    kind = "stub"
    magic = b"CSIC"
    container_symbol = 2
    rate_bits = 64
    use_side_info = False

    def __init__(self, table):
        self.table = table

    def compress(self, x):
        return np.zeros((len(x), 64), dtype=np.uint8)

    def decompress(self, bits, y=None):
        return self.table[: len(bits)]


def test_perfect_codec_hits_the_floor(small_dataset):
    point = evaluate(StubCodec(small_dataset.stack("z_ad").astype(np.float64)), small_dataset)
    assert point.nmse_db == pytest.approx(-120.0)


def test_zero_codec_scores_zero_db(small_dataset):
    point = evaluate(StubCodec(np.zeros((len(small_dataset), 32, 32, 2))), small_dataset)
    assert point.nmse_db == 0.0


def test_untrained_diffusion_codec_scores_zero_db(small_dataset):
    # the denoiser head starts at zero, so decoding returns all zeros
    codec = DiffusionCodec(ModelConfig.desk(n_vectors=4))
    point = evaluate(codec, small_dataset.subset(range(4)))
    assert point.nmse_db == pytest.approx(0.0, abs=1e-9)
    assert point.rate_bits == 128


def test_codeword_file_sizes():
    for n_vectors, bits in ((2, 64), (4, 128), (8, 192)):
        codec = DiffusionCodec(ModelConfig.desk(n_vectors=n_vectors))
        x = np.random.default_rng(n_vectors).standard_normal((3, 32, 32, 2))
        buf = serialize(codec, codec.compress(x))
        assert len(buf) == 3 * (HEADER_BYTES + -(-bits // 8))
        assert all(len(b) == bits for b in deserialize(codec, buf))


def test_wrong_codebook_size_is_rejected():
    a = DiffusionCodec(ModelConfig.desk(n_vectors=4))
    b = DiffusionCodec(ModelConfig.desk(n_vectors=8))
    buf = serialize(a, a.compress(np.ones((1, 32, 32, 2))))
    with pytest.raises(DataError):
        deserialize(b, buf)


def test_baseline_codewords_do_not_parse_as_diffusion():
    from csidiff.baseline import BaselineCodec, BaselineConfig
    base = BaselineCodec(BaselineConfig())
    buf = serialize(base, base.compress(np.ones((1, 32, 32, 2))))
    assert len(buf) == HEADER_BYTES + 17
    with pytest.raises(ContainerError):
        deserialize(DiffusionCodec(ModelConfig.desk()), buf)


def test_reconstruct_needs_side_info(small_dataset):
    codec = DiffusionCodec(ModelConfig.desk(use_side_info=True))
    ds = small_dataset.subset(range(2))
    for s in ds.samples:
        s.y_ad = None
    with pytest.raises(DataError):
        reconstruct(codec, ds)
    with pytest.raises(DataError):
        reconstruct(codec, ds.subset([]))


def test_csv_round_trip(tmp_path):
    pts = [RDPoint("diffusion", 64, -3.25, False, 10, 0, "syn"),
           RDPoint("baseline", 132, 0.1 + 0.2, True, 10, 1, "syn")]
    write_rd_csv(pts, tmp_path / "rd.csv")
    assert read_rd_csv(tmp_path / "rd.csv") == pts
    header = (tmp_path / "rd.csv").read_text().splitlines()[0]
    assert header == "codec,rate_bits,nmse_db,side_info,train_steps,seed,dataset"


def test_monotone_helper():
    pts = [RDPoint("d", 64, -1.0), RDPoint("d", 128, -2.0), RDPoint("d", 192, -2.0)]
    (key, curve), = curves(pts).items()
    assert key == ("d", False)
    assert [p.rate_bits for p in curve] == [64, 128, 192]
    assert is_nonincreasing(curve)
    assert not is_nonincreasing([RDPoint("d", 64, -2.0), RDPoint("d", 128, -1.0)])


def test_experiment_config_validation():
    with pytest.raises(ConfigError):
        ExperimentConfig(codecs=[{"kind": "jpeg", "rates": [1]}]).validate()
    with pytest.raises(ConfigError):
        ExperimentConfig.from_mapping({"bogus": 1})


def test_small_rd_sweep(tmp_path):
    cfg = ExperimentConfig(
        channel={"n_subcarriers": 64, "n_paths": 4}, n_train=6, n_test=3,
        codecs=[{"kind": "diffusion", "rates": [2, 4, 8]}, {"kind": "baseline", "rates": [22]}],
        training={"n_train": 2, "batch_size": 3, "profile": "desk", "log_every": 0,
                  "val_every": 0, "checkpoint_every": 0},
        out_dir=str(tmp_path / "sweep"))
    points = rd_sweep(cfg)
    assert [p.rate_bits for p in points] == [64, 128, 192, 132]
    assert all(np.isfinite(p.nmse_db) for p in points)
    assert read_rd_csv(tmp_path / "sweep" / "rd.csv") == points
    svg = (tmp_path / "sweep" / "rd.svg").read_text()
    assert svg.lstrip().startswith("<?xml") and "<svg" in svg
