import numpy as np
import pytest
import yaml

from csidiff.cli import main
from csidiff.data import read_dataset
from csidiff.evaluate import evaluate
from csidiff.training import load_codec
from csidiff.transform import nmse_db


@pytest.fixture(scope="module")
def workdir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "channel.yaml").write_text(yaml.safe_dump({"n_subcarriers": 64, "n_paths": 4}))
    assert main(["gen-data", "--config", str(root / "channel.yaml"), "--out",
                 str(root / "train.csid"), "--count", "8", "--no-raw"]) == 0
    assert main(["gen-data", "--config", str(root / "channel.yaml"), "--out",
                 str(root / "test.csid"), "--count", "4", "--split", "test"]) == 0
    assert main(["train", "--data", str(root / "train.csid"), "--out", str(root / "run"),
                 "--set", "profile=desk", "--set", "n_train=3", "--set", "batch_size=4",
                 "--set", "use_side_info=true", "--set", "val_every=0"]) == 0
    return root


def test_generated_files(workdir):
    test = read_dataset(workdir / "test.csid")
    assert len(test) == 4 and test.split == "test"
    assert test.samples[0].x_raw.shape == (32, 64)
    assert read_dataset(workdir / "train.csid").samples[0].x_raw is None


def test_encode_decode_matches_evaluate(workdir, capsys):
    ckpt = str(workdir / "run" / "final.ckpt")
    codes = workdir / "codes.bin"
    assert main(["encode", "--checkpoint", ckpt, "--data", str(workdir / "test.csid"),
                 "--out", str(codes)]) == 0
    assert codes.stat().st_size == 4 * (12 + 16)
    out = workdir / "decoded.csid"
    assert main(["decode", "--checkpoint", ckpt, "--codes", str(codes), "--out", str(out),
                 "--side-data", str(workdir / "test.csid"), "--n-subcarriers", "64"]) == 0
    decoded = read_dataset(out)
    test = read_dataset(workdir / "test.csid")
    point = evaluate(load_codec(ckpt), test)
    assert nmse_db(test.stack("z_ad"), decoded.stack("z_ad")) == pytest.approx(point.nmse_db, abs=1e-4)
    assert decoded.samples[0].z_raw.shape == (32, 64)

    capsys.readouterr()
    assert main(["eval", "--checkpoint", ckpt, "--data", str(workdir / "test.csid"),
                 "--csv", str(workdir / "rd.csv")]) == 0
    codec, rate, value = capsys.readouterr().out.strip().split(",")
    assert (codec, rate) == ("diffusion", "128")
    assert float(value) == pytest.approx(point.nmse_db, abs=1e-4)


def test_decode_is_bit_identical(workdir):
    ckpt = str(workdir / "run" / "final.ckpt")
    codes = workdir / "codes2.bin"
    main(["encode", "--checkpoint", ckpt, "--data", str(workdir / "test.csid"), "--out", str(codes)])
    outs = []
    for name in ("a.csid", "b.csid"):
        main(["decode", "--checkpoint", ckpt, "--codes", str(codes), "--out", str(workdir / name),
              "--side-data", str(workdir / "test.csid")])
        outs.append(read_dataset(workdir / name).stack("z_ad"))
    assert outs[0].tobytes() == outs[1].tobytes()


def test_resume_via_cli(workdir):
    assert main(["train", "--data", str(workdir / "train.csid"), "--out", str(workdir / "run2"),
                 "--resume", str(workdir / "run" / "final.ckpt"), "--set", "profile=desk",
                 "--set", "n_train=4", "--set", "batch_size=4", "--set", "use_side_info=true",
                 "--set", "val_every=0"]) == 0
    lines = (workdir / "run2" / "metrics.csv").read_text().splitlines()
    assert lines[-1].startswith("4,")


def test_exit_codes(workdir, tmp_path):
    ckpt = str(workdir / "run" / "final.ckpt")
    assert main(["train", "--data", str(workdir / "train.csid"), "--out", str(tmp_path),
                 "--set", "bogus=1"]) == 2
    assert main(["train", "--data", str(workdir / "train.csid"), "--out", str(tmp_path),
                 "--set", "noequals"]) == 2
    assert main(["eval", "--checkpoint", ckpt, "--data", str(tmp_path / "missing.csid")]) == 3
    bad = tmp_path / "bad.bin"
    bad.write_bytes(b"nonsense")
    assert main(["decode", "--checkpoint", ckpt, "--codes", str(bad),
                 "--out", str(tmp_path / "o.csid")]) == 3
    assert main(["eval", "--checkpoint", str(bad), "--data", str(workdir / "test.csid")]) == 3
    with pytest.raises(SystemExit):
        main(["no-such-command"])


def test_decode_without_side_data(workdir, tmp_path):
    ckpt = str(workdir / "run" / "final.ckpt")
    codes = tmp_path / "c.bin"
    main(["encode", "--checkpoint", ckpt, "--data", str(workdir / "test.csid"), "--out", str(codes)])
    assert main(["decode", "--checkpoint", ckpt, "--codes", str(codes),
                 "--out", str(tmp_path / "o.csid")]) == 3


def test_rd_sweep_cli(tmp_path, capsys):
    cfg = {"channel": {"n_subcarriers": 64, "n_paths": 3}, "n_train": 4, "n_test": 2,
           "codecs": [{"kind": "diffusion", "rates": [2, 4]}],
           "training": {"n_train": 1, "batch_size": 2, "profile": "desk", "val_every": 0,
                        "log_every": 0, "checkpoint_every": 0}}
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(cfg))
    assert main(["rd-sweep", "--config", str(path), "--out", str(tmp_path / "o")]) == 0
    rows = [line.split(",") for line in capsys.readouterr().out.strip().splitlines()]
    assert [r[1] for r in rows] == ["64", "128"]
    assert (tmp_path / "o" / "rd.svg").exists()
    assert np.isfinite([float(r[2]) for r in rows]).all()
