"""Command-line behaviour not covered by the end-to-end determinism check:
error exit codes, manifests, and the image writer."""

import json
import os

import numpy as np
import pytest

from kvdiff import fixtures
from kvdiff.cli import run_command, write_pgm


@pytest.fixture(scope="module")
def fixture_dir(tmp_path_factory):
    d = tmp_path_factory.mktemp("cli_fixtures")
    fixtures.write_fixture_files(str(d))
    return d


def test_error_exit_code_on_corrupt_checkpoint(tmp_path, fixture_dir, capsys):
    bad = str(tmp_path / "bad.ckpt")
    with open(bad, "wb") as fh:
        fh.write(b"not a checkpoint")
    rc = run_command(["sample", "--model", bad, "--prompt", "photo of a blob",
                      "--out", str(tmp_path / "img.pgm")])
    assert rc == 2
    assert "error:" in capsys.readouterr().err


def test_error_exit_code_on_bad_config(tmp_path, fixture_dir):
    cfg = str(tmp_path / "cfg.json")
    with open(cfg, "w") as fh:
        json.dump({"train": {"optimizer": "adam"}}, fh)
    rc = run_command(["retrieve-reg", "--config", cfg,
                      "--pool", str(fixture_dir / "reg_pool.json"),
                      "--vocab", str(fixture_dir / "vocab.json"),
                      "--target-caption", "photo of a blob",
                      "--out", str(tmp_path / "reg.json")])
    assert rc == 2


def test_retrieve_reg_writes_artifact_and_manifest(tmp_path, fixture_dir):
    out = str(tmp_path / "reg.json")
    rc = run_command(["retrieve-reg",
                      "--pool", str(fixture_dir / "reg_pool.json"),
                      "--vocab", str(fixture_dir / "vocab.json"),
                      "--target-caption", "photo of a blob",
                      "--cap", "7", "--out", out])
    assert rc == 0
    with open(out) as fh:
        rows = json.load(fh)
    assert len(rows) == 7
    assert all(r["caption"] == "photo of a blob" for r in rows)
    with open(out + ".manifest.json") as fh:
        manifest = json.load(fh)
    assert manifest["command"] == "retrieve-reg"
    assert len(manifest["config_hash"]) == 16


def test_write_pgm(tmp_path):
    img = np.array([[-1.0, 0.0], [1.0, 0.5]])
    path = str(tmp_path / "img.pgm")
    write_pgm(path, img)
    raw = open(path, "rb").read()
    header, pixels = raw[:11], raw[11:]
    assert header == b"P5\n2 2\n255\n"
    assert list(pixels) == [0, 127, 255, 191]


def test_fixture_writer_produces_cli_inputs(fixture_dir):
    expected = {"vocab.json", "pretrain.json", "concept_blob.json",
                "concept_ring.json", "reg_pool.json", "reg_captions.json"}
    assert expected <= set(os.listdir(fixture_dir))


def test_unknown_subcommand_exits_nonzero(capsys):
    assert run_command(["frobnicate"]) != 0
    capsys.readouterr()
