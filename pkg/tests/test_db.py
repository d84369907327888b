import json
import zipfile

import numpy as np
import pytest
import torch

import db
from errors import ConfigurationError


def test_canonical_json_sorts_keys():
    assert db.canonical_json({"b": 1, "a": [1, 2]}) == db.canonical_json({"a": [1, 2], "b": 1})
    assert db.canonical_json({"b": 1, "a": 2}).index('"a"') < db.canonical_json({"b": 1, "a": 2}).index('"b"')


def test_arrays_checksum_sees_names_and_shapes():
    a = np.arange(6, dtype=np.float32)
    base = db.arrays_checksum({"w": a})
    assert db.arrays_checksum({"w": a.astype(np.float64)}) == base
    assert db.arrays_checksum({"v": a}) != base
    assert db.arrays_checksum({"w": a.reshape(2, 3)}) != base


def test_archive_bytes_are_deterministic(tmp_path):
    arrays = {"net.weight": np.ones((2, 3)), "net.bias": np.zeros(2)}
    a = db.write_archive(tmp_path / "a.zip", {"kind": "x", "step": 3}, arrays, {"notes.txt": b"hi"})
    b = db.write_archive(tmp_path / "b.zip", {"step": 3, "kind": "x"}, dict(reversed(list(arrays.items()))),
                         {"notes.txt": b"hi"})
    assert a.read_bytes() == b.read_bytes()
    with zipfile.ZipFile(a) as zf:
        assert zf.namelist() == ["manifest.json", "params/net.bias.f32", "params/net.weight.f32", "notes.txt"]


def test_archive_round_trip(tmp_path):
    arrays = {"net.weight": np.arange(6, dtype=np.float32).reshape(2, 3)}
    archive = db.read_archive(db.write_archive(tmp_path / "a.zip", {"kind": "x"}, arrays, {"notes.txt": b"hi"}))
    np.testing.assert_array_equal(archive.arrays["net.weight"], arrays["net.weight"])
    assert archive.manifest["arrays"]["net.weight"]["shape"] == [2, 3]
    assert archive.manifest["byte_order"] == "little"
    assert archive.extras == {"notes.txt": b"hi"}
    with pytest.raises(FileNotFoundError):
        db.read_archive(tmp_path / "absent.zip")


def test_checkpoint_round_trip(tmp_path):
    torch.manual_seed(0)
    net = torch.nn.Linear(3, 2)
    history = [{"step": 1, "loss": 0.5}, {"step": 2, "loss": 0.25}]
    path = db.save_checkpoint(tmp_path / "c.zip", "toy", {"net": net}, {"config": {}}, history, ["step", "loss"])
    archive = db.load_checkpoint(path, "toy")
    assert db.archive_history(archive) == history

    other = torch.nn.Linear(3, 2)
    db.load_module_arrays(other, "net", archive.arrays)
    assert db.modules_checksum({"net": other}) == db.modules_checksum({"net": net})
    with pytest.raises(ConfigurationError):
        db.load_checkpoint(path, "other")


def test_tampered_parameters_are_rejected(tmp_path):
    net = torch.nn.Linear(2, 2)
    path = db.save_checkpoint(tmp_path / "c.zip", "toy", {"net": net}, {}, [], ["step"])
    archive = db.read_archive(path)
    arrays = dict(archive.arrays, **{"net.bias": archive.arrays["net.bias"] + 1})
    db.write_archive(path, archive.manifest, arrays, archive.extras)
    with pytest.raises(ConfigurationError):
        db.load_checkpoint(path, "toy")


def test_history_csv_keeps_full_precision():
    rows = [{"step": 7, "loss": 1 / 3}]
    assert db.history_from_csv(db.history_to_csv(rows, ["step", "loss"])) == rows
    assert db.history_to_csv([], ["step", "loss"]) == b"step,loss\n"


def test_json_csv_jsonl(tmp_path):
    db.write_json(tmp_path / "d" / "x.json", {"b": 1, "a": 2})
    assert db.read_json(tmp_path / "d" / "x.json") == {"a": 2, "b": 1}

    db.write_csv(tmp_path / "x.csv", [{"a": 1, "b": "z", "extra": 0}], ["a", "b"])
    assert db.read_csv(tmp_path / "x.csv") == [{"a": "1", "b": "z"}]

    db.write_jsonl(tmp_path / "x.jsonl", [{"k": 1}, {"k": 2}])
    (tmp_path / "x.jsonl").write_text((tmp_path / "x.jsonl").read_text() + "\n\n")
    assert db.read_jsonl(tmp_path / "x.jsonl") == [{"k": 1}, {"k": 2}]
    assert json.loads((tmp_path / "x.jsonl").read_text().splitlines()[0]) == {"k": 1}


def test_file_fingerprint(tmp_path):
    (tmp_path / "f").write_bytes(b"abc")
    assert db.file_fingerprint(tmp_path / "f") == db.sha256_hex(b"a", b"bc")
