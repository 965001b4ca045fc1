import json
import logging
import time

import pytest

from opflayer.utils import (
    WORKERS_ENV,
    default_workers,
    ordered_map,
    package_versions,
    setup_logging,
    write_manifest,
)


class TestOrderedMap:
    def test_serial(self):
        assert ordered_map(lambda v: v * v, [3, 1, 2]) == [9, 1, 4]

    def test_threads_keep_input_order(self):
        def slow_first(v):
            time.sleep(0.02 if v == 0 else 0.0)
            return v

        assert ordered_map(slow_first, list(range(6)), workers=3) == list(range(6))

    def test_exceptions_propagate(self):
        def boom(v):
            raise RuntimeError(f"sample {v}")

        with pytest.raises(RuntimeError, match="sample"):
            ordered_map(boom, [1, 2], workers=2)

    def test_empty(self):
        assert ordered_map(str, [], workers=4) == []


class TestDefaultWorkers:
    def test_from_environment(self, monkeypatch):
        monkeypatch.setenv(WORKERS_ENV, "3")
        assert default_workers() == 3

    def test_invalid_value_falls_back(self, monkeypatch, caplog):
        monkeypatch.setenv(WORKERS_ENV, "many")
        with caplog.at_level(logging.WARNING, logger="opflayer.utils"):
            assert default_workers() >= 1
        assert "Ignoring invalid" in caplog.text


def test_manifest(tmp_path):
    path = write_manifest(
        tmp_path / "run",
        "train",
        ["train", "case9.m"],
        {"seed": 7},
        7,
        ["model.pt", "history.csv"],
    )
    manifest = json.loads(path.read_text())
    assert path.name == "manifest.json"
    assert manifest["command"] == "train"
    assert manifest["seed"] == 7
    assert manifest["artifacts"] == ["history.csv", "model.pt"]
    assert set(manifest["versions"]) >= {"python", "numpy", "torch"}


def test_package_versions():
    versions = package_versions()
    assert versions["python"].count(".") == 2


def test_setup_logging_rejects_unknown_level():
    with pytest.raises(AttributeError):
        setup_logging("CHATTY")
