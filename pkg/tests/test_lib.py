import logging
import os

import pytest

from flexisurf.lib import (
    ensure_output_dir,
    expand_flexi_environment_variables,
    expand_targets,
    get_config,
    target_slug,
    write_config,
)


def test_expand_flexi_environment_variables(monkeypatch):
    assert expand_flexi_environment_variables("") == ""

    # Supports default if FLEXI_ variable is not found
    assert expand_flexi_environment_variables("resolution: ${FLEXI_RES:-32}") == "resolution: 32"

    assert expand_flexi_environment_variables("target: ${FLEXI_TARGET:-builtin:box}") == "target: builtin:box"

    # Should expand FLEXI_ variables if found
    monkeypatch.setenv("FLEXI_RES", "64")
    assert expand_flexi_environment_variables("resolution: ${FLEXI_RES:-32}") == "resolution: 64"

    assert expand_flexi_environment_variables("resolution: ${FLEXI_RES}") == "resolution: 64"

    # Should not expand non FLEXI_ prefixed variables
    assert expand_flexi_environment_variables("target: ${TARGET:-sphere}") == "target: ${TARGET:-sphere}"

    # Raises exception if unsupported format is used
    with pytest.raises(AssertionError) as excinfo:
        expand_flexi_environment_variables("resolution: $FLEXI_FOO")
    assert "faulty FLEXI_ environment" in str(excinfo.value)

    # Raises exception if no default value is provided
    with pytest.raises(AssertionError) as excinfo:
        expand_flexi_environment_variables("resolution: ${FLEXI_FOO}")
    assert "not find environment variable FLEXI_FOO or default value" in str(excinfo.value)


def test_get_config(tmp_path, monkeypatch):
    path = tmp_path / "run.yaml"
    path.write_text("resolution: ${FLEXI_RES:-16}\nweights:\n  sdf: 100\n")
    assert get_config(str(path)) == {"resolution": 16, "weights": {"sdf": 100}}

    monkeypatch.setenv("FLEXI_RES", "24")
    assert get_config(str(path))["resolution"] == 24


def test_get_config_errors(tmp_path):
    with pytest.raises(ValueError) as excinfo:
        get_config(str(tmp_path / "missing.yaml"))
    assert "not found" in str(excinfo.value)

    listing = tmp_path / "list.yaml"
    listing.write_text("- 1\n- 2\n")
    with pytest.raises(ValueError) as excinfo:
        get_config(str(listing))
    assert "Expected a mapping" in str(excinfo.value)

    broken = tmp_path / "broken.yaml"
    broken.write_text("resolution: 16\nresolution: 32\n")
    with pytest.raises(ValueError) as excinfo:
        get_config(str(broken))
    assert "Invalid run configuration" in str(excinfo.value)

    empty = tmp_path / "empty.yaml"
    empty.write_text("")
    assert get_config(str(empty)) == {}


def test_write_config_reads_back(tmp_path):
    path = str(tmp_path / "config.yaml")
    config = {"iterations": 10, "rotate": [22.5, 22.5, 0.0], "weights": {"sdf": 2000.0}}
    write_config(config, path)
    assert get_config(path) == config


def test_expand_targets(tmp_path):
    assert expand_targets(["builtin:{sphere,box}"]) == ["builtin:sphere", "builtin:box"]

    (tmp_path / "a.obj").write_text("")
    (tmp_path / "nested").mkdir()
    (tmp_path / "nested" / "b.obj").write_text("")
    (tmp_path / "notes.txt").write_text("")
    found = expand_targets([str(tmp_path)])
    assert sorted(os.path.basename(f) for f in found) == ["a.obj", "b.obj"]

    (tmp_path / "none").mkdir()
    with pytest.raises(ValueError):
        expand_targets([str(tmp_path / "none")])


def test_target_slug():
    assert target_slug("builtin:box") == "box"
    assert target_slug("/data/meshes/fan disk.obj") == "fan_disk"


def test_ensure_output_dir(tmp_path):
    path = str(tmp_path / "out" / "run")
    assert ensure_output_dir(path) == path
    assert os.path.isdir(path)


def test_log_exec_details(monkeypatch, caplog):
    from flexisurf import logger as logger_module

    monkeypatch.setattr(logger_module, "timings", [])
    logger_module.log_exec_details("fit (mc)", "box", 1.234)
    logger_module.log_exec_details("fit (flexicubes)", "box", 90.0)
    assert len(logger_module.timings) == 2
    assert "1.23s" in logger_module.timings[0]
    slow = [r.message for r in caplog.get_records("call") if r.levelno == logging.INFO]
    assert slow == ["😴 Observed slow fit (flexicubes) (90.0s) for box"]
