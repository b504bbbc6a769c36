import json
import logging

import numpy as np
import pytest

from utils import (
    RuntimeFlags,
    configure_logging,
    load_runtime_flags,
    read_report,
    read_solution_csv,
    suggest_name,
    write_field_csv,
    write_paths_meta,
    write_report,
)


def test_field_csv_keeps_full_precision(tmp_path):
    rng = np.random.default_rng(0)
    nodes = rng.uniform(-1, 1, size=(6, 2))
    values = rng.normal(size=(6, 2)) / 3.0
    errors = np.abs(rng.normal(size=(6, 2)))
    path = write_field_csv(tmp_path / "solution.csv", nodes, values, errors)

    header = path.read_text(encoding="utf-8").splitlines()[0]
    assert header == "x1,x2,u1,u2,se1,se2"
    read_nodes, read_values, read_errors = read_solution_csv(path)
    assert np.array_equal(read_nodes, nodes)
    assert np.array_equal(read_values, values)
    assert np.array_equal(read_errors, errors)


def test_missing_solution_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_solution_csv(tmp_path / "nothing.csv")


def test_report_lines(tmp_path):
    path = write_paths_meta(tmp_path / "paths_meta.txt", 7, 1e-3, 0.0, max_steps=100)
    entries = read_report(path)
    assert entries["seed"] == "7"
    assert float(entries["step"]) == 1e-3
    assert entries["max_steps"] == "100"

    write_report(tmp_path / "report.txt", ["converged: True", "sweeps: 4"])
    assert read_report(tmp_path / "report.txt") == {"converged": "True", "sweeps": "4"}


@pytest.mark.parametrize(
    "name,expected",
    [
        ("densty", "density"),
        ("Sphere_Surface", "sphere_surface"),
        ("linear-decay", "linear_decay"),
        ("boxface", "box_face"),
        ("gaussian", None),
    ],
)
def test_suggest_name(name, expected):
    catalog = ("density", "sphere_surface", "box_face", "linear_decay", "rotation")
    assert suggest_name(name, catalog) == expected


def test_runtime_flags(tmp_path):
    assert load_runtime_flags(tmp_path / "absent.json") == RuntimeFlags()

    path = tmp_path / "config.json"
    path.write_text(json.dumps({"Show progress bars": True, "Log level": "info", "Default worker threads": 3}))
    assert load_runtime_flags(path) == RuntimeFlags(progress=True, log_level="INFO", threads=3)

    path.write_text("{not json")
    assert load_runtime_flags(path) == RuntimeFlags()


def test_configure_logging_installs_one_handler():
    root = logging.getLogger()
    saved_handlers, saved_level = list(root.handlers), root.level
    try:
        configure_logging("INFO")
        configure_logging("debug")
        assert len(root.handlers) == 1
        assert root.level == logging.DEBUG
    finally:
        for handler in list(root.handlers):
            root.removeHandler(handler)
        for handler in saved_handlers:
            root.addHandler(handler)
        root.setLevel(saved_level)
