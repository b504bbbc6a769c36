from pathlib import Path

import numpy as np
import pytest

from run_config import ConfigError, load_run, parse_run

CONFIGS = Path(__file__).resolve().parent.parent / "configs"


def base(**overrides):
    data = {
        "seed": 3,
        "domain": {"shape": "ball", "center": [0.0, 0.0], "radius": 1.0},
        "measure": [{"kind": "density", "expr": "1"}],
    }
    data.update(overrides)
    return data


def test_minimal_run():
    run = parse_run(base())
    assert run.domain.dimension == 2
    assert run.problem.n_components == 1
    assert run.path_config.base_seed == 3
    assert run.solver_config.grid_resolution == 33
    assert run.enabled_verifications == []
    assert np.allclose(run.start, [0.0, 0.0])


def test_seed_and_thread_overrides():
    run = parse_run(base(), seed=99, threads=4, progress=True)
    assert run.config.seed == 99
    assert run.path_config.base_seed == 99
    assert run.solver_config.n_jobs == 4
    assert run.solver_config.progress


def test_unknown_measure_kind_gets_a_suggestion():
    with pytest.raises(ConfigError, match="unknown measure kind 'densty'; did you mean 'density'"):
        parse_run(base(measure=[{"kind": "densty", "expr": "1"}]))
    with pytest.raises(ConfigError, match="unknown measure kind 'dirac'"):
        parse_run(base(measure=[{"kind": "dirac", "center": [0.0, 0.0]}]))


def test_unknown_shape_and_condition():
    with pytest.raises(ConfigError, match="unknown domain shape"):
        parse_run(base(domain={"shape": "sphere", "center": [0.0, 0.0], "radius": 1.0}))
    with pytest.raises(ConfigError, match="unknown condition"):
        parse_run(base(nonlinearity={"kind": "linear_decay", "alpha": 1.0, "declared": ["A6"]}))


def test_field_errors_carry_their_location():
    with pytest.raises(ConfigError, match=r"measure\.0\.radius"):
        parse_run(base(measure=[{"kind": "sphere_surface", "center": [0.0, 0.0], "mass": 1.0}]))
    with pytest.raises(ConfigError, match=r"solver\.damping"):
        parse_run(base(solver={"damping": 1.5}))
    with pytest.raises(ConfigError, match="paths.spep"):
        parse_run(base(paths={"spep": 1e-3}))
    with pytest.raises(ConfigError, match="domain"):
        parse_run({"measure": []})


def test_component_and_coordinate_checks():
    with pytest.raises(ConfigError, match="exceeds n_components"):
        parse_run(base(measure=[{"kind": "density", "expr": "1", "component": 2}]))
    with pytest.raises(ConfigError, match="expected 2 coordinates"):
        parse_run(base(measure=[{"kind": "sphere_surface", "center": [0.0, 0.0, 0.0], "radius": 0.5, "mass": 1.0}]))
    with pytest.raises(ConfigError, match="unknown name"):
        parse_run(base(measure=[{"kind": "density", "expr": "1 + y1"}]))


def test_system_with_two_components():
    run = parse_run(
        base(
            measure=[
                {"kind": "density", "expr": "1"},
                {"kind": "density", "expr": "0.5", "component": 2, "sign": -1},
            ],
            nonlinearity={"kind": "rotation", "declared": ["A4"]},
        )
    )
    assert run.problem.n_components == 2
    assert run.problem.measures[1].terms[0].sign == -1
    assert run.problem.nonlinearity.declares("A4")


def test_box_face_axis_is_one_based():
    run = parse_run(
        base(
            domain={"shape": "box", "lo": [0.0, 0.0], "hi": [1.0, 1.0]},
            measure=[{"kind": "box_face", "axis": 2, "level": 0.5, "lo": [0.2, 0.5], "hi": [0.8, 0.5], "mass": 1.0}],
        )
    )
    assert run.problem.measures[0].terms[0].kind.axis == 1


def test_enabled_verifications_follow_catalog_order():
    run = parse_run(base(verification={"dynkin": True, "revuz": True, "start": [0.1, 0.2]}))
    assert run.enabled_verifications == ["revuz", "dynkin"]
    assert np.allclose(run.start, [0.1, 0.2])


def test_toml_syntax_error(tmp_path):
    path = tmp_path / "broken.toml"
    path.write_text("seed = \n[domain\n", encoding="utf-8")
    with pytest.raises(ConfigError, match="line"):
        load_run(path)
    with pytest.raises(ConfigError, match="not found"):
        load_run(tmp_path / "missing.toml")


@pytest.mark.parametrize("path", sorted(CONFIGS.glob("*.toml")), ids=lambda p: p.stem)
def test_bundled_configs_load(path):
    run = load_run(path)
    assert run.problem.n_components >= 1
    assert run.source == path
