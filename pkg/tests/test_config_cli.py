import csv

import numpy as np
import pytest

from duplex import cli
from duplex.config import parse_config, parse_field
from duplex.errors import ParseError, ValidationError


def variant(tmp_path, base, changes):
    """Copy of ``base`` config text with ``section/key`` lines replaced."""
    lines = base.read_text().splitlines()
    section = None
    todo = dict(changes)
    for i, line in enumerate(lines):
        if line.startswith("["):
            section = line.strip("[] ")
        key = line.split("=", 1)[0].strip()
        if f"{section}/{key}" in todo and "=" in line:
            lines[i] = f"{key} = {todo.pop(f'{section}/{key}')}"
    assert not todo, todo
    path = tmp_path / "run.cfg"
    path.write_text("\n".join(lines) + "\n")
    return path


@pytest.fixture
def small_cfg(tmp_path, demo_cfg_path):
    return variant(tmp_path, demo_cfg_path, {
        "cell/n": "32", "macro/shape": "16, 16", "transport/t": "0.01", "transport/dt": "0.005",
        "transport/epochs": "0.01", "output/dir": str(tmp_path / "out")})


def test_demo_config_is_valid(demo_cfg_path):
    cfg = parse_config(demo_cfg_path)
    assert cfg.family == "sine" and cfg.radius.bounds == pytest.approx((0.15, 0.35))
    assert cfg.macro_shape == (64, 64) and cfg.N == 128
    assert cfg.transport.n_steps == 1000
    assert cfg.transport.boundary["left"] == "dirichlet"
    assert cfg.flow_bc["left"] == ("pressure", 1.0)
    assert cfg.warnings == []
    ref = cfg.reference_transport()
    assert (ref.T, ref.dt, ref.n_radial, ref.epochs) == (0.1, 0.002, 256, (0.05, 0.1))


def test_radius_above_half_is_rejected(tmp_path, demo_cfg_path):
    with pytest.raises(ValidationError, match="radius exceeds 1/2"):
        parse_config(variant(tmp_path, demo_cfg_path, {"geometry/r0": "0.6"}))


def test_negative_diffusivity_is_rejected(tmp_path, demo_cfg_path):
    with pytest.raises(ValidationError) as info:
        parse_config(variant(tmp_path, demo_cfg_path, {"transport/d_l": "-1"}))
    assert any("D_l must be positive (positivity assumption on the data)" in v for v in info.value.violations)


def test_all_violations_are_collected_with_lines(tmp_path, demo_cfg_path):
    path = variant(tmp_path, demo_cfg_path, {"transport/d_l": "-1", "transport/d_h": "0", "macro/kappa": "-2",
                                             "transport/bc_top": "open", "cell/n": "4"})
    with pytest.raises(ValidationError) as info:
        parse_config(path)
    v = info.value.violations
    assert len(v) >= 5
    lines = path.read_text().splitlines()
    d_l_line = next(i for i, s in enumerate(lines, 1) if s.startswith("d_l"))
    assert any(s.startswith(f"line {d_l_line}:") and "d_l" in s for s in v)


def test_syntax_errors_carry_line_numbers(tmp_path):
    path = tmp_path / "bad.cfg"
    path.write_text("[geometry]\nfamily = sine\nthis line is broken\n")
    with pytest.raises(ParseError) as info:
        parse_config(path)
    assert info.value.line == 3 and str(info.value).startswith("line 3:")
    path.write_text("r0 = 0.3\n")
    with pytest.raises(ParseError) as info:
        parse_config(path)
    assert info.value.line == 1


def test_increasing_boundary_data_warn(tmp_path, demo_cfg_path):
    cfg = parse_config(variant(tmp_path, demo_cfg_path, {"transport/u_b": "decay: 1.0, -2.0"}))
    assert cfg.warnings and "advisory" in cfg.warnings[0]


def test_field_kinds():
    pts = np.array([[0.2, 0.5], [0.8, 0.5]])
    assert list(parse_field("step: 1, 0, 0.5", "initial")(pts)) == [1.0, 0.0]
    assert parse_field("0.3", "initial")(pts).tolist() == [0.3, 0.3]
    assert parse_field("decay: 2, 1", "boundary")(pts, 1.0)[0] == pytest.approx(2 / np.e)
    g = parse_field("gauss: 1, 0.2, 0.5, 0.1", "micro")
    assert g(pts, np.zeros((2, 5, 2))).shape == (2, 5)
    for bad in ("decay: 1, 1", "gauss: 1, 0, 0", "gauss: 1, 0, 0, 0", "spline: 1", "abc"):
        with pytest.raises(ValueError):
            parse_field(bad, "initial")


def test_cli_levelset_check(demo_cfg_path, tmp_path, capsys):
    assert cli.main(["levelset-check", str(demo_cfg_path), "--out", str(tmp_path)]) == 0
    assert "fitted expansion order 3.0" in capsys.readouterr().out


def test_cli_cell_table_and_flow(small_cfg, tmp_path):
    assert cli.main(["cell-table", str(small_cfg)]) == 0
    with open(tmp_path / "out" / "coefficients.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert len(rows) == 10 and float(rows[0]["a11"]) == 1.0
    assert all(float(r["theta"]) == 1 - np.pi * float(r["r"]) * float(r["r"]) for r in rows)
    assert cli.main(["flow", str(small_cfg), "--threads", "2"]) == 0
    assert (tmp_path / "out" / "flow.csv").exists()


def test_cli_twoscale(small_cfg, tmp_path):
    assert cli.main(["twoscale", str(small_cfg)]) == 0
    out = tmp_path / "out"
    assert (out / "audit.csv").exists()
    assert (out / "state_t0.csv").exists() and (out / "state_t0.01.csv").exists()


def test_cli_exit_codes(tmp_path, demo_cfg_path, monkeypatch, capsys):
    bad = variant(tmp_path, demo_cfg_path, {"geometry/r0": "0.6"})
    assert cli.main(["flow", str(bad)]) == 1
    assert "radius exceeds 1/2" in capsys.readouterr().err
    assert cli.main(["flow", str(tmp_path / "missing.cfg")]) == 1
    assert cli.main(["flow", str(demo_cfg_path), "--threads", "0"]) == 1
    monkeypatch.setattr(cli, "LEVELSET_MIN_ORDER", 10.0)
    assert cli.main(["levelset-check", str(demo_cfg_path), "--out", str(tmp_path)]) == 2
    with pytest.raises(SystemExit):
        cli.main(["explode", str(demo_cfg_path)])
