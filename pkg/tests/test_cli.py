import csv
import io
import json
import os

import pytest

from anisoap import cli


@pytest.fixture
def small_config(tmp_path):
    cfg = json.load(open(cli.default_config_path()))
    cfg["grid"] = {"Nx": 10, "Nz": 10}
    cfg["problem"].pop("eps_list", None)
    cfg["problem"]["eps"] = 1e-2
    path = tmp_path / "case.json"
    path.write_text(json.dumps(cfg, indent=2))
    return path


def read_csv(path):
    with open(path, newline="", encoding="utf-8") as fh:
        return list(csv.DictReader(fh))


def test_solve_example_from_table(tmp_path):
    out = tmp_path / "ap.csv"
    code = cli.main(["solve", "--eps", "1e-8", "--grid", "50x50", "--scheme", "ap", "--out", str(out)])
    assert code == cli.EXIT_OK
    (row,) = read_csv(out)
    assert row["scheme"] == "AP" and int(row["Nx"]) == 50 and int(row["Nz"]) == 50
    # reference AP error on this grid is 2.7e-3
    assert 2.7e-3 / 3 <= float(row["linf_err"]) <= 3 * 2.7e-3
    meta = json.loads((tmp_path / "ap.csv.meta.json").read_text())
    assert meta["kind"] == "solve"


def test_eps_sweep_header(tmp_path, small_config):
    out = tmp_path / "sweep.csv"
    code = cli.main(["study", "--kind", "eps_sweep", "--config", str(small_config),
                     "--override", "eps_list=[1, 1e-4]", "--out", str(out)])
    assert code == cli.EXIT_OK
    text = out.read_text(encoding="utf-8")
    assert text.splitlines()[0] == "scheme,eps,Nx,Nz,l2_err,linf_err"
    assert len(read_csv(out)) == 6


def test_scheme_l_on_zero_source(tmp_path, small_config):
    out = tmp_path / "zero.csv"
    code = cli.main(["solve", "--config", str(small_config), "--scheme", "l", "--override", "problem.f=0",
                     "--override", 'problem.exact="0"', "--out", str(out)])
    assert code == cli.EXIT_OK
    (row,) = read_csv(out)
    for key in ("l2_err", "linf_err", "min_value", "max_value"):
        assert float(row[key]) == 0.0


def test_precedence_file_env_flags(small_config):
    env = {"AP_CONFIG_OVERRIDES": "eps=0.5; solver.tol=1e-9"}
    cfg, _, _ = cli.load_config(str(small_config), environ=env)
    assert cfg["problem"]["eps"] == 0.5 and cfg["solver"]["tol"] == 1e-9
    cfg, _, _ = cli.load_config(str(small_config), ["eps=0.25"], environ=env)
    assert cfg["problem"]["eps"] == 0.25
    cfg, _, _ = cli.load_config(str(small_config), ["eps=0.25"], environ=env, flag_values=[("problem.eps", 0.125)])
    assert cfg["problem"]["eps"] == 0.125 and cfg["solver"]["tol"] == 1e-9


def test_env_override_applies_in_main(tmp_path, small_config, monkeypatch):
    monkeypatch.setenv("AP_CONFIG_OVERRIDES", "eps=0.5")
    out = tmp_path / "env.csv"
    assert cli.main(["solve", "--config", str(small_config), "--out", str(out)]) == cli.EXIT_OK
    assert float(read_csv(out)[0]["eps"]) == 0.5


def test_eps_flag_replaces_list():
    cfg, _, _ = cli.load_config(None, flag_values=[("problem.eps", 1e-3)])
    assert cfg["problem"]["eps"] == 1e-3 and "eps_list" not in cfg["problem"]


@pytest.mark.parametrize(
    "override",
    ["problem.colour=1", "nonsense.eps=1", "solver.scheme=q", "grid.Nx=0", "eps=-1", "noequals", "study.kind=fft"],
)
def test_schema_errors_exit_2(small_config, override, capsys):
    assert cli.main(["solve", "--config", str(small_config), "--override", override]) == cli.EXIT_SCHEMA
    assert "config error" in capsys.readouterr().err


def test_unknown_key_in_file(tmp_path, capsys):
    cfg = json.load(open(cli.default_config_path()))
    cfg["solver"]["precondition"] = True
    path = tmp_path / "bad.json"
    path.write_text(json.dumps(cfg))
    assert cli.main(["solve", "--config", str(path)]) == cli.EXIT_SCHEMA
    assert "precondition" in capsys.readouterr().err


def test_expression_error_reports_file_position(tmp_path, capsys):
    text = '{\n  "problem": {\n    "domain": [0, 1, 0, 1],\n    "eps": 1,\n    "A_perp": "1 + * x",\n' \
           '    "A_z": "1", "f": "1"\n  },\n  "grid": {"Nx": 2, "Nz": 2}\n}\n'
    path = tmp_path / "expr.json"
    path.write_text(text)
    assert cli.main(["solve", "--config", str(path)]) == cli.EXIT_SCHEMA
    err = capsys.readouterr().err
    # the '*' sits on line 5; the expression starts at column 16
    col = text.splitlines()[4].index("*") + 1
    assert f"line 5, column {col}" in err and "problem.A_perp" in err


def test_unbound_name_rejected_at_load(small_config, capsys):
    assert cli.main(["solve", "--config", str(small_config), "--override", "problem.f=x + q"]) == cli.EXIT_SCHEMA
    assert "q" in capsys.readouterr().err


def test_invalid_json(tmp_path, capsys):
    path = tmp_path / "broken.json"
    path.write_text('{"problem": }')
    assert cli.main(["solve", "--config", str(path)]) == cli.EXIT_SCHEMA
    assert "line 1" in capsys.readouterr().err


def test_solver_failure_exit_3(small_config, monkeypatch, capsys):
    from anisoap import solver
    from anisoap.linalg import SingularMatrixError

    def singular(*args, **kwargs):
        raise SingularMatrixError("zero pivot in LU factorization", 7)

    monkeypatch.setattr(solver, "p_solve", singular)
    assert cli.main(["solve", "--config", str(small_config), "--scheme", "p"]) == cli.EXIT_SOLVER
    assert "solver failure" in capsys.readouterr().err


def test_check_violation_exit_4(tmp_path, small_config, capsys):
    code = cli.main(["solve", "--config", str(small_config), "--max-iters", "1", "--check",
                     "--out", str(tmp_path / "it.csv")])
    assert code == cli.EXIT_CHECK
    assert "not converged" in capsys.readouterr().err


def test_check_passes_exit_0(tmp_path, small_config):
    code = cli.main(["solve", "--config", str(small_config), "--check", "--out", str(tmp_path / "ok.csv")])
    assert code == cli.EXIT_OK


def test_study_block_rejected_by_solve(small_config, capsys):
    assert cli.main(["solve", "--config", str(small_config), "--override", "study.kind=iteration"]) == cli.EXIT_SCHEMA


def test_precision_option(tmp_path, small_config):
    out = tmp_path / "p.csv"
    assert cli.main(["solve", "--config", str(small_config), "--override", "output.precision=3",
                     "--out", str(out)]) == cli.EXIT_OK
    err = read_csv(out)[0]["l2_err"]
    assert len(err.replace(".", "").replace("e-", "").lstrip("0")) <= 6


def test_csv_values_round_trip(tmp_path, small_config):
    out = tmp_path / "rt.csv"
    cfg, parsed, _ = cli.load_config(str(small_config), flag_values=[("output.csv", str(out))])
    rep, _, _ = cli.run_solve(cfg, parsed)
    cli.emit(rep, cfg, stream=io.StringIO())
    row = read_csv(out)[0]
    assert float(row["l2_err"]) == rep.rows[0]["l2_err"]
    assert float(row["max_value"]) == rep.rows[0]["max_value"]


def test_atomic_write_replaces_and_leaves_no_temp(tmp_path):
    target = tmp_path / "out.csv"
    target.write_text("old")
    cli.atomic_write(str(target), "new\n")
    assert target.read_text() == "new\n"
    assert os.listdir(tmp_path) == ["out.csv"]


def test_atomic_write_failure_keeps_old(tmp_path, monkeypatch):
    target = tmp_path / "out.csv"
    target.write_text("old")

    def boom(src, dst):
        raise OSError("disk full")

    monkeypatch.setattr(cli.os, "replace", boom)
    with pytest.raises(OSError):
        cli.atomic_write(str(target), "new")
    assert target.read_text() == "old"
    assert os.listdir(tmp_path) == ["out.csv"]


@pytest.mark.parametrize("text, want", [("50x50", (50, 50)), (" 4X7 ", (4, 7))])
def test_parse_grid(text, want):
    assert cli.parse_grid(text) == want


@pytest.mark.parametrize("text", ["50", "50x", "ax5", "5x5x5"])
def test_parse_grid_errors(text):
    with pytest.raises(cli.ConfigError):
        cli.parse_grid(text)


def test_packaged_configs_validate():
    here = os.path.dirname(__file__)
    for name in ("manufactured.json", "positivity.json", "convergence.json"):
        path = os.path.join(here, "..", "configs", name)
        cli.load_config(path)


def test_positivity_study_without_problem(tmp_path):
    out = tmp_path / "pos.csv"
    path = tmp_path / "pos.json"
    path.write_text(json.dumps({"problem": {"eps_list": [1.0, 1e-2]}, "grid": {"Nx": 20, "Nz": 20},
                                "study": {"kind": "positivity", "parameters": {"a_values": [0.1]}}}))
    assert cli.main(["study", "--config", str(path), "--check", "--out", str(out)]) == cli.EXIT_OK
    assert read_csv(out)[0].keys() == {"scheme", "a", "eps", "Nx", "Nz", "min_value", "max_value", "flag"}


def test_check_subcommand_selection(capsys):
    assert cli.main(["check", "--criteria", "4"]) == cli.EXIT_OK
    assert "PASS [4]" in capsys.readouterr().out
    assert cli.main(["check", "--criteria", "four"]) == cli.EXIT_SCHEMA
