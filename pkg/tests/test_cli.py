import json

import pytest
import yaml
from click.testing import CliRunner

from insuremkt.cli import apply_override, main
from insuremkt.screening import read_menu_csv

from conftest import SCENARIOS

TWO = str(SCENARIOS / "two_type.yaml")


def invoke(args, env=None):
    return CliRunner().invoke(main, args, env=env, catch_exceptions=False)


def verify_lines(out):
    return (out / "verify.txt").read_text().splitlines()


def test_validate(tmp_path):
    res = invoke(["validate", "--scenario", TWO, "--out", str(tmp_path)])
    assert res.exit_code == 0
    assert verify_lines(tmp_path)[-1] == "failures: 0"


def test_first_stage_outputs(tmp_path):
    res = invoke(["first-stage", "--scenario", TWO, "--price", "0.8", "--out", str(tmp_path)])
    assert res.exit_code == 0
    menu, sc = read_menu_csv(tmp_path / "menu.csv")
    assert sc["p"] == 0.8
    assert menu.contracts[0].kind == "limited" and menu.contracts[1].kind == "simple"
    assert (tmp_path / "plots" / "phi_hull.csv").exists()
    assert (tmp_path / "plots" / "allocation.csv").exists()
    assert all(line.startswith("PASS") for line in verify_lines(tmp_path)[:-1])


def test_output_is_deterministic(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    for d in (a, b):
        invoke(["first-stage", "--scenario", TWO, "--price", "0.8", "--out", str(d)])
    assert (a / "menu.csv").read_bytes() == (b / "menu.csv").read_bytes()
    assert (a / "plots" / "phi_hull.csv").read_bytes() == (b / "plots" / "phi_hull.csv").read_bytes()


def test_output_dir_from_environment(tmp_path):
    target = tmp_path / "envout"
    res = invoke(["first-stage", "--scenario", TWO, "--price", "0.8"], env={"INSUREMKT_OUT": str(target)})
    assert res.exit_code == 0
    assert (target / "menu.csv").exists()


def test_verify_accepts_solver_menu(tmp_path):
    invoke(["first-stage", "--scenario", TWO, "--price", "0.8", "--out", str(tmp_path / "fs")])
    res = invoke(["verify", "--scenario", TWO, "--menu", str(tmp_path / "fs" / "menu.csv"),
                  "--out", str(tmp_path / "v")])
    assert res.exit_code == 0


def test_verify_rejects_corrupted_menu(tmp_path):
    invoke(["first-stage", "--scenario", TWO, "--price", "0.8", "--out", str(tmp_path / "fs")])
    path = tmp_path / "fs" / "menu.csv"
    text = path.read_text().replace("0.18887568", "0.28887568")
    path.write_text(text)
    res = invoke(["verify", "--scenario", TWO, "--menu", str(path), "--out", str(tmp_path / "v")])
    assert res.exit_code == 1
    err = json.loads(res.stderr.strip().splitlines()[-1])
    assert err["error"]["pipeline"] == "verify"
    assert any(line.startswith("FAIL ir") for line in verify_lines(tmp_path / "v"))


def test_verify_without_menu_runs_lp(tmp_path):
    res = invoke(["verify", "--scenario", TWO, "--price", "0.8", "--out", str(tmp_path)])
    assert res.exit_code == 0
    names = [line.split()[1].rstrip(":") for line in verify_lines(tmp_path)[:-1]]
    assert "duality_gap" in names and "lp_oracle_match" in names


def test_bad_scenario_gives_error_block(tmp_path):
    doc = yaml.safe_load(open(TWO))
    doc["distortion"] = {"kind": "tabulated", "knots": [[0, 0], [0.5, 0.6], [1, 1]]}
    bad = tmp_path / "bad.yaml"
    bad.write_text(yaml.safe_dump(doc))
    res = invoke(["first-stage", "--scenario", str(bad), "--out", str(tmp_path / "o")])
    assert res.exit_code == 2
    err = json.loads(res.stderr.strip())["error"]
    assert err["type"] == "ScenarioError"
    assert "g(q) ≤ q violated at q=0.5" in err["message"]


def test_price_outside_band_is_an_error(tmp_path):
    res = invoke(["first-stage", "--scenario", TWO, "--price", "2.0", "--out", str(tmp_path)])
    assert res.exit_code == 2
    assert json.loads(res.stderr.strip())["error"]["type"] == "PriceBandError"


def test_missing_scenario_file(tmp_path):
    res = invoke(["validate", "--scenario", str(tmp_path / "none.yaml"), "--out", str(tmp_path)])
    assert res.exit_code == 2


def test_overrides():
    doc = {"grids": {"n_q": 101}, "beta": 0.0}
    apply_override(doc, "grids.n_q=51")
    apply_override(doc, "beta=0.1")
    assert doc == {"grids": {"n_q": 51}, "beta": 0.1}
    with pytest.raises(ValueError):
        apply_override(doc, "no_equals_sign")


def test_override_through_cli(tmp_path):
    res = invoke(["first-stage", "--scenario", TWO, "--override", "p=0.8", "--override", "grids.n_q=51",
                  "--out", str(tmp_path)])
    assert res.exit_code == 0
    _, sc = read_menu_csv(tmp_path / "menu.csv")
    assert sc["p"] == 0.8


@pytest.mark.parametrize("pipeline", ["planner", "bargain", "tiers"])
def test_variant_pipelines(tmp_path, pipeline):
    res = invoke([pipeline, "--scenario", str(SCENARIOS / "variants.yaml"), "--out", str(tmp_path)])
    assert res.exit_code == 0, res.stderr
    assert verify_lines(tmp_path)[-1] == "failures: 0"


def test_variant_pipeline_without_block(tmp_path):
    res = invoke(["tiers", "--scenario", TWO, "--out", str(tmp_path)])
    assert res.exit_code == 2


def test_sweep_writes_table(tmp_path):
    res = invoke(["sweep", "--scenario", TWO, "--override", "grids.n_p=5", "--out", str(tmp_path)])
    assert res.exit_code == 0
    lines = (tmp_path / "sweep.csv").read_text().splitlines()
    assert lines[0].startswith("p,")
    assert len([x for x in lines if not x.startswith("#")]) == 6
