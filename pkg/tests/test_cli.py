import csv
import json

import pytest

from liftfeas import cli
from liftfeas import robot as rm
from liftfeas import table as tb
from liftfeas import trajopt as to

# one cell: the one the shipped three_attempts box maps to
THREE_ATTEMPTS_GRID = tb.GridSpec(com_x_values=(0.12,), grip_dist_values=(0.0,), weight_values=(10.0,))


@pytest.fixture(scope="module")
def built(tmp_path_factory):
    d = tmp_path_factory.mktemp("build")
    grid = d / "grid.json"
    grid.write_text(json.dumps(THREE_ATTEMPTS_GRID.to_dict()))
    assert cli.main(["build-table", "--grid", str(grid), "--out", str(d / "out")]) == 0
    return d / "out"


def test_build_outputs(built):
    assert (built / "table.json").is_file()
    assert len((built / "build_report.csv").read_text().splitlines()) == 2
    manifest = json.loads((built / "manifest.json").read_text())
    assert set(manifest["inputs"]) == {"model", "grid", "weights"}
    assert manifest["outputs"]["table.json"]
    assert "numpy" in manifest["versions"]
    assert manifest["weight_monotonicity"] == 1.0 and manifest["n_feasible"] == 1


def test_validate_fresh_table(built, tmp_path):
    assert cli.main(["validate-table", "--table", str(built / "table.json"),
                     "--out", str(tmp_path)]) == 0


def test_validate_catches_corrupt_knot(built, tmp_path):
    doc = json.loads((built / "table.json").read_text())
    doc["payload"]["cells"][0]["trajectory"]["q"][4][0] += 1e-3
    # re-seal the checksum so only the validator can notice
    payload = doc["payload"]
    bad = tb.FeasibilityTable(tb.GridSpec.from_dict(payload["grid"]),
                              dict(tb._entry_from_dict(c) for c in payload["cells"]),
                              payload["metadata"])
    p = tmp_path / "bad.json"
    tb.save_table(bad, p)
    assert cli.main(["validate-table", "--table", str(p), "--out", str(tmp_path / "o")]) == 1
    rows = list(csv.DictReader((tmp_path / "o" / "validation.csv").open()))
    assert {"i_weight": "0", "i_com": "0", "i_dist": "0", "knot": "4",
            "check": "transcription"} in rows


def test_validate_tampered_file(built, tmp_path):
    p = tmp_path / "t.json"
    p.write_text((built / "table.json").read_text().replace('"dt":', '"dt": 1.0, "x":', 1))
    assert cli.main(["validate-table", "--table", str(p), "--out", str(tmp_path / "o")]) == 1


def test_reason_three_attempts_feasible_and_replay(built, tmp_path):
    out = tmp_path / "reason"
    code = cli.main(["reason", "--world", "three_attempts", "--table", str(built / "table.json"),
                     "--out", str(out), "--seed", "0"])
    assert code == 0
    decision = json.loads((out / "decision.json").read_text())
    assert decision["decision"] == "FEASIBLE"
    assert decision["outcomes"] == ["RotateAway", "TorqueAbort", "Lifted"]
    assert decision["cell"] == [0, 0, 0]
    attempts = list(csv.DictReader((out / "attempts.csv").open()))
    assert [a["outcome"] for a in attempts] == decision["outcomes"]
    assert cli.main(["replay", str(out / "trajectory.json"), "--out", str(tmp_path / "rp")]) == 0
    model = rm.default_model()
    heel, toe = model.support_polygon
    for row in csv.DictReader((tmp_path / "rp" / "replay.csv").open()):
        assert heel + 0.005 <= float(row["cop_x"]) <= toe - 0.005


def test_reason_logs_are_reproducible(built, tmp_path):
    for name in ("a", "b"):
        cli.main(["reason", "--world", "three_attempts", "--table", str(built / "table.json"),
                  "--noise", "load_cell=0.05", "--seed", "11", "--out", str(tmp_path / name)])
    for f in ("attempts.csv", "frames.csv", "decision.json", "trajectory.json"):
        assert (tmp_path / "a" / f).read_bytes() == (tmp_path / "b" / f).read_bytes()
    # manifests differ only in the output path on the command line
    a, b = (json.loads((tmp_path / n / "manifest.json").read_text()) for n in "ab")
    assert a.pop("argv") != b.pop("argv") and a == b


@pytest.mark.parametrize("name,reason", [("slip", "slip"), ("heavy_12n", "out-of-range")])
def test_reason_infeasible(built, tmp_path, name, reason):
    out = tmp_path / name
    assert cli.main(["reason", "--world", name, "--table", str(built / "table.json"),
                     "--out", str(out)]) == 0
    decision = json.loads((out / "decision.json").read_text())
    assert decision["decision"] == "INFEASIBLE" and decision["reason"] == reason
    assert not (out / "trajectory.json").exists()


def test_reason_flagged_cell(tmp_path):
    flagged = tb.FeasibilityTable(THREE_ATTEMPTS_GRID, {(0, 0, 0): to.InfeasibleFlag("forced", "initial")})
    p = tmp_path / "t.json"
    tb.save_table(flagged, p)
    assert cli.main(["reason", "--world", "three_attempts", "--table", str(p), "--out", str(tmp_path / "o")]) == 0
    assert json.loads((tmp_path / "o" / "decision.json").read_text())["reason"] == "flagged cell"


def test_identify(tmp_path):
    assert cli.main(["identify", "--world", "empty", "--out", str(tmp_path)]) == 0
    doc = json.loads((tmp_path / "estimate.json").read_text())
    assert doc["estimate"]["weight"] == 0.0


def test_missing_model_is_config_error(tmp_path, capsys):
    code = cli.main(["build-table", "--model", str(tmp_path / "nope.json"), "--out", str(tmp_path)])
    assert code == 2
    assert "nope.json" in capsys.readouterr().err


def test_bad_noise_flag(tmp_path):
    assert cli.main(["identify", "--world", "three_attempts", "--noise", "wind=1",
                     "--out", str(tmp_path)]) == 2


def test_unknown_world(tmp_path):
    assert cli.main(["identify", "--world", "atlantis", "--out", str(tmp_path)]) == 2


def test_unwritable_output_is_io_error(built, tmp_path):
    blocker = tmp_path / "file"
    blocker.write_text("")
    code = cli.main(["identify", "--world", "empty", "--out", str(blocker / "sub")])
    assert code == 3
