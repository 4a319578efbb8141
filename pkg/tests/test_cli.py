import json
from pathlib import Path

import numpy as np
import pytest

from loopdsse import grid_model as grid
from loopdsse import cli, pipeline

SMALL = """
[paths]
output = "out"

[run]
mode = "{mode}"

[scenario]
start = "2016-01-01"
end = "2016-03-31"
test_start = "2016-03-30"

[loop]
train_cap = 60
cv_samples = 40
max_inner_cycles = {cycles}

[sweep]
grid = [0.0, 0.1]
trials = 1
"""


def manifest(d, mode="closed_loop", cycles=5, extra=""):
    d = Path(d)
    d.mkdir(parents=True, exist_ok=True)
    p = d / "run.toml"
    p.write_text(SMALL.format(mode=mode, cycles=cycles) + extra)
    return p


def body(path):
    return [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]


@pytest.fixture(scope="module")
def run_dirs(tmp_path_factory):
    dirs = []
    for name in ("a", "b"):
        d = tmp_path_factory.mktemp(name)
        assert cli.main(["run", "--manifest", str(manifest(d))]) == 0
        dirs.append(d / "out")
    return dirs


def test_run_outputs(run_dirs):
    out = run_dirs[0]
    for name in ("metrics.csv", "weights_trace.csv", "state_errors.csv", "pseudo_trace.csv", "histogram.csv", "summary.json"):
        assert (out / name).exists()
    head = (out / "metrics.csv").read_text().splitlines()
    assert head[0].startswith("# manifest-sha256: ") and head[1] == "mode,metric,scope,value"
    summary = json.loads((out / "summary.json").read_text())
    assert summary["mode"] == "closed_loop" and summary["dominance_margin_max"] <= 1e-9
    assert not (out / ".lock").exists()


def test_run_is_byte_identical(run_dirs):
    a, b = run_dirs
    for f in sorted(a.glob("*.csv")):
        assert (a / f.name).read_bytes() == (b / f.name).read_bytes()


def test_single_cycle_recorded(tmp_path):
    assert cli.main(["run", "--manifest", str(manifest(tmp_path, cycles=1))]) == 0
    _, rows = cli.read_csv(tmp_path / "out" / "pseudo_trace.csv")
    assert {r[8] for r in rows} == {"1"}


def test_report_after_run(run_dirs):
    m = run_dirs[0].parent / "run.toml"
    assert cli.main(["report", "--manifest", str(m)]) == 0
    svg = (run_dirs[0] / "histogram.svg").read_text()
    assert svg.startswith("<svg") and (run_dirs[0] / "weights.svg").exists()


def test_report_without_run_is_io_error(tmp_path):
    assert cli.main(["report", "--manifest", str(manifest(tmp_path))]) == cli.EXIT_IO


def test_generate_deterministic_and_refuses_overwrite(tmp_path, capsys):
    m = manifest(tmp_path)
    assert cli.main(["generate", "--manifest", str(m)]) == 0
    out = tmp_path / "out"
    first = {p.name: p.read_bytes() for p in out.iterdir()}
    assert set(first) == {"topology.toml", "ami.csv", "truth.csv", "scada.csv"}
    assert cli.main(["generate", "--manifest", str(m)]) == cli.EXIT_IO
    assert "--force" in capsys.readouterr().err
    assert cli.main(["generate", "--manifest", str(m), "--force"]) == 0
    assert {p.name: p.read_bytes() for p in out.iterdir()} == first
    # the generated topology reloads
    assert grid.load_topology(out / "topology.toml").n_bus == cli.bundled_topology().n_bus


def test_seed_override_changes_data(tmp_path):
    a = manifest(tmp_path / "a")
    b = manifest(tmp_path / "b")
    assert cli.main(["generate", "--manifest", str(a)]) == 0
    assert cli.main(["generate", "--manifest", str(b), "--seed", "99"]) == 0
    assert body(tmp_path / "a/out/ami.csv") != body(tmp_path / "b/out/ami.csv")


def test_validation_lists_every_problem(tmp_path, capsys):
    text = SMALL.format(mode="sideways", cycles=5).replace("train_cap = 60", "train_cap = 60\nbogus = 1")
    text += '\n[paths2]\nx = 1\n'
    text = text.replace('output = "out"', 'output = "out"\ntopology = "missing.toml"')
    p = tmp_path / "bad.toml"
    p.write_text(text)
    assert cli.main(["run", "--manifest", str(p)]) == cli.EXIT_VALIDATION
    err = capsys.readouterr().err
    assert "loop.bogus" in err and "[paths2]" in err and "run.mode" in err and "paths.topology" in err
    assert not (tmp_path / "out").exists()


def test_invalid_values(tmp_path):
    p = manifest(tmp_path, extra="")
    p.write_text(p.read_text().replace("max_inner_cycles = 5", "max_inner_cycles = 0"))
    assert cli.main(["run", "--manifest", str(p)]) == cli.EXIT_VALIDATION
    p.write_text("not = [valid")
    assert cli.main(["run", "--manifest", str(p)]) == cli.EXIT_VALIDATION
    p.write_text(SMALL.format(mode="open_loop", cycles=5).replace("grid = [0.0, 0.1]", "grid = []"))
    assert cli.main(["sweep-baddata", "--manifest", str(p)]) == cli.EXIT_VALIDATION


def test_bad_arguments():
    assert cli.main(["launch"]) == cli.EXIT_VALIDATION
    assert cli.main(["run"]) == cli.EXIT_VALIDATION
    assert cli.main(["run", "--manifest", "/nonexistent/run.toml"]) == cli.EXIT_IO


def test_lock_blocks_concurrent_use(tmp_path):
    m = manifest(tmp_path)
    (tmp_path / "out").mkdir()
    (tmp_path / "out" / ".lock").write_text("1234")
    assert cli.main(["generate", "--manifest", str(m)]) == cli.EXIT_IO
    with cli.OutputLock(tmp_path / "other"):
        with pytest.raises(cli.LockError):
            cli.OutputLock(tmp_path / "other").__enter__()
    assert not (tmp_path / "other" / ".lock").exists()


def test_numerical_failure_exit_code(tmp_path, monkeypatch):
    def boom(*a, **k):
        raise np.linalg.LinAlgError("singular gain matrix")

    monkeypatch.setattr(pipeline, "offline_stage", boom)
    assert cli.main(["run", "--manifest", str(manifest(tmp_path))]) == cli.EXIT_NUMERICAL
    assert not (tmp_path / "out" / ".lock").exists()


def test_sweep_rows(tmp_path):
    m = manifest(tmp_path)
    assert cli.main(["sweep-baddata", "--manifest", str(m)]) == 0
    head, rows = cli.read_csv(tmp_path / "out" / "robustness.csv")
    assert head == ["method", "fraction", "N", "trial", "mape"]
    assert len(rows) == 2 * 3 * 1
    _, summ = cli.read_csv(tmp_path / "out" / "robustness_summary.csv")
    assert len(summ) == 6 and all(float(r[4]) == 0 for r in summ)
