import json

import numpy as np
import pytest

from smpc.cli import BENCHMARK_X0, main
from smpc.constraint import discounted_output_energy
from smpc.model import save_model
from smpc.sim import DisturbanceSampler, simulate_feedback


@pytest.fixture
def model_file(tmp_path, bench):
    path = tmp_path / "model.json"
    save_model(bench, path)
    return str(path)


def test_validate_exit_codes(tmp_path, bench, model_file, capsys):
    assert main(["validate", "--model", model_file]) == 0
    assert "overall: PASS" in capsys.readouterr().out

    bad = tmp_path / "bad.json"
    save_model(bench.replace(gamma=1.0), bad)
    assert main(["validate", "--model", str(bad)]) == 1
    assert "[FAIL] gamma in (0,1)" in capsys.readouterr().out

    truncated = tmp_path / "trunc.json"
    truncated.write_text(open(model_file).read()[:80])
    assert main(["validate", "--model", str(truncated)]) == 2


def test_precompute_prints_trwp(tmp_path, model_file, capsys):
    out = tmp_path / "pre.json"
    assert main(["precompute", "--model", model_file, "--out", str(out)]) == 0
    text = capsys.readouterr().out
    line = next(l for l in text.splitlines() if l.startswith("trWP"))
    assert float(line.split("=")[1]) == pytest.approx(0.5304, abs=5e-4)
    doc = json.loads(out.read_text())
    assert max(doc["residuals"].values()) < 1e-9
    assert doc["seed"] == 0 and "model_hash" in doc and "version" in doc


def test_precompute_deadbeat(tmp_path, capsys):
    d = {
        "A": [[1.0]], "B": [[1.0]], "W": [[0.5]], "C": [[1.0]], "t": 2.0, "e": 1.0, "gamma": 0.8,
        "Q": [[2.0]], "R": [[3.0]], "x_ref": [0.0], "u_ref": [0.0], "K": [[-1.0]], "N": 2,
    }
    path = tmp_path / "db.json"
    path.write_text(json.dumps(d))
    out = tmp_path / "o.json"
    assert main(["precompute", "--model", str(path), "--out", str(out)]) == 0
    assert json.loads(out.read_text())["P"] == [[5.0]]


def test_run_writes_csv(tmp_path, model_file, capsys):
    out = tmp_path / "traj.csv"
    argv = ["run", "--model", model_file, "--x0", "-1.1130,1.1156", "--steps", "100", "--seed", "3", "--out", str(out)]
    assert main(argv) == 0
    first = out.read_bytes()
    assert len(first.decode().splitlines()) == 101
    assert main(argv) == 0
    assert out.read_bytes() == first
    assert "final eps" in capsys.readouterr().out


def test_run_usage_errors(model_file, capsys):
    assert main(["run", "--model", model_file, "--steps", "0"]) == 2
    assert main(["run", "--model", model_file, "--x0", "1,2,3"]) == 2


def test_run_infeasible_start_reports_budget(model_file, capsys):
    assert main(["run", "--model", model_file, "--x0", "5,5", "--steps", "3"]) == 1
    assert "smallest feasible eps0" in capsys.readouterr().err


def test_lq_bound_benchmark(model_file, capsys):
    assert main(["lq-bound", "--model", model_file, "--x0", "-1.1130,1.1156"]) == 0
    out = capsys.readouterr().out
    value = float(out.split("=")[1].split()[0])
    assert value == pytest.approx(4.6998, abs=1e-3)
    assert "exceeds e" in out


def test_lq_bound_stationary(bench):
    model = bench.replace(W=np.zeros((2, 2)))
    want = np.sum((model.C @ model.x_ref) ** 2) / ((1 - model.gamma) * model.t**2)
    K_lq = np.array([[-0.82788, -0.80147]])
    assert discounted_output_energy(model.x_ref, K_lq, model) == pytest.approx(want, rel=1e-12)


def test_lq_bound_series_oracle(bench, bench_pre):
    K = bench_pre.K_lq
    Phi = bench.A + bench.B @ K
    CtC = bench.C.T @ bench.C
    x = np.array(BENCHMARK_X0)
    X = np.zeros((2, 2))
    total, k = 0.0, 0
    while bench.gamma**k >= 1e-14:
        total += bench.gamma**k * (np.trace(CtC @ X) + x @ CtC @ x) / bench.t**2
        x = bench.x_ref + Phi @ (x - bench.x_ref)
        X = Phi @ X @ Phi.T + bench.W
        k += 1
    assert discounted_output_energy(BENCHMARK_X0, K, bench) == pytest.approx(total, abs=1e-8)


def test_lq_bound_monte_carlo(bench, bench_pre):
    runs, T = 1000, 250
    disc = bench.gamma ** np.arange(T)
    vals = np.empty(runs)
    for r in range(runs):
        xs = simulate_feedback(bench, bench_pre.K_lq, BENCHMARK_X0, T, DisturbanceSampler(bench.W, seed=5, stream=r))
        vals[r] = disc @ np.sum((xs @ bench.C.T) ** 2, axis=1) / bench.t**2
    se = vals.std(ddof=1) / np.sqrt(runs)
    assert abs(vals.mean() - discounted_output_energy(BENCHMARK_X0, bench_pre.K_lq, bench)) <= 3 * se


def test_montecarlo_smoke(tmp_path, capsys):
    out = tmp_path / "mc.json"
    code = main(["montecarlo", "--runs", "1", "--steps", "20", "--seed", "4", "--out", str(out)])
    assert code in (0, 1)
    doc = json.loads(out.read_text())
    for key in ("avg_cost", "avg_cost_stderr", "V_hat", "V_hat_stderr", "trWP", "e", "runs", "T", "seed"):
        assert key in doc
    assert doc["runs"] == 1 and doc["T"] == 20 and doc["seed"] == 4
    assert "[PASS]" in capsys.readouterr().out


def test_version(capsys):
    with pytest.raises(SystemExit) as info:
        main(["--version"])
    assert info.value.code == 0
