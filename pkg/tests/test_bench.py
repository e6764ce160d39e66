import numpy as np
import pytest

from deltapress.bench import BenchSpec, report_csv, run_bench, synthetic_delta


def test_synthetic_delta_spectrum():
    d = synthetic_delta(40, 30, 1.0, rng=0)
    s = np.linalg.svd(d.astype(np.float64), compute_uv=False)
    assert np.allclose(s / s[0], np.arange(1, 31) ** -1.0, atol=1e-5)


def test_run_bench_rows_and_determinism():
    spec = BenchSpec(sizes=[[32, 32]], methods=["impart", "dare"], cr=[4, 8], cr_qt=[], betas=[0.6], Cs=[1.0])
    a, b = run_bench(spec), run_bench(spec)
    assert a == b
    assert len(a["rows"]) == 4
    assert all(r["status"] == "ok" for r in a["rows"])
    assert report_csv(a).count("\n") == 5


def test_failures_are_reported_not_raised():
    spec = BenchSpec(sizes=[[8, 8]], methods=["lowrank"], cr=[64], cr_qt=[])
    (row,) = run_bench(spec)["rows"]
    assert row["status"] == "failed" and "RankUnderflowError" in row["error"]


def test_unknown_spec_key():
    with pytest.raises(ValueError):
        BenchSpec.from_dict({"size": [1]})
