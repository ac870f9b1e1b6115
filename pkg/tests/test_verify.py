import json
import math

import numpy as np
import pytest

from sspiwo.tabular import TabularModel, load_fixture
from sspiwo.verify import (
    COLLAPSE_TOL,
    Check,
    bound_table,
    k1_collapse_residual,
    random_models,
    report_json,
    run_suite,
    unbiasedness,
)


def test_identities_suite_passes():
    checks = run_suite("identities", fixtures=[load_fixture()], n_models=10)
    assert len(checks) == 6 and all(c.passed for c in checks), [c.line() for c in checks]


def test_bounds_suite_passes():
    checks = run_suite("bounds", fixtures=[load_fixture()], n_models=5)
    assert all(c.passed for c in checks), [c.line() for c in checks]


def test_gradients_suite_small_run_passes():
    checks = run_suite("gradients", n_models=2, n_seeds=1, n_samples=2000)
    assert len(checks) == 12 and all(c.passed for c in checks), [c.line() for c in checks]


def test_unknown_suite():
    with pytest.raises(ValueError):
        run_suite("everything")


def test_random_models_are_seeded():
    a, b = random_models(4, 9), random_models(4, 9)
    for m, n in zip(a, b):
        for k, v in m.tables().items():
            np.testing.assert_array_equal(v, n.tables()[k])
    assert {m.n_y for m in random_models(40, 0)} == {2, 3}


def test_k1_collapse_on_fixture():
    assert k1_collapse_residual(load_fixture(), alpha=2.5) <= COLLAPSE_TOL


def test_bound_table_matches_golden(golden_fix_a):
    t = bound_table(load_fixture(), 1)
    g = golden_fix_a["x"]["1"]
    assert t["log_px"] == pytest.approx(g["log_px"], abs=1e-12)
    assert t["limit_y"] == pytest.approx(g["limit_piwo"], abs=1e-12)
    assert t["limit_z"] == pytest.approx(g["limit_ipiwo"], abs=1e-12)
    assert t["piwo"] == pytest.approx(g["piwo"], abs=1e-12)


def test_unbiasedness_reports_fraction():
    cover = unbiasedness(n_seeds=1, n_samples=2000, n_groups=20, objectives=("iwae",), estimators=("pathwise",))
    assert list(cover) == [("iwae", "pathwise")]
    assert 0.0 <= cover[("iwae", "pathwise")] <= 1.0


def test_check_line_and_report():
    ok = Check("s", "n", 1e-13, 1e-10, True)
    bad = Check("s", "m", math.nan, 1e-10, False, "detail")
    assert ok.line().startswith("PASS  s/n") and bad.line().startswith("FAIL  s/m")
    body = json.loads(report_json([ok, bad]))
    assert body["passed"] is False and body["checks"][1]["value"] is None
