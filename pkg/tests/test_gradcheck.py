import numpy as np
import pytest

from l2lesion.gradcheck import SuiteResult, compare, run_gradcheck
from l2lesion.tensor import mul, tensor_sum


def test_compare_exact_op():
    x = np.random.default_rng(0).normal(size=(3, 2))
    assert compare(lambda t: tensor_sum(mul(t, t)), [x]) < 1e-8


@pytest.mark.parametrize("scope", ["l2", "layers", "pyramid"])
def test_scopes_pass_small(scope):
    report = run_gradcheck(scope, seed=1, trials=5)
    assert report.ok, "\n".join(report.lines())


def test_literal_mode_reported_as_expected_fail():
    report = run_gradcheck("l2", seed=0, trials=20)
    status = {r.name: r.status for r in report.results}
    assert status == {"l2_pool": "PASS", "l2_pool[paper_literal]": "EXPECTED FAIL"}


def test_seeded():
    a = run_gradcheck("pyramid", seed=4, trials=3).to_dict()
    b = run_gradcheck("pyramid", seed=4, trials=3).to_dict()
    assert a == b


def test_bad_scope():
    with pytest.raises(ValueError):
        run_gradcheck("everything")


@pytest.mark.parametrize("failures,expected,status", [
    (0, False, "PASS"), (1, False, "FAIL"), (95, True, "EXPECTED FAIL"), (94, True, "UNEXPECTED PASS"),
])
def test_status(failures, expected, status):
    r = SuiteResult("x", 100, failures, 0.5, expected)
    assert r.status == status
    assert r.ok == (status in ("PASS", "EXPECTED FAIL"))
