import numpy as np
import pytest

from tracegrad import checks
from tracegrad.checks import PropertyResult, block_suite, cg_suite, data_suite, second_order_fd, so3_suite
from tracegrad.data import make_oracle_params
from tracegrad.structures import DEFAULT_BASIS


def by_name(results):
    return {r.name: r for r in results}


class TestPropertyResult:
    def test_pass_fail(self):
        assert PropertyResult("s", "n", 1e-11, 1e-10, 3).passed
        assert not PropertyResult("s", "n", 2e-10, 1e-10, 3).passed
        assert not PropertyResult("s", "n", float("nan"), 1e-10, 3).passed

    def test_line_names_property(self):
        line = PropertyResult("so3", "wigner_orthogonality", 1.0, 1e-10, 5).line()
        assert line.startswith("FAIL so3.wigner_orthogonality")


class TestSuites:
    def test_so3(self):
        res = so3_suite(trials=20, seed=1)
        assert all(r.passed for r in res), [r.line() for r in res]

    def test_cg(self):
        res = cg_suite(trials=30, seed=1)
        assert all(r.passed for r in res), [r.line() for r in res]

    def test_block(self):
        res = block_suite(trials=12, seed=1)
        assert all(r.passed for r in res), [r.line() for r in res]

    def test_second_order(self):
        assert second_order_fd(seed=3) <= 1e-5

    def test_data(self, small_records):
        res = data_suite(small_records, DEFAULT_BASIS, make_oracle_params(), seed=1, trials=4)
        assert all(r.passed for r in res), [r.line() for r in res]

    def test_data_detects_broken_label(self, small_records):
        rec = small_records[0]
        key = next(iter(rec.traces))
        broken = type(rec)(rec.system, rec.blocks, {**rec.traces, key: rec.traces[key] + 1.0}, rec.split)
        res = by_name(data_suite([broken], DEFAULT_BASIS, make_oracle_params(), trials=1))
        assert not res["label_consistency"].passed


class TestNegativeControl:
    def test_transposed_wigner_fails_so3(self):
        res = by_name(so3_suite(trials=5, seed=0, wigner=checks.FAULTS["wigner-transpose"]))
        assert not res["sph_harm_equivariance"].passed
        # a transposed representation is still orthogonal
        assert res["wigner_orthogonality"].passed

    def test_block_commutes_with_any_orthogonal_action(self):
        # u only sees inner products inside a degree, so D(R)^T = D(R^-1) is as good as D(R)
        res = block_suite(trials=4, seed=0, wigner=checks.FAULTS["wigner-transpose"])
        assert all(r.passed for r in res)

    @pytest.mark.parametrize("trials", [1, 3])
    def test_trial_count_recorded(self, trials):
        assert all(r.trials in (trials, 1) for r in so3_suite(trials=trials))
