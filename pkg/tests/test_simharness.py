"""Harness metrics, determinism and table emission."""
import numpy as np
import pytest

from latira.simgen import CellDesign
from latira.simharness import (
    TABLE_COLUMNS,
    CellSummary,
    HarnessOptions,
    emit_table,
    run_cell,
    run_grid,
    run_replicate,
    _summarize,
)

FAST = HarnessOptions(quad_points=11, n_starts=1)


def small_design(**kw):
    base = dict(case="2a", n=150, p=4, pi_y=0.5, r2_y=0.6, r2=0.2, n_reps=4, seed=3)
    base.update(kw)
    return CellDesign(**base)


def fake_records(estimates, ses, pct=50.0):
    return [
        {
            "twostep_est": e, "twostep_se": s, "twostep_se_nostep1": s / 2,
            "twostep_pctvar2": pct,
            "onestep_est": e, "onestep_se": s,
            "threestep_est": e, "threestep_se": s,
        }
        for e, s in zip(estimates, ses)
    ]


class TestSummaryMetrics:
    def test_mae_is_median_absolute_error(self):
        d = small_design(r2=0.0)  # target coefficient 0
        records = fake_records([0.1, -0.3, 0.2], [1.0, 1.0, 1.0])
        s = _summarize(d, records, [], HarnessOptions())
        assert s.mae["twostep"] == pytest.approx(0.2)

    def test_bias_and_rmse(self):
        d = small_design(r2=0.0)
        records = fake_records([0.1, -0.1], [1.0, 1.0])
        s = _summarize(d, records, [], HarnessOptions())
        assert s.bias["twostep"] == pytest.approx(0.0)
        assert s.rmse["twostep"] == pytest.approx(0.1)
        assert s.rmse["twostep"] ** 2 >= s.bias["twostep"] ** 2

    def test_coverage_counts_inside_intervals(self):
        d = small_design(r2=0.0)
        # |err| <= 1.96 se: first two covered, third not
        records = fake_records([0.1, -0.15, 0.5], [0.1, 0.1, 0.1])
        s = _summarize(d, records, [], HarnessOptions())
        assert s.coverage95["twostep"] == pytest.approx(100.0 * 2 / 3)
        assert 0.0 <= s.coverage95_no_step1 <= 100.0

    def test_failure_bookkeeping(self):
        d = small_design()
        s = _summarize(d, fake_records([0.1], [0.1]), ["rep 3: boom"], HarnessOptions())
        assert s.n_converged == 1 and s.n_failed == 1
        assert s.failures == ("rep 3: boom",)


class TestRunReplicate:
    def test_record_fields_present(self):
        r = run_replicate(small_design(), 0, FAST)
        for key in ("twostep_est", "twostep_se", "twostep_se_nostep1",
                    "twostep_pctvar2", "onestep_est", "onestep_se",
                    "threestep_est", "threestep_se"):
            assert key in r
        assert r["twostep_se"] >= r["twostep_se_nostep1"]

    def test_estimator_subset(self):
        opts = HarnessOptions(quad_points=11, n_starts=1, estimators=("twostep",))
        r = run_replicate(small_design(), 0, opts)
        assert "twostep_est" in r and "onestep_est" not in r and "threestep_est" not in r

    def test_deterministic(self):
        a = run_replicate(small_design(), 1, FAST)
        b = run_replicate(small_design(), 1, FAST)
        assert a == b

    def test_unknown_estimator_rejected(self):
        with pytest.raises(ValueError):
            HarnessOptions(estimators=("fourstep",))


class TestRunCell:
    def test_summary_invariants(self):
        s = run_cell(small_design(), FAST)
        assert s.n_converged + s.n_failed == 4
        for est in ("twostep", "onestep", "threestep"):
            assert s.rmse[est] ** 2 >= s.bias[est] ** 2 - 1e-12
            assert 0.0 <= s.coverage95[est] <= 100.0

    def test_identical_designs_identical_summaries(self):
        d = small_design()
        a = run_cell(d, FAST)
        b = run_cell(d, FAST)
        assert a == b

    def test_replicate_log(self, tmp_path):
        log = tmp_path / "reps.jsonl"
        opts = HarnessOptions(quad_points=11, n_starts=1, log_path=str(log))
        run_cell(small_design(n_reps=2), opts)
        assert len(log.read_text().splitlines()) == 2

    def test_run_grid_empty(self):
        assert run_grid([], FAST) == []

    def test_run_grid_order(self):
        d1 = small_design(n_reps=2)
        d2 = small_design(n_reps=2, r2=0.0)
        out = run_grid([d1, d2], FAST)
        assert [s.design.r2 for s in out] == [0.2, 0.0]


class TestEmitTable:
    def summaries(self):
        return run_grid([small_design(n_reps=2)], FAST)

    def test_column_contract(self, tmp_path):
        assert len(TABLE_COLUMNS) == 24
        path = tmp_path / "t.csv"
        emit_table(self.summaries(), path, "csv")
        lines = path.read_text().splitlines()
        assert lines[0].split(",") == TABLE_COLUMNS
        assert len(lines[1].split(",")) == len(TABLE_COLUMNS)

    def test_csv_round_trip(self, tmp_path):
        path = tmp_path / "t.csv"
        summaries = self.summaries()
        emit_table(summaries, path, "csv")
        lines = path.read_text().splitlines()
        values = dict(zip(lines[0].split(","), lines[1].split(",")))
        assert float(values["bias_2"]) == pytest.approx(summaries[0].bias["twostep"])
        assert int(values["n_converged"]) == summaries[0].n_converged
        assert float(values["beta1_true"]) == pytest.approx(summaries[0].beta1_true)

    def test_markdown_shape(self, tmp_path):
        path = tmp_path / "t.md"
        emit_table(self.summaries(), path, "markdown")
        lines = path.read_text().splitlines()
        assert lines[0].startswith("| p |")
        assert len(lines) == 3  # header + separator + one row

    def test_empty_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_table([], tmp_path / "t.csv", "csv")

    def test_unknown_format_rejected(self, tmp_path):
        with pytest.raises(ValueError):
            emit_table(self.summaries(), tmp_path / "t", "xlsx")
