"""Tests for figure rendering from experiment CSVs."""

import numpy as np
import pytest

from fwnav.figures import emit_figures
from fwnav.harness import (ExperimentResult, TrialConfig, TrialRecord,
                           write_experiment_csvs)

TRIALS_HEADER = "trial_index,outcome,min_clearance,duration,waypoints_hit\n"
QUERIES_HEADER = "trial_index,replan_index,depth_index,count\n"
PATHS_HEADER = "trial_index,t,x,y,z\n"


def _write(tmp_path, trials=TRIALS_HEADER, queries=QUERIES_HEADER,
           paths=PATHS_HEADER):
    (tmp_path / "trials.csv").write_text(trials)
    (tmp_path / "queries.csv").write_text(queries)
    (tmp_path / "paths.csv").write_text(paths)
    return tmp_path


def test_empty_csvs_render_empty_axes(tmp_path):
    _write(tmp_path)
    out = emit_figures(tmp_path)
    assert out["overhead"].exists()
    assert out["queries"].exists()
    assert out["histogram_total"] == 0


def test_histogram_total_matches_counts(tmp_path):
    _write(
        tmp_path,
        trials=TRIALS_HEADER + "0,SuccessClean,1.500000,9.000000,3\n",
        queries=QUERIES_HEADER + "0,0,0,10\n0,0,5,3\n0,1,0,7\n0,1,2,5\n",
        paths=PATHS_HEADER + "0,0.000000,0.0,0.0,-2.0\n"
                             "0,0.100000,0.5,0.0,-2.0\n")
    out = emit_figures(tmp_path)
    assert out["histogram_total"] == 10 + 3 + 7 + 5


def test_malformed_count_names_row(tmp_path):
    _write(tmp_path,
           queries=QUERIES_HEADER + "0,0,0,10\n0,1,2,not_a_number\n")
    with pytest.raises(ValueError, match=r"queries\.csv row 3.*not_a_number"):
        emit_figures(tmp_path)


def test_missing_column_is_reported(tmp_path):
    _write(tmp_path, trials="trial_index,outcome\n")
    with pytest.raises(ValueError, match=r"trials\.csv: missing columns"):
        emit_figures(tmp_path)


def test_missing_file_is_reported(tmp_path):
    (tmp_path / "trials.csv").write_text(TRIALS_HEADER)
    (tmp_path / "paths.csv").write_text(PATHS_HEADER)
    with pytest.raises(ValueError, match=r"queries\.csv: file not found"):
        emit_figures(tmp_path)


def test_unknown_outcome_is_reported(tmp_path):
    _write(tmp_path,
           trials=TRIALS_HEADER + "0,Exploded,0.000000,1.000000,0\n")
    with pytest.raises(ValueError, match=r"trials\.csv row 2.*Exploded"):
        emit_figures(tmp_path)


def test_world_overlay_and_out_dir(tmp_path):
    (tmp_path / "csv").mkdir()
    csv_dir = _write(
        tmp_path / "csv",
        trials=TRIALS_HEADER + "0,Collision,-0.100000,4.000000,1\n",
        paths=PATHS_HEADER + "0,0.000000,0.0,0.0,-2.0\n"
                             "0,0.200000,1.0,0.1,-2.0\n")
    out_dir = tmp_path / "figs"
    out = emit_figures(csv_dir, out_dir=out_dir, world="hallway_two_turns")
    assert out["overhead"].parent == out_dir
    assert out["overhead"].stat().st_size > 0


def test_figures_from_real_export(tmp_path):
    rec = TrialRecord(
        trial_index=0, outcome="SuccessWithViolation", min_clearance=0.9,
        duration=10.0, waypoints_hit=4,
        trace=np.array([[0.0, 0.0, 0.0, -2.0] + [0.0] * 10,
                        [0.2, 1.0, 0.2, -2.1] + [0.0] * 10]),
        query_rows=[(0, 0, 40), (0, 6, 2)], query_depths={0: 40, 6: 2})
    write_experiment_csvs(ExperimentResult(TrialConfig(trial_count=1), [rec]),
                          tmp_path)
    out = emit_figures(tmp_path, world="hallway_two_turns")
    assert out["histogram_total"] == 42
