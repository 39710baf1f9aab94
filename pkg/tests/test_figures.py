import numpy as np

from cslab.evalkit import PROJECTION_COLUMNS, write_csv
from cslab.figures import render_projection_figure, render_run_report


def test_projection_figure_from_points(tmp_path):
    rng = np.random.default_rng(70)
    rows = []
    for i in range(40):
        expert = "man" if i % 2 == 0 else "eng"
        rows.append((f"u:{i}", expert, float(rng.normal()), float(rng.normal()),
                     "A" if i % 3 else "B"))
    csv = tmp_path / "projection_points.csv"
    write_csv(csv, PROJECTION_COLUMNS, rows)
    out = render_projection_figure(csv)
    assert out.exists() and out.suffix == ".png"


def test_run_report_on_empty_dir(tmp_path):
    assert render_run_report(tmp_path) == []
