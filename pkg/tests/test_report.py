"""Report serialization, CSV/figure siblings and the log plotter."""

import json

import numpy as np
import pytest

from hupe.report import build_report, plot_training_log, write_report


@pytest.fixture()
def per_image():
    rng = np.random.default_rng(0)
    return {
        f"img{i}": {"psnr": float(20 + rng.random()), "uiqm": float(rng.random())}
        for i in range(5)
    }


def test_aggregate_matches_mean_exactly(per_image):
    report = build_report(per_image)
    for metric in ("psnr", "uiqm"):
        vals = np.array([v[metric] for v in per_image.values()])
        assert abs(report["aggregate"][metric]["mean"] - vals.mean()) <= 1e-9
        assert abs(report["aggregate"][metric]["std"] - vals.std()) <= 1e-9
    assert report["count"] == 5


def test_write_emits_json_csv_and_figure(per_image, tmp_path):
    report = build_report(per_image)
    written = write_report(report, tmp_path / "out" / "report.json")
    names = {p.name for p in written}
    assert names == {"report.json", "report.csv", "report.png"}
    loaded = json.loads((tmp_path / "out" / "report.json").read_text())
    assert loaded["images"]["img0"]["psnr"] == per_image["img0"]["psnr"]
    csv_lines = (tmp_path / "out" / "report.csv").read_text().splitlines()
    assert csv_lines[0] == "image,psnr,uiqm"
    assert len(csv_lines) == 6


def test_figures_can_be_disabled(per_image, tmp_path):
    written = write_report(build_report(per_image), tmp_path / "r.json",
                           figures=False)
    assert {p.suffix for p in written} == {".json", ".csv"}


def test_training_log_plot(tmp_path):
    log = tmp_path / "log.jsonl"
    with open(log, "w") as fh:
        for step in range(10):
            fh.write(json.dumps({"phase": "pretrain_hin", "step": step,
                                 "l_e": 1.0 / (step + 1)}) + "\n")
        for step in range(5):
            fh.write(json.dumps({"phase": "joint", "step": step,
                                 "inner_l_g": 0.5, "outer_l_e": 0.9}) + "\n")
    out = plot_training_log(log, tmp_path / "curves.png")
    assert out is not None and out.is_file()


def test_empty_log_returns_none(tmp_path):
    log = tmp_path / "empty.jsonl"
    log.write_text("")
    assert plot_training_log(log, tmp_path / "x.png") is None
