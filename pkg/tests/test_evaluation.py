import math

import pytest

from aiorestore import io as imio
from aiorestore.backbone import build_model
from aiorestore.evaluation import (
    COMPONENT_GRID, AblationReport, MetricReport, MetricRow, component_config, evaluate, read_records,
    render_records, run_component_ablation, run_order_ablation, train_and_evaluate,
)
from aiorestore.exceptions import EvaluationError, ValidationError
from aiorestore.metrics import psnr, ssim


@pytest.fixture
def mixed_data(toy_data, tmp_path):
    """The toy pairs split over two tags."""
    _, rows = toy_data
    rows = [r._replace(tag="noise" if i % 2 else "haze") for i, r in enumerate(rows)]
    return rows


def test_identity_model_reports_input_psnr(toy_data, tiny_config):
    _, rows = toy_data
    model = build_model(tiny_config)
    report = evaluate(model, rows)
    for img in report.images:
        row = next(r for r in rows if img["image"] in r.degraded)
        deg, clean = imio.read_image(row.degraded), imio.read_image(row.clean)
        # the model runs in float32, so agreement is to float32 rounding
        assert img["psnr"] == pytest.approx(psnr(deg, clean), abs=1e-4)
        assert img["ssim"] == pytest.approx(ssim(deg, clean), abs=1e-5)
    assert report.rows[0].count == len(rows)


def test_empty_tag_goes_to_footer(mixed_data, tiny_config):
    report = evaluate(build_model(tiny_config), mixed_data, tags=["haze", "noise", "snow"])
    assert [r.tag for r in report.rows] == ["haze", "noise"]
    assert report.footer == ("dataset 'snow' has no images and is omitted",)
    assert "snow" in report.to_text()
    p = sum(r.psnr for r in report.rows) / 2
    assert report.averages[0] == pytest.approx(p, abs=1e-12)


def test_invariant_to_row_order(mixed_data, tiny_config):
    model = build_model(tiny_config)
    a = evaluate(model, mixed_data)
    b = evaluate(model, list(reversed(mixed_data)))
    assert a.rows == b.rows and a.averages == b.averages


def test_report_validation_and_records(tmp_path):
    rows = (MetricRow("haze", 30.0, 0.9, 2), MetricRow("rain", 20.0, 0.8, 1))
    rep = MetricReport.from_rows(rows, ["note"])
    assert rep.averages == (25.0, pytest.approx(0.85))
    with pytest.raises(ValidationError):
        MetricReport(rows, (26.0, 0.85))
    txt, nd = rep.write(tmp_path / "r")
    assert txt.read_text() == rep.to_text()
    assert render_records(read_records(nd)) == rep.to_text()
    with pytest.raises(EvaluationError):
        render_records([])
    with pytest.raises(EvaluationError):
        read_records(tmp_path / "missing.ndjson")


def test_inf_psnr_survives_records(tmp_path):
    rep = MetricReport.from_rows([MetricRow("a", math.inf, 1.0)])
    _, nd = rep.write(tmp_path / "inf")
    assert render_records(read_records(nd)) == rep.to_text()
    assert "inf" in rep.to_text()


def test_evaluate_wraps_errors(tmp_path, toy_data, tiny_config):
    _, rows = toy_data
    bad = [rows[0]._replace(clean=str(tmp_path / "gone.png"))]
    with pytest.raises(EvaluationError, match="image"):
        evaluate(build_model(tiny_config), bad)
    with pytest.raises(EvaluationError):
        evaluate(build_model(tiny_config), [])


def test_order_ablation_single_row_and_determinism(toy_data, tiny_config):
    _, rows = toy_data
    cfg = tiny_config.with_optimizer(total_iterations=2)
    a = run_order_ablation(cfg, rows, orders=[("how", "where", "what")])
    assert [r.label for r in a.rows] == ["Ours"]
    b = run_order_ablation(cfg, rows, orders=[("how", "where", "what")])
    assert a == b
    c = run_order_ablation(cfg, rows, orders=[("what", "where", "how")])
    assert c.rows[0].label == "x1" and c.rows[0].reference is None
    with pytest.raises(ValidationError):
        run_order_ablation(cfg, rows, orders=[("how", "how", "what")])


def test_order_grid_labels(toy_data, tiny_config):
    _, rows = toy_data
    rep = run_order_ablation(tiny_config.with_optimizer(total_iterations=1), rows)
    assert [r.label for r in rep.rows] == ["a", "b", "Ours"]
    assert rep.row("a").setting == ("where", "what", "how")
    assert "not comparable" in rep.to_text()


def test_component_grid(tmp_path, toy_data, tiny_config):
    _, rows = toy_data
    cfg = tiny_config.with_optimizer(total_iterations=2)
    rep = run_component_ablation(cfg, rows)
    assert [r.label for r in rep.rows] == ["a", "b", "c", "d", "e", "f", "g", "Ours"]
    assert all(r.error is None and math.isfinite(r.psnr) for r in rep.rows)
    ours = train_and_evaluate(component_config(cfg, (True,) * 4), rows)
    assert rep.row("Ours").psnr == ours.averages[0]
    _, nd = rep.write(tmp_path / "comp")
    assert render_records(read_records(nd)) == rep.to_text()
    assert isinstance(rep, AblationReport) and rep.iterations == 2


def test_all_off_grid_fails_before_training(toy_data, tiny_config):
    _, rows = toy_data
    grid = COMPONENT_GRID + (("z", (False, False, False, False)),)
    with pytest.raises(ValidationError):
        run_component_ablation(tiny_config, rows, grid=grid)
