import numpy as np
import pandas as pd
import pytest

from chip_emulator import PowerModel
from evaluation import (REFERENCE_SWEEP, ExperimentCell, ExperimentGrid, ReportBundle, activation_grid,
                        faces_grid, iou_trace, lambda_grid, normalization_grid, run_grid)
from trainer import TrainConfig, train


def _base():
    return TrainConfig(epochs=1, batch_size=2, window_us=1000, threads=1, augment=False, init_gain=3.0)


def _bundle():
    cells = pd.DataFrame({
        "cell": ["ms-lambda-0", "ms-lambda-0.001"],
        "lambda": [0.0, 0.001],
        "sim_map": [0.5, 0.25],
        "chip_spikes_per_s": [1200.0, 300.0],
    })
    pareto = cells[["lambda", "sim_map", "chip_spikes_per_s"]].assign(chip_power_mw=[1.2, 0.95])
    trace = pd.DataFrame({"t_ms": [0.0, 1.0], "iou": [0.0, 0.75], "input_events": [3.0, 5.0],
                          "spikes": [1.0, 2.0], "power_mw": [0.91, 0.92]})
    return ReportBundle(cells=cells, gaps={"ms-lambda-0": {"ratio": 1.5}}, pareto=pareto, iou_trace=trace,
                        power_timeline=trace[["t_ms", "power_mw"]].rename(columns={"power_mw": "mW"}))


class TestGrids:
    def test_activation_grid_cells(self):
        grid = activation_grid()
        assert len(grid) == 5
        assert [c.activation for c in grid.cells] == ["relu", "relu", "single", "single", "multi"]
        assert grid.cells[-1].reference["sim_map"] == pytest.approx(0.923)
        assert {c.window_us for c in grid.cells} == {90000, 10000}

    def test_single_spike_cells_use_binary_frames(self):
        for cell in activation_grid().cells:
            if cell.activation == "single":
                assert cell.representation == "binary"
                assert cell.normalization == "none"

    def test_normalization_grid_references(self):
        grid = normalization_grid(window_us=5000)
        assert [c.normalization for c in grid.cells] == ["none", "batch", "layer"]
        assert grid.cells[2].reference["sim_map"] == pytest.approx(0.923)
        assert all(c.window_us == 5000 for c in grid.cells)

    def test_lambda_grid_carries_reference_rows(self):
        grid = lambda_grid([0.0, 1e-3, 0.5])
        assert grid.cells[1].reference == REFERENCE_SWEEP[1e-3]
        assert grid.cells[2].reference == {}
        assert all("emulator" in c.modes for c in grid.cells)

    def test_faces_grid_uses_full_topology(self):
        grid = faces_grid()
        assert grid.resolution == 128
        assert len(grid) == 8
        assert all(c.variant == "speck" for c in grid.cells)

    def test_cell_builds_spec_and_config(self):
        cell = ExperimentCell("x", "single", "binary", 2000, lam=0.01, normalization="none")
        spec = cell.network_spec(16)
        assert spec.input_shape == (2, 16, 16)
        assert spec.activation == "single"
        cfg = cell.train_config(_base(), seed=7)
        assert (cfg.lam, cfg.window_us, cfg.seed, cfg.representation) == (0.01, 2000, 7, "binary")

    def test_unknown_variant(self):
        with pytest.raises(ValueError):
            ExperimentCell("x", "multi", "histogram", 1000, variant="fpga").network_spec(16)


class TestReportBundle:
    def test_empty_bundle(self):
        bundle = ReportBundle()
        assert bundle.empty
        assert "No experiment cells" in bundle.to_markdown()

    def test_markdown_uses_table_headers(self):
        text = _bundle().to_markdown()
        assert "| Reg. |" in text
        assert "Chip Power (mW)" in text
        assert "## Sim-to-chip activity gap" in text

    def test_write_and_read(self, tmp_path):
        bundle = _bundle()
        bundle.write(tmp_path)
        for name in ("cells.csv", "pareto.csv", "iou_trace.csv", "power_timeline.csv", "gaps.json",
                     "report.md", "report.xlsx"):
            assert (tmp_path / name).exists()
        loaded = ReportBundle.read(tmp_path)
        pd.testing.assert_frame_equal(loaded.cells, bundle.cells)
        pd.testing.assert_frame_equal(loaded.iou_trace, bundle.iou_trace)
        assert loaded.gaps == bundle.gaps

    def test_xlsx_has_named_sheets(self, tmp_path):
        _bundle().write(tmp_path)
        sheets = pd.read_excel(tmp_path / "report.xlsx", sheet_name=None, engine="openpyxl")
        assert set(sheets) == {"cells", "pareto", "iou_trace"}
        assert "Reg." in sheets["pareto"].columns


class TestIoUTrace:
    def test_power_follows_spike_rate(self, tiny_spec, tiny_samples):
        checkpoint = train(tiny_spec, tiny_samples[:4], tiny_samples[4:], _base()).checkpoint
        power = PowerModel(idle_mw=1.0, slope_mw=0.01)
        trace = iou_trace(checkpoint, tiny_samples[4], mode="float_sim", power=power)
        assert list(trace.columns) == ["t_ms", "iou", "input_events", "spikes", "power_mw"]
        assert len(trace) == 4
        np.testing.assert_allclose(trace["t_ms"], [0.0, 1.0, 2.0, 3.0])
        np.testing.assert_allclose(trace["power_mw"], 1.0 + 0.01 * trace["spikes"] / 1e-3)
        assert trace["iou"].between(0.0, 1.0).all()

    def test_emulator_trace(self, tiny_spec, tiny_samples):
        checkpoint = train(tiny_spec, tiny_samples[:4], tiny_samples[4:], _base()).checkpoint
        trace = iou_trace(checkpoint, tiny_samples[4], mode="emulator")
        assert len(trace) == 4
        assert (trace["power_mw"] >= 0.9).all()
        assert (trace["spikes"] >= 0).all()


class TestRunGrid:
    def test_empty_grid(self, tiny_samples):
        bundle = run_grid(ExperimentGrid("none"), tiny_samples[:4], tiny_samples[4:])
        assert bundle.empty

    def test_cells_in_grid_order(self, tiny_samples):
        cells = [
            ExperimentCell("ann", "relu", "histogram", 1000, reference={"sim_map": 0.5}),
            ExperimentCell("ms", "multi", "histogram", 1000, reference={"sim_map": 0.9}),
        ]
        grid = ExperimentGrid("small", cells, resolution=16)
        bundle = run_grid(grid, tiny_samples[:4], tiny_samples[4:], base=_base(), threads=2)
        assert list(bundle.cells["cell"]) == ["ann", "ms"]
        assert {"sim_map", "ref_sim_map", "delta_sim_map", "sim_spikes_per_s"} <= set(bundle.cells.columns)
        np.testing.assert_allclose(bundle.cells["delta_sim_map"],
                                   bundle.cells["sim_map"] - bundle.cells["ref_sim_map"])
        assert bundle.pareto.empty
        assert bundle.iou_trace is not None
        assert list(bundle.power_timeline.columns) == ["t_ms", "mW"]

    @pytest.mark.slow
    def test_lambda_grid_reaches_the_chip(self, tiny_samples):
        grid = lambda_grid([0.0, 1e-2], resolution=16, window_us=1000)
        bundle = run_grid(grid, tiny_samples[:4], tiny_samples[4:], base=_base(), threads=2)
        assert len(bundle.pareto) == 2
        assert list(bundle.pareto["lambda"]) == [0.0, 0.01]
        assert (bundle.cells["chip_power_mw"] >= 0.9).all()
        assert set(bundle.gaps) == {c.name for c in grid.cells}
