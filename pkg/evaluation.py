"""
Desk-scale reproduction harness.

Builds experiment grids (activation, normalization, regularization), trains
and evaluates every cell on a worker pool, and assembles a report bundle of
CSV, markdown and xlsx tables. Published reference values ride along as
annotations for delta reporting; they are never asserted.
"""

import json
import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from chip_emulator import (CoreBudget, PowerModel, gap_report, quantize, readout_counts,
                           run_per_event)
from config import config
from detection import decode_head, iou, to_boxes
from event_io import Sample, bin_events
from snn_core import NetworkSpec, check_constraints, compact_spec, speck_yolo_spec
from tensor_engine import Tensor
from trainer import Checkpoint, TrainConfig, evaluate, fit_to_input, train

logger = logging.getLogger(__name__)

# Published regularization sweep, keyed by lambda (multi-spike rows)
REFERENCE_SWEEP = {
    0.0: {"sim_map": 0.923, "quant_map": 0.919, "sim_spikes_per_s": 26390291},
    1e-4: {"sim_map": 0.864, "quant_map": 0.870, "chip_map": 0.868, "chip_power_mw": 33.2,
           "chip_spikes_per_s": 567002, "sim_spikes_per_s": 1982899},
    1e-3: {"sim_map": 0.763, "quant_map": 0.763, "chip_map": 0.780, "chip_power_mw": 33.1,
           "chip_spikes_per_s": 553794, "sim_spikes_per_s": 472773},
    2e-3: {"sim_map": 0.685, "quant_map": 0.717, "chip_map": 0.705, "chip_power_mw": 24.8,
           "chip_spikes_per_s": 411300, "sim_spikes_per_s": 307160},
    3e-3: {"sim_map": 0.628, "quant_map": 0.623, "chip_map": 0.622, "chip_power_mw": 19.4,
           "chip_spikes_per_s": 319966, "sim_spikes_per_s": 231079},
    4e-3: {"sim_map": 0.566, "quant_map": 0.577, "chip_map": 0.598, "chip_power_mw": 17.3,
           "chip_spikes_per_s": 279745, "sim_spikes_per_s": 199202},
    5e-3: {"sim_map": 0.527, "quant_map": 0.546, "chip_map": 0.565, "chip_power_mw": 11.8,
           "chip_spikes_per_s": 192292, "sim_spikes_per_s": 146441},
    1e-2: {"sim_map": 0.407, "quant_map": 0.406, "chip_map": 0.419, "chip_power_mw": 7.3,
           "chip_spikes_per_s": 104767, "sim_spikes_per_s": 78299},
}

TABLE_HEADERS = {
    "lambda": "Reg.",
    "sim_map": "Sim. mAP[0.5]",
    "quant_map": "Sim. Quant. mAP[0.5]",
    "chip_map": "Chip mAP[0.5]",
    "chip_power_mw": "Chip Power (mW)",
    "chip_spikes_per_s": "Chip Spikes/s",
    "sim_spikes_per_s": "Sim. Spikes/s",
    "sim_synops_per_s_m": "Sim. SynOps/s(M)",
}


@dataclass
class ExperimentCell:
    name: str
    activation: str
    representation: str
    window_us: int
    lam: float = 0.0
    normalization: str = "layer"
    variant: str = "compact"
    modes: Tuple[str, ...] = ("float_sim",)
    reference: Dict[str, float] = field(default_factory=dict)

    def network_spec(self, resolution: int) -> NetworkSpec:
        if self.variant == "speck":
            return speck_yolo_spec(activation=self.activation, normalization=self.normalization,
                                   input_shape=(2, resolution, resolution))
        if self.variant == "compact":
            return compact_spec(resolution, activation=self.activation, normalization=self.normalization)
        raise ValueError(f"Unknown model variant '{self.variant}'")

    def train_config(self, base: TrainConfig, seed: int) -> TrainConfig:
        return replace(base, activation=self.activation, representation=self.representation,
                       window_us=self.window_us, lam=self.lam, seed=seed, threads=1)


@dataclass
class ExperimentGrid:
    name: str
    cells: List[ExperimentCell] = field(default_factory=list)
    resolution: int = 32

    def __len__(self) -> int:
        return len(self.cells)


def activation_grid(resolution: int = 32, variant: str = "compact") -> ExperimentGrid:
    """ANN reference against single- and multi-spike models at 90 ms and 10 ms windows"""
    cells = [
        ExperimentCell("ann-90ms", "relu", "histogram", 90000, reference={"sim_map": 0.883}),
        ExperimentCell("ann-10ms", "relu", "histogram", 10000, reference={"sim_map": 0.775}),
        ExperimentCell("ss-90ms", "single", "binary", 90000, normalization="none",
                       modes=("float_sim", "quant_sim"), reference={"sim_map": 0.715}),
        ExperimentCell("ss-10ms", "single", "binary", 10000, normalization="none",
                       modes=("float_sim", "quant_sim"), reference={"sim_map": 0.587}),
        ExperimentCell("ms-ln-10ms", "multi", "histogram", 10000,
                       modes=("float_sim", "quant_sim"), reference={"sim_map": 0.923}),
    ]
    return ExperimentGrid("activation", [replace(c, variant=variant) for c in cells], resolution)


def normalization_grid(resolution: int = 32, variant: str = "compact",
                       window_us: Optional[int] = None) -> ExperimentGrid:
    window_us = window_us or config.WINDOW_US
    references = {"none": 0.0, "batch": 0.001, "layer": 0.923}
    cells = [
        ExperimentCell(f"ms-{norm}", "multi", "histogram", window_us, normalization=norm, variant=variant,
                       reference={"sim_map": ref})
        for norm, ref in references.items()
    ]
    return ExperimentGrid("normalization", cells, resolution)


def lambda_grid(lambdas: Sequence[float] = (0.0, 1e-3, 1e-2), resolution: int = 32,
                variant: str = "compact", window_us: Optional[int] = None) -> ExperimentGrid:
    window_us = window_us or config.WINDOW_US
    cells = [
        ExperimentCell(f"ms-lambda-{lam:g}", "multi", "histogram", window_us, lam=float(lam), variant=variant,
                       modes=("float_sim", "quant_sim", "emulator"),
                       reference=dict(REFERENCE_SWEEP.get(float(lam), {})))
        for lam in lambdas
    ]
    return ExperimentGrid("lambda", cells, resolution)


def faces_grid() -> ExperimentGrid:
    """Full-size topology at 128x128 for the recorded faces data"""
    cells = activation_grid(128, "speck").cells + normalization_grid(128, "speck").cells
    return ExperimentGrid("faces", cells, 128)


@dataclass
class ReportBundle:
    cells: pd.DataFrame = field(default_factory=pd.DataFrame)
    gaps: Dict[str, Dict] = field(default_factory=dict)
    pareto: pd.DataFrame = field(default_factory=pd.DataFrame)
    iou_trace: Optional[pd.DataFrame] = None
    power_timeline: Optional[pd.DataFrame] = None

    @property
    def empty(self) -> bool:
        return self.cells.empty

    def to_markdown(self) -> str:
        sections = ["# Experiment report", ""]
        if self.empty:
            sections.append("No experiment cells were run.")
            return "\n".join(sections) + "\n"
        sections += ["## Cells", "", _markdown_table(self.cells), ""]
        if not self.pareto.empty:
            table = self.pareto.rename(columns=TABLE_HEADERS)
            sections += ["## Regularization sweep", "", _markdown_table(table), ""]
        if self.gaps:
            gaps = pd.DataFrame([dict(cell=name, **gap) for name, gap in self.gaps.items()])
            sections += ["## Sim-to-chip activity gap", "", _markdown_table(gaps), ""]
        return "\n".join(sections)

    def write(self, out_dir) -> Path:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        self.cells.to_csv(out_dir / "cells.csv", index=False)
        if not self.pareto.empty:
            self.pareto.to_csv(out_dir / "pareto.csv", index=False)
        if self.iou_trace is not None:
            self.iou_trace.to_csv(out_dir / "iou_trace.csv", index=False)
        if self.power_timeline is not None:
            self.power_timeline.to_csv(out_dir / "power_timeline.csv", index=False)
        with open(out_dir / "gaps.json", "w", encoding="utf-8") as f:
            json.dump(self.gaps, f, indent=2)
        (out_dir / "report.md").write_text(self.to_markdown(), encoding="utf-8")

        with pd.ExcelWriter(out_dir / "report.xlsx", engine="openpyxl") as writer:
            self.cells.to_excel(writer, sheet_name="cells", index=False)
            if not self.pareto.empty:
                self.pareto.rename(columns=TABLE_HEADERS).to_excel(writer, sheet_name="pareto", index=False)
            if self.iou_trace is not None:
                self.iou_trace.to_excel(writer, sheet_name="iou_trace", index=False)
        logger.info(f"Report written to {out_dir}")
        return out_dir

    @classmethod
    def read(cls, out_dir) -> "ReportBundle":
        out_dir = Path(out_dir)

        def optional(name):
            path = out_dir / name
            return pd.read_csv(path) if path.exists() else None

        gaps_path = out_dir / "gaps.json"
        gaps = json.loads(gaps_path.read_text(encoding="utf-8")) if gaps_path.exists() else {}
        cells_path = out_dir / "cells.csv"
        cells = pd.read_csv(cells_path) if cells_path.exists() and cells_path.stat().st_size > 1 else pd.DataFrame()
        pareto = optional("pareto.csv")
        return cls(
            cells=cells,
            gaps=gaps,
            pareto=pareto if pareto is not None else pd.DataFrame(),
            iou_trace=optional("iou_trace.csv"),
            power_timeline=optional("power_timeline.csv"),
        )


def _markdown_table(frame: pd.DataFrame) -> str:
    def fmt(value):
        if isinstance(value, (float, np.floating)):
            if np.isnan(value):
                return "-"
            return f"{value:.4g}"
        return str(value)

    header = "| " + " | ".join(str(c) for c in frame.columns) + " |"
    rule = "| " + " | ".join("---" for _ in frame.columns) + " |"
    rows = ["| " + " | ".join(fmt(v) for v in row) + " |" for row in frame.itertuples(index=False)]
    return "\n".join([header, rule] + rows)


@dataclass
class _CellOutcome:
    row: Dict
    checkpoint: Checkpoint
    gap: Optional[Dict] = None


def _run_cell(cell: ExperimentCell, grid: ExperimentGrid, train_samples: Sequence[Sample],
              val_samples: Sequence[Sample], base: TrainConfig, seed: int,
              budget: CoreBudget) -> _CellOutcome:
    spec = cell.network_spec(grid.resolution)
    cfg = cell.train_config(base, seed)
    logger.info(f"Running cell '{cell.name}' ({cell.activation}/{cell.representation}, "
                f"{cell.window_us} us, lambda={cell.lam:g}, norm={cell.normalization})")
    result = train(spec, train_samples, val_samples, cfg, budget=budget, enforce_constraints=False)
    row = {
        "cell": cell.name,
        "variant": cell.variant,
        "activation": cell.activation,
        "representation": cell.representation,
        "window_us": cell.window_us,
        "lambda": cell.lam,
        "normalization": cell.normalization,
        "seed": seed,
    }
    prefix = {"float_sim": "sim", "quant_sim": "quant", "emulator": "chip"}
    for mode in cell.modes:
        if mode == "emulator" and not check_constraints(spec, budget).passed:
            logger.warning(f"Cell '{cell.name}' does not fit the chip; skipping emulation")
            continue
        metrics = evaluate(result.checkpoint, val_samples, mode, budget, threads=1)
        key = prefix[mode]
        row[f"{key}_map"] = metrics.map50
        row[f"{key}_map_range"] = metrics.map_range
        row[f"{key}_spikes_per_s"] = metrics.spikes_per_s
        row[f"{key}_synops_per_s"] = metrics.synops_per_s
        if mode == "emulator":
            row["chip_power_mw"] = metrics.power_mw
            row["chip_stall"] = bool(metrics.stall["stalled_samples"] > 0)
    for key, value in cell.reference.items():
        row[f"ref_{key}"] = value
        if key in row:
            row[f"delta_{key}"] = row[key] - value

    gap = None
    if "emulator" in cell.modes and cell.activation != "relu" and check_constraints(spec, budget).passed:
        model = result.checkpoint.model()
        sample = fit_to_input(val_samples[0], spec)
        report = gap_report(spec, model.layers, quantize(spec, model.layers), sample.stream,
                            cell.window_us, budget, check=False)
        gap = report.to_dict()
    return _CellOutcome(row=row, checkpoint=result.checkpoint, gap=gap)


def _pareto(cells: pd.DataFrame) -> pd.DataFrame:
    if cells.empty or "chip_spikes_per_s" not in cells:
        return pd.DataFrame()
    swept = cells.dropna(subset=["chip_spikes_per_s"]).sort_values("lambda", kind="stable")
    columns = {
        "lambda": swept["lambda"],
        "sim_map": swept.get("sim_map"),
        "quant_map": swept.get("quant_map"),
        "chip_map": swept.get("chip_map"),
        "chip_power_mw": swept.get("chip_power_mw"),
        "chip_spikes_per_s": swept["chip_spikes_per_s"],
        "sim_spikes_per_s": swept.get("sim_spikes_per_s"),
        "sim_synops_per_s_m": swept.get("sim_synops_per_s") / 1e6 if "sim_synops_per_s" in swept else None,
    }
    return pd.DataFrame({k: v for k, v in columns.items() if v is not None}).reset_index(drop=True)


def run_grid(grid: ExperimentGrid, train_samples: Sequence[Sample], val_samples: Sequence[Sample],
             seed: int = 0, base: Optional[TrainConfig] = None, budget: Optional[CoreBudget] = None,
             threads: Optional[int] = None, trace: bool = True) -> ReportBundle:
    """Train and evaluate every cell; results are assembled in grid order"""
    if not grid.cells:
        return ReportBundle()
    base = base or TrainConfig()
    budget = budget or CoreBudget()

    with ThreadPoolExecutor(max_workers=max(1, threads or config.THREADS)) as pool:
        futures = [
            pool.submit(_run_cell, cell, grid, train_samples, val_samples, base, seed, budget)
            for cell in grid.cells
        ]
        outcomes = [f.result() for f in futures]

    cells = pd.DataFrame([o.row for o in outcomes])
    bundle = ReportBundle(
        cells=cells,
        gaps={cell.name: o.gap for cell, o in zip(grid.cells, outcomes) if o.gap is not None},
        pareto=_pareto(cells),
    )
    if trace:
        spiking = [(o, c) for o, c in zip(outcomes, grid.cells) if c.activation != "relu"]
        if spiking:
            best, cell = max(spiking, key=lambda oc: oc[0].row.get("sim_map", 0.0))
            mode = "emulator" if "emulator" in cell.modes else "float_sim"
            bundle.iou_trace = iou_trace(best.checkpoint, val_samples[0], mode, budget)
            bundle.power_timeline = bundle.iou_trace[["t_ms", "power_mw"]].rename(columns={"power_mw": "mW"})
    return bundle


def iou_trace(checkpoint: Checkpoint, sample: Sample, mode: str = "emulator",
              budget: Optional[CoreBudget] = None, power: Optional[PowerModel] = None) -> pd.DataFrame:
    """Per-window IoU of the top box, input events, spikes and instantaneous power for one sample"""
    cfg = checkpoint.train_config
    model = checkpoint.model()
    power = power or PowerModel()
    sample = fit_to_input(sample, model.spec)
    frames = bin_events(sample.stream, cfg.window_us, cfg.representation)
    timesteps = frames.timesteps
    window_s = cfg.window_us * 1e-6

    if mode == "emulator":
        qnet = quantize(model.spec, model.layers)
        events, report = run_per_event(qnet, sample.stream, budget or CoreBudget())
        counts = readout_counts(events, qnet.output_grid, cfg.window_us, timesteps)
        preds = [decode_head(Tensor(row.astype(np.float64)), model.head) for row in counts]
        bins = np.minimum((report.spike_times_us // cfg.window_us).astype(np.int64), max(timesteps - 1, 0))
        spikes = np.bincount(bins, weights=report.spike_counts, minlength=timesteps)[:timesteps]
    else:
        layers = quantize(model.spec, model.layers).as_params() if mode == "quant_sim" else None
        preds, run = model.predict(frames, mode=cfg.activation, layers=layers)
        spikes = run.layer_totals().sum(axis=0) if run.layer_spikes else np.zeros(timesteps)

    ious = []
    for t, pred in enumerate(preds):
        truth = sample.boxes_at(t, cfg.window_us)
        top = to_boxes(pred).top()
        ious.append(iou(top[0], truth[0]) if top and truth else 0.0)
    rates = np.asarray(spikes, dtype=np.float64) / window_s
    return pd.DataFrame({
        "t_ms": np.arange(timesteps) * cfg.window_us / 1000.0,
        "iou": ious,
        "input_events": frames.data.reshape(timesteps, -1).sum(axis=1),
        "spikes": np.asarray(spikes, dtype=np.float64),
        "power_mw": power.power_at(rates),
    })
