"""
Command-line entry point: python cli.py <subcommand> [flags] [key=value ...]

Exit codes: 0 ok, 1 unexpected error, 2 malformed input or config,
3 constraint violation, 4 missing artifact.
"""

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import dataclass, field, fields, replace
from datetime import datetime
from pathlib import Path
from typing import Dict, List, Optional, Tuple

import pytz
from dotenv import load_dotenv

# Load environment variables before config is imported
load_dotenv()

from config import config  # noqa: E402

logging.basicConfig(
    level=getattr(logging, config.LOG_LEVEL.upper(), logging.INFO),
    format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
)
logger = logging.getLogger(__name__)

if config.SENTRY_DSN:
    try:
        import sentry_sdk

        sentry_sdk.init(
            dsn=config.SENTRY_DSN,
            traces_sample_rate=0.1,
            environment=config.ENVIRONMENT,
        )
        logger.info("Sentry error tracking initialized")
    except ImportError:
        logger.warning("Sentry SDK not installed. Install with: pip install sentry-sdk")
    except Exception as e:
        logger.error(f"Failed to initialize Sentry: {e}")

import pandas as pd  # noqa: E402

from chip_emulator import (MEASURED_POWER_POINTS, ConstraintViolation, CoreBudget, EmulatorError,  # noqa: E402
                           calibrate_power, estimate_power, load_quantized, quantize, run_per_event,
                           save_quantized)
from detection import DetectionError  # noqa: E402
from evaluation import (ExperimentGrid, ReportBundle, activation_grid, faces_grid, lambda_grid,  # noqa: E402
                        normalization_grid, run_grid)
from event_io import (EventIOError, Sample, SynthConfig, load_boxes_jsonl, read_aer_file,  # noqa: E402
                      save_boxes_jsonl, stratified_split, synth_moving_box, write_aer_file)
from snn_core import (NetworkSpec, SNNError, check_constraints, compact_spec, save_network_spec,  # noqa: E402
                      speck_yolo_spec, yole_spec)
from tensor_engine import TensorError  # noqa: E402
from trainer import (Checkpoint, TrainConfig, TrainingError, evaluate, fit_to_input, sweep_lambda,  # noqa: E402
                     train)

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_MALFORMED = 2
EXIT_CONSTRAINT = 3
EXIT_MISSING = 4

MANIFEST_NAME = "manifest.json"
RUN_CONFIG_KEYS = {"train", "variant", "resolution", "spec", "budget", "synth"}
SPEC_BUILDERS = {"compact": compact_spec, "speck": speck_yolo_spec, "yole": yole_spec}


class MissingArtifact(Exception):
    pass


class MalformedInput(Exception):
    pass


@dataclass
class CliConfig:
    subcommand: str
    config_path: Optional[str] = None
    data: Optional[str] = None
    out: str = field(default_factory=lambda: config.OUT_DIR)
    seed: int = field(default_factory=lambda: config.SEED)
    overrides: Dict[str, object] = field(default_factory=dict)


def _sha256(path: Path) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 16), b""):
            digest.update(chunk)
    return digest.hexdigest()


def _require(path: Optional[str], what: str) -> Path:
    if not path:
        raise MissingArtifact(f"No {what} given")
    resolved = Path(path)
    if not resolved.exists():
        raise MissingArtifact(config.ERROR_MISSING_ARTIFACT.format(path=resolved))
    return resolved


def parse_overrides(items: List[str]) -> Dict[str, object]:
    """key=value pairs; values parse as JSON when possible, else stay strings"""
    overrides = {}
    for item in items:
        if "=" not in item:
            raise MalformedInput(f"Override '{item}' is not of the form key=value")
        key, raw = item.split("=", 1)
        try:
            value = json.loads(raw)
        except json.JSONDecodeError:
            value = raw
        overrides[key.strip()] = value
    return overrides


def load_run_config(path: Optional[str]) -> Dict:
    if not path:
        return {}
    with open(_require(path, "config file"), "r", encoding="utf-8") as f:
        try:
            data = json.load(f)
        except json.JSONDecodeError as e:
            raise MalformedInput(f"{path}: invalid JSON ({e})") from e
    unknown = set(data) - RUN_CONFIG_KEYS
    if unknown:
        raise MalformedInput(f"{path}: unknown config keys {sorted(unknown)}")
    return data


def build_train_config(args, run_config: Dict, cli: CliConfig) -> TrainConfig:
    values = dict(run_config.get("train", {}))
    values["seed"] = cli.seed
    if getattr(args, "mode", None):
        values["activation"] = args.mode
        values.setdefault("representation", None)
    if getattr(args, "repr", None):
        values["representation"] = args.repr
    if getattr(args, "window_us", None):
        values["window_us"] = args.window_us
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(cli.overrides) - known
    if unknown:
        raise MalformedInput(f"Unknown override keys: {sorted(unknown)}")
    values.update(cli.overrides)
    return TrainConfig.from_dict(values)


def build_spec(run_config: Dict, cfg: TrainConfig, normalization: Optional[str] = None) -> NetworkSpec:
    if "spec" in run_config:
        return NetworkSpec.from_dict(run_config["spec"]).with_activation(cfg.activation)
    variant = run_config.get("variant", "compact")
    if variant not in SPEC_BUILDERS:
        raise MalformedInput(f"Unknown model variant '{variant}'")
    kwargs = {"activation": cfg.activation}
    if normalization:
        kwargs["normalization"] = normalization
    if variant == "compact":
        return compact_spec(int(run_config.get("resolution", 32)), **kwargs)
    if variant == "speck":
        side = int(run_config.get("resolution", 128))
        return speck_yolo_spec(input_shape=(2, side, side), **kwargs)
    return yole_spec(**kwargs)


def build_budget(args, run_config: Dict) -> CoreBudget:
    if getattr(args, "budget", None):
        return CoreBudget.load(args.budget)
    if "budget" in run_config:
        return CoreBudget.from_dict(run_config["budget"])
    return CoreBudget()


def make_run_dir(cli: CliConfig, effective: Dict) -> Path:
    blob = json.dumps(effective, sort_keys=True, default=str).encode("utf-8")
    stamp = datetime.now(pytz.UTC).strftime("%Y%m%dT%H%M%SZ")
    run_dir = Path(cli.out) / f"{stamp}-{hashlib.sha256(blob).hexdigest()[:10]}"
    run_dir.mkdir(parents=True, exist_ok=True)
    with open(run_dir / "config.json", "w", encoding="utf-8") as f:
        json.dump(effective, f, indent=2, sort_keys=True, default=str)
    logger.info(f"Run directory: {run_dir}")
    return run_dir


def synth_samples(n: int, seed: int, run_config: Dict) -> List[Sample]:
    # JSON gives lists where the dataclass expects tuples
    values = {k: tuple(v) if isinstance(v, list) else v for k, v in run_config.get("synth", {}).items()}
    synth = SynthConfig(**values)
    return [synth_moving_box(synth, seed * 100_003 + i) for i in range(n)]


def write_manifest(samples: List[Sample], out_dir: Path, seed: int, source: str) -> Path:
    """Store samples as AER + JSONL pairs and list them with checksums; output is seed-deterministic"""
    out_dir.mkdir(parents=True, exist_ok=True)
    train_set, val_set = stratified_split(samples, seed=seed)
    records = []
    for sample in train_set + val_set:
        aer = out_dir / f"{sample.name}.aer"
        boxes = out_dir / f"{sample.name}.jsonl"
        write_aer_file(aer, sample.stream)
        save_boxes_jsonl(boxes, sample.track or sample.boxes)
        records.append({
            "name": sample.name,
            "aer": aer.name,
            "boxes": boxes.name,
            "sha256_aer": _sha256(aer),
            "sha256_boxes": _sha256(boxes),
            "split": sample.split_tag,
            "label": sample.label,
            "resolution": list(sample.stream.resolution),
            "duration_us": sample.stream.duration_us,
            "events": len(sample.stream),
            "track_window_us": sample.track_window_us if sample.track else 0,
        })
    manifest = {"source": source, "seed": seed, "samples": sorted(records, key=lambda r: r["name"])}
    path = out_dir / MANIFEST_NAME
    with open(path, "w", encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
    logger.info(f"Wrote manifest of {len(records)} samples to {path}")
    return path


def load_manifest(data_dir: Path) -> Tuple[List[Sample], List[Sample]]:
    path = data_dir / MANIFEST_NAME if data_dir.is_dir() else data_dir
    if not path.exists():
        raise MissingArtifact(config.ERROR_MISSING_ARTIFACT.format(path=path))
    with open(path, "r", encoding="utf-8") as f:
        manifest = json.load(f)
    root = path.parent
    train_set, val_set = [], []
    for record in manifest["samples"]:
        aer = _require(str(root / record["aer"]), "AER file")
        boxes_path = _require(str(root / record["boxes"]), "box sidecar")
        if _sha256(aer) != record["sha256_aer"] or _sha256(boxes_path) != record["sha256_boxes"]:
            raise MalformedInput(f"Checksum mismatch for sample '{record['name']}'")
        stream = read_aer_file(aer, tuple(record["resolution"]))
        stream = replace(stream, duration_us=int(record["duration_us"]))
        boxes = load_boxes_jsonl(boxes_path)
        track_window = int(record.get("track_window_us", 0))
        sample = Sample(
            stream=stream,
            boxes=boxes[:1] if track_window else boxes,
            split_tag=record["split"],
            name=record["name"],
            track=boxes if track_window else None,
            track_window_us=track_window,
        )
        (train_set if sample.split_tag == "train" else val_set).append(sample)
    return train_set, val_set


def load_dataset(args, cli: CliConfig, run_config: Dict) -> Tuple[List[Sample], List[Sample]]:
    if getattr(args, "synthetic", False):
        return stratified_split(synth_samples(args.n, cli.seed, run_config), seed=cli.seed)
    return load_manifest(_require(cli.data, "dataset (--data or --synthetic)"))


def _check(spec: NetworkSpec, budget: CoreBudget, run_dir: Path) -> None:
    report = check_constraints(spec, budget)
    (run_dir / "constraints.json").write_text(report.to_json(), encoding="utf-8")
    if not report.passed:
        raise ConstraintViolation(config.ERROR_CONSTRAINTS.format(violations="; ".join(report.violations)))


def cmd_ingest(args, cli: CliConfig, run_config: Dict) -> int:
    out_dir = Path(cli.out)
    if args.synthetic:
        samples = synth_samples(args.n, cli.seed, run_config)
        write_manifest(samples, out_dir, cli.seed, source="synthetic")
        return EXIT_OK

    data_dir = _require(cli.data, "dataset directory (--data)")
    samples = []
    for aer in sorted(data_dir.glob("*.bin")) + sorted(data_dir.glob("*.aer")):
        sidecar = aer.with_suffix(".jsonl")
        if not sidecar.exists():
            raise MissingArtifact(config.ERROR_MISSING_ARTIFACT.format(path=sidecar))
        try:
            stream = read_aer_file(aer, (config.NCALTECH_RESOLUTION, config.NCALTECH_RESOLUTION))
            boxes = load_boxes_jsonl(sidecar)
        except EventIOError as e:
            raise MalformedInput(f"{aer}: {e}") from e
        samples.append(Sample(stream=stream, boxes=boxes, name=aer.stem))
    if not samples:
        raise MissingArtifact(f"No AER recordings found in {data_dir}")
    write_manifest(samples, out_dir, cli.seed, source=str(data_dir))
    return EXIT_OK


def cmd_train(args, cli: CliConfig, run_config: Dict) -> int:
    train_set, val_set = load_dataset(args, cli, run_config)
    cfg = build_train_config(args, run_config, cli)
    spec = build_spec(run_config, cfg, args.normalization)
    budget = build_budget(args, run_config)
    run_dir = make_run_dir(cli, {"subcommand": "train", "train": cfg.to_dict(), "spec": spec.to_dict(),
                                 "budget": budget.to_dict(), "data": cli.data, "seed": cli.seed})
    save_network_spec(run_dir / "spec.json", spec)
    _check(spec, budget, run_dir)
    result = train(spec, train_set, val_set, cfg, budget=budget, out_dir=run_dir)
    print(f"Best epoch {result.checkpoint.epoch}; checkpoint in {run_dir / 'checkpoint.sfck'}")
    return EXIT_OK


def cmd_eval(args, cli: CliConfig, run_config: Dict) -> int:
    checkpoint = Checkpoint.load(_require(args.checkpoint, "checkpoint (--checkpoint)"))
    _, val_set = load_dataset(args, cli, run_config)
    budget = build_budget(args, run_config)
    run_dir = make_run_dir(cli, {"subcommand": "eval", "checkpoint": args.checkpoint, "mode": args.eval_mode,
                                 "budget": budget.to_dict(), "data": cli.data, "seed": cli.seed})
    metrics = evaluate(checkpoint, val_set, args.eval_mode, budget)
    with open(run_dir / "metrics.json", "w", encoding="utf-8") as f:
        json.dump(metrics.to_dict(), f, indent=2)
    print(f"{args.eval_mode}: mAP[0.5]={metrics.map50:.3f} spikes/s={metrics.spikes_per_s:.0f}")
    return EXIT_OK


def cmd_quantize(args, cli: CliConfig, run_config: Dict) -> int:
    checkpoint = Checkpoint.load(_require(args.checkpoint, "checkpoint (--checkpoint)"))
    run_dir = make_run_dir(cli, {"subcommand": "quantize", "checkpoint": args.checkpoint})
    model = checkpoint.model()
    qnet = quantize(model.spec, model.layers)
    digest = save_quantized(run_dir / "quantized.sfqn", qnet)
    summary = qnet.error_summary()
    summary.to_csv(run_dir / "quantization_errors.csv", index=False)
    print(f"Quantized network written ({digest[:10]}); max weight error {summary['max_abs_error'].max():.3e}")
    return EXIT_OK


def cmd_emulate(args, cli: CliConfig, run_config: Dict) -> int:
    if args.quantized:
        qnet = load_quantized(_require(args.quantized, "quantized network (--quantized)"))
    else:
        checkpoint = Checkpoint.load(_require(args.checkpoint, "checkpoint or quantized network"))
        model = checkpoint.model()
        qnet = quantize(model.spec, model.layers)
    _, val_set = load_dataset(args, cli, run_config)
    budget = build_budget(args, run_config)
    run_dir = make_run_dir(cli, {"subcommand": "emulate", "budget": budget.to_dict(), "data": cli.data,
                                 "seed": cli.seed})
    _check(qnet.spec, budget, run_dir)

    reports = []
    for index, sample in enumerate(val_set[: args.limit or None]):
        sample = fit_to_input(sample, qnet.spec)
        _, report = run_per_event(qnet, sample.stream, budget)
        power = estimate_power(report)
        if index == 0:
            power.save_timeline(run_dir / "power_timeline.csv")
            report.occupancy.to_csv(run_dir / "queue_occupancy.csv", index=False)
        row = report.to_dict()
        row.update({"sample": sample.name, "average_mw": power.average_mw})
        reports.append(row)
    with open(run_dir / "synops.json", "w", encoding="utf-8") as f:
        json.dump(reports, f, indent=2)
    stalled = sum(1 for r in reports if r["stall"])
    print(f"Emulated {len(reports)} samples; {stalled} stalled")
    return EXIT_OK


def cmd_sweep(args, cli: CliConfig, run_config: Dict) -> int:
    try:
        lambdas = [float(v) for v in args.lambdas.split(",") if v.strip()]
    except ValueError as e:
        raise MalformedInput(f"--lambdas must be comma-separated numbers ({e})") from e
    train_set, val_set = load_dataset(args, cli, run_config)
    cfg = build_train_config(args, run_config, cli)
    spec = build_spec(run_config, cfg, args.normalization)
    budget = build_budget(args, run_config)
    run_dir = make_run_dir(cli, {"subcommand": "sweep", "lambdas": lambdas, "train": cfg.to_dict(),
                                 "spec": spec.to_dict(), "budget": budget.to_dict(), "seed": cli.seed})
    _check(spec, budget, run_dir)
    table = sweep_lambda(spec, train_set, val_set, cfg, lambdas, budget, out_dir=run_dir)
    print(table.to_string(index=False))
    return EXIT_OK


GRIDS = {
    "activation": activation_grid,
    "normalization": normalization_grid,
    "lambda": lambda_grid,
    "faces": faces_grid,
}


def cmd_report(args, cli: CliConfig, run_config: Dict) -> int:
    budget = build_budget(args, run_config)
    run_dir = make_run_dir(cli, {"subcommand": "report", "grid": args.grid, "sweep": args.sweep,
                                 "seed": cli.seed, "budget": budget.to_dict()})
    if args.sweep:
        sweep = pd.read_csv(_require(args.sweep, "sweep table"))
        bundle = ReportBundle(cells=sweep, pareto=sweep.rename(columns={"sim_quant_map": "quant_map"}))
    elif args.grid:
        if args.grid == "faces" and not cli.data:
            raise MissingArtifact("The faces grid needs a recorded dataset (--data)")
        train_set, val_set = load_dataset(args, cli, run_config)
        base = build_train_config(args, run_config, cli)
        grid: ExperimentGrid = GRIDS[args.grid]()
        bundle = run_grid(grid, train_set, val_set, seed=cli.seed, base=base, budget=budget)
    else:
        bundle = ReportBundle()
    bundle.write(run_dir)

    calibration = calibrate_power(MEASURED_POWER_POINTS)
    with open(run_dir / "calibration.json", "w", encoding="utf-8") as f:
        json.dump(calibration.to_dict(), f, indent=2)
    print(f"Report bundle in {run_dir}")
    return EXIT_OK


COMMANDS = {
    "ingest": cmd_ingest,
    "train": cmd_train,
    "eval": cmd_eval,
    "quantize": cmd_quantize,
    "emulate": cmd_emulate,
    "sweep": cmd_sweep,
    "report": cmd_report,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON run config (keys: train, variant, resolution, spec, budget, synth)")
    common.add_argument("--data", help="dataset directory holding a manifest")
    common.add_argument("--out", default=config.OUT_DIR, help="output directory")
    common.add_argument("--seed", type=int, default=config.SEED)
    common.add_argument("--synthetic", action="store_true", help="use generated moving-box samples")
    common.add_argument("--n", type=int, default=64, help="number of synthetic samples")
    common.add_argument("--window-us", type=int, dest="window_us")
    common.add_argument("--mode", choices=["single", "multi", "relu"])
    common.add_argument("--repr", choices=["binary", "histogram"])
    common.add_argument("--normalization", choices=["none", "batch", "layer"])
    common.add_argument("--budget", help="'default' or a JSON budget file")
    common.add_argument("overrides", nargs="*", help="training config overrides as key=value")

    parser = argparse.ArgumentParser(prog="spikeforge", description="Spiking detector training and chip emulation")
    sub = parser.add_subparsers(dest="subcommand", required=True)
    sub.add_parser("ingest", parents=[common])
    sub.add_parser("train", parents=[common])
    p_eval = sub.add_parser("eval", parents=[common])
    p_eval.add_argument("--checkpoint")
    p_eval.add_argument("--eval-mode", dest="eval_mode", default="float_sim",
                        choices=["float_sim", "quant_sim", "emulator"])
    p_quant = sub.add_parser("quantize", parents=[common])
    p_quant.add_argument("--checkpoint")
    p_emul = sub.add_parser("emulate", parents=[common])
    p_emul.add_argument("--checkpoint")
    p_emul.add_argument("--quantized")
    p_emul.add_argument("--limit", type=int, default=0, help="emulate only the first N validation samples")
    p_sweep = sub.add_parser("sweep", parents=[common])
    p_sweep.add_argument("--lambdas", default="0,1e-3,1e-2")
    p_report = sub.add_parser("report", parents=[common])
    p_report.add_argument("--grid", choices=sorted(GRIDS))
    p_report.add_argument("--sweep", help="existing sweep.csv to turn into a report")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_MALFORMED

    try:
        cli = CliConfig(
            subcommand=args.subcommand,
            config_path=args.config,
            data=args.data,
            out=args.out,
            seed=args.seed,
            overrides=parse_overrides(args.overrides),
        )
        run_config = load_run_config(cli.config_path)
        return COMMANDS[args.subcommand](args, cli, run_config)
    except ConstraintViolation as e:
        logger.error(str(e))
        return EXIT_CONSTRAINT
    except (MissingArtifact, FileNotFoundError) as e:
        logger.error(str(e))
        return EXIT_MISSING
    except (MalformedInput, EventIOError, TensorError, SNNError, DetectionError, EmulatorError,
            TrainingError, ValueError, KeyError) as e:
        logger.error(f"Malformed input: {e}")
        return EXIT_MALFORMED
    except Exception as e:
        logger.exception(f"Unexpected error: {e}")
        return EXIT_UNEXPECTED


if __name__ == "__main__":
    sys.exit(main())
