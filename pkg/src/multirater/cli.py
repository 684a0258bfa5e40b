"""``multirater generate|train|eval|report``.

Every command reads the same JSON run configuration::

    {
      "schema_version": 1,
      "variant": "om",
      "annotations": "aligned",
      "output_dir": "runs/om",
      "data_dir": "runs/data",
      "gen": {...},  "network": {...},  "loss": {...},
      "train": {...}, "metrics": {"levels": null, "n_mc": 50}
    }

Relative paths are resolved against the directory holding the config file.
Sections are optional; missing fields take library defaults, and ``train``
starts from :func:`~multirater.training.default_train_config` for the variant.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from . import __version__
from .data import GenConfig, GenerationError, ManifestError, generate_dataset, load_dataset, shuffle_annotations
from .losses import LossConfig
from .metrics import CE_EPS, METRIC_NAMES, MetricsReport, error_map, evaluate, gamma_map
from .network import VARIANTS, NetworkConfig, build_model, forward, load_checkpoint, save_checkpoint
from .training import config_to_dict, default_train_config, train

SCHEMA_VERSION = 1
ANNOTATION_MODES = ("aligned", "shuffled")
CONFIG_COPY = "config.json"
CHECKPOINT = "checkpoint.pt"
TRAIN_LOG = "train_log.jsonl"
REPORT = "report.json"
# error and gamma maps are BCE values bounded by -log(CE_EPS); PNGs store value / MAP_SCALE as uint16
MAP_SCALE = -math.log(CE_EPS)
REPORT_TOLERANCE = 1e-9

log = logging.getLogger("multirater")


class CLIError(Exception):
    """A failure reported to the user as a one-line diagnostic."""


@dataclass
class RunConfig:
    variant: str = "om"
    annotations: str = "aligned"
    output_dir: Path = Path("run")
    data_dir: Path | None = None
    gen: GenConfig = field(default_factory=GenConfig)
    network: NetworkConfig = field(default_factory=NetworkConfig)
    loss: LossConfig = field(default_factory=LossConfig)
    train: dict = field(default_factory=dict)
    levels: int | None = None
    n_mc: int = 50
    source: dict = field(default_factory=dict)

    @property
    def dataset_dir(self) -> Path:
        return self.data_dir if self.data_dir is not None else self.output_dir / "data"

    def train_config(self, seed: int | None = None):
        overrides = dict(self.train)
        overrides["loss"] = self.loss
        if seed is not None:
            overrides["seed"] = seed
        return default_train_config(self.variant, **overrides)


def _section(raw: dict, name: str, cls):
    values = raw.get(name, {})
    if not isinstance(values, dict):
        raise CLIError(f"config section {name!r} must be an object")
    known = {f.name for f in dataclasses.fields(cls)}
    unknown = sorted(set(values) - known)
    if unknown:
        raise CLIError(f"config section {name!r}: unknown keys {unknown}")
    try:
        return cls(**values)
    except (TypeError, ValueError) as exc:
        raise CLIError(f"config section {name!r}: {exc}") from exc


def load_run_config(path) -> RunConfig:
    path = Path(path)
    try:
        raw = json.loads(path.read_text())
    except FileNotFoundError:
        raise CLIError(f"config not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise CLIError(f"{path}: invalid JSON ({exc})") from None
    if not isinstance(raw, dict):
        raise CLIError(f"{path}: top level must be an object")
    if raw.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise CLIError(f"{path}: unsupported schema_version {raw['schema_version']!r}")
    known = {"schema_version", "variant", "annotations", "output_dir", "data_dir", "gen", "network", "loss", "train", "metrics"}
    unknown = sorted(set(raw) - known)
    if unknown:
        raise CLIError(f"{path}: unknown keys {unknown}")
    variant = raw.get("variant", "om")
    if variant not in VARIANTS:
        raise CLIError(f"{path}: unknown variant {variant!r}; expected one of {', '.join(VARIANTS)}")
    annotations = raw.get("annotations", "aligned")
    if annotations not in ANNOTATION_MODES:
        raise CLIError(f"{path}: annotations must be one of {ANNOTATION_MODES}")
    base = path.parent
    output_dir = base / raw.get("output_dir", "run")
    data_dir = base / raw["data_dir"] if raw.get("data_dir") else None
    train_raw = raw.get("train", {})
    if "loss" in train_raw:
        raise CLIError(f"{path}: put loss options in the top-level 'loss' section")
    metrics_raw = raw.get("metrics", {})
    unknown = sorted(set(metrics_raw) - {"levels", "n_mc"})
    if unknown:
        raise CLIError(f"config section 'metrics': unknown keys {unknown}")
    cfg = RunConfig(
        variant=variant,
        annotations=annotations,
        output_dir=output_dir,
        data_dir=data_dir,
        gen=_section(raw, "gen", GenConfig),
        network=_section(raw, "network", NetworkConfig),
        loss=_section(raw, "loss", LossConfig),
        train=dict(train_raw),
        levels=metrics_raw.get("levels"),
        n_mc=metrics_raw.get("n_mc", 50),
        source=raw,
    )
    try:
        cfg.train_config()
    except (TypeError, ValueError) as exc:
        raise CLIError(f"config section 'train': {exc}") from exc
    if cfg.n_mc < 1:
        raise CLIError("metrics.n_mc must be >= 1")
    return cfg


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _mkdir(path: Path) -> None:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CLIError(f"cannot create directory {path}: {exc.strerror or exc}") from None


def cmd_generate(args) -> int:
    cfg = load_run_config(args.config)
    gen = cfg.gen if args.seed is None else dataclasses.replace(cfg.gen, seed=args.seed)
    out = Path(args.out) if args.out else cfg.dataset_dir
    _mkdir(out)
    try:
        manifest = generate_dataset(gen, out)
    except OSError as exc:
        raise CLIError(f"cannot write dataset under {out}: {exc.strerror or exc}") from None
    n_test = sum(c["split"] == "test" for c in manifest["cases"])
    print(f"wrote {len(manifest['cases'])} cases ({n_test} test) with raters {manifest['raters']} to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = load_run_config(args.config)
    data_dir = Path(args.data) if args.data else cfg.dataset_dir
    run_dir = Path(args.run_dir) if args.run_dir else cfg.output_dir
    tcfg = cfg.train_config(args.seed)
    cases = [c for c in load_dataset(data_dir) if c.split != "test"]
    if not cases:
        raise CLIError(f"{data_dir}: no training cases")
    if cfg.annotations == "shuffled":
        cases = shuffle_annotations(cases, tcfg.seed)
    model = build_model(cfg.variant, cfg.network, seed=tcfg.seed)
    _mkdir(run_dir)
    provenance = dict(cfg.source, schema_version=SCHEMA_VERSION)
    provenance["train"] = {k: v for k, v in config_to_dict(tcfg).items() if k != "loss"}
    _write_json(run_dir / CONFIG_COPY, provenance)
    _, records = train(model, cases, tcfg, log_path=run_dir / TRAIN_LOG, verbose=args.verbose)
    extra = {"annotations": cfg.annotations, "levels": cfg.levels, "n_mc": cfg.n_mc, "data_dir": str(data_dir)}
    save_checkpoint(model, run_dir / CHECKPOINT, seed=tcfg.seed, extra=extra)
    last = records[-1]
    print(
        f"trained {cfg.variant} ({cfg.annotations}) on {len(cases)} cases for {tcfg.epochs} epochs: "
        f"loss {last['loss']:.4f}, val Q {last['val_q_score']}; checkpoint {run_dir / CHECKPOINT}"
    )
    return 0


def _save_map(path: Path, values: np.ndarray) -> None:
    scaled = np.clip(values / MAP_SCALE, 0.0, 1.0)
    Image.fromarray(np.round(scaled * 65535).astype(np.uint16)).save(path)


def emit_maps(model, cases, out_dir: Path, n_mc: int, seed: int) -> None:
    import torch

    _mkdir(out_dir)
    gen = torch.Generator().manual_seed(seed)
    draws = n_mc if model.is_bayesian else 1
    for case in cases:
        pred = forward(model, case.image, gen, draws)
        _save_map(out_dir / f"{case.case_id}_error.png", error_map(case.rater_masks, pred.mc_samples))
        _save_map(out_dir / f"{case.case_id}_gamma.png", gamma_map(pred.mc_samples))


def cmd_eval(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.exists():
        raise CLIError(f"checkpoint not found: {ckpt}")
    try:
        model, payload = load_checkpoint(ckpt)
    except (ValueError, RuntimeError, OSError) as exc:
        raise CLIError(f"cannot load checkpoint {ckpt}: {exc}") from None
    extra = payload.get("extra", {})
    n_mc = args.n_mc if args.n_mc is not None else extra.get("n_mc", 50)
    levels = args.levels if args.levels is not None else extra.get("levels")
    cases = load_dataset(args.manifest, split=args.split)
    if not cases:
        raise CLIError(f"{args.manifest}: no cases in split {args.split!r}")
    if cases[0].num_raters != model.num_branches and model.variant != "vanilla":
        log.warning("model has %d branches but the dataset has %d raters", model.num_branches, cases[0].num_raters)
    report = evaluate(model, cases, n_mc=n_mc, levels=levels, seed=args.seed)
    report.meta.update(annotations=extra.get("annotations"), split=args.split, checkpoint_seed=payload.get("seed"))
    out = Path(args.out) if args.out else ckpt.parent / REPORT
    _mkdir(out.parent)
    report.save(out)
    validate_report(MetricsReport.load(out), out)
    if args.emit_maps:
        emit_maps(model, cases, Path(args.emit_maps), n_mc, args.seed)
    print(f"{report_label(report, out)}: " + ", ".join(f"{k} {getattr(report, k):.4f}" for k in METRIC_NAMES) + f"; wrote {out}")
    return 0


def validate_report(report: MetricsReport, path) -> None:
    for k in METRIC_NAMES:
        value = getattr(report, k)
        if not isinstance(value, (int, float)) or not math.isfinite(value):
            raise CLIError(f"{path}: {k} is not a finite number")
        if report.per_case:
            mean = float(np.mean([c[k] for c in report.per_case]))
            if abs(mean - value) > REPORT_TOLERANCE:
                raise CLIError(f"{path}: {k} = {value} but the per-case mean is {mean}")


def report_label(report: MetricsReport, path) -> str:
    variant = report.meta.get("variant")
    if not variant:
        return Path(path).stem
    if report.meta.get("annotations") == "shuffled":
        return f"{variant} (shuffled)"
    return variant


def format_table(rows: list[tuple[str, MetricsReport]]) -> str:
    headers = ("model", "Q-score", "GED", "diversity", "similarity")
    body = [(label, *(f"{getattr(r, k):.4f}" for k in METRIC_NAMES)) for label, r in rows]
    widths = [max(len(h), *(len(row[i]) for row in body)) for i, h in enumerate(headers)]
    fmt = lambda cells: "  ".join(c.ljust(w) if i == 0 else c.rjust(w) for i, (c, w) in enumerate(zip(cells, widths)))  # noqa: E731
    lines = [fmt(headers), "  ".join("-" * w for w in widths)]
    lines += [fmt(row) for row in body]
    return "\n".join(lines)


def cmd_report(args) -> int:
    rows = []
    for p in map(Path, args.reports):
        if not p.exists():
            raise CLIError(f"report not found: {p}")
        try:
            report = MetricsReport.load(p)
        except (ValueError, TypeError) as exc:
            raise CLIError(f"cannot read report {p}: {exc}") from None
        validate_report(report, p)
        rows.append((report_label(report, p), report))
    print(format_table(rows))
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="multirater", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a synthetic multi-rater dataset")
    p.add_argument("config")
    p.add_argument("--seed", type=int, help="override gen.seed")
    p.add_argument("--out", help="dataset directory (default: data_dir from the config)")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train the configured variant")
    p.add_argument("config")
    p.add_argument("--seed", type=int, help="override train.seed (also seeds initial weights)")
    p.add_argument("--data", help="dataset directory or manifest")
    p.add_argument("--run-dir", help="where to write config copy, log and checkpoint")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="score a checkpoint on a dataset split")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--split", default="test")
    p.add_argument("--n-mc", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", help="report path (default: report.json next to the checkpoint)")
    p.add_argument("--emit-maps", metavar="DIR", help="write per-case error and gamma maps as 16-bit PNGs")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", help="tabulate metric reports")
    p.add_argument("reports", nargs="+")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (CLIError, ManifestError, GenerationError, FileNotFoundError, ValueError, FloatingPointError) as exc:
        print(f"multirater {args.command}: error: {exc}", file=sys.stderr)
        return 1
    except OSError as exc:
        where = f" {exc.filename}" if exc.filename else ""
        print(f"multirater {args.command}: error:{where} {exc.strerror or exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
