"""Command-line entry point: ``hbmcn <command> ...``.

Exit codes: 0 success, 1 a check failed, 2 usage or I/O error.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import logging
import re
import sys
import time
from pathlib import Path
from typing import Optional

from . import autograd, gradcheck
from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .data import TINT_STD, DatasetError, PPMError, load_dataset, synth_dataset
from .evaluation import FeatureFileError, FeatureSet, NoValidQueries, emit_report, evaluate, read_features, write_features
from .model import ABLATION_MODES, PRESETS, ModelConfig, build, extract_features, forward_macs
from .plotting import plot_cmc, plot_loss
from .train import TrainConfig, fit, nano_train_config, paper_train_config, write_loss_csv

log = logging.getLogger("hbmcn")

TRAIN_PRESETS = {"paper": paper_train_config, "nano": nano_train_config}
EXIT_OK, EXIT_CHECK, EXIT_USAGE = 0, 1, 2
CHECKPOINT_NAME = "checkpoint.hbmc"


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# run configuration


@dataclasses.dataclass
class RunConfig:
    """One experiment: preset name plus overrides, data and output paths.

    ``model`` and ``train`` hold overrides applied on top of the preset's
    ModelConfig and TrainConfig; ``mode`` selects an ablation topology.
    """

    preset: str = "nano"
    mode: Optional[str] = None
    seed: int = 0
    data: Optional[str] = None
    out: Optional[str] = None
    model: dict = dataclasses.field(default_factory=dict)
    train: dict = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.preset not in PRESETS:
            raise UsageError(f"unknown preset {self.preset!r} (choose from {sorted(PRESETS)})")
        if self.mode is not None and self.mode not in ABLATION_MODES:
            raise UsageError(f"unknown mode {self.mode!r} (choose from {list(ABLATION_MODES)})")
        for section, cls in (("model", ModelConfig), ("train", TrainConfig)):
            unknown = set(getattr(self, section)) - {f.name for f in dataclasses.fields(cls)}
            if unknown:
                raise UsageError(f"unknown {section} keys in run config: {sorted(unknown)}")

    @classmethod
    def from_json(cls, text: str) -> "RunConfig":
        try:
            raw = json.loads(text)
        except ValueError as exc:
            raise UsageError(f"run config is not valid JSON: {exc}") from exc
        if not isinstance(raw, dict):
            raise UsageError("run config must be a JSON object")
        unknown = set(raw) - {f.name for f in dataclasses.fields(cls)}
        if unknown:
            raise UsageError(f"unknown run config keys: {sorted(unknown)}")
        return cls(**raw)

    def resolve(self, num_classes: Optional[int] = None) -> tuple[ModelConfig, TrainConfig]:
        """Expand the preset, then apply the mode and the explicit overrides."""
        model_kw = dict(ABLATION_MODES[self.mode]) if self.mode else {}
        model_kw.update(self.model)
        if num_classes is not None:
            if model_kw.get("num_classes", num_classes) != num_classes:
                raise UsageError(f"config asks for {model_kw['num_classes']} classes but the data has {num_classes}")
            model_kw["num_classes"] = num_classes
        train_kw = {"seed": self.seed}
        train_kw.update(self.train)
        try:
            return PRESETS[self.preset](**model_kw), TRAIN_PRESETS[self.preset](**train_kw)
        except (TypeError, ValueError) as exc:
            raise UsageError(f"invalid configuration: {exc}") from exc


def load_run_config(args) -> RunConfig:
    run = RunConfig()
    if getattr(args, "config", None):
        run = RunConfig.from_json(Path(args.config).read_text())
    for key in ("preset", "mode", "seed", "data", "out"):
        value = getattr(args, key, None)
        if value is not None:
            run = dataclasses.replace(run, **{key: value})
    return run


def cost_warning(cfg: ModelConfig, tcfg: TrainConfig, n_images: int) -> str:
    macs = forward_macs(cfg)
    total = 3 * macs * n_images * tcfg.epochs
    return (
        f"warning: paper preset costs about {macs / 1e9:.1f} GMAC per image forward pass; "
        f"training {n_images} images for {tcfg.epochs} epochs is about {total / 1e12:.1f} TMAC "
        "and may take days on a CPU"
    )


# ---------------------------------------------------------------------------
# shared steps


def _train(run: RunConfig):
    if not run.data:
        raise UsageError("no training data given (--data)")
    ds = load_dataset(run.data)
    cfg, tcfg = run.resolve(ds.num_classes)
    images = ds.images("train", cfg.input_hw, normalized=False)
    if run.preset == "paper":
        print(cost_warning(cfg, tcfg, len(images)), file=sys.stderr)
    model = build(cfg, seed=run.seed)
    log.info("training %s (%d heads, %d images, %d classes)", run.mode or run.preset, cfg.num_heads, len(images), cfg.num_classes)
    result = fit(model, images, ds.labels(), tcfg)
    return ds, model, result, cfg, tcfg


def _features(model, ds, split: str) -> FeatureSet:
    samples = ds.splits[split]
    feats = extract_features(model.eval(), ds.images(split, model.cfg.input_hw))
    return FeatureSet(feats, [s.person_id for s in samples], [s.camera_id for s in samples])


def _parse_size(text: str) -> tuple[int, int]:
    m = re.fullmatch(r"(\d+)x(\d+)", text)
    if not m:
        raise argparse.ArgumentTypeError(f"size must look like HxW, got {text!r}")
    return int(m.group(1)), int(m.group(2))


# ---------------------------------------------------------------------------
# commands


def cmd_gen_data(args) -> int:
    manifest = synth_dataset(args.ids, args.per_id, args.cams, args.size, args.seed, args.out, tint=args.tint)
    counts = {s: len(v) for s, v in manifest["splits"].items()}
    print(f"wrote {sum(counts.values())} images to {args.out} "
          f"(train {counts['train']}, query {counts['query']}, gallery {counts['gallery']})")
    return EXIT_OK


def cmd_train(args) -> int:
    run = load_run_config(args)
    if not run.out:
        raise UsageError("no output directory given (--out)")
    t0 = time.perf_counter()
    _, model, result, cfg, tcfg = _train(run)
    out = Path(run.out)
    out.mkdir(parents=True, exist_ok=True)
    save_checkpoint(model, result.state, out / CHECKPOINT_NAME)
    write_loss_csv(result.trace, out / "loss.csv")
    plot_loss(result.trace, out / "loss.png")
    resolved = {"preset": run.preset, "mode": run.mode, "seed": run.seed, "data": str(run.data),
                "model": cfg.to_dict(), "train": tcfg.to_dict()}
    (out / "run_config.json").write_text(json.dumps(resolved, indent=1, sort_keys=True) + "\n")
    print(f"trained {tcfg.epochs} epochs in {time.perf_counter() - t0:.1f}s; "
          f"final loss {result.trace[-1][2]:.4f}; checkpoint {out / CHECKPOINT_NAME}")
    return EXIT_OK


def cmd_extract(args) -> int:
    model, _ = load_checkpoint(args.ckpt)
    ds = load_dataset(args.data)
    fs = _features(model, ds, args.split)
    write_features(fs, args.out)
    print(f"wrote {len(fs)}x{fs.dim} features to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    q, g = read_features(args.query), read_features(args.gallery)
    if q.dim != g.dim:
        raise UsageError(f"query features have dimension {q.dim} but gallery features {g.dim}")
    if args.level_width and q.dim % args.level_width:
        raise UsageError(f"feature dimension {q.dim} is not a multiple of --level-width {args.level_width}")
    report = evaluate(q, g, per_level=args.level_width)
    if args.report:
        emit_report(report, args.report)
        plot_cmc(report.cmc, Path(args.report) / "cmc_curve.png")
    if report.num_skipped:
        print(f"skipped {report.num_skipped} queries without a valid match")
    print(report.summary_line())
    return EXIT_OK


def cmd_ablate(args) -> int:
    run = load_run_config(args)
    run = dataclasses.replace(run, mode=args.mode)
    ds, model, _, _, _ = _train(run)
    report = evaluate(_features(model, ds, "query"), _features(model, ds, "gallery"))
    out = Path(args.out)
    if out.parent != Path(""):
        out.parent.mkdir(parents=True, exist_ok=True)
    fresh = not out.exists() or out.stat().st_size == 0
    with open(out, "a", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        if fresh:
            writer.writerow(["mode", "seed", "mAP", "R1"])
        writer.writerow([args.mode, run.seed, f"{report.mAP:.6f}", f"{report.cmc_at(1):.6f}"])
    print(f"{args.mode} seed={run.seed} {report.summary_line()}")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    t0 = time.perf_counter()
    if args.inject_fault:
        with autograd.inject_fault(args.inject_fault):
            results = gradcheck.run_all(seed=args.seed)
    else:
        results = gradcheck.run_all(seed=args.seed)
    print(gradcheck.format_table(results, args.tol))
    failed = [r.name for r in results if not r.ok(args.tol)]
    print(f"{len(results) - len(failed)}/{len(results)} checks within {args.tol:g} ({time.perf_counter() - t0:.1f}s)")
    return EXIT_CHECK if failed else EXIT_OK


# ---------------------------------------------------------------------------
# argument parsing


def _at_least_two(text: str) -> int:
    try:
        value = int(text)
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected an integer, got {text!r}") from None
    if value < 2:
        raise argparse.ArgumentTypeError(f"must be at least 2, got {value}")
    return value


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hbmcn", description="Heterogeneous branch and multi-level classification network for person re-identification.")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print results")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write a synthetic re-ID dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--ids", type=_at_least_two, default=48)
    p.add_argument("--per-id", type=_at_least_two, default=8)
    p.add_argument("--cams", type=_at_least_two, default=3)
    p.add_argument("--seed", type=int, default=7)
    p.add_argument("--size", type=_parse_size, default=(128, 64), help="image size HxW")
    p.add_argument("--tint", type=float, default=TINT_STD, help="camera tint strength")
    p.set_defaults(func=cmd_gen_data)

    def run_flags(p, with_out=True):
        p.add_argument("--data")
        p.add_argument("--config", help="run config JSON")
        p.add_argument("--preset", choices=sorted(PRESETS))
        p.add_argument("--seed", type=int)
        if with_out:
            p.add_argument("--out")

    p = sub.add_parser("train", help="train a model and write checkpoint and loss curve")
    run_flags(p)
    p.add_argument("--mode", choices=list(ABLATION_MODES))
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("extract", help="write flip-averaged features for one split")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", choices=("train", "query", "gallery"), default="query")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("eval", help="rank a gallery for each query and report CMC and mAP")
    p.add_argument("--query", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--report", help="directory for metrics.csv, cmc_curve.csv and cmc_curve.png")
    p.add_argument("--level-width", type=int, default=None,
                   help="L2-normalize each consecutive slice of this width (one head's feature) before comparing")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train, extract and evaluate one ablation topology")
    run_flags(p, with_out=False)
    p.add_argument("--mode", required=True, choices=list(ABLATION_MODES))
    p.add_argument("--out", required=True, help="CSV file to append a result row to")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every backward rule")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--tol", type=float, default=1e-4)
    p.add_argument("--inject-fault", help=argparse.SUPPRESS)
    p.set_defaults(func=cmd_gradcheck)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except (UsageError, OSError, DatasetError, PPMError, CheckpointError, FeatureFileError, NoValidQueries, autograd.DimensionError) as exc:
        print(f"hbmcn {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
