"""Command-line frontend: prepare, train, evaluate, ablate, make-fixture.

Every run writes a resolved config snapshot next to its outputs, so a
finished run directory is reproducible from the snapshot and seed alone.
Error paths print one machine-parseable ``error: <kind>: <reason>`` line
and exit 2 for configuration/usage problems, 1 for runtime failures.
"""

from __future__ import annotations

import argparse
import csv
import sys
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from . import catalog
from .augment import AugmentError
from .catalog import CatalogError, DatasetId, LayoutSpec, Role
from .config import ConfigError, RunConfig, load_config
from .metrics import EvalError, MetricsReport, evaluate, format_report_table, reports_to_csv
from .models import ModelError, build_model, count_parameters, load_checkpoint
from .synthetic import FixtureSpec, generate_fixture
from .training import TrainError, TrainingDiverged, train

USAGE_EXIT = 2
RUNTIME_EXIT = 1


@dataclass
class AblationResult:
    """One sweep along an experiment axis, one report per setting."""

    axis: str  # fraction | centers | backbone
    points: list[tuple[str, MetricsReport]] = field(default_factory=list)

    def add(self, setting: str, report: MetricsReport) -> None:
        if any(s == setting for s, _ in self.points):
            raise ConfigError(f"duplicate ablation setting {setting!r}")
        self.points.append((setting, report))


def _fail(kind: str, message: str, code: int) -> int:
    print(f"error: {kind}: {message}", file=sys.stderr)
    return code


# ---------------------------------------------------------------------------
# subcommand implementations
# ---------------------------------------------------------------------------

def cmd_make_fixture(args) -> int:
    spec = FixtureSpec(
        size=args.size,
        n_labeled_wsis=args.n_labeled_wsis,
        labeled_per_wsi=args.labeled_per_wsi,
        n_unlabeled_wsis=args.n_unlabeled_wsis,
        unlabeled_per_wsi=args.unlabeled_per_wsi,
        n_centers=args.n_centers,
        n_val_wsis=args.n_val_wsis,
        val_per_wsi=args.val_per_wsi,
        seed=args.seed,
    )
    paths = generate_fixture(Path(args.out), spec)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return 0


def cmd_prepare(args) -> int:
    layout = LayoutSpec(
        image_subdir=args.image_subdir,
        mask_subdir=args.mask_subdir if not args.unlabeled else None,
        pattern=args.pattern,
        labeled=not args.unlabeled,
        magnification=args.magnification,
    )
    manifest = catalog.build_manifest(args.root, args.dataset, layout)
    catalog.save_manifest(manifest, args.out)
    if len(manifest) == 0:
        print(f"warning: no images found under {args.root}", file=sys.stderr)
    print(f"{'dataset':<18}{'wsis':>8}{'tiles':>8}")
    print(f"{args.dataset:<18}{len(manifest.wsi_ids()):>8}{len(manifest):>8}")
    print(f"manifest: {args.out}")
    return 0


def _prepare_run_dir(cfg: RunConfig, run_id: str | None = None) -> Path:
    run_dir = Path(cfg["output_dir"]) / (run_id or cfg["run_id"])
    if run_dir.exists():
        raise ConfigError(f"run directory {run_dir} already exists; pick a new run_id")
    run_dir.mkdir(parents=True)
    (run_dir / "config.cfg").write_text(cfg.snapshot_text())
    return run_dir


def _load_role_manifest(path_value: str, role: Role, required: bool, what: str):
    if not path_value:
        if required:
            raise ConfigError(f"{what} manifest is required but not configured")
        return None
    return catalog.load_manifest(path_value, role=role)


def cmd_train(args) -> int:
    overrides = list(args.overrides)
    if args.method:
        overrides.append(f"train.method={args.method}")
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.out:
        overrides.append(f"output_dir={args.out}")
    cfg = load_config(args.config, overrides)

    train_cfg = cfg.train_config()
    labeled = _load_role_manifest(cfg["data.labeled_manifest"], Role.LABELED_TRAIN,
                                  True, "labeled")
    unlabeled = _load_role_manifest(cfg["data.unlabeled_manifest"], Role.UNLABELED_TRAIN,
                                    train_cfg.method != "supervised", "unlabeled")
    val = _load_role_manifest(cfg["data.val_manifest"], Role.EXTERNAL_VALIDATION,
                              False, "validation")

    run_dir = _prepare_run_dir(cfg)
    model = build_model(cfg.model_config(), seed=train_cfg.seed)
    ckpt, history = train(model, labeled, unlabeled, train_cfg,
                          cfg.weak_spec(), cfg.strong_spec(),
                          val_manifest=val, out_dir=run_dir)
    print(f"run dir: {run_dir}")
    print(f"epochs: {len(history)}  final sup loss: {history.sup_loss[-1]:.4f}  "
          f"wall clock: {history.wall_clock:.1f}s")
    if ckpt.best_path:
        print(f"best checkpoint: {ckpt.best_path}")

    eval_specs = cfg.eval_manifest_specs()
    if eval_specs:
        scored = ckpt.best_path or ckpt.model
        reports = []
        for name, manifest_path in eval_specs:
            manifest = catalog.load_manifest(manifest_path, role=Role.EXTERNAL_VALIDATION)
            reports.append(evaluate(scored, manifest,
                                    aggregation=cfg["eval.aggregation"],
                                    dataset_id=name, method=train_cfg.method))
        reports_to_csv(reports, run_dir / "metrics.csv")
        print(format_report_table(reports))
    return 0


def cmd_evaluate(args) -> int:
    model = load_checkpoint(args.checkpoint)
    reports = []
    for entry in args.manifest:
        if "=" in entry:
            name, path = entry.split("=", 1)
        else:
            name, path = Path(entry).stem, entry
        manifest = catalog.load_manifest(path, role=Role.EXTERNAL_VALIDATION)
        reports.append(evaluate(model, manifest, aggregation=args.aggregation,
                                dataset_id=name, method=args.method_label))
    reports_to_csv(reports, args.out)
    print(format_report_table(reports))
    print(f"report: {args.out}")
    return 0


ABLATION_COLUMNS = ("axis", "setting", "precision", "recall", "dice",
                    "n_images", "n_pixels", "n_labeled", "n_unlabeled", "param_count")


def cmd_ablate(args) -> int:
    cfg = load_config(args.config, list(args.overrides))
    if args.out:
        cfg.set("output_dir", args.out)
    run_dir = _prepare_run_dir(cfg, run_id=f"{cfg['run_id']}-ablate-{args.axis}")

    labeled = _load_role_manifest(cfg["data.labeled_manifest"], Role.LABELED_TRAIN,
                                  True, "labeled")
    val_path = cfg["data.val_manifest"]
    if not val_path:
        raise ConfigError("ablation needs data.val_manifest for held-out scoring")
    val = catalog.load_manifest(val_path, role=Role.EXTERNAL_VALIDATION)
    base_train = cfg.train_config()
    unlabeled = _load_role_manifest(cfg["data.unlabeled_manifest"], Role.UNLABELED_TRAIN,
                                    base_train.method != "supervised", "unlabeled")

    if args.axis == "fraction":
        settings = [("fraction", f) for f in cfg.ablate_fractions()]
    elif args.axis == "centers":
        settings = [("centers", n) for n in cfg.ablate_center_counts()]
    else:
        settings = [("backbone", v) for v in cfg.ablate_backbones()]

    result = AblationResult(axis=args.axis)
    out_csv = run_dir / f"ablation_{args.axis}.csv"
    with open(out_csv, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(ABLATION_COLUMNS)
        fh.flush()
        for kind, setting in settings:
            report, row = _run_ablation_point(kind, setting, cfg, base_train,
                                              labeled, unlabeled, val)
            result.add(str(setting), report)
            writer.writerow(row)
            fh.flush()  # partial results survive an aborted sweep
            print(f"{args.axis}={setting}: dice={report.dice:.4f}")
    print(f"ablation report: {out_csv}")
    return 0


def _run_ablation_point(kind: str, setting, cfg: RunConfig, base_train, labeled,
                        unlabeled, val) -> tuple[MetricsReport, list]:
    model_config = cfg.model_config()
    train_cfg = base_train
    lab, unl = labeled, unlabeled

    if kind == "fraction":
        lab = catalog.sample_label_fraction(labeled, Fraction(setting), seed=base_train.seed)
    elif kind == "centers":
        if unlabeled is None:
            raise ConfigError("centers axis needs data.unlabeled_manifest")
        unl = catalog.sample_centers(unlabeled, int(setting),
                                     cfg["ablate.per_center"], seed=base_train.seed)
        if train_cfg.method == "supervised":
            raise ConfigError("centers axis needs a semi-supervised train.method")
        if int(setting) == 0 or train_cfg.unlabeled_batch > len(unl):
            raise ConfigError(f"center sample too small for batch size at setting {setting}")
    else:
        from dataclasses import replace
        model_config = replace(model_config, variant=str(setting),
                               embed_dims=None, depths=None, num_heads=None,
                               decoder_dim=None)

    model = build_model(model_config, seed=train_cfg.seed)
    train(model, lab, unl, train_cfg, cfg.weak_spec(), cfg.strong_spec())
    report = evaluate(model, val, aggregation=cfg["eval.aggregation"],
                      dataset_id=f"{kind}_{setting}", method=train_cfg.method)
    row = [kind, str(setting), repr(report.precision), repr(report.recall),
           repr(report.dice), report.n_images, report.n_pixels,
           len(lab), len(unl) if unl is not None else 0, count_parameters(model)]
    return report, row


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="glomseg",
        description="Semi-supervised glomeruli segmentation toolkit",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("make-fixture", help="generate the bundled synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--n-labeled-wsis", type=int, default=8)
    p.add_argument("--labeled-per-wsi", type=int, default=1)
    p.add_argument("--n-unlabeled-wsis", type=int, default=16)
    p.add_argument("--unlabeled-per-wsi", type=int, default=4)
    p.add_argument("--n-centers", type=int, default=4)
    p.add_argument("--n-val-wsis", type=int, default=5)
    p.add_argument("--val-per-wsi", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_make_fixture)

    p = sub.add_parser("prepare", help="scan a directory tree into a JSONL manifest")
    p.add_argument("--root", required=True)
    p.add_argument("--dataset", required=True,
                   choices=[d.value for d in DatasetId])
    p.add_argument("--out", required=True)
    p.add_argument("--unlabeled", action="store_true",
                   help="layout has no masks (unlabeled training pool)")
    p.add_argument("--image-subdir", default="images")
    p.add_argument("--mask-subdir", default="masks")
    p.add_argument("--pattern", default=LayoutSpec().pattern,
                   help="regex over image stems with named groups wsi/center")
    p.add_argument("--magnification", type=float, default=20.0)
    p.set_defaults(func=cmd_prepare)

    p = sub.add_parser("train", help="train one model from a run config")
    p.add_argument("--config", required=True)
    p.add_argument("--method", choices=["supervised", "fixmatch", "unimatch"])
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="override output_dir")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="score a checkpoint on labeled manifests")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", action="append", required=True,
                   metavar="NAME=PATH")
    p.add_argument("--aggregation", choices=["micro", "macro"], default="micro")
    p.add_argument("--method-label", default="model")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("ablate", help="sweep one experiment axis")
    p.add_argument("--axis", required=True, choices=["fraction", "centers", "backbone"])
    p.add_argument("--config", required=True)
    p.add_argument("--out", help="override output_dir")
    p.add_argument("overrides", nargs="*", metavar="key=value")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on usage errors already; keep that contract.
        return int(exc.code or 0)
    try:
        return args.func(args)
    except ConfigError as exc:
        return _fail("config", str(exc), USAGE_EXIT)
    except (CatalogError, AugmentError) as exc:
        return _fail("data", str(exc), USAGE_EXIT)
    except TrainingDiverged as exc:
        return _fail("diverged", str(exc), RUNTIME_EXIT)
    except (TrainError, ModelError, EvalError) as exc:
        return _fail("run", str(exc), RUNTIME_EXIT)
    except OSError as exc:
        return _fail("io", str(exc), RUNTIME_EXIT)


if __name__ == "__main__":
    sys.exit(main())
