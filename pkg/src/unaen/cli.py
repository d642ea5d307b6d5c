"""``unaen`` command line: phantom, simulate, build-dataset, train, infer,
evaluate and ablate.

Exit codes: 0 success, 2 usage error, 3 data error, 4 numeric failure.
Set ``UNAEN_THREADS`` to cap the BLAS thread pool.
"""

from __future__ import annotations

import argparse
import contextlib
import json
import logging
import os
import sys
from pathlib import Path
from typing import Dict, List, Optional, Sequence

import numpy as np

from .checkpoint import CheckpointError
from .data import MarfError, build_dataset, load_dataset, read_marf, write_marf
from .kspace import MotionSpec, PhantomSpec, corrupted_fraction, render_phantom, simulate_motion
from .metrics import evaluate_set
from .models import ABLATION_LABELS, ABLATIONS, ModelConfig, UnaenModel
from .training import (
    ConfigMismatchError,
    NumericError,
    TrainConfig,
    infer,
    load_for_inference,
    run_ablation,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
THREADS_ENV = "UNAEN_THREADS"

log = logging.getLogger("unaen")


class UsageError(Exception):
    pass


class DataError(Exception):
    pass


# ---------------------------------------------------------------------------
# config handling
# ---------------------------------------------------------------------------


def load_config_file(path: Optional[str]) -> dict:
    """JSON or TOML; top-level keys are TrainConfig fields, plus optional
    ``model`` (ModelConfig fields) and ``motion`` (MotionSpec fields) tables."""
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {path}")
    text = p.read_text()
    if p.suffix == ".toml":
        try:
            import tomllib
        except ModuleNotFoundError:  # python < 3.11
            import tomli as tomllib
        try:
            return tomllib.loads(text)
        except tomllib.TOMLDecodeError as exc:
            raise UsageError(f"bad TOML in {path}: {exc}") from None
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise UsageError(f"bad JSON in {path}: {exc}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be an object")
    return doc


def resolve_configs(args) -> tuple:
    """(ModelConfig, TrainConfig) from the config file with flags applied on top."""
    doc = load_config_file(getattr(args, "config", None))
    model_doc = dict(doc.pop("model", {}))
    doc.pop("motion", None)
    if args.seed is not None:
        doc["seed"] = args.seed
        model_doc["seed"] = args.seed
    if getattr(args, "epochs", None) is not None:
        doc["epochs"] = args.epochs
    if getattr(args, "loss_form", None) is not None:
        doc["loss_form"] = args.loss_form
    if getattr(args, "ablation", None) is not None:
        doc["ablation"] = args.ablation
    if "ablation" in doc:
        model_doc["ablation"] = doc["ablation"]
    elif "ablation" in model_doc:
        doc["ablation"] = model_doc["ablation"]
    try:
        return ModelConfig.from_dict(model_doc), TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid configuration: {exc}") from None


def motion_spec(args) -> MotionSpec:
    doc = dict(load_config_file(getattr(args, "config", None)).get("motion", {}))
    if args.ts_eg is not None:
        doc["ts_eg"] = args.ts_eg
    try:
        return MotionSpec.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UsageError(f"invalid motion spec: {exc}") from None


def _marf_files(directory) -> List[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise DataError(f"input directory not found: {directory}")
    files = sorted(p for p in d.glob("*.marf") if not p.name.endswith(".mask.marf"))
    if not files:
        raise DataError(f"no .marf inputs found in {directory}")
    return files


def _stem(path: Path) -> str:
    return path.name.split(".", 1)[0]


def _writable_dir(path) -> Path:
    out = Path(path)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise DataError(f"cannot create output directory {path}: {exc.strerror}") from None
    if not os.access(out, os.W_OK):
        raise DataError(f"output directory {path} is not writable")
    return out


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_phantom(args) -> int:
    if args.count < 1:
        raise UsageError("--count must be at least 1")
    out = _writable_dir(args.out)
    seeds = np.random.SeedSequence(args.seed or 0).generate_state(args.count)
    spec = PhantomSpec(size=args.size)
    for i, s in enumerate(seeds):
        write_marf(out / f"phantom_{i:04d}.marf", render_phantom(spec, seed=int(s)))
    print(f"wrote {args.count} phantoms to {out}")
    return EXIT_OK


def cmd_simulate(args) -> int:
    spec = motion_spec(args)
    files = _marf_files(args.input)
    out = _writable_dir(args.out)
    seeds = np.random.SeedSequence(args.seed or 0).generate_state(len(files))
    report: Dict[str, float] = {}
    for path, s in zip(files, seeds):
        img = read_marf(path)
        if img.min() < 0 or img.max() > 1:
            raise DataError(f"{path.name}: values outside [0, 1]")
        corrupt, mask = simulate_motion(img, spec, seed=int(s))
        write_marf(out / path.name, corrupt)
        (out / f"{_stem(path)}.mask.json").write_text(json.dumps([int(v) for v in mask]) + "\n")
        report[path.name] = corrupted_fraction(mask)
    mean = float(np.mean(list(report.values())))
    doc = {"motion_spec": spec.to_dict(), "mean_corrupted_fraction": mean, "corrupted_fraction": report}
    (out / "report.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
    print(f"simulated {len(files)} images, mean corrupted fraction {mean:.4f}")
    return EXIT_OK


def cmd_build_dataset(args) -> int:
    spec = motion_spec(args)
    images = [read_marf(p) for p in _marf_files(args.input)]
    try:
        ds = build_dataset(images, spec, out_dir=_writable_dir(args.out), seed=args.seed or 0, patch=args.patch)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    print(json.dumps(ds.counts(), sort_keys=True))
    return EXIT_OK


def _load_dataset(root):
    try:
        return load_dataset(root)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load dataset {root}: {exc}") from None


def cmd_train(args) -> int:
    mcfg, tcfg = resolve_configs(args)
    ds = _load_dataset(args.dataset)
    out = _writable_dir(args.out)
    trainer = train(UnaenModel(mcfg), ds, tcfg, out_dir=out)
    st = trainer.state
    print(f"trained {st.epoch} epochs ({st.global_step} steps); best val ssim {st.best_val_ssim:.6f} at epoch {st.best_epoch}")
    return EXIT_OK


def cmd_infer(args) -> int:
    files = _marf_files(args.input)
    out = _writable_dir(args.out)
    expected = None
    if args.config:
        args.seed = None
        expected, _ = resolve_configs(args)
    model = load_for_inference(args.run, expected=expected)
    images = np.stack([read_marf(p) for p in files])
    for path, img in zip(files, infer(model, images)):
        write_marf(out / f"{_stem(path)}.reduced.marf", img)
    print(f"wrote {len(files)} MA-reduced images to {out}")
    return EXIT_OK


def cmd_evaluate(args) -> int:
    restored = {_stem(p): p for p in _marf_files(args.restored)}
    reference = {_stem(p): p for p in _marf_files(args.reference)}
    missing = sorted(set(restored) ^ set(reference))
    if missing:
        raise DataError(f"unmatched images: {', '.join(missing[:5])}")
    pairs = [(read_marf(restored[k]), read_marf(reference[k])) for k in sorted(restored)]
    try:
        report = evaluate_set(pairs)
    except ValueError as exc:
        raise DataError(str(exc)) from None
    print(report.to_text())
    print(report.to_json())
    return EXIT_OK


def cmd_ablate(args) -> int:
    mcfg, tcfg = resolve_configs(args)
    ds = _load_dataset(args.dataset)
    baseline = evaluate_set(zip(ds.test_corrupt, ds.test_clean))
    rows = run_ablation(ds, mcfg, tcfg, ABLATIONS)
    lines = [f"{'mode':<20} {'ssim':>8} {'psnr':>8}", f"{'corrupted input':<20} {baseline.ssim:8.4f} {baseline.psnr:8.3f}"]
    lines += [f"{ABLATION_LABELS[r.ablation]:<20} {r.ssim:8.4f} {r.psnr:8.3f}" for r in rows]
    print("\n".join(lines))
    if args.out:
        out = _writable_dir(args.out)
        doc = {
            "baseline": {"ssim": baseline.ssim, "psnr": baseline.psnr},
            "rows": [{"ablation": r.ablation, "ssim": r.ssim, "psnr": r.psnr} for r in rows],
        }
        (out / "ablation.json").write_text(json.dumps(doc, indent=2) + "\n")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="unaen", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, seed=True, out=True):
        p.add_argument("--config", help="JSON or TOML config file")
        if seed:
            p.add_argument("--seed", type=int, default=None)
        if out:
            p.add_argument("--out", required=True, help="output directory")
        return p

    p = common(sub.add_parser("phantom", help="render jittered Shepp-Logan phantoms"))
    p.add_argument("--count", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=cmd_phantom)

    p = common(sub.add_parser("simulate", help="add simulated motion artifacts"))
    p.add_argument("input", help="directory of clean .marf images")
    p.add_argument("--ts-eg", type=int, default=None, help="echo groups per motion period")
    p.set_defaults(func=cmd_simulate)

    p = common(sub.add_parser("build-dataset", help="build unpaired train pools and paired val/test"))
    p.add_argument("input", help="directory of clean .marf images")
    p.add_argument("--ts-eg", type=int, default=None)
    p.add_argument("--patch", type=int, default=128)
    p.set_defaults(func=cmd_build_dataset)

    for name, func, help_ in (
        ("train", cmd_train, "train one model"),
        ("ablate", cmd_ablate, "train all four ablations and print a table"),
    ):
        p = sub.add_parser(name, help=help_)
        common(p, out=False)
        p.add_argument("dataset", help="dataset directory from build-dataset")
        p.add_argument("--out", required=name == "train", help="output directory")
        p.add_argument("--epochs", type=int, default=None)
        p.add_argument("--ablation", choices=ABLATIONS, default=None)
        p.add_argument("--loss-form", choices=("sqrt", "squared"), default=None)
        p.set_defaults(func=func)

    p = common(sub.add_parser("infer", help="apply a trained G_e"), seed=False)
    p.add_argument("run", help="training output directory")
    p.add_argument("input", help="directory of corrupted .marf images")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("evaluate", help="SSIM/PSNR/MSE of restored images against references")
    p.add_argument("restored")
    p.add_argument("reference")
    p.set_defaults(func=cmd_evaluate)
    return parser


def _thread_limit():
    value = os.environ.get(THREADS_ENV)
    if not value:
        return contextlib.nullcontext()
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"{THREADS_ENV} must be an integer, got {value!r}") from None
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=n)


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _thread_limit():
            return args.func(args)
    except UsageError as exc:
        print(f"unaen: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"unaen: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ConfigMismatchError as exc:
        print(f"unaen: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (DataError, MarfError, CheckpointError, FileNotFoundError) as exc:
        print(f"unaen: data error: {exc}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
