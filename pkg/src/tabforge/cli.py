"""Command-line front end: split, pretrain, fit, generate, evaluate.

Every command writes its artifacts under ``--out`` together with one run
manifest in ``<out>/manifests/``. Exit status is 0 on success, 2 on usage
errors and 1 on runtime errors (with a one-line reason on stderr).
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import tempfile
import time
from datetime import datetime, timezone
from pathlib import Path

from . import __version__
from .config import load_run_config, save_run_config
from .data import SplitPlan, fit_preprocess, load_csv, load_schema, make_splits, save_csv, save_schema
from .errors import ArgumentError, SplitError, TabForgeError
from .evaluation import evaluate, overfit_report, write_report
from .pipeline import BUNDLE_VERSION, Pretrained, fit, generate, load_bundle, pretrain, save_bundle
from .tensorio import MANIFEST

log = logging.getLogger("tabforge")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _hash_path(path: str | os.PathLike) -> str:
    """sha256 of a file, or of a directory artifact's manifest."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, record: dict) -> Path:
    """Atomically add ``<out>/manifests/<command>-NNNN.json``; never overwrites."""
    directory = out / "manifests"
    directory.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=directory, prefix=".manifest-", suffix=".tmp")
    with os.fdopen(fd, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.flush()
        os.fsync(fh.fileno())
    try:
        index = len(list(directory.glob(f"{record['command']}-*.json")))
        while True:
            target = directory / f"{record['command']}-{index:04d}.json"
            try:
                os.link(tmp, target)  # fails if the name is taken
                return target
            except FileExistsError:
                index += 1
    finally:
        os.unlink(tmp)


# --------------------------------------------------------------------------- commands


def cmd_split(args, run: dict) -> None:
    ds = load_csv(args.data, args.schema)
    plan = make_splits(ds, n_repeats=args.repeats, seed=args.seed, stratify=args.stratify)
    if plan.warning:
        log.warning("%s", plan.warning)
    args.out.mkdir(parents=True, exist_ok=True)
    plan.save(args.out / "split_plan.json")
    save_schema(ds.schema, args.out / "schema.json")
    run["outputs"] = [str(args.out / "split_plan.json"), str(args.out / "schema.json")]
    log.info("wrote %d repeats over %d rows", len(plan.repeats), plan.n_rows)


def cmd_pretrain(args, run: dict) -> None:
    cfg = load_run_config(args.config)
    run["config"] = cfg.to_dict()
    datasets = [load_csv(p) for p in args.data]
    names = [Path(p).stem for p in args.data]
    args.out.mkdir(parents=True, exist_ok=True)
    result = pretrain(
        datasets, cfg, seed=args.seed, names=names,
        checkpoint_dir=args.out / "checkpoints", resume=args.resume,
    )
    path = result.save(args.out / "pretrained")
    save_run_config(cfg, args.out / "config.yaml")
    run["outputs"] = [str(path), str(args.out / "config.yaml")]


def cmd_fit(args, run: dict) -> None:
    pretrained = Pretrained.load(args.pretrained)
    cfg = load_run_config(args.config) if args.config else pretrained.config
    run["config"] = cfg.to_dict()
    ds = load_csv(args.data, args.schema)
    rows = None
    if args.split is not None:
        plan = SplitPlan.load(args.split)
        if plan.n_rows != ds.n_rows:
            raise SplitError(f"split plan covers {plan.n_rows} rows but {args.data} has {ds.n_rows}")
        if not 0 <= args.repeat < len(plan.repeats):
            raise ArgumentError(f"--repeat must be in [0, {len(plan.repeats)})")
        rows = plan.repeats[args.repeat].train.tolist()
    bundle = fit(ds, pretrained, cfg, seed=args.seed, row_indices=rows)
    path = save_bundle(bundle, args.out / "bundle")
    run["outputs"] = [str(path)]


def cmd_generate(args, run: dict) -> None:
    if args.n <= 0:
        raise ArgumentError(f"--n must be a positive integer, got {args.n}")
    bundle = load_bundle(args.bundle)
    run["config"] = bundle.config.to_dict()
    synth = generate(bundle, args.n, seed=args.seed)
    args.out.mkdir(parents=True, exist_ok=True)
    save_csv(synth, args.out / "synthetic.csv")
    run["outputs"] = [str(args.out / "synthetic.csv")]
    log.info("generated %d rows", synth.n_rows)


def cmd_evaluate(args, run: dict) -> None:
    schema = load_schema(args.schema) if args.schema else None
    real = load_csv(args.real, schema=schema)
    synth = load_csv(args.synth, schema=real.schema)
    normalizer = fit_preprocess(real)
    if args.holdout:
        holdout = load_csv(args.holdout, schema=real.schema)
        reports = list(overfit_report(real, holdout, synth, normalizer))
    else:
        reports = [evaluate(real, synth, normalizer)]
    json_path, csv_path = write_report(reports, args.out)
    run["outputs"] = [str(json_path), str(csv_path)]
    for r in reports:
        log.info(
            "%s vs %s: shape %.4f trend %.4f dcr %.4f (raw %.4f) authenticity %.4f",
            r.candidate, r.reference, r.shape, r.trend, r.dcr_score, r.dcr_raw, r.authenticity,
        )


COMMANDS = {
    "split": cmd_split,
    "pretrain": cmd_pretrain,
    "fit": cmd_fit,
    "generate": cmd_generate,
    "evaluate": cmd_evaluate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="tabforge", description="Pretrained latent-diffusion generator for mixed-type tables.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("split", help="write a repeated train/val/test/holdout plan")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--schema", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=10)
    p.add_argument("--stratify", action=argparse.BooleanOptionalAction, default=True)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("pretrain", help="pretrain denoiser and decoder over several tables")
    p.add_argument("--data", required=True, action="append", type=Path, help="repeat for each pretraining table")
    p.add_argument("--config", type=Path)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--resume", action="store_true", help="continue from the latest round checkpoint in --out")
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("fit", help="fit a pretrained model to one table")
    p.add_argument("--data", required=True, type=Path)
    p.add_argument("--schema", type=Path)
    p.add_argument("--pretrained", required=True, type=Path)
    p.add_argument("--split", type=Path, help="split plan; fit on the train rows of --repeat")
    p.add_argument("--repeat", type=int, default=0)
    p.add_argument("--config", type=Path, help="defaults to the pretraining configuration")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("generate", help="sample synthetic rows from a bundle")
    p.add_argument("--bundle", required=True, type=Path)
    p.add_argument("--n", required=True, type=int)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("evaluate", help="score synthetic rows against the training table")
    p.add_argument("--real", required=True, type=Path)
    p.add_argument("--synth", required=True, type=Path)
    p.add_argument("--holdout", type=Path)
    p.add_argument("--schema", type=Path)
    p.add_argument("--out", required=True, type=Path)
    return parser


def _inputs(args) -> dict[str, str]:
    found = {}
    for key in ("data", "schema", "config", "pretrained", "split", "bundle", "real", "synth", "holdout"):
        value = getattr(args, key, None)
        for p in value if isinstance(value, list) else [value]:
            if p is not None and Path(p).exists():
                found[str(p)] = _hash_path(p)
    return found


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 2
    logging.basicConfig(
        level=logging.WARNING if args.quiet else logging.INFO, format="%(message)s", stream=sys.stderr, force=True
    )
    run = {
        "command": args.command,
        "argv": list(argv if argv is not None else sys.argv[1:]),
        "seeds": {"seed": getattr(args, "seed", None)},
        "artifact_version": BUNDLE_VERSION,
        "package_version": __version__,
        "config": None,
        "outputs": [],
        "started": datetime.now(timezone.utc).isoformat(),
    }
    start = time.perf_counter()
    code, message = 0, None
    try:
        run["inputs"] = _inputs(args)
        COMMANDS[args.command](args, run)
    except ArgumentError as exc:
        code, message = 2, str(exc)
    except (TabForgeError, OSError, ValueError) as exc:
        code, message = 1, str(exc) or type(exc).__name__
    run["seconds"] = round(time.perf_counter() - start, 3)
    run["status"] = "ok" if code == 0 else "error"
    run["error"] = message
    if code != 2:
        try:
            write_manifest(args.out, run)
        except OSError as exc:
            code, message = 1, message or f"cannot write run manifest: {exc}"
    if message:
        print(f"tabforge {args.command}: error: {message.splitlines()[0]}", file=sys.stderr)
    return code


if __name__ == "__main__":
    sys.exit(main())
