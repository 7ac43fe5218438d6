"""transcamp command line: synth, train, eval, gradcheck.

Exit codes: 0 success, 1 check failure, 2 invalid input, 3 numerical failure.
Every command that has an output directory leaves a ``run_manifest.json``
there, including on failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import time
from pathlib import Path

from . import __version__
from . import gradcheck as gc
from .evaluation import EvalError, evaluate, write_report
from .geometry import GeometryError, pose_to_vec7
from .layers import LayerError
from .loss import consistency_loss
from .model import PoseGraphTransformer
from .posegraph import GraphError, load_dataset, load_gt, write_jsonl
from .synth import GenerationError, SceneSpec, SpecError, generate
from .train import (
    CheckpointError,
    ConfigError,
    NonFiniteError,
    TrainConfig,
    apply_graph_state,
    checkpoint_load,
    train_run,
)

log = logging.getLogger("transcamp")

EXIT_OK, EXIT_CHECK, EXIT_INPUT, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST = "run_manifest.json"
LOG_LEVELS = {"error": logging.ERROR, "info": logging.INFO, "debug": logging.DEBUG}

INPUT_ERRORS = (
    SpecError, GenerationError, ConfigError, CheckpointError, GraphError, EvalError,
    GeometryError, LayerError, OSError, json.JSONDecodeError, KeyError, TypeError, ValueError,
)


class RunFailed(Exception):
    def __init__(self, code: int, message: str):
        super().__init__(message)
        self.code = code


def _setup_logging() -> None:
    name = os.environ.get("TRANSCAMP_LOG", "info").lower()
    level = LOG_LEVELS.get(name, logging.INFO)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr, force=True)
    if name not in LOG_LEVELS:
        log.warning("TRANSCAMP_LOG=%r not one of %s; using info", name, sorted(LOG_LEVELS))


def _read_json(path) -> dict:
    with open(path, encoding="utf-8") as fh:
        raw = json.load(fh)
    if not isinstance(raw, dict):
        raise ValueError(f"{path}: top level must be a JSON object")
    return raw


def _write_manifest(out: Path | None, manifest: dict) -> None:
    if out is None:
        return
    try:
        out.mkdir(parents=True, exist_ok=True)
        tmp = out / (MANIFEST + ".tmp")
        tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
        os.replace(tmp, out / MANIFEST)
    except OSError as exc:
        log.error("could not write manifest: %s", exc)


# commands ---------------------------------------------------------------------

def cmd_synth(args, manifest: dict) -> int:
    raw = _read_json(args.spec)
    spec = SceneSpec.from_dict(raw)
    manifest["config"] = spec.to_dict()
    manifest["seeds"] = {"rng_seed": spec.rng_seed}
    scene = generate(spec)
    scene.write(args.out)
    manifest["outputs"] = [str(Path(args.out) / f) for f in ("frames.jsonl", "matches.jsonl", "gt.jsonl", "meta.json")]
    log.info("wrote %d frames, %d edges to %s", scene.graph.n, len(scene.graph.edges), args.out)
    return EXIT_OK


METRIC_FIELDS = ["epoch", "loss", "lr", "n_edges", "median_rot_deg", "median_trans", "grad_norm"]


def _write_metrics(path: Path, rows: list[dict]) -> None:
    tmp = Path(str(path) + ".tmp")
    with open(tmp, "w", newline="", encoding="utf-8") as fh:
        w = csv.DictWriter(fh, fieldnames=METRIC_FIELDS, lineterminator="\n")
        w.writeheader()
        for r in rows:
            w.writerow({k: ("" if r[k] is None else (repr(r[k]) if isinstance(r[k], float) else r[k])) for k in METRIC_FIELDS})
    os.replace(tmp, path)


def _previous_metrics(path: Path, before: int) -> list[dict]:
    if not path.exists():
        return []
    rows = []
    with open(path, encoding="utf-8") as fh:
        for r in csv.DictReader(fh):
            if int(r["epoch"]) >= before:
                continue
            rows.append({k: (None if r[k] == "" else (int(r[k]) if k in ("epoch", "n_edges") else float(r[k])))
                         for k in METRIC_FIELDS})
    return rows


def cmd_train(args, manifest: dict) -> int:
    config = TrainConfig.load(args.config) if args.config else TrainConfig()
    manifest["config"] = config.to_dict()
    manifest["seeds"] = {"rng_seed": config.rng_seed}
    graph = load_dataset(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    model, start = None, 0
    if args.resume:
        ckpt = checkpoint_load(args.resume)
        want = config.dims(graph.feature_dim)
        if ckpt.model.dims != want:
            raise CheckpointError(f"checkpoint dims {ckpt.model.dims} do not match config/data dims {want}")
        if ckpt.meta is not None:
            graph = apply_graph_state(graph, ckpt.meta)
        model, start = ckpt.model, ckpt.epoch
        manifest["resumed_from"] = {"checkpoint": str(args.resume), "epoch": start}
        log.info("resuming at epoch %d", start)
        if start >= config.epochs:
            log.warning("checkpoint epoch %d already reaches epochs=%d; nothing to do", start, config.epochs)

    metrics_path = out / "metrics.csv"
    rows = _previous_metrics(metrics_path, start) if args.resume else []

    def on_epoch(rec):
        rows.append({k: getattr(rec, k) for k in METRIC_FIELDS})
        if rec.epoch % 25 == 0 or rec.epoch == config.epochs - 1:
            log.info("epoch %d loss %.6g edges %d", rec.epoch, rec.loss, rec.n_edges)

    try:
        result = train_run(graph, config, out_dir=out, model=model, start_epoch=start, on_epoch=on_epoch)
    finally:
        _write_metrics(metrics_path, rows)
    manifest["outputs"] = [str(metrics_path)] + [str(p) for p in result.checkpoints]
    if result.log:
        last = result.log[-1]
        manifest["final"] = {"epoch": last.epoch, "loss": last.loss, "median_rot_deg": last.median_rot_deg,
                             "median_trans": last.median_trans, "n_edges": last.n_edges}
    return EXIT_OK


def cmd_eval(args, manifest: dict) -> int:
    graph = load_dataset(args.data)
    ckpt = checkpoint_load(args.checkpoint)
    model: PoseGraphTransformer = ckpt.model
    if model.dims.feature_dim != graph.feature_dim:
        raise CheckpointError(f"checkpoint expects feature_dim {model.dims.feature_dim}, data has {graph.feature_dim}")
    if ckpt.meta is not None:
        graph = apply_graph_state(graph, ckpt.meta)
    manifest["config"] = {"checkpoint": str(args.checkpoint), "dims": model.dims.to_dict(), "epoch": ckpt.epoch}

    res = model.forward(graph)
    poses = res.poses()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_jsonl(out / "poses.jsonl", ({"id": k, "pose": [float(x) for x in pose_to_vec7(p)]} for k, p in enumerate(poses)))

    extra = {"n_edges": len(graph.edges)}
    if graph.edges and all(e.measured for e in graph.edges):
        extra["consistency_loss"] = consistency_loss(graph, res.vec).item()
    gt = load_gt(args.data)
    if gt is None:
        log.warning("no gt.jsonl in %s; supervision metrics are absent", args.data)
        report = None
    else:
        report = evaluate(poses, gt)
        log.info("median rotation %.4f deg, translation %.5f", report.median_rot_deg, report.median_trans)
    paths = write_report(report, out, extra)
    manifest["outputs"] = [str(out / "poses.jsonl")] + [str(p) for p in paths]
    return EXIT_OK


def cmd_gradcheck(args, manifest: dict) -> int:
    try:
        dims = gc.parse_dims(args.dims)
    except ValueError as exc:
        raise RunFailed(EXIT_INPUT, str(exc)) from exc
    manifest["config"] = dims
    manifest["seeds"] = {"seed": dims["seed"]}
    errors = gc.run(dims)
    for name, err in errors.items():
        status = "ok" if err < gc.TOLERANCE else "FAIL"
        print(f"{name:<11s} max_rel_err={err:.3e} {status}")
    manifest["errors"] = errors
    ok = gc.passed(errors)
    print(f"gradcheck {'passed' if ok else 'failed'} (tolerance {gc.TOLERANCE:g})")
    return EXIT_OK if ok else EXIT_CHECK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "gradcheck": cmd_gradcheck}


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="transcamp", description=__doc__.splitlines()[0], allow_abbrev=False)
    p.add_argument("--version", action="version", version=f"transcamp {__version__}")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="generate a synthetic dataset", allow_abbrev=False)
    s.add_argument("--spec", required=True, help="scene spec JSON file")
    s.add_argument("--out", required=True, help="dataset directory to write")

    t = sub.add_parser("train", help="train on a dataset", allow_abbrev=False)
    t.add_argument("--data", required=True, help="dataset directory")
    t.add_argument("--config", help="training config JSON file (defaults when omitted)")
    t.add_argument("--out", required=True, help="run directory for checkpoints and metrics")
    t.add_argument("--resume", help="checkpoint to continue from")

    e = sub.add_parser("eval", help="evaluate a checkpoint on a dataset", allow_abbrev=False)
    e.add_argument("--data", required=True, help="dataset directory")
    e.add_argument("--checkpoint", required=True, help="checkpoint file")
    e.add_argument("--out", required=True, help="report directory")

    g = sub.add_parser("gradcheck", help="finite-difference gradient check", allow_abbrev=False)
    g.add_argument("--dims", help='fixture size, e.g. "n=5,d=8,heads=2" (n <= 8, d <= 16)')
    g.add_argument("--out", help="directory for the run manifest")
    return p


def main(argv=None) -> int:
    _setup_logging()
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        # argparse exits 2 on bad usage already; keep --help/--version at 0
        return int(exc.code or 0)

    out = Path(args.out) if getattr(args, "out", None) else None
    manifest = {
        "command": args.command,
        "argv": list(sys.argv[1:] if argv is None else argv),
        "version": f"transcamp {__version__}",
        "config": None,
        "seeds": {},
        "outputs": [],
    }
    t0 = time.perf_counter()
    try:
        code = COMMANDS[args.command](args, manifest)
        manifest["status"] = "ok" if code == EXIT_OK else "check_failed"
    except RunFailed as exc:
        code = exc.code
        manifest.update(status="failed", error=str(exc))
        log.error("%s", exc)
    except NonFiniteError as exc:
        code = EXIT_NUMERIC
        manifest.update(status="failed", error=f"numerical failure: {exc}")
        log.error("numerical failure: %s", exc)
    except INPUT_ERRORS as exc:
        code = EXIT_INPUT
        manifest.update(status="failed", error=f"{type(exc).__name__}: {exc}")
        log.error("invalid input: %s", exc)
    manifest["exit_code"] = code
    manifest["duration_s"] = time.perf_counter() - t0
    _write_manifest(out, manifest)
    return code


if __name__ == "__main__":
    sys.exit(main())
