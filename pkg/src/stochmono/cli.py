"""Command-line harness.

    stochmono simulate         --config run.ini [--out DIR] [--paths N] [--seed S] [--workers W]
    stochmono check-conditions --config run.ini
    stochmono stability-scan   --config run.ini [--svg]
    stochmono converge         --config run.ini [--svg]

Exit codes: 0 success, 2 configuration error, 3 solver failure or aborted
paths where completion was required, 1 anything else.  Errors are also
printed to stderr as one JSON object ``{"error": class, "message": ...}``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__, analysis, kernels, noise
from .config import ConfigError, RunConfig
from .operators import Constant, check_conditions
from .schemes import SolverFailure, trajectories_to_csv

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_ABORT = 0, 1, 2, 3


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def write_manifest(out: Path, cfg: RunConfig, command: str, outputs: list, workers: int, extra=None, started=None):
    """Manifest with the resolved config and a content hash over the outputs."""
    digests = {p.name: _sha256(p) for p in outputs}
    content = hashlib.sha256("".join(f"{k}:{v}\n" for k, v in sorted(digests.items())).encode()).hexdigest()
    p = float(cfg.operator.p) if cfg.operator.family == "example" else 2.0
    space = analysis.cached_space(cfg.family, cfg.n, cfg.quadrature_order, p)
    manifest = {
        "artifact": "stochmono",
        "version": __version__,
        "command": command,
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "workers": workers,
        "kernel_backend": kernels.BACKEND,
        "quadrature": {"family": space.family.value, "points": int(space.quadrature.nodes.size)},
        "solver": {"tolerance": cfg.tolerance, "method": "damped newton + monotone relaxation",
                   "time_quadrature_points": 4},
        "outputs": digests,
        "content_hash": content,
        "started": started,
        "finished": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True, default=_jsonable) + "\n")
    return manifest


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, (tuple, set)):
        return list(o)
    return str(o)


# -- subcommands ---------------------------------------------------------------


def cmd_simulate(cfg: RunConfig, out: Path, workers: int, svg: bool = False) -> dict:
    pair = cfg.pair()
    spec = analysis.RunSpec(cfg.scheme, cfg.family, cfg.n, cfg.m, pair, cfg.initial, cfg.T, cfg.quadrature_order)
    dyadic = cfg.m & (cfg.m - 1) == 0
    outputs, trajs, ids = [], [], []
    for idx in analysis._chunks(cfg.paths, analysis.CHUNK):
        if dyadic:
            dW = noise.sample_batch(pair.r, cfg.T, spec.level, cfg.seed, idx)
        else:
            dW = np.stack([noise.direct_increments(pair.r, cfg.T, cfg.m, cfg.seed, i) for i in idx])
        batch = analysis.run_paths(spec, dW, idx, tolerance=cfg.tolerance)
        for k, i in enumerate(idx):
            trajs.append(batch[k])
            ids.append(i)
    if cfg.layout == "per_path":
        for tr, i in zip(trajs, ids):
            p = out / f"trajectory_{i:05d}.csv"
            trajectories_to_csv([tr], p)
            outputs.append(p)
    else:
        p = out / "trajectories.csv"
        trajectories_to_csv(trajs, p, path_ids=ids)
        outputs.append(p)
    aborted = [i for tr, i in zip(trajs, ids) if tr.abort_step >= 0]
    return {"outputs": outputs, "aborted": aborted,
            "summary": {"paths": len(trajs), "aborted": len(aborted), "rho": spec.rho(), "dyadic_noise": dyadic}}


def cmd_check_conditions(cfg: RunConfig, out: Path, workers: int, svg: bool = False) -> dict:
    pair = cfg.pair()
    space = analysis.cached_space(cfg.family, cfg.n, cfg.quadrature_order, float(pair.p))
    k_fn = None
    if cfg.k == "auto":
        k_fn = Constant(pair.monotonicity_k) if pair.monotonicity_k > 0 else None
    elif cfg.k != "none":
        k_fn = Constant(float(cfg.k))
    rep = check_conditions(pair, space, cfg.samples, cfg.seed, k_fn=k_fn, T=cfg.T)
    p = out / "conditions.csv"
    analysis.rows_to_csv(rep.rows(), p)
    return {"outputs": [p], "aborted": [],
            "summary": {"passed": rep.passed, "note": rep.note,
                        "violations": {k: r.violations for k, r in rep.results.items()}}}


def cmd_stability_scan(cfg: RunConfig, out: Path, workers: int, svg: bool = False) -> dict:
    pair = cfg.pair()
    cells = analysis.stability_scan(cfg.family, cfg.n_list, cfg.m_list, pair, cfg.paths, cfg.gamma,
                                    mode=cfg.scan_mode, scheme=cfg.scheme, u0=cfg.scan_initial, seed=cfg.seed,
                                    T=cfg.T, workers=workers)
    p = out / "stability.csv"
    analysis.rows_to_csv([c.row() for c in cells], p)
    outputs = [p]
    if svg:
        s = out / "stability.svg"
        analysis.stability_svg(cells, s)
        outputs.append(s)
    return {"outputs": outputs, "aborted": [],
            "summary": {"frontier_mismatch_cells": analysis.frontier_mismatch(cells)}}


def cmd_converge(cfg: RunConfig, out: Path, workers: int, svg: bool = False) -> dict:
    pair = cfg.pair()
    ref = analysis.OracleReference() if cfg.reference == "oracle" else tuple(cfg.reference)
    rep = analysis.convergence_ladder(pair, cfg.levels, cfg.paths, cfg.seed, scheme=cfg.scheme, family=cfg.family,
                                      reference=ref, u0=cfg.initial, T=cfg.T, gamma=cfg.gamma, workers=workers)
    p = out / "ladder.csv"
    analysis.rows_to_csv(rep.rows(), p)
    outputs = [p]
    if svg:
        s = out / "ladder.svg"
        analysis.ladder_svg(rep, s)
        outputs.append(s)
    aborted = [lv.label for lv in rep.levels if lv.aborted]
    return {"outputs": outputs, "aborted": aborted,
            "summary": {"slope_log_error_sq": rep.slope_sq, "order": rep.order,
                        "strictly_decreasing": rep.strictly_decreasing, "reference": rep.reference}}


COMMANDS = {
    "simulate": cmd_simulate,
    "check-conditions": cmd_check_conditions,
    "stability-scan": cmd_stability_scan,
    "converge": cmd_converge,
}


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="stochmono", description=__doc__.split("\n\n")[0])
    ap.add_argument("--version", action="version", version=__version__)
    sub = ap.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        sp = sub.add_parser(name)
        sp.add_argument("--config", type=Path, help="INI run configuration")
        sp.add_argument("--out", type=Path, help="output directory (default: OUT_DIR or config output_dir)")
        sp.add_argument("--paths", type=int, help="override [run] paths")
        sp.add_argument("--seed", type=int, help="override [run] seed")
        sp.add_argument("--workers", type=int, default=1, help="worker processes (default 1)")
        sp.add_argument("--svg", action="store_true", help="also write an SVG chart")
    return ap


def _fail(cls: str, message: str, code: int) -> int:
    print(json.dumps({"error": cls, "message": message}), file=sys.stderr)
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    started = time.strftime("%Y-%m-%dT%H:%M:%S%z")
    try:
        cfg = RunConfig.load(args.config) if args.config else RunConfig().validate()
        if args.paths is not None:
            cfg.paths = args.paths
        if args.seed is not None:
            cfg.seed = args.seed
        cfg.validate()
        out = args.out or Path(os.environ.get("OUT_DIR") or cfg.output_dir)
        out = Path(out)
        out.mkdir(parents=True, exist_ok=True)
        if args.workers < 1:
            raise ConfigError("--workers: must be >= 1")
        result = COMMANDS[args.command](cfg, out, args.workers, args.svg)
    except ConfigError as exc:
        return _fail("ConfigError", str(exc), EXIT_CONFIG)
    except SolverFailure as exc:
        return _fail("SolverFailure", str(exc), EXIT_ABORT)
    except (analysis.RefNotFiner, analysis.CouplingViolated, noise.NonDyadic, noise.LevelOverflow) as exc:
        return _fail(type(exc).__name__, str(exc), EXIT_CONFIG)
    except Exception as exc:  # noqa: BLE001
        return _fail(type(exc).__name__, str(exc), EXIT_ERROR)
    manifest = write_manifest(out, cfg, args.command, result["outputs"], args.workers,
                              {"summary": result["summary"]}, started)
    print(json.dumps({"command": args.command, "content_hash": manifest["content_hash"], **result["summary"]},
                     default=_jsonable))
    if result["aborted"]:
        return _fail("Aborted", f"{len(result['aborted'])} path(s) or level(s) aborted", EXIT_ABORT)
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
