"""Command line: ``synth``, ``run`` and ``eval``.

Logs go to stderr as JSON lines; data products only go to disk. Exit codes:
0 success, 1 runtime or I/O failure, 2 invalid input (bad config, spec or
evaluation inputs), 3 too many frames skipped.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .config import ConfigError, load_config
from .metrics import AUC_CAP

log = logging.getLogger("surfelpose")

EXIT_OK, EXIT_FAIL, EXIT_INPUT, EXIT_SKIPPED = 0, 1, 2, 3


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        msg = record.getMessage()
        if msg.startswith("{"):
            return msg
        return json.dumps({"level": record.levelname.lower(), "message": msg})


def _setup_logging(verbose: bool) -> None:
    h = logging.StreamHandler(sys.stderr)
    h.setFormatter(_JsonFormatter())
    log.handlers[:] = [h]
    log.setLevel(logging.INFO if verbose else logging.WARNING)
    log.propagate = False


def _error(msg: str, code: int) -> int:
    log.error(json.dumps({"event": "error", "message": msg}))
    return code


def cmd_synth(args) -> int:
    from .dataset import synthesize
    from .report import ground_truth_objects, write_ground_truth, write_models
    from .scene_sim import SceneSpec, default_scene

    try:
        spec = default_scene() if args.spec == "default" else SceneSpec.load(args.spec)
        if args.frames is not None:
            spec.trajectory = spec.trajectory[: args.frames]
            if not spec.trajectory or args.frames < 1:
                raise ValueError("--frames must be >= 1")
    except (OSError, ValueError, KeyError, TypeError) as e:
        return _error(f"invalid scene spec {args.spec}: {e}", EXIT_INPUT)
    try:
        out = Path(args.out)
        synthesize(spec, out, args.seed)
        write_ground_truth(ground_truth_objects(spec), out / "gt.json")
        write_models(spec.models(), out / "models")
    except OSError as e:
        return _error(f"cannot write {args.out}: {e}", EXIT_FAIL)
    log.info(json.dumps({"event": "synth_complete", "out": str(out), "frames": len(spec.trajectory)}))
    return EXIT_OK


def cmd_run(args) -> int:
    from .runner import TooManySkipped, execute

    try:
        cfg, base = load_config(args.config)
    except ConfigError as e:
        return _error(str(e), EXIT_INPUT)
    if args.ablate == "single-view":
        cfg.method = "single_view"
    try:
        execute(cfg, base, plot=not args.no_plot)
    except TooManySkipped as e:
        return _error(str(e), EXIT_SKIPPED)
    except (OSError, ValueError) as e:
        return _error(f"run failed: {e}", EXIT_FAIL)
    return EXIT_OK


def cmd_eval(args) -> int:
    from .pose_fusion import TrackLog
    from .report import EvalInputError, evaluate_tracks, read_ground_truth, read_models, write_report
    from .surfel_map import SurfelMap

    try:
        rows = TrackLog.read(args.tracks)
        objects = read_ground_truth(args.gt)
        models = read_models(args.models, objects)
        smap = SurfelMap.load(args.map) if args.map else None
        ev = evaluate_tracks(rows, objects, models, args.max_points, args.cap, smap)
    except (EvalInputError, ValueError, KeyError) as e:
        return _error(f"invalid evaluation input: {e}", EXIT_INPUT)
    except OSError as e:
        return _error(str(e), EXIT_FAIL)
    try:
        write_report(ev, args.out, {"tracks": str(args.tracks)}, plot=args.plot)
    except OSError as e:
        return _error(f"cannot write {args.out}: {e}", EXIT_FAIL)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="surfelpose", description="Surfel mapping with multi-view object pose fusion.")
    p.add_argument("-v", "--verbose", action="store_true", help="log per-frame progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="render a synthetic scene to disk")
    s.add_argument("--spec", required=True, help="scene JSON, or 'default'")
    s.add_argument("--out", required=True)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--frames", type=int, default=None, help="keep only the first N trajectory poses")
    s.set_defaults(func=cmd_synth)

    r = sub.add_parser("run", help="run the pipeline from a config and write map, tracks and report")
    r.add_argument("--config", required=True)
    r.add_argument("--ablate", choices=["single-view"], default=None,
                   help="report the latest single-view measurement instead of the filter estimate")
    r.add_argument("--no-plot", action="store_true", help="skip the SVG figure")
    r.set_defaults(func=cmd_run)

    e = sub.add_parser("eval", help="score a track log against ground truth")
    e.add_argument("--tracks", required=True)
    e.add_argument("--gt", required=True, help="gt.json written by synth/run (or a frame manifest)")
    e.add_argument("--models", required=True, help="directory of <object name>.ply models")
    e.add_argument("--out", required=True)
    e.add_argument("--map", default=None, help="map PLY for the surface error")
    e.add_argument("--plot", action="store_true", help="also write accuracy.svg")
    e.add_argument("--cap", type=float, default=AUC_CAP, help="AUC threshold cap in metres")
    e.add_argument("--max-points", type=int, default=2000, help="model points used for ADD-S")
    e.set_defaults(func=cmd_eval)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.verbose)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
