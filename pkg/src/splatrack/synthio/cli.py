"""Command line front-end: ``synth``, ``track``, ``render`` and ``eval``.

Exit codes: 0 success, 1 usage error, 2 data error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from importlib import resources
from pathlib import Path

import numpy as np

from .. import metrics
from ..renderer import rasterize
from ..tracker import ConfigError, TrackerConfig, run_sequence
from ..trajectories import QueryError, track_queries, tracks_to_json
from .dataset import DataError, load_dataset, load_run, save_run
from .generator import SceneSpec, SpecError, generate_sequence, write_json
from .tensorfile import TensorFormatError, write_tensor

log = logging.getLogger("splatrack")

EXIT_OK, EXIT_USAGE, EXIT_DATA = 0, 1, 2
BUNDLED = {"smoke": "smoke_spec.json"}
CHANNELS = ("color", "feature", "depth", "background", "density")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def _bundled(name: str) -> str:
    return resources.files("splatrack.synthio").joinpath(name).read_text()


def _load_spec(arg: str) -> SceneSpec:
    if arg in BUNDLED:
        return SceneSpec.from_dict(json.loads(_bundled(BUNDLED[arg])))
    try:
        return SceneSpec.load(arg)
    except FileNotFoundError:
        raise DataError(f"spec file {arg} not found") from None


def _read_json(path):
    try:
        with open(path) as fh:
            return json.load(fh)
    except FileNotFoundError:
        raise DataError(f"missing file {path}") from None
    except json.JSONDecodeError as err:
        raise DataError(f"{path}: {err}") from None


# --- subcommands ---------------------------------------------------------------

def cmd_synth(args) -> int:
    spec = _load_spec(args.spec)
    if args.frames is not None:
        spec.frames = args.frames
    gt = generate_sequence(spec, args.out)
    print(f"wrote {spec.frames} frames and {len(gt['tracks'])} tracks to {args.out}")
    return EXIT_OK


def _queries(args, dataset) -> list:
    if args.queries:
        data = _read_json(args.queries)
        items = data["queries"] if isinstance(data, dict) else data
        return [(q["x"], q["y"], q.get("t", 0)) for q in items]
    gt_path = Path(dataset.root) / "gt_tracks.json"
    if gt_path.exists():
        return [(t["query"]["x"], t["query"]["y"], t["query"]["t"]) for t in _read_json(gt_path)["tracks"]]
    h, w = dataset.camera.height, dataset.camera.width
    return [(float(x), float(y), 0) for y in range(4, h, 8) for x in range(4, w, 8)]


def cmd_track(args) -> int:
    dataset = load_dataset(args.data)
    config = TrackerConfig.load(args.config) if args.config else TrackerConfig()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report_path = out / "report.jsonl"
    report_path.write_text("")
    n = dataset.num_frames if args.max_frames is None else min(args.max_frames, dataset.num_frames)
    frames = (dataset.frame(t) for t in range(n))

    def progress(r):
        log.info("frame %d: %d Gaussians (+%d), total loss %.4g, %.1fs",
                 r["time"], r["num_gaussians"], r["added"], r["losses"]["total"], r["seconds"])

    tracker = run_sequence(frames, dataset.camera, config, report_path, progress)
    queries = _queries(args, dataset)
    results = track_queries(tracker.cloud, tracker.camera, queries, args.mode, config.visibility_threshold)
    served = sum(r is not None for r in results)
    if served < len(results):
        log.warning("%d of %d queries could not be served", len(results) - served, len(results))
    trajectories = tracks_to_json(results)
    save_run(tracker, out, trajectories)

    from ..plotting import frame_rows, plot_track_report, write_csv

    write_csv(out / "report.csv", frame_rows(tracker.reports))
    if not args.no_plots:
        plot_track_report(tracker.reports, trajectories, out)
    print(f"tracked {n} frames, {served}/{len(results)} queries served; run written to {out}")
    return EXIT_OK


def cmd_render(args) -> int:
    cloud, camera, config = load_run(args.run)
    if not 0 <= args.frame <= cloud.current_time:
        raise DataError(f"frame {args.frame} outside the run (0..{cloud.current_time})")
    cfg = TrackerConfig.from_dict(config) if config else TrackerConfig()
    maps = rasterize(cloud, camera, args.frame, cfg.raster)
    image = np.asarray(getattr(maps, args.channel), dtype=np.float32)
    write_tensor(image, args.out)
    if args.png:
        from ..plotting import plt

        shown = np.clip(image, 0, 1) if args.channel == "color" else image
        if args.channel == "feature":
            shown = image[..., :3]
            shown = (shown - shown.min()) / max(float(np.ptp(shown)), 1e-12)
        plt.imsave(args.png, shown)
    print(f"rendered {args.channel} of frame {args.frame} to {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    pred, gt = _read_json(args.pred), _read_json(args.gt)
    try:
        result = metrics.evaluate(pred, gt, args.protocol, args.strict)
    except (KeyError, TypeError) as err:
        raise DataError(f"malformed track file: {err}") from None
    write_json(args.out, result)
    out = Path(args.out)
    from ..plotting import plot_eval_report, write_csv

    write_csv(out.with_suffix(".csv"), [result])
    if not args.no_plots:
        plot_eval_report(metrics.pairs_from_json(pred, gt, 2), result, out.with_suffix(".png"))
    for key, value in result.items():
        print(f"{key}\t{value if isinstance(value, str) else f'{value:.4f}'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="splatrack", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic sequence")
    p.add_argument("--spec", required=True, help="scene spec JSON, or 'smoke' for the bundled one")
    p.add_argument("--out", required=True)
    p.add_argument("--frames", type=int, help="override the frame count")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("track", help="reconstruct a sequence and extract tracks")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="tracker config JSON (docs/config.schema.json)")
    p.add_argument("--out", required=True)
    p.add_argument("--queries", help="JSON list of {x, y, t}; defaults to the dataset's GT queries")
    p.add_argument("--mode", choices=("gaussian", "alpha"), default="gaussian")
    p.add_argument("--max-frames", type=int)
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_track)

    p = sub.add_parser("render", help="re-render a frame of a saved run")
    p.add_argument("--run", required=True)
    p.add_argument("--frame", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--channel", choices=CHANNELS, default="color")
    p.add_argument("--png", help="also save a PNG preview")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="score predicted tracks against ground truth")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--protocol", choices=("tapvid", "iphone"), default="tapvid")
    p.add_argument("--out", required=True)
    p.add_argument("--strict", action="store_true", help="use error < h instead of <= h")
    p.add_argument("--no-plots", action="store_true")
    p.set_defaults(func=cmd_eval)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as err:
        print(err, file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as err:  # --help
        return EXIT_OK if err.code in (0, None) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (DataError, SpecError, ConfigError, TensorFormatError, QueryError,
            metrics.MetricError, FileNotFoundError, ValueError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
