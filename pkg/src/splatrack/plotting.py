"""Report figures written next to the JSON/CSV outputs of the CLI."""
from __future__ import annotations

import csv
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402


def write_csv(path, rows: list[dict]) -> None:
    if not rows:
        Path(path).write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def frame_rows(reports: list[dict]) -> list[dict]:
    """Flatten per-frame tracker reports for CSV output."""
    rows = []
    for r in reports:
        pose = np.asarray(r["pose"])
        center = -pose[:3, :3].T @ pose[:3, 3]
        row = {"time": r["time"], "num_gaussians": r["num_gaussians"], "added": r["added"],
               "camera_skipped": r["camera"]["skipped"], "seconds": round(r["seconds"], 3),
               "cam_x": center[0], "cam_y": center[1], "cam_z": center[2]}
        row.update({f"loss_{k}": v for k, v in r["losses"].items()})
        rows.append(row)
    return rows


def plot_track_report(reports: list[dict], tracks: dict | None, out_dir) -> list[Path]:
    out = Path(out_dir)
    rows = frame_rows(reports)
    t = [r["time"] for r in rows]
    paths = []

    fig, axes = plt.subplots(1, 3, figsize=(13, 3.6))
    for key in ("image", "feature", "depth", "background"):
        axes[0].plot(t, [r[f"loss_{key}"] for r in rows], marker=".", label=key)
    axes[0].set(title="reconstruction terms", xlabel="frame", yscale="log")
    axes[0].legend(fontsize=8)
    axes[1].plot(t, [r["num_gaussians"] for r in rows], marker=".")
    axes[1].set(title="Gaussians", xlabel="frame")
    axes[2].plot([r["cam_x"] for r in rows], [r["cam_z"] for r in rows], marker=".")
    axes[2].set(title="camera centre (x, z)", xlabel="x", ylabel="z")
    axes[2].axis("equal")
    fig.tight_layout()
    paths.append(out / "track_report.png")
    fig.savefig(paths[-1], dpi=110)
    plt.close(fig)

    if tracks and tracks.get("tracks"):
        fig, ax = plt.subplots(figsize=(5, 5))
        for tr in tracks["tracks"]:
            if not tr or not tr["points"]:
                continue
            xy = np.array([[p["x"], p["y"]] for p in tr["points"]])
            vis = np.array([p["visible"] for p in tr["points"]])
            ax.plot(xy[:, 0], xy[:, 1], lw=0.8)
            ax.scatter(xy[~vis, 0], xy[~vis, 1], s=6, c="k", marker="x")
        ax.invert_yaxis()
        ax.set(title="2D tracks (x = occluded)", xlabel="u [px]", ylabel="v [px]")
        fig.tight_layout()
        paths.append(out / "tracks.png")
        fig.savefig(paths[-1], dpi=110)
        plt.close(fig)
    return paths


def per_frame_errors(pairs) -> np.ndarray:
    """Mean error per frame over points with visible ground truth (NaN if none)."""
    errs = np.stack([np.where(p.gt_visible & p.valid, p.errors, np.nan) for p in pairs])
    with np.errstate(invalid="ignore"):
        finite = np.where(np.isfinite(errs), errs, np.nan)
        counts = np.sum(~np.isnan(finite), axis=0)
        return np.where(counts > 0, np.nansum(finite, axis=0) / np.maximum(counts, 1), np.nan)


def plot_eval_report(pairs2d, metrics: dict, out_path) -> Path:
    err = per_frame_errors(pairs2d)
    fig, ax = plt.subplots(figsize=(6, 3.6))
    ax.plot(np.arange(len(err)), err, marker=".")
    ax.set(title=f"mean 2D error per frame ({metrics['protocol']})", xlabel="frame", ylabel="px")
    fig.tight_layout()
    fig.savefig(out_path, dpi=110)
    plt.close(fig)
    return Path(out_path)
