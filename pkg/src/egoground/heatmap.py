"""Relevance heatmap export: binary PPM image plus a CSV of voxel scores.

Scores in [0, 1] map linearly from gray (128,128,128) at 0 to red (255,0,0)
at 1, with channels rounded half-up.  Every pixel takes the color of the
nearest voxel projection in pixel space, so the image is fully covered and
an all-equal score field produces one uniform color.  The CSV lists every
voxel (x, y, z, score) regardless of visibility in the chosen view.
"""

from __future__ import annotations

import csv
from pathlib import Path

import numpy as np

from .geometry import CameraIntrinsics, CameraPose, project_points

Array = np.ndarray


def score_color(score: float) -> tuple[int, int, int]:
    """Linear gray -> red; channels floor(x + 0.5), score clipped to [0, 1]."""
    s = min(max(float(score), 0.0), 1.0)
    r = int(np.floor(128.0 + 127.0 * s + 0.5))
    gb = int(np.floor(128.0 * (1.0 - s) + 0.5))
    return r, gb, gb


def write_ppm(path: str | Path, pixels: Array) -> None:
    """Binary P6 writer; pixels is (H, W, 3) uint8."""
    pixels = np.asarray(pixels)
    if pixels.ndim != 3 or pixels.shape[2] != 3 or pixels.dtype != np.uint8:
        raise ValueError("pixels must be (H, W, 3) uint8")
    h, w = pixels.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())


def render_relevance_image(coords: Array, scores: Array, cam: CameraIntrinsics,
                           pose: CameraPose) -> Array:
    """(H, W, 3) uint8 heatmap via nearest projected voxel per pixel."""
    coords = np.asarray(coords, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if coords.ndim != 2 or coords.shape[1] != 3 or coords.shape[0] == 0:
        raise ValueError("coords must be (N, 3) with N >= 1")
    if scores.shape != (coords.shape[0],):
        raise ValueError("one score per voxel required")
    uv, _, in_front = project_points(coords, cam, pose)
    if not in_front.any():
        raise ValueError("no voxel projects in front of the camera")
    uv = uv[in_front]
    vis_scores = scores[in_front]
    vs, us = np.mgrid[0:cam.height, 0:cam.width].astype(np.float64)
    px = np.stack([us.ravel(), vs.ravel()], axis=1)
    d2 = ((px[:, None, :] - uv[None, :, :]) ** 2).sum(axis=2)
    nearest = d2.argmin(axis=1)
    img = np.zeros((cam.height * cam.width, 3), dtype=np.uint8)
    palette = np.array([score_color(s) for s in vis_scores], dtype=np.uint8)
    img[:] = palette[nearest]
    return img.reshape(cam.height, cam.width, 3)


def write_scores_csv(path: str | Path, coords: Array, scores: Array) -> None:
    coords = np.asarray(coords, dtype=np.float64)
    scores = np.asarray(scores, dtype=np.float64)
    if scores.shape != (coords.shape[0],):
        raise ValueError("one score per voxel required")
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x", "y", "z", "score"])
        for c, s in zip(coords, scores):
            writer.writerow([repr(float(c[0])), repr(float(c[1])),
                             repr(float(c[2])), repr(float(s))])


def export_heatmap(coords: Array, scores: Array, cam: CameraIntrinsics,
                   pose: CameraPose, out_prefix: str | Path) -> tuple[Path, Path]:
    """Write <prefix>.ppm and <prefix>.csv; returns the two paths."""
    prefix = Path(out_prefix)
    img = render_relevance_image(coords, scores, cam, pose)
    ppm = prefix.with_suffix(".ppm")
    csv_path = prefix.with_suffix(".csv")
    write_ppm(ppm, img)
    write_scores_csv(csv_path, coords, scores)
    return ppm, csv_path
