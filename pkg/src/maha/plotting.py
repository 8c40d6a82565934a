"""Standalone SVG rendering of regression episodes: true curve, context
points, predictive mean and the +-2 stddev band. Deterministic byte output;
band values are embedded as JSON metadata so tests can read them back."""

from __future__ import annotations

import json

import numpy as np

from .errors import ContractError
from .taskgen import Episode

WIDTH, HEIGHT = 640, 400
MARGIN = 40


def _fnum(v: float) -> str:
    return format(float(v), ".6g")


def render_episode_svg(ep: Episode, pred_mean: np.ndarray, pred_var: np.ndarray) -> str:
    """Render one episode; pred arrays align with ep.target_x rows."""
    if ep.way != 1:
        raise ContractError("plotting supports regression episodes only")
    x = ep.target_x[:, 0]
    true_y = ep.target_y[:, 0]
    mean = np.asarray(pred_mean).reshape(-1)
    var = np.asarray(pred_var).reshape(-1)
    half = 2.0 * np.sqrt(var)
    order = np.argsort(x, kind="stable")
    xs, ys, ms, hs = x[order], true_y[order], mean[order], half[order]

    ylo = float(min(ys.min(), (ms - hs).min(), ep.context_y.min()))
    yhi = float(max(ys.max(), (ms + hs).max(), ep.context_y.max()))
    pad = 0.05 * max(yhi - ylo, 1e-9)
    ylo, yhi = ylo - pad, yhi + pad
    xlo, xhi = float(xs.min()), float(xs.max())

    def sx(v):
        return MARGIN + (v - xlo) / max(xhi - xlo, 1e-9) * (WIDTH - 2 * MARGIN)

    def sy(v):
        return HEIGHT - MARGIN - (v - ylo) / (yhi - ylo) * (HEIGHT - 2 * MARGIN)

    meta = {
        "task_seed": int(ep.task_seed),
        "family": ep.family,
        "x": [float(v) for v in xs],
        "mean": [float(v) for v in ms],
        "half_width": [float(v) for v in hs],
        "context_x": [float(v) for v in ep.context_x[:, 0]],
        "context_y": [float(v) for v in ep.context_y[:, 0]],
    }

    band_pts = [f"{_fnum(sx(a))},{_fnum(sy(b))}" for a, b in zip(xs, ms + hs)]
    band_pts += [f"{_fnum(sx(a))},{_fnum(sy(b))}" for a, b in zip(xs[::-1], (ms - hs)[::-1])]
    true_pts = " ".join(f"{_fnum(sx(a))},{_fnum(sy(b))}" for a, b in zip(xs, ys))
    mean_pts = " ".join(f"{_fnum(sx(a))},{_fnum(sy(b))}" for a, b in zip(xs, ms))
    ctx = "".join(
        f'<circle cx="{_fnum(sx(a))}" cy="{_fnum(sy(b))}" r="4" fill="#1a1a1a"/>'
        for a, b in zip(ep.context_x[:, 0], ep.context_y[:, 0])
    )

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f"<metadata>{json.dumps(meta, sort_keys=True)}</metadata>",
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<polygon points="{" ".join(band_pts)}" fill="#9ecae1" fill-opacity="0.5"/>',
        f'<polyline points="{true_pts}" fill="none" stroke="#2c7a2c" stroke-width="1.5"/>',
        f'<polyline points="{mean_pts}" fill="none" stroke="#08519c" stroke-width="1.5"/>',
        ctx,
        f'<text x="{MARGIN}" y="20" font-family="monospace" font-size="12">'
        f"task {ep.task_seed} ({ep.family})</text>",
        "</svg>",
    ]
    return "\n".join(parts) + "\n"
