"""Output artifacts: CSV, JSON, SVG plots, and PNG image grids.

Every artifact embeds {config hash, seed, version} so results can be
traced back to the exact run that produced them. SVG plots are rendered
natively (polyline + axes), keeping the package free of plotting
dependencies.
"""

from __future__ import annotations

import csv
import json
from typing import Mapping, Sequence

import numpy as np

VERSION = "0.1.0"

__all__ = ["VERSION", "run_meta", "meta_comment", "write_csv", "write_json",
           "render_line_svg", "write_svg", "write_png_grid"]


def run_meta(config_hash: str, seed: int) -> dict:
    return {"config_hash": config_hash, "seed": seed, "version": VERSION}


def meta_comment(meta: Mapping) -> str:
    return " ".join(f"{k}={meta[k]}" for k in sorted(meta))


def write_csv(path, columns: Sequence[str], rows: Sequence[Sequence],
              meta: Mapping) -> None:
    """CSV with a leading '# key=value ...' provenance comment line."""
    with open(path, "w", newline="") as fh:
        fh.write(f"# {meta_comment(meta)}\n")
        writer = csv.writer(fh)
        writer.writerow(columns)
        writer.writerows(rows)


def write_json(path, obj: Mapping, meta: Mapping) -> None:
    record = dict(obj)
    record["meta"] = dict(meta)
    with open(path, "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")


_PALETTE = ["#1f6fb2", "#d1495b", "#2e8b57", "#e0a800", "#6f42c1", "#17a2b8"]


def render_line_svg(xs: Sequence[float], series: Mapping[str, Sequence[float]],
                    *, title: str, xlabel: str, ylabel: str, meta: Mapping,
                    width: int = 640, height: int = 400) -> str:
    """A simple multi-series line plot as an SVG string."""
    xs = np.asarray(xs, dtype=np.float64)
    ys_all = np.concatenate([np.asarray(v, dtype=np.float64) for v in series.values()])
    ys_all = ys_all[np.isfinite(ys_all)]
    x_lo, x_hi = float(xs.min()), float(xs.max())
    y_lo, y_hi = (float(ys_all.min()), float(ys_all.max())) if ys_all.size else (0, 1)
    if x_hi == x_lo:
        x_hi = x_lo + 1.0
    if y_hi == y_lo:
        y_hi, y_lo = y_lo + 1.0, y_lo - 1.0
    pad = 0.05 * (y_hi - y_lo)
    y_lo, y_hi = y_lo - pad, y_hi + pad
    ml, mr, mt, mb = 60, 20, 40, 50  # margins

    def px(x):
        return ml + (x - x_lo) / (x_hi - x_lo) * (width - ml - mr)

    def py(y):
        return height - mb - (y - y_lo) / (y_hi - y_lo) * (height - mt - mb)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">',
        f"<!-- {meta_comment(meta)} -->",
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{width / 2}" y="22" text-anchor="middle" '
        f'font-size="15" font-family="sans-serif">{title}</text>',
    ]
    # axes
    parts.append(f'<line x1="{ml}" y1="{height - mb}" x2="{width - mr}" '
                 f'y2="{height - mb}" stroke="black"/>')
    parts.append(f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{height - mb}" '
                 f'stroke="black"/>')
    for frac in (0.0, 0.25, 0.5, 0.75, 1.0):
        xv = x_lo + frac * (x_hi - x_lo)
        yv = y_lo + frac * (y_hi - y_lo)
        parts.append(f'<line x1="{px(xv):.1f}" y1="{height - mb}" '
                     f'x2="{px(xv):.1f}" y2="{height - mb + 5}" stroke="black"/>')
        parts.append(f'<text x="{px(xv):.1f}" y="{height - mb + 18}" '
                     f'text-anchor="middle" font-size="11" '
                     f'font-family="sans-serif">{xv:.4g}</text>')
        parts.append(f'<line x1="{ml - 5}" y1="{py(yv):.1f}" x2="{ml}" '
                     f'y2="{py(yv):.1f}" stroke="black"/>')
        parts.append(f'<text x="{ml - 8}" y="{py(yv):.1f}" text-anchor="end" '
                     f'dominant-baseline="middle" font-size="11" '
                     f'font-family="sans-serif">{yv:.4g}</text>')
    parts.append(f'<text x="{(ml + width - mr) / 2}" y="{height - 10}" '
                 f'text-anchor="middle" font-size="13" '
                 f'font-family="sans-serif">{xlabel}</text>')
    parts.append(f'<text x="16" y="{(mt + height - mb) / 2}" text-anchor="middle" '
                 f'font-size="13" font-family="sans-serif" '
                 f'transform="rotate(-90 16 {(mt + height - mb) / 2})">{ylabel}</text>')
    for k, (label, ys) in enumerate(series.items()):
        ys = np.asarray(ys, dtype=np.float64)
        color = _PALETTE[k % len(_PALETTE)]
        pts = " ".join(f"{px(x):.1f},{py(y):.1f}" for x, y in zip(xs, ys)
                       if np.isfinite(y))
        parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"/>')
        parts.append(f'<text x="{width - mr - 5}" y="{mt + 14 + 14 * k}" '
                     f'text-anchor="end" font-size="11" fill="{color}" '
                     f'font-family="sans-serif">{label}</text>')
    parts.append("</svg>")
    return "\n".join(parts)


def write_svg(path, svg_text: str) -> None:
    with open(path, "w") as fh:
        fh.write(svg_text)
        if not svg_text.endswith("\n"):
            fh.write("\n")


def write_png_grid(path, images: np.ndarray, meta: Mapping,
                   cols: int = 8) -> None:
    """Tile [-1, 1] images into a grid PNG; provenance in a tEXt chunk."""
    from PIL import Image
    from PIL.PngImagePlugin import PngInfo

    n, c, h, w = images.shape
    cols = min(cols, n)
    rows = (n + cols - 1) // cols
    canvas = np.zeros((rows * h, cols * w, 3), dtype=np.uint8)
    arr = np.clip((images + 1.0) * 127.5, 0, 255).astype(np.uint8)
    for i in range(n):
        r, col = divmod(i, cols)
        canvas[r * h:(r + 1) * h, col * w:(col + 1) * w] = arr[i].transpose(1, 2, 0)
    info = PngInfo()
    info.add_text("duodiff_meta", json.dumps(dict(meta), sort_keys=True))
    Image.fromarray(canvas).save(path, pnginfo=info)
