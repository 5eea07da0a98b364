"""Deterministic report emission: config hashing, run manifests, CSV text,
and self-contained SVG plots whose bytes depend only on their inputs (so
repeated runs diff clean in CI)."""
from __future__ import annotations

import hashlib
import json
import time

__all__ = ["config_hash", "RunManifest", "emit_plot", "write_text"]

_PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b"]


def config_hash(config: dict) -> str:
    """sha256 of the canonical JSON form; stable under key reordering,
    changed by any semantic field change."""
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode()
    return hashlib.sha256(blob).hexdigest()


class RunManifest:
    """Per-run record: resolved config, its hash, stage statuses, artifact
    paths, timestamps. The manifest itself may carry wall-clock times; the
    CSV/SVG artifacts it points to never do."""

    def __init__(self, config: dict, tool_version: str):
        self.data = {
            "config": config,
            "config_hash": config_hash(config),
            "tool_version": tool_version,
            "started_at": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
            "finished_at": None,
            "stages": {},
            "artifacts": {},
        }

    def stage(self, name: str, status: str, elapsed_s: float | None = None):
        self.data["stages"][name] = {"status": status, "elapsed_s": elapsed_s}

    def artifact(self, name: str, path: str):
        self.data["artifacts"][name] = path

    def finish(self):
        self.data["finished_at"] = time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime())

    def write(self, path):
        with open(path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)
            fh.write("\n")


def write_text(path, text: str) -> None:
    with open(path, "w", newline="") as fh:
        fh.write(text)


def _fmt(x: float) -> str:
    return f"{x:.2f}"


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi == lo:
        lo, hi = lo - 1.0, hi + 1.0
    return [lo + i * (hi - lo) / (n - 1) for i in range(n)]


def emit_plot(series: list[dict], path, title: str = "", xlabel: str = "", ylabel: str = "") -> None:
    """Write a line/marker SVG chart. `series` is a nonempty list of
    {"label", "x", "y"} with equal-length nonempty x/y. Identical input gives
    byte-identical output."""
    if not series:
        raise ValueError("emit_plot: series must be nonempty")
    for s in series:
        if len(s["x"]) == 0 or len(s["x"]) != len(s["y"]):
            raise ValueError(f"emit_plot: bad series {s.get('label')!r}")

    width, height = 640, 400
    ml, mr, mt, mb = 70, 150, 34, 50
    pw, ph = width - ml - mr, height - mt - mb
    xs = [v for s in series for v in s["x"]]
    ys = [v for s in series for v in s["y"]]
    xlo, xhi = min(xs), max(xs)
    ylo, yhi = min(ys), max(ys)
    if xhi == xlo:
        xlo, xhi = xlo - 1.0, xhi + 1.0
    if yhi == ylo:
        ylo, yhi = ylo - 1.0, yhi + 1.0
    ypad = 0.05 * (yhi - ylo)
    ylo, yhi = ylo - ypad, yhi + ypad

    def sx(v):
        return ml + (v - xlo) / (xhi - xlo) * pw

    def sy(v):
        return mt + ph - (v - ylo) / (yhi - ylo) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}" font-family="monospace" font-size="12">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
        f'<text x="{ml}" y="18" font-size="14">{title}</text>',
    ]
    # axes
    parts.append(
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>'
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>'
    )
    for tx in _ticks(xlo, xhi):
        parts.append(
            f'<line x1="{_fmt(sx(tx))}" y1="{mt + ph}" x2="{_fmt(sx(tx))}" y2="{mt + ph + 5}" stroke="black"/>'
            f'<text x="{_fmt(sx(tx))}" y="{mt + ph + 20}" text-anchor="middle">{tx:.4g}</text>'
        )
    for ty in _ticks(ylo, yhi):
        parts.append(
            f'<line x1="{ml - 5}" y1="{_fmt(sy(ty))}" x2="{ml}" y2="{_fmt(sy(ty))}" stroke="black"/>'
            f'<text x="{ml - 8}" y="{_fmt(sy(ty) + 4)}" text-anchor="end">{ty:.4g}</text>'
        )
    parts.append(
        f'<text x="{ml + pw / 2:.0f}" y="{height - 10}" text-anchor="middle">{xlabel}</text>'
        f'<text x="16" y="{mt + ph / 2:.0f}" text-anchor="middle" '
        f'transform="rotate(-90 16 {mt + ph / 2:.0f})">{ylabel}</text>'
    )
    for i, s in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        pts = [(sx(x), sy(y)) for x, y in zip(s["x"], s["y"])]
        if len(pts) > 1:
            path_d = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in pts)
            parts.append(f'<polyline points="{path_d}" fill="none" stroke="{color}" stroke-width="2"/>')
        for x, y in pts:
            parts.append(f'<circle cx="{_fmt(x)}" cy="{_fmt(y)}" r="3" fill="{color}"/>')
        ly = mt + 14 + 16 * i
        parts.append(
            f'<line x1="{ml + pw + 8}" y1="{ly - 4}" x2="{ml + pw + 28}" y2="{ly - 4}" '
            f'stroke="{color}" stroke-width="2"/>'
            f'<text x="{ml + pw + 32}" y="{ly}">{s["label"]}</text>'
        )
    parts.append("</svg>")
    write_text(path, "\n".join(parts) + "\n")
