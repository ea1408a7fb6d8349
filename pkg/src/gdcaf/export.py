"""Seasonal aggregation of attention scores and static circular-graph figures.

Scores come from the last ST-Attention block. Spatial matrices are averaged
over samples and heads for the first and last input time position; temporal
matrices are averaged per region. A window is assigned to the meteorological
season (DJF, MAM, JJA, SON) of its last input hour.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Sequence

import numpy as np

SEASONS = ("DJF", "MAM", "JJA", "SON")
_EPOCH = datetime(1970, 1, 1, tzinfo=timezone.utc)


def season_of_hour(hour: int) -> str:
    month = (_EPOCH + timedelta(hours=int(hour))).month
    return SEASONS[(month % 12) // 3]


@dataclass
class SeasonPanel:
    samples: int = 0
    spatial_sum: np.ndarray | None = None  # (2, N, N): first / last time position
    temporal_sum: np.ndarray | None = None  # (N, T, T)

    @property
    def empty(self) -> bool:
        return self.samples == 0

    def spatial(self) -> np.ndarray:
        return self.spatial_sum / self.samples

    def temporal(self) -> np.ndarray:
        return self.temporal_sum / self.samples


@dataclass
class AttentionExport:
    regions: list[str]
    panels: dict[str, SeasonPanel] = field(default_factory=lambda: {s: SeasonPanel() for s in SEASONS})

    def add(self, hours: Sequence[int], spatial: np.ndarray, temporal: np.ndarray) -> None:
        """Fold in one batch of last-block scores.

        ``spatial`` is ``(B, K, T, N, N)`` and ``temporal`` ``(B, K, N, T, T)``.
        """
        sp = spatial.astype(np.float64).mean(axis=1)  # (B, T, N, N)
        tp = temporal.astype(np.float64).mean(axis=1)  # (B, N, T, T)
        ends = np.stack([sp[:, 0], sp[:, -1]], axis=1)
        for b, hour in enumerate(hours):
            panel = self.panels[season_of_hour(hour)]
            if panel.empty:
                panel.spatial_sum = np.zeros_like(ends[b])
                panel.temporal_sum = np.zeros_like(tp[b])
            panel.spatial_sum += ends[b]
            panel.temporal_sum += tp[b]
            panel.samples += 1


def top_edges(matrix: np.ndarray, k: int, labels: Sequence[str]) -> list[dict]:
    """Strongest off-diagonal entries, descending; ties broken by (row, col)."""
    n = matrix.shape[0]
    cand = [(-float(matrix[i, j]), i, j) for i in range(n) for j in range(n) if i != j]
    cand.sort()
    return [
        {"source": labels[i], "target": labels[j], "score": -s}
        for s, i, j in cand[:k]
    ]


def collect_attention(model, windows, hours: Sequence[int], regions: list[str], batch_size: int = 16) -> AttentionExport:
    export = AttentionExport(list(regions))
    hours = np.asarray(hours)
    for i in range(0, len(windows), batch_size):
        idx = np.arange(i, min(i + batch_size, len(windows)))
        x, _ = windows.batch(idx)
        model.predict(x, record=True)
        scores = model.last_scores
        export.add(hours[idx], scores.spatial[-1], scores.temporal[-1])
    return export


def circular_svg(matrix: np.ndarray, labels: Sequence[str], edges: list[dict], title: str, size: int = 360) -> str:
    n = len(labels)
    c = size / 2
    r = size * 0.36
    pos = {
        lab: (c + r * math.sin(2 * math.pi * i / n), c - r * math.cos(2 * math.pi * i / n))
        for i, lab in enumerate(labels)
    }
    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{size}" height="{size + 24}" '
        f'viewBox="0 0 {size} {size + 24}">',
        f'<rect width="{size}" height="{size + 24}" fill="white"/>',
        f'<text x="{c:.1f}" y="18" text-anchor="middle" font-family="sans-serif" font-size="13">{title}</text>',
        '<g transform="translate(0,24)">',
    ]
    if edges:
        hi = max(e["score"] for e in edges)
        lo = min(e["score"] for e in edges)
        span = hi - lo or 1.0
        for e in edges:
            (x1, y1), (x2, y2) = pos[e["source"]], pos[e["target"]]
            w = 0.5 + 3.5 * (e["score"] - lo) / span
            out.append(
                f'<line x1="{x1:.2f}" y1="{y1:.2f}" x2="{x2:.2f}" y2="{y2:.2f}" '
                f'stroke="#1f5fa8" stroke-opacity="0.7" stroke-width="{w:.2f}"/>'
            )
    for lab, (x, y) in pos.items():
        out.append(f'<circle cx="{x:.2f}" cy="{y:.2f}" r="11" fill="#f2a541" stroke="#333"/>')
        out.append(
            f'<text x="{x:.2f}" y="{y + 4:.2f}" text-anchor="middle" '
            f'font-family="sans-serif" font-size="9">{lab}</text>'
        )
    if not edges:
        out.append(f'<text x="{c:.1f}" y="{c:.1f}" text-anchor="middle" font-family="sans-serif" font-size="12">no samples</text>')
    out.append("</g></svg>\n")
    return "\n".join(out)


def _write_matrix(path: Path, m: np.ndarray, labels: Sequence[str] | None = None) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if labels is not None:
            w.writerow([""] + list(labels))
        for i, row in enumerate(m):
            head = [labels[i]] if labels is not None else []
            w.writerow(head + [f"{v:.10f}" for v in row])


def write_export(export: AttentionExport, out_dir: str | Path, k: int = 20, temporal_regions: Sequence[str] | None = None) -> dict:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    labels = export.regions
    chosen = list(temporal_regions) if temporal_regions else list(labels)
    summary: dict = {"top_k": k, "seasons": {}}
    for season, panel in export.panels.items():
        entry: dict = {"samples": panel.samples, "empty": panel.empty, "edges": {}}
        for slot, name in ((0, "first"), (1, "last")):
            if panel.empty:
                edges: list[dict] = []
            else:
                m = panel.spatial()[slot]
                edges = top_edges(m, k, labels)
                _write_matrix(out / f"spatial_{season}_{name}.csv", m, labels)
            entry["edges"][name] = edges
            svg = circular_svg(
                None if panel.empty else panel.spatial()[slot],
                labels,
                edges,
                f"{season} t={'1' if name == 'first' else 'T'}",
            )
            (out / f"spatial_{season}_{name}.svg").write_text(svg)
        if not panel.empty:
            tm = panel.temporal()
            for lab in chosen:
                _write_matrix(out / f"temporal_{season}_{lab}.csv", tm[labels.index(lab)])
        summary["seasons"][season] = entry
    (out / "edges.json").write_text(json.dumps(summary, indent=2, sort_keys=True) + "\n")
    return summary
