"""Precipitation datasets: region cropping, split files, windowing, synthetic fields.

Frames are stored as ``(F, N, H, W)`` float32 arrays in native units (metres of
precipitation per hour), one frame per hour. Timestamps are whole hours since
1970-01-01T00:00Z.

Split file layout (little-endian)::

    u64   header length n
    n     bytes of UTF-8 JSON: {"format", "n_nodes", "height", "width",
          "frames", "start_hour", "regions": [...]}
    ...   float32 frames in (time, node, row, col) order
"""

from __future__ import annotations

import json
import math
import struct
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np
from scipy import ndimage

SPLIT_FORMAT = "gdcaf-split-v1"
MANIFEST_NAME = "manifest.json"

#: start of 2016 in hours since the Unix epoch
HOUR_2016 = 403224

INPUT_HOURS = (6, 9, 12, 15)
LEAD_HOURS = (1, 3, 6)
GRAPH_SIZES = (1, 2, 4, 8, 16)


class RegionBoundsError(ValueError):
    pass


@dataclass(frozen=True)
class RegionSpec:
    id: str
    lu_lat: float
    lu_lon: float
    size_px: int = 32


# Left-upper corners of the sixteen study regions (degrees).
REGIONS: tuple[RegionSpec, ...] = tuple(
    RegionSpec(f"R{i + 1}", lat, lon)
    for i, (lat, lon) in enumerate(
        [
            (66.58, 18.41),
            (57.31, 2.44),
            (51.37, -20.27),
            (64.03, -29.25),
            (73.19, -23.02),
            (68.34, -8.54),
            (62.18, 54.59),
            (44.19, 53.59),
            (44.19, 80.04),
            (80.70, 17.91),
            (77.54, 2.19),
            (72.44, 39.36),
            (79.93, -27.26),
            (78.39, 48.85),
            (52.63, 26.64),
            (77.76, 80.79),
        ]
    )
)

#: bounding box of the source grid: north, west, south, east
SOURCE_BOUNDS = (82.0, -31.0, 15.0, 100.0)


def region_pixel_box(spec: RegionSpec, origin_lat: float, origin_lon: float, resolution_deg: float):
    """(row, col) of the grid cell containing the region's left-upper corner."""
    if resolution_deg <= 0:
        raise ValueError("resolution must be positive")
    row = math.floor((origin_lat - spec.lu_lat) / resolution_deg + 1e-9)
    col = math.floor((spec.lu_lon - origin_lon) / resolution_deg + 1e-9)
    return row, col


def crop_regions(
    grid: np.ndarray,
    origin_lat: float,
    origin_lon: float,
    resolution_deg: float,
    specs: Sequence[RegionSpec],
) -> np.ndarray:
    """Cut ``size_px`` square windows out of a lat/lon grid.

    ``grid`` is ``(..., H_g, W_g)`` with row 0 at ``origin_lat`` and column 0
    at ``origin_lon``; the result is ``(..., N, size, size)``.
    """
    Hg, Wg = grid.shape[-2:]
    out = []
    for spec in specs:
        row, col = region_pixel_box(spec, origin_lat, origin_lon, resolution_deg)
        s = spec.size_px
        if row < 0 or col < 0 or row + s > Hg or col + s > Wg:
            raise RegionBoundsError(
                f"region {spec.id} box rows {row}:{row + s}, cols {col}:{col + s} "
                f"falls outside the {Hg}x{Wg} grid"
            )
        out.append(grid[..., row : row + s, col : col + s])
    return np.stack(out, axis=-3)


# ---------------------------------------------------------------------------
# dataset container and files


@dataclass
class PrecipDataset:
    frames: np.ndarray  # (F, N, H, W)
    start_hour: int = HOUR_2016
    regions: list[RegionSpec] = field(default_factory=list)

    def __post_init__(self):
        self.frames = np.ascontiguousarray(self.frames, dtype=np.float32)
        if self.frames.ndim != 4:
            raise ValueError(f"frames must be (F, N, H, W), got {self.frames.shape}")
        if (self.frames < 0).any():
            raise ValueError("precipitation values must be nonnegative")
        if not self.regions:
            self.regions = [RegionSpec(f"R{i + 1}", 0.0, 0.0, self.frames.shape[-1]) for i in range(self.n_nodes)]
        if len(self.regions) != self.n_nodes:
            raise ValueError("one region spec per node required")

    @property
    def n_frames(self) -> int:
        return self.frames.shape[0]

    @property
    def n_nodes(self) -> int:
        return self.frames.shape[1]

    @property
    def timestamps(self) -> np.ndarray:
        return self.start_hour + np.arange(self.n_frames, dtype=np.int64)

    def slice(self, start: int, stop: int) -> "PrecipDataset":
        return PrecipDataset(self.frames[start:stop], self.start_hour + start, list(self.regions))


def write_split(path: str | Path, ds: PrecipDataset) -> None:
    F, N, H, W = ds.frames.shape
    header = {
        "format": SPLIT_FORMAT,
        "n_nodes": N,
        "height": H,
        "width": W,
        "frames": F,
        "start_hour": int(ds.start_hour),
        "regions": [asdict(r) for r in ds.regions],
    }
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        fh.write(np.ascontiguousarray(ds.frames, dtype="<f4").tobytes())


def read_split(path: str | Path) -> PrecipDataset:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        if header.get("format") != SPLIT_FORMAT:
            raise ValueError(f"{path}: not a split file")
        shape = (header["frames"], header["n_nodes"], header["height"], header["width"])
        frames = np.fromfile(fh, dtype="<f4", count=math.prod(shape))
    if frames.size != math.prod(shape):
        raise ValueError(f"{path}: truncated payload")
    regions = [RegionSpec(**r) for r in header["regions"]]
    return PrecipDataset(frames.reshape(shape).astype(np.float32), header["start_hour"], regions)


def write_dataset(out_dir: str | Path, ds: PrecipDataset, meta: dict | None = None) -> Path:
    """Write the development timeline and the held-out test tail plus a manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n_test = holdout_length(ds.n_frames)
    dev, test = ds.slice(0, ds.n_frames - n_test), ds.slice(ds.n_frames - n_test, ds.n_frames)
    write_split(out / "dev.bin", dev)
    write_split(out / "test.bin", test)
    manifest = {
        "format": SPLIT_FORMAT,
        "splits": {"dev": "dev.bin", "test": "test.bin"},
        "frames": {"dev": dev.n_frames, "test": test.n_frames},
        "units": "m/h",
        "meta": meta or {},
    }
    (out / MANIFEST_NAME).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return out / MANIFEST_NAME


def read_dataset(path: str | Path) -> tuple[PrecipDataset, int]:
    """Load a manifest (or its directory); returns the joined timeline and the test length."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST_NAME
    manifest = json.loads(path.read_text())
    dev = read_split(path.parent / manifest["splits"]["dev"])
    test = read_split(path.parent / manifest["splits"]["test"])
    if test.start_hour != dev.start_hour + dev.n_frames:
        raise ValueError("test split does not continue the development timeline")
    joined = PrecipDataset(np.concatenate([dev.frames, test.frames]), dev.start_hour, dev.regions)
    return joined, test.n_frames


# ---------------------------------------------------------------------------
# windows and splits


@dataclass(frozen=True)
class WindowTask:
    t_in: int = 6
    lead: int = 6
    graph_size: int = 16

    def __post_init__(self):
        if self.t_in not in INPUT_HOURS:
            raise ValueError(f"input hours must be one of {INPUT_HOURS}")
        if self.lead not in LEAD_HOURS:
            raise ValueError(f"lead hours must be one of {LEAD_HOURS}")
        if self.graph_size not in GRAPH_SIZES:
            raise ValueError(f"graph size must be one of {GRAPH_SIZES}")

    @property
    def span(self) -> int:
        return self.t_in + self.lead


@dataclass
class GraphSample:
    x: np.ndarray  # (N, T, H, W)
    y: np.ndarray  # (N, H, W)
    start_hour: int


def window_count(n_frames: int, task: WindowTask) -> int:
    return max(0, n_frames - task.t_in - task.lead + 1)


def holdout_length(n_frames: int) -> int:
    return n_frames // 7


def split_sizes(n_windows: int, val_fraction: float = 0.1) -> tuple[int, int]:
    n_val = int(n_windows * val_fraction)
    return n_windows - n_val, n_val


@dataclass
class Splits:
    train: np.ndarray
    val: np.ndarray
    test: np.ndarray


def split(
    ds: PrecipDataset,
    task: WindowTask,
    seed: int = 0,
    val_fraction: float = 0.1,
    test_frames: int | None = None,
) -> Splits:
    """Window start indices for train / val / test.

    The final ``test_frames`` hours (default one seventh) form the test
    timeline and are never shuffled. Windows drawn entirely from the remaining
    hours are shuffled with ``seed`` and split ``1 - val_fraction`` /
    ``val_fraction``.
    """
    if ds.n_frames < task.span:
        raise ValueError(f"dataset of {ds.n_frames} hours is shorter than one {task.span}-hour window")
    n_test = holdout_length(ds.n_frames) if test_frames is None else test_frames
    n_dev = ds.n_frames - n_test
    dev_starts = np.arange(window_count(n_dev, task))
    test_starts = n_dev + np.arange(window_count(n_test, task))
    rng = np.random.default_rng(seed)
    order = rng.permutation(dev_starts)
    n_train, _ = split_sizes(len(order), val_fraction)
    return Splits(np.sort(order[:n_train]), np.sort(order[n_train:]), test_starts)


class WindowSet:
    """Lazily materialized windows over a frame array."""

    def __init__(self, frames: np.ndarray, starts: Sequence[int], task: WindowTask, scale: float = 1.0):
        self.frames = frames
        self.starts = np.asarray(starts, dtype=np.int64)
        self.task = task
        self.scale = scale

    def __len__(self) -> int:
        return len(self.starts)

    def batch(self, idx: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
        t = self.task
        s = self.starts[np.asarray(idx, dtype=np.int64)]
        steps = s[:, None] + np.arange(t.t_in)[None]
        x = self.frames[steps][:, :, : t.graph_size]  # (B, T, N, H, W)
        y = self.frames[s + t.t_in + t.lead - 1][:, : t.graph_size]
        x = np.ascontiguousarray(x.transpose(0, 2, 1, 3, 4))
        if self.scale != 1.0:
            x = x * np.float32(self.scale)
            y = y * np.float32(self.scale)
        return x, np.ascontiguousarray(y)

    def batches(self, batch_size: int, order: Sequence[int] | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        order = np.arange(len(self)) if order is None else np.asarray(order)
        for i in range(0, len(order), batch_size):
            yield self.batch(order[i : i + batch_size])


def make_windows(frames: np.ndarray, task: WindowTask, starts: Sequence[int] | None = None, start_hour: int = 0) -> Iterator[GraphSample]:
    if starts is None:
        starts = range(window_count(len(frames), task))
    for i in starts:
        x = frames[i : i + task.t_in, : task.graph_size].transpose(1, 0, 2, 3)
        y = frames[i + task.t_in + task.lead - 1, : task.graph_size]
        yield GraphSample(np.ascontiguousarray(x), y, start_hour + int(i))


# ---------------------------------------------------------------------------
# synthetic advected precipitation


@dataclass
class AdvectionParams:
    speed: float = 1.0  # pixels per hour
    rotation_period: float = 240.0  # hours for the flow direction to turn once
    correlation: float = 0.5  # weight of the field shared by all regions
    canvas: int = 128
    rain_fraction: float = 0.25
    peak_mm: float = 4.0


def gen_synthetic(
    seed: int,
    hours: int,
    n_nodes: int,
    height: int,
    width: int,
    advection: AdvectionParams | None = None,
    start_hour: int = HOUR_2016,
) -> PrecipDataset:
    """Smooth random rain cells advected by a slowly rotating uniform flow.

    Each region views its own offset on a periodic canvas that mixes a
    region-local pattern with a large-scale pattern common to all regions
    (weight ``correlation``). A second, finer modulation field drifts at half
    the flow speed so that cells grow and decay while moving; with
    ``speed == 0`` the whole field is static.
    """
    if hours < 100:
        raise ValueError("need at least 100 hours")
    p = advection or AdvectionParams()
    rng = np.random.default_rng(seed)
    S = p.canvas

    def smooth_noise(sigma: float) -> np.ndarray:
        f = ndimage.gaussian_filter(rng.standard_normal((S, S)), sigma, mode="wrap")
        return (f - f.mean()) / f.std()

    local = smooth_noise(S / 32)
    shared = smooth_noise(S / 8)
    modulation = smooth_noise(S / 24)
    rho = float(np.clip(p.correlation, 0.0, 1.0))

    phase = rng.uniform(0, 2 * math.pi)
    t = np.arange(hours, dtype=np.float64)
    theta = phase + 2 * math.pi * t / p.rotation_period
    disp = np.cumsum(np.stack([np.sin(theta), np.cos(theta)]) * p.speed, axis=1)
    disp -= disp[:, :1]

    offsets = rng.uniform(0, S, size=(n_nodes, 2))
    # regions sit close together on the large-scale pattern
    anchor = rng.uniform(0, S, size=2)
    shared_offsets = anchor + (offsets - S / 2) * (height / S)
    rows = np.arange(height)[:, None] + np.zeros((1, width))
    cols = np.zeros((height, 1)) + np.arange(width)[None, :]

    def sample(field_: np.ndarray, offs: np.ndarray, factor: float) -> np.ndarray:
        base_r = offs[:, 0, None, None] + rows[None]
        base_c = offs[:, 1, None, None] + cols[None]
        r = base_r[None] - factor * disp[0][:, None, None, None]
        c = base_c[None] - factor * disp[1][:, None, None, None]
        vals = ndimage.map_coordinates(field_, [r.ravel(), c.ravel()], order=1, mode="grid-wrap")
        return vals.reshape(hours, n_nodes, height, width)

    field_ = (
        math.sqrt(1 - rho**2) * sample(local, offsets, 1.0)
        + rho * sample(shared, shared_offsets, 1.0)
        + 0.5 * sample(modulation, offsets, 0.5)
    )
    thresh = np.quantile(field_, 1 - p.rain_fraction)
    excess = np.maximum(field_ - thresh, 0.0)
    top = np.quantile(excess[excess > 0], 0.99) if (excess > 0).any() else 1.0
    rain_mm = p.peak_mm * excess / top
    frames = (rain_mm * 1e-3).astype(np.float32)
    regions = [RegionSpec(f"R{i + 1}", 0.0, 0.0, width) for i in range(n_nodes)]
    return PrecipDataset(frames, start_hour, regions)
