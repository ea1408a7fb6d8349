"""Parameterized layers: the double depthwise-separable convolution block.

A block applies ``depthwise -> pointwise -> group norm -> relu`` twice. The same
block (same parameters) is applied to every graph node; node and batch axes are
simply leading axes of the input.

``DSConvBlock(..., parallel=K)`` packs K independent blocks that act on K
contiguous channel slices of the input, which is how the per-head query, key
and value projections are evaluated in a single pass.
"""

from __future__ import annotations

import json
import math
import struct
from pathlib import Path
from typing import Iterator

import numpy as np

from . import autodiff as ad
from .tensor import DTYPE, ShapeError, norm_groups

KERNEL = 3


class Module:
    """Minimal parameter container; children are discovered from attributes."""

    def named_parameters(self, prefix: str = "") -> Iterator[tuple[str, ad.Parameter]]:
        for attr, value in vars(self).items():
            name = f"{prefix}{attr}"
            if isinstance(value, ad.Parameter):
                yield name, value
            elif isinstance(value, Module):
                yield from value.named_parameters(name + ".")
            elif isinstance(value, (list, tuple)) and value and isinstance(value[0], Module):
                for i, child in enumerate(value):
                    yield from child.named_parameters(f"{name}.{i}.")

    def parameters(self) -> list[ad.Parameter]:
        return [p for _, p in self.named_parameters()]

    def assign_names(self) -> None:
        seen = set()
        for name, p in self.named_parameters():
            if id(p) in seen:
                raise ValueError(f"parameter registered twice: {name}")
            seen.add(id(p))
            p.name = name

    def zero_grad(self) -> None:
        for p in self.parameters():
            p.zero_grad()

    def num_parameters(self) -> int:
        return sum(p.value.size for p in self.parameters())

    def state_dict(self) -> dict[str, np.ndarray]:
        return {name: p.value.copy() for name, p in self.named_parameters()}

    def load_state_dict(self, state: dict[str, np.ndarray]) -> None:
        own = dict(self.named_parameters())
        missing = set(own) - set(state)
        extra = set(state) - set(own)
        if missing or extra:
            raise KeyError(f"state mismatch: missing={sorted(missing)} unexpected={sorted(extra)}")
        for name, p in own.items():
            arr = np.asarray(state[name])
            if arr.shape != p.value.shape:
                raise ShapeError(f"{name}: checkpoint shape {arr.shape} != {p.value.shape}")
            p.value = arr.astype(p.value.dtype).copy()
            p.zero_grad()

    def astype(self, dtype) -> "Module":
        for p in self.parameters():
            p.value = p.value.astype(dtype)
            p.zero_grad()
        return self


class _Stage(Module):
    def __init__(self, parallel: int, c_in: int, c_out: int, multiplier: int):
        self.depthwise = ad.Parameter(np.zeros((parallel, c_in, multiplier, KERNEL, KERNEL), DTYPE))
        self.pointwise = ad.Parameter(np.zeros((parallel, c_out, c_in * multiplier), DTYPE))
        self.bias = ad.Parameter(np.zeros((parallel, c_out), DTYPE))
        self.gamma = ad.Parameter(np.ones((parallel, c_out), DTYPE))
        self.beta = ad.Parameter(np.zeros((parallel, c_out), DTYPE))
        self.parallel, self.c_in, self.c_out, self.multiplier = parallel, c_in, c_out, multiplier
        self.groups = parallel * norm_groups(c_out)

    def init(self, rng: np.random.Generator) -> None:
        dw_bound = math.sqrt(1.0 / (KERNEL * KERNEL))
        pw_bound = math.sqrt(1.0 / (self.c_in * self.multiplier))
        self.depthwise.value = rng.uniform(-dw_bound, dw_bound, self.depthwise.shape).astype(DTYPE)
        self.pointwise.value = rng.uniform(-pw_bound, pw_bound, self.pointwise.shape).astype(DTYPE)
        for p, fill in ((self.bias, 0.0), (self.gamma, 1.0), (self.beta, 0.0)):
            p.value = np.full(p.shape, fill, DTYPE)

    def __call__(self, x: ad.Node) -> ad.Node:
        P, cin, cout, M = self.parallel, self.c_in, self.c_out, self.multiplier
        kernels = ad.reshape(self.depthwise, (P * cin, M, KERNEL, KERNEL))
        h = ad.conv2d_depthwise(x, kernels)
        h = ad.conv2d_pointwise(h, self.pointwise, self.bias)
        h = ad.group_norm(
            h,
            self.groups,
            ad.reshape(self.gamma, (P * cout,)),
            ad.reshape(self.beta, (P * cout,)),
        )
        return ad.relu(h)


class DSConvBlock(Module):
    """Double depthwise-separable convolution, ``in_channels -> out_channels``.

    The intermediate width is ``max(in_channels, out_channels)`` and both
    stages use the same depth multiplier.
    """

    def __init__(
        self,
        in_channels: int,
        out_channels: int,
        multiplier: int = 2,
        parallel: int = 1,
        seed: int | None = None,
    ):
        mid = max(in_channels, out_channels)
        self.in_channels, self.mid_channels, self.out_channels = in_channels, mid, out_channels
        self.multiplier, self.parallel = multiplier, parallel
        self.stage1 = _Stage(parallel, in_channels, mid, multiplier)
        self.stage2 = _Stage(parallel, mid, out_channels, multiplier)
        self.assign_names()
        if seed is not None:
            self.init(np.random.default_rng(seed))

    def init(self, rng: np.random.Generator) -> "DSConvBlock":
        self.stage1.init(rng)
        self.stage2.init(rng)
        return self

    def __call__(self, x) -> ad.Node:
        x = ad.as_node(x)
        expected = self.parallel * self.in_channels
        if x.value.ndim < 3 or x.shape[-3] != expected:
            raise ShapeError(f"block expects {expected} input channels, got shape {x.shape}")
        return self.stage2(self.stage1(x))


def ds_forward(block: DSConvBlock, x) -> ad.Node:
    return block(x)


def init_params(block: DSConvBlock, seed: int) -> DSConvBlock:
    return block.init(np.random.default_rng(seed))


def dsconv_param_count(c_in: int, c_out: int, multiplier: int = 2, kernel: int = KERNEL) -> int:
    """Closed-form parameter count of one (non-parallel) double block."""

    def stage(a: int, b: int) -> int:
        return a * multiplier * kernel * kernel + b * a * multiplier + b + 2 * b

    mid = max(c_in, c_out)
    return stage(c_in, mid) + stage(mid, c_out)


def separable_param_count(c: int, c_out: int, multiplier: int = 2, kernel: int = KERNEL) -> int:
    """One depthwise + pointwise pair (no normalization)."""
    return c * multiplier * kernel * kernel + c_out * c * multiplier + c_out


def standard_conv_param_count(c: int, c_out: int, kernel: int = KERNEL) -> int:
    return c_out * c * kernel * kernel + c_out


# ---------------------------------------------------------------------------
# checkpoint files: u64 LE header length, JSON header, float32 LE payloads

CHECKPOINT_FORMAT = "gdcaf-params-v1"


def save_parameters(path: str | Path, state: dict[str, np.ndarray], extra: dict | None = None) -> None:
    entries = []
    offset = 0
    payloads = []
    for name, arr in state.items():
        data = np.ascontiguousarray(arr, dtype="<f4").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "offset": offset})
        payloads.append(data)
        offset += len(data)
    header = {"format": CHECKPOINT_FORMAT, "tensors": entries}
    if extra:
        header["extra"] = extra
    raw = json.dumps(header, sort_keys=True).encode()
    with open(path, "wb") as fh:
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for data in payloads:
            fh.write(data)


def load_parameters(path: str | Path) -> tuple[dict[str, np.ndarray], dict]:
    with open(path, "rb") as fh:
        (n,) = struct.unpack("<Q", fh.read(8))
        header = json.loads(fh.read(n))
        body = fh.read()
    if header.get("format") != CHECKPOINT_FORMAT:
        raise ValueError(f"{path}: not a parameter checkpoint")
    state = {}
    for e in header["tensors"]:
        count = int(np.prod(e["shape"], dtype=np.int64))
        arr = np.frombuffer(body, dtype="<f4", count=count, offset=e["offset"])
        state[e["name"]] = arr.reshape(e["shape"]).astype(DTYPE)
    return state, header.get("extra", {})
