"""Graph dual-stream convolutional attention fusion network.

Shapes used throughout (batch ``B`` leads every array):

* input ``X``: ``(B, N, T, H, W)``; prediction: ``(B, N, H, W)``
* internal representation: ``(B, N, D, H, W)`` with ``D = K * T``; head ``k``
  owns depth slice ``[k*T, (k+1)*T)``.

Spatial attention mixes nodes separately for every (head, time position);
temporal attention mixes the T time positions of a head separately for every
node. Both use query/key/value projections that are double depthwise-separable
blocks shared across nodes.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .nn import DSConvBlock, Module
from .tensor import ShapeError

POOLING_CASES = {
    1: (False, False),
    2: (True, False),
    3: (False, True),
    4: (True, True),
}


@dataclass
class ModelConfig:
    n_nodes: int
    t_in: int
    heads: int = 4
    blocks: int = 2
    height: int = 32
    width: int = 32
    pool_qkv: bool = False
    pool_input: bool = False
    leaky_slope: float = 0.2
    multiplier: int = 2

    def __post_init__(self):
        for name in ("n_nodes", "t_in", "heads", "blocks", "height", "width", "multiplier"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        levels = int(self.pool_qkv) + int(self.pool_input)
        if levels:
            step = 2**levels
            if self.height % step or self.width % step:
                raise ValueError(
                    f"{self.height}x{self.width} maps cannot be pooled {levels} time(s)"
                )

    @property
    def depth(self) -> int:
        return self.heads * self.t_in

    @property
    def case_id(self) -> int:
        return {v: k for k, v in POOLING_CASES.items()}[(self.pool_qkv, self.pool_input)]

    @classmethod
    def for_case(cls, case: int, **kwargs) -> "ModelConfig":
        pool_qkv, pool_input = POOLING_CASES[case]
        return cls(pool_qkv=pool_qkv, pool_input=pool_input, **kwargs)

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class AttentionScores:
    """Per-block score arrays from the latest recorded forward.

    ``spatial[l]`` has shape ``(B, K, T, N, N)``: row ``i`` of ``[b, k, t]`` is
    the distribution of node ``i``'s attention over all nodes. ``temporal[l]``
    has shape ``(B, K, N, T, T)``: row ``t_i`` of ``[b, k, n]`` is the
    distribution over time positions.
    """

    spatial: list[np.ndarray] = field(default_factory=list)
    temporal: list[np.ndarray] = field(default_factory=list)


def _split_heads(x: ad.Node, heads: int) -> ad.Node:
    B, N, D, h, w = x.shape
    return ad.reshape(x, (B, N, heads, D // heads, h * w))


class SpatialAttention(Module):
    def __init__(self, cfg: ModelConfig):
        K, T, M = cfg.heads, cfg.t_in, cfg.multiplier
        self.query = DSConvBlock(T, T, M, parallel=K)
        self.key = DSConvBlock(T, T, M, parallel=K)
        self.value = DSConvBlock(T, T, M, parallel=K)
        self.post = DSConvBlock(K * T, K * T, M)
        self.heads, self.slope, self.pool = K, cfg.leaky_slope, cfg.pool_qkv

    def __call__(self, x: ad.Node, scores: list | None = None) -> ad.Node:
        src = ad.avg_pool2(x) if self.pool else x
        B, N, D, h, w = src.shape
        K = self.heads
        # (B, N, K, T, hw) -> (B, K, T, N, hw)
        q = ad.transpose(_split_heads(self.query(src), K), (0, 2, 3, 1, 4))
        k = ad.transpose(_split_heads(self.key(src), K), (0, 2, 3, 1, 4))
        v = ad.transpose(_split_heads(self.value(src), K), (0, 2, 3, 1, 4))
        s = ad.pairwise_inner(q, k, h * w)  # (B, K, T, N, N)
        alpha = ad.softmax(ad.leaky_relu(s, self.slope), axis=-1)
        if scores is not None:
            scores.append(alpha.value.copy())
        out = ad.matmul(alpha, v)  # (B, K, T, N, hw)
        out = ad.reshape(ad.transpose(out, (0, 3, 1, 2, 4)), (B, N, D, h, w))
        if self.pool:
            out = ad.upsample2(out)
        return self.post(out)


class TemporalAttention(Module):
    def __init__(self, cfg: ModelConfig):
        K, T, M = cfg.heads, cfg.t_in, cfg.multiplier
        self.query = DSConvBlock(T, T, M, parallel=K)
        self.key = DSConvBlock(T, T, M, parallel=K)
        self.value = DSConvBlock(T, T, M, parallel=K)
        self.post = DSConvBlock(K * T, K * T, M)
        self.heads, self.slope, self.pool = K, cfg.leaky_slope, cfg.pool_qkv

    def __call__(self, x: ad.Node, scores: list | None = None) -> ad.Node:
        src = ad.avg_pool2(x) if self.pool else x
        B, N, D, h, w = src.shape
        K = self.heads
        q = _split_heads(self.query(src), K)  # (B, N, K, T, hw)
        k = _split_heads(self.key(src), K)
        v = _split_heads(self.value(src), K)
        u = ad.pairwise_inner(q, k, h * w)  # (B, N, K, T, T)
        beta = ad.softmax(ad.leaky_relu(u, self.slope), axis=-1)
        if scores is not None:
            scores.append(np.ascontiguousarray(beta.value.transpose(0, 2, 1, 3, 4)))
        out = ad.reshape(ad.matmul(beta, v), (B, N, D, h, w))
        if self.pool:
            out = ad.upsample2(out)
        return self.post(out)


class STBlock(Module):
    def __init__(self, cfg: ModelConfig):
        self.spatial = SpatialAttention(cfg)
        self.temporal = TemporalAttention(cfg)
        self.fusion = DSConvBlock(2 * cfg.depth, cfg.depth, cfg.multiplier)

    def __call__(self, x: ad.Node, scores: AttentionScores | None = None) -> ad.Node:
        sp = scores.spatial if scores is not None else None
        tp = scores.temporal if scores is not None else None
        p = self.spatial(x, sp)
        o = self.temporal(x, tp)
        g = self.fusion(ad.concat([p, o], axis=2))
        return x + g


class GDCAF(Module):
    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg
        self.expand = DSConvBlock(cfg.t_in, cfg.depth, cfg.multiplier)
        self.blocks = [STBlock(cfg) for _ in range(cfg.blocks)]
        self.reduce = DSConvBlock(cfg.depth, 1, cfg.multiplier)
        self.assign_names()
        self.reset_parameters(seed)
        self.last_scores: AttentionScores | None = None

    def named_parameters(self, prefix: str = ""):
        yield from self.expand.named_parameters(prefix + "expand.")
        for i, b in enumerate(self.blocks):
            yield from b.named_parameters(f"{prefix}block{i + 1}.")
        yield from self.reduce.named_parameters(prefix + "reduce.")

    def reset_parameters(self, seed: int) -> None:
        rng = np.random.default_rng(seed)
        for block in _walk_blocks(self):
            block.init(rng)

    def input_expand(self, X: ad.Node) -> ad.Node:
        if self.cfg.pool_input:
            X = ad.avg_pool2(X)
        return self.expand(X)

    def output_reduce(self, x: ad.Node) -> ad.Node:
        if self.cfg.pool_input:
            x = ad.upsample2(x)
        y = self.reduce(x)
        B, N, _, H, W = y.shape
        return ad.reshape(y, (B, N, H, W))

    def check_input(self, X: np.ndarray) -> None:
        c = self.cfg
        expected = (c.t_in, c.height, c.width)
        if X.ndim != 5 or X.shape[2:] != expected:
            raise ShapeError(
                f"input must be (B, N, {c.t_in}, {c.height}, {c.width}), got {X.shape}"
            )

    def __call__(self, X, record: bool = False) -> ad.Node:
        X = ad.as_node(X)
        squeeze = X.value.ndim == 4
        if squeeze:
            X = ad.reshape(X, (1,) + X.shape)
        self.check_input(X.value)
        scores = AttentionScores() if record else None
        x = self.input_expand(X)
        for block in self.blocks:
            x = block(x, scores)
        y = self.output_reduce(x)
        if record:
            self.last_scores = scores
        if squeeze:
            y = ad.reshape(y, y.shape[1:])
        return y

    forward = __call__

    def predict(self, X: np.ndarray, record: bool = False) -> np.ndarray:
        dtype = self.parameters()[0].value.dtype
        return self(np.asarray(X, dtype=dtype), record=record).value


def _walk_blocks(module: Module):
    if isinstance(module, DSConvBlock):
        yield module
        return
    for value in vars(module).values():
        if isinstance(value, Module):
            yield from _walk_blocks(value)
        elif isinstance(value, list):
            for v in value:
                if isinstance(v, Module):
                    yield from _walk_blocks(v)


def attention_params_zero(model: GDCAF) -> None:
    """Zero every parameter of the attention and fusion branches."""
    for block in model.blocks:
        for p in block.parameters():
            p.value = np.zeros_like(p.value)


def forward_macs(cfg: ModelConfig, batch: int = 1) -> int:
    from .tensor import count_macs

    model = GDCAF(cfg, seed=0)
    X = np.zeros((batch, cfg.n_nodes, cfg.t_in, cfg.height, cfg.width), np.float32)
    with count_macs() as c:
        model(X)
    return c.total

