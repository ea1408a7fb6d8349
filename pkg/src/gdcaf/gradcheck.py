"""Finite-difference sweep over every differentiable primitive and the full model."""

from __future__ import annotations

import numpy as np

from . import autodiff as ad
from .model import GDCAF, ModelConfig

TINY = dict(n_nodes=2, t_in=2, heads=2, blocks=1, height=4, width=4)


def _param(rng, shape, name, scale=1.0):
    return ad.Parameter(rng.standard_normal(shape) * scale, name)


def _weighted_sum(node: ad.Node, w: np.ndarray) -> ad.Node:
    # a random projection keeps every output element in play
    return ad.sum_all(ad.mul(node, ad.constant(w)))


def primitive_cases(rng: np.random.Generator) -> dict:
    """name -> (objective, params). Objectives are scalar, everything in float64."""
    cases = {}

    def add_case(name, build, *shapes_and_scales):
        params = [_param(rng, s, f"{name}.{i}", sc) for i, (s, sc) in enumerate(shapes_and_scales)]
        out_shape = build(*params).shape
        w = rng.standard_normal(out_shape)
        cases[name] = (lambda: _weighted_sum(build(*params), w), params)

    add_case("add", lambda a, b: ad.add(a, b), ((3, 4), 1), ((4,), 1))
    add_case("mul", lambda a, b: ad.mul(a, b), ((3, 4), 1), ((3, 1), 1))
    add_case("scale", lambda a: ad.scale(a, 0.7), ((5,), 1))
    add_case("reshape", lambda a: ad.reshape(a, (6, 2)), ((3, 4), 1))
    add_case("transpose", lambda a: ad.transpose(a, (2, 0, 1)), ((2, 3, 4), 1))
    add_case("concat", lambda a, b: ad.concat([a, b], axis=1), ((2, 3), 1), ((2, 2), 1))
    add_case("relu", ad.relu, ((4, 5), 1))
    add_case("leaky_relu", lambda a: ad.leaky_relu(a, 0.2), ((4, 5), 1))
    add_case("softmax", lambda a: ad.softmax(a, axis=-1), ((3, 5), 1))
    add_case("matmul", ad.matmul, ((2, 3, 4), 1), ((2, 4, 5), 1))
    add_case("pairwise_inner", lambda a, b: ad.pairwise_inner(a, b, 4), ((2, 3, 4), 1), ((2, 5, 4), 1))
    add_case("conv2d_depthwise", ad.conv2d_depthwise, ((2, 3, 5, 4), 1), ((3, 2, 3, 3), 1))
    add_case("conv2d_pointwise", ad.conv2d_pointwise, ((2, 3, 4, 4), 1), ((5, 3), 1), ((5,), 1))
    add_case(
        "conv2d_pointwise_grouped",
        ad.conv2d_pointwise,
        ((2, 6, 3, 3), 1),
        ((2, 4, 3), 1),
        ((2, 4), 1),
    )
    add_case(
        "group_norm",
        lambda x, g, b: ad.group_norm(x, 2, g, b),
        ((2, 4, 3, 3), 1),
        ((4,), 1),
        ((4,), 1),
    )
    add_case("avg_pool2", ad.avg_pool2, ((2, 3, 4, 6), 1))
    add_case("upsample2", ad.upsample2, ((2, 3, 2, 3), 1))

    pred = _param(rng, (3, 4), "mse.pred")
    target = rng.standard_normal((3, 4))
    cases["mse"] = (lambda: ad.mse(pred, target), [pred])
    return cases


def model_case(seed: int = 0, case: int = 1):
    cfg = ModelConfig.for_case(case, **TINY)
    model = GDCAF(cfg, seed=seed).astype(np.float64)
    rng = np.random.default_rng(seed + 100)
    X = rng.random((1, cfg.n_nodes, cfg.t_in, cfg.height, cfg.width))
    Y = rng.random((1, cfg.n_nodes, cfg.height, cfg.width))
    return (lambda: ad.mse(model(X), Y)), model.parameters()


def run_suite(seed: int = 0, eps: float = 1e-3, pooled_eps: float = 1e-4, cases=(1, 2, 3, 4)) -> dict[str, float]:
    """Worst relative error per primitive and per pooling case of the tiny model.

    Pooled variants normalize 2x2 maps, which are curved enough that the
    central difference at ``eps`` carries ~1% truncation error; they are
    checked at ``pooled_eps`` instead.
    """
    rng = np.random.default_rng(seed)
    results = {}
    for name, (f, params) in primitive_cases(rng).items():
        results[name] = ad.finite_diff_check(f, params, eps=eps)
    for c in cases:
        f, params = model_case(seed, c)
        step = eps if c == 1 else pooled_eps
        results[f"model_case{c}"] = ad.finite_diff_check(f, params, eps=step)
    return results
