"""Finite-difference verification suite.

One case per registered tensor op (tolerance 1e-6) plus composite checks
through the backbone, the boundary encoder, one regression head, and the
full model-with-total-loss pipeline on a 4-sample batch (tolerance 1e-4).
Inputs for kinked ops (relu, absolute) are drawn away from the kink so the
central difference is valid.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable

import numpy as np

from . import losses as L
from . import tensor as T
from .model import (
    EncoderConfig,
    backbone_forward,
    boundary_encode,
    init_params,
    model_forward,
    pool_boundary_features,
    regress_boundary,
)
from .tensor import Tensor

OP_TOLERANCE = 1e-6
PIPELINE_TOLERANCE = 1e-4


@dataclass
class CheckCase:
    name: str
    tolerance: float
    build: Callable[[np.random.Generator], tuple[Callable[[], Tensor], list[Tensor]]]


@dataclass
class CheckResult:
    name: str
    tolerance: float
    error: float

    @property
    def passed(self) -> bool:
        return self.error < self.tolerance


def _param(rng, shape, lo=-1.0, hi=1.0) -> Tensor:
    return Tensor(rng.uniform(lo, hi, size=shape), requires_grad=True)


def _away_from_zero(rng, shape, margin=0.2) -> Tensor:
    sign = np.where(rng.uniform(size=shape) < 0.5, -1.0, 1.0)
    return Tensor(sign * rng.uniform(margin, 1.0 + margin, size=shape), requires_grad=True)


def _weighted_sum(out: Tensor, key: np.ndarray) -> Tensor:
    """Scalar-valued smooth functional of an op output."""
    picked = T.multiply(out, Tensor(key))
    for _ in range(picked.data.ndim):
        picked = T.sum_axis(picked, axis=0)
    return picked


def _key(rng, shape) -> np.ndarray:
    return rng.normal(size=shape)


def _case_add(rng):
    a, b = _param(rng, (2, 3)), _param(rng, (2, 3))
    k = _key(rng, (2, 3))
    return lambda: _weighted_sum(T.add(a, b), k), [a, b]


def _case_subtract(rng):
    a, b = _param(rng, (2, 3)), _param(rng, (1, 3))  # broadcast path
    k = _key(rng, (2, 3))
    return lambda: _weighted_sum(T.subtract(a, b), k), [a, b]


def _case_multiply(rng):
    a, b = _param(rng, (2, 3)), _param(rng, (2, 1))  # broadcast path
    k = _key(rng, (2, 3))
    return lambda: _weighted_sum(T.multiply(a, b), k), [a, b]


def _case_scalar_multiply(rng):
    a = _param(rng, (3, 2))
    k = _key(rng, (3, 2))
    return lambda: _weighted_sum(T.scalar_multiply(a, -1.7), k), [a]


def _case_matmul(rng):
    a, b = _param(rng, (2, 3)), _param(rng, (3, 4))
    k = _key(rng, (2, 4))
    return lambda: _weighted_sum(T.matmul(a, b), k), [a, b]


def _case_relu(rng):
    a = _away_from_zero(rng, (3, 4))
    k = _key(rng, (3, 4))
    return lambda: _weighted_sum(T.relu(a), k), [a]


def _case_exp(rng):
    a = _param(rng, (3, 3))
    k = _key(rng, (3, 3))
    return lambda: _weighted_sum(T.exp(a), k), [a]


def _case_sigmoid(rng):
    a = _param(rng, (3, 3), -2.0, 2.0)
    k = _key(rng, (3, 3))
    return lambda: _weighted_sum(T.sigmoid(a), k), [a]


def _case_sqrt(rng):
    a = _param(rng, (3, 3), 0.5, 1.5)
    k = _key(rng, (3, 3))
    return lambda: _weighted_sum(T.sqrt(a), k), [a]


def _case_power(rng):
    a = _param(rng, (3, 3), 0.5, 1.5)
    k = _key(rng, (3, 3))
    return lambda: T.add(
        _weighted_sum(T.power(a, 1.7), k), _weighted_sum(T.power(a, -0.5), k)
    ), [a]


def _case_absolute(rng):
    a = _away_from_zero(rng, (3, 4))
    k = _key(rng, (3, 4))
    return lambda: _weighted_sum(T.absolute(a), k), [a]


def _case_concat(rng):
    a, b = _param(rng, (2, 2)), _param(rng, (2, 3))
    k = _key(rng, (2, 5))
    return lambda: _weighted_sum(T.concat([a, b], axis=1), k), [a, b]


def _case_split(rng):
    a = _param(rng, (2, 6))
    k1, k2 = _key(rng, (2, 3)), _key(rng, (2, 3))

    def f():
        lo, hi = T.split(a, 2, axis=1)
        return T.add(_weighted_sum(lo, k1), T.scalar_multiply(_weighted_sum(hi, k2), 2.0))

    return f, [a]


def _case_sum_axis(rng):
    a = _param(rng, (3, 4, 2))
    k = _key(rng, (3, 2))
    return lambda: _weighted_sum(T.sum_axis(a, axis=1), k), [a]


def _case_reduce_mean(rng):
    a = _param(rng, (3, 4))
    k = _key(rng, (3,))
    return lambda: T.add(
        _weighted_sum(T.reduce_mean(a, axis=1), k), T.reduce_mean(a)
    ), [a]


def _case_softmax_axis(rng):
    a = _param(rng, (3, 5), -2.0, 2.0)
    k = _key(rng, (3, 5))
    return lambda: _weighted_sum(T.softmax_axis(a, axis=1), k), [a]


def _case_transpose(rng):
    a = _param(rng, (2, 4))
    k = _key(rng, (4, 2))
    return lambda: _weighted_sum(T.transpose(a), k), [a]


def _case_conv2d(rng):
    x = _param(rng, (2, 3, 6, 6))
    w3 = _param(rng, (4, 3, 3, 3))
    b3 = _param(rng, (4,))
    w1 = _param(rng, (2, 4, 1, 1))
    b1 = _param(rng, (2,))
    k = _key(rng, (2, 2, 3, 3))

    def f():
        mid = T.conv2d(x, w3, b3, stride=2, padding=1)  # (2, 4, 3, 3)
        out = T.conv2d(mid, w1, b1)  # 1x1 path
        return _weighted_sum(out, k)

    return f, [x, w3, b3, w1, b1]


def _case_l2_normalize_rows(rng):
    a = _away_from_zero(rng, (4, 3), margin=0.3)
    k = _key(rng, (4, 3))
    return lambda: _weighted_sum(T.l2_normalize_rows(a), k), [a]


_TINY_ENC = EncoderConfig(image_size=8, channels=4, feat_h=4, feat_w=4, heads=2)


def _tiny_params(rng):
    params = init_params(_TINY_ENC, seed=int(rng.integers(2**31)))
    # nudge biases off zero so no relu sits exactly at its kink
    for name, p in params.items():
        if name.endswith(".b"):
            p.data += rng.uniform(0.02, 0.1, size=p.data.shape)
    return params, sorted(params)


def _case_backbone(rng):
    params, names = _tiny_params(rng)
    x = Tensor(rng.uniform(size=(1, 3, 8, 8)))
    k = _key(rng, (1, 4, 4, 4))
    leaves = [params[n] for n in names if n.startswith("backbone.")]
    return lambda: _weighted_sum(backbone_forward(x, params, _TINY_ENC), k), leaves


def _case_boundary_encoder(rng):
    params, names = _tiny_params(rng)
    feat = Tensor(rng.uniform(size=(2, 4, 4, 4)), requires_grad=True)
    keys = {d: _key(rng, (2, 4, 2)) for d in ("l", "r", "t", "b")}
    leaves = [feat] + [
        params[n] for n in names if n.startswith(("attn_", "reduce_"))
    ]

    def f():
        bf = boundary_encode(feat, params, _TINY_ENC)
        terms = [_weighted_sum(x, keys[d]) for d, x in bf.by_boundary().items()]
        out = terms[0]
        for t in terms[1:]:
            out = T.add(out, t)
        return out

    return f, leaves


def _case_regression_head(rng):
    params, names = _tiny_params(rng)
    x_d = Tensor(rng.normal(size=(3, 4, 2)), requires_grad=True)
    k = _key(rng, (3, 1))
    leaves = [x_d] + [params[n] for n in names if n.startswith("head_l.")]
    return lambda: _weighted_sum(regress_boundary(x_d, params, "l"), k), leaves


def _case_pipeline(rng):
    """Full model + total loss (Eq.-style objective) on a 4-sample batch."""
    params, names = _tiny_params(rng)
    images = Tensor(rng.uniform(size=(4, 3, 8, 8)))
    # targets chosen so both positive and negative pairs exist per boundary
    targets = np.array(
        [
            [0.10, 0.90, 0.12, 0.88],
            [0.12, 0.88, 0.10, 0.90],
            [0.48, 0.52, 0.50, 0.55],
            [0.85, 0.15, 0.88, 0.12],
        ]
    )
    weights = L.LossWeights()
    leaves = [params[n] for n in names]

    def f():
        pred, pooled = model_forward(images, params, _TINY_ENC)
        return L.total_loss(pred, targets, pooled, weights).total

    return f, leaves


OP_CASES: dict[str, Callable] = {
    "add": _case_add,
    "subtract": _case_subtract,
    "multiply": _case_multiply,
    "scalar_multiply": _case_scalar_multiply,
    "matmul": _case_matmul,
    "relu": _case_relu,
    "exp": _case_exp,
    "sigmoid": _case_sigmoid,
    "sqrt": _case_sqrt,
    "power": _case_power,
    "absolute": _case_absolute,
    "concat": _case_concat,
    "split": _case_split,
    "sum_axis": _case_sum_axis,
    "reduce_mean": _case_reduce_mean,
    "softmax_axis": _case_softmax_axis,
    "transpose": _case_transpose,
    "conv2d": _case_conv2d,
    "l2_normalize_rows": _case_l2_normalize_rows,
}

COMPOSITE_CASES: dict[str, tuple[Callable, float]] = {
    "backbone": (_case_backbone, OP_TOLERANCE),
    "boundary_encoder": (_case_boundary_encoder, OP_TOLERANCE),
    "regression_head": (_case_regression_head, OP_TOLERANCE),
    "model_pipeline_total_loss": (_case_pipeline, PIPELINE_TOLERANCE),
}


def suite() -> list[CheckCase]:
    cases = [
        CheckCase(name=name, tolerance=OP_TOLERANCE, build=build)
        for name, build in OP_CASES.items()
    ]
    cases += [
        CheckCase(name=name, tolerance=tol, build=build)
        for name, (build, tol) in COMPOSITE_CASES.items()
    ]
    return cases


def run_suite(seed: int = 7, eps: float = 1e-5) -> list[CheckResult]:
    results = []
    for i, case in enumerate(suite()):
        rng = np.random.default_rng(np.random.SeedSequence([seed, 401, i]))
        f, params = case.build(rng)
        err = T.grad_check(f, params, eps=eps)
        results.append(CheckResult(name=case.name, tolerance=case.tolerance, error=err))
    return results
