"""Boundary-locating network: toy conv backbone, boundary feature encoder,
and four regression heads.

The encoder builds a horizontal and a vertical path: per-head 1x1 convs
produce single-channel attention maps that gate the feature map, the gated
maps are concatenated over heads, normalized by an axis softmax (along Y
for the horizontal path, along X for the vertical), reduced back to C
channels by a 1x1 conv, and summed along the normalized axis. The resulting
C x W and C x H vectors are split in half into per-boundary features; each
head mean-pools its feature matrix and maps it through a 3-layer MLP with a
sigmoid output, so every predicted boundary lies in (0, 1).

All model functions take batched input (B, 3, S, S). Parameters live in a
plain name -> Tensor dict.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .data import BOUNDARIES
from .tensor import Tensor


@dataclass(frozen=True)
class EncoderConfig:
    image_size: int = 64
    channels: int = 32
    feat_h: int = 8
    feat_w: int = 8
    heads: int = 6
    head_hidden: tuple[int, int] | None = None  # defaults to (C/2, C/4)

    def __post_init__(self):
        if min(self.channels, self.feat_h, self.feat_w, self.heads) < 1:
            raise ValueError("channels, feat dims and heads must be >= 1")
        if self.feat_h % 2 or self.feat_w % 2:
            raise ValueError("feature dims must be even (features split in half)")
        if self.feat_h != self.feat_w:
            raise ValueError("toy backbone needs square feature maps")
        ratio = self.image_size // self.feat_h
        if self.feat_h * ratio != self.image_size or ratio < 2 or ratio & (ratio - 1):
            raise ValueError(
                f"image_size {self.image_size} must be feat size {self.feat_h} "
                "times a power of two"
            )
        if self.head_hidden is None:
            object.__setattr__(
                self,
                "head_hidden",
                (max(self.channels // 2, 1), max(self.channels // 4, 1)),
            )
        else:
            object.__setattr__(self, "head_hidden", tuple(self.head_hidden))
            if len(self.head_hidden) != 2 or min(self.head_hidden) < 1:
                raise ValueError("head_hidden must be two positive widths")

    @property
    def n_stages(self) -> int:
        return (self.image_size // self.feat_h).bit_length() - 1

    @property
    def stage_channels(self) -> tuple[int, ...]:
        n = self.n_stages
        return tuple(max(self.channels >> (n - 1 - i), 4) for i in range(n - 1)) + (
            self.channels,
        )


@dataclass
class BoundaryFeatures:
    """Per-boundary feature matrices, batched: (B, C, W/2) or (B, C, H/2)."""

    x_l: Tensor
    x_r: Tensor
    x_t: Tensor
    x_b: Tensor

    def by_boundary(self) -> dict[str, Tensor]:
        return {"l": self.x_l, "r": self.x_r, "t": self.x_t, "b": self.x_b}


NS_INIT = 201  # seed-sequence namespace, disjoint from the data module's


def init_params(config: EncoderConfig, seed: int) -> dict[str, Tensor]:
    """He/Xavier-style seeded init; biases zero. Draw order is fixed."""
    rng = np.random.default_rng(np.random.SeedSequence([seed, NS_INIT]))
    params: dict[str, Tensor] = {}

    def conv(name, c_out, c_in, k, std):
        params[f"{name}.w"] = Tensor(
            rng.normal(0.0, std, size=(c_out, c_in, k, k)), requires_grad=True
        )
        params[f"{name}.b"] = Tensor(np.zeros(c_out), requires_grad=True)

    def linear(name, n_in, n_out, std):
        params[f"{name}.w"] = Tensor(
            rng.normal(0.0, std, size=(n_in, n_out)), requires_grad=True
        )
        params[f"{name}.b"] = Tensor(np.zeros(n_out), requires_grad=True)

    c_prev = 3
    for i, c_out in enumerate(config.stage_channels):
        conv(f"backbone.{i}", c_out, c_prev, 3, np.sqrt(2.0 / (c_prev * 9)))
        c_prev = c_out

    c = config.channels
    for path in ("h", "v"):
        # one kernel row per attention head; no bias: the axis softmax is
        # shift-invariant, so a logit bias would be an inert parameter
        params[f"attn_{path}.w"] = Tensor(
            rng.normal(0.0, np.sqrt(1.0 / c), size=(config.heads, c, 1, 1)),
            requires_grad=True,
        )
    for path in ("h", "v"):
        conv(f"reduce_{path}", c, config.heads * c, 1, np.sqrt(1.0 / (config.heads * c)))

    h1, h2 = config.head_hidden
    for d in BOUNDARIES:
        linear(f"head_{d}.0", c, h1, np.sqrt(2.0 / c))
        linear(f"head_{d}.1", h1, h2, np.sqrt(2.0 / h1))
        linear(f"head_{d}.2", h2, 1, np.sqrt(1.0 / h2))
    return params


def param_names(config: EncoderConfig) -> list[str]:
    return sorted(init_params(config, seed=0))


def head_param_names(params: dict[str, Tensor]) -> list[str]:
    return sorted(name for name in params if name.startswith("head_"))


def clone_params(params: dict[str, Tensor]) -> dict[str, Tensor]:
    return {
        name: Tensor(p.data.copy(), requires_grad=p.requires_grad)
        for name, p in params.items()
    }


def backbone_forward(images, params, config: EncoderConfig) -> Tensor:
    """(B, 3, S, S) -> (B, C, H, W) via stride-2 3x3 conv + relu stages."""
    x = T.as_tensor(images)
    if x.data.ndim != 4 or x.shape[1] != 3 or x.shape[2:] != (
        config.image_size,
        config.image_size,
    ):
        raise T.ShapeError(
            f"backbone_forward: expected (B, 3, {config.image_size}, "
            f"{config.image_size}), got {x.shape}"
        )
    for i in range(config.n_stages):
        x = T.relu(
            T.conv2d(
                x,
                params[f"backbone.{i}.w"],
                params[f"backbone.{i}.b"],
                stride=2,
                padding=1,
            )
        )
    return x


def _attention_path(feat, params, config: EncoderConfig, path: str, axis: int) -> Tensor:
    # Softmax the concatenated attention logit maps along the axis, then gate
    # the features. Normalizing the gated maps instead would make the final
    # axis sum input-independent (softmax columns sum to 1 and a 1x1 conv
    # commutes with the sum), collapsing h and v to constants.
    logits = T.conv2d(feat, params[f"attn_{path}.w"])  # (B, m, H, W), per head
    attn = T.softmax_axis(logits, axis=axis)
    gated = [
        T.multiply(T.slice_axis(attn, 1, i, i + 1), feat) for i in range(config.heads)
    ]
    stacked = T.concat(gated, axis=1)  # (B, mC, H, W)
    reduced = T.conv2d(stacked, params[f"reduce_{path}.w"], params[f"reduce_{path}.b"])
    return T.sum_axis(reduced, axis=axis)


def boundary_encode(feat, params, config: EncoderConfig) -> BoundaryFeatures:
    """(B, C, H, W) feature map -> four boundary feature matrices."""
    feat = T.as_tensor(feat)
    expected = (config.channels, config.feat_h, config.feat_w)
    if feat.data.ndim != 4 or feat.shape[1:] != expected:
        raise T.ShapeError(f"boundary_encode: expected (B,)+{expected}, got {feat.shape}")
    h_vec = _attention_path(feat, params, config, "h", axis=2)  # (B, C, W)
    v_vec = _attention_path(feat, params, config, "v", axis=3)  # (B, C, H)
    x_l, x_r = T.split(h_vec, 2, axis=2)
    x_t, x_b = T.split(v_vec, 2, axis=2)
    return BoundaryFeatures(x_l=x_l, x_r=x_r, x_t=x_t, x_b=x_b)


def pool_boundary_features(features: BoundaryFeatures) -> dict[str, Tensor]:
    """Mean-pool each (B, C, L) boundary matrix over positions -> (B, C)."""
    return {d: T.reduce_mean(x, axis=2) for d, x in features.by_boundary().items()}


def _head_mlp(pooled, params, d: str) -> Tensor:
    x = T.relu(T.add(T.matmul(pooled, params[f"head_{d}.0.w"]), params[f"head_{d}.0.b"]))
    x = T.relu(T.add(T.matmul(x, params[f"head_{d}.1.w"]), params[f"head_{d}.1.b"]))
    x = T.add(T.matmul(x, params[f"head_{d}.2.w"]), params[f"head_{d}.2.b"])
    return T.sigmoid(x)  # (B, 1)


def regress_boundary(x_d, params, d: str) -> Tensor:
    """One boundary's (B, C, L) feature matrix -> (B, 1) location in (0, 1)."""
    return _head_mlp(T.reduce_mean(T.as_tensor(x_d), axis=2), params, d)


def heads_forward(pooled: dict[str, Tensor], params) -> Tensor:
    """Pooled (B, C) features per boundary -> (B, 4) in (l, r, t, b) order."""
    return T.concat([_head_mlp(pooled[d], params, d) for d in BOUNDARIES], axis=1)


def encode_pooled(images, params, config: EncoderConfig) -> dict[str, Tensor]:
    feat = backbone_forward(images, params, config)
    return pool_boundary_features(boundary_encode(feat, params, config))


def model_forward(images, params, config: EncoderConfig):
    """Full pipeline: images -> ((B, 4) predictions, pooled feature dict).

    Heads consume the raw pooled features; unit-sphere normalization happens
    only inside the contrastive losses.
    """
    pooled = encode_pooled(images, params, config)
    return heads_forward(pooled, params), pooled


def make_predict_fn(params, config: EncoderConfig):
    """Numpy-in/numpy-out forward for evaluation (no graph recording)."""

    def predict(images: np.ndarray) -> np.ndarray:
        with T.no_grad():
            preds, _ = model_forward(Tensor(images), params, config)
        return preds.data

    return predict


def make_feature_fn(params, config: EncoderConfig):
    """Numpy-in forward returning pooled per-boundary features."""

    def features(images: np.ndarray) -> dict[str, np.ndarray]:
        with T.no_grad():
            pooled = encode_pooled(Tensor(images), params, config)
        return {d: pooled[d].data for d in BOUNDARIES}

    return features
